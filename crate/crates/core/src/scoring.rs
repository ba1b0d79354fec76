//! Slice-level anomaly scores, pixel-level heatmaps and heatmap
//! post-processing.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::contrastive::EncoderModel;
use crate::density::{FlowModel, GmmModel};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};
use crate::vae::{kl_graph, VaeModel};

/// Images per differentiation graph when computing gradient heatmaps.
const GRAD_CHUNK: usize = 32;

/// Anything that maps `(B, 1, H, W)` images to `(B, d)` representations
/// differentiably.
pub trait Representation {
    fn dim(&self) -> usize;

    /// Adds the encoding of `x` to `g` with the model held constant.
    fn encode_graph(&self, g: &mut Graph, x: Var) -> Result<Var>;

    fn encode(&self, batch: &Tensor) -> Result<Tensor> {
        let mut g = Graph::inference();
        let x = g.input(batch.clone());
        let z = self.encode_graph(&mut g, x)?;
        Ok(g.value(z).clone())
    }
}

impl Representation for EncoderModel {
    fn dim(&self) -> usize {
        self.nz
    }

    fn encode_graph(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let vars = self.net.bind(g, false);
        EncoderModel::encode_graph(self, g, &vars, x)
    }

    fn encode(&self, batch: &Tensor) -> Result<Tensor> {
        EncoderModel::encode(self, batch)
    }
}

/// Posterior means.
impl Representation for VaeModel {
    fn dim(&self) -> usize {
        self.nz
    }

    fn encode_graph(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let vars = self.bind(g, false);
        Ok(self.posterior_graph(g, &vars, x)?.0)
    }

    fn encode(&self, batch: &Tensor) -> Result<Tensor> {
        self.representation(batch)
    }
}

/// Flattens every image to a vector of its pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IdentityEncoder {
    pub pixels: usize,
}

impl Representation for IdentityEncoder {
    fn dim(&self) -> usize {
        self.pixels
    }

    fn encode_graph(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let b = g.shape(x)[0];
        g.reshape(x, &[b, self.pixels])
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Density<'a> {
    Gmm(&'a GmmModel),
    Flow(&'a FlowModel),
}

impl Density<'_> {
    pub fn dim(&self) -> usize {
        match self {
            Density::Gmm(m) => m.dim(),
            Density::Flow(f) => f.dim,
        }
    }

    /// Negative log-density per row of `z`.
    pub fn nll(&self, z: &Tensor) -> Result<Vec<f64>> {
        match self {
            Density::Gmm(m) => m.nll_batch(z),
            Density::Flow(f) => Ok(f.log_prob(z)?.into_iter().map(|v| -v).collect()),
        }
    }
}

/// The models behind one scoring method.
#[derive(Clone, Copy)]
pub enum Scorer<'a> {
    Nll {
        encoder: &'a dyn Representation,
        density: Density<'a>,
    },
    Vae(&'a VaeModel),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    NllGmm,
    NllFlow,
    Elbo,
    Kl,
    Rec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeatmapKind {
    NllGrad,
    Rec,
    KlGrad,
    Combi,
}

impl ScoreKind {
    pub const ALL: [ScoreKind; 5] = [
        ScoreKind::NllGmm,
        ScoreKind::NllFlow,
        ScoreKind::Elbo,
        ScoreKind::Kl,
        ScoreKind::Rec,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScoreKind::NllGmm => "nll_gmm",
            ScoreKind::NllFlow => "nll_flow",
            ScoreKind::Elbo => "elbo",
            ScoreKind::Kl => "kl",
            ScoreKind::Rec => "rec",
        }
    }
}

impl HeatmapKind {
    pub const ALL: [HeatmapKind; 4] = [
        HeatmapKind::NllGrad,
        HeatmapKind::Rec,
        HeatmapKind::KlGrad,
        HeatmapKind::Combi,
    ];

    pub fn name(self) -> &'static str {
        match self {
            HeatmapKind::NllGrad => "nll_grad",
            HeatmapKind::Rec => "rec",
            HeatmapKind::KlGrad => "kl_grad",
            HeatmapKind::Combi => "combi",
        }
    }
}

macro_rules! named_enum {
    ($t:ty, $what:literal) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $t {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                Self::ALL
                    .into_iter()
                    .find(|k| k.name() == s)
                    .ok_or_else(|| Error::invalid(format!("unknown {} {s:?}", $what)))
            }
        }
    };
}

named_enum!(ScoreKind, "score kind");
named_enum!(HeatmapKind, "heatmap kind");

fn mismatch(kind: impl fmt::Display) -> Error {
    Error::invalid(format!("scoring kind {kind} does not match the supplied models"))
}

fn image_dims(batch: &Tensor) -> Result<(usize, usize, usize)> {
    match batch.shape() {
        [b, 1, h, w] => Ok((*b, *h, *w)),
        other => Err(Error::shape("scoring", format!("expected (B, 1, H, W), got {other:?}"))),
    }
}

/// One slice score per image; higher is more anomalous.
pub fn detection_scores(kind: ScoreKind, scorer: Scorer<'_>, batch: &Tensor) -> Result<Vec<f64>> {
    image_dims(batch)?;
    let scores = match (kind, scorer) {
        (ScoreKind::NllGmm, Scorer::Nll { encoder, density: d @ Density::Gmm(_) })
        | (ScoreKind::NllFlow, Scorer::Nll { encoder, density: d @ Density::Flow(_) }) => {
            if encoder.dim() != d.dim() {
                return Err(Error::shape(
                    "detection_scores",
                    format!("representation dimension {} vs density dimension {}", encoder.dim(), d.dim()),
                ));
            }
            d.nll(&encoder.encode(batch)?)?
        }
        (ScoreKind::Elbo | ScoreKind::Kl | ScoreKind::Rec, Scorer::Vae(vae)) => {
            let t = vae.terms(batch, None)?;
            match kind {
                ScoreKind::Elbo => t.total,
                ScoreKind::Kl => t.kl,
                _ => t.rec,
            }
        }
        _ => return Err(mismatch(kind)),
    };
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite {
            context: format!("{kind} score of image {i}"),
        });
    }
    Ok(scores)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    /// `(H, W)`, non-negative.
    pub map: Tensor,
    pub kind: HeatmapKind,
    pub postprocessed: bool,
}

fn split_maps(t: &Tensor, b: usize, h: usize, w: usize, kind: HeatmapKind) -> Result<Vec<Heatmap>> {
    t.data()
        .chunks(h * w)
        .take(b)
        .map(|c| {
            Ok(Heatmap {
                map: Tensor::new(vec![h, w], c.to_vec())?,
                kind,
                postprocessed: false,
            })
        })
        .collect()
}

/// `|d loss / d x|` for every pixel, `loss` built per chunk by `build`.
fn input_gradient(
    batch: &Tensor,
    mut build: impl FnMut(&mut Graph, Var) -> Result<(Var, Option<Tensor>)>,
) -> Result<Tensor> {
    let (b, h, w) = image_dims(batch)?;
    let per = h * w;
    let mut out = Vec::with_capacity(batch.len());
    for start in (0..b).step_by(GRAD_CHUNK) {
        let end = (start + GRAD_CHUNK).min(b);
        let chunk = Tensor::new(vec![end - start, 1, h, w], batch.data()[start * per..end * per].to_vec())?;
        let mut g = Graph::new();
        let x = g.param(chunk);
        let (out_var, seed) = build(&mut g, x)?;
        g.backward(out_var, seed.as_ref())?;
        out.extend(g.grad_or_zeros(x).data().iter().map(|v| v.abs()));
    }
    Tensor::new(vec![b, h, w], out)
}

fn nll_grad(encoder: &dyn Representation, density: Density<'_>, batch: &Tensor) -> Result<Tensor> {
    input_gradient(batch, |g, x| {
        let z = encoder.encode_graph(g, x)?;
        match density {
            Density::Gmm(m) => {
                let zt = g.value(z).clone();
                let d = m.dim();
                let mut seed = Vec::with_capacity(zt.len());
                for row in zt.data().chunks(d) {
                    seed.extend(m.nll_grad(row)?.into_iter().map(|v| v as f32));
                }
                Ok((z, Some(Tensor::new(zt.shape().to_vec(), seed)?)))
            }
            Density::Flow(f) => {
                let vars = f.bind(g, false);
                let lp = f.log_prob_graph(g, &vars, z)?;
                let s = g.sum(lp)?;
                Ok((g.scale(s, -1.0)?, None))
            }
        }
    })
}

fn rec_map(vae: &VaeModel, batch: &Tensor) -> Result<Tensor> {
    let (b, h, w) = image_dims(batch)?;
    let (recon, ..) = vae.forward_with(batch, None)?;
    let data = batch
        .data()
        .iter()
        .zip(recon.data())
        .map(|(&x, &r)| (crate::vae::to_target(x) - r).abs())
        .collect();
    Tensor::new(vec![b, h, w], data)
}

fn kl_grad(vae: &VaeModel, batch: &Tensor) -> Result<Tensor> {
    input_gradient(batch, |g, x| {
        let vars = vae.bind(g, false);
        let (mean, logvar) = vae.posterior_graph(g, &vars, x)?;
        let kl = kl_graph(g, mean, logvar)?;
        Ok((g.sum(kl)?, None))
    })
}

/// Raw per-pixel anomaly maps, one per image.
pub fn heatmaps(kind: HeatmapKind, scorer: Scorer<'_>, batch: &Tensor) -> Result<Vec<Heatmap>> {
    let (b, h, w) = image_dims(batch)?;
    let maps = match (kind, scorer) {
        (HeatmapKind::NllGrad, Scorer::Nll { encoder, density }) => {
            if encoder.dim() != density.dim() {
                return Err(Error::shape(
                    "heatmaps",
                    format!("representation dimension {} vs density dimension {}", encoder.dim(), density.dim()),
                ));
            }
            nll_grad(encoder, density, batch)?
        }
        (HeatmapKind::Rec, Scorer::Vae(vae)) => rec_map(vae, batch)?,
        (HeatmapKind::KlGrad, Scorer::Vae(vae)) => kl_grad(vae, batch)?,
        (HeatmapKind::Combi, Scorer::Vae(vae)) => combi(&kl_grad(vae, batch)?, &rec_map(vae, batch)?)?,
        _ => return Err(mismatch(kind)),
    };
    split_maps(&maps, b, h, w, kind)
}

/// Elementwise product of a KL-gradient map and a reconstruction map.
pub fn combi(kl_grad: &Tensor, rec: &Tensor) -> Result<Tensor> {
    if kl_grad.shape() != rec.shape() {
        return Err(Error::shape("combi", format!("{:?} vs {:?}", kl_grad.shape(), rec.shape())));
    }
    Tensor::new(
        kl_grad.shape().to_vec(),
        kl_grad.data().iter().zip(rec.data()).map(|(a, b)| a * b).collect(),
    )
}

fn map_dims(map: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match map.shape() {
        [h, w] if *h > 0 && *w > 0 => Ok((*h, *w)),
        other => Err(Error::shape(op, format!("expected (H, W), got {other:?}"))),
    }
}

/// Mirror index without repeating the edge: `-1 -> 1`, `n -> n - 2`.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Stride-1 median filter with reflect padding.
pub fn median_pool2d(map: &Tensor, kernel: usize) -> Result<Tensor> {
    let (h, w) = map_dims(map, "median_pool2d")?;
    if kernel % 2 == 0 {
        return Err(Error::invalid(format!("median kernel {kernel} must be odd")));
    }
    if kernel > 2 * h.min(w) {
        return Err(Error::invalid(format!("median kernel {kernel} too large for a {h}x{w} map")));
    }
    let r = (kernel / 2) as isize;
    let src = map.data();
    let mut window = Vec::with_capacity(kernel * kernel);
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h as isize {
        for j in 0..w as isize {
            window.clear();
            for di in -r..=r {
                let row = reflect(i + di, h) * w;
                for dj in -r..=r {
                    window.push(src[row + reflect(j + dj, w)]);
                }
            }
            let mid = window.len() / 2;
            let (_, m, _) = window.select_nth_unstable_by(mid, f32::total_cmp);
            out.push(*m);
        }
    }
    Tensor::new(vec![h, w], out)
}

/// Normalized sampled Gaussian of radius `ceil(4 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("sigma must be > 0, got {sigma}")));
    }
    let radius = (4.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    Ok(k.into_iter().map(|v| v / total).collect())
}

/// Separable Gaussian blur with reflect padding.
pub fn gaussian_smooth(map: &Tensor, sigma: f64) -> Result<Tensor> {
    let (h, w) = map_dims(map, "gaussian_smooth")?;
    let k = gaussian_kernel(sigma)?;
    let r = (k.len() / 2) as isize;
    let src = map.data();
    let mut tmp = vec![0.0f64; h * w];
    for i in 0..h {
        for j in 0..w as isize {
            tmp[i * w + j as usize] = k
                .iter()
                .enumerate()
                .map(|(t, kv)| kv * src[i * w + reflect(j + t as isize - r, w)] as f64)
                .sum();
        }
    }
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h as isize {
        for j in 0..w {
            let v: f64 = k
                .iter()
                .enumerate()
                .map(|(t, kv)| kv * tmp[reflect(i + t as isize - r, h) * w + j])
                .sum();
            out.push(v as f32);
        }
    }
    Tensor::new(vec![h, w], out)
}

/// Zeroes every pixel outside `mask`.
pub fn mask_outside(map: &Tensor, mask: &[bool]) -> Result<Tensor> {
    map_dims(map, "mask_outside")?;
    if mask.len() != map.len() {
        return Err(Error::shape(
            "mask_outside",
            format!("mask of {} pixels for a map of {}", mask.len(), map.len()),
        ));
    }
    Tensor::new(
        map.shape().to_vec(),
        map.data().iter().zip(mask).map(|(&v, &m)| if m { v } else { 0.0 }).collect(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PostprocessConfig {
    pub median_kernel: usize,
    pub sigma: f64,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self {
            median_kernel: 5,
            sigma: 2.0,
        }
    }
}

/// Masking, then median pooling, then Gaussian smoothing.
pub fn postprocess(heatmap: &Heatmap, brain_mask: &[bool], cfg: &PostprocessConfig) -> Result<Heatmap> {
    let masked = mask_outside(&heatmap.map, brain_mask)?;
    let pooled = median_pool2d(&masked, cfg.median_kernel)?;
    Ok(Heatmap {
        map: gaussian_smooth(&pooled, cfg.sigma)?,
        kind: heatmap.kind,
        postprocessed: true,
    })
}
