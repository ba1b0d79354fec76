//! VAE and context-encoding VAE baselines.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::augment::{cutout, sample_view, AugmentationPolicy};
use crate::data::{derive_rng, Dataset};
use crate::error::{Error, Result};
use crate::io::{Checkpoint, Manifest};
use crate::nn::{decoder_specs, encoder_specs, ConvNet};
use crate::tensor::{Adam, Graph, Tensor, Var};

const STREAM_INIT: u64 = 0x31;
const STREAM_SHUFFLE: u64 = 0x32;
const STREAM_VIEW: u64 = 0x33;
const STREAM_EPS: u64 = 0x34;
const STREAM_VAL: u64 = 0x35;

pub const LOGVAR_LIMIT: f32 = 10.0;
/// Half-width of the preprocessed intensity range.
const CLIP: f32 = 1.5;
const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeConfig {
    pub nz: usize,
    pub nf: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta: f32,
    pub gamma: f32,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            nz: 32,
            nf: 16,
            epochs: 20,
            batch_size: 64,
            lr: 1e-4,
            weight_decay: 0.0,
            beta: 1.0,
            gamma: 1.0,
        }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nz == 0 || self.nf == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("VAE nz, nf, epochs and batch size must be >= 1"));
        }
        if !(self.lr > 0.0) || !(self.beta >= 0.0) || !(self.gamma >= 0.0) {
            return Err(Error::invalid("VAE lr must be > 0 and beta, gamma >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeModel {
    pub resolution: usize,
    pub nf: usize,
    pub nz: usize,
    pub beta: f32,
    /// Weight of the restoration term; `None` for a plain VAE.
    pub gamma: Option<f32>,
    pub encoder: ConvNet,
    pub decoder: ConvNet,
}

pub struct VaeVars {
    pub enc: Vec<Var>,
    pub dec: Vec<Var>,
}

pub struct VaeOutputs {
    pub recon: Var,
    pub mean: Var,
    pub logvar: Var,
    pub z: Var,
}

/// Per-sample loss terms.
#[derive(Debug, Clone, PartialEq)]
pub struct VaeTerms {
    pub rec: Vec<f64>,
    pub kl: Vec<f64>,
    pub total: Vec<f64>,
}

/// Maps `[-1.5, 1.5]` onto `[0, 1]`.
pub fn to_target(x: f32) -> f32 {
    (x + CLIP) / (2.0 * CLIP)
}

pub fn from_target(t: f32) -> f32 {
    t * 2.0 * CLIP - CLIP
}

fn target_graph(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.scale(x, 1.0 / (2.0 * CLIP))?;
    g.add_scalar(s, 0.5)
}

/// `0.5 * sum_j (exp(lv_j) + m_j^2 - 1 - lv_j)` per row.
pub fn kl_diag_gaussian(mean: &Tensor, logvar: &Tensor) -> Result<Vec<f64>> {
    if mean.shape() != logvar.shape() || mean.ndim() != 2 {
        return Err(Error::shape(
            "kl_diag_gaussian",
            format!("mean {:?} vs logvar {:?}", mean.shape(), logvar.shape()),
        ));
    }
    let d = mean.shape()[1];
    Ok(mean
        .data()
        .chunks(d)
        .zip(logvar.data().chunks(d))
        .map(|(m, lv)| {
            0.5 * m
                .iter()
                .zip(lv)
                .map(|(&m, &lv)| {
                    let (m, lv) = (m as f64, lv as f64);
                    lv.exp() + m * m - 1.0 - lv
                })
                .sum::<f64>()
        })
        .collect())
}

/// Differentiable per-row KL to the standard normal, shape `(B)`.
pub fn kl_graph(g: &mut Graph, mean: Var, logvar: Var) -> Result<Var> {
    let e = g.exp(logvar)?;
    let m2 = g.square(mean)?;
    let s = g.add(e, m2)?;
    let s = g.sub(s, logvar)?;
    let s = g.add_scalar(s, -1.0)?;
    let r = g.row_sum(s)?;
    g.scale(r, 0.5)
}

/// Per-image `sum |target(x) - recon|`, shape `(B)`.
pub fn rec_graph(g: &mut Graph, x: Var, recon: Var) -> Result<Var> {
    let t = target_graph(g, x)?;
    let d = g.sub(t, recon)?;
    let a = g.abs(d)?;
    g.row_sum(a)
}

fn standard_normal(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}

impl VaeModel {
    pub fn new(resolution: usize, nf: usize, nz: usize, cevae: bool, rng: &mut impl Rng) -> Result<Self> {
        let encoder = ConvNet::new(encoder_specs(resolution, nf, 2 * nz)?, rng);
        let decoder = ConvNet::new(decoder_specs(resolution, nf, nz)?, rng);
        Ok(Self {
            resolution,
            nf,
            nz,
            beta: 1.0,
            gamma: cevae.then_some(1.0),
            encoder,
            decoder,
        })
    }

    pub fn is_cevae(&self) -> bool {
        self.gamma.is_some()
    }

    pub fn name(&self) -> &'static str {
        if self.is_cevae() {
            "cevae"
        } else {
            "vae"
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        match shape {
            [_, 1, h, w] if *h == self.resolution && *w == self.resolution => Ok(()),
            other => Err(Error::shape(
                "vae",
                format!("model built for (B, 1, {r}, {r}), got {other:?}", r = self.resolution),
            )),
        }
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> VaeVars {
        VaeVars {
            enc: self.encoder.bind(g, trainable),
            dec: self.decoder.bind(g, trainable),
        }
    }

    fn split_latent(&self, g: &mut Graph, h: Var, b: usize) -> Result<(Var, Var)> {
        let h = g.reshape(h, &[b, 2 * self.nz])?;
        let mean = g.slice_cols(h, 0, self.nz)?;
        let lv = g.slice_cols(h, self.nz, self.nz)?;
        let lv = g.clamp(lv, -LOGVAR_LIMIT, LOGVAR_LIMIT)?;
        Ok((mean, lv))
    }

    /// Eval-mode posterior mean and clamped log-variance, each `(B, nz)`.
    pub fn posterior_graph(&self, g: &mut Graph, vars: &VaeVars, x: Var) -> Result<(Var, Var)> {
        self.check_input(g.shape(x))?;
        let b = g.shape(x)[0];
        let h = self.encoder.forward(g, &vars.enc, x)?;
        self.split_latent(g, h, b)
    }

    /// Eval-mode decoding of `(B, nz)` latents.
    pub fn decode_graph(&self, g: &mut Graph, vars: &VaeVars, z: Var) -> Result<Var> {
        let b = g.shape(z)[0];
        let z = g.reshape(z, &[b, self.nz, 1, 1])?;
        self.decoder.forward(g, &vars.dec, z)
    }

    fn reparameterize(&self, g: &mut Graph, mean: Var, logvar: Var, eps: Option<&Tensor>) -> Result<Var> {
        match eps {
            None => Ok(mean),
            Some(eps) => {
                let half = g.scale(logvar, 0.5)?;
                let std = g.exp(half)?;
                let e = g.input(eps.clone());
                let noise = g.mul(std, e)?;
                g.add(mean, noise)
            }
        }
    }

    /// Eval-mode forward; `eps = None` decodes the posterior mean.
    pub fn forward_graph(&self, g: &mut Graph, vars: &VaeVars, x: Var, eps: Option<&Tensor>) -> Result<VaeOutputs> {
        let (mean, logvar) = self.posterior_graph(g, vars, x)?;
        let z = self.reparameterize(g, mean, logvar, eps)?;
        let recon = self.decode_graph(g, vars, z)?;
        Ok(VaeOutputs { recon, mean, logvar, z })
    }

    fn forward_train(&mut self, g: &mut Graph, vars: &VaeVars, x: Var, eps: Option<&Tensor>) -> Result<VaeOutputs> {
        self.check_input(g.shape(x))?;
        let b = g.shape(x)[0];
        let h = self.encoder.forward_train(g, &vars.enc, x)?;
        let (mean, logvar) = self.split_latent(g, h, b)?;
        let z = self.reparameterize(g, mean, logvar, eps)?;
        let zr = g.reshape(z, &[b, self.nz, 1, 1])?;
        let recon = self.decoder.forward_train(g, &vars.dec, zr)?;
        Ok(VaeOutputs { recon, mean, logvar, z })
    }

    /// Reconstruction, mean and log-variance with `eps ~ N(0, I)` drawn from `rng`.
    pub fn forward(&self, batch: &Tensor, rng: &mut impl Rng) -> Result<(Tensor, Tensor, Tensor)> {
        self.check_input(batch.shape())?;
        let eps = standard_normal(&[batch.shape()[0], self.nz], rng);
        self.forward_with(batch, Some(&eps))
    }

    pub fn forward_with(&self, batch: &Tensor, eps: Option<&Tensor>) -> Result<(Tensor, Tensor, Tensor)> {
        let mut g = Graph::inference();
        let vars = self.bind(&mut g, false);
        let x = g.input(batch.clone());
        let out = self.forward_graph(&mut g, &vars, x, eps)?;
        Ok((
            g.value(out.recon).clone(),
            g.value(out.mean).clone(),
            g.value(out.logvar).clone(),
        ))
    }

    /// Posterior means, `(B, nz)`.
    pub fn representation(&self, batch: &Tensor) -> Result<Tensor> {
        self.check_input(batch.shape())?;
        let b = batch.shape()[0];
        let per = batch.len() / b.max(1);
        let mut out = Vec::with_capacity(b * self.nz);
        for start in (0..b).step_by(EVAL_CHUNK) {
            let end = (start + EVAL_CHUNK).min(b);
            let chunk = Tensor::new(
                vec![end - start, 1, self.resolution, self.resolution],
                batch.data()[start * per..end * per].to_vec(),
            )?;
            let mut g = Graph::inference();
            let vars = self.bind(&mut g, false);
            let x = g.input(chunk);
            let (mean, _) = self.posterior_graph(&mut g, &vars, x)?;
            out.extend_from_slice(g.value(mean).data());
        }
        Tensor::new(vec![b, self.nz], out)
    }

    /// Per-sample rec, KL and `rec + beta * KL` for the given noise.
    pub fn terms(&self, batch: &Tensor, eps: Option<&Tensor>) -> Result<VaeTerms> {
        let mut g = Graph::inference();
        let vars = self.bind(&mut g, false);
        let x = g.input(batch.clone());
        let out = self.forward_graph(&mut g, &vars, x, eps)?;
        let rec = rec_graph(&mut g, x, out.recon)?;
        let rec: Vec<f64> = g.value(rec).data().iter().map(|&v| v as f64).collect();
        let kl = kl_diag_gaussian(g.value(out.mean), g.value(out.logvar))?;
        let total = rec.iter().zip(&kl).map(|(r, k)| r + self.beta as f64 * k).collect();
        Ok(VaeTerms { rec, kl, total })
    }

    /// Batch means of the ELBO terms with sampled noise: `(total, rec, kl)`.
    pub fn loss(&self, batch: &Tensor, rng: &mut impl Rng) -> Result<(f64, f64, f64)> {
        self.check_input(batch.shape())?;
        let eps = standard_normal(&[batch.shape()[0], self.nz], rng);
        let t = self.terms(batch, Some(&eps))?;
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        Ok((mean(&t.total), mean(&t.rec), mean(&t.kl)))
    }

    /// Mean per-image L1 between `target(x)` and the decoded posterior mean
    /// of `masked`.
    pub fn restoration(&self, batch: &Tensor, masked: &Tensor) -> Result<f64> {
        self.check_input(masked.shape())?;
        if batch.shape() != masked.shape() {
            return Err(Error::shape("restoration", "masked batch differs from batch"));
        }
        let mut g = Graph::inference();
        let vars = self.bind(&mut g, false);
        let xm = g.input(masked.clone());
        let (mean, _) = self.posterior_graph(&mut g, &vars, xm)?;
        let recon = self.decode_graph(&mut g, &vars, mean)?;
        let x = g.input(batch.clone());
        let r = rec_graph(&mut g, x, recon)?;
        let r = g.mean(r)?;
        Ok(g.value(r).item() as f64)
    }

    /// ELBO loss plus `gamma` times the restoration of a cutout copy.
    pub fn cevae_loss(&self, batch: &Tensor, rng: &mut impl Rng) -> Result<f64> {
        let gamma = self
            .gamma
            .ok_or_else(|| Error::invalid("cevae_loss needs a model with a restoration weight"))?;
        let (total, ..) = self.loss(batch, rng)?;
        let masked = cutout_batch(batch, cutout_range(), rng)?;
        Ok(total + gamma as f64 * self.restoration(batch, &masked)?)
    }

    pub fn manifest(&self) -> Manifest {
        Manifest::new()
            .with("kind", self.name())
            .with("nz", self.nz)
            .with("nf", self.nf)
            .with("resolution", self.resolution)
            .with("beta", self.beta)
            .with("gamma", self.gamma.unwrap_or(0.0))
    }

    pub fn save_into(&self, ck: &mut Checkpoint) {
        self.encoder.save_into(ck, "encoder");
        self.decoder.save_into(ck, "decoder");
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let m = &ck.manifest;
        let cevae = match m.require("kind")? {
            "vae" => false,
            "cevae" => true,
            other => {
                return Err(Error::Format {
                    what: "vae checkpoint",
                    detail: format!("kind {other:?} is not a VAE"),
                })
            }
        };
        let mut model = Self::new(
            m.parse_value("resolution")?,
            m.parse_value("nf")?,
            m.parse_value("nz")?,
            cevae,
            &mut ChaCha8Rng::seed_from_u64(0),
        )?;
        model.beta = m.parse_value("beta")?;
        if cevae {
            model.gamma = Some(m.parse_value("gamma")?);
        }
        model.encoder.load_from(ck, "encoder")?;
        model.decoder.load_from(ck, "decoder")?;
        Ok(model)
    }
}

fn cutout_range() -> [f64; 2] {
    AugmentationPolicy::cevae().cutout_area.expect("ceVAE preset has a cutout range")
}

fn cutout_batch(batch: &Tensor, area: [f64; 2], rng: &mut impl Rng) -> Result<Tensor> {
    let (b, h, w) = match batch.shape() {
        [b, 1, h, w] => (*b, *h, *w),
        other => return Err(Error::shape("cutout", format!("expected (B, 1, H, W), got {other:?}"))),
    };
    let mut out = Vec::with_capacity(batch.len());
    for i in 0..b {
        let img = Tensor::new(vec![h, w], batch.data()[i * h * w..(i + 1) * h * w].to_vec())?;
        out.extend_from_slice(cutout(&img, rng, area)?.0.data());
    }
    Tensor::new(batch.shape().to_vec(), out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_rec: f64,
    pub val_loss: f64,
}

pub struct VaeRun {
    pub model: VaeModel,
    pub history: Vec<VaeEpoch>,
    pub selected_epoch: usize,
}

impl VaeRun {
    pub fn history_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,train_rec,val_loss\n");
        for e in &self.history {
            s.push_str(&format!("{},{},{},{}\n", e.epoch, e.train_loss, e.train_rec, e.val_loss));
        }
        s
    }
}

fn views(data: &Dataset, idx: &[usize], policy: &AugmentationPolicy, mut rng_for: impl FnMut(usize) -> ChaCha8Rng) -> Result<Tensor> {
    let r = data.resolution;
    let mut out = Vec::with_capacity(idx.len() * r * r);
    for &i in idx {
        let v = sample_view(&data.samples[i].image, policy, &mut rng_for(i))?;
        out.extend_from_slice(v.data());
    }
    Tensor::new(vec![idx.len(), 1, r, r], out)
}

/// Validation loss: fixed noise and fixed cutouts per sample.
fn validation_loss(model: &VaeModel, data: &Dataset, area: [f64; 2], batch_size: usize, seed: u64) -> Result<f64> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(batch_size) {
        let x = data.batch(chunk)?;
        let mut rngs: Vec<ChaCha8Rng> = chunk.iter().map(|&i| derive_rng(seed, STREAM_VAL, i as u64)).collect();
        let mut eps = Vec::with_capacity(chunk.len() * model.nz);
        for rng in &mut rngs {
            eps.extend((0..model.nz).map(|_| -> f32 { StandardNormal.sample(rng) }));
        }
        let eps = Tensor::new(vec![chunk.len(), model.nz], eps)?;
        let t = model.terms(&x, Some(&eps))?;
        total += t.total.iter().sum::<f64>();
        if let Some(gamma) = model.gamma {
            let r = data.resolution;
            let mut masked = Vec::with_capacity(x.len());
            for (k, rng) in rngs.iter_mut().enumerate() {
                let img = Tensor::new(vec![r, r], x.data()[k * r * r..(k + 1) * r * r].to_vec())?;
                masked.extend_from_slice(cutout(&img, rng, area)?.0.data());
            }
            let masked = Tensor::new(x.shape().to_vec(), masked)?;
            total += gamma as f64 * model.restoration(&x, &masked)? * chunk.len() as f64;
        }
    }
    Ok(total / data.len().max(1) as f64)
}

/// Trains a VAE (or ceVAE when `cevae`) on a normal-only split and returns
/// the epoch snapshot with the lowest loss on `holdout`.
pub fn train_vae(train: &Dataset, holdout: &Dataset, cfg: &VaeConfig, cevae: bool, seed: u64) -> Result<VaeRun> {
    cfg.validate()?;
    if train.is_empty() || holdout.is_empty() {
        return Err(Error::invalid("VAE training needs non-empty train and holdout splits"));
    }
    if train.samples.iter().any(|s| s.slice_label) {
        return Err(Error::invalid("VAE training expects a normal-only split"));
    }
    let view_policy = AugmentationPolicy::vae();
    let area = cutout_range();
    let mut model = VaeModel::new(train.resolution, cfg.nf, cfg.nz, cevae, &mut derive_rng(seed, STREAM_INIT, 0))?;
    model.beta = cfg.beta;
    if cevae {
        model.gamma = Some(cfg.gamma);
    }
    let mut opt_enc = Adam::new(cfg.weight_decay);
    let mut opt_dec = Adam::new(cfg.weight_decay);
    let n = train.len();
    let name = model.name();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, VaeModel)> = None;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut derive_rng(seed, STREAM_SHUFFLE, epoch as u64));
        let (mut sum_loss, mut sum_rec) = (0.0, 0.0);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let diag = |e: Error| match e {
                Error::NonFinite { context } => Error::NonFinite {
                    context: format!("{context} ({name} epoch {epoch}, batch {bi})"),
                },
                other => other,
            };
            let b = chunk.len();
            let x = views(train, chunk, &view_policy, |i| derive_rng(seed, STREAM_VIEW, (epoch * n + i) as u64))?;
            let mut rng = derive_rng(seed, STREAM_EPS, (epoch * n + bi) as u64);
            let eps = standard_normal(&[b, model.nz], &mut rng);
            let mut g = Graph::new();
            let vars = model.bind(&mut g, true);
            let xv = g.input(x.clone());
            let out = model.forward_train(&mut g, &vars, xv, Some(&eps)).map_err(diag)?;
            let rec = rec_graph(&mut g, xv, out.recon).map_err(diag)?;
            let rec = g.mean(rec).map_err(diag)?;
            let kl = kl_graph(&mut g, out.mean, out.logvar).map_err(diag)?;
            let kl = g.mean(kl).map_err(diag)?;
            let kl = g.scale(kl, model.beta).map_err(diag)?;
            let mut loss = g.add(rec, kl).map_err(diag)?;
            if let Some(gamma) = model.gamma {
                let masked = cutout_batch(&x, area, &mut rng)?;
                let xm = g.input(masked);
                let hm = model.encoder.forward_train(&mut g, &vars.enc, xm).map_err(diag)?;
                let (mean_m, _) = model.split_latent(&mut g, hm, b).map_err(diag)?;
                let zm = g.reshape(mean_m, &[b, model.nz, 1, 1])?;
                let restored = model.decoder.forward_train(&mut g, &vars.dec, zm).map_err(diag)?;
                let r = rec_graph(&mut g, xv, restored).map_err(diag)?;
                let r = g.mean(r).map_err(diag)?;
                let r = g.scale(r, gamma).map_err(diag)?;
                loss = g.add(loss, r).map_err(diag)?;
            }
            sum_loss += g.value(loss).item() as f64 * b as f64;
            sum_rec += g.value(rec).item() as f64 * b as f64;
            g.backward(loss, None)?;
            let ge: Vec<Tensor> = vars.enc.iter().map(|&v| g.grad_or_zeros(v)).collect();
            let gd: Vec<Tensor> = vars.dec.iter().map(|&v| g.grad_or_zeros(v)).collect();
            opt_enc.step(&mut model.encoder.params, &ge, cfg.lr).map_err(diag)?;
            opt_dec.step(&mut model.decoder.params, &gd, cfg.lr).map_err(diag)?;
        }
        let val_loss = validation_loss(&model, holdout, area, cfg.batch_size, seed)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFinite {
                context: format!("{} validation loss at epoch {epoch}", model.name()),
            });
        }
        history.push(VaeEpoch {
            epoch,
            train_loss: sum_loss / n as f64,
            train_rec: sum_rec / n as f64,
            val_loss,
        });
        if best.as_ref().is_none_or(|(v, ..)| val_loss < *v) {
            best = Some((val_loss, epoch, model.clone()));
        }
    }
    let (_, selected_epoch, model) = best.expect("at least one epoch");
    Ok(VaeRun {
        model,
        history,
        selected_epoch,
    })
}
