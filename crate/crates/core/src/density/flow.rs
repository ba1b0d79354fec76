//! Coupling-layer normalizing flow with a standard-normal base.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::LN_2PI;
use crate::data::derive_rng;
use crate::error::{Error, Result};
use crate::io::{Checkpoint, Manifest};
use crate::nn::Mlp;
use crate::tensor::{clip_grad_norm, Adam, Graph, LrSchedule, Tensor, Var};

const STREAM_INIT: u64 = 0x21;
const STREAM_SHUFFLE: u64 = 0x22;
const STREAM_NOISE: u64 = 0x23;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub blocks: usize,
    /// Hidden width of each coupling network; `None` uses the input dimension.
    pub hidden: Option<usize>,
    /// Affine coupling (scale and shift) instead of shift only.
    pub affine: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub noise: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            blocks: 4,
            hidden: None,
            affine: false,
            epochs: 60,
            batch_size: 64,
            lr: 1e-3,
            weight_decay: 1e-4,
            grad_clip: 5.0,
            noise: 1e-3,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("flow blocks, epochs and batch size must be >= 1"));
        }
        if self.hidden == Some(0) {
            return Err(Error::invalid("flow hidden width must be >= 1"));
        }
        if !(self.grad_clip > 0.0) || !(self.noise >= 0.0) || !(self.lr > 0.0) {
            return Err(Error::invalid("flow grad_clip and lr must be > 0, noise >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CouplingBlock {
    /// Applied first: `out[:, j] = in[:, perm[j]]`.
    pub perm: Vec<usize>,
    pub net: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    pub dim: usize,
    pub affine: bool,
    pub blocks: Vec<CouplingBlock>,
}

fn check_even(dim: usize) -> Result<()> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::invalid(format!("flow dimension must be even and positive, got {dim}")));
    }
    Ok(())
}

impl FlowModel {
    pub fn new(dim: usize, blocks: usize, hidden: usize, affine: bool, rng: &mut impl Rng) -> Result<Self> {
        check_even(dim)?;
        let mut model = Self {
            dim,
            affine,
            blocks: Vec::new(),
        };
        for _ in 0..blocks {
            model.push_block(hidden, rng);
        }
        Ok(model)
    }

    /// Every coupling network outputs zero, so the flow only permutes.
    pub fn identity(dim: usize, blocks: usize, hidden: usize, affine: bool, rng: &mut impl Rng) -> Result<Self> {
        let mut model = Self::new(dim, blocks, hidden, affine, rng)?;
        for b in &mut model.blocks {
            zero_last_layer(&mut b.net);
        }
        Ok(model)
    }

    fn push_block(&mut self, hidden: usize, rng: &mut impl Rng) {
        let h = self.dim / 2;
        let out = if self.affine { self.dim } else { h };
        let mut perm: Vec<usize> = (0..self.dim).collect();
        perm.shuffle(rng);
        self.blocks.push(CouplingBlock {
            perm,
            net: Mlp::new(&[h, hidden, out], rng),
        });
    }

    /// Appends a block whose coupling network outputs zero.
    pub fn push_identity_block(&mut self, hidden: usize, rng: &mut impl Rng) {
        self.push_block(hidden, rng);
        zero_last_layer(&mut self.blocks.last_mut().expect("just pushed").net);
    }

    fn check(&self, z: &Tensor) -> Result<usize> {
        match z.shape() {
            [n, d] if *d == self.dim => Ok(*n),
            other => Err(Error::shape("flow", format!("expected (n, {}), got {other:?}", self.dim))),
        }
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Vec<Var>> {
        self.blocks.iter().map(|b| b.net.bind(g, trainable)).collect()
    }

    /// Differentiable forward pass; returns `(y, log_det)` with `log_det`
    /// absent for shift-only coupling.
    pub fn forward_graph(&self, g: &mut Graph, vars: &[Vec<Var>], z: Var) -> Result<(Var, Option<Var>)> {
        let h = self.dim / 2;
        let mut x = z;
        let mut log_det = None;
        for (block, bv) in self.blocks.iter().zip(vars) {
            x = g.gather_cols(x, &block.perm)?;
            let a = g.slice_cols(x, 0, h)?;
            let b = g.slice_cols(x, h, h)?;
            let raw = block.net.forward(g, bv, a)?;
            let b = if self.affine {
                let s = g.slice_cols(raw, 0, h)?;
                let s = g.tanh(s)?;
                let t = g.slice_cols(raw, h, h)?;
                let scale = g.exp(s)?;
                let scaled = g.mul(b, scale)?;
                let ld = g.row_sum(s)?;
                log_det = Some(match log_det {
                    Some(acc) => g.add(acc, ld)?,
                    None => ld,
                });
                g.add(scaled, t)?
            } else {
                g.add(b, raw)?
            };
            x = g.concat_cols(a, b)?;
        }
        Ok((x, log_det))
    }

    /// Differentiable `log p(z)` per row, shape `(n)`.
    pub fn log_prob_graph(&self, g: &mut Graph, vars: &[Vec<Var>], z: Var) -> Result<Var> {
        let (y, log_det) = self.forward_graph(g, vars, z)?;
        let sq = g.square(y)?;
        let rs = g.row_sum(sq)?;
        let lp = g.scale(rs, -0.5)?;
        let lp = g.add_scalar(lp, (-0.5 * self.dim as f64 * LN_2PI) as f32)?;
        match log_det {
            Some(ld) => g.add(lp, ld),
            None => Ok(lp),
        }
    }

    /// Base-space image of every row and its log-determinant.
    pub fn forward(&self, z: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        let n = self.check(z)?;
        check_even(self.dim)?;
        let (d, h) = (self.dim, self.dim / 2);
        let mut x = z.data().to_vec();
        let mut log_det = vec![0.0f64; n];
        let mut a = vec![0.0f32; n * h];
        for block in &self.blocks {
            let permuted: Vec<f32> = x
                .chunks(d)
                .flat_map(|row| block.perm.iter().map(move |&j| row[j]))
                .collect();
            x = permuted;
            for i in 0..n {
                a[i * h..(i + 1) * h].copy_from_slice(&x[i * d..i * d + h]);
            }
            let raw = block.net.eval(&a, n);
            let w = raw.len() / n;
            for i in 0..n {
                let row = &mut x[i * d + h..(i + 1) * d];
                let r = &raw[i * w..(i + 1) * w];
                if self.affine {
                    let mut ld = 0.0f32;
                    for j in 0..h {
                        let s = r[j].tanh();
                        ld += s;
                        row[j] = row[j] * s.exp() + r[h + j];
                    }
                    log_det[i] += ld as f64;
                } else {
                    for j in 0..h {
                        row[j] += r[j];
                    }
                }
            }
        }
        Ok((Tensor::new(vec![n, d], x)?, log_det))
    }

    pub fn inverse(&self, y: &Tensor) -> Result<Tensor> {
        let n = self.check(y)?;
        check_even(self.dim)?;
        let (d, h) = (self.dim, self.dim / 2);
        let mut x = y.data().to_vec();
        let mut a = vec![0.0f32; n * h];
        for block in self.blocks.iter().rev() {
            for i in 0..n {
                a[i * h..(i + 1) * h].copy_from_slice(&x[i * d..i * d + h]);
            }
            let raw = block.net.eval(&a, n);
            let w = raw.len() / n;
            for i in 0..n {
                let row = &mut x[i * d + h..(i + 1) * d];
                let r = &raw[i * w..(i + 1) * w];
                for j in 0..h {
                    row[j] = if self.affine {
                        (row[j] - r[h + j]) * (-r[j].tanh()).exp()
                    } else {
                        row[j] - r[j]
                    };
                }
            }
            let mut unpermuted = vec![0.0f32; n * d];
            for i in 0..n {
                for (j, &p) in block.perm.iter().enumerate() {
                    unpermuted[i * d + p] = x[i * d + j];
                }
            }
            x = unpermuted;
        }
        Tensor::new(vec![n, d], x)
    }

    /// `-d/2 ln(2 pi) - |Flow(z)|^2 / 2 + log_det` per row.
    pub fn log_prob(&self, z: &Tensor) -> Result<Vec<f64>> {
        let (y, log_det) = self.forward(z)?;
        let c = -0.5 * self.dim as f64 * LN_2PI;
        Ok(y
            .data()
            .chunks(self.dim)
            .zip(log_det)
            .map(|(row, ld)| c - 0.5 * row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() + ld)
            .collect())
    }

    pub fn mean_nll(&self, z: &Tensor) -> Result<f64> {
        let lp = self.log_prob(z)?;
        Ok(-lp.iter().sum::<f64>() / lp.len().max(1) as f64)
    }

    pub fn manifest(&self) -> Manifest {
        Manifest::new()
            .with("kind", "flow")
            .with("dim", self.dim)
            .with("blocks", self.blocks.len())
            .with("hidden", self.blocks.first().map_or(0, |b| b.net.widths[1]))
            .with("affine", self.affine)
    }

    pub fn save_into(&self, ck: &mut Checkpoint) {
        for (i, b) in self.blocks.iter().enumerate() {
            let perm = b.perm.iter().map(|&p| p as f32).collect();
            ck.push(format!("block.{i}.perm"), Tensor::new(vec![self.dim], perm).expect("shape"));
            b.net.save_into(ck, &format!("block.{i}.net"));
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let m = &ck.manifest;
        let dim: usize = m.parse_value("dim")?;
        let blocks: usize = m.parse_value("blocks")?;
        let hidden: usize = m.parse_value("hidden")?;
        let affine: bool = m.parse_value("affine")?;
        let mut model = Self::new(dim, blocks, hidden, affine, &mut derive_rng(0, 0, 0))?;
        for (i, b) in model.blocks.iter_mut().enumerate() {
            let perm: Vec<usize> = ck.get(&format!("block.{i}.perm"))?.data().iter().map(|&v| v as usize).collect();
            let mut seen = vec![false; dim];
            for &p in &perm {
                if p >= dim || std::mem::replace(&mut seen[p], true) {
                    return Err(Error::Format {
                        what: "flow checkpoint",
                        detail: format!("block {i} permutation is not a permutation of 0..{dim}"),
                    });
                }
            }
            if perm.len() != dim {
                return Err(Error::Format {
                    what: "flow checkpoint",
                    detail: format!("block {i} permutation has length {}", perm.len()),
                });
            }
            b.perm = perm;
            b.net.load_from(ck, &format!("block.{i}.net"))?;
        }
        Ok(model)
    }

    fn params(&self) -> Vec<Tensor> {
        self.blocks.iter().flat_map(|b| b.net.params.iter().cloned()).collect()
    }

    fn set_params(&mut self, flat: Vec<Tensor>) {
        let mut it = flat.into_iter();
        for b in &mut self.blocks {
            for p in &mut b.net.params {
                *p = it.next().expect("parameter count");
            }
        }
    }
}

fn zero_last_layer(net: &mut Mlp) {
    let n = net.params.len();
    for p in &mut net.params[n - 2..] {
        p.data_mut().fill(0.0);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowEpoch {
    pub epoch: usize,
    pub lr: f64,
    pub train_nll: f64,
    pub val_nll: f64,
}

#[derive(Debug, Clone)]
pub struct FlowRun {
    pub model: FlowModel,
    pub history: Vec<FlowEpoch>,
    pub selected_epoch: usize,
}

impl FlowRun {
    pub fn history_csv(&self) -> String {
        let mut s = String::from("epoch,lr,train_nll,val_nll\n");
        for e in &self.history {
            s.push_str(&format!("{},{},{},{}\n", e.epoch, e.lr, e.train_nll, e.val_nll));
        }
        s
    }
}

fn rows(z: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let d = z.shape()[1];
    let mut data = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        data.extend_from_slice(z.row(i));
    }
    Tensor::new(vec![idx.len(), d], data)
}

/// Trains a flow by minimising the mean NLL of `train`; the returned model
/// is the epoch snapshot with the lowest NLL on `val` (or on `train` when
/// no validation set is given).
pub fn fit_flow(train: &Tensor, val: Option<&Tensor>, cfg: &FlowConfig, seed: u64) -> Result<FlowRun> {
    cfg.validate()?;
    let (n, d) = match train.shape() {
        [n, d] if *n > 0 => (*n, *d),
        other => return Err(Error::shape("fit_flow", format!("expected non-empty (n, d), got {other:?}"))),
    };
    check_even(d)?;
    if let Some(v) = val {
        if v.ndim() != 2 || v.shape()[1] != d || v.shape()[0] == 0 {
            return Err(Error::shape("fit_flow", format!("validation set {:?} for dimension {d}", v.shape())));
        }
    }
    let mut model = FlowModel::new(d, cfg.blocks, cfg.hidden.unwrap_or(d), cfg.affine, &mut derive_rng(seed, STREAM_INIT, 0))?;
    let schedule = LrSchedule::step_decay(cfg.lr, cfg.epochs)?;
    let mut opt = Adam::new(cfg.weight_decay);
    let normal = Normal::new(0.0f32, cfg.noise as f32).map_err(|e| Error::invalid(e.to_string()))?;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, FlowModel)> = None;
    for epoch in 0..cfg.epochs {
        let lr = schedule.at(epoch)?;
        let mut noise_rng = derive_rng(seed, STREAM_NOISE, epoch as u64);
        let noisy = Tensor::new(
            vec![n, d],
            train.data().iter().map(|&v| v + normal.sample(&mut noise_rng)).collect(),
        )?;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut derive_rng(seed, STREAM_SHUFFLE, epoch as u64));
        let (mut total, mut count) = (0.0f64, 0usize);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let diag = |e: Error| match e {
                Error::NonFinite { context } => Error::NonFinite {
                    context: format!("{context} (flow epoch {epoch}, batch {bi})"),
                },
                other => other,
            };
            let mut g = Graph::new();
            let vars = model.bind(&mut g, true);
            let x = g.input(rows(&noisy, chunk)?);
            let lp = model.log_prob_graph(&mut g, &vars, x).map_err(diag)?;
            let nll = g.mean(lp).map_err(diag)?;
            let loss = g.scale(nll, -1.0).map_err(diag)?;
            total += g.value(loss).item() as f64 * chunk.len() as f64;
            count += chunk.len();
            g.backward(loss, None)?;
            let mut grads: Vec<Tensor> = vars.iter().flatten().map(|&v| g.grad_or_zeros(v)).collect();
            clip_grad_norm(&mut grads, cfg.grad_clip);
            let mut params = model.params();
            opt.step(&mut params, &grads, lr).map_err(diag)?;
            model.set_params(params);
        }
        let train_nll = total / count as f64;
        let val_nll = model.mean_nll(val.unwrap_or(train))?;
        if !val_nll.is_finite() {
            return Err(Error::NonFinite {
                context: format!("flow validation NLL at epoch {epoch}"),
            });
        }
        history.push(FlowEpoch {
            epoch,
            lr,
            train_nll,
            val_nll,
        });
        if best.as_ref().is_none_or(|(v, ..)| val_nll < *v) {
            best = Some((val_nll, epoch, model.clone()));
        }
    }
    let (_, selected_epoch, model) = best.expect("at least one epoch");
    Ok(FlowRun {
        model,
        history,
        selected_epoch,
    })
}
