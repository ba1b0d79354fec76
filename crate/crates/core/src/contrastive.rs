//! Convolutional encoder, projection head and NT-Xent training.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{sample_view, AugmentationPolicy};
use crate::data::{derive_rng, Dataset};
use crate::error::{Error, Result};
use crate::io::{Checkpoint, Manifest};
use crate::nn::{encoder_specs, ConvNet, Mlp};
use crate::tensor::{Adam, Graph, LrSchedule, Tensor, Var};

const STREAM_INIT: u64 = 0x11;
const STREAM_SHUFFLE: u64 = 0x12;
const STREAM_VIEW: u64 = 0x13;
const STREAM_VAL_VIEW: u64 = 0x14;

/// Images encoded per graph when no gradients are needed.
pub const EVAL_CHUNK: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub nz: usize,
    pub nf: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { nz: 32, nf: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastiveConfig {
    pub temperature: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup: usize,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            temperature: 0.5,
            epochs: 20,
            batch_size: 64,
            lr: 1e-4,
            weight_decay: 1e-6,
            warmup: 10,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::invalid("temperature must be > 0"));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid("contrastive batch size must be >= 2"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be >= 1"));
        }
        LrSchedule::cosine_warmup(self.lr, self.epochs, self.warmup.min(self.epochs)).map(|_| ())
    }
}

/// The convolutional encoder `z = f(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    pub resolution: usize,
    pub nf: usize,
    pub nz: usize,
    pub net: ConvNet,
}

impl EncoderModel {
    pub fn new(resolution: usize, nf: usize, nz: usize, rng: &mut impl rand::Rng) -> Result<Self> {
        Ok(Self {
            resolution,
            nf,
            nz,
            net: ConvNet::new(encoder_specs(resolution, nf, nz)?, rng),
        })
    }

    pub(crate) fn check_input(&self, shape: &[usize]) -> Result<()> {
        match shape {
            [_, 1, h, w] if *h == self.resolution && *w == self.resolution => Ok(()),
            other => Err(Error::shape(
                "encode",
                format!(
                    "model built for (B, 1, {r}, {r}), got {other:?}",
                    r = self.resolution
                ),
            )),
        }
    }

    /// Eval-mode encoding on an existing graph; returns `(B, nz)`.
    pub fn encode_graph(&self, g: &mut Graph, vars: &[Var], x: Var) -> Result<Var> {
        self.check_input(g.shape(x))?;
        let b = g.shape(x)[0];
        let z = self.net.forward(g, vars, x)?;
        g.reshape(z, &[b, self.nz])
    }

    pub fn forward_train(&mut self, g: &mut Graph, vars: &[Var], x: Var) -> Result<Var> {
        self.check_input(g.shape(x))?;
        let b = g.shape(x)[0];
        let z = self.net.forward_train(g, vars, x)?;
        g.reshape(z, &[b, self.nz])
    }

    /// Deterministic eval-mode representations, `(B, nz)`.
    pub fn encode(&self, batch: &Tensor) -> Result<Tensor> {
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
            let vars = self.net.bind(&mut g, false);
            let x = g.input(chunk);
            let z = self.encode_graph(&mut g, &vars, x)?;
            out.extend_from_slice(g.value(z).data());
        }
        Tensor::new(vec![b, self.nz], out)
    }

    pub fn manifest(&self) -> Manifest {
        Manifest::new()
            .with("kind", "encoder")
            .with("nz", self.nz)
            .with("nf", self.nf)
            .with("resolution", self.resolution)
    }

    pub fn save_into(&self, ck: &mut Checkpoint) {
        self.net.save_into(ck, "encoder");
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let m = &ck.manifest;
        let mut model = Self::new(
            m.parse_value("resolution")?,
            m.parse_value("nf")?,
            m.parse_value("nz")?,
            &mut ChaCha8Rng::seed_from_u64(0),
        )?;
        model.net.load_from(ck, "encoder")?;
        Ok(model)
    }
}

/// `u = g(z)`: dense(nz, nz), ReLU, dense(nz, nz / 2).
pub fn projection_head(nz: usize, rng: &mut impl rand::Rng) -> Mlp {
    Mlp::new(&[nz, nz, (nz / 2).max(1)], rng)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,lr,train_loss,val_loss\n");
    for r in history {
        s.push_str(&format!("{},{:e},{},{}\n", r.epoch, r.lr, r.train_loss, r.val_loss));
    }
    s
}

/// Index of the smallest validation loss; the earliest wins ties.
pub fn select_checkpoint(val_losses: &[f64]) -> Result<usize> {
    if val_losses.is_empty() {
        return Err(Error::invalid("no snapshots to select from"));
    }
    let mut best = 0;
    for (i, &v) in val_losses.iter().enumerate() {
        if v < val_losses[best] {
            best = i;
        }
    }
    Ok(best)
}

pub struct ContrastiveRun {
    /// Snapshot with the lowest validation loss.
    pub encoder: EncoderModel,
    pub head: Mlp,
    pub history: Vec<EpochRecord>,
    pub selected_epoch: usize,
}

fn two_views(
    data: &Dataset,
    indices: &[usize],
    policy: &AugmentationPolicy,
    mut rng_for: impl FnMut(usize) -> ChaCha8Rng,
) -> Result<Tensor> {
    let r = data.resolution;
    let b = indices.len();
    let mut out = vec![0.0f32; 2 * b * r * r];
    for (slot, &i) in indices.iter().enumerate() {
        let mut rng = rng_for(i);
        let img = &data.samples[i].image;
        let v1 = sample_view(img, policy, &mut rng)?;
        let v2 = sample_view(img, policy, &mut rng)?;
        out[slot * r * r..(slot + 1) * r * r].copy_from_slice(v1.data());
        out[(b + slot) * r * r..(b + slot + 1) * r * r].copy_from_slice(v2.data());
    }
    Tensor::new(vec![2 * b, 1, r, r], out)
}

/// Mean per-anchor NT-Xent on `x = [view_a; view_b]`.
fn batch_loss(
    encoder: &EncoderModel,
    head: &Mlp,
    x: Tensor,
    tau: f32,
) -> Result<f64> {
    let rows = x.shape()[0];
    let mut g = Graph::inference();
    let ev = encoder.net.bind(&mut g, false);
    let hv = head.bind(&mut g, false);
    let x = g.input(x);
    let z = encoder.encode_graph(&mut g, &ev, x)?;
    let u = head.forward(&mut g, &hv, z)?;
    let l = g.nt_xent(u, tau)?;
    Ok(g.value(l).item() as f64 / rows as f64)
}

/// Mean per-anchor validation loss with views fixed across epochs.
pub fn validation_loss(
    encoder: &EncoderModel,
    head: &Mlp,
    data: &Dataset,
    cfg: &ContrastiveConfig,
    policy: &AugmentationPolicy,
    seed: u64,
) -> Result<f64> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut total = 0.0;
    let mut batches = 0;
    for chunk in idx.chunks(cfg.batch_size) {
        if chunk.len() < 2 {
            continue;
        }
        let x = two_views(data, chunk, policy, |i| derive_rng(seed, STREAM_VAL_VIEW, i as u64))?;
        total += batch_loss(encoder, head, x, cfg.temperature)?;
        batches += 1;
    }
    if batches == 0 {
        return Err(Error::invalid("validation split needs at least 2 samples"));
    }
    Ok(total / batches as f64)
}

/// Trains encoder and head with NT-Xent, selecting the epoch with the lowest
/// validation loss on `holdout`.
pub fn train_contrastive(
    train: &Dataset,
    holdout: &Dataset,
    enc_cfg: &EncoderConfig,
    cfg: &ContrastiveConfig,
    policy: &AugmentationPolicy,
    seed: u64,
) -> Result<ContrastiveRun> {
    cfg.validate()?;
    policy.validate()?;
    if train.len() < 2 {
        return Err(Error::invalid("training split needs at least 2 samples"));
    }
    if train.samples.iter().any(|s| s.slice_label) {
        return Err(Error::invalid("contrastive training expects a normal-only split"));
    }
    let mut init = derive_rng(seed, STREAM_INIT, 0);
    let mut encoder = EncoderModel::new(train.resolution, enc_cfg.nf, enc_cfg.nz, &mut init)?;
    let mut head = projection_head(enc_cfg.nz, &mut init);
    let schedule = LrSchedule::cosine_warmup(cfg.lr, cfg.epochs, cfg.warmup.min(cfg.epochs))?;
    let mut opt_enc = Adam::new(cfg.weight_decay);
    let mut opt_head = Adam::new(cfg.weight_decay);

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, EncoderModel, Mlp)> = None;
    let n = train.len();
    for epoch in 0..cfg.epochs {
        let lr = schedule.at(epoch)?;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut derive_rng(seed, STREAM_SHUFFLE, epoch as u64));
        let mut total = 0.0;
        let mut batches = 0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let x = two_views(train, chunk, policy, |i| {
                derive_rng(seed, STREAM_VIEW, (epoch * n + i) as u64)
            })?;
            let rows = x.shape()[0];
            let diag = |e: Error| match e {
                Error::NonFinite { context } => Error::NonFinite {
                    context: format!("{context} (epoch {epoch}, batch {bi})"),
                },
                other => other,
            };
            let mut g = Graph::new();
            let ev = encoder.net.bind(&mut g, true);
            let hv = head.bind(&mut g, true);
            let xv = g.input(x);
            let z = encoder.forward_train(&mut g, &ev, xv).map_err(diag)?;
            let u = head.forward(&mut g, &hv, z).map_err(diag)?;
            let l = g.nt_xent(u, cfg.temperature).map_err(diag)?;
            let l = g.scale(l, 1.0 / rows as f32).map_err(diag)?;
            total += g.value(l).item() as f64;
            batches += 1;
            g.backward(l, None)?;
            let ge: Vec<Tensor> = ev.iter().map(|&v| g.grad_or_zeros(v)).collect();
            let gh: Vec<Tensor> = hv.iter().map(|&v| g.grad_or_zeros(v)).collect();
            opt_enc.step(&mut encoder.net.params, &ge, lr).map_err(diag)?;
            opt_head.step(&mut head.params, &gh, lr).map_err(diag)?;
        }
        let train_loss = total / batches.max(1) as f64;
        let val_loss = validation_loss(&encoder, &head, holdout, cfg, policy, seed)?;
        history.push(EpochRecord {
            epoch,
            lr,
            train_loss,
            val_loss,
        });
        if best.as_ref().is_none_or(|(v, ..)| val_loss < *v) {
            best = Some((val_loss, epoch, encoder.clone(), head.clone()));
        }
    }
    let (_, selected_epoch, encoder, head) = best.expect("at least one epoch");
    Ok(ContrastiveRun {
        encoder,
        head,
        history,
        selected_epoch,
    })
}
