//! Parameter containers for the convolutional and dense networks.

use rand::Rng;

use crate::error::{Error, Result};
use crate::io::Checkpoint;
use crate::tensor::{BnMode, Graph, RunningStats, Tensor, Var};

pub const KERNEL: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub transpose: bool,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
    pub padding: usize,
    pub batch_norm: bool,
    pub activation: Activation,
}

/// Where each layer's tensors live in `ConvNet::params`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Slots {
    kernel: usize,
    bias: Option<usize>,
    norm: Option<(usize, usize, usize)>,
}

/// Batch-norm statistics either updated (training) or read (evaluation).
pub enum Phase<'a> {
    Train(&'a mut [RunningStats]),
    Eval(&'a [RunningStats]),
}

/// Uniform in `±sqrt(1 / fan_in)`.
pub fn init_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::uniform(shape, (1.0 / fan_in as f32).sqrt(), rng)
}

/// A chain of (transposed) 4x4 convolutions. Layers with batch norm carry
/// no bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvNet {
    pub specs: Vec<LayerSpec>,
    pub params: Vec<Tensor>,
    pub stats: Vec<RunningStats>,
    slots: Vec<Slots>,
}

impl ConvNet {
    pub fn new(specs: Vec<LayerSpec>, rng: &mut impl Rng) -> Self {
        let mut params = Vec::new();
        let mut stats = Vec::new();
        let mut slots = Vec::new();
        for s in &specs {
            let kshape = if s.transpose {
                [s.c_in, s.c_out, KERNEL, KERNEL]
            } else {
                [s.c_out, s.c_in, KERNEL, KERNEL]
            };
            let fan_in = s.c_in * KERNEL * KERNEL;
            params.push(init_uniform(&kshape, fan_in, rng));
            let kernel = params.len() - 1;
            let (bias, norm) = if s.batch_norm {
                params.push(Tensor::full(&[s.c_out], 1.0));
                params.push(Tensor::zeros(&[s.c_out]));
                stats.push(RunningStats::new(s.c_out));
                (None, Some((params.len() - 2, params.len() - 1, stats.len() - 1)))
            } else {
                params.push(init_uniform(&[s.c_out], fan_in, rng));
                (Some(params.len() - 1), None)
            };
            slots.push(Slots { kernel, bias, norm });
        }
        Self {
            specs,
            params,
            stats,
            slots,
        }
    }

    /// Registers the parameters on `g`, tracked or constant.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params.iter().map(|p| g.leaf(p.clone(), trainable)).collect()
    }

    pub fn forward(&self, g: &mut Graph, vars: &[Var], x: Var) -> Result<Var> {
        run(&self.specs, &self.slots, g, vars, x, Phase::Eval(&self.stats))
    }

    pub fn forward_train(&mut self, g: &mut Graph, vars: &[Var], x: Var) -> Result<Var> {
        run(&self.specs, &self.slots, g, vars, x, Phase::Train(&mut self.stats))
    }

    pub fn save_into(&self, ck: &mut Checkpoint, prefix: &str) {
        for (i, slot) in self.slots.iter().enumerate() {
            ck.push(format!("{prefix}.{i}.kernel"), self.params[slot.kernel].clone());
            if let Some(b) = slot.bias {
                ck.push(format!("{prefix}.{i}.bias"), self.params[b].clone());
            }
            if let Some((ga, be, st)) = slot.norm {
                let s = &self.stats[st];
                ck.push(format!("{prefix}.{i}.gamma"), self.params[ga].clone());
                ck.push(format!("{prefix}.{i}.beta"), self.params[be].clone());
                ck.push(format!("{prefix}.{i}.running_mean"), vec_tensor(&s.mean));
                ck.push(format!("{prefix}.{i}.running_var"), vec_tensor(&s.var));
            }
        }
    }

    /// Overwrites parameters and statistics from a checkpoint, checking shapes.
    pub fn load_from(&mut self, ck: &Checkpoint, prefix: &str) -> Result<()> {
        for (i, slot) in self.slots.clone().iter().enumerate() {
            copy_checked(&mut self.params[slot.kernel], ck.get(&format!("{prefix}.{i}.kernel"))?)?;
            if let Some(b) = slot.bias {
                copy_checked(&mut self.params[b], ck.get(&format!("{prefix}.{i}.bias"))?)?;
            }
            if let Some((ga, be, st)) = slot.norm {
                copy_checked(&mut self.params[ga], ck.get(&format!("{prefix}.{i}.gamma"))?)?;
                copy_checked(&mut self.params[be], ck.get(&format!("{prefix}.{i}.beta"))?)?;
                let mean = ck.get(&format!("{prefix}.{i}.running_mean"))?;
                let var = ck.get(&format!("{prefix}.{i}.running_var"))?;
                let s = &mut self.stats[st];
                if mean.len() != s.mean.len() || var.len() != s.var.len() {
                    return Err(Error::shape("checkpoint", format!("{prefix}.{i} running stats")));
                }
                s.mean.copy_from_slice(mean.data());
                s.var.copy_from_slice(var.data());
            }
        }
        Ok(())
    }
}

fn run(
    specs: &[LayerSpec],
    slots: &[Slots],
    g: &mut Graph,
    vars: &[Var],
    mut x: Var,
    mut phase: Phase<'_>,
) -> Result<Var> {
    for (s, slot) in specs.iter().zip(slots) {
        let k = vars[slot.kernel];
        x = if s.transpose {
            g.conv2d_transpose(x, k, s.stride, s.padding)?
        } else {
            g.conv2d(x, k, s.stride, s.padding)?
        };
        if let Some(b) = slot.bias {
            x = g.channel_bias(x, vars[b])?;
        }
        if let Some((ga, be, st)) = slot.norm {
            let mode = match &mut phase {
                Phase::Train(stats) => BnMode::Train(&mut stats[st]),
                Phase::Eval(stats) => BnMode::Eval(&stats[st]),
            };
            x = g.batch_norm_2d(x, vars[ga], vars[be], mode)?;
        }
        x = match s.activation {
            Activation::Relu => g.relu(x)?,
            Activation::Sigmoid => g.sigmoid(x)?,
            Activation::Identity => x,
        };
    }
    Ok(x)
}

pub(crate) fn vec_tensor(v: &[f32]) -> Tensor {
    Tensor::new(vec![v.len()], v.to_vec()).expect("1-D shape matches")
}

pub(crate) fn copy_checked(dst: &mut Tensor, src: &Tensor) -> Result<()> {
    if dst.shape() != src.shape() {
        return Err(Error::shape(
            "checkpoint",
            format!("expected {:?}, found {:?}", dst.shape(), src.shape()),
        ));
    }
    dst.data_mut().copy_from_slice(src.data());
    Ok(())
}

/// Number of stride-2 stages plus the latent layer for a square input.
pub fn layer_count(resolution: usize) -> Result<usize> {
    if resolution < 8 || !resolution.is_power_of_two() {
        return Err(Error::invalid(format!(
            "resolution {resolution} must be a power of two >= 8"
        )));
    }
    Ok(resolution.trailing_zeros() as usize - 1)
}

/// Encoder layers: stride-2 convolutions doubling the width from `nf`, each
/// with batch norm and ReLU, then a 4x4 convolution to `out` channels that
/// collapses the remaining 4x4 map to 1x1.
pub fn encoder_specs(resolution: usize, nf: usize, out: usize) -> Result<Vec<LayerSpec>> {
    let layers = layer_count(resolution)?;
    let mut specs = Vec::with_capacity(layers);
    let mut c_in = 1;
    for i in 0..layers - 1 {
        let c_out = nf << i;
        specs.push(LayerSpec {
            transpose: false,
            c_in,
            c_out,
            stride: 2,
            padding: 1,
            batch_norm: true,
            activation: Activation::Relu,
        });
        c_in = c_out;
    }
    specs.push(LayerSpec {
        transpose: false,
        c_in,
        c_out: out,
        stride: 2,
        padding: 0,
        batch_norm: false,
        activation: Activation::Identity,
    });
    Ok(specs)
}

/// Mirror of [`encoder_specs`] ending in a single sigmoid channel.
pub fn decoder_specs(resolution: usize, nf: usize, nz: usize) -> Result<Vec<LayerSpec>> {
    let layers = layer_count(resolution)?;
    let mut specs = Vec::with_capacity(layers);
    let mut c_in = nz;
    for i in (0..layers - 1).rev() {
        let c_out = nf << i;
        let first = specs.is_empty();
        specs.push(LayerSpec {
            transpose: true,
            c_in,
            c_out,
            stride: if first { 1 } else { 2 },
            padding: if first { 0 } else { 1 },
            batch_norm: true,
            activation: Activation::Relu,
        });
        c_in = c_out;
    }
    specs.push(LayerSpec {
        transpose: true,
        c_in,
        c_out: 1,
        stride: 2,
        padding: 1,
        batch_norm: false,
        activation: Activation::Sigmoid,
    });
    Ok(specs)
}

/// Fully connected layers with ReLU between them.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub widths: Vec<usize>,
    pub params: Vec<Tensor>,
}

impl Mlp {
    pub fn new(widths: &[usize], rng: &mut impl Rng) -> Self {
        let mut params = Vec::new();
        for w in widths.windows(2) {
            params.push(init_uniform(&[w[0], w[1]], w[0], rng));
            params.push(init_uniform(&[w[1]], w[0], rng));
        }
        Self {
            widths: widths.to_vec(),
            params,
        }
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params.iter().map(|p| g.leaf(p.clone(), trainable)).collect()
    }

    pub fn forward(&self, g: &mut Graph, vars: &[Var], mut x: Var) -> Result<Var> {
        let n = self.widths.len() - 1;
        for i in 0..n {
            x = g.dense(x, vars[2 * i], vars[2 * i + 1])?;
            if i + 1 < n {
                x = g.relu(x)?;
            }
        }
        Ok(x)
    }

    /// Plain forward pass without a graph.
    pub fn eval(&self, x: &[f32], n: usize) -> Vec<f32> {
        let layers = self.widths.len() - 1;
        let mut cur = x.to_vec();
        for i in 0..layers {
            let (d_in, d_out) = (self.widths[i], self.widths[i + 1]);
            cur = crate::tensor::kernels::dense_forward(
                &cur,
                self.params[2 * i].data(),
                self.params[2 * i + 1].data(),
                n,
                d_in,
                d_out,
            );
            if i + 1 < layers {
                cur.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        cur
    }

    pub fn save_into(&self, ck: &mut Checkpoint, prefix: &str) {
        for (i, p) in self.params.chunks(2).enumerate() {
            ck.push(format!("{prefix}.{i}.weight"), p[0].clone());
            ck.push(format!("{prefix}.{i}.bias"), p[1].clone());
        }
    }

    pub fn load_from(&mut self, ck: &Checkpoint, prefix: &str) -> Result<()> {
        for i in 0..self.params.len() / 2 {
            copy_checked(&mut self.params[2 * i], ck.get(&format!("{prefix}.{i}.weight"))?)?;
            copy_checked(&mut self.params[2 * i + 1], ck.get(&format!("{prefix}.{i}.bias"))?)?;
        }
        Ok(())
    }
}
