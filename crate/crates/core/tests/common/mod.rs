//! Gradient-check helpers shared by the test targets.
#![allow(dead_code)]

use cradl_core::contrastive::EncoderModel;
use cradl_core::density::{fit_em, GmmModel};
use cradl_core::tensor::{gradient_check, BnMode, Graph, RunningStats, Tensor, Var};
use cradl_core::nn::{Activation, ConvNet, KERNEL};
use cradl_core::vae::{kl_graph, rec_graph, VaeModel, LOGVAR_LIMIT};
use nalgebra::DVector;
use std::f64::consts::PI;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const H: f32 = 1e-3;
pub const TOL: f64 = 1e-3;
/// Partials below this cannot be told apart from f32 rounding noise in a
/// central difference at `H` when each input touches only a few outputs.
pub const LOCAL_FLOOR: f32 = 0.1;
/// Step for directional differences through piecewise-linear networks:
/// small enough to cross no activation kink at the tested points.
pub const KINK_SAFE_H: f32 = 3e-4;

/// When every output depends on every input, rounding all outputs perturbs
/// a central difference by up to about `eps * sum|out| / h`; the local floor
/// still applies on top, since intermediates can be larger than outputs.
pub fn dense_floor(outputs: &Tensor) -> f32 {
    let total: f64 = outputs.data().iter().map(|v| v.abs() as f64).sum();
    (f32::EPSILON as f64 * total / (H as f64 * TOL)) as f32
}

pub fn positive(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(0.5f32..1.0))
}

pub fn rand_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0f32..1.0))
}

/// Values kept at least `gap` away from zero so kinks are not straddled.
pub fn away_from_zero(shape: &[usize], gap: f32, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(gap..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Moves values off the clamp boundaries at +-0.5.
pub fn away_clamp(x: &Tensor) -> Tensor {
    x.map(|v| if (v.abs() - 0.5).abs() < 0.05 { v * 0.8 } else { v })
}

/// True when every non-zero analytic partial clears the resolution floor.
pub fn conditioned<F>(f: &F, point: &Tensor, dense: bool) -> bool
where
    F: Fn(&mut Graph, Var) -> cradl_core::Result<Var>,
{
    conditioned_at(f, point, dense, LOCAL_FLOOR)
}

pub fn conditioned_at<F>(f: &F, point: &Tensor, dense: bool, local: f32) -> bool
where
    F: Fn(&mut Graph, Var) -> cradl_core::Result<Var>,
{
    let mut g = Graph::new();
    let x = g.param(point.clone());
    let out = f(&mut g, x).unwrap();
    let seed = Tensor::full(g.shape(out), 1.0);
    g.backward(out, Some(&seed)).unwrap();
    let floor = if dense { dense_floor(g.value(out)).max(local) } else { local };
    g.grad_or_zeros(x).data().iter().all(|&a| a == 0.0 || a.abs() >= floor)
}

#[derive(Debug, Clone)]
pub struct OpReport {
    pub name: &'static str,
    pub worst: f64,
    pub checked: usize,
}

#[derive(Default)]
struct Suite {
    reports: Vec<OpReport>,
}

impl Suite {
    fn check<F>(&mut self, name: &'static str, f: F, point: &Tensor, dense: bool)
    where
        F: Fn(&mut Graph, Var) -> cradl_core::Result<Var>,
    {
        let idx = match self.reports.iter().position(|r| r.name == name) {
            Some(i) => i,
            None => {
                self.reports.push(OpReport { name, worst: 0.0, checked: 0 });
                self.reports.len() - 1
            }
        };
        if !conditioned(&f, point, dense) {
            return;
        }
        let e = gradient_check(&f, point, H).unwrap();
        let r = &mut self.reports[idx];
        r.worst = r.worst.max(e);
        r.checked += 1;
    }
}

/// Runs a central-difference check of every differentiable graph op on
/// `cases` random, well-conditioned points; reports the worst relative error
/// and the number of points that passed the conditioning filter.
pub fn op_gradient_suite(cases: u64) -> Vec<OpReport> {
    let mut s = Suite::default();
    for seed in 0..cases {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let (c_in, c_out) = (rng.random_range(1..3), rng.random_range(1..3));
        let (side, k) = (rng.random_range(3..7), rng.random_range(1..4usize));
        let (stride, pad) = (rng.random_range(1..3), rng.random_range(0..2));
        let x = positive(&[2, c_in, side, side], &mut rng);
        let kt = positive(&[c_out, c_in, k, k], &mut rng);
        s.check("conv2d input", |g: &mut Graph, x| { let kv = g.input(kt.clone()); g.conv2d(x, kv, stride, pad) }, &x, false);
        s.check("conv2d kernel", |g: &mut Graph, kv| { let xv = g.input(x.clone()); g.conv2d(xv, kv, stride, pad) }, &kt, false);

        let k = rng.random_range(2..5usize);
        let pad = (k - 1).min(1);
        let kt = positive(&[c_out, c_in, k, k], &mut rng);
        let y = positive(&[1, c_out, rng.random_range(2..6), rng.random_range(2..6)], &mut rng);
        s.check("conv2d_transpose input", |g: &mut Graph, y| { let kv = g.input(kt.clone()); g.conv2d_transpose(y, kv, stride, pad) }, &y, false);
        s.check("conv2d_transpose kernel", |g: &mut Graph, kv| { let yv = g.input(y.clone()); g.conv2d_transpose(yv, kv, stride, pad) }, &kt, false);

        let (n, di, d_o) = (rng.random_range(1..5), rng.random_range(1..6), rng.random_range(1..6));
        let x = positive(&[n, di], &mut rng);
        let w = positive(&[di, d_o], &mut rng);
        let b = rand_tensor(&[d_o], &mut rng);
        s.check("dense x", |g: &mut Graph, x| { let (wv, bv) = (g.input(w.clone()), g.input(b.clone())); g.dense(x, wv, bv) }, &x, false);
        s.check("dense weight", |g: &mut Graph, wv| { let (xv, bv) = (g.input(x.clone()), g.input(b.clone())); g.dense(xv, wv, bv) }, &w, false);
        s.check("dense bias", |g: &mut Graph, bv| { let (xv, wv) = (g.input(x.clone()), g.input(w.clone())); g.dense(xv, wv, bv) }, &b, false);

        let c = rng.random_range(1..4);
        let x = rand_tensor(&[2, c, 3, 3], &mut rng);
        let b = rand_tensor(&[c], &mut rng);
        let w = positive(&[2, c, 3, 3], &mut rng);
        s.check("channel_bias", |g: &mut Graph, bv| { let xv = g.input(x.clone()); let y = g.channel_bias(xv, bv)?; let wv = g.input(w.clone()); g.mul(y, wv) }, &b, false);

        batch_norm_cases(&mut s, &mut rng);

        let len = rng.random_range(1..12);
        let x = away_from_zero(&[len], 0.05, &mut rng);
        let other = away_from_zero(&[len], 0.1, &mut rng);
        s.check("relu", |g: &mut Graph, x| g.relu(x), &x, false);
        s.check("abs", |g: &mut Graph, x| g.abs(x), &x, false);
        s.check("sigmoid", |g: &mut Graph, x| g.sigmoid(x), &x, false);
        s.check("tanh", |g: &mut Graph, x| g.tanh(x), &x, false);
        s.check("exp", |g: &mut Graph, x| g.exp(x), &x, false);
        s.check("square", |g: &mut Graph, x| g.square(x), &x, false);
        s.check("scale", |g: &mut Graph, x| g.scale(x, -2.5), &x, false);
        s.check("add_scalar", |g: &mut Graph, x| g.add_scalar(x, 0.7), &x, false);
        s.check("clamp", |g: &mut Graph, x| g.clamp(x, -0.5, 0.5), &away_clamp(&x), false);
        s.check("add", |g: &mut Graph, x| { let o = g.input(other.clone()); g.add(x, o) }, &x, false);
        s.check("sub", |g: &mut Graph, x| { let o = g.input(other.clone()); g.sub(o, x) }, &x, false);
        s.check("mul", |g: &mut Graph, x| { let o = g.input(other.clone()); g.mul(x, o) }, &x, false);
        s.check("sum", |g: &mut Graph, x| g.sum(x), &x, false);
        s.check("mean", |g: &mut Graph, x| g.mean(x), &x, false);

        let (n, d) = (rng.random_range(1..4), rng.random_range(2..7));
        let x = away_from_zero(&[n, d], 0.3, &mut rng);
        let w = away_from_zero(&[n, d], 0.5, &mut rng);
        let perm: Vec<usize> = rand::seq::index::sample(&mut rng, d, d).into_vec();
        let half = d / 2;
        s.check("gather_cols", |g: &mut Graph, x| { let y = g.gather_cols(x, &perm)?; let wv = g.input(w.clone()); g.mul(y, wv) }, &x, false);
        s.check("slice_cols", |g: &mut Graph, x| g.slice_cols(x, 1, d - 1), &x, false);
        s.check("concat_cols", |g: &mut Graph, x| {
            let a = g.slice_cols(x, 0, half)?;
            let b = g.slice_cols(x, half, d - half)?;
            let b = g.square(b)?;
            let y = g.concat_cols(b, a)?;
            let wv = g.input(w.clone());
            g.mul(y, wv)
        }, &x, false);
        s.check("row_sum", |g: &mut Graph, x| { let q = g.square(x)?; g.row_sum(q) }, &x, false);
        s.check("reshape", |g: &mut Graph, x| { let y = g.reshape(x, &[n * d])?; g.square(y) }, &x, false);

        let tau = rng.random_range(0.2f32..1.0);
        let a = away_from_zero(&[d], 0.5, &mut rng);
        let b = away_from_zero(&[d], 0.5, &mut rng);
        s.check("cosine_similarity", |g: &mut Graph, a| { let bv = g.input(b.clone()); g.cosine_similarity(a, bv) }, &a, true);
        let x = away_from_zero(&[2 * n, d], 0.5, &mut rng);
        s.check("nt_xent", |g: &mut Graph, x| g.nt_xent(x, tau), &x, true);
    }
    s.reports
}

fn batch_norm_cases(s: &mut Suite, rng: &mut ChaCha8Rng) {
    let (n, c, side) = (rng.random_range(2..4), rng.random_range(1..3), rng.random_range(1..3));
    let count = n * side * side;
    if count < 3 {
        // two values per channel normalize to exactly +-1 whatever x is
        return;
    }
    // evenly spread channel values keep the batch std away from zero;
    // small gamma/beta keep outputs small
    let mut x = Tensor::zeros(&[n, c, side, side]);
    for ch in 0..c {
        let mut ranks: Vec<usize> = (0..count).collect();
        ranks.sort_by_key(|_| rng.random::<u32>());
        for (j, r) in ranks.into_iter().enumerate() {
            let (b, p) = (j / (side * side), j % (side * side));
            x.data_mut()[(b * c + ch) * side * side + p] =
                r as f32 / count as f32 + rng.random_range(0.0f32..0.2 / count as f32);
        }
    }
    let gamma = away_from_zero(&[c], 0.5, rng).map(|v| 0.1 * v);
    let beta = rand_tensor(&[c], rng).map(|v| 0.05 * v);
    let w = away_from_zero(&[n, c, side, side], 0.5, rng);
    let mut running = RunningStats::new(c);
    running.mean = (0..c).map(|_| rng.random_range(-0.5f32..0.5)).collect();
    running.var = (0..c).map(|_| rng.random_range(0.5f32..2.0)).collect();
    let bn = |g: &mut Graph, x: Var, gm: Var, bt: Var| {
        let mut stats = RunningStats::new(c);
        let y = g.batch_norm_2d(x, gm, bt, BnMode::Train(&mut stats))?;
        let wv = g.input(w.clone());
        g.mul(y, wv)
    };
    let bn_eval = |g: &mut Graph, x: Var, gm: Var, bt: Var| {
        let y = g.batch_norm_2d(x, gm, bt, BnMode::Eval(&running))?;
        let wv = g.input(w.clone());
        g.mul(y, wv)
    };
    s.check("batch_norm train x", |g: &mut Graph, x| { let (gm, bt) = (g.input(gamma.clone()), g.input(beta.clone())); bn(g, x, gm, bt) }, &x, true);
    s.check("batch_norm train gamma", |g: &mut Graph, gm| { let (xv, bt) = (g.input(x.clone()), g.input(beta.clone())); bn(g, xv, gm, bt) }, &gamma, true);
    s.check("batch_norm train beta", |g: &mut Graph, bt| { let (xv, gm) = (g.input(x.clone()), g.input(gamma.clone())); bn(g, xv, gm, bt) }, &beta, true);
    let gamma = away_from_zero(&[c], 0.5, rng);
    s.check("batch_norm eval x", |g: &mut Graph, x| { let (gm, bt) = (g.input(gamma.clone()), g.input(beta.clone())); bn_eval(g, x, gm, bt) }, &x, false);
    s.check("batch_norm eval gamma", |g: &mut Graph, gm| { let (xv, bt) = (g.input(x.clone()), g.input(beta.clone())); bn_eval(g, xv, gm, bt) }, &gamma, false);
}

/// Relative error between `grad . dir` and a central difference of
/// `objective` along `dir`.
pub fn directional_error(grad: &Tensor, objective: impl Fn(&Tensor) -> f64, x: &Tensor, dir: &Tensor, h: f32) -> f64 {
    let analytic: f64 = grad.data().iter().zip(dir.data()).map(|(&a, &b)| a as f64 * b as f64).sum();
    let plus = Tensor::from_fn(x.shape(), |i| x.data()[i] + h * dir.data()[i]);
    let minus = Tensor::from_fn(x.shape(), |i| x.data()[i] - h * dir.data()[i]);
    let numeric = (objective(&plus) - objective(&minus)) / (2.0 * h as f64);
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Random directions plus the unit directions of the `top` largest
/// partials.
pub fn probe_directions(grad: &Tensor, random: usize, top: usize, rng: &mut impl Rng) -> Vec<Tensor> {
    let mut dirs: Vec<Tensor> = (0..random).map(|_| rand_tensor(grad.shape(), rng)).collect();
    let mut order: Vec<usize> = (0..grad.len()).collect();
    order.sort_by(|&a, &b| grad.data()[b].abs().total_cmp(&grad.data()[a].abs()));
    for &i in order.iter().take(top) {
        let mut d = Tensor::zeros(grad.shape());
        d.data_mut()[i] = 1.0;
        dirs.push(d);
    }
    dirs
}

/// Step for central differences of the f64 reference forwards.
pub const F64_H: f64 = 1e-6;

/// Eval-mode forward of a `ConvNet` in f64 with direct loops, from
/// `(b, c, side, side)` input. Returns the output and its channels and side.
pub fn ref_convnet(net: &ConvNet, x: &[f64], b: usize, c: usize, side: usize) -> (Vec<f64>, usize, usize) {
    let (mut x, mut c, mut side) = (x.to_vec(), c, side);
    let (mut pi, mut si) = (0, 0);
    for s in &net.specs {
        let k = net.params[pi].data();
        pi += 1;
        let kk = KERNEL;
        let out = if s.transpose {
            (side - 1) * s.stride + kk - 2 * s.padding
        } else {
            (side + 2 * s.padding - kk) / s.stride + 1
        };
        let mut y = vec![0.0f64; b * s.c_out * out * out];
        for n in 0..b {
            for ci in 0..c {
                for o in 0..s.c_out {
                    for ky in 0..kk {
                        for kx in 0..kk {
                            let w = if s.transpose {
                                k[((ci * s.c_out + o) * kk + ky) * kk + kx]
                            } else {
                                k[((o * c + ci) * kk + ky) * kk + kx]
                            } as f64;
                            for i in 0..out {
                                for j in 0..out {
                                    // transpose: input (i, j) scatters to output (i*s - p + ky);
                                    // forward: output (i, j) gathers input (i*s - p + ky)
                                    let (src, dst) = if s.transpose {
                                        let (yy, xx) = (i * s.stride + ky, j * s.stride + kx);
                                        if i >= side || j >= side || yy < s.padding || xx < s.padding {
                                            continue;
                                        }
                                        let (yy, xx) = (yy - s.padding, xx - s.padding);
                                        if yy >= out || xx >= out {
                                            continue;
                                        }
                                        ((i, j), (yy, xx))
                                    } else {
                                        let (yy, xx) = (i * s.stride + ky, j * s.stride + kx);
                                        if yy < s.padding || xx < s.padding {
                                            continue;
                                        }
                                        let (yy, xx) = (yy - s.padding, xx - s.padding);
                                        if yy >= side || xx >= side {
                                            continue;
                                        }
                                        ((yy, xx), (i, j))
                                    };
                                    let v = x[((n * c + ci) * side + src.0) * side + src.1];
                                    y[((n * s.c_out + o) * out + dst.0) * out + dst.1] += v * w;
                                }
                            }
                        }
                    }
                }
            }
        }
        let plane = out * out;
        let mut per_channel: Vec<(f64, f64)> = Vec::with_capacity(s.c_out);
        if s.batch_norm {
            let (ga, be) = (net.params[pi].data(), net.params[pi + 1].data());
            let st = &net.stats[si];
            pi += 2;
            si += 1;
            for o in 0..s.c_out {
                let scale = ga[o] as f64 / (st.var[o] as f64 + st.eps as f64).sqrt();
                per_channel.push((scale, be[o] as f64 - scale * st.mean[o] as f64));
            }
        } else {
            let bias = net.params[pi].data();
            pi += 1;
            per_channel.extend(bias.iter().map(|&v| (1.0, v as f64)));
        }
        for n in 0..b {
            for (o, &(a, shift)) in per_channel.iter().enumerate() {
                for q in &mut y[(n * s.c_out + o) * plane..(n * s.c_out + o + 1) * plane] {
                    let v = a * *q + shift;
                    *q = match s.activation {
                        Activation::Relu => v.max(0.0),
                        Activation::Sigmoid => 1.0 / (1.0 + (-v).exp()),
                        Activation::Identity => v,
                    };
                }
            }
        }
        x = y;
        c = s.c_out;
        side = out;
    }
    (x, c, side)
}

/// Mixture NLL in f64 from explicit inverses and determinants.
pub fn ref_gmm_nll(gmm: &GmmModel, z: &[f64]) -> f64 {
    let d = z.len();
    let z = DVector::from_column_slice(z);
    let logs: Vec<f64> = (0..gmm.k())
        .map(|c| {
            let cov = &gmm.covariances()[c];
            let diff = &z - &gmm.means()[c];
            let q = (diff.transpose() * cov.clone().try_inverse().unwrap() * &diff)[(0, 0)];
            gmm.weights()[c].ln() - 0.5 * (q + d as f64 * (2.0 * PI).ln() + cov.determinant().ln())
        })
        .collect();
    let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    -(m + logs.iter().map(|l| (l - m).exp()).sum::<f64>().ln())
}

/// Relative error between `grad . dir` and an f64 central difference of
/// `objective` along `dir` at `x`.
pub fn f64_directional_error(grad: &Tensor, objective: impl Fn(&[f64]) -> f64, x: &Tensor, dir: &Tensor) -> f64 {
    let analytic: f64 = grad.data().iter().zip(dir.data()).map(|(&a, &b)| a as f64 * b as f64).sum();
    let at = |t: f64| -> Vec<f64> {
        x.data().iter().zip(dir.data()).map(|(&v, &d)| v as f64 + t * d as f64).collect()
    };
    let numeric = (objective(&at(F64_H)) - objective(&at(-F64_H))) / (2.0 * F64_H);
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn f64s(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

/// A small encoder with a GMM fitted to its representations of random
/// images.
pub fn encoder_with_gmm(seed: u64) -> (EncoderModel, GmmModel) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let enc = EncoderModel::new(16, 4, 4, &mut rng).unwrap();
    let fit = Tensor::uniform(&[60, 1, 16, 16], 1.5, &mut rng);
    let z = enc.encode(&fit).unwrap();
    let (gmm, _) = fit_em(&z, 2, &mut rng, 1e-3, 200).unwrap();
    (enc, gmm)
}

/// Signed gradient of `sum_i nll(enc(x_i))` with respect to the input.
pub fn nll_input_gradient(enc: &EncoderModel, gmm: &GmmModel, x: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let vars = enc.net.bind(&mut g, false);
    let xv = g.param(x.clone());
    let z = enc.encode_graph(&mut g, &vars, xv).unwrap();
    let zt = g.value(z).clone();
    let mut seed = Vec::with_capacity(zt.len());
    for row in zt.data().chunks(gmm.dim()) {
        seed.extend(gmm.nll_grad(row).unwrap().into_iter().map(|v| v as f32));
    }
    let seed = Tensor::new(zt.shape().to_vec(), seed).unwrap();
    g.backward(z, Some(&seed)).unwrap();
    g.grad_or_zeros(xv)
}

/// `sum_i nll(enc(x_i))` through the f64 reference forward.
pub fn ref_encoder_nll(enc: &EncoderModel, gmm: &GmmModel, x: &[f64], b: usize) -> f64 {
    let (z, _, _) = ref_convnet(&enc.net, x, b, 1, enc.resolution);
    z.chunks(enc.nz).map(|row| ref_gmm_nll(gmm, row)).sum()
}

/// Worst relative error of the encoder-NLL input gradient against central
/// differences of the f64 reference NLL score.
pub fn encoder_nll_composite_error(seed: u64) -> f64 {
    let (enc, gmm) = encoder_with_gmm(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let x = Tensor::uniform(&[2, 1, 16, 16], 1.5, &mut rng);
    let forward = ref_encoder_nll(&enc, &gmm, &f64s(&x), 2);
    let direct: f64 = gmm.nll_batch(&enc.encode(&x).unwrap()).unwrap().iter().sum();
    assert!((forward - direct).abs() < 1e-3 * (1.0 + direct.abs()), "reference {forward} vs model {direct}");
    let grad = nll_input_gradient(&enc, &gmm, &x);
    probe_directions(&grad, 4, 8, &mut rng)
        .iter()
        .map(|d| f64_directional_error(&grad, |p| ref_encoder_nll(&enc, &gmm, p, 2), &x, d))
        .fold(0.0, f64::max)
}

/// Summed `rec + beta * kl` through the f64 reference encoder and decoder
/// with fixed noise.
pub fn ref_vae_loss(vae: &VaeModel, x: &[f64], b: usize, eps: &Tensor) -> f64 {
    let (h, _, _) = ref_convnet(&vae.encoder, x, b, 1, vae.resolution);
    let nz = vae.nz;
    let mut z = Vec::with_capacity(b * nz);
    let mut kl = 0.0;
    for (i, row) in h.chunks(2 * nz).enumerate() {
        for j in 0..nz {
            let (m, lv) = (row[j], row[nz + j].clamp(-LOGVAR_LIMIT as f64, LOGVAR_LIMIT as f64));
            z.push(m + (0.5 * lv).exp() * eps.data()[i * nz + j] as f64);
            kl += 0.5 * (lv.exp() + m * m - 1.0 - lv);
        }
    }
    let (recon, _, _) = ref_convnet(&vae.decoder, &z, b, nz, 1);
    let rec: f64 = x.iter().zip(&recon).map(|(&v, &r)| ((v + 1.5) / 3.0 - r).abs()).sum();
    rec + vae.beta as f64 * kl
}

/// Gradient of the summed VAE loss with respect to the input, fixed noise.
pub fn vae_input_gradient(vae: &VaeModel, x: &Tensor, eps: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let vars = vae.bind(&mut g, false);
    let xv = g.param(x.clone());
    let out = vae.forward_graph(&mut g, &vars, xv, Some(eps)).unwrap();
    let rec = rec_graph(&mut g, xv, out.recon).unwrap();
    let kl = kl_graph(&mut g, out.mean, out.logvar).unwrap();
    let kl = g.scale(kl, vae.beta).unwrap();
    let total = g.add(rec, kl).unwrap();
    let total = g.sum(total).unwrap();
    g.backward(total, None).unwrap();
    g.grad_or_zeros(xv)
}

pub fn small_vae(seed: u64, cevae: bool) -> VaeModel {
    VaeModel::new(16, 4, 4, cevae, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

/// Worst relative error of the VAE loss input gradient against central
/// differences of the f64 reference loss, reparameterized with fixed noise.
pub fn vae_loss_composite_error(seed: u64) -> f64 {
    let vae = small_vae(seed, false);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    let x = Tensor::uniform(&[2, 1, 16, 16], 1.5, &mut rng);
    let eps = Tensor::from_fn(&[2, 4], |_| StandardNormal.sample(&mut rng));
    let t = vae.terms(&x, Some(&eps)).unwrap();
    let direct: f64 = t.total.iter().sum();
    let forward = ref_vae_loss(&vae, &f64s(&x), 2, &eps);
    assert!((forward - direct).abs() < 1e-3 * (1.0 + direct.abs()), "reference {forward} vs model {direct}");
    let grad = vae_input_gradient(&vae, &x, &eps);
    probe_directions(&grad, 4, 8, &mut rng)
        .iter()
        .map(|d| f64_directional_error(&grad, |p| ref_vae_loss(&vae, p, 2, &eps), &x, d))
        .fold(0.0, f64::max)
}
