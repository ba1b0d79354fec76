mod common;

use common::{
    encoder_nll_composite_error, encoder_with_gmm, f64_directional_error, nll_input_gradient, probe_directions,
    ref_convnet, small_vae,
};
use cradl_core::density::{FlowModel, GmmModel};
use cradl_core::scoring::{
    combi, detection_scores, gaussian_kernel, gaussian_smooth, heatmaps, mask_outside, median_pool2d, postprocess,
    Density, HeatmapKind, IdentityEncoder, PostprocessConfig, Representation, ScoreKind, Scorer,
};
use cradl_core::tensor::{Graph, Tensor, Var};
use cradl_core::vae::{kl_graph, to_target, LOGVAR_LIMIT};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn standard_gmm(d: usize) -> GmmModel {
    GmmModel::new(vec![1.0], vec![DVector::zeros(d)], vec![DMatrix::identity(d, d)]).unwrap()
}

fn images(b: usize, side: usize, seed: u64) -> Tensor {
    Tensor::uniform(&[b, 1, side, side], 1.5, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Reads only the first two pixels of every image.
struct FirstTwo {
    pixels: usize,
}

impl Representation for FirstTwo {
    fn dim(&self) -> usize {
        2
    }

    fn encode_graph(&self, g: &mut Graph, x: Var) -> cradl_core::Result<Var> {
        let b = g.shape(x)[0];
        let flat = g.reshape(x, &[b, self.pixels])?;
        g.slice_cols(flat, 0, 2)
    }
}

#[test]
fn standard_normal_nll_at_origin() {
    let gmm = standard_gmm(2);
    let enc = IdentityEncoder { pixels: 2 };
    let scorer = Scorer::Nll { encoder: &enc, density: Density::Gmm(&gmm) };
    let s = detection_scores(ScoreKind::NllGmm, scorer, &Tensor::zeros(&[1, 1, 1, 2])).unwrap();
    assert!((s[0] - (2.0 * std::f64::consts::PI).ln()).abs() < 1e-6);
}

#[test]
fn scores_follow_density_order() {
    let gmm = standard_gmm(2);
    let enc = IdentityEncoder { pixels: 2 };
    let scorer = Scorer::Nll { encoder: &enc, density: Density::Gmm(&gmm) };
    let x = Tensor::new(vec![2, 1, 1, 2], vec![0.3, -0.2, 1.5, 1.0]).unwrap();
    let s = detection_scores(ScoreKind::NllGmm, scorer, &x).unwrap();
    assert!(s[0] < s[1]);
}

#[test]
fn identity_heatmap_is_absolute_input() {
    let x = images(3, 4, 1);
    let gmm = standard_gmm(16);
    let enc = IdentityEncoder { pixels: 16 };
    let maps = heatmaps(HeatmapKind::NllGrad, Scorer::Nll { encoder: &enc, density: Density::Gmm(&gmm) }, &x).unwrap();
    for (i, m) in maps.iter().enumerate() {
        assert_eq!(m.map.shape(), &[4, 4]);
        assert!(!m.postprocessed);
        for (a, b) in m.map.data().iter().zip(&x.data()[i * 16..(i + 1) * 16]) {
            assert!((a - b.abs()).abs() < 1e-6);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let flow = FlowModel::identity(16, 2, 8, true, &mut rng).unwrap();
    let maps = heatmaps(HeatmapKind::NllGrad, Scorer::Nll { encoder: &enc, density: Density::Flow(&flow) }, &x).unwrap();
    for (i, m) in maps.iter().enumerate() {
        for (a, b) in m.map.data().iter().zip(&x.data()[i * 16..(i + 1) * 16]) {
            assert!((a - b.abs()).abs() < 1e-5);
        }
    }
}

#[test]
fn encoder_nll_heatmap_matches_differences() {
    for seed in 0..3 {
        let e = encoder_nll_composite_error(seed);
        assert!(e < 1e-3, "seed {seed}: {e}");
    }
}

#[test]
fn nll_heatmap_is_absolute_seeded_gradient() {
    let (enc, gmm) = encoder_with_gmm(4);
    let x = images(3, 16, 4);
    let signed = nll_input_gradient(&enc, &gmm, &x);
    let maps = heatmaps(HeatmapKind::NllGrad, Scorer::Nll { encoder: &enc, density: Density::Gmm(&gmm) }, &x).unwrap();
    let flat: Vec<f32> = maps.iter().flat_map(|m| m.map.data().to_vec()).collect();
    let want: Vec<f32> = signed.data().iter().map(|v| v.abs()).collect();
    assert_eq!(flat, want);
}

#[test]
fn nll_score_ignores_pixels_the_encoder_ignores() {
    let gmm = standard_gmm(2);
    let enc = FirstTwo { pixels: 16 };
    let scorer = Scorer::Nll { encoder: &enc, density: Density::Gmm(&gmm) };
    let x = images(2, 4, 5);
    let mut y = x.clone();
    for k in [5, 9, 15, 20, 31] {
        y.data_mut()[k] = 7.0;
    }
    assert_eq!(
        detection_scores(ScoreKind::NllGmm, scorer, &x).unwrap(),
        detection_scores(ScoreKind::NllGmm, scorer, &y).unwrap()
    );
}

#[test]
fn vae_scores_and_rec_heatmap_agree_with_terms() {
    let vae = small_vae(6, false);
    let x = images(3, 16, 6);
    let (recon, ..) = vae.forward_with(&x, None).unwrap();
    let terms = vae.terms(&x, None).unwrap();
    assert_eq!(detection_scores(ScoreKind::Elbo, Scorer::Vae(&vae), &x).unwrap(), terms.total);
    assert_eq!(detection_scores(ScoreKind::Kl, Scorer::Vae(&vae), &x).unwrap(), terms.kl);
    let rec = detection_scores(ScoreKind::Rec, Scorer::Vae(&vae), &x).unwrap();
    assert_eq!(rec, terms.rec);

    let maps = heatmaps(HeatmapKind::Rec, Scorer::Vae(&vae), &x).unwrap();
    for (i, m) in maps.iter().enumerate() {
        let range = i * 256..(i + 1) * 256;
        for ((&h, &v), &r) in m.map.data().iter().zip(&x.data()[range.clone()]).zip(&recon.data()[range]) {
            assert_eq!(h, (to_target(v) - r).abs());
        }
        let total: f64 = m.map.data().iter().map(|&v| v as f64).sum();
        assert!((total - rec[i]).abs() < 1e-3, "{total} vs {}", rec[i]);
    }
}

#[test]
fn combi_is_the_elementwise_product() {
    let a = Tensor::new(vec![1, 2], vec![2.0, 0.5]).unwrap();
    let b = Tensor::new(vec![1, 2], vec![1.0, 4.0]).unwrap();
    assert_eq!(combi(&a, &b).unwrap().data(), &[2.0, 2.0]);
    assert!(combi(&a, &Tensor::zeros(&[2, 1])).is_err());

    let vae = small_vae(7, true);
    let x = images(2, 16, 7);
    let kl = heatmaps(HeatmapKind::KlGrad, Scorer::Vae(&vae), &x).unwrap();
    let rec = heatmaps(HeatmapKind::Rec, Scorer::Vae(&vae), &x).unwrap();
    let both = heatmaps(HeatmapKind::Combi, Scorer::Vae(&vae), &x).unwrap();
    for ((k, r), c) in kl.iter().zip(&rec).zip(&both) {
        let want: Vec<f32> = k.map.data().iter().zip(r.map.data()).map(|(a, b)| a * b).collect();
        assert_eq!(c.map.data(), &want[..]);
    }
}

#[test]
fn kl_heatmap_matches_differences() {
    let vae = small_vae(8, false);
    let x = images(2, 16, 8);
    let mut g = Graph::new();
    let vars = vae.bind(&mut g, false);
    let xv = g.param(x.clone());
    let (mean, logvar) = vae.posterior_graph(&mut g, &vars, xv).unwrap();
    let kl = kl_graph(&mut g, mean, logvar).unwrap();
    let kl = g.sum(kl).unwrap();
    g.backward(kl, None).unwrap();
    let grad = g.grad_or_zeros(xv);

    let maps = heatmaps(HeatmapKind::KlGrad, Scorer::Vae(&vae), &x).unwrap();
    let flat: Vec<f32> = maps.iter().flat_map(|m| m.map.data().to_vec()).collect();
    assert_eq!(flat, grad.data().iter().map(|v| v.abs()).collect::<Vec<_>>());

    let objective = |p: &[f64]| -> f64 {
        let (h, _, _) = ref_convnet(&vae.encoder, p, 2, 1, 16);
        h.chunks(8)
            .map(|row| {
                (0..4)
                    .map(|j| {
                        let (m, lv) = (row[j], row[4 + j].clamp(-LOGVAR_LIMIT as f64, LOGVAR_LIMIT as f64));
                        0.5 * (lv.exp() + m * m - 1.0 - lv)
                    })
                    .sum::<f64>()
            })
            .sum()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for d in probe_directions(&grad, 4, 8, &mut rng) {
        let e = f64_directional_error(&grad, objective, &x, &d);
        assert!(e < 1e-3, "{e}");
    }
}

#[test]
fn mismatched_kinds_are_rejected() {
    let gmm = standard_gmm(16);
    let enc = IdentityEncoder { pixels: 16 };
    let nll = Scorer::Nll { encoder: &enc, density: Density::Gmm(&gmm) };
    let vae = small_vae(0, false);
    let x = images(1, 4, 0);
    assert!(detection_scores(ScoreKind::Elbo, nll, &x).is_err());
    assert!(detection_scores(ScoreKind::NllFlow, nll, &x).is_err());
    assert!(detection_scores(ScoreKind::NllGmm, Scorer::Vae(&vae), &images(1, 16, 0)).is_err());
    assert!(heatmaps(HeatmapKind::Rec, nll, &x).is_err());
    assert!(heatmaps(HeatmapKind::NllGrad, Scorer::Vae(&vae), &images(1, 16, 0)).is_err());
    let small = standard_gmm(3);
    assert!(detection_scores(ScoreKind::NllGmm, Scorer::Nll { encoder: &enc, density: Density::Gmm(&small) }, &x).is_err());
    assert!(detection_scores(ScoreKind::NllGmm, nll, &Tensor::zeros(&[1, 16])).is_err());
}

#[test]
fn median_hand_values() {
    let c = Tensor::full(&[6, 6], 0.3);
    assert_eq!(median_pool2d(&c, 5).unwrap(), c);
    let mut spike = Tensor::zeros(&[8, 8]);
    spike.data_mut()[3 * 8 + 4] = 100.0;
    assert!(median_pool2d(&spike, 5).unwrap().data().iter().all(|&v| v == 0.0));
    assert!(median_pool2d(&c, 4).is_err());
    assert!(median_pool2d(&Tensor::zeros(&[2, 2]), 5).is_err());
}

#[test]
fn isolated_spikes_vanish_from_smooth_maps() {
    let n = 16;
    let base = Tensor::from_fn(&[n, n], |k| 0.1 * (k / n) as f32 + 0.05 * (k % n) as f32);
    let mut spiky = base.clone();
    for k in [2 * n + 3, 7 * n + 11, 12 * n + 6] {
        spiky.data_mut()[k] = 50.0;
    }
    let a = median_pool2d(&base, 5).unwrap();
    let b = median_pool2d(&spiky, 5).unwrap();
    assert!(b.max_abs_diff(&a) < 0.2, "{}", b.max_abs_diff(&a));
    assert!(b.data().iter().all(|&v| v < 5.0));
}

#[test]
fn gaussian_hand_values() {
    for sigma in [0.5, 1.0, 2.0, 3.3] {
        let k = gaussian_kernel(sigma).unwrap();
        assert_eq!(k.len(), 2 * (4.0 * sigma).ceil() as usize + 1);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    assert!(gaussian_kernel(0.0).is_err());

    let c = Tensor::full(&[12, 12], -0.4);
    assert!(gaussian_smooth(&c, 2.0).unwrap().max_abs_diff(&c) < 1e-6);

    let n = 21;
    let mut delta = Tensor::zeros(&[n, n]);
    delta.data_mut()[10 * n + 10] = 1.0;
    let out = gaussian_smooth(&delta, 1.0).unwrap();
    let k = gaussian_kernel(1.0).unwrap();
    for i in 0..n {
        for j in 0..n {
            let (di, dj) = (i as isize - 10, j as isize - 10);
            let want = if di.abs() <= 4 && dj.abs() <= 4 { k[(di + 4) as usize] * k[(dj + 4) as usize] } else { 0.0 };
            assert!((out.data()[i * n + j] as f64 - want).abs() < 1e-7);
        }
    }
}

#[test]
fn smoothing_preserves_interior_mass() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let n = 40;
    let map = Tensor::from_fn(&[n, n], |k| {
        let (i, j) = (k / n, k % n);
        if (12..28).contains(&i) && (12..28).contains(&j) {
            rng.random_range(0.0f32..1.0)
        } else {
            0.0
        }
    });
    let out = gaussian_smooth(&map, 2.0).unwrap();
    let (a, b) = (map.sum(), out.sum());
    assert!((a - b).abs() < 1e-4 * a, "{a} vs {b}");
}

#[test]
fn postprocess_masks_before_pooling() {
    let n = 16;
    let brain: Vec<bool> = (0..n * n).map(|k| (4..12).contains(&(k / n)) && (4..12).contains(&(k % n))).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let map = Tensor::from_fn(&[n, n], |_| rng.random_range(0.0f32..1.0));
    let masked = mask_outside(&map, &brain).unwrap();
    assert!(masked.data().iter().zip(&brain).all(|(&v, &b)| b || v == 0.0));
    assert_eq!(mask_outside(&masked, &brain).unwrap(), masked);
    assert!(mask_outside(&map, &brain[1..]).is_err());

    let heat = cradl_core::scoring::Heatmap { map: map.clone(), kind: HeatmapKind::Rec, postprocessed: false };
    let cfg = PostprocessConfig::default();
    let a = postprocess(&heat, &brain, &cfg).unwrap();
    assert!(a.postprocessed);
    assert_eq!(a, postprocess(&heat, &brain, &cfg).unwrap());

    let mut outside = map;
    outside.data_mut()[n + 1] = 1e6;
    outside.data_mut()[14 * n + 2] = 1e6;
    let spiked = cradl_core::scoring::Heatmap { map: outside, ..heat };
    assert_eq!(postprocess(&spiked, &brain, &cfg).unwrap().map, a.map);
}

proptest! {
    #[test]
    fn median_matches_window_sort(seed in any::<u64>(), kernel in prop::sample::select(vec![1usize, 3, 5, 7])) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 7;
        let map = Tensor::from_fn(&[n, n], |_| rng.random_range(-1.0f32..1.0));
        let out = median_pool2d(&map, kernel).unwrap();
        let reflect = |i: isize| -> usize {
            let i = if i < 0 { -i } else { i };
            (if i >= n as isize { 2 * (n as isize - 1) - i } else { i }) as usize
        };
        let r = (kernel / 2) as isize;
        for i in 0..n as isize {
            for j in 0..n as isize {
                let mut w: Vec<f32> = Vec::new();
                for di in -r..=r {
                    for dj in -r..=r {
                        w.push(map.data()[reflect(i + di) * n + reflect(j + dj)]);
                    }
                }
                w.sort_by(f32::total_cmp);
                prop_assert_eq!(out.data()[i as usize * n + j as usize], w[w.len() / 2]);
            }
        }
    }

    #[test]
    fn heatmaps_are_non_negative(seed in any::<u64>()) {
        let vae = small_vae(seed % 3, true);
        let x = images(2, 16, seed);
        for kind in [HeatmapKind::Rec, HeatmapKind::KlGrad, HeatmapKind::Combi] {
            for m in heatmaps(kind, Scorer::Vae(&vae), &x).unwrap() {
                prop_assert!(m.map.data().iter().all(|&v| v >= 0.0 && v.is_finite()));
            }
        }
        let (enc, gmm) = encoder_with_gmm(seed % 3);
        for m in heatmaps(HeatmapKind::NllGrad, Scorer::Nll { encoder: &enc, density: Density::Gmm(&gmm) }, &x).unwrap() {
            prop_assert!(m.map.data().iter().all(|&v| v >= 0.0 && v.is_finite()));
        }
    }
}
