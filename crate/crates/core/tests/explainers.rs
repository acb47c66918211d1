mod common;

use camb::explain::{
    bilinear_upscale, eigen_cam, eigen_cam_map, feature_matrix, grad_cam, grad_cam_map, minmax_normalize, svd,
    tap_gradient, EigenCamMode,
};
use camb::model::{BackboneSpec, FeatureMap, HeadKind, ModelBundle};
use camb::nn::{ParamSet, Tensor};
use common::{random_tensor, rng};
use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;
use rand::Rng;

fn feature_map(c: usize, h: usize, w: usize, seed: u64) -> FeatureMap {
    FeatureMap(random_tensor(&mut rng(seed), &[c, h, w], 1.0))
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
}

/// Top eigenvector of A A^T from a dense symmetric eigensolver.
fn dense_top_eigenvector(m: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let a = DMatrix::from_row_slice(rows, cols, m);
    let eig = SymmetricEigen::new(&a * a.transpose());
    let top = eig.eigenvalues.iamax();
    eig.eigenvectors.column(top).iter().copied().collect()
}

#[test]
fn left_singular_vector_matches_dense_eigensolver() {
    let mut worst_cos: f64 = 1.0;
    let mut worst_residual: f64 = 0.0;
    for seed in 0..100 {
        let f = feature_map(8, 4, 4, seed);
        let m = feature_matrix(&f);
        let r = svd(&m, 16, 8);
        worst_cos = worst_cos.min(cosine(&r.left(0), &dense_top_eigenvector(&m, 16, 8)).abs());
        let back = r.reconstruct();
        let num: f64 = m.iter().zip(&back).map(|(a, b)| (a - b) * (a - b)).sum();
        let den: f64 = m.iter().map(|a| a * a).sum();
        worst_residual = worst_residual.max((num / den).sqrt());
    }
    assert!(worst_cos >= 1.0 - 1e-6, "worst |cos| {worst_cos}");
    assert!(worst_residual < 1e-4, "worst residual {worst_residual}");
}

#[test]
fn svd_factors_are_orthonormal_and_sorted() {
    for (seed, (rows, cols)) in [(16, 8), (16, 64), (5, 5), (3, 9)].into_iter().enumerate() {
        let mut g = rng(seed as u64);
        let m: Vec<f64> = (0..rows * cols).map(|_| g.random_range(-1.0..1.0)).collect();
        let r = svd(&m, rows, cols);
        assert_eq!(r.rank(), rows.min(cols));
        assert!(r.s.windows(2).all(|w| w[0] >= w[1]) && r.s.iter().all(|s| *s >= 0.0));
        for (vecs, len) in [(&r.u, rows), (&r.v, cols)] {
            let k = r.rank();
            for p in 0..k {
                for q in 0..k {
                    let dot: f64 = (0..len).map(|i| vecs[i * k + p] * vecs[i * k + q]).sum();
                    let expected = if p == q { 1.0 } else { 0.0 };
                    assert!((dot - expected).abs() < 1e-4, "{rows}x{cols} gram[{p},{q}] = {dot}");
                }
            }
        }
    }
}

#[test]
fn rank_one_map_recovers_spatial_factor() {
    let u = [0.1f32, 0.8, 0.3, 0.0, 0.5, 0.9, 0.2, 0.4, 0.7];
    let v = [0.2f32, 1.5, 0.7, 0.05];
    let data: Vec<f32> = (0..4).flat_map(|l| u.iter().map(move |x| x * v[l])).collect();
    let f = FeatureMap(Tensor::new(vec![4, 3, 3], data).unwrap());
    let map: Vec<f32> = eigen_cam_map(&f, EigenCamMode::LeftSingular)
        .unwrap()
        .into_iter()
        .map(|x| x as f32)
        .collect();
    let (ours, _) = minmax_normalize(&map);
    let (expected, _) = minmax_normalize(&u);
    for (a, b) in ours.iter().zip(&expected) {
        assert!((a - b).abs() < 1e-5);
    }
}

#[test]
fn zero_feature_map_is_degenerate() {
    let f = FeatureMap(Tensor::zeros(&[8, 4, 4]));
    assert!(eigen_cam_map(&f, EigenCamMode::LeftSingular).is_none());
    let mut b = bundle(HeadKind::Classification, 0);
    b.params.get_mut("backbone.s2.c1.w").unwrap().data_mut().fill(0.0);
    b.params.get_mut("backbone.s2.c1.b").unwrap().data_mut().fill(0.0);
    let e = eigen_cam(&b, &image(0), EigenCamMode::LeftSingular).unwrap();
    assert!(e.meta.degenerate && e.values().iter().all(|v| *v == 0.0));
}

#[test]
fn bilinear_matches_half_pixel_formula() {
    let src = [0.0f32, 1.0, 0.0, 1.0];
    let out = bilinear_upscale(&src, 2, 2, 2, 4);
    // x_src = (x + 0.5) * 2/4 - 0.5, clamped at 0; value = fraction between columns
    let expected_row: Vec<f32> = (0..4)
        .map(|x| {
            let pos: f32 = ((x as f32 + 0.5) * 0.5 - 0.5).max(0.0);
            pos.min(1.0)
        })
        .collect();
    assert_eq!(expected_row, vec![0.0, 0.25, 0.75, 1.0]);
    assert_eq!(&out[..4], expected_row.as_slice());
    assert_eq!(&out[4..], expected_row.as_slice());
}

#[test]
fn unit_gradient_gives_relu_of_channel_mean() {
    let f = feature_map(5, 3, 3, 7);
    let (raw, alpha) = grad_cam_map(&f, &Tensor::full(&[5, 3, 3], 1.0)).unwrap();
    assert!(alpha.iter().all(|a| *a == 1.0));
    for p in 0..9 {
        let mean: f32 = (0..5).map(|l| f.0.data()[l * 9 + p]).sum::<f32>() / 5.0;
        assert!((raw[p] - mean.max(0.0)).abs() < 1e-6);
    }
}

#[test]
fn single_channel_unit_gradient_returns_the_map() {
    let data: Vec<f32> = random_tensor(&mut rng(3), &[1, 4, 4], 1.0).data().iter().map(|v| v.abs()).collect();
    let f = FeatureMap(Tensor::new(vec![1, 4, 4], data.clone()).unwrap());
    let (raw, _) = grad_cam_map(&f, &Tensor::full(&[1, 4, 4], 1.0)).unwrap();
    assert_eq!(minmax_normalize(&raw), minmax_normalize(&data));
}

/// Two channels on a 2x2 grid, pooled then a linear head
/// `W = [[1, -2], [0.5, 1]]`. For class 0 the gradient in channel l is
/// `W[0][l] / 4`, so alpha = (0.25, -0.5), and the raw map is
/// ReLU((0.25*A0 - 0.5*A1) / 2) = [[0.125, 0], [0.125, 0.5]],
/// which normalizes to [[0.25, 0], [0.25, 1]].
#[test]
fn hand_computed_two_channel_net() {
    let a = Tensor::new(vec![2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
    let f = FeatureMap(a);
    let inter = tap_gradient(&f, Some(0), |tape, x| {
        let pooled = tape.global_avg_pool(x)?;
        let w = tape.constant(Tensor::new(vec![2, 2], vec![1.0, -2.0, 0.5, 1.0])?);
        tape.linear(pooled, w, None)
    })
    .unwrap();
    assert_eq!(inter.alpha, vec![0.25, -0.5]);
    let (raw, _) = grad_cam_map(&f, &inter.gradient).unwrap();
    assert_eq!(raw, vec![0.125, 0.0, 0.125, 0.5]);
    let up = bilinear_upscale(&raw, 2, 2, 2, 2);
    assert_eq!(minmax_normalize(&up), (vec![0.25, 0.0, 0.25, 1.0], false));
}

fn bundle(head: HeadKind, seed: u64) -> ModelBundle {
    ModelBundle::new("t", BackboneSpec::default(), head, 5, seed).unwrap()
}

fn image(seed: u64) -> Tensor {
    random_tensor(&mut rng(seed), &[3, 32, 32], 1.0)
}

fn random_probe(seed: u64) -> ParamSet {
    let mut p = ParamSet::new();
    p.insert("probe.w", random_tensor(&mut rng(seed), &[5, 64], 1.0));
    p.insert("probe.b", random_tensor(&mut rng(seed + 1), &[5], 1.0));
    p
}

#[test]
fn grad_cam_ignores_positive_logit_scaling() {
    for seed in 0..10 {
        let b = bundle(HeadKind::Classification, seed);
        let mut scaled = b.clone();
        for name in ["head.w", "head.b"] {
            scaled.params.get_mut(name).unwrap().data_mut().iter_mut().for_each(|v| *v *= 3.7);
        }
        let x = image(seed + 100);
        let (e1, i1) = grad_cam(&b, &x, None).unwrap();
        let (e2, i2) = grad_cam(&scaled, &x, None).unwrap();
        assert_eq!(i1.class, i2.class);
        for (p, q) in e1.values().iter().zip(e2.values()) {
            assert!((p - q).abs() <= 1e-5);
        }
    }
}

#[test]
fn alpha_is_spatial_mean_of_gradient() {
    let b = bundle(HeadKind::Classification, 4);
    let (_, inter) = grad_cam(&b, &image(4), Some(2)).unwrap();
    for (l, g) in inter.gradient.data().chunks(16).enumerate() {
        let mean = g.iter().sum::<f32>() / 16.0;
        assert!((inter.alpha[l] - mean).abs() < 1e-6);
    }
}

#[test]
fn tap_gradient_reaches_the_feature_map() {
    for seed in 0..5 {
        let mut b = bundle(HeadKind::projection_default(64), seed);
        b.probe = Some(random_probe(seed));
        for class in 0..5 {
            let (_, inter) = grad_cam(&b, &image(seed), Some(class)).unwrap();
            assert!(inter.gradient.data().iter().any(|g| *g != 0.0));
        }
    }
}

#[test]
fn contrastive_grad_cam_needs_probe() {
    let b = bundle(HeadKind::projection_default(64), 0);
    assert!(matches!(grad_cam(&b, &image(0), None), Err(camb::Error::MissingProbe)));
    assert!(eigen_cam(&b, &image(0), EigenCamMode::LeftSingular).is_ok());
}

#[test]
fn probe_changes_grad_cam_but_not_eigen_cam() {
    let mut b = bundle(HeadKind::projection_default(64), 2);
    let x = image(9);
    b.probe = Some(random_probe(10));
    let (g1, _) = grad_cam(&b, &x, Some(1)).unwrap();
    let e1 = eigen_cam(&b, &x, EigenCamMode::LeftSingular).unwrap();
    b.probe = Some(random_probe(20));
    let (g2, _) = grad_cam(&b, &x, Some(1)).unwrap();
    let e2 = eigen_cam(&b, &x, EigenCamMode::LeftSingular).unwrap();
    assert_ne!(g1.saliency, g2.saliency);
    assert_eq!(e1.saliency, e2.saliency);
}

#[test]
fn eigen_cam_does_not_depend_on_the_head() {
    let ce = bundle(HeadKind::Classification, 3);
    let mut cl = bundle(HeadKind::projection_default(64), 99);
    for (name, t) in ce.params.with_prefix("backbone.").iter() {
        *cl.params.get_mut(name).unwrap() = t.clone();
    }
    let x = image(5);
    for mode in [EigenCamMode::LeftSingular, EigenCamMode::CenteredProjection] {
        assert_eq!(
            eigen_cam(&ce, &x, mode).unwrap().saliency,
            eigen_cam(&cl, &x, mode).unwrap().saliency
        );
    }
}

#[test]
fn eigen_cam_ignores_positive_feature_scaling() {
    for seed in 0..20 {
        let f = feature_map(8, 4, 4, seed);
        let scaled = FeatureMap(f.0.map(|v| v * 5.5));
        let to32 = |m: Vec<f64>| m.into_iter().map(|v| v as f32).collect::<Vec<_>>();
        let a = minmax_normalize(&to32(eigen_cam_map(&f, EigenCamMode::LeftSingular).unwrap())).0;
        let b = minmax_normalize(&to32(eigen_cam_map(&scaled, EigenCamMode::LeftSingular).unwrap())).0;
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-5);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn explanations_honour_the_unit_range_contract(seed in 0u64..1000, class in 0usize..5) {
        let b = bundle(HeadKind::Classification, seed);
        let x = image(seed + 7);
        let (g, _) = grad_cam(&b, &x, Some(class)).unwrap();
        let e = eigen_cam(&b, &x, EigenCamMode::LeftSingular).unwrap();
        for ex in [&g, &e] {
            prop_assert_eq!(ex.saliency.shape(), &[32, 32]);
            let v = ex.values();
            prop_assert!(v.iter().all(|x| (0.0..=1.0).contains(x)));
            if ex.meta.degenerate {
                prop_assert!(v.iter().all(|x| *x == 0.0));
            } else {
                prop_assert_eq!(v.iter().cloned().fold(f32::MIN, f32::max), 1.0);
                prop_assert_eq!(v.iter().cloned().fold(f32::MAX, f32::min), 0.0);
            }
        }
    }
}
