//! Hutchinson trace estimates against exact and dense finite-difference
//! Hessians.

#![allow(clippy::needless_range_loop)]

mod common;

use common::{reference_loss, RefParams};
use drq_core::data::gaussian_blobs;
use drq_core::numerics::{LayerSpec, Network, ParamId, Slot};
use drq_core::sensitivity::{hessian_trace, layer_hessian_trace, profile_network, Sensitivity};
use drq_core::trainer::{train_float, FloatTrainConfig};

/// Dense Hessian of the f64 reference loss over one layer's weights, by
/// second-order central differences of the loss alone.
fn dense_fd_hessian(net: &Network, layer: usize, x: &[f64], y: &[usize]) -> Vec<Vec<f64>> {
    let base = RefParams::from(net);
    let k = base.ids.iter().position(|id| *id == ParamId::new(layer, Slot::Weight)).unwrap();
    let n = base.values[k].len();
    let h = 1e-4;
    let loss = |di: Option<(usize, f64)>, dj: Option<(usize, f64)>| {
        let mut p = base.clone();
        for (idx, d) in [di, dj].into_iter().flatten() {
            p.values[k][idx] += d;
        }
        reference_loss(net.specs(), net.input_shape(), &p, x, y)
    };
    let mut hess = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let v = (loss(Some((i, h)), Some((j, h))) - loss(Some((i, h)), Some((j, -h))) - loss(Some((i, -h)), Some((j, h)))
                + loss(Some((i, -h)), Some((j, -h))))
                / (4.0 * h * h);
            hess[i][j] = v;
            hess[j][i] = v;
        }
    }
    hess
}

fn small_trained_mlp() -> (Network, drq_core::data::Dataset) {
    let split = gaussian_blobs(3, 4, 300, 1.0, 1.0, 5).unwrap();
    let specs = [
        LayerSpec::dense(4, 8, false),
        LayerSpec::relu(8),
        LayerSpec::dense(8, 8, true),
        LayerSpec::relu(8),
        LayerSpec::dense(8, 3, false),
    ];
    let mut net = Network::new(&[4], &specs, 3).unwrap();
    assert!(net.param_count() <= 200);
    train_float(
        &mut net,
        &split.train,
        &FloatTrainConfig {
            epochs: 10,
            seed: 1,
            ..Default::default()
        },
    )
    .unwrap();
    let sample = split.train.head(64).unwrap();
    (net, sample)
}

#[test]
fn mlp_layer_trace_matches_dense_finite_difference_hessian() {
    let (net, sample) = small_trained_mlp();
    let xs: Vec<f64> = sample.x.data().iter().map(|&v| f64::from(v)).collect();
    let hess = dense_fd_hessian(&net, 2, &xs, &sample.y);
    let exact: f64 = (0..hess.len()).map(|i| hess[i][i]).sum();
    assert!(exact > 0.0);
    let est = layer_hessian_trace(&net, &sample, 2, 2000, 11).unwrap();
    let rel = (est.mean - exact).abs() / exact;
    assert!(rel < 0.05, "estimate {} vs dense {exact} (rel {rel})", est.mean);
}

#[test]
fn quadratic_estimator_is_unbiased_over_seeds() {
    let diag = [1.0, 2.0, 3.0, -0.5, 4.0];
    let exact: f64 = diag.iter().sum();
    let off = 0.7;
    // H = diag + off·(e0e1ᵀ + e1e0ᵀ): per-probe variance is 2·Σ_{i≠j} H_ij² = 4·off².
    let grad = |p: &[f64]| -> drq_core::Result<Vec<f64>> {
        let mut g: Vec<f64> = p.iter().zip(&diag).map(|(x, d)| x * d).collect();
        g[0] += off * p[1];
        g[1] += off * p[0];
        Ok(g)
    };
    let seeds = 400;
    let probes = 10;
    let means: Vec<f64> = (0..seeds)
        .map(|s| hessian_trace(&[0.1; 5], grad, probes, s).unwrap().mean)
        .collect();
    let grand = means.iter().sum::<f64>() / seeds as f64;
    let se = (4.0 * off * off / (probes * seeds as usize) as f64).sqrt();
    assert!((grand - exact).abs() < 3.0 * se, "mean {grand} vs {exact}, 3σ = {}", 3.0 * se);
}

#[test]
fn trace_invariant_under_permutation_of_layer_weights() {
    // Permuting hidden units of the quantized layer together with the
    // matching rows/columns of its neighbours leaves the function unchanged.
    let (net, sample) = small_trained_mlp();
    let mut permuted = net.clone();
    let perm = [3usize, 0, 7, 1, 6, 2, 5, 4];
    let w2 = net.param(&ParamId::new(2, Slot::Weight)).unwrap().to_vec();
    let b2 = net.param(&ParamId::new(2, Slot::Bias)).unwrap().to_vec();
    let w4 = net.param(&ParamId::new(4, Slot::Weight)).unwrap().to_vec();
    {
        let dst = permuted.param_mut(&ParamId::new(2, Slot::Weight)).unwrap();
        for (new, &old) in perm.iter().enumerate() {
            dst[new * 8..new * 8 + 8].copy_from_slice(&w2[old * 8..old * 8 + 8]);
        }
    }
    {
        let dst = permuted.param_mut(&ParamId::new(2, Slot::Bias)).unwrap();
        for (new, &old) in perm.iter().enumerate() {
            dst[new] = b2[old];
        }
    }
    {
        let dst = permuted.param_mut(&ParamId::new(4, Slot::Weight)).unwrap();
        for c in 0..3 {
            for (new, &old) in perm.iter().enumerate() {
                dst[c * 8 + new] = w4[c * 8 + old];
            }
        }
    }
    let a = layer_hessian_trace(&net, &sample, 2, 4000, 1).unwrap();
    let b = layer_hessian_trace(&permuted, &sample, 2, 4000, 2).unwrap();
    let tol = 3.0 * (a.std_err.powi(2) + b.std_err.powi(2)).sqrt();
    assert!((a.mean - b.mean).abs() < tol, "{a:?} vs {b:?}");
}

#[test]
fn profile_is_deterministic_and_classifies() {
    let (net, sample) = small_trained_mlp();
    let p1 = profile_network(&net, &sample, 32, 4).unwrap();
    let p2 = profile_network(&net, &sample, 32, 4).unwrap();
    assert_eq!(p1, p2);
    assert_eq!(p1.len(), 1);
    assert_eq!(p1.layers[0].params, 64);
    assert_eq!(p1.classify(), vec![Sensitivity::Sensitive]);
}

