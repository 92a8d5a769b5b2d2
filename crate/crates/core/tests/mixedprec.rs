//! Roulette sampling distributions and SuperNet behaviour.

use drq_core::data::gaussian_blobs;
use drq_core::mixedprec::{evaluate_subnet, roulette_select, sample_assignment, MixedConfig, Sampling, SuperNetTrainer};
use drq_core::numerics::{mlp_specs, Network, NormKey};
use drq_core::quantizer::BitWidthSet;
use drq_core::sensitivity::{LayerSensitivity, SensitivityProfile};
use drq_core::trainer::{train_float, FloatTrainConfig, MultiPrecTrainer, TrainConfig, TrainMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn chi_square_p(counts: &[u64], probs: &[f64]) -> f64 {
    let n: u64 = counts.iter().sum();
    let stat: f64 = counts
        .iter()
        .zip(probs)
        .map(|(&c, &p)| {
            let e = p * n as f64;
            (c as f64 - e).powi(2) / e
        })
        .sum();
    1.0 - ChiSquared::new((counts.len() - 1) as f64).unwrap().cdf(stat)
}

fn draw_counts(t_l: f64, t_m: f64, seed: u64) -> Vec<u64> {
    let bits = [2u8, 4, 6, 8];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = [0u64; 4];
    for _ in 0..100_000 {
        let r = 1.0 - rng.gen::<f64>();
        let b = roulette_select(&bits, t_l, t_m, r).unwrap();
        counts[bits.iter().position(|&x| x == b).unwrap()] += 1;
    }
    counts.to_vec()
}

#[test]
fn insensitive_branch_is_uniform() {
    let counts = draw_counts(0.5, 1.0, 1);
    for &c in &counts {
        assert!((c as f64 / 1e5 - 0.25).abs() < 0.01, "{counts:?}");
    }
    assert!(chi_square_p(&counts, &[0.25; 4]) > 0.01);
}

#[test]
fn sensitive_branch_is_proportional_to_bits() {
    let counts = draw_counts(1.0, 1.0, 2);
    let expect = [0.1, 0.2, 0.3, 0.4];
    for (c, e) in counts.iter().zip(expect) {
        assert!((*c as f64 / 1e5 - e).abs() < 0.01, "{counts:?}");
    }
    assert!(chi_square_p(&counts, &expect) > 0.01);
}

#[test]
fn sigma_one_insensitive_marginal_is_uniform() {
    let set = BitWidthSet::new(vec![8, 6, 4, 2]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut counts = [0u64; 4];
    for _ in 0..25_000 {
        for b in sample_assignment(&mut rng, &set, &[0.0; 4], 1.0, 1.0, 8).unwrap() {
            counts[set.bits().iter().position(|&x| x == b).unwrap()] += 1;
        }
    }
    assert!(chi_square_p(&counts, &[0.25; 4]) > 0.01, "{counts:?}");
}

fn tiny_setup() -> (Network, SensitivityProfile, drq_core::data::Split, BitWidthSet) {
    let split = gaussian_blobs(3, 6, 600, 1.0, 0.6, 4).unwrap();
    let mut net = Network::new(&[6], &mlp_specs(6, &[16, 16, 16], 3), 2).unwrap();
    train_float(&mut net, &split.train, &FloatTrainConfig { epochs: 5, seed: 1, ..Default::default() }).unwrap();
    let set = BitWidthSet::new(vec![8, 4, 2]).unwrap();
    let calib = split.train.head(128).unwrap().x;
    let mut cfg = TrainConfig::desk(set.clone(), TrainMode::Alrs);
    cfg.epochs = 3;
    let mut mp = MultiPrecTrainer::new(&net, &calib, cfg).unwrap();
    mp.fit(&split).unwrap();
    let q = mp.network().quantized_layers();
    let layers = q
        .iter()
        .enumerate()
        .map(|(i, &li)| LayerSensitivity {
            name: format!("layer{li}"),
            layer: li,
            trace: 1.0 + i as f64,
            params: 256,
        })
        .collect();
    (mp.into_network(), SensitivityProfile::new(layers, 8, 0).unwrap(), split, set)
}

#[test]
fn supernet_training_is_reproducible_and_uses_transitional_stats() {
    let (net, profile, split, set) = tiny_setup();
    let mut cfg = MixedConfig::desk(set.clone(), Sampling::Hessian);
    cfg.epochs = 2;
    cfg.sigma_max = 1.0;
    let mut a = SuperNetTrainer::new(net.clone(), &profile, cfg.clone()).unwrap();
    let log_a = a.fit(&split).unwrap();
    let mut b = SuperNetTrainer::new(net, &profile, cfg).unwrap();
    let log_b = b.fit(&split).unwrap();
    assert_eq!(log_a, log_b);
    assert_eq!(a.network().norm_keys().len(), 9);
    assert!(a.network().norm_keys().contains(&NormKey::new(2, 8)));
    assert!(!log_a.bit_histogram.is_empty());

    let bits = vec![8, 2];
    let acc1 = evaluate_subnet(a.network(), &set, &bits, &split.eval).unwrap();
    let acc2 = evaluate_subnet(a.network(), &set, &bits, &split.eval).unwrap();
    assert_eq!(acc1, acc2);
    assert!(evaluate_subnet(a.network(), &set, &[8, 6], &split.eval).is_err());
    assert!(evaluate_subnet(a.network(), &set, &[8], &split.eval).is_err());
    let hi = evaluate_subnet(a.network(), &set, &[8, 8], &split.eval).unwrap();
    let lo = evaluate_subnet(a.network(), &set, &[2, 2], &split.eval).unwrap();
    assert!(hi >= lo, "8-bit {hi} vs 2-bit {lo}");
}

#[test]
fn uniform_sampling_ignores_sensitivity() {
    let (net, profile, _, set) = tiny_setup();
    let cfg = MixedConfig::desk(set, Sampling::Uniform);
    assert!(SuperNetTrainer::new(net, &profile, cfg).is_ok());
}
