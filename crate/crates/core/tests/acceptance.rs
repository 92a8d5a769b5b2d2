//! Acceptance suite. Each test checks one criterion and prints a single
//! PASS/FAIL line to stdout regardless of test-harness output capture.

mod common;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use common::{reference_loss, RefParams};
use drq_core::checkpoint::{decode, encode};
use drq_core::config::RunConfig;
use drq_core::data::{gaussian_blobs, Dataset, Split};
use drq_core::mixedprec::{evaluate_subnet, roulette_select, MixedConfig, Sampling, SuperNetTrainer};
use drq_core::numerics::{mlp_specs, LayerSpec, Network, ParamId, Slot};
use drq_core::pipeline;
use drq_core::quantizer::{
    double_round_low, double_round_low_float, fake_quant_weight_shared, quantize_weight_high, signed_range,
    ste_scale_grad, ste_zeropoint_grad, BitWidthSet, QuantizedTensor,
};
use drq_core::search::{enumerate_solutions, pareto_front, solve, SearchProblem, Sense, SubNetAssignment};
use drq_core::sensitivity::{hessian_trace, layer_hessian_trace, profile_network};
use drq_core::tensor::DenseTensor;
use drq_core::trainer::{eta, train_float, FloatTrainConfig, MultiPrecTrainer, TrainConfig, TrainMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn report(n: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    writeln!(out, "acceptance criterion {n:>2} [{name}]: {verdict} ({detail})").unwrap();
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn set8642() -> BitWidthSet {
    BitWidthSet::new(vec![8, 6, 4, 2]).unwrap()
}

fn codes_from_dequant(deq: &[f32], step: f32) -> Vec<i32> {
    deq.iter().map(|&d| (d / step).round() as i32).collect()
}

#[test]
fn criterion_01_lossless_containment() {
    let start = Instant::now();
    let set = set8642();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut mismatches = 0usize;
    let mut tensors = 0usize;
    for trial in 0..1000u64 {
        let mut net = Network::new(&[6], &mlp_specs(6, &[8, 12, 8], 3), trial).unwrap();
        let q = net.quantized_layers();
        let spread: f32 = 10f32.powf(rng.gen_range(-2.0..0.5));
        for &li in &q {
            for w in net.param_mut(&ParamId::new(li, Slot::Weight)).unwrap() {
                *w = spread * rng.sample::<f32, _>(StandardNormal);
            }
        }
        let calib: Vec<f32> = (0..32 * 6).map(|_| rng.sample(StandardNormal)).collect();
        net.init_quantization(&set, &DenseTensor::new(vec![32, 6], calib).unwrap(), true).unwrap();
        let back = decode(&encode(&net).unwrap()).unwrap();
        for &li in &q {
            tensors += 1;
            let (orig, rest) = (net.linear(li).unwrap(), back.linear(li).unwrap());
            let qp = orig.quant.as_ref().unwrap();
            let rq = rest.quant.as_ref().unwrap();
            let stored = quantize_weight_high(&rest.weight, rq).unwrap();
            for l in [8u8, 6, 4, 2] {
                let train = fake_quant_weight_shared(orig.weight.data(), qp.s_h, qp.h, l).unwrap();
                let reload = fake_quant_weight_shared(rest.weight.data(), rq.s_h, rq.h, l).unwrap();
                let step = qp.s_h * f32::from(1u16 << (8 - l));
                let from_file = double_round_low(&stored, l).unwrap().values;
                let same = codes_from_dequant(&train.dequant, step) == from_file
                    && train.dequant.iter().map(|v| v.to_bits()).eq(reload.dequant.iter().map(|v| v.to_bits()));
                if !same {
                    mismatches += 1;
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = mismatches == 0;
    report(1, "lossless containment", pass, &format!("{tensors} tensors x 4 precisions, {mismatches} mismatches, {secs:.2}s"));
    assert!(pass);
}

#[test]
fn criterion_02_double_rounding_integer_path() {
    let start = Instant::now();
    let all: Vec<i32> = (-128..=127).collect();
    let wh = QuantizedTensor::new(vec![256], all.clone(), 8, true).unwrap();
    let mut mismatches = 0usize;
    for l in 2u8..=8 {
        let shift = double_round_low(&wh, l).unwrap().values;
        let float = double_round_low_float(&wh, l).unwrap().values;
        let (lo, hi) = signed_range(l);
        for (i, &x) in all.iter().enumerate() {
            let q = f64::from(x) / f64::from(1u32 << (8 - l));
            let oracle = (q.signum() * (q.abs() + 0.5).floor()) as i32;
            let oracle = oracle.clamp(lo, hi);
            if shift[i] != float[i] || shift[i] != oracle {
                mismatches += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = mismatches == 0 && secs < 1.0;
    report(2, "double-rounding integer path", pass, &format!("256 x 7 inputs, {mismatches} mismatches, {secs:.3}s"));
    assert!(pass);
}

#[test]
fn criterion_03_ste_closed_forms() {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst = 0.0f64;
    let (mut inside, mut below, mut above) = (0usize, 0usize, 0usize);
    for _ in 0..100_000 {
        let bits: u8 = rng.gen_range(2..=8);
        let signed = rng.gen_bool(0.5);
        let (n, p) = if signed { (-(1i32 << (bits - 1)), (1i32 << (bits - 1)) - 1) } else { (0, (1i32 << bits) - 1) };
        let s: f32 = 10f32.powf(rng.gen_range(-3.0..0.0));
        let z: f32 = rng.gen_range(-1.0..1.0);
        let span = (p - n) as f32;
        let v_target: f32 = rng.gen_range(n as f32 - 0.5 * span..p as f32 + 0.5 * span);
        let y = v_target * s + z;
        let g: f32 = rng.gen_range(-2.0..2.0);
        let v = (y - z) / s;
        let vf = f64::from(v);
        let (nf, pf) = (f64::from(n), f64::from(p));
        let scale_formula = if vf <= nf {
            below += 1;
            nf
        } else if vf >= pf {
            above += 1;
            pf
        } else {
            inside += 1;
            vf.signum() * (vf.abs() + 0.5).floor() - vf
        };
        let zero_formula = if nf < vf && vf < pf { 0.0 } else { 1.0 };
        let (es, ez) = (f64::from(g) * scale_formula, f64::from(g) * zero_formula);
        let ds = (f64::from(ste_scale_grad(&[y], s, z, n, p, &[g])) - es).abs() / es.abs().max(1.0);
        let dz = (f64::from(ste_zeropoint_grad(&[y], s, z, n, p, &[g])) - ez).abs() / ez.abs().max(1.0);
        worst = worst.max(ds).max(dz);
    }
    let pass = worst <= 1e-6 && below > 0 && above > 0 && inside > 0;
    report(3, "STE gradient closed forms", pass, &format!("1e5 scalars ({inside} inside, {below} at n, {above} at p), max error {worst:.2e}"));
    assert!(pass);
}

#[test]
fn criterion_04_eta_table() {
    let cases = [(8u8, 8u8, 1.0), (8, 6, 0.1), (8, 4, 0.01), (8, 2, 1e-3), (4, 3, 0.5)];
    let mut detail = Vec::new();
    let mut pass = true;
    for (h, b, expect) in cases {
        let got = eta(h, b);
        let ok = got == expect || (got - expect).abs() <= 1e-15 * expect;
        pass &= ok;
        detail.push(format!("eta(h={h},b={b})={got}"));
    }
    report(4, "eta table", pass, &detail.join(", "));
    assert!(pass);
}

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

#[test]
fn criterion_05_roulette_distribution() {
    let start = Instant::now();
    let bits = [2u8, 4, 6, 8];
    let mut pass = true;
    let mut detail = Vec::new();
    for (label, t_l, expect, seed) in [
        ("insensitive", 0.5, [0.25, 0.25, 0.25, 0.25], 51u64),
        ("sensitive", 2.0, [0.1, 0.2, 0.3, 0.4], 52),
    ] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut counts = [0u64; 4];
        for _ in 0..100_000 {
            let r = 1.0 - rng.gen::<f64>();
            let b = roulette_select(&bits, t_l, 1.0, r).unwrap();
            counts[bits.iter().position(|&x| x == b).unwrap()] += 1;
        }
        let max_dev = counts.iter().zip(expect).map(|(&c, e)| (c as f64 / 1e5 - e).abs()).fold(0.0, f64::max);
        let p = chi_square_p(&counts, &expect);
        pass &= max_dev <= 0.01 && p > 0.01;
        detail.push(format!("{label}: max dev {max_dev:.4}, chi-square p {p:.3}"));
    }
    let secs = start.elapsed().as_secs_f64();
    pass &= secs < 1.0;
    report(5, "roulette distribution", pass, &format!("{}; {secs:.3}s", detail.join("; ")));
    assert!(pass);
}

fn brute_force(bits: &[u8], weights: &[f64], target: u32, maximize: bool) -> Option<f64> {
    let l = weights.len();
    let mut best: Option<f64> = None;
    let mut idx = vec![0usize; l];
    loop {
        let sum: u32 = idx.iter().map(|&i| u32::from(bits[i])).sum();
        if sum == target {
            let obj: f64 = idx.iter().zip(weights).map(|(&i, w)| w * f64::from(bits[i])).sum();
            best = Some(match best {
                None => obj,
                Some(b) if maximize => b.max(obj),
                Some(b) => b.min(obj),
            });
        }
        let mut k = 0;
        loop {
            if k == l {
                return best;
            }
            idx[k] += 1;
            if idx[k] < bits.len() {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

#[test]
fn criterion_06_search_exactness() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut worst = 0.0f64;
    let mut violations = 0usize;
    for _ in 0..200 {
        let mut pool: Vec<u8> = (2..=8).collect();
        let k = rng.gen_range(1..=4);
        let mut bits = Vec::new();
        for _ in 0..k {
            bits.push(pool.remove(rng.gen_range(0..pool.len())));
        }
        let set = BitWidthSet::from_unordered(bits).unwrap();
        let l = rng.gen_range(1..=12);
        let weights: Vec<f64> = (0..l).map(|_| rng.gen_range(0.0..10.0)).collect();
        let assignment: Vec<u8> = (0..l).map(|_| set.bits()[rng.gen_range(0..set.len())]).collect();
        let target: u32 = assignment.iter().map(|&b| u32::from(b)).sum();
        let omega = f64::from(target) / l as f64;
        let maximize = rng.gen_bool(0.5);
        let sense = if maximize { Sense::Maximize } else { Sense::Minimize };
        let problem = SearchProblem::new(set.clone(), weights.clone(), omega, sense).unwrap();
        let got = solve(&problem).unwrap();
        let best = brute_force(set.bits(), &weights, target, maximize).unwrap();
        worst = worst.max((got.objective - best).abs() / best.abs().max(1.0));
        for s in std::iter::once(got).chain(enumerate_solutions(&problem).unwrap()) {
            if s.bit_sum() != target {
                violations += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst <= 1e-9 && violations == 0 && secs < 10.0;
    report(6, "search exactness", pass, &format!("200 problems, max relative gap {worst:.1e}, {violations} constraint violations, {secs:.2}s"));
    assert!(pass);
}

#[test]
fn criterion_07_hessian_trace_oracle() {
    let start = Instant::now();
    let quad = hessian_trace(
        &[0.2, -0.4, 1.0],
        |p: &[f64]| Ok(vec![p[0], 2.0 * p[1], 3.0 * p[2]]),
        1000,
        707,
    )
    .unwrap();
    let quad_rel = (quad.mean - 6.0).abs() / 6.0;

    let split = gaussian_blobs(3, 4, 300, 1.0, 1.0, 5).unwrap();
    let specs = [
        LayerSpec::dense(4, 8, false),
        LayerSpec::relu(8),
        LayerSpec::dense(8, 8, true),
        LayerSpec::relu(8),
        LayerSpec::dense(8, 3, false),
    ];
    let mut net = Network::new(&[4], &specs, 3).unwrap();
    let params = net.param_count();
    train_float(&mut net, &split.train, &FloatTrainConfig { epochs: 10, seed: 1, ..Default::default() }).unwrap();
    let sample = split.train.head(64).unwrap();
    let xs: Vec<f64> = sample.x.data().iter().map(|&v| f64::from(v)).collect();
    let base = RefParams::from(&net);
    let k = base.ids.iter().position(|id| *id == ParamId::new(2, Slot::Weight)).unwrap();
    let h = 1e-4;
    let loss = |i: usize, di: f64, j: usize, dj: f64| {
        let mut p = base.clone();
        p.values[k][i] += di;
        p.values[k][j] += dj;
        reference_loss(net.specs(), net.input_shape(), &p, &xs, &sample.y)
    };
    let dense_trace: f64 = (0..base.values[k].len())
        .map(|i| (loss(i, h, i, h) - 2.0 * loss(i, h, i, -h) + loss(i, -h, i, -h)) / (4.0 * h * h))
        .sum();
    let est = layer_hessian_trace(&net, &sample, 2, 1000, 77).unwrap();
    let mlp_rel = (est.mean - dense_trace).abs() / dense_trace;
    let secs = start.elapsed().as_secs_f64();
    let pass = quad_rel < 0.05 && mlp_rel < 0.05 && params <= 200 && secs < 60.0;
    report(
        7,
        "Hessian-trace oracle",
        pass,
        &format!(
            "quadratic {:.3} vs 6 (rel {quad_rel:.3}); {params}-param MLP {:.4} vs dense {dense_trace:.4} (rel {mlp_rel:.3}); {secs:.1}s",
            quad.mean, est.mean
        ),
    );
    assert!(pass);
}

fn blobs_setup(seed: u64, hidden: &[usize]) -> (Split, Network, DenseTensor) {
    let split = gaussian_blobs(4, 16, 4000, 1.0, 2.0, seed).unwrap();
    let mut net = Network::new(&[16], &mlp_specs(16, hidden, 4), seed).unwrap();
    train_float(&mut net, &split.train, &FloatTrainConfig { seed, ..Default::default() }).unwrap();
    let calib = split.train.head(256).unwrap().x;
    (split, net, calib)
}

fn joint_accuracies(net: &Network, calib: &DenseTensor, split: &Split, set: &BitWidthSet, mode: TrainMode, seed: u64) -> Vec<f32> {
    let mut cfg = TrainConfig::desk(set.clone(), mode);
    cfg.seed = seed;
    let mut t = MultiPrecTrainer::new(net, calib, cfg).unwrap();
    t.fit(split).unwrap();
    set.iter().map(|b| t.evaluate(b, &split.eval).unwrap()).collect()
}

fn spread(v: &[f32]) -> f64 {
    let max = v.iter().copied().fold(f32::MIN, f32::max);
    let min = v.iter().copied().fold(f32::MAX, f32::min);
    f64::from(max - min)
}

#[test]
fn criterion_08_multiprecision_desk_analog() {
    let start = Instant::now();
    let set = set8642();
    let mut gaps: BTreeMap<(&str, u8), Vec<f64>> = BTreeMap::new();
    let mut spread_diff = Vec::new();
    let mut lines = Vec::new();
    for seed in 0..3u64 {
        let (split, net, calib) = blobs_setup(seed, &[64, 64, 64]);
        let conv = joint_accuracies(&net, &calib, &split, &set, TrainMode::Conventional, seed);
        let alrs = joint_accuracies(&net, &calib, &split, &set, TrainMode::Alrs, seed);
        for (i, b) in set.iter().enumerate() {
            if b == 2 {
                continue;
            }
            let single = BitWidthSet::new(vec![b]).unwrap();
            let sep = joint_accuracies(&net, &calib, &split, &single, TrainMode::Conventional, seed)[0];
            gaps.entry(("conventional", b)).or_default().push(f64::from((conv[i] - sep).abs()));
            gaps.entry(("alrs", b)).or_default().push(f64::from((alrs[i] - sep).abs()));
        }
        spread_diff.push(spread(&alrs) - spread(&conv));
        lines.push(format!("seed {seed}: spread conv {:.4} alrs {:.4}", spread(&conv), spread(&alrs)));
    }
    let worst_gap = gaps.values().map(|v| median(v.clone())).fold(0.0, f64::max);
    let spread_med = median(spread_diff);
    let secs = start.elapsed().as_secs_f64();
    let pass = worst_gap <= 0.02 && spread_med <= 0.0 && secs < 600.0;
    report(
        8,
        "multi-precision desk analog",
        pass,
        &format!(
            "largest median |joint - separate| over 8/6/4-bit {worst_gap:.4}; median spread(alrs) - spread(conv) {spread_med:+.4}; {}; {secs:.0}s",
            lines.join("; ")
        ),
    );
    assert!(pass);
}

fn frontier_at(front: &[SubNetAssignment], omega: f64) -> f64 {
    front
        .iter()
        .filter(|s| s.avg_bits <= omega + 1e-9)
        .map(|s| f64::from(s.accuracy.unwrap()))
        .fold(0.0, f64::max)
}

fn supernet_frontier(
    init: &Network,
    profile: &drq_core::sensitivity::SensitivityProfile,
    split: &Split,
    set: &BitWidthSet,
    sampling: Sampling,
    omegas: &[f64],
    seed: u64,
) -> Vec<SubNetAssignment> {
    let mut cfg = MixedConfig::desk(set.clone(), sampling);
    cfg.seed = seed;
    let mut t = SuperNetTrainer::new(init.clone(), profile, cfg).unwrap();
    t.fit(split).unwrap();
    let net = t.into_network();
    let mut all = Vec::new();
    for &omega in omegas {
        let problem = SearchProblem::from_profile(set.clone(), profile, omega, Sense::Maximize).unwrap();
        for mut s in enumerate_solutions(&problem).unwrap() {
            s.accuracy = Some(evaluate_subnet(&net, set, &s.bits, &split.eval).unwrap());
            all.push(s);
        }
    }
    pareto_front(&all).unwrap()
}

#[test]
fn criterion_09_hessian_sampling_desk_analog() {
    let start = Instant::now();
    let set = set8642();
    let omegas = [3.0, 4.0, 5.0];
    let mut diffs: Vec<Vec<f64>> = vec![Vec::new(); omegas.len()];
    for seed in 0..3u64 {
        let (split, net, calib) = blobs_setup(seed, &[64, 64, 64, 64, 64]);
        let sample: Dataset = split.train.head(1000).unwrap();
        let profile = profile_network(&net, &sample, 128, seed).unwrap();
        let mut init = net.clone();
        init.init_quantization(&set, &calib, true).unwrap();
        let hasb = supernet_frontier(&init, &profile, &split, &set, Sampling::Hessian, &omegas, seed);
        let uniform = supernet_frontier(&init, &profile, &split, &set, Sampling::Uniform, &omegas, seed);
        for (i, &w) in omegas.iter().enumerate() {
            diffs[i].push(frontier_at(&hasb, w) - frontier_at(&uniform, w));
        }
    }
    let medians: Vec<f64> = diffs.into_iter().map(median).collect();
    let wins = medians.iter().filter(|&&d| d >= 0.0).count();
    let secs = start.elapsed().as_secs_f64();
    let pass = wins >= 2 && secs < 1200.0;
    let detail: Vec<String> = omegas.iter().zip(&medians).map(|(w, d)| format!("omega {w}: {d:+.4}")).collect();
    report(
        9,
        "Hessian-aware sampling desk analog",
        pass,
        &format!("median frontier accuracy HASB - uniform: {}; dominated at {wins}/3; {secs:.0}s", detail.join(", ")),
    );
    assert!(pass);
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for seed_dir in std::fs::read_dir(dir).unwrap() {
        let seed_dir = seed_dir.unwrap().path();
        for f in std::fs::read_dir(&seed_dir).unwrap() {
            let f = f.unwrap().path();
            let name = format!("{}/{}", seed_dir.file_name().unwrap().to_string_lossy(), f.file_name().unwrap().to_string_lossy());
            out.insert(name, std::fs::read(&f).unwrap());
        }
    }
    out
}

fn pipeline_config(dir: &Path, experiment: &str) -> RunConfig {
    RunConfig::from_json(&format!(
        r#"{{
            "experiment": "{experiment}",
            "dataset": {{"kind": "gaussian-blobs", "classes": 4, "dims": 8, "samples": 600, "separation": 1.0, "noise": 1.0, "seed": 10}},
            "model": {{"kind": "mlp", "hidden": [16, 16, 16]}},
            "bit_set": [8, 6, 4, 2],
            "seeds": [0, 1],
            "output_dir": {dir:?},
            "pretrain": {{"epochs": 4}},
            "multiprec": {{"epochs": 3}},
            "mixed": {{"epochs": 3}},
            "sensitivity": {{"probes": 16, "samples": 128}}
        }}"#
    ))
    .unwrap()
}

#[test]
fn criterion_10_determinism_and_format() {
    let tmp = tempfile::tempdir().unwrap();
    let mut identical = true;
    let mut files = 0usize;
    for experiment in ["multiprec", "eval"] {
        let a = tmp.path().join(format!("{experiment}-a"));
        let b = tmp.path().join(format!("{experiment}-b"));
        pipeline::run(&pipeline_config(&a, experiment)).unwrap();
        pipeline::run(&pipeline_config(&b, experiment)).unwrap();
        let (sa, sb) = (snapshot(&a), snapshot(&b));
        identical &= sa.keys().eq(sb.keys());
        for (name, bytes) in &sa {
            if name.ends_with("config.json") {
                continue;
            }
            files += 1;
            identical &= sb.get(name) == Some(bytes);
        }
    }

    let mut round_trip = true;
    let mut sizes = Vec::new();
    let net = Network::new(&[16], &mlp_specs(16, &[64, 1024, 1024, 64], 4), 9).unwrap();
    let calib = DenseTensor::new(vec![64, 16], (0..64 * 16).map(|i| ((i * 37 % 101) as f32 / 50.0) - 1.0).collect()).unwrap();
    for shared in [true, false] {
        let mut cfg = TrainConfig::desk(set8642(), TrainMode::Alrs);
        cfg.shared_weight_scale = shared;
        let model = MultiPrecTrainer::new(&net, &calib, cfg).unwrap().into_network();
        let bytes = encode(&model).unwrap();
        let back = decode(&bytes).unwrap();
        round_trip &= encode(&back).unwrap() == bytes;
        if !shared {
            round_trip &= back.layers() == model.layers();
        }
        sizes.push(bytes.len());
    }
    let ratio = sizes[0] as f64 / sizes[1] as f64;
    let pass = identical && round_trip && ratio <= 0.30;
    report(
        10,
        "determinism and format",
        pass,
        &format!(
            "{files} output files byte-identical: {identical}; round trip exact: {round_trip}; shared {} B vs unshared {} B = {:.1}%",
            sizes[0],
            sizes[1],
            100.0 * ratio
        ),
    );
    assert!(pass);
}
