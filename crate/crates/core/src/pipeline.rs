//! End-to-end experiment stages. Every stage reads its inputs from files and
//! writes its outputs into the seed's output directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, store_checkpoint};
use crate::config::{RunConfig, CALIBRATION_SAMPLES};
use crate::data::{self, Split};
use crate::error::{Error, Result};
use crate::mixedprec::{evaluate_subnet, SuperNetTrainer};
use crate::numerics::Network;
use crate::report::{read_json, write_json, write_pareto, write_run_log, ParetoRecord};
use crate::search::{achievable_omegas, enumerate_solutions, pareto_front, SearchProblem, SubNetAssignment};
use crate::sensitivity::{profile_network, SensitivityProfile};
use crate::trainer::{evaluate_float, evaluate_network, train_float, MultiPrecTrainer};

pub const FLOAT_CHECKPOINT: &str = "float.drq";
pub const MODEL_CHECKPOINT: &str = "model.drq";
pub const SUPERNET_CHECKPOINT: &str = "supernet.drq";
pub const PROFILE_FILE: &str = "profile.json";
pub const SOLUTIONS_FILE: &str = "solutions.json";
pub const PARETO_FILE: &str = "pareto.csv";
pub const EVAL_FILE: &str = "eval.json";
pub const CONFIG_ECHO_FILE: &str = "config.json";

/// Search results for one target average bit-width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OmegaSolutions {
    pub omega: f64,
    pub solutions: Vec<SubNetAssignment>,
}

/// Accuracies of a checkpoint at uniform precisions and on searched subnets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// File name of the evaluated checkpoint.
    pub checkpoint: String,
    /// Full-precision accuracy, present for checkpoints without quantizers.
    pub float_accuracy: Option<f32>,
    /// Accuracy per uniform bit-width.
    pub uniform: BTreeMap<u8, f32>,
    pub subnets: Vec<SubNetAssignment>,
}

/// Deterministic train/eval split described by the config.
pub fn load_data(cfg: &RunConfig) -> Result<Split> {
    data::load(&cfg.dataset)
}

/// Freshly initialized network for `seed`.
pub fn build_network(cfg: &RunConfig, split: &Split, seed: u64) -> Result<Network> {
    let input = split.train.sample_shape().to_vec();
    let specs = cfg.model.layers(&input, split.train.classes)?;
    Network::new(&input, &specs, seed)
}

fn prepare_dir(cfg: &RunConfig, seed: u64) -> Result<PathBuf> {
    let dir = cfg.seed_dir(seed);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_json(&dir.join(CONFIG_ECHO_FILE), cfg)?;
    Ok(dir)
}

/// Trains the full-precision starting point and stores `float.drq`.
pub fn pretrain(cfg: &RunConfig, split: &Split, seed: u64) -> Result<Network> {
    let dir = prepare_dir(cfg, seed)?;
    let mut net = build_network(cfg, split, seed)?;
    let losses = train_float(&mut net, &split.train, &cfg.float_config(seed))?;
    if let Some(l) = losses.last().filter(|l| !l.is_finite()) {
        return Err(Error::Numerical(format!("full-precision training diverged (loss {l})")));
    }
    info!("seed {seed}: float accuracy {:.4}", evaluate_float(&net, &split.eval)?);
    store_checkpoint(&net, &dir.join(FLOAT_CHECKPOINT))?;
    Ok(net)
}

/// Joint multi-precision training from `pretrained`; stores `model.drq`,
/// `metrics.csv` and `scale_grads.csv`.
pub fn train_multiprec(cfg: &RunConfig, split: &Split, pretrained: &Network, seed: u64) -> Result<Network> {
    let dir = prepare_dir(cfg, seed)?;
    let calib = split.train.head(CALIBRATION_SAMPLES)?;
    let mut trainer = MultiPrecTrainer::new(pretrained, &calib.x, cfg.train_config(seed))?;
    let log = trainer.fit(split)?;
    if trainer.floor_hits() > 0 {
        info!("seed {seed}: scale learning rate floored on {} passes", trainer.floor_hits());
    }
    write_run_log(&dir, &log)?;
    let net = trainer.into_network();
    store_checkpoint(&net, &dir.join(MODEL_CHECKPOINT))?;
    Ok(net)
}

/// Hessian-trace profile of `net` on the head of the training split; stores
/// `profile.json`.
pub fn profile(cfg: &RunConfig, split: &Split, net: &Network, seed: u64) -> Result<SensitivityProfile> {
    let dir = prepare_dir(cfg, seed)?;
    let data = split.train.head(cfg.sensitivity.samples)?;
    let profile = profile_network(net, &data, cfg.sensitivity.probes, seed)?;
    write_json(&dir.join(PROFILE_FILE), &profile)?;
    Ok(profile)
}

/// SuperNet training from `init`, which must carry quantizers for every bit
/// in the set; stores `supernet.drq`, `metrics.csv` and `bit_histogram.csv`.
pub fn train_mixed(cfg: &RunConfig, split: &Split, init: Network, profile: &SensitivityProfile, seed: u64) -> Result<Network> {
    let dir = prepare_dir(cfg, seed)?;
    let mut trainer = SuperNetTrainer::new(init, profile, cfg.mixed_config(seed))?;
    let log = trainer.fit(split)?;
    write_run_log(&dir, &log)?;
    let net = trainer.into_network();
    store_checkpoint(&net, &dir.join(SUPERNET_CHECKPOINT))?;
    Ok(net)
}

/// Attaches calibrated quantizers to a full-precision network.
pub fn quantize(cfg: &RunConfig, split: &Split, float: &Network) -> Result<Network> {
    let calib = split.train.head(CALIBRATION_SAMPLES)?;
    let mut net = float.clone();
    net.init_quantization(&cfg.bit_set, &calib.x, cfg.multiprec.shared_weight_scale)?;
    Ok(net)
}

/// Target average bit-widths: the configured ones, or every achievable value.
pub fn search_omegas(cfg: &RunConfig, layers: usize) -> Vec<f64> {
    if cfg.search.omegas.is_empty() {
        achievable_omegas(&cfg.bit_set, layers)
    } else {
        cfg.search.omegas.clone()
    }
}

/// Runs the pinning search for every target; when `net` is given each
/// solution is evaluated on the eval split and `pareto.csv` is written.
pub fn search(
    cfg: &RunConfig,
    split: &Split,
    profile: &SensitivityProfile,
    net: Option<&Network>,
    seed: u64,
) -> Result<Vec<OmegaSolutions>> {
    let dir = prepare_dir(cfg, seed)?;
    let mut out = Vec::new();
    for omega in search_omegas(cfg, profile.len()) {
        let problem = SearchProblem::from_profile(cfg.bit_set.clone(), profile, omega, cfg.search.sense)?;
        let mut solutions = enumerate_solutions(&problem)?;
        if let Some(net) = net {
            for s in &mut solutions {
                s.accuracy = Some(evaluate_subnet(net, &cfg.bit_set, &s.bits, &split.eval)?);
            }
        }
        out.push(OmegaSolutions { omega, solutions });
    }
    write_json(&dir.join(SOLUTIONS_FILE), &out)?;
    if net.is_some() {
        let all: Vec<SubNetAssignment> = out.iter().flat_map(|o| o.solutions.iter().cloned()).collect();
        write_pareto(&dir.join(PARETO_FILE), &pareto_records(&pareto_front(&all)?))?;
    }
    Ok(out)
}

pub fn pareto_records(front: &[SubNetAssignment]) -> Vec<ParetoRecord> {
    front
        .iter()
        .map(|s| ParetoRecord {
            avg_bits: s.avg_bits,
            accuracy: s.accuracy.unwrap_or(f32::NAN),
            objective: s.objective,
            bits: s.bits_label(),
        })
        .collect()
}

/// Evaluates the checkpoint at `path` at every uniform precision and on the
/// given subnets; stores `eval.json`.
pub fn evaluate(cfg: &RunConfig, split: &Split, path: &Path, subnets: &[SubNetAssignment], seed: u64) -> Result<EvalReport> {
    let dir = prepare_dir(cfg, seed)?;
    let net = load_checkpoint(path)?;
    let mut report = EvalReport {
        checkpoint: path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
        float_accuracy: None,
        uniform: BTreeMap::new(),
        subnets: Vec::new(),
    };
    if net.quantized_layers().iter().all(|&li| net.linear(li).is_some_and(|l| l.quant.is_none())) {
        report.float_accuracy = Some(evaluate_float(&net, &split.eval)?);
    } else {
        for b in cfg.bit_set.iter() {
            report.uniform.insert(b, evaluate_network(&net, &cfg.bit_set, b, &split.eval)?);
        }
        for s in subnets {
            let mut s = s.clone();
            s.accuracy = Some(evaluate_subnet(&net, &cfg.bit_set, &s.bits, &split.eval)?);
            report.subnets.push(s);
        }
    }
    write_json(&dir.join(EVAL_FILE), &report)?;
    Ok(report)
}

/// Reads `solutions.json` and flattens it.
pub fn read_solutions(path: &Path) -> Result<Vec<SubNetAssignment>> {
    let all: Vec<OmegaSolutions> = read_json(path)?;
    Ok(all.into_iter().flat_map(|o| o.solutions).collect())
}

pub fn read_profile(path: &Path) -> Result<SensitivityProfile> {
    let p: SensitivityProfile = read_json(path)?;
    p.validate()?;
    Ok(p)
}

/// Runs the configured experiment for every seed, producing all files of
/// the stages it depends on.
pub fn run(cfg: &RunConfig) -> Result<()> {
    use crate::config::Experiment;
    cfg.validate()?;
    let split = load_data(cfg)?;
    for &seed in &cfg.seeds {
        info!("seed {seed}: {:?}", cfg.experiment);
        let dir = cfg.seed_dir(seed);
        let float = pretrain(cfg, &split, seed)?;
        match cfg.experiment {
            Experiment::Multiprec => {
                train_multiprec(cfg, &split, &float, seed)?;
                evaluate(cfg, &split, &dir.join(MODEL_CHECKPOINT), &[], seed)?;
            }
            Experiment::Sensitivity => {
                profile(cfg, &split, &float, seed)?;
            }
            Experiment::Mixedprec | Experiment::Search | Experiment::Eval => {
                let prof = profile(cfg, &split, &float, seed)?;
                let init = quantize(cfg, &split, &float)?;
                let supernet = train_mixed(cfg, &split, init, &prof, seed)?;
                if cfg.experiment != Experiment::Mixedprec {
                    search(cfg, &split, &prof, Some(&supernet), seed)?;
                }
                if cfg.experiment == Experiment::Eval {
                    let subnets = read_solutions(&dir.join(SOLUTIONS_FILE))?;
                    evaluate(cfg, &split, &dir.join(SUPERNET_CHECKPOINT), &subnets, seed)?;
                }
            }
        }
    }
    Ok(())
}
