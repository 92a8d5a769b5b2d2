use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use drq_core::checkpoint::{decode, load_checkpoint};
use drq_core::config::RunConfig;
use drq_core::data::Split;
use drq_core::mixedprec::Sampling;
use drq_core::numerics::{Layer, Network};
use drq_core::pipeline;
use drq_core::search::Sense;
use drq_core::trainer::TrainMode;
use drq_core::Error;
use log::info;

/// Multi-precision and mixed-precision quantization-aware training.
#[derive(Debug, Parser)]
#[command(name = "drq", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Pretrain in full precision, then train every precision jointly.
    TrainMp {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Keep one weight scale per precision instead of a shared one.
        #[arg(long)]
        unshared: bool,
    },
    /// Train a mixed-precision SuperNet.
    TrainMixed {
        #[command(flatten)]
        run: RunArgs,
        /// Sensitivity profile; computed from the initial network if absent.
        #[arg(long)]
        profile: Option<PathBuf>,
        /// Starting checkpoint; a full-precision one is quantized first.
        /// Without it a fresh network is pretrained.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long, value_enum)]
        sampling: Option<SamplingArg>,
        #[arg(long)]
        sigma_max: Option<f64>,
    },
    /// Estimate per-layer Hessian traces.
    Sensitivity {
        #[command(flatten)]
        run: RunArgs,
        /// Network to profile; a fresh network is pretrained if absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        probes: Option<usize>,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Search per-layer bit allocations for target average bit-widths.
    Search {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        profile: PathBuf,
        /// SuperNet used to score each solution and build the Pareto table.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Target average bit-width; repeat for several targets.
        #[arg(long = "omega")]
        omegas: Vec<f64>,
        #[arg(long, value_enum)]
        sense: Option<SenseArg>,
    },
    /// Evaluate a checkpoint at every uniform precision and on searched subnets.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// `solutions.json` from a previous search.
        #[arg(long)]
        solutions: Option<PathBuf>,
    },
    /// Print a summary of a checkpoint file as JSON.
    InspectCkpt { path: PathBuf },
}

/// Options shared by every experiment. Paths given to other flags may
/// contain `{seed}`, which is replaced per seed.
#[derive(Debug, Args)]
struct RunArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Replaces the configured seeds; repeatable.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Training epochs for the stage being run.
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Conventional,
    Alrs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SamplingArg {
    Hessian,
    Uniform,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SenseArg {
    Maximize,
    Minimize,
}

impl RunArgs {
    fn load(&self, apply: impl FnOnce(&mut RunConfig)) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        if !self.seeds.is_empty() {
            cfg.seeds = self.seeds.clone();
        }
        if let Some(dir) = &self.output_dir {
            cfg.output_dir = dir.clone();
        }
        apply(&mut cfg);
        cfg.validate()?;
        Ok(cfg)
    }
}

fn per_seed(path: &Path, seed: u64) -> PathBuf {
    PathBuf::from(path.to_string_lossy().replace("{seed}", &seed.to_string()))
}

fn is_float(net: &Network) -> bool {
    net.quantized_layers()
        .iter()
        .all(|&li| net.linear(li).is_some_and(|l| l.quant.is_none()))
}

fn initial_network(cfg: &RunConfig, split: &Split, init: Option<&Path>, seed: u64) -> Result<Network> {
    Ok(match init {
        Some(p) => load_checkpoint(&per_seed(p, seed))?,
        None => pipeline::pretrain(cfg, split, seed)?,
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainMp { run, mode, unshared } => {
            let cfg = run.load(|c| {
                if let Some(e) = run.epochs {
                    c.multiprec.epochs = e;
                }
                if let Some(m) = mode {
                    c.multiprec.mode = match m {
                        ModeArg::Conventional => TrainMode::Conventional,
                        ModeArg::Alrs => TrainMode::Alrs,
                    };
                }
                if unshared {
                    c.multiprec.shared_weight_scale = false;
                }
            })?;
            let split = pipeline::load_data(&cfg)?;
            for &seed in &cfg.seeds {
                let float = pipeline::pretrain(&cfg, &split, seed)?;
                pipeline::train_multiprec(&cfg, &split, &float, seed)?;
                let report = pipeline::evaluate(&cfg, &split, &cfg.seed_dir(seed).join(pipeline::MODEL_CHECKPOINT), &[], seed)?;
                info!("seed {seed}: {:?}", report.uniform);
            }
        }
        Command::TrainMixed {
            run,
            profile,
            init,
            sampling,
            sigma_max,
        } => {
            let cfg = run.load(|c| {
                if let Some(e) = run.epochs {
                    c.mixed.epochs = e;
                }
                if let Some(s) = sampling {
                    c.mixed.sampling = match s {
                        SamplingArg::Hessian => Sampling::Hessian,
                        SamplingArg::Uniform => Sampling::Uniform,
                    };
                }
                if let Some(s) = sigma_max {
                    c.mixed.sigma_max = s;
                }
            })?;
            let split = pipeline::load_data(&cfg)?;
            for &seed in &cfg.seeds {
                let start = initial_network(&cfg, &split, init.as_deref(), seed)?;
                let prof = match &profile {
                    Some(p) => pipeline::read_profile(&per_seed(p, seed))?,
                    None => pipeline::profile(&cfg, &split, &start, seed)?,
                };
                let start = if is_float(&start) { pipeline::quantize(&cfg, &split, &start)? } else { start };
                pipeline::train_mixed(&cfg, &split, start, &prof, seed)?;
            }
        }
        Command::Sensitivity {
            run,
            checkpoint,
            probes,
            samples,
        } => {
            let cfg = run.load(|c| {
                if let Some(p) = probes {
                    c.sensitivity.probes = p;
                }
                if let Some(s) = samples {
                    c.sensitivity.samples = s;
                }
                if let Some(e) = run.epochs {
                    c.pretrain.epochs = e;
                }
            })?;
            let split = pipeline::load_data(&cfg)?;
            for &seed in &cfg.seeds {
                let net = initial_network(&cfg, &split, checkpoint.as_deref(), seed)?;
                let prof = pipeline::profile(&cfg, &split, &net, seed)?;
                info!("seed {seed}: mean trace {:.4e}", prof.mean_trace);
            }
        }
        Command::Search {
            run,
            profile,
            checkpoint,
            omegas,
            sense,
        } => {
            let cfg = run.load(|c| {
                if !omegas.is_empty() {
                    c.search.omegas = omegas.clone();
                }
                if let Some(s) = sense {
                    c.search.sense = match s {
                        SenseArg::Maximize => Sense::Maximize,
                        SenseArg::Minimize => Sense::Minimize,
                    };
                }
            })?;
            let split = pipeline::load_data(&cfg)?;
            for &seed in &cfg.seeds {
                let prof = pipeline::read_profile(&per_seed(&profile, seed))?;
                let net = checkpoint.as_ref().map(|p| load_checkpoint(&per_seed(p, seed))).transpose()?;
                let found = pipeline::search(&cfg, &split, &prof, net.as_ref(), seed)?;
                let n: usize = found.iter().map(|o| o.solutions.len()).sum();
                info!("seed {seed}: {n} solutions over {} targets", found.len());
            }
        }
        Command::Eval {
            run,
            checkpoint,
            solutions,
        } => {
            let cfg = run.load(|_| {})?;
            let split = pipeline::load_data(&cfg)?;
            for &seed in &cfg.seeds {
                let subnets = match &solutions {
                    Some(p) => pipeline::read_solutions(&per_seed(p, seed))?,
                    None => Vec::new(),
                };
                let report = pipeline::evaluate(&cfg, &split, &per_seed(&checkpoint, seed), &subnets, seed)?;
                println!("{}", serde_json::to_string(&report)?);
            }
        }
        Command::InspectCkpt { path } => {
            let bytes = std::fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
            let net = decode(&bytes)?;
            println!("{}", serde_json::to_string_pretty(&summary(&net, &bytes))?);
        }
    }
    Ok(())
}

fn summary(net: &Network, bytes: &[u8]) -> serde_json::Value {
    let layers: Vec<serde_json::Value> = net
        .layers()
        .iter()
        .zip(net.specs())
        .enumerate()
        .map(|(i, (layer, spec))| {
            let mut v = serde_json::json!({
                "name": format!("layer{i}"),
                "kind": spec.kind,
                "fan_in": spec.fan_in,
                "fan_out": spec.fan_out,
                "quantized": spec.quantized,
            });
            match layer {
                Layer::Linear(l) => {
                    v["weights"] = l.weight.data().len().into();
                    if let Some(q) = &l.quant {
                        v["h"] = q.h.into();
                        v["s_h"] = q.s_h.into();
                        v["shared_weight_scale"] = q.shared_weight_scale.into();
                        v["activation_bits"] = q.act.keys().copied().collect::<Vec<u8>>().into();
                    }
                }
                Layer::Norm(n) => {
                    let keys: Vec<String> = n.stats.keys().map(|k| format!("{}->{}", k.producer, k.consumer)).collect();
                    v["norm_entries"] = keys.into();
                }
                Layer::Relu | Layer::Flatten => {}
            }
            v
        })
        .collect();
    serde_json::json!({
        "magic": String::from_utf8_lossy(&bytes[..4]),
        "mode": if bytes[4] == 0 { "shared" } else { "unshared" },
        "h": bytes[5],
        "bytes": bytes.len(),
        "input_shape": net.input_shape(),
        "layers": layers,
    })
}

/// 2: configuration, 3: numerical failure, 4: infeasible search, 1: other.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_)) => 2,
        Some(Error::Numerical(_) | Error::NonFiniteGradient(_)) => 3,
        Some(Error::Infeasible { .. }) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
