//! `cascade-kd`: generate tri-modal synthetic datasets, train backbones
//! and early-exit classifiers, fit ensemble weights, run thresholded
//! inference, and emit the cost/flatness/latency reports.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on runtime failures.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use cascade_kd::config::{parse_config, ExperimentConfig, FitSplit, TauGrid};
use cascade_kd::cost::{bandwidth_report, sweep_tradeoff, ExitChain, StreamSpec};
use cascade_kd::data::{generate, load_dataset, make_splits, save_dataset, Dataset, DatasetSplit, Modality};
use cascade_kd::distill::{train_backbone, train_ics, IcStrategy, PkdSchedule};
use cascade_kd::landscape::{flatness, scan_ic_landscape, IcSelector};
use cascade_kd::model::{load_cascade, save_cascade, CascadeModel};
use cascade_kd::numcore::derive_seed;
use cascade_kd::runner::{
    header_comment, run_frame_ablation, run_order_study, run_table1, run_wise_study,
    write_manifest, write_tradeoff_csv,
};
use cascade_kd::wise::{
    cache_exit_probs, fit_wise, load_policy, save_policy, ExitEngine, ExitPolicy, PolicyWeights,
};

#[derive(Parser)]
#[command(name = "cascade-kd", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Experiment config (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<ExperimentConfig> {
        match &self.config {
            Some(path) => Ok(parse_config(path)?),
            None => Ok(ExperimentConfig::default()),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic tri-modal dataset file.
    GenData {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and freeze the three backbone networks.
    TrainBackbones {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        split: u8,
    },
    /// Train the internal classifiers of frozen backbones.
    TrainIcs {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt_dir: PathBuf,
        #[arg(long)]
        strategy: IcStrategy,
        /// Phase boundaries and epoch count as K,T,M.
        #[arg(long)]
        schedule: Option<String>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        split: u8,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Fit ensemble scaling factors and write a policy file.
    FitWise {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        ckpt_dir: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1)]
        split: u8,
        /// Which side of the split to fit on (train|test).
        #[arg(long)]
        fit_split: Option<FitSplit>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Early-exit inference over a test split with a saved policy.
    Infer {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        ckpt_dir: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        policy: PathBuf,
        /// Confidence threshold override.
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long, default_value_t = 1)]
        split: u8,
    },
    /// Accuracy/FLOPs trade-off curve over a τ grid.
    Sweep {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        ckpt_dir: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Lateral weighting: none, uniform, or wise (fitted here).
        #[arg(long, default_value = "wise")]
        weights: String,
        #[arg(long)]
        tau_grid: Option<TauGrid>,
        #[arg(long, default_value_t = 1)]
        split: u8,
        #[arg(long)]
        out: PathBuf,
    },
    /// Loss-surface scan around one trained internal classifier.
    ProbeFlatness {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        ckpt_dir: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Classifier selector, e.g. mv:2.
        #[arg(long)]
        ic: IcSelector,
        #[arg(long, default_value_t = 1.0)]
        r: f64,
        #[arg(long, default_value_t = 21)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Evaluation side of the split (train|test).
        #[arg(long, default_value = "train")]
        eval_split: FitSplit,
        #[arg(long, default_value_t = 1)]
        split: u8,
        #[arg(long)]
        out: PathBuf,
    },
    /// Packet-stream latency/bandwidth comparison from a specs file.
    StreamReport {
        #[arg(long)]
        specs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// CE-vs-progressive comparison table over seeds × splits.
    RunTable1 {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Teacher-order study (I-frame-only vs curriculum vs reversed).
    RunOrderStudy {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Lateral-connection study at iso-compute.
    RunWiseStudy {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Accuracy/FLOPs as one modality's frame count varies.
    FrameAblation {
        #[command(flatten)]
        config: ConfigArg,
        /// Axis to vary: mv, r, or iframe.
        #[arg(long)]
        axis: Modality,
        /// Comma-separated frame counts, e.g. 1,2,3,4,5.
        #[arg(long)]
        counts: String,
        #[arg(long, default_value_t = 0.9999)]
        tau: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn ensure_fresh(path: &Path) -> Result<()> {
    if path.exists() {
        bail!(
            "refusing to overwrite existing artifact {}",
            path.display()
        );
    }
    Ok(())
}

fn pick_split(dataset: &Dataset, split_id: u8) -> Result<DatasetSplit> {
    let splits = make_splits(dataset.len(), dataset.spec.seed)?;
    splits
        .into_iter()
        .find(|s| s.split_id == split_id)
        .with_context(|| format!("split {split_id} out of range 1..=3"))
}

fn fit_indices<'a>(split: &'a DatasetSplit, side: FitSplit) -> &'a [usize] {
    match side {
        FitSplit::Train => &split.train,
        FitSplit::Test => &split.test,
    }
}

fn load_model_and_data(ckpt_dir: &Path, data: &Path) -> Result<(CascadeModel, Dataset)> {
    let model = load_cascade(ckpt_dir)
        .with_context(|| format!("loading checkpoints from {}", ckpt_dir.display()))?;
    let dataset =
        load_dataset(data).with_context(|| format!("loading dataset {}", data.display()))?;
    Ok((model, dataset))
}

fn parse_schedule(s: &str) -> Result<PkdSchedule> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        bail!("schedule `{s}` must look like K,T,M");
    }
    let parse = |p: &str| {
        p.trim()
            .parse::<usize>()
            .with_context(|| format!("bad schedule component `{p}`"))
    };
    Ok(PkdSchedule::new(
        parse(parts[0])?,
        parse(parts[1])?,
        parse(parts[2])?,
    )?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out } => {
            let cfg = config.load()?;
            ensure_fresh(&out)?;
            let dataset = generate(&cfg.data)?;
            save_dataset(&dataset, &out)?;
            println!(
                "wrote {} samples ({} classes) to {}",
                dataset.len(),
                dataset.spec.num_classes,
                out.display()
            );
        }
        Command::TrainBackbones {
            config,
            data,
            out_dir,
            seed,
            split,
        } => {
            let started = Instant::now();
            let cfg = config.load()?;
            let dataset = load_dataset(&data)?;
            let split = pick_split(&dataset, split)?;
            let spec = &dataset.spec;
            let run_seed = derive_seed(seed, &format!("run-split-{}", split.split_id));
            let mut model = CascadeModel::build(
                [
                    spec.feature_dim(Modality::Mv),
                    spec.feature_dim(Modality::R),
                    spec.feature_dim(Modality::Iframe),
                ],
                [
                    cfg.arch.widths(Modality::Mv),
                    cfg.arch.widths(Modality::R),
                    cfg.arch.widths(Modality::Iframe),
                ],
                spec.num_classes,
                cfg.arch.ic_hidden_divisor,
                derive_seed(run_seed, "model-init"),
            );
            for net in model.nets.iter_mut() {
                let bb_cfg = cfg.backbone_train_config(net.modality(), run_seed);
                let x = dataset.features(net.modality(), &split.train);
                let labels = dataset.labels(&split.train);
                let trace = train_backbone(&mut net.backbone, &x, &labels, &bb_cfg)?;
                net.backbone.freeze();
                net.meta.seed = run_seed;
                net.meta.backbone_epochs = cfg.train.backbone_epochs as u64;
                println!(
                    "{}: {} epochs, final train loss {:.6}",
                    net.modality(),
                    trace.len(),
                    trace.last().copied().unwrap_or(f64::NAN)
                );
            }
            for m in Modality::ALL {
                ensure_fresh(&out_dir.join(cascade_kd::model::checkpoint_name(m)))?;
            }
            let paths = save_cascade(&model, &out_dir)?;
            write_manifest(&cfg, &out_dir, &paths, started)?;
        }
        Command::TrainIcs {
            config,
            data,
            ckpt_dir,
            strategy,
            schedule,
            seed,
            split,
            out_dir,
        } => {
            let started = Instant::now();
            let mut cfg = config.load()?;
            if let Some(s) = schedule {
                let s = parse_schedule(&s)?;
                cfg.ic.boundary_k = s.boundary_k;
                cfg.ic.boundary_t = s.boundary_t;
                cfg.ic.epochs = s.total_epochs;
                cfg.ic.milestones = vec![s.boundary_k, s.boundary_t, s.total_epochs];
            }
            let (mut model, dataset) = load_model_and_data(&ckpt_dir, &data)?;
            let split = pick_split(&dataset, split)?;
            let run_seed = derive_seed(seed, &format!("run-split-{}", split.split_id));
            let ic_cfg = cfg.ic_train_config(strategy, run_seed);
            train_ics(&mut model.nets, &dataset, &split.train, &ic_cfg)?;
            for m in Modality::ALL {
                ensure_fresh(&out_dir.join(cascade_kd::model::checkpoint_name(m)))?;
            }
            let paths = save_cascade(&model, &out_dir)?;
            write_manifest(&cfg, &out_dir, &paths, started)?;
            println!("trained 9 ICs with strategy {strategy}");
        }
        Command::FitWise {
            config,
            ckpt_dir,
            data,
            split,
            fit_split,
            tau,
            out,
        } => {
            let cfg = config.load()?;
            ensure_fresh(&out)?;
            let (model, dataset) = load_model_and_data(&ckpt_dir, &data)?;
            let split = pick_split(&dataset, split)?;
            let side = fit_split.unwrap_or(cfg.policy.fit_split);
            let chain = ExitChain::full(&cfg.policy.chain_order);
            let probs = cache_exit_probs(&model, &chain, &dataset, fit_indices(&split, side))?;
            let (weights, report) = fit_wise(&probs)?;
            let policy = ExitPolicy::new(
                chain,
                PolicyWeights::Wise(weights),
                tau.unwrap_or(cfg.policy.tau),
            )?;
            save_policy(&policy, &out)?;
            let last = report.fitted_loss.last().copied().unwrap_or(f64::NAN);
            println!(
                "fitted {} positions; final-position loss {last:.6} (uniform {:.6}); clamps {}",
                report.fitted_loss.len(),
                report.uniform_loss.last().copied().unwrap_or(f64::NAN),
                report.clamp_events
            );
            println!("policy written to {}", out.display());
        }
        Command::Infer {
            config: _,
            ckpt_dir,
            data,
            policy,
            tau,
            split,
        } => {
            let (model, dataset) = load_model_and_data(&ckpt_dir, &data)?;
            let split = pick_split(&dataset, split)?;
            let mut policy = load_policy(&policy)?;
            if let Some(t) = tau {
                policy = policy.with_tau(t);
            }
            let engine = ExitEngine::new(&model, &policy)?;
            let eval = engine.evaluate(&dataset, &split.test)?;
            let out = serde_json::json!({
                "tau": policy.tau,
                "weights": policy.weights.tag(),
                "accuracy": eval.accuracy,
                "mean_flops": eval.mean_flops,
                "exit_histogram": eval.exit_histogram,
            });
            println!("{}", serde_json::to_string_pretty(&out)?);
        }
        Command::Sweep {
            config,
            ckpt_dir,
            data,
            weights,
            tau_grid,
            split,
            out,
        } => {
            let cfg = config.load()?;
            ensure_fresh(&out)?;
            let (model, dataset) = load_model_and_data(&ckpt_dir, &data)?;
            let split = pick_split(&dataset, split)?;
            let chain = ExitChain::full(&cfg.policy.chain_order);
            let weights = match weights.as_str() {
                "none" => PolicyWeights::NoLateral,
                "uniform" => PolicyWeights::Uniform,
                "wise" => {
                    let probs = cache_exit_probs(
                        &model,
                        &chain,
                        &dataset,
                        fit_indices(&split, cfg.policy.fit_split),
                    )?;
                    PolicyWeights::Wise(fit_wise(&probs)?.0)
                }
                other => bail!("unknown weights mode `{other}` (expected none|uniform|wise)"),
            };
            let grid = tau_grid.unwrap_or(cfg.policy.tau_grid).values();
            let points = sweep_tradeoff(&model, &chain, &weights, &dataset, &split.test, &grid)?;
            write_tradeoff_csv(&cfg, &points, &out)?;
            println!("wrote {} trade-off points to {}", points.len(), out.display());
        }
        Command::ProbeFlatness {
            config: _,
            ckpt_dir,
            data,
            ic,
            r,
            n,
            seed,
            eval_split,
            split,
            out,
        } => {
            ensure_fresh(&out)?;
            let (mut model, dataset) = load_model_and_data(&ckpt_dir, &data)?;
            let split = pick_split(&dataset, split)?;
            let indices = fit_indices(&split, eval_split);
            let grid = scan_ic_landscape(&mut model, ic, &dataset, indices, r, n, seed)?;
            let score = flatness(&grid, r)?;
            let mut text = String::from("alpha,beta,loss\n");
            for (ai, &alpha) in grid.coords.iter().enumerate() {
                for (bi, &beta) in grid.coords.iter().enumerate() {
                    text.push_str(&format!("{alpha:.6},{beta:.6},{:.12}\n", grid.loss_at(ai, bi)));
                }
            }
            std::fs::write(&out, text)?;
            println!(
                "center loss {:.6}, flatness score {:.6} at radius {r}",
                grid.center_loss, score.score
            );
        }
        Command::StreamReport { specs, out } => {
            ensure_fresh(&out)?;
            #[derive(serde::Deserialize)]
            struct SpecsFile {
                reference: String,
                methods: Vec<StreamSpec>,
            }
            let text = std::fs::read_to_string(&specs)
                .with_context(|| format!("reading {}", specs.display()))?;
            let file: SpecsFile = serde_json::from_str(&text)?;
            let report = bandwidth_report(&file.methods, &file.reference)
                .map_err(|e| anyhow::anyhow!(e))?;
            std::fs::write(&out, serde_json::to_string_pretty(&report)?)?;
            for row in &report.rows {
                println!(
                    "{}: latency {:.2}x, bandwidth {:.2}x (model-dependent)",
                    row.name, row.latency_ratio, row.bandwidth_ratio
                );
            }
        }
        Command::RunTable1 { config, out_dir } => {
            let cfg = config.load()?;
            let study = run_table1(&cfg, &out_dir)?;
            println!("{}", header_comment(&cfg));
            println!(
                "mean IC accuracy: ce {:.4}, pkd {:.4}",
                study.strategy_mean(IcStrategy::Ce),
                study.strategy_mean(IcStrategy::PkdCurriculum)
            );
        }
        Command::RunOrderStudy { config, out_dir } => {
            let cfg = config.load()?;
            let study = run_order_study(&cfg, &out_dir)?;
            println!(
                "mean IC accuracy: iframe-kd {:.4}, pkd {:.4}, pkd-anti {:.4}",
                study.strategy_mean(IcStrategy::IframeKd),
                study.strategy_mean(IcStrategy::PkdCurriculum),
                study.strategy_mean(IcStrategy::PkdAnti)
            );
        }
        Command::RunWiseStudy { config, out_dir } => {
            let cfg = config.load()?;
            let study = run_wise_study(&cfg, &out_dir)?;
            for row in &study.rows {
                println!(
                    "{:>8}: accuracy {:.4} ± {:.4}, mean FLOPs {:.0}",
                    row.method, row.accuracy_mean, row.accuracy_std, row.flops_mean
                );
            }
            println!("max FLOPs spread across methods: {:.2}%", study.max_flops_spread * 100.0);
        }
        Command::FrameAblation {
            config,
            axis,
            counts,
            tau,
            out,
        } => {
            let cfg = config.load()?;
            ensure_fresh(&out)?;
            let counts: Vec<usize> = counts
                .split(',')
                .map(|c| {
                    c.trim()
                        .parse::<usize>()
                        .with_context(|| format!("bad frame count `{c}`"))
                })
                .collect::<Result<_>>()?;
            let points = run_frame_ablation(&cfg, axis, &counts, tau, &out)?;
            for p in &points {
                println!(
                    "{} frames={}: accuracy {:.4}, mean FLOPs {:.0}",
                    p.axis, p.count, p.accuracy, p.mean_flops
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version requests are not usage errors.
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
