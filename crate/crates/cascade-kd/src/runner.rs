//! Experiment orchestration: seeded training pipelines, report recipes,
//! CSV/JSON emission, and run manifests.
//!
//! Output directories are append-only: writers refuse to overwrite an
//! existing file. Every CSV starts with a comment line carrying the config
//! hash and tool version, and identical configs reproduce identical bytes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use anyhow::{bail, Context, Result};

use crate::config::{config_hash, ExperimentConfig, FitSplit};
use crate::cost::{
    flops_of_model, frame_count_ablation, sweep_tradeoff, ExitChain, FrameAblationPoint,
    FrameAblationSetup, TradeoffPoint,
};
use crate::data::{generate, make_splits, Dataset, DatasetSplit, Modality};
use crate::distill::{evaluate_ics, train_backbone, train_ics, ExitAccuracy, IcStrategy};
use crate::model::{CascadeModel, NUM_ICS};
use crate::numcore::derive_seed;
use crate::wise::{
    cache_exit_probs, fit_wise, iso_compute_threshold_search, ExitEngine, ExitPolicy,
    PolicyWeights, TAU_NEVER_EXIT,
};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Worker slots for independent runs, capped by `CASCADE_KD_THREADS`.
pub fn worker_count(jobs: usize) -> usize {
    let available = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    let cap = std::env::var("CASCADE_KD_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&v| v > 0)
        .unwrap_or(available);
    cap.min(jobs).max(1)
}

/// Runs `f` over the items on a small thread pool, preserving input order
/// in the output.
pub fn parallel_map<T, R, F>(items: Vec<T>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync,
{
    let workers = worker_count(items.len());
    if workers <= 1 {
        return items.into_iter().map(f).collect();
    }
    let n = items.len();
    let slots: Vec<Mutex<Option<R>>> = (0..n).map(|_| Mutex::new(None)).collect();
    let work: Vec<Mutex<Option<T>>> = items.into_iter().map(|t| Mutex::new(Some(t))).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let item = work[i].lock().unwrap().take().unwrap();
                *slots[i].lock().unwrap() = Some(f(item));
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.into_inner().unwrap().unwrap())
        .collect()
}

/// Identity of one experiment run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunKey {
    pub dataset_seed: u64,
    pub split_id: u8,
}

pub fn run_keys(cfg: &ExperimentConfig) -> Vec<RunKey> {
    let mut keys = Vec::new();
    for &dataset_seed in &cfg.run.seeds {
        for &split_id in &cfg.run.splits {
            keys.push(RunKey {
                dataset_seed,
                split_id,
            });
        }
    }
    keys
}

/// Dataset + split + frozen backbones for one run, before IC training.
pub struct PreparedRun {
    pub key: RunKey,
    pub dataset: Dataset,
    pub split: DatasetSplit,
    pub model: CascadeModel,
}

/// Generates the run's dataset, trains all three backbones, and freezes
/// them.
pub fn prepare_run(cfg: &ExperimentConfig, key: RunKey) -> Result<PreparedRun> {
    let mut spec = cfg.data.clone();
    spec.seed = key.dataset_seed;
    let dataset = generate(&spec)?;
    let splits = make_splits(dataset.len(), spec.seed)?;
    let split = splits
        .iter()
        .find(|s| s.split_id == key.split_id)
        .context("split id out of range")?
        .clone();

    let run_seed = derive_seed(key.dataset_seed, &format!("run-split-{}", key.split_id));
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
        train_backbone(&mut net.backbone, &x, &labels, &bb_cfg)
            .with_context(|| format!("training {} backbone", net.modality()))?;
        net.backbone.freeze();
        net.meta.seed = run_seed;
        net.meta.backbone_epochs = cfg.train.backbone_epochs as u64;
    }
    Ok(PreparedRun {
        key,
        dataset,
        split,
        model,
    })
}

/// Trains the ICs of a cloned model under the given strategy.
pub fn train_run_ics(
    cfg: &ExperimentConfig,
    prepared: &PreparedRun,
    strategy: IcStrategy,
) -> Result<CascadeModel> {
    let run_seed = derive_seed(
        prepared.key.dataset_seed,
        &format!("run-split-{}", prepared.key.split_id),
    );
    let mut model = prepared.model.clone();
    let ic_cfg = cfg.ic_train_config(strategy, run_seed);
    train_ics(
        &mut model.nets,
        &prepared.dataset,
        &prepared.split.train,
        &ic_cfg,
    )?;
    Ok(model)
}

/// One row of a strategy study: the accuracy of one exit in one run.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyRow {
    pub dataset_seed: u64,
    pub split_id: u8,
    pub strategy: IcStrategy,
    pub modality: Modality,
    pub exit_index: usize,
    pub accuracy: f64,
}

#[derive(Debug)]
pub struct StrategyStudy {
    pub rows: Vec<StudyRow>,
    pub strategies: Vec<IcStrategy>,
    pub n_runs: usize,
}

/// Trains each run's backbones once, then every strategy's ICs from the
/// same initialization, and evaluates all exits on the test split.
pub fn strategy_study(
    cfg: &ExperimentConfig,
    strategies: &[IcStrategy],
) -> Result<StrategyStudy> {
    let keys = run_keys(cfg);
    let n_runs = keys.len();
    let per_run: Vec<Result<Vec<StudyRow>>> = parallel_map(keys, |key| {
        let prepared = prepare_run(cfg, key)?;
        let mut rows = Vec::new();
        for &strategy in strategies {
            let model = train_run_ics(cfg, &prepared, strategy)?;
            let refs = [&model.nets[0], &model.nets[1], &model.nets[2]];
            let table: Vec<ExitAccuracy> =
                evaluate_ics(&refs, &prepared.dataset, &prepared.split.test)?;
            for entry in table {
                rows.push(StudyRow {
                    dataset_seed: key.dataset_seed,
                    split_id: key.split_id,
                    strategy,
                    modality: entry.modality,
                    exit_index: entry.exit_index,
                    accuracy: entry.accuracy,
                });
            }
        }
        Ok(rows)
    });
    let mut rows = Vec::new();
    for r in per_run {
        rows.extend(r?);
    }
    Ok(StrategyStudy {
        rows,
        strategies: strategies.to_vec(),
        n_runs,
    })
}

pub fn mean_and_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl StrategyStudy {
    pub fn cell(&self, strategy: IcStrategy, modality: Modality, exit_index: usize) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| {
                r.strategy == strategy && r.modality == modality && r.exit_index == exit_index
            })
            .map(|r| r.accuracy)
            .collect()
    }

    /// Mean accuracy over all IC cells (exits 1..=3, all modalities).
    pub fn strategy_mean(&self, strategy: IcStrategy) -> f64 {
        let values: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.strategy == strategy && r.exit_index <= NUM_ICS)
            .map(|r| r.accuracy)
            .collect();
        values.iter().sum::<f64>() / values.len() as f64
    }
}

fn create_new_file(path: &Path) -> Result<fs::File> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::OpenOptions::new()
        .write(true)
        .create_new(true)
        .open(path)
        .with_context(|| {
            format!(
                "refusing to overwrite existing artifact {}",
                path.display()
            )
        })
}

pub fn header_comment(cfg: &ExperimentConfig) -> String {
    format!(
        "# config_hash={} tool_version={}",
        config_hash(cfg),
        TOOL_VERSION
    )
}

fn write_study_runs_csv(
    cfg: &ExperimentConfig,
    study: &StrategyStudy,
    path: &Path,
) -> Result<()> {
    let mut f = create_new_file(path)?;
    writeln!(f, "{}", header_comment(cfg))?;
    writeln!(f, "dataset_seed,split,strategy,modality,ic_index,accuracy")?;
    for row in study.rows.iter().filter(|r| r.exit_index <= NUM_ICS) {
        writeln!(
            f,
            "{},{},{},{},{},{:.6}",
            row.dataset_seed, row.split_id, row.strategy, row.modality, row.exit_index, row.accuracy
        )?;
    }
    Ok(())
}

fn write_study_summary_csv(
    cfg: &ExperimentConfig,
    study: &StrategyStudy,
    path: &Path,
    diff_pair: Option<(IcStrategy, IcStrategy)>,
) -> Result<()> {
    let mut f = create_new_file(path)?;
    writeln!(f, "{}", header_comment(cfg))?;
    writeln!(
        f,
        "strategy,modality,ic_index,mean_accuracy,std_accuracy,n_runs"
    )?;
    for &strategy in &study.strategies {
        for modality in Modality::ALL {
            for exit_index in 1..=NUM_ICS {
                let values = study.cell(strategy, modality, exit_index);
                let (mean, std) = mean_and_std(&values);
                writeln!(
                    f,
                    "{},{},{},{:.6},{:.6},{}",
                    strategy,
                    modality,
                    exit_index,
                    mean,
                    std,
                    values.len()
                )?;
            }
        }
    }
    if let Some((a, b)) = diff_pair {
        for modality in Modality::ALL {
            for exit_index in 1..=NUM_ICS {
                let (mean_a, _) = mean_and_std(&study.cell(a, modality, exit_index));
                let (mean_b, _) = mean_and_std(&study.cell(b, modality, exit_index));
                writeln!(
                    f,
                    "diff_{a}_minus_{b},{},{},{:.6},,{}",
                    modality,
                    exit_index,
                    mean_a - mean_b,
                    study.n_runs
                )?;
            }
        }
    }
    Ok(())
}

/// Manifest written next to each recipe's outputs.
#[derive(Debug, serde::Serialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub tool_version: String,
    pub artifacts: Vec<String>,
    pub wall_time_secs: f64,
}

pub fn write_manifest(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    artifacts: &[PathBuf],
    started: Instant,
) -> Result<PathBuf> {
    for artifact in artifacts {
        if !artifact.exists() {
            bail!("manifest lists missing artifact {}", artifact.display());
        }
    }
    let manifest = RunManifest {
        config_hash: config_hash(cfg),
        tool_version: TOOL_VERSION.to_string(),
        artifacts: artifacts
            .iter()
            .map(|p| p.display().to_string())
            .collect(),
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    let path = out_dir.join("manifest.json");
    let mut f = create_new_file(&path)?;
    serde_json::to_writer_pretty(&mut f, &manifest)?;
    writeln!(f)?;
    Ok(path)
}

/// CE-vs-progressive comparison table over seeds × splits, with per-cell
/// mean ± std and difference rows.
pub fn run_table1(cfg: &ExperimentConfig, out_dir: &Path) -> Result<StrategyStudy> {
    let started = Instant::now();
    let study = strategy_study(cfg, &[IcStrategy::Ce, IcStrategy::PkdCurriculum])?;
    let runs_csv = out_dir.join("table1_runs.csv");
    let summary_csv = out_dir.join("table1_summary.csv");
    write_study_runs_csv(cfg, &study, &runs_csv)?;
    write_study_summary_csv(
        cfg,
        &study,
        &summary_csv,
        Some((IcStrategy::PkdCurriculum, IcStrategy::Ce)),
    )?;
    write_manifest(cfg, out_dir, &[runs_csv, summary_csv], started)?;
    Ok(study)
}

/// Teacher-order comparison (I-frame-only vs curriculum vs reversed),
/// evaluated per IC without lateral connections.
pub fn run_order_study(cfg: &ExperimentConfig, out_dir: &Path) -> Result<StrategyStudy> {
    let started = Instant::now();
    let study = strategy_study(
        cfg,
        &[
            IcStrategy::IframeKd,
            IcStrategy::PkdCurriculum,
            IcStrategy::PkdAnti,
        ],
    )?;
    let runs_csv = out_dir.join("order_study_runs.csv");
    let summary_csv = out_dir.join("order_study_summary.csv");
    write_study_runs_csv(cfg, &study, &runs_csv)?;
    write_study_summary_csv(cfg, &study, &summary_csv, None)?;
    write_manifest(cfg, out_dir, &[runs_csv, summary_csv], started)?;
    Ok(study)
}

/// One policy family's aggregate in the lateral-connection study.
#[derive(Debug, Clone)]
pub struct WiseStudyRow {
    pub method: &'static str,
    pub mean_tau: f64,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub flops_mean: f64,
    pub flops_std: f64,
    pub n_runs: usize,
}

pub struct WiseStudy {
    pub rows: Vec<WiseStudyRow>,
    /// Largest per-run relative FLOPs spread across the three methods.
    pub max_flops_spread: f64,
}

/// Compares no-lateral, uniform, and fitted lateral weighting at matched
/// mean FLOPs. Each run trains the curriculum ICs, fits β on the
/// configured split, picks one cost target, and bisection-matches every
/// method's τ to it.
pub fn run_wise_study(cfg: &ExperimentConfig, out_dir: &Path) -> Result<WiseStudy> {
    let started = Instant::now();
    let keys = run_keys(cfg);
    let n_runs = keys.len();

    struct RunOutcome {
        // (tau, accuracy, mean_flops) per method, in fixed order.
        per_method: [(f64, f64, f64); 3],
        spread: f64,
    }

    let outcomes: Vec<Result<RunOutcome>> = parallel_map(keys, |key| {
        let prepared = prepare_run(cfg, key)?;
        let model = train_run_ics(cfg, &prepared, IcStrategy::PkdCurriculum)?;
        let chain = ExitChain::full(&cfg.policy.chain_order);

        let fit_indices = match cfg.policy.fit_split {
            FitSplit::Train => &prepared.split.train,
            FitSplit::Test => &prepared.split.test,
        };
        let probs = cache_exit_probs(&model, &chain, &prepared.dataset, fit_indices)?;
        let (weights, _report) = fit_wise(&probs)?;

        let ledger = flops_of_model(&model, &chain);
        let min_cost = ledger.at_position(1) as f64;
        let max_cost = ledger.total() as f64;
        let target = min_cost + cfg.policy.iso_target_fraction * (max_cost - min_cost);

        let methods: [(&str, PolicyWeights); 3] = [
            ("none", PolicyWeights::NoLateral),
            ("uniform", PolicyWeights::Uniform),
            ("wise", PolicyWeights::Wise(weights)),
        ];
        let mut per_method = [(0.0, 0.0, 0.0); 3];
        for (i, (_, weights)) in methods.iter().enumerate() {
            let (tau, _) = iso_compute_threshold_search(
                &model,
                &chain,
                weights,
                &prepared.dataset,
                &prepared.split.test,
                target,
            )?;
            let policy = ExitPolicy::new(chain.clone(), weights.clone(), tau)?;
            let engine = ExitEngine::new(&model, &policy)?;
            let eval = engine.evaluate(&prepared.dataset, &prepared.split.test)?;
            per_method[i] = (tau, eval.accuracy, eval.mean_flops);
        }
        let flops: Vec<f64> = per_method.iter().map(|m| m.2).collect();
        let lo = flops.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = flops.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mean = flops.iter().sum::<f64>() / flops.len() as f64;
        Ok(RunOutcome {
            per_method,
            spread: (hi - lo) / mean,
        })
    });

    let mut collected = Vec::with_capacity(n_runs);
    for o in outcomes {
        collected.push(o?);
    }
    let max_flops_spread = collected
        .iter()
        .map(|o| o.spread)
        .fold(0.0f64, f64::max);

    let names = ["none", "uniform", "wise"];
    let mut rows = Vec::with_capacity(3);
    for (i, name) in names.iter().enumerate() {
        let taus: Vec<f64> = collected.iter().map(|o| o.per_method[i].0).collect();
        let accs: Vec<f64> = collected.iter().map(|o| o.per_method[i].1).collect();
        let flops: Vec<f64> = collected.iter().map(|o| o.per_method[i].2).collect();
        let (acc_mean, acc_std) = mean_and_std(&accs);
        let (flops_mean, flops_std) = mean_and_std(&flops);
        rows.push(WiseStudyRow {
            method: name,
            mean_tau: taus.iter().sum::<f64>() / taus.len() as f64,
            accuracy_mean: acc_mean,
            accuracy_std: acc_std,
            flops_mean,
            flops_std,
            n_runs,
        });
    }

    let csv = out_dir.join("wise_study.csv");
    let mut f = create_new_file(&csv)?;
    writeln!(f, "{}", header_comment(cfg))?;
    writeln!(
        f,
        "method,mean_tau,accuracy_mean,accuracy_std,mean_flops,mean_flops_std,n_runs"
    )?;
    for row in &rows {
        writeln!(
            f,
            "{},{:.6},{:.6},{:.6},{:.1},{:.1},{}",
            row.method,
            row.mean_tau,
            row.accuracy_mean,
            row.accuracy_std,
            row.flops_mean,
            row.flops_std,
            row.n_runs
        )?;
    }
    drop(f);
    write_manifest(cfg, out_dir, &[csv], started)?;
    Ok(WiseStudy {
        rows,
        max_flops_spread,
    })
}

/// τ-sweep trade-off curve for one prepared model, written as CSV.
pub fn write_tradeoff_csv(
    cfg: &ExperimentConfig,
    points: &[TradeoffPoint],
    path: &Path,
) -> Result<()> {
    let mut f = create_new_file(path)?;
    writeln!(f, "{}", header_comment(cfg))?;
    writeln!(f, "tau,accuracy,mean_flops,exit_hist_json")?;
    for p in points {
        writeln!(
            f,
            "{:.6},{:.6},{:.1},\"{}\"",
            p.tau,
            p.accuracy,
            p.mean_flops,
            serde_json::to_string(&p.exit_histogram)?
        )?;
    }
    Ok(())
}

/// Runs the sweep recipe on a single prepared run (first seed × split).
pub fn run_sweep(
    cfg: &ExperimentConfig,
    weights_mode: &str,
    out_path: &Path,
) -> Result<Vec<TradeoffPoint>> {
    let key = run_keys(cfg)[0];
    let prepared = prepare_run(cfg, key)?;
    let model = train_run_ics(cfg, &prepared, IcStrategy::PkdCurriculum)?;
    let chain = ExitChain::full(&cfg.policy.chain_order);
    let weights = match weights_mode {
        "none" => PolicyWeights::NoLateral,
        "uniform" => PolicyWeights::Uniform,
        "wise" => {
            let fit_indices = match cfg.policy.fit_split {
                FitSplit::Train => &prepared.split.train,
                FitSplit::Test => &prepared.split.test,
            };
            let probs = cache_exit_probs(&model, &chain, &prepared.dataset, fit_indices)?;
            let (weights, _) = fit_wise(&probs)?;
            PolicyWeights::Wise(weights)
        }
        other => bail!("unknown weights mode `{other}` (expected none|uniform|wise)"),
    };
    let grid = cfg.policy.tau_grid.values();
    let points = sweep_tradeoff(
        &model,
        &chain,
        &weights,
        &prepared.dataset,
        &prepared.split.test,
        &grid,
    )?;
    write_tradeoff_csv(cfg, &points, out_path)?;
    Ok(points)
}

/// Frame-count ablation over one axis, written as CSV.
pub fn run_frame_ablation(
    cfg: &ExperimentConfig,
    axis: Modality,
    counts: &[usize],
    tau: f64,
    out_path: &Path,
) -> Result<Vec<FrameAblationPoint>> {
    let setup = FrameAblationSetup {
        base_spec: cfg.data.clone(),
        widths: [
            *cfg.arch.widths(Modality::Mv),
            *cfg.arch.widths(Modality::R),
            *cfg.arch.widths(Modality::Iframe),
        ],
        ic_hidden_divisor: cfg.arch.ic_hidden_divisor,
        num_classes: cfg.data.num_classes,
        base_lrs: [cfg.train.lr_mv, cfg.train.lr_r, cfg.train.lr_iframe],
        backbone_cfg: crate::distill::BackboneTrainConfig {
            epochs: cfg.train.backbone_epochs,
            batch_size: cfg.train.batch_size,
            base_lr: cfg.train.lr_iframe,
            milestones: cfg.train.backbone_milestones.clone(),
            lr_gamma: cfg.train.lr_gamma,
            weight_decay: cfg.train.weight_decay,
            adam_eps: cfg.train.adam_eps,
            beta1: cfg.train.beta1,
            beta2: cfg.train.beta2,
            seed: 0,
        },
        splits: cfg.run.splits.clone(),
        tau,
        seed: cfg.data.seed,
    };
    let points = frame_count_ablation(&setup, axis, counts)?;
    let mut f = create_new_file(out_path)?;
    writeln!(f, "{}", header_comment(cfg))?;
    writeln!(f, "axis,frame_count,accuracy,mean_flops")?;
    for p in &points {
        writeln!(
            f,
            "{},{},{:.6},{:.1}",
            p.axis, p.count, p.accuracy, p.mean_flops
        )?;
    }
    Ok(points)
}

/// Full-ensemble policy at τ just above 1 for reference curves.
pub fn never_exit_policy(chain: ExitChain, weights: PolicyWeights) -> Result<ExitPolicy> {
    Ok(ExitPolicy::new(chain, weights, TAU_NEVER_EXIT)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn tiny_cfg() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.data.num_classes = 3;
        cfg.data.samples_per_class = 16;
        cfg.data.dim_iframe = 16;
        cfg.data.dim_r = 16;
        cfg.data.frames_mv = 2;
        cfg.data.frames_r = 2;
        cfg.data.frames_iframe = 2;
        cfg.arch.widths_mv = [8, 8, 8, 8];
        cfg.arch.widths_r = [8, 8, 8, 8];
        cfg.arch.widths_iframe = [16, 8, 8, 8];
        cfg.train.backbone_epochs = 8;
        cfg.train.backbone_milestones = vec![4];
        cfg.ic.epochs = 6;
        cfg.ic.boundary_k = 2;
        cfg.ic.boundary_t = 4;
        cfg.ic.milestones = vec![2, 4, 6];
        cfg.run.seeds = vec![1];
        cfg.run.splits = vec![1];
        cfg.validate().unwrap();
        cfg
    }

    #[test]
    fn parallel_map_preserves_order() {
        let out = parallel_map((0..37).collect::<Vec<usize>>(), |i| i * 2);
        assert_eq!(out, (0..37).map(|i| i * 2).collect::<Vec<_>>());
    }

    #[test]
    fn strategy_study_produces_expected_row_count() {
        let cfg = tiny_cfg();
        let study = strategy_study(&cfg, &[IcStrategy::Ce]).unwrap();
        // 1 run × 1 strategy × 3 modalities × 4 exits (3 ICs + FC).
        assert_eq!(study.rows.len(), 12);
        assert!(study.rows.iter().all(|r| (0.0..=1.0).contains(&r.accuracy)));
    }

    #[test]
    fn table1_outputs_are_deterministic_bytes() {
        let cfg = tiny_cfg();
        let dir_a = tempdir().unwrap();
        let dir_b = tempdir().unwrap();
        run_table1(&cfg, dir_a.path()).unwrap();
        run_table1(&cfg, dir_b.path()).unwrap();
        for name in ["table1_runs.csv", "table1_summary.csv"] {
            let a = fs::read(dir_a.path().join(name)).unwrap();
            let b = fs::read(dir_b.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between identical runs");
        }
    }

    #[test]
    fn artifacts_are_append_only() {
        let cfg = tiny_cfg();
        let dir = tempdir().unwrap();
        run_table1(&cfg, dir.path()).unwrap();
        let err = run_table1(&cfg, dir.path()).unwrap_err();
        assert!(err.to_string().contains("refusing to overwrite"), "{err}");
    }

    #[test]
    fn summary_std_matches_recomputed_sample_std() {
        let mut cfg = tiny_cfg();
        cfg.run.seeds = vec![1, 2];
        cfg.run.splits = vec![1, 2];
        let study = strategy_study(&cfg, &[IcStrategy::Ce]).unwrap();
        let values = study.cell(IcStrategy::Ce, Modality::Mv, 1);
        assert_eq!(values.len(), 4);
        let (mean, std) = mean_and_std(&values);
        let m = values.iter().sum::<f64>() / 4.0;
        let s = (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 3.0).sqrt();
        assert!((mean - m).abs() < 1e-15);
        assert!((std - s).abs() < 1e-15);
    }

    #[test]
    fn manifest_lists_existing_artifacts() {
        let cfg = tiny_cfg();
        let dir = tempdir().unwrap();
        run_table1(&cfg, dir.path()).unwrap();
        let manifest: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap())
                .unwrap();
        let artifacts = manifest["artifacts"].as_array().unwrap();
        assert_eq!(artifacts.len(), 2);
        for a in artifacts {
            assert!(Path::new(a.as_str().unwrap()).exists());
        }
        assert_eq!(manifest["config_hash"], config_hash(&cfg));
    }

    #[test]
    fn csv_header_carries_hash_and_version() {
        let cfg = tiny_cfg();
        let dir = tempdir().unwrap();
        run_table1(&cfg, dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join("table1_runs.csv")).unwrap();
        let first = text.lines().next().unwrap();
        assert!(first.starts_with("# config_hash="));
        assert!(first.contains(TOOL_VERSION));
    }
}
