//! Trainers: backbone pretraining with cross entropy, and internal
//! classifier training under four strategies — plain CE, distillation from
//! the intra-frame teacher only, the progressive curriculum (MV, then R,
//! then I-frame teachers), and its reverse.
//!
//! Backbones are frozen before IC training; the teacher at each epoch is
//! that backbone's final classifier evaluated on its own modality input
//! for the same mini-batch samples the student sees. Each IC optimizes its
//! own loss with its own optimizer, so gradients are disjoint by
//! construction.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, Modality};
use crate::model::{BackboneNet, ModalityNet, NUM_ICS};
use crate::numcore::{
    derive_seed, lr_schedule, softmax_eval, Adam, AdamConfig, Graph, NumError, Tensor,
};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error("loss became non-finite at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("backbone for {modality} must be frozen before IC training")]
    UnfrozenBackbone { modality: Modality },
    #[error("backbone for {modality} is frozen; refusing to train it")]
    FrozenBackbone { modality: Modality },
    #[error("cannot evaluate on an empty sample set")]
    EmptyEvalSet,
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
}

/// Phase boundaries for progressive distillation: the first teacher runs
/// for epochs [0, K), the second for [K, T), the third for [T, M).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PkdSchedule {
    pub boundary_k: usize,
    pub boundary_t: usize,
    pub total_epochs: usize,
}

impl PkdSchedule {
    pub fn new(boundary_k: usize, boundary_t: usize, total_epochs: usize) -> Result<Self, TrainError> {
        let s = Self {
            boundary_k,
            boundary_t,
            total_epochs,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.total_epochs == 0 {
            return Ok(()); // degenerate schedule: no training at all
        }
        if !(0 < self.boundary_k
            && self.boundary_k < self.boundary_t
            && self.boundary_t < self.total_epochs)
        {
            return Err(TrainError::InvalidSchedule(format!(
                "schedule requires 0 < K < T < M, got K={} T={} M={}",
                self.boundary_k, self.boundary_t, self.total_epochs
            )));
        }
        Ok(())
    }
}

/// IC training strategies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IcStrategy {
    Ce,
    IframeKd,
    #[serde(rename = "pkd")]
    PkdCurriculum,
    PkdAnti,
}

impl IcStrategy {
    pub const ALL: [IcStrategy; 4] = [
        IcStrategy::Ce,
        IcStrategy::IframeKd,
        IcStrategy::PkdCurriculum,
        IcStrategy::PkdAnti,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            IcStrategy::Ce => "ce",
            IcStrategy::IframeKd => "iframe-kd",
            IcStrategy::PkdCurriculum => "pkd",
            IcStrategy::PkdAnti => "pkd-anti",
        }
    }
}

impl std::fmt::Display for IcStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

impl std::str::FromStr for IcStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ce" => Ok(IcStrategy::Ce),
            "iframe-kd" => Ok(IcStrategy::IframeKd),
            "pkd" => Ok(IcStrategy::PkdCurriculum),
            "pkd-anti" => Ok(IcStrategy::PkdAnti),
            other => Err(format!(
                "unknown strategy `{other}` (expected ce|iframe-kd|pkd|pkd-anti)"
            )),
        }
    }
}

/// Which backbone's final classifier teaches at `epoch`, or None for plain
/// cross-entropy training.
pub fn teacher_for_epoch(
    schedule: &PkdSchedule,
    strategy: IcStrategy,
    epoch: usize,
) -> Option<Modality> {
    match strategy {
        IcStrategy::Ce => None,
        IcStrategy::IframeKd => Some(Modality::Iframe),
        IcStrategy::PkdCurriculum => Some(if epoch < schedule.boundary_k {
            Modality::Mv
        } else if epoch < schedule.boundary_t {
            Modality::R
        } else {
            Modality::Iframe
        }),
        IcStrategy::PkdAnti => Some(if epoch < schedule.boundary_k {
            Modality::Iframe
        } else if epoch < schedule.boundary_t {
            Modality::R
        } else {
            Modality::Mv
        }),
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BackboneTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub milestones: Vec<usize>,
    pub lr_gamma: f64,
    pub weight_decay: f64,
    pub adam_eps: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
}

impl Default for BackboneTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 102,
            batch_size: 64,
            base_lr: 0.003,
            milestones: vec![30, 54, 78],
            lr_gamma: 0.1,
            weight_decay: 1e-4,
            adam_eps: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            seed: 0,
        }
    }
}

impl BackboneTrainConfig {
    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.base_lr,
            weight_decay: self.weight_decay,
            eps: self.adam_eps,
            beta1: self.beta1,
            beta2: self.beta2,
        }
    }
}

fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

fn gather_rows(features: &Tensor, rows: &[usize]) -> Tensor {
    let slices: Vec<&[f64]> = rows.iter().map(|&r| features.row(r)).collect();
    Tensor::from_rows(&slices)
}

/// Trains one backbone with cross entropy over mini-batches. Returns the
/// per-epoch mean training loss. The net is left unfrozen; the caller
/// freezes it once satisfied.
pub fn train_backbone(
    net: &mut BackboneNet,
    features: &Tensor,
    labels: &[usize],
    cfg: &BackboneTrainConfig,
) -> Result<Vec<f64>, TrainError> {
    if net.frozen {
        return Err(TrainError::FrozenBackbone {
            modality: net.modality,
        });
    }
    let n = labels.len();
    let mut adam = Adam::new(cfg.adam());
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        adam.set_lr(lr_schedule(cfg.base_lr, epoch, &cfg.milestones, cfg.lr_gamma));
        let order = shuffled_indices(
            n,
            derive_seed(cfg.seed, &format!("bb-{}-epoch-{epoch}", net.modality.tag())),
        );
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let x = gather_rows(features, chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new();
            let (logits, vars) = net.graph_forward(&mut g, &x)?;
            let loss = g.cross_entropy_logits(logits, &y)?;
            let loss_val = g.scalar_value(loss);
            if !loss_val.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch });
            }
            g.backward(loss)?;
            net.pull_grads(&g, &vars);
            adam.step(&mut net.params_mut())?;
            epoch_loss += loss_val;
            batches += 1;
        }
        let mean = epoch_loss / batches.max(1) as f64;
        if epoch >= 20 && mean > trace[epoch - 20] {
            log::warn!(
                "{} backbone: train loss rose over a 20-epoch window ({:.6} -> {:.6} at epoch {epoch})",
                net.modality,
                trace[epoch - 20],
                mean
            );
        }
        trace.push(mean);
    }
    Ok(trace)
}

/// Argmax accuracy of `logits_fn` outputs against labels.
pub fn argmax_accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let mut hits = 0usize;
    for (r, &label) in labels.iter().enumerate() {
        let row = logits.row(r);
        let pred = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        if pred == label {
            hits += 1;
        }
    }
    hits as f64 / labels.len() as f64
}

/// Frozen-backbone activations reused across every IC epoch: tap features
/// and final-classifier logits per modality, in sample-index order.
pub struct FeatureCache {
    pub taps: Vec<Vec<Tensor>>,
    pub fc_logits: Vec<Tensor>,
    pub labels: Vec<usize>,
}

pub fn modality_index(m: Modality) -> usize {
    match m {
        Modality::Mv => 0,
        Modality::R => 1,
        Modality::Iframe => 2,
    }
}

impl FeatureCache {
    pub fn build(
        nets: &[&ModalityNet; 3],
        dataset: &Dataset,
        indices: &[usize],
    ) -> Result<Self, TrainError> {
        let mut taps = Vec::with_capacity(3);
        let mut fc_logits = Vec::with_capacity(3);
        for net in nets {
            let x = dataset.features(net.modality(), indices);
            let (t, logits) = net.backbone.forward_with_taps(&x)?;
            taps.push(t);
            fc_logits.push(logits);
        }
        Ok(Self {
            taps,
            fc_logits,
            labels: dataset.labels(indices),
        })
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct IcTrainConfig {
    pub strategy: IcStrategy,
    pub schedule: PkdSchedule,
    pub temperature: f64,
    pub batch_size: usize,
    /// Base learning rate per modality (mv, r, iframe); each IC starts
    /// from its own backbone's rate.
    pub base_lrs: [f64; 3],
    pub milestones: Vec<usize>,
    pub lr_gamma: f64,
    pub weight_decay: f64,
    pub adam_eps: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub reset_adam_at_phase: bool,
    pub seed: u64,
}

impl Default for IcTrainConfig {
    fn default() -> Self {
        Self {
            strategy: IcStrategy::PkdCurriculum,
            schedule: PkdSchedule {
                boundary_k: 30,
                boundary_t: 60,
                total_epochs: 90,
            },
            temperature: 1.0,
            batch_size: 64,
            base_lrs: [0.01, 0.005, 0.003],
            milestones: vec![30, 60, 90],
            lr_gamma: 0.1,
            weight_decay: 1e-4,
            adam_eps: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            reset_adam_at_phase: true,
            seed: 0,
        }
    }
}

impl IcTrainConfig {
    fn adam(&self, modality: Modality) -> AdamConfig {
        AdamConfig {
            lr: self.base_lrs[modality_index(modality)],
            weight_decay: self.weight_decay,
            eps: self.adam_eps,
            beta1: self.beta1,
            beta2: self.beta2,
        }
    }
}

/// Per-IC training trace: mean loss per epoch.
#[derive(Debug, Clone)]
pub struct IcTrace {
    pub modality: Modality,
    pub attach_point: usize,
    pub losses: Vec<f64>,
}

/// Trains all nine ICs across the three frozen backbones. Backbone
/// parameters are untouched; each IC has its own Adam state.
pub fn train_ics(
    nets: &mut [ModalityNet; 3],
    dataset: &Dataset,
    train_indices: &[usize],
    cfg: &IcTrainConfig,
) -> Result<Vec<IcTrace>, TrainError> {
    train_ics_with_hook(nets, dataset, train_indices, cfg, |_, _| {})
}

/// Internal variant taking a per-epoch hook, used to probe IC
/// independence in tests.
fn train_ics_with_hook(
    nets: &mut [ModalityNet; 3],
    dataset: &Dataset,
    train_indices: &[usize],
    cfg: &IcTrainConfig,
    mut hook: impl FnMut(usize, &mut [ModalityNet; 3]),
) -> Result<Vec<IcTrace>, TrainError> {
    for net in nets.iter() {
        if !net.backbone.frozen {
            return Err(TrainError::UnfrozenBackbone {
                modality: net.modality(),
            });
        }
    }
    if cfg.temperature <= 0.0 {
        return Err(TrainError::Num(NumError::NonPositiveTemperature(
            cfg.temperature,
        )));
    }
    cfg.schedule.validate()?;

    let cache = {
        let refs = [&nets[0], &nets[1], &nets[2]];
        FeatureCache::build(&refs, dataset, train_indices)?
    };
    let n = cache.labels.len();

    let mut optimizers: Vec<Vec<Adam>> = nets
        .iter()
        .map(|net| {
            (0..NUM_ICS)
                .map(|_| Adam::new(cfg.adam(net.modality())))
                .collect()
        })
        .collect();
    let mut traces: Vec<IcTrace> = nets
        .iter()
        .flat_map(|net| {
            (1..=NUM_ICS).map(|attach| IcTrace {
                modality: net.modality(),
                attach_point: attach,
                losses: Vec::with_capacity(cfg.schedule.total_epochs),
            })
        })
        .collect();

    let mut prev_teacher: Option<Modality> = None;
    for epoch in 0..cfg.schedule.total_epochs {
        hook(epoch, nets);
        let teacher = teacher_for_epoch(&cfg.schedule, cfg.strategy, epoch);
        if cfg.reset_adam_at_phase && epoch > 0 && teacher != prev_teacher {
            for per_net in optimizers.iter_mut() {
                for adam in per_net.iter_mut() {
                    adam.reset_moments();
                }
            }
        }
        prev_teacher = teacher;

        let order = shuffled_indices(n, derive_seed(cfg.seed, &format!("ic-epoch-{epoch}")));
        let mut epoch_losses = vec![0.0; 3 * NUM_ICS];
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let labels: Vec<usize> = chunk.iter().map(|&i| cache.labels[i]).collect();
            let teacher_logits =
                teacher.map(|t| gather_rows(&cache.fc_logits[modality_index(t)], chunk));
            for (net_idx, net) in nets.iter_mut().enumerate() {
                let lr = lr_schedule(
                    cfg.base_lrs[net_idx],
                    epoch,
                    &cfg.milestones,
                    cfg.lr_gamma,
                );
                for (ic_idx, ic) in net.ics.iter_mut().enumerate() {
                    let tap = gather_rows(&cache.taps[net_idx][ic.attach_point - 1], chunk);
                    let mut g = Graph::new();
                    let (student, vars) = ic.graph_forward(&mut g, &tap)?;
                    let loss = match &teacher_logits {
                        Some(t) => {
                            let tv = g.constant(t);
                            g.kd_loss(student, tv, cfg.temperature)?
                        }
                        None => g.cross_entropy_logits(student, &labels)?,
                    };
                    let loss_val = g.scalar_value(loss);
                    if !loss_val.is_finite() {
                        return Err(TrainError::NonFiniteLoss { epoch });
                    }
                    g.backward(loss)?;
                    ic.pull_grads(&g, &vars);
                    let adam = &mut optimizers[net_idx][ic_idx];
                    adam.set_lr(lr);
                    adam.step(&mut ic.params_mut())?;
                    epoch_losses[net_idx * NUM_ICS + ic_idx] += loss_val;
                }
            }
            batches += 1;
        }
        for (trace, total) in traces.iter_mut().zip(&epoch_losses) {
            trace.losses.push(total / batches.max(1) as f64);
        }
    }

    for net in nets.iter_mut() {
        net.meta.ic_epochs = cfg.schedule.total_epochs as u64;
        net.meta.ic_strategy = cfg.strategy.tag().to_string();
    }
    Ok(traces)
}

/// Accuracy of one exit on an evaluation set.
#[derive(Debug, Clone, PartialEq)]
pub struct ExitAccuracy {
    pub modality: Modality,
    /// 1..=3 for internal classifiers, 4 for the final classifier.
    pub exit_index: usize,
    pub accuracy: f64,
}

/// Per-exit accuracies: nine IC entries plus the three final classifiers.
pub fn evaluate_ics(
    nets: &[&ModalityNet; 3],
    dataset: &Dataset,
    indices: &[usize],
) -> Result<Vec<ExitAccuracy>, TrainError> {
    if indices.is_empty() {
        return Err(TrainError::EmptyEvalSet);
    }
    let cache = FeatureCache::build(nets, dataset, indices)?;
    let mut out = Vec::with_capacity(3 * (NUM_ICS + 1));
    for (net_idx, net) in nets.iter().enumerate() {
        for ic in &net.ics {
            let logits = ic.forward(&cache.taps[net_idx][ic.attach_point - 1])?;
            out.push(ExitAccuracy {
                modality: net.modality(),
                exit_index: ic.attach_point,
                accuracy: argmax_accuracy(&logits, &cache.labels),
            });
        }
        out.push(ExitAccuracy {
            modality: net.modality(),
            exit_index: NUM_ICS + 1,
            accuracy: argmax_accuracy(&cache.fc_logits[net_idx], &cache.labels),
        });
    }
    Ok(out)
}

/// Softmaxed predictions of an internal classifier over cached taps.
pub fn ic_probabilities(
    net: &ModalityNet,
    net_idx: usize,
    cache: &FeatureCache,
    attach_point: usize,
) -> Result<Tensor, TrainError> {
    let ic = &net.ics[attach_point - 1];
    let logits = ic.forward(&cache.taps[net_idx][attach_point - 1])?;
    Ok(softmax_eval(&logits))
}
