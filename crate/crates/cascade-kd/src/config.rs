//! Experiment configuration: TOML-backed, fully defaulted, validated
//! across fields, and hashable so every report can name the exact
//! configuration that produced it.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::data::{GenSpec, Modality};
use crate::distill::{BackboneTrainConfig, IcStrategy, IcTrainConfig, PkdSchedule};
use crate::model::NUM_BLOCKS;
use crate::numcore::derive_seed;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("failed to read config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Constraint(String),
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub widths_mv: [usize; NUM_BLOCKS],
    pub widths_r: [usize; NUM_BLOCKS],
    pub widths_iframe: [usize; NUM_BLOCKS],
    /// IC hidden width = attach-point width / this divisor.
    pub ic_hidden_divisor: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            widths_mv: [64, 64, 32, 32],
            widths_r: [64, 64, 32, 32],
            widths_iframe: [128, 96, 64, 64],
            ic_hidden_divisor: 2,
        }
    }
}

impl ArchConfig {
    pub fn widths(&self, m: Modality) -> &[usize; NUM_BLOCKS] {
        match m {
            Modality::Mv => &self.widths_mv,
            Modality::R => &self.widths_r,
            Modality::Iframe => &self.widths_iframe,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr_mv: f64,
    pub lr_r: f64,
    pub lr_iframe: f64,
    pub weight_decay: f64,
    pub adam_eps: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub backbone_epochs: usize,
    pub backbone_milestones: Vec<usize>,
    pub lr_gamma: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            lr_mv: 0.01,
            lr_r: 0.005,
            lr_iframe: 0.003,
            weight_decay: 1e-4,
            adam_eps: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            batch_size: 64,
            backbone_epochs: 102,
            backbone_milestones: vec![30, 54, 78],
            lr_gamma: 0.1,
        }
    }
}

impl TrainSection {
    pub fn lr(&self, m: Modality) -> f64 {
        match m {
            Modality::Mv => self.lr_mv,
            Modality::R => self.lr_r,
            Modality::Iframe => self.lr_iframe,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IcSection {
    pub epochs: usize,
    pub boundary_k: usize,
    pub boundary_t: usize,
    pub milestones: Vec<usize>,
    pub temperature: f64,
    pub reset_adam_at_phase: bool,
}

impl Default for IcSection {
    fn default() -> Self {
        Self {
            epochs: 90,
            boundary_k: 30,
            boundary_t: 60,
            milestones: vec![30, 60, 90],
            temperature: 1.0,
            reset_adam_at_phase: true,
        }
    }
}

impl IcSection {
    pub fn schedule(&self) -> PkdSchedule {
        PkdSchedule {
            boundary_k: self.boundary_k,
            boundary_t: self.boundary_t,
            total_epochs: self.epochs,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TauGrid {
    pub start: f64,
    pub stop: f64,
    pub step: f64,
}

impl Default for TauGrid {
    fn default() -> Self {
        Self {
            start: 0.0,
            stop: 1.01,
            step: 0.02,
        }
    }
}

impl TauGrid {
    pub fn values(&self) -> Vec<f64> {
        let mut out = Vec::new();
        let mut i = 0u64;
        loop {
            let v = self.start + self.step * i as f64;
            if v > self.stop + self.step * 1e-9 {
                break;
            }
            out.push(v);
            i += 1;
        }
        out
    }
}

impl std::str::FromStr for TauGrid {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 3 {
            return Err(format!("tau grid `{s}` must look like start:stop:step"));
        }
        let parse = |p: &str| {
            p.parse::<f64>()
                .map_err(|e| format!("bad tau grid component `{p}`: {e}"))
        };
        Ok(Self {
            start: parse(parts[0])?,
            stop: parse(parts[1])?,
            step: parse(parts[2])?,
        })
    }
}

/// Which split β fitting runs on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitSplit {
    Train,
    Test,
}

impl std::str::FromStr for FitSplit {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(FitSplit::Train),
            "test" => Ok(FitSplit::Test),
            other => Err(format!("unknown fit split `{other}` (expected train|test)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySection {
    /// Modality evaluation order for the exit chain.
    pub chain_order: [Modality; 3],
    pub tau: f64,
    pub tau_grid: TauGrid,
    /// Mean-FLOPs target for iso-compute comparisons, as a fraction of the
    /// span between the cheapest and the full-chain cost.
    pub iso_target_fraction: f64,
    pub fit_split: FitSplit,
}

impl Default for PolicySection {
    fn default() -> Self {
        Self {
            chain_order: crate::cost::DEFAULT_CHAIN_ORDER,
            tau: 0.8,
            tau_grid: TauGrid::default(),
            iso_target_fraction: 0.5,
            fit_split: FitSplit::Train,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seeds: Vec<u64>,
    pub splits: Vec<u8>,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seeds: vec![1, 2, 3],
            splits: vec![1, 2, 3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: GenSpec,
    pub arch: ArchConfig,
    pub train: TrainSection,
    pub ic: IcSection,
    pub policy: PolicySection,
    pub run: RunSection,
}

impl ExperimentConfig {
    /// CI-speed preset; this is also the `Default`.
    pub fn toy() -> Self {
        Self::default()
    }

    /// Full-length training recipe: 510 backbone epochs with decays at
    /// 150/270/390, 150 IC epochs with decays at 50/100/150 and phase
    /// boundaries at 50/100.
    pub fn paper_scale() -> Self {
        Self {
            train: TrainSection {
                backbone_epochs: 510,
                backbone_milestones: vec![150, 270, 390],
                ..TrainSection::default()
            },
            ic: IcSection {
                epochs: 150,
                boundary_k: 50,
                boundary_t: 100,
                milestones: vec![50, 100, 150],
                ..IcSection::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let constraint = |msg: String| Err(ConfigError::Constraint(msg));
        self.data
            .validate()
            .map_err(|e| ConfigError::Constraint(e.to_string()))?;
        for widths in [&self.arch.widths_mv, &self.arch.widths_r, &self.arch.widths_iframe] {
            if widths.iter().any(|&w| w == 0) {
                return constraint("block widths must be positive".into());
            }
        }
        if self.arch.ic_hidden_divisor == 0 {
            return constraint("ic_hidden_divisor must be positive".into());
        }
        for (name, lr) in [
            ("lr_mv", self.train.lr_mv),
            ("lr_r", self.train.lr_r),
            ("lr_iframe", self.train.lr_iframe),
        ] {
            if lr < 0.0 {
                return constraint(format!("{name} must be non-negative"));
            }
        }
        if self.train.batch_size == 0 {
            return constraint("batch_size must be positive".into());
        }
        for (name, ms) in [
            ("train.backbone_milestones", &self.train.backbone_milestones),
            ("ic.milestones", &self.ic.milestones),
        ] {
            if ms.windows(2).any(|w| w[0] > w[1]) {
                return constraint(format!("{name} must be sorted ascending"));
            }
        }
        if self.ic.epochs > 0 {
            let s = self.ic.schedule();
            if !(0 < s.boundary_k && s.boundary_k < s.boundary_t && s.boundary_t < s.total_epochs) {
                return constraint(format!(
                    "schedule requires K < T < M with K > 0, got K={} T={} M={}",
                    s.boundary_k, s.boundary_t, s.total_epochs
                ));
            }
        }
        if self.ic.temperature <= 0.0 {
            return constraint("temperature must be positive".into());
        }
        {
            let mut seen = std::collections::HashSet::new();
            for m in self.policy.chain_order {
                if !seen.insert(m) {
                    return constraint("chain_order must list each modality exactly once".into());
                }
            }
        }
        if self.policy.tau < 0.0 {
            return constraint("tau must be non-negative".into());
        }
        let g = self.policy.tau_grid;
        if g.step <= 0.0 || g.stop < g.start {
            return constraint("tau_grid must have positive step and stop ≥ start".into());
        }
        if !(0.0..=1.0).contains(&self.policy.iso_target_fraction) {
            return constraint("iso_target_fraction must lie in [0, 1]".into());
        }
        if self.run.seeds.is_empty() || self.run.splits.is_empty() {
            return constraint("run.seeds and run.splits must be non-empty".into());
        }
        if self.run.splits.iter().any(|&s| !(1..=3).contains(&s)) {
            return constraint("run.splits entries must be 1..=3".into());
        }
        Ok(())
    }

    pub fn backbone_train_config(&self, m: Modality, seed: u64) -> BackboneTrainConfig {
        BackboneTrainConfig {
            epochs: self.train.backbone_epochs,
            batch_size: self.train.batch_size,
            base_lr: self.train.lr(m),
            milestones: self.train.backbone_milestones.clone(),
            lr_gamma: self.train.lr_gamma,
            weight_decay: self.train.weight_decay,
            adam_eps: self.train.adam_eps,
            beta1: self.train.beta1,
            beta2: self.train.beta2,
            seed: derive_seed(seed, &format!("train-backbone-{}", m.tag())),
        }
    }

    pub fn ic_train_config(&self, strategy: IcStrategy, seed: u64) -> IcTrainConfig {
        IcTrainConfig {
            strategy,
            schedule: self.ic.schedule(),
            temperature: self.ic.temperature,
            batch_size: self.train.batch_size,
            base_lrs: [self.train.lr_mv, self.train.lr_r, self.train.lr_iframe],
            milestones: self.ic.milestones.clone(),
            lr_gamma: self.train.lr_gamma,
            weight_decay: self.train.weight_decay,
            adam_eps: self.train.adam_eps,
            beta1: self.train.beta1,
            beta2: self.train.beta2,
            reset_adam_at_phase: self.ic.reset_adam_at_phase,
            seed: derive_seed(seed, "train-ics"),
        }
    }
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_config_str(&text)
}

pub fn parse_config_str(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let cfg: ExperimentConfig = toml::from_str(text)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Short hex digest of the canonical serialized config.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let canonical = toml::to_string(cfg).expect("config serializes");
    let digest = Sha256::digest(canonical.as_bytes());
    let mut out = String::with_capacity(16);
    for byte in digest.iter().take(8) {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_yields_full_defaults() {
        let cfg = parse_config_str("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.data.num_classes, 10);
        assert_eq!(cfg.ic.epochs, 90);
    }

    #[test]
    fn schedule_constraint_is_named() {
        let err = parse_config_str("[ic]\nboundary_k = 20\nboundary_t = 10\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("K < T"), "{msg}");
    }

    #[test]
    fn unknown_key_is_rejected_with_location() {
        let err = parse_config_str("[train]\nlearning_rate_typo = 3\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("learning_rate_typo"), "{msg}");
        assert!(msg.contains("line"), "{msg}");
    }

    #[test]
    fn round_trip_preserves_config() {
        let mut cfg = ExperimentConfig::paper_scale();
        cfg.data.class_sep = 0.123456789012345;
        cfg.train.lr_mv = 0.0123;
        let text = toml::to_string(&cfg).unwrap();
        let back = parse_config_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unsorted_milestones_are_rejected() {
        let err = parse_config_str("[train]\nbackbone_milestones = [30, 10]\n").unwrap_err();
        assert!(err.to_string().contains("sorted"));
    }

    #[test]
    fn noise_ordering_is_enforced_through_config() {
        let err = parse_config_str("[data]\nnoise_mv = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("mv > r > iframe"));
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = ExperimentConfig::default();
        let mut b = ExperimentConfig::default();
        assert_eq!(config_hash(&a), config_hash(&b));
        b.data.seed = 999;
        assert_ne!(config_hash(&a), config_hash(&b));
        assert_eq!(config_hash(&a).len(), 16);
    }

    #[test]
    fn tau_grid_values_include_endpoints() {
        let grid = TauGrid {
            start: 0.0,
            stop: 1.01,
            step: 0.01,
        };
        let values = grid.values();
        assert_eq!(values.len(), 102);
        assert_eq!(values[0], 0.0);
        assert!((values[101] - 1.01).abs() < 1e-12);
        let parsed: TauGrid = "0:1.01:0.01".parse().unwrap();
        assert_eq!(parsed, grid);
    }

    #[test]
    fn paper_preset_carries_full_schedule() {
        let cfg = ExperimentConfig::paper_scale();
        cfg.validate().unwrap();
        assert_eq!(cfg.train.backbone_epochs, 510);
        assert_eq!(cfg.train.backbone_milestones, vec![150, 270, 390]);
        assert_eq!(cfg.ic.epochs, 150);
        assert_eq!(cfg.ic.boundary_k, 50);
        assert_eq!(cfg.ic.boundary_t, 100);
    }
}
