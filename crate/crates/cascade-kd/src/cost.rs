//! Analytic FLOP accounting, trade-off sweeps, Pareto extraction, and the
//! packet-stream latency/bandwidth model.
//!
//! Counting convention, per sample: a dense layer from `i` to `o` units
//! costs `2·i·o + o` (multiply-add pairs plus bias adds) and a ReLU over
//! `o` units costs `o`. All counts are exact integers.

use std::collections::HashMap;

use crate::data::Modality;
use crate::model::{CascadeModel, ExitId, ExitKind, ModalityNet, NUM_BLOCKS, NUM_ICS};

#[derive(Debug, thiserror::Error)]
pub enum CostError {
    #[error("chain may not be empty")]
    EmptyChain,
    #[error("exit {0} appears more than once in the chain")]
    DuplicateExit(ExitId),
    #[error("exit {exit} requires block {needed}, but the chain visits {previous} first having already passed it")]
    OutOfOrderExit {
        exit: ExitId,
        needed: usize,
        previous: usize,
    },
}

pub const fn dense_flops(in_dim: usize, out_dim: usize) -> u64 {
    (2 * in_dim * out_dim + out_dim) as u64
}

pub const fn relu_flops(dim: usize) -> u64 {
    dim as u64
}

fn block_flops(in_dim: usize, out_dim: usize) -> u64 {
    dense_flops(in_dim, out_dim) + relu_flops(out_dim)
}

fn ic_flops(net: &ModalityNet, attach: usize) -> u64 {
    let ic = &net.ics[attach - 1];
    dense_flops(ic.projection.in_dim(), ic.projection.out_dim())
        + relu_flops(ic.projection.out_dim())
        + dense_flops(ic.head.in_dim(), ic.head.out_dim())
}

/// Ordered early-exit chain. Exits are unique, and within each modality
/// they appear shallow-to-deep so block work is strictly cumulative.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExitChain {
    exits: Vec<ExitId>,
}

impl ExitChain {
    pub fn new(exits: Vec<ExitId>) -> Result<Self, CostError> {
        if exits.is_empty() {
            return Err(CostError::EmptyChain);
        }
        let mut seen = HashMap::new();
        let mut deepest: HashMap<Modality, usize> = HashMap::new();
        for &exit in &exits {
            if seen.insert(exit, ()).is_some() {
                return Err(CostError::DuplicateExit(exit));
            }
            let needed = exit.kind.blocks_needed();
            let prev = deepest.entry(exit.modality).or_insert(0);
            if needed < *prev {
                return Err(CostError::OutOfOrderExit {
                    exit,
                    needed,
                    previous: *prev,
                });
            }
            *prev = needed;
        }
        Ok(Self { exits })
    }

    /// The full 12-exit chain: every modality contributes its three
    /// internal classifiers then its final classifier, modalities in the
    /// given order.
    pub fn full(order: &[Modality; 3]) -> Self {
        let mut exits = Vec::with_capacity(3 * (NUM_ICS + 1));
        for &m in order {
            for attach in 1..=NUM_ICS {
                exits.push(ExitId {
                    modality: m,
                    kind: ExitKind::Ic(attach),
                });
            }
            exits.push(ExitId {
                modality: m,
                kind: ExitKind::Fc,
            });
        }
        Self { exits }
    }

    /// Final classifiers only, in the given modality order.
    pub fn fc_only(order: &[Modality; 3]) -> Self {
        Self {
            exits: order
                .iter()
                .map(|&m| ExitId {
                    modality: m,
                    kind: ExitKind::Fc,
                })
                .collect(),
        }
    }

    pub fn exits(&self) -> &[ExitId] {
        &self.exits
    }

    pub fn len(&self) -> usize {
        self.exits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exits.is_empty()
    }
}

/// Default evaluation order: residual exits first, then motion vectors,
/// then intra-frames.
pub const DEFAULT_CHAIN_ORDER: [Modality; 3] = [Modality::R, Modality::Mv, Modality::Iframe];

/// Exact per-sample FLOP counts for every component, plus cumulative cost
/// at each position of a chain (shared blocks within a modality counted
/// once).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlopLedger {
    /// blocks[modality_index][block_index]
    pub blocks: [[u64; NUM_BLOCKS]; 3],
    /// ics[modality_index][attach_point − 1]
    pub ics: [[u64; NUM_ICS]; 3],
    pub fcs: [u64; 3],
    pub chain: Vec<ExitId>,
    pub cumulative: Vec<u64>,
}

fn mod_idx(m: Modality) -> usize {
    match m {
        Modality::Mv => 0,
        Modality::R => 1,
        Modality::Iframe => 2,
    }
}

pub fn flops_of_model(model: &CascadeModel, chain: &ExitChain) -> FlopLedger {
    let mut blocks = [[0u64; NUM_BLOCKS]; 3];
    let mut ics = [[0u64; NUM_ICS]; 3];
    let mut fcs = [0u64; 3];
    for net in &model.nets {
        let mi = mod_idx(net.modality());
        let mut prev = net.backbone.input_dim();
        for (b, layer) in net.backbone.blocks.iter().enumerate() {
            blocks[mi][b] = block_flops(prev, layer.out_dim());
            prev = layer.out_dim();
        }
        fcs[mi] = dense_flops(
            net.backbone.final_classifier.in_dim(),
            net.backbone.final_classifier.out_dim(),
        );
        for attach in 1..=NUM_ICS {
            ics[mi][attach - 1] = ic_flops(net, attach);
        }
    }

    let mut cumulative = Vec::with_capacity(chain.len());
    let mut blocks_done = [0usize; 3];
    let mut total = 0u64;
    for &exit in chain.exits() {
        let mi = mod_idx(exit.modality);
        let needed = exit.kind.blocks_needed();
        for b in blocks_done[mi]..needed {
            total += blocks[mi][b];
        }
        blocks_done[mi] = blocks_done[mi].max(needed);
        total += match exit.kind {
            ExitKind::Ic(attach) => ics[mi][attach - 1],
            ExitKind::Fc => fcs[mi],
        };
        cumulative.push(total);
    }

    FlopLedger {
        blocks,
        ics,
        fcs,
        chain: chain.exits().to_vec(),
        cumulative,
    }
}

impl FlopLedger {
    /// Cost of running every exit in the chain.
    pub fn total(&self) -> u64 {
        *self.cumulative.last().expect("chain is non-empty")
    }

    /// Cumulative cost at 1-based chain position `l`.
    pub fn at_position(&self, l: usize) -> u64 {
        self.cumulative[l - 1]
    }
}

/// One point of an accuracy/compute trade-off curve.
#[derive(Debug, Clone, PartialEq)]
pub struct TradeoffPoint {
    pub tau: f64,
    pub accuracy: f64,
    pub mean_flops: f64,
    pub exit_histogram: Vec<usize>,
}

/// Points not dominated in (higher accuracy, lower FLOPs), in ascending
/// FLOPs order. A point is dominated when another has accuracy ≥ and
/// FLOPs ≤ with at least one strict.
pub fn pareto_front(points: &[TradeoffPoint]) -> Vec<TradeoffPoint> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        points[a]
            .mean_flops
            .partial_cmp(&points[b].mean_flops)
            .unwrap()
            .then(points[b].accuracy.partial_cmp(&points[a].accuracy).unwrap())
            .then(a.cmp(&b))
    });
    let mut front = Vec::new();
    let mut i = 0;
    let mut best_acc = f64::NEG_INFINITY;
    while i < order.len() {
        // All points sharing this FLOPs value.
        let flops = points[order[i]].mean_flops;
        let mut j = i;
        while j < order.len() && points[order[j]].mean_flops == flops {
            j += 1;
        }
        let group_max = points[order[i]].accuracy; // sorted desc within group
        if group_max > best_acc {
            for &idx in &order[i..j] {
                if points[idx].accuracy == group_max {
                    front.push(points[idx].clone());
                }
            }
            best_acc = group_max;
        }
        i = j;
    }
    front
}

/// One trade-off point per τ in the grid; the grid must be sorted.
pub fn sweep_tradeoff(
    model: &CascadeModel,
    chain: &ExitChain,
    weights: &crate::wise::PolicyWeights,
    dataset: &crate::data::Dataset,
    indices: &[usize],
    tau_grid: &[f64],
) -> Result<Vec<TradeoffPoint>, crate::wise::WiseError> {
    let mut points = Vec::with_capacity(tau_grid.len());
    for &tau in tau_grid {
        let policy = crate::wise::ExitPolicy::new(chain.clone(), weights.clone(), tau)?;
        let engine = crate::wise::ExitEngine::new(model, &policy)?;
        let eval = engine.evaluate(dataset, indices)?;
        points.push(TradeoffPoint {
            tau,
            accuracy: eval.accuracy,
            mean_flops: eval.mean_flops,
            exit_histogram: eval.exit_histogram,
        });
    }
    Ok(points)
}

/// Inputs for the frame-count ablation: everything needed to regenerate
/// data and retrain backbones at each frame count.
#[derive(Debug, Clone)]
pub struct FrameAblationSetup {
    pub base_spec: crate::data::GenSpec,
    pub widths: [[usize; NUM_BLOCKS]; 3],
    pub ic_hidden_divisor: usize,
    pub num_classes: usize,
    /// Base learning rate per modality (mv, r, iframe).
    pub base_lrs: [f64; 3],
    pub backbone_cfg: crate::distill::BackboneTrainConfig,
    pub splits: Vec<u8>,
    pub tau: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameAblationPoint {
    pub axis: Modality,
    pub count: usize,
    pub accuracy: f64,
    pub mean_flops: f64,
}

/// Varies one modality's frame count while holding the others fixed. For
/// each count the dataset is regenerated, the three backbones retrained,
/// and the final classifiers evaluated as a thresholded ensemble. FLOPs
/// grow strictly with the count because the input layer widens.
pub fn frame_count_ablation(
    setup: &FrameAblationSetup,
    axis: Modality,
    counts: &[usize],
) -> Result<Vec<FrameAblationPoint>, crate::wise::WiseError> {
    use crate::data::{generate, make_splits};
    use crate::distill::train_backbone;
    use crate::numcore::derive_seed;

    if counts.is_empty() || counts.iter().any(|&c| c == 0) {
        return Err(crate::wise::WiseError::Train(
            crate::distill::TrainError::InvalidSchedule(format!(
                "frame counts must be positive, got {counts:?}"
            )),
        ));
    }

    let mut out = Vec::with_capacity(counts.len());
    for &count in counts {
        let mut spec = setup.base_spec.clone();
        match axis {
            Modality::Mv => spec.frames_mv = count,
            Modality::R => spec.frames_r = count,
            Modality::Iframe => spec.frames_iframe = count,
        }
        let dataset =
            generate(&spec).map_err(|e| crate::distill::TrainError::InvalidSchedule(e.to_string()))?;
        let splits = make_splits(dataset.len(), spec.seed)
            .map_err(|e| crate::distill::TrainError::InvalidSchedule(e.to_string()))?;

        let mut acc_sum = 0.0;
        let mut flops_sum = 0.0;
        let mut used = 0usize;
        for &split_id in &setup.splits {
            let split = &splits[(split_id - 1) as usize];
            let model_seed = derive_seed(
                setup.seed,
                &format!("ablation-{}-{count}-split-{split_id}", axis.tag()),
            );
            let mut model = CascadeModel::build(
                [
                    spec.feature_dim(Modality::Mv),
                    spec.feature_dim(Modality::R),
                    spec.feature_dim(Modality::Iframe),
                ],
                [&setup.widths[0], &setup.widths[1], &setup.widths[2]],
                setup.num_classes,
                setup.ic_hidden_divisor,
                model_seed,
            );
            for (mi, net) in model.nets.iter_mut().enumerate() {
                let mut cfg = setup.backbone_cfg.clone();
                cfg.base_lr = setup.base_lrs[mi];
                cfg.seed = derive_seed(model_seed, &format!("bb-{}", net.modality().tag()));
                let x = dataset.features(net.modality(), &split.train);
                let labels = dataset.labels(&split.train);
                train_backbone(&mut net.backbone, &x, &labels, &cfg)?;
                net.backbone.freeze();
            }
            let chain = ExitChain::fc_only(&DEFAULT_CHAIN_ORDER);
            let policy = crate::wise::ExitPolicy::new(
                chain,
                crate::wise::PolicyWeights::Uniform,
                setup.tau,
            )?;
            let engine = crate::wise::ExitEngine::new(&model, &policy)?;
            let eval = engine.evaluate(&dataset, &split.test)?;
            acc_sum += eval.accuracy;
            flops_sum += eval.mean_flops;
            used += 1;
        }
        out.push(FrameAblationPoint {
            axis,
            count,
            accuracy: acc_sum / used as f64,
            mean_flops: flops_sum / used as f64,
        });
    }
    Ok(out)
}

/// Stream shape of a classification method: how many frames of each kind
/// it needs and how large each frame is on the wire.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StreamSpec {
    pub name: String,
    /// Frames per group-of-pictures; one I-frame arrives per GOP.
    pub gop_frames: u64,
    pub iframes_required: u64,
    pub mv_required: u64,
    pub r_required: u64,
    pub iframe_bytes: u64,
    pub mv_bytes: u64,
    pub r_bytes: u64,
}

impl StreamSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.gop_frames == 0
            || self.iframes_required == 0
            || self.mv_required == 0
            || self.r_required == 0
        {
            return Err(format!("stream spec `{}`: counts must be positive", self.name));
        }
        if self.iframe_bytes == 0 || self.mv_bytes == 0 || self.r_bytes == 0 {
            return Err(format!("stream spec `{}`: byte sizes must be positive", self.name));
        }
        if self.iframe_bytes < self.mv_bytes || self.iframe_bytes < self.r_bytes {
            return Err(format!(
                "stream spec `{}`: I-frames must be the largest frame type",
                self.name
            ));
        }
        Ok(())
    }

    pub fn total_bytes(&self) -> u64 {
        self.iframes_required * self.iframe_bytes
            + self.mv_required * self.mv_bytes
            + self.r_required * self.r_bytes
    }
}

/// Latency model: at a fixed bit rate, classification can start once the
/// required I-frames have arrived, and I-frames arrive once per GOP, so
/// time-to-classification is proportional to the I-frame count.
pub fn relative_latency(a: &StreamSpec, b: &StreamSpec) -> f64 {
    a.iframes_required as f64 / b.iframes_required as f64
}

/// Iso-latency bandwidth ratio of `a` against reference `b` under the
/// parametric byte model: (bytes a / bytes b) normalized by the latency
/// ratio. Results depend entirely on the chosen byte sizes.
pub fn bandwidth_ratio(a: &StreamSpec, b: &StreamSpec) -> f64 {
    (a.total_bytes() as f64 / b.total_bytes() as f64) / relative_latency(a, b)
}

/// Stream comparison table: every spec against the reference.
#[derive(Debug, Clone, serde::Serialize)]
pub struct StreamReport {
    pub reference: String,
    /// Ratios depend on the declared byte model, not on measured traffic.
    pub model_dependent: bool,
    pub rows: Vec<StreamRow>,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct StreamRow {
    pub name: String,
    pub latency_ratio: f64,
    pub bandwidth_ratio: f64,
    pub total_bytes: u64,
}

pub fn bandwidth_report(specs: &[StreamSpec], reference: &str) -> Result<StreamReport, String> {
    for s in specs {
        s.validate()?;
    }
    let reference_spec = specs
        .iter()
        .find(|s| s.name == reference)
        .ok_or_else(|| format!("reference `{reference}` not found among stream specs"))?;
    let rows = specs
        .iter()
        .map(|s| StreamRow {
            name: s.name.clone(),
            latency_ratio: relative_latency(s, reference_spec),
            bandwidth_ratio: bandwidth_ratio(s, reference_spec),
            total_bytes: s.total_bytes(),
        })
        .collect();
    Ok(StreamReport {
        reference: reference.to_string(),
        model_dependent: true,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModalityNet;

    fn default_model() -> CascadeModel {
        CascadeModel::new([
            ModalityNet::new(Modality::Mv, 48, &[64, 64, 32, 32], 10, 2, 1),
            ModalityNet::new(Modality::R, 192, &[64, 64, 32, 32], 10, 2, 1),
            ModalityNet::new(Modality::Iframe, 192, &[128, 96, 64, 64], 10, 2, 1),
        ])
    }

    #[test]
    fn dense_layer_count_is_closed_form() {
        assert_eq!(dense_flops(4, 3), 27);
    }

    #[test]
    fn two_layer_mlp_count_sums_components() {
        // dense 4→3 (27) + relu 3 + dense 3→2 (14) = 44
        assert_eq!(dense_flops(4, 3) + relu_flops(3) + dense_flops(3, 2), 44);
    }

    #[test]
    fn default_architecture_ledger_matches_hand_counts() {
        let model = default_model();
        let chain = ExitChain::full(&DEFAULT_CHAIN_ORDER);
        let ledger = flops_of_model(&model, &chain);

        // Hand-computed from dense = 2io+o, relu = o.
        // MV input 48, widths [64,64,32,32]:
        assert_eq!(ledger.blocks[0], [6272, 8320, 4160, 2112]);
        assert_eq!(ledger.fcs[0], 650);
        assert_eq!(ledger.ics[0], [4810, 4810, 1386]);
        // R input 192, same widths: only block 1 differs from MV.
        assert_eq!(ledger.blocks[1], [24704, 8320, 4160, 2112]);
        assert_eq!(ledger.fcs[1], 650);
        assert_eq!(ledger.ics[1], [4810, 4810, 1386]);
        // I-frame input 192, widths [128,96,64,64]:
        assert_eq!(ledger.blocks[2], [49408, 24768, 12416, 8320]);
        assert_eq!(ledger.fcs[2], 1290);
        assert_eq!(ledger.ics[2], [17802, 10282, 4810]);

        // Cumulative along R→MV→I chain; block work shared per modality.
        let r_chain: u64 = 24704 + 4810;
        assert_eq!(ledger.cumulative[0], r_chain);
        assert_eq!(ledger.cumulative[1], r_chain + 8320 + 4810);
        let full_r = 24704 + 8320 + 4160 + 2112 + 4810 + 4810 + 1386 + 650;
        assert_eq!(ledger.cumulative[3], full_r);
        let full_mv = 6272 + 8320 + 4160 + 2112 + 4810 + 4810 + 1386 + 650;
        let full_i = 49408 + 24768 + 12416 + 8320 + 17802 + 10282 + 4810 + 1290;
        assert_eq!(ledger.total(), full_r + full_mv + full_i);

        // Strict monotonicity.
        for w in ledger.cumulative.windows(2) {
            assert!(w[0] < w[1]);
        }
    }

    #[test]
    fn chain_rejects_duplicates_and_empty() {
        assert!(matches!(ExitChain::new(vec![]), Err(CostError::EmptyChain)));
        let e = ExitId {
            modality: Modality::R,
            kind: ExitKind::Ic(1),
        };
        assert!(matches!(
            ExitChain::new(vec![e, e]),
            Err(CostError::DuplicateExit(_))
        ));
    }

    #[test]
    fn full_chain_has_twelve_unique_exits() {
        let chain = ExitChain::full(&DEFAULT_CHAIN_ORDER);
        assert_eq!(chain.len(), 12);
        let unique: std::collections::HashSet<_> = chain.exits().iter().collect();
        assert_eq!(unique.len(), 12);
        assert_eq!(
            chain.exits()[0],
            ExitId {
                modality: Modality::R,
                kind: ExitKind::Ic(1)
            }
        );
        assert_eq!(
            chain.exits()[11],
            ExitId {
                modality: Modality::Iframe,
                kind: ExitKind::Fc
            }
        );
    }

    #[test]
    fn pareto_single_point_is_itself() {
        let p = TradeoffPoint {
            tau: 0.5,
            accuracy: 0.8,
            mean_flops: 100.0,
            exit_histogram: vec![],
        };
        assert_eq!(pareto_front(&[p.clone()]), vec![p]);
    }

    #[test]
    fn pareto_drops_dominated_point() {
        let a = TradeoffPoint {
            tau: 0.1,
            accuracy: 0.9,
            mean_flops: 50.0,
            exit_histogram: vec![],
        };
        let b = TradeoffPoint {
            tau: 0.2,
            accuracy: 0.8,
            mean_flops: 80.0,
            exit_histogram: vec![],
        };
        assert_eq!(pareto_front(&[b, a.clone()]), vec![a]);
    }

    #[test]
    fn pareto_matches_quadratic_dominance_oracle() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        let points: Vec<TradeoffPoint> = (0..100)
            .map(|i| TradeoffPoint {
                tau: i as f64,
                accuracy: (rng.gen::<f64>() * 10.0).round() / 10.0,
                mean_flops: (rng.gen::<f64>() * 10.0).round() * 10.0,
                exit_histogram: vec![],
            })
            .collect();
        let front = pareto_front(&points);

        let dominated = |p: &TradeoffPoint| {
            points.iter().any(|q| {
                q.accuracy >= p.accuracy
                    && q.mean_flops <= p.mean_flops
                    && (q.accuracy > p.accuracy || q.mean_flops < p.mean_flops)
            })
        };
        for p in &points {
            let in_front = front.iter().any(|f| f.tau == p.tau);
            assert_eq!(in_front, !dominated(p), "tau {}", p.tau);
        }
        // Front sorted by FLOPs and mutually non-dominating.
        let dominates = |a: &TradeoffPoint, b: &TradeoffPoint| {
            a.accuracy >= b.accuracy
                && a.mean_flops <= b.mean_flops
                && (a.accuracy > b.accuracy || a.mean_flops < b.mean_flops)
        };
        for w in front.windows(2) {
            assert!(w[0].mean_flops <= w[1].mean_flops);
            assert!(!dominates(&w[0], &w[1]) && !dominates(&w[1], &w[0]));
        }
    }

    fn stream(name: &str, gop: u64, i: u64, mv: u64, r: u64) -> StreamSpec {
        StreamSpec {
            name: name.into(),
            gop_frames: gop,
            iframes_required: i,
            mv_required: mv,
            r_required: r,
            iframe_bytes: 20_000,
            mv_bytes: 800,
            r_bytes: 4_000,
        }
    }

    #[test]
    fn latency_ratios_follow_iframe_counts() {
        let ours = stream("ours", 12, 1, 1, 2);
        let mimo = stream("mimo", 12, 8, 8, 8);
        let threeseg = stream("threeseg", 12, 3, 3, 3);
        assert_eq!(relative_latency(&mimo, &ours), 8.0);
        assert_eq!(relative_latency(&threeseg, &ours), 3.0);
        assert_eq!(relative_latency(&ours, &ours), 1.0);
    }

    #[test]
    fn latency_is_multiplicative() {
        let a = stream("a", 12, 6, 1, 1);
        let b = stream("b", 12, 3, 1, 1);
        let c = stream("c", 12, 2, 1, 1);
        let lhs = relative_latency(&a, &c);
        let rhs = relative_latency(&a, &b) * relative_latency(&b, &c);
        assert!((lhs - rhs).abs() < 1e-15);
    }

    #[test]
    fn bandwidth_identity_and_scale_invariance() {
        let ours = stream("ours", 12, 1, 1, 2);
        assert_eq!(bandwidth_ratio(&ours, &ours), 1.0);

        let mimo = stream("mimo", 12, 8, 8, 8);
        let base = bandwidth_ratio(&mimo, &ours);
        let double = |mut s: StreamSpec| {
            s.iframe_bytes *= 2;
            s.mv_bytes *= 2;
            s.r_bytes *= 2;
            s
        };
        let scaled = bandwidth_ratio(&double(mimo.clone()), &double(ours.clone()));
        assert!((base - scaled).abs() < 1e-12);
    }

    #[test]
    fn bandwidth_fixture_matches_hand_arithmetic() {
        let ours = stream("ours", 12, 1, 1, 2);
        let other = stream("other", 12, 2, 4, 6);
        // bytes(other) = 2·20000 + 4·800 + 6·4000 = 67200
        // bytes(ours)  = 1·20000 + 1·800 + 2·4000 = 28800
        // latency ratio = 2; bandwidth = (67200/28800)/2 = 1.166666...
        assert_eq!(other.total_bytes(), 67_200);
        assert_eq!(ours.total_bytes(), 28_800);
        let expect = (67_200.0 / 28_800.0) / 2.0;
        assert!((bandwidth_ratio(&other, &ours) - expect).abs() < 1e-15);
    }

    #[test]
    fn report_flags_model_dependence_and_finds_reference() {
        let specs = vec![stream("ours", 12, 1, 1, 2), stream("mimo", 12, 8, 8, 8)];
        let report = bandwidth_report(&specs, "ours").unwrap();
        assert!(report.model_dependent);
        assert_eq!(report.rows.len(), 2);
        assert!(bandwidth_report(&specs, "nope").is_err());
    }

    #[test]
    fn invalid_stream_specs_are_rejected() {
        let mut s = stream("bad", 12, 1, 1, 1);
        s.iframe_bytes = 10; // smaller than mv bytes
        assert!(s.validate().is_err());
        let mut z = stream("zero", 12, 0, 1, 1);
        z.iframes_required = 0;
        assert!(z.validate().is_err());
    }
}
