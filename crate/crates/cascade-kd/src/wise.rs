//! Weighted inference with a scaled ensemble: per-exit scaling factors β
//! fitted by minimizing cross entropy of the combined prediction over the
//! training set, and a thresholded sequential early-exit engine that
//! reuses every earlier exit's prediction through those weights.
//!
//! The fitted objective is bounded by constraining β to the probability
//! simplex through a softmax parameterization; scaling all β by a positive
//! constant leaves the renormalized ensemble unchanged, so this loses no
//! behavior.

use std::fs;
use std::path::Path;

use crate::cost::{flops_of_model, CostError, ExitChain, FlopLedger};
use crate::data::{Dataset, Modality, ModalitySample};
use crate::distill::{modality_index, FeatureCache, TrainError};
use crate::model::{CascadeModel, ExitId, ExitKind, ModalityNet};
use crate::numcore::{clamped_neg_log, softmax_eval, Tensor};

/// Threshold above any reachable confidence; policies with this τ never
/// exit early.
pub const TAU_NEVER_EXIT: f64 = 1.01;

#[derive(Debug, thiserror::Error)]
pub enum WiseError {
    #[error("scaling factors must not all be zero")]
    AllZeroBeta,
    #[error("expected {expected} scaling factors at position {position}, got {got}")]
    BetaLength {
        position: usize,
        expected: usize,
        got: usize,
    },
    #[error("ensemble loss became non-finite while fitting position {position}")]
    NonFiniteLoss { position: usize },
    #[error("cannot evaluate a policy on an empty sample set")]
    EmptyEvalSet,
    #[error("weights table covers {got} positions, chain has {expected}")]
    WeightsChainMismatch { expected: usize, got: usize },
    #[error("target mean FLOPs {target} outside achievable range [{min}, {max}]")]
    UnattainableTarget { target: f64, min: f64, max: f64 },
    #[error("policy file parse error at line {line}: {message}")]
    PolicyParse { line: usize, message: String },
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Num(#[from] crate::numcore::NumError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Triangular table of scaling factors: row L holds β^L with one entry per
/// chain position 1..=L. Fitted rows sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct WiseWeights {
    pub per_position: Vec<Vec<f64>>,
}

impl WiseWeights {
    pub fn uniform(chain_len: usize) -> Self {
        Self {
            per_position: (1..=chain_len)
                .map(|l| vec![1.0 / l as f64; l])
                .collect(),
        }
    }

    pub fn beta(&self, position: usize) -> &[f64] {
        &self.per_position[position - 1]
    }

    pub fn validate(&self, chain_len: usize) -> Result<(), WiseError> {
        if self.per_position.len() != chain_len {
            return Err(WiseError::WeightsChainMismatch {
                expected: chain_len,
                got: self.per_position.len(),
            });
        }
        for (l, row) in self.per_position.iter().enumerate() {
            if row.len() != l + 1 {
                return Err(WiseError::BetaLength {
                    position: l + 1,
                    expected: l + 1,
                    got: row.len(),
                });
            }
            if row.iter().any(|&b| b < 0.0) || row.iter().all(|&b| b == 0.0) {
                return Err(WiseError::AllZeroBeta);
            }
        }
        Ok(())
    }
}

/// How earlier exits contribute at each position.
#[derive(Debug, Clone, PartialEq)]
pub enum PolicyWeights {
    /// Only the current exit's prediction is used.
    NoLateral,
    /// Equal weight on every evaluated exit.
    Uniform,
    /// Fitted scaling factors.
    Wise(WiseWeights),
}

impl PolicyWeights {
    pub fn tag(&self) -> &'static str {
        match self {
            PolicyWeights::NoLateral => "none",
            PolicyWeights::Uniform => "uniform",
            PolicyWeights::Wise(_) => "wise",
        }
    }
}

/// Exit chain + lateral weighting + confidence threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct ExitPolicy {
    pub chain: ExitChain,
    pub weights: PolicyWeights,
    pub tau: f64,
}

impl ExitPolicy {
    pub fn new(chain: ExitChain, weights: PolicyWeights, tau: f64) -> Result<Self, WiseError> {
        if let PolicyWeights::Wise(w) = &weights {
            w.validate(chain.len())?;
        }
        Ok(Self {
            chain,
            weights,
            tau,
        })
    }

    pub fn with_tau(&self, tau: f64) -> Self {
        Self {
            tau,
            ..self.clone()
        }
    }
}

/// Per-sample inference record.
#[derive(Debug, Clone, PartialEq)]
pub struct ExitTrace {
    /// 1-based chain position where classification stopped.
    pub exit_position: usize,
    /// Ensemble confidence at the exit.
    pub confidence: f64,
    pub predicted: usize,
    /// Cumulative FLOPs spent on this sample.
    pub flops: u64,
}

/// β-weighted mixture of softmaxed rows, renormalized; the confidence is
/// the maximum entry of the renormalized distribution.
pub fn ensemble_combine(rows: &[&[f64]], beta: &[f64]) -> Result<(Vec<f64>, f64), WiseError> {
    if beta.len() != rows.len() {
        return Err(WiseError::BetaLength {
            position: rows.len(),
            expected: rows.len(),
            got: beta.len(),
        });
    }
    if beta.iter().all(|&b| b == 0.0) {
        return Err(WiseError::AllZeroBeta);
    }
    let k = rows[0].len();
    let mut combined = vec![0.0; k];
    for (row, &b) in rows.iter().zip(beta) {
        for (c, &p) in combined.iter_mut().zip(*row) {
            *c += b * p;
        }
    }
    let total: f64 = combined.iter().sum();
    for c in combined.iter_mut() {
        *c /= total;
    }
    let confidence = combined.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok((combined, confidence))
}

/// Cached softmax outputs at every chain position over a sample set, in
/// chain order. Row i of entry L is the distribution exit L produces for
/// sample i.
pub struct ExitProbs {
    pub per_position: Vec<Tensor>,
    pub labels: Vec<usize>,
}

pub fn cache_exit_probs(
    model: &CascadeModel,
    chain: &ExitChain,
    dataset: &Dataset,
    indices: &[usize],
) -> Result<ExitProbs, WiseError> {
    if indices.is_empty() {
        return Err(WiseError::EmptyEvalSet);
    }
    let refs = [&model.nets[0], &model.nets[1], &model.nets[2]];
    let cache = FeatureCache::build(&refs, dataset, indices)?;
    let mut per_position = Vec::with_capacity(chain.len());
    for exit in chain.exits() {
        let mi = modality_index(exit.modality);
        let logits = match exit.kind {
            ExitKind::Ic(attach) => {
                let ic = &model.nets[mi].ics[attach - 1];
                ic.forward(&cache.taps[mi][attach - 1])?
            }
            ExitKind::Fc => cache.fc_logits[mi].clone(),
        };
        per_position.push(softmax_eval(&logits));
    }
    Ok(ExitProbs {
        per_position,
        labels: cache.labels,
    })
}

/// Fit diagnostics per chain position.
#[derive(Debug, Clone)]
pub struct FitReport {
    pub fitted_loss: Vec<f64>,
    pub uniform_loss: Vec<f64>,
    pub iterations: Vec<usize>,
    pub clamp_events: usize,
}

fn ensemble_loss_and_grad(
    true_probs: &[Vec<f64>],
    beta: &[f64],
    grad_beta: Option<&mut [f64]>,
) -> (f64, usize) {
    let n = true_probs[0].len();
    let mut loss = 0.0;
    let mut clamps = 0;
    let mut grads = grad_beta;
    if let Some(g) = grads.as_deref_mut() {
        g.fill(0.0);
    }
    for i in 0..n {
        let q: f64 = true_probs
            .iter()
            .zip(beta)
            .map(|(p, &b)| b * p[i])
            .sum();
        let (nl, clamped) = clamped_neg_log(q);
        loss += nl;
        clamps += clamped;
        if let Some(g) = grads.as_deref_mut() {
            if clamped == 0 {
                for (gj, p) in g.iter_mut().zip(true_probs) {
                    *gj -= p[i] / q;
                }
            }
        }
    }
    loss /= n as f64;
    if let Some(g) = grads.as_deref_mut() {
        for gj in g.iter_mut() {
            *gj /= n as f64;
        }
    }
    (loss, clamps)
}

fn softmax_vec(theta: &[f64]) -> Vec<f64> {
    let max = theta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = theta.iter().map(|&t| (t - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Fits β^L for every chain position independently: gradient descent with
/// backtracking on unconstrained θ with β = softmax(θ), initialized at
/// uniform, run until the θ-gradient norm drops below 1e-8 or 5000
/// iterations. Backtracking only accepts improving steps, so the fitted
/// loss never exceeds the uniform-β loss.
pub fn fit_wise(probs: &ExitProbs) -> Result<(WiseWeights, FitReport), WiseError> {
    let chain_len = probs.per_position.len();
    let n = probs.labels.len();
    // True-class probability per position per sample.
    let true_probs: Vec<Vec<f64>> = probs
        .per_position
        .iter()
        .map(|t| {
            (0..n)
                .map(|i| t.row(i)[probs.labels[i]])
                .collect::<Vec<f64>>()
        })
        .collect();

    let mut per_position = Vec::with_capacity(chain_len);
    let mut report = FitReport {
        fitted_loss: Vec::with_capacity(chain_len),
        uniform_loss: Vec::with_capacity(chain_len),
        iterations: Vec::with_capacity(chain_len),
        clamp_events: 0,
    };

    for l in 1..=chain_len {
        let slice = &true_probs[..l];
        let mut theta = vec![0.0; l];
        let mut beta = softmax_vec(&theta);
        let mut grad_beta = vec![0.0; l];
        let (mut loss, clamps) = ensemble_loss_and_grad(slice, &beta, Some(&mut grad_beta));
        report.clamp_events += clamps;
        if !loss.is_finite() {
            return Err(WiseError::NonFiniteLoss { position: l });
        }
        report.uniform_loss.push(loss);

        let mut iterations = 0;
        if l > 1 {
            let mut step = 1.0;
            for _ in 0..5000 {
                // Chain rule through the softmax: dL/dθ_l = β_l(g_l − g·β).
                let inner: f64 = grad_beta.iter().zip(&beta).map(|(g, b)| g * b).sum();
                let grad_theta: Vec<f64> = grad_beta
                    .iter()
                    .zip(&beta)
                    .map(|(g, b)| b * (g - inner))
                    .collect();
                let norm = grad_theta.iter().map(|g| g * g).sum::<f64>().sqrt();
                if norm < 1e-8 {
                    break;
                }
                let mut accepted = false;
                while step > 1e-16 {
                    let trial: Vec<f64> = theta
                        .iter()
                        .zip(&grad_theta)
                        .map(|(t, g)| t - step * g)
                        .collect();
                    let trial_beta = softmax_vec(&trial);
                    let (trial_loss, clamps) =
                        ensemble_loss_and_grad(slice, &trial_beta, Some(&mut grad_beta));
                    report.clamp_events += clamps;
                    if !trial_loss.is_finite() {
                        return Err(WiseError::NonFiniteLoss { position: l });
                    }
                    if trial_loss <= loss {
                        theta = trial;
                        beta = trial_beta;
                        loss = trial_loss;
                        step = (step * 1.5).min(1e3);
                        accepted = true;
                        break;
                    }
                    step *= 0.5;
                }
                iterations += 1;
                if !accepted {
                    break;
                }
            }
        }
        report.fitted_loss.push(loss);
        report.iterations.push(iterations);
        per_position.push(beta);
    }

    Ok((WiseWeights { per_position }, report))
}

/// Early-exit walker bound to one model and policy; the cumulative FLOP
/// ledger is computed once at construction.
pub struct ExitEngine<'a> {
    model: &'a CascadeModel,
    policy: &'a ExitPolicy,
    pub ledger: FlopLedger,
}

/// Aggregate results of running a policy over a sample set.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyEval {
    pub accuracy: f64,
    pub mean_flops: f64,
    /// Count of samples stopping at each 1-based chain position.
    pub exit_histogram: Vec<usize>,
    /// Total number of exit-probability computations across the set; each
    /// visited exit is evaluated exactly once per sample.
    pub total_exit_evals: usize,
}

impl<'a> ExitEngine<'a> {
    pub fn new(model: &'a CascadeModel, policy: &'a ExitPolicy) -> Result<Self, WiseError> {
        if let PolicyWeights::Wise(w) = &policy.weights {
            w.validate(policy.chain.len())?;
        }
        let ledger = flops_of_model(model, &policy.chain);
        Ok(Self {
            model,
            policy,
            ledger,
        })
    }

    /// Walks the chain for one sample: at each position the exit's softmax
    /// is computed once, combined with the cached earlier predictions per
    /// the policy, and classification stops when the ensemble confidence
    /// exceeds τ (or at the last exit unconditionally).
    pub fn infer(&self, sample: &ModalitySample) -> Result<(usize, ExitTrace), WiseError> {
        let mut walker = TapWalker::new(self.model);
        let chain_len = self.policy.chain.len();
        let mut cached: Vec<Vec<f64>> = Vec::with_capacity(chain_len);
        for (pos, exit) in self.policy.chain.exits().iter().enumerate() {
            let position = pos + 1;
            let probs = walker.exit_probs(sample, *exit)?;
            cached.push(probs);
            let (combined, confidence) = match &self.policy.weights {
                PolicyWeights::NoLateral => {
                    ensemble_combine(&[cached[position - 1].as_slice()], &[1.0])?
                }
                PolicyWeights::Uniform => {
                    let rows: Vec<&[f64]> = cached.iter().map(|r| r.as_slice()).collect();
                    ensemble_combine(&rows, &vec![1.0; position])?
                }
                PolicyWeights::Wise(w) => {
                    let rows: Vec<&[f64]> = cached.iter().map(|r| r.as_slice()).collect();
                    ensemble_combine(&rows, w.beta(position))?
                }
            };
            if confidence > self.policy.tau || position == chain_len {
                let predicted = combined
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(i, _)| i)
                    .unwrap();
                return Ok((
                    predicted,
                    ExitTrace {
                        exit_position: position,
                        confidence,
                        predicted,
                        flops: self.ledger.at_position(position),
                    },
                ));
            }
        }
        unreachable!("the last chain position always exits");
    }

    pub fn evaluate(&self, dataset: &Dataset, indices: &[usize]) -> Result<PolicyEval, WiseError> {
        if indices.is_empty() {
            return Err(WiseError::EmptyEvalSet);
        }
        let mut hits = 0usize;
        let mut flops_total: u128 = 0;
        let mut histogram = vec![0usize; self.policy.chain.len()];
        let mut evals = 0usize;
        for &i in indices {
            let sample = &dataset.samples[i];
            let (pred, trace) = self.infer(sample)?;
            if pred == sample.label {
                hits += 1;
            }
            flops_total += u128::from(trace.flops);
            histogram[trace.exit_position - 1] += 1;
            evals += trace.exit_position;
        }
        Ok(PolicyEval {
            accuracy: hits as f64 / indices.len() as f64,
            mean_flops: flops_total as f64 / indices.len() as f64,
            exit_histogram: histogram,
            total_exit_evals: evals,
        })
    }
}

/// Lazily advances one sample through each backbone, keeping computed tap
/// activations so shared blocks run once.
struct TapWalker<'a> {
    model: &'a CascadeModel,
    taps: [Vec<Tensor>; 3],
    fc_logits: [Option<Tensor>; 3],
}

impl<'a> TapWalker<'a> {
    fn new(model: &'a CascadeModel) -> Self {
        Self {
            model,
            taps: [Vec::new(), Vec::new(), Vec::new()],
            fc_logits: [None, None, None],
        }
    }

    fn advance(
        &mut self,
        sample: &ModalitySample,
        modality: Modality,
        upto: usize,
    ) -> Result<(), WiseError> {
        let mi = modality_index(modality);
        let net: &ModalityNet = &self.model.nets[mi];
        if self.taps[mi].is_empty() {
            let x = Tensor::from_rows(&[sample.features(modality)]);
            self.taps[mi].push(crate::numcore::relu_eval(&crate::numcore::dense_eval(
                &x,
                &net.backbone.blocks[0].w,
                &net.backbone.blocks[0].b,
            )?));
        }
        while self.taps[mi].len() < upto {
            let depth = self.taps[mi].len();
            let prev = &self.taps[mi][depth - 1];
            let block = &net.backbone.blocks[depth];
            let next = crate::numcore::relu_eval(&crate::numcore::dense_eval(
                prev, &block.w, &block.b,
            )?);
            self.taps[mi].push(next);
        }
        Ok(())
    }

    fn exit_probs(
        &mut self,
        sample: &ModalitySample,
        exit: ExitId,
    ) -> Result<Vec<f64>, WiseError> {
        let mi = modality_index(exit.modality);
        let needed = exit.kind.blocks_needed();
        self.advance(sample, exit.modality, needed)?;
        let net = &self.model.nets[mi];
        let logits = match exit.kind {
            ExitKind::Ic(attach) => net.ics[attach - 1].forward(&self.taps[mi][attach - 1])?,
            ExitKind::Fc => {
                if self.fc_logits[mi].is_none() {
                    let out = crate::numcore::dense_eval(
                        &self.taps[mi][needed - 1],
                        &net.backbone.final_classifier.w,
                        &net.backbone.final_classifier.b,
                    )?;
                    self.fc_logits[mi] = Some(out);
                }
                self.fc_logits[mi].clone().unwrap()
            }
        };
        Ok(softmax_eval(&logits).row(0).to_vec())
    }
}

/// Bisection on τ toward a target mean FLOPs. Mean cost is monotone
/// non-decreasing in τ, so bisection converges; returns the best (τ,
/// achieved cost) once within 5% of the target or after 40 iterations.
pub fn iso_compute_threshold_search(
    model: &CascadeModel,
    chain: &ExitChain,
    weights: &PolicyWeights,
    dataset: &Dataset,
    indices: &[usize],
    target_mean_flops: f64,
) -> Result<(f64, f64), WiseError> {
    let eval_at = |tau: f64| -> Result<f64, WiseError> {
        let policy = ExitPolicy::new(chain.clone(), weights.clone(), tau)?;
        let engine = ExitEngine::new(model, &policy)?;
        Ok(engine.evaluate(dataset, indices)?.mean_flops)
    };
    let min_cost = eval_at(0.0)?;
    let max_cost = eval_at(TAU_NEVER_EXIT)?;
    let tolerance = 0.05 * target_mean_flops;
    if target_mean_flops < min_cost - tolerance || target_mean_flops > max_cost + tolerance {
        return Err(WiseError::UnattainableTarget {
            target: target_mean_flops,
            min: min_cost,
            max: max_cost,
        });
    }
    if target_mean_flops >= max_cost {
        return Ok((TAU_NEVER_EXIT, max_cost));
    }
    if target_mean_flops <= min_cost {
        return Ok((0.0, min_cost));
    }

    let (mut lo, mut hi) = (0.0f64, TAU_NEVER_EXIT);
    let mut best = if (min_cost - target_mean_flops).abs() < (max_cost - target_mean_flops).abs() {
        (0.0, min_cost)
    } else {
        (TAU_NEVER_EXIT, max_cost)
    };
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        let cost = eval_at(mid)?;
        if (cost - target_mean_flops).abs() < (best.1 - target_mean_flops).abs() {
            best = (mid, cost);
        }
        if (cost - target_mean_flops).abs() <= tolerance {
            return Ok(best);
        }
        if cost < target_mean_flops {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(best)
}

const POLICY_HEADER: &str = "CASCADE-KD-POLICY v1";

/// Text serialization: header, chain, τ, weighting mode, and for fitted
/// weights one `beta` line per position with 17-significant-digit values.
pub fn save_policy(policy: &ExitPolicy, path: &Path) -> Result<(), WiseError> {
    let mut out = String::new();
    out.push_str(POLICY_HEADER);
    out.push('\n');
    let chain_line: Vec<String> = policy.chain.exits().iter().map(|e| e.to_string()).collect();
    out.push_str(&format!("chain {}\n", chain_line.join(" ")));
    out.push_str(&format!("tau {:.17e}\n", policy.tau));
    out.push_str(&format!("weights {}\n", policy.weights.tag()));
    if let PolicyWeights::Wise(w) = &policy.weights {
        for (l, row) in w.per_position.iter().enumerate() {
            let vals: Vec<String> = row.iter().map(|v| format!("{v:.17e}")).collect();
            out.push_str(&format!("beta {} {}\n", l + 1, vals.join(" ")));
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_policy(path: &Path) -> Result<ExitPolicy, WiseError> {
    let text = fs::read_to_string(path)?;
    let err = |line: usize, message: String| WiseError::PolicyParse { line, message };
    let mut lines = text.lines().enumerate();

    let (_, header) = lines
        .next()
        .ok_or_else(|| err(1, "empty policy file".into()))?;
    if header.trim() != POLICY_HEADER {
        return Err(err(1, format!("expected header `{POLICY_HEADER}`")));
    }

    let mut chain: Option<ExitChain> = None;
    let mut tau: Option<f64> = None;
    let mut mode: Option<String> = None;
    let mut betas: Vec<(usize, Vec<f64>)> = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
        match key {
            "chain" => {
                let exits: Result<Vec<ExitId>, String> =
                    rest.split_whitespace().map(|t| t.parse()).collect();
                let exits = exits.map_err(|e| err(line_no, e))?;
                chain = Some(ExitChain::new(exits).map_err(|e| err(line_no, e.to_string()))?);
            }
            "tau" => {
                tau = Some(
                    rest.trim()
                        .parse()
                        .map_err(|e| err(line_no, format!("bad tau: {e}")))?,
                );
            }
            "weights" => mode = Some(rest.trim().to_string()),
            "beta" => {
                let mut parts = rest.split_whitespace();
                let pos: usize = parts
                    .next()
                    .and_then(|p| p.parse().ok())
                    .ok_or_else(|| err(line_no, "beta line needs a position".into()))?;
                let vals: Result<Vec<f64>, _> = parts.map(|v| v.parse::<f64>()).collect();
                let vals = vals.map_err(|e| err(line_no, format!("bad beta value: {e}")))?;
                betas.push((pos, vals));
            }
            other => return Err(err(line_no, format!("unknown key `{other}`"))),
        }
    }

    let chain = chain.ok_or_else(|| err(0, "missing chain line".into()))?;
    let tau = tau.ok_or_else(|| err(0, "missing tau line".into()))?;
    let mode = mode.ok_or_else(|| err(0, "missing weights line".into()))?;
    let weights = match mode.as_str() {
        "none" => PolicyWeights::NoLateral,
        "uniform" => PolicyWeights::Uniform,
        "wise" => {
            betas.sort_by_key(|(pos, _)| *pos);
            let rows: Vec<Vec<f64>> = betas.into_iter().map(|(_, v)| v).collect();
            let w = WiseWeights { per_position: rows };
            w.validate(chain.len())?;
            PolicyWeights::Wise(w)
        }
        other => return Err(err(0, format!("unknown weights mode `{other}`"))),
    };
    ExitPolicy::new(chain, weights, tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::DEFAULT_CHAIN_ORDER;
    use crate::data::{generate, make_splits, GenSpec};
    use crate::distill::{train_backbone, train_ics, BackboneTrainConfig, IcTrainConfig, PkdSchedule};
    use crate::model::NUM_BLOCKS;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn combine_single_row_is_identity() {
        let row = [0.3, 0.7];
        let (combined, conf) = ensemble_combine(&[&row], &[1.0]).unwrap();
        assert_eq!(combined, vec![0.3, 0.7]);
        assert_eq!(conf, 0.7);
    }

    #[test]
    fn combine_two_rows_forced_arithmetic() {
        let a = [0.6, 0.4];
        let b = [0.2, 0.8];
        let (combined, conf) = ensemble_combine(&[&a, &b], &[1.0, 1.0]).unwrap();
        assert!((combined[0] - 0.4).abs() < 1e-15);
        assert!((combined[1] - 0.6).abs() < 1e-15);
        assert!((conf - 0.6).abs() < 1e-15);
    }

    #[test]
    fn combine_matches_scalar_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows: Vec<Vec<f64>> = (0..3)
            .map(|_| {
                let raw: Vec<f64> = (0..4).map(|_| rng.gen::<f64>() + 0.01).collect();
                let z: f64 = raw.iter().sum();
                raw.into_iter().map(|v| v / z).collect()
            })
            .collect();
        let beta = [0.5, 0.2, 0.3];
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let (combined, conf) = ensemble_combine(&refs, &beta).unwrap();

        let mut expect = vec![0.0; 4];
        for (j, e) in expect.iter_mut().enumerate() {
            for (l, row) in rows.iter().enumerate() {
                *e += beta[l] * row[j];
            }
        }
        let z: f64 = expect.iter().sum();
        for (c, e) in combined.iter().zip(&expect) {
            assert!((c - e / z).abs() < 1e-12);
        }
        let max = expect.iter().map(|e| e / z).fold(f64::NEG_INFINITY, f64::max);
        assert!((conf - max).abs() < 1e-12);
    }

    #[test]
    fn combine_rejects_all_zero_beta() {
        let row = [1.0, 0.0];
        assert!(matches!(
            ensemble_combine(&[&row], &[0.0]),
            Err(WiseError::AllZeroBeta)
        ));
    }

    #[test]
    fn argmax_invariant_under_beta_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let rows: Vec<Vec<f64>> = (0..3)
                .map(|_| {
                    let raw: Vec<f64> = (0..5).map(|_| rng.gen::<f64>() + 0.01).collect();
                    let z: f64 = raw.iter().sum();
                    raw.into_iter().map(|v| v / z).collect()
                })
                .collect();
            let beta: Vec<f64> = (0..3).map(|_| rng.gen::<f64>() + 0.01).collect();
            let scale = rng.gen::<f64>() * 10.0 + 0.1;
            let scaled: Vec<f64> = beta.iter().map(|b| b * scale).collect();
            let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
            let (c1, conf1) = ensemble_combine(&refs, &beta).unwrap();
            let (c2, conf2) = ensemble_combine(&refs, &scaled).unwrap();
            for (a, b) in c1.iter().zip(&c2) {
                assert!((a - b).abs() < 1e-12);
            }
            assert!((conf1 - conf2).abs() < 1e-12);
        }
    }

    fn probs_from_true(true_probs: &[Vec<f64>], k: usize) -> ExitProbs {
        // Build [n,k] tensors whose class-0 column carries the intended
        // true-class probability; labels are all zero.
        let n = true_probs[0].len();
        let per_position = true_probs
            .iter()
            .map(|col| {
                let mut data = Vec::with_capacity(n * k);
                for &p in col {
                    data.push(p);
                    for _ in 1..k {
                        data.push((1.0 - p) / (k - 1) as f64);
                    }
                }
                Tensor::new(vec![n, k], data).unwrap()
            })
            .collect();
        ExitProbs {
            per_position,
            labels: vec![0; n],
        }
    }

    #[test]
    fn fit_single_position_is_trivial() {
        let probs = probs_from_true(&[vec![0.4; 10]], 3);
        let (w, report) = fit_wise(&probs).unwrap();
        assert_eq!(w.per_position, vec![vec![1.0]]);
        assert_eq!(report.iterations, vec![0]);
    }

    #[test]
    fn fit_dominant_exit_takes_nearly_all_weight() {
        let probs = probs_from_true(&[vec![0.9; 40], vec![0.5; 40]], 3);
        let (w, report) = fit_wise(&probs).unwrap();
        let beta = w.beta(2);
        assert!(beta[0] >= 0.99, "beta {beta:?}");
        let expect = -(0.9f64.ln());
        assert!((report.fitted_loss[1] - expect).abs() < 1e-3);

        // Grid-search oracle at 0.001 resolution over β₁.
        let mut best = f64::INFINITY;
        for step in 0..=1000 {
            let b1 = step as f64 / 1000.0;
            let q = b1 * 0.9 + (1.0 - b1) * 0.5;
            let loss = -(q.ln());
            best = best.min(loss);
        }
        assert!((report.fitted_loss[1] - best).abs() < 1e-3);
    }

    #[test]
    fn fit_matches_grid_oracle_on_random_two_exit_fixtures() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for case in 0..10 {
            let n = 50;
            let p1: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 0.98 + 0.01).collect();
            let p2: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 0.98 + 0.01).collect();
            let probs = probs_from_true(&[p1.clone(), p2.clone()], 4);
            let (w, report) = fit_wise(&probs).unwrap();

            let mut oracle = f64::INFINITY;
            for step in 0..=1000 {
                let b1 = step as f64 / 1000.0;
                let loss: f64 = p1
                    .iter()
                    .zip(&p2)
                    .map(|(&a, &b)| -((b1 * a + (1.0 - b1) * b).ln()))
                    .sum::<f64>()
                    / n as f64;
                oracle = oracle.min(loss);
            }
            assert!(
                (report.fitted_loss[1] - oracle).abs() < 1e-3,
                "case {case}: fitted {} vs oracle {oracle}",
                report.fitted_loss[1]
            );
            assert!(report.fitted_loss[1] <= report.uniform_loss[1] + 1e-15);
            let beta = w.beta(2);
            assert!((beta.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    fn trained_toy_model() -> (CascadeModel, Dataset, Vec<usize>, Vec<usize>) {
        let spec = GenSpec {
            num_classes: 4,
            samples_per_class: 30,
            dim_iframe: 16,
            dim_r: 16,
            block_pool: 4,
            frames_mv: 2,
            frames_r: 2,
            frames_iframe: 2,
            ..GenSpec::default()
        };
        let ds = generate(&spec).unwrap();
        let splits = make_splits(ds.len(), spec.seed).unwrap();
        let (train, test) = (splits[0].train.clone(), splits[0].test.clone());
        let widths: [usize; NUM_BLOCKS] = [16, 16, 8, 8];
        let mut nets = [
            ModalityNet::new(Modality::Mv, spec.feature_dim(Modality::Mv), &widths, 4, 2, 7),
            ModalityNet::new(Modality::R, spec.feature_dim(Modality::R), &widths, 4, 2, 7),
            ModalityNet::new(Modality::Iframe, spec.feature_dim(Modality::Iframe), &widths, 4, 2, 7),
        ];
        let cfg = BackboneTrainConfig {
            epochs: 25,
            milestones: vec![15],
            seed: 3,
            ..BackboneTrainConfig::default()
        };
        for net in nets.iter_mut() {
            let x = ds.features(net.modality(), &train);
            let labels = ds.labels(&train);
            train_backbone(&mut net.backbone, &x, &labels, &cfg).unwrap();
            net.backbone.freeze();
        }
        let mut nets = nets;
        let ic_cfg = IcTrainConfig {
            schedule: PkdSchedule::new(4, 8, 12).unwrap(),
            milestones: vec![4, 8, 12],
            seed: 5,
            ..IcTrainConfig::default()
        };
        train_ics(&mut nets, &ds, &train, &ic_cfg).unwrap();
        (CascadeModel::new(nets), ds, train, test)
    }

    #[test]
    fn tau_zero_exits_at_first_position() {
        let (model, ds, _, test) = trained_toy_model();
        let chain = ExitChain::full(&DEFAULT_CHAIN_ORDER);
        let policy = ExitPolicy::new(chain, PolicyWeights::Uniform, 0.0).unwrap();
        let engine = ExitEngine::new(&model, &policy).unwrap();
        let eval = engine.evaluate(&ds, &test).unwrap();
        assert_eq!(eval.exit_histogram[0], test.len());
        assert_eq!(eval.total_exit_evals, test.len());
        assert_eq!(eval.mean_flops, engine.ledger.at_position(1) as f64);
    }

    #[test]
    fn tau_above_one_never_exits_early() {
        let (model, ds, _, test) = trained_toy_model();
        let chain = ExitChain::full(&DEFAULT_CHAIN_ORDER);
        let policy = ExitPolicy::new(chain.clone(), PolicyWeights::Uniform, TAU_NEVER_EXIT).unwrap();
        let engine = ExitEngine::new(&model, &policy).unwrap();
        let eval = engine.evaluate(&ds, &test).unwrap();
        assert_eq!(*eval.exit_histogram.last().unwrap(), test.len());
        assert_eq!(eval.mean_flops, engine.ledger.total() as f64);

        // Accuracy equals the full ensemble computed straight from caches.
        let probs = cache_exit_probs(&model, &chain, &ds, &test).unwrap();
        let mut hits = 0;
        for i in 0..test.len() {
            let rows: Vec<&[f64]> = probs.per_position.iter().map(|t| t.row(i)).collect();
            let (combined, _) =
                ensemble_combine(&rows, &vec![1.0; rows.len()]).unwrap();
            let pred = combined
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            if pred == probs.labels[i] {
                hits += 1;
            }
        }
        let expect = hits as f64 / test.len() as f64;
        assert!((eval.accuracy - expect).abs() < 1e-12);
    }

    #[test]
    fn exit_positions_match_hand_simulated_walk() {
        let (model, ds, _, test) = trained_toy_model();
        let chain = ExitChain::full(&DEFAULT_CHAIN_ORDER);
        let policy = ExitPolicy::new(chain.clone(), PolicyWeights::Uniform, 0.7).unwrap();
        let engine = ExitEngine::new(&model, &policy).unwrap();

        let probs = cache_exit_probs(&model, &chain, &ds, &test).unwrap();
        for (row_idx, &sample_idx) in test.iter().take(5).enumerate() {
            let (_, trace) = engine.infer(&ds.samples[sample_idx]).unwrap();
            // Independent walk over the cached distributions.
            let mut expect_pos = chain.len();
            for l in 1..=chain.len() {
                let rows: Vec<&[f64]> = probs.per_position[..l]
                    .iter()
                    .map(|t| t.row(row_idx))
                    .collect();
                let (_, conf) = ensemble_combine(&rows, &vec![1.0; l]).unwrap();
                if conf > 0.7 {
                    expect_pos = l;
                    break;
                }
            }
            assert_eq!(trace.exit_position, expect_pos, "sample {sample_idx}");
        }
    }

    #[test]
    fn histogram_sums_to_set_size_and_evals_match_positions() {
        let (model, ds, _, test) = trained_toy_model();
        let chain = ExitChain::full(&DEFAULT_CHAIN_ORDER);
        let policy = ExitPolicy::new(chain, PolicyWeights::Uniform, 0.6).unwrap();
        let engine = ExitEngine::new(&model, &policy).unwrap();
        let eval = engine.evaluate(&ds, &test).unwrap();
        assert_eq!(eval.exit_histogram.iter().sum::<usize>(), test.len());
        let expected_evals: usize = eval
            .exit_histogram
            .iter()
            .enumerate()
            .map(|(i, &count)| (i + 1) * count)
            .sum();
        assert_eq!(eval.total_exit_evals, expected_evals);
    }

    #[test]
    fn mean_flops_monotone_in_tau() {
        let (model, ds, _, test) = trained_toy_model();
        let chain = ExitChain::full(&DEFAULT_CHAIN_ORDER);
        let mut prev = -1.0;
        for step in 0..=20 {
            let tau = step as f64 * TAU_NEVER_EXIT / 20.0;
            let policy = ExitPolicy::new(chain.clone(), PolicyWeights::Uniform, tau).unwrap();
            let engine = ExitEngine::new(&model, &policy).unwrap();
            let eval = engine.evaluate(&ds, &test).unwrap();
            assert!(
                eval.mean_flops >= prev,
                "cost decreased at tau {tau}: {} < {prev}",
                eval.mean_flops
            );
            prev = eval.mean_flops;
        }
    }

    #[test]
    fn iso_search_hits_trivial_targets() {
        let (model, ds, _, test) = trained_toy_model();
        let chain = ExitChain::full(&DEFAULT_CHAIN_ORDER);
        let weights = PolicyWeights::Uniform;
        let policy = ExitPolicy::new(chain.clone(), weights.clone(), 0.0).unwrap();
        let engine = ExitEngine::new(&model, &policy).unwrap();
        let first_exit_cost = engine.ledger.at_position(1) as f64;
        let full_cost = engine.ledger.total() as f64;

        let (tau, achieved) =
            iso_compute_threshold_search(&model, &chain, &weights, &ds, &test, full_cost).unwrap();
        assert!(tau >= 1.0);
        assert_eq!(achieved, full_cost);

        let (tau, achieved) =
            iso_compute_threshold_search(&model, &chain, &weights, &ds, &test, first_exit_cost)
                .unwrap();
        assert_eq!(tau, 0.0);
        assert_eq!(achieved, first_exit_cost);

        assert!(matches!(
            iso_compute_threshold_search(&model, &chain, &weights, &ds, &test, full_cost * 10.0),
            Err(WiseError::UnattainableTarget { .. })
        ));
    }

    #[test]
    fn iso_search_reaches_interior_target() {
        let (model, ds, _, test) = trained_toy_model();
        let chain = ExitChain::full(&DEFAULT_CHAIN_ORDER);
        let weights = PolicyWeights::Uniform;
        let policy = ExitPolicy::new(chain.clone(), weights.clone(), 0.0).unwrap();
        let engine = ExitEngine::new(&model, &policy).unwrap();
        let target = 0.5 * (engine.ledger.at_position(1) as f64 + engine.ledger.total() as f64);
        let (_, achieved) =
            iso_compute_threshold_search(&model, &chain, &weights, &ds, &test, target).unwrap();
        assert!(
            (achieved - target).abs() <= 0.05 * target,
            "achieved {achieved} vs target {target}"
        );
    }

    #[test]
    fn policy_file_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.wise");
        let chain = ExitChain::full(&DEFAULT_CHAIN_ORDER);
        let mut weights = WiseWeights::uniform(chain.len());
        // Perturb to non-trivial values.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for row in weights.per_position.iter_mut() {
            let raw: Vec<f64> = (0..row.len()).map(|_| rng.gen::<f64>() + 0.01).collect();
            let z: f64 = raw.iter().sum();
            row.copy_from_slice(&raw.iter().map(|v| v / z).collect::<Vec<_>>());
        }
        let policy =
            ExitPolicy::new(chain, PolicyWeights::Wise(weights), 0.724318).unwrap();
        save_policy(&policy, &path).unwrap();
        let loaded = load_policy(&path).unwrap();
        assert_eq!(policy, loaded);
    }

    #[test]
    fn policy_parse_errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.wise");
        fs::write(&path, "CASCADE-KD-POLICY v1\nchain r:ic1\nwhat 3\n").unwrap();
        match load_policy(&path) {
            Err(WiseError::PolicyParse { line: 3, message }) => {
                assert!(message.contains("what"));
            }
            other => panic!("expected parse error on line 3, got {other:?}"),
        }
    }
}
