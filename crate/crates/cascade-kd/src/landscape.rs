//! Loss-surface scans around trained internal classifiers and a scalar
//! flatness score.
//!
//! Two random directions are drawn per scan, rescaled per layer to that
//! layer's parameter norm (so scores are comparable across classifiers of
//! different widths), orthogonalized, and globally unit-normalized. The
//! surface is the loss at θ* + α·d₁ + β·d₂ over an odd n×n grid; the
//! trained parameters are restored bit-exactly afterwards.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, Modality};
use crate::distill::{modality_index, TrainError};
use crate::model::CascadeModel;
use crate::numcore::{cross_entropy_eval, derive_seed};

#[derive(Debug, thiserror::Error)]
pub enum ProbeError {
    #[error("scan radius must be positive, got {0}")]
    BadRadius(f64),
    #[error("grid resolution must be odd and ≥ 3 so the center is a grid point, got {0}")]
    BadResolution(usize),
    #[error("flatness radius {requested} exceeds grid extent {extent}")]
    RadiusExceedsExtent { requested: f64, extent: f64 },
    #[error("internal classifier index {0} out of range 1..=3")]
    SelectorOutOfRange(usize),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}

/// Scanned surface: `losses[ai * n + bi]` is the loss at coordinates
/// (coords[ai], coords[bi]) along (d₁, d₂).
#[derive(Debug, Clone, PartialEq)]
pub struct LandscapeGrid {
    pub radius: f64,
    pub n: usize,
    pub coords: Vec<f64>,
    pub losses: Vec<f64>,
    pub center_loss: f64,
    /// Per-layer direction slices, after normalization.
    pub dir1: Vec<Vec<f64>>,
    pub dir2: Vec<Vec<f64>>,
}

impl LandscapeGrid {
    pub fn loss_at(&self, ai: usize, bi: usize) -> f64 {
        self.losses[ai * self.n + bi]
    }
}

/// Mean loss increase over the disk of the given radius around the trained
/// parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlatnessScore {
    pub radius: f64,
    pub score: f64,
}

fn dot(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(u, v)| u * v).sum::<f64>())
        .sum()
}

fn norm(a: &[Vec<f64>]) -> f64 {
    dot(a, a).sqrt()
}

fn draw_direction(layers: &[Vec<f64>], rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    use rand::Rng;
    layers
        .iter()
        .map(|layer| {
            let raw: Vec<f64> = (0..layer.len())
                .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
                .collect();
            let slice_norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
            let layer_norm = layer.iter().map(|v| v * v).sum::<f64>().sqrt();
            // Filter normalization: match the layer's parameter scale; fall
            // back to a unit slice when the layer is all zeros.
            let target = if layer_norm > 0.0 { layer_norm } else { 1.0 };
            raw.into_iter().map(|v| v * target / slice_norm).collect()
        })
        .collect()
}

/// Generic scan over any parameter container: `get` snapshots the layer
/// slices, `set` writes perturbed values back, `eval` measures the loss.
pub fn scan_landscape_with<M>(
    model: &mut M,
    get: impl Fn(&M) -> Vec<Vec<f64>>,
    set: impl Fn(&mut M, &[Vec<f64>]),
    eval: impl Fn(&M) -> f64,
    radius: f64,
    n: usize,
    seed: u64,
) -> Result<LandscapeGrid, ProbeError> {
    if radius <= 0.0 {
        return Err(ProbeError::BadRadius(radius));
    }
    if n < 3 || n % 2 == 0 {
        return Err(ProbeError::BadResolution(n));
    }

    let center = get(model);
    let mut rng1 = ChaCha8Rng::seed_from_u64(derive_seed(seed, "landscape-dir-1"));
    let mut rng2 = ChaCha8Rng::seed_from_u64(derive_seed(seed, "landscape-dir-2"));
    let mut dir1 = draw_direction(&center, &mut rng1);
    let mut dir2 = draw_direction(&center, &mut rng2);

    // Gram-Schmidt, then global unit normalization.
    let proj = dot(&dir1, &dir2) / dot(&dir1, &dir1);
    for (d2, d1) in dir2.iter_mut().zip(&dir1) {
        for (v2, v1) in d2.iter_mut().zip(d1) {
            *v2 -= proj * v1;
        }
    }
    for dir in [&mut dir1, &mut dir2] {
        let scale = 1.0 / norm(dir);
        for layer in dir.iter_mut() {
            for v in layer.iter_mut() {
                *v *= scale;
            }
        }
    }

    let mid = (n - 1) / 2;
    let step = radius / mid as f64;
    let coords: Vec<f64> = (0..n).map(|i| (i as isize - mid as isize) as f64 * step).collect();

    let mut losses = vec![0.0; n * n];
    let mut perturbed: Vec<Vec<f64>> = center.clone();
    for (ai, &alpha) in coords.iter().enumerate() {
        for (bi, &beta) in coords.iter().enumerate() {
            if alpha == 0.0 && beta == 0.0 {
                set(model, &center);
            } else {
                for (layer, ((c, d1), d2)) in perturbed
                    .iter_mut()
                    .zip(center.iter().zip(&dir1).zip(&dir2))
                {
                    for (p, ((cv, v1), v2)) in
                        layer.iter_mut().zip(c.iter().zip(d1).zip(d2))
                    {
                        *p = cv + alpha * v1 + beta * v2;
                    }
                }
                set(model, &perturbed);
            }
            losses[ai * n + bi] = eval(model);
        }
    }
    set(model, &center);

    let center_loss = losses[mid * n + mid];
    Ok(LandscapeGrid {
        radius,
        n,
        coords,
        losses,
        center_loss,
        dir1,
        dir2,
    })
}

/// Selects one internal classifier, e.g. `mv:2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IcSelector {
    pub modality: Modality,
    pub attach_point: usize,
}

impl std::str::FromStr for IcSelector {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (m, i) = s
            .split_once(':')
            .ok_or_else(|| format!("selector `{s}` must look like mv:2"))?;
        let modality = m.parse()?;
        let attach_point: usize = i
            .parse()
            .map_err(|_| format!("bad classifier index `{i}`"))?;
        Ok(Self {
            modality,
            attach_point,
        })
    }
}

/// Scans the cross-entropy surface of one internal classifier over a fixed
/// evaluation set, perturbing only that classifier's parameters.
pub fn scan_ic_landscape(
    model: &mut CascadeModel,
    selector: IcSelector,
    dataset: &Dataset,
    indices: &[usize],
    radius: f64,
    n: usize,
    seed: u64,
) -> Result<LandscapeGrid, ProbeError> {
    if !(1..=crate::model::NUM_ICS).contains(&selector.attach_point) {
        return Err(ProbeError::SelectorOutOfRange(selector.attach_point));
    }
    if indices.is_empty() {
        return Err(ProbeError::Train(TrainError::EmptyEvalSet));
    }
    let mi = modality_index(selector.modality);
    let x = dataset.features(selector.modality, indices);
    let (taps, _) = model.nets[mi].backbone.forward_with_taps(&x)?;
    let tap = taps[selector.attach_point - 1].clone();
    let labels = dataset.labels(indices);

    let get = |m: &CascadeModel| -> Vec<Vec<f64>> {
        m.nets[mi].ics[selector.attach_point - 1]
            .param_tensors()
            .iter()
            .map(|t| t.data().to_vec())
            .collect()
    };
    let set = |m: &mut CascadeModel, values: &[Vec<f64>]| {
        let ic = &mut m.nets[mi].ics[selector.attach_point - 1];
        for (param, value) in ic.params_mut().into_iter().zip(values) {
            param.data_mut().copy_from_slice(value);
        }
    };
    let eval = |m: &CascadeModel| -> f64 {
        let logits = m.nets[mi].ics[selector.attach_point - 1]
            .forward(&tap)
            .expect("tap width fixed during scan");
        cross_entropy_eval(&logits, &labels)
    };

    scan_landscape_with(model, get, set, eval, radius, n, seed)
}

/// Mean of (loss − center loss) over grid cells within Euclidean offset
/// `radius` of the center.
pub fn flatness(grid: &LandscapeGrid, radius: f64) -> Result<FlatnessScore, ProbeError> {
    if radius > grid.radius + 1e-12 {
        return Err(ProbeError::RadiusExceedsExtent {
            requested: radius,
            extent: grid.radius,
        });
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (ai, &alpha) in grid.coords.iter().enumerate() {
        for (bi, &beta) in grid.coords.iter().enumerate() {
            if (alpha * alpha + beta * beta).sqrt() <= radius + 1e-12 {
                total += grid.loss_at(ai, bi) - grid.center_loss;
                count += 1;
            }
        }
    }
    Ok(FlatnessScore {
        radius,
        score: total / count as f64,
    })
}
