//! Seeded synthetic tri-modal datasets.
//!
//! Each class owns a latent template sequence of "frames": frame 0 is a
//! shared base plus a class-specific appearance offset, and each step adds
//! block-constant motion (shared drift plus a class-specific displacement)
//! and pixel-level class detail. The three views are lossy projections of
//! that sequence: intra-frame features are template frames plus low
//! noise, residual features are consecutive-frame differences plus medium
//! noise, and motion-vector features are block-averaged frame
//! displacements plus high noise. Block averaging preserves the coarse
//! motion but washes out detail, and the noise hierarchy σ_mv > σ_r > σ_i
//! does the rest, so separability orders intra-frame ≥ residual ≥ motion
//! vector.
//!
//! All randomness comes from ChaCha8 streams derived from the spec seed;
//! every (class, sample, modality) triple gets its own stream, so changing
//! one modality's frame count leaves the other modalities' values
//! bit-identical.

use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::numcore::{derive_seed, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("invalid generator spec: {0}")]
    InvalidSpec(String),
    #[error("dataset requires at least {min} samples for splits, got {got}")]
    TooFewSamples { min: usize, got: usize },
    #[error("bad magic bytes: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported dataset format version: expected {expected}, found {found}")]
    VersionMismatch { expected: u16, found: u16 },
    #[error("dataset file truncated while reading {context}")]
    Truncated { context: &'static str },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// The three compressed-video feature views.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Mv,
    R,
    Iframe,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Mv, Modality::R, Modality::Iframe];

    pub fn tag(self) -> &'static str {
        match self {
            Modality::Mv => "mv",
            Modality::R => "r",
            Modality::Iframe => "iframe",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl std::str::FromStr for Modality {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mv" => Ok(Modality::Mv),
            "r" => Ok(Modality::R),
            "iframe" | "i" => Ok(Modality::Iframe),
            other => Err(format!("unknown modality `{other}` (expected mv|r|iframe)")),
        }
    }
}

/// One video sample: a feature vector per modality plus its class label.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalitySample {
    pub mv: Vec<f64>,
    pub r: Vec<f64>,
    pub iframe: Vec<f64>,
    pub label: usize,
}

impl ModalitySample {
    pub fn features(&self, m: Modality) -> &[f64] {
        match m {
            Modality::Mv => &self.mv,
            Modality::R => &self.r,
            Modality::Iframe => &self.iframe,
        }
    }
}

/// Generator parameters. `dim_mv` is derived: `dim_iframe / block_pool`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenSpec {
    pub seed: u64,
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub dim_iframe: usize,
    pub dim_r: usize,
    /// Motion-vector coarsening factor; must divide `dim_iframe`.
    pub block_pool: usize,
    /// Scale of class-specific appearance and pixel-detail offsets.
    pub class_sep: f64,
    /// Scale of class-specific block-level motion between frames.
    pub motion_sep: f64,
    pub noise_mv: f64,
    pub noise_r: f64,
    pub noise_iframe: f64,
    pub frames_mv: usize,
    pub frames_r: usize,
    pub frames_iframe: usize,
}

impl Default for GenSpec {
    fn default() -> Self {
        Self {
            seed: 17,
            num_classes: 10,
            samples_per_class: 60,
            dim_iframe: 64,
            dim_r: 64,
            block_pool: 4,
            class_sep: 0.05,
            motion_sep: 0.35,
            noise_mv: 0.9,
            noise_r: 0.5,
            noise_iframe: 0.25,
            frames_mv: 3,
            frames_r: 3,
            frames_iframe: 3,
        }
    }
}

impl GenSpec {
    pub fn dim_mv(&self) -> usize {
        self.dim_iframe / self.block_pool
    }

    /// Concatenated feature width per modality.
    pub fn feature_dim(&self, m: Modality) -> usize {
        match m {
            Modality::Mv => self.dim_mv() * self.frames_mv,
            Modality::R => self.dim_r * self.frames_r,
            Modality::Iframe => self.dim_iframe * self.frames_iframe,
        }
    }

    pub fn total_samples(&self) -> usize {
        self.num_classes * self.samples_per_class
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let fail = |msg: String| Err(DataError::InvalidSpec(msg));
        if self.num_classes < 2 {
            return fail(format!("num_classes must be ≥ 2, got {}", self.num_classes));
        }
        if self.samples_per_class == 0 {
            return fail("samples_per_class must be positive".into());
        }
        if self.block_pool == 0 || self.dim_iframe % self.block_pool != 0 {
            return fail(format!(
                "block_pool {} must divide dim_iframe {}",
                self.block_pool, self.dim_iframe
            ));
        }
        if self.dim_r != self.dim_iframe {
            return fail(format!(
                "dim_r {} must equal dim_iframe {} (residuals are full-resolution differences)",
                self.dim_r, self.dim_iframe
            ));
        }
        if !(self.noise_mv > self.noise_r && self.noise_r > self.noise_iframe && self.noise_iframe > 0.0)
        {
            return fail(format!(
                "noise levels must satisfy mv > r > iframe > 0, got ({}, {}, {})",
                self.noise_mv, self.noise_r, self.noise_iframe
            ));
        }
        if self.class_sep <= 0.0 {
            return fail(format!("class_sep must be positive, got {}", self.class_sep));
        }
        if self.motion_sep <= 0.0 {
            return fail(format!("motion_sep must be positive, got {}", self.motion_sep));
        }
        if self.frames_mv == 0 || self.frames_r == 0 || self.frames_iframe == 0 {
            return fail("frame counts must be positive".into());
        }
        Ok(())
    }

    /// Frames of latent template sequence needed to derive every view.
    fn template_frames(&self) -> usize {
        self.frames_iframe.max(self.frames_mv + 1).max(self.frames_r + 1)
    }
}

/// 75/25 train/test partition. Three splits exist per dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub split_id: u8,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: GenSpec,
    pub samples: Vec<ModalitySample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Feature matrix [n, dim] for one modality over the given indices.
    pub fn features(&self, m: Modality, indices: &[usize]) -> Tensor {
        let rows: Vec<&[f64]> = indices.iter().map(|&i| self.samples[i].features(m)).collect();
        Tensor::from_rows(&rows)
    }

    pub fn labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.samples[i].label).collect()
    }
}

fn standard_normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    use rand::Rng;
    (0..n)
        .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect()
}

/// Deterministic dataset construction from the spec.
pub fn generate(spec: &GenSpec) -> Result<Dataset, DataError> {
    spec.validate()?;
    let frames = spec.template_frames();
    let d = spec.dim_iframe;
    let pooled_dims = spec.dim_mv();

    // Shared components: the base appearance and a common drift, one
    // stream each, consumed frame by frame so longer sequences extend
    // shorter ones without disturbing earlier frames.
    let mut base_rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "template-base"));
    let base0 = standard_normals(&mut base_rng, d);
    let mut drift_rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "template-drift"));
    let shared_motion: Vec<Vec<f64>> = (0..frames.saturating_sub(1))
        .map(|_| standard_normals(&mut drift_rng, pooled_dims))
        .collect();

    // Class templates: random walks driven by block-constant motion plus
    // pixel-level detail.
    let mut templates: Vec<Vec<Vec<f64>>> = Vec::with_capacity(spec.num_classes);
    for class in 0..spec.num_classes {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            spec.seed,
            &format!("template-class-{class}"),
        ));
        let appearance = standard_normals(&mut rng, d);
        let mut frame: Vec<f64> = base0
            .iter()
            .zip(&appearance)
            .map(|(b, a)| b + spec.class_sep * a)
            .collect();
        let mut class_frames = Vec::with_capacity(frames);
        class_frames.push(frame.clone());
        for step in 0..frames.saturating_sub(1) {
            let class_motion = standard_normals(&mut rng, pooled_dims);
            let detail = standard_normals(&mut rng, d);
            for (j, value) in frame.iter_mut().enumerate() {
                let block = j / spec.block_pool;
                *value += shared_motion[step][block]
                    + spec.motion_sep * class_motion[block]
                    + spec.class_sep * detail[j];
            }
            class_frames.push(frame.clone());
        }
        templates.push(class_frames);
    }

    let pooled = spec.dim_mv();
    let mut samples = Vec::with_capacity(spec.total_samples());
    for class in 0..spec.num_classes {
        let tpl = &templates[class];
        for idx in 0..spec.samples_per_class {
            let noise_stream = |mod_tag: &str, n: usize| -> Vec<f64> {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                    spec.seed,
                    &format!("noise-{mod_tag}-{class}-{idx}"),
                ));
                standard_normals(&mut rng, n)
            };

            // I-frame: template frames + low noise.
            let i_noise = noise_stream("iframe", spec.frames_iframe * d);
            let mut iframe = Vec::with_capacity(spec.frames_iframe * d);
            for f in 0..spec.frames_iframe {
                for j in 0..d {
                    iframe.push(tpl[f][j] + spec.noise_iframe * i_noise[f * d + j]);
                }
            }

            // Residuals: consecutive template differences + medium noise.
            let r_noise = noise_stream("r", spec.frames_r * d);
            let mut r = Vec::with_capacity(spec.frames_r * d);
            for f in 0..spec.frames_r {
                for j in 0..d {
                    let diff = tpl[f + 1][j] - tpl[f][j];
                    r.push(diff + spec.noise_r * r_noise[f * d + j]);
                }
            }

            // Motion vectors: block-averaged differences + high noise.
            let mv_noise = noise_stream("mv", spec.frames_mv * pooled);
            let mut mv = Vec::with_capacity(spec.frames_mv * pooled);
            for f in 0..spec.frames_mv {
                for blk in 0..pooled {
                    let mut acc = 0.0;
                    for j in 0..spec.block_pool {
                        let col = blk * spec.block_pool + j;
                        acc += tpl[f + 1][col] - tpl[f][col];
                    }
                    let avg = acc / spec.block_pool as f64;
                    mv.push(avg + spec.noise_mv * mv_noise[f * pooled + blk]);
                }
            }

            samples.push(ModalitySample {
                mv,
                r,
                iframe,
                label: class,
            });
        }
    }

    Ok(Dataset {
        spec: spec.clone(),
        samples,
    })
}

/// Three deterministic 75/25 partitions with pairwise-different test sets.
pub fn make_splits(n: usize, seed: u64) -> Result<[DatasetSplit; 3], DataError> {
    if n < 10 {
        return Err(DataError::TooFewSamples { min: 10, got: n });
    }
    let test_len = n / 4;
    let mut out = Vec::with_capacity(3);
    for split_id in 1u8..=3 {
        let mut indices: Vec<usize> = (0..n).collect();
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("split-{split_id}")));
        // Fisher-Yates, high index down.
        for i in (1..n).rev() {
            use rand::Rng;
            let j = rng.gen_range(0..=i);
            indices.swap(i, j);
        }
        let test: Vec<usize> = indices[..test_len].to_vec();
        let train: Vec<usize> = indices[test_len..].to_vec();
        out.push(DatasetSplit {
            split_id,
            train,
            test,
        });
    }
    Ok(out.try_into().expect("exactly three splits"))
}

const MAGIC: [u8; 4] = *b"CVKD";
const VERSION: u16 = 1;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, context: &'static str) -> Result<&'a [u8], DataError> {
        if self.pos + n > self.buf.len() {
            return Err(DataError::Truncated { context });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, context: &'static str) -> Result<u16, DataError> {
        Ok(u16::from_le_bytes(self.take(2, context)?.try_into().unwrap()))
    }

    fn u64(&mut self, context: &'static str) -> Result<u64, DataError> {
        Ok(u64::from_le_bytes(self.take(8, context)?.try_into().unwrap()))
    }

    fn f64(&mut self, context: &'static str) -> Result<f64, DataError> {
        Ok(f64::from_le_bytes(self.take(8, context)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize, context: &'static str) -> Result<Vec<f64>, DataError> {
        let raw = self.take(n * 8, context)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Binary layout: magic "CVKD", u16 version, the GenSpec as fixed-order
/// little-endian fields, then per sample the label and the three modality
/// vectors as contiguous f64.
pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<(), DataError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let s = &dataset.spec;
    for v in [
        s.seed,
        s.num_classes as u64,
        s.samples_per_class as u64,
        s.dim_iframe as u64,
        s.dim_r as u64,
        s.block_pool as u64,
        s.frames_mv as u64,
        s.frames_r as u64,
        s.frames_iframe as u64,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in [s.class_sep, s.motion_sep, s.noise_mv, s.noise_r, s.noise_iframe] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&(dataset.samples.len() as u64).to_le_bytes());
    for sample in &dataset.samples {
        buf.extend_from_slice(&(sample.label as u64).to_le_bytes());
        for vec in [&sample.mv, &sample.r, &sample.iframe] {
            for v in vec.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset, DataError> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut r = Reader { buf: &buf, pos: 0 };

    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if magic != MAGIC {
        return Err(DataError::BadMagic {
            expected: MAGIC,
            found: magic,
        });
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(DataError::VersionMismatch {
            expected: VERSION,
            found: version,
        });
    }
    let spec = GenSpec {
        seed: r.u64("spec.seed")?,
        num_classes: r.u64("spec.num_classes")? as usize,
        samples_per_class: r.u64("spec.samples_per_class")? as usize,
        dim_iframe: r.u64("spec.dim_iframe")? as usize,
        dim_r: r.u64("spec.dim_r")? as usize,
        block_pool: r.u64("spec.block_pool")? as usize,
        frames_mv: r.u64("spec.frames_mv")? as usize,
        frames_r: r.u64("spec.frames_r")? as usize,
        frames_iframe: r.u64("spec.frames_iframe")? as usize,
        class_sep: r.f64("spec.class_sep")?,
        motion_sep: r.f64("spec.motion_sep")?,
        noise_mv: r.f64("spec.noise_mv")?,
        noise_r: r.f64("spec.noise_r")?,
        noise_iframe: r.f64("spec.noise_iframe")?,
    };
    let n = r.u64("sample count")? as usize;
    let (dm, dr, di) = (
        spec.feature_dim(Modality::Mv),
        spec.feature_dim(Modality::R),
        spec.feature_dim(Modality::Iframe),
    );
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let label = r.u64("sample label")? as usize;
        let mv = r.f64s(dm, "mv features")?;
        let rv = r.f64s(dr, "r features")?;
        let iframe = r.f64s(di, "iframe features")?;
        samples.push(ModalitySample {
            mv,
            r: rv,
            iframe,
            label,
        });
    }
    Ok(Dataset { spec, samples })
}
