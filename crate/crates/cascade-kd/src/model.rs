//! Per-modality backbone networks with feature taps, attached internal
//! classifiers, and binary checkpoints.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Modality;
use crate::numcore::{dense_eval, derive_seed, relu_eval, Graph, NumError, Tensor, Var};

pub const NUM_BLOCKS: usize = 4;
pub const NUM_ICS: usize = 3;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("input dim {got} does not match {modality} backbone input dim {expected}")]
    InputDim {
        modality: Modality,
        expected: usize,
        got: usize,
    },
    #[error("tap features have dim {got}, classifier at block {attach_point} expects {expected}")]
    TapDim {
        attach_point: usize,
        expected: usize,
        got: usize,
    },
    #[error("bad magic bytes: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported checkpoint version: expected {expected}, found {found}")]
    VersionMismatch { expected: u16, found: u16 },
    #[error("checkpoint file truncated while reading {context}")]
    Truncated { context: &'static str },
    #[error("checkpoint architecture mismatch: {0}")]
    ArchMismatch(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub w: Tensor,
    pub b: Tensor,
}

impl DenseLayer {
    /// Normal init scaled by 1/√in_dim, zero bias.
    fn init(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let scale = 1.0 / (in_dim as f64).sqrt();
        Self {
            w: Tensor::randn(vec![in_dim, out_dim], scale, rng),
            b: Tensor::zeros(vec![out_dim]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.w.shape()[1]
    }

    fn eval(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        Ok(dense_eval(x, &self.w, &self.b)?)
    }

    /// Records the layer on the tape; parameter leaves when `trainable`,
    /// constants otherwise.
    fn graph(
        &self,
        g: &mut Graph,
        x: Var,
        trainable: bool,
    ) -> Result<(Var, (Var, Var)), ModelError> {
        let (w, b) = if trainable {
            (g.param(&self.w), g.param(&self.b))
        } else {
            (g.constant(&self.w), g.constant(&self.b))
        };
        Ok((g.dense(x, w, b)?, (w, b)))
    }

    fn pull_grads(&mut self, g: &Graph, vars: (Var, Var)) {
        if let Some(gw) = g.grad(vars.0) {
            self.w.accumulate_grad(gw);
        }
        if let Some(gb) = g.grad(vars.1) {
            self.b.accumulate_grad(gb);
        }
    }
}

/// Backbone: four dense+ReLU blocks plus a final k-way classifier head.
/// Taps after blocks 1..4 feed the internal classifiers.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneNet {
    pub modality: Modality,
    pub blocks: Vec<DenseLayer>,
    pub final_classifier: DenseLayer,
    pub frozen: bool,
}

impl BackboneNet {
    pub fn new(
        modality: Modality,
        input_dim: usize,
        widths: &[usize; NUM_BLOCKS],
        num_classes: usize,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            seed,
            &format!("backbone-{}", modality.tag()),
        ));
        let mut blocks = Vec::with_capacity(NUM_BLOCKS);
        let mut prev = input_dim;
        for &w in widths {
            blocks.push(DenseLayer::init(prev, w, &mut rng));
            prev = w;
        }
        let final_classifier = DenseLayer::init(prev, num_classes, &mut rng);
        Self {
            modality,
            blocks,
            final_classifier,
            frozen: false,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.blocks[0].in_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.final_classifier.out_dim()
    }

    pub fn block_widths(&self) -> [usize; NUM_BLOCKS] {
        [
            self.blocks[0].out_dim(),
            self.blocks[1].out_dim(),
            self.blocks[2].out_dim(),
            self.blocks[3].out_dim(),
        ]
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    fn check_input(&self, x: &Tensor) -> Result<(), ModelError> {
        if x.shape().len() != 2 || x.shape()[1] != self.input_dim() {
            return Err(ModelError::InputDim {
                modality: self.modality,
                expected: self.input_dim(),
                got: x.shape().last().copied().unwrap_or(0),
            });
        }
        Ok(())
    }

    /// Plain evaluation returning the four tap activations and final
    /// logits. Same kernels as the graph path.
    pub fn forward_with_taps(&self, x: &Tensor) -> Result<(Vec<Tensor>, Tensor), ModelError> {
        self.check_input(x)?;
        let mut taps = Vec::with_capacity(NUM_BLOCKS);
        let mut h = x.clone();
        for block in &self.blocks {
            h = relu_eval(&block.eval(&h)?);
            taps.push(h.clone());
        }
        let logits = self.final_classifier.eval(&h)?;
        Ok((taps, logits))
    }

    /// Final logits only.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        Ok(self.forward_with_taps(x)?.1)
    }

    /// Records the whole backbone on a tape for training. Returns final
    /// logits plus per-layer vars for the gradient pull.
    pub fn graph_forward(
        &self,
        g: &mut Graph,
        x: &Tensor,
    ) -> Result<(Var, BackboneVars), ModelError> {
        self.check_input(x)?;
        let trainable = !self.frozen;
        let mut h = g.constant(x);
        let mut block_vars = Vec::with_capacity(NUM_BLOCKS);
        for block in &self.blocks {
            let (y, vars) = block.graph(g, h, trainable)?;
            h = g.relu(y);
            block_vars.push(vars);
        }
        let (logits, fc_vars) = self.final_classifier.graph(g, h, trainable)?;
        Ok((
            logits,
            BackboneVars {
                blocks: block_vars,
                fc: fc_vars,
            },
        ))
    }

    /// Copies tape gradients into the parameter tensors' grad slots.
    pub fn pull_grads(&mut self, g: &Graph, vars: &BackboneVars) {
        for (block, &bv) in self.blocks.iter_mut().zip(&vars.blocks) {
            block.pull_grads(g, bv);
        }
        self.final_classifier.pull_grads(g, vars.fc);
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::with_capacity(2 * (NUM_BLOCKS + 1));
        for block in &mut self.blocks {
            out.push(&mut block.w);
            out.push(&mut block.b);
        }
        out.push(&mut self.final_classifier.w);
        out.push(&mut self.final_classifier.b);
        out
    }
}

pub struct BackboneVars {
    pub blocks: Vec<(Var, Var)>,
    pub fc: (Var, Var),
}

/// Early-exit head: dense projection + ReLU + dense k-way classifier,
/// attached after backbone block `attach_point` (1-based, 1..=3).
#[derive(Debug, Clone, PartialEq)]
pub struct InternalClassifier {
    pub attach_point: usize,
    pub projection: DenseLayer,
    pub head: DenseLayer,
}

impl InternalClassifier {
    pub fn new(
        attach_point: usize,
        attach_width: usize,
        hidden: usize,
        num_classes: usize,
        seed: u64,
    ) -> Self {
        assert!((1..=NUM_ICS).contains(&attach_point), "attach point 1..=3");
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("ic-{attach_point}")));
        Self {
            attach_point,
            projection: DenseLayer::init(attach_width, hidden, &mut rng),
            head: DenseLayer::init(hidden, num_classes, &mut rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.projection.in_dim()
    }

    fn check_input(&self, tap: &Tensor) -> Result<(), ModelError> {
        if tap.shape().len() != 2 || tap.shape()[1] != self.input_dim() {
            return Err(ModelError::TapDim {
                attach_point: self.attach_point,
                expected: self.input_dim(),
                got: tap.shape().last().copied().unwrap_or(0),
            });
        }
        Ok(())
    }

    /// Plain logits from tap features.
    pub fn forward(&self, tap: &Tensor) -> Result<Tensor, ModelError> {
        self.check_input(tap)?;
        let h = relu_eval(&self.projection.eval(tap)?);
        self.head.eval(&h)
    }

    /// Tape version with trainable parameters; tap features enter as
    /// constants (the backbone is frozen during IC training).
    pub fn graph_forward(&self, g: &mut Graph, tap: &Tensor) -> Result<(Var, IcVars), ModelError> {
        self.check_input(tap)?;
        let x = g.constant(tap);
        let (p, proj_vars) = self.projection.graph(g, x, true)?;
        let h = g.relu(p);
        let (logits, head_vars) = self.head.graph(g, h, true)?;
        Ok((
            logits,
            IcVars {
                projection: proj_vars,
                head: head_vars,
            },
        ))
    }

    pub fn pull_grads(&mut self, g: &Graph, vars: &IcVars) {
        self.projection.pull_grads(g, vars.projection);
        self.head.pull_grads(g, vars.head);
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.projection.w,
            &mut self.projection.b,
            &mut self.head.w,
            &mut self.head.b,
        ]
    }

    pub fn param_tensors(&self) -> Vec<&Tensor> {
        vec![
            &self.projection.w,
            &self.projection.b,
            &self.head.w,
            &self.head.b,
        ]
    }
}

pub struct IcVars {
    pub projection: (Var, Var),
    pub head: (Var, Var),
}

/// A candidate exit within one backbone: an internal classifier after
/// block 1..=3, or the final classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ExitKind {
    Ic(usize),
    Fc,
}

impl ExitKind {
    /// Deepest backbone block this exit requires.
    pub fn blocks_needed(self) -> usize {
        match self {
            ExitKind::Ic(attach) => attach,
            ExitKind::Fc => NUM_BLOCKS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ExitId {
    pub modality: Modality,
    pub kind: ExitKind,
}

impl std::fmt::Display for ExitId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.kind {
            ExitKind::Ic(i) => write!(f, "{}:ic{i}", self.modality),
            ExitKind::Fc => write!(f, "{}:fc", self.modality),
        }
    }
}

impl std::str::FromStr for ExitId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (m, e) = s
            .split_once(':')
            .ok_or_else(|| format!("exit id `{s}` must look like mv:ic1 or r:fc"))?;
        let modality: Modality = m.parse()?;
        let kind = match e {
            "fc" => ExitKind::Fc,
            _ => {
                let idx: usize = e
                    .strip_prefix("ic")
                    .and_then(|n| n.parse().ok())
                    .ok_or_else(|| format!("bad exit kind `{e}` (expected ic1..ic3 or fc)"))?;
                if !(1..=NUM_ICS).contains(&idx) {
                    return Err(format!("ic index {idx} out of range 1..=3"));
                }
                ExitKind::Ic(idx)
            }
        };
        Ok(ExitId { modality, kind })
    }
}

/// One modality's backbone plus its three internal classifiers.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityNet {
    pub backbone: BackboneNet,
    pub ics: Vec<InternalClassifier>,
    pub meta: TrainingMeta,
}

/// Provenance recorded into checkpoints.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingMeta {
    pub seed: u64,
    pub backbone_epochs: u64,
    pub ic_epochs: u64,
    pub ic_strategy: String,
}

impl ModalityNet {
    /// Fresh net with ICs attached after blocks 1..=3. IC hidden width is
    /// the attach width divided by `ic_hidden_divisor` (floor, min 1).
    pub fn new(
        modality: Modality,
        input_dim: usize,
        widths: &[usize; NUM_BLOCKS],
        num_classes: usize,
        ic_hidden_divisor: usize,
        seed: u64,
    ) -> Self {
        let backbone = BackboneNet::new(modality, input_dim, widths, num_classes, seed);
        let ic_seed = derive_seed(seed, &format!("ics-{}", modality.tag()));
        let ics = (1..=NUM_ICS)
            .map(|attach| {
                let attach_width = widths[attach - 1];
                let hidden = (attach_width / ic_hidden_divisor).max(1);
                InternalClassifier::new(attach, attach_width, hidden, num_classes, ic_seed + attach as u64)
            })
            .collect();
        Self {
            backbone,
            ics,
            meta: TrainingMeta {
                seed,
                ..TrainingMeta::default()
            },
        }
    }

    pub fn modality(&self) -> Modality {
        self.backbone.modality
    }
}

/// The full tri-modal cascade: one `ModalityNet` per compressed-video
/// view, indexed in (mv, r, iframe) order.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeModel {
    pub nets: [ModalityNet; 3],
}

impl CascadeModel {
    pub fn new(nets: [ModalityNet; 3]) -> Self {
        debug_assert_eq!(nets[0].modality(), Modality::Mv);
        debug_assert_eq!(nets[1].modality(), Modality::R);
        debug_assert_eq!(nets[2].modality(), Modality::Iframe);
        Self { nets }
    }

    pub fn net(&self, m: Modality) -> &ModalityNet {
        &self.nets[match m {
            Modality::Mv => 0,
            Modality::R => 1,
            Modality::Iframe => 2,
        }]
    }

    pub fn net_mut(&mut self, m: Modality) -> &mut ModalityNet {
        &mut self.nets[match m {
            Modality::Mv => 0,
            Modality::R => 1,
            Modality::Iframe => 2,
        }]
    }

    pub fn num_classes(&self) -> usize {
        self.nets[0].backbone.num_classes()
    }

    /// Fresh cascade for the given per-modality input dims and widths.
    /// Initialization is deterministic in `seed`.
    pub fn build(
        input_dims: [usize; 3],
        widths: [&[usize; NUM_BLOCKS]; 3],
        num_classes: usize,
        ic_hidden_divisor: usize,
        seed: u64,
    ) -> Self {
        Self::new([
            ModalityNet::new(
                Modality::Mv,
                input_dims[0],
                widths[0],
                num_classes,
                ic_hidden_divisor,
                seed,
            ),
            ModalityNet::new(
                Modality::R,
                input_dims[1],
                widths[1],
                num_classes,
                ic_hidden_divisor,
                seed,
            ),
            ModalityNet::new(
                Modality::Iframe,
                input_dims[2],
                widths[2],
                num_classes,
                ic_hidden_divisor,
                seed,
            ),
        ])
    }
}

const CKPT_MAGIC: [u8; 4] = *b"CKPT";
const CKPT_VERSION: u16 = 1;

fn write_tensor(buf: &mut Vec<u8>, t: &Tensor) {
    buf.extend_from_slice(&(t.shape().len() as u64).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct CkptReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> CkptReader<'a> {
    fn take(&mut self, n: usize, context: &'static str) -> Result<&'a [u8], ModelError> {
        if self.pos + n > self.buf.len() {
            return Err(ModelError::Truncated { context });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self, context: &'static str) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8, context)?.try_into().unwrap()))
    }

    fn tensor(&mut self, context: &'static str) -> Result<Tensor, ModelError> {
        let rank = self.u64(context)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64(context)? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = self.take(n * 8, context)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Tensor::new(shape, data).expect("length computed from shape"))
    }

    fn string(&mut self, context: &'static str) -> Result<String, ModelError> {
        let len = self.u64(context)? as usize;
        let raw = self.take(len, context)?;
        Ok(String::from_utf8_lossy(raw).into_owned())
    }
}

/// Checkpoint layout: magic "CKPT", u16 version, modality tag, frozen
/// flag, training metadata, then every parameter tensor (blocks, final
/// classifier, per-IC projection and head) with explicit shapes.
pub fn save_checkpoint(net: &ModalityNet, path: &Path) -> Result<(), ModelError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    let tag = net.modality().tag().as_bytes();
    buf.extend_from_slice(&(tag.len() as u64).to_le_bytes());
    buf.extend_from_slice(tag);
    buf.push(u8::from(net.backbone.frozen));
    buf.extend_from_slice(&net.meta.seed.to_le_bytes());
    buf.extend_from_slice(&net.meta.backbone_epochs.to_le_bytes());
    buf.extend_from_slice(&net.meta.ic_epochs.to_le_bytes());
    let strategy = net.meta.ic_strategy.as_bytes();
    buf.extend_from_slice(&(strategy.len() as u64).to_le_bytes());
    buf.extend_from_slice(strategy);

    buf.extend_from_slice(&(net.backbone.blocks.len() as u64).to_le_bytes());
    for block in &net.backbone.blocks {
        write_tensor(&mut buf, &block.w);
        write_tensor(&mut buf, &block.b);
    }
    write_tensor(&mut buf, &net.backbone.final_classifier.w);
    write_tensor(&mut buf, &net.backbone.final_classifier.b);

    buf.extend_from_slice(&(net.ics.len() as u64).to_le_bytes());
    for ic in &net.ics {
        buf.extend_from_slice(&(ic.attach_point as u64).to_le_bytes());
        write_tensor(&mut buf, &ic.projection.w);
        write_tensor(&mut buf, &ic.projection.b);
        write_tensor(&mut buf, &ic.head.w);
        write_tensor(&mut buf, &ic.head.b);
    }

    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModalityNet, ModelError> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut r = CkptReader { buf: &buf, pos: 0 };

    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if magic != CKPT_MAGIC {
        return Err(ModelError::BadMagic {
            expected: CKPT_MAGIC,
            found: magic,
        });
    }
    let version = u16::from_le_bytes(r.take(2, "version")?.try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(ModelError::VersionMismatch {
            expected: CKPT_VERSION,
            found: version,
        });
    }
    let modality: Modality = r
        .string("modality")?
        .parse()
        .map_err(ModelError::ArchMismatch)?;
    let frozen = r.take(1, "frozen flag")?[0] != 0;
    let meta = TrainingMeta {
        seed: r.u64("meta.seed")?,
        backbone_epochs: r.u64("meta.backbone_epochs")?,
        ic_epochs: r.u64("meta.ic_epochs")?,
        ic_strategy: r.string("meta.ic_strategy")?,
    };

    let n_blocks = r.u64("block count")? as usize;
    if n_blocks != NUM_BLOCKS {
        return Err(ModelError::ArchMismatch(format!(
            "expected {NUM_BLOCKS} blocks, checkpoint has {n_blocks}"
        )));
    }
    let mut blocks = Vec::with_capacity(n_blocks);
    let mut prev_out: Option<usize> = None;
    for i in 0..n_blocks {
        let w = r.tensor("block weight")?;
        let b = r.tensor("block bias")?;
        if w.shape().len() != 2 || b.shape() != [w.shape()[1]] {
            return Err(ModelError::ArchMismatch(format!(
                "block {i} tensors have inconsistent shapes"
            )));
        }
        if let Some(prev) = prev_out {
            if w.shape()[0] != prev {
                return Err(ModelError::ArchMismatch(format!(
                    "block {i} input dim {} does not chain from previous width {prev}",
                    w.shape()[0]
                )));
            }
        }
        prev_out = Some(w.shape()[1]);
        blocks.push(DenseLayer { w, b });
    }
    let fc_w = r.tensor("final classifier weight")?;
    let fc_b = r.tensor("final classifier bias")?;
    if fc_w.shape()[0] != prev_out.unwrap() {
        return Err(ModelError::ArchMismatch(
            "final classifier does not match block 4 width".into(),
        ));
    }
    let backbone = BackboneNet {
        modality,
        blocks,
        final_classifier: DenseLayer { w: fc_w, b: fc_b },
        frozen,
    };

    let n_ics = r.u64("ic count")? as usize;
    if n_ics != NUM_ICS {
        return Err(ModelError::ArchMismatch(format!(
            "expected {NUM_ICS} internal classifiers, checkpoint has {n_ics}"
        )));
    }
    let widths = backbone.block_widths();
    let mut ics = Vec::with_capacity(n_ics);
    for _ in 0..n_ics {
        let attach_point = r.u64("ic attach point")? as usize;
        let proj_w = r.tensor("ic projection weight")?;
        let proj_b = r.tensor("ic projection bias")?;
        let head_w = r.tensor("ic head weight")?;
        let head_b = r.tensor("ic head bias")?;
        if !(1..=NUM_ICS).contains(&attach_point)
            || proj_w.shape()[0] != widths[attach_point - 1]
        {
            return Err(ModelError::ArchMismatch(format!(
                "ic at block {attach_point} does not match backbone width"
            )));
        }
        ics.push(InternalClassifier {
            attach_point,
            projection: DenseLayer {
                w: proj_w,
                b: proj_b,
            },
            head: DenseLayer {
                w: head_w,
                b: head_b,
            },
        });
    }

    Ok(ModalityNet {
        backbone,
        ics,
        meta,
    })
}

/// Standard checkpoint file name for one modality inside a directory.
pub fn checkpoint_name(m: Modality) -> String {
    format!("{}.ckpt", m.tag())
}

/// Saves the three modality checkpoints into `dir`, returning the paths.
pub fn save_cascade(model: &CascadeModel, dir: &Path) -> Result<Vec<std::path::PathBuf>, ModelError> {
    fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(3);
    for net in &model.nets {
        let path = dir.join(checkpoint_name(net.modality()));
        save_checkpoint(net, &path)?;
        paths.push(path);
    }
    Ok(paths)
}

pub fn load_cascade(dir: &Path) -> Result<CascadeModel, ModelError> {
    let load = |m: Modality| -> Result<ModalityNet, ModelError> {
        let path = dir.join(checkpoint_name(m));
        let net = load_checkpoint(&path)?;
        if net.modality() != m {
            return Err(ModelError::ArchMismatch(format!(
                "{} holds a {} checkpoint",
                path.display(),
                net.modality()
            )));
        }
        Ok(net)
    };
    Ok(CascadeModel::new([
        load(Modality::Mv)?,
        load(Modality::R)?,
        load(Modality::Iframe)?,
    ]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use tempfile::tempdir;

    fn sample_net(seed: u64) -> ModalityNet {
        ModalityNet::new(Modality::Mv, 6, &[8, 8, 4, 4], 3, 2, seed)
    }

    #[test]
    fn identity_blocks_propagate_nonnegative_input() {
        let mut net = BackboneNet::new(Modality::R, 4, &[4, 4, 4, 4], 2, 9);
        for block in &mut net.blocks {
            let mut w = Tensor::zeros(vec![4, 4]);
            for i in 0..4 {
                w.data_mut()[i * 4 + i] = 1.0;
            }
            block.w = w;
            block.b = Tensor::zeros(vec![4]);
        }
        let x = Tensor::new(vec![2, 4], vec![0.5, 1.0, 0.0, 2.0, 3.0, 0.25, 1.5, 0.0]).unwrap();
        let (taps, _) = net.forward_with_taps(&x).unwrap();
        for tap in &taps {
            assert_eq!(tap.data(), x.data());
        }
    }

    #[test]
    fn final_tap_through_fc_matches_forward() {
        let net = sample_net(3).backbone;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(vec![5, 6], 1.0, &mut rng);
        let (taps, logits) = net.forward_with_taps(&x).unwrap();
        let direct = net.forward(&x).unwrap();
        assert_eq!(logits, direct);
        let from_tap = dense_eval(
            &taps[NUM_BLOCKS - 1],
            &net.final_classifier.w,
            &net.final_classifier.b,
        )
        .unwrap();
        assert_eq!(from_tap, logits);
    }

    #[test]
    fn taps_match_hand_unrolled_oracle() {
        let net = sample_net(21).backbone;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(vec![3, 6], 1.0, &mut rng);
        let (taps, logits) = net.forward_with_taps(&x).unwrap();

        // Unrolled layer-by-layer recomputation with scalar loops.
        let mut h: Vec<Vec<f64>> = (0..3).map(|r| x.row(r).to_vec()).collect();
        for (bi, block) in net.blocks.iter().enumerate() {
            let (i, o) = (block.in_dim(), block.out_dim());
            let mut next = vec![vec![0.0; o]; 3];
            for r in 0..3 {
                for c in 0..o {
                    let mut acc = block.b.data()[c];
                    for k in 0..i {
                        acc += h[r][k] * block.w.data()[k * o + c];
                    }
                    next[r][c] = acc.max(0.0);
                }
            }
            h = next;
            for r in 0..3 {
                for c in 0..h[r].len() {
                    assert!(
                        (taps[bi].row(r)[c] - h[r][c]).abs() < 1e-12,
                        "tap {bi} mismatch"
                    );
                }
            }
        }
        let fc = &net.final_classifier;
        for r in 0..3 {
            for c in 0..fc.out_dim() {
                let mut acc = fc.b.data()[c];
                for k in 0..fc.in_dim() {
                    acc += h[r][k] * fc.w.data()[k * fc.out_dim() + c];
                }
                assert!((logits.row(r)[c] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn input_dim_mismatch_is_reported() {
        let net = sample_net(4).backbone;
        let x = Tensor::zeros(vec![1, 5]);
        match net.forward(&x) {
            Err(ModelError::InputDim {
                expected: 6,
                got: 5,
                ..
            }) => {}
            other => panic!("expected input dim error, got {other:?}"),
        }
    }

    #[test]
    fn ic_rejects_wrong_tap_width() {
        let net = sample_net(4);
        let bad_tap = Tensor::zeros(vec![1, 5]);
        assert!(matches!(
            net.ics[0].forward(&bad_tap),
            Err(ModelError::TapDim { .. })
        ));
    }

    #[test]
    fn ic_forward_matches_manual_two_layer() {
        let net = sample_net(8);
        let ic = &net.ics[1];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tap = Tensor::randn(vec![2, 8], 1.0, &mut rng);
        let logits = ic.forward(&tap).unwrap();
        let h = relu_eval(&dense_eval(&tap, &ic.projection.w, &ic.projection.b).unwrap());
        let expect = dense_eval(&h, &ic.head.w, &ic.head.b).unwrap();
        assert_eq!(logits, expect);
    }

    #[test]
    fn frozen_backbone_params_get_no_grads() {
        let mut net = sample_net(6);
        net.backbone.freeze();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::randn(vec![4, 6], 1.0, &mut rng);
        let mut g = Graph::new();
        let (logits, vars) = net.backbone.graph_forward(&mut g, &x).unwrap();
        let loss = g.cross_entropy_logits(logits, &[0, 1, 2, 0]).unwrap();
        g.backward(loss).unwrap();
        net.backbone.pull_grads(&g, &vars);
        for p in net.backbone.params_mut() {
            assert!(p.grad().is_none(), "frozen parameter accumulated a grad");
        }
    }

    #[test]
    fn checkpoint_round_trip_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("mv.ckpt");
        let mut net = sample_net(11);
        net.backbone.freeze();
        net.meta.ic_strategy = "pkd".into();
        net.meta.backbone_epochs = 17;
        save_checkpoint(&net, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(net, loaded);

        // Replay: logits on a fixed input must match to the last bit.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::randn(vec![3, 6], 1.0, &mut rng);
        let a = net.backbone.forward(&x).unwrap();
        let b = loaded.backbone.forward(&x).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn corrupted_tail_is_an_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("mv.ckpt");
        save_checkpoint(&sample_net(1), &path).unwrap();
        let raw = fs::read(&path).unwrap();
        fs::write(&path, &raw[..raw.len() - 7]).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(ModelError::Truncated { .. })
        ));
    }

    #[test]
    fn wrong_magic_and_version_are_errors() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        save_checkpoint(&sample_net(1), &path).unwrap();
        let mut raw = fs::read(&path).unwrap();
        let good = raw.clone();
        raw[0] = b'X';
        fs::write(&path, &raw).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(ModelError::BadMagic { .. })
        ));
        let mut raw = good;
        raw[4] = 42;
        fs::write(&path, &raw).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(ModelError::VersionMismatch { found: 42, .. })
        ));
    }
}
