//! Reverse-mode tape over tensor operations.
//!
//! A `Graph` is rebuilt per training step: leaves are copied in, ops are
//! recorded in creation order (which is a topological order, since an op's
//! inputs must exist before it), and `backward` walks the tape once in
//! reverse, accumulating gradients into differentiable leaves.

use super::tensor::{
    check_dense_shapes, clamped_neg_log, dense_eval, log_softmax_row, relu_eval, softmax_eval,
    softmax_row, Tensor,
};
use super::NumError;

/// Handle to a node in a `Graph`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    /// Leaf; `trainable` decides whether a gradient is kept for it.
    Leaf { trainable: bool },
    Dense { x: Var, w: Var, b: Var },
    Relu { x: Var },
    Softmax { x: Var },
    Add { a: Var, b: Var },
    Sum { x: Var },
    /// Mean over batch of −log softmax(logits)[label].
    CeLogits { logits: Var, labels: Vec<usize> },
    /// Mean over batch of −log probs[label], clamped at `PROB_CLAMP`.
    CeProbs { probs: Var, labels: Vec<usize> },
    /// T²·mean KL(softmax(teacher/T) ‖ softmax(student/T)); teacher is a
    /// constant as far as gradients are concerned.
    KdLoss {
        student: Var,
        teacher: Var,
        temperature: f64,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Tape of recorded operations plus their forward values.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
    clamp_events: usize,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    /// Constant leaf: no gradient is tracked through it.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.clone(), Op::Leaf { trainable: false })
    }

    /// Differentiable leaf; read its gradient back with `grad` after
    /// `backward`.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.clone(), Op::Leaf { trainable: true })
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    /// Scalar value of a one-element node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.node(v).value.len(), 1);
        self.node(v).value.data()[0]
    }

    /// Gradient of a node, if one was produced by `backward`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.node(v).grad.as_deref()
    }

    /// Count of probability clamps that fired in `cross_entropy_probs`
    /// nodes; nonzero values signal degenerate inputs.
    pub fn clamp_events(&self) -> usize {
        self.clamp_events
    }

    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NumError> {
        let y = dense_eval(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(y, Op::Dense { x, w, b }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = relu_eval(self.value(x));
        self.push(y, Op::Relu { x })
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let y = softmax_eval(self.value(x));
        self.push(y, Op::Softmax { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(NumError::ShapeMismatch {
                op: "add",
                expected: format!("{:?}", self.value(a).shape()),
                actual: format!("{:?}", self.value(b).shape()),
            });
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data).expect("shape checked");
        Ok(self.push(t, Op::Add { a, b }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { x })
    }

    fn check_labels(labels: &[usize], batch: usize, k: usize) -> Result<(), NumError> {
        if labels.len() != batch {
            return Err(NumError::ShapeMismatch {
                op: "cross_entropy",
                expected: format!("{batch} labels"),
                actual: format!("{} labels", labels.len()),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(NumError::LabelOutOfRange { label: bad, classes: k });
        }
        Ok(())
    }

    /// Fused log-softmax cross entropy over logits [batch, k].
    pub fn cross_entropy_logits(
        &mut self,
        logits: Var,
        labels: &[usize],
    ) -> Result<Var, NumError> {
        let t = self.value(logits);
        let (n, k) = (t.rows(), t.cols());
        Self::check_labels(labels, n, k)?;
        let mut loss = 0.0;
        let mut log_p = vec![0.0; k];
        for (r, &label) in labels.iter().enumerate() {
            log_softmax_row(t.row(r), &mut log_p);
            loss -= log_p[label];
        }
        loss /= n as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CeLogits {
                logits,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Cross entropy over already-softmaxed rows; probabilities at or below
    /// the clamp floor are clamped and counted.
    pub fn cross_entropy_probs(&mut self, probs: Var, labels: &[usize]) -> Result<Var, NumError> {
        let t = self.value(probs);
        let (n, k) = (t.rows(), t.cols());
        Self::check_labels(labels, n, k)?;
        let mut loss = 0.0;
        let mut clamps = 0;
        for (r, &label) in labels.iter().enumerate() {
            let (nl, clamped) = clamped_neg_log(t.row(r)[label]);
            loss += nl;
            clamps += clamped;
        }
        loss /= n as f64;
        self.clamp_events += clamps;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CeProbs {
                probs,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Distillation loss T²·mean_batch KL(softmax(teacher/T) ‖ softmax(student/T)).
    pub fn kd_loss(&mut self, student: Var, teacher: Var, temperature: f64) -> Result<Var, NumError> {
        if temperature <= 0.0 {
            return Err(NumError::NonPositiveTemperature(temperature));
        }
        let (s, t) = (self.value(student), self.value(teacher));
        if s.shape() != t.shape() {
            return Err(NumError::ShapeMismatch {
                op: "kd_loss",
                expected: format!("{:?}", t.shape()),
                actual: format!("{:?}", s.shape()),
            });
        }
        let (n, k) = (s.rows(), s.cols());
        let mut loss = 0.0;
        let mut pt = vec![0.0; k];
        let mut log_ps = vec![0.0; k];
        let mut log_pt = vec![0.0; k];
        let mut scaled_s = vec![0.0; k];
        let mut scaled_t = vec![0.0; k];
        for r in 0..n {
            for c in 0..k {
                scaled_s[c] = s.row(r)[c] / temperature;
                scaled_t[c] = t.row(r)[c] / temperature;
            }
            softmax_row(&scaled_t, &mut pt);
            log_softmax_row(&scaled_t, &mut log_pt);
            log_softmax_row(&scaled_s, &mut log_ps);
            for c in 0..k {
                loss += pt[c] * (log_pt[c] - log_ps[c]);
            }
        }
        loss = loss * temperature * temperature / n as f64;
        // Identical rows cancel exactly in the sum above, but guard the
        // tiny negative residue the subtraction can leave behind.
        if loss < 0.0 && loss > -1e-15 {
            loss = 0.0;
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::KdLoss {
                student,
                teacher,
                temperature,
            },
        ))
    }

    /// Reverse pass from a scalar loss node. Fails if the loss is not a
    /// scalar or if called a second time on the same tape.
    pub fn backward(&mut self, loss: Var) -> Result<(), NumError> {
        if self.backward_done {
            return Err(NumError::BackwardTwice);
        }
        if self.node(loss).value.len() != 1 {
            return Err(NumError::NonScalarLoss {
                shape: self.node(loss).value.shape().to_vec(),
            });
        }
        self.backward_done = true;

        for node in &mut self.nodes {
            node.grad = Some(vec![0.0; node.value.len()]);
        }
        self.nodes[loss.0].grad.as_mut().unwrap()[0] = 1.0;

        // Creation order is topological; one reverse sweep visits each node
        // exactly once.
        for i in (0..self.nodes.len()).rev() {
            let out_grad = self.nodes[i].grad.clone().unwrap();
            if out_grad.iter().all(|&g| g == 0.0) {
                continue;
            }
            match self.nodes[i].op.clone() {
                Op::Leaf { .. } => {}
                Op::Dense { x, w, b } => self.backward_dense(i, x, w, b, &out_grad),
                Op::Relu { x } => {
                    let xv = self.nodes[x.0].value.data().to_vec();
                    let gx = self.nodes[x.0].grad.as_mut().unwrap();
                    for (j, &g) in out_grad.iter().enumerate() {
                        if xv[j] > 0.0 {
                            gx[j] += g;
                        }
                    }
                }
                Op::Softmax { x } => {
                    let p = self.nodes[i].value.clone();
                    let (n, k) = (p.rows(), p.cols());
                    let gx = self.nodes[x.0].grad.as_mut().unwrap();
                    for r in 0..n {
                        let pr = p.row(r);
                        let gr = &out_grad[r * k..(r + 1) * k];
                        let dot: f64 = pr.iter().zip(gr).map(|(p, g)| p * g).sum();
                        for c in 0..k {
                            gx[r * k + c] += pr[c] * (gr[c] - dot);
                        }
                    }
                }
                Op::Add { a, b } => {
                    for target in [a, b] {
                        let g = self.nodes[target.0].grad.as_mut().unwrap();
                        for (gt, &go) in g.iter_mut().zip(&out_grad) {
                            *gt += go;
                        }
                    }
                }
                Op::Sum { x } => {
                    let g = self.nodes[x.0].grad.as_mut().unwrap();
                    for gt in g.iter_mut() {
                        *gt += out_grad[0];
                    }
                }
                Op::CeLogits { logits, labels } => {
                    let t = self.nodes[logits.0].value.clone();
                    let (n, k) = (t.rows(), t.cols());
                    let scale = out_grad[0] / n as f64;
                    let mut p = vec![0.0; k];
                    let gx = self.nodes[logits.0].grad.as_mut().unwrap();
                    for (r, &label) in labels.iter().enumerate() {
                        softmax_row(t.row(r), &mut p);
                        for c in 0..k {
                            let indicator = if c == label { 1.0 } else { 0.0 };
                            gx[r * k + c] += scale * (p[c] - indicator);
                        }
                    }
                }
                Op::CeProbs { probs, labels } => {
                    let t = self.nodes[probs.0].value.clone();
                    let n = t.rows();
                    let k = t.cols();
                    let scale = out_grad[0] / n as f64;
                    let gx = self.nodes[probs.0].grad.as_mut().unwrap();
                    for (r, &label) in labels.iter().enumerate() {
                        let p = t.row(r)[label];
                        // Clamped entries sit on the flat part of the loss.
                        if p > super::tensor::PROB_CLAMP {
                            gx[r * k + label] += scale * (-1.0 / p);
                        }
                    }
                }
                Op::KdLoss {
                    student,
                    teacher,
                    temperature,
                } => {
                    let s = self.nodes[student.0].value.clone();
                    let t = self.nodes[teacher.0].value.clone();
                    let (n, k) = (s.rows(), s.cols());
                    // d/ds of T²·mean KL = (T / n)·(softmax(s/T) − softmax(t/T))
                    let scale = out_grad[0] * temperature / n as f64;
                    let mut ps = vec![0.0; k];
                    let mut pt = vec![0.0; k];
                    let mut scaled = vec![0.0; k];
                    let gx = self.nodes[student.0].grad.as_mut().unwrap();
                    for r in 0..n {
                        for c in 0..k {
                            scaled[c] = s.row(r)[c] / temperature;
                        }
                        softmax_row(&scaled, &mut ps);
                        for c in 0..k {
                            scaled[c] = t.row(r)[c] / temperature;
                        }
                        softmax_row(&scaled, &mut pt);
                        for c in 0..k {
                            gx[r * k + c] += scale * (ps[c] - pt[c]);
                        }
                    }
                }
            }
        }

        // Drop gradients for constants so freeze contracts are visible.
        for node in &mut self.nodes {
            if let Op::Leaf { trainable: false } = node.op {
                node.grad = None;
            }
        }
        Ok(())
    }

    fn backward_dense(&mut self, _node: usize, x: Var, w: Var, b: Var, out_grad: &[f64]) {
        let xv = self.nodes[x.0].value.clone();
        let wv = self.nodes[w.0].value.clone();
        let (n, i) = (xv.rows(), xv.cols());
        let o = wv.cols();

        // dx = dy · Wᵀ
        {
            let gx = self.nodes[x.0].grad.as_mut().unwrap();
            for r in 0..n {
                for c in 0..i {
                    let mut acc = 0.0;
                    for j in 0..o {
                        acc += out_grad[r * o + j] * wv.data()[c * o + j];
                    }
                    gx[r * i + c] += acc;
                }
            }
        }
        // dW = xᵀ · dy
        {
            let gw = self.nodes[w.0].grad.as_mut().unwrap();
            for r in 0..n {
                for c in 0..i {
                    let xv_rc = xv.data()[r * i + c];
                    for j in 0..o {
                        gw[c * o + j] += xv_rc * out_grad[r * o + j];
                    }
                }
            }
        }
        // db = column sums of dy
        {
            let gb = self.nodes[b.0].grad.as_mut().unwrap();
            for r in 0..n {
                for j in 0..o {
                    gb[j] += out_grad[r * o + j];
                }
            }
        }
        let _ = check_dense_shapes(xv.shape(), wv.shape(), &[o]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tensor(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn sum_of_param_yields_all_ones_grad() {
        let mut g = Graph::new();
        let w = g.param(&tensor(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let loss = g.sum(w);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn constants_receive_no_grad() {
        let mut g = Graph::new();
        let frozen = g.constant(&tensor(vec![2, 2], vec![1.0; 4]));
        let trained = g.param(&tensor(vec![1, 2], vec![1.0, 2.0]));
        let b = g.constant(&Tensor::zeros(vec![2]));
        let y = g.dense(trained, frozen, b).unwrap();
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        assert!(g.grad(frozen).is_none());
        assert!(g.grad(trained).is_some());
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut g = Graph::new();
        let w = g.param(&Tensor::scalar(1.0));
        let loss = g.sum(w);
        g.backward(loss).unwrap();
        assert!(matches!(g.backward(loss), Err(NumError::BackwardTwice)));
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut g = Graph::new();
        let w = g.param(&tensor(vec![1, 2], vec![1.0, 2.0]));
        assert!(matches!(
            g.backward(w),
            Err(NumError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn cross_entropy_certain_correct_is_zero() {
        let mut g = Graph::new();
        let p = g.constant(&tensor(vec![1, 2], vec![1.0, 0.0]));
        let loss = g.cross_entropy_probs(p, &[0]).unwrap();
        assert!(g.scalar_value(loss).abs() <= 1e-12);
    }

    #[test]
    fn cross_entropy_uniform_binary_is_ln2() {
        let mut g = Graph::new();
        let p = g.constant(&tensor(vec![1, 2], vec![0.5, 0.5]));
        let loss = g.cross_entropy_probs(p, &[1]).unwrap();
        assert!((g.scalar_value(loss) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_batch_matches_scalar_sum_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let logits = Tensor::randn(vec![4, 3], 1.0, &mut rng);
        let probs = softmax_eval(&logits);
        let labels = [2usize, 0, 1, 1];

        let mut expect = 0.0;
        for (r, &l) in labels.iter().enumerate() {
            expect -= probs.row(r)[l].ln();
        }
        expect /= 4.0;

        let mut g = Graph::new();
        let p = g.constant(&probs);
        let loss = g.cross_entropy_probs(p, &labels).unwrap();
        assert!((g.scalar_value(loss) - expect).abs() < 1e-12);

        // Fused logits entry point agrees with the probability path.
        let lv = g.constant(&logits);
        let loss2 = g.cross_entropy_logits(lv, &labels).unwrap();
        assert!((g.scalar_value(loss2) - expect).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_clamps_and_counts() {
        let mut g = Graph::new();
        let p = g.constant(&tensor(vec![2, 2], vec![0.0, 1.0, 0.5, 0.5]));
        let loss = g.cross_entropy_probs(p, &[0, 0]).unwrap();
        assert_eq!(g.clamp_events(), 1);
        assert!(g.scalar_value(loss).is_finite());
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut g = Graph::new();
        let p = g.constant(&tensor(vec![1, 2], vec![0.5, 0.5]));
        assert!(matches!(
            g.cross_entropy_probs(p, &[2]),
            Err(NumError::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn kd_loss_zero_for_identical_logits() {
        let mut g = Graph::new();
        let s = g.param(&tensor(vec![2, 3], vec![0.3, -1.0, 2.0, 0.0, 0.5, 1.0]));
        let t = g.constant(&tensor(vec![2, 3], vec![0.3, -1.0, 2.0, 0.0, 0.5, 1.0]));
        let loss = g.kd_loss(s, t, 1.0).unwrap();
        assert_eq!(g.scalar_value(loss), 0.0);
    }

    #[test]
    fn kd_loss_two_class_closed_form() {
        // teacher [1,0], student [0,1], T=1: KL = (e−1)/(e+1).
        let e = std::f64::consts::E;
        let expect = (e - 1.0) / (e + 1.0);
        let mut g = Graph::new();
        let s = g.param(&tensor(vec![1, 2], vec![0.0, 1.0]));
        let t = g.constant(&tensor(vec![1, 2], vec![1.0, 0.0]));
        let loss = g.kd_loss(s, t, 1.0).unwrap();
        assert!((g.scalar_value(loss) - expect).abs() < 1e-12);
        assert!((g.scalar_value(loss) - 0.462_117_157_260_009_76).abs() < 1e-12);
    }

    #[test]
    fn kd_loss_matches_direct_formula_at_higher_temperature() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = Tensor::randn(vec![3, 4], 1.5, &mut rng);
        let t = Tensor::randn(vec![3, 4], 1.5, &mut rng);
        for temp in [0.5, 1.0, 2.0, 4.0] {
            // Direct evaluation of T²·mean KL at softened distributions.
            let mut expect = 0.0;
            for r in 0..3 {
                let soft = |row: &[f64]| {
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = row.iter().map(|&v| ((v / temp) - (m / temp)).exp()).collect();
                    let z: f64 = e.iter().sum();
                    e.into_iter().map(|v| v / z).collect::<Vec<f64>>()
                };
                let ps = soft(s.row(r));
                let pt = soft(t.row(r));
                for c in 0..4 {
                    expect += pt[c] * (pt[c] / ps[c]).ln();
                }
            }
            expect = expect * temp * temp / 3.0;

            let mut g = Graph::new();
            let sv = g.param(&s);
            let tv = g.constant(&t);
            let loss = g.kd_loss(sv, tv, temp).unwrap();
            assert!(
                (g.scalar_value(loss) - expect).abs() < 1e-10,
                "temp {temp}"
            );
        }
    }

    #[test]
    fn kd_loss_rejects_nonpositive_temperature() {
        let mut g = Graph::new();
        let s = g.param(&tensor(vec![1, 2], vec![0.0, 1.0]));
        let t = g.constant(&tensor(vec![1, 2], vec![1.0, 0.0]));
        assert!(matches!(
            g.kd_loss(s, t, 0.0),
            Err(NumError::NonPositiveTemperature(_))
        ));
    }

    #[test]
    fn kd_grad_flows_to_student_only() {
        let mut g = Graph::new();
        let s = g.param(&tensor(vec![1, 2], vec![0.0, 1.0]));
        let t = g.param(&tensor(vec![1, 2], vec![1.0, 0.0]));
        let loss = g.kd_loss(s, t, 1.0).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(s).unwrap().iter().any(|&v| v != 0.0));
        assert!(g.grad(t).unwrap().iter().all(|&v| v == 0.0));
    }

    /// Central finite differences against the analytic gradient of a small
    /// two-layer network ending in each supported loss.
    #[test]
    fn gradcheck_two_layer_network() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = Tensor::randn(vec![3, 4], 1.0, &mut rng);
        let w1 = Tensor::randn(vec![4, 5], 0.8, &mut rng);
        let b1 = Tensor::randn(vec![5], 0.4, &mut rng);
        let w2 = Tensor::randn(vec![5, 3], 0.8, &mut rng);
        let b2 = Tensor::randn(vec![3], 0.4, &mut rng);
        let labels = [0usize, 2, 1];
        let teacher = Tensor::randn(vec![3, 3], 1.0, &mut rng);

        #[derive(Clone, Copy)]
        enum LossKind {
            Ce,
            Kd,
            SoftmaxCeProbs,
        }

        let eval = |params: &[Tensor], kind: LossKind| -> f64 {
            let mut g = Graph::new();
            let xv = g.constant(&x);
            let w1v = g.param(&params[0]);
            let b1v = g.param(&params[1]);
            let w2v = g.param(&params[2]);
            let b2v = g.param(&params[3]);
            let h = g.dense(xv, w1v, b1v).unwrap();
            let h = g.relu(h);
            let logits = g.dense(h, w2v, b2v).unwrap();
            let loss = match kind {
                LossKind::Ce => g.cross_entropy_logits(logits, &labels).unwrap(),
                LossKind::Kd => {
                    let t = g.constant(&teacher);
                    g.kd_loss(logits, t, 2.0).unwrap()
                }
                LossKind::SoftmaxCeProbs => {
                    let p = g.softmax(logits);
                    g.cross_entropy_probs(p, &labels).unwrap()
                }
            };
            g.scalar_value(loss)
        };

        for kind in [LossKind::Ce, LossKind::Kd, LossKind::SoftmaxCeProbs] {
            let params = vec![w1.clone(), b1.clone(), w2.clone(), b2.clone()];
            // Analytic gradients.
            let mut g = Graph::new();
            let xv = g.constant(&x);
            let w1v = g.param(&params[0]);
            let b1v = g.param(&params[1]);
            let w2v = g.param(&params[2]);
            let b2v = g.param(&params[3]);
            let h = g.dense(xv, w1v, b1v).unwrap();
            let h = g.relu(h);
            let logits = g.dense(h, w2v, b2v).unwrap();
            let loss = match kind {
                LossKind::Ce => g.cross_entropy_logits(logits, &labels).unwrap(),
                LossKind::Kd => {
                    let t = g.constant(&teacher);
                    g.kd_loss(logits, t, 2.0).unwrap()
                }
                LossKind::SoftmaxCeProbs => {
                    let p = g.softmax(logits);
                    g.cross_entropy_probs(p, &labels).unwrap()
                }
            };
            g.backward(loss).unwrap();
            let analytic: Vec<Vec<f64>> = [w1v, b1v, w2v, b2v]
                .iter()
                .map(|&v| g.grad(v).unwrap().to_vec())
                .collect();

            let h_step = 1e-5;
            for (pi, grad) in analytic.iter().enumerate() {
                for j in 0..grad.len() {
                    let mut plus = params.clone();
                    plus[pi].data_mut()[j] += h_step;
                    let mut minus = params.clone();
                    minus[pi].data_mut()[j] -= h_step;
                    let numeric = (eval(&plus, kind) - eval(&minus, kind)) / (2.0 * h_step);
                    let denom = numeric.abs().max(grad[j].abs()).max(1e-6);
                    assert!(
                        (numeric - grad[j]).abs() / denom < 1e-4,
                        "param {pi} entry {j}: analytic {} vs numeric {numeric}",
                        grad[j]
                    );
                }
            }
        }
    }
}
