//! Dense row-major f64 tensors with an optional gradient buffer.

use rand::Rng;
use rand_distr::StandardNormal;

use super::NumError;

/// Dense n-dimensional array of f64, row-major, with an optional gradient
/// buffer of identical shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NumError> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(NumError::DataLength {
                expected,
                got: data.len(),
            });
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            grad: None,
        }
    }

    /// Standard-normal entries scaled by `scale`, drawn in row-major order.
    pub fn randn<R: Rng>(shape: Vec<usize>, scale: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                z * scale
            })
            .collect();
        Self {
            shape,
            data,
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `delta` into the gradient buffer, allocating zeros on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        debug_assert_eq!(delta.len(), self.data.len());
        let grad = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stacks equal-length rows into a [n, dim] tensor.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let dim = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            debug_assert_eq!(r.len(), dim);
            data.extend_from_slice(r);
        }
        Self {
            shape: vec![rows.len(), dim],
            data,
            grad: None,
        }
    }
}

/// y = x·W + b for x:[n,i], w:[i,o], b:[o]. Shared by graph forward and
/// plain evaluation so both paths compute identical bits.
pub fn dense_eval(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor, NumError> {
    check_dense_shapes(x.shape(), w.shape(), b.shape())?;
    let (n, i) = (x.shape[0], x.shape[1]);
    let o = w.shape[1];
    let mut out = vec![0.0; n * o];
    for r in 0..n {
        let x_row = &x.data[r * i..(r + 1) * i];
        let out_row = &mut out[r * o..(r + 1) * o];
        out_row.copy_from_slice(&b.data);
        for (k, &xv) in x_row.iter().enumerate() {
            let w_row = &w.data[k * o..(k + 1) * o];
            for (c, &wv) in w_row.iter().enumerate() {
                out_row[c] += xv * wv;
            }
        }
    }
    Tensor::new(vec![n, o], out)
}

pub fn relu_eval(x: &Tensor) -> Tensor {
    let data = x.data.iter().map(|&v| v.max(0.0)).collect();
    Tensor {
        shape: x.shape.clone(),
        data,
        grad: None,
    }
}

/// Row-wise softmax with per-row max subtraction for overflow safety.
pub fn softmax_eval(x: &Tensor) -> Tensor {
    let (n, k) = (x.shape[0], x.shape[1]);
    let mut out = vec![0.0; n * k];
    for r in 0..n {
        let row = &x.data[r * k..(r + 1) * k];
        let out_row = &mut out[r * k..(r + 1) * k];
        softmax_row(row, out_row);
    }
    Tensor {
        shape: vec![n, k],
        data: out,
        grad: None,
    }
}

pub(crate) fn softmax_row(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        let e = (l - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// log softmax of one row, stabilized by max subtraction.
pub(crate) fn log_softmax_row(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for &l in logits {
        sum += (l - max).exp();
    }
    let lse = max + sum.ln();
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = l - lse;
    }
}

pub(crate) fn check_dense_shapes(
    x: &[usize],
    w: &[usize],
    b: &[usize],
) -> Result<(), NumError> {
    if x.len() != 2 || w.len() != 2 || b.len() != 1 || x[1] != w[0] || w[1] != b[0] {
        return Err(NumError::ShapeMismatch {
            op: "dense",
            expected: format!("x:[n,{i}], w:[{i},{o}], b:[{o}]", i = w.first().copied().unwrap_or(0), o = w.get(1).copied().unwrap_or(0)),
            actual: format!("x:{x:?}, w:{w:?}, b:{b:?}"),
        });
    }
    Ok(())
}

/// Mean −log softmax(logits)[label] over the batch, without a tape.
pub fn cross_entropy_eval(logits: &Tensor, labels: &[usize]) -> f64 {
    let (n, k) = (logits.rows(), logits.cols());
    debug_assert_eq!(labels.len(), n);
    let mut log_p = vec![0.0; k];
    let mut loss = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        log_softmax_row(logits.row(r), &mut log_p);
        loss -= log_p[label];
    }
    loss / n as f64
}

/// Floor used when taking the log of a probability that may have collapsed
/// to zero. Callers count clamp events to surface degenerate inputs.
pub const PROB_CLAMP: f64 = 1e-12;

/// −log(max(p, PROB_CLAMP)); second element is 1 when the clamp fired.
pub fn clamped_neg_log(p: f64) -> (f64, usize) {
    if p <= PROB_CLAMP {
        (-(PROB_CLAMP.ln()), 1)
    } else {
        (-(p.ln()), 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn new_rejects_wrong_length() {
        let err = Tensor::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, NumError::DataLength { expected: 6, got: 5 }));
    }

    #[test]
    fn dense_unit_basis_selects_weight_row() {
        let x = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let w = Tensor::new(vec![2, 2], vec![2.0, 3.0, 4.0, 5.0]).unwrap();
        let b = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        let y = dense_eval(&x, &w, &b).unwrap();
        assert_eq!(y.data(), &[2.0, 3.0]);
    }

    #[test]
    fn dense_zero_input_passes_bias() {
        let x = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let w = Tensor::new(vec![2, 2], vec![9.0, 9.0, 9.0, 9.0]).unwrap();
        let b = Tensor::new(vec![2], vec![7.0, -1.0]).unwrap();
        let y = dense_eval(&x, &w, &b).unwrap();
        assert_eq!(y.data(), &[7.0, -1.0]);
    }

    #[test]
    fn dense_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::randn(vec![3, 4], 1.0, &mut rng);
        let w = Tensor::randn(vec![4, 2], 1.0, &mut rng);
        let b = Tensor::randn(vec![2], 1.0, &mut rng);
        let y = dense_eval(&x, &w, &b).unwrap();

        // Independent naive matmul, plain index arithmetic.
        for r in 0..3 {
            for c in 0..2 {
                let mut expect = b.data()[c];
                for k in 0..4 {
                    expect += x.data()[r * 4 + k] * w.data()[k * 2 + c];
                }
                assert!((y.data()[r * 2 + c] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dense_shape_mismatch_names_dims() {
        let x = Tensor::zeros(vec![1, 3]);
        let w = Tensor::zeros(vec![2, 2]);
        let b = Tensor::zeros(vec![2]);
        let err = dense_eval(&x, &w, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let x = Tensor::new(vec![1, 3], vec![0.0, 0.0, 0.0]).unwrap();
        let p = softmax_eval(&x);
        for &v in p.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_survives_large_logits() {
        let x = Tensor::new(vec![1, 2], vec![1000.0, 0.0]).unwrap();
        let p = softmax_eval(&x);
        assert!(p.is_finite());
        assert!((p.data()[0] - 1.0).abs() < 1e-12);
        assert!(p.data()[1] >= 0.0 && p.data()[1] < 1e-12);
    }

    #[test]
    fn softmax_two_class_closed_form() {
        // softmax([1,0]) = [e/(e+1), 1/(e+1)]
        let e = std::f64::consts::E;
        let x = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let p = softmax_eval(&x);
        assert!((p.data()[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((p.data()[1] - 1.0 / (e + 1.0)).abs() < 1e-15);
        assert!((p.data()[0] - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!((p.data()[1] - 0.268_941_421_369_995_1).abs() < 1e-12);
    }
}
