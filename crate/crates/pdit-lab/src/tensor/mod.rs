//! Dense f32 tensors with reverse-mode automatic differentiation.
//!
//! The autodiff engine is a Wengert tape ([`Tape`]): forward values are
//! computed eagerly as operations are recorded, and [`Tape::backward`]
//! replays the recorded nodes in reverse to accumulate gradients. Everything
//! is single-threaded, row-major f32; identical tapes produce bit-identical
//! gradients.

mod adam;
mod gradcheck;
mod tape;

pub use adam::{adam_step, AdamHyper, AdamState};
pub use gradcheck::grad_check;
pub use tape::{Op, Tape, ValueId};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("attention mask row {0} is fully masked")]
    FullyMaskedRow(usize),
    #[error("zero-norm row {0} cannot be normalized")]
    ZeroNormRow(usize),
    #[error("index {index} out of range for dimension of size {bound}")]
    IndexOutOfRange { index: usize, bound: usize },
    #[error("{0}")]
    Invalid(String),
}

/// Dense row-major f32 tensor. A scalar is represented by an empty shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor { shape, data, requires_grad: false, grad: None }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n])
    }

    pub fn scalar(v: f32) -> Self {
        Tensor::new(vec![], vec![v])
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// Scalar value; panics if the tensor is not single-element.
    pub fn item(&self) -> f32 {
        assert!(self.is_scalar(), "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Zeroed gradient buffer matching the data shape.
    pub fn zero_grad(&mut self) {
        self.grad = Some(vec![0.0; self.data.len()]);
    }
}

/// Softmax along `axis`; the output sums to 1 along that axis.
///
/// Errors on non-finite input.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor, TensorError> {
    if !x.is_finite() {
        return Err(TensorError::NonFinite("softmax input".into()));
    }
    if axis >= x.shape.len().max(1) {
        return Err(TensorError::Invalid(format!(
            "softmax axis {} out of range for shape {:?}",
            axis, x.shape
        )));
    }
    let mut tape = Tape::new();
    let xid = tape.leaf_tensor(x);
    let out = tape.softmax(xid, axis);
    Ok(tape.tensor(out))
}

/// Scaled dot-product attention: `softmax(Q K^T / sqrt(d_k)) V`.
///
/// `q` is `[n, d_k]`, `k` is `[m, d_k]`, `v` is `[m, d_v]`. `mask`, when
/// present, is a row-major `[n, m]` boolean matrix where `true` marks
/// attendable positions; a fully-masked row is an error. The output row `i`
/// is a convex combination of the rows of `v`.
pub fn attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: Option<&[bool]>,
) -> Result<Tensor, TensorError> {
    if q.shape.len() != 2 || k.shape.len() != 2 || v.shape.len() != 2 {
        return Err(TensorError::ShapeMismatch(format!(
            "attention expects matrices, got {:?} {:?} {:?}",
            q.shape, k.shape, v.shape
        )));
    }
    let (n, d_k) = (q.shape[0], q.shape[1]);
    let m = k.shape[0];
    if k.shape[1] != d_k {
        return Err(TensorError::ShapeMismatch(format!(
            "query dim {} vs key dim {}",
            d_k, k.shape[1]
        )));
    }
    if v.shape[0] != m {
        return Err(TensorError::ShapeMismatch(format!(
            "key count {} vs value count {}",
            m, v.shape[0]
        )));
    }
    if let Some(mask) = mask {
        if mask.len() != n * m {
            return Err(TensorError::ShapeMismatch(format!(
                "mask length {} vs {}x{}",
                mask.len(),
                n,
                m
            )));
        }
        for row in 0..n {
            if mask[row * m..(row + 1) * m].iter().all(|&keep| !keep) {
                return Err(TensorError::FullyMaskedRow(row));
            }
        }
    }
    let mut tape = Tape::new();
    let qid = tape.leaf_tensor(q);
    let kid = tape.leaf_tensor(k);
    let vid = tape.leaf_tensor(v);
    let (out, _probs) = tape.attention(qid, kid, vid, mask);
    tape.ensure_finite()?;
    Ok(tape.tensor(out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_uniform_input() {
        let x = Tensor::new(vec![3], vec![1.0, 1.0, 1.0]);
        let y = softmax(&x, 0).unwrap();
        for v in &y.data {
            assert!((v - 1.0 / 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_analytic_two_entries() {
        // e^0 : e^{ln 2} = 1 : 2
        let x = Tensor::new(vec![2], vec![0.0, (2.0f32).ln()]);
        let y = softmax(&x, 0).unwrap();
        assert!((y.data[0] - 1.0 / 3.0).abs() < 1e-6);
        assert!((y.data[1] - 2.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_shift_invariance() {
        let x = Tensor::new(vec![4], vec![0.3, -1.2, 2.0, 0.7]);
        let shifted = Tensor::new(vec![4], x.data.iter().map(|v| v + 5.0).collect());
        let a = softmax(&x, 0).unwrap();
        let b = softmax(&shifted, 0).unwrap();
        for (u, w) in a.data.iter().zip(&b.data) {
            assert!((u - w).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_rejects_nan() {
        let x = Tensor::new(vec![2], vec![f32::NAN, 0.0]);
        assert!(softmax(&x, 0).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(vec![3, 4], (0..12).map(|i| (i as f32) * 0.37 - 2.0).collect());
        let y = softmax(&x, 1).unwrap();
        for r in 0..3 {
            let s: f32 = y.data[r * 4..(r + 1) * 4].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn attention_single_key_returns_value_row() {
        let q = Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 0.0, 0.0, 1.0]);
        let k = Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]);
        let v = Tensor::new(vec![1, 4], vec![9.0, -2.0, 0.5, 7.0]);
        let out = attention(&q, &k, &v, None).unwrap();
        assert_eq!(out.shape, vec![2, 4]);
        for r in 0..2 {
            assert_eq!(&out.data[r * 4..(r + 1) * 4], &v.data[..]);
        }
    }

    #[test]
    fn attention_equal_scores_average_values() {
        // Q orthogonal to both keys: both scores 0, softmax uniform.
        let q = Tensor::new(vec![1, 2], vec![0.0, 0.0]);
        let k = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let v = Tensor::new(vec![2, 2], vec![2.0, 4.0, 6.0, 8.0]);
        let out = attention(&q, &k, &v, None).unwrap();
        assert!((out.data[0] - 4.0).abs() < 1e-6);
        assert!((out.data[1] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn attention_scales_by_inv_sqrt_dk() {
        // d_k = 4 and a raw dot product of 2 must give a pre-softmax score of
        // 1.0. With a second key of raw score 0, softmax(1, 0) is forced.
        let q = Tensor::new(vec![1, 4], vec![1.0, 1.0, 0.0, 0.0]);
        let k = Tensor::new(vec![2, 4], vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let v = Tensor::new(vec![2, 1], vec![1.0, 0.0]);
        let out = attention(&q, &k, &v, None).unwrap();
        let e = 1.0f32.exp();
        assert!((out.data[0] - e / (e + 1.0)).abs() < 1e-6);
    }

    #[test]
    fn attention_fully_masked_row_errors() {
        let q = Tensor::new(vec![1, 2], vec![1.0, 0.0]);
        let k = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let v = Tensor::new(vec![2, 1], vec![1.0, 2.0]);
        let mask = vec![false, false];
        match attention(&q, &k, &v, Some(&mask)) {
            Err(TensorError::FullyMaskedRow(0)) => {}
            other => panic!("expected fully-masked error, got {:?}", other),
        }
    }

    #[test]
    fn attention_output_in_convex_hull_of_values() {
        let q = Tensor::new(vec![3, 2], vec![0.4, -0.2, 1.5, 0.3, -0.7, 0.9]);
        let k = Tensor::new(vec![4, 2], vec![1.0, 0.2, -0.3, 0.8, 0.5, -0.5, 0.0, 1.0]);
        let v = Tensor::new(vec![4, 3], (0..12).map(|i| (i as f32) * 0.5 - 3.0).collect());
        let out = attention(&q, &k, &v, None).unwrap();
        for c in 0..3 {
            let col: Vec<f32> = (0..4).map(|r| v.data[r * 3 + c]).collect();
            let lo = col.iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = col.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            for r in 0..3 {
                let y = out.data[r * 3 + c];
                assert!(y >= lo - 1e-5 && y <= hi + 1e-5);
            }
        }
    }
}
