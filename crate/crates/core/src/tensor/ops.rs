//! Forward operations. Every public op validates shapes, checks the result
//! for non-finite values, and records itself when any input is connected.

use super::{Node, Op, Result, Tensor, TensorError};
use std::sync::Arc;

/// Clamp window applied to predictions before the logs in binary
/// cross-entropy, bounding the loss and its gradients.
pub const BCE_EPS: f64 = 1e-7;

/// How the right operand of an elementwise op lines up with the left.
#[derive(Clone, Copy, PartialEq)]
enum Align {
    Same,
    /// rhs is `[1, n]`, repeated across the rows of lhs `[m, n]`.
    Row,
    /// rhs is `[1, 1]`, applied to every element.
    Scalar,
}

fn align(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Align> {
    if a.shape() == b.shape() {
        Ok(Align::Same)
    } else if b.rows() == 1 && b.cols() == 1 {
        Ok(Align::Scalar)
    } else if b.rows() == 1 && b.cols() == a.cols() {
        Ok(Align::Row)
    } else {
        Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })
    }
}

fn finish(op: &'static str, rows: usize, cols: usize, data: Vec<f64>, node: Option<Node>) -> Result<Tensor> {
    if !data.iter().all(|v| v.is_finite()) {
        return Err(TensorError::NonFinite { op });
    }
    Ok(Tensor::from_parts(rows, cols, data, node))
}

fn record(connected: bool, op: Op) -> Option<Node> {
    connected.then_some(Node::Op(op))
}

fn elementwise(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
    make: impl FnOnce(Tensor, Tensor) -> Op,
) -> Result<Tensor> {
    let kind = align(op, a, b)?;
    let (ad, bd) = (a.data(), b.data());
    let data: Vec<f64> = match kind {
        Align::Same => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
        Align::Scalar => ad.iter().map(|&x| f(x, bd[0])).collect(),
        Align::Row => {
            let n = a.cols();
            ad.iter()
                .enumerate()
                .map(|(i, &x)| f(x, bd[i % n]))
                .collect()
        }
    };
    let node = record(a.is_connected() || b.is_connected(), make(a.clone(), b.clone()));
    finish(op, a.rows(), a.cols(), data, node)
}

fn unary(
    op: &'static str,
    x: &Tensor,
    f: impl Fn(f64) -> f64,
    make: impl FnOnce(Tensor) -> Op,
) -> Result<Tensor> {
    let data: Vec<f64> = x.data().iter().map(|&v| f(v)).collect();
    let node = record(x.is_connected(), make(x.clone()));
    finish(op, x.rows(), x.cols(), data, node)
}

impl Tensor {
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        elementwise("add", self, rhs, |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        elementwise("sub", self, rhs, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        elementwise("mul", self, rhs, |x, y| x * y, Op::Mul)
    }

    pub fn div(&self, rhs: &Tensor) -> Result<Tensor> {
        elementwise("div", self, rhs, |x, y| x / y, Op::Div)
    }

    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.cols() != rhs.rows() {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            });
        }
        let (m, k, n) = (self.rows(), self.cols(), rhs.cols());
        let data = matmul_raw(self.data(), rhs.data(), m, k, n);
        let node = record(
            self.is_connected() || rhs.is_connected(),
            Op::Matmul(self.clone(), rhs.clone()),
        );
        finish("matmul", m, n, data, node)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = (self.rows(), self.cols());
        let src = self.data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let node = record(self.is_connected(), Op::Transpose(self.clone()));
        finish("transpose", n, m, data, node)
    }

    pub fn relu(&self) -> Result<Tensor> {
        unary("relu", self, |v| v.max(0.0), Op::Relu)
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        unary("sigmoid", self, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid)
    }

    pub fn ln(&self) -> Result<Tensor> {
        unary("ln", self, f64::ln, Op::Ln)
    }

    pub fn clamp_values(&self, lo: f64, hi: f64) -> Result<Tensor> {
        unary("clamp", self, |v| v.clamp(lo, hi), |x| Op::Clamp { x, lo, hi })
    }

    pub fn neg(&self) -> Result<Tensor> {
        unary("neg", self, |v| -v, Op::Neg)
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        unary("scale", self, |v| c * v, |x| Op::Scale(x, c))
    }

    /// Sum of all elements, as `[1, 1]`.
    pub fn sum_all(&self) -> Result<Tensor> {
        let s = self.data().iter().sum();
        let node = record(self.is_connected(), Op::SumAll(self.clone()));
        finish("sum_all", 1, 1, vec![s], node)
    }

    /// Arithmetic mean of all elements, as `[1, 1]`.
    pub fn mean_all(&self) -> Result<Tensor> {
        let s: f64 = self.data().iter().sum();
        let n = self.numel() as f64;
        let node = record(self.is_connected(), Op::MeanAll(self.clone()));
        finish("mean_all", 1, 1, vec![s / n], node)
    }

    /// Column sums: `[m, n]` -> `[1, n]`.
    pub fn sum_rows(&self) -> Result<Tensor> {
        let (m, n) = (self.rows(), self.cols());
        let src = self.data();
        let mut data = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                data[j] += src[i * n + j];
            }
        }
        let node = record(self.is_connected(), Op::SumRows(self.clone()));
        finish("sum_rows", 1, n, data, node)
    }

    /// Repeats a `[1, n]` row `m` times.
    pub fn broadcast_rows(&self, m: usize) -> Result<Tensor> {
        if self.rows() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "broadcast_rows",
                lhs: self.shape().to_vec(),
                rhs: vec![1, self.cols()],
            });
        }
        let n = self.cols();
        let mut data = Vec::with_capacity(m * n);
        for _ in 0..m {
            data.extend_from_slice(self.data());
        }
        let node = record(self.is_connected(), Op::BroadcastRows(self.clone()));
        finish("broadcast_rows", m, n, data, node)
    }

    /// Fills `[rows, cols]` with the value of a `[1, 1]` tensor.
    pub fn broadcast_scalar(&self, rows: usize, cols: usize) -> Result<Tensor> {
        if !self.is_scalar() {
            return Err(TensorError::NotScalar {
                shape: self.shape().to_vec(),
            });
        }
        let v = self.data()[0];
        let node = record(self.is_connected(), Op::BroadcastScalar(self.clone()));
        finish("broadcast_scalar", rows, cols, vec![v; rows * cols], node)
    }

    /// Columns `start .. start + len`.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        let (m, n) = (self.rows(), self.cols());
        if start + len > n {
            return Err(TensorError::ShapeMismatch {
                op: "slice_cols",
                lhs: self.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let src = self.data();
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let node = record(self.is_connected(), Op::SliceCols { x: self.clone(), start, len });
        finish("slice_cols", m, len, data, node)
    }

    /// Selects rows by index; indices may repeat.
    pub fn gather_rows(&self, idx: &Arc<Vec<usize>>) -> Result<Tensor> {
        let (m, n) = (self.rows(), self.cols());
        let src = self.data();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx.iter() {
            if i >= m {
                return Err(TensorError::RowIndex { index: i, rows: m });
            }
            data.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let node = record(
            self.is_connected(),
            Op::GatherRows { x: self.clone(), idx: Arc::clone(idx) },
        );
        finish("gather_rows", idx.len(), n, data, node)
    }

    /// Adds row `j` of `self` into row `idx[j]` of a zero `[rows, n]` output.
    pub fn scatter_rows(&self, idx: &Arc<Vec<usize>>, rows: usize) -> Result<Tensor> {
        if idx.len() != self.rows() {
            return Err(TensorError::DimMismatch {
                expected: self.rows(),
                got: idx.len(),
            });
        }
        let n = self.cols();
        let src = self.data();
        let mut data = vec![0.0; rows * n];
        for (j, &i) in idx.iter().enumerate() {
            if i >= rows {
                return Err(TensorError::RowIndex { index: i, rows });
            }
            for c in 0..n {
                data[i * n + c] += src[j * n + c];
            }
        }
        let node = record(
            self.is_connected(),
            Op::ScatterRows { x: self.clone(), idx: Arc::clone(idx) },
        );
        finish("scatter_rows", rows, n, data, node)
    }
}

/// Column-wise concatenation; all parts must share a row count.
pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
    let m = parts.first().map(Tensor::rows).unwrap_or(0);
    if parts.is_empty() || parts.iter().any(|p| p.rows() != m) {
        return Err(TensorError::ShapeMismatch {
            op: "concat_cols",
            lhs: parts.iter().map(Tensor::rows).collect(),
            rhs: vec![m],
        });
    }
    let n: usize = parts.iter().map(Tensor::cols).sum();
    let mut data = Vec::with_capacity(m * n);
    for i in 0..m {
        for p in parts {
            let c = p.cols();
            data.extend_from_slice(&p.data()[i * c..(i + 1) * c]);
        }
    }
    let node = record(
        parts.iter().any(Tensor::is_connected),
        Op::ConcatCols(parts.to_vec()),
    );
    finish("concat_cols", m, n, data, node)
}

/// Elementwise binary cross-entropy `-[y ln p + (1-y) ln(1-p)]`.
///
/// Predictions must lie strictly in (0, 1) and targets in {0, 1}; predictions
/// are clamped to `[BCE_EPS, 1 - BCE_EPS]` before the logs. Built from
/// recorded primitives, so it differentiates (twice) like any other op.
pub fn bce(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    if pred.shape() != target.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "bce",
            lhs: pred.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    if pred.data().iter().any(|&p| p <= 0.0 || p >= 1.0) {
        return Err(TensorError::Domain { op: "bce: prediction outside (0,1)" });
    }
    if target.data().iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(TensorError::Domain { op: "bce: target outside {0,1}" });
    }
    let p = pred.clamp_values(BCE_EPS, 1.0 - BCE_EPS)?;
    let ones = Tensor::filled(pred.rows(), pred.cols(), 1.0);
    let y = target.detach();
    let inv_y = ones.sub(&y)?;
    let pos = y.mul(&p.ln()?)?;
    let neg = inv_y.mul(&ones.sub(&p)?.ln()?)?;
    pos.add(&neg)?.neg()
}

/// Inner product of two same-shape tensors, as `[1, 1]`.
pub fn dot(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.mul(b)?.sum_all()
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row_a = &a[i * k..(i + 1) * k];
        let row_out = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in row_a.iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let row_b = &b[p * n..(p + 1) * n];
            for (o, &bv) in row_out.iter_mut().zip(row_b) {
                *o += a_ip * bv;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_identity() {
        let eye = Tensor::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = Tensor::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = eye.matmul(&m).unwrap();
        assert_eq!(out.data(), m.data());
    }

    #[test]
    fn matmul_rectangular() {
        let a = Tensor::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::new(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), [2, 2]);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::new(2, 3, vec![0.0; 6]).unwrap();
        let b = Tensor::new(2, 2, vec![0.0; 4]).unwrap();
        assert!(matches!(a.matmul(&b), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let x = Tensor::scalar(0.0).unwrap();
        assert_eq!(x.sigmoid().unwrap().item().unwrap(), 0.5);
    }

    #[test]
    fn bce_halfway_is_ln_two() {
        let p = Tensor::scalar(0.5).unwrap();
        let y = Tensor::scalar(1.0).unwrap();
        let loss = bce(&p, &y).unwrap().item().unwrap();
        assert!(close(loss, std::f64::consts::LN_2, 1e-12), "{loss}");
    }

    #[test]
    fn bce_rejects_bad_domain() {
        let y = Tensor::scalar(1.0).unwrap();
        let p_bad = Tensor::scalar(1.0).unwrap();
        assert!(matches!(bce(&p_bad, &y), Err(TensorError::Domain { .. })));
        let p = Tensor::scalar(0.5).unwrap();
        let y_bad = Tensor::scalar(0.5).unwrap();
        assert!(matches!(bce(&p, &y_bad), Err(TensorError::Domain { .. })));
    }

    #[test]
    fn bce_loss_shrinks_as_prediction_approaches_target() {
        let y = Tensor::scalar(1.0).unwrap();
        let mut prev = f64::INFINITY;
        for p in [0.5, 0.9, 0.99, 0.9999] {
            let l = bce(&Tensor::scalar(p).unwrap(), &y).unwrap().item().unwrap();
            assert!(l < prev && l >= 0.0);
            prev = l;
        }
    }

    #[test]
    fn row_broadcast_add() {
        let a = Tensor::new(2, 3, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let b = Tensor::new(1, 3, vec![10.0, 20.0, 30.0]).unwrap();
        let c = a.add(&b).unwrap();
        assert_eq!(c.data(), &[10.0, 21.0, 32.0, 13.0, 24.0, 35.0]);
    }

    #[test]
    fn concat_and_slice_are_inverse() {
        let a = Tensor::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(2, 1, vec![5.0, 6.0]).unwrap();
        let c = concat_cols(&[a.clone(), b]).unwrap();
        assert_eq!(c.data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let back = c.slice_cols(0, 2).unwrap();
        assert_eq!(back.data(), a.data());
    }

    #[test]
    fn gather_scatter_roundtrip() {
        let x = Tensor::new(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let idx = Arc::new(vec![2usize, 0]);
        let g = x.gather_rows(&idx).unwrap();
        assert_eq!(g.data(), &[5.0, 6.0, 1.0, 2.0]);
        let s = g.scatter_rows(&idx, 3).unwrap();
        assert_eq!(s.data(), &[1.0, 2.0, 0.0, 0.0, 5.0, 6.0]);
    }

    #[test]
    fn constant_inputs_build_no_graph() {
        let a = Tensor::new(1, 2, vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(1, 2, vec![3.0, 4.0]).unwrap();
        assert!(!a.add(&b).unwrap().is_connected());
        assert!(a.as_leaf().add(&b).unwrap().is_connected());
    }

    #[test]
    fn division_by_zero_is_an_error_not_a_value() {
        let a = Tensor::scalar(1.0).unwrap();
        let b = Tensor::scalar(0.0).unwrap();
        assert!(matches!(a.div(&b), Err(TensorError::NonFinite { .. })));
    }
}
