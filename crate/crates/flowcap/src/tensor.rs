//! Dense row-major f64 tensors, the numeric currency of the crate.
//!
//! Only rank 1 (vectors) and rank 2 (matrices) are needed. Matrices store
//! samples as columns when used for batches, so a batch of B states of width
//! q has shape `[q, B]`.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) || n != data.len() {
            return Err(Error::InvalidArgument(format!(
                "shape {:?} does not describe {} elements",
                shape,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn vector(data: &[f64]) -> Self {
        Tensor {
            shape: vec![data.len()],
            data: data.to_vec(),
        }
    }

    /// Matrix from rows.
    pub fn matrix(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map(|r| r.len()).unwrap_or(0);
        if m == 0 || n == 0 || rows.iter().any(|r| r.len() != n) {
            return Err(Error::InvalidArgument("ragged or empty matrix".into()));
        }
        let mut data = Vec::with_capacity(m * n);
        for r in rows {
            data.extend_from_slice(r);
        }
        Ok(Tensor {
            shape: vec![m, n],
            data,
        })
    }

    /// Matrix of shape `[rows, cols]` whose columns are the given vectors.
    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let b = columns.len();
        let q = columns.first().map(|c| c.len()).unwrap_or(0);
        if b == 0 || q == 0 || columns.iter().any(|c| c.len() != q) {
            return Err(Error::InvalidArgument("ragged or empty column set".into()));
        }
        let mut data = vec![0.0; q * b];
        for (j, col) in columns.iter().enumerate() {
            for (i, &v) in col.iter().enumerate() {
                data[i * b + j] = v;
            }
        }
        Ok(Tensor {
            shape: vec![q, b],
            data,
        })
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Scalar payload; panics if the tensor has more than one element.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Number of columns when treated as a matrix; 1 for vectors.
    pub fn cols(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[1]
        } else {
            1
        }
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Column `j` as a plain vector.
    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows()).map(|i| self.at(i, j)).collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    Ok(())
}

/// Broadcast classification for elementwise binary ops: shapes must match,
/// or one side must be a scalar.
pub(crate) enum Broadcast {
    Same,
    ScalarLhs,
    ScalarRhs,
}

pub(crate) fn broadcast_kind(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Broadcast> {
    if a.shape == b.shape {
        Ok(Broadcast::Same)
    } else if a.is_scalar() {
        Ok(Broadcast::ScalarLhs)
    } else if b.is_scalar() {
        Ok(Broadcast::ScalarRhs)
    } else {
        Err(Error::ShapeMismatch {
            op,
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        })
    }
}

fn zip_elementwise(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    match broadcast_kind(op, a, b)? {
        Broadcast::Same => Ok(Tensor {
            shape: a.shape.clone(),
            data: a
                .data
                .iter()
                .zip(&b.data)
                .map(|(&x, &y)| f(x, y))
                .collect(),
        }),
        Broadcast::ScalarLhs => {
            let s = a.data[0];
            Ok(Tensor {
                shape: b.shape.clone(),
                data: b.data.iter().map(|&y| f(s, y)).collect(),
            })
        }
        Broadcast::ScalarRhs => {
            let s = b.data[0];
            Ok(Tensor {
                shape: a.shape.clone(),
                data: a.data.iter().map(|&x| f(x, s)).collect(),
            })
        }
    }
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_elementwise("add", a, b, |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_elementwise("sub", a, b, |x, y| x - y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_elementwise("mul", a, b, |x, y| x * y)
}

pub fn scale(a: &Tensor, c: f64) -> Tensor {
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().map(|&x| c * x).collect(),
    }
}

fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().map(|&x| f(x)).collect(),
    }
}

pub fn relu(a: &Tensor) -> Tensor {
    map(a, |x| if x > 0.0 { x } else { 0.0 })
}

pub fn tanh(a: &Tensor) -> Tensor {
    map(a, f64::tanh)
}

pub fn cos(a: &Tensor) -> Tensor {
    map(a, f64::cos)
}

pub fn sin(a: &Tensor) -> Tensor {
    map(a, f64::sin)
}

/// `A @ B` for `A [m,k]` with `B [k,n]` or `B [k]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mismatch = || Error::ShapeMismatch {
        op: "matmul",
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    };
    if a.shape.len() != 2 {
        return Err(mismatch());
    }
    let (m, k) = (a.shape[0], a.shape[1]);
    match b.shape.len() {
        1 => {
            if b.shape[0] != k {
                return Err(mismatch());
            }
            let mut out = vec![0.0; m];
            for i in 0..m {
                let row = &a.data[i * k..(i + 1) * k];
                out[i] = row.iter().zip(&b.data).map(|(&x, &y)| x * y).sum();
            }
            Ok(Tensor {
                shape: vec![m],
                data: out,
            })
        }
        2 => {
            if b.shape[0] != k {
                return Err(mismatch());
            }
            let n = b.shape[1];
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for l in 0..k {
                    let aik = a.data[i * k + l];
                    if aik == 0.0 {
                        continue;
                    }
                    let brow = &b.data[l * n..(l + 1) * n];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for j in 0..n {
                        orow[j] += aik * brow[j];
                    }
                }
            }
            Ok(Tensor {
                shape: vec![m, n],
                data: out,
            })
        }
        _ => Err(mismatch()),
    }
}

pub fn transpose(a: &Tensor) -> Tensor {
    match a.shape.len() {
        2 => {
            let (m, n) = (a.shape[0], a.shape[1]);
            let mut data = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    data[j * m + i] = a.data[i * n + j];
                }
            }
            Tensor {
                shape: vec![n, m],
                data,
            }
        }
        _ => Tensor {
            shape: vec![1, a.shape[0]],
            data: a.data.clone(),
        },
    }
}

/// `W x + b` with `W [m,n]`, `x [n]` or `[n,B]`, `b [m]` broadcast over columns.
pub fn affine(w: &Tensor, x: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut y = matmul(w, x)?;
    let m = w.shape[0];
    if b.shape != [m] {
        return Err(Error::ShapeMismatch {
            op: "affine",
            lhs: w.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let cols = y.cols();
    for i in 0..m {
        for j in 0..cols {
            y.data[i * cols + j] += b.data[i];
        }
    }
    Ok(y)
}

/// Mean squared error over all elements; returns a scalar tensor.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("mse", a, b)?;
    let n = a.data.len() as f64;
    let s: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum();
    Ok(Tensor::scalar(s / n))
}

pub fn sum(a: &Tensor) -> Tensor {
    Tensor::scalar(a.data.iter().sum())
}

pub fn dot(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("dot", a, b)?;
    Ok(Tensor::scalar(
        a.data.iter().zip(&b.data).map(|(&x, &y)| x * y).sum(),
    ))
}

/// Rows `start..start+len`, preserving column count.
pub fn slice_rows(a: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    if start + len > a.rows() || len == 0 {
        return Err(Error::InvalidArgument(format!(
            "row slice {}..{} out of bounds for shape {:?}",
            start,
            start + len,
            a.shape
        )));
    }
    let cols = a.cols();
    let data = a.data[start * cols..(start + len) * cols].to_vec();
    let shape = if a.shape.len() == 2 {
        vec![len, cols]
    } else {
        vec![len]
    };
    Ok(Tensor { shape, data })
}

/// Stack along the row dimension; column counts must agree.
pub fn concat_rows(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.cols() != b.cols() || a.shape.len() != b.shape.len() {
        return Err(Error::ShapeMismatch {
            op: "concat_rows",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut data = a.data.clone();
    data.extend_from_slice(&b.data);
    let shape = if a.shape.len() == 2 {
        vec![a.rows() + b.rows(), a.cols()]
    } else {
        vec![a.rows() + b.rows()]
    };
    Ok(Tensor { shape, data })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_matches_hand_value() {
        let w = Tensor::matrix(&[vec![2.0]]).unwrap();
        let x = Tensor::vector(&[3.0]);
        let b = Tensor::vector(&[1.0]);
        assert_eq!(affine(&w, &x, &b).unwrap().data(), &[7.0]);
    }

    #[test]
    fn relu_definition() {
        let x = Tensor::vector(&[-1.0, 0.0, 2.0]);
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn mse_of_identical_inputs_is_zero() {
        let a = Tensor::vector(&[1.0, 2.0]);
        assert_eq!(mse(&a, &a).unwrap().item(), 0.0);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let a = Tensor::vector(&[1.0, 2.0]);
        let b = Tensor::vector(&[1.0, 2.0, 3.0]);
        let err = add(&a, &b).unwrap_err().to_string();
        assert!(err.contains("[2]") && err.contains("[3]"), "{err}");
    }

    #[test]
    fn matmul_batch_columns() {
        let w = Tensor::matrix(&[vec![1.0, 2.0], vec![0.0, 1.0]]).unwrap();
        let x = Tensor::from_columns(&[vec![1.0, 1.0], vec![2.0, 0.0]]).unwrap();
        let y = matmul(&w, &x).unwrap();
        assert_eq!(y.column(0), vec![3.0, 1.0]);
        assert_eq!(y.column(1), vec![2.0, 0.0]);
    }

    #[test]
    fn slice_and_concat_round_trip() {
        let a = Tensor::from_columns(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let top = slice_rows(&a, 0, 2).unwrap();
        let bottom = slice_rows(&a, 2, 1).unwrap();
        assert_eq!(concat_rows(&top, &bottom).unwrap(), a);
    }
}
