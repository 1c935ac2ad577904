use crate::error::{contract, Error, Result};

/// Dense row-major array of `f64`.
///
/// Every constructor and public operation rejects non-finite entries, so a
/// `Tensor` that exists is always finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn check_finite(data: &[f64], what: &str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return contract(format!("tensor shape {shape:?} must be non-empty and positive"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return contract(format!("tensor shape {shape:?} needs {n} entries, got {}", data.len()));
        }
        check_finite(&data, "tensor construction")?;
        Ok(Self { shape, data })
    }

    /// Two-dimensional tensor from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// `1 x n` row vector.
    pub fn row(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![1, n], data)
    }

    pub fn scalar(v: f64) -> Result<Self> {
        Self::new(vec![1, 1], vec![v])
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let Some(first) = rows.first() else {
            return contract("from_rows needs at least one row");
        };
        let cols = first.len();
        if rows.iter().any(|r| r.len() != cols) {
            return contract("from_rows: ragged rows");
        }
        Self::matrix(rows.len(), cols, rows.concat())
    }

    pub fn full(shape: Vec<usize>, v: f64) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![v; n])
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.shape.clone())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Product of all trailing dimensions.
    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    /// Overwrite contents in place, used by optimizers. Rejects non-finite values.
    pub fn assign(&mut self, data: &[f64]) -> Result<()> {
        if data.len() != self.data.len() {
            return contract("assign: length mismatch");
        }
        check_finite(data, "tensor assign")?;
        self.data.copy_from_slice(data);
        Ok(())
    }

    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f64>, what: &str) -> Result<Self> {
        check_finite(&data, what)?;
        Ok(Self { shape, data })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64, what: &str) -> Result<Self> {
        Self::from_raw(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect(), what)
    }

    pub fn zip(&self, other: &Self, f: impl Fn(f64, f64) -> f64, what: &str) -> Result<Self> {
        if self.shape != other.shape {
            return contract(format!("{what}: shape mismatch {:?} vs {:?}", self.shape, other.shape));
        }
        Self::from_raw(
            self.shape.clone(),
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
            what,
        )
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip(other, |a, b| a + b, "add")
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip(other, |a, b| a - b, "sub")
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip(other, |a, b| a * b, "mul")
    }

    pub fn scale(&self, c: f64) -> Result<Self> {
        self.map(|v| v * c, "scale")
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Matrix product of `[n, k] x [k, m]`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.shape.len() != 2 || other.shape.len() != 2 || self.shape[1] != other.shape[0] {
            return contract(format!(
                "matmul: incompatible shapes {:?} x {:?}",
                self.shape, other.shape
            ));
        }
        let (n, k, m) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * m..(i + 1) * m];
            for (p, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * m..(p + 1) * m];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Self::from_raw(vec![n, m], out, "matmul")
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.shape.len() != 2 {
            return contract("transpose needs a matrix");
        }
        let (n, m) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = self.data[i * m + j];
            }
        }
        Ok(Self {
            shape: vec![m, n],
            data: out,
        })
    }

    /// `y[i, j] = x[i, j] * scale[j] + shift[j]` with `scale`, `shift` of length `cols`.
    pub fn affine_broadcast(&self, scale: &Self, shift: &Self) -> Result<Self> {
        let c = self.cols();
        if scale.numel() != c || shift.numel() != c {
            return contract(format!("affine_broadcast: row parameters must have {c} entries"));
        }
        let mut out = self.data.clone();
        for row in out.chunks_mut(c) {
            for ((v, &s), &t) in row.iter_mut().zip(&scale.data).zip(&shift.data) {
                *v = *v * s + t;
            }
        }
        Self::from_raw(self.shape.clone(), out, "affine_broadcast")
    }

    /// Sum over rows, giving a `1 x cols` row.
    pub fn sum_rows(&self) -> Self {
        let c = self.cols();
        let mut out = vec![0.0; c];
        for row in self.data.chunks(c) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        Self {
            shape: vec![1, c],
            data: out,
        }
    }

    /// Rows selected by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        let c = self.cols();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= self.rows() {
                return contract(format!("select_rows: index {i} out of range"));
            }
            out.extend_from_slice(self.row_slice(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Self::new(shape, out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes_and_nan() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        assert!(matches!(Tensor::new(vec![1], vec![f64::NAN]), Err(Error::NonFinite(_))));
        let t = Tensor::row(vec![1e300]).unwrap();
        assert!(t.scale(1e300).is_err());
    }

    #[test]
    fn matmul_small() {
        let a = Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::matrix(3, 1, vec![1., 0., -1.]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[-2.0, -2.0]);
        assert!(b.matmul(&b).is_err());
        assert_eq!(a.transpose().unwrap().shape(), &[3, 2]);
    }

    #[test]
    fn affine_broadcast_rows() {
        let x = Tensor::matrix(2, 2, vec![1., 2., 3., 4.]).unwrap();
        let s = Tensor::row(vec![2., 0.]).unwrap();
        let t = Tensor::row(vec![1., 1.]).unwrap();
        let y = x.affine_broadcast(&s, &t).unwrap();
        assert_eq!(y.data(), &[3., 1., 7., 1.]);
    }
}
