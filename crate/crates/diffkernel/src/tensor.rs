use crate::error::{KernelError, Result};

/// Dense row-major `f64` tensor.
///
/// Almost every op in the kernel works on rank-2 tensors; a vector is a
/// `[1, n]` row. Entries are guaranteed finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(KernelError::Shape(format!(
                "shape {:?} needs {} entries, got {}",
                shape,
                n,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(KernelError::Numeric("tensor construction".into()));
        }
        Ok(Self { shape, data })
    }

    /// Builds a tensor from data already known to be finite and correctly sized.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Self::new(vec![1, 1], vec![value])
    }

    pub fn row(values: &[f64]) -> Result<Self> {
        Self::new(vec![1, values.len()], values.to_vec())
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Stacks equal-length rows into a `[rows.len(), width]` matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let width = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * width);
        for r in rows {
            let r = r.as_ref();
            if r.len() != width {
                return Err(KernelError::Shape(format!(
                    "ragged rows: expected width {width}, got {}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), width], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access for parameter updates. Callers must keep entries finite.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows when viewed as a matrix (leading dims collapsed).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    /// Value of a `[1, 1]` (or any single-element) tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(KernelError::Shape(format!(
                "item() on shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(
            self.shape.clone(),
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    pub(crate) fn check_finite(&self, op: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(KernelError::Numeric(op.to_string()))
        }
    }
}

/// `C = op(A) * op(B)` with optional transposes, writing a fresh `[m, n]` tensor.
pub(crate) fn gemm(a: &Tensor, trans_a: bool, b: &Tensor, trans_b: bool) -> Tensor {
    let (ar, ac) = (a.rows(), a.cols());
    let (br, bc) = (b.rows(), b.cols());
    let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
    debug_assert_eq!(k, k2);
    let mut out = vec![0.0; m * n];
    // strides for the logical (possibly transposed) operands
    let (rsa, csa) = if trans_a {
        (1, ac as isize)
    } else {
        (ac as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, bc as isize)
    } else {
        (bc as isize, 1)
    };
    if m > 0 && n > 0 && k > 0 {
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.data.as_ptr(),
                rsa,
                csa,
                b.data.as_ptr(),
                rsb,
                csb,
                0.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    Tensor::from_parts(vec![m, n], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_wrong_length() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn rejects_nan() {
        assert!(matches!(
            Tensor::new(vec![1, 1], vec![f64::NAN]),
            Err(KernelError::Numeric(_))
        ));
    }

    #[test]
    fn gemm_transposes() {
        let a = Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::matrix(3, 2, vec![1., 0., 0., 1., 1., 1.]).unwrap();
        let c = gemm(&a, false, &b, false);
        assert_eq!(c.data(), &[4., 5., 10., 11.]);
        // A^T A is 3x3
        let ata = gemm(&a, true, &a, false);
        assert_eq!(ata.shape(), &[3, 3]);
        assert_eq!(ata.get(0, 0), 17.0);
        assert_eq!(ata.get(1, 2), 2. * 3. + 5. * 6.);
        let aat = gemm(&a, false, &a, true);
        assert_eq!(aat.data(), &[14., 32., 32., 77.]);
    }
}
