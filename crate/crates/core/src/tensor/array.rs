use crate::error::{Error, Result};

/// Dense row-major array of `f64`.
///
/// Values only; gradient bookkeeping lives on the [`Tape`](super::Tape) that
/// produced a value, and parameter gradients live in the
/// [`ParameterStore`](super::ParameterStore).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {:?} holds {} values, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; numel] }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; numel] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![], data: vec![value] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    /// Builds a 2-D tensor from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("from_rows", "rows have different lengths"));
        }
        let data = rows.iter().flatten().copied().collect();
        Ok(Tensor { shape: vec![rows.len(), cols], data })
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            other => Err(Error::dim("dims2", format!("expected rank-2, got shape {:?}", other))),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::dim(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape, shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn transpose2(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        transpose_into(r, c, &self.data, &mut out);
        Ok(Tensor { shape: vec![c, r], data: out })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub(crate) fn transpose_into(rows: usize, cols: usize, src: &[f64], dst: &mut [f64]) {
    for i in 0..rows {
        for j in 0..cols {
            dst[j * rows + i] = src[i * cols + j];
        }
    }
}

const MR: usize = 6;
const NR: usize = 16;

/// `c[m×n] += a[m×k] · b[k×n]`, all row-major.
///
/// Every output element is accumulated from zero in ascending `k` order and
/// then added to `c`, regardless of where it falls in the register tiling.
/// Results are therefore bit-identical under row permutations of `a`.
pub(crate) fn gemm_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let mut i = 0;
    while i + MR <= m {
        let mut j = 0;
        while j + NR <= n {
            let mut acc = [[0.0f64; NR]; MR];
            for p in 0..k {
                let brow: &[f64; NR] = b[p * n + j..p * n + j + NR].try_into().unwrap();
                for (r, acc_row) in acc.iter_mut().enumerate() {
                    let av = a[(i + r) * k + p];
                    for q in 0..NR {
                        acc_row[q] += av * brow[q];
                    }
                }
            }
            for (r, acc_row) in acc.iter().enumerate() {
                let crow = &mut c[(i + r) * n + j..(i + r) * n + j + NR];
                for q in 0..NR {
                    crow[q] += acc_row[q];
                }
            }
            j += NR;
        }
        if j < n {
            for r in i..i + MR {
                gemm_row_tail(k, n, j, &a[r * k..(r + 1) * k], b, &mut c[r * n..(r + 1) * n]);
            }
        }
        i += MR;
    }
    for r in i..m {
        gemm_row_tail(k, n, 0, &a[r * k..(r + 1) * k], b, &mut c[r * n..(r + 1) * n]);
    }
}

fn gemm_row_tail(k: usize, n: usize, from: usize, arow: &[f64], b: &[f64], crow: &mut [f64]) {
    let mut j = from;
    while j + NR <= n {
        let mut acc = [0.0f64; NR];
        for p in 0..k {
            let av = arow[p];
            let brow = &b[p * n + j..p * n + j + NR];
            for q in 0..NR {
                acc[q] += av * brow[q];
            }
        }
        for q in 0..NR {
            crow[j + q] += acc[q];
        }
        j += NR;
    }
    for jj in j..n {
        let mut acc = 0.0;
        for p in 0..k {
            acc += arow[p] * b[p * n + jj];
        }
        crow[jj] += acc;
    }
}
