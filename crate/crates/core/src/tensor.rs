//! Dense containers shared by every stage: matrices, 4-D convolution weights,
//! importance matrices, permutations, and the `⊗` contraction.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_cols) {
            return Err(shape_err("ragged rows"));
        }
        Self::from_vec(n_rows, n_cols, rows.concat())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn scale(&self, c: f64) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|v| v * c).collect() }
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(shape_err(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                let brow = other.row(k);
                let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

/// `A ⊗ B`: element-wise product summed over all entries.
pub fn contract(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(shape_err(format!("contract {:?} with {:?}", a.shape(), b.shape())));
    }
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum())
}

/// Spatial extent of a feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl TensorShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(shape_err(format!("empty shape {channels}x{height}x{width}")));
        }
        Ok(Self { channels, height, width })
    }

    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// Norm used to reduce a kernel slice to one connection importance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    #[default]
    L1,
    L2,
}

impl Norm {
    pub fn of(self, values: &[f64]) -> f64 {
        match self {
            Norm::L1 => values.iter().map(|v| v.abs()).sum(),
            Norm::L2 => values.iter().map(|v| v * v).sum::<f64>().sqrt(),
        }
    }
}

/// Convolution weights laid out as `(c_out, c_in, k, k)`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightTensor {
    c_out: usize,
    c_in: usize,
    k: usize,
    data: Vec<f64>,
}

impl WeightTensor {
    pub fn new(c_out: usize, c_in: usize, k: usize, data: Vec<f64>) -> Result<Self> {
        if c_out == 0 || c_in == 0 || k == 0 {
            return Err(Error::InvalidTensor(format!("dims ({c_out}, {c_in}, {k}) must be positive")));
        }
        if data.len() != c_out * c_in * k * k {
            return Err(Error::InvalidTensor(format!(
                "{} values for shape ({c_out}, {c_in}, {k}, {k})",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidTensor(format!("non-finite value {bad}")));
        }
        Ok(Self { c_out, c_in, k, data })
    }

    pub fn zeros(c_out: usize, c_in: usize, k: usize) -> Self {
        Self { c_out, c_in, k, data: vec![0.0; c_out * c_in * k * k] }
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn slice_len(&self) -> usize {
        self.k * self.k
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// The `k × k` kernel connecting input channel `i` to output channel `j`.
    pub fn kernel(&self, j: usize, i: usize) -> &[f64] {
        let kk = self.slice_len();
        let start = (j * self.c_in + i) * kk;
        &self.data[start..start + kk]
    }

    pub fn kernel_mut(&mut self, j: usize, i: usize) -> &mut [f64] {
        let kk = self.slice_len();
        let start = (j * self.c_in + i) * kk;
        &mut self.data[start..start + kk]
    }

    pub fn scale(&self, c: f64) -> Self {
        Self { data: self.data.iter().map(|v| v * c).collect(), ..self.clone() }
    }
}

/// Per-connection weight norms `S[j][i] = ‖W[j, i, :, :]‖`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceMatrix(Matrix);

impl ImportanceMatrix {
    pub fn new(m: Matrix) -> Result<Self> {
        if m.as_slice().iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidTensor("importance entries must be finite and nonnegative".into()));
        }
        Ok(Self(m))
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    pub fn rows(&self) -> usize {
        self.0.rows()
    }

    pub fn cols(&self) -> usize {
        self.0.cols()
    }

    pub fn total(&self) -> f64 {
        self.0.sum()
    }

    pub fn scale(&self, c: f64) -> Self {
        Self(self.0.scale(c.abs()))
    }
}

impl std::ops::Index<(usize, usize)> for ImportanceMatrix {
    type Output = f64;

    fn index(&self, idx: (usize, usize)) -> &f64 {
        &self.0[idx]
    }
}

pub fn importance_matrix(w: &WeightTensor, norm: Norm) -> ImportanceMatrix {
    let m = Matrix::from_fn(w.c_out(), w.c_in(), |j, i| norm.of(w.kernel(j, i)));
    ImportanceMatrix(m)
}

/// Bijection on `0..n` stored as an index array.
///
/// Applied to the rows of a matrix, position `a` of the result takes row
/// `map[a]` of the input. This equals left-multiplication by the 0/1 matrix
/// with `P[a][map[a]] = 1`; applied to columns it is right-multiplication by
/// the transpose pattern `Q[map[b]][b] = 1`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Permutation {
    map: Vec<usize>,
}

impl Permutation {
    pub fn new(map: Vec<usize>) -> Result<Self> {
        let n = map.len();
        let mut seen = vec![false; n];
        for &v in &map {
            if v >= n {
                return Err(Error::InvalidPermutation(format!("index {v} out of range for size {n}")));
            }
            if std::mem::replace(&mut seen[v], true) {
                return Err(Error::InvalidPermutation(format!("index {v} repeated")));
            }
        }
        Ok(Self { map })
    }

    pub fn identity(n: usize) -> Self {
        Self { map: (0..n).collect() }
    }

    pub fn random<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        let mut map: Vec<usize> = (0..n).collect();
        map.shuffle(rng);
        Self { map }
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn map(&self) -> &[usize] {
        &self.map
    }

    pub fn get(&self, a: usize) -> usize {
        self.map[a]
    }

    pub fn is_identity(&self) -> bool {
        self.map.iter().enumerate().all(|(a, &v)| a == v)
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.map.len()];
        for (a, &v) in self.map.iter().enumerate() {
            inv[v] = a;
        }
        Self { map: inv }
    }

    /// `(self ∘ other)[a] = self[other[a]]`.
    pub fn compose(&self, other: &Permutation) -> Result<Self> {
        if self.len() != other.len() {
            return Err(shape_err(format!("compose sizes {} and {}", self.len(), other.len())));
        }
        Ok(Self { map: other.map.iter().map(|&v| self.map[v]).collect() })
    }

    /// Dense 0/1 matrix with `P[a][map[a]] = 1`.
    pub fn to_matrix(&self) -> Matrix {
        let n = self.len();
        let mut m = Matrix::zeros(n, n);
        for (a, &v) in self.map.iter().enumerate() {
            m[(a, v)] = 1.0;
        }
        m
    }
}

impl TryFrom<Vec<usize>> for Permutation {
    type Error = Error;

    fn try_from(map: Vec<usize>) -> Result<Self> {
        Self::new(map)
    }
}

impl From<Permutation> for Vec<usize> {
    fn from(p: Permutation) -> Self {
        p.map
    }
}

/// `S' = P S Q` with `S'[a][b] = S[p[a]][q[b]]`.
pub fn permute_importance(s: &ImportanceMatrix, p: &Permutation, q: &Permutation) -> Result<ImportanceMatrix> {
    Ok(ImportanceMatrix(permute_matrix(s.as_matrix(), p, q)?))
}

pub fn permute_matrix(m: &Matrix, p: &Permutation, q: &Permutation) -> Result<Matrix> {
    if p.len() != m.rows() || q.len() != m.cols() {
        return Err(shape_err(format!(
            "permutations ({}, {}) for a {}x{} matrix",
            p.len(),
            q.len(),
            m.rows(),
            m.cols()
        )));
    }
    Ok(Matrix::from_fn(m.rows(), m.cols(), |a, b| m[(p.get(a), q.get(b))]))
}

/// Relabels output/input channels with the same convention as
/// [`permute_importance`]: slice `(a, b)` of the result is slice
/// `(p[a], q[b])` of `w`.
pub fn permute_weights(w: &WeightTensor, p: &Permutation, q: &Permutation) -> Result<WeightTensor> {
    if p.len() != w.c_out() || q.len() != w.c_in() {
        return Err(shape_err(format!(
            "permutations ({}, {}) for weights ({}, {})",
            p.len(),
            q.len(),
            w.c_out(),
            w.c_in()
        )));
    }
    let mut out = WeightTensor::zeros(w.c_out(), w.c_in(), w.k());
    for a in 0..w.c_out() {
        for b in 0..w.c_in() {
            out.kernel_mut(a, b).copy_from_slice(w.kernel(p.get(a), q.get(b)));
        }
    }
    Ok(out)
}
