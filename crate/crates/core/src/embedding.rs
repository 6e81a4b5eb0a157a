//! Dense row-major matrices, labeled embedding sets, class centers and the
//! blocked pairwise-cosine kernel shared by the trainer, metrics and audit.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernel;

/// Row norms at or below this value are treated as zero.
pub const MIN_NORM: f64 = 1e-12;

/// Default number of rows per block in [`cosine_block`].
pub const DEFAULT_BLOCK: usize = 256;

/// A dense row-major `rows × cols` matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::LengthMismatch { expected: rows * cols, found: data.len() });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    /// Builds a matrix from equal-length rows. An empty slice gives a `0 × 0` matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::DimensionMismatch { expected: cols, found: r.len() });
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix { rows: rows.len(), cols, data })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
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

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        // `chunks_exact(0)` panics, so zero-width matrices go through a range.
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    /// Copies the given rows, in order, into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix { rows: idx.len(), cols: self.cols, data }
    }

    /// Stacks `other` below `self`.
    pub fn vstack(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows > 0 && other.rows > 0 && self.cols != other.cols {
            return Err(Error::DimensionMismatch { expected: self.cols, found: other.cols });
        }
        let cols = if self.rows > 0 { self.cols } else { other.cols };
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Ok(Matrix { rows: self.rows + other.rows, cols, data })
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

#[inline]
pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// A single embedding, optionally known to be unit length.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f64>,
    unit: bool,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::DimensionMismatch { expected: 1, found: 0 });
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteInput { what: "embedding vector" });
        }
        Ok(EmbeddingVector { values, unit: false })
    }

    /// Normalizes `values` to unit length.
    pub fn unit(values: Vec<f64>) -> Result<Self> {
        let mut v = Self::new(values)?;
        let n = norm(&v.values);
        if n <= MIN_NORM {
            return Err(Error::ZeroNormRow { row: 0, norm: n });
        }
        v.values.iter_mut().for_each(|x| *x /= n);
        v.unit = true;
        Ok(v)
    }

    pub fn is_unit(&self) -> bool {
        self.unit
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn cosine(&self, other: &EmbeddingVector) -> Result<f64> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), found: other.dim() });
        }
        let (a, b) = (norm(&self.values), norm(&other.values));
        if a <= MIN_NORM {
            return Err(Error::ZeroNormRow { row: 0, norm: a });
        }
        if b <= MIN_NORM {
            return Err(Error::ZeroNormRow { row: 1, norm: b });
        }
        Ok((kernel::dot(&self.values, &other.values) / (a * b)).clamp(-1.0, 1.0))
    }
}

/// Embeddings with integer class labels in `0..class_count`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledEmbeddingSet {
    matrix: Matrix,
    labels: Vec<usize>,
    class_count: usize,
}

impl LabeledEmbeddingSet {
    /// Validates labels against `class_count` and that every row is finite.
    pub fn new(matrix: Matrix, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if matrix.rows() != labels.len() {
            return Err(Error::LengthMismatch { expected: matrix.rows(), found: labels.len() });
        }
        if matrix.rows() > 0 && matrix.cols() == 0 {
            return Err(Error::DimensionMismatch { expected: 1, found: 0 });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::LabelOutOfRange { label: bad, limit: class_count });
        }
        if !matrix.is_finite() {
            return Err(Error::NonFiniteInput { what: "embedding matrix" });
        }
        Ok(LabeledEmbeddingSet { matrix, labels, class_count })
    }

    /// Like [`new`](Self::new) with `class_count = max(label) + 1`.
    pub fn with_inferred_classes(matrix: Matrix, labels: Vec<usize>) -> Result<Self> {
        let k = labels.iter().max().map_or(0, |m| m + 1);
        Self::new(matrix, labels, k)
    }

    /// Every row is its own class.
    pub fn singletons(matrix: Matrix) -> Result<Self> {
        let labels: Vec<usize> = (0..matrix.rows()).collect();
        let k = labels.len();
        Self::new(matrix, labels, k)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    /// Row indices grouped by class, in row order.
    pub fn members_by_class(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.class_count];
        for (i, &l) in self.labels.iter().enumerate() {
            groups[l].push(i);
        }
        groups
    }

    pub fn class_members(&self, k: usize) -> Result<Vec<usize>> {
        if k >= self.class_count {
            return Err(Error::LabelOutOfRange { label: k, limit: self.class_count });
        }
        let m: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == k).collect();
        if m.is_empty() {
            return Err(Error::EmptyClass(k));
        }
        Ok(m)
    }

    pub fn into_parts(self) -> (Matrix, Vec<usize>, usize) {
        (self.matrix, self.labels, self.class_count)
    }
}

/// Per-class mean embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassCenterSet {
    centers: Matrix,
    counts: Vec<usize>,
}

impl ClassCenterSet {
    /// Wraps externally computed centers, e.g. prototypes used as queries.
    pub fn from_centers(centers: Matrix, counts: Vec<usize>) -> Result<Self> {
        if counts.len() != centers.rows() {
            return Err(Error::LengthMismatch { expected: centers.rows(), found: counts.len() });
        }
        if let Some(k) = counts.iter().position(|&c| c == 0) {
            return Err(Error::EmptyClass(k));
        }
        if !centers.is_finite() {
            return Err(Error::NonFiniteInput { what: "class centers" });
        }
        Ok(ClassCenterSet { centers, counts })
    }

    pub fn centers(&self) -> &Matrix {
        &self.centers
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.centers.cols()
    }
}

pub fn class_centers(set: &LabeledEmbeddingSet) -> Result<ClassCenterSet> {
    let k = set.class_count();
    let d = set.dim();
    let mut sums = Matrix::zeros(k, d);
    let mut counts = vec![0usize; k];
    for (row, &l) in set.matrix().iter_rows().zip(set.labels()) {
        counts[l] += 1;
        for (s, v) in sums.row_mut(l).iter_mut().zip(row) {
            *s += v;
        }
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyClass(empty));
    }
    for (c, &n) in counts.iter().enumerate() {
        let inv = n as f64;
        sums.row_mut(c).iter_mut().for_each(|s| *s /= inv);
    }
    Ok(ClassCenterSet { centers: sums, counts })
}

/// Scales every row to unit Euclidean norm.
pub fn normalize_rows(matrix: &Matrix) -> Result<Matrix> {
    let mut out = matrix.clone();
    normalize_rows_in_place(&mut out)?;
    Ok(out)
}

pub fn normalize_rows_in_place(matrix: &mut Matrix) -> Result<()> {
    let cols = matrix.cols();
    if cols == 0 {
        return Ok(());
    }
    for (i, row) in matrix.as_mut_slice().chunks_exact_mut(cols).enumerate() {
        let n = norm(row);
        if !(n > MIN_NORM) {
            return Err(if n.is_finite() {
                Error::ZeroNormRow { row: i, norm: n }
            } else {
                Error::NonFiniteInput { what: "matrix row" }
            });
        }
        row.iter_mut().for_each(|x| *x /= n);
    }
    Ok(())
}

/// Inverse row norms, erroring on zero-norm rows.
pub(crate) fn inverse_row_norms(matrix: &Matrix) -> Result<Vec<f64>> {
    matrix
        .iter_rows()
        .enumerate()
        .map(|(i, r)| {
            let n = norm(r);
            if n > MIN_NORM {
                Ok(1.0 / n)
            } else {
                Err(Error::ZeroNormRow { row: i, norm: n })
            }
        })
        .collect()
}

/// Pairwise cosine similarity between the rows of `a` and `b`, clamped to
/// `[-1, 1]`.
///
/// Rows of `b` are processed `block` at a time and row ranges of `a` may be
/// handled by different workers; every entry is computed by the same
/// arithmetic, so the result is identical for any block size or worker count.
pub fn cosine_block(a: &Matrix, b: &Matrix, block: usize) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(Error::DimensionMismatch { expected: a.cols(), found: b.cols() });
    }
    if block == 0 {
        return Err(Error::ConfigInvalid("block size must be at least 1".into()));
    }
    let an = normalize_rows(a)?;
    let bn = normalize_rows(b)?;
    Ok(cosine_block_normalized(&an, &bn, block))
}

/// [`cosine_block`] for inputs that are already unit-normalized.
pub(crate) fn cosine_block_normalized(an: &Matrix, bn: &Matrix, block: usize) -> Matrix {
    let (p, q, d) = (an.rows(), bn.rows(), an.cols());
    let mut out = Matrix::zeros(p, q);
    if p == 0 || q == 0 {
        return out;
    }
    let rows_per_task = block.max(1);
    out.as_mut_slice()
        .par_chunks_mut(rows_per_task * q)
        .enumerate()
        .for_each(|(t, out_rows)| {
            let r0 = t * rows_per_task;
            let nr = out_rows.len() / q;
            let a_blk = &an.as_slice()[r0 * d..(r0 + nr) * d];
            let mut local = vec![0.0; nr * block.min(q)];
            let mut c0 = 0;
            while c0 < q {
                let nc = block.min(q - c0);
                let b_blk = &bn.as_slice()[c0 * d..(c0 + nc) * d];
                let buf = &mut local[..nr * nc];
                kernel::dot_block(a_blk, nr, b_blk, nc, d, buf);
                for i in 0..nr {
                    let dst = &mut out_rows[i * q + c0..i * q + c0 + nc];
                    for (o, &v) in dst.iter_mut().zip(&buf[i * nc..(i + 1) * nc]) {
                        *o = v.clamp(-1.0, 1.0);
                    }
                }
                c0 += nc;
            }
        });
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn naive_cos(a: &[f64], b: &[f64]) -> f64 {
        let mut ab = 0.0;
        let mut aa = 0.0;
        let mut bb = 0.0;
        for i in 0..a.len() {
            ab += a[i] * b[i];
            aa += a[i] * a[i];
            bb += b[i] * b[i];
        }
        ab / (aa.sqrt() * bb.sqrt())
    }

    #[test]
    fn normalize_three_four_five() {
        let m = Matrix::from_rows(&[vec![3.0, 4.0], vec![1.0, 0.0]]).unwrap();
        let n = normalize_rows(&m).unwrap();
        assert!((n.get(0, 0) - 0.6).abs() < 1e-15);
        assert!((n.get(0, 1) - 0.8).abs() < 1e-15);
        assert_eq!(n.row(1), &[1.0, 0.0]);
    }

    #[test]
    fn normalize_random_rows_have_unit_norm() {
        let n = normalize_rows(&random_matrix(10, 8, 7)).unwrap();
        for r in n.iter_rows() {
            assert!((norm(r) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_reports_zero_row() {
        let m = Matrix::from_rows(&[vec![1.0, 1.0], vec![0.0, 0.0]]).unwrap();
        assert!(matches!(normalize_rows(&m), Err(Error::ZeroNormRow { row: 1, .. })));
    }

    #[test]
    fn cosine_of_orthonormal_basis_is_identity() {
        let e = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let c = cosine_block(&e, &e, 1).unwrap();
        assert_eq!(c.as_slice(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn cosine_dimension_mismatch() {
        let a = random_matrix(2, 3, 1);
        let b = random_matrix(2, 4, 2);
        assert!(matches!(cosine_block(&a, &b, 8), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn cosine_block_size_does_not_matter() {
        let a = random_matrix(37, 16, 3);
        let b = random_matrix(53, 16, 4);
        let c8 = cosine_block(&a, &b, 8).unwrap();
        let c64 = cosine_block(&a, &b, 64).unwrap();
        for (x, y) in c8.as_slice().iter().zip(c64.as_slice()) {
            assert!((x - y).abs() <= 1e-12);
        }
        for i in 0..37 {
            for j in 0..53 {
                assert!((c8.get(i, j) - naive_cos(a.row(i), b.row(j))).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn centers_are_means() {
        let m = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let set = LabeledEmbeddingSet::new(m, vec![0, 0], 1).unwrap();
        let c = class_centers(&set).unwrap();
        assert_eq!(c.centers().row(0), &[0.5, 0.5]);
        assert_eq!(c.counts(), &[2]);
    }

    #[test]
    fn centers_match_naive_loop() {
        let m = random_matrix(40, 5, 11);
        let labels: Vec<usize> = (0..40).map(|i| (i * 7) % 6).collect();
        let set = LabeledEmbeddingSet::new(m.clone(), labels.clone(), 6).unwrap();
        let c = class_centers(&set).unwrap();
        for k in 0..6 {
            let mut mean = [0.0; 5];
            let mut n = 0.0;
            for i in 0..40 {
                if labels[i] == k {
                    n += 1.0;
                    for d in 0..5 {
                        mean[d] += m.get(i, d);
                    }
                }
            }
            for d in 0..5 {
                assert!((c.centers().get(k, d) - mean[d] / n).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn singleton_centers_are_identity() {
        let m = random_matrix(9, 4, 5);
        let set = LabeledEmbeddingSet::singletons(m.clone()).unwrap();
        let c = class_centers(&set).unwrap();
        assert_eq!(c.centers(), &m);
        let again = class_centers(&LabeledEmbeddingSet::singletons(c.centers().clone()).unwrap()).unwrap();
        assert_eq!(again.centers(), &m);
    }

    #[test]
    fn empty_class_is_reported() {
        let m = random_matrix(3, 2, 5);
        let set = LabeledEmbeddingSet::new(m, vec![0, 2, 2], 3).unwrap();
        assert!(matches!(class_centers(&set), Err(Error::EmptyClass(1))));
    }

    #[test]
    fn label_out_of_range_rejected() {
        let m = random_matrix(2, 2, 5);
        assert!(matches!(
            LabeledEmbeddingSet::new(m, vec![0, 3], 2),
            Err(Error::LabelOutOfRange { label: 3, limit: 2 })
        ));
    }

    proptest! {
        #[test]
        fn cosine_is_transpose_symmetric(p in 1usize..12, q in 1usize..12, d in 1usize..10, seed in 0u64..1000, block in 1usize..9) {
            let a = random_matrix(p, d, seed);
            let b = random_matrix(q, d, seed + 1);
            let ab = cosine_block(&a, &b, block).unwrap();
            let ba = cosine_block(&b, &a, block).unwrap();
            let full = cosine_block(&a, &b, 1024).unwrap();
            for i in 0..p {
                for j in 0..q {
                    prop_assert!((ab.get(i, j) - ba.get(j, i)).abs() <= 1e-12);
                    prop_assert_eq!(ab.get(i, j).to_bits(), full.get(i, j).to_bits());
                    prop_assert!(ab.get(i, j).abs() <= 1.0 + 1e-9);
                }
            }
        }
    }
}
