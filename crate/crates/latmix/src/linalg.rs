//! Dense double-precision linear algebra for desk-scale experiments.
//!
//! Everything here is dependency-free and deterministic: factorizations are
//! straight loops over row-major storage, iterative kernels use fixed seeds and
//! fixed iteration caps. Dimensions are small (d <= 2048), so clarity wins over
//! blocking or SIMD.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length must equal rows*cols");
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        assert!(!rows.is_empty(), "need at least one row");
        let cols = rows[0].len();
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Matrix { rows: rows.len(), cols, data: rows.concat() }
    }

    /// Diagonal matrix from a slice.
    pub fn from_diag(d: &[f64]) -> Self {
        let mut m = Matrix::zeros(d.len(), d.len());
        for (i, &x) in d.iter().enumerate() {
            m.data[i * d.len() + i] = x;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * s).collect(),
        }
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "shape mismatch in add");
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "shape mismatch in sub");
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        }
    }

    /// `self * v` for a column vector `v`.
    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.cols, "shape mismatch in matvec");
        let mut out = vec![0.0; self.rows];
        for i in 0..self.rows {
            let row = self.row(i);
            let mut acc = 0.0;
            for j in 0..self.cols {
                acc += row[j] * v[j];
            }
            out[i] = acc;
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Operator infinity norm (max absolute row sum).
    pub fn inf_norm(&self) -> f64 {
        (0..self.rows)
            .map(|i| self.row(i).iter().map(|x| x.abs()).sum::<f64>())
            .fold(0.0_f64, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Max absolute entrywise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "shape mismatch in diff");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// `a * b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols, b.rows, "shape mismatch in matmul: {}x{} * {}x{}", a.rows, a.cols, b.rows, b.cols);
    let mut out = Matrix::zeros(a.rows, b.cols);
    // i-k-j loop order keeps the inner accesses contiguous in row-major storage.
    for i in 0..a.rows {
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for j in 0..b.cols {
                orow[j] += aik * brow[j];
            }
        }
    }
    out
}

/// Permutation of `n` indices, acting on matrix rows.
///
/// As a matrix, `P` has `P[i, map[i]] = 1`, so `apply_rows` computes `P * x`
/// with `(P x)[i] = x[map[i]]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation {
    map: Vec<usize>,
}

impl Permutation {
    pub fn identity(n: usize) -> Self {
        Permutation { map: (0..n).collect() }
    }

    pub fn from_map(map: Vec<usize>) -> Result<Self> {
        let n = map.len();
        let mut seen = vec![false; n];
        for &m in &map {
            if m >= n || seen[m] {
                return Err(Error::InvalidArgument(format!("not a permutation of 0..{n}")));
            }
            seen[m] = true;
        }
        Ok(Permutation { map })
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

    pub fn inverse(&self) -> Permutation {
        let mut inv = vec![0usize; self.map.len()];
        for (i, &m) in self.map.iter().enumerate() {
            inv[m] = i;
        }
        Permutation { map: inv }
    }

    /// `P * x` (row permutation).
    pub fn apply_rows(&self, x: &Matrix) -> Matrix {
        assert_eq!(x.rows, self.map.len(), "shape mismatch in permutation");
        let mut out = Matrix::zeros(x.rows, x.cols);
        for i in 0..x.rows {
            out.row_mut(i).copy_from_slice(x.row(self.map[i]));
        }
        out
    }

    pub fn to_matrix(&self) -> Matrix {
        let n = self.map.len();
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.set(i, self.map[i], 1.0);
        }
        m
    }

    /// +1 for even permutations, -1 for odd.
    pub fn parity(&self) -> f64 {
        let mut seen = vec![false; self.map.len()];
        let mut sign = 1.0;
        for start in 0..self.map.len() {
            if seen[start] {
                continue;
            }
            let mut len = 0;
            let mut i = start;
            while !seen[i] {
                seen[i] = true;
                i = self.map[i];
                len += 1;
            }
            if len % 2 == 0 {
                sign = -sign;
            }
        }
        sign
    }
}

/// LU factors with partial pivoting: `a = P * l * u` where `P` is
/// [`LuFactors::p`] acting by rows, `l` is unit lower triangular and `u` is
/// upper triangular (diagonal included).
#[derive(Debug, Clone)]
pub struct LuFactors {
    pub p: Permutation,
    pub l: Matrix,
    pub u: Matrix,
}

/// Partial-pivoting LU factorization. Errors on singular-to-tolerance input.
pub fn lu_factor(a: &Matrix) -> Result<LuFactors> {
    assert!(a.is_square(), "lu_factor needs a square matrix");
    let n = a.rows;
    let mut w = a.clone();
    let mut perm: Vec<usize> = (0..n).collect();
    let scale = a.max_abs().max(f64::MIN_POSITIVE);
    let tol = f64::EPSILON * n as f64 * scale;

    for k in 0..n {
        let mut piv = k;
        let mut best = w.get(k, k).abs();
        for i in k + 1..n {
            let v = w.get(i, k).abs();
            if v > best {
                best = v;
                piv = i;
            }
        }
        if best <= tol {
            return Err(Error::Singular(format!("pivot {best:.3e} at column {k}")));
        }
        if piv != k {
            perm.swap(k, piv);
            for j in 0..n {
                let t = w.get(k, j);
                w.set(k, j, w.get(piv, j));
                w.set(piv, j, t);
            }
        }
        let pivval = w.get(k, k);
        for i in k + 1..n {
            let f = w.get(i, k) / pivval;
            w.set(i, k, f);
            for j in k + 1..n {
                let v = w.get(i, j) - f * w.get(k, j);
                w.set(i, j, v);
            }
        }
    }

    let mut l = Matrix::identity(n);
    let mut u = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i > j {
                l.set(i, j, w.get(i, j));
            } else {
                u.set(i, j, w.get(i, j));
            }
        }
    }
    // perm holds Q with (Q a)[i] = a[perm[i]] = (l u)[i]; a = P l u with P = Q^-1.
    let p = Permutation::from_map(perm).expect("pivot bookkeeping is a permutation").inverse();
    Ok(LuFactors { p, l, u })
}

/// Matrix inverse via LU with partial pivoting.
pub fn invert(a: &Matrix) -> Result<Matrix> {
    assert!(a.is_square(), "invert needs a square matrix");
    let n = a.rows;
    let f = lu_factor(a)?;
    // a = P l u  =>  a^-1 = u^-1 l^-1 P^-1; apply to identity columns.
    let q = f.p.inverse(); // Q a = l u
    let mut inv = Matrix::zeros(n, n);
    for col in 0..n {
        // Solve a x = e_col, i.e. l u x = Q e_col.
        let mut y = vec![0.0; n];
        for i in 0..n {
            y[i] = if q.map()[i] == col { 1.0 } else { 0.0 };
        }
        // Forward substitution with unit lower l.
        for i in 0..n {
            let mut acc = y[i];
            for j in 0..i {
                acc -= f.l.get(i, j) * y[j];
            }
            y[i] = acc;
        }
        // Back substitution with u.
        for i in (0..n).rev() {
            let mut acc = y[i];
            for j in i + 1..n {
                acc -= f.u.get(i, j) * y[j];
            }
            y[i] = acc / f.u.get(i, i);
        }
        for i in 0..n {
            inv.set(i, col, y[i]);
        }
    }
    Ok(inv)
}

/// Determinant via LU; 0.0 for singular-to-tolerance input.
pub fn determinant(a: &Matrix) -> f64 {
    match lu_factor(a) {
        Ok(f) => {
            let mut d = f.p.parity();
            for i in 0..f.u.rows() {
                d *= f.u.get(i, i);
            }
            d
        }
        Err(_) => 0.0,
    }
}

/// Inverse of a unit lower triangular matrix (exploits structure).
pub fn invert_unit_lower(l: &Matrix) -> Matrix {
    assert!(l.is_square(), "invert_unit_lower needs a square matrix");
    let n = l.rows;
    let mut inv = Matrix::identity(n);
    for col in 0..n {
        for i in col + 1..n {
            let mut acc = 0.0;
            for j in col..i {
                acc -= l.get(i, j) * inv.get(j, col);
            }
            inv.set(i, col, acc);
        }
    }
    inv
}

/// Inverse of an upper triangular matrix. Errors on zero diagonal.
pub fn invert_upper(u: &Matrix) -> Result<Matrix> {
    assert!(u.is_square(), "invert_upper needs a square matrix");
    let n = u.rows;
    for i in 0..n {
        if u.get(i, i) == 0.0 {
            return Err(Error::Singular(format!("zero diagonal at {i} in triangular inverse")));
        }
    }
    let mut inv = Matrix::zeros(n, n);
    for col in (0..n).rev() {
        inv.set(col, col, 1.0 / u.get(col, col));
        for i in (0..col).rev() {
            let mut acc = 0.0;
            for j in i + 1..=col {
                acc -= u.get(i, j) * inv.get(j, col);
            }
            inv.set(i, col, acc / u.get(i, i));
        }
    }
    Ok(inv)
}

const POWER_ITER_MAX: usize = 1000;
const POWER_ITER_TOL: f64 = 1e-12;

/// Largest singular value via power iteration on `a^T a`.
///
/// Deterministic: fixed internal seed for the start vector, Rayleigh-quotient
/// stopping rule, hard iteration cap.
pub fn spectral_norm(a: &Matrix) -> f64 {
    let n = a.cols;
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e3779b97f4a7c15);
    let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return 0.0;
    }
    v.iter_mut().for_each(|x| *x /= norm);

    let at = a.transpose();
    let mut lambda_prev = f64::INFINITY;
    for _ in 0..POWER_ITER_MAX {
        let av = a.matvec(&v);
        let bv = at.matvec(&av); // a^T a v
        let lambda: f64 = v.iter().zip(&bv).map(|(x, y)| x * y).sum();
        let bnorm = bv.iter().map(|x| x * x).sum::<f64>().sqrt();
        if bnorm == 0.0 {
            return 0.0;
        }
        v = bv.iter().map(|x| x / bnorm).collect();
        if (lambda - lambda_prev).abs() <= POWER_ITER_TOL * lambda.abs().max(1.0) {
            lambda_prev = lambda;
            break;
        }
        lambda_prev = lambda;
    }
    lambda_prev.max(0.0).sqrt()
}

/// All singular values, descending, via cyclic Jacobi on `a^T a`.
pub fn singular_values(a: &Matrix) -> Vec<f64> {
    let n = a.cols;
    let at = a.transpose();
    let mut s = matmul(&at, a);
    let fro = s.frobenius_norm();
    if fro == 0.0 {
        return vec![0.0; n];
    }
    let tol = 1e-15 * fro;
    for _sweep in 0..50 {
        let mut off = 0.0_f64;
        for p in 0..n {
            for q in p + 1..n {
                off += s.get(p, q).powi(2);
            }
        }
        if (2.0 * off).sqrt() <= tol {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let spq = s.get(p, q);
                if spq.abs() <= tol / (n * n) as f64 {
                    continue;
                }
                let theta = (s.get(q, q) - s.get(p, p)) / (2.0 * spq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                // Rotate rows/cols p and q of the symmetric matrix.
                for k in 0..n {
                    let skp = s.get(k, p);
                    let skq = s.get(k, q);
                    s.set(k, p, c * skp - sn * skq);
                    s.set(k, q, sn * skp + c * skq);
                }
                for k in 0..n {
                    let spk = s.get(p, k);
                    let sqk = s.get(q, k);
                    s.set(p, k, c * spk - sn * sqk);
                    s.set(q, k, sn * spk + c * sqk);
                }
            }
        }
    }
    let mut vals: Vec<f64> = (0..n).map(|i| s.get(i, i).max(0.0).sqrt()).collect();
    vals.sort_by(|x, y| y.partial_cmp(x).expect("singular values are finite"));
    vals
}

const EXPM_TRUNCATION: f64 = 1e-16;

/// Matrix exponential by scaling-and-squaring with a truncated Taylor series.
///
/// The input is scaled by powers of two until its infinity norm is at most
/// 0.5; the series stops when the next term is below `1e-16` relative to the
/// running sum.
pub fn matrix_exponential(x: &Matrix) -> Matrix {
    assert!(x.is_square(), "matrix_exponential needs a square matrix");
    let nrm = x.inf_norm();
    let squarings = if nrm > 0.5 { (nrm / 0.5).log2().ceil() as u32 } else { 0 };
    let xs = x.scale(0.5_f64.powi(squarings as i32));

    let n = x.rows;
    let mut sum = Matrix::identity(n);
    let mut term = Matrix::identity(n);
    for k in 1..200 {
        term = matmul(&term, &xs).scale(1.0 / k as f64);
        sum = sum.add(&term);
        let t = term.max_abs();
        if t == 0.0 || t <= EXPM_TRUNCATION * sum.max_abs() {
            break;
        }
    }
    let mut y = sum;
    for _ in 0..squarings {
        y = matmul(&y, &y);
    }
    y
}

/// Orthonormal Sylvester Hadamard matrix of size `n` (power of two), scaled by
/// `n^-1/2`. With `randomized`, columns are multiplied by seeded random signs,
/// which keeps the matrix orthonormal.
pub fn hadamard(n: usize, randomized: bool, seed: u64) -> Result<Matrix> {
    if n == 0 || n & (n - 1) != 0 {
        return Err(Error::InvalidArgument(format!("hadamard size {n} is not a power of two")));
    }
    let scale = 1.0 / (n as f64).sqrt();
    let mut h = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let sign = if (i & j).count_ones() % 2 == 0 { 1.0 } else { -1.0 };
            h.set(i, j, sign * scale);
        }
    }
    if randomized {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for j in 0..n {
            if rand::Rng::random::<bool>(&mut rng) {
                for i in 0..n {
                    let v = -h.get(i, j);
                    h.set(i, j, v);
                }
            }
        }
    }
    Ok(h)
}

/// Random orthogonal matrix with determinant +1, generated as the exponential
/// of a seeded random skew-symmetric matrix.
pub fn random_orthogonal(d: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Matrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            g.set(i, j, StandardNormal.sample(&mut rng));
        }
    }
    let skew = g.sub(&g.transpose()).scale(0.5);
    matrix_exponential(&skew)
}

/// Block-diagonal embedding of the given blocks.
pub fn block_diagonal(blocks: &[Matrix]) -> Matrix {
    assert!(!blocks.is_empty(), "need at least one block");
    let rows: usize = blocks.iter().map(|b| b.rows()).sum();
    let cols: usize = blocks.iter().map(|b| b.cols()).sum();
    let mut out = Matrix::zeros(rows, cols);
    let (mut r0, mut c0) = (0usize, 0usize);
    for b in blocks {
        for i in 0..b.rows() {
            for j in 0..b.cols() {
                out.set(r0 + i, c0 + j, b.get(i, j));
            }
        }
        r0 += b.rows();
        c0 += b.cols();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_matrix(n: usize, seed: u64, scale: f64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let v: f64 = StandardNormal.sample(&mut rng);
                m.set(i, j, v * scale);
            }
        }
        m
    }

    /// Well-conditioned random matrix: identity plus a small perturbation.
    fn well_conditioned(n: usize, seed: u64) -> Matrix {
        Matrix::identity(n).add(&random_matrix(n, seed, 0.3 / (n as f64).sqrt()))
    }

    #[test]
    fn matmul_identity() {
        let a = random_matrix(7, 1, 1.0);
        let i = Matrix::identity(7);
        assert_eq!(matmul(&a, &i), a);
        assert_eq!(matmul(&i, &a), a);
    }

    #[test]
    #[should_panic(expected = "shape mismatch")]
    fn matmul_shape_mismatch_panics() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        let _ = matmul(&a, &b);
    }

    #[test]
    fn invert_roundtrip() {
        for seed in 0..10 {
            let a = well_conditioned(16, seed);
            let inv = invert(&a).unwrap();
            let prod = matmul(&a, &inv);
            assert!(prod.max_abs_diff(&Matrix::identity(16)) <= 1e-8, "seed {seed}");
        }
    }

    #[test]
    fn invert_singular_reports() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]);
        assert!(matches!(invert(&a), Err(Error::Singular(_))));
    }

    #[test]
    fn invert_product_rule() {
        for seed in 0..8 {
            let a = well_conditioned(12, seed * 2 + 1);
            let b = well_conditioned(12, seed * 2 + 2);
            let lhs = invert(&matmul(&a, &b)).unwrap();
            let rhs = matmul(&invert(&b).unwrap(), &invert(&a).unwrap());
            assert!(lhs.max_abs_diff(&rhs) <= 1e-7, "seed {seed}");
        }
    }

    #[test]
    fn lu_factor_reconstructs() {
        for seed in 0..8 {
            let a = well_conditioned(9, seed + 50);
            let f = lu_factor(&a).unwrap();
            let rec = f.p.apply_rows(&matmul(&f.l, &f.u));
            assert!(rec.max_abs_diff(&a) <= 1e-12, "seed {seed}");
        }
    }

    #[test]
    fn triangular_inverses() {
        let a = well_conditioned(8, 99);
        let f = lu_factor(&a).unwrap();
        let li = invert_unit_lower(&f.l);
        assert!(matmul(&f.l, &li).max_abs_diff(&Matrix::identity(8)) <= 1e-12);
        let ui = invert_upper(&f.u).unwrap();
        assert!(matmul(&f.u, &ui).max_abs_diff(&Matrix::identity(8)) <= 1e-10);
    }

    #[test]
    fn spectral_norm_diag() {
        let a = Matrix::from_diag(&[3.0, -7.0, 2.0]);
        assert!((spectral_norm(&a) - 7.0).abs() <= 1e-8 * 7.0);
    }

    #[test]
    fn spectral_norm_zero() {
        assert_eq!(spectral_norm(&Matrix::zeros(4, 4)), 0.0);
    }

    #[test]
    fn spectral_norm_orthogonal_is_one() {
        let q = random_orthogonal(16, 3);
        assert!((spectral_norm(&q) - 1.0).abs() <= 1e-8);
    }

    #[test]
    fn spectral_matches_max_singular_value() {
        for seed in 0..8 {
            let a = random_matrix(10, seed + 7, 1.0);
            let sv = singular_values(&a);
            let sn = spectral_norm(&a);
            assert!((sn - sv[0]).abs() <= 1e-7 * sv[0].max(1.0), "seed {seed}: {sn} vs {}", sv[0]);
        }
    }

    #[test]
    fn singular_values_shift_matrix() {
        let a = Matrix::from_rows(&[vec![0.0, 1.0], vec![0.0, 0.0]]);
        let sv = singular_values(&a);
        assert!((sv[0] - 1.0).abs() <= 1e-12);
        assert!(sv[1].abs() <= 1e-12);
    }

    #[test]
    fn singular_values_descending_and_accurate() {
        let d = [5.0, 4.0, 3.0, 2.0, 1.0];
        let q1 = random_orthogonal(5, 11);
        let q2 = random_orthogonal(5, 12);
        let a = matmul(&matmul(&q1, &Matrix::from_diag(&d)), &q2);
        let sv = singular_values(&a);
        for (i, &expect) in d.iter().enumerate() {
            assert!((sv[i] - expect).abs() <= 1e-8 * expect, "sv[{i}] = {}", sv[i]);
        }
    }

    #[test]
    fn expm_nilpotent_exact() {
        let a = Matrix::from_rows(&[vec![0.0, 1.0], vec![0.0, 0.0]]);
        let e = matrix_exponential(&a);
        let expect = Matrix::from_rows(&[vec![1.0, 1.0], vec![0.0, 1.0]]);
        assert!(e.max_abs_diff(&expect) <= 1e-15);
    }

    #[test]
    fn expm_planar_rotation() {
        let t = 1.234_f64;
        let a = Matrix::from_rows(&[vec![0.0, -t], vec![t, 0.0]]);
        let e = matrix_exponential(&a);
        let expect = Matrix::from_rows(&[vec![t.cos(), -t.sin()], vec![t.sin(), t.cos()]]);
        assert!(e.max_abs_diff(&expect) <= 1e-14);
    }

    #[test]
    fn expm_inverse_identity() {
        for seed in 0..6 {
            let x = random_matrix(8, seed + 31, 0.8);
            let e = matrix_exponential(&x);
            let em = matrix_exponential(&x.scale(-1.0));
            assert!(matmul(&e, &em).max_abs_diff(&Matrix::identity(8)) <= 1e-8, "seed {seed}");
        }
    }

    #[test]
    fn expm_large_norm_accuracy() {
        // Norm around 20: compare exp(x) against exp(x/2)^2 computed independently.
        let x = random_matrix(6, 77, 3.0);
        let e = matrix_exponential(&x);
        let h = matrix_exponential(&x.scale(0.5));
        let hh = matmul(&h, &h);
        let rel = e.max_abs_diff(&hh) / e.max_abs().max(1.0);
        assert!(rel <= 1e-10, "rel {rel}");
    }

    #[test]
    fn hadamard_rejects_non_power_of_two() {
        assert!(hadamard(12, false, 0).is_err());
        assert!(hadamard(0, false, 0).is_err());
    }

    #[test]
    fn hadamard_worked_example() {
        let h = hadamard(4, false, 0).unwrap();
        let y = h.matvec(&[10.0, 1.0, 0.5, 0.5]);
        assert_eq!(y, vec![6.0, 4.5, 5.0, 4.5]);
    }

    #[test]
    fn hadamard_orthonormal() {
        for &n in &[1usize, 2, 8, 64] {
            for &randomized in &[false, true] {
                let h = hadamard(n, randomized, 42).unwrap();
                let g = matmul(&h.transpose(), &h);
                assert!(g.max_abs_diff(&Matrix::identity(n)) <= 1e-12, "n={n} rand={randomized}");
            }
        }
    }

    #[test]
    fn hadamard_randomized_differs_by_column_signs() {
        let h = hadamard(8, false, 0).unwrap();
        let hr = hadamard(8, true, 7).unwrap();
        for j in 0..8 {
            let same = (0..8).all(|i| hr.get(i, j) == h.get(i, j));
            let flipped = (0..8).all(|i| hr.get(i, j) == -h.get(i, j));
            assert!(same || flipped, "column {j} is not a pure sign flip");
        }
        assert_ne!(h, hr, "seed 7 should flip at least one column");
    }

    #[test]
    fn random_orthogonal_properties() {
        for seed in 0..4 {
            let q = random_orthogonal(12, seed);
            let g = matmul(&q.transpose(), &q);
            assert!(g.max_abs_diff(&Matrix::identity(12)) <= 1e-10, "seed {seed}");
            assert!((determinant(&q) - 1.0).abs() <= 1e-8, "seed {seed}: det {}", determinant(&q));
        }
    }

    #[test]
    fn random_orthogonal_deterministic() {
        assert_eq!(random_orthogonal(8, 5), random_orthogonal(8, 5));
        assert_ne!(random_orthogonal(8, 5), random_orthogonal(8, 6));
    }

    #[test]
    fn block_diagonal_embedding() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b = Matrix::from_rows(&[vec![5.0]]);
        let m = block_diagonal(&[a, b]);
        assert_eq!(m.rows(), 3);
        assert_eq!(m.get(0, 1), 2.0);
        assert_eq!(m.get(2, 2), 5.0);
        assert_eq!(m.get(2, 0), 0.0);
        assert_eq!(m.get(0, 2), 0.0);
    }

    #[test]
    fn permutation_roundtrip() {
        let p = Permutation::from_map(vec![2, 0, 3, 1]).unwrap();
        let a = random_matrix(4, 9, 1.0);
        let back = p.inverse().apply_rows(&p.apply_rows(&a));
        assert_eq!(back, a);
        let pm = p.to_matrix();
        assert_eq!(pm.matvec(&[1.0, 2.0, 3.0, 4.0]), vec![3.0, 1.0, 4.0, 2.0]);
    }

    #[test]
    fn permutation_rejects_bad_map() {
        assert!(Permutation::from_map(vec![0, 0, 1]).is_err());
        assert!(Permutation::from_map(vec![0, 3]).is_err());
    }

    #[test]
    fn determinant_triangular() {
        let a = Matrix::from_rows(&[vec![2.0, 1.0], vec![0.0, 3.0]]);
        assert!((determinant(&a) - 6.0).abs() <= 1e-12);
    }
}
