//! Invertible affine transforms `T(x) = A x + v` and the factorized
//! parameterizations used to learn them.
//!
//! Two parameterizations keep `A` structurally invertible no matter what the
//! optimizer does to the free parameters:
//!
//! - LU: `A = P * L * (U + diag(s))` with a fixed permutation `P`, unit lower
//!   triangular `L`, strictly upper `U`, and `s = sign_s * exp(log_s)` with
//!   frozen signs.
//! - QR: `A = Q * (R + diag(s))` with `Q = exp((G - G^T)/2)` always exactly
//!   orthogonal and strictly upper `R`.
//!
//! Transforms may carry a block structure (`structure_block`): all factors are
//! then confined to diagonal blocks of that size, which keeps the assembled
//! `A` block-diagonal. The value-path transforms of multi-head attention use
//! this with the head dimension.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    self, block_diagonal, hadamard, invert_unit_lower, invert_upper, matmul, random_orthogonal,
    Matrix, Permutation,
};

/// An affine map with a cached inverse of its linear part.
#[derive(Debug, Clone)]
pub struct AffineTransform {
    a: Matrix,
    v: Vec<f64>,
    a_inv: Matrix,
}

impl AffineTransform {
    /// Build from `a` and `v`, inverting `a`. Errors on singular `a`.
    pub fn new(a: Matrix, v: Vec<f64>) -> Result<Self> {
        assert!(a.is_square(), "transform matrix must be square");
        assert_eq!(a.rows(), v.len(), "shift length must match dimension");
        if !a.all_finite() || !v.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("affine transform".into()));
        }
        let a_inv = linalg::invert(&a)?;
        Ok(AffineTransform { a, v, a_inv })
    }

    /// Build from parts when the caller already holds an exact inverse
    /// (orthogonal transposes, triangular solves).
    pub fn from_parts(a: Matrix, v: Vec<f64>, a_inv: Matrix) -> Self {
        assert!(a.is_square(), "transform matrix must be square");
        assert_eq!(a.rows(), v.len(), "shift length must match dimension");
        assert_eq!(a.rows(), a_inv.rows(), "inverse dimension mismatch");
        AffineTransform { a, v, a_inv }
    }

    pub fn identity(d: usize) -> Self {
        AffineTransform { a: Matrix::identity(d), v: vec![0.0; d], a_inv: Matrix::identity(d) }
    }

    pub fn dim(&self) -> usize {
        self.a.rows()
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    pub fn a_inv(&self) -> &Matrix {
        &self.a_inv
    }

    /// `A x + v`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.a.matvec(x);
        for (yi, vi) in y.iter_mut().zip(&self.v) {
            *yi += vi;
        }
        y
    }

    /// `A^-1 (y - v)`.
    pub fn apply_inverse(&self, y: &[f64]) -> Vec<f64> {
        let shifted: Vec<f64> = y.iter().zip(&self.v).map(|(a, b)| a - b).collect();
        self.a_inv.matvec(&shifted)
    }

    /// `|| a * a_inv - I ||_inf`, a consistency diagnostic for the cache.
    pub fn max_inverse_residual(&self) -> f64 {
        matmul(&self.a, &self.a_inv).max_abs_diff(&Matrix::identity(self.dim()))
    }
}

/// Which factorization parameterizes the transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    Lu,
    Qr,
}

/// LU-parameterized transform: `A = P L (U + diag(sign_s * exp(log_s)))`.
///
/// Only strictly-lower entries of `l_strict` and strictly-upper entries of
/// `u_strict` inside the structure blocks are meaningful; everything else is
/// ignored by assembly and receives no gradient.
#[derive(Debug, Clone)]
pub struct LuParams {
    pub p: Permutation,
    pub l_strict: Matrix,
    pub u_strict: Matrix,
    pub log_s: Vec<f64>,
    pub sign_s: Vec<f64>,
    pub v: Vec<f64>,
    pub structure_block: usize,
}

/// QR-parameterized transform: `A = exp((G - G^T)/2) * (R + diag(s))`.
#[derive(Debug, Clone)]
pub struct QrParams {
    pub g: Matrix,
    pub r_strict: Matrix,
    pub log_s: Vec<f64>,
    pub sign_s: Vec<f64>,
    pub v: Vec<f64>,
    pub structure_block: usize,
}

/// Either parameterization, for code that handles both uniformly.
#[derive(Debug, Clone)]
pub enum TransformParams {
    Lu(LuParams),
    Qr(QrParams),
}

impl TransformParams {
    pub fn dim(&self) -> usize {
        match self {
            TransformParams::Lu(p) => p.log_s.len(),
            TransformParams::Qr(p) => p.log_s.len(),
        }
    }

    pub fn log_s(&self) -> &[f64] {
        match self {
            TransformParams::Lu(p) => &p.log_s,
            TransformParams::Qr(p) => &p.log_s,
        }
    }

    pub fn shift(&self) -> &[f64] {
        match self {
            TransformParams::Lu(p) => &p.v,
            TransformParams::Qr(p) => &p.v,
        }
    }

    pub fn assemble(&self) -> Result<AffineTransform> {
        match self {
            TransformParams::Lu(p) => assemble_lu(p),
            TransformParams::Qr(p) => assemble_qr(p),
        }
    }
}

fn check_common(d: usize, log_s: &[f64], sign_s: &[f64], v: &[f64], block: usize) -> Result<()> {
    if log_s.len() != d || sign_s.len() != d || v.len() != d {
        return Err(Error::InvalidArgument("parameter vector length mismatch".into()));
    }
    if block == 0 || d % block != 0 {
        return Err(Error::InvalidArgument(format!(
            "structure block {block} does not divide dimension {d}"
        )));
    }
    if !log_s.iter().chain(v).all(|x| x.is_finite()) {
        return Err(Error::NonFinite("transform parameters".into()));
    }
    if !sign_s.iter().all(|&s| s == 1.0 || s == -1.0) {
        return Err(Error::InvalidArgument("sign_s entries must be +1 or -1".into()));
    }
    Ok(())
}

/// Keep entry (i, j) iff it is strictly lower and inside a diagonal block.
pub(crate) fn mask_strict_lower(m: &Matrix, block: usize) -> Matrix {
    let d = m.rows();
    let mut out = Matrix::zeros(d, d);
    for i in 0..d {
        for j in 0..i {
            if i / block == j / block {
                out.set(i, j, m.get(i, j));
            }
        }
    }
    out
}

/// Keep entry (i, j) iff it is strictly upper and inside a diagonal block.
pub(crate) fn mask_strict_upper(m: &Matrix, block: usize) -> Matrix {
    let d = m.rows();
    let mut out = Matrix::zeros(d, d);
    for i in 0..d {
        for j in i + 1..d {
            if i / block == j / block {
                out.set(i, j, m.get(i, j));
            }
        }
    }
    out
}

/// Keep entry (i, j) iff it is inside a diagonal block.
pub(crate) fn mask_block_diag(m: &Matrix, block: usize) -> Matrix {
    let d = m.rows();
    let mut out = Matrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            if i / block == j / block {
                out.set(i, j, m.get(i, j));
            }
        }
    }
    out
}

/// Assemble the LU parameterization. The inverse comes from the factor
/// structure (triangular solves and the transposed permutation), not a
/// general inverse call.
pub fn assemble_lu(params: &LuParams) -> Result<AffineTransform> {
    let d = params.log_s.len();
    check_common(d, &params.log_s, &params.sign_s, &params.v, params.structure_block)?;
    if params.p.len() != d {
        return Err(Error::InvalidArgument("permutation length mismatch".into()));
    }
    for (i, &m) in params.p.map().iter().enumerate() {
        if i / params.structure_block != m / params.structure_block {
            return Err(Error::InvalidArgument(
                "permutation crosses structure blocks".into(),
            ));
        }
    }
    if !params.l_strict.all_finite() || !params.u_strict.all_finite() {
        return Err(Error::NonFinite("lu parameters".into()));
    }

    let l = Matrix::identity(d).add(&mask_strict_lower(&params.l_strict, params.structure_block));
    let mut m = mask_strict_upper(&params.u_strict, params.structure_block);
    for i in 0..d {
        m.set(i, i, params.sign_s[i] * params.log_s[i].exp());
    }
    let a = params.p.apply_rows(&matmul(&l, &m));
    let m_inv = invert_upper(&m)?;
    let l_inv = invert_unit_lower(&l);
    let a_inv = matmul(&matmul(&m_inv, &l_inv), &params.p.inverse().to_matrix());
    Ok(AffineTransform::from_parts(a, params.v.clone(), a_inv))
}

/// Assemble the QR parameterization. `Q` is exactly orthogonal by
/// construction, so its inverse is the transpose.
pub fn assemble_qr(params: &QrParams) -> Result<AffineTransform> {
    let d = params.log_s.len();
    check_common(d, &params.log_s, &params.sign_s, &params.v, params.structure_block)?;
    if !params.g.all_finite() || !params.r_strict.all_finite() {
        return Err(Error::NonFinite("qr parameters".into()));
    }

    let g = mask_block_diag(&params.g, params.structure_block);
    let skew = g.sub(&g.transpose()).scale(0.5);
    let q = linalg::matrix_exponential(&skew);
    let mut m = mask_strict_upper(&params.r_strict, params.structure_block);
    for i in 0..d {
        m.set(i, i, params.sign_s[i] * params.log_s[i].exp());
    }
    let a = matmul(&q, &m);
    let a_inv = matmul(&invert_upper(&m)?, &q.transpose());
    Ok(AffineTransform::from_parts(a, params.v.clone(), a_inv))
}

/// `(sum log_s)^2`: zero exactly when the transform preserves volume.
pub fn volume_regularizer(log_s: &[f64]) -> f64 {
    let s: f64 = log_s.iter().sum();
    s * s
}

/// Initialization schemes for learned transforms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    Identity,
    IdentityNoise,
    FullOrthogonal,
    BdOrthogonal,
    BdOrthogonalNoise,
    FullHadamard,
    BdHadamard,
    BdHadamardNoise,
}

impl InitScheme {
    fn is_block_diagonal(self) -> bool {
        matches!(
            self,
            InitScheme::Identity
                | InitScheme::IdentityNoise
                | InitScheme::BdOrthogonal
                | InitScheme::BdOrthogonalNoise
                | InitScheme::BdHadamard
                | InitScheme::BdHadamardNoise
        )
    }

    fn has_noise(self) -> bool {
        matches!(
            self,
            InitScheme::IdentityNoise | InitScheme::BdOrthogonalNoise | InitScheme::BdHadamardNoise
        )
    }
}

/// Options for [`init_transform`].
#[derive(Debug, Clone)]
pub struct InitOptions {
    /// Block size for the block-diagonal schemes.
    pub bd_block: usize,
    /// Standard deviation of the Gaussian noise in the `*Noise` schemes.
    pub noise_std: f64,
    /// Structural constraint of the transform; `None` means unstructured.
    pub structure_block: Option<usize>,
}

impl Default for InitOptions {
    fn default() -> Self {
        InitOptions { bd_block: 32, noise_std: 1e-3, structure_block: None }
    }
}

/// The matrix an LU initialization factors (before any noise is applied to
/// parameters): identity, a randomized Hadamard, a random orthogonal matrix,
/// or block-diagonal stacks of those.
pub fn init_target_matrix(scheme: InitScheme, d: usize, seed: u64, opts: &InitOptions) -> Result<Matrix> {
    let structure = opts.structure_block.unwrap_or(d);
    if d % structure != 0 {
        return Err(Error::InvalidArgument(format!(
            "structure block {structure} does not divide dimension {d}"
        )));
    }
    if !scheme.is_block_diagonal() && structure < d {
        return Err(Error::InvalidArgument(format!(
            "{scheme:?} initialization is full-rank but the transform is structured at block {structure}"
        )));
    }
    let bd = opts.bd_block.min(structure);
    if scheme.is_block_diagonal() && structure % bd != 0 {
        return Err(Error::InvalidArgument(format!(
            "init block {bd} does not divide structure block {structure}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut base = match scheme {
        InitScheme::Identity | InitScheme::IdentityNoise => Matrix::identity(d),
        InitScheme::FullOrthogonal => random_orthogonal(d, rng.random()),
        InitScheme::FullHadamard => hadamard(d, true, rng.random())?,
        InitScheme::BdOrthogonal | InitScheme::BdOrthogonalNoise => {
            let blocks: Vec<Matrix> = (0..d / bd).map(|_| random_orthogonal(bd, rng.random())).collect();
            block_diagonal(&blocks)
        }
        InitScheme::BdHadamard | InitScheme::BdHadamardNoise => {
            let blocks: Result<Vec<Matrix>> =
                (0..d / bd).map(|_| hadamard(bd, true, rng.random())).collect();
            block_diagonal(&blocks?)
        }
    };

    if scheme.has_noise() {
        let normal = Normal::new(0.0, opts.noise_std)
            .map_err(|_| Error::InvalidArgument("noise std must be finite and nonnegative".into()))?;
        // Noise perturbs off-(bd-block)-diagonal entries but never leaves the
        // structure blocks.
        for i in 0..d {
            for j in 0..d {
                if i / structure == j / structure && i / bd != j / bd {
                    let v = base.get(i, j) + normal.sample(&mut rng);
                    base.set(i, j, v);
                }
            }
        }
    }
    Ok(base)
}

/// Build initial transform parameters for the requested scheme.
///
/// LU path: the target matrix is LU-factored with partial pivoting; `log_s`
/// and the frozen `sign_s` come from the diagonal of the upper factor. QR
/// path: `Q` starts as the exponential of a seeded random (block) skew
/// matrix, `R = 0`, `log_s = 0`. The shift `v` starts at zero in every
/// scheme.
pub fn init_transform(
    scheme: InitScheme,
    d: usize,
    seed: u64,
    parameterization: Parameterization,
    opts: &InitOptions,
) -> Result<TransformParams> {
    let structure = opts.structure_block.unwrap_or(d);
    match parameterization {
        Parameterization::Lu => {
            let target = init_target_matrix(scheme, d, seed, opts)?;
            let f = linalg::lu_factor(&target)?;
            for (i, &m) in f.p.map().iter().enumerate() {
                if i / structure != m / structure {
                    return Err(Error::InvalidArgument(
                        "initialization pivoting crossed structure blocks".into(),
                    ));
                }
            }
            let mut log_s = Vec::with_capacity(d);
            let mut sign_s = Vec::with_capacity(d);
            for i in 0..d {
                let s = f.u.get(i, i);
                log_s.push(s.abs().ln());
                sign_s.push(if s >= 0.0 { 1.0 } else { -1.0 });
            }
            let mut u_strict = f.u.clone();
            for i in 0..d {
                u_strict.set(i, i, 0.0);
            }
            let mut l_strict = f.l.clone();
            for i in 0..d {
                l_strict.set(i, i, 0.0);
            }
            Ok(TransformParams::Lu(LuParams {
                p: f.p,
                l_strict,
                u_strict,
                log_s,
                sign_s,
                v: vec![0.0; d],
                structure_block: structure,
            }))
        }
        Parameterization::Qr => {
            if !scheme.is_block_diagonal() && structure < d {
                return Err(Error::InvalidArgument(format!(
                    "{scheme:?} initialization is full-rank but the transform is structured at block {structure}"
                )));
            }
            let bd = opts.bd_block.min(structure);
            if scheme.is_block_diagonal() && structure % bd != 0 {
                return Err(Error::InvalidArgument(format!(
                    "init block {bd} does not divide structure block {structure}"
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g = Matrix::zeros(d, d);
            let fill = |g: &mut Matrix, rng: &mut ChaCha8Rng, i0: usize, i1: usize| {
                let normal = Normal::new(0.0, 1.0).expect("unit normal");
                for i in i0..i1 {
                    for j in i0..i1 {
                        g.set(i, j, normal.sample(rng));
                    }
                }
            };
            match scheme {
                InitScheme::Identity | InitScheme::IdentityNoise => {}
                InitScheme::FullOrthogonal | InitScheme::FullHadamard => fill(&mut g, &mut rng, 0, d),
                InitScheme::BdOrthogonal
                | InitScheme::BdOrthogonalNoise
                | InitScheme::BdHadamard
                | InitScheme::BdHadamardNoise => {
                    for b in 0..d / bd {
                        fill(&mut g, &mut rng, b * bd, (b + 1) * bd);
                    }
                }
            }
            if scheme.has_noise() {
                let normal = Normal::new(0.0, opts.noise_std).map_err(|_| {
                    Error::InvalidArgument("noise std must be finite and nonnegative".into())
                })?;
                for i in 0..d {
                    for j in 0..d {
                        if i / structure == j / structure && i / bd != j / bd {
                            let v = g.get(i, j) + normal.sample(&mut rng);
                            g.set(i, j, v);
                        }
                    }
                }
            }
            Ok(TransformParams::Qr(QrParams {
                g,
                r_strict: Matrix::zeros(d, d),
                log_s: vec![0.0; d],
                sign_s: vec![1.0; d],
                v: vec![0.0; d],
                structure_block: structure,
            }))
        }
    }
}

/// Largest deviation of a singular value from 1.
pub fn orthogonality_deviation(a: &Matrix) -> f64 {
    linalg::singular_values(a)
        .iter()
        .fold(0.0_f64, |m, &s| m.max((s - 1.0).abs()))
}

/// Spectral norm of `a` with its diagonal blocks zeroed: how far the matrix
/// is from block-diagonal.
pub fn off_block_diag_norm(a: &Matrix, block: usize) -> Result<f64> {
    let d = a.rows();
    if block == 0 || d % block != 0 {
        return Err(Error::InvalidArgument(format!(
            "block {block} does not divide dimension {d}"
        )));
    }
    let mut off = a.clone();
    for i in 0..d {
        for j in 0..d {
            if i / block == j / block {
                off.set(i, j, 0.0);
            }
        }
    }
    Ok(linalg::spectral_norm(&off))
}

/// Non-learned baseline transforms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PresetTransform {
    None,
    HadamardFull,
    HadamardBlock,
    RandomOrthogonal,
}

/// Build a preset transform. Orthogonal presets get exact transpose inverses;
/// the shift is zero.
pub fn preset_transform(kind: PresetTransform, d: usize, block: usize, seed: u64) -> Result<AffineTransform> {
    let a = match kind {
        PresetTransform::None => Matrix::identity(d),
        PresetTransform::HadamardFull => hadamard(d, true, seed)?,
        PresetTransform::HadamardBlock => {
            if block == 0 || d % block != 0 {
                return Err(Error::InvalidArgument(format!(
                    "block {block} does not divide dimension {d}"
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let blocks: Result<Vec<Matrix>> =
                (0..d / block).map(|_| hadamard(block, true, rng.random())).collect();
            block_diagonal(&blocks?)
        }
        PresetTransform::RandomOrthogonal => random_orthogonal(d, seed),
    };
    let a_inv = a.transpose();
    Ok(AffineTransform::from_parts(a, vec![0.0; d], a_inv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand_distr::StandardNormal;

    fn random_lu_params(d: usize, seed: u64, structure: usize) -> LuParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mat = |scale: f64| {
            let mut m = Matrix::zeros(d, d);
            for i in 0..d {
                for j in 0..d {
                    let v: f64 = StandardNormal.sample(&mut rng);
                    m.set(i, j, v * scale);
                }
            }
            m
        };
        let l_strict = mat(0.4);
        let u_strict = mat(0.4);
        let mut vecs = |scale: f64| -> Vec<f64> {
            (0..d)
                .map(|_| {
                    let v: f64 = StandardNormal.sample(&mut rng);
                    v * scale
                })
                .collect()
        };
        LuParams {
            p: Permutation::identity(d),
            l_strict,
            u_strict,
            log_s: vecs(0.5),
            sign_s: (0..d).map(|i| if i % 3 == 0 { -1.0 } else { 1.0 }).collect(),
            v: vecs(1.0),
            structure_block: structure,
        }
    }

    #[test]
    fn worked_example_half_hadamard() {
        let h = hadamard(4, false, 0).unwrap();
        let t = AffineTransform::new(h, vec![0.0; 4]).unwrap();
        assert_eq!(t.apply(&[10.0, 1.0, 0.5, 0.5]), vec![6.0, 4.5, 5.0, 4.5]);
    }

    #[test]
    fn apply_inverse_roundtrip() {
        let d = 12;
        let params = random_lu_params(d, 3, d);
        let t = assemble_lu(&params).unwrap();
        let x: Vec<f64> = (0..d).map(|i| (i as f64 * 0.7).sin()).collect();
        let back = t.apply_inverse(&t.apply(&x));
        let err = x.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0_f64, f64::max);
        assert!(err <= 1e-9, "roundtrip error {err}");
    }

    #[test]
    fn assemble_lu_identity_params() {
        let d = 5;
        let params = LuParams {
            p: Permutation::identity(d),
            l_strict: Matrix::zeros(d, d),
            u_strict: Matrix::zeros(d, d),
            log_s: vec![0.0; d],
            sign_s: vec![1.0; d],
            v: vec![0.0; d],
            structure_block: d,
        };
        let t = assemble_lu(&params).unwrap();
        assert_eq!(t.a(), &Matrix::identity(d));
        assert_eq!(t.a_inv(), &Matrix::identity(d));
    }

    #[test]
    fn lu_init_reproduces_target() {
        let opts = InitOptions { bd_block: 4, noise_std: 1e-3, structure_block: None };
        for scheme in [
            InitScheme::Identity,
            InitScheme::FullOrthogonal,
            InitScheme::FullHadamard,
            InitScheme::BdOrthogonal,
            InitScheme::BdHadamard,
        ] {
            let target = init_target_matrix(scheme, 8, 21, &opts).unwrap();
            let params = init_transform(scheme, 8, 21, Parameterization::Lu, &opts).unwrap();
            let t = params.assemble().unwrap();
            assert!(
                t.a().max_abs_diff(&target) <= 1e-10,
                "{scheme:?}: assembly drifted from target by {}",
                t.a().max_abs_diff(&target)
            );
        }
    }

    #[test]
    fn lu_init_shift_starts_at_zero() {
        let params =
            init_transform(InitScheme::BdHadamard, 8, 5, Parameterization::Lu, &InitOptions {
                bd_block: 4,
                noise_std: 1e-3,
                structure_block: None,
            })
            .unwrap();
        assert!(params.shift().iter().all(|&x| x == 0.0));
        assert!(params.log_s().iter().all(|&x| x.is_finite()));
    }

    #[test]
    fn qr_init_is_orthogonal() {
        for scheme in [InitScheme::Identity, InitScheme::FullOrthogonal, InitScheme::BdOrthogonal] {
            let params = init_transform(scheme, 8, 9, Parameterization::Qr, &InitOptions {
                bd_block: 4,
                noise_std: 1e-3,
                structure_block: None,
            })
            .unwrap();
            let t = params.assemble().unwrap();
            assert!(orthogonality_deviation(t.a()) <= 1e-10, "{scheme:?}");
        }
    }

    #[test]
    fn qr_assembly_orthogonal_factor() {
        let d = 6;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut g = Matrix::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                let v: f64 = StandardNormal.sample(&mut rng);
                g.set(i, j, v);
            }
        }
        let params = QrParams {
            g,
            r_strict: Matrix::zeros(d, d),
            log_s: vec![0.3; d],
            sign_s: vec![1.0; d],
            v: vec![0.1; d],
            structure_block: d,
        };
        let t = assemble_qr(&params).unwrap();
        // A = Q diag(e^0.3); singular values are all e^0.3.
        for s in linalg::singular_values(t.a()) {
            assert!((s - 0.3_f64.exp()).abs() <= 1e-8);
        }
        assert!(t.max_inverse_residual() <= 1e-10);
    }

    #[test]
    fn structured_assembly_stays_block_diagonal() {
        let d = 8;
        let block = 4;
        let params = random_lu_params(d, 17, block);
        let t = assemble_lu(&params).unwrap();
        for i in 0..d {
            for j in 0..d {
                if i / block != j / block {
                    assert_eq!(t.a().get(i, j), 0.0, "leak at ({i},{j})");
                }
            }
        }
        let qp = init_transform(InitScheme::BdOrthogonal, d, 3, Parameterization::Qr, &InitOptions {
            bd_block: block,
            noise_std: 0.0,
            structure_block: Some(block),
        })
        .unwrap();
        let tq = qp.assemble().unwrap();
        for i in 0..d {
            for j in 0..d {
                if i / block != j / block {
                    assert!(tq.a().get(i, j).abs() < 1e-14, "leak at ({i},{j})");
                }
            }
        }
    }

    #[test]
    fn full_init_rejects_structured_transform() {
        let opts = InitOptions { bd_block: 4, noise_std: 1e-3, structure_block: Some(4) };
        assert!(init_transform(InitScheme::FullHadamard, 8, 0, Parameterization::Lu, &opts).is_err());
        assert!(init_transform(InitScheme::FullOrthogonal, 8, 0, Parameterization::Qr, &opts).is_err());
    }

    #[test]
    fn volume_regularizer_zero_iff_volume_preserved() {
        assert_eq!(volume_regularizer(&[0.0, 0.0]), 0.0);
        assert_eq!(volume_regularizer(&[0.5, -0.5]), 0.0);
        assert!(volume_regularizer(&[1.0, 1.0]) > 0.0);
        assert_eq!(volume_regularizer(&[1.0, 1.0]), 4.0);
    }

    #[test]
    fn determinant_matches_log_s() {
        for seed in 0..6 {
            let params = random_lu_params(7, seed + 40, 7);
            let t = assemble_lu(&params).unwrap();
            let det = linalg::determinant(t.a());
            let expect = params.log_s.iter().sum::<f64>().exp();
            assert!(
                (det.abs() - expect).abs() <= 1e-10 * expect,
                "seed {seed}: |det| {} vs exp(sum log_s) {expect}",
                det.abs()
            );
        }
    }

    #[test]
    fn orthogonality_deviation_examples() {
        assert!(orthogonality_deviation(&random_orthogonal(10, 2)) <= 1e-6);
        let stretched = Matrix::from_diag(&[1.5, 1.0, 1.0]);
        assert!((orthogonality_deviation(&stretched) - 0.5).abs() <= 1e-10);
    }

    #[test]
    fn off_block_diag_norm_examples() {
        let bd = block_diagonal(&[Matrix::identity(2).scale(3.0), Matrix::identity(2).scale(-2.0)]);
        assert!(off_block_diag_norm(&bd, 2).unwrap() <= 1e-12);
        let mut leak = Matrix::identity(4);
        leak.set(0, 3, 0.7);
        assert!((off_block_diag_norm(&leak, 2).unwrap() - 0.7).abs() <= 1e-8);
        assert!(off_block_diag_norm(&leak, 3).is_err());
    }

    #[test]
    fn presets_are_orthonormal() {
        for kind in [
            PresetTransform::None,
            PresetTransform::HadamardFull,
            PresetTransform::HadamardBlock,
            PresetTransform::RandomOrthogonal,
        ] {
            let t = preset_transform(kind, 16, 4, 5).unwrap();
            assert!(t.max_inverse_residual() <= 1e-10, "{kind:?}");
            assert!(orthogonality_deviation(t.a()) <= 1e-8, "{kind:?}");
            assert!(t.v().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn sign_validation() {
        let mut params = random_lu_params(4, 1, 4);
        params.sign_s[2] = 0.5;
        assert!(assemble_lu(&params).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn lu_assembly_structurally_invertible(seed in 0u64..500) {
            let params = random_lu_params(6, seed, 6);
            let t = assemble_lu(&params).unwrap();
            prop_assert!(t.max_inverse_residual() <= 1e-6,
                "residual {}", t.max_inverse_residual());
        }

        #[test]
        fn qr_assembly_structurally_invertible(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = 6;
            let mut g = Matrix::zeros(d, d);
            let mut r = Matrix::zeros(d, d);
            for i in 0..d {
                for j in 0..d {
                    let a: f64 = StandardNormal.sample(&mut rng);
                    let b: f64 = StandardNormal.sample(&mut rng);
                    g.set(i, j, a);
                    r.set(i, j, 0.4 * b);
                }
            }
            let params = QrParams {
                g,
                r_strict: r,
                log_s: (0..d).map(|i| ((seed as f64) * 0.01 + i as f64 * 0.1).sin() * 0.5).collect(),
                sign_s: vec![1.0; d],
                v: vec![0.0; d],
                structure_block: d,
            };
            let t = assemble_qr(&params).unwrap();
            prop_assert!(t.max_inverse_residual() <= 1e-6,
                "residual {}", t.max_inverse_residual());
        }
    }
}
