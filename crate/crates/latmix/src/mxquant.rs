//! MX block quantization: power-of-two shared scales over fixed-size blocks,
//! with FP4 (E2M1), INT4 and FP8 (E4M3) element formats.
//!
//! A vector is split into blocks of `B` consecutive elements. Each block `i`
//! gets the scale `s_i = 2^(floor(log2 max|x_j|) - r_max)`, where `r_max` is
//! the format's magnitude-exponent budget; elements are divided by `s_i`,
//! rounded to the nearest grid value (ties to the even code), and saturated at
//! the grid maximum. Dequantization multiplies the grid value back by `s_i`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::transform::AffineTransform;

/// Scale exponent assigned to an all-zero block.
pub const ZERO_BLOCK_EXPONENT: i32 = -127;

/// Supported element formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementFormatKind {
    Fp4E2m1,
    Int4,
    Fp8E4m3,
}

impl std::fmt::Display for ElementFormatKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ElementFormatKind::Fp4E2m1 => write!(f, "fp4_e2m1"),
            ElementFormatKind::Int4 => write!(f, "int4"),
            ElementFormatKind::Fp8E4m3 => write!(f, "fp8_e4m3"),
        }
    }
}

/// An element format: its full signed grid of representable values (sorted
/// ascending, symmetric around zero) and the exponent budget `r_max` relating
/// the block maximum to the shared scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ElementFormat {
    kind: ElementFormatKind,
    grid: Vec<f64>,
    r_max: i32,
}

impl ElementFormat {
    pub fn new(kind: ElementFormatKind) -> Self {
        let (magnitudes, r_max) = match kind {
            ElementFormatKind::Fp4E2m1 => (vec![0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0], 2),
            ElementFormatKind::Int4 => ((0..=7).map(f64::from).collect(), 2),
            ElementFormatKind::Fp8E4m3 => (e4m3_magnitudes(), 8),
        };
        let mut grid: Vec<f64> = magnitudes[1..].iter().map(|m| -m).rev().collect();
        grid.extend(&magnitudes);
        ElementFormat { kind, grid, r_max }
    }

    pub fn kind(&self) -> ElementFormatKind {
        self.kind
    }

    /// Full signed grid, sorted ascending.
    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn r_max(&self) -> i32 {
        self.r_max
    }

    pub fn grid_max(&self) -> f64 {
        *self.grid.last().expect("grid is nonempty")
    }

    /// Index of the zero entry in the grid.
    pub fn zero_code(&self) -> usize {
        self.grid.len() / 2
    }

    /// Position of `grid[code]`'s magnitude in the sorted magnitude list.
    /// This is the format's natural encoding of the magnitude, which the
    /// round-half-to-even tie rule is defined over.
    pub fn magnitude_code(&self, code: usize) -> usize {
        (code as isize - self.zero_code() as isize).unsigned_abs()
    }
}

/// All finite E4M3 magnitudes: zero, subnormals `m/8 * 2^-6`, and normals
/// `(1 + m/8) * 2^(e-7)` for biased exponents 1..=15, excluding the NaN slot
/// (e = 15, m = 7). Maximum is 448.
fn e4m3_magnitudes() -> Vec<f64> {
    let mut v = vec![0.0];
    for m in 1..=7 {
        v.push(m as f64 / 8.0 * 2.0_f64.powi(-6));
    }
    for e in 1..=15 {
        for m in 0..=7 {
            if e == 15 && m == 7 {
                continue;
            }
            v.push((1.0 + m as f64 / 8.0) * 2.0_f64.powi(e - 7));
        }
    }
    v
}

/// Quantization configuration: element format and block size.
///
/// Serialized as the format kind plus the block size; the grid is rebuilt on
/// load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MxConfigRepr", into = "MxConfigRepr")]
pub struct MxConfig {
    pub format: ElementFormat,
    pub block_size: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MxConfigRepr {
    format: ElementFormatKind,
    block_size: usize,
}

impl TryFrom<MxConfigRepr> for MxConfig {
    type Error = String;

    fn try_from(r: MxConfigRepr) -> std::result::Result<Self, String> {
        if r.block_size == 0 {
            return Err("block size must be positive".into());
        }
        Ok(MxConfig::new(r.format, r.block_size))
    }
}

impl From<MxConfig> for MxConfigRepr {
    fn from(c: MxConfig) -> Self {
        MxConfigRepr { format: c.format.kind(), block_size: c.block_size }
    }
}

impl MxConfig {
    pub fn new(kind: ElementFormatKind, block_size: usize) -> Self {
        assert!(block_size > 0, "block size must be positive");
        MxConfig { format: ElementFormat::new(kind), block_size }
    }
}

/// A quantized vector: per-block scale exponents plus one grid index per
/// element.
#[derive(Debug, Clone, PartialEq)]
pub struct MxQuantized {
    pub config: MxConfig,
    pub len: usize,
    pub scale_exponents: Vec<i32>,
    pub codes: Vec<u8>,
}

/// Exact floor(log2 m) for finite positive `m`, read off the binary
/// representation rather than computed through a logarithm.
fn floor_log2(m: f64) -> i32 {
    debug_assert!(m > 0.0 && m.is_finite());
    let bits = m.to_bits();
    let exp = ((bits >> 52) & 0x7ff) as i32;
    if exp != 0 {
        exp - 1023
    } else {
        // Subnormal: locate the highest set mantissa bit.
        let mant = bits & ((1u64 << 52) - 1);
        63 - mant.leading_zeros() as i32 - 1074
    }
}

/// Shared scale exponent for one block: `floor(log2 max|x|) - r_max`, or
/// [`ZERO_BLOCK_EXPONENT`] for an all-zero block.
pub fn block_scale_exponent(block: &[f64], fmt: &ElementFormat) -> Result<i32> {
    let mut maxabs = 0.0_f64;
    for &x in block {
        if !x.is_finite() {
            return Err(Error::NonFinite("block_scale_exponent input".into()));
        }
        maxabs = maxabs.max(x.abs());
    }
    if maxabs == 0.0 {
        return Ok(ZERO_BLOCK_EXPONENT);
    }
    Ok(floor_log2(maxabs) - fmt.r_max())
}

/// Nearest grid code for a scaled value `z`: round to nearest, break exact
/// ties toward the even magnitude code, saturate beyond the grid maximum.
pub fn quantize_element(z: f64, fmt: &ElementFormat) -> usize {
    debug_assert!(z.is_finite());
    let grid = fmt.grid();
    if z <= grid[0] {
        return 0;
    }
    if z >= grid[grid.len() - 1] {
        return grid.len() - 1;
    }
    let hi = grid.partition_point(|&g| g < z);
    let lo = hi - 1;
    if grid[hi] == z {
        return hi;
    }
    let dlo = z - grid[lo];
    let dhi = grid[hi] - z;
    if dlo < dhi {
        lo
    } else if dhi < dlo {
        hi
    } else if fmt.magnitude_code(lo) % 2 == 0 {
        lo
    } else {
        hi
    }
}

/// Quantize a vector whose length is a multiple of the block size.
pub fn mx_quantize(x: &[f64], cfg: &MxConfig) -> Result<MxQuantized> {
    let b = cfg.block_size;
    if x.len() % b != 0 || x.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "vector length {} is not a positive multiple of block size {b}",
            x.len()
        )));
    }
    let fmt = &cfg.format;
    let mut scale_exponents = Vec::with_capacity(x.len() / b);
    let mut codes = Vec::with_capacity(x.len());
    for block in x.chunks(b) {
        let e = block_scale_exponent(block, fmt)?;
        let s = 2.0_f64.powi(e);
        scale_exponents.push(e);
        for &v in block {
            codes.push(quantize_element(v / s, fmt) as u8);
        }
    }
    Ok(MxQuantized { config: cfg.clone(), len: x.len(), scale_exponents, codes })
}

/// Reconstruct the quantized vector: `s_i * grid[code]` per element.
pub fn mx_dequantize(q: &MxQuantized) -> Vec<f64> {
    let b = q.config.block_size;
    let grid = q.config.format.grid();
    let mut out = Vec::with_capacity(q.len);
    for (i, chunk) in q.codes.chunks(b).enumerate() {
        let s = 2.0_f64.powi(q.scale_exponents[i]);
        for &c in chunk {
            out.push(s * grid[c as usize]);
        }
    }
    out
}

/// Quantize-dequantize in one step.
pub fn mx_quantize_dequantize(x: &[f64], cfg: &MxConfig) -> Result<Vec<f64>> {
    Ok(mx_dequantize(&mx_quantize(x, cfg)?))
}

/// The format's representable values.
pub fn grid_values(fmt: &ElementFormat) -> &[f64] {
    fmt.grid()
}

/// Integral of the squared rounding error of `grid` over `[lo, hi]` with
/// midpoint decision boundaries.
pub fn c_q_for_grid(grid: &[f64], lo: f64, hi: f64) -> f64 {
    assert!(!grid.is_empty() && lo < hi, "need a nonempty grid and lo < hi");
    let cube = |x: f64| x * x * x;
    let mut total = 0.0;
    for (k, &q) in grid.iter().enumerate() {
        let l = if k == 0 { lo } else { (grid[k - 1] + q) / 2.0 }.max(lo);
        let u = if k + 1 == grid.len() { hi } else { (q + grid[k + 1]) / 2.0 }.min(hi);
        if u > l {
            total += (cube(u - q) - cube(l - q)) / 3.0;
        }
    }
    total
}

/// Grid roughness constant: integral of the squared rounding error over the
/// format's full range `[-grid_max, grid_max]`.
pub fn c_q(fmt: &ElementFormat) -> f64 {
    c_q_for_grid(fmt.grid(), -fmt.grid_max(), fmt.grid_max())
}

/// Worst-case element rounding error for scaled values in `[0, 2^(r_max+1))`:
/// the larger of the widest half-gap between adjacent grid values and the
/// saturation error at the range's end.
pub fn worst_element_error(fmt: &ElementFormat) -> f64 {
    let grid = fmt.grid();
    let mut worst = 0.0_f64;
    for w in grid.windows(2) {
        worst = worst.max((w[1] - w[0]) / 2.0);
    }
    worst.max(2.0_f64.powi(fmt.r_max() + 1) - fmt.grid_max())
}

/// Transformation error report: overall MSE and the per-block breakdown, both
/// measured in the original coordinates.
#[derive(Debug, Clone)]
pub struct ErrorReport {
    pub mse: f64,
    pub per_block_mse: Vec<f64>,
    pub n_samples: usize,
    pub dim: usize,
    pub block_size: usize,
}

/// Monte Carlo estimate of the transformation error
/// `(1/d) E ||x - T^-1(Q(T(x)))||^2` over the given sample rows, with the
/// per-block decomposition `E_B^i = (1/B) sum_{j in block i} err_j^2`.
pub fn transformation_mse(
    t: &AffineTransform,
    cfg: &MxConfig,
    samples: &Matrix,
) -> Result<ErrorReport> {
    let d = samples.cols();
    if d % cfg.block_size != 0 {
        return Err(Error::InvalidArgument(format!(
            "dimension {d} is not a multiple of block size {}",
            cfg.block_size
        )));
    }
    if t.dim() != d {
        return Err(Error::InvalidArgument(format!(
            "transform dimension {} does not match samples dimension {d}",
            t.dim()
        )));
    }
    let n_blocks = d / cfg.block_size;
    let mut per_block = vec![0.0; n_blocks];
    for r in 0..samples.rows() {
        let x = samples.row(r);
        let y = t.apply(x);
        let q = mx_quantize_dequantize(&y, cfg)?;
        let xhat = t.apply_inverse(&q);
        for (i, block) in per_block.iter_mut().enumerate() {
            let mut acc = 0.0;
            for j in i * cfg.block_size..(i + 1) * cfg.block_size {
                let e = x[j] - xhat[j];
                acc += e * e;
            }
            *block += acc / cfg.block_size as f64;
        }
    }
    let n = samples.rows() as f64;
    for b in per_block.iter_mut() {
        *b /= n;
    }
    let mse = per_block.iter().sum::<f64>() / n_blocks as f64;
    Ok(ErrorReport {
        mse,
        per_block_mse: per_block,
        n_samples: samples.rows(),
        dim: d,
        block_size: cfg.block_size,
    })
}

/// Round-to-nearest weight quantization: every row is quantize-dequantized
/// independently (blocks run along the input dimension).
pub fn rtn_quantize_weights(w: &Matrix, cfg: &MxConfig) -> Result<Matrix> {
    if w.cols() % cfg.block_size != 0 {
        return Err(Error::InvalidArgument(format!(
            "row length {} is not a multiple of block size {}",
            w.cols(),
            cfg.block_size
        )));
    }
    let mut out = Matrix::zeros(w.rows(), w.cols());
    for r in 0..w.rows() {
        let q = mx_quantize_dequantize(w.row(r), cfg)?;
        out.row_mut(r).copy_from_slice(&q);
    }
    Ok(out)
}

/// Lower Cholesky factor of a symmetric positive definite matrix.
fn cholesky_lower(a: &Matrix) -> Result<Matrix> {
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut acc = a.get(i, j);
            for k in 0..j {
                acc -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                if acc <= 0.0 {
                    return Err(Error::Singular(format!(
                        "Cholesky pivot {acc:.3e} at row {i}; Hessian is singular after damping"
                    )));
                }
                l.set(i, j, acc.sqrt());
            } else {
                l.set(i, j, acc / l.get(j, j));
            }
        }
    }
    Ok(l)
}

/// GPTQ weight quantization with error compensation.
///
/// Columns are quantized left to right. The Hessian `X^T X` is damped by
/// `damping * mean(diag)`, inverted, and Cholesky-factored; each quantization
/// error is propagated to the not-yet-quantized columns through the upper
/// factor. Per-MX-block scales are frozen from the compensated values at
/// block entry, before the in-block compensation runs.
pub fn gptq_quantize_weights(
    w: &Matrix,
    calib: &Matrix,
    cfg: &MxConfig,
    damping: f64,
) -> Result<Matrix> {
    let d_in = w.cols();
    if calib.cols() != d_in {
        return Err(Error::InvalidArgument(format!(
            "calibration feature dimension {} does not match weight input dimension {d_in}",
            calib.cols()
        )));
    }
    if d_in % cfg.block_size != 0 {
        return Err(Error::InvalidArgument(format!(
            "input dimension {d_in} is not a multiple of block size {}",
            cfg.block_size
        )));
    }
    if !w.all_finite() || !calib.all_finite() {
        return Err(Error::NonFinite("gptq input".into()));
    }

    let mut h = crate::linalg::matmul(&calib.transpose(), calib);
    let mean_diag = (0..d_in).map(|i| h.get(i, i)).sum::<f64>() / d_in as f64;
    for i in 0..d_in {
        let v = h.get(i, i) + damping * mean_diag;
        h.set(i, i, v);
    }
    let hinv = crate::linalg::invert(&h)
        .map_err(|_| Error::Singular("Hessian is singular after damping".into()))?;
    let u = cholesky_lower(&hinv)?.transpose();

    let fmt = &cfg.format;
    let grid = fmt.grid();
    let b = cfg.block_size;
    let mut work = w.clone();
    let mut out = Matrix::zeros(w.rows(), d_in);

    for block_start in (0..d_in).step_by(b) {
        // Freeze the per-row scale for this block from the compensated values.
        let mut exps = Vec::with_capacity(w.rows());
        for r in 0..w.rows() {
            exps.push(block_scale_exponent(&work.row(r)[block_start..block_start + b], fmt)?);
        }
        for j in block_start..block_start + b {
            let ujj = u.get(j, j);
            for r in 0..w.rows() {
                let s = 2.0_f64.powi(exps[r]);
                let code = quantize_element(work.get(r, j) / s, fmt);
                let qv = s * grid[code];
                let err = (work.get(r, j) - qv) / ujj;
                out.set(r, j, qv);
                for k in j + 1..d_in {
                    let v = work.get(r, k) - err * u.get(j, k);
                    work.set(r, k, v);
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{hadamard, matmul};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn fp4() -> ElementFormat {
        ElementFormat::new(ElementFormatKind::Fp4E2m1)
    }
    fn int4() -> ElementFormat {
        ElementFormat::new(ElementFormatKind::Int4)
    }
    fn fp8() -> ElementFormat {
        ElementFormat::new(ElementFormatKind::Fp8E4m3)
    }

    fn q(z: f64, fmt: &ElementFormat) -> f64 {
        fmt.grid()[quantize_element(z, fmt)]
    }

    #[test]
    fn grids_are_sane() {
        assert_eq!(fp4().grid().len(), 15);
        assert_eq!(fp4().grid_max(), 6.0);
        assert_eq!(int4().grid().len(), 15);
        assert_eq!(int4().grid_max(), 7.0);
        assert_eq!(fp8().grid().len(), 253);
        assert_eq!(fp8().grid_max(), 448.0);
        for fmt in [fp4(), int4(), fp8()] {
            let g = fmt.grid();
            assert!(g.windows(2).all(|w| w[0] < w[1]), "{:?} grid not strictly sorted", fmt.kind());
            assert_eq!(g[fmt.zero_code()], 0.0);
            let n = g.len();
            for i in 0..n {
                assert_eq!(g[i], -g[n - 1 - i], "{:?} grid not symmetric", fmt.kind());
            }
        }
    }

    #[test]
    fn fp8_smallest_subnormal() {
        let g = fp8();
        let positives: Vec<f64> = g.grid().iter().copied().filter(|&x| x > 0.0).collect();
        assert_eq!(positives[0], 2.0_f64.powi(-9));
    }

    #[test]
    fn quantize_element_examples() {
        // Nearest, no tie.
        assert_eq!(q(4.5, &fp4()), 4.0);
        // Exact tie between 4 and 6: magnitude code of 4 is even.
        assert_eq!(q(5.0, &fp4()), 4.0);
        // Saturation.
        assert_eq!(q(100.0, &fp4()), 6.0);
        assert_eq!(q(-100.0, &fp4()), -6.0);
        // Exact grid values round-trip.
        assert_eq!(q(0.5, &fp4()), 0.5);
        assert_eq!(q(-1.5, &fp4()), -1.5);
        // Tie between 0 and 0.5 goes to 0 (even code).
        assert_eq!(q(0.25, &fp4()), 0.0);
        assert_eq!(q(-0.25, &fp4()), 0.0);
        // INT4 behaves like banker's rounding.
        assert_eq!(q(2.5, &int4()), 2.0);
        assert_eq!(q(3.5, &int4()), 4.0);
        assert_eq!(q(-2.5, &int4()), -2.0);
        assert_eq!(q(7.7, &int4()), 7.0);
        // FP8 saturates at 448.
        assert_eq!(q(449.0, &fp8()), 448.0);
    }

    #[test]
    fn scale_exponent_examples() {
        assert_eq!(block_scale_exponent(&[6.0, 4.5, 5.0, 4.5], &fp4()).unwrap(), 0);
        assert_eq!(block_scale_exponent(&[0.5, 0.5], &fp4()).unwrap(), -3);
        assert_eq!(block_scale_exponent(&[10.0, 1.0], &fp4()).unwrap(), 1);
        assert_eq!(block_scale_exponent(&[0.0, 0.0], &fp4()).unwrap(), ZERO_BLOCK_EXPONENT);
        // Exact powers of two must not be nudged by log rounding.
        assert_eq!(block_scale_exponent(&[4.0], &fp4()).unwrap(), 0);
        assert_eq!(block_scale_exponent(&[2.0_f64.powi(20)], &fp4()).unwrap(), 18);
        assert!(block_scale_exponent(&[f64::NAN], &fp4()).is_err());
        assert!(block_scale_exponent(&[1.0, f64::INFINITY], &fp4()).is_err());
    }

    #[test]
    fn worked_example_block4() {
        let cfg = MxConfig::new(ElementFormatKind::Fp4E2m1, 4);
        let dq = mx_quantize_dequantize(&[6.0, 4.5, 5.0, 4.5], &cfg).unwrap();
        assert_eq!(dq, vec![6.0, 4.0, 4.0, 4.0]);
    }

    #[test]
    fn all_zero_block_round_trips_to_zero() {
        let cfg = MxConfig::new(ElementFormatKind::Fp4E2m1, 4);
        let qz = mx_quantize(&[0.0; 8], &cfg).unwrap();
        assert!(qz.scale_exponents.iter().all(|&e| e == ZERO_BLOCK_EXPONENT));
        assert!(mx_dequantize(&qz).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn length_must_divide() {
        let cfg = MxConfig::new(ElementFormatKind::Fp4E2m1, 4);
        assert!(mx_quantize(&[1.0; 6], &cfg).is_err());
        assert!(mx_quantize(&[], &cfg).is_err());
    }

    #[test]
    fn c_q_values() {
        assert!((c_q(&fp4()) - 1.75).abs() < 1e-12);
        // Uniform grid with step h on [-c, c]: error integral is 2c * h^2/12.
        let h = 0.25;
        let c = 2.0;
        let grid: Vec<f64> = (-8..=8).map(|k| k as f64 * h).collect();
        assert!((c_q_for_grid(&grid, -c, c) - 2.0 * c * h * h / 12.0).abs() < 1e-12);
        // Single-point grid {0} on [-1, 1]: integral of z^2 is 2/3.
        assert!((c_q_for_grid(&[0.0], -1.0, 1.0) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn c_q_matches_numeric_integration() {
        // Independent oracle: trapezoid-free Riemann sum over a fine grid.
        for fmt in [fp4(), int4(), fp8()] {
            let gmax = fmt.grid_max();
            let n = 2_000_000usize;
            let dz = 2.0 * gmax / n as f64;
            let mut acc = 0.0;
            for k in 0..n {
                let z = -gmax + (k as f64 + 0.5) * dz;
                let e = z - q(z, &fmt);
                acc += e * e * dz;
            }
            let exact = c_q(&fmt);
            assert!(
                (acc - exact).abs() <= 1e-4 * exact.max(1.0),
                "{:?}: riemann {acc} vs closed-form {exact}",
                fmt.kind()
            );
        }
    }

    #[test]
    fn worst_element_error_values() {
        assert_eq!(worst_element_error(&fp4()), 2.0);
        assert_eq!(worst_element_error(&int4()), 1.0);
        assert_eq!(worst_element_error(&fp8()), 64.0);
    }

    #[test]
    fn rtn_quantizes_rows() {
        let cfg = MxConfig::new(ElementFormatKind::Fp4E2m1, 4);
        let w = Matrix::from_rows(&[vec![6.0, 4.5, 5.0, 4.5], vec![0.0, 0.0, 0.0, 0.0]]);
        let out = rtn_quantize_weights(&w, &cfg).unwrap();
        assert_eq!(out.row(0), &[6.0, 4.0, 4.0, 4.0]);
        assert_eq!(out.row(1), &[0.0, 0.0, 0.0, 0.0]);
        let bad = Matrix::zeros(2, 6);
        assert!(rtn_quantize_weights(&bad, &cfg).is_err());
    }

    #[test]
    fn gptq_with_orthonormal_calibration_equals_rtn() {
        let d = 16;
        let x = hadamard(d, false, 0).unwrap();
        let cfg = MxConfig::new(ElementFormatKind::Fp4E2m1, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut w = Matrix::zeros(6, d);
        for i in 0..6 {
            for j in 0..d {
                let v: f64 = StandardNormal.sample(&mut rng);
                w.set(i, j, v);
            }
        }
        let g = gptq_quantize_weights(&w, &x, &cfg, 0.01).unwrap();
        let r = rtn_quantize_weights(&w, &cfg).unwrap();
        assert_eq!(g, r);
    }

    #[test]
    fn gptq_improves_reconstruction_on_correlated_data() {
        let d = 32;
        let n = 128;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        // Correlated features: random data times a mixing matrix.
        let mut base = Matrix::zeros(n, d);
        for i in 0..n {
            for j in 0..d {
                let v: f64 = StandardNormal.sample(&mut rng);
                base.set(i, j, v);
            }
        }
        let mut mix = Matrix::identity(d);
        for i in 0..d {
            for j in 0..d {
                let v: f64 = StandardNormal.sample(&mut rng);
                mix.set(i, j, mix.get(i, j) + 0.4 * v);
            }
        }
        let x = matmul(&base, &mix);
        let mut w = Matrix::zeros(8, d);
        for i in 0..8 {
            for j in 0..d {
                let v: f64 = StandardNormal.sample(&mut rng);
                w.set(i, j, v);
            }
        }
        let cfg = MxConfig::new(ElementFormatKind::Fp4E2m1, 16);
        let g = gptq_quantize_weights(&w, &x, &cfg, 0.01).unwrap();
        let r = rtn_quantize_weights(&w, &cfg).unwrap();
        let recon = |wq: &Matrix| {
            let diff = matmul(&x, &w.transpose()).sub(&matmul(&x, &wq.transpose()));
            diff.frobenius_norm()
        };
        assert!(
            recon(&g) <= recon(&r),
            "gptq {} should not exceed rtn {}",
            recon(&g),
            recon(&r)
        );
    }

    #[test]
    fn gptq_rejects_mismatched_calibration() {
        let cfg = MxConfig::new(ElementFormatKind::Fp4E2m1, 4);
        let w = Matrix::zeros(2, 8);
        let x = Matrix::zeros(4, 6);
        assert!(gptq_quantize_weights(&w, &x, &cfg, 0.01).is_err());
    }

    proptest! {
        #[test]
        fn quantization_is_idempotent(
            values in proptest::collection::vec(-50.0_f64..50.0, 8),
            kind in prop_oneof![
                Just(ElementFormatKind::Fp4E2m1),
                Just(ElementFormatKind::Int4),
                Just(ElementFormatKind::Fp8E4m3)
            ],
        ) {
            let cfg = MxConfig::new(kind, 4);
            let once = mx_quantize_dequantize(&values, &cfg).unwrap();
            let twice = mx_quantize_dequantize(&once, &cfg).unwrap();
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn quantizer_is_sign_symmetric(z in -600.0_f64..600.0) {
            for fmt in [fp4(), int4(), fp8()] {
                prop_assert_eq!(q(-z, &fmt), -q(z, &fmt));
            }
        }

        #[test]
        fn scale_puts_block_max_in_budget_window(
            values in proptest::collection::vec(-1000.0_f64..1000.0, 8),
        ) {
            for fmt in [fp4(), int4(), fp8()] {
                let maxabs = values.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
                prop_assume!(maxabs > 0.0);
                let e = block_scale_exponent(&values, &fmt).unwrap();
                let scaled = maxabs / 2.0_f64.powi(e);
                let lo = 2.0_f64.powi(fmt.r_max());
                prop_assert!(scaled >= lo && scaled < 2.0 * lo,
                    "{:?}: scaled max {scaled} outside [{lo}, {})", fmt.kind(), 2.0 * lo);
            }
        }

        #[test]
        fn per_element_error_is_bounded(
            values in proptest::collection::vec(-1000.0_f64..1000.0, 8),
        ) {
            for fmt in [fp4(), int4(), fp8()] {
                let cfg = MxConfig { format: fmt.clone(), block_size: 4 };
                let dq = mx_quantize_dequantize(&values, &cfg).unwrap();
                let worst = worst_element_error(&fmt);
                for (chunk, dchunk) in values.chunks(4).zip(dq.chunks(4)) {
                    let e = block_scale_exponent(chunk, &fmt).unwrap();
                    let s = 2.0_f64.powi(e);
                    for (x, y) in chunk.iter().zip(dchunk) {
                        prop_assert!((x - y).abs() <= s * worst * (1.0 + 1e-12),
                            "{:?}: |{x} - {y}| > {s} * {worst}", fmt.kind());
                    }
                }
            }
        }
    }
}
