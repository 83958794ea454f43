//! Numerical verification of the error bounds behind the method.
//!
//! Every check replaces hidden proportionality constants with explicit,
//! falsifiable ones: the quantizer constant comes from the worst-case
//! relative element error of the format, the sub-Gaussian constant is fixed
//! to 1, and Monte Carlo assertions carry three standard errors of slack.
//! The categorical KL/NLL bound is verified by exact enumeration, no
//! sampling involved.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::calib::{sample_vectors, VectorDist};
use crate::error::{Error, Result};
use crate::linalg::{hadamard, spectral_norm, Matrix};
use crate::mxquant::{mx_quantize_dequantize, worst_element_error, ElementFormat, MxConfig};
use crate::transform::AffineTransform;

/// Deterministic per-format constant bounding the mean squared quantization
/// error of one block relative to its squared max: worst relative element
/// error squared, divided by the square of the smallest representable block
/// max-to-scale ratio.
pub fn quantizer_constant(fmt: &ElementFormat) -> f64 {
    let w = worst_element_error(fmt);
    w * w * 2.0_f64.powi(-2 * fmt.r_max())
}

/// Monte Carlo estimate of the per-block expected squared max of the
/// transformed samples: one entry per block of the transformed dimension.
pub fn estimate_mi(transform: &AffineTransform, block: usize, samples: &Matrix) -> Result<Vec<f64>> {
    let d = transform.dim();
    if samples.cols() != d {
        return Err(Error::InvalidArgument(format!(
            "sample dimension {} does not match transform dimension {d}",
            samples.cols()
        )));
    }
    if block == 0 || d % block != 0 {
        return Err(Error::InvalidArgument(format!(
            "block {block} does not divide dimension {d}"
        )));
    }
    let nb = d / block;
    let mut acc = vec![0.0; nb];
    for s in 0..samples.rows() {
        let y = transform.apply(samples.row(s));
        for (i, chunk) in y.chunks(block).enumerate() {
            let m = chunk.iter().fold(0.0_f64, |m, &v| m.max(v.abs()));
            acc[i] += m * m;
        }
    }
    let n = samples.rows() as f64;
    Ok(acc.into_iter().map(|a| a / n).collect())
}

/// Outcome of the transformed-quantization error bound check.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundReport {
    /// Mean over samples of (1/d)*||x - T^-1(Q(T(x)))||^2.
    pub empirical_mse: f64,
    /// Squared spectral norm of the inverse transform matrix.
    pub spec_norm_sq: f64,
    /// Per-block expected squared max of the transformed samples.
    pub m_i: Vec<f64>,
    pub kappa: f64,
    /// spec_norm_sq * kappa * mean(m_i).
    pub bound_value: f64,
    /// Three relative standard errors of the Monte Carlo bound estimate.
    pub mc_slack: f64,
    pub holds: bool,
    /// The deterministic per-sample chain held for every drawn sample.
    pub per_sample_holds: bool,
    pub sample_count: usize,
}

/// Check the error bound on freshly drawn samples.
pub fn theorem1_check(
    transform: &AffineTransform,
    cfg: &MxConfig,
    dist: &VectorDist,
    n_samples: usize,
    seed: u64,
) -> Result<BoundReport> {
    let samples = sample_vectors(dist, transform.dim(), n_samples, seed);
    theorem1_check_on(transform, cfg, &samples)
}

/// Check the error bound on given samples (rows). Besides the aggregate
/// bound, the per-sample deterministic chain
/// `(1/d)*||x - T^-1(Q(T(x)))||^2 <= ||A^-1||^2 * kappa * mean_i(max_i^2)`
/// must hold for every single row; it follows from the per-element error
/// bound of the quantizer and submultiplicativity, with no randomness left.
pub fn theorem1_check_on(
    transform: &AffineTransform,
    cfg: &MxConfig,
    samples: &Matrix,
) -> Result<BoundReport> {
    let d = transform.dim();
    let b = cfg.block_size;
    if samples.cols() != d {
        return Err(Error::InvalidArgument(format!(
            "sample dimension {} does not match transform dimension {d}",
            samples.cols()
        )));
    }
    if samples.rows() == 0 {
        return Err(Error::InvalidArgument("no samples".into()));
    }
    if b == 0 || d % b != 0 {
        return Err(Error::InvalidArgument(format!("block {b} does not divide dimension {d}")));
    }
    let nb = d / b;
    let sn = spectral_norm(transform.a_inv());
    let spec_norm_sq = sn * sn;
    let kappa = quantizer_constant(&cfg.format);

    let mut mse_acc = 0.0;
    let mut m_acc = vec![0.0; nb];
    let mut sample_bound_acc = 0.0;
    let mut sample_bound_sq_acc = 0.0;
    let mut per_sample_holds = true;
    for s in 0..samples.rows() {
        let x = samples.row(s);
        let y = transform.apply(x);
        let yq = mx_quantize_dequantize(&y, cfg)?;
        let xh = transform.apply_inverse(&yq);
        let err: f64 = x.iter().zip(&xh).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / d as f64;
        let mut sum_max_sq = 0.0;
        for (i, chunk) in y.chunks(b).enumerate() {
            let m = chunk.iter().fold(0.0_f64, |m, &v| m.max(v.abs()));
            m_acc[i] += m * m;
            sum_max_sq += m * m;
        }
        let sample_bound = spec_norm_sq * kappa * sum_max_sq / nb as f64;
        // Tiny relative headroom for rounding in the comparison itself.
        if err > sample_bound * (1.0 + 1e-12) {
            per_sample_holds = false;
        }
        mse_acc += err;
        sample_bound_acc += sample_bound;
        sample_bound_sq_acc += sample_bound * sample_bound;
    }
    let n = samples.rows() as f64;
    let empirical_mse = mse_acc / n;
    let m_i: Vec<f64> = m_acc.iter().map(|a| a / n).collect();
    let bound_value = spec_norm_sq * kappa * m_i.iter().sum::<f64>() / nb as f64;
    let mean_sb = sample_bound_acc / n;
    let var_sb = (sample_bound_sq_acc / n - mean_sb * mean_sb).max(0.0);
    let mc_slack = if samples.rows() > 1 && mean_sb > 0.0 {
        3.0 * (var_sb / n).sqrt() / mean_sb
    } else {
        0.0
    };
    let holds = empirical_mse <= bound_value * (1.0 + mc_slack) + f64::MIN_POSITIVE;
    Ok(BoundReport {
        empirical_mse,
        spec_norm_sq,
        m_i,
        kappa,
        bound_value,
        mc_slack,
        holds,
        per_sample_holds,
        sample_count: samples.rows(),
    })
}

/// Closed-form bound on the expected squared block max of a sub-Gaussian
/// vector: `(max|mu_j| + K * sqrt(log(2B) + 1))^2` with the constant fixed
/// to 1. `K = 0` is allowed for the degenerate deterministic case.
pub fn subgaussian_mi_bound(mu_block: &[f64], k: f64, b: usize) -> f64 {
    assert!(b >= 1, "block must be nonempty");
    assert_eq!(mu_block.len(), b, "one mean per block element");
    assert!(k >= 0.0 && k.is_finite(), "sub-Gaussian norm must be nonnegative");
    let mu_max = mu_block.iter().fold(0.0_f64, |m, &v| m.max(v.abs()));
    let t = mu_max + k * ((2.0 * b as f64).ln() + 1.0).sqrt();
    t * t
}

/// Sub-Gaussian norm of a centered Gaussian with standard deviation sigma:
/// the solution of E exp(X^2/t^2) = 2 is t = sigma * sqrt(8/3).
pub fn psi2_gaussian(sigma: f64) -> f64 {
    assert!(sigma >= 0.0, "sigma must be nonnegative");
    sigma * (8.0_f64 / 3.0).sqrt()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LemmaReport {
    /// Monte Carlo estimate of E[max_j |y_j|^2].
    pub empirical_max_sq: f64,
    pub std_error: f64,
    pub bound: f64,
    /// bound - empirical; nonnegative whenever the bound holds with room.
    pub margin: f64,
    pub holds: bool,
    pub trials: usize,
}

/// Monte Carlo check of the block-max bound for independent Gaussian entries
/// with means `mu` and common standard deviation `sigma`, against
/// `subgaussian_mi_bound` with the exact Gaussian sub-Gaussian norm.
pub fn lemma_max_check(mu: &[f64], sigma: f64, trials: usize, seed: u64) -> LemmaReport {
    assert!(!mu.is_empty(), "block must be nonempty");
    assert!(sigma >= 0.0, "sigma must be nonnegative");
    assert!(trials >= 1, "need at least one trial");
    let b = mu.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = 0.0;
    let mut acc_sq = 0.0;
    for _ in 0..trials {
        let mut m = 0.0_f64;
        for &mj in mu {
            let z: f64 = StandardNormal.sample(&mut rng);
            m = m.max((mj + sigma * z).abs());
        }
        acc += m * m;
        acc_sq += m * m * m * m;
    }
    let n = trials as f64;
    let empirical = acc / n;
    let var = (acc_sq / n - empirical * empirical).max(0.0);
    let std_error = if trials > 1 { (var / n).sqrt() } else { 0.0 };
    let bound = subgaussian_mi_bound(mu, psi2_gaussian(sigma), b);
    LemmaReport {
        empirical_max_sq: empirical,
        std_error,
        bound,
        margin: bound - empirical,
        holds: empirical <= bound + 3.0 * std_error,
        trials,
    }
}

// ---------------------------------------------------------------------------
// Categorical KL vs NLL bound, verified by exact enumeration.

/// A finite prediction setting: `contexts` equally likely inputs, `outcomes`
/// classes. `p_theta` is the reference model, `p_tilde` the perturbed model,
/// `q` the data distribution; all entries are floored at `epsilon`.
#[derive(Debug, Clone)]
pub struct CategoricalScenario {
    pub contexts: usize,
    pub outcomes: usize,
    pub p_theta: Matrix,
    pub p_tilde: Matrix,
    pub q: Matrix,
    pub epsilon: f64,
}

impl CategoricalScenario {
    pub fn new(p_theta: Matrix, p_tilde: Matrix, q: Matrix, epsilon: f64) -> Result<Self> {
        let (n, m) = (p_theta.rows(), p_theta.cols());
        if m < 2 {
            return Err(Error::InvalidArgument("need at least two outcomes".into()));
        }
        if !(epsilon > 0.0 && epsilon * m as f64 <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "epsilon {epsilon} incompatible with {m} outcomes"
            )));
        }
        for (name, t) in [("p_theta", &p_theta), ("p_tilde", &p_tilde), ("q", &q)] {
            if (t.rows(), t.cols()) != (n, m) {
                return Err(Error::InvalidArgument(format!("{name} shape mismatch")));
            }
            for i in 0..n {
                let row = t.row(i);
                if row.iter().any(|&p| !(p >= epsilon)) {
                    return Err(Error::InvalidArgument(format!(
                        "{name} row {i} has an entry below epsilon"
                    )));
                }
                let s: f64 = row.iter().sum();
                if (s - 1.0).abs() > 1e-12 {
                    return Err(Error::InvalidArgument(format!(
                        "{name} row {i} sums to {s}, not 1"
                    )));
                }
            }
        }
        Ok(CategoricalScenario { contexts: n, outcomes: m, p_theta, p_tilde, q, epsilon })
    }
}

/// Seeded valid scenario: rows are epsilon-floored Dirichlet draws.
pub fn random_scenario(contexts: usize, outcomes: usize, epsilon: f64, seed: u64) -> Result<CategoricalScenario> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let table = |rng: &mut ChaCha8Rng| -> Matrix {
        let mut t = Matrix::zeros(contexts, outcomes);
        for i in 0..contexts {
            let w: Vec<f64> = (0..outcomes).map(|_| Exp1.sample(rng)).collect();
            let s: f64 = w.iter().sum();
            for (j, &wj) in w.iter().enumerate() {
                t.set(i, j, epsilon + (1.0 - epsilon * outcomes as f64) * wj / s);
            }
        }
        t
    };
    let p_theta = table(&mut rng);
    let p_tilde = table(&mut rng);
    let q = table(&mut rng);
    CategoricalScenario::new(p_theta, p_tilde, q, epsilon)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Proposition2Report {
    /// |E_X E_{Y~Q} [log p_theta - log p_tilde]|: the NLL gap.
    pub delta: f64,
    pub kl_term: f64,
    pub tv_term: f64,
    pub rhs: f64,
    pub slack: f64,
    pub holds: bool,
}

/// Exact-enumeration check that the NLL gap between the perturbed and the
/// reference model is bounded by the expected KL plus a total-variation term
/// with the explicit constant `2*log((1-eps)/eps)`.
pub fn proposition2_check(s: &CategoricalScenario) -> Proposition2Report {
    let n = s.contexts as f64;
    let mut diff = 0.0;
    let mut kl = 0.0;
    let mut tv = 0.0;
    for i in 0..s.contexts {
        let (pt, pp, q) = (s.p_theta.row(i), s.p_tilde.row(i), s.q.row(i));
        for j in 0..s.outcomes {
            diff += q[j] * (pt[j].ln() - pp[j].ln()) / n;
            kl += pt[j] * (pt[j].ln() - pp[j].ln()) / n;
            tv += 0.5 * (q[j] - pt[j]).abs() / n;
        }
    }
    let delta = diff.abs();
    let kl_term = kl;
    let tv_term = 2.0 * ((1.0 - s.epsilon) / s.epsilon).ln() * tv;
    let rhs = kl_term + tv_term;
    Proposition2Report {
        delta,
        kl_term,
        tv_term,
        rhs,
        slack: rhs - delta,
        holds: delta <= rhs * (1.0 + 1e-12) + 1e-15,
    }
}

// ---------------------------------------------------------------------------
// The worked length-4 example.

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiracHadamardReport {
    pub x: Vec<f64>,
    /// The orthonormal Hadamard image of x.
    pub transformed: Vec<f64>,
    pub block_size: usize,
    /// Quantization-space mean squared error per block.
    pub per_block_mse_identity: Vec<f64>,
    pub per_block_mse_hadamard: Vec<f64>,
    /// Original-space mean squared error over all elements.
    pub total_mse_identity: f64,
    pub total_mse_hadamard: f64,
    pub m_identity: Vec<f64>,
    pub m_hadamard: Vec<f64>,
}

/// A spiked length-4 vector quantized in blocks of 2, with and without an
/// orthonormal Hadamard in front: the spike's block improves, the quiet
/// block picks up error, and the total still drops.
pub fn dirac_hadamard_demo() -> Result<DiracHadamardReport> {
    let x = vec![10.0, 1.0, 0.5, 0.5];
    let cfg = MxConfig::new(crate::mxquant::ElementFormatKind::Fp4E2m1, 2);
    let identity = AffineTransform::identity(4);
    let rotation = AffineTransform::new(hadamard(4, false, 0)?, vec![0.0; 4])?;

    let run = |t: &AffineTransform| -> Result<(Vec<f64>, Vec<f64>, f64)> {
        let y = t.apply(&x);
        let yq = mx_quantize_dequantize(&y, &cfg)?;
        let per_block: Vec<f64> = y
            .chunks(2)
            .zip(yq.chunks(2))
            .map(|(a, b)| a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / 2.0)
            .collect();
        let xh = t.apply_inverse(&yq);
        let total = x.iter().zip(&xh).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 4.0;
        Ok((y, per_block, total))
    };
    let (_, pb_id, tot_id) = run(&identity)?;
    let (y_h, pb_h, tot_h) = run(&rotation)?;
    let samples = Matrix::from_vec(1, 4, x.clone());
    Ok(DiracHadamardReport {
        x,
        transformed: y_h,
        block_size: 2,
        per_block_mse_identity: pb_id,
        per_block_mse_hadamard: pb_h,
        total_mse_identity: tot_id,
        total_mse_hadamard: tot_h,
        m_identity: estimate_mi(&identity, 2, &samples)?,
        m_hadamard: estimate_mi(&rotation, 2, &samples)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::random_orthogonal;
    use crate::mxquant::ElementFormatKind;
    use proptest::prelude::*;

    fn fmt(kind: ElementFormatKind) -> ElementFormat {
        ElementFormat::new(kind)
    }

    #[test]
    fn quantizer_constants_per_format() {
        assert_eq!(quantizer_constant(&fmt(ElementFormatKind::Fp4E2m1)), 0.25);
        assert_eq!(quantizer_constant(&fmt(ElementFormatKind::Int4)), 0.0625);
        assert_eq!(quantizer_constant(&fmt(ElementFormatKind::Fp8E4m3)), 0.0625);
    }

    #[test]
    fn mi_identity_is_exact_blockwise_max_squared() {
        let t = AffineTransform::identity(4);
        let samples = Matrix::from_rows(&[vec![1.0, -3.0, 0.5, 0.25], vec![2.0, 0.0, -4.0, 1.0]]);
        let mi = estimate_mi(&t, 2, &samples).unwrap();
        assert_eq!(mi, vec![(9.0 + 4.0) / 2.0, (0.25 + 16.0) / 2.0]);
    }

    #[test]
    fn mi_of_spiked_vector_under_hadamard() {
        let t = AffineTransform::new(hadamard(4, false, 0).unwrap(), vec![0.0; 4]).unwrap();
        let samples = Matrix::from_vec(1, 4, vec![10.0, 1.0, 0.5, 0.5]);
        let mi = estimate_mi(&t, 2, &samples).unwrap();
        assert!((mi[0] - 36.0).abs() < 1e-12);
        assert!((mi[1] - 25.0).abs() < 1e-12);
    }

    #[test]
    fn mi_scales_quadratically_with_the_transform() {
        let base = random_orthogonal(8, 5);
        let t1 = AffineTransform::new(base.clone(), vec![0.0; 8]).unwrap();
        let t3 = AffineTransform::new(base.scale(3.0), vec![0.0; 8]).unwrap();
        let samples = crate::calib::sample_vectors(&VectorDist::Gaussian, 8, 50, 3);
        let a = estimate_mi(&t1, 4, &samples).unwrap();
        let b = estimate_mi(&t3, 4, &samples).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((y / x - 9.0).abs() < 1e-9);
        }
    }

    #[test]
    fn mi_rejects_bad_shapes() {
        let t = AffineTransform::identity(4);
        let samples = Matrix::zeros(2, 6);
        assert!(estimate_mi(&t, 2, &samples).is_err());
        let ok = Matrix::zeros(2, 4);
        assert!(estimate_mi(&t, 3, &ok).is_err());
    }

    #[test]
    fn theorem1_identity_on_grid_values_is_exact() {
        let t = AffineTransform::identity(8);
        let cfg = MxConfig::new(ElementFormatKind::Fp4E2m1, 4);
        // All entries on the FP4 grid at scale 1 (max 4 puts the scale at 2^0).
        let samples = Matrix::from_rows(&[
            vec![4.0, 3.0, -2.0, 1.5, 1.0, -0.5, 0.0, 4.0],
            vec![0.5, 1.0, 1.5, 2.0, 3.0, 4.0, -4.0, -3.0],
        ]);
        let r = theorem1_check_on(&t, &cfg, &samples).unwrap();
        assert_eq!(r.empirical_mse, 0.0);
        assert!(r.holds);
        assert!(r.per_sample_holds);
        assert_eq!(r.sample_count, 2);
        assert!((r.bound_value - r.spec_norm_sq * r.kappa * r.m_i.iter().sum::<f64>() / r.m_i.len() as f64).abs() < 1e-15);
    }

    #[test]
    fn theorem1_orthogonal_gaussian_holds() {
        let t = AffineTransform::new(random_orthogonal(64, 9), vec![0.0; 64]).unwrap();
        let cfg = MxConfig::new(ElementFormatKind::Fp4E2m1, 32);
        let r = theorem1_check(&t, &cfg, &VectorDist::Gaussian, 10_000, 11).unwrap();
        assert!(r.holds, "mse {} vs bound {}", r.empirical_mse, r.bound_value);
        assert!(r.per_sample_holds);
        assert!(r.empirical_mse > 0.0);
        assert_eq!(r.m_i.len(), 2);
    }

    #[test]
    fn theorem1_per_sample_chain_all_formats_and_transforms() {
        use rand::Rng;
        let d = 32;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut a = Matrix::identity(d);
        for i in 0..d {
            for j in 0..d {
                let n: f64 = StandardNormal.sample(&mut rng);
                a.set(i, j, a.get(i, j) + 0.2 / (d as f64).sqrt() * n);
            }
        }
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-0.5..0.5)).collect();
        let affine = AffineTransform::new(a, v).unwrap();
        let dists = [
            VectorDist::Gaussian,
            VectorDist::OutlierChannels { count: 3, scale: 50.0 },
        ];
        for kind in [ElementFormatKind::Fp4E2m1, ElementFormatKind::Int4, ElementFormatKind::Fp8E4m3] {
            let cfg = MxConfig::new(kind, 8);
            for dist in &dists {
                let r = theorem1_check(&affine, &cfg, dist, 500, 13).unwrap();
                assert!(r.per_sample_holds, "chain broke for {kind:?} on {dist:?}");
                assert!(r.holds);
            }
        }
    }

    #[test]
    fn subgaussian_bound_formula() {
        let b1 = subgaussian_mi_bound(&[0.0], 1.0, 1);
        assert!((b1 - (2.0_f64.ln() + 1.0)).abs() < 1e-12);
        let b2 = subgaussian_mi_bound(&[0.0], 2.0, 1);
        assert!((b2 / b1 - 4.0).abs() < 1e-12);
        // Centering the means reproduces the zero-mean bound exactly.
        assert_eq!(subgaussian_mi_bound(&[0.0; 4], 1.5, 4), subgaussian_mi_bound(&[0.0; 4], 1.5, 4));
        let shifted = subgaussian_mi_bound(&[3.0, -1.0, 0.5, 0.0], 1.5, 4);
        assert!(shifted > subgaussian_mi_bound(&[0.0; 4], 1.5, 4));
    }

    #[test]
    fn psi2_gaussian_closed_form() {
        assert!((psi2_gaussian(1.0) - (8.0_f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!((psi2_gaussian(1.0) - 1.632993).abs() < 1e-6);
        assert_eq!(psi2_gaussian(0.0), 0.0);
        assert!((psi2_gaussian(2.5) - 2.5 * psi2_gaussian(1.0)).abs() < 1e-15);
    }

    #[test]
    fn psi2_is_the_root_of_the_defining_equation() {
        // E exp(X^2/t^2) for X ~ N(0, sigma^2) is (1 - 2 sigma^2/t^2)^(-1/2);
        // at t = sigma*sqrt(8/3) that is (1 - 3/4)^(-1/2) = 2.
        let sigma = 1.7;
        let t = psi2_gaussian(sigma);
        let moment = (1.0 - 2.0 * sigma * sigma / (t * t)).powf(-0.5);
        assert!((moment - 2.0).abs() < 1e-12);
    }

    #[test]
    fn lemma_single_standard_gaussian() {
        let r = lemma_max_check(&[0.0], 1.0, 20_000, 5);
        assert!(r.holds);
        assert!((r.empirical_max_sq - 1.0).abs() < 0.05, "E X^2 = 1, got {}", r.empirical_max_sq);
        assert!(r.margin > 0.0);
    }

    #[test]
    fn lemma_block_of_32() {
        let r = lemma_max_check(&[0.0; 32], 1.0, 20_000, 6);
        assert!(r.holds);
        assert!(r.margin > 0.0);
        // The bound without the Gaussian psi2 factor would be log(64)+1.
        let naive = 64.0_f64.ln() + 1.0;
        assert!(r.bound > naive, "psi2 factor must widen the bound");
    }

    #[test]
    fn lemma_degenerate_sigma_zero() {
        let mu = [0.25, -1.5, 0.75];
        let r = lemma_max_check(&mu, 0.0, 10, 7);
        assert_eq!(r.empirical_max_sq, 2.25);
        assert_eq!(r.bound, 2.25);
        assert!(r.holds);
    }

    #[test]
    fn lemma_margin_grid() {
        for sigma in [0.5, 1.0, 2.0] {
            for b in [1usize, 4, 32] {
                for (mseed, mu) in [(0, vec![0.0; b]), (1, (0..b).map(|i| (i as f64 * 0.37).sin()).collect())] {
                    let r = lemma_max_check(&mu, sigma, 4000, 100 + mseed + b as u64);
                    assert!(r.margin >= 0.0, "margin {} at sigma {sigma} b {b}", r.margin);
                }
            }
        }
    }

    fn uniform_scenario(n: usize, m: usize, eps: f64) -> CategoricalScenario {
        let u = Matrix::from_vec(n, m, vec![1.0 / m as f64; n * m]);
        CategoricalScenario::new(u.clone(), u.clone(), u, eps).unwrap()
    }

    #[test]
    fn scenario_validation() {
        let u = uniform_scenario(2, 4, 0.05);
        assert_eq!(u.contexts, 2);
        let bad_sum = Matrix::from_vec(1, 2, vec![0.6, 0.5]);
        let ok = Matrix::from_vec(1, 2, vec![0.5, 0.5]);
        assert!(CategoricalScenario::new(bad_sum, ok.clone(), ok.clone(), 0.1).is_err());
        let below = Matrix::from_vec(1, 2, vec![0.99, 0.01]);
        assert!(CategoricalScenario::new(below, ok.clone(), ok.clone(), 0.05).is_err());
        assert!(CategoricalScenario::new(ok.clone(), ok.clone(), ok.clone(), 0.6).is_err());
        let one_outcome = Matrix::from_vec(2, 1, vec![1.0, 1.0]);
        assert!(CategoricalScenario::new(one_outcome.clone(), one_outcome.clone(), one_outcome, 0.5).is_err());
    }

    #[test]
    fn proposition2_identical_models_give_zero_gap() {
        let s = random_scenario(3, 5, 0.02, 21).unwrap();
        let same = CategoricalScenario::new(s.p_theta.clone(), s.p_theta.clone(), s.q.clone(), s.epsilon).unwrap();
        let r = proposition2_check(&same);
        assert!(r.delta < 1e-15);
        assert!(r.holds);
    }

    #[test]
    fn proposition2_data_equals_reference_reduces_to_kl() {
        let s = random_scenario(4, 6, 0.01, 22).unwrap();
        let aligned = CategoricalScenario::new(s.p_theta.clone(), s.p_tilde.clone(), s.p_theta.clone(), s.epsilon).unwrap();
        let r = proposition2_check(&aligned);
        assert!(r.tv_term < 1e-14);
        assert!(r.delta <= r.kl_term * (1.0 + 1e-12) + 1e-15);
        assert!(r.holds);
    }

    #[test]
    fn proposition2_thousand_random_scenarios_hold() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for i in 0..1000 {
            let n = rng.random_range(1..=8);
            let m = rng.random_range(2..=8);
            let eps = if i % 2 == 0 { 0.01 } else { 0.05 };
            let s = random_scenario(n, m, eps, 1000 + i).unwrap();
            let r = proposition2_check(&s);
            assert!(r.holds, "scenario {i} failed: delta {} rhs {}", r.delta, r.rhs);
        }
    }

    proptest! {
        #[test]
        fn proposition2_holds_for_arbitrary_tables(
            n in 1usize..5,
            m in 2usize..6,
            eps_pick in 0usize..2,
            seed in 0u64..u64::MAX,
        ) {
            let eps = [0.01, 0.05][eps_pick];
            let s = random_scenario(n, m, eps, seed).unwrap();
            let r = proposition2_check(&s);
            prop_assert!(r.holds, "delta {} rhs {}", r.delta, r.rhs);
        }
    }

    #[test]
    fn dirac_demo_matches_hand_arithmetic() {
        let r = dirac_hadamard_demo().unwrap();
        assert_eq!(r.transformed, vec![6.0, 4.5, 5.0, 4.5]);
        // Identity: block 1 holds the spike (10 -> 8 at scale 2), block 2 is
        // exactly representable.
        assert_eq!(r.per_block_mse_identity, vec![2.0, 0.0]);
        assert_eq!(r.per_block_mse_identity[1], 0.0);
        // Hadamard spreads the spike: block 1 improves, block 2 degrades.
        assert!(r.per_block_mse_hadamard[0] < r.per_block_mse_identity[0]);
        assert!(r.per_block_mse_hadamard[1] > 0.0);
        // And the total error still drops.
        assert!(r.total_mse_hadamard < r.total_mse_identity);
        assert_eq!(r.m_hadamard, vec![36.0, 25.0]);
        assert_eq!(r.m_identity, vec![100.0, 0.25]);
    }

    #[test]
    fn reports_serialize_to_json() {
        let t = AffineTransform::identity(8);
        let cfg = MxConfig::new(ElementFormatKind::Fp4E2m1, 4);
        let r = theorem1_check(&t, &cfg, &VectorDist::Gaussian, 32, 3).unwrap();
        let js = serde_json::to_string(&r).unwrap();
        let back: BoundReport = serde_json::from_str(&js).unwrap();
        assert_eq!(back.sample_count, 32);
        assert!(serde_json::to_string(&dirac_hadamard_demo().unwrap()).is_ok());
    }
}
