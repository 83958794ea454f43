//! Check the error-bound machinery numerically: the deterministic per-sample
//! block-error chain, the sub-Gaussian bound on the expected squared block
//! maximum, and the distillation-gap inequality for categorical models.

use latmix::bounds::{
    lemma_max_check, proposition2_check, psi2_gaussian, random_scenario, theorem1_check,
};
use latmix::calib::VectorDist;
use latmix::mxquant::{ElementFormatKind, MxConfig};
use latmix::transform::{preset_transform, AffineTransform, PresetTransform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn main() {
    let d = 64;
    let mx = MxConfig::new(ElementFormatKind::Fp4E2m1, 32);
    let gauss = VectorDist::Gaussian;
    let outlier = VectorDist::OutlierChannels { count: 4, scale: 20.0 };

    println!("block error bound, 10^4 samples each (empirical mse <= bound):");
    let ident = AffineTransform::identity(d);
    let had = preset_transform(PresetTransform::HadamardBlock, d, 32, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut a = latmix::linalg::Matrix::identity(d);
    for i in 0..d {
        for j in 0..d {
            let g: f64 = StandardNormal.sample(&mut rng);
            a.set(i, j, a.get(i, j) + 0.05 * g);
        }
    }
    let affine = AffineTransform::new(a, vec![0.1; d]).unwrap();
    for (name, t) in [("identity", &ident), ("block hadamard", &had), ("random affine", &affine)] {
        for (dname, dist) in [("gaussian", &gauss), ("outliers", &outlier)] {
            let r = theorem1_check(t, &mx, dist, 10_000, 21).unwrap();
            assert!(r.holds && r.per_sample_holds);
            println!(
                "  {name:<15} {dname:<9} mse {:.5}  bound {:.5}  ({:.1}x slack)",
                r.empirical_mse,
                r.bound_value,
                r.bound_value / r.empirical_mse
            );
        }
    }

    println!("\nsquared block-max bound, gaussian blocks, 10^5 trials:");
    for b in [8usize, 32, 128] {
        let sigma = 1.0;
        let r = lemma_max_check(&vec![0.0; b], sigma, 100_000, 33);
        assert!(r.holds);
        println!(
            "  B={b:<4} E[max^2] {:.3} <= {:.3}  (psi2 {:.3})",
            r.empirical_max_sq,
            r.bound,
            psi2_gaussian(sigma)
        );
    }

    println!("\ndistillation gap bound, exact enumeration:");
    for seed in [1u64, 2, 3] {
        let s = random_scenario(5, 6, 0.02, seed).unwrap();
        let r = proposition2_check(&s);
        assert!(r.holds);
        println!(
            "  scenario {seed}: gap {:.4} <= kl {:.4} + tv term {:.4}",
            r.delta, r.kl_term, r.rhs - r.kl_term
        );
    }
}
