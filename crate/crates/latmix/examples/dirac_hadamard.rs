//! The four-element worked example: a spiked vector quantized in blocks of
//! two, with and without an orthonormal Hadamard in front of the quantizer.
//!
//! The spike [10, 1, 0.5, 0.5] puts everything interesting in one block; the
//! rotation spreads it out, trading a little error in the quiet block for a
//! big win in the loud one.

use latmix::bounds::dirac_hadamard_demo;

fn main() {
    let r = dirac_hadamard_demo().unwrap();

    println!("x                 = {:?}", r.x);
    println!("(1/2)H4 x         = {:?}  (exact)", r.transformed);
    assert_eq!(r.transformed, vec![6.0, 4.5, 5.0, 4.5]);

    println!();
    println!("FP4 E2M1, block size {}", r.block_size);
    println!("per-block squared max  identity {:?}  hadamard {:?}", r.m_identity, r.m_hadamard);
    println!("per-block mse          identity {:?}  hadamard {:?}", r.per_block_mse_identity, r.per_block_mse_hadamard);
    println!("total mse              identity {}  hadamard {}", r.total_mse_identity, r.total_mse_hadamard);

    // The spike block improves, the quiet block pays a little, the total drops.
    assert!(r.per_block_mse_hadamard[0] < r.per_block_mse_identity[0]);
    assert!(r.per_block_mse_hadamard[1] > r.per_block_mse_identity[1]);
    assert!(r.total_mse_hadamard < r.total_mse_identity);
    println!();
    println!("rotation cuts total mse by {:.1}x", r.total_mse_identity / r.total_mse_hadamard);
}
