//! Block quantization up close: shared power-of-two scales, tie-to-even
//! rounding, saturation, and the exactness of a second round trip.

use latmix::mxquant::{
    mx_dequantize, mx_quantize, mx_quantize_dequantize, ElementFormatKind, MxConfig,
};

fn show(kind: ElementFormatKind, x: &[f64]) {
    let cfg = MxConfig::new(kind, 4);
    let q = mx_quantize(x, &cfg).unwrap();
    let back = mx_dequantize(&q);
    println!("{kind}");
    println!("  x      = {x:?}");
    println!("  scales = 2^{:?} per block of {}", q.scale_exponents, cfg.block_size);
    println!("  codes  = {:?}", q.codes);
    println!("  x_hat  = {back:?}");
    let twice = mx_quantize_dequantize(&back, &cfg).unwrap();
    assert_eq!(back, twice, "quantized values must be fixed points");
    println!();
}

fn main() {
    let x = [0.7, -3.1, 1.9, 0.05, 40.0, -0.3, 0.2, 0.1];
    show(ElementFormatKind::Fp4E2m1, &x);
    show(ElementFormatKind::Int4, &x);
    show(ElementFormatKind::Fp8E4m3, &x);

    // Ties round to the even magnitude code: 5 at scale 2 sits exactly
    // between grid points 4 and 6 and goes to 4.
    let cfg = MxConfig::new(ElementFormatKind::Fp4E2m1, 4);
    let tie = mx_quantize_dequantize(&[5.0, 5.0, 5.0, 5.0], &cfg).unwrap();
    println!("tie case [5,5,5,5] -> {tie:?} (halfway between 4 and 6, even wins)");
    assert_eq!(tie, vec![4.0; 4]);

    // The block max can still saturate: max/scale lands in [4, 8) but the
    // grid stops at 6.
    let sat = mx_quantize_dequantize(&[7.9, 0.0, 0.0, 0.0], &cfg).unwrap();
    println!("saturation [7.9,0,0,0] -> {sat:?} (grid top is 6 x scale 1)");
    assert_eq!(sat[0], 6.0);

    // An all-zero block gets the reserved minimal exponent and zero codes.
    let z = mx_quantize(&[0.0; 4], &cfg).unwrap();
    println!("zero block scale exponent = {}", z.scale_exponents[0]);
    assert_eq!(z.scale_exponents[0], -127);
}
