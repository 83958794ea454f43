//! Folding: the transformed model (transform and inverse injected around
//! every quantization point, stream carried in transformed coordinates) is
//! the same function as the deployed model with everything absorbed into the
//! weights. For orthogonal zero-shift transforms the transformed model also
//! matches the original network exactly, because rms normalization commutes
//! with rotations.

use latmix::model::{
    check_fold_equivalence, fold_all, forward_deployed, forward_fp, forward_transformed,
    logits_deviation, random_transform_set, ModelConfig, ModelWeights, QuantPoints, TransformSet,
};
use latmix::mxquant::{ElementFormatKind, MxConfig};
use latmix::transform::{preset_transform, PresetTransform};

fn main() {
    let config = ModelConfig { d_model: 64, n_layers: 2, ..ModelConfig::default() };
    let weights = ModelWeights::random(&config, 3);
    let mx = MxConfig::new(ElementFormatKind::Fp4E2m1, 32);
    let qp_off = QuantPoints::none(mx.clone());
    let tokens: Vec<u32> = (0..32).map(|i| (i * 7 + 1) % 256).collect();
    let plain = forward_fp(&weights, &config, &tokens).unwrap();

    // Orthogonal, zero shift: rotating the stream changes nothing the
    // network can observe, so even the original function is preserved.
    let mut rot = TransformSet::identity(&config);
    rot.t1 = preset_transform(PresetTransform::HadamardBlock, config.d_model, 32, 0).unwrap();
    let inj_rot = forward_transformed(&weights, &config, &rot, &qp_off, &tokens).unwrap();
    println!("block hadamard, injected vs original   {:.3e}", logits_deviation(&plain, &inj_rot));

    // General affine with shifts: a genuinely different function (the norm
    // sees shifted coordinates), but injected and folded must still agree.
    let set = random_transform_set(&config, 4, true);
    let injected = forward_transformed(&weights, &config, &set, &qp_off, &tokens).unwrap();
    println!("general affine, injected vs original   {:.3e}", logits_deviation(&plain, &injected));

    let folded = fold_all(&weights, &set, mx.block_size).unwrap();
    let deployed = forward_deployed(&folded, &config, &qp_off, &tokens, set.t3_enabled).unwrap();
    let dev = logits_deviation(&injected, &deployed);
    println!("general affine, injected vs folded     {dev:.3e}");
    assert!(dev <= 1e-5);

    // Same agreement with real quantize-dequantize at every insertion point.
    let qp_on = QuantPoints::all(mx.clone());
    let inj_q = forward_transformed(&weights, &config, &set, &qp_on, &tokens).unwrap();
    let dep_q = forward_deployed(&folded, &config, &qp_on, &tokens, set.t3_enabled).unwrap();
    println!("general affine, quant on, inj vs fold  {:.3e}", logits_deviation(&inj_q, &dep_q));

    // The library gate run before any weight quantization.
    let worst = check_fold_equivalence(&weights, &config, &set, mx.block_size, &[tokens], 1e-5).unwrap();
    println!("gate worst deviation                   {worst:.3e}");
}
