//! Compare transform families on one model: fixed rotations against the
//! learned invertible map, measured by block-quantization error of the
//! wrapped activations and KL of the quantized model against its
//! full-precision teacher.

use latmix::learn::TrainConfig;
use latmix::model::ModelConfig;
use latmix::pipeline::{ablate_rows, AblateMethod, ExperimentConfig, OffsetSpec};
use latmix::calib::SyntheticCalibSpec;
use latmix::pipeline::CalibrationSource;
use latmix::transform::InitScheme;

fn main() {
    let mut cfg = ExperimentConfig::default();
    cfg.model = ModelConfig {
        d_model: 32,
        n_layers: 1,
        n_heads: 2,
        d_ff: 64,
        vocab_size: 64,
        max_seq_len: 32,
        ..ModelConfig::default()
    };
    cfg.mx.block_size = 16;
    cfg.offset = Some(OffsetSpec { channels: 2, delta: 10.0 });
    cfg.init = InitScheme::Identity;
    cfg.calibration = CalibrationSource {
        file: None,
        synthetic: Some(SyntheticCalibSpec::TokenSequences {
            vocab_size: 64,
            n_sequences: 24,
            seq_len: 16,
        }),
    };
    cfg.train = Some(TrainConfig {
        steps: 400,
        base_lr: 3e-3,
        batch_size: 8,
        log_every: 100,
        ..TrainConfig::default()
    });
    cfg.seed = 11;
    cfg.validate().unwrap();

    let methods = [
        AblateMethod::None,
        AblateMethod::HadamardBlock,
        AblateMethod::HadamardFull,
        AblateMethod::LatmixLu,
    ];
    let rows = ablate_rows(&cfg, &methods).unwrap();

    println!("{:<18} {:>14} {:>14}", "method", "activation_mse", "kl_to_teacher");
    for r in &rows {
        println!("{:<18} {:>14.5} {:>14.5}", r.method, r.activation_mse, r.kl_to_teacher);
    }

    let kl = |name: &str| rows.iter().find(|r| r.method == name).unwrap().kl_to_teacher;
    assert!(kl("latmix_lu") < kl("none"), "learned transform should beat no transform on KL");
}
