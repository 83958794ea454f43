//! Weight quantizers head to head: greedy error-compensating quantization
//! against plain round-to-nearest, scored by calibration-set reconstruction
//! error ||X (W - W_hat)^T||^2 on seeded random layers.

use latmix::linalg::Matrix;
use latmix::mxquant::{gptq_quantize_weights, rtn_quantize_weights, ElementFormatKind, MxConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            let g: f64 = StandardNormal.sample(rng);
            m.set(i, j, g);
        }
    }
    m
}

fn recon_err(x: &Matrix, w: &Matrix, w_hat: &Matrix) -> f64 {
    let mut err = 0.0;
    for r in 0..x.rows() {
        for o in 0..w.rows() {
            let mut acc = 0.0;
            for c in 0..x.cols() {
                acc += x.get(r, c) * (w.get(o, c) - w_hat.get(o, c));
            }
            err += acc * acc;
        }
    }
    err
}

fn main() {
    let mx = MxConfig::new(ElementFormatKind::Fp4E2m1, 32);
    let (d, n_calib, layers) = (64usize, 128usize, 20usize);
    let mut wins = 0usize;
    let mut ratio_sum = 0.0;
    for seed in 0..layers as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = normal(&mut rng, d, d);
        // correlated calibration inputs: the regime where error compensation
        // pays off over per-element rounding
        let base = normal(&mut rng, n_calib, d);
        let mixer = normal(&mut rng, d, d);
        let mut x = latmix::linalg::matmul(&base, &mixer);
        for i in 0..x.rows() {
            for j in 0..x.cols() {
                x.set(i, j, x.get(i, j) / (d as f64).sqrt());
            }
        }

        let w_rtn = rtn_quantize_weights(&w, &mx).unwrap();
        let w_gptq = gptq_quantize_weights(&w, &x, &mx, 0.01).unwrap();
        let (e_rtn, e_gptq) = (recon_err(&x, &w, &w_rtn), recon_err(&x, &w, &w_gptq));
        if e_gptq <= e_rtn {
            wins += 1;
        }
        ratio_sum += e_gptq / e_rtn;
        if seed < 5 {
            println!("layer {seed}: rtn {e_rtn:>9.3}  gptq {e_gptq:>9.3}  ratio {:.3}", e_gptq / e_rtn);
        }
    }
    println!("...");
    println!("gptq wins {wins}/{layers} layers, mean error ratio {:.3}", ratio_sum / layers as f64);
    assert!(wins * 100 >= layers * 95, "gptq should win on at least 95% of layers");
}
