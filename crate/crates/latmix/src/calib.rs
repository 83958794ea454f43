//! Seeded synthetic calibration data.
//!
//! Real calibration corpora are out of scope at desk scale; every report that
//! consumes this data labels it as synthetic. Three generators are provided:
//! plain Gaussian vectors, Gaussian vectors where a seeded subset of channels
//! is scaled up (the outlier-channel regime that motivates learned
//! transforms), and uniform random token sequences for the toy model.

use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Distribution of vector-valued samples.
#[derive(Debug, Clone, PartialEq)]
pub enum VectorDist {
    Gaussian,
    /// `count` seeded channels scaled by `scale`.
    OutlierChannels { count: usize, scale: f64 },
}

/// Draw `n` rows of dimension `dim`.
pub fn sample_vectors(dist: &VectorDist, dim: usize, n: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let outliers: Vec<usize> = match dist {
        VectorDist::Gaussian => Vec::new(),
        VectorDist::OutlierChannels { count, .. } => {
            assert!(*count <= dim, "more outlier channels than dimensions");
            let mut idx: Vec<usize> = (0..dim).collect();
            idx.shuffle(&mut rng);
            idx.truncate(*count);
            idx.sort_unstable();
            idx
        }
    };
    let mut m = Matrix::zeros(n.max(1), dim);
    for i in 0..n {
        for j in 0..dim {
            let v: f64 = StandardNormal.sample(&mut rng);
            m.set(i, j, v);
        }
        if let VectorDist::OutlierChannels { scale, .. } = dist {
            for &c in &outliers {
                m.set(i, c, m.get(i, c) * scale);
            }
        }
    }
    m
}

/// JSON-configurable calibration generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SyntheticCalibSpec {
    Gaussian {
        dim: usize,
        n_samples: usize,
    },
    GaussianOutlierChannels {
        dim: usize,
        n_samples: usize,
        outlier_channels: usize,
        outlier_scale: f64,
    },
    TokenSequences {
        vocab_size: usize,
        n_sequences: usize,
        seq_len: usize,
    },
}

/// Generated calibration data.
#[derive(Debug, Clone, PartialEq)]
pub enum CalibrationData {
    Vectors(Matrix),
    Tokens(Vec<Vec<u32>>),
}

/// Generate data for a spec. Deterministic in `(spec, seed)`.
pub fn generate_calibration(spec: &SyntheticCalibSpec, seed: u64) -> Result<CalibrationData> {
    match spec {
        SyntheticCalibSpec::Gaussian { dim, n_samples } => {
            if *dim == 0 || *n_samples == 0 {
                return Err(Error::InvalidConfig("gaussian spec needs dim > 0 and n_samples > 0".into()));
            }
            Ok(CalibrationData::Vectors(sample_vectors(&VectorDist::Gaussian, *dim, *n_samples, seed)))
        }
        SyntheticCalibSpec::GaussianOutlierChannels { dim, n_samples, outlier_channels, outlier_scale } => {
            if *dim == 0 || *n_samples == 0 {
                return Err(Error::InvalidConfig("outlier spec needs dim > 0 and n_samples > 0".into()));
            }
            if *outlier_channels > *dim {
                return Err(Error::InvalidConfig(format!(
                    "outlier_channels {outlier_channels} exceeds dim {dim}"
                )));
            }
            if !outlier_scale.is_finite() {
                return Err(Error::InvalidConfig("outlier_scale must be finite".into()));
            }
            Ok(CalibrationData::Vectors(sample_vectors(
                &VectorDist::OutlierChannels { count: *outlier_channels, scale: *outlier_scale },
                *dim,
                *n_samples,
                seed,
            )))
        }
        SyntheticCalibSpec::TokenSequences { vocab_size, n_sequences, seq_len } => {
            if *vocab_size == 0 || *n_sequences == 0 || *seq_len == 0 {
                return Err(Error::InvalidConfig("token spec needs positive vocab, count and length".into()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let seqs = (0..*n_sequences)
                .map(|_| (0..*seq_len).map(|_| rng.random_range(0..*vocab_size as u32)).collect())
                .collect();
            Ok(CalibrationData::Tokens(seqs))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_shape_and_determinism() {
        let a = sample_vectors(&VectorDist::Gaussian, 8, 16, 3);
        let b = sample_vectors(&VectorDist::Gaussian, 8, 16, 3);
        let c = sample_vectors(&VectorDist::Gaussian, 8, 16, 4);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.rows(), 16);
        assert_eq!(a.cols(), 8);
    }

    #[test]
    fn outlier_channels_have_larger_variance() {
        let dist = VectorDist::OutlierChannels { count: 2, scale: 20.0 };
        let m = sample_vectors(&dist, 16, 512, 7);
        let mut var = vec![0.0; 16];
        for i in 0..m.rows() {
            for j in 0..16 {
                var[j] += m.get(i, j).powi(2);
            }
        }
        let mut idx: Vec<usize> = (0..16).collect();
        idx.sort_by(|&a, &b| var[b].partial_cmp(&var[a]).unwrap());
        // The two scaled channels dominate by roughly scale^2.
        assert!(var[idx[1]] > 50.0 * var[idx[2]], "variances: {var:?}");
    }

    #[test]
    fn token_sequences_in_range() {
        let spec = SyntheticCalibSpec::TokenSequences { vocab_size: 17, n_sequences: 5, seq_len: 9 };
        match generate_calibration(&spec, 1).unwrap() {
            CalibrationData::Tokens(seqs) => {
                assert_eq!(seqs.len(), 5);
                assert!(seqs.iter().all(|s| s.len() == 9 && s.iter().all(|&t| t < 17)));
            }
            _ => panic!("expected tokens"),
        }
    }

    #[test]
    fn spec_validation() {
        assert!(generate_calibration(&SyntheticCalibSpec::Gaussian { dim: 0, n_samples: 4 }, 0).is_err());
        assert!(generate_calibration(
            &SyntheticCalibSpec::GaussianOutlierChannels {
                dim: 4,
                n_samples: 4,
                outlier_channels: 5,
                outlier_scale: 10.0
            },
            0
        )
        .is_err());
    }

    #[test]
    fn spec_round_trips_through_json() {
        let spec = SyntheticCalibSpec::GaussianOutlierChannels {
            dim: 64,
            n_samples: 256,
            outlier_channels: 4,
            outlier_scale: 20.0,
        };
        let json = serde_json::to_string(&spec).unwrap();
        assert_eq!(serde_json::from_str::<SyntheticCalibSpec>(&json).unwrap(), spec);
        let unknown = r#"{"kind":"gaussian","dim":4,"n_samples":2,"extra":1}"#;
        assert!(serde_json::from_str::<SyntheticCalibSpec>(unknown).is_err());
    }
}
