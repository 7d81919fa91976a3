//! Configurable ASPP segmentation network.

mod checkpoint;
mod config;
mod network;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, FORMAT_VERSION, MAGIC};
pub use config::{BatchNormConfig, BlockSpec, NetworkConfig};
pub use network::{AsppBranch, ConvUnit, FrontLayer, Network, Trace};

use std::path::PathBuf;

use rand::Rng;
use thiserror::Error;

use crate::nn::{Float, NnError};

#[derive(Debug, Error)]
pub enum SegnetError {
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Validates `config` and builds a He-initialised network.
pub fn build_network<F: Float, R: Rng + ?Sized>(config: &NetworkConfig, rng: &mut R) -> Result<Network<F>, SegnetError> {
    Network::build(config, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::LabelCoding;
    use crate::nn::{softmax_channels, Tensor4};
    use ndarray::{Array4, Axis};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Uniform};

    fn tiny() -> NetworkConfig {
        let mut cfg = NetworkConfig::with_widths(4, 6, 5);
        cfg.aspp_branches = vec![
            BlockSpec::AsppBranch { kernel: 1, dilation: 1, filters: 5 },
            BlockSpec::AsppBranch { kernel: 3, dilation: 2, filters: 5 },
            BlockSpec::AsppPooling { filters: 3 },
        ];
        cfg
    }

    fn random_input(dims: (usize, usize, usize, usize), seed: u64) -> Tensor4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = Uniform::new(0.0, 1.0).unwrap();
        Tensor4::new(Array4::from_shape_simple_fn(dims, || u.sample(&mut rng))).unwrap()
    }

    #[test]
    fn default_parameter_count_is_frozen() {
        let net: Network<f32> = build_network(&NetworkConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        // weights + biases + (gamma, beta) per batch-normed conv:
        //   6→64 3×3: 3 456 + 64 + 128      64→64: 36 864 + 64 + 128
        //   64→128:   73 728 + 128 + 256    128→128: 147 456 + 128 + 256
        //   ASPP 1×1: 32 768 + 256 + 512    3 × dilated 3×3: 3 × (294 912 + 256 + 512)
        //   pooling 1×1: 32 768 + 256       fuse 1280→256: 327 680 + 256 + 512
        //   classifier 256→24: 6 144 + 24
        assert_eq!(net.param_count(), 1_550_872);
    }

    #[test]
    fn same_seed_gives_identical_parameters() {
        let a: Network<f32> = build_network(&tiny(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b: Network<f32> = build_network(&tiny(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let c: Network<f32> = build_network(&tiny(), &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn output_matches_input_size_including_unaligned() {
        let net: Network<f64> = build_network(&tiny(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for (h, w) in [(16, 16), (17, 14), (9, 11)] {
            let out = net.forward(&random_input((2, 6, h, w), 3)).unwrap();
            assert_eq!(out.dims(), (2, 24, h, w));
        }
        let mut net = net;
        let (_, trace) = net
            .forward_train(&random_input((2, 6, 20, 28), 3), &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        assert_eq!(trace.feature_hw(), (5, 7));
    }

    #[test]
    fn full_frame_shape_probe() {
        let net: Network<f32> =
            build_network(&NetworkConfig::with_widths(2, 2, 2), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let out = net.forward(&Tensor4::zeros((1, 6, 343, 375))).unwrap();
        assert_eq!(out.dims(), (1, 24, 343, 375));
    }

    #[test]
    fn channel_mismatch_is_reported() {
        let net: Network<f64> = build_network(&tiny(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(matches!(
            net.forward(&Tensor4::zeros((1, 5, 8, 8))),
            Err(SegnetError::Nn(NnError::ChannelMismatch { expected: 6, got: 5 }))
        ));
    }

    #[test]
    fn zero_classifier_gives_uniform_softmax() {
        let mut net: Network<f64> = build_network(&tiny(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        net.classifier.conv.weights.value.fill(0.0);
        let p = softmax_channels(&net.forward(&Tensor4::zeros((1, 6, 8, 8))).unwrap());
        assert!(p.values().iter().all(|&v| (v - 1.0 / 24.0).abs() < 1e-15));
    }

    #[test]
    fn inference_is_pure() {
        let net: Network<f64> = build_network(&tiny(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let x = random_input((1, 6, 12, 12), 9);
        assert_eq!(net.forward(&x).unwrap(), net.forward(&x).unwrap());
    }

    #[test]
    fn dilation_is_wired_through() {
        let cfg = tiny();
        let mut flat = cfg.clone();
        for b in &mut flat.aspp_branches {
            if let BlockSpec::AsppBranch { dilation, .. } = b {
                *dilation = 1;
            }
        }
        let a: Network<f64> = build_network(&cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let b: Network<f64> = build_network(&flat, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let x = random_input((1, 6, 24, 24), 4);
        let diff = (a.forward(&x).unwrap().values() - b.forward(&x).unwrap().values())
            .mapv(f64::abs)
            .sum();
        assert!(diff > 1e-6);
    }

    #[test]
    fn argmax_prefers_lowest_index_and_maps_codes() {
        let mut logits = Array4::<f64>::zeros((1, 24, 2, 3));
        logits.index_axis_mut(Axis(1), 3).fill(2.0);
        let classes = Network::argmax_classes(&Tensor4::new(logits).unwrap());
        assert!(classes.iter().all(|&k| k == 3));
        let ties = Network::argmax_classes(&Tensor4::<f64>::zeros((1, 24, 2, 2)));
        assert!(ties.iter().all(|&k| k == 0));
        assert_eq!(LabelCoding::default().chromosome_codes[3], 4);
    }

    #[test]
    fn argmax_of_softmax_equals_argmax_of_logits() {
        let logits = random_input((2, 24, 5, 7), 17);
        let a = Network::argmax_classes(&logits);
        let b = Network::argmax_classes(&softmax_channels(&logits));
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_round_trip_with_optimizer() {
        use crate::nn::{adam_step, AdamConfig, AdamState};
        let mut net: Network<f32> = build_network(&tiny(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let x = Tensor4::new(random_input((2, 6, 8, 8), 1).into_values().mapv(|v| v as f32)).unwrap();
        let (out, trace) = net.forward_train(&x, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        net.backward(trace, &out.values().mapv(|v| v * 0.1)).unwrap();
        let mut opt = AdamState::new(AdamConfig::default());
        adam_step(&mut net.params_mut(), &mut opt).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        save_checkpoint(&path, &net, Some(&opt), serde_json::json!({"epoch": 3})).unwrap();
        let ck = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(ck.metadata["epoch"], 3);
        assert_eq!(ck.optimizer.as_ref(), Some(&opt));
        // gradients are not persisted
        net.zero_grad();
        assert_eq!(ck.network, net);
        assert!(matches!(load_checkpoint::<f64>(&path), Err(SegnetError::Checkpoint(_))));
        std::fs::write(&path, b"garbage").unwrap();
        assert!(load_checkpoint::<f32>(&path).is_err());
    }
}
