//! Shared fixtures for the criterion benchmarks.

use crfscale_core::chain_crf::ChainPotentials;
use crfscale_core::data::{synth_segmentation, SegmentationInstance, SynthSegParams};
use crfscale_core::neural::{init_params, Activation, Mlp, MlpSpec};
use crfscale_core::numerics::{seeded_rng, RngDomain, Tensor};
use rand::Rng;

pub use rand;

/// OCR-shaped chain: word-length sequence over the full letter alphabet.
pub fn chain_fixture(len: usize, labels: usize) -> ChainPotentials {
    let mut rng = seeded_rng(17, RngDomain::Probe);
    let unary: Vec<f64> = (0..len * labels).map(|_| rng.random_range(-2.0..2.0)).collect();
    let pairwise: Vec<f64> = (0..labels * labels).map(|_| rng.random_range(-2.0..2.0)).collect();
    ChainPotentials::new(
        Tensor::matrix(len, labels, unary).unwrap(),
        Tensor::matrix(labels, labels, pairwise).unwrap(),
    )
    .unwrap()
}

/// One working-size segmentation instance plus a coupling network.
pub fn gcrf_fixture() -> (SegmentationInstance, Mlp, Mlp) {
    let data = synth_segmentation(&SynthSegParams {
        seed: 3,
        count: 1,
        height: 16,
        width: 16,
        feature_dim: 4,
        snr: 1.0,
    })
    .unwrap();
    let unary = init_params(
        &MlpSpec {
            input_dim: 4,
            hidden_dims: vec![16],
            output_dim: 2,
            hidden_activation: Activation::Relu,
            final_activation: Activation::Identity,
            final_bias: true,
        },
        0,
    )
    .unwrap();
    let mut embed = init_params(
        &MlpSpec {
            input_dim: 4,
            hidden_dims: vec![16],
            output_dim: 4,
            hidden_activation: Activation::Relu,
            final_activation: Activation::Identity,
            final_bias: true,
        },
        1,
    )
    .unwrap();
    // Keep the coupling's spectral radius below the diagonal term the
    // benchmark uses, as a trained embedding network would.
    embed.scale_final_layer(0.5);
    (data.instances.into_iter().next().unwrap(), unary, embed)
}
