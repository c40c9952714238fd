//! Print the feature-pyramid shape contract of the hierarchical encoder for
//! both profiles.

use ndarray::{ArrayD, IxDyn};
use ndgrad::{no_grad, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use treecount::encoder::{htfe_forward, EncoderConfig, EncoderParams};

fn show(cfg: &EncoderConfig, name: &str, side: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let params = EncoderParams::<f32>::init(cfg, &mut rng);
    let img = Tensor::constant(ArrayD::from_elem(IxDyn(&[side, side, 3]), 0.5f32));
    let pyr = no_grad(|| htfe_forward(&img, &params));
    println!("{name} profile on {side}x{side}:");
    for scale in 1..=4 {
        let layers = pyr.layers(scale);
        println!(
            "  scale {scale}: {} layers of {:?}",
            layers.len(),
            layers[0].shape()
        );
    }
}

fn main() {
    show(&EncoderConfig::toy(), "toy", 64);
    show(&EncoderConfig::paper(), "paper", 256);
}
