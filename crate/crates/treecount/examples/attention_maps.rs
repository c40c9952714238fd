//! Run the three decoding subnets over a synthetic source/target pair and
//! report score-map statistics per decoder scale: row-stochasticity and the
//! self-vs-cross map distance that the alignment loss penalizes.

use ndgrad::no_grad;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use treecount::data::{generate_synthetic_with_sigma, DomainProfile, DomainTag};
use treecount::decoder::{model_forward, DecoderConfig, DecoderParams};
use treecount::encoder::{htfe_forward, EncoderConfig, EncoderParams, Profile};
use treecount::trainer::image_tensor;

fn main() {
    let enc_cfg = EncoderConfig::toy();
    let dec_cfg = DecoderConfig::for_profile(Profile::Toy);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let enc = EncoderParams::<f32>::init(&enc_cfg, &mut rng);
    let dec = DecoderParams::<f32>::init(&enc_cfg, &dec_cfg, &mut rng);

    let src = &generate_synthetic_with_sigma(
        &DomainProfile::source_default(),
        1,
        64,
        3,
        4.0,
        DomainTag::Source,
    )[0];
    let tgt = &generate_synthetic_with_sigma(
        &DomainProfile::target_default(),
        1,
        64,
        4,
        4.0,
        DomainTag::Target,
    )[0];

    let out = no_grad(|| {
        let pyr_s = htfe_forward(&image_tensor::<f32>(&src.image), &enc);
        let pyr_t = htfe_forward(&image_tensor::<f32>(&tgt.image), &enc);
        model_forward(&pyr_s, &pyr_t, &dec, (64, 64), false)
    })
    .unwrap();

    for scale in [2usize, 3, 4] {
        let cd = out.score_st.maps[&scale].to_array();
        let sd_t = out.score_t.maps[&scale].to_array();
        let (e, n) = (cd.shape()[0], cd.shape()[1]);
        let mut worst_row = 0.0f32;
        for h in 0..e {
            for i in 0..n {
                let s: f32 = (0..n).map(|j| cd[[h, i, j]]).sum();
                worst_row = worst_row.max((s - 1.0).abs());
            }
        }
        let mse: f32 = cd
            .iter()
            .zip(sd_t.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f32>()
            / cd.len() as f32;
        println!(
            "scale {scale}: {e} heads x {n} tokens, max |row sum - 1| = {worst_row:.2e}, cross-vs-self MSE = {mse:.4e}"
        );
    }
    println!(
        "density sums: T_s {:.3}  T_t {:.3}  T_st {:.3} (untrained model)",
        out.t_s.to_array().sum(),
        out.t_t.to_array().sum(),
        out.t_st.to_array().sum()
    );
}
