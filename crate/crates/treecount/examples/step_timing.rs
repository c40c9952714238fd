//! Wall-time breakdown of one training pair: encoder forwards, subnet
//! forwards, loss construction and the backward sweep.

use std::time::Instant;

use treecount::data::{generate_synthetic_with_sigma, DomainProfile, DomainTag};
use treecount::decoder::model_forward;
use treecount::encoder::htfe_forward;
use treecount::losses::{tdm_loss, LossBatch};
use treecount::trainer::{density_tensor, image_tensor, Model, TrainConfig};

fn main() {
    let cfg = TrainConfig { crop_size: 64, ..TrainConfig::toy(0) };
    let mut rng = rand::SeedableRng::seed_from_u64(0);
    let model = Model::init(&cfg, &mut rng);
    let src = &generate_synthetic_with_sigma(
        &DomainProfile::source_default(),
        1,
        64,
        1,
        4.0,
        DomainTag::Source,
    )[0];
    let tgt = &generate_synthetic_with_sigma(
        &DomainProfile::target_default(),
        1,
        64,
        2,
        4.0,
        DomainTag::Target,
    )[0];
    let reps = 8;

    let t = Instant::now();
    for _ in 0..reps {
        let pyr = htfe_forward(&image_tensor::<f32>(&src.image), &model.enc);
        std::hint::black_box(pyr.num_layers());
    }
    println!("encoder fwd (graph on): {:.1} ms", t.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    let img_s = image_tensor::<f32>(&src.image);
    let img_t = image_tensor::<f32>(&tgt.image);
    let t = Instant::now();
    for _ in 0..reps {
        let pyr_s = htfe_forward(&img_s, &model.enc);
        let pyr_t = htfe_forward(&img_t, &model.enc);
        let out = model_forward(&pyr_s, &pyr_t, &model.dec, (64, 64), true).unwrap();
        std::hint::black_box(out.t_st.len());
    }
    println!(
        "2x encoder + 3 subnets fwd: {:.1} ms",
        t.elapsed().as_secs_f64() * 1000.0 / reps as f64
    );

    let t = Instant::now();
    for _ in 0..reps {
        let pyr_s = htfe_forward(&img_s, &model.enc);
        let pyr_t = htfe_forward(&img_t, &model.enc);
        let out = model_forward(&pyr_s, &pyr_t, &model.dec, (64, 64), true).unwrap();
        let lb = LossBatch::new(
            out.t_s,
            density_tensor(&src.density_gt),
            out.t_t,
            out.t_st,
            density_tensor(&tgt.density_gt),
        );
        let (loss, _) = tdm_loss(&lb, &cfg.tdm, &cfg.ot).unwrap();
        loss.backward();
        model.gen_set.zero_grads();
    }
    println!(
        "pair fwd + tdm + backward: {:.1} ms",
        t.elapsed().as_secs_f64() * 1000.0 / reps as f64
    );
}
