//! Minimal end-to-end adaptation run on synthetic data: a few epochs on a
//! small source set plus a 3-shot target set, printing the per-epoch loss
//! trajectory. Writes checkpoint and logs under `runs/train_toy/`.

use std::path::Path;

use treecount::data::{generate_synthetic_with_sigma, DomainProfile, DomainTag};
use treecount::trainer::{train_on_samples, StepRecord, TrainConfig};

fn main() {
    let source = generate_synthetic_with_sigma(
        &DomainProfile::source_default(),
        24,
        64,
        0,
        4.0,
        DomainTag::Source,
    );
    let target = generate_synthetic_with_sigma(
        &DomainProfile::target_default(),
        6,
        64,
        1,
        4.0,
        DomainTag::Target,
    );
    let cfg = TrainConfig {
        epochs: 4,
        batch_size: 4,
        k_shot: 3,
        crop_size: 64,
        checkpoint_every: 0,
        ..TrainConfig::toy(0)
    };
    let out_dir = Path::new("runs/train_toy");
    let outcome = train_on_samples(&cfg, &source, &target, out_dir, None).expect("training");
    let text = std::fs::read_to_string(&outcome.loss_log).unwrap();
    let records: Vec<StepRecord> = text
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    for epoch in 0..cfg.epochs {
        let rs: Vec<&StepRecord> = records.iter().filter(|r| r.epoch == epoch).collect();
        let mean = |f: &dyn Fn(&StepRecord) -> f64| {
            rs.iter().map(|r| f(r)).sum::<f64>() / rs.len() as f64
        };
        println!(
            "epoch {epoch}: tdm {:.4} (count {:.3} ot {:.4} tv {:.4})  hcdfa {:.5}  adv_g {:.4}  adv_d {:.4}",
            mean(&|r| r.l_tdm_s + r.l_tdm_t + r.l_tdm_st),
            mean(&|r| r.l_count),
            mean(&|r| r.l_ot),
            mean(&|r| r.l_tv),
            mean(&|r| r.l_hcdfa),
            mean(&|r| r.l_adv_g),
            mean(&|r| r.l_adv_d),
        );
    }
    println!("checkpoint: {}", outcome.checkpoint.display());
}
