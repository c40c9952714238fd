//! Timing and quality probe for the synthetic two-domain adaptation task:
//! trains the full adaptation model and a source-only baseline on one seed
//! and prints per-phase wall time plus target-test MAE for both.

use std::time::Instant;

use treecount::data::{generate_synthetic_with_sigma, DomainProfile, DomainTag};
use treecount::eval::{evaluate_model, EvalConfig};
use treecount::trainer::{train_on_samples, load_checkpoint, TrainConfig};

fn main() {
    let seeds: Vec<u64> = std::env::args()
        .nth(1)
        .map(|s| s.split(',').map(|p| p.parse().unwrap()).collect())
        .unwrap_or_else(|| vec![0]);
    let epochs: usize = std::env::args()
        .nth(2)
        .and_then(|s| s.parse().ok())
        .unwrap_or(10);
    for &seed in &seeds {
        run_seed(seed, epochs);
    }
}

fn run_seed(seed: u64, epochs: usize) {
    let size = 64usize;
    let sigma = 4.0f32;

    let t0 = Instant::now();
    let src_profile = DomainProfile::source_default();
    let tgt_profile = DomainProfile::target_default();
    let source_train =
        generate_synthetic_with_sigma(&src_profile, 200, size, seed, sigma, DomainTag::Source);
    let target_train = generate_synthetic_with_sigma(
        &tgt_profile,
        50,
        size,
        seed + 1_000_000,
        sigma,
        DomainTag::Target,
    );
    let target_test = generate_synthetic_with_sigma(
        &tgt_profile,
        50,
        size,
        seed + 1_500_000,
        sigma,
        DomainTag::Target,
    );
    println!("seed {seed}: data gen {:.1}s", t0.elapsed().as_secs_f64());

    let adapted_cfg = TrainConfig {
        epochs,
        crop_size: size,
        seed,
        checkpoint_every: 0,
        ..TrainConfig::toy(seed)
    };
    let baseline_cfg = TrainConfig {
        source_only_baseline: true,
        use_hcdfa: false,
        use_adversarial: false,
        ..adapted_cfg.clone()
    };

    let eval_cfg = EvalConfig::default();
    for (name, cfg) in [("adapted", &adapted_cfg), ("baseline", &baseline_cfg)] {
        let dir = tempfile::tempdir().unwrap();
        let t = Instant::now();
        let out = train_on_samples(cfg, &source_train, &target_train, dir.path(), None).unwrap();
        let train_s = t.elapsed().as_secs_f64();
        let (state, _) = load_checkpoint(&out.checkpoint).unwrap();
        let t = Instant::now();
        let report =
            evaluate_model(&state.model.enc, &state.model.dec, &target_test, &eval_cfg).unwrap();
        println!(
            "seed {seed} {name}: train {train_s:.1}s ({:.2}s/epoch), eval {:.1}s, target-test MAE {:.3} RMSE {:.3} F1 {:.3}",
            train_s / epochs as f64,
            t.elapsed().as_secs_f64(),
            report.mae,
            report.rmse,
            report.f1
        );
    }
}
