//! Train briefly, then run the full evaluation suite (counting metrics plus
//! peak-based localization) over a held-out synthetic target split.

use treecount::data::{generate_synthetic_with_sigma, DomainProfile, DomainTag};
use treecount::eval::{evaluate_model, EvalConfig};
use treecount::trainer::{load_checkpoint, train_on_samples, TrainConfig};

fn main() {
    let source = generate_synthetic_with_sigma(
        &DomainProfile::source_default(),
        24,
        64,
        0,
        4.0,
        DomainTag::Source,
    );
    let target_train = generate_synthetic_with_sigma(
        &DomainProfile::target_default(),
        6,
        64,
        1,
        4.0,
        DomainTag::Target,
    );
    let target_test = generate_synthetic_with_sigma(
        &DomainProfile::target_default(),
        12,
        64,
        2,
        4.0,
        DomainTag::Target,
    );
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 4,
        k_shot: 3,
        crop_size: 64,
        checkpoint_every: 0,
        ..TrainConfig::toy(0)
    };
    let dir = tempfile::tempdir().unwrap();
    let outcome = train_on_samples(&cfg, &source, &target_train, dir.path(), None).unwrap();
    let (state, _) = load_checkpoint(&outcome.checkpoint).unwrap();
    let report = evaluate_model(
        &state.model.enc,
        &state.model.dec,
        &target_test,
        &EvalConfig::default(),
    )
    .unwrap();
    println!(
        "n={}  MAE {:.3}  RMSE {:.3}  R2 {:?}  P {:.3}  R {:.3}  F1 {:.3}",
        report.n_images,
        report.mae,
        report.rmse,
        report.r2,
        report.precision,
        report.recall,
        report.f1
    );
    for row in report.per_image.iter().take(4) {
        println!(
            "  {}: gt {:.0} pred {:.2} (tp {} fp {} fn {})",
            row.id, row.gt_count, row.pred_count, row.tp, row.fp, row.fn_
        );
    }
}
