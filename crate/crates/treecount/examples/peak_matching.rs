//! Peak extraction and one-to-one matching on known density maps: build a
//! ground-truth density, perturb it, and walk through the localization
//! pipeline.

use treecount::data::{points_to_density, PointSet};
use treecount::eval::{extract_peaks, localization_metrics, match_points, EvalConfig};

fn main() {
    let gt_points = PointSet::new(vec![
        (12.0, 12.0),
        (40.0, 14.0),
        (22.0, 44.0),
        (50.0, 50.0),
    ]);
    let density = points_to_density(&gt_points, 64, 64, 4.0).unwrap();
    let cfg = EvalConfig::default();

    let peaks = extract_peaks(&density, &cfg);
    println!("ground-truth density: {} points -> {} peaks", gt_points.len(), peaks.len());
    for &(x, y) in &peaks.points {
        println!("  peak at ({x}, {y})");
    }

    // a prediction that misses one tree and hallucinates another
    let pred_points = PointSet::new(vec![(13.0, 11.0), (41.0, 15.0), (30.0, 30.0)]);
    let m = match_points(&pred_points, &gt_points, cfg.match_radius);
    let (p, r, f1) = localization_metrics(&m);
    println!(
        "prediction vs ground truth: tp {} fp {} fn {} -> precision {:.2} recall {:.2} f1 {:.2}",
        m.tp, m.fp, m.fn_, p, r, f1
    );
    for (pi, gi) in &m.pairs {
        println!(
            "  matched pred {:?} to gt {:?}",
            pred_points.points[*pi], gt_points.points[*gi]
        );
    }
}
