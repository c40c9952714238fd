//! Counting and localization evaluation: density-map peak extraction,
//! one-to-one greedy point matching inside a fixed search radius, MAE /
//! RMSE / R-squared over per-image counts and pooled precision / recall /
//! F1 over the matches.

use ndarray::Array2;
use ndgrad::{no_grad, Element, Tensor};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{PointSet, Sample};
use crate::decoder::{predict_density, DecoderParams};
use crate::encoder::{htfe_forward, EncoderParams};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("model error: {0}")]
    Model(#[from] crate::decoder::DecoderError),
    #[error("io error on {path}: {source}")]
    Io { path: std::path::PathBuf, source: std::io::Error },
    #[error("report serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum R2Variant {
    /// Denominator uses estimated counts' deviations from the ground-truth
    /// mean, exactly as printed in the source formulation.
    Paper,
    /// Conventional coefficient of determination.
    Standard,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EvalConfig {
    pub match_radius: f64,
    pub peak_threshold: f64,
    pub peak_min_distance: f64,
    pub r2_variant: R2Variant,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            match_radius: 15.0,
            peak_threshold: 0.25,
            peak_min_distance: 8.0,
            r2_variant: R2Variant::Standard,
        }
    }
}

/// One-to-one matching outcome. The accounting identities
/// `tp + fp = |pred|` and `tp + fn = |gt|` hold by construction.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MatchResult {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub pairs: Vec<(usize, usize)>, // (pred index, gt index)
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CountMetrics {
    pub mae: f64,
    pub rmse: f64,
    /// `None` marks an undefined metric (degenerate denominator).
    pub r2: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PerImageRow {
    pub id: String,
    pub gt_count: f64,
    pub pred_count: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

/// Full evaluation summary. Localization rates are pooled (micro-averaged)
/// over the split; both R-squared variants are recorded.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub config: EvalConfig,
    pub n_images: usize,
    pub mae: f64,
    pub rmse: f64,
    pub r2: Option<f64>,
    pub r2_standard: Option<f64>,
    pub r2_paper: Option<f64>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub localization_pooling: String,
    pub per_image: Vec<PerImageRow>,
}

/// Local maxima of a density map: a pixel survives if it is the maximum of
/// its sliding window (radius `peak_min_distance`), exceeds
/// `peak_threshold * global_max`, and is not suppressed by a stronger peak
/// within `peak_min_distance`. An all-zero map yields no peaks.
pub fn extract_peaks(density: &Array2<f32>, cfg: &EvalConfig) -> PointSet {
    let (h, w) = density.dim();
    let global_max = density.iter().cloned().fold(f32::MIN, f32::max);
    if !(global_max > 0.0) {
        return PointSet::default();
    }
    let thresh = (cfg.peak_threshold as f32) * global_max;
    let r = cfg.peak_min_distance.ceil() as isize;
    let mut candidates: Vec<(f32, usize, usize)> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let v = density[[y, x]];
            if v < thresh || v <= 0.0 {
                continue;
            }
            let mut is_max = true;
            'scan: for dy in -r..=r {
                for dx in -r..=r {
                    if dy == 0 && dx == 0 {
                        continue;
                    }
                    let (ny, nx) = (y as isize + dy, x as isize + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let nv = density[[ny as usize, nx as usize]];
                    if nv > v {
                        is_max = false;
                        break 'scan;
                    }
                    // plateau tie-break: earlier pixel in scan order wins
                    if nv == v && (ny as usize, nx as usize) < (y, x) {
                        is_max = false;
                        break 'scan;
                    }
                }
            }
            if is_max {
                candidates.push((v, y, x));
            }
        }
    }
    candidates.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let min_d2 = (cfg.peak_min_distance * cfg.peak_min_distance) as f32;
    let mut kept: Vec<(usize, usize)> = Vec::new();
    for (_, y, x) in candidates {
        let ok = kept.iter().all(|&(ky, kx)| {
            let dy = ky as f32 - y as f32;
            let dx = kx as f32 - x as f32;
            dy * dy + dx * dx >= min_d2
        });
        if ok {
            kept.push((y, x));
        }
    }
    PointSet::new(kept.into_iter().map(|(y, x)| (x as f32, y as f32)).collect())
}

/// One-to-one greedy matching: candidate pairs within the radius, sorted by
/// ascending distance (ties broken by indices), accepted when both endpoints
/// are still free.
pub fn match_points(pred: &PointSet, gt: &PointSet, radius: f64) -> MatchResult {
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for (pi, &(px, py)) in pred.points.iter().enumerate() {
        for (gi, &(gx, gy)) in gt.points.iter().enumerate() {
            let d = ((px - gx) as f64).hypot((py - gy) as f64);
            if d <= radius {
                candidates.push((d, pi, gi));
            }
        }
    }
    candidates.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap()
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut pred_used = vec![false; pred.len()];
    let mut gt_used = vec![false; gt.len()];
    let mut pairs = Vec::new();
    for (_, pi, gi) in candidates {
        if !pred_used[pi] && !gt_used[gi] {
            pred_used[pi] = true;
            gt_used[gi] = true;
            pairs.push((pi, gi));
        }
    }
    let tp = pairs.len();
    MatchResult { tp, fp: pred.len() - tp, fn_: gt.len() - tp, pairs }
}

/// MAE, RMSE and R-squared over `(estimated, ground truth)` count pairs.
pub fn count_metrics(pairs: &[(f64, f64)], cfg: &EvalConfig) -> CountMetrics {
    assert!(!pairs.is_empty(), "count_metrics needs at least one image");
    let n = pairs.len() as f64;
    let mae = pairs.iter().map(|(e, g)| (e - g).abs()).sum::<f64>() / n;
    let rmse = (pairs.iter().map(|(e, g)| (e - g) * (e - g)).sum::<f64>() / n).sqrt();
    CountMetrics { mae, rmse, r2: r_squared(pairs, cfg.r2_variant) }
}

pub fn r_squared(pairs: &[(f64, f64)], variant: R2Variant) -> Option<f64> {
    if pairs.len() < 2 {
        return None;
    }
    let n = pairs.len() as f64;
    let gt_mean = pairs.iter().map(|(_, g)| g).sum::<f64>() / n;
    let ss_res: f64 = pairs.iter().map(|(e, g)| (e - g) * (e - g)).sum();
    let denom: f64 = match variant {
        R2Variant::Standard => pairs.iter().map(|(_, g)| (g - gt_mean) * (g - gt_mean)).sum(),
        R2Variant::Paper => pairs.iter().map(|(e, _)| (e - gt_mean) * (e - gt_mean)).sum(),
    };
    if denom <= 0.0 {
        if ss_res == 0.0 && matches!(variant, R2Variant::Paper) {
            // perfect predictions on constant ground truth: 0/0
            return None;
        }
        return None;
    }
    Some(1.0 - ss_res / denom)
}

/// Precision, recall, F1 with the degenerate-denominator conventions
/// (empty predictions -> precision 0, empty ground truth -> recall 0).
pub fn localization_metrics(m: &MatchResult) -> (f64, f64, f64) {
    let p = if m.tp + m.fp == 0 {
        0.0
    } else {
        m.tp as f64 / (m.tp + m.fp) as f64
    };
    let r = if m.tp + m.fn_ == 0 {
        0.0
    } else {
        m.tp as f64 / (m.tp + m.fn_) as f64
    };
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f1)
}

/// Evaluate a model over a dataset: per-image predicted count is the density
/// integral; localization pools true/false positives over the whole split.
pub fn evaluate_model<T: Element>(
    enc: &EncoderParams<T>,
    dec: &DecoderParams<T>,
    samples: &[Sample],
    cfg: &EvalConfig,
) -> Result<MetricsReport, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let mut rows = Vec::with_capacity(samples.len());
    let mut count_pairs = Vec::with_capacity(samples.len());
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for s in samples {
        let density = no_grad(|| -> Result<Array2<f32>, EvalError> {
            let img = crate::trainer::image_tensor::<T>(&s.image);
            let pyr = htfe_forward(&img, enc);
            let (h, w) = s.size();
            let d = predict_density(&pyr, dec, (h, w))?;
            let arr = d.to_array();
            Ok(Array2::from_shape_vec(
                (h, w),
                arr.iter().map(|v| ndgrad::Element::to_f64(*v) as f32).collect(),
            )
            .unwrap())
        })?;
        report_for_image(s, &density, cfg, &mut rows, &mut count_pairs, &mut tp, &mut fp, &mut fn_);
    }
    build_report(cfg, rows, &count_pairs, tp, fp, fn_)
}

/// Evaluation path that takes precomputed density maps (oracle inputs or
/// exported predictions).
pub fn evaluate_densities(
    samples: &[Sample],
    densities: &[Array2<f32>],
    cfg: &EvalConfig,
) -> Result<MetricsReport, EvalError> {
    if samples.is_empty() || samples.len() != densities.len() {
        return Err(EvalError::EmptyDataset);
    }
    let mut rows = Vec::new();
    let mut count_pairs = Vec::new();
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (s, d) in samples.iter().zip(densities) {
        report_for_image(s, d, cfg, &mut rows, &mut count_pairs, &mut tp, &mut fp, &mut fn_);
    }
    build_report(cfg, rows, &count_pairs, tp, fp, fn_)
}

#[allow(clippy::too_many_arguments)]
fn report_for_image(
    s: &Sample,
    density: &Array2<f32>,
    cfg: &EvalConfig,
    rows: &mut Vec<PerImageRow>,
    count_pairs: &mut Vec<(f64, f64)>,
    tp: &mut usize,
    fp: &mut usize,
    fn_: &mut usize,
) {
    let pred_count = density.iter().map(|&v| v as f64).sum::<f64>();
    let gt_count = s.points.len() as f64;
    let peaks = extract_peaks(density, cfg);
    let m = match_points(&peaks, &s.points, cfg.match_radius);
    *tp += m.tp;
    *fp += m.fp;
    *fn_ += m.fn_;
    count_pairs.push((pred_count, gt_count));
    rows.push(PerImageRow {
        id: s.id.clone(),
        gt_count,
        pred_count,
        tp: m.tp,
        fp: m.fp,
        fn_: m.fn_,
    });
}

fn build_report(
    cfg: &EvalConfig,
    rows: Vec<PerImageRow>,
    count_pairs: &[(f64, f64)],
    tp: usize,
    fp: usize,
    fn_: usize,
) -> Result<MetricsReport, EvalError> {
    let counts = count_metrics(count_pairs, cfg);
    let pooled = MatchResult { tp, fp, fn_, pairs: Vec::new() };
    let (precision, recall, f1) = localization_metrics(&pooled);
    assert!(
        counts.rmse >= counts.mae - 1e-12,
        "power-mean inequality violated: rmse {} < mae {}",
        counts.rmse,
        counts.mae
    );
    Ok(MetricsReport {
        schema_version: REPORT_SCHEMA_VERSION,
        config: *cfg,
        n_images: rows.len(),
        mae: counts.mae,
        rmse: counts.rmse,
        r2: counts.r2,
        r2_standard: r_squared(count_pairs, R2Variant::Standard),
        r2_paper: r_squared(count_pairs, R2Variant::Paper),
        precision,
        recall,
        f1,
        localization_pooling: "micro".into(),
        per_image: rows,
    })
}

pub fn save_report(report: &MetricsReport, path: &std::path::Path) -> Result<(), EvalError> {
    let text = serde_json::to_string_pretty(report)?;
    std::fs::write(path, text).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Tensor alias re-exported for callers that already hold tensors.
pub fn density_to_array<T: Element>(d: &Tensor<T>) -> Array2<f32> {
    let sh = d.shape();
    Array2::from_shape_vec(
        (sh[0], sh[1]),
        d.data().iter().map(|v| ndgrad::Element::to_f64(*v) as f32).collect(),
    )
    .unwrap()
}
