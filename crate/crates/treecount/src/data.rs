//! Dataset handling: point annotations, Gaussian ground-truth density maps,
//! crop/flip/CutMix augmentation, a synthetic two-domain generator and the
//! on-disk dataset layout (`<root>/<split>/images/*.png` + `labels/*.csv`).

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default Gaussian kernel width (pixels) for ground-truth density maps.
pub const DEFAULT_SIGMA: f32 = 4.0;

/// Kernels are truncated at this many sigmas and renormalized to unit mass,
/// so the density always integrates to the exact point count.
pub const KERNEL_TRUNCATION_SIGMAS: f32 = 4.0;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("point ({x}, {y}) outside {w}x{h} image bounds")]
    PointOutOfBounds { x: f32, y: f32, w: usize, h: usize },
    #[error("sigma must be positive, got {0}")]
    BadSigma(f32),
    #[error("samples have mismatched sizes: {a:?} vs {b:?}")]
    SizeMismatch { a: (usize, usize), b: (usize, usize) },
    #[error("cut box {0:?} exceeds {1}x{2} image")]
    BoxOutOfBounds(CutBox, usize, usize),
    #[error("crop size {size} exceeds image {h}x{w}")]
    CropTooLarge { size: usize, h: usize, w: usize },
    #[error("missing annotation file {0}")]
    MissingAnnotation(PathBuf),
    #[error("bad annotation row {row} in {path}: {msg}")]
    ParseRow { path: PathBuf, row: usize, msg: String },
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("image error on {path}: {source}")]
    Image { path: PathBuf, source: image::ImageError },
}

/// 2-D tree locations for one image; origin top-left, `x` across columns.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PointSet {
    pub points: Vec<(f32, f32)>,
}

impl PointSet {
    pub fn new(points: Vec<(f32, f32)>) -> Self {
        PointSet { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self, h: usize, w: usize) -> Result<(), DataError> {
        for &(x, y) in &self.points {
            if !x.is_finite() || !y.is_finite() || x < 0.0 || y < 0.0 || x >= w as f32 || y >= h as f32
            {
                return Err(DataError::PointOutOfBounds { x, y, w, h });
            }
        }
        Ok(())
    }

    /// Mirror across the vertical axis of a width-`w` image.
    pub fn hflip(&self, w: usize) -> PointSet {
        PointSet::new(
            self.points
                .iter()
                .map(|&(x, y)| ((w as f32 - 1.0) - x, y))
                .collect(),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainTag {
    Source,
    Target,
}

/// One labeled image: RGB values in `[0,1]`, annotations and the generated
/// ground-truth density map.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub image: Array3<f32>, // [H, W, 3]
    pub points: PointSet,
    pub density_gt: Array2<f32>,
    pub domain: DomainTag,
}

impl Sample {
    pub fn size(&self) -> (usize, usize) {
        (self.image.shape()[0], self.image.shape()[1])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackgroundStyle {
    Flat,
    Gradient,
    Noise,
}

/// Rendering recipe for one synthetic domain. Two profiles with different
/// chroma shifts / backgrounds stand in for two acquisition domains.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DomainProfile {
    pub blob_radius_range: (f32, f32),
    pub blob_count_range: (usize, usize),
    pub background_style: BackgroundStyle,
    pub chroma_shift: [f32; 3],
    pub occlusion_prob: f32,
}

impl DomainProfile {
    /// Built-in source domain: dark flat ground, mid-size crowns, moderate
    /// density.
    pub fn source_default() -> Self {
        DomainProfile {
            blob_radius_range: (3.5, 6.0),
            blob_count_range: (6, 14),
            background_style: BackgroundStyle::Flat,
            chroma_shift: [0.0, 0.08, -0.02],
            occlusion_prob: 0.0,
        }
    }

    /// Built-in target domain: speckled bright ground, smaller shadowed
    /// crowns, denser stands. Visually shifted from the source on every axis.
    pub fn target_default() -> Self {
        DomainProfile {
            blob_radius_range: (2.5, 4.5),
            blob_count_range: (10, 22),
            background_style: BackgroundStyle::Noise,
            chroma_shift: [0.18, -0.06, 0.12],
            occlusion_prob: 0.3,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.blob_radius_range.0 <= 0.0 || self.blob_radius_range.1 < self.blob_radius_range.0 {
            return Err("empty blob radius range".into());
        }
        if self.blob_count_range.1 < self.blob_count_range.0 {
            return Err("empty blob count range".into());
        }
        if !(0.0..=1.0).contains(&self.occlusion_prob) {
            return Err("occlusion_prob outside [0,1]".into());
        }
        Ok(())
    }
}

/// Half-open cut rectangle: a point is inside iff `x0 <= x < x1 && y0 <= y < y1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CutBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl CutBox {
    pub fn contains(&self, x: f32, y: f32) -> bool {
        x >= self.x0 as f32 && x < self.x1 as f32 && y >= self.y0 as f32 && y < self.y1 as f32
    }

    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }
}

/// Ground-truth density: one truncated Gaussian kernel per point, each
/// renormalized to unit mass after boundary truncation, so the map sums to
/// the point count.
pub fn points_to_density(
    points: &PointSet,
    h: usize,
    w: usize,
    sigma: f32,
) -> Result<Array2<f32>, DataError> {
    if sigma <= 0.0 {
        return Err(DataError::BadSigma(sigma));
    }
    points.validate(h, w)?;
    let mut map = Array2::<f64>::zeros((h, w));
    let radius = (KERNEL_TRUNCATION_SIGMAS * sigma).ceil() as isize;
    let inv_two_sigma_sq = 1.0 / (2.0 * (sigma as f64) * (sigma as f64));
    for &(px, py) in &points.points {
        let (pxf, pyf) = (px as f64, py as f64);
        let x_lo = ((px.round() as isize) - radius).max(0) as usize;
        let x_hi = ((px.round() as isize) + radius).min(w as isize - 1) as usize;
        let y_lo = ((py.round() as isize) - radius).max(0) as usize;
        let y_hi = ((py.round() as isize) + radius).min(h as isize - 1) as usize;
        let mut kernel = Vec::with_capacity((y_hi - y_lo + 1) * (x_hi - x_lo + 1));
        let mut total = 0.0f64;
        for y in y_lo..=y_hi {
            for x in x_lo..=x_hi {
                let dx = x as f64 - pxf;
                let dy = y as f64 - pyf;
                let v = (-(dx * dx + dy * dy) * inv_two_sigma_sq).exp();
                kernel.push(v);
                total += v;
            }
        }
        let mut it = kernel.into_iter();
        for y in y_lo..=y_hi {
            for x in x_lo..=x_hi {
                map[[y, x]] += it.next().unwrap() / total;
            }
        }
    }
    Ok(map.mapv(|v| v as f32))
}

/// Replace the box region of `a` with `b`'s content; labels follow the
/// pixels. Density is regenerated from the merged points.
pub fn cutmix(a: &Sample, b: &Sample, cut: CutBox, sigma: f32) -> Result<Sample, DataError> {
    let (h, w) = a.size();
    if b.size() != (h, w) {
        return Err(DataError::SizeMismatch { a: (h, w), b: b.size() });
    }
    if cut.x1 > w || cut.y1 > h || cut.x0 > cut.x1 || cut.y0 > cut.y1 {
        return Err(DataError::BoxOutOfBounds(cut, h, w));
    }
    let mut image = a.image.clone();
    for y in cut.y0..cut.y1 {
        for x in cut.x0..cut.x1 {
            for c in 0..3 {
                image[[y, x, c]] = b.image[[y, x, c]];
            }
        }
    }
    let mut points: Vec<(f32, f32)> = a
        .points
        .points
        .iter()
        .filter(|&&(x, y)| !cut.contains(x, y))
        .cloned()
        .collect();
    points.extend(b.points.points.iter().filter(|&&(x, y)| cut.contains(x, y)));
    let points = PointSet::new(points);
    let density_gt = points_to_density(&points, h, w, sigma)?;
    Ok(Sample {
        id: format!("{}+{}", a.id, b.id),
        image,
        points,
        density_gt,
        domain: a.domain,
    })
}

/// CutMix box sampler: area fraction uniform in [0.1, 0.5], aspect ratio in
/// [0.5, 2], position uniform.
pub fn sample_cut_box<R: Rng>(rng: &mut R, h: usize, w: usize) -> CutBox {
    let area_frac = rng.gen_range(0.1..0.5);
    let aspect = rng.gen_range(0.5..2.0f64);
    let area = area_frac * (h * w) as f64;
    let bw = ((area * aspect).sqrt().round() as usize).clamp(1, w);
    let bh = ((area / aspect).sqrt().round() as usize).clamp(1, h);
    let x0 = rng.gen_range(0..=(w - bw));
    let y0 = rng.gen_range(0..=(h - bh));
    CutBox { x0, y0, x1: x0 + bw, y1: y0 + bh }
}

/// Deterministic random crop + horizontal flip, with the same rng state as
/// [`crop_flip_with`] seeded by `seed`.
pub fn random_crop_flip(s: &Sample, size: usize, seed: u64, sigma: f32) -> Result<Sample, DataError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    crop_flip_with(s, size, &mut rng, sigma)
}

/// Random crop to `size` x `size` plus a fair-coin horizontal flip drawn from
/// the supplied rng. Points translate/reflect with the pixels; density is
/// regenerated from the surviving points.
pub fn crop_flip_with<R: Rng>(
    s: &Sample,
    size: usize,
    rng: &mut R,
    sigma: f32,
) -> Result<Sample, DataError> {
    let (h, w) = s.size();
    if size > h || size > w {
        return Err(DataError::CropTooLarge { size, h, w });
    }
    let oy = rng.gen_range(0..=(h - size));
    let ox = rng.gen_range(0..=(w - size));
    let flip = rng.gen_bool(0.5);
    crop_flip_at(s, size, ox, oy, flip, sigma)
}

/// The deterministic core of crop + flip, exposed for tests.
pub fn crop_flip_at(
    s: &Sample,
    size: usize,
    ox: usize,
    oy: usize,
    flip: bool,
    sigma: f32,
) -> Result<Sample, DataError> {
    let (h, w) = s.size();
    if size + ox > w || size + oy > h {
        return Err(DataError::CropTooLarge { size, h, w });
    }
    let mut image = s
        .image
        .slice(ndarray::s![oy..oy + size, ox..ox + size, ..])
        .to_owned();
    let mut points: Vec<(f32, f32)> = s
        .points
        .points
        .iter()
        .filter_map(|&(x, y)| {
            let (nx, ny) = (x - ox as f32, y - oy as f32);
            (nx >= 0.0 && nx < size as f32 && ny >= 0.0 && ny < size as f32).then_some((nx, ny))
        })
        .collect();
    if flip {
        image.invert_axis(Axis(1));
        image = image.as_standard_layout().to_owned();
        for p in points.iter_mut() {
            p.0 = (size as f32 - 1.0) - p.0;
        }
    }
    let points = PointSet::new(points);
    let density_gt = points_to_density(&points, size, size, sigma)?;
    Ok(Sample {
        id: s.id.clone(),
        image,
        points,
        density_gt,
        domain: s.domain,
    })
}

/// Renders `n` labeled samples for one synthetic domain. Blob centers are
/// integer pixels and become the exact annotation set; everything is a pure
/// function of `(profile, n, size, seed)`.
pub fn generate_synthetic(
    profile: &DomainProfile,
    n: usize,
    size: usize,
    seed: u64,
) -> Vec<Sample> {
    generate_synthetic_with_sigma(profile, n, size, seed, DEFAULT_SIGMA, DomainTag::Source)
}

pub fn generate_synthetic_with_sigma(
    profile: &DomainProfile,
    n: usize,
    size: usize,
    seed: u64,
    sigma: f32,
    domain: DomainTag,
) -> Vec<Sample> {
    assert!(n > 0, "need at least one sample");
    profile.validate().expect("invalid domain profile");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let id = format!("synth_{seed}_{i:04}");
            render_sample(profile, size, &mut rng, sigma, id, domain)
        })
        .collect()
}

fn render_sample(
    profile: &DomainProfile,
    size: usize,
    rng: &mut ChaCha8Rng,
    sigma: f32,
    id: String,
    domain: DomainTag,
) -> Sample {
    let mut image = Array3::<f32>::zeros((size, size, 3));
    match profile.background_style {
        BackgroundStyle::Flat => {
            for mut px in image.rows_mut() {
                px[0] = 0.22;
                px[1] = 0.26;
                px[2] = 0.20;
            }
        }
        BackgroundStyle::Gradient => {
            for y in 0..size {
                let t = y as f32 / size as f32;
                for x in 0..size {
                    image[[y, x, 0]] = 0.15 + 0.25 * t;
                    image[[y, x, 1]] = 0.20 + 0.20 * t;
                    image[[y, x, 2]] = 0.18 + 0.10 * (1.0 - t);
                }
            }
        }
        BackgroundStyle::Noise => {
            for y in 0..size {
                for x in 0..size {
                    let n: f32 = rng.gen_range(-0.09..0.09);
                    image[[y, x, 0]] = 0.24 + n;
                    image[[y, x, 1]] = 0.25 + n * 0.7;
                    image[[y, x, 2]] = 0.22 - n * 0.5;
                }
            }
        }
    }

    let count = rng.gen_range(profile.blob_count_range.0..=profile.blob_count_range.1);
    let mut centers: Vec<(usize, usize, f32)> = Vec::with_capacity(count); // (x, y, r)
    let max_r = profile.blob_radius_range.1.ceil() as usize + 1;
    for _ in 0..count {
        let r = rng.gen_range(profile.blob_radius_range.0..=profile.blob_radius_range.1);
        let margin = max_r.min(size / 4);
        // keep blob apices separated so each annotation is a distinct mode
        let mut placed = None;
        for _ in 0..50 {
            let x = rng.gen_range(margin..size - margin);
            let y = rng.gen_range(margin..size - margin);
            let ok = centers
                .iter()
                .all(|&(cx, cy, _)| {
                    let dx = cx as f32 - x as f32;
                    let dy = cy as f32 - y as f32;
                    dx * dx + dy * dy >= 36.0
                });
            if ok {
                placed = Some((x, y));
                break;
            }
        }
        let (x, y) = placed.unwrap_or_else(|| {
            (rng.gen_range(margin..size - margin), rng.gen_range(margin..size - margin))
        });
        centers.push((x, y, r));
    }

    for &(cx, cy, r) in &centers {
        let occluded = rng.gen_bool(profile.occlusion_prob as f64);
        let jitter: f32 = rng.gen_range(-0.06..0.06);
        let crown = [0.10 + jitter, 0.45 + jitter, 0.12];
        let ri = r.ceil() as isize;
        for dy in -ri..=ri {
            for dx in -ri..=ri {
                let x = cx as isize + dx;
                let y = cy as isize + dy;
                if x < 0 || y < 0 || x >= size as isize || y >= size as isize {
                    continue;
                }
                let d2 = (dx * dx + dy * dy) as f32;
                if d2 > r * r {
                    continue;
                }
                let sigma_b = (r * 0.55).max(0.5);
                let mut alpha = (-d2 / (2.0 * sigma_b * sigma_b)).exp();
                if occluded && dx > 0 {
                    alpha *= 0.45; // hard shadow on one side of the crown
                }
                for c in 0..3 {
                    let v = image[[y as usize, x as usize, c]];
                    image[[y as usize, x as usize, c]] = v * (1.0 - alpha) + crown[c] * alpha;
                }
            }
        }
    }

    for v in image.iter_mut() {
        *v = (*v).clamp(0.0, 1.0);
    }
    for c in 0..3 {
        let shift = profile.chroma_shift[c];
        for v in image.index_axis_mut(Axis(2), c).iter_mut() {
            *v = (*v + shift).clamp(0.0, 1.0);
        }
    }

    let points = PointSet::new(
        centers
            .iter()
            .map(|&(x, y, _)| (x as f32, y as f32))
            .collect(),
    );
    let density_gt = points_to_density(&points, size, size, sigma).expect("in-bounds by construction");
    Sample { id, image, points, density_gt, domain }
}

// ---- disk layout ----

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

/// Writes `<root>/<split>/images/<id>.png` and `<root>/<split>/labels/<id>.csv`.
pub fn save_dataset(samples: &[Sample], root: &Path, split: &str) -> Result<(), DataError> {
    let img_dir = root.join(split).join("images");
    let lbl_dir = root.join(split).join("labels");
    std::fs::create_dir_all(&img_dir).map_err(io_err(&img_dir))?;
    std::fs::create_dir_all(&lbl_dir).map_err(io_err(&lbl_dir))?;
    for s in samples {
        let (h, w) = s.size();
        let mut buf = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let px = [
                    (s.image[[y, x, 0]] * 255.0).round().clamp(0.0, 255.0) as u8,
                    (s.image[[y, x, 1]] * 255.0).round().clamp(0.0, 255.0) as u8,
                    (s.image[[y, x, 2]] * 255.0).round().clamp(0.0, 255.0) as u8,
                ];
                buf.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        let img_path = img_dir.join(format!("{}.png", s.id));
        buf.save(&img_path)
            .map_err(|source| DataError::Image { path: img_path.clone(), source })?;
        let rows: Vec<String> = s
            .points
            .points
            .iter()
            .map(|&(x, y)| format!("{},{}", x.round() as i64, y.round() as i64))
            .collect();
        let lbl_path = lbl_dir.join(format!("{}.csv", s.id));
        std::fs::write(&lbl_path, rows.join("\n")).map_err(io_err(&lbl_path))?;
    }
    Ok(())
}

/// Loads a split; every image must have a label file (possibly empty).
/// Densities are generated at load time with the given sigma.
pub fn load_dataset(
    root: &Path,
    split: &str,
    sigma: f32,
    domain: DomainTag,
) -> Result<Vec<Sample>, DataError> {
    let img_dir = root.join(split).join("images");
    let lbl_dir = root.join(split).join("labels");
    let mut names: Vec<String> = std::fs::read_dir(&img_dir)
        .map_err(io_err(&img_dir))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let p = e.path();
            (p.extension().and_then(|s| s.to_str()) == Some("png"))
                .then(|| p.file_stem().unwrap().to_string_lossy().into_owned())
        })
        .collect();
    names.sort();
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        let img_path = img_dir.join(format!("{name}.png"));
        let lbl_path = lbl_dir.join(format!("{name}.csv"));
        if !lbl_path.exists() {
            return Err(DataError::MissingAnnotation(lbl_path));
        }
        let img = image::open(&img_path)
            .map_err(|source| DataError::Image { path: img_path.clone(), source })?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut arr = Array3::<f32>::zeros((h, w, 3));
        for y in 0..h {
            for x in 0..w {
                let p = img.get_pixel(x as u32, y as u32);
                for c in 0..3 {
                    arr[[y, x, c]] = p[c] as f32 / 255.0;
                }
            }
        }
        let text = std::fs::read_to_string(&lbl_path).map_err(io_err(&lbl_path))?;
        let mut points = Vec::new();
        for (row, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split(',');
            let parse = |part: Option<&str>| -> Result<f32, DataError> {
                part.ok_or_else(|| DataError::ParseRow {
                    path: lbl_path.clone(),
                    row,
                    msg: "expected `x,y`".into(),
                })?
                .trim()
                .parse::<f32>()
                .map_err(|e| DataError::ParseRow {
                    path: lbl_path.clone(),
                    row,
                    msg: e.to_string(),
                })
            };
            let x = parse(parts.next())?;
            let y = parse(parts.next())?;
            if parts.next().is_some() {
                return Err(DataError::ParseRow {
                    path: lbl_path.clone(),
                    row,
                    msg: "trailing fields".into(),
                });
            }
            points.push((x, y));
        }
        let points = PointSet::new(points);
        let density_gt = points_to_density(&points, h, w, sigma)?;
        out.push(Sample { id: name, image: arr, points, density_gt, domain });
    }
    Ok(out)
}
