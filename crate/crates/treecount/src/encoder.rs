//! Hierarchical tree feature extraction: 4x4 patch embedding, shifted-window
//! transformer blocks and patch merging across four scales. Every block
//! output is retained because the decoder attends over all layers of a scale.

use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};
use ndgrad::init::{ones, trunc_normal, zeros};
use ndgrad::nn::linear;
use ndgrad::optim::ParamSet;
use ndgrad::{Element, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const LN_EPS: f64 = 1e-5;
const MLP_RATIO: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Paper,
    Toy,
}

/// Encoder hyperparameters. The paper profile mirrors the cited
/// shifted-window design at base width 128; the toy profile is a 4x narrower
/// clone that keeps CPU runs interactive.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub embed_dims: [usize; 4],
    pub depths: [usize; 4],
    pub window_size: usize,
    pub num_heads: [usize; 4],
    pub profile: Profile,
}

impl EncoderConfig {
    pub fn paper() -> Self {
        EncoderConfig {
            patch_size: 4,
            embed_dims: [128, 256, 512, 1024],
            depths: [2, 2, 18, 2],
            window_size: 8,
            num_heads: [4, 8, 16, 32],
            profile: Profile::Paper,
        }
    }

    pub fn toy() -> Self {
        EncoderConfig {
            patch_size: 4,
            embed_dims: [32, 64, 128, 256],
            depths: [2, 2, 2, 2],
            window_size: 4,
            num_heads: [2, 4, 4, 8],
            profile: Profile::Toy,
        }
    }

    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Paper => Self::paper(),
            Profile::Toy => Self::toy(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.depths.iter().any(|&d| d == 0) {
            return Err("every scale needs at least one block".into());
        }
        for i in 0..4 {
            if self.embed_dims[i] % self.num_heads[i] != 0 {
                return Err(format!("embed dim {i} not divisible by head count"));
            }
        }
        if self.window_size == 0 {
            return Err("window size must be positive".into());
        }
        Ok(())
    }
}

/// Multi-scale, multi-layer feature maps: `feats[i][l]` is the output of
/// block `l` at scale `i` with shape `[H/2^(i+2), W/2^(i+2), embed_dims[i]]`.
pub struct FeaturePyramid<T: Element> {
    pub feats: Vec<Vec<Tensor<T>>>,
}

impl<T: Element> FeaturePyramid<T> {
    /// Last-layer map of a scale (1-based scale index).
    pub fn last(&self, scale: usize) -> &Tensor<T> {
        self.feats[scale - 1].last().expect("scale has no layers")
    }

    pub fn layers(&self, scale: usize) -> &[Tensor<T>] {
        &self.feats[scale - 1]
    }

    pub fn num_layers(&self) -> usize {
        self.feats.iter().map(|v| v.len()).sum()
    }
}

pub struct SwtbParams<T: Element> {
    pub ln1_gamma: Tensor<T>,
    pub ln1_beta: Tensor<T>,
    pub qkv_w: Tensor<T>,
    pub qkv_b: Tensor<T>,
    pub proj_w: Tensor<T>,
    pub proj_b: Tensor<T>,
    pub rel_bias: Tensor<T>, // [(2w-1)^2, heads]
    pub ln2_gamma: Tensor<T>,
    pub ln2_beta: Tensor<T>,
    pub fc1_w: Tensor<T>,
    pub fc1_b: Tensor<T>,
    pub fc2_w: Tensor<T>,
    pub fc2_b: Tensor<T>,
    pub num_heads: usize,
    pub shifted: bool,
}

pub struct MergeParams<T: Element> {
    pub norm_gamma: Tensor<T>,
    pub norm_beta: Tensor<T>,
    pub reduce_w: Tensor<T>, // [4*C, C_next]
}

pub struct EncoderParams<T: Element> {
    pub cfg: EncoderConfig,
    pub patch_w: Tensor<T>, // [patch*patch*3, C0]
    pub patch_b: Tensor<T>,
    pub patch_ln_gamma: Tensor<T>,
    pub patch_ln_beta: Tensor<T>,
    pub stages: Vec<Vec<SwtbParams<T>>>,
    pub merges: Vec<MergeParams<T>>, // between scale i and i+1
}

impl<T: Element> EncoderParams<T> {
    pub fn init(cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        cfg.validate().expect("invalid encoder config");
        let in_dim = cfg.patch_size * cfg.patch_size * 3;
        let c0 = cfg.embed_dims[0];
        let patch_w = trunc_normal(rng, &[in_dim, c0], 0.02);
        let patch_b = zeros(&[c0]);
        let patch_ln_gamma = ones(&[c0]);
        let patch_ln_beta = zeros(&[c0]);
        let mut stages = Vec::new();
        let mut merges = Vec::new();
        for scale in 0..4 {
            let c = cfg.embed_dims[scale];
            let heads = cfg.num_heads[scale];
            let blocks = (0..cfg.depths[scale])
                .map(|l| SwtbParams {
                    ln1_gamma: ones(&[c]),
                    ln1_beta: zeros(&[c]),
                    qkv_w: trunc_normal(rng, &[c, 3 * c], 0.02),
                    qkv_b: zeros(&[3 * c]),
                    proj_w: trunc_normal(rng, &[c, c], 0.02),
                    proj_b: zeros(&[c]),
                    rel_bias: trunc_normal(
                        rng,
                        &[(2 * cfg.window_size - 1) * (2 * cfg.window_size - 1), heads],
                        0.02,
                    ),
                    ln2_gamma: ones(&[c]),
                    ln2_beta: zeros(&[c]),
                    fc1_w: trunc_normal(rng, &[c, MLP_RATIO * c], 0.02),
                    fc1_b: zeros(&[MLP_RATIO * c]),
                    fc2_w: trunc_normal(rng, &[MLP_RATIO * c, c], 0.02),
                    fc2_b: zeros(&[c]),
                    num_heads: heads,
                    shifted: l % 2 == 1,
                })
                .collect();
            stages.push(blocks);
            if scale < 3 {
                merges.push(MergeParams {
                    norm_gamma: ones(&[4 * c]),
                    norm_beta: zeros(&[4 * c]),
                    reduce_w: trunc_normal(rng, &[4 * c, cfg.embed_dims[scale + 1]], 0.02),
                });
            }
        }
        EncoderParams {
            cfg: cfg.clone(),
            patch_w,
            patch_b,
            patch_ln_gamma,
            patch_ln_beta,
            stages,
            merges,
        }
    }

    /// Register every parameter under `prefix` (checkpoint + optimizer order).
    pub fn register(&self, set: &mut ParamSet<T>, prefix: &str) {
        set.add(format!("{prefix}.patch.w"), self.patch_w.clone());
        set.add(format!("{prefix}.patch.b"), self.patch_b.clone());
        set.add(format!("{prefix}.patch.ln.g"), self.patch_ln_gamma.clone());
        set.add(format!("{prefix}.patch.ln.b"), self.patch_ln_beta.clone());
        for (s, stage) in self.stages.iter().enumerate() {
            for (l, blk) in stage.iter().enumerate() {
                let p = format!("{prefix}.s{s}.b{l}");
                set.add(format!("{p}.ln1.g"), blk.ln1_gamma.clone());
                set.add(format!("{p}.ln1.b"), blk.ln1_beta.clone());
                set.add(format!("{p}.qkv.w"), blk.qkv_w.clone());
                set.add(format!("{p}.qkv.b"), blk.qkv_b.clone());
                set.add(format!("{p}.proj.w"), blk.proj_w.clone());
                set.add(format!("{p}.proj.b"), blk.proj_b.clone());
                set.add(format!("{p}.relbias"), blk.rel_bias.clone());
                set.add(format!("{p}.ln2.g"), blk.ln2_gamma.clone());
                set.add(format!("{p}.ln2.b"), blk.ln2_beta.clone());
                set.add(format!("{p}.fc1.w"), blk.fc1_w.clone());
                set.add(format!("{p}.fc1.b"), blk.fc1_b.clone());
                set.add(format!("{p}.fc2.w"), blk.fc2_w.clone());
                set.add(format!("{p}.fc2.b"), blk.fc2_b.clone());
            }
        }
        for (s, m) in self.merges.iter().enumerate() {
            let p = format!("{prefix}.merge{s}");
            set.add(format!("{p}.ln.g"), m.norm_gamma.clone());
            set.add(format!("{p}.ln.b"), m.norm_beta.clone());
            set.add(format!("{p}.w"), m.reduce_w.clone());
        }
    }
}

/// 4x4 non-overlapping patches, linearly projected and layer-normed into a
/// `[H/4, W/4, C0]` token map. `H` and `W` must be divisible by the patch
/// size (the caller pads the image otherwise).
pub fn patch_embed<T: Element>(image: &Tensor<T>, params: &EncoderParams<T>) -> Tensor<T> {
    let shape = image.shape();
    assert_eq!(shape.len(), 3, "image must be [H, W, 3]");
    let (h, w) = (shape[0], shape[1]);
    let p = params.cfg.patch_size;
    assert!(
        h % p == 0 && w % p == 0,
        "image size {h}x{w} not divisible by patch size {p}"
    );
    let (gh, gw) = (h / p, w / p);
    // [gh, p, gw, p, 3] -> [gh, gw, p, p, 3] -> [gh*gw, p*p*3]
    let tokens = image
        .reshape(&[gh, p, gw, p, 3])
        .permute(&[0, 2, 1, 3, 4])
        .reshape(&[gh * gw, p * p * 3]);
    let projected = linear(&tokens, &params.patch_w, Some(&params.patch_b));
    let normed = projected.layer_norm(&params.patch_ln_gamma, &params.patch_ln_beta, LN_EPS);
    normed.reshape(&[gh, gw, params.cfg.embed_dims[0]])
}

/// Relative-position bias lookup indices for a `ws x ws` window, direct port
/// of the shifted-window formulation (table is `(2ws-1)^2` rows).
fn rel_position_index(ws: usize, table_ws: usize) -> Vec<usize> {
    let span = 2 * table_ws - 1;
    let n = ws * ws;
    let mut idx = Vec::with_capacity(n * n);
    for a in 0..n {
        let (ay, ax) = (a / ws, a % ws);
        for b in 0..n {
            let (by, bx) = (b / ws, b % ws);
            let dy = ay as isize - by as isize + (table_ws as isize - 1);
            let dx = ax as isize - bx as isize + (table_ws as isize - 1);
            idx.push(dy as usize * span + dx as usize);
        }
    }
    idx
}

/// Attention mask for shifted windows on a (possibly padded) grid: tokens
/// from different pre-shift regions, and padding tokens, must not attend to
/// each other. Returns `[nw, n, n]` with 0 / -1e9 entries, or `None` when no
/// masking is needed.
fn shift_mask<T: Element>(
    gh: usize,
    gw: usize,
    valid_h: usize,
    valid_w: usize,
    ws: usize,
    shift: usize,
) -> Option<ArrayD<T>> {
    if shift == 0 && valid_h == gh && valid_w == gw {
        return None;
    }
    // region ids as in the cited design; padding gets a unique id
    let seg = |coord: usize, size: usize| -> usize {
        if shift == 0 {
            0
        } else if coord < size - ws {
            0
        } else if coord < size - shift {
            1
        } else {
            2
        }
    };
    let mut ids = vec![0isize; gh * gw];
    for y in 0..gh {
        for x in 0..gw {
            ids[y * gw + x] = if y >= valid_h || x >= valid_w {
                -1
            } else {
                (seg(y, gh) * 3 + seg(x, gw)) as isize
            };
        }
    }
    // cyclic shift moves the ids with the tokens
    let shifted_id = |y: usize, x: usize| -> isize {
        let sy = (y + shift) % gh;
        let sx = (x + shift) % gw;
        ids[sy * gw + sx]
    };
    let (nh, nw_) = (gh / ws, gw / ws);
    let n = ws * ws;
    let neg = ndgrad::lit::<T>(-1e9);
    let mut mask = ArrayD::<T>::zeros(IxDyn(&[nh * nw_, n, n]));
    for wy in 0..nh {
        for wx in 0..nw_ {
            let widx = wy * nw_ + wx;
            for a in 0..n {
                let (ay, ax) = (wy * ws + a / ws, wx * ws + a % ws);
                let ida = shifted_id(ay, ax);
                for b in 0..n {
                    let (by, bx) = (wy * ws + b / ws, wx * ws + b % ws);
                    let idb = shifted_id(by, bx);
                    if ida != idb {
                        mask[[widx, a, b]] = neg;
                    }
                }
            }
        }
    }
    Some(mask)
}

/// One shifted-window transformer block: LN -> windowed MSA (+relative
/// position bias, cyclic shift on odd blocks) -> residual -> LN -> 2-layer
/// GELU MLP -> residual. Shape-preserving.
pub fn swtb_forward<T: Element>(
    x: &Tensor<T>,
    blk: &SwtbParams<T>,
    window_size: usize,
) -> Tensor<T> {
    let shape = x.shape();
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let tokens = x.reshape(&[h * w, c]);
    let normed = tokens.layer_norm(&blk.ln1_gamma, &blk.ln1_beta, LN_EPS);

    // effective window: whole grid when the grid is smaller than the window
    let ws = window_size.min(h).min(w);
    let shift = if blk.shifted && ws < h.min(w) { ws / 2 } else { 0 };

    let mut grid = normed.reshape(&[h, w, c]);
    let (gh, gw) = (h.div_ceil(ws) * ws, w.div_ceil(ws) * ws);
    if gh != h || gw != w {
        grid = grid.pad_hw(gh - h, gw - w);
    }
    if shift > 0 {
        grid = grid.roll_hw(-(shift as isize), -(shift as isize));
    }

    let (nh, nw_) = (gh / ws, gw / ws);
    let nwin = nh * nw_;
    let n = ws * ws;
    let heads = blk.num_heads;
    let hd = c / heads;
    // partition into windows: [nh, ws, nw, ws, c] -> [nwin, n, c]
    let windows = grid
        .reshape(&[nh, ws, nw_, ws, c])
        .permute(&[0, 2, 1, 3, 4])
        .reshape(&[nwin * n, c]);
    let qkv = linear(&windows, &blk.qkv_w, Some(&blk.qkv_b)); // [nwin*n, 3c]
    let qkv = qkv
        .reshape(&[nwin, n, 3, heads, hd])
        .permute(&[2, 0, 3, 1, 4]) // [3, nwin, heads, n, hd]
        .reshape(&[3, nwin * heads, n, hd]);
    let q = qkv.slice_axis(0, 0, 1).reshape(&[nwin * heads, n, hd]);
    let k = qkv.slice_axis(0, 1, 2).reshape(&[nwin * heads, n, hd]);
    let v = qkv.slice_axis(0, 2, 3).reshape(&[nwin * heads, n, hd]);

    let scale = 1.0 / (hd as f64).sqrt();
    let mut scores = q
        .bmm_nt(&k)
        .mul_scalar(scale)
        .reshape(&[nwin, heads, n, n]);
    // relative position bias, shared across windows
    let bias = blk
        .rel_bias
        .gather_rows(Rc::new(rel_position_index(ws, table_side(&blk.rel_bias))))
        .reshape(&[n, n, heads])
        .permute(&[2, 0, 1]); // [heads, n, n]
    scores = scores.add_bcast(&bias);
    if let Some(mask) = shift_mask::<T>(gh, gw, h, w, ws, shift) {
        // [nw, n, n] broadcast over heads
        let mask = mask.insert_axis(ndarray::Axis(1));
        scores = scores.add_const(&mask);
    }
    let attn = scores.softmax_last().reshape(&[nwin * heads, n, n]);
    let ctx = attn.bmm(&v); // [nwin*heads, n, hd]
    let merged = ctx
        .reshape(&[nwin, heads, n, hd])
        .permute(&[0, 2, 1, 3])
        .reshape(&[nwin * n, c]);
    let proj = linear(&merged, &blk.proj_w, Some(&blk.proj_b));
    // windows back to grid
    let mut grid_out = proj
        .reshape(&[nh, nw_, ws, ws, c])
        .permute(&[0, 2, 1, 3, 4])
        .reshape(&[gh, gw, c]);
    if shift > 0 {
        grid_out = grid_out.roll_hw(shift as isize, shift as isize);
    }
    let attn_out = grid_out.crop_hw(h, w).reshape(&[h * w, c]);

    let x1 = tokens.add(&attn_out);
    let normed2 = x1.layer_norm(&blk.ln2_gamma, &blk.ln2_beta, LN_EPS);
    let hidden = linear(&normed2, &blk.fc1_w, Some(&blk.fc1_b)).gelu();
    let mlp = linear(&hidden, &blk.fc2_w, Some(&blk.fc2_b));
    x1.add(&mlp).reshape(&[h, w, c])
}

fn table_side<T: Element>(rel_bias: &Tensor<T>) -> usize {
    let rows = rel_bias.shape()[0];
    let span = (rows as f64).sqrt() as usize;
    debug_assert_eq!(span * span, rows);
    (span + 1) / 2
}

/// Concatenate each 2x2 token neighborhood (channels x4), layer-norm and
/// linearly project to the next scale's width. Odd grids are zero-padded.
pub fn patch_merge<T: Element>(x: &Tensor<T>, merge: &MergeParams<T>) -> Tensor<T> {
    let shape = x.shape();
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let mut grid = x.clone();
    let (ph, pw) = (h + h % 2, w + w % 2);
    if ph != h || pw != w {
        grid = grid.pad_hw(ph - h, pw - w);
    }
    let (oh, ow) = (ph / 2, pw / 2);
    let grouped = grid
        .reshape(&[oh, 2, ow, 2, c])
        .permute(&[0, 2, 1, 3, 4])
        .reshape(&[oh * ow, 4 * c]);
    let normed = grouped.layer_norm(&merge.norm_gamma, &merge.norm_beta, LN_EPS);
    let reduced = normed.matmul(&merge.reduce_w);
    let c_next = merge.reduce_w.shape()[1];
    reduced.reshape(&[oh, ow, c_next])
}

/// Full encoder pass: returns every block output at every scale.
pub fn htfe_forward<T: Element>(image: &Tensor<T>, params: &EncoderParams<T>) -> FeaturePyramid<T> {
    let mut feats = Vec::with_capacity(4);
    let mut x = patch_embed(image, params);
    for scale in 0..4 {
        let mut layer_outputs = Vec::with_capacity(params.stages[scale].len());
        for blk in &params.stages[scale] {
            x = swtb_forward(&x, blk, params.cfg.window_size);
            layer_outputs.push(x.clone());
        }
        feats.push(layer_outputs);
        if scale < 3 {
            x = patch_merge(&x, &params.merges[scale]);
        }
    }
    FeaturePyramid { feats }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndgrad::no_grad;
    use rand::SeedableRng;

    fn image<T: Element>(h: usize, w: usize, seed: u64) -> Tensor<T> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = ArrayD::<T>::zeros(IxDyn(&[h, w, 3]));
        for v in a.iter_mut() {
            *v = ndgrad::lit::<T>(rng.gen_range(0.0..1.0));
        }
        Tensor::constant(a)
    }

    #[test]
    fn paper_profile_shape_contract() {
        let cfg = EncoderConfig::paper();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = EncoderParams::<f32>::init(&cfg, &mut rng);
        let img = image::<f32>(256, 256, 1);
        let pyr = no_grad(|| htfe_forward(&img, &params));
        let expect = [(64, 128), (32, 256), (16, 512), (8, 1024)];
        for (i, &(side, c)) in expect.iter().enumerate() {
            for layer in pyr.layers(i + 1) {
                assert_eq!(layer.shape(), vec![side, side, c]);
            }
            assert_eq!(pyr.layers(i + 1).len(), cfg.depths[i]);
        }
    }

    #[test]
    fn toy_profile_shape_and_layer_count() {
        let cfg = EncoderConfig::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = EncoderParams::<f32>::init(&cfg, &mut rng);
        let img = image::<f32>(64, 64, 2);
        let pyr = no_grad(|| htfe_forward(&img, &params));
        assert_eq!(pyr.last(1).shape(), vec![16, 16, 32]);
        assert_eq!(pyr.last(4).shape(), vec![2, 2, 256]);
        assert_eq!(pyr.num_layers(), 8);
    }

    #[test]
    fn patch_embed_zero_image_zero_tokens() {
        let cfg = EncoderConfig::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = EncoderParams::<f32>::init(&cfg, &mut rng);
        let img = Tensor::constant(ArrayD::zeros(IxDyn(&[64, 64, 3])));
        let tokens = no_grad(|| patch_embed(&img, &params));
        assert_eq!(tokens.shape(), vec![16, 16, 32]);
        // zero input, zero bias, beta = 0 -> all-zero tokens
        assert!(tokens.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn patch_embed_paper_dimension() {
        let cfg = EncoderConfig::paper();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = EncoderParams::<f32>::init(&cfg, &mut rng);
        let tokens = no_grad(|| patch_embed(&image::<f32>(256, 256, 3), &params));
        assert_eq!(tokens.shape(), vec![64, 64, 128]);
    }

    #[test]
    fn swtb_preserves_shape_on_awkward_grids() {
        let cfg = EncoderConfig::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = EncoderParams::<f32>::init(&cfg, &mut rng);
        for &(h, w) in &[(16usize, 16usize), (6, 10), (3, 3), (2, 2)] {
            let mut a = ArrayD::<f32>::zeros(IxDyn(&[h, w, 32]));
            for (i, v) in a.iter_mut().enumerate() {
                *v = (i % 17) as f32 * 0.1 - 0.5;
            }
            let x = Tensor::constant(a);
            for blk in &params.stages[0] {
                let y = no_grad(|| swtb_forward(&x, blk, cfg.window_size));
                assert_eq!(y.shape(), vec![h, w, 32]);
                assert!(y.data().iter().all(|v| v.is_finite()));
            }
        }
    }

    /// Straight-line global-attention transformer block in plain ndarray,
    /// kept independent of the windowed implementation path.
    fn reference_global_block(x: &ArrayD<f64>, blk: &SwtbParams<f64>, ws: usize) -> ArrayD<f64> {
        use ndarray::{Array1, Array2};
        let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let n = h * w;
        let heads = blk.num_heads;
        let hd = c / heads;
        let to2 = |t: &Tensor<f64>| -> Array2<f64> {
            let d = t.to_array();
            let sh = (d.shape()[0], d.shape()[1]);
            Array2::from_shape_vec(sh, d.iter().cloned().collect()).unwrap()
        };
        let to1 = |t: &Tensor<f64>| -> Array1<f64> { t.to_array().iter().cloned().collect() };
        let ln = |m: &Array2<f64>, g: &Array1<f64>, b: &Array1<f64>| -> Array2<f64> {
            let mut out = m.clone();
            for mut row in out.rows_mut() {
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
                let inv = 1.0 / (var + LN_EPS).sqrt();
                for (i, v) in row.iter_mut().enumerate() {
                    *v = (*v - mean) * inv * g[i] + b[i];
                }
            }
            out
        };
        let tokens = Array2::from_shape_vec((n, c), x.iter().cloned().collect()).unwrap();
        let n1 = ln(&tokens, &to1(&blk.ln1_gamma), &to1(&blk.ln1_beta));
        let qkv = n1.dot(&to2(&blk.qkv_w)) + &to1(&blk.qkv_b);
        let bias_tab = to2(&blk.rel_bias);
        let rel = rel_position_index(ws, table_side(&blk.rel_bias));
        let mut ctx = Array2::<f64>::zeros((n, c));
        for head in 0..heads {
            let mut scores = Array2::<f64>::zeros((n, n));
            for i in 0..n {
                for j in 0..n {
                    let mut s = 0.0;
                    for d in 0..hd {
                        s += qkv[[i, head * hd + d]] * qkv[[j, c + head * hd + d]];
                    }
                    scores[[i, j]] =
                        s / (hd as f64).sqrt() + bias_tab[[rel[i * n + j], head]];
                }
            }
            for i in 0..n {
                let mx = scores.row(i).iter().cloned().fold(f64::MIN, f64::max);
                let mut denom = 0.0;
                for j in 0..n {
                    scores[[i, j]] = (scores[[i, j]] - mx).exp();
                    denom += scores[[i, j]];
                }
                let mut rowsum = 0.0;
                for j in 0..n {
                    scores[[i, j]] /= denom;
                    rowsum += scores[[i, j]];
                }
                assert!((rowsum - 1.0).abs() < 1e-5, "attention row not stochastic");
                for d in 0..hd {
                    let mut acc = 0.0;
                    for j in 0..n {
                        acc += scores[[i, j]] * qkv[[j, 2 * c + head * hd + d]];
                    }
                    ctx[[i, head * hd + d]] = acc;
                }
            }
        }
        let attn = ctx.dot(&to2(&blk.proj_w)) + &to1(&blk.proj_b);
        let x1 = &tokens + &attn;
        let n2 = ln(&x1, &to1(&blk.ln2_gamma), &to1(&blk.ln2_beta));
        let h1 = n2.dot(&to2(&blk.fc1_w)) + &to1(&blk.fc1_b);
        let h1 = h1.mapv(|v| {
            let k = 0.797_884_560_802_865_4;
            0.5 * v * (1.0 + (k * (v + 0.044715 * v.powi(3))).tanh())
        });
        let mlp = h1.dot(&to2(&blk.fc2_w)) + &to1(&blk.fc2_b);
        let out = &x1 + &mlp;
        ArrayD::from_shape_vec(IxDyn(&[h, w, c]), out.iter().cloned().collect()).unwrap()
    }

    #[test]
    fn whole_grid_window_equals_global_attention_reference() {
        let cfg = EncoderConfig::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = EncoderParams::<f64>::init(&cfg, &mut rng);
        let blk = &params.stages[0][0]; // shift 0
        use rand::Rng;
        let mut a = ArrayD::<f64>::zeros(IxDyn(&[4, 4, 32]));
        for v in a.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let x = Tensor::constant(a.clone());
        let windowed = no_grad(|| swtb_forward(&x, blk, 4)); // one whole-grid window
        let reference = reference_global_block(&a, blk, 4);
        for (a, b) in windowed.data().iter().zip(reference.iter()) {
            assert!((a - b).abs() < 1e-8, "windowed {a} vs reference {b}");
        }
    }

    #[test]
    fn patch_merge_shapes_and_constant_field() {
        let cfg = EncoderConfig::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = EncoderParams::<f32>::init(&cfg, &mut rng);
        let x = Tensor::constant(ArrayD::from_elem(IxDyn(&[16, 16, 32]), 0.7f32));
        let merged = no_grad(|| patch_merge(&x, &params.merges[0]));
        assert_eq!(merged.shape(), vec![8, 8, 64]);
        // constant input field -> constant output field
        let d = merged.data();
        let first: Vec<f32> = d.slice(ndarray::s![0, 0, ..].as_ref()).iter().cloned().collect();
        for y in 0..8 {
            for x in 0..8 {
                for c in 0..64 {
                    assert!((d[[y, x, c]] - first[c]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn randomized_multiple_of_32_shape_contract() {
        let cfg = EncoderConfig::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = EncoderParams::<f32>::init(&cfg, &mut rng);
        let mut sizes = ChaCha8Rng::seed_from_u64(1);
        use rand::Rng;
        let mut picks: Vec<usize> = (0..3).map(|_| 32 * sizes.gen_range(1..=3)).collect();
        picks.push(96);
        for s in picks {
            let pyr = no_grad(|| htfe_forward(&image::<f32>(s, s, s as u64), &params));
            for i in 1..=4 {
                let side = s / (1 << (i + 1));
                assert_eq!(
                    pyr.last(i).shape(),
                    vec![side, side, cfg.embed_dims[i - 1]],
                    "size {s} scale {i}"
                );
            }
        }
    }

    #[test]
    fn identical_images_identical_pyramids() {
        let cfg = EncoderConfig::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let params = EncoderParams::<f32>::init(&cfg, &mut rng);
        let img = image::<f32>(64, 64, 22);
        let a = no_grad(|| htfe_forward(&img, &params));
        let b = no_grad(|| htfe_forward(&img, &params));
        for scale in 1..=4 {
            for (x, y) in a.layers(scale).iter().zip(b.layers(scale)) {
                let xb: Vec<u32> = x.data().iter().map(|v| v.to_bits()).collect();
                let yb: Vec<u32> = y.data().iter().map(|v| v.to_bits()).collect();
                assert_eq!(xb, yb);
            }
        }
        // source and target images pass through the same parameter storage
        let qkv = &params.stages[0][0].qkv_w;
        assert!(qkv.same_storage(&params.stages[0][0].qkv_w.clone()));
    }

    #[test]
    fn encoder_gradient_matches_finite_differences() {
        let cfg = EncoderConfig::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = EncoderParams::<f64>::init(&cfg, &mut rng);
        let img = image::<f64>(64, 64, 7);
        let readout = |p: &EncoderParams<f64>| -> Tensor<f64> {
            let pyr = htfe_forward(&img, p);
            let mut acc = pyr.last(4).sum_all();
            acc = acc.add(&pyr.last(1).square().sum_all());
            acc
        };
        let loss = readout(&params);
        loss.backward();
        // probe a few scalar coordinates across distinct parameter kinds
        let probes: Vec<(&Tensor<f64>, usize)> = vec![
            (&params.patch_w, 3),
            (&params.stages[0][0].qkv_w, 17),
            (&params.stages[1][1].fc1_w, 5),
            (&params.stages[3][0].proj_w, 11),
            (&params.merges[0].reduce_w, 2),
            (&params.stages[0][1].rel_bias, 1),
        ];
        for (tensor, idx) in probes {
            let analytic = tensor.grad().expect("missing grad").as_slice().unwrap()[idx];
            let h = 1e-5;
            let orig = tensor.data().as_slice().unwrap()[idx];
            tensor.data_mut().as_slice_mut().unwrap()[idx] = orig + h;
            let fp = readout(&params).value();
            tensor.data_mut().as_slice_mut().unwrap()[idx] = orig - h;
            let fm = readout(&params).value();
            tensor.data_mut().as_slice_mut().unwrap()[idx] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let denom = fd.abs().max(analytic.abs()).max(1e-6);
            assert!(
                (fd - analytic).abs() / denom < 1e-3,
                "fd {fd:.6e} vs analytic {analytic:.6e}"
            );
        }
    }
}
