//! Attention-to-adapt decoding: domain attention blocks (DAB) applied
//! hierarchically at 1/32 -> 1/16 -> 1/8 with bilinear upsampling in between,
//! followed by the density estimation block (DEB) at 1/4 resolution.
//!
//! The same block computes self-domain attention (queries and keys from one
//! pyramid) and cross-domain attention (queries from the target pyramid, keys
//! from the source pyramid); the three subnets share one parameter bank by
//! default so that identical source/target inputs collapse to identical
//! outputs.

use std::collections::BTreeMap;
use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};
use ndgrad::init::{kaiming_normal, ones, trunc_normal, zeros};
use ndgrad::nn::{batch_norm2d, linear};
use ndgrad::optim::{BufferRef, ParamSet};
use ndgrad::{lit, Element, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{EncoderConfig, FeaturePyramid, Profile};

const BN_MOMENTUM: f64 = 0.1;
const BN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum DecoderError {
    #[error("query and key stacks have different layer counts: {0} vs {1}")]
    LayerCountMismatch(usize, usize),
    #[error("feature map shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("self mode requires query and key pyramids from the same domain")]
    ModeMismatch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositionalEncoding {
    Sinusoidal,
    None,
}

/// Decoder hyperparameters. `dab_scales` lists the decoder scales (encoder
/// scale indices in 2..=4) where a DAB runs; a disabled scale falls back to a
/// linear channel reduction (ablation harness only).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub num_heads: usize,
    pub score_hidden: usize,
    pub dab_scales: Vec<usize>,
    pub positional_encoding: PositionalEncoding,
    pub bidirectional_cross: bool,
    pub shared_subnets: bool,
}

impl DecoderConfig {
    pub fn for_profile(profile: Profile) -> Self {
        DecoderConfig {
            num_heads: match profile {
                Profile::Paper => 8,
                Profile::Toy => 2,
            },
            score_hidden: match profile {
                Profile::Paper => 16,
                Profile::Toy => 8,
            },
            dab_scales: vec![4, 3, 2],
            positional_encoding: PositionalEncoding::Sinusoidal,
            bidirectional_cross: false,
            shared_subnets: true,
        }
    }

    pub fn validate(&self, enc: &EncoderConfig) -> Result<(), String> {
        if self.num_heads == 0 {
            return Err("num_heads must be >= 1".into());
        }
        if self.dab_scales.is_empty() {
            return Err("at least one DAB scale required".into());
        }
        for &s in &self.dab_scales {
            if !(2..=4).contains(&s) {
                return Err(format!("DAB scale {s} outside 2..=4"));
            }
            if enc.embed_dims[s - 1] % self.num_heads != 0 {
                return Err(format!("scale {s} channels not divisible by heads"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionMode {
    SelfDomain,
    CrossDomain,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SubnetRole {
    Source,
    Target,
    SourceTarget,
}

/// Post-softmax attention score maps per decoder scale, `[heads, hw, hw]`,
/// layer-averaged; every row sums to 1.
pub struct ScoreMapSet<T: Element> {
    pub maps: BTreeMap<usize, Tensor<T>>,
}

impl<T: Element> ScoreMapSet<T> {
    pub fn scales(&self) -> Vec<usize> {
        self.maps.keys().cloned().collect()
    }
}

/// Output of one domain attention block.
pub struct AttentionOutput<T: Element> {
    pub a_attn: Tensor<T>,
    pub score_map: Tensor<T>, // [heads, hw, hw]
}

pub struct BnParams<T: Element> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: BufferRef<T>,
    pub running_var: BufferRef<T>,
}

impl<T: Element> BnParams<T> {
    fn init(c: usize) -> Self {
        BnParams {
            gamma: ones(&[c]),
            beta: zeros(&[c]),
            running_mean: Rc::new(std::cell::RefCell::new(ArrayD::zeros(IxDyn(&[c])))),
            running_var: Rc::new(std::cell::RefCell::new(ArrayD::from_elem(
                IxDyn(&[c]),
                T::one(),
            ))),
        }
    }

    fn forward(&self, x: &Tensor<T>, training: bool) -> Tensor<T> {
        let mut rm = self.running_mean.borrow_mut();
        let mut rv = self.running_var.borrow_mut();
        batch_norm2d(
            x, &self.gamma, &self.beta, &mut rm, &mut rv, training, BN_MOMENTUM, BN_EPS,
        )
    }

    fn register(&self, set: &mut ParamSet<T>, prefix: &str) {
        set.add(format!("{prefix}.g"), self.gamma.clone());
        set.add(format!("{prefix}.b"), self.beta.clone());
        set.add_buffer(format!("{prefix}.rmean"), self.running_mean.clone());
        set.add_buffer(format!("{prefix}.rvar"), self.running_var.clone());
    }
}

pub struct ConvBn<T: Element> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
    pub bn: BnParams<T>,
}

impl<T: Element> ConvBn<T> {
    fn init(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize, k: usize) -> Self {
        ConvBn {
            w: kaiming_normal(rng, &[c_out, c_in, k, k], c_in * k * k),
            b: zeros(&[c_out]),
            bn: BnParams::init(c_out),
        }
    }

    fn forward(&self, x: &Tensor<T>, training: bool) -> Tensor<T> {
        let y = x.conv2d(&self.w, Some(&self.b), 1, (self.w.shape()[2] - 1) / 2);
        self.bn.forward(&y, training).relu()
    }

    fn register(&self, set: &mut ParamSet<T>, prefix: &str) {
        set.add(format!("{prefix}.w"), self.w.clone());
        set.add(format!("{prefix}.b"), self.b.clone());
        self.bn.register(set, &format!("{prefix}.bn"));
    }
}

/// One domain attention block at a fixed decoder scale.
pub struct DabParams<T: Element> {
    pub q_projs: Vec<(Tensor<T>, Tensor<T>)>, // one projection per encoder layer
    pub k_projs: Vec<(Tensor<T>, Tensor<T>)>,
    pub v_proj: (Tensor<T>, Tensor<T>),
    pub score_convs: [ConvBn<T>; 3], // layer-channel stack reduced to 1
    pub out_conv: ConvBn<T>,         // head-averaged context -> c_out
    pub channels: usize,
    pub out_channels: usize,
}

impl<T: Element> DabParams<T> {
    pub fn init(
        rng: &mut ChaCha8Rng,
        channels: usize,
        out_channels: usize,
        layers: usize,
        cfg: &DecoderConfig,
    ) -> Self {
        let c = channels;
        let g = cfg.score_hidden;
        let proj = |rng: &mut ChaCha8Rng| {
            (trunc_normal::<T, _>(rng, &[c, c], 0.02), zeros(&[c]))
        };
        DabParams {
            q_projs: (0..layers).map(|_| proj(rng)).collect(),
            k_projs: (0..layers).map(|_| proj(rng)).collect(),
            v_proj: proj(rng),
            score_convs: [
                ConvBn::init(rng, layers, g, 3),
                ConvBn::init(rng, g, g, 3),
                ConvBn::init(rng, g, 1, 3),
            ],
            out_conv: ConvBn::init(rng, c / cfg.num_heads, out_channels, 3),
            channels,
            out_channels,
        }
    }

    fn register(&self, set: &mut ParamSet<T>, prefix: &str) {
        for (i, (w, b)) in self.q_projs.iter().enumerate() {
            set.add(format!("{prefix}.q{i}.w"), w.clone());
            set.add(format!("{prefix}.q{i}.b"), b.clone());
        }
        for (i, (w, b)) in self.k_projs.iter().enumerate() {
            set.add(format!("{prefix}.k{i}.w"), w.clone());
            set.add(format!("{prefix}.k{i}.b"), b.clone());
        }
        set.add(format!("{prefix}.v.w"), self.v_proj.0.clone());
        set.add(format!("{prefix}.v.b"), self.v_proj.1.clone());
        for (i, cb) in self.score_convs.iter().enumerate() {
            cb.register(set, &format!("{prefix}.score{i}"));
        }
        self.out_conv.register(set, &format!("{prefix}.out"));
    }
}

/// Density estimation block: skip-concat then three conv+ReLU down to one
/// channel. No normalization layers here.
pub struct DebParams<T: Element> {
    pub convs: [(Tensor<T>, Tensor<T>); 3],
}

impl<T: Element> DebParams<T> {
    pub fn init(rng: &mut ChaCha8Rng, c1: usize) -> Self {
        let mid = (c1 / 2).max(1);
        let mk = |rng: &mut ChaCha8Rng, ci: usize, co: usize| {
            (
                kaiming_normal::<T, _>(rng, &[co, ci, 3, 3], ci * 9),
                zeros(&[co]),
            )
        };
        DebParams {
            convs: [mk(rng, 3 * c1, c1), mk(rng, c1, mid), mk(rng, mid, 1)],
        }
    }

    fn register(&self, set: &mut ParamSet<T>, prefix: &str) {
        for (i, (w, b)) in self.convs.iter().enumerate() {
            set.add(format!("{prefix}.c{i}.w"), w.clone());
            set.add(format!("{prefix}.c{i}.b"), b.clone());
        }
    }
}

pub enum ScaleStage<T: Element> {
    Dab(DabParams<T>),
    /// Linear channel reduction standing in for an ablated DAB.
    Reduce(Tensor<T>, Tensor<T>),
}

/// One decoding subnet: stages at scales 4 -> 3 -> 2, then the DEB.
pub struct SubnetParams<T: Element> {
    pub stages: Vec<(usize, ScaleStage<T>)>,
    pub deb: DebParams<T>,
}

impl<T: Element> SubnetParams<T> {
    fn init(rng: &mut ChaCha8Rng, enc: &EncoderConfig, cfg: &DecoderConfig) -> Self {
        let dims = enc.embed_dims;
        let mut stages = Vec::new();
        for scale in [4usize, 3, 2] {
            let c_in = dims[scale - 1];
            let c_out = dims[scale - 2];
            let stage = if cfg.dab_scales.contains(&scale) {
                ScaleStage::Dab(DabParams::init(rng, c_in, c_out, enc.depths[scale - 1], cfg))
            } else {
                ScaleStage::Reduce(trunc_normal(rng, &[c_in, c_out], 0.02), zeros(&[c_out]))
            };
            stages.push((scale, stage));
        }
        SubnetParams {
            stages,
            deb: DebParams::init(rng, dims[0]),
        }
    }

    fn register(&self, set: &mut ParamSet<T>, prefix: &str) {
        for (scale, stage) in &self.stages {
            match stage {
                ScaleStage::Dab(dab) => dab.register(set, &format!("{prefix}.dab{scale}")),
                ScaleStage::Reduce(w, b) => {
                    set.add(format!("{prefix}.reduce{scale}.w"), w.clone());
                    set.add(format!("{prefix}.reduce{scale}.b"), b.clone());
                }
            }
        }
        self.deb.register(set, &format!("{prefix}.deb"));
    }
}

enum SubnetBank<T: Element> {
    Shared(SubnetParams<T>),
    Separate {
        source: SubnetParams<T>,
        target: SubnetParams<T>,
        cross: SubnetParams<T>,
    },
}

pub struct DecoderParams<T: Element> {
    pub cfg: DecoderConfig,
    bank: SubnetBank<T>,
}

impl<T: Element> DecoderParams<T> {
    pub fn init(enc: &EncoderConfig, cfg: &DecoderConfig, rng: &mut ChaCha8Rng) -> Self {
        cfg.validate(enc).expect("invalid decoder config");
        let bank = if cfg.shared_subnets {
            SubnetBank::Shared(SubnetParams::init(rng, enc, cfg))
        } else {
            SubnetBank::Separate {
                source: SubnetParams::init(rng, enc, cfg),
                target: SubnetParams::init(rng, enc, cfg),
                cross: SubnetParams::init(rng, enc, cfg),
            }
        };
        DecoderParams { cfg: cfg.clone(), bank }
    }

    pub fn subnet(&self, role: SubnetRole) -> &SubnetParams<T> {
        match &self.bank {
            SubnetBank::Shared(s) => s,
            SubnetBank::Separate { source, target, cross } => match role {
                SubnetRole::Source => source,
                SubnetRole::Target => target,
                SubnetRole::SourceTarget => cross,
            },
        }
    }

    pub fn shares_weights(&self) -> bool {
        matches!(self.bank, SubnetBank::Shared(_))
    }

    pub fn register(&self, set: &mut ParamSet<T>, prefix: &str) {
        match &self.bank {
            SubnetBank::Shared(s) => s.register(set, &format!("{prefix}.shared")),
            SubnetBank::Separate { source, target, cross } => {
                source.register(set, &format!("{prefix}.src"));
                target.register(set, &format!("{prefix}.tgt"));
                cross.register(set, &format!("{prefix}.st"));
            }
        }
    }
}

/// Classic sine/cosine positional encoding over the flattened token index.
fn sinusoidal_pe<T: Element>(n: usize, c: usize) -> ArrayD<T> {
    let mut pe = ArrayD::<T>::zeros(IxDyn(&[n, c]));
    for pos in 0..n {
        for i in 0..c {
            let pair = (i / 2 * 2) as f64;
            let angle = pos as f64 / 10000f64.powf(pair / c as f64);
            pe[[pos, i]] = lit::<T>(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    pe
}

fn check_same_shape<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(), DecoderError> {
    if a.shape() != b.shape() {
        return Err(DecoderError::ShapeMismatch(a.shape(), b.shape()));
    }
    Ok(())
}

/// Concatenate per-layer score maps `[e, n, n]` along the last axis into the
/// `[e, n, tau*n]` stack consumed by the conv refinement.
pub fn concat_layer_scores<T: Element>(per_layer: &[Tensor<T>]) -> Tensor<T> {
    Tensor::concat(2, per_layer)
}

/// Domain attention block forward pass over one decoder scale.
///
/// `q_feats` / `k_feats` are the tau encoder layer maps of this scale
/// (`[h, w, c]` each); `v` is the incoming value map of the same shape.
/// Pipeline: flatten + positional encoding, per-layer q/k projections split
/// over heads, per-layer softmax score maps, concatenation over layers,
/// conv+BN+ReLU refinement of the stacked maps back to one `[hw, hw]` map per
/// head, multiplication with the projected value, head averaging and a final
/// conv+BN+ReLU. The returned score map is the pre-conv, layer-averaged,
/// post-softmax stack used by the alignment loss.
pub fn dab_forward<T: Element>(
    q_feats: &[Tensor<T>],
    k_feats: &[Tensor<T>],
    v: &Tensor<T>,
    dab: &DabParams<T>,
    cfg: &DecoderConfig,
    training: bool,
) -> Result<AttentionOutput<T>, DecoderError> {
    if q_feats.len() != k_feats.len() || q_feats.len() != dab.q_projs.len() {
        return Err(DecoderError::LayerCountMismatch(q_feats.len(), k_feats.len()));
    }
    for (q, k) in q_feats.iter().zip(k_feats) {
        check_same_shape(q, k)?;
        check_same_shape(q, v)?;
    }
    let shape = v.shape();
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let n = h * w;
    let e = cfg.num_heads;
    let d = c / e;
    let tau = q_feats.len();

    let pe = match cfg.positional_encoding {
        PositionalEncoding::Sinusoidal => Some(sinusoidal_pe::<T>(n, c)),
        PositionalEncoding::None => None,
    };
    let with_pe = |t: &Tensor<T>| -> Tensor<T> {
        let flat = t.reshape(&[n, c]);
        match &pe {
            Some(pe) => flat.add_const(pe),
            None => flat,
        }
    };
    let heads = |t: &Tensor<T>| t.reshape(&[n, e, d]).permute(&[1, 0, 2]); // [e, n, d]

    let v_da = heads(&linear(&with_pe(v), &dab.v_proj.0, Some(&dab.v_proj.1)));
    let scale = 1.0 / (d as f64).sqrt();
    let mut per_layer = Vec::with_capacity(tau);
    for l in 0..tau {
        let q_da = heads(&linear(
            &with_pe(&q_feats[l]),
            &dab.q_projs[l].0,
            Some(&dab.q_projs[l].1),
        ));
        let k_da = heads(&linear(
            &with_pe(&k_feats[l]),
            &dab.k_projs[l].0,
            Some(&dab.k_projs[l].1),
        ));
        let scores = q_da.bmm_nt(&k_da).mul_scalar(scale).softmax_last(); // [e, n, n]
        per_layer.push(scores);
    }

    let mut score_map = per_layer[0].clone();
    for s in &per_layer[1..] {
        score_map = score_map.add(s);
    }
    let score_map = score_map.mul_scalar(1.0 / tau as f64);

    // [e, n, tau*n] -> [e, tau, n, n] -> conv stack -> refined [e, n, n]
    let stacked = concat_layer_scores(&per_layer)
        .reshape(&[e, n, tau, n])
        .permute(&[0, 2, 1, 3]);
    let mut refined = stacked;
    for conv in &dab.score_convs {
        refined = conv.forward(&refined, training);
    }
    let refined = refined.reshape(&[e, n, n]);

    let context = refined.bmm(&v_da).mean_axis(0); // [n, d]
    let context = context
        .reshape(&[h, w, d])
        .permute(&[2, 0, 1])
        .reshape(&[1, d, h, w]);
    let a_attn = dab
        .out_conv
        .forward(&context, training)
        .reshape(&[dab.out_channels, h, w])
        .permute(&[1, 2, 0]);
    Ok(AttentionOutput { a_attn, score_map })
}

/// DEB: align the attention output to the skip resolution, concatenate both
/// skip maps, reduce to one channel with three conv+ReLU, then upsample to
/// the requested resolution. Output is non-negative.
pub fn deb_forward<T: Element>(
    a_attn: &Tensor<T>,
    skip_s: &Tensor<T>,
    skip_t: &Tensor<T>,
    deb: &DebParams<T>,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<T>, DecoderError> {
    check_same_shape(skip_s, skip_t)?;
    let target = skip_s.shape();
    let a_up = a_attn.bilinear_resize_hw(target[0], target[1]);
    if a_up.shape()[2] != target[2] {
        return Err(DecoderError::ShapeMismatch(a_up.shape(), target));
    }
    let (h, w, c1) = (target[0], target[1], target[2]);
    let x = Tensor::concat(2, &[a_up, skip_s.clone(), skip_t.clone()]); // [h, w, 3c1]
    let mut x = x.permute(&[2, 0, 1]).reshape(&[1, 3 * c1, h, w]);
    for (w_t, b_t) in &deb.convs {
        x = x.conv2d(w_t, Some(b_t), 1, 1).relu();
    }
    let density = x.reshape(&[1, h, w]).permute(&[1, 2, 0]); // [h, w, 1]
    let density = density.bilinear_resize_hw(out_h, out_w);
    Ok(density.reshape(&[out_h, out_w]))
}

/// Run one decoding subnet over a (query, key) pyramid pair.
///
/// Self mode requires `pyr_q` and `pyr_k` to be the same pyramid; cross mode
/// takes queries from the target pyramid and keys from the source pyramid.
/// The initial value map is the sum of both pyramids' last fourth-scale
/// layers (which doubles the map in self mode, deliberately the same code
/// path). Returns the full-resolution density map and the per-scale score
/// maps.
pub fn subnet_forward<T: Element>(
    pyr_q: &FeaturePyramid<T>,
    pyr_k: &FeaturePyramid<T>,
    subnet: &SubnetParams<T>,
    cfg: &DecoderConfig,
    mode: AttentionMode,
    out_hw: (usize, usize),
    training: bool,
) -> Result<(Tensor<T>, ScoreMapSet<T>), DecoderError> {
    let same = pyr_q.last(4).same_storage(pyr_k.last(4));
    if mode == AttentionMode::SelfDomain && !same {
        return Err(DecoderError::ModeMismatch);
    }

    let mut v = pyr_q.last(4).add(pyr_k.last(4));
    let mut maps = BTreeMap::new();
    for (scale, stage) in &subnet.stages {
        let q_layers = pyr_q.layers(*scale);
        let k_layers = pyr_k.layers(*scale);
        let target_shape = q_layers[0].shape();
        v = v.bilinear_resize_hw(target_shape[0], target_shape[1]);
        match stage {
            ScaleStage::Dab(dab) => {
                let out = if cfg.bidirectional_cross
                    && mode == AttentionMode::CrossDomain
                    && !same
                {
                    let fwd = dab_forward(q_layers, k_layers, &v, dab, cfg, training)?;
                    let rev = dab_forward(k_layers, q_layers, &v, dab, cfg, training)?;
                    AttentionOutput {
                        a_attn: fwd.a_attn.add(&rev.a_attn).mul_scalar(0.5),
                        score_map: fwd.score_map.add(&rev.score_map).mul_scalar(0.5),
                    }
                } else {
                    dab_forward(q_layers, k_layers, &v, dab, cfg, training)?
                };
                maps.insert(*scale, out.score_map);
                v = out.a_attn;
            }
            ScaleStage::Reduce(w, b) => {
                let (h, wd, c) = (target_shape[0], target_shape[1], target_shape[2]);
                let c_out = w.shape()[1];
                v = linear(&v.reshape(&[h * wd, c]), w, Some(b)).reshape(&[h, wd, c_out]);
            }
        }
    }
    // final upsample to 1/4 resolution, then the DEB with first-scale skips
    let skip_shape = pyr_q.last(1).shape();
    let a_prime = v.bilinear_resize_hw(skip_shape[0], skip_shape[1]);
    let density = deb_forward(
        &a_prime,
        pyr_k.last(1),
        pyr_q.last(1),
        &subnet.deb,
        out_hw.0,
        out_hw.1,
    )?;
    Ok((density, ScoreMapSet { maps }))
}

/// All three subnets over one paired (source, target) pyramid pair.
pub struct ModelOutput<T: Element> {
    pub t_s: Tensor<T>,
    pub t_t: Tensor<T>,
    pub t_st: Tensor<T>,
    pub score_s: ScoreMapSet<T>,
    pub score_t: ScoreMapSet<T>,
    pub score_st: ScoreMapSet<T>,
}

/// The encoder runs once per image elsewhere; the pyramids are reused by all
/// three subnets here.
pub fn model_forward<T: Element>(
    pyr_s: &FeaturePyramid<T>,
    pyr_t: &FeaturePyramid<T>,
    dec: &DecoderParams<T>,
    out_hw: (usize, usize),
    training: bool,
) -> Result<ModelOutput<T>, DecoderError> {
    let (t_s, score_s) = subnet_forward(
        pyr_s,
        pyr_s,
        dec.subnet(SubnetRole::Source),
        &dec.cfg,
        AttentionMode::SelfDomain,
        out_hw,
        training,
    )?;
    let (t_t, score_t) = subnet_forward(
        pyr_t,
        pyr_t,
        dec.subnet(SubnetRole::Target),
        &dec.cfg,
        AttentionMode::SelfDomain,
        out_hw,
        training,
    )?;
    let (t_st, score_st) = subnet_forward(
        pyr_t,
        pyr_s,
        dec.subnet(SubnetRole::SourceTarget),
        &dec.cfg,
        AttentionMode::CrossDomain,
        out_hw,
        training,
    )?;
    Ok(ModelOutput { t_s, t_t, t_st, score_s, score_t, score_st })
}

/// Inference path: only the target subnet runs (self-domain attention over
/// the target pyramid).
pub fn predict_density<T: Element>(
    pyr: &FeaturePyramid<T>,
    dec: &DecoderParams<T>,
    out_hw: (usize, usize),
) -> Result<Tensor<T>, DecoderError> {
    let (density, _) = subnet_forward(
        pyr,
        pyr,
        dec.subnet(SubnetRole::Target),
        &dec.cfg,
        AttentionMode::SelfDomain,
        out_hw,
        false,
    )?;
    Ok(density)
}
