//! Domain-adaptive training loop: few-shot target sampling, paired batch
//! construction with CutMix re-augmentation, alternating generator /
//! discriminator updates with the lambda schedule, line-delimited loss
//! records and a binary checkpoint with bitwise-exact round-tripping.
//!
//! Everything here is single-threaded and seeded; two runs with the same
//! config produce byte-identical loss logs.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use ndgrad::optim::{Adam, ParamSet, Sgd};
use ndgrad::{lit, Element, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{
    crop_flip_with, cutmix, load_dataset, sample_cut_box, DataError, DomainTag, Sample,
};
use crate::decoder::{
    model_forward, subnet_forward, AttentionMode, DecoderConfig, DecoderParams,
    PositionalEncoding, SubnetRole,
};
use crate::discriminator::{discriminate, DiscriminatorConfig, DiscriminatorParams};
use crate::encoder::{htfe_forward, EncoderConfig, EncoderParams, Profile};
use crate::losses::{
    adversarial_losses, bce, count_loss, hcdfa_loss, l2_loss, ot_loss, total_loss, tv_loss,
    HcdfaWeights, LossBatch, LossError, OtConfig, TdmWeights,
};
use crate::F;

const CHECKPOINT_MAGIC: &[u8; 8] = b"TRCKPT01";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("decoder error: {0}")]
    Decoder(#[from] crate::decoder::DecoderError),
    #[error("discriminator error: {0}")]
    Discriminator(#[from] crate::discriminator::DiscriminatorError),
    #[error("loss error: {0}")]
    Loss(#[from] LossError),
    #[error("few-shot k = {k} exceeds target training set of {n}")]
    KTooLarge { k: usize, n: usize },
    #[error("non-finite loss at epoch {epoch} step {step}; diagnostics at {path}")]
    NonFinite { epoch: usize, step: usize, path: PathBuf },
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("bad checkpoint {path}: {msg}")]
    BadCheckpoint { path: PathBuf, msg: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.to_path_buf(), source }
}

/// Full training configuration; the flat key-value config files map 1:1 to
/// these fields.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub profile: Profile,
    pub k_shot: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub disc_lr: f64,
    pub lambda_start: f64,
    pub lambda_after: f64,
    pub lambda_switch_epoch: usize,
    pub seed: u64,
    pub crop_size: usize,
    pub sigma: f32,
    pub grad_clip: Option<f64>,
    pub tdm: TdmWeights,
    pub hcdfa: HcdfaWeights,
    pub ot: OtConfig,
    pub use_hcdfa: bool,
    pub use_adversarial: bool,
    pub use_cutmix: bool,
    pub l2_loss_only: bool,
    pub source_only_baseline: bool,
    pub dab_scales: Vec<usize>,
    pub bidirectional_cross: bool,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            profile: Profile::Paper,
            k_shot: 5,
            batch_size: 8,
            epochs: 200,
            lr: 1e-4,
            weight_decay: 1e-5,
            disc_lr: 1e-3,
            lambda_start: 0.1,
            lambda_after: 1.0,
            lambda_switch_epoch: 100,
            seed: 0,
            crop_size: 256,
            sigma: 4.0,
            grad_clip: None,
            tdm: TdmWeights::default(),
            hcdfa: HcdfaWeights::default(),
            ot: OtConfig::default(),
            use_hcdfa: true,
            use_adversarial: true,
            use_cutmix: true,
            l2_loss_only: false,
            source_only_baseline: false,
            dab_scales: vec![4, 3, 2],
            bidirectional_cross: false,
            checkpoint_every: 10,
        }
    }
}

impl TrainConfig {
    /// Desk-scale defaults: small crops, pooled OT, clipped gradients.
    pub fn toy(seed: u64) -> Self {
        TrainConfig {
            profile: Profile::Toy,
            epochs: 20,
            seed,
            crop_size: 64,
            grad_clip: Some(10.0),
            disc_lr: 1e-2,
            lambda_switch_epoch: 10,
            ot: OtConfig { epsilon: 1e-2, iterations: 30, pool_factor: 8 },
            checkpoint_every: 10,
            ..TrainConfig::default()
        }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig::for_profile(self.profile)
    }

    pub fn decoder_config(&self) -> DecoderConfig {
        let mut cfg = DecoderConfig::for_profile(self.profile);
        cfg.dab_scales = self.dab_scales.clone();
        cfg.bidirectional_cross = self.bidirectional_cross;
        cfg.positional_encoding = PositionalEncoding::Sinusoidal;
        cfg
    }

    pub fn discriminator_config(&self) -> DiscriminatorConfig {
        DiscriminatorConfig::for_profile(self.profile)
    }
}

/// Piecewise-constant adversarial weight.
pub fn lambda_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    if epoch < cfg.lambda_switch_epoch {
        cfg.lambda_start
    } else {
        cfg.lambda_after
    }
}

/// Deterministic uniform sample without replacement; returns the chosen
/// samples in draw order.
pub fn sample_few_shot(
    target_train: &[Sample],
    k: usize,
    seed: u64,
) -> Result<Vec<Sample>, TrainError> {
    if k > target_train.len() {
        return Err(TrainError::KTooLarge { k, n: target_train.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx = rand::seq::index::sample(&mut rng, target_train.len(), k);
    Ok(idx.iter().map(|i| target_train[i].clone()).collect())
}

/// The generator network bundle plus its discriminator opponent.
pub struct Model {
    pub cfg: TrainConfig,
    pub enc: EncoderParams<F>,
    pub dec: DecoderParams<F>,
    pub disc: DiscriminatorParams<F>,
    pub gen_set: ParamSet<F>,
    pub disc_set: ParamSet<F>,
}

impl Model {
    pub fn init(cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Self {
        let enc_cfg = cfg.encoder_config();
        let dec_cfg = cfg.decoder_config();
        let disc_cfg = cfg.discriminator_config();
        let enc = EncoderParams::init(&enc_cfg, rng);
        let dec = DecoderParams::init(&enc_cfg, &dec_cfg, rng);
        let disc = DiscriminatorParams::init(&disc_cfg, rng);
        let mut gen_set = ParamSet::new();
        enc.register(&mut gen_set, "enc");
        dec.register(&mut gen_set, "dec");
        let mut disc_set = ParamSet::new();
        disc.register(&mut disc_set, "disc");
        Model { cfg: cfg.clone(), enc, dec, disc, gen_set, disc_set }
    }
}

/// Convert an `[H, W, 3]` image array into a constant tensor.
pub fn image_tensor<T: Element>(image: &Array3<f32>) -> Tensor<T> {
    let sh = image.dim();
    let mut a = ArrayD::<T>::zeros(IxDyn(&[sh.0, sh.1, sh.2]));
    for (o, &v) in a.iter_mut().zip(image.iter()) {
        *o = lit::<T>(v as f64);
    }
    Tensor::constant(a)
}

pub fn density_tensor<T: Element>(d: &Array2<f32>) -> Tensor<T> {
    let sh = d.dim();
    let mut a = ArrayD::<T>::zeros(IxDyn(&[sh.0, sh.1]));
    for (o, &v) in a.iter_mut().zip(d.iter()) {
        *o = lit::<T>(v as f64);
    }
    Tensor::constant(a)
}

/// One per-step structured loss record; serialized as one JSON line with
/// exactly these keys in this order.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub l_count: f64,
    pub l_ot: f64,
    pub l_tv: f64,
    pub l_tdm_s: f64,
    pub l_tdm_t: f64,
    pub l_tdm_st: f64,
    pub l_ds: f64,
    pub l_dt: f64,
    pub l_hcdfa: f64,
    pub l_adv_g: f64,
    pub l_adv_d: f64,
    pub lambda: f64,
}

impl StepRecord {
    pub fn is_finite(&self) -> bool {
        [
            self.l_count,
            self.l_ot,
            self.l_tv,
            self.l_tdm_s,
            self.l_tdm_t,
            self.l_tdm_st,
            self.l_ds,
            self.l_dt,
            self.l_hcdfa,
            self.l_adv_g,
            self.l_adv_d,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    /// The scalar actually minimized by the generator update.
    pub fn generator_total(&self) -> f64 {
        self.l_tdm_s + self.l_tdm_t + self.l_tdm_st + self.l_hcdfa + self.l_adv_g
    }
}

/// Deterministic paired batches for one epoch: a shuffled pass over the
/// source set, with the few-shot target set cycled and re-augmented (CutMix
/// with a random partner, then crop/flip) so every step sees fresh target
/// variants. Trailing source samples that do not fill a batch are dropped.
pub fn make_paired_batches(
    source: &[Sample],
    target_few: &[Sample],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(Vec<Sample>, Vec<Sample>)>, TrainError> {
    assert!(!source.is_empty() && !target_few.is_empty());
    let b = cfg.batch_size;
    let mut order: Vec<usize> = (0..source.len()).collect();
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let steps = source.len() / b;
    let mut out = Vec::with_capacity(steps);
    let mut target_cursor = 0usize;
    for step in 0..steps {
        let mut batch_s = Vec::with_capacity(b);
        let mut batch_t = Vec::with_capacity(b);
        for slot in 0..b {
            let s = &source[order[step * b + slot]];
            batch_s.push(crop_flip_with(s, cfg.crop_size.min(s.size().0), rng, cfg.sigma)?);
            let primary = &target_few[target_cursor % target_few.len()];
            target_cursor += 1;
            let augmented = if cfg.use_cutmix && target_few.len() >= 1 {
                let partner = &target_few[rng.gen_range(0..target_few.len())];
                let (h, w) = primary.size();
                let cut = sample_cut_box(rng, h, w);
                cutmix(primary, partner, cut, cfg.sigma)?
            } else {
                primary.clone()
            };
            batch_t.push(crop_flip_with(
                &augmented,
                cfg.crop_size.min(augmented.size().0),
                rng,
                cfg.sigma,
            )?);
        }
        out.push((batch_s, batch_t));
    }
    Ok(out)
}

/// TDM (or L2, under the ablation) for one subnet triple.
fn supervised_terms(
    batch: &LossBatch<F>,
    cfg: &TrainConfig,
) -> Result<(Tensor<F>, StepRecord), TrainError> {
    let mut rec = StepRecord::default();
    if cfg.l2_loss_only {
        let mut total: Option<Tensor<F>> = None;
        let mut per = [0.0f64; 3];
        for (k, (s, g)) in batch.pairs.iter().enumerate() {
            let l = l2_loss(s, g)?;
            per[k] = l.value() as f64;
            total = Some(match total {
                Some(acc) => acc.add(&l),
                None => l,
            });
        }
        rec.l_tdm_s = per[0];
        rec.l_tdm_t = per[1];
        rec.l_tdm_st = per[2];
        return Ok((total.unwrap(), rec));
    }
    let (loss, br) = crate::losses::tdm_loss(batch, &cfg.tdm, &cfg.ot)?;
    rec.l_count = br.count;
    rec.l_ot = br.ot;
    rec.l_tv = br.tv;
    rec.l_tdm_s = br.per_subnet[0];
    rec.l_tdm_t = br.per_subnet[1];
    rec.l_tdm_st = br.per_subnet[2];
    Ok((loss, rec))
}

/// One optimization step over a paired batch: generator update then
/// (optionally) discriminator update on detached density maps. Returns the
/// averaged loss record.
pub fn train_step(
    model: &Model,
    batch_s: &[Sample],
    batch_t: &[Sample],
    epoch: usize,
    step: usize,
    opt_g: &mut Adam<F>,
    opt_d: &Sgd,
) -> Result<StepRecord, TrainError> {
    let cfg = &model.cfg;
    assert_eq!(batch_s.len(), batch_t.len(), "paired batches must align");
    let b = batch_s.len();
    let inv_b = 1.0 / b as f64;
    let lambda = lambda_schedule(epoch, cfg);
    let mut rec = StepRecord { epoch, step, lambda, ..StepRecord::default() };
    let mut detached_maps: Vec<(Tensor<F>, Tensor<F>)> = Vec::with_capacity(b);

    for (s, t) in batch_s.iter().zip(batch_t) {
        let (h, w) = s.size();
        let img_s = image_tensor::<F>(&s.image);
        let img_t = image_tensor::<F>(&t.image);
        let gt_s = density_tensor::<F>(&s.density_gt);
        let gt_t = density_tensor::<F>(&t.density_gt);

        let pair_loss = if cfg.source_only_baseline {
            let pyr_s = htfe_forward(&img_s, &model.enc);
            let (t_s, _) = subnet_forward(
                &pyr_s,
                &pyr_s,
                model.dec.subnet(SubnetRole::Source),
                &model.dec.cfg,
                AttentionMode::SelfDomain,
                (h, w),
                true,
            )?;
            let c = count_loss(&t_s, &gt_s)?;
            let (o, _) = ot_loss(&t_s, &gt_s, &cfg.ot)?;
            let (tv, _) = tv_loss(&t_s, &gt_s)?;
            rec.l_count += c.value() as f64 * inv_b;
            rec.l_ot += o.value() as f64 * inv_b;
            rec.l_tv += tv.value() as f64 * inv_b;
            let term = c
                .mul_scalar(cfg.tdm.phi1)
                .add(&o.mul_scalar(cfg.tdm.phi2))
                .add(&tv.mul_scalar(cfg.tdm.phi3));
            rec.l_tdm_s += term.value() as f64 * inv_b;
            term
        } else {
            let pyr_s = htfe_forward(&img_s, &model.enc);
            let pyr_t = htfe_forward(&img_t, &model.enc);
            let out = model_forward(&pyr_s, &pyr_t, &model.dec, (h, w), true)?;
            let loss_batch = LossBatch::new(
                out.t_s.clone(),
                gt_s,
                out.t_t.clone(),
                out.t_st.clone(),
                gt_t,
            );
            let (tdm, tdm_rec) = supervised_terms(&loss_batch, cfg)?;
            rec.l_count += tdm_rec.l_count * inv_b;
            rec.l_ot += tdm_rec.l_ot * inv_b;
            rec.l_tv += tdm_rec.l_tv * inv_b;
            rec.l_tdm_s += tdm_rec.l_tdm_s * inv_b;
            rec.l_tdm_t += tdm_rec.l_tdm_t * inv_b;
            rec.l_tdm_st += tdm_rec.l_tdm_st * inv_b;

            let align = if cfg.use_hcdfa {
                let (l, ds, dt) =
                    hcdfa_loss(&out.score_st, &out.score_s, &out.score_t, &cfg.hcdfa)?;
                rec.l_ds += ds * inv_b;
                rec.l_dt += dt * inv_b;
                rec.l_hcdfa += l.value() as f64 * inv_b;
                l
            } else {
                Tensor::scalar(0.0)
            };

            let adv_gen = if cfg.use_adversarial {
                let d_s = discriminate(&out.t_s, &model.disc)?;
                let d_t = discriminate(&out.t_t, &model.disc)?;
                let zero = Tensor::scalar(0.0);
                let (gen_term, _) = adversarial_losses(&d_s, &d_t, &zero, &zero, lambda)?;
                rec.l_adv_g += gen_term.value() as f64 * inv_b;
                gen_term
            } else {
                Tensor::scalar(0.0)
            };
            detached_maps.push((out.t_s.detach(), out.t_t.detach()));
            total_loss(&tdm, &align, &adv_gen)
        };
        pair_loss.mul_scalar(inv_b).backward();
    }

    if !rec.is_finite() {
        // caller persists diagnostics; surface a placeholder path here
        return Err(TrainError::NonFinite {
            epoch,
            step,
            path: PathBuf::from("<unwritten>"),
        });
    }

    if let Some(max_norm) = cfg.grad_clip {
        model.gen_set.clip_grad_norm(max_norm);
    }
    opt_g.step(&model.gen_set);
    model.gen_set.zero_grads();
    // the generator's adversarial term also backpropagated into the
    // discriminator; the alternating update discards those gradients
    model.disc_set.zero_grads();

    if cfg.use_adversarial && !cfg.source_only_baseline {
        for (t_s, t_t) in &detached_maps {
            let d_s = discriminate(t_s, &model.disc)?;
            let d_t = discriminate(t_t, &model.disc)?;
            let loss = bce(&d_s, 1.0).add(&bce(&d_t, 0.0));
            rec.l_adv_d += loss.value() as f64 * inv_b;
            loss.mul_scalar(inv_b).backward();
        }
        opt_d.step(&model.disc_set);
        model.disc_set.zero_grads();
    }
    Ok(rec)
}

/// Training driver state that checkpoints carry across resumes.
pub struct TrainState {
    pub model: Model,
    pub opt_g: Adam<F>,
    pub opt_d: Sgd,
    pub rng: ChaCha8Rng,
    pub next_epoch: usize,
}

impl TrainState {
    pub fn fresh(cfg: &TrainConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let model = Model::init(cfg, &mut rng);
        let opt_g = Adam::new(&model.gen_set, cfg.lr, cfg.weight_decay);
        let opt_d = Sgd::new(cfg.disc_lr);
        TrainState { model, opt_g, opt_d, rng, next_epoch: 0 }
    }
}

/// Outcome of a full training run.
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub loss_log: PathBuf,
    pub final_record: Option<StepRecord>,
}

/// Train from datasets on disk (see the data module layout).
pub fn train(
    cfg: &TrainConfig,
    source_root: &Path,
    target_root: &Path,
    out_dir: &Path,
) -> Result<TrainOutcome, TrainError> {
    let source = load_dataset(source_root, "train", cfg.sigma, DomainTag::Source)?;
    let target_all = load_dataset(target_root, "train", cfg.sigma, DomainTag::Target)?;
    train_on_samples(cfg, &source, &target_all, out_dir, None)
}

/// Resume from a checkpoint: the epoch counter continues where it stopped.
pub fn train_resume(
    checkpoint: &Path,
    source_root: &Path,
    target_root: &Path,
    out_dir: &Path,
) -> Result<TrainOutcome, TrainError> {
    let (state, cfg) = load_checkpoint(checkpoint)?;
    let source = load_dataset(source_root, "train", cfg.sigma, DomainTag::Source)?;
    let target_all = load_dataset(target_root, "train", cfg.sigma, DomainTag::Target)?;
    train_on_samples(&cfg, &source, &target_all, out_dir, Some(state))
}

/// In-memory training entry (the dataset-from-disk wrappers call this).
pub fn train_on_samples(
    cfg: &TrainConfig,
    source: &[Sample],
    target_all: &[Sample],
    out_dir: &Path,
    resume: Option<TrainState>,
) -> Result<TrainOutcome, TrainError> {
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let few = if cfg.source_only_baseline {
        // the baseline never sees target data; keep one placeholder for the
        // pairing plumbing
        sample_few_shot(source, 1.min(source.len()), cfg.seed)?
    } else {
        sample_few_shot(target_all, cfg.k_shot, cfg.seed)?
    };
    let selection: Vec<String> = few.iter().map(|s| s.id.clone()).collect();
    let selection_path = out_dir.join("few_shot_selection.json");
    std::fs::write(
        &selection_path,
        serde_json::to_string_pretty(&selection).expect("serializable"),
    )
    .map_err(io_err(&selection_path))?;

    let mut state = resume.unwrap_or_else(|| TrainState::fresh(cfg));
    let log_path = out_dir.join("losses.jsonl");
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(io_err(&log_path))?;

    let mut last_record = None;
    let start = state.next_epoch;
    for epoch in start..cfg.epochs {
        let batches = make_paired_batches(source, &few, cfg, &mut state.rng)?;
        for (step, (bs, bt)) in batches.iter().enumerate() {
            let rec = train_step(
                &state.model,
                bs,
                bt,
                epoch,
                step,
                &mut state.opt_g,
                &state.opt_d,
            );
            let rec = match rec {
                Ok(r) => r,
                Err(TrainError::NonFinite { epoch, step, .. }) => {
                    let diag = out_dir.join("abort.json");
                    let _ = std::fs::write(
                        &diag,
                        format!("{{\"epoch\":{epoch},\"step\":{step},\"reason\":\"non-finite loss\"}}"),
                    );
                    return Err(TrainError::NonFinite { epoch, step, path: diag });
                }
                Err(e) => return Err(e),
            };
            let line = serde_json::to_string(&rec).expect("record serializes");
            log.write_all(line.as_bytes()).map_err(io_err(&log_path))?;
            log.write_all(b"\n").map_err(io_err(&log_path))?;
            last_record = Some(rec);
        }
        state.next_epoch = epoch + 1;
        if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
            let path = out_dir.join(format!("checkpoint_epoch{:04}.bin", epoch + 1));
            save_checkpoint(&path, &state, cfg)?;
        }
    }
    let final_path = out_dir.join("checkpoint_final.bin");
    save_checkpoint(&final_path, &state, cfg)?;
    Ok(TrainOutcome {
        checkpoint: final_path,
        loss_log: log_path,
        final_record: last_record,
    })
}

// ---- checkpoint format ----
//
// magic (8) | version u32 | config json (u64 len + bytes) | epoch u64 |
// rng seed (32) | rng word_pos u128 | adam t u64 |
// named f32 arrays (u64 count, then name/dims/data), covering generator
// params ("g:"), discriminator params ("d:"), state buffers ("b:") and Adam
// moments ("am:", "av:").

fn write_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_named(w: &mut impl Write, name: &str, arr: &ArrayD<F>) -> std::io::Result<()> {
    write_u32(w, name.len() as u32)?;
    w.write_all(name.as_bytes())?;
    write_u32(w, arr.ndim() as u32)?;
    for &d in arr.shape() {
        write_u64(w, d as u64)?;
    }
    for v in arr.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_named(r: &mut impl Read) -> std::io::Result<(String, ArrayD<F>)> {
    let name_len = read_u32(r)? as usize;
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name)?;
    let name = String::from_utf8(name)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
    let ndim = read_u32(r)? as usize;
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        dims.push(read_u64(r)? as usize);
    }
    let len: usize = dims.iter().product();
    let mut data = Vec::with_capacity(len);
    let mut buf = [0u8; 4];
    for _ in 0..len {
        r.read_exact(&mut buf)?;
        data.push(F::from_le_bytes(buf));
    }
    Ok((name, ArrayD::from_shape_vec(IxDyn(&dims), data).unwrap()))
}

pub fn save_checkpoint(path: &Path, state: &TrainState, cfg: &TrainConfig) -> Result<(), TrainError> {
    let mut entries: Vec<(String, ArrayD<F>)> = Vec::new();
    for (name, t) in state.model.gen_set.params() {
        entries.push((format!("g:{name}"), t.to_array()));
    }
    for (name, t) in state.model.disc_set.params() {
        entries.push((format!("d:{name}"), t.to_array()));
    }
    for (name, b) in state.model.gen_set.buffers() {
        entries.push((format!("b:{name}"), b.borrow().clone()));
    }
    let (adam_t, ms, vs) = state.opt_g.state_arrays();
    let gen_names: Vec<&String> = state.model.gen_set.params().map(|(n, _)| n).collect();
    for (name, m) in gen_names.iter().zip(ms) {
        entries.push((format!("am:{name}"), m.clone()));
    }
    for (name, v) in gen_names.iter().zip(vs) {
        entries.push((format!("av:{name}"), v.clone()));
    }

    let mut w = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(io_err(path))?,
    );
    let io = |e: std::io::Error| TrainError::Io { path: path.to_path_buf(), source: e };
    (|| -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        write_u32(&mut w, CHECKPOINT_VERSION)?;
        let cfg_json = serde_json::to_vec(cfg).expect("config serializes");
        write_u64(&mut w, cfg_json.len() as u64)?;
        w.write_all(&cfg_json)?;
        write_u64(&mut w, state.next_epoch as u64)?;
        w.write_all(&state.rng.get_seed())?;
        w.write_all(&state.rng.get_word_pos().to_le_bytes())?;
        write_u64(&mut w, adam_t)?;
        write_u64(&mut w, entries.len() as u64)?;
        for (name, arr) in &entries {
            write_named(&mut w, name, arr)?;
        }
        w.flush()
    })()
    .map_err(io)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(TrainState, TrainConfig), TrainError> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path).map_err(io_err(path))?);
    let bad = |msg: &str| TrainError::BadCheckpoint {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    let io = |e: std::io::Error| TrainError::Io { path: path.to_path_buf(), source: e };

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad("magic mismatch"));
    }
    let version = read_u32(&mut r).map_err(io)?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let cfg_len = read_u64(&mut r).map_err(io)? as usize;
    let mut cfg_json = vec![0u8; cfg_len];
    r.read_exact(&mut cfg_json).map_err(io)?;
    let cfg: TrainConfig =
        serde_json::from_slice(&cfg_json).map_err(|e| bad(&format!("config: {e}")))?;
    let next_epoch = read_u64(&mut r).map_err(io)? as usize;
    let mut seed = [0u8; 32];
    r.read_exact(&mut seed).map_err(io)?;
    let mut pos_bytes = [0u8; 16];
    r.read_exact(&mut pos_bytes).map_err(io)?;
    let word_pos = u128::from_le_bytes(pos_bytes);
    let adam_t = read_u64(&mut r).map_err(io)?;
    let count = read_u64(&mut r).map_err(io)? as usize;
    let mut named = Vec::with_capacity(count);
    for _ in 0..count {
        named.push(read_named(&mut r).map_err(io)?);
    }

    // rebuild the model skeleton with a throwaway rng, then overwrite
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = Model::init(&cfg, &mut init_rng);
    let mut gen_named = Vec::new();
    let mut disc_named = Vec::new();
    let mut adam_m: Vec<(String, ArrayD<F>)> = Vec::new();
    let mut adam_v: Vec<(String, ArrayD<F>)> = Vec::new();
    for (name, arr) in named {
        if let Some(n) = name.strip_prefix("g:") {
            gen_named.push((n.to_string(), arr));
        } else if let Some(n) = name.strip_prefix("d:") {
            disc_named.push((n.to_string(), arr));
        } else if let Some(n) = name.strip_prefix("b:") {
            let found = model
                .gen_set
                .buffers()
                .find(|(bn, _)| bn.as_str() == n)
                .ok_or_else(|| bad(&format!("unknown buffer {n}")))?;
            *found.1.borrow_mut() = arr;
        } else if let Some(n) = name.strip_prefix("am:") {
            adam_m.push((n.to_string(), arr));
        } else if let Some(n) = name.strip_prefix("av:") {
            adam_v.push((n.to_string(), arr));
        } else {
            return Err(bad(&format!("unknown entry {name}")));
        }
    }
    model
        .gen_set
        .load(&gen_named)
        .map_err(|m| bad(&m))?;
    model
        .disc_set
        .load(&disc_named)
        .map_err(|m| bad(&m))?;

    let mut opt_g = Adam::new(&model.gen_set, cfg.lr, cfg.weight_decay);
    let order: Vec<String> = model.gen_set.params().map(|(n, _)| n.clone()).collect();
    let lookup = |list: &[(String, ArrayD<F>)], n: &String| {
        list.iter()
            .find(|(k, _)| k == n)
            .map(|(_, a)| a.clone())
            .ok_or_else(|| bad(&format!("missing optimizer state for {n}")))
    };
    let ms: Result<Vec<_>, _> = order.iter().map(|n| lookup(&adam_m, n)).collect();
    let vs: Result<Vec<_>, _> = order.iter().map(|n| lookup(&adam_v, n)).collect();
    opt_g.restore_state(adam_t, ms?, vs?);

    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_word_pos(word_pos);
    let opt_d = Sgd::new(cfg.disc_lr);
    Ok((
        TrainState { model, opt_g, opt_d, rng, next_epoch },
        cfg,
    ))
}
