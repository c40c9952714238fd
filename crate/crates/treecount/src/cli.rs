//! Command-line pipeline: `synth` / `train` / `eval` / `predict` / `ablate`.
//!
//! Every run writes a manifest and the fully resolved flat key-value config
//! into its output directory before doing any work, so a run can be repeated
//! bit-identically from its artifacts.
//!
//! Exit codes: 0 success, 2 usage error, 3 missing file, 4 numeric failure
//! during training, 1 anything else.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;
use serde::Serialize;

use crate::data::{
    generate_synthetic_with_sigma, load_dataset, save_dataset, DomainProfile, DomainTag,
};
use crate::encoder::Profile;
use crate::eval::{evaluate_model, save_report, EvalConfig, R2Variant};
use crate::trainer::{load_checkpoint, train_on_samples, TrainConfig, TrainError};

const DENSITY_MAGIC: &[u8; 8] = b"DMAP0001";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    MissingFile(PathBuf),
    Numeric(String),
    Other(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::MissingFile(p) => write!(f, "missing file: {}", p.display()),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
            CliError::Other(m) => write!(f, "error: {m}"),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::MissingFile(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Other(_) => 1,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            TrainError::Data(crate::data::DataError::MissingAnnotation(p)) => {
                CliError::MissingFile(p)
            }
            TrainError::Data(crate::data::DataError::Io { ref path, ref source })
                if source.kind() == std::io::ErrorKind::NotFound =>
            {
                CliError::MissingFile(path.clone())
            }
            other => CliError::Other(other.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "treecount",
    about = "Few-shot domain-adaptive tree counting pipeline",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a paired two-domain synthetic dataset.
    Synth(SynthArgs),
    /// Train the adaptation model (or a source-only baseline).
    Train(TrainArgs),
    /// Evaluate a checkpoint over a dataset split.
    Eval(EvalArgs),
    /// Predict a density map and count for one image.
    Predict(PredictArgs),
    /// Run a named ablation preset of the training configuration.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output root; source/ and target/ dataset trees are created below it.
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON file with a source DomainProfile (built-in default otherwise).
    #[arg(long)]
    source_profile: Option<PathBuf>,
    /// JSON file with a target DomainProfile (built-in default otherwise).
    #[arg(long)]
    target_profile: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    n_train: usize,
    #[arg(long, default_value_t = 50)]
    n_test: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4.0)]
    sigma: f32,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Source-domain dataset root (expects a train/ split).
    #[arg(long)]
    source: PathBuf,
    /// Target-domain dataset root (expects a train/ split).
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Flat key-value config file; flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Repeatable direct overrides, e.g. --set epochs=12.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    profile: Option<String>,
    #[arg(long)]
    k_shot: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Resume from an existing checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset root (expects the chosen split below it).
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 15.0)]
    match_radius: f64,
    #[arg(long, default_value_t = 0.25)]
    peak_threshold: f64,
    #[arg(long, default_value_t = 8.0)]
    peak_min_distance: f64,
    #[arg(long, default_value = "standard")]
    r2_variant: String,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Density map output path (binary container, see docs).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Optional color-mapped PNG rendering of the density.
    #[arg(long)]
    viz: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    /// One of: no-hcdfa, no-adv, single-scale-dab, bi-da, l2-loss, k1, k5,
    /// k10, beta-0.1-0.9, beta-0.3-0.7, beta-0.5-0.5, beta-0.7-0.3,
    /// beta-0.9-0.1.
    #[arg(long)]
    preset: String,
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    argv: &'a [String],
    config_path: Option<String>,
    seed: u64,
    artifact_version: &'a str,
    out_dir: String,
}

/// Entry point used by the binary; returns the process exit code.
pub fn run_cli(argv: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            // clap renders its own help/usage text; keep its exit semantics
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a, &argv),
        Command::Train(a) => cmd_train(a, &argv),
        Command::Eval(a) => cmd_eval(a, &argv),
        Command::Predict(a) => cmd_predict(a, &argv),
        Command::Ablate(a) => cmd_ablate(a, &argv),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

fn default_out(command: &str, seed: u64) -> PathBuf {
    let root = std::env::var("TREECOUNT_OUT").unwrap_or_else(|_| "runs".to_string());
    PathBuf::from(root).join(format!("{command}_seed{seed}"))
}

fn write_manifest(
    out_dir: &Path,
    command: &str,
    argv: &[String],
    config_path: Option<&Path>,
    seed: u64,
) -> Result<(), CliError> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Other(format!("create {}: {e}", out_dir.display())))?;
    let manifest = RunManifest {
        command,
        argv,
        config_path: config_path.map(|p| p.display().to_string()),
        seed,
        artifact_version: env!("CARGO_PKG_VERSION"),
        out_dir: out_dir.display().to_string(),
    };
    let path = out_dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest).unwrap())
        .map_err(|e| CliError::Other(format!("write {}: {e}", path.display())))?;
    Ok(())
}

fn require_exists(path: &Path) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::MissingFile(path.to_path_buf()))
    }
}

// ---- flat key=value config ----

/// Apply one `key = value` pair onto a training config. Keys mirror the
/// TrainConfig fields; nested weights use dotted names (`tdm.phi1`,
/// `hcdfa.beta2`, `ot.epsilon`, ...).
pub fn apply_config_kv(cfg: &mut TrainConfig, key: &str, value: &str) -> Result<(), String> {
    let v = value.trim();
    let parse_f64 = || v.parse::<f64>().map_err(|e| format!("{key}: {e}"));
    let parse_usize = || v.parse::<usize>().map_err(|e| format!("{key}: {e}"));
    let parse_bool = || match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("{key}: expected boolean, got {v}")),
    };
    match key {
        "profile" => {
            cfg.profile = match v {
                "paper" => Profile::Paper,
                "toy" => Profile::Toy,
                _ => return Err(format!("profile: unknown value {v}")),
            }
        }
        "k_shot" => cfg.k_shot = parse_usize()?,
        "batch_size" => cfg.batch_size = parse_usize()?,
        "epochs" => cfg.epochs = parse_usize()?,
        "lr" => cfg.lr = parse_f64()?,
        "weight_decay" => cfg.weight_decay = parse_f64()?,
        "disc_lr" => cfg.disc_lr = parse_f64()?,
        "lambda_start" => cfg.lambda_start = parse_f64()?,
        "lambda_after" => cfg.lambda_after = parse_f64()?,
        "lambda_switch_epoch" => cfg.lambda_switch_epoch = parse_usize()?,
        "seed" => cfg.seed = v.parse::<u64>().map_err(|e| format!("seed: {e}"))?,
        "crop_size" => cfg.crop_size = parse_usize()?,
        "sigma" => cfg.sigma = v.parse::<f32>().map_err(|e| format!("sigma: {e}"))?,
        "grad_clip" => {
            cfg.grad_clip = if v == "none" { None } else { Some(parse_f64()?) }
        }
        "tdm.phi1" => cfg.tdm.phi1 = parse_f64()?,
        "tdm.phi2" => cfg.tdm.phi2 = parse_f64()?,
        "tdm.phi3" => cfg.tdm.phi3 = parse_f64()?,
        "hcdfa.beta1" => cfg.hcdfa.beta1 = parse_f64()?,
        "hcdfa.beta2" => cfg.hcdfa.beta2 = parse_f64()?,
        "ot.epsilon" => cfg.ot.epsilon = parse_f64()?,
        "ot.iterations" => cfg.ot.iterations = parse_usize()?,
        "ot.pool_factor" => cfg.ot.pool_factor = parse_usize()?,
        "use_hcdfa" => cfg.use_hcdfa = parse_bool()?,
        "use_adversarial" => cfg.use_adversarial = parse_bool()?,
        "use_cutmix" => cfg.use_cutmix = parse_bool()?,
        "l2_loss_only" => cfg.l2_loss_only = parse_bool()?,
        "source_only_baseline" => cfg.source_only_baseline = parse_bool()?,
        "dab_scales" => {
            let scales: Result<Vec<usize>, _> =
                v.split(',').map(|p| p.trim().parse::<usize>()).collect();
            cfg.dab_scales = scales.map_err(|e| format!("dab_scales: {e}"))?;
        }
        "bidirectional_cross" => cfg.bidirectional_cross = parse_bool()?,
        "checkpoint_every" => cfg.checkpoint_every = parse_usize()?,
        _ => return Err(format!("unknown config key: {key}")),
    }
    Ok(())
}

pub fn parse_config_file(cfg: &mut TrainConfig, path: &Path) -> Result<(), String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("{}:{}: expected key = value", path.display(), i + 1))?;
        apply_config_kv(cfg, key.trim(), value.trim())?;
    }
    Ok(())
}

/// Render the fully resolved config in the same flat format it is read from.
pub fn render_config(cfg: &TrainConfig) -> String {
    let profile = match cfg.profile {
        Profile::Paper => "paper",
        Profile::Toy => "toy",
    };
    let grad_clip = cfg
        .grad_clip
        .map(|v| v.to_string())
        .unwrap_or_else(|| "none".into());
    let dab_scales = cfg
        .dab_scales
        .iter()
        .map(|s| s.to_string())
        .collect::<Vec<_>>()
        .join(",");
    format!(
        "profile = {profile}\n\
         k_shot = {}\n\
         batch_size = {}\n\
         epochs = {}\n\
         lr = {}\n\
         weight_decay = {}\n\
         disc_lr = {}\n\
         lambda_start = {}\n\
         lambda_after = {}\n\
         lambda_switch_epoch = {}\n\
         seed = {}\n\
         crop_size = {}\n\
         sigma = {}\n\
         grad_clip = {grad_clip}\n\
         tdm.phi1 = {}\n\
         tdm.phi2 = {}\n\
         tdm.phi3 = {}\n\
         hcdfa.beta1 = {}\n\
         hcdfa.beta2 = {}\n\
         ot.epsilon = {}\n\
         ot.iterations = {}\n\
         ot.pool_factor = {}\n\
         use_hcdfa = {}\n\
         use_adversarial = {}\n\
         use_cutmix = {}\n\
         l2_loss_only = {}\n\
         source_only_baseline = {}\n\
         dab_scales = {dab_scales}\n\
         bidirectional_cross = {}\n\
         checkpoint_every = {}\n",
        cfg.k_shot,
        cfg.batch_size,
        cfg.epochs,
        cfg.lr,
        cfg.weight_decay,
        cfg.disc_lr,
        cfg.lambda_start,
        cfg.lambda_after,
        cfg.lambda_switch_epoch,
        cfg.seed,
        cfg.crop_size,
        cfg.sigma,
        cfg.tdm.phi1,
        cfg.tdm.phi2,
        cfg.tdm.phi3,
        cfg.hcdfa.beta1,
        cfg.hcdfa.beta2,
        cfg.ot.epsilon,
        cfg.ot.iterations,
        cfg.ot.pool_factor,
        cfg.use_hcdfa,
        cfg.use_adversarial,
        cfg.use_cutmix,
        cfg.l2_loss_only,
        cfg.source_only_baseline,
        cfg.bidirectional_cross,
        cfg.checkpoint_every,
    )
}

/// Named ablation presets over a base config.
pub fn ablation_preset(name: &str, base: &TrainConfig) -> Result<TrainConfig, String> {
    let mut cfg = base.clone();
    match name {
        "no-hcdfa" => cfg.use_hcdfa = false,
        "no-adv" => cfg.use_adversarial = false,
        "single-scale-dab" => cfg.dab_scales = vec![4],
        "bi-da" => cfg.bidirectional_cross = true,
        "l2-loss" => cfg.l2_loss_only = true,
        "k1" => cfg.k_shot = 1,
        "k5" => cfg.k_shot = 5,
        "k10" => cfg.k_shot = 10,
        _ => {
            if let Some(rest) = name.strip_prefix("beta-") {
                let parts: Vec<&str> = rest.split('-').collect();
                if parts.len() != 2 {
                    return Err(format!("bad beta preset: {name}"));
                }
                cfg.hcdfa.beta1 = parts[0].parse().map_err(|e| format!("{name}: {e}"))?;
                cfg.hcdfa.beta2 = parts[1].parse().map_err(|e| format!("{name}: {e}"))?;
            } else {
                return Err(format!("unknown ablation preset: {name}"));
            }
        }
    }
    Ok(cfg)
}

// ---- density map container ----

/// `DMAP0001` magic, u32 height, u32 width, then row-major f32 LE values.
pub fn save_density_map(path: &Path, density: &Array2<f32>) -> std::io::Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(DENSITY_MAGIC)?;
    let (h, wd) = density.dim();
    w.write_all(&(h as u32).to_le_bytes())?;
    w.write_all(&(wd as u32).to_le_bytes())?;
    for v in density.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()
}

pub fn load_density_map(path: &Path) -> std::io::Result<Array2<f32>> {
    use std::io::Read;
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != DENSITY_MAGIC {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            "bad density map magic",
        ));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let h = u32::from_le_bytes(b4) as usize;
    r.read_exact(&mut b4)?;
    let w = u32::from_le_bytes(b4) as usize;
    let mut data = Vec::with_capacity(h * w);
    for _ in 0..h * w {
        r.read_exact(&mut b4)?;
        data.push(f32::from_le_bytes(b4));
    }
    Ok(Array2::from_shape_vec((h, w), data).unwrap())
}

/// Jet-style rendering (blue = low, red = high) for human inspection.
pub fn save_density_viz(path: &Path, density: &Array2<f32>) -> Result<(), CliError> {
    let (h, w) = density.dim();
    let max = density.iter().cloned().fold(0.0f32, f32::max).max(1e-12);
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let t = (density[[y, x]] / max).clamp(0.0, 1.0);
            img.put_pixel(x as u32, y as u32, image::Rgb(jet(t)));
        }
    }
    img.save(path)
        .map_err(|e| CliError::Other(format!("write {}: {e}", path.display())))
}

fn jet(t: f32) -> [u8; 3] {
    let r = (1.5 - (4.0 * t - 3.0).abs()).clamp(0.0, 1.0);
    let g = (1.5 - (4.0 * t - 2.0).abs()).clamp(0.0, 1.0);
    let b = (1.5 - (4.0 * t - 1.0).abs()).clamp(0.0, 1.0);
    [(r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8]
}

// ---- subcommands ----

fn load_profile(path: Option<&Path>, fallback: DomainProfile) -> Result<DomainProfile, CliError> {
    match path {
        None => Ok(fallback),
        Some(p) => {
            require_exists(p)?;
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Other(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("profile {}: {e}", p.display())))
        }
    }
}

fn cmd_synth(a: SynthArgs, argv: &[String]) -> Result<(), CliError> {
    let out = a.out.clone().unwrap_or_else(|| default_out("synth", a.seed));
    write_manifest(&out, "synth", argv, None, a.seed)?;
    let src_profile = load_profile(a.source_profile.as_deref(), DomainProfile::source_default())?;
    let tgt_profile = load_profile(a.target_profile.as_deref(), DomainProfile::target_default())?;
    for (name, profile, tag, seed_off) in [
        ("source", &src_profile, DomainTag::Source, 0u64),
        ("target", &tgt_profile, DomainTag::Target, 1_000_000u64),
    ] {
        let root = out.join(name);
        let train = generate_synthetic_with_sigma(
            profile,
            a.n_train,
            a.size,
            a.seed + seed_off,
            a.sigma,
            tag,
        );
        let test = generate_synthetic_with_sigma(
            profile,
            a.n_test,
            a.size,
            a.seed + seed_off + 500_000,
            a.sigma,
            tag,
        );
        save_dataset(&train, &root, "train").map_err(|e| CliError::Other(e.to_string()))?;
        save_dataset(&test, &root, "test").map_err(|e| CliError::Other(e.to_string()))?;
        let manifest = serde_json::json!({
            "profile": profile,
            "n_train": a.n_train,
            "n_test": a.n_test,
            "size": a.size,
            "seed": a.seed + seed_off,
            "sigma": a.sigma,
        });
        let mpath = root.join("profile.json");
        std::fs::write(&mpath, serde_json::to_string_pretty(&manifest).unwrap())
            .map_err(|e| CliError::Other(format!("{}: {e}", mpath.display())))?;
    }
    println!(
        "wrote {} train / {} test samples per domain under {}",
        a.n_train,
        a.n_test,
        out.display()
    );
    Ok(())
}

fn resolve_train_config(
    config: Option<&Path>,
    sets: &[String],
    profile: Option<&str>,
    k_shot: Option<usize>,
    seed: Option<u64>,
    epochs: Option<usize>,
) -> Result<TrainConfig, CliError> {
    let mut cfg = TrainConfig::default();
    if let Some(p) = profile {
        // profile first so later keys override its defaults
        if p == "toy" {
            cfg = TrainConfig::toy(cfg.seed);
        } else if p != "paper" {
            return Err(CliError::Usage(format!("unknown profile {p}")));
        }
    }
    if let Some(path) = config {
        require_exists(path)?;
        parse_config_file(&mut cfg, path).map_err(CliError::Usage)?;
    }
    for kv in sets {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {kv}")))?;
        apply_config_kv(&mut cfg, k.trim(), v.trim()).map_err(CliError::Usage)?;
    }
    if let Some(k) = k_shot {
        cfg.k_shot = k;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    Ok(cfg)
}

fn run_training(
    cfg: &TrainConfig,
    source: &Path,
    target: &Path,
    out: &Path,
    resume: Option<&Path>,
) -> Result<(), CliError> {
    require_exists(source)?;
    require_exists(target)?;
    std::fs::write(out.join("config.resolved"), render_config(cfg))
        .map_err(|e| CliError::Other(format!("write config: {e}")))?;
    let sigma = cfg.sigma;
    let src = load_dataset(source, "train", sigma, DomainTag::Source)
        .map_err(|e| CliError::from(TrainError::Data(e)))?;
    let tgt = load_dataset(target, "train", sigma, DomainTag::Target)
        .map_err(|e| CliError::from(TrainError::Data(e)))?;
    let outcome = if let Some(ckpt) = resume {
        require_exists(ckpt)?;
        let (state, loaded_cfg) = load_checkpoint(ckpt)?;
        train_on_samples(&loaded_cfg, &src, &tgt, out, Some(state))?
    } else {
        train_on_samples(cfg, &src, &tgt, out, None)?
    };
    println!(
        "checkpoint: {}\nloss log: {}",
        outcome.checkpoint.display(),
        outcome.loss_log.display()
    );
    Ok(())
}

fn cmd_train(a: TrainArgs, argv: &[String]) -> Result<(), CliError> {
    let cfg = resolve_train_config(
        a.config.as_deref(),
        &a.sets,
        a.profile.as_deref(),
        a.k_shot,
        a.seed,
        a.epochs,
    )?;
    let out = a.out.clone().unwrap_or_else(|| default_out("train", cfg.seed));
    write_manifest(&out, "train", argv, a.config.as_deref(), cfg.seed)?;
    run_training(&cfg, &a.source, &a.target, &out, a.resume.as_deref())
}

fn cmd_ablate(a: AblateArgs, argv: &[String]) -> Result<(), CliError> {
    let mut base = resolve_train_config(a.config.as_deref(), &a.sets, None, None, a.seed, None)?;
    // ablations are desk-scale studies; default to the toy profile unless a
    // config said otherwise
    if a.config.is_none() && !a.sets.iter().any(|s| s.starts_with("profile")) {
        let seed = base.seed;
        base = TrainConfig::toy(seed);
        for kv in &a.sets {
            if let Some((k, v)) = kv.split_once('=') {
                apply_config_kv(&mut base, k.trim(), v.trim()).map_err(CliError::Usage)?;
            }
        }
    }
    let cfg = ablation_preset(&a.preset, &base).map_err(CliError::Usage)?;
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| default_out(&format!("ablate_{}", a.preset), cfg.seed));
    write_manifest(&out, "ablate", argv, a.config.as_deref(), cfg.seed)?;
    run_training(&cfg, &a.source, &a.target, &out, None)
}

fn cmd_eval(a: EvalArgs, argv: &[String]) -> Result<(), CliError> {
    require_exists(&a.checkpoint)?;
    require_exists(&a.data)?;
    let (state, cfg) = load_checkpoint(&a.checkpoint)?;
    let out = a.out.clone().unwrap_or_else(|| default_out("eval", cfg.seed));
    let out_path = if out.extension().is_some() {
        // treat --out with an extension as the report file itself
        if let Some(parent) = out.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)
                    .map_err(|e| CliError::Other(format!("create {}: {e}", parent.display())))?;
            }
        }
        out.clone()
    } else {
        write_manifest(&out, "eval", argv, None, cfg.seed)?;
        out.join("report.json")
    };
    let r2_variant = match a.r2_variant.as_str() {
        "standard" => R2Variant::Standard,
        "paper" => R2Variant::Paper,
        other => return Err(CliError::Usage(format!("unknown r2 variant {other}"))),
    };
    let eval_cfg = EvalConfig {
        match_radius: a.match_radius,
        peak_threshold: a.peak_threshold,
        peak_min_distance: a.peak_min_distance,
        r2_variant,
    };
    let samples = load_dataset(&a.data, &a.split, cfg.sigma, DomainTag::Target)
        .map_err(|e| CliError::from(TrainError::Data(e)))?;
    let report = evaluate_model(&state.model.enc, &state.model.dec, &samples, &eval_cfg)
        .map_err(|e| CliError::Other(e.to_string()))?;
    save_report(&report, &out_path).map_err(|e| CliError::Other(e.to_string()))?;
    println!(
        "n={} mae={:.4} rmse={:.4} r2={} precision={:.4} recall={:.4} f1={:.4}",
        report.n_images,
        report.mae,
        report.rmse,
        report
            .r2
            .map(|v| format!("{v:.4}"))
            .unwrap_or_else(|| "undefined".into()),
        report.precision,
        report.recall,
        report.f1
    );
    println!("report: {}", out_path.display());
    Ok(())
}

fn cmd_predict(a: PredictArgs, argv: &[String]) -> Result<(), CliError> {
    require_exists(&a.checkpoint)?;
    require_exists(&a.image)?;
    let (state, cfg) = load_checkpoint(&a.checkpoint)?;
    let out = a.out.clone().unwrap_or_else(|| {
        let dir = default_out("predict", cfg.seed);
        dir.join("density.dmp")
    });
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| CliError::Other(format!("create {}: {e}", parent.display())))?;
            write_manifest(parent, "predict", argv, None, cfg.seed)?;
        }
    }
    let img = image::open(&a.image)
        .map_err(|e| CliError::Other(format!("{}: {e}", a.image.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    // pad to a multiple of 32 for the encoder, crop the density back
    let ph = h.div_ceil(32) * 32;
    let pw = w.div_ceil(32) * 32;
    let mut arr = ndarray::Array3::<f32>::zeros((ph, pw, 3));
    for y in 0..h {
        for x in 0..w {
            let p = img.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                arr[[y, x, c]] = p[c] as f32 / 255.0;
            }
        }
    }
    let density = ndgrad::no_grad(|| -> Result<Array2<f32>, CliError> {
        let t = crate::trainer::image_tensor::<crate::F>(&arr);
        let pyr = crate::encoder::htfe_forward(&t, &state.model.enc);
        let d = crate::decoder::predict_density(&pyr, &state.model.dec, (ph, pw))
            .map_err(|e| CliError::Other(e.to_string()))?;
        let full = crate::eval::density_to_array(&d);
        Ok(full.slice(ndarray::s![0..h, 0..w]).to_owned())
    })?;
    save_density_map(&out, &density)
        .map_err(|e| CliError::Other(format!("{}: {e}", out.display())))?;
    if let Some(viz) = &a.viz {
        save_density_viz(viz, &density)?;
    }
    let count: f64 = density.iter().map(|&v| v as f64).sum();
    println!("{count:.6}");
    Ok(())
}
