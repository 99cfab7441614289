use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use priorseg_core::augmentation::{pathology_mixup, PairSampler, DEFAULT_FOREGROUND, DEFAULT_Z_TOLERANCE};
use priorseg_core::data_io::{
    generate_cohort, load_dataset, prepare_slices, split_dataset, write_dataset, write_label_slice, DatasetManifest,
    PhantomSpec, SliceKey, SliceSample,
};
use priorseg_core::evaluation::{evaluate, run_ablation, write_reports, AblationGrid, SlicePredictor};
use priorseg_core::model::{Checkpoint, Model, ModelConfig};
use priorseg_core::render::{write_overlay, write_triptych};
use priorseg_core::training::{self, checkpoint_run_info, TRAIN_LOG};
use priorseg_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{self, ConfigError, RunConfig};

/// A failure with its process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NumericalDivergence { .. } => 3,
            _ => 2,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        Self::usage(e.0)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::usage(e.to_string())
    }
}

type CliResult = Result<(), CliError>;

pub const DEVICE_VAR: &str = "PRIORSEG_DEVICE";

/// Only the CPU backend exists; anything else is refused up front.
pub fn check_device() -> CliResult {
    match std::env::var(DEVICE_VAR) {
        Ok(d) if !d.is_empty() && !d.eq_ignore_ascii_case("cpu") => Err(CliError::usage(format!(
            "{DEVICE_VAR}={d:?} is not supported; the only available device is \"cpu\""
        ))),
        _ => Ok(()),
    }
}

fn ensure_writable_dir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir).map_err(|e| CliError::usage(format!("cannot create {}: {e}", dir.display())))
}

fn load_slices(data: &Path) -> Result<Vec<SliceSample>, CliError> {
    if !data.exists() {
        return Err(CliError::usage(format!("data directory {} does not exist", data.display())));
    }
    let cases = load_dataset(data)?;
    Ok(prepare_slices(&cases)?)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    if !path.is_file() {
        return Err(CliError::usage(format!("checkpoint {} does not exist", path.display())));
    }
    Ok(Checkpoint::load(path)?)
}

pub fn synth(out: &Path, cases: usize, size: usize, seed: u64, slices: usize) -> CliResult {
    if cases < 1 {
        return Err(CliError::usage("cases must be ≥ 1"));
    }
    if slices < 1 {
        return Err(CliError::usage("slices must be ≥ 1"));
    }
    let spec = PhantomSpec {
        slices,
        ..PhantomSpec::for_size(size)
    };
    spec.validate()?;
    let depth = priorseg_core::model::ModelConfig::default().encoder_depth;
    if !size.is_multiple_of(1 << depth) {
        warn!(
            "size {size} is not divisible by 2^{depth} = {}; training with the default encoder depth will fail",
            1 << depth
        );
    }
    let records = generate_cohort(&spec, cases, seed)?;
    ensure_writable_dir(out)?;
    let files = write_dataset(out, &records)?;
    info!("wrote {} cases to {}", files.len(), out.display());
    Ok(())
}

pub fn preview_mixup(data: &Path, n: usize, out: &Path, seed: u64) -> CliResult {
    if n < 1 {
        return Err(CliError::usage("n must be ≥ 1"));
    }
    let slices = load_slices(data)?;
    let sampler = PairSampler::new(&slices, &DEFAULT_FOREGROUND);
    if sampler.num_eligible() < 2 {
        return Err(CliError::usage(format!(
            "a mixup pair needs two slices with foreground; the dataset has {}",
            sampler.num_eligible()
        )));
    }
    ensure_writable_dir(out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for k in 0..n {
        let (f, m) = sampler.sample(DEFAULT_Z_TOLERANCE, &mut rng)?;
        let lambda: f64 = rng.random();
        let (fixed, moving) = (&slices[f], &slices[m]);
        let mix = pathology_mixup(fixed, moving, lambda)?;
        let path = out.join(format!("mixup_{k:03}_lambda_{lambda:.3}.png"));
        write_triptych(&path, moving.image.view(), fixed.image.view(), mix.image.view(), lambda)?;
        info!(
            "{}: moving {}:{} fixed {}:{}",
            path.display(),
            moving.case_id,
            moving.z_index,
            fixed.case_id,
            fixed.z_index
        );
    }
    Ok(())
}

fn split_for(cfg: &RunConfig, slices: &[SliceSample]) -> Result<DatasetManifest, CliError> {
    Ok(split_dataset(slices, cfg.split_fraction, cfg.split_seed())?)
}

pub fn train(
    config_path: &Path,
    resume: Option<&Path>,
    seed: Option<u64>,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
) -> CliResult {
    let mut cfg = config::load(config_path)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if let Some(d) = data {
        cfg.data_root = Some(d);
    }
    if let Some(o) = out {
        cfg.out_dir = o;
    }
    let root = cfg
        .data_root
        .clone()
        .ok_or_else(|| CliError::usage("no dataset given: set data.root or pass --data"))?;
    let resume = resume.map(load_checkpoint).transpose()?;
    if let Some(ck) = &resume {
        if ck.model.config != cfg.train.model {
            return Err(Error::ConfigMismatch(model_diff(&ck.model.config, &cfg.train.model)).into());
        }
    }
    let slices = load_slices(&root)?;
    let manifest = split_for(&cfg, &slices)?;
    info!(
        "training on {} slices, validating on {}",
        manifest.train.len(),
        manifest.validation.len()
    );
    let outcome = training::train(&cfg.train, &slices, &manifest, Some(&cfg.out_dir), resume)?;
    info!(
        "done: best epoch {:?}, log {}",
        outcome.best_epoch.map(|e| e + 1),
        cfg.out_dir.join(TRAIN_LOG).display()
    );
    Ok(())
}

/// `model.<field>: checkpoint X, config Y` for every differing field.
fn model_diff(ckpt: &ModelConfig, cfg: &ModelConfig) -> String {
    let (a, b) = match (serde_json::to_value(ckpt), serde_json::to_value(cfg)) {
        (Ok(serde_json::Value::Object(a)), Ok(serde_json::Value::Object(b))) => (a, b),
        _ => return "model configurations differ".into(),
    };
    let diffs: Vec<String> = a
        .iter()
        .filter(|(k, v)| b.get(*k) != Some(*v))
        .map(|(k, v)| format!("model.{k}: checkpoint {v}, config {}", b.get(k).cloned().unwrap_or_default()))
        .collect();
    diffs.join("; ")
}

fn keys_of(slices: &[SliceSample]) -> Vec<SliceKey> {
    slices
        .iter()
        .map(|s| SliceKey {
            case_id: s.case_id.clone(),
            z_index: s.z_index,
        })
        .collect()
}

fn variant_name(ckpt: &Path) -> String {
    ckpt.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into())
}

pub fn eval(ckpt_path: &Path, data: &Path, out: &Path, all: bool, overlays: bool) -> CliResult {
    let ckpt = load_checkpoint(ckpt_path)?;
    let slices = load_slices(data)?;
    let selected: Vec<&SliceSample> = if all {
        slices.iter().collect()
    } else {
        let (_, split) = checkpoint_run_info(&ckpt).map_err(|e| {
            CliError::usage(format!("{e}; pass --all to evaluate every slice"))
        })?;
        if split.samples != keys_of(&slices) {
            return Err(CliError::usage(
                "the dataset does not match the split recorded in the checkpoint; pass --all to evaluate every slice",
            ));
        }
        split.validation_samples(&slices)
    };
    let report = evaluate(&ckpt.model, &selected, &variant_name(ckpt_path))?;
    ensure_writable_dir(out)?;
    write_reports(out, std::slice::from_ref(&report))?;
    if overlays {
        for s in &selected {
            let pred = ckpt.model.predict(s)?;
            let p = out.join(format!("{}_z{}_overlay.png", s.case_id, s.z_index));
            write_overlay(&p, s.image.view(), pred.view(), Some(s.labels.view()))?;
        }
    }
    for c in &report.classes {
        info!("{}: {} (n={})", c.name, c.cell(), c.n_slices);
    }
    Ok(())
}

pub fn predict(ckpt_path: &Path, data: &Path, out: &Path) -> CliResult {
    let ckpt = load_checkpoint(ckpt_path)?;
    let slices = load_slices(data)?;
    for s in &slices {
        ckpt.model.config.check_input(s.image.nrows(), s.image.ncols())?;
    }
    ensure_writable_dir(out)?;
    let model: &Model = &ckpt.model;
    for s in &slices {
        let pred = model.predict(s)?;
        let stem = format!("{}_z{}", s.case_id, s.z_index);
        write_label_slice(pred.view(), &out.join(format!("{stem}_pred.nii.gz")))?;
        write_overlay(
            &out.join(format!("{stem}_overlay.png")),
            s.image.view(),
            pred.view(),
            Some(s.labels.view()),
        )?;
    }
    info!("wrote predictions for {} slices to {}", slices.len(), out.display());
    Ok(())
}

pub fn ablation(
    data: &Path,
    out: &Path,
    config_path: Option<&Path>,
    variants: Option<Vec<String>>,
    epochs: Option<usize>,
    seed: Option<u64>,
) -> CliResult {
    let mut cfg = match config_path {
        Some(p) => config::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    cfg.train.validate()?;
    let grid = match variants {
        Some(v) => AblationGrid::default().select(&v)?,
        None => AblationGrid::default(),
    };
    let slices = load_slices(data)?;
    let manifest = split_for(&cfg, &slices)?;
    ensure_writable_dir(out)?;
    let outcome = run_ablation(&grid, &slices, &manifest, &cfg.train, Some(out))?;
    print!("{}", outcome.table);
    let failed: Vec<&str> = outcome
        .results
        .iter()
        .filter(|r| r.error.is_some())
        .map(|r| r.variant.name.as_str())
        .collect();
    if !failed.is_empty() {
        return Err(CliError::usage(format!("variants failed: {}", failed.join(", "))));
    }
    Ok(())
}
