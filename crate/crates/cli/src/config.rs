//! Strict `key = value` run-configuration files.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use priorseg_core::training::TrainConfig;

/// Everything a run needs besides the command-line flags.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data_root: Option<PathBuf>,
    pub split_fraction: f64,
    /// Defaults to `train.seed` when unset.
    pub split_seed: Option<u64>,
    pub out_dir: PathBuf,
    pub train: TrainConfig,
    pub eval_all: bool,
    pub eval_overlays: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data_root: None,
            split_fraction: 0.9,
            split_seed: None,
            out_dir: PathBuf::from("runs/train"),
            train: TrainConfig::default(),
            eval_all: false,
            eval_overlays: false,
        }
    }
}

impl RunConfig {
    pub fn split_seed(&self) -> u64 {
        self.split_seed.unwrap_or(self.train.seed)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

/// Every accepted key with its default and a short description.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("data.root", "", "dataset directory (EMIDEC layout or manifest.json)"),
    ("data.split_fraction", "0.9", "fraction of slices used for training"),
    ("data.split_seed", "", "seed of the train/validation split (default: train.seed)"),
    ("train.batch_size", "16", "mini-batch size"),
    ("train.epochs", "400", "number of epochs"),
    ("train.lr_start", "1e-2", "learning rate of the first epoch"),
    ("train.lr_end", "1e-6", "learning rate of the last epoch (log-linear decay)"),
    ("train.mixup_probability", "0.5", "probability that a sample is pathology-mixed"),
    ("train.z_tolerance", "0.25", "max normalized slice-position gap of a mixup pair"),
    ("train.seed", "0", "seed of initialization, shuffling and augmentation"),
    ("train.checkpoint_every", "10", "write ckpt_epoch_<k> every this many epochs"),
    ("train.out_dir", "runs/train", "output directory for logs and checkpoints"),
    ("model.encoder_depth", "4", "number of down-sampling levels"),
    ("model.base_channels", "32", "channels of the first level (doubled per level)"),
    ("model.use_attention", "true", "wrap every U-net block with an attention gate"),
    ("model.use_dense_blocks", "true", "densely connect the convolutions of each block"),
    ("model.attention_hidden_channels", "", "attention hidden width (default: half the block width)"),
    ("model.weight_channels", "8", "width of the weight generator's first convolution"),
    ("loss.use_awce", "true", "use generated class weights (else uniform weights)"),
    ("loss.use_penalty", "true", "add the neighbourhood penalty"),
    ("loss.coeff_np", "0.01", "coefficient of the neighbourhood penalty"),
    ("loss.epsilon", "1e-3", "penalty switch-off margin"),
    ("loss.tau", "0.05", "penalty support threshold"),
    ("eval.all", "false", "evaluate every slice instead of the validation split"),
    ("eval.overlays", "false", "write contour overlay PNGs during evaluation"),
];

/// Commented template listing every key with its default.
pub fn template() -> String {
    let mut s = String::from("# priorseg run configuration: `key = value`, `#` starts a comment.\n");
    s.push_str("# Unknown keys are rejected.\n\n");
    let mut section = "";
    for (key, default, help) in KEYS {
        let sec = key.split('.').next().unwrap_or("");
        if sec != section {
            if !section.is_empty() {
                s.push('\n');
            }
            section = sec;
        }
        s.push_str(&format!("# {help}\n"));
        if default.is_empty() {
            s.push_str(&format!("# {key} =\n"));
        } else {
            s.push_str(&format!("{key} = {default}\n"));
        }
    }
    s
}

fn parse_value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>()
        .map_err(|e| ConfigError(format!("invalid value {v:?} for key \"{key}\": {e}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool, ConfigError> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(ConfigError(format!(
            "invalid value {v:?} for key \"{key}\": expected true or false"
        ))),
    }
}

fn apply(cfg: &mut RunConfig, key: &str, v: &str, base: &Path) -> Result<(), ConfigError> {
    let t = &mut cfg.train;
    match key {
        "data.root" => {
            let p = PathBuf::from(v);
            cfg.data_root = Some(if p.is_relative() { base.join(p) } else { p });
        }
        "data.split_fraction" => cfg.split_fraction = parse_value(key, v)?,
        "data.split_seed" => cfg.split_seed = Some(parse_value(key, v)?),
        "train.batch_size" => t.batch_size = parse_value(key, v)?,
        "train.epochs" => t.epochs = parse_value(key, v)?,
        "train.lr_start" => t.lr_start = parse_value(key, v)?,
        "train.lr_end" => t.lr_end = parse_value(key, v)?,
        "train.mixup_probability" => t.mixup_probability = parse_value(key, v)?,
        "train.z_tolerance" => t.z_tolerance = parse_value(key, v)?,
        "train.seed" => t.seed = parse_value(key, v)?,
        "train.checkpoint_every" => t.checkpoint_every = parse_value(key, v)?,
        "train.out_dir" => {
            let p = PathBuf::from(v);
            cfg.out_dir = if p.is_relative() { base.join(p) } else { p };
        }
        "model.encoder_depth" => t.model.encoder_depth = parse_value(key, v)?,
        "model.base_channels" => t.model.base_channels = parse_value(key, v)?,
        "model.use_attention" => t.model.use_attention = parse_bool(key, v)?,
        "model.use_dense_blocks" => t.model.use_dense_blocks = parse_bool(key, v)?,
        "model.attention_hidden_channels" => t.model.attention_hidden_channels = Some(parse_value(key, v)?),
        "model.weight_channels" => t.model.weight_channels = parse_value(key, v)?,
        "loss.use_awce" => t.use_awce = parse_bool(key, v)?,
        "loss.use_penalty" => t.use_penalty = parse_bool(key, v)?,
        "loss.coeff_np" => t.coeff_np = parse_value(key, v)?,
        "loss.epsilon" => t.penalty.epsilon = parse_value(key, v)?,
        "loss.tau" => t.penalty.tau = parse_value(key, v)?,
        "eval.all" => cfg.eval_all = parse_bool(key, v)?,
        "eval.overlays" => cfg.eval_overlays = parse_bool(key, v)?,
        _ => return Err(ConfigError(format!("unknown key \"{key}\""))),
    }
    Ok(())
}

/// Parses a configuration; relative paths resolve against `base`.
pub fn parse(text: &str, base: &Path) -> Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig::default();
    let mut seen = HashSet::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| ConfigError(format!("line {}: expected `key = value`, got {line:?}", n + 1)))?;
        let key = key.trim();
        let value = value.trim().trim_matches('"');
        if key.is_empty() {
            return Err(ConfigError(format!("line {}: missing key", n + 1)));
        }
        if !KEYS.iter().any(|(k, _, _)| *k == key) {
            return Err(ConfigError(format!("unknown key \"{key}\" (line {})", n + 1)));
        }
        if !seen.insert(key.to_string()) {
            return Err(ConfigError(format!("duplicate key \"{key}\" (line {})", n + 1)));
        }
        apply(&mut cfg, key, value, base)?;
    }
    if !(cfg.split_fraction > 0.0 && cfg.split_fraction < 1.0) {
        return Err(ConfigError(format!(
            "invalid value for key \"data.split_fraction\": {} must lie in (0, 1)",
            cfg.split_fraction
        )));
    }
    cfg.train
        .validate()
        .map_err(|e| ConfigError(format!("invalid configuration: {e}")))?;
    Ok(cfg)
}

pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
    parse(&text, path.parent().unwrap_or(Path::new(".")))
}
