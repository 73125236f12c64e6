//! Flat key=value config files, flag/file/default resolution, and
//! self-describing run records.
//!
//! Precedence: explicit command-line flags override config-file values,
//! which override built-in defaults. The fully resolved configuration plus
//! a content hash of the input manifests is written to the run directory so
//! any run can be reproduced from its record alone.

use std::collections::BTreeMap;
use std::path::Path;

use kdseg::dataset::{DataError, Manifest};
use kdseg::losses::LossWeights;
use kdseg::trainer::{default_drop_epochs, TrainConfig};

/// Key=value lines; `#` starts a comment.
pub fn parse_kv_file(path: &Path) -> Result<BTreeMap<String, String>, DataError> {
    let text = std::fs::read_to_string(path)?;
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(DataError::Format(format!(
                "{}:{}: expected key=value, got {:?}",
                path.display(),
                lineno + 1,
                raw
            )));
        };
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

/// Optional overrides for every TrainConfig field, from flags or a file.
#[derive(Debug, Clone, Default)]
pub struct TrainOverrides {
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub lr_initial: Option<f64>,
    pub lr_drop_epochs: Option<Vec<usize>>,
    pub lr_drop_factor: Option<f64>,
    pub momentum: Option<f64>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub lambda: Option<f64>,
    pub threshold: Option<f64>,
    pub seed: Option<u64>,
    pub augment: Option<bool>,
    /// Zero disables clipping.
    pub grad_clip_norm: Option<f64>,
}

fn parse<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<Option<T>, DataError> {
    match map.get(key) {
        None => Ok(None),
        Some(raw) => raw.parse::<T>().map(Some).map_err(|_| {
            DataError::Format(format!("config key {} has unparsable value {:?}", key, raw))
        }),
    }
}

fn parse_list(map: &BTreeMap<String, String>, key: &str) -> Result<Option<Vec<usize>>, DataError> {
    match map.get(key) {
        None => Ok(None),
        Some(raw) if raw.trim().is_empty() => Ok(Some(Vec::new())),
        Some(raw) => raw
            .split(',')
            .map(|v| {
                v.trim().parse::<usize>().map_err(|_| {
                    DataError::Format(format!("config key {} has unparsable value {:?}", key, raw))
                })
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Some),
    }
}

impl TrainOverrides {
    pub fn from_file(path: &Path) -> Result<Self, DataError> {
        let map = parse_kv_file(path)?;
        Ok(TrainOverrides {
            batch_size: parse(&map, "batch_size")?,
            epochs: parse(&map, "epochs")?,
            lr_initial: parse(&map, "lr_initial")?,
            lr_drop_epochs: parse_list(&map, "lr_drop_epochs")?,
            lr_drop_factor: parse(&map, "lr_drop_factor")?,
            momentum: parse(&map, "momentum")?,
            alpha: parse(&map, "alpha")?,
            beta: parse(&map, "beta")?,
            lambda: parse(&map, "lambda")?,
            threshold: parse(&map, "threshold")?,
            seed: parse(&map, "seed")?,
            augment: parse(&map, "augment")?,
            grad_clip_norm: parse(&map, "grad_clip_norm")?,
        })
    }

    /// Later overrides win field by field.
    pub fn layered(base: Self, top: Self) -> Self {
        TrainOverrides {
            batch_size: top.batch_size.or(base.batch_size),
            epochs: top.epochs.or(base.epochs),
            lr_initial: top.lr_initial.or(base.lr_initial),
            lr_drop_epochs: top.lr_drop_epochs.or(base.lr_drop_epochs),
            lr_drop_factor: top.lr_drop_factor.or(base.lr_drop_factor),
            momentum: top.momentum.or(base.momentum),
            alpha: top.alpha.or(base.alpha),
            beta: top.beta.or(base.beta),
            lambda: top.lambda.or(base.lambda),
            threshold: top.threshold.or(base.threshold),
            seed: top.seed.or(base.seed),
            augment: top.augment.or(base.augment),
            grad_clip_norm: top.grad_clip_norm.or(base.grad_clip_norm),
        }
    }

    /// Apply on top of the built-in defaults. If epochs changed but the drop
    /// schedule did not, the schedule rescales to the new run length.
    pub fn resolve(&self, augment_size: usize) -> TrainConfig {
        let defaults = TrainConfig::default();
        let epochs = self.epochs.unwrap_or(defaults.epochs);
        let lr_drop_epochs = match &self.lr_drop_epochs {
            Some(drops) => drops.clone(),
            None if epochs == defaults.epochs => defaults.lr_drop_epochs.clone(),
            None => default_drop_epochs(epochs),
        };
        TrainConfig {
            batch_size: self.batch_size.unwrap_or(defaults.batch_size),
            epochs,
            lr_initial: self.lr_initial.unwrap_or(defaults.lr_initial),
            lr_drop_epochs,
            lr_drop_factor: self.lr_drop_factor.unwrap_or(defaults.lr_drop_factor),
            momentum: self.momentum.unwrap_or(defaults.momentum),
            weights: LossWeights {
                alpha: self.alpha.unwrap_or(defaults.weights.alpha),
                beta: self.beta.unwrap_or(defaults.weights.beta),
                lambda: self.lambda.unwrap_or(defaults.weights.lambda),
            },
            pseudo_threshold: self.threshold.unwrap_or(defaults.pseudo_threshold),
            seed: self.seed.unwrap_or(defaults.seed),
            augment: match self.augment.unwrap_or(false) {
                true => Some(kdseg::dataset::AugmentConfig::for_size(augment_size)),
                false => None,
            },
            grad_clip_norm: match self.grad_clip_norm {
                None => defaults.grad_clip_norm,
                Some(v) if v == 0.0 => None,
                Some(v) => Some(v),
            },
        }
    }
}

/// FNV-1a over a byte stream.
#[derive(Debug, Clone, Copy)]
pub struct Fnv64(u64);

impl Default for Fnv64 {
    fn default() -> Self {
        Fnv64(0xCBF2_9CE4_8422_2325)
    }
}

impl Fnv64 {
    pub fn update(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01B3);
        }
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

/// Content hash over a manifest file and every file it references.
pub fn hash_manifest_contents(manifest_path: &Path) -> Result<u64, DataError> {
    let mut hash = Fnv64::default();
    hash.update(&std::fs::read(manifest_path)?);
    let manifest = Manifest::load(manifest_path)?;
    for i in 0..manifest.len() {
        hash.update(&std::fs::read(manifest.image_path(i))?);
        if let Some(label) = manifest.label_path(i) {
            hash.update(&std::fs::read(label)?);
        }
    }
    Ok(hash.finish())
}

/// Write the resolved run record as sorted key=value lines.
pub fn write_run_record(
    out_dir: &Path,
    entries: &[(&str, String)],
) -> Result<(), DataError> {
    let mut text = String::new();
    for (key, value) in entries {
        text.push_str(key);
        text.push('=');
        text.push_str(value);
        text.push('\n');
    }
    std::fs::write(out_dir.join("run_record.txt"), text)?;
    Ok(())
}

pub fn train_config_record(cfg: &TrainConfig) -> Vec<(&'static str, String)> {
    vec![
        ("batch_size", cfg.batch_size.to_string()),
        ("epochs", cfg.epochs.to_string()),
        ("lr_initial", cfg.lr_initial.to_string()),
        (
            "lr_drop_epochs",
            cfg.lr_drop_epochs
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(","),
        ),
        ("lr_drop_factor", cfg.lr_drop_factor.to_string()),
        ("momentum", cfg.momentum.to_string()),
        ("alpha", cfg.weights.alpha.to_string()),
        ("beta", cfg.weights.beta.to_string()),
        ("lambda", cfg.weights.lambda.to_string()),
        ("threshold", cfg.pseudo_threshold.to_string()),
        ("seed", cfg.seed.to_string()),
        ("augment", cfg.augment.is_some().to_string()),
        (
            "grad_clip_norm",
            cfg.grad_clip_norm.map_or("0".into(), |v| v.to_string()),
        ),
    ]
}
