//! Flat `key = value` experiment configuration.
//!
//! ```text
//! # comments start with '#'
//! dataset = synthetic            # or a directory holding manifest.csv
//! archs = CNN, CustomViT
//! flag_limits = 256, 1024
//! CNN.epochs = 20                # per-architecture override
//! ```

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::archzoo::{ArchKind, ArchOverrides};
use crate::error::{Error, Result};
use crate::metrics::{TIMING_RUNS, TIMING_WARMUP};
use crate::perturb::{BlurScheme, SIGMA_GRID};
use crate::synth::{SynthConfig, DEFAULT_NATIVE};
use crate::trainer::{ProbeConfig, TrainConfig};

pub const FLAG_LIMIT_GRID: [usize; 7] = [256, 512, 1024, 2048, 4096, 8192, 16384];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    Directory(PathBuf),
    Synthetic {
        classes: usize,
        per_class: usize,
        native_size: usize,
        difficulty: f64,
        seed: u64,
    },
}

impl DatasetSource {
    pub fn synth_config(&self) -> Option<SynthConfig> {
        match *self {
            DatasetSource::Synthetic {
                classes,
                per_class,
                native_size,
                difficulty,
                seed,
            } => Some(SynthConfig {
                counts: vec![per_class; classes],
                native_size,
                difficulty,
                seed,
            }),
            DatasetSource::Directory(_) => None,
        }
    }
}

/// Per-architecture training and model overrides.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ArchSettings {
    pub lr: Option<f64>,
    pub weight_decay: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub patience: Option<usize>,
    pub micro_batch: Option<usize>,
    pub stop_at_val_accuracy: Option<f64>,
    pub model: ArchOverrides,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub archs: Vec<ArchKind>,
    pub flag_limits: Vec<usize>,
    pub sigmas: Vec<f64>,
    pub schemes: Vec<BlurScheme>,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub train_fraction: f64,
    pub split_seed: u64,
    pub augment: bool,
    pub train: TrainConfig,
    pub per_arch: BTreeMap<ArchKind, ArchSettings>,
    /// Blur strength shown in the robustness bar chart.
    pub plot_sigma: f64,
    pub timing_warmup: usize,
    pub timing_runs: usize,
    pub probe: ProbeConfig,
    /// Precomputed feature table for `linprobe`; otherwise features are
    /// extracted from trained checkpoints.
    pub features: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSource::Synthetic {
                classes: 16,
                per_class: 300,
                native_size: DEFAULT_NATIVE,
                difficulty: 0.3,
                seed: 7,
            },
            archs: ArchKind::ALL.to_vec(),
            flag_limits: vec![256],
            sigmas: SIGMA_GRID.to_vec(),
            schemes: vec![BlurScheme::Pre, BlurScheme::Post],
            seeds: vec![42],
            output_dir: PathBuf::from("runs"),
            train_fraction: 0.8,
            split_seed: 42,
            augment: true,
            train: TrainConfig::default(),
            per_arch: BTreeMap::new(),
            plot_sigma: 1.6,
            timing_warmup: TIMING_WARMUP,
            timing_runs: TIMING_RUNS,
            probe: ProbeConfig::default(),
            features: None,
        }
    }
}

fn err(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("line {line}: {msg}"))
}

fn parse_one<V: FromStr>(line: usize, key: &str, v: &str) -> Result<V> {
    v.trim()
        .parse()
        .map_err(|_| err(line, format!("cannot parse `{v}` for `{key}`")))
}

fn parse_list<V: FromStr>(line: usize, key: &str, v: &str) -> Result<Vec<V>> {
    let items: Vec<&str> = v.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if items.is_empty() {
        return Err(err(line, format!("`{key}` needs at least one value")));
    }
    items.into_iter().map(|s| parse_one(line, key, s)).collect()
}

fn parse_bool(line: usize, key: &str, v: &str) -> Result<bool> {
    match v.trim().to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(err(line, format!("`{key}` expects true or false, got `{v}`"))),
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeMap::new();
        let mut synth: Option<DatasetSource> = None;
        let mut dataset_dir: Option<PathBuf> = None;
        let (mut classes, mut per_class, mut native, mut difficulty, mut synth_seed) = (16, 300, DEFAULT_NATIVE, 0.3, 7);
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| err(line, format!("expected `key = value`, got `{content}`")))?;
            let (key, value) = (key.trim(), value.trim());
            if let Some(prev) = seen.insert(key.to_string(), line) {
                return Err(err(line, format!("`{key}` already set on line {prev}")));
            }
            if let Some((arch, sub)) = key.split_once('.').filter(|(a, _)| *a != "synthetic") {
                let arch: ArchKind = arch.parse().map_err(|_| err(line, format!("unknown architecture `{arch}`")))?;
                let s = cfg.per_arch.entry(arch).or_default();
                set_arch_key(s, line, sub, value)?;
                continue;
            }
            match key {
                "dataset" => {
                    if value.eq_ignore_ascii_case("synthetic") {
                        synth = Some(cfg.dataset.clone());
                    } else {
                        dataset_dir = Some(PathBuf::from(value));
                    }
                }
                "synthetic.classes" => classes = parse_one(line, key, value)?,
                "synthetic.per_class" => per_class = parse_one(line, key, value)?,
                "synthetic.native_size" => native = parse_one(line, key, value)?,
                "synthetic.difficulty" => difficulty = parse_one(line, key, value)?,
                "synthetic.seed" => synth_seed = parse_one(line, key, value)?,
                "archs" => cfg.archs = parse_list(line, key, value)?,
                "flag_limits" => cfg.flag_limits = parse_list(line, key, value)?,
                "sigmas" => cfg.sigmas = parse_list(line, key, value)?,
                "schemes" => cfg.schemes = parse_list(line, key, value)?,
                "seeds" => cfg.seeds = parse_list(line, key, value)?,
                "output_dir" => cfg.output_dir = PathBuf::from(value),
                "train_fraction" => cfg.train_fraction = parse_one(line, key, value)?,
                "split_seed" => cfg.split_seed = parse_one(line, key, value)?,
                "augment" => cfg.augment = parse_bool(line, key, value)?,
                "lr" => cfg.train.lr = Some(parse_one(line, key, value)?),
                "weight_decay" => cfg.train.weight_decay = Some(parse_one(line, key, value)?),
                "epochs" => cfg.train.epochs = Some(parse_one(line, key, value)?),
                "batch_size" => cfg.train.batch_size = parse_one(line, key, value)?,
                "patience" => cfg.train.patience = parse_one(line, key, value)?,
                "micro_batch" => cfg.train.micro_batch = Some(parse_one(line, key, value)?),
                "stop_at_val_accuracy" => cfg.train.stop_at_val_accuracy = Some(parse_one(line, key, value)?),
                "shuffle" => cfg.train.shuffle = parse_bool(line, key, value)?,
                "plot_sigma" => cfg.plot_sigma = parse_one(line, key, value)?,
                "timing_warmup" => cfg.timing_warmup = parse_one(line, key, value)?,
                "timing_runs" => cfg.timing_runs = parse_one(line, key, value)?,
                "probe.lr" => cfg.probe.lr = parse_one(line, key, value)?,
                "probe.batch_size" => cfg.probe.batch_size = parse_one(line, key, value)?,
                "probe.epochs" => cfg.probe.epochs = parse_one(line, key, value)?,
                "probe.seed" => cfg.probe.seed = parse_one(line, key, value)?,
                "features" => cfg.features = Some(PathBuf::from(value)),
                _ => return Err(err(line, format!("unknown key `{key}`"))),
            }
        }
        cfg.dataset = match (dataset_dir, synth) {
            (Some(d), None) => DatasetSource::Directory(d),
            _ => DatasetSource::Synthetic {
                classes,
                per_class,
                native_size: native,
                difficulty,
                seed: synth_seed,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.archs.is_empty() {
            return bad("no architectures selected".into());
        }
        if self.flag_limits.is_empty() || self.flag_limits.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("flag_limits must be non-empty and strictly ascending, got {:?}", self.flag_limits));
        }
        if self.flag_limits.contains(&0) {
            return bad("flag limits must be positive".into());
        }
        if self.sigmas.iter().any(|s| !(*s >= 0.0)) {
            return bad(format!("sigmas must be >= 0, got {:?}", self.sigmas));
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad(format!("train_fraction must be in (0, 1), got {}", self.train_fraction));
        }
        if self.timing_runs == 0 {
            return bad("timing_runs must be >= 1".into());
        }
        for &arch in &self.archs {
            self.train_config(arch, self.seeds[0]).resolve(arch)?;
        }
        Ok(())
    }

    /// Global training settings with the architecture's overrides applied.
    pub fn train_config(&self, arch: ArchKind, seed: u64) -> TrainConfig {
        let mut t = self.train.clone();
        t.seed = seed;
        if let Some(s) = self.per_arch.get(&arch) {
            t.lr = s.lr.or(t.lr);
            t.weight_decay = s.weight_decay.or(t.weight_decay);
            t.epochs = s.epochs.or(t.epochs);
            t.batch_size = s.batch_size.unwrap_or(t.batch_size);
            t.patience = s.patience.unwrap_or(t.patience);
            t.micro_batch = s.micro_batch.or(t.micro_batch);
            t.stop_at_val_accuracy = s.stop_at_val_accuracy.or(t.stop_at_val_accuracy);
        }
        t
    }

    pub fn model_overrides(&self, arch: ArchKind) -> ArchOverrides {
        self.per_arch.get(&arch).map(|s| s.model.clone()).unwrap_or_default()
    }
}

fn set_arch_key(s: &mut ArchSettings, line: usize, key: &str, v: &str) -> Result<()> {
    let m = &mut s.model;
    match key {
        "lr" => s.lr = Some(parse_one(line, key, v)?),
        "weight_decay" => s.weight_decay = Some(parse_one(line, key, v)?),
        "epochs" => s.epochs = Some(parse_one(line, key, v)?),
        "batch_size" => s.batch_size = Some(parse_one(line, key, v)?),
        "patience" => s.patience = Some(parse_one(line, key, v)?),
        "micro_batch" => s.micro_batch = Some(parse_one(line, key, v)?),
        "stop_at_val_accuracy" => s.stop_at_val_accuracy = Some(parse_one(line, key, v)?),
        "input_dropout" => m.input_dropout = Some(parse_one(line, key, v)?),
        "hidden_dropout" => m.hidden_dropout = Some(parse_one(line, key, v)?),
        "conv_dropout" => m.conv_dropout = Some(parse_one(line, key, v)?),
        "se_dropout" => m.se_dropout = Some(parse_one(line, key, v)?),
        "drop_path" => m.drop_path = Some(parse_one(line, key, v)?),
        "vit_dropout" => m.vit_dropout = Some(parse_one(line, key, v)?),
        "vit_depth" => m.vit_depth = Some(parse_one(line, key, v)?),
        _ => return Err(err(line, format!("unknown per-architecture key `{key}`"))),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_lists_overrides_and_comments() {
        let cfg = ExperimentConfig::parse(
            "# sweep\narchs = CNN, CustomViT\nflag_limits = 256, 1024 # two cells\n\
             sigmas = 0, 0.4\nschemes = post\nCNN.epochs = 3\nCustomViT.vit_depth = 2\naugment = false\n\
             synthetic.classes = 4\n",
        )
        .unwrap();
        assert_eq!(cfg.archs, vec![ArchKind::Cnn, ArchKind::CustomViT]);
        assert_eq!(cfg.flag_limits, vec![256, 1024]);
        assert_eq!(cfg.schemes, vec![BlurScheme::Post]);
        assert_eq!(cfg.train_config(ArchKind::Cnn, 1).epochs, Some(3));
        assert_eq!(cfg.train_config(ArchKind::CustomViT, 1).epochs, None);
        assert_eq!(cfg.model_overrides(ArchKind::CustomViT).vit_depth, Some(2));
        assert!(!cfg.augment);
        assert!(matches!(cfg.dataset, DatasetSource::Synthetic { classes: 4, .. }));
    }

    #[test]
    fn rejects_bad_input_with_line_numbers() {
        let e = ExperimentConfig::parse("archs = CNN\nbogus = 1\n").unwrap_err();
        assert!(e.to_string().contains("line 2"), "{e}");
        assert!(ExperimentConfig::parse("flag_limits = 1024, 256").is_err());
        assert!(ExperimentConfig::parse("archs = Transformer").is_err());
        assert!(ExperimentConfig::parse("epochs = 3\nepochs = 4").is_err());
        assert!(ExperimentConfig::parse("Foo.lr = 0.1").is_err());
        assert!(ExperimentConfig::parse("batch_size = 0").is_err());
        assert!(ExperimentConfig::parse("no equals sign").is_err());
    }

    #[test]
    fn directory_dataset() {
        let cfg = ExperimentConfig::parse("dataset = /data/patches").unwrap();
        assert_eq!(cfg.dataset, DatasetSource::Directory("/data/patches".into()));
    }
}
