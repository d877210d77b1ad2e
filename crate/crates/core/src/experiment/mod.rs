//! Experiment orchestration: dataset preparation, sweep cells, run
//! manifests and report files. The command-line tool is a thin shell over
//! [`Runner`].

mod commands;
pub mod config;
pub mod svg;

pub use commands::{ScalingRow, TimingRow};
pub use config::{ArchSettings, DatasetSource, ExperimentConfig, FLAG_LIMIT_GRID};

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::archzoo::ArchKind;
use crate::datapipe::{augment, augmented_len, class_balanced_sample, load_dataset, stratified_split, Dataset, SamplingConfig};
use crate::error::{Error, Result};
use crate::synth;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
/// Caps the number of worker threads regardless of `--jobs`.
pub const THREADS_ENV: &str = "MICROPATCH_THREADS";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Generate,
    Prepare,
    Train,
    Eval,
    Linprobe,
    Robustness,
    Scaling,
    Timing,
    Report,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Generate => "generate",
            Command::Prepare => "prepare",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Linprobe => "linprobe",
            Command::Robustness => "robustness",
            Command::Scaling => "scaling",
            Command::Timing => "timing",
            Command::Report => "report",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellStatus {
    Ok,
    Failed,
    /// Training stopped on a numerical failure.
    Aborted,
}

impl CellStatus {
    pub fn name(self) -> &'static str {
        match self {
            CellStatus::Ok => "ok",
            CellStatus::Failed => "failed",
            CellStatus::Aborted => "aborted",
        }
    }

    fn of(e: &Error) -> Self {
        match e {
            Error::Training { .. } => CellStatus::Aborted,
            _ => CellStatus::Failed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub name: String,
    pub status: CellStatus,
    pub detail: Option<String>,
}

/// Fixed choices that affect numbers but are not configurable.
pub fn design_decisions() -> BTreeMap<String, String> {
    [
        ("blur", "separable truncated Gaussian, radius ceil(3 sigma), replicate edges, mean of both pass orders"),
        ("resize", "Catmull-Rom bicubic (a = -0.5), kernel widened when downsampling"),
        ("robustness_quantization", "blurred inputs stay in floating point"),
        ("whitening", "training-split mean image, applied to clean and blurred inputs"),
        ("loss", "mean softmax cross-entropy, one Adam step per batch"),
        ("best_epoch", "highest validation accuracy, earliest on ties"),
        ("probe_init", "Xavier-uniform weights, zero bias"),
        ("checkpoint_precision", "f32"),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect()
}

/// Everything needed to re-run a command, plus what it produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: Command,
    pub version: String,
    pub config: ExperimentConfig,
    pub seeds: Vec<u64>,
    pub decisions: BTreeMap<String, String>,
    pub started_unix: f64,
    pub finished_unix: Option<f64>,
    /// `source`, `fl{limit}/train`, `fl{limit}/val` to content hashes.
    pub dataset_hashes: BTreeMap<String, String>,
    pub cells: Vec<CellRecord>,
    /// Relative to the output directory.
    pub outputs: Vec<PathBuf>,
    /// Output columns that vary between identical runs.
    pub nondeterministic: Vec<String>,
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

/// Result of one command: the final manifest and how many cells failed.
#[derive(Debug)]
pub struct RunOutcome {
    pub manifest: RunManifest,
    pub failed: usize,
}

impl RunOutcome {
    /// 0 on success, 1 when some cells failed.
    pub fn exit_code(&self) -> i32 {
        i32::from(self.failed > 0)
    }
}

/// One sampled, split and (optionally) augmented dataset.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub flag_limit: usize,
    pub sampled: Dataset,
    pub train: Dataset,
    pub val: Dataset,
}

/// Sizes predicted from per-class counts alone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpectedSizes {
    pub classes: usize,
    pub sampled: usize,
    pub train_originals: usize,
    pub train: usize,
    pub val: usize,
}

/// `sampled = sum min(n_c, L)` over classes with `n_c >= ceil(0.05 L)`,
/// `train_c = clamp(floor(f m_c), 1, m_c - 1)`, and augmentation multiplies
/// the training originals by `4 * 2.4`.
pub fn expected_sizes(counts: &BTreeMap<String, usize>, flag_limit: usize, train_fraction: f64, augmented: bool) -> ExpectedSizes {
    let min = (flag_limit * 5).div_ceil(100);
    let kept: Vec<usize> = counts.values().filter(|&&n| n >= min).map(|&n| n.min(flag_limit)).collect();
    let sampled = kept.iter().sum();
    let train_originals: usize = kept
        .iter()
        .map(|&m| ((m as f64 * train_fraction + 1e-9).floor() as usize).clamp(1, m.saturating_sub(1).max(1)))
        .sum();
    ExpectedSizes {
        classes: kept.len(),
        sampled,
        train_originals,
        train: if augmented { augmented_len(train_originals) } else { train_originals },
        val: sampled - train_originals,
    }
}

fn with_context(e: Error, ctx: &str) -> Error {
    match e {
        Error::Sampling(m) => Error::Sampling(format!("{ctx}: {m}")),
        Error::Data(m) => Error::Data(format!("{ctx}: {m}")),
        Error::Config(m) => Error::Config(format!("{ctx}: {m}")),
        other => other,
    }
}

/// Sweep cell: one model trained on one prepared dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub arch: ArchKind,
    pub flag_limit: usize,
    pub seed: u64,
}

impl Cell {
    pub fn name(&self) -> String {
        format!("{}_fl{}_s{}", self.arch.name(), self.flag_limit, self.seed)
    }
}

/// Runs `f` over `items` on up to `jobs` threads; results keep input order.
pub fn run_parallel<I: Sync, R: Send>(jobs: usize, items: &[I], f: impl Fn(&I) -> R + Sync) -> Vec<R> {
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(item) = items.get(i) else { break };
                let r = f(item);
                slots.lock().expect("no worker panicked")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect()
}

/// `requested` capped by `MICROPATCH_THREADS` when that is set.
pub fn effective_jobs(requested: usize) -> usize {
    let cap = std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok());
    match cap {
        Some(c) if c > 0 => requested.min(c).max(1),
        _ => requested.max(1),
    }
}

/// Executes commands for one configuration.
pub struct Runner {
    pub cfg: ExperimentConfig,
    pub jobs: usize,
    source: Mutex<Option<Dataset>>,
    prepared: Mutex<BTreeMap<usize, Prepared>>,
}

impl Runner {
    pub fn new(cfg: ExperimentConfig, jobs: usize) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            jobs: effective_jobs(jobs),
            source: Mutex::new(None),
            prepared: Mutex::new(BTreeMap::new()),
        })
    }

    pub fn out(&self) -> &Path {
        &self.cfg.output_dir
    }

    pub fn cells(&self) -> Vec<Cell> {
        let mut v = Vec::new();
        for &arch in &self.cfg.archs {
            for &flag_limit in &self.cfg.flag_limits {
                for &seed in &self.cfg.seeds {
                    v.push(Cell { arch, flag_limit, seed });
                }
            }
        }
        v
    }

    pub fn checkpoint_path(&self, cell: &Cell) -> PathBuf {
        self.out().join("models").join(format!("{}.ckpt", cell.name()))
    }

    /// The full dataset before sampling, loaded once.
    pub fn source(&self) -> Result<Dataset> {
        let mut slot = self.source.lock().expect("lock");
        if let Some(ds) = slot.as_ref() {
            return Ok(ds.clone());
        }
        let ds = match &self.cfg.dataset {
            DatasetSource::Directory(dir) => load_dataset(dir).map_err(|e| with_context(e, &format!("loading {}", dir.display())))?,
            s @ DatasetSource::Synthetic { .. } => synth::generate(&s.synth_config().expect("synthetic source"))?,
        };
        if ds.is_empty() {
            return Err(Error::Data("dataset is empty".into()));
        }
        *slot = Some(ds.clone());
        Ok(ds)
    }

    /// Sample, split and augment for one flag limit; cached per runner.
    pub fn prepare(&self, flag_limit: usize) -> Result<Prepared> {
        if let Some(p) = self.prepared.lock().expect("lock").get(&flag_limit) {
            return Ok(p.clone());
        }
        let ctx = format!("flag limit {flag_limit}");
        let source = self.source()?;
        let seed = self.cfg.split_seed;
        let sampled = class_balanced_sample(&source, &SamplingConfig::new(flag_limit, seed)?).map_err(|e| with_context(e, &ctx))?;
        let (train, val) = stratified_split(&sampled, self.cfg.train_fraction, seed).map_err(|e| with_context(e, &ctx))?;
        let train = if self.cfg.augment { augment(&train, seed)? } else { train };
        let expected = expected_sizes(&source.counts(), flag_limit, self.cfg.train_fraction, self.cfg.augment);
        log::info!(
            "{ctx}: {} classes, {} sampled, {} train originals -> {} train{}, {} val",
            expected.classes,
            expected.sampled,
            expected.train_originals,
            expected.train,
            if self.cfg.augment { " (x4 x2.4)" } else { "" },
            expected.val
        );
        if (expected.sampled, expected.train, expected.val) != (sampled.len(), train.len(), val.len()) {
            return Err(Error::Data(format!(
                "{ctx}: prepared sizes ({}, {}, {}) differ from the closed form {expected:?}",
                sampled.len(),
                train.len(),
                val.len()
            )));
        }
        let p = Prepared {
            flag_limit,
            sampled,
            train,
            val,
        };
        self.prepared.lock().expect("lock").insert(flag_limit, p.clone());
        Ok(p)
    }

    fn manifest(&self, command: Command) -> RunManifest {
        RunManifest {
            command,
            version: VERSION.to_string(),
            config: self.cfg.clone(),
            seeds: self.cfg.seeds.clone(),
            decisions: design_decisions(),
            started_unix: now(),
            finished_unix: None,
            dataset_hashes: BTreeMap::new(),
            cells: Vec::new(),
            outputs: Vec::new(),
            nondeterministic: Vec::new(),
        }
    }

    fn write_manifest(&self, m: &RunManifest) -> Result<()> {
        let path = self.out().join("manifests").join(format!("{}.json", m.command.name()));
        write_file(&path, serde_json::to_string_pretty(m).expect("manifest serializes"))
    }

    fn record_hashes(&self, m: &mut RunManifest) {
        if let Some(s) = self.source.lock().expect("lock").as_ref() {
            m.dataset_hashes.insert("source".into(), s.content_hash());
        }
        for (l, p) in self.prepared.lock().expect("lock").iter() {
            m.dataset_hashes.insert(format!("fl{l}/train"), p.train.content_hash());
            m.dataset_hashes.insert(format!("fl{l}/val"), p.val.content_hash());
        }
    }

    /// Writes the manifest, runs the command, then rewrites the manifest
    /// with hashes, cell outcomes and outputs.
    pub fn run(&self, command: Command) -> Result<RunOutcome> {
        let mut m = self.manifest(command);
        self.write_manifest(&m)?;
        let result = match command {
            Command::Generate => self.cmd_generate(&mut m),
            Command::Prepare => self.cmd_prepare(&mut m),
            Command::Train => self.cmd_train(&mut m).map(|_| ()),
            Command::Eval => self.cmd_eval(&mut m),
            Command::Linprobe => self.cmd_linprobe(&mut m),
            Command::Robustness => self.cmd_robustness(&mut m).map(|_| ()),
            Command::Scaling => self.cmd_scaling(&mut m).map(|_| ()),
            Command::Timing => self.cmd_timing(&mut m).map(|_| ()),
            Command::Report => self.cmd_report(&mut m),
        };
        self.record_hashes(&mut m);
        m.finished_unix = Some(now());
        self.write_manifest(&m)?;
        result?;
        let failed = m.cells.iter().filter(|c| c.status != CellStatus::Ok).count();
        Ok(RunOutcome { manifest: m, failed })
    }

    /// Like [`Runner::run`] for `scaling`, also returning the rows.
    pub fn run_scaling(&self) -> Result<(RunOutcome, Vec<ScalingRow>)> {
        let mut m = self.manifest(Command::Scaling);
        self.write_manifest(&m)?;
        let result = self.cmd_scaling(&mut m);
        self.record_hashes(&mut m);
        m.finished_unix = Some(now());
        self.write_manifest(&m)?;
        let rows = result?;
        let failed = m.cells.iter().filter(|c| c.status != CellStatus::Ok).count();
        Ok((RunOutcome { manifest: m, failed }, rows))
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) => fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        None => Ok(()),
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_sizes() {
        let counts: BTreeMap<String, usize> = [("a", 300), ("b", 100), ("c", 12), ("d", 13)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        // min = 13 at limit 256: c is dropped, a is capped.
        let e = expected_sizes(&counts, 256, 0.8, true);
        assert_eq!(e.classes, 3);
        assert_eq!(e.sampled, 256 + 100 + 13);
        assert_eq!(e.train_originals, 204 + 80 + 10);
        // 20 + 30 + 50 + 20 + 20 percent extra colour copies, each times four.
        let extra: usize = [20, 30, 50, 20, 20].iter().map(|p| 294 * p / 100).sum();
        assert_eq!(e.train, 4 * (294 + extra));
        assert_eq!(e.val, 369 - 294);
    }

    #[test]
    fn parallel_keeps_order() {
        let items: Vec<usize> = (0..17).collect();
        assert_eq!(run_parallel(4, &items, |&i| i * i), items.iter().map(|i| i * i).collect::<Vec<_>>());
        assert_eq!(run_parallel(1, &items, |&i| i + 1)[16], 17);
    }

    #[test]
    fn cell_names() {
        let c = Cell {
            arch: ArchKind::CustomViT,
            flag_limit: 4096,
            seed: 3,
        };
        assert_eq!(c.name(), "CustomViT_fl4096_s3");
    }
}
