use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{ensure_parent, run_parallel, svg, write_file, Cell, CellRecord, CellStatus, DatasetSource, Prepared, RunManifest, Runner};
use crate::archzoo::{ArchKind, Model, ModelSpec};
use crate::checkpoint::{model_container, model_from_container, Container};
use crate::datapipe::save_dataset;
use crate::error::{Error, Result};
use crate::metrics::{time_inference, MetricsReport, TimingReport, REPORT_CSV_HEADER};
use crate::params::ParamKind;
use crate::perturb::{robustness_sweep, RobustnessReport, ROBUSTNESS_CSV_HEADER};
use crate::tensor::Tensor;
use crate::trainer::{evaluate, linear_probe, train, FeatureTable, TensorData, TrainHistory};

/// Checkpoint tensor holding the whitening mean image.
pub const MEAN_TENSOR: &str = "whiten.mean";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub arch: ArchKind,
    pub flag_limit: usize,
    pub seed: u64,
    pub accuracy: Option<f64>,
    pub macro_f1: Option<f64>,
    pub best_epoch: Option<usize>,
    pub status: CellStatus,
}

pub const SCALING_CSV_HEADER: &str = "arch,flag_limit,seed,accuracy,macro_f1,best_epoch,status";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub arch: ArchKind,
    pub params: usize,
    pub model_size_bytes: usize,
    pub timing: TimingReport,
}

pub const TIMING_CSV_HEADER: &str = "arch,mean_ms,median_ms,std_ms,params,model_size_bytes";

struct Trained {
    history: TrainHistory,
    val: MetricsReport,
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| format!("{v:.6}"))
}

impl Runner {
    fn emit(&self, m: &mut RunManifest, rel: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        write_file(&self.out().join(rel), contents)?;
        m.outputs.push(PathBuf::from(rel));
        Ok(())
    }

    fn record(m: &mut RunManifest, name: String, r: std::result::Result<(), &Error>) {
        let (status, detail) = match r {
            Ok(()) => (CellStatus::Ok, None),
            Err(e) => {
                log::error!("{name}: {e}");
                (CellStatus::of(e), Some(e.to_string()))
            }
        };
        m.cells.push(CellRecord { name, status, detail });
    }

    pub(super) fn cmd_generate(&self, m: &mut RunManifest) -> Result<()> {
        let DatasetSource::Synthetic { .. } = self.cfg.dataset else {
            return Err(Error::Config("`generate` needs `dataset = synthetic`".into()));
        };
        let ds = self.source()?;
        save_dataset(&ds, &self.out().join("dataset"))?;
        m.outputs.push("dataset".into());
        log::info!("wrote {} synthetic patches", ds.len());
        Ok(())
    }

    pub(super) fn cmd_prepare(&self, m: &mut RunManifest) -> Result<()> {
        for &limit in &self.cfg.flag_limits {
            let p = self.prepare(limit)?;
            for (part, ds) in [("train", &p.train), ("val", &p.val)] {
                let rel = format!("data/fl{limit}/{part}");
                let dir = self.out().join(&rel);
                if dir.exists() {
                    fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                }
                save_dataset(ds, &dir)?;
                m.outputs.push(rel.into());
            }
            Self::record(m, format!("fl{limit}"), Ok(()));
        }
        Ok(())
    }

    fn train_one(&self, cell: &Cell, p: &Prepared) -> Result<Trained> {
        let spec = ModelSpec {
            overrides: self.cfg.model_overrides(cell.arch),
            ..ModelSpec::new(cell.arch, p.sampled.num_classes(), cell.seed)
        };
        let mut model = Model::<f32>::build(spec)?;
        let size = model.spec().input_size;
        let tr = TensorData::<f32>::from_dataset(&p.train, size)?;
        let va = TensorData::<f32>::from_dataset(&p.val, size)?;
        log::info!("{}: training on {} samples, validating on {}", cell.name(), tr.len(), va.len());
        let out = train(&mut model, &tr, &va, &self.cfg.train_config(cell.arch, cell.seed))?;
        let val = evaluate(&model, &va, &out.mean)?;
        let mut c = model_container(&model);
        c.manifest.meta = json!({
            "cell": cell,
            "train_hash": p.train.content_hash(),
            "val_hash": p.val.content_hash(),
            "class_names": p.sampled.class_names(),
            "train": out.resolved,
            "history": out.history,
        });
        c.push(MEAN_TENSOR, ParamKind::Buffer, out.mean);
        write_file(&self.checkpoint_path(cell), c.to_bytes())?;
        Ok(Trained {
            history: out.history,
            val,
        })
    }

    /// Trains every cell, once per distinct (arch, seed, data) combination;
    /// repeats reuse the first result, which training determinism makes
    /// identical to retraining.
    fn train_cells(&self, cells: &[Cell], m: &mut RunManifest) -> Vec<Result<Trained>> {
        let mut prepared: BTreeMap<usize, std::result::Result<Prepared, String>> = BTreeMap::new();
        for c in cells {
            prepared.entry(c.flag_limit).or_insert_with(|| self.prepare(c.flag_limit).map_err(|e| e.to_string()));
        }
        let key = |c: &Cell| {
            prepared[&c.flag_limit]
                .as_ref()
                .ok()
                .map(|p| (c.arch, c.seed, p.train.content_hash(), p.val.content_hash()))
        };
        let mut first: BTreeMap<_, usize> = BTreeMap::new();
        let mut unique = Vec::new();
        let mut source = Vec::with_capacity(cells.len());
        for (i, c) in cells.iter().enumerate() {
            match key(c) {
                Some(k) => {
                    let j = *first.entry(k).or_insert_with(|| {
                        unique.push(i);
                        i
                    });
                    source.push(j);
                }
                None => source.push(i),
            }
        }
        let results: Vec<Result<Trained>> = run_parallel(self.jobs, &unique, |&i| {
            let c = &cells[i];
            self.train_one(c, prepared[&c.flag_limit].as_ref().expect("unique cells have data"))
        });
        let by_index: BTreeMap<usize, &Result<Trained>> = unique.iter().copied().zip(&results).collect();
        let mut out = Vec::with_capacity(cells.len());
        for (i, c) in cells.iter().enumerate() {
            let r = match (&prepared[&c.flag_limit], by_index.get(&source[i])) {
                (Err(e), _) => Err(Error::Data(e.clone())),
                (Ok(_), Some(Ok(t))) => {
                    let copy = Trained {
                        history: t.history.clone(),
                        val: t.val.clone(),
                    };
                    if source[i] == i {
                        Ok(copy)
                    } else {
                        log::info!("{}: same data as {}, reusing its result", c.name(), cells[source[i]].name());
                        let to = self.checkpoint_path(c);
                        fs::copy(self.checkpoint_path(&cells[source[i]]), &to)
                            .map_err(|e| Error::io(&to, e))
                            .map(|_| copy)
                    }
                }
                (Ok(_), Some(Err(e))) => Err(match e {
                    Error::Training { epoch, batch, detail } => Error::Training {
                        epoch: *epoch,
                        batch: *batch,
                        detail: detail.clone(),
                    },
                    e if source[i] == i => Error::Data(e.to_string()),
                    e => Error::Data(format!("same data as {}: {e}", cells[source[i]].name())),
                }),
                (Ok(_), None) => unreachable!("every cell maps to a trained cell"),
            };
            Self::record(m, c.name(), r.as_ref().map(|_| ()));
            if r.is_ok() {
                m.outputs.push(PathBuf::from(format!("models/{}.ckpt", c.name())));
            }
            out.push(r);
        }
        out
    }

    pub(super) fn cmd_train(&self, m: &mut RunManifest) -> Result<()> {
        let cells = self.cells();
        let results = self.train_cells(&cells, m);
        let mut csv = String::from("cell,epochs_run,best_epoch,val_accuracy,val_macro_f1\n");
        for (c, r) in cells.iter().zip(&results) {
            if let Ok(t) = r {
                let _ = writeln!(
                    csv,
                    "{},{},{},{:.6},{:.6}",
                    c.name(),
                    t.history.epochs.len(),
                    t.history.best_epoch,
                    t.val.accuracy,
                    t.val.macro_f1
                );
            }
        }
        self.emit(m, "training.csv", csv)
    }

    /// Trained model, whitening mean and the cell's data.
    fn load_cell(&self, cell: &Cell) -> Result<(Model<f32>, Tensor<f32>, Prepared)> {
        let path = self.checkpoint_path(cell);
        if !path.exists() {
            return Err(Error::Data(format!(
                "no checkpoint for model cell {} at {}; run `train` first",
                cell.name(),
                path.display()
            )));
        }
        let c = Container::load(&path)?;
        let model = model_from_container::<f32>(&c)?;
        let mean = c
            .get(MEAN_TENSOR)
            .cloned()
            .ok_or_else(|| Error::Data(format!("checkpoint for {} has no `{MEAN_TENSOR}`", cell.name())))?;
        let p = self.prepare(cell.flag_limit)?;
        let stored = c.manifest.meta.get("val_hash").and_then(|v| v.as_str());
        if stored.is_some_and(|h| h != p.val.content_hash()) {
            return Err(Error::Data(format!(
                "model cell {} was trained on different data than the current config produces",
                cell.name()
            )));
        }
        Ok((model, mean, p))
    }

    pub(super) fn cmd_eval(&self, m: &mut RunManifest) -> Result<()> {
        let cells = self.cells();
        let results = run_parallel(self.jobs, &cells, |c| {
            let (model, mean, p) = self.load_cell(c)?;
            let va = TensorData::<f32>::from_dataset(&p.val, model.spec().input_size)?;
            evaluate(&model, &va, &mean)
        });
        let mut csv = format!("{REPORT_CSV_HEADER}\n");
        let mut js = Vec::new();
        for (c, r) in cells.iter().zip(&results) {
            Self::record(m, c.name(), r.as_ref().map(|_| ()));
            if let Ok(rep) = r {
                csv.push_str(&rep.csv_row(&c.name(), "val"));
                csv.push('\n');
                js.push(json!({ "cell": c.name(), "arch": c.arch, "flag_limit": c.flag_limit, "seed": c.seed, "report": rep }));
            }
        }
        self.emit(m, "metrics.csv", csv)?;
        self.emit(m, "metrics.json", serde_json::to_string_pretty(&js).expect("serializes"))
    }

    pub(super) fn cmd_linprobe(&self, m: &mut RunManifest) -> Result<()> {
        let mut csv = format!("{REPORT_CSV_HEADER}\n");
        let mut js = Vec::new();
        let mut push = |name: &str, dim: usize, params: usize, rep: &MetricsReport| {
            csv.push_str(&rep.csv_row(name, "linear_probe"));
            csv.push('\n');
            js.push(json!({ "model": name, "feature_dim": dim, "head_params": params, "report": rep }));
        };
        if let Some(path) = &self.cfg.features {
            let table = FeatureTable::load(path)?;
            let (head, rep) = linear_probe(&table, table.num_classes(), &self.cfg.probe)?;
            let name = path.file_stem().map_or("features".into(), |s| s.to_string_lossy().into_owned());
            push(&name, table.dim(), head.param_count(), &rep);
            Self::record(m, name, Ok(()));
        } else {
            let cells = self.cells();
            let results = run_parallel(self.jobs, &cells, |c| -> Result<(FeatureTable, usize, usize, MetricsReport)> {
                let (model, mean, p) = self.load_cell(c)?;
                let data = TensorData::<f32>::from_dataset(&p.sampled, model.spec().input_size)?;
                let table = FeatureTable::extract(&model, &data, &mean)?;
                let (head, rep) = linear_probe(&table, model.num_classes(), &self.cfg.probe)?;
                Ok((table.clone(), table.dim(), head.param_count(), rep))
            });
            for (c, r) in cells.iter().zip(&results) {
                Self::record(m, c.name(), r.as_ref().map(|_| ()));
                if let Ok((table, dim, params, rep)) = r {
                    let rel = format!("features/{}.feat", c.name());
                    let path = self.out().join(&rel);
                    ensure_parent(&path)?;
                    table.save(&path)?;
                    m.outputs.push(rel.into());
                    push(&c.name(), *dim, *params, rep);
                }
            }
        }
        self.emit(m, "linprobe.csv", csv)?;
        self.emit(m, "linprobe.json", serde_json::to_string_pretty(&js).expect("serializes"))
    }

    pub(super) fn cmd_robustness(&self, m: &mut RunManifest) -> Result<Vec<RobustnessReport>> {
        let cells = self.cells();
        let results = run_parallel(self.jobs, &cells, |c| {
            let (model, mean, p) = self.load_cell(c)?;
            robustness_sweep(&c.name(), &model, &p.val, &mean, &self.cfg.sigmas, &self.cfg.schemes)
        });
        let mut reports = Vec::new();
        for (c, r) in cells.iter().zip(results) {
            Self::record(m, c.name(), r.as_ref().map(|_| ()));
            if let Ok(rep) = r {
                reports.push(rep);
            }
        }
        let mut csv = format!("{ROBUSTNESS_CSV_HEADER}\n");
        for r in &reports {
            for row in r.csv_rows() {
                csv.push_str(&row);
                csv.push('\n');
            }
        }
        self.emit(m, "robustness.csv", csv)?;
        let slopes: Vec<_> = reports.iter().map(RobustnessReport::slopes_json).collect();
        self.emit(m, "robustness_slopes.json", serde_json::to_string_pretty(&slopes).expect("serializes"))?;

        // Bars at the requested sigma, or the strongest one in the grid.
        let sigma = if self.cfg.sigmas.contains(&self.cfg.plot_sigma) {
            self.cfg.plot_sigma
        } else {
            self.cfg.sigmas.iter().copied().fold(0.0, f64::max)
        };
        let mut names = vec!["clean".to_string()];
        names.extend(self.cfg.schemes.iter().map(|s| s.name().to_string()));
        let groups: Vec<(String, Vec<f64>)> = reports
            .iter()
            .map(|r| {
                let mut v = vec![r.clean().macro_f1];
                v.extend(
                    self.cfg
                        .schemes
                        .iter()
                        .map(|&s| r.row(s, sigma).map_or(r.clean().macro_f1, |row| row.macro_f1)),
                );
                (r.model.clone(), v)
            })
            .collect();
        let title = format!("Macro-F1 under Gaussian blur (sigma = {sigma})");
        self.emit(m, "robustness_bars.svg", svg::bar_chart(&title, "macro-F1", &names, &groups))?;

        let scheme_names: Vec<String> = self.cfg.schemes.iter().map(|s| s.name().to_string()).collect();
        let slope_groups: Vec<(String, Vec<f64>)> = reports
            .iter()
            .map(|r| {
                let v = self
                    .cfg
                    .schemes
                    .iter()
                    .map(|s| r.slopes.get(s.name()).and_then(|x| x.macro_f1).unwrap_or(0.0))
                    .collect();
                (r.model.clone(), v)
            })
            .collect();
        self.emit(
            m,
            "robustness_slopes.svg",
            svg::bar_chart("Macro-F1 drop slope vs log2(1 + sigma)", "slope", &scheme_names, &slope_groups),
        )?;
        Ok(reports)
    }

    pub(super) fn cmd_scaling(&self, m: &mut RunManifest) -> Result<Vec<ScalingRow>> {
        let cells = self.cells();
        let results = self.train_cells(&cells, m);
        let rows: Vec<ScalingRow> = cells
            .iter()
            .zip(&results)
            .map(|(c, r)| match r {
                Ok(t) => ScalingRow {
                    arch: c.arch,
                    flag_limit: c.flag_limit,
                    seed: c.seed,
                    accuracy: Some(t.val.accuracy),
                    macro_f1: Some(t.val.macro_f1),
                    best_epoch: Some(t.history.best_epoch),
                    status: CellStatus::Ok,
                },
                Err(e) => ScalingRow {
                    arch: c.arch,
                    flag_limit: c.flag_limit,
                    seed: c.seed,
                    accuracy: None,
                    macro_f1: None,
                    best_epoch: None,
                    status: CellStatus::of(e),
                },
            })
            .collect();
        let mut csv = format!("{SCALING_CSV_HEADER}\n");
        for r in &rows {
            let _ = writeln!(
                csv,
                "{},{},{},{},{},{},{}",
                r.arch.name(),
                r.flag_limit,
                r.seed,
                opt(r.accuracy),
                opt(r.macro_f1),
                r.best_epoch.map_or(String::new(), |e| e.to_string()),
                r.status.name()
            );
        }
        self.emit(m, "scaling.csv", csv)?;
        let series: Vec<(String, Vec<(f64, f64)>)> = self
            .cfg
            .archs
            .iter()
            .map(|&a| {
                let pts = self
                    .cfg
                    .flag_limits
                    .iter()
                    .filter_map(|&l| {
                        let f1: Vec<f64> = rows
                            .iter()
                            .filter(|r| r.arch == a && r.flag_limit == l)
                            .filter_map(|r| r.macro_f1)
                            .collect();
                        (!f1.is_empty()).then(|| ((l as f64).log2(), f1.iter().sum::<f64>() / f1.len() as f64))
                    })
                    .collect();
                (a.name().to_string(), pts)
            })
            .collect();
        self.emit(
            m,
            "scaling.svg",
            svg::line_chart("Macro-F1 vs training set size", "log2(flag limit)", "macro-F1", &series),
        )?;
        Ok(rows)
    }

    fn num_classes(&self) -> Result<usize> {
        match self.cfg.dataset {
            DatasetSource::Synthetic { classes, .. } => Ok(classes),
            DatasetSource::Directory(_) => Ok(self.source()?.num_classes()),
        }
    }

    /// Always sequential so runs do not compete for the CPU.
    pub(super) fn cmd_timing(&self, m: &mut RunManifest) -> Result<Vec<TimingRow>> {
        let classes = self.num_classes()?;
        let mut rows = Vec::new();
        for &arch in &self.cfg.archs {
            let spec = ModelSpec {
                overrides: self.cfg.model_overrides(arch),
                ..ModelSpec::new(arch, classes, self.cfg.seeds[0])
            };
            let r = Model::<f32>::build(spec).map_err(Error::from).and_then(|model| {
                let timing = time_inference(&model, self.cfg.timing_warmup, self.cfg.timing_runs)?;
                log::info!("{}: median {:.3} ms", arch.name(), timing.median_ms);
                Ok(TimingRow {
                    arch,
                    params: model.param_count(),
                    model_size_bytes: model_container(&model).to_bytes().len(),
                    timing,
                })
            });
            Self::record(m, arch.name().to_string(), r.as_ref().map(|_| ()));
            if let Ok(row) = r {
                rows.push(row);
            }
        }
        let mut csv = format!("{TIMING_CSV_HEADER}\n");
        for r in &rows {
            let _ = writeln!(
                csv,
                "{},{:.4},{:.4},{:.4},{},{}",
                r.arch.name(),
                r.timing.mean_ms,
                r.timing.median_ms,
                r.timing.std_ms,
                r.params,
                r.model_size_bytes
            );
        }
        self.emit(m, "timing.csv", csv)?;
        self.emit(m, "timing_runs.json", serde_json::to_string_pretty(&rows).expect("serializes"))?;
        m.nondeterministic = ["timing.csv:mean_ms", "timing.csv:median_ms", "timing.csv:std_ms", "timing_runs.json"]
            .map(String::from)
            .to_vec();
        Ok(rows)
    }

    pub(super) fn cmd_report(&self, m: &mut RunManifest) -> Result<()> {
        let mut md = String::from("# Experiment report\n\n");
        let _ = writeln!(md, "Output directory: `{}`\n", self.out().display());
        let sections = [
            ("Classification", "metrics.csv", None),
            ("Linear probing", "linprobe.csv", None),
            ("Scaling", "scaling.csv", Some("scaling.svg")),
            ("Blur robustness", "robustness.csv", Some("robustness_bars.svg")),
            ("Inference timing", "timing.csv", None),
        ];
        let mut any = false;
        for (title, file, plot) in sections {
            let path = self.out().join(file);
            let Ok(text) = fs::read_to_string(&path) else { continue };
            any = true;
            let _ = writeln!(md, "## {title}\n");
            md.push_str(&markdown_table(&text));
            if let Some(p) = plot.filter(|p| self.out().join(p).exists()) {
                let _ = writeln!(md, "\n![{title}]({p})");
            }
            if file == "robustness.csv" && self.out().join("robustness_slopes.svg").exists() {
                md.push_str("\n![Drop slopes](robustness_slopes.svg)\n");
            }
            md.push('\n');
        }
        if !any {
            return Err(Error::Data(format!("no result files in {}", self.out().display())));
        }
        md.push_str(&manifest_summary(&self.out().join("manifests")));
        self.emit(m, "report.md", md)
    }
}

fn markdown_table(csv: &str) -> String {
    let mut lines = csv.lines().filter(|l| !l.trim().is_empty());
    let Some(header) = lines.next() else { return String::new() };
    let cols = header.split(',').count();
    let mut s = format!("| {} |\n|{}\n", header.replace(',', " | "), " --- |".repeat(cols));
    for l in lines {
        let _ = writeln!(s, "| {} |", l.replace(',', " | "));
    }
    s
}

fn manifest_summary(dir: &Path) -> String {
    let mut names: Vec<PathBuf> = fs::read_dir(dir)
        .map(|rd| rd.filter_map(|e| e.ok().map(|e| e.path())).collect())
        .unwrap_or_default();
    names.sort();
    let mut s = String::from("## Runs\n\n| command | cells | failed | dataset hashes |\n| --- | --- | --- | --- |\n");
    for p in names {
        let Ok(text) = fs::read_to_string(&p) else { continue };
        let Ok(m) = serde_json::from_str::<RunManifest>(&text) else { continue };
        if m.command == super::Command::Report {
            continue;
        }
        let failed = m.cells.iter().filter(|c| c.status != CellStatus::Ok).count();
        let _ = writeln!(s, "| {} | {} | {} | {} |", m.command.name(), m.cells.len(), failed, m.dataset_hashes.len());
    }
    s
}
