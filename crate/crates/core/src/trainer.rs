//! Mini-batch Adam training with early stopping, evaluation and the
//! linear-probe head trainer.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::archzoo::{ArchKind, Model};
use crate::checkpoint::Container;
use crate::datapipe::{stratified_indices, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{confusion, macro_scores, MetricsReport};
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamKind;
use crate::perturb::{mean_image, prepare_inputs, whiten};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, TensorError};

pub const DEFAULT_BATCH_SIZE: usize = 512;
pub const DEFAULT_PATIENCE: usize = 10;
/// Batch size used for inference-only passes.
pub const EVAL_BATCH: usize = 256;

/// Unset fields fall back to the per-architecture defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: Option<f64>,
    pub weight_decay: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: usize,
    pub patience: usize,
    pub seed: u64,
    pub shuffle: bool,
    /// Ends training as soon as validation accuracy reaches this value.
    pub stop_at_val_accuracy: Option<f64>,
    /// Splits each batch into chunks of this size and accumulates their
    /// gradients; batch-norm statistics then come from each chunk.
    pub micro_batch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: None,
            weight_decay: None,
            epochs: None,
            batch_size: DEFAULT_BATCH_SIZE,
            patience: DEFAULT_PATIENCE,
            seed: 42,
            shuffle: true,
            stop_at_val_accuracy: None,
            micro_batch: None,
        }
    }
}

/// Fully resolved hyperparameters, as recorded in run manifests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolvedTrain {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub seed: u64,
    pub shuffle: bool,
    pub stop_at_val_accuracy: Option<f64>,
    pub micro_batch: Option<usize>,
}

pub fn default_epochs(arch: ArchKind) -> usize {
    match arch {
        ArchKind::ResNetD4 | ArchKind::SEResNetD4 | ArchKind::Nin | ArchKind::EfficientNetB0 => 50,
        ArchKind::Cnn => 100,
        ArchKind::Mlp => 30,
        ArchKind::CustomViT => 80,
        ArchKind::ConvNeXtTiny => 60,
    }
}

pub fn default_lr(arch: ArchKind) -> f64 {
    match arch {
        ArchKind::EfficientNetB0 | ArchKind::ConvNeXtTiny | ArchKind::CustomViT => 1e-4,
        _ => 1e-3,
    }
}

pub fn default_weight_decay(arch: ArchKind) -> f64 {
    match arch {
        ArchKind::ConvNeXtTiny => 0.2,
        ArchKind::CustomViT => 0.01,
        _ => 0.0,
    }
}

impl TrainConfig {
    pub fn resolve(&self, arch: ArchKind) -> Result<ResolvedTrain> {
        let r = ResolvedTrain {
            lr: self.lr.unwrap_or_else(|| default_lr(arch)),
            weight_decay: self.weight_decay.unwrap_or_else(|| default_weight_decay(arch)),
            epochs: self.epochs.unwrap_or_else(|| default_epochs(arch)),
            batch_size: self.batch_size,
            patience: self.patience,
            seed: self.seed,
            shuffle: self.shuffle,
            stop_at_val_accuracy: self.stop_at_val_accuracy,
            micro_batch: self.micro_batch,
        };
        if r.batch_size == 0 || r.patience == 0 || r.epochs == 0 || r.micro_batch == Some(0) {
            return Err(Error::Config("batch size, patience and epochs must all be >= 1".into()));
        }
        if !(r.lr > 0.0) || !(r.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "need lr > 0 and weight decay >= 0, got {} and {}",
                r.lr, r.weight_decay
            )));
        }
        Ok(r)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Zero-based index into `epochs`.
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub reached_target: bool,
}

impl TrainHistory {
    pub fn best_val_accuracy(&self) -> f64 {
        self.epochs[self.best_epoch].val_accuracy
    }
}

/// Inputs `[N, 3, S, S]` at model scale with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorData<T> {
    pub x: Tensor<T>,
    pub y: Vec<usize>,
}

impl<T: Scalar> TensorData<T> {
    pub fn new(x: Tensor<T>, y: Vec<usize>) -> Result<Self> {
        if x.shape().first() != Some(&y.len()) {
            return Err(Error::Data(format!("{} labels for inputs {:?}", y.len(), x.shape())));
        }
        Ok(Self { x, y })
    }

    /// Plain resize to `size` and division by 255.
    pub fn from_dataset(ds: &Dataset, size: usize) -> Result<Self> {
        Self::new(prepare_inputs(ds, None, size)?, ds.labels())
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn whitened(&self, mean: &Tensor<T>) -> Result<Self> {
        Ok(Self {
            x: whiten(&self.x, mean)?,
            y: self.y.clone(),
        })
    }
}

pub struct TrainOutcome<T> {
    pub history: TrainHistory,
    /// Training-set mean image used for whitening.
    pub mean: Tensor<T>,
    pub resolved: ResolvedTrain,
}

fn check_labels(classes: usize, y: &[usize]) -> Result<()> {
    match y.iter().find(|&&l| l >= classes) {
        Some(l) => Err(Error::Config(format!("label {l} does not fit a {classes}-class head"))),
        None => Ok(()),
    }
}

/// Trains in place and leaves `model` at the best validation snapshot.
pub fn train<T: Scalar>(model: &mut Model<T>, train: &TensorData<T>, val: &TensorData<T>, cfg: &TrainConfig) -> Result<TrainOutcome<T>> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data("training and validation sets must be non-empty".into()));
    }
    let rc = cfg.resolve(model.arch())?;
    check_labels(model.num_classes(), &train.y)?;
    check_labels(model.num_classes(), &val.y)?;
    let mean = mean_image(&train.x)?;
    let tr = train.whitened(&mean)?;
    let va = val.whitened(&mean)?;

    let mut adam = Adam::for_store(AdamConfig::new(rc.lr, rc.weight_decay), model.store())?;
    let mut order: Vec<usize> = (0..tr.len()).collect();
    let mut shuffle_rng = rng::stream(rc.seed, &[rng::SHUFFLE]);
    let mut records = Vec::new();
    let mut best: Option<(usize, f64, Vec<Tensor<T>>)> = None;
    let mut stopped_early = false;
    let mut reached_target = false;

    for epoch in 0..rc.epochs {
        if rc.shuffle {
            order.shuffle(&mut shuffle_rng);
        }
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (bi, idx) in order.chunks(rc.batch_size).enumerate() {
            let micro = rc.micro_batch.unwrap_or(idx.len()).min(idx.len());
            let mut grads: Vec<Option<Tensor<T>>> = vec![None; model.store().len()];
            for (mi, part) in idx.chunks(micro).enumerate() {
                let fail = |detail: String| Error::Training { epoch, batch: bi, detail };
                let xb = tr.x.gather_rows(part);
                let yb: Vec<usize> = part.iter().map(|&i| tr.y[i]).collect();
                let seed = rng::derive_seed(rc.seed, &[rng::DROPOUT, epoch as u64, bi as u64, mi as u64]);
                let mut tape = Tape::training(seed);
                let xv = tape.constant(xb);
                let fwd = model.forward(&mut tape, xv)?;
                let loss = tape.cross_entropy(fwd.logits, &yb)?;
                let lv = tape.value(loss).data()[0].to_f64_lossy();
                if !lv.is_finite() {
                    return Err(fail(format!("non-finite loss {lv}")));
                }
                loss_sum += lv * part.len() as f64;
                correct += tape
                    .value(fwd.logits)
                    .argmax_rows()
                    .iter()
                    .zip(&yb)
                    .filter(|(p, t)| p == t)
                    .count();
                // Weighting by chunk share keeps the batch loss a per-sample mean.
                let share = T::lit(part.len() as f64 / idx.len() as f64);
                tape.backward_with(loss, Tensor::scalar(share)).map_err(|e| fail(e.to_string()))?;
                for (acc, g) in grads.iter_mut().zip(model.store().collect_grads(&mut tape, &fwd.bound)) {
                    match (acc.as_mut(), g) {
                        (Some(a), Some(g)) => a.add_assign(&g),
                        (None, Some(g)) => *acc = Some(g),
                        _ => {}
                    }
                }
                model.apply_updates(fwd.updates);
            }
            adam.step_store(model.store_mut(), &grads)?;
        }
        let (val_loss, val_acc) = loss_and_accuracy(model, &va)?;
        records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / tr.len() as f64,
            train_accuracy: correct as f64 / tr.len() as f64,
            val_loss,
            val_accuracy: val_acc,
        });
        let r = records.last().expect("just pushed");
        log::info!(
            "{} epoch {epoch}: train loss {:.4} acc {:.4}, val loss {:.4} acc {:.4}",
            model.arch().name(),
            r.train_loss,
            r.train_accuracy,
            r.val_loss,
            r.val_accuracy
        );
        if best.as_ref().is_none_or(|b| val_acc > b.1) {
            best = Some((epoch, val_acc, snapshot(model)));
        }
        let best_epoch = best.as_ref().map_or(0, |b| b.0);
        if rc.stop_at_val_accuracy.is_some_and(|t| val_acc >= t) {
            reached_target = true;
            break;
        }
        if epoch - best_epoch >= rc.patience {
            stopped_early = true;
            break;
        }
    }
    let (best_epoch, _, values) = best.expect("at least one epoch ran");
    restore(model, values);
    Ok(TrainOutcome {
        history: TrainHistory {
            epochs: records,
            best_epoch,
            stopped_early,
            reached_target,
        },
        mean,
        resolved: rc,
    })
}

fn snapshot<T: Scalar>(model: &Model<T>) -> Vec<Tensor<T>> {
    model.store().entries().iter().map(|e| e.value.clone()).collect()
}

fn restore<T: Scalar>(model: &mut Model<T>, values: Vec<Tensor<T>>) {
    for (i, v) in values.into_iter().enumerate() {
        model.store_mut().entry_mut(i).value = v;
    }
}

/// Inference-mode logits for every row, in `EVAL_BATCH` chunks.
pub fn predict_all<T: Scalar>(model: &Model<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let n = x.shape()[0];
    let mut out = Vec::with_capacity(n * model.num_classes());
    for start in (0..n).step_by(EVAL_BATCH) {
        let len = EVAL_BATCH.min(n - start);
        out.extend_from_slice(model.predict(&x.slice_rows(start, len)?)?.data());
    }
    Ok(Tensor::new(&[n, model.num_classes()], out)?)
}

fn loss_and_accuracy<T: Scalar>(model: &Model<T>, data: &TensorData<T>) -> Result<(f64, f64)> {
    let logits = predict_all(model, &data.x)?;
    let mut tape = Tape::inference();
    let lv = tape.constant(logits);
    let loss = tape.cross_entropy(lv, &data.y)?;
    let pred = tape.value(lv).argmax_rows();
    let correct = pred.iter().zip(&data.y).filter(|(p, t)| p == t).count();
    Ok((tape.value(loss).data()[0].to_f64_lossy(), correct as f64 / data.len() as f64))
}

/// Metrics on already-whitened inputs.
pub fn evaluate_tensors<T: Scalar>(model: &Model<T>, x: &Tensor<T>, labels: &[usize]) -> Result<MetricsReport> {
    check_labels(model.num_classes(), labels)?;
    let pred = predict_all(model, x)?.argmax_rows();
    macro_scores(&confusion(labels, &pred, model.num_classes())?)
}

/// Metrics on `data` after whitening with the training mean.
pub fn evaluate<T: Scalar>(model: &Model<T>, data: &TensorData<T>, mean: &Tensor<T>) -> Result<MetricsReport> {
    evaluate_tensors(model, &whiten(&data.x, mean)?, &data.y)
}

/// Precomputed backbone features with labels.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTable {
    /// `[N, d]`.
    pub features: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl FeatureTable {
    pub fn new(features: Tensor<f32>, labels: Vec<usize>) -> Result<Self> {
        let s = features.shape();
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 || s[1] == 0 {
            return Err(Error::Data(format!("features {s:?} for {} labels", labels.len())));
        }
        Ok(Self { features, labels })
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    /// Head inputs of `model` for every row of `data`.
    pub fn extract<T: Scalar>(model: &Model<T>, data: &TensorData<T>, mean: &Tensor<T>) -> Result<Self> {
        let x = whiten(&data.x, mean)?;
        let n = data.len();
        let mut out = Vec::with_capacity(n * model.feature_dim());
        for start in (0..n).step_by(EVAL_BATCH) {
            let len = EVAL_BATCH.min(n - start);
            out.extend(model.features(&x.slice_rows(start, len)?)?.data().iter().map(|v| v.to_f32().unwrap_or(f32::NAN)));
        }
        Self::new(Tensor::new(&[n, model.feature_dim()], out)?, data.y.clone())
    }

    /// CSV with header `label,f0,...,f{d-1}`.
    pub fn to_csv(&self) -> String {
        let d = self.dim();
        let mut s = String::from("label");
        for i in 0..d {
            s.push_str(&format!(",f{i}"));
        }
        s.push('\n');
        for (row, l) in self.features.data().chunks(d).zip(&self.labels) {
            s.push_str(&l.to_string());
            for v in row {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
        let header = rdr.headers().map_err(|e| Error::Ingestion { row: 0, detail: e.to_string() })?.clone();
        if header.get(0) != Some("label") || header.len() < 2 {
            return Err(Error::Ingestion {
                row: 0,
                detail: "header must be `label,f0,...`".into(),
            });
        }
        let d = header.len() - 1;
        let (mut data, mut labels) = (Vec::new(), Vec::new());
        for (i, rec) in rdr.records().enumerate() {
            let row = i + 1;
            let rec = rec.map_err(|e| Error::Ingestion { row, detail: e.to_string() })?;
            if rec.len() != d + 1 {
                return Err(Error::Ingestion {
                    row,
                    detail: format!("expected {} features, found {}", d, rec.len().saturating_sub(1)),
                });
            }
            let bad = |f: &str| Error::Ingestion { row, detail: format!("cannot parse `{f}`") };
            labels.push(rec[0].trim().parse::<usize>().map_err(|_| bad(&rec[0]))?);
            for f in rec.iter().skip(1) {
                data.push(f.trim().parse::<f32>().map_err(|_| bad(f))?);
            }
        }
        Self::new(Tensor::new(&[labels.len(), d], data)?, labels)
    }

    /// Container with a `features` `[N, d]` tensor and a `labels` `[N]` tensor.
    pub fn to_container(&self) -> Container {
        let mut c = Container::new(None, 0, serde_json::json!({ "kind": "feature_table" }));
        c.push("features", ParamKind::Buffer, self.features.clone());
        let labels = Tensor::new(&[self.len()], self.labels.iter().map(|&l| l as f32).collect()).expect("label shape");
        c.push("labels", ParamKind::Buffer, labels);
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let missing = |n: &str| Error::Data(format!("feature container lacks `{n}`"));
        let f = c.get("features").ok_or_else(|| missing("features"))?.clone();
        let l = c.get("labels").ok_or_else(|| missing("labels"))?;
        let labels = l
            .data()
            .iter()
            .map(|&v| if v >= 0.0 && v.fract() == 0.0 { Ok(v as usize) } else { Err(Error::Data(format!("bad label {v}"))) })
            .collect::<Result<Vec<_>>>()?;
        Self::new(f, labels)
    }

    /// Reads `.csv` as text and anything else as a container.
    pub fn load(path: &Path) -> Result<Self> {
        if path.extension().is_some_and(|e| e == "csv") {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            Self::from_csv(&text)
        } else {
            Self::from_container(&Container::load(path)?)
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if path.extension().is_some_and(|e| e == "csv") {
            std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
        } else {
            self.to_container().save(path)
        }
    }

    fn rows(&self, idx: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        (self.features.gather_rows(idx), idx.iter().map(|&i| self.labels[i]).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            batch_size: 256,
            epochs: 50,
            train_fraction: 0.8,
            seed: 42,
        }
    }
}

/// A single `d -> C` linear layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearHead {
    /// `[d, C]`.
    pub w: Tensor<f32>,
    pub b: Tensor<f32>,
}

impl LinearHead {
    pub fn param_count(&self) -> usize {
        self.w.numel() + self.b.numel()
    }

    pub fn logits(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::inference();
        let (xv, w, b) = (tape.constant(x.clone()), tape.constant(self.w.clone()), tape.constant(self.b.clone()));
        let y = tape.linear(xv, w, Some(b))?;
        Ok(tape.value(y).clone())
    }
}

/// Trains only a linear head on frozen features; returns it with metrics on
/// the held-out split.
pub fn linear_probe(table: &FeatureTable, num_classes: usize, cfg: &ProbeConfig) -> Result<(LinearHead, MetricsReport)> {
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::Config("probe batch size and epochs must be >= 1".into()));
    }
    check_labels(num_classes, &table.labels)?;
    let (tri, vai) = stratified_indices(&table.labels, cfg.train_fraction, cfg.seed)?;
    let (xt, yt) = table.rows(&tri);
    let (xv, yv) = table.rows(&vai);
    let d = table.dim();
    let mut rng_init = rng::stream(cfg.seed, &[rng::SYNTH, 0]);
    let w = crate::params::Init::XavierUniform {
        fan_in: d,
        fan_out: num_classes,
    }
    .sample::<f32>(&[d, num_classes], &mut rng_init);
    let mut params = vec![w, Tensor::zeros(&[num_classes])];
    let mut adam = Adam::new(AdamConfig::new(cfg.lr, 0.0), &[d * num_classes, num_classes])?;
    let mut order: Vec<usize> = (0..yt.len()).collect();
    let mut shuffle_rng = rng::stream(cfg.seed, &[rng::SHUFFLE]);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let mut tape = Tape::<f32>::training(0);
            let x = tape.constant(xt.gather_rows(idx));
            let wv = tape.leaf(params[0].clone(), true);
            let bv = tape.leaf(params[1].clone(), true);
            let z = tape.linear(x, wv, Some(bv))?;
            let yb: Vec<usize> = idx.iter().map(|&i| yt[i]).collect();
            let loss = tape.cross_entropy(z, &yb)?;
            if !tape.value(loss).is_finite() {
                return Err(Error::Training {
                    epoch,
                    batch: bi,
                    detail: "non-finite probe loss".into(),
                });
            }
            tape.backward(loss)?;
            let grads = [wv, bv].map(|v| tape.take_grad(v).unwrap_or_else(|| Tensor::zeros(tape.shape(v))));
            adam.step_tensors(&mut params, &grads)?;
        }
    }
    let [w, b]: [Tensor<f32>; 2] = params.try_into().map_err(|_| TensorError::Config("probe state".into()))?;
    let head = LinearHead { w, b };
    let pred = head.logits(&xv)?.argmax_rows();
    let report = macro_scores(&confusion(&yv, &pred, num_classes)?)?;
    Ok((head, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn per_arch_defaults() {
        let c = TrainConfig::default();
        let v = c.resolve(ArchKind::CustomViT).unwrap();
        assert_eq!((v.epochs, v.lr, v.weight_decay), (80, 1e-4, 0.01));
        let x = c.resolve(ArchKind::ConvNeXtTiny).unwrap();
        assert_eq!((x.epochs, x.lr, x.weight_decay), (60, 1e-4, 0.2));
        let m = c.resolve(ArchKind::Mlp).unwrap();
        assert_eq!((m.epochs, m.lr, m.batch_size, m.patience), (30, 1e-3, 512, 10));
        assert_eq!(c.resolve(ArchKind::Cnn).unwrap().epochs, 100);
        let bad = TrainConfig {
            patience: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.resolve(ArchKind::Cnn), Err(Error::Config(_))));
    }

    #[test]
    fn feature_csv_round_trip() {
        let t = FeatureTable::new(Tensor::from_f64(&[2, 3], &[0.5, -1.0, 2.0, 0.0, 0.25, 3.5]).unwrap(), vec![1, 0]).unwrap();
        let back = FeatureTable::from_csv(&t.to_csv()).unwrap();
        assert_eq!(back, t);
        let c = FeatureTable::from_container(&Container::from_bytes(&t.to_container().to_bytes()).unwrap()).unwrap();
        assert_eq!(c, t);
        assert!(matches!(
            FeatureTable::from_csv("label,f0,f1\n0,1.0\n"),
            Err(Error::Ingestion { row: 1, .. })
        ));
    }

    #[test]
    fn probe_learns_one_hot_features() {
        let c = 4;
        let n = 80;
        let labels: Vec<usize> = (0..n).map(|i| i % c).collect();
        let mut data = vec![0.0f32; n * c];
        for (i, &l) in labels.iter().enumerate() {
            data[i * c + l] = 1.0;
        }
        let table = FeatureTable::new(Tensor::new(&[n, c], data).unwrap(), labels).unwrap();
        let before = table.clone();
        let cfg = ProbeConfig {
            lr: 0.05,
            ..ProbeConfig::default()
        };
        let (head, rep) = linear_probe(&table, c, &cfg).unwrap();
        assert_eq!(rep.accuracy, 1.0);
        assert_eq!(head.param_count(), c * c + c);
        assert_eq!(table, before);
    }
}
