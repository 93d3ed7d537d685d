//! Training: the focal objective with an explicit L2 term, AdamW with
//! decoupled decay, cosine-annealed warm restarts, global gradient
//! clipping, early stopping on validation macro F1, and checkpointing.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::{Element, Tensor};
use crate::error::{Result, StarnError};
use crate::features::{FeatureRows, FeatureSet, NormStats, EXTERNAL_DIM, TEMPORAL_DIM};
use crate::graphbuild::RoadGraph;
use crate::ingest::split::DatasetSplit;
use crate::metrics;
use crate::model::{
    forward, graph_tensors, init_params, Mode, ModelConfig, ModelParams, ParamKind, NUM_CLASSES,
};
use crate::rng::{substream_indexed, stream_rng_indexed};

pub const CKPT_SCHEMA: &str = "starn-ckpt/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Focusing exponent of the focal loss.
    pub gamma: f64,
    /// Per-class loss weights; `None` derives inverse-frequency weights
    /// from the training labels, normalized to mean 1.
    pub class_weights: Option<[f64; 4]>,
    /// Coefficient of the explicit L2 penalty added to the loss.
    pub l2_coeff: f64,
    /// Decoupled weight decay applied by the optimizer to weight matrices.
    /// Kept separate from `l2_coeff` so either regularizer can be zeroed.
    pub weight_decay: f64,
    pub eta_min: f64,
    pub eta_max: f64,
    /// Warm-restart period in epochs; the schedule re-peaks at multiples.
    pub restart_period: usize,
    /// Global gradient-norm ceiling.
    pub clip_tau: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation macro-F1 improvement tolerated before
    /// stopping.
    pub early_stop_patience: usize,
    /// Update rate for batch-norm running statistics.
    pub bn_momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: 2.0,
            class_weights: None,
            l2_coeff: 1e-4,
            weight_decay: 0.0,
            eta_min: 1e-6,
            eta_max: 3e-4,
            restart_period: 50,
            clip_tau: 1.0,
            batch_size: 256,
            max_epochs: 200,
            early_stop_patience: 20,
            bn_momentum: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta_min < self.eta_max) || self.eta_min <= 0.0 {
            return Err(StarnError::Config(format!(
                "learning-rate range [{}, {}] must be positive and increasing",
                self.eta_min, self.eta_max
            )));
        }
        if self.gamma < 0.0 {
            return Err(StarnError::Config(format!(
                "focal gamma {} must be nonnegative",
                self.gamma
            )));
        }
        if self.clip_tau <= 0.0 {
            return Err(StarnError::Config(format!(
                "clip threshold {} must be positive",
                self.clip_tau
            )));
        }
        if self.l2_coeff < 0.0 || self.weight_decay < 0.0 {
            return Err(StarnError::Config("regularizers must be nonnegative".into()));
        }
        if self.batch_size < 2 {
            return Err(StarnError::Config(
                "batch size must be at least 2 for batch normalization".into(),
            ));
        }
        if self.max_epochs == 0 || self.restart_period == 0 {
            return Err(StarnError::Config(
                "max_epochs and restart_period must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(StarnError::Config(format!(
                "bn momentum {} outside [0, 1]",
                self.bn_momentum
            )));
        }
        if let Some(w) = self.class_weights {
            if w.iter().any(|&v| v <= 0.0) {
                return Err(StarnError::Config(
                    "class weights must all be positive".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Inverse-frequency class weights from training labels, scaled to mean 1
/// so the loss magnitude stays comparable across imbalance levels.
pub fn class_alphas(labels: &[usize], num_classes: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; num_classes];
    for &l in labels {
        if l >= num_classes {
            return Err(StarnError::Config(format!(
                "label {} outside {} classes",
                l, num_classes
            )));
        }
        counts[l] += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(StarnError::Config(format!(
            "severity class {} has no training samples; cannot weight it",
            c
        )));
    }
    let inv: Vec<f64> = counts.iter().map(|&n| 1.0 / n as f64).collect();
    let mean = inv.iter().sum::<f64>() / num_classes as f64;
    Ok(inv.into_iter().map(|v| v / mean).collect())
}

/// Cosine interpolation from `eta_max` at `t_cur = 0` down to `eta_min` at
/// `t_cur = t_max`. The training loop feeds it `epoch % t_max`, restarting
/// the descent at every period boundary.
pub fn cosine_lr(t_cur: usize, t_max: usize, eta_min: f64, eta_max: f64) -> f64 {
    let phase = t_cur as f64 / t_max as f64;
    eta_min + 0.5 * (eta_max - eta_min) * (1.0 + (std::f64::consts::PI * phase).cos())
}

/// Scales every gradient so the global L2 norm is at most `tau`. Returns
/// the pre-clip norm. Norms accumulate in f64 regardless of `F`.
pub fn clip_gradients<F: Element>(grads: &mut [Tensor<F>], tau: f64) -> f64 {
    let norm = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if norm > tau {
        let scale = F::from_f64(tau / norm);
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates per parameter, created lazily on the
/// first gradient a parameter receives.
#[derive(Clone, Debug, Default)]
pub struct OptimizerState<F: Element> {
    pub m: BTreeMap<String, Tensor<F>>,
    pub v: BTreeMap<String, Tensor<F>>,
    pub step: u64,
}

impl<F: Element> OptimizerState<F> {
    pub fn new() -> Self {
        OptimizerState {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            step: 0,
        }
    }
}

/// One AdamW update over the gradients present in `grads`. Parameters
/// without a gradient this step are left untouched, including their decay,
/// so ablated blocks stay frozen at initialization. Decay applies to weight
/// matrices only.
pub fn adamw_step<F: Element>(
    params: &mut ModelParams<F>,
    grads: &BTreeMap<String, Tensor<F>>,
    state: &mut OptimizerState<F>,
    lr: f64,
    weight_decay: f64,
    opt: &AdamW,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let corr1 = F::from_f64(1.0 / (1.0 - opt.beta1.powi(t)));
    let corr2 = F::from_f64(1.0 / (1.0 - opt.beta2.powi(t)));
    let b1 = F::from_f64(opt.beta1);
    let nb1 = F::from_f64(1.0 - opt.beta1);
    let b2 = F::from_f64(opt.beta2);
    let nb2 = F::from_f64(1.0 - opt.beta2);
    let eps = F::from_f64(opt.eps);
    let lrf = F::from_f64(lr);
    let decay = F::from_f64(lr * weight_decay);

    let kinds: BTreeMap<String, ParamKind> = params
        .tensors()
        .iter()
        .map(|t| (t.name.clone(), t.kind))
        .collect();
    for (name, g) in grads {
        let kind = *kinds.get(name.as_str()).ok_or_else(|| {
            StarnError::Config(format!("gradient for unknown parameter {}", name))
        })?;
        if kind == ParamKind::Stat {
            return Err(StarnError::Config(format!(
                "running statistic {} cannot take gradient updates",
                name
            )));
        }
        let value = params.get_mut(name);
        if value.shape() != g.shape() {
            return Err(StarnError::shape(
                "adamw_step",
                format!("{}: {:?} vs gradient {:?}", name, value.shape(), g.shape()),
            ));
        }
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        for i in 0..g.numel() {
            let gi = g.data()[i];
            let mi = b1 * m.data()[i] + nb1 * gi;
            let vi = b2 * v.data()[i] + nb2 * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let update = (mi * corr1) / ((vi * corr2).sqrt() + eps);
            let p = &mut value.data_mut()[i];
            *p -= lrf * update;
            if kind == ParamKind::Weight {
                *p -= decay * *p;
            }
        }
    }
    Ok(())
}

/// Early-stop bookkeeping: strict improvements reset the counter; once
/// `patience` consecutive epochs fail to improve, the next miss stops.
#[derive(Clone, Debug)]
pub struct EarlyStop {
    patience: usize,
    pub best: Option<f64>,
    pub since_best: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

impl EarlyStop {
    pub fn new(patience: usize) -> Self {
        EarlyStop {
            patience,
            best: None,
            since_best: 0,
        }
    }

    pub fn observe(&mut self, score: f64) -> StopDecision {
        match self.best {
            Some(b) if score <= b => {
                self.since_best += 1;
                if self.since_best > self.patience {
                    StopDecision::Stop
                } else {
                    StopDecision::Continue
                }
            }
            _ => {
                self.best = Some(score);
                self.since_best = 0;
                StopDecision::Improved
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean training loss over the epoch's records, at model precision.
    pub train_loss: f32,
    pub val_loss: f32,
    pub val_macro_f1: f64,
    /// Largest pre-clip global gradient norm seen this epoch.
    pub max_grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,lr,train_loss,val_loss,val_macro_f1,max_grad_norm\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                e.epoch, e.lr, e.train_loss, e.val_loss, e.val_macro_f1, e.max_grad_norm
            ));
        }
        out
    }
}

/// Everything needed to evaluate or resume a trained model.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub spatial_stats: NormStats,
    pub external_stats: NormStats,
    pub seed: u64,
    pub epoch: usize,
    pub best_val_macro_f1: f64,
    pub params: ModelParams<f32>,
    pub optimizer: OptimizerState<f32>,
}

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    kind: ParamKind,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    schema: String,
    model: ModelConfig,
    spatial_stats: NormStats,
    external_stats: NormStats,
    seed: u64,
    epoch: usize,
    best_val_macro_f1: f64,
    opt_step: u64,
    tensors: Vec<TensorMeta>,
    opt_moments: Vec<TensorMeta>,
}

fn push_payload(bytes: &mut Vec<u8>, t: &Tensor<f32>) {
    for &v in t.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
}

fn take_payload(bytes: &[u8], cursor: &mut usize, shape: &[usize]) -> Result<Tensor<f32>> {
    let n: usize = shape.iter().product();
    let need = n * 4;
    if *cursor + need > bytes.len() {
        return Err(StarnError::Schema(format!(
            "checkpoint payload truncated: need {} bytes at offset {}, have {}",
            need,
            cursor,
            bytes.len()
        )));
    }
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        let off = *cursor + i * 4;
        data.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()));
    }
    *cursor += need;
    Tensor::from_vec(shape, data)
}

/// Serializes a checkpoint: a one-line JSON header, a newline, then raw
/// little-endian f32 tensor payloads in header order. The byte layout is a
/// pure function of the contents, so identical states write identical files.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let tensors: Vec<TensorMeta> = ckpt
        .params
        .tensors()
        .iter()
        .map(|t| TensorMeta {
            name: t.name.clone(),
            kind: t.kind,
            shape: t.value.shape().to_vec(),
        })
        .collect();
    let opt_moments: Vec<TensorMeta> = ckpt
        .optimizer
        .m
        .iter()
        .map(|(name, t)| TensorMeta {
            name: name.clone(),
            kind: ParamKind::Stat,
            shape: t.shape().to_vec(),
        })
        .collect();
    let header = CheckpointHeader {
        schema: CKPT_SCHEMA.to_string(),
        model: ckpt.model.clone(),
        spatial_stats: ckpt.spatial_stats.clone(),
        external_stats: ckpt.external_stats.clone(),
        seed: ckpt.seed,
        epoch: ckpt.epoch,
        best_val_macro_f1: ckpt.best_val_macro_f1,
        opt_step: ckpt.optimizer.step,
        tensors,
        opt_moments,
    };
    let mut bytes = serde_json::to_string(&header)?.into_bytes();
    bytes.push(b'\n');
    for t in ckpt.params.tensors() {
        push_payload(&mut bytes, &t.value);
    }
    for t in ckpt.optimizer.m.values() {
        push_payload(&mut bytes, t);
    }
    for t in ckpt.optimizer.v.values() {
        push_payload(&mut bytes, t);
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| StarnError::Schema("checkpoint has no header line".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..nl])?;
    if header.schema != CKPT_SCHEMA {
        return Err(StarnError::Config(format!(
            "unsupported checkpoint format {:?}, expected {:?}",
            header.schema, CKPT_SCHEMA
        )));
    }
    let payload = &bytes[nl + 1..];
    let mut cursor = 0usize;

    let mut params = init_params::<f32>(&header.model, header.seed)?;
    {
        let expected: Vec<(String, ParamKind, Vec<usize>)> = params
            .tensors()
            .iter()
            .map(|t| (t.name.clone(), t.kind, t.value.shape().to_vec()))
            .collect();
        if expected.len() != header.tensors.len() {
            return Err(StarnError::Schema(format!(
                "checkpoint lists {} tensors, model defines {}",
                header.tensors.len(),
                expected.len()
            )));
        }
        for (meta, (name, kind, shape)) in header.tensors.iter().zip(&expected) {
            if &meta.name != name || meta.kind != *kind || &meta.shape != shape {
                return Err(StarnError::Schema(format!(
                    "checkpoint tensor {} ({:?}) does not match model tensor {} ({:?})",
                    meta.name, meta.shape, name, shape
                )));
            }
        }
    }
    for meta in &header.tensors {
        *params.get_mut(&meta.name) = take_payload(payload, &mut cursor, &meta.shape)?;
    }
    let mut optimizer = OptimizerState::new();
    optimizer.step = header.opt_step;
    for meta in &header.opt_moments {
        let t = take_payload(payload, &mut cursor, &meta.shape)?;
        optimizer.m.insert(meta.name.clone(), t);
    }
    for meta in &header.opt_moments {
        let t = take_payload(payload, &mut cursor, &meta.shape)?;
        optimizer.v.insert(meta.name.clone(), t);
    }
    if cursor != payload.len() {
        return Err(StarnError::Schema(format!(
            "checkpoint has {} trailing bytes after payloads",
            payload.len() - cursor
        )));
    }
    Ok(Checkpoint {
        model: header.model,
        spatial_stats: header.spatial_stats,
        external_stats: header.external_stats,
        seed: header.seed,
        epoch: header.epoch,
        best_val_macro_f1: header.best_val_macro_f1,
        params,
        optimizer,
    })
}

/// Inputs shared by every batch of a training run, at model precision.
struct PreparedData {
    gt: crate::model::GraphTensors<f32>,
    node_spatial: Tensor<f32>,
    temporal: Tensor<f32>,
    external: Tensor<f32>,
    node_of_row: Vec<usize>,
    labels: Vec<usize>,
    train_rows: Vec<usize>,
    val_rows: Vec<usize>,
}

fn prepare(
    graph: &RoadGraph,
    features: &FeatureSet,
    rows: &FeatureRows,
    split: &DatasetSplit,
) -> Result<PreparedData> {
    let gt = graph_tensors::<f32>(graph)?;
    let row_of_id: BTreeMap<&str, usize> = rows
        .ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    // Noise records are absent from the graph; they silently drop out of
    // the split here, which is why counts are revalidated below.
    let resolve = |ids: &[String]| -> Vec<usize> {
        ids.iter()
            .filter_map(|id| row_of_id.get(id.as_str()).copied())
            .collect()
    };
    let train_rows = resolve(&split.train_ids);
    let val_rows = resolve(&split.val_ids);
    if train_rows.len() < 2 {
        return Err(StarnError::EmptyDataset(
            "fewer than 2 training records after graph assignment".into(),
        ));
    }
    if val_rows.is_empty() {
        return Err(StarnError::EmptyDataset(
            "no validation records after graph assignment".into(),
        ));
    }
    Ok(PreparedData {
        gt,
        node_spatial: features.node_spatial.cast(),
        temporal: features.record_temporal.cast(),
        external: features.record_external.cast(),
        node_of_row: rows.node_of_row.clone(),
        labels: rows.severity_of_row.iter().map(|&s| s as usize).collect(),
        train_rows,
        val_rows,
    })
}

fn gather_batch(
    data: &PreparedData,
    rows: &[usize],
) -> (Tensor<f32>, Tensor<f32>, Vec<usize>, Vec<usize>) {
    let m = rows.len();
    let mut temporal = Tensor::zeros(&[m, TEMPORAL_DIM]);
    let mut external = Tensor::zeros(&[m, EXTERNAL_DIM]);
    let mut node_of_row = Vec::with_capacity(m);
    let mut targets = Vec::with_capacity(m);
    for (out_i, &r) in rows.iter().enumerate() {
        temporal.row_mut(out_i).copy_from_slice(data.temporal.row(r));
        external.row_mut(out_i).copy_from_slice(data.external.row(r));
        node_of_row.push(data.node_of_row[r]);
        targets.push(data.labels[r]);
    }
    (temporal, external, node_of_row, targets)
}

/// Evaluation loss and class probabilities for a row subset, eval mode.
fn eval_rows(
    params: &ModelParams<f32>,
    model_cfg: &ModelConfig,
    data: &PreparedData,
    rows: &[usize],
    alphas: &[f64],
    gamma: f64,
) -> Result<(f32, Tensor<f64>, Vec<usize>)> {
    let (temporal, external, node_of_row, targets) = gather_batch(data, rows);
    let fwd = forward(
        params,
        model_cfg,
        &data.gt,
        &data.node_spatial,
        &temporal,
        &external,
        &node_of_row,
        Mode::Eval,
    )?;
    let mut tape = fwd.tape;
    let loss = tape.focal_loss(fwd.probs, &targets, alphas, gamma)?;
    let loss_val = tape.value(loss).item();
    let probs = tape.value(fwd.probs).cast::<f64>();
    Ok((loss_val, probs, targets))
}

/// Runs the full training loop and returns the best checkpoint plus the
/// per-epoch history. Deterministic for a fixed input and seed.
pub fn fit(
    graph: &RoadGraph,
    features: &FeatureSet,
    rows: &FeatureRows,
    split: &DatasetSplit,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<(Checkpoint, TrainHistory)> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    let data = prepare(graph, features, rows, split)?;
    let seed = train_cfg.seed;

    let train_labels: Vec<usize> = data.train_rows.iter().map(|&r| data.labels[r]).collect();
    let alphas: Vec<f64> = match train_cfg.class_weights {
        Some(w) => w.to_vec(),
        None => class_alphas(&train_labels, NUM_CLASSES)?,
    };

    let mut params = init_params::<f32>(model_cfg, seed)?;
    let mut opt_state = OptimizerState::new();
    let adamw = AdamW::default();
    let momentum = train_cfg.bn_momentum as f32;

    let mut history = TrainHistory {
        epochs: Vec::new(),
        best_epoch: 0,
        stopped_early: false,
    };
    let mut stopper = EarlyStop::new(train_cfg.early_stop_patience);
    let mut best: Option<(ModelParams<f32>, OptimizerState<f32>, usize, f64)> = None;

    for epoch in 0..train_cfg.max_epochs {
        let lr = cosine_lr(
            epoch % train_cfg.restart_period,
            train_cfg.restart_period,
            train_cfg.eta_min,
            train_cfg.eta_max,
        );

        let mut order = data.train_rows.clone();
        {
            use rand::seq::SliceRandom;
            let mut rng = stream_rng_indexed(seed, "shuffle", epoch as u64);
            order.shuffle(&mut rng);
        }
        // Batch bounds; a trailing singleton is merged into the previous
        // batch because batch normalization needs at least two rows.
        let mut bounds: Vec<(usize, usize)> = (0..order.len())
            .step_by(train_cfg.batch_size)
            .map(|s| (s, (s + train_cfg.batch_size).min(order.len())))
            .collect();
        if let [.., prev, last] = bounds.as_mut_slice() {
            if last.1 - last.0 == 1 {
                prev.1 = last.1;
                bounds.pop();
            }
        }

        let mut loss_acc = 0.0f64;
        let mut max_grad_norm = 0.0f64;
        for (batch_idx, &(s, e)) in bounds.iter().enumerate() {
            let batch_rows = &order[s..e];
            let (temporal, external, node_of_row, targets) = gather_batch(&data, batch_rows);
            let dropout_key =
                substream_indexed(seed, "dropout", (epoch * bounds.len() + batch_idx) as u64);
            let fwd = forward(
                &params,
                model_cfg,
                &data.gt,
                &data.node_spatial,
                &temporal,
                &external,
                &node_of_row,
                Mode::Train { dropout_key },
            )?;
            let bn_stats = fwd.bn_batch_stats;
            let param_refs = fwd.param_refs;
            let mut tape = fwd.tape;
            let focal = tape.focal_loss(fwd.probs, &targets, &alphas, train_cfg.gamma)?;
            // L2 over the weight matrices used in this pass; frozen blocks
            // take no penalty so they stay at initialization.
            let loss = if train_cfg.l2_coeff > 0.0 {
                let mut acc = focal;
                for t in params.tensors() {
                    if t.kind != ParamKind::Weight {
                        continue;
                    }
                    if let Some(&r) = param_refs.get(&t.name) {
                        let sq = tape.mul(r, r)?;
                        let s = tape.sum(sq);
                        let s = tape.scale(s, train_cfg.l2_coeff);
                        acc = tape.add(acc, s)?;
                    }
                }
                acc
            } else {
                focal
            };
            let loss_val = tape.value(loss).item();
            if !loss_val.is_finite() {
                return Err(StarnError::Numeric(format!(
                    "non-finite loss {} at epoch {}, batch {}",
                    loss_val, epoch, batch_idx
                )));
            }
            loss_acc += f64::from(tape.value(focal).item()) * batch_rows.len() as f64;

            let grads = tape.backward(loss)?;
            let mut names = Vec::new();
            let mut tensors = Vec::new();
            for t in params.tensors() {
                if t.kind == ParamKind::Stat {
                    continue;
                }
                if let Some(&r) = param_refs.get(&t.name) {
                    if let Some(g) = grads.get(r) {
                        names.push(t.name.clone());
                        tensors.push(g.clone());
                    }
                }
            }
            let norm = clip_gradients(&mut tensors, train_cfg.clip_tau);
            if !norm.is_finite() {
                return Err(StarnError::Numeric(format!(
                    "non-finite gradient norm at epoch {}, batch {}",
                    epoch, batch_idx
                )));
            }
            max_grad_norm = max_grad_norm.max(norm);
            let grad_map: BTreeMap<String, Tensor<f32>> =
                names.into_iter().zip(tensors).collect();
            adamw_step(
                &mut params,
                &grad_map,
                &mut opt_state,
                lr,
                train_cfg.weight_decay,
                &adamw,
            )?;

            for (bn, mean, var) in &bn_stats {
                for (stat, batch) in [("running_mean", mean), ("running_var", var)] {
                    let t = params.get_mut(&format!("{}.{}", bn, stat));
                    for (rv, &bv) in t.data_mut().iter_mut().zip(batch) {
                        *rv = (1.0 - momentum) * *rv + momentum * bv;
                    }
                }
            }
        }

        let train_loss = (loss_acc / order.len() as f64) as f32;
        let (val_loss, val_probs, val_targets) = eval_rows(
            &params,
            model_cfg,
            &data,
            &data.val_rows,
            &alphas,
            train_cfg.gamma,
        )?;
        let report = metrics::evaluate(&val_targets, &val_probs, NUM_CLASSES)?;
        history.epochs.push(EpochRecord {
            epoch,
            lr,
            train_loss,
            val_loss,
            val_macro_f1: report.macro_f1,
            max_grad_norm,
        });

        match stopper.observe(report.macro_f1) {
            StopDecision::Improved => {
                best = Some((params.clone(), opt_state.clone(), epoch, report.macro_f1));
                history.best_epoch = epoch;
            }
            StopDecision::Continue => {}
            StopDecision::Stop => {
                history.stopped_early = true;
                break;
            }
        }
    }

    let (best_params, best_opt, best_epoch, best_f1) =
        best.ok_or_else(|| StarnError::Numeric("no epoch produced a usable model".into()))?;
    let ckpt = Checkpoint {
        model: model_cfg.clone(),
        spatial_stats: features.spatial_stats.clone(),
        external_stats: features.external_stats.clone(),
        seed,
        epoch: best_epoch,
        best_val_macro_f1: best_f1,
        params: best_params,
        optimizer: best_opt,
    };
    Ok((ckpt, history))
}

#[cfg(test)]
mod tests;
