//! The risk-classification network: graph-attention spatial encoder,
//! temporal and environmental encoders, attention-based modality fusion,
//! and a dropout-regularized classifier head.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Element, Graph, Tensor, TensorRef};
use crate::error::{Result, StarnError};
use crate::features::{EXTERNAL_DIM, SPATIAL_DIM, TEMPORAL_DIM};
use crate::graphbuild::RoadGraph;
use crate::rng::{stream_rng, substream};

pub const NUM_CLASSES: usize = 4;
/// Edge feature width: normalized distance, type match, connection one-hot.
pub const EDGE_FEAT_DIM: usize = 5;
/// Epsilon inside both normalization denominators.
pub const NORM_EPS: f64 = 1e-5;

/// Architecture variants: the full model plus the five single-change
/// reductions used to measure which block earns its keep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    /// Skip the graph attention stack; records see raw projected node features.
    NoGat,
    /// Zero the temporal modality vector.
    NoTemporal,
    /// Zero the environmental modality vector.
    NoExternal,
    /// Replace attention fusion with plain concatenation.
    ConcatFusion,
    /// One attention head spanning the full hidden width.
    SingleHead,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::Full,
        Ablation::NoGat,
        Ablation::NoTemporal,
        Ablation::NoExternal,
        Ablation::ConcatFusion,
        Ablation::SingleHead,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoGat => "no_gat",
            Ablation::NoTemporal => "no_temporal",
            Ablation::NoExternal => "no_external",
            Ablation::ConcatFusion => "concat_fusion",
            Ablation::SingleHead => "single_head",
        }
    }

    pub fn from_name(name: &str) -> Option<Ablation> {
        Ablation::ALL.into_iter().find(|a| a.name() == name)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub gat_layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub temporal_hidden: usize,
    pub classifier_hidden: (usize, usize),
    pub dropout: (f64, f64),
    pub leaky_slope: f64,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            gat_layers: 2,
            heads: 4,
            hidden: 64,
            temporal_hidden: 128,
            classifier_hidden: (128, 64),
            dropout: (0.3, 0.2),
            leaky_slope: 0.2,
            ablation: Ablation::Full,
        }
    }
}

impl ModelConfig {
    /// Head count after applying the single-head variant.
    pub fn effective_heads(&self) -> usize {
        if self.ablation == Ablation::SingleHead {
            1
        } else {
            self.heads
        }
    }

    /// Per-head width; heads always tile the hidden dimension exactly.
    pub fn head_dim(&self) -> usize {
        self.hidden / self.effective_heads()
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || self.gat_layers == 0 {
            return Err(StarnError::Config(
                "hidden, heads, and gat_layers must be positive".into(),
            ));
        }
        if self.hidden % self.effective_heads() != 0 {
            return Err(StarnError::Config(format!(
                "hidden {} is not divisible by {} heads",
                self.hidden,
                self.effective_heads()
            )));
        }
        for rate in [self.dropout.0, self.dropout.1] {
            if !(0.0..1.0).contains(&rate) {
                return Err(StarnError::Config(format!(
                    "dropout rate {} outside [0, 1)",
                    rate
                )));
            }
        }
        Ok(())
    }
}

/// How a tensor participates in optimization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Trained, weight-decayed.
    Weight,
    /// Trained, never decayed.
    Bias,
    /// Normalization gain; trained, never decayed.
    Gain,
    /// Running statistic; updated outside gradient descent.
    Stat,
}

#[derive(Clone, Debug)]
pub struct ParamTensor<F: Element> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<F>,
}

/// Named parameter store. Order is fixed at construction and shared by the
/// optimizer state and the checkpoint format.
#[derive(Clone, Debug)]
pub struct ModelParams<F: Element> {
    tensors: Vec<ParamTensor<F>>,
    index: BTreeMap<String, usize>,
}

impl<F: Element> Default for ModelParams<F> {
    fn default() -> Self {
        ModelParams {
            tensors: Vec::new(),
            index: BTreeMap::new(),
        }
    }
}

impl<F: Element> ModelParams<F> {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn push(&mut self, name: String, kind: ParamKind, value: Tensor<F>) {
        self.index.insert(name.clone(), self.tensors.len());
        self.tensors.push(ParamTensor { name, kind, value });
    }

    pub fn tensors(&self) -> &[ParamTensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [ParamTensor<F>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> &Tensor<F> {
        &self.tensors[self.index[name]].value
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<F> {
        let i = self.index[name];
        &mut self.tensors[i].value
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    /// Trainable scalar count (running statistics excluded).
    pub fn param_count(&self) -> usize {
        self.tensors
            .iter()
            .filter(|t| t.kind != ParamKind::Stat)
            .map(|t| t.value.numel())
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.value.all_finite())
    }

    pub fn cast<G: Element>(&self) -> ModelParams<G> {
        ModelParams {
            tensors: self
                .tensors
                .iter()
                .map(|t| ParamTensor {
                    name: t.name.clone(),
                    kind: t.kind,
                    value: t.value.cast(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// Uniform Glorot draw for a matrix seen as fan-in x fan-out.
fn glorot<F: Element>(seed: u64, name: &str, rows: usize, cols: usize, fan: (usize, usize)) -> Tensor<F> {
    let bound = (6.0 / (fan.0 + fan.1) as f64).sqrt();
    let mut rng = stream_rng(substream(seed, "init"), name);
    let mut t = Tensor::zeros(&[rows, cols]);
    for v in t.data_mut().iter_mut() {
        *v = F::from_f64(rng.gen_range(-bound..bound));
    }
    t
}

/// Builds a freshly initialized parameter set: Glorot-uniform weights, zero
/// biases, unit gains, and identity running statistics, each tensor drawn
/// from its own named substream of `seed`.
pub fn init_params<F: Element>(cfg: &ModelConfig, seed: u64) -> Result<ModelParams<F>> {
    cfg.validate()?;
    let h = cfg.hidden;
    let d = cfg.head_dim();
    let mut p = ModelParams {
        tensors: Vec::new(),
        index: BTreeMap::new(),
    };
    let weight = |p: &mut ModelParams<F>, name: String, rows: usize, cols: usize| {
        let t = glorot(seed, &name, rows, cols, (rows, cols));
        p.push(name, ParamKind::Weight, t);
    };
    let bias = |p: &mut ModelParams<F>, name: String, n: usize| {
        p.push(name, ParamKind::Bias, Tensor::zeros(&[n]));
    };

    weight(&mut p, "spatial_proj.weight".into(), SPATIAL_DIM, h);
    bias(&mut p, "spatial_proj.bias".into(), h);

    for l in 0..cfg.gat_layers {
        for k in 0..cfg.effective_heads() {
            weight(&mut p, format!("gat{}.head{}.weight", l, k), h, d);
            // The attention vector scores a concatenated triple of
            // projected source, destination, and edge features.
            let name = format!("gat{}.head{}.attn", l, k);
            let t = glorot(seed, &name, 3 * d, 1, (3 * d, 1));
            p.push(name, ParamKind::Weight, t);
            weight(&mut p, format!("gat{}.head{}.edge_weight", l, k), EDGE_FEAT_DIM, d);
        }
        weight(&mut p, format!("gat{}.residual.weight", l), h, h);
    }

    weight(&mut p, "temporal.fc1.weight".into(), TEMPORAL_DIM, cfg.temporal_hidden);
    bias(&mut p, "temporal.fc1.bias".into(), cfg.temporal_hidden);
    weight(&mut p, "temporal.fc2.weight".into(), cfg.temporal_hidden, h);
    bias(&mut p, "temporal.fc2.bias".into(), h);
    p.push("temporal.norm.gain".into(), ParamKind::Gain, Tensor::filled(&[h], F::ONE));
    bias(&mut p, "temporal.norm.bias".into(), h);

    weight(&mut p, "external.fc1.weight".into(), EXTERNAL_DIM, h);
    bias(&mut p, "external.fc1.bias".into(), h);
    weight(&mut p, "external.fc2.weight".into(), h, h);
    bias(&mut p, "external.fc2.bias".into(), h);
    for bn in ["external.bn1", "external.bn2"] {
        p.push(format!("{}.gain", bn), ParamKind::Gain, Tensor::filled(&[h], F::ONE));
        bias(&mut p, format!("{}.bias", bn), h);
        p.push(format!("{}.running_mean", bn), ParamKind::Stat, Tensor::zeros(&[h]));
        p.push(format!("{}.running_var", bn), ParamKind::Stat, Tensor::filled(&[h], F::ONE));
    }

    let (c1, c2) = cfg.classifier_hidden;
    weight(&mut p, "classifier.fc1.weight".into(), 3 * h, c1);
    bias(&mut p, "classifier.fc1.bias".into(), c1);
    weight(&mut p, "classifier.fc2.weight".into(), c1, c2);
    bias(&mut p, "classifier.fc2.bias".into(), c2);
    weight(&mut p, "classifier.fc3.weight".into(), c2, NUM_CLASSES);
    bias(&mut p, "classifier.fc3.bias".into(), NUM_CLASSES);
    Ok(p)
}

/// Edge structure of a built graph, shaped for the attention layers.
#[derive(Clone, Debug)]
pub struct GraphTensors<F: Element> {
    pub n_nodes: usize,
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    /// CSR segment bounds over edges grouped by source node.
    pub offsets: Vec<usize>,
    pub edge_feat: Tensor<F>,
}

/// Extracts edge arrays from a graph. Edges must arrive sorted by
/// (src, dst) with a self-loop on every node, which the builder guarantees.
pub fn graph_tensors<F: Element>(graph: &RoadGraph) -> Result<GraphTensors<F>> {
    let n = graph.nodes.len();
    let e = graph.edges.len();
    let mut src = Vec::with_capacity(e);
    let mut dst = Vec::with_capacity(e);
    let mut edge_feat = Tensor::zeros(&[e, EDGE_FEAT_DIM]);
    for (i, edge) in graph.edges.iter().enumerate() {
        src.push(edge.src);
        dst.push(edge.dst);
        for (j, &f) in edge.edge_features.iter().enumerate() {
            edge_feat.set(i, j, F::from_f64(f));
        }
    }
    if src.windows(2).any(|w| w[0] > w[1]) {
        return Err(StarnError::Graph("edges are not sorted by source".into()));
    }
    let mut offsets = vec![0usize; n + 1];
    for &s in &src {
        offsets[s + 1] += 1;
    }
    for i in 0..n {
        offsets[i + 1] += offsets[i];
    }
    if (0..n).any(|i| offsets[i] == offsets[i + 1]) {
        return Err(StarnError::Graph(
            "a node has no outgoing edges; self-loops are missing".into(),
        ));
    }
    Ok(GraphTensors {
        n_nodes: n,
        src,
        dst,
        offsets,
        edge_feat,
    })
}

/// Forward-pass mode. Training activates dropout and batch statistics;
/// evaluation is a pure function of inputs and parameters.
#[derive(Clone, Copy, Debug)]
pub enum Mode {
    Eval,
    Train { dropout_key: u64 },
}

impl Mode {
    fn is_train(self) -> bool {
        matches!(self, Mode::Train { .. })
    }
}

/// A built forward tape plus the references needed to read outputs and
/// route gradients back to named parameters.
pub struct Forward<F: Element> {
    pub tape: Graph<F>,
    pub logits: TensorRef,
    pub probs: TensorRef,
    pub param_refs: BTreeMap<String, TensorRef>,
    /// Edge attention coefficients, one `[E, 1]` tensor per (layer, head)
    /// in loop order. Empty when the attention stack is ablated.
    pub attention: Vec<TensorRef>,
    /// Per-record modality mixing weights: one `[m, 3]` softmax per query
    /// modality. Empty under plain concatenation.
    pub fusion_attn: Vec<TensorRef>,
    /// Batch statistics observed by each batch-norm site this pass, for
    /// running-average updates. Empty in eval mode.
    pub bn_batch_stats: Vec<(String, Vec<F>, Vec<F>)>,
}

struct Builder<'a, F: Element> {
    tape: Graph<F>,
    params: &'a ModelParams<F>,
    refs: BTreeMap<String, TensorRef>,
}

impl<'a, F: Element> Builder<'a, F> {
    fn p(&mut self, name: &str) -> TensorRef {
        if let Some(&r) = self.refs.get(name) {
            return r;
        }
        let r = self.tape.param(self.params.get(name).clone());
        self.refs.insert(name.to_string(), r);
        r
    }

    fn linear(&mut self, x: TensorRef, weight: &str, bias: &str) -> Result<TensorRef> {
        let w = self.p(weight);
        let b = self.p(bias);
        let xw = self.tape.matmul(x, w)?;
        self.tape.add_bias(xw, b)
    }
}

/// Runs the network over one record batch. Node embeddings are computed for
/// the whole graph, then per-record rows are gathered by `node_of_row`.
pub fn forward<F: Element>(
    params: &ModelParams<F>,
    cfg: &ModelConfig,
    gt: &GraphTensors<F>,
    node_spatial: &Tensor<F>,
    temporal: &Tensor<F>,
    external: &Tensor<F>,
    node_of_row: &[usize],
    mode: Mode,
) -> Result<Forward<F>> {
    cfg.validate()?;
    let m = node_of_row.len();
    if temporal.rows() != m || external.rows() != m {
        return Err(StarnError::shape(
            "forward",
            format!(
                "{} rows mapped to nodes but {} temporal / {} external rows",
                m,
                temporal.rows(),
                external.rows()
            ),
        ));
    }
    if node_spatial.rows() != gt.n_nodes {
        return Err(StarnError::shape(
            "forward",
            format!(
                "{} node feature rows for {} graph nodes",
                node_spatial.rows(),
                gt.n_nodes
            ),
        ));
    }
    if let Some(&bad) = node_of_row.iter().find(|&&i| i >= gt.n_nodes) {
        return Err(StarnError::Graph(format!(
            "record mapped to unknown node {}",
            bad
        )));
    }

    let mut b = Builder {
        tape: Graph::new(),
        params,
        refs: BTreeMap::new(),
    };
    let mut bn_batch_stats = Vec::new();
    let mut attention = Vec::new();

    // Node spatial embedding.
    let x_nodes = b.tape.constant(node_spatial.clone());
    let pre = b.linear(x_nodes, "spatial_proj.weight", "spatial_proj.bias")?;
    let h0 = b.tape.relu(pre);

    // Graph attention stack.
    let mut h_nodes = h0;
    if cfg.ablation != Ablation::NoGat {
        let edge_const = b.tape.constant(gt.edge_feat.clone());
        for l in 0..cfg.gat_layers {
            let mut head_outs = Vec::with_capacity(cfg.effective_heads());
            for k in 0..cfg.effective_heads() {
                let w = b.p(&format!("gat{}.head{}.weight", l, k));
                let a = b.p(&format!("gat{}.head{}.attn", l, k));
                let we = b.p(&format!("gat{}.head{}.edge_weight", l, k));
                let hw = b.tape.matmul(h_nodes, w)?;
                let src_rows = b.tape.gather_rows(hw, &gt.src)?;
                let dst_rows = b.tape.gather_rows(hw, &gt.dst)?;
                let ef = b.tape.matmul(edge_const, we)?;
                let cat = b.tape.concat_cols(&[src_rows, dst_rows, ef])?;
                let raw = b.tape.matmul(cat, a)?;
                let score = b.tape.leaky_relu(raw, cfg.leaky_slope);
                let alpha = b.tape.segment_softmax(score, gt.offsets.clone())?;
                attention.push(alpha);
                let weighted = b.tape.scale_rows(dst_rows, alpha)?;
                let agg = b.tape.scatter_add_rows(weighted, &gt.src, gt.n_nodes)?;
                head_outs.push(b.tape.elu(agg, 1.0));
            }
            let concat = if head_outs.len() == 1 {
                head_outs[0]
            } else {
                b.tape.concat_cols(&head_outs)?
            };
            let res_w = b.p(&format!("gat{}.residual.weight", l));
            let res = b.tape.matmul(h_nodes, res_w)?;
            h_nodes = b.tape.add(concat, res)?;
        }
    }
    let h_spatial = b.tape.gather_rows(h_nodes, node_of_row)?;

    // Temporal encoder: widen, contract, layer-normalize.
    let h_temporal = if cfg.ablation == Ablation::NoTemporal {
        b.tape.constant(Tensor::zeros(&[m, cfg.hidden]))
    } else {
        let xt = b.tape.constant(temporal.clone());
        let t1 = b.linear(xt, "temporal.fc1.weight", "temporal.fc1.bias")?;
        let r1 = b.tape.relu(t1);
        let t2 = b.linear(r1, "temporal.fc2.weight", "temporal.fc2.bias")?;
        let r2 = b.tape.relu(t2);
        let gain = b.p("temporal.norm.gain");
        let bias = b.p("temporal.norm.bias");
        b.tape.layer_norm(r2, gain, bias, NORM_EPS)?
    };

    // Environmental encoder: two batch-normalized layers.
    let h_external = if cfg.ablation == Ablation::NoExternal {
        b.tape.constant(Tensor::zeros(&[m, cfg.hidden]))
    } else {
        let xe = b.tape.constant(external.clone());
        let mut cur = xe;
        for (fc, bn) in [
            ("external.fc1", "external.bn1"),
            ("external.fc2", "external.bn2"),
        ] {
            let lin = b.linear(
                cur,
                &format!("{}.weight", fc),
                &format!("{}.bias", fc),
            )?;
            let gain = b.p(&format!("{}.gain", bn));
            let bias = b.p(&format!("{}.bias", bn));
            let normed = if mode.is_train() {
                let (mean, var) = b.tape.node_column_stats(lin);
                bn_batch_stats.push((bn.to_string(), mean, var));
                b.tape.batch_norm_train(lin, gain, bias, NORM_EPS)?
            } else {
                let mean = params.get(&format!("{}.running_mean", bn)).data().to_vec();
                let var = params.get(&format!("{}.running_var", bn)).data().to_vec();
                b.tape.batch_norm_eval(lin, gain, bias, &mean, &var, NORM_EPS)?
            };
            cur = b.tape.relu(normed);
        }
        cur
    };

    // Modality fusion.
    let mut fusion_attn = Vec::new();
    let modalities = [h_spatial, h_temporal, h_external];
    let h_final = if cfg.ablation == Ablation::ConcatFusion {
        b.tape.concat_cols(&modalities)?
    } else {
        // Scaled dot-product attention over the three modality vectors of
        // each record, batched as elementwise products and row sums.
        let scale = 1.0 / (cfg.hidden as f64).sqrt();
        let mut scores = vec![[None; 3]; 3];
        for i in 0..3 {
            for j in i..3 {
                let prod = b.tape.mul(modalities[i], modalities[j])?;
                let s = b.tape.row_sums(prod)?;
                let s = b.tape.scale(s, scale);
                scores[i][j] = Some(s);
                scores[j][i] = Some(s);
            }
        }
        let mut fused = Vec::with_capacity(3);
        for i in 0..3 {
            let row = b.tape.concat_cols(&[
                scores[i][0].unwrap(),
                scores[i][1].unwrap(),
                scores[i][2].unwrap(),
            ])?;
            let attn = b.tape.softmax_rows(row)?;
            fusion_attn.push(attn);
            let mut acc: Option<TensorRef> = None;
            for (j, &mj) in modalities.iter().enumerate() {
                let w = b.tape.slice_cols(attn, j, j + 1)?;
                let term = b.tape.scale_rows(mj, w)?;
                acc = Some(match acc {
                    None => term,
                    Some(a) => b.tape.add(a, term)?,
                });
            }
            fused.push(acc.unwrap());
        }
        b.tape.concat_cols(&fused)?
    };

    // Classifier head.
    let (rate1, rate2) = cfg.dropout;
    let active = mode.is_train();
    let (key1, key2) = match mode {
        Mode::Train { dropout_key } => (
            substream(dropout_key, "classifier-dropout-1"),
            substream(dropout_key, "classifier-dropout-2"),
        ),
        Mode::Eval => (0, 0),
    };
    let c1 = b.linear(h_final, "classifier.fc1.weight", "classifier.fc1.bias")?;
    let r1 = b.tape.relu(c1);
    let d1 = b.tape.dropout(r1, rate1, key1, active)?;
    let c2 = b.linear(d1, "classifier.fc2.weight", "classifier.fc2.bias")?;
    let r2 = b.tape.relu(c2);
    let d2 = b.tape.dropout(r2, rate2, key2, active)?;
    let logits = b.linear(d2, "classifier.fc3.weight", "classifier.fc3.bias")?;
    let probs = b.tape.softmax_rows(logits)?;

    Ok(Forward {
        tape: b.tape,
        logits,
        probs,
        param_refs: b.refs,
        attention,
        fusion_attn,
        bn_batch_stats,
    })
}

/// Eval-mode class probabilities as a plain tensor.
pub fn predict_probs<F: Element>(
    params: &ModelParams<F>,
    cfg: &ModelConfig,
    gt: &GraphTensors<F>,
    node_spatial: &Tensor<F>,
    temporal: &Tensor<F>,
    external: &Tensor<F>,
    node_of_row: &[usize],
) -> Result<Tensor<F>> {
    let fwd = forward(
        params,
        cfg,
        gt,
        node_spatial,
        temporal,
        external,
        node_of_row,
        Mode::Eval,
    )?;
    Ok(fwd.tape.value(fwd.probs).clone())
}
