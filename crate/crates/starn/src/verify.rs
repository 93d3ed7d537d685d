//! Numerical verification batteries: central-difference gradient checks for
//! every differentiable tape operation and for the assembled model. Shared
//! by the test suite and the `gradcheck` command so both report the same
//! numbers.

use std::collections::BTreeMap;

use crate::diffcore::{GradCheck, GradCheckReport, Graph, Tensor, TensorRef};
use crate::error::Result;
use crate::model::{
    forward, GraphTensors, Mode, ModelConfig, ModelParams, ParamKind, EDGE_FEAT_DIM, NUM_CLASSES,
};
use crate::rng::stream_rng;

/// Outcome of one operation's check, with the threshold it was held to.
pub struct OpCheck {
    pub name: &'static str,
    pub report: GradCheckReport,
    pub threshold: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.report.checked > 0 && self.report.max_rel_diff <= self.threshold
    }
}

fn rand_tensor(shape: &[usize], lo: f64, hi: f64, seed: u64, label: &str) -> Tensor<f64> {
    use rand::Rng;
    let mut rng = stream_rng(seed, label);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_vec(shape, data).expect("shape/data agree")
}

/// Mixing weights so the scalar loss is sensitive to every output entry;
/// a plain sum would hide direction-dependent errors in normalizing ops.
fn mix_weights(shape: &[usize], label: &str) -> Tensor<f64> {
    rand_tensor(shape, 0.25, 1.75, 0xC0FFEE, label)
}

type BuildOp = dyn Fn(&mut Graph<f64>, &[TensorRef]) -> Result<TensorRef>;

fn check_op(
    name: &'static str,
    threshold: f64,
    inputs: Vec<Tensor<f64>>,
    build: Box<BuildOp>,
) -> Result<OpCheck> {
    let run = |xs: &[Tensor<f64>]| -> Result<(Graph<f64>, Vec<TensorRef>, TensorRef)> {
        let mut g = Graph::new();
        let refs: Vec<TensorRef> = xs.iter().map(|x| g.param(x.clone())).collect();
        let out = build(&mut g, &refs)?;
        let w = g.constant(mix_weights(g.value(out).shape(), name));
        let prod = g.mul(out, w)?;
        let loss = g.sum(prod);
        Ok((g, refs, loss))
    };
    let eval_loss = |xs: &[Tensor<f64>]| -> Result<f64> {
        let (g, _, loss) = run(xs)?;
        Ok(g.value(loss).item())
    };
    let eval_grad = |xs: &[Tensor<f64>]| -> Result<Vec<Tensor<f64>>> {
        let (g, refs, loss) = run(xs)?;
        let grads = g.backward(loss)?;
        Ok(refs
            .iter()
            .map(|&r| {
                grads
                    .get(r)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(g.value(r).shape()))
            })
            .collect())
    };
    let report = GradCheck::default().run(&inputs, eval_loss, eval_grad)?;
    Ok(OpCheck {
        name,
        report,
        threshold,
    })
}

/// Checks every differentiable tape operation against central differences.
/// Inputs are seeded, so successive runs compare identical numbers.
pub fn check_all_ops(seed: u64) -> Result<Vec<OpCheck>> {
    const TOL: f64 = 1e-6;
    let t = |shape: &[usize], lo: f64, hi: f64, label: &str| rand_tensor(shape, lo, hi, seed, label);
    let mut out = Vec::new();

    out.push(check_op(
        "matmul",
        TOL,
        vec![t(&[3, 4], -1.5, 1.5, "matmul-a"), t(&[4, 2], -1.5, 1.5, "matmul-b")],
        Box::new(|g, r| g.matmul(r[0], r[1])),
    )?);
    out.push(check_op(
        "add_bias",
        TOL,
        vec![t(&[3, 4], -1.5, 1.5, "ab-x"), t(&[4], -1.0, 1.0, "ab-b")],
        Box::new(|g, r| g.add_bias(r[0], r[1])),
    )?);
    out.push(check_op(
        "add",
        TOL,
        vec![t(&[3, 4], -1.5, 1.5, "add-a"), t(&[3, 4], -1.5, 1.5, "add-b")],
        Box::new(|g, r| g.add(r[0], r[1])),
    )?);
    out.push(check_op(
        "sub",
        TOL,
        vec![t(&[3, 4], -1.5, 1.5, "sub-a"), t(&[3, 4], -1.5, 1.5, "sub-b")],
        Box::new(|g, r| g.sub(r[0], r[1])),
    )?);
    out.push(check_op(
        "mul",
        TOL,
        vec![t(&[3, 4], -1.5, 1.5, "mul-a"), t(&[3, 4], -1.5, 1.5, "mul-b")],
        Box::new(|g, r| g.mul(r[0], r[1])),
    )?);
    out.push(check_op(
        "scale",
        TOL,
        vec![t(&[3, 4], -1.5, 1.5, "scale-x")],
        Box::new(|g, r| Ok(g.scale(r[0], 1.7))),
    )?);
    out.push(check_op(
        "exp",
        TOL,
        vec![t(&[3, 4], -1.0, 1.0, "exp-x")],
        Box::new(|g, r| Ok(g.exp(r[0]))),
    )?);
    out.push(check_op(
        "log",
        TOL,
        vec![t(&[3, 4], 0.5, 2.0, "log-x")],
        Box::new(|g, r| Ok(g.log(r[0]))),
    )?);
    out.push(check_op(
        "relu",
        TOL,
        vec![t(&[3, 4], -1.5, 1.5, "relu-x")],
        Box::new(|g, r| Ok(g.relu(r[0]))),
    )?);
    out.push(check_op(
        "leaky_relu",
        TOL,
        vec![t(&[3, 4], -1.5, 1.5, "lrelu-x")],
        Box::new(|g, r| Ok(g.leaky_relu(r[0], 0.2))),
    )?);
    out.push(check_op(
        "elu",
        TOL,
        vec![t(&[3, 4], -1.5, 1.5, "elu-x")],
        Box::new(|g, r| Ok(g.elu(r[0], 1.0))),
    )?);
    out.push(check_op(
        "softmax_rows",
        TOL,
        vec![t(&[3, 4], -2.0, 2.0, "sm-x")],
        Box::new(|g, r| g.softmax_rows(r[0])),
    )?);
    out.push(check_op(
        "segment_softmax",
        TOL,
        vec![t(&[6, 1], -2.0, 2.0, "segsm-x")],
        Box::new(|g, r| g.segment_softmax(r[0], vec![0, 2, 5, 6])),
    )?);
    out.push(check_op(
        "layer_norm",
        TOL,
        vec![
            t(&[3, 4], -1.5, 1.5, "ln-x"),
            t(&[4], 0.5, 1.5, "ln-g"),
            t(&[4], -0.5, 0.5, "ln-b"),
        ],
        Box::new(|g, r| g.layer_norm(r[0], r[1], r[2], 1e-5)),
    )?);
    out.push(check_op(
        "batch_norm_train",
        TOL,
        vec![
            t(&[5, 3], -1.5, 1.5, "bnt-x"),
            t(&[3], 0.5, 1.5, "bnt-g"),
            t(&[3], -0.5, 0.5, "bnt-b"),
        ],
        Box::new(|g, r| g.batch_norm_train(r[0], r[1], r[2], 1e-5)),
    )?);
    out.push(check_op(
        "batch_norm_eval",
        TOL,
        vec![
            t(&[3, 4], -1.5, 1.5, "bne-x"),
            t(&[4], 0.5, 1.5, "bne-g"),
            t(&[4], -0.5, 0.5, "bne-b"),
        ],
        Box::new(|g, r| {
            g.batch_norm_eval(
                r[0],
                r[1],
                r[2],
                &[0.1, -0.2, 0.05, 0.3],
                &[1.1, 0.7, 1.4, 0.9],
                1e-5,
            )
        }),
    )?);
    out.push(check_op(
        "dropout",
        TOL,
        vec![t(&[4, 5], -1.5, 1.5, "do-x")],
        Box::new(|g, r| g.dropout(r[0], 0.4, 7, true)),
    )?);
    out.push(check_op(
        "concat_cols",
        TOL,
        vec![t(&[3, 2], -1.5, 1.5, "cc-a"), t(&[3, 3], -1.5, 1.5, "cc-b")],
        Box::new(|g, r| g.concat_cols(&[r[0], r[1]])),
    )?);
    out.push(check_op(
        "concat_rows",
        TOL,
        vec![t(&[2, 3], -1.5, 1.5, "cr-a"), t(&[3, 3], -1.5, 1.5, "cr-b")],
        Box::new(|g, r| g.concat_rows(&[r[0], r[1]])),
    )?);
    out.push(check_op(
        "flatten",
        TOL,
        vec![t(&[2, 3], -1.5, 1.5, "fl-x")],
        Box::new(|g, r| Ok(g.flatten(r[0]))),
    )?);
    out.push(check_op(
        "slice_cols",
        TOL,
        vec![t(&[3, 5], -1.5, 1.5, "sc-x")],
        Box::new(|g, r| g.slice_cols(r[0], 1, 4)),
    )?);
    out.push(check_op(
        "gather_rows",
        TOL,
        // A repeated index exercises gradient accumulation into one row.
        vec![t(&[4, 3], -1.5, 1.5, "gr-x")],
        Box::new(|g, r| g.gather_rows(r[0], &[2, 0, 3, 3])),
    )?);
    out.push(check_op(
        "scatter_add_rows",
        TOL,
        vec![t(&[4, 3], -1.5, 1.5, "sa-x")],
        Box::new(|g, r| g.scatter_add_rows(r[0], &[2, 0, 2, 1], 3)),
    )?);
    out.push(check_op(
        "scale_rows",
        TOL,
        vec![t(&[3, 4], -1.5, 1.5, "sr-x"), t(&[3, 1], 0.25, 1.75, "sr-s")],
        Box::new(|g, r| g.scale_rows(r[0], r[1])),
    )?);
    out.push(check_op(
        "row_sums",
        TOL,
        vec![t(&[3, 4], -1.5, 1.5, "rs-x")],
        Box::new(|g, r| g.row_sums(r[0])),
    )?);
    out.push(check_op(
        "sum",
        TOL,
        vec![t(&[3, 4], -1.5, 1.5, "sum-x")],
        Box::new(|g, r| Ok(g.sum(r[0]))),
    )?);
    out.push(check_op(
        "mean",
        TOL,
        vec![t(&[3, 4], -1.5, 1.5, "mean-x")],
        Box::new(|g, r| Ok(g.mean(r[0]))),
    )?);
    out.push(check_op(
        "focal_loss",
        TOL,
        // Rows normalized away from the probability floor; the finite step
        // leaves them strictly positive.
        vec![{
            let mut p = t(&[3, 4], 0.1, 0.9, "fo-p");
            for r in 0..3 {
                let row = p.row_mut(r);
                let s: f64 = row.iter().sum();
                for v in row {
                    *v /= s;
                }
            }
            p
        }],
        Box::new(|g, r| g.focal_loss(r[0], &[1, 0, 2], &[0.8, 1.2, 1.0, 1.0], 2.0)),
    )?);
    Ok(out)
}

/// A fixed 6-node graph with self-loops and a sorted edge list, small
/// enough for exhaustive finite differences yet multi-hop.
fn small_graph_tensors(seed: u64) -> GraphTensors<f64> {
    use rand::Rng;
    let n = 6;
    let pairs = [(0usize, 1usize), (1, 2), (2, 3), (3, 4), (4, 5), (0, 3), (1, 4)];
    let mut edges: Vec<(usize, usize)> = (0..n).map(|i| (i, i)).collect();
    for &(a, b) in &pairs {
        edges.push((a, b));
        edges.push((b, a));
    }
    edges.sort_unstable();
    let mut rng = stream_rng(seed, "verify-graph");
    let e = edges.len();
    let mut edge_feat = Tensor::zeros(&[e, EDGE_FEAT_DIM]);
    let mut src = Vec::with_capacity(e);
    let mut dst = Vec::with_capacity(e);
    for (i, &(a, b)) in edges.iter().enumerate() {
        src.push(a);
        dst.push(b);
        edge_feat.set(i, 0, rng.gen_range(0.0..1.0));
        edge_feat.set(i, 1, if rng.gen_bool(0.5) { 1.0 } else { 0.0 });
        let hot = rng.gen_range(0..3usize);
        edge_feat.set(i, 2 + hot, 1.0);
    }
    let mut offsets = vec![0usize; n + 1];
    for &s in &src {
        offsets[s + 1] += 1;
    }
    for i in 0..n {
        offsets[i + 1] += offsets[i];
    }
    GraphTensors {
        n_nodes: n,
        src,
        dst,
        offsets,
        edge_feat,
    }
}

/// Checks the gradient of the focal training loss through the whole
/// network on a 6-node graph. `max_coords = 0` checks every parameter
/// coordinate; `corrupt` deliberately biases one analytic gradient entry,
/// which a healthy harness must flag.
pub fn check_full_model(seed: u64, max_coords: usize, corrupt: bool) -> Result<OpCheck> {
    let cfg = ModelConfig {
        gat_layers: 2,
        heads: 2,
        hidden: 8,
        temporal_hidden: 6,
        classifier_hidden: (6, 5),
        dropout: (0.3, 0.2),
        leaky_slope: 0.2,
        ablation: crate::model::Ablation::Full,
    };
    let gt = small_graph_tensors(seed);
    let n = gt.n_nodes;
    let m = 8;
    let node_spatial = rand_tensor(&[n, 9], -1.5, 1.5, seed, "verify-spatial");
    let temporal = rand_tensor(&[m, 11], -1.0, 1.0, seed, "verify-temporal");
    let external = rand_tensor(&[m, 8], -1.5, 1.5, seed, "verify-external");
    let node_of_row: Vec<usize> = (0..m).map(|i| i % n).collect();
    let targets: Vec<usize> = (0..m).map(|i| (i * 7 + 1) % NUM_CLASSES).collect();
    let alphas = [0.9, 1.1, 1.0, 1.3];

    let base = crate::model::init_params::<f64>(&cfg, seed)?;
    let names: Vec<String> = base
        .tensors()
        .iter()
        .filter(|t| t.kind != ParamKind::Stat)
        .map(|t| t.name.clone())
        .collect();
    let inputs: Vec<Tensor<f64>> = names.iter().map(|n| base.get(n).clone()).collect();

    let assemble = |xs: &[Tensor<f64>]| -> Result<ModelParams<f64>> {
        let mut p = base.clone();
        for (name, x) in names.iter().zip(xs) {
            *p.get_mut(name) = x.clone();
        }
        Ok(p)
    };
    type Built = (Graph<f64>, TensorRef, BTreeMap<String, TensorRef>);
    let build = |xs: &[Tensor<f64>]| -> Result<Built> {
        let params = assemble(xs)?;
        let fwd = forward(
            &params,
            &cfg,
            &gt,
            &node_spatial,
            &temporal,
            &external,
            &node_of_row,
            Mode::Train { dropout_key: 99 },
        )?;
        let mut tape = fwd.tape;
        let loss = tape.focal_loss(fwd.probs, &targets, &alphas, 2.0)?;
        Ok((tape, loss, fwd.param_refs))
    };
    let eval_loss = |xs: &[Tensor<f64>]| -> Result<f64> {
        let (tape, loss, _) = build(xs)?;
        Ok(tape.value(loss).item())
    };
    let eval_grad = |xs: &[Tensor<f64>]| -> Result<Vec<Tensor<f64>>> {
        let (tape, loss, refs) = build(xs)?;
        let grads = tape.backward(loss)?;
        let mut out = Vec::with_capacity(names.len());
        for (name, x) in names.iter().zip(xs) {
            let g = refs
                .get(name)
                .and_then(|&r| grads.get(r).cloned())
                .unwrap_or_else(|| Tensor::zeros(x.shape()));
            out.push(g);
        }
        if corrupt {
            // Bias every entry so the fault is visible no matter which
            // coordinates the sampler draws.
            for g in &mut out {
                for v in g.data_mut() {
                    *v += 1e-2;
                }
            }
        }
        Ok(out)
    };
    let checker = GradCheck {
        max_coords,
        seed,
        ..GradCheck::default()
    };
    let report = checker.run(&inputs, eval_loss, eval_grad)?;
    Ok(OpCheck {
        name: "full_model",
        report,
        threshold: 1e-5,
    })
}
