//! Reverse-mode automatic differentiation on an arena of tensors.
//!
//! Nodes are appended in construction order, which is therefore a valid
//! topological order; the backward pass is a single reverse scan. All
//! reductions accumulate in a fixed sequential order so results are
//! reproducible bit for bit, with or without the `parallel` feature.

use crate::diffcore::tensor::{Element, Tensor};
use crate::error::{Result, StarnError};
use crate::par;
use crate::rng::counter_uniform;

/// Handle to a node in a [`Graph`] arena.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct TensorRef(pub(crate) usize);

/// Probabilities below this contribute a clamped, zero-gradient term to the
/// focal loss instead of producing infinities.
pub const PROB_FLOOR: f64 = 1e-12;

enum Op<F> {
    Leaf,
    Matmul {
        a: usize,
        b: usize,
    },
    AddBias {
        x: usize,
        b: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        c: F,
    },
    Exp {
        x: usize,
    },
    Log {
        x: usize,
    },
    Relu {
        x: usize,
    },
    LeakyRelu {
        x: usize,
        slope: F,
    },
    Elu {
        x: usize,
        alpha: F,
    },
    SoftmaxRows {
        x: usize,
    },
    SegmentSoftmax {
        x: usize,
        offsets: Vec<usize>,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        eps: F,
    },
    BatchNormTrain {
        x: usize,
        gain: usize,
        bias: usize,
        eps: F,
    },
    BatchNormEval {
        x: usize,
        gain: usize,
        bias: usize,
        mean: Vec<F>,
        var: Vec<F>,
        eps: F,
    },
    Dropout {
        x: usize,
        rate: f64,
        key: u64,
        active: bool,
    },
    ConcatCols {
        xs: Vec<usize>,
    },
    ConcatRows {
        xs: Vec<usize>,
    },
    Flatten {
        x: usize,
    },
    SliceCols {
        x: usize,
        start: usize,
        end: usize,
    },
    GatherRows {
        x: usize,
        idx: Vec<usize>,
    },
    ScatterAddRows {
        x: usize,
        idx: Vec<usize>,
    },
    ScaleRows {
        x: usize,
        s: usize,
    },
    RowSums {
        x: usize,
    },
    Sum {
        x: usize,
    },
    Mean {
        x: usize,
    },
    Focal {
        probs: usize,
        targets: Vec<usize>,
        alpha: Vec<F>,
        gamma: F,
    },
}

struct Node<F: Element> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Tape of tensor operations supporting a single backward sweep.
pub struct Graph<F: Element> {
    nodes: Vec<Node<F>>,
}

/// Per-node gradients produced by [`Graph::backward`]. Nodes the loss does
/// not depend on (or that do not require gradients) hold `None`.
pub struct Gradients<F: Element> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Element> Gradients<F> {
    pub fn get(&self, r: TensorRef) -> Option<&Tensor<F>> {
        self.grads.get(r.0).and_then(|g| g.as_ref())
    }
}

/// Column means and population variances of a rank-2 tensor. Shared by the
/// batch-norm forward, its backward, and the running-stat update in training
/// so all three see identical statistics.
pub fn column_stats<F: Element>(x: &Tensor<F>) -> (Vec<F>, Vec<F>) {
    let (r, c) = (x.rows(), x.cols());
    let inv_r = F::from_f64(1.0 / r as f64);
    let mut mean = vec![F::ZERO; c];
    for i in 0..r {
        let row = x.row(i);
        for j in 0..c {
            mean[j] += row[j];
        }
    }
    for m in mean.iter_mut() {
        *m *= inv_r;
    }
    let mut var = vec![F::ZERO; c];
    for i in 0..r {
        let row = x.row(i);
        for j in 0..c {
            let d = row[j] - mean[j];
            var[j] += d * d;
        }
    }
    for v in var.iter_mut() {
        *v *= inv_r;
    }
    (mean, var)
}

/// `a (m,k) * b (k,n)`, row-major ikj loop.
pub fn matmul<F: Element>(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = Tensor::zeros(&[m, n]);
    let bd = b.data();
    let cost = m * k * n;
    let fill = |i: usize, row: &mut [F]| {
        let ar = a.row(i);
        for (t, &s) in ar.iter().enumerate().take(k) {
            let br = &bd[t * n..(t + 1) * n];
            for j in 0..n {
                row[j] += s * br[j];
            }
        }
    };
    par::fill_rows(out.data_mut(), n, cost, fill);
    out
}

/// `a (m,k) * b^T` where `b` is stored as `(n,k)`.
pub fn matmul_nt<F: Element>(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    let (m, k, n) = (a.rows(), a.cols(), b.rows());
    let mut out = Tensor::zeros(&[m, n]);
    let cost = m * k * n;
    let fill = |i: usize, row: &mut [F]| {
        let ar = a.row(i);
        for (j, slot) in row.iter_mut().enumerate().take(n) {
            let br = b.row(j);
            let mut acc = F::ZERO;
            for t in 0..k {
                acc += ar[t] * br[t];
            }
            *slot = acc;
        }
    };
    par::fill_rows(out.data_mut(), n, cost, fill);
    out
}

/// `a^T * b` where `a` is stored as `(k,m)` and `b` as `(k,n)`.
pub fn matmul_tn<F: Element>(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    let (k, m, n) = (a.rows(), a.cols(), b.cols());
    let mut out = Tensor::zeros(&[m, n]);
    let cost = m * k * n;
    let fill = |i: usize, row: &mut [F]| {
        for t in 0..k {
            let s = a.at(t, i);
            let br = b.row(t);
            for j in 0..n {
                row[j] += s * br[j];
            }
        }
    };
    par::fill_rows(out.data_mut(), n, cost, fill);
    out
}

fn softmax_slice<F: Element>(xs: &[F], out: &mut [F]) {
    let mut m = xs[0];
    for &v in &xs[1..] {
        m = m.maximum(v);
    }
    let mut z = F::ZERO;
    for (o, &v) in out.iter_mut().zip(xs) {
        let e = (v - m).exp();
        *o = e;
        z += e;
    }
    let inv = F::ONE / z;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

impl<F: Element> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Element> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, r: TensorRef) -> &Tensor<F> {
        &self.nodes[r.0].value
    }

    pub fn requires_grad(&self, r: TensorRef) -> bool {
        self.nodes[r.0].requires_grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> TensorRef {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        TensorRef(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Inserts a tensor the loss is never differentiated against.
    pub fn constant(&mut self, t: Tensor<F>) -> TensorRef {
        self.push(t, Op::Leaf, false)
    }

    /// Inserts a tensor that receives a gradient.
    pub fn param(&mut self, t: Tensor<F>) -> TensorRef {
        self.push(t, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.rank() != 2 || tb.rank() != 2 || ta.cols() != tb.rows() {
            return Err(StarnError::shape(
                "matmul",
                format!("{:?} x {:?}", ta.shape(), tb.shape()),
            ));
        }
        let v = matmul(ta, tb);
        let rg = self.needs(&[a.0, b.0]);
        Ok(self.push(v, Op::Matmul { a: a.0, b: b.0 }, rg))
    }

    pub fn add_bias(&mut self, x: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let (tx, tb) = (&self.nodes[x.0].value, &self.nodes[b.0].value);
        if tx.rank() != 2 || tb.rank() != 1 || tb.numel() != tx.cols() {
            return Err(StarnError::shape(
                "add_bias",
                format!("{:?} + {:?}", tx.shape(), tb.shape()),
            ));
        }
        let cols = tx.cols();
        let bd = tb.data();
        let mut v = tx.clone();
        for row in v.data_mut().chunks_mut(cols) {
            for (o, &bv) in row.iter_mut().zip(bd) {
                *o += bv;
            }
        }
        let rg = self.needs(&[x.0, b.0]);
        Ok(self.push(v, Op::AddBias { x: x.0, b: b.0 }, rg))
    }

    fn binary(
        &mut self,
        a: TensorRef,
        b: TensorRef,
        name: &'static str,
        f: impl Fn(F, F) -> F,
        op: Op<F>,
    ) -> Result<TensorRef> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(StarnError::shape(
                name,
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&u, &v)| f(u, v))
            .collect();
        let v = Tensor::from_vec(ta.shape(), data)?;
        let rg = self.needs(&[a.0, b.0]);
        Ok(self.push(v, op, rg))
    }

    pub fn add(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.binary(a, b, "add", |u, v| u + v, Op::Add { a: a.0, b: b.0 })
    }

    pub fn sub(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.binary(a, b, "sub", |u, v| u - v, Op::Sub { a: a.0, b: b.0 })
    }

    pub fn mul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.binary(a, b, "mul", |u, v| u * v, Op::Mul { a: a.0, b: b.0 })
    }

    pub fn scale(&mut self, x: TensorRef, c: f64) -> TensorRef {
        let c = F::from_f64(c);
        let v = self.nodes[x.0].value.map(|u| u * c);
        let rg = self.nodes[x.0].requires_grad;
        self.push(v, Op::Scale { x: x.0, c }, rg)
    }

    fn unary(&mut self, x: TensorRef, f: impl Fn(F) -> F, op: Op<F>) -> TensorRef {
        let v = self.nodes[x.0].value.map(f);
        let rg = self.nodes[x.0].requires_grad;
        self.push(v, op, rg)
    }

    pub fn exp(&mut self, x: TensorRef) -> TensorRef {
        self.unary(x, |u| u.exp(), Op::Exp { x: x.0 })
    }

    pub fn log(&mut self, x: TensorRef) -> TensorRef {
        self.unary(x, |u| u.ln(), Op::Log { x: x.0 })
    }

    pub fn relu(&mut self, x: TensorRef) -> TensorRef {
        self.unary(x, |u| u.maximum(F::ZERO), Op::Relu { x: x.0 })
    }

    pub fn leaky_relu(&mut self, x: TensorRef, slope: f64) -> TensorRef {
        let s = F::from_f64(slope);
        self.unary(
            x,
            |u| if u > F::ZERO { u } else { u * s },
            Op::LeakyRelu { x: x.0, slope: s },
        )
    }

    pub fn elu(&mut self, x: TensorRef, alpha: f64) -> TensorRef {
        let a = F::from_f64(alpha);
        self.unary(
            x,
            |u| {
                if u > F::ZERO {
                    u
                } else {
                    a * (u.exp() - F::ONE)
                }
            },
            Op::Elu { x: x.0, alpha: a },
        )
    }

    pub fn softmax_rows(&mut self, x: TensorRef) -> Result<TensorRef> {
        let tx = &self.nodes[x.0].value;
        if tx.rank() != 2 || tx.cols() == 0 {
            return Err(StarnError::shape(
                "softmax_rows",
                format!("{:?}", tx.shape()),
            ));
        }
        let cols = tx.cols();
        let mut v = Tensor::zeros(tx.shape());
        for (i, chunk) in v.data_mut().chunks_mut(cols).enumerate() {
            softmax_slice(tx.row(i), chunk);
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(v, Op::SoftmaxRows { x: x.0 }, rg))
    }

    /// Softmax over contiguous row segments of an `(n, 1)` column, given
    /// CSR-style offsets (`offsets[0] == 0`, `offsets.last() == n`).
    pub fn segment_softmax(&mut self, x: TensorRef, offsets: Vec<usize>) -> Result<TensorRef> {
        let tx = &self.nodes[x.0].value;
        if tx.rank() != 2 || tx.cols() != 1 {
            return Err(StarnError::shape(
                "segment_softmax",
                format!("expected a column, got {:?}", tx.shape()),
            ));
        }
        let n = tx.rows();
        let valid = offsets.first() == Some(&0)
            && offsets.last() == Some(&n)
            && offsets.windows(2).all(|w| w[0] <= w[1]);
        if !valid {
            return Err(StarnError::shape(
                "segment_softmax",
                format!("bad offsets for {} rows", n),
            ));
        }
        let mut v = Tensor::zeros(tx.shape());
        for w in offsets.windows(2) {
            let (s, e) = (w[0], w[1]);
            if s < e {
                softmax_slice(&tx.data()[s..e], &mut v.data_mut()[s..e]);
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(v, Op::SegmentSoftmax { x: x.0, offsets }, rg))
    }

    pub fn layer_norm(
        &mut self,
        x: TensorRef,
        gain: TensorRef,
        bias: TensorRef,
        eps: f64,
    ) -> Result<TensorRef> {
        let (tx, tg, tb) = (
            &self.nodes[x.0].value,
            &self.nodes[gain.0].value,
            &self.nodes[bias.0].value,
        );
        let c = tx.cols();
        if tx.rank() != 2 || tg.numel() != c || tb.numel() != c {
            return Err(StarnError::shape(
                "layer_norm",
                format!("x {:?} gain {:?} bias {:?}", tx.shape(), tg.shape(), tb.shape()),
            ));
        }
        let epsf = F::from_f64(eps);
        let inv_c = F::from_f64(1.0 / c as f64);
        let (gd, bd) = (tg.data(), tb.data());
        let mut v = Tensor::zeros(tx.shape());
        for i in 0..tx.rows() {
            let row = tx.row(i);
            let mut m = F::ZERO;
            for &u in row {
                m += u;
            }
            m *= inv_c;
            let mut var = F::ZERO;
            for &u in row {
                let d = u - m;
                var += d * d;
            }
            var *= inv_c;
            let inv = F::ONE / (var + epsf).sqrt();
            let out = v.row_mut(i);
            for j in 0..c {
                out[j] = gd[j] * ((row[j] - m) * inv) + bd[j];
            }
        }
        let rg = self.needs(&[x.0, gain.0, bias.0]);
        Ok(self.push(
            v,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                eps: epsf,
            },
            rg,
        ))
    }

    /// Batch normalization using statistics of the current batch. Requires
    /// at least two rows; a singleton batch has zero variance and no usable
    /// gradient signal.
    pub fn batch_norm_train(
        &mut self,
        x: TensorRef,
        gain: TensorRef,
        bias: TensorRef,
        eps: f64,
    ) -> Result<TensorRef> {
        let (tx, tg, tb) = (
            &self.nodes[x.0].value,
            &self.nodes[gain.0].value,
            &self.nodes[bias.0].value,
        );
        let c = tx.cols();
        if tx.rank() != 2 || tg.numel() != c || tb.numel() != c {
            return Err(StarnError::shape(
                "batch_norm",
                format!("x {:?} gain {:?} bias {:?}", tx.shape(), tg.shape(), tb.shape()),
            ));
        }
        if tx.rows() < 2 {
            return Err(StarnError::shape(
                "batch_norm",
                "training batch must have at least 2 rows".to_string(),
            ));
        }
        let epsf = F::from_f64(eps);
        let (mean, var) = column_stats(tx);
        let inv: Vec<F> = var.iter().map(|&v| F::ONE / (v + epsf).sqrt()).collect();
        let (gd, bd) = (tg.data(), tb.data());
        let mut v = Tensor::zeros(tx.shape());
        for i in 0..tx.rows() {
            let row = tx.row(i);
            let out = v.row_mut(i);
            for j in 0..c {
                out[j] = gd[j] * ((row[j] - mean[j]) * inv[j]) + bd[j];
            }
        }
        let rg = self.needs(&[x.0, gain.0, bias.0]);
        Ok(self.push(
            v,
            Op::BatchNormTrain {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                eps: epsf,
            },
            rg,
        ))
    }

    /// Batch normalization with frozen statistics, for inference.
    pub fn batch_norm_eval(
        &mut self,
        x: TensorRef,
        gain: TensorRef,
        bias: TensorRef,
        mean: &[F],
        var: &[F],
        eps: f64,
    ) -> Result<TensorRef> {
        let (tx, tg, tb) = (
            &self.nodes[x.0].value,
            &self.nodes[gain.0].value,
            &self.nodes[bias.0].value,
        );
        let c = tx.cols();
        if tx.rank() != 2 || tg.numel() != c || tb.numel() != c || mean.len() != c || var.len() != c
        {
            return Err(StarnError::shape(
                "batch_norm_eval",
                format!("x {:?} with {} stats", tx.shape(), mean.len()),
            ));
        }
        let epsf = F::from_f64(eps);
        let inv: Vec<F> = var.iter().map(|&v| F::ONE / (v + epsf).sqrt()).collect();
        let (gd, bd) = (tg.data(), tb.data());
        let mut v = Tensor::zeros(tx.shape());
        for i in 0..tx.rows() {
            let row = tx.row(i);
            let out = v.row_mut(i);
            for j in 0..c {
                out[j] = gd[j] * ((row[j] - mean[j]) * inv[j]) + bd[j];
            }
        }
        let rg = self.needs(&[x.0, gain.0, bias.0]);
        Ok(self.push(
            v,
            Op::BatchNormEval {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                mean: mean.to_vec(),
                var: var.to_vec(),
                eps: epsf,
            },
            rg,
        ))
    }

    /// Inverted dropout with a counter-based mask: element `i` keeps its
    /// value iff `counter_uniform(key, i) >= rate`. The mask depends only on
    /// `key`, never on call order, so replays are exact.
    pub fn dropout(&mut self, x: TensorRef, rate: f64, key: u64, active: bool) -> Result<TensorRef> {
        if !(0.0..1.0).contains(&rate) {
            return Err(StarnError::Config(format!(
                "dropout rate {} outside [0, 1)",
                rate
            )));
        }
        let tx = &self.nodes[x.0].value;
        let rg = self.nodes[x.0].requires_grad;
        let v = if active && rate > 0.0 {
            let keep_scale = F::from_f64(1.0 / (1.0 - rate));
            let mut v = tx.clone();
            for (i, u) in v.data_mut().iter_mut().enumerate() {
                if counter_uniform(key, i as u64) < rate {
                    *u = F::ZERO;
                } else {
                    *u *= keep_scale;
                }
            }
            v
        } else {
            tx.clone()
        };
        Ok(self.push(
            v,
            Op::Dropout {
                x: x.0,
                rate,
                key,
                active: active && rate > 0.0,
            },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, xs: &[TensorRef]) -> Result<TensorRef> {
        if xs.is_empty() {
            return Err(StarnError::shape("concat_cols", "no inputs".to_string()));
        }
        let r = self.nodes[xs[0].0].value.rows();
        let mut total = 0;
        for x in xs {
            let t = &self.nodes[x.0].value;
            if t.rank() != 2 || t.rows() != r {
                return Err(StarnError::shape(
                    "concat_cols",
                    format!("row mismatch: {:?}", t.shape()),
                ));
            }
            total += t.cols();
        }
        let mut v = Tensor::zeros(&[r, total]);
        for i in 0..r {
            let out = v.row_mut(i);
            let mut at = 0;
            for x in xs {
                let t = &self.nodes[x.0].value;
                let c = t.cols();
                out[at..at + c].copy_from_slice(t.row(i));
                at += c;
            }
        }
        let ids: Vec<usize> = xs.iter().map(|x| x.0).collect();
        let rg = self.needs(&ids);
        Ok(self.push(v, Op::ConcatCols { xs: ids }, rg))
    }

    pub fn concat_rows(&mut self, xs: &[TensorRef]) -> Result<TensorRef> {
        if xs.is_empty() {
            return Err(StarnError::shape("concat_rows", "no inputs".to_string()));
        }
        let c = self.nodes[xs[0].0].value.cols();
        let mut total = 0;
        for x in xs {
            let t = &self.nodes[x.0].value;
            if t.rank() != 2 || t.cols() != c {
                return Err(StarnError::shape(
                    "concat_rows",
                    format!("column mismatch: {:?}", t.shape()),
                ));
            }
            total += t.rows();
        }
        let mut data = Vec::with_capacity(total * c);
        for x in xs {
            data.extend_from_slice(self.nodes[x.0].value.data());
        }
        let v = Tensor::from_vec(&[total, c], data)?;
        let ids: Vec<usize> = xs.iter().map(|x| x.0).collect();
        let rg = self.needs(&ids);
        Ok(self.push(v, Op::ConcatRows { xs: ids }, rg))
    }

    /// Row-major reshape to a single `(1, n)` row.
    pub fn flatten(&mut self, x: TensorRef) -> TensorRef {
        let tx = &self.nodes[x.0].value;
        let n = tx.numel();
        let v = Tensor::from_vec(&[1, n], tx.data().to_vec()).expect("row-major view");
        let rg = self.nodes[x.0].requires_grad;
        self.push(v, Op::Flatten { x: x.0 }, rg)
    }

    pub fn slice_cols(&mut self, x: TensorRef, start: usize, end: usize) -> Result<TensorRef> {
        let tx = &self.nodes[x.0].value;
        if tx.rank() != 2 || start >= end || end > tx.cols() {
            return Err(StarnError::shape(
                "slice_cols",
                format!("[{start}, {end}) of {:?}", tx.shape()),
            ));
        }
        let r = tx.rows();
        let mut v = Tensor::zeros(&[r, end - start]);
        for i in 0..r {
            v.row_mut(i).copy_from_slice(&tx.row(i)[start..end]);
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(v, Op::SliceCols { x: x.0, start, end }, rg))
    }

    pub fn gather_rows(&mut self, x: TensorRef, idx: &[usize]) -> Result<TensorRef> {
        let tx = &self.nodes[x.0].value;
        if tx.rank() != 2 {
            return Err(StarnError::shape("gather_rows", format!("{:?}", tx.shape())));
        }
        let r = tx.rows();
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(StarnError::shape(
                "gather_rows",
                format!("index {} out of {} rows", bad, r),
            ));
        }
        let c = tx.cols();
        let mut v = Tensor::zeros(&[idx.len(), c]);
        for (e, &i) in idx.iter().enumerate() {
            v.row_mut(e).copy_from_slice(tx.row(i));
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(
            v,
            Op::GatherRows {
                x: x.0,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Sums row `e` of `x` into output row `idx[e]`. Accumulation runs in
    /// input order, keeping floating-point results reproducible.
    pub fn scatter_add_rows(
        &mut self,
        x: TensorRef,
        idx: &[usize],
        out_rows: usize,
    ) -> Result<TensorRef> {
        let tx = &self.nodes[x.0].value;
        if tx.rank() != 2 || idx.len() != tx.rows() {
            return Err(StarnError::shape(
                "scatter_add_rows",
                format!("{} indices for {:?}", idx.len(), tx.shape()),
            ));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= out_rows) {
            return Err(StarnError::shape(
                "scatter_add_rows",
                format!("index {} out of {} rows", bad, out_rows),
            ));
        }
        let c = tx.cols();
        let mut v = Tensor::zeros(&[out_rows, c]);
        for (e, &i) in idx.iter().enumerate() {
            let src = tx.row(e);
            let dst = v.row_mut(i);
            for j in 0..c {
                dst[j] += src[j];
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(
            v,
            Op::ScatterAddRows {
                x: x.0,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Multiplies each row of `x` by the matching entry of column `s`.
    pub fn scale_rows(&mut self, x: TensorRef, s: TensorRef) -> Result<TensorRef> {
        let (tx, ts) = (&self.nodes[x.0].value, &self.nodes[s.0].value);
        if tx.rank() != 2 || ts.numel() != tx.rows() {
            return Err(StarnError::shape(
                "scale_rows",
                format!("x {:?} s {:?}", tx.shape(), ts.shape()),
            ));
        }
        let sd = ts.data();
        let mut v = tx.clone();
        for (i, row) in v.data_mut().chunks_mut(tx.cols()).enumerate() {
            let f = sd[i];
            for u in row.iter_mut() {
                *u *= f;
            }
        }
        let rg = self.needs(&[x.0, s.0]);
        Ok(self.push(v, Op::ScaleRows { x: x.0, s: s.0 }, rg))
    }

    /// Sums each row to a single column: `(r, c) -> (r, 1)`.
    pub fn row_sums(&mut self, x: TensorRef) -> Result<TensorRef> {
        let tx = &self.nodes[x.0].value;
        if tx.rank() != 2 {
            return Err(StarnError::shape("row_sums", format!("{:?}", tx.shape())));
        }
        let r = tx.rows();
        let mut v = Tensor::zeros(&[r, 1]);
        for i in 0..r {
            let mut acc = F::ZERO;
            for &u in tx.row(i) {
                acc += u;
            }
            v.data_mut()[i] = acc;
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(v, Op::RowSums { x: x.0 }, rg))
    }

    pub fn sum(&mut self, x: TensorRef) -> TensorRef {
        let mut acc = F::ZERO;
        for &u in self.nodes[x.0].value.data() {
            acc += u;
        }
        let rg = self.nodes[x.0].requires_grad;
        self.push(Tensor::scalar(acc), Op::Sum { x: x.0 }, rg)
    }

    pub fn mean(&mut self, x: TensorRef) -> TensorRef {
        let n = self.nodes[x.0].value.numel();
        let mut acc = F::ZERO;
        for &u in self.nodes[x.0].value.data() {
            acc += u;
        }
        let v = acc * F::from_f64(1.0 / n as f64);
        let rg = self.nodes[x.0].requires_grad;
        self.push(Tensor::scalar(v), Op::Mean { x: x.0 }, rg)
    }

    /// Class-weighted focal loss over a probability matrix `(n, classes)`.
    /// `alpha` holds one weight per class; `gamma = 0` reduces the loss to
    /// weighted cross-entropy exactly.
    pub fn focal_loss(
        &mut self,
        probs: TensorRef,
        targets: &[usize],
        alpha: &[f64],
        gamma: f64,
    ) -> Result<TensorRef> {
        let tp = &self.nodes[probs.0].value;
        let (n, c) = (tp.rows(), tp.cols());
        if tp.rank() != 2 || targets.len() != n || alpha.len() != c || n == 0 {
            return Err(StarnError::shape(
                "focal_loss",
                format!(
                    "probs {:?}, {} targets, {} alphas",
                    tp.shape(),
                    targets.len(),
                    alpha.len()
                ),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(StarnError::shape(
                "focal_loss",
                format!("target class {} out of {}", bad, c),
            ));
        }
        let gam = F::from_f64(gamma);
        let af: Vec<F> = alpha.iter().map(|&a| F::from_f64(a)).collect();
        let floor = F::from_f64(PROB_FLOOR);
        let mut acc = F::ZERO;
        for (i, &t) in targets.iter().enumerate() {
            let p = tp.at(i, t).minimum(F::ONE).maximum(floor);
            let focus = if gamma == 0.0 {
                F::ONE
            } else {
                (F::ONE - p).powf(gam)
            };
            acc += af[t] * focus * p.ln();
        }
        let v = -acc * F::from_f64(1.0 / n as f64);
        let rg = self.nodes[probs.0].requires_grad;
        Ok(self.push(
            Tensor::scalar(v),
            Op::Focal {
                probs: probs.0,
                targets: targets.to_vec(),
                alpha: af,
                gamma: gam,
            },
            rg,
        ))
    }

    /// Column statistics of a node's value, for running-stat updates.
    pub fn node_column_stats(&self, x: TensorRef) -> (Vec<F>, Vec<F>) {
        column_stats(&self.nodes[x.0].value)
    }

    /// Reverse sweep from a scalar loss node. Returns one gradient slot per
    /// node; only nodes with `requires_grad` along a path to the loss are
    /// populated.
    pub fn backward(&self, loss: TensorRef) -> Result<Gradients<F>> {
        let ln = &self.nodes[loss.0];
        if ln.value.numel() != 1 {
            return Err(StarnError::shape(
                "backward",
                format!("loss must be scalar, got {:?}", ln.value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !ln.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::from_vec(ln.value.shape(), vec![F::ONE])?);

        for i in (0..=loss.0).rev() {
            let g = match &grads[i] {
                Some(g) => g.clone(),
                None => continue,
            };
            self.accumulate(i, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn slot<'a>(
        grads: &'a mut [Option<Tensor<F>>],
        id: usize,
        shape: &[usize],
    ) -> &'a mut Tensor<F> {
        grads[id].get_or_insert_with(|| Tensor::zeros(shape))
    }

    fn accumulate(&self, i: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let rg = |id: usize| self.nodes[id].requires_grad;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                if rg(*a) {
                    let da = matmul_nt(g, tb);
                    let slot = Self::slot(grads, *a, ta.shape());
                    for (o, &u) in slot.data_mut().iter_mut().zip(da.data()) {
                        *o += u;
                    }
                }
                if rg(*b) {
                    let db = matmul_tn(ta, g);
                    let slot = Self::slot(grads, *b, tb.shape());
                    for (o, &u) in slot.data_mut().iter_mut().zip(db.data()) {
                        *o += u;
                    }
                }
            }
            Op::AddBias { x, b } => {
                if rg(*x) {
                    let shape = self.nodes[*x].value.shape().to_vec();
                    let slot = Self::slot(grads, *x, &shape);
                    for (o, &u) in slot.data_mut().iter_mut().zip(g.data()) {
                        *o += u;
                    }
                }
                if rg(*b) {
                    let c = g.cols();
                    let shape = self.nodes[*b].value.shape().to_vec();
                    let slot = Self::slot(grads, *b, &shape);
                    for row in g.data().chunks(c) {
                        for (o, &u) in slot.data_mut().iter_mut().zip(row) {
                            *o += u;
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for &id in [a, b] {
                    if rg(id) {
                        let shape = self.nodes[id].value.shape().to_vec();
                        let slot = Self::slot(grads, id, &shape);
                        for (o, &u) in slot.data_mut().iter_mut().zip(g.data()) {
                            *o += u;
                        }
                    }
                }
            }
            Op::Sub { a, b } => {
                if rg(*a) {
                    let shape = self.nodes[*a].value.shape().to_vec();
                    let slot = Self::slot(grads, *a, &shape);
                    for (o, &u) in slot.data_mut().iter_mut().zip(g.data()) {
                        *o += u;
                    }
                }
                if rg(*b) {
                    let shape = self.nodes[*b].value.shape().to_vec();
                    let slot = Self::slot(grads, *b, &shape);
                    for (o, &u) in slot.data_mut().iter_mut().zip(g.data()) {
                        *o -= u;
                    }
                }
            }
            Op::Mul { a, b } => {
                if rg(*a) {
                    let tb = &self.nodes[*b].value;
                    let shape = self.nodes[*a].value.shape().to_vec();
                    let slot = Self::slot(grads, *a, &shape);
                    for ((o, &u), &v) in slot.data_mut().iter_mut().zip(g.data()).zip(tb.data()) {
                        *o += u * v;
                    }
                }
                if rg(*b) {
                    let ta = &self.nodes[*a].value;
                    let shape = self.nodes[*b].value.shape().to_vec();
                    let slot = Self::slot(grads, *b, &shape);
                    for ((o, &u), &v) in slot.data_mut().iter_mut().zip(g.data()).zip(ta.data()) {
                        *o += u * v;
                    }
                }
            }
            Op::Scale { x, c } => {
                if rg(*x) {
                    let shape = self.nodes[*x].value.shape().to_vec();
                    let slot = Self::slot(grads, *x, &shape);
                    for (o, &u) in slot.data_mut().iter_mut().zip(g.data()) {
                        *o += u * *c;
                    }
                }
            }
            Op::Exp { x } => {
                if rg(*x) {
                    let y = &self.nodes[i].value;
                    let shape = self.nodes[*x].value.shape().to_vec();
                    let slot = Self::slot(grads, *x, &shape);
                    for ((o, &u), &yv) in slot.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *o += u * yv;
                    }
                }
            }
            Op::Log { x } => {
                if rg(*x) {
                    let tx = &self.nodes[*x].value;
                    let shape = tx.shape().to_vec();
                    let slot = Self::slot(grads, *x, &shape);
                    for ((o, &u), &xv) in slot.data_mut().iter_mut().zip(g.data()).zip(tx.data()) {
                        *o += u / xv;
                    }
                }
            }
            Op::Relu { x } => {
                if rg(*x) {
                    let tx = &self.nodes[*x].value;
                    let shape = tx.shape().to_vec();
                    let slot = Self::slot(grads, *x, &shape);
                    for ((o, &u), &xv) in slot.data_mut().iter_mut().zip(g.data()).zip(tx.data()) {
                        if xv > F::ZERO {
                            *o += u;
                        }
                    }
                }
            }
            Op::LeakyRelu { x, slope } => {
                if rg(*x) {
                    let tx = &self.nodes[*x].value;
                    let shape = tx.shape().to_vec();
                    let slot = Self::slot(grads, *x, &shape);
                    for ((o, &u), &xv) in slot.data_mut().iter_mut().zip(g.data()).zip(tx.data()) {
                        *o += if xv > F::ZERO { u } else { u * *slope };
                    }
                }
            }
            Op::Elu { x, alpha } => {
                if rg(*x) {
                    let tx = &self.nodes[*x].value;
                    let y = &self.nodes[i].value;
                    let shape = tx.shape().to_vec();
                    let slot = Self::slot(grads, *x, &shape);
                    for (j, (o, &u)) in slot.data_mut().iter_mut().zip(g.data()).enumerate() {
                        let xv = tx.data()[j];
                        // For x <= 0, dy/dx = alpha * e^x = y + alpha.
                        *o += if xv > F::ZERO {
                            u
                        } else {
                            u * (y.data()[j] + *alpha)
                        };
                    }
                }
            }
            Op::SoftmaxRows { x } => {
                if rg(*x) {
                    let y = &self.nodes[i].value;
                    let c = y.cols();
                    let shape = y.shape().to_vec();
                    let slot = Self::slot(grads, *x, &shape);
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let mut dot = F::ZERO;
                        for j in 0..c {
                            dot += yr[j] * gr[j];
                        }
                        let out = slot.row_mut(r);
                        for j in 0..c {
                            out[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::SegmentSoftmax { x, offsets } => {
                if rg(*x) {
                    let y = &self.nodes[i].value;
                    let shape = y.shape().to_vec();
                    let slot = Self::slot(grads, *x, &shape);
                    for w in offsets.windows(2) {
                        let (s, e) = (w[0], w[1]);
                        if s >= e {
                            continue;
                        }
                        let ys = &y.data()[s..e];
                        let gs = &g.data()[s..e];
                        let mut dot = F::ZERO;
                        for j in 0..ys.len() {
                            dot += ys[j] * gs[j];
                        }
                        let out = &mut slot.data_mut()[s..e];
                        for j in 0..ys.len() {
                            out[j] += ys[j] * (gs[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let tx = &self.nodes[*x].value;
                let tg = &self.nodes[*gain].value;
                let (r, c) = (tx.rows(), tx.cols());
                let inv_c = F::from_f64(1.0 / c as f64);
                // Recompute per-row statistics; cheaper than caching them.
                for row_i in 0..r {
                    let row = tx.row(row_i);
                    let gr = g.row(row_i);
                    let mut m = F::ZERO;
                    for &u in row {
                        m += u;
                    }
                    m *= inv_c;
                    let mut var = F::ZERO;
                    for &u in row {
                        let d = u - m;
                        var += d * d;
                    }
                    var *= inv_c;
                    let inv = F::ONE / (var + *eps).sqrt();
                    let xhat: Vec<F> = row.iter().map(|&u| (u - m) * inv).collect();
                    if rg(*gain) {
                        let shape = tg.shape().to_vec();
                        let slot = Self::slot(grads, *gain, &shape);
                        for j in 0..c {
                            slot.data_mut()[j] += gr[j] * xhat[j];
                        }
                    }
                    if rg(*bias) {
                        let shape = self.nodes[*bias].value.shape().to_vec();
                        let slot = Self::slot(grads, *bias, &shape);
                        for j in 0..c {
                            slot.data_mut()[j] += gr[j];
                        }
                    }
                    if rg(*x) {
                        let gh: Vec<F> = (0..c).map(|j| gr[j] * tg.data()[j]).collect();
                        let mut mean_gh = F::ZERO;
                        let mut mean_ghx = F::ZERO;
                        for j in 0..c {
                            mean_gh += gh[j];
                            mean_ghx += gh[j] * xhat[j];
                        }
                        mean_gh *= inv_c;
                        mean_ghx *= inv_c;
                        let shape = tx.shape().to_vec();
                        let slot = Self::slot(grads, *x, &shape);
                        let out = slot.row_mut(row_i);
                        for j in 0..c {
                            out[j] += inv * (gh[j] - mean_gh - xhat[j] * mean_ghx);
                        }
                    }
                }
            }
            Op::BatchNormTrain { x, gain, bias, eps } => {
                let tx = &self.nodes[*x].value;
                let tg = &self.nodes[*gain].value;
                let (r, c) = (tx.rows(), tx.cols());
                let inv_r = F::from_f64(1.0 / r as f64);
                let (mean, var) = column_stats(tx);
                for j in 0..c {
                    let inv = F::ONE / (var[j] + *eps).sqrt();
                    let gam = tg.data()[j];
                    let mut sum_g = F::ZERO;
                    let mut sum_gx = F::ZERO;
                    for row_i in 0..r {
                        let gv = g.at(row_i, j);
                        let xh = (tx.at(row_i, j) - mean[j]) * inv;
                        sum_g += gv;
                        sum_gx += gv * xh;
                    }
                    if rg(*gain) {
                        let shape = tg.shape().to_vec();
                        Self::slot(grads, *gain, &shape).data_mut()[j] += sum_gx;
                    }
                    if rg(*bias) {
                        let shape = self.nodes[*bias].value.shape().to_vec();
                        Self::slot(grads, *bias, &shape).data_mut()[j] += sum_g;
                    }
                    if rg(*x) {
                        let mean_g = sum_g * inv_r;
                        let mean_gx = sum_gx * inv_r;
                        let shape = tx.shape().to_vec();
                        let slot = Self::slot(grads, *x, &shape);
                        for row_i in 0..r {
                            let gv = g.at(row_i, j);
                            let xh = (tx.at(row_i, j) - mean[j]) * inv;
                            let d = gam * inv * (gv - mean_g - xh * mean_gx);
                            slot.data_mut()[row_i * c + j] += d;
                        }
                    }
                }
            }
            Op::BatchNormEval {
                x,
                gain,
                bias,
                mean,
                var,
                eps,
            } => {
                let tx = &self.nodes[*x].value;
                let tg = &self.nodes[*gain].value;
                let (r, c) = (tx.rows(), tx.cols());
                let inv: Vec<F> = var.iter().map(|&v| F::ONE / (v + *eps).sqrt()).collect();
                if rg(*x) {
                    let shape = tx.shape().to_vec();
                    let slot = Self::slot(grads, *x, &shape);
                    for row_i in 0..r {
                        let out = slot.row_mut(row_i);
                        let gr = g.row(row_i);
                        for j in 0..c {
                            out[j] += gr[j] * tg.data()[j] * inv[j];
                        }
                    }
                }
                if rg(*gain) {
                    let shape = tg.shape().to_vec();
                    let slot = Self::slot(grads, *gain, &shape);
                    for row_i in 0..r {
                        let gr = g.row(row_i);
                        let xr = tx.row(row_i);
                        for j in 0..c {
                            slot.data_mut()[j] += gr[j] * ((xr[j] - mean[j]) * inv[j]);
                        }
                    }
                }
                if rg(*bias) {
                    let shape = self.nodes[*bias].value.shape().to_vec();
                    let slot = Self::slot(grads, *bias, &shape);
                    for row_i in 0..r {
                        let gr = g.row(row_i);
                        for j in 0..c {
                            slot.data_mut()[j] += gr[j];
                        }
                    }
                }
            }
            Op::Dropout {
                x,
                rate,
                key,
                active,
            } => {
                if rg(*x) {
                    let shape = self.nodes[*x].value.shape().to_vec();
                    let slot = Self::slot(grads, *x, &shape);
                    if *active {
                        let keep_scale = F::from_f64(1.0 / (1.0 - rate));
                        for (j, (o, &u)) in slot.data_mut().iter_mut().zip(g.data()).enumerate() {
                            if counter_uniform(*key, j as u64) >= *rate {
                                *o += u * keep_scale;
                            }
                        }
                    } else {
                        for (o, &u) in slot.data_mut().iter_mut().zip(g.data()) {
                            *o += u;
                        }
                    }
                }
            }
            Op::ConcatCols { xs } => {
                let mut at = 0;
                for &id in xs {
                    let t = &self.nodes[id].value;
                    let c = t.cols();
                    if rg(id) {
                        let shape = t.shape().to_vec();
                        let slot = Self::slot(grads, id, &shape);
                        for r in 0..t.rows() {
                            let gr = &g.row(r)[at..at + c];
                            let out = slot.row_mut(r);
                            for j in 0..c {
                                out[j] += gr[j];
                            }
                        }
                    }
                    at += c;
                }
            }
            Op::ConcatRows { xs } => {
                let mut at = 0;
                for &id in xs {
                    let t = &self.nodes[id].value;
                    let n = t.numel();
                    if rg(id) {
                        let shape = t.shape().to_vec();
                        let slot = Self::slot(grads, id, &shape);
                        for (o, &u) in slot.data_mut().iter_mut().zip(&g.data()[at..at + n]) {
                            *o += u;
                        }
                    }
                    at += n;
                }
            }
            Op::Flatten { x } => {
                if rg(*x) {
                    let shape = self.nodes[*x].value.shape().to_vec();
                    let slot = Self::slot(grads, *x, &shape);
                    for (o, &u) in slot.data_mut().iter_mut().zip(g.data()) {
                        *o += u;
                    }
                }
            }
            Op::SliceCols { x, start, end } => {
                if rg(*x) {
                    let tx = &self.nodes[*x].value;
                    let shape = tx.shape().to_vec();
                    let slot = Self::slot(grads, *x, &shape);
                    for r in 0..tx.rows() {
                        let gr = g.row(r);
                        let out = slot.row_mut(r);
                        for (j, &u) in gr.iter().enumerate().take(end - start) {
                            out[start + j] += u;
                        }
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                if rg(*x) {
                    let shape = self.nodes[*x].value.shape().to_vec();
                    let slot = Self::slot(grads, *x, &shape);
                    for (e, &i_row) in idx.iter().enumerate() {
                        let gr = g.row(e);
                        let out = slot.row_mut(i_row);
                        for (o, &u) in out.iter_mut().zip(gr) {
                            *o += u;
                        }
                    }
                }
            }
            Op::ScatterAddRows { x, idx } => {
                if rg(*x) {
                    let shape = self.nodes[*x].value.shape().to_vec();
                    let slot = Self::slot(grads, *x, &shape);
                    for (e, &i_row) in idx.iter().enumerate() {
                        let gr = g.row(i_row);
                        let out = slot.row_mut(e);
                        for (o, &u) in out.iter_mut().zip(gr) {
                            *o += u;
                        }
                    }
                }
            }
            Op::ScaleRows { x, s } => {
                let tx = &self.nodes[*x].value;
                let ts = &self.nodes[*s].value;
                let c = tx.cols();
                if rg(*x) {
                    let shape = tx.shape().to_vec();
                    let slot = Self::slot(grads, *x, &shape);
                    for r in 0..tx.rows() {
                        let f = ts.data()[r];
                        let gr = g.row(r);
                        let out = slot.row_mut(r);
                        for j in 0..c {
                            out[j] += gr[j] * f;
                        }
                    }
                }
                if rg(*s) {
                    let shape = ts.shape().to_vec();
                    let slot = Self::slot(grads, *s, &shape);
                    for r in 0..tx.rows() {
                        let gr = g.row(r);
                        let xr = tx.row(r);
                        let mut acc = F::ZERO;
                        for j in 0..c {
                            acc += gr[j] * xr[j];
                        }
                        slot.data_mut()[r] += acc;
                    }
                }
            }
            Op::RowSums { x } => {
                if rg(*x) {
                    let tx = &self.nodes[*x].value;
                    let shape = tx.shape().to_vec();
                    let slot = Self::slot(grads, *x, &shape);
                    for r in 0..tx.rows() {
                        let u = g.data()[r];
                        for o in slot.row_mut(r) {
                            *o += u;
                        }
                    }
                }
            }
            Op::Sum { x } => {
                if rg(*x) {
                    let u = g.data()[0];
                    let shape = self.nodes[*x].value.shape().to_vec();
                    let slot = Self::slot(grads, *x, &shape);
                    for o in slot.data_mut() {
                        *o += u;
                    }
                }
            }
            Op::Mean { x } => {
                if rg(*x) {
                    let n = self.nodes[*x].value.numel();
                    let u = g.data()[0] * F::from_f64(1.0 / n as f64);
                    let shape = self.nodes[*x].value.shape().to_vec();
                    let slot = Self::slot(grads, *x, &shape);
                    for o in slot.data_mut() {
                        *o += u;
                    }
                }
            }
            Op::Focal {
                probs,
                targets,
                alpha,
                gamma,
            } => {
                if rg(*probs) {
                    let tp = &self.nodes[*probs].value;
                    let n = targets.len();
                    let gscale = g.data()[0] * F::from_f64(1.0 / n as f64);
                    let floor = F::from_f64(PROB_FLOOR);
                    let shape = tp.shape().to_vec();
                    let slot = Self::slot(grads, *probs, &shape);
                    for (row_i, &t) in targets.iter().enumerate() {
                        let p_raw = tp.at(row_i, t);
                        if p_raw < floor {
                            // Clamped: the loss is locally constant in p.
                            continue;
                        }
                        let p = p_raw.minimum(F::ONE);
                        let one_m = F::ONE - p;
                        // d/dp [ -(1-p)^g ln p ] = g (1-p)^{g-1} ln p - (1-p)^g / p
                        let d = if gamma.to_f64() == 0.0 {
                            -(F::ONE / p)
                        } else {
                            *gamma * one_m.powf(*gamma - F::ONE) * p.ln() - one_m.powf(*gamma) / p
                        };
                        slot.data_mut()[row_i * tp.cols() + t] += gscale * alpha[t] * d;
                    }
                }
            }
        }
    }
}
