use std::collections::BTreeMap;
use std::sync::OnceLock;

use super::*;
use crate::diffcore::Graph;
use crate::features::build_features;
use crate::graphbuild::{build_graph, GraphConfig};
use crate::ingest::split::stratified_split;
use crate::ingest::synth::{synth_generate, SynthConfig};
use crate::model::Ablation;

const ETA_MIN: f64 = 1e-6;
const ETA_MAX: f64 = 3e-4;

#[test]
fn cosine_schedule_hits_its_endpoints_exactly() {
    assert_eq!(cosine_lr(0, 50, ETA_MIN, ETA_MAX), ETA_MAX);
    assert_eq!(cosine_lr(50, 50, ETA_MIN, ETA_MAX), ETA_MIN);
    let mid = cosine_lr(25, 50, ETA_MIN, ETA_MAX);
    assert!((mid - 1.505e-4).abs() < 1e-12, "midpoint was {}", mid);
    // The loop feeds epoch % period, so the rate re-peaks at every multiple
    // of the restart period and never revisits the floor mid-run.
    for epoch in [0usize, 50, 100, 150] {
        assert_eq!(cosine_lr(epoch % 50, 50, ETA_MIN, ETA_MAX), ETA_MAX);
    }
    for t in 0..=50 {
        let lr = cosine_lr(t, 50, ETA_MIN, ETA_MAX);
        assert!((ETA_MIN..=ETA_MAX).contains(&lr));
        if t > 0 {
            assert!(lr < cosine_lr(t - 1, 50, ETA_MIN, ETA_MAX));
        }
    }
}

#[test]
fn clipping_rescales_only_oversized_gradients() {
    // Norm 0.5 is under the ceiling: untouched, norm reported.
    let mut small = vec![Tensor::<f64>::from_vec(&[2], vec![0.3, 0.4]).unwrap()];
    let norm = clip_gradients(&mut small, 1.0);
    assert!((norm - 0.5).abs() < 1e-15);
    assert_eq!(small[0].data(), &[0.3, 0.4]);

    // Norm 4 against tau 1: every entry shrinks by exactly 4.
    let mut big = vec![
        Tensor::<f64>::from_vec(&[2], vec![0.0, 2.4]).unwrap(),
        Tensor::<f64>::from_vec(&[2], vec![3.2, 0.0]).unwrap(),
    ];
    let norm = clip_gradients(&mut big, 1.0);
    assert!((norm - 4.0).abs() < 1e-12);
    assert!((big[0].data()[1] - 0.6).abs() < 1e-15);
    assert!((big[1].data()[0] - 0.8).abs() < 1e-15);
    let after: f64 = big.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
    assert!((after - 1.0).abs() < 1e-12);

    // All-zero gradients must not divide by the zero norm.
    let mut zero = vec![Tensor::<f64>::zeros(&[3])];
    let norm = clip_gradients(&mut zero, 1.0);
    assert_eq!(norm, 0.0);
    assert!(zero[0].data().iter().all(|v| *v == 0.0));
}

#[test]
fn inverse_frequency_weights_average_to_one() {
    let mut labels = vec![0usize; 10];
    labels.extend(vec![1usize; 20]);
    labels.extend(vec![2usize; 5]);
    labels.extend(vec![3usize; 5]);
    let a = class_alphas(&labels, 4).unwrap();
    let mean: f64 = a.iter().sum::<f64>() / 4.0;
    assert!((mean - 1.0).abs() < 1e-12);
    // Inverse frequency: the 20-sample class gets half the 10-sample weight,
    // the 5-sample classes double it.
    assert!((a[1] / a[0] - 0.5).abs() < 1e-12);
    assert!((a[2] / a[0] - 2.0).abs() < 1e-12);
    assert!((a[2] - a[3]).abs() < 1e-15);

    let missing = class_alphas(&[0, 1, 3, 0], 4);
    assert!(
        matches!(missing, Err(StarnError::Config(ref m)) if m.contains("class 2")),
        "{:?}",
        missing
    );
    assert!(matches!(class_alphas(&[0, 4], 4), Err(StarnError::Config(_))));
}

fn two_param_set() -> ModelParams<f64> {
    let mut p = ModelParams::new();
    p.push(
        "w".into(),
        ParamKind::Weight,
        Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap(),
    );
    p.push(
        "b".into(),
        ParamKind::Bias,
        Tensor::from_vec(&[2], vec![0.5, 0.25]).unwrap(),
    );
    p
}

#[test]
fn adamw_touches_only_parameters_with_gradients() {
    let mut params = two_param_set();
    let mut state = OptimizerState::new();
    let mut grads = BTreeMap::new();
    grads.insert("w".to_string(), Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap());
    adamw_step(&mut params, &grads, &mut state, 0.1, 0.0, &AdamW::default()).unwrap();
    // Bias had no gradient: no update, no decay, no moment entry.
    assert_eq!(params.get("b").data(), &[0.5, 0.25]);
    assert!(!state.m.contains_key("b"));
    assert!(params.get("w").data()[0] < 1.0);

    // A zero gradient with zero decay moves nothing but the step counter.
    let mut params2 = two_param_set();
    let mut state2 = OptimizerState::new();
    let mut zgrads = BTreeMap::new();
    zgrads.insert("w".to_string(), Tensor::<f64>::zeros(&[2]));
    adamw_step(&mut params2, &zgrads, &mut state2, 0.1, 0.0, &AdamW::default()).unwrap();
    assert_eq!(params2.get("w").data(), &[1.0, -2.0]);
    assert_eq!(state2.step, 1);

    // Gradients for running statistics are a caller bug.
    let mut params3 = two_param_set();
    params3.push("s".into(), ParamKind::Stat, Tensor::zeros(&[2]));
    let mut sgrads = BTreeMap::new();
    sgrads.insert("s".to_string(), Tensor::<f64>::zeros(&[2]));
    let err = adamw_step(&mut params3, &sgrads, &mut state, 0.1, 0.0, &AdamW::default());
    assert!(matches!(err, Err(StarnError::Config(_))));
}

#[test]
fn adamw_decays_weights_but_not_biases() {
    let mut params = two_param_set();
    let mut state = OptimizerState::new();
    let mut grads = BTreeMap::new();
    grads.insert("w".to_string(), Tensor::<f64>::zeros(&[2]));
    grads.insert("b".to_string(), Tensor::<f64>::zeros(&[2]));
    let (lr, wd) = (0.05, 0.2);
    adamw_step(&mut params, &grads, &mut state, lr, wd, &AdamW::default()).unwrap();
    // Zero gradient isolates the decay term: weights shrink multiplicatively,
    // biases are exempt.
    let factor = 1.0 - lr * wd;
    assert!((params.get("w").data()[0] - factor).abs() < 1e-15);
    assert!((params.get("w").data()[1] + 2.0 * factor).abs() < 1e-15);
    assert_eq!(params.get("b").data(), &[0.5, 0.25]);
}

#[test]
fn adamw_drives_a_quadratic_to_its_minimum() {
    // f(w) = 0.5 * (3 (w0 - 1.5)^2 + 0.5 (w1 + 2.0)^2), minimized at
    // (1.5, -2.0). Two hundred steps land within 1e-3.
    let target = [1.5, -2.0];
    let curv = [3.0, 0.5];
    let mut params = ModelParams::<f64>::new();
    params.push("w".into(), ParamKind::Weight, Tensor::zeros(&[2]));
    let mut state = OptimizerState::new();
    let opt = AdamW::default();
    for _ in 0..200 {
        let w = params.get("w").data().to_vec();
        let g: Vec<f64> = (0..2).map(|i| curv[i] * (w[i] - target[i])).collect();
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::from_vec(&[2], g).unwrap());
        adamw_step(&mut params, &grads, &mut state, 0.05, 0.0, &opt).unwrap();
    }
    let w = params.get("w").data();
    assert!((w[0] - target[0]).abs() < 1e-3, "w0 = {}", w[0]);
    assert!((w[1] - target[1]).abs() < 1e-3, "w1 = {}", w[1]);
    assert_eq!(state.step, 200);
}

#[test]
fn tape_l2_penalty_backpropagates_two_lambda_w() {
    let lambda = 0.037;
    let mut tape = Graph::<f64>::new();
    let w = tape.param(Tensor::from_vec(&[2, 2], vec![0.4, -1.1, 2.0, 0.3]).unwrap());
    let sq = tape.mul(w, w).unwrap();
    let s = tape.sum(sq);
    let loss = tape.scale(s, lambda);
    let grads = tape.backward(loss).unwrap();
    let g = grads.get(w).unwrap();
    for (gv, wv) in g.data().iter().zip([0.4, -1.1, 2.0, 0.3]) {
        assert!((gv - 2.0 * lambda * wv).abs() < 1e-14);
    }
}

#[test]
fn early_stopping_waits_exactly_past_patience() {
    let mut s = EarlyStop::new(1);
    assert_eq!(s.observe(0.5), StopDecision::Improved);
    assert_eq!(s.observe(0.5), StopDecision::Continue);
    assert_eq!(s.observe(0.5), StopDecision::Stop);

    // An improvement resets the countdown.
    let mut s = EarlyStop::new(1);
    assert_eq!(s.observe(0.5), StopDecision::Improved);
    assert_eq!(s.observe(0.4), StopDecision::Continue);
    assert_eq!(s.observe(0.6), StopDecision::Improved);
    assert_eq!(s.observe(0.6), StopDecision::Continue);
    assert_eq!(s.observe(0.6), StopDecision::Stop);
    assert_eq!(s.best, Some(0.6));
}

#[test]
fn config_validation_rejects_inverted_and_degenerate_settings() {
    assert!(TrainConfig::default().validate().is_ok());
    let bad = |f: fn(&mut TrainConfig)| {
        let mut c = TrainConfig::default();
        f(&mut c);
        c.validate()
    };
    assert!(bad(|c| c.eta_min = c.eta_max).is_err());
    assert!(bad(|c| c.eta_min = -1.0).is_err());
    assert!(bad(|c| c.gamma = -0.1).is_err());
    assert!(bad(|c| c.clip_tau = 0.0).is_err());
    assert!(bad(|c| c.batch_size = 1).is_err());
    assert!(bad(|c| c.restart_period = 0).is_err());
    assert!(bad(|c| c.class_weights = Some([1.0, 1.0, 0.0, 1.0])).is_err());
    assert!(bad(|c| c.bn_momentum = 1.5).is_err());
}

/// Shared small pipeline: synthetic grid, graph, split, features. Built
/// once because clustering dominates the cost of these tests.
struct Pipeline {
    graph: RoadGraph,
    features: FeatureSet,
    rows: FeatureRows,
    split: DatasetSplit,
}

fn pipeline() -> &'static Pipeline {
    static PIPE: OnceLock<Pipeline> = OnceLock::new();
    PIPE.get_or_init(|| {
        let cfg = SynthConfig {
            grid_rows: 4,
            grid_cols: 4,
            ..SynthConfig::default()
        };
        let (records, _) = synth_generate(&cfg, 41).unwrap();
        let graph = build_graph(&records, &GraphConfig::default()).unwrap();
        let split = stratified_split(&records, (0.7, 0.15, 0.15), 5).unwrap();
        let (features, rows) = build_features(&records, &graph, &split.train_ids).unwrap();
        Pipeline {
            graph,
            features,
            rows,
            split,
        }
    })
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        gat_layers: 1,
        heads: 2,
        hidden: 16,
        temporal_hidden: 16,
        classifier_hidden: (16, 8),
        dropout: (0.1, 0.1),
        leaky_slope: 0.2,
        ablation: Ablation::Full,
    }
}

fn quick_train(seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 64,
        max_epochs: epochs,
        restart_period: epochs,
        early_stop_patience: epochs,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn fit_reduces_loss_and_reproduces_bitwise() {
    let p = pipeline();
    let mcfg = tiny_model();
    let (ckpt, hist) = fit(&p.graph, &p.features, &p.rows, &p.split, &mcfg, &quick_train(11, 10)).unwrap();
    assert_eq!(hist.epochs.len(), 10);
    let first = hist.epochs.first().unwrap().train_loss;
    let last = hist.epochs.last().unwrap().train_loss;
    assert!(
        last < first,
        "loss went {} -> {} over ten epochs",
        first,
        last
    );
    assert!(hist.epochs.iter().all(|e| e.train_loss.is_finite()));
    assert!(ckpt.best_val_macro_f1 >= 0.0 && ckpt.best_val_macro_f1 <= 1.0);
    assert_eq!(ckpt.epoch, hist.best_epoch);
    assert_eq!(ckpt.seed, 11);

    // Same seed and data: the full history must match to the last bit.
    let (_, hist2) = fit(&p.graph, &p.features, &p.rows, &p.split, &mcfg, &quick_train(11, 10)).unwrap();
    assert_eq!(hist, hist2);
    for (a, b) in hist.epochs.iter().zip(&hist2.epochs) {
        assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits());
        assert_eq!(a.val_loss.to_bits(), b.val_loss.to_bits());
        assert_eq!(a.val_macro_f1.to_bits(), b.val_macro_f1.to_bits());
    }

    // A different seed must not reproduce the identical run.
    let (_, hist3) = fit(&p.graph, &p.features, &p.rows, &p.split, &mcfg, &quick_train(12, 10)).unwrap();
    assert_ne!(hist, hist3);

    // The learning rate column follows the cosine schedule exactly.
    for e in &hist.epochs {
        assert_eq!(e.lr, cosine_lr(e.epoch % 10, 10, ETA_MIN, ETA_MAX));
    }
    assert!(hist.epochs.iter().all(|e| e.max_grad_norm.is_finite()));

    let csv = hist.to_csv();
    assert!(csv.starts_with("epoch,lr,train_loss,val_loss,val_macro_f1,max_grad_norm\n"));
    assert_eq!(csv.lines().count(), 11);
}

#[test]
fn checkpoint_round_trips_bit_for_bit() {
    let p = pipeline();
    let mcfg = tiny_model();
    let (ckpt, _) = fit(&p.graph, &p.features, &p.rows, &p.split, &mcfg, &quick_train(21, 3)).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&path, &ckpt).unwrap();
    let loaded = load_checkpoint(&path).unwrap();

    assert_eq!(loaded.model, ckpt.model);
    assert_eq!(loaded.spatial_stats, ckpt.spatial_stats);
    assert_eq!(loaded.external_stats, ckpt.external_stats);
    assert_eq!(loaded.seed, ckpt.seed);
    assert_eq!(loaded.epoch, ckpt.epoch);
    assert_eq!(loaded.best_val_macro_f1.to_bits(), ckpt.best_val_macro_f1.to_bits());
    assert_eq!(loaded.optimizer.step, ckpt.optimizer.step);
    for (a, b) in ckpt.params.tensors().iter().zip(loaded.params.tensors()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.kind, b.kind);
        assert_eq!(a.value.shape(), b.value.shape());
        for (x, y) in a.value.data().iter().zip(b.value.data()) {
            assert_eq!(x.to_bits(), y.to_bits(), "tensor {} drifted", a.name);
        }
    }
    for (name, m) in &ckpt.optimizer.m {
        let lm = &loaded.optimizer.m[name];
        for (x, y) in m.data().iter().zip(lm.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
    for (name, v) in &ckpt.optimizer.v {
        let lv = &loaded.optimizer.v[name];
        for (x, y) in v.data().iter().zip(lv.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    // Model outputs from the reloaded parameters are bitwise identical.
    let gt = graph_tensors::<f32>(&p.graph).unwrap();
    let spatial = p.features.node_spatial.cast::<f32>();
    let temporal = p.features.record_temporal.cast::<f32>();
    let external = p.features.record_external.cast::<f32>();
    let probs_a = crate::model::predict_probs(
        &ckpt.params, &mcfg, &gt, &spatial, &temporal, &external, &p.rows.node_of_row,
    )
    .unwrap();
    let probs_b = crate::model::predict_probs(
        &loaded.params, &mcfg, &gt, &spatial, &temporal, &external, &p.rows.node_of_row,
    )
    .unwrap();
    for (a, b) in probs_a.data().iter().zip(probs_b.data()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }

    // Saving the identical state twice writes identical bytes.
    let path2 = dir.path().join("model2.ckpt");
    save_checkpoint(&path2, &loaded).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
}

#[test]
fn checkpoint_rejects_tampered_headers_and_payloads() {
    let p = pipeline();
    let mcfg = tiny_model();
    let (ckpt, _) = fit(&p.graph, &p.features, &p.rows, &p.split, &mcfg, &quick_train(31, 2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&path, &ckpt).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    // Unknown schema tag.
    let tampered = String::from_utf8_lossy(&bytes).replacen("starn-ckpt/1", "starn-ckpt/9", 1);
    let bad = dir.path().join("schema.ckpt");
    std::fs::write(&bad, tampered.as_bytes()).unwrap();
    let err = load_checkpoint(&bad);
    assert!(
        matches!(err, Err(StarnError::Config(ref m)) if m.contains("starn-ckpt/9")),
        "{:?}",
        err
    );

    // Truncated payload.
    let cut = dir.path().join("cut.ckpt");
    std::fs::write(&cut, &bytes[..bytes.len() - 5]).unwrap();
    let err = load_checkpoint(&cut);
    assert!(
        matches!(err, Err(StarnError::Schema(ref m)) if m.contains("truncated")),
        "{:?}",
        err
    );

    // Trailing garbage after the declared payloads.
    let mut padded = bytes.clone();
    padded.extend_from_slice(&[0u8; 8]);
    let pad = dir.path().join("pad.ckpt");
    std::fs::write(&pad, &padded).unwrap();
    let err = load_checkpoint(&pad);
    assert!(
        matches!(err, Err(StarnError::Schema(ref m)) if m.contains("trailing")),
        "{:?}",
        err
    );

    // A header that disagrees with the declared model's tensor layout.
    let mut wrong_model = ckpt.clone();
    wrong_model.model.hidden = 32;
    let wm = dir.path().join("wrong.ckpt");
    save_checkpoint(&wm, &wrong_model).unwrap();
    // The stored tensors still have hidden = 16 shapes, so loading must
    // reject the mismatch instead of reading misaligned floats.
    let err = load_checkpoint(&wm);
    assert!(matches!(err, Err(StarnError::Schema(_))), "{:?}", err);
}

#[test]
fn trailing_singleton_batches_are_merged() {
    let p = pipeline();
    let n_train = p
        .split
        .train_ids
        .iter()
        .filter(|id| p.rows.ids.contains(id))
        .count();
    // One record short of the batch size leaves a singleton remainder,
    // which batch normalization cannot take; the merge absorbs it.
    let mut tcfg = quick_train(7, 1);
    tcfg.batch_size = n_train - 1;
    let result = fit(&p.graph, &p.features, &p.rows, &p.split, &tiny_model(), &tcfg);
    assert!(result.is_ok(), "{:?}", result.err());
}

#[test]
fn early_stopping_cuts_fit_short() {
    let p = pipeline();
    // Learning rates far below any useful scale freeze the weights, and
    // zero momentum freezes the batch-norm running statistics, so the
    // validation score never improves and patience runs out quickly.
    let mut tcfg = quick_train(3, 40);
    tcfg.eta_max = 1e-18;
    tcfg.eta_min = 1e-20;
    tcfg.bn_momentum = 0.0;
    tcfg.early_stop_patience = 2;
    let (_, hist) = fit(&p.graph, &p.features, &p.rows, &p.split, &tiny_model(), &tcfg).unwrap();
    assert!(hist.stopped_early);
    assert_eq!(hist.best_epoch, 0);
    assert_eq!(hist.epochs.len(), 4, "best epoch, patience 2, then the stop");
}

#[test]
fn exploding_rates_abort_with_epoch_context() {
    let p = pipeline();
    let mut tcfg = quick_train(9, 5);
    tcfg.eta_max = 1e25;
    tcfg.eta_min = 1e24;
    tcfg.clip_tau = 1e30;
    let err = fit(&p.graph, &p.features, &p.rows, &p.split, &tiny_model(), &tcfg);
    match err {
        Err(StarnError::Numeric(m)) => {
            assert!(m.contains("epoch"), "diagnostic lacks location: {}", m)
        }
        other => panic!("expected a numeric abort, got {:?}", other),
    }
}

#[test]
fn graph_tensor_extraction_rejects_malformed_graphs() {
    let p = pipeline();
    assert!(graph_tensors::<f32>(&p.graph).is_ok());

    // Out-of-order sources break the segment layout.
    let mut shuffled = p.graph.clone();
    shuffled.edges.reverse();
    let err = graph_tensors::<f32>(&shuffled);
    assert!(matches!(err, Err(StarnError::Graph(_))), "{:?}", err);

    // A node with no outgoing edges would have an empty attention segment.
    let mut pruned = p.graph.clone();
    let last = pruned.nodes.len() - 1;
    pruned.edges.retain(|e| e.src != last);
    let err = graph_tensors::<f32>(&pruned);
    assert!(matches!(err, Err(StarnError::Graph(_))), "{:?}", err);
}

#[test]
fn frozen_blocks_stay_at_initialization_under_ablation() {
    let p = pipeline();
    let mut mcfg = tiny_model();
    mcfg.ablation = Ablation::NoTemporal;
    let tcfg = quick_train(17, 2);
    let (ckpt, _) = fit(&p.graph, &p.features, &p.rows, &p.split, &mcfg, &tcfg).unwrap();
    let fresh = init_params::<f32>(&mcfg, tcfg.seed).unwrap();
    let mut trained_blocks = 0;
    for (t, f) in ckpt.params.tensors().iter().zip(fresh.tensors()) {
        assert_eq!(t.name, f.name);
        let moved = t
            .value
            .data()
            .iter()
            .zip(f.value.data())
            .any(|(a, b)| a.to_bits() != b.to_bits());
        if t.name.starts_with("temporal.") {
            assert!(!moved, "ablated tensor {} was updated", t.name);
        } else if t.kind != ParamKind::Stat && moved {
            trained_blocks += 1;
        }
    }
    assert!(trained_blocks > 5, "live tensors should move during training");
}
