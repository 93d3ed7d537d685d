//! One function per subcommand. Each takes the resolved configuration,
//! reads its inputs, writes artifacts under the output directory, and
//! prints a short human-readable summary to stdout.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use starn::diffcore::Tensor;
use starn::features::{
    apply_normalizer, build_features, encode_external, encode_features_with_stats,
    encode_temporal, EXTERNAL_DIM, SPATIAL_DIM, TEMPORAL_DIM,
};
use starn::graphbuild::{build_graph, RoadGraph};
use starn::ingest::split::stratified_split;
use starn::ingest::synth::synth_to_files;
use starn::ingest::{load_csv, AccidentRecord, CSV_SCHEMA};
use starn::metrics::{self, MetricsReport};
use starn::model::{graph_tensors, init_params, predict_probs, Ablation, NUM_CLASSES};
use starn::train::{fit, load_checkpoint, save_checkpoint, Checkpoint};
use starn::verify;
use starn::{Result, StarnError};

use crate::config::{ensure_out_dir, require_input, RunConfig};

pub fn synth(cfg: &RunConfig, csv: &Option<PathBuf>) -> Result<()> {
    ensure_out_dir(&cfg.out_dir)?;
    let csv_path = cfg.artifact(csv, "records.csv");
    let (records, truth) = synth_to_files(&cfg.synth, cfg.seed_for("synth"), &csv_path)?;
    let severe = records.iter().filter(|r| r.severity == 3).count();
    println!(
        "wrote {} records ({} severe) over {} sites to {} with ground truth alongside",
        records.len(),
        severe,
        truth.node_centers.len(),
        csv_path.display(),
    );
    Ok(())
}

pub fn build_graph_cmd(
    cfg: &RunConfig,
    csv: &Option<PathBuf>,
    graph_out: &Option<PathBuf>,
) -> Result<()> {
    ensure_out_dir(&cfg.out_dir)?;
    let csv_path = cfg.artifact(csv, "records.csv");
    require_input(&csv_path)?;
    let records = load_csv(&csv_path, CSV_SCHEMA)?;
    let graph = build_graph(&records, &cfg.graph)?;
    let graph_path = cfg.artifact(graph_out, "graph.json");
    graph.save(&graph_path)?;
    let p = &graph.build_params;
    println!(
        "graph: {} nodes, {} edges, lambda2 {:.4} (floor {}), k cap {}, {} noise records, saved to {}",
        graph.nodes.len(),
        graph.edges.len(),
        p.lambda2,
        p.lambda_min,
        p.k_cap_used,
        p.noise_count,
        graph_path.display(),
    );
    Ok(())
}

/// Class probabilities for the feature rows at `keep`, in eval mode.
fn probs_for_rows(
    ckpt: &Checkpoint,
    graph: &RoadGraph,
    features: &starn::features::FeatureSet,
    rows: &starn::features::FeatureRows,
    keep: &[usize],
) -> Result<(Tensor<f64>, Vec<usize>)> {
    let gt = graph_tensors::<f32>(graph)?;
    let spatial = features.node_spatial.cast::<f32>();
    let m = keep.len();
    let mut temporal = Tensor::<f32>::zeros(&[m, TEMPORAL_DIM]);
    let mut external = Tensor::<f32>::zeros(&[m, EXTERNAL_DIM]);
    let mut node_of_row = Vec::with_capacity(m);
    let mut targets = Vec::with_capacity(m);
    let temporal_all = features.record_temporal.cast::<f32>();
    let external_all = features.record_external.cast::<f32>();
    for (out_i, &r) in keep.iter().enumerate() {
        temporal.row_mut(out_i).copy_from_slice(temporal_all.row(r));
        external.row_mut(out_i).copy_from_slice(external_all.row(r));
        node_of_row.push(rows.node_of_row[r]);
        targets.push(rows.severity_of_row[r] as usize);
    }
    let probs = predict_probs(
        &ckpt.params,
        &ckpt.model,
        &gt,
        &spatial,
        &temporal,
        &external,
        &node_of_row,
    )?;
    Ok((probs.cast::<f64>(), targets))
}

/// Scores the records in `ids` with a trained checkpoint, using the
/// checkpoint's own normalization statistics.
fn eval_ids(
    ckpt: &Checkpoint,
    records: &[AccidentRecord],
    graph: &RoadGraph,
    ids: &[String],
) -> Result<MetricsReport> {
    let (features, rows) =
        encode_features_with_stats(records, graph, &ckpt.spatial_stats, &ckpt.external_stats)?;
    let keep_set: BTreeSet<&str> = ids.iter().map(String::as_str).collect();
    let keep: Vec<usize> = rows
        .ids
        .iter()
        .enumerate()
        .filter(|(_, id)| keep_set.contains(id.as_str()))
        .map(|(i, _)| i)
        .collect();
    if keep.is_empty() {
        return Err(StarnError::EmptyDataset(
            "no requested records are present in the graph".into(),
        ));
    }
    let (probs, targets) = probs_for_rows(ckpt, graph, &features, &rows, &keep)?;
    metrics::evaluate(&targets, &probs, NUM_CLASSES)
}

fn write_report(report: &MetricsReport, metrics_path: &Path) -> Result<()> {
    std::fs::write(metrics_path, serde_json::to_string_pretty(report)?)?;
    Ok(())
}

fn summarize(report: &MetricsReport, split_name: &str) {
    let severe = report
        .severe_recall
        .map(|v| format!("{:.4}", v))
        .unwrap_or_else(|| "n/a".to_string());
    let auc = report
        .roc_auc_weighted
        .map(|v| format!("{:.4}", v))
        .unwrap_or_else(|| "n/a".to_string());
    println!(
        "{}: {} samples, macro F1 {:.4}, weighted F1 {:.4}, balanced acc {:.4}, severe recall {}, ROC-AUC {}, kappa {:.4}",
        split_name,
        report.samples,
        report.macro_f1,
        report.weighted_f1,
        report.balanced_accuracy,
        severe,
        auc,
        report.cohens_kappa,
    );
}

#[allow(clippy::too_many_arguments)]
pub fn train(
    cfg: &RunConfig,
    csv: &Option<PathBuf>,
    graph_in: &Option<PathBuf>,
    ablation: &Option<String>,
    checkpoint_out: &Option<PathBuf>,
    history_out: &Option<PathBuf>,
    metrics_out: &Option<PathBuf>,
) -> Result<()> {
    let mut model_cfg = cfg.model.clone();
    if let Some(name) = ablation {
        model_cfg.ablation = Ablation::from_name(name).ok_or_else(|| {
            StarnError::Config(format!(
                "unknown ablation {:?}; expected one of {}",
                name,
                Ablation::ALL
                    .iter()
                    .map(|a| a.name())
                    .collect::<Vec<_>>()
                    .join(", ")
            ))
        })?;
    }
    ensure_out_dir(&cfg.out_dir)?;
    let csv_path = cfg.artifact(csv, "records.csv");
    let graph_path = cfg.artifact(graph_in, "graph.json");
    require_input(&csv_path)?;
    require_input(&graph_path)?;

    let records = load_csv(&csv_path, CSV_SCHEMA)?;
    let graph = RoadGraph::load(&graph_path)?;
    let split = stratified_split(&records, cfg.split_fractions, cfg.seed_for("split"))?;
    let (features, rows) = build_features(&records, &graph, &split.train_ids)?;

    let started = Instant::now();
    let (ckpt, history) = fit(&graph, &features, &rows, &split, &model_cfg, &cfg.train)?;
    let elapsed = started.elapsed().as_secs_f64();

    let ckpt_path = cfg.artifact(checkpoint_out, "model.ckpt");
    save_checkpoint(&ckpt_path, &ckpt)?;
    let history_path = cfg.artifact(history_out, "history.csv");
    std::fs::write(&history_path, history.to_csv())?;

    let val_report = eval_ids(&ckpt, &records, &graph, &split.val_ids)?;
    let metrics_path = cfg.artifact(metrics_out, "val_metrics.json");
    write_report(&val_report, &metrics_path)?;

    println!(
        "trained {} for {} epochs in {:.1}s (best epoch {}, stopped_early {}), checkpoint {}",
        model_cfg.ablation.name(),
        history.epochs.len(),
        elapsed,
        history.best_epoch,
        history.stopped_early,
        ckpt_path.display(),
    );
    summarize(&val_report, "validation");
    Ok(())
}

pub fn evaluate(
    cfg: &RunConfig,
    csv: &Option<PathBuf>,
    graph_in: &Option<PathBuf>,
    checkpoint_in: &Option<PathBuf>,
    metrics_out: &Option<PathBuf>,
    confusion_out: &Option<PathBuf>,
) -> Result<()> {
    ensure_out_dir(&cfg.out_dir)?;
    let csv_path = cfg.artifact(csv, "records.csv");
    let graph_path = cfg.artifact(graph_in, "graph.json");
    let ckpt_path = cfg.artifact(checkpoint_in, "model.ckpt");
    require_input(&csv_path)?;
    require_input(&graph_path)?;
    require_input(&ckpt_path)?;

    let records = load_csv(&csv_path, CSV_SCHEMA)?;
    let graph = RoadGraph::load(&graph_path)?;
    let ckpt = load_checkpoint(&ckpt_path)?;
    let split = stratified_split(&records, cfg.split_fractions, cfg.seed_for("split"))?;

    let report = eval_ids(&ckpt, &records, &graph, &split.test_ids)?;
    let metrics_path = cfg.artifact(metrics_out, "test_metrics.json");
    write_report(&report, &metrics_path)?;
    let confusion_path = cfg.artifact(confusion_out, "confusion.csv");
    std::fs::write(&confusion_path, report.confusion_csv())?;

    summarize(&report, "test");
    println!(
        "metrics {}, confusion {}",
        metrics_path.display(),
        confusion_path.display()
    );
    Ok(())
}

pub fn predict(
    cfg: &RunConfig,
    csv: &Option<PathBuf>,
    graph_in: &Option<PathBuf>,
    checkpoint_in: &Option<PathBuf>,
    predictions_out: &Option<PathBuf>,
) -> Result<()> {
    ensure_out_dir(&cfg.out_dir)?;
    let csv_path = cfg.artifact(csv, "records.csv");
    let graph_path = cfg.artifact(graph_in, "graph.json");
    let ckpt_path = cfg.artifact(checkpoint_in, "model.ckpt");
    require_input(&csv_path)?;
    require_input(&graph_path)?;
    require_input(&ckpt_path)?;

    let records = load_csv(&csv_path, CSV_SCHEMA)?;
    if records.is_empty() {
        return Err(StarnError::EmptyDataset("no records to score".into()));
    }
    let graph = RoadGraph::load(&graph_path)?;
    let ckpt = load_checkpoint(&ckpt_path)?;

    // Records are placed on the graph by nearest centroid, so unseen
    // locations score against the closest known segment.
    let node_of_row: Vec<usize> = records
        .iter()
        .map(|r| {
            graph.nearest_node(r.latitude, r.longitude).ok_or_else(|| {
                StarnError::Graph("cannot place records on an empty graph".into())
            })
        })
        .collect::<Result<_>>()?;

    let n = graph.nodes.len();
    let m = records.len();
    let mut node_raw = Tensor::<f64>::zeros(&[n, SPATIAL_DIM]);
    for (i, node) in graph.nodes.iter().enumerate() {
        node_raw.row_mut(i).copy_from_slice(&node.spatial_profile);
    }
    let spatial = apply_normalizer(&node_raw, &ckpt.spatial_stats)?.cast::<f32>();
    let mut temporal = Tensor::<f64>::zeros(&[m, TEMPORAL_DIM]);
    let mut external_raw = Tensor::<f64>::zeros(&[m, EXTERNAL_DIM]);
    for (i, r) in records.iter().enumerate() {
        temporal.row_mut(i).copy_from_slice(&encode_temporal(r));
        external_raw.row_mut(i).copy_from_slice(&encode_external(r));
    }
    let temporal = temporal.cast::<f32>();
    let external = apply_normalizer(&external_raw, &ckpt.external_stats)?.cast::<f32>();

    let gt = graph_tensors::<f32>(&graph)?;
    let probs = predict_probs(
        &ckpt.params,
        &ckpt.model,
        &gt,
        &spatial,
        &temporal,
        &external,
        &node_of_row,
    )?;

    let mut out = String::from("id,node,predicted_severity,p0,p1,p2,p3\n");
    for (i, r) in records.iter().enumerate() {
        let row = probs.row(i);
        let (mut best, mut best_p) = (0usize, row[0]);
        for (c, &p) in row.iter().enumerate().skip(1) {
            if p > best_p {
                best = c;
                best_p = p;
            }
        }
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.id, node_of_row[i], best, row[0], row[1], row[2], row[3]
        ));
    }
    let pred_path = cfg.artifact(predictions_out, "predictions.csv");
    std::fs::write(&pred_path, out)?;
    println!("scored {} records into {}", m, pred_path.display());
    Ok(())
}

pub fn gradcheck(cfg: &RunConfig, max_coords: &Option<usize>, corrupt: bool) -> Result<()> {
    let seed = cfg.seed_for("gradcheck");
    let coords = max_coords.unwrap_or(cfg.gradcheck.max_coords);

    let mut checks = verify::check_all_ops(seed)?;
    checks.push(verify::check_full_model(seed, coords, corrupt)?);

    println!(
        "{:<18} {:>8} {:>6} {:>12} {:>10}  status",
        "op", "checked", "kinks", "max_rel", "threshold"
    );
    let mut failures = Vec::new();
    for c in &checks {
        let ok = c.passed();
        println!(
            "{:<18} {:>8} {:>6} {:>12.3e} {:>10.0e}  {}",
            c.name,
            c.report.checked,
            c.report.skipped_kinks,
            c.report.max_rel_diff,
            c.threshold,
            if ok { "ok" } else { "FAIL" }
        );
        if !ok {
            failures.push(c.name);
        }
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(StarnError::Numeric(format!(
            "gradient check failed for: {}",
            failures.join(", ")
        )))
    }
}

pub fn bench(
    cfg: &RunConfig,
    sizes: &Option<Vec<usize>>,
    reps: &Option<usize>,
    bench_out: &Option<PathBuf>,
) -> Result<()> {
    ensure_out_dir(&cfg.out_dir)?;
    let sizes = sizes.clone().unwrap_or_else(|| cfg.bench.sizes.clone());
    let reps = reps.unwrap_or(cfg.bench.reps).max(1);

    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut lines = String::from("target_nodes,nodes,records,mean_ms\n");
    println!(
        "{:>12} {:>7} {:>8} {:>10}",
        "target_nodes", "nodes", "records", "mean_ms"
    );
    for (i, &target) in sizes.iter().enumerate() {
        let rows = (target as f64).sqrt().round().max(1.0) as usize;
        let cols = target.div_ceil(rows);
        let mut synth_cfg = cfg.synth.clone();
        synth_cfg.grid_rows = rows;
        synth_cfg.grid_cols = cols;
        let (records, _) =
            starn::ingest::synth::synth_generate(&synth_cfg, cfg.seed_for("bench-synth") ^ i as u64)?;
        let graph = build_graph(&records, &cfg.graph)?;
        let all_ids: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
        let (features, frows) = build_features(&records, &graph, &all_ids)?;

        let params = init_params::<f32>(&cfg.model, cfg.seed_for("bench-init"))?;
        let gt = graph_tensors::<f32>(&graph)?;
        let spatial = features.node_spatial.cast::<f32>();
        let temporal = features.record_temporal.cast::<f32>();
        let external = features.record_external.cast::<f32>();

        let run = || {
            predict_probs(
                &params,
                &cfg.model,
                &gt,
                &spatial,
                &temporal,
                &external,
                &frows.node_of_row,
            )
        };
        run()?; // warmup
        let mut total = 0.0f64;
        for _ in 0..reps {
            let t0 = Instant::now();
            run()?;
            total += t0.elapsed().as_secs_f64() * 1e3;
        }
        let mean_ms = total / reps as f64;
        println!(
            "{:>12} {:>7} {:>8} {:>10.2}",
            target,
            graph.nodes.len(),
            frows.ids.len(),
            mean_ms
        );
        lines.push_str(&format!(
            "{},{},{},{}\n",
            target,
            graph.nodes.len(),
            frows.ids.len(),
            mean_ms
        ));
        xs.push(graph.nodes.len() as f64);
        ys.push(mean_ms);
    }

    let (slope, intercept, r2) = metrics::scaling_fit(&xs, &ys)?;
    println!(
        "linear fit: time_ms = {:.4} * nodes + {:.2}, R^2 = {:.4}",
        slope, intercept, r2
    );
    lines.push_str(&format!("# fit slope={} intercept={} r2={}\n", slope, intercept, r2));
    let bench_path = cfg.artifact(bench_out, "bench.csv");
    std::fs::write(&bench_path, lines)?;
    println!("timings written to {}", bench_path.display());
    Ok(())
}
