//! Modality feature encoding: per-node spatial vectors (R9), per-record
//! temporal vectors (R11), and per-record environmental vectors (R8), with
//! z-score normalization fitted on the training split only.

use std::collections::BTreeMap;
use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Result, StarnError};
use crate::graphbuild::RoadGraph;
use crate::ingest::AccidentRecord;
use crate::par;

pub const SPATIAL_DIM: usize = 9;
pub const TEMPORAL_DIM: usize = 11;
pub const EXTERNAL_DIM: usize = 8;

/// Hours counted as commute peaks.
pub const PEAK_HOURS: [u8; 7] = [7, 8, 9, 16, 17, 18, 19];

fn cyclic(value: f64, period: f64) -> (f64, f64) {
    let angle = TAU * value / period;
    (angle.sin(), angle.cos())
}

/// Temporal encoding from raw calendar fields: four sin/cos pairs for hour,
/// day of week, day of month, and month (all zero-based within their
/// period), then peak-hour, night, and weekend indicators.
pub fn encode_temporal_parts(hour: u8, day_of_week: u8, day_of_month: u8, month: u8) -> [f64; 11] {
    let (sh, ch) = cyclic(hour as f64, 24.0);
    let (sw, cw) = cyclic(day_of_week as f64, 7.0);
    let (sd, cd) = cyclic((day_of_month - 1) as f64, 31.0);
    let (sm, cm) = cyclic((month - 1) as f64, 12.0);
    let peak = PEAK_HOURS.contains(&hour);
    let night = hour >= 20 || hour < 6;
    let weekend = day_of_week >= 5;
    [
        sh,
        ch,
        sw,
        cw,
        sd,
        cd,
        sm,
        cm,
        peak as u8 as f64,
        night as u8 as f64,
        weekend as u8 as f64,
    ]
}

pub fn encode_temporal(record: &AccidentRecord) -> [f64; 11] {
    encode_temporal_parts(record.hour, record.day_of_week, record.day_of_month, record.month)
}

/// Environmental vector in schema order: temperature, precipitation,
/// humidity, wind speed, visibility, weather code, vehicle code, traffic
/// density.
pub fn encode_external(record: &AccidentRecord) -> [f64; 8] {
    [
        record.temperature,
        record.precipitation,
        record.humidity,
        record.wind_speed,
        record.visibility,
        record.weather_condition as f64,
        record.vehicle_type as f64,
        record.traffic_density,
    ]
}

/// Per-column z-score parameters. Fitted with the population convention
/// (divide by n); a column whose std falls below the floor maps to zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub const STD_FLOOR: f64 = 1e-8;

pub fn fit_normalizer(matrix: &Tensor<f64>) -> Result<NormStats> {
    if matrix.rows() == 0 {
        return Err(StarnError::EmptyDataset(
            "cannot fit a normalizer on zero rows".into(),
        ));
    }
    let (r, c) = (matrix.rows(), matrix.cols());
    let mut mean = vec![0.0; c];
    for i in 0..r {
        for (j, m) in mean.iter_mut().enumerate() {
            *m += matrix.at(i, j);
        }
    }
    for m in mean.iter_mut() {
        *m /= r as f64;
    }
    let mut std = vec![0.0; c];
    for i in 0..r {
        for (j, s) in std.iter_mut().enumerate() {
            let d = matrix.at(i, j) - mean[j];
            *s += d * d;
        }
    }
    for s in std.iter_mut() {
        *s = (*s / r as f64).sqrt().max(STD_FLOOR);
    }
    Ok(NormStats { mean, std })
}

pub fn apply_normalizer(matrix: &Tensor<f64>, stats: &NormStats) -> Result<Tensor<f64>> {
    let (r, c) = (matrix.rows(), matrix.cols());
    if stats.mean.len() != c || stats.std.len() != c {
        return Err(StarnError::shape(
            "apply_normalizer",
            format!("{} columns vs {} stats", c, stats.mean.len()),
        ));
    }
    let mut out = Tensor::zeros(&[r, c]);
    par::fill_rows(out.data_mut(), c, r * c, |i, row| {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (matrix.at(i, j) - stats.mean[j]) / stats.std[j];
        }
    });
    Ok(out)
}

/// Encoded and normalized model inputs for one dataset + graph.
#[derive(Clone, Debug)]
pub struct FeatureSet {
    /// n x 9, z-scored node spatial profiles.
    pub node_spatial: Tensor<f64>,
    /// m x 11 temporal encodings; already bounded, never normalized.
    pub record_temporal: Tensor<f64>,
    /// m x 8, z-scored environmental vectors.
    pub record_external: Tensor<f64>,
    /// Record id -> graph node id, clustered records only.
    pub record_node: BTreeMap<String, usize>,
    pub spatial_stats: NormStats,
    pub external_stats: NormStats,
}

/// Row index lookup for the records actually present in the feature
/// matrices, in input record order with noise records skipped.
#[derive(Clone, Debug)]
pub struct FeatureRows {
    pub ids: Vec<String>,
    pub node_of_row: Vec<usize>,
    pub severity_of_row: Vec<u8>,
}

/// Builds the full feature set. Normalizers are fitted only on training
/// rows: external stats on train records, spatial stats on nodes that host
/// at least one train record.
/// Raw (unnormalized) matrices for the records a graph actually hosts.
struct RawFeatures<'a> {
    kept: Vec<&'a AccidentRecord>,
    record_node: BTreeMap<String, usize>,
    node_raw: Tensor<f64>,
    temporal: Tensor<f64>,
    external_raw: Tensor<f64>,
}

fn raw_features<'a>(records: &'a [AccidentRecord], graph: &RoadGraph) -> Result<RawFeatures<'a>> {
    let record_node: BTreeMap<String, usize> = graph.record_assignments().into_iter().collect();

    let kept: Vec<&AccidentRecord> = records
        .iter()
        .filter(|r| record_node.contains_key(&r.id))
        .collect();
    if kept.is_empty() {
        return Err(StarnError::EmptyDataset(
            "no records are assigned to graph nodes".into(),
        ));
    }

    // Raw per-node spatial matrix from stored profiles.
    let n = graph.nodes.len();
    let mut node_raw = Tensor::zeros(&[n, SPATIAL_DIM]);
    for (i, node) in graph.nodes.iter().enumerate() {
        node_raw.row_mut(i).copy_from_slice(&node.spatial_profile);
    }

    // Raw per-record matrices.
    let m = kept.len();
    let mut temporal = Tensor::zeros(&[m, TEMPORAL_DIM]);
    par::fill_rows(temporal.data_mut(), TEMPORAL_DIM, m * TEMPORAL_DIM, |i, row| {
        row.copy_from_slice(&encode_temporal(kept[i]));
    });
    let mut external_raw = Tensor::zeros(&[m, EXTERNAL_DIM]);
    par::fill_rows(external_raw.data_mut(), EXTERNAL_DIM, m * EXTERNAL_DIM, |i, row| {
        row.copy_from_slice(&encode_external(kept[i]));
    });
    Ok(RawFeatures {
        kept,
        record_node,
        node_raw,
        temporal,
        external_raw,
    })
}

fn feature_rows(raw: &RawFeatures<'_>) -> FeatureRows {
    FeatureRows {
        ids: raw.kept.iter().map(|r| r.id.clone()).collect(),
        node_of_row: raw.kept.iter().map(|r| raw.record_node[&r.id]).collect(),
        severity_of_row: raw.kept.iter().map(|r| r.severity).collect(),
    }
}

pub fn build_features(
    records: &[AccidentRecord],
    graph: &RoadGraph,
    train_ids: &[String],
) -> Result<(FeatureSet, FeatureRows)> {
    let raw = raw_features(records, graph)?;
    let RawFeatures {
        ref kept,
        ref record_node,
        ref node_raw,
        ..
    } = raw;
    let train_set: std::collections::BTreeSet<&str> =
        train_ids.iter().map(String::as_str).collect();

    // Fit stats on the training slice only.
    let train_rows: Vec<usize> = kept
        .iter()
        .enumerate()
        .filter(|(_, r)| train_set.contains(r.id.as_str()))
        .map(|(i, _)| i)
        .collect();
    if train_rows.is_empty() {
        return Err(StarnError::Config(
            "no training records present in the dataset".into(),
        ));
    }
    let mut train_ext = Tensor::zeros(&[train_rows.len(), EXTERNAL_DIM]);
    for (out_i, &src_i) in train_rows.iter().enumerate() {
        train_ext.row_mut(out_i).copy_from_slice(raw.external_raw.row(src_i));
    }
    let external_stats = fit_normalizer(&train_ext)?;

    let train_nodes: std::collections::BTreeSet<usize> = train_rows
        .iter()
        .map(|&i| record_node[&kept[i].id])
        .collect();
    let mut train_node_mat = Tensor::zeros(&[train_nodes.len(), SPATIAL_DIM]);
    for (out_i, &node_i) in train_nodes.iter().enumerate() {
        train_node_mat.row_mut(out_i).copy_from_slice(node_raw.row(node_i));
    }
    let spatial_stats = fit_normalizer(&train_node_mat)?;

    assemble_feature_set(raw, spatial_stats, external_stats)
}

/// Encodes features against an existing graph with previously fitted
/// normalization statistics, as when scoring held-out data with a trained
/// checkpoint. Nothing is refit.
pub fn encode_features_with_stats(
    records: &[AccidentRecord],
    graph: &RoadGraph,
    spatial_stats: &NormStats,
    external_stats: &NormStats,
) -> Result<(FeatureSet, FeatureRows)> {
    let raw = raw_features(records, graph)?;
    assemble_feature_set(raw, spatial_stats.clone(), external_stats.clone())
}

fn assemble_feature_set(
    raw: RawFeatures<'_>,
    spatial_stats: NormStats,
    external_stats: NormStats,
) -> Result<(FeatureSet, FeatureRows)> {
    let rows = feature_rows(&raw);
    let node_spatial = apply_normalizer(&raw.node_raw, &spatial_stats)?;
    let record_external = apply_normalizer(&raw.external_raw, &external_stats)?;
    Ok((
        FeatureSet {
            node_spatial,
            record_temporal: raw.temporal,
            record_external,
            record_node: raw.record_node,
            spatial_stats,
            external_stats,
        },
        rows,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hour_zero_encodes_to_sin_zero_cos_one() {
        let v = encode_temporal_parts(0, 0, 1, 1);
        assert!((v[0] - 0.0).abs() < 1e-12);
        assert!((v[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hour_six_encodes_to_quarter_turn() {
        let v = encode_temporal_parts(6, 0, 1, 1);
        assert!((v[0] - 1.0).abs() < 1e-12);
        assert!(v[1].abs() < 1e-12);
    }

    #[test]
    fn midnight_wraparound_is_closer_than_noon() {
        let h23 = encode_temporal_parts(23, 0, 1, 1);
        let h0 = encode_temporal_parts(0, 0, 1, 1);
        let h12 = encode_temporal_parts(12, 0, 1, 1);
        let d = |a: &[f64], b: &[f64]| {
            ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
        };
        assert!(d(&h23, &h0) < d(&h12, &h0));
    }

    #[test]
    fn cyclic_pairs_lie_on_the_unit_circle() {
        for hour in 0..24u8 {
            for month in 1..=12u8 {
                let v = encode_temporal_parts(hour, hour % 7, 1 + hour % 28, month);
                for pair in 0..4 {
                    let s = v[2 * pair];
                    let c = v[2 * pair + 1];
                    assert!((s * s + c * c - 1.0).abs() < 1e-12);
                }
                for j in 8..11 {
                    assert!(v[j] == 0.0 || v[j] == 1.0);
                }
                for j in 0..8 {
                    assert!((-1.0..=1.0).contains(&v[j]));
                }
            }
        }
    }

    #[test]
    fn indicator_definitions() {
        assert_eq!(encode_temporal_parts(8, 2, 1, 1)[8], 1.0);
        assert_eq!(encode_temporal_parts(12, 2, 1, 1)[8], 0.0);
        assert_eq!(encode_temporal_parts(23, 2, 1, 1)[9], 1.0);
        assert_eq!(encode_temporal_parts(5, 2, 1, 1)[9], 1.0);
        assert_eq!(encode_temporal_parts(6, 2, 1, 1)[9], 0.0);
        assert_eq!(encode_temporal_parts(12, 5, 1, 1)[10], 1.0);
        assert_eq!(encode_temporal_parts(12, 4, 1, 1)[10], 0.0);
    }

    #[test]
    fn normalizer_standardizes_train_columns() {
        let m = Tensor::from_rows(&[
            vec![1.0, 10.0],
            vec![2.0, 10.0],
            vec![3.0, 10.0],
        ])
        .unwrap();
        let stats = fit_normalizer(&m).unwrap();
        assert!((stats.mean[0] - 2.0).abs() < 1e-12);
        // Population convention: std of (1,2,3) is sqrt(2/3).
        assert!((stats.std[0] - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
        let z = apply_normalizer(&m, &stats).unwrap();
        let mean0: f64 = (0..3).map(|i| z.at(i, 0)).sum::<f64>() / 3.0;
        let var0: f64 = (0..3).map(|i| z.at(i, 0).powi(2)).sum::<f64>() / 3.0;
        assert!(mean0.abs() < 1e-9);
        assert!((var0.sqrt() - 1.0).abs() < 1e-9);
        // Constant column is floored and maps to zero.
        for i in 0..3 {
            assert_eq!(z.at(i, 1), 0.0);
        }
    }

    #[test]
    fn refitting_on_held_out_rows_changes_stats() {
        let train = Tensor::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        let held = Tensor::from_rows(&[vec![10.0], vec![20.0], vec![30.0]]).unwrap();
        let fit_train = fit_normalizer(&train).unwrap();
        let fit_held = fit_normalizer(&held).unwrap();
        assert!(fit_train != fit_held, "leakage sentinel: stats must differ");
        // Applying train stats to held-out rows does not recenter them.
        let z = apply_normalizer(&held, &fit_train).unwrap();
        let mean: f64 = (0..3).map(|i| z.at(i, 0)).sum::<f64>() / 3.0;
        assert!(mean.abs() > 1.0);
    }

    #[test]
    fn reencoding_with_frozen_stats_reproduces_the_fitted_set() {
        use crate::graphbuild::{build_graph, GraphConfig};
        use crate::ingest::split::stratified_split;
        use crate::ingest::synth::{synth_generate, SynthConfig};

        let cfg = SynthConfig {
            grid_rows: 3,
            grid_cols: 3,
            ..SynthConfig::default()
        };
        let (records, _) = synth_generate(&cfg, 29).unwrap();
        let graph = build_graph(&records, &GraphConfig::default()).unwrap();
        let split = stratified_split(&records, (0.7, 0.15, 0.15), 3).unwrap();
        let (set, rows) = build_features(&records, &graph, &split.train_ids).unwrap();

        let (again, rows2) =
            encode_features_with_stats(&records, &graph, &set.spatial_stats, &set.external_stats)
                .unwrap();
        assert_eq!(rows.ids, rows2.ids);
        assert_eq!(rows.node_of_row, rows2.node_of_row);
        assert_eq!(set.node_spatial.data(), again.node_spatial.data());
        assert_eq!(set.record_temporal.data(), again.record_temporal.data());
        assert_eq!(set.record_external.data(), again.record_external.data());
        assert_eq!(set.spatial_stats, again.spatial_stats);

        // A node's own centroid resolves to that node.
        for (i, node) in graph.nodes.iter().enumerate() {
            assert_eq!(graph.nearest_node(node.centroid.0, node.centroid.1), Some(i));
        }
    }

    #[test]
    fn feature_set_aligns_with_graph_and_fits_on_train_slice_only() {
        use crate::graphbuild::{build_graph, GraphConfig};
        use crate::ingest::split::stratified_split;
        use crate::ingest::synth::{synth_generate, SynthConfig};

        let cfg = SynthConfig {
            grid_rows: 4,
            grid_cols: 4,
            ..SynthConfig::default()
        };
        let (records, _) = synth_generate(&cfg, 13).unwrap();
        let graph = build_graph(&records, &GraphConfig::default()).unwrap();
        let split = stratified_split(&records, (0.7, 0.15, 0.15), 3).unwrap();

        let (set, rows) = build_features(&records, &graph, &split.train_ids).unwrap();
        let n = graph.nodes.len();
        let m = rows.ids.len();
        assert_eq!(set.node_spatial.shape(), &[n, SPATIAL_DIM]);
        assert_eq!(set.record_temporal.shape(), &[m, TEMPORAL_DIM]);
        assert_eq!(set.record_external.shape(), &[m, EXTERNAL_DIM]);
        assert_eq!(rows.node_of_row.len(), m);
        assert_eq!(rows.severity_of_row.len(), m);
        let assigned: usize = graph.nodes.iter().map(|nd| nd.member_ids.len()).sum();
        assert_eq!(m, assigned, "one feature row per clustered record");
        for (i, id) in rows.ids.iter().enumerate() {
            assert_eq!(set.record_node[id], rows.node_of_row[i]);
            assert!(rows.node_of_row[i] < n);
        }
        // Temporal encodings stay in their documented ranges unnormalized.
        for v in set.record_temporal.data() {
            assert!(*v >= -1.0 && *v <= 1.0);
        }
        assert!(set.node_spatial.all_finite());
        assert!(set.record_external.all_finite());

        // Fitting on every record instead of the train slice must move the
        // external stats, or the holdout is leaking into normalization.
        let all_ids: Vec<String> = rows.ids.clone();
        let (leaky, _) = build_features(&records, &graph, &all_ids).unwrap();
        assert!(leaky.external_stats != set.external_stats);
    }
}
