//! Stratified train/val/test and k-fold partitioning.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use crate::error::{Result, StarnError};
use crate::ingest::AccidentRecord;
use crate::rng::stream_rng;

/// Stratum assignment for one record: (region stratum, season stratum,
/// severity class).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StratumLabel {
    pub region: String,
    pub season: String,
    pub severity: u8,
}

#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub stratum_labels: BTreeMap<String, StratumLabel>,
}

/// Meteorological season of a 1-based month.
pub fn season_of_month(month: u8) -> &'static str {
    match month {
        12 | 1 | 2 => "winter",
        3 | 4 | 5 => "spring",
        6 | 7 | 8 => "summer",
        _ => "autumn",
    }
}

/// Region stratum: the record's `region` column when present, otherwise the
/// quadrant of the dataset's lat/lon bounding box the record falls in.
fn region_strata(records: &[AccidentRecord]) -> Vec<String> {
    let need_quadrants = records.iter().any(|r| r.region.is_none());
    let (mut mid_lat, mut mid_lon) = (0.0, 0.0);
    if need_quadrants {
        let (mut lat_min, mut lat_max) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut lon_min, mut lon_max) = (f64::INFINITY, f64::NEG_INFINITY);
        for r in records {
            lat_min = lat_min.min(r.latitude);
            lat_max = lat_max.max(r.latitude);
            lon_min = lon_min.min(r.longitude);
            lon_max = lon_max.max(r.longitude);
        }
        mid_lat = (lat_min + lat_max) / 2.0;
        mid_lon = (lon_min + lon_max) / 2.0;
    }
    records
        .iter()
        .map(|r| match &r.region {
            Some(region) => region.clone(),
            None => {
                let ns = if r.latitude >= mid_lat { "n" } else { "s" };
                let ew = if r.longitude >= mid_lon { "e" } else { "w" };
                format!("quadrant-{}{}", ns, ew)
            }
        })
        .collect()
}

pub fn stratum_labels(records: &[AccidentRecord]) -> BTreeMap<String, StratumLabel> {
    let regions = region_strata(records);
    records
        .iter()
        .zip(regions)
        .map(|(r, region)| {
            (
                r.id.clone(),
                StratumLabel {
                    region,
                    season: season_of_month(r.month).to_string(),
                    severity: r.severity,
                },
            )
        })
        .collect()
}

/// Splits `total` into bucket counts proportional to `ratios` by largest
/// remainder; each bucket is within one of its exact share.
fn largest_remainder(total: usize, ratios: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = ratios.iter().map(|r| r * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut leftover = total - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    // Ties go to the earlier bucket (train before val before test).
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if leftover == 0 {
            break;
        }
        counts[i] += 1;
        leftover -= 1;
    }
    counts
}

/// Deterministic 70/15/15-style split stratified by (region, season,
/// severity). If any full stratum has fewer than 3 records the function
/// warns and stratifies by severity alone.
pub fn stratified_split(
    records: &[AccidentRecord],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<DatasetSplit> {
    if records.is_empty() {
        return Err(StarnError::EmptyDataset("no records to split".into()));
    }
    let (a, b, c) = ratios;
    if !(a > 0.0 && b > 0.0 && c > 0.0 && (a + b + c - 1.0).abs() < 1e-9) {
        return Err(StarnError::Config(format!(
            "split ratios ({}, {}, {}) must be positive and sum to 1",
            a, b, c
        )));
    }
    let labels = stratum_labels(records);

    let full_key = |id: &str| {
        let l = &labels[id];
        format!("{}|{}|{}", l.region, l.season, l.severity)
    };
    let severity_key = |id: &str| format!("severity-{}", labels[id].severity);

    let mut strata: BTreeMap<String, Vec<&str>> = BTreeMap::new();
    for r in records {
        strata.entry(full_key(&r.id)).or_default().push(&r.id);
    }
    if strata.values().any(|ids| ids.len() < 3) {
        log::warn!(
            "a (region, season, severity) stratum has fewer than 3 records; \
             falling back to severity-only stratification"
        );
        strata.clear();
        for r in records {
            strata.entry(severity_key(&r.id)).or_default().push(&r.id);
        }
    }

    let mut rng = stream_rng(seed, "stratified-split");
    let ratio_list = [a, b, c];
    let mut train_ids = Vec::new();
    let mut val_ids = Vec::new();
    let mut test_ids = Vec::new();
    for ids in strata.values() {
        let mut ids: Vec<&str> = ids.clone();
        ids.shuffle(&mut rng);
        let counts = largest_remainder(ids.len(), &ratio_list);
        let (n_train, n_val) = (counts[0], counts[1]);
        for (i, id) in ids.iter().enumerate() {
            let bucket = if i < n_train {
                &mut train_ids
            } else if i < n_train + n_val {
                &mut val_ids
            } else {
                &mut test_ids
            };
            bucket.push(id.to_string());
        }
    }
    train_ids.sort();
    val_ids.sort();
    test_ids.sort();
    Ok(DatasetSplit {
        train_ids,
        val_ids,
        test_ids,
        stratum_labels: labels,
    })
}

/// K disjoint folds with per-class round-robin dealing, so per-fold severity
/// counts stay within one of each other. Returns `(train_ids, val_ids)` per
/// fold.
pub fn kfold_splits(
    records: &[AccidentRecord],
    k: usize,
    seed: u64,
) -> Result<Vec<(Vec<String>, Vec<String>)>> {
    if k < 2 {
        return Err(StarnError::Config(format!("k = {} must be at least 2", k)));
    }
    let mut by_class: BTreeMap<u8, Vec<&str>> = BTreeMap::new();
    for r in records {
        by_class.entry(r.severity).or_default().push(&r.id);
    }
    for (class, ids) in &by_class {
        if ids.len() < k {
            return Err(StarnError::Config(format!(
                "severity class {} has {} records, fewer than k = {}",
                class,
                ids.len(),
                k
            )));
        }
    }
    let mut rng = stream_rng(seed, "kfold");
    let mut folds: Vec<Vec<String>> = vec![Vec::new(); k];
    for ids in by_class.values() {
        let mut ids: Vec<&str> = ids.clone();
        ids.shuffle(&mut rng);
        for (i, id) in ids.iter().enumerate() {
            folds[i % k].push(id.to_string());
        }
    }
    for fold in folds.iter_mut() {
        fold.sort();
    }
    Ok((0..k)
        .map(|f| {
            let val = folds[f].clone();
            let mut train: Vec<String> = folds
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != f)
                .flat_map(|(_, ids)| ids.iter().cloned())
                .collect();
            train.sort();
            (train, val)
        })
        .collect())
}
