//! Density clustering of accident points into road-segment nodes.
//!
//! Semantics are the classic ones, exactly: a point is core iff at least
//! `min_samples` points (counting itself) lie within `epsilon` meters
//! (inclusive); clusters are connected components of core points under the
//! within-epsilon relation; a non-core point within epsilon of a core point
//! joins that core's cluster, ties resolved to the lowest cluster id;
//! everything else is noise. Distances are haversine.

use std::collections::VecDeque;

use crate::error::{Result, StarnError};
use crate::geo::haversine_m;
use crate::ingest::AccidentRecord;
use crate::par;

/// Per-point cluster assignment: cluster index, or `None` for noise.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Clustering {
    pub assignment: Vec<Option<usize>>,
    pub n_clusters: usize,
}

/// Neighbor lists under the inclusive epsilon ball, excluding the point
/// itself. The parallel and sequential paths compare distances identically.
pub fn neighbor_lists(points: &[(f64, f64)], epsilon: f64) -> Vec<Vec<usize>> {
    let n = points.len();
    par::indexed_map(n, n * n, |i| {
        let (lat_i, lon_i) = points[i];
        (0..n)
            .filter(|&j| j != i && haversine_m(lat_i, lon_i, points[j].0, points[j].1) <= epsilon)
            .collect()
    })
}

/// Clusters points; `min_samples` counts the point itself.
pub fn dbscan(points: &[(f64, f64)], epsilon: f64, min_samples: usize) -> Result<Clustering> {
    if points.is_empty() {
        return Err(StarnError::EmptyDataset("no points to cluster".into()));
    }
    if epsilon <= 0.0 {
        return Err(StarnError::Config(format!(
            "epsilon {} must be positive",
            epsilon
        )));
    }
    let neighbors = neighbor_lists(points, epsilon);
    let core: Vec<bool> = neighbors
        .iter()
        .map(|ns| ns.len() + 1 >= min_samples)
        .collect();

    let n = points.len();
    let mut assignment: Vec<Option<usize>> = vec![None; n];
    let mut n_clusters = 0;
    // Expand clusters from the lowest unassigned core point, so cluster ids
    // are ordered by their smallest member index.
    for start in 0..n {
        if !core[start] || assignment[start].is_some() {
            continue;
        }
        let cluster = n_clusters;
        n_clusters += 1;
        let mut queue = VecDeque::new();
        assignment[start] = Some(cluster);
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            for &q in &neighbors[p] {
                if core[q] && assignment[q].is_none() {
                    assignment[q] = Some(cluster);
                    queue.push_back(q);
                }
            }
        }
    }
    // Border points: lowest cluster id among core neighbors.
    for p in 0..n {
        if core[p] || assignment[p].is_some() {
            continue;
        }
        assignment[p] = neighbors[p]
            .iter()
            .filter(|&&q| core[q])
            .filter_map(|&q| assignment[q])
            .min();
    }
    Ok(Clustering {
        assignment,
        n_clusters,
    })
}

/// Runs clustering on record coordinates and groups record indices per
/// cluster. Errors if every point is noise.
pub fn cluster_records(
    records: &[AccidentRecord],
    epsilon: f64,
    min_samples: usize,
) -> Result<(Vec<Vec<usize>>, Vec<usize>)> {
    let points: Vec<(f64, f64)> = records.iter().map(|r| (r.latitude, r.longitude)).collect();
    let clustering = dbscan(&points, epsilon, min_samples)?;
    if clustering.n_clusters == 0 {
        return Err(StarnError::Graph(
            "no segments found: every point is noise".into(),
        ));
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); clustering.n_clusters];
    let mut noise = Vec::new();
    for (i, a) in clustering.assignment.iter().enumerate() {
        match a {
            Some(c) => members[*c].push(i),
            None => noise.push(i),
        }
    }
    Ok((members, noise))
}
