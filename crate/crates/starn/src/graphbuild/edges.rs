//! The three edge criteria and the weighted, typed edge list.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::geo::haversine_m;
use crate::graphbuild::{GraphConfig, RoadSegmentNode};
use crate::par;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConnType {
    Topological,
    Spatial,
    Functional,
}

impl ConnType {
    /// Type modulation factor in the edge-weight formula.
    pub fn phi(self) -> f64 {
        match self {
            ConnType::Topological => 1.0,
            ConnType::Spatial => 0.8,
            ConnType::Functional => 0.6,
        }
    }

    pub fn one_hot(self) -> [f64; 3] {
        match self {
            ConnType::Topological => [1.0, 0.0, 0.0],
            ConnType::Spatial => [0.0, 1.0, 0.0],
            ConnType::Functional => [0.0, 0.0, 1.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub weight: f64,
    /// Centroid haversine distance in meters.
    pub distance: f64,
    pub conn_type: ConnType,
    /// [distance / max edge distance, road-type match, one-hot type (3)].
    pub edge_features: [f64; 5],
}

/// Weighted multi-criteria similarity of two segment profiles: road-type
/// match, speed-limit closeness, and lane-count closeness, each clamped to
/// [0, 1] and mixed by `weights`. The ranges are dataset-wide spans passed
/// by the caller; a zero range makes that criterion vacuous (similarity 1).
pub fn segment_similarity(
    a: &RoadSegmentNode,
    b: &RoadSegmentNode,
    weights: [f64; 3],
    speed_range: f64,
    lane_range: f64,
) -> f64 {
    let sim_type = if a.spatial_profile[6] == b.spatial_profile[6] {
        1.0
    } else {
        0.0
    };
    let sim_speed = if speed_range > 0.0 {
        1.0 - (a.spatial_profile[5] - b.spatial_profile[5]).abs() / speed_range
    } else {
        1.0
    };
    let sim_lanes = if lane_range > 0.0 {
        1.0 - (a.spatial_profile[3] - b.spatial_profile[3]).abs() / lane_range
    } else {
        1.0
    };
    let clamp = |v: f64| v.clamp(0.0, 1.0);
    weights[0] * clamp(sim_type) + weights[1] * clamp(sim_speed) + weights[2] * clamp(sim_lanes)
}

/// Adaptive neighbor count from local density, clamped to [3, cap]. Caps
/// below the lower clamp behave as 3.
pub fn adaptive_k_with_cap(rho: f64, alpha: f64, cap: usize) -> usize {
    ((rho * alpha).floor() as isize).clamp(3, cap.max(3) as isize) as usize
}

/// The published form with the fixed upper clamp of 15.
pub fn adaptive_k(rho: f64, alpha: f64) -> usize {
    adaptive_k_with_cap(rho, alpha, 15)
}

/// Distance-decayed, similarity-modulated edge weight. `None` means the
/// edge must be dropped: zero similarity would give weight 0, outside the
/// (0, 1] contract.
pub fn edge_weight(
    distance: f64,
    functional_sim: f64,
    conn_type: ConnType,
    sigma_decay: f64,
) -> Option<f64> {
    if functional_sim <= 0.0 {
        return None;
    }
    Some((-distance / sigma_decay).exp() * functional_sim * conn_type.phi())
}

/// Dataset-wide spans used by the similarity criteria.
pub fn profile_ranges(nodes: &[RoadSegmentNode]) -> (f64, f64) {
    let speeds: Vec<f64> = nodes.iter().map(|n| n.spatial_profile[5]).collect();
    let lanes: Vec<f64> = nodes.iter().map(|n| n.spatial_profile[3]).collect();
    let span = |v: &[f64]| {
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        hi - lo
    };
    (span(&speeds), span(&lanes))
}

/// Builds the directed edge list: topological edges where two clusters'
/// member points come within `epsilon_topo` meters, spatial edges to each
/// node's adaptive-k nearest centroids, functional edges between similar
/// segments within the functional radius. Every discovered pair is emitted
/// in both directions; duplicates keep the type with the highest phi;
/// every node gets a self-loop. Output is sorted by (src, dst).
pub fn build_edges(
    nodes: &[RoadSegmentNode],
    member_points: &[Vec<(f64, f64)>],
    cfg: &GraphConfig,
    epsilon_m: f64,
    k_cap: usize,
) -> Vec<Edge> {
    let n = nodes.len();
    let epsilon_topo = cfg.epsilon_topo_factor * epsilon_m;

    // Centroid distance matrix, built once.
    let dist: Vec<Vec<f64>> = par::indexed_map(n, n * n, |i| {
        let (lat_i, lon_i) = nodes[i].centroid;
        (0..n)
            .map(|j| haversine_m(lat_i, lon_i, nodes[j].centroid.0, nodes[j].centroid.1))
            .collect()
    });

    // Unordered pair -> best (lowest-phi-rank) connection type.
    let mut best: BTreeMap<(usize, usize), ConnType> = BTreeMap::new();
    let mut offer = |i: usize, j: usize, ty: ConnType| {
        let key = if i < j { (i, j) } else { (j, i) };
        let slot = best.entry(key).or_insert(ty);
        if ty.phi() > slot.phi() {
            *slot = ty;
        }
    };

    // Topological: minimum member-point distance within epsilon_topo. The
    // centroid screen skips pairs that cannot possibly qualify.
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
        .collect();
    let point_work: usize = member_points.iter().map(Vec::len).sum::<usize>().pow(2);
    let topo_hits: Vec<bool> = par::indexed_map(pairs.len(), point_work, |p| {
        let (i, j) = pairs[p];
        let max_spread = spread(&member_points[i], nodes[i].centroid)
            + spread(&member_points[j], nodes[j].centroid);
        if dist[i][j] > epsilon_topo + max_spread {
            return false;
        }
        member_points[i].iter().any(|&(la, lo)| {
            member_points[j]
                .iter()
                .any(|&(lb, lob)| haversine_m(la, lo, lb, lob) <= epsilon_topo)
        })
    });
    for (p, hit) in topo_hits.iter().enumerate() {
        if *hit {
            let (i, j) = pairs[p];
            offer(i, j, ConnType::Topological);
        }
    }

    // Spatial: adaptive k nearest centroids, ties to the lower node id.
    for i in 0..n {
        let rho = (0..n)
            .filter(|&j| j != i && dist[i][j] <= cfg.rho_radius_m)
            .count() as f64;
        let k = adaptive_k_with_cap(rho, cfg.alpha, k_cap);
        let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        others.sort_by(|&a, &b| {
            dist[i][a]
                .partial_cmp(&dist[i][b])
                .unwrap()
                .then(a.cmp(&b))
        });
        for &j in others.iter().take(k) {
            offer(i, j, ConnType::Spatial);
        }
    }

    // Functional: high similarity within the functional radius.
    let (speed_range, lane_range) = profile_ranges(nodes);
    for i in 0..n {
        for j in (i + 1)..n {
            if dist[i][j] <= cfg.functional_radius_m {
                let sim =
                    segment_similarity(&nodes[i], &nodes[j], cfg.sim_weights, speed_range, lane_range);
                if sim >= cfg.theta_functional {
                    offer(i, j, ConnType::Functional);
                }
            }
        }
    }

    if n > 1 && best.is_empty() {
        log::warn!("no node pair met any connectivity criterion; emitting self-loops only");
    }

    // Materialize both directions plus self-loops, then weight and featurize.
    let mut raw: Vec<(usize, usize, ConnType)> = Vec::with_capacity(best.len() * 2 + n);
    for (&(i, j), &ty) in &best {
        raw.push((i, j, ty));
        raw.push((j, i, ty));
    }
    let max_dist = raw
        .iter()
        .map(|&(i, j, _)| dist[i][j])
        .fold(0.0f64, f64::max);
    let denom = if max_dist > 0.0 { max_dist } else { 1.0 };

    let mut edges = Vec::with_capacity(raw.len() + n);
    for (i, j, ty) in raw {
        let sim = segment_similarity(&nodes[i], &nodes[j], cfg.sim_weights, speed_range, lane_range);
        let Some(weight) = edge_weight(dist[i][j], sim, ty, cfg.sigma_decay_m) else {
            log::debug!("dropping zero-similarity edge {} -> {}", i, j);
            continue;
        };
        let type_match = if nodes[i].spatial_profile[6] == nodes[j].spatial_profile[6] {
            1.0
        } else {
            0.0
        };
        let oh = ty.one_hot();
        edges.push(Edge {
            src: i,
            dst: j,
            weight,
            distance: dist[i][j],
            conn_type: ty,
            edge_features: [dist[i][j] / denom, type_match, oh[0], oh[1], oh[2]],
        });
    }
    for i in 0..n {
        let oh = ConnType::Topological.one_hot();
        edges.push(Edge {
            src: i,
            dst: i,
            weight: 1.0,
            distance: 0.0,
            conn_type: ConnType::Topological,
            edge_features: [0.0, 1.0, oh[0], oh[1], oh[2]],
        });
    }
    edges.sort_by(|a, b| a.src.cmp(&b.src).then(a.dst.cmp(&b.dst)));
    edges
}

/// Largest centroid-to-member distance, used to screen the topological
/// pair test.
fn spread(points: &[(f64, f64)], centroid: (f64, f64)) -> f64 {
    points
        .iter()
        .map(|&(la, lo)| haversine_m(la, lo, centroid.0, centroid.1))
        .fold(0.0f64, f64::max)
}
