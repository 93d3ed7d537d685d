//! Road-segment graph construction: density clustering of accident points
//! into segment nodes, three-criteria edge building, and spectral
//! connectivity validation with automatic repair.

pub mod dbscan;
pub mod edges;
pub mod spectral;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, StarnError};
use crate::ingest::AccidentRecord;

pub use dbscan::{cluster_records, dbscan, Clustering};
pub use edges::{
    adaptive_k, adaptive_k_with_cap, build_edges, edge_weight, segment_similarity, ConnType, Edge,
};
pub use spectral::{algebraic_connectivity, component_count, jacobi_eigenvalues, Adjacency};

/// Schema identifier for graph JSON exports.
pub const GRAPH_SCHEMA: &str = "starn-graph/1";

/// One clustered road segment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoadSegmentNode {
    pub node_id: usize,
    /// Mean member position, (latitude, longitude) degrees.
    pub centroid: (f64, f64),
    /// Sorted record ids of the member accidents.
    pub member_ids: Vec<String>,
    /// Aggregated spatial attributes in encoding order: elevation, slope,
    /// curvature, lanes, road width, speed limit, road type, land use,
    /// flood risk. Continuous attributes take the member median,
    /// categorical ones (road type, land use) the mode with ties to the
    /// lowest code.
    pub spatial_profile: [f64; 9],
}

/// Construction-time tunables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraphConfig {
    /// GPS positional uncertainty (meters) entering the epsilon formula.
    pub gps_sigma_m: f64,
    /// Distance-decay length (meters) in the edge-weight formula. Fixed at
    /// build time by design even though it could in principle be learned.
    pub sigma_decay_m: f64,
    /// Similarity mixture weights (road type, speed limit, lanes); must be
    /// nonnegative and sum to 1.
    pub sim_weights: [f64; 3],
    /// Scale applied to local density in the adaptive-k rule.
    pub alpha: f64,
    /// Radius (meters) defining local density for adaptive k.
    pub rho_radius_m: f64,
    /// Initial upper clamp for adaptive k; connectivity repair raises it.
    pub k_max: usize,
    /// Topological reach as a multiple of epsilon.
    pub epsilon_topo_factor: f64,
    /// Similarity threshold for functional edges.
    pub theta_functional: f64,
    /// Maximum centroid distance (meters) for functional edges.
    pub functional_radius_m: f64,
    /// Minimum algebraic connectivity accepted after repair.
    pub lambda_min: f64,
    /// Maximum number of k-raising repair rebuilds.
    pub repair_attempts: usize,
    /// Explicit clustering radius override; when unset, derived from the
    /// road-width median and `gps_sigma_m`.
    pub epsilon_m: Option<f64>,
    /// Explicit core threshold override; when unset, derived from the
    /// median within-epsilon neighbor count.
    pub min_samples: Option<usize>,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            gps_sigma_m: 5.0,
            sigma_decay_m: 500.0,
            sim_weights: [0.4, 0.3, 0.3],
            alpha: 1.0,
            rho_radius_m: 500.0,
            k_max: 15,
            epsilon_topo_factor: 2.0,
            theta_functional: 0.9,
            functional_radius_m: 5000.0,
            lambda_min: 0.1,
            repair_attempts: 4,
            epsilon_m: None,
            min_samples: None,
        }
    }
}

/// Constants actually used for one build, recorded for reproducibility and
/// for revalidating stored edge weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BuildParams {
    pub epsilon_m: f64,
    pub min_samples: usize,
    pub n_local: usize,
    pub road_width_median: f64,
    pub gps_sigma_m: f64,
    pub sigma_decay_m: f64,
    pub sim_weights: [f64; 3],
    pub phi_topological: f64,
    pub phi_spatial: f64,
    pub phi_functional: f64,
    pub alpha: f64,
    pub rho_radius_m: f64,
    pub k_cap_used: usize,
    pub epsilon_topo_m: f64,
    pub theta_functional: f64,
    pub functional_radius_m: f64,
    pub lambda_min: f64,
    pub lambda2: f64,
    pub noise_count: usize,
}

#[derive(Clone, Debug)]
pub struct RoadGraph {
    pub nodes: Vec<RoadSegmentNode>,
    pub edges: Vec<Edge>,
    /// Row-sparse weights; `adjacency[i]` holds `(j, w_ij)` sorted by `j`.
    pub adjacency: Adjacency,
    pub build_params: BuildParams,
}

/// Clustering radius and core threshold from road geometry: twice the
/// median road width plus the GPS uncertainty, and a logarithmic rule in
/// the local point count.
pub fn dbscan_params(
    road_width_median: f64,
    gps_sigma: f64,
    n_local: usize,
) -> Result<(f64, usize)> {
    if road_width_median <= 0.0 {
        return Err(StarnError::Config(format!(
            "road width median {} must be positive",
            road_width_median
        )));
    }
    if gps_sigma < 0.0 {
        return Err(StarnError::Config(format!(
            "gps sigma {} must be nonnegative",
            gps_sigma
        )));
    }
    if n_local == 0 {
        return Err(StarnError::Config(
            "n_local must be at least 1 (log2 of 0 is undefined)".into(),
        ));
    }
    let epsilon = road_width_median * 2.0 + gps_sigma;
    let min_samples = ceil_log2(n_local) + 2;
    Ok((epsilon, min_samples))
}

/// Exact integer ceil(log2(n)) for n >= 1.
fn ceil_log2(n: usize) -> usize {
    (usize::BITS - (n - 1).leading_zeros()) as usize
}

fn median(values: &mut Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Mode with ties broken toward the lowest value.
fn mode(values: &[u32]) -> u32 {
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for &v in values {
        *counts.entry(v).or_insert(0) += 1;
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(v, _)| v)
        .unwrap_or(0)
}

/// Aggregates member records into a segment node.
fn make_node(node_id: usize, members: &[&AccidentRecord]) -> RoadSegmentNode {
    let m = members.len() as f64;
    let centroid = (
        members.iter().map(|r| r.latitude).sum::<f64>() / m,
        members.iter().map(|r| r.longitude).sum::<f64>() / m,
    );
    let med = |f: fn(&AccidentRecord) -> f64| {
        let mut v: Vec<f64> = members.iter().map(|r| f(r)).collect();
        median(&mut v)
    };
    let road_types: Vec<u32> = members.iter().map(|r| r.road_type).collect();
    let land_uses: Vec<u32> = members.iter().map(|r| r.land_use).collect();
    let mut member_ids: Vec<String> = members.iter().map(|r| r.id.clone()).collect();
    member_ids.sort();
    RoadSegmentNode {
        node_id,
        centroid,
        member_ids,
        spatial_profile: [
            med(|r| r.elevation),
            med(|r| r.slope),
            med(|r| r.curvature),
            med(|r| r.lanes as f64),
            med(|r| r.road_width),
            med(|r| r.speed_limit),
            mode(&road_types) as f64,
            mode(&land_uses) as f64,
            med(|r| r.flood_risk),
        ],
    }
}

/// Sparse adjacency from an edge list. Rejects duplicate (src, dst) pairs;
/// upstream deduplication is part of the contract.
pub fn assemble_adjacency(edges: &[Edge], n: usize) -> Result<Adjacency> {
    let mut adj: Adjacency = vec![Vec::new(); n];
    for e in edges {
        if e.src >= n || e.dst >= n {
            return Err(StarnError::Graph(format!(
                "edge {} -> {} outside {} nodes",
                e.src, e.dst, n
            )));
        }
        if let Some(&(_, w)) = adj[e.src].iter().find(|&&(j, _)| j == e.dst) {
            return Err(StarnError::Graph(format!(
                "duplicate edge {} -> {} (weights {} and {})",
                e.src, e.dst, w, e.weight
            )));
        }
        adj[e.src].push((e.dst, e.weight));
    }
    for row in adj.iter_mut() {
        row.sort_by_key(|&(j, _)| j);
    }
    Ok(adj)
}

/// Full construction pipeline. If the validated connectivity falls short,
/// the spatial k cap is raised in steps of 2 and the edges rebuilt, up to
/// `repair_attempts` times.
pub fn build_graph(records: &[AccidentRecord], cfg: &GraphConfig) -> Result<RoadGraph> {
    if records.is_empty() {
        return Err(StarnError::EmptyDataset("no records to build from".into()));
    }
    let wsum: f64 = cfg.sim_weights.iter().sum();
    if cfg.sim_weights.iter().any(|&w| w < 0.0) || (wsum - 1.0).abs() > 1e-9 {
        return Err(StarnError::Config(format!(
            "similarity weights {:?} must be nonnegative and sum to 1",
            cfg.sim_weights
        )));
    }
    if cfg.sigma_decay_m <= 0.0 {
        return Err(StarnError::Config("sigma_decay must be positive".into()));
    }
    if cfg.k_max < 3 {
        return Err(StarnError::Config(format!(
            "k_max {} must be at least 3, the lower clamp of the adaptive rule",
            cfg.k_max
        )));
    }

    let mut widths: Vec<f64> = records.iter().map(|r| r.road_width).collect();
    let road_width_median = median(&mut widths);
    let epsilon_m = match cfg.epsilon_m {
        Some(e) if e > 0.0 => e,
        Some(e) => {
            return Err(StarnError::Config(format!(
                "epsilon override {} must be positive",
                e
            )))
        }
        None => road_width_median * 2.0 + cfg.gps_sigma_m,
    };

    // Local density: median inclusive neighbor count within epsilon.
    let points: Vec<(f64, f64)> = records.iter().map(|r| (r.latitude, r.longitude)).collect();
    let neighbor_counts = dbscan::neighbor_lists(&points, epsilon_m);
    let mut counts: Vec<f64> = neighbor_counts.iter().map(|l| (l.len() + 1) as f64).collect();
    let n_local = median(&mut counts).round().max(1.0) as usize;
    let min_samples = match cfg.min_samples {
        Some(m) if m >= 1 => m,
        Some(_) => return Err(StarnError::Config("min_samples must be at least 1".into())),
        None => dbscan_params(road_width_median, cfg.gps_sigma_m, n_local)?.1,
    };

    let (members, noise) = cluster_records(records, epsilon_m, min_samples)?;
    if !noise.is_empty() {
        log::info!("{} of {} records classified as noise", noise.len(), records.len());
    }
    let nodes: Vec<RoadSegmentNode> = members
        .iter()
        .enumerate()
        .map(|(id, idxs)| {
            let recs: Vec<&AccidentRecord> = idxs.iter().map(|&i| &records[i]).collect();
            make_node(id, &recs)
        })
        .collect();
    let member_points: Vec<Vec<(f64, f64)>> = members
        .iter()
        .map(|idxs| {
            idxs.iter()
                .map(|&i| (records[i].latitude, records[i].longitude))
                .collect()
        })
        .collect();

    let mut attempt = 0;
    loop {
        let k_cap = cfg.k_max + 2 * attempt;
        let edge_list = build_edges(&nodes, &member_points, cfg, epsilon_m, k_cap);
        let adjacency = assemble_adjacency(&edge_list, nodes.len())?;
        let lambda2 = if nodes.len() >= 2 {
            algebraic_connectivity(&adjacency)?
        } else {
            // A single segment is trivially connected.
            1.0
        };
        if lambda2 >= cfg.lambda_min {
            let build_params = BuildParams {
                epsilon_m,
                min_samples,
                n_local,
                road_width_median,
                gps_sigma_m: cfg.gps_sigma_m,
                sigma_decay_m: cfg.sigma_decay_m,
                sim_weights: cfg.sim_weights,
                phi_topological: ConnType::Topological.phi(),
                phi_spatial: ConnType::Spatial.phi(),
                phi_functional: ConnType::Functional.phi(),
                alpha: cfg.alpha,
                rho_radius_m: cfg.rho_radius_m,
                k_cap_used: k_cap,
                epsilon_topo_m: cfg.epsilon_topo_factor * epsilon_m,
                theta_functional: cfg.theta_functional,
                functional_radius_m: cfg.functional_radius_m,
                lambda_min: cfg.lambda_min,
                lambda2,
                noise_count: noise.len(),
            };
            return Ok(RoadGraph {
                nodes,
                edges: edge_list,
                adjacency,
                build_params,
            });
        }
        if attempt >= cfg.repair_attempts {
            return Err(StarnError::Connectivity {
                components: component_count(&adjacency),
                lambda2,
                threshold: cfg.lambda_min,
            });
        }
        log::warn!(
            "connectivity {:.4} below {:.4}; raising spatial k cap to {}",
            lambda2,
            cfg.lambda_min,
            k_cap + 2
        );
        attempt += 1;
    }
}

#[derive(Serialize, Deserialize)]
struct GraphFile {
    schema: String,
    nodes: Vec<RoadSegmentNode>,
    edges: Vec<Edge>,
    build_params: BuildParams,
}

impl RoadGraph {
    /// Record id -> node id for every clustered record.
    pub fn record_assignments(&self) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        for node in &self.nodes {
            for id in &node.member_ids {
                out.push((id.clone(), node.node_id));
            }
        }
        out.sort();
        out
    }

    /// Node whose centroid is closest to the coordinate, by haversine
    /// distance; `None` on an empty graph. Used to place records that were
    /// not part of graph construction.
    pub fn nearest_node(&self, lat: f64, lon: f64) -> Option<usize> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (i, crate::geo::haversine_m(lat, lon, n.centroid.0, n.centroid.1)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(i, _)| i)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = GraphFile {
            schema: GRAPH_SCHEMA.to_string(),
            nodes: self.nodes.clone(),
            edges: self.edges.clone(),
            build_params: self.build_params.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: GraphFile = serde_json::from_str(text)?;
        if file.schema != GRAPH_SCHEMA {
            return Err(StarnError::Config(format!(
                "unknown graph schema {:?}, expected {:?}",
                file.schema, GRAPH_SCHEMA
            )));
        }
        let adjacency = assemble_adjacency(&file.edges, file.nodes.len())?;
        let graph = RoadGraph {
            nodes: file.nodes,
            edges: file.edges,
            adjacency,
            build_params: file.build_params,
        };
        graph.validate()?;
        Ok(graph)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    /// Structural invariants: recomputable edge weights, self-loops
    /// everywhere, adjacency support matching the edge list, and
    /// well-formed edge features.
    pub fn validate(&self) -> Result<()> {
        let p = &self.build_params;
        let (speed_range, lane_range) = edges::profile_ranges(&self.nodes);
        let mut has_loop = vec![false; self.nodes.len()];
        for e in &self.edges {
            if e.src == e.dst {
                has_loop[e.src] = true;
                if e.conn_type != ConnType::Topological || e.distance != 0.0 {
                    return Err(StarnError::Graph(format!(
                        "self-loop on {} must be topological with distance 0",
                        e.src
                    )));
                }
            }
            let sim = segment_similarity(
                &self.nodes[e.src],
                &self.nodes[e.dst],
                p.sim_weights,
                speed_range,
                lane_range,
            );
            let expect = edge_weight(e.distance, sim, e.conn_type, p.sigma_decay_m)
                .ok_or_else(|| {
                    StarnError::Graph(format!(
                        "stored edge {} -> {} has zero recomputed similarity",
                        e.src, e.dst
                    ))
                })?;
            if (expect - e.weight).abs() > 1e-9 {
                return Err(StarnError::Graph(format!(
                    "edge {} -> {} stores weight {} but the formula gives {}",
                    e.src, e.dst, e.weight, expect
                )));
            }
            if !(0.0..=1.0).contains(&e.edge_features[0]) {
                return Err(StarnError::Graph(format!(
                    "edge {} -> {} normalized distance outside [0, 1]",
                    e.src, e.dst
                )));
            }
            let one_hot_sum: f64 = e.edge_features[2..5].iter().sum();
            if (one_hot_sum - 1.0).abs() > 1e-12 {
                return Err(StarnError::Graph(format!(
                    "edge {} -> {} connection one-hot does not sum to 1",
                    e.src, e.dst
                )));
            }
            if !(0.0..=1.0).contains(&e.weight) || e.weight == 0.0 {
                return Err(StarnError::Graph(format!(
                    "edge {} -> {} weight {} outside (0, 1]",
                    e.src, e.dst, e.weight
                )));
            }
        }
        if let Some(i) = has_loop.iter().position(|&b| !b) {
            return Err(StarnError::Graph(format!("node {} is missing a self-loop", i)));
        }
        for (i, row) in self.adjacency.iter().enumerate() {
            let mut from_edges: Vec<(usize, f64)> = self
                .edges
                .iter()
                .filter(|e| e.src == i)
                .map(|e| (e.dst, e.weight))
                .collect();
            from_edges.sort_by_key(|&(j, _)| j);
            if &from_edges != row {
                return Err(StarnError::Graph(format!(
                    "adjacency row {} disagrees with the edge list",
                    i
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
