use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::geo::{haversine_m, M_PER_DEG_LAT};
use crate::ingest::AccidentRecord;
use crate::rng::stream_rng;

fn base_rec(id: &str) -> AccidentRecord {
    AccidentRecord {
        id: id.to_string(),
        latitude: 39.0,
        longitude: -105.0,
        hour: 12,
        day_of_week: 2,
        day_of_month: 10,
        month: 7,
        elevation: 1600.0,
        slope: 2.0,
        curvature: 0.01,
        lanes: 2,
        road_width: 7.0,
        speed_limit: 60.0,
        road_type: 2,
        land_use: 1,
        flood_risk: 0.2,
        temperature: 15.0,
        precipitation: 0.0,
        humidity: 50.0,
        wind_speed: 5.0,
        visibility: 10.0,
        weather_condition: 0,
        vehicle_type: 0,
        traffic_density: 30.0,
        severity: 1,
        region: None,
    }
}

/// Offsets a base coordinate by meters east/north.
fn at_offset(east_m: f64, north_m: f64) -> (f64, f64) {
    let lat = 39.0 + north_m / M_PER_DEG_LAT;
    let lon = -105.0 + east_m / (M_PER_DEG_LAT * (39.0f64).to_radians().cos());
    (lat, lon)
}

fn node_at(id: usize, east_m: f64, north_m: f64, road_type: f64, speed: f64, lanes: f64) -> RoadSegmentNode {
    let (lat, lon) = at_offset(east_m, north_m);
    RoadSegmentNode {
        node_id: id,
        centroid: (lat, lon),
        member_ids: vec![format!("m{}", id)],
        spatial_profile: [1600.0, 2.0, 0.01, lanes, 7.0, speed, road_type, 1.0, 0.2],
    }
}

#[test]
fn clustering_parameters_from_road_geometry() {
    assert_eq!(dbscan_params(7.0, 5.0, 16).unwrap(), (19.0, 6));
    assert_eq!(dbscan_params(7.0, 5.0, 10).unwrap(), (19.0, 6));
    assert_eq!(dbscan_params(3.5, 0.0, 2).unwrap(), (7.0, 3));
    assert_eq!(dbscan_params(5.0, 1.0, 1).unwrap(), (11.0, 2));
    assert!(matches!(dbscan_params(7.0, 5.0, 0), Err(StarnError::Config(_))));
    assert!(matches!(dbscan_params(0.0, 5.0, 4), Err(StarnError::Config(_))));
    assert!(matches!(dbscan_params(7.0, -1.0, 4), Err(StarnError::Config(_))));
}

#[test]
fn profile_aggregation_uses_median_and_mode() {
    let mut recs = Vec::new();
    for (i, (lanes, road_type, speed)) in [(1u32, 1u32, 40.0), (2, 3, 60.0), (4, 1, 80.0)]
        .into_iter()
        .enumerate()
    {
        let mut r = base_rec(&format!("r{}", i));
        r.lanes = lanes;
        r.road_type = road_type;
        r.speed_limit = speed;
        recs.push(r);
    }
    let refs: Vec<&AccidentRecord> = recs.iter().collect();
    let node = make_node(0, &refs);
    assert_eq!(node.spatial_profile[3], 2.0, "lanes take the median");
    assert_eq!(node.spatial_profile[5], 60.0, "speed takes the median");
    assert_eq!(node.spatial_profile[6], 1.0, "road type takes the mode");
    assert_eq!(node.member_ids, vec!["r0", "r1", "r2"]);

    // A two-way mode tie resolves to the lower code.
    assert_eq!(mode(&[3, 0, 3, 0]), 0);
    // An even member count averages the middle pair.
    assert_eq!(median(&mut vec![1.0, 4.0, 2.0, 3.0]), 2.5);
}

// Reference implementation with the same stated semantics but a different
// mechanism: boolean transitive closure over core points instead of BFS.
fn dbscan_oracle(points: &[(f64, f64)], epsilon: f64, min_samples: usize) -> Clustering {
    let n = points.len();
    let within = |i: usize, j: usize| {
        haversine_m(points[i].0, points[i].1, points[j].0, points[j].1) <= epsilon
    };
    let core: Vec<bool> = (0..n)
        .map(|i| (0..n).filter(|&j| within(i, j)).count() >= min_samples)
        .collect();
    let mut reach = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            if core[i] && core[j] && within(i, j) {
                reach[i * n + j] = true;
            }
        }
    }
    for k in 0..n {
        for i in 0..n {
            if reach[i * n + k] {
                for j in 0..n {
                    if reach[k * n + j] {
                        reach[i * n + j] = true;
                    }
                }
            }
        }
    }
    let mut assignment: Vec<Option<usize>> = vec![None; n];
    let mut n_clusters = 0;
    for i in 0..n {
        if core[i] && assignment[i].is_none() {
            for j in 0..n {
                if reach[i * n + j] {
                    assignment[j] = Some(n_clusters);
                }
            }
            n_clusters += 1;
        }
    }
    for p in 0..n {
        if !core[p] && assignment[p].is_none() {
            assignment[p] = (0..n)
                .filter(|&q| q != p && core[q] && within(p, q))
                .filter_map(|q| assignment[q])
                .min();
        }
    }
    Clustering {
        assignment,
        n_clusters,
    }
}

#[test]
fn colocated_points_form_one_cluster() {
    let p = at_offset(0.0, 0.0);
    let clustering = dbscan(&[p, p, p], 19.0, 3).unwrap();
    assert_eq!(clustering.n_clusters, 1);
    assert!(clustering.assignment.iter().all(|a| *a == Some(0)));
}

#[test]
fn distant_point_is_noise() {
    let mut recs: Vec<AccidentRecord> = (0..5)
        .map(|i| {
            let mut r = base_rec(&format!("c{}", i));
            let (lat, lon) = at_offset(i as f64, 0.0);
            r.latitude = lat;
            r.longitude = lon;
            r
        })
        .collect();
    let mut lone = base_rec("far");
    let (lat, lon) = at_offset(10_000.0, 0.0);
    lone.latitude = lat;
    lone.longitude = lon;
    recs.push(lone);
    let (members, noise) = cluster_records(&recs, 19.0, 3).unwrap();
    assert_eq!(members.len(), 1);
    assert_eq!(members[0], vec![0, 1, 2, 3, 4]);
    assert_eq!(noise, vec![5]);
}

#[test]
fn clustering_rejects_bad_inputs() {
    let p = at_offset(0.0, 0.0);
    assert!(matches!(dbscan(&[], 19.0, 3), Err(StarnError::EmptyDataset(_))));
    assert!(matches!(dbscan(&[p], 0.0, 3), Err(StarnError::Config(_))));
    // Two far-apart singletons cannot seed any cluster.
    let mut a = base_rec("a");
    let (lat, lon) = at_offset(5_000.0, 0.0);
    a.latitude = lat;
    a.longitude = lon;
    let b = base_rec("b");
    assert!(matches!(
        cluster_records(&[a, b], 19.0, 3),
        Err(StarnError::Graph(_))
    ));
}

#[test]
fn clustering_matches_transitive_closure_oracle() {
    for set in 0..20u64 {
        let mut rng = stream_rng(900 + set, "dbscan-oracle");
        let n = 20 + (rng.gen_range(0..81usize));
        let points: Vec<(f64, f64)> = (0..n)
            .map(|_| at_offset(rng.gen_range(-150.0..150.0), rng.gen_range(-150.0..150.0)))
            .collect();
        let epsilon = rng.gen_range(10.0..45.0);
        let min_samples = rng.gen_range(2..6);
        let got = dbscan(&points, epsilon, min_samples).unwrap();
        let want = dbscan_oracle(&points, epsilon, min_samples);
        assert_eq!(got, want, "set {} n {} eps {:.1} min {}", set, n, epsilon, min_samples);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn clustering_always_matches_oracle(
        offsets in prop::collection::vec((-200.0..200.0f64, -200.0..200.0f64), 3..40),
        epsilon in 8.0..60.0f64,
        min_samples in 2usize..6,
    ) {
        let points: Vec<(f64, f64)> = offsets.iter().map(|&(e, n)| at_offset(e, n)).collect();
        let got = dbscan(&points, epsilon, min_samples).unwrap();
        let want = dbscan_oracle(&points, epsilon, min_samples);
        prop_assert_eq!(got, want);
    }
}

#[test]
fn similarity_examples() {
    let a = node_at(0, 0.0, 0.0, 2.0, 60.0, 2.0);
    let same = node_at(1, 100.0, 0.0, 2.0, 60.0, 2.0);
    assert!((segment_similarity(&a, &same, [0.4, 0.3, 0.3], 70.0, 3.0) - 1.0).abs() < 1e-12);

    let other_type = node_at(2, 0.0, 0.0, 3.0, 60.0, 2.0);
    assert_eq!(segment_similarity(&a, &other_type, [1.0, 0.0, 0.0], 70.0, 3.0), 0.0);

    // Same type, speed off by half the range, same lanes.
    let half_speed = node_at(3, 0.0, 0.0, 2.0, 95.0, 2.0);
    let sim = segment_similarity(&a, &half_speed, [0.4, 0.3, 0.3], 70.0, 3.0);
    assert!((sim - 0.85).abs() < 1e-12, "got {}", sim);

    // A gap larger than the stated range clamps to zero contribution.
    let too_fast = node_at(4, 0.0, 0.0, 2.0, 200.0, 2.0);
    let clamped = segment_similarity(&a, &too_fast, [0.0, 1.0, 0.0], 70.0, 3.0);
    assert_eq!(clamped, 0.0);

    // Zero ranges make those criteria vacuous.
    assert!((segment_similarity(&a, &half_speed, [0.4, 0.3, 0.3], 0.0, 0.0) - 1.0).abs() < 1e-12);
}

#[test]
fn adaptive_k_clamps_and_floors() {
    assert_eq!(adaptive_k(1.2, 1.0), 3);
    assert_eq!(adaptive_k(40.0, 1.0), 15);
    assert_eq!(adaptive_k(7.9, 1.0), 7);
    assert_eq!(adaptive_k(0.0, 1.0), 3);
    assert_eq!(adaptive_k_with_cap(40.0, 1.0, 19), 19);
    assert_eq!(adaptive_k_with_cap(40.0, 1.0, 0), 3, "tiny caps behave as the lower clamp");
}

#[test]
fn edge_weight_examples() {
    assert_eq!(edge_weight(0.0, 1.0, ConnType::Topological, 500.0), Some(1.0));
    let spatial = edge_weight(500.0, 1.0, ConnType::Spatial, 500.0).unwrap();
    assert!((spatial - 0.8 * (-1.0f64).exp()).abs() < 1e-12);
    assert_eq!(edge_weight(0.0, 1.0, ConnType::Functional, 500.0), Some(0.6));
    assert_eq!(edge_weight(100.0, 0.0, ConnType::Spatial, 500.0), None);
}

#[test]
fn two_nodes_get_spatial_pair_plus_self_loops() {
    let nodes = vec![
        node_at(0, 0.0, 0.0, 2.0, 60.0, 2.0),
        node_at(1, 0.0, 10.0, 2.0, 60.0, 2.0),
    ];
    let member_points = vec![vec![nodes[0].centroid], vec![nodes[1].centroid]];
    let cfg = GraphConfig::default();
    let edges = build_edges(&nodes, &member_points, &cfg, 2.0, cfg.k_max);
    assert_eq!(edges.len(), 4);
    let loops: Vec<_> = edges.iter().filter(|e| e.src == e.dst).collect();
    assert_eq!(loops.len(), 2);
    for l in loops {
        assert_eq!(l.weight, 1.0);
        assert_eq!(l.distance, 0.0);
        assert_eq!(l.edge_features, [0.0, 1.0, 1.0, 0.0, 0.0]);
    }
    let cross: Vec<_> = edges.iter().filter(|e| e.src != e.dst).collect();
    assert_eq!(cross.len(), 2);
    for e in &cross {
        // Identical profiles also pass the functional test, but the
        // spatial type has the higher modulation factor and wins.
        assert_eq!(e.conn_type, ConnType::Spatial);
        assert!((e.distance - 10.0).abs() < 0.01);
        let expect = (-e.distance / cfg.sigma_decay_m).exp() * 0.8;
        assert!((e.weight - expect).abs() < 1e-12);
        assert_eq!(e.edge_features[0], 1.0, "the longest edge normalizes to 1");
    }
}

#[test]
fn single_node_gets_self_loop_only() {
    let nodes = vec![node_at(0, 0.0, 0.0, 2.0, 60.0, 2.0)];
    let member_points = vec![vec![nodes[0].centroid]];
    let cfg = GraphConfig::default();
    let edges = build_edges(&nodes, &member_points, &cfg, 19.0, cfg.k_max);
    assert_eq!(edges.len(), 1);
    assert_eq!((edges[0].src, edges[0].dst), (0, 0));
}

// Direct re-evaluation of the three criteria over all pairs, sharing only
// the scalar helpers with the implementation under test.
fn edges_oracle(
    nodes: &[RoadSegmentNode],
    member_points: &[Vec<(f64, f64)>],
    cfg: &GraphConfig,
    epsilon_m: f64,
    k_cap: usize,
) -> Vec<Edge> {
    let n = nodes.len();
    let d = |i: usize, j: usize| {
        haversine_m(
            nodes[i].centroid.0,
            nodes[i].centroid.1,
            nodes[j].centroid.0,
            nodes[j].centroid.1,
        )
    };
    let mut best: BTreeMap<(usize, usize), ConnType> = BTreeMap::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let min_point = member_points[i]
                .iter()
                .flat_map(|&(la, lo)| {
                    member_points[j]
                        .iter()
                        .map(move |&(lb, lob)| haversine_m(la, lo, lb, lob))
                })
                .fold(f64::INFINITY, f64::min);
            if min_point <= cfg.epsilon_topo_factor * epsilon_m {
                best.insert((i, j), ConnType::Topological);
            }
        }
    }
    let (speed_range, lane_range) = edges::profile_ranges(nodes);
    for i in 0..n {
        let rho = (0..n).filter(|&j| j != i && d(i, j) <= cfg.rho_radius_m).count() as f64;
        let k = adaptive_k_with_cap(rho, cfg.alpha, k_cap);
        let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        others.sort_by(|&a, &b| d(i, a).partial_cmp(&d(i, b)).unwrap().then(a.cmp(&b)));
        for &j in others.iter().take(k) {
            let key = if i < j { (i, j) } else { (j, i) };
            let cur = best.entry(key).or_insert(ConnType::Spatial);
            if ConnType::Spatial.phi() > cur.phi() {
                *cur = ConnType::Spatial;
            }
        }
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let sim = segment_similarity(&nodes[i], &nodes[j], cfg.sim_weights, speed_range, lane_range);
            if sim >= cfg.theta_functional && d(i, j) <= cfg.functional_radius_m {
                best.entry((i, j)).or_insert(ConnType::Functional);
            }
        }
    }
    let max_dist = best
        .keys()
        .map(|&(i, j)| d(i, j))
        .fold(0.0f64, f64::max);
    let denom = if max_dist > 0.0 { max_dist } else { 1.0 };
    let mut out = Vec::new();
    for (&(i, j), &ty) in &best {
        for (s, t) in [(i, j), (j, i)] {
            let sim = segment_similarity(&nodes[s], &nodes[t], cfg.sim_weights, speed_range, lane_range);
            let Some(weight) = edge_weight(d(s, t), sim, ty, cfg.sigma_decay_m) else {
                continue;
            };
            let tm = if nodes[s].spatial_profile[6] == nodes[t].spatial_profile[6] {
                1.0
            } else {
                0.0
            };
            let oh = ty.one_hot();
            out.push(Edge {
                src: s,
                dst: t,
                weight,
                distance: d(s, t),
                conn_type: ty,
                edge_features: [d(s, t) / denom, tm, oh[0], oh[1], oh[2]],
            });
        }
    }
    for i in 0..n {
        out.push(Edge {
            src: i,
            dst: i,
            weight: 1.0,
            distance: 0.0,
            conn_type: ConnType::Topological,
            edge_features: [0.0, 1.0, 1.0, 0.0, 0.0],
        });
    }
    out.sort_by(|a, b| a.src.cmp(&b.src).then(a.dst.cmp(&b.dst)));
    out
}

#[test]
fn grid_edges_match_criteria_oracle() {
    // 6 x 5 grid, 200 m spacing, with a few pairs pulled close enough for
    // the topology criterion and varied profiles so the functional
    // criterion fires selectively.
    let mut rng = stream_rng(31, "edge-oracle");
    let speeds = [30.0, 50.0, 60.0, 80.0, 100.0];
    let mut nodes = Vec::new();
    let mut member_points = Vec::new();
    for r in 0..6usize {
        for c in 0..5usize {
            let id = r * 5 + c;
            let east = c as f64 * 200.0;
            let north = r as f64 * 200.0;
            let node = node_at(
                id,
                east,
                north,
                (id % 6) as f64,
                speeds[id % 5],
                (id % 4 + 1) as f64,
            );
            // Small member clouds around each centroid.
            let cloud: Vec<(f64, f64)> = (0..3)
                .map(|_| {
                    at_offset(
                        east + rng.gen_range(-8.0..8.0),
                        north + rng.gen_range(-8.0..8.0),
                    )
                })
                .collect();
            nodes.push(node);
            member_points.push(cloud);
        }
    }
    let cfg = GraphConfig::default();
    // epsilon_topo = 220 m, so the 200 m grid neighbors qualify.
    let edges = build_edges(&nodes, &member_points, &cfg, 110.0, cfg.k_max);
    let expect = edges_oracle(&nodes, &member_points, &cfg, 110.0, cfg.k_max);
    assert_eq!(edges.len(), expect.len());
    for (e, w) in edges.iter().zip(&expect) {
        assert_eq!(e, w);
    }
    let by_type = |t: ConnType| edges.iter().filter(|e| e.conn_type == t && e.src != e.dst).count();
    assert!(by_type(ConnType::Topological) > 0);
    assert!(by_type(ConnType::Spatial) > 0);
    assert!(by_type(ConnType::Functional) > 0);
}

#[test]
fn adjacency_assembly() {
    // Empty list gives a zero matrix.
    let adj = assemble_adjacency(&[], 3).unwrap();
    assert!(adj.iter().all(Vec::is_empty));

    let mk = |src, dst, weight| Edge {
        src,
        dst,
        weight,
        distance: 1.0,
        conn_type: ConnType::Spatial,
        edge_features: [0.1, 1.0, 0.0, 1.0, 0.0],
    };
    let adj = assemble_adjacency(&[mk(0, 1, 0.5), mk(1, 0, 0.5)], 2).unwrap();
    assert_eq!(adj[0], vec![(1, 0.5)]);
    assert_eq!(adj[1], vec![(0, 0.5)]);

    assert!(matches!(
        assemble_adjacency(&[mk(0, 1, 0.5), mk(0, 1, 0.4)], 2),
        Err(StarnError::Graph(_))
    ));
    assert!(matches!(
        assemble_adjacency(&[mk(0, 5, 0.5)], 2),
        Err(StarnError::Graph(_))
    ));
}

#[test]
fn adjacency_matches_dense_reconstruction() {
    let mut rng = stream_rng(77, "adjacency");
    let n = 20;
    let mut edges = Vec::new();
    let mut dense = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j && rng.gen_range(0.0..1.0) < 0.2 {
                let w = rng.gen_range(0.05..1.0);
                dense[i * n + j] = w;
                edges.push(Edge {
                    src: i,
                    dst: j,
                    weight: w,
                    distance: 10.0,
                    conn_type: ConnType::Spatial,
                    edge_features: [0.5, 1.0, 0.0, 1.0, 0.0],
                });
            }
        }
    }
    let adj = assemble_adjacency(&edges, n).unwrap();
    for i in 0..n {
        for j in 0..n {
            let sparse = adj[i]
                .iter()
                .find(|&&(c, _)| c == j)
                .map(|&(_, w)| w)
                .unwrap_or(0.0);
            assert_eq!(sparse, dense[i * n + j], "entry ({}, {})", i, j);
        }
    }
}

#[test]
fn jacobi_matches_closed_form_tridiagonal() {
    // Eigenvalues of [[2,1,0],[1,2,1],[0,1,2]] are 2 - sqrt(2), 2, 2 + sqrt(2).
    let eig = jacobi_eigenvalues(vec![2.0, 1.0, 0.0, 1.0, 2.0, 1.0, 0.0, 1.0, 2.0], 3);
    let sq2 = 2.0f64.sqrt();
    assert!((eig[0] - (2.0 - sq2)).abs() < 1e-10);
    assert!((eig[1] - 2.0).abs() < 1e-10);
    assert!((eig[2] - (2.0 + sq2)).abs() < 1e-10);
}

fn both_ways(pairs: &[(usize, usize)], n: usize) -> Adjacency {
    let mut adj: Adjacency = vec![Vec::new(); n];
    for &(i, j) in pairs {
        adj[i].push((j, 1.0));
        adj[j].push((i, 1.0));
    }
    for row in adj.iter_mut() {
        row.sort_by_key(|&(j, _)| j);
    }
    adj
}

#[test]
fn complete_graph_connectivity_is_n_over_n_minus_one() {
    let mut pairs = Vec::new();
    for i in 0..5 {
        for j in (i + 1)..5 {
            pairs.push((i, j));
        }
    }
    let lambda2 = algebraic_connectivity(&both_ways(&pairs, 5)).unwrap();
    assert!((lambda2 - 1.25).abs() < 1e-8, "got {}", lambda2);
}

#[test]
fn three_edge_path_connectivity_is_half() {
    let adj = both_ways(&[(0, 1), (1, 2), (2, 3)], 4);
    let lambda2 = algebraic_connectivity(&adj).unwrap();
    assert!((lambda2 - 0.5).abs() < 1e-8, "got {}", lambda2);
}

#[test]
fn disconnected_graphs_have_zero_connectivity() {
    let adj = both_ways(&[(0, 1), (2, 3)], 4);
    let lambda2 = algebraic_connectivity(&adj).unwrap();
    assert!(lambda2.abs() < 1e-8, "got {}", lambda2);
    assert_eq!(component_count(&adj), 2);

    // An isolated node short-circuits to exactly zero.
    let adj = both_ways(&[(0, 1)], 3);
    assert_eq!(algebraic_connectivity(&adj).unwrap(), 0.0);
    assert_eq!(component_count(&adj), 2);

    assert!(matches!(
        algebraic_connectivity(&vec![Vec::new(); 1]),
        Err(StarnError::Graph(_))
    ));
}

#[test]
fn self_loops_do_not_change_connectivity() {
    let mut adj = both_ways(&[(0, 1), (1, 2), (2, 3)], 4);
    let without = algebraic_connectivity(&adj).unwrap();
    for (i, row) in adj.iter_mut().enumerate() {
        row.push((i, 1.0));
        row.sort_by_key(|&(j, _)| j);
    }
    let with = algebraic_connectivity(&adj).unwrap();
    assert!((with - without).abs() < 1e-12);
}

// Same Laplacian, independent eigensolver.
fn lambda2_dense_oracle(adj: &Adjacency) -> f64 {
    let n = adj.len();
    let mut sym = vec![vec![0.0f64; n]; n];
    for (i, row) in adj.iter().enumerate() {
        for &(j, w) in row {
            if i != j {
                sym[i][j] += w / 2.0;
                sym[j][i] += w / 2.0;
            }
        }
    }
    let degrees: Vec<f64> = sym.iter().map(|r| r.iter().sum()).collect();
    if degrees.iter().any(|&d| d <= 0.0) {
        return 0.0;
    }
    let lap = nalgebra::DMatrix::from_fn(n, n, |i, j| {
        let norm = sym[i][j] / (degrees[i] * degrees[j]).sqrt();
        if i == j {
            1.0 - norm
        } else {
            -norm
        }
    });
    let mut eig: Vec<f64> = lap.symmetric_eigen().eigenvalues.iter().cloned().collect();
    eig.sort_by(|a, b| a.partial_cmp(b).unwrap());
    eig[1]
}

#[test]
fn connectivity_matches_dense_eigensolver_oracle() {
    for g in 0..20u64 {
        let mut rng = stream_rng(400 + g, "spectral-oracle");
        let n = rng.gen_range(2..=30usize);
        let p = rng.gen_range(0.1..0.7);
        let mut adj: Adjacency = vec![Vec::new(); n];
        for i in 0..n {
            for j in (i + 1)..n {
                if rng.gen_range(0.0..1.0) < p {
                    let w = rng.gen_range(0.05..1.0);
                    adj[i].push((j, w));
                    adj[j].push((i, w));
                }
            }
        }
        let got = algebraic_connectivity(&adj).unwrap();
        let want = lambda2_dense_oracle(&adj);
        assert!(
            (got - want).abs() < 1e-8,
            "graph {}: {} vs oracle {}",
            g,
            got,
            want
        );
    }
}

fn synth_records(rows: usize, cols: usize, seed: u64) -> Vec<AccidentRecord> {
    let cfg = crate::ingest::SynthConfig {
        grid_rows: rows,
        grid_cols: cols,
        ..Default::default()
    };
    crate::ingest::synth_generate(&cfg, seed).unwrap().0
}

#[test]
fn synthetic_grid_builds_connected_validated_graph() {
    let records = synth_records(6, 6, 21);
    let cfg = GraphConfig::default();
    let graph = build_graph(&records, &cfg).unwrap();
    assert!(graph.nodes.len() >= 30, "got {} nodes", graph.nodes.len());
    assert!(graph.build_params.lambda2 >= 0.1);
    graph.validate().unwrap();

    let assigned = graph.record_assignments();
    assert_eq!(
        assigned.len() + graph.build_params.noise_count,
        records.len()
    );
    let ids: std::collections::BTreeSet<_> = assigned.iter().map(|(id, _)| id.clone()).collect();
    assert_eq!(ids.len(), assigned.len(), "assignments are unique per record");

    // Same input, same output, byte for byte.
    let again = build_graph(&records, &cfg).unwrap();
    assert_eq!(graph.to_json().unwrap(), again.to_json().unwrap());
}

#[test]
fn graph_export_round_trips() {
    let records = synth_records(4, 4, 33);
    let graph = build_graph(&records, &GraphConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("graph.json");
    graph.save(&path).unwrap();
    let loaded = RoadGraph::load(&path).unwrap();
    assert_eq!(loaded.to_json().unwrap(), graph.to_json().unwrap());
    assert_eq!(loaded.adjacency, graph.adjacency);

    let mut tampered: serde_json::Value =
        serde_json::from_str(&graph.to_json().unwrap()).unwrap();
    tampered["schema"] = serde_json::Value::String("starn-graph/9".into());
    assert!(matches!(
        RoadGraph::from_json(&tampered.to_string()),
        Err(StarnError::Config(_))
    ));
}

#[test]
fn validation_catches_tampered_weights() {
    let records = synth_records(3, 3, 5);
    let mut graph = build_graph(&records, &GraphConfig::default()).unwrap();
    let k = graph.edges.iter().position(|e| e.src != e.dst).unwrap();
    graph.edges[k].weight += 0.01;
    graph.adjacency = assemble_adjacency(&graph.edges, graph.nodes.len()).unwrap();
    assert!(matches!(graph.validate(), Err(StarnError::Graph(_))));
}

fn far_apart_blob_records() -> Vec<AccidentRecord> {
    let mut out = Vec::new();
    let mut add_blob = |tag: &str, east: f64, north: f64| {
        for i in 0..8 {
            let mut r = base_rec(&format!("{}p{}", tag, i));
            let (lat, lon) = at_offset(east, north);
            r.latitude = lat;
            r.longitude = lon;
            out.push(r);
        }
    };
    add_blob("a0", 0.0, 0.0);
    add_blob("a1", 0.0, 50.0);
    add_blob("b0", 0.0, 100_000.0);
    add_blob("b1", 0.0, 100_050.0);
    out
}

#[test]
fn far_apart_clusters_fail_connectivity_without_repair() {
    let records = far_apart_blob_records();
    let cfg = GraphConfig {
        repair_attempts: 0,
        ..GraphConfig::default()
    };
    match build_graph(&records, &cfg) {
        Err(StarnError::Connectivity {
            lambda2, threshold, ..
        }) => {
            assert!(lambda2 < threshold);
        }
        other => panic!("expected a connectivity error, got {:?}", other.map(|g| g.nodes.len())),
    }
}

fn line_records(n_sites: usize, spacing_m: f64) -> Vec<AccidentRecord> {
    // Profiles cycle with coprime periods so no pair reaches the
    // functional similarity threshold; only spatial edges remain.
    let speeds = [40.0, 80.0, 120.0, 160.0, 200.0];
    let mut out = Vec::new();
    for s in 0..n_sites {
        let (lat, lon) = at_offset(s as f64 * spacing_m, 0.0);
        for i in 0..8 {
            let mut r = base_rec(&format!("s{:02}p{}", s, i));
            r.latitude = lat;
            r.longitude = lon;
            r.road_type = (s % 6) as u32;
            r.speed_limit = speeds[s % 5];
            r.lanes = (s % 4 + 1) as u32;
            out.push(r);
        }
    }
    out
}

#[test]
fn repair_raises_spatial_k_until_connected() {
    let records = line_records(20, 60.0);
    let cfg = GraphConfig {
        k_max: 3,
        ..GraphConfig::default()
    };
    let graph = build_graph(&records, &cfg).unwrap();
    assert_eq!(graph.nodes.len(), 20);
    assert!(
        graph.build_params.k_cap_used > cfg.k_max,
        "expected at least one repair step, k cap stayed {}",
        graph.build_params.k_cap_used
    );
    assert!(graph.build_params.lambda2 >= cfg.lambda_min);
    assert!(graph
        .edges
        .iter()
        .all(|e| e.src == e.dst || e.conn_type == ConnType::Spatial));
}

#[test]
fn build_rejects_bad_configs() {
    let records = synth_records(3, 3, 1);
    let bad_k = GraphConfig {
        k_max: 2,
        ..GraphConfig::default()
    };
    assert!(matches!(
        build_graph(&records, &bad_k),
        Err(StarnError::Config(_))
    ));
    let bad_weights = GraphConfig {
        sim_weights: [0.5, 0.5, 0.5],
        ..GraphConfig::default()
    };
    assert!(matches!(
        build_graph(&records, &bad_weights),
        Err(StarnError::Config(_))
    ));
    let bad_eps = GraphConfig {
        epsilon_m: Some(-3.0),
        ..GraphConfig::default()
    };
    assert!(matches!(
        build_graph(&records, &bad_eps),
        Err(StarnError::Config(_))
    ));
    assert!(matches!(
        build_graph(&[], &GraphConfig::default()),
        Err(StarnError::EmptyDataset(_))
    ));
}
