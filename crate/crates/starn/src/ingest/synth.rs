//! Synthetic accident data with a known severity rule.
//!
//! Records scatter around a grid of road-segment sites. Severity comes from
//! a logistic score over (a) the site's spatial attributes, (b) the record's
//! own temporal and environmental attributes, and (c) two neighborhood
//! channels: the mean latent risk of nearby same-road-type sites and of
//! nearby different-type sites, with opposite-signed coefficients. Channel
//! (c) is reachable only through graph structure, and because the two
//! channels are type-conditional with opposing signs, recovering both takes
//! aggregation that can weight neighbors differently by edge kind rather
//! than a single undifferentiated average. The generator emits the full
//! rule (coefficients, feature moments, per-site latents, cut points) so
//! tests can audit any record.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Result, StarnError};
use crate::features::encode_temporal_parts;
use crate::geo::{haversine_m, M_PER_DEG_LAT};
use crate::ingest::{validate_record, write_csv, AccidentRecord, SEVERITY_CLASSES};
use crate::rng::stream_rng;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// Spacing between adjacent grid sites, meters.
    pub node_spacing_m: f64,
    pub origin_lat: f64,
    pub origin_lon: f64,
    /// Mean record count per site; actual counts are
    /// `floor + Poisson(mean - floor)`.
    pub records_per_node_mean: f64,
    pub records_per_node_floor: u32,
    /// Standard deviation of the GPS scatter around a site center, meters.
    pub gps_sigma_m: f64,
    /// Coefficients over the standardized 9 spatial site attributes.
    pub beta_spatial: [f64; 9],
    /// Coefficients over the 11 temporal encoding components.
    pub beta_temporal: [f64; 11],
    /// Coefficients over the standardized 8 environmental attributes.
    pub beta_external: [f64; 8],
    /// Coefficient on the mean latent risk of same-road-type sites within
    /// `neighbor_radius_m`.
    pub beta_neighbor: f64,
    /// Coefficient on the mean latent risk of different-road-type sites
    /// within the same radius. The default opposes `beta_neighbor` so the
    /// two channels cannot be read off one pooled neighborhood average.
    pub beta_cross: f64,
    pub neighbor_radius_m: f64,
    /// Probability a label is replaced by a uniformly random class.
    pub label_noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            grid_rows: 14,
            grid_cols: 14,
            node_spacing_m: 100.0,
            origin_lat: 39.0,
            origin_lon: -105.0,
            records_per_node_mean: 15.3,
            records_per_node_floor: 8,
            gps_sigma_m: 6.0,
            beta_spatial: [0.0, 0.0, 0.8, -0.3, 0.0, 0.6, 0.0, 0.0, 0.5],
            beta_temporal: [0.3, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.4, 0.7, 0.3],
            beta_external: [-0.2, 0.7, 0.0, 0.2, -0.6, 0.0, 0.0, 0.4],
            beta_neighbor: 2.4,
            beta_cross: -1.3,
            neighbor_radius_m: 270.0,
            label_noise: 0.02,
        }
    }
}

/// Moments of the generating distributions, used to standardize features
/// inside the severity rule. `SQ12` is sqrt(12), the uniform-to-sigma
/// factor.
const SQ12: f64 = 3.464_101_615_137_754_6;

/// Means of the 9 spatial attribute distributions (elevation, slope,
/// curvature, lanes, road width, speed limit, road type, land use, flood
/// risk).
pub const SPATIAL_MU: [f64; 9] = [1600.0, 3.0, 0.01, 2.5, 7.0, 64.0, 2.5, 2.0, 0.5];
pub const SPATIAL_SIGMA: [f64; 9] = [
    120.0,
    2.0,
    0.02 / SQ12,
    1.118_033_988_749_895,   // uniform over {1,2,3,4}
    1.5,
    24.166_091_947_189_145,  // uniform over {30,50,60,80,100}
    1.707_825_127_659_933,   // uniform over {0..5}
    1.414_213_562_373_095_1, // uniform over {0..4}
    1.0 / SQ12,
];

/// Means of the 8 environmental attribute distributions (temperature,
/// precipitation, humidity, wind speed, visibility, weather, vehicle,
/// traffic density).
pub const EXTERNAL_MU: [f64; 8] = [12.0, 4.0, 60.0, 30.0, 10.1, 2.5, 2.0, 60.0];
pub const EXTERNAL_SIGMA: [f64; 8] = [
    9.0,
    8.0 / SQ12,
    80.0 / SQ12,
    60.0 / SQ12,
    19.8 / SQ12,
    1.707_825_127_659_933,
    1.414_213_562_373_095_1,
    120.0 / SQ12,
];

/// Everything needed to recompute any record's severity score.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthTruth {
    pub schema: String,
    pub seed: u64,
    pub config: SynthConfig,
    pub spatial_mu: [f64; 9],
    pub spatial_sigma: [f64; 9],
    pub external_mu: [f64; 8],
    pub external_sigma: [f64; 8],
    /// Site centers as (latitude, longitude).
    pub node_centers: Vec<(f64, f64)>,
    /// Per-site latent risk: beta_spatial dot the site's standardized
    /// spatial attributes.
    pub node_latents: Vec<f64>,
    /// Mean latent of same-road-type sites within the neighbor radius,
    /// per site; 0 where no such site exists.
    pub same_type_means: Vec<f64>,
    /// Mean latent of different-road-type sites within the radius.
    pub cross_type_means: Vec<f64>,
    /// Generating site index of each record, in record order.
    pub record_node: Vec<usize>,
    /// Risk values at the three quartile cuts.
    pub risk_thresholds: [f64; 3],
}

struct SiteAttrs {
    elevation: f64,
    slope: f64,
    curvature: f64,
    lanes: u32,
    road_width: f64,
    speed_limit: f64,
    road_type: u32,
    land_use: u32,
    flood_risk: f64,
}

impl SiteAttrs {
    fn as_vec(&self) -> [f64; 9] {
        [
            self.elevation,
            self.slope,
            self.curvature,
            self.lanes as f64,
            self.road_width,
            self.speed_limit,
            self.road_type as f64,
            self.land_use as f64,
            self.flood_risk,
        ]
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn draw_site(rng: &mut ChaCha8Rng) -> SiteAttrs {
    let n_elev = Normal::new(1600.0, 120.0).unwrap();
    let n_slope = Normal::new(3.0, 2.0).unwrap();
    let n_width = Normal::new(7.0, 1.5).unwrap();
    const SPEEDS: [f64; 5] = [30.0, 50.0, 60.0, 80.0, 100.0];
    SiteAttrs {
        elevation: n_elev.sample(rng),
        slope: n_slope.sample(rng),
        curvature: rng.gen_range(0.0..0.02),
        lanes: rng.gen_range(1..=4),
        road_width: f64::max(n_width.sample(rng), 4.0),
        speed_limit: SPEEDS[rng.gen_range(0..SPEEDS.len())],
        road_type: rng.gen_range(0..6),
        land_use: rng.gen_range(0..5),
        flood_risk: rng.gen_range(0.0..1.0),
    }
}

fn validate_config(cfg: &SynthConfig) -> Result<()> {
    if cfg.grid_rows == 0 || cfg.grid_cols == 0 {
        return Err(StarnError::Config(format!(
            "grid size {}x{} must be positive",
            cfg.grid_rows, cfg.grid_cols
        )));
    }
    if cfg.node_spacing_m <= 0.0 {
        return Err(StarnError::Config("node spacing must be positive".into()));
    }
    if cfg.gps_sigma_m < 0.0 {
        return Err(StarnError::Config("gps sigma must be nonnegative".into()));
    }
    if cfg.records_per_node_mean < cfg.records_per_node_floor as f64 {
        return Err(StarnError::Config(format!(
            "records_per_node_mean {} below floor {}",
            cfg.records_per_node_mean, cfg.records_per_node_floor
        )));
    }
    if !(0.0..1.0).contains(&cfg.label_noise) {
        return Err(StarnError::Config(format!(
            "label_noise {} outside [0, 1)",
            cfg.label_noise
        )));
    }
    Ok(())
}

/// Generates a dataset plus the ground-truth rule that produced it.
/// Deterministic: the same `(config, seed)` yields identical records and
/// truth, byte for byte once serialized.
pub fn synth_generate(cfg: &SynthConfig, seed: u64) -> Result<(Vec<AccidentRecord>, SynthTruth)> {
    validate_config(cfg)?;
    let n_sites = cfg.grid_rows * cfg.grid_cols;
    let m_per_deg_lon = M_PER_DEG_LAT * cfg.origin_lat.to_radians().cos();

    // Site centers and attributes.
    let mut site_rng = stream_rng(seed, "synth-sites");
    let mut centers = Vec::with_capacity(n_sites);
    let mut sites = Vec::with_capacity(n_sites);
    for r in 0..cfg.grid_rows {
        for c in 0..cfg.grid_cols {
            let lat = cfg.origin_lat + (r as f64 * cfg.node_spacing_m) / M_PER_DEG_LAT;
            let lon = cfg.origin_lon + (c as f64 * cfg.node_spacing_m) / m_per_deg_lon;
            centers.push((lat, lon));
            sites.push(draw_site(&mut site_rng));
        }
    }

    // Latent risk per site and its neighborhood average.
    let node_latents: Vec<f64> = sites
        .iter()
        .map(|s| {
            let v = s.as_vec();
            (0..9)
                .map(|j| cfg.beta_spatial[j] * (v[j] - SPATIAL_MU[j]) / SPATIAL_SIGMA[j])
                .sum()
        })
        .collect();
    let channel_mean = |i: usize, same_type: bool| -> f64 {
        let (lat_i, lon_i) = centers[i];
        let mut sum = 0.0;
        let mut count = 0usize;
        for (j, &(lat_j, lon_j)) in centers.iter().enumerate() {
            if j != i
                && (sites[j].road_type == sites[i].road_type) == same_type
                && haversine_m(lat_i, lon_i, lat_j, lon_j) <= cfg.neighbor_radius_m
            {
                sum += node_latents[j];
                count += 1;
            }
        }
        if count == 0 {
            0.0
        } else {
            sum / count as f64
        }
    };
    let same_type_means: Vec<f64> = (0..n_sites).map(|i| channel_mean(i, true)).collect();
    let cross_type_means: Vec<f64> = (0..n_sites).map(|i| channel_mean(i, false)).collect();

    // Records.
    let mut count_rng = stream_rng(seed, "synth-counts");
    let lambda = cfg.records_per_node_mean - cfg.records_per_node_floor as f64;
    let poisson = if lambda > 0.0 {
        Some(Poisson::new(lambda).map_err(|e| StarnError::Config(e.to_string()))?)
    } else {
        None
    };
    let counts: Vec<u32> = (0..n_sites)
        .map(|_| {
            let extra = poisson
                .as_ref()
                .map(|p| p.sample(&mut count_rng) as u32)
                .unwrap_or(0);
            cfg.records_per_node_floor + extra
        })
        .collect();

    let mut rec_rng = stream_rng(seed, "synth-records");
    let scatter = Normal::new(0.0, cfg.gps_sigma_m.max(f64::MIN_POSITIVE)).unwrap();
    let n_temp = Normal::new(12.0, 9.0).unwrap();
    let mut records = Vec::new();
    let mut record_node = Vec::new();
    let mut risks = Vec::new();
    for (site_idx, (&count, site)) in counts.iter().zip(&sites).enumerate() {
        let (clat, clon) = centers[site_idx];
        for _ in 0..count {
            let dy = if cfg.gps_sigma_m > 0.0 {
                scatter.sample(&mut rec_rng)
            } else {
                0.0
            };
            let dx = if cfg.gps_sigma_m > 0.0 {
                scatter.sample(&mut rec_rng)
            } else {
                0.0
            };
            let idx = records.len();
            let rec = AccidentRecord {
                id: format!("r{:06}", idx),
                latitude: clat + dy / M_PER_DEG_LAT,
                longitude: clon + dx / m_per_deg_lon,
                hour: rec_rng.gen_range(0..24),
                day_of_week: rec_rng.gen_range(0..7),
                day_of_month: rec_rng.gen_range(1..=28),
                month: rec_rng.gen_range(1..=12),
                elevation: site.elevation,
                slope: site.slope,
                curvature: site.curvature,
                lanes: site.lanes,
                road_width: site.road_width,
                speed_limit: site.speed_limit,
                road_type: site.road_type,
                land_use: site.land_use,
                flood_risk: site.flood_risk,
                temperature: n_temp.sample(&mut rec_rng),
                precipitation: rec_rng.gen_range(0.0..8.0),
                humidity: rec_rng.gen_range(20.0..100.0),
                wind_speed: rec_rng.gen_range(0.0..60.0),
                visibility: rec_rng.gen_range(0.2..20.0),
                weather_condition: rec_rng.gen_range(0..6),
                vehicle_type: rec_rng.gen_range(0..5),
                traffic_density: rec_rng.gen_range(0.0..120.0),
                severity: 0,
                region: None,
            };

            let t_enc = encode_temporal_parts(rec.hour, rec.day_of_week, rec.day_of_month, rec.month);
            let ext = [
                rec.temperature,
                rec.precipitation,
                rec.humidity,
                rec.wind_speed,
                rec.visibility,
                rec.weather_condition as f64,
                rec.vehicle_type as f64,
                rec.traffic_density,
            ];
            let mut logit = node_latents[site_idx]
                + cfg.beta_neighbor * same_type_means[site_idx]
                + cfg.beta_cross * cross_type_means[site_idx];
            for j in 0..11 {
                logit += cfg.beta_temporal[j] * t_enc[j];
            }
            for j in 0..8 {
                logit += cfg.beta_external[j] * (ext[j] - EXTERNAL_MU[j]) / EXTERNAL_SIGMA[j];
            }
            // Vanishing jitter breaks rank ties without moving the score.
            logit += rec_rng.gen_range(-1e-9..1e-9);
            risks.push(sigmoid(logit));
            record_node.push(site_idx);
            records.push(rec);
        }
    }
    let n = records.len();

    // Quartile cut: rank r maps to class r*4/n, so classes are balanced to
    // within one record.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| risks[a].partial_cmp(&risks[b]).unwrap().then(a.cmp(&b)));
    let mut thresholds = [0.0; 3];
    for (rank, &rec_idx) in order.iter().enumerate() {
        let class = (rank * SEVERITY_CLASSES / n).min(SEVERITY_CLASSES - 1);
        records[rec_idx].severity = class as u8;
        if rank > 0 && rank * SEVERITY_CLASSES / n != (rank - 1) * SEVERITY_CLASSES / n {
            thresholds[(rank * SEVERITY_CLASSES / n) - 1] = risks[rec_idx];
        }
    }

    let mut noise_rng = stream_rng(seed, "synth-noise");
    for rec in records.iter_mut() {
        if cfg.label_noise > 0.0 && noise_rng.gen_range(0.0..1.0) < cfg.label_noise {
            rec.severity = noise_rng.gen_range(0..SEVERITY_CLASSES as u8);
        }
    }

    for (i, rec) in records.iter().enumerate() {
        validate_record(rec, i + 2)?;
    }

    let truth = SynthTruth {
        schema: "starn-synth/1".to_string(),
        seed,
        config: cfg.clone(),
        spatial_mu: SPATIAL_MU,
        spatial_sigma: SPATIAL_SIGMA,
        external_mu: EXTERNAL_MU,
        external_sigma: EXTERNAL_SIGMA,
        node_centers: centers,
        node_latents,
        same_type_means,
        cross_type_means,
        record_node,
        risk_thresholds: thresholds,
    };
    Ok((records, truth))
}

/// Generates and writes the CSV plus a `<stem>.truth.json` next to it.
pub fn synth_to_files(
    cfg: &SynthConfig,
    seed: u64,
    csv_path: &Path,
) -> Result<(Vec<AccidentRecord>, SynthTruth)> {
    let (records, truth) = synth_generate(cfg, seed)?;
    write_csv(csv_path, &records)?;
    let truth_path = csv_path.with_extension("truth.json");
    let json = serde_json::to_string_pretty(&truth)?;
    std::fs::write(truth_path, json)?;
    Ok((records, truth))
}

/// Mutual information (nats) between a continuous signal and discrete
/// labels, with the signal rank-binned into `bins` equal-count bins.
pub fn mutual_information_binned(signal: &[f64], labels: &[u8], bins: usize) -> f64 {
    assert_eq!(signal.len(), labels.len());
    assert!(bins >= 2);
    let n = signal.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| signal[a].partial_cmp(&signal[b]).unwrap().then(a.cmp(&b)));
    let mut bin_of = vec![0usize; n];
    for (rank, &i) in order.iter().enumerate() {
        bin_of[i] = (rank * bins / n).min(bins - 1);
    }
    let n_labels = (*labels.iter().max().unwrap_or(&0) as usize) + 1;
    let mut joint = vec![0.0f64; bins * n_labels];
    for i in 0..n {
        joint[bin_of[i] * n_labels + labels[i] as usize] += 1.0;
    }
    let total = n as f64;
    let mut px = vec![0.0; bins];
    let mut py = vec![0.0; n_labels];
    for b in 0..bins {
        for l in 0..n_labels {
            px[b] += joint[b * n_labels + l];
            py[l] += joint[b * n_labels + l];
        }
    }
    let mut mi = 0.0;
    for b in 0..bins {
        for l in 0..n_labels {
            let pxy = joint[b * n_labels + l] / total;
            if pxy > 0.0 {
                mi += pxy * (pxy / (px[b] / total * py[l] / total)).ln();
            }
        }
    }
    mi
}
