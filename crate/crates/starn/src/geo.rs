//! Great-circle distance on the WGS84 mean-radius sphere.

pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Meters per degree of latitude on the same sphere, so small offsets in
/// degrees and haversine distances agree.
pub const M_PER_DEG_LAT: f64 = EARTH_RADIUS_M * std::f64::consts::PI / 180.0;

/// Haversine distance in meters between two (latitude, longitude) points
/// given in degrees.
pub fn haversine_m(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = (lat2 - lat1).to_radians();
    let dl = (lon2 - lon1).to_radians();
    let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * a.sqrt().asin()
}
