//! Accident dataset loading, validation, splitting, and synthesis.
//!
//! The on-disk format is schema `starn-csv/1`: UTF-8, comma-separated, a
//! header with the exact column names in [`COLUMNS`], one record per row,
//! and an optional trailing `region` column. Category codes are small
//! integers documented on the code-range constants below.

pub mod split;
pub mod synth;

use std::collections::BTreeSet;
use std::path::Path;

use crate::error::{Result, StarnError};

pub use split::{kfold_splits, stratified_split, DatasetSplit, StratumLabel};
pub use synth::{synth_generate, synth_to_files, SynthConfig, SynthTruth};

/// Schema identifier accepted by [`load_csv`].
pub const CSV_SCHEMA: &str = "starn-csv/1";

/// Required columns, in file order.
pub const COLUMNS: [&str; 25] = [
    "id",
    "latitude",
    "longitude",
    "hour",
    "day_of_week",
    "day_of_month",
    "month",
    "elevation",
    "slope",
    "curvature",
    "lanes",
    "road_width",
    "speed_limit",
    "road_type",
    "land_use",
    "flood_risk",
    "temperature",
    "precipitation",
    "humidity",
    "wind_speed",
    "visibility",
    "weather_condition",
    "vehicle_type",
    "traffic_density",
    "severity",
];

/// Road type codes: 0 motorway, 1 trunk, 2 primary, 3 secondary,
/// 4 residential, 5 service.
pub const ROAD_TYPE_CODES: u32 = 6;
/// Land use codes: 0 residential, 1 commercial, 2 industrial,
/// 3 agricultural, 4 other.
pub const LAND_USE_CODES: u32 = 5;
/// Weather codes: 0 clear, 1 rain, 2 snow, 3 fog, 4 high wind, 5 other.
pub const WEATHER_CODES: u32 = 6;
/// Vehicle codes: 0 car, 1 truck, 2 motorcycle, 3 bus, 4 bicycle.
pub const VEHICLE_CODES: u32 = 5;

/// Number of severity classes; labels are 0 no-injury, 1 minor, 2 moderate,
/// 3 severe.
pub const SEVERITY_CLASSES: usize = 4;

/// One validated accident report.
#[derive(Clone, Debug, PartialEq)]
pub struct AccidentRecord {
    pub id: String,
    pub latitude: f64,
    pub longitude: f64,
    pub hour: u8,
    pub day_of_week: u8,
    pub day_of_month: u8,
    pub month: u8,
    pub elevation: f64,
    pub slope: f64,
    pub curvature: f64,
    pub lanes: u32,
    pub road_width: f64,
    pub speed_limit: f64,
    pub road_type: u32,
    pub land_use: u32,
    pub flood_risk: f64,
    pub temperature: f64,
    pub precipitation: f64,
    pub humidity: f64,
    pub wind_speed: f64,
    pub visibility: f64,
    pub weather_condition: u32,
    pub vehicle_type: u32,
    pub traffic_density: f64,
    pub severity: u8,
    pub region: Option<String>,
}

/// Checks every field invariant; `row` is the 1-based file line used in
/// error messages.
pub fn validate_record(r: &AccidentRecord, row: usize) -> Result<()> {
    let fail = |message: String| Err(StarnError::Row { row, message });
    if r.id.is_empty() {
        return fail("empty id".into());
    }
    if !(-90.0..=90.0).contains(&r.latitude) {
        return fail(format!("latitude {} outside [-90, 90]", r.latitude));
    }
    if !(-180.0..=180.0).contains(&r.longitude) {
        return fail(format!("longitude {} outside [-180, 180]", r.longitude));
    }
    if r.hour > 23 {
        return fail(format!("hour {} outside 0-23", r.hour));
    }
    if r.day_of_week > 6 {
        return fail(format!("day_of_week {} outside 0-6", r.day_of_week));
    }
    if !(1..=31).contains(&r.day_of_month) {
        return fail(format!("day_of_month {} outside 1-31", r.day_of_month));
    }
    if !(1..=12).contains(&r.month) {
        return fail(format!("month {} outside 1-12", r.month));
    }
    for (name, v) in [
        ("elevation", r.elevation),
        ("slope", r.slope),
        ("curvature", r.curvature),
        ("road_width", r.road_width),
        ("speed_limit", r.speed_limit),
        ("flood_risk", r.flood_risk),
        ("temperature", r.temperature),
        ("precipitation", r.precipitation),
        ("humidity", r.humidity),
        ("wind_speed", r.wind_speed),
        ("visibility", r.visibility),
        ("traffic_density", r.traffic_density),
    ] {
        if !v.is_finite() {
            return fail(format!("{} is not finite", name));
        }
    }
    if r.curvature < 0.0 {
        return fail(format!("curvature {} negative", r.curvature));
    }
    if r.lanes < 1 {
        return fail("lanes must be at least 1".into());
    }
    if r.road_width <= 0.0 {
        return fail(format!("road_width {} not positive", r.road_width));
    }
    if r.speed_limit <= 0.0 {
        return fail(format!("speed_limit {} not positive", r.speed_limit));
    }
    if !(0.0..=1.0).contains(&r.flood_risk) {
        return fail(format!("flood_risk {} outside [0, 1]", r.flood_risk));
    }
    if r.precipitation < 0.0 {
        return fail(format!("precipitation {} negative", r.precipitation));
    }
    if !(0.0..=100.0).contains(&r.humidity) {
        return fail(format!("humidity {} outside [0, 100]", r.humidity));
    }
    if r.wind_speed < 0.0 {
        return fail(format!("wind_speed {} negative", r.wind_speed));
    }
    if r.visibility < 0.0 {
        return fail(format!("visibility {} negative", r.visibility));
    }
    if r.traffic_density < 0.0 {
        return fail(format!("traffic_density {} negative", r.traffic_density));
    }
    if r.road_type >= ROAD_TYPE_CODES {
        return fail(format!("road_type code {} unknown", r.road_type));
    }
    if r.land_use >= LAND_USE_CODES {
        return fail(format!("land_use code {} unknown", r.land_use));
    }
    if r.weather_condition >= WEATHER_CODES {
        return fail(format!("weather_condition code {} unknown", r.weather_condition));
    }
    if r.vehicle_type >= VEHICLE_CODES {
        return fail(format!("vehicle_type code {} unknown", r.vehicle_type));
    }
    if r.severity as usize >= SEVERITY_CLASSES {
        return fail(format!("severity {} outside 0-3", r.severity));
    }
    Ok(())
}

fn parse_f64(field: &str, raw: &str, row: usize) -> Result<f64> {
    raw.trim().parse().map_err(|_| StarnError::Row {
        row,
        message: format!("{}: cannot parse {:?} as a number", field, raw),
    })
}

fn parse_uint(field: &str, raw: &str, row: usize) -> Result<u32> {
    raw.trim().parse().map_err(|_| StarnError::Row {
        row,
        message: format!("{}: cannot parse {:?} as a non-negative integer", field, raw),
    })
}

/// Loads and validates a `starn-csv/1` file. Row numbers in errors count
/// the header as line 1.
pub fn load_csv(path: &Path, schema: &str) -> Result<Vec<AccidentRecord>> {
    if schema != CSV_SCHEMA {
        return Err(StarnError::Config(format!(
            "unknown schema version {:?}, expected {:?}",
            schema, CSV_SCHEMA
        )));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)?;

    let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(StarnError::EmptyDataset(format!(
            "{} has no header row",
            path.display()
        )));
    }
    for (i, expected) in COLUMNS.iter().enumerate() {
        match headers.get(i) {
            Some(h) if h == expected => {}
            Some(h) => {
                return Err(StarnError::Schema(format!(
                    "column {} is {:?}, expected {:?}",
                    i + 1,
                    h,
                    expected
                )))
            }
            None => {
                return Err(StarnError::Schema(format!("missing column {:?}", expected)))
            }
        }
    }
    let has_region = match headers.len() {
        n if n == COLUMNS.len() => false,
        n if n == COLUMNS.len() + 1 && headers[COLUMNS.len()] == "region" => true,
        _ => {
            return Err(StarnError::Schema(format!(
                "unexpected column {:?}",
                headers[COLUMNS.len()]
            )))
        }
    };

    let mut records = Vec::new();
    let mut seen_ids: BTreeSet<String> = BTreeSet::new();
    for (i, row) in reader.records().enumerate() {
        let row_no = i + 2;
        let raw = row?;
        let field = |j: usize| raw.get(j).unwrap_or("");
        let rec = AccidentRecord {
            id: field(0).trim().to_string(),
            latitude: parse_f64("latitude", field(1), row_no)?,
            longitude: parse_f64("longitude", field(2), row_no)?,
            hour: parse_uint("hour", field(3), row_no)? as u8,
            day_of_week: parse_uint("day_of_week", field(4), row_no)? as u8,
            day_of_month: parse_uint("day_of_month", field(5), row_no)? as u8,
            month: parse_uint("month", field(6), row_no)? as u8,
            elevation: parse_f64("elevation", field(7), row_no)?,
            slope: parse_f64("slope", field(8), row_no)?,
            curvature: parse_f64("curvature", field(9), row_no)?,
            lanes: parse_uint("lanes", field(10), row_no)?,
            road_width: parse_f64("road_width", field(11), row_no)?,
            speed_limit: parse_f64("speed_limit", field(12), row_no)?,
            road_type: parse_uint("road_type", field(13), row_no)?,
            land_use: parse_uint("land_use", field(14), row_no)?,
            flood_risk: parse_f64("flood_risk", field(15), row_no)?,
            temperature: parse_f64("temperature", field(16), row_no)?,
            precipitation: parse_f64("precipitation", field(17), row_no)?,
            humidity: parse_f64("humidity", field(18), row_no)?,
            wind_speed: parse_f64("wind_speed", field(19), row_no)?,
            visibility: parse_f64("visibility", field(20), row_no)?,
            weather_condition: parse_uint("weather_condition", field(21), row_no)?,
            vehicle_type: parse_uint("vehicle_type", field(22), row_no)?,
            traffic_density: parse_f64("traffic_density", field(23), row_no)?,
            severity: parse_uint("severity", field(24), row_no)? as u8,
            region: if has_region {
                let r = field(25).trim();
                if r.is_empty() {
                    None
                } else {
                    Some(r.to_string())
                }
            } else {
                None
            },
        };
        validate_record(&rec, row_no)?;
        if !seen_ids.insert(rec.id.clone()) {
            return Err(StarnError::Row {
                row: row_no,
                message: format!("duplicate id {:?}", rec.id),
            });
        }
        records.push(rec);
    }
    if records.is_empty() {
        return Err(StarnError::EmptyDataset(format!(
            "{} contains no data rows",
            path.display()
        )));
    }
    Ok(records)
}

/// Writes records in `starn-csv/1` form. The `region` column is emitted iff
/// any record carries one; loading the output reproduces the input exactly.
pub fn write_csv(path: &Path, records: &[AccidentRecord]) -> Result<()> {
    let with_region = records.iter().any(|r| r.region.is_some());
    let mut writer = csv::Writer::from_path(path)?;
    let mut header: Vec<&str> = COLUMNS.to_vec();
    if with_region {
        header.push("region");
    }
    writer.write_record(&header)?;
    for r in records {
        let mut fields: Vec<String> = vec![
            r.id.clone(),
            r.latitude.to_string(),
            r.longitude.to_string(),
            r.hour.to_string(),
            r.day_of_week.to_string(),
            r.day_of_month.to_string(),
            r.month.to_string(),
            r.elevation.to_string(),
            r.slope.to_string(),
            r.curvature.to_string(),
            r.lanes.to_string(),
            r.road_width.to_string(),
            r.speed_limit.to_string(),
            r.road_type.to_string(),
            r.land_use.to_string(),
            r.flood_risk.to_string(),
            r.temperature.to_string(),
            r.precipitation.to_string(),
            r.humidity.to_string(),
            r.wind_speed.to_string(),
            r.visibility.to_string(),
            r.weather_condition.to_string(),
            r.vehicle_type.to_string(),
            r.traffic_density.to_string(),
            r.severity.to_string(),
        ];
        if with_region {
            fields.push(r.region.clone().unwrap_or_default());
        }
        writer.write_record(&fields)?;
    }
    writer.flush()?;
    Ok(())
}
