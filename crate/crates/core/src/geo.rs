//! Geospatial preprocessing: Mercator projection of district centers,
//! nearest-neighbor context construction, and the integer coordinate scaling
//! consumed by spatial position embedding.
//!
//! All functions are pure over immutable inputs and safe to call from any
//! number of workers.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Spherical earth radius in meters. Only relative positions matter here, so
/// the simpler spherical Mercator is used instead of an ellipsoidal model.
pub const EARTH_RADIUS_M: f64 = 6_378_137.0;

/// Latitude band on which the Mercator projection is well conditioned.
pub const MERCATOR_MAX_LAT_DEG: f64 = 85.05;

/// One business district's center in raw, planar and scaled coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct DistrictGeo {
    pub district_id: u64,
    /// Longitude in degrees.
    pub raw_lng: f64,
    /// Latitude in degrees, inside the Mercator validity band.
    pub raw_lat: f64,
    /// Projected easting in meters.
    pub planar_x: f64,
    /// Projected northing in meters.
    pub planar_y: f64,
    /// Integer coordinate in `[0, n_x)` after scaling.
    pub scaled_x: u32,
    /// Integer coordinate in `[0, n_y)` after scaling.
    pub scaled_y: u32,
}

impl DistrictGeo {
    /// Builds a district from raw coordinates, projecting immediately.
    /// Scaled coordinates stay zero until [`scale_coords`] runs.
    pub fn from_raw(district_id: u64, raw_lng: f64, raw_lat: f64) -> Result<Self> {
        let (planar_x, planar_y) = mercator_project(raw_lng, raw_lat)?;
        Ok(DistrictGeo {
            district_id,
            raw_lng,
            raw_lat,
            planar_x,
            planar_y,
            scaled_x: 0,
            scaled_y: 0,
        })
    }
}

/// Spherical Mercator: `x = R * lng_rad`, `y = R * ln(tan(pi/4 + lat_rad/2))`.
/// Strictly monotone in each argument on the validity band.
pub fn mercator_project(raw_lng: f64, raw_lat: f64) -> Result<(f64, f64)> {
    if !raw_lat.is_finite() || raw_lat.abs() >= MERCATOR_MAX_LAT_DEG {
        return Err(Error::Domain(format!(
            "latitude {raw_lat} outside Mercator validity band ({}, {})",
            -MERCATOR_MAX_LAT_DEG, MERCATOR_MAX_LAT_DEG
        )));
    }
    if !raw_lng.is_finite() {
        return Err(Error::Domain(format!("longitude {raw_lng} is not finite")));
    }
    let lng_rad = raw_lng.to_radians();
    let lat_rad = raw_lat.to_radians();
    let x = EARTH_RADIUS_M * lng_rad;
    let y = EARTH_RADIUS_M * (std::f64::consts::FRAC_PI_4 + lat_rad / 2.0).tan().ln();
    Ok((x, y))
}

/// Planar-coordinate extents of the training district universe, frozen when
/// [`scale_coords`] runs so unseen districts at inference clamp into range.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ScaleBounds {
    pub min_x: f64,
    pub max_x: f64,
    pub min_y: f64,
    pub max_y: f64,
}

fn scale_one(v: f64, min: f64, max: f64, n: u32) -> u32 {
    // truncation toward zero, then clamp so the maximum maps to n-1 and the
    // stated range [0, n) holds
    let raw = ((v - min) / (max - min) * n as f64).trunc();
    raw.clamp(0.0, (n - 1) as f64) as u32
}

/// Scales planar coordinates to integers in `[0, n_x) x [0, n_y)` using the
/// min/max over the given district universe, and returns those frozen bounds.
pub fn scale_coords(districts: &mut [DistrictGeo], n_x: u32, n_y: u32) -> Result<ScaleBounds> {
    if districts.len() < 2 {
        return Err(Error::DegenerateExtent(
            "need at least two districts to scale coordinates".into(),
        ));
    }
    let min_x = districts.iter().map(|d| d.planar_x).fold(f64::INFINITY, f64::min);
    let max_x = districts.iter().map(|d| d.planar_x).fold(f64::NEG_INFINITY, f64::max);
    let min_y = districts.iter().map(|d| d.planar_y).fold(f64::INFINITY, f64::min);
    let max_y = districts.iter().map(|d| d.planar_y).fold(f64::NEG_INFINITY, f64::max);
    if min_x == max_x {
        return Err(Error::DegenerateExtent(
            "all districts share one planar x coordinate".into(),
        ));
    }
    if min_y == max_y {
        return Err(Error::DegenerateExtent(
            "all districts share one planar y coordinate".into(),
        ));
    }
    let bounds = ScaleBounds { min_x, max_x, min_y, max_y };
    for d in districts.iter_mut() {
        apply_scale(d, &bounds, n_x, n_y);
    }
    Ok(bounds)
}

/// Applies frozen bounds to one district, clamping out-of-universe values.
pub fn apply_scale(d: &mut DistrictGeo, bounds: &ScaleBounds, n_x: u32, n_y: u32) {
    d.scaled_x = scale_one(d.planar_x, bounds.min_x, bounds.max_x, n_x);
    d.scaled_y = scale_one(d.planar_y, bounds.min_y, bounds.max_y, n_y);
}

/// For each district: itself first, then the `m - 1` closest others by
/// Euclidean distance on planar coordinates. Ties break by ascending
/// district id so the relation is deterministic.
pub fn nearest_neighbors(districts: &[DistrictGeo], m: usize) -> Result<BTreeMap<u64, Vec<u64>>> {
    if m == 0 || m > districts.len() {
        return Err(Error::Config(format!(
            "neighbor count {m} must be in 1..={}",
            districts.len()
        )));
    }
    let mut out = BTreeMap::new();
    for center in districts {
        let mut others: Vec<(f64, u64)> = districts
            .iter()
            .filter(|d| d.district_id != center.district_id)
            .map(|d| {
                let dx = d.planar_x - center.planar_x;
                let dy = d.planar_y - center.planar_y;
                (dx * dx + dy * dy, d.district_id)
            })
            .collect();
        others.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite distances").then(a.1.cmp(&b.1)));
        let mut ids = Vec::with_capacity(m);
        ids.push(center.district_id);
        ids.extend(others.iter().take(m - 1).map(|(_, id)| *id));
        out.insert(center.district_id, ids);
    }
    Ok(out)
}

/// Relative integer coordinates of each context member versus the center:
/// `x_m = scaled_x_m - scaled_x_center + n_x` (y analogous). The center maps
/// to exactly `(n_x, n_y)`; with clamped inputs every output lies in
/// `[1, 2n - 1]`.
pub fn relative_coords(
    neighbor_ids: &[u64],
    scaled: &BTreeMap<u64, (u32, u32)>,
    n_x: u32,
    n_y: u32,
) -> Result<Vec<(u32, u32)>> {
    let center = neighbor_ids
        .first()
        .ok_or_else(|| Error::Contract("empty neighbor context".into()))?;
    let &(cx, cy) = scaled
        .get(center)
        .ok_or_else(|| Error::Index(format!("no scaled coords for district {center}")))?;
    neighbor_ids
        .iter()
        .map(|id| {
            let &(x, y) = scaled
                .get(id)
                .ok_or_else(|| Error::Index(format!("no scaled coords for district {id}")))?;
            let rx = x as i64 - cx as i64 + n_x as i64;
            let ry = y as i64 - cy as i64 + n_y as i64;
            debug_assert!(rx >= 0 && rx < 2 * n_x as i64);
            debug_assert!(ry >= 0 && ry < 2 * n_y as i64);
            Ok((rx as u32, ry as u32))
        })
        .collect()
}

/// A center district with its ordered neighbor list (center first) and the
/// members' relative coordinates; `relative_coords[0] == (n_x, n_y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborContext {
    pub center_id: u64,
    pub neighbor_ids: Vec<u64>,
    pub relative_coords: Vec<(u32, u32)>,
}

/// Scales coordinates in place, then builds the M-member context of every
/// district. `districts` must already be projected.
pub fn build_neighbor_contexts(
    districts: &mut [DistrictGeo],
    m: usize,
    n_x: u32,
    n_y: u32,
) -> Result<(Vec<NeighborContext>, ScaleBounds)> {
    let bounds = scale_coords(districts, n_x, n_y)?;
    let neighbor_map = nearest_neighbors(districts, m)?;
    let scaled: BTreeMap<u64, (u32, u32)> = districts
        .iter()
        .map(|d| (d.district_id, (d.scaled_x, d.scaled_y)))
        .collect();
    let mut contexts = Vec::with_capacity(districts.len());
    for d in districts.iter() {
        let ids = &neighbor_map[&d.district_id];
        let coords = relative_coords(ids, &scaled, n_x, n_y)?;
        contexts.push(NeighborContext {
            center_id: d.district_id,
            neighbor_ids: ids.clone(),
            relative_coords: coords,
        });
    }
    Ok((contexts, bounds))
}

pub const DISTRICT_FILE_HEADER: &str = "district_id,lng_degrees,lat_degrees";

/// Reads the delimited district file: a required header row, then one
/// `district_id,lng_degrees,lat_degrees` line per district.
pub fn load_districts(path: &Path) -> Result<Vec<DistrictGeo>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == DISTRICT_FILE_HEADER => {}
        Some((_, other)) => {
            return Err(Error::Parse {
                line: 1,
                message: format!(
                    "expected header '{DISTRICT_FILE_HEADER}', found '{}'",
                    other.trim()
                ),
            })
        }
        None => {
            return Err(Error::Parse {
                line: 1,
                message: "empty district file".into(),
            })
        }
    }
    let mut districts = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 3 fields, found {}", fields.len()),
            });
        }
        let district_id: u64 = fields[0].parse().map_err(|_| Error::Parse {
            line: line_no,
            message: format!("bad district_id '{}'", fields[0]),
        })?;
        let lng: f64 = fields[1].parse().map_err(|_| Error::Parse {
            line: line_no,
            message: format!("bad lng_degrees '{}'", fields[1]),
        })?;
        let lat: f64 = fields[2].parse().map_err(|_| Error::Parse {
            line: line_no,
            message: format!("bad lat_degrees '{}'", fields[2]),
        })?;
        if !seen.insert(district_id) {
            return Err(Error::Parse {
                line: line_no,
                message: format!("duplicate district_id {district_id}"),
            });
        }
        districts.push(DistrictGeo::from_raw(district_id, lng, lat).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?);
    }
    Ok(districts)
}

/// Writes districts in the same delimited format `load_districts` reads.
pub fn write_districts(path: &Path, districts: &[DistrictGeo]) -> Result<()> {
    let mut out = String::new();
    out.push_str(DISTRICT_FILE_HEADER);
    out.push('\n');
    for d in districts {
        writeln!(out, "{},{:.7},{:.7}", d.district_id, d.raw_lng, d.raw_lat)
            .expect("string write");
    }
    std::fs::write(path, out)?;
    Ok(())
}
