//! Ingestion of trips, regions, attributes and population, and construction of
//! the OD series, distance matrix and attribute matrix.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use chrono::{DateTime, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const EARTH_RADIUS_KM: f64 = 6371.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatLon {
    pub lat: f64,
    pub lon: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Region {
    pub id: usize,
    pub centroid: LatLon,
    pub attributes: BTreeSet<usize>,
    pub population: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TripRecord {
    pub origin: usize,
    pub destination: usize,
    /// Epoch seconds, UTC.
    pub timestamp: i64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Reject {
    pub line: usize,
    pub reason: String,
}

#[derive(Clone, Debug, Default)]
pub struct ParsedTrips {
    pub records: Vec<TripRecord>,
    pub rejects: Vec<Reject>,
}

/// Sequence of `n x n` count frames over half-open intervals `[t0 + k*tau, t0 + (k+1)*tau)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OdSeries {
    pub t0: i64,
    pub tau: i64,
    pub n: usize,
    /// Row-major `n x n` counts, origin-major.
    pub frames: Vec<Vec<u64>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SpanSummary {
    pub in_span: usize,
    pub before: usize,
    pub after: usize,
}

impl OdSeries {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame_start(&self, k: usize) -> i64 {
        self.t0 + k as i64 * self.tau
    }

    pub fn frame_tensor(&self, k: usize) -> Tensor {
        Tensor::matrix(self.n, self.n, self.frames[k].iter().map(|&c| c as f64).collect())
    }

    pub fn total(&self) -> u64 {
        self.frames.iter().flatten().sum()
    }
}

fn data_lines<R: BufRead>(reader: R) -> impl Iterator<Item = (usize, std::io::Result<String>)> {
    reader
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| match l {
            Ok(s) => {
                let t = s.trim();
                !t.is_empty() && !t.starts_with('#')
            }
            Err(_) => true,
        })
}

pub fn parse_timestamp(s: &str) -> Option<i64> {
    let s = s.trim();
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.timestamp());
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(dt.and_utc().timestamp());
        }
    }
    None
}

/// Parses `origin_id,dest_id,iso8601_timestamp` lines. A leading header line is skipped.
pub fn parse_trips<R: BufRead>(reader: R, n_regions: usize) -> Result<ParsedTrips> {
    let mut out = ParsedTrips::default();
    let mut first = true;
    for (line_no, line) in data_lines(reader) {
        let line = line.map_err(|e| {
            Error::invalid(format!("trip stream failed at line {line_no} after {} records: {e}", out.records.len()))
        })?;
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let is_first = std::mem::replace(&mut first, false);
        if is_first && fields.first().is_some_and(|f| f.parse::<i64>().is_err()) {
            continue;
        }
        let reject = |reason: String| Reject { line: line_no, reason };
        if fields.len() != 3 {
            out.rejects.push(reject(format!("expected 3 fields, found {}", fields.len())));
            continue;
        }
        let ids: Vec<Option<usize>> = fields[..2].iter().map(|f| f.parse::<usize>().ok()).collect();
        let (Some(o), Some(d)) = (ids[0], ids[1]) else {
            out.rejects.push(reject("region id is not a nonnegative integer".into()));
            continue;
        };
        if o >= n_regions || d >= n_regions {
            out.rejects.push(reject(format!("unknown region id ({o},{d}) with {n_regions} regions")));
            continue;
        }
        let Some(ts) = parse_timestamp(fields[2]) else {
            out.rejects.push(reject(format!("unparseable timestamp {:?}", fields[2])));
            continue;
        };
        out.records.push(TripRecord { origin: o, destination: d, timestamp: ts });
    }
    Ok(out)
}

pub fn build_od_series(
    trips: &[TripRecord],
    n: usize,
    t0: i64,
    tau: i64,
    frame_count: i64,
) -> Result<(OdSeries, SpanSummary)> {
    if frame_count <= 0 {
        return Err(Error::invalid(format!("frame_count must be positive, got {frame_count}")));
    }
    if tau <= 0 {
        return Err(Error::invalid(format!("tau must be positive, got {tau}")));
    }
    let mut frames = vec![vec![0u64; n * n]; frame_count as usize];
    let mut summary = SpanSummary::default();
    for trip in trips {
        let offset = trip.timestamp - t0;
        if offset < 0 {
            summary.before += 1;
            continue;
        }
        let k = offset.div_euclid(tau);
        if k >= frame_count {
            summary.after += 1;
            continue;
        }
        frames[k as usize][trip.origin * n + trip.destination] += 1;
        summary.in_span += 1;
    }
    Ok((OdSeries { t0, tau, n, frames }, summary))
}

/// Great-circle distance in kilometers.
///
/// Arguments are put in a canonical order first so that `haversine(a, b)` and
/// `haversine(b, a)` are bitwise equal.
pub fn haversine(a: LatLon, b: LatLon) -> f64 {
    let (p, q) = if (a.lat, a.lon) <= (b.lat, b.lon) { (a, b) } else { (b, a) };
    let (lat1, lat2) = (p.lat.to_radians(), q.lat.to_radians());
    let dlat = lat2 - lat1;
    let dlon = (q.lon - p.lon).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().clamp(0.0, 1.0).asin()
}

pub fn build_distance_matrix(regions: &[Region]) -> Tensor {
    let n = regions.len();
    let mut d = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in i + 1..n {
            let v = haversine(regions[i].centroid, regions[j].centroid);
            d.set(i, j, v);
            d.set(j, i, v);
        }
    }
    d
}

/// Binary `N x M` matrix with a one wherever region `i` carries attribute `j`.
pub fn build_attribute_matrix(regions: &[Region], m: usize) -> Result<Tensor> {
    let mut a = Tensor::zeros(&[regions.len(), m]);
    for (i, r) in regions.iter().enumerate() {
        for &j in &r.attributes {
            if j >= m {
                return Err(Error::invalid(format!("region {i} has attribute {j} outside vocabulary of {m}")));
            }
            a.set(i, j, 1.0);
        }
    }
    Ok(a)
}

/// Hour of day (0..24) of an epoch timestamp shifted by `tz_offset` seconds.
pub fn bucketize(timestamp: i64, tz_offset: i64) -> usize {
    ((timestamp + tz_offset).rem_euclid(86_400) / 3_600) as usize
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

fn parse_field<T: std::str::FromStr>(path: &Path, line: usize, field: &str, what: &str) -> Result<T> {
    field
        .trim()
        .parse()
        .map_err(|_| Error::data(path, format!("line {line}: invalid {what} {field:?}")))
}

fn is_header(fields: &[&str]) -> bool {
    fields.first().is_some_and(|f| f.trim().parse::<f64>().is_err())
}

/// Reads `regions.csv` (`id,lat,lon,population`). Ids must be dense `0..N`.
pub fn read_regions(path: &Path) -> Result<Vec<Region>> {
    let mut regions = Vec::new();
    let mut first = true;
    for (line_no, line) in data_lines(open(path)?) {
        let line = line.map_err(|e| Error::io(path, e))?;
        let fields: Vec<&str> = line.split(',').collect();
        if std::mem::replace(&mut first, false) && is_header(&fields) {
            continue;
        }
        if fields.len() != 4 {
            return Err(Error::data(path, format!("line {line_no}: expected 4 fields")));
        }
        let id: usize = parse_field(path, line_no, fields[0], "id")?;
        let lat: f64 = parse_field(path, line_no, fields[1], "latitude")?;
        let lon: f64 = parse_field(path, line_no, fields[2], "longitude")?;
        let population: f64 = parse_field(path, line_no, fields[3], "population")?;
        if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
            return Err(Error::data(path, format!("line {line_no}: coordinates out of range")));
        }
        if !(population >= 0.0) {
            return Err(Error::data(path, format!("line {line_no}: population must be nonnegative")));
        }
        if id != regions.len() {
            return Err(Error::data(path, format!("line {line_no}: region ids must be dense, expected {}", regions.len())));
        }
        regions.push(Region { id, centroid: LatLon { lat, lon }, attributes: BTreeSet::new(), population });
    }
    if regions.is_empty() {
        return Err(Error::data(path, "no regions"));
    }
    Ok(regions)
}

/// Reads `attribute_vocab.csv` (`attribute_id,name`) with dense ids.
pub fn read_vocab(path: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    let mut first = true;
    for (line_no, line) in data_lines(open(path)?) {
        let line = line.map_err(|e| Error::io(path, e))?;
        let (id, name) = line
            .split_once(',')
            .ok_or_else(|| Error::data(path, format!("line {line_no}: expected attribute_id,name")))?;
        if std::mem::replace(&mut first, false) && id.trim().parse::<usize>().is_err() {
            continue;
        }
        let id: usize = parse_field(path, line_no, id, "attribute id")?;
        if id != names.len() {
            return Err(Error::data(path, format!("line {line_no}: attribute ids must be dense, expected {}", names.len())));
        }
        names.push(name.trim().to_string());
    }
    Ok(names)
}

/// Reads `attributes.csv` (`region_id,attribute_id`) into the regions' attribute sets.
pub fn read_attributes(path: &Path, regions: &mut [Region], m: usize) -> Result<()> {
    let mut first = true;
    for (line_no, line) in data_lines(open(path)?) {
        let line = line.map_err(|e| Error::io(path, e))?;
        let fields: Vec<&str> = line.split(',').collect();
        if std::mem::replace(&mut first, false) && is_header(&fields) {
            continue;
        }
        if fields.len() != 2 {
            return Err(Error::data(path, format!("line {line_no}: expected 2 fields")));
        }
        let r: usize = parse_field(path, line_no, fields[0], "region id")?;
        let a: usize = parse_field(path, line_no, fields[1], "attribute id")?;
        if r >= regions.len() || a >= m {
            return Err(Error::data(path, format!("line {line_no}: ({r},{a}) out of range")));
        }
        regions[r].attributes.insert(a);
    }
    Ok(())
}

pub fn read_trips(path: &Path, n_regions: usize) -> Result<ParsedTrips> {
    parse_trips(open(path)?, n_regions).map_err(|e| Error::data(path, e.to_string()))
}
