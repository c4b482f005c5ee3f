//! Trip ingestion, demand binning, chronological splitting, scaling and windowing.
//!
//! Raw trip records are binned into a `(T, N, f)` demand tensor where feature 0
//! counts pick-ups and feature 1 counts drop-offs per node and interval.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::path::Path;

use chrono::{DateTime, NaiveDateTime};
use ndarray::{s, Array3, ArrayViewMut3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of per-node features: pick-up and drop-off counts.
pub const FEATURES: usize = 2;
pub const PICKUP: usize = 0;
pub const DROPOFF: usize = 1;

/// Default bin width used throughout: 30 minutes.
pub const DEFAULT_INTERVAL_SECS: i64 = 30 * 60;

const TENSOR_MAGIC: &[u8; 8] = b"MVFNDT1\0";

/// Where a trip started or ended, before node resolution.
#[derive(Debug, Clone, PartialEq)]
pub enum Site {
    /// A raw node key as found in the input (station id, zone id, ...).
    Key(String),
    Coord {
        lat: f64,
        lon: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripRecord {
    /// UTC seconds.
    pub pickup_time: i64,
    pub dropoff_time: i64,
    pub pickup: Site,
    pub dropoff: Site,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TimeFormat {
    #[default]
    Iso8601,
    EpochSeconds,
}

/// Which CSV columns carry trip locations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LocationColumns {
    Node {
        pickup: String,
        dropoff: String,
    },
    Coord {
        pickup_lat: String,
        pickup_lon: String,
        dropoff_lat: String,
        dropoff_lon: String,
    },
}

/// Maps column roles onto header names of a trip CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripSchema {
    pub pickup_time: String,
    pub dropoff_time: String,
    pub location: LocationColumns,
    #[serde(default)]
    pub time_format: TimeFormat,
    /// Abort once more than this fraction of rows is rejected.
    #[serde(default = "default_reject_fraction")]
    pub max_reject_fraction: f64,
}

fn default_reject_fraction() -> f64 {
    0.05
}

impl TripSchema {
    pub fn with_node_columns(pickup_time: &str, dropoff_time: &str, pickup: &str, dropoff: &str) -> Self {
        Self {
            pickup_time: pickup_time.into(),
            dropoff_time: dropoff_time.into(),
            location: LocationColumns::Node {
                pickup: pickup.into(),
                dropoff: dropoff.into(),
            },
            time_format: TimeFormat::Iso8601,
            max_reject_fraction: default_reject_fraction(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RowReject {
    /// 1-based line number in the file, header included.
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct IngestReport {
    pub records: Vec<TripRecord>,
    pub rejects: Vec<RowReject>,
}

impl IngestReport {
    pub fn total_rows(&self) -> usize {
        self.records.len() + self.rejects.len()
    }
}

/// Reads trip records from a CSV file with a header row.
pub fn ingest_trip_records(path: impl AsRef<Path>, schema: &TripSchema) -> Result<IngestReport> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_trip_records(BufReader::new(file), schema)
}

/// Like [`ingest_trip_records`] but over any reader.
pub fn read_trip_records<R: Read>(reader: R, schema: &TripSchema) -> Result<IngestReport> {
    let mut csv = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = csv
        .headers()
        .map_err(|e| Error::Schema(format!("cannot read header row: {e}")))?
        .clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("missing column '{name}'")))
    };
    let pick_t = col(&schema.pickup_time)?;
    let drop_t = col(&schema.dropoff_time)?;
    let loc = match &schema.location {
        LocationColumns::Node { pickup, dropoff } => LocIdx::Node(col(pickup)?, col(dropoff)?),
        LocationColumns::Coord {
            pickup_lat,
            pickup_lon,
            dropoff_lat,
            dropoff_lon,
        } => LocIdx::Coord([col(pickup_lat)?, col(pickup_lon)?, col(dropoff_lat)?, col(dropoff_lon)?]),
    };

    let mut report = IngestReport::default();
    for (i, row) in csv.records().enumerate() {
        let line = i + 2;
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                report.rejects.push(RowReject {
                    line,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        match parse_row(&row, pick_t, drop_t, &loc, schema.time_format) {
            Ok(rec) => report.records.push(rec),
            Err(reason) => report.rejects.push(RowReject { line, reason }),
        }
    }

    let total = report.total_rows();
    let limit = (schema.max_reject_fraction * total as f64).floor() as usize;
    if report.rejects.len() > limit {
        return Err(Error::TooManyRejects {
            rejected: report.rejects.len(),
            total,
            limit,
        });
    }
    if !report.rejects.is_empty() {
        log::warn!("{} of {} trip rows rejected", report.rejects.len(), total);
    }
    Ok(report)
}

enum LocIdx {
    Node(usize, usize),
    Coord([usize; 4]),
}

fn parse_row(
    row: &csv::StringRecord,
    pick_t: usize,
    drop_t: usize,
    loc: &LocIdx,
    fmt: TimeFormat,
) -> std::result::Result<TripRecord, String> {
    let field = |i: usize| row.get(i).ok_or_else(|| format!("missing field {i}"));
    let pickup_time = parse_timestamp(field(pick_t)?, fmt)?;
    let dropoff_time = parse_timestamp(field(drop_t)?, fmt)?;
    if dropoff_time < pickup_time {
        return Err(format!(
            "dropoff_time {dropoff_time} precedes pickup_time {pickup_time}"
        ));
    }
    let (pickup, dropoff) = match *loc {
        LocIdx::Node(p, d) => {
            let p = field(p)?;
            let d = field(d)?;
            if p.is_empty() || d.is_empty() {
                return Err("empty node field".into());
            }
            (Site::Key(p.to_string()), Site::Key(d.to_string()))
        }
        LocIdx::Coord(idx) => {
            let mut v = [0.0; 4];
            for (slot, &i) in v.iter_mut().zip(idx.iter()) {
                let raw = field(i)?;
                *slot = raw
                    .parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| format!("bad coordinate '{raw}'"))?;
            }
            (
                Site::Coord { lat: v[0], lon: v[1] },
                Site::Coord { lat: v[2], lon: v[3] },
            )
        }
    };
    Ok(TripRecord {
        pickup_time,
        dropoff_time,
        pickup,
        dropoff,
    })
}

/// Parses a timestamp into UTC seconds.
///
/// ISO-8601 accepts RFC 3339 with offset, or a naive `YYYY-MM-DD[T ]HH:MM:SS`
/// interpreted as UTC.
pub fn parse_timestamp(raw: &str, fmt: TimeFormat) -> std::result::Result<i64, String> {
    match fmt {
        TimeFormat::EpochSeconds => raw
            .parse::<i64>()
            .or_else(|_| {
                raw.parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .map(|x| x.floor() as i64)
                    .ok_or(())
            })
            .map_err(|_| format!("bad epoch timestamp '{raw}'")),
        TimeFormat::Iso8601 => {
            if let Ok(dt) = DateTime::parse_from_rfc3339(raw) {
                return Ok(dt.timestamp());
            }
            for pat in [
                "%Y-%m-%dT%H:%M:%S",
                "%Y-%m-%d %H:%M:%S",
                "%Y-%m-%dT%H:%M",
                "%Y-%m-%d %H:%M",
            ] {
                if let Ok(dt) = NaiveDateTime::parse_from_str(raw, pat) {
                    return Ok(dt.and_utc().timestamp());
                }
            }
            Err(format!("bad ISO-8601 timestamp '{raw}'"))
        }
    }
}

/// Regular lat/lon grid; cell `(r, c)` is node `r * cols + c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub min_lat: f64,
    pub min_lon: f64,
    pub cell_size_deg: f64,
    pub rows: usize,
    pub cols: usize,
}

/// Resolves a [`Site`] to a node index.
#[derive(Debug, Clone, PartialEq)]
pub enum NodeAssignment {
    /// Keys are already integer node ids in `[0, node_count)`.
    Identity {
        node_count: usize,
    },
    KeyMap {
        map: HashMap<String, usize>,
        node_count: usize,
    },
    Grid(GridSpec),
}

impl NodeAssignment {
    pub fn node_count(&self) -> usize {
        match self {
            NodeAssignment::Identity { node_count } | NodeAssignment::KeyMap { node_count, .. } => *node_count,
            NodeAssignment::Grid(g) => g.rows * g.cols,
        }
    }

    pub fn resolve(&self, site: &Site) -> Option<usize> {
        match (self, site) {
            (NodeAssignment::Identity { node_count }, Site::Key(k)) => {
                k.parse::<usize>().ok().filter(|&n| n < *node_count)
            }
            (NodeAssignment::KeyMap { map, .. }, Site::Key(k)) => map.get(k).copied(),
            (NodeAssignment::Grid(g), Site::Coord { lat, lon }) => {
                let r = ((lat - g.min_lat) / g.cell_size_deg).floor();
                let c = ((lon - g.min_lon) / g.cell_size_deg).floor();
                if r < 0.0 || c < 0.0 || r >= g.rows as f64 || c >= g.cols as f64 {
                    None
                } else {
                    Some(r as usize * g.cols + c as usize)
                }
            }
            _ => None,
        }
    }

    /// Loads a node-assignment CSV.
    ///
    /// Two layouts are accepted, told apart by the header: `key,node` rows, or a
    /// single `min_lat,min_lon,cell_size_deg,rows,cols` grid row.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(file)
    }

    pub fn from_reader<R: Read>(reader: R) -> Result<Self> {
        let mut csv = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers: Vec<String> = csv
            .headers()
            .map_err(|e| Error::Schema(format!("node assignment header: {e}")))?
            .iter()
            .map(str::to_string)
            .collect();
        let bad = |e: &dyn std::fmt::Display| Error::Schema(format!("node assignment: {e}"));
        if headers.iter().any(|h| h == "cell_size_deg") {
            let mut rows = csv.deserialize::<GridSpec>();
            let g = rows
                .next()
                .ok_or_else(|| Error::Schema("grid spec row missing".into()))?
                .map_err(|e| bad(&e))?;
            if g.cell_size_deg.is_nan() || g.cell_size_deg <= 0.0 || g.rows == 0 || g.cols == 0 {
                return Err(Error::Schema(
                    "grid spec must have positive cell size and dimensions".into(),
                ));
            }
            Ok(NodeAssignment::Grid(g))
        } else if headers.len() >= 2 {
            let mut map = HashMap::new();
            for row in csv.records() {
                let row = row.map_err(|e| bad(&e))?;
                let key = row.get(0).unwrap_or_default().to_string();
                let node: usize = row.get(1).unwrap_or_default().parse().map_err(|e| bad(&e))?;
                map.insert(key, node);
            }
            let node_count = map.values().max().map_or(0, |m| m + 1);
            Ok(NodeAssignment::KeyMap { map, node_count })
        } else {
            Err(Error::Schema(
                "node assignment must be key,node pairs or a grid spec".into(),
            ))
        }
    }
}

/// Demand counts binned at a fixed interval, shape `(T, N, f)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DemandTensor {
    pub values: Array3<f64>,
    pub start_time: i64,
    pub interval_secs: i64,
}

impl DemandTensor {
    pub fn zeros(steps: usize, nodes: usize, start_time: i64, interval_secs: i64) -> Self {
        Self {
            values: Array3::zeros((steps, nodes, FEATURES)),
            start_time,
            interval_secs,
        }
    }

    pub fn time_steps(&self) -> usize {
        self.values.dim().0
    }

    pub fn node_count(&self) -> usize {
        self.values.dim().1
    }

    pub fn feature_count(&self) -> usize {
        self.values.dim().2
    }

    /// Contiguous sub-range of time steps; start time shifts accordingly.
    pub fn slice(&self, range: Range<usize>) -> Self {
        Self {
            start_time: self.start_time + range.start as i64 * self.interval_secs,
            values: self.values.slice(s![range, .., ..]).to_owned(),
            interval_secs: self.interval_secs,
        }
    }

    pub fn bins_per_week(&self) -> usize {
        (7 * 24 * 3600 / self.interval_secs.max(1)) as usize
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let (t, n, f) = self.values.dim();
        w.write_all(TENSOR_MAGIC)?;
        for v in [t as i64, n as i64, f as i64, self.start_time, self.interval_secs] {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in self.values.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        let fmt = |m: &str| Error::Format(format!("demand tensor: {m}"));
        r.read_exact(&mut magic).map_err(|_| fmt("truncated header"))?;
        if &magic != TENSOR_MAGIC {
            return Err(fmt("bad magic"));
        }
        let mut header = [0i64; 5];
        let mut buf = [0u8; 8];
        for h in header.iter_mut() {
            r.read_exact(&mut buf).map_err(|_| fmt("truncated header"))?;
            *h = i64::from_le_bytes(buf);
        }
        let [t, n, f, start_time, interval_secs] = header;
        if t < 0 || n < 0 || f < 0 || interval_secs <= 0 {
            return Err(fmt("invalid header values"));
        }
        let len = (t as usize)
            .checked_mul(n as usize)
            .and_then(|x| x.checked_mul(f as usize))
            .ok_or_else(|| fmt("dimensions overflow"))?;
        let mut values = Vec::with_capacity(len);
        for _ in 0..len {
            r.read_exact(&mut buf).map_err(|_| fmt("truncated body"))?;
            values.push(f64::from_le_bytes(buf));
        }
        let values =
            Array3::from_shape_vec((t as usize, n as usize, f as usize), values).map_err(|e| fmt(&e.to_string()))?;
        Ok(Self {
            values,
            start_time,
            interval_secs,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(BufWriter::new(file)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(file))
    }
}

/// Result of binning: the tensor plus tallies of records that were not counted.
#[derive(Debug, Clone)]
pub struct BinnedDemand {
    pub tensor: DemandTensor,
    /// Trip endpoints whose site did not resolve to a node.
    pub unassigned: usize,
    /// Trip endpoints that fell outside the binned span.
    pub out_of_span: usize,
}

/// Counts pick-ups and drop-offs per node and interval over `[start, end)`.
///
/// A trailing partial bin is dropped, so `T = floor((end - start) / interval)`.
pub fn bin_demand(
    records: &[TripRecord],
    interval_secs: i64,
    assignment: &NodeAssignment,
    span: (i64, i64),
) -> Result<BinnedDemand> {
    if interval_secs <= 0 {
        return Err(Error::Config(vec!["interval must be positive".into()]));
    }
    let (start, end) = span;
    let steps = if end > start {
        ((end - start) / interval_secs) as usize
    } else {
        0
    };
    let nodes = assignment.node_count();
    let mut tensor = DemandTensor::zeros(steps, nodes, start, interval_secs);
    if records.is_empty() {
        log::warn!("no trip records; demand tensor is all zero");
    }
    let covered_end = start + steps as i64 * interval_secs;
    let mut unassigned = 0;
    let mut out_of_span = 0;
    for rec in records {
        for (feature, time, site) in [
            (PICKUP, rec.pickup_time, &rec.pickup),
            (DROPOFF, rec.dropoff_time, &rec.dropoff),
        ] {
            let Some(node) = assignment.resolve(site) else {
                unassigned += 1;
                continue;
            };
            if time < start || time >= covered_end {
                out_of_span += 1;
                continue;
            }
            let bin = ((time - start) / interval_secs) as usize;
            tensor.values[[bin, node, feature]] += 1.0;
        }
    }
    if steps > 0 && out_of_span == 2 * records.len() && !records.is_empty() {
        log::warn!("span lies outside every record; demand tensor is all zero");
    }
    Ok(BinnedDemand {
        tensor,
        unassigned,
        out_of_span,
    })
}

/// Chronological train / validation / test partition of a demand tensor.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: DemandTensor,
    pub validation: DemandTensor,
    pub test: DemandTensor,
    pub train_range: Range<usize>,
    pub validation_range: Range<usize>,
    pub test_range: Range<usize>,
}

/// Holds out the last `val_weeks + test_weeks` weeks: validation first, test last.
///
/// Windows are later drawn within each segment, so no target reads another
/// segment's values. The training segment must hold at least one `p + q` window.
pub fn chronological_split(
    tensor: &DemandTensor,
    val_weeks: usize,
    test_weeks: usize,
    p: usize,
    q: usize,
) -> Result<DatasetSplit> {
    let week = tensor.bins_per_week();
    let val_len = val_weeks * week;
    let test_len = test_weeks * week;
    let required = val_len + test_len + p + q;
    let t = tensor.time_steps();
    if t < required {
        return Err(Error::InsufficientData { required, available: t });
    }
    let train_range = 0..t - val_len - test_len;
    let validation_range = train_range.end..t - test_len;
    let test_range = validation_range.end..t;
    Ok(DatasetSplit {
        train: tensor.slice(train_range.clone()),
        validation: tensor.slice(validation_range.clone()),
        test: tensor.slice(test_range.clone()),
        train_range,
        validation_range,
        test_range,
    })
}

/// Per-feature z-score statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalerStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScaleDirection {
    Forward,
    Inverse,
}

pub const STD_FLOOR: f64 = 1e-8;

impl ScalerStats {
    /// Fits mean and population standard deviation per feature over every `(t, n)` entry.
    pub fn fit(train: &DemandTensor) -> Result<Self> {
        if train.values.is_empty() {
            return Err(Error::EmptySplit("scaler fit on empty training tensor"));
        }
        let mut mean = Vec::with_capacity(train.feature_count());
        let mut std = Vec::with_capacity(train.feature_count());
        for lane in train.values.axis_iter(Axis(2)) {
            let n = lane.len() as f64;
            let m = lane.sum() / n;
            let var = lane.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
            mean.push(m);
            std.push(var.sqrt().max(STD_FLOOR));
        }
        Ok(Self { mean, std })
    }

    /// Scales the trailing feature axis in place.
    pub fn apply_in_place(&self, mut x: ArrayViewMut3<f64>, dir: ScaleDirection) {
        for (k, mut lane) in x.axis_iter_mut(Axis(2)).enumerate() {
            let (m, s) = (self.mean[k], self.std[k]);
            match dir {
                ScaleDirection::Forward => lane.mapv_inplace(|v| (v - m) / s),
                ScaleDirection::Inverse => lane.mapv_inplace(|v| v * s + m),
            }
        }
    }

    pub fn apply(&self, x: &Array3<f64>, dir: ScaleDirection) -> Array3<f64> {
        let mut out = x.clone();
        self.apply_in_place(out.view_mut(), dir);
        out
    }

    pub fn transform_tensor(&self, t: &DemandTensor) -> DemandTensor {
        DemandTensor {
            values: self.apply(&t.values, ScaleDirection::Forward),
            ..t.clone()
        }
    }
}

/// One supervised pair: `p` input steps followed by `q` target steps.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedSample {
    pub input: Array3<f64>,
    pub target: Array3<f64>,
    pub t0: usize,
}

/// Slides a `(p, q)` window over the tensor; empty when it is shorter than `p + q`.
pub fn make_windows(tensor: &DemandTensor, p: usize, q: usize, stride: usize) -> Vec<WindowedSample> {
    let t = tensor.time_steps();
    let stride = stride.max(1);
    if t < p + q {
        log::warn!("tensor of {t} steps is shorter than one window ({p}+{q})");
        return Vec::new();
    }
    (0..=t - p - q)
        .step_by(stride)
        .map(|t0| WindowedSample {
            input: tensor.values.slice(s![t0..t0 + p, .., ..]).to_owned(),
            target: tensor.values.slice(s![t0 + p..t0 + p + q, .., ..]).to_owned(),
            t0,
        })
        .collect()
}

/// Windows for all three segments plus the training-split scaler.
///
/// Training windows are scaled; validation and test windows stay in raw units.
#[derive(Debug, Clone)]
pub struct PreparedWindows {
    pub scaler: ScalerStats,
    pub train: Vec<WindowedSample>,
    pub validation: Vec<WindowedSample>,
    pub test: Vec<WindowedSample>,
}

impl PreparedWindows {
    pub fn from_split(split: &DatasetSplit, p: usize, q: usize, stride: usize) -> Result<Self> {
        let scaler = ScalerStats::fit(&split.train)?;
        let train = make_windows(&scaler.transform_tensor(&split.train), p, q, stride);
        if train.is_empty() {
            return Err(Error::InsufficientData {
                required: p + q,
                available: split.train.time_steps(),
            });
        }
        Ok(Self {
            train,
            validation: make_windows(&split.validation, p, q, stride),
            test: make_windows(&split.test, p, q, stride),
            scaler,
        })
    }
}
