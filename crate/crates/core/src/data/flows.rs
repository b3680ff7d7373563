//! Interval-aggregated flow matrices and their CSV form.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::records::{parse_timestamp, GctPairing, GctRecord};
use crate::error::{Error, Result};
use crate::topology::RoadTopology;

/// Default aggregation interval: 15 minutes.
pub const INTERVAL_SECS: u64 = 900;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowKind {
    /// Per-segment record counts (undirected).
    Gct,
    /// Per-route pairing counts (directional).
    Mobility,
}

impl FlowKind {
    pub fn entity_count(self, topology: &RoadTopology) -> usize {
        match self {
            FlowKind::Gct => topology.num_segments(),
            FlowKind::Mobility => topology.num_routes(),
        }
    }

    pub fn labels(self, topology: &RoadTopology) -> Vec<String> {
        match self {
            FlowKind::Gct => topology.segments().iter().map(|s| s.label.clone()).collect(),
            FlowKind::Mobility => topology.routes().iter().map(|r| r.label()).collect(),
        }
    }
}

/// Counts per entity per interval, stored entity-major (`values[e * T + t]`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowSeries {
    pub kind: FlowKind,
    pub interval: u64,
    pub start_timestamp: i64,
    entities: usize,
    steps: usize,
    values: Vec<f64>,
}

impl FlowSeries {
    pub fn new(kind: FlowKind, interval: u64, start_timestamp: i64, entities: usize, steps: usize, values: Vec<f64>) -> Result<Self> {
        if interval == 0 {
            return Err(Error::InvalidInput("interval must be positive".into()));
        }
        if steps == 0 {
            return Err(Error::InvalidInput("a flow series needs at least one step".into()));
        }
        if values.len() != entities * steps {
            return Err(Error::shape("flow series", entities * steps, values.len()));
        }
        if let Some(v) = values.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidInput(format!("flow values must be finite and non-negative, found {v}")));
        }
        Ok(Self {
            kind,
            interval,
            start_timestamp,
            entities,
            steps,
            values,
        })
    }

    pub fn zeros(kind: FlowKind, interval: u64, start_timestamp: i64, entities: usize, steps: usize) -> Self {
        Self {
            kind,
            interval,
            start_timestamp,
            entities,
            steps,
            values: vec![0.0; entities * steps],
        }
    }

    pub fn entities(&self) -> usize {
        self.entities
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, entity: usize, step: usize) -> f64 {
        self.values[entity * self.steps + step]
    }

    pub(crate) fn add(&mut self, entity: usize, step: usize, amount: f64) {
        self.values[entity * self.steps + step] += amount;
    }

    pub fn entity(&self, entity: usize) -> &[f64] {
        &self.values[entity * self.steps..(entity + 1) * self.steps]
    }

    pub fn timestamp(&self, step: usize) -> i64 {
        self.start_timestamp + (step as u64 * self.interval) as i64
    }

    pub fn end_timestamp(&self) -> i64 {
        self.timestamp(self.steps)
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.total() / self.values.len().max(1) as f64
    }

    /// Check that entity counts agree with the topology.
    pub fn check_against(&self, topology: &RoadTopology) -> Result<()> {
        let want = self.kind.entity_count(topology);
        if want != self.entities {
            return Err(Error::shape("flow series", format!("{want} {:?} entities", self.kind), self.entities));
        }
        Ok(())
    }
}

/// Something countable in a flow series.
pub trait FlowItem {
    fn entity(&self) -> usize;
    fn time(&self) -> i64;
}

impl FlowItem for GctRecord {
    fn entity(&self) -> usize {
        self.segment
    }
    fn time(&self) -> i64 {
        self.timestamp
    }
}

/// A pairing is counted in the interval of its start time.
impl FlowItem for GctPairing {
    fn entity(&self) -> usize {
        self.route
    }
    fn time(&self) -> i64 {
        self.start_time
    }
}

/// Count items per entity per interval over `[start, end)`.
pub fn aggregate_flows<I: FlowItem>(
    items: &[I],
    topology: &RoadTopology,
    interval: u64,
    start: i64,
    end: i64,
    kind: FlowKind,
) -> Result<FlowSeries> {
    if interval == 0 {
        return Err(Error::InvalidInput("interval must be positive".into()));
    }
    if start >= end || (end - start) % interval as i64 != 0 {
        return Err(Error::InvalidInput(format!(
            "[{start}, {end}) must be non-empty and a whole number of {interval}s intervals"
        )));
    }
    let entities = kind.entity_count(topology);
    let steps = ((end - start) / interval as i64) as usize;
    let mut series = FlowSeries::zeros(kind, interval, start, entities, steps);
    for item in items {
        let e = item.entity();
        if e >= entities {
            return Err(Error::InvalidInput(format!("item references {kind:?} entity {e} of {entities}")));
        }
        let t = item.time();
        if t < start || t >= end {
            continue;
        }
        let step = ((t - start) / interval as i64) as usize;
        series.add(e, step, 1.0);
    }
    Ok(series)
}

pub fn write_flows_csv<W: Write>(series: &FlowSeries, labels: &[String], writer: W) -> Result<()> {
    if labels.len() != series.entities() {
        return Err(Error::shape("flows csv", series.entities(), labels.len()));
    }
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["timestamp".to_string()];
    header.extend(labels.iter().cloned());
    w.write_record(&header)?;
    for t in 0..series.steps() {
        let mut row = vec![series.timestamp(t).to_string()];
        row.extend((0..series.entities()).map(|e| format_value(series.get(e, t))));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("<flows csv>", e))?;
    Ok(())
}

fn format_value(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

/// Read a flows CSV whose columns are matched by label to `labels` order.
/// The interval is inferred from the first two rows (or `default_interval`
/// for a single-row file).
pub fn read_flows_csv<R: Read>(reader: R, kind: FlowKind, labels: &[String], default_interval: u64) -> Result<FlowSeries> {
    let mut rdr = csv::Reader::from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.get(0) != Some("timestamp") {
        return Err(Error::InvalidInput("flows csv must start with a `timestamp` column".into()));
    }
    let mut column_of = Vec::with_capacity(labels.len());
    for label in labels {
        let col = header
            .iter()
            .position(|h| h == label)
            .ok_or_else(|| Error::InvalidInput(format!("flows csv lacks column `{label}`")))?;
        column_of.push(col);
    }
    let mut stamps = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        stamps.push(parse_timestamp(&rec[0])?);
        let row = column_of
            .iter()
            .map(|&c| {
                rec[c]
                    .trim()
                    .parse::<f64>()
                    .map_err(|_| Error::InvalidInput(format!("non-numeric flow value `{}`", &rec[c])))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::InvalidInput("flows csv has no rows".into()));
    }
    let interval = if stamps.len() >= 2 {
        let d = stamps[1] - stamps[0];
        if d <= 0 {
            return Err(Error::InvalidInput("flow timestamps must increase".into()));
        }
        d as u64
    } else {
        default_interval
    };
    for (k, w) in stamps.windows(2).enumerate() {
        if w[1] - w[0] != interval as i64 {
            return Err(Error::InvalidInput(format!("irregular timestamp spacing at row {}", k + 1)));
        }
    }
    let steps = rows.len();
    let entities = labels.len();
    let mut values = vec![0.0; entities * steps];
    for (t, row) in rows.iter().enumerate() {
        for (e, v) in row.iter().enumerate() {
            values[e * steps + t] = *v;
        }
    }
    FlowSeries::new(kind, interval, stamps[0], entities, steps, values)
}

pub fn save_flows(series: &FlowSeries, topology: &RoadTopology, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    series.check_against(topology)?;
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_flows_csv(series, &series.kind.labels(topology), std::io::BufWriter::new(f))
}

pub fn load_flows(path: impl AsRef<Path>, kind: FlowKind, topology: &RoadTopology) -> Result<FlowSeries> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_flows_csv(std::io::BufReader::new(f), kind, &kind.labels(topology), INTERVAL_SECS)
}
