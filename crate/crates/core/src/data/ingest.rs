use std::collections::HashMap;
use std::io::Read;

use chrono::{DateTime, NaiveDateTime};
use serde::{Deserialize, Serialize};

use super::{train_len, FrameSeries};
use crate::error::{Error, Result};
use crate::graph::GraphSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Sum,
    Max,
    Count,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Comparator {
    #[serde(rename = ">=")]
    Ge,
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = "<")]
    Lt,
}

impl Comparator {
    fn holds(self, v: f64, threshold: f64) -> bool {
        match self {
            Comparator::Ge => v >= threshold,
            Comparator::Gt => v > threshold,
            Comparator::Le => v <= threshold,
            Comparator::Lt => v < threshold,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    /// CSV column; for `count` it only names the feature.
    pub column: String,
    pub aggregation: Aggregation,
}

/// A frame is extreme when any node's aggregated `feature` satisfies the
/// comparison. Evaluated on raw values, before normalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtremeRule {
    pub feature: String,
    pub comparator: Comparator,
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum Location {
    /// Events located by `longitude`/`latitude` columns on a grid graph
    /// built with [`super::build_grid_graph`] over the same bounds.
    Grid {
        lon_min: f64,
        lon_max: f64,
        lat_min: f64,
        lat_max: f64,
        rows: usize,
        cols: usize,
    },
    /// Events carry an area id matching the graph's node ids.
    Area {
        #[serde(default = "default_area_column")]
        column: String,
    },
}

fn default_area_column() -> String {
    "area_id".into()
}

fn default_timestamp_column() -> String {
    "timestamp".into()
}

fn default_train_fraction() -> f64 {
    5.0 / 6.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IngestSpec {
    pub bin_seconds: i64,
    #[serde(default = "default_timestamp_column")]
    pub timestamp_column: String,
    pub location: Location,
    pub features: Vec<FeatureSpec>,
    pub extreme: ExtremeRule,
    /// Leading fraction of frames whose min/max drive 0-1 scaling.
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
}

impl IngestSpec {
    pub fn validate(&self) -> Result<()> {
        if self.bin_seconds <= 0 {
            return Err(Error::Config(format!(
                "bin width {} must be positive",
                self.bin_seconds
            )));
        }
        if self.features.is_empty() {
            return Err(Error::Config("ingest needs at least one feature".into()));
        }
        if !self.features.iter().any(|f| f.column == self.extreme.feature) {
            return Err(Error::Config(format!(
                "extreme rule references unknown feature {:?}",
                self.extreme.feature
            )));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "train fraction {} outside (0, 1]",
                self.train_fraction
            )));
        }
        if let Location::Grid {
            rows,
            cols,
            lon_min,
            lon_max,
            lat_min,
            lat_max,
        } = self.location
        {
            if rows == 0 || cols == 0 || lon_min >= lon_max || lat_min >= lat_max {
                return Err(Error::Config("degenerate grid location".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct IngestOutcome {
    pub series: FrameSeries,
    pub skipped_unparseable: usize,
    pub skipped_outside: usize,
    /// Values past the training prefix clamped into [0, 1].
    pub clamped: usize,
}

pub(crate) fn parse_timestamp(s: &str) -> Option<i64> {
    let s = s.trim();
    if let Ok(v) = s.parse::<i64>() {
        return Some(v);
    }
    if let Ok(v) = s.parse::<f64>() {
        return v.is_finite().then(|| v.floor() as i64);
    }
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Some(t.timestamp());
    }
    [
        "%Y-%m-%dT%H:%M:%S%.f",
        "%Y-%m-%d %H:%M:%S%.f",
        "%Y-%m-%dT%H:%M",
        "%Y-%m-%d %H:%M",
    ]
    .iter()
    .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
    .map(|t| t.and_utc().timestamp())
}

struct Event {
    bin: i64,
    node: usize,
    values: Vec<f64>,
}

fn column(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| Error::Data(format!("CSV has no column {name:?}")))
}

/// Buckets events into `(time bin, node)` cells, aggregates features, labels
/// frames with the extreme rule and 0-1 normalizes with training-prefix
/// statistics. The result does not depend on row order.
pub fn ingest_events<R: Read>(reader: R, spec: &IngestSpec, graph: &GraphSpec) -> Result<IngestOutcome> {
    spec.validate()?;
    let mut csv = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(reader);
    let headers = csv
        .headers()
        .map_err(|e| Error::Data(format!("CSV header: {e}")))?
        .clone();
    let ts_col = column(&headers, &spec.timestamp_column)?;
    let value_cols = spec
        .features
        .iter()
        .map(|f| match f.aggregation {
            Aggregation::Count => Ok(None),
            _ => column(&headers, &f.column).map(Some),
        })
        .collect::<Result<Vec<_>>>()?;

    enum Locator {
        Grid { lon: usize, lat: usize },
        Area { col: usize, index: HashMap<String, usize> },
    }
    let locator = match &spec.location {
        Location::Grid { rows, cols, .. } => {
            if graph.n() != rows * cols {
                return Err(Error::Config(format!(
                    "grid {rows}x{cols} does not match graph of {} nodes",
                    graph.n()
                )));
            }
            Locator::Grid {
                lon: column(&headers, "longitude")?,
                lat: column(&headers, "latitude")?,
            }
        }
        Location::Area { column: name } => Locator::Area {
            col: column(&headers, name)?,
            index: graph
                .node_ids()
                .iter()
                .enumerate()
                .map(|(i, s)| (s.clone(), i))
                .collect(),
        },
    };

    let mut events = Vec::new();
    let (mut unparseable, mut outside) = (0, 0);
    for rec in csv.records() {
        let Ok(rec) = rec else {
            unparseable += 1;
            continue;
        };
        let field = |i: usize| rec.get(i).map(str::trim);
        let Some(ts) = field(ts_col).and_then(parse_timestamp) else {
            unparseable += 1;
            continue;
        };
        let values: Option<Vec<f64>> = value_cols
            .iter()
            .map(|c| match c {
                None => Some(1.0),
                Some(i) => field(*i).and_then(|s| s.parse::<f64>().ok()).filter(|v| v.is_finite()),
            })
            .collect();
        let Some(values) = values else {
            unparseable += 1;
            continue;
        };
        let node = match &locator {
            Locator::Grid { lon, lat } => {
                let (Some(x), Some(y)) = (
                    field(*lon).and_then(|s| s.parse::<f64>().ok()),
                    field(*lat).and_then(|s| s.parse::<f64>().ok()),
                ) else {
                    unparseable += 1;
                    continue;
                };
                let Location::Grid {
                    lon_min,
                    lon_max,
                    lat_min,
                    lat_max,
                    rows,
                    cols,
                } = spec.location
                else {
                    unreachable!()
                };
                cell(x, lon_min, lon_max, cols)
                    .zip(cell(y, lat_min, lat_max, rows))
                    .map(|(c, r)| r * cols + c)
            }
            Locator::Area { col, index } => field(*col).and_then(|id| index.get(id).copied()),
        };
        let Some(node) = node else {
            outside += 1;
            continue;
        };
        events.push(Event {
            bin: ts.div_euclid(spec.bin_seconds),
            node,
            values,
        });
    }
    if events.is_empty() {
        return Err(Error::Data("no usable events in CSV".into()));
    }
    // Canonical order makes floating-point aggregation independent of row order.
    events.sort_by(|a, b| {
        (a.bin, a.node).cmp(&(b.bin, b.node)).then_with(|| {
            a.values
                .iter()
                .zip(&b.values)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    });

    let first = events[0].bin;
    let last = events[events.len() - 1].bin;
    let len = usize::try_from(last - first + 1).map_err(|_| Error::Data("time range overflow".into()))?;
    let (n, c) = (graph.n(), spec.features.len());
    let mut raw = vec![0.0f64; len * n * c];
    let mut seen = vec![false; len * n];
    for e in &events {
        let cell = (e.bin - first) as usize * n + e.node;
        for (f, fs) in spec.features.iter().enumerate() {
            let slot = &mut raw[cell * c + f];
            *slot = match fs.aggregation {
                Aggregation::Sum | Aggregation::Count => *slot + e.values[f],
                Aggregation::Max if seen[cell] => slot.max(e.values[f]),
                Aggregation::Max => e.values[f],
            };
        }
        seen[cell] = true;
    }

    let rule_f = spec
        .features
        .iter()
        .position(|f| f.column == spec.extreme.feature)
        .expect("validated");
    let labels = (0..len)
        .map(|t| {
            (0..n).any(|i| {
                let k = t * n + i;
                seen[k]
                    && spec
                        .extreme
                        .comparator
                        .holds(raw[k * c + rule_f], spec.extreme.threshold)
            })
        })
        .collect();
    let timestamps = (0..len as i64).map(|k| (first + k) * spec.bin_seconds).collect();
    let names = spec.features.iter().map(|f| f.column.clone()).collect();
    let series = FrameSeries::new(
        graph.clone(),
        names,
        raw.iter().map(|&v| v as f32).collect(),
        timestamps,
        labels,
        None,
    )?;
    let prefix = train_len(len, spec.train_fraction).max(1);
    let (series, clamped) = series.normalized(&series.fit_normalization(prefix))?;
    Ok(IngestOutcome {
        series,
        skipped_unparseable: unparseable,
        skipped_outside: outside,
        clamped,
    })
}

/// Index of the band containing `v`; the upper bound belongs to the last band.
fn cell(v: f64, lo: f64, hi: f64, bands: usize) -> Option<usize> {
    if !(v >= lo && v <= hi) {
        return None;
    }
    let k = ((v - lo) / (hi - lo) * bands as f64).floor() as usize;
    Some(k.min(bands - 1))
}
