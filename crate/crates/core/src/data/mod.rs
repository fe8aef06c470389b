//! Graph-aligned frame series: construction, normalization, chronological
//! splitting, CSV ingestion, synthetic presets and the binary container.

mod container;
mod graphs;
mod ingest;
mod synth;

use std::ops::Range;

use serde::{Deserialize, Serialize};

pub use container::{load_series, read_series, save_series, write_series};
pub use graphs::{build_area_graph, build_grid_graph, parse_edge_list};
pub use ingest::{
    ingest_events, Aggregation, Comparator, ExtremeRule, FeatureSpec, IngestOutcome, IngestSpec, Location,
};
pub use synth::{synthesize, Preset, SynthOptions};

use crate::error::{Error, Result};
use crate::graph::GraphSpec;

/// Per-feature min/max used for 0-1 scaling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl Normalization {
    /// Maps `v` of feature `c` into [0, 1]; the flag reports clamping.
    fn scale(&self, c: usize, v: f64) -> (f32, bool) {
        let span = self.max[c] - self.min[c];
        let s = if span > 0.0 { (v - self.min[c]) / span } else { 0.0 };
        if s < 0.0 {
            (0.0, true)
        } else if s > 1.0 {
            (1.0, true)
        } else {
            (s as f32, false)
        }
    }
}

/// Time-ordered `N × C` frames over a fixed graph.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSeries {
    graph: GraphSpec,
    features: usize,
    frames: Vec<f32>,
    timestamps: Vec<i64>,
    labels: Vec<bool>,
    feature_names: Vec<String>,
    normalization: Option<Normalization>,
}

impl FrameSeries {
    /// `frames` is row-major `[len, N, C]`.
    pub fn new(
        graph: GraphSpec,
        feature_names: Vec<String>,
        frames: Vec<f32>,
        timestamps: Vec<i64>,
        labels: Vec<bool>,
        normalization: Option<Normalization>,
    ) -> Result<Self> {
        let c = feature_names.len();
        let len = timestamps.len();
        if c == 0 {
            return Err(Error::Data("series needs at least one feature".into()));
        }
        if labels.len() != len || frames.len() != len * graph.n() * c {
            return Err(Error::Data(format!(
                "{len} timestamps, {} labels and {} values do not describe {len} frames of {}x{c}",
                labels.len(),
                frames.len(),
                graph.n()
            )));
        }
        if let Some(w) = timestamps.windows(2).next().map(|w| w[1] - w[0]) {
            if w <= 0 || timestamps.windows(2).any(|p| p[1] - p[0] != w) {
                return Err(Error::Data(
                    "timestamps must be strictly increasing with a uniform step".into(),
                ));
            }
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("frame values must be finite".into()));
        }
        if let Some(n) = &normalization {
            if n.min.len() != c || n.max.len() != c {
                return Err(Error::Data("normalization stats do not match feature count".into()));
            }
            if frames.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::Data("normalized values must lie in [0, 1]".into()));
            }
        }
        Ok(FrameSeries {
            graph,
            features: c,
            frames,
            timestamps,
            labels,
            feature_names,
            normalization,
        })
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn graph(&self) -> &GraphSpec {
        &self.graph
    }

    pub fn nodes(&self) -> usize {
        self.graph.n()
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn frame_size(&self) -> usize {
        self.nodes() * self.features
    }

    pub fn frames(&self) -> &[f32] {
        &self.frames
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        let s = self.frame_size();
        &self.frames[i * s..(i + 1) * s]
    }

    /// Contiguous frames `start..start + count`, flattened.
    pub fn frame_range(&self, start: usize, count: usize) -> &[f32] {
        let s = self.frame_size();
        &self.frames[start * s..(start + count) * s]
    }

    pub fn timestamps(&self) -> &[i64] {
        &self.timestamps
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn normalization(&self) -> Option<&Normalization> {
        self.normalization.as_ref()
    }

    pub fn extreme_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    pub fn slice(&self, range: Range<usize>) -> Result<Self> {
        if range.start >= range.end || range.end > self.len() {
            return Err(Error::Data(format!(
                "range {range:?} outside series of {} frames",
                self.len()
            )));
        }
        FrameSeries::new(
            self.graph.clone(),
            self.feature_names.clone(),
            self.frame_range(range.start, range.len()).to_vec(),
            self.timestamps[range.clone()].to_vec(),
            self.labels[range].to_vec(),
            self.normalization.clone(),
        )
    }

    /// Per-feature min/max over frames `0..prefix`.
    pub fn fit_normalization(&self, prefix: usize) -> Normalization {
        let c = self.features;
        let mut min = vec![f64::INFINITY; c];
        let mut max = vec![f64::NEG_INFINITY; c];
        for (k, &v) in self.frame_range(0, prefix.min(self.len())).iter().enumerate() {
            let f = k % c;
            min[f] = min[f].min(v as f64);
            max[f] = max[f].max(v as f64);
        }
        for f in 0..c {
            if !min[f].is_finite() {
                min[f] = 0.0;
                max[f] = 0.0;
            }
        }
        Normalization { min, max }
    }

    /// Scales raw values with `stats`, clamping into [0, 1]. Returns the
    /// normalized series and how many values were clamped.
    pub fn normalized(&self, stats: &Normalization) -> Result<(Self, usize)> {
        if self.normalization.is_some() {
            return Err(Error::Data("series is already normalized".into()));
        }
        let c = self.features;
        let mut clamped = 0;
        let frames = self
            .frames
            .iter()
            .enumerate()
            .map(|(k, &v)| {
                let (s, hit) = stats.scale(k % c, v as f64);
                clamped += hit as usize;
                s
            })
            .collect();
        let series = FrameSeries::new(
            self.graph.clone(),
            self.feature_names.clone(),
            frames,
            self.timestamps.clone(),
            self.labels.clone(),
            Some(stats.clone()),
        )?;
        Ok((series, clamped))
    }
}

/// Chronological train/test split.
#[derive(Clone, Debug)]
pub struct Split {
    pub train: FrameSeries,
    pub test: FrameSeries,
    /// Test values clamped into [0, 1] when normalization was fitted here.
    pub clamped: usize,
}

/// Number of training frames for `fraction` of `len`.
pub fn train_len(len: usize, fraction: f64) -> usize {
    (fraction * len as f64 + 1e-9).floor() as usize
}

/// Splits chronologically. A raw series is normalized with statistics from
/// the training side only; an already normalized series keeps its scaling.
pub fn split(series: &FrameSeries, train_fraction: f64) -> Result<Split> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!("train fraction {train_fraction} outside (0, 1)")));
    }
    let n = train_len(series.len(), train_fraction);
    if n == 0 || n >= series.len() {
        return Err(Error::Data(format!(
            "fraction {train_fraction} of {} frames leaves one side empty",
            series.len()
        )));
    }
    let (full, clamped) = match series.normalization() {
        Some(_) => (series.clone(), 0),
        None => series.normalized(&series.fit_normalization(n))?,
    };
    Ok(Split {
        train: full.slice(0..n)?,
        test: full.slice(n..full.len())?,
        clamped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(n: usize) -> GraphSpec {
        GraphSpec::from_edges(n, &(1..n).map(|i| (i - 1, i)).collect::<Vec<_>>()).unwrap()
    }

    fn ramp(len: usize) -> FrameSeries {
        let frames = (0..len * 2).map(|v| v as f32).collect();
        FrameSeries::new(
            line(2),
            vec!["x".into()],
            frames,
            (0..len as i64).map(|t| t * 60).collect(),
            vec![false; len],
            None,
        )
        .unwrap()
    }

    #[test]
    fn invariants_are_checked() {
        let g = line(2);
        let names = vec!["x".to_string()];
        assert!(FrameSeries::new(g.clone(), names.clone(), vec![0.0; 4], vec![0, 1], vec![false], None).is_err());
        assert!(FrameSeries::new(
            g.clone(),
            names.clone(),
            vec![0.0; 6],
            vec![0, 1, 3],
            vec![false; 3],
            None
        )
        .is_err());
        assert!(FrameSeries::new(g.clone(), names.clone(), vec![0.0; 4], vec![1, 0], vec![false; 2], None).is_err());
        let stats = Normalization {
            min: vec![0.0],
            max: vec![1.0],
        };
        assert!(FrameSeries::new(g, names, vec![2.0; 4], vec![0, 1], vec![false; 2], Some(stats)).is_err());
    }

    #[test]
    fn normalization_maps_extremes_to_unit_interval() {
        let s = ramp(5);
        let stats = s.fit_normalization(5);
        assert_eq!(stats.min, vec![0.0]);
        assert_eq!(stats.max, vec![9.0]);
        let (n, clamped) = s.normalized(&stats).unwrap();
        assert_eq!(clamped, 0);
        assert_eq!(n.frames()[0], 0.0);
        assert_eq!(n.frames()[9], 1.0);
    }

    #[test]
    fn table_sized_split() {
        assert_eq!(train_len(25_515, 5.0 / 6.0), 21_262);
        let s = ramp(25_515 / 100);
        let sp = split(&s, 5.0 / 6.0).unwrap();
        assert_eq!(sp.train.len() + sp.test.len(), s.len());
    }

    #[test]
    fn split_uses_train_statistics_and_clamps_test() {
        let s = ramp(6);
        let sp = split(&s, 0.5).unwrap();
        assert_eq!(sp.train.normalization().unwrap().max, vec![5.0]);
        // every test value exceeds the train max
        assert_eq!(sp.clamped, 6);
        assert!(sp.test.frames().iter().all(|&v| v == 1.0));
        assert_eq!(sp.train.timestamps()[2] + 60, sp.test.timestamps()[0]);
    }

    #[test]
    fn bad_fractions() {
        let s = ramp(4);
        assert!(split(&s, 1.0).is_err());
        assert!(split(&s, 0.0).is_err());
        assert!(split(&s, 0.1).is_err());
    }
}
