use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{build_grid_graph, FrameSeries};
use crate::error::{Error, Result};
use crate::graph::{mean_aggregation_matrix, GraphSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// 4×4 grid, 3 features, shaped like the earthquake dataset.
    Grid16,
    /// 45 areas, 6 features, shaped like the motor-crash dataset.
    Area45,
}

impl Preset {
    pub fn default_rate(self) -> f64 {
        match self {
            Preset::Grid16 => 0.0925,
            Preset::Area45 => 0.0186,
        }
    }

    pub fn graph(self) -> GraphSpec {
        match self {
            Preset::Grid16 => build_grid_graph(-120.0, -116.0, 32.0, 36.0, 4, 4),
            Preset::Area45 => build_grid_graph(-74.26, -73.70, 40.49, 40.92, 9, 5),
        }
        .expect("preset bounds are valid")
    }

    pub fn feature_names(self) -> Vec<String> {
        let names: &[&str] = match self {
            Preset::Grid16 => &["magnitude", "depth", "significance"],
            Preset::Area45 => &[
                "persons_injured",
                "persons_killed",
                "pedestrians_injured",
                "cyclists_injured",
                "motorists_injured",
                "collisions",
            ],
        };
        names.iter().map(|s| s.to_string()).collect()
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Grid16 => "grid16",
            Preset::Area45 => "area45",
        })
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grid16" => Ok(Preset::Grid16),
            "area45" => Ok(Preset::Area45),
            other => Err(Error::Config(format!(
                "unknown preset {other:?} (expected grid16 or area45)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthOptions {
    pub preset: Preset,
    pub frames: usize,
    /// Fraction of frames carrying a spike; preset default when `None`.
    pub rate: Option<f64>,
    pub seed: u64,
}

impl SynthOptions {
    pub fn new(preset: Preset, frames: usize, seed: u64) -> Self {
        SynthOptions {
            preset,
            frames,
            rate: None,
            seed,
        }
    }
}

const START: i64 = 1_577_836_800;
const STEP: i64 = 3600;
const PERIOD: f64 = 24.0;

/// Deterministic series: per-node AR(1) noise on a daily cycle whose phase
/// and level drift smoothly across the graph, plus spatially correlated
/// spikes on exactly `round(rate · frames)` frames.
///
/// Values are raw (not normalized). A spike adds 0.2 to 0.3 to every
/// feature of one node and half that to its neighbours, far above the
/// AR noise but inside the daily swing.
pub fn synthesize(opts: &SynthOptions) -> Result<FrameSeries> {
    let rate = opts.rate.unwrap_or(opts.preset.default_rate());
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("extreme rate {rate} outside [0, 1)")));
    }
    if opts.frames < 2 {
        return Err(Error::Config("synthetic series needs at least 2 frames".into()));
    }
    let graph = opts.preset.graph();
    let names = opts.preset.feature_names();
    let (n, c, len) = (graph.n(), names.len(), opts.frames);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    let phase: Vec<f64> = smooth_field(&graph, &mut rng)
        .into_iter()
        .map(|v| v * std::f64::consts::FRAC_PI_2)
        .collect();
    let offset = smooth_field(&graph, &mut rng);
    let feature_level: Vec<f64> = (0..c).map(|_| rng.gen_range(0.3..0.5)).collect();
    let noise = Normal::new(0.0, 0.01).expect("valid sigma");
    let (phi, amplitude) = (0.8, 0.3);

    let mut frames = vec![0.0f32; len * n * c];
    let mut state = vec![0.0f64; n * c];
    for t in 0..len {
        for i in 0..n {
            let season = amplitude * (std::f64::consts::TAU * t as f64 / PERIOD + phase[i]).sin();
            for (f, base) in feature_level.iter().enumerate() {
                let k = i * c + f;
                state[k] = phi * state[k] + noise.sample(&mut rng);
                let level = base + 0.1 * offset[i];
                frames[t * n * c + k] = (level + season + state[k]) as f32;
            }
        }
    }

    let spikes = (rate * len as f64).round() as usize;
    let mut labels = vec![false; len];
    let mut chosen = sample(&mut rng, len, spikes).into_vec();
    chosen.sort_unstable();
    for t in chosen {
        labels[t] = true;
        let centre = rng.gen_range(0..n);
        let strength = rng.gen_range(0.2..0.3);
        for i in 0..n {
            let w = if i == centre {
                1.0
            } else if graph.weight(centre, i) > 0.0 {
                0.5
            } else {
                continue;
            };
            for f in 0..c {
                frames[(t * n + i) * c + f] += (strength * w) as f32;
            }
        }
    }

    let timestamps = (0..len as i64).map(|k| START + k * STEP).collect();
    FrameSeries::new(graph, names, frames, timestamps, labels, None)
}

/// Per-node values in [0, 1] that vary gradually across edges: uniform
/// noise averaged over neighbourhoods a few times, then rescaled.
fn smooth_field(graph: &GraphSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mix = mean_aggregation_matrix(graph);
    let mut v = DVector::from_fn(graph.n(), |_, _| rng.gen::<f64>());
    for _ in 0..4 {
        v = &mix * v;
    }
    let (lo, hi) = (v.min(), v.max());
    if hi - lo < 1e-12 {
        return vec![0.5; graph.n()];
    }
    v.iter().map(|x| (x - lo) / (hi - lo)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_have_expected_shapes() {
        let g = synthesize(&SynthOptions::new(Preset::Grid16, 50, 1)).unwrap();
        assert_eq!((g.nodes(), g.features()), (16, 3));
        let a = synthesize(&SynthOptions::new(Preset::Area45, 50, 1)).unwrap();
        assert_eq!((a.nodes(), a.features()), (45, 6));
    }

    #[test]
    fn same_seed_same_series() {
        let o = SynthOptions::new(Preset::Grid16, 300, 7);
        assert_eq!(synthesize(&o).unwrap(), synthesize(&o).unwrap());
        let other = SynthOptions { seed: 8, ..o.clone() };
        assert_ne!(synthesize(&o).unwrap(), synthesize(&other).unwrap());
    }

    #[test]
    fn spike_count_matches_rate() {
        let o = SynthOptions {
            rate: Some(0.05),
            ..SynthOptions::new(Preset::Grid16, 1000, 3)
        };
        assert_eq!(synthesize(&o).unwrap().extreme_count(), 50);
        let quiet = SynthOptions { rate: Some(0.0), ..o };
        assert_eq!(synthesize(&quiet).unwrap().extreme_count(), 0);
    }

    #[test]
    fn unknown_preset() {
        assert!("grid40".parse::<Preset>().is_err());
        assert_eq!("area45".parse::<Preset>().unwrap(), Preset::Area45);
    }
}
