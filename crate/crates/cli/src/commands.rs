use std::fs::{self, File};
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};

use gtrans_core::data::{
    build_area_graph, build_grid_graph, ingest_events, load_series, parse_edge_list, split, synthesize, write_series,
    IngestSpec, Location, Preset, Split, SynthOptions,
};
use gtrans_core::metrics::{confusion, export_latent as write_latent, merge_reports, parse_report, write_report};
use gtrans_core::models::{load_checkpoint, write_checkpoint};
use gtrans_core::training::train_with_progress;
use gtrans_core::{DetectionArtifacts, Error, Forecaster, FrameSeries, ReportRow, Result, ThresholdMethod};
use serde::Serialize;

use crate::config::{ConfigArgs, RunConfig};
use crate::output::{sidecar, OutDir, Outputs};

/// Stdout that may already be closed, e.g. piped into `head`.
macro_rules! say {
    ($($arg:tt)*) => {{
        let _ = writeln!(io::stdout().lock(), $($arg)*);
    }};
}

fn report_written(paths: &[PathBuf]) {
    for p in paths {
        say!("wrote {}", p.display());
    }
}

fn toml_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    toml::to_string(value).expect("record serializes").into_bytes()
}

fn parse_grid(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("grid {s:?} is not ROWSxCOLS"));
    let (r, c) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    let rows = r.trim().parse().map_err(|_| bad())?;
    let cols = c.trim().parse().map_err(|_| bad())?;
    Ok((rows, cols))
}

#[derive(Serialize)]
struct IngestRecord<'a> {
    events: &'a Path,
    graph: Option<&'a Path>,
    skipped_unparseable: usize,
    skipped_outside: usize,
    clamped: usize,
    spec: &'a IngestSpec,
}

pub fn ingest(
    out: &OutDir,
    events: &Path,
    graph_path: Option<&Path>,
    grid: Option<&str>,
    spec_path: &Path,
    path: Option<PathBuf>,
) -> Result<()> {
    let text = fs::read_to_string(spec_path)
        .map_err(|e| Error::Config(format!("cannot read spec {}: {e}", spec_path.display())))?;
    let mut spec: IngestSpec =
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", spec_path.display())))?;
    if let Some(g) = grid {
        let (r, c) = parse_grid(g)?;
        match &mut spec.location {
            Location::Grid { rows, cols, .. } => (*rows, *cols) = (r, c),
            Location::Area { .. } => return Err(Error::Config("--grid needs a spec with grid location".into())),
        }
    }
    spec.validate()?;
    let graph = match (&spec.location, graph_path) {
        (Location::Grid { .. }, Some(_)) => return Err(Error::Config("--graph applies to area locations only".into())),
        (
            &Location::Grid {
                lon_min,
                lon_max,
                lat_min,
                lat_max,
                rows,
                cols,
            },
            None,
        ) => build_grid_graph(lon_min, lon_max, lat_min, lat_max, rows, cols)?,
        (Location::Area { .. }, Some(p)) => build_area_graph(None, &parse_edge_list(&fs::read_to_string(p)?)?)?,
        (Location::Area { .. }, None) => return Err(Error::Config("area location needs --graph".into())),
    };
    let outcome = ingest_events(BufReader::new(File::open(events)?), &spec, &graph)?;
    say!(
        "ingested {} frames ({} extreme); skipped {} unparseable and {} out-of-area rows; clamped {} values",
        outcome.series.len(),
        outcome.series.extreme_count(),
        outcome.skipped_unparseable,
        outcome.skipped_outside,
        outcome.clamped
    );

    let target = out.resolve(None, path, "dataset.gtds");
    let mut bytes = Vec::new();
    write_series(&outcome.series, &mut bytes)?;
    let record = IngestRecord {
        events,
        graph: graph_path,
        skipped_unparseable: outcome.skipped_unparseable,
        skipped_outside: outcome.skipped_outside,
        clamped: outcome.clamped,
        spec: &spec,
    };
    let mut files = Outputs::new();
    files.add(sidecar(&target, "config.toml"), toml_bytes(&record));
    files.add(target, bytes);
    report_written(&files.commit()?);
    Ok(())
}

#[derive(Serialize)]
struct SynthRecord {
    preset: String,
    frames: usize,
    rate: f64,
    seed: u64,
}

pub fn synth(
    out: &OutDir,
    preset: &str,
    frames: usize,
    rate: Option<f64>,
    seed: u64,
    path: Option<PathBuf>,
) -> Result<()> {
    let preset: Preset = preset.parse()?;
    let opts = SynthOptions {
        rate,
        ..SynthOptions::new(preset, frames, seed)
    };
    let series = synthesize(&opts)?;
    let target = out.resolve(None, path, &format!("{preset}.gtds"));
    let mut bytes = Vec::new();
    write_series(&series, &mut bytes)?;
    let record = SynthRecord {
        preset: preset.to_string(),
        frames,
        rate: rate.unwrap_or(preset.default_rate()),
        seed,
    };
    say!("{} frames, {} extreme", series.len(), series.extreme_count());
    let mut files = Outputs::new();
    files.add(sidecar(&target, "config.toml"), toml_bytes(&record));
    files.add(target, bytes);
    report_written(&files.commit()?);
    Ok(())
}

fn data_path(flag: Option<PathBuf>, cfg: &mut RunConfig) -> Result<PathBuf> {
    if let Some(p) = flag {
        cfg.data = Some(p);
    }
    cfg.data
        .clone()
        .ok_or_else(|| Error::Config("no dataset given (--data or `data` in the config)".into()))
}

fn load_split(path: &Path, fraction: f64) -> Result<(FrameSeries, Split)> {
    let series = load_series(path)?;
    let parts = split(&series, fraction)?;
    Ok((series, parts))
}

pub fn train(out: &OutDir, data: Option<PathBuf>, model_out: Option<PathBuf>, args: &ConfigArgs) -> Result<()> {
    let mut cfg = args.resolve()?;
    let data = data_path(data, &mut cfg)?;
    let (series, parts) = load_split(&data, cfg.split)?;
    let model_cfg = cfg.model_config(series.nodes(), series.features())?;
    cfg.nodes = Some(model_cfg.nodes);
    cfg.features = Some(model_cfg.features);
    let target = out.resolve(cfg.out_dir.as_deref(), model_out, &format!("{}.gtck", cfg.kind));

    let mut model = Forecaster::<f32>::new(model_cfg)?;
    let report = train_with_progress(&mut model, &parts.train, |e| {
        eprintln!("epoch {:>4}  loss {:.6e}  lr {:.2e}", e.epoch, e.loss, e.learning_rate);
    })?;
    eprintln!("trained in {:.1?}, checksum {}", report.wall_clock, report.checksum);

    let mut checkpoint = Vec::new();
    write_checkpoint(&model, &mut checkpoint)?;
    let mut log = Vec::new();
    report.write_to(&mut log)?;
    let mut files = Outputs::new();
    files.add(sidecar(&target, "train.csv"), log);
    files.add(sidecar(&target, "config.toml"), cfg.to_toml().into_bytes());
    files.add(target, checkpoint);
    report_written(&files.commit()?);
    Ok(())
}

/// Loads the checkpoint and data, checks they fit together and records
/// the checkpoint's hyperparameters in `cfg`.
fn model_and_data(model_path: &Path, data: &Path, cfg: &mut RunConfig) -> Result<(Forecaster<f32>, Split)> {
    let model = load_checkpoint(model_path)?;
    let (series, parts) = load_split(data, cfg.split)?;
    let m = model.config();
    if m.nodes != series.nodes() || m.features != series.features() {
        return Err(Error::Config(format!(
            "model expects {}x{} frames, data has {}x{}",
            m.nodes,
            m.features,
            series.nodes(),
            series.features()
        )));
    }
    cfg.adopt(m);
    Ok((model, parts))
}

pub fn detect(
    out: &OutDir,
    model_path: &Path,
    data: Option<PathBuf>,
    method: Option<ThresholdMethod>,
    report: Option<PathBuf>,
    dataset: Option<String>,
    args: &ConfigArgs,
) -> Result<()> {
    let mut cfg = args.resolve()?;
    if let Some(m) = method {
        cfg.threshold_method = m;
    }
    cfg.validate_detection()?;
    let data = data_path(data, &mut cfg)?;
    let (model, parts) = model_and_data(model_path, &data, &mut cfg)?;
    let rate = match cfg.extreme_rate {
        Some(r) => r,
        None => {
            let labels = &parts.train.labels()[cfg.window.min(parts.train.len())..];
            let r = labels.iter().filter(|&&l| l).count() as f64 / labels.len().max(1) as f64;
            if r <= 0.0 {
                return Err(Error::Config(
                    "training split has no extreme frames; set --extreme-rate".into(),
                ));
            }
            r
        }
    };
    cfg.extreme_rate = Some(rate);
    let target = out.resolve(cfg.out_dir.as_deref(), report, &format!("{}-report.csv", cfg.kind));

    let artifacts = DetectionArtifacts::fit(&model, &parts.train, cfg.threshold_method, rate, cfg.threshold_scale)?;
    let detection = artifacts.detect(&model, &parts.test)?;
    let counts = confusion(&detection.predicted, &detection.actual)?;
    let row = ReportRow {
        dataset: dataset.unwrap_or_else(|| {
            data.file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "dataset".into())
        }),
        model: cfg.kind.display_name().to_string(),
        counts,
    };
    let s = counts.scores();
    say!(
        "threshold {:.6} ({}, rate {rate:.4}); tn={} fp={} fn={} tp={}; TPR {:.4} ACC {:.4} F1 {:.4} F2 {:.4}",
        artifacts.threshold,
        cfg.threshold_method,
        counts.tn,
        counts.fp,
        counts.fn_,
        counts.tp,
        s.tpr,
        s.acc,
        s.f1,
        s.f2
    );

    let mut table = Vec::new();
    write_report(&[row], &mut table)?;
    let mut fitted = Vec::new();
    artifacts.write_to(&mut fitted)?;
    let mut files = Outputs::new();
    files.add(sidecar(&target, "gtda"), fitted);
    files.add(sidecar(&target, "config.toml"), cfg.to_toml().into_bytes());
    files.add(target, table);
    report_written(&files.commit()?);
    Ok(())
}

pub fn eval(out: &OutDir, reports: &[PathBuf], path: Option<PathBuf>) -> Result<()> {
    let parsed = reports
        .iter()
        .map(|p| parse_report(BufReader::new(File::open(p)?)))
        .collect::<Result<Vec<_>>>()?;
    let merged = merge_reports(&parsed);
    let mut table = Vec::new();
    write_report(&merged, &mut table)?;
    let _ = io::stdout().lock().write_all(&table);
    let mut files = Outputs::new();
    files.add(out.resolve(None, path, "comparison.csv"), table);
    report_written(&files.commit()?);
    Ok(())
}

pub fn export_latent(
    out: &OutDir,
    model_path: &Path,
    data: Option<PathBuf>,
    path: Option<PathBuf>,
    args: &ConfigArgs,
) -> Result<()> {
    let mut cfg = args.resolve()?;
    let data = data_path(data, &mut cfg)?;
    let (model, parts) = model_and_data(model_path, &data, &mut cfg)?;
    let target = out.resolve(cfg.out_dir.as_deref(), path, &format!("{}-latent.csv", cfg.kind));
    let mut csv = Vec::new();
    let rows = write_latent(&model, &parts.train, &mut csv)?;
    say!("{rows} latent rows");
    let mut files = Outputs::new();
    files.add(sidecar(&target, "config.toml"), cfg.to_toml().into_bytes());
    files.add(target, csv);
    report_written(&files.commit()?);
    Ok(())
}
