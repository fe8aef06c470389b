//! Confusion counts, TPR/ACC/F1/F2, comparison tables and latent export.

use std::io::{Read, Write};

use crate::data::FrameSeries;
use crate::error::{Error, Result};
use crate::graph::GraphOperator;
use crate::models::Forecaster;
use crate::training::{batch_tensors, make_windows};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tp: u64,
}

impl ConfusionCounts {
    pub fn new(tn: u64, fp: u64, fn_: u64, tp: u64) -> Self {
        ConfusionCounts { tn, fp, fn_, tp }
    }

    pub fn total(&self) -> u64 {
        self.tn + self.fp + self.fn_ + self.tp
    }

    pub fn scores(&self) -> Scores {
        scores(self)
    }
}

/// Positive means extreme.
pub fn confusion(predicted: &[bool], actual: &[bool]) -> Result<ConfusionCounts> {
    if predicted.len() != actual.len() {
        return Err(Error::shape("confusion", &[predicted.len()], &[actual.len()]));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &a) in predicted.iter().zip(actual) {
        match (p, a) {
            (false, false) => c.tn += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (true, true) => c.tp += 1,
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scores {
    pub tpr: f64,
    pub acc: f64,
    pub f1: f64,
    pub f2: f64,
    /// Set when any denominator was zero; that score is reported as 0.
    pub degenerate: bool,
}

/// `tpr = tp/(tp+fn)`, `acc = (tp+tn)/total`, `f1 = tp/(tp + ½(fp+fn))`,
/// `f2 = tp/(tp + 0.2·fp + 0.8·fn)`.
pub fn scores(c: &ConfusionCounts) -> Scores {
    let (tn, fp, fn_, tp) = (c.tn as f64, c.fp as f64, c.fn_ as f64, c.tp as f64);
    let mut degenerate = false;
    let mut ratio = |num: f64, den: f64| {
        if den > 0.0 {
            num / den
        } else {
            degenerate = true;
            0.0
        }
    };
    Scores {
        tpr: ratio(tp, tp + fn_),
        acc: ratio(tp + tn, tp + tn + fp + fn_),
        f1: ratio(tp, tp + 0.5 * (fp + fn_)),
        f2: ratio(tp, tp + 0.2 * fp + 0.8 * fn_),
        degenerate,
    }
}

/// Fixed 4-decimal rendering, ties to even.
pub fn format4(v: f64) -> String {
    let scaled = (v * 1e4).round_ties_even();
    let sign = if scaled < 0.0 { "-" } else { "" };
    let units = scaled.abs() as u64;
    format!("{sign}{}.{:04}", units / 10_000, units % 10_000)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub dataset: String,
    pub model: String,
    pub counts: ConfusionCounts,
}

pub const REPORT_HEADER: [&str; 10] = ["Dataset", "Model", "TN", "FP", "FN", "TP", "TPR", "ACC", "F1", "F2"];

/// Comma-separated table with a header row; scores at 4 decimals.
pub fn write_report<W: Write>(rows: &[ReportRow], w: W) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::Contract("report needs at least one row".into()));
    }
    let mut out = csv::Writer::from_writer(w);
    let csv_err = |e: csv::Error| Error::Format(e.to_string());
    out.write_record(REPORT_HEADER).map_err(csv_err)?;
    for r in rows {
        let s = r.counts.scores();
        let c = &r.counts;
        out.write_record([
            r.dataset.clone(),
            r.model.clone(),
            c.tn.to_string(),
            c.fp.to_string(),
            c.fn_.to_string(),
            c.tp.to_string(),
            format4(s.tpr),
            format4(s.acc),
            format4(s.f1),
            format4(s.f2),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

/// Reads rows back; printed scores must agree with the counts.
pub fn parse_report<R: Read>(r: R) -> Result<Vec<ReportRow>> {
    let mut reader = csv::Reader::from_reader(r);
    let headers = reader.headers().map_err(|e| Error::Format(e.to_string()))?;
    if headers.iter().ne(REPORT_HEADER) {
        return Err(Error::Format(format!("unexpected report header {headers:?}")));
    }
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::Format(e.to_string()))?;
        let count = |i: usize| {
            rec[i]
                .parse::<u64>()
                .map_err(|_| Error::Format(format!("bad count {:?} in column {}", &rec[i], REPORT_HEADER[i])))
        };
        let row = ReportRow {
            dataset: rec[0].to_string(),
            model: rec[1].to_string(),
            counts: ConfusionCounts::new(count(2)?, count(3)?, count(4)?, count(5)?),
        };
        let s = row.counts.scores();
        let printed = [s.tpr, s.acc, s.f1, s.f2].map(format4);
        if printed.iter().zip(6..10).any(|(p, i)| p != &rec[i]) {
            return Err(Error::Format(format!(
                "scores for {}/{} do not match their counts",
                row.dataset, row.model
            )));
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Concatenates reports in the order given.
pub fn merge_reports(reports: &[Vec<ReportRow>]) -> Vec<ReportRow> {
    reports.iter().flatten().cloned().collect()
}

/// One row per window: the model's time-averaged latent vector followed by
/// the nowcast frame's label. Returns the row count.
pub fn export_latent<W: Write>(model: &Forecaster<f32>, series: &FrameSeries, w: W) -> Result<usize> {
    if !model.is_trained() {
        return Err(Error::Contract("model is untrained".into()));
    }
    let window = model.config().window;
    let pairs = make_windows(series, window)?;
    let graph = GraphOperator::<f32>::new(series.graph());
    let mut out = csv::Writer::from_writer(w);
    let csv_err = |e: csv::Error| Error::Format(e.to_string());
    let mut header_written = false;
    for chunk in pairs.chunks(64) {
        let (x, _) = batch_tensors::<f32>(series, chunk, window)?;
        let z = model.latent(&x, &graph)?;
        let width = z.shape()[1];
        if !header_written {
            let mut header: Vec<String> = (0..width).map(|i| format!("z{i}")).collect();
            header.push("label".into());
            out.write_record(&header).map_err(csv_err)?;
            header_written = true;
        }
        for (b, pair) in chunk.iter().enumerate() {
            let mut rec: Vec<String> = z.data()[b * width..(b + 1) * width]
                .iter()
                .map(|v| v.to_string())
                .collect();
            rec.push((series.labels()[pair.nowcast_frame(window)] as u8).to_string());
            out.write_record(&rec).map_err(csv_err)?;
        }
    }
    out.flush()?;
    Ok(pairs.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confusion_cases() {
        let z = [false; 4];
        assert_eq!(confusion(&z, &z).unwrap(), ConfusionCounts::new(4, 0, 0, 0));
        let a = [true, false, true];
        let b = [false, true, false];
        let c = confusion(&a, &b).unwrap();
        assert_eq!((c.tn, c.tp), (0, 0));
        let p = [true, true, false, false, true, false];
        let t = [true, false, false, true, true, false];
        assert_eq!(confusion(&p, &t).unwrap(), ConfusionCounts::new(2, 1, 1, 2));
        assert!(confusion(&p, &t[..2]).is_err());
    }

    #[test]
    fn perfect_and_degenerate() {
        let s = scores(&ConfusionCounts::new(0, 0, 0, 7));
        assert_eq!((s.tpr, s.acc, s.f1, s.f2, s.degenerate), (1.0, 1.0, 1.0, 1.0, false));
        let d = scores(&ConfusionCounts::new(5, 0, 0, 0));
        assert!(d.degenerate);
        assert_eq!((d.tpr, d.acc, d.f1), (0.0, 1.0, 0.0));
    }

    #[test]
    fn rounding_is_half_even() {
        assert_eq!(format4(0.48434), "0.4843");
        assert_eq!(format4(1.0), "1.0000");
        assert_eq!(format4(0.0), "0.0000");
        assert_eq!(format4(0.30305), "0.3030");
    }

    #[test]
    fn report_roundtrip() {
        let rows = vec![ReportRow {
            dataset: "scearthquake".into(),
            model: "GTrans".into(),
            counts: ConfusionCounts::new(3109, 890, 131, 123),
        }];
        let mut buf = Vec::new();
        write_report(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(
            text,
            "Dataset,Model,TN,FP,FN,TP,TPR,ACC,F1,F2\nscearthquake,GTrans,3109,890,131,123,0.4843,0.7599,0.1942,0.3031\n"
        );
        assert_eq!(parse_report(buf.as_slice()).unwrap(), rows);
        let tampered = text.replace("0.1942", "0.1943");
        assert!(parse_report(tampered.as_bytes()).is_err());
        assert!(write_report(&[], Vec::new()).is_err());
    }
}
