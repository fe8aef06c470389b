mod common;

use gtrans_core::data::{build_grid_graph, read_series, synthesize, write_series, Preset, SynthOptions};
use gtrans_core::detector::{fit_statistics, label, mahalanobis, select_threshold, ErrorSet};
use gtrans_core::graph::{laplacian, sharpen, smooth};
use gtrans_core::metrics::{confusion, parse_report, write_report};
use gtrans_core::tensor::{Ctx, ParamStore, Tape, Tensor};
use gtrans_core::training::loss;
use gtrans_core::{ConfusionCounts, ReportRow, ThresholdMethod};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn counts() -> impl Strategy<Value = ConfusionCounts> {
    (0u64..5000, 0u64..5000, 0u64..5000, 1u64..5000).prop_map(|(a, b, c, d)| ConfusionCounts::new(a, b, c, d))
}

fn eval_loss(pred: &[f64], target: &[f64], lambda: f64) -> f64 {
    let store = ParamStore::<f64>::new();
    let tape = Tape::new();
    let ctx = Ctx::eval(&tape, &store);
    let shape = [pred.len()];
    let p = ctx.constant(&Tensor::new(&shape, pred.to_vec()).unwrap());
    let t = ctx.constant(&Tensor::new(&shape, target.to_vec()).unwrap());
    loss(p, t, lambda).unwrap().item()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn loss_is_non_negative(
        pairs in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 1..40),
        lambda in 0.0f64..=1.0,
    ) {
        let (p, t): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let l = eval_loss(&p, &t, lambda);
        prop_assert!(l >= 0.0);
        prop_assert!(eval_loss(&t, &t, 1.0).abs() < 1e-15);
    }

    #[test]
    fn loss_matches_closed_form(
        pairs in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 1..40),
        lambda in 0.0f64..=1.0,
    ) {
        let n = pairs.len() as f64;
        let mse = pairs.iter().map(|(p, t)| (p - t).powi(2)).sum::<f64>() / n;
        let mag = pairs.iter().map(|(p, _)| p * p).sum::<f64>() / n;
        let (p, t): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let expected = lambda * 0.5 * mse + (1.0 - lambda) * mag;
        prop_assert!((eval_loss(&p, &t, lambda) - expected).abs() < 1e-12);
    }

    #[test]
    fn mixing_identity_and_constants(seed in any::<u64>(), n in 2usize..9, c in 1usize..4, gamma in 0.0f64..=1.0) {
        let mut rng = common::rng(seed);
        let g = common::random_connected_graph(&mut rng, n, 0.3);
        let x = DMatrix::from_vec(n, c, common::normal(&mut rng, &[n * c]).into_data());
        let sum = smooth(&x, &g, gamma).unwrap() + sharpen(&x, &g, gamma).unwrap();
        prop_assert!((sum - &x * 2.0).amax() < 1e-12);
        let flat = DMatrix::from_element(n, c, 0.7);
        prop_assert!((smooth(&flat, &g, gamma).unwrap() - &flat).amax() < 1e-12);
    }

    #[test]
    fn laplacian_is_symmetric_with_null_vector(seed in any::<u64>(), n in 2usize..10) {
        let mut rng = common::rng(seed);
        let g = common::random_connected_graph(&mut rng, n, 0.4);
        let l = laplacian(&g).unwrap();
        prop_assert!((&l - l.transpose()).amax() < 1e-15);
        let root_deg = DVector::from_fn(n, |i, _| g.degree(i).sqrt());
        prop_assert!((&l * root_deg).amax() < 1e-12);
    }

    #[test]
    fn grid_edge_count(rows in 1usize..8, cols in 1usize..8) {
        let g = build_grid_graph(0.0, 1.0, 0.0, 1.0, rows, cols).unwrap();
        prop_assert_eq!(g.n(), rows * cols);
        prop_assert_eq!(g.edge_count(), rows * (cols - 1) + cols * (rows - 1));
    }

    #[test]
    fn scores_are_scale_free(c in counts(), k in 2u64..50) {
        let a = c.scores();
        let b = ConfusionCounts::new(c.tn * k, c.fp * k, c.fn_ * k, c.tp * k).scores();
        for (x, y) in [(a.tpr, b.tpr), (a.acc, b.acc), (a.f1, b.f1), (a.f2, b.f2)] {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn f2_versus_f1_follows_error_balance(c in counts()) {
        let s = c.scores();
        prop_assert!((0.0..=1.0).contains(&s.f1) && (0.0..=1.0).contains(&s.f2));
        if c.fp > c.fn_ {
            prop_assert!(s.f2 > s.f1);
        } else if c.fp < c.fn_ {
            prop_assert!(s.f2 < s.f1);
        } else {
            prop_assert!((s.f2 - s.f1).abs() < 1e-12);
        }
    }

    #[test]
    fn confusion_partitions_frames(pairs in prop::collection::vec(any::<(bool, bool)>(), 0..200)) {
        let (p, a): (Vec<bool>, Vec<bool>) = pairs.into_iter().unzip();
        let c = confusion(&p, &a).unwrap();
        prop_assert_eq!(c.total() as usize, p.len());
        prop_assert_eq!((c.tp + c.fp) as usize, p.iter().filter(|&&v| v).count());
        prop_assert_eq!((c.tp + c.fn_) as usize, a.iter().filter(|&&v| v).count());
    }

    #[test]
    fn report_roundtrips(rows in prop::collection::vec(counts(), 1..8)) {
        let rows: Vec<ReportRow> = rows
            .into_iter()
            .enumerate()
            .map(|(i, counts)| ReportRow { dataset: format!("set{}", i % 2), model: format!("m{i}"), counts })
            .collect();
        let mut buf = Vec::new();
        write_report(&rows, &mut buf).unwrap();
        prop_assert_eq!(parse_report(buf.as_slice()).unwrap(), rows);
    }

    #[test]
    fn quantile_threshold_is_monotone_and_calibrated(
        d in prop::collection::vec(0.0f64..100.0, 20..300),
        r1 in 0.01f64..0.5,
        r2 in 0.01f64..0.5,
    ) {
        let (lo, hi) = if r1 < r2 { (r1, r2) } else { (r2, r1) };
        let t_lo = select_threshold(&d, lo, ThresholdMethod::Quantile, 1.0).unwrap();
        let t_hi = select_threshold(&d, hi, ThresholdMethod::Quantile, 1.0).unwrap();
        prop_assert!(t_hi <= t_lo);
        let flagged = label(&d, t_hi).iter().filter(|&&v| v).count() as f64;
        prop_assert!(flagged <= hi * d.len() as f64 + 1.0);
    }

    #[test]
    fn mahalanobis_ignores_coordinate_order(seed in any::<u64>(), dim in 2usize..6) {
        let mut rng = common::rng(seed);
        let n = 4 * dim;
        let values = common::normal(&mut rng, &[n * dim]).into_data();
        let set = ErrorSet { dim, values: values.clone(), frames: (0..n).collect() };
        let perm = common::random_permutation(&mut rng, dim);
        let permuted: Vec<f64> = values.chunks(dim).flat_map(|r| perm.iter().map(move |&p| r[p])).collect();
        let pset = ErrorSet { dim, values: permuted, frames: (0..n).collect() };
        let (a, b) = (fit_statistics(&set).unwrap(), fit_statistics(&pset).unwrap());
        for i in 0..n {
            let row = set.row(i);
            let prow = pset.row(i);
            let da = mahalanobis(row, &a.mean, &a.inverse).unwrap();
            let db = mahalanobis(prow, &b.mean, &b.inverse).unwrap();
            prop_assert!((da - db).abs() < 1e-8 * da.max(1.0));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn synthetic_container_roundtrips(seed in any::<u64>(), frames in 12usize..120, area in any::<bool>()) {
        let preset = if area { Preset::Area45 } else { Preset::Grid16 };
        let s = synthesize(&SynthOptions::new(preset, frames, seed)).unwrap();
        let mut buf = Vec::new();
        write_series(&s, &mut buf).unwrap();
        let back = read_series(buf.as_slice()).unwrap();
        prop_assert_eq!(&back, &s);
        let expected = (preset.default_rate() * frames as f64).round() as usize;
        prop_assert_eq!(s.extreme_count(), expected);
    }
}
