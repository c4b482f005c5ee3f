//! RMSE / MAE / PCC, the historical-average baseline and split evaluation.

use ndarray::{Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{ScaleDirection, ScalerStats, WindowedSample};
use crate::error::{Error, Result};
use crate::model::{ModelParams, Mvfn};

fn check_same_len(pred: &[f64], truth: &[f64]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::shape("metric inputs", truth.len(), pred.len()));
    }
    if pred.is_empty() {
        return Err(Error::EmptySplit("metric over zero elements"));
    }
    Ok(())
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_same_len(pred, truth)?;
    let sse: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((sse / pred.len() as f64).sqrt())
}

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_same_len(pred, truth)?;
    let sae: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum();
    Ok(sae / pred.len() as f64)
}

/// Pearson correlation over the pooled elements; undefined when either side is constant.
pub fn pcc(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_same_len(pred, truth)?;
    let n = pred.len() as f64;
    let mp = pred.iter().sum::<f64>() / n;
    let mt = truth.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (p, t) in pred.iter().zip(truth) {
        let (dp, dt) = (p - mp, t - mt);
        sxy += dp * dt;
        sxx += dp * dp;
        syy += dt * dt;
    }
    if sxx == 0.0 {
        return Err(Error::UndefinedMetric("pcc: predictions have zero variance"));
    }
    if syy == 0.0 {
        return Err(Error::UndefinedMetric("pcc: ground truth has zero variance"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rmse: f64,
    pub mae: f64,
    /// `None` when either series is constant.
    pub pcc: Option<f64>,
    pub sample_count: usize,
}

impl MetricReport {
    pub fn from_pooled(pred: &[f64], truth: &[f64], sample_count: usize) -> Result<Self> {
        Ok(Self {
            rmse: rmse(pred, truth)?,
            mae: mae(pred, truth)?,
            pcc: match pcc(pred, truth) {
                Ok(v) => Some(v),
                Err(Error::UndefinedMetric(_)) => None,
                Err(e) => return Err(e),
            },
            sample_count,
        })
    }
}

/// Aligned plain-text table with RMSE, MAE and PCC columns.
pub fn format_table(rows: &[(String, MetricReport)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(6).max(6);
    let mut s = format!("{:<width$}  {:>10}  {:>10}  {:>8}\n", "Method", "RMSE", "MAE", "PCC");
    for (name, r) in rows {
        let pcc = r.pcc.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
        s.push_str(&format!(
            "{name:<width$}  {:>10.4}  {:>10.4}  {:>8}\n",
            r.rmse, r.mae, pcc
        ));
    }
    s
}

/// Anything that maps a raw `(P, N, f)` input window to a raw `(Q, N, f)` forecast.
pub trait Forecaster: Sync {
    fn name(&self) -> String;
    fn predict(&self, input: &Array3<f64>) -> Result<Array3<f64>>;
}

/// Predicts the mean of the input window for every future step.
#[derive(Debug, Clone, Copy)]
pub struct HistoricalAverage {
    pub horizon: usize,
}

impl Forecaster for HistoricalAverage {
    fn name(&self) -> String {
        "HA".into()
    }

    fn predict(&self, input: &Array3<f64>) -> Result<Array3<f64>> {
        let (p, n, f) = input.dim();
        if p == 0 {
            return Err(Error::shape("HA input steps", "at least 1", 0));
        }
        let mean = input.mean_axis(Axis(0)).expect("p >= 1");
        Ok(mean
            .insert_axis(Axis(0))
            .broadcast((self.horizon, n, f))
            .expect("broadcast over steps")
            .to_owned())
    }
}

pub fn ha_baseline(sample: &WindowedSample) -> Array3<f64> {
    HistoricalAverage {
        horizon: sample.target.dim().0,
    }
    .predict(&sample.input)
    .expect("non-empty window")
}

/// A trained network that scales inputs and unscales outputs.
pub struct ModelForecaster<'a> {
    pub model: &'a Mvfn,
    pub params: &'a ModelParams,
    pub scaler: &'a ScalerStats,
}

impl Forecaster for ModelForecaster<'_> {
    fn name(&self) -> String {
        self.model.config.flags.label()
    }

    fn predict(&self, input: &Array3<f64>) -> Result<Array3<f64>> {
        let scaled = self.scaler.apply(input, ScaleDirection::Forward);
        let out = self.model.forward(self.params, &scaled)?;
        Ok(self.scaler.apply(&out, ScaleDirection::Inverse))
    }
}

/// Predicts every sample, in order.
pub fn predict_all(forecaster: &dyn Forecaster, samples: &[WindowedSample]) -> Result<Vec<Array3<f64>>> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        samples.par_iter().map(|s| forecaster.predict(&s.input)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        samples.iter().map(|s| forecaster.predict(&s.input)).collect()
    }
}

/// Metrics over the concatenation of all targets, in raw units.
pub fn evaluate(forecaster: &dyn Forecaster, samples: &[WindowedSample]) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(Error::EmptySplit("evaluation split has no windows"));
    }
    let preds = predict_all(forecaster, samples)?;
    let mut p = Vec::new();
    let mut t = Vec::new();
    for (pred, s) in preds.iter().zip(samples) {
        if pred.dim() != s.target.dim() {
            return Err(Error::shape("forecast", s.target.dim(), pred.dim()));
        }
        p.extend(pred.iter());
        t.extend(s.target.iter());
    }
    MetricReport::from_pooled(&p, &t, samples.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_windows, DemandTensor};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    struct Oracle<'a>(&'a [WindowedSample]);

    impl Forecaster for Oracle<'_> {
        fn name(&self) -> String {
            "oracle".into()
        }
        fn predict(&self, input: &Array3<f64>) -> Result<Array3<f64>> {
            Ok(self.0.iter().find(|s| s.input == *input).unwrap().target.clone())
        }
    }

    #[test]
    fn metric_examples() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 12.5f64.sqrt(), epsilon = 1e-15);
        assert_eq!(mae(&[2.0, 4.0], &[1.0, 2.0]).unwrap(), 1.5);
        assert!(rmse(&[1.0], &[1.0, 2.0]).is_err());
        let t = [1.0, 3.0, 2.0, 7.0];
        assert_abs_diff_eq!(pcc(&t, &t).unwrap(), 1.0, epsilon = 1e-15);
        let neg: Vec<f64> = t.iter().map(|v| -v).collect();
        assert_abs_diff_eq!(pcc(&neg, &t).unwrap(), -1.0, epsilon = 1e-15);
        assert!(matches!(pcc(&[1.0, 1.0], &[1.0, 2.0]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn ha_examples() {
        let s = WindowedSample {
            input: Array3::from_elem((12, 2, 2), 7.0),
            target: Array3::zeros((12, 2, 2)),
            t0: 0,
        };
        assert!(ha_baseline(&s).iter().all(|&v| v == 7.0));
        let mut input = Array3::zeros((3, 1, 2));
        for (t, v) in [2.0, 4.0, 6.0].into_iter().enumerate() {
            input[[t, 0, 0]] = v;
            input[[t, 0, 1]] = v;
        }
        let s = WindowedSample {
            input,
            target: Array3::zeros((5, 1, 2)),
            t0: 0,
        };
        let pred = ha_baseline(&s);
        assert_eq!(pred.dim(), (5, 1, 2));
        assert!(pred.iter().all(|&v| v == 4.0));
    }

    #[test]
    fn perfect_forecaster_and_constant_ha() {
        let mut d = DemandTensor::zeros(40, 2, 0, 1800);
        d.values
            .indexed_iter_mut()
            .for_each(|((t, n, k), v)| *v = ((t * 7 + n * 3 + k) % 11) as f64);
        let w = make_windows(&d, 12, 12, 1);
        let r = evaluate(&Oracle(&w), &w).unwrap();
        assert_eq!((r.rmse, r.mae), (0.0, 0.0));
        assert_abs_diff_eq!(r.pcc.unwrap(), 1.0, epsilon = 1e-12);

        d.values.fill(3.0);
        let w = make_windows(&d, 12, 12, 1);
        let r = evaluate(&HistoricalAverage { horizon: 12 }, &w).unwrap();
        assert_eq!(r.rmse, 0.0);
        assert_eq!(r.pcc, None);
        assert!(evaluate(&HistoricalAverage { horizon: 12 }, &[]).is_err());
    }

    #[test]
    fn table_has_all_columns() {
        let r = MetricReport {
            rmse: 5.2003,
            mae: 3.4617,
            pcc: Some(0.1669),
            sample_count: 1,
        };
        let t = format_table(&[("HA".into(), r)]);
        assert!(t.lines().next().unwrap().contains("RMSE"));
        assert!(t.contains("5.2003") && t.contains("3.4617") && t.contains("0.1669"));
    }

    proptest! {
        #[test]
        fn rmse_dominates_mae(v in prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 1..64)) {
            let (p, t): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
            let r = rmse(&p, &t).unwrap();
            let m = mae(&p, &t).unwrap();
            prop_assert!(r + 1e-9 * r.max(1.0) >= m && m >= 0.0);
        }

        #[test]
        fn pcc_affine_invariance(
            v in prop::collection::vec((-10f64..10.0, -10f64..10.0), 3..64),
            a in 0.1f64..10.0,
            b in -5f64..5.0,
        ) {
            let (p, t): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
            if let Ok(base) = pcc(&t, &p) {
                let shifted: Vec<f64> = t.iter().map(|x| a * x + b).collect();
                let moved = pcc(&shifted, &p).unwrap();
                prop_assert!((moved - base).abs() < 1e-12);
                prop_assert!((-1.0..=1.0).contains(&base));
            }
        }
    }
}
