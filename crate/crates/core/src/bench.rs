//! Wall-clock scaling of quadratic vs. linear attention.

use std::hint::black_box;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::spatial::{cla_forward, naive_cla_oracle, ClaParams};

pub const DEFAULT_LENGTHS: [usize; 5] = [256, 512, 1024, 2048, 4096];

#[derive(Debug, Clone, Copy, Serialize)]
pub struct BenchRow {
    pub tokens: usize,
    pub naive_secs: f64,
    pub linear_secs: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub width: usize,
    pub rows: Vec<BenchRow>,
    pub naive_slope: f64,
    pub linear_slope: f64,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("L,naive_secs,linear_secs\n");
        for r in &self.rows {
            s.push_str(&format!("{},{:.9},{:.9}\n", r.tokens, r.naive_secs, r.linear_secs));
        }
        s
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::shape(
            "slope fit points",
            "two or more paired points",
            (xs.len(), ys.len()),
        ));
    }
    if xs.iter().chain(ys).any(|v| v.is_nan() || *v <= 0.0) {
        return Err(Error::NonFinite("log-log fit needs positive values".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::UndefinedMetric("slope: all x values equal"));
    }
    Ok(sxy / sxx)
}

/// Random positive tokens and Glorot-like projections with a positive shift, so
/// every denominator is safely away from zero.
pub fn random_instance(rng: &mut impl Rng, tokens: usize, width: usize) -> (Array2<f64>, ClaParams) {
    let a = (3.0 / width as f64).sqrt();
    let mut w = |shift: f64| Array2::from_shape_fn((width, width), |_| rng.random_range(-a..a) + shift);
    let params = ClaParams {
        w_q: w(0.1),
        w_k: w(0.1),
        w_v: w(0.0),
    };
    let x = Array2::from_shape_fn((tokens, width), |_| rng.random_range(0.0..1.0));
    (x, params)
}

/// Best-of-`rounds` seconds per call; each round repeats `f` until `floor` elapses.
fn time_min(rounds: usize, floor: Duration, mut f: impl FnMut()) -> f64 {
    let mut best = f64::INFINITY;
    for _ in 0..rounds.max(1) {
        let start = Instant::now();
        let mut calls = 0u32;
        while calls == 0 || start.elapsed() < floor {
            f();
            calls += 1;
        }
        best = best.min(start.elapsed().as_secs_f64() / calls as f64);
    }
    best
}

pub fn bench_attention(lengths: &[usize], width: usize, rounds: usize, seed: u64) -> Result<BenchReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let floor = Duration::from_millis(5);
    let mut rows = Vec::with_capacity(lengths.len());
    for &l in lengths {
        let (x, params) = random_instance(&mut rng, l, width);
        // fail early on a degenerate instance rather than timing an error path
        cla_forward(&x, &params)?;
        let naive_secs = time_min(rounds, floor, || {
            black_box(naive_cla_oracle(black_box(&x), &params).ok());
        });
        let linear_secs = time_min(rounds, floor, || {
            black_box(cla_forward(black_box(&x), &params).ok());
        });
        log::info!("L={l} naive={naive_secs:.6}s linear={linear_secs:.6}s");
        rows.push(BenchRow {
            tokens: l,
            naive_secs,
            linear_secs,
        });
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.tokens as f64).collect();
    let naive: Vec<f64> = rows.iter().map(|r| r.naive_secs).collect();
    let linear: Vec<f64> = rows.iter().map(|r| r.linear_secs).collect();
    Ok(BenchReport {
        width,
        naive_slope: loglog_slope(&xs, &naive)?,
        linear_slope: loglog_slope(&xs, &linear)?,
        rows,
    })
}
