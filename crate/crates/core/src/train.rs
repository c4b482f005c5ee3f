//! MAE loss, reverse-mode gradients, a finite-difference oracle, Adam, and the epoch loop.

use std::time::Instant;

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{BestSnapshot, Checkpoint};
use crate::data::{ScalerStats, WindowedSample};
use crate::error::{Error, Result};
use crate::graph::{normalize_adjacency, AdjacencyMatrix};
use crate::metrics::{evaluate, ModelForecaster};
use crate::model::{init_params, ModelParams, Mvfn, MvfnConfig};
use crate::spatial::to_global;
use crate::synth::ring_adjacency;

/// Mean absolute error over every element.
pub fn mae_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::shape("loss inputs", target.len(), pred.len()));
    }
    if pred.is_empty() {
        return Err(Error::EmptySplit("loss over zero elements"));
    }
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

/// Subgradient of `|r|` with the value 0 at the kink.
fn sign(r: f64) -> f64 {
    if r > 0.0 {
        1.0
    } else if r < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Stop after this many epochs without a validation RMSE improvement.
    pub patience: Option<usize>,
    /// Rescale the global gradient to at most this L2 norm.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            lr: 1e-3,
            seed: 0,
            patience: None,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.batch_size == 0 {
            errs.push("batch_size must be positive".to_string());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            errs.push(format!("lr must be positive, got {}", self.lr));
        }
        if self.patience == Some(0) {
            errs.push("patience must be positive when set".to_string());
        }
        if let Some(c) = self.clip_norm {
            if !(c.is_finite() && c > 0.0) {
                errs.push(format!("clip_norm must be positive, got {c}"));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(param_count: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::shape(
            "adam buffers",
            params.len(),
            (grads.len(), state.m.len(), state.v.len()),
        ));
    }
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

/// Mean MAE of the model over a batch of scaled samples.
pub fn batch_loss(model: &Mvfn, params: &ModelParams, batch: &[WindowedSample]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptySplit("empty batch"));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for s in batch {
        let pred = model.forward(params, &s.input)?;
        if pred.dim() != s.target.dim() {
            return Err(Error::shape("target", pred.dim(), s.target.dim()));
        }
        total += pred
            .iter()
            .zip(s.target.iter())
            .map(|(p, t)| (p - t).abs())
            .sum::<f64>();
        count += pred.len();
    }
    Ok(total / count as f64)
}

/// Loss contribution and flat gradient of one sample, both unnormalized.
fn sample_gradient(model: &Mvfn, params: &ModelParams, sample: &WindowedSample) -> Result<(f64, Vec<f64>)> {
    let trace = model.forward_traced(params, &sample.input)?;
    let target = to_global(&sample.target);
    let out = trace.output_global();
    if out.dim() != target.dim() {
        return Err(Error::shape("target", out.dim(), target.dim()));
    }
    let residual = out - &target;
    let loss = residual.iter().map(|r| r.abs()).sum();
    let grad_out: Array2<f64> = residual.mapv(sign);
    Ok((loss, model.backward(params, &trace, &grad_out).to_flat()))
}

/// Gradient of the mean batch MAE w.r.t. every parameter, plus the loss.
///
/// Samples may be processed in parallel; the reduction always runs in sample order.
pub fn compute_gradients(model: &Mvfn, params: &ModelParams, batch: &[WindowedSample]) -> Result<(f64, ModelParams)> {
    if batch.is_empty() {
        return Err(Error::EmptySplit("empty batch"));
    }
    #[cfg(feature = "parallel")]
    let parts: Vec<Result<(f64, Vec<f64>)>> = {
        use rayon::prelude::*;
        batch.par_iter().map(|s| sample_gradient(model, params, s)).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let parts: Vec<Result<(f64, Vec<f64>)>> = batch.iter().map(|s| sample_gradient(model, params, s)).collect();

    let mut loss = 0.0;
    let mut flat = vec![0.0; params.param_count()];
    for part in parts {
        let (l, g) = part?;
        loss += l;
        flat.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    let c = &model.config;
    let denom = (batch.len() * c.output_steps * c.tokens()) as f64;
    flat.iter_mut().for_each(|g| *g /= denom);
    let mut grads = params.clone();
    grads.set_from_flat(&flat)?;
    if let Some((path, _)) = grads
        .tensors()
        .into_iter()
        .find(|(_, t)| t.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::NonFinite(format!("gradient of {path}")));
    }
    Ok((loss / denom, grads))
}

/// Central difference `(f(x+h) - f(x-h)) / 2h`.
pub fn central_difference(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Finite-difference derivative of the batch loss w.r.t. one flat coordinate.
pub fn finite_difference_gradient(
    model: &Mvfn,
    params: &ModelParams,
    batch: &[WindowedSample],
    coordinate: usize,
    h: f64,
) -> Result<f64> {
    let base = params.to_flat();
    if coordinate >= base.len() {
        return Err(Error::shape(
            "gradient coordinate",
            format!("< {}", base.len()),
            coordinate,
        ));
    }
    let mut probe = params.clone();
    let mut eval = |delta: f64| -> Result<f64> {
        let mut flat = base.clone();
        flat[coordinate] += delta;
        probe.set_from_flat(&flat)?;
        batch_loss(model, &probe, batch)
    };
    let plus = eval(h)?;
    let minus = eval(-h)?;
    Ok((plus - minus) / (2.0 * h))
}

#[derive(Debug, Clone, Serialize)]
pub struct CoordinateCheck {
    pub index: usize,
    pub path: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    /// A ReLU input or loss residual sits near zero and moves with this coordinate.
    pub near_kink: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub total: usize,
    pub passed: usize,
    pub tolerance: f64,
    pub step: f64,
    /// Failing coordinates, worst first.
    pub failures: Vec<CoordinateCheck>,
}

impl GradCheckReport {
    pub fn pass_fraction(&self) -> f64 {
        self.passed as f64 / self.total.max(1) as f64
    }

    pub fn unexplained(&self) -> usize {
        self.failures.iter().filter(|c| !c.near_kink).count()
    }

    pub fn ok(&self) -> bool {
        self.pass_fraction() >= 0.99 && self.unexplained() == 0
    }
}

fn kink_probes(model: &Mvfn, params: &ModelParams, batch: &[WindowedSample]) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for s in batch {
        let trace = model.forward_traced(params, &s.input)?;
        out.extend(trace.pre_activations());
        let target = to_global(&s.target);
        out.extend((trace.output_global() - &target).iter());
    }
    Ok(out)
}

/// Compares analytic and central-difference gradients on every coordinate.
///
/// A coordinate passes when `|a - n| / max(1, |a|, |n|) < tolerance`. Failures are
/// flagged `near_kink` when some ReLU input or residual that depends on the
/// coordinate lies within `10 h` of zero, or changes sign, across `theta +- h`.
pub fn gradient_check(
    model: &Mvfn,
    params: &ModelParams,
    batch: &[WindowedSample],
    h: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let (_, grads) = compute_gradients(model, params, batch)?;
    let analytic = grads.to_flat();
    let base = params.to_flat();
    let check = |i: usize| -> Result<Option<CoordinateCheck>> {
        let numeric = finite_difference_gradient(model, params, batch, i, h)?;
        let a = analytic[i];
        let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        if rel < tolerance {
            return Ok(None);
        }
        let mut probe = params.clone();
        let mut at = |delta: f64| -> Result<Vec<f64>> {
            let mut flat = base.clone();
            flat[i] += delta;
            probe.set_from_flat(&flat)?;
            kink_probes(model, &probe, batch)
        };
        let plus = at(h)?;
        let minus = at(-h)?;
        let near_kink = plus.iter().zip(&minus).any(|(&u, &w)| {
            let moves = u != w;
            let crosses = (u > 0.0) != (w > 0.0);
            moves && (crosses || u.abs() < 10.0 * h || w.abs() < 10.0 * h)
        });
        Ok(Some(CoordinateCheck {
            index: i,
            path: params.coordinate_path(i).unwrap_or_default(),
            analytic: a,
            numeric,
            rel_error: rel,
            near_kink,
        }))
    };
    #[cfg(feature = "parallel")]
    let results: Vec<Result<Option<CoordinateCheck>>> = {
        use rayon::prelude::*;
        (0..base.len()).into_par_iter().map(check).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<Result<Option<CoordinateCheck>>> = (0..base.len()).map(check).collect();

    let mut failures = Vec::new();
    for r in results {
        if let Some(c) = r? {
            failures.push(c);
        }
    }
    failures.sort_by(|a, b| b.rel_error.total_cmp(&a.rel_error));
    Ok(GradCheckReport {
        total: base.len(),
        passed: base.len() - failures.len(),
        tolerance,
        step: h,
        failures,
    })
}

/// `count` windows with entries drawn uniformly from `[-1, 1)`, shaped for `config`.
pub fn random_batch(config: &MvfnConfig, count: usize, seed: u64) -> Vec<WindowedSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, f) = (config.nodes, config.features);
    (0..count)
        .map(|t0| WindowedSample {
            input: Array3::from_shape_fn((config.input_steps, n, f), |_| rng.random_range(-1.0..1.0)),
            target: Array3::from_shape_fn((config.output_steps, n, f), |_| rng.random_range(-1.0..1.0)),
            t0,
        })
        .collect()
}

/// [`gradient_check`] on freshly initialized parameters, a ring graph and a random batch.
pub fn random_gradient_check(config: &MvfnConfig, batch: usize, h: f64, tolerance: f64) -> Result<GradCheckReport> {
    let model = Mvfn::new(config.clone(), normalize_adjacency(&ring_adjacency(config.nodes)))?;
    let params = init_params(config);
    let samples = random_batch(config, batch, config.seed.wrapping_add(1));
    gradient_check(&model, &params, &samples, h, tolerance)
}

/// Rescales `grads` in place so its L2 norm is at most `max_norm`.
pub fn clip_gradients(grads: &mut [f64], max_norm: f64) {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
}

/// One optimizer step on `batch`; returns the batch loss.
pub fn train_step(
    model: &Mvfn,
    params: &mut ModelParams,
    adam: &mut AdamState,
    batch: &[WindowedSample],
    clip_norm: Option<f64>,
) -> Result<f64> {
    let (loss, grads) = compute_gradients(model, params, batch)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("training loss {loss}")));
    }
    let mut g = grads.to_flat();
    if let Some(c) = clip_norm {
        clip_gradients(&mut g, c);
    }
    let mut flat = params.to_flat();
    adam_step(&mut flat, &g, adam)?;
    params.set_from_flat(&flat)?;
    if let Some((path, _)) = params
        .tensors()
        .into_iter()
        .find(|(_, t)| t.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::NonFinite(format!("parameter {path} after update")));
    }
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    /// Mean training MAE in scaled units.
    pub train_loss: f64,
    pub val_rmse: f64,
    pub val_mae: f64,
    pub val_pcc: Option<f64>,
    pub seconds: f64,
}

/// Inputs to [`train`]. Training windows are scaled; validation windows are raw.
pub struct TrainingData<'a> {
    pub train: &'a [WindowedSample],
    pub validation: &'a [WindowedSample],
    pub scaler: &'a ScalerStats,
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// State after the last completed epoch.
    pub checkpoint: Checkpoint,
    pub reports: Vec<EpochReport>,
    /// Set when a non-finite loss or gradient stopped the run early.
    pub aborted: Option<Error>,
}

/// Fresh training state for `config`.
pub fn initial_checkpoint(
    config: MvfnConfig,
    train_config: TrainConfig,
    adjacency: AdjacencyMatrix,
    scaler: ScalerStats,
) -> Result<Checkpoint> {
    config.validate()?;
    train_config.validate()?;
    if adjacency.node_count() != config.nodes {
        return Err(Error::shape("adjacency size", config.nodes, adjacency.node_count()));
    }
    let params = init_params(&config);
    let adam = AdamState::new(params.param_count(), train_config.lr);
    Ok(Checkpoint {
        rng: ChaCha8Rng::seed_from_u64(train_config.seed),
        best: BestSnapshot {
            epoch: 0,
            val_rmse: None,
            params: params.clone(),
        },
        epochs_since_best: 0,
        epoch: 0,
        config,
        train_config,
        adjacency,
        scaler: Some(scaler),
        params,
        adam,
    })
}

/// Runs epochs until `state.train_config.epochs` have completed or early stopping fires.
///
/// `state` may be a fresh [`initial_checkpoint`] or a loaded one; resuming continues
/// the same shuffle stream and optimizer moments.
pub fn train(
    mut state: Checkpoint,
    data: &TrainingData<'_>,
    mut on_epoch: impl FnMut(&EpochReport),
) -> Result<TrainOutcome> {
    let model = Mvfn::new(state.config.clone(), normalize_adjacency(&state.adjacency))?;
    let tc = state.train_config.clone();
    tc.validate()?;
    if state.epoch < tc.epochs && (data.train.is_empty() || data.validation.is_empty()) {
        return Err(Error::EmptySplit(
            "training needs non-empty train and validation windows",
        ));
    }
    let mut reports = Vec::new();
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    while state.epoch < tc.epochs {
        if tc.patience.is_some_and(|p| state.epochs_since_best >= p) {
            log::info!(
                "early stop after {} epochs without improvement",
                state.epochs_since_best
            );
            break;
        }
        let started = Instant::now();
        let snapshot = state.clone();
        order.sort_unstable();
        order.shuffle(&mut state.rng);
        let mut loss_sum = 0.0;
        let mut step_result = Ok(());
        for chunk in order.chunks(tc.batch_size) {
            let batch: Vec<WindowedSample> = chunk.iter().map(|&i| data.train[i].clone()).collect();
            match train_step(&model, &mut state.params, &mut state.adam, &batch, tc.clip_norm) {
                Ok(l) => loss_sum += l * batch.len() as f64,
                Err(e) => {
                    step_result = Err(e);
                    break;
                }
            }
        }
        let metrics = step_result.and_then(|_| {
            let fc = ModelForecaster {
                model: &model,
                params: &state.params,
                scaler: data.scaler,
            };
            let r = evaluate(&fc, data.validation)?;
            if !(r.rmse.is_finite() && r.mae.is_finite()) {
                return Err(Error::NonFinite(format!("validation rmse {}", r.rmse)));
            }
            Ok(r)
        });
        let metrics = match metrics {
            Ok(m) => m,
            Err(e @ (Error::NonFinite(_) | Error::DegenerateAttention { .. })) => {
                log::error!("aborting at epoch {}: {e}", snapshot.epoch + 1);
                return Ok(TrainOutcome {
                    checkpoint: snapshot,
                    reports,
                    aborted: Some(e),
                });
            }
            Err(e) => return Err(e),
        };
        state.epoch += 1;
        if state.best.val_rmse.is_none_or(|b| metrics.rmse < b) {
            state.best = BestSnapshot {
                epoch: state.epoch,
                val_rmse: Some(metrics.rmse),
                params: state.params.clone(),
            };
            state.epochs_since_best = 0;
        } else {
            state.epochs_since_best += 1;
        }
        let report = EpochReport {
            epoch: state.epoch,
            train_loss: loss_sum / data.train.len() as f64,
            val_rmse: metrics.rmse,
            val_mae: metrics.mae,
            val_pcc: metrics.pcc,
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&report);
        reports.push(report);
    }
    Ok(TrainOutcome {
        checkpoint: state,
        reports,
        aborted: None,
    })
}
