//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Each export wraps a plain function so the logic can be tested natively.

use mvfn_core::bench::random_instance;
use mvfn_core::data::PICKUP;
use mvfn_core::spatial::cosine_feature_maps;
use mvfn_core::synth::{generate, SynthConfig};
use mvfn_core::temporal::{dilated_causal_conv, receptive_field, DilatedConvParams, KERNEL_SIZE};
use ndarray::{Array1, Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

const WIDTH: usize = 12;

fn js(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

/// Row-normalized `L x L` attention weights of a random CLA instance, flattened row-major.
/// Without re-weighting the plain ReLU-kernel similarity is shown.
pub fn attention_weights(tokens: usize, seed: u64, reweight: bool) -> Result<Vec<f64>, String> {
    if tokens == 0 || tokens > 256 {
        return Err(format!("tokens must be in 1..=256, got {tokens}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (x, params) = random_instance(&mut rng, tokens, WIDTH);
    let q = x.dot(&params.w_q).mapv(|v| v.max(0.0));
    let k = x.dot(&params.w_k).mapv(|v| v.max(0.0));
    let sim = if reweight {
        let m = cosine_feature_maps(&q, &k);
        m.q_cos.dot(&m.k_cos.t()) + m.q_sin.dot(&m.k_sin.t())
    } else {
        q.dot(&k.t())
    };
    let mut out = Vec::with_capacity(tokens * tokens);
    for row in sim.rows() {
        let total = row.sum();
        if total <= 0.0 {
            out.extend(std::iter::repeat_n(0.0, tokens));
        } else {
            out.extend(row.iter().map(|v| v / total));
        }
    }
    Ok(out)
}

fn parse_dilations(text: &str) -> Result<Vec<usize>, String> {
    let d: Vec<usize> = text
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| format!("bad dilation {s:?}")))
        .collect::<Result<_, _>>()?;
    if d.is_empty() || d.len() > 8 || d.iter().any(|&v| v == 0 || v > 64) {
        return Err("give 1 to 8 dilations, each in 1..=64".into());
    }
    Ok(d)
}

/// `steps x steps` 0/1 map: entry `(s, t)` is 1 when input step `t` reaches output
/// step `s` through a stack of kernel-2 causal convolutions.
pub fn dependency_map(dilations: &str, steps: usize) -> Result<Vec<u8>, String> {
    let dil = parse_dilations(dilations)?;
    if steps == 0 || steps > 128 {
        return Err(format!("steps must be in 1..=128, got {steps}"));
    }
    let mut out = vec![0u8; steps * steps];
    for t in 0..steps {
        let mut x = Array2::zeros((1, steps));
        x[[0, t]] = 1.0;
        for &d in &dil {
            let conv = DilatedConvParams {
                kernels: Array3::ones((1, 1, KERNEL_SIZE)),
                bias: Array1::zeros(1),
                dilation: d,
                groups: 1,
            };
            x = dilated_causal_conv(&x, &conv).map_err(|e| e.to_string())?;
        }
        for s in 0..steps {
            if x[[0, s]] != 0.0 {
                out[s * steps + t] = 1;
            }
        }
    }
    Ok(out)
}

#[wasm_bindgen]
pub struct HaDemo {
    actual: Vec<f64>,
    forecast: Vec<f64>,
    rmse: f64,
}

#[wasm_bindgen]
impl HaDemo {
    /// Observed pick-ups over the final week.
    #[wasm_bindgen(getter)]
    pub fn actual(&self) -> Vec<f64> {
        self.actual.clone()
    }

    /// HA forecast for the same steps.
    #[wasm_bindgen(getter)]
    pub fn forecast(&self) -> Vec<f64> {
        self.forecast.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn rmse(&self) -> f64 {
        self.rmse
    }
}

/// Final-week pick-ups of one synthetic node against the HA forecast made
/// `horizon` steps ahead from the trailing 12-step mean.
pub fn ha_series(seed: u64, node: usize, horizon: usize) -> Result<HaDemo, String> {
    let cfg = SynthConfig {
        seed,
        ..SynthConfig::default()
    };
    if node >= cfg.nodes {
        return Err(format!("node must be below {}", cfg.nodes));
    }
    if !(1..=12).contains(&horizon) {
        return Err(format!("horizon must be in 1..=12, got {horizon}"));
    }
    let data = generate(&cfg).map_err(|e| e.to_string())?;
    let series: Vec<f64> = data.tensor.values.slice(ndarray::s![.., node, PICKUP]).to_vec();
    let week = data.tensor.bins_per_week();
    let start = series.len() - week;
    let p = 12;
    let mut actual = Vec::with_capacity(week);
    let mut forecast = Vec::with_capacity(week);
    for t in start..series.len() {
        let end = t + 1 - horizon;
        forecast.push(series[end - p..end].iter().sum::<f64>() / p as f64);
        actual.push(series[t]);
    }
    let mse = actual.iter().zip(&forecast).map(|(a, f)| (a - f).powi(2)).sum::<f64>() / week as f64;
    Ok(HaDemo {
        actual,
        forecast,
        rmse: mse.sqrt(),
    })
}

#[wasm_bindgen(js_name = attentionWeights)]
pub fn attention_weights_js(tokens: usize, seed: u32, reweight: bool) -> Result<Vec<f64>, JsError> {
    attention_weights(tokens, seed.into(), reweight).map_err(js)
}

#[wasm_bindgen(js_name = dependencyMap)]
pub fn dependency_map_js(dilations: &str, steps: usize) -> Result<Vec<u8>, JsError> {
    dependency_map(dilations, steps).map_err(js)
}

#[wasm_bindgen(js_name = receptiveField)]
pub fn receptive_field_js(dilations: &str) -> Result<usize, JsError> {
    parse_dilations(dilations)
        .map(|d| receptive_field(KERNEL_SIZE, &d))
        .map_err(js)
}

#[wasm_bindgen(js_name = haForecast)]
pub fn ha_forecast_js(seed: u32, node: usize, horizon: usize) -> Result<HaDemo, JsError> {
    ha_series(seed.into(), node, horizon).map_err(js)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn attention_rows_sum_to_one_and_favour_neighbours() {
        let l = 32;
        let w = attention_weights(l, 1, true).unwrap();
        for i in 0..l {
            let row = &w[i * l..(i + 1) * l];
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let plain = attention_weights(l, 1, false).unwrap();
        // re-weighting moves mass from the far corner toward the diagonal
        assert!(w[l - 1] < plain[l - 1]);
        assert!(attention_weights(0, 1, true).is_err());
    }

    #[test]
    fn dependency_map_spans_the_receptive_field() {
        let steps = 16;
        let map = dependency_map("1,2,4,4", steps).unwrap();
        let reach = |s: usize| (0..steps).filter(|&t| map[s * steps + t] == 1).count();
        assert_eq!(reach(15), 12);
        assert_eq!(reach(3), 4);
        // nothing from the future
        for s in 0..steps {
            for t in s + 1..steps {
                assert_eq!(map[s * steps + t], 0);
            }
        }
        assert!(dependency_map("1,0", 4).is_err());
        assert!(dependency_map("a", 4).is_err());
    }

    #[test]
    fn ha_series_covers_one_week() {
        let demo = ha_series(7, 2, 1).unwrap();
        assert_eq!(demo.actual.len(), 336);
        assert_eq!(demo.forecast.len(), 336);
        assert!(demo.rmse > 0.0);
        let far = ha_series(7, 2, 12).unwrap();
        assert!(far.rmse > demo.rmse);
        assert!(ha_series(7, 8, 1).is_err());
    }
}
