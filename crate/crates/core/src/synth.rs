//! Seeded synthetic demand: per-node daily sinusoids, a graph-smoothed AR(1)
//! component, and Gaussian noise.

use std::f64::consts::PI;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{DemandTensor, DEFAULT_INTERVAL_SECS, DROPOFF, FEATURES, PICKUP};
use crate::error::{Error, Result};
use crate::graph::{normalize_adjacency, AdjacencyMatrix};

/// 2024-01-01T00:00:00Z
pub const SYNTH_START: i64 = 1_704_067_200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub nodes: usize,
    pub days: usize,
    pub interval_secs: i64,
    pub noise_std: f64,
    /// AR(1) coefficient of the latent graph component.
    pub ar_coeff: f64,
    /// Innovation std of the latent component.
    pub ar_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            nodes: 8,
            days: 30,
            interval_secs: DEFAULT_INTERVAL_SECS,
            noise_std: 0.1,
            ar_coeff: 0.95,
            ar_std: 0.3,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub tensor: DemandTensor,
    /// Ring graph the latent component is smoothed over.
    pub adjacency: AdjacencyMatrix,
}

/// Ring over `n` nodes; a single edge for `n = 2`, none for `n = 1`.
pub fn ring_adjacency(n: usize) -> AdjacencyMatrix {
    let edges: Vec<(usize, usize)> = if n < 2 {
        Vec::new()
    } else {
        (0..n).map(|i| (i, (i + 1) % n)).collect()
    };
    AdjacencyMatrix::from_edges(n, &edges).expect("ring edges are in range")
}

pub fn generate(cfg: &SynthConfig) -> Result<SyntheticDataset> {
    if cfg.nodes == 0 || cfg.days == 0 || cfg.interval_secs <= 0 || 86_400 % cfg.interval_secs != 0 {
        return Err(Error::Config(vec![format!(
            "synthetic config needs nodes >= 1, days >= 1 and an interval dividing one day, got {cfg:?}"
        )]));
    }
    let per_day = (86_400 / cfg.interval_secs) as usize;
    let steps = cfg.days * per_day;
    let n = cfg.nodes;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let base: Vec<f64> = (0..n).map(|_| rng.random_range(6.0..12.0)).collect();
    let amp: Vec<f64> = (0..n).map(|_| rng.random_range(2.0..5.0)).collect();
    let phase: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..2.0 * PI)).collect();

    let adjacency = ring_adjacency(n);
    let mix: Array2<f64> = normalize_adjacency(&adjacency).entries().clone();
    let innov = Normal::new(0.0, cfg.ar_std).map_err(|e| Error::Config(vec![e.to_string()]))?;
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Config(vec![e.to_string()]))?;

    let mut tensor = DemandTensor::zeros(steps, n, SYNTH_START, cfg.interval_secs);
    let mut latent = Array1::<f64>::zeros(n);
    for t in 0..steps {
        latent.mapv_inplace(|z| cfg.ar_coeff * z);
        for z in latent.iter_mut() {
            *z += innov.sample(&mut rng);
        }
        let g = mix.dot(&latent);
        let angle = 2.0 * PI * t as f64 / per_day as f64;
        for i in 0..n {
            let pick = base[i] + amp[i] * (angle + phase[i]).sin() + g[i];
            // drop-offs lag pick-ups by about an hour
            let drop = base[i] + amp[i] * (angle + phase[i] - PI / 12.0).sin() + 0.8 * g[i];
            tensor.values[[t, i, PICKUP]] = pick + noise.sample(&mut rng);
            tensor.values[[t, i, DROPOFF]] = drop + noise.sample(&mut rng);
        }
    }
    debug_assert_eq!(tensor.feature_count(), FEATURES);
    Ok(SyntheticDataset { tensor, adjacency })
}
