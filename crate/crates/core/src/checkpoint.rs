//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "MVFNCP1\0"
//! version  u32
//! hlen     u64, then hlen bytes of JSON header (configs, graph edges, scaler,
//!          epoch counters, RNG position, Adam hyperparameters)
//! count    u64 parameter count
//! blobs    4 * count f64: params, adam m, adam v, best params
//! crc      u64 CRC-64/ECMA-182 of every preceding byte
//! ```
//!
//! Parameters follow [`ModelParams::tensors`] order.

use std::io::{Cursor, Read};
use std::path::Path;

use crc::{Crc, CRC_64_ECMA_182};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ScalerStats;
use crate::error::{Error, Result};
use crate::graph::AdjacencyMatrix;
use crate::model::{ModelParams, MvfnConfig};
use crate::train::{AdamState, TrainConfig};

pub const MAGIC: &[u8; 8] = b"MVFNCP1\0";
pub const VERSION: u32 = 1;

const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_ECMA_182);

/// Parameters with the lowest validation RMSE seen so far.
#[derive(Debug, Clone, PartialEq)]
pub struct BestSnapshot {
    pub epoch: usize,
    pub val_rmse: Option<f64>,
    pub params: ModelParams,
}

/// Everything needed to resume training or run inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: MvfnConfig,
    pub train_config: TrainConfig,
    pub adjacency: AdjacencyMatrix,
    pub scaler: Option<ScalerStats>,
    /// Completed epochs.
    pub epoch: usize,
    pub params: ModelParams,
    pub adam: AdamState,
    pub rng: ChaCha8Rng,
    pub best: BestSnapshot,
    pub epochs_since_best: usize,
}

#[derive(Serialize, Deserialize)]
struct AdamHeader {
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

#[derive(Serialize, Deserialize)]
struct RngHeader {
    seed: [u8; 32],
    stream: u64,
    word_pos: u128,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: MvfnConfig,
    train_config: TrainConfig,
    edges: Vec<(usize, usize)>,
    scaler: Option<ScalerStats>,
    epoch: usize,
    epochs_since_best: usize,
    best_epoch: usize,
    best_val_rmse: Option<f64>,
    rng: RngHeader,
    adam: AdamHeader,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            config: self.config.clone(),
            train_config: self.train_config.clone(),
            edges: self.adjacency.edges(),
            scaler: self.scaler.clone(),
            epoch: self.epoch,
            epochs_since_best: self.epochs_since_best,
            best_epoch: self.best.epoch,
            best_val_rmse: self.best.val_rmse,
            rng: RngHeader {
                seed: self.rng.get_seed(),
                stream: self.rng.get_stream(),
                word_pos: self.rng.get_word_pos(),
            },
            adam: AdamHeader {
                t: self.adam.t,
                lr: self.adam.lr,
                beta1: self.adam.beta1,
                beta2: self.adam.beta2,
                eps: self.adam.eps,
            },
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(format!("header encode: {e}")))?;
        let count = self.params.param_count();
        let blobs = [
            self.params.to_flat(),
            self.adam.m.clone(),
            self.adam.v.clone(),
            self.best.params.to_flat(),
        ];
        if blobs.iter().any(|b| b.len() != count) {
            return Err(Error::Checkpoint(
                "optimizer state does not match parameter count".into(),
            ));
        }
        let mut out = Vec::with_capacity(32 + json.len() + 32 * count);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(count as u64).to_le_bytes());
        for b in &blobs {
            for v in b {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = CRC64.checksum(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        if bytes.len() < MAGIC.len() + 4 {
            return Err(Error::Checkpoint("checksum mismatch: file truncated".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "version mismatch: file has {version}, reader supports {VERSION}"
            )));
        }
        if bytes.len() < 12 + 8 {
            return Err(Error::Checkpoint("checksum mismatch: file truncated".into()));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(trailer.try_into().expect("8 bytes"));
        if CRC64.checksum(body) != stored {
            return Err(Error::Checkpoint("checksum mismatch: file corrupt or truncated".into()));
        }

        let mut cur = Cursor::new(&body[12..]);
        let hlen = read_u64(&mut cur)? as usize;
        let mut json = vec![0u8; hlen];
        cur.read_exact(&mut json).map_err(short)?;
        let h: Header = serde_json::from_slice(&json).map_err(|e| Error::Checkpoint(format!("header decode: {e}")))?;
        let count = read_u64(&mut cur)? as usize;

        let mut params = ModelParams::zeros(&h.config);
        if params.param_count() != count {
            return Err(Error::Checkpoint(format!(
                "parameter count {count} does not match config ({})",
                params.param_count()
            )));
        }
        let mut blob = || -> Result<Vec<f64>> { (0..count).map(|_| read_f64(&mut cur)).collect() };
        let flat = blob()?;
        let m = blob()?;
        let v = blob()?;
        let best_flat = blob()?;
        params.set_from_flat(&flat)?;
        let mut best = ModelParams::zeros(&h.config);
        best.set_from_flat(&best_flat)?;

        let mut rng = ChaCha8Rng::from_seed(h.rng.seed);
        rng.set_stream(h.rng.stream);
        rng.set_word_pos(h.rng.word_pos);
        Ok(Self {
            adjacency: AdjacencyMatrix::from_edges(h.config.nodes, &h.edges)?,
            config: h.config,
            train_config: h.train_config,
            scaler: h.scaler,
            epoch: h.epoch,
            params,
            adam: AdamState {
                m,
                v,
                t: h.adam.t,
                lr: h.adam.lr,
                beta1: h.adam.beta1,
                beta2: h.adam.beta2,
                eps: h.adam.eps,
            },
            rng,
            best: BestSnapshot {
                epoch: h.best_epoch,
                val_rmse: h.best_val_rmse,
                params: best,
            },
            epochs_since_best: h.epochs_since_best,
        })
    }
}

fn short(_: std::io::Error) -> Error {
    Error::Checkpoint("unexpected end of checkpoint body".into())
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(short)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    read_u64(r).map(f64::from_bits)
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, ckpt.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::WindowedSample;
    use crate::graph::normalize_adjacency;
    use crate::model::Mvfn;
    use crate::train::{initial_checkpoint, train_step};
    use ndarray::Array3;
    use rand::Rng;

    fn sample_ckpt() -> Checkpoint {
        let mut cfg = MvfnConfig::new(3);
        cfg.seed = 8;
        let adj = AdjacencyMatrix::from_edges(3, &[(0, 2)]).unwrap();
        let scaler = ScalerStats {
            mean: vec![0.1 + 0.2, 1.0 / 3.0],
            std: vec![std::f64::consts::PI, 1e-8],
        };
        initial_checkpoint(cfg, TrainConfig::default(), adj, scaler).unwrap()
    }

    fn batch() -> Vec<WindowedSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        (0..3)
            .map(|i| WindowedSample {
                input: Array3::from_shape_fn((12, 3, 2), |_| rng.random_range(-1.0..1.0)),
                target: Array3::from_shape_fn((12, 3, 2), |_| rng.random_range(-1.0..1.0)),
                t0: i,
            })
            .collect()
    }

    fn step(c: &mut Checkpoint) {
        let model = Mvfn::new(c.config.clone(), normalize_adjacency(&c.adjacency)).unwrap();
        train_step(&model, &mut c.params, &mut c.adam, &batch(), None).unwrap();
        let _: u64 = c.rng.random();
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut c = sample_ckpt();
        step(&mut c);
        c.best.val_rmse = Some(0.1 + 0.7);
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back, c);
        let a: Vec<u64> = back.params.to_flat().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = c.params.to_flat().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
        let model = Mvfn::new(c.config.clone(), normalize_adjacency(&c.adjacency)).unwrap();
        let x = &batch()[0].input;
        assert_eq!(
            model.forward(&c.params, x).unwrap(),
            model.forward(&back.params, x).unwrap()
        );
    }

    #[test]
    fn file_round_trip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let c = sample_ckpt();
        save_checkpoint(&path, &c).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), c);

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 100]).unwrap();
        match load_checkpoint(&path) {
            Err(Error::Checkpoint(m)) => assert!(m.contains("checksum"), "{m}"),
            other => panic!("{other:?}"),
        }
        let mut flipped = bytes.clone();
        flipped[bytes.len() / 2] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn version_mismatch_is_reported() {
        let mut bytes = sample_ckpt().to_bytes().unwrap();
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        match Checkpoint::from_bytes(&bytes) {
            Err(Error::Checkpoint(m)) => assert!(m.contains("version"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn resume_after_one_step_matches_two_steps() {
        let mut straight = sample_ckpt();
        step(&mut straight);
        step(&mut straight);

        let mut first = sample_ckpt();
        step(&mut first);
        let mut resumed = Checkpoint::from_bytes(&first.to_bytes().unwrap()).unwrap();
        step(&mut resumed);
        for (a, b) in straight.params.to_flat().iter().zip(resumed.params.to_flat()) {
            assert!((a - b).abs() <= 1e-12);
        }
        assert_eq!(straight, resumed);
    }
}
