//! Temporal encodings of the cardiac frame index.
//!
//! The default is a periodic Gaussian kernel over the cyclic frame distance
//! `d(n, tau) = min(|n - tau|, N - |n - tau|)`, which ties the first and
//! last frames of a cycle together. One-hot and the non-periodic Gaussian
//! are kept as ablation baselines.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::sync::Mutex;

/// Encoding variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncodingMode {
    PeriodicGaussian,
    Gaussian,
    OneHot,
}

impl std::str::FromStr for EncodingMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "periodic-gaussian" => Ok(EncodingMode::PeriodicGaussian),
            "gaussian" => Ok(EncodingMode::Gaussian),
            "one-hot" => Ok(EncodingMode::OneHot),
            other => Err(Error::Config(format!("unknown temporal mode `{other}`"))),
        }
    }
}

/// N-dimensional encoding of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalEncoding {
    pub values: Vec<f64>,
    pub tau: usize,
    pub sigma: f64,
    pub mode: EncodingMode,
}

/// Cyclic frame distance with period `n_frames`.
pub fn cyclic_distance(n: i64, tau: i64, n_frames: i64) -> f64 {
    let d = (n - tau).abs() % n_frames;
    d.min(n_frames - d) as f64
}

/// Encodes frame `tau` (1-based, wrapped modulo `n_frames`) into an
/// `n_frames`-dimensional vector.
pub fn encode(tau: usize, n_frames: usize, sigma: f64, mode: EncodingMode) -> Result<TemporalEncoding> {
    if n_frames == 0 {
        return Err(Error::Config("frame count must be positive".into()));
    }
    if tau < 1 {
        return Err(Error::Config("frame index is 1-based".into()));
    }
    if mode != EncodingMode::OneHot && sigma <= 0.0 {
        return Err(Error::Config(format!("sigma must be positive, got {sigma}")));
    }
    // Frames beyond the cycle wrap: tau and tau + N encode identically.
    let tau_wrapped = (tau - 1) % n_frames + 1;
    let norm = 1.0 / ((2.0 * std::f64::consts::PI).sqrt() * sigma);
    let values = (1..=n_frames)
        .map(|n| match mode {
            EncodingMode::OneHot => {
                if n == tau_wrapped {
                    1.0
                } else {
                    0.0
                }
            }
            EncodingMode::Gaussian => {
                let d = (n as f64 - tau_wrapped as f64).abs();
                norm * (-d * d / (2.0 * sigma * sigma)).exp()
            }
            EncodingMode::PeriodicGaussian => {
                let d = cyclic_distance(n as i64, tau_wrapped as i64, n_frames as i64);
                norm * (-d * d / (2.0 * sigma * sigma)).exp()
            }
        })
        .collect();
    Ok(TemporalEncoding {
        values,
        tau: tau_wrapped,
        sigma,
        mode,
    })
}

/// Cache of all N rows for one `(N, sigma, mode)` setting; the vectors are
/// tiny and deterministic.
pub struct EncodingTable {
    pub n_frames: usize,
    pub sigma: f64,
    pub mode: EncodingMode,
    rows: Mutex<HashMap<usize, Vec<f64>>>,
}

impl EncodingTable {
    pub fn new(n_frames: usize, sigma: f64, mode: EncodingMode) -> EncodingTable {
        EncodingTable {
            n_frames,
            sigma,
            mode,
            rows: Mutex::new(HashMap::new()),
        }
    }

    pub fn row(&self, tau: usize) -> Result<Vec<f64>> {
        let key = (tau - 1) % self.n_frames + 1;
        let mut rows = self.rows.lock().unwrap();
        if let Some(v) = rows.get(&key) {
            return Ok(v.clone());
        }
        let enc = encode(key, self.n_frames, self.sigma, self.mode)?;
        rows.insert(key, enc.values.clone());
        Ok(enc.values)
    }
}
