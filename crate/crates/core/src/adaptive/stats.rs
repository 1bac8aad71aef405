//! Per-layer gradient statistics and quantization-error measurement.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::AdaptiveError;
use crate::codec::{quantize, rng, QuantParams};
use crate::model::GradientTensor;

/// Seed for the quantization draws used when measuring plan error.
pub const ERROR_SEED: u64 = 0x5eed_e4e4;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerStats {
    pub name: String,
    /// Elementwise sum of the gradients over the window.
    pub snapshot: Vec<f32>,
    pub window: usize,
    pub norm: f64,
    /// l2 norm of the largest `ceil(q * size)` magnitudes.
    pub top_norm: f64,
}

impl LayerStats {
    pub fn from_snapshot(name: impl Into<String>, snapshot: Vec<f32>, window: usize, top_fraction: f64) -> Self {
        let norm = snapshot.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        let top_norm = top_fraction_norm(&snapshot, top_fraction);
        Self { name: name.into(), snapshot, window, norm, top_norm }
    }

    pub fn size(&self) -> usize {
        self.snapshot.len()
    }

    /// Hex SHA-256 of the snapshot as little-endian f32.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for x in &self.snapshot {
            h.update(x.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

pub fn top_fraction_norm(v: &[f32], q: f64) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let k = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    let mut mags: Vec<f64> = v.iter().map(|&x| (x as f64).abs()).collect();
    mags.select_nth_unstable_by(k - 1, |a, b| b.total_cmp(a));
    mags[..k].iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Sums gradients per layer over a window of steps.
#[derive(Debug, Clone)]
pub struct StatsCollector {
    top_fraction: f64,
    names: Vec<String>,
    sums: Vec<Vec<f64>>,
    steps: usize,
}

impl StatsCollector {
    pub fn new(top_fraction: f64) -> Self {
        Self { top_fraction, names: Vec::new(), sums: Vec::new(), steps: 0 }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Adds one step. The layer list must match the first step exactly.
    pub fn observe(&mut self, grads: &[GradientTensor]) -> Result<(), AdaptiveError> {
        if self.steps == 0 {
            self.names = grads.iter().map(|g| g.name().to_string()).collect();
            self.sums = grads.iter().map(|g| vec![0.0; g.values.len()]).collect();
        } else {
            let same = grads.len() == self.names.len()
                && grads.iter().zip(&self.names).zip(&self.sums).all(|((g, n), s)| g.name() == n && g.values.len() == s.len());
            if !same {
                return Err(AdaptiveError::LayoutChanged { step: self.steps });
            }
        }
        for (sum, g) in self.sums.iter_mut().zip(grads) {
            sum.iter_mut().zip(&g.values).for_each(|(s, &x)| *s += x as f64);
        }
        self.steps += 1;
        Ok(())
    }

    pub fn finish(&self) -> Result<Vec<LayerStats>, AdaptiveError> {
        if self.steps == 0 {
            return Err(AdaptiveError::EmptyWindow);
        }
        Ok(self
            .names
            .iter()
            .zip(&self.sums)
            .map(|(name, s)| LayerStats::from_snapshot(name.clone(), s.iter().map(|&x| x as f32).collect(), self.steps, self.top_fraction))
            .collect())
    }
}

/// Accumulates a window of per-step gradients into per-layer statistics.
pub fn collect_stats<'a>(steps: impl IntoIterator<Item = &'a [GradientTensor]>, top_fraction: f64) -> Result<Vec<LayerStats>, AdaptiveError> {
    let mut c = StatsCollector::new(top_fraction);
    for step in steps {
        c.observe(step)?;
    }
    c.finish()
}

fn name_key(name: &str) -> u64 {
    let d = Sha256::digest(name.as_bytes());
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

/// Squared l2 error of one quantize/dequantize pass over the snapshot.
pub fn layer_error_sq(stats: &LayerStats, bits: u8, bucket: u32) -> Result<f64, AdaptiveError> {
    let seed = rng::derive_seed(ERROR_SEED, &[name_key(&stats.name)]);
    let params = QuantParams::new(bits, bucket, seed)?;
    let mut out = vec![0.0f32; stats.size()];
    quantize(&stats.snapshot, &params)?.dequantize_into(&mut out)?;
    Ok(stats.snapshot.iter().zip(&out).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum())
}

/// Total error when every layer is quantized at `bits`.
pub fn uniform_error(stats: &[LayerStats], bits: u8, bucket: u32) -> Result<f64, AdaptiveError> {
    let mut total = 0.0;
    for s in stats {
        total += layer_error_sq(s, bits, bucket)?;
    }
    Ok(total.sqrt())
}

/// The 4-bit baseline error that plans are budgeted against.
pub fn baseline_error_e4(stats: &[LayerStats], bucket: u32) -> Result<f64, AdaptiveError> {
    uniform_error(stats, 4, bucket)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsEntry {
    pub size: usize,
    pub norm: f64,
    pub top_norm: f64,
    pub snapshot_digest: String,
    #[serde(default = "one")]
    pub window: usize,
}

fn one() -> usize {
    1
}

/// Writes the stats JSON and, alongside, the raw snapshots (f32 LE, layers
/// in name order).
pub fn write_stats(json_path: &Path, bin_path: &Path, stats: &[LayerStats]) -> Result<(), AdaptiveError> {
    let mut sorted: Vec<&LayerStats> = stats.iter().collect();
    sorted.sort_by(|a, b| a.name.cmp(&b.name));
    let map: BTreeMap<&str, StatsEntry> = sorted
        .iter()
        .map(|s| {
            let e = StatsEntry { size: s.size(), norm: s.norm, top_norm: s.top_norm, snapshot_digest: s.digest(), window: s.window };
            (s.name.as_str(), e)
        })
        .collect();
    fs::write(json_path, serde_json::to_string_pretty(&map)?)?;
    let mut bin = Vec::new();
    for s in sorted {
        s.snapshot.iter().for_each(|x| bin.extend_from_slice(&x.to_le_bytes()));
    }
    fs::write(bin_path, bin)?;
    Ok(())
}

pub fn read_stats(json_path: &Path, bin_path: &Path) -> Result<Vec<LayerStats>, AdaptiveError> {
    let map: BTreeMap<String, StatsEntry> = serde_json::from_str(&fs::read_to_string(json_path)?)?;
    let bin = fs::read(bin_path)?;
    let expected: usize = map.values().map(|e| e.size * 4).sum();
    if bin.len() != expected {
        return Err(AdaptiveError::StatsFile(format!("snapshot file has {} bytes, expected {expected}", bin.len())));
    }
    let mut at = 0;
    let mut out = Vec::with_capacity(map.len());
    for (name, e) in map {
        let snapshot = bin[at..at + 4 * e.size].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        at += 4 * e.size;
        let s = LayerStats { name, snapshot, window: e.window, norm: e.norm, top_norm: e.top_norm };
        if s.digest() != e.snapshot_digest {
            return Err(AdaptiveError::StatsFile(format!("snapshot digest mismatch for layer `{}`", s.name)));
        }
        out.push(s);
    }
    Ok(out)
}
