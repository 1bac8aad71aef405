//! Synthetic transformer-like layer statistics.
//!
//! A couple of huge embedding tables with weak, row-sparse gradients, a stack
//! of medium attention/feed-forward blocks, and many tiny bias and norm
//! layers with comparatively strong gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::stats::LayerStats;
use crate::codec::rng;
use crate::model::{LayerKind, LayerSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticLayer {
    pub spec: LayerSpec,
    /// Target l2 norm of the gradient snapshot.
    pub norm: f64,
    /// Fraction of rows (of `row` elements) with nonzero gradient.
    pub row_density: f64,
    pub row: usize,
}

fn layer(name: String, size: usize, kind: LayerKind, norm: f64) -> SyntheticLayer {
    SyntheticLayer { spec: LayerSpec::new(name, size, kind), norm, row_density: 1.0, row: size.max(1) }
}

pub fn transformer_like_layers() -> Vec<SyntheticLayer> {
    let dim = 256;
    let vocab = 8192;
    let mut out = vec![SyntheticLayer {
        spec: LayerSpec::new("embed.tokens", vocab * dim, LayerKind::Embedding),
        norm: 0.25,
        row_density: 0.1,
        row: dim,
    }];
    for b in 0..4 {
        let depth = 1.0 + 0.15 * b as f64;
        for (part, size) in [("attn.qkv", 3 * dim * dim), ("attn.out", dim * dim), ("ff.in", 2 * dim * dim), ("ff.out", 2 * dim * dim)] {
            out.push(layer(format!("block{b}.{part}.weight"), size, LayerKind::Weight, 1.0));
        }
        for (part, size) in [("attn.qkv", 3 * dim), ("attn.out", dim), ("ff.in", 2 * dim), ("ff.out", dim)] {
            out.push(layer(format!("block{b}.{part}.bias"), size, LayerKind::Bias, 1.2 * depth));
        }
        for part in ["ln1", "ln2"] {
            out.push(layer(format!("block{b}.{part}.weight"), dim, LayerKind::Norm, 1.5 * depth));
        }
    }
    out.push(SyntheticLayer {
        spec: LayerSpec::new("head.weight", vocab * dim, LayerKind::Embedding),
        norm: 0.25,
        row_density: 0.1,
        row: dim,
    });
    out.push(layer("head.bias".into(), vocab, LayerKind::Bias, 0.6));
    out
}

/// One snapshot per synthetic layer, scaled to the layer's target norm.
pub fn transformer_like_stats(seed: u64, top_fraction: f64) -> Vec<LayerStats> {
    transformer_like_layers()
        .into_iter()
        .enumerate()
        .map(|(i, l)| {
            let mut rng = ChaCha8Rng::seed_from_u64(rng::derive_seed(seed, &[i as u64]));
            let mut v = vec![0.0f64; l.spec.element_count];
            for row in v.chunks_mut(l.row) {
                if l.row_density >= 1.0 || rng.gen::<f64>() < l.row_density {
                    row.iter_mut().for_each(|x| *x = StandardNormal.sample(&mut rng));
                }
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let scale = if n > 0.0 { l.norm / n } else { 0.0 };
            LayerStats::from_snapshot(l.spec.name, v.iter().map(|x| (x * scale) as f32).collect(), 1, top_fraction)
        })
        .collect()
}
