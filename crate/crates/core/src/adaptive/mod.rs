//! Layer-wise adaptive bit-width assignment.
//!
//! Planners map per-layer gradient statistics to a per-layer bit-width drawn
//! from a palette, subject to the budget: total quantization error on the
//! statistics snapshot must not exceed `alpha * E4`, where E4 is the error
//! with every layer at 4 bits.

mod kmeans;
mod stats;
mod synthetic;

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::CodecError;
use crate::model::{CompressionPlan, PlanEntry};

pub use kmeans::{kmeans, Clustering, MAX_ITERATIONS, RESTARTS, SHIFT_TOLERANCE};
pub use stats::{
    baseline_error_e4, collect_stats, layer_error_sq, read_stats, top_fraction_norm, uniform_error, write_stats, LayerStats, StatsCollector,
    StatsEntry, ERROR_SEED,
};
pub use synthetic::{transformer_like_layers, transformer_like_stats, SyntheticLayer};

/// Buckets paired with palette positions when bucket mapping is enabled.
pub const MAPPED_BUCKETS: [u32; 6] = [1024, 512, 256, 128, 128, 128];

#[derive(Debug, Error)]
pub enum AdaptiveError {
    #[error("invalid adaptive config: {0}")]
    InvalidConfig(String),
    #[error("no layer statistics to plan from")]
    EmptyStats,
    #[error("statistics window is empty")]
    EmptyWindow,
    #[error("layer layout changed at step {step} of the statistics window")]
    LayoutChanged { step: usize },
    #[error("stats file: {0}")]
    StatsFile(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlannerKind {
    Kmeans,
    Linear,
}

impl std::str::FromStr for PlannerKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "kmeans" => Ok(PlannerKind::Kmeans),
            "linear" => Ok(PlannerKind::Linear),
            _ => Err(format!("unknown planner `{s}` (expected kmeans or linear)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptiveConfig {
    pub palette: Vec<u8>,
    pub alpha: f64,
    /// Cluster count; defaults to the palette size.
    pub k: Option<usize>,
    pub stats_period: usize,
    pub stats_window: usize,
    pub top_fraction: f64,
    pub bucket: u32,
    /// Pair ascending bits with [`MAPPED_BUCKETS`] instead of a fixed bucket.
    pub map_buckets: bool,
    pub planner: PlannerKind,
    pub seed: u64,
}

impl Default for AdaptiveConfig {
    fn default() -> Self {
        Self {
            palette: vec![2, 3, 4, 5, 6, 8],
            alpha: 1.0,
            k: None,
            stats_period: 1000,
            stats_window: 50,
            top_fraction: 0.01,
            bucket: 128,
            map_buckets: false,
            planner: PlannerKind::Kmeans,
            seed: 0,
        }
    }
}

impl AdaptiveConfig {
    pub fn validate(&self) -> Result<(), AdaptiveError> {
        let bad = |m: String| Err(AdaptiveError::InvalidConfig(m));
        if self.palette.is_empty() {
            return bad("palette is empty".into());
        }
        if self.palette.windows(2).any(|w| w[0] >= w[1]) || self.palette.iter().any(|b| !(1..=8).contains(b)) {
            return bad(format!("palette {:?} must be strictly ascending within 1..=8", self.palette));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha {} must be positive", self.alpha));
        }
        if let Some(k) = self.k {
            if k == 0 || k > self.palette.len() {
                return bad(format!("k = {k} must be in 1..={}", self.palette.len()));
            }
        }
        if self.stats_window == 0 || self.stats_period < self.stats_window {
            return bad(format!("need 1 <= stats_window ({}) <= stats_period ({})", self.stats_window, self.stats_period));
        }
        if !(self.top_fraction > 0.0 && self.top_fraction <= 1.0) {
            return bad(format!("top fraction {} not in (0, 1]", self.top_fraction));
        }
        if self.bucket == 0 {
            return bad("bucket must be positive".into());
        }
        Ok(())
    }

    fn bucket_for(&self, palette_index: usize) -> u32 {
        if self.map_buckets {
            MAPPED_BUCKETS.get(palette_index).copied().unwrap_or(128)
        } else {
            self.bucket
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerAssignment {
    pub name: String,
    pub size: usize,
    pub bits: u8,
    pub bucket: u32,
    /// Cluster rank (k-means) or averaged sort rank (linear).
    pub group: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptivePlan {
    pub planner: PlannerKind,
    pub plan: CompressionPlan,
    pub layers: Vec<LayerAssignment>,
    /// Measured error of the plan on the stats snapshot.
    pub error: f64,
    pub e4: f64,
    pub budget: f64,
    /// False only when every layer sits at the top of the palette and the
    /// budget still does not hold.
    pub within_budget: bool,
    pub promotions: u32,
    pub groups: usize,
}

impl AdaptivePlan {
    /// `sum(bits * size)` over planned layers.
    pub fn weighted_size(&self) -> f64 {
        self.layers.iter().map(|l| l.bits as f64 * l.size as f64).sum()
    }

    /// Uniform 4-bit weighted size over this plan's weighted size.
    pub fn size_reduction(&self) -> f64 {
        let four: f64 = self.layers.iter().map(|l| 4.0 * l.size as f64).sum();
        if four == 0.0 {
            1.0
        } else {
            four / self.weighted_size()
        }
    }
}

struct ErrorModel<'a> {
    stats: &'a [LayerStats],
    cache: HashMap<(usize, u8, u32), f64>,
}

impl<'a> ErrorModel<'a> {
    fn new(stats: &'a [LayerStats]) -> Self {
        Self { stats, cache: HashMap::new() }
    }

    fn total(&mut self, assignment: &[(u8, u32)]) -> Result<f64, AdaptiveError> {
        let mut sum = 0.0;
        for (i, &(bits, bucket)) in assignment.iter().enumerate() {
            let e = match self.cache.get(&(i, bits, bucket)) {
                Some(&e) => e,
                None => {
                    let e = layer_error_sq(&self.stats[i], bits, bucket)?;
                    self.cache.insert((i, bits, bucket), e);
                    e
                }
            };
            sum += e;
        }
        Ok(sum.sqrt())
    }
}

/// Palette position for rank `r` of `groups`, spread linearly.
fn palette_index(rank: f64, groups: usize, palette_len: usize) -> usize {
    if groups <= 1 {
        (palette_len - 1) / 2
    } else {
        (rank * (palette_len - 1) as f64 / (groups - 1) as f64).round() as usize
    }
}

/// Measures the plan, then promotes every layer one palette step at a time
/// until the error fits `alpha * E4` or nothing can be promoted.
fn finish_plan(
    planner: PlannerKind,
    stats: &[LayerStats],
    config: &AdaptiveConfig,
    mut positions: Vec<usize>,
    groups: Vec<f64>,
    group_count: usize,
) -> Result<AdaptivePlan, AdaptiveError> {
    let mut model = ErrorModel::new(stats);
    let top = config.palette.len() - 1;
    let e4 = model.total(&vec![(4, config.bucket); stats.len()])?;
    let budget = config.alpha * e4;
    let resolve = |pos: &[usize]| -> Vec<(u8, u32)> { pos.iter().map(|&p| (config.palette[p], config.bucket_for(p))).collect() };

    let mut promotions = 0;
    let mut error = model.total(&resolve(&positions))?;
    while error > budget && positions.iter().any(|&p| p < top) {
        positions.iter_mut().for_each(|p| *p = (*p + 1).min(top));
        promotions += 1;
        error = model.total(&resolve(&positions))?;
    }

    let mut layers_map = BTreeMap::new();
    let layers: Vec<LayerAssignment> = stats
        .iter()
        .zip(resolve(&positions))
        .zip(groups)
        .map(|((s, (bits, bucket)), group)| {
            layers_map.insert(s.name.clone(), PlanEntry::quantize(bits, bucket));
            LayerAssignment { name: s.name.clone(), size: s.size(), bits, bucket, group }
        })
        .collect();
    Ok(AdaptivePlan {
        planner,
        plan: CompressionPlan { defaults: PlanEntry::quantize(4, config.bucket), layers: layers_map },
        layers,
        error,
        e4,
        budget,
        within_budget: error <= budget,
        promotions,
        groups: group_count,
    })
}

/// Sorts layers by norm/size and spreads the palette linearly over the
/// ranks. Layers with equal ratios share their averaged rank.
pub fn plan_linear(stats: &[LayerStats], config: &AdaptiveConfig) -> Result<AdaptivePlan, AdaptiveError> {
    config.validate()?;
    if stats.is_empty() {
        return Err(AdaptiveError::EmptyStats);
    }
    let ratio = |s: &LayerStats| if s.size() == 0 { 0.0 } else { s.norm / s.size() as f64 };
    let mut order: Vec<usize> = (0..stats.len()).collect();
    order.sort_by(|&a, &b| ratio(&stats[a]).total_cmp(&ratio(&stats[b])).then_with(|| stats[a].name.cmp(&stats[b].name)));

    let mut ranks = vec![0.0; stats.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && ratio(&stats[order[j + 1]]) == ratio(&stats[order[i]]) {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        order[i..=j].iter().for_each(|&l| ranks[l] = avg);
        i = j + 1;
    }
    let n = stats.len();
    let positions = ranks.iter().map(|&r| palette_index(r, n, config.palette.len())).collect();
    finish_plan(PlannerKind::Linear, stats, config, positions, ranks, n)
}

/// Clustering features: z-normalized (log2 size, log2 top-fraction norm).
pub fn kmeans_features(stats: &[LayerStats]) -> Vec<[f64; 2]> {
    let raw: Vec<[f64; 2]> = stats.iter().map(|s| [(s.size().max(1) as f64).log2(), s.top_norm.max(1e-12).log2()]).collect();
    let n = raw.len() as f64;
    let mut out = raw.clone();
    for d in 0..2 {
        let mean = raw.iter().map(|p| p[d]).sum::<f64>() / n;
        let std = (raw.iter().map(|p| (p[d] - mean).powi(2)).sum::<f64>() / n).sqrt();
        for (o, p) in out.iter_mut().zip(&raw) {
            o[d] = if std > 0.0 { (p[d] - mean) / std } else { 0.0 };
        }
    }
    out
}

/// Clusters layers on (size, gradient norm) and assigns higher bit-widths to
/// clusters whose normalized norm exceeds their normalized size the most.
pub fn plan_kmeans(stats: &[LayerStats], config: &AdaptiveConfig) -> Result<AdaptivePlan, AdaptiveError> {
    config.validate()?;
    if stats.is_empty() {
        return Err(AdaptiveError::EmptyStats);
    }
    // cluster in name order so the plan does not depend on input order
    let mut by_name: Vec<usize> = (0..stats.len()).collect();
    by_name.sort_by(|&a, &b| stats[a].name.cmp(&stats[b].name));
    let feats = kmeans_features(stats);
    let sorted: Vec<[f64; 2]> = by_name.iter().map(|&i| feats[i]).collect();
    let k = config.k.unwrap_or(config.palette.len()).min(stats.len());
    let mut clustering = kmeans(&sorted, k, config.seed);
    let mut assignment = vec![0; stats.len()];
    by_name.iter().zip(&clustering.assignment).for_each(|(&i, &c)| assignment[i] = c);
    clustering.assignment = assignment;
    let groups = clustering.centroids.len();

    let mut order: Vec<usize> = (0..groups).collect();
    // scores equal up to rounding count as ties; the larger cluster ranks lower
    let score = |c: usize| ((clustering.centroids[c][1] - clustering.centroids[c][0]) * 1e9).round();
    let size = |c: usize| clustering.centroids[c][0];
    order.sort_by(|&a, &b| score(a).total_cmp(&score(b)).then(size(b).total_cmp(&size(a))).then(a.cmp(&b)));
    let mut rank = vec![0; groups];
    order.iter().enumerate().for_each(|(r, &c)| rank[c] = r);

    let ranks: Vec<f64> = clustering.assignment.iter().map(|&c| rank[c] as f64).collect();
    let positions = ranks.iter().map(|&r| palette_index(r, groups, config.palette.len())).collect();
    finish_plan(PlannerKind::Kmeans, stats, config, positions, ranks, groups)
}

pub fn plan(stats: &[LayerStats], config: &AdaptiveConfig) -> Result<AdaptivePlan, AdaptiveError> {
    match config.planner {
        PlannerKind::Kmeans => plan_kmeans(stats, config),
        PlannerKind::Linear => plan_linear(stats, config),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(name: &str, size: usize, norm: f64, seed: u64) -> LayerStats {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..size).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        LayerStats::from_snapshot(name, v.iter().map(|x| (x * norm / n) as f32).collect(), 1, 0.01)
    }

    fn cfg(palette: &[u8]) -> AdaptiveConfig {
        AdaptiveConfig { palette: palette.to_vec(), ..Default::default() }
    }

    fn bits(p: &AdaptivePlan) -> Vec<u8> {
        p.layers.iter().map(|l| l.bits).collect()
    }

    #[test]
    fn kmeans_plan_ignores_input_order() {
        let stats = super::synthetic::transformer_like_stats(3, 0.01);
        let config = AdaptiveConfig::default();
        let a = plan_kmeans(&stats, &config).unwrap();
        let mut rev = stats.clone();
        rev.reverse();
        let b = plan_kmeans(&rev, &config).unwrap();
        assert_eq!(a.plan, b.plan);
    }

    #[test]
    fn config_validation() {
        assert!(AdaptiveConfig::default().validate().is_ok());
        for bad in [
            AdaptiveConfig { palette: vec![], ..Default::default() },
            AdaptiveConfig { palette: vec![4, 2], ..Default::default() },
            AdaptiveConfig { palette: vec![0, 2], ..Default::default() },
            AdaptiveConfig { alpha: 0.0, ..Default::default() },
            AdaptiveConfig { k: Some(7), ..Default::default() },
            AdaptiveConfig { stats_window: 10, stats_period: 5, ..Default::default() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn linear_single_layer_gets_middle() {
        let stats = vec![gaussian("w", 1000, 1.0, 0)];
        let p = plan_linear(&stats, &AdaptiveConfig { alpha: 100.0, ..Default::default() }).unwrap();
        assert_eq!(bits(&p), vec![4]);
    }

    #[test]
    fn linear_spreads_palette_over_ranks() {
        // increasing norm/size ratio with layer index
        let stats: Vec<_> = (0..6).map(|i| gaussian(&format!("l{i}"), 512, 1.0 + i as f64, i)).collect();
        let p = plan_linear(&stats, &AdaptiveConfig { alpha: 100.0, ..Default::default() }).unwrap();
        assert_eq!(bits(&p), vec![2, 3, 4, 5, 6, 8]);
    }

    #[test]
    fn linear_ties_share_bits() {
        let a = gaussian("a", 512, 1.0, 3);
        let b = LayerStats { name: "b".into(), ..a.clone() };
        let stats = vec![a, b, gaussian("c", 512, 9.0, 4)];
        let p = plan_linear(&stats, &AdaptiveConfig { alpha: 100.0, ..Default::default() }).unwrap();
        assert_eq!(p.layers[0].bits, p.layers[1].bits);
    }

    #[test]
    fn kmeans_three_singletons() {
        let stats = vec![gaussian("emb", 1_000_000, 0.1, 1), gaussian("mid", 10_000, 1.0, 2), gaussian("small", 100, 5.0, 3)];
        let config = AdaptiveConfig { palette: vec![2, 4, 8], k: Some(3), alpha: 100.0, ..Default::default() };
        let p = plan_kmeans(&stats, &config).unwrap();
        assert_eq!(p.groups, 3);
        assert_eq!(bits(&p), vec![2, 4, 8]);
        assert_eq!(p.promotions, 0);
    }

    #[test]
    fn kmeans_identical_layers_collapse() {
        let a = gaussian("a", 4096, 1.0, 7);
        let stats: Vec<_> = (0..5).map(|i| LayerStats { name: format!("l{i}"), ..a.clone() }).collect();
        let p = plan_kmeans(&stats, &AdaptiveConfig::default()).unwrap();
        assert_eq!(p.groups, 1);
        assert_eq!(bits(&p), vec![4; 5]);
        assert!(p.within_budget);
        assert_eq!(p.error, p.e4);
    }

    #[test]
    fn budget_repair_promotes() {
        // the big layer carries most of the error, so 2 bits on it breaks the budget
        let stats = vec![gaussian("emb", 200_000, 10.0, 1), gaussian("mid", 5_000, 1.0, 2), gaussian("small", 200, 1.0, 3)];
        let config = AdaptiveConfig { palette: vec![2, 4, 8], k: Some(3), ..Default::default() };
        let p = plan_kmeans(&stats, &config).unwrap();
        assert!(p.promotions > 0);
        assert!(p.within_budget && p.error <= p.budget);
        let raw = AdaptiveConfig { alpha: 1e9, ..config };
        let unrepaired = plan_kmeans(&stats, &raw).unwrap();
        assert!(unrepaired.error > p.budget);
    }

    #[test]
    fn singleton_palette_is_static() {
        let stats: Vec<_> = (0..4).map(|i| gaussian(&format!("l{i}"), 300 * (i + 1), 1.0 + i as f64, i as u64)).collect();
        for p in [plan_kmeans(&stats, &cfg(&[4])).unwrap(), plan_linear(&stats, &cfg(&[4])).unwrap()] {
            assert_eq!(bits(&p), vec![4; 4]);
            assert_eq!(p.error, p.e4);
            assert!(p.within_budget);
        }
    }

    #[test]
    fn budget_unreachable_reports_warning() {
        let stats = vec![gaussian("a", 1000, 1.0, 0)];
        let p = plan_kmeans(&stats, &AdaptiveConfig { palette: vec![2, 3], ..Default::default() }).unwrap();
        assert!(!p.within_budget);
        assert_eq!(bits(&p), vec![3]);
    }

    #[test]
    fn empty_stats_rejected() {
        assert!(matches!(plan_kmeans(&[], &AdaptiveConfig::default()), Err(AdaptiveError::EmptyStats)));
        assert!(matches!(plan_linear(&[], &AdaptiveConfig::default()), Err(AdaptiveError::EmptyStats)));
    }

    #[test]
    fn bucket_mapping() {
        let stats = vec![gaussian("emb", 100_000, 0.1, 1), gaussian("small", 100, 5.0, 3)];
        let config = AdaptiveConfig { palette: vec![2, 8], map_buckets: true, alpha: 100.0, ..Default::default() };
        let p = plan_kmeans(&stats, &config).unwrap();
        assert_eq!((p.layers[0].bits, p.layers[0].bucket), (2, 1024));
        assert_eq!((p.layers[1].bits, p.layers[1].bucket), (8, 512));
    }
}
