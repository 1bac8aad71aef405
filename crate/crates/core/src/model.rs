//! Layer and gradient data model: layer specs, layer filters, per-layer
//! compression plans and fused communication buffers.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::QuantParams;

/// Bytes per gradient element on the uncompressed path.
pub const ELEMENT_BYTES: usize = 4;

/// Default fused buffer capacity (64 MiB).
pub const DEFAULT_BUFFER_BYTES: usize = 64 << 20;

/// Layers below this many elements bypass compression by default.
pub const DEFAULT_MIN_COMPRESSED_ELEMENTS: usize = 4096;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("duplicate layer name `{0}`")]
    DuplicateLayer(String),
    #[error("layer `{0}` has zero elements")]
    EmptyLayer(String),
    #[error("bad layer filter pattern `{pattern}`: {source}")]
    BadPattern {
        pattern: String,
        #[source]
        source: regex::Error,
    },
    #[error("invalid compression plan: {0}")]
    InvalidPlan(String),
    #[error("gradient for `{layer}` has {actual} values, expected {expected}")]
    LengthMismatch { layer: String, expected: usize, actual: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Weight,
    Bias,
    Norm,
    Embedding,
    Other,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    #[serde(rename = "elements")]
    pub element_count: usize,
    pub kind: LayerKind,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, element_count: usize, kind: LayerKind) -> Self {
        Self { name: name.into(), element_count, kind }
    }
}

/// Checks name uniqueness and non-empty layers.
pub fn validate_layers(layers: &[LayerSpec]) -> Result<(), ModelError> {
    let mut seen = HashSet::new();
    for l in layers {
        if l.element_count == 0 {
            return Err(ModelError::EmptyLayer(l.name.clone()));
        }
        if !seen.insert(l.name.as_str()) {
            return Err(ModelError::DuplicateLayer(l.name.clone()));
        }
    }
    Ok(())
}

/// Parses a model spec file: a JSON array of `{name, elements, kind}`.
pub fn parse_model_spec(json: &str) -> Result<Vec<LayerSpec>, ModelError> {
    let layers: Vec<LayerSpec> = serde_json::from_str(json)?;
    validate_layers(&layers)?;
    Ok(layers)
}

pub fn load_model_spec(path: &Path) -> Result<Vec<LayerSpec>, ModelError> {
    parse_model_spec(&std::fs::read_to_string(path)?)
}

/// A layer's gradient for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientTensor {
    pub layer: LayerSpec,
    pub values: Vec<f32>,
}

impl GradientTensor {
    pub fn new(layer: LayerSpec, values: Vec<f32>) -> Result<Self, ModelError> {
        if values.len() != layer.element_count {
            return Err(ModelError::LengthMismatch {
                layer: layer.name.clone(),
                expected: layer.element_count,
                actual: values.len(),
            });
        }
        Ok(Self { layer, values })
    }

    pub fn name(&self) -> &str {
        &self.layer.name
    }
}

/// Rule set deciding which layers bypass compression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterRules {
    #[serde(default)]
    pub exclude_kinds: Vec<LayerKind>,
    #[serde(default)]
    pub min_elements: usize,
    #[serde(default)]
    pub name_patterns: Vec<String>,
}

impl FilterRules {
    /// Excludes nothing.
    pub fn none() -> Self {
        Self { exclude_kinds: Vec::new(), min_elements: 0, name_patterns: Vec::new() }
    }
}

impl Default for FilterRules {
    /// Bias and normalization layers plus anything under 4096 elements.
    fn default() -> Self {
        Self {
            exclude_kinds: vec![LayerKind::Bias, LayerKind::Norm],
            min_elements: DEFAULT_MIN_COMPRESSED_ELEMENTS,
            name_patterns: Vec::new(),
        }
    }
}

/// Compiled [`FilterRules`].
#[derive(Debug, Clone)]
pub struct LayerFilter {
    rules: FilterRules,
    patterns: Vec<Regex>,
}

impl LayerFilter {
    pub fn new(rules: FilterRules) -> Result<Self, ModelError> {
        let patterns = rules
            .name_patterns
            .iter()
            .map(|p| Regex::new(p).map_err(|source| ModelError::BadPattern { pattern: p.clone(), source }))
            .collect::<Result<_, _>>()?;
        Ok(Self { rules, patterns })
    }

    pub fn rules(&self) -> &FilterRules {
        &self.rules
    }

    /// True when the layer goes through the compressed path.
    pub fn is_compressed(&self, layer: &LayerSpec) -> bool {
        !(self.rules.exclude_kinds.contains(&layer.kind)
            || layer.element_count < self.rules.min_elements
            || self.patterns.iter().any(|p| p.is_match(&layer.name)))
    }

    /// Splits layers into (compressed, uncompressed), preserving order.
    pub fn filter_layers(&self, layers: &[LayerSpec]) -> (Vec<LayerSpec>, Vec<LayerSpec>) {
        layers.iter().cloned().partition(|l| self.is_compressed(l))
    }
}

impl Default for LayerFilter {
    fn default() -> Self {
        Self::new(FilterRules::default()).expect("default rules have no patterns")
    }
}

/// Convenience wrapper around [`LayerFilter::filter_layers`].
pub fn filter_layers(layers: &[LayerSpec], rules: &FilterRules) -> Result<(Vec<LayerSpec>, Vec<LayerSpec>), ModelError> {
    Ok(LayerFilter::new(rules.clone())?.filter_layers(layers))
}

/// How a layer is communicated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PlanMode {
    #[default]
    Quantize,
    /// Top-k sparsification; `k = ceil(density * elements)`.
    Topk { density: f64 },
    Uncompressed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub bits: u8,
    pub bucket: u32,
    #[serde(default)]
    pub mode: PlanMode,
}

impl PlanEntry {
    pub fn quantize(bits: u8, bucket: u32) -> Self {
        Self { bits, bucket, mode: PlanMode::Quantize }
    }

    pub fn uncompressed() -> Self {
        Self { bits: 32, bucket: 0, mode: PlanMode::Uncompressed }
    }

    pub fn quant_params(&self, seed: u64) -> Option<QuantParams> {
        match self.mode {
            PlanMode::Quantize => Some(QuantParams { bits: self.bits, bucket_size: self.bucket, seed }),
            _ => None,
        }
    }

    fn validate(&self, what: &str) -> Result<(), ModelError> {
        match self.mode {
            PlanMode::Quantize => {
                if !(1..=8).contains(&self.bits) || self.bucket == 0 {
                    return Err(ModelError::InvalidPlan(format!(
                        "{what}: bits {} / bucket {} out of range",
                        self.bits, self.bucket
                    )));
                }
            }
            PlanMode::Topk { density } => {
                if !(density > 0.0 && density <= 1.0) {
                    return Err(ModelError::InvalidPlan(format!("{what}: density {density} not in (0, 1]")));
                }
            }
            PlanMode::Uncompressed => {}
        }
        Ok(())
    }
}

/// Per-layer compression assignment with a default for unlisted layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionPlan {
    pub defaults: PlanEntry,
    #[serde(default)]
    pub layers: BTreeMap<String, PlanEntry>,
}

impl CompressionPlan {
    pub fn uniform(bits: u8, bucket: u32) -> Self {
        Self { defaults: PlanEntry::quantize(bits, bucket), layers: BTreeMap::new() }
    }

    pub fn lossless() -> Self {
        Self { defaults: PlanEntry::uncompressed(), layers: BTreeMap::new() }
    }

    pub fn resolve(&self, layer: &str) -> &PlanEntry {
        self.layers.get(layer).unwrap_or(&self.defaults)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.defaults.validate("defaults")?;
        for (name, e) in &self.layers {
            e.validate(name)?;
        }
        Ok(())
    }

    pub fn from_json(json: &str) -> Result<Self, ModelError> {
        let plan: Self = serde_json::from_str(json)?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }
}

impl Default for CompressionPlan {
    fn default() -> Self {
        Self::uniform(4, 128)
    }
}

/// One contiguous piece of a layer placed in a fused buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    /// Index of the layer in submission order.
    pub layer_index: usize,
    pub layer: String,
    /// Offset of this piece within the layer's gradient.
    pub layer_offset: usize,
    /// Offset of this piece within the fused buffer.
    pub buffer_offset: usize,
    pub len: usize,
}

/// A unit of communication made of consecutive layer segments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FusedBuffer {
    pub segments: Vec<Segment>,
    pub capacity_bytes: usize,
}

impl FusedBuffer {
    fn new(capacity_bytes: usize) -> Self {
        Self { segments: Vec::new(), capacity_bytes }
    }

    /// Total number of elements.
    pub fn len(&self) -> usize {
        self.segments.iter().map(|s| s.len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn total_bytes(&self) -> usize {
        self.len() * ELEMENT_BYTES
    }

    fn push(&mut self, layer_index: usize, layer: &str, layer_offset: usize, len: usize) {
        let buffer_offset = self.len();
        self.segments.push(Segment { layer_index, layer: layer.to_string(), layer_offset, buffer_offset, len });
    }

    /// Copies the buffer's segments out of per-layer gradients (indexed by layer index).
    pub fn gather(&self, grads: &[&[f32]]) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.len());
        for s in &self.segments {
            out.extend_from_slice(&grads[s.layer_index][s.layer_offset..s.layer_offset + s.len]);
        }
        out
    }

    /// Writes buffer contents back into per-layer outputs.
    pub fn scatter(&self, values: &[f32], outputs: &mut [Vec<f32>]) {
        for s in &self.segments {
            outputs[s.layer_index][s.layer_offset..s.layer_offset + s.len]
                .copy_from_slice(&values[s.buffer_offset..s.buffer_offset + s.len]);
        }
    }
}

/// Greedy packing of layers, in order, into buffers of `capacity_bytes`.
///
/// A layer that does not fit in the open buffer starts a new one; a layer
/// larger than the capacity is split across as many buffers as needed.
pub fn assemble_fused_buffers(layers: &[LayerSpec], capacity_bytes: usize) -> Vec<FusedBuffer> {
    let timed: Vec<(&LayerSpec, f64)> = layers.iter().map(|l| (l, 0.0)).collect();
    assemble_fused_buffers_timed(&timed, capacity_bytes, f64::INFINITY)
}

/// Like [`assemble_fused_buffers`], but also closes the open buffer when a
/// layer arrives `cycle_time` or more after the buffer was opened.
pub fn assemble_fused_buffers_timed(
    layers: &[(&LayerSpec, f64)],
    capacity_bytes: usize,
    cycle_time: f64,
) -> Vec<FusedBuffer> {
    let cap = (capacity_bytes / ELEMENT_BYTES).max(1);
    let mut out = Vec::new();
    let mut cur = FusedBuffer::new(capacity_bytes);
    let mut opened_at = 0.0;
    for (index, (layer, at)) in layers.iter().enumerate() {
        if !cur.is_empty() && at - opened_at >= cycle_time {
            out.push(std::mem::replace(&mut cur, FusedBuffer::new(capacity_bytes)));
        }
        let mut remaining = layer.element_count;
        let mut offset = 0;
        while remaining > 0 {
            if cur.is_empty() {
                opened_at = *at;
            }
            let free = cap - cur.len();
            if remaining <= free {
                cur.push(index, &layer.name, offset, remaining);
                break;
            }
            if cur.is_empty() {
                cur.push(index, &layer.name, offset, cap);
                offset += cap;
                remaining -= cap;
            }
            out.push(std::mem::replace(&mut cur, FusedBuffer::new(capacity_bytes)));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}
