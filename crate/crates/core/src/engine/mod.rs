//! Per-node communication engine and the data-parallel trainer built on it.
//!
//! Nodes submit per-layer gradients, then flush. When the last node flushes,
//! the step runs: layers are packed into fused buffers (closed at `B` bytes
//! or after the cycle time `C`), each buffer is reduced with a per-segment
//! codec chosen by the layer filter and the active plan, and every node gets
//! back the averaged gradients in submission order.

mod events;
mod tasks;
mod train;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adaptive::{AdaptiveConfig, AdaptiveError};
use crate::codec::{k_for_density, rng, topk_compress, topk_decompress, CodecError, ErrorFeedbackState};
use crate::collectives::{allreduce, BufferLayout, CollectiveError, ReduceOp, SegmentCodec, Topology};
use crate::model::{
    assemble_fused_buffers_timed, CompressionPlan, FilterRules, GradientTensor, LayerFilter, LayerSpec, ModelError, PlanEntry, PlanMode,
    DEFAULT_BUFFER_BYTES,
};
use crate::simnet::{SimError, SimNet, SimNetConfig, StepTrace};

pub use events::{Event, EventLog};
pub use tasks::{Batch, Dataset, DatasetSpec, Model, ModelSpec, Sgd, TrainTask};
pub use train::{collect_training_stats, params_hash, reference_sgd, run_adaptive_training, train, EvalPoint, TrainReport};

/// Default cycle time: 5 ms of virtual time.
pub const DEFAULT_CYCLE_TIME_S: f64 = 5e-3;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid engine config: {0}")]
    Config(String),
    #[error("node {node} out of range for {nodes} nodes")]
    BadNode { node: usize, nodes: usize },
    #[error("ordering error: node {node} {what}")]
    Ordering { node: usize, what: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Collective(#[from] CollectiveError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Adaptive(#[from] AdaptiveError),
}

/// Where the compression plan comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlanSource {
    Static(CompressionPlan),
    Adaptive(AdaptiveConfig),
}

impl Default for PlanSource {
    fn default() -> Self {
        PlanSource::Static(CompressionPlan::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    /// Fused buffer capacity in bytes.
    pub buffer_bytes: usize,
    /// Virtual seconds after which an open buffer is closed.
    pub cycle_time_s: f64,
    pub topology: Topology,
    pub plan: PlanSource,
    pub filter: FilterRules,
    pub net: SimNetConfig,
    pub seed: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            buffer_bytes: DEFAULT_BUFFER_BYTES,
            cycle_time_s: DEFAULT_CYCLE_TIME_S,
            topology: Topology::Sra,
            plan: PlanSource::default(),
            filter: FilterRules::default(),
            net: SimNetConfig::commodity(8),
            seed: 0,
        }
    }
}

impl EngineConfig {
    pub fn nodes(&self) -> usize {
        self.net.nodes
    }

    pub fn with_nodes(mut self, nodes: usize) -> Self {
        self.net = self.net.with_nodes(nodes);
        self
    }

    pub fn with_plan(mut self, plan: CompressionPlan) -> Self {
        self.plan = PlanSource::Static(plan);
        self
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        if self.buffer_bytes == 0 {
            return Err(EngineError::Config("buffer_bytes must be > 0".into()));
        }
        if !(self.cycle_time_s > 0.0) {
            return Err(EngineError::Config("cycle_time_s must be > 0".into()));
        }
        self.net.validate()?;
        match &self.plan {
            PlanSource::Static(p) => p.validate()?,
            PlanSource::Adaptive(a) => a.validate()?,
        }
        Ok(())
    }

    /// Plan in force before any adaptive re-planning.
    pub fn initial_plan(&self) -> CompressionPlan {
        match &self.plan {
            PlanSource::Static(p) => p.clone(),
            PlanSource::Adaptive(a) => CompressionPlan::uniform(4, a.bucket),
        }
    }

    pub fn from_json(json: &str) -> Result<Self, EngineError> {
        let cfg: Self = serde_json::from_str(json).map_err(|e| EngineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Result of one synchronous step.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub step: u64,
    /// Averaged gradients per node, in submission order.
    pub gradients: Vec<Vec<GradientTensor>>,
    /// All fused-buffer reductions of the step, composed sequentially.
    pub trace: StepTrace,
    pub buffers: usize,
}

struct Submission {
    grad: GradientTensor,
    at: f64,
}

pub struct Engine {
    config: EngineConfig,
    net: SimNet,
    filter: LayerFilter,
    plan: CompressionPlan,
    pending: Vec<Vec<Submission>>,
    flushed: Vec<bool>,
    residuals: HashMap<(usize, String), ErrorFeedbackState>,
    step: u64,
    total: StepTrace,
}

impl Engine {
    pub fn new(config: EngineConfig) -> Result<Self, EngineError> {
        config.validate()?;
        let n = config.nodes();
        Ok(Self {
            net: SimNet::new(config.net.clone())?,
            filter: LayerFilter::new(config.filter.clone())?,
            plan: config.initial_plan(),
            pending: (0..n).map(|_| Vec::new()).collect(),
            flushed: vec![false; n],
            residuals: HashMap::new(),
            step: 0,
            total: StepTrace::empty(n),
            config,
        })
    }

    pub fn nodes(&self) -> usize {
        self.config.nodes()
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn plan(&self) -> &CompressionPlan {
        &self.plan
    }

    /// Steps completed so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    /// Traffic and time of all completed steps.
    pub fn total_trace(&self) -> &StepTrace {
        &self.total
    }

    fn idle(&self) -> bool {
        self.pending.iter().all(|p| p.is_empty()) && !self.flushed.iter().any(|&f| f)
    }

    /// Replaces the plan. Only allowed between steps.
    pub fn set_plan(&mut self, plan: CompressionPlan) -> Result<(), EngineError> {
        if !self.idle() {
            return Err(EngineError::Ordering { node: 0, what: "plan swap requested mid-step".into() });
        }
        plan.validate()?;
        self.plan = plan;
        Ok(())
    }

    fn check_node(&self, node: usize) -> Result<(), EngineError> {
        if node >= self.nodes() {
            return Err(EngineError::BadNode { node, nodes: self.nodes() });
        }
        Ok(())
    }

    pub fn submit(&mut self, node: usize, grad: GradientTensor) -> Result<(), EngineError> {
        let at = self.pending.get(node).map_or(0.0, |p| p.last().map_or(0.0, |s| s.at));
        self.submit_at(node, grad, at)
    }

    /// Submits with a virtual ready time, used for the cycle-time rule.
    pub fn submit_at(&mut self, node: usize, grad: GradientTensor, at: f64) -> Result<(), EngineError> {
        self.check_node(node)?;
        if self.flushed[node] {
            return Err(EngineError::Ordering { node, what: "submitted after flushing this step".into() });
        }
        self.pending[node].push(Submission { grad, at });
        Ok(())
    }

    /// Marks the node done for this step. Returns the step output when this
    /// was the last node to flush.
    pub fn flush(&mut self, node: usize) -> Result<Option<StepOutput>, EngineError> {
        self.check_node(node)?;
        if self.flushed[node] {
            return Err(EngineError::Ordering { node, what: "flushed twice in one step".into() });
        }
        self.flushed[node] = true;
        if self.flushed.iter().all(|&f| f) {
            let pending: Vec<Vec<Submission>> = self.pending.iter_mut().map(std::mem::take).collect();
            self.flushed.iter_mut().for_each(|f| *f = false);
            return self.run_step(pending).map(Some);
        }
        Ok(None)
    }

    /// Submits every node's gradients and flushes all nodes.
    pub fn step_all(&mut self, grads: Vec<Vec<GradientTensor>>) -> Result<StepOutput, EngineError> {
        if grads.len() != self.nodes() {
            return Err(EngineError::Protocol(format!("{} gradient sets for {} nodes", grads.len(), self.nodes())));
        }
        for (node, gs) in grads.into_iter().enumerate() {
            for g in gs {
                self.submit(node, g)?;
            }
        }
        let mut out = None;
        for node in 0..self.nodes() {
            out = self.flush(node)?;
        }
        Ok(out.expect("last flush completes the step"))
    }

    fn segment_codec(&self, layer: &LayerSpec) -> SegmentCodec {
        if !self.filter.is_compressed(layer) {
            return SegmentCodec::Lossless;
        }
        let PlanEntry { bits, bucket, mode } = *self.plan.resolve(&layer.name);
        match mode {
            PlanMode::Quantize => SegmentCodec::Quantize { bits, bucket },
            PlanMode::Topk { .. } => SegmentCodec::Sparse,
            PlanMode::Uncompressed => SegmentCodec::Lossless,
        }
    }

    fn run_step(&mut self, pending: Vec<Vec<Submission>>) -> Result<StepOutput, EngineError> {
        let n = self.nodes();
        let layers: Vec<LayerSpec> = pending[0].iter().map(|s| s.grad.layer.clone()).collect();
        for (node, subs) in pending.iter().enumerate().skip(1) {
            let same = subs.len() == layers.len() && subs.iter().zip(&layers).all(|(s, l)| s.grad.layer == *l);
            if !same {
                return Err(EngineError::Protocol(format!("node {node} submitted a different layer layout than node 0")));
            }
        }
        let ready: Vec<f64> = (0..layers.len()).map(|i| pending.iter().map(|p| p[i].at).fold(0.0, f64::max)).collect();

        // Per-node layer values after any top-k sparsification.
        let mut values: Vec<Vec<Vec<f32>>> = pending.into_iter().map(|p| p.into_iter().map(|s| s.grad.values).collect()).collect();
        for (i, layer) in layers.iter().enumerate() {
            let entry = self.plan.resolve(&layer.name);
            if let (true, PlanMode::Topk { density }) = (self.filter.is_compressed(layer), entry.mode) {
                let k = k_for_density(layer.element_count, density);
                for (node, vals) in values.iter_mut().enumerate() {
                    let state = self
                        .residuals
                        .entry((node, layer.name.clone()))
                        .or_insert_with(|| ErrorFeedbackState::new(layer.element_count));
                    let sparse = topk_compress(&vals[i], k, state)?;
                    vals[i] = topk_decompress(&sparse)?;
                }
            }
        }

        let timed: Vec<(&LayerSpec, f64)> = layers.iter().zip(ready).collect();
        let buffers = assemble_fused_buffers_timed(&timed, self.config.buffer_bytes, self.config.cycle_time_s);
        let mut outputs: Vec<Vec<Vec<f32>>> = (0..n).map(|_| layers.iter().map(|l| vec![0.0; l.element_count]).collect()).collect();
        let mut trace = StepTrace::empty(n);
        for (b, buf) in buffers.iter().enumerate() {
            let layout = BufferLayout::new(buf.segments.iter().map(|s| (s.len, self.segment_codec(&layers[s.layer_index]))));
            let inputs: Vec<Vec<f32>> = values
                .iter()
                .map(|vals| buf.gather(&vals.iter().map(|v| v.as_slice()).collect::<Vec<_>>()))
                .collect();
            let seed = rng::derive_seed(self.config.seed, &[self.step, b as u64]);
            let out = allreduce(&self.net, &inputs, &layout, self.config.topology, ReduceOp::Average, seed)?;
            if out.results.iter().any(|r| r != &out.results[0]) {
                return Err(EngineError::Protocol(format!("nodes disagree on buffer {b} of step {}", self.step)));
            }
            for (node, r) in out.results.iter().enumerate() {
                buf.scatter(r, &mut outputs[node]);
            }
            trace.append(&out.trace);
        }
        self.total.append(&trace);
        let step = self.step;
        self.step += 1;

        let gradients = outputs
            .into_iter()
            .map(|vals| layers.iter().cloned().zip(vals).map(|(layer, values)| GradientTensor { layer, values }).collect())
            .collect();
        Ok(StepOutput { step, gradients, trace, buffers: buffers.len() })
    }
}
