//! Compressed all-reduce over the simulated network.
//!
//! Three schedules are available: scatter-reduce-allgather (SRA), ring and
//! binomial tree. Each segment of the buffer carries its own codec, so
//! filtered layers travel exactly while the rest is quantized.

mod chunk_codec;
mod cost;
mod layout;
mod schedules;

use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::CodecError;
use crate::simnet::{SimError, SimNet, StepTrace};

pub use chunk_codec::{ChunkCodec, ChunkVal, DataCodec, Encoded, HopKey, PhantomCodec};
pub use cost::{estimate_layout_time, estimate_step_time, latency_rounds};
pub use layout::{segment_wire_len, truncate_keep, BufferLayout, Piece, SegmentCodec, SegmentLayout, WireKind};
pub use schedules::{ceil_log2, NodeOut};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CollectiveError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("node {node} input has {actual} elements, layout expects {expected}")]
    LayoutMismatch { node: usize, expected: usize, actual: usize },
    #[error("expected {expected} node inputs, got {actual}")]
    NodeCount { expected: usize, actual: usize },
    #[error("malformed payload: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Topology {
    Sra,
    Ring,
    Tree,
}

impl Topology {
    pub const ALL: [Topology; 3] = [Topology::Sra, Topology::Ring, Topology::Tree];

    pub fn name(self) -> &'static str {
        match self {
            Topology::Sra => "sra",
            Topology::Ring => "ring",
            Topology::Tree => "tree",
        }
    }
}

impl std::fmt::Display for Topology {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Topology {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "sra" => Ok(Topology::Sra),
            "ring" => Ok(Topology::Ring),
            "tree" => Ok(Topology::Tree),
            other => Err(format!("unknown topology `{other}` (expected sra, ring or tree)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReduceOp {
    #[default]
    Sum,
    Average,
}

/// Per-chunk codec stage counts of one reduction.
#[derive(Debug, Clone, PartialEq)]
pub struct StageCounts {
    pub chunks: Vec<Range<usize>>,
    /// Stages up to the end of the reduce phase, per chunk.
    pub reduce: Vec<u32>,
    /// Stages including the broadcast back, per chunk.
    pub total: Vec<u32>,
}

impl StageCounts {
    fn chunk_of(&self, pos: usize) -> usize {
        self.chunks.partition_point(|c| c.end <= pos)
    }

    /// (reduce, total) stages seen by element `pos`. Elements of segments that
    /// are not quantized report zero.
    pub fn at(&self, layout: &BufferLayout, pos: usize) -> (u32, u32) {
        match layout.codec_at(pos) {
            Some(c) if c.is_quantized() => {
                let k = self.chunk_of(pos);
                (self.reduce[k], self.total[k])
            }
            _ => (0, 0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReduceOutcome {
    /// Reduced buffer as seen by each node.
    pub results: Vec<Vec<f32>>,
    pub trace: StepTrace,
    pub stages: StageCounts,
}

fn reduce_chunks(layout: &BufferLayout, n: usize, topology: Topology) -> Vec<Range<usize>> {
    match topology {
        Topology::Tree => vec![0..layout.len()],
        Topology::Sra | Topology::Ring => layout.chunk_bounds(n),
    }
}

fn run<C: ChunkCodec>(net: &SimNet, codec: &C, topology: Topology) -> Result<(Vec<NodeOut<C::Val>>, StepTrace), CollectiveError> {
    match topology {
        Topology::Sra => net.run_step(|h| schedules::sra(h, codec)),
        Topology::Ring => net.run_step(|h| schedules::ring(h, codec)),
        Topology::Tree => net.run_step(|h| schedules::tree(h, codec)),
    }
}

fn stage_counts<V>(chunks: Vec<Range<usize>>, outs: &[NodeOut<V>], codec_stages: impl Fn(&V) -> u32) -> StageCounts {
    let mut reduce = vec![0; chunks.len()];
    for out in outs {
        for &(k, s) in &out.reduced {
            reduce[k] = s;
        }
    }
    let total = outs[0].chunks.iter().map(codec_stages).collect();
    StageCounts { chunks, reduce, total }
}

/// All-reduces one buffer per node. Every node receives the same result.
pub fn allreduce(
    net: &SimNet,
    inputs: &[Vec<f32>],
    layout: &BufferLayout,
    topology: Topology,
    op: ReduceOp,
    seed: u64,
) -> Result<ReduceOutcome, CollectiveError> {
    let n = net.nodes();
    if inputs.len() != n {
        return Err(CollectiveError::NodeCount { expected: n, actual: inputs.len() });
    }
    for (node, v) in inputs.iter().enumerate() {
        if v.len() != layout.len() {
            return Err(CollectiveError::LayoutMismatch { node, expected: layout.len(), actual: v.len() });
        }
    }
    let chunks = reduce_chunks(layout, n, topology);
    if n == 1 {
        let stages = StageCounts { reduce: vec![0; chunks.len()], total: vec![0; chunks.len()], chunks };
        return Ok(ReduceOutcome { results: inputs.to_vec(), trace: StepTrace::empty(1), stages });
    }

    let codec = DataCodec { inputs, layout, chunks: chunks.clone(), seed };
    let (outs, mut trace) = run(net, &codec, topology)?;
    let stages = stage_counts(chunks, &outs, |v| v.stages);
    trace.reduce_stages = stages.reduce.iter().copied().max().unwrap_or(0);
    trace.codec_stages = stages.total.iter().copied().max().unwrap_or(0);

    let scale = match op {
        ReduceOp::Sum => 1.0,
        ReduceOp::Average => n as f32,
    };
    let results = outs
        .into_iter()
        .map(|out| {
            let mut buf = Vec::with_capacity(layout.len());
            for chunk in out.chunks {
                buf.extend(chunk.values.iter().map(|&x| x as f32 / scale));
            }
            buf
        })
        .collect();
    Ok(ReduceOutcome { results, trace, stages })
}

pub fn allreduce_sra(net: &SimNet, inputs: &[Vec<f32>], layout: &BufferLayout, seed: u64) -> Result<ReduceOutcome, CollectiveError> {
    allreduce(net, inputs, layout, Topology::Sra, ReduceOp::Sum, seed)
}

pub fn allreduce_ring(net: &SimNet, inputs: &[Vec<f32>], layout: &BufferLayout, seed: u64) -> Result<ReduceOutcome, CollectiveError> {
    allreduce(net, inputs, layout, Topology::Ring, ReduceOp::Sum, seed)
}

pub fn allreduce_tree(net: &SimNet, inputs: &[Vec<f32>], layout: &BufferLayout, seed: u64) -> Result<ReduceOutcome, CollectiveError> {
    allreduce(net, inputs, layout, Topology::Tree, ReduceOp::Sum, seed)
}

/// Runs the message schedule with size-only payloads. Traffic, rounds and
/// virtual time match a data run of the same layout (sparse segments are
/// costed at their dense upper bound).
pub fn simulate_schedule(net: &SimNet, layout: &BufferLayout, topology: Topology) -> Result<StepTrace, CollectiveError> {
    let n = net.nodes();
    if n == 1 {
        return Ok(StepTrace::empty(1));
    }
    let codec = PhantomCodec { layout, chunks: reduce_chunks(layout, n, topology) };
    let (_, trace) = run(net, &codec, topology)?;
    Ok(trace)
}

/// Fixed-order sequential sum, widened to f64 and rounded once: the
/// reference the lossless schedules reproduce bit for bit.
pub fn reference_sum(inputs: &[Vec<f32>]) -> Vec<f32> {
    let len = inputs.first().map_or(0, |v| v.len());
    (0..len)
        .map(|i| inputs.iter().fold(0.0f64, |acc, v| acc + v[i] as f64) as f32)
        .collect()
}
