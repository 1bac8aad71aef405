//! Closed-form step-time estimates on uniform links.

use super::layout::{BufferLayout, SegmentCodec, WireKind};
use super::schedules::ceil_log2;
use super::Topology;
use crate::simnet::SimNetConfig;

/// Latency rounds of one all-reduce.
pub fn latency_rounds(topology: Topology, nodes: usize) -> u32 {
    if nodes <= 1 {
        return 0;
    }
    match topology {
        Topology::Sra => 2,
        Topology::Ring => 2 * (nodes as u32 - 1),
        Topology::Tree => 2 * ceil_log2(nodes),
    }
}

/// Estimated virtual time of one all-reduce of `elements` values with a
/// single codec, using the config's uniform alpha and beta.
pub fn estimate_step_time(elements: usize, codec: SegmentCodec, nodes: usize, topology: Topology, config: &SimNetConfig) -> f64 {
    estimate_layout_time(&BufferLayout::uniform(elements, codec), nodes, topology, config)
}

/// `alpha * rounds + beta * bytes on the critical path`. Matches the
/// simulator on uniform links for SRA and ring; for the tree it is exact
/// when N is a power of two and an upper bound otherwise.
pub fn estimate_layout_time(layout: &BufferLayout, nodes: usize, topology: Topology, config: &SimNetConfig) -> f64 {
    let n = nodes;
    if n <= 1 {
        return 0.0;
    }
    let (alpha, beta) = (config.alpha_s, config.beta_s_per_byte);
    let rounds = latency_rounds(topology, n) as f64;
    let bytes: usize = match topology {
        Topology::Sra => {
            let chunks = layout.chunk_bounds(n);
            let raw: Vec<usize> = chunks.iter().map(|c| layout.wire_len(c.clone(), WireKind::Raw)).collect();
            let fin: Vec<usize> = chunks.iter().map(|c| layout.wire_len(c.clone(), WireKind::Final)).collect();
            let raw_total: usize = raw.iter().sum();
            // Scatter: a node serializes all chunks but its own; gather: its own chunk N-1 times.
            let scatter = (0..n).map(|i| raw_total - raw[i]).max().unwrap_or(0);
            let gather = fin.iter().max().copied().unwrap_or(0) * (n - 1);
            scatter + gather
        }
        Topology::Ring => {
            let chunks = layout.chunk_bounds(n);
            let size = |c: usize, kind| layout.wire_len(chunks[c].clone(), kind);
            let mut total = 0;
            for t in 0..n - 1 {
                let kind = if t == 0 { WireKind::Raw } else { WireKind::Partial };
                total += (0..n).map(|i| size((i + n - t) % n, kind)).max().unwrap_or(0);
            }
            for t in 0..n - 1 {
                total += (0..n).map(|i| size((i + 1 + n - t) % n, WireKind::Final)).max().unwrap_or(0);
            }
            total
        }
        Topology::Tree => {
            let levels = ceil_log2(n) as usize;
            let all = 0..layout.len();
            layout.wire_len(all.clone(), WireKind::Raw)
                + (levels - 1) * layout.wire_len(all.clone(), WireKind::Partial)
                + levels * layout.wire_len(all, WireKind::Final)
        }
    };
    alpha * rounds + beta * bytes as f64
}
