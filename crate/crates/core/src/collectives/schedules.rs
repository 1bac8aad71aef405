//! Node programs for the three all-reduce schedules.
//!
//! Aggregation points always sum in ascending node order: the SRA owner adds
//! contributions 0..N, ring hops add the incoming partial (earlier nodes on
//! the path) before the local chunk, and tree parents add their own subtree
//! before the child's.

use super::chunk_codec::{ChunkCodec, HopKey};
use super::layout::WireKind;
use super::CollectiveError;
use crate::simnet::NodeHandle;

/// What one node ends up with.
pub struct NodeOut<V> {
    /// Final value of every chunk, in chunk order.
    pub chunks: Vec<V>,
    /// (chunk, stages at the end of the reduce phase) for chunks this node reduced.
    pub reduced: Vec<(usize, u32)>,
}

pub fn ceil_log2(n: usize) -> u32 {
    if n <= 1 {
        0
    } else {
        usize::BITS - (n - 1).leading_zeros()
    }
}

fn key(phase: u64, hop: usize, sender: usize, chunk: usize) -> HopKey {
    HopKey { phase, hop: hop as u64, sender: sender as u64, chunk: chunk as u64 }
}

fn collect<V>(slots: Vec<Option<V>>) -> Vec<V> {
    slots.into_iter().map(|v| v.expect("every chunk received")).collect()
}

/// Scatter-reduce then allgather: two latency rounds, each element is
/// encoded once on the way to its owner and once on the way back.
pub async fn sra<C: ChunkCodec>(h: NodeHandle, codec: &C) -> Result<NodeOut<C::Val>, CollectiveError> {
    let (me, n) = (h.id(), h.nodes());
    for k in 1..n {
        let to = (me + k) % n;
        let enc = codec.encode(&codec.local(me, to), to, WireKind::Raw, key(0, 0, me, to))?;
        h.send_tagged(to, enc.payload, enc.stages)?;
    }
    let mut parts: Vec<Option<C::Val>> = (0..n).map(|_| None).collect();
    parts[me] = Some(codec.local(me, me));
    for k in 1..n {
        let from = (me + n - k) % n;
        let env = h.recv_envelope(from).await?;
        parts[from] = Some(codec.decode(env.payload, env.tag, me, WireKind::Raw)?);
    }
    let reduced = codec.sum(collect(parts));
    let reduce_stages = codec.stages(&reduced);

    let enc = codec.encode(&reduced, me, WireKind::Final, key(1, 0, me, me))?;
    for k in 1..n {
        h.send_tagged((me + k) % n, enc.payload.clone(), enc.stages)?;
    }
    let mut out: Vec<Option<C::Val>> = (0..n).map(|_| None).collect();
    out[me] = Some(codec.decode(enc.payload, enc.stages, me, WireKind::Final)?);
    for k in 1..n {
        let from = (me + n - k) % n;
        let env = h.recv_envelope(from).await?;
        out[from] = Some(codec.decode(env.payload, env.tag, from, WireKind::Final)?);
    }
    Ok(NodeOut { chunks: collect(out), reduced: vec![(me, reduce_stages)] })
}

/// Ring reduce-scatter (N-1 hops, re-encoding the running partial sum at
/// every hop) followed by a ring allgather that forwards the owner's
/// encoding unchanged.
pub async fn ring<C: ChunkCodec>(h: NodeHandle, codec: &C) -> Result<NodeOut<C::Val>, CollectiveError> {
    let (me, n) = (h.id(), h.nodes());
    let right = (me + 1) % n;
    let left = (me + n - 1) % n;

    let mut carry: Option<C::Val> = None;
    for t in 0..n - 1 {
        let send_chunk = (me + n - t) % n;
        let (val, kind) = match carry.take() {
            None => (codec.local(me, send_chunk), WireKind::Raw),
            Some(v) => (v, WireKind::Partial),
        };
        let enc = codec.encode(&val, send_chunk, kind, key(0, t, me, send_chunk))?;
        h.send_tagged(right, enc.payload, enc.stages)?;

        let recv_chunk = (me + 2 * n - t - 1) % n;
        let env = h.recv_envelope(left).await?;
        let kind = if t == 0 { WireKind::Raw } else { WireKind::Partial };
        let got = codec.decode(env.payload, env.tag, recv_chunk, kind)?;
        carry = Some(codec.sum(vec![got, codec.local(me, recv_chunk)]));
    }

    let owned = (me + 1) % n;
    let reduced = carry.expect("n > 1");
    let reduce_stages = codec.stages(&reduced);
    let enc = codec.encode(&reduced, owned, WireKind::Final, key(1, 0, me, owned))?;

    let mut out: Vec<Option<C::Val>> = (0..n).map(|_| None).collect();
    out[owned] = Some(codec.decode(enc.payload.clone(), enc.stages, owned, WireKind::Final)?);
    let mut forward = (enc.payload, enc.stages);
    for t in 0..n - 1 {
        h.send_tagged(right, forward.0, forward.1)?;
        let chunk = (me + n - t) % n;
        let env = h.recv_envelope(left).await?;
        out[chunk] = Some(codec.decode(env.payload.clone(), env.tag, chunk, WireKind::Final)?);
        forward = (env.payload, env.tag);
    }
    Ok(NodeOut { chunks: collect(out), reduced: vec![(owned, reduce_stages)] })
}

/// True when `node` has received nothing before `level` (all its would-be
/// children below that level are padding).
fn sends_raw(node: usize, level: u32, n: usize) -> bool {
    (0..level).all(|l| node + (1 << l) >= n)
}

/// Binomial tree: reduce to node 0 in ceil(log2 N) levels, then broadcast the
/// root's encoding back down. Missing nodes (N not a power of two) are
/// skipped and behave as zero contributions that cost no bytes.
pub async fn tree<C: ChunkCodec>(h: NodeHandle, codec: &C) -> Result<NodeOut<C::Val>, CollectiveError> {
    let (me, n) = (h.id(), h.nodes());
    let levels = ceil_log2(n);
    let mut acc = codec.local(me, 0);
    let mut own_only = true;
    let mut parent = None;
    for l in 0..levels {
        let step = 1usize << l;
        if me % (2 * step) == step {
            let kind = if own_only { WireKind::Raw } else { WireKind::Partial };
            let enc = codec.encode(&acc, 0, kind, key(0, l as usize, me, 0))?;
            h.send_tagged(me - step, enc.payload, enc.stages)?;
            parent = Some((me - step, l));
            break;
        }
        let child = me + step;
        if child < n {
            let kind = if sends_raw(child, l, n) { WireKind::Raw } else { WireKind::Partial };
            let env = h.recv_envelope(child).await?;
            let got = codec.decode(env.payload, env.tag, 0, kind)?;
            acc = codec.sum(vec![acc, got]);
            own_only = false;
        }
    }

    let (payload, stages, reduced, top) = match parent {
        None => {
            let rs = codec.stages(&acc);
            let enc = codec.encode(&acc, 0, WireKind::Final, key(1, 0, me, 0))?;
            (enc.payload, enc.stages, vec![(0, rs)], levels)
        }
        Some((p, l)) => {
            let env = h.recv_envelope(p).await?;
            (env.payload, env.tag, Vec::new(), l)
        }
    };
    for l in (0..top).rev() {
        let child = me + (1 << l);
        if child < n {
            h.send_tagged(child, payload.clone(), stages)?;
        }
    }
    let result = codec.decode(payload, stages, 0, WireKind::Final)?;
    Ok(NodeOut { chunks: vec![result], reduced })
}
