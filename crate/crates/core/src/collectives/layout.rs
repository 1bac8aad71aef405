//! Buffer layouts, chunking and per-segment wire sizes.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::codec::{wire_size_bytes, QuantParams};

/// Codec applied to one segment of a fused buffer during reduction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentCodec {
    /// Exact transfer: f32 for node inputs and results, f64 for partial sums.
    Lossless,
    /// Bucketed stochastic quantization, re-applied at every hop.
    Quantize { bits: u8, bucket: u32 },
    /// Values that are already sparse (top-k upstream); sent as index/value
    /// pairs, or dense when that is smaller.
    Sparse,
    /// Pseudo-codec: only the first `len / ratio` elements of each piece are
    /// sent and the rest decode to zero. For cost studies only.
    Truncate { ratio: f64 },
}

impl SegmentCodec {
    pub fn quant_params(&self, seed: u64) -> Option<QuantParams> {
        match *self {
            SegmentCodec::Quantize { bits, bucket } => Some(QuantParams { bits, bucket_size: bucket, seed }),
            _ => None,
        }
    }

    pub fn is_quantized(&self) -> bool {
        matches!(self, SegmentCodec::Quantize { .. })
    }
}

/// Role of a chunk on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WireKind {
    /// A node's own, unaggregated contribution.
    Raw,
    /// An aggregate of several contributions.
    Partial,
    /// The fully reduced value.
    Final,
}

impl WireKind {
    /// Bytes per value on the lossless and sparse paths.
    pub fn value_width(self) -> usize {
        match self {
            WireKind::Partial => 8,
            WireKind::Raw | WireKind::Final => 4,
        }
    }
}

/// Elements kept by the truncation pseudo-codec.
pub fn truncate_keep(len: usize, ratio: f64) -> usize {
    if len == 0 {
        0
    } else {
        ((len as f64 / ratio.max(1.0)).ceil() as usize).clamp(1, len)
    }
}

/// Wire size of `len` elements of one segment. Exact for every codec except
/// `Sparse`, where the dense fallback size is returned as an upper bound.
pub fn segment_wire_len(codec: SegmentCodec, len: usize, kind: WireKind) -> usize {
    match codec {
        SegmentCodec::Lossless => len * kind.value_width(),
        SegmentCodec::Quantize { bits, bucket } => {
            wire_size_bytes(len, &QuantParams { bits, bucket_size: bucket, seed: 0 })
        }
        SegmentCodec::Sparse => 1 + len * kind.value_width(),
        SegmentCodec::Truncate { ratio } => 4 * truncate_keep(len, ratio),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentLayout {
    pub start: usize,
    pub len: usize,
    pub codec: SegmentCodec,
}

impl SegmentLayout {
    pub fn end(&self) -> usize {
        self.start + self.len
    }
}

/// Codec assignment over the element range of a fused buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct BufferLayout {
    segments: Vec<SegmentLayout>,
    len: usize,
}

/// Part of a segment that falls inside a chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct Piece {
    pub codec: SegmentCodec,
    /// Range in buffer coordinates.
    pub range: Range<usize>,
}

impl BufferLayout {
    /// Builds a layout from consecutive `(len, codec)` segments.
    pub fn new(segments: impl IntoIterator<Item = (usize, SegmentCodec)>) -> Self {
        let mut start = 0;
        let segments = segments
            .into_iter()
            .filter(|(len, _)| *len > 0)
            .map(|(len, codec)| {
                let s = SegmentLayout { start, len, codec };
                start += len;
                s
            })
            .collect();
        Self { segments, len: start }
    }

    pub fn uniform(len: usize, codec: SegmentCodec) -> Self {
        Self::new([(len, codec)])
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn segments(&self) -> &[SegmentLayout] {
        &self.segments
    }

    pub fn codec_at(&self, pos: usize) -> Option<SegmentCodec> {
        self.segment_at(pos).map(|s| s.codec)
    }

    fn segment_at(&self, pos: usize) -> Option<&SegmentLayout> {
        let i = self.segments.partition_point(|s| s.end() <= pos);
        self.segments.get(i).filter(|s| s.start <= pos)
    }

    /// Moves `pos` down to the nearest bucket boundary of the quantized
    /// segment containing it (buckets counted from the segment start).
    pub fn align_down(&self, pos: usize) -> usize {
        match self.segment_at(pos) {
            Some(SegmentLayout { start, codec: SegmentCodec::Quantize { bucket, .. }, .. }) => {
                let bucket = *bucket as usize;
                start + (pos - start) / bucket * bucket
            }
            _ => pos,
        }
    }

    /// Segment pieces intersecting `range`, in order.
    pub fn pieces(&self, range: Range<usize>) -> impl Iterator<Item = Piece> + '_ {
        let first = self.segments.partition_point(|s| s.end() <= range.start);
        self.segments[first..]
            .iter()
            .take_while(move |s| s.start < range.end)
            .map(move |s| Piece { codec: s.codec, range: s.start.max(range.start)..s.end().min(range.end) })
            .filter(|p| !p.range.is_empty())
    }

    /// Splits the buffer into `n` owner chunks of about `len / n` elements.
    /// Boundaries are aligned down to bucket boundaries so no bucket spans two
    /// owners; leftover elements land in the last chunk.
    pub fn chunk_bounds(&self, n: usize) -> Vec<Range<usize>> {
        let n = n.max(1);
        let base = self.len / n;
        let mut cuts = Vec::with_capacity(n + 1);
        cuts.push(0);
        for k in 1..n {
            let c = self.align_down(k * base).max(*cuts.last().unwrap());
            cuts.push(c);
        }
        cuts.push(self.len);
        cuts.windows(2).map(|w| w[0]..w[1]).collect()
    }

    /// Exact wire size of `range` (upper bound when a sparse segment is involved).
    pub fn wire_len(&self, range: Range<usize>, kind: WireKind) -> usize {
        self.pieces(range).map(|p| segment_wire_len(p.codec, p.range.len(), kind)).sum()
    }
}
