//! Encoding of buffer chunks for transport.
//!
//! The reduction schedules are written once against [`ChunkCodec`]; the data
//! codec moves real values through the per-segment codecs, the phantom codec
//! moves only sizes so large payloads can be costed without allocating them.

use std::ops::Range;

use super::layout::{truncate_keep, BufferLayout, Piece, SegmentCodec, WireKind};
use super::CollectiveError;
use crate::codec::{quantize, rng, CompressedChunk};
use crate::simnet::Payload;

/// Identifies one encode call for seed derivation.
#[derive(Debug, Clone, Copy)]
pub struct HopKey {
    pub phase: u64,
    pub hop: u64,
    pub sender: u64,
    pub chunk: u64,
}

pub struct Encoded {
    pub payload: Payload,
    /// Codec stages the encoded values have been through, this one included.
    pub stages: u32,
}

pub trait ChunkCodec {
    type Val;
    fn chunks(&self) -> &[Range<usize>];
    fn local(&self, node: usize, chunk: usize) -> Self::Val;
    fn encode(&self, val: &Self::Val, chunk: usize, kind: WireKind, key: HopKey) -> Result<Encoded, CollectiveError>;
    fn decode(&self, payload: Payload, stages: u32, chunk: usize, kind: WireKind) -> Result<Self::Val, CollectiveError>;
    /// Sums contributions in the given order.
    fn sum(&self, parts: Vec<Self::Val>) -> Self::Val;
    fn stages(&self, val: &Self::Val) -> u32;
}

/// Chunk values widened to f64 for accumulation.
#[derive(Debug, Clone)]
pub struct ChunkVal {
    pub values: Vec<f64>,
    pub stages: u32,
}

pub struct DataCodec<'a> {
    pub inputs: &'a [Vec<f32>],
    pub layout: &'a BufferLayout,
    pub chunks: Vec<Range<usize>>,
    pub seed: u64,
}

fn read<const W: usize>(bytes: &[u8], at: &mut usize) -> Result<[u8; W], CollectiveError> {
    let end = *at + W;
    let out = bytes
        .get(*at..end)
        .ok_or_else(|| CollectiveError::Malformed(format!("payload truncated at byte {}", *at)))?
        .try_into()
        .unwrap();
    *at = end;
    Ok(out)
}

fn push_value(out: &mut Vec<u8>, x: f64, kind: WireKind) {
    match kind.value_width() {
        8 => out.extend_from_slice(&x.to_le_bytes()),
        _ => out.extend_from_slice(&(x as f32).to_le_bytes()),
    }
}

fn read_value(bytes: &[u8], at: &mut usize, kind: WireKind) -> Result<f64, CollectiveError> {
    Ok(match kind.value_width() {
        8 => f64::from_le_bytes(read::<8>(bytes, at)?),
        _ => f32::from_le_bytes(read::<4>(bytes, at)?) as f64,
    })
}

impl DataCodec<'_> {
    fn encode_piece(&self, out: &mut Vec<u8>, piece: &Piece, vals: &[f64], kind: WireKind, key: HopKey) -> Result<(), CollectiveError> {
        match piece.codec {
            SegmentCodec::Lossless => vals.iter().for_each(|&x| push_value(out, x, kind)),
            SegmentCodec::Quantize { .. } => {
                let seed = rng::derive_seed(self.seed, &[key.phase, key.hop, key.sender, key.chunk, piece.range.start as u64]);
                let params = piece.codec.quant_params(seed).unwrap();
                let narrowed: Vec<f32> = vals.iter().map(|&x| x as f32).collect();
                quantize(&narrowed, &params)?.encode_wire(out);
            }
            SegmentCodec::Sparse => {
                let width = kind.value_width();
                let nnz: Vec<usize> = (0..vals.len()).filter(|&i| vals[i] != 0.0).collect();
                if 4 + nnz.len() * (4 + width) < vals.len() * width {
                    out.push(0);
                    out.extend_from_slice(&(nnz.len() as u32).to_le_bytes());
                    nnz.iter().for_each(|&i| out.extend_from_slice(&(i as u32).to_le_bytes()));
                    nnz.iter().for_each(|&i| push_value(out, vals[i], kind));
                } else {
                    out.push(1);
                    vals.iter().for_each(|&x| push_value(out, x, kind));
                }
            }
            SegmentCodec::Truncate { ratio } => {
                let keep = truncate_keep(vals.len(), ratio);
                vals[..keep].iter().for_each(|&x| out.extend_from_slice(&(x as f32).to_le_bytes()));
            }
        }
        Ok(())
    }

    fn decode_piece(&self, bytes: &[u8], at: &mut usize, piece: &Piece, out: &mut [f64], kind: WireKind) -> Result<(), CollectiveError> {
        match piece.codec {
            SegmentCodec::Lossless => {
                for slot in out.iter_mut() {
                    *slot = read_value(bytes, at, kind)?;
                }
            }
            SegmentCodec::Quantize { .. } => {
                let (chunk, used) = CompressedChunk::decode_wire(&bytes[*at..])?;
                if chunk.element_count != out.len() {
                    return Err(CollectiveError::Malformed(format!(
                        "quantized piece has {} elements, expected {}",
                        chunk.element_count,
                        out.len()
                    )));
                }
                let mut tmp = vec![0.0f32; out.len()];
                chunk.dequantize_into(&mut tmp)?;
                out.iter_mut().zip(&tmp).for_each(|(o, &x)| *o = x as f64);
                *at += used;
            }
            SegmentCodec::Sparse => match read::<1>(bytes, at)?[0] {
                0 => {
                    let nnz = u32::from_le_bytes(read::<4>(bytes, at)?) as usize;
                    let mut idx = Vec::with_capacity(nnz);
                    for _ in 0..nnz {
                        let i = u32::from_le_bytes(read::<4>(bytes, at)?) as usize;
                        if i >= out.len() {
                            return Err(CollectiveError::Malformed(format!("sparse index {i} out of range")));
                        }
                        idx.push(i);
                    }
                    out.iter_mut().for_each(|o| *o = 0.0);
                    for i in idx {
                        out[i] = read_value(bytes, at, kind)?;
                    }
                }
                1 => {
                    for slot in out.iter_mut() {
                        *slot = read_value(bytes, at, kind)?;
                    }
                }
                f => return Err(CollectiveError::Malformed(format!("bad sparse flag {f}"))),
            },
            SegmentCodec::Truncate { ratio } => {
                let keep = truncate_keep(out.len(), ratio);
                out.iter_mut().for_each(|o| *o = 0.0);
                for slot in out[..keep].iter_mut() {
                    *slot = f32::from_le_bytes(read::<4>(bytes, at)?) as f64;
                }
            }
        }
        Ok(())
    }

    fn has_quantized(&self, range: &Range<usize>) -> bool {
        self.layout.pieces(range.clone()).any(|p| p.codec.is_quantized())
    }
}

impl ChunkCodec for DataCodec<'_> {
    type Val = ChunkVal;

    fn chunks(&self) -> &[Range<usize>] {
        &self.chunks
    }

    fn local(&self, node: usize, chunk: usize) -> ChunkVal {
        let r = self.chunks[chunk].clone();
        ChunkVal { values: self.inputs[node][r].iter().map(|&x| x as f64).collect(), stages: 0 }
    }

    fn encode(&self, val: &ChunkVal, chunk: usize, kind: WireKind, key: HopKey) -> Result<Encoded, CollectiveError> {
        let range = self.chunks[chunk].clone();
        let mut out = Vec::with_capacity(self.layout.wire_len(range.clone(), kind));
        for piece in self.layout.pieces(range.clone()) {
            let local = piece.range.start - range.start..piece.range.end - range.start;
            self.encode_piece(&mut out, &piece, &val.values[local], kind, key)?;
        }
        let stages = val.stages + self.has_quantized(&range) as u32;
        Ok(Encoded { payload: Payload::Data(out), stages })
    }

    fn decode(&self, payload: Payload, stages: u32, chunk: usize, kind: WireKind) -> Result<ChunkVal, CollectiveError> {
        let Payload::Data(bytes) = payload else {
            return Err(CollectiveError::Malformed("phantom payload in data reduction".into()));
        };
        let range = self.chunks[chunk].clone();
        let mut values = vec![0.0; range.len()];
        let mut at = 0;
        for piece in self.layout.pieces(range.clone()) {
            let local = piece.range.start - range.start..piece.range.end - range.start;
            self.decode_piece(&bytes, &mut at, &piece, &mut values[local], kind)?;
        }
        if at != bytes.len() {
            return Err(CollectiveError::Malformed(format!("{} trailing bytes in chunk payload", bytes.len() - at)));
        }
        Ok(ChunkVal { values, stages })
    }

    fn sum(&self, parts: Vec<ChunkVal>) -> ChunkVal {
        let mut it = parts.into_iter();
        let mut acc = it.next().expect("at least one contribution");
        for p in it {
            acc.values.iter_mut().zip(&p.values).for_each(|(a, &b)| *a += b);
            acc.stages = acc.stages.max(p.stages);
        }
        acc
    }

    fn stages(&self, val: &ChunkVal) -> u32 {
        val.stages
    }
}

/// Size-only codec over a layout.
pub struct PhantomCodec<'a> {
    pub layout: &'a BufferLayout,
    pub chunks: Vec<Range<usize>>,
}

impl ChunkCodec for PhantomCodec<'_> {
    type Val = ();

    fn chunks(&self) -> &[Range<usize>] {
        &self.chunks
    }

    fn local(&self, _node: usize, _chunk: usize) {}

    fn encode(&self, _val: &(), chunk: usize, kind: WireKind, _key: HopKey) -> Result<Encoded, CollectiveError> {
        let len = self.layout.wire_len(self.chunks[chunk].clone(), kind);
        Ok(Encoded { payload: Payload::Phantom(len), stages: 0 })
    }

    fn decode(&self, payload: Payload, _stages: u32, chunk: usize, kind: WireKind) -> Result<(), CollectiveError> {
        let expected = self.layout.wire_len(self.chunks[chunk].clone(), kind);
        if payload.len() != expected {
            return Err(CollectiveError::Malformed(format!("phantom payload of {} bytes, expected {expected}", payload.len())));
        }
        Ok(())
    }

    fn sum(&self, _parts: Vec<()>) {}

    fn stages(&self, _val: &()) -> u32 {
        0
    }
}
