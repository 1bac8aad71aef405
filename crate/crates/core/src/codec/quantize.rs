//! Bucketed stochastic uniform quantization.
//!
//! A vector is split into buckets of `bucket_size` elements. Each bucket is
//! scaled by its own l2 norm and every element is randomly rounded to one of
//! `s + 1` uniformly spaced levels in `[0, 1]`, where `s = 2^bits - 1`. The
//! rounding probability is the fractional position inside the interval, which
//! makes the decoded value an unbiased estimate of the input.

use serde::{Deserialize, Serialize};

use super::pack::{pack_levels, packed_len, unpack_levels};
use super::rng;
use super::CodecError;

/// Bit-width, bucket size and RNG seed for one quantization call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuantParams {
    pub bits: u8,
    pub bucket_size: u32,
    pub seed: u64,
}

impl QuantParams {
    pub fn new(bits: u8, bucket_size: u32, seed: u64) -> Result<Self, CodecError> {
        let p = Self { bits, bucket_size, seed };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), CodecError> {
        if !(1..=8).contains(&self.bits) {
            return Err(CodecError::InvalidParams(format!("bits must be in [1, 8], got {}", self.bits)));
        }
        if self.bucket_size == 0 {
            return Err(CodecError::InvalidParams("bucket_size must be >= 1".into()));
        }
        Ok(())
    }

    /// Number of quantization intervals `s = 2^bits - 1`.
    pub fn levels(&self) -> u32 {
        (1u32 << self.bits) - 1
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    pub fn bucket_count(&self, element_count: usize) -> usize {
        element_count.div_ceil(self.bucket_size as usize)
    }
}

impl Default for QuantParams {
    /// 4 bits with 128-element buckets.
    fn default() -> Self {
        Self { bits: 4, bucket_size: 128, seed: 0 }
    }
}

/// Quantized payload: per-bucket norms plus packed sign/level codes.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedChunk {
    pub packed_levels: Vec<u8>,
    pub bucket_norms: Vec<f32>,
    pub element_count: usize,
    pub params: QuantParams,
}

/// Size in bytes of the fixed wire header: count u32, bits u8, bucket u32, seed u64.
pub const WIRE_HEADER_LEN: usize = 4 + 1 + 4 + 8;

/// Payload size (norms + packed codes) of a chunk, excluding the wire header.
pub fn compressed_size_bytes(element_count: usize, params: &QuantParams) -> usize {
    packed_len(element_count, params.bits) + 4 * params.bucket_count(element_count)
}

/// Full wire size of a chunk, header included.
pub fn wire_size_bytes(element_count: usize, params: &QuantParams) -> usize {
    WIRE_HEADER_LEN + compressed_size_bytes(element_count, params)
}

/// Ratio of the fp32 size to the compressed payload size.
pub fn compression_ratio(element_count: usize, params: &QuantParams) -> f64 {
    if element_count == 0 {
        return 1.0;
    }
    (4 * element_count) as f64 / compressed_size_bytes(element_count, params) as f64
}

/// Smallest f32 that is >= `x` (for non-negative finite `x`).
fn f32_at_least(x: f64) -> f32 {
    let y = x as f32;
    if (y as f64) < x {
        y.next_up()
    } else {
        y
    }
}

/// Quantizes `v` under `params`.
pub fn quantize(v: &[f32], params: &QuantParams) -> Result<CompressedChunk, CodecError> {
    params.validate()?;
    if let Some(index) = v.iter().position(|x| !x.is_finite()) {
        return Err(CodecError::NonFinite { index, value: v[index] });
    }
    let s = params.levels();
    let s_f = s as f64;
    let bucket = params.bucket_size as usize;
    let mut norms = Vec::with_capacity(params.bucket_count(v.len()));
    let mut levels = vec![0u8; v.len()];
    let mut signs = vec![false; v.len()];

    for (b, values) in v.chunks(bucket).enumerate() {
        let sq: f64 = values.iter().map(|&x| (x as f64) * (x as f64)).sum();
        // stored norm is never below the true norm, so every |x|/norm <= 1
        let norm = f32_at_least(sq.sqrt());
        if !norm.is_finite() {
            return Err(CodecError::NormOverflow { bucket: b });
        }
        norms.push(norm);
        if norm == 0.0 {
            continue;
        }
        let base = b * bucket;
        for (j, &x) in values.iter().enumerate() {
            let i = base + j;
            let scaled = ((x.abs() as f64) / norm as f64 * s_f).min(s_f);
            let lower = scaled.floor();
            let p = scaled - lower;
            let mut level = lower as u32;
            if level < s && rng::uniform(params.seed, b as u64, i as u64) < p {
                level += 1;
            }
            levels[i] = level as u8;
            signs[i] = x.is_sign_negative() && level != 0;
        }
    }

    Ok(CompressedChunk {
        packed_levels: pack_levels(&levels, &signs, params.bits)?,
        bucket_norms: norms,
        element_count: v.len(),
        params: *params,
    })
}

impl CompressedChunk {
    fn check_shape(&self) -> Result<(), CodecError> {
        self.params.validate()?;
        let buckets = self.params.bucket_count(self.element_count);
        if self.bucket_norms.len() != buckets {
            return Err(CodecError::Malformed(format!(
                "{} bucket norms for {} buckets",
                self.bucket_norms.len(),
                buckets
            )));
        }
        if let Some(b) = self.bucket_norms.iter().position(|n| !(n.is_finite() && *n >= 0.0)) {
            return Err(CodecError::Malformed(format!("invalid norm in bucket {b}")));
        }
        Ok(())
    }

    /// Decodes into `out`, which must have `element_count` slots.
    pub fn dequantize_into(&self, out: &mut [f32]) -> Result<(), CodecError> {
        self.check_shape()?;
        if out.len() != self.element_count {
            return Err(CodecError::Malformed(format!(
                "output has {} slots for {} elements",
                out.len(),
                self.element_count
            )));
        }
        let (levels, signs) = unpack_levels(&self.packed_levels, self.element_count, self.params.bits)?;
        let s = self.params.levels() as f64;
        let bucket = self.params.bucket_size as usize;
        for (i, slot) in out.iter_mut().enumerate() {
            let norm = self.bucket_norms[i / bucket] as f64;
            let mag = norm * (levels[i] as f64 / s);
            *slot = if signs[i] { -mag } else { mag } as f32;
        }
        Ok(())
    }

    /// Wire encoding: little-endian header, bucket norms, packed codes.
    pub fn encode_wire(&self, out: &mut Vec<u8>) {
        out.reserve(wire_size_bytes(self.element_count, &self.params));
        out.extend_from_slice(&(self.element_count as u32).to_le_bytes());
        out.push(self.params.bits);
        out.extend_from_slice(&self.params.bucket_size.to_le_bytes());
        out.extend_from_slice(&self.params.seed.to_le_bytes());
        for n in &self.bucket_norms {
            out.extend_from_slice(&n.to_le_bytes());
        }
        out.extend_from_slice(&self.packed_levels);
    }

    pub fn to_wire(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.encode_wire(&mut out);
        out
    }

    /// Parses one chunk from the front of `bytes`; returns it with the number of bytes consumed.
    pub fn decode_wire(bytes: &[u8]) -> Result<(Self, usize), CodecError> {
        if bytes.len() < WIRE_HEADER_LEN {
            return Err(CodecError::Truncated { expected: WIRE_HEADER_LEN, actual: bytes.len() });
        }
        let element_count = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        let bits = bytes[4];
        let bucket_size = u32::from_le_bytes(bytes[5..9].try_into().unwrap());
        let seed = u64::from_le_bytes(bytes[9..17].try_into().unwrap());
        let params = QuantParams::new(bits, bucket_size, seed)
            .map_err(|e| CodecError::Malformed(format!("bad header: {e}")))?;
        let total = wire_size_bytes(element_count, &params);
        if bytes.len() < total {
            return Err(CodecError::Truncated { expected: total, actual: bytes.len() });
        }
        let buckets = params.bucket_count(element_count);
        let norms_end = WIRE_HEADER_LEN + 4 * buckets;
        let bucket_norms = bytes[WIRE_HEADER_LEN..norms_end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let chunk = Self {
            packed_levels: bytes[norms_end..total].to_vec(),
            bucket_norms,
            element_count,
            params,
        };
        chunk.check_shape()?;
        Ok((chunk, total))
    }
}

/// Decodes a chunk into a fresh vector.
pub fn dequantize(c: &CompressedChunk) -> Result<Vec<f32>, CodecError> {
    let mut out = vec![0.0; c.element_count];
    c.dequantize_into(&mut out)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn levels_of(c: &CompressedChunk) -> Vec<u8> {
        unpack_levels(&c.packed_levels, c.element_count, c.params.bits).unwrap().0
    }

    #[test]
    fn zero_vector_quantizes_to_zero() {
        let v = vec![0.0f32; 300];
        let c = quantize(&v, &QuantParams::new(4, 128, 9).unwrap()).unwrap();
        assert_eq!(c.bucket_norms, vec![0.0; 3]);
        assert!(levels_of(&c).iter().all(|&l| l == 0));
        assert_eq!(dequantize(&c).unwrap(), v);
    }

    #[test]
    fn empty_vector_gives_empty_chunk() {
        let c = quantize(&[], &QuantParams::default()).unwrap();
        assert_eq!(c.element_count, 0);
        assert!(c.bucket_norms.is_empty() && c.packed_levels.is_empty());
        assert!(dequantize(&c).unwrap().is_empty());
    }

    #[test]
    fn non_finite_names_index() {
        let err = quantize(&[1.0, 2.0, f32::NAN, 3.0], &QuantParams::default()).unwrap_err();
        assert!(matches!(err, CodecError::NonFinite { index: 2, .. }));
        assert!(err.to_string().contains("index 2"));
    }

    #[test]
    fn single_nonzero_hits_top_level() {
        for seed in 0..50 {
            let mut v = vec![0.0f32; 64];
            v[17] = -2.5;
            let p = QuantParams::new(3, 128, seed).unwrap();
            let c = quantize(&v, &p).unwrap();
            assert_eq!(levels_of(&c)[17], 7);
            assert_eq!(dequantize(&c).unwrap()[17], -2.5);
        }
    }

    #[test]
    fn three_four_rounding_frequencies() {
        // |3|/5 = 0.6, |4|/5 = 0.8 with s = 1
        let trials = 100_000u64;
        let (mut up0, mut up1) = (0u64, 0u64);
        for seed in 0..trials {
            let c = quantize(&[3.0, 4.0], &QuantParams::new(1, 128, seed).unwrap()).unwrap();
            assert_eq!(c.bucket_norms, vec![5.0]);
            let l = levels_of(&c);
            up0 += l[0] as u64;
            up1 += l[1] as u64;
        }
        for (hits, p) in [(up0, 0.6), (up1, 0.8)] {
            let freq = hits as f64 / trials as f64;
            let se = (p * (1.0 - p) / trials as f64).sqrt();
            assert!((freq - p).abs() < 3.0 * se, "freq {freq} vs {p}");
        }
    }

    #[test]
    fn error_bounded_by_norm_over_s() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for bits in 1..=8u8 {
            let v: Vec<f32> = (0..1000).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let p = QuantParams::new(bits, 100, bits as u64).unwrap();
            let c = quantize(&v, &p).unwrap();
            let d = dequantize(&c).unwrap();
            let s = p.levels() as f64;
            for (i, (&x, &y)) in v.iter().zip(&d).enumerate() {
                let norm = c.bucket_norms[i / 100] as f64;
                assert!(((x - y) as f64).abs() <= norm / s * (1.0 + 1e-6));
                assert!((y as f64).abs() <= norm);
            }
        }
    }

    #[test]
    fn last_partial_bucket_uses_own_norm() {
        let v = [1.0f32, 0.0, 0.0, 0.0, 3.0, 4.0];
        let c = quantize(&v, &QuantParams::new(2, 4, 0).unwrap()).unwrap();
        assert_eq!(c.bucket_norms, vec![1.0, 5.0]);
    }

    #[test]
    fn deterministic_given_seed() {
        let v: Vec<f32> = (0..777).map(|i| ((i * 37 % 101) as f32 - 50.0) / 7.0).collect();
        let p = QuantParams::new(4, 128, 1234).unwrap();
        let a = quantize(&v, &p).unwrap();
        let b = quantize(&v, &p).unwrap();
        assert_eq!(a.to_wire(), b.to_wire());
        let da = dequantize(&a).unwrap();
        let db = dequantize(&b).unwrap();
        assert!(da.iter().zip(&db).all(|(x, y)| x.to_bits() == y.to_bits()));
        let c = quantize(&v, &p.with_seed(1235)).unwrap();
        assert_ne!(a.packed_levels, c.packed_levels);
    }

    #[test]
    fn sizes_match_layout() {
        let p = QuantParams::new(4, 128, 0).unwrap();
        assert_eq!(compressed_size_bytes(128, &p), 84);
        assert!((compression_ratio(128, &p) - 512.0 / 84.0).abs() < 1e-12);
        assert_eq!(compressed_size_bytes(0, &p), 0);
        let c = quantize(&vec![1.0; 1000], &p).unwrap();
        assert_eq!(c.to_wire().len(), wire_size_bytes(1000, &p));
        assert_eq!(c.packed_levels.len(), (1000 * 5usize).div_ceil(8));
    }

    #[test]
    fn wire_roundtrip_and_truncation() {
        let v: Vec<f32> = (0..300).map(|i| (i as f32).sin()).collect();
        let c = quantize(&v, &QuantParams::new(5, 64, 77).unwrap()).unwrap();
        let mut wire = c.to_wire();
        wire.extend_from_slice(&[9, 9, 9]);
        let (back, used) = CompressedChunk::decode_wire(&wire).unwrap();
        assert_eq!(used, wire.len() - 3);
        assert_eq!(back, c);
        assert!(matches!(
            CompressedChunk::decode_wire(&wire[..used - 1]),
            Err(CodecError::Truncated { .. })
        ));
        let mut short = c.clone();
        short.packed_levels.pop();
        assert!(matches!(dequantize(&short), Err(CodecError::Truncated { .. })));
    }
}
