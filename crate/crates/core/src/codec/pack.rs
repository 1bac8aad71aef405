//! Bit-packing of sign-magnitude quantization codes.
//!
//! Each element occupies `bits + 1` bits: the level index in the low `bits`
//! bits and the sign in the next bit. Codes are written LSB-first into a
//! contiguous little-endian bit stream with no per-element alignment; the
//! final byte is zero-padded.

use super::CodecError;

/// Number of bytes needed to hold `count` codes of `bits + 1` bits each.
pub fn packed_len(count: usize, bits: u8) -> usize {
    (count * (bits as usize + 1)).div_ceil(8)
}

fn check_bits(bits: u8) -> Result<(), CodecError> {
    if (1..=8).contains(&bits) {
        Ok(())
    } else {
        Err(CodecError::InvalidParams(format!("bits must be in [1, 8], got {bits}")))
    }
}

/// Packs `levels` and `signs` (true = negative) into a byte stream.
pub fn pack_levels(levels: &[u8], signs: &[bool], bits: u8) -> Result<Vec<u8>, CodecError> {
    check_bits(bits)?;
    if levels.len() != signs.len() {
        return Err(CodecError::InvalidParams(format!(
            "{} levels but {} signs",
            levels.len(),
            signs.len()
        )));
    }
    let width = bits as u32 + 1;
    let max_level = (1u16 << bits) - 1;
    let mut out = Vec::with_capacity(packed_len(levels.len(), bits));
    let mut acc: u64 = 0;
    let mut filled: u32 = 0;
    for (i, (&level, &neg)) in levels.iter().zip(signs).enumerate() {
        if level as u16 > max_level {
            return Err(CodecError::LevelOverflow { index: i, level, bits });
        }
        let code = level as u64 | ((neg as u64) << bits);
        acc |= code << filled;
        filled += width;
        while filled >= 8 {
            out.push(acc as u8);
            acc >>= 8;
            filled -= 8;
        }
    }
    if filled > 0 {
        out.push(acc as u8);
    }
    Ok(out)
}

/// Inverse of [`pack_levels`]: reads `count` codes from `bytes`.
pub fn unpack_levels(bytes: &[u8], count: usize, bits: u8) -> Result<(Vec<u8>, Vec<bool>), CodecError> {
    check_bits(bits)?;
    let need = packed_len(count, bits);
    if bytes.len() < need {
        return Err(CodecError::Truncated { expected: need, actual: bytes.len() });
    }
    let width = bits as u32 + 1;
    let mask = (1u64 << width) - 1;
    let level_mask = (1u64 << bits) - 1;
    let mut levels = Vec::with_capacity(count);
    let mut signs = Vec::with_capacity(count);
    let mut acc: u64 = 0;
    let mut filled: u32 = 0;
    let mut src = bytes.iter();
    for _ in 0..count {
        while filled < width {
            // length was checked above
            acc |= (*src.next().unwrap() as u64) << filled;
            filled += 8;
        }
        let code = acc & mask;
        acc >>= width;
        filled -= width;
        levels.push((code & level_mask) as u8);
        signs.push(code >> bits != 0);
    }
    Ok((levels, signs))
}
