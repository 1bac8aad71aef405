//! Magnitude top-k sparsification with error feedback.

use serde::{Deserialize, Serialize};

use super::CodecError;

/// The `k` largest-magnitude entries of a vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseChunk {
    pub indices: Vec<u32>,
    pub values: Vec<f32>,
    pub original_length: usize,
    pub k: usize,
}

/// Locally retained compression error for one (node, layer).
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorFeedbackState {
    residual: Vec<f32>,
}

impl ErrorFeedbackState {
    pub fn new(len: usize) -> Self {
        Self { residual: vec![0.0; len] }
    }

    pub fn residual(&self) -> &[f32] {
        &self.residual
    }

    pub fn len(&self) -> usize {
        self.residual.len()
    }

    pub fn is_empty(&self) -> bool {
        self.residual.is_empty()
    }
}

/// Number of entries kept for a density fraction, clamped to `[1, len]`.
pub fn k_for_density(len: usize, density: f64) -> usize {
    ((len as f64 * density).ceil() as usize).clamp(1, len.max(1))
}

/// Indices of the `k` largest magnitudes; ties go to the lower index. Sorted ascending.
pub fn top_k_indices(v: &[f32], k: usize) -> Vec<u32> {
    let mut order: Vec<u32> = (0..v.len() as u32).collect();
    let by_rank = |a: &u32, b: &u32| {
        v[*b as usize]
            .abs()
            .total_cmp(&v[*a as usize].abs())
            .then(a.cmp(b))
    };
    if k < order.len() {
        order.select_nth_unstable_by(k, by_rank);
        order.truncate(k);
    }
    order.sort_unstable();
    order
}

/// Compresses `v + residual` to its top `k` entries and updates the residual
/// with whatever was not transmitted.
pub fn topk_compress(v: &[f32], k: usize, state: &mut ErrorFeedbackState) -> Result<SparseChunk, CodecError> {
    if state.residual.len() != v.len() {
        return Err(CodecError::InvalidParams(format!(
            "residual has length {} for a vector of length {}",
            state.residual.len(),
            v.len()
        )));
    }
    if k == 0 || k > v.len() {
        return Err(CodecError::InvalidK { k, len: v.len() });
    }
    if let Some(index) = v.iter().position(|x| !x.is_finite()) {
        return Err(CodecError::NonFinite { index, value: v[index] });
    }
    for (r, &x) in state.residual.iter_mut().zip(v) {
        *r += x;
    }
    // residual now holds the corrected gradient
    let indices = top_k_indices(&state.residual, k);
    let values = indices
        .iter()
        .map(|&i| std::mem::take(&mut state.residual[i as usize]))
        .collect();
    Ok(SparseChunk { indices, values, original_length: v.len(), k })
}

/// Scatters a sparse chunk into a zero vector.
pub fn topk_decompress(chunk: &SparseChunk) -> Result<Vec<f32>, CodecError> {
    if chunk.indices.len() != chunk.values.len() || chunk.indices.len() != chunk.k {
        return Err(CodecError::Malformed("index/value/k length mismatch".into()));
    }
    let mut out = vec![0.0; chunk.original_length];
    let mut prev: Option<u32> = None;
    for (&i, &x) in chunk.indices.iter().zip(&chunk.values) {
        if prev.is_some_and(|p| p >= i) || i as usize >= chunk.original_length {
            return Err(CodecError::Malformed(format!("index {i} out of order or range")));
        }
        out[i as usize] = x;
        prev = Some(i);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn argmax_by_magnitude() {
        let mut st = ErrorFeedbackState::new(3);
        let c = topk_compress(&[1.0, -5.0, 2.0], 1, &mut st).unwrap();
        assert_eq!(c.indices, vec![1]);
        assert_eq!(c.values, vec![-5.0]);
        assert_eq!(st.residual(), &[1.0, 0.0, 2.0]);
        assert_eq!(topk_decompress(&c).unwrap(), vec![0.0, -5.0, 0.0]);
    }

    #[test]
    fn full_k_is_lossless() {
        let v = [0.5f32, -1.25, 3.0, 0.0];
        let mut st = ErrorFeedbackState::new(4);
        let c = topk_compress(&v, 4, &mut st).unwrap();
        assert_eq!(topk_decompress(&c).unwrap(), v.to_vec());
        assert!(st.residual().iter().all(|&r| r == 0.0));
    }

    #[test]
    fn two_step_error_feedback() {
        // step 1: acc [3,2,1] -> send idx 0; residual [0,2,1]
        // step 2: acc [3,4,2] -> send idx 1; residual [3,0,2]
        let v = [3.0f32, 2.0, 1.0];
        let mut st = ErrorFeedbackState::new(3);
        let a = topk_decompress(&topk_compress(&v, 1, &mut st).unwrap()).unwrap();
        assert_eq!(a, vec![3.0, 0.0, 0.0]);
        let b = topk_decompress(&topk_compress(&v, 1, &mut st).unwrap()).unwrap();
        assert_eq!(b, vec![0.0, 4.0, 0.0]);
        assert_eq!(st.residual(), &[3.0, 0.0, 2.0]);
    }

    #[test]
    fn ties_prefer_lower_index() {
        assert_eq!(top_k_indices(&[1.0, -2.0, 2.0, 2.0], 2), vec![1, 2]);
    }

    #[test]
    fn k_out_of_range() {
        let mut st = ErrorFeedbackState::new(2);
        assert!(matches!(topk_compress(&[1.0, 2.0], 0, &mut st), Err(CodecError::InvalidK { .. })));
        assert!(matches!(topk_compress(&[1.0, 2.0], 3, &mut st), Err(CodecError::InvalidK { .. })));
    }

    #[test]
    fn density_to_count() {
        assert_eq!(k_for_density(1000, 0.01), 10);
        assert_eq!(k_for_density(10, 0.0), 1);
        assert_eq!(k_for_density(10, 2.0), 10);
    }

    proptest! {
        #[test]
        fn feedback_conserves_mass(
            steps in proptest::collection::vec(proptest::collection::vec(-100.0f32..100.0, 16), 1..6),
            k in 1usize..=16,
        ) {
            let mut st = ErrorFeedbackState::new(16);
            for v in &steps {
                let before: Vec<f32> = st.residual().iter().zip(v).map(|(r, x)| r + x).collect();
                let sent = topk_decompress(&topk_compress(v, k, &mut st).unwrap()).unwrap();
                for i in 0..16 {
                    prop_assert_eq!(sent[i] + st.residual()[i], before[i]);
                }
                prop_assert_eq!(sent.iter().filter(|x| **x != 0.0).count() <= k, true);
            }
        }
    }
}
