//! Nearest-neighbor quantization against the memory array.

use crate::num::Scalar;

/// Snaps each `n_k`-dimensional row of `inputs` to its nearest entry by
/// squared L2 distance. Exact ties break to the lowest entry index. Returned
/// rows are bit-exact copies of the winning entries.
pub fn quantize<T: Scalar>(entries: &[T], n_k: usize, inputs: &[T]) -> (Vec<usize>, Vec<T>) {
    debug_assert_eq!(entries.len() % n_k, 0);
    debug_assert_eq!(inputs.len() % n_k, 0);
    let k = entries.len() / n_k;
    let rows = inputs.len() / n_k;
    let mut indices = Vec::with_capacity(rows);
    let mut quantized = Vec::with_capacity(inputs.len());
    for r in 0..rows {
        let x = &inputs[r * n_k..(r + 1) * n_k];
        let mut best = 0usize;
        let mut best_dist = T::infinity();
        for e in 0..k {
            let entry = &entries[e * n_k..(e + 1) * n_k];
            let mut dist = T::zero();
            for d in 0..n_k {
                let diff = x[d] - entry[d];
                dist = dist + diff * diff;
            }
            if dist < best_dist {
                best_dist = dist;
                best = e;
            }
        }
        indices.push(best);
        quantized.extend_from_slice(&entries[best * n_k..(best + 1) * n_k]);
    }
    (indices, quantized)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn picks_nearest_entry() {
        // Memory {(0,0), (1,1)}: input (0.1, 0.1) snaps to entry 0.
        let entries = [0.0f32, 0.0, 1.0, 1.0];
        let (idx, q) = quantize(&entries, 2, &[0.1, 0.1]);
        assert_eq!(idx, vec![0]);
        assert_eq!(q, vec![0.0, 0.0]);
    }

    #[test]
    fn exact_entry_has_zero_error() {
        let entries: Vec<f32> = (0..8).map(|i| i as f32).collect(); // 4 entries of dim 2
        let (idx, q) = quantize(&entries, 2, &[6.0, 7.0]);
        assert_eq!(idx, vec![3]);
        assert_eq!(q, vec![6.0, 7.0]);
    }

    #[test]
    fn equidistant_tie_breaks_low() {
        // (0.5, 0.5) is exactly equidistant to (0,0) and (1,1) in f32.
        let entries = [0.0f32, 0.0, 1.0, 1.0];
        let (idx, _) = quantize(&entries, 2, &[0.5, 0.5]);
        assert_eq!(idx, vec![0]);
    }

    #[test]
    fn multiple_rows_quantize_independently() {
        let entries = [0.0f32, 0.0, 1.0, 1.0];
        let (idx, q) = quantize(&entries, 2, &[0.9, 1.2, -0.3, 0.1]);
        assert_eq!(idx, vec![1, 0]);
        assert_eq!(q, vec![1.0, 1.0, 0.0, 0.0]);
    }
}
