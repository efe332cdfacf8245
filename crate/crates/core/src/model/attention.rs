//! Dot-product soft attention over the voxels of an encoding.

use crate::error::{OncoError, Result};
use crate::nn::graph::softmax;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::{AttentionWeights, DecoderRepr, Encoding};

/// Pools `e` (C, positions...) with scores `s_p = <e_p, w>`.
///
/// Returns the pooled vector `h = sum_p alpha_p e_p` of length C and the
/// softmax weights `alpha` in position order.
pub fn attention_pool<T: Scalar>(e: &Tensor<T>, w: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>)> {
    let c = *e
        .shape()
        .first()
        .ok_or_else(|| OncoError::Shape("attention input has no channel axis".into()))?;
    if w.len() != c || c == 0 {
        return Err(OncoError::Shape(format!(
            "attention vector of length {} for {} channels",
            w.len(),
            c
        )));
    }
    let p = e.len() / c;
    let mut scores = vec![T::zero(); p];
    T::gemm(
        1,
        c,
        p,
        T::one(),
        w.data(),
        (c as isize, 1),
        e.data(),
        (p as isize, 1),
        T::zero(),
        &mut scores,
        (p as isize, 1),
    );
    let alpha = softmax(&scores);
    let mut h = Tensor::zeros(&[c]);
    T::gemm(
        c,
        p,
        1,
        T::one(),
        e.data(),
        (p as isize, 1),
        &alpha,
        (1, 1),
        T::zero(),
        h.data_mut(),
        (1, 1),
    );
    Ok((h, alpha))
}

/// Gradients of [`attention_pool`] with respect to `e` and `w`.
pub fn attention_pool_backward<T: Scalar>(
    e: &Tensor<T>,
    w: &Tensor<T>,
    alpha: &[T],
    dh: &[T],
) -> (Tensor<T>, Tensor<T>) {
    let c = w.len();
    let p = alpha.len();
    let mut dalpha = vec![T::zero(); p];
    T::gemm(
        1,
        c,
        p,
        T::one(),
        dh,
        (c as isize, 1),
        e.data(),
        (p as isize, 1),
        T::zero(),
        &mut dalpha,
        (p as isize, 1),
    );
    let mean: T = alpha.iter().zip(&dalpha).map(|(&a, &d)| a * d).sum();
    let ds: Vec<T> = alpha
        .iter()
        .zip(&dalpha)
        .map(|(&a, &d)| a * (d - mean))
        .collect();

    let mut de = Tensor::zeros(e.shape());
    for (ch, row) in de.data_mut().chunks_mut(p).enumerate() {
        let (g, wc) = (dh[ch], w.data()[ch]);
        for ((v, &a), &s) in row.iter_mut().zip(alpha).zip(&ds) {
            *v = a * g + s * wc;
        }
    }
    let mut dw = Tensor::zeros(w.shape());
    T::gemm(
        c,
        p,
        1,
        T::one(),
        e.data(),
        (p as isize, 1),
        &ds,
        (1, 1),
        T::zero(),
        dw.data_mut(),
        (1, 1),
    );
    (de, dw)
}

/// Soft attention decoder applied to one encoding.
pub fn attend<T: Scalar>(enc: &Encoding<T>, w: &[T]) -> Result<(DecoderRepr<T>, AttentionWeights<T>)> {
    let wt = Tensor::from_vec(&[w.len()], w.to_vec())?;
    let (h, alpha) = attention_pool(enc.grid(), &wt)?;
    let spatial = enc.grid().shape()[1..].to_vec();
    Ok((
        DecoderRepr::new(h.into_data()),
        AttentionWeights::new(Tensor::from_vec(&spatial, alpha)?),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn encoding(c: usize, spatial: &[usize], data: Vec<f64>) -> Encoding<f64> {
        let mut shape = vec![c];
        shape.extend_from_slice(spatial);
        Encoding::new(Tensor::from_vec(&shape, data).unwrap()).unwrap()
    }

    #[test]
    fn identical_voxels_give_uniform_weights_and_that_voxel() {
        let v = [0.5, -2.0, 3.0];
        let n = 2 * 7 * 7;
        let data: Vec<f64> = (0..3).flat_map(|c| std::iter::repeat_n(v[c], n)).collect();
        let enc = encoding(3, &[2, 7, 7], data);
        let (h, a) = attend(&enc, &[0.3, 0.1, -0.7]).unwrap();
        for &x in a.alpha().data() {
            assert!((x - 1.0 / n as f64).abs() < 1e-15);
        }
        for c in 0..3 {
            assert!((h.values()[c] - v[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_weights_give_mean_voxel() {
        let data: Vec<f64> = (0..2 * 4).map(|i| i as f64).collect();
        let enc = encoding(2, &[1, 2, 2], data);
        let (h, a) = attend(&enc, &[0.0, 0.0]).unwrap();
        assert!(a.alpha().data().iter().all(|&x| (x - 0.25).abs() < 1e-15));
        assert_eq!(h.values(), &[1.5, 5.5]);
    }

    #[test]
    fn two_voxel_scores_ln3_and_zero() {
        // channel 0 holds the score directly when w = (1)
        let enc = encoding(1, &[1, 1, 2], vec![3f64.ln(), 0.0]);
        let (_, a) = attend(&enc, &[1.0]).unwrap();
        let oracle = [3.0 / 4.0, 1.0 / 4.0];
        for (x, y) in a.alpha().data().iter().zip(oracle) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn weights_normalized_and_output_in_convex_hull(
            data in proptest::collection::vec(-5.0f64..5.0, 4 * 12),
            w in proptest::collection::vec(-2.0f64..2.0, 4),
        ) {
            let enc = encoding(4, &[1, 3, 4], data.clone());
            let (h, a) = attend(&enc, &w).unwrap();
            let s: f64 = a.alpha().data().iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(a.alpha().data().iter().all(|&x| x >= 0.0));
            for c in 0..4 {
                let row = &data[c * 12..(c + 1) * 12];
                let lo = row.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(h.values()[c] >= lo - 1e-12 && h.values()[c] <= hi + 1e-12);
            }
        }
    }
}
