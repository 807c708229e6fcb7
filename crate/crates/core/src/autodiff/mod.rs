//! Tape-based reverse-mode automatic differentiation.
//!
//! Parameters live in a [`ParamStore`]; a [`Tape`] copies their values in when
//! they are used, records one node per primitive, and a backward sweep
//! accumulates `d loss / d parameter` into every trainable parameter that the
//! loss depends on. Gradients accumulate until [`ParamStore::zero_grad`].

pub mod check;
mod params;
mod tape;

use alloc::format;
use alloc::vec::Vec;

pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{backward, Gradients, Tape, Var};

use crate::error::{Error, Result};

impl Tape {
    /// Mean over the token axis of `x[B, T, d]`.
    pub fn pool_mean(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape();
        if s.len() != 3 {
            return Err(Error::shape("pool_mean", s, &[0, 0, 0]));
        }
        self.mean_axis(x, 1)
    }

    /// Attention pooling: `a = softmax_t(<x_t, w>)`, `out = sum_t a_t x_t`.
    pub fn pool_attention(&mut self, x: Var, w: Var) -> Result<Var> {
        let scores = self.row_dot(x, w)?;
        let a = self.softmax(scores);
        self.weighted_sum(a, x)
    }
}

/// `{0, 1}` mask with ones at the `k` largest entries of `p`. Ties go to the
/// lower index.
pub fn topk_mask(p: &[f64], k: usize) -> Result<Vec<f64>> {
    let idx = topk_indices(p, k)?;
    let mut m = alloc::vec![0.0; p.len()];
    for i in idx {
        m[i] = 1.0;
    }
    Ok(m)
}

/// Indices of the `k` largest entries, in descending order of value.
pub fn topk_indices(p: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > p.len() {
        return Err(Error::Config(format!("top-k needs 1 <= k <= {}, got {k}", p.len())));
    }
    let mut idx: Vec<usize> = (0..p.len()).collect();
    // stable sort keeps lower indices first among equal values
    idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]));
    idx.truncate(k);
    Ok(idx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use alloc::vec;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn linear_identity_and_hand_arithmetic() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let w = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = tape.linear(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0]);

        let x = tape.constant(t(&[1, 2], &[1.0, 1.0]));
        let w = tape.constant(t(&[2, 2], &[2.0, 3.0, 4.0, 5.0]));
        let b = tape.constant(t(&[2], &[1.0, 1.0]));
        let y = tape.linear(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[7.0, 9.0]);
    }

    #[test]
    fn linear_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 3]));
        let w = tape.constant(Tensor::zeros(&[4, 2]));
        match tape.linear(x, w, None) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![4, 2]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn conv_identity_and_box_sum() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 5], &[0.0, 0.0, 1.0, 0.0, 0.0]));
        let k = tape.constant(t(&[1, 1, 1], &[1.0]));
        let y = tape.conv1d(x, k, None, 1).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 1.0, 0.0, 0.0]);

        let x = tape.constant(t(&[1, 1, 5], &[1.0, 2.0, 3.0, 4.0, 5.0]));
        let k = tape.constant(t(&[1, 1, 3], &[1.0, 1.0, 1.0]));
        let y = tape.conv1d(x, k, None, 1).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 6.0, 9.0, 12.0, 9.0]);
    }

    #[test]
    fn conv_rejects_even_kernel_and_zero_dilation() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 8]));
        let k2 = tape.constant(Tensor::zeros(&[1, 1, 2]));
        let k3 = tape.constant(Tensor::zeros(&[1, 1, 3]));
        assert!(matches!(tape.conv1d(x, k2, None, 1), Err(Error::Config(_))));
        assert!(matches!(tape.conv1d(x, k3, None, 0), Err(Error::Config(_))));
    }

    #[test]
    fn relu_values_and_gradient() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = tape.sum(y);
        let g = tape.gradients(s).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[0.0, 0.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[-1.0, 2.0]));
        let y = tape.relu(x);
        let s = tape.sum(y);
        assert_eq!(tape.gradients(s).unwrap().wrt(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn softmax_symmetry_and_overflow() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[0.0, 0.0]));
        let b = tape.constant(t(&[2], &[1000.0, 1000.0]));
        let sa = tape.softmax(a);
        let sb = tape.softmax(b);
        assert_eq!(tape.value(sa).data(), &[0.5, 0.5]);
        assert_eq!(tape.value(sb).data(), &[0.5, 0.5]);
    }

    #[test]
    fn pool_mean_cases() {
        let mut tape = Tape::new();
        let one = tape.constant(t(&[1, 1, 3], &[1.0, 2.0, 3.0]));
        let m = tape.pool_mean(one).unwrap();
        assert_eq!(tape.value(m).data(), &[1.0, 2.0, 3.0]);
        let two = tape.constant(t(&[1, 2, 1], &[1.0, 3.0]));
        let m = tape.pool_mean(two).unwrap();
        assert_eq!(tape.value(m).data(), &[2.0]);
    }

    #[test]
    fn pool_attention_zero_weight_equals_mean() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 3, 2], &[1.0, 2.0, 3.0, 5.0, -1.0, 0.5]));
        let w = tape.constant(Tensor::zeros(&[2]));
        let a = tape.pool_attention(x, w).unwrap();
        let m = tape.pool_mean(x).unwrap();
        for (p, q) in tape.value(a).data().iter().zip(tape.value(m).data()) {
            assert!((p - q).abs() < 1e-15);
        }
    }

    #[test]
    fn pool_attention_saturates_on_dominant_token() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 3, 2], &[1.0, 0.0, 0.0, 1.0, 50.0, 2.0]));
        let w = tape.constant(t(&[2], &[10.0, 0.0]));
        let a = tape.pool_attention(x, w).unwrap();
        let v = tape.value(a).data();
        assert!((v[0] - 50.0).abs() < 1e-9 && (v[1] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn backward_square_and_unreached_param() {
        let mut store = ParamStore::new();
        let px = store.add("x", t(&[1], &[3.0]));
        let unused = store.add("unused", t(&[2], &[1.0, 1.0]));
        let mut tape = Tape::new();
        let x = tape.param(&store, px);
        let _u = tape.param(&store, unused);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        backward(&tape, loss, &mut store).unwrap();
        assert_eq!(store.get(px).grad.data(), &[6.0]);
        assert_eq!(store.get(unused).grad.data(), &[0.0, 0.0]);
        // accumulation then reset
        backward(&tape, loss, &mut store).unwrap();
        assert_eq!(store.get(px).grad.data(), &[12.0]);
        store.zero_grad();
        assert_eq!(store.get(px).grad.data(), &[0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2]));
        assert!(matches!(tape.gradients(x), Err(Error::Contract(_))));
    }

    #[test]
    fn frozen_params_receive_nothing() {
        let mut store = ParamStore::new();
        let p = store.add("p", t(&[1], &[2.0]));
        store.get_mut(p).trainable = false;
        let mut tape = Tape::new();
        let v = tape.param(&store, p);
        let l = tape.sum(v);
        backward(&tape, l, &mut store).unwrap();
        assert_eq!(store.get(p).grad.data(), &[0.0]);
    }

    #[test]
    fn topk_examples() {
        assert_eq!(topk_mask(&[0.7, 0.2, 0.1], 1).unwrap(), vec![1.0, 0.0, 0.0]);
        assert_eq!(topk_mask(&[0.25; 4], 2).unwrap(), vec![1.0, 1.0, 0.0, 0.0]);
        assert!(matches!(topk_mask(&[0.5, 0.5], 3), Err(Error::Config(_))));
        assert!(topk_mask(&[0.5, 0.5], 0).is_err());
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::zeros(&[1, 2]));
        assert!(matches!(tape.cross_entropy(l, &[2]), Err(Error::Data(_))));
    }
}
