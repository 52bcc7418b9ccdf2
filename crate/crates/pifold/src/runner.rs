//! Execution abstraction over the numeric kernels. The featurizer and
//! model forward passes are written once against [`Runner`]; running them
//! on a [`crate::tape::Tape`] records gradients, while [`Eval`] computes
//! values only and drops intermediates as they go out of scope (which keeps
//! long-chain decoding memory-bounded).

use crate::error::Result;
use crate::geometry::RbfSpec;
use crate::ops::{self, FramesCast};
use crate::real::Real;
use crate::tensor::Tensor;

pub trait Runner<T: Real> {
    type V: Clone;

    fn constant(&mut self, t: Tensor<T>) -> Self::V;

    /// Register a learnable tensor: on a tape this marks it
    /// `requires_grad` so the backward sweep tracks it; the plain
    /// evaluator treats it like any constant.
    fn param(&mut self, t: Tensor<T>) -> Self::V {
        self.constant(t.with_requires_grad(true))
    }

    fn val<'a>(&'a self, v: &'a Self::V) -> &'a Tensor<T>;

    fn matmul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn sub(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn add_bias(&mut self, x: &Self::V, bias: &Self::V) -> Result<Self::V>;
    fn concat_cols(&mut self, parts: &[Self::V]) -> Result<Self::V>;
    fn gather_rows(&mut self, x: &Self::V, idx: &[usize]) -> Result<Self::V>;
    fn repeat_row(&mut self, x: &Self::V, n: usize) -> Result<Self::V>;
    fn segment_softmax(&mut self, x: &Self::V, seg: &[usize], n_seg: usize) -> Result<Self::V>;
    fn segment_sum(&mut self, x: &Self::V, seg: &[usize], n_seg: usize) -> Result<Self::V>;
    fn segment_mean(&mut self, x: &Self::V, seg: &[usize], n_seg: usize) -> Result<Self::V>;
    fn segment_weighted_sum(
        &mut self,
        w: &Self::V,
        v: &Self::V,
        seg: &[usize],
        n_seg: usize,
    ) -> Result<Self::V>;
    fn sigmoid(&mut self, x: &Self::V) -> Result<Self::V>;
    fn gelu(&mut self, x: &Self::V) -> Result<Self::V>;
    fn layer_norm(&mut self, x: &Self::V, gain: &Self::V, bias: &Self::V) -> Result<Self::V>;
    fn nll_loss(&mut self, logits: &Self::V, labels: &[usize], mask: &[bool]) -> Result<Self::V>;
    fn sum_all(&mut self, x: &Self::V) -> Result<Self::V>;
    fn mean_all(&mut self, x: &Self::V) -> Result<Self::V>;
    fn frame_map(&mut self, points: &Self::V, frames: &FramesCast<T>) -> Result<Self::V>;
    fn rbf_dist(&mut self, a: &Self::V, b: &Self::V, spec: &RbfSpec) -> Result<Self::V>;
}

/// Value-only runner: no recording, no gradients, no retained intermediates.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eval;

impl<T: Real> Runner<T> for Eval {
    type V = Tensor<T>;

    fn constant(&mut self, t: Tensor<T>) -> Tensor<T> {
        t
    }

    fn val<'a>(&'a self, v: &'a Tensor<T>) -> &'a Tensor<T> {
        v
    }

    fn matmul(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        ops::matmul(a, b)
    }

    fn add(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        ops::add(a, b)
    }

    fn sub(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        ops::sub(a, b)
    }

    fn mul(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        ops::mul(a, b)
    }

    fn add_bias(&mut self, x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
        ops::add_bias(x, bias)
    }

    fn concat_cols(&mut self, parts: &[Tensor<T>]) -> Result<Tensor<T>> {
        let refs: Vec<&Tensor<T>> = parts.iter().collect();
        ops::concat_cols(&refs)
    }

    fn gather_rows(&mut self, x: &Tensor<T>, idx: &[usize]) -> Result<Tensor<T>> {
        ops::gather_rows(x, idx)
    }

    fn repeat_row(&mut self, x: &Tensor<T>, n: usize) -> Result<Tensor<T>> {
        ops::repeat_row(x, n)
    }

    fn segment_softmax(&mut self, x: &Tensor<T>, seg: &[usize], n_seg: usize) -> Result<Tensor<T>> {
        ops::segment_softmax(x, seg, n_seg)
    }

    fn segment_sum(&mut self, x: &Tensor<T>, seg: &[usize], n_seg: usize) -> Result<Tensor<T>> {
        ops::segment_sum(x, seg, n_seg)
    }

    fn segment_mean(&mut self, x: &Tensor<T>, seg: &[usize], n_seg: usize) -> Result<Tensor<T>> {
        ops::segment_mean(x, seg, n_seg)
    }

    fn segment_weighted_sum(
        &mut self,
        w: &Tensor<T>,
        v: &Tensor<T>,
        seg: &[usize],
        n_seg: usize,
    ) -> Result<Tensor<T>> {
        ops::segment_weighted_sum(w, v, seg, n_seg)
    }

    fn sigmoid(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(ops::sigmoid(x))
    }

    fn gelu(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(ops::gelu(x))
    }

    fn layer_norm(&mut self, x: &Tensor<T>, gain: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
        ops::layer_norm(x, gain, bias)
    }

    fn nll_loss(&mut self, logits: &Tensor<T>, labels: &[usize], mask: &[bool]) -> Result<Tensor<T>> {
        ops::nll_loss(logits, labels, mask)
    }

    fn sum_all(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(ops::sum_all(x))
    }

    fn mean_all(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(ops::mean_all(x))
    }

    fn frame_map(&mut self, points: &Tensor<T>, frames: &FramesCast<T>) -> Result<Tensor<T>> {
        ops::frame_map(points, frames)
    }

    fn rbf_dist(&mut self, a: &Tensor<T>, b: &Tensor<T>, spec: &RbfSpec) -> Result<Tensor<T>> {
        ops::rbf_dist(a, b, spec)
    }
}
