//! Define-by-run reverse-mode differentiation. Operations executed through
//! a [`Tape`] record themselves in execution order; [`Tape::backward`]
//! replays them in exact reverse order, accumulating vector-Jacobian
//! products. A tape is single-threaded and single-use: running backward a
//! second time without a fresh forward pass is an error.

use crate::error::{Error, Result};
use crate::geometry::RbfSpec;
use crate::ops::{self, FramesCast};
use crate::real::Real;
use crate::runner::Runner;
use crate::tensor::Tensor;

/// Handle to a value stored on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Matmul { a: Var, b: Var, out: Var },
    Add { a: Var, b: Var, out: Var },
    Sub { a: Var, b: Var, out: Var },
    Mul { a: Var, b: Var, out: Var },
    AddBias { x: Var, bias: Var, out: Var },
    ConcatCols { parts: Vec<Var>, widths: Vec<usize>, out: Var },
    GatherRows { x: Var, idx: Vec<usize>, out: Var },
    RepeatRow { x: Var, out: Var },
    SegmentSoftmax { seg: Vec<usize>, n_seg: usize, x: Var, out: Var },
    SegmentSum { seg: Vec<usize>, x: Var, out: Var },
    SegmentMean { seg: Vec<usize>, n_seg: usize, x: Var, out: Var },
    SegmentWeightedSum { seg: Vec<usize>, w: Var, v: Var, out: Var },
    Sigmoid { x: Var, out: Var },
    Gelu { x: Var, out: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, out: Var },
    NllLoss { logits: Var, labels: Vec<usize>, mask: Vec<bool>, out: Var },
    SumAll { x: Var, out: Var },
    MeanAll { x: Var, out: Var },
    FrameMap { points: Var, frames: FramesCast<T>, out: Var },
    RbfDist { a: Var, b: Var, spec: RbfSpec, out: Var },
}

/// Recorded forward pass plus the value arena. Each variable carries a
/// `tracked` flag seeded from `Tensor::requires_grad` and propagated
/// forward through recorded ops; the backward sweep skips anything the
/// tracked set cannot reach.
pub struct Tape<T> {
    vals: Vec<Tensor<T>>,
    tracked: Vec<bool>,
    ops: Vec<Op<T>>,
    consumed: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { vals: Vec::new(), tracked: Vec::new(), ops: Vec::new(), consumed: false }
    }

    fn alloc(&mut self, t: Tensor<T>) -> Var {
        let id = Var(self.vals.len());
        self.tracked.push(t.requires_grad());
        self.vals.push(t);
        id
    }

    fn propagate(&mut self, out: Var, inputs: &[Var]) {
        if inputs.iter().any(|v| self.tracked[v.0]) {
            self.tracked[out.0] = true;
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.vals[v.0]
    }

    pub fn num_ops(&self) -> usize {
        self.ops.len()
    }

    /// Reverse sweep from a scalar loss. Gradients accumulate for every
    /// gradient-tracked variable the loss depends on; constants and
    /// variables outside the dependency cone report `None`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        self.consumed = true;
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape {
                op: "backward",
                detail: format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.vals.len()];
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for op in self.ops.iter().rev() {
            backward_op(op, &self.vals, &self.tracked, &mut grads)?;
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<T: Real>(
    grads: &mut [Option<Tensor<T>>],
    tracked: &[bool],
    var: Var,
    delta: Tensor<T>,
) {
    if !tracked[var.0] {
        return;
    }
    match &mut grads[var.0] {
        Some(existing) => {
            debug_assert!(existing.same_shape(&delta));
            for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                *e += *d;
            }
        }
        None => grads[var.0] = Some(delta),
    }
}

fn backward_op<T: Real>(
    op: &Op<T>,
    vals: &[Tensor<T>],
    tracked: &[bool],
    grads: &mut [Option<Tensor<T>>],
) -> Result<()> {
    macro_rules! grad_out {
        ($out:expr) => {
            match &grads[$out.0] {
                Some(g) => g.clone(),
                None => return Ok(()),
            }
        };
    }
    match op {
        Op::Matmul { a, b, out } => {
            let g = grad_out!(out);
            accumulate(grads, tracked, *a, ops::matmul_a_bt(&g, &vals[b.0])?);
            accumulate(grads, tracked, *b, ops::matmul_at_b(&vals[a.0], &g)?);
        }
        Op::Add { a, b, out } => {
            let g = grad_out!(out);
            accumulate(grads, tracked, *a, g.clone());
            accumulate(grads, tracked, *b, g);
        }
        Op::Sub { a, b, out } => {
            let g = grad_out!(out);
            let mut neg = g.clone();
            for v in neg.data_mut() {
                *v = -*v;
            }
            accumulate(grads, tracked, *a, g);
            accumulate(grads, tracked, *b, neg);
        }
        Op::Mul { a, b, out } => {
            let g = grad_out!(out);
            accumulate(grads, tracked, *a, ops::mul(&g, &vals[b.0])?);
            accumulate(grads, tracked, *b, ops::mul(&g, &vals[a.0])?);
        }
        Op::AddBias { x, bias, out } => {
            let g = grad_out!(out);
            accumulate(grads, tracked, *bias, ops::column_sums(&g));
            accumulate(grads, tracked, *x, g);
        }
        Op::ConcatCols { parts, widths, out } => {
            let g = grad_out!(out);
            let n = g.rows();
            let mut offset = 0;
            for (part, &w) in parts.iter().zip(widths) {
                let mut data = Vec::with_capacity(n * w);
                for r in 0..n {
                    let row = g.row(r);
                    data.extend_from_slice(&row[offset..offset + w]);
                }
                accumulate(grads, tracked, *part, Tensor::new(vec![n, w], data)?);
                offset += w;
            }
        }
        Op::GatherRows { x, idx, out } => {
            let g = grad_out!(out);
            let d = g.cols();
            let n = vals[x.0].rows();
            let mut gx = vec![T::zero(); n * d];
            for (r, &i) in idx.iter().enumerate() {
                for (dst, &src) in gx[i * d..(i + 1) * d].iter_mut().zip(g.row(r)) {
                    *dst += src;
                }
            }
            accumulate(grads, tracked, *x, Tensor::new(vec![n, d], gx)?);
        }
        Op::RepeatRow { x, out } => {
            let g = grad_out!(out);
            let sums = ops::column_sums(&g);
            let d = sums.numel();
            accumulate(grads, tracked, *x, Tensor::new(vec![1, d], sums.into_data())?);
        }
        Op::SegmentSoftmax { seg, n_seg, x, out } => {
            let g = grad_out!(out);
            let y = &vals[out.0];
            let h = y.cols();
            let m = seg.len();
            // per segment, per column: dx = y ⊙ (g − Σ_seg g ⊙ y)
            let mut dots = vec![T::zero(); n_seg * h];
            for (r, &s) in seg.iter().enumerate() {
                for c in 0..h {
                    dots[s * h + c] += g.data()[r * h + c] * y.data()[r * h + c];
                }
            }
            let mut gx = vec![T::zero(); m * h];
            for (r, &s) in seg.iter().enumerate() {
                for c in 0..h {
                    gx[r * h + c] =
                        y.data()[r * h + c] * (g.data()[r * h + c] - dots[s * h + c]);
                }
            }
            accumulate(grads, tracked, *x, Tensor::new(y.shape().to_vec(), gx)?);
        }
        Op::SegmentSum { seg, x, out } => {
            let g = grad_out!(out);
            accumulate(grads, tracked, *x, ops::gather_rows(&g, seg)?);
        }
        Op::SegmentMean { seg, n_seg, x, out } => {
            let g = grad_out!(out);
            let counts = ops::segment_counts(seg, *n_seg);
            let mut gx = ops::gather_rows(&g, seg)?;
            let d = gx.cols();
            for (r, &s) in seg.iter().enumerate() {
                let inv = T::one() / T::from(counts[s]).unwrap();
                for v in &mut gx.data_mut()[r * d..(r + 1) * d] {
                    *v *= inv;
                }
            }
            accumulate(grads, tracked, *x, gx);
        }
        Op::SegmentWeightedSum { seg, w, v, out } => {
            let g = grad_out!(out);
            let wt = &vals[w.0];
            let vt = &vals[v.0];
            let h = if wt.rank() == 1 { 1 } else { wt.cols() };
            let m = vt.rows();
            let d = vt.cols();
            let dh = d / h;
            let mut gw = vec![T::zero(); m * h];
            let mut gv = vec![T::zero(); m * d];
            for r in 0..m {
                let s = seg[r];
                let grow = g.row(s);
                let vrow = vt.row(r);
                for hb in 0..h {
                    let wv = wt.data()[r * h + hb];
                    let mut acc = T::zero();
                    for c in 0..dh {
                        let gg = grow[hb * dh + c];
                        acc += gg * vrow[hb * dh + c];
                        gv[r * d + hb * dh + c] = wv * gg;
                    }
                    gw[r * h + hb] = acc;
                }
            }
            accumulate(grads, tracked, *w, Tensor::new(wt.shape().to_vec(), gw)?);
            accumulate(grads, tracked, *v, Tensor::new(vec![m, d], gv)?);
        }
        Op::Sigmoid { x, out } => {
            let g = grad_out!(out);
            let y = &vals[out.0];
            let data = g
                .data()
                .iter()
                .zip(y.data())
                .map(|(&gg, &yy)| gg * yy * (T::one() - yy))
                .collect();
            accumulate(grads, tracked, *x, Tensor::new(y.shape().to_vec(), data)?);
        }
        Op::Gelu { x, out } => {
            let g = grad_out!(out);
            let xt = &vals[x.0];
            let data = g
                .data()
                .iter()
                .zip(xt.data())
                .map(|(&gg, &xx)| gg * ops::gelu_grad_scalar(xx))
                .collect();
            accumulate(grads, tracked, *x, Tensor::new(xt.shape().to_vec(), data)?);
        }
        Op::LayerNorm { x, gain, bias, out } => {
            let g = grad_out!(out);
            let xt = &vals[x.0];
            let gt = &vals[gain.0];
            let (n, d) = (xt.rows(), xt.cols());
            let eps: T = crate::real::lit(ops::LAYER_NORM_EPS);
            let dn = T::from(d).unwrap();
            let mut gx = vec![T::zero(); n * d];
            let mut ggain = vec![T::zero(); d];
            let mut gbias = vec![T::zero(); d];
            for r in 0..n {
                let row = xt.row(r);
                let grow = g.row(r);
                let mean = row.iter().copied().sum::<T>() / dn;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
                let inv = T::one() / (var + eps).sqrt();
                // x̂ = (x − μ)·inv ; dŷ = g ⊙ gain
                let mut mean_dxh = T::zero();
                let mut mean_dxh_xh = T::zero();
                for c in 0..d {
                    let xh = (row[c] - mean) * inv;
                    let dxh = grow[c] * gt.data()[c];
                    ggain[c] += grow[c] * xh;
                    gbias[c] += grow[c];
                    mean_dxh += dxh;
                    mean_dxh_xh += dxh * xh;
                }
                mean_dxh /= dn;
                mean_dxh_xh /= dn;
                for c in 0..d {
                    let xh = (row[c] - mean) * inv;
                    let dxh = grow[c] * gt.data()[c];
                    gx[r * d + c] = inv * (dxh - mean_dxh - xh * mean_dxh_xh);
                }
            }
            accumulate(grads, tracked, *x, Tensor::new(vec![n, d], gx)?);
            accumulate(grads, tracked, *gain, Tensor::vector(ggain));
            accumulate(grads, tracked, *bias, Tensor::vector(gbias));
        }
        Op::NllLoss { logits, labels, mask, out } => {
            let g = grad_out!(out).item();
            let lt = &vals[logits.0];
            let (n, d) = (lt.rows(), lt.cols());
            let count = mask.iter().filter(|&&m| m).count();
            let scale = g / T::from(count).unwrap();
            let probs = ops::softmax_rows(lt);
            let mut gx = vec![T::zero(); n * d];
            for r in 0..n {
                if !mask[r] {
                    continue;
                }
                for c in 0..d {
                    let onehot = if c == labels[r] { T::one() } else { T::zero() };
                    gx[r * d + c] = scale * (probs.at(r, c) - onehot);
                }
            }
            accumulate(grads, tracked, *logits, Tensor::new(vec![n, d], gx)?);
        }
        Op::SumAll { x, out } => {
            let g = grad_out!(out).item();
            let xt = &vals[x.0];
            accumulate(grads, tracked, *x, Tensor::filled(xt.shape().to_vec(), g));
        }
        Op::MeanAll { x, out } => {
            let g = grad_out!(out).item();
            let xt = &vals[x.0];
            let scale = g / T::from(xt.numel()).unwrap();
            accumulate(grads, tracked, *x, Tensor::filled(xt.shape().to_vec(), scale));
        }
        Op::FrameMap { points, frames, out } => {
            let g = grad_out!(out);
            let kn = vals[points.0].rows();
            accumulate(grads, tracked, *points, ops::frame_map_backward(&g, frames, kn));
        }
        Op::RbfDist { a, b, spec, out } => {
            let g = grad_out!(out);
            let ga = ops::rbf_dist_backward(&g, &vals[a.0], &vals[b.0], spec);
            let mut gb = ga.clone();
            for v in gb.data_mut() {
                *v = -*v;
            }
            accumulate(grads, tracked, *a, ga);
            accumulate(grads, tracked, *b, gb);
        }
    }
    Ok(())
}

/// Result of a backward sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for a variable, or zeros of the given shape if no gradient
    /// flowed to it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape.to_vec()),
        }
    }
}

impl<T: Real> Runner<T> for Tape<T> {
    type V = Var;

    fn constant(&mut self, t: Tensor<T>) -> Var {
        self.alloc(t)
    }

    fn val<'a>(&'a self, v: &'a Var) -> &'a Tensor<T> {
        self.value(*v)
    }

    fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = self.alloc(ops::matmul(&self.vals[a.0], &self.vals[b.0])?);
        self.propagate(out, &[*a, *b]);
        self.ops.push(Op::Matmul { a: *a, b: *b, out });
        Ok(out)
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = self.alloc(ops::add(&self.vals[a.0], &self.vals[b.0])?);
        self.propagate(out, &[*a, *b]);
        self.ops.push(Op::Add { a: *a, b: *b, out });
        Ok(out)
    }

    fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = self.alloc(ops::sub(&self.vals[a.0], &self.vals[b.0])?);
        self.propagate(out, &[*a, *b]);
        self.ops.push(Op::Sub { a: *a, b: *b, out });
        Ok(out)
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = self.alloc(ops::mul(&self.vals[a.0], &self.vals[b.0])?);
        self.propagate(out, &[*a, *b]);
        self.ops.push(Op::Mul { a: *a, b: *b, out });
        Ok(out)
    }

    fn add_bias(&mut self, x: &Var, bias: &Var) -> Result<Var> {
        let out = self.alloc(ops::add_bias(&self.vals[x.0], &self.vals[bias.0])?);
        self.propagate(out, &[*x, *bias]);
        self.ops.push(Op::AddBias { x: *x, bias: *bias, out });
        Ok(out)
    }

    fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|v| &self.vals[v.0]).collect();
        let widths: Vec<usize> = tensors.iter().map(|t| t.cols()).collect();
        let out = self.alloc(ops::concat_cols(&tensors)?);
        self.propagate(out, parts);
        self.ops.push(Op::ConcatCols { parts: parts.to_vec(), widths, out });
        Ok(out)
    }

    fn gather_rows(&mut self, x: &Var, idx: &[usize]) -> Result<Var> {
        let out = self.alloc(ops::gather_rows(&self.vals[x.0], idx)?);
        self.propagate(out, &[*x]);
        self.ops.push(Op::GatherRows { x: *x, idx: idx.to_vec(), out });
        Ok(out)
    }

    fn repeat_row(&mut self, x: &Var, n: usize) -> Result<Var> {
        let out = self.alloc(ops::repeat_row(&self.vals[x.0], n)?);
        self.propagate(out, &[*x]);
        self.ops.push(Op::RepeatRow { x: *x, out });
        Ok(out)
    }

    fn segment_softmax(&mut self, x: &Var, seg: &[usize], n_seg: usize) -> Result<Var> {
        let out = self.alloc(ops::segment_softmax(&self.vals[x.0], seg, n_seg)?);
        self.propagate(out, &[*x]);
        self.ops.push(Op::SegmentSoftmax { seg: seg.to_vec(), n_seg, x: *x, out });
        Ok(out)
    }

    fn segment_sum(&mut self, x: &Var, seg: &[usize], n_seg: usize) -> Result<Var> {
        let out = self.alloc(ops::segment_sum(&self.vals[x.0], seg, n_seg)?);
        self.propagate(out, &[*x]);
        self.ops.push(Op::SegmentSum { seg: seg.to_vec(), x: *x, out });
        Ok(out)
    }

    fn segment_mean(&mut self, x: &Var, seg: &[usize], n_seg: usize) -> Result<Var> {
        let out = self.alloc(ops::segment_mean(&self.vals[x.0], seg, n_seg)?);
        self.propagate(out, &[*x]);
        self.ops.push(Op::SegmentMean { seg: seg.to_vec(), n_seg, x: *x, out });
        Ok(out)
    }

    fn segment_weighted_sum(
        &mut self,
        w: &Var,
        v: &Var,
        seg: &[usize],
        n_seg: usize,
    ) -> Result<Var> {
        let out =
            self.alloc(ops::segment_weighted_sum(&self.vals[w.0], &self.vals[v.0], seg, n_seg)?);
        self.propagate(out, &[*w, *v]);
        self.ops.push(Op::SegmentWeightedSum { seg: seg.to_vec(), w: *w, v: *v, out });
        Ok(out)
    }

    fn sigmoid(&mut self, x: &Var) -> Result<Var> {
        let out = self.alloc(ops::sigmoid(&self.vals[x.0]));
        self.propagate(out, &[*x]);
        self.ops.push(Op::Sigmoid { x: *x, out });
        Ok(out)
    }

    fn gelu(&mut self, x: &Var) -> Result<Var> {
        let out = self.alloc(ops::gelu(&self.vals[x.0]));
        self.propagate(out, &[*x]);
        self.ops.push(Op::Gelu { x: *x, out });
        Ok(out)
    }

    fn layer_norm(&mut self, x: &Var, gain: &Var, bias: &Var) -> Result<Var> {
        let out =
            self.alloc(ops::layer_norm(&self.vals[x.0], &self.vals[gain.0], &self.vals[bias.0])?);
        self.propagate(out, &[*x, *gain, *bias]);
        self.ops.push(Op::LayerNorm { x: *x, gain: *gain, bias: *bias, out });
        Ok(out)
    }

    fn nll_loss(&mut self, logits: &Var, labels: &[usize], mask: &[bool]) -> Result<Var> {
        let out = self.alloc(ops::nll_loss(&self.vals[logits.0], labels, mask)?);
        self.propagate(out, &[*logits]);
        self.ops.push(Op::NllLoss {
            logits: *logits,
            labels: labels.to_vec(),
            mask: mask.to_vec(),
            out,
        });
        Ok(out)
    }

    fn sum_all(&mut self, x: &Var) -> Result<Var> {
        let out = self.alloc(ops::sum_all(&self.vals[x.0]));
        self.propagate(out, &[*x]);
        self.ops.push(Op::SumAll { x: *x, out });
        Ok(out)
    }

    fn mean_all(&mut self, x: &Var) -> Result<Var> {
        let out = self.alloc(ops::mean_all(&self.vals[x.0]));
        self.propagate(out, &[*x]);
        self.ops.push(Op::MeanAll { x: *x, out });
        Ok(out)
    }

    fn frame_map(&mut self, points: &Var, frames: &FramesCast<T>) -> Result<Var> {
        let out = self.alloc(ops::frame_map(&self.vals[points.0], frames)?);
        self.propagate(out, &[*points]);
        self.ops.push(Op::FrameMap { points: *points, frames: frames.clone(), out });
        Ok(out)
    }

    fn rbf_dist(&mut self, a: &Var, b: &Var, spec: &RbfSpec) -> Result<Var> {
        let out = self.alloc(ops::rbf_dist(&self.vals[a.0], &self.vals[b.0], spec)?);
        self.propagate(out, &[*a, *b]);
        self.ops.push(Op::RbfDist { a: *a, b: *b, spec: spec.clone(), out });
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect()).unwrap()
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let xm = tape.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let _ = x;
        let loss = tape.mean_all(&xm).unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::TapeConsumed)));
    }

    #[test]
    fn backward_visits_ops_in_reverse_chain() {
        // loss = mean(x ⊙ x + x): d/dx = (2x + 1)/numel
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::matrix(1, 3, vec![1.0, -2.0, 0.5]).unwrap());
        let sq = tape.mul(&x, &x).unwrap();
        let sum = tape.add(&sq, &x).unwrap();
        let loss = tape.mean_all(&sum).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(x).unwrap();
        for (i, &xv) in [1.0, -2.0, 0.5].iter().enumerate() {
            assert!((g.data()[i] - (2.0 * xv + 1.0) / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constants_receive_no_gradients() {
        // gradients flow only through requires_grad inputs; constants on
        // the same path report None
        let mut tape = Tape::<f64>::new();
        let p = tape.param(Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
        let c = tape.constant(Tensor::matrix(1, 3, vec![4.0, 5.0, 6.0]).unwrap());
        let prod = tape.mul(&p, &c).unwrap();
        let loss = tape.sum_all(&prod).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[4.0, 5.0, 6.0]);
        assert!(grads.get(c).is_none(), "constants are not tracked");
    }

    #[test]
    fn independent_tapes_run_concurrently() {
        let work = |seed: u64| {
            let mut tape = Tape::<f64>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = tape.param(rand_tensor(&mut rng, vec![1, 6]));
            let sq = tape.mul(&x, &x).unwrap();
            let loss = tape.sum_all(&sq).unwrap();
            let grads = tape.backward(loss).unwrap();
            grads.get(x).unwrap().data().to_vec()
        };
        let sequential: Vec<Vec<f64>> = (0..4).map(work).collect();
        let handles: Vec<_> =
            (0..4u64).map(|s| std::thread::spawn(move || work(s))).collect();
        for (h, want) in handles.into_iter().zip(sequential) {
            assert_eq!(h.join().unwrap(), want);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut tape = Tape::<f64>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let a = tape.constant(rand_tensor(&mut rng, vec![4, 5]));
            let b = tape.constant(rand_tensor(&mut rng, vec![5, 3]));
            let c = tape.matmul(&a, &b).unwrap();
            let s = tape.gelu(&c).unwrap();
            tape.value(s).data().to_vec()
        };
        let x = run();
        let y = run();
        assert_eq!(x, y, "bit-identical outputs for identical inputs");
    }

    /// Central-difference check for every differentiable operation on a
    /// random input of its supported shape class.
    #[test]
    fn grad_check_every_operation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let step = 1e-4;
        let tol = 1e-4;
        let mut checked: Vec<(&str, f64)> = Vec::new();

        // matmul (both arguments)
        let a0 = rand_tensor(&mut rng, vec![3, 4]);
        let b0 = rand_tensor(&mut rng, vec![4, 2]);
        let b0c = b0.clone();
        let err = grad_check(
            |t, x| {
                let b = t.constant(b0c.clone());
                let m = t.matmul(&x, &b)?;
                t.mean_all(&m)
            },
            &a0,
            step,
        )
        .unwrap();
        checked.push(("matmul_lhs", err));
        let a0c = a0.clone();
        let err = grad_check(
            |t, x| {
                let a = t.constant(a0c.clone());
                let m = t.matmul(&a, &x)?;
                t.mean_all(&m)
            },
            &b0,
            step,
        )
        .unwrap();
        checked.push(("matmul_rhs", err));

        // elementwise add / sub / mul
        for name in ["add", "sub", "mul"] {
            let x0 = rand_tensor(&mut rng, vec![3, 3]);
            let other = rand_tensor(&mut rng, vec![3, 3]);
            let err = grad_check(
                |t, x| {
                    let o = t.constant(other.clone());
                    let y = match name {
                        "add" => t.add(&x, &o)?,
                        "sub" => t.sub(&x, &o)?,
                        _ => t.mul(&x, &o)?,
                    };
                    t.mean_all(&y)
                },
                &x0,
                step,
            )
            .unwrap();
            checked.push((name, err));
        }

        // add_bias (bias argument)
        let bias0 = rand_tensor(&mut rng, vec![4]);
        let xmat = rand_tensor(&mut rng, vec![3, 4]);
        let err = grad_check(
            |t, b| {
                let x = t.constant(xmat.clone());
                let y = t.add_bias(&x, &b)?;
                t.mean_all(&y)
            },
            &bias0,
            step,
        )
        .unwrap();
        checked.push(("add_bias", err));

        // concat + gather + repeat, driven through a nonlinearity so the
        // readout is not trivially linear
        let x0 = rand_tensor(&mut rng, vec![2, 3]);
        let othr = rand_tensor(&mut rng, vec![2, 2]);
        let err = grad_check(
            |t, x| {
                let o = t.constant(othr.clone());
                let cat = t.concat_cols(&[x, o])?;
                let gat = t.gather_rows(&cat, &[1, 0, 1])?;
                let act = t.gelu(&gat)?;
                t.mean_all(&act)
            },
            &x0,
            step,
        )
        .unwrap();
        checked.push(("concat_gather", err));

        let row0 = rand_tensor(&mut rng, vec![1, 5]);
        let err = grad_check(
            |t, x| {
                let rep = t.repeat_row(&x, 4)?;
                let act = t.sigmoid(&rep)?;
                t.mean_all(&act)
            },
            &row0,
            step,
        )
        .unwrap();
        checked.push(("repeat_row", err));

        // segment softmax / sum / mean / weighted sum
        let seg = vec![0usize, 0, 1, 1, 1, 2];
        let logits0 = rand_tensor(&mut rng, vec![6, 2]);
        let vals = rand_tensor(&mut rng, vec![6, 4]);
        let err = grad_check(
            |t, x| {
                let sm = t.segment_softmax(&x, &seg, 3)?;
                let v = t.constant(vals.clone());
                let agg = t.segment_weighted_sum(&sm, &v, &seg, 3)?;
                let act = t.gelu(&agg)?;
                t.mean_all(&act)
            },
            &logits0,
            step,
        )
        .unwrap();
        checked.push(("segment_softmax", err));

        let vals0 = rand_tensor(&mut rng, vec![6, 4]);
        let wfix = rand_tensor(&mut rng, vec![6, 2]);
        let err = grad_check(
            |t, v| {
                let w = t.constant(wfix.clone());
                let sm = t.segment_softmax(&w, &seg, 3)?;
                let agg = t.segment_weighted_sum(&sm, &v, &seg, 3)?;
                let act = t.sigmoid(&agg)?;
                t.mean_all(&act)
            },
            &vals0,
            step,
        )
        .unwrap();
        checked.push(("segment_weighted_sum_values", err));

        for name in ["segment_sum", "segment_mean"] {
            let x0 = rand_tensor(&mut rng, vec![6, 3]);
            let err = grad_check(
                |t, x| {
                    let y = match name {
                        "segment_sum" => t.segment_sum(&x, &seg, 3)?,
                        _ => t.segment_mean(&x, &seg, 3)?,
                    };
                    let act = t.gelu(&y)?;
                    t.mean_all(&act)
                },
                &x0,
                step,
            )
            .unwrap();
            checked.push((name, err));
        }

        // sigmoid / gelu
        for name in ["sigmoid", "gelu"] {
            let x0 = rand_tensor(&mut rng, vec![2, 6]);
            let err = grad_check(
                |t, x| {
                    let y = match name {
                        "sigmoid" => t.sigmoid(&x)?,
                        _ => t.gelu(&x)?,
                    };
                    t.mean_all(&y)
                },
                &x0,
                step,
            )
            .unwrap();
            checked.push((name, err));
        }

        // layer_norm (input, gain, bias)
        let x0 = rand_tensor(&mut rng, vec![3, 5]);
        let gain0 = rand_tensor(&mut rng, vec![5]);
        let bias0 = rand_tensor(&mut rng, vec![5]);
        let err = grad_check(
            |t, x| {
                let g = t.constant(gain0.clone());
                let b = t.constant(bias0.clone());
                let y = t.layer_norm(&x, &g, &b)?;
                let act = t.sigmoid(&y)?;
                t.mean_all(&act)
            },
            &x0,
            step,
        )
        .unwrap();
        checked.push(("layer_norm_x", err));
        let x0c = x0.clone();
        let bias0c = bias0.clone();
        let err = grad_check(
            |t, g| {
                let x = t.constant(x0c.clone());
                let b = t.constant(bias0c.clone());
                let y = t.layer_norm(&x, &g, &b)?;
                t.mean_all(&y)
            },
            &gain0,
            step,
        )
        .unwrap();
        checked.push(("layer_norm_gain", err));

        // nll loss
        let logits0 = rand_tensor(&mut rng, vec![4, 6]);
        let labels = vec![1usize, 3, 0, 5];
        let mask = vec![true, true, false, true];
        let err = grad_check(
            |t, x| t.nll_loss(&x, &labels, &mask),
            &logits0,
            step,
        )
        .unwrap();
        checked.push(("nll_loss", err));

        // frame_map + rbf_dist through virtual-atom style usage
        let protein = crate::data::synth_protein(9, 6);
        let frames = crate::geometry::local_frames(&protein);
        let cast = FramesCast::<f64>::from_frames(&frames);
        let pts0 = rand_tensor(&mut rng, vec![2, 3]);
        let spec = RbfSpec { count: 8, min: 0.0, max: 12.0 };
        let err = grad_check(
            |t, pts| {
                let placed = t.frame_map(&pts, &cast)?;
                let a = t.gather_rows(&placed, &[0, 2, 4, 6])?;
                let b = t.gather_rows(&placed, &[3, 5, 7, 9])?;
                let r = t.rbf_dist(&a, &b, &spec)?;
                t.mean_all(&r)
            },
            &pts0,
            step,
        )
        .unwrap();
        checked.push(("frame_map_rbf_dist", err));

        for (name, err) in &checked {
            assert!(
                *err < tol,
                "grad check for {name}: max rel error {err:.3e} >= {tol:.0e}"
            );
        }
    }
}
