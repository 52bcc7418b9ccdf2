//! Forward numeric kernels. Both execution paths — the recording tape and
//! the plain evaluator — call into these, so forward results are identical
//! whether or not gradients are being tracked.

use crate::error::{Error, Result};
use crate::geometry::{LocalFrame, RbfSpec};
use crate::real::{lit, Real};
use crate::tensor::Tensor;

// ── shape checks ─────────────────────────────────────────────────────

fn want_matrix<T: Real>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::Shape { op, detail: format!("expected matrix, got {:?}", t.shape()) });
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn want_same<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::Shape {
            op,
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    Ok(())
}

fn check_segments(op: &'static str, seg: &[usize], rows: usize, n_seg: usize) -> Result<()> {
    if seg.len() != rows {
        return Err(Error::Shape {
            op,
            detail: format!("{} segment ids for {} rows", seg.len(), rows),
        });
    }
    if rows == 0 || n_seg == 0 {
        return Err(Error::EmptySegment { op, segment: 0 });
    }
    let mut seen = vec![false; n_seg];
    for &s in seg {
        if s >= n_seg {
            return Err(Error::Shape { op, detail: format!("segment id {s} >= {n_seg}") });
        }
        seen[s] = true;
    }
    if let Some(missing) = seen.iter().position(|&s| !s) {
        return Err(Error::EmptySegment { op, segment: missing });
    }
    Ok(())
}

// ── dense linear algebra ─────────────────────────────────────────────

/// `[m, k] @ [k, n] -> [m, n]`, row-major ikj loop.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = want_matrix("matmul", a)?;
    let (kb, n) = want_matrix("matmul", b)?;
    if k != kb {
        return Err(Error::Shape {
            op: "matmul",
            detail: format!("inner dims {k} vs {kb}"),
        });
    }
    let mut out = vec![T::zero(); m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = ad[i * k + kk];
            let brow = &bd[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `aᵀ @ b` without materializing the transpose: `[k, m]ᵀ·[k, n] -> [m, n]`.
pub fn matmul_at_b<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, m) = want_matrix("matmul_at_b", a)?;
    let (kb, n) = want_matrix("matmul_at_b", b)?;
    if k != kb {
        return Err(Error::Shape {
            op: "matmul_at_b",
            detail: format!("inner dims {k} vs {kb}"),
        });
    }
    let mut out = vec![T::zero(); m * n];
    let ad = a.data();
    let bd = b.data();
    for kk in 0..k {
        let arow = &ad[kk * m..(kk + 1) * m];
        let brow = &bd[kk * n..(kk + 1) * n];
        for i in 0..m {
            let av = arow[i];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `a @ bᵀ`: `[m, k]·[n, k]ᵀ -> [m, n]`. Transposes `b` once so the hot
/// loop stays the vectorizable row-accumulation form.
pub fn matmul_a_bt<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (_m, k) = want_matrix("matmul_a_bt", a)?;
    let (n, kb) = want_matrix("matmul_a_bt", b)?;
    if k != kb {
        return Err(Error::Shape {
            op: "matmul_a_bt",
            detail: format!("inner dims {k} vs {kb}"),
        });
    }
    let bd = b.data();
    let mut bt = vec![T::zero(); k * n];
    for j in 0..n {
        for kk in 0..k {
            bt[kk * n + j] = bd[j * k + kk];
        }
    }
    matmul(a, &Tensor::new(vec![k, n], bt)?)
}

pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    want_same("add", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn sub<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    want_same("sub", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x - y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn mul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    want_same("mul", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Row-broadcast add: `[n, d] + [d] -> [n, d]`.
pub fn add_bias<T: Real>(x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, d) = want_matrix("add_bias", x)?;
    if bias.numel() != d {
        return Err(Error::Shape {
            op: "add_bias",
            detail: format!("bias len {} for {} cols", bias.numel(), d),
        });
    }
    let mut data = Vec::with_capacity(n * d);
    for r in 0..n {
        for (xv, bv) in x.row(r).iter().zip(bias.data()) {
            data.push(*xv + *bv);
        }
    }
    Tensor::new(vec![n, d], data)
}

/// Column sums of a matrix, as a vector `[d]`. (Backward of `add_bias`.)
pub fn column_sums<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (n, d) = (x.rows(), x.cols());
    let mut out = vec![T::zero(); d];
    for r in 0..n {
        for (o, &v) in out.iter_mut().zip(x.row(r)) {
            *o += v;
        }
    }
    Tensor::vector(out)
}

/// Concatenate matrices along the feature axis; all parts share a row count.
pub fn concat_cols<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    if parts.is_empty() {
        return Err(Error::Shape { op: "concat_cols", detail: "no parts".into() });
    }
    let n = parts[0].rows();
    for p in parts {
        want_matrix("concat_cols", p)?;
        if p.rows() != n {
            return Err(Error::Shape {
                op: "concat_cols",
                detail: format!("row counts differ: {} vs {}", p.rows(), n),
            });
        }
    }
    let total: usize = parts.iter().map(|p| p.cols()).sum();
    let mut data = Vec::with_capacity(n * total);
    for r in 0..n {
        for p in parts {
            data.extend_from_slice(p.row(r));
        }
    }
    Tensor::new(vec![n, total], data)
}

/// Select rows by index: `[n, d][idx] -> [len(idx), d]`.
pub fn gather_rows<T: Real>(x: &Tensor<T>, idx: &[usize]) -> Result<Tensor<T>> {
    let (n, d) = want_matrix("gather_rows", x)?;
    let mut data = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        if i >= n {
            return Err(Error::Shape {
                op: "gather_rows",
                detail: format!("row index {i} >= {n}"),
            });
        }
        data.extend_from_slice(x.row(i));
    }
    Tensor::new(vec![idx.len(), d], data)
}

/// Tile a single row `[1, d]` into `[n, d]`.
pub fn repeat_row<T: Real>(x: &Tensor<T>, n: usize) -> Result<Tensor<T>> {
    let (r, d) = want_matrix("repeat_row", x)?;
    if r != 1 {
        return Err(Error::Shape { op: "repeat_row", detail: format!("{r} rows, expected 1") });
    }
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        data.extend_from_slice(x.row(0));
    }
    Tensor::new(vec![n, d], data)
}

// ── segment operations ───────────────────────────────────────────────

/// Per-segment, per-column softmax with max subtraction. `x` is `[m]` or
/// `[m, h]`; segment `seg[r]` groups row `r`. Errors on NaN logits or any
/// empty segment in `0..n_seg`.
pub fn segment_softmax<T: Real>(x: &Tensor<T>, seg: &[usize], n_seg: usize) -> Result<Tensor<T>> {
    let (m, h) = if x.rank() == 1 { (x.shape()[0], 1) } else { (x.rows(), x.cols()) };
    check_segments("segment_softmax", seg, m, n_seg)?;
    if !x.all_finite() {
        return Err(Error::NonFinite { op: "segment_softmax" });
    }
    let xd = x.data();
    let mut maxes = vec![T::neg_infinity(); n_seg * h];
    for r in 0..m {
        let s = seg[r];
        for c in 0..h {
            let v = xd[r * h + c];
            if v > maxes[s * h + c] {
                maxes[s * h + c] = v;
            }
        }
    }
    let mut out = vec![T::zero(); m * h];
    let mut sums = vec![T::zero(); n_seg * h];
    for r in 0..m {
        let s = seg[r];
        for c in 0..h {
            let e = (xd[r * h + c] - maxes[s * h + c]).exp();
            out[r * h + c] = e;
            sums[s * h + c] += e;
        }
    }
    for r in 0..m {
        let s = seg[r];
        for c in 0..h {
            out[r * h + c] /= sums[s * h + c];
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Row-wise scatter-add into segments: `[m, d] -> [n_seg, d]`.
pub fn segment_sum<T: Real>(x: &Tensor<T>, seg: &[usize], n_seg: usize) -> Result<Tensor<T>> {
    let (m, d) = want_matrix("segment_sum", x)?;
    check_segments("segment_sum", seg, m, n_seg)?;
    let mut out = vec![T::zero(); n_seg * d];
    for (r, &s) in seg.iter().enumerate() {
        for (o, &v) in out[s * d..(s + 1) * d].iter_mut().zip(x.row(r)) {
            *o += v;
        }
    }
    Tensor::new(vec![n_seg, d], out)
}

pub fn segment_counts(seg: &[usize], n_seg: usize) -> Vec<usize> {
    let mut counts = vec![0usize; n_seg];
    for &s in seg {
        counts[s] += 1;
    }
    counts
}

/// Per-segment mean of rows: `[m, d] -> [n_seg, d]`.
pub fn segment_mean<T: Real>(x: &Tensor<T>, seg: &[usize], n_seg: usize) -> Result<Tensor<T>> {
    let mut out = segment_sum(x, seg, n_seg)?;
    let d = out.cols();
    let counts = segment_counts(seg, n_seg);
    let data = out.data_mut();
    for (s, &cnt) in counts.iter().enumerate() {
        let inv = T::one() / T::from(cnt).unwrap();
        for v in &mut data[s * d..(s + 1) * d] {
            *v *= inv;
        }
    }
    Ok(out)
}

/// Attention-weighted segment reduction. `w` is `[m]` or `[m, h]`, `v` is
/// `[m, d]` with `h | d`; head `hb` of weight row `r` scales the `hb`-th
/// `d/h` slice of value row `r`. Output `[n_seg, d]`:
/// `out[s] = Σ_{r: seg[r]=s} w[r] ⊙_heads v[r]`.
pub fn segment_weighted_sum<T: Real>(
    w: &Tensor<T>,
    v: &Tensor<T>,
    seg: &[usize],
    n_seg: usize,
) -> Result<Tensor<T>> {
    let (mw, h) = if w.rank() == 1 { (w.shape()[0], 1) } else { (w.rows(), w.cols()) };
    let (m, d) = want_matrix("segment_weighted_sum", v)?;
    if mw != m {
        return Err(Error::Shape {
            op: "segment_weighted_sum",
            detail: format!("{mw} weight rows vs {m} value rows"),
        });
    }
    if d % h != 0 {
        return Err(Error::Shape {
            op: "segment_weighted_sum",
            detail: format!("{h} heads do not divide {d} columns"),
        });
    }
    check_segments("segment_weighted_sum", seg, m, n_seg)?;
    let dh = d / h;
    let wd = w.data();
    let mut out = vec![T::zero(); n_seg * d];
    for r in 0..m {
        let s = seg[r];
        let vrow = v.row(r);
        let orow = &mut out[s * d..(s + 1) * d];
        for hb in 0..h {
            let wv = wd[r * h + hb];
            for c in 0..dh {
                orow[hb * dh + c] += wv * vrow[hb * dh + c];
            }
        }
    }
    Tensor::new(vec![n_seg, d], out)
}

// ── elementwise activations ──────────────────────────────────────────

#[inline]
pub fn sigmoid_scalar<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let data = x.data().iter().map(|&v| sigmoid_scalar(v)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// tanh via the exp identity `(1 − e^{−2|x|})/(1 + e^{−2|x|})`, sign
/// restored. Agrees with libm to rounding and is measurably faster.
#[inline]
pub fn tanh_scalar<T: Real>(x: T) -> T {
    let two: T = lit(2.0);
    let e = (-two * x.abs()).exp();
    let v = (T::one() - e) / (T::one() + e);
    if x >= T::zero() {
        v
    } else {
        -v
    }
}

/// GELU, tanh approximation: `0.5 x (1 + tanh(√(2/π)(x + 0.044715 x³)))`.
#[inline]
pub fn gelu_scalar<T: Real>(x: T) -> T {
    let c: T = lit(0.7978845608028654); // sqrt(2/pi)
    let a: T = lit(0.044715);
    let half: T = lit(0.5);
    half * x * (T::one() + tanh_scalar(c * (x + a * x * x * x)))
}

#[inline]
pub fn gelu_grad_scalar<T: Real>(x: T) -> T {
    let c: T = lit(0.7978845608028654);
    let a: T = lit(0.044715);
    let half: T = lit(0.5);
    let three: T = lit(3.0);
    let t = tanh_scalar(c * (x + a * x * x * x));
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c * (T::one() + three * a * x * x)
}

pub fn gelu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let data = x.data().iter().map(|&v| gelu_scalar(v)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

// ── layer normalization ──────────────────────────────────────────────

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Per-row normalization with learnable gain/bias:
/// `y = gain ⊙ (x − μ)/√(σ² + ε) + bias`.
pub fn layer_norm<T: Real>(x: &Tensor<T>, gain: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, d) = want_matrix("layer_norm", x)?;
    if gain.numel() != d || bias.numel() != d {
        return Err(Error::Shape {
            op: "layer_norm",
            detail: format!("gain/bias len {}/{} for {} cols", gain.numel(), bias.numel(), d),
        });
    }
    let eps: T = lit(LAYER_NORM_EPS);
    let dn = T::from(d).unwrap();
    let mut data = Vec::with_capacity(n * d);
    for r in 0..n {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<T>() / dn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let inv = T::one() / (var + eps).sqrt();
        for (c, &v) in row.iter().enumerate() {
            data.push(gain.data()[c] * (v - mean) * inv + bias.data()[c]);
        }
    }
    Tensor::new(vec![n, d], data)
}

// ── losses and readouts ──────────────────────────────────────────────

/// Row-wise log-softmax with max subtraction.
pub fn log_softmax_rows<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (n, d) = (x.rows(), x.cols());
    let mut data = Vec::with_capacity(n * d);
    for r in 0..n {
        let row = x.row(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        data.extend(row.iter().map(|&v| v - lse));
    }
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// Row-wise softmax.
pub fn softmax_rows<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = log_softmax_rows(x);
    for v in out.data_mut() {
        *v = v.exp();
    }
    out
}

/// Argmax over one row; ties break toward the lowest index.
pub fn argmax_row<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean negative log-likelihood of the true labels over unmasked rows.
pub fn nll_loss<T: Real>(
    logits: &Tensor<T>,
    labels: &[usize],
    mask: &[bool],
) -> Result<Tensor<T>> {
    let (n, d) = want_matrix("nll_loss", logits)?;
    if labels.len() != n || mask.len() != n {
        return Err(Error::Shape {
            op: "nll_loss",
            detail: format!("{n} rows vs {} labels / {} mask", labels.len(), mask.len()),
        });
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::Invalid("nll_loss: all residues masked".into()));
    }
    let logp = log_softmax_rows(logits);
    let mut total = T::zero();
    for r in 0..n {
        if !mask[r] {
            continue;
        }
        if labels[r] >= d {
            return Err(Error::Shape {
                op: "nll_loss",
                detail: format!("label {} >= {} classes", labels[r], d),
            });
        }
        total -= logp.at(r, labels[r]);
    }
    Ok(Tensor::scalar(total / T::from(count).unwrap()))
}

pub fn sum_all<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    Tensor::scalar(x.data().iter().copied().sum())
}

pub fn mean_all<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    Tensor::scalar(x.data().iter().copied().sum::<T>() / T::from(x.numel()).unwrap())
}

// ── geometric kernels (differentiable wrt virtual-atom coordinates) ──

/// Per-residue frames cast to the working precision, in structure-of-arrays
/// form for the placement kernel. `q[i][r][c]`: column `c` of `Q_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct FramesCast<T> {
    pub q: Vec<[[T; 3]; 3]>,
    pub origin: Vec<[T; 3]>,
}

impl<T: Real> FramesCast<T> {
    pub fn from_frames(frames: &[LocalFrame]) -> Self {
        FramesCast {
            q: frames.iter().map(LocalFrame::cast_basis).collect(),
            origin: frames.iter().map(LocalFrame::cast_origin).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }
}

/// Place each relative point into every residue frame:
/// `out[i·K + k] = Q_i p_k + CA_i` for points `[K, 3]` → `[n·K, 3]`.
pub fn frame_map<T: Real>(points: &Tensor<T>, frames: &FramesCast<T>) -> Result<Tensor<T>> {
    let (kn, three) = want_matrix("frame_map", points)?;
    if three != 3 {
        return Err(Error::Shape {
            op: "frame_map",
            detail: format!("points must be [K, 3], got {:?}", points.shape()),
        });
    }
    let n = frames.len();
    let mut data = Vec::with_capacity(n * kn * 3);
    for i in 0..n {
        let q = &frames.q[i];
        let o = &frames.origin[i];
        for k in 0..kn {
            let p = points.row(k);
            for r in 0..3 {
                data.push(q[r][0] * p[0] + q[r][1] * p[1] + q[r][2] * p[2] + o[r]);
            }
        }
    }
    Tensor::new(vec![n * kn, 3], data)
}

/// Backward of `frame_map`: accumulate `Q_iᵀ · g` rows into point gradients.
pub fn frame_map_backward<T: Real>(
    grad_out: &Tensor<T>,
    frames: &FramesCast<T>,
    kn: usize,
) -> Tensor<T> {
    let n = frames.len();
    let mut gp = vec![T::zero(); kn * 3];
    for i in 0..n {
        let q = &frames.q[i];
        for k in 0..kn {
            let g = grad_out.row(i * kn + k);
            for c in 0..3 {
                gp[k * 3 + c] += q[0][c] * g[0] + q[1][c] * g[1] + q[2][c] * g[2];
            }
        }
    }
    Tensor::new(vec![kn, 3], gp).expect("shape fixed")
}

/// Row-wise RBF of point-pair distances: for rows `a_r, b_r ∈ ℝ³`,
/// `out[r][c] = exp(−((‖a_r − b_r‖ − μ_c)/σ)²)`.
pub fn rbf_dist<T: Real>(a: &Tensor<T>, b: &Tensor<T>, spec: &RbfSpec) -> Result<Tensor<T>> {
    want_same("rbf_dist", a, b)?;
    let (rows, three) = want_matrix("rbf_dist", a)?;
    if three != 3 {
        return Err(Error::Shape {
            op: "rbf_dist",
            detail: format!("expected [r, 3], got {:?}", a.shape()),
        });
    }
    let sigma: T = lit(spec.sigma());
    let centers: Vec<T> = (0..spec.count).map(|i| lit(spec.center(i))).collect();
    let mut data = Vec::with_capacity(rows * spec.count);
    for r in 0..rows {
        let ar = a.row(r);
        let br = b.row(r);
        let mut d2 = T::zero();
        for c in 0..3 {
            let diff = ar[c] - br[c];
            d2 += diff * diff;
        }
        let d = d2.sqrt();
        for &mu in &centers {
            let z = (d - mu) / sigma;
            data.push((-z * z).exp());
        }
    }
    Tensor::new(vec![rows, spec.count], data)
}

/// Backward of `rbf_dist`; returns the gradient wrt `a` (the gradient wrt
/// `b` is its negation). Coincident points get a zero gradient.
pub fn rbf_dist_backward<T: Real>(
    grad_out: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    spec: &RbfSpec,
) -> Tensor<T> {
    let rows = a.rows();
    let sigma: T = lit(spec.sigma());
    let sigma2 = sigma * sigma;
    let two: T = lit(2.0);
    let centers: Vec<T> = (0..spec.count).map(|i| lit(spec.center(i))).collect();
    let tiny: T = lit(1e-12);
    let mut ga = vec![T::zero(); rows * 3];
    for r in 0..rows {
        let ar = a.row(r);
        let br = b.row(r);
        let mut d2 = T::zero();
        for c in 0..3 {
            let diff = ar[c] - br[c];
            d2 += diff * diff;
        }
        let d = d2.sqrt();
        if d < tiny {
            continue;
        }
        // dL/dd = Σ_c g_c · y_c · (−2 (d − μ_c)/σ²)
        let mut dl_dd = T::zero();
        let grow = grad_out.row(r);
        for (ci, &mu) in centers.iter().enumerate() {
            let z = (d - mu) / sigma;
            let y = (-z * z).exp();
            dl_dd += grow[ci] * y * (-(two * (d - mu)) / sigma2);
        }
        for c in 0..3 {
            ga[r * 3 + c] = dl_dd * (ar[c] - br[c]) / d;
        }
    }
    Tensor::new(vec![rows, 3], ga).expect("shape fixed")
}
