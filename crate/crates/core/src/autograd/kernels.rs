//! Forward and backward loops for the heavy operators.

use crate::scalar::Scalar;

/// Dot product with four independent accumulators (fixed summation order).
#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 4];
    let chunks = n / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..n {
        s += a[i] * b[i];
    }
    s
}

/// `y += alpha * x`
#[inline]
pub(crate) fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Geometry of a causal 2-D convolution over `[C, T, F]` tensors.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub frames: usize,
    pub bins: usize,
    pub kt: usize,
    pub kf: usize,
    pub dilation: usize,
}

impl ConvGeom {
    #[inline]
    fn pad_f(&self) -> usize {
        (self.kf - 1) / 2
    }

    /// For tap `(a, b)`: time shift into the past and the valid output-bin range
    /// with the input-bin offset.
    #[inline]
    fn tap(&self, a: usize, b: usize) -> (usize, usize, usize, isize) {
        let shift = (self.kt - 1 - a) * self.dilation;
        let off = b as isize - self.pad_f() as isize;
        let f_lo = (-off).max(0) as usize;
        let f_hi = (self.bins as isize - off.max(0)).max(0) as usize;
        (shift, f_lo, f_hi.max(f_lo), off)
    }

    #[inline]
    fn widx(&self, o: usize, i: usize, a: usize, b: usize) -> usize {
        ((o * self.cin + i) * self.kt + a) * self.kf + b
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], bias: &[T]) -> Vec<T> {
    let plane = g.frames * g.bins;
    let mut y = vec![T::zero(); g.cout * plane];
    for o in 0..g.cout {
        let yo = &mut y[o * plane..(o + 1) * plane];
        yo.fill(bias[o]);
        for i in 0..g.cin {
            let xi = &x[i * plane..(i + 1) * plane];
            for a in 0..g.kt {
                for b in 0..g.kf {
                    let wv = w[g.widx(o, i, a, b)];
                    let (shift, f_lo, f_hi, off) = g.tap(a, b);
                    if f_lo >= f_hi {
                        continue;
                    }
                    for t in shift..g.frames {
                        let src = (t - shift) * g.bins;
                        let dst = t * g.bins;
                        let xs = &xi[(src as isize + f_lo as isize + off) as usize
                            ..(src as isize + f_hi as isize + off) as usize];
                        axpy(wv, xs, &mut yo[dst + f_lo..dst + f_hi]);
                    }
                }
            }
        }
    }
    y
}

/// Returns `(dx, dw, db)`; `dx` is only computed when `need_x`.
pub(crate) fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
    need_x: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let plane = g.frames * g.bins;
    let mut dx = need_x.then(|| vec![T::zero(); g.cin * plane]);
    let mut dw = vec![T::zero(); w.len()];
    let mut db = vec![T::zero(); g.cout];
    for o in 0..g.cout {
        let dyo = &dy[o * plane..(o + 1) * plane];
        db[o] = dyo.iter().copied().sum();
        for i in 0..g.cin {
            let xi = &x[i * plane..(i + 1) * plane];
            for a in 0..g.kt {
                for b in 0..g.kf {
                    let (shift, f_lo, f_hi, off) = g.tap(a, b);
                    if f_lo >= f_hi {
                        continue;
                    }
                    let wv = w[g.widx(o, i, a, b)];
                    let mut acc = T::zero();
                    for t in shift..g.frames {
                        let src = ((t - shift) * g.bins) as isize + off;
                        let dst = t * g.bins;
                        let ds = &dyo[dst + f_lo..dst + f_hi];
                        let s0 = (src + f_lo as isize) as usize;
                        let s1 = (src + f_hi as isize) as usize;
                        acc += dot(ds, &xi[s0..s1]);
                        if let Some(dx) = dx.as_mut() {
                            axpy(wv, ds, &mut dx[i * plane + s0..i * plane + s1]);
                        }
                    }
                    dw[g.widx(o, i, a, b)] = acc;
                }
            }
        }
    }
    (dx, dw, db)
}

/// `y[o, p] = sum_i w[o, i] x[i, p] + b[o]` on each `[C, inner]` block of `outer` blocks.
pub(crate) fn linear_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    outer: usize,
    cin: usize,
    cout: usize,
    inner: usize,
) -> Vec<T> {
    let mut y = vec![T::zero(); outer * cout * inner];
    for n in 0..outer {
        let xb = &x[n * cin * inner..(n + 1) * cin * inner];
        let yb = &mut y[n * cout * inner..(n + 1) * cout * inner];
        if inner == 1 {
            for o in 0..cout {
                let b0 = bias.map_or(T::zero(), |b| b[o]);
                yb[o] = b0 + dot(&w[o * cin..(o + 1) * cin], xb);
            }
        } else {
            for o in 0..cout {
                let yo = &mut yb[o * inner..(o + 1) * inner];
                yo.fill(bias.map_or(T::zero(), |b| b[o]));
                for i in 0..cin {
                    axpy(w[o * cin + i], &xb[i * inner..(i + 1) * inner], yo);
                }
            }
        }
    }
    y
}

/// Returns `(dx, dw, db)` for [`linear_forward`].
#[allow(clippy::too_many_arguments)]
pub(crate) fn linear_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    outer: usize,
    cin: usize,
    cout: usize,
    inner: usize,
    need_x: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let mut dx = need_x.then(|| vec![T::zero(); outer * cin * inner]);
    let mut dw = vec![T::zero(); cout * cin];
    let mut db = vec![T::zero(); cout];
    for n in 0..outer {
        let xb = &x[n * cin * inner..(n + 1) * cin * inner];
        let dyb = &dy[n * cout * inner..(n + 1) * cout * inner];
        if inner == 1 {
            for o in 0..cout {
                let d = dyb[o];
                db[o] += d;
                axpy(d, xb, &mut dw[o * cin..(o + 1) * cin]);
                if let Some(dx) = dx.as_mut() {
                    axpy(d, &w[o * cin..(o + 1) * cin], &mut dx[n * cin..(n + 1) * cin]);
                }
            }
        } else {
            for o in 0..cout {
                let dyo = &dyb[o * inner..(o + 1) * inner];
                db[o] += dyo.iter().copied().sum::<T>();
                for i in 0..cin {
                    dw[o * cin + i] += dot(dyo, &xb[i * inner..(i + 1) * inner]);
                    if let Some(dx) = dx.as_mut() {
                        let base = n * cin * inner + i * inner;
                        axpy(w[o * cin + i], dyo, &mut dx[base..base + inner]);
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// Layer normalization over the middle axis of an `[outer, C, inner]` view.
/// Returns `(y, xhat, inv_std)` with `inv_std` laid out `[outer, inner]`.
pub(crate) fn layer_norm_forward<T: Scalar>(
    x: &[T],
    gain: &[T],
    bias: &[T],
    outer: usize,
    c: usize,
    inner: usize,
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); outer * inner];
    let cn = T::from_usize_lossy(c);
    let mut mean = vec![T::zero(); inner];
    let mut var = vec![T::zero(); inner];
    for n in 0..outer {
        let base = n * c * inner;
        mean.fill(T::zero());
        var.fill(T::zero());
        for ch in 0..c {
            let row = &x[base + ch * inner..base + (ch + 1) * inner];
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= cn;
        }
        for ch in 0..c {
            let row = &x[base + ch * inner..base + (ch + 1) * inner];
            for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                let d = v - m;
                *s += d * d;
            }
        }
        let is = &mut inv_std[n * inner..(n + 1) * inner];
        for (s, &v) in is.iter_mut().zip(&var) {
            *s = T::one() / (v / cn + eps).sqrt();
        }
        for ch in 0..c {
            let off = base + ch * inner;
            for k in 0..inner {
                let h = (x[off + k] - mean[k]) * is[k];
                xhat[off + k] = h;
                y[off + k] = gain[ch] * h + bias[ch];
            }
        }
    }
    (y, xhat, inv_std)
}

/// Returns `(dx, dgain, dbias)`.
pub(crate) fn layer_norm_backward<T: Scalar>(
    dy: &[T],
    xhat: &[T],
    inv_std: &[T],
    gain: &[T],
    outer: usize,
    c: usize,
    inner: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); dy.len()];
    let mut dgain = vec![T::zero(); c];
    let mut dbias = vec![T::zero(); c];
    let cn = T::from_usize_lossy(c);
    let mut s1 = vec![T::zero(); inner];
    let mut s2 = vec![T::zero(); inner];
    for n in 0..outer {
        let base = n * c * inner;
        s1.fill(T::zero());
        s2.fill(T::zero());
        for ch in 0..c {
            let off = base + ch * inner;
            let mut dg = T::zero();
            let mut dbs = T::zero();
            for k in 0..inner {
                let d = dy[off + k];
                let h = xhat[off + k];
                dg += d * h;
                dbs += d;
                let dh = d * gain[ch];
                s1[k] += dh;
                s2[k] += dh * h;
            }
            dgain[ch] += dg;
            dbias[ch] += dbs;
        }
        let is = &inv_std[n * inner..(n + 1) * inner];
        for ch in 0..c {
            let off = base + ch * inner;
            for k in 0..inner {
                let dh = dy[off + k] * gain[ch];
                dx[off + k] = is[k] * (dh - s1[k] / cn - xhat[off + k] * s2[k] / cn);
            }
        }
    }
    (dx, dgain, dbias)
}

/// Saved activations of one GRU sequence batch.
pub(crate) struct GruTrace<T> {
    /// `[N, L, H]` update gate
    pub z: Vec<T>,
    /// `[N, L, H]` reset gate
    pub r: Vec<T>,
    /// `[N, L, H]` candidate state
    pub cand: Vec<T>,
}

/// Shapes of a GRU over `N` sequences of length `L`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct GruGeom {
    pub batch: usize,
    pub len: usize,
    pub input: usize,
    pub hidden: usize,
    pub reverse: bool,
}

impl GruGeom {
    /// Processing order of time steps.
    #[inline]
    fn step(&self, s: usize) -> usize {
        if self.reverse {
            self.len - 1 - s
        } else {
            s
        }
    }
}

/// GRU with gate order (update, reset, candidate); `w_ih: [3H, D]`,
/// `w_hh: [3H, H]`, `bias: [3H]`. The candidate reads `U_h (r * h_prev)`.
pub(crate) fn gru_forward<T: Scalar>(
    g: &GruGeom,
    x: &[T],
    w_ih: &[T],
    w_hh: &[T],
    bias: &[T],
    keep_trace: bool,
) -> (Vec<T>, Option<GruTrace<T>>) {
    let (d, h) = (g.input, g.hidden);
    let mut out = vec![T::zero(); g.batch * g.len * h];
    let mut trace = keep_trace.then(|| GruTrace {
        z: vec![T::zero(); out.len()],
        r: vec![T::zero(); out.len()],
        cand: vec![T::zero(); out.len()],
    });
    let mut gi = vec![T::zero(); 3 * h];
    let mut prev = vec![T::zero(); h];
    let mut rh = vec![T::zero(); h];
    let mut z = vec![T::zero(); h];
    let mut r = vec![T::zero(); h];
    for n in 0..g.batch {
        prev.fill(T::zero());
        for s in 0..g.len {
            let t = g.step(s);
            let xt = &x[(n * g.len + t) * d..(n * g.len + t + 1) * d];
            for (j, gij) in gi.iter_mut().enumerate() {
                *gij = bias[j] + dot(&w_ih[j * d..(j + 1) * d], xt);
            }
            for j in 0..h {
                z[j] = (gi[j] + dot(&w_hh[j * h..(j + 1) * h], &prev)).sigmoid();
                r[j] = (gi[h + j] + dot(&w_hh[(h + j) * h..(h + j + 1) * h], &prev)).sigmoid();
                rh[j] = r[j] * prev[j];
            }
            let base = (n * g.len + t) * h;
            for j in 0..h {
                let c = (gi[2 * h + j] + dot(&w_hh[(2 * h + j) * h..(2 * h + j + 1) * h], &rh)).tanh();
                let hn = (T::one() - z[j]) * prev[j] + z[j] * c;
                out[base + j] = hn;
                if let Some(tr) = trace.as_mut() {
                    tr.z[base + j] = z[j];
                    tr.r[base + j] = r[j];
                    tr.cand[base + j] = c;
                }
            }
            prev.copy_from_slice(&out[base..base + h]);
        }
    }
    (out, trace)
}

/// Backpropagation through time. Returns `(dx, dw_ih, dw_hh, dbias)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gru_backward<T: Scalar>(
    g: &GruGeom,
    x: &[T],
    w_ih: &[T],
    w_hh: &[T],
    out: &[T],
    trace: &GruTrace<T>,
    dout: &[T],
    need_x: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>, Vec<T>) {
    let (d, h) = (g.input, g.hidden);
    let mut dx = need_x.then(|| vec![T::zero(); x.len()]);
    let mut dw_ih = vec![T::zero(); w_ih.len()];
    let mut dw_hh = vec![T::zero(); w_hh.len()];
    let mut db = vec![T::zero(); 3 * h];
    let one = T::one();
    let mut dh = vec![T::zero(); h];
    let mut dprev = vec![T::zero(); h];
    let mut da = vec![T::zero(); 3 * h];
    let mut drh = vec![T::zero(); h];
    let mut prev = vec![T::zero(); h];
    let mut rh = vec![T::zero(); h];
    for n in 0..g.batch {
        dh.fill(T::zero());
        for s in (0..g.len).rev() {
            let t = g.step(s);
            let base = (n * g.len + t) * h;
            if s > 0 {
                let tp = g.step(s - 1);
                prev.copy_from_slice(&out[(n * g.len + tp) * h..(n * g.len + tp + 1) * h]);
            } else {
                prev.fill(T::zero());
            }
            for j in 0..h {
                dh[j] += dout[base + j];
            }
            for j in 0..h {
                let (z, r, c) = (trace.z[base + j], trace.r[base + j], trace.cand[base + j]);
                rh[j] = r * prev[j];
                let dz = dh[j] * (c - prev[j]);
                let dc = dh[j] * z;
                dprev[j] = dh[j] * (one - z);
                da[j] = dz * z * (one - z);
                da[2 * h + j] = dc * (one - c * c);
            }
            // candidate path through U_h (r * h_prev)
            drh.fill(T::zero());
            for j in 0..h {
                let a = da[2 * h + j];
                let row = (2 * h + j) * h;
                axpy(a, &rh, &mut dw_hh[row..row + h]);
                axpy(a, &w_hh[row..row + h], &mut drh);
            }
            for j in 0..h {
                let r = trace.r[base + j];
                dprev[j] += drh[j] * r;
                let dr = drh[j] * prev[j];
                da[h + j] = dr * r * (one - r);
            }
            for j in 0..2 * h {
                let a = da[j];
                let row = j * h;
                axpy(a, &prev, &mut dw_hh[row..row + h]);
                axpy(a, &w_hh[row..row + h], &mut dprev);
            }
            let xt = &x[(n * g.len + t) * d..(n * g.len + t + 1) * d];
            for j in 0..3 * h {
                let a = da[j];
                db[j] += a;
                axpy(a, xt, &mut dw_ih[j * d..(j + 1) * d]);
                if let Some(dx) = dx.as_mut() {
                    let off = (n * g.len + t) * d;
                    axpy(a, &w_ih[j * d..(j + 1) * d], &mut dx[off..off + d]);
                }
            }
            std::mem::swap(&mut dh, &mut dprev);
        }
    }
    (dx, dw_ih, dw_hh, db)
}

/// Scaled dot-product attention over `[N, L, D]` split into `heads` heads.
/// Returns the output and (optionally) the softmax weights `[N, heads, L, L]`.
pub(crate) fn attention_forward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    batch: usize,
    len: usize,
    dim: usize,
    heads: usize,
    keep_probs: bool,
) -> (Vec<T>, Option<Vec<T>>) {
    let dh = dim / heads;
    let scale = T::one() / T::from_usize_lossy(dh).sqrt();
    let mut out = vec![T::zero(); batch * len * dim];
    let mut probs = keep_probs.then(|| vec![T::zero(); batch * heads * len * len]);
    let mut qh = vec![T::zero(); len * dh];
    let mut kt = vec![T::zero(); dh * len];
    let mut vh = vec![T::zero(); len * dh];
    let mut row = vec![T::zero(); len];
    for n in 0..batch {
        for hd in 0..heads {
            gather_head(q, n, len, dim, hd, dh, &mut qh);
            gather_head(v, n, len, dim, hd, dh, &mut vh);
            for j in 0..len {
                for e in 0..dh {
                    kt[e * len + j] = k[(n * len + j) * dim + hd * dh + e];
                }
            }
            for i in 0..len {
                row.fill(T::zero());
                for e in 0..dh {
                    axpy(qh[i * dh + e] * scale, &kt[e * len..(e + 1) * len], &mut row);
                }
                softmax_in_place(&mut row);
                let o = &mut out[(n * len + i) * dim + hd * dh..(n * len + i) * dim + (hd + 1) * dh];
                for (j, &p) in row.iter().enumerate() {
                    axpy(p, &vh[j * dh..(j + 1) * dh], o);
                }
                if let Some(pr) = probs.as_mut() {
                    let off = ((n * heads + hd) * len + i) * len;
                    pr[off..off + len].copy_from_slice(&row);
                }
            }
        }
    }
    (out, probs)
}

fn gather_head<T: Scalar>(src: &[T], n: usize, len: usize, dim: usize, hd: usize, dh: usize, dst: &mut [T]) {
    for i in 0..len {
        let s = (n * len + i) * dim + hd * dh;
        dst[i * dh..(i + 1) * dh].copy_from_slice(&src[s..s + dh]);
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

/// Returns `(dq, dk, dv)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dout: &[T],
    batch: usize,
    len: usize,
    dim: usize,
    heads: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let dh = dim / heads;
    let scale = T::one() / T::from_usize_lossy(dh).sqrt();
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];
    let mut qh = vec![T::zero(); len * dh];
    let mut kh = vec![T::zero(); len * dh];
    let mut vh = vec![T::zero(); len * dh];
    let mut doh = vec![T::zero(); len * dh];
    let mut dkh = vec![T::zero(); len * dh];
    let mut dvh = vec![T::zero(); len * dh];
    let mut ds = vec![T::zero(); len];
    for n in 0..batch {
        for hd in 0..heads {
            gather_head(q, n, len, dim, hd, dh, &mut qh);
            gather_head(k, n, len, dim, hd, dh, &mut kh);
            gather_head(v, n, len, dim, hd, dh, &mut vh);
            gather_head(dout, n, len, dim, hd, dh, &mut doh);
            dkh.fill(T::zero());
            dvh.fill(T::zero());
            for i in 0..len {
                let p = &probs[((n * heads + hd) * len + i) * len..((n * heads + hd) * len + i + 1) * len];
                let doi = &doh[i * dh..(i + 1) * dh];
                // dP_ij = dO_i . V_j ; dS = P * (dP - sum_j P dP)
                let mut acc = T::zero();
                for j in 0..len {
                    let dp = dot(doi, &vh[j * dh..(j + 1) * dh]);
                    ds[j] = dp;
                    acc += p[j] * dp;
                    axpy(p[j], doi, &mut dvh[j * dh..(j + 1) * dh]);
                }
                let dqi = &mut dq[(n * len + i) * dim + hd * dh..(n * len + i) * dim + (hd + 1) * dh];
                let qi = &qh[i * dh..(i + 1) * dh];
                for j in 0..len {
                    let s = p[j] * (ds[j] - acc) * scale;
                    axpy(s, &kh[j * dh..(j + 1) * dh], dqi);
                    axpy(s, qi, &mut dkh[j * dh..(j + 1) * dh]);
                }
            }
            for j in 0..len {
                let o = (n * len + j) * dim + hd * dh;
                dk[o..o + dh].copy_from_slice(&dkh[j * dh..(j + 1) * dh]);
                dv[o..o + dh].copy_from_slice(&dvh[j * dh..(j + 1) * dh]);
            }
        }
    }
    (dq, dk, dv)
}
