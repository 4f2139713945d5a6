use std::sync::Arc;

use super::{Graph, Var};
use crate::error::{invalid, Result};
use crate::scalar::Scalar;
use crate::spectral::Framing;
use crate::tensor::Tensor;

/// Value of the compressed spectral distance for one bin and its gradient
/// with respect to the estimate `(a, b)`.
///
/// `(|Y|^c - |S|^c)^2 + | |Y|^c e^{j phi_Y} - |S|^c e^{j phi_S} |^2`, where
/// `(sr, si)` is the already compressed target `|S|^c e^{j phi_S}` and `sm` its magnitude.
#[inline]
pub(crate) fn compressed_bin<T: Scalar>(a: T, b: T, sr: T, si: T, sm: T, c: T) -> (T, T, T) {
    let r = a.hypot(b);
    if r == T::zero() {
        return (sm * sm + sr * sr + si * si, T::zero(), T::zero());
    }
    let two = T::lit(2.0);
    let rc1 = r.powf(c - T::one());
    // same arithmetic as the target's compression, so equal inputs cancel exactly
    let (zr, zi) = crate::spectral::compress_bin(a, b, c);
    let p = zr.hypot(zi);
    let (dr, di) = (zr - sr, zi - si);
    let dm = p - sm;
    let value = dm * dm + dr * dr + di * di;
    let r2 = r * r;
    // d|Y|^c/dv = c r^{c-2} v ; dZ/dv = r^{c-1} I + (c-1) r^{c-3} v v^T
    let k1 = two * dm * c * rc1 / r;
    let vd = a * dr + b * di;
    let k2 = two * (c - T::one()) * rc1 / r2 * vd;
    let ga = k1 * a + two * rc1 * dr + k2 * a;
    let gb = k1 * b + two * rc1 * di + k2 * b;
    (value, ga, gb)
}

impl<T: Scalar> Graph<T> {
    /// STFT of a waveform `[N]` into `[2, frames, bins]`.
    pub fn stft(&mut self, y: Var, framing: Arc<Framing<T>>) -> Result<Var> {
        let s = self.shape(y).to_vec();
        if s.len() != 1 || s[0] == 0 {
            return invalid(format!("stft: expected nonempty [N] waveform, got {s:?}"));
        }
        let n = s[0];
        let (re, im) = framing.analyze(self.value(y).data());
        let frames = framing.frames(n);
        let bins = framing.bins();
        let mut data = re;
        data.extend(im);
        let out = Tensor::new(&[2, frames, bins], data)?;
        Ok(self.push_op(out, &[y], move |b| {
            let half = frames * bins;
            let g = b.grad.data();
            let dy = framing.analyze_adjoint(&g[..half], &g[half..], n);
            vec![Some(Tensor::new(&[n], dy).expect("shape"))]
        }))
    }

    /// Overlap-add inverse STFT of `[2, frames, bins]` to `[out_len]`.
    pub fn istft(&mut self, spec: Var, framing: Arc<Framing<T>>, out_len: usize) -> Result<Var> {
        let s = self.shape(spec).to_vec();
        if s.len() != 3 || s[0] != 2 || s[2] != framing.bins() {
            return invalid(format!("istft: expected [2, T, {}], got {s:?}", framing.bins()));
        }
        let frames = s[1];
        if out_len > frames * framing.hop + framing.win {
            return invalid(format!("istft: out_len {out_len} exceeds framed span"));
        }
        let half = frames * s[2];
        let d = self.value(spec).data();
        let y = framing.synthesize(&d[..half], &d[half..], frames, out_len);
        let out = Tensor::new(&[out_len], y)?;
        Ok(self.push_op(out, &[spec], move |b| {
            let (gr, gi) = framing.synthesize_adjoint(b.grad.data(), frames);
            let mut data = gr;
            data.extend(gi);
            vec![Some(Tensor::new(&s, data).expect("shape"))]
        }))
    }

    /// Bin-wise complex product of `m: [2, T, F]` with a constant spectrogram.
    pub fn complex_mul_const(&mut self, m: Var, x: &Tensor<T>) -> Result<Var> {
        let s = self.shape(m).to_vec();
        if s.len() != 3 || s[0] != 2 || x.shape() != s.as_slice() {
            return invalid(format!("complex_mul: shapes {s:?} and {:?} differ", x.shape()));
        }
        let half = s[1] * s[2];
        let xd = x.data().to_vec();
        let md = self.value(m).data();
        let mut y = vec![T::zero(); 2 * half];
        for i in 0..half {
            let (mr, mi, xr, xi) = (md[i], md[half + i], xd[i], xd[half + i]);
            y[i] = mr * xr - mi * xi;
            y[half + i] = mr * xi + mi * xr;
        }
        let out = Tensor::new(&s, y)?;
        Ok(self.push_op(out, &[m], move |b| {
            let g = b.grad.data();
            let mut dm = vec![T::zero(); 2 * half];
            for i in 0..half {
                let (gr, gi, xr, xi) = (g[i], g[half + i], xd[i], xd[half + i]);
                dm[i] = gr * xr + gi * xi;
                dm[half + i] = -gr * xi + gi * xr;
            }
            vec![Some(Tensor::new(&s, dm).expect("shape"))]
        }))
    }

    /// Summed compressed magnitude + compressed complex distance between an
    /// estimate `[2, T, F]` and a constant target of the same shape.
    pub fn compressed_spectral_distance(&mut self, y: Var, target: &Tensor<T>, c: f64) -> Result<Var> {
        let s = self.shape(y).to_vec();
        if s.len() != 3 || s[0] != 2 || target.shape() != s.as_slice() {
            return invalid(format!(
                "spectral loss: estimate {s:?} and target {:?} differ",
                target.shape()
            ));
        }
        if !(c > 0.0 && c <= 1.0) {
            return invalid(format!("compression exponent must lie in (0, 1], got {c}"));
        }
        let c = T::lit(c);
        let half = s[1] * s[2];
        let td = target.data();
        let yd = self.value(y).data();
        let mut total = T::zero();
        let mut grad = vec![T::zero(); 2 * half];
        for i in 0..half {
            let (sr, si) = crate::spectral::compress_bin(td[i], td[half + i], c);
            let sm = sr.hypot(si);
            let (v, ga, gb) = compressed_bin(yd[i], yd[half + i], sr, si, sm, c);
            total += v;
            grad[i] = ga;
            grad[half + i] = gb;
        }
        let out = Tensor::scalar(total);
        Ok(self.push_op(out, &[y], move |b| {
            let g = b.grad.data()[0];
            vec![Some(
                Tensor::new(&s, grad.iter().map(|&v| v * g).collect()).expect("shape"),
            )]
        }))
    }

    /// Cuts `x: [C, N]` into `count` chunks of `chunk` samples starting every
    /// `hop` samples, zero-filling past the end: `[C, count, chunk]`.
    pub fn segment(&mut self, x: Var, chunk: usize, hop: usize, count: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || chunk == 0 || hop == 0 || count == 0 {
            return invalid(format!("segment: bad input {s:?} / chunk {chunk} / hop {hop}"));
        }
        let (c, n) = (s[0], s[1]);
        let xd = self.value(x).data();
        let mut y = vec![T::zero(); c * count * chunk];
        for ch in 0..c {
            for t in 0..count {
                let start = t * hop;
                if start >= n {
                    break;
                }
                let end = (start + chunk).min(n);
                let dst = (ch * count + t) * chunk;
                y[dst..dst + end - start].copy_from_slice(&xd[ch * n + start..ch * n + end]);
            }
        }
        let out = Tensor::new(&[c, count, chunk], y)?;
        Ok(self.push_op(out, &[x], move |b| {
            let g = b.grad.data();
            let mut dx = vec![T::zero(); c * n];
            for ch in 0..c {
                for t in 0..count {
                    let start = t * hop;
                    if start >= n {
                        break;
                    }
                    let end = (start + chunk).min(n);
                    let src = (ch * count + t) * chunk;
                    for (d, &v) in dx[ch * n + start..ch * n + end]
                        .iter_mut()
                        .zip(&g[src..src + end - start])
                    {
                        *d += v;
                    }
                }
            }
            vec![Some(Tensor::new(&[c, n], dx).expect("shape"))]
        }))
    }
}
