use super::kernels::{self, ConvGeom};
use super::{Graph, Var};
use crate::error::{invalid, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `(outer, extent, inner)` view of `shape` around `axis`.
pub(crate) fn axis_view(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn same_shape(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    if a != b {
        return invalid(format!("{what}: shape mismatch {a:?} vs {b:?}"));
    }
    Ok(())
}

impl<T: Scalar> Graph<T> {
    fn unary<F, D>(&mut self, x: Var, f: F, df: D) -> Var
    where
        F: Fn(T) -> T,
        D: Fn(T, T) -> T + 'static,
    {
        let out = self.value(x).map(f);
        self.push_op(out, &[x], move |b| {
            let data = b
                .grad
                .data()
                .iter()
                .zip(b.inputs[0].data())
                .zip(b.out.data())
                .map(|((&g, &xi), &yi)| g * df(xi, yi))
                .collect();
            vec![Some(Tensor::new(b.grad.shape(), data).expect("shape"))]
        })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, T::sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, T::tanh, |_, y| T::one() - y * y)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| if v > T::zero() { v } else { T::zero() },
            |v, _| if v > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.unary(x, |v| v * s, move |_, _| s)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.shape(a), self.shape(b), "add")?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push_op(out, &[a, b], |b| vec![Some(b.grad.clone()), Some(b.grad.clone())]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.shape(a), self.shape(b), "sub")?;
        let out = Tensor::new(
            self.shape(a),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(&x, &y)| x - y)
                .collect(),
        )?;
        Ok(self.push_op(out, &[a, b], |b| vec![Some(b.grad.clone()), Some(b.grad.map(|g| -g))]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.shape(a), self.shape(b), "mul")?;
        let out = Tensor::new(
            self.shape(a),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(&x, &y)| x * y)
                .collect(),
        )?;
        Ok(self.push_op(out, &[a, b], |b| {
            let prod = |other: &Tensor<T>| {
                Tensor::new(
                    b.grad.shape(),
                    b.grad.data().iter().zip(other.data()).map(|(&g, &o)| g * o).collect(),
                )
                .expect("shape")
            };
            vec![
                b.needs[0].then(|| prod(b.inputs[1])),
                b.needs[1].then(|| prod(b.inputs[0])),
            ]
        }))
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push_op(out, &[x], |b| {
            vec![Some(Tensor::full(b.inputs[0].shape(), b.grad.data()[0]))]
        })
    }

    /// `sum(x * w)` against a constant weight tensor.
    pub fn weighted_sum(&mut self, x: Var, w: Tensor<T>) -> Result<Var> {
        same_shape(self.shape(x), w.shape(), "weighted_sum")?;
        let out = Tensor::scalar(kernels::dot(self.value(x).data(), w.data()));
        Ok(self.push_op(out, &[x], move |b| {
            let g = b.grad.data()[0];
            vec![Some(w.map(|v| v * g))]
        }))
    }

    /// `sum((x - target)^2)` against a constant target.
    pub fn squared_error(&mut self, x: Var, target: &Tensor<T>) -> Result<Var> {
        same_shape(self.shape(x), target.shape(), "squared_error")?;
        let diff: Vec<T> = self
            .value(x)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| a - b)
            .collect();
        let out = Tensor::scalar(diff.iter().map(|&d| d * d).sum());
        let shape = target.shape().to_vec();
        Ok(self.push_op(out, &[x], move |b| {
            let g = b.grad.data()[0] * T::lit(2.0);
            vec![Some(
                Tensor::new(&shape, diff.iter().map(|&d| d * g).collect()).expect("shape"),
            )]
        }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push_op(out, &[x], |b| {
            vec![Some(b.grad.clone().reshape(b.inputs[0].shape()).expect("shape"))]
        }))
    }

    /// Axis permutation of a rank-3 tensor: output axis `i` is input axis `perm[i]`.
    pub fn permute3(&mut self, x: Var, perm: [usize; 3]) -> Result<Var> {
        let mut seen = [false; 3];
        for &p in &perm {
            if p > 2 || seen[p] {
                return invalid(format!("invalid permutation {perm:?}"));
            }
            seen[p] = true;
        }
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 {
            return invalid(format!("permute3 needs rank 3, got {shape:?}"));
        }
        let out = permute3_tensor(self.value(x), perm);
        let mut inverse = [0usize; 3];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        Ok(self.push_op(out, &[x], move |b| vec![Some(permute3_tensor(b.grad, inverse))]))
    }

    /// Concatenation along axis 0.
    pub fn concat0(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return invalid("concat of zero tensors");
        }
        let rest = self.shape(parts[0])[1..].to_vec();
        let mut lead = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != rest[..] {
                return invalid(format!("concat: trailing shape {:?} vs {:?}", &s[1..], rest));
            }
            lead.push(s[0]);
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead.iter().sum()];
        shape.extend_from_slice(&rest);
        let out = Tensor::new(&shape, data)?;
        let block: usize = rest.iter().product();
        Ok(self.push_op(out, parts, move |b| {
            let mut off = 0;
            lead.iter()
                .zip(&b.needs)
                .map(|(&n, &need)| {
                    let start = off * block;
                    off += n;
                    need.then(|| {
                        let mut s = vec![n];
                        s.extend_from_slice(&b.grad.shape()[1..]);
                        Tensor::new(&s, b.grad.data()[start..start + n * block].to_vec()).expect("shape")
                    })
                })
                .collect()
        }))
    }

    /// Rows `start..start+len` of axis 0.
    pub fn slice0(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if start + len > shape[0] || len == 0 {
            return invalid(format!("slice {start}+{len} out of range for {shape:?}"));
        }
        let block: usize = shape[1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[0] = len;
        let out = Tensor::new(
            &out_shape,
            self.value(x).data()[start * block..(start + len) * block].to_vec(),
        )?;
        Ok(self.push_op(out, &[x], move |b| {
            let mut g = Tensor::zeros(&shape);
            g.data_mut()[start * block..(start + len) * block].copy_from_slice(b.grad.data());
            vec![Some(g)]
        }))
    }

    /// Linear map along `axis`: `w` is `[Cout, Cin]`, `bias` is `[Cout]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return invalid(format!("axis {axis} out of range for {shape:?}"));
        }
        let (outer, cin, inner) = axis_view(&shape, axis);
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || ws[1] != cin {
            return invalid(format!("linear: weight {ws:?} does not accept {cin} channels"));
        }
        let cout = ws[0];
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return invalid(format!("linear: bias {:?} vs {cout} outputs", self.shape(b)));
            }
        }
        let y = kernels::linear_forward(
            self.value(x).data(),
            self.value(w).data(),
            bias.map(|b| self.value(b).data()),
            outer,
            cin,
            cout,
            inner,
        );
        let mut out_shape = shape.clone();
        out_shape[axis] = cout;
        let out = Tensor::new(&out_shape, y)?;
        let mut parents = vec![x, w];
        parents.extend(bias);
        Ok(self.push_op(out, &parents, move |b| {
            let (dx, dw, db) = kernels::linear_backward(
                b.inputs[0].data(),
                b.inputs[1].data(),
                b.grad.data(),
                outer,
                cin,
                cout,
                inner,
                b.needs[0],
            );
            let mut r = vec![
                dx.map(|d| Tensor::new(&shape, d).expect("shape")),
                Some(Tensor::new(&[cout, cin], dw).expect("shape")),
            ];
            if b.inputs.len() == 3 {
                r.push(Some(Tensor::new(&[cout], db).expect("shape")));
            }
            r
        }))
    }

    /// Normalization over `axis` with per-channel affine `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, axis: usize, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, c, inner) = axis_view(&shape, axis);
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return invalid(format!("layer_norm: affine params must be [{c}]"));
        }
        let (y, xhat, inv_std) = kernels::layer_norm_forward(
            self.value(x).data(),
            self.value(gain).data(),
            self.value(bias).data(),
            outer,
            c,
            inner,
            T::lit(eps),
        );
        let out = Tensor::new(&shape, y)?;
        let saved = self.wants_grad(&[x, gain, bias]).then_some((xhat, inv_std));
        Ok(self.push_op(out, &[x, gain, bias], move |b| {
            let (xhat, inv_std) = saved.as_ref().expect("recorded");
            let (dx, dg, db) =
                kernels::layer_norm_backward(b.grad.data(), xhat, inv_std, b.inputs[1].data(), outer, c, inner);
            vec![
                Some(Tensor::new(&shape, dx).expect("shape")),
                Some(Tensor::new(&[c], dg).expect("shape")),
                Some(Tensor::new(&[c], db).expect("shape")),
            ]
        }))
    }

    /// Parametric ReLU with one learned slope per channel along `axis`.
    pub fn prelu(&mut self, x: Var, slope: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, c, inner) = axis_view(&shape, axis);
        if self.shape(slope) != [c] {
            return invalid(format!("prelu: slope must be [{c}]"));
        }
        let xs = self.value(x).data();
        let a = self.value(slope).data();
        let mut y = vec![T::zero(); xs.len()];
        for n in 0..outer {
            for ch in 0..c {
                let off = (n * c + ch) * inner;
                for k in off..off + inner {
                    y[k] = if xs[k] > T::zero() { xs[k] } else { a[ch] * xs[k] };
                }
            }
        }
        let out = Tensor::new(&shape, y)?;
        Ok(self.push_op(out, &[x, slope], move |b| {
            let xs = b.inputs[0].data();
            let a = b.inputs[1].data();
            let g = b.grad.data();
            let mut dx = vec![T::zero(); xs.len()];
            let mut da = vec![T::zero(); c];
            for n in 0..outer {
                for ch in 0..c {
                    let off = (n * c + ch) * inner;
                    for k in off..off + inner {
                        if xs[k] > T::zero() {
                            dx[k] = g[k];
                        } else {
                            dx[k] = a[ch] * g[k];
                            da[ch] += g[k] * xs[k];
                        }
                    }
                }
            }
            vec![
                Some(Tensor::new(&shape, dx).expect("shape")),
                Some(Tensor::new(&[c], da).expect("shape")),
            ]
        }))
    }

    /// Causal 2-D convolution of `x: [Cin, T, F]` with `w: [Cout, Cin, kT, kF]`.
    /// Time is padded only on the past side by `(kT - 1) * dilation`; frequency
    /// symmetrically by `(kF - 1) / 2`.
    pub fn conv2d_causal(&mut self, x: Var, w: Var, bias: Var, dilation: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 4 {
            return invalid(format!(
                "conv2d: expected [C,T,F] input and 4-D kernel, got {xs:?}, {ws:?}"
            ));
        }
        if ws[1] != xs[0] {
            return invalid(format!(
                "conv2d: kernel expects {} input channels, got {}",
                ws[1], xs[0]
            ));
        }
        if ws[3] % 2 == 0 {
            return invalid(format!("conv2d: frequency kernel size {} must be odd", ws[3]));
        }
        if dilation == 0 {
            return invalid("conv2d: dilation must be >= 1");
        }
        if self.shape(bias) != [ws[0]] {
            return invalid(format!("conv2d: bias must be [{}]", ws[0]));
        }
        let geom = ConvGeom {
            cin: xs[0],
            cout: ws[0],
            frames: xs[1],
            bins: xs[2],
            kt: ws[2],
            kf: ws[3],
            dilation,
        };
        let y = kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            self.value(bias).data(),
        );
        let out = Tensor::new(&[geom.cout, geom.frames, geom.bins], y)?;
        Ok(self.push_op(out, &[x, w, bias], move |b| {
            let (dx, dw, db) =
                kernels::conv2d_backward(&geom, b.inputs[0].data(), b.inputs[1].data(), b.grad.data(), b.needs[0]);
            vec![
                dx.map(|d| Tensor::new(b.inputs[0].shape(), d).expect("shape")),
                Some(Tensor::new(b.inputs[1].shape(), dw).expect("shape")),
                Some(Tensor::new(&[geom.cout], db).expect("shape")),
            ]
        }))
    }
}

pub(crate) fn permute3_tensor<T: Scalar>(x: &Tensor<T>, perm: [usize; 3]) -> Tensor<T> {
    let s = x.shape();
    let out_shape = [s[perm[0]], s[perm[1]], s[perm[2]]];
    let in_strides = [s[1] * s[2], s[2], 1];
    let st = [in_strides[perm[0]], in_strides[perm[1]], in_strides[perm[2]]];
    let src = x.data();
    let mut data = Vec::with_capacity(src.len());
    for i in 0..out_shape[0] {
        for j in 0..out_shape[1] {
            let base = i * st[0] + j * st[1];
            if st[2] == 1 {
                data.extend_from_slice(&src[base..base + out_shape[2]]);
            } else {
                data.extend((0..out_shape[2]).map(|k| src[base + k * st[2]]));
            }
        }
    }
    Tensor::new(&out_shape, data).expect("shape")
}
