use super::kernels::{self, GruGeom};
use super::{Graph, Var};
use crate::error::{invalid, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

impl<T: Scalar> Graph<T> {
    /// GRU over `x: [N, L, D]` (N independent sequences) giving `[N, L, H]`.
    ///
    /// `w_ih: [3H, D]`, `w_hh: [3H, H]`, `bias: [3H]`, gate rows ordered
    /// update, reset, candidate. With `reverse` the sequence is read from the
    /// last step to the first; outputs stay aligned with their input steps.
    pub fn gru(&mut self, x: Var, w_ih: Var, w_hh: Var, bias: Var, reverse: bool) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || xs[1] == 0 {
            return invalid(format!("gru: expected nonempty [N, L, D], got {xs:?}"));
        }
        let wi = self.shape(w_ih).to_vec();
        if wi.len() != 2 || wi[0] % 3 != 0 || wi[1] != xs[2] {
            return invalid(format!("gru: input weight {wi:?} does not fit input width {}", xs[2]));
        }
        let hidden = wi[0] / 3;
        if self.shape(w_hh) != [3 * hidden, hidden] || self.shape(bias) != [3 * hidden] {
            return invalid(format!(
                "gru: recurrent weight/bias must be [{}, {hidden}] / [{}]",
                3 * hidden,
                3 * hidden
            ));
        }
        let geom = GruGeom {
            batch: xs[0],
            len: xs[1],
            input: xs[2],
            hidden,
            reverse,
        };
        let keep = self.wants_grad(&[x, w_ih, w_hh, bias]);
        let (y, trace) = kernels::gru_forward(
            &geom,
            self.value(x).data(),
            self.value(w_ih).data(),
            self.value(w_hh).data(),
            self.value(bias).data(),
            keep,
        );
        let out = Tensor::new(&[geom.batch, geom.len, hidden], y)?;
        Ok(self.push_op(out, &[x, w_ih, w_hh, bias], move |b| {
            let trace = trace.as_ref().expect("recorded");
            let (dx, dwi, dwh, db) = kernels::gru_backward(
                &geom,
                b.inputs[0].data(),
                b.inputs[1].data(),
                b.inputs[2].data(),
                b.out.data(),
                trace,
                b.grad.data(),
                b.needs[0],
            );
            vec![
                dx.map(|d| Tensor::new(b.inputs[0].shape(), d).expect("shape")),
                Some(Tensor::new(b.inputs[1].shape(), dwi).expect("shape")),
                Some(Tensor::new(b.inputs[2].shape(), dwh).expect("shape")),
                Some(Tensor::new(b.inputs[3].shape(), db).expect("shape")),
            ]
        }))
    }

    /// Multi-head scaled dot-product attention on already projected
    /// `q, k, v: [N, L, D]`; every position attends to the whole sequence.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let s = self.shape(q).to_vec();
        if s.len() != 3 || self.shape(k) != s.as_slice() || self.shape(v) != s.as_slice() {
            return invalid("attention: q, k, v must share one [N, L, D] shape");
        }
        if heads == 0 || s[2] % heads != 0 {
            return invalid(format!("attention: width {} not divisible by {heads} heads", s[2]));
        }
        let (batch, len, dim) = (s[0], s[1], s[2]);
        let keep = self.wants_grad(&[q, k, v]);
        let (y, probs) = kernels::attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            batch,
            len,
            dim,
            heads,
            keep,
        );
        let out = Tensor::new(&s, y)?;
        Ok(self.push_op(out, &[q, k, v], move |b| {
            let probs = probs.as_ref().expect("recorded");
            let (dq, dk, dv) = kernels::attention_backward(
                b.inputs[0].data(),
                b.inputs[1].data(),
                b.inputs[2].data(),
                probs,
                b.grad.data(),
                batch,
                len,
                dim,
                heads,
            );
            vec![
                Some(Tensor::new(&s, dq).expect("shape")),
                Some(Tensor::new(&s, dk).expect("shape")),
                Some(Tensor::new(&s, dv).expect("shape")),
            ]
        }))
    }
}
