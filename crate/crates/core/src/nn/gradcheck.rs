//! Central finite-difference verification of backward rules.

use crate::autograd::{Graph, ParamStore, Var};
use crate::error::{Error, Result};

/// Finite-difference step used by default.
pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradcheckEntry {
    pub name: String,
    /// `max |analytic - numeric| / max(|analytic|_inf, |numeric|_inf, floor)` over checked entries
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    pub finite: bool,
}

#[derive(Clone, Debug, Default)]
pub struct GradcheckReport {
    pub loss: f64,
    pub entries: Vec<GradcheckEntry>,
}

impl GradcheckReport {
    pub fn worst(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| if e.finite { e.max_rel_err } else { f64::INFINITY })
            .fold(0.0, f64::max)
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.entries.iter().all(|e| e.finite && e.max_rel_err < tol)
    }

    pub fn failures(&self, tol: f64) -> Vec<&GradcheckEntry> {
        self.entries
            .iter()
            .filter(|e| !(e.finite && e.max_rel_err < tol))
            .collect()
    }
}

/// Options for [`gradcheck`].
#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub step: f64,
    /// Check at most this many (evenly spaced) entries per tensor.
    pub max_entries: Option<usize>,
    /// Absolute scale below which gradients count as zero.
    pub floor: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            max_entries: None,
            floor: 1e-6,
        }
    }
}

fn eval<F>(store: &ParamStore<f64>, build: &F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::inference();
    let loss = build(&mut g, store)?;
    Ok(g.value(loss).data()[0])
}

/// Compares the gradients `build` produces for every tensor in `store`
/// against central differences of its scalar output.
pub fn gradcheck<F>(store: &mut ParamStore<f64>, build: F, opts: &GradcheckOptions) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    store.zero_grad();
    let mut g = Graph::new();
    let loss = build(&mut g, store)?;
    let loss_value = g.value(loss).data()[0];
    g.backward(loss, store).or_else(|e| match e {
        Error::NonFinite(_) => Ok(()),
        other => Err(other),
    })?;
    drop(g);

    let mut report = GradcheckReport {
        loss: loss_value,
        entries: Vec::new(),
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let analytic = store.grad(id).clone();
        let n = analytic.numel();
        let stride = opts.max_entries.map_or(1, |m| n.div_ceil(m.max(1)).max(1));
        let mut numeric = Vec::new();
        let mut picked = Vec::new();
        for i in (0..n).step_by(stride) {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + opts.step;
            let up = eval(store, &build)?;
            store.value_mut(id).data_mut()[i] = orig - opts.step;
            let down = eval(store, &build)?;
            store.value_mut(id).data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * opts.step));
            picked.push(analytic.data()[i]);
        }
        let finite = picked.iter().chain(&numeric).all(|v| v.is_finite());
        let scale = picked.iter().chain(&numeric).fold(opts.floor, |m, v| m.max(v.abs()));
        let max_abs = picked
            .iter()
            .zip(&numeric)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        report.entries.push(GradcheckEntry {
            name: store.name(id).to_string(),
            max_rel_err: max_abs / scale,
            max_abs_err: max_abs,
            checked: picked.len(),
            finite,
        });
    }
    Ok(report)
}
