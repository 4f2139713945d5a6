//! Finite-difference checks of every differentiable operation, every layer,
//! and a small end-to-end network with its training loss.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{gradcheck, GradcheckOptions, GradcheckReport};
use super::{DilatedDenseBlock, GatedConv2d, Gru, ImprovedTransformer};
use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::error::Result;
use crate::loss::{total_loss_graph, LossConfig, MultiResolution};
use crate::model::{build, ForkNetConfig};
use crate::spectral::{Framing, StftConfig};
use crate::tensor::Tensor;

/// Relative-error bound every case must meet.
pub const TOLERANCE: f64 = 1e-4;

/// Samples fed to the end-to-end case; six frames of the gradcheck framing.
pub const MODEL_SAMPLES: usize = 56;

/// One named case and its report.
#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub name: String,
    pub report: GradcheckReport,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.report.passed(TOLERANCE)
    }
}

struct Case {
    store: ParamStore<f64>,
    rng: ChaCha8Rng,
}

impl Case {
    fn new(seed: u64) -> Self {
        Self {
            store: ParamStore::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn tensor(&mut self, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| self.rng.random_range(-1.0..1.0))
    }

    fn add(&mut self, name: &str, shape: &[usize]) -> ParamId {
        let t = self.tensor(shape);
        self.store.add(name, t).unwrap()
    }

    /// Shifts every parameter (including zero-initialized biases) off its initial value.
    fn perturb(&mut self, scale: f64) {
        for (_, p) in self.store.iter_mut() {
            for v in p.value.data_mut() {
                *v += self.rng.random_range(-scale..scale);
            }
        }
    }
}

struct Runner {
    results: Vec<SuiteResult>,
    opts: GradcheckOptions,
}

impl Runner {
    fn run<F>(&mut self, name: &str, mut case: Case, build: F) -> Result<()>
    where
        F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
    {
        let report = gradcheck(&mut case.store, build, &self.opts)?;
        self.results.push(SuiteResult {
            name: name.to_string(),
            report,
        });
        Ok(())
    }
}

fn small_framing(win_ms: f64, fft_size: usize) -> Result<Arc<Framing<f64>>> {
    let cfg = StftConfig {
        win_ms,
        overlap: 0.5,
        fft_size,
        remove_dc: true,
        sample_rate: 1000,
    };
    Ok(Arc::new(Framing::new(&cfg)?))
}

fn op_cases(r: &mut Runner, seed: u64) -> Result<()> {
    let mut c = Case::new(seed);
    let (a, b) = (c.add("a", &[3, 4]), c.add("b", &[3, 4]));
    let w = c.tensor(&[3, 4]);
    r.run("op.elementwise", c, move |g, s| {
        let (a, b) = (g.param(s, a), g.param(s, b));
        let x = g.mul(a, b)?;
        let y = g.sigmoid(x);
        let z = g.tanh(a);
        let u = g.sub(y, z)?;
        let v = g.scale(u, 1.7);
        let out = g.add(v, b)?;
        g.weighted_sum(out, w.clone())
    })?;

    let mut c = Case::new(seed + 1);
    let mut vals = c.tensor(&[10]);
    // keep away from the kink
    vals.data_mut()
        .iter_mut()
        .filter(|v| v.abs() < 0.05)
        .for_each(|v| *v = 0.3);
    let a = c.store.add("a", vals)?;
    let w = c.tensor(&[10]);
    r.run("op.relu", c, move |g, s| {
        let a = g.param(s, a);
        let y = g.relu(a);
        g.weighted_sum(y, w.clone())
    })?;

    let mut c = Case::new(seed + 2);
    let (a, b) = (c.add("a", &[2, 3, 4]), c.add("b", &[3, 3, 4]));
    let w = c.tensor(&[3, 4, 4]);
    r.run("op.structural", c, move |g, s| {
        let (a, b) = (g.param(s, a), g.param(s, b));
        let cat = g.concat0(&[a, b])?;
        let sl = g.slice0(cat, 1, 4)?;
        let p = g.permute3(sl, [2, 0, 1])?;
        let flat = g.reshape(p, &[4, 12])?;
        let cube = g.reshape(flat, &[4, 4, 3])?;
        let p2 = g.permute3(cube, [2, 1, 0])?;
        let total = g.sum(p2);
        let total = g.scale(total, 0.1);
        let ws = g.weighted_sum(p2, w.clone())?;
        g.add(ws, total)
    })?;

    let mut c = Case::new(seed + 3);
    let a = c.add("a", &[5]);
    let t = c.tensor(&[5]);
    r.run("op.squared_error", c, move |g, s| {
        let a = g.param(s, a);
        g.squared_error(a, &t)
    })?;

    for axis in 0..3 {
        let mut c = Case::new(seed + 10 + axis as u64);
        let mut shape = vec![3, 4, 5];
        let x = c.add("x", &shape);
        let w = c.add("w", &[2, shape[axis]]);
        let b = c.add("b", &[2]);
        shape[axis] = 2;
        let proj = c.tensor(&shape);
        r.run(&format!("op.linear.axis{axis}"), c, move |g, s| {
            let (x, w, b) = (g.param(s, x), g.param(s, w), g.param(s, b));
            let y = g.linear(x, w, Some(b), axis)?;
            g.weighted_sum(y, proj.clone())
        })?;
    }

    for axis in [0, 2] {
        let mut c = Case::new(seed + 20 + axis as u64);
        let shape = [4, 3, 5];
        let x = c.add("x", &shape);
        let gain = c.add("gain", &[shape[axis]]);
        let bias = c.add("bias", &[shape[axis]]);
        let proj = c.tensor(&shape);
        r.run(&format!("op.layer_norm.axis{axis}"), c, move |g, s| {
            let (x, ga, bi) = (g.param(s, x), g.param(s, gain), g.param(s, bias));
            let y = g.layer_norm(x, ga, bi, axis, 1e-5)?;
            g.weighted_sum(y, proj.clone())
        })?;
    }

    let mut c = Case::new(seed + 30);
    let (x, a) = (c.add("x", &[3, 4, 2]), c.add("a", &[3]));
    let proj = c.tensor(&[3, 4, 2]);
    r.run("op.prelu", c, move |g, s| {
        let (x, a) = (g.param(s, x), g.param(s, a));
        let y = g.prelu(x, a, 0)?;
        g.weighted_sum(y, proj.clone())
    })?;

    for (i, &(kt, kf, dil)) in [(1, 1, 1), (2, 3, 1), (2, 3, 4), (3, 5, 2), (2, 1, 1)]
        .iter()
        .enumerate()
    {
        let mut c = Case::new(seed + 40 + i as u64);
        let x = c.add("x", &[3, 6, 7]);
        let w = c.add("w", &[2, 3, kt, kf]);
        let b = c.add("b", &[2]);
        let proj = c.tensor(&[2, 6, 7]);
        r.run(&format!("op.conv2d.k{kt}x{kf}.d{dil}"), c, move |g, s| {
            let (x, w, b) = (g.param(s, x), g.param(s, w), g.param(s, b));
            let y = g.conv2d_causal(x, w, b, dil)?;
            g.weighted_sum(y, proj.clone())
        })?;
    }

    for reverse in [false, true] {
        let mut c = Case::new(seed + 50 + reverse as u64);
        let x = c.add("x", &[2, 4, 3]);
        let wi = c.add("w_ih", &[9, 3]);
        let wh = c.add("w_hh", &[9, 3]);
        let b = c.add("bias", &[9]);
        let proj = c.tensor(&[2, 4, 3]);
        let name = if reverse { "op.gru.reverse" } else { "op.gru.forward" };
        r.run(name, c, move |g, s| {
            let (x, wi, wh, b) = (g.param(s, x), g.param(s, wi), g.param(s, wh), g.param(s, b));
            let y = g.gru(x, wi, wh, b, reverse)?;
            g.weighted_sum(y, proj.clone())
        })?;
    }

    for heads in [1, 2] {
        let mut c = Case::new(seed + 60 + heads as u64);
        let (q, k, v) = (c.add("q", &[2, 5, 4]), c.add("k", &[2, 5, 4]), c.add("v", &[2, 5, 4]));
        let proj = c.tensor(&[2, 5, 4]);
        r.run(&format!("op.attention.heads{heads}"), c, move |g, s| {
            let (q, k, v) = (g.param(s, q), g.param(s, k), g.param(s, v));
            let y = g.attention(q, k, v, heads)?;
            g.weighted_sum(y, proj.clone())
        })?;
    }

    for &(win, fft) in &[(8.0, 8), (6.0, 8)] {
        let framing = small_framing(win, fft)?;
        let mut c = Case::new(seed + 70 + fft as u64 + win as u64);
        let y = c.add("y", &[29]);
        let proj = c.tensor(&[2, framing.frames(29), framing.bins()]);
        let f = Arc::clone(&framing);
        r.run(&format!("op.stft.win{win}"), c, move |g, s| {
            let y = g.param(s, y);
            let spec = g.stft(y, Arc::clone(&f))?;
            g.weighted_sum(spec, proj.clone())
        })?;

        let mut c = Case::new(seed + 80 + fft as u64 + win as u64);
        let spec = c.add("spec", &[2, 4, framing.bins()]);
        let out_len = 3 * framing.hop + framing.win - 1;
        let proj = c.tensor(&[out_len]);
        let f = Arc::clone(&framing);
        r.run(&format!("op.istft.win{win}"), c, move |g, s| {
            let spec = g.param(s, spec);
            let y = g.istft(spec, Arc::clone(&f), out_len)?;
            g.weighted_sum(y, proj.clone())
        })?;
    }

    for c_exp in [1.0, 0.6, 0.3] {
        let mut c = Case::new(seed + 90);
        let m = c.add("mask", &[2, 3, 4]);
        let x = c.tensor(&[2, 3, 4]);
        let target = c.tensor(&[2, 3, 4]);
        r.run(&format!("op.masked_compressed_distance.c{c_exp}"), c, move |g, s| {
            let m = g.param(s, m);
            let y = g.complex_mul_const(m, &x)?;
            g.compressed_spectral_distance(y, &target, c_exp)
        })?;
    }

    let mut c = Case::new(seed + 100);
    let x = c.add("x", &[2, 19]);
    let proj = c.tensor(&[2, 4, 6]);
    r.run("op.segment", c, move |g, s| {
        let x = g.param(s, x);
        let y = g.segment(x, 6, 6, 4)?;
        g.weighted_sum(y, proj.clone())
    })
}

fn layer_cases(r: &mut Runner, seed: u64) -> Result<()> {
    let mut c = Case::new(seed + 200);
    let block = DilatedDenseBlock::new(&mut c.store, "dense", 3, 3, &mut c.rng)?;
    c.perturb(0.2);
    let x = c.tensor(&[3, 9, 5]);
    let proj = c.tensor(&[3, 9, 5]);
    r.run("layer.dense_block", c, move |g, s| {
        let v = g.constant(x.clone());
        let y = block.forward(g, s, v)?;
        g.weighted_sum(y, proj.clone())
    })?;

    let mut c = Case::new(seed + 201);
    let gated = GatedConv2d::new(&mut c.store, "gated", 2, 3, (2, 3), &mut c.rng)?;
    c.perturb(0.2);
    let x = c.tensor(&[2, 4, 5]);
    let proj = c.tensor(&[3, 4, 5]);
    r.run("layer.gated_conv", c, move |g, s| {
        let v = g.constant(x.clone());
        let y = gated.forward(g, s, v)?;
        g.weighted_sum(y, proj.clone())
    })?;

    let mut c = Case::new(seed + 202);
    let gru = Gru::new(&mut c.store, "gru", 3, 4, &mut c.rng)?;
    c.perturb(0.2);
    let x = c.tensor(&[2, 5, 3]);
    let proj = c.tensor(&[2, 5, 4]);
    r.run("layer.gru", c, move |g, s| {
        let v = g.constant(x.clone());
        let y = gru.forward(g, s, v, false)?;
        g.weighted_sum(y, proj.clone())
    })?;

    let mut c = Case::new(seed + 203);
    let tr = ImprovedTransformer::new(&mut c.store, "transformer", 4, 2, 3, &mut c.rng)?;
    c.perturb(0.2);
    let x = c.tensor(&[2, 5, 4]);
    let proj = c.tensor(&[2, 5, 4]);
    r.run("layer.transformer", c, move |g, s| {
        let v = g.constant(x.clone());
        let y = tr.forward(g, s, v)?;
        g.weighted_sum(y, proj.clone())
    })
}

fn model_case(r: &mut Runner, seed: u64) -> Result<()> {
    let cfg = ForkNetConfig::gradcheck();
    let (net, store) = build::<f64>(&cfg, seed)?;
    let mut c = Case::new(seed + 300);
    c.store = store;
    c.perturb(0.1);
    let noisy: Vec<f64> = (0..MODEL_SAMPLES).map(|_| c.rng.random_range(-0.5..0.5)).collect();
    let clean: Vec<f64> = (0..MODEL_SAMPLES).map(|_| c.rng.random_range(-0.5..0.5)).collect();
    let loss = LossConfig {
        mr_windows_ms: vec![8.0, 16.0],
        ..LossConfig::default()
    };
    let mr = MultiResolution::new(&loss.mr_windows_ms, cfg.stft.sample_rate)?;
    let clean_spec = net.analyze(&clean)?;
    let total = move |g: &mut Graph<f64>, s: &ParamStore<f64>| -> Result<Var> {
        let (vars, _) = net.forward(g, s, &noisy)?;
        Ok(total_loss_graph(g, vars.spectrum, &clean_spec, vars.waveform, &clean, &loss, &mr)?.total)
    };
    // divide by the starting loss so finite-difference rounding is relative to O(1)
    let mut g = Graph::inference();
    let l0 = total(&mut g, &c.store)?;
    let inv = 1.0 / g.value(l0).data()[0];
    r.run("model.forknet_total_loss", c, move |g, s| {
        let l = total(g, s)?;
        Ok(g.scale(l, inv))
    })
}

/// Runs every case. `max_entries` bounds the coordinates perturbed per
/// parameter tensor in the end-to-end case; the op and layer cases are
/// always checked exhaustively.
pub fn run(seed: u64, max_entries: Option<usize>) -> Result<Vec<SuiteResult>> {
    let mut r = Runner {
        results: Vec::new(),
        opts: GradcheckOptions::default(),
    };
    op_cases(&mut r, seed)?;
    layer_cases(&mut r, seed)?;
    r.opts.max_entries = max_entries;
    model_case(&mut r, seed)?;
    Ok(r.results)
}
