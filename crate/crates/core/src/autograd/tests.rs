use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::nn::gradcheck::{gradcheck, GradcheckOptions};
use crate::spectral::{Framing, StftConfig};

const TOL: f64 = 1e-4;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Adds named random tensors and a random projection for the scalar loss.
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

    fn add(&mut self, name: &str, shape: &[usize]) -> ParamId {
        let t = rand_tensor(shape, &mut self.rng);
        self.store.add(name, t).unwrap()
    }

    fn projection(&mut self, shape: &[usize]) -> Tensor<f64> {
        rand_tensor(shape, &mut self.rng)
    }

    fn check<F>(mut self, build: F)
    where
        F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
    {
        let report = gradcheck(&mut self.store, build, &GradcheckOptions::default()).unwrap();
        assert!(report.passed(TOL), "gradcheck failures: {:#?}", report.failures(TOL));
    }
}

#[test]
fn elementwise_ops() {
    let mut c = Case::new(1);
    let a = c.add("a", &[3, 4]);
    let b = c.add("b", &[3, 4]);
    let w = c.projection(&[3, 4]);
    c.check(move |g, s| {
        let (a, b) = (g.param(s, a), g.param(s, b));
        let x = g.mul(a, b)?;
        let y = g.sigmoid(x);
        let z = g.tanh(a);
        let u = g.sub(y, z)?;
        let v = g.scale(u, 1.7);
        let r = g.add(v, b)?;
        g.weighted_sum(r, w.clone())
    });
}

#[test]
fn relu_away_from_kink() {
    let mut c = Case::new(2);
    let mut vals = rand_tensor(&[10], &mut c.rng);
    for v in vals.data_mut() {
        if v.abs() < 0.05 {
            *v = 0.3;
        }
    }
    let a = c.store.add("a", vals).unwrap();
    let w = c.projection(&[10]);
    c.check(move |g, s| {
        let a = g.param(s, a);
        let r = g.relu(a);
        g.weighted_sum(r, w.clone())
    });
}

#[test]
fn structural_ops() {
    let mut c = Case::new(3);
    let a = c.add("a", &[2, 3, 4]);
    let b = c.add("b", &[3, 3, 4]);
    let w = c.projection(&[3, 4, 4]);
    c.check(move |g, s| {
        let (a, b) = (g.param(s, a), g.param(s, b));
        let cat = g.concat0(&[a, b])?;
        let sl = g.slice0(cat, 1, 4)?;
        let p = g.permute3(sl, [2, 0, 1])?;
        let r = g.reshape(p, &[4, 12])?;
        let r = g.reshape(r, &[4, 4, 3])?;
        let p2 = g.permute3(r, [2, 1, 0])?;
        let total = g.sum(p2);
        let total = g.scale(total, 0.1);
        let ws = g.weighted_sum(p2, w.clone())?;
        g.add(ws, total)
    });
}

#[test]
fn squared_error_op() {
    let mut c = Case::new(4);
    let a = c.add("a", &[5]);
    let t = c.projection(&[5]);
    c.check(move |g, s| {
        let a = g.param(s, a);
        g.squared_error(a, &t)
    });
}

#[test]
fn linear_every_axis() {
    for axis in 0..3 {
        let mut c = Case::new(10 + axis as u64);
        let mut shape = vec![3, 4, 5];
        let x = c.add("x", &shape);
        let w = c.add("w", &[2, shape[axis]]);
        let b = c.add("b", &[2]);
        shape[axis] = 2;
        let proj = c.projection(&shape);
        c.check(move |g, s| {
            let (x, w, b) = (g.param(s, x), g.param(s, w), g.param(s, b));
            let y = g.linear(x, w, Some(b), axis)?;
            g.weighted_sum(y, proj.clone())
        });
    }
}

#[test]
fn layer_norm_both_layouts() {
    for axis in [0, 2] {
        let mut c = Case::new(20 + axis as u64);
        let x = c.add("x", &[4, 3, 5]);
        let shape = [4, 3, 5];
        let gain = c.add("gain", &[shape[axis]]);
        let bias = c.add("bias", &[shape[axis]]);
        let proj = c.projection(&shape);
        c.check(move |g, s| {
            let (x, ga, bi) = (g.param(s, x), g.param(s, gain), g.param(s, bias));
            let y = g.layer_norm(x, ga, bi, axis, 1e-5)?;
            g.weighted_sum(y, proj.clone())
        });
    }
}

#[test]
fn prelu_op() {
    let mut c = Case::new(30);
    let x = c.add("x", &[3, 4, 2]);
    let a = c.add("a", &[3]);
    let proj = c.projection(&[3, 4, 2]);
    c.check(move |g, s| {
        let (x, a) = (g.param(s, x), g.param(s, a));
        let y = g.prelu(x, a, 0)?;
        g.weighted_sum(y, proj.clone())
    });
}

#[test]
fn conv2d_kernels_and_dilations() {
    for (i, &(kt, kf, dil)) in [(1, 1, 1), (2, 3, 1), (2, 3, 4), (3, 5, 2), (2, 1, 1)]
        .iter()
        .enumerate()
    {
        let mut c = Case::new(40 + i as u64);
        let x = c.add("x", &[3, 6, 7]);
        let w = c.add("w", &[2, 3, kt, kf]);
        let b = c.add("b", &[2]);
        let proj = c.projection(&[2, 6, 7]);
        c.check(move |g, s| {
            let (x, w, b) = (g.param(s, x), g.param(s, w), g.param(s, b));
            let y = g.conv2d_causal(x, w, b, dil)?;
            g.weighted_sum(y, proj.clone())
        });
    }
}

#[test]
fn gru_both_directions() {
    for reverse in [false, true] {
        let mut c = Case::new(50 + reverse as u64);
        let x = c.add("x", &[2, 4, 3]);
        let wi = c.add("w_ih", &[9, 3]);
        let wh = c.add("w_hh", &[9, 3]);
        let b = c.add("bias", &[9]);
        let proj = c.projection(&[2, 4, 3]);
        c.check(move |g, s| {
            let (x, wi, wh, b) = (g.param(s, x), g.param(s, wi), g.param(s, wh), g.param(s, b));
            let y = g.gru(x, wi, wh, b, reverse)?;
            g.weighted_sum(y, proj.clone())
        });
    }
}

#[test]
fn attention_heads() {
    for heads in [1, 2] {
        let mut c = Case::new(60 + heads as u64);
        let q = c.add("q", &[2, 5, 4]);
        let k = c.add("k", &[2, 5, 4]);
        let v = c.add("v", &[2, 5, 4]);
        let proj = c.projection(&[2, 5, 4]);
        c.check(move |g, s| {
            let (q, k, v) = (g.param(s, q), g.param(s, k), g.param(s, v));
            let y = g.attention(q, k, v, heads)?;
            g.weighted_sum(y, proj.clone())
        });
    }
}

fn tiny_framing(win_ms: f64, fft: usize) -> Arc<Framing<f64>> {
    let cfg = StftConfig {
        win_ms,
        overlap: 0.5,
        fft_size: fft,
        remove_dc: true,
        sample_rate: 1000,
    };
    Arc::new(Framing::new(&cfg).unwrap())
}

#[test]
fn stft_and_istft_ops() {
    for &(win, fft) in &[(8.0, 8), (6.0, 8)] {
        let framing = tiny_framing(win, fft);
        let mut c = Case::new(70 + fft as u64 + win as u64);
        let y = c.add("y", &[29]);
        let frames = framing.frames(29);
        let proj = c.projection(&[2, frames, framing.bins()]);
        let f1 = framing.clone();
        c.check(move |g, s| {
            let y = g.param(s, y);
            let spec = g.stft(y, f1.clone())?;
            g.weighted_sum(spec, proj.clone())
        });

        let mut c = Case::new(80 + fft as u64 + win as u64);
        let spec = c.add("spec", &[2, 4, framing.bins()]);
        let out_len = 3 * framing.hop + framing.win - 1;
        let proj = c.projection(&[out_len]);
        let f2 = framing.clone();
        c.check(move |g, s| {
            let spec = g.param(s, spec);
            let y = g.istft(spec, f2.clone(), out_len)?;
            g.weighted_sum(y, proj.clone())
        });
    }
}

#[test]
fn complex_mul_and_compressed_distance() {
    for c_exp in [1.0, 0.6, 0.3] {
        let mut c = Case::new(90);
        let m = c.add("mask", &[2, 3, 4]);
        let x = c.projection(&[2, 3, 4]);
        let target = c.projection(&[2, 3, 4]);
        c.check(move |g, s| {
            let m = g.param(s, m);
            let y = g.complex_mul_const(m, &x)?;
            g.compressed_spectral_distance(y, &target, c_exp)
        });
    }
}

#[test]
fn segment_op() {
    let mut c = Case::new(100);
    let x = c.add("x", &[2, 19]);
    let proj = c.projection(&[2, 4, 6]);
    c.check(move |g, s| {
        let x = g.param(s, x);
        let y = g.segment(x, 6, 6, 4)?;
        g.weighted_sum(y, proj.clone())
    });
}

#[test]
fn segment_layout() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new(&[1, 5], vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap());
    let y = g.segment(x, 2, 2, 4).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 0.0, 0.0, 0.0]);
}

#[test]
fn compressed_distance_closed_forms() {
    let mut g = Graph::<f64>::new();
    // Y = 0 against unit-magnitude targets: 1 + 1 per bin
    let phases = [0.3f64, 1.9, -2.2];
    let mut t = vec![0.0; 6];
    for (i, p) in phases.iter().enumerate() {
        t[i] = p.cos();
        t[3 + i] = p.sin();
    }
    let target = Tensor::new(&[2, 1, 3], t).unwrap();
    let y = g.leaf(Tensor::zeros(&[2, 1, 3]));
    let l = g.compressed_spectral_distance(y, &target, 0.6).unwrap();
    assert!((g.value(l).data()[0] - 6.0).abs() < 1e-12);
    let grads = g.gradients(l).unwrap();
    assert!(grads[y.index()].as_ref().unwrap().data().iter().all(|&v| v == 0.0));

    // single bin, c = 1: Y = 1, S = -1 -> 0 + |2|^2
    let mut g = Graph::<f64>::new();
    let y = g.constant(Tensor::new(&[2, 1, 1], vec![1.0, 0.0]).unwrap());
    let s = Tensor::new(&[2, 1, 1], vec![-1.0, 0.0]).unwrap();
    let l = g.compressed_spectral_distance(y, &s, 1.0).unwrap();
    assert!((g.value(l).data()[0] - 4.0).abs() < 1e-15);
}

#[test]
fn gradients_accumulate_over_reuse() {
    // d/dx sum(x * x) = 2x through a shared node
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap());
    let y = g.mul(x, x).unwrap();
    let l = g.sum(y);
    let grads = g.gradients(l).unwrap();
    assert_eq!(grads[x.index()].as_ref().unwrap().data(), &[2.0, -4.0, 1.0]);
}

#[test]
fn inference_graph_keeps_no_rules() {
    let mut g = Graph::<f64>::inference();
    let x = g.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
    let y = g.sum(x);
    assert!(!g.requires_grad(y));
    let grads = g.gradients(y).unwrap();
    assert!(grads.iter().all(Option::is_none));
}

#[test]
fn shape_errors() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[3, 2]));
    assert!(g.add(a, b).is_err());
    let x = g.constant(Tensor::zeros(&[2, 4, 4]));
    let w = g.constant(Tensor::zeros(&[1, 2, 2, 2]));
    let bias = g.constant(Tensor::zeros(&[1]));
    assert!(g.conv2d_causal(x, w, bias, 1).is_err(), "even kF rejected");
    let w3 = g.constant(Tensor::zeros(&[1, 3, 2, 3]));
    assert!(g.conv2d_causal(x, w3, bias, 1).is_err(), "channel mismatch");
    let q = g.constant(Tensor::zeros(&[1, 3, 6]));
    assert!(g.attention(q, q, q, 4).is_err());
    let l = g.constant(Tensor::zeros(&[2]));
    assert!(g.gradients(l).is_err(), "non-scalar loss");
}
