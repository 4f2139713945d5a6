use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::Checkpoint;
use super::*;
use crate::error::Error;

fn noise(n: usize, seed: u64) -> Vec<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| r.random_range(-0.5..0.5)).collect()
}

fn randomize(store: &mut ParamStore<f64>, seed: u64, scale: f64) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    for (_, p) in store.iter_mut() {
        for v in p.value.data_mut() {
            *v += r.random_range(-scale..scale);
        }
    }
}

fn set(store: &mut ParamStore<f64>, id: crate::autograd::ParamId, value: f64) {
    store.value_mut(id).data_mut().fill(value);
}

fn eval(f: impl FnOnce(&mut Graph<f64>) -> Result<Var>) -> Tensor<f64> {
    let mut g = Graph::inference();
    let v = f(&mut g).unwrap();
    g.value(v).clone()
}

fn gradcheck_input(seed: u64) -> AudioBuffer<f64> {
    AudioBuffer::new(noise(56, seed), 1000).unwrap()
}

#[test]
fn paper_counts_and_ablation_order() {
    let count = |c: &ForkNetConfig| param_count(&build::<f64>(c, 0).unwrap().1);
    let (paper, r1, r2) = (
        count(&ForkNetConfig::paper()),
        count(&ForkNetConfig::ref1()),
        count(&ForkNetConfig::ref2()),
    );
    assert!((520_000..=640_000).contains(&paper), "{paper}");
    assert!(r1 > r2 && r2 > paper, "{r1} {r2} {paper}");
}

#[test]
fn breakdown_covers_every_parameter() {
    let (_, store) = build::<f64>(&ForkNetConfig::paper(), 0).unwrap();
    let parts: usize = param_breakdown(&store).iter().map(|(_, n)| n).sum();
    assert_eq!(parts, param_count(&store));
}

#[test]
fn fusion_count_closed_form() {
    let mut store = ParamStore::<f64>::new();
    let mut r = ChaCha8Rng::seed_from_u64(0);
    Linear::new(&mut store, "p", 2, 32, &mut r).unwrap();
    assert_eq!(param_count(&store), 96);
    for d in [8, 16, 32] {
        let fuse = |d| {
            let (_, s) = build::<f64>(&ForkNetConfig::with_widths(d, d, 0, d), 0).unwrap();
            s.count_prefix("fuse.")
        };
        assert_eq!(fuse(d), 2 * d * d + d);
        let ratio = fuse(2 * d) as f64 / fuse(d) as f64;
        assert!((ratio - 4.0).abs() < 0.15, "{ratio}");
    }
}

#[test]
fn build_is_seeded() {
    let cfg = ForkNetConfig::tiny();
    let a = build::<f64>(&cfg, 7).unwrap().1;
    let b = build::<f64>(&cfg, 7).unwrap().1;
    let c = build::<f64>(&cfg, 8).unwrap().1;
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(build::<f32>(&cfg, 7).unwrap().1, a.cast::<f32>());
}

#[test]
fn build_rejects_width_mismatch() {
    let cfg = ForkNetConfig::with_widths(24, 24, 8, 32);
    assert!(matches!(build::<f64>(&cfg, 0), Err(Error::InvalidConfig(_))));
    let mut cfg = ForkNetConfig::paper();
    cfg.heads = 5;
    assert!(build::<f64>(&cfg, 0).is_err());
    cfg.heads = 4;
    cfg.seg_chunk = 128;
    assert!(build::<f64>(&cfg, 0).is_err());
}

#[test]
fn ablation_variants_omit_encoders() {
    let (net, _) = build::<f64>(&ForkNetConfig::ref1(), 0).unwrap();
    assert!(net.mag_encoder.is_none() && net.time_encoder.is_none() && net.ri_encoder.is_some());
    let (net, _) = build::<f64>(&ForkNetConfig::ref2(), 0).unwrap();
    assert!(net.mag_encoder.is_some() && net.time_encoder.is_none());
}

#[test]
fn config_text_round_trip() {
    for cfg in [
        ForkNetConfig::paper(),
        ForkNetConfig::tiny(),
        ForkNetConfig::gradcheck(),
    ] {
        assert_eq!(ForkNetConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    }
    assert!(ForkNetConfig::from_text("d1 = 24\nwidth = 3\n").is_err());
    assert!(ForkNetConfig::from_text("d1 = many\n").is_err());
}

#[test]
fn encoder_shapes_and_zero_input_anchor() {
    let (net, mut store) = build::<f64>(&ForkNetConfig::paper(), 1).unwrap();
    let enc = net.mag_encoder.as_ref().unwrap();
    for frames in [1, 3, 5] {
        let y = eval(|g| {
            let x = g.constant(Tensor::zeros(&[1, frames, 256]));
            enc.forward(g, &store, x)
        });
        assert_eq!(y.shape(), [24, frames, 256]);
    }
    // fresh parameters have zero biases, so silence maps to silence
    let zero = |store: &ParamStore<f64>| {
        eval(|g| {
            let x = g.constant(Tensor::zeros(&[2, 4, 256]));
            net.ri_encoder.as_ref().unwrap().forward(g, store, x)
        })
    };
    assert!(zero(&store).data().iter().all(|&v| v == 0.0));
    randomize(&mut store, 2, 0.1);
    let a = zero(&store);
    assert_eq!(a.shape(), [24, 4, 256]);
    assert_eq!(a, zero(&store));
    assert!(a.is_finite() && a.max_abs() > 0.0);
}

#[test]
fn time_encoder_segments_full_second() {
    let (net, mut store) = build::<f64>(&ForkNetConfig::paper(), 3).unwrap();
    let enc = net.time_encoder.clone().unwrap();
    let x = noise(16_000, 4);
    let y = eval(|g| {
        let v = g.constant(Tensor::new(&[16_000], x.clone())?);
        enc.forward(g, &store, v, 62)
    });
    assert_eq!(y.shape(), [16, 62, 256]);
    // chunk t, column k is ReLU(w0 x[n-1] + w1 x[n] + b) at n = 256 t + k
    let w = store.value(enc.conv.weight).data().to_vec();
    for (c, t, k) in [(0, 0, 0), (3, 10, 17), (15, 61, 255), (7, 61, 127)] {
        let n = 256 * t + k;
        let prev = if n == 0 { 0.0 } else { x[n - 1] };
        let want = (w[2 * c] * prev + w[2 * c + 1] * x[n]).max(0.0);
        assert!((y.at3(c, t, k) - want).abs() < 1e-15);
    }
    set(&mut store, enc.conv.bias, 0.0);
    let bias: Vec<f64> = (0..16).map(|c| c as f64 * 0.1 - 0.8).collect();
    *store.value_mut(enc.conv.bias) = Tensor::new(&[16], bias.clone()).unwrap();
    let y = eval(|g| {
        let v = g.constant(Tensor::zeros(&[600]));
        enc.forward(g, &store, v, 3)
    });
    for c in 0..16 {
        for t in 0..3 {
            for k in 0..256 {
                let n = 256 * t + k;
                let want = if n < 600 { bias[c].max(0.0) } else { 0.0 };
                assert_eq!(y.at3(c, t, k), want);
            }
        }
    }
}

#[test]
fn fusion_selector_reproduces_ri_channels() {
    let cfg = ForkNetConfig::with_widths(8, 16, 8, 16);
    let (net, mut store) = build::<f64>(&cfg, 5).unwrap();
    let mut w = vec![0.0; 16 * 32];
    for o in 0..16 {
        w[o * 32 + 8 + o] = 1.0;
    }
    *store.value_mut(net.fuse.weight) = Tensor::new(&[16, 32], w).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(6);
    let h = Tensor::from_fn(&[32, 3, 4], |_| r.random_range(-1.0..1.0));
    let y = eval(|g| {
        let v = g.constant(h.clone());
        net.fuse.forward(g, &store, v, 0)
    });
    assert_eq!(y.shape(), [16, 3, 4]);
    assert_eq!(y.data(), &h.data()[8 * 12..24 * 12]);
}

#[test]
fn dpp_block_shape_and_causality() {
    let cfg = ForkNetConfig::gradcheck();
    let (net, mut store) = build::<f64>(&cfg, 9).unwrap();
    randomize(&mut store, 10, 0.2);
    let block = &net.blocks[0];
    let x = Tensor::new(&[5, 7, 8], noise(280, 11)).unwrap();
    let run = |x: &Tensor<f64>| {
        eval(|g| {
            let v = g.constant(x.clone());
            block.forward(g, &store, v)
        })
    };
    let y = run(&x);
    assert_eq!(y.shape(), [5, 7, 8]);
    let mut x2 = x.clone();
    for v in &mut x2.data_mut()[3 * 56..] {
        *v = -3.0 * *v;
    }
    let y2 = run(&x2);
    assert_eq!(&y.data()[..3 * 56], &y2.data()[..3 * 56]);
    assert_ne!(&y.data()[3 * 56..], &y2.data()[3 * 56..]);
}

#[test]
fn dpp_block_with_silent_sublayers_is_norm_cascade() {
    let (net, mut store) = build::<f64>(&ForkNetConfig::gradcheck(), 12).unwrap();
    randomize(&mut store, 13, 0.2);
    let block = net.blocks[1].clone();
    let tr = &block.spectral;
    for id in [
        block.proj.weight,
        block.proj.bias.unwrap(),
        tr.attention.output.weight,
        tr.attention.output.bias.unwrap(),
        tr.ffn_out.weight,
        tr.ffn_out.bias.unwrap(),
    ] {
        set(&mut store, id, 0.0);
    }
    let x = Tensor::new(&[3, 4, 8], noise(96, 14)).unwrap();
    let y = eval(|g| {
        let v = g.constant(x.clone());
        block.forward(g, &store, v)
    });
    let cascade = eval(|g| {
        let v = g.constant(x.clone());
        let a = block.norm.forward(g, &store, v, 2)?;
        let b = tr.norm1.forward(g, &store, a, 2)?;
        tr.norm2.forward(g, &store, b, 2)
    });
    for (a, b) in y.data().iter().zip(cascade.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn decoder_shape_and_zero_input() {
    let (net, mut store) = build::<f64>(&ForkNetConfig::gradcheck(), 15).unwrap();
    randomize(&mut store, 16, 0.3);
    let y = eval(|g| {
        let v = g.constant(Tensor::zeros(&[8, 6, 8]));
        net.decoder.forward(g, &store, v)
    });
    assert_eq!(y.shape(), [2, 6, 8]);
    assert!(y.is_finite() && y.max_abs() > 0.0);
    // far from the frequency edges and past the causal padding, only biases remain
    let field = net.decoder.dense.receptive_field() + 1;
    let y = eval(|g| {
        let v = g.constant(Tensor::zeros(&[8, field + 2, 40]));
        net.decoder.forward(g, &store, v)
    });
    for c in 0..2 {
        let v = y.at3(c, field, 20);
        assert!(v != 0.0);
        for t in field..field + 2 {
            for f in 12..28 {
                assert_eq!(y.at3(c, t, f), v);
            }
        }
    }
}

fn force_mask(net: &ForkNet<f64>, store: &mut ParamStore<f64>, re: f64, im: f64) {
    net.set_constant_mask(store, re, im);
}

#[test]
fn identity_and_zero_masks() {
    let (net, mut store) = build::<f64>(&ForkNetConfig::tiny(), 17).unwrap();
    let x = AudioBuffer::new(noise(4000, 18), 16_000).unwrap();
    force_mask(&net, &mut store, 1.0, 0.0);
    let y = net.enhance(&x, &store).unwrap();
    assert_eq!(y.len(), x.len());
    let cfg = &net.config.stft;
    let round_trip = crate::spectral::istft(&crate::spectral::stft(&x, cfg).unwrap(), 4000, 16_000).unwrap();
    for (a, b) in y.samples().iter().zip(round_trip.samples()) {
        assert!((a - b).abs() < 1e-12);
    }
    force_mask(&net, &mut store, 0.0, 0.0);
    let y = enhance(&x, &net, &store).unwrap();
    assert!(y.samples().iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn enhance_is_deterministic_and_finite() {
    let (net, mut store) = build::<f64>(&ForkNetConfig::tiny(), 19).unwrap();
    randomize(&mut store, 20, 0.05);
    let x = AudioBuffer::new(noise(3000, 21), 16_000).unwrap();
    let a = net.enhance(&x, &store).unwrap();
    let b = net.enhance(&x, &store).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 3000);
    assert!(a.samples().iter().all(|v| v.is_finite()));
}

#[test]
fn enhance_rejects_bad_inputs() {
    let (net, store) = build::<f64>(&ForkNetConfig::tiny(), 0).unwrap();
    let short = AudioBuffer::new(vec![0.1; 100], 16_000).unwrap();
    assert!(net.enhance(&short, &store).is_err());
    let wrong_rate = AudioBuffer::new(vec![0.1; 1000], 8_000).unwrap();
    assert!(net.enhance(&wrong_rate, &store).is_err());
}

/// Frames of the enhanced spectrum that may not react to samples at index >= m.
fn frozen_frames(m: usize, frames: usize, hop: usize, win: usize) -> usize {
    (0..frames).take_while(|t| t * hop + win <= m).count()
}

#[test]
fn end_to_end_frame_causality() {
    for (cfg, n, seed) in [
        (ForkNetConfig::gradcheck(), 56usize, 22u64),
        (ForkNetConfig::gradcheck(), 80, 23),
        (ForkNetConfig::tiny(), 2600, 24),
    ] {
        let rate = cfg.stft.sample_rate;
        let (net, mut store) = build::<f64>(&cfg, seed).unwrap();
        randomize(&mut store, seed + 100, 0.2);
        let x = noise(n, seed + 200);
        let (hop, win) = (net.framing().hop, net.framing().win);
        for m in [win, win + hop + 3, n - hop] {
            let mut cut = x.clone();
            cut[m..].fill(0.0);
            let a = net
                .enhance_spectrum(&AudioBuffer::new(x.clone(), rate).unwrap(), &store)
                .unwrap();
            let b = net
                .enhance_spectrum(&AudioBuffer::new(cut, rate).unwrap(), &store)
                .unwrap();
            let k = frozen_frames(m, a.frames(), hop, win);
            assert!(k > 0);
            let bins = a.bins();
            for i in 0..k * bins {
                assert!((a.real()[i] - b.real()[i]).abs() < 1e-9);
                assert!((a.imag()[i] - b.imag()[i]).abs() < 1e-9);
            }
            let moved = (k * bins..a.real().len()).any(|i| a.real()[i] != b.real()[i]);
            assert!(moved, "later frames should see the cut");
        }
    }
}

#[test]
fn single_precision_tracks_double() {
    let (net, mut store) = build::<f64>(&ForkNetConfig::gradcheck(), 25).unwrap();
    randomize(&mut store, 26, 0.1);
    let x = gradcheck_input(27);
    let y64 = net.enhance(&x, &store).unwrap();
    let (net32, _) = build::<f32>(&ForkNetConfig::gradcheck(), 25).unwrap();
    let x32 = AudioBuffer::new(x.samples().iter().map(|&v| v as f32).collect(), 1000).unwrap();
    let y32 = net32.enhance(&x32, &store.cast::<f32>()).unwrap();
    let scale = y64.samples().iter().fold(0.0f64, |a, v| a.max(v.abs()));
    for (a, b) in y64.samples().iter().zip(y32.samples()) {
        assert!((a - *b as f64).abs() <= 1e-4 * scale.max(1.0));
    }
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let cfg = ForkNetConfig::tiny();
    let (net, mut store) = build::<f64>(&cfg, 28).unwrap();
    randomize(&mut store, 29, 0.1);
    let mut ck = Checkpoint::new(cfg.clone(), store.clone());
    ck.meta.push(("epoch".into(), "3".into()));
    ck.extra.push(("adam.m.fuse.weight".into(), Tensor::full(&[2, 2], 0.5)));
    let bytes = ck.to_bytes();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.to_bytes(), bytes);
    assert_eq!(back.meta("epoch"), Some("3"));

    let dir = std::env::temp_dir().join(format!("forknet-ck-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("model.fknt");
    ck.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    std::fs::remove_dir_all(&dir).unwrap();
    let (net2, store2) = loaded.restore().unwrap();
    let x = AudioBuffer::new(noise(2000, 30), 16_000).unwrap();
    assert_eq!(net.enhance(&x, &store).unwrap(), net2.enhance(&x, &store2).unwrap());
}

#[test]
fn checkpoint_rejects_damage() {
    let cfg = ForkNetConfig::gradcheck();
    let (_, store) = build::<f64>(&cfg, 0).unwrap();
    let bytes = Checkpoint::new(cfg.clone(), store.clone()).to_bytes();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Checkpoint::from_bytes(&bad).is_err());
    let mut longer = bytes.clone();
    longer.push(0);
    assert!(Checkpoint::from_bytes(&longer).is_err());
    // parameters that do not fit the stored config
    let (_, other) = build::<f64>(&ForkNetConfig::tiny(), 0).unwrap();
    assert!(Checkpoint::new(cfg, other).restore().is_err());
}
