//! Deterministic synthetic stand-ins for speech and noise.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{invalid, Result};
use crate::spectral::AudioBuffer;

/// Peak amplitude of synthetic clean signals.
pub const CLEAN_PEAK: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseKind {
    White,
    Pink,
}

/// Clean signal, the scaled noise that was added to it, and their sum.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureSample {
    pub clean: AudioBuffer<f64>,
    pub noise: AudioBuffer<f64>,
    pub mixture: AudioBuffer<f64>,
    pub snr_db: f64,
}

/// SplitMix64 finalizer; spreads structured seeds over the whole range.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b
        .wrapping_add(0x9e37_79b9_7f4a_7c15)
        .wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn num_samples(dur_s: f64, sample_rate: u32) -> Result<usize> {
    let n = (dur_s * sample_rate as f64).round();
    if !(dur_s > 0.0 && n >= 1.0 && n.is_finite()) {
        return invalid(format!("duration must be positive, got {dur_s} s"));
    }
    Ok(n as usize)
}

/// 3 to 6 harmonics of a 100-300 Hz fundamental, amplitude-modulated at
/// 2-8 Hz and peak-normalized to [`CLEAN_PEAK`].
pub fn synth_clean(seed: u64, dur_s: f64, sample_rate: u32) -> Result<AudioBuffer<f64>> {
    let n = num_samples(dur_s, sample_rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f0: f64 = rng.random_range(100.0..300.0);
    let harmonics = rng.random_range(3..=6usize);
    let nyquist = sample_rate as f64 / 2.0;
    let partials: Vec<(f64, f64, f64)> = (1..=harmonics)
        .map(|k| {
            (
                k as f64 * f0,
                rng.random_range(0.2..1.0),
                rng.random_range(0.0..2.0 * PI),
            )
        })
        .filter(|&(f, _, _)| f < nyquist)
        .collect();
    let fm: f64 = rng.random_range(2.0..8.0);
    let phm: f64 = rng.random_range(0.0..2.0 * PI);
    let sr = sample_rate as f64;
    let mut x: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let env = 0.5 * (1.0 + (2.0 * PI * fm * t + phm).sin());
            env * partials
                .iter()
                .map(|&(f, a, p)| a * (2.0 * PI * f * t + p).sin())
                .sum::<f64>()
        })
        .collect();
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        x.iter_mut().for_each(|v| *v *= CLEAN_PEAK / peak);
    }
    AudioBuffer::new(x, sample_rate)
}

/// Unit-RMS white Gaussian or 1/f noise.
pub fn synth_noise(seed: u64, dur_s: f64, kind: NoiseKind, sample_rate: u32) -> Result<AudioBuffer<f64>> {
    let n = num_samples(dur_s, sample_rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    if kind == NoiseKind::Pink && n > 1 {
        // power ~ 1/f: scale bin k (and its mirror) by 1/sqrt(k), drop DC
        let mut planner = FftPlanner::<f64>::new();
        let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
        planner.plan_fft_forward(n).process(&mut buf);
        buf[0] = Complex::new(0.0, 0.0);
        for (k, b) in buf.iter_mut().enumerate().skip(1) {
            *b /= (k.min(n - k) as f64).sqrt();
        }
        planner.plan_fft_inverse(n).process(&mut buf);
        x = buf.iter().map(|c| c.re).collect();
    }
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    if rms > 0.0 {
        x.iter_mut().for_each(|v| *v /= rms);
    }
    AudioBuffer::new(x, sample_rate)
}

fn power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64
}

/// Scales `noise` so that `10 log10(P_clean / P_noise) = snr_db` and adds it to `clean`.
pub fn mix_at_snr(clean: &AudioBuffer<f64>, noise: &AudioBuffer<f64>, snr_db: f64) -> Result<MixtureSample> {
    if clean.len() != noise.len() || clean.sample_rate() != noise.sample_rate() {
        return invalid(format!(
            "mix_at_snr: clean has {} samples @ {} Hz, noise {} @ {} Hz",
            clean.len(),
            clean.sample_rate(),
            noise.len(),
            noise.sample_rate()
        ));
    }
    if !snr_db.is_finite() {
        return invalid(format!("mix_at_snr: SNR must be finite, got {snr_db}"));
    }
    let (pc, pn) = (power(clean.samples()), power(noise.samples()));
    if pc == 0.0 {
        return invalid("mix_at_snr: clean signal is silent");
    }
    if pn == 0.0 {
        return invalid("mix_at_snr: noise is silent");
    }
    let gain = (pc / pn / 10f64.powf(snr_db / 10.0)).sqrt();
    let scaled: Vec<f64> = noise.samples().iter().map(|v| v * gain).collect();
    let mixture = clean.samples().iter().zip(&scaled).map(|(a, b)| a + b).collect();
    Ok(MixtureSample {
        clean: clean.clone(),
        noise: AudioBuffer::new(scaled, noise.sample_rate())?,
        mixture: AudioBuffer::new(mixture, clean.sample_rate())?,
        snr_db,
    })
}

/// Mixture drawn from one seed: clean signal, noise type, noise, and an SNR
/// uniform in `snr_range_db`.
pub fn synth_mixture(seed: u64, dur_s: f64, snr_range_db: (f64, f64), sample_rate: u32) -> Result<MixtureSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = snr_range_db;
    if !(lo <= hi) {
        return invalid(format!("SNR range [{lo}, {hi}] is empty"));
    }
    let snr = if lo == hi { lo } else { rng.random_range(lo..hi) };
    let kind = if rng.random::<bool>() {
        NoiseKind::Pink
    } else {
        NoiseKind::White
    };
    let clean = synth_clean(rng.random(), dur_s, sample_rate)?;
    let noise = synth_noise(rng.random(), dur_s, kind, sample_rate)?;
    mix_at_snr(&clean, &noise, snr)
}
