//! Scale-invariant signal-to-distortion ratio.

use crate::error::{invalid, Result};
use crate::scalar::Scalar;
use crate::spectral::AudioBuffer;

/// Upper (and, for estimates with no reference component, lower) bound in dB.
pub const SI_SDR_CAP_DB: f64 = 100.0;

/// SI-SDR in dB of `est` against `reference` after removing both means.
pub fn si_sdr<T: Scalar>(est: &AudioBuffer<T>, reference: &AudioBuffer<T>) -> Result<f64> {
    si_sdr_slices(est.samples(), reference.samples())
}

/// [`si_sdr`] on raw sample slices.
pub fn si_sdr_slices<T: Scalar>(est: &[T], reference: &[T]) -> Result<f64> {
    if est.len() != reference.len() {
        return invalid(format!(
            "si_sdr: estimate has {} samples, reference {}",
            est.len(),
            reference.len()
        ));
    }
    if est.is_empty() {
        return invalid("si_sdr: empty signals");
    }
    let centered = |x: &[T]| {
        let mean = x.iter().map(|v| v.as_f64()).sum::<f64>() / x.len() as f64;
        x.iter().map(|v| v.as_f64() - mean).collect::<Vec<f64>>()
    };
    let (e, r) = (centered(est), centered(reference));
    let rr: f64 = r.iter().map(|v| v * v).sum();
    let raw: f64 = reference.iter().map(|v| v.as_f64() * v.as_f64()).sum();
    // a constant reference leaves only rounding residue after centering
    if rr <= f64::MIN_POSITIVE || rr <= 1e-20 * raw {
        return invalid("si_sdr: reference is silent");
    }
    let alpha = e.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>() / rr;
    let (mut target, mut noise) = (0.0, 0.0);
    for (a, b) in e.iter().zip(&r) {
        let t = alpha * b;
        target += t * t;
        noise += (a - t) * (a - t);
    }
    if noise < 1e-20 * target {
        return Ok(SI_SDR_CAP_DB);
    }
    if target == 0.0 {
        return Ok(-SI_SDR_CAP_DB);
    }
    Ok((10.0 * (target / noise).log10()).clamp(-SI_SDR_CAP_DB, SI_SDR_CAP_DB))
}
