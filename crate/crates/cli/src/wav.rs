//! Mono WAV files: 16-bit PCM or 32-bit float in, 16-bit PCM out.

use std::path::Path;

use forknet::AudioBuffer;
use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::{CliError, Result};

/// Scale between 16-bit integers and `[-1, 1)`.
pub const PCM16_SCALE: f64 = 32768.0;

fn wav_err(path: &Path, msg: impl Into<String>) -> CliError {
    CliError::Wav {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

/// Reads a mono file at `sample_rate`. 16-bit samples are divided by 32768.
pub fn wav_read(path: impl AsRef<Path>, sample_rate: u32) -> Result<AudioBuffer<f64>> {
    let path = path.as_ref();
    let reader = WavReader::open(path).map_err(|e| wav_err(path, e.to_string()))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(wav_err(path, format!("channels: expected 1, got {}", spec.channels)));
    }
    if spec.sample_rate != sample_rate {
        return Err(wav_err(
            path,
            format!("sample_rate: expected {sample_rate}, got {}", spec.sample_rate),
        ));
    }
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / PCM16_SCALE))
            .collect::<Result<_, _>>(),
        (SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<Result<_, _>>(),
        (format, bits) => {
            return Err(wav_err(
                path,
                format!("codec: expected 16-bit PCM or 32-bit float, got {bits}-bit {format:?}"),
            ))
        }
    }
    .map_err(|e| wav_err(path, e.to_string()))?;
    if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
        return Err(wav_err(path, format!("sample {i} is not finite")));
    }
    Ok(AudioBuffer::new(samples, sample_rate)?)
}

/// `round(x * 32768)` saturated to the 16-bit range.
pub fn to_pcm16(x: f64) -> i16 {
    (x * PCM16_SCALE).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16
}

/// Writes 16-bit mono PCM with saturation; non-finite samples are rejected.
pub fn wav_write(path: impl AsRef<Path>, audio: &AudioBuffer<f64>) -> Result<()> {
    let path = path.as_ref();
    if let Some(i) = audio.samples().iter().position(|v| !v.is_finite()) {
        return Err(wav_err(path, format!("sample {i} is not finite")));
    }
    let spec = WavSpec {
        channels: 1,
        sample_rate: audio.sample_rate(),
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let err = |e: hound::Error| wav_err(path, e.to_string());
    let mut w = WavWriter::create(path, spec).map_err(err)?;
    for &v in audio.samples() {
        w.write_sample(to_pcm16(v)).map_err(err)?;
    }
    w.finalize().map_err(err)
}
