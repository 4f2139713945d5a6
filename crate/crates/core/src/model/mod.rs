//! ForkNet: Mag, RI and time-domain encoders, feature fusion, dual-path
//! blocks and a complex-ratio-mask decoder.

pub mod checkpoint;
mod config;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub(crate) use config::parse as parse_value;
pub use config::ForkNetConfig;

use crate::autograd::{Graph, ParamStore, Var};
use crate::error::{invalid, Result};
use crate::nn::{Conv2d, DilatedDenseBlock, GatedConv2d, Gru, ImprovedTransformer, LayerNorm, Linear};
use crate::scalar::Scalar;
use crate::spectral::{AudioBuffer, ComplexSpectrogram, Framing};
use crate::tensor::Tensor;

/// Pointwise projection followed by a dilated dense block.
#[derive(Clone, Debug)]
pub struct SpectralEncoder {
    pub input: Linear,
    pub dense: DilatedDenseBlock,
}

/// Causal 1-D convolution over samples, ReLU, then frame-aligned segmentation.
#[derive(Clone, Debug)]
pub struct TimeEncoder {
    pub conv: Conv2d,
    pub chunk: usize,
    pub hop: usize,
}

/// Sub-band GRU over time, then a per-frame transformer over frequency.
#[derive(Clone, Debug)]
pub struct DppBlock {
    pub gru: Gru,
    pub proj: Linear,
    pub norm: LayerNorm,
    pub spectral: ImprovedTransformer,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub fuse: Linear,
    pub gated: GatedConv2d,
    pub dense: DilatedDenseBlock,
    pub output: Linear,
}

/// Network layout; parameter values live in a separate [`ParamStore`].
#[derive(Clone, Debug)]
pub struct ForkNet<T: Scalar> {
    pub config: ForkNetConfig,
    pub mag_encoder: Option<SpectralEncoder>,
    pub ri_encoder: Option<SpectralEncoder>,
    pub time_encoder: Option<TimeEncoder>,
    pub fuse: Linear,
    pub blocks: Vec<DppBlock>,
    pub decoder: Decoder,
    framing: Arc<Framing<T>>,
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// Complex ratio mask `[2, T, F]`.
    pub mask: Var,
    /// Enhanced spectrum `M * X`, `[2, T, F]`.
    pub spectrum: Var,
    /// Enhanced waveform, same length as the input.
    pub waveform: Var,
}

/// Parameter-name prefixes of the top-level submodules.
pub const SUBMODULES: [&str; 6] = ["mag_enc", "ri_enc", "time_enc", "fuse", "dpp", "decoder"];

/// Creates the layout and its parameters from `seed`.
pub fn build<T: Scalar>(cfg: &ForkNetConfig, seed: u64) -> Result<(ForkNet<T>, ParamStore<T>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let s = &mut store;
    let r = &mut rng;
    let depth = cfg.dense_depth;
    let spectral_encoder = |s: &mut ParamStore<T>, r: &mut ChaCha8Rng, name: &str, cin, width| -> Result<_> {
        Ok(SpectralEncoder {
            input: Linear::new(s, &format!("{name}.input"), cin, width, r)?,
            dense: DilatedDenseBlock::new(s, &format!("{name}.dense"), width, depth, r)?,
        })
    };
    let mag_encoder = match cfg.d1 {
        0 => None,
        w => Some(spectral_encoder(s, r, "mag_enc", 1, w)?),
    };
    let ri_encoder = match cfg.d2 {
        0 => None,
        w => Some(spectral_encoder(s, r, "ri_enc", 2, w)?),
    };
    let time_encoder = match cfg.d3 {
        0 => None,
        w => Some(TimeEncoder {
            conv: Conv2d::new(s, "time_enc.conv", 1, w, (cfg.time_window, 1), 1, r)?,
            chunk: cfg.seg_chunk,
            hop: cfg.seg_hop,
        }),
    };
    let d = cfg.d;
    let fuse = Linear::new(s, "fuse", 2 * d, d, r)?;
    let blocks = (0..cfg.blocks)
        .map(|b| {
            let name = format!("dpp.{b}");
            Ok(DppBlock {
                gru: Gru::new(s, &format!("{name}.gru"), d, d, r)?,
                proj: Linear::new(s, &format!("{name}.proj"), d, d, r)?,
                norm: LayerNorm::new(s, &format!("{name}.norm"), d)?,
                spectral: ImprovedTransformer::new(s, &format!("{name}.spectral"), d, cfg.heads, cfg.ffn_hidden, r)?,
            })
        })
        .collect::<Result<_>>()?;
    let decoder = Decoder {
        fuse: Linear::new(s, "decoder.fuse", d, 2 * d, r)?,
        gated: GatedConv2d::new(s, "decoder.gated", 2 * d, 2 * d, crate::nn::DENSE_KERNEL, r)?,
        dense: DilatedDenseBlock::new(s, "decoder.dense", 2 * d, depth, r)?,
        output: Linear::new(s, "decoder.output", 2 * d, 2, r)?,
    };
    let net = ForkNet {
        config: cfg.clone(),
        mag_encoder,
        ri_encoder,
        time_encoder,
        fuse,
        blocks,
        decoder,
        framing: Arc::new(Framing::new(&cfg.stft)?),
    };
    Ok((net, store))
}

/// Total number of trainable scalars.
pub fn param_count<T: Scalar>(store: &ParamStore<T>) -> usize {
    store.num_scalars()
}

/// Scalar counts per top-level submodule, in [`SUBMODULES`] order.
pub fn param_breakdown<T: Scalar>(store: &ParamStore<T>) -> Vec<(&'static str, usize)> {
    SUBMODULES
        .iter()
        .map(|&p| (p, store.count_prefix(&format!("{p}."))))
        .collect()
}

impl SpectralEncoder {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.input.forward(g, store, x, 0)?;
        self.dense.forward(g, store, h)
    }
}

impl TimeEncoder {
    /// `x: [N]` to `[D3, frames, chunk]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, frames: usize) -> Result<Var> {
        let n = g.shape(x)[0];
        let cols = g.reshape(x, &[1, n, 1])?;
        let h = self.conv.forward(g, store, cols)?;
        let h = g.relu(h);
        let width = g.shape(h)[0];
        let w = g.reshape(h, &[width, n])?;
        g.segment(w, self.chunk, self.hop, frames)
    }
}

impl DppBlock {
    /// `r: [T, F, D]` to the same shape.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, r: Var) -> Result<Var> {
        let bands = g.permute3(r, [1, 0, 2])?;
        let h = self.gru.forward(g, store, bands, false)?;
        let h = self.proj.forward(g, store, h, 2)?;
        let h = g.add(bands, h)?;
        let u = self.norm.forward(g, store, h, 2)?;
        let frames = g.permute3(u, [1, 0, 2])?;
        self.spectral.forward(g, store, frames)
    }
}

impl Decoder {
    /// `r: [D, T, F]` to the mask `[2, T, F]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, r: Var) -> Result<Var> {
        let h = self.fuse.forward(g, store, r, 0)?;
        let h = self.gated.forward(g, store, h)?;
        let h = self.dense.forward(g, store, h)?;
        self.output.forward(g, store, h, 0)
    }
}

impl<T: Scalar> ForkNet<T> {
    pub fn framing(&self) -> &Arc<Framing<T>> {
        &self.framing
    }

    /// Noisy spectrum `[2, T, F]` of a waveform under the model's framing.
    pub fn analyze(&self, samples: &[T]) -> Result<Tensor<T>> {
        self.check_len(samples.len())?;
        let (mut re, im) = self.framing.analyze(samples);
        let frames = self.framing.frames(samples.len());
        re.extend(im);
        Tensor::new(&[2, frames, self.framing.bins()], re)
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if n < self.framing.win {
            return invalid(format!(
                "input of {n} samples is shorter than one {}-sample frame",
                self.framing.win
            ));
        }
        Ok(())
    }

    /// Mask estimate from the noisy waveform and its spectrum `[2, T, F]`.
    pub fn mask(&self, g: &mut Graph<T>, store: &ParamStore<T>, samples: &[T], spec: &Tensor<T>) -> Result<Var> {
        self.check_len(samples.len())?;
        let (_, frames, bins) = spec.dims3();
        if spec.shape() != [2, self.framing.frames(samples.len()), self.framing.bins()] {
            return invalid(format!("spectrum shape {:?} does not match the waveform", spec.shape()));
        }
        let mut features = Vec::with_capacity(3);
        if let Some(enc) = &self.mag_encoder {
            let (re, im) = spec.data().split_at(frames * bins);
            let mag: Vec<T> = re.iter().zip(im).map(|(&a, &b)| a.hypot(b)).collect();
            let x = g.constant(Tensor::new(&[1, frames, bins], mag)?);
            features.push(enc.forward(g, store, x)?);
        }
        if let Some(enc) = &self.ri_encoder {
            let x = g.constant(spec.clone());
            features.push(enc.forward(g, store, x)?);
        }
        if let Some(enc) = &self.time_encoder {
            let x = g.constant(Tensor::new(&[samples.len()], samples.to_vec())?);
            features.push(enc.forward(g, store, x, frames)?);
        }
        let h = g.concat0(&features)?;
        let r = self.fuse.forward(g, store, h, 0)?;
        let mut r = g.permute3(r, [1, 2, 0])?;
        for block in &self.blocks {
            r = block.forward(g, store, r)?;
        }
        let r = g.permute3(r, [2, 0, 1])?;
        self.decoder.forward(g, store, r)
    }

    /// Full pipeline: mask, masked spectrum and resynthesized waveform.
    pub fn forward(&self, g: &mut Graph<T>, store: &ParamStore<T>, samples: &[T]) -> Result<(ForwardVars, Tensor<T>)> {
        let spec = self.analyze(samples)?;
        let mask = self.mask(g, store, samples, &spec)?;
        let spectrum = g.complex_mul_const(mask, &spec)?;
        let waveform = g.istft(spectrum, Arc::clone(&self.framing), samples.len())?;
        Ok((
            ForwardVars {
                mask,
                spectrum,
                waveform,
            },
            spec,
        ))
    }

    fn check_rate(&self, x: &AudioBuffer<T>) -> Result<()> {
        if x.sample_rate() != self.config.stft.sample_rate {
            return invalid(format!(
                "sample rate {} Hz does not match the model's {} Hz",
                x.sample_rate(),
                self.config.stft.sample_rate
            ));
        }
        Ok(())
    }

    /// Enhanced spectrum `Y = M * X`.
    pub fn enhance_spectrum(&self, x: &AudioBuffer<T>, store: &ParamStore<T>) -> Result<ComplexSpectrogram<T>> {
        self.check_rate(x)?;
        let mut g = Graph::inference();
        let (vars, _) = self.forward(&mut g, store, x.samples())?;
        let y = g.value(vars.spectrum);
        let (_, frames, bins) = y.dims3();
        let (re, im) = y.data().split_at(frames * bins);
        ComplexSpectrogram::new(
            re.to_vec(),
            im.to_vec(),
            frames,
            self.framing.fft,
            self.framing.win,
            self.framing.hop,
            self.framing.remove_dc,
        )
    }

    /// Makes the decoder emit the constant mask `re + j im` everywhere
    /// (a debugging aid: `1 + 0j` passes the input through the framing).
    pub fn set_constant_mask(&self, store: &mut ParamStore<T>, re: f64, im: f64) {
        store.value_mut(self.decoder.output.weight).data_mut().fill(T::zero());
        if let Some(b) = self.decoder.output.bias {
            store.value_mut(b).data_mut().copy_from_slice(&[T::lit(re), T::lit(im)]);
        }
    }

    /// Enhanced waveform of the same length and rate as `x`.
    pub fn enhance(&self, x: &AudioBuffer<T>, store: &ParamStore<T>) -> Result<AudioBuffer<T>> {
        self.check_rate(x)?;
        let mut g = Graph::inference();
        let (vars, _) = self.forward(&mut g, store, x.samples())?;
        AudioBuffer::new(g.value(vars.waveform).data().to_vec(), x.sample_rate())
    }
}

/// Enhances `x`; see [`ForkNet::enhance`].
pub fn enhance<T: Scalar>(x: &AudioBuffer<T>, model: &ForkNet<T>, store: &ParamStore<T>) -> Result<AudioBuffer<T>> {
    model.enhance(x, store)
}

#[cfg(test)]
mod tests;
