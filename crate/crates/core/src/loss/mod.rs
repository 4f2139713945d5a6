//! Compressed spectral loss, multi-resolution spectrogram loss and their
//! weighted sum. All terms are sums over bins (and resolutions), not means.

use std::sync::Arc;

use crate::autograd::{Graph, Var};
use crate::error::{invalid, Result};
use crate::scalar::Scalar;
use crate::spectral::{AudioBuffer, ComplexSpectrogram, Framing, StftConfig};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    /// Compression exponent of the spectral term.
    pub c1: f64,
    /// Compression exponent of the multi-resolution term.
    pub c2: f64,
    pub lambda: f64,
    pub mr_windows_ms: Vec<f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            c1: 0.6,
            c2: 0.3,
            lambda: 1.0,
            mr_windows_ms: vec![5.0, 10.0, 20.0, 40.0],
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, c) in [("c1", self.c1), ("c2", self.c2)] {
            if !(c > 0.0 && c <= 1.0) {
                return invalid(format!("{name} must lie in (0, 1], got {c}"));
            }
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return invalid(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if self.mr_windows_ms.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return invalid(format!("mr_windows_ms must be positive, got {:?}", self.mr_windows_ms));
        }
        Ok(())
    }

    /// `mr_windows_ms` is written comma-separated.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let windows: Vec<String> = self.mr_windows_ms.iter().map(f64::to_string).collect();
        vec![
            ("c1", self.c1.to_string()),
            ("c2", self.c2.to_string()),
            ("lambda", self.lambda.to_string()),
            ("mr_windows_ms", windows.join(",")),
        ]
    }

    /// Sets one field from text; `Ok(false)` for keys this config does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        use crate::model::parse_value as p;
        match key {
            "c1" => self.c1 = p(key, value)?,
            "c2" => self.c2 = p(key, value)?,
            "lambda" => self.lambda = p(key, value)?,
            "mr_windows_ms" => {
                self.mr_windows_ms = value.split(',').map(|w| p(key, w.trim())).collect::<Result<_>>()?
            }
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// One framing per resolution: Hann window of `ms` milliseconds, 50% hop,
/// next power-of-two FFT, DC dropped.
#[derive(Clone, Debug)]
pub struct MultiResolution<T: Scalar> {
    framings: Vec<Arc<Framing<T>>>,
}

impl<T: Scalar> MultiResolution<T> {
    pub fn new(windows_ms: &[f64], sample_rate: u32) -> Result<Self> {
        let framings = windows_ms
            .iter()
            .map(|&ms| Ok(Arc::new(Framing::new(&StftConfig::with_window_ms(ms, sample_rate)?)?)))
            .collect::<Result<_>>()?;
        Ok(Self { framings })
    }

    pub fn framings(&self) -> &[Arc<Framing<T>>] {
        &self.framings
    }

    /// `sum_i D_c(STFT_i(y), STFT_i(s))` on the graph; `s` is constant.
    pub fn loss(&self, g: &mut Graph<T>, y: Var, s: &[T], c: f64) -> Result<Var> {
        if g.shape(y) != [s.len()] {
            return invalid(format!(
                "multi-resolution loss: estimate {:?} and reference [{}] differ in length",
                g.shape(y),
                s.len()
            ));
        }
        let mut total: Option<Var> = None;
        for framing in &self.framings {
            let est = g.stft(y, Arc::clone(framing))?;
            let (mut re, im) = framing.analyze(s);
            re.extend(im);
            let target = Tensor::new(g.shape(est), re)?;
            let term = g.compressed_spectral_distance(est, &target, c)?;
            total = Some(match total {
                None => term,
                Some(t) => g.add(t, term)?,
            });
        }
        Ok(match total {
            Some(t) => t,
            None => g.constant(Tensor::scalar(T::zero())),
        })
    }
}

/// Loss terms recorded on a graph.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub spec: Var,
    pub multires: Var,
    pub total: Var,
}

/// `spec_loss(Y, S) + lambda * multires_loss(y, s)` on the graph, with `Y` a
/// `[2, T, F]` spectrum variable, `y` its waveform and `S`, `s` constants.
pub fn total_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    spectrum: Var,
    clean_spectrum: &Tensor<T>,
    waveform: Var,
    clean: &[T],
    cfg: &LossConfig,
    mr: &MultiResolution<T>,
) -> Result<LossVars> {
    cfg.validate()?;
    let spec = g.compressed_spectral_distance(spectrum, clean_spectrum, cfg.c1)?;
    let multires = mr.loss(g, waveform, clean, cfg.c2)?;
    let weighted = g.scale(multires, T::lit(cfg.lambda));
    let total = g.add(spec, weighted)?;
    Ok(LossVars { spec, multires, total })
}

fn check_same(y: &ComplexSpectrogram<impl Scalar>, s: &ComplexSpectrogram<impl Scalar>) -> Result<()> {
    if y.frames() != s.frames() || y.bins() != s.bins() {
        return invalid(format!(
            "spectral loss shape mismatch: {}x{} vs {}x{}",
            y.frames(),
            y.bins(),
            s.frames(),
            s.bins()
        ));
    }
    Ok(())
}

/// `|| |Y|^c - |S|^c ||_F^2 + || |Y|^c e^{j phi_Y} - |S|^c e^{j phi_S} ||_F^2`.
pub fn spec_loss<T: Scalar>(y: &ComplexSpectrogram<T>, s: &ComplexSpectrogram<T>, c1: f64) -> Result<T> {
    check_same(y, s)?;
    let mut g = Graph::inference();
    let yv = g.constant(y.to_tensor());
    let l = g.compressed_spectral_distance(yv, &s.to_tensor(), c1)?;
    Ok(g.value(l).data()[0])
}

/// Spectral distance with exponent `c2` summed over the resolutions in `windows_ms`.
pub fn multires_loss<T: Scalar>(y: &AudioBuffer<T>, s: &AudioBuffer<T>, c2: f64, windows_ms: &[f64]) -> Result<T> {
    if y.len() != s.len() || y.sample_rate() != s.sample_rate() {
        return invalid(format!(
            "multi-resolution loss: {} samples @ {} Hz vs {} samples @ {} Hz",
            y.len(),
            y.sample_rate(),
            s.len(),
            s.sample_rate()
        ));
    }
    let mr = MultiResolution::new(windows_ms, s.sample_rate())?;
    let mut g = Graph::inference();
    let yv = g.constant(Tensor::new(&[y.len()], y.samples().to_vec())?);
    let l = mr.loss(&mut g, yv, s.samples(), c2)?;
    Ok(g.value(l).data()[0])
}

/// `spec_loss + lambda * multires_loss`.
pub fn total_loss<T: Scalar>(
    y_spec: &ComplexSpectrogram<T>,
    s_spec: &ComplexSpectrogram<T>,
    y: &AudioBuffer<T>,
    s: &AudioBuffer<T>,
    cfg: &LossConfig,
) -> Result<T> {
    cfg.validate()?;
    let spec = spec_loss(y_spec, s_spec, cfg.c1)?;
    let mr = multires_loss(y, s, cfg.c2, &cfg.mr_windows_ms)?;
    Ok(spec + T::lit(cfg.lambda) * mr)
}
