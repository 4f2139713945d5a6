use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::spectral::StftConfig;

/// Architecture hyperparameters.
///
/// `d1`, `d2`, `d3` are the Mag, RI and time encoder widths and `d` the
/// width inside the dual-path blocks; they must satisfy `d1 + d2 + d3 = 2d`.
/// A zero encoder width removes that encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct ForkNetConfig {
    pub d1: usize,
    pub d2: usize,
    pub d3: usize,
    pub d: usize,
    pub blocks: usize,
    pub heads: usize,
    pub dense_depth: usize,
    /// Hidden size per direction of the recurrent feed-forward in each transformer.
    pub ffn_hidden: usize,
    pub stft: StftConfig,
    pub time_window: usize,
    pub time_stride: usize,
    pub seg_chunk: usize,
    pub seg_hop: usize,
}

impl Default for ForkNetConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl ForkNetConfig {
    /// `D1 = D2 = 24`, `D3 = 16`, `D = 32`, four blocks, 16 kHz framing.
    pub fn paper() -> Self {
        Self::with_widths(24, 24, 16, 32)
    }

    /// Single RI encoder of width `2D`.
    pub fn ref1() -> Self {
        Self::with_widths(0, 64, 0, 32)
    }

    /// Mag and RI encoders of width `D` each, no time encoder.
    pub fn ref2() -> Self {
        Self::with_widths(32, 32, 0, 32)
    }

    /// Paper framing and depth with custom widths; `ffn_hidden = 2d`.
    pub fn with_widths(d1: usize, d2: usize, d3: usize, d: usize) -> Self {
        Self {
            d1,
            d2,
            d3,
            d,
            blocks: 4,
            heads: 4,
            dense_depth: 4,
            ffn_hidden: 2 * d,
            stft: StftConfig::paper(),
            time_window: 2,
            time_stride: 1,
            seg_chunk: 256,
            seg_hop: 256,
        }
    }

    /// Small 16 kHz model for desk-scale training runs.
    pub fn tiny() -> Self {
        Self {
            d1: 3,
            d2: 3,
            d3: 2,
            d: 4,
            blocks: 1,
            heads: 1,
            dense_depth: 2,
            ffn_hidden: 4,
            ..Self::paper()
        }
    }

    /// `D = 8`, two blocks, 16-sample window at 1 kHz (8 bins per frame);
    /// 56 samples give 6 frames. Small enough for finite differences.
    pub fn gradcheck() -> Self {
        Self {
            d1: 6,
            d2: 6,
            d3: 4,
            d: 8,
            blocks: 2,
            heads: 2,
            dense_depth: 4,
            ffn_hidden: 4,
            stft: StftConfig {
                win_ms: 16.0,
                overlap: 0.5,
                fft_size: 16,
                remove_dc: true,
                sample_rate: 1000,
            },
            time_window: 2,
            time_stride: 1,
            seg_chunk: 8,
            seg_hop: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        self.stft.validate()?;
        if self.d1 + self.d2 + self.d3 != 2 * self.d {
            return bad(format!(
                "d1 + d2 + d3 = 2d violated: {} + {} + {} != 2 * {}",
                self.d1, self.d2, self.d3, self.d
            ));
        }
        if self.d == 0 {
            return bad("d must be positive".into());
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return bad(format!("d = {} not divisible by heads = {}", self.d, self.heads));
        }
        if self.dense_depth == 0 || self.ffn_hidden == 0 {
            return bad("dense_depth and ffn_hidden must be positive".into());
        }
        if self.time_window == 0 || self.time_stride != 1 {
            return bad(format!(
                "time encoder needs window >= 1 and stride 1, got {} / {}",
                self.time_window, self.time_stride
            ));
        }
        let hop = self.stft.hop_len()?;
        let bins = self.stft.num_bins();
        if self.d3 > 0 && (self.seg_chunk != bins || self.seg_hop != hop) {
            return bad(format!(
                "segmentation chunk/hop must equal bins/hop ({bins}/{hop}), got {}/{}",
                self.seg_chunk, self.seg_hop
            ));
        }
        Ok(())
    }

    /// Fields as `(key, value)` pairs in a fixed order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("d1", self.d1.to_string()),
            ("d2", self.d2.to_string()),
            ("d3", self.d3.to_string()),
            ("d", self.d.to_string()),
            ("blocks", self.blocks.to_string()),
            ("heads", self.heads.to_string()),
            ("dense_depth", self.dense_depth.to_string()),
            ("ffn_hidden", self.ffn_hidden.to_string()),
            ("win_ms", self.stft.win_ms.to_string()),
            ("overlap", self.stft.overlap.to_string()),
            ("fft_size", self.stft.fft_size.to_string()),
            ("remove_dc", self.stft.remove_dc.to_string()),
            ("sample_rate", self.stft.sample_rate.to_string()),
            ("time_window", self.time_window.to_string()),
            ("time_stride", self.time_stride.to_string()),
            ("seg_chunk", self.seg_chunk.to_string()),
            ("seg_hop", self.seg_hop.to_string()),
        ]
    }

    /// Sets one field from text. Returns `Ok(false)` for keys this config does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "d1" => self.d1 = parse(key, value)?,
            "d2" => self.d2 = parse(key, value)?,
            "d3" => self.d3 = parse(key, value)?,
            "d" => self.d = parse(key, value)?,
            "blocks" => self.blocks = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "dense_depth" => self.dense_depth = parse(key, value)?,
            "ffn_hidden" => self.ffn_hidden = parse(key, value)?,
            "win_ms" => self.stft.win_ms = parse(key, value)?,
            "overlap" => self.stft.overlap = parse(key, value)?,
            "fft_size" => self.stft.fft_size = parse(key, value)?,
            "remove_dc" => self.stft.remove_dc = parse(key, value)?,
            "sample_rate" => self.stft.sample_rate = parse(key, value)?,
            "time_window" => self.time_window = parse(key, value)?,
            "time_stride" => self.time_stride = parse(key, value)?,
            "seg_chunk" => self.seg_chunk = parse(key, value)?,
            "seg_hop" => self.seg_hop = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// `key = value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_pairs() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Parses `key = value` lines over the `paper` preset; every key must be known.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::paper();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("expected key = value, got {line:?}")))?;
            if !cfg.set(k.trim(), v.trim())? {
                return Err(Error::Format(format!("unknown model key {:?}", k.trim())));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub(crate) fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("{key}: cannot parse {value:?}")))
}
