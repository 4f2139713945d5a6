//! Run configuration: one `key = value` per line, `#` starts a comment.
//!
//! Keys are those of the model, training and loss configurations plus
//! `preset`, `out_dir` and `resume`. A `preset` line is applied before every
//! other key wherever it appears; later lines override earlier ones and
//! command-line overrides come last.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use forknet::loss::LossConfig;
use forknet::model::ForkNetConfig;
use forknet::training::TrainConfig;

use crate::{CliError, Result};

/// Named model configurations.
pub const PRESETS: [&str; 5] = ["paper", "ref1", "ref2", "tiny", "gradcheck"];

pub fn preset(name: &str) -> Result<ForkNetConfig> {
    Ok(match name {
        "paper" => ForkNetConfig::paper(),
        "ref1" => ForkNetConfig::ref1(),
        "ref2" => ForkNetConfig::ref2(),
        "tiny" => ForkNetConfig::tiny(),
        "gradcheck" => ForkNetConfig::gradcheck(),
        other => {
            return Err(CliError::Config(format!(
                "preset: unknown {other:?}, expected one of {}",
                PRESETS.join(", ")
            )))
        }
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: String,
    pub model: ForkNetConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    /// Where `train` writes checkpoints and the echoed config.
    pub out_dir: PathBuf,
    /// Checkpoint to continue training from.
    pub resume: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: "paper".into(),
            model: ForkNetConfig::paper(),
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            out_dir: PathBuf::from("runs"),
            resume: None,
        }
    }
}

/// `(line number, key, value)` of every non-blank line.
fn parse_lines(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("line {}: expected key = value, got {line:?}", i + 1)))?;
        out.push((i + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Splits `key=value` command-line overrides.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| CliError::Config(format!("override {s:?}: expected key=value")))
}

impl RunConfig {
    /// Applies one key. Unknown keys are an error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "preset" => {
                self.model = preset(value)?;
                self.preset = value.to_string();
            }
            "out_dir" => self.out_dir = PathBuf::from(value),
            "resume" => self.resume = (!value.is_empty()).then(|| PathBuf::from(value)),
            _ => {
                let owned = self.model.set(key, value)? || self.train.set(key, value)? || self.loss.set(key, value)?;
                if !owned {
                    return Err(CliError::Config(format!("unknown key {key:?}")));
                }
            }
        }
        Ok(())
    }

    /// Defaults, then the file text, then `overrides`.
    pub fn from_sources(text: Option<&str>, overrides: &[(String, String)]) -> Result<Self> {
        let mut pairs: Vec<(String, String, String)> = match text {
            Some(t) => parse_lines(t)?
                .into_iter()
                .map(|(n, k, v)| (format!("line {n}"), k, v))
                .collect(),
            None => Vec::new(),
        };
        pairs.extend(
            overrides
                .iter()
                .map(|(k, v)| (format!("override {k}"), k.clone(), v.clone())),
        );
        let mut cfg = Self::default();
        // the last preset wins and is applied first
        if let Some((_, _, v)) = pairs.iter().rev().find(|(_, k, _)| k == "preset") {
            cfg.set("preset", v)?;
        }
        for (origin, k, v) in pairs.iter().filter(|(_, k, _)| k != "preset") {
            cfg.set(k, v)
                .map_err(|e| CliError::Config(format!("{origin}: {}", strip(e))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_sources(Some(&text), overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let mut pairs = vec![("preset", self.preset.clone())];
        pairs.extend(self.model.to_pairs());
        pairs.extend(self.train.to_pairs());
        pairs.extend(self.loss.to_pairs());
        pairs.push(("out_dir", self.out_dir.display().to_string()));
        pairs.push((
            "resume",
            self.resume
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
        ));
        pairs
    }

    /// Every effective key, in a form [`RunConfig::from_sources`] reads back.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_pairs() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

fn strip(e: CliError) -> String {
    match e {
        CliError::Config(m) => m,
        other => other.to_string(),
    }
}
