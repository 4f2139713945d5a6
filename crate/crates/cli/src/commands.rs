//! Command bodies. Each writes single-line `key=value` summaries to `out`.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;

use forknet::metrics::si_sdr;
use forknet::model::checkpoint::Checkpoint;
use forknet::model::{build, param_breakdown, param_count, ForkNetConfig};
use forknet::nn::suite;
use forknet::training::{mix_seed, synth_mixture, train, trainer_for, Dataset, Trainer};

use crate::config::RunConfig;
use crate::wav::{wav_read, wav_write};
use crate::{CliError, Result};

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).map_err(|e| CliError::Config(format!("checkpoint {}: {e}", path.display())))
}

/// Enhances one file with a saved model.
pub fn enhance(input: &Path, output: &Path, checkpoint: &Path, out: &mut dyn Write) -> Result<()> {
    let (model, store) = load_checkpoint(checkpoint)?.restore()?;
    let x = wav_read(input, model.config.stft.sample_rate)?;
    let y = model.enhance(&x, &store)?;
    wav_write(output, &y)?;
    writeln!(
        out,
        "enhance in={} out={} samples={} duration_s={}",
        input.display(),
        output.display(),
        y.len(),
        y.duration_s()
    )?;
    Ok(())
}

fn pairs_line(prefix: &str, pairs: &[(&str, String)]) -> String {
    let mut s = prefix.to_string();
    for (k, v) in pairs {
        s.push_str(&format!(" {k}={v}"));
    }
    s
}

/// Runs the training loop. The effective configuration is echoed to `out`
/// and written to `out_dir/effective.conf`.
pub fn train_cmd(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    let echo = cfg.out_dir.join("effective.conf");
    std::fs::write(&echo, cfg.to_text())?;
    writeln!(out, "{}", pairs_line("config", &cfg.to_pairs()))?;
    let mut trainer = match &cfg.resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            if ck.config != cfg.model {
                return Err(CliError::Config(format!(
                    "resume: {} was saved with a different model configuration",
                    path.display()
                )));
            }
            Trainer::from_checkpoint(&ck, cfg.train.clone(), cfg.loss.clone())?
        }
        None => trainer_for(&cfg.model, cfg.train.seed, cfg.train.clone(), cfg.loss.clone())?,
    };
    let mut io = Ok(());
    train(&mut trainer, &Dataset::Synthetic, Some(&cfg.out_dir), |r| {
        if io.is_ok() {
            io = writeln!(out, "train {r}");
        }
    })?;
    io?;
    let best = trainer.best.as_ref().map_or(f64::NAN, |(b, _)| *b);
    writeln!(
        out,
        "done epochs={} steps={} best_val_si_sdr={best:.4} out_dir={}",
        trainer.epoch,
        trainer.adam.step,
        cfg.out_dir.display()
    )?;
    Ok(())
}

/// Settings for [`eval`].
#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub utterances: usize,
    pub seed: u64,
    pub chunk_s: f64,
    pub snr_range_db: (f64, f64),
    /// External scoring program, run as `PROGRAM clean.wav noisy.wav enhanced.wav`
    /// once per utterance; its trimmed stdout is echoed.
    pub scorer: Option<PathBuf>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            utterances: 8,
            seed: 1_000,
            chunk_s: 4.0,
            snr_range_db: (-5.0, 20.0),
            scorer: None,
        }
    }
}

/// Mean SI-SDR of noisy and enhanced held-out synthetic mixtures.
pub fn eval(checkpoint: &Path, opts: &EvalOptions, out: &mut dyn Write) -> Result<()> {
    let (model, store) = load_checkpoint(checkpoint)?.restore()?;
    if opts.utterances == 0 {
        return Err(CliError::Config("seeds must be at least 1".into()));
    }
    let sr = model.config.stft.sample_rate;
    let (mut noisy, mut enhanced) = (0.0, 0.0);
    for i in 0..opts.utterances {
        let m = synth_mixture(mix_seed(opts.seed, i as u64), opts.chunk_s, opts.snr_range_db, sr)?;
        let y = model.enhance(&m.mixture, &store)?;
        noisy += si_sdr(&m.mixture, &m.clean)?;
        enhanced += si_sdr(&y, &m.clean)?;
        if let Some(program) = &opts.scorer {
            let scored = external_score(program, i, [&m.clean, &m.mixture, &y])?;
            writeln!(out, "eval utterance={i} scorer={}", scored)?;
        }
    }
    let n = opts.utterances as f64;
    let (noisy, enhanced) = (noisy / n, enhanced / n);
    writeln!(
        out,
        "eval utterances={} seed={} noisy_si_sdr={noisy:.4} enhanced_si_sdr={enhanced:.4} improvement_db={:.4}",
        opts.utterances,
        opts.seed,
        enhanced - noisy
    )?;
    Ok(())
}

fn external_score(program: &Path, utterance: usize, audio: [&forknet::AudioBuffer<f64>; 3]) -> Result<String> {
    let dir = std::env::temp_dir().join(format!("forknet-eval-{}-{utterance}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let paths: Vec<PathBuf> = ["clean", "noisy", "enhanced"]
        .iter()
        .map(|name| dir.join(format!("{name}.wav")))
        .collect();
    for (path, buf) in paths.iter().zip(audio) {
        wav_write(path, buf)?;
    }
    let output = Command::new(program).args(&paths).output();
    std::fs::remove_dir_all(&dir)?;
    let output = output.map_err(|e| CliError::Check(format!("scorer {}: {e}", program.display())))?;
    if !output.status.success() {
        return Err(CliError::Check(format!(
            "scorer {} exited with {} on utterance {utterance}",
            program.display(),
            output.status
        )));
    }
    Ok(String::from_utf8_lossy(&output.stdout)
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" "))
}

/// Finite-difference suite; fails if any case exceeds the tolerance.
pub fn gradcheck(seed: u64, max_entries: Option<usize>, out: &mut dyn Write) -> Result<()> {
    let results = suite::run(seed, max_entries)?;
    let mut failed = Vec::new();
    for r in &results {
        let checked: usize = r.report.entries.iter().map(|e| e.checked).sum();
        let status = if r.passed() { "pass" } else { "FAIL" };
        let worst_tensor = r
            .report
            .entries
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
            .map_or("-", |e| e.name.as_str());
        writeln!(
            out,
            "gradcheck case={} tensors={} entries={checked} max_rel_err={:.3e} worst_tensor={worst_tensor} status={status}",
            r.name,
            r.report.entries.len(),
            r.report.worst()
        )?;
        if !r.passed() {
            failed.push(r.name.clone());
        }
    }
    let worst = results.iter().map(|r| r.report.worst()).fold(0.0, f64::max);
    writeln!(
        out,
        "gradcheck cases={} failed={} worst={worst:.3e} tolerance={:e}",
        results.len(),
        failed.len(),
        suite::TOLERANCE
    )?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Check(format!("gradient mismatch in {}", failed.join(", "))))
    }
}

/// Per-submodule and total parameter counts.
pub fn params(cfg: &ForkNetConfig, label: &str, out: &mut dyn Write) -> Result<usize> {
    let (_, store) = build::<f64>(cfg, 0)?;
    let mut line = format!("params config={label}");
    for (name, n) in param_breakdown(&store) {
        line.push_str(&format!(" {name}={n}"));
    }
    let total = param_count(&store);
    writeln!(out, "{line} total={total}")?;
    Ok(total)
}

/// Ref1, Ref2 and the full model side by side with the published sizes.
pub fn ablate(out: &mut dyn Write) -> Result<()> {
    let rows = [
        ("Ref1", ForkNetConfig::ref1(), 0.76),
        ("Ref2", ForkNetConfig::ref2(), 0.63),
        ("ForkNet", ForkNetConfig::paper(), 0.58),
    ];
    let mut totals = Vec::new();
    for (name, cfg, published) in &rows {
        let total = param_count(&build::<f64>(cfg, 0)?.1);
        writeln!(
            out,
            "ablate model={name} d1={} d2={} d3={} d={} total={total} millions={:.2} published_millions={published:.2}",
            cfg.d1,
            cfg.d2,
            cfg.d3,
            cfg.d,
            total as f64 / 1e6
        )?;
        totals.push(total);
    }
    let ordered = totals[0] > totals[1] && totals[1] > totals[2];
    writeln!(out, "ablate ordering=Ref1>Ref2>ForkNet holds={ordered}")?;
    if ordered {
        Ok(())
    } else {
        Err(CliError::Check(format!("parameter ordering violated: {totals:?}")))
    }
}

/// Writes a checkpoint whose decoder emits the identity mask `1 + 0j`.
pub fn identity_checkpoint(cfg: &ForkNetConfig, seed: u64, path: &Path, out: &mut dyn Write) -> Result<()> {
    let (model, mut store) = build::<f64>(cfg, seed)?;
    model.set_constant_mask(&mut store, 1.0, 0.0);
    let mut ck = Checkpoint::new(cfg.clone(), store);
    ck.meta.push(("mask".into(), "identity".into()));
    ck.save(path)?;
    writeln!(out, "identity-checkpoint path={}", path.display())?;
    Ok(())
}
