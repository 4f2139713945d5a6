use std::path::Path;
use std::process::Command;

use forknet::model::ForkNetConfig;
use forknet::spectral::{istft, stft};
use forknet::AudioBuffer;
use forknet_cli::commands::{self, EvalOptions};
use forknet_cli::config::parse_override;
use forknet_cli::wav::{to_pcm16, PCM16_SCALE};
use forknet_cli::{wav_read, wav_write, CliError, RunConfig};
use hound::{SampleFormat, WavSpec, WavWriter};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_forknet"))
}

fn ramp(n: usize) -> AudioBuffer<f64> {
    AudioBuffer::new((0..n).map(|i| -0.9 + 1.8 * i as f64 / n as f64).collect(), 16_000).unwrap()
}

fn write_raw(path: &Path, channels: u16, rate: u32, bits: u16, format: SampleFormat) {
    let spec = WavSpec {
        channels,
        sample_rate: rate,
        bits_per_sample: bits,
        sample_format: format,
    };
    let mut w = WavWriter::create(path, spec).unwrap();
    for i in 0..64 * channels as i32 {
        match format {
            SampleFormat::Int if bits == 16 => w.write_sample((i * 100) as i16).unwrap(),
            SampleFormat::Int => w.write_sample(i * 100).unwrap(),
            SampleFormat::Float => w.write_sample(i as f32 / 128.0).unwrap(),
        }
    }
    w.finalize().unwrap();
}

#[test]
fn wav_round_trip_within_one_step() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("ramp.wav");
    let x = ramp(16_000);
    wav_write(&p, &x).unwrap();
    let y = wav_read(&p, 16_000).unwrap();
    assert_eq!(y.len(), x.len());
    let err = x
        .samples()
        .iter()
        .zip(y.samples())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(err <= 1.0 / PCM16_SCALE, "{err}");
}

#[test]
fn wav_reads_float_and_decodes_pcm_by_32768() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("f.wav");
    write_raw(&p, 1, 16_000, 32, SampleFormat::Float);
    let x = wav_read(&p, 16_000).unwrap();
    assert_eq!(x.samples()[3], 3.0 / 128.0);
    let p = dir.path().join("i.wav");
    write_raw(&p, 1, 16_000, 16, SampleFormat::Int);
    assert_eq!(wav_read(&p, 16_000).unwrap().samples()[5], 500.0 / 32768.0);
}

#[test]
fn wav_diagnostics_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let msg = |p: &Path| wav_read(p, 16_000).unwrap_err().to_string();
    let p = dir.path().join("stereo.wav");
    write_raw(&p, 2, 16_000, 16, SampleFormat::Int);
    assert!(msg(&p).contains("channels: expected 1"), "{}", msg(&p));
    let p = dir.path().join("rate.wav");
    write_raw(&p, 1, 8_000, 16, SampleFormat::Int);
    assert!(msg(&p).contains("sample_rate: expected 16000, got 8000"), "{}", msg(&p));
    let p = dir.path().join("codec.wav");
    write_raw(&p, 1, 16_000, 24, SampleFormat::Int);
    assert!(msg(&p).contains("codec:"), "{}", msg(&p));
    assert!(wav_read(dir.path().join("missing.wav"), 16_000).is_err());
}

#[test]
fn wav_write_saturates_and_rejects_nan() {
    assert_eq!(to_pcm16(1.5), 32767);
    assert_eq!(to_pcm16(-1.5), -32768);
    assert_eq!(to_pcm16(0.5), 16384);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("loud.wav");
    wav_write(&p, &AudioBuffer::new(vec![1.5, -2.0, 0.25], 16_000).unwrap()).unwrap();
    let raw: Vec<i16> = hound::WavReader::open(&p)
        .unwrap()
        .into_samples()
        .map(Result::unwrap)
        .collect();
    assert_eq!(raw, [32767, -32768, 8192]);
    let bad = AudioBuffer::new(vec![0.0; 4], 16_000).unwrap();
    let mut s = bad.into_samples();
    s[2] = f64::NAN;
    // AudioBuffer may refuse NaN itself; either layer must reject it
    if let Ok(b) = AudioBuffer::new(s, 16_000) {
        assert!(wav_write(dir.path().join("nan.wav"), &b).is_err());
    }
}

#[test]
fn config_grammar_and_echo() {
    let text =
        "# tiny run\npreset = tiny   # model\nlr = 1e-3\n\nsnr_low_db = 0\nmr_windows_ms = 5, 10\nout_dir = /tmp/x\n";
    let cfg = RunConfig::from_sources(Some(text), &[("epochs".into(), "3".into())]).unwrap();
    assert_eq!(cfg.model, ForkNetConfig::tiny());
    assert_eq!(cfg.train.lr, 1e-3);
    assert_eq!(cfg.train.epochs, 3);
    assert_eq!(cfg.train.snr_range_db, (0.0, 20.0));
    assert_eq!(cfg.loss.mr_windows_ms, [5.0, 10.0]);
    let echoed = RunConfig::from_sources(Some(&cfg.to_text()), &[]).unwrap();
    assert_eq!(echoed, cfg);
    // preset applies first even when written last
    let late = RunConfig::from_sources(Some("d = 4\nd1 = 2\nd2 = 2\nd3 = 4\npreset = tiny"), &[]).unwrap();
    assert_eq!((late.model.d1, late.model.d3), (2, 4));
}

#[test]
fn config_errors_name_the_problem() {
    let err = |t: &str| RunConfig::from_sources(Some(t), &[]).unwrap_err().to_string();
    assert!(err("colour = red").contains("unknown key \"colour\""));
    assert!(err("lr").contains("line 1: expected key = value"));
    assert!(err("\nlr = fast").contains("line 2"));
    assert!(err("preset = huge").contains("preset"));
    assert!(
        err("d = 30").contains("d1 + d2 + d3 = 2d violated"),
        "{}",
        err("d = 30")
    );
    assert!(err("heads = 5").contains("heads"));
    assert!(err("snr_low_db = 30").contains("snr"));
    assert!(parse_override("lr").is_err());
}

fn run_ok(args: &[&str]) -> String {
    let out = bin().args(args).output().unwrap();
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn field<'a>(line: &'a str, key: &str) -> &'a str {
    line.split_whitespace()
        .find_map(|kv| kv.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .unwrap_or_else(|| panic!("{key} missing in {line}"))
}

#[test]
fn params_and_ablate() {
    let out = run_ok(&["params"]);
    let total: usize = field(&out, "total").parse().unwrap();
    assert!((520_000..=640_000).contains(&total), "{out}");
    let parts: usize = ["mag_enc", "ri_enc", "time_enc", "fuse", "dpp", "decoder"]
        .iter()
        .map(|k| field(&out, k).parse::<usize>().unwrap())
        .sum();
    assert_eq!(parts, total);

    let out = run_ok(&["ablate"]);
    let totals: Vec<usize> = out
        .lines()
        .filter(|l| l.contains("model="))
        .map(|l| field(l, "total").parse().unwrap())
        .collect();
    assert_eq!(totals.len(), 3);
    assert!(totals[0] > totals[1] && totals[1] > totals[2]);
    assert!(out.contains("holds=true"));

    let out = run_ok(&["params", "--set", "preset=ref1"]);
    assert_eq!(field(&out, "total").parse::<usize>().unwrap(), totals[0]);
}

#[test]
fn config_violations_exit_nonzero() {
    let out = bin().args(["params", "--set", "heads=3"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("heads"));
}

#[test]
fn enhance_identity_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let ck = d.join("id.fknt");
    let ck_s = ck.to_str().unwrap();
    run_ok(&["identity-checkpoint", "--out", ck_s, "--set", "preset=tiny"]);
    let x = ramp(6000);
    let noise: Vec<f64> = (0..6000)
        .map(|i| 0.3 * ((i * 7919 % 1000) as f64 / 1000.0 - 0.5))
        .collect();
    let x = AudioBuffer::new(
        x.samples().iter().zip(&noise).map(|(a, b)| 0.5 * a + b).collect(),
        16_000,
    )
    .unwrap();
    let input = d.join("in.wav");
    wav_write(&input, &x).unwrap();
    let (o1, o2) = (d.join("o1.wav"), d.join("o2.wav"));
    for o in [&o1, &o2] {
        let out = run_ok(&[
            "enhance",
            "--in",
            input.to_str().unwrap(),
            "--out",
            o.to_str().unwrap(),
            "--checkpoint",
            ck_s,
        ]);
        assert!(out.starts_with("enhance "));
        assert_eq!(field(&out, "samples"), "6000");
    }
    assert_eq!(std::fs::read(&o1).unwrap(), std::fs::read(&o2).unwrap());

    let x_q = wav_read(&input, 16_000).unwrap();
    let y = wav_read(&o1, 16_000).unwrap();
    assert_eq!(y.len(), x_q.len());
    // identity mask reproduces the analysis-synthesis round trip of the input
    let cfg = ForkNetConfig::tiny().stft;
    let expect = istft(&stft(&x_q, &cfg).unwrap(), 6000, 16_000).unwrap();
    for (a, b) in y.samples().iter().zip(expect.samples()).skip(512).take(6000 - 1024) {
        assert!((a - b).abs() <= 1.0 / PCM16_SCALE, "{a} {b}");
    }
}

#[test]
fn enhance_rejects_missing_or_corrupt_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let input = d.join("in.wav");
    wav_write(&input, &ramp(2000)).unwrap();
    let bad = d.join("bad.fknt");
    std::fs::write(&bad, b"FKNT garbage").unwrap();
    for ck in [d.join("missing.fknt"), bad] {
        let out = bin()
            .args([
                "enhance",
                "--in",
                input.to_str().unwrap(),
                "--out",
                d.join("o.wav").to_str().unwrap(),
            ])
            .args(["--checkpoint", ck.to_str().unwrap()])
            .output()
            .unwrap();
        assert!(!out.status.success());
        assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint"));
    }
}

#[test]
fn eval_untrained_model_is_finite() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("fresh.fknt");
    let mut sink = Vec::new();
    let cfg = RunConfig::from_sources(Some("preset = tiny\nseed = 4"), &[]).unwrap();
    let (_, store) = forknet::model::build::<f64>(&cfg.model, 4).unwrap();
    forknet::model::checkpoint::Checkpoint::new(cfg.model.clone(), store)
        .save(&ck)
        .unwrap();
    let opts = EvalOptions {
        utterances: 2,
        chunk_s: 0.25,
        ..EvalOptions::default()
    };
    commands::eval(&ck, &opts, &mut sink).unwrap();
    let line = String::from_utf8(sink).unwrap();
    for key in ["noisy_si_sdr", "enhanced_si_sdr"] {
        assert!(field(&line, key).parse::<f64>().unwrap().is_finite(), "{line}");
    }
}

fn script(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
    use std::os::unix::fs::PermissionsExt;
    let path = dir.join(name);
    std::fs::write(&path, format!("#!/bin/sh\n{body}\n")).unwrap();
    std::fs::set_permissions(&path, std::fs::Permissions::from_mode(0o755)).unwrap();
    path
}

#[test]
fn eval_runs_external_scorer_per_utterance() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("id.fknt");
    let cfg = RunConfig::from_sources(Some("preset = tiny"), &[]).unwrap();
    commands::identity_checkpoint(&cfg.model, 0, &ck, &mut Vec::new()).unwrap();
    // 44-byte header plus 4000 16-bit samples per file
    let sizes = script(dir.path(), "sizes.sh", r#"for f in "$@"; do wc -c < "$f"; done"#);
    let mut sink = Vec::new();
    let opts = EvalOptions {
        utterances: 2,
        chunk_s: 0.25,
        scorer: Some(sizes),
        ..EvalOptions::default()
    };
    commands::eval(&ck, &opts, &mut sink).unwrap();
    let text = String::from_utf8(sink).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "eval utterance=0 scorer=8044 8044 8044");
    assert_eq!(lines[1], "eval utterance=1 scorer=8044 8044 8044");
    assert!(lines[2].starts_with("eval utterances=2"));

    let failing = script(dir.path(), "fail.sh", "exit 3");
    let opts = EvalOptions {
        scorer: Some(failing),
        ..opts
    };
    let err = commands::eval(&ck, &opts, &mut Vec::new()).unwrap_err();
    assert!(
        matches!(err, CliError::Check(ref m) if m.contains("utterance 0")),
        "{err}"
    );
}

#[test]
fn train_echo_reproduces_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let conf = dir.path().join("run.conf");
    std::fs::write(
        &conf,
        format!(
            "preset = tiny\nepochs = 2\nchunk_s = 0.1\nutterances_per_epoch = 2\nval_utterances = 1\nlr = 3e-3\nout_dir = {}\n",
            a.display()
        ),
    )
    .unwrap();
    let first = run_ok(&["train", "--config", conf.to_str().unwrap()]);
    let lines: Vec<&str> = first.lines().collect();
    assert!(lines[0].starts_with("config preset=tiny"));
    assert_eq!(lines.iter().filter(|l| l.starts_with("train step=")).count(), 2);
    assert!(lines.last().unwrap().starts_with("done epochs=2"));

    let echo = a.join("effective.conf");
    let second = run_ok(&[
        "train",
        "--config",
        echo.to_str().unwrap(),
        "--set",
        &format!("out_dir={}", b.display()),
    ]);
    let strip = |s: &str| -> Vec<String> {
        s.lines()
            .skip(1)
            .map(|l| l.split(" out_dir=").next().unwrap().to_string())
            .collect()
    };
    assert_eq!(strip(&first), strip(&second));
    assert_eq!(
        std::fs::read(a.join("last.fknt")).unwrap(),
        std::fs::read(b.join("last.fknt")).unwrap()
    );
}

#[test]
fn train_resume_continues_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let base = "preset = tiny\nchunk_s = 0.1\nutterances_per_epoch = 2\nval_utterances = 1\nlr = 3e-3\n";
    let run = |extra: &str| {
        let cfg = RunConfig::from_sources(Some(&format!("{base}{extra}")), &[]).unwrap();
        let mut sink = Vec::new();
        commands::train_cmd(&cfg, &mut sink).unwrap();
        String::from_utf8(sink).unwrap()
    };
    let full = run(&format!(
        "epochs = 2\nout_dir = {}\n",
        dir.path().join("full").display()
    ));
    run(&format!(
        "epochs = 1\nout_dir = {}\n",
        dir.path().join("half").display()
    ));
    let resumed = run(&format!(
        "epochs = 2\nout_dir = {}\nresume = {}\n",
        dir.path().join("rest").display(),
        dir.path().join("half/last.fknt").display()
    ));
    let epoch1 = |s: &str| s.lines().find(|l| l.contains("epoch=1 ")).unwrap().to_string();
    assert_eq!(epoch1(&full), epoch1(&resumed));
    assert_eq!(
        std::fs::read(dir.path().join("full/last.fknt")).unwrap(),
        std::fs::read(dir.path().join("rest/last.fknt")).unwrap()
    );
    let mismatch = RunConfig::from_sources(
        Some(&format!(
            "preset = paper\nresume = {}\n",
            dir.path().join("half/last.fknt").display()
        )),
        &[],
    )
    .unwrap();
    assert!(matches!(
        commands::train_cmd(&mismatch, &mut Vec::new()),
        Err(CliError::Config(_))
    ));
}

#[test]
fn gradcheck_command_passes() {
    let out = run_ok(&["gradcheck", "--seed", "0", "--max-entries", "4"]);
    let summary = out.lines().last().unwrap();
    assert_eq!(field(summary, "failed"), "0", "{out}");
    assert!(out.lines().filter(|l| l.contains("status=pass")).count() > 20);
}
