//! Optimizer, schedule, clipping, synthetic dynamic mixing and the training loop.

mod data;
mod optim;

use std::fmt;
use std::path::Path;

pub use data::{mix_at_snr, mix_seed, synth_clean, synth_mixture, synth_noise, MixtureSample, NoiseKind, CLEAN_PEAK};
pub use optim::{clip_grad_norm, grad_norm, lr_at, Adam, AdamConfig};

use crate::autograd::{Graph, ParamStore};
use crate::error::{invalid, Error, Result};
use crate::loss::{total_loss_graph, LossConfig, MultiResolution};
use crate::metrics::si_sdr;
use crate::model::checkpoint::Checkpoint;
use crate::model::{ForkNet, ForkNetConfig};
use crate::tensor::Tensor;

/// Salt separating validation seeds from training seeds.
const VALIDATION_STREAM: u64 = 0x5eed_0f_da7a;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    /// Factor applied to the learning rate every two epochs.
    pub decay: f64,
    pub clip_norm: f64,
    pub chunk_s: f64,
    pub snr_range_db: (f64, f64),
    pub epochs: usize,
    pub batch_size: usize,
    pub utterances_per_epoch: usize,
    pub val_utterances: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 4e-4,
            decay: 0.98,
            clip_norm: 5.0,
            chunk_s: 4.0,
            snr_range_db: (-5.0, 20.0),
            epochs: 100,
            batch_size: 2,
            utterances_per_epoch: 64,
            val_utterances: 8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return bad(format!("decay must lie in (0, 1], got {}", self.decay));
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!("clip_norm must be positive, got {}", self.clip_norm));
        }
        if !(self.chunk_s > 0.0) {
            return bad(format!("chunk_s must be positive, got {}", self.chunk_s));
        }
        let (lo, hi) = self.snr_range_db;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return bad(format!("snr range [{lo}, {hi}] is empty"));
        }
        if self.batch_size == 0 || self.utterances_per_epoch == 0 {
            return bad("batch_size and utterances_per_epoch must be positive".into());
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("lr", self.lr.to_string()),
            ("decay", self.decay.to_string()),
            ("clip_norm", self.clip_norm.to_string()),
            ("chunk_s", self.chunk_s.to_string()),
            ("snr_low_db", self.snr_range_db.0.to_string()),
            ("snr_high_db", self.snr_range_db.1.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("utterances_per_epoch", self.utterances_per_epoch.to_string()),
            ("val_utterances", self.val_utterances.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    /// Sets one field from text; `Ok(false)` for keys this config does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        use crate::model::parse_value as p;
        match key {
            "lr" => self.lr = p(key, value)?,
            "decay" => self.decay = p(key, value)?,
            "clip_norm" => self.clip_norm = p(key, value)?,
            "chunk_s" => self.chunk_s = p(key, value)?,
            "snr_low_db" => self.snr_range_db.0 = p(key, value)?,
            "snr_high_db" => self.snr_range_db.1 = p(key, value)?,
            "epochs" => self.epochs = p(key, value)?,
            "batch_size" => self.batch_size = p(key, value)?,
            "utterances_per_epoch" => self.utterances_per_epoch = p(key, value)?,
            "val_utterances" => self.val_utterances = p(key, value)?,
            "seed" => self.seed = p(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Where training mixtures come from.
#[derive(Clone, Debug)]
pub enum Dataset {
    /// Fresh mixtures every epoch; validation on held-out seeds.
    Synthetic,
    /// One mixture repeated for `steps_per_epoch` steps and also used for validation.
    Fixed {
        sample: MixtureSample,
        steps_per_epoch: usize,
    },
}

/// One training-log line.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    /// Mean training loss over the epoch's steps.
    pub loss: f64,
    pub val_si_sdr: f64,
}

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step={} epoch={} lr={:e} loss={} val_si_sdr={:.4}",
            self.step, self.epoch, self.lr, self.loss, self.val_si_sdr
        )
    }
}

/// Model, parameters and optimizer state plus the history of a run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: ForkNet<f64>,
    pub store: ParamStore<f64>,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub adam: Adam<f64>,
    /// Next epoch to run.
    pub epoch: usize,
    /// Mean batch loss of every step taken by this trainer.
    pub step_losses: Vec<f64>,
    pub history: Vec<EpochRecord>,
    pub best: Option<(f64, ParamStore<f64>)>,
    mr: MultiResolution<f64>,
}

impl Trainer {
    pub fn new(model: ForkNet<f64>, store: ParamStore<f64>, train: TrainConfig, loss: LossConfig) -> Result<Self> {
        train.validate()?;
        loss.validate()?;
        let mr = MultiResolution::new(&loss.mr_windows_ms, model.config.stft.sample_rate)?;
        let adam = Adam::new(&store, AdamConfig::default());
        Ok(Self {
            model,
            store,
            train,
            loss,
            adam,
            epoch: 0,
            step_losses: Vec::new(),
            history: Vec::new(),
            best: None,
            mr,
        })
    }

    fn sample_rate(&self) -> u32 {
        self.model.config.stft.sample_rate
    }

    /// Loss of one mixture; gradients are accumulated into the store with `weight`.
    fn accumulate(&mut self, sample: &MixtureSample, weight: f64) -> Result<f64> {
        let mut g = Graph::new();
        let (vars, _) = self.model.forward(&mut g, &self.store, sample.mixture.samples())?;
        let clean = sample.clean.samples();
        let clean_spec = self.model.analyze(clean)?;
        let l = total_loss_graph(
            &mut g,
            vars.spectrum,
            &clean_spec,
            vars.waveform,
            clean,
            &self.loss,
            &self.mr,
        )?;
        let value = g.value(l.total).data()[0];
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss is {value} at step {}",
                self.adam.step + 1
            )));
        }
        g.backward_weighted(l.total, &mut self.store, weight)?;
        Ok(value)
    }

    /// Forward, loss, backward, clip and Adam update on one batch; returns the mean loss.
    pub fn step(&mut self, batch: &[MixtureSample], lr: f64) -> Result<f64> {
        if batch.is_empty() {
            return invalid("empty batch");
        }
        self.store.zero_grad();
        let w = 1.0 / batch.len() as f64;
        let mut total = 0.0;
        for sample in batch {
            total += self.accumulate(sample, w)?;
        }
        clip_grad_norm(&mut self.store, self.train.clip_norm);
        self.adam.step(&mut self.store, lr)?;
        let mean = total * w;
        self.step_losses.push(mean);
        Ok(mean)
    }

    /// Training batches of `epoch`, fully determined by the seed and epoch index.
    pub fn batches(&self, dataset: &Dataset, epoch: usize) -> Result<Vec<Vec<MixtureSample>>> {
        match dataset {
            Dataset::Fixed {
                sample,
                steps_per_epoch,
            } => Ok(vec![vec![sample.clone()]; *steps_per_epoch]),
            Dataset::Synthetic => {
                let epoch_seed = mix_seed(self.train.seed, epoch as u64);
                let samples = (0..self.train.utterances_per_epoch)
                    .map(|i| {
                        synth_mixture(
                            mix_seed(epoch_seed, i as u64),
                            self.train.chunk_s,
                            self.train.snr_range_db,
                            self.sample_rate(),
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(samples.chunks(self.train.batch_size).map(<[_]>::to_vec).collect())
            }
        }
    }

    /// Held-out mixtures for validation.
    pub fn validation_set(&self, dataset: &Dataset) -> Result<Vec<MixtureSample>> {
        match dataset {
            Dataset::Fixed { sample, .. } => Ok(vec![sample.clone()]),
            Dataset::Synthetic => (0..self.train.val_utterances)
                .map(|i| {
                    synth_mixture(
                        mix_seed(self.train.seed ^ VALIDATION_STREAM, i as u64),
                        self.train.chunk_s,
                        self.train.snr_range_db,
                        self.sample_rate(),
                    )
                })
                .collect(),
        }
    }

    /// Mean SI-SDR of the enhanced and of the unprocessed mixtures.
    pub fn evaluate(&self, set: &[MixtureSample]) -> Result<(f64, f64)> {
        if set.is_empty() {
            return Ok((f64::NAN, f64::NAN));
        }
        let (mut enhanced, mut noisy) = (0.0, 0.0);
        for s in set {
            let y = self.model.enhance(&s.mixture, &self.store)?;
            enhanced += si_sdr(&y, &s.clean)?;
            noisy += si_sdr(&s.mixture, &s.clean)?;
        }
        let n = set.len() as f64;
        Ok((enhanced / n, noisy / n))
    }

    /// Runs the next epoch and records its log line.
    pub fn run_epoch(&mut self, dataset: &Dataset) -> Result<EpochRecord> {
        let epoch = self.epoch;
        let lr = lr_at(epoch, self.train.lr, self.train.decay);
        let batches = self.batches(dataset, epoch)?;
        let mut sum = 0.0;
        for batch in &batches {
            sum += self.step(batch, lr)?;
        }
        let (val, _) = self.evaluate(&self.validation_set(dataset)?)?;
        let record = EpochRecord {
            step: self.adam.step,
            epoch,
            lr,
            loss: sum / batches.len().max(1) as f64,
            val_si_sdr: val,
        };
        if self.best.as_ref().is_none_or(|(b, _)| val > *b) {
            self.best = Some((val, self.store.clone()));
        }
        self.epoch += 1;
        self.history.push(record.clone());
        Ok(record)
    }

    /// Parameters, optimizer moments and counters; enough to resume bitwise.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.model.config.clone(), self.store.clone());
        ck.meta.push(("epoch".into(), self.epoch.to_string()));
        ck.meta.push(("adam_step".into(), self.adam.step.to_string()));
        for (k, v) in self.train.to_pairs() {
            ck.meta.push((format!("train.{k}"), v));
        }
        for (i, (name, _)) in self.store.iter().enumerate() {
            ck.extra.push((format!("adam.m.{name}"), self.adam.m[i].clone()));
            ck.extra.push((format!("adam.v.{name}"), self.adam.v[i].clone()));
        }
        ck
    }

    /// Rebuilds a trainer from [`Trainer::checkpoint`] output; optimizer
    /// moments are restored when present.
    pub fn from_checkpoint(ck: &Checkpoint, train: TrainConfig, loss: LossConfig) -> Result<Self> {
        let (model, store) = ck.restore()?;
        let mut t = Self::new(model, store, train, loss)?;
        let meta = |k: &str| -> Result<Option<u64>> {
            ck.meta(k)
                .map(|v| {
                    v.parse()
                        .map_err(|_| Error::Format(format!("bad checkpoint field {k}={v}")))
                })
                .transpose()
        };
        t.epoch = meta("epoch")?.unwrap_or(0) as usize;
        t.adam.step = meta("adam_step")?.unwrap_or(0);
        let layout: Vec<(String, Vec<usize>)> = t
            .store
            .iter()
            .map(|(n, p)| (n.to_string(), p.value.shape().to_vec()))
            .collect();
        for (i, (name, shape)) in layout.iter().enumerate() {
            let moment = |kind: &str| -> Result<Option<Tensor<f64>>> {
                match ck.extra(&format!("adam.{kind}.{name}")) {
                    Some(m) if m.shape() == shape.as_slice() => Ok(Some(m.clone())),
                    Some(_) => Err(Error::Format(format!("optimizer state for {name} has the wrong shape"))),
                    None => Ok(None),
                }
            };
            if let (Some(m), Some(v)) = (moment("m")?, moment("v")?) {
                t.adam.m[i] = m;
                t.adam.v[i] = v;
            }
        }
        Ok(t)
    }
}

/// Runs `train.epochs - trainer.epoch` epochs. Each log line goes to `log`;
/// with `out_dir`, `last.fknt` is written after every epoch and `best.fknt`
/// whenever validation SI-SDR improves.
pub fn train(
    trainer: &mut Trainer,
    dataset: &Dataset,
    out_dir: Option<&Path>,
    mut log: impl FnMut(&EpochRecord),
) -> Result<()> {
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    while trainer.epoch < trainer.train.epochs {
        let prev_best = trainer.best.as_ref().map(|(b, _)| *b);
        let record = trainer.run_epoch(dataset)?;
        log(&record);
        if let Some(dir) = out_dir {
            trainer.checkpoint().save(dir.join("last.fknt"))?;
            if prev_best.is_none_or(|b| record.val_si_sdr > b) {
                Checkpoint::new(trainer.model.config.clone(), trainer.store.clone()).save(dir.join("best.fknt"))?;
            }
        }
    }
    Ok(())
}

/// Builds a fresh model and trainer.
pub fn trainer_for(cfg: &ForkNetConfig, seed: u64, train: TrainConfig, loss: LossConfig) -> Result<Trainer> {
    let (model, store) = crate::model::build::<f64>(cfg, seed)?;
    Trainer::new(model, store, train, loss)
}
