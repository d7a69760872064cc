//! Denoiser training over a corpus of fixed-count Gaussian sets.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{make_schedule, rng_stream, standard_normal, training_loss, NoiseSchedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::fitting::{log_scale_stats, mask_outliers_with};
use crate::gaussians::{GaussianSet, FEATURE_DIM};
use crate::nn::checkpoint::{save_checkpoint, Checkpoint};
use crate::nn::denoiser::{DenoiserConfig, DenoiserWeights};
use crate::nn::optim::{AdamW, AdamWConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub num_timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub kind: ScheduleKind,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            num_timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            kind: ScheduleKind::Linear,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.num_timesteps, self.beta_start, self.beta_end, self.kind)
    }

    fn to_metadata(self) -> Vec<(String, f64)> {
        vec![
            ("schedule.num_timesteps".into(), self.num_timesteps as f64),
            ("schedule.beta_start".into(), self.beta_start),
            ("schedule.beta_end".into(), self.beta_end),
        ]
    }

    /// Schedule recorded in a checkpoint, falling back to `self` per field.
    pub fn from_checkpoint(&self, ck: &Checkpoint) -> Self {
        Self {
            num_timesteps: ck
                .metadata("schedule.num_timesteps")
                .map_or(self.num_timesteps, |v| v as usize),
            beta_start: ck.metadata("schedule.beta_start").unwrap_or(self.beta_start),
            beta_end: ck.metadata("schedule.beta_end").unwrap_or(self.beta_end),
            kind: self.kind,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub outlier_sigma: f64,
    pub optimizer: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 1,
            seed: 0,
            checkpoint_every: 1000,
            log_every: 100,
            outlier_sigma: 3.0,
            optimizer: AdamWConfig::default(),
        }
    }
}

/// Checks that all sets share one row count and masks log-scale outliers
/// against statistics pooled over the whole corpus.
pub fn prepare_corpus(sets: &[GaussianSet], k_sigma: f64) -> Result<Vec<GaussianSet>> {
    let first = sets.first().ok_or(Error::EmptySet)?;
    if let Some(bad) = sets.iter().find(|s| s.len() != first.len()) {
        return Err(Error::ShapeMismatch(format!(
            "training sets must share N: found {} and {}",
            first.len(),
            bad.len()
        )));
    }
    let (mean, std) = log_scale_stats(sets);
    Ok(sets.iter().map(|s| mask_outliers_with(s, mean, std, k_sigma)).collect())
}

/// Trailing moving average with a window of `window` entries.
pub fn smoothed(losses: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(losses.len());
    let mut sum = 0.0;
    for (i, &l) in losses.iter().enumerate() {
        sum += l;
        if i >= window {
            sum -= losses[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

#[derive(Debug, Clone)]
pub struct Trainer {
    pub weights: DenoiserWeights<f32>,
    pub optimizer: AdamW<f32>,
    pub rng: ChaCha8Rng,
    pub step: u64,
    pub schedule_config: ScheduleConfig,
    schedule: NoiseSchedule,
    pub config: TrainConfig,
    /// Batch-mean loss of every step run by this trainer (not restored on resume).
    pub losses: Vec<f64>,
    pub skipped: u64,
}

impl Trainer {
    pub fn new(denoiser: DenoiserConfig, schedule_config: ScheduleConfig, config: TrainConfig) -> Result<Self> {
        if denoiser.num_timesteps != schedule_config.num_timesteps {
            return Err(Error::Config(format!(
                "denoiser has {} timesteps, schedule {}",
                denoiser.num_timesteps, schedule_config.num_timesteps
            )));
        }
        let mut rng = rng_stream(config.seed, 0);
        let weights = DenoiserWeights::init(denoiser, &mut rng)?;
        let optimizer = AdamW::new(config.optimizer, &weights.params);
        Ok(Self {
            weights,
            optimizer,
            rng,
            step: 0,
            schedule: schedule_config.build()?,
            schedule_config,
            config,
            losses: Vec::new(),
            skipped: 0,
        })
    }

    /// Continues from a checkpoint; optimizer hyperparameters come from the file.
    pub fn resume(ck: Checkpoint, schedule_config: ScheduleConfig, config: TrainConfig) -> Result<Self> {
        let schedule_config = schedule_config.from_checkpoint(&ck);
        Ok(Self {
            schedule: schedule_config.build()?,
            weights: ck.weights,
            optimizer: ck.optimizer,
            rng: ck.rng,
            step: ck.step,
            schedule_config,
            config,
            losses: Vec::new(),
            skipped: 0,
        })
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    /// One optimizer step on `batch_size` random (scene, t, noise) draws.
    /// Returns the batch-mean loss, or `None` if the update was skipped.
    pub fn train_step(&mut self, corpus: &[GaussianSet]) -> Result<Option<f64>> {
        if corpus.is_empty() {
            return Err(Error::EmptySet);
        }
        let draws: Vec<(usize, usize, Vec<f64>)> = (0..self.config.batch_size.max(1))
            .map(|_| {
                let scene = self.rng.random_range(0..corpus.len());
                let t = self.rng.random_range(1..=self.schedule.num_steps());
                let noise = standard_normal(&mut self.rng, corpus[scene].len() * FEATURE_DIM);
                (scene, t, noise)
            })
            .collect();
        let results: Vec<Result<_>> = draws
            .par_iter()
            .map(|(scene, t, noise)| training_loss(&self.weights, &self.schedule, &corpus[*scene], *t, noise))
            .collect();
        self.step += 1;
        let mut loss = 0.0;
        let mut grads: Option<Vec<Vec<f32>>> = None;
        for r in results {
            let r = match r {
                Err(Error::NonFiniteGradient) => {
                    self.skipped += 1;
                    return Ok(None);
                }
                other => other?,
            };
            loss += r.loss;
            match &mut grads {
                None => grads = Some(r.grads),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&r.grads) {
                        for (x, y) in a.iter_mut().zip(g) {
                            *x += *y;
                        }
                    }
                }
            }
        }
        let b = draws.len();
        let mut grads = grads.expect("batch is non-empty");
        if b > 1 {
            let inv = 1.0 / b as f32;
            grads.iter_mut().flatten().for_each(|g| *g *= inv);
        }
        match self.optimizer.step(&mut self.weights.params, &grads) {
            Err(Error::NonFiniteGradient) => {
                self.skipped += 1;
                Ok(None)
            }
            Err(e) => Err(e),
            Ok(()) => {
                let l = loss / b as f64;
                if !l.is_finite() {
                    self.skipped += 1;
                    return Ok(None);
                }
                self.losses.push(l);
                Ok(Some(l))
            }
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut metadata = self.schedule_config.to_metadata();
        if let Some(&l) = self.losses.last() {
            metadata.push(("last_loss".into(), l));
        }
        Checkpoint {
            weights: self.weights.clone(),
            optimizer: self.optimizer.clone(),
            rng: self.rng.clone(),
            step: self.step,
            metadata,
        }
    }

    /// Runs until the global step reaches `config.steps`, writing periodic
    /// checkpoints and a `step loss` log under `out_dir` when given.
    pub fn run(&mut self, corpus: &[GaussianSet], out_dir: Option<&Path>) -> Result<()> {
        let mut log = match out_dir {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let p = dir.join("loss.txt");
                Some((
                    OpenOptions::new()
                        .create(true)
                        .append(true)
                        .open(&p)
                        .map_err(|e| Error::io(&p, e))?,
                    p,
                ))
            }
            None => None,
        };
        while self.step < self.config.steps {
            let loss = self.train_step(corpus)?;
            if let (Some((file, p)), Some(l)) = (&mut log, loss) {
                writeln!(file, "{} {l:.6}", self.step).map_err(|e| Error::io(p.as_path(), e))?;
            }
            if self.config.log_every > 0 && self.step % self.config.log_every == 0 {
                let recent = smoothed(&self.losses, self.config.log_every as usize);
                if let Some(l) = recent.last() {
                    eprintln!("step {:>6}  loss {l:.4}  skipped {}", self.step, self.skipped);
                }
            }
            if let Some(dir) = out_dir {
                if self.config.checkpoint_every > 0 && self.step % self.config.checkpoint_every == 0 {
                    save_checkpoint(dir.join("latest.ckpt"), &self.checkpoint())?;
                }
            }
        }
        if let Some(dir) = out_dir {
            save_checkpoint(dir.join("latest.ckpt"), &self.checkpoint())?;
        }
        Ok(())
    }
}
