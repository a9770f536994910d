use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{make_masked_batch, MaskedBatch, MaskingConfig, TokenId};
use crate::model::{ForwardOptions, ModelError, PolyLm};
use crate::numerics::{cosine_parts, NumericsError};

use super::checkpoint::{checkpoint_path, prune_checkpoints, Checkpoint};
use super::{adam_step, clip_global_norm, AdamConfig, AdamState, Schedule, TrainError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub seed: u64,
    /// Write a checkpoint every this many updates; 0 writes only at the end.
    pub checkpoint_every: u64,
    pub keep_checkpoints: usize,
    /// Global gradient norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub distinctness: bool,
    pub masking: MaskingConfig,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            seed: 0,
            checkpoint_every: 1000,
            keep_checkpoints: 2,
            clip_norm: Some(1.0),
            distinctness: true,
            masking: MaskingConfig::default(),
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        if self.keep_checkpoints == 0 {
            return Err(TrainError::Config("keep_checkpoints must be at least 1".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(TrainError::Config("clip_norm must be positive".into()));
            }
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(TrainError::Config("Adam betas must lie in [0, 1) and eps be positive".into()));
        }
        self.masking.validate()?;
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    /// Zero-based update index.
    pub step: u64,
    pub lr: f64,
    pub lambda_m: f64,
    pub r: f64,
    pub j_lm: f64,
    pub j_d: f64,
    pub j_m: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

impl StepRecord {
    pub fn tsv(&self) -> String {
        format!(
            "{}\t{:e}\t{}\t{}\t{}\t{}\t{}",
            self.step, self.lr, self.lambda_m, self.r, self.j_lm, self.j_d, self.j_m
        )
    }
}

/// Owns the model, optimizer state and the single generator that drives
/// batch sampling, masking and dropout.
pub struct Trainer {
    pub model: PolyLm,
    pub adam: AdamState,
    pub schedule: Schedule,
    pub config: TrainConfig,
    rng: ChaCha8Rng,
    step: u64,
    data: Vec<Vec<TokenId>>,
}

impl Trainer {
    /// `data` holds padded windows of at most `seq_len` tokens.
    pub fn new(
        model: PolyLm,
        data: Vec<Vec<TokenId>>,
        schedule: Schedule,
        config: TrainConfig,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        let adam = AdamState::new(&model.params);
        let t = Trainer { model, adam, schedule, config, rng, step: 0, data };
        t.check_data()?;
        Ok(t)
    }

    pub fn from_checkpoint(ckpt: Checkpoint, data: Vec<Vec<TokenId>>) -> Result<Self, TrainError> {
        ckpt.train.validate()?;
        let t = Trainer {
            model: ckpt.model,
            adam: ckpt.adam,
            schedule: ckpt.schedule,
            config: ckpt.train,
            rng: ckpt.rng,
            step: ckpt.step,
            data,
        };
        t.check_data()?;
        Ok(t)
    }

    fn check_data(&self) -> Result<(), TrainError> {
        if self.data.is_empty() {
            return Err(TrainError::Config("training data is empty".into()));
        }
        let pad = self.model.vocab.pad();
        let limit = self.model.config.seq_len;
        for (i, row) in self.data.iter().enumerate() {
            if row.len() > limit {
                return Err(TrainError::Config(format!("window {i} has {} tokens, over seq_len {limit}", row.len())));
            }
            if row.first().is_none_or(|&t| t == pad) {
                return Err(TrainError::Config(format!("window {i} is empty")));
            }
        }
        Ok(())
    }

    /// Updates completed so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.schedule.total_steps()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            adam: self.adam.clone(),
            step: self.step,
            rng: self.rng.clone(),
            schedule: self.schedule.clone(),
            train: self.config.clone(),
        }
    }

    /// Saves a checkpoint for the current step and prunes old ones.
    pub fn save(&self, dir: &Path) -> Result<PathBuf, TrainError> {
        fs::create_dir_all(dir)?;
        let path = checkpoint_path(dir, self.step);
        self.checkpoint().save(&path)?;
        prune_checkpoints(dir, self.config.keep_checkpoints)?;
        Ok(path)
    }

    /// Samples rows uniformly with replacement and trims them to the longest
    /// real length among them.
    fn sample_batch(&mut self) -> Result<MaskedBatch, TrainError> {
        let pad = self.model.vocab.pad();
        let picks: Vec<usize> =
            (0..self.config.batch_size).map(|_| self.rng.random_range(0..self.data.len())).collect();
        let real_len = |r: &[TokenId]| r.iter().position(|&t| t == pad).unwrap_or(r.len());
        let width = picks.iter().map(|&i| real_len(&self.data[i])).max().unwrap_or(1);
        let rows: Vec<Vec<TokenId>> = picks
            .iter()
            .map(|&i| {
                let mut r = self.data[i].clone();
                r.resize(width, pad);
                r
            })
            .collect();
        Ok(make_masked_batch(&rows, &self.model.vocab, &mut self.rng, &self.config.masking)?)
    }

    /// One sampled batch, forward, backward and Adam update.
    pub fn train_step(&mut self) -> Result<StepRecord, TrainError> {
        let sv = self.schedule.at(self.step);
        let batch = self.sample_batch()?;
        let opts = ForwardOptions {
            r: sv.r,
            lambda_m: sv.lambda_m,
            train: true,
            distinctness: self.config.distinctness,
            match_pass: sv.lambda_m > 0.0,
            frozen_q_p: None,
        };
        let f = self.model.forward(&batch, &opts, &mut self.rng)?;
        let o = &f.outputs;
        if !o.total.is_finite() {
            let detail = match f.graph.first_non_finite() {
                Some((v, op)) => format!("node {} ({op:?})", v.index()),
                None => "loss".into(),
            };
            return Err(TrainError::NonFiniteLoss { step: self.step, detail });
        }
        let grads = f.graph.backward(f.vars.total).map_err(ModelError::from)?;
        let mut g: Vec<Vec<f32>> =
            self.model.params.iter().map(|(id, _, t)| grads.dense(f.params[id.0], t.len())).collect();
        let grad_norm = match self.config.clip_norm {
            Some(c) => clip_global_norm(&mut g, c),
            None => g.iter().flatten().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt(),
        };
        adam_step(&mut self.model.params, &g, &mut self.adam, sv.lr, &self.config.adam)?;
        let rec = StepRecord {
            step: self.step,
            lr: sv.lr,
            lambda_m: sv.lambda_m,
            r: sv.r,
            j_lm: o.j_lm,
            j_d: o.j_d,
            j_m: o.j_m,
            grad_norm,
        };
        self.step += 1;
        Ok(rec)
    }

    /// Trains until `until` updates (capped by the schedule) have been made.
    /// Periodic checkpoints and the halt checkpoint go to `dir`. A non-finite
    /// loss or gradient writes a checkpoint of the last good state and stops.
    pub fn run(
        &mut self,
        until: u64,
        dir: Option<&Path>,
        mut on_step: impl FnMut(&StepRecord),
    ) -> Result<(), TrainError> {
        let until = until.min(self.schedule.total_steps());
        while self.step < until {
            let backup = dir.map(|_| (self.rng.clone(), self.step));
            match self.train_step() {
                Ok(rec) => on_step(&rec),
                Err(e @ (TrainError::NonFiniteLoss { .. } | TrainError::NonFiniteGradient { .. })) => {
                    if let (Some(d), Some((rng, step))) = (dir, backup) {
                        self.rng = rng;
                        self.step = step;
                        let p = self.save(d)?;
                        log::error!("training halted at step {step}: {e}; state saved to {}", p.display());
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            }
            if let Some(d) = dir {
                let every = self.config.checkpoint_every;
                if (every > 0 && self.step.is_multiple_of(every)) || self.step == until {
                    self.save(d)?;
                }
            }
        }
        Ok(())
    }
}

/// Appends step records to a tab-separated log file.
pub struct TrainLog {
    file: fs::File,
}

impl TrainLog {
    pub const HEADER: &'static str = "step\tlr\tlambdaM\tr\tJ_LM\tJ_D\tJ_M";

    pub fn append(path: &Path) -> Result<Self, TrainError> {
        let fresh = !path.exists();
        let mut file = fs::OpenOptions::new().create(true).append(true).open(path)?;
        if fresh {
            writeln!(file, "{}", Self::HEADER)?;
        }
        Ok(TrainLog { file })
    }

    pub fn write(&mut self, rec: &StepRecord) -> Result<(), TrainError> {
        writeln!(self.file, "{}", rec.tsv())?;
        Ok(())
    }
}

/// Mean cosine between the clean-sequence q^D and q^P over the multi-sense
/// targets of `batch`. Returns `None` when no target is multi-sense.
pub fn match_cosine(model: &PolyLm, batch: &MaskedBatch) -> Result<Option<f64>, TrainError> {
    let opts = ForwardOptions { match_pass: true, ..ForwardOptions::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let f = model.forward(batch, &opts, &mut rng)?;
    let o = &f.outputs;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (qd, qp) in o.q_d_clean.iter().zip(&o.q_p) {
        if qd.len() < 2 {
            continue;
        }
        sum += cosine_parts(qd, qp).0;
        n += 1;
    }
    Ok((n > 0).then(|| sum / n as f64))
}

impl From<NumericsError> for TrainError {
    fn from(e: NumericsError) -> Self {
        TrainError::Model(ModelError::from(e))
    }
}
