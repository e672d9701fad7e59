//! Mini-batch AdamW with a linear warmup / linear decay learning rate.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::CrfModel;
use crate::embedder::TokenReprSequence;
use crate::error::{Error, Result};
use crate::seeds::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Fraction of total steps spent warming up from 0 to `lr`.
    pub warmup_frac: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub max_length: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-6,
            batch_size: 4,
            epochs: 25,
            warmup_frac: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            seed: 0,
            max_length: 256,
        }
    }
}

impl TrainConfig {
    /// Learning rate used for the Twitter-2017-style runs.
    pub const LR_2017: f64 = 7e-6;
    /// Range of the learning-rate grid search.
    pub const LR_GRID: (f64, f64) = (1e-6, 5e-5);

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::Config("warmup_frac must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 || self.max_length == 0 {
            return Err(Error::Config("batch_size and max_length must be positive".into()));
        }
        Ok(())
    }

    pub fn total_steps(&self, samples: usize) -> usize {
        self.epochs * samples.div_ceil(self.batch_size)
    }

    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let warmup = (self.warmup_frac * total as f64) as usize;
        if step < warmup {
            self.lr * step as f64 / warmup as f64
        } else {
            let rest = (total - warmup).max(1) as f64;
            self.lr * ((total.saturating_sub(step)) as f64 / rest).max(0.0)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochStats>,
    /// Learning rate applied at every optimizer step.
    pub lr: Vec<f64>,
}

pub struct Trainer {
    cfg: TrainConfig,
    m: [Vec<f64>; 5],
    v: [Vec<f64>; 5],
    step: usize,
    total_steps: usize,
    rng: ChaCha8Rng,
    epoch: usize,
    pub log: TrainingLog,
}

impl Trainer {
    pub fn new(model: &CrfModel, cfg: TrainConfig, samples: usize) -> Result<Self> {
        cfg.validate()?;
        if samples == 0 {
            return Err(Error::InvalidInput("training set is empty".into()));
        }
        let zeros = |p: &[f64]| vec![0.0; p.len()];
        let params = model.params();
        let m = params.map(zeros);
        let v = model.params().map(zeros);
        Ok(Trainer {
            rng: ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "shuffle")),
            total_steps: cfg.total_steps(samples),
            cfg,
            m,
            v,
            step: 0,
            epoch: 0,
            log: TrainingLog::default(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn run_epoch(
        &mut self,
        model: &mut CrfModel,
        data: &[(TokenReprSequence, Vec<usize>)],
    ) -> Result<EpochStats> {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        for (b, batch) in order.chunks(self.cfg.batch_size).enumerate() {
            let mut grads = super::Gradients::zeros(model);
            let mut batch_loss = 0.0;
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let (reprs, gold) = &data[i];
                let (loss, g) = model.nll_and_grad(reprs, gold).map_err(|e| {
                    Error::NonFinite(format!("epoch {} batch {b}: {e}", self.epoch))
                })?;
                batch_loss += loss;
                grads.add_scaled(&g, scale);
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "epoch {} batch {b}: loss {batch_loss}",
                    self.epoch
                )));
            }
            total += batch_loss;
            self.apply(model, &grads);
        }
        let stats = EpochStats {
            epoch: self.epoch,
            mean_loss: total / data.len() as f64,
        };
        self.epoch += 1;
        self.log.epochs.push(stats.clone());
        Ok(stats)
    }

    fn apply(&mut self, model: &mut CrfModel, grads: &super::Gradients) {
        let lr = self.cfg.lr_at(self.step, self.total_steps);
        self.log.lr.push(lr);
        self.step += 1;
        let t = self.step as i32;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let table = grads.dense_table(model.table.rows, model.table.cols);
        let gs: [&[f64]; 5] = [
            &table,
            &grads.w_tok.data,
            &grads.w_ctx.data,
            &grads.bias,
            &grads.trans.data,
        ];
        for (((p, g), m), v) in model
            .params_mut()
            .into_iter()
            .zip(gs)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            for j in 0..p.len() {
                if !p[j].is_finite() {
                    continue;
                }
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + c.eps);
                let decayed = p[j] * (1.0 - lr * c.weight_decay);
                p[j] = (decayed - lr * update) as f32 as f64;
            }
        }
    }

    /// Runs all configured epochs.
    pub fn train(
        mut model: CrfModel,
        data: &[(TokenReprSequence, Vec<usize>)],
        cfg: TrainConfig,
    ) -> Result<(CrfModel, TrainingLog)> {
        let mut trainer = Trainer::new(&model, cfg, data.len())?;
        for _ in 0..trainer.cfg.epochs {
            trainer.run_epoch(&mut model, data)?;
        }
        Ok((model, trainer.log))
    }
}
