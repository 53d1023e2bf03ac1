//! Noise-prediction training with modality-indicator dropout.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::batch::{ImageBatch, ModalityIndicator};
use crate::checkpoint;
use crate::conditioning::{condition, FilterConfig};
use crate::denoiser::{DenoiserParams, EpsModel};
use crate::error::{Error, Result};
use crate::optim::{clip_global_norm, AdamW, AdamWConfig};
use crate::schedule::{NoiseSchedule, ScheduleConfig};
use crate::synthdata::{write_text, DiffusionDataset};
use crate::tensor::{Scalar, Tensor};

/// The condition filter is part of the denoiser config, so a trained model always
/// carries the filter it was trained with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Probability of replacing an item's indicator with `Null`.
    pub p_uncond: f64,
    /// Global gradient-norm ceiling; non-positive disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    /// Write a checkpoint every this many steps (0: final only).
    pub checkpoint_every: usize,
    pub schedule: ScheduleConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 8,
            learning_rate: 1e-4,
            weight_decay: 0.01,
            p_uncond: 0.1,
            grad_clip: 1.0,
            seed: 0,
            checkpoint_every: 0,
            schedule: ScheduleConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.p_uncond) {
            return Err(Error::Config(format!("p_uncond must lie in [0, 1), got {}", self.p_uncond)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        self.schedule.build().map(|_| ())
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// Everything the denoiser sees for one training batch.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisedBatch {
    pub x_t: Tensor<f32>,
    pub eps: Tensor<f32>,
    pub t: Vec<usize>,
    pub cond: Option<Tensor<f32>>,
    /// Indicators after dropout.
    pub e: Vec<ModalityIndicator>,
}

/// Replaces each indicator with `Null` independently with probability `p_uncond`.
pub fn drop_indicators<R: Rng>(e: &[ModalityIndicator], p_uncond: f64, rng: &mut R) -> Vec<ModalityIndicator> {
    e.iter()
        .map(|&m| if rng.random::<f64>() < p_uncond { ModalityIndicator::Null } else { m })
        .collect()
}

pub fn standard_normal<F: Scalar, R: Rng>(shape: &[usize], rng: &mut R) -> Tensor<F> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| F::of(rng.sample::<f64, _>(StandardNormal))).collect();
    Tensor::from_vec(shape, data).expect("shape matches")
}

/// Samples timesteps, noise and indicator dropout for `batch`. The condition is
/// computed from the clean images and is never dropped.
pub fn noise_batch<R: Rng>(
    batch: &ImageBatch,
    cond: Option<&Tensor<f32>>,
    sched: &NoiseSchedule,
    p_uncond: f64,
    rng: &mut R,
) -> Result<NoisedBatch> {
    if batch.modality.iter().any(|m| !m.is_data_modality()) {
        return Err(Error::Contract("training items must carry their true modality".into()));
    }
    let n = batch.len();
    let t: Vec<usize> = (0..n).map(|_| rng.random_range(1..=sched.timesteps())).collect();
    let eps = standard_normal(batch.data.shape(), rng);
    let e = drop_indicators(&batch.modality, p_uncond, rng);
    let x_t = sched.forward_noise(&batch.data, &t, &eps)?;
    Ok(NoisedBatch {
        x_t,
        eps,
        t,
        cond: cond.cloned(),
        e,
    })
}

/// Per-element mean squared error between predicted and true noise.
pub fn eps_loss<M: EpsModel + ?Sized>(model: &M, nb: &NoisedBatch) -> Result<f64> {
    let pred = model.predict_eps(&nb.x_t, &nb.t, nb.cond.as_ref(), &nb.e)?;
    pred.expect_same_shape(&nb.eps)?;
    let sse: f64 = pred
        .data()
        .iter()
        .zip(nb.eps.data())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum();
    Ok(sse / pred.numel() as f64)
}

pub fn conditions_for(batch: &ImageBatch, filter: Option<&FilterConfig>) -> Result<Option<Tensor<f32>>> {
    filter.map(|f| condition(batch, f).map(|c| c.data)).transpose()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Owns the parameters, optimizer state and RNG of one training run.
pub struct Trainer {
    params: DenoiserParams<f32>,
    opt: AdamW<f32>,
    sched: NoiseSchedule,
    cfg: TrainConfig,
    rng: ChaCha8Rng,
    step: usize,
}

impl Trainer {
    pub fn new(params: DenoiserParams<f32>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let opt = AdamW::new(cfg.adamw(), params.store());
        Ok(Self {
            params,
            opt,
            sched: cfg.schedule.build()?,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7EA1),
            cfg,
            step: 0,
        })
    }

    pub fn params(&self) -> &DenoiserParams<f32> {
        &self.params
    }

    pub fn into_params(self) -> DenoiserParams<f32> {
        self.params
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    /// One optimizer step on `batch`; `cond` must hold its precomputed conditions
    /// when the model takes them.
    pub fn step(&mut self, batch: &ImageBatch, cond: Option<&Tensor<f32>>) -> Result<f64> {
        let nb = noise_batch(batch, cond, &self.sched, self.cfg.p_uncond, &mut self.rng)?;
        let mut g = Graph::new(self.params.store());
        let x = g.input(nb.x_t.clone());
        let c = nb.cond.clone().map(|c| g.input(c));
        let out = self.params.forward(&mut g, x, &nb.t, c, &nb.e)?;
        let target = g.input(nb.eps.clone());
        let loss_var = g.mse(out, target);
        let loss = g.value(loss_var).data()[0] as f64;
        self.step += 1;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                loss,
                timesteps: nb.t,
            });
        }
        let mut grads = g.backward(loss_var).into_param_grads(self.params.store().len());
        drop(g);
        if self.cfg.grad_clip > 0.0 {
            clip_global_norm(&mut grads, self.cfg.grad_clip);
        }
        self.opt.step(self.params.store_mut(), &grads);
        Ok(loss)
    }
}

/// Where `train` writes its loss log and checkpoints.
#[derive(Debug, Clone)]
pub struct TrainOutputs {
    pub log_csv: PathBuf,
    pub ckpt_dir: PathBuf,
}

impl TrainOutputs {
    pub fn in_run_dir(run: &Path) -> Self {
        Self {
            log_csv: run.join("logs").join("train_diff.csv"),
            ckpt_dir: run.join("ckpt").join("denoiser"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub params: DenoiserParams<f32>,
    pub log: Vec<LogRow>,
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut out = String::from("step,loss,lr\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.step, r.loss, r.lr));
    }
    out
}

/// Trains `init` on `dataset` in shuffled epochs of `batch_size`.
pub fn train(
    dataset: &DiffusionDataset,
    init: DenoiserParams<f32>,
    cfg: &TrainConfig,
    outputs: Option<&TrainOutputs>,
) -> Result<TrainResult> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Empty("training dataset".into()));
    }
    for m in [ModalityIndicator::Visible, ModalityIndicator::Infrared] {
        if dataset.count(m) == 0 {
            log::warn!("dataset has no {m} images; the indicator carries no information");
        }
    }
    let filter = init.config().condition;
    let all_cond = conditions_for(&dataset.images, filter.as_ref())?;
    let mut trainer = Trainer::new(init, *cfg)?;
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0DE5);
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let mut idx = Vec::with_capacity(cfg.batch_size);
        while idx.len() < cfg.batch_size {
            if order.is_empty() {
                order = (0..dataset.len()).collect();
                order.shuffle(&mut order_rng);
            }
            idx.push(order.pop().expect("refilled"));
        }
        let batch = dataset.images.select(&idx);
        let cond = all_cond.as_ref().map(|c| c.select(&idx));
        let loss = trainer.step(&batch, cond.as_ref())?;
        log.push(LogRow {
            step,
            loss,
            lr: cfg.learning_rate,
        });
        if let Some(out) = outputs {
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step < cfg.steps {
                let dir = out.ckpt_dir.with_file_name(format!("denoiser_step{step:06}"));
                checkpoint::save_denoiser(&dir, trainer.params(), step, cfg.seed)?;
            }
        }
        if step % 50 == 0 {
            log::info!("step {step}: loss {loss:.4}");
        }
    }
    let params = trainer.into_params();
    if let Some(out) = outputs {
        write_text(&out.log_csv, &log_csv(&log))?;
        checkpoint::save_denoiser(&out.ckpt_dir, &params, cfg.steps, cfg.seed)?;
    }
    Ok(TrainResult { params, log })
}

/// Exponential moving average with smoothing `beta`, bias-corrected.
pub fn smoothed(losses: &[f64], beta: f64) -> Vec<f64> {
    let mut avg = 0.0;
    losses
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            avg = beta * avg + (1.0 - beta) * l;
            avg / (1.0 - beta.powi(i as i32 + 1))
        })
        .collect()
}
