//! Desk-scale training loop, logs and frozen-feature extraction.

mod data;

pub use data::{
    gen_synthetic, load_idx, nearest_template_accuracy, parse_idx_images, parse_idx_labels, Dataset, SyntheticSpec,
};

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{
    clip_global_norm, decay_params, default_rules, polyak_update, DecayRules, DecayType, OptimConfig, Optimizer,
    OptimizerMode, ScheduleConfig, WeightDecayRule,
};
use crate::par::{self, Exec};
use crate::probe::FeatureSet;
use crate::tensor::{Tape, Tensor};
use crate::vit::{forward, init_params, ParamSet, ShapeConfig};

/// Schedule block of the training config (the learning rate and step count
/// live at the top level).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub decay_type: DecayType,
    #[serde(default = "default_timescale")]
    pub timescale: u64,
    #[serde(default)]
    pub warmup_steps: u64,
    #[serde(default)]
    pub cooldown_steps: u64,
}

fn default_timescale() -> u64 {
    10_000
}

fn default_wd_mults() -> Vec<(String, f64)> {
    default_rules().into_iter().map(|r| (r.pattern, r.multiplier)).collect()
}

fn default_eval_every() -> u64 {
    50
}

/// Training run description. Field names follow the big_vision config
/// conventions (`lr`, `wd`, `wd_mults`, `schedule`, `grad_clip_norm`, ...).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ShapeConfig,
    pub optimizer: OptimizerMode,
    /// Optimizer hyper-parameters, including `grad_clip_norm`.
    #[serde(flatten)]
    pub optim: OptimConfig,
    pub lr: f64,
    /// Per-step decay coefficient with the learning rate folded in.
    pub wd: f64,
    #[serde(default = "default_wd_mults")]
    pub wd_mults: Vec<(String, f64)>,
    pub schedule: ScheduleSpec,
    pub total_steps: u64,
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub polyak_decay: Option<f64>,
    /// Stop once full-training-set accuracy reaches this value (checked
    /// every `eval_every` steps).
    #[serde(default)]
    pub stop_at_accuracy: Option<f64>,
    #[serde(default = "default_eval_every")]
    pub eval_every: u64,
}

impl TrainConfig {
    /// Micro model, reference optimizer settings and a short warmup.
    pub fn micro(model: ShapeConfig, optimizer: OptimizerMode, total_steps: u64) -> Self {
        TrainConfig {
            model,
            optimizer,
            optim: OptimConfig::default(),
            lr: 3e-3,
            wd: 0.03 * 3e-3,
            wd_mults: default_wd_mults(),
            schedule: ScheduleSpec {
                decay_type: DecayType::Rsqrt,
                timescale: 100,
                warmup_steps: 50,
                cooldown_steps: 0,
            },
            total_steps,
            batch_size: 16,
            seed: 0,
            polyak_decay: None,
            stop_at_accuracy: None,
            eval_every: default_eval_every(),
        }
    }

    pub fn schedule_config(&self) -> ScheduleConfig {
        ScheduleConfig {
            base_lr: self.lr,
            warmup_steps: self.schedule.warmup_steps,
            decay_type: self.schedule.decay_type,
            timescale: self.schedule.timescale,
            total_steps: Some(self.total_steps),
            cooldown_steps: self.schedule.cooldown_steps,
        }
    }

    pub fn decay_rules(&self) -> Vec<WeightDecayRule> {
        self.wd_mults.iter().map(|(p, m)| WeightDecayRule::new(p.clone(), *m)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optim.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.total_steps > 0 {
            self.schedule_config().validate()?;
        }
        if let Some(d) = self.polyak_decay {
            if !(0.0..1.0).contains(&d) {
                return Err(Error::Config(format!("polyak_decay must be in [0, 1), got {d}")));
            }
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be >= 1".into()));
        }
        DecayRules::new(&self.decay_rules())?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LogRow {
    pub step: u64,
    /// Loss of the batch before this step's update.
    pub loss: f64,
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,lr,grad_norm\n");
        for r in &self.rows {
            writeln!(s, "{},{},{},{}", r.step, r.loss, r.lr, r.grad_norm).unwrap();
        }
        s
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.rows.last().map(|r| r.loss)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: ParamSet,
    /// Polyak average, when enabled.
    pub averaged: Option<ParamSet>,
    pub log: TrainLog,
    pub steps_run: u64,
}

fn check_data(shape: &ShapeConfig, data: &Dataset) -> Result<()> {
    if data.res() != shape.image_res || data.channels() != shape.channels {
        return Err(Error::Shape(format!(
            "data is {}x{}x{}, model expects {}x{}x{}",
            data.res(),
            data.res(),
            data.channels(),
            shape.image_res,
            shape.image_res,
            shape.channels
        )));
    }
    if data.classes > shape.num_classes {
        return Err(Error::Shape(format!("data has {} classes, model {}", data.classes, shape.num_classes)));
    }
    if data.is_empty() {
        return Err(Error::Contract("empty dataset".into()));
    }
    Ok(())
}

/// Seeded epoch shuffling: consecutive batches walk a fresh permutation.
struct Batcher {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl Batcher {
    fn new(n: usize, seed: u64) -> Self {
        let mut b =
            Batcher { rng: ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15), order: (0..n).collect(), pos: n };
        b.reshuffle();
        b
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    fn next(&mut self, batch: usize) -> Vec<usize> {
        let mut idx = Vec::with_capacity(batch);
        while idx.len() < batch {
            if self.pos == self.order.len() {
                self.reshuffle();
            }
            idx.push(self.order[self.pos]);
            self.pos += 1;
        }
        idx
    }
}

/// Loss and per-parameter gradients on one batch.
pub fn loss_and_grads(
    params: &ParamSet,
    shape: &ShapeConfig,
    images: &Tensor,
    labels: &[usize],
) -> Result<(f64, ParamSet)> {
    let mut tape = Tape::new();
    let vars = params.attach(&mut tape, true);
    let out = forward(&mut tape, &vars, images, shape)?;
    let loss = tape.softmax_cross_entropy(out.logits, labels)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Ok((value, ParamSet::new()));
    }
    let g = tape.backward(loss)?;
    let mut grads = ParamSet::new();
    for ((name, var), (_, p)) in vars.iter().zip(params.iter()) {
        grads.insert(name, g.get_or_zeros(var, p))?;
    }
    Ok((value, grads))
}

/// Run the training loop: batch, forward, cross-entropy, backward, global
/// norm clip, optimizer step at the scheduled rate, decoupled weight decay,
/// optional Polyak averaging. Deterministic for a given config.
pub fn train(config: &TrainConfig, data: &Dataset) -> Result<TrainOutcome> {
    config.validate()?;
    check_data(&config.model, data)?;
    let shape = &config.model;
    let mut params = init_params(shape, config.seed)?;
    let mut averaged = config.polyak_decay.map(|_| params.clone());
    let mut opt = Optimizer::new(config.optimizer, config.optim.clone())?;
    let rules = DecayRules::new(&config.decay_rules())?;
    let schedule = config.schedule_config();
    let mut batcher = Batcher::new(data.len(), config.seed);
    let mut log = TrainLog::default();
    let mut steps_run = 0;

    for step in 1..=config.total_steps {
        let idx = batcher.next(config.batch_size);
        let images = data.gather(&idx);
        let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
        let (loss, mut grads) = loss_and_grads(&params, shape, &images, &labels)?;
        let last_good = (step > 1).then(|| step as usize - 1);
        if !loss.is_finite() {
            return Err(Error::Diverged { step: step as usize, last_good });
        }
        let (grad_norm, _) = clip_global_norm(grads.iter_mut().map(|(_, t)| t), config.optim.grad_clip_norm)?;
        let lr = schedule.lr_at(step);
        match opt.step(&mut params, &grads, lr) {
            Err(Error::NonFiniteGradient(_)) => return Err(Error::Diverged { step: step as usize, last_good }),
            other => other?,
        }
        decay_params(&mut params, &rules, config.wd)?;
        if let (Some(avg), Some(d)) = (averaged.as_mut(), config.polyak_decay) {
            polyak_update(avg, &params, d)?;
        }
        if !params.is_finite() {
            return Err(Error::Diverged { step: step as usize, last_good });
        }
        log.rows.push(LogRow { step, loss, lr, grad_norm });
        steps_run = step;
        if let Some(target) = config.stop_at_accuracy {
            if step % config.eval_every == 0 && accuracy(&params, shape, data, Exec::Sequential)? >= target {
                break;
            }
        }
    }
    Ok(TrainOutcome { params, averaged, log, steps_run })
}

const EVAL_CHUNK: usize = 64;

fn eval_chunks<R: Send>(
    params: &ParamSet,
    shape: &ShapeConfig,
    data: &Dataset,
    exec: Exec,
    f: impl Fn(&Tape, crate::vit::Forward) -> R + Sync + Send,
) -> Result<Vec<R>> {
    check_data(shape, data)?;
    let chunks: Vec<Vec<usize>> =
        (0..data.len()).collect::<Vec<_>>().chunks(EVAL_CHUNK).map(<[usize]>::to_vec).collect();
    par::map(exec, &chunks, |idx| -> Result<R> {
        let mut tape = Tape::new();
        let vars = params.attach(&mut tape, false);
        let out = forward(&mut tape, &vars, &data.gather(idx), shape)?;
        Ok(f(&tape, out))
    })
    .into_iter()
    .collect()
}

/// Arg-max predictions (lowest index wins ties).
pub fn predict(params: &ParamSet, shape: &ShapeConfig, data: &Dataset, exec: Exec) -> Result<Vec<usize>> {
    let parts = eval_chunks(params, shape, data, exec, |tape, out| {
        let logits = tape.value(out.logits);
        let c = logits.shape()[1];
        logits
            .data()
            .chunks(c)
            .map(|row| {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect::<Vec<_>>()
    })?;
    Ok(parts.concat())
}

pub fn accuracy(params: &ParamSet, shape: &ShapeConfig, data: &Dataset, exec: Exec) -> Result<f64> {
    let pred = predict(params, shape, data, exec)?;
    let ok = pred.iter().zip(&data.labels).filter(|(p, l)| p == l).count();
    Ok(ok as f64 / data.len() as f64)
}

/// Pooled, post-norm features (the classifier input) for every image.
pub fn extract_features(params: &ParamSet, shape: &ShapeConfig, data: &Dataset, exec: Exec) -> Result<FeatureSet> {
    let parts = eval_chunks(params, shape, data, exec, |tape, out| tape.value(out.features).data().to_vec())?;
    let x = Tensor::new(vec![data.len(), shape.width], parts.concat())?;
    FeatureSet::new(x, data.labels.clone(), data.classes)
}
