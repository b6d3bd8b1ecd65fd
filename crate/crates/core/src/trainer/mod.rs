// SPDX-License-Identifier: MIT OR Apache-2.0

//! Toy factual-recall training for the SSD and softmax-attention kinds.
//!
//! Optimizer: Adam (β₁ = 0.9, β₂ = 0.999, ε = 1e-8 by default) with global
//! gradient-norm clipping and a linear-warmup + cosine-decay learning rate.
//! Loss: cross-entropy of the answer token at the final position only.
//! Everything is single-threaded and seeded, so a run is bitwise
//! reproducible.

mod backprop;
mod task;

pub use backprop::{batch_loss, loss_and_grads, zero_grads};
pub use task::{generate_task, SyntheticFactTask, TaskConfig, BOS, QUERY};

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::PromptRecord;
use crate::model::{final_argmax, LayerKind, ModelSpec, ModelWeights};
use crate::numerics::Rng;
use crate::ssm::SsdConfig;
use crate::transformer::AttentionConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Linear warmup to `peak`, then cosine decay to `peak · final_fraction`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_steps: usize,
    pub final_fraction: f64,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        Self {
            peak: lr,
            warmup_steps: 0,
            final_fraction: 1.0,
        }
    }

    pub fn at(&self, step: usize, total: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = total.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.peak * (self.final_fraction + (1.0 - self.final_fraction) * cosine)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    #[serde(default)]
    pub adam: AdamConfig,
    /// Global gradient-norm ceiling; `None` disables clipping.
    #[serde(default)]
    pub clip_norm: Option<f64>,
    /// Evaluate every this many steps (and after the last one).
    pub eval_every: usize,
    /// Stop early once eval accuracy reaches this value.
    #[serde(default)]
    pub target_accuracy: Option<f64>,
    /// Scale of the random mixer initialization.
    pub init_scale: f64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch_size and eval_every must be positive".into()));
        }
        if !(self.lr.peak > 0.0 && self.lr.peak.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be positive",
                self.lr.peak
            )));
        }
        if !(0.0..=1.0).contains(&self.lr.final_fraction) {
            return Err(Error::Config("final_fraction must lie in [0, 1]".into()));
        }
        let a = self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || a.eps <= 0.0 {
            return Err(Error::Config("invalid Adam hyperparameters".into()));
        }
        if let Some(t) = self.target_accuracy {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Config(format!("target accuracy {t} outside [0, 1]")));
            }
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return Err(Error::Config("init_scale must be positive".into()));
        }
        Ok(())
    }

    /// Budget used for the one-fact task.
    pub fn one_fact(seed: u64) -> Self {
        Self {
            seed,
            steps: 200,
            batch_size: 1,
            lr: LrSchedule::constant(1e-2),
            adam: AdamConfig::default(),
            clip_norm: Some(1.0),
            eval_every: 10,
            target_accuracy: Some(1.0),
            init_scale: 0.1,
        }
    }

    /// Budget used for the 512-fact task.
    pub fn facts_512(seed: u64) -> Self {
        Self {
            seed,
            steps: 3000,
            batch_size: 32,
            lr: LrSchedule {
                peak: 3e-3,
                warmup_steps: 100,
                final_fraction: 0.1,
            },
            adam: AdamConfig::default(),
            clip_norm: Some(1.0),
            eval_every: 100,
            target_accuracy: Some(1.0),
            init_scale: 0.1,
        }
    }
}

/// SSD model used for the recall task: 4 heads of width 16.
pub fn toy_ssd_spec(vocab_size: usize, num_layers: usize, embed_dim: usize) -> ModelSpec {
    ModelSpec {
        vocab_size,
        embed_dim,
        num_layers,
        layer: LayerKind::Ssd(SsdConfig {
            heads: 4,
            state_dim: 16,
            head_dim: 16,
            skip: true,
        }),
        tied_unembedding: false,
        norm_eps: 1e-5,
    }
}

/// Softmax-attention counterpart of [`toy_ssd_spec`].
pub fn toy_attention_spec(vocab_size: usize, num_layers: usize, embed_dim: usize) -> ModelSpec {
    ModelSpec {
        vocab_size,
        embed_dim,
        num_layers,
        layer: LayerKind::SoftmaxAttention(AttentionConfig {
            heads: 4,
            ff_dim: 2 * embed_dim,
            max_positions: 16,
        }),
        tied_unembedding: false,
        norm_eps: 1e-5,
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_accuracy: Option<f64>,
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: ModelWeights,
    pub steps_run: usize,
    pub final_accuracy: f64,
    pub reached_target: bool,
}

/// Fraction of records whose final-position argmax is the answer token.
pub fn accuracy(weights: &ModelWeights, records: &[PromptRecord]) -> Result<f64> {
    if records.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for r in records {
        if final_argmax(&weights.forward(&r.token_ids)?) == r.answer_token {
            hits += 1;
        }
    }
    Ok(hits as f64 / records.len() as f64)
}

struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    fn new(cfg: AdamConfig, weights: &ModelWeights) -> Self {
        let zeros: Vec<Vec<f64>> = weights.named_params().iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self {
            cfg,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn step(&mut self, weights: &mut ModelWeights, grads: &ModelWeights, lr: f64, clip: f64) {
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        let grads = grads.named_params();
        for (i, (_, w)) in weights.named_params_mut().into_iter().enumerate() {
            let g = grads[i].1.data();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, wj) in w.data_mut().iter_mut().enumerate() {
                let gj = g[j] * clip;
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                *wj -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
            }
        }
    }
}

fn grad_norm(grads: &ModelWeights) -> f64 {
    grads
        .named_params()
        .iter()
        .flat_map(|(_, t)| t.data().iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// The untrained starting point of a run with `config`.
pub fn initial_weights(spec: &ModelSpec, config: &TrainConfig) -> Result<ModelWeights> {
    ModelWeights::random(spec, config.init_scale, &mut Rng::new(config.seed).fork(0))
}

/// Trains from a fresh initialization drawn from `config.seed`. Metrics are
/// appended to `log` as they are produced, so a failing run leaves its
/// partial log behind.
pub fn train_records(
    spec: &ModelSpec,
    train: &[PromptRecord],
    eval: &[PromptRecord],
    config: &TrainConfig,
    log: &mut Vec<MetricsRow>,
) -> Result<TrainOutcome> {
    config.validate()?;
    spec.validate()?;
    if matches!(spec.layer, LayerKind::Mamba1(_)) {
        return Err(Error::Config(
            "only ssd and softmax_attention models are trainable".into(),
        ));
    }
    if train.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    let mut weights = initial_weights(spec, config)?;
    let mut order_rng = Rng::new(config.seed).fork(1);
    let mut adam = Adam::new(config.adam, &weights);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut last_accuracy = 0.0;
    let mut steps_run = 0;
    for step in 0..config.steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size.min(train.len()) {
            if cursor == order.len() {
                order = (0..train.len()).collect();
                order_rng.shuffle(&mut order);
                cursor = 0;
            }
            batch.push(train[order[cursor]].clone());
            cursor += 1;
        }
        let (loss, grads) = loss_and_grads(&weights, &batch).map_err(|e| Error::Training {
            step,
            reason: e.to_string(),
        })?;
        let norm = grad_norm(&grads);
        if !norm.is_finite() {
            return Err(Error::Training {
                step,
                reason: format!("non-finite gradient norm {norm}"),
            });
        }
        let clip = match config.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        let lr = config.lr.at(step, config.steps);
        adam.step(&mut weights, &grads, lr, clip);
        steps_run = step + 1;
        let evaluate = steps_run % config.eval_every == 0 || steps_run == config.steps;
        let eval_accuracy = if evaluate {
            last_accuracy = accuracy(&weights, eval)?;
            Some(last_accuracy)
        } else {
            None
        };
        log.push(MetricsRow {
            step,
            loss,
            lr,
            eval_accuracy,
        });
        if let (Some(target), Some(acc)) = (config.target_accuracy, eval_accuracy) {
            if acc >= target {
                break;
            }
        }
    }
    if config.steps == 0 {
        last_accuracy = accuracy(&weights, eval)?;
    }
    Ok(TrainOutcome {
        weights,
        steps_run,
        final_accuracy: last_accuracy,
        reached_target: config.target_accuracy.is_none_or(|t| last_accuracy >= t),
    })
}

/// [`train_records`] on a task's train/eval splits.
pub fn train(
    spec: &ModelSpec,
    task: &SyntheticFactTask,
    config: &TrainConfig,
) -> Result<(TrainOutcome, Vec<MetricsRow>)> {
    if spec.vocab_size < task.vocab_size {
        return Err(Error::Config(format!(
            "model vocabulary {} smaller than task vocabulary {}",
            spec.vocab_size, task.vocab_size
        )));
    }
    let records = task.records();
    let mut log = Vec::new();
    let out = train_records(spec, &records, &records, config, &mut log)?;
    Ok((out, log))
}
