//! Optimizer, learning-rate schedule and the training loop.

mod optim;
mod schedule;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use optim::{AdamWConfig, Moments, OptimizerState, Update};
pub use schedule::{lr_at, ScheduleConfig, DEFAULT_LR_MAX, DEFAULT_LR_MIN};

use crate::data::{batches, Batch};
use crate::error::{AdeError, Result};
use crate::eval::CorpusScore;
use crate::model::Model;
use crate::numerics::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "TrainConfig::default_tokens_per_batch")]
    pub tokens_per_batch: usize,
    /// Tokens per packed row; the model sees `seq_len - 1` of them.
    #[serde(default = "TrainConfig::default_seq_len")]
    pub seq_len: usize,
    pub total_tokens: usize,
    /// Fraction of the run between evaluations and checkpoints.
    #[serde(default = "TrainConfig::default_eval_every")]
    pub eval_every: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "TrainConfig::default_lr_max")]
    pub lr_max: f64,
    #[serde(default = "TrainConfig::default_lr_min")]
    pub lr_min: f64,
    #[serde(default)]
    pub warmup_steps: u64,
    #[serde(default)]
    pub optimizer: AdamWConfig,
}

impl TrainConfig {
    fn default_tokens_per_batch() -> usize {
        16_384
    }
    fn default_seq_len() -> usize {
        129
    }
    fn default_eval_every() -> f64 {
        0.05
    }
    fn default_lr_max() -> f64 {
        DEFAULT_LR_MAX
    }
    fn default_lr_min() -> f64 {
        DEFAULT_LR_MIN
    }

    pub fn new(total_tokens: usize) -> Self {
        TrainConfig {
            tokens_per_batch: Self::default_tokens_per_batch(),
            seq_len: Self::default_seq_len(),
            total_tokens,
            eval_every: Self::default_eval_every(),
            seed: 0,
            lr_max: DEFAULT_LR_MAX,
            lr_min: DEFAULT_LR_MIN,
            warmup_steps: 0,
            optimizer: AdamWConfig::default(),
        }
    }

    pub fn rows(&self) -> usize {
        self.tokens_per_batch / self.seq_len.max(1)
    }

    pub fn batch_tokens(&self) -> usize {
        self.rows() * self.seq_len
    }

    pub fn total_steps(&self) -> u64 {
        (self.total_tokens / self.batch_tokens().max(1)) as u64
    }

    pub fn intervals(&self) -> usize {
        (1.0 / self.eval_every).round() as usize
    }

    pub fn schedule(&self) -> ScheduleConfig {
        ScheduleConfig {
            lr_max: self.lr_max,
            lr_min: self.lr_min,
            total_steps: self.total_steps(),
            warmup_steps: self.warmup_steps,
        }
    }

    /// Step count at the end of interval `j` (1-based).
    pub fn boundary(&self, j: usize) -> u64 {
        self.total_steps() * j as u64 / self.intervals() as u64
    }

    pub fn validate(&self) -> Result<()> {
        if self.seq_len < 2 || self.tokens_per_batch < self.seq_len {
            return Err(AdeError::config(
                "seq_len",
                format!("need 2 <= seq_len <= tokens_per_batch ({})", self.tokens_per_batch),
            ));
        }
        let n = self.intervals();
        if self.eval_every.is_nan()
            || self.eval_every <= 0.0
            || n < 2
            || (n as f64 * self.eval_every - 1.0).abs() > 1e-9
        {
            return Err(AdeError::config(
                "eval_every",
                format!("must be 1/n for an integer n >= 2, got {}", self.eval_every),
            ));
        }
        if self.total_steps() < n as u64 {
            return Err(AdeError::config(
                "total_tokens",
                format!(
                    "{} tokens give {} steps, fewer than {n} intervals",
                    self.total_tokens,
                    self.total_steps()
                ),
            ));
        }
        self.schedule().validate()
    }

    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_vec(self).expect("serializable").as_slice())
    }
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn tokens_hash(tokens: &[u32]) -> String {
    let mut h = Sha256::new();
    for t in tokens {
        h.update(t.to_le_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 0-based index of the optimizer step.
    pub step: u64,
    /// Tokens consumed after this step.
    pub tokens_seen: u64,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub interval: usize,
    pub step: u64,
    pub tokens_seen: u64,
    pub scores: Vec<CorpusScore>,
}

impl CurvePoint {
    pub fn score(&self, corpus: &str) -> Option<&CorpusScore> {
        self.scores.iter().find(|s| s.corpus == corpus)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub config_hash: String,
    pub seed: u64,
    pub stream_hash: String,
    pub train: TrainConfig,
    pub total_steps: u64,
    pub trainable: Vec<String>,
    pub steps: Vec<StepRecord>,
    /// Evaluation before the first step (interval 0).
    pub initial: CurvePoint,
    /// One point per interval boundary, intervals 1..=n.
    pub curve: Vec<CurvePoint>,
}

impl RunLog {
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }

    /// Initial point followed by the interval points.
    pub fn all_points(&self) -> Vec<&CurvePoint> {
        std::iter::once(&self.initial).chain(&self.curve).collect()
    }

    /// Line-delimited JSON, one record per step.
    pub fn steps_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.steps {
            out.push_str(&serde_json::to_string(s).expect("serializable"));
            out.push('\n');
        }
        out
    }

    /// `interval,tokens_seen,corpus,perplexity,accuracy`, initial point first.
    pub fn curve_csv(&self) -> String {
        let mut out = String::from("interval,tokens_seen,corpus,perplexity,accuracy\n");
        for p in self.all_points() {
            for s in &p.scores {
                let acc = s.accuracy.map(|a| format!("{a:.6}")).unwrap_or_default();
                out.push_str(&format!(
                    "{},{},{},{:.6},{}\n",
                    p.interval, p.tokens_seen, s.corpus, s.perplexity, acc
                ));
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub grad_norm: f64,
}

fn trainable_signature(model: &Model) -> Vec<(String, Vec<usize>)> {
    model
        .params()
        .into_iter()
        .filter(|(_, p)| p.trainable)
        .map(|(n, p)| (n, p.value.shape().to_vec()))
        .collect()
}

/// Forward, loss, backward and one optimizer update on the trainable
/// tensors. Frozen tensors are never written.
pub fn train_step(
    model: &mut Model,
    batch: &Batch,
    opt: &mut OptimizerState,
    lr: f64,
    step: u64,
) -> Result<StepOutcome> {
    let mut tape = Tape::new();
    let (pass, loss_var) = model.loss_on_tape(&mut tape, &batch.tokens, batch.rows, true)?;
    let loss = tape.value(loss_var).item() as f64;
    if !loss.is_finite() {
        return Err(AdeError::NonFinite { step, lr, loss });
    }
    let mut grads = tape.backward(loss_var)?;
    drop(tape);
    opt.sync(&trainable_signature(model));
    let mut owned: Vec<(String, Tensor<f32>, bool)> = Vec::new();
    for ((name, p), &var) in model.params().into_iter().zip(&pass.params) {
        if p.trainable {
            let g = grads.take(var).unwrap_or_else(|| Tensor::zeros(p.value.shape()));
            owned.push((name, g, p.value.rank() >= 2));
        }
    }
    if owned.is_empty() {
        return Ok(StepOutcome { loss, grad_norm: 0.0 });
    }
    let mut params = model.params_mut();
    params.retain(|(_, p)| p.trainable);
    let updates = params
        .into_iter()
        .zip(&owned)
        .map(|((name, p), (gname, g, decay))| {
            debug_assert_eq!(&name, gname);
            Update {
                name: gname,
                value: &mut p.value,
                grad: g,
                decay: *decay,
            }
        })
        .collect();
    let grad_norm = opt
        .apply(updates, lr)
        .map_err(|_| AdeError::NonFinite { step, lr, loss })?;
    Ok(StepOutcome { loss, grad_norm })
}

/// What a checkpoint hook sees at each interval boundary.
pub struct IntervalState<'a> {
    pub interval: usize,
    pub model: &'a Model,
    pub optimizer: &'a OptimizerState,
    pub log: &'a RunLog,
}

pub type Evaluator<'a> = dyn FnMut(&Model) -> Result<Vec<CorpusScore>> + 'a;
pub type IntervalHook<'a> = dyn FnMut(&IntervalState<'_>) -> Result<()> + 'a;

pub struct RunHooks<'a, 'b, 'c> {
    pub evaluate: &'a mut Evaluator<'b>,
    /// Called after the interval's evaluation, including interval 0.
    pub on_interval: Option<&'a mut IntervalHook<'c>>,
}

/// Trains on the first `total_steps` batches of `stream`. `resume` is a log
/// from a checkpoint of the same config and stream; training continues at
/// the step after its last record, and `model`/`opt` must be the state
/// saved with it.
pub fn run(
    model: &mut Model,
    opt: &mut OptimizerState,
    cfg: &TrainConfig,
    stream: &[u32],
    hooks: &mut RunHooks<'_, '_, '_>,
    resume: Option<RunLog>,
) -> Result<RunLog> {
    cfg.validate()?;
    if cfg.seq_len - 1 > model.config.max_seq_len {
        return Err(AdeError::config(
            "seq_len",
            format!(
                "{} exceeds max_seq_len + 1 = {}",
                cfg.seq_len,
                model.config.max_seq_len + 1
            ),
        ));
    }
    let total = cfg.total_steps();
    let need = total as usize * cfg.batch_tokens();
    if stream.len() < need {
        return Err(AdeError::usage(format!(
            "stream has {} tokens, run needs {need}",
            stream.len()
        )));
    }
    let used = &stream[..need];
    let stream_hash = tokens_hash(used);
    let all_batches = batches(used, cfg.tokens_per_batch, cfg.seq_len)?;
    let schedule = cfg.schedule();

    let mut log = match resume {
        Some(log) => {
            if log.config_hash != cfg.hash() || log.stream_hash != stream_hash {
                return Err(AdeError::usage(
                    "resume log was produced by a different config or stream",
                ));
            }
            log
        }
        None => {
            let initial = CurvePoint {
                interval: 0,
                step: 0,
                tokens_seen: 0,
                scores: (hooks.evaluate)(model)?,
            };
            let log = RunLog {
                config_hash: cfg.hash(),
                seed: cfg.seed,
                stream_hash: stream_hash.clone(),
                train: cfg.clone(),
                total_steps: total,
                trainable: model.trainable_names().into_iter().collect(),
                steps: Vec::new(),
                initial,
                curve: Vec::new(),
            };
            if let Some(hook) = hooks.on_interval.as_mut() {
                hook(&IntervalState {
                    interval: 0,
                    model,
                    optimizer: opt,
                    log: &log,
                })?;
            }
            log
        }
    };

    let start = log.steps.len() as u64;
    for step in start..total {
        let lr = lr_at(step, &schedule)?;
        let out = train_step(model, &all_batches[step as usize], opt, lr, step)?;
        log.steps.push(StepRecord {
            step,
            tokens_seen: (step + 1) * cfg.batch_tokens() as u64,
            lr,
            loss: out.loss,
            grad_norm: out.grad_norm,
        });
        let done = step + 1;
        let interval = log.curve.len() + 1;
        if interval <= cfg.intervals() && done == cfg.boundary(interval) {
            let scores = (hooks.evaluate)(model)?;
            log.curve.push(CurvePoint {
                interval,
                step: done,
                tokens_seen: done * cfg.batch_tokens() as u64,
                scores,
            });
            if let Some(hook) = hooks.on_interval.as_mut() {
                hook(&IntervalState {
                    interval,
                    model,
                    optimizer: opt,
                    log: &log,
                })?;
            }
        }
    }
    Ok(log)
}

/// Convenience wrapper: fresh optimizer, no checkpoints.
pub fn run_simple(
    model: &mut Model,
    cfg: &TrainConfig,
    stream: &[u32],
    evaluate: &mut Evaluator<'_>,
) -> Result<RunLog> {
    let mut opt = OptimizerState::new(cfg.optimizer.clone());
    let mut hooks = RunHooks {
        evaluate,
        on_interval: None,
    };
    run(model, &mut opt, cfg, stream, &mut hooks, None)
}
