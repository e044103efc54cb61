use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bema::{BemaHypers, BemaState, EmaSpec};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::metrics::{evaluate, Metrics};
use crate::model::{init_params, Dims, DropoutSpec, ModelParams, NormMode};
use crate::rng::stream;
use crate::task::{make_training_batch, make_validation_batch, SampleBatch, Vocabulary};

use super::loss::{batch_loss_and_grad, MaskSource};
use super::optim::{adamw_step, clip_gradients, AdamWConfig, OptimizerState};
use super::schedule::ScheduleSpec;

fn default_norm_eps() -> f64 {
    1e-6
}
fn default_batch_size() -> usize {
    128
}
fn default_val_interval() -> u64 {
    10_000
}
fn default_patience() -> u64 {
    1_000_000
}
fn default_val_size() -> usize {
    1024
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DropoutRates {
    pub p_embed: f64,
    pub p_resid: f64,
}

/// Everything that determines a single training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRunConfig {
    pub v: usize,
    /// Training input length; rows carry `s + 1` tokens.
    pub s: usize,
    pub d: usize,
    pub d_k: usize,
    pub d_v: usize,
    #[serde(default)]
    pub norm: NormMode,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
    #[serde(default)]
    pub dropout: DropoutRates,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub bema: Vec<EmaSpec>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_val_interval")]
    pub val_interval: u64,
    #[serde(default = "default_patience")]
    pub patience: u64,
    #[serde(default = "default_val_size")]
    pub val_size: usize,
    /// Include elapsed seconds in validation events. Off makes metric
    /// streams byte-comparable across runs.
    #[serde(default = "default_true")]
    pub record_wall_clock: bool,
}

impl TrainRunConfig {
    pub fn dims(&self) -> Result<Dims> {
        Dims::new(self.v, self.d, self.d_k, self.d_v)
    }

    pub fn dropout_spec(&self) -> Result<DropoutSpec> {
        DropoutSpec::training(self.dropout.p_embed, self.dropout.p_resid)
    }

    pub fn validate(&self) -> Result<()> {
        self.dims()?;
        self.dropout_spec()?;
        self.optimizer.validate()?;
        self.schedule.validate()?;
        for b in &self.bema {
            b.validate()?;
        }
        if self.s == 0 || self.s + 1 > self.v {
            return Err(Error::LengthExceedsVocabulary { len: self.s + 1, v: self.v });
        }
        if self.batch_size == 0 || self.val_size == 0 || self.val_interval == 0 {
            return Err(Error::Config("batch size, validation size and interval must be positive".into()));
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::Config(format!("norm epsilon must be positive, got {}", self.norm_eps)));
        }
        Ok(())
    }

    pub fn bema_hypers(&self) -> Vec<BemaHypers> {
        self.bema.iter().flat_map(|s| s.hypers()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BemaEval {
    #[serde(flatten)]
    pub hypers: BemaHypers,
    pub metrics: Metrics,
}

/// One line of the metric stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationEvent {
    pub step: u64,
    /// Mean training loss since the previous event; absent at step 0.
    pub loss: Option<f64>,
    pub lr: f64,
    /// Training parameters on full-length validation sequences.
    pub train: Metrics,
    /// Training parameters on sequences of the training input length.
    pub train_length: Metrics,
    pub bema: Vec<BemaEval>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub elapsed_secs: Option<f64>,
}

impl ValidationEvent {
    /// Lowest validation TVD among the training and all BEMA parameter sets.
    pub fn best_tvd(&self) -> f64 {
        self.bema.iter().map(|b| b.metrics.tvd).fold(self.train.tvd, f64::min)
    }

    pub fn best_bema(&self) -> Option<&BemaEval> {
        self.bema.iter().min_by(|a, b| a.metrics.tvd.total_cmp(&b.metrics.tvd))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub step: u64,
    pub reason: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxSteps,
    Patience,
    Diverged,
}

/// Per-metric minima over a history.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestMetrics {
    pub train: Metrics,
    pub train_length: Metrics,
    pub bema: Option<Metrics>,
}

fn elementwise_min(a: Metrics, b: Metrics) -> Metrics {
    Metrics { tvd: a.tvd.min(b.tvd), itp: a.itp.min(b.itp), itr: a.itr.min(b.itr) }
}

impl BestMetrics {
    pub fn from_history(history: &[ValidationEvent]) -> Option<BestMetrics> {
        let first = history.first()?;
        let mut best = BestMetrics { train: first.train, train_length: first.train_length, bema: None };
        for e in history {
            best.train = elementwise_min(best.train, e.train);
            best.train_length = elementwise_min(best.train_length, e.train_length);
            for b in &e.bema {
                best.bema = Some(best.bema.map_or(b.metrics, |m| elementwise_min(m, b.metrics)));
            }
        }
        Some(best)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub history: Vec<ValidationEvent>,
    pub best: Option<BestMetrics>,
    pub steps: u64,
    pub stop: StopReason,
    pub diverged: Option<Divergence>,
}

/// A training run that can be advanced in pieces, so that several runs
/// can share a validation cadence.
pub struct Trainer {
    config: TrainRunConfig,
    dropout: DropoutSpec,
    exec: Exec,
    params: ModelParams,
    opt: OptimizerState,
    bema: Vec<BemaState>,
    val_batch: SampleBatch,
    train_len_batch: SampleBatch,
    step: u64,
    loss_sum: f64,
    loss_count: u64,
    best_tvd: f64,
    best_step: u64,
    diverged: Option<Divergence>,
    history: Vec<ValidationEvent>,
    start: Instant,
}

impl Trainer {
    pub fn new(config: TrainRunConfig, exec: Exec) -> Result<Self> {
        config.validate()?;
        let dims = config.dims()?;
        let vocab = Vocabulary::new(config.v)?;
        let params = init_params(dims, config.norm, config.norm_eps, &mut stream(config.seed, "init", &[]))?;
        let theta0 = Arc::new(params.tensors.clone());
        let bema = config.bema.iter().map(|s| BemaState::new(s.clone(), theta0.clone())).collect::<Result<_>>()?;
        let val_batch = make_validation_batch(vocab, config.val_size, &mut stream(config.seed, "validation", &[]))?;
        let train_len_batch =
            SampleBatch::sample(vocab, config.s, config.val_size, &mut stream(config.seed, "validation", &[1]))?;
        Ok(Trainer {
            dropout: config.dropout_spec()?,
            opt: OptimizerState::new(config.optimizer, &params.tensors),
            exec,
            params,
            bema,
            val_batch,
            train_len_batch,
            step: 0,
            loss_sum: 0.0,
            loss_count: 0,
            best_tvd: f64::INFINITY,
            best_step: 0,
            diverged: None,
            history: Vec::new(),
            start: Instant::now(),
            config,
        })
    }

    pub fn config(&self) -> &TrainRunConfig {
        &self.config
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn history(&self) -> &[ValidationEvent] {
        &self.history
    }

    pub fn diverged(&self) -> Option<&Divergence> {
        self.diverged.as_ref()
    }

    /// Step of the last strict improvement in best validation TVD.
    pub fn best_step(&self) -> u64 {
        self.best_step
    }

    pub fn best_tvd(&self) -> f64 {
        self.best_tvd
    }

    pub fn at_max_steps(&self) -> bool {
        self.step >= self.config.schedule.max_steps
    }

    /// Every BEMA parameter set at the current step.
    pub fn bema_params(&self) -> Vec<(BemaHypers, ModelParams)> {
        self.bema
            .iter()
            .flat_map(|s| s.materialize(&self.params.tensors))
            .map(|(h, t)| (h, self.params.with_tensors(t)))
            .collect()
    }

    fn diverge(&mut self, reason: String) {
        self.diverged = Some(Divergence { step: self.step, reason });
    }

    /// One optimizer step. Does nothing once diverged.
    pub fn train_step(&mut self) -> Result<()> {
        if self.diverged.is_some() {
            return Ok(());
        }
        let vocab = Vocabulary::new(self.config.v)?;
        let mut rng = stream(self.config.seed, "train", &[self.step]);
        let batch = make_training_batch(vocab, self.config.s, self.config.batch_size, &mut rng)?;
        let masks = MaskSource { spec: self.dropout, seed: self.config.seed, step: self.step };
        let (loss, mut grads) = batch_loss_and_grad(&self.params, &batch, &masks, self.exec)?;
        if !loss.is_finite() {
            self.diverge(format!("non-finite loss {loss}"));
            return Ok(());
        }
        clip_gradients(&mut grads, self.config.optimizer.max_grad_norm);
        let lr = self.config.schedule.lr_at(self.step);
        adamw_step(&mut self.params.tensors, &grads, &mut self.opt, lr);
        self.step += 1;
        if !self.params.tensors.is_finite() {
            self.diverge("non-finite parameter".into());
            return Ok(());
        }
        for s in &mut self.bema {
            s.update(&self.params.tensors);
        }
        self.loss_sum += loss;
        self.loss_count += 1;
        Ok(())
    }

    /// Trains until `target` steps, max steps or divergence.
    pub fn advance_to(&mut self, target: u64) -> Result<()> {
        let target = target.min(self.config.schedule.max_steps);
        while self.step < target && self.diverged.is_none() {
            self.train_step()?;
        }
        Ok(())
    }

    /// Evaluates training and BEMA parameters and appends to the history.
    pub fn validate(&mut self) -> Result<&ValidationEvent> {
        let train = evaluate(&self.params, &self.val_batch, self.exec)?;
        let train_length = evaluate(&self.params, &self.train_len_batch, self.exec)?;
        let mut bema = Vec::new();
        for (hypers, p) in self.bema_params() {
            bema.push(BemaEval { hypers, metrics: evaluate(&p, &self.val_batch, self.exec)? });
        }
        let loss = (self.loss_count > 0).then(|| self.loss_sum / self.loss_count as f64);
        self.loss_sum = 0.0;
        self.loss_count = 0;
        let event = ValidationEvent {
            step: self.step,
            loss,
            lr: self.config.schedule.lr_at(self.step),
            train,
            train_length,
            bema,
            elapsed_secs: self.config.record_wall_clock.then(|| self.start.elapsed().as_secs_f64()),
        };
        if event.best_tvd() < self.best_tvd {
            self.best_tvd = event.best_tvd();
            self.best_step = self.step;
        }
        self.history.push(event);
        Ok(self.history.last().expect("just pushed"))
    }

    pub fn outcome(&self, stop: StopReason) -> TrainOutcome {
        TrainOutcome {
            history: self.history.clone(),
            best: BestMetrics::from_history(&self.history),
            steps: self.step,
            stop,
            diverged: self.diverged.clone(),
        }
    }
}

/// Runs to completion: validates at step 0 and every `val_interval`
/// steps, stops at max steps, on divergence, or after `patience` steps
/// without a new best validation TVD. `on_event` sees each event as it
/// is recorded.
pub fn train_run_with(
    config: TrainRunConfig,
    exec: Exec,
    mut on_event: impl FnMut(&ValidationEvent) -> Result<()>,
) -> Result<(TrainOutcome, Trainer)> {
    let mut t = Trainer::new(config, exec)?;
    on_event(t.validate()?)?;
    let stop = loop {
        if t.at_max_steps() {
            break StopReason::MaxSteps;
        }
        let next = t.step() + t.config.val_interval;
        t.advance_to(next)?;
        if t.diverged().is_some() {
            break StopReason::Diverged;
        }
        on_event(t.validate()?)?;
        if t.step() - t.best_step() >= t.config.patience {
            break StopReason::Patience;
        }
    };
    Ok((t.outcome(stop), t))
}

pub fn train_run(config: TrainRunConfig, exec: Exec) -> Result<TrainOutcome> {
    Ok(train_run_with(config, exec, |_| Ok(()))?.0)
}

/// Training parameters plus the BEMA set with the lowest validation TVD at
/// the last event, for writing final checkpoints.
pub fn final_parameter_sets(t: &Trainer) -> (ModelParams, Option<(BemaHypers, ModelParams)>) {
    let best = t.history().last().and_then(|e| e.best_bema()).map(|b| b.hypers);
    let bema = best.and_then(|h| t.bema_params().into_iter().find(|(x, _)| *x == h));
    (t.params().clone(), bema)
}
