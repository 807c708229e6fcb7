//! Optimizers, the source-domain training loop, and few-shot adapter tuning.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape};
use crate::data::{labels_of, SignalSegment};
use crate::error::{Error, Result};
use crate::model::{AdapterConfig, Model};
use crate::objective::{objective, LossReport, LossWeights};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    /// Filled from the run seed; not part of the serialized form.
    #[serde(skip)]
    pub seed: u64,
    /// Filled from the run's loss weights; not part of the serialized form.
    #[serde(skip)]
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            seed: 0,
            weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be finite and >= 0", self.learning_rate)));
        }
        let (b1, b2) = self.adam_betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) || self.adam_eps <= 0.0 {
            return Err(Error::config("adam betas must lie in [0, 1) and eps must be positive"));
        }
        self.weights.validate()
    }
}

/// First and second moment estimates, one pair per parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn for_params(params: &ParamStore) -> Self {
        Self {
            m: params.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect(),
            v: params.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of every trainable parameter from its
/// accumulated gradient.
pub fn adam_step(params: &mut ParamStore, state: &mut AdamState, lr: f64, betas: (f64, f64), eps: f64) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::shape("adam state", &[state.m.len()], &[params.len()]));
    }
    state.t += 1;
    let (b1, b2) = betas;
    let t = state.t as i32;
    let c1 = 1.0 - libm::pow(b1, f64::from(t));
    let c2 = 1.0 - libm::pow(b2, f64::from(t));
    for (i, p) in params.iter_mut().enumerate() {
        if !p.trainable {
            continue;
        }
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((w, g), mi), vi) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(m).zip(v) {
            *mi = b1 * *mi + (1.0 - b1) * g;
            *vi = b2 * *vi + (1.0 - b2) * g * g;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *w -= lr * mhat / (libm::sqrt(vhat) + eps);
        }
    }
    Ok(())
}

/// Plain gradient descent on every trainable parameter.
pub fn sgd_step(params: &mut ParamStore, lr: f64) {
    for p in params.iter_mut() {
        if p.trainable {
            let g = p.grad.clone();
            p.value.axpy(-lr, &g);
        }
    }
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
    adam: Option<AdamState>,
}

impl Optimizer {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            kind: cfg.optimizer,
            lr: cfg.learning_rate,
            betas: cfg.adam_betas,
            eps: cfg.adam_eps,
            adam: None,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        match self.kind {
            OptimizerKind::Sgd => {
                sgd_step(params, self.lr);
                Ok(())
            }
            OptimizerKind::Adam => {
                let st = self.adam.get_or_insert_with(|| AdamState::for_params(params));
                adam_step(params, st, self.lr, self.betas, self.eps)
            }
        }
    }
}

/// Counts optimizer updates per source domain of the batch that produced
/// them. The protocol checks the held-out domains never show up here.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct UpdateAudit {
    per_domain: BTreeMap<String, u64>,
}

impl UpdateAudit {
    pub fn record<'a>(&mut self, domains: impl IntoIterator<Item = &'a str>) {
        let mut seen: Vec<&str> = domains.into_iter().collect();
        seen.sort_unstable();
        seen.dedup();
        for d in seen {
            *self.per_domain.entry(String::from(d)).or_insert(0) += 1;
        }
    }

    pub fn updates_from(&self, domain: &str) -> u64 {
        self.per_domain.get(domain).copied().unwrap_or(0)
    }

    pub fn updates_from_any<'a>(&self, domains: impl IntoIterator<Item = &'a String>) -> u64 {
        domains.into_iter().map(|d| self.updates_from(d)).sum()
    }

    pub fn merge(&mut self, other: &UpdateAudit) {
        for (d, n) in &other.per_domain {
            *self.per_domain.entry(d.clone()).or_insert(0) += n;
        }
    }

    pub fn per_domain(&self) -> &BTreeMap<String, u64> {
        &self.per_domain
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub report: LossReport,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepLog>,
}

impl TrainLog {
    /// Mean total loss of each epoch.
    pub fn epoch_means(&self) -> Vec<f64> {
        let mut out: Vec<(f64, usize)> = Vec::new();
        for s in &self.steps {
            if out.len() <= s.epoch {
                out.resize(s.epoch + 1, (0.0, 0));
            }
            out[s.epoch].0 += s.report.total;
            out[s.epoch].1 += 1;
        }
        out.into_iter().map(|(s, n)| s / n.max(1) as f64).collect()
    }
}

/// Minimizes the objective over the pooled source segments with seeded
/// shuffled mini-batches.
pub fn train(
    model: &mut Model,
    data: &[&SignalSegment],
    cfg: &TrainConfig,
    audit: &mut UpdateAudit,
) -> Result<TrainLog> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    let mut shuffle = rng::stream(cfg.seed, "shuffle");
    let mut route = rng::stream(cfg.seed, "route");
    let mut opt = Optimizer::new(cfg);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = TrainLog::default();
    let flags = model.config().ablation;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&SignalSegment> = chunk.iter().map(|&i| data[i]).collect();
            let labels = labels_of(&batch);
            let mut tape = Tape::new();
            let fwd = model.forward(&mut tape, &batch, &mut route)?;
            let (loss, report) = objective(&mut tape, &fwd, &labels, &cfg.weights, flags)?;
            let grads = tape.gradients(loss)?;
            let params = model.params_mut();
            params.zero_grad();
            grads.accumulate_into(params);
            opt.step(params)?;
            audit.record(batch.iter().map(|s| s.domain.as_str()));
            log.steps.push(StepLog { epoch, step, report });
            step += 1;
        }
    }
    Ok(log)
}

/// Attaches zero-initialized low-rank adapters to a trained model, freezes the
/// backbone and trains only the adapters on `shots`. With no shots the
/// adapters stay at their zero product and the model is unchanged.
pub fn finetune_adapters(
    model: &mut Model,
    shots: &[&SignalSegment],
    acfg: &AdapterConfig,
    cfg: &TrainConfig,
    audit: &mut UpdateAudit,
) -> Result<TrainLog> {
    let mut init = rng::stream(cfg.seed, "adapter");
    model.attach_adapters(acfg, &mut init)?;
    if shots.is_empty() {
        return Ok(TrainLog::default());
    }
    train(model, shots, cfg, audit)
}
