//! Optimisation loop: masked-image pre-training, joint masked-image plus
//! contrastive pre-training, and adapter fine-tuning on a frozen backbone.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::image::Image;
use crate::model::params::{ParamGroup, ParamStore, Session};
use crate::model::{ForwardOptions, Model};
use crate::objectives::{
    info_nce, make_mask, mim_loss, projection_head, reconstruction_head, retrieval_top1, ContrastConfig, MaskConfig,
};
use crate::tensor::Tensor;
use crate::warp::{make_pair, PairConfig};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Linear warmup from 0, then half-cosine decay to 0 at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub weight_decay: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            base_lr: 2e-4,
            warmup_steps: 10,
            total_steps: 200,
            weight_decay: 0.05,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("base_lr must be finite and >= 0, got {}", self.base_lr)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        if self.total_steps > 0 && self.warmup_steps >= self.total_steps {
            return Err(Error::Config(format!(
                "warmup ({}) must be shorter than the run ({})",
                self.warmup_steps, self.total_steps
            )));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::Contract(format!(
                "lr requested at step {step} beyond total {}",
                self.total_steps
            )));
        }
        if step < self.warmup_steps {
            return Ok(self.base_lr * step as f64 / self.warmup_steps as f64);
        }
        let span = (self.total_steps - self.warmup_steps) as f64;
        if span == 0.0 {
            return Ok(self.base_lr);
        }
        let progress = (step - self.warmup_steps) as f64 / span;
        Ok(0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Mim,
    Joint,
    Finetune,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Mim => "mim",
            Stage::Joint => "joint",
            Stage::Finetune => "finetune",
        }
    }

    fn salt(self) -> u64 {
        match self {
            Stage::Mim => 0x4d49_4d00,
            Stage::Joint => 0x4a4f_494e,
            Stage::Finetune => 0x4649_4e45,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mim" => Ok(Stage::Mim),
            "joint" => Ok(Stage::Joint),
            "finetune" => Ok(Stage::Finetune),
            other => Err(Error::Format(format!("unknown stage {other:?}"))),
        }
    }
}

/// Parameters, AdamW moments and bookkeeping for a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ParamStore,
    pub first_moment: BTreeMap<String, Tensor>,
    pub second_moment: BTreeMap<String, Tensor>,
    /// Optimiser steps taken over the whole run.
    pub step: u64,
    /// Updates folded into the current moments, for bias correction.
    pub moment_steps: u64,
    /// Stage currently or most recently run.
    pub stage: Option<Stage>,
    pub completed: Vec<Stage>,
    pub seed: u64,
}

impl TrainState {
    pub fn new(params: ParamStore, seed: u64) -> Self {
        TrainState {
            params,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
            step: 0,
            moment_steps: 0,
            stage: None,
            completed: Vec::new(),
            seed,
        }
    }

    pub fn has_completed(&self, stage: Stage) -> bool {
        self.completed.contains(&stage)
    }

    /// Drop optimiser moments, e.g. when the set of trainable parameters
    /// changes between stages.
    pub fn reset_moments(&mut self) {
        self.first_moment.clear();
        self.second_moment.clear();
        self.moment_steps = 0;
    }
}

/// One decoupled-weight-decay Adam update with learning rate `lr`.
///
/// Bias correction counts updates since the moments were last reset. Frozen parameters
/// and parameters without a gradient are left untouched. Every gradient is
/// checked before anything is written, so a non-finite gradient aborts the
/// whole step.
pub fn optimizer_step(state: &mut TrainState, grads: &BTreeMap<String, Tensor>, lr: f64, weight_decay: f64) -> Result<()> {
    for (name, g) in grads {
        let p = state
            .params
            .get(name)
            .ok_or_else(|| Error::Param(format!("gradient for unknown parameter {name}")))?;
        if g.shape() != p.value.shape() {
            return Err(Error::shape("optimizer_step", p.value.shape(), g.shape()));
        }
        if !g.all_finite() {
            return Err(Error::Numeric(format!("non-finite gradient for {name}")));
        }
    }
    let t = i32::try_from(state.moment_steps + 1).unwrap_or(i32::MAX);
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);
    for (name, g) in grads {
        let param = state.params.get_mut(name).expect("checked above");
        if !param.trainable {
            continue;
        }
        let shape = param.value.shape().to_vec();
        let m = state
            .first_moment
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(shape.clone()));
        let v = state
            .second_moment
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(shape));
        let decay = 1.0 - lr * weight_decay;
        for (((w, &g), m), v) in param
            .value
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *w = *w * decay - lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    state.step += 1;
    state.moment_steps += 1;
    Ok(())
}

/// Everything a stage needs besides the model, data and state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfig {
    pub batch_size: usize,
    pub schedule: Schedule,
    pub mask: MaskConfig,
    pub contrast: ContrastConfig,
    pub pairs: PairConfig,
    /// Let the joint stage start from an untrained backbone.
    pub allow_without_mim: bool,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig {
            batch_size: 16,
            schedule: Schedule::default(),
            mask: MaskConfig::default(),
            contrast: ContrastConfig::default(),
            pairs: PairConfig::default(),
            allow_without_mim: false,
        }
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub stage: Stage,
    /// Global optimiser step after this update.
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub mim: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub contrast: Option<f64>,
    /// In-batch positive retrieval accuracy.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub top1: Option<f64>,
}

fn check_preconditions(stage: Stage, cfg: &StageConfig, model: &Model, state: &TrainState) -> Result<()> {
    cfg.schedule.validate()?;
    cfg.contrast.validate()?;
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if stage != Stage::Mim && cfg.batch_size < 2 {
        return Err(Error::Config("contrastive stages need batch_size >= 2".into()));
    }
    match stage {
        Stage::Mim => {}
        Stage::Joint => {
            if !cfg.allow_without_mim && !state.has_completed(Stage::Mim) {
                return Err(Error::Contract(
                    "joint stage needs a completed masked-image stage (or allow_without_mim)".into(),
                ));
            }
        }
        Stage::Finetune => {
            if model.adapters.map_or(true, |a| !a.any_enabled()) || !state.params.has_group(ParamGroup::Adapter) {
                return Err(Error::Contract("fine-tuning needs adapters attached".into()));
            }
            let unfrozen = state
                .params
                .iter()
                .find(|(_, p)| p.trainable && p.group != ParamGroup::Adapter);
            if let Some((name, _)) = unfrozen {
                return Err(Error::Contract(format!(
                    "fine-tuning needs a frozen backbone; {name} is trainable"
                )));
            }
        }
    }
    Ok(())
}

struct StepOutcome {
    grads: BTreeMap<String, Tensor>,
    mim: f64,
    contrast: Option<f64>,
    top1: Option<f64>,
    loss: f64,
}

fn mim_only_step(model: &Model, cfg: &StageConfig, store: &ParamStore, batch: &[&Image], rng: &mut ChaCha8Rng) -> Result<StepOutcome> {
    let mcfg = &model.config;
    let mut graph = Graph::new();
    let mut s = Session::new(&mut graph, store);
    let mut terms = Vec::with_capacity(batch.len());
    for img in batch {
        let mask = make_mask(mcfg.image_size, cfg.mask.unit, cfg.mask.ratio, rng)?;
        let tokens = mask.token_mask(mcfg.patch_size)?;
        let x = s.graph.constant(img.to_tensor());
        let out = model.forward(
            &mut s,
            x,
            &ForwardOptions {
                token_mask: Some(&tokens),
                max_stages: Some(1),
            },
        )?;
        let pred = reconstruction_head(&mut s, out.stages[0].tokens, mcfg)?;
        terms.push(mim_loss(s.graph, pred, x, &mask)?);
    }
    let loss = mean_of(s.graph, &terms)?;
    let value = s.graph.value(loss).item()?;
    let grads = s.backward(loss)?;
    Ok(StepOutcome {
        grads,
        mim: value,
        contrast: None,
        top1: None,
        loss: value,
    })
}

fn mean_of(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    let mut acc = *terms
        .first()
        .ok_or_else(|| Error::Contract("empty batch".into()))?;
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(g.scale(acc, 1.0 / terms.len() as f64))
}

/// Masked reconstruction of the original view plus InfoNCE between the
/// (masked) original and the unmasked keystone-warped view.
fn joint_step(model: &Model, cfg: &StageConfig, store: &ParamStore, batch: &[&Image], rng: &mut ChaCha8Rng) -> Result<StepOutcome> {
    let mcfg = &model.config;
    let pair_cfg = PairConfig {
        output_size: Some(mcfg.image_size),
        ..cfg.pairs
    };
    let mut graph = Graph::new();
    let mut s = Session::new(&mut graph, store);
    let mut mims = Vec::with_capacity(batch.len());
    let mut za = Vec::with_capacity(batch.len());
    let mut zb = Vec::with_capacity(batch.len());
    for img in batch {
        let pair = make_pair(img, rng, &pair_cfg)?;
        let mask = make_mask(mcfg.image_size, cfg.mask.unit, cfg.mask.ratio, rng)?;
        let tokens = mask.token_mask(mcfg.patch_size)?;

        let xa = s.graph.constant(pair.original.to_tensor());
        let out_a = model.forward(
            &mut s,
            xa,
            &ForwardOptions {
                token_mask: Some(&tokens),
                max_stages: None,
            },
        )?;
        let pred = reconstruction_head(&mut s, out_a.stages[0].tokens, mcfg)?;
        mims.push(mim_loss(s.graph, pred, xa, &mask)?);
        za.push(out_a.pooled.expect("full forward pools"));

        let xb = s.graph.constant(pair.transformed.to_tensor());
        let out_b = model.forward(&mut s, xb, &ForwardOptions::default())?;
        zb.push(out_b.pooled.expect("full forward pools"));
    }
    let mim = mean_of(s.graph, &mims)?;
    let pa = s.graph.concat(&za, 0)?;
    let pb = s.graph.concat(&zb, 0)?;
    let ha = projection_head(&mut s, pa)?;
    let hb = projection_head(&mut s, pb)?;
    let cl = info_nce(s.graph, ha, hb, cfg.contrast.temperature)?;
    let weighted = s.graph.scale(cl, cfg.contrast.weight);
    let loss = s.graph.add(mim, weighted)?;

    let top1 = retrieval_top1(s.graph.value(ha), s.graph.value(hb))?;
    let mim_v = s.graph.value(mim).item()?;
    let cl_v = s.graph.value(cl).item()?;
    let loss_v = s.graph.value(loss).item()?;
    let grads = s.backward(loss)?;
    Ok(StepOutcome {
        grads,
        mim: mim_v,
        contrast: Some(cl_v),
        top1: Some(top1),
        loss: loss_v,
    })
}

/// Run `cfg.schedule.total_steps` optimiser steps of `stage` over `data`,
/// calling `on_step` after each update.
///
/// Batches are drawn by reshuffling the data each epoch; every random choice
/// (order, masks, pair warps) comes from one stream seeded by the state's seed
/// and the stage, so a run is fully determined by (seed, config, data).
pub fn run_stage(
    stage: Stage,
    cfg: &StageConfig,
    model: &Model,
    data: &[Image],
    state: &mut TrainState,
    mut on_step: impl FnMut(&StepMetrics) -> Result<()>,
) -> Result<Vec<StepMetrics>> {
    check_preconditions(stage, cfg, model, state)?;
    let steps = cfg.schedule.total_steps;
    if steps == 0 {
        return Ok(Vec::new());
    }
    if data.is_empty() {
        return Err(Error::Config("no training images".into()));
    }
    let want = (model.config.in_channels, model.config.image_size);
    if let Some(bad) = data
        .iter()
        .find(|i| (i.channels(), i.height()) != want || i.width() != want.1)
    {
        return Err(Error::Size(format!(
            "training image {}x{}x{} does not match the model input {}x{}x{}",
            bad.channels(),
            bad.height(),
            bad.width(),
            want.0,
            want.1,
            want.1
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(state.seed ^ stage.salt());
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut log = Vec::with_capacity(steps);
    if state.stage != Some(stage) {
        state.reset_moments();
    }
    state.stage = Some(stage);
    for k in 0..steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order = (0..data.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&data[order[cursor]]);
            cursor += 1;
        }
        let lr = cfg.schedule.lr_at(k)?;
        let outcome = match stage {
            Stage::Mim => mim_only_step(model, cfg, &state.params, &batch, &mut rng)?,
            Stage::Joint | Stage::Finetune => joint_step(model, cfg, &state.params, &batch, &mut rng)?,
        };
        if !outcome.loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss at {stage} step {k}")));
        }
        optimizer_step(state, &outcome.grads, lr, cfg.schedule.weight_decay)?;
        let m = StepMetrics {
            stage,
            step: state.step,
            lr,
            loss: outcome.loss,
            mim: outcome.mim,
            contrast: outcome.contrast,
            top1: outcome.top1,
        };
        on_step(&m)?;
        log.push(m);
    }
    if !state.completed.contains(&stage) {
        state.completed.push(stage);
    }
    Ok(log)
}

/// Trailing-window mean of `values` (shorter windows at the start).
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    for (i, v) in values.iter().enumerate() {
        acc += v;
        if i >= window {
            acc -= values[i - window];
        }
        out.push(acc / (i + 1).min(window) as f64);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_state(w: f64) -> TrainState {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(w), ParamGroup::Backbone);
        store.insert("frozen", Tensor::from_fn([3], |i| i as f64 + 0.5), ParamGroup::Backbone);
        store.get_mut("frozen").unwrap().trainable = false;
        TrainState::new(store, 0)
    }

    #[test]
    fn schedule_endpoints() {
        let s = Schedule {
            base_lr: 2e-4,
            warmup_steps: 10,
            total_steps: 100,
            weight_decay: 0.05,
        };
        assert_eq!(s.lr_at(0).unwrap(), 0.0);
        assert_eq!(s.lr_at(10).unwrap(), 2e-4);
        assert!(s.lr_at(100).unwrap().abs() <= 1e-15);
        assert!(s.lr_at(5).unwrap() > 0.0 && s.lr_at(5).unwrap() < 2e-4);
        assert!(matches!(s.lr_at(101), Err(Error::Contract(_))));
    }

    #[test]
    fn quadratic_converges() {
        let mut st = scalar_state(0.0);
        for _ in 0..500 {
            let w = st.params.value("w").unwrap().item().unwrap();
            let grads = BTreeMap::from([("w".to_string(), Tensor::scalar(2.0 * (w - 3.0)))]);
            optimizer_step(&mut st, &grads, 0.1, 0.0).unwrap();
        }
        let w = st.params.value("w").unwrap().item().unwrap();
        assert!((w - 3.0).abs() < 1e-3, "w = {w}");
    }

    #[test]
    fn zero_grads_no_decay_is_a_no_op_and_frozen_untouched() {
        let mut st = scalar_state(1.25);
        let before = st.params.clone();
        let grads = BTreeMap::from([
            ("w".to_string(), Tensor::scalar(0.0)),
            ("frozen".to_string(), Tensor::ones([3])),
        ]);
        for _ in 0..5 {
            optimizer_step(&mut st, &grads, 0.1, 0.0).unwrap();
        }
        assert_eq!(st.params, before);
        assert_eq!(st.step, 5);
    }

    #[test]
    fn nan_gradient_aborts_without_writing() {
        let mut st = scalar_state(1.0);
        let before = st.clone();
        let grads = BTreeMap::from([("w".to_string(), Tensor::scalar(f64::NAN))]);
        assert!(matches!(optimizer_step(&mut st, &grads, 0.1, 0.0), Err(Error::Numeric(_))));
        assert_eq!(st, before);
    }

    #[test]
    fn moving_average_window() {
        let ma = moving_average(&[1.0, 2.0, 3.0, 4.0], 2);
        assert_eq!(ma, vec![1.0, 1.5, 2.5, 3.5]);
    }

    #[test]
    fn stage_names_round_trip() {
        for s in [Stage::Mim, Stage::Joint, Stage::Finetune] {
            assert_eq!(s.as_str().parse::<Stage>().unwrap(), s);
        }
    }
}
