//! Deterministic per-example training loop.

use crate::corpus::ToyExample;
use crate::error::{Error, Result};
use crate::fusion::{FusionContext, FusionVariant};
use crate::losses::{LossReport, LossWeights};
use crate::model::{backward, forward_with, DecoderCoupling, Example, Model, ModelConfig};
use crate::optim::{adam_step, AdamConfig, AdamState};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub weights: LossWeights,
    pub seed: u64,
    pub variant: FusionVariant,
    pub model: ModelConfig,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            weights: LossWeights::default(),
            seed: 0,
            variant: FusionVariant::TransformerSsm,
            model: ModelConfig::default(),
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    /// One report per optimizer step.
    pub history: Vec<LossReport>,
    /// Mean `total` over the corpus before the first step.
    pub initial_mean_total: f64,
    /// Mean `total` over the corpus after the last step.
    pub final_mean_total: f64,
}

/// Mean weighted loss of `model` over `examples`.
pub fn mean_total(model: &Model, examples: &[Example], weights: &LossWeights) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::invalid("cannot average over an empty corpus"));
    }
    let ctx = FusionContext::default();
    let mut sum = 0.0;
    for ex in examples {
        sum += model.forward(ex, weights, &ctx)?.report.total;
    }
    Ok(sum / examples.len() as f64)
}

pub fn train(corpus: &[ToyExample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with_log(corpus, cfg, |_, _| {})
}

/// Trains with batch size one, visiting the corpus in order each epoch.
/// `on_step` sees the zero-based step index and that step's losses.
pub fn train_with_log(
    corpus: &[ToyExample],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(usize, &LossReport),
) -> Result<TrainOutcome> {
    if corpus.is_empty() {
        return Err(Error::invalid("training corpus is empty"));
    }
    let mut model = Model::init(cfg.seed, cfg.model.clone(), cfg.variant)?;
    let vocab = model.vocabulary();
    let examples: Vec<Example> = corpus
        .iter()
        .map(|e| e.to_example(&vocab))
        .collect::<Result<_>>()?;
    let initial_mean_total = mean_total(&model, &examples, &cfg.weights)?;
    let mut adam = AdamState::new(cfg.adam)?;
    let ctx = FusionContext::default();
    let mut history = Vec::with_capacity(cfg.epochs * examples.len());
    for _ in 0..cfg.epochs {
        for ex in &examples {
            let step = history.len();
            let trace = forward_with(&model.config, model.variant, &model.params, ex, &cfg.weights, &ctx)?;
            if !trace.report.is_finite() || !trace.reconstruction.is_finite() {
                return Err(Error::NonFiniteLoss(step));
            }
            let grads = backward(
                &model.config,
                &model.params,
                ex,
                &trace,
                &cfg.weights,
                DecoderCoupling::Detached,
            )?;
            model.params.add_grads(&grads)?;
            adam_step(&mut model.params, &mut adam)?;
            if !model.params.all_finite() {
                return Err(Error::NonFiniteLoss(step));
            }
            on_step(step, &trace.report);
            history.push(trace.report);
        }
    }
    let final_mean_total = mean_total(&model, &examples, &cfg.weights)?;
    Ok(TrainOutcome {
        model,
        history,
        initial_mean_total,
        final_mean_total,
    })
}
