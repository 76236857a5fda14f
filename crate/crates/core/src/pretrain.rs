//! Denoising pretraining loop.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{
    adam_step, draw_pretrain_noise, pretrain_loss_and_grad, AdamState, DenoiserParams,
};
use crate::error::{Error, Result};
use crate::molgraph::{AtomVocabulary, MolecularConfig};
use crate::rng::stream;
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    /// Optimizer updates.
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 32,
            learning_rate: 1e-3,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(
                "pretrain batch_size and learning_rate must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Runs updates `start_step .. cfg.steps`. The batch and noise of step `k`
/// depend only on `(seed, k)`, so a resumed run matches an uninterrupted one.
/// `on_step` sees the step index and its loss after the update.
#[allow(clippy::too_many_arguments)]
pub fn pretrain<F>(
    params: &mut DenoiserParams,
    adam: &mut AdamState,
    data: &[MolecularConfig],
    vocab: &AtomVocabulary,
    schedule: &NoiseSchedule,
    cfg: &PretrainConfig,
    seed: u64,
    start_step: usize,
    mut on_step: F,
) -> Result<Vec<f64>>
where
    F: FnMut(usize, f64, &DenoiserParams, &AdamState) -> Result<()>,
{
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Degenerate("no training molecules".into()));
    }
    let mut losses = Vec::new();
    for step in start_step..cfg.steps {
        let mut rng = stream(seed, "pretrain", &[step as u64]);
        let batch: Vec<MolecularConfig> = (0..cfg.batch_size)
            .map(|_| data[rng.gen_range(0..data.len())].clone())
            .collect();
        let draws = draw_pretrain_noise(&batch, vocab.len(), schedule, &mut rng);
        let (loss, g) = pretrain_loss_and_grad(params, &batch, vocab, schedule, &draws)?;
        adam_step(params, &g, adam, cfg.learning_rate)?;
        on_step(step, loss, params, adam)?;
        losses.push(loss);
    }
    Ok(losses)
}
