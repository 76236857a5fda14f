//! The noise predictor, its parameters, gradients and optimizer.

mod adam;
pub mod checkpoint;
pub mod egnn;
mod loss;
mod params;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::molgraph::{AtomVocabulary, MolecularConfig};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use loss::{
    draw_pretrain_noise, pretrain_loss, pretrain_loss_and_grad, pretrain_loss_with, NoiseDraw,
};
pub use params::{Architecture, DenoiserParams, EgnnLayer, GradientBundle, Linear, Weights};

/// Noisy latent `z_t = [z_x, z_h]` plus the step and condition it was produced at.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentState {
    pub z_x: Array2<f64>,
    pub z_h: Array2<f64>,
    pub t: usize,
    pub condition: Vec<f64>,
}

impl LatentState {
    pub fn num_atoms(&self) -> usize {
        self.z_x.nrows()
    }

    /// Squared Euclidean distance over both blocks.
    pub fn sq_distance(&self, other: &LatentState) -> f64 {
        let dx: f64 = self
            .z_x
            .iter()
            .zip(other.z_x.iter())
            .map(|(a, b)| (a - b).powi(2))
            .sum();
        let dh: f64 = self
            .z_h
            .iter()
            .zip(other.z_h.iter())
            .map(|(a, b)| (a - b).powi(2))
            .sum();
        dx + dh
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub eps_x: Array2<f64>,
    pub eps_h: Array2<f64>,
}

/// Anything that can estimate the noise in a latent. Implemented by the
/// trained network and by test oracles.
pub trait NoisePredictor: Sync {
    fn predict(&self, state: &LatentState) -> Result<Prediction>;
}

impl NoisePredictor for DenoiserParams {
    fn predict(&self, state: &LatentState) -> Result<Prediction> {
        predict_noise(self, state)
    }
}

/// Equivariant coordinate noise and invariant feature noise for `state`.
pub fn predict_noise(params: &DenoiserParams, state: &LatentState) -> Result<Prediction> {
    egnn::forward_cached(params, state).map(|(p, _)| p)
}

/// One-hot atom-type block of a molecule.
pub fn one_hot(config: &MolecularConfig, vocab: &AtomVocabulary) -> Result<Array2<f64>> {
    let idx = config.element_indices(vocab)?;
    let mut h = Array2::zeros((idx.len(), vocab.len()));
    for (a, &e) in idx.iter().enumerate() {
        h[[a, e]] = 1.0;
    }
    Ok(h)
}

/// Handle to a prediction recorded inside a [`GradScope`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PredictionId(usize);

struct Record {
    cache: egnn::ForwardCache,
    g_eps_x: Array2<f64>,
    g_eps_h: Array2<f64>,
}

/// Records network evaluations made by a loss closure together with the
/// adjoints the closure seeds on their outputs.
pub struct GradScope<'p> {
    params: &'p DenoiserParams,
    records: Vec<Record>,
    direct: GradientBundle,
}

impl<'p> GradScope<'p> {
    pub fn params(&self) -> &DenoiserParams {
        self.params
    }

    pub fn predict(&mut self, state: &LatentState) -> Result<(Prediction, PredictionId)> {
        let (pred, cache) = egnn::forward_cached(self.params, state)?;
        let id = PredictionId(self.records.len());
        self.records.push(Record {
            cache,
            g_eps_x: Array2::zeros(pred.eps_x.raw_dim()),
            g_eps_h: Array2::zeros(pred.eps_h.raw_dim()),
        });
        Ok((pred, id))
    }

    /// Adds `d loss / d eps` for a recorded prediction.
    pub fn seed(
        &mut self,
        id: PredictionId,
        g_eps_x: &Array2<f64>,
        g_eps_h: &Array2<f64>,
    ) -> Result<()> {
        let rec = self
            .records
            .get_mut(id.0)
            .ok_or_else(|| Error::Model(format!("unknown prediction id {}", id.0)))?;
        if rec.g_eps_x.shape() != g_eps_x.shape() || rec.g_eps_h.shape() != g_eps_h.shape() {
            return Err(Error::Shape(
                "seed adjoint does not match prediction shape".into(),
            ));
        }
        rec.g_eps_x += g_eps_x;
        rec.g_eps_h += g_eps_h;
        Ok(())
    }

    /// Adds a gradient term that depends on the parameters directly.
    pub fn accumulate(&mut self, grads: &GradientBundle) -> Result<()> {
        self.direct.add_assign(grads)
    }
}

/// Value and exact parameter gradient of the scalar returned by `loss`.
pub fn grad<F>(params: &DenoiserParams, loss: F) -> Result<(f64, GradientBundle)>
where
    F: FnOnce(&mut GradScope<'_>) -> Result<f64>,
{
    let mut scope = GradScope {
        params,
        records: Vec::new(),
        direct: GradientBundle::zeros_like(params),
    };
    let value = loss(&mut scope)?;
    if !value.is_finite() {
        return Err(Error::NonFinite {
            location: "loss value".into(),
        });
    }
    let GradScope {
        records,
        mut direct,
        ..
    } = scope;
    for rec in records.iter().rev() {
        egnn::backward(params, &rec.cache, &rec.g_eps_x, &rec.g_eps_h, &mut direct)?;
    }
    Ok((value, direct))
}
