use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;

use crate::denoiser::{grad, one_hot, DenoiserParams, GradientBundle, NoisePredictor};
use crate::diffusion::{draw_noise, noisy_latent};
use crate::error::{Error, Result};
use crate::molgraph::{AtomVocabulary, MolecularConfig};
use crate::schedule::NoiseSchedule;

/// Timestep and Gaussian noise used for one molecule of a training batch.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub t: usize,
    pub eps_x: Array2<f64>,
    pub eps_h: Array2<f64>,
}

/// `t ~ U{1..T}` and standard normal noise, the coordinate part centered.
pub fn draw_pretrain_noise<R: Rng + ?Sized>(
    batch: &[MolecularConfig],
    vocab_size: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Vec<NoiseDraw> {
    batch
        .iter()
        .map(|m| {
            let t = rng.gen_range(1..=schedule.steps());
            let (eps_x, eps_h) = draw_noise(rng, m.num_atoms(), vocab_size);
            NoiseDraw { t, eps_x, eps_h }
        })
        .collect()
}

struct Prepared {
    state: crate::denoiser::LatentState,
    eps_x: Array2<f64>,
    eps_h: Array2<f64>,
}

fn prepare(
    batch: &[MolecularConfig],
    vocab: &AtomVocabulary,
    schedule: &NoiseSchedule,
    draws: &[NoiseDraw],
) -> Result<Vec<Prepared>> {
    if batch.is_empty() {
        return Err(Error::Degenerate("empty training batch".into()));
    }
    if draws.len() != batch.len() {
        return Err(Error::Shape(
            "one noise draw per molecule is required".into(),
        ));
    }
    batch
        .iter()
        .zip(draws)
        .map(|(m, d)| {
            let x = m.centered()?.coords;
            let h = one_hot(m, vocab)?;
            let state = noisy_latent(
                &x,
                &h,
                &d.eps_x,
                &d.eps_h,
                d.t,
                schedule,
                m.condition.clone(),
            );
            Ok(Prepared {
                state,
                eps_x: d.eps_x.clone(),
                eps_h: d.eps_h.clone(),
            })
        })
        .collect()
}

fn element_count(p: &Prepared) -> f64 {
    (p.eps_x.len() + p.eps_h.len()) as f64
}

/// Mean over the batch of the per-element squared error between the true
/// and predicted noise, for fixed draws.
pub fn pretrain_loss_with<P: NoisePredictor>(
    predictor: &P,
    batch: &[MolecularConfig],
    vocab: &AtomVocabulary,
    schedule: &NoiseSchedule,
    draws: &[NoiseDraw],
) -> Result<f64> {
    let prepared = prepare(batch, vocab, schedule, draws)?;
    let terms: Vec<f64> = prepared
        .par_iter()
        .map(|p| {
            let pred = predictor.predict(&p.state)?;
            let sx: f64 = (&p.eps_x - &pred.eps_x).iter().map(|v| v * v).sum();
            let sh: f64 = (&p.eps_h - &pred.eps_h).iter().map(|v| v * v).sum();
            Ok((sx + sh) / element_count(p))
        })
        .collect::<Result<_>>()?;
    Ok(terms.iter().sum::<f64>() / terms.len() as f64)
}

/// Simplified epsilon-prediction objective with unit weighting.
pub fn pretrain_loss<P: NoisePredictor, R: Rng + ?Sized>(
    predictor: &P,
    batch: &[MolecularConfig],
    vocab: &AtomVocabulary,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<f64> {
    let draws = draw_pretrain_noise(batch, vocab.len(), schedule, rng);
    pretrain_loss_with(predictor, batch, vocab, schedule, &draws)
}

pub fn pretrain_loss_and_grad(
    params: &DenoiserParams,
    batch: &[MolecularConfig],
    vocab: &AtomVocabulary,
    schedule: &NoiseSchedule,
    draws: &[NoiseDraw],
) -> Result<(f64, GradientBundle)> {
    let prepared = prepare(batch, vocab, schedule, draws)?;
    let scale = 1.0 / prepared.len() as f64;
    let parts: Vec<(f64, GradientBundle)> = prepared
        .par_iter()
        .map(|p| {
            grad(params, |scope| {
                let (pred, id) = scope.predict(&p.state)?;
                let n = element_count(p);
                let rx = &pred.eps_x - &p.eps_x;
                let rh = &pred.eps_h - &p.eps_h;
                let value = (rx.iter().map(|v| v * v).sum::<f64>()
                    + rh.iter().map(|v| v * v).sum::<f64>())
                    / n;
                let k = 2.0 * scale / n;
                scope.seed(id, &(&rx * k), &(&rh * k))?;
                Ok(value * scale)
            })
        })
        .collect::<Result<_>>()?;
    let mut total = GradientBundle::zeros_like(params);
    let mut value = 0.0;
    for (v, g) in &parts {
        value += v;
        total.add_assign(g)?;
    }
    Ok((value, total))
}
