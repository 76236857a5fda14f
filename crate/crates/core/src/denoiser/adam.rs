use serde::{Deserialize, Serialize};

use crate::denoiser::{DenoiserParams, GradientBundle, Weights};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Weights,
    pub v: Weights,
}

impl AdamState {
    pub fn new(params: &DenoiserParams, config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Weights::zeros(&params.arch),
            v: Weights::zeros(&params.arch),
        }
    }
}

/// Bias-corrected Adam update in place.
pub fn adam_step(
    params: &mut DenoiserParams,
    grads: &GradientBundle,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if !params.weights.shapes_match(&grads.weights) || !params.weights.shapes_match(&state.m) {
        return Err(Error::Shape(
            "parameters, gradients and optimizer state differ in shape".into(),
        ));
    }
    let AdamConfig {
        beta1,
        beta2,
        epsilon,
    } = state.config;
    state.step += 1;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    let g = grads.weights.tensors();
    for (((p, (_, g, _)), m), v) in params
        .weights
        .tensors_mut()
        .into_iter()
        .zip(g)
        .zip(state.m.tensors_mut())
        .zip(state.v.tensors_mut())
    {
        for i in 0..p.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::Architecture;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> DenoiserParams {
        let arch = Architecture {
            vocab_size: 2,
            condition_dim: 1,
            hidden: 4,
            layers: 1,
            steps: 10,
            clamp: 1e-5,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = DenoiserParams::init(arch, &mut rng).unwrap();
        p.randomize_all(&mut rng, 1.0);
        p
    }

    fn random_grad(params: &DenoiserParams, seed: u64) -> GradientBundle {
        let mut g = GradientBundle::zeros_like(params);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in g.weights.tensors_mut() {
            for x in t.iter_mut() {
                *x = rand::Rng::gen_range(&mut rng, -1.0..1.0);
            }
        }
        g
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = setup();
        let before = p.clone();
        let mut st = AdamState::new(&p, AdamConfig::default());
        adam_step(&mut p, &GradientBundle::zeros_like(&before), &mut st, 1e-3).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        let mut p = setup();
        let before = p.clone();
        let g = random_grad(&p, 9);
        let mut st = AdamState::new(&p, AdamConfig::default());
        let lr = 1e-3;
        adam_step(&mut p, &g, &mut st, lr).unwrap();
        // step 1: m_hat = g, v_hat = g^2, so delta = -lr * g / (|g| + eps)
        for i in 0..p.weights.num_scalars() {
            let gi = g.weights.get_flat(i);
            let delta = p.weights.get_flat(i) - before.weights.get_flat(i);
            let expected = -lr * gi / (gi.abs() + 1e-8);
            assert!((delta - expected).abs() < 1e-15, "{delta} vs {expected}");
        }
    }

    #[test]
    fn two_steps_match_reference() {
        let mut p = setup();
        let before = p.clone();
        let g1 = random_grad(&p, 1);
        let g2 = random_grad(&p, 2);
        let mut st = AdamState::new(&p, AdamConfig::default());
        adam_step(&mut p, &g1, &mut st, 0.01).unwrap();
        adam_step(&mut p, &g2, &mut st, 0.01).unwrap();
        for i in 0..p.weights.num_scalars() {
            let (a, b) = (g1.weights.get_flat(i), g2.weights.get_flat(i));
            let m1 = 0.1 * a;
            let v1 = 0.001 * a * a;
            let x1 = before.weights.get_flat(i) - 0.01 * (m1 / 0.1) / ((v1 / 0.001).sqrt() + 1e-8);
            let m2 = 0.9 * m1 + 0.1 * b;
            let v2 = 0.999 * v1 + 0.001 * b * b;
            let x2 =
                x1 - 0.01 * (m2 / (1.0 - 0.81)) / ((v2 / (1.0 - 0.999f64.powi(2))).sqrt() + 1e-8);
            assert!((p.weights.get_flat(i) - x2).abs() < 1e-14);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = setup();
        let mut other_arch = p.arch;
        other_arch.hidden = 5;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let other = DenoiserParams::init(other_arch, &mut rng).unwrap();
        let mut st = AdamState::new(&p, AdamConfig::default());
        assert!(adam_step(&mut p, &GradientBundle::zeros_like(&other), &mut st, 1e-3).is_err());
    }
}
