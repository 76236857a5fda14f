mod common;

use common::*;
use proptest::prelude::*;
use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use molrl::denoiser::checkpoint::{Checkpoint, ScheduleMeta};
use molrl::denoiser::{
    draw_pretrain_noise, predict_noise, pretrain_loss_and_grad, pretrain_loss_with, AdamConfig,
    AdamState, DenoiserParams, LatentState,
};
use molrl::molgraph::AtomVocabulary;
use molrl::pretrain::{pretrain, PretrainConfig};
use molrl::schedule::NoiseSchedule;

fn transformed(state: &LatentState, q: &ndarray::Array2<f64>, perm: &[usize]) -> LatentState {
    LatentState {
        z_x: permute_rows(&state.z_x.dot(q), perm),
        z_h: permute_rows(&state.z_h, perm),
        ..state.clone()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn outputs_follow_rotations_reflections_and_permutations(seed in any::<u64>(), reflect in any::<bool>(), m in 1usize..10, t in 1usize..=50) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = random_params(&mut rng, arch(3, 12, 50, 2), 1.0);
        let state = random_state(&mut rng, m, 4, t, vec![0.3, -1.2]);
        let q = random_orthogonal(&mut rng, reflect);
        let perm = random_permutation(&mut rng, m);
        let base = predict_noise(&params, &state).unwrap();
        let moved = predict_noise(&params, &transformed(&state, &q, &perm)).unwrap();
        prop_assert!(max_abs_diff(&moved.eps_x, &permute_rows(&base.eps_x.dot(&q), &perm)) < 1e-6);
        prop_assert!(max_abs_diff(&moved.eps_h, &permute_rows(&base.eps_h, &perm)) < 1e-6);
    }

    #[test]
    fn coordinate_output_has_zero_mean(seed in any::<u64>(), m in 2usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = random_params(&mut rng, arch(2, 8, 20, 0), 1.0);
        let state = random_state(&mut rng, m, 4, 7, vec![]);
        let pred = predict_noise(&params, &state).unwrap();
        let mean = pred.eps_x.mean_axis(ndarray::Axis(0)).unwrap();
        prop_assert!(mean.iter().all(|v| v.abs() < 1e-10));
    }
}

/// Central differences with h = 1e-5 on 250 random scalars of a 2-layer net.
#[test]
fn pretrain_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let vocab = AtomVocabulary::qm9();
    let schedule = NoiseSchedule::new(30, 1e-5).unwrap();
    let mut params = random_params(&mut rng, arch(2, 8, 30, 0), 1.0);
    let batch = toy_molecules(3, 5);
    let draws = draw_pretrain_noise(&batch, vocab.len(), &schedule, &mut rng);
    let (_, g) = pretrain_loss_and_grad(&params, &batch, &vocab, &schedule, &draws).unwrap();
    let n = params.weights.num_scalars();
    let picks = sample_indices(&mut rng, n, 250.min(n));
    let h = 1e-5;
    let mut worst = 0.0f64;
    for i in picks {
        let orig = params.weights.get_flat(i);
        params.weights.set_flat(i, orig + h);
        let up = pretrain_loss_with(&params, &batch, &vocab, &schedule, &draws).unwrap();
        params.weights.set_flat(i, orig - h);
        let down = pretrain_loss_with(&params, &batch, &vocab, &schedule, &draws).unwrap();
        params.weights.set_flat(i, orig);
        let numeric = (up - down) / (2.0 * h);
        let analytic = g.weights.get_flat(i);
        // floor keeps round-off on near-zero entries from dominating
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn pretraining_reduces_the_loss() {
    let vocab = AtomVocabulary::qm9();
    let schedule = NoiseSchedule::new(20, 1e-5).unwrap();
    let data = toy_molecules(40, 9);
    let mut params =
        DenoiserParams::init(arch(2, 16, 20, 0), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let mut adam = AdamState::new(&params, AdamConfig::default());
    let cfg = PretrainConfig {
        steps: 150,
        batch_size: 8,
        learning_rate: 3e-3,
    };
    let losses = pretrain(
        &mut params,
        &mut adam,
        &data,
        &vocab,
        &schedule,
        &cfg,
        4,
        0,
        |_, _, _, _| Ok(()),
    )
    .unwrap();
    let head: f64 = losses[..30].iter().sum::<f64>() / 30.0;
    let tail: f64 = losses[120..].iter().sum::<f64>() / 30.0;
    assert!(tail < head, "loss went from {head} to {tail}");
}

#[test]
fn resumed_pretraining_equals_uninterrupted() {
    let vocab = AtomVocabulary::qm9();
    let schedule = NoiseSchedule::new(10, 1e-5).unwrap();
    let data = toy_molecules(12, 2);
    let cfg = PretrainConfig {
        steps: 12,
        batch_size: 4,
        learning_rate: 1e-3,
    };
    let fresh = || {
        let p = DenoiserParams::init(arch(2, 8, 10, 0), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let a = AdamState::new(&p, AdamConfig::default());
        (p, a)
    };
    let (mut p1, mut a1) = fresh();
    pretrain(
        &mut p1,
        &mut a1,
        &data,
        &vocab,
        &schedule,
        &cfg,
        8,
        0,
        |_, _, _, _| Ok(()),
    )
    .unwrap();

    let (mut p2, mut a2) = fresh();
    let half = PretrainConfig {
        steps: 5,
        ..cfg.clone()
    };
    pretrain(
        &mut p2,
        &mut a2,
        &data,
        &vocab,
        &schedule,
        &half,
        8,
        0,
        |_, _, _, _| Ok(()),
    )
    .unwrap();
    let meta = ScheduleMeta {
        steps: 10,
        clamp: 1e-5,
    };
    let bytes = Checkpoint {
        params: p2,
        vocabulary: vocab.clone(),
        schedule: meta,
        training_step: 5,
        optimizer: Some(a2),
    }
    .to_bytes()
    .unwrap();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    let (mut p3, mut a3) = (back.params, back.optimizer.unwrap());
    pretrain(
        &mut p3,
        &mut a3,
        &data,
        &vocab,
        &schedule,
        &cfg,
        8,
        5,
        |_, _, _, _| Ok(()),
    )
    .unwrap();
    assert_eq!(p1, p3);
}
