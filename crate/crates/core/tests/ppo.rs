mod common;

use common::*;
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use molrl::denoiser::{AdamConfig, AdamState, DenoiserParams};
use molrl::ppo::{
    clip_term, clipped_loss, clipped_loss_and_grad, collect_episode, sample_timesteps, train,
    PpoConfig, RlState,
};

const STEPS: usize = 12;

fn setup(seed: u64) -> (MiniEnv, DenoiserParams) {
    let env = MiniEnv::new(STEPS, &[3, 4, 5, 5, 6]);
    let params = random_params(
        &mut ChaCha8Rng::seed_from_u64(seed),
        arch(2, 8, STEPS, 0),
        0.3,
    );
    (env, params)
}

/// Adds `U(-scale, scale)` to every scalar.
fn nudged(params: &DenoiserParams, seed: u64, scale: f64) -> DenoiserParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = params.clone();
    for i in 0..p.weights.num_scalars() {
        let v = p.weights.get_flat(i) + rng.gen_range(-scale..scale);
        p.weights.set_flat(i, v);
    }
    p
}

#[test]
fn identical_policies_give_unit_ratios_and_mean_reward_loss() {
    let (env, params) = setup(1);
    let batch = env.batch(&params, 6, 3);
    let ts = sample_timesteps(batch.len(), STEPS, 5, &mut ChaCha8Rng::seed_from_u64(0));
    let rep = clipped_loss(&params, &batch, &ts, &env.schedule, 3e-4).unwrap();
    assert!(rep.max_ratio_deviation() <= 1e-9);
    assert!((rep.loss + batch.mean_reward()).abs() <= 1e-9);
    assert_eq!(rep.n_terms, 30);
}

#[test]
fn clip_term_matches_brute_force_min() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..10_000 {
        let r: f64 = rng.gen_range(0.0..2.0);
        let reward: f64 = rng.gen_range(-1.0..1.0);
        let eps: f64 = rng.gen_range(0.0..0.5);
        let plain = r * reward;
        let clipped = r.clamp(1.0 - eps, 1.0 + eps) * reward;
        let want = plain.min(clipped);
        // d/dr of the selected branch
        let slope = if plain <= clipped { reward } else { 0.0 };
        assert_eq!(
            clip_term(r, reward, eps),
            (want, slope),
            "r={r} R={reward} eps={eps}"
        );
    }
}

#[test]
fn clipped_loss_gradient_matches_finite_differences() {
    let (env, params) = setup(2);
    let batch = env.batch(&params, 4, 5);
    let ts = sample_timesteps(batch.len(), STEPS, 4, &mut ChaCha8Rng::seed_from_u64(1));
    let mut moved = nudged(&params, 9, 2e-3);
    let eps = 0.05;
    let (rep, g) = clipped_loss_and_grad(&moved, &batch, &ts, &env.schedule, eps, 1).unwrap();
    assert!(
        rep.max_ratio_deviation() > 1e-4,
        "perturbation too small to exercise the ratio"
    );
    let n = moved.weights.num_scalars();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for i in sample_indices(&mut rng, n, 200.min(n)) {
        let orig = moved.weights.get_flat(i);
        moved.weights.set_flat(i, orig + h);
        let up = clipped_loss(&moved, &batch, &ts, &env.schedule, eps)
            .unwrap()
            .loss;
        moved.weights.set_flat(i, orig - h);
        let down = clipped_loss(&moved, &batch, &ts, &env.schedule, eps)
            .unwrap()
            .loss;
        moved.weights.set_flat(i, orig);
        let numeric = (up - down) / (2.0 * h);
        let analytic = g.weights.get_flat(i);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    assert!(worst < 1e-3, "worst relative error {worst}");
}

#[test]
fn huge_clip_range_gives_the_unclipped_objective() {
    let (env, params) = setup(3);
    let batch = env.batch(&params, 5, 1);
    let ts = sample_timesteps(batch.len(), STEPS, 3, &mut ChaCha8Rng::seed_from_u64(2));
    let moved = nudged(&params, 4, 1e-3);
    let rep = clipped_loss(&moved, &batch, &ts, &env.schedule, 1e12).unwrap();
    let mut sum = 0.0;
    for (i, rs) in rep.ratios.iter().enumerate() {
        for r in rs {
            sum += r * batch.rewards[i].total;
        }
    }
    assert!((rep.loss + sum / rep.n_terms as f64).abs() < 1e-12);
    assert_eq!(rep.clipped_fraction, 0.0);
}

#[test]
fn gradient_accumulation_is_a_regrouping() {
    let (env, params) = setup(4);
    let batch = env.batch(&params, 5, 8);
    let ts = sample_timesteps(batch.len(), STEPS, 3, &mut ChaCha8Rng::seed_from_u64(2));
    let moved = nudged(&params, 5, 1e-3);
    let (a, ga) = clipped_loss_and_grad(&moved, &batch, &ts, &env.schedule, 0.1, 1).unwrap();
    let (b, gb) = clipped_loss_and_grad(&moved, &batch, &ts, &env.schedule, 0.1, 3).unwrap();
    assert!((a.loss - b.loss).abs() < 1e-12);
    for i in 0..ga.weights.num_scalars() {
        let (x, y) = (ga.weights.get_flat(i), gb.weights.get_flat(i));
        assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
    }
}

#[test]
fn episode_rewards_follow_their_definition() {
    let (env, params) = setup(5);
    let batch = env.batch(&params, 6, 2);
    for r in &batch.rewards {
        assert_eq!(r.total, r.u_multi * r.bonus - r.lambda * r.diversity);
        assert!((0.0..=1.0).contains(&r.u_multi));
    }
    let single = env.batch(&params, 1, 2);
    assert_eq!(single.rewards[0].diversity, 0.0);
    let again = env.batch(&params, 6, 2);
    assert_eq!(batch.rewards, again.rewards);
    assert_eq!(batch.old_logp, again.old_logp);
    let cutoffs = env.cutoffs();
    assert!(collect_episode(&params, &env.env(), &cutoffs, 0, 0, 1).is_err());
}

fn ppo_cfg(episodes: usize) -> PpoConfig {
    PpoConfig {
        episodes,
        n_samples: 4,
        k_timesteps: 3,
        reuse: 2,
        learning_rate: 1e-3,
        clip_eps: 0.1,
        ..PpoConfig::default()
    }
}

#[test]
fn trainer_resume_and_identity_properties() {
    let (env, params) = setup(6);
    let fresh = || {
        (
            params.clone(),
            AdamState::new(&params, AdamConfig::default()),
            RlState::new(env.oracle.objectives()),
        )
    };

    let (mut p0, mut a0, mut s0) = fresh();
    assert!(train(
        &mut p0,
        &mut a0,
        &mut s0,
        &env.env(),
        &ppo_cfg(0),
        17,
        |_| Ok(())
    )
    .unwrap()
    .is_empty());
    assert_eq!(p0, params);

    let (mut p1, mut a1, mut s1) = fresh();
    let logs = train(
        &mut p1,
        &mut a1,
        &mut s1,
        &env.env(),
        &ppo_cfg(3),
        17,
        |_| Ok(()),
    )
    .unwrap();
    // every episode's first pass evaluates the frozen policy against itself
    assert!(logs.iter().all(|l| l.first_max_ratio_dev <= 1e-9));
    assert_ne!(p1, params);

    // interrupted after the first episode, state saved and reloaded, resumed
    let (mut p2, mut a2, mut s2) = fresh();
    let stop = train(
        &mut p2,
        &mut a2,
        &mut s2,
        &env.env(),
        &ppo_cfg(3),
        17,
        |_| Err(molrl::Error::Usage("stop".into())),
    );
    assert!(stop.is_err());
    assert_eq!(s2.next_episode, 1);
    let text = serde_json::to_string(&s2).unwrap();
    let mut s2: RlState = serde_json::from_str(&text).unwrap();
    let rest = train(
        &mut p2,
        &mut a2,
        &mut s2,
        &env.env(),
        &ppo_cfg(3),
        17,
        |_| Ok(()),
    )
    .unwrap();
    assert_eq!(rest.len(), 2);
    assert_eq!(rest[..], logs[1..]);
    assert_eq!(p1, p2);
    assert_eq!(s1, s2);
}
