use std::sync::Arc;

use m2curl_core::repr::ContrastiveConfig;
use m2curl_core::rl::*;
use m2curl_core::CoreError;
use m2curl_numerics::{blend_params, Binding, Module, Parameter, Tape, Tensor};
use m2curl_sim::{Environment, Observation, PushConfig, PushWorld};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const IMAGE: usize = 16;

fn contrastive(beta: f64) -> ContrastiveConfig {
    ContrastiveConfig {
        embed_dim: 8,
        head_hidden: 16,
        crop_size: 12,
        beta,
        ..ContrastiveConfig::sac_default()
    }
}

fn sac_cfg() -> SacConfig {
    SacConfig {
        batch_size: 8,
        hidden_sizes: vec![16],
        replay_capacity: 64,
        warmup_steps: 0,
        ..SacConfig::default()
    }
}

fn ppo_cfg(epochs: usize) -> PpoConfig {
    PpoConfig {
        rollout_horizon: 12,
        minibatch_size: 6,
        epochs_per_update: epochs,
        hidden_sizes: vec![16],
        ..PpoConfig::default()
    }
}

fn mode(algorithm: Algorithm, representation: Representation) -> AgentMode {
    AgentMode {
        algorithm,
        representation,
        modalities: Modalities::Both,
    }
}

fn world() -> PushWorld {
    PushWorld::new(PushConfig {
        image_size: IMAGE,
        horizon: 10,
        ..PushConfig::default()
    })
    .unwrap()
}

/// A short trajectory under random actions.
fn trajectory(n: usize, seed: u64) -> Vec<(Arc<Observation>, [f64; 2], f64, Arc<Observation>, bool)> {
    let mut env = world();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut obs = Arc::new(env.reset(seed));
    let mut out = Vec::new();
    for _ in 0..n {
        let a = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let r = env.step(a).unwrap();
        let next = Arc::new(r.observation);
        out.push((obs.clone(), a, r.reward, next.clone(), r.done));
        obs = if r.done { Arc::new(env.reset(seed + 1)) } else { next };
    }
    out
}

fn filled_sac(m: AgentMode, beta: f64, seed: u64) -> SacAgent {
    let mut agent = SacAgent::new(m, sac_cfg(), contrastive(beta), 7, IMAGE, seed).unwrap();
    for (o, a, r, n, d) in trajectory(24, 3) {
        agent.store(Transition {
            observation: o,
            action: a,
            reward: r,
            next_observation: n,
            done: d,
        });
    }
    agent
}

#[test]
fn replay_buffer_is_fifo() {
    let steps = trajectory(5, 0);
    let mut buf = ReplayBuffer::new(3).unwrap();
    for (o, a, r, n, d) in &steps {
        buf.push(Transition {
            observation: o.clone(),
            action: *a,
            reward: *r,
            next_observation: n.clone(),
            done: *d,
        });
    }
    assert_eq!(buf.len(), 3);
    let kept: Vec<f64> = (0..3).map(|i| buf.get(i).unwrap().reward).collect();
    let expect: Vec<f64> = steps[2..].iter().map(|s| s.2).collect();
    assert_eq!(kept, expect);
    assert!(ReplayBuffer::new(0).is_err());
}

#[test]
fn deterministic_actions_repeat_and_exploration_is_bounded() {
    let steps = trajectory(1, 1);
    for rep in [Representation::M2curl, Representation::Vanilla, Representation::State] {
        let mut agent = SacAgent::new(mode(Algorithm::Sac, rep), sac_cfg(), contrastive(0.1), 7, IMAGE, 4).unwrap();
        let a = agent.act(&steps[0].0, true).unwrap();
        let b = agent.act(&steps[0].0, true).unwrap();
        assert_eq!(a, b);
        for _ in 0..200 {
            let s = agent.act(&steps[0].0, false).unwrap();
            let e = agent.explore();
            assert!(s.iter().chain(&e).all(|x| (-1.0..=1.0).contains(x)));
        }
    }
}

#[test]
fn tanh_log_prob_matches_change_of_variables() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let policy = GaussianPolicy::squashed("pi", 3, &[8], &mut rng);
    let feats = Tensor::new(&[4, 3], (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
    let noise = standard_normal(&[4, 2], &mut rng);
    let mut tape = Tape::new();
    let f = tape.constant(feats).unwrap();
    let (mean, log_std) = policy.distribution(&mut tape, f, Binding::Frozen).unwrap();
    let s = policy.sample(&mut tape, f, &noise, Binding::Frozen).unwrap();
    let (mu, ls, act, lp) = (tape.value(mean), tape.value(log_std), tape.value(s.action), tape.value(s.log_prob));
    for i in 0..4 {
        let mut oracle = 0.0;
        for j in 0..2 {
            let sigma = ls.row(i)[j].exp();
            let a: f64 = act.row(i)[j];
            let u = a.atanh();
            let z = (u - mu.row(i)[j]) / sigma;
            // density of u, then the Jacobian of a = tanh(u)
            oracle += -0.5 * z * z - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
            oracle -= (1.0 - a * a).ln();
        }
        assert!((lp.data()[i] - oracle).abs() < 1e-6, "row {i}: {} vs {oracle}", lp.data()[i]);
    }
}

#[test]
fn clipped_policy_starts_at_the_configured_log_std() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let policy = GaussianPolicy::clipped("p", 3, &[4], -1.25, &mut rng);
    assert_eq!(policy.log_std.as_ref().unwrap().value.data(), &[-1.25; ACTION_DIM]);
}

#[test]
fn tanh_log_prob_stays_finite_at_saturation() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let policy = GaussianPolicy::squashed("pi", 2, &[4], &mut rng);
    let noise = Tensor::new(&[2, 2], vec![40.0, -40.0, 400.0, -400.0]).unwrap();
    let mut tape = Tape::new();
    let f = tape.constant(Tensor::zeros(&[2, 2])).unwrap();
    let s = policy.sample(&mut tape, f, &noise, Binding::Frozen).unwrap();
    assert!(tape.value(s.log_prob).data().iter().all(|x| x.is_finite()));
    assert!(tape.value(s.action).data().iter().all(|a| a.abs() <= 1.0));
}

#[test]
fn bellman_targets_by_hand() {
    let y = bellman_targets(&[-1.0, -1.0], &[false, true], &[2.0, 2.0], &[3.0, 3.0], &[-0.5, -0.5], 0.9, 0.1);
    // −1 + 0.9·(min(2, 3) + 0.05)
    assert!((y[0] - 0.845).abs() < 1e-12);
    assert_eq!(y[1], -1.0);
}

proptest! {
    #[test]
    fn bellman_reduces_to_reward_without_discount(
        r in prop::collection::vec(-5.0..5.0f64, 1..8),
        q in -10.0..10.0f64,
        lp in -5.0..5.0f64,
    ) {
        let n = r.len();
        let y = bellman_targets(&r, &vec![false; n], &vec![q; n], &vec![q + 1.0; n], &vec![lp; n], 0.0, 0.2);
        prop_assert_eq!(&y, &r);
        let y = bellman_targets(&r, &vec![false; n], &vec![q; n], &vec![q + 1.0; n], &vec![lp; n], 0.5, 0.0);
        for (yi, ri) in y.iter().zip(&r) {
            prop_assert!((yi - (ri + 0.5 * q)).abs() < 1e-12);
        }
    }

    #[test]
    fn gae_with_zero_lambda_is_td_error(
        r in prop::collection::vec(-2.0..2.0f64, 2..10),
        v in -3.0..3.0f64,
        boot in -3.0..3.0f64,
        gamma in 0.0..1.0f64,
    ) {
        let n = r.len();
        let values: Vec<f64> = (0..n).map(|i| v + i as f64 * 0.1).collect();
        let (adv, ret) = gae(&r, &values, &vec![false; n], boot, gamma, 0.0).unwrap();
        for t in 0..n {
            let next = if t + 1 < n { values[t + 1] } else { boot };
            prop_assert!((adv[t] - (r[t] + gamma * next - values[t])).abs() < 1e-12);
            prop_assert!((ret[t] - adv[t] - values[t]).abs() < 1e-12);
        }
    }

    #[test]
    fn gae_with_unit_lambda_and_gamma_is_monte_carlo(
        r in prop::collection::vec(-2.0..2.0f64, 1..10),
        values in prop::collection::vec(-3.0..3.0f64, 10),
        boot in -3.0..3.0f64,
    ) {
        let n = r.len();
        let (adv, _) = gae(&r, &values[..n], &vec![false; n], boot, 1.0, 1.0).unwrap();
        for t in 0..n {
            let mc: f64 = r[t..].iter().sum::<f64>() + boot;
            prop_assert!((adv[t] - (mc - values[t])).abs() < 1e-9);
        }
    }
}

#[test]
fn gae_by_hand() {
    let (adv, _) = gae(&[1.0; 3], &[0.5; 3], &[false; 3], 0.0, 0.9, 0.8).unwrap();
    // δ = [0.95, 0.95, 0.5]; A₂ = 0.5, A₁ = 0.95 + 0.72·0.5, A₀ = 0.95 + 0.72·1.31
    for (a, e) in adv.iter().zip([1.8932, 1.31, 0.5]) {
        assert!((a - e).abs() < 1e-12, "{adv:?}");
    }
    let (adv, _) = gae(&[1.0; 3], &[0.5; 3], &[false, true, false], 0.0, 0.9, 0.8).unwrap();
    // the episode ends at t = 1: δ₁ = 0.5, A₀ = 0.95 + 0.72·0.5
    assert!((adv[0] - 1.31).abs() < 1e-12);
    assert!((adv[1] - 0.5).abs() < 1e-12);
    assert!(gae(&[], &[], &[], 0.0, 0.9, 0.9).is_err());
}

#[test]
fn clipped_surrogate_stops_gradient_outside_trust_region() {
    let lp = Parameter::new("lp", Tensor::from_vec(vec![1.5f64.ln(), 1.1f64.ln()]));
    let mut tape = Tape::new();
    let v = tape.param(&lp).unwrap();
    let (loss, ratio_mean) = clipped_surrogate(&mut tape, v, &[0.0, 0.0], &[1.0, 1.0], 0.2).unwrap();
    // sample 0 is clipped to 1.2, sample 1 passes through
    assert!((tape.item(loss).unwrap() + (1.2 + 1.1) / 2.0).abs() < 1e-12);
    assert!((ratio_mean - 1.3).abs() < 1e-12);
    let g = tape.backward(loss).unwrap();
    let g = g.get(lp.id()).unwrap();
    assert_eq!(g.data()[0], 0.0);
    // d/dlp of −r/2 with r = 1.1
    assert!((g.data()[1] + 0.55).abs() < 1e-12);
}

#[test]
fn ppo_first_minibatch_ratio_is_one_and_zero_epochs_change_nothing() {
    for rep in [Representation::M2curl, Representation::Rad, Representation::State] {
        let m = mode(Algorithm::Ppo, rep);
        let mut agent = PpoAgent::new(m, ppo_cfg(3), contrastive(1.0), 7, IMAGE, 2).unwrap();
        let steps = trajectory(12, 5);
        let mut out = Vec::new();
        for (o, _, r, next, d) in &steps {
            agent.act_collect(o).unwrap();
            out.push(agent.observe(*r, *d, next).unwrap());
        }
        // the update runs exactly when the rollout fills
        assert!(out[..11].iter().all(Option::is_none));
        assert!(out[11].as_ref().unwrap().contains_key("ratio_mean"));
        assert!(agent.rollout.is_empty());

        let mut agent = PpoAgent::new(m, ppo_cfg(2), contrastive(1.0), 7, IMAGE, 2).unwrap();
        fill_rollout(&mut agent, 12);
        let (_, stats) = agent.update().unwrap();
        assert_eq!(stats.ratio_means.len(), 2);
        assert!((stats.ratio_means[0][0] - 1.0).abs() < 1e-12, "{rep:?}: {:?}", stats.ratio_means);

        let mut agent = PpoAgent::new(m, ppo_cfg(0), contrastive(1.0), 7, IMAGE, 2).unwrap();
        fill_rollout(&mut agent, 12);
        let before = agent.flat_values();
        let (_, stats) = agent.update().unwrap();
        assert!(stats.ratio_means.is_empty());
        assert_eq!(before, agent.flat_values());
        assert!(agent.rollout.is_empty());
    }
}

fn fill_rollout(agent: &mut PpoAgent, n: usize) {
    let horizon = agent.cfg.rollout_horizon;
    // a longer horizon stores the steps without triggering the update
    agent.cfg.rollout_horizon = n + 1;
    for (o, _, r, next, d) in trajectory(n, 5) {
        agent.act_collect(&o).unwrap();
        assert!(agent.observe(r, d, &next).unwrap().is_none());
    }
    agent.cfg.rollout_horizon = horizon;
}

#[test]
fn ppo_odd_rollouts_keep_contrastive_minibatches_valid() {
    let mut cfg = ppo_cfg(1);
    cfg.rollout_horizon = 13;
    let mut agent = PpoAgent::new(mode(Algorithm::Ppo, Representation::M2curl), cfg, contrastive(1.0), 7, IMAGE, 1).unwrap();
    fill_rollout(&mut agent, 13);
    let (m, stats) = agent.update().unwrap();
    assert_eq!(stats.ratio_means[0].len(), 2);
    assert!(m["loss_mm"].is_finite());
}

#[test]
fn contrastive_weight_enters_linearly() {
    let mut agent = filled_sac(mode(Algorithm::Sac, Representation::M2curl), 1.0, 6);
    let batch = agent.prepare_batch().unwrap();
    let (_, cf) = agent.critic_step(&batch).unwrap();
    let noise = standard_normal(&[8, 2], &mut ChaCha8Rng::seed_from_u64(0));
    let mut tape = Tape::new();
    let (_, full) = agent.actor_loss(&mut tape, &batch, &cf, &noise).unwrap();
    agent.contrastive.beta = 0.1;
    let mut tape = Tape::new();
    let (_, tenth) = agent.actor_loss(&mut tape, &batch, &cf, &noise).unwrap();
    let mm = full.contrastive.unwrap().mm;
    assert_eq!(full.loss_actor, tenth.loss_actor);
    assert!((full.total - tenth.total - 0.9 * mm).abs() < 1e-9);
    assert!(mm > 0.0);
}

#[test]
fn critic_encoder_sync_respects_period_and_copies_values() {
    let agent = filled_sac(mode(Algorithm::Sac, Representation::Rad), 0.1, 1);
    let actor = agent.repr.as_ref().unwrap().online.clone();
    let mut critic = agent.critic_encoder.clone().unwrap();
    // perturb so a copy is observable
    critic.visit_mut(&mut |p| {
        let v = p.value.data().iter().map(|x| x + 1.0).collect();
        p.value = Tensor::new(p.value.shape(), v).unwrap();
    });
    let perturbed = critic.flat_values();
    assert!(!sync_critic_encoder(&actor, &mut critic, 5, 3).unwrap());
    assert_eq!(critic.flat_values(), perturbed);
    assert!(sync_critic_encoder(&actor, &mut critic, 5, 1).unwrap());
    assert_eq!(critic.flat_values(), actor.flat_values());
    assert!(sync_critic_encoder(&actor, &mut critic, 5, 0).is_err());

    // values are copied, not shared
    let mut ids_a = Vec::new();
    actor.visit(&mut |p| ids_a.push(p.id()));
    let mut ids_c = Vec::new();
    critic.visit(&mut |p| ids_c.push(p.id()));
    assert!(ids_a.iter().all(|id| !ids_c.contains(id)));
}

#[test]
fn polyak_target_lies_between_old_target_and_critic() {
    let mut agent = filled_sac(mode(Algorithm::Sac, Representation::State), 0.1, 2);
    let old = agent.target.flat_values();
    let batch = agent.prepare_batch().unwrap();
    agent.critic_step(&batch).unwrap();
    let critic = agent.critic.flat_values();
    let mut target = agent.target.clone();
    blend_params(&agent.critic, &mut target, 0.995).unwrap();
    for ((t, o), c) in target.flat_values().iter().zip(&old).zip(&critic) {
        assert!((t - (0.995 * o + 0.005 * c)).abs() < 1e-12);
        assert!(t >= &o.min(*c) && t <= &o.max(*c));
    }
}

#[test]
fn m2curl_without_contrastive_weight_trains_like_rad() {
    let mut m2 = filled_sac(mode(Algorithm::Sac, Representation::M2curl), 0.0, 8);
    let mut rad = filled_sac(mode(Algorithm::Sac, Representation::Rad), 0.0, 8);
    for _ in 0..3 {
        m2.update().unwrap();
        rad.update().unwrap();
    }
    assert_eq!(m2.actor.flat_values(), rad.actor.flat_values());
    assert_eq!(m2.critic.flat_values(), rad.critic.flat_values());
    assert_eq!(m2.flat_values(), rad.flat_values());
}

#[test]
fn update_metrics_carry_contrastive_terms_only_for_m2curl() {
    for (rep, mm) in [(Representation::M2curl, true), (Representation::Rad, false), (Representation::State, false)] {
        let mut agent = filled_sac(mode(Algorithm::Sac, rep), 0.1, 3);
        let m = agent.update().unwrap();
        for k in ["loss_critic", "loss_actor", "entropy"] {
            assert!(m[k].is_finite(), "{rep:?} {k}");
        }
        for k in ["loss_vv", "loss_tt", "loss_vt", "loss_tv", "loss_mm"] {
            assert_eq!(m.contains_key(k), mm, "{rep:?} {k}");
        }
        assert_eq!(agent.updates(), 1);
    }
}

#[test]
fn state_agents_need_no_encoders() {
    let agent = filled_sac(mode(Algorithm::Sac, Representation::State), 0.1, 0);
    assert!(agent.repr.is_none() && agent.critic_encoder.is_none());
    assert_eq!(agent.actor.input_dim(), 7);
}

#[test]
fn mode_and_config_errors() {
    let single = AgentMode {
        modalities: Modalities::VisualOnly,
        ..mode(Algorithm::Sac, Representation::M2curl)
    };
    assert!(matches!(
        SacAgent::new(single, sac_cfg(), contrastive(0.1), 7, IMAGE, 0),
        Err(CoreError::Config(_))
    ));
    assert!(SacAgent::new(mode(Algorithm::Ppo, Representation::Rad), sac_cfg(), contrastive(0.1), 7, IMAGE, 0).is_err());
    let bad = SacConfig {
        gamma: 1.0,
        ..sac_cfg()
    };
    assert!(bad.validate().is_err());
    let bad = PpoConfig {
        minibatch_size: 1,
        ..ppo_cfg(1)
    };
    assert!(bad.validate().is_err());
    let bad = PpoConfig {
        init_log_std: 3.0,
        ..ppo_cfg(1)
    };
    assert!(bad.validate().is_err());
    // crops larger than the render are rejected
    assert!(SacAgent::new(mode(Algorithm::Sac, Representation::Rad), sac_cfg(), contrastive(0.1), 7, 10, 0).is_err());
}
