use super::*;
use crate::envs::PointMass;
use crate::numcore::gradcheck::check_module;
use crate::replay::Minibatch;
use crate::rng::seeded;
use proptest::prelude::*;
use rand::Rng;

/// Member `i` answers `values[i]` for every token.
struct ConstantTargets(Vec<f64>);

impl TargetCritic<f64> for ConstantTargets {
    fn ensemble_size(&self) -> usize {
        self.0.len()
    }
    fn target_values(&self, member: usize, pairs: &Tensor<f64>, _: usize) -> Result<Vec<f64>> {
        Ok(vec![self.0[member]; pairs.rows()])
    }
}

/// Zero actions with a fixed log-probability.
struct FixedSampler(f64);

impl ActionSampler<f64> for FixedSampler {
    fn sample_next(&self, states: &Tensor<f64>, _: &mut StreamRng) -> Result<(Tensor<f64>, Vec<f64>)> {
        Ok((Tensor::zeros(&[states.rows(), 1]), vec![self.0; states.rows()]))
    }
}

fn tokens(rewards: &[f64], dones: &[bool], group_len: usize) -> Tokens<f64> {
    let rows = rewards.len();
    Tokens {
        group_len,
        pairs: Tensor::zeros(&[rows, 3]),
        next_states: Tensor::new(&[rows, 2], (0..2 * rows).map(|i| i as f64 * 0.1).collect()).unwrap(),
        rewards: rewards.to_vec(),
        dones: dones.to_vec(),
    }
}

fn target(
    tok: &Tokens<f64>,
    q: &[f64],
    logp: f64,
    subsets: Subsets,
    red: TargetReduction,
    gamma: f64,
    alpha: f64,
) -> Result<Vec<f64>> {
    compute_target(
        tok,
        &ConstantTargets(q.to_vec()),
        &FixedSampler(logp),
        &subsets,
        red,
        gamma,
        alpha,
        &mut seeded(0),
    )
    .map(|t| t.y)
}

#[test]
fn zero_discount_target_is_reward() {
    let tok = tokens(&[1.5, -2.0], &[false, false], 1);
    let y = target(
        &tok,
        &[7.0, 9.0],
        -3.0,
        Subsets::Shared(vec![0, 1]),
        TargetReduction::Min,
        0.0,
        0.3,
    )
    .unwrap();
    assert_eq!(y, vec![1.5, -2.0]);
}

#[test]
fn terminal_tokens_ignore_bootstrap() {
    let tok = tokens(&[1.0, 1.0], &[true, false], 2);
    let y = target(
        &tok,
        &[100.0, 50.0],
        -1.0,
        Subsets::Shared(vec![0, 1]),
        TargetReduction::Min,
        0.9,
        0.2,
    )
    .unwrap();
    assert_eq!(y[0], 1.0);
    assert!((y[1] - (1.0 + 0.9 * (50.0 + 0.2))).abs() < 1e-12);
}

#[test]
fn hand_computed_target() {
    let tok = tokens(&[1.0], &[false], 1);
    let y = target(
        &tok,
        &[2.0, 4.0],
        -5.0,
        Subsets::Shared(vec![0, 1]),
        TargetReduction::Min,
        0.9,
        0.0,
    )
    .unwrap();
    assert!((y[0] - 2.8).abs() < 1e-12);
    let y = target(
        &tok,
        &[2.0, 4.0],
        -5.0,
        Subsets::Shared(vec![0, 1]),
        TargetReduction::Mean,
        0.9,
        0.0,
    )
    .unwrap();
    assert!((y[0] - (1.0 + 0.9 * 3.0)).abs() < 1e-12);
    // entropy bonus: 1 + 1·(3 − 0.5·(−2))
    let y = target(
        &tok,
        &[3.0],
        -2.0,
        Subsets::Shared(vec![0]),
        TargetReduction::Min,
        1.0,
        0.5,
    )
    .unwrap();
    assert!((y[0] - 5.0).abs() < 1e-12);
}

#[test]
fn per_group_subsets_apply_to_their_group() {
    let tok = tokens(&[0.0; 4], &[false; 4], 2);
    let subsets = Subsets::PerGroup(vec![vec![0, 1], vec![2]]);
    let y = target(&tok, &[1.0, 5.0, 3.0], 0.0, subsets, TargetReduction::Min, 1.0, 0.0).unwrap();
    assert_eq!(y, vec![1.0, 1.0, 3.0, 3.0]);
    let wrong = Subsets::PerGroup(vec![vec![0]]);
    assert!(target(&tok, &[1.0, 5.0, 3.0], 0.0, wrong, TargetReduction::Min, 1.0, 0.0).is_err());
}

#[test]
fn target_errors() {
    let tok = tokens(&[0.0], &[false], 1);
    let nan = target(
        &tok,
        &[f64::NAN],
        0.0,
        Subsets::Shared(vec![0]),
        TargetReduction::Min,
        0.9,
        0.1,
    );
    assert!(matches!(nan, Err(Error::Numeric(_))));
    let bad_logp = target(
        &tok,
        &[1.0],
        f64::INFINITY,
        Subsets::Shared(vec![0]),
        TargetReduction::Min,
        0.9,
        0.1,
    );
    assert!(matches!(bad_logp, Err(Error::Numeric(_))));
    for s in [vec![], vec![0, 0], vec![3]] {
        assert!(target(
            &tok,
            &[1.0, 2.0],
            0.0,
            Subsets::Shared(s),
            TargetReduction::Min,
            0.9,
            0.1
        )
        .is_err());
    }
}

fn small_config() -> TrainerConfig {
    TrainerConfig {
        n: 3,
        m: 2,
        g: 1,
        batch_size: 8,
        group_size: 2,
        d_model: 4,
        heads: 2,
        policy_hidden: 8,
        buffer_capacity: 1000,
        init_random_steps: 10,
        total_env_steps: 100,
        ..TrainerConfig::default()
    }
}

fn small_agent(variant: &str) -> Agent<f64> {
    let cfg = TrainerConfig {
        variant: variant.into(),
        ..small_config()
    };
    Agent::new(&cfg, &VariantRegistry::with_builtins(), 2, 1).unwrap()
}

fn random_minibatch(rows: usize, rng: &mut StreamRng) -> Minibatch<f64> {
    let transitions = (0..rows)
        .map(|_| Transition {
            s: vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
            a: vec![rng.gen_range(-1.0..1.0)],
            r: rng.gen_range(-1.0..0.0),
            s_next: vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
            done: rng.gen_bool(0.2),
        })
        .collect();
    Minibatch {
        transitions,
        slots: (0..rows).collect(),
    }
}

#[test]
fn exact_targets_give_zero_loss_and_gradient() {
    let mut agent = small_agent("droq_base");
    let member = &mut agent.critic.members_mut()[0];
    member.head.weight.data_mut().iter_mut().for_each(|w| *w = 0.0);
    member.head.bias.data_mut()[0] = 1.25;
    let pairs = Tensor::from_rows(&[vec![0.1, 0.2, 0.3], vec![-0.4, 0.0, 0.9]]).unwrap();
    let mut tape = Tape::new();
    let loss = critic_loss(&mut tape, member, &pairs, 1, &[1.25, 1.25], &mut ForwardMode::Eval).unwrap();
    assert_eq!(tape.value(loss)[0], 0.0);
    let grads = tape.backward(loss).unwrap();
    for p in member.params() {
        if let Some(g) = grads.get(p.id()) {
            assert!(g.iter().all(|&x| x == 0.0));
        }
    }
}

#[test]
fn scalar_loss_and_derivative() {
    let mut agent = small_agent("redq_base");
    let member = &mut agent.critic.members_mut()[0];
    member.head.weight.data_mut().iter_mut().for_each(|w| *w = 0.0);
    member.head.bias.data_mut()[0] = 0.0;
    let pairs = Tensor::from_rows(&[vec![0.3, -0.2, 0.5]]).unwrap();
    let mut tape = Tape::new();
    let loss = critic_loss(&mut tape, member, &pairs, 1, &[2.0], &mut ForwardMode::Eval).unwrap();
    assert_eq!(tape.value(loss)[0], 4.0);
    let grads = tape.backward(loss).unwrap();
    // Q = ... + bias, so dLoss/dbias = dLoss/dQ
    assert_eq!(grads.get(member.head.bias.id()).unwrap()[0], -4.0);
    assert!(matches!(
        critic_loss(&mut Tape::new(), member, &pairs, 1, &[2.0, 1.0], &mut ForwardMode::Eval),
        Err(Error::Contract(_))
    ));
}

#[test]
fn critic_loss_gradients_match_finite_differences() {
    for variant in ["mha_redq", "mha_droq", "identity_droq", "redq_base", "droq_base"] {
        let mut agent = small_agent(variant);
        let mut rng = seeded(11);
        let mb = random_minibatch(6, &mut rng);
        let groups = bootstrap_groups(6, 2, 3, &mut rng).unwrap();
        let tok = mb.gather(&groups).unwrap();
        let y = compute_target(
            &tok,
            &agent.critic,
            &agent.policy,
            &Subsets::Shared(vec![0, 2]),
            TargetReduction::Min,
            0.99,
            0.2,
            &mut rng,
        )
        .unwrap()
        .y;
        let member = &mut agent.critic.members_mut()[1];
        let report = check_module(member, 1e-6, |m, tape| {
            let mut drng = seeded(5);
            critic_loss(
                tape,
                m,
                &tok.pairs,
                tok.group_len,
                &y,
                &mut ForwardMode::Train(&mut drng),
            )
        })
        .unwrap();
        assert!(report.passes(1e-4), "{variant}: {report:?}");
    }
}

#[test]
fn targets_are_stable_across_a_critic_step() {
    let mut agent = small_agent("mha_redq");
    let mut rng = seeded(2);
    let mb = random_minibatch(8, &mut rng);
    let tok = mb.gather(&bootstrap_groups(8, 2, 4, &mut rng).unwrap()).unwrap();
    let subsets = Subsets::Shared(vec![0, 1]);
    let y = |a: &Agent<f64>| {
        compute_target(
            &tok,
            &a.critic,
            &a.policy,
            &subsets,
            TargetReduction::Min,
            0.99,
            0.1,
            &mut seeded(3),
        )
        .unwrap()
    };
    let before = y(&agent);
    let mut opt = Adam::new(AdamConfig::default());
    let member = &mut agent.critic.members_mut()[0];
    critic_update(member, &tok.pairs, tok.group_len, &before.y, &mut opt, &mut seeded(4)).unwrap();
    let after = y(&agent);
    assert!(before.y.iter().zip(&after.y).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn polyak_distance_decays_geometrically() {
    let mut agent = small_agent("mha_redq");
    // move online params away from their targets, then freeze them
    for m in agent.critic.members_mut() {
        for p in m.params_mut() {
            p.data_mut().iter_mut().for_each(|w| *w += 0.5);
        }
    }
    let dist = |c: &CriticEnsemble<f64>| {
        c.members()
            .iter()
            .zip(c.targets())
            .flat_map(|(m, t)| m.params().into_iter().zip(t.params()))
            .flat_map(|(a, b)| {
                a.data()
                    .iter()
                    .zip(b.data())
                    .map(|(x, y)| (x - y).powi(2))
                    .collect::<Vec<_>>()
            })
            .sum::<f64>()
            .sqrt()
    };
    let d0 = dist(&agent.critic);
    for k in 1..=100 {
        agent.critic.polyak_update(0.995).unwrap();
        let expected = d0 * 0.995f64.powi(k);
        assert!((dist(&agent.critic) - expected).abs() < 1e-10, "call {k}");
    }
    assert!(agent.critic.polyak_update(1.5).is_err());
}

fn trainer(cfg: TrainerConfig) -> Trainer<f64> {
    Trainer::new(cfg, &VariantRegistry::with_builtins(), Box::new(PointMass::one_d())).unwrap()
}

#[test]
fn warmup_only_interacts() {
    let mut tr = trainer(small_config());
    for _ in 0..10 {
        let m = tr.train_step().unwrap();
        assert!(m.critic_loss.is_none() && m.actor_loss.is_none());
    }
    let c = tr.counters();
    assert_eq!((c.env_steps, c.critic_rounds, c.actor_rounds), (10, 0, 0));
    assert_eq!(tr.buffer.len(), 10);
}

#[test]
fn one_round_per_step_with_g_one() {
    let mut tr = trainer(small_config());
    for _ in 0..10 {
        tr.train_step().unwrap();
    }
    let m = tr.train_step().unwrap();
    assert!(m.critic_loss.is_some() && m.actor_loss.is_some());
    let c = tr.counters();
    assert_eq!(
        (c.critic_rounds, c.polyak_calls, c.actor_rounds, c.member_updates),
        (1, 1, 1, 3)
    );
}

#[test]
fn update_accounting_with_twenty_rounds() {
    let mut tr = trainer(TrainerConfig {
        g: 20,
        ..small_config()
    });
    for _ in 0..10 + 25 {
        tr.train_step().unwrap();
    }
    let c = tr.counters();
    assert_eq!((c.critic_rounds, c.polyak_calls, c.actor_rounds), (500, 500, 25));
    assert_eq!(c.member_updates, 1500);
}

#[test]
fn episodes_reset_at_time_limit() {
    let mut tr = trainer(TrainerConfig {
        init_random_steps: 1000,
        ..small_config()
    });
    let mut ends = Vec::new();
    for _ in 0..450 {
        if let Some(r) = tr.train_step().unwrap().episode_return {
            ends.push(r);
        }
    }
    assert_eq!(ends.len(), 2);
    assert_eq!(tr.counters().episodes, 2);
    assert!(ends.iter().all(|r| r.is_finite() && *r <= 0.0));
}

#[test]
fn same_seed_same_metrics() {
    for (groups, scope) in [
        (GroupsPerUpdate::Cover, SubsetScope::PerUpdate),
        (GroupsPerUpdate::PerElement, SubsetScope::PerGroup),
    ] {
        let cfg = TrainerConfig {
            g: 2,
            groups_per_update: groups,
            subset_scope: scope,
            ..small_config()
        };
        let run = |cfg: &TrainerConfig| {
            let mut tr = trainer(cfg.clone());
            (0..40).map(|_| tr.train_step().unwrap()).collect::<Vec<_>>()
        };
        let a = run(&cfg);
        assert_eq!(a, run(&cfg));
        let other = run(&TrainerConfig { seed: 1, ..cfg.clone() });
        assert_ne!(a, other);
    }
}

#[test]
fn config_validation() {
    assert!(TrainerConfig::default().validate().is_ok());
    let bad = [
        TrainerConfig {
            m: 11,
            ..TrainerConfig::default()
        },
        TrainerConfig {
            m: 0,
            ..TrainerConfig::default()
        },
        TrainerConfig {
            g: 0,
            ..TrainerConfig::default()
        },
        TrainerConfig {
            gamma: 0.0,
            ..TrainerConfig::default()
        },
        TrainerConfig {
            gamma: 1.01,
            ..TrainerConfig::default()
        },
        TrainerConfig {
            rho: -0.1,
            ..TrainerConfig::default()
        },
        TrainerConfig {
            heads: 3,
            ..TrainerConfig::default()
        },
        TrainerConfig {
            group_size: 0,
            ..TrainerConfig::default()
        },
    ];
    for cfg in bad {
        assert!(matches!(cfg.validate(), Err(Error::Parameter(_))), "{cfg:?}");
    }
    match (TrainerConfig {
        m: 11,
        ..TrainerConfig::default()
    })
    .validate()
    {
        Err(Error::Parameter(msg)) => assert!(msg.contains("M <= N")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn round_subsets_are_uniform_over_pairs() {
    let cfg = TrainerConfig::default();
    let draws = 10_000u64;
    let mut counts = std::collections::HashMap::new();
    for k in 0..draws {
        let s = round_subset(&cfg, k / 20, k % 20).unwrap();
        assert_eq!(s.len(), 2);
        *counts.entry((s[0], s[1])).or_insert(0u64) += 1;
    }
    assert_eq!(counts.len(), 45);
    let p = 1.0 / 45.0;
    let mean = draws as f64 * p;
    let sd = (draws as f64 * p * (1.0 - p)).sqrt();
    for (pair, c) in counts {
        assert!((c as f64 - mean).abs() < 3.0 * sd, "{pair:?}: {c}");
    }
}

#[test]
fn evaluation_is_repeatable() {
    let tr = trainer(small_config());
    let a = evaluate_return(&tr.agent.policy, tr.env(), 3, 0, 1).unwrap();
    assert_eq!(a, evaluate_return(&tr.agent.policy, tr.env(), 3, 0, 1).unwrap());
    assert!(a.is_finite() && a <= 0.0);
    let protocol = BiasProtocol {
        points: 4,
        rollouts: 2,
        horizon: 50,
    };
    let (bias, dist, avg_q) = evaluate_bias(&tr.agent, tr.env(), 2, 0.99, protocol, 0, 1).unwrap();
    let bias = bias.unwrap();
    assert_eq!(bias.bias.len(), 4);
    assert!(bias.mean_normalized_bias.is_finite() && avg_q.is_finite());
    assert_eq!(dist.max_q.len(), 4);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn done_target_equals_reward(
        r in -10.0f64..10.0,
        q in prop::collection::vec(-100.0f64..100.0, 1..6),
        logp in -10.0f64..10.0,
        gamma in 0.01f64..1.0,
        alpha in 0.0f64..2.0,
    ) {
        let tok = tokens(&[r], &[true], 1);
        let all: Vec<usize> = (0..q.len()).collect();
        let y = target(&tok, &q, logp, Subsets::Shared(all), TargetReduction::Min, gamma, alpha).unwrap();
        prop_assert_eq!(y[0], r);
    }

    #[test]
    fn min_target_never_exceeds_mean_target(
        q in prop::collection::vec(-100.0f64..100.0, 2..6),
        r in -5.0f64..5.0,
    ) {
        let tok = tokens(&[r], &[false], 1);
        let all: Vec<usize> = (0..q.len()).collect();
        let lo = target(&tok, &q, 0.0, Subsets::Shared(all.clone()), TargetReduction::Min, 0.9, 0.0).unwrap()[0];
        let hi = target(&tok, &q, 0.0, Subsets::Shared(all), TargetReduction::Mean, 0.9, 0.0).unwrap()[0];
        prop_assert!(lo <= hi + 1e-12);
    }
}
