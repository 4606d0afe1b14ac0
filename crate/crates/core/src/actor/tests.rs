use super::*;
use crate::critic::{ArchSpec, VariantRegistry};
use crate::layers::AttentionScale;
use crate::numcore::gradcheck::check_module;
use crate::rng::seeded;
use proptest::prelude::*;

/// 1-D policy whose heads ignore the state: mean `mu`, std `sigma`.
fn fixed_policy(mu: f64, sigma: f64) -> GaussianPolicy<f64> {
    let mut p = GaussianPolicy::new(1, 1, 4, &mut seeded(0)).unwrap();
    for t in p.params_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    p.mean.bias.data_mut()[0] = mu;
    p.log_std.bias.data_mut()[0] = sigma.ln();
    p
}

/// Q(s, a) = first action component.
struct LinearInAction {
    state_dim: usize,
}

impl ActionValue<f64> for LinearInAction {
    fn action_value(&self, tape: &mut Tape<f64>, pairs: Var) -> Result<Var> {
        tape.slice_cols(pairs, self.state_dim, 1)
    }
}

fn ensemble(seed: u64) -> CriticEnsemble<f64> {
    let arch = ArchSpec {
        state_dim: 3,
        action_dim: 2,
        d_model: 8,
        heads: 2,
        attention_scale: AttentionScale::PerHead,
        dropout: 0.01,
    };
    CriticEnsemble::new(&VariantRegistry::with_builtins(), "mha_droq", &arch, 3, seed).unwrap()
}

#[test]
fn log_std_floor_gives_deterministic_mean_action() {
    let p = fixed_policy(0.0, 1e-30);
    let mut rng = seeded(1);
    for _ in 0..100 {
        let (a, logp) = p.sample_action(&[0.3], &mut rng).unwrap();
        assert!(a[0].abs() < 1e-7);
        assert!(logp.is_finite());
    }
}

#[test]
fn samples_stay_inside_the_box() {
    let mut rng = seeded(2);
    let p = GaussianPolicy::<f64>::new(3, 2, 16, &mut rng).unwrap();
    let states = standard_normal::<f64, _>(&[500, 3], &mut rng);
    let (a, logp) = p.sample_batch(&states, &mut rng).unwrap();
    assert!(a.data().iter().all(|x| x.abs() < 1.0));
    assert!(logp.iter().all(|l| l.is_finite()));
    let det = p.act_deterministic(states.row(0)).unwrap();
    assert!(det.iter().all(|x| x.abs() < 1.0));
}

#[test]
fn sampled_logp_matches_closed_form_density() {
    let mut rng = seeded(3);
    let p = GaussianPolicy::<f64>::new(3, 2, 16, &mut rng).unwrap();
    let s = [0.2, -0.4, 0.9];
    for _ in 0..20 {
        let (a, logp) = p.sample_action(&s, &mut rng).unwrap();
        let direct = p.log_prob(&s, &a).unwrap();
        assert!((logp - direct).abs() < 1e-6 * logp.abs().max(1.0), "{logp} vs {direct}");
    }
}

#[test]
fn histogram_matches_density() {
    let p = fixed_policy(0.4, 0.7);
    let mut rng = seeded(4);
    let n = 100_000;
    let bins = 40;
    let width = 2.0 / bins as f64;
    let mut counts = vec![0usize; bins];
    for _ in 0..n {
        let (a, _) = p.sample_action(&[0.0], &mut rng).unwrap();
        counts[(((a[0] + 1.0) / width) as usize).min(bins - 1)] += 1;
    }
    let mut worst: f64 = 0.0;
    for (b, &c) in counts.iter().enumerate() {
        // bin probability from the density, midpoint rule on 50 sub-points
        let lo = -1.0 + b as f64 * width;
        let h = width / 50.0;
        let mass: f64 = (0..50)
            .map(|i| p.log_prob(&[0.0], &[lo + (i as f64 + 0.5) * h]).unwrap().exp() * h)
            .sum();
        worst = worst.max((c as f64 / n as f64 - mass).abs());
    }
    assert!(worst < 0.02, "sup-norm {worst}");
}

#[test]
fn density_integrates_to_one() {
    for (mu, sigma) in [(0.0, 1.0), (0.8, 0.3), (-1.5, 0.5)] {
        let p = fixed_policy(mu, sigma);
        let n = 20_000;
        let h = 2.0 / n as f64;
        let total: f64 = (0..n)
            .map(|i| p.log_prob(&[0.0], &[-1.0 + (i as f64 + 0.5) * h]).unwrap().exp() * h)
            .sum();
        assert!((total - 1.0).abs() < 0.02, "({mu}, {sigma}): {total}");
    }
}

#[test]
fn deterministic_action_properties() {
    let p = fixed_policy(0.0, 1.0);
    assert_eq!(p.act_deterministic(&[5.0]).unwrap(), vec![0.0]);

    let mut rng = seeded(5);
    let q = GaussianPolicy::<f64>::new(3, 2, 8, &mut rng).unwrap();
    assert_eq!(
        q.act_deterministic(&[1.0, 2.0, 3.0]).unwrap(),
        q.act_deterministic(&[1.0, 2.0, 3.0]).unwrap()
    );

    // mode of the sampled distribution
    let p = fixed_policy(0.5, 0.2);
    let bins = 100;
    let mut counts = vec![0usize; bins];
    for _ in 0..100_000 {
        let (a, _) = p.sample_action(&[0.0], &mut rng).unwrap();
        counts[(((a[0] + 1.0) / 0.02) as usize).min(bins - 1)] += 1;
    }
    let peak = (0..bins).max_by_key(|&b| counts[b]).unwrap();
    let mode = -1.0 + (peak as f64 + 0.5) * 0.02;
    let det = p.act_deterministic(&[0.0]).unwrap()[0];
    assert!((mode - det).abs() < 0.05, "mode {mode} vs {det}");
}

#[test]
fn non_finite_inputs_are_numeric_errors() {
    let p = fixed_policy(0.0, 1.0);
    assert!(matches!(p.act_deterministic(&[f64::NAN]), Err(Error::Numeric(_))));
    let mut big = fixed_policy(0.0, 1.0);
    big.mean.weight.data_mut()[0] = f64::MAX;
    big.hidden[0].bias.data_mut().iter_mut().for_each(|v| *v = 1.0);
    big.hidden[1].weight.data_mut().iter_mut().for_each(|v| *v = f64::MAX);
    assert!(matches!(
        big.sample_action(&[1.0], &mut seeded(0)),
        Err(Error::Numeric(_))
    ));
}

#[test]
fn zero_critic_without_entropy_gives_zero_gradient() {
    let mut critics = ensemble(1);
    for m in critics.members_mut() {
        for p in m.params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let mut rng = seeded(2);
    let policy = GaussianPolicy::<f64>::new(3, 2, 8, &mut rng).unwrap();
    let states = standard_normal::<f64, _>(&[6, 3], &mut rng);
    let eps = standard_normal::<f64, _>(&[6, 2], &mut rng);
    let mut tape = Tape::new();
    let (loss, _) = actor_loss(&policy, &critics, &mut tape, &states, &eps, 0.0).unwrap();
    let grads = tape.backward(loss).unwrap();
    for p in policy.params() {
        if let Some(g) = grads.get(p.id()) {
            assert!(g.iter().all(|&x| x == 0.0));
        }
    }
}

#[test]
fn ascent_on_linear_critic_raises_action() {
    let mut rng = seeded(6);
    let mut policy = GaussianPolicy::<f64>::new(1, 1, 8, &mut rng).unwrap();
    let critic = LinearInAction { state_dim: 1 };
    let mut opt = Adam::new(AdamConfig {
        lr: 1e-3,
        ..AdamConfig::default()
    });
    let states = Tensor::new(&[1, 1], vec![0.5]).unwrap();
    let mut last = policy.act_deterministic(&[0.5]).unwrap()[0];
    for _ in 0..100 {
        actor_update(&mut policy, &critic, &states, 0.0, &mut opt, &mut rng).unwrap();
        let now = policy.act_deterministic(&[0.5]).unwrap()[0];
        assert!(now > last, "{now} <= {last}");
        last = now;
    }
}

#[test]
fn actor_loss_gradients_match_finite_differences() {
    let critics = ensemble(7);
    let mut rng = seeded(8);
    let mut policy = GaussianPolicy::<f64>::new(3, 2, 8, &mut rng).unwrap();
    let states = standard_normal::<f64, _>(&[5, 3], &mut rng);
    let eps = standard_normal::<f64, _>(&[5, 2], &mut rng);
    let report = check_module(&mut policy, 1e-6, |p, tape| {
        actor_loss(p, &critics, tape, &states, &eps, 0.2).map(|(l, _)| l)
    })
    .unwrap();
    assert!(report.passes(1e-4), "{report:?}");
}

#[test]
fn actor_update_leaves_critics_bitwise_unchanged() {
    let critics = ensemble(9);
    let before: Vec<Vec<f64>> = critics.params().iter().map(|p| p.data().to_vec()).collect();
    let mut rng = seeded(10);
    let mut policy = GaussianPolicy::<f64>::new(3, 2, 8, &mut rng).unwrap();
    let mut opt = Adam::new(AdamConfig::default());
    let states = standard_normal::<f64, _>(&[8, 3], &mut rng);
    for _ in 0..3 {
        actor_update(&mut policy, &critics, &states, 0.1, &mut opt, &mut rng).unwrap();
    }
    let after: Vec<Vec<f64>> = critics.params().iter().map(|p| p.data().to_vec()).collect();
    assert_eq!(before, after);
    assert!(critics
        .params()
        .iter()
        .all(|p| p.grad().is_none_or(|g| g.iter().all(|&x| x == 0.0))));

    let empty = Tensor::<f64>::new(&[0, 3], vec![]).unwrap();
    assert!(matches!(
        actor_update(&mut policy, &critics, &empty, 0.1, &mut opt, &mut rng),
        Err(Error::Parameter(_))
    ));
}

#[test]
fn fixed_temperature_never_moves() {
    let mut t = Temperature::<f64>::new(0.2, AlphaMode::Fixed, -1.0, AdamConfig::default()).unwrap();
    for _ in 0..10 {
        t.update(&[3.0, 4.0]).unwrap();
    }
    assert!((t.alpha() - 0.2).abs() < 1e-15);
    assert!(Temperature::<f64>::new(0.0, AlphaMode::Auto, -1.0, AdamConfig::default()).is_err());
}

#[test]
fn temperature_stationary_at_target_entropy() {
    let mut t = Temperature::<f64>::new(0.5, AlphaMode::Auto, -2.0, AdamConfig::default()).unwrap();
    let before = t.log_alpha.data()[0];
    t.update(&[1.0, 3.0]).unwrap();
    assert_eq!(t.log_alpha.data()[0], before);
}

#[test]
fn low_entropy_raises_temperature() {
    let mut t = Temperature::<f64>::new(1.0, AlphaMode::Auto, -1.0, AdamConfig::default()).unwrap();
    let mut last = t.alpha();
    for _ in 0..100 {
        // entropy −logp = −2 < target −1
        t.update(&[2.0; 4]).unwrap();
        assert!(t.alpha() > last);
        last = t.alpha();
    }
    let mut t = Temperature::<f64>::new(1.0, AlphaMode::Auto, -1.0, AdamConfig::default()).unwrap();
    t.update(&[-5.0; 4]).unwrap();
    assert!(t.alpha() < 1.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn actions_in_box_for_any_state(seed in 0u64..10_000, scale in 0.1f64..100.0) {
        let mut rng = seeded(seed);
        let p = GaussianPolicy::<f64>::new(2, 3, 8, &mut rng).unwrap();
        let s: Vec<f64> = standard_normal::<f64, _>(&[2], &mut rng).data().iter().map(|x| scale * x).collect();
        let (a, logp) = p.sample_action(&s, &mut rng).unwrap();
        prop_assert!(a.iter().all(|x| x.abs() < 1.0));
        prop_assert!(logp.is_finite());
        prop_assert!(p.act_deterministic(&s).unwrap().iter().all(|x| x.abs() < 1.0));
    }
}
