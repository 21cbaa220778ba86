use bracp::envs_data::{
    collect, generate, normalized_score, reward_at, Controller, Dataset, DatasetMode,
    ScoreReference, TwoGoalPointMass, GOALS, HORIZON,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn dist(p: &[f64], g: [f64; 2]) -> f64 {
    ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2)).sqrt()
}

/// Plain re-statement of the point-mass update, one axis at a time.
fn oracle_step(s: [f64; 4], a: [f64; 2]) -> [f64; 4] {
    let mut out = s;
    for i in 0..2 {
        let (p, v) = (s[i], s[2 + i]);
        let f = a[i].clamp(-1.0, 1.0);
        out[i] = (p + 0.05 * v).clamp(-1.0, 1.0);
        out[2 + i] = (v + 0.05 * f - 0.1 * v).clamp(-1.0, 1.0);
    }
    out
}

#[test]
fn zero_action_from_rest_stays_put() {
    let start = [0.2, -0.35, 0.0, 0.0];
    let mut env = TwoGoalPointMass::from_state(start);
    let (next, r, done) = env.step(&[0.0, 0.0]);
    assert_eq!(&next[..2], &start[..2]);
    let want = -dist(&start, GOALS[0]).min(dist(&start, GOALS[1]));
    assert!((r - want).abs() < 1e-15);
    assert!(!done);
}

#[test]
fn constant_push_toward_first_goal_closes_the_distance() {
    let start = [0.01, -0.02, 0.0, 0.0];
    let g = GOALS[0];
    let d0 = dist(&start, g);
    let a = [(g[0] - start[0]) / d0, (g[1] - start[1]) / d0];
    let mut env = TwoGoalPointMass::from_state(start);
    let mut s = start;
    let mut prev = d0;
    for t in 1..=20 {
        let (next, _, _) = env.step(&a);
        s = oracle_step(s, a);
        for i in 0..4 {
            assert!((next[i] - s[i]).abs() < 1e-15, "step {t} component {i}");
        }
        let d = dist(&next, g);
        // the first step only builds velocity; the position starts moving after it
        if t == 1 {
            assert_eq!(d, prev);
        } else {
            assert!(d < prev, "step {t}: {d} !< {prev}");
        }
        prev = d;
    }
    assert!(prev < d0);
}

#[test]
fn episodes_end_exactly_at_the_horizon() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut env = TwoGoalPointMass::default();
    env.reset(&mut rng);
    for t in 1..=HORIZON {
        let a = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let (_, _, done) = env.step(&a);
        assert_eq!(done, t == HORIZON, "t = {t}");
    }
    assert_eq!(env.time(), HORIZON);
}

#[test]
fn reset_draws_start_near_origin_at_rest() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut env = TwoGoalPointMass::default();
    for _ in 0..100 {
        let s = env.reset(&mut rng);
        assert!(s[0].abs() <= 0.05 && s[1].abs() <= 0.05);
        assert_eq!(&s[2..], &[0.0, 0.0]);
        assert_eq!(env.time(), 0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn state_stays_in_bounds(
        start in prop::collection::vec(-1.0f64..=1.0, 4),
        actions in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 2), 1..150),
    ) {
        let mut env = TwoGoalPointMass::from_state([start[0], start[1], start[2], start[3]]);
        for a in &actions {
            let (s, r, _) = env.step(a);
            prop_assert!(s.iter().all(|x| (-1.0..=1.0).contains(x)));
            prop_assert!(r <= 0.0 && r.is_finite());
            prop_assert!((r - reward_at(&s)).abs() == 0.0);
        }
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn controller_quality_ordering() {
    let ret = |c: Controller| mean(&collect(&c, 100, 11).unwrap().episode_returns());
    let (random, medium, expert) = (
        ret(Controller::Random),
        ret(Controller::medium()),
        ret(Controller::expert()),
    );
    assert!(
        expert > medium && medium > random,
        "expert {expert}, medium {medium}, random {random}"
    );
}

#[test]
fn collected_dataset_has_horizon_times_episodes_rows() {
    let ds = collect(&Controller::medium(), 3, 0).unwrap();
    assert_eq!(ds.len(), 3 * HORIZON);
    assert_eq!(ds.dones.iter().filter(|d| **d == 1.0).count(), 3);
    assert_eq!(ds.episode_returns().len(), 3);
    assert_eq!(generate(DatasetMode::Expert, 1, 0).unwrap().len(), HORIZON);
    assert!(collect(&Controller::Random, 0, 0).is_err());
}

#[test]
fn transitions_chain_within_episodes() {
    let ds = collect(&Controller::expert(), 2, 5).unwrap();
    for i in 0..ds.len() - 1 {
        if ds.dones[i] == 0.0 {
            assert_eq!(ds.next_states.row(i), ds.states.row(i + 1));
        }
        let s = ds.states.row(i);
        let a = ds.actions.row(i);
        let want = oracle_step([s[0], s[1], s[2], s[3]], [a[0], a[1]]);
        assert_eq!(ds.next_states.row(i), &want[..]);
    }
}

#[test]
fn med_exp_is_the_concatenation_of_its_arms() {
    let seed = 9u64;
    let sub = |k: u64| seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k);
    let medium = collect(&Controller::medium(), 4, sub(1)).unwrap();
    let expert = collect(&Controller::expert(), 4, sub(2)).unwrap();
    let both = generate(DatasetMode::MedExp, 4, seed).unwrap();
    assert_eq!(both.len(), medium.len() + expert.len());
    let n = medium.len();
    for i in 0..n {
        assert_eq!(both.states.row(i), medium.states.row(i));
        assert_eq!(both.actions.row(n + i), expert.actions.row(i));
    }
    assert_eq!(&both.rewards[..n], &medium.rewards[..]);
    assert_eq!(&both.rewards[n..], &expert.rewards[..]);
    assert_eq!(
        both.meta.policy_tags,
        vec!["medium".to_string(), "expert".to_string()]
    );
}

#[test]
fn generation_is_a_pure_function_of_the_seed() {
    for mode in [DatasetMode::Random, DatasetMode::MedExp, DatasetMode::Mixed] {
        let a = generate(mode, 3, 21).unwrap().to_bytes().unwrap();
        let b = generate(mode, 3, 21).unwrap().to_bytes().unwrap();
        assert_eq!(a, b, "{}", mode.name());
        let c = generate(mode, 3, 22).unwrap().to_bytes().unwrap();
        assert_ne!(a, c);
    }
}

#[test]
fn dataset_file_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.bin");
    let ds = generate(DatasetMode::Mixed, 3, 1).unwrap();
    ds.save(&path).unwrap();
    let back = Dataset::load(&path).unwrap();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(ds.states.data()), bits(back.states.data()));
    assert_eq!(bits(ds.actions.data()), bits(back.actions.data()));
    assert_eq!(bits(&ds.rewards), bits(&back.rewards));
    assert_eq!(bits(ds.next_states.data()), bits(back.next_states.data()));
    assert_eq!(bits(&ds.dones), bits(&back.dones));
    assert_eq!(ds.meta.r_min.to_bits(), back.meta.r_min.to_bits());
    assert_eq!(ds.meta.r_max.to_bits(), back.meta.r_max.to_bits());
    assert_eq!(ds.meta, back.meta);

    let raw = std::fs::read(&path).unwrap();
    assert_eq!(&raw[..6], b"BRACD1");
    for cut in [3, 20, raw.len() / 2, raw.len() - 1] {
        let err = Dataset::from_bytes(&raw[..cut]).unwrap_err();
        assert!(!err.to_string().is_empty());
    }
    let mut bad = raw.clone();
    bad[1] = b'Z';
    assert!(Dataset::from_bytes(&bad)
        .unwrap_err()
        .to_string()
        .contains("magic"));
    let mut ver = raw;
    ver[6] = 9;
    assert!(Dataset::from_bytes(&ver)
        .unwrap_err()
        .to_string()
        .contains("version"));
}

#[test]
fn stored_rewards_lie_in_recorded_range() {
    for mode in [
        DatasetMode::Random,
        DatasetMode::Medium,
        DatasetMode::MedExp,
        DatasetMode::Mixed,
    ] {
        let ds = generate(mode, 5, 2).unwrap();
        assert!(ds
            .rewards
            .iter()
            .all(|r| *r >= ds.meta.r_min && *r <= ds.meta.r_max));
        assert!(ds.rewards.contains(&ds.meta.r_min) && ds.rewards.contains(&ds.meta.r_max));
        assert!(ds.meta.action_bounds.contains(ds.actions.row(0)));
    }
}

#[test]
fn expert_start_actions_are_bimodal() {
    let episodes = 200;
    let ds = collect(&Controller::expert(), episodes, 8).unwrap();
    let mut toward_first = 0;
    for e in 0..episodes {
        let a = ds.actions.row(e * HORIZON);
        // the first action points at the committed goal
        let score = a[0] + a[1];
        assert!(score.abs() > 0.5, "ambiguous start action {a:?}");
        if score > 0.0 {
            toward_first += 1;
        }
    }
    let frac = toward_first as f64 / episodes as f64;
    assert!((0.2..=0.8).contains(&frac), "fraction toward g1 {frac}");
}

#[test]
fn normalized_score_anchors() {
    let r = ScoreReference::new(-60.0, -8.0).unwrap();
    assert!(normalized_score(-60.0, &r).abs() < 1e-12);
    assert!((normalized_score(-8.0, &r) - 100.0).abs() < 1e-12);
    assert!((normalized_score(-34.0, &r) - 50.0).abs() < 1e-12);
    assert!(ScoreReference::new(1.0, 1.0).is_err());
    assert!(ScoreReference::new(2.0, 1.0).is_err());
}

#[test]
fn computed_reference_is_valid_and_cached() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ref").join("twogoal.json");
    let r = ScoreReference::cached(&path, 20, 0).unwrap();
    assert!(r.expert_return > r.random_return);
    assert!(path.exists());
    // a cached file is returned as-is, whatever the arguments
    let again = ScoreReference::cached(&path, 3, 99).unwrap();
    assert_eq!(r, again);
}

#[test]
fn dataset_modes_parse() {
    for name in ["random", "medium", "expert", "med-exp", "mixed"] {
        assert_eq!(DatasetMode::parse(name).unwrap().name(), name);
    }
    assert!(DatasetMode::parse("medium-replay").is_err());
}
