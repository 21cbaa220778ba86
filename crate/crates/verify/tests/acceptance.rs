//! End-to-end acceptance checks. Each criterion prints one `PASS`/`FAIL`
//! line; the process exits non-zero when any of them fails. Pass substrings
//! as arguments (`cargo test --test acceptance -- c2 c9`) to run a subset.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use bracp::agent::{
    pinsker_gap, policy_eval_returns, scale_rewards, train_bc, Agent, AgentConfig, BcConfig,
    EpochRecord, Regularizer,
};
use bracp::behavior_model::{Cvae, CvaeEnsemble, PretrainConfig};
use bracp::distributions::{kl_diag_gaussian, normal_pdf, standard_normal, DiagGaussian};
use bracp::divergences::{argmin_row, Panel};
use bracp::envs_data::{generate, normalized_score, Dataset, DatasetMode, ScoreReference};
use bracp::harness::{
    gen_data, read_log, sweep, train_agent, train_behavior, BehaviorConfig, RunPaths,
};
use bracp::networks::{layer_sizes, Mlp};
use ndgrad::gradcheck::{check_ops, nested_penalty_error, Act};
use ndgrad::{Array, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn out_dir() -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn minutes(d: Duration) -> f64 {
    d.as_secs_f64() / 60.0
}

// ---------------------------------------------------------------- C1

fn autodiff() -> Outcome {
    let t = Instant::now();
    let first = check_ops(100, 11)
        .into_iter()
        .fold(("", 0.0f64), |w, (n, e)| if e > w.1 { (n, e) } else { w });
    let mut second = 0.0f64;
    for seed in 0..5 {
        for (act, dims) in [
            (Act::Tanh, vec![5, 8, 1]),
            (Act::Relu, vec![5, 8, 8, 1]),
            (Act::Tanh, vec![5, 16, 16, 1]),
        ] {
            let (value_err, worst) = nested_penalty_error(act, &dims, 100 + seed);
            second = second.max(worst).max(value_err);
        }
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        first.1 < 1e-4 && second < 1e-3 && secs < 60.0,
        format!(
            "worst first-order {:.1e} ({}), worst nested {second:.1e}, {secs:.1}s",
            first.1, first.0
        ),
    )
}

// ---------------------------------------------------------------- C2

/// ∫ p log(p/q) for univariate Gaussians by composite Simpson over ±14σ_p.
fn kl_1d_integral(mp: f64, sp: f64, mq: f64, sq: f64) -> f64 {
    let n = 20_000;
    let (a, b) = (mp - 14.0 * sp, mp + 14.0 * sp);
    let h = (b - a) / n as f64;
    let f = |x: f64| {
        let p = normal_pdf(x, mp, sp);
        if p == 0.0 {
            return 0.0;
        }
        let log_q =
            -(x - mq).powi(2) / (2.0 * sq * sq) - sq.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
        p * (p.ln() - log_q)
    };
    let mut acc = f(a) + f(b);
    for i in 1..n {
        acc += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    acc * h / 3.0
}

fn gaussian<'t>(tape: &'t Tape, mean: &[f64], log_std: &[f64]) -> DiagGaussian<'t> {
    let row = |v: &[f64]| tape.constant(Array::new(vec![1, v.len()], v.to_vec()).unwrap());
    DiagGaussian::new(row(mean), row(log_std)).unwrap()
}

fn closed_form_kl() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let tape = Tape::new();
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let d = rng.gen_range(1..=3);
        let mut draw =
            |lo: f64, hi: f64| (0..d).map(|_| rng.gen_range(lo..hi)).collect::<Vec<f64>>();
        let (mp, lp, mq, lq) = (
            draw(-2.0, 2.0),
            draw(-1.0, 0.7),
            draw(-2.0, 2.0),
            draw(-1.0, 0.7),
        );
        let kl = kl_diag_gaussian(&gaussian(&tape, &mp, &lp), &gaussian(&tape, &mq, &lq))
            .unwrap()
            .item();
        let integral: f64 = (0..d)
            .map(|i| kl_1d_integral(mp[i], lp[i].exp(), mq[i], lq[i].exp()))
            .sum();
        worst = worst.max((kl - integral).abs());
    }
    let unit = kl_diag_gaussian(
        &gaussian(&tape, &[1.0], &[0.0]),
        &gaussian(&tape, &[0.0], &[0.0]),
    )
    .unwrap()
    .item();
    let unit_err = (unit - 0.5).abs();
    outcome(
        worst < 1e-4 && unit_err < 1e-10,
        format!("worst |closed form − integral| {worst:.1e} over 100 pairs, |KL(N(1,1)‖N(0,1)) − 0.5| {unit_err:.1e}"),
    )
}

// ---------------------------------------------------------------- C3

/// Bound and importance-sampled KL at one state for the pre-squash policy
/// `N(m, diag e^{2ls})`, with common action draws. Returns
/// `(bound, kl, standard error of bound − kl)`.
fn bound_vs_kl(
    member: &Cvae,
    s: &[f64],
    m: &[f64],
    ls: &[f64],
    draws: usize,
    rng: &mut ChaCha8Rng,
) -> (f64, f64, f64) {
    let ad = m.len();
    let noise_a = standard_normal(rng, &[draws, ad]);
    let u: Vec<f64> = noise_a
        .data()
        .iter()
        .enumerate()
        .map(|(i, e)| m[i % ad] + ls[i % ad].exp() * e)
        .collect();
    let states = Array::new(vec![draws, s.len()], s.repeat(draws)).unwrap();
    let log_pb = member
        .log_likelihood_iw(&states, &Array::new(vec![draws, ad], u).unwrap(), 500, rng)
        .unwrap();
    let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    let kl_terms: Vec<f64> = (0..draws)
        .map(|k| {
            let log_pi: f64 = (0..ad)
                .map(|j| {
                    let e = noise_a.data()[k * ad + j];
                    -0.5 * e * e - ls[j] - half_log_2pi
                })
                .sum();
            log_pi - log_pb[k]
        })
        .collect();

    let tape = Tape::new();
    let bound = member
        .bind_frozen(&tape)
        .kl_upper_bound(
            &DiagGaussian::new(
                tape.constant(Array::new(vec![draws, ad], m.repeat(draws)).unwrap()),
                tape.constant(Array::new(vec![draws, ad], ls.repeat(draws)).unwrap()),
            )
            .unwrap(),
            tape.constant(states),
            &noise_a,
            &standard_normal(rng, &[draws, member.latent_dim()]),
        )
        .unwrap()
        .value();
    let gaps: Vec<f64> = bound
        .data()
        .iter()
        .zip(&kl_terms)
        .map(|(b, k)| b - k)
        .collect();
    let g = mean(&gaps);
    let se =
        (gaps.iter().map(|x| (x - g).powi(2)).sum::<f64>() / (draws * (draws - 1)) as f64).sqrt();
    (mean(bound.data()), mean(&kl_terms), se)
}

fn bound_validity() -> Outcome {
    let t = Instant::now();
    let data = generate(DatasetMode::Medium, 100, 0).unwrap();
    let mut ens = CvaeEnsemble::new(3, 4, 2, 64, 0).unwrap();
    ens.pretrain(
        &data,
        &PretrainConfig {
            steps: 5000,
            ..Default::default()
        },
        0,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut violations, mut worst) = (0, f64::INFINITY);
    for i in 0..50 {
        let row = rng.gen_range(0..data.len());
        let s = data.states.row(row).to_vec();
        let m: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let ls: Vec<f64> = (0..2).map(|_| rng.gen_range(-2.0..0.0)).collect();
        let (bound, kl, se) = bound_vs_kl(&ens.members[i % ens.len()], &s, &m, &ls, 400, &mut rng);
        if bound < kl - 3.0 * se {
            violations += 1;
        }
        worst = worst.min((bound - kl) / se.max(1e-12));
    }
    let mins = minutes(t.elapsed());
    outcome(
        violations == 0 && mins < 5.0,
        format!("{violations}/50 states with bound below the KL by more than 3 SE, smallest gap {worst:.2} SE, {mins:.1} min"),
    )
}

// ---------------------------------------------------------------- C4

fn middle_panel() -> Outcome {
    let t = Instant::now();
    let (rows, csv) = sweep(Panel::Middle, 0).unwrap();
    let path = out_dir().join("sweep_middle.csv");
    std::fs::write(&path, &csv).unwrap();
    let pb = |x: f64| {
        rows.iter()
            .min_by(|a, b| (a.x - x).abs().total_cmp(&(b.x - x).abs()))
            .unwrap()
            .pi_b_density
    };
    let mmd = argmin_row(&rows, |r| r.mmd_sq).unwrap();
    let bkl = argmin_row(&rows, |r| r.backward_kl).unwrap();
    let low_density = mmd.pi_b_density < pb(2.0) / 10.0;
    let mode_seeking = (bkl.x - 2.0).abs() <= 0.3 || (bkl.x + 2.0).abs() <= 0.3;
    let secs = t.elapsed().as_secs_f64();
    outcome(
        low_density && mode_seeking && secs < 120.0,
        format!(
            "MMD argmin x*={:.3} with π_b(x*)={:.4} vs π_b(2)/10={:.4}; backward-KL argmin {:.3}; csv {}; {secs:.1}s",
            mmd.x,
            mmd.pi_b_density,
            pb(2.0) / 10.0,
            bkl.x,
            path.display()
        ),
    )
}

// ---------------------------------------------------------------- C5

fn pinsker() -> Outcome {
    let t = Instant::now();
    let cfg = AgentConfig::default();
    let (state_dim, n) = (4, 10_000);
    let grid: Vec<Vec<f64>> = (0..n)
        .map(|i| vec![-1.0 + 2.0 * (i as f64 + 0.5) / n as f64])
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut violations, mut worst) = (0, 0.0f64);
    for _ in 0..500 {
        let sizes = layer_sizes(state_dim + 1, cfg.q_hidden, 2, 1);
        let (q_new, q_old) = (
            Mlp::new(&sizes, &mut rng).unwrap(),
            Mlp::new(&sizes, &mut rng).unwrap(),
        );
        let s: Vec<f64> = (0..state_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let values = |q: &Mlp| {
            let tape = Tape::new();
            let mut x = Vec::with_capacity(n * (state_dim + 1));
            for a in &grid {
                x.extend_from_slice(&s);
                x.push(a[0]);
            }
            let x = tape.constant(Array::new(vec![n, state_dim + 1], x).unwrap());
            q.bind_frozen(&tape)
                .forward(x)
                .unwrap()
                .value()
                .data()
                .to_vec()
        };
        let (vn, vo) = (values(&q_new), values(&q_old));
        let at = |v: &[f64], a: &[f64]| v[(((a[0] + 1.0) / 2.0 * n as f64) as usize).min(n - 1)];
        // tanh-squashed Gaussians, densities in action space
        let squashed = |m: f64, sd: f64| {
            move |a: &[f64]| {
                let u = a[0].atanh();
                normal_pdf(u, m, sd) / (1.0 - a[0] * a[0])
            }
        };
        let (m1, s1, m2, s2) = (
            rng.gen_range(-1.5..1.5),
            rng.gen_range(0.1..1.0),
            rng.gen_range(-1.5..1.5),
            rng.gen_range(0.1..1.0),
        );
        let g = pinsker_gap(
            |a| at(&vn, a),
            |a| at(&vo, a),
            squashed(m1, s1),
            squashed(m2, s2),
            &grid,
        )
        .unwrap();
        if g.lhs > g.rhs {
            violations += 1;
        }
        if g.rhs > 0.0 {
            worst = worst.max(g.lhs / g.rhs);
        }
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        violations == 0 && secs < 120.0,
        format!("{violations}/500 instances with lhs > rhs, worst lhs/rhs {worst:.3}, {secs:.1}s"),
    )
}

// ---------------------------------------------------------------- C6, C7

const Q_LIMIT: f64 = 100.0;

/// Q-divergence runs on the mixed dataset: the paper's mixed-data threshold,
/// with a faster policy and target update so divergence shows within 200k
/// steps.
fn q_divergence_cfg(gp: bool) -> AgentConfig {
    AgentConfig {
        gp_enabled: gp,
        regularizer: Regularizer::KlUpper,
        policy_lr: 1e-4,
        tau: 5e-3,
        steps_per_epoch: 1000,
        epochs: 200,
        eps_generalization: 3.0,
        policy_hidden: 32,
        q_hidden: 32,
        init_policy_steps: 2000,
        init_q_steps: 3000,
        ..AgentConfig::default()
    }
}

struct Run {
    records: Vec<EpochRecord>,
    epsilon: f64,
    target_entropy: f64,
    grad_norm: f64,
}

fn behavior_for(data: &Dataset, seed: u64) -> CvaeEnsemble {
    let mut ens = CvaeEnsemble::new(3, data.state_dim(), data.action_dim(), 64, seed).unwrap();
    ens.pretrain(
        data,
        &PretrainConfig {
            steps: 3000,
            ..Default::default()
        },
        seed,
    )
    .unwrap();
    ens
}

fn run_agent(
    data: &Dataset,
    ens: CvaeEnsemble,
    cfg: AgentConfig,
    seed: u64,
    reference: &ScoreReference,
) -> Run {
    let mut agent = Agent::new(cfg, ens, data.meta.action_bounds.clone(), seed).unwrap();
    agent.initialize(data).unwrap();
    let mut records = vec![agent.init_record(data, reference).unwrap()];
    records.extend(agent.train(data, reference, &mut |_, _| Ok(())).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<Vec<f64>> = data
        .sample_indices(&mut rng, 1000)
        .iter()
        .map(|i| data.states.row(*i).to_vec())
        .collect();
    let states = Array::from_rows(&rows).unwrap();
    let grad_norm = agent.mean_action_grad_norm(&states, &mut rng).unwrap();
    Run {
        records,
        epsilon: agent.epsilon,
        target_entropy: agent.target_entropy,
        grad_norm,
    }
}

struct QDivergence {
    gp: Vec<Run>,
    nogp: Vec<Run>,
    gp_time: Duration,
    nogp_time: Duration,
}

fn q_divergence_runs() -> &'static QDivergence {
    static RUNS: std::sync::OnceLock<QDivergence> = std::sync::OnceLock::new();
    RUNS.get_or_init(|| {
        let reference = ScoreReference::compute(100, 0).unwrap();
        let (mut gp, mut nogp) = (Vec::new(), Vec::new());
        let (mut gp_time, mut nogp_time) = (Duration::ZERO, Duration::ZERO);
        for seed in 0..3 {
            let data = scale_rewards(&generate(DatasetMode::Mixed, 200, seed).unwrap()).unwrap();
            let t = Instant::now();
            let ens = behavior_for(&data, seed);
            let shared = t.elapsed();
            let t = Instant::now();
            nogp.push(run_agent(
                &data,
                ens.clone(),
                q_divergence_cfg(false),
                seed,
                &reference,
            ));
            nogp_time += shared + t.elapsed();
            let t = Instant::now();
            gp.push(run_agent(
                &data,
                ens,
                q_divergence_cfg(true),
                seed,
                &reference,
            ));
            gp_time += shared + t.elapsed();
            eprintln!("  q-divergence seed {seed} done");
        }
        QDivergence {
            gp,
            nogp,
            gp_time,
            nogp_time,
        }
    })
}

fn steps_to_exceed(run: &Run, steps_per_epoch: usize) -> Option<usize> {
    run.records
        .iter()
        .find(|r| r.mean_dataset_q > Q_LIMIT)
        .map(|r| r.epoch * steps_per_epoch)
}

fn q_divergence() -> Vec<(String, Outcome)> {
    let runs = q_divergence_runs();
    let spe = q_divergence_cfg(false).steps_per_epoch;
    let crossed: Vec<Option<usize>> = runs.nogp.iter().map(|r| steps_to_exceed(r, spe)).collect();
    let diverged = crossed
        .iter()
        .filter(|c| c.is_some_and(|s| s <= 200_000))
        .count();
    let gp_max: Vec<f64> = runs
        .gp
        .iter()
        .map(|r| {
            r.records
                .iter()
                .map(|x| x.mean_dataset_q)
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let gp_bounded = gp_max.iter().all(|q| *q <= Q_LIMIT);
    let in_time = minutes(runs.gp_time) < 30.0 && minutes(runs.nogp_time) < 30.0;
    let mut out = vec![(
        "criterion 6 Q divergence without gradient penalty".to_string(),
        outcome(
            diverged >= 2 && gp_bounded && in_time,
            format!(
                "no-gp steps to Q>100 {crossed:?}; gp max Q {:?}; arm times {:.1}/{:.1} min",
                gp_max.iter().map(|q| format!("{q:.1}")).collect::<Vec<_>>(),
                minutes(runs.nogp_time),
                minutes(runs.gp_time)
            ),
        ),
    )];

    let lower: Vec<bool> = runs
        .gp
        .iter()
        .zip(&runs.nogp)
        .map(|(g, n)| g.grad_norm < n.grad_norm)
        .collect();
    out.push((
        "invariant: penalty lowers the action gradient".to_string(),
        outcome(
            lower.iter().all(|b| *b),
            format!(
                "mean ‖∇_a Q‖ gp {:?} vs no-gp {:?}",
                runs.gp
                    .iter()
                    .map(|r| format!("{:.3}", r.grad_norm))
                    .collect::<Vec<_>>(),
                runs.nogp
                    .iter()
                    .map(|r| format!("{:.3}", r.grad_norm))
                    .collect::<Vec<_>>()
            ),
        ),
    ));
    let streaks: Vec<usize> = runs.nogp.iter().map(|r| longest_rise(&r.records)).collect();
    out.push((
        "invariant: monotone Q growth without penalty".to_string(),
        outcome(
            streaks.iter().any(|s| *s >= 50),
            format!("longest strictly rising stretch of mean dataset Q, in epochs: {streaks:?}"),
        ),
    ));
    out
}

fn longest_rise(records: &[EpochRecord]) -> usize {
    let (mut best, mut cur) = (0, 0);
    for w in records.windows(2) {
        cur = if w[1].mean_dataset_q > w[0].mean_dataset_q {
            cur + 1
        } else {
            0
        };
        best = best.max(cur);
    }
    best
}

fn constraints() -> Outcome {
    let runs = q_divergence_runs();
    let per_seed: Vec<(f64, f64, f64, f64)> = runs
        .gp
        .iter()
        .map(|r| {
            let tail = &r.records[r.records.len() - 10..];
            let d = mean(&tail.iter().map(|x| x.kl_bound_mean).collect::<Vec<_>>());
            let h = mean(&tail.iter().map(|x| x.entropy_mean).collect::<Vec<_>>());
            (d, r.epsilon, h, r.target_entropy)
        })
        .collect();
    let ok = per_seed
        .iter()
        .all(|(d, eps, h, h0)| *d <= eps + 0.5 && (h - h0).abs() <= 0.15);
    let text: Vec<String> = per_seed
        .iter()
        .map(|(d, eps, h, h0)| format!("D {d:.3} (ε {eps:.3}), H {h:.3} (H₀ {h0:.3})"))
        .collect();
    outcome(ok, text.join("; "))
}

// ---------------------------------------------------------------- C8

/// Policy-quality comparison on med-exp: the paper's defaults and its
/// medium-expert threshold, with smaller networks and a shorter run.
fn quality_cfg(regularizer: Regularizer) -> AgentConfig {
    AgentConfig {
        regularizer,
        eps_generalization: 0.2,
        epochs: 20,
        policy_hidden: 32,
        q_hidden: 32,
        init_policy_steps: 2000,
        init_q_steps: 3000,
        ..AgentConfig::default()
    }
}

fn final_score(policy: &Mlp, data: &Dataset, seed: u64, reference: &ScoreReference) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    let returns = policy_eval_returns(policy, &data.meta.action_bounds, 100, &mut rng).unwrap();
    mean(
        &returns
            .iter()
            .map(|r| normalized_score(*r, reference))
            .collect::<Vec<_>>(),
    )
}

fn policy_quality() -> Outcome {
    let t = Instant::now();
    let reference = ScoreReference::compute(100, 0).unwrap();
    let (mut kl, mut mmd, mut bc) = (Vec::new(), Vec::new(), Vec::new());
    for seed in 0..3 {
        let raw = generate(DatasetMode::MedExp, 200, seed).unwrap();
        let data = scale_rewards(&raw).unwrap();
        let ens = behavior_for(&data, seed);
        for (reg, scores) in [
            (Regularizer::KlUpper, &mut kl),
            (Regularizer::Mmd, &mut mmd),
        ] {
            let mut agent = Agent::new(
                quality_cfg(reg),
                ens.clone(),
                data.meta.action_bounds.clone(),
                seed,
            )
            .unwrap();
            agent.initialize(&data).unwrap();
            agent.train(&data, &reference, &mut |_, _| Ok(())).unwrap();
            scores.push(final_score(&agent.policy, &data, seed, &reference));
        }
        let (policy, _) = train_bc(&raw, &BcConfig::default(), seed).unwrap();
        bc.push(final_score(&policy, &data, seed, &reference));
        eprintln!("  policy quality seed {seed} done");
    }
    let (k, m, b) = (mean(&kl), mean(&mmd), mean(&bc));
    let mins = minutes(t.elapsed());
    outcome(
        k >= b + 10.0 && k >= m && mins < 60.0,
        format!(
            "3-seed mean normalized score: KL+gp {k:.1}, MMD+gp {m:.1}, BC {b:.1}; {mins:.1} min"
        ),
    )
}

// ---------------------------------------------------------------- C9

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let reference = ScoreReference::new(-90.0, -20.0).unwrap();
    let behavior = BehaviorConfig {
        members: 2,
        hidden: 16,
        pretrain: PretrainConfig {
            steps: 200,
            batch: 50,
            lr: 1e-3,
        },
    };
    let cfg = AgentConfig {
        policy_hidden: 16,
        q_hidden: 16,
        steps_per_epoch: 20,
        epochs: 3,
        init_policy_steps: 40,
        init_eval_every: 20,
        init_q_steps: 20,
        eval_states: 50,
        entropy_samples: 2,
        eval_episodes: 2,
        ..AgentConfig::default()
    };
    let end_to_end = |name: &str| {
        let root = dir.path().join(name);
        let raw = gen_data(DatasetMode::MedExp, 3, 5, &root.join("data.bin")).unwrap();
        let (ens, _) =
            train_behavior(&raw, &behavior, 5, &root.join("behavior.ckpt"), None).unwrap();
        let paths = RunPaths::new(&root.join("run"));
        train_agent(&raw, ens, &cfg, 5, &paths, &reference, false).unwrap();
        root
    };
    let (a, b) = (end_to_end("a"), end_to_end("b"));
    let read = |p: PathBuf| std::fs::read(p).unwrap();
    let mut failures = Vec::new();
    for rel in [
        "data.bin",
        "behavior.ckpt",
        "run/log.jsonl",
        "run/last.ckpt",
    ] {
        if read(a.join(rel)) != read(b.join(rel)) {
            failures.push(format!("{rel} differs between identical runs"));
        }
    }
    if read_log(&a.join("run/log.jsonl")).map(|l| l.len()).ok() != Some(cfg.epochs + 1) {
        failures.push("log does not hold one line per epoch".into());
    }

    let data = Dataset::load(&a.join("data.bin")).unwrap();
    if data.to_bytes().unwrap() != read(a.join("data.bin")) {
        failures.push("dataset re-serialisation differs".into());
    }
    let ens = CvaeEnsemble::load(&a.join("behavior.ckpt")).unwrap();
    ens.save(&dir.path().join("behavior2.ckpt")).unwrap();
    if read(dir.path().join("behavior2.ckpt")) != read(a.join("behavior.ckpt")) {
        failures.push("behavior checkpoint round trip differs".into());
    }
    let agent = Agent::load(&a.join("run/last.ckpt")).unwrap();
    agent.save(&dir.path().join("agent2.ckpt")).unwrap();
    if read(dir.path().join("agent2.ckpt")) != read(a.join("run/last.ckpt")) {
        failures.push("agent checkpoint round trip differs".into());
    }
    let detail = if failures.is_empty() {
        "identical logs, datasets and checkpoints across runs; bitwise round trips".to_string()
    } else {
        failures.join("; ")
    };
    outcome(failures.is_empty(), detail)
}

// ----------------------------------------------------------------

type Check = fn() -> Vec<(String, Outcome)>;

fn single(name: &str, f: fn() -> Outcome) -> Vec<(String, Outcome)> {
    vec![(name.to_string(), f())]
}

fn main() {
    let filters: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .map(|a| a.to_lowercase())
        .collect();
    let checks: Vec<(&str, Check)> = vec![
        ("c1", || single("criterion 1 autodiff soundness", autodiff)),
        ("c2", || {
            single("criterion 2 closed-form KL", closed_form_kl)
        }),
        ("c3", || {
            single("criterion 3 KL upper bound validity", bound_validity)
        }),
        ("c4", || {
            single(
                "criterion 4 divergence landscape, middle panel",
                middle_panel,
            )
        }),
        ("c5", || single("criterion 5 Pinsker property", pinsker)),
        ("c6", q_divergence),
        ("c7", || {
            single("criterion 7 constraint satisfaction", constraints)
        }),
        ("c8", || {
            single("criterion 8 policy quality", policy_quality)
        }),
        ("c9", || {
            single("criterion 9 determinism and persistence", determinism)
        }),
    ];
    let mut failed = 0;
    for (key, check) in checks {
        if !filters.is_empty() && !filters.iter().any(|f| key.contains(f.as_str())) {
            continue;
        }
        for (name, o) in check() {
            println!(
                "{} {name}: {}",
                if o.pass { "PASS" } else { "FAIL" },
                o.detail
            );
            if !o.pass {
                failed += 1;
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance check(s) failed");
        std::process::exit(1);
    }
}
