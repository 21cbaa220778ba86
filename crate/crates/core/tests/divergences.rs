use bracp::distributions::GaussianMixture1D;
use bracp::divergences::{
    argmin_row, divergence_sweep, kl_integrate_1d, mass_integrate_1d, mc_kl, mmd_squared,
    mmd_squared_batched, sweep_csv, KernelFamily, KernelSpec, McEstimate, Panel,
};
use ndgrad::{Array, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn normal_rows(rng: &mut ChaCha8Rng, n: usize, d: usize, shift: f64) -> Array {
    let data = (0..n * d)
        .map(|_| rng.sample::<f64, _>(StandardNormal) + shift)
        .collect();
    Array::new(vec![n, d], data).unwrap()
}

/// Unbiased squared MMD written out over index pairs.
fn mmd_oracle(x: &Array, y: &Array, k: impl Fn(&[f64], &[f64]) -> f64) -> f64 {
    let (n, m) = (x.rows(), y.rows());
    let mut xx = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                xx += k(x.row(i), x.row(j));
            }
        }
    }
    let mut yy = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                yy += k(y.row(i), y.row(j));
            }
        }
    }
    let mut xy = 0.0;
    for i in 0..n {
        for j in 0..m {
            xy += k(x.row(i), y.row(j));
        }
    }
    xx / (n * (n - 1)) as f64 + yy / (m * (m - 1)) as f64 - 2.0 * xy / (n * m) as f64
}

#[test]
fn mmd_matches_pairwise_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = normal_rows(&mut rng, 17, 3, 0.0);
    let y = normal_rows(&mut rng, 11, 3, 0.4);
    let lap = KernelSpec::laplacian(0.7);
    let got = mmd_squared(&x, &y, &lap).unwrap();
    let want = mmd_oracle(&x, &y, |a, b| {
        (-a.iter().zip(b).map(|(p, q)| (p - q).abs()).sum::<f64>() / 0.7).exp()
    });
    assert!((got - want).abs() < 1e-12);

    let gauss = KernelSpec::new(KernelFamily::Gaussian, 1.3).unwrap();
    let got = mmd_squared(&x, &y, &gauss).unwrap();
    let want = mmd_oracle(&x, &y, |a, b| {
        (-a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / (2.0 * 1.69)).exp()
    });
    assert!((got - want).abs() < 1e-12);
}

#[test]
fn mmd_is_unbiased_when_distributions_match() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let k = KernelSpec::laplacian(1.0);
    let reps: Vec<f64> = (0..200)
        .map(|_| {
            let x = normal_rows(&mut rng, 40, 2, 0.0);
            let y = normal_rows(&mut rng, 40, 2, 0.0);
            mmd_squared(&x, &y, &k).unwrap()
        })
        .collect();
    let est = McEstimate::from_samples(&reps);
    assert!(est.mean.abs() < 3.0 * est.std_err, "{est:?}");
}

#[test]
fn mmd_detects_separated_distributions_and_is_symmetric() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let k = KernelSpec::laplacian(1.0);
    let x = normal_rows(&mut rng, 200, 2, 0.0);
    let y = normal_rows(&mut rng, 200, 2, 2.0);
    let xy = mmd_squared(&x, &y, &k).unwrap();
    assert!(xy > 0.1, "{xy}");
    assert!((xy - mmd_squared(&y, &x, &k).unwrap()).abs() < 1e-12);
}

#[test]
fn mmd_rejects_tiny_or_mismatched_sets() {
    let k = KernelSpec::laplacian(1.0);
    assert!(mmd_squared(&Array::zeros(&[1, 2]), &Array::zeros(&[5, 2]), &k).is_err());
    assert!(mmd_squared(&Array::zeros(&[4, 2]), &Array::zeros(&[5, 3]), &k).is_err());
    assert!(KernelSpec::new(KernelFamily::Laplacian, 0.0).is_err());
}

#[test]
fn batched_mmd_matches_per_state_estimates_and_differentiates() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (n, k, d) = (3, 5, 2);
    let xs = normal_rows(&mut rng, n * k, d, 0.0);
    let ys = normal_rows(&mut rng, n * k, d, 0.5);
    let kern = KernelSpec::laplacian(1.0);
    let tape = Tape::new();
    let xv = tape.param(xs.reshape(&[n, k, d]).unwrap());
    let out =
        mmd_squared_batched(xv, tape.constant(ys.reshape(&[n, k, d]).unwrap()), &kern).unwrap();
    for i in 0..n {
        let slice = |a: &Array| {
            Array::new(vec![k, d], a.data()[i * k * d..(i + 1) * k * d].to_vec()).unwrap()
        };
        let want = mmd_squared(&slice(&xs), &slice(&ys), &kern).unwrap();
        assert!((out.value().data()[i] - want).abs() < 1e-12);
    }

    // gradient of the summed estimate against central differences
    let g = tape.grad(out.sum(), &[xv], false).unwrap()[0].value();
    let h = 1e-6;
    for idx in [0, 7, 13, 29] {
        let eval = |delta: f64| {
            let mut x = xs.clone();
            x.data_mut()[idx] += delta;
            (0..n)
                .map(|i| {
                    let slice = |a: &Array| {
                        Array::new(vec![k, d], a.data()[i * k * d..(i + 1) * k * d].to_vec())
                            .unwrap()
                    };
                    mmd_squared(&slice(&x), &slice(&ys), &kern).unwrap()
                })
                .sum::<f64>()
        };
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        assert!(
            (fd - g.data()[idx]).abs() < 1e-6,
            "{fd} vs {}",
            g.data()[idx]
        );
    }
}

#[test]
fn mc_kl_of_unit_shift() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let lp = |x: &f64| -0.5 * (x - 1.0) * (x - 1.0);
    let lq = |x: &f64| -0.5 * x * x;
    let est = mc_kl(
        &mut rng,
        100_000,
        |r| 1.0 + r.sample::<f64, _>(StandardNormal),
        lp,
        lq,
    )
    .unwrap();
    assert!((est.mean - 0.5).abs() < 0.02, "{est:?}");
    assert!(mc_kl(&mut rng, 0, |_| 0.0, lp, lq).is_err());
}

#[test]
fn integrated_kl_matches_closed_form_for_gaussians() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..50 {
        let (m1, s1, m2, s2): (f64, f64, f64, f64) = (
            rng.gen_range(-3.0..3.0),
            rng.gen_range(0.05..2.0),
            rng.gen_range(-3.0..3.0),
            rng.gen_range(0.05..2.0),
        );
        let closed = (s2 / s1).ln() + (s1 * s1 + (m1 - m2) * (m1 - m2)) / (2.0 * s2 * s2) - 0.5;
        let p = GaussianMixture1D::single(m1, s1).unwrap();
        let q = GaussianMixture1D::single(m2, s2).unwrap();
        let got = kl_integrate_1d(&p, &q);
        assert!(
            (got - closed).abs() < 1e-8 * (1.0 + closed),
            "{got} vs {closed}"
        );
    }
}

#[test]
fn mixture_mass_is_one() {
    let p = Panel::Middle.config(0).pi_b;
    assert!((mass_integrate_1d(&p) - 1.0).abs() < 1e-10);
    let sharp = Panel::Right.config(0).pi_b;
    assert!((mass_integrate_1d(&sharp) - 1.0).abs() < 1e-10);
}

#[test]
fn forward_and_backward_kl_disagree_for_the_bimodal_mixture() {
    let p = Panel::Middle.config(0).pi_b;
    for m in [-2.0, 0.0, 0.8, 2.0] {
        for s in [0.2, 0.5, 1.0, 2.0] {
            let q = GaussianMixture1D::single(m, s).unwrap();
            let gap = (kl_integrate_1d(&p, &q) - kl_integrate_1d(&q, &p)).abs();
            assert!(gap > 0.1, "N({m}, {s}): gap {gap}");
        }
    }
}

fn grid_step(cfg: &bracp::divergences::SweepConfig) -> f64 {
    (cfg.x_max - cfg.x_min) / (cfg.n_points - 1) as f64
}

#[test]
fn left_panel_minima_sit_at_zero() {
    let cfg = Panel::Left.config(0);
    let rows = divergence_sweep(&cfg).unwrap();
    let step = grid_step(&cfg);
    for (name, x) in [
        ("forward", argmin_row(&rows, |r| r.forward_kl).unwrap().x),
        ("backward", argmin_row(&rows, |r| r.backward_kl).unwrap().x),
        ("mmd", argmin_row(&rows, |r| r.mmd_sq).unwrap().x),
    ] {
        assert!(x.abs() <= step + 1e-9, "{name} argmin {x}");
    }
}

#[test]
fn middle_panel_backward_kl_is_mode_seeking() {
    let cfg = Panel::Middle.config(0);
    let rows = divergence_sweep(&cfg).unwrap();
    let x = argmin_row(&rows, |r| r.backward_kl).unwrap().x;
    assert!(
        (x - 2.0).abs() <= 0.3 || (x + 2.0).abs() <= 0.3,
        "backward argmin {x}"
    );
    // forward KL is mass-covering: its minimiser sits between the modes
    let xf = argmin_row(&rows, |r| r.forward_kl).unwrap().x;
    assert!(xf > -2.0 + 0.3 && xf < 2.0 - 0.3, "forward argmin {xf}");
}

#[test]
fn right_panel_minima_near_zero_and_backward_grows_fastest() {
    let cfg = Panel::Right.config(0);
    let rows = divergence_sweep(&cfg).unwrap();
    let step = grid_step(&cfg);
    for x in [
        argmin_row(&rows, |r| r.forward_kl).unwrap().x,
        argmin_row(&rows, |r| r.backward_kl).unwrap().x,
        argmin_row(&rows, |r| r.mmd_sq).unwrap().x,
    ] {
        assert!(x.abs() <= step + 1e-9, "argmin {x}");
    }
    let at = |x: f64| *rows.iter().find(|r| (r.x - x).abs() < 1e-9).unwrap();
    let (r0, r1) = (at(0.0), at(1.0));
    let growth = |f: fn(&bracp::divergences::SweepRow) -> f64| f(&r1) - f(&r0);
    assert!(growth(|r| r.backward_kl) > growth(|r| r.forward_kl));
    assert!(growth(|r| r.backward_kl) > growth(|r| r.mmd_sq));
}

#[test]
fn sweep_csv_has_header_and_one_line_per_point() {
    let mut cfg = Panel::Middle.config(1);
    cfg.n_points = 21;
    cfg.mmd_samples = 50;
    let csv = sweep_csv(&divergence_sweep(&cfg).unwrap());
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "x,forward_kl,backward_kl,mmd_sq,pi_b_density");
    assert_eq!(lines.len(), 22);
    assert!(Panel::parse("top").is_err());
}

#[test]
fn sweep_is_deterministic_given_seed() {
    let mut cfg = Panel::Middle.config(7);
    cfg.n_points = 11;
    cfg.mmd_samples = 100;
    assert_eq!(
        divergence_sweep(&cfg).unwrap(),
        divergence_sweep(&cfg).unwrap()
    );
}
