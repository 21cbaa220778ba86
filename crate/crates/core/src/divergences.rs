//! Sample-based divergences and the one-dimensional divergence landscape.

use std::fmt::Write as _;

use ndgrad::{Array, Var};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::distributions::GaussianMixture1D;
use crate::error::{Error, Result};
use crate::rng::stream_rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    /// `exp(−‖x − y‖₁ / b)`
    Laplacian,
    /// `exp(−‖x − y‖² / (2b²))`
    Gaussian,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub bandwidth: f64,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, bandwidth: f64) -> Result<Self> {
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(Error::Config(format!(
                "kernel bandwidth {bandwidth} must be positive"
            )));
        }
        Ok(KernelSpec { family, bandwidth })
    }

    pub fn laplacian(bandwidth: f64) -> Self {
        Self::new(KernelFamily::Laplacian, bandwidth).expect("positive bandwidth")
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        match self.family {
            KernelFamily::Laplacian => {
                let d: f64 = x.iter().zip(y).map(|(a, b)| (a - b).abs()).sum();
                (-d / self.bandwidth).exp()
            }
            KernelFamily::Gaussian => {
                let d: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
                (-d / (2.0 * self.bandwidth * self.bandwidth)).exp()
            }
        }
    }
}

/// Mean of `k(x_i, x_j)` over ordered pairs `i ≠ j`.
fn within_mean(x: &Array, k: &KernelSpec) -> f64 {
    let n = x.rows();
    let mut total = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            total += k.eval(x.row(i), x.row(j));
        }
    }
    2.0 * total / (n * (n - 1)) as f64
}

fn cross_mean(x: &Array, y: &Array, k: &KernelSpec) -> f64 {
    let mut total = 0.0;
    for i in 0..x.rows() {
        for j in 0..y.rows() {
            total += k.eval(x.row(i), y.row(j));
        }
    }
    total / (x.rows() * y.rows()) as f64
}

/// Unbiased U-statistic estimate of squared MMD between sample sets `(n, d)`
/// and `(m, d)`. Within-set averages exclude the diagonal.
pub fn mmd_squared(x: &Array, y: &Array, kernel: &KernelSpec) -> Result<f64> {
    check_samples(x, y)?;
    Ok(within_mean(x, kernel) - 2.0 * cross_mean(x, y, kernel) + within_mean(y, kernel))
}

fn check_samples(x: &Array, y: &Array) -> Result<()> {
    if x.rank() != 2 || y.rank() != 2 || x.shape()[1] != y.shape()[1] {
        return Err(Error::Precondition(format!(
            "mmd needs (n, d) sample sets of equal d, got {:?} and {:?}",
            x.shape(),
            y.shape()
        )));
    }
    if x.rows() < 2 || y.rows() < 2 {
        return Err(Error::Precondition(
            "mmd needs at least two samples per side".into(),
        ));
    }
    Ok(())
}

fn pairwise_kernel<'t>(a: Var<'t>, b: Var<'t>, kernel: &KernelSpec) -> Result<Var<'t>> {
    // a: (n, k, d), b: (n, m, d) -> (n, k, m)
    let (sa, sb) = (a.shape(), b.shape());
    let (n, k, m, d) = (sa[0], sa[1], sb[1], sa[2]);
    let diff = a
        .try_reshape(&[n, k, 1, d])?
        .try_sub(b.try_reshape(&[n, 1, m, d])?)?;
    let kernel_value = match kernel.family {
        KernelFamily::Laplacian => diff.abs().sum_axis(3, false).scale(-1.0 / kernel.bandwidth),
        KernelFamily::Gaussian => diff
            .square()
            .sum_axis(3, false)
            .scale(-0.5 / (kernel.bandwidth * kernel.bandwidth)),
    };
    Ok(kernel_value.exp())
}

/// Differentiable per-state squared MMD. `x` and `y` have shape `(n, k, d)`:
/// `k` samples per side for each of `n` states. Returns shape `(n,)`.
pub fn mmd_squared_batched<'t>(x: Var<'t>, y: Var<'t>, kernel: &KernelSpec) -> Result<Var<'t>> {
    let (sx, sy) = (x.shape(), y.shape());
    if sx.len() != 3 || sy.len() != 3 || sx[0] != sy[0] || sx[2] != sy[2] || sx[1] < 2 || sy[1] < 2
    {
        return Err(Error::Precondition(format!(
            "batched mmd needs (n, k, d) inputs with k ≥ 2, got {sx:?} and {sy:?}"
        )));
    }
    let tape = x.tape();
    let off_diag = |k: usize| {
        let mut mask = Array::ones(&[k, k]);
        for i in 0..k {
            mask.data_mut()[i * k + i] = 0.0;
        }
        tape.constant(mask)
    };
    let (k, m) = (sx[1], sy[1]);
    let kxx = (pairwise_kernel(x, x, kernel)? * off_diag(k))
        .sum_axis(2, false)
        .sum_axis(1, false);
    let kyy = (pairwise_kernel(y, y, kernel)? * off_diag(m))
        .sum_axis(2, false)
        .sum_axis(1, false);
    let kxy = pairwise_kernel(x, y, kernel)?
        .sum_axis(2, false)
        .sum_axis(1, false);
    Ok(
        kxx.scale(1.0 / (k * (k - 1)) as f64) + kyy.scale(1.0 / (m * (m - 1)) as f64)
            - kxy.scale(2.0 / (k * m) as f64),
    )
}

/// A Monte-Carlo mean with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_err: f64,
}

impl McEstimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = if xs.len() > 1 {
            xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        McEstimate {
            mean,
            std_err: (var / n).sqrt(),
        }
    }
}

/// `KL(P ‖ Q) ≈ mean_{x∼P} [log P(x) − log Q(x)]` from `n` draws.
pub fn mc_kl<R, T, S, LP, LQ>(
    rng: &mut R,
    n: usize,
    mut sample_p: S,
    log_p: LP,
    log_q: LQ,
) -> Result<McEstimate>
where
    R: Rng + ?Sized,
    S: FnMut(&mut R) -> T,
    LP: Fn(&T) -> f64,
    LQ: Fn(&T) -> f64,
{
    if n == 0 {
        return Err(Error::Precondition("mc_kl needs n ≥ 1".into()));
    }
    let terms: Vec<f64> = (0..n)
        .map(|_| {
            let x = sample_p(rng);
            log_p(&x) - log_q(&x)
        })
        .collect();
    Ok(McEstimate::from_samples(&terms))
}

/// Composite Simpson's rule on `[a, b]` with `n` (rounded up to even) panels.
pub fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n: usize) -> f64 {
    let n = (n.max(2) + 1) & !1;
    let h = (b - a) / n as f64;
    let mut total = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        total += w * f(a + i as f64 * h);
    }
    total * h / 3.0
}

fn merge_windows(mut w: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    w.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (lo, hi) in w {
        match out.last_mut() {
            Some(last) if lo <= last.1 => last.1 = last.1.max(hi),
            _ => out.push((lo, hi)),
        }
    }
    out
}

/// Width of the integration windows, in component standard deviations.
pub const WINDOW_SIGMAS: f64 = 12.0;
/// Simpson panels per window.
pub const PANELS_PER_WINDOW: usize = 4000;

/// `KL(P ‖ Q) = ∫ p (log p − log q)` for one-dimensional mixtures, integrated
/// over windows covering every component of `P`. Mass outside the windows is
/// below `1e-30` of the total.
pub fn kl_integrate_1d(p: &GaussianMixture1D, q: &GaussianMixture1D) -> f64 {
    merge_windows(p.support_windows(WINDOW_SIGMAS))
        .into_iter()
        .map(|(lo, hi)| {
            simpson(
                |x| {
                    let lp = p.log_pdf(x);
                    let pd = lp.exp();
                    if pd == 0.0 {
                        0.0
                    } else {
                        pd * (lp - q.log_pdf(x))
                    }
                },
                lo,
                hi,
                PANELS_PER_WINDOW,
            )
        })
        .sum()
}

/// Integral of the density over its windows; a sanity oracle for the windowing.
pub fn mass_integrate_1d(p: &GaussianMixture1D) -> f64 {
    merge_windows(p.support_windows(WINDOW_SIGMAS))
        .into_iter()
        .map(|(lo, hi)| simpson(|x| p.pdf(x), lo, hi, PANELS_PER_WINDOW))
        .sum()
}

/// Settings of one divergence landscape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub pi_b: GaussianMixture1D,
    /// Standard deviation of the candidate Gaussian `N(x, σ)`.
    pub sigma: f64,
    pub x_min: f64,
    pub x_max: f64,
    pub n_points: usize,
    pub kernel: KernelSpec,
    /// MMD samples per side.
    pub mmd_samples: usize,
    pub seed: u64,
}

/// The three landscape presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Panel {
    Left,
    Middle,
    Right,
}

impl Panel {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "left" => Ok(Panel::Left),
            "middle" => Ok(Panel::Middle),
            "right" => Ok(Panel::Right),
            other => Err(Error::Config(format!(
                "unknown panel '{other}' (left, middle, right)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Panel::Left => "left",
            Panel::Middle => "middle",
            Panel::Right => "right",
        }
    }

    pub fn config(&self, seed: u64) -> SweepConfig {
        let pi_b = match self {
            Panel::Left => GaussianMixture1D::single(0.0, 1.0),
            Panel::Middle => {
                GaussianMixture1D::new(vec![0.3, 0.7], vec![-2.0, 2.0], vec![0.3, 0.5])
            }
            Panel::Right => GaussianMixture1D::single(0.0, 0.001),
        }
        .expect("preset mixtures are valid");
        SweepConfig {
            pi_b,
            sigma: 0.2,
            x_min: -10.0,
            x_max: 10.0,
            n_points: 401,
            kernel: KernelSpec::laplacian(1.0),
            mmd_samples: 1000,
            seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub x: f64,
    pub forward_kl: f64,
    pub backward_kl: f64,
    pub mmd_sq: f64,
    pub pi_b_density: f64,
}

/// Evaluate forward KL `KL(π_b ‖ N(x, σ))`, backward KL `KL(N(x, σ) ‖ π_b)` and
/// squared MMD on a grid of means `x`. MMD uses common random numbers: the
/// behavior samples and the candidate's standard-normal draws are fixed
/// across the grid, and the translation-invariant within-set terms are
/// computed once.
pub fn divergence_sweep(cfg: &SweepConfig) -> Result<Vec<SweepRow>> {
    if cfg.n_points < 2 || !(cfg.x_max > cfg.x_min) {
        return Err(Error::Config(
            "sweep grid needs ≥ 2 points over a non-empty range".into(),
        ));
    }
    if !(cfg.sigma > 0.0) || cfg.mmd_samples < 2 {
        return Err(Error::Config(
            "sweep needs σ > 0 and ≥ 2 mmd samples".into(),
        ));
    }
    let mut rng = stream_rng(cfg.seed, 0x5EE9);
    let n = cfg.mmd_samples;
    let yb: Vec<f64> = (0..n).map(|_| cfg.pi_b.sample(&mut rng)).collect();
    let eps: Vec<f64> = (0..n)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    let col = |v: &[f64]| Array::new(vec![v.len(), 1], v.to_vec()).expect("column");
    let k_bb = within_mean(&col(&yb), &cfg.kernel);
    let policy0: Vec<f64> = eps.iter().map(|e| cfg.sigma * e).collect();
    let k_pp = within_mean(&col(&policy0), &cfg.kernel);

    let step = (cfg.x_max - cfg.x_min) / (cfg.n_points - 1) as f64;
    (0..cfg.n_points)
        .map(|i| {
            let x = cfg.x_min + i as f64 * step;
            let cand = GaussianMixture1D::single(x, cfg.sigma)?;
            let mut cross = 0.0;
            for p in &policy0 {
                for b in &yb {
                    cross += cfg.kernel.eval(&[x + p], &[*b]);
                }
            }
            let cross = cross / (n * n) as f64;
            Ok(SweepRow {
                x,
                forward_kl: kl_integrate_1d(&cfg.pi_b, &cand),
                backward_kl: kl_integrate_1d(&cand, &cfg.pi_b),
                mmd_sq: k_pp - 2.0 * cross + k_bb,
                pi_b_density: cfg.pi_b.pdf(x),
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("x,forward_kl,backward_kl,mmd_sq,pi_b_density\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.x, r.forward_kl, r.backward_kl, r.mmd_sq, r.pi_b_density
        );
    }
    out
}

/// Row with the smallest value of `metric`.
pub fn argmin_row(rows: &[SweepRow], metric: impl Fn(&SweepRow) -> f64) -> Option<SweepRow> {
    rows.iter()
        .copied()
        .min_by(|a, b| metric(a).total_cmp(&metric(b)))
}
