//! Finite-difference gradient checking.
//!
//! [`check_ops`] runs every registered operation on random inputs and compares
//! the reverse pass against central differences. [`nested_penalty_error`]
//! checks the derivative of `Σ_rows ‖∇_a Q(s, a)‖₂` with respect to the
//! weights of a random MLP against a hand-written chain-rule oracle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Array, Tape, Var};

pub const H: f64 = 1e-5;

/// |a − n| / max(|a|, |n|, 1e-2): relative error with a small floor so that
/// near-zero derivatives do not amplify round-off.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-2)
}

pub fn random_array(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Array {
    let n: usize = shape.iter().product();
    Array::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(lo..hi)).collect(),
    )
    .unwrap()
}

pub type ScalarFn = dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>;

fn eval(f: &ScalarFn, inputs: &[Array]) -> f64 {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|a| tape.constant(a.clone())).collect();
    f(&tape, &vars).item()
}

/// Largest relative error between the engine gradient and central differences.
pub fn max_grad_error(f: &ScalarFn, inputs: &[Array]) -> f64 {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|a| tape.param(a.clone())).collect();
    let root = f(&tape, &vars);
    let grads = tape.backward(root).unwrap();
    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[k]);
        for i in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= H;
            let numeric = (eval(f, &plus) - eval(f, &minus)) / (2.0 * H);
            worst = worst.max(rel_err(analytic.data()[i], numeric));
        }
    }
    worst
}

/// Weighted sum with fixed, non-uniform weights so every output element
/// receives a distinct upstream gradient.
fn weighted<'t>(tape: &'t Tape, y: Var<'t>) -> Var<'t> {
    let n = y.value().len();
    let w = Array::new(
        y.shape(),
        (0..n)
            .map(|i| 0.3 + 0.7 * ((i * 7 + 3) % 11) as f64 / 11.0)
            .collect(),
    )
    .unwrap();
    (y * tape.constant(w)).sum()
}

pub struct Case {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub range: (f64, f64),
    pub f: Box<ScalarFn>,
    /// Rejects inputs too close to a kink for central differences.
    pub valid: fn(&[Array]) -> bool,
}

fn any_input(_: &[Array]) -> bool {
    true
}

fn away_from_zero(x: &[Array]) -> bool {
    x.iter().all(|a| a.data().iter().all(|v| v.abs() > 1e-3))
}

fn distinct_pairs(x: &[Array]) -> bool {
    x[0].data()
        .iter()
        .zip(x[1].data())
        .all(|(a, b)| (a - b).abs() > 1e-3)
}

fn away_from_clip(x: &[Array]) -> bool {
    x[0].data().iter().all(|v| (v.abs() - 0.5).abs() > 1e-3)
}

pub fn cases() -> Vec<Case> {
    macro_rules! case {
        ($name:expr, $shapes:expr, $range:expr, $valid:expr, |$t:ident, $x:ident| $body:expr) => {
            Case {
                name: $name,
                shapes: $shapes,
                range: $range,
                f: Box::new(|$t: &Tape, $x: &[Var]| -> Var { weighted($t, $body) }),
                valid: $valid,
            }
        };
    }
    let sym = (-2.0, 2.0);
    let pos = (0.2, 3.0);
    vec![
        case!(
            "add",
            vec![vec![3, 4], vec![3, 4]],
            sym,
            any_input,
            |t, x| x[0] + x[1]
        ),
        case!(
            "add_broadcast_row",
            vec![vec![3, 4], vec![4]],
            sym,
            any_input,
            |t, x| x[0] + x[1]
        ),
        case!(
            "add_broadcast_col",
            vec![vec![3, 1], vec![3, 4]],
            sym,
            any_input,
            |t, x| x[0] + x[1]
        ),
        case!(
            "sub_broadcast",
            vec![vec![2, 3], vec![1, 3]],
            sym,
            any_input,
            |t, x| x[0] - x[1]
        ),
        case!(
            "mul",
            vec![vec![3, 4], vec![3, 4]],
            sym,
            any_input,
            |t, x| x[0] * x[1]
        ),
        case!(
            "mul_broadcast_scalar",
            vec![vec![3, 4], vec![]],
            sym,
            any_input,
            |t, x| x[0] * x[1]
        ),
        case!(
            "div",
            vec![vec![2, 3], vec![2, 3]],
            pos,
            any_input,
            |t, x| x[0] / x[1]
        ),
        case!(
            "div_broadcast",
            vec![vec![2, 3], vec![2, 1]],
            pos,
            any_input,
            |t, x| x[0] / x[1]
        ),
        case!(
            "minimum",
            vec![vec![3, 2], vec![3, 2]],
            sym,
            distinct_pairs,
            |t, x| x[0].minimum(x[1])
        ),
        case!("neg", vec![vec![5]], sym, any_input, |t, x| -x[0]),
        case!("exp", vec![vec![5]], sym, any_input, |t, x| x[0].exp()),
        case!("log", vec![vec![5]], pos, any_input, |t, x| x[0].log()),
        case!("tanh", vec![vec![5]], sym, any_input, |t, x| x[0].tanh()),
        case!("relu", vec![vec![6]], sym, away_from_zero, |t, x| x[0]
            .relu()),
        case!("softplus", vec![vec![5]], (-6.0, 6.0), any_input, |t, x| x
            [0]
        .softplus()),
        case!("sigmoid", vec![vec![5]], (-6.0, 6.0), any_input, |t, x| x
            [0]
        .sigmoid()),
        case!("square", vec![vec![5]], sym, any_input, |t, x| x[0]
            .square()),
        case!("sqrt", vec![vec![5]], pos, any_input, |t, x| x[0].sqrt()),
        case!("abs", vec![vec![5]], sym, away_from_zero, |t, x| x[0].abs()),
        case!("scale", vec![vec![5]], sym, any_input, |t, x| x[0] * -1.7),
        case!("add_scalar", vec![vec![5]], sym, any_input, |t, x| x[0]
            + 0.4),
        case!(
            "clip",
            vec![vec![6]],
            (-1.0, 1.0),
            away_from_clip,
            |t, x| x[0].clip(-0.5, 0.5)
        ),
        case!(
            "matmul",
            vec![vec![3, 4], vec![4, 2]],
            sym,
            any_input,
            |t, x| x[0].matmul(x[1])
        ),
        case!(
            "matmul_ta",
            vec![vec![4, 3], vec![4, 2]],
            sym,
            any_input,
            |t, x| x[0].matmul_t(x[1], true, false)
        ),
        case!(
            "matmul_tb",
            vec![vec![3, 4], vec![2, 4]],
            sym,
            any_input,
            |t, x| x[0].matmul_t(x[1], false, true)
        ),
        case!(
            "matmul_tatb",
            vec![vec![4, 3], vec![2, 4]],
            sym,
            any_input,
            |t, x| x[0].matmul_t(x[1], true, true)
        ),
        case!("sum", vec![vec![3, 2]], sym, any_input, |t, x| x[0].sum()),
        case!("mean", vec![vec![3, 2]], sym, any_input, |t, x| x[0].mean()),
        case!("sum_axis0", vec![vec![3, 4]], sym, any_input, |t, x| x[0]
            .sum_axis(0, false)),
        case!(
            "sum_axis1_keep",
            vec![vec![2, 3, 2]],
            sym,
            any_input,
            |t, x| x[0].sum_axis(1, true)
        ),
        case!("mean_axis", vec![vec![3, 4]], sym, any_input, |t, x| x[0]
            .mean_axis(1, false)),
        case!("reshape", vec![vec![2, 6]], sym, any_input, |t, x| x[0]
            .reshape(&[3, 4])),
        case!("broadcast_to", vec![vec![3, 1]], sym, any_input, |t, x| x
            [0]
        .broadcast_to(&[2, 3, 4])),
        case!("sum_to", vec![vec![2, 3, 4]], sym, any_input, |t, x| x[0]
            .sum_to(&[3, 1])),
        case!(
            "concat",
            vec![vec![2, 1], vec![2, 3]],
            sym,
            any_input,
            |t, x| t.concat(&[x[0], x[1]], 1)
        ),
        case!("slice", vec![vec![3, 5]], sym, any_input, |t, x| x[0]
            .slice_axis(1, 1, 4)),
        case!("pad", vec![vec![2, 2]], sym, any_input, |t, x| x[0]
            .pad_axis(0, 1, 4)),
        case!(
            "composite_mlp",
            vec![vec![4, 3], vec![3, 5], vec![5]],
            sym,
            any_input,
            |t, x| (x[0].matmul(x[1]) + x[2]).tanh()
        ),
    ]
}

/// Worst relative error of each operation over `trials` valid random inputs.
pub fn check_ops(trials: usize, seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    cases()
        .into_iter()
        .map(|case| {
            let mut worst = 0.0f64;
            let mut done = 0;
            while done < trials {
                let inputs: Vec<Array> = case
                    .shapes
                    .iter()
                    .map(|s| random_array(&mut rng, s, case.range.0, case.range.1))
                    .collect();
                if !(case.valid)(&inputs) {
                    continue;
                }
                worst = worst.max(max_grad_error(&*case.f, &inputs));
                done += 1;
            }
            (case.name, worst)
        })
        .collect()
}

/// Dense layer weights `w` (in × out) and bias `b` (out).
pub struct Layer {
    pub w: Array,
    pub b: Array,
}

#[derive(Clone, Copy, PartialEq)]
pub enum Act {
    Tanh,
    Relu,
}

pub fn random_mlp(rng: &mut ChaCha8Rng, dims: &[usize]) -> Vec<Layer> {
    dims.windows(2)
        .map(|d| Layer {
            w: random_array(rng, &[d[0], d[1]], -0.8, 0.8),
            b: random_array(rng, &[d[1]], -0.3, 0.3),
        })
        .collect()
}

pub fn mlp_forward<'t>(params: &[(Var<'t>, Var<'t>)], x: Var<'t>, act: Act) -> Var<'t> {
    let mut h = x;
    for (i, (w, b)) in params.iter().enumerate() {
        h = h.matmul(*w) + *b;
        if i + 1 < params.len() {
            h = match act {
                Act::Tanh => h.tanh(),
                Act::Relu => h.relu(),
            };
        }
    }
    h
}

/// Hand-derived ∇_a Q for one row: forward, then a plain chain rule written
/// out with loops. Independent of the engine's reverse pass.
pub fn input_grad_oracle(layers: &[Layer], x: &[f64], act: Act) -> Vec<f64> {
    let mut acts = vec![x.to_vec()];
    let mut derivs = Vec::new();
    for (li, l) in layers.iter().enumerate() {
        let (n_in, n_out) = (l.w.shape()[0], l.w.shape()[1]);
        let prev = acts.last().unwrap();
        let mut z = l.b.data().to_vec();
        for j in 0..n_out {
            for i in 0..n_in {
                z[j] += prev[i] * l.w.data()[i * n_out + j];
            }
        }
        if li + 1 < layers.len() {
            let (h, d): (Vec<f64>, Vec<f64>) = z
                .iter()
                .map(|&v| match act {
                    Act::Tanh => (v.tanh(), 1.0 - v.tanh().powi(2)),
                    Act::Relu => (v.max(0.0), f64::from(v > 0.0)),
                })
                .unzip();
            acts.push(h);
            derivs.push(d);
        } else {
            acts.push(z);
        }
    }
    // Output is scalar: start with dQ/dz_last = 1.
    let mut upstream = vec![1.0];
    for li in (0..layers.len()).rev() {
        let l = &layers[li];
        let (n_in, n_out) = (l.w.shape()[0], l.w.shape()[1]);
        let mut down = vec![0.0; n_in];
        for i in 0..n_in {
            for j in 0..n_out {
                down[i] += l.w.data()[i * n_out + j] * upstream[j];
            }
        }
        if li > 0 {
            for (d, a) in down.iter_mut().zip(&derivs[li - 1]) {
                *d *= a;
            }
        }
        upstream = down;
    }
    upstream
}

/// Σ_rows ‖∇_a Q(s, a)‖₂ computed entirely by the oracle.
pub fn penalty_oracle(layers: &[Layer], s: &Array, a: &Array, act: Act) -> f64 {
    let ds = s.shape()[1];
    (0..s.rows())
        .map(|r| {
            let x: Vec<f64> = s.row(r).iter().chain(a.row(r)).copied().collect();
            let g = input_grad_oracle(layers, &x, act);
            g[ds..].iter().map(|v| v * v).sum::<f64>().sqrt()
        })
        .sum()
}

/// Returns `(|engine penalty − oracle penalty|, worst relative error of the
/// weight gradient)` for a random MLP with the given layer sizes, whose input
/// is a 3-dim state concatenated with a 2-dim action.
pub fn nested_penalty_error(act: Act, dims: &[usize], seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (ds, da, batch) = (3, 2, 4);
    let layers = random_mlp(&mut rng, dims);
    let s = random_array(&mut rng, &[batch, ds], -1.0, 1.0);
    let a = random_array(&mut rng, &[batch, da], -1.0, 1.0);

    let tape = Tape::new();
    let params: Vec<(Var, Var)> = layers
        .iter()
        .map(|l| (tape.param(l.w.clone()), tape.param(l.b.clone())))
        .collect();
    let sv = tape.constant(s.clone());
    let av = tape.param(a.clone());
    let q = mlp_forward(&params, tape.concat(&[sv, av], 1), act);
    let ga = tape.grad(q.sum(), &[av], true).unwrap()[0];
    let norm = ga.square().sum_axis(1, false).sqrt().sum();

    // The engine's value of the penalty agrees with the oracle.
    let value_err = (norm.item() - penalty_oracle(&layers, &s, &a, act)).abs();

    let flat: Vec<Var> = params.iter().flat_map(|(w, b)| [*w, *b]).collect();
    let grads = tape.grad(norm, &flat, false).unwrap();
    let mut worst = 0.0f64;
    for (li, layer) in layers.iter().enumerate() {
        for (which, arr) in [(0, &layer.w), (1, &layer.b)] {
            let g = grads[2 * li + which].value();
            for i in 0..arr.len() {
                let perturbed = |delta: f64| {
                    let mut ls: Vec<Layer> = layers
                        .iter()
                        .map(|l| Layer {
                            w: l.w.clone(),
                            b: l.b.clone(),
                        })
                        .collect();
                    let target = if which == 0 {
                        &mut ls[li].w
                    } else {
                        &mut ls[li].b
                    };
                    target.data_mut()[i] += delta;
                    penalty_oracle(&ls, &s, &a, act)
                };
                let numeric = (perturbed(H) - perturbed(-H)) / (2.0 * H);
                worst = worst.max(rel_err(g.data()[i], numeric));
            }
        }
    }
    (value_err, worst)
}
