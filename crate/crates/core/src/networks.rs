//! Feed-forward networks, twin Q-functions, Adam and the checkpoint format.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndgrad::{Array, Gradients, Tape, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::distributions::{ActionBounds, DiagGaussian, TanhDiagGaussian};
use crate::error::{Error, Result};

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;

/// Multi-layer perceptron with ReLU hidden activations and a linear output.
/// Weights are stored `(fan_in, fan_out)` so a batch multiplies from the left.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<Array>,
}

impl Mlp {
    /// Uniform fan-in initialisation: `U(−1/√fan_in, 1/√fan_in)` for weights and biases.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Result<Self> {
        Self::check_sizes(sizes)?;
        let mut params = Vec::with_capacity(2 * (sizes.len() - 1));
        for w in sizes.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            let mut draw = |n: usize| {
                (0..n)
                    .map(|_| rng.gen_range(-bound..bound))
                    .collect::<Vec<_>>()
            };
            let weight = Array::new(vec![w[0], w[1]], draw(w[0] * w[1]))?;
            let bias = Array::new(vec![w[1]], draw(w[1]))?;
            params.push(weight);
            params.push(bias);
        }
        Ok(Mlp {
            sizes: sizes.to_vec(),
            params,
        })
    }

    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        Self::check_sizes(sizes)?;
        let params = sizes
            .windows(2)
            .flat_map(|w| [Array::zeros(&[w[0], w[1]]), Array::zeros(&[w[1]])])
            .collect();
        Ok(Mlp {
            sizes: sizes.to_vec(),
            params,
        })
    }

    /// Rebuild from a flat parameter list, checking every shape.
    pub fn from_params(sizes: &[usize], params: Vec<Array>) -> Result<Self> {
        Self::check_sizes(sizes)?;
        let expected: Vec<Vec<usize>> = sizes
            .windows(2)
            .flat_map(|w| [vec![w[0], w[1]], vec![w[1]]])
            .collect();
        let got: Vec<Vec<usize>> = params.iter().map(|p| p.shape().to_vec()).collect();
        if expected != got {
            return Err(Error::Format(format!(
                "parameter shapes {got:?} do not match layer sizes {sizes:?}"
            )));
        }
        Ok(Mlp {
            sizes: sizes.to_vec(),
            params,
        })
    }

    fn check_sizes(sizes: &[usize]) -> Result<()> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Config(format!("invalid layer sizes {sizes:?}")));
        }
        Ok(())
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn params(&self) -> &[Array] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Array] {
        &mut self.params
    }

    /// Place the parameters on `tape` as trainable leaves.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundMlp<'t> {
        BoundMlp {
            vars: self.params.iter().map(|p| tape.param(p.clone())).collect(),
        }
    }

    /// Place the parameters on `tape` as constants; gradients still flow to
    /// the inputs but never to these weights.
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> BoundMlp<'t> {
        BoundMlp {
            vars: self
                .params
                .iter()
                .map(|p| tape.constant(p.clone()))
                .collect(),
        }
    }

    pub fn squared_distance(&self, other: &Mlp) -> f64 {
        self.params
            .iter()
            .zip(&other.params)
            .flat_map(|(a, b)| {
                a.data()
                    .iter()
                    .zip(b.data())
                    .map(|(x, y)| (x - y) * (x - y))
            })
            .sum()
    }
}

pub struct BoundMlp<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> BoundMlp<'t> {
    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }

    pub fn forward(&self, x: Var<'t>) -> Result<Var<'t>> {
        let layers = self.vars.len() / 2;
        let mut h = x;
        for l in 0..layers {
            h = h
                .try_matmul_t(self.vars[2 * l], false, false)?
                .try_add(self.vars[2 * l + 1])?;
            if l + 1 < layers {
                h = h.relu();
            }
        }
        Ok(h)
    }

    /// Gradients for each parameter in binding order; unused ones are zero.
    pub fn grads(&self, grads: &Gradients) -> Vec<Array> {
        self.vars.iter().map(|v| grads.get_or_zeros(*v)).collect()
    }
}

/// Hidden-layer sizes helper: `[input, hidden × depth, output]`.
pub fn layer_sizes(input: usize, hidden: usize, depth: usize, output: usize) -> Vec<usize> {
    let mut s = vec![input];
    s.extend(std::iter::repeat_n(hidden, depth));
    s.push(output);
    s
}

/// Split a `(n, 2d)` head into `(mean, log_std)` with `log_std` clipped.
pub fn gaussian_head<'t>(out: Var<'t>, lo: f64, hi: f64) -> Result<DiagGaussian<'t>> {
    let shape = out.shape();
    let two_d = *shape.last().unwrap();
    let axis = shape.len() - 1;
    let d = two_d / 2;
    let mean = out.try_slice_axis(axis, 0, d)?;
    let log_std = out.try_slice_axis(axis, d, two_d)?.clip(lo, hi);
    DiagGaussian::new(mean, log_std)
}

/// Policy head: the network emits `[mean, log_std]`, `log_std ∈ [−20, 2]`.
pub fn policy_forward<'t, 'b>(
    policy: &BoundMlp<'t>,
    s: Var<'t>,
    bounds: &'b ActionBounds,
) -> Result<TanhDiagGaussian<'t, 'b>> {
    let out = policy.forward(s)?;
    TanhDiagGaussian::new(gaussian_head(out, LOG_STD_MIN, LOG_STD_MAX)?, bounds)
}

/// Q-value per row, shape `(n,)`.
pub fn q_forward<'t>(q: &BoundMlp<'t>, s: Var<'t>, a: Var<'t>) -> Result<Var<'t>> {
    let tape = s.tape();
    let x = tape.try_concat(&[s, a], 1)?;
    let out = q.forward(x)?;
    let n = out.shape()[0];
    Ok(out.try_reshape(&[n])?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TwinQ {
    pub q1: Mlp,
    pub q2: Mlp,
    pub q1_target: Mlp,
    pub q2_target: Mlp,
}

impl TwinQ {
    /// Independently initialised online networks; targets start as copies.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Result<Self> {
        let q1 = Mlp::new(sizes, rng)?;
        let q2 = Mlp::new(sizes, rng)?;
        Ok(TwinQ {
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            q1,
            q2,
        })
    }

    /// `min(Q1', Q2')` from the target networks, constant on the tape.
    pub fn target_min<'t>(&self, tape: &'t Tape, s: Var<'t>, a: Var<'t>) -> Result<Var<'t>> {
        let t1 = q_forward(&self.q1_target.bind_frozen(tape), s, a)?;
        let t2 = q_forward(&self.q2_target.bind_frozen(tape), s, a)?;
        Ok(t1.try_minimum(t2)?.detach())
    }

    /// `target ← τ·online + (1 − τ)·target` for both pairs.
    pub fn polyak_update(&mut self, tau: f64) -> Result<()> {
        if !(tau > 0.0 && tau <= 1.0) {
            return Err(Error::Config(format!("polyak rate {tau} outside (0, 1]")));
        }
        for (online, target) in [
            (&self.q1, &mut self.q1_target),
            (&self.q2, &mut self.q2_target),
        ] {
            for (p, t) in online.params.iter().zip(target.params.iter_mut()) {
                for (x, y) in p.data().iter().zip(t.data_mut()) {
                    *y = tau * x + (1.0 - tau) * *y;
                }
            }
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Array>,
    pub v: Vec<Array>,
}

impl Adam {
    pub fn new(params: &[Array], lr: f64) -> Self {
        let zeros: Vec<Array> = params.iter().map(|p| Array::zeros(p.shape())).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut [Array], grads: &[Array]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::Precondition(format!(
                "optimizer holds {} slots, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(Error::Precondition(format!(
                    "parameter {i} has shape {:?} but gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            if !g.all_finite() {
                return Err(Error::numeric(
                    "optimizer step",
                    format!("non-finite gradient in parameter {i}"),
                ));
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((x, gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *x -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    /// Tensors that fully describe the optimizer, for checkpoints.
    pub fn state_tensors(&self) -> Vec<Array> {
        let mut out = vec![Array::from_vec(vec![self.t as f64])];
        out.extend(self.m.iter().cloned());
        out.extend(self.v.iter().cloned());
        out
    }

    pub fn restore(&mut self, tensors: &[Array]) -> Result<()> {
        let k = self.m.len();
        if tensors.len() != 1 + 2 * k {
            return Err(Error::Format(format!(
                "optimizer state has {} tensors, expected {}",
                tensors.len(),
                1 + 2 * k
            )));
        }
        for (i, t) in tensors[1..].iter().enumerate() {
            let want = if i < k {
                self.m[i].shape()
            } else {
                self.v[i - k].shape()
            };
            if t.shape() != want {
                return Err(Error::Format("optimizer moment shape mismatch".into()));
            }
        }
        self.t = tensors[0].data()[0] as u64;
        self.m = tensors[1..=k].to_vec();
        self.v = tensors[k + 1..].to_vec();
        Ok(())
    }
}

const CKPT_MAGIC: &[u8; 6] = b"BRACP1";
const CKPT_VERSION: u32 = 1;

/// Sidecar path for a checkpoint: `model.bin` → `model.bin.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Write tensors in the binary checkpoint format plus a JSON sidecar.
pub fn save_tensors(path: &Path, tensors: &[Array], metadata: &serde_json::Value) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for d in t.shape() {
            buf.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    write_atomic(path, &buf)?;
    write_atomic(
        &sidecar_path(path),
        serde_json::to_string_pretty(metadata)?.as_bytes(),
    )
}

/// Write through a temporary file and rename, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Byte cursor that reports truncation as a format error.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Reader {
            bytes,
            pos: 0,
            what,
        }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Format(format!(
                    "{} truncated at byte {}",
                    self.what,
                    self.bytes.len()
                ))
            })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Format("length overflow".into()))?,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn finished(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Read a checkpoint written by [`save_tensors`], returning tensors and sidecar.
pub fn load_tensors(path: &Path) -> Result<(Vec<Array>, serde_json::Value)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = Reader::new(&bytes, "checkpoint");
    if r.take(6)? != CKPT_MAGIC {
        return Err(Error::Format(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = r.u32()?;
    if version != CKPT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        tensors.push(Array::new(shape, r.f64s(n)?)?);
    }
    if !r.finished() {
        return Err(Error::Format(
            "trailing bytes after checkpoint tensors".into(),
        ));
    }
    let meta = serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)?;
    Ok((tensors, meta))
}

/// Architecture of a single network, stored in sidecars.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub sizes: Vec<usize>,
}

pub fn save_mlp(path: &Path, mlp: &Mlp) -> Result<()> {
    let meta = serde_json::json!({ "kind": "mlp", "sizes": mlp.sizes(), "activation": "relu" });
    save_tensors(path, mlp.params(), &meta)
}

pub fn load_mlp(path: &Path) -> Result<Mlp> {
    let (tensors, meta) = load_tensors(path)?;
    let sizes: Vec<usize> = serde_json::from_value(meta["sizes"].clone())?;
    Mlp::from_params(&sizes, tensors)
}
