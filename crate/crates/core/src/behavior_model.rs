//! Conditional VAE ensemble for the behavior policy, trained on pre-squash
//! actions `u = atanh(a)`.
//!
//! Encoder `q(z | s, u)` and decoder `p(u | s, z)` are diagonal Gaussians and
//! the prior is `N(0, I)`. Besides the ELBO the model provides the analytical
//! upper bound on `KL(π ‖ π_b)`:
//!
//! `E_{u∼π, z∼q(·|s,u)} [ KL(π(·|s) ‖ p(·|s,z)) + KL(q(z|s,u) ‖ p(z)) ]`.

use std::path::Path;

use ndgrad::{Array, Tape, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::distributions::{kl_diag_gaussian, standard_normal, DiagGaussian};
use crate::envs_data::Dataset;
use crate::error::{Error, Result};
use crate::networks::{
    gaussian_head, layer_sizes, load_tensors, save_tensors, Adam, BoundMlp, Mlp,
};
use crate::rng::{stream_rng, streams};

/// Log-std range of the encoder and decoder heads.
pub const CVAE_LOG_STD_MIN: f64 = -10.0;
pub const CVAE_LOG_STD_MAX: f64 = 2.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Cvae {
    pub encoder: Mlp,
    pub decoder: Mlp,
    state_dim: usize,
    action_dim: usize,
    latent_dim: usize,
}

impl Cvae {
    /// Two hidden layers each side; latent size is twice the action size.
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        action_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let latent_dim = 2 * action_dim;
        Ok(Cvae {
            encoder: Mlp::new(
                &layer_sizes(state_dim + action_dim, hidden, 2, 2 * latent_dim),
                rng,
            )?,
            decoder: Mlp::new(
                &layer_sizes(state_dim + latent_dim, hidden, 2, 2 * action_dim),
                rng,
            )?,
            state_dim,
            action_dim,
            latent_dim,
        })
    }

    pub fn from_parts(
        encoder: Mlp,
        decoder: Mlp,
        state_dim: usize,
        action_dim: usize,
    ) -> Result<Self> {
        let latent_dim = 2 * action_dim;
        if encoder.input_dim() != state_dim + action_dim
            || encoder.output_dim() != 2 * latent_dim
            || decoder.input_dim() != state_dim + latent_dim
            || decoder.output_dim() != 2 * action_dim
        {
            return Err(Error::Format(format!(
                "cvae networks {:?} / {:?} do not fit state {state_dim}, action {action_dim}",
                encoder.sizes(),
                decoder.sizes()
            )));
        }
        Ok(Cvae {
            encoder,
            decoder,
            state_dim,
            action_dim,
            latent_dim,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundCvae<'t> {
        BoundCvae {
            enc: self.encoder.bind(tape),
            dec: self.decoder.bind(tape),
            latent_dim: self.latent_dim,
        }
    }

    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> BoundCvae<'t> {
        BoundCvae {
            enc: self.encoder.bind_frozen(tape),
            dec: self.decoder.bind_frozen(tape),
            latent_dim: self.latent_dim,
        }
    }

    /// Importance-weighted estimate of `log p(u | s)` per row with `m` latent
    /// samples drawn from the encoder.
    pub fn log_likelihood_iw<R: Rng + ?Sized>(
        &self,
        s: &Array,
        u: &Array,
        m: usize,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let n = s.rows();
        if m == 0 || u.rows() != n {
            return Err(Error::Precondition(
                "importance sampling needs m ≥ 1 and matching rows".into(),
            ));
        }
        let tape = Tape::new();
        let model = self.bind_frozen(&tape);
        let rep = |a: &Array| -> Result<Array> {
            let parts: Vec<&Array> = std::iter::repeat_n(a, m).collect();
            Ok(Array::concat(&parts, 0)?)
        };
        let s_rep = tape.constant(rep(s)?);
        let u_rep = tape.constant(rep(u)?);
        let q = model.encode(s_rep, u_rep)?;
        let z = q.rsample(&standard_normal(rng, &[n * m, self.latent_dim]))?;
        let p = model.decode(s_rep, z)?;
        let log_w = p.log_prob(u_rep)? + DiagGaussian::standard(z).log_prob(z)? - q.log_prob(z)?;
        let w = log_w.value();
        let w = w.data();
        Ok((0..n)
            .map(|i| {
                let col: Vec<f64> = (0..m).map(|k| w[k * n + i]).collect();
                log_mean_exp(&col)
            })
            .collect())
    }
}

pub fn log_mean_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + (xs.iter().map(|x| (x - m).exp()).sum::<f64>() / xs.len() as f64).ln()
}

pub struct BoundCvae<'t> {
    enc: BoundMlp<'t>,
    dec: BoundMlp<'t>,
    latent_dim: usize,
}

impl<'t> BoundCvae<'t> {
    pub fn encoder(&self) -> &BoundMlp<'t> {
        &self.enc
    }

    pub fn decoder(&self) -> &BoundMlp<'t> {
        &self.dec
    }

    pub fn encode(&self, s: Var<'t>, u: Var<'t>) -> Result<DiagGaussian<'t>> {
        let x = s.tape().try_concat(&[s, u], 1)?;
        gaussian_head(self.enc.forward(x)?, CVAE_LOG_STD_MIN, CVAE_LOG_STD_MAX)
    }

    pub fn decode(&self, s: Var<'t>, z: Var<'t>) -> Result<DiagGaussian<'t>> {
        let x = s.tape().try_concat(&[s, z], 1)?;
        gaussian_head(self.dec.forward(x)?, CVAE_LOG_STD_MIN, CVAE_LOG_STD_MAX)
    }

    /// Single-sample reparameterised ELBO per row.
    pub fn elbo(&self, s: Var<'t>, u: Var<'t>, noise_z: &Array) -> Result<Var<'t>> {
        let q = self.encode(s, u)?;
        let z = q.rsample(noise_z)?;
        let p = self.decode(s, z)?;
        let prior = DiagGaussian::standard(q.mean);
        Ok(p.log_prob(u)? - kl_diag_gaussian(&q, &prior)?)
    }

    /// Single-sample analytical KL upper bound per row. `policy` is the
    /// pre-squash Gaussian of the policy; `noise_a` reparameterises `u ∼ π`
    /// and `noise_z` reparameterises `z ∼ q(z | s, u)`.
    pub fn kl_upper_bound(
        &self,
        policy: &DiagGaussian<'t>,
        s: Var<'t>,
        noise_a: &Array,
        noise_z: &Array,
    ) -> Result<Var<'t>> {
        let u = policy.rsample(noise_a)?;
        let q = self.encode(s, u)?;
        let z = q.rsample(noise_z)?;
        let p = self.decode(s, z)?;
        let prior = DiagGaussian::standard(q.mean);
        Ok(kl_diag_gaussian(policy, &p)? + kl_diag_gaussian(&q, &prior)?)
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 20_000,
            batch: 100,
            lr: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CvaeEnsemble {
    pub members: Vec<Cvae>,
}

impl CvaeEnsemble {
    pub fn new(
        members: usize,
        state_dim: usize,
        action_dim: usize,
        hidden: usize,
        seed: u64,
    ) -> Result<Self> {
        if members == 0 {
            return Err(Error::Config("ensemble needs at least one member".into()));
        }
        let mut rng = stream_rng(seed, streams::BEHAVIOR_INIT);
        let members = (0..members)
            .map(|_| Cvae::new(state_dim, action_dim, hidden, &mut rng))
            .collect::<Result<_>>()?;
        Ok(CvaeEnsemble { members })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn pick<R: Rng + ?Sized>(&self, rng: &mut R) -> &Cvae {
        &self.members[rng.gen_range(0..self.members.len())]
    }

    /// Train each member independently by ELBO ascent. Returns the per-step
    /// mean minibatch ELBO for every member.
    pub fn pretrain(
        &mut self,
        dataset: &Dataset,
        cfg: &PretrainConfig,
        seed: u64,
    ) -> Result<Vec<Vec<f64>>> {
        if dataset.is_empty() {
            return Err(Error::Precondition(
                "cannot pretrain on an empty dataset".into(),
            ));
        }
        if cfg.batch == 0 || !(cfg.lr > 0.0) {
            return Err(Error::Config(
                "pretraining needs batch ≥ 1 and lr > 0".into(),
            ));
        }
        let pre = dataset.pre_squash_actions()?;
        let mut curves = Vec::with_capacity(self.members.len());
        for (k, member) in self.members.iter_mut().enumerate() {
            let mut rng = stream_rng(seed.wrapping_add(k as u64), streams::BEHAVIOR_TRAIN);
            let mut enc_opt = Adam::new(member.encoder.params(), cfg.lr);
            let mut dec_opt = Adam::new(member.decoder.params(), cfg.lr);
            let mut curve = Vec::with_capacity(cfg.steps);
            for step in 0..cfg.steps {
                let idx = dataset.sample_indices(&mut rng, cfg.batch);
                let batch = dataset.gather(&idx, &pre);
                let tape = Tape::new();
                let model = member.bind(&tape);
                let noise = standard_normal(&mut rng, &[cfg.batch, member.latent_dim]);
                let elbo = model
                    .elbo(
                        tape.constant(batch.states),
                        tape.constant(batch.pre_actions),
                        &noise,
                    )?
                    .mean();
                let value = elbo.item();
                if !value.is_finite() || value.abs() > 1e6 {
                    return Err(Error::numeric(
                        "behavior pretraining",
                        format!("member {k} step {step}: elbo {value}"),
                    ));
                }
                curve.push(value);
                let grads = tape.backward(-elbo)?;
                enc_opt.step(member.encoder.params_mut(), &model.encoder().grads(&grads))?;
                dec_opt.step(member.decoder.params_mut(), &model.decoder().grads(&grads))?;
            }
            curves.push(curve);
        }
        Ok(curves)
    }

    /// Ensemble-mean density of pre-squash actions, each member estimated by
    /// importance sampling with `m` latent draws.
    pub fn density_estimate<R: Rng + ?Sized>(
        &self,
        s: &Array,
        u: &Array,
        m: usize,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let mut acc = vec![0.0; s.rows()];
        for member in &self.members {
            for (a, ll) in acc.iter_mut().zip(member.log_likelihood_iw(s, u, m, rng)?) {
                *a += ll.exp();
            }
        }
        let b = self.members.len() as f64;
        Ok(acc.into_iter().map(|x| x / b).collect())
    }

    /// Per-member densities, shape `[member][row]`.
    pub fn member_densities<R: Rng + ?Sized>(
        &self,
        s: &Array,
        u: &Array,
        m: usize,
        rng: &mut R,
    ) -> Result<Vec<Vec<f64>>> {
        self.members
            .iter()
            .map(|member| {
                Ok(member
                    .log_likelihood_iw(s, u, m, rng)?
                    .into_iter()
                    .map(f64::exp)
                    .collect())
            })
            .collect()
    }

    pub fn tensors(&self) -> Vec<Array> {
        self.members
            .iter()
            .flat_map(|m| m.encoder.params().iter().chain(m.decoder.params()).cloned())
            .collect()
    }

    pub fn metadata(&self) -> serde_json::Value {
        let m = &self.members[0];
        serde_json::json!({
            "kind": "cvae_ensemble",
            "members": self.members.len(),
            "state_dim": m.state_dim,
            "action_dim": m.action_dim,
            "latent_dim": m.latent_dim,
            "encoder_sizes": m.encoder.sizes(),
            "decoder_sizes": m.decoder.sizes(),
            "activation": "relu",
            "action_space": "pre_squash",
        })
    }

    pub fn from_tensors(meta: &serde_json::Value, tensors: Vec<Array>) -> Result<Self> {
        let field = |k: &str| -> Result<serde_json::Value> {
            meta.get(k)
                .cloned()
                .ok_or_else(|| Error::Format(format!("ensemble sidecar lacks '{k}'")))
        };
        let count: usize = serde_json::from_value(field("members")?)?;
        let sd: usize = serde_json::from_value(field("state_dim")?)?;
        let ad: usize = serde_json::from_value(field("action_dim")?)?;
        let enc_sizes: Vec<usize> = serde_json::from_value(field("encoder_sizes")?)?;
        let dec_sizes: Vec<usize> = serde_json::from_value(field("decoder_sizes")?)?;
        let (ne, nd) = (2 * (enc_sizes.len() - 1), 2 * (dec_sizes.len() - 1));
        if count == 0 || tensors.len() != count * (ne + nd) {
            return Err(Error::Format(format!(
                "ensemble checkpoint holds {} tensors, expected {}",
                tensors.len(),
                count * (ne + nd)
            )));
        }
        let mut it = tensors.into_iter();
        let mut members = Vec::with_capacity(count);
        for _ in 0..count {
            let enc = Mlp::from_params(&enc_sizes, it.by_ref().take(ne).collect())?;
            let dec = Mlp::from_params(&dec_sizes, it.by_ref().take(nd).collect())?;
            members.push(Cvae::from_parts(enc, dec, sd, ad)?);
        }
        Ok(CvaeEnsemble { members })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_tensors(path, &self.tensors(), &self.metadata())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (tensors, meta) = load_tensors(path)?;
        Self::from_tensors(&meta, tensors)
    }
}
