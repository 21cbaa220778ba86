//! Behavior-regularised actor-critic with the analytical KL bound and
//! gradient-penalised policy evaluation.
//!
//! One training step samples a minibatch and
//! 1. updates both Q-networks on the TD loss plus, when enabled,
//!    `λ · E_{a∼π}[‖∇_a Q(s, a)‖₂ · softplus(D̂(s))]`;
//! 2. updates the policy on `−E[min_j Q_j(s, a∼π)] + α_kl (D̂ − ε) + α_ent (H₀ − Ĥ)`;
//! 3. moves the multipliers by dual ascent and Polyak-averages the targets.

use std::path::Path;

use ndgrad::{Array, Tape, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::behavior_model::{Cvae, CvaeEnsemble};
use crate::distributions::{softplus, standard_normal, ActionBounds, DiagGaussian};
use crate::divergences::{mmd_squared_batched, KernelSpec};
use crate::envs_data::{normalized_score, rollout_returns, Dataset, ScoreReference};
use crate::error::{Error, Result};
use crate::networks::{
    layer_sizes, load_tensors, policy_forward, q_forward, save_tensors, Adam, Mlp, TwinQ,
};
use crate::rng::{stream_rng, streams};

/// Losses above this magnitude are treated as divergence of the optimiser.
pub const LOSS_ABORT: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularizer {
    KlUpper,
    Mmd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub gamma: f64,
    pub tau: f64,
    pub batch: usize,
    pub policy_lr: f64,
    pub q_lr: f64,
    pub steps_per_epoch: usize,
    pub epochs: usize,
    pub eps_generalization: f64,
    pub target_entropy_fraction: f64,
    pub gp_enabled: bool,
    pub regularizer: Regularizer,
    pub lambda_constraint_target: f64,
    pub dual_lr: f64,
    /// Initial value of every multiplier.
    pub multiplier_init: f64,
    pub policy_hidden: usize,
    pub q_hidden: usize,
    pub init_policy_steps: usize,
    pub init_policy_lr: f64,
    /// Interval, in steps, between evaluations of the bound during policy init.
    pub init_eval_every: usize,
    pub init_q_steps: usize,
    /// Dataset states used for the fixed-noise bound and entropy estimates.
    pub eval_states: usize,
    pub entropy_samples: usize,
    pub eval_episodes: usize,
    pub mmd_samples: usize,
    pub mmd_bandwidth: f64,
    pub mmd_eps_generalization: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            gamma: 0.99,
            tau: 1e-3,
            batch: 100,
            policy_lr: 5e-6,
            q_lr: 3e-4,
            steps_per_epoch: 2000,
            epochs: 50,
            eps_generalization: 0.5,
            target_entropy_fraction: 0.25,
            gp_enabled: true,
            regularizer: Regularizer::KlUpper,
            lambda_constraint_target: 1.0,
            dual_lr: 1e-3,
            multiplier_init: 1.0,
            policy_hidden: 64,
            q_hidden: 64,
            init_policy_steps: 5000,
            init_policy_lr: 1e-3,
            init_eval_every: 250,
            init_q_steps: 10_000,
            eval_states: 1000,
            entropy_samples: 16,
            eval_episodes: 10,
            mmd_samples: 5,
            mmd_bandwidth: 1.0,
            mmd_eps_generalization: 0.05,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie in (0, 1)");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau must lie in (0, 1]");
        }
        for (name, lr) in [
            ("policy_lr", self.policy_lr),
            ("q_lr", self.q_lr),
            ("dual_lr", self.dual_lr),
            ("init_policy_lr", self.init_policy_lr),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.batch == 0
            || self.steps_per_epoch == 0
            || self.eval_states == 0
            || self.entropy_samples == 0
        {
            return bad("batch, steps_per_epoch, eval_states and entropy_samples must be positive");
        }
        if self.policy_hidden == 0 || self.q_hidden == 0 || self.init_eval_every == 0 {
            return bad("hidden sizes and init_eval_every must be positive");
        }
        if self.mmd_samples < 2 || !(self.mmd_bandwidth > 0.0) {
            return bad("mmd needs at least 2 samples and a positive bandwidth");
        }
        if !(self.multiplier_init > 0.0) || !(self.lambda_constraint_target > 0.0) {
            return bad("multiplier_init and lambda_constraint_target must be positive");
        }
        if !(self.eps_generalization >= 0.0) || !(self.mmd_eps_generalization >= 0.0) {
            return bad("generalization margins must be non-negative");
        }
        Ok(())
    }
}

/// Affine map of rewards onto `[0, 1]`; the original range is kept in the
/// metadata.
pub fn scale_rewards(dataset: &Dataset) -> Result<Dataset> {
    if dataset.meta.raw_reward_range.is_some() {
        return Err(Error::Precondition("rewards are already scaled".into()));
    }
    let (lo, hi) = (dataset.meta.r_min, dataset.meta.r_max);
    if !(hi > lo) {
        return Err(Error::Precondition(format!(
            "cannot rescale constant rewards ({lo}, {hi})"
        )));
    }
    let mut out = dataset.clone();
    for r in &mut out.rewards {
        *r = ((*r - lo) / (hi - lo)).clamp(0.0, 1.0);
    }
    out.meta.r_min = 0.0;
    out.meta.r_max = 1.0;
    out.meta.raw_reward_range = Some([lo, hi]);
    Ok(out)
}

/// One line of the run log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_dataset_q: f64,
    pub kl_bound_mean: f64,
    pub entropy_mean: f64,
    pub alpha_kl: f64,
    pub alpha_ent: f64,
    pub lambda_gp: f64,
    pub eval_return_raw: f64,
    pub eval_return_normalized: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct QReport {
    pub td_loss: f64,
    /// Mean of `‖∇_a Q‖₂ · softplus(D̂)` over both networks; zero when disabled.
    pub penalty: f64,
    pub grad_norm: f64,
    pub q_mean: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PolicyReport {
    pub loss: f64,
    pub q_mean: f64,
    pub divergence: f64,
    pub entropy: f64,
}

/// Frozen pieces shared by the step functions.
struct Ctx<'a> {
    cfg: &'a AgentConfig,
    bounds: &'a ActionBounds,
}

/// Fixed-noise estimates on the evaluation states.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PolicyStats {
    pub divergence: f64,
    pub entropy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Agent {
    pub cfg: AgentConfig,
    pub seed: u64,
    pub bounds: ActionBounds,
    pub state_dim: usize,
    pub policy: Mlp,
    pub twin: TwinQ,
    pub behavior: CvaeEnsemble,
    pub log_alpha_kl: f64,
    pub alpha_ent: f64,
    pub log_lambda: f64,
    /// Divergence threshold `ε = ε_min + ε_generalization`.
    pub epsilon: f64,
    pub eps_min: f64,
    pub target_entropy: f64,
    policy_opt: Adam,
    q1_opt: Adam,
    q2_opt: Adam,
    /// Indices of the fixed evaluation states in the dataset.
    eval_idx: Vec<usize>,
    /// Last completed epoch; 0 after initialisation.
    pub epoch: usize,
    initialized: bool,
}

impl Agent {
    pub fn new(
        cfg: AgentConfig,
        behavior: CvaeEnsemble,
        bounds: ActionBounds,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let member = &behavior.members[0];
        if member.action_dim() != bounds.dim() {
            return Err(Error::Precondition(
                "behavior model and bounds disagree on action dim".into(),
            ));
        }
        let (sd, ad) = (member.state_dim(), member.action_dim());
        let mut rng = stream_rng(seed, streams::AGENT_INIT);
        let policy = Mlp::new(&layer_sizes(sd, cfg.policy_hidden, 2, 2 * ad), &mut rng)?;
        let twin = TwinQ::new(&layer_sizes(sd + ad, cfg.q_hidden, 2, 1), &mut rng)?;
        let log_m = cfg.multiplier_init.ln();
        Ok(Agent {
            policy_opt: Adam::new(policy.params(), cfg.policy_lr),
            q1_opt: Adam::new(twin.q1.params(), cfg.q_lr),
            q2_opt: Adam::new(twin.q2.params(), cfg.q_lr),
            alpha_ent: cfg.multiplier_init,
            log_alpha_kl: log_m,
            log_lambda: log_m,
            cfg,
            seed,
            bounds,
            state_dim: sd,
            policy,
            twin,
            behavior,
            epsilon: 0.0,
            eps_min: 0.0,
            target_entropy: 0.0,
            eval_idx: Vec::new(),
            epoch: 0,
            initialized: false,
        })
    }

    pub fn action_dim(&self) -> usize {
        self.bounds.dim()
    }

    pub fn alpha_kl(&self) -> f64 {
        self.log_alpha_kl.exp()
    }

    pub fn lambda_gp(&self) -> f64 {
        self.log_lambda.exp()
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    fn ctx(&self) -> Ctx<'_> {
        Ctx {
            cfg: &self.cfg,
            bounds: &self.bounds,
        }
    }

    fn check_dataset(&self, dataset: &Dataset) -> Result<()> {
        if dataset.is_empty() {
            return Err(Error::Precondition("dataset is empty".into()));
        }
        if dataset.state_dim() != self.state_dim || dataset.meta.action_bounds != self.bounds {
            return Err(Error::Precondition(
                "dataset does not match the agent's spaces".into(),
            ));
        }
        Ok(())
    }

    /// Policy initialisation by minimising the bound, then threshold and
    /// target-entropy selection, then Q initialisation by TD evaluation.
    pub fn initialize(&mut self, dataset: &Dataset) -> Result<InitReport> {
        self.check_dataset(dataset)?;
        let pre = dataset.pre_squash_actions()?;
        let mut rng = stream_rng(self.seed, streams::EVAL_STATES);
        let k = self.cfg.eval_states.min(dataset.len());
        self.eval_idx = (0..k).map(|_| rng.gen_range(0..dataset.len())).collect();
        let eval_states = dataset.gather(&self.eval_idx, &pre).states;

        let mut rng = stream_rng(self.seed, streams::POLICY_INIT);
        let mut opt = Adam::new(self.policy.params(), self.cfg.init_policy_lr);
        let mut best = (f64::INFINITY, self.policy.clone());
        let mut curve = Vec::new();
        for step in 0..=self.cfg.init_policy_steps {
            if step % self.cfg.init_eval_every == 0 || step == self.cfg.init_policy_steps {
                let d = self
                    .fixed_noise_stats(&eval_states, Regularizer::KlUpper)?
                    .divergence;
                curve.push((step, d));
                if d < best.0 {
                    best = (d, self.policy.clone());
                }
            }
            if step == self.cfg.init_policy_steps {
                break;
            }
            let idx = dataset.sample_indices(&mut rng, self.cfg.batch);
            let states = dataset.gather(&idx, &pre).states;
            let member = self.behavior.pick(&mut rng).clone();
            let tape = Tape::new();
            let pol = self.policy.bind(&tape);
            let s = tape.constant(states);
            let dist = policy_forward(&pol, s, &self.bounds)?;
            let n = self.cfg.batch;
            let noise_a = standard_normal(&mut rng, &[n, self.action_dim()]);
            let noise_z = standard_normal(&mut rng, &[n, member.latent_dim()]);
            let bound = member
                .bind_frozen(&tape)
                .kl_upper_bound(&dist.base, s, &noise_a, &noise_z)?
                .mean();
            let v = bound.item();
            if !v.is_finite() || v > LOSS_ABORT {
                return Err(Error::numeric(
                    "policy initialisation",
                    format!("step {step}: bound {v}"),
                ));
            }
            let grads = tape.backward(bound)?;
            opt.step(self.policy.params_mut(), &pol.grads(&grads))?;
        }
        self.policy = best.1;
        self.eps_min = best.0;

        let stats = self.fixed_noise_stats(&eval_states, self.cfg.regularizer)?;
        let (floor, margin) = match self.cfg.regularizer {
            Regularizer::KlUpper => (self.eps_min, self.cfg.eps_generalization),
            Regularizer::Mmd => (stats.divergence, self.cfg.mmd_eps_generalization),
        };
        self.epsilon = floor + margin;
        self.target_entropy = self.cfg.target_entropy_fraction * stats.entropy;

        let mut rng = stream_rng(self.seed, streams::Q_INIT);
        let mut td = Vec::new();
        for _ in 0..self.cfg.init_q_steps {
            let idx = dataset.sample_indices(&mut rng, self.cfg.batch);
            let batch = dataset.gather(&idx, &pre);
            let member = self.behavior.pick(&mut rng).clone();
            let r = self.q_step_inner(&batch, &member, false, &mut rng)?;
            td.push(r.td_loss);
            self.twin.polyak_update(self.cfg.tau)?;
        }
        self.initialized = true;
        self.epoch = 0;
        Ok(InitReport {
            bound_curve: curve,
            eps_min: self.eps_min,
            epsilon: self.epsilon,
            behavior_entropy: stats.entropy,
            target_entropy: self.target_entropy,
            q_init_td: td,
        })
    }

    /// Mean divergence and entropy over `states` with noise drawn from a fixed
    /// stream, averaged over every ensemble member.
    pub fn fixed_noise_stats(
        &self,
        states: &Array,
        regularizer: Regularizer,
    ) -> Result<PolicyStats> {
        let n = states.rows();
        let ad = self.action_dim();
        let mut rng = stream_rng(self.seed ^ 0xF1ED, streams::EVAL_STATES);
        let tape = Tape::new();
        let pol = self.policy.bind_frozen(&tape);
        let s = tape.constant(states.clone());
        let dist = policy_forward(&pol, s, &self.bounds)?;
        let mut div = 0.0;
        for member in &self.behavior.members {
            let m = member.bind_frozen(&tape);
            let v = match regularizer {
                Regularizer::KlUpper => {
                    let na = standard_normal(&mut rng, &[n, ad]);
                    let nz = standard_normal(&mut rng, &[n, member.latent_dim()]);
                    m.kl_upper_bound(&dist.base, s, &na, &nz)?.mean().item()
                }
                Regularizer::Mmd => self
                    .mmd_divergence(
                        &tape,
                        &pol_dist_rows(&self.policy, &tape, states, self)?,
                        member,
                        states,
                        &mut rng,
                    )?
                    .mean()
                    .item(),
            };
            div += v / self.behavior.len() as f64;
        }
        let noises: Vec<Array> = (0..self.cfg.entropy_samples)
            .map(|_| standard_normal(&mut rng, &[n, ad]))
            .collect();
        let entropy = dist.entropy_mc(&noises)?.mean().item();
        Ok(PolicyStats {
            divergence: div,
            entropy,
        })
    }

    /// Per-state squared MMD between `k` policy and `k` behavior-model action
    /// samples. `rep_dist` is the policy evaluated on states repeated `k`
    /// times, each state's copies adjacent.
    fn mmd_divergence<'t>(
        &self,
        tape: &'t Tape,
        rep_dist: &DiagGaussian<'t>,
        member: &Cvae,
        states: &Array,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var<'t>> {
        let k = self.cfg.mmd_samples;
        let n = states.rows();
        let ad = self.action_dim();
        let rep = repeat_rows(states, k);
        let u = rep_dist.rsample(&standard_normal(rng, &[n * k, ad]))?;
        let pol = crate::distributions::TanhDiagGaussian::new(*rep_dist, &self.bounds)?;
        let a = pol.squash(u).try_reshape(&[n, k, ad])?;
        let ub = behavior_samples(member, &rep, rng)?;
        let ab = Array::new(vec![n, k, ad], self.bounds.squash_values(ub.data()))?;
        let kernel = KernelSpec::laplacian(self.cfg.mmd_bandwidth);
        mmd_squared_batched(a, tape.constant(ab), &kernel)
    }

    /// TD loss plus the optional gradient penalty; updates both Q-networks.
    pub fn policy_evaluation_step(
        &mut self,
        batch: &crate::envs_data::Batch,
        member: &Cvae,
        rng: &mut ChaCha8Rng,
    ) -> Result<QReport> {
        let gp = self.cfg.gp_enabled;
        self.q_step_inner(batch, member, gp, rng)
    }

    /// Critic loss terms and the gradients for both Q-networks at an explicit
    /// penalty multiplier, without applying them.
    pub fn q_gradients(
        &self,
        batch: &crate::envs_data::Batch,
        member: &Cvae,
        gp: bool,
        lambda: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<(QReport, Vec<Array>, Vec<Array>)> {
        let (l, g1, g2) = q_losses(
            self.ctx(),
            &self.policy,
            &self.twin,
            member,
            batch,
            gp,
            lambda,
            rng,
        )?;
        let report = QReport {
            td_loss: l.td_loss,
            penalty: l.penalty,
            grad_norm: l.grad_norm,
            q_mean: l.q_mean,
        };
        Ok((report, g1, g2))
    }

    fn q_step_inner(
        &mut self,
        batch: &crate::envs_data::Batch,
        member: &Cvae,
        gp: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<QReport> {
        let (loss_parts, grads1, grads2) = {
            let ctx = self.ctx();
            let lambda = self.lambda_gp();
            q_losses(
                ctx,
                &self.policy,
                &self.twin,
                member,
                batch,
                gp,
                lambda,
                rng,
            )?
        };
        let QLoss {
            td_loss,
            penalty,
            grad_norm,
            q_mean,
        } = loss_parts;
        let total = td_loss
            + if gp {
                self.lambda_gp() * 2.0 * penalty
            } else {
                0.0
            };
        if !total.is_finite() || total.abs() > LOSS_ABORT {
            return Err(Error::numeric(
                "policy evaluation",
                format!("loss {total} (td {td_loss}, penalty {penalty}, mean Q {q_mean})"),
            ));
        }
        self.q1_opt.step(self.twin.q1.params_mut(), &grads1)?;
        self.q2_opt.step(self.twin.q2.params_mut(), &grads2)?;
        if gp {
            self.log_lambda += self.cfg.dual_lr * (penalty - self.cfg.lambda_constraint_target);
        }
        Ok(QReport {
            td_loss,
            penalty,
            grad_norm,
            q_mean,
        })
    }

    /// Constrained policy step followed by dual ascent on the multipliers.
    pub fn policy_update_step(
        &mut self,
        batch: &crate::envs_data::Batch,
        member: &Cvae,
        rng: &mut ChaCha8Rng,
    ) -> Result<PolicyReport> {
        let (report, grads) = self.policy_loss(&batch.states, member, rng)?;
        if !report.loss.is_finite() || report.loss.abs() > LOSS_ABORT {
            return Err(Error::numeric(
                "policy update",
                format!(
                    "loss {} (divergence {}, entropy {})",
                    report.loss, report.divergence, report.entropy
                ),
            ));
        }
        self.policy_opt.step(self.policy.params_mut(), &grads)?;
        self.log_alpha_kl += self.cfg.dual_lr * (report.divergence - self.epsilon);
        self.alpha_ent += self.cfg.dual_lr * (self.target_entropy - report.entropy);
        Ok(report)
    }

    /// Policy loss and its gradient with respect to the policy parameters,
    /// without applying it.
    pub fn policy_loss(
        &self,
        states: &Array,
        member: &Cvae,
        rng: &mut ChaCha8Rng,
    ) -> Result<(PolicyReport, Vec<Array>)> {
        let n = states.rows();
        let ad = self.action_dim();
        let tape = Tape::new();
        let pol = self.policy.bind(&tape);
        let s = tape.constant(states.clone());
        let dist = policy_forward(&pol, s, &self.bounds)?;
        let noise = standard_normal(rng, &[n, ad]);
        let (u, a) = dist.rsample(&noise)?;
        let q1 = q_forward(&self.twin.q1.bind_frozen(&tape), s, a)?;
        let q2 = q_forward(&self.twin.q2.bind_frozen(&tape), s, a)?;
        let q = q1.minimum(q2).mean();
        let entropy = (-dist.log_prob_pre_squash(u)?).mean();
        let divergence = match self.cfg.regularizer {
            Regularizer::KlUpper => {
                let nz = standard_normal(rng, &[n, member.latent_dim()]);
                member
                    .bind_frozen(&tape)
                    .kl_upper_bound(&dist.base, s, &noise, &nz)?
            }
            Regularizer::Mmd => {
                let rep = pol_dist_rows_bound(&pol, &tape, states, self)?;
                self.mmd_divergence(&tape, &rep, member, states, rng)?
            }
        }
        .mean();
        let loss = -q
            + (divergence.add_scalar(-self.epsilon)).scale(self.alpha_kl())
            + (self.target_entropy - entropy).scale(self.alpha_ent);
        let grads = tape.backward(loss)?;
        Ok((
            PolicyReport {
                loss: loss.item(),
                q_mean: q.item(),
                divergence: divergence.item(),
                entropy: entropy.item(),
            },
            pol.grads(&grads),
        ))
    }

    /// Train from the epoch after `self.epoch` up to `cfg.epochs`, calling
    /// `on_epoch` after every epoch. Each epoch draws from its own random
    /// stream so a run restored from a checkpoint continues identically.
    pub fn train(
        &mut self,
        dataset: &Dataset,
        reference: &ScoreReference,
        on_epoch: &mut dyn FnMut(&EpochRecord, &Agent) -> Result<()>,
    ) -> Result<Vec<EpochRecord>> {
        if !self.initialized {
            return Err(Error::Precondition(
                "agent must be initialised before training".into(),
            ));
        }
        self.check_dataset(dataset)?;
        let pre = dataset.pre_squash_actions()?;
        let mut records = Vec::new();
        for epoch in (self.epoch + 1)..=self.cfg.epochs {
            let mut rng = stream_rng(self.seed, streams::EPOCH_BASE + epoch as u64);
            let (mut div, mut ent) = (0.0, 0.0);
            for _ in 0..self.cfg.steps_per_epoch {
                let idx = dataset.sample_indices(&mut rng, self.cfg.batch);
                let batch = dataset.gather(&idx, &pre);
                let member = self.behavior.pick(&mut rng).clone();
                self.policy_evaluation_step(&batch, &member, &mut rng)?;
                let p = self.policy_update_step(&batch, &member, &mut rng)?;
                self.twin.polyak_update(self.cfg.tau)?;
                div += p.divergence;
                ent += p.entropy;
            }
            self.epoch = epoch;
            let steps = self.cfg.steps_per_epoch as f64;
            let record = self.record(dataset, reference, div / steps, ent / steps)?;
            on_epoch(&record, self)?;
            records.push(record);
        }
        Ok(records)
    }

    /// Record for the current epoch. For the initialisation entry the
    /// divergence and entropy come from the fixed-noise estimates.
    pub fn record(
        &self,
        dataset: &Dataset,
        reference: &ScoreReference,
        kl_bound_mean: f64,
        entropy_mean: f64,
    ) -> Result<EpochRecord> {
        let mut rng = stream_rng(self.seed, streams::EVAL_BASE + self.epoch as u64);
        let returns =
            policy_eval_returns(&self.policy, &self.bounds, self.cfg.eval_episodes, &mut rng)?;
        let raw = returns.iter().sum::<f64>() / returns.len().max(1) as f64;
        Ok(EpochRecord {
            epoch: self.epoch,
            mean_dataset_q: self.mean_dataset_q(&dataset.states)?,
            kl_bound_mean,
            entropy_mean,
            alpha_kl: self.alpha_kl(),
            alpha_ent: self.alpha_ent,
            lambda_gp: self.lambda_gp(),
            eval_return_raw: raw,
            eval_return_normalized: normalized_score(raw, reference),
        })
    }

    /// Record written right after initialisation.
    pub fn init_record(
        &self,
        dataset: &Dataset,
        reference: &ScoreReference,
    ) -> Result<EpochRecord> {
        let pre = dataset.pre_squash_actions()?;
        let states = dataset.gather(&self.eval_idx, &pre).states;
        let stats = self.fixed_noise_stats(&states, self.cfg.regularizer)?;
        self.record(dataset, reference, stats.divergence, stats.entropy)
    }

    /// Mean of `min(Q1, Q2)` at the deterministic policy action over `states`.
    pub fn mean_dataset_q(&self, states: &Array) -> Result<f64> {
        let mut total = 0.0;
        let n = states.rows();
        for start in (0..n).step_by(4096) {
            let end = (start + 4096).min(n);
            let tape = Tape::new();
            let s = tape.constant(states.slice_axis(0, start, end)?);
            let dist = policy_forward(&self.policy.bind_frozen(&tape), s, &self.bounds)?;
            let a = dist.mode();
            let q1 = q_forward(&self.twin.q1.bind_frozen(&tape), s, a)?;
            let q2 = q_forward(&self.twin.q2.bind_frozen(&tape), s, a)?;
            total += q1.minimum(q2).value().sum_all();
        }
        Ok(total / n as f64)
    }

    /// Mean `‖∇_a Q_j(s, a)‖₂` over both networks at policy samples.
    pub fn mean_action_grad_norm(&self, states: &Array, rng: &mut ChaCha8Rng) -> Result<f64> {
        let tape = Tape::new();
        let s = tape.constant(states.clone());
        let dist = policy_forward(&self.policy.bind_frozen(&tape), s, &self.bounds)?;
        let (_, a) = dist.rsample(&standard_normal(rng, &[states.rows(), self.action_dim()]))?;
        let a = tape.param((*a.value()).clone());
        let mut total = 0.0;
        for q in [&self.twin.q1, &self.twin.q2] {
            let qa = q_forward(&q.bind_frozen(&tape), s, a)?;
            let g = tape.grad(qa.sum(), &[a], false)?[0];
            total += g.square().sum_axis(1, false).sqrt().mean().item() / 2.0;
        }
        Ok(total)
    }

    /// Deterministic action for a single state.
    pub fn act(&self, state: &[f64]) -> Result<Vec<f64>> {
        deterministic_action(&self.policy, &self.bounds, state)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors: Vec<Array> = Vec::new();
        let nets = [
            &self.policy,
            &self.twin.q1,
            &self.twin.q2,
            &self.twin.q1_target,
            &self.twin.q2_target,
        ];
        for net in nets {
            tensors.extend(net.params().iter().cloned());
        }
        let opts = [&self.policy_opt, &self.q1_opt, &self.q2_opt];
        for opt in opts {
            tensors.extend(opt.state_tensors());
        }
        tensors.push(Array::from_vec(vec![
            self.log_alpha_kl,
            self.alpha_ent,
            self.log_lambda,
            self.epsilon,
            self.eps_min,
            self.target_entropy,
            self.epoch as f64,
            if self.initialized { 1.0 } else { 0.0 },
        ]));
        tensors.push(Array::from_vec(
            self.eval_idx.iter().map(|i| *i as f64).collect(),
        ));
        let behavior = self.behavior.tensors();
        let behavior_count = behavior.len();
        tensors.extend(behavior);
        let meta = serde_json::json!({
            "kind": "agent",
            "seed": self.seed,
            "config": self.cfg,
            "bounds": self.bounds,
            "policy_sizes": self.policy.sizes(),
            "q_sizes": self.twin.q1.sizes(),
            "behavior": self.behavior.metadata(),
            "behavior_tensors": behavior_count,
            "eval_states": self.eval_idx.len(),
            "epoch": self.epoch,
        });
        save_tensors(path, &tensors, &meta)
    }

    pub fn load(path: &Path) -> Result<Agent> {
        let (tensors, meta) = load_tensors(path)?;
        let get = |k: &str| -> Result<serde_json::Value> {
            meta.get(k)
                .cloned()
                .ok_or_else(|| Error::Format(format!("agent sidecar lacks '{k}'")))
        };
        if get("kind")? != "agent" {
            return Err(Error::Format("checkpoint is not an agent".into()));
        }
        let cfg: AgentConfig = serde_json::from_value(get("config")?)?;
        let seed: u64 = serde_json::from_value(get("seed")?)?;
        let bounds: ActionBounds = serde_json::from_value(get("bounds")?)?;
        let ps: Vec<usize> = serde_json::from_value(get("policy_sizes")?)?;
        let qs: Vec<usize> = serde_json::from_value(get("q_sizes")?)?;
        let nb: usize = serde_json::from_value(get("behavior_tensors")?)?;
        let (np, nq) = (2 * (ps.len() - 1), 2 * (qs.len() - 1));
        let expected = np + 4 * nq + 3 + 2 * (np + 2 * nq) + 2 + nb;
        if tensors.len() != expected {
            return Err(Error::Format(format!(
                "agent checkpoint holds {} tensors, expected {expected}",
                tensors.len()
            )));
        }
        let mut it = tensors.into_iter();
        let mut take = |k: usize| -> Vec<Array> { it.by_ref().take(k).collect() };
        let policy = Mlp::from_params(&ps, take(np))?;
        let q1 = Mlp::from_params(&qs, take(nq))?;
        let q2 = Mlp::from_params(&qs, take(nq))?;
        let q1_target = Mlp::from_params(&qs, take(nq))?;
        let q2_target = Mlp::from_params(&qs, take(nq))?;
        let mut policy_opt = Adam::new(policy.params(), cfg.policy_lr);
        policy_opt.restore(&take(1 + 2 * np))?;
        let mut q1_opt = Adam::new(q1.params(), cfg.q_lr);
        q1_opt.restore(&take(1 + 2 * nq))?;
        let mut q2_opt = Adam::new(q2.params(), cfg.q_lr);
        q2_opt.restore(&take(1 + 2 * nq))?;
        let scalars = take(1).remove(0);
        let sc = scalars.data();
        if sc.len() != 8 {
            return Err(Error::Format(
                "agent scalar block has the wrong length".into(),
            ));
        }
        let eval_idx = take(1)
            .remove(0)
            .data()
            .iter()
            .map(|x| *x as usize)
            .collect();
        let behavior = CvaeEnsemble::from_tensors(&get("behavior")?, take(nb))?;
        let state_dim = behavior.members[0].state_dim();
        Ok(Agent {
            cfg,
            seed,
            bounds,
            state_dim,
            policy,
            twin: TwinQ {
                q1,
                q2,
                q1_target,
                q2_target,
            },
            behavior,
            log_alpha_kl: sc[0],
            alpha_ent: sc[1],
            log_lambda: sc[2],
            epsilon: sc[3],
            eps_min: sc[4],
            target_entropy: sc[5],
            policy_opt,
            q1_opt,
            q2_opt,
            eval_idx,
            epoch: sc[6] as usize,
            initialized: sc[7] == 1.0,
        })
    }
}

/// Outcome of [`Agent::initialize`].
#[derive(Clone, Debug, PartialEq)]
pub struct InitReport {
    /// `(step, mean bound on the evaluation states)` during policy init.
    pub bound_curve: Vec<(usize, f64)>,
    pub eps_min: f64,
    pub epsilon: f64,
    /// Entropy of the initialised policy, the stand-in for `H(π_b)`.
    pub behavior_entropy: f64,
    pub target_entropy: f64,
    pub q_init_td: Vec<f64>,
}

struct QLoss {
    td_loss: f64,
    penalty: f64,
    grad_norm: f64,
    q_mean: f64,
}

/// The gradient-penalty weighting function: positive and increasing.
pub fn penalty_weight(kl: f64) -> f64 {
    softplus(kl)
}

#[allow(clippy::too_many_arguments)]
fn q_losses(
    ctx: Ctx<'_>,
    policy: &Mlp,
    twin: &TwinQ,
    member: &Cvae,
    batch: &crate::envs_data::Batch,
    gp: bool,
    lambda: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(QLoss, Vec<Array>, Vec<Array>)> {
    let cfg = ctx.cfg;
    let n = batch.states.rows();
    let ad = ctx.bounds.dim();
    let tape = Tape::new();
    let pol = policy.bind_frozen(&tape);
    let s = tape.constant(batch.states.clone());
    let s2 = tape.constant(batch.next_states.clone());

    // Bellman target with a′ ∼ π(·|s′) and the twin-target minimum.
    let next = policy_forward(&pol, s2, ctx.bounds)?;
    let (_, a2) = next.rsample(&standard_normal(rng, &[n, ad]))?;
    let target = {
        let q_next = twin.target_min(&tape, s2, a2)?;
        let not_done = batch.dones.map(|d| cfg.gamma * (1.0 - d));
        (tape.constant(batch.rewards.clone()) + tape.constant(not_done) * q_next).detach()
    };

    // Penalty inputs are drawn even when the penalty is off so both settings
    // consume the random stream identically.
    let cur = policy_forward(&pol, s, ctx.bounds)?;
    let noise_pen = standard_normal(rng, &[n, ad]);
    let noise_a = standard_normal(rng, &[n, ad]);
    let noise_z = standard_normal(rng, &[n, member.latent_dim()]);

    let b1 = twin.q1.bind(&tape);
    let b2 = twin.q2.bind(&tape);
    let a = tape.constant(batch.actions.clone());
    let q1 = q_forward(&b1, s, a)?;
    let q2 = q_forward(&b2, s, a)?;
    let td = (q1 - target).square().mean() + (q2 - target).square().mean();
    let q_mean = 0.5 * (q1.value().mean_all() + q2.value().mean_all());

    let (loss, penalty, grad_norm) = if gp {
        let kl = member
            .bind_frozen(&tape)
            .kl_upper_bound(&cur.base, s, &noise_a, &noise_z)?
            .detach();
        let weight = kl.softplus();
        let (_, a_pen) = cur.rsample(&noise_pen)?;
        let a_pen = tape.param((*a_pen.value()).clone());
        let mut pens = Vec::with_capacity(2);
        let mut norms = 0.0;
        for b in [&b1, &b2] {
            let qa = q_forward(b, s, a_pen)?;
            let g = tape.grad(qa.sum(), &[a_pen], true)?[0];
            let norm = g.square().sum_axis(1, false).add_scalar(1e-12).sqrt();
            norms += norm.value().mean_all() / 2.0;
            pens.push((norm * weight).mean());
        }
        let pen = (pens[0] + pens[1]).scale(0.5);
        (td + pen.scale(2.0 * lambda), pen.item(), norms)
    } else {
        (td, 0.0, 0.0)
    };
    let grads = tape.backward(loss)?;
    Ok((
        QLoss {
            td_loss: td.item(),
            penalty,
            grad_norm,
            q_mean,
        },
        b1.grads(&grads),
        b2.grads(&grads),
    ))
}

fn repeat_rows(a: &Array, k: usize) -> Array {
    let d = a.shape()[1];
    let mut data = Vec::with_capacity(a.rows() * k * d);
    for i in 0..a.rows() {
        for _ in 0..k {
            data.extend_from_slice(a.row(i));
        }
    }
    Array::new(vec![a.rows() * k, d], data).expect("repeat rows")
}

/// Pre-squash samples from the behavior model's generative path, `z ∼ N(0, I)`.
fn behavior_samples(member: &Cvae, states: &Array, rng: &mut ChaCha8Rng) -> Result<Array> {
    let tape = Tape::new();
    let m = member.bind_frozen(&tape);
    let n = states.rows();
    let z = tape.constant(standard_normal(rng, &[n, member.latent_dim()]));
    let p = m.decode(tape.constant(states.clone()), z)?;
    let u = p.rsample(&standard_normal(rng, &[n, member.action_dim()]))?;
    Ok((*u.value()).clone())
}

fn pol_dist_rows<'t>(
    policy: &Mlp,
    tape: &'t Tape,
    states: &Array,
    agent: &Agent,
) -> Result<DiagGaussian<'t>> {
    pol_dist_rows_bound(&policy.bind_frozen(tape), tape, states, agent)
}

fn pol_dist_rows_bound<'t>(
    pol: &crate::networks::BoundMlp<'t>,
    tape: &'t Tape,
    states: &Array,
    agent: &Agent,
) -> Result<DiagGaussian<'t>> {
    let rep = tape.constant(repeat_rows(states, agent.cfg.mmd_samples));
    Ok(policy_forward(pol, rep, &agent.bounds)?.base)
}

pub fn deterministic_action(
    policy: &Mlp,
    bounds: &ActionBounds,
    state: &[f64],
) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let s = tape.constant(Array::new(vec![1, state.len()], state.to_vec())?);
    let dist = policy_forward(&policy.bind_frozen(&tape), s, bounds)?;
    Ok(dist.mode().value().data().to_vec())
}

/// Raw episode returns of the deterministic policy `squash(mean)`.
pub fn policy_eval_returns<R: Rng + ?Sized>(
    policy: &Mlp,
    bounds: &ActionBounds,
    episodes: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let mut err = None;
    let returns = rollout_returns(
        |s| match deterministic_action(policy, bounds, s) {
            Ok(a) => a,
            Err(e) => {
                err.get_or_insert(e);
                vec![0.0; bounds.dim()]
            }
        },
        episodes,
        rng,
    );
    match err {
        Some(e) => Err(e),
        None => Ok(returns),
    }
}

/// Behavior-cloning baseline: a tanh-Gaussian policy fit by maximum
/// likelihood on the dataset actions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BcConfig {
    pub hidden: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for BcConfig {
    fn default() -> Self {
        BcConfig {
            hidden: 64,
            steps: 10_000,
            batch: 100,
            lr: 1e-3,
        }
    }
}

/// Returns the fitted policy network and the per-step mean log-likelihood.
pub fn train_bc(dataset: &Dataset, cfg: &BcConfig, seed: u64) -> Result<(Mlp, Vec<f64>)> {
    if dataset.is_empty() {
        return Err(Error::Precondition(
            "cannot clone behavior from an empty dataset".into(),
        ));
    }
    let bounds = &dataset.meta.action_bounds;
    let pre = dataset.pre_squash_actions()?;
    let mut rng = stream_rng(seed, streams::AGENT_INIT);
    let mut policy = Mlp::new(
        &layer_sizes(dataset.state_dim(), cfg.hidden, 2, 2 * dataset.action_dim()),
        &mut rng,
    )?;
    let mut opt = Adam::new(policy.params(), cfg.lr);
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx = dataset.sample_indices(&mut rng, cfg.batch);
        let batch = dataset.gather(&idx, &pre);
        let tape = Tape::new();
        let pol = policy.bind(&tape);
        let dist = policy_forward(&pol, tape.constant(batch.states), bounds)?;
        let ll = dist
            .log_prob_pre_squash(tape.constant(batch.pre_actions))?
            .mean();
        let v = ll.item();
        if !v.is_finite() || v.abs() > LOSS_ABORT {
            return Err(Error::numeric(
                "behavior cloning",
                format!("step {step}: log-likelihood {v}"),
            ));
        }
        curve.push(v);
        let grads = tape.backward(-ll)?;
        opt.step(policy.params_mut(), &pol.grads(&grads))?;
    }
    Ok((policy, curve))
}

/// Both sides of `|E_{π_new}[ΔQ] − E_{π_b}[ΔQ]| ≤ sup_a |ΔQ| · √(KL(π_new ‖ π_b) / 2)`
/// evaluated on an action grid. Densities are normalised over the grid, so
/// expectations and the KL are those of the discretised distributions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PinskerGap {
    pub lhs: f64,
    pub rhs: f64,
    pub kl: f64,
    pub sup_abs_dq: f64,
}

pub fn pinsker_gap(
    q_new: impl Fn(&[f64]) -> f64,
    q_old: impl Fn(&[f64]) -> f64,
    pi_new: impl Fn(&[f64]) -> f64,
    pi_b: impl Fn(&[f64]) -> f64,
    action_grid: &[Vec<f64>],
) -> Result<PinskerGap> {
    if action_grid.is_empty() || action_grid[0].is_empty() || action_grid[0].len() > 2 {
        return Err(Error::Precondition(
            "pinsker grid must hold 1-D or 2-D actions".into(),
        ));
    }
    let dq: Vec<f64> = action_grid.iter().map(|a| q_new(a) - q_old(a)).collect();
    let normalise = |f: &dyn Fn(&[f64]) -> f64| -> Result<Vec<f64>> {
        let w: Vec<f64> = action_grid.iter().map(|a| f(a)).collect();
        let z: f64 = w.iter().sum();
        if !(z > 0.0) || !z.is_finite() {
            return Err(Error::Precondition(
                "density has no mass on the grid".into(),
            ));
        }
        Ok(w.into_iter().map(|x| x / z).collect())
    };
    let p = normalise(&pi_new)?;
    let q = normalise(&pi_b)?;
    let lhs = p
        .iter()
        .zip(&q)
        .zip(&dq)
        .map(|((a, b), f)| (a - b) * f)
        .sum::<f64>()
        .abs();
    let kl: f64 = p
        .iter()
        .zip(&q)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| a * (a / b).ln())
        .sum::<f64>()
        .max(0.0);
    let sup = dq.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    Ok(PinskerGap {
        lhs,
        rhs: sup * (kl / 2.0).sqrt(),
        kl,
        sup_abs_dq: sup,
    })
}
