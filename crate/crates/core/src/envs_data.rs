//! Toy point-mass environment, scripted data collection, dataset storage and
//! normalised scores.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndgrad::Array;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::distributions::ActionBounds;
use crate::error::{Error, Result};
use crate::networks::{write_atomic, Reader};
use crate::rng::stream_rng;

pub const ENV_ID: &str = "twogoal";
pub const DT: f64 = 0.05;
pub const FRICTION: f64 = 0.1;
pub const HORIZON: usize = 100;
pub const GOALS: [[f64; 2]; 2] = [[0.7, 0.7], [-0.7, -0.7]];
pub const STATE_DIM: usize = 4;
pub const ACTION_DIM: usize = 2;

/// Two goals, one point mass. State is `[px, py, vx, vy]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TwoGoalPointMass {
    pos: [f64; 2],
    vel: [f64; 2],
    t: usize,
}

impl Default for TwoGoalPointMass {
    fn default() -> Self {
        TwoGoalPointMass {
            pos: [0.0; 2],
            vel: [0.0; 2],
            t: 0,
        }
    }
}

pub fn goal_distance(pos: &[f64], goal: &[f64; 2]) -> f64 {
    ((pos[0] - goal[0]).powi(2) + (pos[1] - goal[1]).powi(2)).sqrt()
}

pub fn reward_at(pos: &[f64]) -> f64 {
    -goal_distance(pos, &GOALS[0]).min(goal_distance(pos, &GOALS[1]))
}

impl TwoGoalPointMass {
    pub fn action_bounds() -> ActionBounds {
        ActionBounds::symmetric(ACTION_DIM)
    }

    pub fn from_state(state: [f64; 4]) -> Self {
        TwoGoalPointMass {
            pos: [state[0], state[1]],
            vel: [state[2], state[3]],
            t: 0,
        }
    }

    pub fn reset<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Vec<f64> {
        self.pos = [rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05)];
        self.vel = [0.0; 2];
        self.t = 0;
        self.state()
    }

    pub fn state(&self) -> Vec<f64> {
        vec![self.pos[0], self.pos[1], self.vel[0], self.vel[1]]
    }

    pub fn time(&self) -> usize {
        self.t
    }

    /// Advance one step. Actions are clipped to `[−1, 1]²`; the position moves
    /// with the pre-update velocity and both are clipped to `[−1, 1]²`.
    pub fn step(&mut self, action: &[f64]) -> (Vec<f64>, f64, bool) {
        for i in 0..2 {
            let a = action[i].clamp(-1.0, 1.0);
            let v = self.vel[i];
            self.pos[i] = (self.pos[i] + DT * v).clamp(-1.0, 1.0);
            self.vel[i] = (v + DT * a - FRICTION * v).clamp(-1.0, 1.0);
        }
        self.t += 1;
        (self.state(), reward_at(&self.pos), self.t >= HORIZON)
    }
}

/// Scripted data-collection policies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Controller {
    /// Uniform actions over the box.
    Random,
    /// Proportional control toward the nearest goal, noise in pre-tanh space.
    Medium { kp: f64, sigma: f64 },
    /// PD control toward a goal chosen uniformly per episode.
    Expert { kp: f64, kd: f64, sigma: f64 },
    /// Expert PD whose noise shrinks linearly from `sigma_start` to `sigma_end`
    /// across the episodes of one collection run.
    Mixed {
        kp: f64,
        kd: f64,
        sigma_start: f64,
        sigma_end: f64,
    },
}

impl Controller {
    pub fn medium() -> Self {
        Controller::Medium {
            kp: 0.5,
            sigma: 0.3,
        }
    }

    pub fn expert() -> Self {
        Controller::Expert {
            kp: 5.0,
            kd: 1.0,
            sigma: 0.05,
        }
    }

    pub fn mixed() -> Self {
        Controller::Mixed {
            kp: 5.0,
            kd: 1.0,
            sigma_start: 0.5,
            sigma_end: 0.05,
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            Controller::Random => "random",
            Controller::Medium { .. } => "medium",
            Controller::Expert { .. } => "expert",
            Controller::Mixed { .. } => "mixed",
        }
    }

    /// Per-episode goal choice and noise level for episode `e` of `episodes`.
    fn episode_plan<R: Rng + ?Sized>(
        &self,
        e: usize,
        episodes: usize,
        rng: &mut R,
    ) -> (usize, f64) {
        let goal = if rng.gen::<bool>() { 0 } else { 1 };
        let sigma = match self {
            Controller::Random => 0.0,
            Controller::Medium { sigma, .. } | Controller::Expert { sigma, .. } => *sigma,
            Controller::Mixed {
                sigma_start,
                sigma_end,
                ..
            } => {
                let frac = if episodes > 1 {
                    e as f64 / (episodes - 1) as f64
                } else {
                    0.0
                };
                sigma_start + frac * (sigma_end - sigma_start)
            }
        };
        (goal, sigma)
    }

    fn act<R: Rng + ?Sized>(
        &self,
        state: &[f64],
        goal: usize,
        sigma: f64,
        rng: &mut R,
    ) -> Vec<f64> {
        let (pos, vel) = (&state[0..2], &state[2..4]);
        let mut pre = [0.0; 2];
        match self {
            Controller::Random => {
                return vec![rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0)]
            }
            Controller::Medium { kp, .. } => {
                let g = if goal_distance(pos, &GOALS[0]) <= goal_distance(pos, &GOALS[1]) {
                    GOALS[0]
                } else {
                    GOALS[1]
                };
                for i in 0..2 {
                    pre[i] = kp * (g[i] - pos[i]);
                }
            }
            Controller::Expert { kp, kd, .. } | Controller::Mixed { kp, kd, .. } => {
                let g = GOALS[goal];
                for i in 0..2 {
                    pre[i] = kp * (g[i] - pos[i]) - kd * vel[i];
                }
            }
        }
        pre.iter()
            .map(|u| (u + sigma * rng.sample::<f64, _>(StandardNormal)).tanh())
            .collect()
    }
}

/// Dataset metadata carried alongside the columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub env_id: String,
    pub policy_tags: Vec<String>,
    /// Range of the rewards currently stored.
    pub r_min: f64,
    pub r_max: f64,
    /// Original reward range when the stored rewards have been rescaled.
    pub raw_reward_range: Option<[f64; 2]>,
    pub action_bounds: ActionBounds,
    pub size: usize,
}

/// Columnar transition store.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub states: Array,
    pub actions: Array,
    pub rewards: Vec<f64>,
    pub next_states: Array,
    pub dones: Vec<f64>,
    pub meta: DatasetMeta,
}

/// A minibatch gathered from a dataset.
#[derive(Clone, Debug)]
pub struct Batch {
    pub states: Array,
    pub actions: Array,
    pub pre_actions: Array,
    pub rewards: Array,
    pub next_states: Array,
    pub dones: Array,
}

fn range(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
            (lo.min(*r), hi.max(*r))
        })
}

fn gather_rows(a: &Array, idx: &[usize]) -> Array {
    let d = a.shape()[1];
    let mut data = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        data.extend_from_slice(a.row(i));
    }
    Array::new(vec![idx.len(), d], data).expect("row gather")
}

impl Dataset {
    /// Assemble and validate a dataset from its columns.
    pub fn new(
        states: Array,
        actions: Array,
        rewards: Vec<f64>,
        next_states: Array,
        dones: Vec<f64>,
        env_id: &str,
        policy_tags: Vec<String>,
        action_bounds: ActionBounds,
    ) -> Result<Self> {
        let n = rewards.len();
        let (r_min, r_max) = range(&rewards);
        let ds = Dataset {
            states,
            actions,
            rewards,
            next_states,
            dones,
            meta: DatasetMeta {
                env_id: env_id.to_string(),
                policy_tags,
                r_min,
                r_max,
                raw_reward_range: None,
                action_bounds,
                size: n,
            },
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.meta.size;
        let (sd, ad) = (self.state_dim(), self.action_dim());
        let ok = self.states.shape() == [n, sd]
            && self.next_states.shape() == [n, sd]
            && self.actions.shape() == [n, ad]
            && self.rewards.len() == n
            && self.dones.len() == n
            && ad == self.meta.action_bounds.dim();
        if !ok {
            return Err(Error::Format(format!(
                "inconsistent dataset columns: states {:?}, actions {:?}, next {:?}, {} rewards, {} dones, size {n}",
                self.states.shape(),
                self.actions.shape(),
                self.next_states.shape(),
                self.rewards.len(),
                self.dones.len()
            )));
        }
        if self.dones.iter().any(|d| *d != 0.0 && *d != 1.0) {
            return Err(Error::Format("done flags must be 0 or 1".into()));
        }
        if (0..n).any(|i| !self.meta.action_bounds.contains(self.actions.row(i))) {
            return Err(Error::Format(
                "dataset action outside the action bounds".into(),
            ));
        }
        if n > 0
            && self
                .rewards
                .iter()
                .any(|r| *r < self.meta.r_min || *r > self.meta.r_max)
        {
            return Err(Error::Format("reward outside the recorded range".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.meta.size
    }

    pub fn is_empty(&self) -> bool {
        self.meta.size == 0
    }

    pub fn state_dim(&self) -> usize {
        self.states.shape().get(1).copied().unwrap_or(0)
    }

    pub fn action_dim(&self) -> usize {
        self.actions.shape().get(1).copied().unwrap_or(0)
    }

    /// Dataset actions mapped through the inverse squash, clamped at the bounds.
    pub fn pre_squash_actions(&self) -> Result<Array> {
        self.meta.action_bounds.unsquash(&self.actions)
    }

    /// Concatenate datasets of the same environment (e.g. medium + expert).
    pub fn concat(parts: &[&Dataset]) -> Result<Dataset> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Precondition("nothing to concatenate".into()))?;
        if parts.iter().any(|p| {
            p.meta.env_id != first.meta.env_id
                || p.meta.action_bounds != first.meta.action_bounds
                || p.meta.raw_reward_range.is_some()
        }) {
            return Err(Error::Precondition(
                "concatenated datasets must share env and bounds and hold unscaled rewards".into(),
            ));
        }
        let cat = |f: fn(&Dataset) -> &Array| -> Result<Array> {
            let arrays: Vec<&Array> = parts.iter().map(|p| f(p)).collect();
            Ok(Array::concat(&arrays, 0)?)
        };
        let mut tags = Vec::new();
        for p in parts {
            tags.extend(p.meta.policy_tags.iter().cloned());
        }
        Dataset::new(
            cat(|d| &d.states)?,
            cat(|d| &d.actions)?,
            parts
                .iter()
                .flat_map(|p| p.rewards.iter().copied())
                .collect(),
            cat(|d| &d.next_states)?,
            parts.iter().flat_map(|p| p.dones.iter().copied()).collect(),
            &first.meta.env_id,
            tags,
            first.meta.action_bounds.clone(),
        )
    }

    pub fn gather(&self, idx: &[usize], pre_actions: &Array) -> Batch {
        let n = idx.len();
        Batch {
            states: gather_rows(&self.states, idx),
            actions: gather_rows(&self.actions, idx),
            pre_actions: gather_rows(pre_actions, idx),
            rewards: Array::new(vec![n], idx.iter().map(|&i| self.rewards[i]).collect()).unwrap(),
            next_states: gather_rows(&self.next_states, idx),
            dones: Array::new(vec![n], idx.iter().map(|&i| self.dones[i]).collect()).unwrap(),
        }
    }

    pub fn sample_indices<R: Rng + ?Sized>(&self, rng: &mut R, batch: usize) -> Vec<usize> {
        (0..batch).map(|_| rng.gen_range(0..self.len())).collect()
    }

    pub fn episode_returns(&self) -> Vec<f64> {
        let mut out = Vec::new();
        let mut acc = 0.0;
        for (r, d) in self.rewards.iter().zip(&self.dones) {
            acc += r;
            if *d == 1.0 {
                out.push(acc);
                acc = 0.0;
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        buf.extend_from_slice(DATA_MAGIC);
        buf.extend_from_slice(&DATA_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.len() as u64).to_le_bytes());
        buf.extend_from_slice(&(self.state_dim() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.action_dim() as u32).to_le_bytes());
        for col in [
            self.states.data(),
            self.actions.data(),
            &self.rewards[..],
            self.next_states.data(),
            &self.dones[..],
        ] {
            for x in col {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        let meta = serde_json::to_vec(&self.meta)?;
        buf.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        buf.extend_from_slice(&meta);
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Dataset> {
        let mut r = Reader::new(bytes, "dataset file");
        if r.take(6)? != DATA_MAGIC {
            return Err(Error::Format("not a dataset file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != DATA_VERSION {
            return Err(Error::Format(format!(
                "unsupported dataset version {version}"
            )));
        }
        let n = r.u64()? as usize;
        let sd = r.u32()? as usize;
        let ad = r.u32()? as usize;
        let states = Array::new(vec![n, sd], r.f64s(n * sd)?)?;
        let actions = Array::new(vec![n, ad], r.f64s(n * ad)?)?;
        let rewards = r.f64s(n)?;
        let next_states = Array::new(vec![n, sd], r.f64s(n * sd)?)?;
        let dones = r.f64s(n)?;
        let len = r.u64()? as usize;
        let meta: DatasetMeta = serde_json::from_slice(r.take(len)?)?;
        if !r.finished() {
            return Err(Error::Format(
                "trailing bytes after dataset metadata".into(),
            ));
        }
        if meta.size != n {
            return Err(Error::Format(format!(
                "header says {n} rows, metadata says {}",
                meta.size
            )));
        }
        let ds = Dataset {
            states,
            actions,
            rewards,
            next_states,
            dones,
            meta,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        Dataset::from_bytes(&fs::read(path)?)
    }

    /// Human-readable CSV, one transition per row.
    pub fn to_csv(&self) -> String {
        let (sd, ad) = (self.state_dim(), self.action_dim());
        let mut header: Vec<String> = Vec::new();
        header.extend((0..sd).map(|i| format!("s{i}")));
        header.extend((0..ad).map(|i| format!("a{i}")));
        header.push("r".into());
        header.extend((0..sd).map(|i| format!("ns{i}")));
        header.push("done".into());
        let mut out = header.join(",");
        out.push('\n');
        for i in 0..self.len() {
            let mut fields: Vec<String> = Vec::with_capacity(header.len());
            fields.extend(self.states.row(i).iter().map(|x| x.to_string()));
            fields.extend(self.actions.row(i).iter().map(|x| x.to_string()));
            fields.push(self.rewards[i].to_string());
            fields.extend(self.next_states.row(i).iter().map(|x| x.to_string()));
            fields.push(self.dones[i].to_string());
            let _ = writeln!(out, "{}", fields.join(","));
        }
        out
    }
}

const DATA_MAGIC: &[u8; 6] = b"BRACD1";
const DATA_VERSION: u32 = 1;

/// Roll out `controller` for `episodes` episodes. A pure function of the
/// arguments: the seed fixes every random draw.
pub fn collect(controller: &Controller, episodes: usize, seed: u64) -> Result<Dataset> {
    if episodes == 0 {
        return Err(Error::Precondition(
            "collect needs at least one episode".into(),
        ));
    }
    let mut rng = stream_rng(seed, 0xD47A);
    let n = episodes * HORIZON;
    let (mut s, mut a, mut ns) = (
        Vec::with_capacity(n * STATE_DIM),
        Vec::with_capacity(n * ACTION_DIM),
        Vec::with_capacity(n * STATE_DIM),
    );
    let (mut r, mut d) = (Vec::with_capacity(n), Vec::with_capacity(n));
    let mut env = TwoGoalPointMass::default();
    for e in 0..episodes {
        let (goal, sigma) = controller.episode_plan(e, episodes, &mut rng);
        let mut state = env.reset(&mut rng);
        loop {
            let action = controller.act(&state, goal, sigma, &mut rng);
            let (next, reward, done) = env.step(&action);
            s.extend_from_slice(&state);
            a.extend_from_slice(&action);
            ns.extend_from_slice(&next);
            r.push(reward);
            d.push(if done { 1.0 } else { 0.0 });
            state = next;
            if done {
                break;
            }
        }
    }
    Dataset::new(
        Array::new(vec![n, STATE_DIM], s)?,
        Array::new(vec![n, ACTION_DIM], a)?,
        r,
        Array::new(vec![n, STATE_DIM], ns)?,
        d,
        ENV_ID,
        vec![controller.tag().to_string()],
        TwoGoalPointMass::action_bounds(),
    )
}

/// Dataset compositions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetMode {
    Random,
    Medium,
    Expert,
    MedExp,
    Mixed,
}

impl DatasetMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(DatasetMode::Random),
            "medium" => Ok(DatasetMode::Medium),
            "expert" => Ok(DatasetMode::Expert),
            "med-exp" | "medium-expert" => Ok(DatasetMode::MedExp),
            "mixed" => Ok(DatasetMode::Mixed),
            other => Err(Error::Config(format!(
                "unknown dataset mode '{other}' (random, medium, expert, med-exp, mixed)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DatasetMode::Random => "random",
            DatasetMode::Medium => "medium",
            DatasetMode::Expert => "expert",
            DatasetMode::MedExp => "med-exp",
            DatasetMode::Mixed => "mixed",
        }
    }
}

/// Generate a dataset of the given composition. `episodes` is per arm, so a
/// med-exp dataset holds twice as many transitions.
pub fn generate(mode: DatasetMode, episodes: usize, seed: u64) -> Result<Dataset> {
    let sub = |k: u64| seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k);
    match mode {
        DatasetMode::Random => collect(&Controller::Random, episodes, seed),
        DatasetMode::Medium => collect(&Controller::medium(), episodes, seed),
        DatasetMode::Expert => collect(&Controller::expert(), episodes, seed),
        DatasetMode::Mixed => collect(&Controller::mixed(), episodes, seed),
        DatasetMode::MedExp => {
            let medium = collect(&Controller::medium(), episodes, sub(1))?;
            let expert = collect(&Controller::expert(), episodes, sub(2))?;
            Dataset::concat(&[&medium, &expert])
        }
    }
}

/// Mean episode returns of the random and expert controllers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReference {
    pub env_id: String,
    pub random_return: f64,
    pub expert_return: f64,
}

impl ScoreReference {
    pub fn new(random_return: f64, expert_return: f64) -> Result<Self> {
        if !(expert_return > random_return) {
            return Err(Error::Precondition(format!(
                "expert return {expert_return} must exceed random return {random_return}"
            )));
        }
        Ok(ScoreReference {
            env_id: ENV_ID.to_string(),
            random_return,
            expert_return,
        })
    }

    /// Estimate both references from `episodes` rollouts each.
    pub fn compute(episodes: usize, seed: u64) -> Result<Self> {
        let mean = |c: &Controller, s: u64| -> Result<f64> {
            let returns = collect(c, episodes, s)?.episode_returns();
            Ok(returns.iter().sum::<f64>() / returns.len() as f64)
        };
        Self::new(
            mean(&Controller::Random, seed)?,
            mean(&Controller::expert(), seed ^ 1)?,
        )
    }

    /// Load from `path` when present, otherwise compute and cache.
    pub fn cached(path: &Path, episodes: usize, seed: u64) -> Result<Self> {
        if let Ok(text) = fs::read_to_string(path) {
            if let Ok(r) = serde_json::from_str::<ScoreReference>(&text) {
                return Ok(r);
            }
        }
        let r = Self::compute(episodes, seed)?;
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        write_atomic(path, serde_json::to_string_pretty(&r)?.as_bytes())?;
        Ok(r)
    }
}

pub fn normalized_score(raw_return: f64, reference: &ScoreReference) -> f64 {
    100.0 * (raw_return - reference.random_return)
        / (reference.expert_return - reference.random_return)
}

/// Episode returns of an arbitrary state-feedback policy.
pub fn rollout_returns<R, F>(mut policy: F, episodes: usize, rng: &mut R) -> Vec<f64>
where
    R: Rng + ?Sized,
    F: FnMut(&[f64]) -> Vec<f64>,
{
    let mut env = TwoGoalPointMass::default();
    (0..episodes)
        .map(|_| {
            let mut state = env.reset(rng);
            let mut total = 0.0;
            loop {
                let (next, r, done) = env.step(&policy(&state));
                total += r;
                state = next;
                if done {
                    break total;
                }
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_action_from_rest_is_static() {
        let mut env = TwoGoalPointMass::from_state([0.1, -0.2, 0.0, 0.0]);
        let (s, r, done) = env.step(&[0.0, 0.0]);
        assert_eq!(&s[..2], &[0.1, -0.2]);
        assert_eq!(r, reward_at(&[0.1, -0.2]));
        assert!(!done);
    }

    #[test]
    fn mode_parsing() {
        assert_eq!(DatasetMode::parse("med-exp").unwrap(), DatasetMode::MedExp);
        assert!(DatasetMode::parse("bogus").is_err());
    }

    #[test]
    fn normalized_score_endpoints() {
        let r = ScoreReference::new(-90.0, -20.0).unwrap();
        assert_eq!(normalized_score(-90.0, &r), 0.0);
        assert_eq!(normalized_score(-20.0, &r), 100.0);
        assert_eq!(normalized_score(-55.0, &r), 50.0);
        assert!(ScoreReference::new(1.0, 1.0).is_err());
    }
}
