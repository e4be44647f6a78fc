//! Stochastic pushing policy, value function, task rewards, and a
//! clipped-surrogate policy-gradient trainer over the pushing simulator.
//!
//! The policy is a Gaussian over 2-D effector displacements: a small tanh
//! network outputs the mean, a state-independent log-std vector supplies the
//! spread. Training shapes each step's task reward with the frozen-context
//! intrinsic reward, so a wide real-vs-sim gap steers exploration toward
//! transitions the simulator has not covered.

pub mod nn;

use crate::dataset::{wrap_angle, EnvAction, EnvState, Transition};
use crate::diffsim::{real_step, sample_standard_normal, step, PushModel, RealProxyConfig, SimParams};
use crate::infogap::GapContext;
use nn::{Adam, Cache, Mlp};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 1.0;
pub const N_ACTION: usize = 2;
pub const CHECKPOINT_VERSION: u32 = 1;
const HALF_LN_TAU: f64 = 0.918_938_533_204_672_8; // 0.5 * ln(2*pi)

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("observation length {got} does not match network input {want}")]
    ObsLength { got: usize, want: usize },
    #[error("sequence length mismatch: rewards {rewards}, values {values}")]
    LengthMismatch { rewards: usize, values: usize },
    #[error("training batch is empty")]
    EmptyBatch,
    #[error("invalid configuration: {0}")]
    BadConfig(String),
    #[error("checkpoint rejected: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Which pushing task the episode encodes; decides observation layout and
/// reward composition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Cube,
    TBlock,
}

impl TaskKind {
    /// Planar observation: [effector_xy, block_xy(+yaw), target_xy(+yaw),
    /// block−target (+wrapped yaw difference), effector−block].
    pub fn obs_dim(self) -> usize {
        match self {
            TaskKind::Cube => 10,
            TaskKind::TBlock => 13,
        }
    }
}

pub fn build_observation(task: TaskKind, s: &EnvState, target: [f64; 3]) -> Vec<f64> {
    match task {
        TaskKind::Cube => vec![
            s.effector_x,
            s.effector_y,
            s.block_x,
            s.block_y,
            target[0],
            target[1],
            s.block_x - target[0],
            s.block_y - target[1],
            s.effector_x - s.block_x,
            s.effector_y - s.block_y,
        ],
        TaskKind::TBlock => vec![
            s.effector_x,
            s.effector_y,
            s.block_x,
            s.block_y,
            s.block_yaw,
            target[0],
            target[1],
            target[2],
            s.block_x - target[0],
            s.block_y - target[1],
            wrap_angle(s.block_yaw - target[2]),
            s.effector_x - s.block_x,
            s.effector_y - s.block_y,
        ],
    }
}

// ---------------------------------------------------------------------------
// Networks
// ---------------------------------------------------------------------------

/// Positions on the desk live near ±0.1 m; stretching them toward unit
/// scale keeps the tanh layers out of their flat near-zero regime.
pub const DEFAULT_OBS_SCALE: f64 = 10.0;
/// Matches the default simulator action bound.
pub const DEFAULT_MEAN_SCALE: f64 = 0.02;

/// Gaussian policy: tanh MLP head squashed to the action bound for the mean,
/// plus a state-independent log-std vector.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PolicyNet {
    pub mlp: Mlp,
    pub log_std: Vec<f64>,
    /// Input multiplier applied before the first layer.
    pub obs_scale: f64,
    /// Mean = mean_scale * tanh(head); bounds the mean to the action range.
    pub mean_scale: f64,
}

impl PolicyNet {
    /// Zero final layer: the initial mean is 0 for every observation, so an
    /// untrained policy explores purely through `init_std` noise.
    pub fn new(obs_dim: usize, init_std: f64, rng: &mut impl Rng) -> PolicyNet {
        assert!(init_std > 0.0, "initial std must be positive");
        PolicyNet {
            mlp: Mlp::new(&[obs_dim, 64, 64, N_ACTION], rng),
            log_std: vec![init_std.ln().clamp(LOG_STD_MIN, LOG_STD_MAX); N_ACTION],
            obs_scale: DEFAULT_OBS_SCALE,
            mean_scale: DEFAULT_MEAN_SCALE,
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.mlp.n_in()
    }

    fn scaled(&self, obs: &[f64]) -> Vec<f64> {
        obs.iter().map(|v| v * self.obs_scale).collect()
    }

    pub fn forward(&self, obs: &[f64]) -> Result<([f64; N_ACTION], [f64; N_ACTION]), PolicyError> {
        if obs.len() != self.obs_dim() {
            return Err(PolicyError::ObsLength {
                got: obs.len(),
                want: self.obs_dim(),
            });
        }
        let out = self.mlp.forward(&self.scaled(obs));
        let mean = [
            self.mean_scale * out[0].tanh(),
            self.mean_scale * out[1].tanh(),
        ];
        let std = [self.log_std[0].exp(), self.log_std[1].exp()];
        Ok((mean, std))
    }

    pub fn is_finite(&self) -> bool {
        self.mlp
            .layers
            .iter()
            .all(|l| l.w.iter().chain(l.b.iter()).all(|v| v.is_finite()))
            && self.log_std.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ValueNet {
    pub mlp: Mlp,
    pub obs_scale: f64,
}

impl ValueNet {
    pub fn new(obs_dim: usize, rng: &mut impl Rng) -> ValueNet {
        ValueNet {
            mlp: Mlp::new(&[obs_dim, 64, 64, 1], rng),
            obs_scale: DEFAULT_OBS_SCALE,
        }
    }

    pub fn value(&self, obs: &[f64]) -> Result<f64, PolicyError> {
        if obs.len() != self.mlp.n_in() {
            return Err(PolicyError::ObsLength {
                got: obs.len(),
                want: self.mlp.n_in(),
            });
        }
        let scaled: Vec<f64> = obs.iter().map(|v| v * self.obs_scale).collect();
        Ok(self.mlp.forward(&scaled)[0])
    }
}

/// Diagonal-Gaussian log-density of `x` under (mean, std).
pub fn gaussian_log_prob(mean: &[f64; N_ACTION], std: &[f64; N_ACTION], x: &[f64; N_ACTION]) -> f64 {
    let mut lp = 0.0;
    for i in 0..N_ACTION {
        let z = (x[i] - mean[i]) / std[i];
        lp += -0.5 * z * z - std[i].ln() - HALF_LN_TAU;
    }
    lp
}

#[derive(Debug, Clone, Copy)]
pub struct SampledAction {
    /// Executed action, clamped to the simulator bound.
    pub action: EnvAction,
    /// Pre-clamp Gaussian sample; log_prob refers to this value.
    pub raw: [f64; N_ACTION],
    pub log_prob: f64,
}

pub fn sample_action(
    mean: &[f64; N_ACTION],
    std: &[f64; N_ACTION],
    a_max: f64,
    rng: &mut impl Rng,
) -> SampledAction {
    let raw = [
        mean[0] + std[0] * sample_standard_normal(rng),
        mean[1] + std[1] * sample_standard_normal(rng),
    ];
    SampledAction {
        action: EnvAction { dx: raw[0], dy: raw[1] }.clamped(a_max),
        raw,
        log_prob: gaussian_log_prob(mean, std, &raw),
    }
}

// ---------------------------------------------------------------------------
// Rewards
// ---------------------------------------------------------------------------

/// Cube task: weighted block-to-target distance plus effector guidance,
/// both negated distances, so the reward is never positive.
pub fn task_reward_cube(s: &EnvState, target: [f64; 2], lambda_d: f64, lambda_ee: f64) -> f64 {
    let r_d = -(s.block_x - target[0]).hypot(s.block_y - target[1]);
    let r_ee = -(s.effector_x - s.block_x).hypot(s.effector_y - s.block_y);
    lambda_d * r_d + lambda_ee * r_ee
}

/// T-block task: weighted distance plus orientation alignment, the latter as
/// the negated absolute wrapped yaw difference.
pub fn task_reward_tblock(s: &EnvState, target: [f64; 3], lambda_d: f64, lambda_o: f64) -> f64 {
    let r_d = -(s.block_x - target[0]).hypot(s.block_y - target[1]);
    let r_o = -wrap_angle(s.block_yaw - target[2]).abs();
    lambda_d * r_d + lambda_o * r_o
}

// ---------------------------------------------------------------------------
// Generalized advantage estimation
// ---------------------------------------------------------------------------

/// Backward GAE recursion over one contiguous segment; `terminal_value`
/// bootstraps past the last step (0 for genuine termination). Returns
/// (advantages, returns) with returns[t] = advantages[t] + values[t].
pub fn gae_advantages(
    rewards: &[f64],
    values: &[f64],
    terminal_value: f64,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>), PolicyError> {
    if rewards.len() != values.len() {
        return Err(PolicyError::LengthMismatch {
            rewards: rewards.len(),
            values: values.len(),
        });
    }
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let v_next = if t + 1 < n { values[t + 1] } else { terminal_value };
        let delta = rewards[t] + gamma * v_next - values[t];
        acc = delta + gamma * lambda * acc;
        adv[t] = acc;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, ret))
}

// ---------------------------------------------------------------------------
// Episodes
// ---------------------------------------------------------------------------

/// Episode layout shared by training, evaluation, and real collection.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct EpisodeConfig {
    pub task: TaskKind,
    pub horizon: usize,
    /// Block spawns uniformly in a square of this half-extent around the
    /// table center.
    pub block_jitter: f64,
    /// Initial block yaw drawn uniformly from ±this.
    pub block_yaw_range: f64,
    /// Target position drawn uniformly in a disc of this radius.
    pub target_radius: f64,
    /// Target yaw drawn uniformly from ±this (T-block task only).
    pub target_yaw_range: f64,
    /// Effector spawns at this distance from the block center.
    pub effector_offset: f64,
    /// Effector spawn direction: within ±this arc (radians) of the ray from
    /// the target through the block, so pushes from the spawn side tend to
    /// move the block toward the target. π recovers a uniform spawn circle.
    pub effector_spawn_arc: f64,
    /// Position tolerance that counts as reaching the target.
    pub success_radius: f64,
    /// Yaw tolerance for T-block termination (position alone never
    /// terminates the T task, so orientation keeps improving).
    pub success_yaw: f64,
    pub lambda_d: f64,
    pub lambda_ee: f64,
    pub lambda_o: f64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            task: TaskKind::Cube,
            // Short episodes: a competent policy finishes in ~15 steps, and
            // packing more episodes into a fixed-size collection covers more
            // push directions per dataset.
            horizon: 30,
            block_jitter: 0.02,
            block_yaw_range: std::f64::consts::PI,
            target_radius: 0.2,
            target_yaw_range: 0.0,
            // Spawn the effector inside contact range so even an untrained
            // random policy produces contact-rich data from the first step.
            effector_offset: 0.045,
            effector_spawn_arc: 0.5,
            success_radius: 0.02,
            success_yaw: 0.1,
            lambda_d: 6.0,
            lambda_ee: 3.0,
            lambda_o: 0.0,
        }
    }
}

impl EpisodeConfig {
    pub fn cube() -> Self {
        EpisodeConfig::default()
    }

    pub fn tblock() -> Self {
        EpisodeConfig {
            task: TaskKind::TBlock,
            block_yaw_range: std::f64::consts::FRAC_PI_4,
            target_yaw_range: std::f64::consts::FRAC_PI_2,
            lambda_d: 3.0,
            lambda_ee: 0.0,
            lambda_o: 6.0,
            ..EpisodeConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.horizon == 0 {
            return Err(PolicyError::BadConfig("horizon must be >= 1".into()));
        }
        let nonneg = [
            ("block_jitter", self.block_jitter),
            ("block_yaw_range", self.block_yaw_range),
            ("target_yaw_range", self.target_yaw_range),
            ("lambda_d", self.lambda_d),
            ("lambda_ee", self.lambda_ee),
            ("lambda_o", self.lambda_o),
        ];
        for (name, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(PolicyError::BadConfig(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        let positive = [
            ("target_radius", self.target_radius),
            ("effector_offset", self.effector_offset),
            ("effector_spawn_arc", self.effector_spawn_arc),
            ("success_radius", self.success_radius),
            ("success_yaw", self.success_yaw),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(PolicyError::BadConfig(format!(
                    "{name} must be finite and > 0, got {v}"
                )));
            }
        }
        Ok(())
    }

    fn task_reward(&self, s: &EnvState, target: [f64; 3]) -> f64 {
        match self.task {
            TaskKind::Cube => {
                task_reward_cube(s, [target[0], target[1]], self.lambda_d, self.lambda_ee)
            }
            TaskKind::TBlock => task_reward_tblock(s, target, self.lambda_d, self.lambda_o),
        }
    }
}

/// Which dynamics an episode runs against: the tuned simulator (training) or
/// the noisy hidden-parameter stand-in (collection and evaluation).
#[derive(Debug, Clone)]
pub enum EnvDynamics<'a> {
    Sim {
        model: &'a PushModel,
        params: SimParams,
    },
    Proxy {
        model: &'a PushModel,
        proxy: RealProxyConfig,
    },
}

impl<'a> EnvDynamics<'a> {
    pub fn model(&self) -> &'a PushModel {
        match self {
            EnvDynamics::Sim { model, .. } | EnvDynamics::Proxy { model, .. } => model,
        }
    }

    pub fn next(&self, s: &EnvState, a: EnvAction, rng: &mut ChaCha8Rng) -> EnvState {
        match self {
            EnvDynamics::Sim { model, params } => step(model, params, s, a),
            EnvDynamics::Proxy { model, proxy } => real_step(model, proxy, s, a, rng),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StepResult {
    pub transition: Transition,
    /// Observation of the post-step state.
    pub obs: Vec<f64>,
    pub task_reward: f64,
    /// Task solved; the episode must be reset.
    pub terminated: bool,
    /// Horizon exhausted without success; the episode must be reset.
    pub truncated: bool,
}

#[derive(Debug)]
pub struct PushEnv<'a> {
    pub dynamics: EnvDynamics<'a>,
    pub cfg: EpisodeConfig,
    state: EnvState,
    target: [f64; 3],
    steps_taken: usize,
}

/// Scale `grads` (plus the flat extra block) so the global L2 norm does not
/// exceed `max_norm`; 0 disables.
fn clip_grad_norm(grads: &mut crate::policy::nn::MlpGrads, extra: &mut [f64], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let mut sq = 0.0;
    for g in grads.w.iter().chain(grads.b.iter()) {
        sq += g.iter().map(|x| x * x).sum::<f64>();
    }
    sq += extra.iter().map(|x| x * x).sum::<f64>();
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.scale(s);
        extra.iter_mut().for_each(|x| *x *= s);
    }
}

fn draw_sym(rng: &mut ChaCha8Rng, half: f64) -> f64 {
    if half > 0.0 {
        rng.gen_range(-half..half)
    } else {
        0.0
    }
}

impl<'a> PushEnv<'a> {
    pub fn new(dynamics: EnvDynamics<'a>, cfg: EpisodeConfig) -> Result<PushEnv<'a>, PolicyError> {
        cfg.validate()?;
        Ok(PushEnv {
            dynamics,
            cfg,
            state: EnvState {
                block_x: 0.0,
                block_y: 0.0,
                block_yaw: 0.0,
                effector_x: 0.0,
                effector_y: 0.0,
            },
            target: [0.0; 3],
            steps_taken: 0,
        })
    }

    /// Draw order is fixed (block x, y, yaw; target radius, angle, yaw;
    /// effector arc offset) so resets are reproducible under a seeded stream.
    pub fn reset(&mut self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let c = &self.cfg;
        let bx = draw_sym(rng, c.block_jitter);
        let by = draw_sym(rng, c.block_jitter);
        let byaw = draw_sym(rng, c.block_yaw_range);
        let r = c.target_radius * rng.gen_range(0.0..1.0f64).sqrt();
        let phi = rng.gen_range(0.0..std::f64::consts::TAU);
        let tyaw = match c.task {
            TaskKind::Cube => 0.0,
            TaskKind::TBlock => draw_sym(rng, c.target_yaw_range),
        };
        let (tx, ty) = (r * phi.cos(), r * phi.sin());
        // Center the spawn arc on the target->block ray; a target right on
        // the block leaves the direction undefined, so fall back to the raw
        // arc offset alone.
        let away = (by - ty).atan2(bx - tx);
        let ephi = if (bx - tx).hypot(by - ty) > 1e-9 {
            away + draw_sym(rng, c.effector_spawn_arc)
        } else {
            draw_sym(rng, c.effector_spawn_arc)
        };
        let ws = self.dynamics.model().geometry.workspace_half;
        self.state = EnvState {
            block_x: bx,
            block_y: by,
            block_yaw: wrap_angle(byaw),
            effector_x: (bx + c.effector_offset * ephi.cos()).clamp(-ws, ws),
            effector_y: (by + c.effector_offset * ephi.sin()).clamp(-ws, ws),
        };
        self.target = [tx, ty, tyaw];
        self.steps_taken = 0;
        self.observe()
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn target(&self) -> [f64; 3] {
        self.target
    }

    pub fn observe(&self) -> Vec<f64> {
        build_observation(self.cfg.task, &self.state, self.target)
    }

    pub fn block_distance(&self) -> f64 {
        (self.state.block_x - self.target[0]).hypot(self.state.block_y - self.target[1])
    }

    pub fn yaw_error(&self) -> f64 {
        wrap_angle(self.state.block_yaw - self.target[2]).abs()
    }

    fn solved(&self) -> bool {
        let pos = self.block_distance() <= self.cfg.success_radius;
        match self.cfg.task {
            TaskKind::Cube => pos,
            TaskKind::TBlock => pos && self.yaw_error() <= self.cfg.success_yaw,
        }
    }

    pub fn step(&mut self, action: EnvAction, rng: &mut ChaCha8Rng) -> StepResult {
        let prev = self.state;
        self.state = self.dynamics.next(&prev, action, rng);
        self.steps_taken += 1;
        let terminated = self.solved();
        StepResult {
            transition: Transition {
                state: prev,
                action,
                next_state: self.state,
            },
            obs: self.observe(),
            task_reward: self.cfg.task_reward(&self.state, self.target),
            terminated,
            truncated: !terminated && self.steps_taken >= self.cfg.horizon,
        }
    }
}

// ---------------------------------------------------------------------------
// PPO
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct PpoConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    /// Environment steps consumed by one `train_policy` call.
    pub total_steps: usize,
    /// Steps gathered between gradient phases.
    pub rollout_steps: usize,
    pub entropy_coef: f64,
    /// Internal multiplier applied to rewards before GAE and critic
    /// regression, conditioning value targets near unit scale. Logged
    /// returns stay in true reward units.
    pub reward_scale: f64,
    /// Global L2 cap on each minibatch gradient (actor and critic
    /// separately); 0 disables clipping.
    pub max_grad_norm: f64,
    /// Stop the update phase once the estimated policy KL against the
    /// rollout policy exceeds this; 0 disables the check.
    pub target_kl: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            gamma: 0.99,
            gae_lambda: 0.95,
            clip: 0.2,
            epochs: 4,
            minibatch: 64,
            actor_lr: 1e-3,
            critic_lr: 1e-2,
            total_steps: 200_000,
            rollout_steps: 2_048,
            entropy_coef: 0.0,
            reward_scale: 0.02,
            max_grad_norm: 0.5,
            target_kl: 0.05,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(PolicyError::BadConfig(
                "gamma and gae_lambda must lie in [0, 1]".into(),
            ));
        }
        if !(self.clip.is_finite() && self.clip > 0.0) {
            return Err(PolicyError::BadConfig(format!(
                "clip must be positive, got {}",
                self.clip
            )));
        }
        if self.epochs == 0 || self.minibatch == 0 || self.total_steps == 0 || self.rollout_steps == 0 {
            return Err(PolicyError::BadConfig(
                "epochs, minibatch, total_steps, rollout_steps must be >= 1".into(),
            ));
        }
        for (name, v) in [("actor_lr", self.actor_lr), ("critic_lr", self.critic_lr)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(PolicyError::BadConfig(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        if !(self.entropy_coef.is_finite() && self.entropy_coef >= 0.0) {
            return Err(PolicyError::BadConfig(format!(
                "entropy_coef must be >= 0, got {}",
                self.entropy_coef
            )));
        }
        if !(self.reward_scale.is_finite() && self.reward_scale > 0.0) {
            return Err(PolicyError::BadConfig(format!(
                "reward_scale must be positive, got {}",
                self.reward_scale
            )));
        }
        for (name, v) in [("max_grad_norm", self.max_grad_norm), ("target_kl", self.target_kl)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(PolicyError::BadConfig(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// One gradient batch: aligned per-step rows.
#[derive(Debug, Clone, Default)]
pub struct PpoBatch {
    pub obs: Vec<Vec<f64>>,
    pub actions: Vec<[f64; N_ACTION]>,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl PpoBatch {
    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    fn validate(&self, obs_dim: usize) -> Result<(), PolicyError> {
        if self.is_empty() {
            return Err(PolicyError::EmptyBatch);
        }
        let n = self.len();
        if [self.actions.len(), self.old_log_probs.len(), self.advantages.len(), self.returns.len()]
            .iter()
            .any(|&l| l != n)
        {
            return Err(PolicyError::BadConfig("batch columns disagree in length".into()));
        }
        if let Some(o) = self.obs.iter().find(|o| o.len() != obs_dim) {
            return Err(PolicyError::ObsLength {
                got: o.len(),
                want: obs_dim,
            });
        }
        Ok(())
    }
}

/// Adam states for both networks; persists across updates within one
/// training phase.
#[derive(Debug, Clone)]
pub struct PpoOptState {
    pub actor: Adam,
    pub critic: Adam,
}

impl PpoOptState {
    pub fn new(policy: &PolicyNet, value: &ValueNet, cfg: &PpoConfig) -> PpoOptState {
        PpoOptState {
            actor: Adam::new(&policy.mlp, N_ACTION, cfg.actor_lr),
            critic: Adam::new(&value.mlp, 0, cfg.critic_lr),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct PpoStats {
    /// Mean clipped-surrogate objective (negated, i.e. the minimized loss).
    pub actor_loss: f64,
    /// Mean squared value error against the empirical returns.
    pub critic_loss: f64,
    /// Fraction of sample visits where the clipped branch was active.
    pub clip_fraction: f64,
    /// Mean nonnegative KL estimate (ratio - 1 - log ratio) over visited
    /// minibatches.
    pub approx_kl: f64,
}

/// One PPO update: normalize advantages over the batch, then run
/// `epochs` shuffled minibatch passes of clipped-surrogate ascent on the
/// policy and squared-error regression on the value net.
pub fn ppo_update(
    policy: &mut PolicyNet,
    value: &mut ValueNet,
    opt: &mut PpoOptState,
    batch: &PpoBatch,
    cfg: &PpoConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PpoStats, PolicyError> {
    cfg.validate()?;
    batch.validate(policy.obs_dim())?;
    let n = batch.len();

    // Single-sample batches keep their raw advantage: centering would zero
    // the only gradient signal.
    let adv: Vec<f64> = if n >= 2 {
        let mean = batch.advantages.iter().sum::<f64>() / n as f64;
        let var = batch.advantages.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n as f64;
        let denom = var.sqrt().max(1e-8);
        batch.advantages.iter().map(|a| (a - mean) / denom).collect()
    } else {
        batch.advantages.clone()
    };

    let mut idx: Vec<usize> = (0..n).collect();
    let mut cache = Cache::default();
    let mut pol_grads = policy.mlp.zero_grads();
    let mut val_grads = value.mlp.zero_grads();
    let mut actor_loss_sum = 0.0;
    let mut critic_loss_sum = 0.0;
    let mut clipped = 0usize;
    let mut visits = 0usize;
    let mut kl_sum = 0.0;
    let mut kl_batches = 0usize;
    let mut kl_stop = false;

    'epochs: for _ in 0..cfg.epochs {
        idx.shuffle(rng);
        for chunk in idx.chunks(cfg.minibatch) {
            pol_grads.zero();
            val_grads.zero();
            let mut logstd_grads = [0.0; N_ACTION];
            let mut kl_chunk = 0.0;
            for &i in chunk {
                let obs = &batch.obs[i];
                let a = &batch.actions[i];

                let pobs = policy.scaled(obs);
                let out = policy.mlp.forward_cached(&pobs, &mut cache);
                let head = [out[0], out[1]];
                let mean = [
                    policy.mean_scale * head[0].tanh(),
                    policy.mean_scale * head[1].tanh(),
                ];
                let std = [policy.log_std[0].exp(), policy.log_std[1].exp()];
                let lp_new = gaussian_log_prob(&mean, &std, a);
                let log_ratio = lp_new - batch.old_log_probs[i];
                let ratio = log_ratio.exp();
                kl_chunk += (ratio - 1.0) - log_ratio;
                let surr1 = ratio * adv[i];
                let surr2 = ratio.clamp(1.0 - cfg.clip, 1.0 + cfg.clip) * adv[i];
                actor_loss_sum += -surr1.min(surr2);
                visits += 1;

                // Gradient flows through the unclipped branch only when it is
                // the active minimum; saturated clipping contributes nothing.
                let g_lp = if surr1 <= surr2 {
                    -adv[i] * ratio
                } else {
                    clipped += 1;
                    0.0
                };
                let mut dhead = [0.0; N_ACTION];
                for j in 0..N_ACTION {
                    let diff = a[j] - mean[j];
                    let dmean = g_lp * diff / (std[j] * std[j]);
                    let t = head[j].tanh();
                    dhead[j] = dmean * policy.mean_scale * (1.0 - t * t);
                    logstd_grads[j] += g_lp * (diff * diff / (std[j] * std[j]) - 1.0)
                        - cfg.entropy_coef;
                }
                policy.mlp.backward(&cache, &dhead, &mut pol_grads);

                let vobs: Vec<f64> = obs.iter().map(|x| x * value.obs_scale).collect();
                let v = value.mlp.forward_cached(&vobs, &mut cache)[0];
                let err = v - batch.returns[i];
                critic_loss_sum += err * err;
                value.mlp.backward(&cache, &[2.0 * err], &mut val_grads);
            }
            let inv = 1.0 / chunk.len() as f64;
            kl_chunk *= inv;
            kl_sum += kl_chunk;
            kl_batches += 1;
            // A drifted policy invalidates the stored log-probs; stop
            // consuming the batch instead of stepping further away.
            if cfg.target_kl > 0.0 && kl_chunk > cfg.target_kl {
                kl_stop = true;
                break 'epochs;
            }
            pol_grads.scale(inv);
            val_grads.scale(inv);
            logstd_grads.iter_mut().for_each(|g| *g *= inv);
            clip_grad_norm(&mut pol_grads, &mut logstd_grads, cfg.max_grad_norm);
            clip_grad_norm(&mut val_grads, &mut [], cfg.max_grad_norm);
            opt.actor.step(&mut policy.mlp, &pol_grads, &mut policy.log_std, &logstd_grads);
            opt.critic.step(&mut value.mlp, &val_grads, &mut [], &[]);
            for ls in policy.log_std.iter_mut() {
                *ls = ls.clamp(LOG_STD_MIN, LOG_STD_MAX);
            }
        }
    }
    let _ = kl_stop;

    Ok(PpoStats {
        actor_loss: actor_loss_sum / visits as f64,
        critic_loss: critic_loss_sum / visits as f64,
        clip_fraction: clipped as f64 / visits as f64,
        approx_kl: if kl_batches > 0 { kl_sum / kl_batches as f64 } else { 0.0 },
    })
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct UpdateLog {
    /// Cumulative environment steps after this update.
    pub env_steps: usize,
    /// Episodes finished during this rollout window.
    pub episodes: usize,
    /// Mean shaped return of those episodes (0 when none finished).
    pub mean_episode_return: f64,
    /// Sum of per-step task rewards in the window.
    pub task_reward_sum: f64,
    /// Sum of per-step intrinsic rewards in the window.
    pub intrinsic_reward_sum: f64,
    /// |intrinsic| mass over total reward mass; exactly 0 when the gap
    /// coefficient is 0.
    pub intrinsic_share: f64,
    pub stats: PpoStats,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct TrainLog {
    pub updates: Vec<UpdateLog>,
}

impl TrainLog {
    pub fn final_mean_return(&self) -> f64 {
        self.updates
            .iter()
            .rev()
            .find(|u| u.episodes > 0)
            .map_or(0.0, |u| u.mean_episode_return)
    }

    pub fn mean_intrinsic_share(&self) -> f64 {
        if self.updates.is_empty() {
            return 0.0;
        }
        self.updates.iter().map(|u| u.intrinsic_share).sum::<f64>() / self.updates.len() as f64
    }
}

/// Train (or continue training) a policy in the tuned simulator, shaping
/// every step's task reward with the frozen-context intrinsic bonus.
/// `warm_start` seeds the networks; optimizer state always starts fresh.
pub fn train_policy(
    model: &PushModel,
    sim_params: &SimParams,
    gap: &GapContext,
    warm_start: Option<(&PolicyNet, &ValueNet)>,
    ppo: &PpoConfig,
    episode: &EpisodeConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(PolicyNet, ValueNet, TrainLog), PolicyError> {
    ppo.validate()?;
    episode.validate()?;
    let obs_dim = episode.task.obs_dim();
    let a_max = model.geometry.a_max;

    let (mut policy, mut value) = match warm_start {
        Some((p, v)) => {
            if p.obs_dim() != obs_dim || v.mlp.n_in() != obs_dim {
                return Err(PolicyError::ObsLength {
                    got: p.obs_dim(),
                    want: obs_dim,
                });
            }
            (p.clone(), v.clone())
        }
        None => (
            PolicyNet::new(obs_dim, 0.5 * a_max, rng),
            ValueNet::new(obs_dim, rng),
        ),
    };
    let mut opt = PpoOptState::new(&policy, &value, ppo);

    let mut env = PushEnv::new(
        EnvDynamics::Sim {
            model,
            params: *sim_params,
        },
        episode.clone(),
    )?;
    let mut obs = env.reset(rng);

    let mut log = TrainLog::default();
    let mut steps_done = 0usize;
    let mut episode_return = 0.0;

    while steps_done < ppo.total_steps {
        let window = ppo.rollout_steps.min(ppo.total_steps - steps_done);

        let mut batch = PpoBatch::default();
        let mut rewards = Vec::with_capacity(window);
        let mut values = Vec::with_capacity(window);
        let mut seg_start = 0usize;
        let mut task_sum = 0.0;
        let mut intr_abs_sum = 0.0;
        let mut task_abs_sum = 0.0;
        let mut intr_sum = 0.0;
        let mut finished_returns: Vec<f64> = Vec::new();

        for t in 0..window {
            let (mean, std) = policy.forward(&obs)?;
            let sampled = sample_action(&mean, &std, a_max, rng);
            let v = value.value(&obs)?;
            let res = env.step(sampled.action, rng);
            let intrinsic = gap.intrinsic_reward(&res.transition);
            let total = res.task_reward + intrinsic;

            batch.obs.push(std::mem::take(&mut obs));
            batch.actions.push(sampled.raw);
            batch.old_log_probs.push(sampled.log_prob);
            rewards.push(total * ppo.reward_scale);
            values.push(v);
            task_sum += res.task_reward;
            intr_sum += intrinsic;
            task_abs_sum += res.task_reward.abs();
            intr_abs_sum += intrinsic.abs();
            episode_return += total;

            let boundary = res.terminated || res.truncated;
            if boundary || t + 1 == window {
                // Genuine success bootstraps 0; a cut-off episode bootstraps
                // the value of the state it would have continued from.
                let next_obs = if boundary { env.reset(rng) } else { res.obs.clone() };
                let terminal_value = if res.terminated {
                    0.0
                } else {
                    value.value(&res.obs)?
                };
                let (adv, ret) = gae_advantages(
                    &rewards[seg_start..],
                    &values[seg_start..],
                    terminal_value,
                    ppo.gamma,
                    ppo.gae_lambda,
                )?;
                batch.advantages.extend(adv);
                batch.returns.extend(ret);
                seg_start = rewards.len();
                obs = next_obs;
                if boundary {
                    finished_returns.push(episode_return);
                    episode_return = 0.0;
                }
            } else {
                obs = res.obs;
            }
        }
        steps_done += window;

        let stats = ppo_update(&mut policy, &mut value, &mut opt, &batch, ppo, rng)?;
        let mass = task_abs_sum + intr_abs_sum;
        log.updates.push(UpdateLog {
            env_steps: steps_done,
            episodes: finished_returns.len(),
            mean_episode_return: if finished_returns.is_empty() {
                0.0
            } else {
                finished_returns.iter().sum::<f64>() / finished_returns.len() as f64
            },
            task_reward_sum: task_sum,
            intrinsic_reward_sum: intr_sum,
            intrinsic_share: if mass > 0.0 { intr_abs_sum / mass } else { 0.0 },
            stats,
        });
    }

    Ok((policy, value, log))
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub episodes: usize,
    /// Episodes whose block came within `success_radius` of the target.
    pub successes: usize,
    pub success_rate: f64,
    pub mean_final_distance: f64,
    /// Mean absolute wrapped yaw error at episode end (T-block task; 0 for
    /// the cube, whose target carries no orientation).
    pub mean_final_yaw_error: f64,
}

/// Roll the mean action (no exploration noise) for `episodes` episodes and
/// report success statistics. Success counts reaching the position tolerance
/// at any step, independent of the termination rule.
pub fn evaluate(
    policy: &PolicyNet,
    env: &mut PushEnv,
    episodes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<EvalReport, PolicyError> {
    if episodes == 0 {
        return Err(PolicyError::BadConfig("evaluation needs >= 1 episode".into()));
    }
    let a_max = env.dynamics.model().geometry.a_max;
    let mut successes = 0usize;
    let mut dist_sum = 0.0;
    let mut yaw_sum = 0.0;
    for _ in 0..episodes {
        let mut obs = env.reset(rng);
        let mut reached = false;
        loop {
            let (mean, _) = policy.forward(&obs)?;
            let action = EnvAction {
                dx: mean[0],
                dy: mean[1],
            }
            .clamped(a_max);
            let res = env.step(action, rng);
            obs = res.obs;
            if env.block_distance() <= env.cfg.success_radius {
                reached = true;
            }
            if res.terminated || res.truncated {
                break;
            }
        }
        successes += reached as usize;
        dist_sum += env.block_distance();
        yaw_sum += match env.cfg.task {
            TaskKind::Cube => 0.0,
            TaskKind::TBlock => env.yaw_error(),
        };
    }
    Ok(EvalReport {
        episodes,
        successes,
        success_rate: successes as f64 / episodes as f64,
        mean_final_distance: dist_sum / episodes as f64,
        mean_final_yaw_error: yaw_sum / episodes as f64,
    })
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

/// Versioned JSON snapshot of one trained policy/value pair.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PolicyCheckpoint {
    pub version: u32,
    pub task: TaskKind,
    pub policy: PolicyNet,
    pub value: ValueNet,
}

impl PolicyCheckpoint {
    pub fn new(task: TaskKind, policy: PolicyNet, value: ValueNet) -> PolicyCheckpoint {
        PolicyCheckpoint {
            version: CHECKPOINT_VERSION,
            task,
            policy,
            value,
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), PolicyError> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        serde_json::to_writer(&mut w, self)?;
        std::io::Write::flush(&mut w)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<PolicyCheckpoint, PolicyError> {
        let file = std::fs::File::open(path)?;
        let ckpt: PolicyCheckpoint = serde_json::from_reader(std::io::BufReader::new(file))?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(PolicyError::BadCheckpoint(format!(
                "unsupported version {} (expected {})",
                ckpt.version, CHECKPOINT_VERSION
            )));
        }
        if !ckpt.policy.is_finite() {
            return Err(PolicyError::BadCheckpoint("non-finite policy parameters".into()));
        }
        if ckpt.policy.obs_dim() != ckpt.task.obs_dim() {
            return Err(PolicyError::BadCheckpoint(format!(
                "policy input {} does not match task observation size {}",
                ckpt.policy.obs_dim(),
                ckpt.task.obs_dim()
            )));
        }
        Ok(ckpt)
    }
}
