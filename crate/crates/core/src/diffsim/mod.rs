//! Differentiable quasi-static planar pushing.
//!
//! One `step` advances the world by a single effector displacement command.
//! The effector sweeps linearly to its commanded position over the push
//! window while the block, starting at rest, integrates a force balance:
//! a softplus-smoothed penalty contact force with a tanh-smoothed tangential
//! drag from the effector, against Coulomb table friction. A fixed-length
//! settle window then lets the block coast to rest with the effector parked,
//! and residual velocity is discarded (the state is poses only).
//!
//! Mass enters through the contact acceleration `F/m` while table friction
//! decelerates at `mu_table * g` independent of mass, so the two are
//! separately identifiable from transition data; contact stiffness sets the
//! penetration depth and the effector friction coefficient the tangential
//! drag. Sensitivities with respect to all four parameters ride through the
//! integrator on forward-mode duals and agree with finite differences.

pub mod dual;
pub mod geometry;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{wrap_angle, DataTag, Dataset, EnvAction, EnvState, Transition};
use dual::{softplus_beta, tanh_over_norm, Dual4, SimScalar, N_PARAMS};
use geometry::contact_query;
pub use geometry::{BlockShape, ShapeProps};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
}

/// The four tunable physical parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimParams {
    /// Coulomb friction between block and table.
    pub mu_table: f64,
    /// Friction between effector and block surface.
    pub mu_contact: f64,
    /// Block mass, kg.
    pub block_mass: f64,
    /// Contact penalty stiffness, N/m.
    pub contact_stiffness: f64,
}

impl Default for SimParams {
    /// Deliberately miscalibrated starting point for the tuning loop.
    fn default() -> Self {
        SimParams {
            mu_table: 0.3,
            mu_contact: 0.6,
            block_mass: 0.26,
            contact_stiffness: 300.0,
        }
    }
}

pub const PARAM_NAMES: [&str; N_PARAMS] =
    ["mu_table", "mu_contact", "block_mass", "contact_stiffness"];

impl SimParams {
    pub fn to_array(self) -> [f64; N_PARAMS] {
        [
            self.mu_table,
            self.mu_contact,
            self.block_mass,
            self.contact_stiffness,
        ]
    }

    pub fn from_array(a: [f64; N_PARAMS]) -> Self {
        SimParams {
            mu_table: a[0],
            mu_contact: a[1],
            block_mass: a[2],
            contact_stiffness: a[3],
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        for (name, v) in PARAM_NAMES.iter().zip(self.to_array().iter()) {
            if !(v.is_finite() && *v > 0.0) {
                return Err(SimError::InvalidParams(format!(
                    "{name} must be positive and finite, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Fixed world description: shape, smoothing constants, integration windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimGeometry {
    pub shape: BlockShape,
    /// Effector disc radius, m.
    pub effector_radius: f64,
    /// Contact softening rate, 1/m.
    pub softplus_beta: f64,
    /// Surface gap beyond which contact force is skipped entirely, m.
    pub contact_clearance: f64,
    /// Tangential slip smoothing velocity, m/s.
    pub eps_slip: f64,
    /// Table friction smoothing velocity, m/s.
    pub eps_fric: f64,
    /// Rotational friction smoothing rate, rad/s.
    pub eps_rot: f64,
    /// Effector sweep window per step, s.
    pub step_duration: f64,
    pub substeps: u32,
    /// Post-sweep coasting window, s.
    pub settle_duration: f64,
    pub settle_substeps: u32,
    /// Per-component action bound, m.
    pub a_max: f64,
    /// Workspace half-extent; positions clamp to [-w, w], m.
    pub workspace_half: f64,
    pub gravity: f64,
}

impl Default for SimGeometry {
    fn default() -> Self {
        SimGeometry {
            shape: BlockShape::default(),
            effector_radius: 0.02,
            softplus_beta: 500.0,
            contact_clearance: 0.03,
            eps_slip: 0.05,
            eps_fric: 0.05,
            eps_rot: 2.0,
            step_duration: 0.1,
            substeps: 20,
            settle_duration: 0.12,
            settle_substeps: 24,
            a_max: 0.02,
            workspace_half: 1.0,
            gravity: 9.81,
        }
    }
}

impl SimGeometry {
    pub fn validate(&self) -> Result<(), SimError> {
        self.shape
            .validate()
            .map_err(SimError::InvalidGeometry)?;
        let positives = [
            ("effector_radius", self.effector_radius),
            ("softplus_beta", self.softplus_beta),
            ("contact_clearance", self.contact_clearance),
            ("eps_slip", self.eps_slip),
            ("eps_fric", self.eps_fric),
            ("eps_rot", self.eps_rot),
            ("step_duration", self.step_duration),
            ("settle_duration", self.settle_duration),
            ("a_max", self.a_max),
            ("workspace_half", self.workspace_half),
            ("gravity", self.gravity),
        ];
        for (name, v) in positives {
            if !(v.is_finite() && v > 0.0) {
                return Err(SimError::InvalidGeometry(format!(
                    "{name} must be positive and finite, got {v}"
                )));
            }
        }
        if self.substeps == 0 || self.settle_substeps == 0 {
            return Err(SimError::InvalidGeometry("substep counts must be >= 1".into()));
        }
        Ok(())
    }

    pub fn default_t_task() -> Self {
        SimGeometry {
            shape: BlockShape::default_t(),
            ..SimGeometry::default()
        }
    }
}

/// Geometry plus cached shape constants; build once, step many times.
#[derive(Debug, Clone)]
pub struct PushModel {
    pub geometry: SimGeometry,
    pub props: ShapeProps,
}

impl PushModel {
    pub fn new(geometry: SimGeometry) -> Result<PushModel, SimError> {
        geometry.validate()?;
        let props = ShapeProps::from_shape(&geometry.shape);
        Ok(PushModel { geometry, props })
    }
}

/// Per-parameter derivatives of one step's successor state:
/// `jacobian[i][j] = d next_state_i / d theta_j` in the state/parameter
/// storage orders.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sensitivity {
    pub jacobian: [[f64; N_PARAMS]; 5],
}

impl Sensitivity {
    pub fn zero() -> Self {
        Sensitivity {
            jacobian: [[0.0; N_PARAMS]; 5],
        }
    }
}

fn segment_point_distance(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    let abx = b[0] - a[0];
    let aby = b[1] - a[1];
    let apx = p[0] - a[0];
    let apy = p[1] - a[1];
    let len2 = abx * abx + aby * aby;
    let t = if len2 > 0.0 {
        ((apx * abx + apy * aby) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let cx = a[0] + t * abx - p[0];
    let cy = a[1] + t * aby - p[1];
    cx.hypot(cy)
}

struct BlockVars<S> {
    x: S,
    y: S,
    yaw: S,
    vx: S,
    vy: S,
    om: S,
}

#[allow(clippy::too_many_arguments)]
fn substep<S: SimScalar>(
    model: &PushModel,
    p: &[S; N_PARAMS],
    blk: &mut BlockVars<S>,
    effector: [f64; 2],
    effector_vel: [f64; 2],
    dt: f64,
) {
    let g = &model.geometry;
    let mu_t = p[0];
    let mu_c = p[1];
    let mass = p[2];
    let stiff = p[3];

    let zero = S::from_f64(0.0);
    let mut fx = zero;
    let mut fy = zero;
    let mut tau = zero;

    // Cheap value-level cull before any dual arithmetic. The branch depends
    // only on value parts, so plain and dual instantiations stay in lockstep.
    let reach = model.props.bounding_radius + g.effector_radius + g.contact_clearance;
    let dx0 = effector[0] - blk.x.re();
    let dy0 = effector[1] - blk.y.re();
    if dx0 * dx0 + dy0 * dy0 <= reach * reach {
        let c = blk.yaw.cos();
        let s = blk.yaw.sin();
        let rx = S::from_f64(effector[0]) - blk.x;
        let ry = S::from_f64(effector[1]) - blk.y;
        // Block frame: R(-yaw) * r.
        let px = c * rx + s * ry;
        let py = c * ry - s * rx;
        let q = contact_query(&model.props, px, py);
        let gap = q.sdf - S::from_f64(g.effector_radius);
        if gap.re() <= g.contact_clearance {
            let pen = -gap;
            let fn_mag = stiff * softplus_beta(pen, g.softplus_beta);
            // Back to world frame.
            let nwx = c * q.normal[0] - s * q.normal[1];
            let nwy = s * q.normal[0] + c * q.normal[1];
            let rwx = c * q.point[0] - s * q.point[1];
            let rwy = s * q.point[0] + c * q.point[1];
            // Effector surface velocity relative to the block material point.
            let rvx = S::from_f64(effector_vel[0]) - (blk.vx - blk.om * rwy);
            let rvy = S::from_f64(effector_vel[1]) - (blk.vy + blk.om * rwx);
            let rvn = rvx * nwx + rvy * nwy;
            let tvx = rvx - rvn * nwx;
            let tvy = rvy - rvn * nwy;
            let slip = tanh_over_norm(tvx * tvx + tvy * tvy, g.eps_slip);
            let drag = mu_c * fn_mag * slip;
            // Normal force presses the block away from the effector side;
            // drag carries it along the effector's tangential motion.
            fx = drag * tvx - fn_mag * nwx;
            fy = drag * tvy - fn_mag * nwy;
            tau = rwx * fy - rwy * fx;
        }
    }

    // Coulomb table friction, smoothed around zero velocity; the
    // deceleration is mu_table * g regardless of mass.
    let fric = tanh_over_norm(blk.vx * blk.vx + blk.vy * blk.vy, g.eps_fric)
        * mu_t
        * S::from_f64(g.gravity);
    let ax = fx / mass - fric * blk.vx;
    let ay = fy / mass - fric * blk.vy;
    let rg2 = model.props.gyration_sq;
    let aw = tau / (mass * S::from_f64(rg2))
        - mu_t
            * S::from_f64(g.gravity * model.props.fric_radius / rg2)
            * (blk.om * S::from_f64(1.0 / g.eps_rot)).tanh();

    let dts = S::from_f64(dt);
    blk.vx = blk.vx + ax * dts;
    blk.vy = blk.vy + ay * dts;
    blk.om = blk.om + aw * dts;
    blk.x = blk.x + blk.vx * dts;
    blk.y = blk.y + blk.vy * dts;
    blk.yaw = blk.yaw + blk.om * dts;
}

fn clamp_s<S: SimScalar>(x: S, lo: f64, hi: f64) -> S {
    if x.re() < lo {
        S::from_f64(lo)
    } else if x.re() > hi {
        S::from_f64(hi)
    } else {
        x
    }
}

fn step_core<S: SimScalar>(
    model: &PushModel,
    p: [S; N_PARAMS],
    state: &EnvState,
    action: EnvAction,
) -> [S; 5] {
    let g = &model.geometry;
    let a = action.clamped(g.a_max);
    let ws = g.workspace_half;
    let e0 = [state.effector_x, state.effector_y];
    let e1 = [
        (e0[0] + a.dx).clamp(-ws, ws),
        (e0[1] + a.dy).clamp(-ws, ws),
    ];

    // The block cannot move before being touched, so if the effector sweep
    // never comes within reach of the block's initial pose there is no
    // contact at any substep: the pose passes through untouched and every
    // parameter derivative is exactly zero.
    let reach = model.props.bounding_radius + g.effector_radius + g.contact_clearance;
    if segment_point_distance(e0, e1, [state.block_x, state.block_y]) > reach {
        return [
            S::from_f64(state.block_x),
            S::from_f64(state.block_y),
            S::from_f64(state.block_yaw),
            S::from_f64(e1[0]),
            S::from_f64(e1[1]),
        ];
    }

    let mut blk = BlockVars {
        x: S::from_f64(state.block_x),
        y: S::from_f64(state.block_y),
        yaw: S::from_f64(state.block_yaw),
        vx: S::from_f64(0.0),
        vy: S::from_f64(0.0),
        om: S::from_f64(0.0),
    };

    let move_x = e1[0] - e0[0];
    let move_y = e1[1] - e0[1];
    let vel = [move_x / g.step_duration, move_y / g.step_duration];
    let dt = g.step_duration / g.substeps as f64;
    for i in 0..g.substeps {
        let tm = (i as f64 + 0.5) / g.substeps as f64;
        let e = [e0[0] + move_x * tm, e0[1] + move_y * tm];
        substep(model, &p, &mut blk, e, vel, dt);
    }
    let dts = g.settle_duration / g.settle_substeps as f64;
    for _ in 0..g.settle_substeps {
        substep(model, &p, &mut blk, e1, [0.0, 0.0], dts);
    }

    let bx = clamp_s(blk.x, -ws, ws);
    let by = clamp_s(blk.y, -ws, ws);
    let mut yaw = blk.yaw;
    let shift = wrap_angle(yaw.re()) - yaw.re();
    if shift != 0.0 {
        yaw = yaw + S::from_f64(shift);
    }
    [bx, by, yaw, S::from_f64(e1[0]), S::from_f64(e1[1])]
}

/// Advances one step. Pure in all arguments; actions clamp to the bound,
/// outputs clamp to the workspace.
pub fn step(model: &PushModel, params: &SimParams, state: &EnvState, action: EnvAction) -> EnvState {
    debug_assert!(params.validate().is_ok());
    debug_assert!(state.is_finite() && action.is_finite());
    let out = step_core::<f64>(model, params.to_array(), state, action);
    EnvState::from_array(out)
}

/// Step plus the per-parameter jacobian of the successor state. The state
/// part is bit-identical to `step` on the same inputs.
pub fn step_with_sensitivity(
    model: &PushModel,
    params: &SimParams,
    state: &EnvState,
    action: EnvAction,
) -> (EnvState, Sensitivity) {
    debug_assert!(params.validate().is_ok());
    let arr = params.to_array();
    let p = [
        Dual4::variable(arr[0], 0),
        Dual4::variable(arr[1], 1),
        Dual4::variable(arr[2], 2),
        Dual4::variable(arr[3], 3),
    ];
    let out = step_core::<Dual4>(model, p, state, action);
    let mut jac = [[0.0; N_PARAMS]; 5];
    let mut vals = [0.0; 5];
    for (i, d) in out.iter().enumerate() {
        vals[i] = d.v;
        jac[i] = d.dx;
    }
    (EnvState::from_array(vals), Sensitivity { jacobian: jac })
}

/// Re-executes each recorded (state, action) pair through the simulator with
/// the given parameters. States and actions are copied bit for bit; only
/// successor states are recomputed (teacher forcing).
pub fn replay(model: &PushModel, params: &SimParams, data: &Dataset) -> Dataset {
    let transitions = data
        .transitions
        .iter()
        .map(|t| Transition {
            state: t.state,
            action: t.action,
            next_state: step(model, params, &t.state, t.action),
        })
        .collect();
    Dataset {
        tag: DataTag::Sim,
        iteration: data.iteration,
        transitions,
    }
}

/// Hidden-parameter stand-in for the physical system: the same dynamics
/// under its own parameter set, plus i.i.d. Gaussian observation noise on
/// position coordinates (yaw is reported exactly).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealProxyConfig {
    pub params: SimParams,
    /// Standard deviation of observation noise on positions, m.
    pub obs_noise_sigma: f64,
}

impl Default for RealProxyConfig {
    fn default() -> Self {
        RealProxyConfig {
            params: SimParams {
                mu_table: 0.6,
                mu_contact: 0.8,
                block_mass: 0.2,
                contact_stiffness: 400.0,
            },
            obs_noise_sigma: 1e-3,
        }
    }
}

impl RealProxyConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        self.params.validate()?;
        if !(self.obs_noise_sigma.is_finite() && self.obs_noise_sigma >= 0.0) {
            return Err(SimError::InvalidParams(format!(
                "obs_noise_sigma must be nonnegative, got {}",
                self.obs_noise_sigma
            )));
        }
        Ok(())
    }
}

/// One step of the proxy system. With zero noise this is bitwise `step`
/// under the proxy parameters; otherwise four normal draws perturb
/// block x, block y, effector x, effector y, in that order.
pub fn real_step<R: Rng + ?Sized>(
    model: &PushModel,
    proxy: &RealProxyConfig,
    state: &EnvState,
    action: EnvAction,
    rng: &mut R,
) -> EnvState {
    let mut next = step(model, &proxy.params, state, action);
    if proxy.obs_noise_sigma > 0.0 {
        let ws = model.geometry.workspace_half;
        let noisy = |v: f64, rng: &mut R| -> f64 {
            let z: f64 = sample_standard_normal(rng);
            (v + proxy.obs_noise_sigma * z).clamp(-ws, ws)
        };
        next.block_x = noisy(next.block_x, rng);
        next.block_y = noisy(next.block_y, rng);
        next.effector_x = noisy(next.effector_x, rng);
        next.effector_y = noisy(next.effector_y, rng);
    }
    next
}

/// Standard normal draw via Box-Muller on the rng's uniform stream.
pub fn sample_standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Supplies actions during a rollout; implementations own their randomness.
pub trait ActionSource {
    fn next_action(&mut self, state: &EnvState) -> EnvAction;
}

impl<F: FnMut(&EnvState) -> EnvAction> ActionSource for F {
    fn next_action(&mut self, state: &EnvState) -> EnvAction {
        self(state)
    }
}

/// Chained simulator rollout: each successor becomes the next state.
pub fn rollout(
    model: &PushModel,
    params: &SimParams,
    source: &mut dyn ActionSource,
    start: EnvState,
    horizon: usize,
) -> Dataset {
    let mut transitions = Vec::with_capacity(horizon);
    let mut state = start;
    for _ in 0..horizon {
        let action = source.next_action(&state);
        let next = step(model, params, &state, action);
        transitions.push(Transition {
            state,
            action,
            next_state: next,
        });
        state = next;
    }
    Dataset {
        tag: DataTag::Sim,
        iteration: 0,
        transitions,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> PushModel {
        PushModel::new(SimGeometry::default()).unwrap()
    }

    fn centered_state(effector: [f64; 2]) -> EnvState {
        EnvState {
            block_x: 0.0,
            block_y: 0.0,
            block_yaw: 0.0,
            effector_x: effector[0],
            effector_y: effector[1],
        }
    }

    /// Effector just left of the block face, pushing straight through it.
    fn head_on() -> (EnvState, EnvAction) {
        (
            centered_state([-0.051, 0.0]),
            EnvAction { dx: 0.02, dy: 0.0 },
        )
    }

    #[test]
    fn head_on_push_moves_block_forward() {
        let m = model();
        let (s, a) = head_on();
        let next = step(&m, &SimParams::default(), &s, a);
        assert!(
            next.block_x > 1e-4,
            "block_x should increase, got {}",
            next.block_x
        );
        assert!(next.block_y.abs() < 1e-9);
        assert_eq!(next.effector_x, s.effector_x + a.dx);
        assert_eq!(next.effector_y, s.effector_y);
    }

    #[test]
    fn push_displacement_is_a_sane_fraction_of_effector_motion() {
        let m = model();
        let s = centered_state([-0.0501, 0.0]);
        let a = EnvAction { dx: 0.02, dy: 0.0 };
        let params = SimParams::default();
        let mut state = s;
        for _ in 0..5 {
            state = step(&m, &params, &state, a);
        }
        let pushed = state.block_x;
        let effector_travel = 5.0 * a.dx;
        let ratio = pushed / (effector_travel - 0.0001);
        // The block coasts briefly after each sweep, so it can outrun the
        // effector a little; it must not stall or fly away.
        assert!(
            (0.4..=1.4).contains(&ratio),
            "push ratio {ratio} out of range (block moved {pushed})"
        );
    }

    #[test]
    fn distant_effector_leaves_block_untouched_bitwise() {
        let m = model();
        let s = EnvState {
            block_x: 0.1,
            block_y: -0.2,
            block_yaw: 0.7,
            effector_x: 0.6,
            effector_y: 0.3,
        };
        let a = EnvAction { dx: -0.013, dy: 0.008 };
        let next = step(&m, &SimParams::default(), &s, a);
        assert_eq!(next.block_x.to_bits(), s.block_x.to_bits());
        assert_eq!(next.block_y.to_bits(), s.block_y.to_bits());
        assert_eq!(next.block_yaw.to_bits(), s.block_yaw.to_bits());
        assert_eq!(next.effector_x, s.effector_x + a.dx);
        assert_eq!(next.effector_y, s.effector_y + a.dy);

        let (_, sens) = step_with_sensitivity(&m, &SimParams::default(), &s, a);
        assert_eq!(sens, Sensitivity::zero());
    }

    #[test]
    fn zero_action_far_from_block_is_identity() {
        let m = model();
        let s = centered_state([0.4, 0.4]);
        let next = step(&m, &SimParams::default(), &s, EnvAction { dx: 0.0, dy: 0.0 });
        for (a, b) in s.to_array().iter().zip(next.to_array().iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn actions_clamp_to_bound() {
        let m = model();
        let s = centered_state([0.5, 0.5]);
        let next = step(&m, &SimParams::default(), &s, EnvAction { dx: 1.0, dy: -3.0 });
        assert_eq!(next.effector_x, 0.5 + m.geometry.a_max);
        assert_eq!(next.effector_y, 0.5 - m.geometry.a_max);
    }

    #[test]
    fn positions_clamp_to_workspace() {
        let m = model();
        let s = centered_state([0.995, 0.0]);
        let next = step(&m, &SimParams::default(), &s, EnvAction { dx: 0.02, dy: 0.0 });
        assert_eq!(next.effector_x, m.geometry.workspace_half);
    }

    #[test]
    fn step_is_deterministic() {
        let m = model();
        let (s, a) = head_on();
        let p = SimParams::default();
        let n1 = step(&m, &p, &s, a);
        let n2 = step(&m, &p, &s, a);
        for (x, y) in n1.to_array().iter().zip(n2.to_array().iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn sensitivity_state_matches_step_bitwise() {
        let m = model();
        let (s, a) = head_on();
        let p = SimParams::default();
        let plain = step(&m, &p, &s, a);
        let (dual_state, sens) = step_with_sensitivity(&m, &p, &s, a);
        for (x, y) in plain.to_array().iter().zip(dual_state.to_array().iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        // Contact is active: pushing harder against table friction or adding
        // mass must reduce the block's displacement.
        assert!(sens.jacobian[0][0] < 0.0, "d block_x / d mu_table >= 0");
        assert!(sens.jacobian[0][2] < 0.0, "d block_x / d mass >= 0");
        // Effector rows never depend on physical parameters.
        for j in 0..N_PARAMS {
            assert_eq!(sens.jacobian[3][j], 0.0);
            assert_eq!(sens.jacobian[4][j], 0.0);
        }
    }

    #[test]
    fn jacobian_matches_finite_differences_on_random_cases() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut contact_cases = 0;
        for _ in 0..60 {
            let (s, a, p) = random_case(&mut rng);
            let (_, sens) = step_with_sensitivity(&m, &p, &s, a);
            if sens.jacobian.iter().flatten().any(|v| *v != 0.0) {
                contact_cases += 1;
            }
            check_fd(&m, &p, &s, a, &sens);
        }
        assert!(contact_cases > 10, "too few contact cases: {contact_cases}");
    }

    fn random_case(rng: &mut ChaCha8Rng) -> (EnvState, EnvAction, SimParams) {
        let yaw = rng.gen_range(-std::f64::consts::PI..=std::f64::consts::PI);
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        let dist = rng.gen_range(0.035..0.09);
        let s = EnvState {
            block_x: rng.gen_range(-0.05..0.05),
            block_y: rng.gen_range(-0.05..0.05),
            block_yaw: yaw,
            effector_x: 0.0,
            effector_y: 0.0,
        };
        let s = EnvState {
            effector_x: s.block_x + dist * angle.cos(),
            effector_y: s.block_y + dist * angle.sin(),
            ..s
        };
        // Aim roughly at the block with noise so some cases miss.
        let to_block = (s.block_x - s.effector_x, s.block_y - s.effector_y);
        let norm = to_block.0.hypot(to_block.1);
        let mag = rng.gen_range(0.0..0.02);
        let jx = rng.gen_range(-0.01..0.01);
        let jy = rng.gen_range(-0.01..0.01);
        let a = EnvAction {
            dx: mag * to_block.0 / norm + jx,
            dy: mag * to_block.1 / norm + jy,
        };
        let p = SimParams {
            mu_table: rng.gen_range(0.1..1.0),
            mu_contact: rng.gen_range(0.1..1.2),
            block_mass: rng.gen_range(0.05..0.6),
            contact_stiffness: rng.gen_range(100.0..800.0),
        };
        (s, a, p)
    }

    fn check_fd(m: &PushModel, p: &SimParams, s: &EnvState, a: EnvAction, sens: &Sensitivity) {
        let base = p.to_array();
        for j in 0..N_PARAMS {
            let h = 1e-6 * base[j].abs().max(1e-3);
            let mut up = base;
            up[j] += h;
            let mut dn = base;
            dn[j] -= h;
            let fu = step(m, &SimParams::from_array(up), s, a).to_array();
            let fd = step(m, &SimParams::from_array(dn), s, a).to_array();
            for i in 0..5 {
                let numeric = (fu[i] - fd[i]) / (2.0 * h);
                let analytic = sens.jacobian[i][j];
                let tol = 1e-4 * numeric.abs().max(analytic.abs()) + 1e-8;
                assert!(
                    (numeric - analytic).abs() <= tol,
                    "row {i} param {j}: analytic {analytic} vs fd {numeric}"
                );
            }
        }
    }

    #[test]
    fn replay_preserves_inputs_and_retags() {
        let m = model();
        let p = SimParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut src = |_: &EnvState| EnvAction {
            dx: rng.gen_range(-0.02..0.02),
            dy: rng.gen_range(-0.02..0.02),
        };
        let data = rollout(&m, &p, &mut src, centered_state([-0.06, 0.01]), 40);
        let truth = RealProxyConfig::default();
        let re = replay(&m, &truth.params, &data);
        assert_eq!(re.tag, DataTag::Sim);
        assert_eq!(re.len(), data.len());
        for (orig, rep) in data.transitions.iter().zip(re.transitions.iter()) {
            assert_eq!(orig.state, rep.state);
            assert_eq!(orig.action, rep.action);
        }
        // Same params replay reproduces successors bitwise.
        let same = replay(&m, &p, &data);
        for (orig, rep) in data.transitions.iter().zip(same.transitions.iter()) {
            for (x, y) in orig
                .next_state
                .to_array()
                .iter()
                .zip(rep.next_state.to_array().iter())
            {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn zero_noise_proxy_matches_sim_bitwise() {
        let m = model();
        let proxy = RealProxyConfig {
            params: SimParams::default(),
            obs_noise_sigma: 0.0,
        };
        let (s, a) = head_on();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let via_proxy = real_step(&m, &proxy, &s, a, &mut rng);
        let via_sim = step(&m, &proxy.params, &s, a);
        for (x, y) in via_proxy.to_array().iter().zip(via_sim.to_array().iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn proxy_noise_statistics_match_sigma() {
        let m = model();
        let proxy = RealProxyConfig {
            params: SimParams::default(),
            obs_noise_sigma: 1e-3,
        };
        let (s, a) = head_on();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 10_000;
        let samples: Vec<f64> = (0..n)
            .map(|_| real_step(&m, &proxy, &s, a, &mut rng).block_x)
            .collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        let std = var.sqrt();
        assert!(
            (std - 1e-3).abs() / 1e-3 < 0.05,
            "sample std {std} deviates from sigma"
        );
    }

    #[test]
    fn proxy_reproducible_under_fixed_seed() {
        let m = model();
        let proxy = RealProxyConfig::default();
        let (s, a) = head_on();
        let run = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..5)
                .map(|_| real_step(&m, &proxy, &s, a, &mut rng).to_array())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(7), run(7));
        assert_ne!(run(7), run(8));
    }

    #[test]
    fn rollout_chains_states() {
        let m = model();
        let p = SimParams::default();
        let mut src = |_: &EnvState| EnvAction { dx: 0.01, dy: 0.0 };
        let data = rollout(&m, &p, &mut src, centered_state([-0.06, 0.0]), 10);
        assert_eq!(data.len(), 10);
        for w in data.transitions.windows(2) {
            assert_eq!(w[0].next_state, w[1].state);
        }
    }

    #[test]
    fn params_validate_rejects_nonpositive() {
        let mut p = SimParams::default();
        p.block_mass = 0.0;
        assert!(p.validate().is_err());
        let mut p = SimParams::default();
        p.mu_table = f64::NAN;
        assert!(p.validate().is_err());
        assert!(SimParams::default().validate().is_ok());
    }
}
