//! Physical parameter identification by gradient descent.
//!
//! The loss is the mean squared successor-state error between recorded real
//! transitions and the simulator's one-step predictions from the same
//! states and actions (teacher forcing), with the yaw residual wrapped and
//! down-weighted into position units. Gradients come from the simulator's
//! forward-mode parameter sensitivities, so they are exact for the
//! integrator as implemented, not a finite-difference estimate.
//!
//! The descent core is generic over the objective: plain gradient steps or
//! Adam, both with projection onto parameter bounds and step-halving
//! backtracking, which makes the recorded loss history monotone
//! non-increasing by construction.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{wrap_angle, Dataset};
use crate::diffsim::dual::N_PARAMS;
use crate::diffsim::{step, step_with_sensitivity, PushModel, SimParams};

/// Weight on the squared wrapped-yaw residual, m^2/rad^2.
pub const W_YAW: f64 = 0.1;

const BACKTRACK_LIMIT: u32 = 20;

#[derive(Debug, Error)]
pub enum TuneError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid tuner config: {0}")]
    BadConfig(String),
    #[error("loss is not finite at the starting point")]
    NonFiniteStart,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    PlainGd,
    Adam,
}

/// Knobs of the descent loop itself, independent of what is optimized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DescentSettings {
    pub learning_rate: f64,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub loss_tol: f64,
    pub optimizer: Optimizer,
}

impl Default for DescentSettings {
    fn default() -> Self {
        DescentSettings {
            learning_rate: 0.05,
            max_iters: 500,
            grad_tol: 1e-6,
            loss_tol: 1e-10,
            optimizer: Optimizer::PlainGd,
        }
    }
}

impl DescentSettings {
    pub fn validate(&self) -> Result<(), TuneError> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(TuneError::BadConfig(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.grad_tol.is_finite() && self.grad_tol > 0.0) {
            return Err(TuneError::BadConfig(format!(
                "grad_tol must be positive, got {}",
                self.grad_tol
            )));
        }
        if !(self.loss_tol.is_finite() && self.loss_tol > 0.0) {
            return Err(TuneError::BadConfig(format!(
                "loss_tol must be positive, got {}",
                self.loss_tol
            )));
        }
        if self.max_iters == 0 {
            return Err(TuneError::BadConfig("max_iters must be >= 1".into()));
        }
        Ok(())
    }
}

/// Full configuration for physical parameter tuning: descent knobs plus the
/// feasible box for each parameter, in storage order
/// [mu_table, mu_contact, block_mass, contact_stiffness].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TunerConfig {
    pub learning_rate: f64,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub loss_tol: f64,
    pub optimizer: Optimizer,
    pub param_bounds: [(f64, f64); N_PARAMS],
}

impl Default for TunerConfig {
    fn default() -> Self {
        let s = DescentSettings::default();
        TunerConfig {
            learning_rate: s.learning_rate,
            max_iters: s.max_iters,
            grad_tol: s.grad_tol,
            loss_tol: s.loss_tol,
            optimizer: s.optimizer,
            param_bounds: [(0.02, 2.0), (0.02, 2.0), (0.01, 3.0), (20.0, 2000.0)],
        }
    }
}

impl TunerConfig {
    pub fn settings(&self) -> DescentSettings {
        DescentSettings {
            learning_rate: self.learning_rate,
            max_iters: self.max_iters,
            grad_tol: self.grad_tol,
            loss_tol: self.loss_tol,
            optimizer: self.optimizer,
        }
    }

    pub fn validate(&self) -> Result<(), TuneError> {
        self.settings().validate()?;
        for (lo, hi) in self.param_bounds {
            if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && lo < hi) {
                return Err(TuneError::BadConfig(format!(
                    "bounds must satisfy 0 < lo < hi, got [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescentReport {
    pub x: Vec<f64>,
    pub loss_history: Vec<f64>,
    pub iterations_used: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneReport {
    pub final_params: SimParams,
    pub loss_history: Vec<f64>,
    pub iterations_used: usize,
    pub converged: bool,
}

fn clamp_to(bounds: &[(f64, f64)], x: &mut [f64]) {
    for (v, (lo, hi)) in x.iter_mut().zip(bounds.iter()) {
        *v = v.clamp(*lo, *hi);
    }
}

/// Projected descent with step-halving backtracking over an arbitrary
/// objective. `grad` returns (loss, gradient) at a point; `eval` returns
/// the loss alone and is used for backtracking probes. Stops when the loss
/// or gradient norm drops below tolerance (converged), when a step cannot
/// decrease the loss within the backtracking budget, or at `max_iters`.
pub fn descend(
    x0: &[f64],
    bounds: &[(f64, f64)],
    settings: &DescentSettings,
    mut eval: impl FnMut(&[f64]) -> f64,
    mut grad: impl FnMut(&[f64]) -> (f64, Vec<f64>),
) -> Result<DescentReport, TuneError> {
    settings.validate()?;
    if x0.len() != bounds.len() {
        return Err(TuneError::BadConfig(format!(
            "{} starting values vs {} bounds",
            x0.len(),
            bounds.len()
        )));
    }
    for (lo, hi) in bounds {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(TuneError::BadConfig(format!(
                "bounds must satisfy lo < hi, got [{lo}, {hi}]"
            )));
        }
    }

    let mut x = x0.to_vec();
    clamp_to(bounds, &mut x);
    let (mut loss, mut g) = grad(&x);
    if !loss.is_finite() {
        return Err(TuneError::NonFiniteStart);
    }
    let mut history = vec![loss];
    let mut converged = false;

    // Adam state; unused under plain gradient steps.
    let mut m = vec![0.0; x.len()];
    let mut v = vec![0.0; x.len()];
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);

    for iter in 1..=settings.max_iters {
        let gnorm = g.iter().map(|d| d * d).sum::<f64>().sqrt();
        if loss <= settings.loss_tol || gnorm <= settings.grad_tol {
            converged = true;
            break;
        }

        let direction: Vec<f64> = match settings.optimizer {
            Optimizer::PlainGd => g.clone(),
            Optimizer::Adam => {
                let t = iter as i32;
                for i in 0..x.len() {
                    m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                    v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                }
                (0..x.len())
                    .map(|i| {
                        let mh = m[i] / (1.0 - b1.powi(t));
                        let vh = v[i] / (1.0 - b2.powi(t));
                        mh / (vh.sqrt() + eps)
                    })
                    .collect()
            }
        };

        let mut scale = settings.learning_rate;
        let mut accepted = None;
        for _ in 0..=BACKTRACK_LIMIT {
            let mut xp: Vec<f64> = x
                .iter()
                .zip(direction.iter())
                .map(|(xi, di)| xi - scale * di)
                .collect();
            clamp_to(bounds, &mut xp);
            let lp = eval(&xp);
            if lp.is_finite() && lp <= loss {
                accepted = Some((xp, lp));
                break;
            }
            scale *= 0.5;
        }
        let Some((xp, _)) = accepted else {
            break;
        };
        x = xp;
        let (l2, g2) = grad(&x);
        loss = l2;
        g = g2;
        history.push(loss);
    }

    let iterations_used = history.len() - 1;
    Ok(DescentReport {
        x,
        loss_history: history,
        iterations_used,
        converged,
    })
}

/// Mean squared successor-state error of the simulator against recorded
/// transitions, with the yaw residual wrapped into (−π, π] and scaled by
/// `W_YAW`.
pub fn physical_loss(
    model: &PushModel,
    params: &SimParams,
    d_real: &Dataset,
) -> Result<f64, TuneError> {
    if d_real.is_empty() {
        return Err(TuneError::EmptyDataset);
    }
    let mut total = 0.0;
    for t in &d_real.transitions {
        let f = step(model, params, &t.state, t.action);
        total += transition_sq_error(&f.to_array(), &t.next_state.to_array());
    }
    Ok(total / d_real.len() as f64)
}

fn transition_sq_error(pred: &[f64; 5], real: &[f64; 5]) -> f64 {
    let mut e = 0.0;
    for i in [0usize, 1, 3, 4] {
        let d = pred[i] - real[i];
        e += d * d;
    }
    let dyaw = wrap_angle(pred[2] - real[2]);
    e + W_YAW * dyaw * dyaw
}

/// Loss together with its exact gradient over the four parameters,
/// assembled from per-transition forward-mode sensitivities in dataset
/// order. The loss value is bit-identical to `physical_loss`.
pub fn physical_loss_grad(
    model: &PushModel,
    params: &SimParams,
    d_real: &Dataset,
) -> Result<(f64, [f64; N_PARAMS]), TuneError> {
    if d_real.is_empty() {
        return Err(TuneError::EmptyDataset);
    }
    let mut total = 0.0;
    let mut grad = [0.0; N_PARAMS];
    for t in &d_real.transitions {
        let (f, sens) = step_with_sensitivity(model, params, &t.state, t.action);
        let pred = f.to_array();
        let real = t.next_state.to_array();
        total += transition_sq_error(&pred, &real);
        for j in 0..N_PARAMS {
            let mut dj = 0.0;
            for i in [0usize, 1, 3, 4] {
                dj += 2.0 * (pred[i] - real[i]) * sens.jacobian[i][j];
            }
            let dyaw = wrap_angle(pred[2] - real[2]);
            dj += 2.0 * W_YAW * dyaw * sens.jacobian[2][j];
            grad[j] += dj;
        }
    }
    let m = d_real.len() as f64;
    for gj in &mut grad {
        *gj /= m;
    }
    Ok((total / m, grad))
}

/// Tunes the physical parameters against recorded real transitions.
pub fn tune(
    model: &PushModel,
    params0: &SimParams,
    d_real: &Dataset,
    cfg: &TunerConfig,
) -> Result<TuneReport, TuneError> {
    cfg.validate()?;
    if d_real.is_empty() {
        return Err(TuneError::EmptyDataset);
    }
    let report = descend(
        &params0.to_array(),
        &cfg.param_bounds,
        &cfg.settings(),
        |x| {
            physical_loss(model, &SimParams::from_array(x.try_into().unwrap()), d_real)
                .expect("nonempty checked above")
        },
        |x| {
            let (l, g) =
                physical_loss_grad(model, &SimParams::from_array(x.try_into().unwrap()), d_real)
                    .expect("nonempty checked above");
            (l, g.to_vec())
        },
    )?;
    Ok(TuneReport {
        final_params: SimParams::from_array(report.x.as_slice().try_into().unwrap()),
        loss_history: report.loss_history,
        iterations_used: report.iterations_used,
        converged: report.converged,
    })
}
