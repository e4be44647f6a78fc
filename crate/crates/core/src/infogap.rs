//! Gap-scaled exploration bonus.
//!
//! One scalar, the gap coefficient, measures how far the latest real-world
//! transition data sits from what the pre-tuning simulator predicted for the
//! same states and actions (mean per-coordinate KL between successor-state
//! densities). A per-transition informativeness score measures how much a
//! single new transition would shift the tuned simulator's successor
//! distribution (Wasserstein distance between the baseline sample set and
//! the same set with the probe inserted). Their product, scaled by
//! `lambda_sr`, is an intrinsic reward: large when the simulator is wrong
//! *and* the transition explores states the simulator has not produced, and
//! identically zero once the gap has closed.
//!
//! Both factors are frozen when the context is built and never change
//! during a training phase.

use thiserror::Error;

use crate::dataset::{Dataset, StateCoord, Transition};
use crate::density::{
    kl_between_samples_1d, wasserstein_insert_sorted, DensityError, KdeModel,
};

#[derive(Debug, Error)]
pub enum GapError {
    #[error("dataset is empty: {0}")]
    EmptyDataset(&'static str),
    #[error("no coordinates selected")]
    NoCoordinates,
    #[error("invalid weight: {0}")]
    InvalidWeight(String),
    #[error(transparent)]
    Density(#[from] DensityError),
}

/// Mean over the selected coordinates of the KL divergence from the real
/// successor-state density to the simulated one. Nonnegative; near zero
/// when the simulator replays the real data accurately.
pub fn gap_coefficient(
    d_real: &Dataset,
    d_sim_prev: &Dataset,
    coordinates: &[StateCoord],
) -> Result<f64, GapError> {
    if d_real.is_empty() {
        return Err(GapError::EmptyDataset("d_real"));
    }
    if d_sim_prev.is_empty() {
        return Err(GapError::EmptyDataset("d_sim_prev"));
    }
    if coordinates.is_empty() {
        return Err(GapError::NoCoordinates);
    }
    let mut total = 0.0;
    for &c in coordinates {
        let real = d_real.marginal_column(c);
        let sim = d_sim_prev.marginal_column(c);
        total += kl_between_samples_1d(&real, &sim)?;
    }
    Ok(total / coordinates.len() as f64)
}

/// Frozen per-iteration context for the intrinsic reward: the gap
/// coefficient, the tuned simulator's successor marginals (both as a fitted
/// density and as per-coordinate sorted samples for fast augmented-set
/// evaluation), and the reward weight.
#[derive(Debug, Clone)]
pub struct GapContext {
    gap_coeff: f64,
    lambda_sr: f64,
    /// Wasserstein order for the informativeness factor.
    beta: f64,
    coordinates: Vec<StateCoord>,
    sim_baseline: KdeModel,
    /// Per selected coordinate, ascending successor-state samples.
    sorted_samples: Vec<Vec<f64>>,
}

impl GapContext {
    /// Builds the context from the current real dataset, the pre-tuning
    /// replay (for the gap factor), and the post-tuning replay (the
    /// baseline the policy is rewarded for escaping).
    pub fn from_datasets(
        d_real: &Dataset,
        d_sim_prev: &Dataset,
        d_sim_current: &Dataset,
        coordinates: &[StateCoord],
        lambda_sr: f64,
        beta: f64,
    ) -> Result<GapContext, GapError> {
        let gap_coeff = gap_coefficient(d_real, d_sim_prev, coordinates)?;
        GapContext::with_gap(gap_coeff, d_sim_current, coordinates, lambda_sr, beta)
    }

    /// Builds the context around an externally computed gap coefficient.
    pub fn with_gap(
        gap_coeff: f64,
        d_sim_current: &Dataset,
        coordinates: &[StateCoord],
        lambda_sr: f64,
        beta: f64,
    ) -> Result<GapContext, GapError> {
        if d_sim_current.is_empty() {
            return Err(GapError::EmptyDataset("d_sim_current"));
        }
        if coordinates.is_empty() {
            return Err(GapError::NoCoordinates);
        }
        if !(gap_coeff.is_finite() && gap_coeff >= 0.0) {
            return Err(GapError::InvalidWeight(format!(
                "gap_coeff must be nonnegative, got {gap_coeff}"
            )));
        }
        if !(lambda_sr.is_finite() && lambda_sr >= 0.0) {
            return Err(GapError::InvalidWeight(format!(
                "lambda_sr must be nonnegative, got {lambda_sr}"
            )));
        }
        if !(beta.is_finite() && beta >= 1.0) {
            return Err(GapError::InvalidWeight(format!(
                "beta must be >= 1, got {beta}"
            )));
        }
        let matrix = d_sim_current.marginal(coordinates);
        let sim_baseline = KdeModel::fit(&matrix, None)?;
        let sorted_samples = (0..coordinates.len())
            .map(|c| {
                let mut col: Vec<f64> = matrix.iter().map(|row| row[c]).collect();
                col.sort_by(|a, b| a.partial_cmp(b).unwrap());
                col
            })
            .collect();
        Ok(GapContext {
            gap_coeff,
            lambda_sr,
            beta,
            coordinates: coordinates.to_vec(),
            sim_baseline,
            sorted_samples,
        })
    }

    pub fn gap_coeff(&self) -> f64 {
        self.gap_coeff
    }

    pub fn lambda_sr(&self) -> f64 {
        self.lambda_sr
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn coordinates(&self) -> &[StateCoord] {
        &self.coordinates
    }

    pub fn sim_baseline(&self) -> &KdeModel {
        &self.sim_baseline
    }

    /// How much this transition's successor state would shift the baseline
    /// distribution: mean over coordinates of the Wasserstein distance
    /// between the baseline and the baseline with the probe inserted.
    pub fn informativeness_one(&self, t: &Transition) -> f64 {
        let mut total = 0.0;
        for (c, sorted) in self.coordinates.iter().zip(self.sorted_samples.iter()) {
            let probe = t.next_state.coord(*c);
            total += wasserstein_insert_sorted(sorted, probe, self.beta)
                .expect("baseline nonempty by construction");
        }
        total / self.coordinates.len() as f64
    }

    /// Per-transition informativeness, order-aligned with the batch.
    pub fn informativeness(&self, batch: &[Transition]) -> Vec<f64> {
        batch.iter().map(|t| self.informativeness_one(t)).collect()
    }

    /// Gap-scaled batch loss for a trainer that minimizes: always ≤ 0, more
    /// negative for batches that explore beyond the baseline.
    pub fn infogap_loss(&self, batch: &[Transition]) -> f64 {
        if batch.is_empty() {
            return 0.0;
        }
        let mean =
            self.informativeness(batch).iter().sum::<f64>() / batch.len() as f64;
        -self.gap_coeff * mean * self.lambda_sr
    }

    /// Reward-form adapter: the per-step bonus a reward-maximizing trainer
    /// adds to the task reward. Equals `-infogap_loss` over the singleton
    /// batch; ≥ 0.
    pub fn intrinsic_reward(&self, t: &Transition) -> f64 {
        self.gap_coeff * self.informativeness_one(t) * self.lambda_sr
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{DataTag, EnvAction, EnvState};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn state_with_x(x: f64) -> EnvState {
        EnvState {
            block_x: x,
            block_y: 0.0,
            block_yaw: 0.0,
            effector_x: 0.0,
            effector_y: 0.0,
        }
    }

    fn transition_to(x: f64, y: f64) -> Transition {
        Transition {
            state: state_with_x(0.0),
            action: EnvAction { dx: 0.0, dy: 0.0 },
            next_state: EnvState {
                block_x: x,
                block_y: y,
                block_yaw: 0.0,
                effector_x: 0.0,
                effector_y: 0.0,
            },
        }
    }

    fn dataset_from_x(values: &[f64], tag: DataTag) -> Dataset {
        let transitions = values
            .iter()
            .map(|&x| Transition {
                state: state_with_x(0.0),
                action: EnvAction { dx: 0.0, dy: 0.0 },
                next_state: state_with_x(x),
            })
            .collect();
        Dataset {
            tag,
            iteration: 1,
            transitions,
        }
    }

    fn normal_samples(rng: &mut ChaCha8Rng, n: usize, mean: f64, std: f64) -> Vec<f64> {
        (0..n)
            .map(|_| {
                let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                let u2: f64 = rng.gen_range(0.0..1.0);
                mean + std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
            })
            .collect()
    }

    /// Exact W1 between two empirical distributions by integrating the
    /// absolute CDF difference over the merged support (piecewise constant
    /// between consecutive points), independent of the quantile-walk code.
    fn cdf_w1(a: &[f64], b: &[f64]) -> f64 {
        let mut pts: Vec<f64> = a.iter().chain(b.iter()).copied().collect();
        pts.sort_by(|x, y| x.partial_cmp(y).unwrap());
        pts.dedup();
        let cdf = |s: &[f64], x: f64| s.iter().filter(|v| **v <= x).count() as f64 / s.len() as f64;
        let mut total = 0.0;
        for w in pts.windows(2) {
            total += (cdf(a, w[0]) - cdf(b, w[0])).abs() * (w[1] - w[0]);
        }
        total
    }

    fn ctx_from_x(baseline_x: &[f64], gap: f64, lambda: f64) -> GapContext {
        let sim = dataset_from_x(baseline_x, DataTag::Sim);
        GapContext::with_gap(gap, &sim, &[StateCoord::BlockX], lambda, 1.0).unwrap()
    }

    #[test]
    fn gap_vanishes_on_identical_data() {
        let xs: Vec<f64> = (0..60).map(|i| 0.01 * i as f64).collect();
        let real = dataset_from_x(&xs, DataTag::Real);
        let sim = dataset_from_x(&xs, DataTag::Sim);
        let g = gap_coefficient(&real, &sim, &[StateCoord::BlockX]).unwrap();
        assert!(g.abs() <= 1e-6, "gap = {g}");
    }

    #[test]
    fn gap_matches_gaussian_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let real = dataset_from_x(&normal_samples(&mut rng, 5000, 0.0, 1.0), DataTag::Real);
        let sim = dataset_from_x(&normal_samples(&mut rng, 5000, 1.0, 1.0), DataTag::Sim);
        let g = gap_coefficient(&real, &sim, &[StateCoord::BlockX]).unwrap();
        assert!((g - 0.5).abs() <= 0.1, "gap = {g}");
    }

    #[test]
    fn gap_is_order_free() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs = normal_samples(&mut rng, 200, 0.0, 1.0);
        let ys = normal_samples(&mut rng, 200, 0.4, 1.3);
        let real = dataset_from_x(&xs, DataTag::Real);
        let sim = dataset_from_x(&ys, DataTag::Sim);
        let g1 = gap_coefficient(&real, &sim, &[StateCoord::BlockX]).unwrap();
        let mut xs_rev = xs.clone();
        xs_rev.reverse();
        let mut ys_rev = ys.clone();
        ys_rev.reverse();
        let real_rev = dataset_from_x(&xs_rev, DataTag::Real);
        let sim_rev = dataset_from_x(&ys_rev, DataTag::Sim);
        let g2 = gap_coefficient(&real_rev, &sim_rev, &[StateCoord::BlockX]).unwrap();
        // Order-free up to float summation associativity.
        assert!((g1 - g2).abs() <= 1e-12 * g1.abs().max(1.0), "{g1} vs {g2}");
    }

    #[test]
    fn gap_rejects_empty_inputs() {
        let xs = dataset_from_x(&[0.1, 0.2], DataTag::Real);
        let empty = Dataset::new(DataTag::Sim, 1);
        assert!(gap_coefficient(&xs, &empty, &[StateCoord::BlockX]).is_err());
        assert!(gap_coefficient(&empty, &xs, &[StateCoord::BlockX]).is_err());
        assert!(gap_coefficient(&xs, &xs, &[]).is_err());
    }

    #[test]
    fn duplicate_probe_matches_cdf_oracle_at_small_n() {
        let baseline = [0.05, -0.2, 0.3, 0.11, -0.07, 0.18, 0.0];
        let ctx = ctx_from_x(&baseline, 1.0, 1.0);
        // Probe equal to an existing sample: still generally nonzero.
        let probe = transition_to(0.11, 0.0);
        let got = ctx.informativeness_one(&probe);
        let mut augmented = baseline.to_vec();
        augmented.push(0.11);
        let want = cdf_w1(&augmented, &baseline);
        assert!((got - want).abs() <= 1e-12, "got {got}, want {want}");
        assert!(got > 0.0);
    }

    #[test]
    fn random_probes_match_cdf_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let baseline = normal_samples(&mut rng, 7, 0.0, 0.5);
        let ctx = ctx_from_x(&baseline, 1.0, 1.0);
        for _ in 0..50 {
            let x = rng.gen_range(-2.0..2.0);
            let got = ctx.informativeness_one(&transition_to(x, 0.0));
            let mut augmented = baseline.to_vec();
            augmented.push(x);
            let want = cdf_w1(&augmented, &baseline);
            assert!(
                (got - want).abs() <= 1e-12,
                "probe {x}: got {got}, want {want}"
            );
        }
    }

    #[test]
    fn outlier_more_informative_than_mean_probe() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let baseline = normal_samples(&mut rng, 300, 0.2, 0.05);
        let mean = baseline.iter().sum::<f64>() / baseline.len() as f64;
        let std = (baseline.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / (baseline.len() - 1) as f64)
            .sqrt();
        let ctx = ctx_from_x(&baseline, 1.0, 1.0);
        let near = ctx.informativeness_one(&transition_to(mean, 0.0));
        let far = ctx.informativeness_one(&transition_to(mean + 10.0 * std, 0.0));
        assert!(far > near, "far {far} <= near {near}");
    }

    #[test]
    fn informativeness_monotone_along_escape_ray() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let baseline = normal_samples(&mut rng, 200, -0.1, 0.3);
        let mean = baseline.iter().sum::<f64>() / baseline.len() as f64;
        let ctx = ctx_from_x(&baseline, 1.0, 1.0);
        let mut prev = -1.0;
        for k in 0..20 {
            let x = mean + 0.25 * k as f64;
            let v = ctx.informativeness_one(&transition_to(x, 0.0));
            assert!(
                v >= prev - 1e-12,
                "radius {k}: {v} < previous {prev}"
            );
            prev = v;
        }
    }

    #[test]
    fn batch_shape_and_order_alignment() {
        let ctx = ctx_from_x(&[0.0, 0.1, 0.2, 0.3], 1.0, 1.0);
        let batch: Vec<Transition> = [-0.5, 0.15, 0.9]
            .iter()
            .map(|&x| transition_to(x, 0.0))
            .collect();
        let vals = ctx.informativeness(&batch);
        assert_eq!(vals.len(), 3);
        for (t, v) in batch.iter().zip(vals.iter()) {
            assert_eq!(*v, ctx.informativeness_one(t));
            assert!(*v >= 0.0);
        }
    }

    #[test]
    fn loss_is_nonpositive_product() {
        let ctx = ctx_from_x(&[0.0, 0.1, 0.2, 0.35, 0.6], 2.0, 1.0);
        let batch: Vec<Transition> = [-0.4, 0.2, 1.1, 0.05]
            .iter()
            .map(|&x| transition_to(x, 0.0))
            .collect();
        let loss = ctx.infogap_loss(&batch);
        assert!(loss <= 0.0);
        let mean = ctx.informativeness(&batch).iter().sum::<f64>() / batch.len() as f64;
        assert_eq!(loss, -2.0 * mean);
    }

    #[test]
    fn zero_gap_annihilates_loss_and_reward() {
        let ctx = ctx_from_x(&[0.0, 0.1, 0.2], 0.0, 1.0);
        let batch: Vec<Transition> = [(-3.0), 5.0].iter().map(|&x| transition_to(x, 0.0)).collect();
        assert_eq!(ctx.infogap_loss(&batch), 0.0);
        assert_eq!(ctx.intrinsic_reward(&batch[0]), 0.0);
    }

    #[test]
    fn doubling_gap_doubles_loss() {
        let batch: Vec<Transition> = [0.5, -0.2, 0.9]
            .iter()
            .map(|&x| transition_to(x, 0.0))
            .collect();
        let l1 = ctx_from_x(&[0.0, 0.1, 0.2], 1.3, 1.0).infogap_loss(&batch);
        let l2 = ctx_from_x(&[0.0, 0.1, 0.2], 2.6, 1.0).infogap_loss(&batch);
        assert!((l2 - 2.0 * l1).abs() <= 1e-15);
    }

    #[test]
    fn reward_equals_negated_singleton_loss() {
        let ctx = ctx_from_x(&[0.0, 0.05, 0.3, 0.4], 1.7, 0.8);
        for &x in &[-1.0, 0.02, 0.31, 2.5] {
            let t = transition_to(x, 0.0);
            let r = ctx.intrinsic_reward(&t);
            assert_eq!(r, -ctx.infogap_loss(std::slice::from_ref(&t)));
            assert!(r >= 0.0);
        }
    }

    #[test]
    fn context_is_frozen_across_evaluations() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let baseline = normal_samples(&mut rng, 50, 0.0, 1.0);
        let ctx = ctx_from_x(&baseline, 1.5, 1.0);
        let gap_before = ctx.gap_coeff().to_bits();
        let kde_before = format!("{:?}", ctx.sim_baseline());
        for k in 0..10 {
            let t = transition_to(k as f64 * 0.3, 0.0);
            let _ = ctx.intrinsic_reward(&t);
        }
        assert_eq!(ctx.gap_coeff().to_bits(), gap_before);
        assert_eq!(format!("{:?}", ctx.sim_baseline()), kde_before);
    }

    #[test]
    fn multi_coordinate_informativeness_averages() {
        let sim = Dataset {
            tag: DataTag::Sim,
            iteration: 1,
            transitions: [(0.0, 0.0), (0.1, 0.2), (0.2, 0.4), (0.3, 0.1)]
                .iter()
                .map(|&(x, y)| transition_to(x, y))
                .collect(),
        };
        let coords = [StateCoord::BlockX, StateCoord::BlockY];
        let ctx = GapContext::with_gap(1.0, &sim, &coords, 1.0, 1.0).unwrap();
        let probe = transition_to(0.5, -0.3);
        let got = ctx.informativeness_one(&probe);
        let xs = [0.0, 0.1, 0.2, 0.3];
        let ys = [0.0, 0.2, 0.4, 0.1];
        let mut ax = xs.to_vec();
        ax.push(0.5);
        let mut ay = ys.to_vec();
        ay.push(-0.3);
        let want = 0.5 * (cdf_w1(&ax, &xs) + cdf_w1(&ay, &ys));
        assert!((got - want).abs() <= 1e-12);
    }

    #[test]
    fn rejects_bad_weights_and_empty_baseline() {
        let sim = dataset_from_x(&[0.1, 0.2], DataTag::Sim);
        let coords = [StateCoord::BlockX];
        assert!(GapContext::with_gap(-0.1, &sim, &coords, 1.0, 1.0).is_err());
        assert!(GapContext::with_gap(1.0, &sim, &coords, -1.0, 1.0).is_err());
        assert!(GapContext::with_gap(1.0, &sim, &coords, 1.0, 0.5).is_err());
        let empty = Dataset::new(DataTag::Sim, 1);
        assert!(GapContext::with_gap(1.0, &empty, &coords, 1.0, 1.0).is_err());
    }
}
