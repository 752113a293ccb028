//! Kalman controllability, discrete-time LQR and set-point steering
//! `u = M x_des + F x` that brings the plant to designed initial conditions.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::{Dynamics, SystemModel, Trajectory};
use crate::error::{check_dim, Error, Result};
use crate::rng::{noise_rng, NoiseRng};
use crate::sysid::EstimatedModel;
use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SteeringConfig {
    /// State weight; identity when absent.
    pub q: Option<Vec<Vec<f64>>>,
    /// Input weight; identity when absent.
    pub r: Option<Vec<Vec<f64>>>,
    pub arrival_tol: f64,
    pub max_steps: usize,
    pub riccati_tol: f64,
    pub riccati_max_iter: usize,
}

impl Default for SteeringConfig {
    fn default() -> Self {
        Self {
            q: None,
            r: None,
            arrival_tol: 0.01,
            max_steps: 2000,
            riccati_tol: 1e-10,
            riccati_max_iter: 10_000,
        }
    }
}

impl SteeringConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.arrival_tol.is_finite() && self.arrival_tol > 0.0) {
            return Err(Error::InvalidArgument("arrival_tol must be positive".into()));
        }
        if !(self.riccati_tol.is_finite() && self.riccati_tol > 0.0) {
            return Err(Error::InvalidArgument("riccati_tol must be positive".into()));
        }
        Ok(())
    }

    /// The epsilon of epsilon-controllability implied by the arrival tolerance.
    pub fn epsilon(&self) -> f64 {
        self.arrival_tol * self.arrival_tol
    }

    pub fn weights(&self, state_dim: usize, input_dim: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let q = weight(self.q.as_deref(), state_dim, "Q")?;
        let r = weight(self.r.as_deref(), input_dim, "R")?;
        if r.clone().cholesky().is_none() {
            return Err(Error::InvalidArgument("R must be symmetric positive definite".into()));
        }
        if q.symmetric_eigenvalues().iter().any(|e| *e < -1e-12) {
            return Err(Error::InvalidArgument("Q must be positive semidefinite".into()));
        }
        Ok((q, r))
    }
}

fn weight(rows: Option<&[Vec<f64>]>, dim: usize, name: &str) -> Result<DMatrix<f64>> {
    let Some(rows) = rows else {
        return Ok(DMatrix::identity(dim, dim));
    };
    check_dim(&format!("{name} rows"), dim, rows.len())?;
    for row in rows {
        check_dim(&format!("{name} columns"), dim, row.len())?;
    }
    let w = DMatrix::from_fn(dim, dim, |i, j| rows[i][j]);
    if (&w - w.transpose()).amax() > 1e-12 {
        return Err(Error::InvalidArgument(format!("{name} must be symmetric")));
    }
    Ok(w)
}

/// `[B, AB, ..., A^{n-1} B]`.
pub fn controllability_matrix(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let m = b.ncols();
    let mut out = DMatrix::zeros(n, n * m);
    let mut block = b.clone();
    for k in 0..n {
        out.columns_mut(k * m, m).copy_from(&block);
        block = a * block;
    }
    out
}

/// Numerical rank of the controllability matrix and whether it is full.
pub fn controllability_rank(a: &DMatrix<f64>, b: &DMatrix<f64>) -> (usize, bool) {
    let n = a.nrows();
    let c = controllability_matrix(a, b);
    let sv = c.singular_values();
    let max = sv.iter().copied().fold(0.0, f64::max);
    let threshold = n as f64 * max * 1e-12;
    let rank = sv.iter().filter(|s| **s > threshold).count();
    (rank, rank == n)
}

/// Largest eigenvalue modulus.
pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    a.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LqrSolution {
    /// Feedback gain with `u = F x`, so the closed loop is `A + B F`.
    pub gain: DMatrix<f64>,
    /// Stabilizing solution of the discrete algebraic Riccati equation.
    pub cost: DMatrix<f64>,
    pub iterations: usize,
    /// Max-abs change of the Riccati iterate per iteration.
    pub residuals: Vec<f64>,
}

/// One application of the Riccati map `P -> Q + A'PA - A'PB (R + B'PB)^{-1} B'PA`.
pub fn riccati_step(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let at = a.transpose();
    let bt = b.transpose();
    let s_inv = (r + &bt * p * b)
        .try_inverse()
        .ok_or_else(|| Error::Singular("R + B'PB in Riccati iteration".into()))?;
    let pa = p * a;
    let next = q + &at * &pa - (&at * p * b) * s_inv * (&bt * &pa);
    Ok(0.5 * (&next + next.transpose()))
}

/// Infinite-horizon discrete LQR by fixed-point Riccati iteration.
pub fn lqr_gain(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<LqrSolution> {
    let n = a.nrows();
    check_dim("A columns", n, a.ncols())?;
    check_dim("B rows", n, b.nrows())?;
    check_dim("Q", n, q.nrows())?;
    check_dim("R", b.ncols(), r.nrows())?;
    let (rank, controllable) = controllability_rank(a, b);
    if !controllable {
        return Err(Error::NotControllable { rank, state_dim: n });
    }
    let mut p = q.clone();
    let mut residuals = Vec::new();
    for iter in 1..=max_iter {
        let next = riccati_step(a, b, q, r, &p)?;
        let delta = (&next - &p).amax();
        residuals.push(delta);
        p = next;
        if !delta.is_finite() {
            break;
        }
        if delta <= tol * p.amax().max(1.0) {
            let bt = b.transpose();
            let s_inv = (r + &bt * &p * b)
                .try_inverse()
                .ok_or_else(|| Error::Singular("R + B'PB".into()))?;
            let gain = -(s_inv * &bt * &p * a);
            return Ok(LqrSolution {
                gain,
                cost: p,
                iterations: iter,
                residuals,
            });
        }
    }
    Err(Error::RiccatiNoConvergence { iterations: max_iter })
}

/// Feedforward `M = ((I - A_cl)^{-1} B)^{-1}` so that the closed loop's
/// stationary state equals `x_des`. When `B` is not square the pseudo-inverse
/// is used and only the projection of `x_des` onto the reachable set is tracked.
pub fn feedforward_gain(a: &DMatrix<f64>, b: &DMatrix<f64>, gain: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let a_cl = a + b * gain;
    let lhs = DMatrix::identity(n, n) - a_cl;
    let static_gain = lhs
        .lu()
        .solve(b)
        .ok_or_else(|| Error::Singular("I - A_cl".into()))?;
    if static_gain.is_square() {
        static_gain
            .try_inverse()
            .ok_or_else(|| Error::Singular("(I - A_cl)^{-1} B".into()))
    } else {
        static_gain
            .pseudo_inverse(1e-12)
            .map_err(|e| Error::Singular(format!("(I - A_cl)^{{-1}} B: {e}")))
    }
}

/// Gains of the set-point law `u = M x_des + F x`.
#[derive(Debug, Clone, PartialEq)]
pub struct SteeringGains {
    pub feedback: DMatrix<f64>,
    pub feedforward: DMatrix<f64>,
}

impl SteeringGains {
    pub fn from_linear(a: &DMatrix<f64>, b: &DMatrix<f64>, cfg: &SteeringConfig) -> Result<Self> {
        cfg.validate()?;
        let (q, r) = cfg.weights(a.nrows(), b.ncols())?;
        let lqr = lqr_gain(a, b, &q, &r, cfg.riccati_tol, cfg.riccati_max_iter)?;
        let feedforward = feedforward_gain(a, b, &lqr.gain)?;
        Ok(Self {
            feedback: lqr.gain,
            feedforward,
        })
    }

    /// Gains from the fitted model, linearized at `x_des` (exact for linear models).
    pub fn for_target(model: &EstimatedModel, x_des: &[f64], cfg: &SteeringConfig) -> Result<Self> {
        let (a, b) = model.linearize(x_des, &vec![0.0; model.input_dim()]);
        Self::from_linear(&a, &b, cfg)
    }

    pub fn control(&self, x: &[f64], x_des: &[f64]) -> Vec<f64> {
        let x = DVector::from_column_slice(x);
        let xd = DVector::from_column_slice(x_des);
        (&self.feedforward * xd + &self.feedback * x).iter().copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SteeringOutcome {
    pub trajectory: Trajectory,
    pub arrived: bool,
    /// Steps applied before arrival (or the step budget when not arrived).
    pub steps: usize,
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt()
}

/// Core steering loop. Stops at arrival when `fixed_steps` is `None`; otherwise
/// applies exactly `fixed_steps` steps and reports arrival at the end.
pub(crate) fn steer_loop(
    plant: &SystemModel,
    gains: &SteeringGains,
    x_start: &[f64],
    x_des: &[f64],
    tol: f64,
    max_steps: usize,
    fixed_steps: Option<usize>,
    rng: &mut NoiseRng,
) -> SteeringOutcome {
    let n = plant.state_dim();
    let m = plant.input_dim();
    let sigma = plant.noise_std().to_vec();
    let input_box = plant.input_bounds().cloned();
    let state_box = plant.state_bounds().cloned();
    let mut states = vec![x_start.to_vec()];
    let mut inputs: Vec<Vec<f64>> = Vec::new();
    let mut x = x_start.to_vec();
    let mut next = vec![0.0; n];
    let budget = fixed_steps.unwrap_or(max_steps);
    let mut arrived = distance(&x, x_des) < tol;
    let mut escaped = false;
    while inputs.len() < budget && (fixed_steps.is_some() || !arrived) {
        let mut u = gains.control(&x, x_des);
        if let Some(b) = &input_box {
            b.clamp(&mut u);
        }
        plant.step_into(&x, &u, &mut next);
        for (v, s) in next.iter_mut().zip(&sigma) {
            let z: f64 = rng.sample(StandardNormal);
            *v += s * z;
        }
        if next.iter().any(|v| !v.is_finite()) || state_box.as_ref().is_some_and(|b| !b.contains(&next)) {
            escaped = true;
            break;
        }
        x.copy_from_slice(&next);
        inputs.push(u);
        states.push(x.clone());
        arrived = distance(&x, x_des) < tol;
    }
    let steps = inputs.len();
    let trajectory = Trajectory::new(
        DMatrix::from_fn(states.len(), n, |t, i| states[t][i]),
        DMatrix::from_fn(steps, m, |t, j| inputs[t][j]),
    )
    .expect("steering trajectory is finite");
    SteeringOutcome {
        trajectory,
        arrived: arrived && !escaped,
        steps,
    }
}

/// Applies `u = M x_des + F x` (gains from `model`) on the true plant until
/// `|x - x_des|_2 < arrival_tol` or `max_steps` is reached.
pub fn steer_to(
    plant: &SystemModel,
    model: &EstimatedModel,
    x_start: &[f64],
    x_des: &[f64],
    cfg: &SteeringConfig,
    seed: u64,
) -> Result<SteeringOutcome> {
    check_dim("x_start", plant.state_dim(), x_start.len())?;
    check_dim("x_des", plant.state_dim(), x_des.len())?;
    let gains = SteeringGains::for_target(model, x_des, cfg)?;
    let mut rng = noise_rng(seed);
    Ok(steer_loop(plant, &gains, x_start, x_des, cfg.arrival_tol, cfg.max_steps, None, &mut rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{mean_trajectory, LtiModel};
    use crate::sysid::{ExclusionSet, FitOptions, ModelKind};

    fn ab() -> (DMatrix<f64>, DMatrix<f64>) {
        (
            DMatrix::from_row_slice(3, 3, &[0.9, -0.75, 1.2, 0.0, 0.9, -1.1, 0.0, 0.0, 0.7]),
            DMatrix::from_row_slice(3, 3, &[0.03, 0.0, 0.0, 0.0, 0.06, 0.0, 0.07, 0.0, 0.05]),
        )
    }

    fn exact_model(a: &DMatrix<f64>, b: &DMatrix<f64>) -> EstimatedModel {
        let mut w = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
        w.columns_mut(0, a.ncols()).copy_from(a);
        w.columns_mut(a.ncols(), b.ncols()).copy_from(b);
        EstimatedModel::from_parts(
            ModelKind::Linear,
            a.nrows(),
            b.ncols(),
            FitOptions::default(),
            w,
            vec![0.0; a.nrows()],
            ExclusionSet::new(),
        )
        .unwrap()
    }

    #[test]
    fn trivial_controllability_cases() {
        assert_eq!(controllability_rank(&DMatrix::zeros(3, 3), &DMatrix::identity(3, 3)), (3, true));
        assert_eq!(controllability_rank(&DMatrix::identity(3, 3), &DMatrix::zeros(3, 2)), (0, false));
    }

    #[test]
    fn appendix_c_is_controllable_with_rank_three() {
        let (a, b) = ab();
        let c = controllability_matrix(&a, &b);
        assert_eq!(c.shape(), (3, 9));
        assert_eq!(controllability_rank(&a, &b), (3, true));
    }

    #[test]
    fn scalar_deadbeat_lqr() {
        let one = DMatrix::identity(1, 1);
        let sol = lqr_gain(&DMatrix::zeros(1, 1), &one, &one, &one, 1e-10, 100).unwrap();
        assert_eq!(sol.cost[(0, 0)], 1.0);
        assert_eq!(sol.gain[(0, 0)], 0.0);
    }

    #[test]
    fn uncontrollable_lqr_is_an_error() {
        let err = lqr_gain(
            &DMatrix::identity(2, 2),
            &DMatrix::zeros(2, 1),
            &DMatrix::identity(2, 2),
            &DMatrix::identity(1, 1),
            1e-10,
            100,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NotControllable { rank: 0, state_dim: 2 }));
    }

    #[test]
    fn riccati_iteration_budget_is_enforced() {
        let (a, b) = ab();
        let err = lqr_gain(&a, &b, &DMatrix::identity(3, 3), &DMatrix::identity(3, 3), 1e-10, 3).unwrap_err();
        assert!(matches!(err, Error::RiccatiNoConvergence { iterations: 3 }));
    }

    #[test]
    fn appendix_c_closed_loop_is_stable_and_riccati_gap_monotone() {
        let (a, b) = ab();
        let eye = DMatrix::identity(3, 3);
        let sol = lqr_gain(&a, &b, &eye, &eye, 1e-10, 10_000).unwrap();
        assert!(spectral_radius(&(&a + &b * &sol.gain)) < 1.0);
        // the per-step increment oscillates here (complex closed-loop poles), but
        // iterates started at Q rise monotonically towards the fixed point
        let p_star = &sol.cost;
        let mut p = eye.clone();
        let mut gap = (p_star - &p).trace();
        for _ in 0..sol.iterations {
            let next = riccati_step(&a, &b, &eye, &eye, &p).unwrap();
            let rise = (&next - &p).symmetric_eigenvalues().min();
            assert!(rise > -1e-9 * p_star.amax(), "iterate decreased by {rise}");
            let g = (p_star - &next).trace();
            assert!(g <= gap + 1e-9 * p_star.amax() && g > -1e-6, "gap {gap} then {g}");
            gap = g;
            p = next;
        }
        let fixed = riccati_step(&a, &b, &eye, &eye, p_star).unwrap();
        assert!((fixed - p_star).amax() < 1e-6 * p_star.amax());
    }

    #[test]
    fn riccati_increment_monotone_after_ten_iterations_for_real_poles() {
        let a = DMatrix::from_row_slice(2, 2, &[1.1, 0.2, 0.0, 0.8]);
        let b = DMatrix::from_row_slice(2, 1, &[0.5, 1.0]);
        let sol = lqr_gain(&a, &b, &DMatrix::identity(2, 2), &DMatrix::identity(1, 1), 1e-12, 10_000).unwrap();
        for w in sol.residuals[10.min(sol.residuals.len())..].windows(2) {
            assert!(w[1] <= w[0], "{} then {}", w[0], w[1]);
        }
    }

    #[test]
    fn noiseless_closed_loop_converges_to_set_point() {
        let (a, b) = ab();
        let gains = SteeringGains::from_linear(&a, &b, &SteeringConfig::default()).unwrap();
        let x_des = [0.4, -0.7, 0.2];
        let a_cl = &a + &b * &gains.feedback;
        let offset = &b * &gains.feedforward * DVector::from_column_slice(&x_des);
        let mut x = DVector::from_column_slice(&[-1.0, 2.0, 0.5]);
        for _ in 0..500 {
            x = &a_cl * x + &offset;
        }
        assert!((x - DVector::from_column_slice(&x_des)).norm() < 1e-8);
    }

    #[test]
    fn zero_set_point_reduces_to_state_feedback() {
        let (a, b) = ab();
        let gains = SteeringGains::from_linear(&a, &b, &SteeringConfig::default()).unwrap();
        let x = [0.3, 0.1, -0.2];
        let u = gains.control(&x, &[0.0; 3]);
        let fx = &gains.feedback * DVector::from_column_slice(&x);
        assert!(u.iter().zip(fx.iter()).all(|(p, q)| p == q));
    }

    #[test]
    fn steering_arrives_noiseless_and_in_zero_steps_when_already_there() {
        let (a, b) = ab();
        let plant = SystemModel::Lti(LtiModel::new(a.clone(), b.clone(), vec![0.0; 3]).unwrap());
        let model = exact_model(&a, &b);
        let cfg = SteeringConfig::default();
        let out = steer_to(&plant, &model, &[0.0; 3], &[1.0, -1.0, 0.5], &cfg, 1).unwrap();
        assert!(out.arrived);
        assert!(distance(&out.trajectory.final_state(), &[1.0, -1.0, 0.5]) < 0.01);
        let stay = steer_to(&plant, &model, &[1.0, -1.0, 0.5], &[1.0, -1.0, 0.5], &cfg, 1).unwrap();
        assert!(stay.arrived);
        assert_eq!(stay.steps, 0);
        // the recorded inputs replay to the same path
        let replay = mean_trajectory(&plant, &[0.0; 3], out.trajectory.inputs()).unwrap();
        assert!((replay.states() - out.trajectory.states()).amax() < 1e-12);
    }

    #[test]
    fn steering_budget_exhaustion_reports_not_arrived() {
        let (a, b) = ab();
        let plant = SystemModel::Lti(LtiModel::new(a.clone(), b.clone(), vec![0.0; 3]).unwrap());
        let cfg = SteeringConfig { max_steps: 2, ..SteeringConfig::default() };
        let out = steer_to(&plant, &exact_model(&a, &b), &[0.0; 3], &[1.0, 1.0, 1.0], &cfg, 0).unwrap();
        assert!(!out.arrived);
        assert_eq!(out.steps, 2);
    }

    #[test]
    fn non_square_input_uses_pseudo_inverse() {
        // double integrator with one input: only the position set point is reachable
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let gains = SteeringGains::from_linear(&a, &b, &SteeringConfig::default()).unwrap();
        assert_eq!(gains.feedforward.shape(), (1, 2));
    }

    #[test]
    fn equal_length_steering_leaves_other_components_equal_in_distribution() {
        use crate::kernels::{mmd2_unbiased, KernelConfig, SampleSet};
        use crate::rng::{derive_seed, noise_rng};
        let (a, b) = ab();
        let plant = SystemModel::Lti(LtiModel::new(a.clone(), b.clone(), vec![1e-4; 3]).unwrap());
        let gains = SteeringGains::from_linear(&a, &b, &SteeringConfig::default()).unwrap();
        let base = [0.5, -0.3, 0.2];
        let kernel = KernelConfig::default();
        let terminal = |x_des: &[f64], seed: u64, l: usize| -> SampleSet {
            let runs = (0..10)
                .map(|k| {
                    let mut rng = noise_rng(derive_seed(seed, &[k]));
                    let out = steer_loop(&plant, &gains, &[0.0; 3], x_des, 0.01, 2000, Some(600), &mut rng);
                    vec![out.trajectory.final_state()[l]]
                })
                .collect();
            SampleSet::new(runs).unwrap()
        };
        for j in 0..3 {
            let mut other = base;
            other[j] -= 0.8;
            for l in (0..3).filter(|&l| l != j) {
                // null spread: same target, independent noise
                let null: Vec<f64> = (0..30)
                    .map(|r| mmd2_unbiased(&terminal(&base, 100 + r, l), &terminal(&base, 200 + r, l), &kernel).unwrap())
                    .collect();
                let mean = null.iter().sum::<f64>() / null.len() as f64;
                let std = (null.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (null.len() - 1) as f64).sqrt();
                // paired runs share seeds, as in the experiments
                let stat = mmd2_unbiased(&terminal(&base, 7, l), &terminal(&other, 7, l), &kernel).unwrap();
                assert!(stat < mean + std, "j {j} l {l}: {stat:e} vs {:e}", mean + std);
            }
            let moved = mmd2_unbiased(&terminal(&base, 7, j), &terminal(&other, 7, j), &kernel).unwrap();
            assert!(moved > 0.1);
        }
    }
}
