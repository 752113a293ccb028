//! Paired experiments on the plant, the Monte-Carlo test statistic, and the
//! identification loop that turns verdicts into a causal graph and a refined model.

use std::collections::BTreeSet;

use log::{debug, info, warn};
use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::{steer_loop, SteeringConfig, SteeringGains};
use crate::dynamics::{chirp_signal, simulate_with_rng, Dynamics, SystemModel, Trajectory, TrajectoryBatch};
use crate::error::{check_dim, Error, Result};
use crate::expdesign::{
    design_input_experiment, design_state_experiment, noise_floor, DesignConfig, DesignOutcome, DesignSpace,
    ExperimentSpec,
};
use crate::kernels::{embed, mmd2_unbiased, KernelConfig, SampleSet};
use crate::rng::{derive_seed, noise_rng};
use crate::sysid::{cut_everywhere, fit, one_based, predict, EstimatedModel, Exclusion, ExclusionSet, FitOptions, ModelKind, PredictMode, Source};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TestConfig {
    pub nu: f64,
    pub mc_runs: usize,
    pub steering_attempts: usize,
}

impl Default for TestConfig {
    fn default() -> Self {
        Self {
            nu: 1.0,
            mc_runs: 100,
            steering_attempts: 3,
        }
    }
}

impl TestConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.nu.is_finite() && self.nu >= 0.0) {
            return Err(Error::InvalidArgument(format!("nu must be finite and >= 0, got {}", self.nu)));
        }
        if self.mc_runs < 2 {
            return Err(Error::InvalidArgument("mc_runs must be >= 2".into()));
        }
        if self.steering_attempts == 0 {
            return Err(Error::InvalidArgument("steering_attempts must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Decision {
    NonCausal,
    Causal,
}

/// Outcome of one hypothesis test `source -> target`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub source: Source,
    #[serde(with = "one_based")]
    pub target: usize,
    pub mmd2_empirical: f64,
    pub threshold: f64,
    pub mc_mean: f64,
    pub mc_std: f64,
    pub nu: f64,
    pub decision: Decision,
    pub subtract_initial: bool,
    /// Noiseless predicted MMD of the designed experiment for this target.
    pub predicted_mmd: Option<f64>,
    /// Tested although the prediction was not above delta2.
    pub forced: bool,
    /// Chebyshev lower bound `1 - 1/nu^2` on accepting a true null; only for `nu > 1`.
    pub chebyshev_bound: Option<f64>,
    pub repetitions: usize,
    pub horizon: usize,
    pub spec_id: String,
    pub experiment_seed: u64,
    pub mc_seed: u64,
}

impl TestResult {
    /// The decision implied by the stored statistic and threshold.
    pub fn recomputed_decision(&self) -> Decision {
        if self.mmd2_empirical < self.threshold {
            Decision::NonCausal
        } else {
            Decision::Causal
        }
    }
}

/// A source whose tests could not be completed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairFailure {
    pub source: Source,
    #[serde(serialize_with = "targets_ser", deserialize_with = "targets_de")]
    pub targets: Vec<usize>,
    pub message: String,
}

fn targets_ser<S: serde::Serializer>(t: &[usize], s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_seq(t.iter().map(|i| format!("x{}", i + 1)))
}

fn targets_de<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Vec<usize>, D::Error> {
    let names = Vec::<String>::deserialize(d)?;
    names
        .iter()
        .map(|s| {
            s.strip_prefix('x')
                .and_then(|i| i.parse::<usize>().ok())
                .filter(|i| *i > 0)
                .map(|i| i - 1)
                .ok_or_else(|| serde::de::Error::custom(format!("bad target `{s}`")))
        })
        .collect()
}

/// Boolean influence matrices indexed `[source][target]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalGraph {
    pub state_dim: usize,
    pub input_dim: usize,
    pub state_influence: Vec<Vec<bool>>,
    pub input_influence: Vec<Vec<bool>>,
    pub evidence: Vec<TestResult>,
    pub failures: Vec<PairFailure>,
}

/// One disagreement between two graphs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EdgeMismatch {
    pub source: Source,
    pub target: usize,
    pub expected: bool,
    pub found: bool,
}

impl std::fmt::Display for EdgeMismatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let verdict = |b: bool| if b { "causal" } else { "non-causal" };
        write!(
            f,
            "{} -> x{}: expected {}, found {}",
            self.source,
            self.target + 1,
            verdict(self.expected),
            verdict(self.found)
        )
    }
}

impl CausalGraph {
    /// Every pair causal and no evidence.
    pub fn fully_connected(state_dim: usize, input_dim: usize) -> Self {
        Self {
            state_dim,
            input_dim,
            state_influence: vec![vec![true; state_dim]; state_dim],
            input_influence: vec![vec![true; state_dim]; input_dim],
            evidence: Vec::new(),
            failures: Vec::new(),
        }
    }

    pub fn sources(&self) -> Vec<Source> {
        (0..self.state_dim)
            .map(Source::State)
            .chain((0..self.input_dim).map(Source::Input))
            .collect()
    }

    pub fn is_causal(&self, source: Source, target: usize) -> bool {
        match source {
            Source::State(j) => self.state_influence[j][target],
            Source::Input(j) => self.input_influence[j][target],
        }
    }

    pub fn set(&mut self, source: Source, target: usize, causal: bool) {
        match source {
            Source::State(j) => self.state_influence[j][target] = causal,
            Source::Input(j) => self.input_influence[j][target] = causal,
        }
    }

    pub fn non_causal_pairs(&self) -> Vec<(Source, usize)> {
        let mut out = Vec::new();
        for s in self.sources() {
            for i in 0..self.state_dim {
                if !self.is_causal(s, i) {
                    out.push((s, i));
                }
            }
        }
        out
    }

    /// Exclusions a model consistent with this graph carries.
    pub fn exclusions(&self) -> ExclusionSet {
        self.non_causal_pairs().into_iter().map(|(s, i)| Exclusion::new(i, s)).collect()
    }

    /// Edge-wise comparison with `expected`.
    pub fn diff(&self, expected: &CausalGraph) -> Result<Vec<EdgeMismatch>> {
        check_dim("graph state dimension", expected.state_dim, self.state_dim)?;
        check_dim("graph input dimension", expected.input_dim, self.input_dim)?;
        let mut out = Vec::new();
        for s in self.sources() {
            for i in 0..self.state_dim {
                let (e, f) = (expected.is_causal(s, i), self.is_causal(s, i));
                if e != f {
                    out.push(EdgeMismatch {
                        source: s,
                        target: i,
                        expected: e,
                        found: f,
                    });
                }
            }
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        check_dim("state_influence rows", self.state_dim, self.state_influence.len())?;
        check_dim("input_influence rows", self.input_dim, self.input_influence.len())?;
        for row in self.state_influence.iter().chain(&self.input_influence) {
            check_dim("influence row length", self.state_dim, row.len())?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let g: Self = serde_json::from_str(text)?;
        g.validate()?;
        Ok(g)
    }
}

fn nonzero_pattern(m: &DMatrix<f64>) -> Vec<Vec<bool>> {
    let scale = m.amax().max(f64::MIN_POSITIVE);
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)].abs() > 1e-12 * scale).collect())
        .collect()
}

/// Ground truth for an LTI plant over horizon `horizon`: `x_j -> x_i` iff
/// `(A^t)_{ij} != 0` for some `1 <= t <= horizon` (`(A^t - I)_{ii}` for self
/// pairs, which are tested on increments); `u_j -> x_i` iff
/// `(A^k B)_{ij} != 0` for some `0 <= k < horizon`. Entries are compared with
/// a tolerance of 1e-12 relative to the largest entry of each power.
pub fn ground_truth(a: &DMatrix<f64>, b: &DMatrix<f64>, horizon: usize) -> Result<CausalGraph> {
    let n = a.nrows();
    check_dim("A columns", n, a.ncols())?;
    check_dim("B rows", n, b.nrows())?;
    let m = b.ncols();
    let mut g = CausalGraph::fully_connected(n, m);
    for row in g.state_influence.iter_mut().chain(g.input_influence.iter_mut()) {
        row.iter_mut().for_each(|v| *v = false);
    }
    let eye = DMatrix::<f64>::identity(n, n);
    let mut power = eye.clone();
    for _ in 0..horizon {
        // input paths use A^k B with k = t - 1
        let ab = nonzero_pattern(&(&power * b));
        power = &power * a;
        let p = nonzero_pattern(&power);
        let self_moves = nonzero_pattern(&(&power - &eye));
        for i in 0..n {
            for j in 0..n {
                let hit = if i == j { self_moves[i][i] } else { p[i][j] };
                g.state_influence[j][i] |= hit;
            }
            for j in 0..m {
                g.input_influence[j][i] |= ab[i][j];
            }
        }
    }
    Ok(g)
}

/// Trajectories of one designed experiment on the plant.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentData {
    pub arms: [TrajectoryBatch; 2],
    /// Steering steps applied before each repetition (equal for both arms).
    pub steering_steps: Vec<usize>,
    /// Seed attempt used per repetition.
    pub attempts: Vec<usize>,
}

impl ExperimentData {
    pub fn achieved_x0(&self, arm: usize) -> Vec<Vec<f64>> {
        self.arms[arm].initial_states()
    }
}

/// Steers the plant to each arm's initial state and applies the arm's inputs,
/// `spec.repetitions()` times.
///
/// Both arms of a repetition start from `rest`, are steered with the same
/// noise seed, and are run for the same number of steering steps (the longer
/// of the two arrival times), after which arrival is re-checked. The noise
/// stream then continues through the experiment, so the two arms of one
/// repetition see identical noise. Failed repetitions are retried with fresh
/// seeds up to `attempts` times.
pub fn run_experiment(
    plant: &SystemModel,
    model: &EstimatedModel,
    spec: &ExperimentSpec,
    steer_cfg: &SteeringConfig,
    rest: &[f64],
    attempts: usize,
    seed: u64,
) -> Result<ExperimentData> {
    spec.validate()?;
    steer_cfg.validate()?;
    check_dim("spec state dimension", plant.state_dim(), spec.state_dim())?;
    check_dim("spec input dimension", plant.input_dim(), spec.input_dim())?;
    check_dim("rest state", plant.state_dim(), rest.len())?;
    let gains = [
        SteeringGains::for_target(model, spec.x0(0), steer_cfg)?,
        SteeringGains::for_target(model, spec.x0(1), steer_cfg)?,
    ];
    let reps: Vec<(Trajectory, Trajectory, usize, usize)> = (0..spec.repetitions())
        .into_par_iter()
        .map(|k| run_repetition(plant, spec, &gains, steer_cfg, rest, attempts, seed, k))
        .collect::<Result<Vec<_>>>()?;
    let mut arm_i = Vec::with_capacity(reps.len());
    let mut arm_ii = Vec::with_capacity(reps.len());
    let mut steps = Vec::with_capacity(reps.len());
    let mut used = Vec::with_capacity(reps.len());
    for (a, b, s, u) in reps {
        arm_i.push(a);
        arm_ii.push(b);
        steps.push(s);
        used.push(u);
    }
    Ok(ExperimentData {
        arms: [
            TrajectoryBatch::new(arm_i, format!("{}/I", spec.id()))?,
            TrajectoryBatch::new(arm_ii, format!("{}/II", spec.id()))?,
        ],
        steering_steps: steps,
        attempts: used,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_repetition(
    plant: &SystemModel,
    spec: &ExperimentSpec,
    gains: &[SteeringGains; 2],
    cfg: &SteeringConfig,
    rest: &[f64],
    attempts: usize,
    seed: u64,
    k: usize,
) -> Result<(Trajectory, Trajectory, usize, usize)> {
    let mut failed_arm = 0;
    for attempt in 0..attempts {
        let s = derive_seed(seed, &[k as u64, attempt as u64]);
        let probe: Vec<_> = (0..2)
            .map(|arm| {
                let mut rng = noise_rng(s);
                steer_loop(plant, &gains[arm], rest, spec.x0(arm), cfg.arrival_tol, cfg.max_steps, None, &mut rng)
            })
            .collect();
        if let Some(arm) = probe.iter().position(|o| !o.arrived) {
            failed_arm = arm;
            debug!("{} rep {k} attempt {attempt}: arm {arm} did not arrive", spec.id());
            continue;
        }
        let steps = probe[0].steps.max(probe[1].steps);
        let mut runs = Vec::with_capacity(2);
        for arm in 0..2 {
            let mut rng = noise_rng(s);
            let steer = steer_loop(plant, &gains[arm], rest, spec.x0(arm), cfg.arrival_tol, cfg.max_steps, Some(steps), &mut rng);
            if !steer.arrived {
                failed_arm = arm;
                break;
            }
            let traj = simulate_with_rng(plant, &steer.trajectory.final_state(), spec.inputs(arm), &mut rng)?;
            if traj.is_truncated() {
                failed_arm = arm;
                break;
            }
            runs.push(traj);
        }
        if runs.len() == 2 {
            let b = runs.pop().expect("two runs");
            let a = runs.pop().expect("two runs");
            return Ok((a, b, steps, attempt));
        }
    }
    Err(Error::SteeringFailure {
        arm: if failed_arm == 0 { "I".into() } else { "II".into() },
        repetition: k,
        attempts,
    })
}

/// Statistic of the acceptance test for one target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Threshold {
    pub mc_mean: f64,
    pub mc_std: f64,
    pub nu: f64,
    pub threshold: f64,
}

fn model_component(traj: &Trajectory, i: usize, subtract_initial: bool) -> Vec<f64> {
    let mut v = traj.component(i);
    if subtract_initial {
        let x0 = v[0];
        v.iter_mut().for_each(|x| *x -= x0);
    }
    v
}

fn model_batch(
    model: &EstimatedModel,
    x0s: &[Vec<f64>],
    inputs: &DMatrix<f64>,
    target: usize,
    subtract_initial: bool,
    seeds: Option<&dyn Fn(usize) -> u64>,
) -> Result<SampleSet> {
    let mut samples = Vec::with_capacity(x0s.len());
    for (k, x0) in x0s.iter().enumerate() {
        let mode = match seeds {
            Some(f) => PredictMode::Sampled(f(k)),
            None => PredictMode::Noiseless,
        };
        let traj = predict(model, x0, inputs, mode)?;
        if traj.is_truncated() {
            return Err(Error::NonFinite(format!("null-model rollout for target x{}", target + 1)));
        }
        samples.push(model_component(&traj, target, subtract_initial));
    }
    SampleSet::new(samples)
}

/// `threshold = mc_mean + nu * mc_std` where `mc_mean` is the MMD between
/// noiseless `model_ind` rollouts from the achieved initial states and
/// `mc_std` the standard deviation over `mc_runs` sampled rollout pairs.
#[allow(clippy::too_many_arguments)]
pub fn test_threshold(
    model_ind: &EstimatedModel,
    data: &ExperimentData,
    spec: &ExperimentSpec,
    target: usize,
    nu: f64,
    mc_runs: usize,
    subtract_initial: bool,
    kernel: &KernelConfig,
    seed: u64,
) -> Result<Threshold> {
    if mc_runs < 2 {
        return Err(Error::InvalidArgument("mc_runs must be >= 2".into()));
    }
    if target >= model_ind.state_dim() {
        return Err(Error::InvalidArgument(format!("target x{} out of range", target + 1)));
    }
    let x0 = [data.achieved_x0(0), data.achieved_x0(1)];
    let mean_x = model_batch(model_ind, &x0[0], spec.inputs(0), target, subtract_initial, None)?;
    let mean_y = model_batch(model_ind, &x0[1], spec.inputs(1), target, subtract_initial, None)?;
    let mc_mean = mmd2_unbiased(&mean_x, &mean_y, kernel)?;
    let samples: Vec<f64> = (0..mc_runs)
        .into_par_iter()
        .map(|r| {
            let arm_seed = |arm: u64| move |k: usize| derive_seed(seed, &[r as u64, arm, k as u64]);
            let (s0, s1) = (arm_seed(0), arm_seed(1));
            let x = model_batch(model_ind, &x0[0], spec.inputs(0), target, subtract_initial, Some(&s0))?;
            let y = model_batch(model_ind, &x0[1], spec.inputs(1), target, subtract_initial, Some(&s1))?;
            mmd2_unbiased(&x, &y, kernel)
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = samples.iter().sum::<f64>() / mc_runs as f64;
    let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (mc_runs - 1) as f64;
    let mc_std = var.sqrt();
    Ok(Threshold {
        mc_mean,
        mc_std,
        nu,
        threshold: mc_mean + nu * mc_std,
    })
}

/// Empirical MMD of the two arms' `target` trajectories against the threshold.
/// Self-influence tests always compare increments from the initial state.
pub fn decide(
    data: &ExperimentData,
    spec: &ExperimentSpec,
    target: usize,
    threshold: &Threshold,
    subtract_initial: bool,
    kernel: &KernelConfig,
) -> Result<TestResult> {
    let source = spec.source();
    let subtract_initial = subtract_initial || source == Source::State(target);
    let x = embed(&data.arms[0], target, subtract_initial)?;
    let y = embed(&data.arms[1], target, subtract_initial)?;
    let mmd2_empirical = mmd2_unbiased(&x, &y, kernel)?;
    let decision = if mmd2_empirical < threshold.threshold {
        Decision::NonCausal
    } else {
        Decision::Causal
    };
    Ok(TestResult {
        source,
        target,
        mmd2_empirical,
        threshold: threshold.threshold,
        mc_mean: threshold.mc_mean,
        mc_std: threshold.mc_std,
        nu: threshold.nu,
        decision,
        subtract_initial,
        predicted_mmd: None,
        forced: false,
        chebyshev_bound: (threshold.nu > 1.0).then(|| 1.0 - 1.0 / (threshold.nu * threshold.nu)),
        repetitions: spec.repetitions(),
        horizon: spec.horizon(),
        spec_id: spec.id(),
        experiment_seed: 0,
        mc_seed: 0,
    })
}

/// How the plant is excited for the initial black-box fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Excitation {
    /// One multi-channel chirp from the rest state; `amplitude` is a fraction
    /// of each input channel's half-width.
    Chirp {
        #[serde(default = "default_steps")]
        steps: usize,
        #[serde(default = "one")]
        amplitude: f64,
        #[serde(default = "default_f0")]
        f0: f64,
        #[serde(default = "default_f1")]
        f1: f64,
    },
    /// Many short runs from uniform initial states in the design box with
    /// uniform random inputs in the input box.
    RandomSegments { segments: usize, steps: usize },
}

fn default_steps() -> usize {
    3000
}
fn one() -> f64 {
    1.0
}
fn default_f0() -> f64 {
    0.01
}
fn default_f1() -> f64 {
    0.2
}

impl Default for Excitation {
    fn default() -> Self {
        Excitation::Chirp {
            steps: default_steps(),
            amplitude: 1.0,
            f0: default_f0(),
            f1: default_f1(),
        }
    }
}

impl Excitation {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Excitation::Chirp { steps, amplitude, f0, f1 } => {
                if steps == 0 || !(amplitude.is_finite() && amplitude > 0.0) {
                    return Err(Error::InvalidArgument("chirp excitation needs steps >= 1 and amplitude > 0".into()));
                }
                for f in [f0, f1] {
                    if !(f > 0.0 && f < 0.5) {
                        return Err(Error::InvalidArgument(format!("chirp frequency {f} outside (0, 0.5)")));
                    }
                }
            }
            Excitation::RandomSegments { segments, steps } => {
                if segments == 0 || steps == 0 {
                    return Err(Error::InvalidArgument("random_segments needs segments >= 1 and steps >= 1".into()));
                }
            }
        }
        Ok(())
    }

    /// Collects excitation data from the plant.
    pub fn collect(&self, plant: &SystemModel, space: &DesignSpace, rest: &[f64], seed: u64) -> Result<Vec<Trajectory>> {
        self.validate()?;
        let input = &space.input;
        let m = plant.input_dim();
        match *self {
            Excitation::Chirp { steps, amplitude, f0, f1 } => {
                let chirp = chirp_signal(steps, 1.0, f0, f1, m)?;
                let center = input.center();
                let u = DMatrix::from_fn(steps, m, |t, j| center[j] + amplitude * input.half_width(j) * chirp[(t, j)]);
                let mut rng = noise_rng(seed);
                Ok(vec![simulate_with_rng(plant, rest, &u, &mut rng)?])
            }
            Excitation::RandomSegments { segments, steps } => {
                let mut picker = noise_rng(derive_seed(seed, &[0]));
                let mut out = Vec::with_capacity(segments);
                for k in 0..segments {
                    let x0: Vec<f64> = (0..space.state.dim())
                        .map(|i| picker.random_range(space.state.lower[i]..=space.state.upper[i]))
                        .collect();
                    let u = DMatrix::from_fn(steps, m, |_, j| picker.random_range(input.lower[j]..=input.upper[j]));
                    let mut rng = noise_rng(derive_seed(seed, &[1, k as u64]));
                    let traj = simulate_with_rng(plant, &x0, &u, &mut rng)?;
                    if traj.horizon() > 0 {
                        out.push(traj);
                    }
                }
                Ok(out)
            }
        }
    }
}

/// Everything the identification loop needs besides the plant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentifyConfig {
    #[serde(default)]
    pub excitation: Excitation,
    #[serde(default = "linear_kind")]
    pub model_kind: ModelKind,
    #[serde(default)]
    pub fit: FitOptions,
    pub space: DesignSpace,
    #[serde(default)]
    pub design: DesignConfig,
    #[serde(default)]
    pub kernel: KernelConfig,
    #[serde(default)]
    pub steering: SteeringConfig,
    #[serde(default)]
    pub test: TestConfig,
    /// Where every steering manoeuvre and the chirp excitation start; the
    /// centre of the design box when absent.
    #[serde(default)]
    pub rest_state: Option<Vec<f64>>,
}

fn linear_kind() -> ModelKind {
    ModelKind::Linear
}

impl IdentifyConfig {
    pub fn new(space: DesignSpace) -> Self {
        Self {
            excitation: Excitation::default(),
            model_kind: ModelKind::Linear,
            fit: FitOptions::default(),
            space,
            design: DesignConfig::default(),
            kernel: KernelConfig::default(),
            steering: SteeringConfig::default(),
            test: TestConfig::default(),
            rest_state: None,
        }
    }

    pub fn validate(&self, state_dim: usize, input_dim: usize) -> Result<()> {
        self.excitation.validate()?;
        self.space.validate(state_dim, input_dim)?;
        self.design.validate()?;
        self.kernel.validate()?;
        self.steering.validate()?;
        self.steering.weights(state_dim, input_dim)?;
        self.test.validate()?;
        if let Some(r) = &self.rest_state {
            check_dim("rest_state", state_dim, r.len())?;
            crate::error::check_finite("rest_state", r.iter())?;
        }
        if !(self.fit.ridge.is_finite() && self.fit.ridge >= 0.0) {
            return Err(Error::InvalidArgument("ridge must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn rest(&self) -> Vec<f64> {
        self.rest_state.clone().unwrap_or_else(|| self.space.state.center())
    }
}

/// One designed experiment and the targets tested on it.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentRecord {
    pub design: DesignOutcome,
    pub data: ExperimentData,
    pub tested: Vec<usize>,
    pub forced: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Identification {
    pub graph: CausalGraph,
    pub model_init: EstimatedModel,
    pub model_caus: EstimatedModel,
    pub excitation: Vec<Trajectory>,
    pub experiments: Vec<ExperimentRecord>,
    pub noise_floor: f64,
    pub delta1: f64,
    pub delta2: f64,
}

const TAG_EXCITE: u64 = 1;
const TAG_FLOOR: u64 = 2;
const TAG_DESIGN: u64 = 3;
const TAG_RUN: u64 = 4;
const TAG_MC: u64 = 5;

fn source_tag(s: Source) -> u64 {
    match s {
        Source::State(j) => j as u64,
        Source::Input(j) => (1 << 32) + j as u64,
    }
}

/// Excites and fits the plant, then tests every source against every target.
///
/// For each source (states first, then inputs) the still-pending targets get
/// one designed experiment per round. Targets whose predicted MMD exceeds
/// delta2 are tested; when none does, all pending targets are tested (and
/// flagged as forced). A non-causal verdict adds the `(target, source)`
/// exclusion to the model, which is refitted and used from then on.
/// Failures of a source leave its untested pairs causal and are recorded.
pub fn identify_structure(plant: &SystemModel, cfg: &IdentifyConfig, master_seed: u64) -> Result<Identification> {
    let (n, m) = (plant.state_dim(), plant.input_dim());
    cfg.validate(n, m)?;
    let rest = cfg.rest();
    let excitation = cfg.excitation.collect(plant, &cfg.space, &rest, derive_seed(master_seed, &[TAG_EXCITE]))?;
    let mut exclusions = ExclusionSet::new();
    let model_init = fit(&excitation, cfg.model_kind, &exclusions, &cfg.fit)?;
    let mut model = model_init.clone();
    let floor = noise_floor(&model, &cfg.space, &cfg.design, &cfg.kernel, derive_seed(master_seed, &[TAG_FLOOR]))?;
    let (delta1, delta2) = cfg.design.thresholds(floor);
    info!("noise floor {floor:.3e}, delta1 {delta1:.3e}, delta2 {delta2:.3e}");

    let mut graph = CausalGraph::fully_connected(n, m);
    let mut experiments = Vec::new();
    for source in graph.sources() {
        let mut pending: BTreeSet<usize> = (0..n).collect();
        let mut round = 0u64;
        while !pending.is_empty() {
            let targets: Vec<usize> = pending.iter().copied().collect();
            let tag = [source_tag(source), round];
            let design_seed = derive_seed(master_seed, &[TAG_DESIGN, tag[0], tag[1]]);
            let designed = match source {
                Source::State(j) => design_state_experiment(&model, j, &targets, &cfg.space, &cfg.design, &cfg.kernel, delta1, design_seed),
                Source::Input(j) => design_input_experiment(&model, j, &targets, &cfg.space, &cfg.design, &cfg.kernel, delta1, design_seed),
            };
            let design = match designed {
                Ok(d) => d,
                Err(e) => {
                    warn!("design for {source} failed: {e}");
                    graph.failures.push(PairFailure { source, targets, message: e.to_string() });
                    break;
                }
            };
            let mut relevant: Vec<usize> = targets.iter().copied().filter(|&i| design.prediction(i).unwrap_or(0.0) > delta2).collect();
            let forced = relevant.is_empty();
            if forced {
                relevant = targets.clone();
            }
            let run_seed = derive_seed(master_seed, &[TAG_RUN, tag[0], tag[1]]);
            let data = match run_experiment(plant, &model, &design.spec, &cfg.steering, &rest, cfg.test.steering_attempts, run_seed) {
                Ok(d) => d,
                Err(e) => {
                    warn!("experiment for {source} failed: {e}");
                    graph.failures.push(PairFailure { source, targets, message: e.to_string() });
                    break;
                }
            };
            let mut null_ex = exclusions.clone();
            null_ex.extend(cut_everywhere(n, source));
            // process noise belongs to the plant: keep the current model's estimate
            // instead of the restricted fit's, whose residuals absorb the cut effect
            let model_ind = fit(&excitation, cfg.model_kind, &null_ex, &cfg.fit)?
                .with_noise_std_hat(model.noise_std_hat().to_vec())?;
            for &i in &relevant {
                let sub = design.spec.subtract_initial(i);
                let mc_seed = derive_seed(master_seed, &[TAG_MC, tag[0], tag[1], i as u64]);
                let thr = test_threshold(&model_ind, &data, &design.spec, i, cfg.test.nu, cfg.test.mc_runs, sub, &cfg.kernel, mc_seed)?;
                let mut result = decide(&data, &design.spec, i, &thr, sub, &cfg.kernel)?;
                result.predicted_mmd = design.prediction(i);
                result.forced = forced;
                result.experiment_seed = run_seed;
                result.mc_seed = mc_seed;
                debug!(
                    "{source} -> x{}: mmd2 {:.3e} threshold {:.3e} {:?}",
                    i + 1,
                    result.mmd2_empirical,
                    result.threshold,
                    result.decision
                );
                if result.decision == Decision::NonCausal {
                    exclusions.insert(Exclusion::new(i, source));
                    model = fit(&excitation, cfg.model_kind, &exclusions, &cfg.fit)?;
                    graph.set(source, i, false);
                }
                graph.evidence.push(result);
                pending.remove(&i);
            }
            experiments.push(ExperimentRecord {
                design,
                data,
                tested: relevant,
                forced,
            });
            round += 1;
        }
    }
    Ok(Identification {
        graph,
        model_init,
        model_caus: model,
        excitation,
        experiments,
        noise_floor: floor,
        delta1,
        delta2,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationReport {
    #[serde(with = "one_based")]
    pub target: usize,
    pub rmse_init: f64,
    pub rmse_caus: f64,
}

/// Noiseless-prediction RMSE over steps `1..=T` of both models against held-out runs.
pub fn generalization_report(
    model_init: &EstimatedModel,
    model_caus: &EstimatedModel,
    held_out: &TrajectoryBatch,
    target: usize,
) -> Result<GeneralizationReport> {
    if target >= held_out.state_dim() {
        return Err(Error::InvalidArgument(format!("target x{} out of range", target + 1)));
    }
    let rmse = |model: &EstimatedModel| -> Result<f64> {
        let mut sq = 0.0;
        let mut count = 0usize;
        for run in held_out.runs() {
            let pred = predict(model, &run.initial_state(), run.inputs(), PredictMode::Noiseless)?;
            if pred.is_truncated() {
                return Ok(f64::INFINITY);
            }
            for t in 1..=run.horizon() {
                sq += (pred.states()[(t, target)] - run.states()[(t, target)]).powi(2);
                count += 1;
            }
        }
        Ok(if count == 0 { 0.0 } else { (sq / count as f64).sqrt() })
    };
    Ok(GeneralizationReport {
        target,
        rmse_init: rmse(model_init)?,
        rmse_caus: rmse(model_caus)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{BoxBounds, LtiModel};

    fn appendix_c(sigma: f64) -> SystemModel {
        let a = DMatrix::from_row_slice(3, 3, &[0.9, -0.75, 1.2, 0.0, 0.9, -1.1, 0.0, 0.0, 0.7]);
        let b = DMatrix::from_row_slice(3, 3, &[0.03, 0.0, 0.0, 0.0, 0.06, 0.0, 0.07, 0.0, 0.05]);
        SystemModel::Lti(LtiModel::new(a, b, vec![sigma; 3]).unwrap())
    }

    fn exact(plant: &SystemModel, sigma: f64) -> EstimatedModel {
        let lti = plant.as_lti().unwrap();
        let (n, m) = (lti.a().nrows(), lti.b().ncols());
        let mut w = DMatrix::zeros(n, n + m);
        w.columns_mut(0, n).copy_from(lti.a());
        w.columns_mut(n, m).copy_from(lti.b());
        EstimatedModel::from_parts(ModelKind::Linear, n, m, FitOptions::default(), w, vec![sigma; n], ExclusionSet::new()).unwrap()
    }

    fn space() -> DesignSpace {
        DesignSpace {
            state: BoxBounds::symmetric(3, 1.0),
            input: BoxBounds::symmetric(3, 1.0),
        }
    }

    fn short_state_spec(j: usize) -> ExperimentSpec {
        ExperimentSpec::state_test(j, &[0.0; 3], 1.0, -1.0, DMatrix::zeros(30, 3), 4).unwrap()
    }

    #[test]
    fn ground_truth_of_appendix_c() {
        let lti = appendix_c(0.0);
        let lti = lti.as_lti().unwrap();
        let g = ground_truth(lti.a(), lti.b(), 100).unwrap();
        let mut non: Vec<String> = g.non_causal_pairs().iter().map(|(s, i)| format!("{s}->x{}", i + 1)).collect();
        non.sort();
        assert_eq!(non, vec!["u2->x3", "x1->x2", "x1->x3", "x2->x3"]);
    }

    #[test]
    fn ground_truth_of_integrators_and_zero_plant() {
        let b = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![0.013, 0.007, 0.01, 0.01]));
        let g = ground_truth(&DMatrix::identity(4, 4), &b, 100).unwrap();
        assert!(g.state_influence.iter().flatten().all(|v| !v));
        for j in 0..4 {
            for i in 0..4 {
                assert_eq!(g.input_influence[j][i], i == j);
            }
        }
        // zero A: the state is reset every step, so each state "moves" itself
        let z = ground_truth(&DMatrix::zeros(2, 2), &DMatrix::from_row_slice(2, 1, &[1.0, 0.0]), 10).unwrap();
        assert_eq!(z.state_influence, vec![vec![true, false], vec![false, true]]);
        assert_eq!(z.input_influence, vec![vec![true, false]]);
    }

    #[test]
    fn noiseless_experiment_reaches_its_initial_states() {
        let plant = appendix_c(0.0);
        let model = exact(&plant, 0.0);
        let spec = short_state_spec(2);
        let data = run_experiment(&plant, &model, &spec, &SteeringConfig::default(), &[0.0; 3], 3, 5).unwrap();
        for arm in 0..2 {
            for x0 in data.achieved_x0(arm) {
                let d: f64 = x0.iter().zip(spec.x0(arm)).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                assert!(d < 0.01);
            }
            assert_eq!(data.arms[arm].len(), 4);
            assert_eq!(data.arms[arm].horizon(), 30);
        }
    }

    #[test]
    fn paired_arms_share_noise() {
        // u-test with identical channel values is invalid, so use a state test
        // whose varied state cannot reach x3: the x3 paths coincide exactly
        let plant = appendix_c(1e-3);
        let model = exact(&plant, 1e-3);
        let spec = short_state_spec(0);
        let data = run_experiment(&plant, &model, &spec, &SteeringConfig::default(), &[0.0; 3], 3, 9).unwrap();
        let x = embed(&data.arms[0], 2, false).unwrap();
        let y = embed(&data.arms[1], 2, false).unwrap();
        assert_eq!(data.steering_steps.len(), 4);
        let mmd = mmd2_unbiased(&x, &y, &KernelConfig::default()).unwrap();
        assert!(mmd.abs() < 1e-3, "{mmd}");
    }

    #[test]
    fn threshold_is_zero_without_noise_or_mismatch() {
        let plant = appendix_c(0.0);
        let spec = short_state_spec(0);
        // both arms achieved the very same initial state
        let runs: Vec<Trajectory> = (0..4)
            .map(|_| crate::dynamics::mean_trajectory(&plant, &[0.2, -0.1, 0.4], spec.inputs(0)).unwrap())
            .collect();
        let data = ExperimentData {
            arms: [TrajectoryBatch::new(runs.clone(), "I").unwrap(), TrajectoryBatch::new(runs, "II").unwrap()],
            steering_steps: vec![0; 4],
            attempts: vec![0; 4],
        };
        let model_ind = fit(&[plant_chirp(&plant)], ModelKind::Linear, &cut_everywhere(3, Source::State(0)), &FitOptions::default())
            .unwrap()
            .with_noise_std_hat(vec![0.0; 3])
            .unwrap();
        let k = KernelConfig::default();
        let thr = test_threshold(&model_ind, &data, &spec, 2, 1.0, 5, false, &k, 0).unwrap();
        assert_eq!((thr.mc_mean, thr.mc_std, thr.threshold), (0.0, 0.0, 0.0));
        let nu0 = test_threshold(&model_ind, &data, &spec, 2, 0.0, 5, false, &k, 0).unwrap();
        assert_eq!(nu0.threshold, nu0.mc_mean);
        assert!(test_threshold(&model_ind, &data, &spec, 2, 1.0, 1, false, &k, 0).is_err());
    }

    fn plant_chirp(plant: &SystemModel) -> Trajectory {
        Excitation::default().collect(plant, &space(), &[0.0; 3], 1).unwrap().remove(0)
    }

    #[test]
    fn negative_statistic_is_non_causal() {
        let plant = appendix_c(1e-3);
        let model = exact(&plant, 1e-3);
        let spec = short_state_spec(0);
        let data = run_experiment(&plant, &model, &spec, &SteeringConfig::default(), &[0.0; 3], 3, 4).unwrap();
        let thr = Threshold {
            mc_mean: 0.0,
            mc_std: 1e-9,
            nu: 2.0,
            threshold: 2e-9,
        };
        let r = decide(&data, &spec, 2, &thr, false, &KernelConfig::default()).unwrap();
        assert_eq!(r.recomputed_decision(), r.decision);
        assert_eq!(r.chebyshev_bound, Some(0.75));
        if r.mmd2_empirical < 0.0 {
            assert_eq!(r.decision, Decision::NonCausal);
        }
        let self_test = decide(&data, &spec, 0, &thr, false, &KernelConfig::default()).unwrap();
        assert!(self_test.subtract_initial);
        assert_eq!(self_test.decision, Decision::Causal);
    }

    #[test]
    fn identification_of_a_scalar_integrator() {
        let plant = SystemModel::Lti(LtiModel::new(DMatrix::identity(1, 1), DMatrix::identity(1, 1), vec![1e-3]).unwrap());
        let mut cfg = IdentifyConfig::new(DesignSpace {
            state: BoxBounds::symmetric(1, 1.0),
            input: BoxBounds::symmetric(1, 0.1),
        });
        cfg.excitation = Excitation::Chirp { steps: 300, amplitude: 1.0, f0: 0.01, f1: 0.2 };
        cfg.design.horizon = 30;
        cfg.test.mc_runs = 30;
        let id = identify_structure(&plant, &cfg, 3).unwrap();
        // the integrator keeps its state: the self test on increments is non-causal
        assert_eq!(id.graph.state_influence, vec![vec![false]]);
        assert_eq!(id.graph.input_influence, vec![vec![true]]);
        assert_eq!(id.model_caus.exclusions(), &id.graph.exclusions());
        assert!(id.graph.evidence.iter().all(|r| r.recomputed_decision() == r.decision));
    }

    #[test]
    fn generalization_of_identical_models_is_equal() {
        let plant = appendix_c(1e-4);
        let model = exact(&plant, 1e-4);
        let runs = vec![plant_chirp(&plant); 2];
        let batch = TrajectoryBatch::new(runs, "held").unwrap();
        let r = generalization_report(&model, &model, &batch, 1).unwrap();
        assert_eq!(r.rmse_init, r.rmse_caus);
    }

    #[test]
    fn graph_json_round_trip_and_diff() {
        let lti = appendix_c(0.0);
        let lti = lti.as_lti().unwrap();
        let g = ground_truth(lti.a(), lti.b(), 100).unwrap();
        let back = CausalGraph::from_json(&g.to_json().unwrap()).unwrap();
        assert_eq!(back, g);
        let mut flipped = g.clone();
        flipped.set(Source::Input(1), 2, true);
        let d = flipped.diff(&g).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].to_string(), "u2 -> x3: expected non-causal, found causal");
    }
}
