//! Paired experiment templates and their design by maximizing the
//! model-predicted MMD between the two arms.

use log::info;
use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{chirp_signal, BoxBounds, Dynamics, Trajectory};
use crate::error::{check_dim, check_finite, Error, Result};
use crate::kernels::{gaussian_kernel, mmd2_unbiased, KernelConfig, SampleSet};
use crate::rng::{derive_seed, noise_rng, NoiseRng};
use crate::sysid::{predict, EstimatedModel, PredictMode, Source};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    StateTest,
    InputTest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputClass {
    #[default]
    Constant,
    Chirp,
    PiecewiseConstant,
}

/// Which coordinates are shared (bitwise copies) between the two arms.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TiedEntries {
    pub states: Vec<usize>,
    pub input_channels: Vec<usize>,
}

/// A paired experiment: arm I and arm II differ only in the varied source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SpecDocument", into = "SpecDocument")]
pub struct ExperimentSpec {
    kind: ExperimentKind,
    varied_index: usize,
    repetitions: usize,
    x0_i: Vec<f64>,
    x0_ii: Vec<f64>,
    inputs_i: DMatrix<f64>,
    inputs_ii: DMatrix<f64>,
    tied: TiedEntries,
}

#[derive(Serialize, Deserialize)]
struct SpecDocument {
    kind: ExperimentKind,
    source: Source,
    horizon: usize,
    repetitions: usize,
    #[serde(rename = "x0_I")]
    x0_i: Vec<f64>,
    #[serde(rename = "x0_II")]
    x0_ii: Vec<f64>,
    #[serde(rename = "inputs_I")]
    inputs_i: Vec<Vec<f64>>,
    #[serde(rename = "inputs_II")]
    inputs_ii: Vec<Vec<f64>>,
    tied: TiedEntries,
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|t| m.row(t).iter().copied().collect()).collect()
}

fn matrix_from_rows(rows: &[Vec<f64>], cols: usize) -> Result<DMatrix<f64>> {
    for r in rows {
        check_dim("input row length", cols, r.len())?;
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |t, j| rows[t][j]))
}

impl From<ExperimentSpec> for SpecDocument {
    fn from(s: ExperimentSpec) -> Self {
        SpecDocument {
            kind: s.kind,
            source: s.source(),
            horizon: s.horizon(),
            repetitions: s.repetitions,
            x0_i: s.x0_i.clone(),
            x0_ii: s.x0_ii.clone(),
            inputs_i: rows_of(&s.inputs_i),
            inputs_ii: rows_of(&s.inputs_ii),
            tied: s.tied,
        }
    }
}

impl TryFrom<SpecDocument> for ExperimentSpec {
    type Error = Error;

    fn try_from(d: SpecDocument) -> Result<Self> {
        let expected = match d.kind {
            ExperimentKind::StateTest => d.source.is_state(),
            ExperimentKind::InputTest => !d.source.is_state(),
        };
        if !expected {
            return Err(Error::InvalidArgument(format!("source {} does not match experiment kind", d.source)));
        }
        let cols = d.inputs_i.first().map_or(0, Vec::len);
        let spec = ExperimentSpec {
            kind: d.kind,
            varied_index: d.source.index(),
            repetitions: d.repetitions,
            inputs_i: matrix_from_rows(&d.inputs_i, cols)?,
            inputs_ii: matrix_from_rows(&d.inputs_ii, cols)?,
            x0_i: d.x0_i,
            x0_ii: d.x0_ii,
            tied: d.tied,
        };
        check_dim("horizon", d.horizon, spec.inputs_i.nrows())?;
        spec.validate()?;
        Ok(spec)
    }
}

impl ExperimentSpec {
    /// State test on `x_j`: entry `j` of the two initial states differs, every
    /// other entry and the whole input trajectory are shared.
    pub fn state_test(
        j: usize,
        shared_x0: &[f64],
        xj_i: f64,
        xj_ii: f64,
        inputs: DMatrix<f64>,
        repetitions: usize,
    ) -> Result<Self> {
        if j >= shared_x0.len() {
            return Err(Error::InvalidArgument(format!("state index {j} out of range")));
        }
        let mut x0_i = shared_x0.to_vec();
        let mut x0_ii = shared_x0.to_vec();
        x0_i[j] = xj_i;
        x0_ii[j] = xj_ii;
        let tied = TiedEntries {
            states: (0..shared_x0.len()).filter(|&l| l != j).collect(),
            input_channels: (0..inputs.ncols()).collect(),
        };
        let spec = Self {
            kind: ExperimentKind::StateTest,
            varied_index: j,
            repetitions,
            x0_i,
            x0_ii,
            inputs_ii: inputs.clone(),
            inputs_i: inputs,
            tied,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Input test on `u_j`: identical initial states, channel `j` of the two
    /// arms is `shared[:, j] + profile` and `shared[:, j] - profile`.
    pub fn input_test(j: usize, x0: &[f64], shared: &DMatrix<f64>, profile: &[f64], repetitions: usize) -> Result<Self> {
        if j >= shared.ncols() {
            return Err(Error::InvalidArgument(format!("input index {j} out of range")));
        }
        check_dim("input profile", shared.nrows(), profile.len())?;
        let mut inputs_i = shared.clone();
        let mut inputs_ii = shared.clone();
        for (t, p) in profile.iter().enumerate() {
            inputs_i[(t, j)] = shared[(t, j)] + p;
            inputs_ii[(t, j)] = shared[(t, j)] - p;
        }
        let spec = Self {
            kind: ExperimentKind::InputTest,
            varied_index: j,
            repetitions,
            x0_i: x0.to_vec(),
            x0_ii: x0.to_vec(),
            inputs_i,
            inputs_ii,
            tied: TiedEntries {
                states: (0..x0.len()).collect(),
                input_channels: (0..shared.ncols()).filter(|&l| l != j).collect(),
            },
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Checks shapes, finiteness and the tying constraints bitwise.
    pub fn validate(&self) -> Result<()> {
        let n = self.x0_i.len();
        check_dim("x0_II", n, self.x0_ii.len())?;
        check_dim("inputs_II rows", self.inputs_i.nrows(), self.inputs_ii.nrows())?;
        check_dim("inputs_II columns", self.inputs_i.ncols(), self.inputs_ii.ncols())?;
        check_finite("x0", self.x0_i.iter().chain(&self.x0_ii))?;
        check_finite("inputs", self.inputs_i.iter().chain(self.inputs_ii.iter()))?;
        if self.horizon() == 0 {
            return Err(Error::InvalidArgument("experiment horizon must be at least 1".into()));
        }
        if self.repetitions < 2 {
            return Err(Error::InvalidArgument("experiments need at least 2 repetitions".into()));
        }
        let j = self.varied_index;
        let same = |a: f64, b: f64| a.to_bits() == b.to_bits();
        match self.kind {
            ExperimentKind::StateTest => {
                if j >= n {
                    return Err(Error::InvalidArgument(format!("state index {j} out of range")));
                }
                if (0..n).any(|l| l != j && !same(self.x0_i[l], self.x0_ii[l])) {
                    return Err(Error::InvalidArgument("state test arms differ outside the varied state".into()));
                }
                if self.x0_i[j] == self.x0_ii[j] {
                    return Err(Error::InvalidArgument("state test arms share the varied state".into()));
                }
                if self.inputs_i.iter().zip(self.inputs_ii.iter()).any(|(a, b)| !same(*a, *b)) {
                    return Err(Error::InvalidArgument("state test arms must share inputs".into()));
                }
            }
            ExperimentKind::InputTest => {
                if j >= self.inputs_i.ncols() {
                    return Err(Error::InvalidArgument(format!("input index {j} out of range")));
                }
                if (0..n).any(|l| !same(self.x0_i[l], self.x0_ii[l])) {
                    return Err(Error::InvalidArgument("input test arms must share x0".into()));
                }
                for t in 0..self.horizon() {
                    for l in 0..self.inputs_i.ncols() {
                        let (a, b) = (self.inputs_i[(t, l)], self.inputs_ii[(t, l)]);
                        if l == j && a == b {
                            return Err(Error::InvalidArgument(format!(
                                "input test arms coincide on the varied channel at step {t}"
                            )));
                        }
                        if l != j && !same(a, b) {
                            return Err(Error::InvalidArgument("input test arms differ outside the varied channel".into()));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn kind(&self) -> ExperimentKind {
        self.kind
    }

    pub fn source(&self) -> Source {
        match self.kind {
            ExperimentKind::StateTest => Source::State(self.varied_index),
            ExperimentKind::InputTest => Source::Input(self.varied_index),
        }
    }

    pub fn varied_index(&self) -> usize {
        self.varied_index
    }

    pub fn horizon(&self) -> usize {
        self.inputs_i.nrows()
    }

    pub fn repetitions(&self) -> usize {
        self.repetitions
    }

    pub fn state_dim(&self) -> usize {
        self.x0_i.len()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs_i.ncols()
    }

    /// Initial state of arm I (`arm == 0`) or arm II.
    pub fn x0(&self, arm: usize) -> &[f64] {
        if arm == 0 {
            &self.x0_i
        } else {
            &self.x0_ii
        }
    }

    pub fn inputs(&self, arm: usize) -> &DMatrix<f64> {
        if arm == 0 {
            &self.inputs_i
        } else {
            &self.inputs_ii
        }
    }

    pub fn tied(&self) -> &TiedEntries {
        &self.tied
    }

    pub fn with_repetitions(mut self, repetitions: usize) -> Result<Self> {
        self.repetitions = repetitions;
        self.validate()?;
        Ok(self)
    }

    /// Whether a test of `target` against this experiment compares increments
    /// from the initial state (self-influence tests).
    pub fn subtract_initial(&self, target: usize) -> bool {
        self.kind == ExperimentKind::StateTest && self.varied_index == target
    }

    pub fn id(&self) -> String {
        let kind = match self.kind {
            ExperimentKind::StateTest => "state-test",
            ExperimentKind::InputTest => "input-test",
        };
        format!("{kind}:{}", self.source())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Boxes the designer samples from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignSpace {
    pub state: BoxBounds,
    pub input: BoxBounds,
}

impl DesignSpace {
    pub fn validate(&self, state_dim: usize, input_dim: usize) -> Result<()> {
        self.state.validate()?;
        self.input.validate()?;
        check_dim("design state box", state_dim, self.state.dim())?;
        check_dim("design input box", input_dim, self.input.dim())?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DesignConfig {
    /// Design acceptance threshold; 10x the noise floor when absent.
    pub delta1: Option<f64>,
    /// Per-target relevance threshold; 10x the noise floor when absent.
    pub delta2: Option<f64>,
    pub candidate_budget: usize,
    pub batch_size: usize,
    pub horizon: usize,
    pub repetitions: usize,
    pub input_class: InputClass,
    /// Sampled batches used to estimate the noise floor.
    pub floor_runs: usize,
    pub chirp_f0: f64,
    pub chirp_f1: f64,
    pub segment_length: usize,
}

impl Default for DesignConfig {
    fn default() -> Self {
        Self {
            delta1: None,
            delta2: None,
            candidate_budget: 64,
            batch_size: 16,
            horizon: 100,
            repetitions: 10,
            input_class: InputClass::Constant,
            floor_runs: 20,
            chirp_f0: 0.01,
            chirp_f1: 0.2,
            segment_length: 10,
        }
    }
}

impl DesignConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, d) in [("delta1", self.delta1), ("delta2", self.delta2)] {
            if let Some(d) = d {
                if d.is_nan() || d < 0.0 {
                    return Err(Error::InvalidArgument(format!("{name} must be >= 0, got {d}")));
                }
            }
        }
        if self.candidate_budget == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("candidate_budget and batch_size must be >= 1".into()));
        }
        if self.horizon == 0 {
            return Err(Error::InvalidArgument("horizon must be >= 1".into()));
        }
        if self.repetitions < 2 {
            return Err(Error::InvalidArgument("repetitions must be >= 2".into()));
        }
        if self.floor_runs < 2 {
            return Err(Error::InvalidArgument("floor_runs must be >= 2".into()));
        }
        if self.segment_length == 0 {
            return Err(Error::InvalidArgument("segment_length must be >= 1".into()));
        }
        for f in [self.chirp_f0, self.chirp_f1] {
            if !(f > 0.0 && f < 0.5) {
                return Err(Error::InvalidArgument(format!("chirp frequency {f} outside (0, 0.5)")));
            }
        }
        Ok(())
    }

    /// `(delta1, delta2)` with defaults filled from `floor`.
    pub fn thresholds(&self, floor: f64) -> (f64, f64) {
        (self.delta1.unwrap_or(10.0 * floor), self.delta2.unwrap_or(10.0 * floor))
    }
}

fn component(traj: &Trajectory, i: usize, subtract_initial: bool) -> Vec<f64> {
    let mut v = traj.component(i);
    if subtract_initial {
        let x0 = v[0];
        v.iter_mut().for_each(|x| *x -= x0);
    }
    v
}

/// Noiseless rollouts of both arms, `None` when either leaves the model's domain.
fn noiseless_arms(model: &EstimatedModel, spec: &ExperimentSpec) -> Result<Option<[Trajectory; 2]>> {
    let a = predict(model, spec.x0(0), spec.inputs(0), PredictMode::Noiseless)?;
    let b = predict(model, spec.x0(1), spec.inputs(1), PredictMode::Noiseless)?;
    if a.is_truncated() || b.is_truncated() {
        return Ok(None);
    }
    Ok(Some([a, b]))
}

fn point_mmd(arms: &[Trajectory; 2], target: usize, subtract_initial: bool, kernel: &KernelConfig) -> Result<f64> {
    let x = component(&arms[0], target, subtract_initial);
    let y = component(&arms[1], target, subtract_initial);
    Ok(2.0 * (1.0 - gaussian_kernel(&x, &y, kernel)?))
}

/// Sampled batches of `reps` model rollouts per arm, independent noise per run.
fn sampled_mmd(
    model: &EstimatedModel,
    x0: [&[f64]; 2],
    inputs: [&DMatrix<f64>; 2],
    reps: usize,
    targets: &[usize],
    subtract_initial: &[bool],
    kernel: &KernelConfig,
    seed: u64,
) -> Result<Option<Vec<f64>>> {
    let mut arms: [Vec<Trajectory>; 2] = [Vec::new(), Vec::new()];
    for (arm, runs) in arms.iter_mut().enumerate() {
        for k in 0..reps {
            let s = derive_seed(seed, &[arm as u64, k as u64]);
            let traj = predict(model, x0[arm], inputs[arm], PredictMode::Sampled(s))?;
            if traj.is_truncated() {
                return Ok(None);
            }
            runs.push(traj);
        }
    }
    targets
        .iter()
        .zip(subtract_initial)
        .map(|(&i, &sub)| {
            let x = SampleSet::new(arms[0].iter().map(|r| component(r, i, sub)).collect())?;
            let y = SampleSet::new(arms[1].iter().map(|r| component(r, i, sub)).collect())?;
            mmd2_unbiased(&x, &y, kernel)
        })
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

/// Model-predicted squared MMD between the arms' `target` trajectories.
///
/// With `mc_runs == 0` the point estimate from one noiseless rollout per arm;
/// otherwise the mean over `mc_runs` seeded batches of sampled rollouts.
/// Rollouts that leave the model's domain score zero.
pub fn predicted_mmd(
    model: &EstimatedModel,
    spec: &ExperimentSpec,
    target: usize,
    mc_runs: usize,
    kernel: &KernelConfig,
    seed: u64,
) -> Result<f64> {
    spec.validate()?;
    kernel.validate()?;
    check_dim("spec state dimension", model.state_dim(), spec.state_dim())?;
    check_dim("spec input dimension", model.input_dim(), spec.input_dim())?;
    if target >= spec.state_dim() {
        return Err(Error::InvalidArgument(format!("target x{} out of range", target + 1)));
    }
    let sub = spec.subtract_initial(target);
    if mc_runs == 0 {
        return match noiseless_arms(model, spec)? {
            Some(arms) => point_mmd(&arms, target, sub, kernel),
            None => Ok(0.0),
        };
    }
    let values: Vec<f64> = (0..mc_runs)
        .into_par_iter()
        .map(|r| {
            sampled_mmd(
                model,
                [spec.x0(0), spec.x0(1)],
                [spec.inputs(0), spec.inputs(1)],
                spec.repetitions(),
                &[target],
                &[sub],
                kernel,
                derive_seed(seed, &[r as u64]),
            )
            .map(|v| v.map_or(0.0, |v| v[0]))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(values.iter().sum::<f64>() / mc_runs as f64)
}

/// Scale of the sampled MMD between two identical arms (pure model noise):
/// the root mean square over `cfg.floor_runs` batches, maximized over states.
pub fn noise_floor(model: &EstimatedModel, space: &DesignSpace, cfg: &DesignConfig, kernel: &KernelConfig, seed: u64) -> Result<f64> {
    cfg.validate()?;
    space.validate(model.state_dim(), model.input_dim())?;
    let x0 = space.state.center();
    let inputs = shared_profile(&space.input, cfg, None, 0)?;
    let targets: Vec<usize> = (0..model.state_dim()).collect();
    let subs = vec![false; targets.len()];
    let runs: Vec<Option<Vec<f64>>> = (0..cfg.floor_runs)
        .into_par_iter()
        .map(|r| {
            sampled_mmd(
                model,
                [&x0, &x0],
                [&inputs, &inputs],
                cfg.repetitions,
                &targets,
                &subs,
                kernel,
                derive_seed(seed, &[r as u64]),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let mut floor: f64 = 0.0;
    for i in 0..targets.len() {
        let vals: Vec<f64> = runs.iter().flatten().map(|v| v[i]).collect();
        if !vals.is_empty() {
            let ms = vals.iter().map(|v| v * v).sum::<f64>() / vals.len() as f64;
            floor = floor.max(ms.sqrt());
        }
    }
    Ok(floor)
}

fn uniform_in(b: &BoxBounds, rng: &mut NoiseRng) -> Vec<f64> {
    (0..b.dim())
        .map(|i| {
            let (lo, hi) = (b.lower[i], b.upper[i]);
            if hi > lo {
                rng.random_range(lo..hi)
            } else {
                lo
            }
        })
        .collect()
}

/// Shared input trajectory of the configured class. Candidate 0 (`rng` absent)
/// uses a half-amplitude chirp around the box centre.
fn shared_profile(input: &BoxBounds, cfg: &DesignConfig, rng: Option<&mut NoiseRng>, _k: usize) -> Result<DMatrix<f64>> {
    let (t_len, m) = (cfg.horizon, input.dim());
    let center = input.center();
    let Some(rng) = rng else {
        let chirp = chirp_signal(t_len, 1.0, cfg.chirp_f0, cfg.chirp_f1, m)?;
        return Ok(DMatrix::from_fn(t_len, m, |t, j| center[j] + 0.5 * input.half_width(j) * chirp[(t, j)]));
    };
    Ok(match cfg.input_class {
        InputClass::Constant => {
            let level = uniform_in(input, rng);
            DMatrix::from_fn(t_len, m, |_, j| level[j])
        }
        InputClass::Chirp => {
            let amp: Vec<f64> = (0..m).map(|j| rng.random_range(0.0..=1.0) * input.half_width(j)).collect();
            let chirp = chirp_signal(t_len, 1.0, cfg.chirp_f0, cfg.chirp_f1, m)?;
            DMatrix::from_fn(t_len, m, |t, j| center[j] + amp[j] * chirp[(t, j)])
        }
        InputClass::PiecewiseConstant => {
            let segments = t_len.div_ceil(cfg.segment_length);
            let levels: Vec<Vec<f64>> = (0..segments).map(|_| uniform_in(input, rng)).collect();
            DMatrix::from_fn(t_len, m, |t, j| levels[t / cfg.segment_length][j])
        }
    })
}

/// Strictly positive magnitude profile for the varied input channel, at most `amp`.
fn varied_profile(amp: f64, cfg: &DesignConfig, rng: Option<&mut NoiseRng>) -> Result<Vec<f64>> {
    let t_len = cfg.horizon;
    let Some(rng) = rng else {
        return Ok(vec![amp; t_len]);
    };
    Ok(match cfg.input_class {
        InputClass::Constant => vec![amp; t_len],
        InputClass::Chirp => {
            let chirp = chirp_signal(t_len, 1.0, cfg.chirp_f0, cfg.chirp_f1, 1)?;
            (0..t_len).map(|t| amp * (0.6 + 0.4 * chirp[(t, 0)])).collect()
        }
        InputClass::PiecewiseConstant => {
            let segments = t_len.div_ceil(cfg.segment_length);
            let levels: Vec<f64> = (0..segments).map(|_| amp * rng.random_range(0.2..=1.0)).collect();
            (0..t_len).map(|t| levels[t / cfg.segment_length]).collect()
        }
    })
}

fn state_candidate(j: usize, space: &DesignSpace, cfg: &DesignConfig, seed: u64, k: usize) -> Result<ExperimentSpec> {
    if k == 0 {
        let inputs = shared_profile(&space.input, cfg, None, 0)?;
        return ExperimentSpec::state_test(
            j,
            &space.state.center(),
            space.state.upper[j],
            space.state.lower[j],
            inputs,
            cfg.repetitions,
        );
    }
    let mut rng = noise_rng(derive_seed(seed, &[k as u64]));
    let shared = uniform_in(&space.state, &mut rng);
    let (lo, hi) = (space.state.lower[j], space.state.upper[j]);
    let a = rng.random_range(lo..=hi);
    let mut b = rng.random_range(lo..=hi);
    while b == a {
        b = rng.random_range(lo..=hi);
    }
    let inputs = shared_profile(&space.input, cfg, Some(&mut rng), k)?;
    ExperimentSpec::state_test(j, &shared, a, b, inputs, cfg.repetitions)
}

fn input_candidate(j: usize, space: &DesignSpace, cfg: &DesignConfig, seed: u64, k: usize) -> Result<ExperimentSpec> {
    let input = &space.input;
    // keep both arms inside the box around the channel's shared level
    let headroom = |shared: &DMatrix<f64>| {
        (0..shared.nrows())
            .map(|t| (input.upper[j] - shared[(t, j)]).min(shared[(t, j)] - input.lower[j]))
            .fold(f64::INFINITY, f64::min)
    };
    if k == 0 {
        let center = input.center();
        let shared = DMatrix::from_fn(cfg.horizon, input.dim(), |_, l| center[l]);
        let profile = varied_profile(headroom(&shared), cfg, None)?;
        return ExperimentSpec::input_test(j, &space.state.center(), &shared, &profile, cfg.repetitions);
    }
    let mut rng = noise_rng(derive_seed(seed, &[k as u64]));
    let x0 = uniform_in(&space.state, &mut rng);
    let mut shared = shared_profile(input, cfg, Some(&mut rng), k)?;
    // the varied channel is centred so that +/- profiles fit
    let c = input.center()[j];
    for t in 0..shared.nrows() {
        shared[(t, j)] = c;
    }
    let amp = headroom(&shared) * rng.random_range(0.2..=1.0);
    let profile = varied_profile(amp, cfg, Some(&mut rng))?;
    ExperimentSpec::input_test(j, &x0, &shared, &profile, cfg.repetitions)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignOutcome {
    pub spec: ExperimentSpec,
    /// Noiseless predicted MMD per requested target, in request order.
    pub predictions: Vec<(usize, f64)>,
    /// Max over targets of the predictions.
    pub score: f64,
    pub below_threshold: bool,
    pub candidates_evaluated: usize,
}

impl DesignOutcome {
    pub fn prediction(&self, target: usize) -> Option<f64> {
        self.predictions.iter().find(|(i, _)| *i == target).map(|(_, v)| *v)
    }
}

fn search(
    model: &EstimatedModel,
    source: Source,
    targets: &[usize],
    space: &DesignSpace,
    cfg: &DesignConfig,
    kernel: &KernelConfig,
    delta1: f64,
    seed: u64,
) -> Result<DesignOutcome> {
    cfg.validate()?;
    kernel.validate()?;
    space.validate(model.state_dim(), model.input_dim())?;
    if targets.is_empty() {
        return Err(Error::InvalidArgument("design needs at least one target".into()));
    }
    if let Some(&bad) = targets.iter().find(|&&i| i >= model.state_dim()) {
        return Err(Error::InvalidArgument(format!("target x{} out of range", bad + 1)));
    }
    let seed = derive_seed(seed, &[u64::from(source.is_state()), source.index() as u64]);
    let evaluate = |k: usize| -> Result<(ExperimentSpec, Vec<(usize, f64)>, f64)> {
        let spec = match source {
            Source::State(j) => state_candidate(j, space, cfg, seed, k)?,
            Source::Input(j) => input_candidate(j, space, cfg, seed, k)?,
        };
        let arms = noiseless_arms(model, &spec)?;
        let mut preds = Vec::with_capacity(targets.len());
        for &i in targets {
            let v = match &arms {
                Some(arms) => point_mmd(arms, i, spec.subtract_initial(i), kernel)?,
                None => 0.0,
            };
            preds.push((i, v));
        }
        let score = preds.iter().map(|(_, v)| *v).fold(f64::NEG_INFINITY, f64::max);
        Ok((spec, preds, score))
    };

    let mut best: Option<(ExperimentSpec, Vec<(usize, f64)>, f64)> = None;
    let mut evaluated = 0;
    while evaluated < cfg.candidate_budget {
        let end = (evaluated + cfg.batch_size).min(cfg.candidate_budget);
        let round: Vec<_> = (evaluated..end).into_par_iter().map(evaluate).collect::<Result<Vec<_>>>()?;
        evaluated = end;
        for cand in round {
            if best.as_ref().is_none_or(|b| cand.2 > b.2) {
                best = Some(cand);
            }
        }
        if best.as_ref().is_some_and(|b| b.2 > delta1) {
            break;
        }
    }
    let (spec, predictions, score) = best.expect("budget is at least one candidate");
    if predictions.iter().all(|(_, v)| *v == 0.0) {
        return Err(Error::DesignFailure {
            source_name: source.to_string(),
        });
    }
    let below_threshold = score <= delta1;
    if below_threshold {
        info!(
            "design for {source}: best predicted MMD {score:.3e} after {evaluated} candidates is not above delta1 {delta1:.3e}"
        );
    }
    Ok(DesignOutcome {
        spec,
        predictions,
        score,
        below_threshold,
        candidates_evaluated: evaluated,
    })
}

/// Designs a state test varying `x_j` for the given targets.
pub fn design_state_experiment(
    model: &EstimatedModel,
    j: usize,
    targets: &[usize],
    space: &DesignSpace,
    cfg: &DesignConfig,
    kernel: &KernelConfig,
    delta1: f64,
    seed: u64,
) -> Result<DesignOutcome> {
    if j >= model.state_dim() {
        return Err(Error::InvalidArgument(format!("state index {j} out of range")));
    }
    search(model, Source::State(j), targets, space, cfg, kernel, delta1, seed)
}

/// Designs an input test varying `u_j` for the given targets.
pub fn design_input_experiment(
    model: &EstimatedModel,
    j: usize,
    targets: &[usize],
    space: &DesignSpace,
    cfg: &DesignConfig,
    kernel: &KernelConfig,
    delta1: f64,
    seed: u64,
) -> Result<DesignOutcome> {
    if j >= model.input_dim() {
        return Err(Error::InvalidArgument(format!("input index {j} out of range")));
    }
    search(model, Source::Input(j), targets, space, cfg, kernel, delta1, seed)
}
