//! Discrete-time stochastic control systems: LTI plants, registered nonlinear
//! plants, trajectories and their CSV representation.

use std::f64::consts::PI;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, check_finite, Error, Result};
use crate::rng::{noise_rng, NoiseRng};

/// Axis-aligned box `[lower, upper]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxBounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxBounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let bounds = Self { lower, upper };
        bounds.validate()?;
        Ok(bounds)
    }

    pub fn symmetric(dim: usize, half_width: f64) -> Self {
        Self {
            lower: vec![-half_width; dim],
            upper: vec![half_width; dim],
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_dim("box bounds", self.lower.len(), self.upper.len())?;
        check_finite("box bounds", self.lower.iter().chain(&self.upper))?;
        if self.lower.iter().zip(&self.upper).any(|(lo, hi)| lo > hi) {
            return Err(Error::InvalidArgument("empty box: lower bound above upper bound".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(lo, hi)| 0.5 * (lo + hi)).collect()
    }

    pub fn half_width(&self, i: usize) -> f64 {
        0.5 * (self.upper[i] - self.lower[i])
    }

    pub fn clamp(&self, x: &mut [f64]) {
        for (v, (lo, hi)) in x.iter_mut().zip(self.lower.iter().zip(&self.upper)) {
            *v = v.clamp(*lo, *hi);
        }
    }
}

/// A deterministic transition map `x(t+1) = f(x(t), u(t))` with additive
/// diagonal Gaussian noise.
pub trait Dynamics: Send + Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn step_into(&self, x: &[f64], u: &[f64], out: &mut [f64]);
    fn noise_std(&self) -> &[f64];

    /// State box outside of which a rollout is truncated.
    fn state_bounds(&self) -> Option<&BoxBounds> {
        None
    }
}

/// `x(t+1) = A x(t) + B u(t) + v(t)`, `v ~ N(0, diag(noise_std^2))`.
#[derive(Debug, Clone, PartialEq)]
pub struct LtiModel {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    noise_std: Vec<f64>,
}

impl LtiModel {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, noise_std: Vec<f64>) -> Result<Self> {
        let n = a.nrows();
        check_dim("A columns", n, a.ncols())?;
        check_dim("B rows", n, b.nrows())?;
        check_dim("noise_std length", n, noise_std.len())?;
        check_finite("A", a.iter())?;
        check_finite("B", b.iter())?;
        check_finite("noise_std", noise_std.iter())?;
        if noise_std.iter().any(|s| *s < 0.0) {
            return Err(Error::InvalidArgument("noise_std must be non-negative".into()));
        }
        Ok(Self { a, b, noise_std })
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn with_noise_std(&self, noise_std: Vec<f64>) -> Result<Self> {
        Self::new(self.a.clone(), self.b.clone(), noise_std)
    }
}

impl Dynamics for LtiModel {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    fn step_into(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        let n = self.a.nrows();
        for (i, o) in out.iter_mut().enumerate().take(n) {
            let mut acc = 0.0;
            for (j, xj) in x.iter().enumerate() {
                acc += self.a[(i, j)] * xj;
            }
            for (j, uj) in u.iter().enumerate() {
                acc += self.b[(i, j)] * uj;
            }
            *o = acc;
        }
    }

    fn noise_std(&self) -> &[f64] {
        &self.noise_std
    }
}

/// Deterministic part of a nonlinear plant, registered by name.
pub trait Transition: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn step(&self, x: &[f64], u: &[f64], out: &mut [f64]);
}

/// `x1(t+1) = x1(t) x2(t)`, `x2(t+1) = u(t)`.
///
/// From `x1(0) = 0` the first component stays at zero whatever `x2(0)` is, so
/// the influence of `x2` on `x1` is invisible on that set.
#[derive(Debug, Clone, Copy, Default)]
pub struct Bilinear2;

impl Transition for Bilinear2 {
    fn name(&self) -> &str {
        "bilinear2"
    }

    fn state_dim(&self) -> usize {
        2
    }

    fn input_dim(&self) -> usize {
        1
    }

    fn step(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        out[0] = x[0] * x[1];
        out[1] = u[0];
    }
}

/// Looks up a built-in nonlinear transition by name.
pub fn builtin_transition(name: &str) -> Option<Arc<dyn Transition>> {
    match name {
        "bilinear2" => Some(Arc::new(Bilinear2)),
        _ => None,
    }
}

#[derive(Debug, Clone)]
pub struct NonlinearModel {
    transition: Arc<dyn Transition>,
    noise_std: Vec<f64>,
    state_bounds: BoxBounds,
    input_bounds: BoxBounds,
}

impl NonlinearModel {
    pub fn new(
        transition: Arc<dyn Transition>,
        noise_std: Vec<f64>,
        state_bounds: BoxBounds,
        input_bounds: BoxBounds,
    ) -> Result<Self> {
        check_dim("noise_std length", transition.state_dim(), noise_std.len())?;
        check_dim("state bounds", transition.state_dim(), state_bounds.dim())?;
        check_dim("input bounds", transition.input_dim(), input_bounds.dim())?;
        check_finite("noise_std", noise_std.iter())?;
        if noise_std.iter().any(|s| *s < 0.0) {
            return Err(Error::InvalidArgument("noise_std must be non-negative".into()));
        }
        state_bounds.validate()?;
        input_bounds.validate()?;
        Ok(Self {
            transition,
            noise_std,
            state_bounds,
            input_bounds,
        })
    }

    pub fn transition(&self) -> &Arc<dyn Transition> {
        &self.transition
    }

    pub fn input_bounds(&self) -> &BoxBounds {
        &self.input_bounds
    }
}

impl Dynamics for NonlinearModel {
    fn state_dim(&self) -> usize {
        self.transition.state_dim()
    }

    fn input_dim(&self) -> usize {
        self.transition.input_dim()
    }

    fn step_into(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        self.transition.step(x, u, out)
    }

    fn noise_std(&self) -> &[f64] {
        &self.noise_std
    }

    fn state_bounds(&self) -> Option<&BoxBounds> {
        Some(&self.state_bounds)
    }
}

/// The simulated plant: ground truth for a scenario.
#[derive(Debug, Clone)]
pub enum SystemModel {
    Lti(LtiModel),
    Nonlinear(NonlinearModel),
}

impl SystemModel {
    pub fn as_lti(&self) -> Option<&LtiModel> {
        match self {
            SystemModel::Lti(m) => Some(m),
            SystemModel::Nonlinear(_) => None,
        }
    }

    pub fn input_bounds(&self) -> Option<&BoxBounds> {
        match self {
            SystemModel::Lti(_) => None,
            SystemModel::Nonlinear(m) => Some(m.input_bounds()),
        }
    }

    fn dynamics(&self) -> &dyn Dynamics {
        match self {
            SystemModel::Lti(m) => m,
            SystemModel::Nonlinear(m) => m,
        }
    }
}

impl Dynamics for SystemModel {
    fn state_dim(&self) -> usize {
        self.dynamics().state_dim()
    }

    fn input_dim(&self) -> usize {
        self.dynamics().input_dim()
    }

    fn step_into(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        self.dynamics().step_into(x, u, out)
    }

    fn noise_std(&self) -> &[f64] {
        self.dynamics().noise_std()
    }

    fn state_bounds(&self) -> Option<&BoxBounds> {
        self.dynamics().state_bounds()
    }
}

/// States `x(0..=T)` and applied inputs `u(0..T)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    states: DMatrix<f64>,
    inputs: DMatrix<f64>,
    truncated: bool,
}

impl Trajectory {
    pub fn new(states: DMatrix<f64>, inputs: DMatrix<f64>) -> Result<Self> {
        check_dim("trajectory state rows", inputs.nrows() + 1, states.nrows())?;
        check_finite("trajectory states", states.iter())?;
        check_finite("trajectory inputs", inputs.iter())?;
        Ok(Self {
            states,
            inputs,
            truncated: false,
        })
    }

    pub fn states(&self) -> &DMatrix<f64> {
        &self.states
    }

    pub fn inputs(&self) -> &DMatrix<f64> {
        &self.inputs
    }

    /// Number of transitions `T`.
    pub fn horizon(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn state_dim(&self) -> usize {
        self.states.ncols()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    /// Whether the rollout stopped early because the state left the plant's box.
    pub fn is_truncated(&self) -> bool {
        self.truncated
    }

    pub fn state(&self, t: usize) -> Vec<f64> {
        self.states.row(t).iter().copied().collect()
    }

    pub fn initial_state(&self) -> Vec<f64> {
        self.state(0)
    }

    pub fn final_state(&self) -> Vec<f64> {
        self.state(self.horizon())
    }

    /// Time series of state component `i`.
    pub fn component(&self, i: usize) -> Vec<f64> {
        self.states.column(i).iter().copied().collect()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let n = self.state_dim();
        let m = self.input_dim();
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|i| format!("x{i}")));
        header.extend((1..=m).map(|i| format!("u{i}")));
        w.write_record(&header)?;
        for t in 0..=self.horizon() {
            let mut row = vec![t.to_string()];
            row.extend((0..n).map(|i| self.states[(t, i)].to_string()));
            if t < self.horizon() {
                row.extend((0..m).map(|j| self.inputs[(t, j)].to_string()));
            } else {
                row.extend((0..m).map(|_| String::new()));
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers()?.clone();
        if header.get(0) != Some("t") {
            return Err(Error::InvalidArgument("trajectory CSV must start with column `t`".into()));
        }
        let n = header.iter().filter(|h| h.starts_with('x')).count();
        let m = header.iter().filter(|h| h.starts_with('u')).count();
        check_dim("trajectory CSV columns", 1 + n + m, header.len())?;
        for (k, name) in header.iter().skip(1).enumerate() {
            let expected = if k < n { format!("x{}", k + 1) } else { format!("u{}", k - n + 1) };
            if name != expected {
                return Err(Error::InvalidArgument(format!(
                    "unexpected trajectory CSV column `{name}`, expected `{expected}`"
                )));
            }
        }
        let parse = |s: &str| -> Result<f64> {
            s.trim()
                .parse::<f64>()
                .map_err(|e| Error::InvalidArgument(format!("bad number `{s}`: {e}")))
        };
        let mut state_rows = Vec::new();
        let mut input_rows = Vec::new();
        let mut inputs_ended = false;
        for record in r.records() {
            let record = record?;
            let t: usize = record[0]
                .trim()
                .parse()
                .map_err(|e| Error::InvalidArgument(format!("bad step index: {e}")))?;
            check_dim("trajectory CSV step index", state_rows.len(), t)?;
            if inputs_ended {
                return Err(Error::InvalidArgument("rows after the final (input-less) row".into()));
            }
            let xs = (1..=n).map(|k| parse(&record[k])).collect::<Result<Vec<_>>>()?;
            state_rows.push(xs);
            let raw: Vec<&str> = (n + 1..=n + m).map(|k| &record[k]).collect();
            if m > 0 && raw.iter().all(|s| s.trim().is_empty()) {
                inputs_ended = true;
            } else if m == 0 {
                input_rows.push(Vec::new());
            } else {
                input_rows.push(raw.iter().map(|s| parse(s)).collect::<Result<Vec<_>>>()?);
            }
        }
        if state_rows.is_empty() {
            return Err(Error::InvalidArgument("empty trajectory CSV".into()));
        }
        if m == 0 {
            input_rows.pop();
        } else if !inputs_ended {
            return Err(Error::InvalidArgument("final row must leave inputs blank".into()));
        }
        let states = DMatrix::from_fn(state_rows.len(), n, |t, i| state_rows[t][i]);
        let inputs = DMatrix::from_fn(input_rows.len(), m, |t, j| input_rows[t][j]);
        Self::new(states, inputs)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

/// `m` realizations of one experiment arm.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBatch {
    runs: Vec<Trajectory>,
    spec_id: String,
}

impl TrajectoryBatch {
    pub fn new(runs: Vec<Trajectory>, spec_id: impl Into<String>) -> Result<Self> {
        let first = runs
            .first()
            .ok_or_else(|| Error::InvalidArgument("trajectory batch must not be empty".into()))?;
        for run in &runs[1..] {
            check_dim("batch horizon", first.horizon(), run.horizon())?;
            check_dim("batch state dimension", first.state_dim(), run.state_dim())?;
            check_dim("batch input dimension", first.input_dim(), run.input_dim())?;
        }
        Ok(Self {
            runs,
            spec_id: spec_id.into(),
        })
    }

    pub fn runs(&self) -> &[Trajectory] {
        &self.runs
    }

    pub fn spec_id(&self) -> &str {
        &self.spec_id
    }

    pub fn len(&self) -> usize {
        self.runs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.runs.is_empty()
    }

    pub fn horizon(&self) -> usize {
        self.runs[0].horizon()
    }

    pub fn state_dim(&self) -> usize {
        self.runs[0].state_dim()
    }

    pub fn initial_states(&self) -> Vec<Vec<f64>> {
        self.runs.iter().map(Trajectory::initial_state).collect()
    }
}

fn check_rollout_args(model: &(impl Dynamics + ?Sized), x0: &[f64], inputs: &DMatrix<f64>) -> Result<()> {
    check_dim("x0", model.state_dim(), x0.len())?;
    check_dim("input columns", model.input_dim(), inputs.ncols())?;
    check_finite("x0", x0.iter())?;
    check_finite("inputs", inputs.iter())?;
    Ok(())
}

/// Rolls `model` forward from `x0` under `inputs`. With `noise` present, one
/// standard normal per state component is drawn at every step (also for
/// components with zero standard deviation) so that streams stay aligned.
pub(crate) fn rollout<D: Dynamics + ?Sized>(
    model: &D,
    x0: &[f64],
    inputs: &DMatrix<f64>,
    mut noise: Option<&mut NoiseRng>,
) -> Trajectory {
    let n = model.state_dim();
    let steps = inputs.nrows();
    let sigma = model.noise_std();
    let mut states = DMatrix::zeros(steps + 1, n);
    let mut x = x0.to_vec();
    let mut next = vec![0.0; n];
    let mut u = vec![0.0; inputs.ncols()];
    states.row_mut(0).copy_from_slice(&x);
    let mut done = steps;
    for t in 0..steps {
        for (j, uj) in u.iter_mut().enumerate() {
            *uj = inputs[(t, j)];
        }
        model.step_into(&x, &u, &mut next);
        if let Some(rng) = noise.as_deref_mut() {
            for (v, s) in next.iter_mut().zip(sigma) {
                let z: f64 = rng.sample(StandardNormal);
                *v += s * z;
            }
        }
        let escaped = next.iter().any(|v| !v.is_finite())
            || model.state_bounds().is_some_and(|b| !b.contains(&next));
        if escaped {
            done = t;
            break;
        }
        std::mem::swap(&mut x, &mut next);
        for (i, xi) in x.iter().enumerate() {
            states[(t + 1, i)] = *xi;
        }
    }
    if done < steps {
        return Trajectory {
            states: states.rows(0, done + 1).into_owned(),
            inputs: inputs.rows(0, done).into_owned(),
            truncated: true,
        };
    }
    Trajectory {
        states,
        inputs: inputs.clone(),
        truncated: false,
    }
}

fn check_plant_domain(model: &SystemModel, x0: &[f64], inputs: &DMatrix<f64>) -> Result<()> {
    if let SystemModel::Nonlinear(nl) = model {
        if !nl.state_bounds.contains(x0) {
            return Err(Error::InvalidArgument("x0 outside the plant's state box".into()));
        }
        let mut row = vec![0.0; inputs.ncols()];
        for t in 0..inputs.nrows() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = inputs[(t, j)];
            }
            if !nl.input_bounds.contains(&row) {
                return Err(Error::InvalidArgument(format!("input at step {t} outside the plant's input box")));
            }
        }
    }
    Ok(())
}

/// Noisy rollout of the plant; deterministic given `seed`.
pub fn simulate(model: &SystemModel, x0: &[f64], inputs: &DMatrix<f64>, seed: u64) -> Result<Trajectory> {
    let mut rng = noise_rng(seed);
    simulate_with_rng(model, x0, inputs, &mut rng)
}

/// As [`simulate`], drawing noise from a caller-owned stream.
pub fn simulate_with_rng(
    model: &SystemModel,
    x0: &[f64],
    inputs: &DMatrix<f64>,
    rng: &mut NoiseRng,
) -> Result<Trajectory> {
    check_rollout_args(model, x0, inputs)?;
    check_plant_domain(model, x0, inputs)?;
    Ok(rollout(model, x0, inputs, Some(rng)))
}

/// Noiseless rollout (the mean trajectory for LTI plants).
pub fn mean_trajectory(model: &SystemModel, x0: &[f64], inputs: &DMatrix<f64>) -> Result<Trajectory> {
    check_rollout_args(model, x0, inputs)?;
    check_plant_domain(model, x0, inputs)?;
    Ok(rollout(model, x0, inputs, None))
}

/// Multi-channel frequency sweep of `steps` samples.
///
/// Channel `j` starts with phase `2*pi*j/channels` and its instantaneous
/// frequency runs from `f0` to `f1` with its sweep cyclically offset by
/// `j/channels` of the horizon, so channels never share a frequency at the
/// same step unless `f0 == f1`.
pub fn chirp_signal(steps: usize, amplitude: f64, f0: f64, f1: f64, channels: usize) -> Result<DMatrix<f64>> {
    if steps == 0 {
        return Err(Error::InvalidArgument("chirp needs at least one step".into()));
    }
    for f in [f0, f1] {
        if !(f > 0.0 && f < 0.5) {
            return Err(Error::InvalidArgument(format!(
                "chirp frequency {f} outside (0, 0.5) cycles/step"
            )));
        }
    }
    check_finite("chirp amplitude", [amplitude].iter())?;
    let mut signal = DMatrix::zeros(steps, channels);
    for j in 0..channels {
        let offset = j as f64 / channels as f64;
        let mut phase = 2.0 * PI * offset;
        for t in 0..steps {
            signal[(t, j)] = amplitude * phase.sin();
            let frac = (t as f64 / steps as f64 + offset).fract();
            phase += 2.0 * PI * (f0 + (f1 - f0) * frac);
        }
    }
    Ok(signal)
}
