//! Least-squares identification of black-box models and of restricted models
//! in which chosen sources are removed from a target's regressors.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::{rollout, Dynamics, Trajectory};
use crate::error::{check_dim, check_finite, Error, Result};
use crate::rng::noise_rng;

/// A variable that may influence a state: a state component or an input channel
/// (zero-based). Displayed one-based as `x3` / `u2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Source {
    State(usize),
    Input(usize),
}

impl Source {
    pub fn index(self) -> usize {
        match self {
            Source::State(j) | Source::Input(j) => j,
        }
    }

    pub fn is_state(self) -> bool {
        matches!(self, Source::State(_))
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::State(j) => write!(f, "x{}", j + 1),
            Source::Input(j) => write!(f, "u{}", j + 1),
        }
    }
}

impl FromStr for Source {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("bad variable name `{s}`"));
        let (kind, idx) = s.split_at(s.find(|c: char| c.is_ascii_digit()).ok_or_else(bad)?);
        let idx: usize = idx.parse().map_err(|_| bad())?;
        if idx == 0 {
            return Err(bad());
        }
        match kind {
            "x" => Ok(Source::State(idx - 1)),
            "u" => Ok(Source::Input(idx - 1)),
            _ => Err(bad()),
        }
    }
}

impl From<Source> for String {
    fn from(s: Source) -> Self {
        s.to_string()
    }
}

impl TryFrom<String> for Source {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Regressors: states and inputs.
    Linear,
    /// Regressors: states, inputs and every monomial of degree two in them.
    FeatureBasis,
}

/// One column of the regressor matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regressor {
    Intercept,
    Linear(Source),
    Product(Source, Source),
}

impl Regressor {
    pub fn involves(self, source: Source) -> bool {
        match self {
            Regressor::Intercept => false,
            Regressor::Linear(s) => s == source,
            Regressor::Product(a, b) => a == source || b == source,
        }
    }

    fn value(self, x: &[f64], u: &[f64]) -> f64 {
        let get = |s: Source| match s {
            Source::State(j) => x[j],
            Source::Input(j) => u[j],
        };
        match self {
            Regressor::Intercept => 1.0,
            Regressor::Linear(s) => get(s),
            Regressor::Product(a, b) => get(a) * get(b),
        }
    }

    /// Partial derivative with respect to `var` at `(x, u)`.
    fn derivative(self, var: Source, x: &[f64], u: &[f64]) -> f64 {
        let get = |s: Source| match s {
            Source::State(j) => x[j],
            Source::Input(j) => u[j],
        };
        match self {
            Regressor::Intercept => 0.0,
            Regressor::Linear(s) => f64::from(u8::from(s == var)),
            Regressor::Product(a, b) => {
                let mut d = 0.0;
                if a == var {
                    d += get(b);
                }
                if b == var {
                    d += get(a);
                }
                d
            }
        }
    }
}

impl fmt::Display for Regressor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Regressor::Intercept => write!(f, "1"),
            Regressor::Linear(s) => write!(f, "{s}"),
            Regressor::Product(a, b) if a == b => write!(f, "{a}^2"),
            Regressor::Product(a, b) => write!(f, "{a}*{b}"),
        }
    }
}

impl FromStr for Regressor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "1" {
            return Ok(Regressor::Intercept);
        }
        if let Some(base) = s.strip_suffix("^2") {
            let v: Source = base.parse()?;
            return Ok(Regressor::Product(v, v));
        }
        if let Some((a, b)) = s.split_once('*') {
            return Ok(Regressor::Product(a.parse()?, b.parse()?));
        }
        Ok(Regressor::Linear(s.parse()?))
    }
}

/// Full regressor list for a model class, in canonical column order.
pub fn regressors(kind: ModelKind, state_dim: usize, input_dim: usize, intercept: bool) -> Vec<Regressor> {
    let vars: Vec<Source> = (0..state_dim)
        .map(Source::State)
        .chain((0..input_dim).map(Source::Input))
        .collect();
    let mut out = Vec::new();
    if intercept {
        out.push(Regressor::Intercept);
    }
    out.extend(vars.iter().map(|v| Regressor::Linear(*v)));
    if kind == ModelKind::FeatureBasis {
        for (a, va) in vars.iter().enumerate() {
            for vb in &vars[a..] {
                out.push(Regressor::Product(*va, *vb));
            }
        }
    }
    out
}

/// A `(target state, source)` pair removed from the target's regressors.
///
/// Excluding a state from its own row means the target keeps its previous
/// value (coefficient one) and only the increment `x_i(t+1) - x_i(t)` is
/// regressed on the remaining columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Exclusion {
    #[serde(with = "one_based")]
    pub target: usize,
    pub source: Source,
}

impl Exclusion {
    pub fn new(target: usize, source: Source) -> Self {
        Self { target, source }
    }

    pub fn is_self(self) -> bool {
        self.source == Source::State(self.target)
    }
}

pub(crate) mod one_based {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &usize, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("x{}", v + 1))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<usize, D::Error> {
        let s = String::deserialize(d)?;
        s.strip_prefix('x')
            .and_then(|i| i.parse::<usize>().ok())
            .filter(|i| *i > 0)
            .map(|i| i - 1)
            .ok_or_else(|| serde::de::Error::custom(format!("bad target `{s}`")))
    }
}

pub type ExclusionSet = BTreeSet<Exclusion>;

/// Excludes `source` from every target row of an `state_dim`-state model.
pub fn cut_everywhere(state_dim: usize, source: Source) -> ExclusionSet {
    (0..state_dim).map(|i| Exclusion::new(i, source)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub intercept: bool,
    /// Ridge penalty; zero means ordinary least squares.
    pub ridge: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            intercept: false,
            ridge: 0.0,
        }
    }
}

/// A fitted one-step model `x(t+1) = W phi(x(t), u(t)) + v(t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "ModelDocument", try_from = "ModelDocument")]
pub struct EstimatedModel {
    kind: ModelKind,
    state_dim: usize,
    input_dim: usize,
    options: FitOptions,
    regressors: Vec<Regressor>,
    coefficients: DMatrix<f64>,
    noise_std_hat: Vec<f64>,
    exclusions: ExclusionSet,
}

impl EstimatedModel {
    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn options(&self) -> FitOptions {
        self.options
    }

    pub fn regressors(&self) -> &[Regressor] {
        &self.regressors
    }

    /// `state_dim x regressors` weight matrix.
    pub fn coefficients(&self) -> &DMatrix<f64> {
        &self.coefficients
    }

    pub fn noise_std_hat(&self) -> &[f64] {
        &self.noise_std_hat
    }

    pub fn exclusions(&self) -> &ExclusionSet {
        &self.exclusions
    }

    pub fn column(&self, regressor: Regressor) -> Option<usize> {
        self.regressors.iter().position(|r| *r == regressor)
    }

    pub fn coefficient(&self, target: usize, regressor: Regressor) -> Option<f64> {
        self.column(regressor).map(|c| self.coefficients[(target, c)])
    }

    /// Jacobian `(df/dx, df/du)` at `(x, u)`; constant for linear models.
    pub fn linearize(&self, x: &[f64], u: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
        let n = self.state_dim;
        let m = self.input_dim;
        let mut a = DMatrix::zeros(n, n);
        let mut b = DMatrix::zeros(n, m);
        for (c, reg) in self.regressors.iter().enumerate() {
            for j in 0..n {
                let d = reg.derivative(Source::State(j), x, u);
                if d != 0.0 {
                    for i in 0..n {
                        a[(i, j)] += self.coefficients[(i, c)] * d;
                    }
                }
            }
            for j in 0..m {
                let d = reg.derivative(Source::Input(j), x, u);
                if d != 0.0 {
                    for i in 0..n {
                        b[(i, j)] += self.coefficients[(i, c)] * d;
                    }
                }
            }
        }
        (a, b)
    }

    pub fn with_noise_std_hat(mut self, noise_std_hat: Vec<f64>) -> Result<Self> {
        check_dim("noise_std_hat", self.state_dim, noise_std_hat.len())?;
        self.noise_std_hat = noise_std_hat;
        Ok(self)
    }

    /// Builds a model from explicit weights (no fitting).
    pub fn from_parts(
        kind: ModelKind,
        state_dim: usize,
        input_dim: usize,
        options: FitOptions,
        coefficients: DMatrix<f64>,
        noise_std_hat: Vec<f64>,
        exclusions: ExclusionSet,
    ) -> Result<Self> {
        let regs = regressors(kind, state_dim, input_dim, options.intercept);
        check_dim("coefficient rows", state_dim, coefficients.nrows())?;
        check_dim("coefficient columns", regs.len(), coefficients.ncols())?;
        check_dim("noise_std_hat", state_dim, noise_std_hat.len())?;
        check_finite("coefficients", coefficients.iter())?;
        if noise_std_hat.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::InvalidArgument("noise_std_hat must be finite and non-negative".into()));
        }
        for ex in &exclusions {
            if ex.target >= state_dim || !source_in_range(ex.source, state_dim, input_dim) {
                return Err(Error::InvalidArgument(format!("exclusion {ex:?} out of range")));
            }
            for (c, reg) in regs.iter().enumerate() {
                if reg.involves(ex.source) {
                    let expected = if ex.is_self() && *reg == Regressor::Linear(ex.source) { 1.0 } else { 0.0 };
                    if coefficients[(ex.target, c)] != expected {
                        return Err(Error::InvalidArgument(format!(
                            "coefficient of {reg} in row x{} contradicts exclusion of {}",
                            ex.target + 1,
                            ex.source
                        )));
                    }
                }
            }
        }
        Ok(Self {
            kind,
            state_dim,
            input_dim,
            options,
            regressors: regs,
            coefficients,
            noise_std_hat,
            exclusions,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

fn source_in_range(source: Source, state_dim: usize, input_dim: usize) -> bool {
    match source {
        Source::State(j) => j < state_dim,
        Source::Input(j) => j < input_dim,
    }
}

impl Dynamics for EstimatedModel {
    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn step_into(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        for o in out.iter_mut() {
            *o = 0.0;
        }
        for (c, reg) in self.regressors.iter().enumerate() {
            let v = reg.value(x, u);
            if v != 0.0 {
                for (i, o) in out.iter_mut().enumerate() {
                    *o += self.coefficients[(i, c)] * v;
                }
            }
        }
    }

    fn noise_std(&self) -> &[f64] {
        &self.noise_std_hat
    }
}

#[derive(Serialize, Deserialize)]
struct ModelDocument {
    kind: ModelKind,
    state_dim: usize,
    input_dim: usize,
    intercept: bool,
    ridge: f64,
    regressors: Vec<String>,
    coefficients: Vec<Vec<f64>>,
    noise_std_hat: Vec<f64>,
    exclusions: Vec<Exclusion>,
}

impl From<EstimatedModel> for ModelDocument {
    fn from(m: EstimatedModel) -> Self {
        Self {
            kind: m.kind,
            state_dim: m.state_dim,
            input_dim: m.input_dim,
            intercept: m.options.intercept,
            ridge: m.options.ridge,
            regressors: m.regressors.iter().map(ToString::to_string).collect(),
            coefficients: m
                .coefficients
                .row_iter()
                .map(|r| r.iter().copied().collect())
                .collect(),
            noise_std_hat: m.noise_std_hat,
            exclusions: m.exclusions.into_iter().collect(),
        }
    }
}

impl TryFrom<ModelDocument> for EstimatedModel {
    type Error = Error;

    fn try_from(doc: ModelDocument) -> Result<Self> {
        let options = FitOptions {
            intercept: doc.intercept,
            ridge: doc.ridge,
        };
        let expected = regressors(doc.kind, doc.state_dim, doc.input_dim, doc.intercept);
        let listed = doc
            .regressors
            .iter()
            .map(|s| s.parse::<Regressor>())
            .collect::<Result<Vec<_>>>()?;
        if listed != expected {
            return Err(Error::InvalidArgument("regressor list does not match model kind".into()));
        }
        check_dim("coefficient rows", doc.state_dim, doc.coefficients.len())?;
        for row in &doc.coefficients {
            check_dim("coefficient columns", expected.len(), row.len())?;
        }
        let coefficients = DMatrix::from_fn(doc.state_dim, expected.len(), |i, c| doc.coefficients[i][c]);
        Self::from_parts(
            doc.kind,
            doc.state_dim,
            doc.input_dim,
            options,
            coefficients,
            doc.noise_std_hat,
            doc.exclusions.into_iter().collect(),
        )
    }
}

/// Fits one least-squares row per state on all transitions in `data`.
pub fn fit(data: &[Trajectory], kind: ModelKind, exclusions: &ExclusionSet, options: &FitOptions) -> Result<EstimatedModel> {
    let first = data
        .first()
        .ok_or_else(|| Error::InvalidArgument("no training trajectories".into()))?;
    let n = first.state_dim();
    let m = first.input_dim();
    for traj in data {
        check_dim("training state dimension", n, traj.state_dim())?;
        check_dim("training input dimension", m, traj.input_dim())?;
    }
    if !(options.ridge.is_finite() && options.ridge >= 0.0) {
        return Err(Error::InvalidArgument("ridge penalty must be finite and non-negative".into()));
    }
    for ex in exclusions {
        if ex.target >= n || !source_in_range(ex.source, n, m) {
            return Err(Error::InvalidArgument(format!("exclusion {ex:?} out of range")));
        }
    }
    let regs = regressors(kind, n, m, options.intercept);
    let p = regs.len();
    let rows: usize = data.iter().map(Trajectory::horizon).sum();
    if rows < p {
        return Err(Error::InsufficientData {
            transitions: rows,
            regressors: p,
        });
    }

    let mut phi = DMatrix::zeros(rows, p);
    let mut next = DMatrix::zeros(rows, n);
    let mut current = DMatrix::zeros(rows, n);
    let mut r = 0;
    for traj in data {
        for t in 0..traj.horizon() {
            let x = traj.state(t);
            let u: Vec<f64> = traj.inputs().row(t).iter().copied().collect();
            for (c, reg) in regs.iter().enumerate() {
                phi[(r, c)] = reg.value(&x, &u);
            }
            for i in 0..n {
                next[(r, i)] = traj.states()[(t + 1, i)];
                current[(r, i)] = x[i];
            }
            r += 1;
        }
    }

    let mut coefficients = DMatrix::zeros(n, p);
    let mut noise_std_hat = vec![0.0; n];
    for i in 0..n {
        let excluded: Vec<Source> = exclusions
            .iter()
            .filter(|e| e.target == i)
            .map(|e| e.source)
            .collect();
        let persistent = excluded.contains(&Source::State(i));
        let active: Vec<usize> = (0..p)
            .filter(|c| !excluded.iter().any(|s| regs[*c].involves(*s)))
            .collect();
        let mut y: DVector<f64> = next.column(i).into_owned();
        if persistent {
            y -= current.column(i);
            let c = regs
                .iter()
                .position(|reg| *reg == Regressor::Linear(Source::State(i)))
                .expect("state regressor present");
            coefficients[(i, c)] = 1.0;
        }
        let design = phi.select_columns(active.iter());
        let weights = solve_row(&design, &y, options.ridge, |k| regs[active[k]].to_string(), i)?;
        let residual = &y - &design * &weights;
        let dof = rows - active.len();
        noise_std_hat[i] = if dof > 0 {
            (residual.norm_squared() / dof as f64).sqrt()
        } else {
            0.0
        };
        for (k, c) in active.iter().enumerate() {
            coefficients[(i, *c)] = weights[k];
        }
    }

    EstimatedModel::from_parts(kind, n, m, *options, coefficients, noise_std_hat, exclusions.clone())
}

/// Columns of `design` that are (numerically) linear combinations of earlier ones.
fn deficient_columns(design: &DMatrix<f64>) -> Vec<usize> {
    const REL_TOL: f64 = 1e-9;
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut deficient = Vec::new();
    for c in 0..design.ncols() {
        let col = design.column(c).into_owned();
        let norm = col.norm();
        if norm == 0.0 {
            deficient.push(c);
            continue;
        }
        let mut v = col / norm;
        // two passes of modified Gram-Schmidt for stability
        for _ in 0..2 {
            for q in &basis {
                let proj = q.dot(&v);
                v.axpy(-proj, q, 1.0);
            }
        }
        let residual = v.norm();
        if residual < REL_TOL {
            deficient.push(c);
        } else {
            basis.push(v / residual);
        }
    }
    deficient
}

fn solve_row(
    design: &DMatrix<f64>,
    y: &DVector<f64>,
    ridge: f64,
    name: impl Fn(usize) -> String,
    target: usize,
) -> Result<DVector<f64>> {
    let p = design.ncols();
    if p == 0 {
        return Ok(DVector::zeros(0));
    }
    if ridge > 0.0 {
        let gram = design.transpose() * design + DMatrix::identity(p, p) * ridge;
        let rhs = design.transpose() * y;
        return gram
            .cholesky()
            .map(|c| c.solve(&rhs))
            .ok_or_else(|| Error::Singular(format!("ridge system for target x{}", target + 1)));
    }
    let deficient = deficient_columns(design);
    if !deficient.is_empty() {
        return Err(Error::RankDeficient {
            target: target + 1,
            columns: deficient.into_iter().map(name).collect(),
        });
    }
    design
        .clone()
        .svd(true, true)
        .solve(y, 0.0)
        .map_err(|e| Error::Singular(format!("least squares for target x{}: {e}", target + 1)))
}

/// How [`predict`] treats process noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictMode {
    Noiseless,
    /// Draws `v(t) ~ N(0, diag(noise_std_hat^2))` from the given seed.
    Sampled(u64),
}

/// Rolls the fitted model forward from `x0` under `inputs`.
pub fn predict(model: &EstimatedModel, x0: &[f64], inputs: &DMatrix<f64>, mode: PredictMode) -> Result<Trajectory> {
    check_dim("x0", model.state_dim, x0.len())?;
    check_dim("input columns", model.input_dim, inputs.ncols())?;
    check_finite("x0", x0.iter())?;
    check_finite("inputs", inputs.iter())?;
    Ok(match mode {
        PredictMode::Noiseless => rollout(model, x0, inputs, None),
        PredictMode::Sampled(seed) => {
            let mut rng = noise_rng(seed);
            rollout(model, x0, inputs, Some(&mut rng))
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{chirp_signal, mean_trajectory, simulate, LtiModel, SystemModel};
    use proptest::prelude::*;

    fn appendix_c(sigma: f64) -> SystemModel {
        let a = DMatrix::from_row_slice(3, 3, &[0.9, -0.75, 1.2, 0.0, 0.9, -1.1, 0.0, 0.0, 0.7]);
        let b = DMatrix::from_row_slice(3, 3, &[0.03, 0.0, 0.0, 0.0, 0.06, 0.0, 0.07, 0.0, 0.05]);
        SystemModel::Lti(LtiModel::new(a, b, vec![sigma; 3]).unwrap())
    }

    fn chirp_data(plant: &SystemModel, steps: usize) -> Trajectory {
        let u = chirp_signal(steps, 1.0, 0.01, 0.2, 3).unwrap();
        simulate(plant, &[0.0; 3], &u, 17).unwrap()
    }

    fn rss(model: &EstimatedModel, data: &[Trajectory], target: usize) -> f64 {
        let mut total = 0.0;
        let mut out = vec![0.0; model.state_dim()];
        for traj in data {
            for t in 0..traj.horizon() {
                let u: Vec<f64> = traj.inputs().row(t).iter().copied().collect();
                model.step_into(&traj.state(t), &u, &mut out);
                total += (traj.states()[(t + 1, target)] - out[target]).powi(2);
            }
        }
        total
    }

    #[test]
    fn noiseless_chirp_recovers_true_matrices() {
        let plant = appendix_c(0.0);
        let data = [chirp_data(&plant, 3000)];
        let model = fit(&data, ModelKind::Linear, &ExclusionSet::new(), &FitOptions::default()).unwrap();
        let (a_hat, b_hat) = model.linearize(&[0.0; 3], &[0.0; 3]);
        let lti = plant.as_lti().unwrap();
        assert!((a_hat - lti.a()).amax() < 1e-6);
        assert!((b_hat - lti.b()).amax() < 1e-6);
    }

    #[test]
    fn sparse_row_exclusion_keeps_residual() {
        let plant = appendix_c(0.0);
        let data = [chirp_data(&plant, 3000)];
        let full = fit(&data, ModelKind::Linear, &ExclusionSet::new(), &FitOptions::default()).unwrap();
        let ex: ExclusionSet = [Exclusion::new(2, Source::State(0)), Exclusion::new(2, Source::State(1))]
            .into_iter()
            .collect();
        let restricted = fit(&data, ModelKind::Linear, &ex, &FitOptions::default()).unwrap();
        assert_eq!(restricted.coefficient(2, Regressor::Linear(Source::State(0))), Some(0.0));
        assert_eq!(restricted.coefficient(2, Regressor::Linear(Source::State(1))), Some(0.0));
        let a33 = restricted.coefficient(2, Regressor::Linear(Source::State(2))).unwrap();
        assert!((a33 - 0.7).abs() < 1e-6);
        let (r_full, r_restricted) = (rss(&full, &data, 2), rss(&restricted, &data, 2));
        assert!(r_full < 1e-12 && r_restricted < 1e-12, "{r_full} {r_restricted}");
    }

    #[test]
    fn constant_trajectory_is_rank_deficient() {
        let plant = appendix_c(0.0);
        let traj = mean_trajectory(&plant, &[0.0; 3], &DMatrix::zeros(50, 3)).unwrap();
        match fit(&[traj], ModelKind::Linear, &ExclusionSet::new(), &FitOptions::default()) {
            Err(Error::RankDeficient { columns, .. }) => {
                assert_eq!(columns, vec!["x1", "x2", "x3", "u1", "u2", "u3"]);
            }
            other => panic!("expected rank deficiency, got {other:?}"),
        }
    }

    #[test]
    fn ridge_tolerates_deficient_columns() {
        let plant = appendix_c(0.0);
        let traj = mean_trajectory(&plant, &[0.0; 3], &DMatrix::zeros(50, 3)).unwrap();
        let opts = FitOptions { intercept: false, ridge: 1e-3 };
        let model = fit(&[traj], ModelKind::Linear, &ExclusionSet::new(), &opts).unwrap();
        assert!(model.coefficients().iter().all(|c| *c == 0.0));
    }

    #[test]
    fn too_few_transitions_is_an_error() {
        let plant = appendix_c(0.0);
        let traj = chirp_data(&plant, 4);
        assert!(matches!(
            fit(&[traj], ModelKind::Linear, &ExclusionSet::new(), &FitOptions::default()),
            Err(Error::InsufficientData { .. })
        ));
    }

    #[test]
    fn integrator_prediction_interpolates_training_data() {
        let plant = SystemModel::Lti(LtiModel::new(DMatrix::identity(1, 1), DMatrix::identity(1, 1), vec![0.0]).unwrap());
        let u = chirp_signal(200, 1.0, 0.01, 0.3, 1).unwrap();
        let traj = simulate(&plant, &[0.3], &u, 0).unwrap();
        let model = fit(std::slice::from_ref(&traj), ModelKind::Linear, &ExclusionSet::new(), &FitOptions::default()).unwrap();
        let pred = predict(&model, &[0.3], &u, PredictMode::Noiseless).unwrap();
        assert!((pred.states() - traj.states()).amax() < 1e-8);
    }

    #[test]
    fn zero_model_predicts_constant_zero_after_start() {
        let model = EstimatedModel::from_parts(
            ModelKind::Linear,
            2,
            1,
            FitOptions::default(),
            DMatrix::zeros(2, 3),
            vec![0.0; 2],
            ExclusionSet::new(),
        )
        .unwrap();
        let pred = predict(&model, &[1.0, -2.0], &DMatrix::from_element(4, 1, 5.0), PredictMode::Sampled(3)).unwrap();
        assert_eq!(pred.state(0), vec![1.0, -2.0]);
        for t in 1..=4 {
            assert_eq!(pred.state(t), vec![0.0, 0.0]);
        }
    }

    #[test]
    fn self_exclusion_pins_persistence() {
        // integrator plant x(t+1) = x(t) + 0.01 u(t): excluding x1 from its own row
        // regresses the increment on u and keeps coefficient one on x1
        let plant = SystemModel::Lti(
            LtiModel::new(DMatrix::identity(1, 1), DMatrix::from_element(1, 1, 0.01), vec![1e-4]).unwrap(),
        );
        let u = chirp_signal(2000, 1.0, 0.01, 0.2, 1).unwrap();
        let traj = simulate(&plant, &[0.0], &u, 4).unwrap();
        let ex: ExclusionSet = [Exclusion::new(0, Source::State(0))].into_iter().collect();
        let model = fit(&[traj], ModelKind::Linear, &ex, &FitOptions::default()).unwrap();
        assert_eq!(model.coefficient(0, Regressor::Linear(Source::State(0))), Some(1.0));
        let b = model.coefficient(0, Regressor::Linear(Source::Input(0))).unwrap();
        assert!((b - 0.01).abs() < 1e-4, "{b}");
        assert!((model.noise_std_hat()[0] - 1e-4).abs() < 1e-5);
    }

    #[test]
    fn feature_basis_recovers_bilinear_term() {
        use crate::dynamics::{builtin_transition, BoxBounds, NonlinearModel};
        let plant = SystemModel::Nonlinear(
            NonlinearModel::new(
                builtin_transition("bilinear2").unwrap(),
                vec![0.0; 2],
                BoxBounds::symmetric(2, 2.0),
                BoxBounds::symmetric(1, 1.0),
            )
            .unwrap(),
        );
        let data: Vec<Trajectory> = (0..20)
            .map(|k| {
                let x0 = [-0.9 + 0.09 * k as f64, 0.5 - 0.05 * k as f64];
                let u = chirp_signal(15, 0.9, 0.05 + 0.01 * (k % 5) as f64, 0.3, 1).unwrap();
                simulate(&plant, &x0, &u, k).unwrap()
            })
            .collect();
        let model = fit(&data, ModelKind::FeatureBasis, &ExclusionSet::new(), &FitOptions::default()).unwrap();
        let x1x2 = Regressor::Product(Source::State(0), Source::State(1));
        assert!((model.coefficient(0, x1x2).unwrap() - 1.0).abs() < 1e-8);
        assert!((model.coefficient(1, Regressor::Linear(Source::Input(0))).unwrap() - 1.0).abs() < 1e-8);
        let (a, b) = model.linearize(&[0.5, 0.25], &[0.0]);
        assert!((a[(0, 0)] - 0.25).abs() < 1e-8 && (a[(0, 1)] - 0.5).abs() < 1e-8);
        assert!((b[(1, 0)] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn json_round_trip() {
        let plant = appendix_c(1e-4);
        let data = [chirp_data(&plant, 500)];
        let ex: ExclusionSet = [Exclusion::new(1, Source::State(0)), Exclusion::new(2, Source::Input(1))]
            .into_iter()
            .collect();
        let model = fit(&data, ModelKind::Linear, &ex, &FitOptions::default()).unwrap();
        let text = model.to_json().unwrap();
        assert!(text.contains("\"source\": \"u2\""));
        assert_eq!(EstimatedModel::from_json(&text).unwrap(), model);
    }

    #[test]
    fn regressor_names_parse_back() {
        for reg in regressors(ModelKind::FeatureBasis, 3, 2, true) {
            assert_eq!(reg.to_string().parse::<Regressor>().unwrap(), reg);
        }
        assert!("y3".parse::<Source>().is_err());
        assert!("x0".parse::<Source>().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn exclusions_and_ols_optimality(mask in prop::collection::vec(any::<bool>(), 6), seed in 0u64..1000) {
            let plant = appendix_c(1e-3);
            let u = chirp_signal(400, 1.0, 0.01, 0.2, 3).unwrap();
            let data = [simulate(&plant, &[0.0; 3], &u, seed).unwrap()];
            let sources: Vec<Source> = (0..3).map(Source::State).chain((0..3).map(Source::Input)).collect();
            // exclude a subset of sources from row 0, never x1 itself
            let ex: ExclusionSet = mask.iter().zip(&sources)
                .filter(|(on, s)| **on && **s != Source::State(0))
                .map(|(_, s)| Exclusion::new(0, *s))
                .collect();
            let model = fit(&data, ModelKind::Linear, &ex, &FitOptions::default()).unwrap();
            for e in &ex {
                prop_assert_eq!(model.coefficient(0, Regressor::Linear(e.source)), Some(0.0));
            }
            let base = rss(&model, &data, 0);
            let free: Vec<usize> = (0..6).filter(|c| !ex.iter().any(|e| e.source == sources[*c])).collect();
            for c in free {
                for delta in [1e-3, -1e-3] {
                    let mut w = model.coefficients().clone();
                    w[(0, c)] += delta;
                    let perturbed = EstimatedModel::from_parts(
                        ModelKind::Linear, 3, 3, FitOptions::default(), w, model.noise_std_hat().to_vec(), ex.clone(),
                    ).unwrap();
                    prop_assert!(rss(&perturbed, &data, 0) >= base);
                }
            }
        }

        #[test]
        fn restricted_fit_equals_regression_on_reduced_columns(drop in 0usize..6, seed in 0u64..1000) {
            let plant = appendix_c(1e-3);
            let u = chirp_signal(300, 1.0, 0.01, 0.2, 3).unwrap();
            let traj = simulate(&plant, &[0.1, 0.2, 0.3], &u, seed).unwrap();
            let source = if drop < 3 { Source::State(drop) } else { Source::Input(drop - 3) };
            prop_assume!(source != Source::State(1));
            let ex: ExclusionSet = [Exclusion::new(1, source)].into_iter().collect();
            let model = fit(std::slice::from_ref(&traj), ModelKind::Linear, &ex, &FitOptions::default()).unwrap();

            // independent route: normal equations on the design without the dropped column
            let keep: Vec<usize> = (0..6).filter(|c| *c != drop).collect();
            let t_len = traj.horizon();
            let design = DMatrix::from_fn(t_len, keep.len(), |t, k| {
                let c = keep[k];
                if c < 3 { traj.states()[(t, c)] } else { traj.inputs()[(t, c - 3)] }
            });
            let y = DVector::from_fn(t_len, |t, _| traj.states()[(t + 1, 1)]);
            let w = (design.transpose() * &design).lu().solve(&(design.transpose() * &y)).unwrap();
            for (k, c) in keep.iter().enumerate() {
                prop_assert!((model.coefficients()[(1, *c)] - w[k]).abs() < 1e-8);
            }
            prop_assert_eq!(model.coefficients()[(1, drop)], 0.0);
        }
    }
}
