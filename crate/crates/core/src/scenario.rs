//! Scenario files: a plant, the identification settings and a seed.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::causal::{Excitation, IdentifyConfig};
use crate::dynamics::{builtin_transition, chirp_signal, simulate, BoxBounds, Dynamics, LtiModel, NonlinearModel, SystemModel, TrajectoryBatch};
use crate::error::{check_dim, Error, Result};
use crate::expdesign::DesignSpace;
use crate::rng::derive_seed;
use crate::sysid::{one_based, ModelKind};

pub const SCHEMA_VERSION: u32 = 1;

pub const BUILTINS: [&str; 4] = ["appendix_c", "kinematic_robot", "integrator1", "bilinear2"];

/// Optional replacements for a built-in plant's parameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantOverrides {
    pub a: Option<Vec<Vec<f64>>>,
    pub b: Option<Vec<Vec<f64>>>,
    pub noise_std: Option<Vec<f64>>,
    pub state_bounds: Option<BoxBounds>,
    pub input_bounds: Option<BoxBounds>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum PlantSpec {
    Builtin {
        name: String,
        #[serde(default)]
        overrides: PlantOverrides,
    },
    Lti {
        a: Vec<Vec<f64>>,
        b: Vec<Vec<f64>>,
        noise_std: Vec<f64>,
    },
}

/// Held-out rollouts started outside the design box, used to compare the
/// initial and the structure-aware model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneralizationConfig {
    pub x0: Vec<f64>,
    #[serde(with = "one_based")]
    pub target: usize,
    #[serde(default = "default_runs")]
    pub runs: usize,
    #[serde(default = "default_gen_steps")]
    pub steps: usize,
    /// Chirp amplitude as a fraction of the input half-width.
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
}

fn default_runs() -> usize {
    10
}
fn default_gen_steps() -> usize {
    100
}
fn default_amplitude() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub name: Option<String>,
    pub plant: PlantSpec,
    pub master_seed: u64,
    /// Identification settings; a built-in plant's defaults when absent.
    #[serde(default)]
    pub identify: Option<IdentifyConfig>,
    #[serde(default)]
    pub generalization: Option<GeneralizationConfig>,
    #[serde(default)]
    pub output_dir: Option<String>,
}

/// A validated scenario ready to run.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub plant: SystemModel,
    pub identify: IdentifyConfig,
    pub master_seed: u64,
    pub generalization: Option<GeneralizationConfig>,
    pub output_dir: Option<String>,
}

fn matrix(rows: &[Vec<f64>], name: &str) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    for row in rows {
        check_dim(&format!("{name} row length"), c, row.len())?;
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

fn appendix_c_plant() -> (DMatrix<f64>, DMatrix<f64>, Vec<f64>) {
    (
        DMatrix::from_row_slice(3, 3, &[0.9, -0.75, 1.2, 0.0, 0.9, -1.1, 0.0, 0.0, 0.7]),
        DMatrix::from_row_slice(3, 3, &[0.03, 0.0, 0.0, 0.0, 0.06, 0.0, 0.07, 0.0, 0.05]),
        vec![1e-4; 3],
    )
}

fn robot_plant() -> (DMatrix<f64>, DMatrix<f64>, Vec<f64>) {
    (
        DMatrix::identity(4, 4),
        DMatrix::from_diagonal(&DVector::from_vec(vec![0.013, 0.007, 0.01, 0.01])),
        vec![1e-4; 4],
    )
}

fn space(n: usize, m: usize, state: f64, input: f64) -> DesignSpace {
    DesignSpace {
        state: BoxBounds::symmetric(n, state),
        input: BoxBounds::symmetric(m, input),
    }
}

/// Default identification settings of a built-in plant.
pub fn builtin_identify(name: &str) -> Result<IdentifyConfig> {
    Ok(match name {
        "appendix_c" => IdentifyConfig::new(space(3, 3, 1.0, 1.0)),
        "kinematic_robot" => {
            let mut cfg = IdentifyConfig::new(space(4, 4, 1.0, 1.0));
            // cheap inputs keep the slow integrator loop insensitive to model error
            cfg.steering.r = Some((0..4).map(|i| (0..4).map(|j| if i == j { 0.01 } else { 0.0 }).collect()).collect());
            cfg
        }
        "integrator1" => {
            let mut cfg = IdentifyConfig::new(space(1, 1, 1.0, 0.1));
            cfg.excitation = Excitation::Chirp {
                steps: 500,
                amplitude: 1.0,
                f0: 0.01,
                f1: 0.2,
            };
            cfg
        }
        "bilinear2" => {
            let mut cfg = IdentifyConfig::new(space(2, 1, 1.0, 1.0));
            cfg.model_kind = ModelKind::FeatureBasis;
            cfg.excitation = Excitation::RandomSegments { segments: 200, steps: 5 };
            cfg.rest_state = Some(vec![1.0, 1.0]);
            cfg
        }
        other => return Err(Error::Config(format!("unknown built-in plant `{other}`"))),
    })
}

fn builtin_plant(name: &str, o: &PlantOverrides) -> Result<SystemModel> {
    let lti = |(a, b, s): (DMatrix<f64>, DMatrix<f64>, Vec<f64>)| -> Result<SystemModel> {
        if o.state_bounds.is_some() || o.input_bounds.is_some() {
            return Err(Error::Config(format!("built-in `{name}` is linear and takes no bounds")));
        }
        let a = o.a.as_deref().map(|r| matrix(r, "A")).transpose()?.unwrap_or(a);
        let b = o.b.as_deref().map(|r| matrix(r, "B")).transpose()?.unwrap_or(b);
        let s = o.noise_std.clone().unwrap_or(s);
        Ok(SystemModel::Lti(LtiModel::new(a, b, s)?))
    };
    match name {
        "appendix_c" => lti(appendix_c_plant()),
        "kinematic_robot" => lti(robot_plant()),
        "integrator1" => lti((DMatrix::identity(1, 1), DMatrix::identity(1, 1), vec![1e-3])),
        "bilinear2" => {
            if o.a.is_some() || o.b.is_some() {
                return Err(Error::Config("built-in `bilinear2` has no A/B matrices".into()));
            }
            let transition = builtin_transition("bilinear2").expect("bilinear2 is built in");
            Ok(SystemModel::Nonlinear(NonlinearModel::new(
                transition,
                o.noise_std.clone().unwrap_or(vec![1e-3; 2]),
                o.state_bounds.clone().unwrap_or(BoxBounds::symmetric(2, 2.0)),
                o.input_bounds.clone().unwrap_or(BoxBounds::symmetric(1, 1.0)),
            )?))
        }
        other => Err(Error::Config(format!("unknown built-in plant `{other}`"))),
    }
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// A built-in scenario with its default settings.
    pub fn builtin(name: &str, master_seed: u64) -> Result<Self> {
        builtin_identify(name)?;
        Ok(Self {
            schema_version: SCHEMA_VERSION,
            name: Some(name.to_string()),
            plant: PlantSpec::Builtin {
                name: name.to_string(),
                overrides: PlantOverrides::default(),
            },
            master_seed,
            identify: None,
            generalization: None,
            output_dir: None,
        })
    }

    /// Validates every field and builds the plant.
    pub fn resolve(&self) -> Result<Scenario> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let (plant, default_identify, default_name) = match &self.plant {
            PlantSpec::Builtin { name, overrides } => (builtin_plant(name, overrides)?, Some(builtin_identify(name)?), name.clone()),
            PlantSpec::Lti { a, b, noise_std } => (
                SystemModel::Lti(LtiModel::new(matrix(a, "A")?, matrix(b, "B")?, noise_std.clone())?),
                None,
                "lti".to_string(),
            ),
        };
        let identify = match (&self.identify, default_identify) {
            (Some(cfg), _) => cfg.clone(),
            (None, Some(cfg)) => cfg,
            (None, None) => return Err(Error::Config("explicit plants need an `identify` section".into())),
        };
        let (n, m) = (plant.state_dim(), plant.input_dim());
        identify.validate(n, m).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(g) = &self.generalization {
            check_dim("generalization x0", n, g.x0.len()).map_err(|e| Error::Config(e.to_string()))?;
            if g.target >= n || g.runs < 1 || g.steps < 1 || !g.x0.iter().all(|v| v.is_finite()) {
                return Err(Error::Config("generalization needs a valid target, runs >= 1, steps >= 1 and finite x0".into()));
            }
            if !(g.amplitude.is_finite() && g.amplitude >= 0.0) {
                return Err(Error::Config("generalization amplitude must be finite and >= 0".into()));
            }
        }
        Ok(Scenario {
            name: self.name.clone().unwrap_or(default_name),
            plant,
            identify,
            master_seed: self.master_seed,
            generalization: self.generalization.clone(),
            output_dir: self.output_dir.clone(),
        })
    }
}

impl Scenario {
    /// Noisy held-out runs of the plant for the generalization comparison.
    pub fn held_out(&self, g: &GeneralizationConfig, seed: u64) -> Result<TrajectoryBatch> {
        let input = &self.identify.space.input;
        let m = self.plant.input_dim();
        let chirp = chirp_signal(g.steps, 1.0, 0.01, 0.2, m)?;
        let center = input.center();
        let u = DMatrix::from_fn(g.steps, m, |t, j| center[j] + g.amplitude * input.half_width(j) * chirp[(t, j)]);
        let runs = (0..g.runs)
            .map(|k| simulate(&self.plant, &g.x0, &u, derive_seed(seed, &[0x6e6, k as u64])))
            .collect::<Result<Vec<_>>>()?;
        TrajectoryBatch::new(runs, "held-out")
    }
}
