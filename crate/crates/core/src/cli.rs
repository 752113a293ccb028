//! Command-line front end: runs scenarios and checks graphs against the
//! matrix-power oracle.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::causal::{generalization_report, ground_truth, identify_structure, CausalGraph, EdgeMismatch, GeneralizationReport, Identification};
use crate::dynamics::{SystemModel, Trajectory};
use crate::error::{Error, Result};
use crate::expdesign::ExperimentKind;
use crate::rng::derive_seed;
use crate::scenario::{Scenario, ScenarioConfig};
use crate::sysid::{predict, PredictMode, Source};

pub const EXIT_OK: i32 = 0;
pub const EXIT_MISMATCH: i32 = 1;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

pub const THREADS_ENV: &str = "CAUSALID_THREADS";

const TAG_HELD_OUT: u64 = 0x4e1d;

#[derive(Debug, Parser)]
#[command(name = "causalid", version, about = "Causal structure identification by steered paired experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Only print errors.
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a scenario and write graph, tables, trajectories and models.
    Run {
        config: PathBuf,
        /// Override the scenario's master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: the scenario's `output_dir`, else `out/<name>`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare a graph.json with the ground truth of an LTI scenario's plant.
    Verify { graph: PathBuf, config: PathBuf },
}

/// Why a command stopped early. Maps onto an exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invalid(_) => EXIT_INVALID,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

/// Module an error originates from, for messages.
fn module_of(e: &Error) -> &'static str {
    match e {
        Error::RankDeficient { .. } | Error::InsufficientData { .. } => "sysid",
        Error::NotControllable { .. } | Error::RiccatiNoConvergence { .. } | Error::SteeringFailure { .. } | Error::Singular(_) => "control",
        Error::DesignFailure { .. } => "expdesign",
        Error::Config(_) => "cli",
        Error::Io(_) | Error::Json(_) | Error::Csv(_) => "io",
        _ => "causal",
    }
}

fn module_of_message(msg: &str) -> &'static str {
    if msg.contains("steering") || msg.contains("Riccati") || msg.contains("controllable") || msg.contains("singular") {
        "control"
    } else if msg.contains("experiment design") {
        "expdesign"
    } else {
        "causal"
    }
}

/// Caps rayon's global pool from `CAUSALID_THREADS`. Unset means rayon's default.
pub fn configure_threads() -> std::result::Result<(), CliError> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let threads: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&t| t > 0)
        .ok_or_else(|| CliError::Invalid(format!("{THREADS_ENV} must be a positive integer, got `{raw}`")))?;
    // a pool built earlier in this process wins; that is fine for tests
    if rayon::ThreadPoolBuilder::new().num_threads(threads).build_global().is_err() {
        warn!("rayon pool already initialised; {THREADS_ENV} ignored");
    }
    Ok(())
}

/// Entry in `index.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub path: String,
    /// `json`, `csv` or `text`.
    pub format: String,
}

/// `index.json`: what a run produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunIndex {
    pub scenario: String,
    pub master_seed: u64,
    pub exit_code: i32,
    pub non_causal: Vec<String>,
    pub failures: Vec<String>,
    pub files: Vec<IndexEntry>,
}

/// Result of [`run_scenario`].
#[derive(Debug, Clone)]
pub struct RunReport {
    pub scenario: Scenario,
    pub identification: Identification,
    pub generalization: Option<GeneralizationReport>,
    pub out_dir: PathBuf,
    pub index: RunIndex,
}

impl RunReport {
    pub fn exit_code(&self) -> i32 {
        self.index.exit_code
    }
}

/// Loads and validates a scenario file, applying a seed override.
pub fn load_scenario(path: &Path, seed: Option<u64>) -> std::result::Result<Scenario, CliError> {
    let mut cfg = ScenarioConfig::load(path).map_err(|e| CliError::Invalid(format!("cli: {}: {e}", path.display())))?;
    if let Some(s) = seed {
        cfg.master_seed = s;
    }
    cfg.resolve().map_err(|e| CliError::Invalid(format!("cli: {}: {e}", path.display())))
}

fn default_out(scenario: &Scenario) -> PathBuf {
    scenario
        .output_dir
        .as_ref()
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("out").join(&scenario.name))
}

/// Runs identification and writes every output file. Pair failures still
/// produce outputs; the report's exit code is then [`EXIT_RUNTIME`].
pub fn run_scenario(scenario: Scenario, out: Option<&Path>) -> std::result::Result<RunReport, CliError> {
    let out_dir = out.map(Path::to_path_buf).unwrap_or_else(|| default_out(&scenario));
    info!("running `{}` with seed {}", scenario.name, scenario.master_seed);
    let id = identify_structure(&scenario.plant, &scenario.identify, scenario.master_seed)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", module_of(&e))))?;
    let generalization = match &scenario.generalization {
        Some(g) => {
            let held = scenario
                .held_out(g, derive_seed(scenario.master_seed, &[TAG_HELD_OUT]))
                .and_then(|h| generalization_report(&id.model_init, &id.model_caus, &h, g.target).map(|r| (h, r)))
                .map_err(|e| CliError::Runtime(format!("{}: generalization: {e}", module_of(&e))))?;
            Some(held)
        }
        None => None,
    };
    let exit_code = if id.graph.failures.is_empty() { EXIT_OK } else { EXIT_RUNTIME };
    let files = write_outputs(&out_dir, &scenario, &id, generalization.as_ref())
        .map_err(|e| CliError::Runtime(format!("io: writing {}: {e}", out_dir.display())))?;
    let index = RunIndex {
        scenario: scenario.name.clone(),
        master_seed: scenario.master_seed,
        exit_code,
        non_causal: id.graph.non_causal_pairs().iter().map(|(s, i)| format!("{s} -> x{}", i + 1)).collect(),
        failures: failure_lines(&id.graph),
        files,
    };
    let text = serde_json::to_string_pretty(&index).map_err(|e| CliError::Runtime(format!("io: {e}")))?;
    fs::write(out_dir.join("index.json"), text + "\n").map_err(|e| CliError::Runtime(format!("io: {e}")))?;
    Ok(RunReport {
        scenario,
        identification: id,
        generalization: generalization.map(|(_, r)| r),
        out_dir,
        index,
    })
}

fn failure_lines(graph: &CausalGraph) -> Vec<String> {
    graph
        .failures
        .iter()
        .map(|f| {
            let targets: Vec<String> = f.targets.iter().map(|i| format!("x{}", i + 1)).collect();
            format!("{}: {} -> {{{}}}: {}", module_of_message(&f.message), f.source, targets.join(", "), f.message)
        })
        .collect()
}

fn write_outputs(
    dir: &Path,
    scenario: &Scenario,
    id: &Identification,
    generalization: Option<&(crate::dynamics::TrajectoryBatch, GeneralizationReport)>,
) -> Result<Vec<IndexEntry>> {
    let traj_dir = dir.join("trajectories");
    fs::create_dir_all(&traj_dir)?;
    let mut files = Vec::new();
    let mut put = |name: String, format: &str, body: String| -> Result<()> {
        fs::write(dir.join(&name), body)?;
        files.push(IndexEntry { path: name, format: format.into() });
        Ok(())
    };
    put("graph.json".into(), "json", id.graph.to_json()? + "\n")?;
    put("tables.txt".into(), "text", tables(id))?;
    put("model_init.json".into(), "json", id.model_init.to_json()? + "\n")?;
    put("model_caus.json".into(), "json", id.model_caus.to_json()? + "\n")?;
    put("generalization.txt".into(), "text", generalization_text(scenario, generalization.map(|g| &g.1)))?;

    put("trajectories/excitation.csv".into(), "csv", runs_csv(id.excitation.iter())?)?;
    for (k, rec) in id.experiments.iter().enumerate() {
        for (arm, name) in ["I", "II"].iter().enumerate() {
            let path = format!("trajectories/exp{:02}_{}_{}.csv", k + 1, rec.design.spec.id().replace(':', "_"), name);
            put(path, "csv", runs_csv(rec.data.arms[arm].runs().iter())?)?;
        }
    }
    if let Some((held, report)) = generalization {
        put("trajectories/generalization.csv".into(), "csv", generalization_csv(id, held, report.target)?)?;
    }
    Ok(files)
}

/// Runs stacked in one CSV with a leading `run` column (gnuplot: `every` or
/// filter on column 1).
fn runs_csv<'a>(runs: impl Iterator<Item = &'a Trajectory>) -> Result<String> {
    let mut out = String::new();
    for (r, run) in runs.enumerate() {
        let mut buf = Vec::new();
        run.write_csv(&mut buf)?;
        let text = String::from_utf8(buf).expect("csv output is utf-8");
        for (l, line) in text.lines().enumerate() {
            if l == 0 {
                if r == 0 {
                    writeln!(out, "run,{line}").unwrap();
                }
                continue;
            }
            writeln!(out, "{r},{line}").unwrap();
        }
    }
    Ok(out)
}

fn generalization_csv(id: &Identification, held: &crate::dynamics::TrajectoryBatch, target: usize) -> Result<String> {
    let mut out = String::from("run,t,measured,pred_init,pred_caus\n");
    for (r, run) in held.runs().iter().enumerate() {
        let pi = predict(&id.model_init, &run.initial_state(), run.inputs(), PredictMode::Noiseless)?;
        let pc = predict(&id.model_caus, &run.initial_state(), run.inputs(), PredictMode::Noiseless)?;
        for t in 0..=run.horizon() {
            let at = |tr: &Trajectory| if t <= tr.horizon() { tr.states()[(t, target)].to_string() } else { String::new() };
            writeln!(out, "{r},{t},{},{},{}", run.states()[(t, target)], at(&pi), at(&pc)).unwrap();
        }
    }
    Ok(out)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.3e}"))
}

/// Two tables (state sources, input sources): pair, empirical MMD², threshold,
/// decision. Untested pairs show `-`.
pub fn tables(id: &Identification) -> String {
    let g = &id.graph;
    let mut out = String::new();
    writeln!(out, "noise floor {:.3e}  delta1 {:.3e}  delta2 {:.3e}", id.noise_floor, id.delta1, id.delta2).unwrap();
    for (title, head, states) in [("Causal influences of states on states", "State", true), ("Causal influences of inputs on states", "Input", false)] {
        writeln!(out, "\n{title}").unwrap();
        writeln!(out, "{:<12} {:>12} {:>12} {:>12} {:>11}  note", format!("{head} -> x"), "MMD^2", "threshold", "predicted", "decision").unwrap();
        for s in g.sources().into_iter().filter(|s| s.is_state() == states) {
            for i in 0..g.state_dim {
                let pair = format!("{s} -> x{}", i + 1);
                let verdict = if g.is_causal(s, i) { "causal" } else { "non-causal" };
                match g.evidence.iter().find(|r| r.source == s && r.target == i) {
                    Some(r) => {
                        let mut note = Vec::new();
                        if r.forced {
                            note.push("forced");
                        }
                        if r.subtract_initial {
                            note.push("increments");
                        }
                        writeln!(
                            out,
                            "{pair:<12} {:>12} {:>12} {:>12} {verdict:>11}  {}",
                            format!("{:.3e}", r.mmd2_empirical),
                            format!("{:.3e}", r.threshold),
                            fmt_opt(r.predicted_mmd),
                            note.join(",")
                        )
                        .unwrap();
                    }
                    None => writeln!(out, "{pair:<12} {:>12} {:>12} {:>12} {verdict:>11}  untested", "-", "-", "-").unwrap(),
                }
            }
        }
    }
    let lines = failure_lines(g);
    if !lines.is_empty() {
        writeln!(out, "\nFailures").unwrap();
        for l in lines {
            writeln!(out, "{l}").unwrap();
        }
    }
    out
}

fn generalization_text(scenario: &Scenario, report: Option<&GeneralizationReport>) -> String {
    match (scenario.generalization.as_ref(), report) {
        (Some(g), Some(r)) => format!(
            "held-out x0 {:?}, target x{}, {} runs x {} steps\nrmse_init {:.6e}\nrmse_caus {:.6e}\nratio {:.4}\n",
            g.x0,
            r.target + 1,
            g.runs,
            g.steps,
            r.rmse_init,
            r.rmse_caus,
            r.rmse_caus / r.rmse_init
        ),
        _ => "no generalization configured\n".into(),
    }
}

/// Edge mismatches between `graph` and the ground truth of `scenario`'s plant.
pub fn verify_graph(graph: &CausalGraph, scenario: &Scenario) -> std::result::Result<Vec<EdgeMismatch>, CliError> {
    let SystemModel::Lti(lti) = &scenario.plant else {
        return Err(CliError::Invalid("cli: verify is unsupported for nonlinear plants (the oracle is defined for LTI only)".into()));
    };
    let truth = ground_truth(lti.a(), lti.b(), scenario.identify.design.horizon).map_err(|e| CliError::Invalid(format!("causal: {e}")))?;
    graph.diff(&truth).map_err(|e| CliError::Invalid(format!("cli: graph does not fit the plant: {e}")))
}

pub fn verify_files(graph_path: &Path, config_path: &Path) -> std::result::Result<Vec<EdgeMismatch>, CliError> {
    let scenario = load_scenario(config_path, None)?;
    let text = fs::read_to_string(graph_path).map_err(|e| CliError::Invalid(format!("cli: cannot read {}: {e}", graph_path.display())))?;
    let graph = CausalGraph::from_json(&text).map_err(|e| CliError::Invalid(format!("cli: {}: {e}", graph_path.display())))?;
    verify_graph(&graph, &scenario)
}

fn summary(report: &RunReport) -> String {
    let g = &report.identification.graph;
    let mut out = format!("{}: seed {}\n", report.scenario.name, report.scenario.master_seed);
    let nc = &report.index.non_causal;
    writeln!(out, "non-causal ({}): {}", nc.len(), if nc.is_empty() { "none".into() } else { nc.join(", ") }).unwrap();
    let tests = g.evidence.len();
    let states = g.evidence.iter().filter(|r| matches!(r.source, Source::State(_))).count();
    writeln!(out, "tests: {tests} ({states} state, {} input)", tests - states).unwrap();
    let kinds = report.identification.experiments.iter().filter(|e| e.design.spec.kind() == ExperimentKind::StateTest).count();
    writeln!(out, "experiments: {} ({kinds} state tests)", report.identification.experiments.len()).unwrap();
    if let Some(r) = &report.generalization {
        writeln!(out, "generalization x{}: rmse_init {:.3e}, rmse_caus {:.3e}", r.target + 1, r.rmse_init, r.rmse_caus).unwrap();
    }
    write!(out, "outputs: {}", report.out_dir.display()).unwrap();
    out
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let level = if cli.quiet { log::LevelFilter::Error } else { log::LevelFilter::Info };
    let _ = env_logger::Builder::new().filter_level(level).parse_default_env().try_init();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return e.exit_code();
    }
    match cli.command {
        Command::Run { config, seed, out } => {
            let result = load_scenario(&config, seed).and_then(|s| run_scenario(s, out.as_deref()));
            match result {
                Ok(report) => {
                    if !cli.quiet {
                        println!("{}", summary(&report));
                    }
                    for f in &report.index.failures {
                        eprintln!("error: {f}");
                    }
                    report.exit_code()
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    e.exit_code()
                }
            }
        }
        Command::Verify { graph, config } => match verify_files(&graph, &config) {
            Ok(m) if m.is_empty() => {
                if !cli.quiet {
                    println!("graph matches the ground truth");
                }
                EXIT_OK
            }
            Ok(m) => {
                for mm in &m {
                    println!("mismatch: {mm}");
                }
                EXIT_MISMATCH
            }
            Err(e) => {
                eprintln!("error: {e}");
                e.exit_code()
            }
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn malformed_config_exits_2_without_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_config(dir.path(), "bad.json", "{\"schema_version\": 1, \"plant\": ");
        let out = dir.path().join("out");
        let code = main_with_args(["causalid", "--quiet", "run", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert_eq!(code, EXIT_INVALID);
        assert!(!out.exists());
    }

    #[test]
    fn unknown_builtin_is_a_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_config(
            dir.path(),
            "c.json",
            r#"{"schema_version": 1, "master_seed": 1, "plant": {"type": "builtin", "name": "nope"}}"#,
        );
        let err = load_scenario(&cfg, None).unwrap_err();
        assert_eq!(err.exit_code(), EXIT_INVALID);
        assert!(err.to_string().contains("nope"));
    }

    #[test]
    fn runs_csv_stacks_runs_under_one_header() {
        let t = Trajectory::new(nalgebra::DMatrix::from_row_slice(2, 1, &[0.0, 1.0]), nalgebra::DMatrix::from_row_slice(1, 1, &[0.5])).unwrap();
        let text = runs_csv([t.clone(), t].iter()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "run,t,x1,u1");
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[3], "1,0,0,0.5");
    }

    #[test]
    fn error_modules_are_named() {
        assert_eq!(module_of(&Error::RiccatiNoConvergence { iterations: 3 }), "control");
        assert_eq!(module_of(&Error::DesignFailure { source_name: "x1".into() }), "expdesign");
        assert_eq!(module_of_message("steering failed for I arm"), "control");
    }
}
