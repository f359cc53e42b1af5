//! Command-line entry point: validate spaces, run capacity solvers, run the
//! extension pipeline, and run the verification suites.
//!
//! Exit codes: 0 success; 2 invalid input or schema violation; 3 iteration
//! budget exhausted; 4 index-selection cap exhausted; 5 verification suite
//! assertion failure.

mod verify;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use capmod::capacity::{
    brute_force_modulus, function_min, modulus_cg, primal_sequence, set_capacity, CondenserSpec,
};
use capmod::extension::{whitney_extend, ExtensionConfig, ExtensionProblem};
use capmod::fields::ScalarField;
use capmod::space::{MetricMeasureSpace, PointSet, SetLabel};
use capmod::Error;

const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser)]
#[command(name = "capmod", version, about = "Condenser capacity and p-modulus on finite metric measure spaces")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a space document; nonzero exit with itemized violations.
    Validate {
        /// Path to the space JSON document.
        space: PathBuf,
        #[command(flatten)]
        run: RunFlags,
    },
    /// Run a capacity solver against a space document with E/F sets.
    Cap {
        /// Path to the space JSON document.
        space: PathBuf,
        #[arg(long, value_enum)]
        method: CapMethod,
        #[command(flatten)]
        run: RunFlags,
    },
    /// Run the Whitney-type extension pipeline from a problem document.
    Extend {
        /// Path to the extension problem JSON document.
        problem: PathBuf,
        #[command(flatten)]
        run: RunFlags,
    },
    /// Run a verification suite.
    Verify {
        #[arg(long, value_enum)]
        suite: verify::Suite,
        /// Optional grid resolutions for the annulus and sweep suites.
        #[arg(long, value_delimiter = ',')]
        resolutions: Vec<usize>,
        #[command(flatten)]
        run: RunFlags,
    },
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum CapMethod {
    Modulus,
    Primal,
    Function,
    Set,
    Brute,
}

#[derive(Args, Clone)]
struct RunFlags {
    /// Integrability exponent.
    #[arg(long, default_value_t = 2.0)]
    p: f64,
    /// Mesh bound for path families; defaults to 1.01x the connectivity
    /// radius of the cloud.
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long, default_value_t = 10_000)]
    max_iter: usize,
    /// Primal-sequence depth.
    #[arg(long, default_value_t = 64)]
    i_max: usize,
    /// Slack budget (good sequences, extension energy bound).
    #[arg(long, default_value_t = 0.1)]
    eps: f64,
    /// Output path for the report; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Suppress stderr diagnostics.
    #[arg(long, default_value_t = false)]
    quiet: bool,
}

impl RunFlags {
    fn validate(&self) -> Result<(), Error> {
        if !(self.tol > 0.0) {
            return Err(Error::InvalidInput(format!("--tol must be positive, got {}", self.tol)));
        }
        if !(self.p >= 1.0) {
            return Err(Error::InvalidInput(format!("--p must be >= 1, got {}", self.p)));
        }
        if self.workers < 1 {
            return Err(Error::InvalidInput("--workers must be at least 1".into()));
        }
        Ok(())
    }

    fn config_json(&self, extra: &[(&str, serde_json::Value)]) -> serde_json::Value {
        let mut map = serde_json::Map::new();
        map.insert("p".into(), self.p.into());
        if let Some(d) = self.delta {
            map.insert("delta".into(), d.into());
        }
        map.insert("tol".into(), self.tol.into());
        map.insert("max_iter".into(), self.max_iter.into());
        map.insert("i_max".into(), self.i_max.into());
        map.insert("eps".into(), self.eps.into());
        map.insert("seed".into(), self.seed.into());
        map.insert("workers".into(), self.workers.into());
        for (k, v) in extra {
            map.insert((*k).into(), v.clone());
        }
        serde_json::Value::Object(map)
    }
}

#[derive(Serialize)]
struct Envelope<T: Serialize> {
    version: &'static str,
    command: String,
    config: serde_json::Value,
    report: T,
}

fn emit<T: Serialize>(
    envelope: &Envelope<T>,
    out: Option<&Path>,
    csv: Option<&str>,
) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(envelope).expect("report serializes");
    match out {
        Some(path) => {
            atomic_write(path, &text)?;
            if let Some(csv) = csv {
                if !csv.is_empty() {
                    atomic_write(&path.with_extension("csv"), csv)?;
                }
            }
        }
        None => println!("{text}"),
    }
    Ok(())
}

/// Writes via a sibling temp file and rename, so failures never leave a
/// partial report behind.
fn atomic_write(path: &Path, text: &str) -> Result<(), Error> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, text)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Io(_) | Error::Schema(_) => 2,
        Error::Asymmetric { .. }
        | Error::NonzeroDiagonal { .. }
        | Error::NonpositiveDistance { .. }
        | Error::NonpositiveMass { .. }
        | Error::TriangleViolation { .. }
        | Error::InvalidInput(_) => 2,
        Error::MaxIter(_) => 3,
        Error::IndexCapExhausted { .. } => 4,
        Error::Construction(_) => 2,
    }
}

fn log(quiet: bool, msg: &str) {
    if !quiet {
        eprintln!("{msg}");
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            exit_code_for(&err)
        }
    };
    ExitCode::from(code)
}

fn run(cli: Cli) -> Result<u8, Error> {
    match cli.command {
        Command::Validate { space, run } => cmd_validate(&space, &run),
        Command::Cap { space, method, run } => cmd_cap(&space, method, &run),
        Command::Extend { problem, run } => cmd_extend(&problem, &run),
        Command::Verify { suite, resolutions, run } => verify::cmd_verify(suite, &resolutions, &run),
    }
}

fn cmd_validate(path: &Path, run: &RunFlags) -> Result<u8, Error> {
    run.validate()?;
    match MetricMeasureSpace::load(path) {
        Ok(space) => {
            #[derive(Serialize)]
            struct Findings {
                valid: bool,
                points: usize,
                diameter: f64,
                min_positive_dist: f64,
                total_mass: f64,
                sets: Vec<String>,
            }
            let report = Findings {
                valid: true,
                points: space.len(),
                diameter: space.diameter(),
                min_positive_dist: space.min_positive_dist(),
                total_mass: space.total_mass(),
                sets: space.sets().keys().cloned().collect(),
            };
            let envelope = Envelope {
                version: VERSION,
                command: "validate".into(),
                config: run.config_json(&[("space", path.display().to_string().into())]),
                report,
            };
            emit(&envelope, run.out.as_deref(), None)?;
            Ok(0)
        }
        Err(err) => {
            eprintln!("invalid space: {err}");
            Ok(2)
        }
    }
}

fn required_set(space: &MetricMeasureSpace, name: &str) -> Result<PointSet, Error> {
    space
        .set(name)
        .cloned()
        .ok_or_else(|| Error::InvalidInput(format!("space document is missing the {name:?} set")))
}

fn cmd_cap(path: &Path, method: CapMethod, run: &RunFlags) -> Result<u8, Error> {
    run.validate()?;
    let space = MetricMeasureSpace::load(path)?;
    let delta = run.delta.unwrap_or_else(|| 1.01 * space.connectivity_radius());
    log(run.quiet, &format!("space: {} points, delta = {delta}", space.len()));

    let report = match method {
        CapMethod::Set => {
            let e = required_set(&space, "E")?;
            set_capacity(&e, run.p, delta, &space, run.tol)?
        }
        _ => {
            let e = required_set(&space, "E")?;
            let f = required_set(&space, "F")?;
            let spec = CondenserSpec::new(e, f, run.p, delta);
            match method {
                CapMethod::Modulus => modulus_cg(&spec, &space, run.tol, run.max_iter)?,
                CapMethod::Primal => primal_sequence(&spec, &space, None, run.eps, run.i_max)?,
                CapMethod::Function => function_min(&spec, &space, run.tol, run.max_iter)?,
                CapMethod::Brute => brute_force_modulus(&spec, &space, 10)?,
                CapMethod::Set => unreachable!(),
            }
        }
    };

    let converged = report.converged;
    let csv = report.trace_csv();
    let envelope = Envelope {
        version: VERSION,
        command: "cap".into(),
        config: run.config_json(&[
            ("space", path.display().to_string().into()),
            ("delta", delta.into()),
            ("method", format!("{:?}", report.method).into()),
        ]),
        report,
    };
    emit(&envelope, run.out.as_deref(), Some(&csv))?;
    Ok(if converged { 0 } else { 3 })
}

/// Extension problem document: an inline space plus the extension data.
#[derive(serde::Deserialize)]
struct ExtendDoc {
    space: serde_json::Value,
    f: Vec<f64>,
    g_star: Vec<f64>,
    #[serde(rename = "K")]
    k: Vec<usize>,
    x0: usize,
    #[serde(rename = "R")]
    r: f64,
    #[serde(default)]
    eps: Option<f64>,
    #[serde(default)]
    p: Option<f64>,
}

fn cmd_extend(path: &Path, run: &RunFlags) -> Result<u8, Error> {
    run.validate()?;
    let text = std::fs::read_to_string(path)?;
    let doc: ExtendDoc = serde_json::from_str(&text).map_err(Error::schema)?;
    let space = MetricMeasureSpace::from_json(&doc.space.to_string())?;
    let problem = ExtensionProblem {
        f: ScalarField::new("f", doc.f),
        g_star: ScalarField::new("g_star", doc.g_star),
        k: PointSet::new(SetLabel::K, doc.k),
        x0: doc.x0,
        r: doc.r,
        eps: doc.eps.unwrap_or(run.eps),
        p: doc.p.unwrap_or(run.p),
    };
    let result = whitney_extend(&problem, &space, &ExtensionConfig::default())?;
    let pass = result.all_structural_pass();
    log(
        run.quiet,
        &format!(
            "extension: indices {:?}, energy {:.6e} <= {:.6e}",
            result.diagnostics.indices, result.diagnostics.energy_lhs, result.diagnostics.energy_rhs
        ),
    );
    let envelope = Envelope {
        version: VERSION,
        command: "extend".into(),
        config: run.config_json(&[("problem", path.display().to_string().into())]),
        report: result.report(),
    };
    emit(&envelope, run.out.as_deref(), None)?;
    Ok(if pass { 0 } else { 5 })
}
