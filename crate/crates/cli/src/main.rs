//! `nearopt` command-line front end.
//!
//! Exit codes: 0 success (an inconclusive verdict counts as success), 1 domain
//! failure, 2 usage error.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;

use nearopt::config::{read_control_csv, write_control_csv, RunConfig};
use nearopt::forward::strong_cost;
use nearopt::model::{validate_problem, ControlProcess, ControlSet, ProblemSpec};
use nearopt::nearopt::{certify_necessary, certify_sufficient, write_order_csv, Verdict};
use nearopt::optimizer::{order_study, smp_descent};
use nearopt::oracle::{exhaustive_control_search, riccati_lq, MAX_SEARCH_STEPS};
use nearopt::paths::{sample_noise, TimeGrid};

const OUT_DIR_ENV: &str = "NEAROPT_OUT_DIR";
const DEFAULT_OUT_DIR: &str = "nearopt-out";

#[derive(Parser, Debug)]
#[command(name = "nearopt", version, about = "Near-optimality certificates for partially observed FBSDE control")]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Overrides `simulation.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory. Falls back to `output.dir`, then $NEAROPT_OUT_DIR.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check every coefficient partial against finite differences.
    Validate,
    /// Run the maximum-principle descent and write its trace.
    Solve,
    /// Certify a control file against the near-optimality conditions.
    Certify {
        /// Control CSV (`step,u0,...`).
        #[arg(long)]
        control: PathBuf,
        /// Sufficient-condition certificate (convexity probes included).
        #[arg(long)]
        sufficient: bool,
        /// Constant C; overrides the config and `--order-study`.
        #[arg(long)]
        constant: Option<f64>,
        /// Claimed epsilon; otherwise J(u) minus the oracle value.
        #[arg(long)]
        epsilon: Option<f64>,
        /// Take C from the fit in an `order-study` JSON report.
        #[arg(long)]
        order_study: Option<PathBuf>,
        /// Oracle JSON from `oracle-compare`, used when epsilon is not given.
        #[arg(long)]
        oracle: Option<PathBuf>,
    },
    /// Perturb the oracle optimum and fit the order of the gap.
    OrderStudy,
    /// Compare oracle values with the Monte Carlo pipeline.
    OracleCompare,
}

/// Errors that map to exit code 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Serialize)]
struct Metadata {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    generated_at_unix: u64,
}

impl Metadata {
    fn new(command: &'static str) -> Self {
        Self {
            tool: "nearopt",
            version: env!("CARGO_PKG_VERSION"),
            command,
            generated_at_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        }
    }
}

#[derive(Serialize)]
struct Report<T: Serialize> {
    metadata: Metadata,
    #[serde(flatten)]
    body: T,
}

struct Run {
    cfg: RunConfig,
    spec: ProblemSpec,
    grid: TimeGrid,
    out: PathBuf,
}

impl Run {
    fn load(cli: &Cli) -> Result<Self> {
        let mut cfg = match &cli.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
                RunConfig::from_toml_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?
            }
            None => RunConfig::default(),
        };
        if let Some(seed) = cli.seed {
            cfg.simulation.seed = seed;
        }
        let out = cli
            .out
            .clone()
            .or_else(|| cfg.output.dir.clone())
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));
        let spec = cfg.build_spec().map_err(|e| usage(e.to_string()))?;
        let grid = cfg.time_grid(&spec).map_err(|e| usage(e.to_string()))?;
        Ok(Self { cfg, spec, grid, out })
    }

    fn path(&self, name: &str) -> Result<PathBuf> {
        fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        Ok(self.out.join(name))
    }

    fn write_json<T: Serialize>(&self, name: &str, command: &'static str, body: T) -> Result<PathBuf> {
        let path = self.path(name)?;
        let report = Report {
            metadata: Metadata::new(command),
            body,
        };
        let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        serde_json::to_writer_pretty(BufWriter::new(file), &report)?;
        Ok(path)
    }

    /// Riccati value over deterministic controls, for degenerate LQ instances
    /// without an injected defect.
    fn riccati(&self) -> Result<Option<nearopt::oracle::RiccatiSolution>> {
        match self.cfg.lq_params() {
            Some(p) if p.is_degenerate() && self.cfg.instance.defect.is_none() => {
                Ok(Some(riccati_lq(&p, self.cfg.oracle.ode_steps)?))
            }
            _ => Ok(None),
        }
    }

    fn read_control(&self, path: &Path) -> Result<ControlProcess> {
        let file = File::open(path).map_err(|e| usage(format!("cannot open control {}: {e}", path.display())))?;
        read_control_csv(file, self.grid, &self.spec.control_set)
            .with_context(|| format!("reading control {}", path.display()))
    }
}

fn cmd_validate(run: &Run) -> Result<bool> {
    let v = &run.cfg.validate;
    let report = validate_problem(&run.spec, v.samples, run.cfg.simulation.seed, v.tol)?;
    let path = run.write_json("validation.json", "validate", &report)?;
    if report.passed {
        println!("validation passed: {} (max discrepancy {:.3e})", run.spec.name, report.max_discrepancy);
    } else {
        let names: Vec<&str> = report.failing_coefficients().iter().map(|c| c.as_str()).collect();
        println!("validation failed for {}: {}", run.spec.name, names.join(", "));
    }
    println!("report: {}", path.display());
    Ok(report.passed)
}

#[derive(Serialize)]
struct SolveSummary {
    instance: String,
    termination: nearopt::optimizer::Termination,
    iterations: usize,
    final_cost: f64,
    final_stderr: f64,
    final_min_gap: f64,
    final_gap_stderr: f64,
    oracle_value: Option<f64>,
    relative_error: Option<f64>,
}

fn cmd_solve(run: &Run) -> Result<bool> {
    let set = &run.spec.control_set;
    let u0 = match (&run.cfg.solver.initial_control, &run.cfg.solver.initial_value) {
        (Some(path), _) => run.read_control(path)?,
        (None, Some(v)) => ControlProcess::constant(run.grid, v, set).context("solver.initial_value")?,
        (None, None) => ControlProcess::constant(run.grid, &set.center(), set)?,
    };
    let trace = smp_descent(&run.spec, &u0, &run.cfg.descent_params())?;
    let last = trace.last();
    let oracle_value = run.riccati()?.map(|r| r.open_loop_cost);
    let summary = SolveSummary {
        instance: run.spec.name.clone(),
        termination: trace.termination,
        iterations: trace.records.len() - 1,
        final_cost: last.cost,
        final_stderr: last.stderr,
        final_min_gap: last.min_gap,
        final_gap_stderr: last.gap_stderr,
        oracle_value,
        relative_error: oracle_value.map(|v| (last.cost - v).abs() / v.abs().max(f64::MIN_POSITIVE)),
    };
    trace.write_csv(File::create(run.path("trace.csv")?)?)?;
    write_control_csv(trace.final_control(), File::create(run.path("control.csv")?)?)?;
    let path = run.write_json("solve.json", "solve", &summary)?;
    println!(
        "{:?} after {} iterations: J = {:.6} +- {:.1e}, min gap {:.3e}",
        summary.termination, summary.iterations, summary.final_cost, summary.final_stderr, summary.final_min_gap
    );
    if let (Some(v), Some(rel)) = (summary.oracle_value, summary.relative_error) {
        println!("oracle {v:.6}, relative error {rel:.2e}");
    }
    println!("outputs in {}", path.parent().unwrap_or(Path::new(".")).display());
    Ok(true)
}

fn json_number(path: &Path, pointer: &str) -> Result<f64> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    value
        .pointer(pointer)
        .and_then(serde_json::Value::as_f64)
        .ok_or_else(|| usage(format!("{} has no number at {pointer}", path.display())))
}

struct CertifyArgs<'a> {
    control: &'a Path,
    sufficient: bool,
    constant: Option<f64>,
    epsilon: Option<f64>,
    order_study: Option<&'a Path>,
    oracle: Option<&'a Path>,
}

fn cmd_certify(run: &Run, args: CertifyArgs<'_>) -> Result<bool> {
    let constant = match (args.constant, run.cfg.certificate.constant, args.order_study) {
        (Some(c), ..) | (None, Some(c), _) => c,
        (None, None, Some(path)) => json_number(path, "/fit/constant")?,
        (None, None, None) => {
            return Err(usage("no constant C: pass --constant, --order-study or set certificate.constant"))
        }
    };
    let u = run.read_control(args.control)?;
    let sim = &run.cfg.simulation;
    let basis = run.cfg.basis();
    let noise = sample_noise(&run.grid, sim.n_paths, sim.seed)?;
    let epsilon = match args.epsilon.or(run.cfg.certificate.epsilon) {
        Some(e) => e,
        None => {
            let v = match args.oracle {
                Some(path) => json_number(path, "/value")?,
                None => match run.riccati()? {
                    Some(r) => r.open_loop_cost,
                    None => bail!(nearopt::Error::MissingOracle(format!(
                        "instance {} has no oracle; pass --epsilon or --oracle",
                        run.spec.name
                    ))),
                },
            };
            (strong_cost(&run.spec, &u, &noise, basis)?.j - v).max(0.0)
        }
    };
    let cert = if args.sufficient {
        let c = &run.cfg.certificate;
        certify_sufficient(&run.spec, &u, epsilon, c.lambda, constant, &noise, basis, c.convexity_probes, sim.seed)?
    } else {
        certify_necessary(&run.spec, &u, epsilon, constant, &noise, basis)?
    };
    let path = run.write_json("certificate.json", "certify", &cert)?;
    println!(
        "verdict {}: min gap {:.4e} +- {:.1e}, threshold {:.4e} (eps {:.3e}, C {:.3})",
        serde_json::to_value(cert.verdict)?.as_str().unwrap_or("?"),
        cert.gap,
        cert.gap_stderr,
        cert.threshold,
        cert.epsilon,
        cert.constant_c
    );
    if let Some(w) = cert.convexity.as_ref().and_then(|c| c.witness.as_ref()) {
        println!("convexity witness: min eigenvalue {:.3e}", w.eigenvalue);
    }
    println!("certificate: {}", path.display());
    Ok(cert.verdict != Verdict::NecessaryViolated)
}

fn cmd_order_study(run: &Run) -> Result<bool> {
    let study_cfg = &run.cfg.order_study;
    if study_cfg.direction.len() != run.spec.control_set.dim() {
        return Err(usage(format!(
            "order_study.direction has {} components, the control has {}",
            study_cfg.direction.len(),
            run.spec.control_set.dim()
        )));
    }
    let ric = run.riccati()?.ok_or_else(|| {
        nearopt::Error::MissingOracle(format!("instance {} has no closed-form optimum", run.spec.name))
    })?;
    let u_star = ric.open_loop_control(&run.grid)?;
    let direction = vec![study_cfg.direction.clone(); run.grid.steps()];
    let sim = &run.cfg.simulation;
    let noise = sample_noise(&run.grid, sim.n_paths, sim.seed)?;
    let study = order_study(
        &run.spec,
        &u_star,
        &study_cfg.deltas,
        &direction,
        Some(ric.open_loop_cost),
        &noise,
        run.cfg.basis(),
    )?;
    write_order_csv(&study.rows, Some(&study.fit), File::create(run.path("order_study.csv")?)?)?;
    let path = run.write_json("order_study.json", "order-study", &study)?;
    if !study.dropped_deltas.is_empty() {
        println!("dropped zero deltas: {:?}", study.dropped_deltas);
    }
    println!(
        "fitted exponent {:.3}, constant {:.3} from {} points",
        study.fit.exponent,
        study.fit.constant,
        study.fit.used
    );
    println!("report: {}", path.display());
    Ok(true)
}

#[derive(Serialize)]
struct RiccatiReport {
    open_loop_cost: f64,
    feedback_cost: f64,
    max_midpoint_residual: f64,
    monte_carlo_cost: f64,
    monte_carlo_stderr: f64,
    within_3_stderr: bool,
}

#[derive(Serialize)]
struct MeshReport {
    points_per_step: usize,
    evaluated: usize,
    cost: f64,
    control: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct OracleReport {
    instance: String,
    steps: usize,
    /// Best available oracle value: Riccati if available, otherwise the mesh search.
    value: f64,
    riccati: Option<RiccatiReport>,
    mesh_search: Option<MeshReport>,
}

/// Tensor mesh of `points` per coordinate over the bounding box of `set`,
/// restricted to `set`.
fn control_mesh(set: &ControlSet, points: usize) -> Vec<Vec<f64>> {
    let (lo, hi): (Vec<f64>, Vec<f64>) = match set {
        ControlSet::Box { lower, upper } => (lower.clone(), upper.clone()),
        ControlSet::Ball { center, radius } => (
            center.iter().map(|c| c - radius).collect(),
            center.iter().map(|c| c + radius).collect(),
        ),
    };
    let axis = |c: usize| -> Vec<f64> {
        if points == 1 {
            return vec![0.5 * (lo[c] + hi[c])];
        }
        (0..points)
            .map(|k| lo[c] + (hi[c] - lo[c]) * k as f64 / (points - 1) as f64)
            .collect()
    };
    let mut mesh = vec![Vec::new()];
    for c in 0..lo.len() {
        mesh = mesh
            .into_iter()
            .flat_map(|prefix| {
                axis(c).into_iter().map(move |v| {
                    let mut p = prefix.clone();
                    p.push(v);
                    p
                })
            })
            .collect();
    }
    mesh.retain(|p| set.contains(p, 1e-12));
    mesh
}

fn cmd_oracle_compare(run: &Run) -> Result<bool> {
    let sim = &run.cfg.simulation;
    let riccati = match run.riccati()? {
        Some(ric) => {
            let u = ric.open_loop_control(&run.grid)?;
            let noise = sample_noise(&run.grid, sim.n_paths, sim.seed)?;
            let mc = strong_cost(&run.spec, &u, &noise, run.cfg.basis())?;
            Some(RiccatiReport {
                open_loop_cost: ric.open_loop_cost,
                feedback_cost: ric.feedback_cost,
                max_midpoint_residual: ric.max_midpoint_residual,
                monte_carlo_cost: mc.j,
                monte_carlo_stderr: mc.stderr,
                within_3_stderr: (mc.j - ric.open_loop_cost).abs() <= 3.0 * mc.stderr,
            })
        }
        None => None,
    };
    let mesh_search = if run.grid.steps() <= MAX_SEARCH_STEPS {
        let mesh = control_mesh(&run.spec.control_set, run.cfg.oracle.mesh_points);
        let found = exhaustive_control_search(&run.spec, &run.grid, &mesh)?;
        Some(MeshReport {
            points_per_step: mesh.len(),
            evaluated: found.evaluated,
            cost: found.cost,
            control: found.control.values(),
        })
    } else {
        None
    };
    let value = match (&riccati, &mesh_search) {
        (Some(r), _) => r.open_loop_cost,
        (None, Some(m)) => m.cost,
        (None, None) => bail!(nearopt::Error::MissingOracle(format!(
            "instance {} has no closed form and {} steps exceed the mesh-search limit of {MAX_SEARCH_STEPS}",
            run.spec.name,
            run.grid.steps()
        ))),
    };
    if let Some(r) = &riccati {
        println!(
            "riccati {:.6} vs monte carlo {:.6} +- {:.1e}",
            r.open_loop_cost, r.monte_carlo_cost, r.monte_carlo_stderr
        );
    }
    if let Some(m) = &mesh_search {
        println!("mesh search over {} assignments: {:.6}", m.evaluated, m.cost);
    }
    let report = OracleReport {
        instance: run.spec.name.clone(),
        steps: run.grid.steps(),
        value,
        riccati,
        mesh_search,
    };
    let path = run.write_json("oracle.json", "oracle-compare", &report)?;
    println!("report: {}", path.display());
    Ok(true)
}

fn dispatch(cli: &Cli) -> Result<bool> {
    let run = Run::load(cli)?;
    match &cli.command {
        Command::Validate => cmd_validate(&run),
        Command::Solve => cmd_solve(&run),
        Command::Certify {
            control,
            sufficient,
            constant,
            epsilon,
            order_study,
            oracle,
        } => cmd_certify(
            &run,
            CertifyArgs {
                control,
                sufficient: *sufficient,
                constant: *constant,
                epsilon: *epsilon,
                order_study: order_study.as_deref(),
                oracle: oracle.as_deref(),
            },
        ),
        Command::OrderStudy => cmd_order_study(&run),
        Command::OracleCompare => cmd_oracle_compare(&run),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
