//! `tubepmp`: solve, verify, simulate and check optimal control problems on
//! embedded manifolds from JSON problem files.
//!
//! Exit codes: 0 pass, 1 certified failure, 2 parse error, 3 no extremal found,
//! 4 numerical failure.

use clap::{Parser, Subcommand};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;
use tubepmp::flow::{simulate, ControlSchedule, FlowOptions};
use tubepmp::problem::{bundled, LoadedProblem, ProblemFile, BUNDLED};
use tubepmp::shooting::{solve_pmp, SolveTrace};
use tubepmp::system::{check_tangency, BoundaryCondition, ControlProblem};
use tubepmp::trajectory::{verify_external, write_extremal, write_simulation_csv};
use tubepmp::PmpError;

const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Parser)]
#[command(
    name = "tubepmp",
    version,
    about = "PMP shooting solver and certificate verifier on embedded manifolds"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve a problem file and write the extremal, certificate and report.
    Solve {
        file: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        starts: Option<usize>,
        /// Output directory (created if missing).
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Certify an externally produced trajectory CSV.
    Verify { file: PathBuf, trajectory: PathBuf },
    /// Integrate the extended dynamics under an open-loop control schedule.
    Simulate {
        file: PathBuf,
        /// JSON schedule: {"switch_times": [...], "controls": [[...], ...]}.
        #[arg(long)]
        control: PathBuf,
        /// Time span as `a,b`.
        #[arg(long, value_parser = parse_span)]
        tspan: (f64, f64),
        /// Initial state as comma-separated coordinates; defaults to the start point.
        #[arg(long, value_parser = parse_point)]
        start: Option<Point>,
        #[arg(long, default_value = "simulation.csv")]
        out: PathBuf,
    },
    /// Run tangency, frame-rank and bump diagnostics on a problem file.
    Check { file: PathBuf },
    /// List the bundled problem files, or write them to a directory.
    Examples {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Comma-separated coordinates.
#[derive(Debug, Clone)]
struct Point(Vec<f64>);

fn parse_point(s: &str) -> Result<Point, String> {
    s.split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|e| format!("`{v}`: {e}")))
        .collect::<Result<_, _>>()
        .map(Point)
}

fn parse_span(s: &str) -> Result<(f64, f64), String> {
    match parse_point(s)?.0.as_slice() {
        [a, b] if b > a => Ok((*a, *b)),
        [_, _] => Err("span end must exceed its start".into()),
        _ => Err("expected `a,b`".into()),
    }
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<PmpError> for Failure {
    fn from(e: PmpError) -> Self {
        let code = match &e {
            PmpError::Parse(_) | PmpError::InvalidProblem(_) | PmpError::DimensionMismatch(_) => 2,
            PmpError::NoExtremalFound { .. } => 3,
            PmpError::OffManifold { .. } => 1,
            _ => 4,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn fail(code: u8, message: impl Into<String>) -> Failure {
    Failure {
        code,
        message: message.into(),
    }
}

type CmdResult = Result<u8, Failure>;

fn read_text(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| fail(2, format!("{}: {e}", path.display())))
}

fn load(path: &Path) -> Result<(String, LoadedProblem), Failure> {
    let text = read_text(path)?;
    let loaded = ProblemFile::load(&text).map_err(|e| {
        let mut f = Failure::from(e);
        f.message = format!("{}: {}", path.display(), f.message);
        f
    })?;
    Ok((text, loaded))
}

fn write(path: &Path, contents: &str) -> Result<(), Failure> {
    std::fs::write(path, contents).map_err(|e| fail(4, format!("{}: {e}", path.display())))
}

fn digest(text: &str) -> String {
    Sha256::digest(text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Serialize)]
struct CandidateSummary {
    terminal_time: f64,
    cost: f64,
    lambda0: f64,
    abnormal: bool,
    switching_times: Vec<f64>,
    residual: f64,
    start_index: usize,
    pass: bool,
}

/// Everything in the report is reproducible from (file, seed, build); wall time goes to stdout only.
#[derive(Serialize)]
struct RunReport {
    schema_version: u32,
    problem: String,
    problem_digest: String,
    seed: u64,
    starts: usize,
    trace: SolveTrace,
    abnormal_only: bool,
    extremal_file: String,
    certificate_file: String,
    terminal_time: f64,
    cost: f64,
    lambda0: f64,
    switching_times: Vec<f64>,
    final_state: Vec<f64>,
    residual: f64,
    pass: bool,
    candidates: Vec<CandidateSummary>,
}

fn gnuplot_script(problem: &ControlProblem, csv_name: &str) -> String {
    let n = problem.ambient_dim();
    let m = problem.control_dim();
    let (x_end, u_start) = (n + 1, 2 * n + 2);
    let u_end = 2 * n + 1 + m;
    format!(
        "set datafile separator ','\n\
         set key autotitle columnhead\n\
         set xlabel 't'\n\
         set multiplot layout 3,1\n\
         set ylabel 'state'\n\
         plot for [i=2:{x_end}] '{csv_name}' using 1:i with lines\n\
         set ylabel 'control'\n\
         plot for [i={u_start}:{u_end}] '{csv_name}' using 1:i with steps\n\
         set ylabel 'H'\n\
         plot '{csv_name}' using 1:{h} with lines\n\
         unset multiplot\n",
        h = u_end + 1
    )
}

fn cmd_solve(file: &Path, seed: Option<u64>, starts: Option<usize>, out: &Path) -> CmdResult {
    let (text, mut loaded) = load(file)?;
    if let Some(seed) = seed {
        loaded.file.solver.seed = seed;
    }
    if let Some(starts) = starts {
        loaded.file.solver.starts = starts;
    }
    let config = &loaded.file.solver;
    let problem = &loaded.problem;
    let clock = Instant::now();
    let solution = solve_pmp(problem, config, &loaded.file.verifier)?;
    let elapsed = clock.elapsed();

    std::fs::create_dir_all(out).map_err(|e| fail(4, format!("{}: {e}", out.display())))?;
    let best = &solution.best;
    let csv_name = "extremal.csv";
    write_extremal(&best.extremal, problem, &out.join(csv_name))?;
    write(
        &out.join("certificate.json"),
        &(best.certificate.to_json() + "\n"),
    )?;
    write(&out.join("plot.gp"), &gnuplot_script(problem, csv_name))?;
    let report = RunReport {
        schema_version: REPORT_SCHEMA_VERSION,
        problem: file
            .file_name()
            .map_or_else(String::new, |n| n.to_string_lossy().into_owned()),
        problem_digest: digest(&text),
        seed: config.seed,
        starts: config.starts,
        trace: solution.trace.clone(),
        abnormal_only: solution.abnormal_only,
        extremal_file: csv_name.into(),
        certificate_file: "certificate.json".into(),
        terminal_time: best.extremal.terminal_time(),
        cost: best.extremal.cost,
        lambda0: best.extremal.lambda0,
        switching_times: best.extremal.switching_times.clone(),
        final_state: best.extremal.final_state().iter().copied().collect(),
        residual: best.residual.norm,
        pass: best.certificate.pass,
        candidates: solution
            .candidates
            .iter()
            .map(|c| CandidateSummary {
                terminal_time: c.extremal.terminal_time(),
                cost: c.extremal.cost,
                lambda0: c.extremal.lambda0,
                abnormal: c.abnormal,
                switching_times: c.extremal.switching_times.clone(),
                residual: c.residual.norm,
                start_index: c.start_index,
                pass: c.certificate.pass,
            })
            .collect(),
    };
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write(&out.join("report.json"), &(json + "\n"))?;
    println!(
        "t1 = {:.9}  cost = {:.9}  switches = {}  certified = {}  pass = {}",
        report.terminal_time,
        report.cost,
        report.switching_times.len(),
        solution.trace.certified,
        report.pass
    );
    println!("wall time: {:.3} s", elapsed.as_secs_f64());
    Ok(if best.certificate.pass { 0 } else { 1 })
}

fn cmd_verify(file: &Path, trajectory: &Path) -> CmdResult {
    let (_, loaded) = load(file)?;
    if !trajectory.exists() {
        return Err(fail(2, format!("{}: no such file", trajectory.display())));
    }
    let cert = verify_external(trajectory, &loaded.problem, &loaded.file.verifier)?;
    println!("{}", cert.to_json());
    if !cert.pass {
        eprintln!("failed: {}", cert.failures.join(", "));
    }
    Ok(if cert.pass { 0 } else { 1 })
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ScheduleFile {
    #[serde(default)]
    switch_times: Vec<f64>,
    controls: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct SimulationSummary {
    final_time: f64,
    final_state: Vec<f64>,
    max_drift: f64,
    rows: usize,
}

fn cmd_simulate(
    file: &Path,
    control: &Path,
    tspan: (f64, f64),
    start: Option<&[f64]>,
    out: &Path,
) -> CmdResult {
    let (_, loaded) = load(file)?;
    let problem = &loaded.problem;
    let text = read_text(control)?;
    let sched: ScheduleFile = serde_json::from_str(&text).map_err(|e| {
        fail(
            2,
            format!(
                "{}: line {}, column {}: {e}",
                control.display(),
                e.line(),
                e.column()
            ),
        )
    })?;
    let schedule = ControlSchedule::new(
        sched.switch_times,
        sched.controls.into_iter().map(DVector::from_vec).collect(),
    )?;
    let z0 = match (start, &problem.start) {
        (Some(z), _) => DVector::from_column_slice(z),
        (None, BoundaryCondition::Point(x)) => x.clone(),
        (None, BoundaryCondition::Submanifold(set)) => match &set.anchor {
            Some(a) => a.clone(),
            None => return Err(fail(2, "the start set has no anchor; pass --start")),
        },
    };
    let sim = simulate(problem, &z0, &schedule, tspan, &FlowOptions::default())?;
    let mut buf = Vec::new();
    write_simulation_csv(&sim, problem, &mut buf)?;
    std::fs::write(out, buf).map_err(|e| fail(4, format!("{}: {e}", out.display())))?;
    let summary = SimulationSummary {
        final_time: *sim.times.last().expect("nonempty simulation"),
        final_state: sim
            .states
            .last()
            .expect("nonempty simulation")
            .iter()
            .copied()
            .collect(),
        max_drift: sim.max_drift,
        rows: sim.times.len(),
    };
    println!(
        "{}",
        serde_json::to_string_pretty(&summary).expect("summary serializes")
    );
    Ok(0)
}

#[derive(Serialize)]
struct Diagnostic {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn diagnostics(problem: &ControlProblem) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let tangency = check_tangency(problem, 200);
    out.push(Diagnostic {
        name: "tangency",
        pass: tangency.passed,
        detail: format!(
            "max normal component {:e} over {} samples (tolerance {:e}), worst at x = {:?}, u = {:?}",
            tangency.max_normal_component,
            tangency.samples,
            tangency.tolerance,
            tangency.worst_state,
            tangency.worst_control
        ),
    });

    let manifold = &problem.manifold;
    let anchor = match &problem.start {
        BoundaryCondition::Point(x) => x.clone(),
        BoundaryCondition::Submanifold(set) => set
            .anchor
            .clone()
            .unwrap_or_else(|| DVector::zeros(problem.ambient_dim())),
    };
    let samples = manifold.sample_points(&anchor, 50, 0);
    let frame = samples.clone().and_then(|points| {
        for x in &points {
            if manifold.tangent_frame(x)?.tangent_basis.ncols() != manifold.intrinsic_dim() {
                return Err(PmpError::RankDeficient { ratio: 0.0 });
            }
        }
        Ok(points.len())
    });
    out.push(Diagnostic {
        name: "frame_rank",
        pass: frame.is_ok(),
        detail: match &frame {
            Ok(k) => format!(
                "rank {} tangent frames at {k} sampled points",
                manifold.intrinsic_dim()
            ),
            Err(e) => e.to_string(),
        },
    });

    // ρ must be 1 on M, 1 at half the tube radius and 0 beyond it
    let bump = samples.as_ref().map_err(Clone::clone).map(|points| {
        let mut worst = 0.0_f64;
        for x in points {
            let jac = manifold.constraint_jacobian(x);
            let normal = jac.row(0).transpose().normalize();
            let r = manifold.tube_radius();
            let on = manifold.bump(x);
            let inner = manifold.bump(&(x + &normal * (0.25 * r)));
            let outer = manifold.bump(&(x + &normal * (1.5 * r)));
            worst = worst
                .max((on - 1.0).abs())
                .max((inner - 1.0).abs())
                .max(outer.abs());
        }
        worst
    });
    out.push(Diagnostic {
        name: "bump",
        pass: matches!(bump, Ok(w) if w < 1e-12),
        detail: match bump {
            Ok(w) => format!(
                "max plateau/support defect {w:e}, tube radius {}",
                manifold.tube_radius()
            ),
            Err(e) => e.to_string(),
        },
    });
    out
}

fn cmd_check(file: &Path) -> CmdResult {
    let text = read_text(file)?;
    let parsed =
        ProblemFile::parse(&text).map_err(|e| fail(2, format!("{}: {e}", file.display())))?;
    let report = match parsed.build() {
        Ok(problem) => diagnostics(&problem),
        Err(PmpError::Parse(msg)) => return Err(fail(2, format!("{}: {msg}", file.display()))),
        Err(e @ PmpError::RankDeficient { .. }) => vec![Diagnostic {
            name: "rank_deficient",
            pass: false,
            detail: e.to_string(),
        }],
        Err(e) => vec![Diagnostic {
            name: "invalid_problem",
            pass: false,
            detail: e.to_string(),
        }],
    };
    println!(
        "{}",
        serde_json::to_string_pretty(&report).expect("diagnostics serialize")
    );
    let failed: Vec<&str> = report.iter().filter(|d| !d.pass).map(|d| d.name).collect();
    if failed.is_empty() {
        Ok(0)
    } else {
        eprintln!("failed: {}", failed.join(", "));
        Ok(1)
    }
}

fn cmd_examples(out: Option<&Path>) -> CmdResult {
    match out {
        None => {
            for (name, _) in BUNDLED {
                println!("{name}.json");
            }
        }
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| fail(4, format!("{}: {e}", dir.display())))?;
            for (name, _) in BUNDLED {
                let path = dir.join(format!("{name}.json"));
                write(&path, bundled(name).expect("listed"))?;
                println!("{}", path.display());
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Solve {
            file,
            seed,
            starts,
            out,
        } => cmd_solve(file, *seed, *starts, out),
        Command::Verify { file, trajectory } => cmd_verify(file, trajectory),
        Command::Simulate {
            file,
            control,
            tspan,
            start,
            out,
        } => cmd_simulate(
            file,
            control,
            *tspan,
            start.as_ref().map(|p| p.0.as_slice()),
            out,
        ),
        Command::Check { file } => cmd_check(file),
        Command::Examples { out } => cmd_examples(out.as_deref()),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
