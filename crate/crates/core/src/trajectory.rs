//! CSV export and import of extremals and simulations.
//!
//! An extremal is written as a CSV with columns `t, x1..xN, p1..pN, u1..um, H,
//! g_norm` plus a JSON sidecar (same stem, `.json` extension) carrying `λ₀`,
//! the switching times and the terminal costate. Floats are written in their
//! shortest round-trip form, so an export followed by an import is exact.

use crate::error::{PmpError, Result};
use crate::flow::{reintegrate, Extremal, Simulation};
use crate::hamiltonian::ambient_hamiltonian_at;
use crate::manifold::Covector;
use crate::system::{AmbientPoint, ControlProblem};
use crate::verifier::{verify_with_multipliers, PmpCertificate, Reconstruction, Tolerances};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

pub const TRAJECTORY_SCHEMA_VERSION: u32 = 1;
/// RK4 substeps per grid interval in backward costate reconstruction.
pub const RECONSTRUCTION_SUBSTEPS: usize = 4;

/// Sidecar metadata of an exported extremal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryMeta {
    pub schema_version: u32,
    pub lambda0: f64,
    pub switching_times: Vec<f64>,
    pub terminal_time: f64,
    pub terminal_costate: Vec<f64>,
    pub cost: f64,
}

impl TrajectoryMeta {
    pub fn of(extremal: &Extremal) -> Self {
        Self {
            schema_version: TRAJECTORY_SCHEMA_VERSION,
            lambda0: extremal.lambda0,
            switching_times: extremal.switching_times.clone(),
            terminal_time: extremal.terminal_time(),
            terminal_costate: extremal.final_costate().iter().copied().collect(),
            cost: extremal.cost,
        }
    }
}

/// The sidecar path belonging to a trajectory CSV.
pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

fn fmt(x: f64) -> String {
    format!("{x:?}")
}

fn csv_error(e: csv::Error) -> PmpError {
    PmpError::Parse(format!("trajectory CSV: {e}"))
}

fn io_error(path: &Path, e: std::io::Error) -> PmpError {
    PmpError::Parse(format!("{}: {e}", path.display()))
}

fn numbered(prefix: &str, count: usize) -> impl Iterator<Item = String> + '_ {
    (1..=count).map(move |i| format!("{prefix}{i}"))
}

pub fn write_extremal_csv<W: Write>(
    extremal: &Extremal,
    problem: &ControlProblem,
    writer: W,
) -> Result<()> {
    let n = problem.ambient_dim();
    let m = problem.control_dim();
    let mut w = csv::Writer::from_writer(writer);
    let header: Vec<String> = std::iter::once("t".to_string())
        .chain(numbered("x", n))
        .chain(numbered("p", n))
        .chain(numbered("u", m))
        .chain(["H".to_string(), "g_norm".to_string()])
        .collect();
    w.write_record(&header).map_err(csv_error)?;
    for i in 0..extremal.len() {
        let x = &extremal.states[i];
        let row: Vec<String> = std::iter::once(extremal.times[i])
            .chain(x.iter().copied())
            .chain(extremal.costates[i].iter().copied())
            .chain(extremal.controls[i].iter().copied())
            .chain([extremal.hamiltonian[i], problem.manifold.constraint_norm(x)])
            .map(fmt)
            .collect();
        w.write_record(&row).map_err(csv_error)?;
    }
    w.flush().map_err(|e| PmpError::Parse(e.to_string()))
}

/// Open-loop simulation output: `t, x1..xN, u1..um, g_norm`.
pub fn write_simulation_csv<W: Write>(
    sim: &Simulation,
    problem: &ControlProblem,
    writer: W,
) -> Result<()> {
    let n = problem.ambient_dim();
    let m = problem.control_dim();
    let mut w = csv::Writer::from_writer(writer);
    let header: Vec<String> = std::iter::once("t".to_string())
        .chain(numbered("x", n))
        .chain(numbered("u", m))
        .chain(["g_norm".to_string()])
        .collect();
    w.write_record(&header).map_err(csv_error)?;
    for ((t, x), u) in sim.times.iter().zip(&sim.states).zip(&sim.controls) {
        let row: Vec<String> = std::iter::once(*t)
            .chain(x.iter().copied())
            .chain(u.iter().copied())
            .chain([problem.manifold.constraint_norm(x)])
            .map(fmt)
            .collect();
        w.write_record(&row).map_err(csv_error)?;
    }
    w.flush().map_err(|e| PmpError::Parse(e.to_string()))
}

/// Writes the CSV and its sidecar.
pub fn write_extremal(
    extremal: &Extremal,
    problem: &ControlProblem,
    csv_path: &Path,
) -> Result<()> {
    let file = std::fs::File::create(csv_path).map_err(|e| io_error(csv_path, e))?;
    write_extremal_csv(extremal, problem, std::io::BufWriter::new(file))?;
    let meta =
        serde_json::to_string_pretty(&TrajectoryMeta::of(extremal)).expect("metadata serializes");
    let side = sidecar_path(csv_path);
    std::fs::write(&side, meta + "\n").map_err(|e| io_error(&side, e))
}

/// Columns read from a trajectory CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryTable {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub costates: Option<Vec<DVector<f64>>>,
    pub controls: Vec<DVector<f64>>,
    /// Optional per-row `λ₀` record.
    pub lambda0: Option<Vec<f64>>,
}

/// Parses a trajectory CSV for a problem with `state_dim` states and `control_dim` controls.
/// Columns are located by name; `p*`, `H`, `g_norm` and `lambda0` are optional.
pub fn read_trajectory_csv<R: Read>(
    reader: R,
    state_dim: usize,
    control_dim: usize,
) -> Result<TrajectoryTable> {
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = r.headers().map_err(csv_error)?.clone();
    let find = |name: &str| header.iter().position(|h| h == name);
    let require = |name: String| {
        find(&name).ok_or_else(|| PmpError::Parse(format!("trajectory CSV lacks column `{name}`")))
    };
    let t_col = require("t".into())?;
    let x_cols = numbered("x", state_dim)
        .map(require)
        .collect::<Result<Vec<_>>>()?;
    let u_cols = numbered("u", control_dim)
        .map(require)
        .collect::<Result<Vec<_>>>()?;
    let p_cols: Vec<Option<usize>> = numbered("p", state_dim).map(|c| find(&c)).collect();
    let p_cols = match (
        p_cols.iter().all(Option::is_some),
        p_cols.iter().any(Option::is_some),
    ) {
        (true, _) => Some(p_cols.into_iter().flatten().collect::<Vec<_>>()),
        (false, false) => None,
        (false, true) => {
            return Err(PmpError::Parse(
                "trajectory CSV has an incomplete set of costate columns".into(),
            ))
        }
    };
    if let Some(extra) = numbered("x", state_dim + 1)
        .last()
        .filter(|c| find(c).is_some())
    {
        return Err(PmpError::Parse(format!(
            "trajectory CSV has column `{extra}` beyond the state dimension"
        )));
    }
    let l_col = find("lambda0");

    let mut table = TrajectoryTable {
        times: Vec::new(),
        states: Vec::new(),
        costates: p_cols.as_ref().map(|_| Vec::new()),
        controls: Vec::new(),
        lambda0: l_col.map(|_| Vec::new()),
    };
    for (line, record) in r.records().enumerate() {
        let record = record.map_err(csv_error)?;
        let value = |col: usize| -> Result<f64> {
            let raw = record.get(col).unwrap_or("");
            raw.parse::<f64>().map_err(|_| {
                PmpError::Parse(format!(
                    "trajectory CSV row {}: `{raw}` is not a number",
                    line + 2
                ))
            })
        };
        let pick = |cols: &[usize]| -> Result<DVector<f64>> {
            Ok(DVector::from_vec(
                cols.iter().map(|&c| value(c)).collect::<Result<Vec<_>>>()?,
            ))
        };
        table.times.push(value(t_col)?);
        table.states.push(pick(&x_cols)?);
        table.controls.push(pick(&u_cols)?);
        if let (Some(cols), Some(ps)) = (&p_cols, table.costates.as_mut()) {
            ps.push(pick(cols)?);
        }
        if let (Some(c), Some(ls)) = (l_col, table.lambda0.as_mut()) {
            ls.push(value(c)?);
        }
    }
    if table.times.len() < 2 {
        return Err(PmpError::Parse(
            "trajectory CSV needs at least two rows".into(),
        ));
    }
    Ok(table)
}

/// An imported candidate ready for verification.
#[derive(Debug, Clone)]
pub struct ImportedExtremal {
    pub extremal: Extremal,
    pub reconstruction: Option<Reconstruction>,
    pub lambda0_rows: Option<Vec<f64>>,
}

/// Assembles an extremal from a table and optional sidecar, reconstructing
/// missing costates by backward integration from the terminal costate.
pub fn import_extremal(
    table: TrajectoryTable,
    meta: Option<&TrajectoryMeta>,
    problem: &ControlProblem,
    on_manifold_tol: f64,
) -> Result<ImportedExtremal> {
    let n = problem.ambient_dim();
    if let Some(meta) = meta {
        if meta.schema_version != TRAJECTORY_SCHEMA_VERSION {
            return Err(PmpError::Parse(format!(
                "unsupported trajectory schema {}",
                meta.schema_version
            )));
        }
        let last = *table.times.last().expect("validated rows");
        if (last - meta.terminal_time).abs() > 1e-12 * meta.terminal_time.abs().max(1.0) {
            return Err(PmpError::Parse(format!(
                "trajectory ends at t = {last} but the sidecar records t₁ = {} (truncated file?)",
                meta.terminal_time
            )));
        }
    }
    for (index, x) in table.states.iter().enumerate() {
        let residual = problem.manifold.constraint_norm(x);
        if !(residual <= on_manifold_tol) {
            return Err(PmpError::OffManifold { index, residual });
        }
    }
    let lambda0 = match (meta, &table.lambda0) {
        (Some(m), _) => m.lambda0,
        (None, Some(rows)) => rows[0],
        (None, None) => {
            return Err(PmpError::Parse(
                "λ₀ needs a sidecar or a `lambda0` column".into(),
            ))
        }
    };
    let rows = table.times.len();
    let (costates, reconstruction) = match table.costates {
        Some(ps) => (ps, None),
        None => {
            let Some(meta) = meta else {
                return Err(PmpError::Parse(
                    "costate columns are missing and no sidecar gives p(t₁)".into(),
                ));
            };
            if meta.terminal_costate.len() != n {
                return Err(PmpError::Parse(
                    "sidecar terminal costate has the wrong dimension".into(),
                ));
            }
            let mut ps = vec![DVector::zeros(n); rows];
            ps[rows - 1] = DVector::from_column_slice(&meta.terminal_costate);
            for i in (0..rows - 1).rev() {
                let h = table.times[i + 1] - table.times[i];
                let u = table.controls[i].clone();
                let (_, p) = reintegrate(
                    problem,
                    lambda0,
                    &table.states[i + 1],
                    &ps[i + 1],
                    |_| u.clone(),
                    -h,
                    RECONSTRUCTION_SUBSTEPS,
                )
                .map_err(PmpError::flow)?;
                ps[i] = p;
            }
            (
                ps,
                Some(Reconstruction {
                    method: "backward_rk4".into(),
                    substeps: RECONSTRUCTION_SUBSTEPS,
                }),
            )
        }
    };
    if costates.iter().any(|p| p.len() != n) || table.states.iter().any(|x| x.len() != n) {
        return Err(PmpError::Parse(
            "trajectory rows have inconsistent dimensions".into(),
        ));
    }
    let mut intrinsic = Vec::with_capacity(rows);
    let mut hamiltonian = Vec::with_capacity(rows);
    let mut cost = 0.0;
    for i in 0..rows {
        let x = &table.states[i];
        let u = &table.controls[i];
        let restricted = problem
            .manifold
            .restrict_covector(&Covector::ambient(x.clone(), costates[i].clone()))?;
        intrinsic.push(restricted.components().clone());
        let at = AmbientPoint::evaluate(&problem.manifold, x, false)?;
        hamiltonian.push(ambient_hamiltonian_at(
            problem,
            &at,
            &costates[i],
            lambda0,
            u,
        ));
        if i + 1 < rows {
            cost += problem.running_cost.eval(x, u) * (table.times[i + 1] - table.times[i]);
        }
    }
    let switching_times = match meta {
        Some(m) => m.switching_times.clone(),
        None => (1..rows)
            .filter(|&i| table.controls[i] != table.controls[i - 1])
            .map(|i| table.times[i])
            .collect(),
    };
    let extremal = Extremal {
        times: table.times,
        states: table.states,
        costates,
        intrinsic_costates: intrinsic,
        controls: table.controls,
        lambda0,
        switching_times,
        degenerate: vec![false; rows],
        hamiltonian,
        cost: meta.map_or(cost, |m| m.cost),
    };
    Ok(ImportedExtremal {
        extremal,
        reconstruction,
        lambda0_rows: table.lambda0,
    })
}

/// Reads a CSV and (if present) its sidecar.
pub fn read_extremal(
    csv_path: &Path,
    problem: &ControlProblem,
    on_manifold_tol: f64,
) -> Result<ImportedExtremal> {
    let file = std::fs::File::open(csv_path).map_err(|e| io_error(csv_path, e))?;
    let table = read_trajectory_csv(
        std::io::BufReader::new(file),
        problem.ambient_dim(),
        problem.control_dim(),
    )?;
    let side = sidecar_path(csv_path);
    let meta = if side.exists() {
        let text = std::fs::read_to_string(&side).map_err(|e| io_error(&side, e))?;
        Some(serde_json::from_str::<TrajectoryMeta>(&text).map_err(|e| {
            PmpError::Parse(format!(
                "{}:{}:{}: {e}",
                side.display(),
                e.line(),
                e.column()
            ))
        })?)
    } else {
        None
    };
    import_extremal(table, meta.as_ref(), problem, on_manifold_tol)
}

/// Certifies an imported candidate with the same checks as `verify`.
pub fn verify_external(
    csv_path: &Path,
    problem: &ControlProblem,
    tolerances: &Tolerances,
) -> Result<PmpCertificate> {
    let imported = read_extremal(csv_path, problem, tolerances.boundary)?;
    verify_imported(&imported, problem, tolerances)
}

pub fn verify_imported(
    imported: &ImportedExtremal,
    problem: &ControlProblem,
    tolerances: &Tolerances,
) -> Result<PmpCertificate> {
    let mut cert = verify_with_multipliers(
        &imported.extremal,
        problem,
        tolerances,
        imported.lambda0_rows.as_deref(),
    )?;
    cert.reconstruction = imported.reconstruction.clone();
    Ok(cert)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{flow_extremal, ControlPolicy, FlowOptions};
    use crate::hamiltonian::AdjointState;
    use crate::manifold::EmbeddedManifold;
    use crate::system::{
        BoundaryCondition, ControlSet, ExpressionDynamics, TerminalTime, TimeCost,
    };
    use crate::verifier::verify;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    fn double_integrator() -> ControlProblem {
        ControlProblem::new(
            EmbeddedManifold::coordinate_plane(3),
            Arc::new(ExpressionDynamics::parse(3, 1, &["x2", "u1", "0"]).unwrap()),
            Arc::new(TimeCost),
            ControlSet::symmetric_box(1, 1.0),
            BoundaryCondition::Point(v(&[1.0, 0.0, 0.0])),
            BoundaryCondition::Point(v(&[0.0, 0.0, 0.0])),
            TerminalTime::Free,
        )
        .unwrap()
    }

    fn analytic() -> Extremal {
        let init = AdjointState::new(v(&[1.0, 0.0, 0.0]), v(&[-1.0, -1.0, 0.0]), -1.0).unwrap();
        flow_extremal(
            &double_integrator(),
            &init,
            &ControlPolicy::Argmax,
            (0.0, 2.0),
            &FlowOptions::default(),
        )
        .unwrap()
    }

    fn export(e: &Extremal, problem: &ControlProblem) -> (TrajectoryTable, TrajectoryMeta) {
        let mut buf = Vec::new();
        write_extremal_csv(e, problem, &mut buf).unwrap();
        let table = read_trajectory_csv(buf.as_slice(), 3, 1).unwrap();
        (table, TrajectoryMeta::of(e))
    }

    #[test]
    fn header_lists_all_columns() {
        let problem = double_integrator();
        let mut buf = Vec::new();
        write_extremal_csv(&analytic(), &problem, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "t,x1,x2,x3,p1,p2,p3,u1,H,g_norm"
        );
        assert_eq!(text.lines().count(), analytic().len() + 1);
    }

    #[test]
    fn round_trip_reproduces_the_certificate() {
        let problem = double_integrator();
        let e = analytic();
        let direct = verify(&e, &problem, &Tolerances::default()).unwrap();
        let (table, meta) = export(&e, &problem);
        assert_eq!(table.states, e.states);
        assert_eq!(table.costates.as_ref().unwrap(), &e.costates);
        let imported = import_extremal(table, Some(&meta), &problem, 1e-6).unwrap();
        let cert = verify_imported(&imported, &problem, &Tolerances::default()).unwrap();
        assert_eq!(cert.pass, direct.pass);
        assert!((cert.hamiltonian_ode_residual() - direct.hamiltonian_ode_residual()).abs() < 1e-9);
        assert!((cert.max_condition_gap() - direct.max_condition_gap()).abs() < 1e-9);
        assert!((cert.nonvanishing_margin() - direct.nonvanishing_margin()).abs() < 1e-9);
        assert!(cert.reconstruction.is_none());
    }

    #[test]
    fn missing_costates_are_reconstructed_backwards() {
        let problem = double_integrator();
        let e = analytic();
        let (mut table, meta) = export(&e, &problem);
        table.costates = None;
        let imported = import_extremal(table, Some(&meta), &problem, 1e-6).unwrap();
        let worst = imported
            .extremal
            .costates
            .iter()
            .zip(&e.costates)
            .map(|(a, b)| (a - b).amax())
            .fold(0.0, f64::max);
        assert!(worst < 1e-9, "{worst}");
        let cert = verify_imported(&imported, &problem, &Tolerances::default()).unwrap();
        assert!(cert.pass, "{:?}", cert.failures);
        assert_eq!(cert.reconstruction.unwrap().method, "backward_rk4");
    }

    #[test]
    fn time_jitter_grows_the_ode_defect() {
        let problem = double_integrator();
        let e = analytic();
        let mut defects = Vec::new();
        for jitter in [0.0, 1e-3, 1e-2, 5e-2] {
            let (mut table, meta) = export(&e, &problem);
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let h = table.times[1] - table.times[0];
            let last = table.times.len() - 1;
            for t in &mut table.times[1..last] {
                *t += jitter * h * rng.random_range(-1.0..1.0);
            }
            let imported = import_extremal(table, Some(&meta), &problem, 1e-6).unwrap();
            let cert = verify_imported(&imported, &problem, &Tolerances::default()).unwrap();
            defects.push(cert.hamiltonian_ode_residual());
        }
        assert!(defects.windows(2).all(|w| w[0] < w[1]), "{defects:?}");
    }

    #[test]
    fn truncated_rows_are_parse_errors() {
        let problem = double_integrator();
        let mut buf = Vec::new();
        write_extremal_csv(&analytic(), &problem, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let cut = &text[..text.len() - 12];
        assert!(matches!(
            read_trajectory_csv(cut.as_bytes(), 3, 1),
            Err(PmpError::Parse(_))
        ));

        // dropping whole rows is caught by the sidecar's terminal time
        let lines: Vec<&str> = text.lines().collect();
        let short = lines[..lines.len() - 5].join("\n");
        let table = read_trajectory_csv(short.as_bytes(), 3, 1).unwrap();
        let meta = TrajectoryMeta::of(&analytic());
        assert!(matches!(
            import_extremal(table, Some(&meta), &problem, 1e-6),
            Err(PmpError::Parse(_))
        ));
    }

    #[test]
    fn off_manifold_rows_are_rejected() {
        let problem = double_integrator();
        let (mut table, meta) = export(&analytic(), &problem);
        table.states[7][2] = 1e-3;
        let err = import_extremal(table, Some(&meta), &problem, 1e-6).unwrap_err();
        assert_eq!(
            err,
            PmpError::OffManifold {
                index: 7,
                residual: 1e-3
            }
        );
    }

    #[test]
    fn lambda0_column_feeds_the_constancy_check() {
        let problem = double_integrator();
        let e = analytic();
        let mut buf = Vec::new();
        write_extremal_csv(&e, &problem, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        let mut with_l0 = format!("{},lambda0\n", lines.next().unwrap());
        for (i, line) in lines.enumerate() {
            let l0 = if i == 100 { -0.9 } else { -1.0 };
            with_l0.push_str(&format!("{line},{l0:?}\n"));
        }
        let table = read_trajectory_csv(with_l0.as_bytes(), 3, 1).unwrap();
        let imported = import_extremal(table, None, &problem, 1e-6).unwrap();
        let cert = verify_imported(&imported, &problem, &Tolerances::default()).unwrap();
        assert!((cert.lambda0_constancy() - 0.1).abs() < 1e-12);
        assert!(cert.failures.contains(&"statement2_lambda0".to_string()));
    }
}
