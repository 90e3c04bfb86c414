//! Multi-start single shooting for the ambient two-point boundary-value problem.
//!
//! The unknowns are the normalised multiplier pair `(λ₀, p(t₀))`, the terminal
//! time when it is free, coordinates on a start submanifold and, optionally,
//! switching times of a frozen bang-bang structure. Normal components of the
//! costate are not searched: the homogeneous normal columns are carried along
//! the flow and their offset is solved linearly so that `p(t₁)` annihilates
//! the retraction fiber.

use crate::error::{PmpError, Result};
use crate::flow::{
    flow_extremal, integrate, AmbientSystem, ControlPolicy, ControlSchedule, ControlledSystem,
    Extremal, FlowOptions, RawFlow,
};
use crate::hamiltonian::{ambient_hamiltonian_at, AdjointState};
use crate::manifold::EmbeddedManifold;
use crate::system::{AmbientPoint, BoundaryCondition, ControlProblem, TerminalTime};
use crate::verifier::{verify, PmpCertificate, Tolerances};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Environment variable capping the number of solver worker threads.
pub const THREADS_ENV: &str = "TUBEPMP_THREADS";

const PROJECTION_TOL: f64 = 1e-13;
const SEARCH_TOL: f64 = 1e-7;
/// Coarse-phase residual below which a start is polished.
const PROMISING: f64 = 1e-4;
const DEDUPE_TOL: f64 = 1e-3;
const MU0: f64 = 1e-3;
const MU_MAX: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Normal,
    Abnormal,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub starts: usize,
    pub seed: u64,
    pub tol_residual: f64,
    pub tol_endpoint: f64,
    pub max_iter: usize,
    pub branch: Branch,
    /// Range for initial terminal-time guesses (free time only).
    pub t1_range: [f64; 2],
    /// Step fraction of the horizon used during the coarse search phase.
    pub search_step_fraction: f64,
    /// Re-solve with the switching times as unknowns once a bang-bang candidate converges.
    pub refine_switches: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            starts: 64,
            seed: 0,
            tol_residual: 1e-8,
            tol_endpoint: 1e-6,
            max_iter: 200,
            branch: Branch::Both,
            t1_range: [0.5, 5.0],
            search_step_fraction: 1e-2,
            refine_switches: false,
        }
    }
}

/// Decoded shooting unknowns.
#[derive(Debug, Clone, PartialEq)]
pub struct ShootingUnknowns {
    /// `(λ₀, p(t₀))`, normalised to unit length.
    pub costate_direction: DVector<f64>,
    pub terminal_time: f64,
    /// Start point on `M ∩ S₀`; `None` for point starts.
    pub initial_state: Option<DVector<f64>>,
    /// Frozen arc structure; the flow follows it instead of the argmax.
    pub schedule: Option<ControlSchedule>,
}

impl ShootingUnknowns {
    pub fn new(lambda0: f64, p0: &DVector<f64>, terminal_time: f64) -> Self {
        let mut dir = DVector::zeros(p0.len() + 1);
        dir[0] = lambda0;
        dir.rows_mut(1, p0.len()).copy_from(p0);
        let norm = dir.norm();
        if norm > 0.0 {
            dir /= norm;
        }
        Self {
            costate_direction: dir,
            terminal_time,
            initial_state: None,
            schedule: None,
        }
    }

    pub fn lambda0(&self) -> f64 {
        self.costate_direction[0]
    }

    pub fn initial_costate(&self) -> DVector<f64> {
        self.costate_direction
            .rows(1, self.costate_direction.len() - 1)
            .into_owned()
    }

    pub fn switching_times(&self) -> Option<&[f64]> {
        self.schedule.as_ref().map(|s| s.switch_times.as_slice())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualVector {
    /// `x(t₁) − x₁`, or `s₁(x(t₁))` for a submanifold target.
    pub endpoint: Vec<f64>,
    /// `H(t₁)` when the terminal time is free.
    pub free_time: Option<f64>,
    /// Fiber components of `p(t₁)`, then `T S₁` components of `p(t₁)`, then `T S₀` components of `p(t₀)`.
    pub transversality: Vec<f64>,
    /// `H(u⁺) − H(u⁻)` at each frozen switching time.
    pub switching: Vec<f64>,
    pub norm: f64,
}

impl ResidualVector {
    fn new(
        endpoint: Vec<f64>,
        free_time: Option<f64>,
        transversality: Vec<f64>,
        switching: Vec<f64>,
    ) -> Self {
        let mut r = Self {
            endpoint,
            free_time,
            transversality,
            switching,
            norm: 0.0,
        };
        r.norm = r.values().norm();
        r
    }

    pub fn values(&self) -> DVector<f64> {
        let all: Vec<f64> = self
            .endpoint
            .iter()
            .chain(self.free_time.iter())
            .chain(&self.transversality)
            .chain(&self.switching)
            .copied()
            .collect();
        DVector::from_vec(all)
    }

    pub fn len(&self) -> usize {
        self.endpoint.len()
            + usize::from(self.free_time.is_some())
            + self.transversality.len()
            + self.switching.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn endpoint_norm(&self) -> f64 {
        self.endpoint.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Forward-difference Jacobian with step `1e-7·(1 + |θᵢ|)`.
pub fn finite_difference_jacobian<F>(
    residual_map: F,
    unknowns: &DVector<f64>,
) -> Result<DMatrix<f64>>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    let r0 = residual_map(unknowns)?;
    jacobian_from(&residual_map, unknowns, &r0)
}

fn jacobian_from<F>(f: &F, theta: &DVector<f64>, r0: &DVector<f64>) -> Result<DMatrix<f64>>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    let mut jac = DMatrix::zeros(r0.len(), theta.len());
    for i in 0..theta.len() {
        let h = 1e-7 * (1.0 + theta[i].abs());
        let mut shifted = theta.clone();
        shifted[i] += h;
        let r = f(&shifted)?;
        if r.len() != r0.len() {
            return Err(PmpError::DimensionMismatch(
                "residual length changed under perturbation".into(),
            ));
        }
        jac.set_column(i, &((r - r0) / h));
    }
    Ok(jac)
}

/// Shooting residual of `unknowns`, integrated with `FlowOptions::fast()`.
pub fn shooting_residual(
    problem: &ControlProblem,
    unknowns: &ShootingUnknowns,
) -> Result<ResidualVector> {
    let shooter = Shooter::new(problem)?;
    shooter
        .evaluate(unknowns, &FlowOptions::fast())
        .map(|s| s.residual)
}

struct Shot {
    residual: ResidualVector,
    x0: DVector<f64>,
    /// `p(t₀)` including the solved normal offset.
    p0: DVector<f64>,
}

struct StartSet {
    manifold: EmbeddedManifold,
    anchor: DVector<f64>,
    basis: DMatrix<f64>,
}

struct Shooter<'a> {
    problem: &'a ControlProblem,
    /// `x₀`, or the projected anchor of `M ∩ S₀`.
    base: DVector<f64>,
    /// Orthonormal basis of `T_base M`.
    frame: DMatrix<f64>,
    start: Option<StartSet>,
    end: Option<EmbeddedManifold>,
}

impl<'a> Shooter<'a> {
    fn new(problem: &'a ControlProblem) -> Result<Self> {
        let (base, start) = match &problem.start {
            BoundaryCondition::Point(x0) => (x0.clone(), None),
            BoundaryCondition::Submanifold(set) => {
                let manifold = problem.boundary_manifold(set)?;
                let anchor = set.anchor.as_ref().ok_or_else(|| {
                    PmpError::InvalidProblem("a start submanifold needs an anchor".into())
                })?;
                let anchor = manifold.project(anchor, PROJECTION_TOL)?;
                let basis = manifold.tangent_frame(&anchor)?.tangent_basis;
                (
                    anchor.clone(),
                    Some(StartSet {
                        manifold,
                        anchor,
                        basis,
                    }),
                )
            }
        };
        let frame = problem.manifold.tangent_frame(&base)?.tangent_basis;
        let end = match &problem.end {
            BoundaryCondition::Point(_) => None,
            BoundaryCondition::Submanifold(set) => Some(problem.boundary_manifold(set)?),
        };
        Ok(Self {
            problem,
            base,
            frame,
            start,
            end,
        })
    }

    fn start_dim(&self) -> usize {
        self.start.as_ref().map_or(0, |s| s.basis.ncols())
    }

    fn start_point(&self, coords: &DVector<f64>) -> Result<DVector<f64>> {
        match &self.start {
            None => Ok(self.base.clone()),
            Some(s) => s
                .manifold
                .project(&(&s.anchor + &s.basis * coords), PROJECTION_TOL),
        }
    }

    fn evaluate(&self, unknowns: &ShootingUnknowns, options: &FlowOptions) -> Result<Shot> {
        let problem = self.problem;
        let n = problem.ambient_dim();
        if unknowns.costate_direction.len() != n + 1 {
            return Err(PmpError::DimensionMismatch(format!(
                "costate direction has {} components, expected {}",
                unknowns.costate_direction.len(),
                n + 1
            )));
        }
        let t1 = unknowns.terminal_time;
        if !(t1 > 0.0) || !t1.is_finite() {
            return Err(PmpError::InvalidProblem(format!(
                "terminal time must be positive, got {t1}"
            )));
        }
        if let TerminalTime::Fixed(fixed) = problem.terminal_time {
            if (fixed - t1).abs() > 1e-12 * fixed.max(1.0) {
                return Err(PmpError::InvalidProblem(
                    "terminal time differs from the fixed horizon".into(),
                ));
            }
        }
        let x0 = match (&unknowns.initial_state, &self.start) {
            (Some(x), Some(_)) => x.clone(),
            (None, None) => self.base.clone(),
            (Some(_), None) => {
                return Err(PmpError::DimensionMismatch(
                    "initial state given for a point start".into(),
                ));
            }
            (None, Some(_)) => {
                return Err(PmpError::DimensionMismatch(
                    "a start submanifold needs an initial state".into(),
                ));
            }
        };
        let lambda0 = unknowns.lambda0();
        let p0 = unknowns.initial_costate();
        let normal0 = problem.manifold.tangent_frame(&x0)?.normal_basis;
        let k = normal0.ncols();

        let mut columns = DMatrix::zeros(n, 1 + k);
        columns.set_column(0, &p0);
        columns.columns_mut(1, k).copy_from(&normal0);
        let sys = AmbientSystem {
            problem,
            lambda0,
            columns: 1 + k,
        };
        let policy = match &unknowns.schedule {
            Some(s) => ControlPolicy::Schedule(s.clone()),
            None => ControlPolicy::Argmax,
        };
        let raw = integrate(&sys, sys.pack(&x0, &columns), (0.0, t1), &policy, options)
            .map_err(PmpError::flow)?;
        let y1 = raw.states.last().expect("nonempty flow");
        let x1 = sys.state(y1).into_owned();
        let finals = sys.costate_columns(y1);
        let frame1 = problem.manifold.tangent_frame(&x1)?;
        let normal1 = &frame1.normal_basis;

        // normal offset c with N₁ᵀ(p_base + Φ c) = 0
        let phi = finals.columns(1, k).into_owned();
        let a = normal1.transpose() * &phi;
        let b = normal1.transpose() * finals.column(0);
        let offset = a
            .lu()
            .solve(&(-b))
            .ok_or(PmpError::RankDeficient { ratio: 0.0 })?;
        let p1 = finals.column(0) + &phi * &offset;
        let p0_full = &p0 + &normal0 * &offset;

        let endpoint: Vec<f64> = match &problem.end {
            BoundaryCondition::Point(target) => (&x1 - target).iter().copied().collect(),
            BoundaryCondition::Submanifold(set) => {
                set.constraint.value(&x1).iter().copied().collect()
            }
        };
        let free_time = if problem.free_time() {
            let at = AmbientPoint::evaluate(&problem.manifold, &x1, false)?;
            let u1 = raw.controls.last().expect("nonempty flow");
            Some(ambient_hamiltonian_at(problem, &at, &p1, lambda0, u1))
        } else {
            None
        };
        let mut transversality: Vec<f64> = (normal1.transpose() * &p1).iter().copied().collect();
        if let Some(end) = &self.end {
            let basis = end.tangent_frame(&x1)?.tangent_basis;
            transversality.extend((basis.transpose() * &p1).iter());
        }
        if let Some(start) = &self.start {
            let basis = start.manifold.tangent_frame(&x0)?.tangent_basis;
            transversality.extend((basis.transpose() * &p0_full).iter());
        }
        let switching = match &unknowns.schedule {
            Some(s) => switching_residuals(&sys, &raw, s)?,
            None => Vec::new(),
        };
        Ok(Shot {
            residual: ResidualVector::new(endpoint, free_time, transversality, switching),
            x0,
            p0: p0_full,
        })
    }
}

fn switching_residuals(
    sys: &AmbientSystem<'_>,
    raw: &RawFlow,
    schedule: &ControlSchedule,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(schedule.switch_times.len());
    for (k, &s) in schedule.switch_times.iter().enumerate() {
        let i = raw
            .times
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - s).abs().total_cmp(&(b.1 - s).abs()))
            .map(|(i, _)| i)
            .expect("nonempty flow");
        let y = &raw.states[i];
        let after = sys.hamiltonian(y, &schedule.controls[k + 1])?;
        let before = sys.hamiltonian(y, &schedule.controls[k])?;
        out.push(after - before);
    }
    Ok(out)
}

/// Layout of the flat parameter vector `θ` searched by Levenberg–Marquardt.
///
/// `θ = [σ] ++ α ++ [t₁] ++ c ++ s`, with `λ₀ = −σ²` on the normal branch,
/// `p(t₀) = P E₀ α`, start coordinates `c` and switching times `s`.
#[derive(Clone)]
struct Layout {
    normal: bool,
    intrinsic: usize,
    free_time: bool,
    fixed_time: f64,
    start: usize,
    /// Arc controls when switching times are unknowns.
    arcs: Option<Vec<DVector<f64>>>,
}

impl Layout {
    fn switches(&self) -> usize {
        self.arcs.as_ref().map_or(0, |a| a.len() - 1)
    }

    fn len(&self) -> usize {
        usize::from(self.normal)
            + self.intrinsic
            + usize::from(self.free_time)
            + self.start
            + self.switches()
    }

    fn alpha_offset(&self) -> usize {
        usize::from(self.normal)
    }

    fn time_offset(&self) -> usize {
        self.alpha_offset() + self.intrinsic
    }

    fn start_offset(&self) -> usize {
        self.time_offset() + usize::from(self.free_time)
    }

    fn switch_offset(&self) -> usize {
        self.start_offset() + self.start
    }

    fn terminal_time(&self, theta: &DVector<f64>) -> f64 {
        if self.free_time {
            theta[self.time_offset()]
        } else {
            self.fixed_time
        }
    }

    /// Rescales the multiplier block so that `σ⁴ + |α|² = 1`.
    fn normalize(&self, theta: &mut DVector<f64>) {
        let sigma = if self.normal { theta[0].abs() } else { 0.0 };
        let alpha_norm2 = theta
            .rows(self.alpha_offset(), self.intrinsic)
            .norm_squared();
        let norm = (sigma.powi(4) + alpha_norm2).sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return;
        }
        if self.normal {
            theta[0] = sigma / norm.sqrt();
        }
        theta
            .rows_mut(self.alpha_offset(), self.intrinsic)
            .scale_mut(1.0 / norm);
    }

    fn decode(&self, shooter: &Shooter<'_>, theta: &DVector<f64>) -> Result<ShootingUnknowns> {
        let lambda0 = if self.normal {
            -theta[0] * theta[0]
        } else {
            0.0
        };
        let alpha = theta.rows(self.alpha_offset(), self.intrinsic).into_owned();
        let coords = theta.rows(self.start_offset(), self.start).into_owned();
        let x0 = shooter.start_point(&coords)?;
        let mut p0 = &shooter.frame * alpha;
        let initial_state = if shooter.start.is_some() {
            let frame = shooter.problem.manifold.tangent_frame(&x0)?;
            p0 = frame.tangent_projector() * p0;
            Some(x0)
        } else {
            None
        };
        let t1 = self.terminal_time(theta);
        let schedule = match &self.arcs {
            None => None,
            Some(arcs) => {
                let s: Vec<f64> = theta
                    .rows(self.switch_offset(), self.switches())
                    .iter()
                    .copied()
                    .collect();
                let ordered = s.windows(2).all(|w| w[0] < w[1]);
                if !ordered
                    || s.first().is_some_and(|&a| a <= 0.0)
                    || s.last().is_some_and(|&b| b >= t1)
                {
                    return Err(PmpError::InvalidProblem(
                        "switching times must be increasing inside (0, t₁)".into(),
                    ));
                }
                Some(ControlSchedule::new(s, arcs.clone())?)
            }
        };
        let mut unknowns = ShootingUnknowns::new(lambda0, &p0, t1);
        unknowns.initial_state = initial_state;
        unknowns.schedule = schedule;
        Ok(unknowns)
    }
}

#[derive(Debug, Clone)]
struct LmOutcome {
    theta: DVector<f64>,
    norm: f64,
    iterations: usize,
}

/// Levenberg–Marquardt on `f` with `θ` re-normalised after every step.
fn levenberg_marquardt<F>(
    f: &F,
    layout: &Layout,
    mut theta: DVector<f64>,
    tol: f64,
    max_iter: usize,
) -> Option<LmOutcome>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    layout.normalize(&mut theta);
    let mut r = f(&theta).ok()?;
    let mut norm = r.norm();
    let mut mu = MU0;
    let mut history = vec![norm];
    let mut iterations = 0;
    while iterations < max_iter && norm >= tol {
        iterations += 1;
        let Ok(jac) = jacobian_from(f, &theta, &r) else {
            break;
        };
        let jt = jac.transpose();
        let normal_matrix = &jt * &jac;
        let gradient = &jt * &r;
        let mut accepted = false;
        while mu <= MU_MAX {
            let damped = &normal_matrix + DMatrix::identity(theta.len(), theta.len()) * mu;
            let Some(step) = damped.cholesky().map(|c| c.solve(&(-&gradient))) else {
                mu *= 10.0;
                continue;
            };
            let mut trial = &theta + step;
            layout.normalize(&mut trial);
            if let Ok(rt) = f(&trial) {
                let nt = rt.norm();
                if nt < norm {
                    theta = trial;
                    r = rt;
                    norm = nt;
                    mu = (mu / 10.0).max(1e-15);
                    accepted = true;
                    break;
                }
            }
            mu *= 10.0;
        }
        if !accepted {
            break;
        }
        history.push(norm);
        // stop creeping starts: under 1% total decrease over the last five steps
        let h = history.len();
        if h > 10 && history[h - 6] < 1.01 * norm {
            break;
        }
    }
    Some(LmOutcome {
        theta,
        norm,
        iterations,
    })
}

/// One certified extremal together with how it was found.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub extremal: Extremal,
    pub certificate: PmpCertificate,
    pub unknowns: ShootingUnknowns,
    pub residual: ResidualVector,
    pub start_index: usize,
    pub abnormal: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveTrace {
    pub starts: usize,
    /// Starts whose coarse search came close to a root.
    pub promising: usize,
    /// Distinct roots polished at the working step.
    pub polished: usize,
    pub converged: usize,
    pub certified: usize,
    pub branches: Vec<Branch>,
}

#[derive(Debug, Clone)]
pub struct PmpSolution {
    pub best: Candidate,
    /// All certified candidates, ranked by cost, then residual, then start index.
    pub candidates: Vec<Candidate>,
    /// Only the abnormal branch produced a certified extremal.
    pub abnormal_only: bool,
    pub trace: SolveTrace,
}

impl PmpSolution {
    pub fn extremal(&self) -> &Extremal {
        &self.best.extremal
    }

    pub fn certificate(&self) -> &PmpCertificate {
        &self.best.certificate
    }
}

/// Runs `f` on a pool capped by `TUBEPMP_THREADS` when that variable is set.
pub fn with_thread_cap<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    let cap = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok());
    match cap.filter(|&n| n > 0) {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        },
        None => f(),
    }
}

/// Searches for certified extremals by multi-start shooting.
pub fn solve_pmp(
    problem: &ControlProblem,
    config: &SolverConfig,
    tolerances: &Tolerances,
) -> Result<PmpSolution> {
    if config.starts == 0 {
        return Err(PmpError::InvalidProblem(
            "at least one start is required".into(),
        ));
    }
    let [lo, hi] = config.t1_range;
    if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
        return Err(PmpError::InvalidProblem(format!(
            "invalid terminal-time range [{lo}, {hi}]"
        )));
    }
    let shooter = Shooter::new(problem)?;
    let branches: &[bool] = match config.branch {
        Branch::Normal => &[true],
        Branch::Abnormal => &[false],
        Branch::Both => &[true, false],
    };
    let mut trace = SolveTrace {
        starts: 0,
        ..SolveTrace::default()
    };
    for &normal in branches {
        trace.branches.push(if normal {
            Branch::Normal
        } else {
            Branch::Abnormal
        });
        let candidates =
            with_thread_cap(|| solve_branch(&shooter, config, tolerances, normal, &mut trace))?;
        if let Some(best) = candidates.first().cloned() {
            return Ok(PmpSolution {
                best,
                candidates,
                abnormal_only: !normal,
                trace,
            });
        }
    }
    Err(PmpError::NoExtremalFound {
        starts: trace.starts,
    })
}

fn base_layout(shooter: &Shooter<'_>, normal: bool) -> Layout {
    let problem = shooter.problem;
    Layout {
        normal,
        intrinsic: problem.manifold.intrinsic_dim(),
        free_time: problem.free_time(),
        fixed_time: match problem.terminal_time {
            TerminalTime::Fixed(t) => t,
            TerminalTime::Free => 0.0,
        },
        start: shooter.start_dim(),
        arcs: None,
    }
}

fn initial_guesses(layout: &Layout, config: &SolverConfig, normal: bool) -> Vec<DVector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(if normal { 0 } else { 1 });
    let times =
        Uniform::new_inclusive(config.t1_range[0], config.t1_range[1]).expect("validated range");
    (0..config.starts)
        .map(|_| {
            let mut theta = DVector::zeros(layout.len());
            let width = usize::from(normal) + layout.intrinsic;
            let mut dir = DVector::<f64>::from_fn(width, |_, _| StandardNormal.sample(&mut rng));
            let norm = dir.norm();
            if norm > 0.0 {
                dir /= norm;
            }
            if normal {
                // (λ₀, α) uniform on the unit half-sphere λ₀ ≤ 0
                theta[0] = dir[0].abs().sqrt();
                theta
                    .rows_mut(1, layout.intrinsic)
                    .copy_from(&dir.rows(1, layout.intrinsic));
            } else {
                theta.rows_mut(0, layout.intrinsic).copy_from(&dir);
            }
            if layout.free_time {
                theta[layout.time_offset()] = times.sample(&mut rng);
            }
            theta
        })
        .collect()
}

struct Polished {
    start_index: usize,
    layout: Layout,
    outcome: LmOutcome,
}

fn solve_branch(
    shooter: &Shooter<'_>,
    config: &SolverConfig,
    tolerances: &Tolerances,
    normal: bool,
    trace: &mut SolveTrace,
) -> Result<Vec<Candidate>> {
    let layout = base_layout(shooter, normal);
    let guesses = initial_guesses(&layout, config, normal);
    trace.starts += guesses.len();
    let coarse = FlowOptions {
        step_fraction: config.search_step_fraction,
        ..FlowOptions::fast()
    };
    let fine = FlowOptions::fast();
    let residual_with = |layout: &Layout, options: &FlowOptions| {
        let layout = layout.clone();
        let options = options.clone();
        move |theta: &DVector<f64>| -> Result<DVector<f64>> {
            let unknowns = layout.decode(shooter, theta)?;
            Ok(shooter.evaluate(&unknowns, &options)?.residual.values())
        }
    };

    let search = residual_with(&layout, &coarse);
    let searched: Vec<Option<LmOutcome>> = guesses
        .into_par_iter()
        .map(|theta| levenberg_marquardt(&search, &layout, theta, SEARCH_TOL, config.max_iter))
        .collect();

    // coarse roots, deduplicated in (residual, start index) order
    let mut promising: Vec<(usize, LmOutcome)> = searched
        .into_iter()
        .enumerate()
        .filter_map(|(i, o)| o.filter(|o| o.norm < PROMISING).map(|o| (i, o)))
        .collect();
    trace.promising += promising.len();
    promising.sort_by(|a, b| a.1.norm.total_cmp(&b.1.norm).then(a.0.cmp(&b.0)));
    let mut unique: Vec<(usize, LmOutcome)> = Vec::new();
    for (i, o) in promising {
        if unique
            .iter()
            .all(|(_, u)| (&u.theta - &o.theta).amax() > DEDUPE_TOL)
        {
            unique.push((i, o));
        }
    }
    trace.polished += unique.len();

    let polish = residual_with(&layout, &fine);
    let polished: Vec<Option<Polished>> = unique
        .into_par_iter()
        .map(|(start_index, o)| {
            let outcome = levenberg_marquardt(
                &polish,
                &layout,
                o.theta,
                config.tol_residual,
                config.max_iter,
            )?;
            let mut result = Polished {
                start_index,
                layout: layout.clone(),
                outcome,
            };
            if config.refine_switches {
                if let Some(refined) = refine_switches(shooter, &result, config, &fine) {
                    result = refined;
                }
            }
            Some(result)
        })
        .collect();

    // starts that polished onto the same root are certified once
    let mut roots: Vec<Polished> = polished.into_iter().flatten().collect();
    roots.sort_by(|a, b| {
        a.outcome
            .norm
            .total_cmp(&b.outcome.norm)
            .then(a.start_index.cmp(&b.start_index))
    });
    let mut distinct_roots: Vec<Polished> = Vec::new();
    for r in roots {
        let seen = distinct_roots.iter().any(|d| {
            d.layout.len() == r.layout.len()
                && (&d.outcome.theta - &r.outcome.theta).amax() <= DEDUPE_TOL
        });
        if !seen {
            distinct_roots.push(r);
        }
    }
    let certified: Vec<Option<Candidate>> = distinct_roots
        .into_par_iter()
        .map(|p| certify(shooter, p, config, tolerances).ok().flatten())
        .collect();
    let mut candidates: Vec<Candidate> = certified.into_iter().flatten().collect();
    trace.converged += candidates.len();
    candidates.retain(|c| c.certificate.pass);
    trace.certified += candidates.len();
    candidates.sort_by(|a, b| {
        a.extremal
            .cost
            .total_cmp(&b.extremal.cost)
            .then(a.residual.norm.total_cmp(&b.residual.norm))
            .then(a.start_index.cmp(&b.start_index))
    });
    let mut distinct: Vec<Candidate> = Vec::new();
    for c in candidates {
        if distinct.iter().all(|d| !same_extremal(d, &c)) {
            distinct.push(c);
        }
    }
    Ok(distinct)
}

fn same_extremal(a: &Candidate, b: &Candidate) -> bool {
    (a.unknowns.terminal_time - b.unknowns.terminal_time).abs() < 1e-6
        && (a.extremal.cost - b.extremal.cost).abs() < 1e-6
        && a.extremal.switching_times.len() == b.extremal.switching_times.len()
        && (&a.unknowns.costate_direction - &b.unknowns.costate_direction).amax() < DEDUPE_TOL
}

/// Re-solves with the switching times of a converged bang-bang candidate as unknowns.
fn refine_switches(
    shooter: &Shooter<'_>,
    found: &Polished,
    config: &SolverConfig,
    options: &FlowOptions,
) -> Option<Polished> {
    let unknowns = found.layout.decode(shooter, &found.outcome.theta).ok()?;
    let problem = shooter.problem;
    let extremal = flow_extremal(
        problem,
        &AdjointState::new(
            shooter
                .start_point(
                    &found
                        .outcome
                        .theta
                        .rows(found.layout.start_offset(), found.layout.start)
                        .into_owned(),
                )
                .ok()?,
            unknowns.initial_costate(),
            unknowns.lambda0(),
        )
        .ok()?,
        &ControlPolicy::Argmax,
        (0.0, unknowns.terminal_time),
        options,
    )
    .ok()?;
    if extremal.switching_times.is_empty() {
        return None;
    }
    let mut arcs = vec![extremal.controls[0].clone()];
    for &s in &extremal.switching_times {
        let i = extremal.times.iter().position(|&t| t >= s)?;
        arcs.push(extremal.controls[i].clone());
    }
    let mut layout = found.layout.clone();
    layout.arcs = Some(arcs);
    let mut theta = DVector::zeros(layout.len());
    theta
        .rows_mut(0, found.layout.len())
        .copy_from(&found.outcome.theta);
    theta
        .rows_mut(layout.switch_offset(), layout.switches())
        .copy_from_slice(&extremal.switching_times);
    let f = {
        let layout = layout.clone();
        let options = options.clone();
        move |theta: &DVector<f64>| -> Result<DVector<f64>> {
            let unknowns = layout.decode(shooter, theta)?;
            Ok(shooter.evaluate(&unknowns, &options)?.residual.values())
        }
    };
    let outcome = levenberg_marquardt(&f, &layout, theta, config.tol_residual, config.max_iter)?;
    (outcome.norm < config.tol_residual.max(found.outcome.norm)).then_some(Polished {
        start_index: found.start_index,
        layout,
        outcome,
    })
}

/// Final flow with error control and verification of a polished root.
fn certify(
    shooter: &Shooter<'_>,
    found: Polished,
    config: &SolverConfig,
    tolerances: &Tolerances,
) -> Result<Option<Candidate>> {
    let problem = shooter.problem;
    let unknowns = found.layout.decode(shooter, &found.outcome.theta)?;
    let shot = shooter.evaluate(&unknowns, &FlowOptions::fast())?;
    if !(shot.residual.norm < config.tol_residual
        && shot.residual.endpoint_norm() < config.tol_endpoint)
    {
        return Ok(None);
    }
    let lambda0 = unknowns.lambda0();
    let policy = match &unknowns.schedule {
        Some(s) => ControlPolicy::Schedule(s.clone()),
        None => ControlPolicy::Argmax,
    };
    let initial = AdjointState::new(shot.x0.clone(), shot.p0.clone(), lambda0)?;
    let extremal = flow_extremal(
        problem,
        &initial,
        &policy,
        (0.0, unknowns.terminal_time),
        &FlowOptions::default(),
    )?;
    let certificate = verify(&extremal, problem, tolerances)?;
    let mut unknowns = unknowns;
    // report the multiplier pair including the solved normal offset
    let full = ShootingUnknowns::new(lambda0, &shot.p0, unknowns.terminal_time);
    unknowns.costate_direction = full.costate_direction;
    Ok(Some(Candidate {
        extremal,
        certificate,
        unknowns,
        residual: shot.residual,
        start_index: found.start_index,
        abnormal: lambda0 == 0.0,
        iterations: found.outcome.iterations,
    }))
}
