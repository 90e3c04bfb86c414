//! Numeric certification of the maximum-principle necessary conditions for a
//! candidate extremal.
//!
//! Costate-linear residuals are divided by the largest `‖(λ₀, p)‖∞` over the
//! grid, so scaling the multipliers by `c > 0` leaves every verdict unchanged.

use crate::error::{PmpError, Result};
use crate::flow::{reintegrate, Extremal};
use crate::hamiltonian::{ambient_hamiltonian_at, local_model, maximize_ambient_at, tie_tolerance};
use crate::system::{AmbientPoint, BoundaryCondition, ControlProblem};
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub const CERTIFICATE_SCHEMA_VERSION: u32 = 1;

/// Substeps used when re-integrating each grid interval.
const REINTEGRATION_SUBSTEPS: usize = 4;
/// Vertex enumeration is capped for high-dimensional boxes.
const MAX_VERTICES: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub ode_defect: f64,
    pub max_gap: f64,
    pub hamiltonian_zero: f64,
    pub transversality: f64,
    pub nonvanishing_margin: f64,
    pub boundary: f64,
    /// Uniform control samples per checkpoint for the maximum condition.
    pub samples: usize,
    /// Check the maximum condition at every `stride`-th grid point.
    pub checkpoint_stride: usize,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            ode_defect: 1e-6,
            max_gap: 1e-7,
            hamiltonian_zero: 1e-6,
            transversality: 1e-6,
            nonvanishing_margin: 1e-3,
            boundary: 1e-6,
            samples: 1000,
            checkpoint_stride: 1,
        }
    }
}

/// A residual compared against an upper tolerance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub residual: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl Check {
    fn below(residual: f64, tolerance: f64) -> Self {
        Self {
            residual,
            tolerance,
            pass: residual <= tolerance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lambda0Check {
    pub lambda0: f64,
    pub sign_ok: bool,
    /// `max_t |λ₀(t) − λ₀(t₀)|`, relative.
    pub constancy: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HamiltonianMode {
    /// Free terminal time: `H ≡ 0` is required.
    FreeTime,
    /// Fixed terminal time: only constancy of `H` is checked.
    FixedTime,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HamiltonianCheck {
    pub mode: HamiltonianMode,
    pub applicable: bool,
    pub residual: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransversalityCheck {
    /// `⟨λ(t₀), T S₀⟩` basis components.
    pub start: Vec<f64>,
    /// `⟨λ(t₁), T S₁⟩` basis components.
    pub end: Vec<f64>,
    /// Normal components of `p(t₁)` (the ambient fiber condition).
    pub fiber: Vec<f64>,
    pub residual: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonvanishingCheck {
    /// `min_t ‖(λ₀, λ(t))‖∞ / max_t ‖(λ₀, λ(t))‖∞`; zero for a vanishing pair.
    pub margin: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// How the costate of an imported candidate was obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reconstruction {
    pub method: String,
    pub substeps: usize,
}

/// Outcome of `verify`. Field names are stable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PmpCertificate {
    pub schema_version: u32,
    /// Statement 1: the pair solves the Hamiltonian system.
    pub hamiltonian_ode: Check,
    /// Statement 2: `λ₀ ≤ 0` and constant.
    pub lambda0: Lambda0Check,
    /// Statement 3: `max_v H(v) − H(u(t))` over sampled controls.
    pub maximum_condition: Check,
    /// Statement 4: `H ≡ 0` (free time) or `H` constant (fixed time).
    pub hamiltonian_zero: HamiltonianCheck,
    pub transversality: TransversalityCheck,
    pub nonvanishing: NonvanishingCheck,
    /// Distance of the endpoints from the boundary conditions.
    pub boundary: Check,
    /// `max_t |g(x(t))|`.
    pub on_manifold: Check,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reconstruction: Option<Reconstruction>,
    pub pass: bool,
    /// Names of the failed checks, in certificate order.
    pub failures: Vec<String>,
}

impl PmpCertificate {
    pub fn hamiltonian_ode_residual(&self) -> f64 {
        self.hamiltonian_ode.residual
    }
    pub fn lambda0_sign_ok(&self) -> bool {
        self.lambda0.sign_ok
    }
    pub fn lambda0_constancy(&self) -> f64 {
        self.lambda0.constancy
    }
    pub fn max_condition_gap(&self) -> f64 {
        self.maximum_condition.residual
    }
    pub fn hamiltonian_zero_residual(&self) -> f64 {
        self.hamiltonian_zero.residual
    }
    pub fn transversality_residuals(&self) -> Vec<f64> {
        let t = &self.transversality;
        t.start
            .iter()
            .chain(&t.end)
            .chain(&t.fiber)
            .copied()
            .collect()
    }
    pub fn nonvanishing_margin(&self) -> f64 {
        self.nonvanishing.margin
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("certificate serializes")
    }

    fn finish(mut self) -> Self {
        let checks = [
            ("statement1_hamiltonian_ode", self.hamiltonian_ode.pass),
            ("statement2_lambda0", self.lambda0.pass),
            ("statement3_maximum_condition", self.maximum_condition.pass),
            ("statement4_hamiltonian_zero", self.hamiltonian_zero.pass),
            ("transversality", self.transversality.pass),
            ("nonvanishing", self.nonvanishing.pass),
            ("boundary", self.boundary.pass),
            ("on_manifold", self.on_manifold.pass),
        ];
        self.failures = checks
            .iter()
            .filter(|(_, ok)| !ok)
            .map(|(name, _)| name.to_string())
            .collect();
        self.pass = self.failures.is_empty();
        self
    }
}

fn validate_grid(extremal: &Extremal, problem: &ControlProblem) -> Result<()> {
    let n = extremal.times.len();
    if n < 2 {
        return Err(PmpError::GridMismatch(
            "an extremal needs at least two grid points".into(),
        ));
    }
    let lens = [
        extremal.states.len(),
        extremal.costates.len(),
        extremal.controls.len(),
        extremal.intrinsic_costates.len(),
    ];
    if lens.iter().any(|&l| l != n) {
        return Err(PmpError::GridMismatch(format!(
            "grid of {n} times but row counts {lens:?}"
        )));
    }
    if extremal.times.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(PmpError::GridMismatch(
            "times must be strictly increasing".into(),
        ));
    }
    let dim = problem.ambient_dim();
    if extremal
        .states
        .iter()
        .chain(&extremal.costates)
        .any(|v| v.len() != dim)
    {
        return Err(PmpError::GridMismatch(format!(
            "states and costates must have {dim} components"
        )));
    }
    for u in &extremal.controls {
        problem.ensure_control(u)?;
    }
    Ok(())
}

/// True when the maximiser varies continuously, so controls are interpolated between rows.
fn smooth_controls(problem: &ControlProblem, extremal: &Extremal) -> bool {
    let x = &extremal.states[0];
    let at = AmbientPoint {
        z: x.clone(),
        retracted: x.clone(),
        tube_distance: 0.0,
        bump: 1.0,
        retraction_jacobian: None,
        bump_gradient: None,
    };
    let p = &extremal.costates[0];
    match local_model(problem, &at, p, extremal.lambda0) {
        Some(model) => model.is_smooth(tie_tolerance(p, extremal.lambda0)),
        None => !problem.control_set.is_finite(),
    }
}

fn relative(value: f64, scale: f64) -> f64 {
    if value == 0.0 {
        0.0
    } else if scale > 0.0 {
        value / scale
    } else {
        f64::INFINITY
    }
}

/// Certifies `extremal` against every necessary condition.
pub fn verify(
    extremal: &Extremal,
    problem: &ControlProblem,
    tolerances: &Tolerances,
) -> Result<PmpCertificate> {
    verify_with_multipliers(extremal, problem, tolerances, None)
}

/// As `verify`, with an optional per-row `λ₀` record for the constancy check.
pub(crate) fn verify_with_multipliers(
    extremal: &Extremal,
    problem: &ControlProblem,
    tol: &Tolerances,
    lambda0_rows: Option<&[f64]>,
) -> Result<PmpCertificate> {
    validate_grid(extremal, problem)?;
    let n = extremal.len();
    let l0 = extremal.lambda0;
    let scale = extremal
        .costates
        .iter()
        .map(|p| p.amax().max(l0.abs()))
        .fold(0.0, f64::max);

    // statement 1
    let smooth = smooth_controls(problem, extremal);
    let mut ode = 0.0_f64;
    for i in 0..n - 1 {
        let h = extremal.times[i + 1] - extremal.times[i];
        let (u0, u1) = (&extremal.controls[i], &extremal.controls[i + 1]);
        let control = |tau: f64| {
            if smooth {
                u0 + (u1 - u0) * (tau / h)
            } else {
                u0.clone()
            }
        };
        let (z, p) = match reintegrate(
            problem,
            l0,
            &extremal.states[i],
            &extremal.costates[i],
            control,
            h,
            REINTEGRATION_SUBSTEPS,
        ) {
            Ok(zp) => zp,
            Err(_) => {
                ode = f64::INFINITY;
                break;
            }
        };
        let dx = (z - &extremal.states[i + 1]).amax();
        let dp = relative((p - &extremal.costates[i + 1]).amax(), scale);
        ode = ode.max(dx).max(dp);
    }

    // statement 2
    let constancy = lambda0_rows.map_or(0.0, |rows| {
        let first = rows.first().copied().unwrap_or(l0);
        relative(
            rows.iter().map(|l| (l - first).abs()).fold(0.0, f64::max),
            scale,
        )
    });
    let sign_ok = l0 <= 0.0 && lambda0_rows.is_none_or(|rows| rows.iter().all(|l| *l <= 0.0));
    let lambda0 = Lambda0Check {
        lambda0: l0,
        sign_ok,
        constancy,
        tolerance: tol.ode_defect,
        pass: sign_ok && constancy <= tol.ode_defect,
    };

    // statement 3 and the Hamiltonian along the grid
    let mut vertices = problem.control_set.vertices();
    vertices.truncate(MAX_VERTICES);
    let stride = tol.checkpoint_stride.max(1);
    let rows: Vec<usize> = (0..n).collect();
    let per_row: Vec<Result<(f64, f64)>> = rows
        .par_iter()
        .map(|&i| -> Result<(f64, f64)> {
            let at = AmbientPoint::evaluate(&problem.manifold, &extremal.states[i], false)?;
            let p = &extremal.costates[i];
            let h = ambient_hamiltonian_at(problem, &at, p, l0, &extremal.controls[i]);
            if i % stride != 0 && i != n - 1 {
                return Ok((h, 0.0));
            }
            let full = |v: &DVector<f64>| ambient_hamiltonian_at(problem, &at, p, l0, v);
            // control-affine problems: H(v) = c + σ·v + q·v², trusted only if it
            // reproduces the full Hamiltonian at the recorded control and a vertex
            let model = local_model(problem, &at, p, l0).and_then(|m| {
                let c = h - m.control_part(&extremal.controls[i]);
                let probe = vertices
                    .first()
                    .cloned()
                    .unwrap_or_else(|| problem.control_set.default_control());
                let expected = full(&probe);
                let agree = (c + m.control_part(&probe) - expected).abs()
                    <= 1e-12 * (1.0 + h.abs() + expected.abs());
                agree.then_some((m, c))
            });
            let eval = |v: &DVector<f64>| match &model {
                Some((m, c)) => c + m.control_part(v),
                None => full(v),
            };
            let mut best = maximize_ambient_at(problem, &at, p, l0, None).value;
            for v in &vertices {
                best = best.max(eval(v));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
            for _ in 0..tol.samples {
                let v = problem.control_set.sample(&mut rng);
                best = best.max(eval(&v));
            }
            Ok((h, (best - h).max(0.0)))
        })
        .collect();
    let mut hams = Vec::with_capacity(n);
    let mut gap = 0.0_f64;
    for r in per_row {
        let (h, g) = r?;
        hams.push(h);
        gap = gap.max(g);
    }
    let maximum_condition = Check::below(relative(gap, scale), tol.max_gap);

    // statement 4
    let (mode, h_res) = if problem.free_time() {
        (
            HamiltonianMode::FreeTime,
            hams.iter().map(|h| h.abs()).fold(0.0, f64::max),
        )
    } else {
        let h0 = hams[0];
        (
            HamiltonianMode::FixedTime,
            hams.iter().map(|h| (h - h0).abs()).fold(0.0, f64::max),
        )
    };
    let h_res = relative(h_res, scale);
    let hamiltonian_zero = HamiltonianCheck {
        mode,
        applicable: mode == HamiltonianMode::FreeTime,
        residual: h_res,
        tolerance: tol.hamiltonian_zero,
        pass: h_res <= tol.hamiltonian_zero,
    };

    // transversality
    let x0 = &extremal.states[0];
    let x1 = extremal.final_state();
    let p0 = &extremal.costates[0];
    let p1 = extremal.final_costate();
    let start = match &problem.start {
        BoundaryCondition::Submanifold(set) => {
            let frame = problem.boundary_manifold(set)?.tangent_frame(x0)?;
            (frame.tangent_basis.transpose() * p0)
                .iter()
                .map(|c| relative(*c, scale))
                .collect()
        }
        BoundaryCondition::Point(_) => Vec::new(),
    };
    let end = match &problem.end {
        BoundaryCondition::Submanifold(set) => {
            let frame = problem.boundary_manifold(set)?.tangent_frame(x1)?;
            (frame.tangent_basis.transpose() * p1)
                .iter()
                .map(|c| relative(*c, scale))
                .collect()
        }
        BoundaryCondition::Point(_) => Vec::new(),
    };
    let normal = problem.manifold.fiber_tangent(x1)?;
    let fiber: Vec<f64> = (normal.transpose() * p1)
        .iter()
        .map(|c| relative(*c, scale))
        .collect();
    let t_res = start
        .iter()
        .chain(&end)
        .chain(&fiber)
        .map(|c: &f64| c.abs())
        .fold(0.0, f64::max);
    let transversality = TransversalityCheck {
        start,
        end,
        fiber,
        residual: t_res,
        tolerance: tol.transversality,
        pass: t_res <= tol.transversality,
    };

    // non-vanishing of (λ₀, λ)
    let mags: Vec<f64> = extremal
        .intrinsic_costates
        .iter()
        .map(|l| l.amax().max(l0.abs()))
        .collect();
    let hi = mags.iter().copied().fold(0.0, f64::max);
    let lo = mags.iter().copied().fold(f64::INFINITY, f64::min);
    let margin = if hi > 0.0 { lo / hi } else { 0.0 };
    let nonvanishing = NonvanishingCheck {
        margin,
        tolerance: tol.nonvanishing_margin,
        pass: margin >= tol.nonvanishing_margin,
    };

    let boundary = Check::below(
        boundary_error(problem, &problem.start, x0).max(boundary_error(problem, &problem.end, x1)),
        tol.boundary,
    );
    let drift = extremal
        .states
        .iter()
        .map(|x| problem.manifold.constraint_norm(x))
        .fold(0.0, f64::max);
    let on_manifold = Check::below(drift, tol.boundary);

    Ok(PmpCertificate {
        schema_version: CERTIFICATE_SCHEMA_VERSION,
        hamiltonian_ode: Check::below(ode, tol.ode_defect),
        lambda0,
        maximum_condition,
        hamiltonian_zero,
        transversality,
        nonvanishing,
        boundary,
        on_manifold,
        reconstruction: None,
        pass: false,
        failures: Vec::new(),
    }
    .finish())
}

pub(crate) fn boundary_error(
    problem: &ControlProblem,
    bc: &BoundaryCondition,
    x: &DVector<f64>,
) -> f64 {
    match bc {
        BoundaryCondition::Point(target) => (x - target).amax(),
        BoundaryCondition::Submanifold(set) => set.constraint.value(x).amax(),
    }
    .max(problem.manifold.constraint_norm(x))
}
