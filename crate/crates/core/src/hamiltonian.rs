//! Hamiltonian evaluation, pointwise maximisation over the control set, and the
//! ambient Hamiltonian vector field.

use crate::error::{PmpError, Result};
use crate::manifold::Covector;
use crate::system::{
    extended_field_at, extended_jacobian_at, AmbientPoint, ControlBlock, ControlProblem,
    ControlSet, CostStructure,
};
use nalgebra::DVector;

/// Ties between switching-function values are declared below this multiple of
/// the costate scale `max(|p|∞, |λ₀|)`.
pub const TIE_TOL: f64 = 1e-12;

/// Costate data at a point: `(x, p, λ₀)` with `p` ambient.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointState {
    pub x: DVector<f64>,
    pub p: DVector<f64>,
    pub lambda0: f64,
}

impl AdjointState {
    pub fn new(x: DVector<f64>, p: DVector<f64>, lambda0: f64) -> Result<Self> {
        if x.len() != p.len() {
            return Err(PmpError::DimensionMismatch(format!(
                "state has {} components, costate {}",
                x.len(),
                p.len()
            )));
        }
        if lambda0 > 0.0 {
            return Err(PmpError::InvalidProblem(format!(
                "lambda0 must be <= 0, got {lambda0}"
            )));
        }
        Ok(Self { x, p, lambda0 })
    }
}

/// Outcome of `maximize_hamiltonian`.
#[derive(Debug, Clone, PartialEq)]
pub struct Maximizer {
    pub control: DVector<f64>,
    pub value: f64,
    /// Set when the maximiser is not unique (a switching function vanished).
    pub degenerate: bool,
}

pub fn tie_tolerance(p: &DVector<f64>, lambda0: f64) -> f64 {
    TIE_TOL * p.amax().max(lambda0.abs())
}

/// `λ₀ f⁰ + ⟨costate, dynamics⟩`.
///
/// An ambient covector uses the extended field `F` and `f⁰ ∘ π`; an intrinsic
/// one uses `f` at the frame's base point.
pub fn hamiltonian(
    problem: &ControlProblem,
    costate: &Covector,
    lambda0: f64,
    u: &DVector<f64>,
) -> Result<f64> {
    problem.ensure_control(u)?;
    match costate {
        Covector::Ambient {
            base_point,
            components,
        } => {
            let at = AmbientPoint::evaluate(&problem.manifold, base_point, false)?;
            Ok(ambient_hamiltonian_at(problem, &at, components, lambda0, u))
        }
        Covector::Intrinsic { frame, components } => {
            let x = &frame.base_point;
            let f = problem.dynamics.eval(x, u);
            let lifted = &frame.tangent_basis * components;
            Ok(lambda0 * problem.running_cost.eval(x, u) + lifted.dot(&f))
        }
    }
}

pub(crate) fn ambient_hamiltonian_at(
    problem: &ControlProblem,
    at: &AmbientPoint,
    p: &DVector<f64>,
    lambda0: f64,
    u: &DVector<f64>,
) -> f64 {
    let mut h = extended_field_at(problem, at, u).dot(p);
    if lambda0 != 0.0 {
        h += lambda0 * problem.running_cost.eval(&at.retracted, u);
    }
    h
}

/// A maximiser over the control set, holding `previous` at ties.
pub fn maximize_hamiltonian(
    problem: &ControlProblem,
    costate: &Covector,
    lambda0: f64,
    previous: Option<&DVector<f64>>,
) -> Result<Maximizer> {
    match costate {
        Covector::Ambient {
            base_point,
            components,
        } => {
            let at = AmbientPoint::evaluate(&problem.manifold, base_point, false)?;
            Ok(maximize_ambient_at(
                problem, &at, components, lambda0, previous,
            ))
        }
        Covector::Intrinsic { frame, components } => {
            let lifted = &frame.tangent_basis * components;
            let at = AmbientPoint {
                z: frame.base_point.clone(),
                retracted: frame.base_point.clone(),
                tube_distance: 0.0,
                bump: 1.0,
                retraction_jacobian: None,
                bump_gradient: None,
            };
            Ok(maximize_ambient_at(
                problem, &at, &lifted, lambda0, previous,
            ))
        }
    }
}

pub(crate) fn maximize_ambient_at(
    problem: &ControlProblem,
    at: &AmbientPoint,
    p: &DVector<f64>,
    lambda0: f64,
    previous: Option<&DVector<f64>>,
) -> Maximizer {
    let tol = tie_tolerance(p, lambda0);
    let (control, degenerate) = match local_model(problem, at, p, lambda0) {
        Some(model) => model.maximize(&problem.control_set, previous, tol),
        None => maximize_general(
            |u| ambient_hamiltonian_at(problem, at, p, lambda0, u),
            &problem.control_set,
            previous,
            tol,
        ),
    };
    let value = ambient_hamiltonian_at(problem, at, p, lambda0, &control);
    Maximizer {
        control,
        value,
        degenerate,
    }
}

/// `H(u) = c + ⟨σ, u⟩ + Σ qᵢ uᵢ²` at a fixed state and costate.
#[derive(Debug, Clone)]
pub(crate) struct SwitchingModel {
    pub sigma: DVector<f64>,
    pub quadratic: DVector<f64>,
}

pub(crate) fn local_model(
    problem: &ControlProblem,
    at: &AmbientPoint,
    p: &DVector<f64>,
    lambda0: f64,
) -> Option<SwitchingModel> {
    let m = problem.control_dim();
    let mut sigma = DVector::zeros(m);
    if at.bump > 0.0 {
        let (_, gens) = problem.dynamics.affine_split(&at.retracted)?;
        sigma = gens.transpose() * p * at.bump;
    }
    let quadratic = match problem.running_cost.control_structure(&at.retracted, m) {
        CostStructure::Affine { linear, .. } => {
            sigma += linear * lambda0;
            DVector::zeros(m)
        }
        CostStructure::SeparableQuadratic {
            linear, quadratic, ..
        } => {
            sigma += linear * lambda0;
            quadratic * lambda0
        }
        CostStructure::General => {
            if lambda0 != 0.0 {
                return None;
            }
            DVector::zeros(m)
        }
    };
    Some(SwitchingModel { sigma, quadratic })
}

impl SwitchingModel {
    fn value(&self, range: std::ops::Range<usize>, v: &[f64]) -> f64 {
        range
            .zip(v)
            .map(|(i, vi)| self.sigma[i] * vi + self.quadratic[i] * vi * vi)
            .sum()
    }

    /// `H(v)` up to a control-independent constant.
    pub fn control_part(&self, v: &DVector<f64>) -> f64 {
        self.value(0..v.len(), v.as_slice())
    }

    /// Whether the maximiser varies continuously with the costate (strictly concave in some coordinate).
    pub fn is_smooth(&self, tol: f64) -> bool {
        self.quadratic.iter().any(|q| *q < -tol)
    }

    pub fn maximize(
        &self,
        set: &ControlSet,
        previous: Option<&DVector<f64>>,
        tol: f64,
    ) -> (DVector<f64>, bool) {
        let mut u = set.default_control();
        let mut degenerate = false;
        for block in set.blocks() {
            match block {
                ControlBlock::Interval {
                    index,
                    lower,
                    upper,
                } => {
                    let held = previous.map_or(0.5 * (lower + upper), |p| p[index]);
                    let (s, q) = (self.sigma[index], self.quadratic[index]);
                    u[index] = if q < -tol {
                        (-s / (2.0 * q)).clamp(lower, upper)
                    } else {
                        let lo = s * lower + q * lower * lower;
                        let hi = s * upper + q * upper * upper;
                        if (hi - lo).abs() <= tol * (upper - lower).max(1.0) {
                            degenerate = true;
                            held
                        } else if hi > lo {
                            upper
                        } else {
                            lower
                        }
                    };
                }
                ControlBlock::Points { offset, points } => {
                    let range = offset..offset + points[0].len();
                    let scores: Vec<f64> = points
                        .iter()
                        .map(|p| self.value(range.clone(), p.as_slice()))
                        .collect();
                    let (choice, tie) = pick_best(&scores, tol, |i| {
                        previous.is_some_and(|prev| prev.rows(offset, range.len()) == points[i])
                    });
                    degenerate |= tie;
                    u.rows_mut(offset, range.len()).copy_from(&points[choice]);
                }
            }
        }
        (u, degenerate)
    }
}

/// Index of the best score; at ties prefers an index marked `held`, else the first.
fn pick_best(scores: &[f64], tol: f64, held: impl Fn(usize) -> bool) -> (usize, bool) {
    let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let tied: Vec<usize> = (0..scores.len())
        .filter(|&i| scores[i] >= best - tol)
        .collect();
    let choice = tied.iter().copied().find(|&i| held(i)).unwrap_or(tied[0]);
    (choice, tied.len() > 1)
}

const GRID_POINTS: usize = 41;
const SWEEPS: usize = 3;

/// Black-box maximisation: exhaustive over finite products, otherwise
/// coordinate sweeps of a grid search refined by golden section.
pub(crate) fn maximize_general<H: Fn(&DVector<f64>) -> f64>(
    h: H,
    set: &ControlSet,
    previous: Option<&DVector<f64>>,
    tol: f64,
) -> (DVector<f64>, bool) {
    if set.is_finite() {
        let candidates = set.vertices();
        let scores: Vec<f64> = candidates.iter().map(&h).collect();
        let (i, tie) = pick_best(&scores, tol, |i| previous == Some(&candidates[i]));
        return (candidates[i].clone(), tie);
    }
    let mut u = match previous {
        Some(p) if set.contains(p, 0.0) => p.clone(),
        _ => set.default_control(),
    };
    let mut degenerate = false;
    for _ in 0..SWEEPS {
        degenerate = false;
        for block in set.blocks() {
            match block {
                ControlBlock::Interval {
                    index,
                    lower,
                    upper,
                } => {
                    let mut probe = u.clone();
                    let mut eval = |s: f64| {
                        probe[index] = s;
                        h(&probe)
                    };
                    let width = (upper - lower) / (GRID_POINTS - 1) as f64;
                    let grid: Vec<f64> = (0..GRID_POINTS)
                        .map(|k| eval(lower + width * k as f64))
                        .collect();
                    let current = eval(u[index]);
                    let (k, _) = pick_best(&grid, 0.0, |_| false);
                    if grid[k] <= current + tol {
                        continue;
                    }
                    let a = (lower + width * (k as f64 - 1.0)).max(lower);
                    let b = (lower + width * (k as f64 + 1.0)).min(upper);
                    let s = golden_section(&mut eval, a, b);
                    let best = if eval(s) >= grid[k] {
                        s
                    } else {
                        lower + width * k as f64
                    };
                    u[index] = best;
                }
                ControlBlock::Points { offset, points } => {
                    let len = points[0].len();
                    let scores: Vec<f64> = points
                        .iter()
                        .map(|pt| {
                            let mut probe = u.clone();
                            probe.rows_mut(offset, len).copy_from(pt);
                            h(&probe)
                        })
                        .collect();
                    let (i, tie) = pick_best(&scores, tol, |i| u.rows(offset, len) == points[i]);
                    degenerate |= tie;
                    u.rows_mut(offset, len).copy_from(&points[i]);
                }
            }
        }
    }
    (u, degenerate)
}

fn golden_section<F: FnMut(f64) -> f64>(f: &mut F, mut a: f64, mut b: f64) -> f64 {
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a).abs() > 1e-12 * (1.0 + a.abs().max(b.abs())) {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// `(ż, ṗ) = (F(z, u), −(∂F/∂z)ᵀ p − λ₀ ∂(f⁰∘π)/∂z)`.
pub fn ambient_vector_field(
    problem: &ControlProblem,
    z: &DVector<f64>,
    p: &DVector<f64>,
    lambda0: f64,
    u: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    if z.len() != problem.ambient_dim() || p.len() != z.len() {
        return Err(PmpError::DimensionMismatch(
            "state and costate must live in the ambient space".into(),
        ));
    }
    problem.ensure_control(u)?;
    let at = AmbientPoint::evaluate(&problem.manifold, z, true)?;
    let zdot = extended_field_at(problem, &at, u);
    let jac = extended_jacobian_at(problem, &at, u);
    let mut pdot = -(jac.transpose() * p);
    if lambda0 != 0.0 {
        pdot -= at.cost_gradient(problem, u) * lambda0;
    }
    Ok((zdot, pdot))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::EmbeddedManifold;
    use crate::system::{
        sphere_rotation_dynamics, BoundaryCondition, ExpressionDynamics, QuadraticControlCost,
        TerminalTime, TimeCost,
    };
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    fn sphere() -> ControlProblem {
        ControlProblem::new(
            EmbeddedManifold::unit_sphere(3),
            Arc::new(sphere_rotation_dynamics()),
            Arc::new(TimeCost),
            ControlSet::symmetric_box(2, 1.0),
            BoundaryCondition::Point(v(&[1.0, 0.0, 0.0])),
            BoundaryCondition::Point(v(&[0.0, 0.0, 1.0])),
            TerminalTime::Free,
        )
        .unwrap()
    }

    fn linear_plane() -> ControlProblem {
        // ẋ = A x + B u on the plane x3 = 0 with A = [[0, 1], [-2, -0.5]]
        ControlProblem::new(
            EmbeddedManifold::coordinate_plane(3),
            Arc::new(ExpressionDynamics::parse(3, 1, &["x2", "-2*x1 - 0.5*x2 + u1", "0"]).unwrap()),
            Arc::new(TimeCost),
            ControlSet::symmetric_box(1, 1.0),
            BoundaryCondition::Point(v(&[1.0, 0.0, 0.0])),
            BoundaryCondition::Point(v(&[0.0, 0.0, 0.0])),
            TerminalTime::Free,
        )
        .unwrap()
    }

    fn amb(x: &[f64], p: &[f64]) -> Covector {
        Covector::ambient(v(x), v(p))
    }

    #[test]
    fn hamiltonian_examples() {
        let pr = sphere();
        let u = v(&[0.4, -0.3]);
        assert_eq!(
            hamiltonian(&pr, &amb(&[0.0, 1.0, 0.0], &[0.0; 3]), 0.0, &u).unwrap(),
            0.0
        );
        // p orthogonal to f: only λ₀ f⁰ remains
        assert_eq!(
            hamiltonian(
                &pr,
                &amb(&[1.0, 0.0, 0.0], &[0.0, 0.0, 5.0]),
                -1.0,
                &v(&[1.0, 0.0])
            )
            .unwrap(),
            -1.0
        );
        let h = hamiltonian(
            &pr,
            &amb(&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]),
            -1.0,
            &v(&[1.0, 0.0]),
        )
        .unwrap();
        assert_eq!(h, -2.0);
        assert!(matches!(
            hamiltonian(
                &pr,
                &amb(&[1.0, 0.0, 0.0], &[0.0; 3]),
                -1.0,
                &v(&[2.0, 0.0])
            ),
            Err(PmpError::ControlOutOfSet { .. })
        ));
    }

    #[test]
    fn ambient_and_intrinsic_forms_agree_on_manifold() {
        let pr = sphere();
        let x = v(&[0.0, 0.6, 0.8]);
        let p = v(&[0.3, -1.2, 0.7]);
        let amb_cov = Covector::ambient(x.clone(), p);
        let intr = pr.manifold.restrict_covector(&amb_cov).unwrap();
        let u = v(&[-0.5, 1.0]);
        let a = hamiltonian(&pr, &amb_cov, -0.7, &u).unwrap();
        let b = hamiltonian(&pr, &intr, -0.7, &u).unwrap();
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn maximizer_follows_switching_sign() {
        let pr = sphere();
        let m = maximize_hamiltonian(&pr, &amb(&[1.0, 0.0, 0.0], &[0.0, -1.0, 0.0]), -1.0, None)
            .unwrap();
        assert_eq!(m.control[0], 1.0);
        assert!(m.degenerate);
        assert_eq!(m.control[1], 0.0);
        assert_eq!(m.value, 0.0);
        let held = maximize_hamiltonian(
            &pr,
            &amb(&[1.0, 0.0, 0.0], &[0.0, -1.0, 0.0]),
            -1.0,
            Some(&v(&[-1.0, -1.0])),
        )
        .unwrap();
        assert_eq!(held.control, v(&[1.0, -1.0]));
    }

    #[test]
    fn maximizer_agrees_with_grid_search() {
        // 101 x 101 grid over the box
        let pr = sphere();
        let x = v(&[1.0, 0.0, 0.0]);
        let cov = amb(&[1.0, 0.0, 0.0], &[0.0, -1.0, 0.0]);
        let mut best = f64::NEG_INFINITY;
        for i in 0..=100 {
            for j in 0..=100 {
                let u = v(&[-1.0 + 0.02 * i as f64, -1.0 + 0.02 * j as f64]);
                best = best.max(hamiltonian(&pr, &cov, -1.0, &u).unwrap());
            }
        }
        let m = maximize_hamiltonian(&pr, &Covector::ambient(x, v(&[0.0, -1.0, 0.0])), -1.0, None)
            .unwrap();
        assert!((m.value - best).abs() < 1e-14);
    }

    #[test]
    fn quadratic_cost_maximizer_is_clamped_stationary_point() {
        let pr = ControlProblem {
            running_cost: Arc::new(QuadraticControlCost { weight: 0.5 }),
            ..sphere()
        };
        // σ = (−p₂, p₃) at e₁; H = −½|u|² + σ·u is maximised at clamp(σ)
        let m = maximize_hamiltonian(&pr, &amb(&[1.0, 0.0, 0.0], &[0.0, -0.3, 0.0]), -1.0, None)
            .unwrap();
        assert!((m.control - v(&[0.3, 0.0])).norm() < 1e-15);
        let m = maximize_hamiltonian(&pr, &amb(&[1.0, 0.0, 0.0], &[0.0, -3.0, 0.0]), -1.0, None)
            .unwrap();
        assert_eq!(m.control[0], 1.0);
    }

    #[test]
    fn finite_sets_are_scanned() {
        let pr = ControlProblem {
            control_set: ControlSet::Finite(vec![v(&[1.0, 0.0]), v(&[0.0, 1.0]), v(&[-1.0, -1.0])]),
            ..sphere()
        };
        let cov = amb(&[0.0, 0.6, 0.8], &[1.0, 0.2, -0.4]);
        let m = maximize_hamiltonian(&pr, &cov, -1.0, None).unwrap();
        for w in pr.control_set.vertices() {
            assert!(hamiltonian(&pr, &cov, -1.0, &w).unwrap() <= m.value);
        }
    }

    #[test]
    fn general_cost_uses_numeric_search() {
        let cost =
            crate::system::ExpressionCost::parse(3, 2, "(u1 - 0.25)^4 + u2^2*u1^2 + 1").unwrap();
        let pr = ControlProblem {
            running_cost: Arc::new(cost),
            ..sphere()
        };
        let cov = amb(&[0.0, 0.0, 1.0], &[0.0, 0.0, 0.0]);
        let m = maximize_hamiltonian(&pr, &cov, -1.0, None).unwrap();
        assert!((m.control[0] - 0.25).abs() < 1e-3, "{:?}", m.control);
        assert!(m.value <= -1.0 + 1e-12 && m.value > -1.0 - 1e-9);
    }

    #[test]
    fn zero_costate_gives_zero_costate_rate() {
        let pr = sphere();
        let z = v(&[0.9, 0.3, 0.2]);
        let u = v(&[1.0, -1.0]);
        let (zdot, pdot) = ambient_vector_field(&pr, &z, &DVector::zeros(3), 0.0, &u).unwrap();
        assert_eq!(pdot, DVector::zeros(3));
        assert_eq!(zdot, crate::system::extend_dynamics(&pr, &z, &u).unwrap());
    }

    #[test]
    fn flat_linear_system_has_classical_adjoint() {
        let pr = linear_plane();
        let z = v(&[0.4, -0.2, 0.0]);
        let p = v(&[0.7, 1.1, 0.0]);
        let (_, pdot) = ambient_vector_field(&pr, &z, &p, -1.0, &v(&[1.0])).unwrap();
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -2.0, -0.5]);
        let expected = -(a.transpose() * v(&[0.7, 1.1]));
        assert!((pdot.rows(0, 2) - expected).norm() < 1e-14);
        assert_eq!(pdot[2], 0.0);
    }

    fn fd_check(
        pr: &ControlProblem,
        z: &DVector<f64>,
        p: &DVector<f64>,
        l0: f64,
        u: &DVector<f64>,
    ) -> f64 {
        let (zdot, pdot) = ambient_vector_field(pr, z, p, l0, u).unwrap();
        let h = |zz: &DVector<f64>, pp: &DVector<f64>| {
            let at = AmbientPoint::evaluate(&pr.manifold, zz, false).unwrap();
            ambient_hamiltonian_at(pr, &at, pp, l0, u)
        };
        let step = 1e-5;
        let mut err: f64 = 0.0;
        for i in 0..z.len() {
            let mut e = DVector::zeros(z.len());
            e[i] = step;
            let dz = (h(&(z + &e), p) - h(&(z - &e), p)) / (2.0 * step);
            let dp = (h(z, &(p + &e)) - h(z, &(p - &e))) / (2.0 * step);
            err = err.max((dz + pdot[i]).abs()).max((dp - zdot[i]).abs());
        }
        if err == 0.0 {
            0.0
        } else {
            err / zdot.amax().max(pdot.amax())
        }
    }

    #[test]
    fn vector_field_matches_differences_in_transition_zone() {
        let pr = sphere();
        let z = v(&[1.06, 0.1, -0.2]);
        assert!(pr.manifold.bump(&z) > 0.0 && pr.manifold.bump(&z) < 1.0);
        assert!(fd_check(&pr, &z, &v(&[0.3, -0.8, 1.1]), -0.6, &v(&[1.0, -1.0])) < 1e-6);
    }

    proptest! {
        #[test]
        fn homogeneity_keeps_argmax(a in -1.0..1.0f64, b in -1.0..1.0f64, c in -1.0..1.0f64, l in 0.0..1.0f64, k in 0.1..100.0f64) {
            let pr = sphere();
            let x = v(&[0.0, 0.6, 0.8]);
            let p = v(&[a, b, c]);
            let m1 = maximize_hamiltonian(&pr, &Covector::ambient(x.clone(), p.clone()), -l, None).unwrap();
            let m2 = maximize_hamiltonian(&pr, &Covector::ambient(x, p * k), -l * k, None).unwrap();
            prop_assume!(!m1.degenerate);
            prop_assert_eq!(m1.control, m2.control);
            prop_assert!((m2.value - k * m1.value).abs() <= 1e-12 * k.max(1.0));
        }

        #[test]
        fn vector_field_matches_differences(a in -1.0..1.0f64, b in -1.0..1.0f64, c in -1.0..1.0f64, r in 0.96..1.04f64,
                                            p1 in -1.0..1.0f64, p2 in -1.0..1.0f64, p3 in -1.0..1.0f64, u1 in -1.0..1.0f64) {
            prop_assume!(a * a + b * b + c * c > 1e-2);
            let pr = sphere();
            let dir = v(&[a, b, c]);
            let z = &dir / dir.norm() * r;
            prop_assert!(fd_check(&pr, &z, &v(&[p1, p2, p3]), -0.5, &v(&[u1, 1.0])) < 1e-6);
        }
    }
}
