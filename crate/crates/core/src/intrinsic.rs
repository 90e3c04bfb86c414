//! Reduced Hamiltonian equations on `M` in a transported tangent frame.
//!
//! The frame `E` (columns spanning `T_xM`) moves by `Ė = −Dgᵀ (Dg Dgᵀ)⁻¹ (d/dt Dg) E`,
//! which keeps `Dg E = 0` and `EᵀE` constant. The costate `α = Eᵀp` then obeys
//! `α̇ = −(Df E)ᵀ E α − λ₀ Eᵀ ∇f⁰`, independent of the normal part of `p`.

use crate::error::{PmpError, Result};
use crate::flow::{integrate, ControlPolicy, ControlledSystem, FlowOptions};
use crate::hamiltonian::{maximize_ambient_at, tie_tolerance, Maximizer};
use crate::manifold::{constraint_hessians, PROJECTION_TOL};
use crate::system::{AmbientPoint, ControlProblem};
use nalgebra::{DMatrix, DVector};

/// Largest tolerated `‖EᵀE − I‖` or `‖Dg E‖` before the frame is declared singular.
pub const FRAME_TOL: f64 = 1e-6;

/// Rates `(ẋ, Ė, α̇)` of the reduced system.
pub fn intrinsic_vector_field(
    problem: &ControlProblem,
    x: &DVector<f64>,
    frame: &DMatrix<f64>,
    alpha: &DVector<f64>,
    lambda0: f64,
    u: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>, DVector<f64>)> {
    let n = problem.ambient_dim();
    if x.len() != n || frame.nrows() != n || frame.ncols() != alpha.len() {
        return Err(PmpError::DimensionMismatch(
            "frame, state and intrinsic costate disagree".into(),
        ));
    }
    let f = problem.dynamics.eval(x, u);
    let jac = problem.manifold.constraint_jacobian(x);
    let hess = constraint_hessians(problem.manifold.constraint().as_ref(), x);
    let gram = &jac * jac.transpose();
    let chol = gram
        .cholesky()
        .ok_or(PmpError::RankDeficient { ratio: 0.0 })?;
    // (d/dt Dg) E has entries E_jᵀ ∇²g_k f
    let gdot_e = DMatrix::from_fn(hess.len(), frame.ncols(), |k, j| {
        frame.column(j).dot(&(&hess[k] * &f))
    });
    let edot = -(jac.transpose() * chol.solve(&gdot_e));
    let df_e = problem.dynamics_jacobian(x, u) * frame;
    let coupling = frame.transpose() * df_e;
    let mut adot = -(coupling.transpose() * alpha);
    if lambda0 != 0.0 {
        adot -= frame.transpose() * problem.cost_gradient(x, u) * lambda0;
    }
    Ok((f, edot, adot))
}

/// Samples of a reduced flow; `costates[i]` is expressed in `frames[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct IntrinsicFlow {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub frames: Vec<DMatrix<f64>>,
    pub costates: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
    pub switching_times: Vec<f64>,
}

struct IntrinsicSystem<'a> {
    problem: &'a ControlProblem,
    lambda0: f64,
    n: usize,
    k: usize,
}

impl IntrinsicSystem<'_> {
    fn unpack(&self, y: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>, DVector<f64>) {
        let (n, k) = (self.n, self.k);
        let x = y.rows(0, n).into_owned();
        let e = DMatrix::from_column_slice(n, k, y.rows(n, n * k).as_slice());
        let a = y.rows(n + n * k, k).into_owned();
        (x, e, a)
    }

    fn pack(&self, x: &DVector<f64>, e: &DMatrix<f64>, a: &DVector<f64>) -> DVector<f64> {
        let (n, k) = (self.n, self.k);
        let mut y = DVector::zeros(n + n * k + k);
        y.rows_mut(0, n).copy_from(x);
        y.rows_mut(n, n * k).copy_from_slice(e.as_slice());
        y.rows_mut(n + n * k, k).copy_from(a);
        y
    }

    fn lifted(&self, y: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let (x, e, a) = self.unpack(y);
        (x, e * a)
    }

    fn on_manifold(x: &DVector<f64>) -> AmbientPoint {
        AmbientPoint {
            z: x.clone(),
            retracted: x.clone(),
            tube_distance: 0.0,
            bump: 1.0,
            retraction_jacobian: None,
            bump_gradient: None,
        }
    }
}

impl ControlledSystem for IntrinsicSystem<'_> {
    fn rhs(&self, y: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        let (x, e, a) = self.unpack(y);
        let (xd, ed, ad) = intrinsic_vector_field(self.problem, &x, &e, &a, self.lambda0, u)?;
        Ok(self.pack(&xd, &ed, &ad))
    }

    fn hamiltonian(&self, y: &DVector<f64>, u: &DVector<f64>) -> Result<f64> {
        let (x, p) = self.lifted(y);
        let f = self.problem.dynamics.eval(&x, u);
        Ok(self.lambda0 * self.problem.running_cost.eval(&x, u) + p.dot(&f))
    }

    fn maximize(&self, y: &DVector<f64>, previous: Option<&DVector<f64>>) -> Result<Maximizer> {
        let (x, p) = self.lifted(y);
        Ok(maximize_ambient_at(
            self.problem,
            &Self::on_manifold(&x),
            &p,
            self.lambda0,
            previous,
        ))
    }

    fn tie_tolerance(&self, y: &DVector<f64>) -> f64 {
        tie_tolerance(&self.lifted(y).1, self.lambda0)
    }

    fn control_blocks(&self) -> Vec<std::ops::Range<usize>> {
        self.problem
            .control_set
            .blocks()
            .iter()
            .map(|b| b.range())
            .collect()
    }

    fn after_step(&self, t: f64, y: &mut DVector<f64>, reproject: bool) -> Result<()> {
        let (mut x, e, a) = self.unpack(y);
        if reproject {
            x = self.problem.manifold.project(&x, PROJECTION_TOL)?;
            *y = self.pack(&x, &e, &a);
        }
        let gram_defect = (e.transpose() * &e - DMatrix::identity(self.k, self.k)).amax();
        let normal_defect = (self.problem.manifold.constraint_jacobian(&x) * &e).amax();
        let defect = gram_defect.max(normal_defect);
        if defect > FRAME_TOL || !defect.is_finite() {
            return Err(PmpError::FrameSingularity { t, defect });
        }
        Ok(())
    }
}

/// Integrates the reduced system from `(x₀, E₀, α₀)`.
#[allow(clippy::too_many_arguments)]
pub fn flow_intrinsic(
    problem: &ControlProblem,
    x0: &DVector<f64>,
    frame0: &DMatrix<f64>,
    alpha0: &DVector<f64>,
    lambda0: f64,
    policy: &ControlPolicy,
    t_span: (f64, f64),
    options: &FlowOptions,
) -> Result<IntrinsicFlow> {
    let sys = IntrinsicSystem {
        problem,
        lambda0,
        n: problem.ambient_dim(),
        k: frame0.ncols(),
    };
    if frame0.nrows() != sys.n || alpha0.len() != sys.k || x0.len() != sys.n {
        return Err(PmpError::DimensionMismatch(
            "frame, state and intrinsic costate disagree".into(),
        ));
    }
    let mut y0 = sys.pack(x0, frame0, alpha0);
    sys.after_step(t_span.0, &mut y0, false)?;
    let raw = integrate(&sys, y0, t_span, policy, options)?;
    let mut out = IntrinsicFlow {
        times: raw.times,
        states: Vec::new(),
        frames: Vec::new(),
        costates: Vec::new(),
        controls: raw.controls,
        switching_times: raw.switches,
    };
    for y in &raw.states {
        let (x, e, a) = sys.unpack(y);
        out.states.push(x);
        out.frames.push(e);
        out.costates.push(a);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{flow_extremal, ControlSchedule};
    use crate::hamiltonian::AdjointState;
    use crate::manifold::EmbeddedManifold;
    use crate::system::{
        sphere_rotation_dynamics, BoundaryCondition, ControlSet, ExpressionDynamics, TerminalTime,
        TimeCost,
    };
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

    #[test]
    fn plane_reduces_to_flat_adjoint() {
        let pr = ControlProblem::new(
            EmbeddedManifold::coordinate_plane(3),
            Arc::new(ExpressionDynamics::parse(3, 1, &["x2", "-x1 + u1", "0"]).unwrap()),
            Arc::new(TimeCost),
            ControlSet::symmetric_box(1, 1.0),
            BoundaryCondition::Point(v(&[1.0, 0.0, 0.0])),
            BoundaryCondition::Point(v(&[0.0, 0.0, 0.0])),
            TerminalTime::Free,
        )
        .unwrap();
        let e = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let (xd, ed, ad) = intrinsic_vector_field(
            &pr,
            &v(&[0.5, 0.2, 0.0]),
            &e,
            &v(&[0.3, -0.7]),
            -1.0,
            &v(&[1.0]),
        )
        .unwrap();
        assert_eq!(xd, v(&[0.2, 0.5, 0.0]));
        assert_eq!(ed, DMatrix::zeros(3, 2));
        // α̇ = −Aᵀα with A = [[0, 1], [−1, 0]]
        assert_eq!(ad, v(&[-0.7, -0.3]));
    }

    #[test]
    fn zero_costate_is_stationary() {
        let pr = sphere();
        let x = v(&[1.0, 0.0, 0.0]);
        let frame = pr.manifold.tangent_frame(&x).unwrap().tangent_basis;
        let (_, _, ad) =
            intrinsic_vector_field(&pr, &x, &frame, &v(&[0.0, 0.0]), 0.0, &v(&[1.0, -1.0]))
                .unwrap();
        assert_eq!(ad, DVector::zeros(2));
    }

    #[test]
    fn frame_stays_orthonormal_and_tangent() {
        let pr = sphere();
        let x = v(&[1.0, 0.0, 0.0]);
        let frame = pr.manifold.tangent_frame(&x).unwrap().tangent_basis;
        let sched = ControlSchedule::new(
            vec![0.4, 1.1],
            vec![v(&[1.0, 1.0]), v(&[-1.0, 1.0]), v(&[0.3, -1.0])],
        )
        .unwrap();
        let flow = flow_intrinsic(
            &pr,
            &x,
            &frame,
            &v(&[0.2, 0.5]),
            -1.0,
            &ControlPolicy::Schedule(sched),
            (0.0, 2.0),
            &FlowOptions::default(),
        )
        .unwrap();
        for (x, e) in flow.states.iter().zip(&flow.frames) {
            assert!((e.transpose() * e - DMatrix::identity(2, 2)).amax() < 1e-9);
            assert!((x.transpose() * e).amax() < 1e-9);
        }
    }

    #[test]
    fn degenerate_frame_is_rejected() {
        let pr = sphere();
        let x = v(&[1.0, 0.0, 0.0]);
        let bad = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let err = flow_intrinsic(
            &pr,
            &x,
            &bad,
            &v(&[0.0, 1.0]),
            -1.0,
            &ControlPolicy::Argmax,
            (0.0, 1.0),
            &FlowOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, PmpError::FrameSingularity { .. }));
    }

    #[test]
    fn restricted_ambient_costate_matches_reduced_flow() {
        let pr = sphere();
        let x = v(&[0.0, 0.6, 0.8]);
        let frame = pr.manifold.tangent_frame(&x).unwrap().tangent_basis;
        // the normal part of p is irrelevant for the restriction
        let p = v(&[0.4, -0.9, 0.3]) + &x * 0.7;
        let alpha = frame.transpose() * &p;
        let opts = FlowOptions::default();
        let amb = flow_extremal(
            &pr,
            &AdjointState::new(x.clone(), p, -0.8).unwrap(),
            &ControlPolicy::Argmax,
            (0.0, 1.0),
            &opts,
        )
        .unwrap();
        let red = flow_intrinsic(
            &pr,
            &x,
            &frame,
            &alpha,
            -0.8,
            &ControlPolicy::Argmax,
            (0.0, 1.0),
            &opts,
        )
        .unwrap();
        assert_eq!(amb.times.len(), red.times.len());
        for i in 0..amb.times.len() {
            let restricted = red.frames[i].transpose() * &amb.costates[i];
            assert!((restricted - &red.costates[i]).amax() < 1e-6);
        }
    }
}
