//! Control problems on an embedded manifold and their extension to the ambient tube.
//!
//! The extended field is `F(z, u) = ρ(z) f(π(z), u)` with `π` the closest-point
//! retraction and `ρ` the manifold's bump. It agrees with `f` on `M`, vanishes
//! outside the tube, and leaves `M` invariant.

use crate::error::{PmpError, Result};
use crate::expr::{self, Expr};
use crate::manifold::{constraint_jacobian, ConstraintMap, EmbeddedManifold, PROJECTION_TOL};
use crate::numdiff;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt;
use std::sync::Arc;

/// Relative tolerance on the normal component of `f` accepted as tangent.
pub const TANGENCY_TOL: f64 = 1e-8;
/// Tolerance for control-set membership.
pub const CONTROL_TOL: f64 = 1e-9;

/// The admissible control set `W`.
#[derive(Debug, Clone, PartialEq)]
pub enum ControlSet {
    Box {
        lower: DVector<f64>,
        upper: DVector<f64>,
    },
    Finite(Vec<DVector<f64>>),
    /// Cartesian product; factor controls are concatenated in order.
    Product(Vec<ControlSet>),
}

/// One independent piece of a control set after flattening products.
#[derive(Debug, Clone, PartialEq)]
pub enum ControlBlock {
    Interval {
        index: usize,
        lower: f64,
        upper: f64,
    },
    Points {
        offset: usize,
        points: Vec<DVector<f64>>,
    },
}

impl ControlBlock {
    pub fn range(&self) -> std::ops::Range<usize> {
        match self {
            ControlBlock::Interval { index, .. } => *index..index + 1,
            ControlBlock::Points { offset, points } => *offset..offset + points[0].len(),
        }
    }
}

impl ControlSet {
    pub fn symmetric_box(dim: usize, bound: f64) -> Self {
        ControlSet::Box {
            lower: DVector::from_element(dim, -bound),
            upper: DVector::from_element(dim, bound),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ControlSet::Box { lower, upper } => {
                if lower.len() != upper.len() || lower.is_empty() {
                    return Err(PmpError::InvalidProblem(
                        "box bounds must have equal, nonzero length".into(),
                    ));
                }
                if lower
                    .iter()
                    .zip(upper.iter())
                    .any(|(l, u)| !(l <= u) || !l.is_finite() || !u.is_finite())
                {
                    return Err(PmpError::InvalidProblem(
                        "box requires finite lower <= upper".into(),
                    ));
                }
            }
            ControlSet::Finite(points) => {
                let Some(first) = points.first() else {
                    return Err(PmpError::InvalidProblem(
                        "finite control set is empty".into(),
                    ));
                };
                if first.is_empty() || points.iter().any(|p| p.len() != first.len()) {
                    return Err(PmpError::InvalidProblem(
                        "finite control points must share a nonzero dimension".into(),
                    ));
                }
            }
            ControlSet::Product(parts) => {
                if parts.is_empty() {
                    return Err(PmpError::InvalidProblem("empty product control set".into()));
                }
                for p in parts {
                    p.validate()?;
                }
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        match self {
            ControlSet::Box { lower, .. } => lower.len(),
            ControlSet::Finite(points) => points[0].len(),
            ControlSet::Product(parts) => parts.iter().map(ControlSet::dim).sum(),
        }
    }

    pub fn blocks(&self) -> Vec<ControlBlock> {
        let mut out = Vec::new();
        self.push_blocks(0, &mut out);
        out
    }

    fn push_blocks(&self, offset: usize, out: &mut Vec<ControlBlock>) {
        match self {
            ControlSet::Box { lower, upper } => {
                for i in 0..lower.len() {
                    out.push(ControlBlock::Interval {
                        index: offset + i,
                        lower: lower[i],
                        upper: upper[i],
                    });
                }
            }
            ControlSet::Finite(points) => out.push(ControlBlock::Points {
                offset,
                points: points.clone(),
            }),
            ControlSet::Product(parts) => {
                let mut off = offset;
                for p in parts {
                    p.push_blocks(off, out);
                    off += p.dim();
                }
            }
        }
    }

    pub fn contains(&self, u: &DVector<f64>, tol: f64) -> bool {
        if u.len() != self.dim() {
            return false;
        }
        self.blocks().iter().all(|b| match b {
            ControlBlock::Interval {
                index,
                lower,
                upper,
            } => u[*index] >= lower - tol && u[*index] <= upper + tol,
            ControlBlock::Points { offset, points } => points.iter().any(|p| {
                p.iter()
                    .enumerate()
                    .all(|(i, pi)| (u[offset + i] - pi).abs() <= tol)
            }),
        })
    }

    /// Tie-breaking default: box midpoints and the first point of finite factors.
    pub fn default_control(&self) -> DVector<f64> {
        let mut u = DVector::zeros(self.dim());
        for b in self.blocks() {
            match b {
                ControlBlock::Interval {
                    index,
                    lower,
                    upper,
                } => u[index] = 0.5 * (lower + upper),
                ControlBlock::Points { offset, points } => {
                    u.rows_mut(offset, points[0].len()).copy_from(&points[0])
                }
            }
        }
        u
    }

    /// All vertices of box factors combined with all points of finite factors.
    pub fn vertices(&self) -> Vec<DVector<f64>> {
        let mut out = vec![DVector::zeros(self.dim())];
        for b in self.blocks() {
            let choices: Vec<DVector<f64>> = match &b {
                ControlBlock::Interval { lower, upper, .. } => {
                    if lower == upper {
                        vec![DVector::from_element(1, *lower)]
                    } else {
                        vec![
                            DVector::from_element(1, *lower),
                            DVector::from_element(1, *upper),
                        ]
                    }
                }
                ControlBlock::Points { points, .. } => points.clone(),
            };
            let range = b.range();
            let mut next = Vec::with_capacity(out.len() * choices.len());
            for base in &out {
                for c in &choices {
                    let mut u = base.clone();
                    u.rows_mut(range.start, range.len()).copy_from(c);
                    next.push(u);
                }
            }
            out = next;
        }
        out
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let mut u = DVector::zeros(self.dim());
        for b in self.blocks() {
            match b {
                ControlBlock::Interval {
                    index,
                    lower,
                    upper,
                } => {
                    u[index] = lower + (upper - lower) * rng.random::<f64>();
                }
                ControlBlock::Points { offset, points } => {
                    let p = &points[rng.random_range(0..points.len())];
                    u.rows_mut(offset, p.len()).copy_from(p);
                }
            }
        }
        u
    }

    /// True when the set has no continuum part (all factors finite).
    pub fn is_finite(&self) -> bool {
        self.blocks()
            .iter()
            .all(|b| matches!(b, ControlBlock::Points { .. }))
    }
}

/// Control vector field `f(x, u)`.
pub trait Dynamics: fmt::Debug + Send + Sync {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn eval(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;

    /// `∂f/∂x`; `None` selects central differences.
    fn state_jacobian(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }

    /// `(f₀(x), [g₁(x) … g_m(x)])` when `f(x, u) = f₀(x) + Σ uᵢ gᵢ(x)`.
    fn affine_split(&self, _x: &DVector<f64>) -> Option<(DVector<f64>, DMatrix<f64>)> {
        None
    }
}

/// `ẋ = (A₀ + Σ uᵢ Aᵢ) x + b₀ + Σ uᵢ bᵢ`; covers skew-symmetric rotation
/// generators and linear systems with additive inputs.
#[derive(Debug, Clone)]
pub struct BilinearDynamics {
    pub drift: DMatrix<f64>,
    pub drift_offset: DVector<f64>,
    pub input_matrices: Vec<DMatrix<f64>>,
    pub input_offsets: Vec<DVector<f64>>,
}

impl BilinearDynamics {
    pub fn new(
        drift: DMatrix<f64>,
        drift_offset: DVector<f64>,
        input_matrices: Vec<DMatrix<f64>>,
        input_offsets: Vec<DVector<f64>>,
    ) -> Result<Self> {
        let n = drift.nrows();
        let ok = drift.is_square()
            && drift_offset.len() == n
            && input_matrices.len() == input_offsets.len()
            && !input_matrices.is_empty()
            && input_matrices
                .iter()
                .all(|a| a.nrows() == n && a.ncols() == n)
            && input_offsets.iter().all(|b| b.len() == n);
        if !ok {
            return Err(PmpError::InvalidProblem(
                "inconsistent bilinear dynamics dimensions".into(),
            ));
        }
        Ok(Self {
            drift,
            drift_offset,
            input_matrices,
            input_offsets,
        })
    }

    /// `ẋ = Σ uᵢ Aᵢ x`.
    pub fn homogeneous(input_matrices: Vec<DMatrix<f64>>) -> Result<Self> {
        let n = input_matrices.first().map_or(0, |a| a.nrows());
        let m = input_matrices.len();
        Self::new(
            DMatrix::zeros(n, n),
            DVector::zeros(n),
            input_matrices,
            vec![DVector::zeros(n); m],
        )
    }

    fn system_matrix(&self, u: &DVector<f64>) -> DMatrix<f64> {
        let mut a = self.drift.clone();
        for (ui, ai) in u.iter().zip(&self.input_matrices) {
            a += ai * *ui;
        }
        a
    }
}

impl Dynamics for BilinearDynamics {
    fn state_dim(&self) -> usize {
        self.drift.nrows()
    }
    fn control_dim(&self) -> usize {
        self.input_matrices.len()
    }
    fn eval(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let mut f = &self.drift * x + &self.drift_offset;
        for i in 0..u.len() {
            if u[i] != 0.0 {
                f += (&self.input_matrices[i] * x + &self.input_offsets[i]) * u[i];
            }
        }
        f
    }
    fn state_jacobian(&self, _x: &DVector<f64>, u: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(self.system_matrix(u))
    }
    fn affine_split(&self, x: &DVector<f64>) -> Option<(DVector<f64>, DMatrix<f64>)> {
        let drift = &self.drift * x + &self.drift_offset;
        let cols: Vec<DVector<f64>> = self
            .input_matrices
            .iter()
            .zip(&self.input_offsets)
            .map(|(a, b)| a * x + b)
            .collect();
        Some((drift, DMatrix::from_columns(&cols)))
    }
}

/// Dynamics parsed from one expression per state component over `x1..xN, u1..um`.
#[derive(Debug, Clone)]
pub struct ExpressionDynamics {
    state_dim: usize,
    control_dim: usize,
    components: Vec<Expr>,
    jacobian: Vec<Vec<Expr>>,
    affine: Option<(Vec<Expr>, Vec<Vec<Expr>>)>,
}

impl ExpressionDynamics {
    pub fn parse<S: AsRef<str>>(
        state_dim: usize,
        control_dim: usize,
        sources: &[S],
    ) -> Result<Self> {
        if sources.len() != state_dim {
            return Err(PmpError::InvalidProblem(format!(
                "expected {state_dim} dynamics components, got {}",
                sources.len()
            )));
        }
        let resolve = expr::state_control_vars(state_dim, control_dim);
        let components = sources
            .iter()
            .map(|s| expr::parse(s.as_ref(), &resolve))
            .collect::<Result<Vec<_>>>()?;
        let jacobian = components
            .iter()
            .map(|c| (0..state_dim).map(|j| c.diff(j)).collect())
            .collect();
        let controls = state_dim..state_dim + control_dim;
        let generators: Vec<Vec<Expr>> = components
            .iter()
            .map(|c| (0..control_dim).map(|i| c.diff(state_dim + i)).collect())
            .collect();
        let affine = if generators
            .iter()
            .flatten()
            .any(|g| g.depends_on(controls.clone()))
        {
            None
        } else {
            Some((components.clone(), generators))
        };
        Ok(Self {
            state_dim,
            control_dim,
            components,
            jacobian,
            affine,
        })
    }

    fn vars(&self, x: &DVector<f64>, u: &DVector<f64>) -> Vec<f64> {
        x.iter().chain(u.iter()).copied().collect()
    }
}

impl Dynamics for ExpressionDynamics {
    fn state_dim(&self) -> usize {
        self.state_dim
    }
    fn control_dim(&self) -> usize {
        self.control_dim
    }
    fn eval(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let v = self.vars(x, u);
        DVector::from_iterator(self.state_dim, self.components.iter().map(|c| c.eval(&v)))
    }
    fn state_jacobian(&self, x: &DVector<f64>, u: &DVector<f64>) -> Option<DMatrix<f64>> {
        let v = self.vars(x, u);
        Some(DMatrix::from_fn(self.state_dim, self.state_dim, |i, j| {
            self.jacobian[i][j].eval(&v)
        }))
    }
    fn affine_split(&self, x: &DVector<f64>) -> Option<(DVector<f64>, DMatrix<f64>)> {
        let (drift, gens) = self.affine.as_ref()?;
        let v = self.vars(x, &DVector::zeros(self.control_dim));
        let d = DVector::from_iterator(self.state_dim, drift.iter().map(|c| c.eval(&v)));
        let g = DMatrix::from_fn(self.state_dim, self.control_dim, |i, j| gens[i][j].eval(&v));
        Some((d, g))
    }
}

/// How the running cost depends on the control at a fixed state.
#[derive(Debug, Clone, PartialEq)]
pub enum CostStructure {
    /// `c + ⟨l, u⟩`
    Affine {
        constant: f64,
        linear: DVector<f64>,
    },
    /// `c + ⟨l, u⟩ + Σ qᵢ uᵢ²`
    SeparableQuadratic {
        constant: f64,
        linear: DVector<f64>,
        quadratic: DVector<f64>,
    },
    General,
}

/// Running cost `f⁰(x, u)`.
pub trait RunningCost: fmt::Debug + Send + Sync {
    fn eval(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64;

    fn state_gradient(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> Option<DVector<f64>> {
        None
    }

    fn control_structure(&self, _x: &DVector<f64>, _control_dim: usize) -> CostStructure {
        CostStructure::General
    }
}

/// `f⁰ ≡ 1`: minimum-time problems.
#[derive(Debug, Clone, Copy, Default)]
pub struct TimeCost;

impl RunningCost for TimeCost {
    fn eval(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> f64 {
        1.0
    }
    fn state_gradient(&self, x: &DVector<f64>, _u: &DVector<f64>) -> Option<DVector<f64>> {
        Some(DVector::zeros(x.len()))
    }
    fn control_structure(&self, _x: &DVector<f64>, control_dim: usize) -> CostStructure {
        CostStructure::Affine {
            constant: 1.0,
            linear: DVector::zeros(control_dim),
        }
    }
}

/// `f⁰ = w |u|²`.
#[derive(Debug, Clone, Copy)]
pub struct QuadraticControlCost {
    pub weight: f64,
}

impl RunningCost for QuadraticControlCost {
    fn eval(&self, _x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        self.weight * u.norm_squared()
    }
    fn state_gradient(&self, x: &DVector<f64>, _u: &DVector<f64>) -> Option<DVector<f64>> {
        Some(DVector::zeros(x.len()))
    }
    fn control_structure(&self, _x: &DVector<f64>, control_dim: usize) -> CostStructure {
        CostStructure::SeparableQuadratic {
            constant: 0.0,
            linear: DVector::zeros(control_dim),
            quadratic: DVector::from_element(control_dim, self.weight),
        }
    }
}

/// Running cost parsed from an expression over `x1..xN, u1..um`.
#[derive(Debug, Clone)]
pub struct ExpressionCost {
    state_dim: usize,
    control_dim: usize,
    value: Expr,
    gradient: Vec<Expr>,
    control_first: Vec<Expr>,
    control_second: Vec<Vec<Expr>>,
}

impl ExpressionCost {
    pub fn parse(state_dim: usize, control_dim: usize, source: &str) -> Result<Self> {
        let value = expr::parse(source, expr::state_control_vars(state_dim, control_dim))?;
        let gradient = (0..state_dim).map(|j| value.diff(j)).collect();
        let control_first: Vec<Expr> = (0..control_dim)
            .map(|i| value.diff(state_dim + i))
            .collect();
        let control_second = control_first
            .iter()
            .map(|d| (0..control_dim).map(|j| d.diff(state_dim + j)).collect())
            .collect();
        Ok(Self {
            state_dim,
            control_dim,
            value,
            gradient,
            control_first,
            control_second,
        })
    }

    fn vars(&self, x: &DVector<f64>, u: &DVector<f64>) -> Vec<f64> {
        x.iter().chain(u.iter()).copied().collect()
    }
}

impl RunningCost for ExpressionCost {
    fn eval(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        self.value.eval(&self.vars(x, u))
    }
    fn state_gradient(&self, x: &DVector<f64>, u: &DVector<f64>) -> Option<DVector<f64>> {
        let v = self.vars(x, u);
        Some(DVector::from_iterator(
            self.state_dim,
            self.gradient.iter().map(|g| g.eval(&v)),
        ))
    }
    fn control_structure(&self, x: &DVector<f64>, control_dim: usize) -> CostStructure {
        let controls = self.state_dim..self.state_dim + self.control_dim;
        let zero = DVector::zeros(control_dim);
        let v = self.vars(x, &zero);
        let constant = self.value.eval(&v);
        let linear =
            DVector::from_iterator(control_dim, self.control_first.iter().map(|d| d.eval(&v)));
        if self
            .control_first
            .iter()
            .all(|d| !d.depends_on(controls.clone()))
        {
            return CostStructure::Affine { constant, linear };
        }
        let separable = self.control_second.iter().enumerate().all(|(i, row)| {
            row.iter()
                .enumerate()
                .all(|(j, d)| !d.depends_on(controls.clone()) && (i == j || d.is_zero()))
        });
        if separable {
            let quadratic =
                DVector::from_fn(control_dim, |i, _| 0.5 * self.control_second[i][i].eval(&v));
            CostStructure::SeparableQuadratic {
                constant,
                linear,
                quadratic,
            }
        } else {
            CostStructure::General
        }
    }
}

/// Submanifold `S = M ∩ {s = 0}` used as a boundary set.
#[derive(Debug, Clone)]
pub struct BoundarySet {
    pub constraint: Arc<dyn ConstraintMap>,
    /// A point on or near `S`; required for start sets, where it seeds the parametrisation.
    pub anchor: Option<DVector<f64>>,
}

#[derive(Debug, Clone)]
pub enum BoundaryCondition {
    Point(DVector<f64>),
    Submanifold(BoundarySet),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TerminalTime {
    Free,
    Fixed(f64),
}

/// An optimal control problem on `M`.
#[derive(Debug, Clone)]
pub struct ControlProblem {
    pub manifold: EmbeddedManifold,
    pub dynamics: Arc<dyn Dynamics>,
    pub running_cost: Arc<dyn RunningCost>,
    pub control_set: ControlSet,
    pub start: BoundaryCondition,
    pub end: BoundaryCondition,
    pub terminal_time: TerminalTime,
}

impl ControlProblem {
    pub fn new(
        manifold: EmbeddedManifold,
        dynamics: Arc<dyn Dynamics>,
        running_cost: Arc<dyn RunningCost>,
        control_set: ControlSet,
        start: BoundaryCondition,
        end: BoundaryCondition,
        terminal_time: TerminalTime,
    ) -> Result<Self> {
        control_set.validate()?;
        let n = manifold.ambient_dim();
        if dynamics.state_dim() != n {
            return Err(PmpError::InvalidProblem(format!(
                "dynamics act on R^{} but the manifold lives in R^{n}",
                dynamics.state_dim()
            )));
        }
        if dynamics.control_dim() != control_set.dim() {
            return Err(PmpError::InvalidProblem(format!(
                "dynamics take {} controls but the control set has dimension {}",
                dynamics.control_dim(),
                control_set.dim()
            )));
        }
        if let TerminalTime::Fixed(t) = terminal_time {
            if !(t > 0.0 && t.is_finite()) {
                return Err(PmpError::InvalidProblem(format!(
                    "fixed terminal time must be positive, got {t}"
                )));
            }
        }
        for (label, bc) in [("start", &start), ("end", &end)] {
            match bc {
                BoundaryCondition::Point(p) => {
                    if p.len() != n {
                        return Err(PmpError::InvalidProblem(format!(
                            "{label} point has wrong dimension"
                        )));
                    }
                    let g = manifold.constraint_norm(p);
                    if g > 1e-9 {
                        return Err(PmpError::InvalidProblem(format!(
                            "{label} point is off the manifold (|g| = {g:e})"
                        )));
                    }
                }
                BoundaryCondition::Submanifold(set) => {
                    if set.constraint.ambient_dim() != n {
                        return Err(PmpError::InvalidProblem(format!(
                            "{label} set constraint has wrong dimension"
                        )));
                    }
                    if set.constraint.codim() >= manifold.intrinsic_dim() {
                        return Err(PmpError::InvalidProblem(format!(
                            "{label} set must have positive dimension"
                        )));
                    }
                    if label == "start" && set.anchor.is_none() {
                        return Err(PmpError::InvalidProblem(
                            "start set needs an anchor point".into(),
                        ));
                    }
                }
            }
        }
        Ok(Self {
            manifold,
            dynamics,
            running_cost,
            control_set,
            start,
            end,
            terminal_time,
        })
    }

    pub fn ambient_dim(&self) -> usize {
        self.manifold.ambient_dim()
    }
    pub fn control_dim(&self) -> usize {
        self.control_set.dim()
    }
    pub fn free_time(&self) -> bool {
        self.terminal_time == TerminalTime::Free
    }

    pub fn ensure_control(&self, u: &DVector<f64>) -> Result<()> {
        if self.control_set.contains(u, CONTROL_TOL) {
            Ok(())
        } else {
            Err(PmpError::ControlOutOfSet {
                control: u.iter().copied().collect(),
            })
        }
    }

    pub fn dynamics_jacobian(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        self.dynamics.state_jacobian(x, u).unwrap_or_else(|| {
            numdiff::central_jacobian(
                |y| self.dynamics.eval(y, u),
                x,
                numdiff::relative_step(1e-6, x),
            )
        })
    }

    pub fn cost_gradient(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        self.running_cost.state_gradient(x, u).unwrap_or_else(|| {
            numdiff::central_gradient(
                |y| self.running_cost.eval(y, u),
                x,
                numdiff::relative_step(1e-6, x),
            )
        })
    }

    /// The submanifold `M ∩ S` as an embedded manifold.
    pub fn boundary_manifold(&self, set: &BoundarySet) -> Result<EmbeddedManifold> {
        let stacked = crate::manifold::StackedConstraint {
            first: self.manifold.constraint().clone(),
            second: set.constraint.clone(),
        };
        EmbeddedManifold::new(Arc::new(stacked), self.manifold.tube_radius())
    }
}

/// The retraction, bump and (optionally) their derivatives at one ambient point.
#[derive(Debug, Clone)]
pub struct AmbientPoint {
    pub z: DVector<f64>,
    /// `π(z)`; equals `z` where the bump vanishes and no projection is needed.
    pub retracted: DVector<f64>,
    pub tube_distance: f64,
    pub bump: f64,
    pub retraction_jacobian: Option<DMatrix<f64>>,
    pub bump_gradient: Option<DVector<f64>>,
}

impl AmbientPoint {
    pub fn evaluate(
        manifold: &EmbeddedManifold,
        z: &DVector<f64>,
        derivatives: bool,
    ) -> Result<Self> {
        let distance = manifold.tube_distance(z);
        let bump = manifold.bump_of_distance(distance);
        if bump == 0.0 {
            return Ok(Self {
                z: z.clone(),
                retracted: z.clone(),
                tube_distance: distance,
                bump,
                retraction_jacobian: derivatives.then(|| DMatrix::zeros(z.len(), z.len())),
                bump_gradient: derivatives.then(|| manifold.bump_gradient(z, distance)),
            });
        }
        if let Some((retracted, dpi)) = manifold.constraint().closest_point(z) {
            return Ok(Self {
                z: z.clone(),
                retracted,
                tube_distance: distance,
                bump,
                retraction_jacobian: derivatives.then_some(dpi),
                bump_gradient: derivatives.then(|| manifold.bump_gradient(z, distance)),
            });
        }
        let projection = manifold.project_with_multiplier(z, PROJECTION_TOL)?;
        let (jac, grad) = if derivatives {
            (
                Some(manifold.projection_jacobian(&projection)?),
                Some(manifold.bump_gradient(z, distance)),
            )
        } else {
            (None, None)
        };
        Ok(Self {
            z: z.clone(),
            retracted: projection.point,
            tube_distance: distance,
            bump,
            retraction_jacobian: jac,
            bump_gradient: grad,
        })
    }

    /// Derivative of the running cost composed with the retraction.
    pub fn cost_gradient(&self, problem: &ControlProblem, u: &DVector<f64>) -> DVector<f64> {
        let grad = problem.cost_gradient(&self.retracted, u);
        match &self.retraction_jacobian {
            Some(dpi) if self.bump > 0.0 => dpi.transpose() * grad,
            Some(_) => {
                // outside the support the retraction is not evaluated; f⁰∘π is undefined there
                DVector::zeros(self.z.len())
            }
            None => grad,
        }
    }
}

/// `F(z, u) = ρ(z) f(π(z), u)`.
pub fn extend_dynamics(
    problem: &ControlProblem,
    z: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<DVector<f64>> {
    let at = AmbientPoint::evaluate(&problem.manifold, z, false)?;
    Ok(extended_field_at(problem, &at, u))
}

pub(crate) fn extended_field_at(
    problem: &ControlProblem,
    at: &AmbientPoint,
    u: &DVector<f64>,
) -> DVector<f64> {
    if at.bump == 0.0 {
        return DVector::zeros(at.z.len());
    }
    let f = problem.dynamics.eval(&at.retracted, u);
    if at.bump == 1.0 {
        f
    } else {
        f * at.bump
    }
}

/// `∂F/∂z = ρ Df(π z) Dπ + f(π z) ∇ρᵀ`; requires an `AmbientPoint` with derivatives.
pub(crate) fn extended_jacobian_at(
    problem: &ControlProblem,
    at: &AmbientPoint,
    u: &DVector<f64>,
) -> DMatrix<f64> {
    let n = at.z.len();
    if at.bump == 0.0 {
        return DMatrix::zeros(n, n);
    }
    let dpi = at
        .retraction_jacobian
        .as_ref()
        .expect("derivatives requested");
    let mut jac = problem.dynamics_jacobian(&at.retracted, u) * dpi;
    if at.bump != 1.0 {
        jac *= at.bump;
    }
    if let Some(grad) = &at.bump_gradient {
        if grad.amax() > 0.0 {
            let f = problem.dynamics.eval(&at.retracted, u);
            jac += f * grad.transpose();
        }
    }
    jac
}

/// `f⁰(π(z), u)`.
pub fn extended_cost(problem: &ControlProblem, z: &DVector<f64>, u: &DVector<f64>) -> Result<f64> {
    let x = problem.manifold.project(z, PROJECTION_TOL)?;
    Ok(problem.running_cost.eval(&x, u))
}

/// Outcome of sampling `f` for tangency to `M`.
#[derive(Debug, Clone, PartialEq)]
pub struct TangencyReport {
    pub samples: usize,
    /// Largest `|normal part of f| / max(|f|, 1)`.
    pub max_normal_component: f64,
    pub worst_state: Vec<f64>,
    pub worst_control: Vec<f64>,
    pub tolerance: f64,
    pub passed: bool,
}

/// Samples on-manifold states and controls and reports the worst normal component of `f`.
pub fn check_tangency(problem: &ControlProblem, sample_count: usize) -> TangencyReport {
    let anchor = match &problem.start {
        BoundaryCondition::Point(p) => p.clone(),
        BoundaryCondition::Submanifold(set) => set
            .anchor
            .clone()
            .unwrap_or_else(|| DVector::zeros(problem.ambient_dim())),
    };
    let mut states = vec![anchor.clone()];
    if let BoundaryCondition::Point(p) = &problem.end {
        states.push(p.clone());
    }
    if sample_count > states.len() {
        if let Ok(walk) = problem
            .manifold
            .sample_points(&anchor, sample_count - states.len(), 0)
        {
            states.extend(walk);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut controls = problem.control_set.vertices();
    controls.truncate(64);
    for _ in 0..8 {
        controls.push(problem.control_set.sample(&mut rng));
    }
    let mut worst = (
        0.0_f64,
        anchor.clone(),
        problem.control_set.default_control(),
    );
    let mut count = 0;
    for x in &states {
        let jac = constraint_jacobian(problem.manifold.constraint().as_ref(), x);
        let gram = &jac * jac.transpose();
        let Some(chol) = gram.cholesky() else {
            worst = (f64::INFINITY, x.clone(), worst.2.clone());
            continue;
        };
        for u in &controls {
            let f = problem.dynamics.eval(x, u);
            let normal = jac.transpose() * chol.solve(&(&jac * &f));
            let rel = normal.norm() / f.norm().max(1.0);
            count += 1;
            if rel > worst.0 {
                worst = (rel, x.clone(), u.clone());
            }
        }
    }
    TangencyReport {
        samples: count,
        max_normal_component: worst.0,
        worst_state: worst.1.iter().copied().collect(),
        worst_control: worst.2.iter().copied().collect(),
        tolerance: TANGENCY_TOL,
        passed: worst.0 <= TANGENCY_TOL,
    }
}

/// The bundled sphere system: `ẋ = Ω(u) x` with
/// `Ω(u) = [[0, u₁, 0], [-u₁, 0, u₂], [0, -u₂, 0]]`.
pub fn sphere_rotation_dynamics() -> BilinearDynamics {
    let a1 = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    let a2 = DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, -1.0, 0.0]);
    BilinearDynamics::homogeneous(vec![a1, a2]).expect("valid generators")
}
