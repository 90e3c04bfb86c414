//! Geometry of a manifold embedded in `R^N` as a regular level set `g(x) = 0`.
//!
//! The tubular-neighborhood retraction is the closest-point projection, whose
//! fiber over a point `x` is the affine normal space at `x`. The bump function
//! is a C² quintic blend of a first-order tube-distance estimate.

use crate::error::{PmpError, Result};
use crate::expr::{self, Expr};
use crate::numdiff;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::fmt;
use std::sync::Arc;

/// Singular-value ratio below which a constraint Jacobian is treated as rank deficient.
pub const RANK_TOL: f64 = 1e-10;
/// Default absolute tolerance on `|g(x)|` for projections.
pub const PROJECTION_TOL: f64 = 1e-12;
const PROJECTION_MAX_ITER: usize = 100;
const FD_SCALE: f64 = 1e-6;

/// A smooth map `R^N -> R^k` whose zero set (intersected with anything else
/// the caller stacks on) defines a submanifold.
pub trait ConstraintMap: fmt::Debug + Send + Sync {
    fn ambient_dim(&self) -> usize;
    fn codim(&self) -> usize;
    fn value(&self, x: &DVector<f64>) -> DVector<f64>;

    /// Analytic Jacobian, `k x N`. `None` selects the central-difference fallback.
    fn jacobian(&self, _x: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }

    /// Analytic Hessians of each component. `None` selects finite differences of the Jacobian.
    fn hessians(&self, _x: &DVector<f64>) -> Option<Vec<DMatrix<f64>>> {
        None
    }

    /// Closed-form closest point on the zero set and the derivative of that
    /// map at `z`. `None` selects Gauss–Newton projection.
    fn closest_point(&self, _z: &DVector<f64>) -> Option<(DVector<f64>, DMatrix<f64>)> {
        None
    }
}

/// `(|x - c|^2 - R^2) / 2 = 0`.
#[derive(Debug, Clone)]
pub struct SphereConstraint {
    pub center: DVector<f64>,
    pub radius: f64,
}

impl SphereConstraint {
    pub fn unit(ambient_dim: usize) -> Self {
        Self {
            center: DVector::zeros(ambient_dim),
            radius: 1.0,
        }
    }
}

impl ConstraintMap for SphereConstraint {
    fn ambient_dim(&self) -> usize {
        self.center.len()
    }
    fn codim(&self) -> usize {
        1
    }
    fn value(&self, x: &DVector<f64>) -> DVector<f64> {
        let d = x - &self.center;
        DVector::from_element(1, 0.5 * (d.norm_squared() - self.radius * self.radius))
    }
    fn jacobian(&self, x: &DVector<f64>) -> Option<DMatrix<f64>> {
        let d = x - &self.center;
        Some(DMatrix::from_row_slice(1, d.len(), d.as_slice()))
    }
    fn hessians(&self, x: &DVector<f64>) -> Option<Vec<DMatrix<f64>>> {
        Some(vec![DMatrix::identity(x.len(), x.len())])
    }
    fn closest_point(&self, z: &DVector<f64>) -> Option<(DVector<f64>, DMatrix<f64>)> {
        let d = z - &self.center;
        let r = d.norm();
        if r < 1e-8 * self.radius {
            return None;
        }
        let dir = &d / r;
        let mut dpi = DMatrix::identity(d.len(), d.len()) - &dir * dir.transpose();
        dpi *= self.radius / r;
        Some((&self.center + dir * self.radius, dpi))
    }
}

/// Affine constraint `A x - b = 0`.
#[derive(Debug, Clone)]
pub struct AffineConstraint {
    pub matrix: DMatrix<f64>,
    pub offset: DVector<f64>,
}

impl ConstraintMap for AffineConstraint {
    fn ambient_dim(&self) -> usize {
        self.matrix.ncols()
    }
    fn codim(&self) -> usize {
        self.matrix.nrows()
    }
    fn value(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.matrix * x - &self.offset
    }
    fn jacobian(&self, _x: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(self.matrix.clone())
    }
    fn hessians(&self, x: &DVector<f64>) -> Option<Vec<DMatrix<f64>>> {
        Some(vec![DMatrix::zeros(x.len(), x.len()); self.codim()])
    }
    fn closest_point(&self, z: &DVector<f64>) -> Option<(DVector<f64>, DMatrix<f64>)> {
        let a = &self.matrix;
        let gram = (a * a.transpose()).cholesky()?;
        let correction = a.transpose() * gram.solve(&(a * z - &self.offset));
        let dpi = DMatrix::identity(z.len(), z.len()) - a.transpose() * gram.solve(a);
        Some((z - correction, dpi))
    }
}

/// Constraints parsed from text over variables `x1..xN`, with symbolic derivatives.
#[derive(Debug, Clone)]
pub struct ExpressionConstraint {
    ambient_dim: usize,
    sources: Vec<String>,
    values: Vec<Expr>,
    gradients: Vec<Vec<Expr>>,
    hessians: Vec<Vec<Vec<Expr>>>,
}

impl ExpressionConstraint {
    pub fn parse<S: AsRef<str>>(ambient_dim: usize, sources: &[S]) -> Result<Self> {
        if sources.is_empty() {
            return Err(PmpError::InvalidProblem(
                "at least one constraint expression is required".into(),
            ));
        }
        let resolve = expr::state_control_vars(ambient_dim, 0);
        let values = sources
            .iter()
            .map(|s| expr::parse(s.as_ref(), &resolve))
            .collect::<Result<Vec<_>>>()?;
        let gradients: Vec<Vec<Expr>> = values
            .iter()
            .map(|e| (0..ambient_dim).map(|j| e.diff(j)).collect())
            .collect();
        let hessians = gradients
            .iter()
            .map(|grad| {
                grad.iter()
                    .map(|gj| (0..ambient_dim).map(|l| gj.diff(l)).collect())
                    .collect()
            })
            .collect();
        Ok(Self {
            ambient_dim,
            sources: sources.iter().map(|s| s.as_ref().to_string()).collect(),
            values,
            gradients,
            hessians,
        })
    }

    pub fn sources(&self) -> &[String] {
        &self.sources
    }
}

impl ConstraintMap for ExpressionConstraint {
    fn ambient_dim(&self) -> usize {
        self.ambient_dim
    }
    fn codim(&self) -> usize {
        self.values.len()
    }
    fn value(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.values.len(),
            self.values.iter().map(|e| e.eval(x.as_slice())),
        )
    }
    fn jacobian(&self, x: &DVector<f64>) -> Option<DMatrix<f64>> {
        let v = x.as_slice();
        Some(DMatrix::from_fn(
            self.values.len(),
            self.ambient_dim,
            |i, j| self.gradients[i][j].eval(v),
        ))
    }
    fn hessians(&self, x: &DVector<f64>) -> Option<Vec<DMatrix<f64>>> {
        let v = x.as_slice();
        Some(
            self.hessians
                .iter()
                .map(|h| {
                    DMatrix::from_fn(self.ambient_dim, self.ambient_dim, |j, l| h[j][l].eval(v))
                })
                .collect(),
        )
    }
}

/// Concatenation of two constraint maps on the same ambient space.
#[derive(Debug, Clone)]
pub struct StackedConstraint {
    pub first: Arc<dyn ConstraintMap>,
    pub second: Arc<dyn ConstraintMap>,
}

impl ConstraintMap for StackedConstraint {
    fn ambient_dim(&self) -> usize {
        self.first.ambient_dim()
    }
    fn codim(&self) -> usize {
        self.first.codim() + self.second.codim()
    }
    fn value(&self, x: &DVector<f64>) -> DVector<f64> {
        let a = self.first.value(x);
        let b = self.second.value(x);
        DVector::from_iterator(a.len() + b.len(), a.iter().chain(b.iter()).copied())
    }
    fn jacobian(&self, x: &DVector<f64>) -> Option<DMatrix<f64>> {
        let a = constraint_jacobian(self.first.as_ref(), x);
        let b = constraint_jacobian(self.second.as_ref(), x);
        let mut out = DMatrix::zeros(a.nrows() + b.nrows(), a.ncols());
        out.rows_mut(0, a.nrows()).copy_from(&a);
        out.rows_mut(a.nrows(), b.nrows()).copy_from(&b);
        Some(out)
    }
    fn hessians(&self, x: &DVector<f64>) -> Option<Vec<DMatrix<f64>>> {
        let mut h = constraint_hessians(self.first.as_ref(), x);
        h.extend(constraint_hessians(self.second.as_ref(), x));
        Some(h)
    }
}

/// Jacobian of `c` at `x`, falling back to central differences with step `1e-6 (1 + |x|)`.
pub fn constraint_jacobian(c: &dyn ConstraintMap, x: &DVector<f64>) -> DMatrix<f64> {
    c.jacobian(x).unwrap_or_else(|| {
        numdiff::central_jacobian(|y| c.value(y), x, numdiff::relative_step(FD_SCALE, x))
    })
}

/// Hessians of each component of `c`, falling back to differences of the Jacobian.
pub fn constraint_hessians(c: &dyn ConstraintMap, x: &DVector<f64>) -> Vec<DMatrix<f64>> {
    if let Some(h) = c.hessians(x) {
        return h;
    }
    let n = x.len();
    let h = numdiff::relative_step(1e-5, x);
    let mut out = vec![DMatrix::zeros(n, n); c.codim()];
    let mut probe = x.clone();
    for l in 0..n {
        probe[l] = x[l] + h;
        let jp = constraint_jacobian(c, &probe);
        probe[l] = x[l] - h;
        let jm = constraint_jacobian(c, &probe);
        probe[l] = x[l];
        let d = (jp - jm) / (2.0 * h);
        for (k, hk) in out.iter_mut().enumerate() {
            for j in 0..n {
                hk[(j, l)] = d[(k, j)];
            }
        }
    }
    for hk in &mut out {
        let sym = (&*hk + hk.transpose()) * 0.5;
        *hk = sym;
    }
    out
}

/// Orthonormal splitting of `R^N` at a point into tangent and normal parts.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentFrame {
    pub base_point: DVector<f64>,
    /// `N x n`, orthonormal columns spanning `T_x M`.
    pub tangent_basis: DMatrix<f64>,
    /// `N x (N - n)`, orthonormal columns spanning the normal space.
    pub normal_basis: DMatrix<f64>,
}

impl TangentFrame {
    /// Tangent projector `B Bᵀ`.
    pub fn tangent_projector(&self) -> DMatrix<f64> {
        &self.tangent_basis * self.tangent_basis.transpose()
    }
}

/// A covector at a point, either in ambient components or in a tangent frame.
#[derive(Debug, Clone, PartialEq)]
pub enum Covector {
    Ambient {
        base_point: DVector<f64>,
        components: DVector<f64>,
    },
    Intrinsic {
        frame: TangentFrame,
        components: DVector<f64>,
    },
}

impl Covector {
    pub fn ambient(base_point: DVector<f64>, components: DVector<f64>) -> Self {
        Covector::Ambient {
            base_point,
            components,
        }
    }

    pub fn base_point(&self) -> &DVector<f64> {
        match self {
            Covector::Ambient { base_point, .. } => base_point,
            Covector::Intrinsic { frame, .. } => &frame.base_point,
        }
    }

    pub fn components(&self) -> &DVector<f64> {
        match self {
            Covector::Ambient { components, .. } | Covector::Intrinsic { components, .. } => {
                components
            }
        }
    }

    /// Ambient representative; for an intrinsic covector this is the tangent
    /// vector `B λ`, i.e. the extension that vanishes on normal directions.
    pub fn to_ambient(&self) -> DVector<f64> {
        match self {
            Covector::Ambient { components, .. } => components.clone(),
            Covector::Intrinsic { frame, components } => &frame.tangent_basis * components,
        }
    }
}

/// Result of the closest-point projection.
#[derive(Debug, Clone)]
pub struct Projection {
    pub point: DVector<f64>,
    /// Multiplier `ν` with `z - x = Dg(x)ᵀ ν`.
    pub multiplier: DVector<f64>,
    pub iterations: usize,
}

/// `M ⊂ R^N` given by constraint equations, with a trusted tube radius.
#[derive(Debug, Clone)]
pub struct EmbeddedManifold {
    constraint: Arc<dyn ConstraintMap>,
    ambient_dim: usize,
    intrinsic_dim: usize,
    tube_radius: f64,
}

impl EmbeddedManifold {
    pub fn new(constraint: Arc<dyn ConstraintMap>, tube_radius: f64) -> Result<Self> {
        let ambient_dim = constraint.ambient_dim();
        let codim = constraint.codim();
        if codim == 0 || codim >= ambient_dim {
            return Err(PmpError::InvalidProblem(format!(
                "need 0 < n < N, got N = {ambient_dim} with {codim} constraints"
            )));
        }
        if !(tube_radius > 0.0 && tube_radius.is_finite()) {
            return Err(PmpError::InvalidProblem(format!(
                "tube radius must be positive, got {tube_radius}"
            )));
        }
        Ok(Self {
            constraint,
            ambient_dim,
            intrinsic_dim: ambient_dim - codim,
            tube_radius,
        })
    }

    /// Builds the manifold and picks the tube radius from curvature sampled at `anchors`.
    pub fn with_estimated_tube(
        constraint: Arc<dyn ConstraintMap>,
        anchors: &[DVector<f64>],
    ) -> Result<Self> {
        let provisional = Self::new(constraint, 1.0)?;
        let radius = provisional.estimate_tube_radius(anchors)?;
        Ok(Self {
            tube_radius: radius,
            ..provisional
        })
    }

    /// Unit sphere `S^{N-1} ⊂ R^N` with tube radius 0.1.
    pub fn unit_sphere(ambient_dim: usize) -> Self {
        Self::new(Arc::new(SphereConstraint::unit(ambient_dim)), 0.1).expect("valid sphere")
    }

    /// Coordinate hyperplane `x_N = 0` in `R^N`.
    pub fn coordinate_plane(ambient_dim: usize) -> Self {
        let mut a = DMatrix::zeros(1, ambient_dim);
        a[(0, ambient_dim - 1)] = 1.0;
        Self::new(
            Arc::new(AffineConstraint {
                matrix: a,
                offset: DVector::zeros(1),
            }),
            1.0,
        )
        .expect("valid plane")
    }

    pub fn ambient_dim(&self) -> usize {
        self.ambient_dim
    }
    pub fn intrinsic_dim(&self) -> usize {
        self.intrinsic_dim
    }
    pub fn codim(&self) -> usize {
        self.ambient_dim - self.intrinsic_dim
    }
    pub fn tube_radius(&self) -> f64 {
        self.tube_radius
    }
    pub fn constraint(&self) -> &Arc<dyn ConstraintMap> {
        &self.constraint
    }

    pub fn constraint_value(&self, x: &DVector<f64>) -> DVector<f64> {
        self.constraint.value(x)
    }
    pub fn constraint_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        constraint_jacobian(self.constraint.as_ref(), x)
    }
    pub fn constraint_norm(&self, x: &DVector<f64>) -> f64 {
        self.constraint.value(x).norm()
    }

    fn gram_inverse(&self, jac: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let gram = jac * jac.transpose();
        match gram.clone().cholesky() {
            Some(ch) => {
                let inv = ch.inverse();
                if inv.iter().all(|v| v.is_finite()) {
                    Ok(inv)
                } else {
                    Err(PmpError::RankDeficient { ratio: 0.0 })
                }
            }
            None => Err(PmpError::RankDeficient {
                ratio: singular_ratio(jac),
            }),
        }
    }

    fn check_rank(&self, jac: &DMatrix<f64>) -> Result<()> {
        let ratio = singular_ratio(jac);
        if ratio <= RANK_TOL {
            Err(PmpError::RankDeficient { ratio })
        } else {
            Ok(())
        }
    }

    /// Gauss–Newton closest point on `M` to `z`.
    pub fn project(&self, z: &DVector<f64>, tol: f64) -> Result<DVector<f64>> {
        self.project_with_multiplier(z, tol).map(|p| p.point)
    }

    pub fn project_with_multiplier(&self, z: &DVector<f64>, tol: f64) -> Result<Projection> {
        let mut x = z.clone();
        let step_floor = 1e-15 * (1.0 + z.norm());
        for it in 1..=PROJECTION_MAX_ITER {
            let gx = self.constraint.value(&x);
            let jac = self.constraint_jacobian(&x);
            let gram_inv = self.gram_inverse(&jac)?;
            let offset = z - &x;
            // Minimise |x + d - z|² subject to the linearised constraint g + G d = 0.
            let rhs = &gx + &jac * &offset;
            let step = offset - jac.transpose() * (&gram_inv * rhs);
            x += &step;
            let snorm = step.norm();
            // residuals are measured as distances |g|/|Dg| so the tolerance is scale free
            let accept = tol.max(4.0 * step_floor);
            if snorm <= step_floor || (snorm <= accept && self.tube_distance(&x) <= accept) {
                let g_final = self.tube_distance(&x);
                if g_final > accept {
                    return Err(PmpError::NoConvergence {
                        iterations: it,
                        residual: g_final,
                    });
                }
                let jac = self.constraint_jacobian(&x);
                let gram_inv = self.gram_inverse(&jac)?;
                let multiplier = &gram_inv * (&jac * (z - &x));
                return Ok(Projection {
                    point: x,
                    multiplier,
                    iterations: it,
                });
            }
            if !snorm.is_finite() {
                break;
            }
        }
        Err(PmpError::NoConvergence {
            iterations: PROJECTION_MAX_ITER,
            residual: self.constraint.value(&x).norm(),
        })
    }

    /// Derivative `Dπ(z)` of the closest-point retraction, from the
    /// linearised optimality system at the projected point.
    pub fn projection_jacobian(&self, projection: &Projection) -> Result<DMatrix<f64>> {
        let n = self.ambient_dim;
        let k = self.codim();
        let x = &projection.point;
        let jac = self.constraint_jacobian(x);
        if projection.multiplier.amax() < 1e-14 {
            let gram_inv = self.gram_inverse(&jac)?;
            return Ok(DMatrix::identity(n, n) - jac.transpose() * gram_inv * &jac);
        }
        let hess = constraint_hessians(self.constraint.as_ref(), x);
        let mut kkt = DMatrix::zeros(n + k, n + k);
        let mut top = DMatrix::identity(n, n);
        for (nu, h) in projection.multiplier.iter().zip(&hess) {
            top += h * *nu;
        }
        kkt.view_mut((0, 0), (n, n)).copy_from(&top);
        kkt.view_mut((0, n), (n, k)).copy_from(&jac.transpose());
        kkt.view_mut((n, 0), (k, n)).copy_from(&jac);
        let mut rhs = DMatrix::zeros(n + k, n);
        rhs.view_mut((0, 0), (n, n)).fill_with_identity();
        let sol = kkt
            .lu()
            .solve(&rhs)
            .ok_or(PmpError::RankDeficient { ratio: 0.0 })?;
        Ok(sol.rows(0, n).into_owned())
    }

    /// Orthonormal tangent and normal bases at `x`.
    ///
    /// The tangent basis is built by pivoted Gram–Schmidt on the projected
    /// coordinate axes, so coordinate-aligned tangent spaces get coordinate
    /// basis vectors in index order.
    pub fn tangent_frame(&self, x: &DVector<f64>) -> Result<TangentFrame> {
        let jac = self.constraint_jacobian(x);
        self.check_rank(&jac)?;
        let normal = orthonormal_columns(&jac.transpose());
        let tangent = complement_basis(&normal, self.intrinsic_dim);
        Ok(TangentFrame {
            base_point: x.clone(),
            tangent_basis: tangent,
            normal_basis: normal,
        })
    }

    /// Tangent space of the fiber `π⁻¹(x)` of the closest-point retraction at `x`.
    pub fn fiber_tangent(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        Ok(self.tangent_frame(x)?.normal_basis)
    }

    /// Intrinsic components `Bᵀ p` of an ambient covector.
    pub fn restrict_covector(&self, p: &Covector) -> Result<Covector> {
        match p {
            Covector::Ambient {
                base_point,
                components,
            } => {
                let frame = self.tangent_frame(base_point)?;
                let intrinsic = frame.tangent_basis.transpose() * components;
                Ok(Covector::Intrinsic {
                    frame,
                    components: intrinsic,
                })
            }
            Covector::Intrinsic { .. } => Ok(p.clone()),
        }
    }

    /// First-order distance estimate `|Dg⁺ g|` from `z` to `M`; infinite where `Dg` degenerates.
    pub fn tube_distance(&self, z: &DVector<f64>) -> f64 {
        let gz = self.constraint.value(z);
        if gz.amax() == 0.0 {
            return 0.0;
        }
        let jac = self.constraint_jacobian(z);
        match self.gram_inverse(&jac) {
            Ok(gram_inv) => gz.dot(&(&gram_inv * &gz)).max(0.0).sqrt(),
            Err(_) => f64::INFINITY,
        }
    }

    /// Bump value for a given tube distance.
    pub fn bump_of_distance(&self, distance: f64) -> f64 {
        bump_profile(distance, self.tube_radius)
    }

    pub fn bump(&self, z: &DVector<f64>) -> f64 {
        self.bump_of_distance(self.tube_distance(z))
    }

    /// Gradient of the bump; zero inside the plateau and outside the support.
    pub fn bump_gradient(&self, z: &DVector<f64>, distance: f64) -> DVector<f64> {
        let r = self.tube_radius;
        if distance < 0.5 * r * (1.0 - 1e-6) || distance > r * (1.0 + 1e-6) {
            return DVector::zeros(z.len());
        }
        numdiff::central_gradient(|y| self.bump(y), z, numdiff::relative_step(1e-6, z))
    }

    /// Conservative tube radius `0.1 σ_min(Dg) / κ` sampled at the given
    /// on-manifold points, where `κ` is the largest second difference of `g`.
    /// Floored at `1e-3`, capped at 1.
    pub fn estimate_tube_radius(&self, samples: &[DVector<f64>]) -> Result<f64> {
        let mut radius = 1.0_f64;
        for x in samples {
            let jac = self.constraint_jacobian(x);
            let sv = jac.singular_values();
            let sigma = sv.min();
            if sigma <= RANK_TOL * sv.max().max(f64::MIN_POSITIVE) {
                return Err(PmpError::RankDeficient { ratio: 0.0 });
            }
            let h = 1e-3 * (1.0 + x.norm());
            let g0 = self.constraint.value(x);
            let mut curvature = 0.0_f64;
            let mut probe = x.clone();
            for j in 0..x.len() {
                probe[j] = x[j] + h;
                let gp = self.constraint.value(&probe);
                probe[j] = x[j] - h;
                let gm = self.constraint.value(&probe);
                probe[j] = x[j];
                curvature = curvature.max(((gp + gm - &g0 * 2.0) / (h * h)).norm());
            }
            if curvature > 1e-12 {
                radius = radius.min(0.1 * sigma / curvature);
            }
        }
        Ok(radius.max(1e-3))
    }

    /// Deterministic random walk on `M` starting from `anchor`.
    pub fn sample_points(
        &self,
        anchor: &DVector<f64>,
        count: usize,
        seed: u64,
    ) -> Result<Vec<DVector<f64>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = self.project(anchor, PROJECTION_TOL)?;
        let step = 0.5 * self.tube_radius;
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            for _ in 0..8 {
                let frame = self.tangent_frame(&x)?;
                let coeffs = DVector::from_fn(self.intrinsic_dim, |_, _| {
                    rng.sample::<f64, _>(StandardNormal)
                });
                let dir = &frame.tangent_basis * coeffs;
                let norm = dir.norm();
                if norm > 0.0 {
                    x = self.project(&(&x + dir * (step / norm)), PROJECTION_TOL)?;
                }
            }
            out.push(x.clone());
        }
        Ok(out)
    }
}

/// `1` for distance ≤ r/2, `0` for distance ≥ r, quintic smoothstep blend between.
pub fn bump_profile(distance: f64, tube_radius: f64) -> f64 {
    let half = 0.5 * tube_radius;
    if distance <= half {
        1.0
    } else if distance >= tube_radius || !distance.is_finite() {
        0.0
    } else {
        let s = (distance - half) / half;
        1.0 - s * s * s * (s * (6.0 * s - 15.0) + 10.0)
    }
}

fn singular_ratio(jac: &DMatrix<f64>) -> f64 {
    let sv = jac.singular_values();
    let max = sv.max();
    if max <= 0.0 || !max.is_finite() {
        0.0
    } else {
        sv.min() / max
    }
}

/// Orthonormal basis of the column space of a full-column-rank matrix.
fn orthonormal_columns(a: &DMatrix<f64>) -> DMatrix<f64> {
    let mut cols: Vec<DVector<f64>> = Vec::with_capacity(a.ncols());
    for j in 0..a.ncols() {
        let mut v = a.column(j).into_owned();
        for _ in 0..2 {
            for q in &cols {
                let c = q.dot(&v);
                v -= q * c;
            }
        }
        let n = v.norm();
        cols.push(v / n);
    }
    DMatrix::from_columns(&cols)
}

/// `count` orthonormal vectors completing `basis` to `R^N`, chosen by
/// largest-residual pivoting over the coordinate axes (ties to lower index).
fn complement_basis(basis: &DMatrix<f64>, count: usize) -> DMatrix<f64> {
    let n = basis.nrows();
    let mut chosen: Vec<DVector<f64>> = Vec::with_capacity(count);
    let mut candidates: Vec<DVector<f64>> = (0..n)
        .map(|i| {
            let mut e = DVector::zeros(n);
            e[i] = 1.0;
            for _ in 0..2 {
                for q in basis.column_iter() {
                    let c = q.dot(&e);
                    e -= q * c;
                }
            }
            e
        })
        .collect();
    for _ in 0..count {
        let mut best = 0;
        let mut best_norm = -1.0;
        for (i, c) in candidates.iter().enumerate() {
            let nrm = c.norm();
            if nrm > best_norm * (1.0 + 1e-12) {
                best = i;
                best_norm = nrm;
            }
        }
        let mut v = candidates[best].clone();
        for _ in 0..2 {
            for q in basis
                .column_iter()
                .map(|c| c.into_owned())
                .chain(chosen.iter().cloned())
            {
                let c = q.dot(&v);
                v -= &q * c;
            }
        }
        let v = &v / v.norm();
        for c in candidates.iter_mut() {
            let proj = v.dot(c);
            *c -= &v * proj;
        }
        candidates[best].fill(0.0);
        chosen.push(v);
    }
    DMatrix::from_columns(&chosen)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    fn sphere() -> EmbeddedManifold {
        EmbeddedManifold::unit_sphere(3)
    }

    fn spans(basis: &DMatrix<f64>, targets: &[DVector<f64>]) -> bool {
        let proj = basis * basis.transpose();
        targets.iter().all(|t| (&proj * t - t).norm() < 1e-12) && basis.ncols() == targets.len()
    }

    #[test]
    fn projects_radially_onto_sphere() {
        let m = sphere();
        let x = m.project(&v(&[2.0, 0.0, 0.0]), PROJECTION_TOL).unwrap();
        assert!((x - v(&[1.0, 0.0, 0.0])).norm() < 1e-14);
    }

    #[test]
    fn projection_is_identity_on_manifold() {
        let m = sphere();
        let e1 = v(&[1.0, 0.0, 0.0]);
        assert_eq!(m.project(&e1, PROJECTION_TOL).unwrap(), e1);
    }

    #[test]
    fn projection_matches_closed_form_on_sphere() {
        let m = sphere();
        let z = v(&[0.6, 0.8, 0.1]);
        let x = m.project(&z, PROJECTION_TOL).unwrap();
        assert!((x - &z / z.norm()).norm() < 1e-10);
    }

    fn newton_retraction(m: &EmbeddedManifold, z: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let proj = m.project_with_multiplier(z, PROJECTION_TOL).unwrap();
        let dpi = m.projection_jacobian(&proj).unwrap();
        (proj.point, dpi)
    }

    #[test]
    fn closed_form_retractions_match_newton() {
        let sphere = SphereConstraint {
            center: v(&[0.5, -1.0, 2.0]),
            radius: 2.0,
        };
        let m = EmbeddedManifold::new(Arc::new(sphere.clone()), 0.4).unwrap();
        let z = v(&[2.3, -0.7, 2.4]);
        let (x, dpi) = sphere.closest_point(&z).unwrap();
        let (xn, dn) = newton_retraction(&m, &z);
        assert!((x - xn).amax() < 1e-12);
        assert!((dpi - dn).amax() < 1e-10);

        let affine = AffineConstraint {
            matrix: DMatrix::from_row_slice(2, 4, &[1.0, 2.0, 0.0, -1.0, 0.0, 1.0, 1.0, 3.0]),
            offset: v(&[0.5, -2.0]),
        };
        let m = EmbeddedManifold::new(Arc::new(affine.clone()), 1.0).unwrap();
        let z = v(&[0.3, -0.2, 1.1, 0.4]);
        let (x, dpi) = affine.closest_point(&z).unwrap();
        let (xn, dn) = newton_retraction(&m, &z);
        assert!((x - xn).amax() < 1e-12);
        assert!((dpi - dn).amax() < 1e-12);
    }

    #[test]
    fn projection_onto_torus_is_closest_point() {
        let c =
            ExpressionConstraint::parse(3, &["(x1^2 + x2^2 + x3^2 + 4 - 1)^2 - 16*(x1^2 + x2^2)"])
                .unwrap();
        let m = EmbeddedManifold::new(Arc::new(c), 0.1).unwrap();
        let z = v(&[3.05, 0.2, 0.1]);
        let x = m.project(&z, PROJECTION_TOL).unwrap();
        // closest point on a torus lies on the tube circle through the ring point
        let ring = v(&[z[0], z[1], 0.0]).normalize() * 2.0;
        let expected = &ring + (&z - &ring).normalize();
        assert!((x - expected).norm() < 1e-9);
    }

    #[test]
    fn project_reports_rank_deficiency() {
        let c = ExpressionConstraint::parse(3, &["x1 - x1"]).unwrap();
        let m = EmbeddedManifold::new(Arc::new(c), 0.1).unwrap();
        assert!(matches!(
            m.project(&v(&[1.0, 0.0, 0.0]), PROJECTION_TOL),
            Err(PmpError::RankDeficient { .. })
        ));
        assert!(matches!(
            m.tangent_frame(&v(&[1.0, 0.0, 0.0])),
            Err(PmpError::RankDeficient { .. })
        ));
    }

    #[test]
    fn frames_on_sphere_and_plane() {
        let m = sphere();
        let e = |i: usize| {
            let mut x = DVector::zeros(3);
            x[i] = 1.0;
            x
        };
        let f = m.tangent_frame(&e(0)).unwrap();
        assert!(spans(&f.tangent_basis, &[e(1), e(2)]));
        assert!(spans(&f.normal_basis, &[e(0)]));
        let f = m.tangent_frame(&e(2)).unwrap();
        assert!(spans(&f.tangent_basis, &[e(0), e(1)]));
        assert!(spans(&f.normal_basis, &[e(2)]));
        let plane = EmbeddedManifold::coordinate_plane(3);
        let f = plane.tangent_frame(&DVector::zeros(3)).unwrap();
        assert!(spans(&f.tangent_basis, &[e(0), e(1)]));
        assert!(spans(
            &plane.fiber_tangent(&DVector::zeros(3)).unwrap(),
            &[e(2)]
        ));
        assert!(spans(&m.fiber_tangent(&e(2)).unwrap(), &[e(2)]));
    }

    #[test]
    fn fiber_and_tangent_split_ambient_space() {
        let m = sphere();
        let x = v(&[1.0, 0.0, 0.0]);
        let f = m.tangent_frame(&x).unwrap();
        let fiber = m.fiber_tangent(&x).unwrap();
        let mut both = DMatrix::zeros(3, 3);
        both.columns_mut(0, 2).copy_from(&f.tangent_basis);
        both.columns_mut(2, 1).copy_from(&fiber);
        assert_eq!(both.rank(1e-12), 3);
    }

    #[test]
    fn bump_values() {
        let m = sphere();
        assert_eq!(m.bump(&v(&[0.0, 1.0, 0.0])), 1.0);
        assert_eq!(m.bump_of_distance(0.1), 0.0);
        assert_eq!(m.bump_of_distance(0.25), 0.0);
        // s = 1/2 is the midpoint of the symmetric quintic blend
        assert!((m.bump_of_distance(0.075) - 0.5).abs() < 1e-15);
        let samples: Vec<f64> = (0..=200)
            .map(|i| m.bump_of_distance(0.05 + 0.05 * i as f64 / 200.0))
            .collect();
        assert!(samples.windows(2).all(|w| w[1] <= w[0]));
        assert!(samples[100] > 0.0 && samples[100] < 1.0);
    }

    #[test]
    fn restriction_drops_normal_part() {
        let m = sphere();
        let e1 = v(&[1.0, 0.0, 0.0]);
        let r = m
            .restrict_covector(&Covector::ambient(e1.clone(), v(&[5.0, 1.0, 2.0])))
            .unwrap();
        assert_eq!(r.components(), &v(&[1.0, 2.0]));
        let r = m
            .restrict_covector(&Covector::ambient(e1, v(&[7.0, 0.0, 0.0])))
            .unwrap();
        assert_eq!(r.components(), &v(&[0.0, 0.0]));
    }

    #[test]
    fn projection_jacobian_matches_sphere_formula() {
        let m = sphere();
        let z = v(&[0.9, 0.3, -0.2]);
        let p = m.project_with_multiplier(&z, PROJECTION_TOL).unwrap();
        let dpi = m.projection_jacobian(&p).unwrap();
        let zh = &z / z.norm();
        let expected = (DMatrix::identity(3, 3) - &zh * zh.transpose()) / z.norm();
        assert!((dpi - expected).norm() < 1e-12);
    }

    #[test]
    fn projection_jacobian_matches_differences_on_torus() {
        let c = ExpressionConstraint::parse(3, &["(x1^2 + x2^2 + x3^2 + 3)^2 - 16*(x1^2 + x2^2)"])
            .unwrap();
        let m = EmbeddedManifold::new(Arc::new(c), 0.1).unwrap();
        let z = v(&[2.9, 0.5, 0.85]);
        let p = m.project_with_multiplier(&z, PROJECTION_TOL).unwrap();
        let dpi = m.projection_jacobian(&p).unwrap();
        let fd = numdiff::central_jacobian(|y| m.project(y, 1e-14).unwrap(), &z, 1e-6);
        assert!((dpi - fd).norm() < 1e-7);
    }

    #[test]
    fn tube_radius_default_for_unit_sphere() {
        let c: Arc<dyn ConstraintMap> = Arc::new(SphereConstraint::unit(3));
        let m = EmbeddedManifold::with_estimated_tube(c, &[v(&[1.0, 0.0, 0.0])]).unwrap();
        assert!((m.tube_radius() - 0.1).abs() < 1e-6);
        let plane = EmbeddedManifold::coordinate_plane(3);
        assert_eq!(
            plane.estimate_tube_radius(&[DVector::zeros(3)]).unwrap(),
            1.0
        );
    }

    #[test]
    fn random_walk_stays_on_manifold() {
        let m = sphere();
        let pts = m.sample_points(&v(&[0.0, 0.0, 1.0]), 20, 3).unwrap();
        assert_eq!(pts.len(), 20);
        assert!(pts.iter().all(|p| m.constraint_norm(p) < 1e-12));
    }

    fn unit_vec() -> impl Strategy<Value = DVector<f64>> {
        (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64)
            .prop_filter("nonzero", |(a, b, c)| a * a + b * b + c * c > 1e-2)
            .prop_map(|(a, b, c)| v(&[a, b, c]).normalize())
    }

    proptest! {
        #[test]
        fn projection_idempotent(dir in unit_vec(), r in 0.7..1.4f64) {
            let m = sphere();
            let once = m.project(&(dir * r), PROJECTION_TOL).unwrap();
            let twice = m.project(&once, PROJECTION_TOL).unwrap();
            prop_assert!((once - twice).norm() <= 1e-12);
        }

        #[test]
        fn frame_orthogonality(x in unit_vec()) {
            let m = sphere();
            let f = m.tangent_frame(&x).unwrap();
            prop_assert!((f.tangent_basis.transpose() * &f.normal_basis).amax() <= 1e-10);
            prop_assert!((m.constraint_jacobian(&x) * &f.tangent_basis).amax() <= 1e-8);
            let tt = f.tangent_basis.transpose() * &f.tangent_basis;
            prop_assert!((tt - DMatrix::identity(2, 2)).amax() <= 1e-12);
            let mut both = DMatrix::zeros(3, 3);
            both.columns_mut(0, 2).copy_from(&f.tangent_basis);
            both.columns_mut(2, 1).copy_from(&f.normal_basis);
            prop_assert_eq!(both.rank(1e-10), 3);
        }

        #[test]
        fn bump_within_unit_interval(a in -2.0..2.0f64, b in -2.0..2.0f64, c in -2.0..2.0f64) {
            let m = sphere();
            let z = v(&[a, b, c]);
            let rho = m.bump(&z);
            prop_assert!((0.0..=1.0).contains(&rho));
            if m.tube_distance(&z) >= m.tube_radius() {
                prop_assert_eq!(rho, 0.0);
            }
        }

        #[test]
        fn restriction_is_linear_and_matches_projector(x in unit_vec(), p in unit_vec(), q in unit_vec(), alpha in -3.0..3.0f64, beta in -3.0..3.0f64) {
            let m = sphere();
            let restrict = |c: &DVector<f64>| m.restrict_covector(&Covector::ambient(x.clone(), c.clone())).unwrap();
            let combo = restrict(&(&p * alpha + &q * beta));
            let sum = restrict(&p).components() * alpha + restrict(&q).components() * beta;
            prop_assert!((combo.components() - sum).norm() <= 1e-12);
            let tangent_part = restrict(&p).to_ambient();
            let expected = (DMatrix::identity(3, 3) - &x * x.transpose()) * &p;
            prop_assert!((tangent_part - expected).norm() <= 1e-12);
        }
    }
}
