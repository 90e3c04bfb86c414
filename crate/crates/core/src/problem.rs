//! JSON problem files.
//!
//! A problem file has four sections: `manifold`, `system`, `solver` and
//! `verifier`. Every object is tagged by `kind` where alternatives exist and
//! unknown keys are rejected. Syntax and schema errors carry line and column.
//!
//! ```json
//! {
//!   "manifold": { "kind": "sphere", "dim": 3 },
//!   "system": {
//!     "dynamics": { "kind": "sphere_rotation" },
//!     "cost": { "kind": "time" },
//!     "controls": { "kind": "symmetric_box", "dim": 2, "bound": 1.0 },
//!     "start": { "kind": "point", "point": [1, 0, 0] },
//!     "end": { "kind": "point", "point": [0, 0, 1] },
//!     "terminal_time": { "kind": "free" }
//!   }
//! }
//! ```

use crate::error::{PmpError, Result};
use crate::manifold::{ConstraintMap, EmbeddedManifold, ExpressionConstraint, SphereConstraint};
use crate::shooting::SolverConfig;
use crate::system::{
    sphere_rotation_dynamics, BilinearDynamics, BoundaryCondition, BoundarySet, ControlProblem,
    ControlSet, Dynamics, ExpressionCost, ExpressionDynamics, QuadraticControlCost, RunningCost,
    TerminalTime, TimeCost,
};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemFile {
    pub manifold: ManifoldSpec,
    pub system: SystemSpec,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub verifier: crate::verifier::Tolerances,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ManifoldSpec {
    Sphere {
        dim: usize,
        #[serde(default = "one")]
        radius: f64,
        #[serde(default)]
        center: Option<Vec<f64>>,
        #[serde(default)]
        tube_radius: Option<f64>,
    },
    /// The coordinate hyperplane `x_dim = 0` in `R^dim`.
    Plane {
        dim: usize,
        #[serde(default)]
        tube_radius: Option<f64>,
    },
    /// Torus of revolution about the `x3` axis in `R^3`.
    Torus {
        major_radius: f64,
        minor_radius: f64,
        #[serde(default)]
        tube_radius: Option<f64>,
    },
    /// Zero set of expressions over `x1..x_dim`.
    Constraints {
        dim: usize,
        expressions: Vec<String>,
        #[serde(default)]
        tube_radius: Option<f64>,
    },
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    pub dynamics: DynamicsSpec,
    pub cost: CostSpec,
    pub controls: ControlSetSpec,
    pub start: BoundarySpec,
    pub end: BoundarySpec,
    pub terminal_time: TerminalTimeSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
// Fieldless variants are written `{}` so that stray keys next to `kind` are rejected.
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DynamicsSpec {
    /// `ẋ = Ω(u) x` on `S² ⊂ R³` with two rotation generators.
    SphereRotation {},
    /// `ẋ = (A₀ + Σ uᵢ Aᵢ) x + b₀ + Σ uᵢ bᵢ`; matrices as lists of rows.
    Bilinear {
        #[serde(default)]
        drift: Option<Vec<Vec<f64>>>,
        #[serde(default)]
        drift_offset: Option<Vec<f64>>,
        input_matrices: Vec<Vec<Vec<f64>>>,
        #[serde(default)]
        input_offsets: Option<Vec<Vec<f64>>>,
    },
    /// One expression per state component over `x1..xN, u1..um`.
    Expressions {
        controls: usize,
        fields: Vec<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CostSpec {
    Time {},
    QuadraticControl { weight: f64 },
    Expression { integrand: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ControlSetSpec {
    Box { lower: Vec<f64>, upper: Vec<f64> },
    SymmetricBox { dim: usize, bound: f64 },
    Finite { points: Vec<Vec<f64>> },
    Product { factors: Vec<ControlSetSpec> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BoundarySpec {
    Point {
        point: Vec<f64>,
    },
    /// `M ∩ {s = 0}` for expressions `s` over `x1..xN`.
    Submanifold {
        constraints: Vec<String>,
        #[serde(default)]
        anchor: Option<Vec<f64>>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TerminalTimeSpec {
    Free {},
    Fixed { value: f64 },
}

/// A parsed file together with the problem it describes.
#[derive(Debug, Clone)]
pub struct LoadedProblem {
    pub file: ProblemFile,
    pub problem: ControlProblem,
}

fn invalid(msg: impl Into<String>) -> PmpError {
    PmpError::InvalidProblem(msg.into())
}

fn vector(values: &[f64], dim: usize, what: &str) -> Result<DVector<f64>> {
    if values.len() != dim {
        return Err(invalid(format!(
            "{what} has {} entries, expected {dim}",
            values.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(invalid(format!("{what} has a non-finite entry")));
    }
    Ok(DVector::from_column_slice(values))
}

fn matrix(rows: &[Vec<f64>], dim: usize, what: &str) -> Result<DMatrix<f64>> {
    if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
        return Err(invalid(format!("{what} must be {dim} x {dim}")));
    }
    Ok(DMatrix::from_fn(dim, dim, |i, j| rows[i][j]))
}

fn positive(value: f64, what: &str) -> Result<f64> {
    if value > 0.0 && value.is_finite() {
        Ok(value)
    } else {
        Err(invalid(format!("{what} must be positive, got {value}")))
    }
}

impl ManifoldSpec {
    pub fn ambient_dim(&self) -> usize {
        match self {
            ManifoldSpec::Sphere { dim, .. }
            | ManifoldSpec::Plane { dim, .. }
            | ManifoldSpec::Constraints { dim, .. } => *dim,
            ManifoldSpec::Torus { .. } => 3,
        }
    }

    /// Builds `M`. `anchors` are on-manifold points used to estimate the tube
    /// radius where neither the file nor the geometry fixes one.
    pub fn build(&self, anchors: &[DVector<f64>]) -> Result<EmbeddedManifold> {
        let with_tube = |c: Arc<dyn ConstraintMap>, tube: Option<f64>| match tube {
            Some(r) => EmbeddedManifold::new(c, positive(r, "tube_radius")?),
            None => EmbeddedManifold::with_estimated_tube(c, anchors),
        };
        match self {
            ManifoldSpec::Sphere {
                dim,
                radius,
                center,
                tube_radius,
            } => {
                let radius = positive(*radius, "sphere radius")?;
                let center = match center {
                    Some(c) => vector(c, *dim, "sphere center")?,
                    None => DVector::zeros(*dim),
                };
                // the closest-point map is smooth out to distance R; a tenth of that is ample
                let tube = tube_radius.unwrap_or(0.1 * radius);
                EmbeddedManifold::new(
                    Arc::new(SphereConstraint { center, radius }),
                    positive(tube, "tube_radius")?,
                )
            }
            ManifoldSpec::Plane { dim, tube_radius } => {
                if *dim < 2 {
                    return Err(invalid("plane needs dim ≥ 2"));
                }
                let plane = EmbeddedManifold::coordinate_plane(*dim);
                match tube_radius {
                    Some(r) => EmbeddedManifold::new(
                        plane.constraint().clone(),
                        positive(*r, "tube_radius")?,
                    ),
                    None => Ok(plane),
                }
            }
            ManifoldSpec::Torus {
                major_radius,
                minor_radius,
                tube_radius,
            } => {
                let big = positive(*major_radius, "major_radius")?;
                let small = positive(*minor_radius, "minor_radius")?;
                if small >= big {
                    return Err(invalid("torus needs minor_radius < major_radius"));
                }
                let source = format!(
                    "(x1^2 + x2^2 + x3^2 + {:?})^2 - {:?} * (x1^2 + x2^2)",
                    big * big - small * small,
                    4.0 * big * big
                );
                let c = Arc::new(ExpressionConstraint::parse(3, &[source])?);
                // the reach of the torus is min(r, R - r)
                let tube = tube_radius.unwrap_or(0.1 * small.min(big - small));
                EmbeddedManifold::new(c, positive(tube, "tube_radius")?)
            }
            ManifoldSpec::Constraints {
                dim,
                expressions,
                tube_radius,
            } => with_tube(
                Arc::new(ExpressionConstraint::parse(*dim, expressions)?),
                *tube_radius,
            ),
        }
    }
}

impl ControlSetSpec {
    pub fn build(&self) -> Result<ControlSet> {
        let set = match self {
            ControlSetSpec::Box { lower, upper } => {
                if lower.len() != upper.len() {
                    return Err(invalid("box bounds differ in length"));
                }
                ControlSet::Box {
                    lower: vector(lower, lower.len(), "box lower bound")?,
                    upper: vector(upper, upper.len(), "box upper bound")?,
                }
            }
            ControlSetSpec::SymmetricBox { dim, bound } => {
                ControlSet::symmetric_box(*dim, positive(*bound, "bound")?)
            }
            ControlSetSpec::Finite { points } => {
                let dim = points.first().map_or(0, Vec::len);
                ControlSet::Finite(
                    points
                        .iter()
                        .map(|p| vector(p, dim, "finite control point"))
                        .collect::<Result<_>>()?,
                )
            }
            ControlSetSpec::Product { factors } => ControlSet::Product(
                factors
                    .iter()
                    .map(ControlSetSpec::build)
                    .collect::<Result<_>>()?,
            ),
        };
        set.validate()?;
        Ok(set)
    }
}

impl DynamicsSpec {
    fn build(&self, n: usize, m: usize) -> Result<Arc<dyn Dynamics>> {
        Ok(match self {
            DynamicsSpec::SphereRotation {} => {
                if n != 3 || m != 2 {
                    return Err(invalid(
                        "sphere_rotation needs a manifold in R^3 and two controls",
                    ));
                }
                Arc::new(sphere_rotation_dynamics())
            }
            DynamicsSpec::Bilinear {
                drift,
                drift_offset,
                input_matrices,
                input_offsets,
            } => {
                let drift = match drift {
                    Some(a) => matrix(a, n, "drift")?,
                    None => DMatrix::zeros(n, n),
                };
                let drift_offset = match drift_offset {
                    Some(b) => vector(b, n, "drift_offset")?,
                    None => DVector::zeros(n),
                };
                let inputs = input_matrices
                    .iter()
                    .map(|a| matrix(a, n, "input matrix"))
                    .collect::<Result<Vec<_>>>()?;
                let offsets = match input_offsets {
                    Some(bs) => bs
                        .iter()
                        .map(|b| vector(b, n, "input offset"))
                        .collect::<Result<Vec<_>>>()?,
                    None => vec![DVector::zeros(n); inputs.len()],
                };
                Arc::new(BilinearDynamics::new(drift, drift_offset, inputs, offsets)?)
            }
            DynamicsSpec::Expressions { controls, fields } => {
                if *controls != m {
                    return Err(invalid(format!(
                        "dynamics declare {controls} controls but the control set has dimension {m}"
                    )));
                }
                Arc::new(ExpressionDynamics::parse(n, m, fields)?)
            }
        })
    }
}

impl CostSpec {
    fn build(&self, n: usize, m: usize) -> Result<Arc<dyn RunningCost>> {
        Ok(match self {
            CostSpec::Time {} => Arc::new(TimeCost),
            CostSpec::QuadraticControl { weight } => Arc::new(QuadraticControlCost {
                weight: positive(*weight, "weight")?,
            }),
            CostSpec::Expression { integrand } => Arc::new(ExpressionCost::parse(n, m, integrand)?),
        })
    }
}

impl BoundarySpec {
    fn build(&self, n: usize) -> Result<BoundaryCondition> {
        Ok(match self {
            BoundarySpec::Point { point } => {
                BoundaryCondition::Point(vector(point, n, "boundary point")?)
            }
            BoundarySpec::Submanifold {
                constraints,
                anchor,
            } => BoundaryCondition::Submanifold(BoundarySet {
                constraint: Arc::new(ExpressionConstraint::parse(n, constraints)?),
                anchor: anchor
                    .as_ref()
                    .map(|a| vector(a, n, "anchor"))
                    .transpose()?,
            }),
        })
    }

    fn anchor(&self) -> Option<&[f64]> {
        match self {
            BoundarySpec::Point { point } => Some(point),
            BoundarySpec::Submanifold { anchor, .. } => anchor.as_deref(),
        }
    }
}

impl ProblemFile {
    /// Parses and schema-checks the text without building the problem.
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text)
            .map_err(|e| PmpError::Parse(format!("line {}, column {}: {e}", e.line(), e.column())))
    }

    pub fn build(&self) -> Result<ControlProblem> {
        let n = self.manifold.ambient_dim();
        let sys = &self.system;
        let anchors: Vec<DVector<f64>> = [&sys.start, &sys.end]
            .into_iter()
            .filter_map(BoundarySpec::anchor)
            .filter(|a| a.len() == n)
            .map(DVector::from_column_slice)
            .collect();
        let manifold = self.manifold.build(&anchors)?;
        let controls = sys.controls.build()?;
        let m = controls.dim();
        let terminal_time = match sys.terminal_time {
            TerminalTimeSpec::Free {} => TerminalTime::Free,
            TerminalTimeSpec::Fixed { value } => {
                TerminalTime::Fixed(positive(value, "terminal time")?)
            }
        };
        ControlProblem::new(
            manifold,
            sys.dynamics.build(n, m)?,
            sys.cost.build(n, m)?,
            controls,
            sys.start.build(n)?,
            sys.end.build(n)?,
            terminal_time,
        )
    }

    pub fn load(text: &str) -> Result<LoadedProblem> {
        let file = Self::parse(text)?;
        let problem = file.build()?;
        Ok(LoadedProblem { file, problem })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("problem files serialize")
    }
}

/// Problem files shipped with the crate, by name.
pub const BUNDLED: &[(&str, &str)] = &[
    (
        "sphere_e1_to_e3",
        include_str!("../problems/sphere_e1_to_e3.json"),
    ),
    (
        "double_integrator",
        include_str!("../problems/double_integrator.json"),
    ),
    (
        "plane_chebyshev",
        include_str!("../problems/plane_chebyshev.json"),
    ),
    (
        "sphere_submanifold_target",
        include_str!("../problems/sphere_submanifold_target.json"),
    ),
];

/// Looks up a bundled file by name, with or without the `.json` suffix.
pub fn bundled(name: &str) -> Option<&'static str> {
    let stem = name.strip_suffix(".json").unwrap_or(name);
    BUNDLED
        .iter()
        .find(|(n, _)| *n == stem)
        .map(|(_, text)| *text)
}
