//! Pontryagin maximum principle on embedded manifolds via an ambient tube extension.

pub mod error;
pub mod expr;
pub mod flow;
pub mod hamiltonian;
pub mod intrinsic;
pub mod manifold;
pub mod numdiff;
pub mod problem;
pub mod shooting;
pub mod system;
pub mod trajectory;
pub mod verifier;

pub use error::{PmpError, Result};
pub use flow::{flow_extremal, simulate, ControlPolicy, ControlSchedule, Extremal, FlowOptions};
pub use hamiltonian::{
    ambient_vector_field, hamiltonian, maximize_hamiltonian, AdjointState, Maximizer,
};
pub use manifold::{Covector, EmbeddedManifold, TangentFrame};
pub use problem::ProblemFile;
pub use shooting::{shooting_residual, solve_pmp, PmpSolution, ShootingUnknowns, SolverConfig};
pub use system::{BoundaryCondition, ControlProblem, ControlSet, TerminalTime};
pub use trajectory::{read_extremal, verify_external, write_extremal};
pub use verifier::{verify, PmpCertificate, Tolerances};
