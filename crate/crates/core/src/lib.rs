//! Stochastic optimal control on a grid.
//!
//! The controlled process `dx = u dτ + σ ⊙ dW` with running cost `L(τ, x, u)`
//! has optimal cost-to-go `J(τ, x)` solving
//!
//! ```text
//! -∂τ J = min_u [ L + uᵀ∇J + ½ Σ_μ σ_μ² ∂_μμ J ],   J(τ_f, x) = 0,
//! ```
//!
//! with optimal feedback `u*(τ, x) = argmin_u [L + uᵀ∇J]`.
//!
//! * [`problem`] holds the problem description and its validation.
//! * [`hjb`] integrates the equation backward with an explicit upwind scheme.
//! * [`policy`] extracts and interpolates the optimal feedback.
//! * [`sde`] simulates the process and estimates expectations by Monte Carlo.
//! * [`verification`] carries the closed-form linear-quadratic oracle and the
//!   rollout-based consistency checks.
//! * [`io`] reads and writes the on-disk layouts.

pub mod error;
pub mod hjb;
pub mod io;
pub mod policy;
pub mod presets;
pub mod problem;
pub mod sde;
pub mod verification;

pub use error::{Error, Result};
pub use hjb::{
    backward_step, cfl_dtau, hamiltonian_value, minimize_hamiltonian, node_stencil, solve,
    HamiltonianSample, SolveReport, StencilSample, ValueFunction,
};
pub use policy::{extract_policy, query_policy, PerturbedPolicy, PolicyField};
pub use problem::{
    eval_lagrangian, quadratic_form, validate_problem, ControlBounds, GridSpec, Horizon,
    LagrangianSpec, NoiseSpec, Potential, Problem, TabulatedLagrangian, ValidationReport,
};
pub use sde::{
    em_step, estimate_action, estimate_moments, estimate_segment, simulate_path, ConstantPolicy,
    FnPolicy, MomentReport, Path, PathEnsemble, PolicyProvider, RngStream, SimOptions,
};
pub use verification::{
    action_identity_check, bellman_consistency, compare_value, riccati_value, ActionCheck,
    BellmanCheck, ComparisonReport, RiccatiSolution,
};
