//! Ready-made problems used by the test suites and the examples in the README.

use crate::problem::{
    ControlBounds, GridSpec, Horizon, LagrangianSpec, NoiseSpec, Potential, Problem,
};

/// `L = ½|u|² + ½ Σ q_μ x_μ²` on the cube `[-half_width, half_width]^dim`,
/// controls in `[-u_bound, u_bound]^dim`.
pub fn linear_quadratic(
    q: &[f64],
    sigma: &[f64],
    horizon: Horizon,
    half_width: f64,
    n_points: usize,
    u_bound: f64,
) -> Problem {
    let dim = q.len();
    let mut weight = vec![vec![0.0; dim]; dim];
    for (i, row) in weight.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    Problem {
        dim,
        lagrangian: LagrangianSpec::QuadraticControl {
            control_weight: weight,
            potential: Potential::Harmonic {
                stiffness: q.to_vec(),
            },
        },
        noise: NoiseSpec {
            sigma: sigma.to_vec(),
        },
        horizon,
        control_bounds: ControlBounds {
            u_min: vec![-u_bound; dim],
            u_max: vec![u_bound; dim],
        },
        grid: GridSpec {
            lo: vec![-half_width; dim],
            hi: vec![half_width; dim],
            n_points: vec![n_points; dim],
        },
    }
}

/// The 1-D reference problem: `q = 1`, `σ = 1`, `τ ∈ [0, 1]` in 100 steps,
/// `x ∈ [-3, 3]` on 201 nodes, `|u| ≤ 5`.
pub fn reference_lq_1d() -> Problem {
    linear_quadratic(
        &[1.0],
        &[1.0],
        Horizon {
            tau_i: 0.0,
            tau_f: 1.0,
            n_steps: 100,
        },
        3.0,
        201,
        5.0,
    )
}

/// Zero potential on `[-3, 3]` per axis over the reference horizon: 201
/// points in one dimension, 21 per axis otherwise.
pub fn free_particle(sigma: &[f64]) -> Problem {
    let dim = sigma.len();
    let n_points = if dim == 1 { 201 } else { 21 };
    let mut p = linear_quadratic(
        &vec![0.0; dim],
        sigma,
        reference_lq_1d().horizon,
        3.0,
        n_points,
        5.0,
    );
    if let LagrangianSpec::QuadraticControl { potential, .. } = &mut p.lagrangian {
        *potential = Potential::Zero;
    }
    p
}
