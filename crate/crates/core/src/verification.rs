//! Independent checks on a solved problem.
//!
//! For `L = ½|u|² + ½ Σ q_μ x_μ²` the value function is separable and
//! quadratic, `J = ½ Σ P_μ(τ) x_μ² + c(τ)`, with
//!
//! ```text
//! P_μ(τ) = √q_μ tanh(√q_μ (τ_f − τ)),   c(τ) = ½ Σ_μ σ_μ² ln cosh(√q_μ (τ_f − τ))
//! ```
//!
//! which solves `P' = P² − q`, `c' = −½ Σ σ² P` backward from zero. The Monte
//! Carlo checks compare the solver against rollouts of its own policy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hjb::{backward_step, ValueFunction};
use crate::policy::PolicyField;
use crate::problem::{Horizon, LagrangianSpec, NoiseSpec, Potential, Problem};
use crate::sde::{estimate_action, estimate_segment, PolicyProvider, SimOptions};

/// Margin excluded from each side of every axis in interior error metrics.
pub const INTERIOR_MARGIN: f64 = 0.1;

/// Closed-form value function of a separable linear-quadratic problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiccatiSolution {
    pub q: Vec<f64>,
    pub sigma: NoiseSpec,
    pub horizon: Horizon,
}

impl RiccatiSolution {
    pub fn new(q: Vec<f64>, sigma: NoiseSpec, horizon: Horizon) -> Self {
        Self { q, sigma, horizon }
    }

    /// Oracle for `p`, which must have an identity control weight and a zero
    /// or non-negative harmonic potential.
    pub fn from_problem(p: &Problem) -> Result<Self> {
        let LagrangianSpec::QuadraticControl {
            control_weight,
            potential,
        } = &p.lagrangian
        else {
            return Err(Error::domain("lagrangian", "needs a quadratic-control Lagrangian"));
        };
        let identity = control_weight.iter().enumerate().all(|(i, row)| {
            row.iter()
                .enumerate()
                .all(|(j, &v)| v == if i == j { 1.0 } else { 0.0 })
        });
        if !identity {
            return Err(Error::domain(
                "lagrangian.control_weight",
                "closed form needs the identity matrix",
            ));
        }
        let q = match potential {
            Potential::Zero => vec![0.0; p.dim],
            Potential::Harmonic { stiffness } if stiffness.iter().all(|&q| q >= 0.0) => {
                stiffness.clone()
            }
            _ => {
                return Err(Error::domain(
                    "lagrangian.potential",
                    "closed form needs a zero or non-negative harmonic potential",
                ))
            }
        };
        Ok(Self::new(q, p.noise.clone(), p.horizon))
    }

    pub fn dim(&self) -> usize {
        self.q.len()
    }

    /// Quadratic coefficient `P_μ(τ)`.
    pub fn p_coeff(&self, axis: usize, tau: f64) -> f64 {
        let w = self.q[axis].sqrt();
        w * (w * (self.horizon.tau_f - tau)).tanh()
    }

    /// Offset `c(τ)`.
    pub fn offset(&self, tau: f64) -> f64 {
        let rem = self.horizon.tau_f - tau;
        self.q
            .iter()
            .zip(&self.sigma.sigma)
            .map(|(&q, &s)| 0.5 * s * s * ln_cosh(q.sqrt() * rem))
            .sum()
    }
}

/// `ln cosh(t)` without overflow for large `|t|`.
fn ln_cosh(t: f64) -> f64 {
    let a = t.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

/// `½ Σ P_μ(τ) x_μ² + c(τ)`.
pub fn riccati_value(sol: &RiccatiSolution, tau: f64, x: &[f64]) -> f64 {
    let quad: f64 = x
        .iter()
        .enumerate()
        .map(|(mu, &v)| sol.p_coeff(mu, tau) * v * v)
        .sum();
    0.5 * quad + sol.offset(tau)
}

/// The oracle sampled on every slice of a grid, shaped like a solver result.
pub fn riccati_on_grid(sol: &RiccatiSolution, grid: &crate::problem::GridSpec) -> ValueFunction {
    let values = (0..=sol.horizon.n_steps)
        .map(|k| {
            let tau = sol.horizon.time(k);
            (0..grid.len())
                .map(|flat| riccati_value(sol, tau, &grid.point(flat)))
                .collect()
        })
        .collect();
    ValueFunction {
        grid: grid.clone(),
        horizon: sol.horizon,
        values,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub max_abs_error: f64,
    pub mean_abs_error: f64,
    /// Same as `max_abs_error` but over nodes at least 10% of the axis length
    /// away from every edge.
    pub interior_max_abs_error: f64,
    /// `(slice, flat point)` of `max_abs_error`.
    pub location_of_max: (usize, usize),
}

fn interior_mask(grid: &crate::problem::GridSpec) -> Vec<bool> {
    let mut idx = vec![0; grid.dim()];
    (0..grid.len())
        .map(|flat| {
            grid.unravel(flat, &mut idx);
            idx.iter().enumerate().all(|(axis, &i)| {
                let width = grid.hi[axis] - grid.lo[axis];
                let x = grid.coord(axis, i);
                let slack = 1e-9 * width;
                x >= grid.lo[axis] + INTERIOR_MARGIN * width - slack
                    && x <= grid.hi[axis] - INTERIOR_MARGIN * width + slack
            })
        })
        .collect()
}

/// Pointwise errors of `vf` against the oracle over all slices and nodes.
pub fn compare_value(vf: &ValueFunction, sol: &RiccatiSolution) -> Result<ComparisonReport> {
    if vf.grid.dim() != sol.dim() {
        return Err(Error::Shape(format!(
            "value function has dim {}, oracle has dim {}",
            vf.grid.dim(),
            sol.dim()
        )));
    }
    if vf.horizon != sol.horizon || vf.values.len() != sol.horizon.n_steps + 1 {
        return Err(Error::Shape("horizons differ".into()));
    }
    let interior = interior_mask(&vf.grid);
    let points: Vec<Vec<f64>> = (0..vf.grid.len()).map(|f| vf.grid.point(f)).collect();
    let mut max = 0.0f64;
    let mut loc = (0, 0);
    let mut interior_max = 0.0f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for (k, slice) in vf.values.iter().enumerate() {
        if slice.len() != points.len() {
            return Err(Error::Shape(format!("slice {k} has the wrong length")));
        }
        let tau = vf.horizon.time(k);
        for (flat, (&v, x)) in slice.iter().zip(&points).enumerate() {
            let e = (v - riccati_value(sol, tau, x)).abs();
            if e > max {
                max = e;
                loc = (k, flat);
            }
            if interior[flat] {
                interior_max = interior_max.max(e);
            }
            total += e;
            count += 1;
        }
    }
    Ok(ComparisonReport {
        max_abs_error: max,
        mean_abs_error: total / count as f64,
        interior_max_abs_error: interior_max,
        location_of_max: loc,
    })
}

/// Max interior residual `|(step(J_oracle(τ+dτ)) − J_oracle(τ)) / dτ|` of one
/// solver sub-step applied to the oracle.
pub fn oracle_residual(p: &Problem, sol: &RiccatiSolution, tau: f64, dtau_sub: f64) -> Result<f64> {
    let g = &p.grid;
    let points: Vec<Vec<f64>> = (0..g.len()).map(|f| g.point(f)).collect();
    let next: Vec<f64> = points
        .iter()
        .map(|x| riccati_value(sol, tau + dtau_sub, x))
        .collect();
    let stepped = backward_step(p, &next, tau, dtau_sub)?;
    let interior = interior_mask(g);
    Ok(stepped
        .iter()
        .zip(&points)
        .zip(&interior)
        .filter(|(_, &inside)| inside)
        .map(|((&v, x), _)| ((v - riccati_value(sol, tau, x)) / dtau_sub).abs())
        .fold(0.0, f64::max))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BellmanCheck {
    pub tau: f64,
    pub tau_prime: f64,
    /// `J(τ, x0)`.
    pub lhs: f64,
    /// Mean of `∫_τ^τ' L ds + J(τ', x_τ')`.
    pub rhs_estimate: f64,
    pub std_error: f64,
    pub paths_clamped: usize,
}

fn step_of(h: &Horizon, tau: f64, name: &str) -> Result<usize> {
    if !h.contains(tau) {
        return Err(Error::domain(
            name,
            format!("{tau} not in [{}, {}]", h.tau_i, h.tau_f),
        ));
    }
    Ok(h.nearest_slice(tau))
}

/// Splits the cost-to-go at `τ'` and estimates the continuation by rollouts
/// of `policy`. Both times are rounded to the nearest slice.
#[allow(clippy::too_many_arguments)]
pub fn bellman_consistency(
    p: &Problem,
    vf: &ValueFunction,
    policy: &PolicyField,
    x0: &[f64],
    tau: f64,
    tau_prime: f64,
    n_paths: usize,
    seed: u64,
    opts: SimOptions,
) -> Result<BellmanCheck> {
    let k0 = step_of(&p.horizon, tau, "tau")?;
    let k1 = step_of(&p.horizon, tau_prime, "tau_prime")?;
    if k0 >= k1 {
        return Err(Error::domain(
            "tau_prime",
            format!("{tau_prime} must come after {tau} by at least one step"),
        ));
    }
    let t0 = p.horizon.time(k0);
    let t1 = p.horizon.time(k1);
    let lhs = vf.interpolate(t0, x0)?;
    let continuation = |x: &[f64]| vf.grid.interpolate(&vf.values[k1], x);
    let ens = estimate_segment(p, x0, k0, k1, policy, &continuation, n_paths, seed, opts)?;
    Ok(BellmanCheck {
        tau: t0,
        tau_prime: t1,
        lhs,
        rhs_estimate: ens.mean_cost,
        std_error: ens.std_error,
        paths_clamped: ens.paths_clamped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionCheck {
    /// `J(τ_i, x0)`.
    pub j_initial: f64,
    /// Monte Carlo expected action under the policy.
    pub s_estimate: f64,
    pub std_error: f64,
    pub paths_clamped: usize,
}

/// Compares `J(τ_i, x0)` with the expected action of rollouts under `policy`.
pub fn action_identity_check(
    p: &Problem,
    vf: &ValueFunction,
    policy: &dyn PolicyProvider,
    x0: &[f64],
    n_paths: usize,
    seed: u64,
    opts: SimOptions,
) -> Result<ActionCheck> {
    let j_initial = vf.interpolate(p.horizon.tau_i, x0)?;
    let ens = estimate_action(p, x0, policy, n_paths, seed, opts)?;
    Ok(ActionCheck {
        j_initial,
        s_estimate: ens.mean_cost,
        std_error: ens.std_error,
        paths_clamped: ens.paths_clamped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::GridSpec;

    fn horizon() -> Horizon {
        Horizon {
            tau_i: 0.0,
            tau_f: 1.0,
            n_steps: 100,
        }
    }

    /// RK4 on `P' = P² − q`, `c' = −½σ²P` backward from `(0, 0)`.
    fn ode_oracle(q: f64, sigma: f64, span: f64, x: f64) -> f64 {
        let n = 100_000;
        let h = span / n as f64;
        // in remaining time s = τ_f − τ: dP/ds = q − P², dc/ds = ½σ²P
        let f = |pv: f64| (q - pv * pv, 0.5 * sigma * sigma * pv);
        let (mut pv, mut c) = (0.0f64, 0.0f64);
        for _ in 0..n {
            let k1 = f(pv);
            let k2 = f(pv + 0.5 * h * k1.0);
            let k3 = f(pv + 0.5 * h * k2.0);
            let k4 = f(pv + h * k3.0);
            pv += h / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);
            c += h / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);
        }
        0.5 * pv * x * x + c
    }

    #[test]
    fn terminal_value_is_zero() {
        let sol = RiccatiSolution::new(vec![1.0, 2.0], NoiseSpec { sigma: vec![1.0, 0.3] }, horizon());
        assert_eq!(riccati_value(&sol, 1.0, &[1.3, -2.0]), 0.0);
    }

    #[test]
    fn closed_form_matches_ode_integration() {
        // frozen from an independent adaptive ODE integration (rtol 1e-13)
        let reference = 0.597_687_493_219_396;
        let sol = RiccatiSolution::new(vec![1.0], NoiseSpec { sigma: vec![1.0] }, horizon());
        assert!((ode_oracle(1.0, 1.0, 1.0, 1.0) - reference).abs() < 1e-12);
        assert!((riccati_value(&sol, 0.0, &[1.0]) - reference).abs() < 1e-14);

        let quiet = RiccatiSolution::new(vec![1.0], NoiseSpec { sigma: vec![0.0] }, horizon());
        assert!((riccati_value(&quiet, 0.0, &[1.0]) - 0.380_797_077_977_882_4).abs() < 1e-14);

        for (q, s, span, x) in [(4.0, 0.5, 0.7, -1.2), (0.25, 2.0, 1.0, 2.0), (9.0, 1.0, 0.3, 0.4)] {
            let sol = RiccatiSolution::new(vec![q], NoiseSpec { sigma: vec![s] }, horizon());
            let got = riccati_value(&sol, 1.0 - span, &[x]);
            assert!((got - ode_oracle(q, s, span, x)).abs() < 1e-10, "q={q}");
        }
    }

    #[test]
    fn two_dimensional_oracle_is_separable() {
        let a = RiccatiSolution::new(vec![1.0], NoiseSpec { sigma: vec![0.5] }, horizon());
        let b = RiccatiSolution::new(vec![3.0], NoiseSpec { sigma: vec![1.5] }, horizon());
        let ab = RiccatiSolution::new(
            vec![1.0, 3.0],
            NoiseSpec {
                sigma: vec![0.5, 1.5],
            },
            horizon(),
        );
        for tau in [0.0, 0.3, 0.99] {
            let (x, y) = (0.7, -1.1);
            let sum = riccati_value(&a, tau, &[x]) + riccati_value(&b, tau, &[y]);
            assert!((riccati_value(&ab, tau, &[x, y]) - sum).abs() < 1e-14);
        }
    }

    #[test]
    fn oracle_against_itself_has_no_error() {
        let sol = RiccatiSolution::new(vec![1.0], NoiseSpec { sigma: vec![1.0] }, horizon());
        let grid = GridSpec {
            lo: vec![-3.0],
            hi: vec![3.0],
            n_points: vec![61],
        };
        let vf = riccati_on_grid(&sol, &grid);
        let r = compare_value(&vf, &sol).unwrap();
        assert_eq!(r.max_abs_error, 0.0);
        assert_eq!(r.interior_max_abs_error, 0.0);
        assert_eq!(r.mean_abs_error, 0.0);
    }

    #[test]
    fn interior_excludes_margins() {
        let grid = GridSpec {
            lo: vec![-3.0],
            hi: vec![3.0],
            n_points: vec![201],
        };
        let mask = interior_mask(&grid);
        assert_eq!(mask.iter().filter(|&&m| m).count(), 161);
        assert!(!mask[19] && mask[20] && mask[180] && !mask[181]);
    }

    #[test]
    fn ln_cosh_is_stable() {
        assert!((ln_cosh(1.0) - 1f64.cosh().ln()).abs() < 1e-15);
        assert!((ln_cosh(800.0) - (800.0 - std::f64::consts::LN_2)).abs() < 1e-9);
        assert_eq!(ln_cosh(0.0), 0.0);
    }
}
