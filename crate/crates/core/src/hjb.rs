//! Backward explicit finite-difference solver for the stochastic HJB equation
//!
//! ```text
//! -∂τ J = min_u [ L(τ, x, u) + uᵀ∇J + ½ Σ_μ σ_μ² ∂_μμ J ],   J(τ_f, ·) = 0
//! ```
//!
//! Each horizon step is split into equal sub-steps below the CFL bound. A
//! sub-step evaluates derivatives on the later slice: the minimizing control
//! is first found with central gradients, its sign picks the upwind one-sided
//! difference per axis, and the Hamiltonian is minimized again with the
//! upwinded gradient; an axis whose new control contradicts its one-sided
//! difference drops its advection term. Second derivatives are central; on an
//! edge node the second difference of the adjacent interior node is reused.

use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::{
    control_cost, validate_problem, weight_matrix, GridSpec, Horizon, LagrangianSpec, Potential,
    Problem, TabulatedLagrangian, MAX_DIM,
};

/// Fraction of the stability limit actually used.
pub const CFL_SAFETY_FACTOR: f64 = 0.9;

/// Below this many grid points a sub-step runs on the calling thread.
const PAR_THRESHOLD: usize = 4096;

/// Cost-to-go sampled on every horizon slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueFunction {
    pub grid: GridSpec,
    pub horizon: Horizon,
    /// `n_steps + 1` slices of `grid.len()` values.
    pub values: Vec<Vec<f64>>,
}

impl ValueFunction {
    pub fn slice(&self, k: usize) -> &[f64] {
        &self.values[k]
    }

    /// `J` at `(τ, x)`: nearest slice in time, multilinear in space.
    pub fn interpolate(&self, tau: f64, x: &[f64]) -> Result<f64> {
        if !self.horizon.contains(tau) {
            return Err(Error::domain(
                "tau",
                format!(
                    "{tau} not in [{}, {}]",
                    self.horizon.tau_i, self.horizon.tau_f
                ),
            ));
        }
        if !self.grid.contains(x) {
            return Err(Error::domain("x", format!("{x:?} outside the grid")));
        }
        let k = self.horizon.nearest_slice(tau);
        Ok(self.grid.interpolate(&self.values[k], x))
    }
}

/// Minimizing control and minimized Hamiltonian at one node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HamiltonianSample {
    pub u_star: Vec<f64>,
    pub h_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    /// Sub-step actually taken.
    pub cfl_dtau_used: f64,
    /// Stability bound from [`cfl_dtau`].
    pub cfl_dtau_bound: f64,
    pub n_substeps_per_slice: usize,
    /// `max |J(τ_k) − J(τ_{k+1})|` for `k = 0..n_steps`.
    pub max_update_per_slice: Vec<f64>,
    pub wall_time: f64,
}

/// Derivatives of one slice at one node, as the solver sees them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StencilSample {
    /// Upwinded gradient used in the final minimization.
    pub gradient: Vec<f64>,
    pub central_gradient: Vec<f64>,
    pub second: Vec<f64>,
    pub hamiltonian: HamiltonianSample,
}

enum CostKind<'a> {
    Quadratic {
        weight: &'a [Vec<f64>],
        inverse: DMatrix<f64>,
        diagonal: bool,
        potential: &'a Potential,
    },
    Tabulated(&'a TabulatedLagrangian),
}

/// Precomputed pieces of the Hamiltonian for one problem.
pub(crate) struct Hamiltonian<'a> {
    p: &'a Problem,
    cost: CostKind<'a>,
    half_sigma_sq: Vec<f64>,
}

impl<'a> Hamiltonian<'a> {
    pub(crate) fn new(p: &'a Problem) -> Result<Self> {
        let cost = match &p.lagrangian {
            LagrangianSpec::QuadraticControl {
                control_weight,
                potential,
            } => {
                let r = weight_matrix(control_weight);
                let inverse = r.clone().cholesky().map(|c| c.inverse()).ok_or_else(|| {
                    Error::domain("lagrangian.control_weight", "not positive-definite")
                })?;
                let diagonal = (0..p.dim)
                    .all(|i| (0..p.dim).all(|j| i == j || control_weight[i][j] == 0.0));
                CostKind::Quadratic {
                    weight: control_weight,
                    inverse,
                    diagonal,
                    potential,
                }
            }
            LagrangianSpec::Tabulated(f) => CostKind::Tabulated(f),
        };
        Ok(Self {
            p,
            cost,
            half_sigma_sq: p.noise.sigma.iter().map(|s| 0.5 * s * s).collect(),
        })
    }

    #[inline]
    fn lagrangian(&self, tau: f64, flat: usize, x: &[f64], u: &[f64]) -> f64 {
        match &self.cost {
            CostKind::Quadratic {
                weight, potential, ..
            } => {
                let v = match potential {
                    Potential::Mesh { values } => values[flat],
                    other => other.eval(&self.p.grid, x),
                };
                control_cost(weight, u) + v
            }
            CostKind::Tabulated(f) => f.eval(tau, x, u),
        }
    }

    #[inline]
    fn diffusion(&self, second: &[f64]) -> f64 {
        self.half_sigma_sq
            .iter()
            .zip(second)
            .map(|(a, b)| a * b)
            .sum()
    }

    #[inline]
    fn value(&self, tau: f64, flat: usize, x: &[f64], u: &[f64], grad: &[f64], second: &[f64]) -> f64 {
        let adv: f64 = u.iter().zip(grad).map(|(a, b)| a * b).sum();
        self.lagrangian(tau, flat, x, u) + adv + self.diffusion(second)
    }

    fn minimize(
        &self,
        tau: f64,
        flat: usize,
        x: &[f64],
        grad: &[f64],
        second: &[f64],
    ) -> HamiltonianSample {
        let dim = self.p.dim;
        let b = &self.p.control_bounds;
        let mut u = vec![0.0; dim];
        match &self.cost {
            CostKind::Quadratic {
                weight,
                inverse,
                diagonal,
                ..
            } => {
                for (i, ui) in u.iter_mut().enumerate() {
                    *ui = -(0..dim).map(|j| inverse[(i, j)] * grad[j]).sum::<f64>();
                }
                if !b.contains(&u) {
                    if *diagonal {
                        b.clip(&mut u);
                    } else {
                        box_qp(weight, grad, &b.u_min, &b.u_max, &mut u);
                    }
                }
            }
            CostKind::Tabulated(_) => {
                let f = |v: &[f64]| self.value(tau, flat, x, v, grad, second);
                golden_box_search(&f, &b.u_min, &b.u_max, &mut u);
            }
        }
        for ui in u.iter_mut() {
            // no negative zeros in stored controls
            *ui += 0.0;
        }
        let h_value = self.value(tau, flat, x, &u, grad, second);
        HamiltonianSample { u_star: u, h_value }
    }

    /// Derivatives of `slice` at node `flat` and the upwinded minimization.
    fn node(&self, slice: &[f64], tau: f64, flat: usize, scratch: &mut NodeScratch) -> HamiltonianSample {
        let g = &self.p.grid;
        let dim = self.p.dim;
        g.unravel(flat, &mut scratch.idx[..dim]);
        for axis in 0..dim {
            scratch.x[axis] = g.coord(axis, scratch.idx[axis]);
        }
        stencil(g, slice, flat, &scratch.idx[..dim], &mut scratch.d);
        let x = &scratch.x[..dim];
        let d = &scratch.d;
        let first = self.minimize(tau, flat, x, &d.central[..dim], &d.second[..dim]);
        for axis in 0..dim {
            let u = first.u_star[axis];
            scratch.grad[axis] = if u > 0.0 {
                d.forward[axis]
            } else if u < 0.0 {
                d.backward[axis]
            } else {
                d.central[axis]
            };
        }
        let second = self.minimize(tau, flat, x, &scratch.grad[..dim], &d.second[..dim]);
        // A one-sided difference is only consistent with a control pointing
        // to that side; otherwise the axis carries no advection.
        let mut inconsistent = false;
        for axis in 0..dim {
            let (u0, u1) = (first.u_star[axis], second.u_star[axis]);
            if (u0 > 0.0 && u1 <= 0.0) || (u0 < 0.0 && u1 >= 0.0) {
                scratch.grad[axis] = 0.0;
                inconsistent = true;
            }
        }
        if inconsistent {
            self.minimize(tau, flat, x, &scratch.grad[..dim], &d.second[..dim])
        } else {
            second
        }
    }
}

#[derive(Default)]
struct Derivatives {
    forward: [f64; MAX_DIM],
    backward: [f64; MAX_DIM],
    central: [f64; MAX_DIM],
    second: [f64; MAX_DIM],
}

#[derive(Default)]
struct NodeScratch {
    idx: [usize; MAX_DIM],
    x: [f64; MAX_DIM],
    grad: [f64; MAX_DIM],
    d: Derivatives,
}

fn stencil(g: &GridSpec, slice: &[f64], flat: usize, idx: &[usize], d: &mut Derivatives) {
    let strides = strides_of(g);
    for (axis, &i) in idx.iter().enumerate() {
        let n = g.n_points[axis];
        let s = strides[axis];
        let h = g.spacing(axis);
        let j = slice[flat];
        if i == 0 {
            let (j1, j2) = (slice[flat + s], slice[flat + 2 * s]);
            let fd = (j1 - j) / h;
            d.forward[axis] = fd;
            d.backward[axis] = fd;
            d.central[axis] = fd;
            d.second[axis] = (j2 - 2.0 * j1 + j) / (h * h);
        } else if i + 1 == n {
            let (j1, j2) = (slice[flat - s], slice[flat - 2 * s]);
            let bd = (j - j1) / h;
            d.forward[axis] = bd;
            d.backward[axis] = bd;
            d.central[axis] = bd;
            d.second[axis] = (j - 2.0 * j1 + j2) / (h * h);
        } else {
            let (jp, jm) = (slice[flat + s], slice[flat - s]);
            d.forward[axis] = (jp - j) / h;
            d.backward[axis] = (j - jm) / h;
            d.central[axis] = (jp - jm) / (2.0 * h);
            d.second[axis] = (jp - 2.0 * j + jm) / (h * h);
        }
    }
}

fn strides_of(g: &GridSpec) -> [usize; MAX_DIM] {
    let mut out = [0; MAX_DIM];
    for (o, s) in out.iter_mut().zip(g.strides()) {
        *o = s;
    }
    out
}

/// Minimizes `½ uᵀRu + gᵀu` over a box by projected Gauss–Seidel.
fn box_qp(r: &[Vec<f64>], g: &[f64], lo: &[f64], hi: &[f64], u: &mut [f64]) {
    for (i, ui) in u.iter_mut().enumerate() {
        *ui = ui.clamp(lo[i], hi[i]);
    }
    for _ in 0..10_000 {
        let mut change = 0.0f64;
        for i in 0..u.len() {
            let off: f64 = (0..u.len()).filter(|&j| j != i).map(|j| r[i][j] * u[j]).sum();
            let next = (-(g[i] + off) / r[i][i]).clamp(lo[i], hi[i]);
            change = change.max((next - u[i]).abs());
            u[i] = next;
        }
        if change <= 1e-15 {
            break;
        }
    }
}

const GOLDEN_ROUNDS: usize = 3;
const GOLDEN_TOL: f64 = 1e-6;
const REFINE_STEPS: i32 = 10;

/// Golden-section search of a unimodal `f` on `[a, b]`.
fn golden_section(f: &mut dyn FnMut(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > tol {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    // best of the final bracket, endpoints included
    let mid = 0.5 * (a + b);
    let mut best = (f(mid), mid);
    for t in [a, b] {
        let v = f(t);
        if v < best.0 {
            best = (v, t);
        }
    }
    best.1
}

/// Coordinatewise golden-section rounds followed by a local scan; the origin
/// wins ties.
fn golden_box_search(f: &dyn Fn(&[f64]) -> f64, lo: &[f64], hi: &[f64], u: &mut [f64]) {
    let dim = u.len();
    u.iter_mut().for_each(|v| *v = 0.0);
    let mut trial = u.to_vec();
    for _ in 0..GOLDEN_ROUNDS {
        for axis in 0..dim {
            trial.copy_from_slice(u);
            let mut line = |t: f64| {
                trial[axis] = t;
                f(&trial)
            };
            u[axis] = golden_section(&mut line, lo[axis], hi[axis], GOLDEN_TOL);
        }
    }
    let mut best = f(u);
    for axis in 0..dim {
        let centre = u[axis];
        for k in -REFINE_STEPS..=REFINE_STEPS {
            let t = (centre + k as f64 * GOLDEN_TOL * 0.1).clamp(lo[axis], hi[axis]);
            trial.copy_from_slice(u);
            trial[axis] = t;
            let v = f(&trial);
            if v < best {
                best = v;
                u[axis] = t;
            }
        }
    }
    let zero = vec![0.0; dim];
    if f(&zero) <= best {
        u.copy_from_slice(&zero);
    }
}

fn check_node(p: &Problem, x_index: &[usize]) -> Result<usize> {
    if x_index.len() != p.dim {
        return Err(Error::Shape(format!(
            "grid index has {} components, problem has dim {}",
            x_index.len(),
            p.dim
        )));
    }
    for (axis, (&i, &n)) in x_index.iter().zip(&p.grid.n_points).enumerate() {
        if i >= n {
            return Err(Error::domain(
                format!("x_index[{axis}]"),
                format!("{i} not below {n}"),
            ));
        }
    }
    Ok(p.grid.ravel(x_index))
}

fn check_derivatives(dim: usize, grad: &[f64], second: &[f64]) -> Result<()> {
    if grad.len() != dim || second.len() != dim {
        return Err(Error::Shape(format!(
            "derivative vectors must have {dim} components"
        )));
    }
    for (name, v) in [("gradJ", grad), ("lapJ", second)] {
        if let Some(i) = v.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                what: format!("{name}[{i}] = {}", v[i]),
            });
        }
    }
    Ok(())
}

/// Minimizes `L + uᵀ∇J + ½Σσ²∂_μμJ` over the control box at grid node
/// `x_index`, given the derivative samples.
pub fn minimize_hamiltonian(
    p: &Problem,
    tau: f64,
    x_index: &[usize],
    grad: &[f64],
    second: &[f64],
) -> Result<HamiltonianSample> {
    let flat = check_node(p, x_index)?;
    check_derivatives(p.dim, grad, second)?;
    let x = p.grid.point(flat);
    Ok(Hamiltonian::new(p)?.minimize(tau, flat, &x, grad, second))
}

/// The Hamiltonian at an arbitrary control `u`, for probing the minimizer.
pub fn hamiltonian_value(
    p: &Problem,
    tau: f64,
    x_index: &[usize],
    u: &[f64],
    grad: &[f64],
    second: &[f64],
) -> Result<f64> {
    let flat = check_node(p, x_index)?;
    check_derivatives(p.dim, grad, second)?;
    let x = p.grid.point(flat);
    Ok(Hamiltonian::new(p)?.value(tau, flat, &x, u, grad, second))
}

/// Derivatives and upwinded minimization of `slice` at node `flat`, exactly
/// as a solver sub-step starting from `slice` computes them.
pub fn node_stencil(p: &Problem, slice: &[f64], tau: f64, flat: usize) -> Result<StencilSample> {
    check_slice(p, slice)?;
    if flat >= p.grid.len() {
        return Err(Error::domain("flat index", format!("{flat} >= {}", p.grid.len())));
    }
    let ham = Hamiltonian::new(p)?;
    let mut s = NodeScratch::default();
    let hamiltonian = ham.node(slice, tau, flat, &mut s);
    let dim = p.dim;
    Ok(StencilSample {
        gradient: s.grad[..dim].to_vec(),
        central_gradient: s.d.central[..dim].to_vec(),
        second: s.d.second[..dim].to_vec(),
        hamiltonian,
    })
}

/// Optimal controls of a whole slice, interleaved `dim` per node.
pub(crate) fn slice_controls(ham: &Hamiltonian<'_>, slice: &[f64], tau: f64) -> Vec<f64> {
    let dim = ham.p.dim;
    let n = ham.p.grid.len();
    let per_node = |flat: usize| {
        let mut s = NodeScratch::default();
        ham.node(slice, tau, flat, &mut s).u_star
    };
    let nodes: Vec<Vec<f64>> = if n >= PAR_THRESHOLD {
        (0..n).into_par_iter().map(per_node).collect()
    } else {
        (0..n).map(per_node).collect()
    };
    let mut out = Vec::with_capacity(n * dim);
    for u in nodes {
        out.extend_from_slice(&u);
    }
    out
}

fn check_slice(p: &Problem, slice: &[f64]) -> Result<()> {
    if slice.len() != p.grid.len() {
        return Err(Error::Shape(format!(
            "slice has {} values, grid has {}",
            slice.len(),
            p.grid.len()
        )));
    }
    Ok(())
}

/// Stability bound `0.9 / Σ_μ (U_μ/dx_μ + σ_μ²/dx_μ²)` for one explicit
/// sub-step. A problem with nothing to stabilize gets the horizon step.
pub fn cfl_dtau(p: &Problem) -> Result<f64> {
    let g = &p.grid;
    if g.dim() != p.dim || p.noise.sigma.len() != p.dim || p.control_bounds.u_min.len() != p.dim {
        return Err(Error::Invalid(validate_problem(p)));
    }
    let mut rate = 0.0;
    for axis in 0..p.dim {
        let dx = if g.n_points[axis] >= 2 {
            g.spacing(axis)
        } else {
            0.0
        };
        if !(dx > 0.0 && dx.is_finite()) {
            return Err(Error::Invalid(validate_problem(p)));
        }
        let s = p.noise.sigma[axis];
        rate += p.control_bounds.speed(axis) / dx + s * s / (dx * dx);
    }
    if rate == 0.0 {
        Ok(p.dtau())
    } else {
        Ok(CFL_SAFETY_FACTOR / rate)
    }
}

fn substep_into(
    ham: &Hamiltonian<'_>,
    next: &[f64],
    tau: f64,
    dtau: f64,
    out: &mut [f64],
) {
    let update = |(flat, o): (usize, &mut f64)| {
        let mut s = NodeScratch::default();
        let h = ham.node(next, tau, flat, &mut s).h_value;
        *o = next[flat] + dtau * h;
    };
    if out.len() >= PAR_THRESHOLD {
        out.par_iter_mut().enumerate().for_each(update);
    } else {
        out.iter_mut().enumerate().for_each(update);
    }
}

/// One explicit sub-step: `J(τ) = J(τ+dτ') + dτ'·min_u H` with derivatives
/// taken from `slice_next`.
pub fn backward_step(p: &Problem, slice_next: &[f64], tau: f64, dtau_sub: f64) -> Result<Vec<f64>> {
    check_slice(p, slice_next)?;
    if let Some(i) = slice_next.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: format!("slice_next[{i}]"),
        });
    }
    let bound = cfl_dtau(p)?;
    if dtau_sub.is_nan() || dtau_sub <= 0.0 || dtau_sub > bound * (1.0 + 1e-12) {
        return Err(Error::Stability { dtau_sub, bound });
    }
    let ham = Hamiltonian::new(p)?;
    let mut out = vec![0.0; slice_next.len()];
    substep_into(&ham, slice_next, tau, dtau_sub, &mut out);
    Ok(out)
}

/// Integrates backward from `J(τ_f) = 0` over the whole horizon.
pub fn solve(p: &Problem) -> Result<(ValueFunction, SolveReport)> {
    let report = validate_problem(p);
    if !report.is_valid() {
        return Err(Error::Invalid(report));
    }
    let start = Instant::now();
    let h = p.horizon;
    let bound = cfl_dtau(p)?;
    let dtau = h.dtau();
    let n_sub = ((dtau / bound).ceil() as usize).max(1);
    let dtau_sub = dtau / n_sub as f64;
    let ham = Hamiltonian::new(p)?;

    let n = p.grid.len();
    let mut values = vec![Vec::new(); h.n_steps + 1];
    values[h.n_steps] = vec![0.0; n];
    let mut max_update = vec![0.0; h.n_steps];
    let mut cur = vec![0.0; n];
    let mut scratch = vec![0.0; n];
    for k in (0..h.n_steps).rev() {
        cur.copy_from_slice(&values[k + 1]);
        let t_next = h.time(k + 1);
        for s in 0..n_sub {
            let tau = if s + 1 == n_sub {
                h.time(k)
            } else {
                t_next - (s + 1) as f64 * dtau_sub
            };
            substep_into(&ham, &cur, tau, dtau_sub, &mut scratch);
            std::mem::swap(&mut cur, &mut scratch);
        }
        if let Some(point) = cur.iter().position(|v| !v.is_finite()) {
            return Err(Error::Divergence { slice: k, point });
        }
        max_update[k] = cur
            .iter()
            .zip(&values[k + 1])
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        values[k] = cur.clone();
    }
    let vf = ValueFunction {
        grid: p.grid.clone(),
        horizon: h,
        values,
    };
    Ok((
        vf,
        SolveReport {
            cfl_dtau_used: dtau_sub,
            cfl_dtau_bound: bound,
            n_substeps_per_slice: n_sub,
            max_update_per_slice: max_update,
            wall_time: start.elapsed().as_secs_f64(),
        },
    ))
}
