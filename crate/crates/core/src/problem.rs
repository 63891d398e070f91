//! Problem description: Lagrangian, noise, horizon, control box and grid.
//!
//! The dynamics are `dx = u dτ + σ ⊙ dW` with a diagonal noise amplitude per
//! coordinate. A [`Problem`] is plain data; [`validate_problem`] collects every
//! invariant violation instead of stopping at the first one.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest supported state dimension.
pub const MAX_DIM: usize = 4;
/// Upper limit on the number of grid points in one time slice.
pub const MAX_GRID_POINTS: usize = 2_000_000;

/// Full description of one stochastic control problem.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Problem {
    pub dim: usize,
    pub lagrangian: LagrangianSpec,
    pub noise: NoiseSpec,
    pub horizon: Horizon,
    pub control_bounds: ControlBounds,
    pub grid: GridSpec,
}

/// Running cost `L(τ, x, u)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LagrangianSpec {
    /// `L = ½ uᵀ R u + V(x, τ)`.
    QuadraticControl {
        control_weight: Vec<Vec<f64>>,
        potential: Potential,
    },
    /// Arbitrary scalar cost supplied through the library API.
    #[serde(skip)]
    Tabulated(TabulatedLagrangian),
}

/// State cost `V(x)` of a quadratic-control Lagrangian.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Potential {
    Zero,
    /// `V = ½ Σ q_μ x_μ²`.
    Harmonic { stiffness: Vec<f64> },
    /// Node values on the problem grid (row-major, last axis fastest),
    /// multilinearly interpolated between nodes.
    Mesh { values: Vec<f64> },
}

type LagrangianFn = dyn Fn(f64, &[f64], &[f64]) -> f64 + Send + Sync;

/// A Lagrangian given as a callable of `(τ, x, u)`.
#[derive(Clone)]
pub struct TabulatedLagrangian(Arc<LagrangianFn>);

impl TabulatedLagrangian {
    pub fn new(f: impl Fn(f64, &[f64], &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Self(Arc::new(f))
    }

    #[inline]
    pub fn eval(&self, tau: f64, x: &[f64], u: &[f64]) -> f64 {
        (self.0)(tau, x, u)
    }
}

impl fmt::Debug for TabulatedLagrangian {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("TabulatedLagrangian(..)")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub sigma: Vec<f64>,
}

impl NoiseSpec {
    pub fn is_deterministic(&self) -> bool {
        self.sigma.iter().all(|&s| s == 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Horizon {
    pub tau_i: f64,
    pub tau_f: f64,
    pub n_steps: usize,
}

impl Horizon {
    pub fn dtau(&self) -> f64 {
        (self.tau_f - self.tau_i) / self.n_steps as f64
    }

    /// Time of slice `k`; the last slice is `tau_f` exactly.
    pub fn time(&self, k: usize) -> f64 {
        if k == self.n_steps {
            self.tau_f
        } else {
            self.tau_i + k as f64 * self.dtau()
        }
    }

    /// Index of the slice nearest to `tau`, clamped to the horizon.
    pub fn nearest_slice(&self, tau: f64) -> usize {
        let s = ((tau - self.tau_i) / self.dtau()).round();
        if s <= 0.0 {
            0
        } else {
            (s as usize).min(self.n_steps)
        }
    }

    pub fn contains(&self, tau: f64) -> bool {
        let slack = 1e-12 * (self.tau_f - self.tau_i).abs().max(1.0);
        tau >= self.tau_i - slack && tau <= self.tau_f + slack
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlBounds {
    pub u_min: Vec<f64>,
    pub u_max: Vec<f64>,
}

impl ControlBounds {
    pub fn contains(&self, u: &[f64]) -> bool {
        u.iter()
            .zip(self.u_min.iter().zip(&self.u_max))
            .all(|(&v, (&lo, &hi))| v >= lo && v <= hi)
    }

    pub fn clip(&self, u: &mut [f64]) {
        for (v, (&lo, &hi)) in u.iter_mut().zip(self.u_min.iter().zip(&self.u_max)) {
            *v = v.clamp(lo, hi);
        }
    }

    /// Largest control speed per axis.
    pub fn speed(&self, axis: usize) -> f64 {
        self.u_min[axis].abs().max(self.u_max[axis].abs())
    }
}

/// Regular tensor grid. Flat indices are row-major with the last axis fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub n_points: Vec<usize>,
}

impl GridSpec {
    pub fn dim(&self) -> usize {
        self.n_points.len()
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        (self.hi[axis] - self.lo[axis]) / (self.n_points[axis] - 1) as f64
    }

    pub fn len(&self) -> usize {
        self.n_points.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.dim()];
        for axis in (0..self.dim().saturating_sub(1)).rev() {
            strides[axis] = strides[axis + 1] * self.n_points[axis + 1];
        }
        strides
    }

    pub fn coord(&self, axis: usize, i: usize) -> f64 {
        if i + 1 == self.n_points[axis] {
            self.hi[axis]
        } else {
            self.lo[axis] + i as f64 * self.spacing(axis)
        }
    }

    pub fn unravel(&self, mut flat: usize, idx: &mut [usize]) {
        for axis in (0..self.dim()).rev() {
            idx[axis] = flat % self.n_points[axis];
            flat /= self.n_points[axis];
        }
    }

    pub fn ravel(&self, idx: &[usize]) -> usize {
        idx.iter()
            .zip(&self.n_points)
            .fold(0, |acc, (&i, &n)| acc * n + i)
    }

    /// Coordinates of the grid node with flat index `flat`.
    pub fn point(&self, flat: usize) -> Vec<f64> {
        let mut idx = vec![0; self.dim()];
        self.unravel(flat, &mut idx);
        idx.iter()
            .enumerate()
            .map(|(axis, &i)| self.coord(axis, i))
            .collect()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(&v, (&lo, &hi))| v >= lo && v <= hi)
    }

    /// Clamps `x` into the domain; returns whether any component moved.
    pub fn clamp(&self, x: &mut [f64]) -> bool {
        let mut moved = false;
        for (v, (&lo, &hi)) in x.iter_mut().zip(self.lo.iter().zip(&self.hi)) {
            let c = v.clamp(lo, hi);
            if c != *v {
                moved = true;
                *v = c;
            }
        }
        moved
    }

    /// Multilinear interpolation of node values at `x` (assumed inside).
    ///
    /// Queries that land on a node within 1e-9 cells reproduce the node
    /// value exactly.
    pub fn interpolate(&self, values: &[f64], x: &[f64]) -> f64 {
        let mut acc = 0.0;
        self.for_each_corner(x, |flat, w| acc += w * values[flat]);
        acc
    }

    /// Multilinear interpolation of `width` interleaved components per node.
    pub fn interpolate_vec(&self, values: &[f64], width: usize, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        self.for_each_corner(x, |flat, w| {
            for (o, &v) in out.iter_mut().zip(&values[flat * width..(flat + 1) * width]) {
                *o += w * v;
            }
        });
    }

    fn for_each_corner(&self, x: &[f64], mut f: impl FnMut(usize, f64)) {
        let dim = self.dim();
        let strides = self.strides();
        let mut base = [0usize; MAX_DIM];
        let mut frac = [0.0f64; MAX_DIM];
        let mut active = [false; MAX_DIM];
        for axis in 0..dim {
            let n = self.n_points[axis];
            let s = ((x[axis] - self.lo[axis]) / self.spacing(axis)).clamp(0.0, (n - 1) as f64);
            let r = s.round();
            if (s - r).abs() < 1e-9 {
                base[axis] = r as usize;
            } else {
                let i = (s.floor() as usize).min(n - 2);
                base[axis] = i;
                frac[axis] = s - i as f64;
                active[axis] = true;
            }
        }
        let base_flat: usize = (0..dim).map(|a| base[a] * strides[a]).sum();
        for corner in 0..(1usize << dim) {
            let mut w = 1.0;
            let mut flat = base_flat;
            let mut skip = false;
            for axis in 0..dim {
                let upper = corner >> axis & 1 == 1;
                if active[axis] {
                    if upper {
                        w *= frac[axis];
                        flat += strides[axis];
                    } else {
                        w *= 1.0 - frac[axis];
                    }
                } else if upper {
                    skip = true;
                    break;
                }
            }
            if !skip {
                f(flat, w);
            }
        }
    }
}

/// One violated invariant: a dotted path into the problem plus a message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, path: impl Into<String>, message: impl Into<String>) {
        self.violations.push(Violation {
            path: path.into(),
            message: message.into(),
        });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{}: {}", v.path, v.message)?;
        }
        Ok(())
    }
}

fn check_len(report: &mut ValidationReport, path: &str, len: usize, dim: usize) -> bool {
    if len != dim {
        report.push(path, format!("expected {dim} entries, found {len}"));
        false
    } else {
        true
    }
}

/// Returns every invariant violation of `p`; an empty report means valid.
pub fn validate_problem(p: &Problem) -> ValidationReport {
    let mut r = ValidationReport::default();
    let dim = p.dim;
    if !(1..=MAX_DIM).contains(&dim) {
        r.push("dim", format!("must be between 1 and {MAX_DIM}, got {dim}"));
        return r;
    }

    // grid
    let g = &p.grid;
    let grid_ok = check_len(&mut r, "grid.lo", g.lo.len(), dim)
        & check_len(&mut r, "grid.hi", g.hi.len(), dim)
        & check_len(&mut r, "grid.n_points", g.n_points.len(), dim);
    let mut grid_usable = grid_ok;
    if grid_ok {
        for axis in 0..dim {
            let (lo, hi) = (g.lo[axis], g.hi[axis]);
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                r.push(
                    format!("grid.lo[{axis}]"),
                    format!("need finite lo < hi, got lo={lo}, hi={hi}"),
                );
                grid_usable = false;
            }
            if g.n_points[axis] < 3 {
                r.push(
                    format!("grid.n_points[{axis}]"),
                    format!("need at least 3 points, got {}", g.n_points[axis]),
                );
                grid_usable = false;
            }
        }
        let total = g
            .n_points
            .iter()
            .try_fold(1usize, |acc, &n| acc.checked_mul(n));
        if total.is_none_or(|t| t > MAX_GRID_POINTS) {
            r.push(
                "grid.n_points",
                format!("grid has more than {MAX_GRID_POINTS} points"),
            );
            grid_usable = false;
        }
    }

    // noise
    if check_len(&mut r, "noise.sigma", p.noise.sigma.len(), dim) {
        for (mu, &s) in p.noise.sigma.iter().enumerate() {
            if !(s.is_finite() && s >= 0.0) {
                r.push(
                    format!("noise.sigma[{mu}]"),
                    format!("must be finite and non-negative, got {s}"),
                );
            }
        }
    }

    // horizon
    let h = &p.horizon;
    if !(h.tau_i.is_finite() && h.tau_f.is_finite() && h.tau_i < h.tau_f) {
        r.push(
            "horizon.tau_f",
            format!("need tau_i < tau_f, got tau_i={}, tau_f={}", h.tau_i, h.tau_f),
        );
    }
    if h.n_steps == 0 {
        r.push("horizon.n_steps", "must be at least 1");
    }

    // control box
    let b = &p.control_bounds;
    let bounds_ok = check_len(&mut r, "control_bounds.u_min", b.u_min.len(), dim)
        & check_len(&mut r, "control_bounds.u_max", b.u_max.len(), dim);
    if bounds_ok {
        for mu in 0..dim {
            let (lo, hi) = (b.u_min[mu], b.u_max[mu]);
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                r.push(
                    format!("control_bounds.u_min[{mu}]"),
                    format!("need finite u_min < u_max, got {lo} and {hi}"),
                );
            } else if !(lo <= 0.0 && 0.0 <= hi) {
                r.push(
                    format!("control_bounds.u_min[{mu}]"),
                    format!("box [{lo}, {hi}] must contain 0"),
                );
            }
        }
    }

    // Lagrangian
    match &p.lagrangian {
        LagrangianSpec::QuadraticControl {
            control_weight,
            potential,
        } => {
            validate_weight(&mut r, control_weight, dim);
            match potential {
                Potential::Zero => {}
                Potential::Harmonic { stiffness } => {
                    if check_len(&mut r, "lagrangian.potential.stiffness", stiffness.len(), dim) {
                        for (mu, &q) in stiffness.iter().enumerate() {
                            if !q.is_finite() {
                                r.push(
                                    format!("lagrangian.potential.stiffness[{mu}]"),
                                    format!("must be finite, got {q}"),
                                );
                            }
                        }
                    }
                }
                Potential::Mesh { values } => {
                    if grid_usable
                        && check_len(&mut r, "lagrangian.potential.values", values.len(), g.len())
                    {
                        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
                            r.push(
                                format!("lagrangian.potential.values[{i}]"),
                                "must be finite",
                            );
                        }
                    }
                }
            }
        }
        LagrangianSpec::Tabulated(f) => {
            if grid_usable && bounds_ok && r.is_valid() {
                if let Some(msg) = probe_tabulated(p, f) {
                    r.push("lagrangian", msg);
                }
            }
        }
    }
    r
}

fn validate_weight(r: &mut ValidationReport, w: &[Vec<f64>], dim: usize) {
    let path = "lagrangian.control_weight";
    if w.len() != dim || w.iter().any(|row| row.len() != dim) {
        r.push(path, format!("must be a {dim}x{dim} matrix"));
        return;
    }
    if w.iter().flatten().any(|v| !v.is_finite()) {
        r.push(path, "entries must be finite");
        return;
    }
    let scale = w.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    for i in 0..dim {
        for j in (i + 1)..dim {
            if (w[i][j] - w[j][i]).abs() > 1e-12 * scale.max(1.0) {
                r.push(format!("{path}[{i}][{j}]"), "matrix must be symmetric");
                return;
            }
        }
    }
    let m = weight_matrix(w);
    let eig = m.symmetric_eigenvalues();
    let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        r.push(
            path,
            format!("matrix must be positive-definite, smallest eigenvalue is {min}"),
        );
    }
}

/// Evaluates a tabulated Lagrangian on grid nodes at the box corners and the
/// origin; reports the first non-finite sample.
fn probe_tabulated(p: &Problem, f: &TabulatedLagrangian) -> Option<String> {
    let dim = p.dim;
    let b = &p.control_bounds;
    let mut probes: Vec<Vec<f64>> = vec![vec![0.0; dim]];
    for corner in 0..(1usize << dim) {
        probes.push(
            (0..dim)
                .map(|mu| if corner >> mu & 1 == 1 { b.u_max[mu] } else { b.u_min[mu] })
                .collect(),
        );
    }
    for flat in 0..p.grid.len() {
        let x = p.grid.point(flat);
        for tau in [p.horizon.tau_i, p.horizon.tau_f] {
            for u in &probes {
                let v = f.eval(tau, &x, u);
                if !v.is_finite() {
                    return Some(format!("non-finite value {v} at tau={tau}, x={x:?}, u={u:?}"));
                }
            }
        }
    }
    None
}

pub(crate) fn weight_matrix(w: &[Vec<f64>]) -> DMatrix<f64> {
    let n = w.len();
    DMatrix::from_fn(n, n, |i, j| w[i][j])
}

impl Potential {
    /// `V(x)`; mesh potentials interpolate on `grid`.
    pub fn eval(&self, grid: &GridSpec, x: &[f64]) -> f64 {
        match self {
            Potential::Zero => 0.0,
            Potential::Harmonic { stiffness } => {
                0.5 * stiffness.iter().zip(x).map(|(q, v)| q * v * v).sum::<f64>()
            }
            Potential::Mesh { values } => grid.interpolate(values, x),
        }
    }
}

/// `½ uᵀ R u` without allocating.
pub(crate) fn control_cost(w: &[Vec<f64>], u: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (i, row) in w.iter().enumerate() {
        let mut ri = 0.0;
        for (j, &r) in row.iter().enumerate() {
            ri += r * u[j];
        }
        acc += u[i] * ri;
    }
    0.5 * acc
}

impl Problem {
    pub fn dtau(&self) -> f64 {
        self.horizon.dtau()
    }

    /// Lagrangian without domain checks.
    #[inline]
    pub fn lagrangian_unchecked(&self, tau: f64, x: &[f64], u: &[f64]) -> f64 {
        match &self.lagrangian {
            LagrangianSpec::QuadraticControl {
                control_weight,
                potential,
            } => control_cost(control_weight, u) + potential.eval(&self.grid, x),
            LagrangianSpec::Tabulated(f) => f.eval(tau, x, u),
        }
    }

    /// Fails when `x` has the wrong length, is non-finite or leaves the grid.
    pub fn check_state(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::Shape(format!(
                "state has {} components, problem has dim {}",
                x.len(),
                self.dim
            )));
        }
        for (mu, &v) in x.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    what: format!("x[{mu}] = {v}"),
                });
            }
            if v < self.grid.lo[mu] || v > self.grid.hi[mu] {
                return Err(Error::domain(
                    format!("x[{mu}]"),
                    format!("{v} not in [{}, {}]", self.grid.lo[mu], self.grid.hi[mu]),
                ));
            }
        }
        Ok(())
    }
}

/// `L(τ, x, u)`, checking that `τ`, `x` and `u` lie in their domains.
pub fn eval_lagrangian(p: &Problem, tau: f64, x: &[f64], u: &[f64]) -> Result<f64> {
    if !tau.is_finite() || !p.horizon.contains(tau) {
        return Err(Error::domain(
            "tau",
            format!("{tau} not in [{}, {}]", p.horizon.tau_i, p.horizon.tau_f),
        ));
    }
    p.check_state(x)?;
    if u.len() != p.dim {
        return Err(Error::Shape(format!(
            "control has {} components, problem has dim {}",
            u.len(),
            p.dim
        )));
    }
    let b = &p.control_bounds;
    for (mu, &v) in u.iter().enumerate() {
        if !(v >= b.u_min[mu] && v <= b.u_max[mu]) {
            return Err(Error::domain(
                format!("u[{mu}]"),
                format!("{v} not in [{}, {}]", b.u_min[mu], b.u_max[mu]),
            ));
        }
    }
    Ok(p.lagrangian_unchecked(tau, x, u))
}

/// The `(R, V)` pair of a quadratic-control Lagrangian.
pub fn quadratic_form(p: &Problem) -> Option<(DMatrix<f64>, &Potential)> {
    match &p.lagrangian {
        LagrangianSpec::QuadraticControl {
            control_weight,
            potential,
        } => Some((weight_matrix(control_weight), potential)),
        LagrangianSpec::Tabulated(_) => None,
    }
}

#[cfg(test)]
pub(crate) use tests::lq_1d;

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn lq_1d() -> Problem {
        Problem {
            dim: 1,
            lagrangian: LagrangianSpec::QuadraticControl {
                control_weight: vec![vec![1.0]],
                potential: Potential::Zero,
            },
            noise: NoiseSpec { sigma: vec![1.0] },
            horizon: Horizon {
                tau_i: 0.0,
                tau_f: 1.0,
                n_steps: 100,
            },
            control_bounds: ControlBounds {
                u_min: vec![-5.0],
                u_max: vec![5.0],
            },
            grid: GridSpec {
                lo: vec![-3.0],
                hi: vec![3.0],
                n_points: vec![201],
            },
        }
    }

    fn with_weight(w: Vec<Vec<f64>>) -> Problem {
        let mut p = lq_1d();
        p.dim = 2;
        p.lagrangian = LagrangianSpec::QuadraticControl {
            control_weight: w,
            potential: Potential::Zero,
        };
        p.noise.sigma = vec![1.0, 1.0];
        p.control_bounds = ControlBounds {
            u_min: vec![-5.0; 2],
            u_max: vec![5.0; 2],
        };
        p.grid = GridSpec {
            lo: vec![-1.0; 2],
            hi: vec![1.0; 2],
            n_points: vec![11; 2],
        };
        p
    }

    #[test]
    fn reference_problem_is_valid() {
        assert!(validate_problem(&lq_1d()).is_valid());
    }

    #[test]
    fn degenerate_horizon_is_reported() {
        let mut p = lq_1d();
        p.horizon.tau_f = p.horizon.tau_i;
        let r = validate_problem(&p);
        assert_eq!(r.violations.len(), 1, "{r}");
        assert!(r.violations[0].path.starts_with("horizon"));
    }

    #[test]
    fn indefinite_weight_is_reported() {
        // eigenvalues of [[1,2],[2,1]] are 3 and -1
        let r = validate_problem(&with_weight(vec![vec![1.0, 2.0], vec![2.0, 1.0]]));
        assert_eq!(r.violations.len(), 1, "{r}");
        assert!(r.violations[0].message.contains("positive-definite"));
        assert!(validate_problem(&with_weight(vec![vec![2.0, 1.0], vec![1.0, 2.0]])).is_valid());
    }

    #[test]
    fn other_violations() {
        let mut p = lq_1d();
        p.dim = 5;
        assert_eq!(validate_problem(&p).violations[0].path, "dim");

        let mut p = lq_1d();
        p.noise.sigma = vec![-1.0];
        p.control_bounds.u_min = vec![0.5];
        p.grid.n_points = vec![2];
        let r = validate_problem(&p);
        let paths: Vec<_> = r.violations.iter().map(|v| v.path.as_str()).collect();
        assert_eq!(
            paths,
            ["grid.n_points[0]", "noise.sigma[0]", "control_bounds.u_min[0]"]
        );
    }

    #[test]
    fn tabulated_non_finite_is_reported() {
        let mut p = lq_1d();
        p.grid.n_points = vec![5];
        p.lagrangian = LagrangianSpec::Tabulated(TabulatedLagrangian::new(|_, x, _| 1.0 / x[0]));
        let r = validate_problem(&p);
        assert_eq!(r.violations.len(), 1);
        p.lagrangian = LagrangianSpec::Tabulated(TabulatedLagrangian::new(|_, x, u| x[0] + u[0]));
        assert!(validate_problem(&p).is_valid());
    }

    #[test]
    fn lagrangian_values() {
        let p = lq_1d();
        assert_eq!(eval_lagrangian(&p, 0.0, &[0.0], &[2.0]).unwrap(), 2.0);

        let mut h = lq_1d();
        h.lagrangian = LagrangianSpec::QuadraticControl {
            control_weight: vec![vec![1.0]],
            potential: Potential::Harmonic {
                stiffness: vec![1.0],
            },
        };
        assert_eq!(eval_lagrangian(&h, 0.5, &[1.0], &[0.0]).unwrap(), 0.5);

        let d = with_weight(vec![vec![2.0, 0.0], vec![0.0, 2.0]]);
        assert_eq!(eval_lagrangian(&d, 0.0, &[0.0, 0.0], &[1.0, 1.0]).unwrap(), 2.0);
    }

    #[test]
    fn lagrangian_domain_errors_name_the_component() {
        let p = lq_1d();
        let e = eval_lagrangian(&p, 0.0, &[3.5], &[0.0]).unwrap_err();
        assert!(matches!(e, Error::Domain { ref what, .. } if what == "x[0]"), "{e}");
        let e = eval_lagrangian(&p, 0.0, &[0.0], &[-6.0]).unwrap_err();
        assert!(matches!(e, Error::Domain { ref what, .. } if what == "u[0]"), "{e}");
        let e = eval_lagrangian(&p, 1.5, &[0.0], &[0.0]).unwrap_err();
        assert!(matches!(e, Error::Domain { ref what, .. } if what == "tau"), "{e}");
    }

    #[test]
    fn quadratic_form_readback() {
        let p = lq_1d();
        let (r, v) = quadratic_form(&p).unwrap();
        assert_eq!(r[(0, 0)].to_bits(), 1.0f64.to_bits());
        assert_eq!(*v, Potential::Zero);

        let mut t = lq_1d();
        t.lagrangian = LagrangianSpec::Tabulated(TabulatedLagrangian::new(|_, _, _| 0.0));
        assert!(quadratic_form(&t).is_none());
    }

    #[test]
    fn mesh_potential_interpolates() {
        let mut p = lq_1d();
        p.grid = GridSpec {
            lo: vec![0.0],
            hi: vec![2.0],
            n_points: vec![3],
        };
        p.lagrangian = LagrangianSpec::QuadraticControl {
            control_weight: vec![vec![1.0]],
            potential: Potential::Mesh {
                values: vec![0.0, 2.0, 6.0],
            },
        };
        assert!(validate_problem(&p).is_valid());
        assert_eq!(eval_lagrangian(&p, 0.0, &[1.5], &[0.0]).unwrap(), 4.0);
        assert_eq!(eval_lagrangian(&p, 0.0, &[2.0], &[0.0]).unwrap(), 6.0);
    }

    #[test]
    fn grid_ravel_and_interpolation() {
        let g = GridSpec {
            lo: vec![0.0, -1.0],
            hi: vec![1.0, 1.0],
            n_points: vec![3, 5],
        };
        let mut idx = [0; 2];
        for flat in 0..g.len() {
            g.unravel(flat, &mut idx);
            assert_eq!(g.ravel(&idx), flat);
        }
        // bilinear function is reproduced exactly by bilinear interpolation
        let f = |x: &[f64]| 1.0 + 2.0 * x[0] - 0.5 * x[1] + 3.0 * x[0] * x[1];
        let values: Vec<f64> = (0..g.len()).map(|i| f(&g.point(i))).collect();
        for x in [[0.3, 0.1], [0.75, -0.95], [1.0, 1.0], [0.0, -1.0]] {
            assert!((g.interpolate(&values, &x) - f(&x)).abs() < 1e-12);
        }
        for flat in 0..g.len() {
            assert_eq!(g.interpolate(&values, &g.point(flat)), values[flat]);
        }
    }
}
