//! Optimal feedback control `u*(τ, x) = argmin_u [L + uᵀ∇J]` extracted from
//! a solved value function.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hjb::{slice_controls, Hamiltonian, ValueFunction};
use crate::problem::{ControlBounds, GridSpec, Horizon, Problem};
use crate::sde::PolicyProvider;

/// Controls on every slice and grid node, `dim` values per node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyField {
    pub grid: GridSpec,
    pub horizon: Horizon,
    pub bounds: ControlBounds,
    pub controls: Vec<Vec<f64>>,
}

impl PolicyField {
    pub fn dim(&self) -> usize {
        self.grid.dim()
    }

    /// Stored control at slice `k`, node `flat`.
    pub fn node(&self, k: usize, flat: usize) -> &[f64] {
        let d = self.dim();
        &self.controls[k][flat * d..(flat + 1) * d]
    }
}

/// Extracts the optimal control on every slice of `vf`.
///
/// Slice `k` uses the same stencils and upwinding as a solver sub-step that
/// starts from `J(τ_k)`.
pub fn extract_policy(p: &Problem, vf: &ValueFunction) -> Result<PolicyField> {
    if vf.grid != p.grid {
        return Err(Error::Shape("value function grid differs from problem grid".into()));
    }
    if vf.horizon != p.horizon || vf.values.len() != p.horizon.n_steps + 1 {
        return Err(Error::Shape(
            "value function horizon differs from problem horizon".into(),
        ));
    }
    if let Some(k) = vf.values.iter().position(|s| s.len() != p.grid.len()) {
        return Err(Error::Shape(format!("slice {k} has the wrong number of values")));
    }
    let ham = Hamiltonian::new(p)?;
    let controls = vf
        .values
        .par_iter()
        .enumerate()
        .map(|(k, slice)| slice_controls(&ham, slice, p.horizon.time(k)))
        .collect();
    Ok(PolicyField {
        grid: p.grid.clone(),
        horizon: p.horizon,
        bounds: p.control_bounds.clone(),
        controls,
    })
}

/// Control at `(τ, x)`: nearest slice in time, multilinear in space, clipped
/// to the control box.
pub fn query_policy(field: &PolicyField, tau: f64, x: &[f64]) -> Result<Vec<f64>> {
    let mut out = vec![0.0; field.dim()];
    field.control(tau, x, &mut out)?;
    Ok(out)
}

impl PolicyProvider for PolicyField {
    fn control(&self, tau: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        if !self.horizon.contains(tau) {
            return Err(Error::domain(
                "tau",
                format!("{tau} not in [{}, {}]", self.horizon.tau_i, self.horizon.tau_f),
            ));
        }
        if !self.grid.contains(x) {
            return Err(Error::domain("x", format!("{x:?} outside the grid")));
        }
        let k = self.horizon.nearest_slice(tau);
        self.grid
            .interpolate_vec(&self.controls[k], self.dim(), x, out);
        self.bounds.clip(out);
        Ok(())
    }
}

/// A base policy shifted by a constant offset and optionally sign-flipped,
/// clipped to the control box.
pub struct PerturbedPolicy<'a> {
    pub base: &'a dyn PolicyProvider,
    pub offset: Vec<f64>,
    pub flip: bool,
    pub bounds: ControlBounds,
}

impl PolicyProvider for PerturbedPolicy<'_> {
    fn control(&self, tau: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        self.base.control(tau, x, out)?;
        for (u, o) in out.iter_mut().zip(&self.offset) {
            if self.flip {
                *u = -*u;
            }
            *u += o;
        }
        self.bounds.clip(out);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hjb::solve;
    use crate::problem::lq_1d;

    fn field_1d(values: Vec<f64>) -> PolicyField {
        PolicyField {
            grid: GridSpec {
                lo: vec![0.0],
                hi: vec![1.0],
                n_points: vec![values.len()],
            },
            horizon: Horizon {
                tau_i: 0.0,
                tau_f: 1.0,
                n_steps: 1,
            },
            bounds: ControlBounds {
                u_min: vec![-10.0],
                u_max: vec![10.0],
            },
            controls: vec![values.clone(), values],
        }
    }

    #[test]
    fn zero_value_gives_zero_policy() {
        let p = lq_1d();
        let (vf, _) = solve(&p).unwrap();
        let pol = extract_policy(&p, &vf).unwrap();
        assert!(pol.controls.iter().flatten().all(|&u| u == 0.0));
    }

    #[test]
    fn grid_mismatch_is_a_shape_error() {
        let p = lq_1d();
        let (mut vf, _) = solve(&p).unwrap();
        vf.grid.n_points = vec![101];
        assert!(matches!(extract_policy(&p, &vf), Err(Error::Shape(_))));
    }

    #[test]
    fn interpolation_reproduces_nodes_and_midpoints() {
        let f = field_1d(vec![1.0, 3.0, -2.0]);
        assert_eq!(query_policy(&f, 0.0, &[0.5]).unwrap(), vec![3.0]);
        assert_eq!(query_policy(&f, 1.0, &[1.0]).unwrap(), vec![-2.0]);
        assert_eq!(query_policy(&f, 0.2, &[0.25]).unwrap(), vec![2.0]);
    }

    #[test]
    fn constant_field_is_constant() {
        let f = field_1d(vec![0.7; 9]);
        for x in [0.0, 0.13, 0.5, 0.999, 1.0] {
            for t in [0.0, 0.4, 0.6, 1.0] {
                assert!((query_policy(&f, t, &[x]).unwrap()[0] - 0.7).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn queries_are_clipped_and_checked() {
        let mut f = field_1d(vec![1.0, 3.0, -2.0]);
        f.bounds.u_max = vec![2.5];
        assert_eq!(query_policy(&f, 0.0, &[0.5]).unwrap(), vec![2.5]);
        assert!(query_policy(&f, 0.0, &[1.5]).is_err());
        assert!(query_policy(&f, 2.0, &[0.5]).is_err());
    }
}
