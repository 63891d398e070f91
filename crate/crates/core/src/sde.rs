//! Euler–Maruyama simulation of `dx = u dτ + σ ⊙ dW` and Monte Carlo
//! estimators built on it.
//!
//! Every path draws from its own ChaCha8 stream selected by `(seed,
//! stream_id)`, so ensembles are reproducible and independent of how paths
//! are scheduled across worker threads. Aggregates are always reduced in path
//! order with compensated summation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::{NoiseSpec, Problem};

/// Reproducible standard-normal source for one path.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            rng,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    #[inline]
    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }
}

/// Anything that can supply a control at `(τ, x)`.
pub trait PolicyProvider: Sync {
    fn control(&self, tau: f64, x: &[f64], out: &mut [f64]) -> Result<()>;
}

/// The same control everywhere.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantPolicy(pub Vec<f64>);

impl PolicyProvider for ConstantPolicy {
    fn control(&self, _tau: f64, _x: &[f64], out: &mut [f64]) -> Result<()> {
        out.copy_from_slice(&self.0);
        Ok(())
    }
}

/// Adapts a closure `(τ, x, out)` into a [`PolicyProvider`].
pub struct FnPolicy<F>(pub F);

impl<F> PolicyProvider for FnPolicy<F>
where
    F: Fn(f64, &[f64], &mut [f64]) + Sync,
{
    fn control(&self, tau: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        (self.0)(tau, x, out);
        Ok(())
    }
}

fn check_finite(what: &str, v: &[f64]) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(Error::NonFinite {
            what: format!("{what}[{i}] = {}", v[i]),
        }),
        None => Ok(()),
    }
}

/// In-place Euler–Maruyama update `x += u dτ + σ √dτ ξ`.
///
/// One normal variate is drawn per component even where `σ = 0`, so the
/// stream position does not depend on the noise amplitudes.
#[inline]
fn em_update(x: &mut [f64], u: &[f64], sigma: &[f64], dtau: f64, rng: &mut RngStream) {
    let sq = dtau.sqrt();
    for ((xi, &ui), &si) in x.iter_mut().zip(u).zip(sigma) {
        let xi_noise = rng.standard_normal();
        *xi = *xi + ui * dtau + si * sq * xi_noise;
    }
}

/// One Euler–Maruyama step of the controlled process.
pub fn em_step(
    x: &[f64],
    u: &[f64],
    sigma: &NoiseSpec,
    dtau: f64,
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    if !(dtau > 0.0 && dtau.is_finite()) {
        return Err(Error::NonFinite {
            what: format!("dtau = {dtau} (must be positive)"),
        });
    }
    if u.len() != x.len() || sigma.sigma.len() != x.len() {
        return Err(Error::Shape(format!(
            "state, control and noise lengths differ: {}, {}, {}",
            x.len(),
            u.len(),
            sigma.sigma.len()
        )));
    }
    check_finite("x", x)?;
    check_finite("u", u)?;
    check_finite("sigma", &sigma.sigma)?;
    let mut next = x.to_vec();
    em_update(&mut next, u, &sigma.sigma, dtau, rng);
    Ok(next)
}

/// One simulated trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Path {
    pub times: Vec<f64>,
    /// `(n+1) × dim`, row-major.
    pub states: Vec<f64>,
    /// `n × dim`, row-major.
    pub controls: Vec<f64>,
    /// Running cost after each step; `running_cost[0] = 0`.
    pub running_cost: Vec<f64>,
    pub cost: f64,
    /// Number of steps after which the state had to be clamped to the grid.
    pub clamp_events: usize,
}

impl Path {
    pub fn dim(&self) -> usize {
        self.states.len() / self.times.len()
    }

    pub fn state(&self, k: usize) -> &[f64] {
        let d = self.dim();
        &self.states[k * d..(k + 1) * d]
    }

    pub fn final_state(&self) -> &[f64] {
        self.state(self.times.len() - 1)
    }
}

struct SegmentOutcome {
    cost: f64,
    clamp_events: usize,
    path: Option<Path>,
    terminal_state: Vec<f64>,
}

/// Simulates steps `start..end` of the horizon from `x0`.
fn run_segment(
    p: &Problem,
    x0: &[f64],
    start: usize,
    end: usize,
    policy: &dyn PolicyProvider,
    rng: &mut RngStream,
    record: bool,
) -> Result<SegmentOutcome> {
    let dim = p.dim;
    let dtau = p.dtau();
    let mut x = x0.to_vec();
    let mut u = vec![0.0; dim];
    let mut cost = 0.0;
    let mut clamp_events = 0;
    let mut path = record.then(|| {
        let n = end - start;
        let mut path = Path {
            times: Vec::with_capacity(n + 1),
            states: Vec::with_capacity((n + 1) * dim),
            controls: Vec::with_capacity(n * dim),
            running_cost: Vec::with_capacity(n + 1),
            cost: 0.0,
            clamp_events: 0,
        };
        path.times.push(p.horizon.time(start));
        path.states.extend_from_slice(x0);
        path.running_cost.push(0.0);
        path
    });
    for k in start..end {
        let tau = p.horizon.time(k);
        let step_err = |e: Error| Error::Policy {
            step: k,
            source: Box::new(e),
        };
        policy.control(tau, &x, &mut u).map_err(step_err)?;
        let l = crate::problem::eval_lagrangian(p, tau, &x, &u).map_err(step_err)?;
        cost += l * dtau;
        em_update(&mut x, &u, &p.noise.sigma, dtau, rng);
        if p.grid.clamp(&mut x) {
            clamp_events += 1;
        }
        if let Some(path) = path.as_mut() {
            path.times.push(p.horizon.time(k + 1));
            path.states.extend_from_slice(&x);
            path.controls.extend_from_slice(&u);
            path.running_cost.push(cost);
        }
    }
    if let Some(path) = path.as_mut() {
        path.cost = cost;
        path.clamp_events = clamp_events;
    }
    Ok(SegmentOutcome {
        cost,
        clamp_events,
        path,
        terminal_state: x,
    })
}

/// Simulates a full-horizon path from `x0` under `policy`.
pub fn simulate_path(
    p: &Problem,
    x0: &[f64],
    policy: &dyn PolicyProvider,
    rng: &mut RngStream,
) -> Result<Path> {
    p.check_state(x0)?;
    let out = run_segment(p, x0, 0, p.horizon.n_steps, policy, rng, true)?;
    Ok(out.path.expect("recording was requested"))
}

/// Execution options for ensemble estimators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SimOptions {
    /// Worker threads; `None` uses the global rayon pool, `Some(1)` runs
    /// sequentially on the calling thread.
    pub workers: Option<usize>,
    /// Retain every [`Path`] in the ensemble.
    pub keep_paths: bool,
}

/// Monte Carlo ensemble of rollouts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathEnsemble {
    pub seed: u64,
    pub n_paths: usize,
    pub start_step: usize,
    pub end_step: usize,
    pub mean_cost: f64,
    pub std_error: f64,
    pub std_dev: f64,
    /// Total clamp events over all paths.
    pub clamp_events: usize,
    /// Paths that touched the grid boundary at least once.
    pub paths_clamped: usize,
    #[serde(skip)]
    pub costs: Vec<f64>,
    #[serde(skip)]
    pub paths: Vec<Path>,
}

/// Neumaier-compensated sum.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Sample mean, sample standard deviation and standard error of the mean.
///
/// Identical samples give exactly that value with zero spread.
pub fn mean_and_error(samples: &[f64]) -> (f64, f64, f64) {
    let n = samples.len();
    if n == 0 {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    if samples.iter().all(|&s| s == samples[0]) {
        return (samples[0], 0.0, 0.0);
    }
    let mean = compensated_sum(samples.iter().copied()) / n as f64;
    if n < 2 {
        return (mean, 0.0, 0.0);
    }
    let ss = compensated_sum(samples.iter().map(|&s| (s - mean) * (s - mean)));
    let sd = (ss / (n - 1) as f64).sqrt();
    (mean, sd, sd / (n as f64).sqrt())
}

fn run_indexed<T: Send>(
    n: usize,
    workers: Option<usize>,
    f: impl Fn(usize) -> Result<T> + Sync + Send,
) -> Result<Vec<T>> {
    match workers {
        Some(1) => (0..n).map(f).collect(),
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build()
            .map_err(|e| Error::Io(std::io::Error::other(e)))?
            .install(|| (0..n).into_par_iter().map(&f).collect()),
        None => (0..n).into_par_iter().map(f).collect(),
    }
}

/// Monte Carlo estimate of `⟨∫ L ds + terminal(x_end)⟩` over steps
/// `start..end`, starting from `x0` at the time of step `start`.
///
/// Path `i` uses stream `i` of `seed`.
#[allow(clippy::too_many_arguments)]
pub fn estimate_segment(
    p: &Problem,
    x0: &[f64],
    start: usize,
    end: usize,
    policy: &dyn PolicyProvider,
    terminal: &(dyn Fn(&[f64]) -> f64 + Sync),
    n_paths: usize,
    seed: u64,
    opts: SimOptions,
) -> Result<PathEnsemble> {
    if n_paths < 2 {
        return Err(Error::domain("n_paths", format!("need at least 2, got {n_paths}")));
    }
    if start > end || end > p.horizon.n_steps {
        return Err(Error::domain(
            "step range",
            format!("{start}..{end} not inside 0..{}", p.horizon.n_steps),
        ));
    }
    p.check_state(x0)?;
    let outcomes = run_indexed(n_paths, opts.workers, |i| {
        let mut rng = RngStream::new(seed, i as u64);
        let mut out = run_segment(p, x0, start, end, policy, &mut rng, opts.keep_paths)?;
        out.cost += terminal(&out.terminal_state);
        Ok(out)
    })?;
    let costs: Vec<f64> = outcomes.iter().map(|o| o.cost).collect();
    let (mean_cost, std_dev, std_error) = mean_and_error(&costs);
    let clamp_events = outcomes.iter().map(|o| o.clamp_events).sum();
    let paths_clamped = outcomes.iter().filter(|o| o.clamp_events > 0).count();
    let paths = outcomes.into_iter().filter_map(|o| o.path).collect();
    Ok(PathEnsemble {
        seed,
        n_paths,
        start_step: start,
        end_step: end,
        mean_cost,
        std_error,
        std_dev,
        clamp_events,
        paths_clamped,
        costs,
        paths,
    })
}

/// Expected action from `x0` over the whole horizon under `policy`.
pub fn estimate_action(
    p: &Problem,
    x0: &[f64],
    policy: &dyn PolicyProvider,
    n_paths: usize,
    seed: u64,
    opts: SimOptions,
) -> Result<PathEnsemble> {
    estimate_segment(
        p,
        x0,
        0,
        p.horizon.n_steps,
        policy,
        &|_| 0.0,
        n_paths,
        seed,
        opts,
    )
}

/// Sample estimates of the first two raw moments of one increment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    pub n_samples: usize,
    pub dtau: f64,
    pub mean_increment: Vec<f64>,
    pub mean_std_error: Vec<f64>,
    /// Raw `⟨dx_μ dx_ν⟩`, symmetric.
    pub second_moment: Vec<Vec<f64>>,
    pub second_moment_std_error: Vec<Vec<f64>>,
}

const MOMENT_BATCH: usize = 4096;

/// Estimates `⟨dx⟩` and `⟨dx dxᵀ⟩` of a single Euler–Maruyama increment.
pub fn estimate_moments(
    u: &[f64],
    sigma: &NoiseSpec,
    dtau: f64,
    n_samples: usize,
    seed: u64,
) -> Result<MomentReport> {
    if n_samples < 100 {
        return Err(Error::domain(
            "n_samples",
            format!("need at least 100, got {n_samples}"),
        ));
    }
    let dim = u.len();
    let origin = vec![0.0; dim];
    // validates shapes, finiteness and dtau once
    em_step(&origin, u, sigma, dtau, &mut RngStream::new(seed, 0))?;

    let n_batches = n_samples.div_ceil(MOMENT_BATCH);
    let batches: Vec<Vec<f64>> = (0..n_batches)
        .into_par_iter()
        .map(|b| {
            let mut rng = RngStream::new(seed, b as u64);
            let len = MOMENT_BATCH.min(n_samples - b * MOMENT_BATCH);
            let mut incs = Vec::with_capacity(len * dim);
            let mut x = vec![0.0; dim];
            for _ in 0..len {
                x.iter_mut().for_each(|v| *v = 0.0);
                em_update(&mut x, u, &sigma.sigma, dtau, &mut rng);
                incs.extend_from_slice(&x);
            }
            incs
        })
        .collect();
    let incs: Vec<f64> = batches.concat();
    let column = |f: &dyn Fn(&[f64]) -> f64| -> (f64, f64) {
        let s: Vec<f64> = incs.chunks_exact(dim).map(f).collect();
        let (m, _, se) = mean_and_error(&s);
        (m, se)
    };
    let mut mean_increment = vec![0.0; dim];
    let mut mean_std_error = vec![0.0; dim];
    let mut second = vec![vec![0.0; dim]; dim];
    let mut second_se = vec![vec![0.0; dim]; dim];
    for mu in 0..dim {
        (mean_increment[mu], mean_std_error[mu]) = column(&|d| d[mu]);
        for nu in mu..dim {
            let (m, se) = column(&|d| d[mu] * d[nu]);
            second[mu][nu] = m;
            second[nu][mu] = m;
            second_se[mu][nu] = se;
            second_se[nu][mu] = se;
        }
    }
    Ok(MomentReport {
        n_samples,
        dtau,
        mean_increment,
        mean_std_error,
        second_moment: second,
        second_moment_std_error: second_se,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::lq_1d;

    fn noise(s: &[f64]) -> NoiseSpec {
        NoiseSpec { sigma: s.to_vec() }
    }

    #[test]
    fn deterministic_step_is_exact() {
        let mut rng = RngStream::new(3, 0);
        let x = em_step(&[0.0], &[2.0], &noise(&[0.0]), 0.01, &mut rng).unwrap();
        assert_eq!(x, vec![0.02]);
    }

    #[test]
    fn noisy_step_uses_recorded_normal() {
        let mut probe = RngStream::new(11, 4);
        let xi = probe.standard_normal();
        let mut rng = RngStream::new(11, 4);
        let x = em_step(&[0.0], &[0.0], &noise(&[1.0]), 0.01, &mut rng).unwrap();
        assert_eq!(x[0], 0.0 + 0.0 * 0.01 + 1.0 * 0.01f64.sqrt() * xi);
        assert!((x[0] - 0.1 * xi).abs() < 1e-16);
    }

    #[test]
    fn em_step_rejects_bad_input() {
        let mut rng = RngStream::new(0, 0);
        assert!(em_step(&[f64::NAN], &[0.0], &noise(&[1.0]), 0.01, &mut rng).is_err());
        assert!(em_step(&[0.0], &[0.0], &noise(&[1.0]), 0.0, &mut rng).is_err());
        assert!(em_step(&[0.0], &[f64::INFINITY], &noise(&[1.0]), 0.1, &mut rng).is_err());
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let draw = |seed, id| {
            let mut r = RngStream::new(seed, id);
            (0..8).map(|_| r.standard_normal()).collect::<Vec<_>>()
        };
        assert_eq!(draw(5, 1), draw(5, 1));
        assert_ne!(draw(5, 1), draw(5, 2));
        assert_ne!(draw(5, 1), draw(6, 1));
    }

    #[test]
    fn mean_increment_matches_drift() {
        let r = estimate_moments(&[1.0], &noise(&[1.0]), 0.01, 100_000, 1).unwrap();
        assert!((r.mean_increment[0] - 0.01).abs() <= 5.0 * r.mean_std_error[0]);
    }

    #[test]
    fn free_particle_at_rest() {
        let mut p = lq_1d();
        p.noise.sigma = vec![0.0];
        let path = simulate_path(&p, &[0.5], &ConstantPolicy(vec![0.0]), &mut RngStream::new(0, 0))
            .unwrap();
        assert_eq!(path.cost, 0.0);
        assert!(path.states.iter().all(|&x| x == 0.5));
        assert_eq!(path.times.len(), 101);
        assert_eq!(path.state(0), &[0.5]);
    }

    #[test]
    fn unit_velocity_cost() {
        let mut p = lq_1d();
        p.noise.sigma = vec![0.0];
        let path = simulate_path(&p, &[-1.0], &ConstantPolicy(vec![1.0]), &mut RngStream::new(0, 0))
            .unwrap();
        assert!((path.cost - 0.5).abs() < 1e-12, "{}", path.cost);
        assert!((path.final_state()[0] - 0.0).abs() < 1e-12);
        // times are uniform
        let dt = p.dtau();
        for w in path.times.windows(2) {
            assert!((w[1] - w[0] - dt).abs() < 1e-12);
        }
    }

    #[test]
    fn clamping_is_counted() {
        let mut p = lq_1d();
        p.noise.sigma = vec![0.0];
        let path = simulate_path(&p, &[2.5], &ConstantPolicy(vec![5.0]), &mut RngStream::new(0, 0))
            .unwrap();
        assert_eq!(*path.final_state(), [3.0]);
        assert!(path.clamp_events > 0);
    }

    #[test]
    fn policy_errors_carry_the_step() {
        let p = lq_1d();
        let bad = FnPolicy(|tau: f64, _: &[f64], out: &mut [f64]| {
            out[0] = if tau > 0.5 { 100.0 } else { 0.0 };
        });
        let e = simulate_path(&p, &[0.0], &bad, &mut RngStream::new(0, 0)).unwrap_err();
        match e {
            Error::Policy { step, .. } => assert_eq!(step, 51),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn deterministic_ensemble_has_zero_error() {
        let mut p = lq_1d();
        p.noise.sigma = vec![0.0];
        let ens = estimate_action(&p, &[0.0], &ConstantPolicy(vec![0.3]), 16, 9, SimOptions::default())
            .unwrap();
        assert_eq!(ens.std_error, 0.0);
        let single = simulate_path(&p, &[0.0], &ConstantPolicy(vec![0.3]), &mut RngStream::new(9, 0))
            .unwrap();
        assert_eq!(ens.mean_cost, single.cost);
    }

    #[test]
    fn standard_error_scales_like_inverse_sqrt() {
        let mut p = lq_1d();
        p.lagrangian = crate::problem::LagrangianSpec::QuadraticControl {
            control_weight: vec![vec![1.0]],
            potential: crate::problem::Potential::Harmonic {
                stiffness: vec![1.0],
            },
        };
        let pol = ConstantPolicy(vec![0.0]);
        let a = estimate_action(&p, &[0.0], &pol, 4000, 21, SimOptions::default()).unwrap();
        let b = estimate_action(&p, &[0.0], &pol, 8000, 21, SimOptions::default()).unwrap();
        let ratio = b.std_error / a.std_error;
        let target = 1.0 / 2f64.sqrt();
        assert!((ratio / target - 1.0).abs() < 0.2, "ratio {ratio}");
    }

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let v = [1e16, 1.0, -1e16, 1.0];
        assert_eq!(compensated_sum(v), 2.0);
    }
}
