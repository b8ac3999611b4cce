//! Euler–Maruyama integration of the finite herd.
//!
//! Followers `X¹..X^N` and herders `Y¹..Y^m` evolve by
//!
//! ```text
//! dX^n = [ (1/N) Σ_l H₁(X^l − X^n) + (1/m) Σ_j K₁(Y^j − X^n) ] dt + √(2σ) dW^n
//! dY^i = [ (1/N) Σ_l K₂(Y^i − X^l) + (1/m) Σ_j H₂(Y^j − Y^i) + h^i(t)·g^i(μ_N(t)) ] dt
//! ```
//!
//! with every drift evaluated on the pre-step snapshot.

use rayon::prelude::*;

use crate::control::ControlLaw;
use crate::error::{invalid, HerdError, Result};
use crate::kernels::KernelSet;
use crate::measures::{Cloud, EmpiricalMeasure, Field};
use crate::rng::{BrownianTape, InitialLaw, NoiseStream};

/// Parallel work below this many followers is not worth scheduling.
const PAR_MIN_LEN: usize = 256;

/// Diffusion coefficient `σ ≥ 0`; the noise amplitude is `√(2σ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseLevel(f64);

impl NoiseLevel {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma.is_finite() && sigma >= 0.0) {
            return Err(invalid("sigma", format!("must be finite and >= 0, got {sigma}")));
        }
        Ok(NoiseLevel(sigma))
    }

    pub fn sigma(self) -> f64 {
        self.0
    }
}

/// Kernels, controls and noise: everything that defines the vector field.
#[derive(Debug, Clone)]
pub struct HerdModel {
    pub kernels: KernelSet,
    pub controls: Vec<ControlLaw>,
    pub noise: NoiseLevel,
}

impl HerdModel {
    pub fn new(kernels: KernelSet, controls: Vec<ControlLaw>, noise: NoiseLevel) -> Result<Self> {
        if controls.is_empty() {
            return Err(invalid("controls", "need one control law per herder (m >= 1)"));
        }
        for c in &controls {
            if c.dim() != kernels.dim() {
                return Err(HerdError::DimensionMismatch {
                    expected: kernels.dim(),
                    got: c.dim(),
                });
            }
        }
        Ok(HerdModel {
            kernels,
            controls,
            noise,
        })
    }

    pub fn dim(&self) -> usize {
        self.kernels.dim()
    }

    pub fn herders(&self) -> usize {
        self.controls.len()
    }

    /// Common Lipschitz constant of the vector field: the largest kernel
    /// constant, or the largest `‖h‖_F · Lip(g)` over the controls if bigger.
    pub fn lipschitz_bound(&self) -> f64 {
        let control = self
            .controls
            .iter()
            .map(|c| {
                let h = c.h();
                let frob = (0..h.intervals())
                    .map(|k| h.interval(k).iter().map(|v| v * v).sum::<f64>().sqrt())
                    .fold(0.0, f64::max);
                frob * c.g().lipschitz()
            })
            .fold(0.0, f64::max);
        self.kernels.lipschitz_constant().max(control)
    }

    /// Largest `ℓ` over the controls.
    pub(crate) fn max_ell(&self) -> usize {
        self.controls.iter().map(|c| c.ell()).max().unwrap_or(0)
    }

    /// Herder velocities `dY^i/dt` given the follower distribution.
    pub(crate) fn herder_velocity(&self, field: &Field<'_>, herders: &[f64], t: f64, out: &mut [f64]) {
        let d = self.dim();
        let m = self.herders();
        out.fill(0.0);
        let mut g = vec![0.0; self.max_ell()];
        for i in 0..m {
            let yi = &herders[i * d..(i + 1) * d];
            let oi = &mut out[i * d..(i + 1) * d];
            field.add_pull(self.kernels.k2(), yi, oi);
            if !self.kernels.h2().is_zero() {
                for j in 0..m {
                    self.kernels
                        .h2()
                        .add_diff(&herders[j * d..(j + 1) * d], yi, 1.0 / m as f64, oi);
                }
            }
            let law = &self.controls[i];
            let gi = &mut g[..law.ell()];
            law.g().eval_into(field.cloud(), gi);
            law.add_drift(t, gi, oi);
        }
    }

    /// Follower drift at `x` given the frozen distribution and herder positions.
    #[inline]
    pub(crate) fn follower_drift(&self, field: &Field<'_>, herders: &[f64], x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        field.add_convolution(self.kernels.h1(), x, out);
        let k1 = self.kernels.k1();
        if !k1.is_zero() {
            let d = self.dim();
            let m = self.herders();
            for j in 0..m {
                k1.add_diff(&herders[j * d..(j + 1) * d], x, 1.0 / m as f64, out);
            }
        }
    }
}

/// Uniform time grid `t_k = k·T/K` on `[0, T]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    /// `T/dt` must be an integer (within rounding) and `dt ≤ dt_max`, where
    /// `dt_max` defaults to `T/100`.
    pub fn new(horizon: f64, dt: f64) -> Result<Self> {
        Self::with_dt_max(horizon, dt, horizon / 100.0)
    }

    pub fn with_dt_max(horizon: f64, dt: f64, dt_max: f64) -> Result<Self> {
        if !(horizon.is_finite() && horizon >= 0.0) {
            return Err(invalid("T", "horizon must be finite and >= 0"));
        }
        if !(dt.is_finite() && dt > 0.0) {
            return Err(invalid("dt", "time step must be positive"));
        }
        if horizon == 0.0 {
            return Ok(TimeGrid { horizon, steps: 0 });
        }
        if dt > dt_max * (1.0 + 1e-12) {
            return Err(invalid("dt", format!("{dt} exceeds dt_max = {dt_max}")));
        }
        let ratio = horizon / dt;
        let steps = ratio.round();
        if (ratio - steps).abs() > 1e-6 * ratio.max(1.0) || steps < 1.0 {
            return Err(invalid("dt", format!("T/dt = {ratio} is not an integer")));
        }
        Ok(TimeGrid {
            horizon,
            steps: steps as usize,
        })
    }

    pub fn from_steps(horizon: f64, steps: usize) -> Self {
        TimeGrid { horizon, steps }
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn nodes(&self) -> usize {
        self.steps + 1
    }

    pub fn dt(&self) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            self.horizon / self.steps as f64
        }
    }

    pub fn time(&self, k: usize) -> f64 {
        if k == self.steps {
            self.horizon
        } else {
            self.horizon * k as f64 / self.steps as f64
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.nodes()).map(|k| self.time(k)).collect()
    }
}

/// Followers and herders at one time node.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemState {
    /// Index of the time node (keys the Brownian tape).
    pub step: u64,
    pub t: f64,
    dim: usize,
    followers: Vec<f64>,
    herders: Vec<f64>,
}

impl SystemState {
    pub fn new(dim: usize, followers: Vec<f64>, herders: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(invalid("d", "dimension must be at least 1"));
        }
        if followers.is_empty() || followers.len() % dim != 0 {
            return Err(invalid("X", "need N >= 1 follower positions of dimension d"));
        }
        if herders.is_empty() || herders.len() % dim != 0 {
            return Err(invalid("Y", "need m >= 1 herder positions of dimension d"));
        }
        if followers.iter().chain(&herders).any(|v| !v.is_finite()) {
            return Err(invalid("state", "positions must be finite"));
        }
        Ok(SystemState {
            step: 0,
            t: 0.0,
            dim,
            followers,
            herders,
        })
    }

    /// Followers `0..n` drawn from `law` under `seed`, herders at `y0`.
    pub fn sample(law: &InitialLaw, n: usize, y0: &[f64], seed: u64) -> Result<Self> {
        law.validate()?;
        Self::new(law.dim(), law.sample_many(seed, n), y0.to_vec())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_followers(&self) -> usize {
        self.followers.len() / self.dim
    }

    pub fn n_herders(&self) -> usize {
        self.herders.len() / self.dim
    }

    pub fn followers(&self) -> &[f64] {
        &self.followers
    }

    pub fn herders(&self) -> &[f64] {
        &self.herders
    }

    pub fn follower(&self, n: usize) -> &[f64] {
        &self.followers[n * self.dim..(n + 1) * self.dim]
    }

    pub fn herder(&self, i: usize) -> &[f64] {
        &self.herders[i * self.dim..(i + 1) * self.dim]
    }

    /// `μ_N = (1/N) Σ δ_{X^n}`
    pub fn empirical_measure(&self) -> EmpiricalMeasure {
        EmpiricalMeasure::uniform(self.dim, self.followers.clone())
            .expect("state invariants guarantee a valid measure")
    }

    pub(crate) fn cloud(&self) -> Cloud<'_> {
        Cloud::uniform(self.dim, &self.followers)
    }
}

fn check_compatible(state: &SystemState, model: &HerdModel) -> Result<()> {
    if state.dim != model.dim() {
        return Err(HerdError::DimensionMismatch {
            expected: model.dim(),
            got: state.dim,
        });
    }
    if state.n_herders() != model.herders() {
        return Err(invalid(
            "controls",
            format!("{} control laws for {} herders", model.herders(), state.n_herders()),
        ));
    }
    Ok(())
}

/// One explicit step; `streams[n]` must be positioned at `state.step`.
fn advance(
    state: &SystemState,
    dt: f64,
    t_next: f64,
    model: &HerdModel,
    streams: &mut [NoiseStream],
) -> Result<SystemState> {
    let d = state.dim;
    let field = Field::new(state.cloud());
    let amp = (2.0 * model.noise.sigma() * dt).sqrt();

    let mut followers = state.followers.clone();
    followers
        .par_chunks_mut(d)
        .zip(streams.par_iter_mut())
        .with_min_len(PAR_MIN_LEN)
        .for_each_init(
            || (vec![0.0; d], vec![0.0; d]),
            |(drift, xi), (x, stream)| {
                model.follower_drift(&field, &state.herders, x, drift);
                stream.next_into(xi);
                for k in 0..d {
                    x[k] += dt * drift[k] + amp * xi[k];
                }
            },
        );

    let mut velocity = vec![0.0; state.herders.len()];
    model.herder_velocity(&field, &state.herders, state.t, &mut velocity);
    let herders: Vec<f64> = state
        .herders
        .iter()
        .zip(&velocity)
        .map(|(y, v)| y + dt * v)
        .collect();

    let next_step = state.step + 1;
    if followers.iter().chain(&herders).any(|v| !v.is_finite()) {
        return Err(HerdError::Blowup {
            step: next_step as usize,
        });
    }
    Ok(SystemState {
        step: next_step,
        t: t_next,
        dim: d,
        followers,
        herders,
    })
}

/// Advances `state` by one Euler–Maruyama step of size `dt`, drawing the
/// increments keyed by `(tape seed, particle, state.step)`.
pub fn step(state: &SystemState, dt: f64, model: &HerdModel, tape: &BrownianTape) -> Result<SystemState> {
    check_compatible(state, model)?;
    if !(dt.is_finite() && dt > 0.0) {
        return Err(invalid("dt", "time step must be positive"));
    }
    let mut streams: Vec<NoiseStream> = (0..state.n_followers())
        .map(|n| tape.stream_at(n as u64, state.step))
        .collect();
    advance(state, dt, state.t + dt, model, &mut streams)
}

/// Integrates from `init` over `grid`, handing every node (including the
/// initial one) to `observer`.
pub fn simulate_with(
    init: &SystemState,
    grid: TimeGrid,
    model: &HerdModel,
    tape: &BrownianTape,
    observer: impl FnMut(&SystemState) -> Result<()>,
) -> Result<SystemState> {
    let keys: Vec<u64> = (0..init.n_followers() as u64).collect();
    simulate_keyed(init, grid, model, tape, &keys, observer)
}

/// As [`simulate_with`], but follower `n` draws from tape stream `keys[n]`.
pub fn simulate_keyed(
    init: &SystemState,
    grid: TimeGrid,
    model: &HerdModel,
    tape: &BrownianTape,
    keys: &[u64],
    mut observer: impl FnMut(&SystemState) -> Result<()>,
) -> Result<SystemState> {
    check_compatible(init, model)?;
    if keys.len() != init.n_followers() {
        return Err(invalid(
            "keys",
            format!("{} tape keys for {} followers", keys.len(), init.n_followers()),
        ));
    }
    let mut state = init.clone();
    observer(&state)?;
    let mut streams: Vec<NoiseStream> = keys.iter().map(|&key| tape.stream_at(key, state.step)).collect();
    let dt = grid.dt();
    for k in 0..grid.steps() {
        let mut next = advance(&state, dt, grid.time(k + 1), model, &mut streams)?;
        next.step = init.step + k as u64 + 1;
        state = next;
        observer(&state)?;
    }
    Ok(state)
}

/// Sampled path of the whole system on a uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub grid: TimeGrid,
    pub states: Vec<SystemState>,
}

impl Trajectory {
    pub fn last(&self) -> &SystemState {
        self.states.last().expect("trajectory has at least one node")
    }
}

/// Integrates `init` over `[0, T]` with step `dt`; deterministic in
/// `(init, seed, dt)`.
pub fn simulate(init: &SystemState, grid: TimeGrid, model: &HerdModel, seed: u64) -> Result<Trajectory> {
    let tape = BrownianTape::new(seed, init.dim());
    let mut states = Vec::with_capacity(grid.nodes());
    simulate_with(init, grid, model, &tape, |s| {
        states.push(s.clone());
        Ok(())
    })?;
    Ok(Trajectory { grid, states })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::{GFunctional, PiecewiseConstantPath};
    use crate::kernels::KernelSpec;

    fn zero_model(dim: usize, m: usize, sigma: f64) -> HerdModel {
        HerdModel::new(
            KernelSet::zero(dim),
            vec![ControlLaw::zero(1.0, dim, 1); m],
            NoiseLevel::new(sigma).unwrap(),
        )
        .unwrap()
    }

    fn only_h1(a: f64) -> KernelSet {
        KernelSet::new(
            KernelSpec::linear(a, 1).unwrap(),
            KernelSpec::zero(1),
            KernelSpec::zero(1),
            KernelSpec::zero(1),
        )
        .unwrap()
    }

    #[test]
    fn zero_field_leaves_state_unchanged() {
        let model = zero_model(2, 2, 0.0);
        let s0 = SystemState::new(2, vec![1.0, 2.0, -3.0, 0.5], vec![0.0, 0.0, 4.0, 4.0]).unwrap();
        let s1 = step(&s0, 0.01, &model, &BrownianTape::new(1, 2)).unwrap();
        assert_eq!(s1.followers(), s0.followers());
        assert_eq!(s1.herders(), s0.herders());
        assert_eq!(s1.step, 1);
        assert!((s1.t - 0.01).abs() < 1e-15);
    }

    #[test]
    fn linear_attraction_matches_exponential_decay() {
        // X = (-1, 1): mean stays 0 and each X^n solves x' = -x.
        let model = HerdModel::new(only_h1(1.0), vec![ControlLaw::zero(1.0, 1, 1)], NoiseLevel::new(0.0).unwrap()).unwrap();
        let s0 = SystemState::new(1, vec![-1.0, 1.0], vec![0.0]).unwrap();
        let traj = simulate(&s0, TimeGrid::new(1.0, 1e-3).unwrap(), &model, 0).unwrap();
        let end = traj.last();
        let exact = (-1.0f64).exp();
        assert!((end.follower(0)[0] + exact).abs() < 2e-3);
        assert!((end.follower(1)[0] - exact).abs() < 2e-3);
    }

    #[test]
    fn trivial_horizon_returns_init() {
        let model = zero_model(1, 1, 0.5);
        let s0 = SystemState::new(1, vec![0.3], vec![1.0]).unwrap();
        let traj = simulate(&s0, TimeGrid::new(0.0, 0.1).unwrap(), &model, 3).unwrap();
        assert_eq!(traj.states, vec![s0]);
    }

    #[test]
    fn brownian_variance() {
        // 10^4 replicas of one particle with sigma = 0.5: Var X(1) = 2 sigma T = 1.
        let model = zero_model(1, 1, 0.5);
        let grid = TimeGrid::new(1.0, 0.01).unwrap();
        let s0 = SystemState::new(1, vec![0.0], vec![0.0]).unwrap();
        let reps = 10_000;
        let ends: Vec<f64> = (0..reps)
            .map(|r| {
                simulate_with(&s0, grid, &model, &BrownianTape::new(r, 1), |_| Ok(()))
                    .unwrap()
                    .follower(0)[0]
            })
            .collect();
        let mean = ends.iter().sum::<f64>() / reps as f64;
        let var = ends.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
        assert!((var - 1.0).abs() < 0.05, "variance {var}");
    }

    #[test]
    fn keyed_step_matches_streamed_simulation() {
        let model = HerdModel::new(only_h1(0.5), vec![ControlLaw::zero(1.0, 1, 1)], NoiseLevel::new(0.3).unwrap()).unwrap();
        let s0 = SystemState::new(1, vec![0.0, 1.0, 2.0], vec![0.0]).unwrap();
        let grid = TimeGrid::new(1.0, 0.01).unwrap();
        let traj = simulate(&s0, grid, &model, 17).unwrap();
        let tape = BrownianTape::new(17, 1);
        let mut s = s0.clone();
        for _ in 0..5 {
            s = step(&s, grid.dt(), &model, &tape).unwrap();
        }
        assert_eq!(s.followers(), traj.states[5].followers());
    }

    #[test]
    fn herder_centroid_constant_without_controls_or_k2() {
        let kernels = KernelSet::new(
            KernelSpec::saturating(1.0, 2).unwrap(),
            KernelSpec::tanh_radial(-1.5, 0.7, 2).unwrap(),
            KernelSpec::saturating(2.0, 2).unwrap(),
            KernelSpec::zero(2),
        )
        .unwrap();
        let model = HerdModel::new(kernels, vec![ControlLaw::zero(1.0, 2, 1); 3], NoiseLevel::new(0.2).unwrap()).unwrap();
        let law = InitialLaw::Gaussian { mean: vec![0.0, 0.0], std: 1.0 };
        let s0 = SystemState::sample(&law, 20, &[0.0, 1.0, 2.0, -1.0, -2.0, 0.5], 5).unwrap();
        let c0: Vec<f64> = (0..2).map(|k| (0..3).map(|i| s0.herder(i)[k]).sum::<f64>() / 3.0).collect();
        let traj = simulate(&s0, TimeGrid::new(1.0, 0.01).unwrap(), &model, 5).unwrap();
        for s in &traj.states {
            for k in 0..2 {
                let c = (0..3).map(|i| s.herder(i)[k]).sum::<f64>() / 3.0;
                assert!((c - c0[k]).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn larger_herds_keep_prefix_tapes() {
        let model = zero_model(1, 1, 1.0);
        let law = InitialLaw::Gaussian { mean: vec![0.0], std: 1.0 };
        let small = SystemState::sample(&law, 3, &[0.0], 8).unwrap();
        let large = SystemState::sample(&law, 9, &[0.0], 8).unwrap();
        let grid = TimeGrid::new(1.0, 0.01).unwrap();
        let a = simulate(&small, grid, &model, 8).unwrap();
        let b = simulate(&large, grid, &model, 8).unwrap();
        for (sa, sb) in a.states.iter().zip(&b.states) {
            assert_eq!(sa.followers(), &sb.followers()[..3]);
        }
    }

    #[test]
    fn determinism_across_thread_counts() {
        let kernels = KernelSet::new(
            KernelSpec::saturating(1.0, 1).unwrap(),
            KernelSpec::saturating(-0.5, 1).unwrap(),
            KernelSpec::saturating(1.0, 1).unwrap(),
            KernelSpec::linear(-0.5, 1).unwrap(),
        )
        .unwrap();
        let model = HerdModel::new(kernels, vec![ControlLaw::zero(1.0, 1, 1); 2], NoiseLevel::new(0.25).unwrap()).unwrap();
        let law = InitialLaw::Gaussian { mean: vec![0.0], std: 1.0 };
        let s0 = SystemState::sample(&law, 1000, &[-1.0, 1.0], 4).unwrap();
        let grid = TimeGrid::new(0.5, 0.005).unwrap();
        let run = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| simulate(&s0, grid, &model, 4).unwrap())
        };
        let a = run(1);
        let b = run(4);
        assert_eq!(a, b);
    }

    #[test]
    fn linear_system_matches_matrix_exponential() {
        // d = 1, N = 2 followers, m = 1 herder, all kernels linear, sigma = 0.
        // State z = (x1, x2, y); z' = A z with
        //   x_n' = a1 (mean - x_n) + b1 (y - x_n)
        //   y'   = b2 (y - mean) + h·g
        let (a1, b1, b2) = (0.8, 0.5, -0.6);
        let kernels = KernelSet::new(
            KernelSpec::linear(a1, 1).unwrap(),
            KernelSpec::linear(0.3, 1).unwrap(),
            KernelSpec::linear(b1, 1).unwrap(),
            KernelSpec::linear(b2, 1).unwrap(),
        )
        .unwrap();
        let model = HerdModel::new(kernels, vec![ControlLaw::zero(1.0, 1, 1)], NoiseLevel::new(0.0).unwrap()).unwrap();
        let a = [
            [-a1 / 2.0 - b1, a1 / 2.0, b1],
            [a1 / 2.0, -a1 / 2.0 - b1, b1],
            [-b2 / 2.0, -b2 / 2.0, b2],
        ];
        // exp(A) by Taylor series (converges quickly for |A| ~ 1).
        let mut term = [[0.0; 3]; 3];
        let mut expm = [[0.0; 3]; 3];
        for i in 0..3 {
            term[i][i] = 1.0;
            expm[i][i] = 1.0;
        }
        for k in 1..40 {
            let mut next = [[0.0; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    next[i][j] = (0..3).map(|l| term[i][l] * a[l][j]).sum::<f64>() / k as f64;
                }
            }
            term = next;
            for i in 0..3 {
                for j in 0..3 {
                    expm[i][j] += term[i][j];
                }
            }
        }
        let z0 = [-1.0, 2.0, 0.5];
        let exact: Vec<f64> = (0..3).map(|i| (0..3).map(|j| expm[i][j] * z0[j]).sum()).collect();
        let dt = 1e-3;
        let s0 = SystemState::new(1, vec![z0[0], z0[1]], vec![z0[2]]).unwrap();
        let end = simulate(&s0, TimeGrid::new(1.0, dt).unwrap(), &model, 0).unwrap();
        let end = end.last();
        let got = [end.follower(0)[0], end.follower(1)[0], end.herder(0)[0]];
        for i in 0..3 {
            assert!((got[i] - exact[i]).abs() < 10.0 * dt, "{i}: {} vs {}", got[i], exact[i]);
        }
    }

    #[test]
    fn euler_self_convergence_is_first_order() {
        let kernels = KernelSet::new(
            KernelSpec::saturating(1.0, 1).unwrap(),
            KernelSpec::saturating(-0.5, 1).unwrap(),
            KernelSpec::tanh_radial(1.0, 2.0, 1).unwrap(),
            KernelSpec::saturating(-1.0, 1).unwrap(),
        )
        .unwrap();
        let h = PiecewiseConstantPath::constant(1.0, 1, 1, &[0.7], 1).unwrap();
        let ctrl = ControlLaw::new(h, GFunctional::Constant { c: vec![1.0] }, 1.0).unwrap();
        let model = HerdModel::new(kernels, vec![ctrl], NoiseLevel::new(0.0).unwrap()).unwrap();
        let s0 = SystemState::new(1, vec![-1.0, 0.0, 0.5, 2.0], vec![1.5]).unwrap();
        let endpoint = |dt: f64| {
            let s = simulate(&s0, TimeGrid::new(1.0, dt).unwrap(), &model, 0).unwrap();
            let l = s.last().clone();
            let mut v = l.followers().to_vec();
            v.extend_from_slice(l.herders());
            v
        };
        let coarse = endpoint(0.01);
        let fine = endpoint(0.005);
        let finest = endpoint(0.0025);
        // Richardson reference from the two finest runs.
        let reference: Vec<f64> = fine.iter().zip(&finest).map(|(a, b)| 2.0 * b - a).collect();
        let err = |v: &[f64]| v.iter().zip(&reference).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let ratio = err(&coarse) / err(&fine);
        assert!((1.5..=2.5).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn rejects_mismatched_herder_count_and_bad_grid() {
        let model = zero_model(1, 2, 0.0);
        let s0 = SystemState::new(1, vec![0.0], vec![0.0]).unwrap();
        assert!(step(&s0, 0.1, &model, &BrownianTape::new(0, 1)).is_err());
        assert!(TimeGrid::new(1.0, 0.3).is_err());
        assert!(TimeGrid::new(1.0, 0.02).is_err());
        assert!(NoiseLevel::new(-0.1).is_err());
        assert!(SystemState::new(1, vec![f64::NAN], vec![0.0]).is_err());
    }

    #[test]
    fn blowup_is_reported_with_step() {
        let kernels = KernelSet::new(
            KernelSpec::linear(-1e3, 1).unwrap(),
            KernelSpec::zero(1),
            KernelSpec::zero(1),
            KernelSpec::zero(1),
        )
        .unwrap();
        let model = HerdModel::new(kernels, vec![ControlLaw::zero(1.0, 1, 1)], NoiseLevel::new(0.0).unwrap()).unwrap();
        let s0 = SystemState::new(1, vec![-1.0, 1.0], vec![0.0]).unwrap();
        let err = simulate(&s0, TimeGrid::new(100.0, 0.1).unwrap(), &model, 0).unwrap_err();
        assert!(matches!(err, HerdError::Blowup { step } if step > 1));
    }
}
