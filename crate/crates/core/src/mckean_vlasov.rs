//! The mean-field limit, solved by Picard iteration on the law.
//!
//! The law of the limit follower `X̄` is represented by an ensemble of `M`
//! independent paths. One Picard sweep freezes the current flow `ν`,
//! integrates the herder ODE against it, then re-integrates every member
//! against the frozen flow and herders, reusing the member's Brownian tape
//! and initial datum. Sweeps repeat until
//!
//! ```text
//! max_k e^{−γ t_k} · W₁(ν⁽ʳ⁺¹⁾_{t_k}, ν⁽ʳ⁾_{t_k}) < tol
//! ```
//!
//! Because the frozen flow is sampled on the same grid as the members, the
//! fixed point is the `M`-particle Euler–Maruyama system itself.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, HerdError, Result};
use crate::measures::{sorted_cost_1d, wasserstein1, Cloud, EmpiricalMeasure, Field};
use crate::particle::{simulate_keyed, HerdModel, SystemState, TimeGrid};
use crate::rng::{BrownianTape, InitialLaw, NoiseStream};

const PAR_MIN_LEN: usize = 256;

/// Ensemble of follower paths on a uniform time grid, stored node-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LawFlow {
    grid: TimeGrid,
    dim: usize,
    members: usize,
    data: Vec<f64>,
}

impl LawFlow {
    /// `data` holds `grid.nodes()` blocks of `members × dim` coordinates.
    pub fn new(grid: TimeGrid, dim: usize, data: Vec<f64>) -> Result<Self> {
        let block = grid.nodes() * dim;
        if dim == 0 || data.is_empty() || data.len() % block != 0 {
            return Err(invalid(
                "flow",
                format!("{} values do not fill {} nodes of dimension {dim}", data.len(), grid.nodes()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(invalid("flow", "non-finite coordinate"));
        }
        Ok(LawFlow {
            grid,
            dim,
            members: data.len() / block,
            data,
        })
    }

    /// The flow that sits at `points` for all times.
    pub fn constant(grid: TimeGrid, dim: usize, points: &[f64]) -> Self {
        let mut data = Vec::with_capacity(grid.nodes() * points.len());
        for _ in 0..grid.nodes() {
            data.extend_from_slice(points);
        }
        LawFlow {
            grid,
            dim,
            members: points.len() / dim,
            data,
        }
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn members(&self) -> usize {
        self.members
    }

    /// Member positions at node `k`, flat `M × d`.
    pub fn node(&self, k: usize) -> &[f64] {
        let block = self.members * self.dim;
        &self.data[k * block..(k + 1) * block]
    }

    /// Uniform empirical measure of the ensemble at node `k`.
    pub fn snapshot(&self, k: usize) -> EmpiricalMeasure {
        EmpiricalMeasure::uniform(self.dim, self.node(k).to_vec())
            .expect("flow invariants guarantee a valid measure")
    }

    pub fn snapshots(&self) -> Vec<EmpiricalMeasure> {
        (0..self.grid.nodes()).map(|k| self.snapshot(k)).collect()
    }

    /// Path of one member, flat `nodes × d`.
    pub fn member_path(&self, i: usize) -> Vec<f64> {
        (0..self.grid.nodes())
            .flat_map(|k| self.node(k)[i * self.dim..(i + 1) * self.dim].iter().copied())
            .collect()
    }

    /// Applies `f` to every coordinate vector.
    pub fn map(&self, mut f: impl FnMut(&mut [f64])) -> Self {
        let mut out = self.clone();
        for x in out.data.chunks_mut(self.dim) {
            f(x);
        }
        out
    }

    pub(crate) fn cloud(&self, k: usize) -> Cloud<'_> {
        Cloud::uniform(self.dim, self.node(k))
    }

    /// One row per member and node: `t,weight,x1,...,xd`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        write!(out, "t,weight")?;
        for k in 1..=self.dim {
            write!(out, ",x{k}")?;
        }
        writeln!(out)?;
        let w = 1.0 / self.members as f64;
        for k in 0..self.grid.nodes() {
            let t = self.grid.time(k);
            for x in self.node(k).chunks(self.dim) {
                write!(out, "{t},{w}")?;
                for v in x {
                    write!(out, ",{v}")?;
                }
                writeln!(out)?;
            }
        }
        Ok(())
    }
}

/// Herder positions at every node of a grid, stored node-major.
#[derive(Debug, Clone, PartialEq)]
pub struct HerderPath {
    grid: TimeGrid,
    dim: usize,
    herders: usize,
    data: Vec<f64>,
}

impl HerderPath {
    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn herders(&self) -> usize {
        self.herders
    }

    /// All herders at node `k`, flat `m × d`.
    pub fn node(&self, k: usize) -> &[f64] {
        let block = self.herders * self.dim;
        &self.data[k * block..(k + 1) * block]
    }

    pub fn herder(&self, k: usize, i: usize) -> &[f64] {
        &self.node(k)[i * self.dim..(i + 1) * self.dim]
    }

    /// `max_k max_i |Y^i(t_k) − Z^i(t_k)|`
    pub fn max_deviation(&self, other: &HerderPath) -> Result<f64> {
        if self.grid != other.grid || self.data.len() != other.data.len() {
            return Err(HerdError::GridMismatch("herder paths differ in shape".into()));
        }
        Ok(self
            .data
            .chunks(self.dim)
            .zip(other.data.chunks(self.dim))
            .map(|(a, b)| euclid(a, b))
            .fold(0.0, f64::max))
    }
}

/// Stopping rule for the Picard iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PicardConfig {
    /// Time weight `γ` of the stopping norm; `None` selects `4L`.
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
}

fn default_tol() -> f64 {
    1e-3
}

fn default_max_iter() -> usize {
    50
}

impl Default for PicardConfig {
    fn default() -> Self {
        PicardConfig {
            gamma: None,
            tol: default_tol(),
            max_iter: default_max_iter(),
        }
    }
}

impl PicardConfig {
    pub fn with_tol(tol: f64) -> Self {
        PicardConfig {
            tol,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tol.is_finite() && self.tol > 0.0) {
            return Err(invalid("picard.tol", "must be positive"));
        }
        if self.max_iter == 0 {
            return Err(invalid("picard.max_iter", "must be at least 1"));
        }
        if let Some(g) = self.gamma {
            if !(g.is_finite() && g >= 0.0) {
                return Err(invalid("picard.gamma", "must be finite and >= 0"));
            }
        }
        Ok(())
    }

    /// `γ` for a model with the given Lipschitz constant.
    pub fn resolve_gamma(&self, lipschitz: f64) -> f64 {
        self.gamma.unwrap_or(4.0 * lipschitz)
    }
}

/// Everything that determines the limit flow apart from the stopping rule.
#[derive(Debug, Clone)]
pub struct MkvProblem {
    pub law: InitialLaw,
    pub y0: Vec<f64>,
    pub grid: TimeGrid,
    pub model: HerdModel,
    pub seed: u64,
    keys: Vec<u64>,
}

impl MkvProblem {
    /// Ensemble of `members` paths keyed `0..members` under `seed`.
    pub fn new(
        law: InitialLaw,
        y0: Vec<f64>,
        grid: TimeGrid,
        model: HerdModel,
        members: usize,
        seed: u64,
    ) -> Result<Self> {
        law.validate()?;
        let d = model.dim();
        if law.dim() != d {
            return Err(HerdError::DimensionMismatch {
                expected: d,
                got: law.dim(),
            });
        }
        if y0.len() != d * model.herders() {
            return Err(invalid(
                "y0",
                format!("expected {} herder coordinates, got {}", d * model.herders(), y0.len()),
            ));
        }
        if y0.iter().any(|v| !v.is_finite()) {
            return Err(invalid("y0", "herder positions must be finite"));
        }
        if members < 2 {
            return Err(invalid("M", "ensemble needs at least 2 members"));
        }
        Ok(MkvProblem {
            law,
            y0,
            grid,
            model,
            seed,
            keys: (0..members as u64).collect(),
        })
    }

    /// Replaces the member keys. Member `i` draws its initial datum and
    /// Brownian increments from key `keys[i]`.
    pub fn with_keys(mut self, keys: Vec<u64>) -> Result<Self> {
        if keys.len() < 2 {
            return Err(invalid("M", "ensemble needs at least 2 members"));
        }
        self.keys = keys;
        Ok(self)
    }

    pub fn members(&self) -> usize {
        self.keys.len()
    }

    pub fn keys(&self) -> &[u64] {
        &self.keys
    }

    pub fn tape(&self) -> BrownianTape {
        BrownianTape::new(self.seed, self.model.dim())
    }

    fn initial_points(&self, keys: &[u64]) -> Vec<f64> {
        let d = self.model.dim();
        let mut out = vec![0.0; keys.len() * d];
        for (chunk, &key) in out.chunks_mut(d).zip(keys) {
            self.law.sample_into(self.seed, key, chunk);
        }
        out
    }

    fn check_flow(&self, flow: &LawFlow) -> Result<()> {
        if flow.grid != self.grid {
            return Err(HerdError::GridMismatch("flow and problem use different time grids".into()));
        }
        if flow.dim != self.model.dim() {
            return Err(HerdError::DimensionMismatch {
                expected: self.model.dim(),
                got: flow.dim,
            });
        }
        Ok(())
    }
}

/// Converged limit flow with its herders.
#[derive(Debug, Clone)]
pub struct MkvSolution {
    pub flow: LawFlow,
    pub herders: HerderPath,
    /// Number of Picard sweeps performed.
    pub sweeps: usize,
    /// Stopping quantity after every sweep.
    pub history: Vec<f64>,
    /// Weight `γ` used in the stopping quantity.
    pub gamma: f64,
}

/// Integrates the herder ODE by explicit Euler against a frozen flow.
pub fn herders_under(problem: &MkvProblem, flow: &LawFlow) -> Result<HerderPath> {
    problem.check_flow(flow)?;
    let grid = problem.grid;
    let model = &problem.model;
    let d = model.dim();
    let m = model.herders();
    let dt = grid.dt();
    let mut data = Vec::with_capacity(grid.nodes() * m * d);
    data.extend_from_slice(&problem.y0);
    let mut v = vec![0.0; m * d];
    for k in 0..grid.steps() {
        let field = Field::new(flow.cloud(k));
        let y = data[k * m * d..(k + 1) * m * d].to_vec();
        model.herder_velocity(&field, &y, grid.time(k), &mut v);
        for (yi, vi) in y.iter().zip(&v) {
            let next = yi + dt * vi;
            if !next.is_finite() {
                return Err(HerdError::Blowup { step: k + 1 });
            }
            data.push(next);
        }
    }
    Ok(HerderPath {
        grid,
        dim: d,
        herders: m,
        data,
    })
}

/// Integrates followers started at `x0` with tapes `keys` against a frozen
/// flow and frozen herders.
fn followers_under(
    problem: &MkvProblem,
    keys: &[u64],
    x0: &[f64],
    flow: &LawFlow,
    herders: &HerderPath,
) -> Result<LawFlow> {
    let grid = problem.grid;
    let model = &problem.model;
    let d = model.dim();
    let n = keys.len();
    let block = n * d;
    let dt = grid.dt();
    let amp = (2.0 * model.noise.sigma() * dt).sqrt();
    let tape = problem.tape();
    let mut streams: Vec<NoiseStream> = keys.iter().map(|&key| tape.stream_at(key, 0)).collect();

    let mut data = vec![0.0; grid.nodes() * block];
    data[..block].copy_from_slice(x0);
    for k in 0..grid.steps() {
        let field = Field::new(flow.cloud(k));
        let y = herders.node(k);
        let (done, rest) = data.split_at_mut((k + 1) * block);
        let current = &done[k * block..];
        let next = &mut rest[..block];
        next.par_chunks_mut(d)
            .zip(current.par_chunks(d))
            .zip(streams.par_iter_mut())
            .with_min_len(PAR_MIN_LEN)
            .for_each_init(
                || (vec![0.0; d], vec![0.0; d]),
                |(drift, xi), ((xn, x), stream)| {
                    model.follower_drift(&field, y, x, drift);
                    stream.next_into(xi);
                    for c in 0..d {
                        xn[c] = x[c] + dt * drift[c] + amp * xi[c];
                    }
                },
            );
        if next.iter().any(|v| !v.is_finite()) {
            return Err(HerdError::Blowup { step: k + 1 });
        }
    }
    Ok(LawFlow {
        grid,
        dim: d,
        members: n,
        data,
    })
}

/// One application of the Picard map: herders under `flow`, then the
/// ensemble re-integrated under `flow` and those herders.
pub fn picard_sweep(problem: &MkvProblem, flow: &LawFlow) -> Result<(LawFlow, HerderPath)> {
    let herders = herders_under(problem, flow)?;
    let x0 = problem.initial_points(&problem.keys);
    let next = followers_under(problem, &problem.keys, &x0, flow, &herders)?;
    Ok((next, herders))
}

/// Synchronous-coupling bound `(1/M) Σ |a_i − b_i|` between equal-size
/// uniform ensembles; an upper bound on `W₁`.
fn coupling_gap(a: Cloud<'_>, b: Cloud<'_>) -> f64 {
    let n = a.len();
    (0..n).map(|i| euclid(a.point(i), b.point(i))).sum::<f64>() / n as f64
}

/// `max_k e^{−γ t_k} · gap(a_k, b_k)` over the grid, where the gap is the
/// exact `W₁` in one dimension and the coupling bound otherwise.
///
/// In one dimension the cheap coupling bounds are computed first and nodes
/// are visited in decreasing order of their bound, sorting only until no
/// remaining node can beat the running maximum. The result is exact.
pub fn weighted_gap(a: &LawFlow, b: &LawFlow, gamma: f64) -> Result<f64> {
    check_same_grid(a, b)?;
    let grid = a.grid;
    let weight = |k: usize| (-gamma * grid.time(k)).exp();
    if a.members != b.members {
        if a.dim > 1 {
            return Err(invalid("flow", "coupling bound needs equal ensemble sizes"));
        }
        return Ok((0..grid.nodes())
            .into_par_iter()
            .map(|k| weight(k) * sorted_cost_1d(a.cloud(k), b.cloud(k), 1.0))
            .reduce(|| 0.0, f64::max));
    }
    let bounds: Vec<f64> = (0..grid.nodes())
        .into_par_iter()
        .map(|k| weight(k) * coupling_gap(a.cloud(k), b.cloud(k)))
        .collect();
    if a.dim > 1 {
        return Ok(bounds.into_iter().fold(0.0, f64::max));
    }
    let mut order: Vec<usize> = (0..bounds.len()).collect();
    order.sort_by(|&i, &j| bounds[j].total_cmp(&bounds[i]));
    let mut best: f64 = 0.0;
    // Batches keep the parallel schedule busy while still pruning early.
    let batch = rayon::current_num_threads().max(1);
    for chunk in order.chunks(batch) {
        if bounds[chunk[0]] <= best {
            break;
        }
        let exact = chunk
            .par_iter()
            .filter(|&&k| bounds[k] > best)
            .map(|&k| weight(k) * sorted_cost_1d(a.cloud(k), b.cloud(k), 1.0))
            .reduce(|| 0.0, f64::max);
        best = best.max(exact);
    }
    Ok(best)
}

fn check_same_grid(a: &LawFlow, b: &LawFlow) -> Result<()> {
    if a.grid != b.grid {
        return Err(HerdError::GridMismatch(format!(
            "{} nodes on [0, {}] vs {} nodes on [0, {}]",
            a.grid.nodes(),
            a.grid.horizon(),
            b.grid.nodes(),
            b.grid.horizon()
        )));
    }
    if a.dim != b.dim {
        return Err(HerdError::DimensionMismatch {
            expected: a.dim,
            got: b.dim,
        });
    }
    Ok(())
}

/// Solves the limit system by Picard iteration from the flow frozen at the
/// initial ensemble.
pub fn solve_mkv(problem: &MkvProblem, cfg: &PicardConfig) -> Result<MkvSolution> {
    cfg.validate()?;
    let gamma = cfg.resolve_gamma(problem.model.lipschitz_bound());
    let x0 = problem.initial_points(&problem.keys);
    let mut flow = LawFlow::constant(problem.grid, problem.model.dim(), &x0);
    let mut history = Vec::new();
    for sweep in 1..=cfg.max_iter {
        let herders = herders_under(problem, &flow)?;
        let next = followers_under(problem, &problem.keys, &x0, &flow, &herders)?;
        let gap = weighted_gap(&next, &flow, gamma)?;
        history.push(gap);
        flow = next;
        log::debug!("Picard sweep {sweep}: weighted gap {gap:.3e}");
        if gap < cfg.tol {
            let herders = herders_under(problem, &flow)?;
            return Ok(MkvSolution {
                flow,
                herders,
                sweeps: sweep,
                history,
                gamma,
            });
        }
    }
    let n = history.len();
    let last_distance = history[n - 1];
    let last_ratio = if n >= 2 && history[n - 2] > 0.0 {
        last_distance / history[n - 2]
    } else {
        f64::NAN
    };
    Err(HerdError::PicardNotConverged {
        sweeps: n,
        last_distance,
        last_ratio,
    })
}

/// `max_k W₁(a_k, b_k)` over a shared time grid, exact in every dimension.
pub fn law_distance(a: &LawFlow, b: &LawFlow) -> Result<f64> {
    check_same_grid(a, b)?;
    if a.dim == 1 {
        return Ok((0..a.grid.nodes())
            .into_par_iter()
            .map(|k| sorted_cost_1d(a.cloud(k), b.cloud(k), 1.0))
            .reduce(|| 0.0, f64::max));
    }
    let mut worst: f64 = 0.0;
    for k in 0..a.grid.nodes() {
        worst = worst.max(wasserstein1(&a.snapshot(k), &b.snapshot(k))?);
    }
    Ok(worst)
}

/// Pathwise gap between `N` coupled followers of the finite system and of
/// the limit system, plus the herder gap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoupledError {
    /// `max_n max_k |X^n(t_k) − X̄^n(t_k)|`
    pub followers: f64,
    /// `max_i max_k |Y^i(t_k) − Ȳ^i(t_k)|`
    pub herders: f64,
}

impl CoupledError {
    pub fn total(&self) -> f64 {
        self.followers + self.herders
    }
}

/// Runs the `N`-particle system and `N` copies of the limit system driven by
/// the same initial data and Brownian tapes (keys `0..N` under
/// `problem.seed`), the latter against the precomputed `reference` flow.
pub fn coupled_chaos_error(problem: &MkvProblem, reference: &MkvSolution, n: usize) -> Result<CoupledError> {
    let keys: Vec<u64> = (0..n as u64).collect();
    coupled_chaos_block(problem, reference, &keys)
}

/// As [`coupled_chaos_error`] for an `N`-particle system whose follower `n`
/// uses tape and initial draw `keys[n]`. Disjoint key blocks give
/// independent replicas of the coupled pair against one reference flow.
pub fn coupled_chaos_block(problem: &MkvProblem, reference: &MkvSolution, keys: &[u64]) -> Result<CoupledError> {
    problem.check_flow(&reference.flow)?;
    if keys.is_empty() {
        return Err(invalid("N", "need at least one follower"));
    }
    let x0 = problem.initial_points(keys);
    let copies = followers_under(problem, keys, &x0, &reference.flow, &reference.herders)?;

    let d = problem.model.dim();
    let init = SystemState::new(d, x0, problem.y0.clone())?;
    let mut err = CoupledError {
        followers: 0.0,
        herders: 0.0,
    };
    simulate_keyed(&init, problem.grid, &problem.model, &problem.tape(), keys, |s| {
        let k = s.step as usize;
        let limit = copies.node(k);
        for (x, xb) in s.followers().chunks(d).zip(limit.chunks(d)) {
            err.followers = err.followers.max(euclid(x, xb));
        }
        for (y, yb) in s.herders().chunks(d).zip(reference.herders.node(k).chunks(d)) {
            err.herders = err.herders.max(euclid(y, yb));
        }
        Ok(())
    })?;
    Ok(err)
}

/// Solves the reference limit flow for `problem` (whose keys must be the
/// default `0..M_ref`, so that the first `N` tapes are shared) and returns the
/// coupled error at `N ≤ M_ref`.
pub fn coupled_chaos_run(problem: &MkvProblem, cfg: &PicardConfig, n: usize) -> Result<CoupledError> {
    if n > problem.members() {
        return Err(invalid(
            "M_ref",
            format!("reference ensemble of {} is smaller than N = {n}", problem.members()),
        ));
    }
    if problem.keys.iter().enumerate().any(|(i, &k)| k != i as u64) {
        return Err(invalid("keys", "reference tapes must be keyed 0..M_ref"));
    }
    let reference = solve_mkv(problem, cfg)?;
    coupled_chaos_error(problem, &reference, n)
}

#[inline]
fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::{ControlLaw, GFunctional, PiecewiseConstantPath};
    use crate::kernels::{KernelSet, KernelSpec};
    use crate::particle::{simulate_with, NoiseLevel};

    fn gaussian(std: f64) -> InitialLaw {
        InitialLaw::Gaussian {
            mean: vec![0.0],
            std,
        }
    }

    fn pushing_control(horizon: f64) -> ControlLaw {
        let h = PiecewiseConstantPath::new(horizon, 1, 1, vec![0.5, -0.5, 1.0, 0.0]).unwrap();
        ControlLaw::new(h, GFunctional::Constant { c: vec![1.0] }, 1.0).unwrap()
    }

    fn interacting_problem(members: usize, seed: u64) -> MkvProblem {
        let kernels = KernelSet::new(
            KernelSpec::linear(1.0, 1).unwrap(),
            KernelSpec::zero(1),
            KernelSpec::saturating(1.0, 1).unwrap(),
            KernelSpec::saturating(-0.5, 1).unwrap(),
        )
        .unwrap();
        let model = HerdModel::new(kernels, vec![pushing_control(1.0)], NoiseLevel::new(0.25).unwrap()).unwrap();
        MkvProblem::new(gaussian(1.0), vec![1.5], TimeGrid::new(1.0, 0.01).unwrap(), model, members, seed)
            .unwrap()
    }

    #[test]
    fn law_free_dynamics_converge_after_one_sweep() {
        let kernels = KernelSet::new(
            KernelSpec::zero(1),
            KernelSpec::zero(1),
            KernelSpec::saturating(1.0, 1).unwrap(),
            KernelSpec::zero(1),
        )
        .unwrap();
        let model = HerdModel::new(kernels, vec![pushing_control(1.0)], NoiseLevel::new(0.25).unwrap()).unwrap();
        let problem =
            MkvProblem::new(gaussian(1.0), vec![2.0], TimeGrid::new(1.0, 0.01).unwrap(), model, 200, 3).unwrap();
        let sol = solve_mkv(&problem, &PicardConfig::default()).unwrap();
        assert_eq!(sol.sweeps, 2);
        assert!(sol.history[0] > 0.0);
        assert_eq!(sol.history[1], 0.0);
    }

    #[test]
    fn variance_follows_the_moment_ode() {
        // H₁(y) = y pulls every follower to the mean: dVar/dt = −2 Var + 2σ.
        let sigma = 0.5;
        let kernels = KernelSet::new(
            KernelSpec::linear(1.0, 1).unwrap(),
            KernelSpec::zero(1),
            KernelSpec::zero(1),
            KernelSpec::zero(1),
        )
        .unwrap();
        let model = HerdModel::new(
            kernels,
            vec![ControlLaw::zero(1.0, 1, 1)],
            NoiseLevel::new(sigma).unwrap(),
        )
        .unwrap();
        let problem =
            MkvProblem::new(gaussian(1.0), vec![0.0], TimeGrid::new(1.0, 1e-3).unwrap(), model, 10_000, 17)
                .unwrap();
        let sol = solve_mkv(&problem, &PicardConfig::with_tol(1e-10)).unwrap();
        let flow = &sol.flow;
        let last = flow.snapshot(flow.grid().steps());
        let mean = last.mean()[0];
        let var = last.points().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / last.len() as f64;
        let exact = sigma + (1.0 - sigma) * (-2.0f64).exp();
        assert!((var - exact).abs() < 0.02, "Var(1) = {var}, expected {exact}");
        // The drift E[X] − X has zero mean, so the ensemble mean moves only
        // by the averaged noise; the Monte Carlo band is on that displacement.
        let tape = problem.tape();
        let amp = (2.0 * sigma * flow.grid().dt()).sqrt();
        let mut streams: Vec<_> = (0..10_000u64).map(|n| tape.stream(n)).collect();
        let m0 = flow.snapshot(0).mean()[0];
        let mut noise = 0.0;
        let mut xi = [0.0];
        for k in 0..flow.grid().nodes() {
            let m = flow.snapshot(k).mean()[0];
            assert!((m - m0).abs() < 0.02, "mean moved by {} at node {k}", m - m0);
            assert!((m - m0 - noise).abs() < 1e-9, "drift moved the mean by {} at node {k}", m - m0 - noise);
            let avg: f64 = streams
                .iter_mut()
                .map(|s| {
                    s.next_into(&mut xi);
                    xi[0]
                })
                .sum::<f64>()
                / 10_000.0;
            noise += amp * avg;
        }
        assert!(m0.abs() < 0.02, "initial mean {m0}");
    }

    #[test]
    fn fixed_point_is_the_particle_system_of_the_same_size() {
        let problem = interacting_problem(64, 5);
        let sol = solve_mkv(&problem, &PicardConfig::with_tol(1e-13)).unwrap();
        let init = SystemState::sample(&problem.law, 64, &problem.y0, 5).unwrap();
        let mut worst: f64 = 0.0;
        simulate_with(&init, problem.grid, &problem.model, &problem.tape(), |s| {
            let k = s.step as usize;
            for (a, b) in s.followers().iter().zip(sol.flow.node(k)) {
                worst = worst.max((a - b).abs());
            }
            for (a, b) in s.herders().iter().zip(sol.herders.node(k)) {
                worst = worst.max((a - b).abs());
            }
            Ok(())
        })
        .unwrap();
        assert!(worst < 1e-10, "max gap {worst}");
    }

    #[test]
    fn converged_flow_is_a_fixed_point() {
        let problem = interacting_problem(500, 8);
        let cfg = PicardConfig::default();
        let sol = solve_mkv(&problem, &cfg).unwrap();
        let (again, _) = picard_sweep(&problem, &sol.flow).unwrap();
        let moved = weighted_gap(&again, &sol.flow, sol.gamma).unwrap();
        assert!(moved < 2.0 * cfg.tol, "moved {moved}");
    }

    #[test]
    fn member_order_does_not_matter() {
        let cfg = PicardConfig::default();
        let base = interacting_problem(300, 21);
        let reversed = base.clone().with_keys((0..300u64).rev().collect()).unwrap();
        let a = solve_mkv(&base, &cfg).unwrap();
        let b = solve_mkv(&reversed, &cfg).unwrap();
        // Member i of the reversed ensemble is member 299 − i of the base one.
        assert_eq!(b.flow.member_path(0).len(), a.flow.member_path(299).len());
        assert!(law_distance(&a.flow, &b.flow).unwrap() <= 2.0 * cfg.tol);
        assert!(a.herders.max_deviation(&b.herders).unwrap() <= 2.0 * cfg.tol);
    }

    #[test]
    fn herders_satisfy_their_integral_equation() {
        let problem = interacting_problem(400, 2);
        let sol = solve_mkv(&problem, &PicardConfig::default()).unwrap();
        let grid = problem.grid;
        let dt = grid.dt();
        // Trapezoid quadrature of the herder velocity along (Ȳ, μ̄).
        let mut v_prev = vec![0.0; 1];
        let mut v = vec![0.0; 1];
        problem
            .model
            .herder_velocity(&Field::new(sol.flow.cloud(0)), sol.herders.node(0), 0.0, &mut v_prev);
        let mut integral = 0.0;
        let mut defect: f64 = 0.0;
        for k in 1..grid.nodes() {
            problem.model.herder_velocity(
                &Field::new(sol.flow.cloud(k)),
                sol.herders.node(k),
                grid.time(k),
                &mut v,
            );
            integral += 0.5 * dt * (v_prev[0] + v[0]);
            v_prev.copy_from_slice(&v);
            let y = sol.herders.node(k)[0] - problem.y0[0];
            defect = defect.max((y - integral).abs());
        }
        assert!(defect <= 5.0 * dt, "defect {defect}");
    }

    #[test]
    fn too_few_sweeps_is_reported() {
        let problem = interacting_problem(100, 1);
        let cfg = PicardConfig {
            max_iter: 2,
            tol: 1e-12,
            gamma: None,
        };
        match solve_mkv(&problem, &cfg) {
            Err(HerdError::PicardNotConverged { sweeps, last_ratio, .. }) => {
                assert_eq!(sweeps, 2);
                assert!(last_ratio.is_finite());
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn law_distance_examples() {
        let grid = TimeGrid::from_steps(1.0, 10);
        let a = LawFlow::new(grid, 1, gaussian(1.0).sample_many(1, 1000 * grid.nodes())).unwrap();
        assert_eq!(law_distance(&a, &a).unwrap(), 0.0);
        let shifted = a.map(|x| x[0] += 0.7);
        assert!((law_distance(&a, &shifted).unwrap() - 0.7).abs() < 1e-12);

        let b = LawFlow::new(grid, 1, gaussian(1.0).sample_many(2, 1000 * grid.nodes())).unwrap();
        assert!(law_distance(&a, &b).unwrap() <= 0.1);

        let other = LawFlow::constant(TimeGrid::from_steps(1.0, 20), 1, &[0.0, 1.0]);
        assert!(matches!(law_distance(&a, &other), Err(HerdError::GridMismatch(_))));
    }

    #[test]
    fn law_distance_in_two_dimensions() {
        let grid = TimeGrid::from_steps(1.0, 4);
        let pts: Vec<f64> = (0..40 * grid.nodes()).map(|i| (i as f64 * 0.37).sin()).collect();
        let a = LawFlow::new(grid, 2, pts).unwrap();
        let b = a.map(|x| {
            x[0] += 0.3;
            x[1] -= 0.4;
        });
        assert!((law_distance(&a, &b).unwrap() - 0.5).abs() < 1e-9);
    }

    #[test]
    fn decoupled_systems_have_zero_chaos_error() {
        let model = HerdModel::new(
            KernelSet::zero(1),
            vec![ControlLaw::zero(1.0, 1, 1)],
            NoiseLevel::new(0.3).unwrap(),
        )
        .unwrap();
        let problem =
            MkvProblem::new(gaussian(1.0), vec![0.0], TimeGrid::new(1.0, 0.01).unwrap(), model, 256, 4).unwrap();
        let err = coupled_chaos_run(&problem, &PicardConfig::default(), 16).unwrap();
        assert_eq!(err.total(), 0.0);
    }

    #[test]
    fn flow_csv_layout() {
        let flow = LawFlow::constant(TimeGrid::from_steps(1.0, 1), 1, &[0.5, 1.5]);
        let mut buf = Vec::new();
        flow.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "t,weight,x1\n0,0.5,0.5\n0,0.5,1.5\n1,0.5,0.5\n1,0.5,1.5\n");
    }
}
