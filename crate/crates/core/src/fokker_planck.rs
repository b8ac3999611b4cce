//! One-dimensional finite-volume solver for the Fokker–Planck form of the
//! limit system,
//!
//! ```text
//! ∂_t ρ − σ ∂²_x ρ = −∂_x (v ρ),   v(t, x) = (H₁ ∗ μ_t)(x) + (1/m) Σ_j K₁(Y^j(t) − x)
//! dY^i/dt = (K₂ ∗' μ_t)(Y^i) + (1/m) Σ_j H₂(Y^j − Y^i) + h^i(t)·g^i(μ_t)
//! ```
//!
//! where `(K₂ ∗' μ)(y) = ∫ K₂(y − x) dμ(x)` and `μ_t = ρ(t, x) dx`.
//!
//! Advection is first-order upwind and diffusion a centred second
//! difference, both in flux form with zero flux through the two outer faces,
//! so mass is conserved to rounding and the update is monotone under
//!
//! ```text
//! dt · (2 max|v| / dx + 2σ / dx²) ≤ cfl ≤ 1.
//! ```
//!
//! Herders advance by Heun's method, with the grid measure as the law.

use std::io::Write;

use rayon::prelude::*;

use crate::error::{invalid, HerdError, Result};
use crate::measures::{sorted_cost_1d, Cloud, EmpiricalMeasure, Field};
use crate::mckean_vlasov::{HerderPath, LawFlow};
use crate::particle::{HerdModel, TimeGrid};
use crate::rng::InitialLaw;

/// Densities below this are scheme violations rather than rounding.
const NEGATIVE_TOL: f64 = -1e-12;
/// Tolerance on total mass for a valid density.
const MASS_TOL: f64 = 1e-8;

/// Uniform grid of `n_cells` cells on `[x_min, x_max]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid1d {
    x_min: f64,
    x_max: f64,
    n_cells: usize,
}

impl Grid1d {
    pub fn new(x_min: f64, x_max: f64, n_cells: usize) -> Result<Self> {
        if !(x_min.is_finite() && x_max.is_finite() && x_min < x_max) {
            return Err(invalid("x_min", format!("need finite x_min < x_max, got [{x_min}, {x_max}]")));
        }
        if n_cells < 2 {
            return Err(invalid("n_cells", "need at least 2 cells"));
        }
        Ok(Grid1d { x_min, x_max, n_cells })
    }

    /// Grid centred on `law` wide enough for a run of length `horizon`: six
    /// standard deviations of the diffused initial law plus `horizon · speed`
    /// on each side.
    pub fn covering(law: &InitialLaw, sigma: f64, horizon: f64, speed: f64, n_cells: usize) -> Result<Self> {
        if law.dim() != 1 {
            return Err(HerdError::DimensionMismatch {
                expected: 1,
                got: law.dim(),
            });
        }
        let (lo, hi, sd) = match law {
            InitialLaw::Gaussian { mean, std } => (mean[0], mean[0], *std),
            InitialLaw::Uniform { low, high } => (low[0], high[0], (high[0] - low[0]) / 12f64.sqrt()),
            InitialLaw::Dirac { at } => (at[0], at[0], 0.0),
        };
        let pad = 6.0 * (sd * sd + 2.0 * sigma * horizon).sqrt() + horizon * speed.abs();
        Self::new(lo - pad, hi + pad, n_cells)
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / self.n_cells as f64
    }

    pub fn center(&self, i: usize) -> f64 {
        self.x_min + (i as f64 + 0.5) * self.dx()
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.n_cells).map(|i| self.center(i)).collect()
    }

    /// Position of the face between cells `i − 1` and `i`.
    pub fn face(&self, i: usize) -> f64 {
        self.x_min + i as f64 * self.dx()
    }
}

/// Cell-averaged probability density.
#[derive(Debug, Clone, PartialEq)]
pub struct GridDensity {
    grid: Grid1d,
    rho: Vec<f64>,
}

impl GridDensity {
    /// Requires nonnegative cell averages of total mass one (within 1e-8).
    pub fn new(grid: Grid1d, rho: Vec<f64>) -> Result<Self> {
        if rho.len() != grid.n_cells {
            return Err(HerdError::DimensionMismatch {
                expected: grid.n_cells,
                got: rho.len(),
            });
        }
        if let Some(r) = rho.iter().find(|r| !(r.is_finite() && **r >= 0.0)) {
            return Err(HerdError::InvalidMeasure(format!("invalid density value {r}")));
        }
        let density = GridDensity { grid, rho };
        let mass = density.mass();
        if (mass - 1.0).abs() > MASS_TOL {
            return Err(HerdError::InvalidMeasure(format!("total mass {mass} is not 1")));
        }
        Ok(density)
    }

    /// Cell averages of `f` by composite Simpson quadrature, renormalised to
    /// unit mass.
    pub fn from_fn(grid: Grid1d, f: impl Fn(f64) -> f64) -> Result<Self> {
        const PANELS: usize = 8;
        let dx = grid.dx();
        let h = dx / PANELS as f64;
        let mut rho: Vec<f64> = (0..grid.n_cells)
            .map(|i| {
                let a = grid.face(i);
                let mut s = f(a) + f(a + dx);
                for j in 1..PANELS {
                    s += if j % 2 == 1 { 4.0 } else { 2.0 } * f(a + j as f64 * h);
                }
                s * h / 3.0 / dx
            })
            .collect();
        if rho.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(HerdError::InvalidMeasure("density function must be finite and nonnegative".into()));
        }
        let mass: f64 = rho.iter().sum::<f64>() * dx;
        if mass <= 0.0 {
            return Err(HerdError::InvalidMeasure("density has no mass on the grid".into()));
        }
        rho.iter_mut().for_each(|r| *r /= mass);
        Ok(GridDensity { grid, rho })
    }

    /// Discretises an initial law; fails for laws without a density.
    pub fn from_law(grid: Grid1d, law: &InitialLaw) -> Result<Self> {
        let f = law
            .density_1d()
            .ok_or_else(|| HerdError::InvalidMeasure("initial law has no one-dimensional density".into()))?;
        Self::from_fn(grid, f)
    }

    pub fn grid(&self) -> Grid1d {
        self.grid
    }

    pub fn rho(&self) -> &[f64] {
        &self.rho
    }

    pub fn mass(&self) -> f64 {
        self.rho.iter().sum::<f64>() * self.grid.dx()
    }

    pub fn mean(&self) -> f64 {
        let dx = self.grid.dx();
        self.rho.iter().enumerate().map(|(i, r)| r * dx * self.grid.center(i)).sum::<f64>() / self.mass()
    }

    /// Variance of the cell-centre measure.
    pub fn variance(&self) -> f64 {
        let dx = self.grid.dx();
        let m = self.mean();
        self.rho
            .iter()
            .enumerate()
            .map(|(i, r)| r * dx * (self.grid.center(i) - m).powi(2))
            .sum::<f64>()
            / self.mass()
    }

    /// `∫ x² ρ dx` at cell centres.
    pub fn second_moment(&self) -> f64 {
        let dx = self.grid.dx();
        self.rho.iter().enumerate().map(|(i, r)| r * dx * self.grid.center(i).powi(2)).sum()
    }

    fn weights(&self) -> Vec<f64> {
        let dx = self.grid.dx();
        self.rho.iter().map(|r| r * dx).collect()
    }

    /// One atom per cell at its centre with weight `ρ_i dx`.
    pub fn to_measure(&self) -> Result<EmpiricalMeasure> {
        EmpiricalMeasure::new(1, self.grid.centers(), self.weights())
    }
}

/// `Σ ρ_i log ρ_i dx` over cells with positive density.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntropyReport {
    pub value: f64,
}

pub fn entropy(rho: &GridDensity) -> EntropyReport {
    let dx = rho.grid.dx();
    let value = rho.rho.iter().filter(|r| **r > 0.0).map(|r| r * r.ln() * dx).sum();
    EntropyReport { value }
}

/// Outcome of checking the finite-entropy and finite-second-moment
/// hypotheses on an initial law.
#[derive(Debug, Clone, PartialEq)]
pub enum HypothesisCheck {
    Verified { entropy: f64, second_moment: f64 },
    Violated(String),
    /// The law has no density, so the hypotheses cannot be evaluated; the
    /// density-based comparison is skipped rather than approximated.
    NotVerifiable(String),
}

impl HypothesisCheck {
    pub fn holds(&self) -> bool {
        matches!(self, HypothesisCheck::Verified { .. })
    }
}

pub fn check_hypotheses(law: &InitialLaw, grid: Grid1d) -> HypothesisCheck {
    if law.density_1d().is_none() {
        return HypothesisCheck::NotVerifiable("hypothesis not verifiable: initial law has no density".into());
    }
    match GridDensity::from_law(grid, law) {
        Ok(rho) => {
            let e = entropy(&rho).value;
            let m2 = rho.second_moment();
            if e.is_finite() && m2.is_finite() {
                HypothesisCheck::Verified {
                    entropy: e,
                    second_moment: m2,
                }
            } else {
                HypothesisCheck::Violated(format!("entropy {e}, second moment {m2}"))
            }
        }
        Err(e) => HypothesisCheck::Violated(e.to_string()),
    }
}

/// Step-size and monitoring parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FpConfig {
    /// Fraction `cfl ∈ (0, 1]` of the stability limit used as time step.
    pub cfl: f64,
    /// Velocities above this bound abort the run as a too-small domain.
    pub max_velocity: Option<f64>,
    /// Mass allowed in each of the two outermost cells before the run is
    /// aborted as a too-small domain.
    pub edge_mass_tol: f64,
}

impl Default for FpConfig {
    fn default() -> Self {
        FpConfig {
            cfl: 0.9,
            max_velocity: None,
            edge_mass_tol: 1e-6,
        }
    }
}

impl FpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cfl > 0.0 && self.cfl <= 1.0) {
            return Err(invalid("cfl", format!("must lie in (0, 1], got {}", self.cfl)));
        }
        if !(self.edge_mass_tol > 0.0) {
            return Err(invalid("edge_mass_tol", "must be positive"));
        }
        if let Some(v) = self.max_velocity {
            if !(v > 0.0) {
                return Err(invalid("max_velocity", "must be positive"));
            }
        }
        Ok(())
    }
}

/// Density and herders at every node of an output grid.
#[derive(Debug, Clone)]
pub struct FpSolution {
    pub output: TimeGrid,
    pub densities: Vec<GridDensity>,
    /// Herder positions per output node, flat `m`.
    pub herders: Vec<Vec<f64>>,
    /// Number of internal time steps taken.
    pub steps: usize,
}

impl FpSolution {
    pub fn grid(&self) -> Grid1d {
        self.densities[0].grid
    }

    /// Density at time `t`, interpolated linearly between output nodes.
    pub fn density_at(&self, t: f64) -> Result<Vec<f64>> {
        let (k, theta) = self.bracket(t)?;
        if theta == 0.0 {
            return Ok(self.densities[k].rho.clone());
        }
        let (a, b) = (&self.densities[k].rho, &self.densities[k + 1].rho);
        Ok(a.iter().zip(b).map(|(x, y)| (1.0 - theta) * x + theta * y).collect())
    }

    /// Herders at time `t`, interpolated linearly between output nodes.
    pub fn herders_at(&self, t: f64) -> Result<Vec<f64>> {
        let (k, theta) = self.bracket(t)?;
        if theta == 0.0 {
            return Ok(self.herders[k].clone());
        }
        let (a, b) = (&self.herders[k], &self.herders[k + 1]);
        Ok(a.iter().zip(b).map(|(x, y)| (1.0 - theta) * x + theta * y).collect())
    }

    fn bracket(&self, t: f64) -> Result<(usize, f64)> {
        let horizon = self.output.horizon();
        let slack = 1e-9 * horizon.max(1.0);
        if !(t >= -slack && t <= horizon + slack) {
            return Err(HerdError::GridMismatch(format!(
                "time {t} lies outside the solved interval [0, {horizon}]"
            )));
        }
        let steps = self.output.steps();
        if steps == 0 {
            return Ok((0, 0.0));
        }
        let s = (t / self.output.dt()).clamp(0.0, steps as f64);
        let k = (s.floor() as usize).min(steps - 1);
        let theta = s - k as f64;
        if theta.abs() < 1e-9 {
            return Ok((k, 0.0));
        }
        if (1.0 - theta).abs() < 1e-9 {
            return Ok((k + 1, 0.0));
        }
        Ok((k, theta))
    }

    /// One row per output node and cell: `t,x,rho`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "t,x,rho")?;
        let grid = self.grid();
        for (k, d) in self.densities.iter().enumerate() {
            let t = self.output.time(k);
            for (i, r) in d.rho.iter().enumerate() {
                writeln!(out, "{t},{},{r}", grid.center(i))?;
            }
        }
        Ok(())
    }
}

/// Face velocities `v(t, x_{i+1/2})` for the interior faces `1..n`.
fn face_velocities(model: &HerdModel, field: &Field<'_>, herders: &[f64], grid: &Grid1d, out: &mut [f64]) -> f64 {
    let h1 = model.kernels.h1();
    let k1 = model.kernels.k1();
    let inv_m = 1.0 / herders.len() as f64;
    let herd_pull = |x: f64| -> f64 {
        if k1.is_zero() {
            0.0
        } else {
            herders.iter().map(|y| k1.scalar(y - x)).sum::<f64>() * inv_m
        }
    };
    if h1.is_zero() || h1.linear_coefficient().is_some() {
        let a = h1.linear_coefficient().unwrap_or(0.0);
        let mean = field.mean()[0];
        for (j, v) in out.iter_mut().enumerate() {
            let x = grid.face(j + 1);
            *v = a * (mean - x) + herd_pull(x);
        }
    } else {
        // General H₁: direct O(n²) summation over the cells.
        let cloud = field.cloud();
        out.par_iter_mut().with_min_len(64).enumerate().for_each(|(j, v)| {
            let x = grid.face(j + 1);
            let conv: f64 = (0..cloud.len())
                .map(|l| cloud.weight(l) * h1.scalar(cloud.points[l] - x))
                .sum();
            *v = conv + herd_pull(x);
        });
    }
    out.iter().fold(0.0, |a, b| a.max(b.abs()))
}

fn weighted_mean(weights: &[f64], centers: &[f64]) -> f64 {
    weights.iter().zip(centers).map(|(w, c)| w * c).sum()
}

fn grid_field<'a>(centers: &'a [f64], weights: &'a [f64], mean: f64) -> Field<'a> {
    let cloud = Cloud {
        dim: 1,
        points: centers,
        weights: Some(weights),
    };
    Field::with_mean(cloud, vec![mean])
}

/// Advances `rho0` and the herders `y0` over the output grid.
pub fn solve_fp(
    rho0: &GridDensity,
    y0: &[f64],
    model: &HerdModel,
    output: TimeGrid,
    cfg: &FpConfig,
) -> Result<FpSolution> {
    cfg.validate()?;
    if model.dim() != 1 {
        return Err(HerdError::DimensionMismatch {
            expected: 1,
            got: model.dim(),
        });
    }
    if y0.len() != model.herders() {
        return Err(invalid(
            "y0",
            format!("expected {} herder positions, got {}", model.herders(), y0.len()),
        ));
    }
    let sigma = model.noise.sigma();
    if !(sigma > 0.0) {
        return Err(invalid("sigma", "the Fokker–Planck solver needs sigma > 0"));
    }
    let grid = rho0.grid;
    let n = grid.n_cells;
    let dx = grid.dx();
    let centers = grid.centers();
    let m = model.herders();

    let mut rho = rho0.rho.clone();
    let mut y = y0.to_vec();
    let mut t = 0.0;
    let mut steps = 0usize;
    let mut densities = vec![rho0.clone()];
    let mut herders = vec![y.clone()];

    let mut v = vec![0.0; n - 1];
    let mut vy0 = vec![0.0; m];
    let mut vy1 = vec![0.0; m];
    let mut weights: Vec<f64> = rho.iter().map(|r| r * dx).collect();
    let mut mean = weighted_mean(&weights, &centers);

    for k in 0..output.steps() {
        let t_out = output.time(k + 1);
        while t < t_out - 1e-12 * t_out.max(1.0) {
            let field = grid_field(&centers, &weights, mean);
            let vmax = face_velocities(model, &field, &y, &grid, &mut v);
            if let Some(bound) = cfg.max_velocity {
                if vmax > bound {
                    return Err(HerdError::DomainTooSmall(format!(
                        "velocity {vmax:.3e} exceeds the configured bound {bound} at t = {t}"
                    )));
                }
            }
            let dt_stable = cfg.cfl / (2.0 * vmax / dx + 2.0 * sigma / (dx * dx));
            let dt = dt_stable.min(t_out - t);
            model.herder_velocity(&field, &y, t, &mut vy0);

            // Flux-form update in one sweep: `flux_left` is the flux through
            // the left face of cell i (zero at the outer boundary), and cell
            // i + 1 is still unmodified when the right flux is formed.
            let ratio = dt / dx;
            let diff = sigma / dx;
            let mut flux_left = 0.0;
            let mut first_negative = None;
            let mut sum_wx = 0.0;
            for i in 0..n {
                let flux_right = if i + 1 < n {
                    let (left, right) = (rho[i], rho[i + 1]);
                    let vf = v[i];
                    vf.max(0.0) * left + vf.min(0.0) * right - diff * (right - left)
                } else {
                    0.0
                };
                let r = rho[i] - ratio * (flux_right - flux_left);
                rho[i] = r;
                flux_left = flux_right;
                if r < NEGATIVE_TOL && first_negative.is_none() {
                    first_negative = Some(i);
                }
                let w = r * dx;
                weights[i] = w;
                sum_wx += w * centers[i];
            }
            mean = sum_wx;
            t = if dt == t_out - t { t_out } else { t + dt };
            steps += 1;

            if let Some(cell) = first_negative {
                return Err(HerdError::SchemeViolation {
                    cell,
                    value: rho[cell],
                    t,
                });
            }
            if weights[0] > cfg.edge_mass_tol || weights[n - 1] > cfg.edge_mass_tol {
                return Err(HerdError::DomainTooSmall(format!(
                    "mass {:.3e} reached the boundary cells of [{}, {}] at t = {t}",
                    weights[0].max(weights[n - 1]),
                    grid.x_min,
                    grid.x_max
                )));
            }

            // Heun: predictor with the old law, corrector with the new one.
            let predicted: Vec<f64> = y.iter().zip(&vy0).map(|(a, b)| a + dt * b).collect();
            let field = grid_field(&centers, &weights, mean);
            model.herder_velocity(&field, &predicted, t, &mut vy1);
            for ((yi, a), b) in y.iter_mut().zip(&vy0).zip(&vy1) {
                *yi += 0.5 * dt * (a + b);
            }
            if y.iter().any(|v| !v.is_finite()) {
                return Err(HerdError::Blowup { step: steps });
            }
        }
        // Tiny negative values are rounding; they stay in the state so that
        // mass is conserved exactly, but snapshots are clipped to zero.
        let snapshot: Vec<f64> = rho.iter().map(|r| r.max(0.0)).collect();
        densities.push(GridDensity { grid, rho: snapshot });
        herders.push(y.clone());
    }
    Ok(FpSolution {
        output,
        densities,
        herders,
        steps,
    })
}

/// `max_k W₁(ρ(t_k) dx, ν_{t_k})` over the nodes of the flow, with the
/// density interpolated linearly in time between its output nodes.
pub fn equivalence_check(fp: &FpSolution, flow: &LawFlow) -> Result<f64> {
    if flow.dim() != 1 {
        return Err(HerdError::DimensionMismatch {
            expected: 1,
            got: flow.dim(),
        });
    }
    let grid = fp.grid();
    let centers = grid.centers();
    let dx = grid.dx();
    let fgrid = flow.grid();
    let mut worst: f64 = 0.0;
    for k in 0..fgrid.nodes() {
        let rho = fp.density_at(fgrid.time(k))?;
        let weights: Vec<f64> = rho.iter().map(|r| r * dx).collect();
        let total: f64 = weights.iter().sum();
        let weights: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let a = Cloud {
            dim: 1,
            points: &centers,
            weights: Some(&weights),
        };
        worst = worst.max(sorted_cost_1d(a, flow.cloud(k), 1.0));
    }
    Ok(worst)
}

/// `max_k max_i |Y^i_FP(t_k) − Ȳ^i(t_k)|` over the nodes of the herder path.
pub fn herder_gap(fp: &FpSolution, herders: &HerderPath) -> Result<f64> {
    let g = herders.grid();
    let mut worst: f64 = 0.0;
    for k in 0..g.nodes() {
        let y = fp.herders_at(g.time(k))?;
        for (a, b) in y.iter().zip(herders.node(k)) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::ControlLaw;
    use crate::kernels::{KernelSet, KernelSpec};
    use crate::particle::NoiseLevel;

    fn model(k1: KernelSpec, sigma: f64) -> HerdModel {
        let kernels = KernelSet::new(KernelSpec::zero(1), KernelSpec::zero(1), k1, KernelSpec::zero(1)).unwrap();
        HerdModel::new(kernels, vec![ControlLaw::zero(1.0, 1, 1)], NoiseLevel::new(sigma).unwrap()).unwrap()
    }

    fn gaussian(var: f64) -> impl Fn(f64) -> f64 {
        move |x| (-0.5 * x * x / var).exp() / (std::f64::consts::TAU * var).sqrt()
    }

    #[test]
    fn heat_equation_spreads_variance_linearly() {
        let grid = Grid1d::new(-8.0, 8.0, 512).unwrap();
        let rho0 = GridDensity::from_fn(grid, gaussian(0.25)).unwrap();
        let sol = solve_fp(
            &rho0,
            &[0.0],
            &model(KernelSpec::zero(1), 0.5),
            TimeGrid::from_steps(1.0, 10),
            &FpConfig::default(),
        )
        .unwrap();
        let last = sol.densities.last().unwrap();
        assert!((last.variance() - 1.25).abs() < 0.01, "variance {}", last.variance());
        assert!((last.mass() - 1.0).abs() < 1e-8);
        for d in &sol.densities {
            assert!((d.mass() - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn ornstein_uhlenbeck_stationary_law_is_preserved() {
        // K₁(y) = y with the herder pinned at 0 gives v(x) = −x; N(0, σ) is
        // stationary.
        let sigma = 0.5;
        let grid = Grid1d::new(-4.0, 4.0, 4608).unwrap();
        let rho0 = GridDensity::from_fn(grid, gaussian(sigma)).unwrap();
        let sol = solve_fp(
            &rho0,
            &[0.0],
            &model(KernelSpec::linear(1.0, 1).unwrap(), sigma),
            TimeGrid::from_steps(1.0, 4),
            &FpConfig::default(),
        )
        .unwrap();
        let v0 = rho0.variance();
        for d in &sol.densities {
            assert!((d.variance() - v0).abs() <= 1e-3, "variance drift {}", d.variance() - v0);
        }
        assert_eq!(sol.herders.last().unwrap(), &vec![0.0]);
    }

    #[test]
    fn entropy_examples() {
        let unit = GridDensity::from_fn(Grid1d::new(0.0, 1.0, 64).unwrap(), |_| 1.0).unwrap();
        assert!(entropy(&unit).value.abs() < 1e-14);
        let wide = GridDensity::from_fn(Grid1d::new(0.0, 2.0, 64).unwrap(), |_| 1.0).unwrap();
        assert!((entropy(&wide).value + 2f64.ln()).abs() < 1e-14);
        let normal = GridDensity::from_fn(Grid1d::new(-8.0, 8.0, 512).unwrap(), gaussian(1.0)).unwrap();
        assert!((entropy(&normal).value + 1.4189).abs() < 0.01);
    }

    #[test]
    fn hypotheses_on_initial_laws() {
        let grid = Grid1d::new(-8.0, 8.0, 256).unwrap();
        let g = InitialLaw::Gaussian {
            mean: vec![0.0],
            std: 1.0,
        };
        match check_hypotheses(&g, grid) {
            HypothesisCheck::Verified { second_moment, .. } => assert!((second_moment - 1.0).abs() < 0.01),
            other => panic!("{other:?}"),
        }
        let dirac = InitialLaw::Dirac { at: vec![0.0] };
        assert!(matches!(check_hypotheses(&dirac, grid), HypothesisCheck::NotVerifiable(_)));
    }

    /// `W₁` between the cell-centre measure and `N(0, var)`, by integrating
    /// `|F − Φ|` on a fine mesh.
    fn w1_to_gaussian(d: &GridDensity, var: f64) -> f64 {
        let grid = d.grid();
        let fine = 200_000;
        let (a, b) = (grid.x_min() - 1.0, grid.x_max() + 1.0);
        let h = (b - a) / fine as f64;
        let dx = grid.dx();
        let mut cdf = 0.0;
        let mut next_cell = 0;
        let mut total = 0.0;
        let mut exact = 0.0;
        let f = gaussian(var);
        for s in 0..fine {
            let x = a + (s as f64 + 0.5) * h;
            while next_cell < grid.n_cells() && grid.center(next_cell) <= x {
                cdf += d.rho()[next_cell] * dx;
                next_cell += 1;
            }
            exact += f(x) * h;
            total += (cdf - exact).abs() * h;
        }
        total
    }

    #[test]
    fn grid_refinement_reduces_the_discretisation_error() {
        let sigma = 0.5;
        let mut errs = Vec::new();
        for n in [128, 256, 512] {
            let grid = Grid1d::new(-8.0, 8.0, n).unwrap();
            let rho0 = GridDensity::from_fn(grid, gaussian(0.25)).unwrap();
            let sol = solve_fp(
                &rho0,
                &[0.0],
                &model(KernelSpec::zero(1), sigma),
                TimeGrid::from_steps(1.0, 1),
                &FpConfig::default(),
            )
            .unwrap();
            errs.push(w1_to_gaussian(sol.densities.last().unwrap(), 1.25));
        }
        assert!(errs[0] / errs[1] >= 1.5, "{errs:?}");
        assert!(errs[1] / errs[2] >= 1.5, "{errs:?}");
    }

    #[test]
    fn translation_equivariance() {
        let c = 0.75;
        let k1 = KernelSpec::saturating(1.0, 1).unwrap();
        let run = |shift: f64| {
            let grid = Grid1d::new(-8.0 + shift, 8.0 + shift, 256).unwrap();
            let rho0 = GridDensity::from_fn(grid, |x| gaussian(0.5)(x - shift)).unwrap();
            solve_fp(
                &rho0,
                &[1.0 + shift],
                &model(k1.clone(), 0.3),
                TimeGrid::from_steps(1.0, 5),
                &FpConfig::default(),
            )
            .unwrap()
        };
        let a = run(0.0);
        let b = run(c);
        for (da, db) in a.densities.iter().zip(&b.densities) {
            for (x, y) in da.rho().iter().zip(db.rho()) {
                assert!((x - y).abs() < 1e-9);
            }
            assert!((db.mean() - da.mean() - c).abs() < 1e-9);
        }
        for (ya, yb) in a.herders.iter().zip(&b.herders) {
            assert!((yb[0] - ya[0] - c).abs() < 1e-9);
        }
    }

    #[test]
    fn boundary_mass_is_reported() {
        let grid = Grid1d::new(-2.0, 2.0, 128).unwrap();
        let rho0 = GridDensity::from_fn(grid, gaussian(0.25)).unwrap();
        let err = solve_fp(
            &rho0,
            &[0.0],
            &model(KernelSpec::zero(1), 1.0),
            TimeGrid::from_steps(2.0, 2),
            &FpConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, HerdError::DomainTooSmall(_)), "{err}");

        let err = solve_fp(
            &rho0,
            &[0.0],
            &model(KernelSpec::linear(3.0, 1).unwrap(), 0.1),
            TimeGrid::from_steps(0.1, 1),
            &FpConfig {
                max_velocity: Some(1.0),
                ..FpConfig::default()
            },
        )
        .unwrap_err();
        assert!(matches!(err, HerdError::DomainTooSmall(_)), "{err}");
    }

    #[test]
    fn equivalence_against_itself_and_at_zero_dynamics() {
        let grid = Grid1d::new(-6.0, 6.0, 256).unwrap();
        let law = InitialLaw::Gaussian {
            mean: vec![0.0],
            std: 1.0,
        };
        let rho0 = GridDensity::from_law(grid, &law).unwrap();
        let out = TimeGrid::from_steps(1.0, 4);
        let sol = FpSolution {
            output: out,
            densities: vec![rho0.clone(); 5],
            herders: vec![vec![0.0]; 5],
            steps: 0,
        };
        // The density viewed as an ensemble: quantiles of the cell measure.
        let m = 4000;
        let cdf: Vec<f64> = rho0
            .rho()
            .iter()
            .scan(0.0, |c, r| {
                *c += r * grid.dx();
                Some(*c)
            })
            .collect();
        let points: Vec<f64> = (0..m)
            .map(|i| {
                let u = (i as f64 + 0.5) / m as f64;
                grid.center(cdf.partition_point(|c| *c < u).min(grid.n_cells() - 1))
            })
            .collect();
        let flow = LawFlow::constant(out, 1, &points);
        assert!(equivalence_check(&sol, &flow).unwrap() < 1e-3);

        // An independent sample of the same law: grid plus sampling error.
        let sample = law.sample_many(9, m);
        let flow = LawFlow::constant(out, 1, &sample);
        let d = equivalence_check(&sol, &flow).unwrap();
        assert!(d <= grid.dx() + 2.0 / (m as f64).sqrt(), "{d}");
    }

    #[test]
    fn interpolation_outside_the_run_is_a_grid_mismatch() {
        let grid = Grid1d::new(-6.0, 6.0, 64).unwrap();
        let rho0 = GridDensity::from_fn(grid, gaussian(1.0)).unwrap();
        let sol = FpSolution {
            output: TimeGrid::from_steps(1.0, 2),
            densities: vec![rho0; 3],
            herders: vec![vec![0.0]; 3],
            steps: 0,
        };
        let flow = LawFlow::constant(TimeGrid::from_steps(2.0, 2), 1, &[0.0, 1.0]);
        assert!(matches!(equivalence_check(&sol, &flow), Err(HerdError::GridMismatch(_))));
        let mid = sol.density_at(0.25).unwrap();
        assert_eq!(mid, sol.densities[0].rho());
    }
}
