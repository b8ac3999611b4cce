//! Replicated numerical experiments: propagation-of-chaos rate, SDE/PDE
//! equivalence, moment bounds, stability under oscillating controls and
//! convergence of minima.
//!
//! Every driver is deterministic in its seeds. Tables write as CSV with a
//! header row.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::{ControlLaw, GFunctional, PiecewiseConstantPath, TestFunction};
use crate::cost::{ControlCost, ControlPenalty, CostSpec, DiscreteSetup, Lagrangian};
use crate::error::{invalid, Result};
use crate::fokker_planck::{equivalence_check, herder_gap, solve_fp, FpConfig, Grid1d, GridDensity};
use crate::kernels::{KernelSet, KernelSpec};
use crate::mckean_vlasov::{coupled_chaos_block, law_distance, solve_mkv, MkvProblem, MkvSolution, PicardConfig};
use crate::measures::moment_of;
use crate::optimizer::{
    minimize, ControlTemplate, DiscreteObjective, Dynamics, LimitObjective, OptimizerConfig,
};
use crate::particle::{HerdModel, NoiseLevel, TimeGrid};
use crate::rng::{derive_seed, InitialLaw};

/// Dynamics, initial data and herder controls of one experiment.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub kernels: KernelSet,
    pub noise: NoiseLevel,
    pub law: InitialLaw,
    pub y0: Vec<f64>,
    pub grid: TimeGrid,
    pub controls: Vec<ControlLaw>,
}

impl Scenario {
    /// The one-dimensional reference configuration: followers attract each
    /// other linearly and are pulled towards a single herder through a
    /// saturating kernel; the herder drifts back towards the herd and is
    /// steered by `h·g(μ)` with two tanh statistics of the herd.
    pub fn benchmark() -> Self {
        let kernels = KernelSet::new(
            KernelSpec::linear(1.0, 1).expect("valid kernel"),
            KernelSpec::zero(1),
            KernelSpec::saturating(1.0, 1).expect("valid kernel"),
            KernelSpec::saturating(-0.5, 1).expect("valid kernel"),
        )
        .expect("kernels share d = 1");
        let h = PiecewiseConstantPath::constant(1.0, 1, 2, &[0.5, -0.25], 8).expect("valid path");
        let control = ControlLaw::new(h, benchmark_g(), 2.0).expect("h inside the box");
        Scenario {
            kernels,
            noise: NoiseLevel::new(0.25).expect("sigma >= 0"),
            law: InitialLaw::Gaussian {
                mean: vec![0.0],
                std: 1.0,
            },
            y0: vec![2.0],
            grid: TimeGrid::new(1.0, 0.01).expect("valid grid"),
            controls: vec![control],
        }
    }

    pub fn model(&self) -> Result<HerdModel> {
        HerdModel::new(self.kernels.clone(), self.controls.clone(), self.noise)
    }

    pub fn with_controls(&self, controls: Vec<ControlLaw>) -> Self {
        Scenario {
            controls,
            ..self.clone()
        }
    }

    pub fn dynamics(&self) -> Dynamics {
        Dynamics {
            kernels: self.kernels.clone(),
            noise: self.noise,
        }
    }

    pub fn mkv_problem(&self, members: usize, seed: u64) -> Result<MkvProblem> {
        MkvProblem::new(self.law.clone(), self.y0.clone(), self.grid, self.model()?, members, seed)
    }
}

fn benchmark_g() -> GFunctional {
    GFunctional::TanhStatistic {
        features: vec![
            TestFunction {
                axis: 0,
                center: 0.0,
                clip: 2.0,
            },
            TestFunction {
                axis: 0,
                center: 1.0,
                clip: 0.5,
            },
        ],
    }
}

/// Free `h` on `intervals` pieces for each herder of the benchmark.
pub fn benchmark_template(intervals: usize) -> ControlTemplate {
    ControlTemplate::new(1.0, 1, intervals, 2.0, vec![benchmark_g()]).expect("valid template")
}

/// Herding cost of the benchmark: bring the herd and the herder to 1.5 with
/// an ℓ₁ price on `h`.
pub fn benchmark_cost() -> CostSpec {
    CostSpec {
        lagrangian: Lagrangian::ClampedTracking {
            follower_target: vec![1.5],
            herder_targets: vec![vec![1.5]],
            alpha: 1.0,
            beta: 0.1,
            radius: 3.0,
        },
        control: ControlCost {
            lambda: 0.05,
            kappa: 0.0,
            penalty: ControlPenalty::L1,
        },
    }
}

pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of an empty sample");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Least-squares fit of `log y = a + b log x`; returns `(b, a)`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> (f64, f64) {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Empirical-measure convergence rate `N^{-1/2} + N^{-(p-1)/p}`.
pub fn sampling_rate(n: usize, p: f64) -> f64 {
    let n = n as f64;
    n.powf(-0.5) + n.powf(-(p - 1.0) / p)
}

fn write_row<W: Write>(out: &mut W, cells: &[String]) -> Result<()> {
    writeln!(out, "{}", cells.join(","))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Propagation of chaos

#[derive(Debug, Clone, PartialEq)]
pub struct ChaosRow {
    pub n: usize,
    pub median: f64,
    /// Block-averaged coupled error, one per replica seed.
    pub errors: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChaosTable {
    pub rows: Vec<ChaosRow>,
    pub slope: f64,
    pub intercept: f64,
    pub reference_members: usize,
}

impl ChaosTable {
    pub fn strictly_decreasing(&self) -> bool {
        self.rows.windows(2).all(|w| w[1].median < w[0].median)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "N,median_error,min_error,max_error,slope")?;
        for r in &self.rows {
            let lo = r.errors.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = r.errors.iter().copied().fold(0.0, f64::max);
            write_row(
                &mut out,
                &[
                    r.n.to_string(),
                    r.median.to_string(),
                    lo.to_string(),
                    hi.to_string(),
                    self.slope.to_string(),
                ],
            )?;
        }
        Ok(())
    }
}

/// Coupled chaos error over the `ns` grid, replicated over `seeds`.
///
/// For each seed a reference flow of `reference_members` paths (default
/// `16·max N`) is solved once. The expectation at each `N` is estimated by
/// averaging `blocks` independent `N`-particle systems, the `b`-th using the
/// reference tapes and initial draws `b·N .. (b+1)·N`.
pub fn chaos_rate(
    scenario: &Scenario,
    ns: &[usize],
    seeds: &[u64],
    reference_members: Option<usize>,
    blocks: usize,
    picard: &PicardConfig,
) -> Result<ChaosTable> {
    if ns.len() < 2 || ns.windows(2).any(|w| w[1] <= w[0]) || ns[0] == 0 {
        return Err(invalid("N", "grid must be increasing, positive and have two points"));
    }
    if seeds.is_empty() {
        return Err(invalid("seeds", "need at least one replica seed"));
    }
    if blocks == 0 {
        return Err(invalid("blocks", "need at least one coupled system per N"));
    }
    let n_max = *ns.last().expect("nonempty");
    let m_ref = reference_members.unwrap_or(16 * n_max);
    if m_ref < blocks * n_max {
        return Err(invalid(
            "M_ref",
            format!("{m_ref} paths cannot hold {blocks} disjoint blocks of N = {n_max}"),
        ));
    }
    let mut errors = vec![Vec::with_capacity(seeds.len()); ns.len()];
    for &seed in seeds {
        let problem = scenario.mkv_problem(m_ref, seed)?;
        let reference = solve_mkv(&problem, picard)?;
        log::info!("chaos: seed {seed} reference solved in {} sweeps", reference.sweeps);
        let jobs: Vec<(usize, usize)> = (0..ns.len()).flat_map(|i| (0..blocks).map(move |b| (i, b))).collect();
        let per_job = jobs
            .par_iter()
            .map(|&(i, b)| {
                let n = ns[i] as u64;
                let keys: Vec<u64> = (b as u64 * n..(b as u64 + 1) * n).collect();
                coupled_chaos_block(&problem, &reference, &keys).map(|e| e.total())
            })
            .collect::<Result<Vec<_>>>()?;
        for (i, slot) in errors.iter_mut().enumerate() {
            let sum: f64 = per_job[i * blocks..(i + 1) * blocks].iter().sum();
            slot.push(sum / blocks as f64);
        }
    }
    let rows: Vec<ChaosRow> = ns
        .iter()
        .zip(errors)
        .map(|(&n, errors)| ChaosRow {
            n,
            median: median(&errors),
            errors,
        })
        .collect();
    let x: Vec<f64> = rows.iter().map(|r| r.n as f64).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.median).collect();
    let (slope, intercept) = loglog_slope(&x, &y);
    Ok(ChaosTable {
        rows,
        slope,
        intercept,
        reference_members: m_ref,
    })
}

// ---------------------------------------------------------------------------
// SDE / PDE equivalence

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceRow {
    pub cells: usize,
    pub members: usize,
    /// `max_t W₁` between the grid density and the ensemble law.
    pub distance: f64,
    /// `max_t max_i |Y_FP − Y_MKV|`
    pub herder_gap: f64,
}

pub fn write_equivalence_csv<W: Write>(rows: &[EquivalenceRow], mut out: W) -> Result<()> {
    writeln!(out, "cells,M,distance,herder_gap")?;
    for r in rows {
        write_row(
            &mut out,
            &[
                r.cells.to_string(),
                r.members.to_string(),
                r.distance.to_string(),
                r.herder_gap.to_string(),
            ],
        )?;
    }
    Ok(())
}

/// Solves the Fokker–Planck system on `cells` cells and the McKean–Vlasov
/// system with `members` paths, and compares the two laws node by node.
pub fn equivalence_experiment(
    scenario: &Scenario,
    cells: usize,
    members: usize,
    seed: u64,
    picard: &PicardConfig,
    fp: &FpConfig,
) -> Result<EquivalenceRow> {
    let model = scenario.model()?;
    // Followers move at most at the herder pull plus the contraction towards
    // the mean; the padding only needs to be generous.
    let speed = model.kernels.k1().lipschitz_constant() + model.kernels.h1().lipschitz_constant();
    let grid = Grid1d::covering(&scenario.law, scenario.noise.sigma(), scenario.grid.horizon(), speed, cells)?;
    let rho0 = GridDensity::from_law(grid, &scenario.law)?;
    let density = solve_fp(&rho0, &scenario.y0, &model, scenario.grid, fp)?;
    let solution = solve_mkv(&scenario.mkv_problem(members, seed)?, picard)?;
    Ok(EquivalenceRow {
        cells,
        members,
        distance: equivalence_check(&density, &solution.flow)?,
        herder_gap: herder_gap(&density, &solution.herders)?,
    })
}

// ---------------------------------------------------------------------------
// Moment bound

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentRow {
    pub members: usize,
    /// `max_k M_p(μ̄_{t_k})`
    pub sup_moment: f64,
}

pub fn sup_moment(solution: &MkvSolution, p: f64) -> f64 {
    (0..solution.flow.grid().nodes())
        .map(|k| moment_of(solution.flow.cloud(k), p))
        .fold(0.0, f64::max)
}

pub fn moment_experiment(
    scenario: &Scenario,
    members: &[usize],
    seed: u64,
    p: f64,
    picard: &PicardConfig,
) -> Result<Vec<MomentRow>> {
    if !(p > 1.0) {
        return Err(invalid("p", "moment order must exceed 1"));
    }
    members
        .iter()
        .map(|&m| {
            let solution = solve_mkv(&scenario.mkv_problem(m, seed)?, picard)?;
            Ok(MomentRow {
                members: m,
                sup_moment: sup_moment(&solution, p),
            })
        })
        .collect()
}

pub fn write_moment_csv<W: Write>(rows: &[MomentRow], p: f64, mut out: W) -> Result<()> {
    writeln!(out, "M,p,sup_moment")?;
    for r in rows {
        write_row(&mut out, &[r.members.to_string(), p.to_string(), r.sup_moment.to_string()])?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Stability under weakly converging controls

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// `h + A·sign(sin(2πjt/T))`, expressed on `lcm(K, 2j)` intervals so that
/// every interval lies inside one half-period.
pub fn square_wave(h: &PiecewiseConstantPath, j: usize, amplitude: f64) -> Result<PiecewiseConstantPath> {
    if j == 0 {
        return Err(invalid("j", "oscillation index must be positive"));
    }
    let k = h.intervals();
    let intervals = k / gcd(k, 2 * j) * 2 * j;
    let refined = h.refine(intervals)?;
    let block = refined.values().len() / intervals;
    let mut values = refined.values().to_vec();
    for (i, chunk) in values.chunks_mut(block).enumerate() {
        let mid = (i as f64 + 0.5) / intervals as f64;
        let s = (2.0 * std::f64::consts::PI * j as f64 * mid).sin().signum();
        for v in chunk {
            *v += amplitude * s;
        }
    }
    let (rows, cols) = h.shape();
    PiecewiseConstantPath::new(h.horizon(), rows, cols, values)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityRow {
    pub j: usize,
    pub median: f64,
    /// One deviation per seed.
    pub deviations: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityTable {
    pub amplitude: f64,
    pub rows: Vec<StabilityRow>,
}

impl StabilityTable {
    pub fn monotone(&self) -> bool {
        self.rows.windows(2).all(|w| w[1].median < w[0].median)
    }

    /// Median deviation at the first index over the one at the last.
    pub fn reduction(&self) -> f64 {
        self.rows[0].median / self.rows[self.rows.len() - 1].median
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "j,deviation")?;
        for r in &self.rows {
            write_row(&mut out, &[r.j.to_string(), r.median.to_string()])?;
        }
        Ok(())
    }
}

/// Deviation `max_t W₁ + max_i max_t |ΔY^i|` between two solutions.
pub fn trajectory_deviation(a: &MkvSolution, b: &MkvSolution) -> Result<f64> {
    Ok(law_distance(&a.flow, &b.flow)? + a.herders.max_deviation(&b.herders)?)
}

/// Solves the limit system under the square-wave perturbed controls `h_j`
/// and under the base controls with identical tapes, for every `j` and seed.
pub fn stability_experiment(
    scenario: &Scenario,
    js: &[usize],
    amplitude: f64,
    seeds: &[u64],
    members: usize,
    picard: &PicardConfig,
) -> Result<StabilityTable> {
    if js.is_empty() || seeds.is_empty() {
        return Err(invalid("j", "need oscillation indices and seeds"));
    }
    let steps = scenario.grid.steps();
    let mut perturbed = Vec::with_capacity(js.len());
    for &j in js {
        let controls = scenario
            .controls
            .iter()
            .map(|c| {
                let h = square_wave(c.h(), j, amplitude)?;
                if steps % h.intervals() != 0 {
                    return Err(invalid(
                        "dt",
                        format!("{steps} steps do not resolve the {} pieces of the j = {j} wave", h.intervals()),
                    ));
                }
                ControlLaw::new(h, c.g().clone(), c.u_max())
            })
            .collect::<Result<Vec<_>>>()?;
        perturbed.push(scenario.with_controls(controls));
    }
    let mut deviations = vec![Vec::with_capacity(seeds.len()); js.len()];
    for &seed in seeds {
        let base = solve_mkv(&scenario.mkv_problem(members, seed)?, picard)?;
        for (slot, sc) in deviations.iter_mut().zip(&perturbed) {
            let sol = solve_mkv(&sc.mkv_problem(members, seed)?, picard)?;
            slot.push(trajectory_deviation(&sol, &base)?);
        }
    }
    Ok(StabilityTable {
        amplitude,
        rows: js
            .iter()
            .zip(deviations)
            .map(|(&j, deviations)| StabilityRow {
                j,
                median: median(&deviations),
                deviations,
            })
            .collect(),
    })
}

// ---------------------------------------------------------------------------
// Convergence of minima

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaRun {
    pub seed: u64,
    pub n: usize,
    pub min_fn: f64,
    pub min_f: f64,
    pub gap: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GammaRow {
    pub n: usize,
    pub min_fn: f64,
    pub min_f: f64,
    pub gap: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GammaTable {
    pub runs: Vec<GammaRun>,
    /// Medians over seeds, one row per `N`.
    pub rows: Vec<GammaRow>,
}

impl GammaTable {
    pub fn row(&self, n: usize) -> Option<&GammaRow> {
        self.rows.iter().find(|r| r.n == n)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "N,minFN,minF,gap,stderr")?;
        for r in &self.rows {
            write_row(
                &mut out,
                &[
                    r.n.to_string(),
                    r.min_fn.to_string(),
                    r.min_f.to_string(),
                    r.gap.to_string(),
                    r.stderr.to_string(),
                ],
            )?;
        }
        Ok(())
    }

    pub fn write_runs_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "seed,N,minFN,minF,gap,stderr")?;
        for r in &self.runs {
            write_row(
                &mut out,
                &[
                    r.seed.to_string(),
                    r.n.to_string(),
                    r.min_fn.to_string(),
                    r.min_f.to_string(),
                    r.gap.to_string(),
                    r.stderr.to_string(),
                ],
            )?;
        }
        Ok(())
    }
}

/// Settings of the convergence-of-minima experiment.
#[derive(Debug, Clone)]
pub struct GammaSettings {
    pub template: ControlTemplate,
    pub cost: CostSpec,
    pub ns: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Replicas per `F_N` evaluation.
    pub replicas: usize,
    /// Ensemble size of the limit objective.
    pub members: usize,
    pub optimizer: OptimizerConfig,
    pub picard: PicardConfig,
}

/// Minimises `F_N` for every `N` and `F` once per seed with matched budgets.
/// Within a seed every candidate of a search sees the same noise.
pub fn gamma_gap_experiment(scenario: &Scenario, settings: &GammaSettings) -> Result<GammaTable> {
    let s = settings;
    if s.ns.is_empty() || s.ns.windows(2).any(|w| w[1] <= w[0]) {
        return Err(invalid("N", "grid must be increasing"));
    }
    if s.seeds.is_empty() {
        return Err(invalid("seeds", "need at least one replica seed"));
    }
    let init = s.template.parameters(&scenario.controls)?;
    let mut runs = Vec::new();
    for &seed in &s.seeds {
        let limit = LimitObjective {
            template: s.template.clone(),
            dynamics: scenario.dynamics(),
            cost: s.cost.clone(),
            law: scenario.law.clone(),
            y0: scenario.y0.clone(),
            grid: scenario.grid,
            members: s.members,
            seed,
            picard: s.picard,
        };
        let min_f = minimize(&limit, &init, &s.optimizer)?;
        log::info!("gamma: seed {seed} min F = {:.6}", min_f.best_value);
        for &n in &s.ns {
            let discrete = DiscreteObjective {
                template: s.template.clone(),
                dynamics: scenario.dynamics(),
                cost: s.cost.clone(),
                setup: DiscreteSetup {
                    law: scenario.law.clone(),
                    y0: scenario.y0.clone(),
                    grid: scenario.grid,
                    followers: n,
                    replicas: s.replicas,
                    seed: derive_seed(seed, n as u64),
                },
            };
            let min_fn = minimize(&discrete, &init, &s.optimizer)?;
            log::info!("gamma: seed {seed} N = {n} min F_N = {:.6}", min_fn.best_value);
            runs.push(GammaRun {
                seed,
                n,
                min_fn: min_fn.best_value,
                min_f: min_f.best_value,
                gap: (min_fn.best_value - min_f.best_value).abs(),
                stderr: min_fn.stderr,
            });
        }
    }
    let rows = s
        .ns
        .iter()
        .map(|&n| {
            let of = |f: fn(&GammaRun) -> f64| {
                median(&runs.iter().filter(|r| r.n == n).map(f).collect::<Vec<_>>())
            };
            GammaRow {
                n,
                min_fn: of(|r| r.min_fn),
                min_f: of(|r| r.min_f),
                gap: of(|r| r.gap),
                stderr: of(|r| r.stderr),
            }
        })
        .collect();
    Ok(GammaTable { runs, rows })
}
