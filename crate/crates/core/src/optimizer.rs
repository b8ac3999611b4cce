//! Derivative-free minimisation of the cost functionals over a finite chart
//! of the control class.
//!
//! A [`ControlTemplate`] fixes everything about the herder controls except
//! the piecewise-constant values of `h`, which are flattened into a
//! [`ControlParameterVector`] confined to the box `[−u_max, u_max]`. The
//! search itself is a projected Nelder–Mead with restarts, or a coordinate
//! pattern search. Objectives evaluate every candidate with the same replica
//! seeds (common random numbers), so each objective is a deterministic
//! function of the parameters and repeated evaluations agree bit for bit.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::{ControlLaw, GFunctional, PiecewiseConstantPath};
use crate::cost::{eval_f, eval_fn, CostSpec, DiscreteSetup};
use crate::error::{invalid, Result};
use crate::kernels::KernelSet;
use crate::mckean_vlasov::{MkvProblem, PicardConfig};
use crate::particle::{HerdModel, NoiseLevel, TimeGrid};
use crate::rng::InitialLaw;

/// Component-wise interval constraints.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxBounds {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl BoxBounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(invalid("bounds", "lower and upper must be nonempty and equally long"));
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l.is_finite() && u.is_finite() && l <= u)) {
            return Err(invalid("bounds", "need finite lower <= upper"));
        }
        Ok(BoxBounds { lower, upper })
    }

    /// `[−r, r]^n`.
    pub fn symmetric(n: usize, r: f64) -> Result<Self> {
        Self::new(vec![-r; n], vec![r; n])
    }

    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn project(&self, x: &mut [f64]) {
        for ((v, l), u) in x.iter_mut().zip(&self.lower).zip(&self.upper) {
            *v = v.clamp(*l, *u);
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.len() && x.iter().zip(&self.lower).zip(&self.upper).all(|((v, l), u)| l <= v && v <= u)
    }

    fn width(&self, i: usize) -> f64 {
        self.upper[i] - self.lower[i]
    }
}

/// A point of the parameter box, always stored projected.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlParameterVector {
    values: Vec<f64>,
    bounds: BoxBounds,
}

impl ControlParameterVector {
    pub fn new(mut values: Vec<f64>, bounds: BoxBounds) -> Result<Self> {
        if values.len() != bounds.len() {
            return Err(invalid(
                "parameters",
                format!("expected {} values, got {}", bounds.len(), values.len()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("parameters", "values must be finite"));
        }
        bounds.project(&mut values);
        Ok(ControlParameterVector { values, bounds })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn bounds(&self) -> &BoxBounds {
        &self.bounds
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Maps parameter vectors to herder control laws: one fixed `g` per herder
/// and `intervals` free `d × ℓ` matrices of `h` per herder.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlTemplate {
    pub horizon: f64,
    pub dim: usize,
    pub intervals: usize,
    pub u_max: f64,
    pub g: Vec<GFunctional>,
}

impl ControlTemplate {
    pub fn new(horizon: f64, dim: usize, intervals: usize, u_max: f64, g: Vec<GFunctional>) -> Result<Self> {
        if intervals == 0 {
            return Err(invalid("intervals", "need at least one interval"));
        }
        if !(u_max.is_finite() && u_max > 0.0) {
            return Err(invalid("u_max", "must be positive"));
        }
        if g.is_empty() {
            return Err(invalid("g", "need one functional per herder"));
        }
        for gi in &g {
            gi.validate(dim)?;
        }
        Ok(ControlTemplate {
            horizon,
            dim,
            intervals,
            u_max,
            g,
        })
    }

    pub fn herders(&self) -> usize {
        self.g.len()
    }

    fn block(&self, i: usize) -> usize {
        self.intervals * self.dim * self.g[i].len()
    }

    /// Number of free parameters `Σ_i K_T·d·ℓ_i`.
    pub fn len(&self) -> usize {
        (0..self.herders()).map(|i| self.block(i)).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn bounds(&self) -> BoxBounds {
        BoxBounds::symmetric(self.len(), self.u_max).expect("validated template")
    }

    pub fn zero(&self) -> ControlParameterVector {
        ControlParameterVector::new(vec![0.0; self.len()], self.bounds()).expect("shape matches")
    }

    pub fn controls(&self, params: &[f64]) -> Result<Vec<ControlLaw>> {
        if params.len() != self.len() {
            return Err(invalid(
                "parameters",
                format!("expected {} values, got {}", self.len(), params.len()),
            ));
        }
        let mut offset = 0;
        (0..self.herders())
            .map(|i| {
                let n = self.block(i);
                let values = params[offset..offset + n].to_vec();
                offset += n;
                let h = PiecewiseConstantPath::new(self.horizon, self.dim, self.g[i].len(), values)?;
                ControlLaw::new(h, self.g[i].clone(), self.u_max)
            })
            .collect()
    }

    /// Flattens control laws compatible with the template.
    pub fn parameters(&self, controls: &[ControlLaw]) -> Result<ControlParameterVector> {
        if controls.len() != self.herders() {
            return Err(invalid("controls", "one control law per herder is required"));
        }
        let mut values = Vec::with_capacity(self.len());
        for law in controls {
            values.extend_from_slice(law.h().refine(self.intervals)?.values());
        }
        ControlParameterVector::new(values, self.bounds())
    }
}

/// Objective value with its Monte Carlo standard error (zero if exact).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub value: f64,
    pub stderr: f64,
}

/// A deterministic scalar objective on a parameter box.
pub trait Objective: Sync {
    fn len(&self) -> usize;
    fn evaluate(&self, params: &[f64]) -> Result<Evaluation>;
}

impl<F> Objective for (usize, F)
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    fn len(&self) -> usize {
        self.0
    }

    fn evaluate(&self, params: &[f64]) -> Result<Evaluation> {
        Ok(Evaluation {
            value: (self.1)(params),
            stderr: 0.0,
        })
    }
}

/// Kernels and noise shared by every candidate control.
#[derive(Debug, Clone)]
pub struct Dynamics {
    pub kernels: KernelSet,
    pub noise: NoiseLevel,
}

impl Dynamics {
    pub fn model(&self, controls: Vec<ControlLaw>) -> Result<HerdModel> {
        HerdModel::new(self.kernels.clone(), controls, self.noise)
    }
}

/// `F_N` at a fixed follower count; every candidate reuses `setup.seed`.
#[derive(Debug, Clone)]
pub struct DiscreteObjective {
    pub template: ControlTemplate,
    pub dynamics: Dynamics,
    pub cost: CostSpec,
    pub setup: DiscreteSetup,
}

impl Objective for DiscreteObjective {
    fn len(&self) -> usize {
        self.template.len()
    }

    fn evaluate(&self, params: &[f64]) -> Result<Evaluation> {
        let model = self.dynamics.model(self.template.controls(params)?)?;
        let est = eval_fn(&self.cost, &model, &self.setup)?;
        Ok(Evaluation {
            value: est.mean,
            stderr: est.stderr,
        })
    }
}

/// `F` through an `M`-member limit ensemble with a fixed seed.
#[derive(Debug, Clone)]
pub struct LimitObjective {
    pub template: ControlTemplate,
    pub dynamics: Dynamics,
    pub cost: CostSpec,
    pub law: InitialLaw,
    pub y0: Vec<f64>,
    pub grid: TimeGrid,
    pub members: usize,
    pub seed: u64,
    pub picard: PicardConfig,
}

impl Objective for LimitObjective {
    fn len(&self) -> usize {
        self.template.len()
    }

    fn evaluate(&self, params: &[f64]) -> Result<Evaluation> {
        let model = self.dynamics.model(self.template.controls(params)?)?;
        let problem = MkvProblem::new(
            self.law.clone(),
            self.y0.clone(),
            self.grid,
            model,
            self.members,
            self.seed,
        )?;
        Ok(Evaluation {
            value: eval_f(&self.cost, &problem, &self.picard)?,
            stderr: 0.0,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    NelderMead,
    PatternSearch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub method: Method,
    /// Maximum number of objective evaluations.
    pub budget: usize,
    /// Initial simplex edge / pattern step as a fraction of the box width.
    pub initial_step: f64,
    /// Search stops refining once steps fall below this (absolute).
    pub x_tol: f64,
    /// A simplex whose values spread less than this is considered converged.
    pub f_tol: f64,
    /// Evaluate the all-zero control first; the ℓ₁ penalty favours it.
    pub zero_anchor: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            method: Method::NelderMead,
            budget: 500,
            initial_step: 0.25,
            x_tol: 1e-8,
            f_tol: 1e-10,
            zero_anchor: true,
        }
    }
}

impl OptimizerConfig {
    pub fn with_budget(mut self, budget: usize) -> Self {
        self.budget = budget;
        self
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.budget < dim + 2 {
            return Err(invalid(
                "budget",
                format!("{} evaluations cannot build a simplex in {dim} dimensions", self.budget),
            ));
        }
        if !(self.initial_step > 0.0 && self.initial_step <= 1.0) {
            return Err(invalid("initial_step", "must lie in (0, 1]"));
        }
        if !(self.x_tol > 0.0 && self.f_tol >= 0.0) {
            return Err(invalid("x_tol", "tolerances must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizationReport {
    pub best: ControlParameterVector,
    pub best_value: f64,
    /// Standard error of the objective at `best`.
    pub stderr: f64,
    pub evaluations: usize,
    pub restarts: usize,
    /// Best-so-far value after each evaluation.
    pub trace: Vec<f64>,
}

/// Evaluation bookkeeping shared by both searches. Candidates are always
/// projected before evaluation; batches run in parallel but are recorded in
/// submission order, so the result does not depend on the thread count.
struct Search<'a, O: Objective + ?Sized> {
    objective: &'a O,
    bounds: &'a BoxBounds,
    budget: usize,
    best: Vec<f64>,
    best_eval: Evaluation,
    trace: Vec<f64>,
}

impl<O: Objective + ?Sized> Search<'_, O> {
    fn remaining(&self) -> usize {
        self.budget - self.trace.len()
    }

    /// Evaluates as many of `points` as the budget allows.
    fn batch(&mut self, points: &mut [Vec<f64>]) -> Result<Vec<f64>> {
        let take = points.len().min(self.remaining());
        for p in points.iter_mut() {
            self.bounds.project(p);
        }
        let evals = points[..take]
            .par_iter()
            .map(|p| self.objective.evaluate(p))
            .collect::<Result<Vec<_>>>()?;
        for (p, e) in points.iter().zip(&evals) {
            if e.value < self.best_eval.value {
                self.best_eval = *e;
                self.best.clone_from(p);
            }
            self.trace.push(self.best_eval.value);
        }
        Ok(evals.iter().map(|e| e.value).collect())
    }

    fn one(&mut self, p: Vec<f64>) -> Result<Option<(Vec<f64>, f64)>> {
        let mut pts = [p];
        let v = self.batch(&mut pts)?;
        let [p] = pts;
        Ok(v.first().map(|&v| (p, v)))
    }
}

/// Minimises `objective` over the box of `init`, starting from `init`.
pub fn minimize<O: Objective + ?Sized>(
    objective: &O,
    init: &ControlParameterVector,
    cfg: &OptimizerConfig,
) -> Result<OptimizationReport> {
    let n = init.len();
    if objective.len() != n {
        return Err(invalid(
            "parameters",
            format!("objective expects {} parameters, got {n}", objective.len()),
        ));
    }
    cfg.validate(n)?;
    let bounds = init.bounds();
    let mut search = Search {
        objective,
        bounds,
        budget: cfg.budget,
        best: init.values().to_vec(),
        best_eval: Evaluation {
            value: f64::INFINITY,
            stderr: 0.0,
        },
        trace: Vec::with_capacity(cfg.budget),
    };
    let mut start = vec![init.values().to_vec()];
    if cfg.zero_anchor {
        let mut zero = vec![0.0; n];
        bounds.project(&mut zero);
        if zero != start[0] {
            start.push(zero);
        }
    }
    search.batch(&mut start)?;
    let restarts = match cfg.method {
        Method::NelderMead => nelder_mead(&mut search, cfg)?,
        Method::PatternSearch => {
            pattern_search(&mut search, cfg)?;
            0
        }
    };
    log::debug!(
        "minimize: {} evaluations, {} restarts, best {:.6e}",
        search.trace.len(),
        restarts,
        search.best_eval.value
    );
    Ok(OptimizationReport {
        best: ControlParameterVector::new(search.best, bounds.clone())?,
        best_value: search.best_eval.value,
        stderr: search.best_eval.stderr,
        evaluations: search.trace.len(),
        restarts,
        trace: search.trace,
    })
}

fn max_distance(points: &[Vec<f64>], from: &[f64]) -> f64 {
    points
        .iter()
        .map(|p| p.iter().zip(from).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())))
        .fold(0.0, f64::max)
}

/// Projected Nelder–Mead with dimension-adaptive coefficients. Each restart
/// rebuilds an axis-aligned simplex around the incumbent, halving the edge
/// length; a simplex that collapses onto a face of the box also triggers a
/// restart. Returns the number of restarts.
fn nelder_mead<O: Objective + ?Sized>(search: &mut Search<'_, O>, cfg: &OptimizerConfig) -> Result<usize> {
    let n = search.best.len();
    let nf = n as f64;
    let (alpha, beta, gamma, delta) = (1.0, 1.0 + 2.0 / nf, 0.75 - 0.5 / nf, 1.0 - 1.0 / nf);
    let mut step = cfg.initial_step;
    let mut restarts = 0usize;
    let mut round = 0usize;
    while search.remaining() > 0 {
        let base = search.best.clone();
        let base_value = search.best_eval.value;
        let mut simplex = vec![base.clone()];
        for i in 0..n {
            let mut v = base.clone();
            let h = step * search.bounds.width(i);
            // Step inwards when the incumbent sits on the upper face.
            v[i] = if v[i] + h <= search.bounds.upper()[i] { v[i] + h } else { v[i] - h };
            simplex.push(v);
        }
        let mut values = vec![base_value];
        values.extend(search.batch(&mut simplex[1..])?);
        if values.len() < simplex.len() {
            break;
        }
        let mut degenerate = false;
        while search.remaining() > 0 {
            let mut order: Vec<usize> = (0..=n).collect();
            order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
            simplex = order.iter().map(|&i| simplex[i].clone()).collect();
            values = order.iter().map(|&i| values[i]).collect();
            let spread = values[n] - values[0];
            let size = max_distance(&simplex[1..], &simplex[0]);
            if spread <= cfg.f_tol || size <= cfg.x_tol {
                degenerate = size <= cfg.x_tol && spread > cfg.f_tol;
                break;
            }
            let mut centroid = vec![0.0; n];
            for p in &simplex[..n] {
                for (c, x) in centroid.iter_mut().zip(p) {
                    *c += x / nf;
                }
            }
            let along = |t: f64| -> Vec<f64> {
                centroid
                    .iter()
                    .zip(&simplex[n])
                    .map(|(c, w)| c + t * (c - w))
                    .collect()
            };
            let Some((xr, fr)) = search.one(along(alpha))? else { break };
            if fr < values[0] {
                let Some((xe, fe)) = search.one(along(alpha * beta))? else { break };
                if fe < fr {
                    simplex[n] = xe;
                    values[n] = fe;
                } else {
                    simplex[n] = xr;
                    values[n] = fr;
                }
                continue;
            }
            if fr < values[n - 1] {
                simplex[n] = xr;
                values[n] = fr;
                continue;
            }
            let t = if fr < values[n] { alpha * gamma } else { -gamma };
            let Some((xc, fc)) = search.one(along(t))? else { break };
            if fc < fr.min(values[n]) {
                simplex[n] = xc;
                values[n] = fc;
                continue;
            }
            let mut shrunk: Vec<Vec<f64>> = simplex[1..]
                .iter()
                .map(|p| p.iter().zip(&simplex[0]).map(|(x, b)| b + delta * (x - b)).collect())
                .collect();
            let new_values = search.batch(&mut shrunk)?;
            if new_values.len() < n {
                break;
            }
            for (i, (p, v)) in shrunk.into_iter().zip(new_values).enumerate() {
                simplex[i + 1] = p;
                values[i + 1] = v;
            }
        }
        round += 1;
        if search.remaining() == 0 {
            break;
        }
        restarts += 1;
        if degenerate {
            log::debug!("nelder-mead: degenerate simplex in round {round}, restarting");
        }
        step *= 0.5;
        if step * search.bounds.lower().iter().zip(search.bounds.upper()).map(|(l, u)| u - l).fold(0.0, f64::max)
            < cfg.x_tol
        {
            break;
        }
    }
    Ok(restarts)
}

/// Compass search: poll ±step along every axis, move to the first
/// improvement, halve the step after an unsuccessful poll.
fn pattern_search<O: Objective + ?Sized>(search: &mut Search<'_, O>, cfg: &OptimizerConfig) -> Result<()> {
    let n = search.best.len();
    let widest = (0..n).map(|i| search.bounds.width(i)).fold(0.0, f64::max);
    let mut step = cfg.initial_step;
    while search.remaining() > 0 && step * widest >= cfg.x_tol {
        let mut improved = false;
        'poll: for i in 0..n {
            for sign in [-1.0, 1.0] {
                let mut p = search.best.clone();
                p[i] += sign * step * search.bounds.width(i);
                search.bounds.project(&mut p);
                if p == search.best {
                    continue;
                }
                let before = search.best_eval.value;
                if search.one(p)?.is_none() {
                    return Ok(());
                }
                if search.best_eval.value < before {
                    improved = true;
                    break 'poll;
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    Ok(())
}
