//! Running costs and the two cost functionals.
//!
//! The discrete functional averages, over seeded replicas of the finite
//! system, the time integral of `𝓛(t, Y, μ_N) + Ψ(h, g(μ_N))`. The limit
//! functional integrates the same running cost once along the deterministic
//! pair `(Ȳ, μ̄_t)` of the limit system. Time integrals use the trapezoid rule
//! on the simulation grid.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, HerdError, Result};
use crate::measures::{Cloud, EmpiricalMeasure};
use crate::mckean_vlasov::{solve_mkv, MkvProblem, MkvSolution, PicardConfig};
use crate::particle::{simulate_with, HerdModel, SystemState, TimeGrid};
use crate::rng::{derive_seed, BrownianTape, InitialLaw};

/// State cost `𝓛(t, Y, μ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Lagrangian {
    Zero,
    Constant {
        value: f64,
    },
    /// `α ∫ min(|x − x*|², R²) dμ + β Σ_i min(|Y^i − y*_i|², R²)`
    ClampedTracking {
        follower_target: Vec<f64>,
        /// One target per herder.
        herder_targets: Vec<Vec<f64>>,
        #[serde(default = "one")]
        alpha: f64,
        #[serde(default)]
        beta: f64,
        radius: f64,
    },
}

fn one() -> f64 {
    1.0
}

#[inline]
fn clamped_sq(a: &[f64], b: &[f64], r2: f64) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().min(r2)
}

impl Lagrangian {
    pub fn validate(&self, dim: usize, herders: usize) -> Result<()> {
        match self {
            Lagrangian::Zero => Ok(()),
            Lagrangian::Constant { value } => {
                if value.is_finite() {
                    Ok(())
                } else {
                    Err(invalid("lagrangian.value", "must be finite"))
                }
            }
            Lagrangian::ClampedTracking {
                follower_target,
                herder_targets,
                alpha,
                beta,
                radius,
            } => {
                if follower_target.len() != dim {
                    return Err(invalid(
                        "lagrangian.follower_target",
                        format!("expected {dim} coordinates, got {}", follower_target.len()),
                    ));
                }
                if herder_targets.len() != herders || herder_targets.iter().any(|t| t.len() != dim) {
                    return Err(invalid(
                        "lagrangian.herder_targets",
                        format!("expected {herders} targets of dimension {dim}"),
                    ));
                }
                if !(alpha.is_finite() && *alpha >= 0.0 && beta.is_finite() && *beta >= 0.0) {
                    return Err(invalid("lagrangian.alpha", "weights must be finite and >= 0"));
                }
                if !(radius.is_finite() && *radius > 0.0) {
                    return Err(invalid("lagrangian.radius", "must be positive"));
                }
                Ok(())
            }
        }
    }

    /// Lipschitz constant of `μ ↦ 𝓛(t, Y, μ)` with respect to `W₁`.
    pub fn measure_lipschitz(&self) -> f64 {
        match self {
            Lagrangian::ClampedTracking { alpha, radius, .. } => 2.0 * radius * alpha,
            _ => 0.0,
        }
    }

    /// Upper bound of `|𝓛|`.
    pub fn bound(&self, herders: usize) -> f64 {
        match self {
            Lagrangian::Zero => 0.0,
            Lagrangian::Constant { value } => value.abs(),
            Lagrangian::ClampedTracking {
                alpha, beta, radius, ..
            } => (alpha + beta * herders as f64) * radius * radius,
        }
    }

    pub(crate) fn eval_cloud(&self, herders: &[f64], mu: Cloud<'_>) -> f64 {
        match self {
            Lagrangian::Zero => 0.0,
            Lagrangian::Constant { value } => *value,
            Lagrangian::ClampedTracking {
                follower_target,
                herder_targets,
                alpha,
                beta,
                radius,
            } => {
                let r2 = radius * radius;
                let d = mu.dim;
                let mut total = 0.0;
                if *alpha != 0.0 {
                    total += alpha * mu.integrate(|x| clamped_sq(x, follower_target, r2));
                }
                if *beta != 0.0 {
                    let herd: f64 = herders
                        .chunks(d)
                        .zip(herder_targets)
                        .map(|(y, target)| clamped_sq(y, target, r2))
                        .sum();
                    total += beta * herd;
                }
                total
            }
        }
    }

    /// `𝓛(t, Y, μ)` with herders flat `m × d`; the defaults do not depend on `t`.
    pub fn eval(&self, herders: &[f64], mu: &EmpiricalMeasure) -> f64 {
        self.eval_cloud(herders, mu.view())
    }
}

/// Norm applied to `h` in the control cost.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ControlPenalty {
    /// Entrywise `‖h‖₁`, the sparsity-promoting default.
    #[default]
    L1,
    /// `‖h‖_F²`, for smooth baselines.
    SquaredFrobenius,
}

/// `Ψ(h, g) = λ Σ_i P(h^i) + κ Σ_i |g^i|`
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlCost {
    pub lambda: f64,
    #[serde(default)]
    pub kappa: f64,
    #[serde(default)]
    pub penalty: ControlPenalty,
}

impl ControlCost {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(invalid("control_cost.lambda", "must be finite and >= 0"));
        }
        if !(self.kappa.is_finite() && self.kappa >= 0.0) {
            return Err(invalid("control_cost.kappa", "must be finite and >= 0"));
        }
        Ok(())
    }

    /// Contribution of one herder with matrix `h` and feature vector `g`.
    pub fn herder_term(&self, h: &[f64], g: &[f64]) -> f64 {
        let p = match self.penalty {
            ControlPenalty::L1 => h.iter().map(|v| v.abs()).sum::<f64>(),
            ControlPenalty::SquaredFrobenius => h.iter().map(|v| v * v).sum::<f64>(),
        };
        let mut total = self.lambda * p;
        if self.kappa != 0.0 {
            total += self.kappa * g.iter().map(|v| v * v).sum::<f64>().sqrt();
        }
        total
    }
}

/// Running cost `𝓛 + Ψ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSpec {
    pub lagrangian: Lagrangian,
    pub control: ControlCost,
}

impl CostSpec {
    pub fn validate(&self, dim: usize, herders: usize) -> Result<()> {
        self.lagrangian.validate(dim, herders)?;
        self.control.validate()
    }

    /// Running cost at time `t` with herders `y` and follower law `mu`.
    pub(crate) fn running(&self, model: &HerdModel, t: f64, y: &[f64], mu: Cloud<'_>, g: &mut Vec<f64>) -> f64 {
        let mut total = self.lagrangian.eval_cloud(y, mu);
        if self.control.lambda == 0.0 && self.control.kappa == 0.0 {
            return total;
        }
        for law in &model.controls {
            g.resize(law.ell(), 0.0);
            if self.control.kappa != 0.0 {
                law.g().eval_into(mu, g);
            }
            total += self.control.herder_term(law.h().at(t), g);
        }
        total
    }
}

/// Trapezoid rule on a uniform grid of node values.
fn trapezoid(values: &[f64], dt: f64) -> f64 {
    match values.len() {
        0 | 1 => 0.0,
        n => dt * (0.5 * (values[0] + values[n - 1]) + values[1..n - 1].iter().sum::<f64>()),
    }
}

/// Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, PartialEq)]
pub struct CostEstimate {
    pub mean: f64,
    /// Standard error of the mean; zero for a single replica.
    pub stderr: f64,
    pub values: Vec<f64>,
}

impl CostEstimate {
    fn from_values(values: Vec<f64>) -> Self {
        let r = values.len() as f64;
        let mean = values.iter().sum::<f64>() / r;
        let stderr = if values.len() > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (r - 1.0);
            (var / r).sqrt()
        } else {
            0.0
        };
        CostEstimate { mean, stderr, values }
    }

    pub fn replicas(&self) -> usize {
        self.values.len()
    }
}

/// Finite-system configuration for the discrete functional.
#[derive(Debug, Clone)]
pub struct DiscreteSetup {
    pub law: InitialLaw,
    pub y0: Vec<f64>,
    pub grid: TimeGrid,
    pub followers: usize,
    pub replicas: usize,
    /// Replica `r` runs on seed `derive_seed(seed, r)`.
    pub seed: u64,
}

impl DiscreteSetup {
    pub fn validate(&self, model: &HerdModel) -> Result<()> {
        self.law.validate()?;
        if self.law.dim() != model.dim() {
            return Err(HerdError::DimensionMismatch {
                expected: model.dim(),
                got: self.law.dim(),
            });
        }
        if self.followers == 0 {
            return Err(invalid("N", "need at least one follower"));
        }
        if self.replicas == 0 {
            return Err(invalid("replicas", "need at least one replica"));
        }
        if self.y0.len() != model.dim() * model.herders() {
            return Err(invalid("y0", "one position per herder is required"));
        }
        Ok(())
    }
}

/// Cost of one seeded run of the finite system.
pub fn discrete_cost(cost: &CostSpec, model: &HerdModel, setup: &DiscreteSetup, seed: u64) -> Result<f64> {
    let init = SystemState::sample(&setup.law, setup.followers, &setup.y0, seed)?;
    let tape = BrownianTape::new(seed, model.dim());
    let mut values = Vec::with_capacity(setup.grid.nodes());
    let mut g = Vec::new();
    simulate_with(&init, setup.grid, model, &tape, |s| {
        let mu = Cloud::uniform(s.dim(), s.followers());
        values.push(cost.running(model, s.t, s.herders(), mu, &mut g));
        Ok(())
    })?;
    Ok(trapezoid(&values, setup.grid.dt()))
}

/// Discrete functional: replica average of the integrated running cost.
pub fn eval_fn(cost: &CostSpec, model: &HerdModel, setup: &DiscreteSetup) -> Result<CostEstimate> {
    cost.validate(model.dim(), model.herders())?;
    setup.validate(model)?;
    let values = (0..setup.replicas as u64)
        .into_par_iter()
        .map(|r| discrete_cost(cost, model, setup, derive_seed(setup.seed, r)))
        .collect::<Result<Vec<f64>>>()?;
    Ok(CostEstimate::from_values(values))
}

/// Integrated running cost along a solved limit flow.
pub fn limit_cost(cost: &CostSpec, model: &HerdModel, solution: &MkvSolution) -> Result<f64> {
    cost.validate(model.dim(), model.herders())?;
    let grid = solution.flow.grid();
    let mut g = Vec::new();
    let values: Vec<f64> = (0..grid.nodes())
        .map(|k| {
            let mu = Cloud::uniform(solution.flow.dim(), solution.flow.node(k));
            cost.running(model, grid.time(k), solution.herders.node(k), mu, &mut g)
        })
        .collect();
    Ok(trapezoid(&values, grid.dt()))
}

/// Limit functional: solves the limit system and integrates the running cost.
pub fn eval_f(cost: &CostSpec, problem: &MkvProblem, picard: &PicardConfig) -> Result<f64> {
    cost.validate(problem.model.dim(), problem.model.herders())?;
    let solution = solve_mkv(problem, picard)?;
    limit_cost(cost, &problem.model, &solution)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::{ControlLaw, GFunctional, PiecewiseConstantPath};
    use crate::kernels::KernelSet;
    use crate::measures::wasserstein1;
    use crate::particle::NoiseLevel;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn law() -> InitialLaw {
        InitialLaw::Gaussian {
            mean: vec![0.0],
            std: 1.0,
        }
    }

    fn free_model(h: f64, m: usize, sigma: f64) -> HerdModel {
        let path = PiecewiseConstantPath::constant(1.0, 1, 1, &[h], 4).unwrap();
        let control = ControlLaw::new(path, GFunctional::Constant { c: vec![1.0] }, 2.0).unwrap();
        HerdModel::new(KernelSet::zero(1), vec![control; m], NoiseLevel::new(sigma).unwrap()).unwrap()
    }

    fn setup(m: usize, replicas: usize) -> DiscreteSetup {
        DiscreteSetup {
            law: law(),
            y0: vec![0.0; m],
            grid: TimeGrid::new(1.0, 0.01).unwrap(),
            followers: 20,
            replicas,
            seed: 7,
        }
    }

    fn problem(model: HerdModel, m: usize) -> MkvProblem {
        MkvProblem::new(law(), vec![0.0; m], TimeGrid::new(1.0, 0.01).unwrap(), model, 500, 7).unwrap()
    }

    fn spec(lagrangian: Lagrangian, lambda: f64) -> CostSpec {
        CostSpec {
            lagrangian,
            control: ControlCost {
                lambda,
                kappa: 0.0,
                penalty: ControlPenalty::L1,
            },
        }
    }

    #[test]
    fn trivial_costs() {
        let picard = PicardConfig::default();
        let zero = spec(Lagrangian::Zero, 1.0);
        let model = free_model(0.0, 2, 0.5);
        assert_eq!(eval_fn(&zero, &model, &setup(2, 3)).unwrap().mean, 0.0);
        assert_eq!(eval_f(&zero, &problem(model, 2), &picard).unwrap(), 0.0);

        let unit = spec(Lagrangian::Constant { value: 1.0 }, 0.0);
        let model = free_model(0.7, 2, 0.5);
        assert!((eval_fn(&unit, &model, &setup(2, 3)).unwrap().mean - 1.0).abs() < 1e-12);
        assert!((eval_f(&unit, &problem(model, 2), &picard).unwrap() - 1.0).abs() < 1e-12);

        // ‖h‖₁ = c on every interval: λ·m·c·T.
        let (lambda, c, m) = (0.3, 0.7, 3);
        let sparse = spec(Lagrangian::Zero, lambda);
        let model = free_model(c, m, 0.5);
        let expected = lambda * m as f64 * c * 1.0;
        assert!((eval_fn(&sparse, &model, &setup(m, 2)).unwrap().mean - expected).abs() < 1e-12);
        assert!((eval_f(&sparse, &problem(model, m), &picard).unwrap() - expected).abs() < 1e-12);
    }

    /// Dyadic rationals keep every sum and halving exact.
    fn dyadic(rng: &mut ChaCha8Rng) -> f64 {
        rng.random_range(-4096i32..4096) as f64 / 1024.0
    }

    #[test]
    fn control_cost_is_convex_in_h() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for penalty in [ControlPenalty::L1, ControlPenalty::SquaredFrobenius] {
            let psi = ControlCost {
                lambda: 0.75,
                kappa: 0.5,
                penalty,
            };
            for _ in 0..1000 {
                let h1: Vec<f64> = (0..6).map(|_| dyadic(&mut rng)).collect();
                let h2: Vec<f64> = (0..6).map(|_| dyadic(&mut rng)).collect();
                // (2c, 3c, 6c) has the exactly representable norm 7|c|.
                let c = dyadic(&mut rng);
                let g = [2.0 * c, 3.0 * c, 6.0 * c];
                let mid: Vec<f64> = h1.iter().zip(&h2).map(|(a, b)| 0.5 * (a + b)).collect();
                let lhs = psi.herder_term(&mid, &g);
                let rhs = 0.5 * (psi.herder_term(&h1, &g) + psi.herder_term(&h2, &g));
                assert!(lhs <= rhs, "{penalty:?}: {lhs} > {rhs}");
            }
        }
    }

    #[test]
    fn lagrangian_is_lipschitz_in_the_measure() {
        let radius = 1.5;
        let lag = Lagrangian::ClampedTracking {
            follower_target: vec![0.5, -0.5],
            herder_targets: vec![vec![0.0, 0.0]],
            alpha: 1.0,
            beta: 2.0,
            radius,
        };
        lag.validate(2, 1).unwrap();
        assert_eq!(lag.measure_lipschitz(), 2.0 * radius);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let y = [0.3, 0.1];
        for _ in 0..300 {
            let n = rng.random_range(1..12usize);
            let a: Vec<f64> = (0..2 * n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let b: Vec<f64> = (0..2 * n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let mu = EmpiricalMeasure::uniform(2, a).unwrap();
            let nu = EmpiricalMeasure::uniform(2, b).unwrap();
            let gap = (lag.eval(&y, &mu) - lag.eval(&y, &nu)).abs();
            assert!(gap <= lag.measure_lipschitz() * wasserstein1(&mu, &nu).unwrap() + 1e-12);
        }
    }

    #[test]
    fn standard_error_halves_when_replicas_quadruple() {
        let lag = Lagrangian::ClampedTracking {
            follower_target: vec![0.0],
            herder_targets: vec![vec![0.0]],
            alpha: 1.0,
            beta: 0.0,
            radius: 3.0,
        };
        let cost = spec(lag, 0.0);
        let model = free_model(0.0, 1, 0.5);
        let small = eval_fn(&cost, &model, &setup(1, 64)).unwrap();
        let large = eval_fn(&cost, &model, &setup(1, 256)).unwrap();
        let ratio = small.stderr / large.stderr;
        assert!((ratio - 2.0).abs() <= 0.6, "stderr ratio {ratio}");
    }

    #[test]
    fn limit_cost_increases_with_lambda() {
        let model = free_model(0.5, 1, 0.5);
        let p = problem(model, 1);
        let picard = PicardConfig::default();
        let lag = Lagrangian::Constant { value: 0.25 };
        let mut last = f64::NEG_INFINITY;
        for lambda in [0.0, 0.1, 0.2, 0.4] {
            let f = eval_f(&spec(lag.clone(), lambda), &p, &picard).unwrap();
            assert!(f > last);
            last = f;
        }
    }

    #[test]
    fn limit_and_discrete_costs_agree_without_interaction() {
        let lag = Lagrangian::ClampedTracking {
            follower_target: vec![0.5],
            herder_targets: vec![vec![1.0]],
            alpha: 1.0,
            beta: 1.0,
            radius: 2.0,
        };
        let cost = spec(lag.clone(), 0.2);
        let model = free_model(0.5, 1, 0.5);
        let members = 4000;
        let p = MkvProblem::new(law(), vec![0.0], TimeGrid::new(1.0, 0.01).unwrap(), model.clone(), members, 99)
            .unwrap();
        let f = eval_f(&cost, &p, &PicardConfig::default()).unwrap();
        let fnn = eval_fn(&cost, &model, &setup(1, 200)).unwrap();
        // Sampling error of the limit ensemble: integrand bounded by αR² on [0, 1].
        let rate = lag.bound(0) / (members as f64).sqrt();
        assert!(
            (f - fnn.mean).abs() <= 3.0 * fnn.stderr + rate,
            "F = {f}, F_N = {} ± {}",
            fnn.mean,
            fnn.stderr
        );
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let bad = Lagrangian::ClampedTracking {
            follower_target: vec![0.0],
            herder_targets: vec![],
            alpha: 1.0,
            beta: 0.0,
            radius: 1.0,
        };
        assert!(bad.validate(1, 1).is_err());
        let cost = ControlCost {
            lambda: -1.0,
            kappa: 0.0,
            penalty: ControlPenalty::L1,
        };
        assert!(cost.validate().is_err());
    }

    #[test]
    fn trapezoid_rule() {
        assert_eq!(trapezoid(&[1.0], 0.1), 0.0);
        assert!((trapezoid(&[0.0, 1.0, 2.0], 0.5) - 1.0).abs() < 1e-15);
    }
}
