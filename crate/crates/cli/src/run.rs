//! Experiment dispatch: each runner writes its tables into the run directory
//! and returns the acceptance checks it evaluated.

use std::io::Write;

use anyhow::Context;
use herdsim::control::ControlLaw;
use herdsim::cost::DiscreteSetup;
use herdsim::experiments::{
    chaos_rate, equivalence_experiment, gamma_gap_experiment, sampling_rate, stability_experiment,
    write_equivalence_csv, GammaSettings, Scenario,
};
use herdsim::fokker_planck::{check_hypotheses, solve_fp, Grid1d, GridDensity, HypothesisCheck};
use herdsim::io::{write_herd1, write_trajectory_csv};
use herdsim::mckean_vlasov::{solve_mkv, MkvSolution};
use herdsim::optimizer::{minimize, DiscreteObjective, LimitObjective, Objective};
use herdsim::particle::{simulate, SystemState};
use herdsim::rng::derive_seed;

use crate::config::{ExperimentConfig, Experiment, ObjectiveKind, TrajectoryFormat};
use crate::manifest::{ArtifactDir, Check};

/// Runs the configured experiment; returns the checks it evaluated.
pub fn dispatch(cfg: &ExperimentConfig, out: &mut ArtifactDir) -> anyhow::Result<Vec<Check>> {
    let scenario = cfg.scenario()?;
    let result = match cfg.experiment {
        Experiment::Simulate => run_simulate(cfg, &scenario, out),
        Experiment::Mkv => run_mkv(cfg, &scenario, out),
        Experiment::Fp => run_fp(cfg, &scenario, out),
        Experiment::ChaosRate => run_chaos(cfg, &scenario, out),
        Experiment::Equivalence => run_equivalence(cfg, &scenario, out),
        Experiment::Stability => run_stability(cfg, &scenario, out),
        Experiment::GammaGap => run_gamma_gap(cfg, &scenario, out),
        Experiment::Optimize => run_optimize(cfg, &scenario, out),
    };
    result.with_context(|| format!("{} experiment failed", cfg.experiment.name()))
}

/// `name.ext` for a single replica, `name_r.ext` otherwise.
fn replica_file(cfg: &ExperimentConfig, name: &str, ext: &str, r: usize) -> String {
    if cfg.replicas == 1 {
        format!("{name}.{ext}")
    } else {
        format!("{name}_{r}.{ext}")
    }
}

fn run_simulate(cfg: &ExperimentConfig, scenario: &Scenario, out: &mut ArtifactDir) -> anyhow::Result<Vec<Check>> {
    let model = scenario.model()?;
    let n = cfg.dynamics.followers;
    let format = cfg.simulate.clone().unwrap_or_default().format;
    let mut finite = true;
    let mut nodes_ok = true;
    for (r, seed) in cfg.replica_seeds().into_iter().enumerate() {
        let init = SystemState::sample(&scenario.law, n, &scenario.y0, seed)?;
        let path = simulate(&init, scenario.grid, &model, seed)?;
        finite &= path
            .states
            .iter()
            .all(|s| s.followers().iter().chain(s.herders()).all(|v| v.is_finite()));
        nodes_ok &= path.states.len() == scenario.grid.nodes();
        match format {
            TrajectoryFormat::Csv => out.write(&replica_file(cfg, "trajectory", "csv", r), |w| {
                Ok(write_trajectory_csv(&path.states, w)?)
            })?,
            TrajectoryFormat::Herd1 => out.write(&replica_file(cfg, "trajectory", "herd1", r), |w| {
                Ok(write_herd1(&path.states, w)?)
            })?,
        }
    }
    Ok(vec![
        Check::new("finite_states", finite, "every coordinate finite at every node"),
        Check::new(
            "node_count",
            nodes_ok,
            format!("{} nodes per particle (T/dt + 1)", scenario.grid.nodes()),
        ),
    ])
}

fn write_moments_header(w: &mut dyn Write, d: usize, herders: usize) -> anyhow::Result<()> {
    write!(w, "replica,t")?;
    for c in 1..=d {
        write!(w, ",mean_{c}")?;
    }
    write!(w, ",m2,m4")?;
    for i in 0..herders {
        for c in 1..=d {
            write!(w, ",y{i}_{c}")?;
        }
    }
    writeln!(w)?;
    Ok(())
}

/// Per-node mean, `M₂` and `M₄` of the flow, with the herder positions.
fn write_moments_rows(w: &mut dyn Write, sol: &MkvSolution, r: usize) -> anyhow::Result<()> {
    let flow = &sol.flow;
    let d = flow.dim();
    let m = flow.members() as f64;
    let grid = flow.grid();
    for k in 0..grid.nodes() {
        let mut mean = vec![0.0; d];
        let (mut m2, mut m4) = (0.0, 0.0);
        for x in flow.node(k).chunks(d) {
            let r2: f64 = x.iter().map(|v| v * v).sum();
            m2 += r2;
            m4 += r2 * r2;
            for (a, v) in mean.iter_mut().zip(x) {
                *a += v;
            }
        }
        write!(w, "{r},{}", grid.time(k))?;
        for a in mean {
            write!(w, ",{}", a / m)?;
        }
        write!(w, ",{},{}", m2 / m, m4 / m)?;
        for v in sol.herders.node(k) {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

fn run_mkv(cfg: &ExperimentConfig, scenario: &Scenario, out: &mut ArtifactDir) -> anyhow::Result<Vec<Check>> {
    let mut solutions = Vec::new();
    for seed in cfg.replica_seeds() {
        let problem = scenario.mkv_problem(cfg.dynamics.members, seed)?;
        solutions.push(solve_mkv(&problem, &cfg.picard)?);
    }
    out.write("picard.csv", |w| {
        writeln!(w, "replica,sweep,weighted_gap")?;
        for (r, sol) in solutions.iter().enumerate() {
            for (k, gap) in sol.history.iter().enumerate() {
                writeln!(w, "{r},{},{gap}", k + 1)?;
            }
        }
        Ok(())
    })?;
    out.write("mkv_moments.csv", |w| {
        write_moments_header(w, scenario.law.dim(), scenario.y0.len() / scenario.law.dim())?;
        for (r, sol) in solutions.iter().enumerate() {
            write_moments_rows(w, sol, r)?;
        }
        Ok(())
    })?;
    let sweeps: Vec<usize> = solutions.iter().map(|s| s.sweeps).collect();
    let sup_m4 = solutions
        .iter()
        .flat_map(|s| {
            let d = s.flow.dim();
            (0..s.flow.grid().nodes()).map(move |k| {
                let node = s.flow.node(k);
                node.chunks(d).map(|x| x.iter().map(|v| v * v).sum::<f64>().powi(2)).sum::<f64>()
                    / s.flow.members() as f64
            })
        })
        .fold(0.0, f64::max);
    Ok(vec![
        Check::new(
            "picard_converged",
            true,
            format!("sweeps per replica {sweeps:?} at tol {:e}", cfg.picard.tol),
        ),
        Check::new("moments_finite", sup_m4.is_finite(), format!("sup_t M4 = {sup_m4:.6}")),
    ])
}

fn fp_grid(scenario: &Scenario, cells: usize) -> anyhow::Result<Grid1d> {
    let model = scenario.model()?;
    let speed = model.kernels.k1().lipschitz_constant() + model.kernels.h1().lipschitz_constant();
    Ok(Grid1d::covering(
        &scenario.law,
        scenario.noise.sigma(),
        scenario.grid.horizon(),
        speed,
        cells,
    )?)
}

fn run_fp(cfg: &ExperimentConfig, scenario: &Scenario, out: &mut ArtifactDir) -> anyhow::Result<Vec<Check>> {
    let s = cfg.fp_section();
    let grid = fp_grid(scenario, s.cells)?;
    let hypothesis = check_hypotheses(&scenario.law, grid);
    let rho0 = GridDensity::from_law(grid, &scenario.law)?;
    let sol = solve_fp(&rho0, &scenario.y0, &scenario.model()?, scenario.grid, &s.solver())?;
    out.write("fp.csv", |w| Ok(sol.write_csv(w)?))?;
    let m0 = rho0.mass();
    let drift = sol.densities.iter().map(|r| (r.mass() - m0).abs()).fold(0.0, f64::max);
    let nonneg = sol.densities.iter().all(|r| r.rho().iter().all(|&v| v >= 0.0));
    let (hyp_ok, hyp_detail) = match &hypothesis {
        HypothesisCheck::Verified { entropy, second_moment } => {
            (true, format!("entropy {entropy:.6}, second moment {second_moment:.6}"))
        }
        other => (false, format!("{other:?}")),
    };
    Ok(vec![
        Check::new("initial_entropy", hyp_ok, hyp_detail),
        Check::new("mass_conserved", drift <= s.mass_tol, format!("max mass drift {drift:.3e}")),
        Check::new("nonnegative", nonneg, "densities stay >= 0"),
    ])
}

fn run_chaos(cfg: &ExperimentConfig, scenario: &Scenario, out: &mut ArtifactDir) -> anyhow::Result<Vec<Check>> {
    let s = cfg.chaos_section();
    let table = chaos_rate(
        scenario,
        &s.ns,
        &cfg.replica_seeds(),
        s.reference_members,
        s.blocks,
        &cfg.picard,
    )?;
    out.write("chaos.csv", |w| Ok(table.write_csv(w)?))?;
    let medians: Vec<String> = table.rows.iter().map(|r| format!("{:.4}", r.median)).collect();
    Ok(vec![
        Check::new(
            "median_decreasing",
            table.strictly_decreasing(),
            format!("medians [{}]", medians.join(", ")),
        ),
        Check::new(
            "loglog_slope",
            table.slope <= s.max_slope,
            format!("slope {:.4} <= {}", table.slope, s.max_slope),
        ),
    ])
}

fn run_equivalence(cfg: &ExperimentConfig, scenario: &Scenario, out: &mut ArtifactDir) -> anyhow::Result<Vec<Check>> {
    let s = cfg.equivalence_section();
    let fp = cfg.fp_section().solver();
    let seed = cfg.replica_seeds()[0];
    let rows = s
        .cells
        .iter()
        .zip(&s.members)
        .map(|(&cells, &members)| equivalence_experiment(scenario, cells, members, seed, &cfg.picard, &fp))
        .collect::<herdsim::Result<Vec<_>>>()?;
    out.write("equivalence.csv", |w| Ok(write_equivalence_csv(&rows, w)?))?;
    let distances: Vec<String> = rows.iter().map(|r| format!("{:.4}", r.distance)).collect();
    Ok(vec![
        Check::new(
            "distance",
            rows[0].distance <= s.max_distance,
            format!("W1 = {:.4} <= {}", rows[0].distance, s.max_distance),
        ),
        Check::new(
            "refinement",
            rows.windows(2).all(|w| w[1].distance < w[0].distance),
            format!("distances [{}]", distances.join(", ")),
        ),
    ])
}

fn run_stability(cfg: &ExperimentConfig, scenario: &Scenario, out: &mut ArtifactDir) -> anyhow::Result<Vec<Check>> {
    let s = cfg.stability_section();
    let table = stability_experiment(
        scenario,
        &s.js,
        s.amplitude,
        &cfg.replica_seeds(),
        cfg.dynamics.members,
        &cfg.picard,
    )?;
    out.write("stability.csv", |w| Ok(table.write_csv(w)?))?;
    let medians: Vec<String> = table.rows.iter().map(|r| format!("{:.4}", r.median)).collect();
    Ok(vec![
        Check::new("monotone", table.monotone(), format!("medians [{}]", medians.join(", "))),
        Check::new(
            "reduction",
            table.reduction() >= s.min_reduction,
            format!("{:.2}x >= {}x", table.reduction(), s.min_reduction),
        ),
    ])
}

fn run_gamma_gap(cfg: &ExperimentConfig, scenario: &Scenario, out: &mut ArtifactDir) -> anyhow::Result<Vec<Check>> {
    let s = cfg.gamma_gap_section();
    let settings = GammaSettings {
        template: cfg.template()?,
        cost: cfg.cost.clone().context("gamma_gap needs [cost]")?,
        ns: s.ns.clone(),
        seeds: cfg.replica_seeds(),
        replicas: s.cost_replicas,
        members: cfg.dynamics.members,
        optimizer: s.optimizer,
        picard: cfg.picard,
    };
    let table = gamma_gap_experiment(scenario, &settings)?;
    out.write("gamma_gap.csv", |w| Ok(table.write_csv(w)?))?;
    out.write("gamma_gap_runs.csv", |w| Ok(table.write_runs_csv(w)?))?;
    let first = &table.rows[0];
    let last = table.rows.last().expect("nonempty N grid");
    let bound = 3.0 * (last.stderr + sampling_rate(last.n, s.rate_p));
    let mut checks = vec![Check::new(
        "gap_bound",
        last.gap <= bound,
        format!("gap(N = {}) = {:.4} <= {bound:.4}", last.n, last.gap),
    )];
    if table.rows.len() > 1 {
        checks.push(Check::new(
            "gap_shrinks",
            last.gap < first.gap,
            format!("gap(N = {}) = {:.4} < gap(N = {}) = {:.4}", last.n, last.gap, first.n, first.gap),
        ));
    }
    Ok(checks)
}

fn run_optimize(cfg: &ExperimentConfig, scenario: &Scenario, out: &mut ArtifactDir) -> anyhow::Result<Vec<Check>> {
    let s = cfg.optimize_section();
    let template = cfg.template()?;
    let cost = cfg.cost.clone().context("optimize needs [cost]")?;
    let init = template.parameters(&scenario.controls)?;
    let seed = cfg.replica_seeds()[0];
    let objective: Box<dyn Objective> = match s.objective {
        ObjectiveKind::Discrete => Box::new(DiscreteObjective {
            template: template.clone(),
            dynamics: scenario.dynamics(),
            cost,
            setup: DiscreteSetup {
                law: scenario.law.clone(),
                y0: scenario.y0.clone(),
                grid: scenario.grid,
                followers: cfg.dynamics.followers,
                replicas: s.cost_replicas,
                seed: derive_seed(seed, cfg.dynamics.followers as u64),
            },
        }),
        ObjectiveKind::Limit => Box::new(LimitObjective {
            template: template.clone(),
            dynamics: scenario.dynamics(),
            cost,
            law: scenario.law.clone(),
            y0: scenario.y0.clone(),
            grid: scenario.grid,
            members: cfg.dynamics.members,
            seed,
            picard: cfg.picard,
        }),
    };
    let start = objective.evaluate(init.values())?;
    let report = minimize(objective.as_ref(), &init, &s.optimizer)?;
    let best: Vec<ControlLaw> = template.controls(report.best.values())?;
    out.write("controls.csv", |w| Ok(ControlLaw::write_csv(&best, w)?))?;
    out.write("optimizer_trace.csv", |w| {
        writeln!(w, "evaluation,best_value")?;
        for (k, v) in report.trace.iter().enumerate() {
            writeln!(w, "{},{v}", k + 1)?;
        }
        Ok(())
    })?;
    out.write("parameters.csv", |w| {
        writeln!(w, "index,value")?;
        for (k, v) in report.best.values().iter().enumerate() {
            writeln!(w, "{k},{v}")?;
        }
        Ok(())
    })?;
    Ok(vec![
        Check::new(
            "improved",
            report.best_value <= start.value,
            format!("best {:.6} (± {:.2e}) vs initial {:.6}", report.best_value, report.stderr, start.value),
        ),
        Check::new(
            "budget",
            report.evaluations <= s.optimizer.budget,
            format!("{} evaluations, {} restarts", report.evaluations, report.restarts),
        ),
    ])
}
