//! Experiment configuration: the TOML schema, whole-file validation, and the
//! conversion into solver inputs.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use herdsim::control::{ControlLaw, GFunctional, PiecewiseConstantPath};
use herdsim::cost::CostSpec;
use herdsim::experiments::Scenario;
use herdsim::fokker_planck::FpConfig;
use herdsim::kernels::{KernelFamily, KernelSet, KernelSpec};
use herdsim::mckean_vlasov::PicardConfig;
use herdsim::optimizer::{ControlTemplate, OptimizerConfig};
use herdsim::particle::{NoiseLevel, TimeGrid};
use herdsim::rng::{derive_seed, InitialLaw};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Version of the configuration schema understood by this build.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Simulate,
    Mkv,
    Fp,
    ChaosRate,
    Equivalence,
    Stability,
    GammaGap,
    Optimize,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Simulate => "simulate",
            Experiment::Mkv => "mkv",
            Experiment::Fp => "fp",
            Experiment::ChaosRate => "chaos_rate",
            Experiment::Equivalence => "equivalence",
            Experiment::Stability => "stability",
            Experiment::GammaGap => "gamma_gap",
            Experiment::Optimize => "optimize",
        }
    }
}

fn one() -> usize {
    1
}

/// Root of an experiment file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub experiment: Experiment,
    #[serde(default)]
    pub seed: u64,
    /// Independent replica seeds `derive_seed(seed, r)` for `r < replicas`.
    #[serde(default = "one")]
    pub replicas: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub dynamics: DynamicsConfig,
    #[serde(default)]
    pub control: ControlConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost: Option<CostSpec>,
    #[serde(default)]
    pub picard: PicardConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulate: Option<SimulateSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fp: Option<FpSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chaos: Option<ChaosSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub equivalence: Option<EquivalenceSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stability: Option<StabilitySection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_gap: Option<GammaGapSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimize: Option<OptimizeSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsConfig {
    pub dim: usize,
    pub sigma: f64,
    pub horizon: f64,
    pub dt: f64,
    /// Followers `N` of the particle system.
    #[serde(default = "default_followers")]
    pub followers: usize,
    /// Ensemble size `M` of the limit solver.
    #[serde(default = "default_members")]
    pub members: usize,
    /// Initial herder positions, one row per herder.
    pub y0: Vec<Vec<f64>>,
    pub initial_law: InitialLaw,
    #[serde(default)]
    pub kernels: KernelsConfig,
}

fn default_followers() -> usize {
    256
}

fn default_members() -> usize {
    10_000
}

/// Interaction kernels; an absent kernel is identically zero.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelsConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h1: Option<KernelFamily>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h2: Option<KernelFamily>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k1: Option<KernelFamily>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k2: Option<KernelFamily>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlConfig {
    /// Pieces of the time partition of `h`; also the optimizer's resolution.
    #[serde(default = "one")]
    pub intervals: usize,
    #[serde(default = "default_u_max")]
    pub u_max: f64,
    /// One entry per herder, or none for uncontrolled herders.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub herders: Vec<HerderControl>,
}

impl Default for ControlConfig {
    fn default() -> Self {
        ControlConfig {
            intervals: 1,
            u_max: default_u_max(),
            herders: Vec::new(),
        }
    }
}

fn default_u_max() -> f64 {
    1.0
}

/// `u(t) = h(t)·g(μ_t)` for one herder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HerderControl {
    /// Row-major `d × ℓ` matrices: a single row holds `h` constant in time,
    /// otherwise one row per interval.
    pub h: Vec<Vec<f64>>,
    pub g: GFunctional,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryFormat {
    #[default]
    Csv,
    Herd1,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    #[serde(default)]
    pub format: TrajectoryFormat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FpSection {
    pub cells: usize,
    pub cfl: f64,
    pub edge_mass_tol: f64,
    /// Allowed drift of the total mass over the run.
    pub mass_tol: f64,
}

impl Default for FpSection {
    fn default() -> Self {
        let d = FpConfig::default();
        FpSection {
            cells: 512,
            cfl: d.cfl,
            edge_mass_tol: d.edge_mass_tol,
            mass_tol: 1e-9,
        }
    }
}

impl FpSection {
    pub fn solver(&self) -> FpConfig {
        FpConfig {
            cfl: self.cfl,
            max_velocity: None,
            edge_mass_tol: self.edge_mass_tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChaosSection {
    pub ns: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference_members: Option<usize>,
    pub blocks: usize,
    /// The fitted log-log slope must not exceed this.
    pub max_slope: f64,
}

impl Default for ChaosSection {
    fn default() -> Self {
        ChaosSection {
            ns: vec![8, 16, 32, 64, 128, 256, 512],
            reference_members: None,
            blocks: 8,
            max_slope: -0.35,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EquivalenceSection {
    /// Paired resolutions: row `i` uses `cells[i]` and `members[i]`.
    pub cells: Vec<usize>,
    pub members: Vec<usize>,
    pub max_distance: f64,
}

impl Default for EquivalenceSection {
    fn default() -> Self {
        EquivalenceSection {
            cells: vec![512, 1024],
            members: vec![10_000, 20_000],
            max_distance: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StabilitySection {
    pub js: Vec<usize>,
    pub amplitude: f64,
    /// Required ratio between the first and the last median deviation.
    pub min_reduction: f64,
}

impl Default for StabilitySection {
    fn default() -> Self {
        StabilitySection {
            js: vec![4, 8, 16, 32, 64],
            amplitude: 0.5,
            min_reduction: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GammaGapSection {
    pub ns: Vec<usize>,
    /// Monte Carlo replicas behind each evaluation of the discrete cost.
    pub cost_replicas: usize,
    /// Moment order of the sampling rate used in the tolerance.
    pub rate_p: f64,
    pub optimizer: OptimizerConfig,
}

impl Default for GammaGapSection {
    fn default() -> Self {
        GammaGapSection {
            ns: vec![16, 64, 256],
            cost_replicas: 32,
            rate_p: 4.0,
            optimizer: OptimizerConfig::default().with_budget(120),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    /// The `N`-particle cost averaged over replicas.
    #[default]
    Discrete,
    /// The cost along the limit flow.
    Limit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizeSection {
    pub objective: ObjectiveKind,
    pub cost_replicas: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for OptimizeSection {
    fn default() -> Self {
        OptimizeSection {
            objective: ObjectiveKind::Discrete,
            cost_replicas: 32,
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    pub fn parse(text: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// SHA-256 of the canonical JSON form, with the output directory left
    /// out so that moving a run does not change its identity.
    pub fn content_hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = None;
        let bytes = serde_json::to_vec(&canonical).expect("config serializes to JSON");
        hex(&Sha256::digest(&bytes))
    }

    pub fn replica_seeds(&self) -> Vec<u64> {
        (0..self.replicas as u64).map(|r| derive_seed(self.seed, r)).collect()
    }

    pub fn herders(&self) -> usize {
        self.dynamics.y0.len()
    }

    pub fn grid(&self) -> herdsim::Result<TimeGrid> {
        TimeGrid::new(self.dynamics.horizon, self.dynamics.dt)
    }

    pub fn fp_section(&self) -> FpSection {
        self.fp.clone().unwrap_or_default()
    }

    pub fn chaos_section(&self) -> ChaosSection {
        self.chaos.clone().unwrap_or_default()
    }

    pub fn equivalence_section(&self) -> EquivalenceSection {
        self.equivalence.clone().unwrap_or_default()
    }

    pub fn stability_section(&self) -> StabilitySection {
        self.stability.clone().unwrap_or_default()
    }

    pub fn gamma_gap_section(&self) -> GammaGapSection {
        self.gamma_gap.clone().unwrap_or_default()
    }

    pub fn optimize_section(&self) -> OptimizeSection {
        self.optimize.clone().unwrap_or_default()
    }

    /// Checks every field and returns all violations, each prefixed with
    /// the dotted path of the offending key.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let mut fail = |field: &str, msg: String| errs.push(format!("{field}: {msg}"));
        let dy = &self.dynamics;
        let d = dy.dim;

        if self.schema_version != SCHEMA_VERSION {
            fail(
                "schema_version",
                format!("unsupported version {} (this build reads {SCHEMA_VERSION})", self.schema_version),
            );
        }
        if self.replicas == 0 {
            fail("replicas", "must be at least 1".into());
        }
        if d == 0 {
            fail("dynamics.dim", "must be at least 1".into());
        }
        if let Err(e) = NoiseLevel::new(dy.sigma) {
            fail("dynamics.sigma", format!("must be finite and >= 0, got {} ({e})", dy.sigma));
        }
        if !(dy.horizon.is_finite() && dy.horizon > 0.0) {
            fail("dynamics.horizon", format!("must be positive, got {}", dy.horizon));
        } else if !(dy.dt.is_finite() && dy.dt > 0.0) {
            fail("dynamics.dt", format!("must be positive, got {}", dy.dt));
        } else if let Err(e) = self.grid() {
            fail("dynamics.dt", e.to_string());
        }
        if dy.followers == 0 {
            fail("dynamics.followers", "must be at least 1".into());
        }
        if dy.members == 0 {
            fail("dynamics.members", "must be at least 1".into());
        }
        if dy.y0.is_empty() {
            fail("dynamics.y0", "need at least one herder".into());
        }
        for (i, y) in dy.y0.iter().enumerate() {
            if y.len() != d {
                fail(&format!("dynamics.y0[{i}]"), format!("has {} coordinates, expected {d}", y.len()));
            }
            if y.iter().any(|v| !v.is_finite()) {
                fail(&format!("dynamics.y0[{i}]"), "must be finite".into());
            }
        }
        if let Err(e) = dy.initial_law.validate() {
            fail("dynamics.initial_law", e.to_string());
        } else if dy.initial_law.dim() != d {
            fail(
                "dynamics.initial_law",
                format!("has dimension {}, expected {d}", dy.initial_law.dim()),
            );
        }
        if d > 0 {
            for (name, k) in self.kernel_entries() {
                if let Some(family) = k {
                    if let Err(e) = KernelSpec::new(family, d) {
                        fail(&format!("dynamics.kernels.{name}"), e.to_string());
                    }
                }
            }
        }

        let c = &self.control;
        if c.intervals == 0 {
            fail("control.intervals", "must be at least 1".into());
        }
        if !(c.u_max.is_finite() && c.u_max > 0.0) {
            fail("control.u_max", format!("must be positive, got {}", c.u_max));
        }
        if !c.herders.is_empty() && c.herders.len() != dy.y0.len() {
            fail(
                "control.herders",
                format!("{} entries for {} herders in dynamics.y0", c.herders.len(), dy.y0.len()),
            );
        }
        for (i, hc) in c.herders.iter().enumerate() {
            let at = format!("control.herders[{i}]");
            if d > 0 {
                if let Err(e) = hc.g.validate(d) {
                    fail(&format!("{at}.g"), e.to_string());
                    continue;
                }
            }
            let width = d * hc.g.len();
            if hc.h.len() != 1 && hc.h.len() != c.intervals {
                fail(
                    &format!("{at}.h"),
                    format!("has {} rows; give 1 or control.intervals = {}", hc.h.len(), c.intervals),
                );
            }
            for (k, row) in hc.h.iter().enumerate() {
                if row.len() != width {
                    fail(
                        &format!("{at}.h[{k}]"),
                        format!("has {} entries, expected d·ℓ = {width}", row.len()),
                    );
                } else if row.iter().any(|v| v.abs() > c.u_max || !v.is_finite()) {
                    fail(&format!("{at}.h[{k}]"), format!("entries must lie in [-u_max, u_max] = ±{}", c.u_max));
                }
            }
        }

        if let Some(cost) = &self.cost {
            if d > 0 && !dy.y0.is_empty() {
                if let Err(e) = cost.validate(d, dy.y0.len()) {
                    fail("cost", e.to_string());
                }
            }
        }
        if let Err(e) = self.picard.validate() {
            fail("picard", e.to_string());
        }

        match self.experiment {
            Experiment::Simulate | Experiment::Mkv => {}
            Experiment::Fp => {
                if d != 1 {
                    fail("dynamics.dim", "the Fokker–Planck solver needs dim = 1".into());
                }
                self.check_fp(&mut fail, self.fp_section().cells);
            }
            Experiment::ChaosRate => {
                let s = self.chaos_section();
                if s.ns.len() < 2 || s.ns[0] == 0 || s.ns.windows(2).any(|w| w[1] <= w[0]) {
                    fail("chaos.ns", "need at least two increasing positive sizes".into());
                }
                if s.blocks == 0 {
                    fail("chaos.blocks", "must be at least 1".into());
                }
                if let (Some(m), Some(&n)) = (s.reference_members, s.ns.last()) {
                    if m < s.blocks * n {
                        fail(
                            "chaos.reference_members",
                            format!("{m} cannot hold {} blocks of N = {n}", s.blocks),
                        );
                    }
                }
            }
            Experiment::Equivalence => {
                let s = self.equivalence_section();
                if d != 1 {
                    fail("dynamics.dim", "the equivalence check needs dim = 1".into());
                }
                if s.cells.is_empty() || s.cells.len() != s.members.len() {
                    fail("equivalence.cells", "need one entry per equivalence.members entry".into());
                }
                if s.members.contains(&0) {
                    fail("equivalence.members", "must be positive".into());
                }
                for &cells in &s.cells {
                    self.check_fp(&mut fail, cells);
                }
            }
            Experiment::Stability => {
                let s = self.stability_section();
                if s.js.is_empty() || s.js.contains(&0) {
                    fail("stability.js", "need positive oscillation indices".into());
                }
                if !(s.amplitude.is_finite() && s.amplitude >= 0.0) {
                    fail("stability.amplitude", "must be finite and >= 0".into());
                }
            }
            Experiment::GammaGap => {
                let s = self.gamma_gap_section();
                if self.cost.is_none() {
                    fail("cost", "gamma_gap needs a [cost] section".into());
                }
                if s.ns.is_empty() || s.ns[0] == 0 || s.ns.windows(2).any(|w| w[1] <= w[0]) {
                    fail("gamma_gap.ns", "need increasing positive sizes".into());
                }
                if s.cost_replicas == 0 {
                    fail("gamma_gap.cost_replicas", "must be at least 1".into());
                }
                if !(s.rate_p > 1.0) {
                    fail("gamma_gap.rate_p", "must exceed 1".into());
                }
                self.check_optimizer(&mut fail, "gamma_gap.optimizer", &s.optimizer);
            }
            Experiment::Optimize => {
                let s = self.optimize_section();
                if self.cost.is_none() {
                    fail("cost", "optimize needs a [cost] section".into());
                }
                if s.cost_replicas == 0 {
                    fail("optimize.cost_replicas", "must be at least 1".into());
                }
                self.check_optimizer(&mut fail, "optimize.optimizer", &s.optimizer);
            }
        }
        errs
    }

    fn check_fp(&self, fail: &mut impl FnMut(&str, String), cells: usize) {
        let s = self.fp_section();
        if cells < 3 {
            fail("fp.cells", format!("need at least 3 cells, got {cells}"));
        }
        if let Err(e) = s.solver().validate() {
            fail("fp", e.to_string());
        }
        if !(s.mass_tol > 0.0) {
            fail("fp.mass_tol", "must be positive".into());
        }
    }

    fn check_optimizer(&self, fail: &mut impl FnMut(&str, String), at: &str, cfg: &OptimizerConfig) {
        if self.control.herders.is_empty() {
            fail("control.herders", "the optimizer needs a g for every herder".into());
            return;
        }
        if let Ok(t) = self.template() {
            if let Err(e) = cfg.validate(t.len()) {
                fail(at, e.to_string());
            }
        }
    }

    fn kernel_entries(&self) -> [(&'static str, Option<KernelFamily>); 4] {
        let k = &self.dynamics.kernels;
        [("h1", k.h1), ("h2", k.h2), ("k1", k.k1), ("k2", k.k2)]
    }

    /// Solver inputs; call only on a validated config.
    pub fn scenario(&self) -> anyhow::Result<Scenario> {
        let d = self.dynamics.dim;
        let kernel = |k: Option<KernelFamily>| match k {
            Some(f) => KernelSpec::new(f, d),
            None => Ok(KernelSpec::zero(d)),
        };
        let k = &self.dynamics.kernels;
        let kernels = KernelSet::new(kernel(k.h1)?, kernel(k.h2)?, kernel(k.k1)?, kernel(k.k2)?)?;
        Ok(Scenario {
            kernels,
            noise: NoiseLevel::new(self.dynamics.sigma)?,
            law: self.dynamics.initial_law.clone(),
            y0: self.dynamics.y0.concat(),
            grid: self.grid()?,
            controls: self.controls()?,
        })
    }

    pub fn controls(&self) -> anyhow::Result<Vec<ControlLaw>> {
        let d = self.dynamics.dim;
        let horizon = self.dynamics.horizon;
        let c = &self.control;
        if c.herders.is_empty() {
            return Ok(vec![ControlLaw::zero(horizon, d, 1); self.herders()]);
        }
        c.herders
            .iter()
            .map(|hc| {
                let ell = hc.g.len();
                let h = if hc.h.len() == 1 {
                    PiecewiseConstantPath::constant(horizon, d, ell, &hc.h[0], c.intervals)?
                } else {
                    PiecewiseConstantPath::new(horizon, d, ell, hc.h.concat())?
                };
                Ok(ControlLaw::new(h, hc.g.clone(), c.u_max)?)
            })
            .collect()
    }

    pub fn template(&self) -> anyhow::Result<ControlTemplate> {
        if self.control.herders.is_empty() {
            bail!("control.herders: the optimizer needs a g for every herder");
        }
        Ok(ControlTemplate::new(
            self.dynamics.horizon,
            self.dynamics.dim,
            self.control.intervals,
            self.control.u_max,
            self.control.herders.iter().map(|h| h.g.clone()).collect(),
        )?)
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
