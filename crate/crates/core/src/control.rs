//! Separated-variables herder controls `u(t, μ) = h(t)·g(μ)`.
//!
//! `h` is a piecewise-constant path of `d × ℓ` matrices confined to the box
//! `[−u_max, u_max]^{d×ℓ}`; `g` is a bounded Lipschitz functional of the
//! follower distribution taken from a small dictionary.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, HerdError, Result};
use crate::measures::{wasserstein1, Cloud, EmpiricalMeasure};

/// Piecewise-constant matrix path on `intervals` uniform pieces of `[0, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseConstantPath {
    horizon: f64,
    rows: usize,
    cols: usize,
    /// `intervals × rows × cols`, row-major matrices.
    values: Vec<f64>,
}

impl PiecewiseConstantPath {
    pub fn new(horizon: f64, rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(invalid("horizon", "must be positive"));
        }
        if rows == 0 || cols == 0 {
            return Err(invalid("h", "matrix shape must be nonempty"));
        }
        let block = rows * cols;
        if values.is_empty() || values.len() % block != 0 {
            return Err(invalid(
                "h",
                format!("{} values do not form {rows}x{cols} matrices", values.len()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("h", "values must be finite"));
        }
        Ok(PiecewiseConstantPath {
            horizon,
            rows,
            cols,
            values,
        })
    }

    pub fn constant(horizon: f64, rows: usize, cols: usize, matrix: &[f64], intervals: usize) -> Result<Self> {
        let mut values = Vec::with_capacity(matrix.len() * intervals);
        for _ in 0..intervals {
            values.extend_from_slice(matrix);
        }
        Self::new(horizon, rows, cols, values)
    }

    pub fn zero(horizon: f64, rows: usize, cols: usize, intervals: usize) -> Self {
        PiecewiseConstantPath {
            horizon,
            rows,
            cols,
            values: vec![0.0; intervals.max(1) * rows * cols],
        }
    }

    pub fn intervals(&self) -> usize {
        self.values.len() / (self.rows * self.cols)
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Interval containing `t` (right-continuous; the final node belongs to
    /// the last interval).
    pub fn interval_index(&self, t: f64) -> usize {
        let k = self.intervals();
        let pos = t / self.horizon * k as f64;
        // Absorb rounding in t = step·dt at interval boundaries.
        let idx = (pos + 1e-9).floor();
        if idx <= 0.0 {
            0
        } else {
            (idx as usize).min(k - 1)
        }
    }

    pub fn interval(&self, k: usize) -> &[f64] {
        let b = self.rows * self.cols;
        &self.values[k * b..(k + 1) * b]
    }

    pub fn at(&self, t: f64) -> &[f64] {
        self.interval(self.interval_index(t))
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Re-expresses the path on `intervals` pieces, which must be a multiple
    /// of the current count.
    pub fn refine(&self, intervals: usize) -> Result<Self> {
        let k = self.intervals();
        if intervals % k != 0 {
            return Err(invalid(
                "intervals",
                format!("{intervals} is not a multiple of {k}"),
            ));
        }
        let factor = intervals / k;
        let mut values = Vec::with_capacity(self.values.len() * factor);
        for i in 0..intervals {
            values.extend_from_slice(self.interval(i / factor));
        }
        Self::new(self.horizon, self.rows, self.cols, values)
    }
}

/// A 1-Lipschitz bounded test function `φ(x) = clamp(x_axis − center, −clip, clip)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestFunction {
    pub axis: usize,
    pub center: f64,
    pub clip: f64,
}

impl TestFunction {
    #[inline]
    fn eval(&self, x: &[f64]) -> f64 {
        (x[self.axis] - self.center).clamp(-self.clip, self.clip)
    }
}

/// Dictionary of measure functionals `g : W₁(R^d) → R^ℓ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GFunctional {
    /// `g(μ) = c`.
    Constant { c: Vec<f64> },
    /// `g_k(μ) = tanh(∫ φ_k dμ)`.
    TanhStatistic { features: Vec<TestFunction> },
}

impl GFunctional {
    pub fn len(&self) -> usize {
        match self {
            GFunctional::Constant { c } => c.len(),
            GFunctional::TanhStatistic { features } => features.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn tag(&self) -> &'static str {
        match self {
            GFunctional::Constant { .. } => "constant",
            GFunctional::TanhStatistic { .. } => "tanh_statistic",
        }
    }

    /// Certified Lipschitz constant with respect to `W₁` (Euclidean norm on `R^ℓ`).
    pub fn lipschitz(&self) -> f64 {
        match self {
            GFunctional::Constant { .. } => 0.0,
            // Each entry is 1-Lipschitz; the Euclidean norm picks up √ℓ.
            GFunctional::TanhStatistic { features } => (features.len() as f64).sqrt(),
        }
    }

    /// Certified bound `|g(μ)| ≤ M`.
    pub fn bound(&self) -> f64 {
        match self {
            GFunctional::Constant { c } => c.iter().map(|v| v * v).sum::<f64>().sqrt(),
            GFunctional::TanhStatistic { features } => (features.len() as f64).sqrt(),
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.is_empty() {
            return Err(invalid("g", "feature dimension must be at least 1"));
        }
        match self {
            GFunctional::Constant { c } => {
                if c.iter().any(|v| !v.is_finite()) {
                    return Err(invalid("g.c", "must be finite"));
                }
            }
            GFunctional::TanhStatistic { features } => {
                for f in features {
                    if f.axis >= dim {
                        return Err(invalid("g.features.axis", format!("axis {} >= d = {dim}", f.axis)));
                    }
                    if !(f.clip.is_finite() && f.clip > 0.0 && f.center.is_finite()) {
                        return Err(invalid("g.features.clip", "needs finite center and clip > 0"));
                    }
                }
            }
        }
        Ok(())
    }

    pub(crate) fn eval_into(&self, mu: Cloud<'_>, out: &mut [f64]) {
        match self {
            GFunctional::Constant { c } => out.copy_from_slice(c),
            GFunctional::TanhStatistic { features } => {
                for (o, f) in out.iter_mut().zip(features) {
                    *o = mu.integrate(|x| f.eval(x)).tanh();
                }
            }
        }
    }

    pub fn eval(&self, mu: &EmpiricalMeasure) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        self.eval_into(mu.view(), &mut out);
        out
    }

    /// Randomised check of the certified constants against exact `W₁`
    /// perturbations of small empirical measures.
    pub fn certify(&self, dim: usize, seed: u64) -> Result<()> {
        self.validate(dim)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (l, m) = (self.lipschitz(), self.bound());
        for _ in 0..200 {
            let atoms = rng.random_range(1..8usize);
            let scale = 10f64.powf(rng.random_range(-2.0..1.0));
            let a: Vec<f64> = (0..atoms * dim).map(|_| rng.random_range(-3.0..3.0)).collect();
            let b: Vec<f64> = a.iter().map(|x| x + scale * rng.random_range(-1.0..1.0)).collect();
            let mu = EmpiricalMeasure::uniform(dim, a)?;
            let nu = EmpiricalMeasure::uniform(dim, b)?;
            let (gm, gn) = (self.eval(&mu), self.eval(&nu));
            let diff = gm.iter().zip(&gn).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            let w = wasserstein1(&mu, &nu)?;
            if diff > l * w + 1e-12 {
                return Err(HerdError::Certification(format!(
                    "g difference {diff:.3e} exceeds {l} x W1 = {:.3e}",
                    l * w
                )));
            }
            let norm = gm.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > m + 1e-12 {
                return Err(HerdError::Certification(format!("|g| = {norm} exceeds bound {m}")));
            }
        }
        Ok(())
    }
}

/// One herder's control `u(t, μ) = h(t)·g(μ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlLaw {
    h: PiecewiseConstantPath,
    g: GFunctional,
    u_max: f64,
}

impl ControlLaw {
    pub fn new(h: PiecewiseConstantPath, g: GFunctional, u_max: f64) -> Result<Self> {
        if !(u_max.is_finite() && u_max >= 0.0) {
            return Err(invalid("u_max", "must be finite and nonnegative"));
        }
        let (rows, cols) = h.shape();
        g.validate(rows)?;
        if g.len() != cols {
            return Err(HerdError::DimensionMismatch {
                expected: cols,
                got: g.len(),
            });
        }
        if h.max_abs() > u_max * (1.0 + 1e-12) {
            return Err(invalid(
                "h",
                format!("entry {} leaves the box [-{u_max}, {u_max}]", h.max_abs()),
            ));
        }
        Ok(ControlLaw { h, g, u_max })
    }

    /// `h ≡ 0` with a constant unit `g`.
    pub fn zero(horizon: f64, dim: usize, ell: usize) -> Self {
        ControlLaw {
            h: PiecewiseConstantPath::zero(horizon, dim, ell, 1),
            g: GFunctional::Constant { c: vec![1.0; ell] },
            u_max: 0.0,
        }
    }

    pub fn h(&self) -> &PiecewiseConstantPath {
        &self.h
    }

    pub fn g(&self) -> &GFunctional {
        &self.g
    }

    pub fn u_max(&self) -> f64 {
        self.u_max
    }

    pub fn dim(&self) -> usize {
        self.h.rows
    }

    pub fn ell(&self) -> usize {
        self.h.cols
    }

    /// `true` when `u` does not depend on the measure.
    pub fn is_measure_free(&self) -> bool {
        matches!(self.g, GFunctional::Constant { .. }) || self.h.max_abs() == 0.0
    }

    /// `out += h(t)·g_value`
    pub(crate) fn add_drift(&self, t: f64, g_value: &[f64], out: &mut [f64]) {
        let h = self.h.at(t);
        let cols = self.h.cols;
        for (r, o) in out.iter_mut().enumerate() {
            let row = &h[r * cols..(r + 1) * cols];
            *o += row.iter().zip(g_value).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    /// Writes rows `herder,interval,h_r_c...,g`.
    pub fn write_csv<W: Write>(controls: &[ControlLaw], mut out: W) -> Result<()> {
        let Some(first) = controls.first() else {
            writeln!(out, "herder,interval,g")?;
            return Ok(());
        };
        let (rows, cols) = first.h.shape();
        write!(out, "herder,interval")?;
        for r in 1..=rows {
            for c in 1..=cols {
                write!(out, ",h_{r}_{c}")?;
            }
        }
        writeln!(out, ",g")?;
        for (i, law) in controls.iter().enumerate() {
            for k in 0..law.h.intervals() {
                write!(out, "{i},{k}")?;
                for v in law.h.interval(k) {
                    write!(out, ",{v}")?;
                }
                writeln!(out, ",{}", law.g.tag())?;
            }
        }
        Ok(())
    }
}
