//! Empirical probability measures on `R^d`, Wasserstein distances, moments and
//! kernel convolutions.
//!
//! Distances are exact. In one dimension the monotone (quantile) coupling is
//! optimal for every convex cost `|x − y|^p`, so sorting suffices. In higher
//! dimension the transport problem is solved as an assignment (equal-size
//! uniform supports) or as a min-cost flow (general weights), up to a support
//! cap beyond which callers must subsample.

use std::io::{BufRead, Write};

use crate::error::{invalid, HerdError, Result};
use crate::kernels::KernelSpec;
use crate::transport;

/// Default support cap for exact transport in dimension two and higher.
pub const DEFAULT_LP_CAP: usize = 4096;

/// Weighted point cloud `Σ w_i δ_{x_i}` with weights normalised to one.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    dim: usize,
    points: Vec<f64>,
    weights: Vec<f64>,
}

impl EmpiricalMeasure {
    /// Builds a measure from flat row-major points and nonnegative weights.
    /// Weights are rescaled to sum to one; negative weights are rejected.
    pub fn new(dim: usize, points: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(HerdError::InvalidMeasure("dimension must be at least 1".into()));
        }
        if points.len() != dim * weights.len() {
            return Err(HerdError::InvalidMeasure(format!(
                "{} coordinates do not form {} points of dimension {dim}",
                points.len(),
                weights.len()
            )));
        }
        if weights.is_empty() {
            return Err(HerdError::InvalidMeasure("empty support".into()));
        }
        if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
            return Err(HerdError::InvalidMeasure(format!("invalid weight {w}")));
        }
        if points.iter().any(|x| !x.is_finite()) {
            return Err(HerdError::InvalidMeasure("non-finite coordinate".into()));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(HerdError::InvalidMeasure("weights sum to zero".into()));
        }
        let weights = weights.into_iter().map(|w| w / total).collect();
        Ok(EmpiricalMeasure {
            dim,
            points,
            weights,
        })
    }

    /// Uniform measure `(1/n) Σ δ_{x_i}` on flat row-major points.
    pub fn uniform(dim: usize, points: Vec<f64>) -> Result<Self> {
        if dim == 0 || points.len() % dim != 0 {
            return Err(HerdError::InvalidMeasure(format!(
                "{} coordinates do not form points of dimension {dim}",
                points.len()
            )));
        }
        let n = points.len() / dim;
        Self::new(dim, points, vec![1.0; n])
    }

    pub fn dirac(x: &[f64]) -> Result<Self> {
        Self::uniform(x.len(), x.to_vec())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mean(&self) -> Vec<f64> {
        self.view().mean()
    }

    /// Pushforward by a map on points.
    pub fn map(&self, mut f: impl FnMut(&[f64]) -> Vec<f64>) -> Result<Self> {
        let mut points = Vec::with_capacity(self.points.len());
        let mut dim = None;
        for i in 0..self.len() {
            let y = f(self.point(i));
            match dim {
                None => dim = Some(y.len()),
                Some(d) if d != y.len() => {
                    return Err(HerdError::DimensionMismatch {
                        expected: d,
                        got: y.len(),
                    })
                }
                _ => {}
            }
            points.extend(y);
        }
        Self::new(dim.unwrap_or(self.dim), points, self.weights.clone())
    }

    pub(crate) fn view(&self) -> Cloud<'_> {
        Cloud {
            dim: self.dim,
            points: &self.points,
            weights: Some(&self.weights),
        }
    }

    fn is_uniform(&self) -> bool {
        let w0 = self.weights[0];
        self.weights.iter().all(|&w| (w - w0).abs() <= 1e-15 * w0.max(1e-300))
    }

    /// One row per atom: `weight,x1,...,xd`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        write!(out, "weight")?;
        for k in 1..=self.dim {
            write!(out, ",x{k}")?;
        }
        writeln!(out)?;
        for i in 0..self.len() {
            write!(out, "{}", self.weights[i])?;
            for x in self.point(i) {
                write!(out, ",{x}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines
            .next()
            .ok_or_else(|| HerdError::Format("missing header".into()))??;
        let cols: Vec<&str> = header.trim().split(',').collect();
        if cols.first() != Some(&"weight") || cols.len() < 2 {
            return Err(HerdError::Format(format!("unexpected header `{header}`")));
        }
        let dim = cols.len() - 1;
        let mut points = Vec::new();
        let mut weights = Vec::new();
        for (row, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let vals = line
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| HerdError::Format(format!("row {}: {e}", row + 1)))?;
            if vals.len() != dim + 1 {
                return Err(HerdError::Format(format!(
                    "row {} has {} fields, expected {}",
                    row + 1,
                    vals.len(),
                    dim + 1
                )));
            }
            weights.push(vals[0]);
            points.extend_from_slice(&vals[1..]);
        }
        Self::new(dim, points, weights)
    }
}

/// Moment order `p > 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentOrder(f64);

impl MomentOrder {
    pub fn new(p: f64) -> Result<Self> {
        if !(p.is_finite() && p > 1.0) {
            return Err(invalid("p", format!("moment order must be finite and > 1, got {p}")));
        }
        Ok(MomentOrder(p))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Borrowed point cloud; `weights == None` means uniform.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Cloud<'a> {
    pub dim: usize,
    pub points: &'a [f64],
    pub weights: Option<&'a [f64]>,
}

impl<'a> Cloud<'a> {
    pub fn uniform(dim: usize, points: &'a [f64]) -> Self {
        Cloud {
            dim,
            points,
            weights: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    #[inline]
    pub fn weight(&self, i: usize) -> f64 {
        match self.weights {
            Some(w) => w[i],
            None => 1.0 / self.len() as f64,
        }
    }

    #[inline]
    pub fn point(&self, i: usize) -> &'a [f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for i in 0..self.len() {
            let w = self.weight(i);
            for (mk, xk) in m.iter_mut().zip(self.point(i)) {
                *mk += w * xk;
            }
        }
        m
    }

    /// `∫ f dμ`
    pub fn integrate(&self, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
        (0..self.len()).map(|i| self.weight(i) * f(self.point(i))).sum()
    }
}

/// A frozen measure prepared for repeated kernel convolutions.
///
/// Linear kernels reduce to the mean and are evaluated in `O(d)`; other
/// kernels are summed directly over the atoms.
pub(crate) struct Field<'a> {
    cloud: Cloud<'a>,
    mean: Vec<f64>,
}

impl<'a> Field<'a> {
    pub fn new(cloud: Cloud<'a>) -> Self {
        let mean = cloud.mean();
        Field { cloud, mean }
    }

    /// Field whose mean is already known.
    pub fn with_mean(cloud: Cloud<'a>, mean: Vec<f64>) -> Self {
        debug_assert_eq!(mean.len(), cloud.dim);
        Field { cloud, mean }
    }

    pub fn cloud(&self) -> Cloud<'a> {
        self.cloud
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// `out += Σ w_l K(x_l − x)`
    pub fn add_convolution(&self, k: &KernelSpec, x: &[f64], out: &mut [f64]) {
        if k.is_zero() {
            return;
        }
        if let Some(a) = k.linear_coefficient() {
            for ((o, m), xi) in out.iter_mut().zip(&self.mean).zip(x) {
                *o += a * (m - xi);
            }
            return;
        }
        for l in 0..self.cloud.len() {
            k.add_diff(self.cloud.point(l), x, self.cloud.weight(l), out);
        }
    }

    /// `out += Σ w_l K(x − x_l)`
    pub fn add_pull(&self, k: &KernelSpec, x: &[f64], out: &mut [f64]) {
        if k.is_zero() {
            return;
        }
        if let Some(a) = k.linear_coefficient() {
            for ((o, m), xi) in out.iter_mut().zip(&self.mean).zip(x) {
                *o += a * (xi - m);
            }
            return;
        }
        for l in 0..self.cloud.len() {
            k.add_diff(x, self.cloud.point(l), self.cloud.weight(l), out);
        }
    }
}

fn check_dims(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<()> {
    if mu.dim != nu.dim {
        return Err(HerdError::DimensionMismatch {
            expected: mu.dim,
            got: nu.dim,
        });
    }
    Ok(())
}

/// Optimal transport cost `min_γ ∫ c(x, y) dγ` for the cost `c = |x − y|^p`.
fn transport_cost(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, p: f64, cap: usize) -> Result<f64> {
    check_dims(mu, nu)?;
    if mu.dim == 1 {
        return Ok(sorted_cost_1d(mu.view(), nu.view(), p));
    }
    lp_cost(mu, nu, p, cap)
}

/// Transport cost through the general solvers, regardless of dimension.
fn lp_cost(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, p: f64, cap: usize) -> Result<f64> {
    let size = mu.len().max(nu.len());
    if size > cap {
        return Err(HerdError::SupportTooLarge { size, cap });
    }
    let n = mu.len();
    let m = nu.len();
    let mut cost = Vec::with_capacity(n * m);
    for i in 0..n {
        for j in 0..m {
            cost.push(pow_cost(euclid(mu.point(i), nu.point(j)), p));
        }
    }
    if n == m && mu.is_uniform() && nu.is_uniform() {
        let (total, _) = transport::assignment(n, &cost);
        Ok(total / n as f64)
    } else {
        Ok(transport::transportation(&mu.weights, &nu.weights, &cost))
    }
}

#[inline]
fn pow_cost(r: f64, p: f64) -> f64 {
    if p == 1.0 {
        r
    } else if p == 2.0 {
        r * r
    } else {
        r.powf(p)
    }
}

#[inline]
fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn sorted_atoms(c: Cloud<'_>) -> Vec<(f64, f64)> {
    let mut atoms: Vec<(f64, f64)> = (0..c.len()).map(|i| (c.points[i], c.weight(i))).collect();
    atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
    atoms
}

/// Cost of the monotone coupling between two one-dimensional clouds.
pub(crate) fn sorted_cost_1d(a: Cloud<'_>, b: Cloud<'_>, p: f64) -> f64 {
    debug_assert_eq!(a.dim, 1);
    debug_assert_eq!(b.dim, 1);
    // Equal-size uniform clouds: match order statistics directly.
    if a.weights.is_none() && b.weights.is_none() && a.len() == b.len() {
        let mut xs = a.points.to_vec();
        let mut ys = b.points.to_vec();
        xs.sort_unstable_by(f64::total_cmp);
        ys.sort_by(f64::total_cmp);
        let s: f64 = xs
            .iter()
            .zip(&ys)
            .map(|(x, y)| pow_cost((x - y).abs(), p))
            .sum();
        return s / xs.len() as f64;
    }
    let xa = sorted_atoms(a);
    let xb = sorted_atoms(b);
    let (mut i, mut j) = (0, 0);
    let (mut ra, mut rb) = (xa[0].1, xb[0].1);
    let mut total = 0.0;
    loop {
        let mass = ra.min(rb);
        total += mass * pow_cost((xa[i].0 - xb[j].0).abs(), p);
        ra -= mass;
        rb -= mass;
        // Whichever side is exhausted advances; ties advance both.
        let adv_a = ra <= rb;
        let adv_b = rb <= ra;
        if adv_a {
            i += 1;
            if i == xa.len() {
                break;
            }
            ra = xa[i].1;
        }
        if adv_b {
            j += 1;
            if j == xb.len() {
                break;
            }
            rb = xb[j].1;
        }
    }
    total
}

/// `W₁(μ, ν)`, exact.
pub fn wasserstein1(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<f64> {
    transport_cost(mu, nu, 1.0, DEFAULT_LP_CAP)
}

/// `W₁(μ, ν)` with an explicit support cap for the `d ≥ 2` solvers.
pub fn wasserstein1_capped(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, cap: usize) -> Result<f64> {
    transport_cost(mu, nu, 1.0, cap)
}

/// `W_p(μ, ν)`, exact.
pub fn wasserstein_p(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, p: MomentOrder) -> Result<f64> {
    let c = transport_cost(mu, nu, p.value(), DEFAULT_LP_CAP)?;
    Ok(c.max(0.0).powf(1.0 / p.value()))
}

/// `W_p` (or `W₁` when `p = 1`) through the general LP route in any dimension.
///
/// This bypasses the one-dimensional sorting shortcut and exists to cross-check it.
pub fn wasserstein_lp(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, p: f64) -> Result<f64> {
    check_dims(mu, nu)?;
    if !(p >= 1.0 && p.is_finite()) {
        return Err(invalid("p", "transport exponent must be finite and >= 1"));
    }
    let c = lp_cost(mu, nu, p, DEFAULT_LP_CAP)?;
    Ok(c.max(0.0).powf(1.0 / p))
}

/// `M_p(μ) = (Σ w_i |x_i|^p)^{1/p}` about the origin.
pub fn moment(mu: &EmpiricalMeasure, p: MomentOrder) -> f64 {
    moment_of(mu.view(), p.value())
}

pub(crate) fn moment_of(c: Cloud<'_>, p: f64) -> f64 {
    let s = c.integrate(|x| pow_cost(x.iter().map(|v| v * v).sum::<f64>().sqrt(), p));
    s.powf(1.0 / p)
}

/// `(K ∗ μ)(x) = Σ w_i K(x_i − x)`.
pub fn convolve(kernel: &KernelSpec, mu: &EmpiricalMeasure, x: &[f64]) -> Result<Vec<f64>> {
    if kernel.dim() != mu.dim {
        return Err(HerdError::DimensionMismatch {
            expected: mu.dim,
            got: kernel.dim(),
        });
    }
    if x.len() != mu.dim {
        return Err(HerdError::DimensionMismatch {
            expected: mu.dim,
            got: x.len(),
        });
    }
    let mut out = vec![0.0; mu.dim];
    for i in 0..mu.len() {
        kernel.add_diff(mu.point(i), x, mu.weights[i], &mut out);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m1(points: &[f64]) -> EmpiricalMeasure {
        EmpiricalMeasure::uniform(1, points.to_vec()).unwrap()
    }

    #[test]
    fn w1_examples() {
        let mu = m1(&[0.3, -1.0, 2.0]);
        assert_eq!(wasserstein1(&mu, &mu).unwrap(), 0.0);
        assert_eq!(wasserstein1(&m1(&[0.0]), &m1(&[1.0])).unwrap(), 1.0);
        // Brute force over the two permutation couplings of {0,2} -> {1,3}.
        let (a, b): ([f64; 2], [f64; 2]) = ([0.0, 2.0], [1.0, 3.0]);
        let brute = f64::min(
            ((a[0] - b[0]).abs() + (a[1] - b[1]).abs()) / 2.0,
            ((a[0] - b[1]).abs() + (a[1] - b[0]).abs()) / 2.0,
        );
        assert_eq!(brute, 1.0);
        assert!((wasserstein1(&m1(&a), &m1(&b)).unwrap() - brute).abs() < 1e-15);
    }

    #[test]
    fn wp_examples() {
        let p2 = MomentOrder::new(2.0).unwrap();
        let mu = m1(&[0.5, 1.5]);
        assert_eq!(wasserstein_p(&mu, &mu, p2).unwrap(), 0.0);
        assert!((wasserstein_p(&m1(&[0.0]), &m1(&[2.0]), p2).unwrap() - 2.0).abs() < 1e-15);
        // {-1, 1} vs {0, 0}: every coupling moves each unit of mass by 1.
        assert!((wasserstein_p(&m1(&[-1.0, 1.0]), &m1(&[0.0, 0.0]), p2).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn moment_examples() {
        let p2 = MomentOrder::new(2.0).unwrap();
        let p3 = MomentOrder::new(3.0).unwrap();
        assert_eq!(moment(&m1(&[0.0]), p3), 0.0);
        assert!((moment(&m1(&[2.0]), p2) - 2.0).abs() < 1e-15);
        assert!((moment(&m1(&[-1.0, 1.0]), p2) - 1.0).abs() < 1e-15);
        assert!(MomentOrder::new(1.0).is_err());
    }

    #[test]
    fn convolve_examples() {
        let sat = KernelSpec::saturating(2.0, 1).unwrap();
        assert_eq!(convolve(&sat, &m1(&[4.0]), &[4.0]).unwrap(), vec![0.0]);
        let lin = KernelSpec::linear(1.0, 1).unwrap();
        // Direct sum oracle: ((0 - 0) + (2 - 0)) / 2.
        assert_eq!(convolve(&lin, &m1(&[0.0, 2.0]), &[0.0]).unwrap(), vec![1.0]);
        assert_eq!(convolve(&lin, &m1(&[5.0]), &[2.0]).unwrap(), vec![3.0]);
        assert!(convolve(&lin, &m1(&[5.0]), &[2.0, 1.0]).is_err());
    }

    #[test]
    fn constructor_rejects_bad_input() {
        assert!(EmpiricalMeasure::new(1, vec![0.0, 1.0], vec![0.5, -0.5]).is_err());
        assert!(EmpiricalMeasure::new(1, vec![], vec![]).is_err());
        assert!(EmpiricalMeasure::new(2, vec![0.0, 1.0, 2.0], vec![1.0, 1.0]).is_err());
        assert!(EmpiricalMeasure::new(1, vec![0.0], vec![0.0]).is_err());
        let mu = EmpiricalMeasure::new(1, vec![0.0, 1.0], vec![2.0, 6.0]).unwrap();
        assert_eq!(mu.weights(), &[0.25, 0.75]);
    }

    #[test]
    fn distance_dimension_mismatch() {
        let a = m1(&[0.0]);
        let b = EmpiricalMeasure::dirac(&[0.0, 0.0]).unwrap();
        assert!(matches!(wasserstein1(&a, &b), Err(HerdError::DimensionMismatch { .. })));
    }

    #[test]
    fn support_cap_is_enforced_in_higher_dimension() {
        let pts: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let a = EmpiricalMeasure::uniform(2, pts.clone()).unwrap();
        let b = EmpiricalMeasure::uniform(2, pts.iter().map(|x| x + 1.0).collect()).unwrap();
        assert!(matches!(
            wasserstein1_capped(&a, &b, 5),
            Err(HerdError::SupportTooLarge { size: 10, cap: 5 })
        ));
        // Translation by (1, 1).
        let d = wasserstein1(&a, &b).unwrap();
        assert!((d - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn csv_round_trip() {
        let mu = EmpiricalMeasure::new(2, vec![0.5, -1.0, 2.0, 3.25], vec![1.0, 3.0]).unwrap();
        let mut buf = Vec::new();
        mu.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("weight,x1,x2\n"));
        let back = EmpiricalMeasure::read_csv(&buf[..]).unwrap();
        assert_eq!(back, mu);
    }

    #[test]
    fn linear_field_matches_direct_sum() {
        let mu = EmpiricalMeasure::new(2, vec![0.0, 1.0, 2.0, -1.0, 0.5, 0.5], vec![1.0, 2.0, 3.0]).unwrap();
        let k = KernelSpec::linear(-0.7, 2).unwrap();
        let x = [0.3, 0.9];
        let direct = convolve(&k, &mu, &x).unwrap();
        let field = Field::new(mu.view());
        let mut fast = vec![0.0; 2];
        field.add_convolution(&k, &x, &mut fast);
        let mut pull = vec![0.0; 2];
        field.add_pull(&k, &x, &mut pull);
        for i in 0..2 {
            assert!((fast[i] - direct[i]).abs() < 1e-14);
            assert!((pull[i] + direct[i]).abs() < 1e-14);
        }
    }

    fn weighted_1d(max: usize) -> impl Strategy<Value = EmpiricalMeasure> {
        prop::collection::vec((-5.0f64..5.0, 0.01f64..1.0), 1..=max).prop_map(|atoms| {
            let (pts, ws): (Vec<f64>, Vec<f64>) = atoms.into_iter().unzip();
            EmpiricalMeasure::new(1, pts, ws).unwrap()
        })
    }

    fn weighted_2d(max: usize) -> impl Strategy<Value = EmpiricalMeasure> {
        prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0, 0.01f64..1.0), 1..=max).prop_map(|atoms| {
            let mut pts = Vec::new();
            let mut ws = Vec::new();
            for (x, y, w) in atoms {
                pts.push(x);
                pts.push(y);
                ws.push(w);
            }
            EmpiricalMeasure::new(2, pts, ws).unwrap()
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn sorted_w1_equals_lp_w1(a in weighted_1d(64), b in weighted_1d(64)) {
            let sorted = wasserstein1(&a, &b).unwrap();
            let lp = wasserstein_lp(&a, &b, 1.0).unwrap();
            prop_assert!((sorted - lp).abs() < 1e-9, "{} vs {}", sorted, lp);
        }

        #[test]
        fn w1_is_a_metric(a in weighted_2d(12), b in weighted_2d(12), c in weighted_2d(12)) {
            let ab = wasserstein1(&a, &b).unwrap();
            let ba = wasserstein1(&b, &a).unwrap();
            let ac = wasserstein1(&a, &c).unwrap();
            let cb = wasserstein1(&c, &b).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!(ab <= ac + cb + 1e-9);
            prop_assert!(wasserstein1(&a, &a).unwrap().abs() < 1e-12);
        }

        #[test]
        fn w1_bounded_by_wp(a in weighted_1d(20), b in weighted_1d(20), p in 1.01f64..6.0) {
            let w1 = wasserstein1(&a, &b).unwrap();
            let wp = wasserstein_p(&a, &b, MomentOrder::new(p).unwrap()).unwrap();
            prop_assert!(w1 <= wp + 1e-9);
        }

        #[test]
        fn w1_bounded_by_wp_2d(a in weighted_2d(8), b in weighted_2d(8)) {
            let w1 = wasserstein1(&a, &b).unwrap();
            let w2 = wasserstein_p(&a, &b, MomentOrder::new(2.0).unwrap()).unwrap();
            prop_assert!(w1 <= w2 + 1e-9);
        }

        #[test]
        fn moment_is_homogeneous(a in weighted_2d(16), c in -4.0f64..4.0, p in 1.1f64..5.0) {
            let p = MomentOrder::new(p).unwrap();
            let scaled = a.map(|x| x.iter().map(|v| c * v).collect()).unwrap();
            let lhs = moment(&scaled, p);
            let rhs = c.abs() * moment(&a, p);
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + rhs));
        }

        #[test]
        fn convolution_is_lipschitz(
            a in weighted_2d(10),
            x in prop::array::uniform2(-4.0f64..4.0),
            y in prop::array::uniform2(-4.0f64..4.0),
            amp in -3.0f64..3.0,
            s in 0.1f64..4.0,
        ) {
            for k in [
                KernelSpec::saturating(amp, 2).unwrap(),
                KernelSpec::tanh_radial(amp, s, 2).unwrap(),
                KernelSpec::linear(amp, 2).unwrap(),
            ] {
                let fx = convolve(&k, &a, &x).unwrap();
                let fy = convolve(&k, &a, &y).unwrap();
                let num = euclid(&fx, &fy);
                let den = euclid(&x, &y);
                prop_assert!(num <= k.lipschitz_constant() * den + 1e-9);
            }
        }
    }
}
