//! Globally Lipschitz interaction kernels.
//!
//! Every family provided here is radial, `K(y) = φ(|y|)·y`, and therefore odd
//! with `K(0) = 0`. Self-interaction terms drop out of particle sums and, when
//! controls vanish, pairwise herder forces cancel in the herder centroid.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, HerdError, Result};

const CERTIFICATION_PAIRS: usize = 10_000;
const CERTIFICATION_TOL: f64 = 1e-9;
const CERTIFICATION_SEED: u64 = 0x6b65_726e_656c;

/// Kernel family and parameters, as named in experiment configs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelFamily {
    /// `K(y) = a·y`
    Linear { a: f64 },
    /// `K(y) = a·y / (1 + |y|)`
    Saturating { a: f64 },
    /// `K(y) = (a/s)·tanh(s|y|)·y/|y|`, `K(0) = 0`
    TanhRadial { a: f64, s: f64 },
}

impl KernelFamily {
    pub const ZERO: KernelFamily = KernelFamily::Linear { a: 0.0 };

    fn amplitude(&self) -> f64 {
        match *self {
            KernelFamily::Linear { a }
            | KernelFamily::Saturating { a }
            | KernelFamily::TanhRadial { a, .. } => a,
        }
    }

    /// The scalar `φ(r)` with `K(y) = φ(|y|)·y`.
    #[inline]
    fn radial_factor(&self, r: f64) -> f64 {
        match *self {
            KernelFamily::Linear { a } => a,
            KernelFamily::Saturating { a } => a / (1.0 + r),
            KernelFamily::TanhRadial { a, s } => {
                let sr = s * r;
                if sr < 1e-8 {
                    a
                } else {
                    a * sr.tanh() / sr
                }
            }
        }
    }

    fn analytic_lipschitz(&self) -> f64 {
        // Linear: |a|. Saturating: Jacobian eigenvalues a/(1+r)^2 and a/(1+r).
        // Tanh radial: a·sech²(sr) radially and a·tanh(sr)/(sr) tangentially.
        self.amplitude().abs()
    }
}

/// A kernel family bound to a state dimension with a certified Lipschitz constant.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSpec {
    family: KernelFamily,
    dim: usize,
    lipschitz: f64,
}

impl KernelSpec {
    /// Builds the kernel and certifies its Lipschitz constant by sampling.
    pub fn new(family: KernelFamily, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(invalid("dim", "kernel dimension must be at least 1"));
        }
        let a = family.amplitude();
        if !a.is_finite() {
            return Err(invalid("a", "kernel amplitude must be finite"));
        }
        if let KernelFamily::TanhRadial { s, .. } = family {
            if !(s.is_finite() && s > 0.0) {
                return Err(invalid("s", "tanh_radial scale must be positive"));
            }
        }
        let spec = KernelSpec {
            family,
            dim,
            lipschitz: family.analytic_lipschitz(),
        };
        spec.certify()?;
        Ok(spec)
    }

    pub fn zero(dim: usize) -> Self {
        KernelSpec {
            family: KernelFamily::ZERO,
            dim,
            lipschitz: 0.0,
        }
    }

    pub fn linear(a: f64, dim: usize) -> Result<Self> {
        Self::new(KernelFamily::Linear { a }, dim)
    }

    pub fn saturating(a: f64, dim: usize) -> Result<Self> {
        Self::new(KernelFamily::Saturating { a }, dim)
    }

    pub fn tanh_radial(a: f64, s: f64, dim: usize) -> Result<Self> {
        Self::new(KernelFamily::TanhRadial { a, s }, dim)
    }

    pub fn family(&self) -> KernelFamily {
        self.family
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Certified global Lipschitz constant.
    pub fn lipschitz_constant(&self) -> f64 {
        self.lipschitz
    }

    pub fn is_zero(&self) -> bool {
        self.family.amplitude() == 0.0
    }

    /// `Some(a)` when the kernel is `y ↦ a·y`.
    pub fn linear_coefficient(&self) -> Option<f64> {
        match self.family {
            KernelFamily::Linear { a } => Some(a),
            _ => None,
        }
    }

    pub fn eval(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.dim {
            return Err(HerdError::DimensionMismatch {
                expected: self.dim,
                got: y.len(),
            });
        }
        let mut out = vec![0.0; self.dim];
        self.add_diff(y, &vec![0.0; self.dim], 1.0, &mut out);
        Ok(out)
    }

    /// `K(y)` for `d = 1`.
    #[inline]
    pub(crate) fn scalar(&self, y: f64) -> f64 {
        self.family.radial_factor(y.abs()) * y
    }

    /// `out += scale · K(a − b)` without allocating.
    #[inline]
    pub(crate) fn add_diff(&self, a: &[f64], b: &[f64], scale: f64, out: &mut [f64]) {
        let factor = match self.family {
            KernelFamily::Linear { a: coef } => coef,
            family => {
                let r2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
                family.radial_factor(r2.sqrt())
            }
        };
        let c = scale * factor;
        if c == 0.0 {
            return;
        }
        for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
            *o += c * (x - y);
        }
    }

    fn certify(&self) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(CERTIFICATION_SEED);
        let d = self.dim;
        let (mut y1, mut y2) = (vec![0.0; d], vec![0.0; d]);
        let (mut k1, mut k2) = (vec![0.0; d], vec![0.0; d]);
        let zero = vec![0.0; d];
        for _ in 0..CERTIFICATION_PAIRS {
            // Base points and separations spread over several decades.
            let base_scale = 10f64.powf(rng.random_range(-3.0..2.0));
            let gap_scale = 10f64.powf(rng.random_range(-6.0..1.0));
            for i in 0..d {
                y1[i] = base_scale * rng.random_range(-1.0..1.0);
                y2[i] = y1[i] + gap_scale * rng.random_range(-1.0..1.0);
            }
            k1.fill(0.0);
            k2.fill(0.0);
            self.add_diff(&y1, &zero, 1.0, &mut k1);
            self.add_diff(&y2, &zero, 1.0, &mut k2);
            let num = dist(&k1, &k2);
            let den = dist(&y1, &y2);
            // Allow for cancellation when two nearby points are far from the origin.
            let rounding = 8.0
                * f64::EPSILON
                * (norm(&k1) + norm(&k2) + self.lipschitz * (norm(&y1) + norm(&y2)));
            if den > 0.0 && num > (self.lipschitz + CERTIFICATION_TOL) * den + rounding {
                return Err(HerdError::Certification(format!(
                    "{:?}: difference quotient {:.6e} exceeds certificate {:.6e}",
                    self.family,
                    num / den,
                    self.lipschitz
                )));
            }
        }
        Ok(())
    }
}

fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// The four interaction kernels of the herding system with their common constant.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSet {
    /// Follower–follower interaction.
    h1: KernelSpec,
    /// Herder–herder interaction.
    h2: KernelSpec,
    /// Herder pull on followers, evaluated at `Y − X`.
    k1: KernelSpec,
    /// Follower feedback on herders, evaluated at `Y − X`.
    k2: KernelSpec,
    lipschitz: f64,
}

impl KernelSet {
    pub fn new(h1: KernelSpec, h2: KernelSpec, k1: KernelSpec, k2: KernelSpec) -> Result<Self> {
        let dim = h1.dim();
        for k in [&h2, &k1, &k2] {
            if k.dim() != dim {
                return Err(HerdError::DimensionMismatch {
                    expected: dim,
                    got: k.dim(),
                });
            }
        }
        let lipschitz = [&h1, &h2, &k1, &k2]
            .iter()
            .map(|k| k.lipschitz_constant())
            .fold(0.0, f64::max);
        Ok(KernelSet {
            h1,
            h2,
            k1,
            k2,
            lipschitz,
        })
    }

    pub fn zero(dim: usize) -> Self {
        let z = KernelSpec::zero(dim);
        KernelSet {
            h1: z.clone(),
            h2: z.clone(),
            k1: z.clone(),
            k2: z,
            lipschitz: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.h1.dim()
    }

    pub fn h1(&self) -> &KernelSpec {
        &self.h1
    }

    pub fn h2(&self) -> &KernelSpec {
        &self.h2
    }

    pub fn k1(&self) -> &KernelSpec {
        &self.k1
    }

    pub fn k2(&self) -> &KernelSpec {
        &self.k2
    }

    /// Largest of the four certified Lipschitz constants.
    pub fn lipschitz_constant(&self) -> f64 {
        self.lipschitz
    }
}
