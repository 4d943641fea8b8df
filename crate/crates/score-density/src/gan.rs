//! Equilibrium of density-regularized adversarial training.
//!
//! Adding `λ` times the density bound as a regularizer to the standard
//! two-player objective moves the generator's best response away from
//! the data density: the equilibrium generator reweights the data
//! density `p` to
//!
//! ```text
//! p_G(x) = p(x) (z p(x)^λ − 1)₊,
//! ```
//!
//! with `z ≥ 1` chosen so `p_G` integrates to one, and the optimal
//! discriminator is `D = p / (p + p_G)`, which equals `1 / (z p^λ)` on
//! the generator's support and `1` off it. High-density regions are
//! amplified (the ratio `p_G / p` grows with `p`), low-density regions
//! are truncated entirely.
//!
//! At `λ = 0` the construction collapses to the classical result:
//! `z = 2`, `p_G = p`, and `D ≡ 1/2`.
//!
//! [`verify_nash`] checks the equilibrium signature: on the support of
//! `p_G` the discriminator logit plus `λ` times the (population) bound
//! value is the constant `ln z + λ C`; off the support the same
//! expression exceeds it. Perturbing `z` breaks normalization, and
//! renormalizing the perturbed generator breaks the constancy, so the
//! solved pair is pinned from both sides.
//!
//! Everything here is one-dimensional; quadrature over a fixed grid is
//! accurate to far below the verification tolerances.

use serde::Serialize;

use crate::density::discrete_constant;
use crate::error::{Error, Result};
use crate::schedule::Schedule;
use crate::target::GaussianMixture;

/// Default number of quadrature nodes (odd, for Simpson's rule).
pub const DEFAULT_GAN_NODES: usize = 4001;

/// How many times the bracketing step may double `z` before giving up.
const MAX_DOUBLINGS: u32 = 200;

/// Solved equilibrium of the regularized game.
#[derive(Debug, Clone, Serialize)]
pub struct EquilibriumSolution {
    pub lambda: f64,
    /// Normalizer of the reweighting; `z = 2` exactly when `λ = 0`.
    pub z: f64,
    /// Extra scaling on `p_G`, `1` at equilibrium. Renormalized
    /// perturbations (see [`EquilibriumSolution::perturbed`]) set it to
    /// keep unit mass while `z` is wrong.
    pub scale: f64,
    /// Quadrature mass of `p_G` (how close the solution is to a
    /// probability density).
    pub mass: f64,
    model: GaussianMixture,
    grid_lo: f64,
    grid_hi: f64,
    n_nodes: usize,
}

impl EquilibriumSolution {
    /// Data density `p(x)`.
    pub fn density(&self, x: f64) -> f64 {
        self.model
            .log_density0(&[x])
            .expect("stored model is one-dimensional")
            .exp()
    }

    /// Amplification ratio `p_G / p` as a function of the density
    /// value: `scale · (z p^λ − 1)₊`, nondecreasing in `p`.
    pub fn amplification(&self, p: f64) -> f64 {
        self.scale * (self.z * p.powf(self.lambda) - 1.0).max(0.0)
    }

    /// Generator density `p_G(x)`.
    pub fn generator_density(&self, x: f64) -> f64 {
        let p = self.density(x);
        p * self.amplification(p)
    }

    /// Optimal discriminator `p / (p + p_G)`; equals `1` where the
    /// generator places no mass.
    pub fn discriminator(&self, x: f64) -> f64 {
        let p = self.density(x);
        p / (p + p * self.amplification(p))
    }

    /// Whether the generator places mass at `x`.
    pub fn on_support(&self, x: f64) -> bool {
        self.amplification(self.density(x)) > 0.0
    }

    /// Equilibrium slack `−ln(z p(x)^λ)`: zero exactly at the support
    /// boundary, negative inside the support, positive outside (where
    /// the truncated generator gains nothing by adding mass).
    pub fn slack(&self, x: f64) -> f64 {
        -(self.z * self.density(x).powf(self.lambda)).ln()
    }

    /// A deliberately broken copy: `z` scaled by `factor`, and, when
    /// `renormalize` is set, `p_G` rescaled back to unit mass. The raw
    /// version fails the mass invariant; the renormalized version keeps
    /// it but loses the constancy of the equilibrium condition.
    pub fn perturbed(&self, factor: f64, renormalize: bool) -> Result<Self> {
        if !(factor > 0.0) || !factor.is_finite() {
            return Err(Error::Range {
                name: "factor",
                value: factor,
                expected: "finite and positive",
            });
        }
        let z = self.z * factor;
        let raw_mass = generator_mass(
            &self.model,
            self.lambda,
            z,
            self.grid_lo,
            self.grid_hi,
            self.n_nodes,
        )?;
        let scale = if renormalize { 1.0 / raw_mass } else { 1.0 };
        Ok(Self {
            z,
            scale,
            mass: scale * raw_mass,
            ..self.clone()
        })
    }
}

/// Quadrature for `∫ p (z p^λ − 1)₊ dx` over the fixed grid.
///
/// The integrand is smooth except for kinks where `z p^λ` crosses 1.
/// A uniform scan brackets each crossing (the scan resolution bounds
/// how narrow a support island can be and still be seen), bisection
/// pins it to machine precision, and Simpson's rule runs on each
/// smooth positive segment, so refinement in `n` converges at the
/// smooth-integrand rate instead of stalling on the kinks.
fn generator_mass(
    m: &GaussianMixture,
    lambda: f64,
    z: f64,
    lo: f64,
    hi: f64,
    n: usize,
) -> Result<f64> {
    let excess = |x: f64| -> Result<f64> {
        Ok(z * m.log_density0(&[x])?.exp().powf(lambda) - 1.0)
    };
    let h = (hi - lo) / (n - 1) as f64;
    let mut cuts = vec![lo];
    let mut prev = excess(lo)?;
    for i in 1..n {
        let x = lo + h * i as f64;
        let cur = excess(x)?;
        if (prev > 0.0) != (cur > 0.0) {
            let (mut a, mut b) = (x - h, x);
            for _ in 0..80 {
                let mid = 0.5 * (a + b);
                if (excess(mid)? > 0.0) == (prev > 0.0) {
                    a = mid;
                } else {
                    b = mid;
                }
            }
            cuts.push(0.5 * (a + b));
        }
        prev = cur;
    }
    cuts.push(hi);
    let mut acc = 0.0;
    for seg in cuts.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        if b - a < f64::EPSILON * (hi - lo) || excess(0.5 * (a + b))? <= 0.0 {
            continue;
        }
        // Odd node count proportional to the segment's share of the grid.
        let mut n_seg = ((b - a) / (hi - lo) * n as f64).ceil() as usize;
        n_seg = n_seg.max(33) | 1;
        let hs = (b - a) / (n_seg - 1) as f64;
        let mut seg_acc = 0.0;
        for i in 0..n_seg {
            let x = a + hs * i as f64;
            let p = m.log_density0(&[x])?.exp();
            let f = p * (z * p.powf(lambda) - 1.0).max(0.0);
            let w = if i == 0 || i == n_seg - 1 {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            seg_acc += w * f;
        }
        acc += seg_acc * hs / 3.0;
    }
    Ok(acc)
}

/// Solves for the normalizer `z` of the equilibrium generator by
/// bisection on its quadrature mass, which is nondecreasing in `z`.
///
/// The quadrature grid spans every component mean plus ten standard
/// deviations on each side; `n_nodes` must be odd and at least 3
/// ([`DEFAULT_GAN_NODES`] is a good default).
pub fn solve_equilibrium(
    m: &GaussianMixture,
    lambda: f64,
    n_nodes: usize,
) -> Result<EquilibriumSolution> {
    if m.dim() != 1 {
        return Err(Error::parameter(format!(
            "the equilibrium construction is one-dimensional, model has dim {}",
            m.dim()
        )));
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::Range {
            name: "lambda",
            value: lambda,
            expected: "finite and >= 0",
        });
    }
    if n_nodes < 3 || n_nodes % 2 == 0 {
        return Err(Error::parameter(format!(
            "Simpson quadrature needs an odd node count >= 3, got {n_nodes}"
        )));
    }
    let (grid_lo, grid_hi) = support_bounds(m);
    let mass = |z: f64| generator_mass(m, lambda, z, grid_lo, grid_hi, n_nodes);
    // The mass is 0 at z = 0 and unbounded in z, so a root exists; it
    // sits at z >= 1 unless the data density is so peaked that even the
    // untranslated reweighting carries unit mass.
    let mut lo = if mass(1.0)? >= 1.0 { 0.0 } else { 1.0 };
    let mut hi = 2.0;
    let mut doublings = 0;
    while mass(hi)? < 1.0 {
        hi *= 2.0;
        doublings += 1;
        if doublings > MAX_DOUBLINGS {
            return Err(Error::Convergence(format!(
                "generator normalizer not bracketed below z = {hi:e}"
            )));
        }
    }
    while hi - lo > 1e-13 * hi.max(1.0) {
        let mid = 0.5 * (lo + hi);
        if mass(mid)? < 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let z = 0.5 * (lo + hi);
    Ok(EquilibriumSolution {
        lambda,
        z,
        scale: 1.0,
        mass: mass(z)?,
        model: m.clone(),
        grid_lo,
        grid_hi,
        n_nodes,
    })
}

/// Quadrature bounds: component means widened by ten standard
/// deviations of the widest component.
fn support_bounds(m: &GaussianMixture) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut sigma_max: f64 = 0.0;
    for c in m.components() {
        lo = lo.min(c.mean[0]);
        hi = hi.max(c.mean[0]);
        sigma_max = sigma_max.max(c.var.sqrt());
    }
    (lo - 10.0 * sigma_max, hi + 10.0 * sigma_max)
}

/// One evaluated point of the equilibrium condition.
#[derive(Debug, Clone, Serialize)]
pub struct NashPoint {
    pub x: f64,
    /// `−ln D(x) + λ (C − (−log q_0(x)))`-style objective entry: the
    /// discriminator logit plus `λ` times the population bound value
    /// `C − log q_0(x)`.
    pub value: f64,
}

/// Result of checking the equilibrium condition on the support.
#[derive(Debug, Clone, Serialize)]
pub struct NashCheck {
    /// The constant the condition must equal: `ln(z) + λ C`.
    pub expected: f64,
    pub points: Vec<NashPoint>,
    /// Largest `|value − expected|` over the evaluated points.
    pub max_abs_deviation: f64,
    /// Spread `max − min` of the values (constancy on its own).
    pub range: f64,
    /// `|mass − 1|` of the solution's generator density.
    pub mass_deviation: f64,
}

/// Verifies the equilibrium condition
/// `−ln D(x) + λ (C − log q_0(x)) = ln z + λ C` at the supplied
/// support points (off-support points are skipped; at least one point
/// must remain). `C` is the bound constant for the schedule's first
/// rate, so the values are the entries a density-regularized
/// discriminator objective actually sees.
pub fn verify_nash(
    sol: &EquilibriumSolution,
    schedule: &Schedule,
    points: &[f64],
) -> Result<NashCheck> {
    let constant = discrete_constant(1, schedule.beta(1));
    let mut out = Vec::new();
    for &x in points {
        if !sol.on_support(x) {
            continue;
        }
        let d = sol.discriminator(x);
        let value = -d.ln() + sol.lambda * (constant - sol.model.log_density0(&[x])?);
        out.push(NashPoint { x, value });
    }
    if out.is_empty() {
        return Err(Error::parameter(
            "no supplied point lies in the generator support",
        ));
    }
    let expected = sol.z.ln() + sol.lambda * constant;
    let max_abs_deviation = out
        .iter()
        .map(|p| (p.value - expected).abs())
        .fold(0.0, f64::max);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in &out {
        lo = lo.min(p.value);
        hi = hi.max(p.value);
    }
    Ok(NashCheck {
        expected,
        points: out,
        max_abs_deviation,
        range: hi - lo,
        mass_deviation: (sol.mass - 1.0).abs(),
    })
}
