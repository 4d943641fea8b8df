//! Gaussian mixture targets and their noised marginals.
//!
//! The data distribution is an isotropic Gaussian mixture
//! `q_0 = Σ_k w_k N(μ_k, σ_k² I)` in `d` dimensions. Under the forward
//! noising `X_t = √(1−t) X_0 + √t Z` every time slice stays a mixture
//! of the same form,
//!
//! ```text
//! ρ_t = Σ_k w_k N(√(1−t) μ_k, ((1−t) σ_k² + t) I),
//! ```
//!
//! so the log-density, score, Hessian trace, and the posterior of `X_0`
//! given `X_t = x` all have closed forms. Those exact quantities are
//! what the rest of the crate differentiates, integrates, and compares
//! Monte Carlo output against.
//!
//! [`Marginal`] freezes one time slice and exposes the per-point
//! evaluations; build it once per time step and reuse it across sample
//! points, since construction does the per-component bookkeeping.
//! Evaluation methods are allocation-free where it matters (two passes
//! over the components instead of materializing responsibilities).

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// `ln 2π`, the ubiquitous Gaussian normalization constant.
pub(crate) const LN_2PI: f64 = 1.8378770664093453;

/// Tolerance on `Σ w_k − 1` (and prior sums) at validation time.
const WEIGHT_SUM_TOL: f64 = 1e-12;

/// One isotropic component `w · N(mean, var · I)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Component {
    #[serde(rename = "w")]
    pub weight: f64,
    pub mean: Vec<f64>,
    pub var: f64,
}

/// An isotropic Gaussian mixture in `d` dimensions.
///
/// ```
/// use score_density::target::GaussianMixture;
///
/// let m = GaussianMixture::standard_normal(2);
/// // At the origin the standard normal density is (2π)^{-1}.
/// let lp = m.log_density0(&[0.0, 0.0]).unwrap();
/// assert!((lp + (2.0 * std::f64::consts::PI).ln()).abs() < 1e-15);
/// ```
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "MixtureSpec", into = "MixtureSpec")]
pub struct GaussianMixture {
    dim: usize,
    components: Vec<Component>,
}

impl GaussianMixture {
    /// Validates and builds a mixture: positive weights summing to one,
    /// positive variances, means of length `d`.
    pub fn new(dim: usize, components: Vec<Component>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::parameter("dimension must be at least 1"));
        }
        if components.is_empty() {
            return Err(Error::parameter("mixture needs at least one component"));
        }
        let mut weight_sum = 0.0;
        for (k, c) in components.iter().enumerate() {
            if !(c.weight > 0.0 && c.weight.is_finite()) {
                return Err(Error::parameter(format!(
                    "component {k} weight {} must be positive",
                    c.weight
                )));
            }
            if !(c.var > 0.0 && c.var.is_finite()) {
                return Err(Error::parameter(format!(
                    "component {k} variance {} must be positive",
                    c.var
                )));
            }
            if c.mean.len() != dim {
                return Err(Error::Dimension {
                    expected: dim,
                    got: c.mean.len(),
                });
            }
            if c.mean.iter().any(|v| !v.is_finite()) {
                return Err(Error::parameter(format!("component {k} mean not finite")));
            }
            weight_sum += c.weight;
        }
        if (weight_sum - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::parameter(format!(
                "component weights sum to {weight_sum}, expected 1"
            )));
        }
        Ok(GaussianMixture { dim, components })
    }

    /// `N(0, I)` in `d` dimensions, the stationary law of the noising
    /// process: every marginal of it equals itself.
    pub fn standard_normal(dim: usize) -> Self {
        GaussianMixture {
            dim,
            components: vec![Component {
                weight: 1.0,
                mean: vec![0.0; dim],
                var: 1.0,
            }],
        }
    }

    /// Convenience constructor for 1D mixtures from `(w, mean, var)` triples.
    pub fn mixture_1d(parts: &[(f64, f64, f64)]) -> Result<Self> {
        let components = parts
            .iter()
            .map(|&(w, mean, var)| Component {
                weight: w,
                mean: vec![mean],
                var,
            })
            .collect();
        GaussianMixture::new(1, components)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    /// The time-`t` marginal, valid for `0 < t < 1`.
    pub fn marginal(&self, t: f64) -> Result<Marginal> {
        if !(t > 0.0 && t < 1.0) {
            return Err(Error::Range {
                name: "t",
                value: t,
                expected: "0 < t < 1",
            });
        }
        Ok(Marginal::build(self, t))
    }

    /// The target itself viewed as a time slice (`t = 0`); used where a
    /// uniform interface over `[0, 1)` is convenient, e.g. when starting
    /// the probability-flow integration.
    pub fn at_zero(&self) -> Marginal {
        Marginal::build(self, 0.0)
    }

    /// `log q_0(x)` in closed form.
    pub fn log_density0(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        Ok(self.at_zero().log_density(x))
    }

    /// `log ρ_t(x)` in closed form; prefer [`GaussianMixture::marginal`]
    /// plus [`Marginal::log_density`] when evaluating many points at one `t`.
    pub fn log_density_t(&self, t: f64, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        Ok(self.marginal(t)?.log_density(x))
    }

    /// `∇ log ρ_t(x)` in closed form.
    pub fn score_t(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        Ok(self.marginal(t)?.score(x))
    }

    /// `tr ∇² log ρ_t(x)` in closed form.
    pub fn hessian_trace_t(&self, t: f64, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        Ok(self.marginal(t)?.hessian_trace(x))
    }

    /// `n` independent draws from `q_0`, reproducible from `seed`.
    pub fn sample0(&self, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        (0..n).map(|_| self.draw0(&mut rng)).collect()
    }

    /// One draw from `q_0` using the caller's generator.
    pub(crate) fn draw0(&self, rng: &mut ChaCha12Rng) -> Vec<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = self.components.len() - 1;
        for (k, c) in self.components.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                pick = k;
                break;
            }
        }
        let c = &self.components[pick];
        let sd = c.var.sqrt();
        c.mean
            .iter()
            .map(|&m| m + sd * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    pub(crate) fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                got: x.len(),
            });
        }
        Ok(())
    }
}

/// Serialized mixture form: `{d, components: [{w, mean, var}, ...]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct MixtureSpec {
    d: usize,
    components: Vec<Component>,
}

impl TryFrom<MixtureSpec> for GaussianMixture {
    type Error = Error;

    fn try_from(spec: MixtureSpec) -> Result<GaussianMixture> {
        GaussianMixture::new(spec.d, spec.components)
    }
}

impl From<GaussianMixture> for MixtureSpec {
    fn from(m: GaussianMixture) -> MixtureSpec {
        MixtureSpec {
            d: m.dim,
            components: m.components,
        }
    }
}

/// One frozen time slice `ρ_t` of a mixture, with closed-form
/// evaluations and the `X_0 | X_t = x` posterior.
///
/// Per component the slice keeps the noised mean `m_k = √(1−t) μ_k`,
/// the noised variance `v_k = (1−t) σ_k² + t`, and the log of the
/// normalized weight, so a density evaluation is two short passes over
/// the components.
#[derive(Debug, Clone)]
pub struct Marginal {
    t: f64,
    dim: usize,
    /// Noised component means `√(1−t) μ_k`.
    means: Vec<Vec<f64>>,
    /// Noised component variances `(1−t) σ_k² + t`.
    vars: Vec<f64>,
    /// `ln w_k − (d/2) ln(2π v_k)`: the constant part of each logit.
    log_norms: Vec<f64>,
    /// Original component means and variances, for the posterior.
    base_means: Vec<Vec<f64>>,
    base_vars: Vec<f64>,
}

impl Marginal {
    fn build(m: &GaussianMixture, t: f64) -> Marginal {
        let shrink = (1.0 - t).sqrt();
        let k = m.components.len();
        let mut means = Vec::with_capacity(k);
        let mut vars = Vec::with_capacity(k);
        let mut log_norms = Vec::with_capacity(k);
        let mut base_means = Vec::with_capacity(k);
        let mut base_vars = Vec::with_capacity(k);
        for c in &m.components {
            let v = (1.0 - t) * c.var + t;
            means.push(c.mean.iter().map(|&mu| shrink * mu).collect());
            vars.push(v);
            log_norms.push(c.weight.ln() - 0.5 * m.dim as f64 * (LN_2PI + v.ln()));
            base_means.push(c.mean.clone());
            base_vars.push(c.var);
        }
        Marginal {
            t,
            dim: m.dim,
            means,
            vars,
            log_norms,
            base_means,
            base_vars,
        }
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn logit(&self, k: usize, x: &[f64]) -> f64 {
        let mut sq = 0.0;
        for (xi, mi) in x.iter().zip(&self.means[k]) {
            let dlt = xi - mi;
            sq += dlt * dlt;
        }
        self.log_norms[k] - 0.5 * sq / self.vars[k]
    }

    fn max_logit(&self, x: &[f64]) -> f64 {
        let mut best = f64::NEG_INFINITY;
        for k in 0..self.vars.len() {
            best = best.max(self.logit(k, x));
        }
        best
    }

    /// `log ρ_t(x)` by log-sum-exp over component logits.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.dim);
        let top = self.max_logit(x);
        let mut sum = 0.0;
        for k in 0..self.vars.len() {
            sum += (self.logit(k, x) - top).exp();
        }
        top + sum.ln()
    }

    /// `∇ log ρ_t(x) = Σ_k r_k(x) (m_k − x) / v_k` written into `out`.
    pub fn score_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.dim);
        debug_assert_eq!(out.len(), self.dim);
        let top = self.max_logit(x);
        out.fill(0.0);
        let mut denom = 0.0;
        for k in 0..self.vars.len() {
            let e = (self.logit(k, x) - top).exp();
            denom += e;
            let scale = e / self.vars[k];
            for (o, (xi, mi)) in out.iter_mut().zip(x.iter().zip(&self.means[k])) {
                *o += scale * (mi - xi);
            }
        }
        for o in out.iter_mut() {
            *o /= denom;
        }
    }

    /// Allocating form of [`Marginal::score_into`].
    pub fn score(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.score_into(x, &mut out);
        out
    }

    /// `tr ∇² log ρ_t(x) = Σ_k r_k (‖x−m_k‖²/v_k² − d/v_k) − ‖∇ log ρ_t(x)‖²`.
    pub fn hessian_trace(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.dim);
        let top = self.max_logit(x);
        let d = self.dim as f64;
        let mut denom = 0.0;
        let mut quad = 0.0;
        let mut grad = vec![0.0; self.dim];
        for k in 0..self.vars.len() {
            let v = self.vars[k];
            let mut sq = 0.0;
            for (xi, mi) in x.iter().zip(&self.means[k]) {
                let dlt = xi - mi;
                sq += dlt * dlt;
            }
            let e = (self.log_norms[k] - 0.5 * sq / v - top).exp();
            denom += e;
            quad += e * (sq / (v * v) - d / v);
            let scale = e / v;
            for (g, (xi, mi)) in grad.iter_mut().zip(x.iter().zip(&self.means[k])) {
                *g += scale * (mi - xi);
            }
        }
        let mut grad_sq = 0.0;
        for g in &grad {
            let gi = g / denom;
            grad_sq += gi * gi;
        }
        quad / denom - grad_sq
    }

    /// The optimal noise prediction `ε*_t(x) = −√t ∇ log ρ_t(x)`,
    /// written into `out`.
    pub fn epsilon_star_into(&self, x: &[f64], out: &mut [f64]) {
        self.score_into(x, out);
        let root_t = self.t.sqrt();
        for o in out.iter_mut() {
            *o *= -root_t;
        }
    }

    /// Posterior component weights `P(component = k | X_t = x)`; these
    /// coincide with the responsibilities of the noised mixture.
    pub fn responsibilities(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.dim);
        let top = self.max_logit(x);
        let mut r: Vec<f64> = (0..self.vars.len())
            .map(|k| (self.logit(k, x) - top).exp())
            .collect();
        let denom: f64 = r.iter().sum();
        for v in r.iter_mut() {
            *v /= denom;
        }
        r
    }

    /// `E[X_0 | X_t = x]`: mixture of per-component posterior means
    /// `(t μ_k + √(1−t) σ_k² x) / v_k` under the responsibilities.
    pub fn posterior_mean_x0(&self, x: &[f64]) -> Vec<f64> {
        let r = self.responsibilities(x);
        let shrink = (1.0 - self.t).sqrt();
        let mut out = vec![0.0; self.dim];
        for k in 0..self.vars.len() {
            let v = self.vars[k];
            for (o, (xi, mui)) in out.iter_mut().zip(x.iter().zip(&self.base_means[k])) {
                let m0 = (self.t * mui + shrink * self.base_vars[k] * xi) / v;
                *o += r[k] * m0;
            }
        }
        out
    }

    /// `E[‖x − √(1−t) X_0‖² | X_t = x]`: per component, the posterior of
    /// `X_0` is `N(m0_k, τ_k² I)` with `τ_k² = σ_k² t / v_k`, so the
    /// conditional second moment is `‖x − √(1−t) m0_k‖² + (1−t) τ_k² d`.
    pub fn posterior_second_moment(&self, x: &[f64]) -> f64 {
        let r = self.responsibilities(x);
        let shrink = (1.0 - self.t).sqrt();
        let d = self.dim as f64;
        let mut total = 0.0;
        for k in 0..self.vars.len() {
            let v = self.vars[k];
            let tau_sq = self.base_vars[k] * self.t / v;
            let mut sq = 0.0;
            for (xi, mui) in x.iter().zip(&self.base_means[k]) {
                let m0 = (self.t * mui + shrink * self.base_vars[k] * xi) / v;
                let dlt = xi - shrink * m0;
                sq += dlt * dlt;
            }
            total += r[k] * (sq + (1.0 - self.t) * tau_sq * d);
        }
        total
    }
}

/// A finite family of labeled mixtures with class priors, the input to
/// the diffusion classifier and the conditional loss.
///
/// Labels are kept in sorted order so every iteration over classes is
/// deterministic.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "FamilySpec", into = "FamilySpec")]
pub struct LabeledFamily {
    dim: usize,
    labels: Vec<String>,
    models: Vec<GaussianMixture>,
    priors: Vec<f64>,
}

impl LabeledFamily {
    /// Builds a family from `(label, model, prior)` entries. Priors must
    /// be given for all classes or for none (`None` means uniform).
    pub fn new(entries: Vec<(String, GaussianMixture, Option<f64>)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::parameter("family needs at least one class"));
        }
        let mut sorted = entries;
        sorted.sort_by(|a, b| a.0.cmp(&b.0));
        for pair in sorted.windows(2) {
            if pair[0].0 == pair[1].0 {
                return Err(Error::parameter(format!(
                    "duplicate class label {:?}",
                    pair[0].0
                )));
            }
        }
        let dim = sorted[0].1.dim();
        for (label, model, _) in &sorted {
            if model.dim() != dim {
                return Err(Error::parameter(format!(
                    "class {label:?} has dimension {} but the family is {dim}-dimensional",
                    model.dim()
                )));
            }
        }
        let n_given = sorted.iter().filter(|(_, _, p)| p.is_some()).count();
        let priors: Vec<f64> = if n_given == 0 {
            vec![1.0 / sorted.len() as f64; sorted.len()]
        } else if n_given == sorted.len() {
            let p: Vec<f64> = sorted.iter().map(|(_, _, p)| p.unwrap()).collect();
            if p.iter().any(|&v| !(v > 0.0)) {
                return Err(Error::parameter("class priors must be positive"));
            }
            let sum: f64 = p.iter().sum();
            if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
                return Err(Error::parameter(format!(
                    "class priors sum to {sum}, expected 1"
                )));
            }
            p
        } else {
            return Err(Error::parameter(
                "give priors for every class or for none",
            ));
        };
        let mut labels = Vec::with_capacity(sorted.len());
        let mut models = Vec::with_capacity(sorted.len());
        for (label, model, _) in sorted {
            labels.push(label);
            models.push(model);
        }
        Ok(LabeledFamily {
            dim,
            labels,
            models,
            priors,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Labels in sorted order.
    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn priors(&self) -> &[f64] {
        &self.priors
    }

    /// Whether all class priors are equal.
    pub fn is_uniform_prior(&self) -> bool {
        let p0 = self.priors[0];
        self.priors.iter().all(|&p| (p - p0).abs() <= WEIGHT_SUM_TOL)
    }

    /// The model for `label`, if present.
    pub fn class(&self, label: &str) -> Option<&GaussianMixture> {
        self.labels
            .iter()
            .position(|l| l == label)
            .map(|i| &self.models[i])
    }

    /// Iterates `(label, model, prior)` in sorted label order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &GaussianMixture, f64)> {
        self.labels
            .iter()
            .zip(&self.models)
            .zip(&self.priors)
            .map(|((l, m), &p)| (l.as_str(), m, p))
    }
}

/// Serialized family form: `{classes: {label: {model, prior?}}}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct FamilySpec {
    classes: BTreeMap<String, ClassSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ClassSpec {
    model: GaussianMixture,
    #[serde(skip_serializing_if = "Option::is_none")]
    prior: Option<f64>,
}

impl TryFrom<FamilySpec> for LabeledFamily {
    type Error = Error;

    fn try_from(spec: FamilySpec) -> Result<LabeledFamily> {
        LabeledFamily::new(
            spec.classes
                .into_iter()
                .map(|(label, c)| (label, c.model, c.prior))
                .collect(),
        )
    }
}

impl From<LabeledFamily> for FamilySpec {
    fn from(f: LabeledFamily) -> FamilySpec {
        let uniform = f.is_uniform_prior();
        FamilySpec {
            classes: f
                .labels
                .into_iter()
                .zip(f.models)
                .zip(f.priors)
                .map(|((label, model), prior)| {
                    (
                        label,
                        ClassSpec {
                            model,
                            prior: if uniform { None } else { Some(prior) },
                        },
                    )
                })
                .collect(),
        }
    }
}


#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    fn arb_mixture() -> impl Strategy<Value = GaussianMixture> {
        (1usize..=3, 1usize..=3).prop_flat_map(|(dim, k)| {
            (
                proptest::collection::vec(0.1f64..1.0, k),
                proptest::collection::vec(
                    proptest::collection::vec(-3.0f64..3.0, dim),
                    k,
                ),
                proptest::collection::vec(0.2f64..2.0, k),
            )
                .prop_map(move |(raw_w, means, vars)| {
                    let sum: f64 = raw_w.iter().sum();
                    let components = raw_w
                        .into_iter()
                        .zip(means)
                        .zip(vars)
                        .map(|((w, mean), var)| Component {
                            weight: w / sum,
                            mean,
                            var,
                        })
                        .collect();
                    GaussianMixture::new(dim, components).unwrap()
                })
        })
    }

    proptest! {
        /// Tweedie's identity holds pointwise for every mixture.
        #[test]
        fn tweedie_identity_everywhere(
            m in arb_mixture(),
            t in 0.01f64..0.99,
            seed in 0u64..1000,
        ) {
            let slice = m.marginal(t).unwrap();
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let x: Vec<f64> = (0..m.dim()).map(|_| 4.0 * (rng.random::<f64>() - 0.5)).collect();
            let s = slice.score(&x);
            let pm = slice.posterior_mean_x0(&x);
            let shrink = (1.0 - t).sqrt();
            for j in 0..m.dim() {
                let rhs = -(x[j] - shrink * pm[j]) / t;
                let scale = s[j].abs().max(1.0);
                prop_assert!((s[j] - rhs).abs() <= 1e-10 * scale);
            }
        }

        /// The posterior second moment is positive and the
        /// responsibilities form a distribution.
        #[test]
        fn posterior_quantities_are_well_formed(
            m in arb_mixture(),
            t in 0.01f64..0.99,
        ) {
            let slice = m.marginal(t).unwrap();
            let x = vec![0.3; m.dim()];
            let r = slice.responsibilities(&x);
            let sum: f64 = r.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
            prop_assert!(r.iter().all(|&v| v >= 0.0));
            prop_assert!(slice.posterior_second_moment(&x) >= 0.0);
        }
    }
}
