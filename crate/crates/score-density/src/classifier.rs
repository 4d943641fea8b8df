//! Generative classification through per-class density evaluation.
//!
//! For a labeled family of mixtures the identity turns class scoring
//! into noise-prediction comparisons: up to one constant shared by all
//! classes,
//!
//! ```text
//! log q_0(x | k) ≈ const − Σ_t w_t E_ε ‖ε − ε̂_k(√ᾱ_t x + √(1−ᾱ_t) ε)‖²,
//! ```
//!
//! so the posterior over labels is a softmax of the negated weighted
//! comparison sums plus log priors. The shared constant cancels in the
//! softmax and is never computed here.
//!
//! Every step evaluates all classes on one shared set of noise draws
//! (common random numbers), which removes most of the Monte Carlo
//! variance from score *differences*; with antithetic pairing, classes
//! that are exact mirror images of each other score bit-identically at
//! a symmetry point.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::mc::{gaussian_expectation_batch, McConfig};
use crate::schedule::Schedule;
use crate::target::LabeledFamily;

/// One class's negated weighted comparison sum.
#[derive(Debug, Clone, Serialize)]
pub struct ClassScore {
    pub label: String,
    /// `−Σ_t w_t Ê_t`; equals `log q_0(x | k)` up to a class-independent
    /// constant and discretization bias.
    pub score: f64,
    pub std_error: f64,
}

/// Full classification of one point, with the exact Bayes reference.
#[derive(Debug, Clone, Serialize)]
pub struct ClassifierReport {
    pub x: Vec<f64>,
    /// Per-class scores in the family's (sorted) label order.
    pub scores: Vec<ClassScore>,
    /// Softmax of score plus log prior, aligned with `scores`.
    pub posterior: Vec<f64>,
    /// Exact posterior from the closed-form class densities.
    pub bayes_posterior: Vec<f64>,
    /// Total variation distance between the two posteriors.
    pub tv_distance: f64,
    /// Whether the family's priors are uniform (they always enter the
    /// posterior either way).
    pub uniform_prior: bool,
}

/// Evaluates every class's score at `x` with shared draws per step.
///
/// Step `t` draws on substream `cfg.stream_id + t`, one batch across
/// all classes, so the draws match those of the per-class density
/// evaluations with the same configuration.
pub fn class_scores(
    family: &LabeledFamily,
    schedule: &Schedule,
    x: &[f64],
    cfg: &McConfig,
) -> Result<Vec<ClassScore>> {
    cfg.validate()?;
    if x.len() != family.dim() {
        return Err(Error::Dimension {
            expected: family.dim(),
            got: x.len(),
        });
    }
    let n_classes = family.len();
    let dim = family.dim();
    // terms[t-1][k] = estimate of E ||eps - eps_hat_k||^2 at step t.
    let terms: Vec<Vec<crate::mc::McEstimate>> = (1..=schedule.num_steps())
        .into_par_iter()
        .map(|t| -> Result<Vec<crate::mc::McEstimate>> {
            let time = schedule.t_grid(t);
            let abar = schedule.alpha_bar(t);
            let (root_ab, root_1mab) = (abar.sqrt(), (1.0 - abar).sqrt());
            let slices = family
                .iter()
                .map(|(_, m, _)| m.marginal(time))
                .collect::<Result<Vec<_>>>()?;
            let fs: Vec<Box<dyn Fn(&[f64]) -> f64>> = slices
                .iter()
                .map(|slice| {
                    Box::new(move |eps: &[f64]| {
                        let mut y = vec![0.0; dim];
                        let mut hat = vec![0.0; dim];
                        for j in 0..dim {
                            y[j] = root_ab * x[j] + root_1mab * eps[j];
                        }
                        slice.epsilon_star_into(&y, &mut hat);
                        let mut sq = 0.0;
                        for j in 0..dim {
                            let r = eps[j] - hat[j];
                            sq += r * r;
                        }
                        sq
                    }) as Box<dyn Fn(&[f64]) -> f64>
                })
                .collect();
            let refs: Vec<&dyn Fn(&[f64]) -> f64> =
                fs.iter().map(|f| f.as_ref()).collect();
            gaussian_expectation_batch(&refs, dim, &cfg.with_stream(cfg.stream_id + t as u64))
        })
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(n_classes);
    for (k, (label, _, _)) in family.iter().enumerate() {
        let mut score = 0.0;
        let mut var = 0.0;
        for (t, row) in terms.iter().enumerate() {
            let w = schedule.elbo_coefficient(t + 1);
            score -= w * row[k].mean;
            var += (w * row[k].std_error).powi(2);
        }
        out.push(ClassScore {
            label: label.to_string(),
            score,
            std_error: var.sqrt(),
        });
    }
    Ok(out)
}

/// Numerically safe softmax (shift by the maximum logit).
fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Posterior probabilities from raw class scores and log priors: the
/// exact map [`classify`] applies to its scores, exposed so the shared
/// offset behavior can be audited. Adding one constant to every score
/// leaves the output unchanged (up to the shift the softmax applies
/// anyway), which is what makes the unknown per-schedule constant in
/// the scores harmless.
pub fn posterior_from_scores(scores: &[f64], log_priors: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::parameter("posterior needs at least one class"));
    }
    if scores.len() != log_priors.len() {
        return Err(Error::Dimension {
            expected: scores.len(),
            got: log_priors.len(),
        });
    }
    let logits: Vec<f64> = scores
        .iter()
        .zip(log_priors)
        .map(|(s, lp)| s + lp)
        .collect();
    Ok(softmax(&logits))
}

/// Classifies `x`: estimated posterior next to the exact Bayes
/// posterior, with their total variation distance.
pub fn classify(
    family: &LabeledFamily,
    schedule: &Schedule,
    x: &[f64],
    cfg: &McConfig,
) -> Result<ClassifierReport> {
    let scores = class_scores(family, schedule, x, cfg)?;
    let log_priors: Vec<f64> = family.priors().iter().map(|p| p.ln()).collect();
    let raw: Vec<f64> = scores.iter().map(|s| s.score).collect();
    let posterior = posterior_from_scores(&raw, &log_priors)?;
    let exact_logits: Vec<f64> = family
        .iter()
        .zip(&log_priors)
        .map(|((_, m, _), lp)| Ok(m.log_density0(x)? + lp))
        .collect::<Result<_>>()?;
    let bayes_posterior = softmax(&exact_logits);
    let tv_distance = 0.5
        * posterior
            .iter()
            .zip(&bayes_posterior)
            .map(|(p, b)| (p - b).abs())
            .sum::<f64>();
    Ok(ClassifierReport {
        x: x.to_vec(),
        scores,
        posterior,
        bayes_posterior,
        tv_distance,
        uniform_prior: family.is_uniform_prior(),
    })
}
