//! Discretization schedules for the forward noising process.
//!
//! A schedule holds the per-step noise rates `β_t` for `t = 1..=T`
//! together with every derived quantity the rest of the crate needs:
//!
//! * `α_t = 1 − β_t`, extended by the convention `α_{T+1} = 0`,
//! * the running products `ᾱ_t = α_1 ⋯ α_t` (also kept in log form so
//!   very long schedules stay informative after the product underflows),
//! * the time grid `t_i = 1 − ᾱ_i` with `t_{T+1} = 1` exactly.
//!
//! The built-in family is parameterized by `(T, c0, c1)`: with
//! `r = c1 ln T / T` it sets `β_1 = T^{−c0}` and
//! `β_{t+1} = r · min(β_1 (1+r)^t, 1)` for `t = 1..T−1`, so the rates
//! grow geometrically until they saturate at `r`. Arbitrary rate lists
//! are supported through [`custom_schedule`].
//!
//! Two per-step coefficients derived here drive everything downstream:
//! the density/ELBO weight `(1 − α_{t+1}) / (2 (1 − ᾱ_t))` and the
//! variational weight `(1 − α_t) / (2 (α_t − ᾱ_t))`. [`Schedule::coefficient_gap`]
//! reports both, their gap, and the `16 r` multiple of the first that
//! the gap is compared against for built schedules. The comparison is
//! reported, not asserted: at the final step the gap can legitimately
//! exceed the multiple when `r` is small (see `coefficient_gap` docs).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance used when checking that an explicit rate list in a
/// serialized schedule agrees with the `(T, c0, c1)` parameters stored
/// next to it.
const ROUNDTRIP_RTOL: f64 = 1e-12;

/// A forward-process discretization: noise rates and derived grids.
///
/// All accessors use the natural one-based step index, so `beta(1)` is
/// the first rate and `t_grid(T + 1)` is exactly `1`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "ScheduleSpec", into = "ScheduleSpec")]
pub struct Schedule {
    steps: usize,
    /// `(c0, c1, r)` when built from the geometric family, `None` for
    /// custom rate lists (the gap bound is only defined in the former case).
    family: Option<(f64, f64, f64)>,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    log_alpha_bars: Vec<f64>,
    t_grid: Vec<f64>,
}

/// Both per-step weights at one index, their gap, and the reported bound.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct CoefficientGap {
    /// Density/ELBO weight `(1 − α_{t+1}) / (2 (1 − ᾱ_t))`.
    pub elbo: f64,
    /// Variational weight `(1 − α_t) / (2 (α_t − ᾱ_t))`.
    pub vlb: f64,
    /// `|elbo − vlb|`.
    pub gap: f64,
    /// `(16 c1 ln T / T) · elbo` for built schedules, `None` for custom
    /// ones, where no family parameters exist.
    pub bound: Option<f64>,
}

impl CoefficientGap {
    /// Whether the gap lies within the reported bound, when one exists.
    pub fn within_bound(&self) -> Option<bool> {
        self.bound.map(|b| self.gap <= b)
    }
}

/// Builds a schedule from the geometric `(T, c0, c1)` family.
///
/// Requires `T ≥ 2` and positive shape parameters; fails if the
/// resulting rates leave `(0, 1)`, which happens once `r = c1 ln T / T`
/// reaches `1` (tiny `T` with large `c1`).
pub fn build_schedule(steps: usize, c0: f64, c1: f64) -> Result<Schedule> {
    if steps < 2 {
        return Err(Error::parameter(format!(
            "schedule needs at least 2 steps, got {steps}"
        )));
    }
    if !(c0 > 0.0) || !(c1 > 0.0) {
        return Err(Error::parameter(format!(
            "schedule shape parameters must be positive, got c0 = {c0}, c1 = {c1}"
        )));
    }
    let t_f = steps as f64;
    let r = c1 * t_f.ln() / t_f;
    if r >= 1.0 {
        return Err(Error::parameter(format!(
            "rate ceiling r = c1 ln(T)/T = {r} must stay below 1"
        )));
    }
    let beta1 = t_f.powf(-c0);
    let mut betas = Vec::with_capacity(steps);
    betas.push(beta1);
    let mut growth = 1.0;
    for _ in 1..steps {
        growth *= 1.0 + r;
        betas.push(r * (beta1 * growth).min(1.0));
    }
    Schedule::from_parts(betas, Some((c0, c1, r)))
}

/// Builds a schedule from an explicit rate list (`T = betas.len() ≥ 1`).
pub fn custom_schedule(betas: &[f64]) -> Result<Schedule> {
    Schedule::from_parts(betas.to_vec(), None)
}

impl Schedule {
    fn from_parts(betas: Vec<f64>, family: Option<(f64, f64, f64)>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::parameter("schedule needs at least one rate"));
        }
        for (i, &b) in betas.iter().enumerate() {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::parameter(format!(
                    "beta[{}] = {b} outside (0, 1)",
                    i + 1
                )));
            }
        }
        let steps = betas.len();
        let mut alphas = Vec::with_capacity(steps + 1);
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut log_alpha_bars = Vec::with_capacity(steps);
        let mut t_grid = Vec::with_capacity(steps + 1);
        let mut prod = 1.0;
        let mut log_prod = 0.0;
        for &b in &betas {
            let a = 1.0 - b;
            alphas.push(a);
            prod *= a;
            log_prod += a.ln();
            alpha_bars.push(prod);
            log_alpha_bars.push(log_prod);
            t_grid.push(1.0 - prod);
        }
        alphas.push(0.0);
        t_grid.push(1.0);
        Ok(Schedule {
            steps,
            family,
            betas,
            alphas,
            alpha_bars,
            log_alpha_bars,
            t_grid,
        })
    }

    /// Number of noising steps `T`.
    pub fn num_steps(&self) -> usize {
        self.steps
    }

    /// The family parameters `(c0, c1)` for built schedules.
    pub fn family(&self) -> Option<(f64, f64)> {
        self.family.map(|(c0, c1, _)| (c0, c1))
    }

    /// The rate ceiling `r = c1 ln T / T` for built schedules.
    pub fn rate_ceiling(&self) -> Option<f64> {
        self.family.map(|(_, _, r)| r)
    }

    /// `β_t` for `t = 1..=T`. Panics on an out-of-range index.
    pub fn beta(&self, t: usize) -> f64 {
        assert!((1..=self.steps).contains(&t), "beta index {t} out of range");
        self.betas[t - 1]
    }

    /// `α_t` for `t = 1..=T+1`; `α_{T+1} = 0` by convention.
    pub fn alpha(&self, t: usize) -> f64 {
        assert!(
            (1..=self.steps + 1).contains(&t),
            "alpha index {t} out of range"
        );
        self.alphas[t - 1]
    }

    /// `ᾱ_t` for `t = 1..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        assert!(
            (1..=self.steps).contains(&t),
            "alpha_bar index {t} out of range"
        );
        self.alpha_bars[t - 1]
    }

    /// `ln ᾱ_t`, accumulated directly in log space so it stays finite
    /// and accurate even when the product form has underflowed.
    pub fn log_alpha_bar(&self, t: usize) -> f64 {
        assert!(
            (1..=self.steps).contains(&t),
            "log_alpha_bar index {t} out of range"
        );
        self.log_alpha_bars[t - 1]
    }

    /// Grid time `t_i = 1 − ᾱ_i` for `i = 1..=T+1`, with `t_{T+1} = 1`.
    pub fn t_grid(&self, i: usize) -> f64 {
        assert!(
            (1..=self.steps + 1).contains(&i),
            "t_grid index {i} out of range"
        );
        self.t_grid[i - 1]
    }

    /// Density/ELBO weight `(1 − α_{t+1}) / (2 (1 − ᾱ_t))` for `t = 1..=T`.
    ///
    /// Equals `β_{t+1} / (2 t_t)` for `t < T` and `1 / (2 t_T)` at the
    /// final step, where the `α_{T+1} = 0` convention applies.
    pub fn elbo_coefficient(&self, t: usize) -> f64 {
        (1.0 - self.alpha(t + 1)) / (2.0 * self.t_grid(t))
    }

    /// Variational weight `(1 − α_t) / (2 (α_t − ᾱ_t))` for `t = 2..=T`.
    pub fn vlb_coefficient(&self, t: usize) -> f64 {
        assert!(
            (2..=self.steps).contains(&t),
            "vlb coefficient index {t} out of range"
        );
        self.beta(t) / (2.0 * (self.alpha(t) - self.alpha_bar(t)))
    }

    /// Reports both weights at step `t ∈ 2..=T`, their gap, and the `16 r`
    /// multiple of the ELBO weight the gap is compared against.
    ///
    /// No ordering between `gap` and `bound` is enforced here. For
    /// interior steps of reasonable built schedules the gap sits well
    /// inside the bound, but at `t = T` the ELBO weight jumps to
    /// `1 / (2 t_T)` (the `α_{T+1} = 0` convention) while the
    /// variational weight stays `O(r / t_T)`, so their gap is close to
    /// the ELBO weight itself and the comparison only succeeds when
    /// `16 r ≳ 1`. Callers decide what to do with boundary steps.
    pub fn coefficient_gap(&self, t: usize) -> Result<CoefficientGap> {
        if !(2..=self.steps).contains(&t) {
            return Err(Error::Range {
                name: "t",
                value: t as f64,
                expected: "2 <= t <= T",
            });
        }
        let elbo = self.elbo_coefficient(t);
        let vlb = self.vlb_coefficient(t);
        let gap = (elbo - vlb).abs();
        let bound = self.family.map(|(_, _, r)| 16.0 * r * elbo);
        Ok(CoefficientGap {
            elbo,
            vlb,
            gap,
            bound,
        })
    }
}

/// Serialized form: either `(T, c0, c1)` or an explicit rate list.
///
/// Serialization always writes the rates alongside the family
/// parameters; deserialization rebuilds from whichever is present and
/// cross-checks when both are.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ScheduleSpec {
    #[serde(rename = "T", skip_serializing_if = "Option::is_none")]
    steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    c0: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    c1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    betas: Option<Vec<f64>>,
}

impl TryFrom<ScheduleSpec> for Schedule {
    type Error = Error;

    fn try_from(spec: ScheduleSpec) -> Result<Schedule> {
        match (spec.betas, spec.steps, spec.c0, spec.c1) {
            (Some(betas), steps, c0, c1) => {
                if let Some(t) = steps {
                    if t != betas.len() {
                        return Err(Error::parameter(format!(
                            "schedule declares T = {t} but lists {} rates",
                            betas.len()
                        )));
                    }
                }
                match (c0, c1) {
                    (Some(c0), Some(c1)) => {
                        // Rates plus family parameters: rebuild from the
                        // family and require agreement, so the stored
                        // provenance stays meaningful.
                        let built = build_schedule(betas.len(), c0, c1)?;
                        for (i, (&given, &rebuilt)) in
                            betas.iter().zip(&built.betas).enumerate()
                        {
                            if (given - rebuilt).abs() > ROUNDTRIP_RTOL * rebuilt.abs() {
                                return Err(Error::parameter(format!(
                                    "beta[{}] = {given} disagrees with the (c0, c1) family value {rebuilt}",
                                    i + 1
                                )));
                            }
                        }
                        Ok(built)
                    }
                    (None, None) => custom_schedule(&betas),
                    _ => Err(Error::parameter(
                        "schedule must give both c0 and c1 or neither",
                    )),
                }
            }
            (None, Some(steps), Some(c0), Some(c1)) => build_schedule(steps, c0, c1),
            _ => Err(Error::parameter(
                "schedule needs either betas or all of (T, c0, c1)",
            )),
        }
    }
}

impl From<Schedule> for ScheduleSpec {
    fn from(s: Schedule) -> ScheduleSpec {
        let (c0, c1) = match s.family {
            Some((c0, c1, _)) => (Some(c0), Some(c1)),
            None => (None, None),
        };
        ScheduleSpec {
            steps: Some(s.steps),
            c0,
            c1,
            betas: Some(s.betas),
        }
    }
}


#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        /// Grid increments reproduce `ᾱ_i β_{i+1}` (exact in algebra, a
        /// few ulps in floats), including the final step where
        /// `β_{T+1} = 1` under the `α_{T+1} = 0` convention.
        #[test]
        fn grid_increments_match_alpha_bar_times_beta(
            steps in 2usize..200,
            c0 in 0.25f64..2.5,
            c1 in 0.5f64..3.0,
        ) {
            // The family is only defined while the rate ceiling stays
            // below one; tiny step counts with large c1 violate that.
            prop_assume!(c1 * (steps as f64).ln() / (steps as f64) < 1.0);
            let s = build_schedule(steps, c0, c1).unwrap();
            for i in 1..=steps {
                let inc = s.t_grid(i + 1) - s.t_grid(i);
                let expected = if i < steps {
                    s.alpha_bar(i) * s.beta(i + 1)
                } else {
                    s.alpha_bar(steps)
                };
                prop_assert!((inc - expected).abs() <= 1e-13);
            }
        }

        /// First grid point is `β_1` and the last finite one is `1 − ᾱ_T`.
        #[test]
        fn grid_endpoints_are_consistent(
            steps in 2usize..200,
            c0 in 0.25f64..2.5,
            c1 in 0.5f64..3.0,
        ) {
            // The family is only defined while the rate ceiling stays
            // below one; tiny step counts with large c1 violate that.
            prop_assume!(c1 * (steps as f64).ln() / (steps as f64) < 1.0);
            let s = build_schedule(steps, c0, c1).unwrap();
            prop_assert!((s.t_grid(1) - s.beta(1)).abs() <= 1e-15);
            prop_assert!((1.0 - s.t_grid(steps) - s.alpha_bar(steps)).abs() <= 1e-15);
            prop_assert_eq!(s.t_grid(steps + 1), 1.0);
        }

        /// Every rate after the first stays at or below the ceiling `r`.
        #[test]
        fn rates_respect_the_ceiling(
            steps in 2usize..300,
            c0 in 0.25f64..2.5,
            c1 in 0.5f64..3.0,
        ) {
            // The family is only defined while the rate ceiling stays
            // below one; tiny step counts with large c1 violate that.
            prop_assume!(c1 * (steps as f64).ln() / (steps as f64) < 1.0);
            let s = build_schedule(steps, c0, c1).unwrap();
            let r = s.rate_ceiling().unwrap();
            for t in 2..=steps {
                prop_assert!(s.beta(t) <= r * (1.0 + 1e-15));
            }
        }

        /// Custom rebuilds from the extracted rates are bit-identical.
        #[test]
        fn custom_rebuild_is_bit_identical(
            steps in 2usize..100,
            c0 in 0.25f64..2.5,
            c1 in 0.5f64..3.0,
        ) {
            // The family is only defined while the rate ceiling stays
            // below one; tiny step counts with large c1 violate that.
            prop_assume!(c1 * (steps as f64).ln() / (steps as f64) < 1.0);
            let s = build_schedule(steps, c0, c1).unwrap();
            let betas: Vec<f64> = (1..=steps).map(|t| s.beta(t)).collect();
            let re = custom_schedule(&betas).unwrap();
            for t in 1..=steps {
                prop_assert_eq!(s.alpha_bar(t).to_bits(), re.alpha_bar(t).to_bits());
                prop_assert_eq!(s.t_grid(t).to_bits(), re.t_grid(t).to_bits());
            }
        }
    }
}
