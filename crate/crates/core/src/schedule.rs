//! Diffusion noise schedules and the coefficients derived from them.
//!
//! Steps are 1-based throughout the crate: `t = 1..=T`, with `alpha_bar(0) = 1`
//! by convention.

// `!(x > 0.0)` is used on purpose: NaN must fail the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    /// Squared-cosine `alpha_bar` curve with offset 0.008, betas clipped at 0.999.
    Cosine,
}

/// The serialized description of a schedule. Derived arrays are always
/// recomputed from it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    #[serde(rename = "T")]
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec {
            kind: ScheduleKind::Linear,
            steps: 100,
            beta_start: 1e-3,
            beta_end: 0.2,
        }
    }
}

impl ScheduleSpec {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Self {
        ScheduleSpec {
            kind: ScheduleKind::Linear,
            steps,
            beta_start,
            beta_end,
        }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        build_schedule(self.steps, self.kind, self.beta_start, self.beta_end)
    }
}

const COSINE_OFFSET: f64 = 0.008;
const COSINE_MAX_BETA: f64 = 0.999;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    spec: ScheduleSpec,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    snr: Vec<f64>,
    beta_tilde: Vec<f64>,
}

/// Builds a schedule of `steps` diffusion steps.
///
/// The cosine kind ignores `beta_start` and `beta_end`.
pub fn build_schedule(
    steps: usize,
    kind: ScheduleKind,
    beta_start: f64,
    beta_end: f64,
) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::param("T", "must be at least 1"));
    }
    let beta: Vec<f64> = match kind {
        ScheduleKind::Linear => {
            if !(beta_start > 0.0 && beta_start < 1.0) {
                return Err(Error::param(
                    "beta_start",
                    format!("{beta_start} not in (0, 1)"),
                ));
            }
            if !(beta_end >= beta_start && beta_end < 1.0) {
                return Err(Error::param(
                    "beta_end",
                    format!("{beta_end} not in [beta_start, 1)"),
                ));
            }
            if steps == 1 {
                vec![beta_start]
            } else {
                let span = (steps - 1) as f64;
                (0..steps)
                    .map(|i| beta_start + (beta_end - beta_start) * (i as f64 / span))
                    .collect()
            }
        }
        ScheduleKind::Cosine => {
            let f = |u: f64| {
                let a = (u + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2;
                a.cos().powi(2)
            };
            (1..=steps)
                .map(|t| {
                    let prev = f((t - 1) as f64 / steps as f64);
                    let cur = f(t as f64 / steps as f64);
                    (1.0 - cur / prev).min(COSINE_MAX_BETA)
                })
                .collect()
        }
    };

    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let alpha_bar: Vec<f64> = alpha
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    let snr = alpha_bar.iter().map(|ab| ab / (1.0 - ab)).collect();
    let beta_tilde = (0..steps)
        .map(|i| {
            let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
            (1.0 - prev) / (1.0 - alpha_bar[i]) * beta[i]
        })
        .collect();

    let schedule = NoiseSchedule {
        spec: ScheduleSpec {
            kind,
            steps,
            beta_start,
            beta_end,
        },
        beta,
        alpha,
        alpha_bar,
        snr,
        beta_tilde,
    };
    schedule.validate()?;
    Ok(schedule)
}

/// Coefficients of one reverse transition `t -> t_prev`.
///
/// For `t_prev = t - 1` these are the schedule's own entries; for a strided
/// grid they are the subsampled-chain equivalents.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub t: usize,
    pub t_prev: usize,
    pub alpha: f64,
    pub beta: f64,
    pub alpha_bar: f64,
    pub alpha_bar_prev: f64,
    pub beta_tilde: f64,
}

impl NoiseSchedule {
    pub fn spec(&self) -> &ScheduleSpec {
        &self.spec
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn kind(&self) -> ScheduleKind {
        self.spec.kind
    }

    fn idx(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::param(
                "t",
                format!("step {t} outside 1..={}", self.steps()),
            ));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.beta[self.idx(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alpha[self.idx(t)?])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bar[self.idx(t)?])
    }

    /// `alpha_bar` with the `alpha_bar(0) = 1` convention.
    pub fn alpha_bar_or_one(&self, t: usize) -> Result<f64> {
        if t == 0 {
            Ok(1.0)
        } else {
            self.alpha_bar(t)
        }
    }

    /// Signal-to-noise ratio `alpha_bar_t / (1 - alpha_bar_t)`.
    pub fn snr(&self, t: usize) -> Result<f64> {
        Ok(self.snr[self.idx(t)?])
    }

    /// DDPM posterior variance `q(x_{t-1} | x_t, x_0)`; zero at `t = 1`.
    pub fn posterior_beta_tilde(&self, t: usize) -> Result<f64> {
        Ok(self.beta_tilde[self.idx(t)?])
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn snrs(&self) -> &[f64] {
        &self.snr
    }

    pub fn transition(&self, t: usize, t_prev: usize) -> Result<Transition> {
        let i = self.idx(t)?;
        if t_prev >= t {
            return Err(Error::param(
                "t_prev",
                format!("{t_prev} must be smaller than t = {t}"),
            ));
        }
        if t_prev + 1 == t {
            return Ok(Transition {
                t,
                t_prev,
                alpha: self.alpha[i],
                beta: self.beta[i],
                alpha_bar: self.alpha_bar[i],
                alpha_bar_prev: self.alpha_bar_or_one(t_prev)?,
                beta_tilde: self.beta_tilde[i],
            });
        }
        let alpha_bar = self.alpha_bar[i];
        let alpha_bar_prev = self.alpha_bar_or_one(t_prev)?;
        let alpha = alpha_bar / alpha_bar_prev;
        let beta = 1.0 - alpha;
        Ok(Transition {
            t,
            t_prev,
            alpha,
            beta,
            alpha_bar,
            alpha_bar_prev,
            beta_tilde: (1.0 - alpha_bar_prev) / (1.0 - alpha_bar) * beta,
        })
    }

    /// Inference grid visited by the samplers, from `T` down to 1.
    ///
    /// `stride = 1` is the full grid. Larger strides take every `stride`-th
    /// step from `T` and always finish at `t = 1`.
    pub fn timestep_grid(&self, stride: usize) -> Result<Vec<usize>> {
        if stride == 0 {
            return Err(Error::param("stride", "must be at least 1"));
        }
        let mut grid: Vec<usize> = (1..=self.steps()).rev().step_by(stride).collect();
        if *grid.last().unwrap() != 1 {
            grid.push(1);
        }
        Ok(grid)
    }

    fn validate(&self) -> Result<()> {
        for (i, &b) in self.beta.iter().enumerate() {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::param(
                    "beta",
                    format!("beta_{} = {b} not in (0, 1)", i + 1),
                ));
            }
        }
        if self.alpha_bar.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::param("beta", "alpha_bar is not strictly decreasing"));
        }
        if !(*self.alpha_bar.last().unwrap() > 0.0) {
            return Err(Error::param("beta", "alpha_bar_T underflowed to zero"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_step_half() {
        let s = build_schedule(1, ScheduleKind::Linear, 0.5, 0.5).unwrap();
        assert_eq!(s.alphas(), &[0.5]);
        assert_eq!(s.alpha_bars(), &[0.5]);
        assert_eq!(s.snr(1).unwrap(), 1.0);
        assert_eq!(s.posterior_beta_tilde(1).unwrap(), 0.0);
    }

    #[test]
    fn two_step_hand_values() {
        let s = build_schedule(2, ScheduleKind::Linear, 0.1, 0.2).unwrap();
        assert_eq!(s.betas(), &[0.1, 0.2]);
        assert!((s.alpha_bar(1).unwrap() - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(2).unwrap() - 0.72).abs() < 1e-15);
        assert!((s.snr(2).unwrap() - 18.0 / 7.0).abs() < 1e-12);
        // (1 - 0.9) / (1 - 0.72) * 0.2
        assert!((s.posterior_beta_tilde(2).unwrap() - 0.1 / 0.28 * 0.2).abs() < 1e-15);
    }

    #[test]
    fn snr_at_symmetric_and_ninety_percent_points() {
        let s = build_schedule(1, ScheduleKind::Linear, 0.1, 0.1).unwrap();
        assert!((s.snr(1).unwrap() - 9.0).abs() < 1e-12);
    }

    #[test]
    fn standard_ddpm_range() {
        let s = build_schedule(1000, ScheduleKind::Linear, 1e-4, 0.02).unwrap();
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bar(1000).unwrap() > 0.0);
        assert_eq!(s.beta(1).unwrap(), 1e-4);
        assert!((s.beta(1000).unwrap() - 0.02).abs() < 1e-17);
    }

    #[test]
    fn default_spec_reaches_noise() {
        let s = ScheduleSpec::default().build().unwrap();
        assert_eq!(s.steps(), 100);
        assert!(s.alpha_bar(100).unwrap() < 1e-4);
    }

    #[test]
    fn cosine_is_valid() {
        let s = build_schedule(50, ScheduleKind::Cosine, 0.0, 0.0).unwrap();
        assert!(s.betas().iter().all(|&b| b > 0.0 && b <= COSINE_MAX_BETA));
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn invalid_ranges_name_the_field() {
        let err = build_schedule(0, ScheduleKind::Linear, 0.1, 0.2).unwrap_err();
        assert!(err.to_string().contains("`T`"));
        let err = build_schedule(10, ScheduleKind::Linear, 0.0, 0.2).unwrap_err();
        assert!(err.to_string().contains("beta_start"));
        let err = build_schedule(10, ScheduleKind::Linear, 0.3, 0.2).unwrap_err();
        assert!(err.to_string().contains("beta_end"));
        let err = build_schedule(10, ScheduleKind::Linear, 0.1, 1.0).unwrap_err();
        assert!(err.to_string().contains("beta_end"));
    }

    #[test]
    fn out_of_range_step() {
        let s = build_schedule(3, ScheduleKind::Linear, 0.1, 0.2).unwrap();
        assert!(s.snr(0).is_err());
        assert!(s.snr(4).is_err());
    }

    #[test]
    fn unit_stride_transition_uses_schedule_entries() {
        let s = build_schedule(10, ScheduleKind::Linear, 0.01, 0.2).unwrap();
        let tr = s.transition(5, 4).unwrap();
        assert_eq!(tr.alpha, s.alpha(5).unwrap());
        assert_eq!(tr.beta_tilde, s.posterior_beta_tilde(5).unwrap());
        let strided = s.transition(5, 2).unwrap();
        let expect = s.alpha(5).unwrap() * s.alpha(4).unwrap() * s.alpha(3).unwrap();
        assert!((strided.alpha - expect).abs() < 1e-14);
    }

    #[test]
    fn grids() {
        let s = build_schedule(10, ScheduleKind::Linear, 0.01, 0.2).unwrap();
        assert_eq!(
            s.timestep_grid(1).unwrap(),
            (1..=10).rev().collect::<Vec<_>>()
        );
        assert_eq!(s.timestep_grid(4).unwrap(), vec![10, 6, 2, 1]);
        assert_eq!(s.timestep_grid(3).unwrap(), vec![10, 7, 4, 1]);
    }

    proptest! {
        #[test]
        fn derived_arrays_match_naive_loops(
            steps in 1usize..300,
            start in 1e-5f64..0.05,
            extra in 0.0f64..0.2,
        ) {
            let s = build_schedule(steps, ScheduleKind::Linear, start, start + extra).unwrap();
            for t in 1..=steps {
                let mut prod = 1.0;
                for i in 1..=t {
                    prod *= 1.0 - s.beta(i).unwrap();
                }
                let ab = s.alpha_bar(t).unwrap();
                prop_assert!(((ab - prod) / prod).abs() <= 1e-15);
                let snr = ab / (1.0 - ab);
                prop_assert!(((s.snr(t).unwrap() - snr) / snr).abs() <= 1e-12);
            }
            prop_assert!(s.snrs().windows(2).all(|w| w[1] < w[0]));
        }
    }
}
