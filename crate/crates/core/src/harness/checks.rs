use std::fmt;
use std::time::Instant;

use rand::Rng as _;
use rayon::prelude::*;
use serde::Serialize;

use crate::alignment::{step_dpo_loss, DpoHyper, PreferencePair};
use crate::error::{Error, Result};
use crate::gaussian::PreferenceWeights;
use crate::nn::{init_params, Activation, MlpArchitecture, MlpParams};
use crate::oracle::{
    analytic_tilted_posterior, q_additivity_check, reward_decomposition_check,
    tilted_posterior_quadrature, verify_theorem1, DiscreteMDP, GaussianData, RandomMdpSpec,
};
use crate::rng;
use crate::schedule::ScheduleSpec;

use super::reward::RewardFn;

pub const THEOREM1_TOL: f64 = 1e-10;
pub const ADDITIVITY_TOL: f64 = 1e-12;
pub const DECOMPOSITION_TOL: f64 = 1e-10;
pub const ANALYTIC_TOL: f64 = 1e-5;
pub const LN2_TOL: f64 = 1e-12;
pub const GRADCHECK_TOL: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-6;

/// The worst discrepancy a check found, against its tolerance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    pub name: &'static str,
    pub instances: usize,
    pub worst: f64,
    pub tolerance: f64,
    pub seconds: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.worst.is_finite() && self.worst <= self.tolerance
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}: worst {:.3e} (tolerance {:.0e}) over {} instances in {:.2}s",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.worst,
            self.tolerance,
            self.instances,
            self.seconds
        )
    }
}

/// `|a - b| / max(|b|, 1)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

/// A uniform draw from the simplex with `m` vertices.
pub fn random_simplex(m: usize, r: &mut rng::Rng) -> Result<PreferenceWeights> {
    let e: Vec<f64> = (0..m).map(|_| -(1.0 - r.random::<f64>()).ln()).collect();
    let total: f64 = e.iter().sum();
    PreferenceWeights::new(e.into_iter().map(|x| x / total).collect())
}

fn instance(spec: &RandomMdpSpec, seed: u64, i: usize) -> Result<(DiscreteMDP, PreferenceWeights)> {
    let s = rng::derive_indexed(seed, i as u64);
    let mdp = DiscreteMDP::random(spec, s)?;
    let w = random_simplex(spec.rewards, &mut rng::stream(s, 1))?;
    Ok((mdp, w))
}

fn worst_over<F>(name: &'static str, instances: usize, tolerance: f64, f: F) -> Result<CheckReport>
where
    F: Fn(usize) -> Result<f64> + Sync + Send,
{
    if instances == 0 {
        return Err(Error::param("instances", "must be at least 1"));
    }
    let t0 = Instant::now();
    let values = (0..instances)
        .into_par_iter()
        .map(&f)
        .collect::<Result<Vec<f64>>>()?;
    // NaN must not hide behind max.
    let worst = values.iter().copied().fold(0.0, |a: f64, b| {
        if b.is_nan() || a.is_nan() {
            f64::NAN
        } else {
            a.max(b)
        }
    });
    Ok(CheckReport {
        name,
        instances,
        worst,
        tolerance,
        seconds: t0.elapsed().as_secs_f64(),
    })
}

/// Max total-variation distance between fused and directly tilted policies
/// over `instances` random problems.
pub fn theorem1_suite(spec: &RandomMdpSpec, instances: usize, seed: u64) -> Result<CheckReport> {
    worst_over("theorem1", instances, THEOREM1_TOL, |i| {
        let (mdp, w) = instance(spec, seed, i)?;
        Ok(verify_theorem1(&mdp, &w)?.max_tv)
    })
}

/// Max `|Q^w - sum_i w_i Q^i|` over the same family.
pub fn additivity_suite(spec: &RandomMdpSpec, instances: usize, seed: u64) -> Result<CheckReport> {
    worst_over("additivity", instances, ADDITIVITY_TOL, |i| {
        let (mdp, w) = instance(spec, seed, i)?;
        q_additivity_check(&mdp, &w)
    })
}

/// Max per-trajectory `|r - V_0 - sum A|` over `rollouts` trajectories of
/// every reward of every instance.
pub fn decomposition_suite(
    spec: &RandomMdpSpec,
    instances: usize,
    rollouts: usize,
    seed: u64,
) -> Result<CheckReport> {
    worst_over("decomposition", instances, DECOMPOSITION_TOL, |i| {
        let (mdp, _) = instance(spec, seed, i)?;
        let mut worst: f64 = 0.0;
        for k in 0..mdp.rewards().len() {
            let s = rng::derive_indexed(
                rng::derive_seed(seed, "rollouts"),
                (i * mdp.rewards().len() + k) as u64,
            );
            worst = worst.max(reward_decomposition_check(
                &mdp,
                mdp.reward(k)?,
                rollouts,
                s,
            )?);
        }
        Ok(worst)
    })
}

/// A random one-dimensional tilted-Gaussian problem.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TiltInstance {
    pub data: GaussianData,
    pub coef: f64,
    pub lambda: f64,
    pub t: usize,
    pub x_t: f64,
}

impl TiltInstance {
    pub fn random(schedule_steps: usize, r: &mut rng::Rng) -> Result<Self> {
        Ok(TiltInstance {
            data: GaussianData {
                mean: r.random_range(-2.0..2.0),
                variance: r.random_range(0.1..4.0),
            },
            coef: r.random_range(-2.0..2.0),
            lambda: r.random_range(0.05..1.0),
            t: r.random_range(1..=schedule_steps),
            x_t: r.random_range(-3.0..3.0),
        })
    }
}

/// Closed-form tilted posterior against nested quadrature, on the default
/// schedule. The error of an instance is the larger of the mean's error
/// relative to `max(|mean|, 1)` and the variance's plain relative error.
pub fn analytic_suite(instances: usize, seed: u64) -> Result<CheckReport> {
    let spec = ScheduleSpec::default();
    let schedule = spec.build()?;
    worst_over("analytic", instances, ANALYTIC_TOL, |i| {
        let inst = TiltInstance::random(spec.steps, &mut rng::stream(seed, i as u64))?;
        let reward = RewardFn::Linear {
            coef: vec![inst.coef],
        };
        let closed = analytic_tilted_posterior(
            inst.data,
            &schedule,
            &reward,
            inst.lambda,
            inst.t,
            inst.x_t,
        )?;
        let (mean, var) = tilted_posterior_quadrature(
            inst.data,
            &schedule,
            &reward,
            inst.lambda,
            inst.t,
            inst.x_t,
        )?;
        let e_mean = relative_error(closed.mean()[0], mean);
        let e_var = (closed.variance() - var).abs() / var;
        Ok(e_mean.max(e_var))
    })
}

/// The network and pairs the gradient check runs on.
pub fn gradcheck_problem(seed: u64) -> Result<(MlpParams, MlpParams, Vec<PreferencePair>)> {
    let arch = MlpArchitecture {
        data_dim: 2,
        t_embed_dim: 8,
        hidden: vec![16, 16],
        activation: Activation::Silu,
    };
    let pre = init_params(&arch, rng::derive_seed(seed, "pre"))?;
    let mut r = rng::stream(rng::derive_seed(seed, "theta"), 0);
    let theta_flat: Vec<f64> = pre
        .flat()
        .iter()
        .map(|p| p + 0.05 * rng::normal(&mut r))
        .collect();
    let theta = MlpParams::new(arch, theta_flat)?;
    let mut r = rng::stream(rng::derive_seed(seed, "pairs"), 0);
    let pairs = (0..16)
        .map(|_| PreferencePair {
            x0_win: rng::normal_vec(&mut r, 2),
            x0_lose: rng::normal_vec(&mut r, 2),
            margin: 0.0,
        })
        .collect();
    Ok((pre, theta, pairs))
}

/// At `theta = pre` the step-level DPO loss is `ln 2`; reports `|L - ln 2|`.
pub fn ln2_check(seed: u64) -> Result<CheckReport> {
    let t0 = Instant::now();
    let (pre, _, pairs) = gradcheck_problem(seed)?;
    let schedule = ScheduleSpec::default().build()?;
    let loss = step_dpo_loss(&pre, &pre, &pairs, &schedule, &DpoHyper::default(), seed)?;
    Ok(CheckReport {
        name: "dpo-ln2",
        instances: pairs.len(),
        worst: (loss.value() - std::f64::consts::LN_2).abs(),
        tolerance: LN2_TOL,
        seconds: t0.elapsed().as_secs_f64(),
    })
}

/// Reverse-mode gradient of the step-level DPO loss against central
/// differences on `coords` distinct random coordinates. Errors are relative
/// to `max(|fd|, 1e-3)`.
pub fn gradcheck(coords: usize, seed: u64) -> Result<CheckReport> {
    let t0 = Instant::now();
    let (pre, theta, pairs) = gradcheck_problem(seed)?;
    let schedule = ScheduleSpec::default().build()?;
    let hyper = DpoHyper::default();
    let loss_at =
        |p: &MlpParams| step_dpo_loss(p, &pre, &pairs, &schedule, &hyper, seed).map(|l| l.value());
    let grad = step_dpo_loss(&theta, &pre, &pairs, &schedule, &hyper, seed)?.gradient()?;
    let n = grad.len();
    if coords == 0 || coords > n {
        return Err(Error::param("coords", format!("must be in 1..={n}")));
    }
    let picks = rand::seq::index::sample(&mut rng::stream(seed, 7), n, coords).into_vec();
    let worst = picks
        .par_iter()
        .map(|&i| {
            let mut plus = theta.clone();
            plus.flat_mut()[i] += FD_STEP;
            let mut minus = theta.clone();
            minus.flat_mut()[i] -= FD_STEP;
            let fd = (loss_at(&plus)? - loss_at(&minus)?) / (2.0 * FD_STEP);
            Ok((grad[i] - fd).abs() / fd.abs().max(1e-3))
        })
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    Ok(CheckReport {
        name: "dpo-gradient",
        instances: coords,
        worst,
        tolerance: GRADCHECK_TOL,
        seconds: t0.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simplex_draws_are_valid() {
        let mut r = rng::stream(3, 0);
        for m in 1..5 {
            let w = random_simplex(m, &mut r).unwrap();
            assert_eq!(w.len(), m);
            assert!((w.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn small_suites_pass() {
        let spec = RandomMdpSpec::default();
        assert!(theorem1_suite(&spec, 3, 1).unwrap().passed());
        assert!(additivity_suite(&spec, 3, 1).unwrap().passed());
        assert!(decomposition_suite(&spec, 2, 200, 1).unwrap().passed());
        assert!(analytic_suite(5, 1).unwrap().passed());
        assert!(ln2_check(1).unwrap().passed());
        assert!(gradcheck(20, 1).unwrap().passed());
    }

    #[test]
    fn report_line_names_outcome() {
        let rep = CheckReport {
            name: "x",
            instances: 1,
            worst: f64::NAN,
            tolerance: 1.0,
            seconds: 0.0,
        };
        assert!(!rep.passed());
        assert!(rep.to_string().starts_with("FAIL x"));
    }
}
