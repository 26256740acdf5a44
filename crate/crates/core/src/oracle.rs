//! Exact checks of the theory on discretized one-dimensional chains.
//!
//! A [`DiscreteMDP`] has states on a uniform grid, deterministic dynamics
//! (the action is the next state) and a terminal reward on the last action.
//! Step `k = 0..T-1` of the MDP corresponds to the denoising step
//! `t = T - k`. Values follow
//!
//! ```text
//! Q_{T-1}(s, a) = r(a)
//! Q_k(s, a)     = V_{k+1}(a)                  k < T - 1
//! V_k(s)        = sum_a pi_pre(a|s) Q_k(s, a)
//! V_T           = 0
//! ```
//!
//! and the tilted policy is `pi*(a|s) = pi_pre(a|s) exp(Q_k(s, a) / lambda) / Z(s)`.

// `!(x > 0.0)` is used on purpose: NaN must fail the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::diffusion::EpsilonModel;
use crate::error::{Error, Result};
use crate::gaussian::{GaussianPosterior, PreferenceWeights};
use crate::harness::RewardFn;
use crate::rng;
use crate::schedule::NoiseSchedule;

const ROW_TOL: f64 = 1e-12;

/// `T` row-stochastic `S x S` matrices, row-major; entry `[k][s * S + a]` is
/// the probability of moving from state `s` to state `a` at step `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTable {
    states: usize,
    steps: Vec<Vec<f64>>,
}

impl PolicyTable {
    pub fn new(states: usize, steps: Vec<Vec<f64>>) -> Result<Self> {
        if states == 0 || steps.is_empty() {
            return Err(Error::param(
                "policy",
                "needs at least one state and one step",
            ));
        }
        for (k, m) in steps.iter().enumerate() {
            if m.len() != states * states {
                return Err(Error::dim("policy step", states * states, m.len()));
            }
            for s in 0..states {
                let row = &m[s * states..(s + 1) * states];
                if row.iter().any(|p| !(*p >= 0.0 && p.is_finite())) {
                    return Err(Error::param(
                        "policy",
                        format!("negative or non-finite entry at step {k}, state {s}"),
                    ));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > ROW_TOL {
                    return Err(Error::param(
                        "policy",
                        format!("row (step {k}, state {s}) sums to {sum}"),
                    ));
                }
            }
        }
        Ok(PolicyTable { states, steps })
    }

    pub fn states(&self) -> usize {
        self.states
    }

    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    pub fn row(&self, k: usize, s: usize) -> &[f64] {
        &self.steps[k][s * self.states..(s + 1) * self.states]
    }

    pub fn step(&self, k: usize) -> &[f64] {
        &self.steps[k]
    }
}

/// `Q_k(s, a)` for every step and the state values `V_0..V_T`.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    states: usize,
    q: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl QTable {
    pub fn q(&self, k: usize, s: usize, a: usize) -> f64 {
        self.q[k][s * self.states + a]
    }

    pub fn q_row(&self, k: usize, s: usize) -> &[f64] {
        &self.q[k][s * self.states..(s + 1) * self.states]
    }

    pub fn v(&self, k: usize) -> &[f64] {
        &self.v[k]
    }

    pub fn advantage(&self, k: usize, s: usize, a: usize) -> f64 {
        self.q(k, s, a) - self.v[k][s]
    }

    pub fn horizon(&self) -> usize {
        self.q.len()
    }

    /// Adds `shift[k][s]` to every entry of row `(k, s)`. Values are left as is.
    pub fn with_row_shifts(&self, shift: &[Vec<f64>]) -> QTable {
        let mut out = self.clone();
        for (k, m) in out.q.iter_mut().enumerate() {
            for (s, row) in m.chunks_mut(self.states).enumerate() {
                for v in row {
                    *v += shift[k][s];
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMDP {
    grid: Vec<f64>,
    kernels: PolicyTable,
    rewards: Vec<Vec<f64>>,
    lambda: f64,
    initial: Vec<f64>,
}

/// Uniform grid of `states` points on `[-half_width, half_width]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    #[serde(rename = "S")]
    pub states: usize,
    #[serde(rename = "L")]
    pub half_width: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            states: 41,
            half_width: 3.0,
        }
    }
}

impl GridSpec {
    pub fn points(&self) -> Result<Vec<f64>> {
        if self.states < 2 {
            return Err(Error::param("S", "grid needs at least two states"));
        }
        if !(self.half_width > 0.0 && self.half_width.is_finite()) {
            return Err(Error::param(
                "L",
                format!("{} is not positive", self.half_width),
            ));
        }
        let step = 2.0 * self.half_width / (self.states - 1) as f64;
        Ok((0..self.states)
            .map(|i| -self.half_width + step * i as f64)
            .collect())
    }
}

/// Parameters of a random test instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomMdpSpec {
    #[serde(flatten)]
    pub grid: GridSpec,
    #[serde(rename = "T")]
    pub horizon: usize,
    #[serde(rename = "M")]
    pub rewards: usize,
    pub lambda: f64,
}

impl Default for RandomMdpSpec {
    fn default() -> Self {
        RandomMdpSpec {
            grid: GridSpec::default(),
            horizon: 4,
            rewards: 2,
            lambda: 0.1,
        }
    }
}

/// Row `s` holds the normalized Gaussian density `N(a; means[s], variance)`
/// over the grid points `a`. Fails if a row's unnormalized mass (density times
/// grid spacing) is below `1e-6`.
pub fn gaussian_kernel(grid: &[f64], means: &[f64], variance: f64) -> Result<Vec<f64>> {
    if !(variance > 0.0) {
        return Err(Error::param(
            "variance",
            format!("{variance} is not positive"),
        ));
    }
    let n = grid.len();
    let h = (grid[n - 1] - grid[0]) / (n - 1) as f64;
    let norm = 1.0 / (2.0 * std::f64::consts::PI * variance).sqrt();
    let mut out = Vec::with_capacity(n * means.len());
    for (s, &mu) in means.iter().enumerate() {
        let row: Vec<f64> = grid
            .iter()
            .map(|a| norm * (-(a - mu) * (a - mu) / (2.0 * variance)).exp())
            .collect();
        let total: f64 = row.iter().sum();
        if !(total * h >= 1e-6) {
            return Err(Error::param(
                "grid",
                format!(
                    "row {s} (mean {mu}) has mass {} on the grid; use a larger L or S",
                    total * h
                ),
            ));
        }
        out.extend(row.iter().map(|p| p / total));
    }
    Ok(out)
}

fn standard_normal_projection(grid: &[f64]) -> Vec<f64> {
    let w: Vec<f64> = grid.iter().map(|x| (-0.5 * x * x).exp()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

impl DiscreteMDP {
    pub fn new(
        grid: Vec<f64>,
        kernels: PolicyTable,
        rewards: Vec<Vec<f64>>,
        lambda: f64,
        initial: Vec<f64>,
    ) -> Result<Self> {
        if grid.len() != kernels.states() {
            return Err(Error::dim("mdp grid", kernels.states(), grid.len()));
        }
        if grid.windows(2).any(|p| !(p[1] > p[0])) {
            return Err(Error::param("grid", "must be strictly increasing"));
        }
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::param("lambda", format!("{lambda} is not positive")));
        }
        for r in &rewards {
            if r.len() != grid.len() {
                return Err(Error::dim("mdp reward", grid.len(), r.len()));
            }
        }
        if initial.len() != grid.len() {
            return Err(Error::dim(
                "initial distribution",
                grid.len(),
                initial.len(),
            ));
        }
        if initial.iter().any(|p| *p < 0.0) || (initial.iter().sum::<f64>() - 1.0).abs() > ROW_TOL {
            return Err(Error::param("initial", "not a probability vector"));
        }
        Ok(DiscreteMDP {
            grid,
            kernels,
            rewards,
            lambda,
            initial,
        })
    }

    /// A random instance: Gaussian-shaped kernels with random drift and width,
    /// a random positive texture on each row, and `spec.rewards` smooth
    /// rewards bounded in `[-1, 1]`.
    pub fn random(spec: &RandomMdpSpec, seed: u64) -> Result<Self> {
        if spec.horizon == 0 {
            return Err(Error::param("T", "must be at least 1"));
        }
        let grid = spec.grid.points()?;
        let l = spec.grid.half_width;
        let n = grid.len();
        let mut r = rng::stream(seed, 0);
        let mut steps = Vec::with_capacity(spec.horizon);
        for _ in 0..spec.horizon {
            let rho = r.random_range(0.5..1.0);
            let shift = r.random_range(-0.2..0.2) * l;
            let width = r.random_range(0.15..0.5) * l;
            let means: Vec<f64> = grid.iter().map(|x| rho * x + shift).collect();
            let mut m = gaussian_kernel(&grid, &means, width * width)?;
            for row in m.chunks_mut(n) {
                for p in row.iter_mut() {
                    *p *= r.random_range(0.5..1.5);
                }
                let total: f64 = row.iter().sum();
                for p in row.iter_mut() {
                    *p /= total;
                }
            }
            steps.push(m);
        }
        let rewards = (0..spec.rewards)
            .map(|_| random_reward(&grid, &mut r))
            .collect();
        let kernels = PolicyTable::new(n, steps)?;
        let initial = standard_normal_projection(&grid);
        Self::new(grid, kernels, rewards, spec.lambda, initial)
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn kernels(&self) -> &PolicyTable {
        &self.kernels
    }

    pub fn rewards(&self) -> &[Vec<f64>] {
        &self.rewards
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn initial(&self) -> &[f64] {
        &self.initial
    }

    pub fn states(&self) -> usize {
        self.grid.len()
    }

    pub fn horizon(&self) -> usize {
        self.kernels.horizon()
    }

    pub fn with_rewards(mut self, rewards: Vec<Vec<f64>>) -> Result<Self> {
        for r in &rewards {
            if r.len() != self.grid.len() {
                return Err(Error::dim("mdp reward", self.grid.len(), r.len()));
            }
        }
        self.rewards = rewards;
        Ok(self)
    }

    pub fn with_lambda(mut self, lambda: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::param("lambda", format!("{lambda} is not positive")));
        }
        self.lambda = lambda;
        Ok(self)
    }

    /// `sum_i w_i r_i`.
    pub fn weighted_reward(&self, w: &PreferenceWeights) -> Result<Vec<f64>> {
        if w.len() != self.rewards.len() {
            return Err(Error::dim("reward weights", self.rewards.len(), w.len()));
        }
        let mut out = vec![0.0; self.states()];
        for (r, wi) in self.rewards.iter().zip(w.as_slice()) {
            for (o, v) in out.iter_mut().zip(r) {
                *o += wi * v;
            }
        }
        Ok(out)
    }

    pub fn reward(&self, index: usize) -> Result<&[f64]> {
        self.rewards
            .get(index)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::param("reward", format!("index {index} out of range")))
    }
}

fn random_reward(grid: &[f64], r: &mut rng::Rng) -> Vec<f64> {
    let terms: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                r.random_range(-1.0..1.0),
                r.random_range(0.3..2.0),
                r.random_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let scale: f64 = terms.iter().map(|t| t.0.abs()).sum::<f64>().max(1e-12);
    grid.iter()
        .map(|x| {
            terms
                .iter()
                .map(|(a, f, p)| a * (f * x + p).sin())
                .sum::<f64>()
                / scale
        })
        .collect()
}

/// Projects a one-dimensional model's reverse chain onto the grid. Step `k`
/// uses the reverse posterior at `t = T - k`; the last step (`t = 1`) uses the
/// variance `eta^2 beta_1` because the sampler's own final variance is a
/// numerical floor that no grid can resolve.
pub fn discretize_pretrained(model: &EpsilonModel, grid_spec: GridSpec) -> Result<DiscreteMDP> {
    if model.data_dim() != 1 {
        return Err(Error::dim(
            "discretized model dimension",
            1,
            model.data_dim(),
        ));
    }
    let grid = grid_spec.points()?;
    let steps_t = model.schedule().steps();
    let mut steps = Vec::with_capacity(steps_t);
    for k in 0..steps_t {
        let t = steps_t - k;
        let tr = model.schedule().transition(t, t - 1)?;
        let means = model.reverse_means(&grid, &tr)?;
        let variance = if t == 1 {
            model.eta() * model.eta() * tr.beta
        } else {
            model.posterior_variance(&tr)
        };
        steps.push(gaussian_kernel(&grid, &means, variance)?);
    }
    let kernels = PolicyTable::new(grid.len(), steps)?;
    let initial = standard_normal_projection(&grid);
    DiscreteMDP::new(grid, kernels, Vec::new(), 0.1, initial)
}

/// Exact backward induction of `Q` and `V` under `pi_pre` for `reward`.
pub fn q_backward(mdp: &DiscreteMDP, reward: &[f64]) -> Result<QTable> {
    let n = mdp.states();
    if reward.len() != n {
        return Err(Error::dim("reward vector", n, reward.len()));
    }
    let horizon = mdp.horizon();
    let mut q = vec![Vec::new(); horizon];
    let mut v = vec![vec![0.0; n]; horizon + 1];
    for k in (0..horizon).rev() {
        let next: &[f64] = if k + 1 == horizon { reward } else { &v[k + 1] };
        let mut qk = Vec::with_capacity(n * n);
        for _ in 0..n {
            qk.extend_from_slice(next);
        }
        let kernel = mdp.kernels.step(k);
        let vk: Vec<f64> = (0..n)
            .map(|s| {
                kernel[s * n..(s + 1) * n]
                    .iter()
                    .zip(&qk[s * n..(s + 1) * n])
                    .map(|(p, q)| p * q)
                    .sum()
            })
            .collect();
        q[k] = qk;
        v[k] = vk;
    }
    Ok(QTable { states: n, q, v })
}

/// `pi_pre(a|s) exp(Q(s, a) / lambda) / Z(s)` with per-row max subtraction.
pub fn optimal_policy(mdp: &DiscreteMDP, q: &QTable) -> Result<PolicyTable> {
    let n = mdp.states();
    if q.states != n || q.horizon() != mdp.horizon() {
        return Err(Error::Mismatch("Q table does not match the mdp".into()));
    }
    let lambda = mdp.lambda;
    let mut steps = Vec::with_capacity(mdp.horizon());
    for k in 0..mdp.horizon() {
        let mut m = Vec::with_capacity(n * n);
        for s in 0..n {
            let pre = mdp.kernels.row(k, s);
            let qr = q.q_row(k, s);
            let top = pre
                .iter()
                .zip(qr)
                .filter(|(p, _)| **p > 0.0)
                .map(|(_, q)| q / lambda)
                .fold(f64::NEG_INFINITY, f64::max);
            let row: Vec<f64> = pre
                .iter()
                .zip(qr)
                .map(|(p, q)| {
                    if *p > 0.0 {
                        p * (q / lambda - top).exp()
                    } else {
                        0.0
                    }
                })
                .collect();
            let z: f64 = row.iter().sum();
            if !(z > 0.0 && z.is_finite()) {
                return Err(Error::NonFinite {
                    context: "optimal policy",
                    detail: format!("normalizer {z} at step {k}, state {s}"),
                });
            }
            m.extend(row.iter().map(|v| v / z));
        }
        steps.push(m);
    }
    PolicyTable::new(n, steps)
}

/// Row-wise normalized `prod_i pi_i^{w_i}`, computed in log space. Entries
/// where a contributing policy is zero are zero.
pub fn fuse_policies(policies: &[PolicyTable], w: &PreferenceWeights) -> Result<PolicyTable> {
    let Some(first) = policies.first() else {
        return Err(Error::param("policies", "nothing to fuse"));
    };
    if w.len() != policies.len() {
        return Err(Error::dim("policy weights", policies.len(), w.len()));
    }
    let (n, horizon) = (first.states(), first.horizon());
    if policies
        .iter()
        .any(|p| p.states() != n || p.horizon() != horizon)
    {
        return Err(Error::Mismatch("policies have different shapes".into()));
    }
    let active: Vec<usize> = w.support().collect();
    let mut steps = Vec::with_capacity(horizon);
    let mut logs = vec![0.0; n];
    for k in 0..horizon {
        let mut m = Vec::with_capacity(n * n);
        for s in 0..n {
            for (a, l) in logs.iter_mut().enumerate() {
                let mut acc = 0.0;
                for &i in &active {
                    let p = policies[i].row(k, s)[a];
                    if p == 0.0 {
                        acc = f64::NEG_INFINITY;
                        break;
                    }
                    acc += w.as_slice()[i] * p.ln();
                }
                *l = acc;
            }
            let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if top == f64::NEG_INFINITY {
                return Err(Error::param(
                    "policies",
                    format!("fused row at step {k}, state {s} has no mass"),
                ));
            }
            let row: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
            let z: f64 = row.iter().sum();
            m.extend(row.iter().map(|v| v / z));
        }
        steps.push(m);
    }
    PolicyTable::new(n, steps)
}

fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Theorem1Report {
    pub max_tv: f64,
    pub argmax_t: usize,
    pub argmax_s: usize,
}

/// Largest total-variation distance between a fused policy and a reference
/// policy, with the `(step, state)` where it occurs.
pub fn max_tv(a: &PolicyTable, b: &PolicyTable) -> Result<Theorem1Report> {
    if a.states() != b.states() || a.horizon() != b.horizon() {
        return Err(Error::Mismatch("policies have different shapes".into()));
    }
    let mut rep = Theorem1Report {
        max_tv: 0.0,
        argmax_t: 0,
        argmax_s: 0,
    };
    for k in 0..a.horizon() {
        for s in 0..a.states() {
            let tv = total_variation(a.row(k, s), b.row(k, s));
            if tv > rep.max_tv {
                rep = Theorem1Report {
                    max_tv: tv,
                    argmax_t: k,
                    argmax_s: s,
                };
            }
        }
    }
    Ok(rep)
}

/// Fuses the per-reward tilted policies with `w` and compares them with the
/// policy tilted directly by `sum_i w_i r_i`.
pub fn verify_theorem1(mdp: &DiscreteMDP, w: &PreferenceWeights) -> Result<Theorem1Report> {
    if mdp.rewards.len() < 2 {
        return Err(Error::param("rewards", "need at least two rewards"));
    }
    let singles = mdp
        .rewards
        .iter()
        .map(|r| optimal_policy(mdp, &q_backward(mdp, r)?))
        .collect::<Result<Vec<_>>>()?;
    let direct = optimal_policy(mdp, &q_backward(mdp, &mdp.weighted_reward(w)?)?)?;
    let fused = fuse_policies(&singles, w)?;
    max_tv(&fused, &direct)
}

/// `max |Q^w - sum_i w_i Q^i|` over all steps and entries.
pub fn q_additivity_check(mdp: &DiscreteMDP, w: &PreferenceWeights) -> Result<f64> {
    let singles = mdp
        .rewards
        .iter()
        .map(|r| q_backward(mdp, r))
        .collect::<Result<Vec<_>>>()?;
    let combined = q_backward(mdp, &mdp.weighted_reward(w)?)?;
    let mut worst: f64 = 0.0;
    for k in 0..mdp.horizon() {
        for (idx, qw) in combined.q[k].iter().enumerate() {
            let sum: f64 = singles
                .iter()
                .zip(w.as_slice())
                .map(|(q, wi)| wi * q.q[k][idx])
                .sum();
            worst = worst.max((qw - sum).abs());
        }
    }
    Ok(worst)
}

fn sample_index(p: &[f64], r: &mut rng::Rng) -> usize {
    let u: f64 = r.random();
    let mut acc = 0.0;
    for (i, v) in p.iter().enumerate() {
        acc += v;
        if u < acc {
            return i;
        }
    }
    p.iter().rposition(|v| *v > 0.0).unwrap_or(p.len() - 1)
}

/// One trajectory under `pi_pre`: the start state and the `T` actions.
pub fn rollout(mdp: &DiscreteMDP, r: &mut rng::Rng) -> (usize, Vec<usize>) {
    let s0 = sample_index(&mdp.initial, r);
    let mut s = s0;
    let mut actions = Vec::with_capacity(mdp.horizon());
    for k in 0..mdp.horizon() {
        let a = sample_index(mdp.kernels.row(k, s), r);
        actions.push(a);
        s = a;
    }
    (s0, actions)
}

/// Largest `|r(a_{T-1}) - V_0(s_0) - sum_k A_k(s_k, a_k)|` over
/// `n_trajectories` rollouts under `pi_pre`; rollout `j` uses stream `j`.
pub fn reward_decomposition_check(
    mdp: &DiscreteMDP,
    reward: &[f64],
    n_trajectories: usize,
    seed: u64,
) -> Result<f64> {
    let q = q_backward(mdp, reward)?;
    let mut worst: f64 = 0.0;
    for j in 0..n_trajectories {
        let mut r = rng::stream(seed, j as u64);
        let (s0, actions) = rollout(mdp, &mut r);
        let mut s = s0;
        let mut rhs = q.v[0][s0];
        for (k, &a) in actions.iter().enumerate() {
            rhs += q.advantage(k, s, a);
            s = a;
        }
        let lhs = reward[*actions.last().expect("horizon is at least one")];
        worst = worst.max((lhs - rhs).abs());
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ObjectiveValues {
    /// `E[r(s_T)]` under the policy.
    pub expected_reward: f64,
    /// The step-level surrogate: `E_{d_0}[V_0]` plus, under the `pi_pre`
    /// state visitation, the per-step expected advantage minus `lambda` times
    /// the per-step KL to `pi_pre`.
    pub stepkl_objective: f64,
    /// `E[r] - lambda * sum_k E_{s ~ d_k^pi}[KL(pi(.|s) || pi_pre(.|s))]`.
    pub trajectory_objective: f64,
}

fn propagate(d: &[f64], kernel: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for (s, ds) in d.iter().enumerate() {
        if *ds == 0.0 {
            continue;
        }
        for (o, p) in out.iter_mut().zip(&kernel[s * n..(s + 1) * n]) {
            *o += ds * p;
        }
    }
    out
}

fn kl_rows(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| {
            if *b > 0.0 {
                a * (a / b).ln()
            } else {
                f64::INFINITY
            }
        })
        .sum()
}

pub fn objective_values(
    mdp: &DiscreteMDP,
    policy: &PolicyTable,
    reward: &[f64],
) -> Result<ObjectiveValues> {
    let n = mdp.states();
    if policy.states() != n || policy.horizon() != mdp.horizon() {
        return Err(Error::Mismatch("policy does not match the mdp".into()));
    }
    let q = q_backward(mdp, reward)?;
    let lambda = mdp.lambda;

    let mut d_pi = mdp.initial.clone();
    let mut d_pre = mdp.initial.clone();
    let mut traj_kl = 0.0;
    let mut surrogate: f64 = mdp.initial.iter().zip(&q.v[0]).map(|(d, v)| d * v).sum();
    for k in 0..mdp.horizon() {
        for s in 0..n {
            let (pi, pre) = (policy.row(k, s), mdp.kernels.row(k, s));
            let kl = kl_rows(pi, pre);
            if d_pi[s] > 0.0 {
                traj_kl += d_pi[s] * kl;
            }
            if d_pre[s] > 0.0 {
                let adv: f64 = pi
                    .iter()
                    .enumerate()
                    .map(|(a, p)| p * q.advantage(k, s, a))
                    .sum();
                surrogate += d_pre[s] * (adv - lambda * kl);
            }
        }
        d_pi = propagate(&d_pi, policy.step(k), n);
        d_pre = propagate(&d_pre, mdp.kernels.step(k), n);
    }
    let expected_reward: f64 = d_pi.iter().zip(reward).map(|(d, r)| d * r).sum();
    Ok(ObjectiveValues {
        expected_reward,
        stepkl_objective: surrogate,
        trajectory_objective: expected_reward - lambda * traj_kl,
    })
}

/// One-dimensional Gaussian data `N(mean, variance)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianData {
    pub mean: f64,
    pub variance: f64,
}

/// The exact reverse conditional `q(x_{t-1} | x_t)` of the forward chain
/// started from Gaussian data.
pub fn exact_reverse_posterior(
    data: GaussianData,
    schedule: &NoiseSchedule,
    t: usize,
    x_t: f64,
) -> Result<GaussianPosterior> {
    if !(data.variance > 0.0) {
        return Err(Error::param(
            "variance",
            format!("{} is not positive", data.variance),
        ));
    }
    let ab_prev = schedule.alpha_bar_or_one(t - 1)?;
    let alpha = schedule.alpha(t)?;
    let beta = schedule.beta(t)?;
    let v_prev = ab_prev * data.variance + 1.0 - ab_prev;
    let precision = 1.0 / v_prev + alpha / beta;
    let var = 1.0 / precision;
    let mean = var * (ab_prev.sqrt() * data.mean / v_prev + alpha.sqrt() * x_t / beta);
    GaussianPosterior::new(vec![mean], var)
}

/// The exact reverse conditional tilted by `exp(Q(z) / lambda)` with
/// `Q(z) = E[r(x_0) | x_{t-1} = z]` for a linear reward `r(x) = c x`.
///
/// `x_0 | x_{t-1}` is Gaussian with mean affine in `x_{t-1}`, slope
/// `sqrt(abar_{t-1}) s^2 / v_{t-1}` where `v_{t-1} = abar_{t-1} s^2 + 1 - abar_{t-1}`,
/// so the tilt is log-linear: the mean moves by `variance * c * slope / lambda`
/// and the variance is unchanged.
pub fn analytic_tilted_posterior(
    data: GaussianData,
    schedule: &NoiseSchedule,
    reward: &RewardFn,
    lambda: f64,
    t: usize,
    x_t: f64,
) -> Result<GaussianPosterior> {
    let c = reward
        .linear_coefficients(1)
        .ok_or_else(|| Error::param("reward", "the analytic tilt needs a linear reward"))?[0];
    if !(lambda > 0.0) {
        return Err(Error::param("lambda", format!("{lambda} is not positive")));
    }
    let base = exact_reverse_posterior(data, schedule, t, x_t)?;
    let ab_prev = schedule.alpha_bar_or_one(t - 1)?;
    let v_prev = ab_prev * data.variance + 1.0 - ab_prev;
    let slope = c * ab_prev.sqrt() * data.variance / v_prev;
    let mean = base.mean()[0] + base.variance() * slope / lambda;
    GaussianPosterior::new(vec![mean], base.variance())
}

const QUAD_NODES: usize = 801;
const QUAD_HALF_WIDTH: f64 = 12.0;

/// Uniform nodes over `center +- QUAD_HALF_WIDTH * sd`.
fn quad_nodes(center: f64, sd: f64, n: usize) -> Vec<f64> {
    let h = 2.0 * QUAD_HALF_WIDTH * sd / (n - 1) as f64;
    (0..n)
        .map(|i| center - QUAD_HALF_WIDTH * sd + i as f64 * h)
        .collect()
}

/// Normalized weights from log weights.
fn softmax(logs: &[f64]) -> Vec<f64> {
    let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

fn moments(xs: &[f64], p: &[f64]) -> (f64, f64) {
    let mean: f64 = xs.iter().zip(p).map(|(x, p)| x * p).sum();
    let var: f64 = xs
        .iter()
        .zip(p)
        .map(|(x, p)| (x - mean) * (x - mean) * p)
        .sum();
    (mean, var)
}

/// `E[r(x_0) | x_{t-1} = z]` by quadrature over `x_0`.
fn q_by_quadrature(data: GaussianData, ab_prev: f64, reward: &RewardFn, z: f64) -> Result<f64> {
    if ab_prev >= 1.0 {
        return reward.eval(&[z]);
    }
    let noise = 1.0 - ab_prev;
    let precision = 1.0 / data.variance + ab_prev / noise;
    let center = (data.mean / data.variance + ab_prev.sqrt() * z / noise) / precision;
    let xs = quad_nodes(center, precision.sqrt().recip(), QUAD_NODES);
    let logs: Vec<f64> = xs
        .iter()
        .map(|x| {
            let u = z - ab_prev.sqrt() * x;
            -(x - data.mean).powi(2) / (2.0 * data.variance) - u * u / (2.0 * noise)
        })
        .collect();
    let p = softmax(&logs);
    let mut q = 0.0;
    for (x, p) in xs.iter().zip(&p) {
        q += p * reward.eval(&[*x])?;
    }
    Ok(q)
}

/// Mean and variance of `q(x_{t-1} | x_t) exp(Q(x_{t-1}) / lambda)` by nested
/// quadrature, for any one-dimensional reward. The reverse conditional is
/// built from `q(x_{t-1}) q(x_t | x_{t-1})` on the grid, and `Q` by an inner
/// quadrature over `x_0 | x_{t-1}`.
pub fn tilted_posterior_quadrature(
    data: GaussianData,
    schedule: &NoiseSchedule,
    reward: &RewardFn,
    lambda: f64,
    t: usize,
    x_t: f64,
) -> Result<(f64, f64)> {
    if !(lambda > 0.0) {
        return Err(Error::param("lambda", format!("{lambda} is not positive")));
    }
    let base = exact_reverse_posterior(data, schedule, t, x_t)?;
    let ab_prev = schedule.alpha_bar_or_one(t - 1)?;
    let alpha = schedule.alpha(t)?;
    let beta = schedule.beta(t)?;
    let v_prev = ab_prev * data.variance + 1.0 - ab_prev;
    let m_prev = ab_prev.sqrt() * data.mean;

    let (mut center, mut sd) = (base.mean()[0], base.variance().sqrt());
    let mut out = (center, sd * sd);
    // The tilt can move the mass several widths; re-centre on the estimate.
    for _ in 0..4 {
        let zs = quad_nodes(center, sd, QUAD_NODES);
        let mut logs = Vec::with_capacity(zs.len());
        for &z in &zs {
            let u = x_t - alpha.sqrt() * z;
            let log_pre = -(z - m_prev).powi(2) / (2.0 * v_prev) - u * u / (2.0 * beta);
            logs.push(log_pre + q_by_quadrature(data, ab_prev, reward, z)? / lambda);
        }
        out = moments(&zs, &softmax(&logs));
        if !(out.0.is_finite() && out.1 > 0.0) {
            return Err(Error::NonFinite {
                context: "tilted quadrature",
                detail: format!("moments {out:?}"),
            });
        }
        let moved = (out.0 - center).abs() / sd;
        center = out.0;
        sd = out.1.sqrt();
        if moved < 1e-3 {
            break;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, MlpArchitecture, MlpParams};
    use crate::schedule::ScheduleSpec;

    fn small(seed: u64) -> DiscreteMDP {
        let spec = RandomMdpSpec {
            grid: GridSpec {
                states: 9,
                half_width: 2.0,
            },
            horizon: 3,
            rewards: 2,
            lambda: 0.2,
        };
        DiscreteMDP::random(&spec, seed).unwrap()
    }

    #[test]
    fn kernel_limits() {
        let grid = GridSpec::default().points().unwrap();
        let flat = gaussian_kernel(&grid, &[0.0, 1.0], 1e8).unwrap();
        assert!(flat.iter().all(|p| (p - 1.0 / 41.0).abs() < 1e-3));
        let sharp = gaussian_kernel(&grid, &[grid[7]], 1e-6).unwrap();
        for (a, p) in sharp.iter().enumerate() {
            let want = if a == 7 { 1.0 } else { 0.0 };
            assert!((p - want).abs() < 1e-6);
        }
        let err = gaussian_kernel(&grid, &[50.0], 0.01).unwrap_err();
        assert!(err.to_string().contains("larger L or S"));
    }

    #[test]
    fn discretized_rows_are_stochastic() {
        let arch = MlpArchitecture {
            data_dim: 1,
            t_embed_dim: 2,
            hidden: vec![4],
            activation: Activation::Tanh,
        };
        let m = EpsilonModel::new(
            MlpParams::zeros(arch).unwrap(),
            ScheduleSpec::linear(4, 0.05, 0.3),
            1.0,
        )
        .unwrap();
        let mdp = discretize_pretrained(&m, GridSpec::default()).unwrap();
        assert_eq!(mdp.horizon(), 4);
        for k in 0..4 {
            for s in 0..41 {
                assert!((mdp.kernels().row(k, s).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_step_q_is_reward() {
        let spec = RandomMdpSpec {
            horizon: 1,
            ..Default::default()
        };
        let mdp = DiscreteMDP::random(&spec, 3).unwrap();
        let q = q_backward(&mdp, &mdp.rewards()[0]).unwrap();
        for s in 0..mdp.states() {
            assert_eq!(q.q_row(0, s), mdp.rewards()[0].as_slice());
        }
    }

    #[test]
    fn constant_reward_propagates() {
        let mdp = small(1);
        let q = q_backward(&mdp, &[0.25; 9]).unwrap();
        for k in 0..3 {
            for s in 0..9 {
                for a in 0..9 {
                    assert!((q.q(k, s, a) - 0.25).abs() < 1e-15);
                    assert!(q.advantage(k, s, a).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn advantages_average_to_zero() {
        let mdp = small(2);
        let q = q_backward(&mdp, &mdp.rewards()[1]).unwrap();
        for k in 0..3 {
            for s in 0..9 {
                let avg: f64 = (0..9)
                    .map(|a| mdp.kernels().row(k, s)[a] * q.advantage(k, s, a))
                    .sum();
                assert!(avg.abs() < 1e-12);
            }
        }
        assert_eq!(q.v(3), &[0.0; 9]);
    }

    #[test]
    fn huge_lambda_keeps_reference() {
        let mdp = small(3).with_lambda(1e9).unwrap();
        let pi = optimal_policy(&mdp, &q_backward(&mdp, &mdp.rewards()[0]).unwrap()).unwrap();
        for k in 0..3 {
            for (a, b) in pi.step(k).iter().zip(mdp.kernels().step(k)) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn fuse_policy_identities() {
        let mdp = small(4);
        let pi = optimal_policy(&mdp, &q_backward(&mdp, &mdp.rewards()[0]).unwrap()).unwrap();
        let one = fuse_policies(
            std::slice::from_ref(&pi),
            &PreferenceWeights::new(vec![1.0]).unwrap(),
        )
        .unwrap();
        assert!(max_tv(&one, &pi).unwrap().max_tv < 1e-15);
        let two = fuse_policies(
            &[pi.clone(), pi.clone()],
            &PreferenceWeights::pair(0.3).unwrap(),
        )
        .unwrap();
        assert!(max_tv(&two, &pi).unwrap().max_tv < 1e-15);
    }

    #[test]
    fn theorem1_on_small_instances() {
        for seed in 0..5 {
            let mdp = small(seed);
            let rep = verify_theorem1(&mdp, &PreferenceWeights::pair(0.35).unwrap()).unwrap();
            assert!(rep.max_tv <= 1e-10, "{rep:?}");
            assert!(
                q_additivity_check(&mdp, &PreferenceWeights::pair(0.35).unwrap()).unwrap() <= 1e-12
            );
        }
    }

    #[test]
    fn decomposition_single_step() {
        let spec = RandomMdpSpec {
            horizon: 1,
            ..Default::default()
        };
        let mdp = DiscreteMDP::random(&spec, 5).unwrap();
        assert!(reward_decomposition_check(&mdp, &mdp.rewards()[0], 200, 1).unwrap() <= 1e-12);
        assert_eq!(
            reward_decomposition_check(&mdp, &vec![0.5; 41], 50, 1).unwrap(),
            0.0
        );
    }

    #[test]
    fn objective_of_reference_policy() {
        let mdp = small(6);
        let r = &mdp.rewards()[0];
        let vals = objective_values(&mdp, mdp.kernels(), r).unwrap();
        assert!((vals.stepkl_objective - vals.expected_reward).abs() < 1e-12);
        assert!((vals.trajectory_objective - vals.expected_reward).abs() < 1e-15);
    }

    #[test]
    fn analytic_without_reward_is_exact_posterior() {
        let s = ScheduleSpec::linear(10, 0.01, 0.2).build().unwrap();
        let data = GaussianData {
            mean: 0.5,
            variance: 2.0,
        };
        let zero = RewardFn::Linear { coef: vec![0.0] };
        let a = analytic_tilted_posterior(data, &s, &zero, 0.1, 4, 0.3).unwrap();
        assert_eq!(a, exact_reverse_posterior(data, &s, 4, 0.3).unwrap());
        let c = RewardFn::axis(0);
        let big = analytic_tilted_posterior(data, &s, &c, 1e12, 4, 0.3).unwrap();
        assert!((big.mean()[0] - a.mean()[0]).abs() < 1e-12);
        assert!(analytic_tilted_posterior(
            data,
            &s,
            &RewardFn::Radial { target: vec![0.0] },
            0.1,
            4,
            0.3
        )
        .is_err());
    }
}
