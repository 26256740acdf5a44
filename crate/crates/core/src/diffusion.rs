//! Forward noising, reverse posteriors, DDPM pretraining and ancestral sampling.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::GaussianPosterior;
use crate::nn::{self, Adam, Checkpoint, MlpArchitecture, MlpParams, Tape};
use crate::rng;
use crate::schedule::{NoiseSchedule, ScheduleSpec, Transition};

/// Variance assigned to the degenerate final step (`beta_tilde_1 = 0`) and
/// the smallest variance any reverse posterior may report.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Samples processed together by one worker. Fixed so that results never
/// depend on the thread count.
const CHUNK: usize = 128;

/// A noise-prediction network together with the schedule it was trained on and
/// the denoising-variance factor `eta` (posterior variance `eta^2 * beta_tilde`).
pub struct EpsilonModel {
    params: MlpParams,
    schedule: NoiseSchedule,
    eta: f64,
    rows_evaluated: AtomicU64,
}

impl Clone for EpsilonModel {
    fn clone(&self) -> Self {
        EpsilonModel {
            params: self.params.clone(),
            schedule: self.schedule.clone(),
            eta: self.eta,
            rows_evaluated: AtomicU64::new(0),
        }
    }
}

impl PartialEq for EpsilonModel {
    fn eq(&self, other: &Self) -> bool {
        self.params == other.params
            && self.schedule.spec() == other.schedule.spec()
            && self.eta == other.eta
    }
}

impl fmt::Debug for EpsilonModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EpsilonModel")
            .field("arch", self.params.arch())
            .field("schedule", self.schedule.spec())
            .field("eta", &self.eta)
            .finish_non_exhaustive()
    }
}

impl EpsilonModel {
    pub fn new(params: MlpParams, schedule: ScheduleSpec, eta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::param("eta", format!("{eta} not in [0, 1]")));
        }
        Ok(EpsilonModel {
            params,
            schedule: schedule.build()?,
            eta,
            rows_evaluated: AtomicU64::new(0),
        })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        Self::new(ck.params, ck.schedule, ck.eta)
    }

    pub fn to_checkpoint(&self, meta: BTreeMap<String, String>) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            schedule: *self.schedule.spec(),
            eta: self.eta,
            meta,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(nn::load_checkpoint(path)?)
    }

    pub fn params(&self) -> &MlpParams {
        &self.params
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn with_eta(&self, eta: f64) -> Result<Self> {
        Self::new(self.params.clone(), *self.schedule.spec(), eta)
    }

    pub fn data_dim(&self) -> usize {
        self.params.arch().data_dim
    }

    /// Number of input rows this model has evaluated since construction.
    pub fn forward_count(&self) -> u64 {
        self.rows_evaluated.load(Ordering::Relaxed)
    }

    /// `eps(x_t, t)` for a flat batch of rows.
    pub fn predict_batch(&self, xs: &[f64], t: usize) -> Result<Vec<f64>> {
        let d = self.data_dim();
        self.rows_evaluated
            .fetch_add((xs.len() / d) as u64, Ordering::Relaxed);
        nn::forward_batch(&self.params, xs, t, self.schedule.steps())
    }

    pub fn predict(&self, x_t: &[f64], t: usize) -> Result<Vec<f64>> {
        if x_t.len() != self.data_dim() {
            return Err(Error::dim("predict", self.data_dim(), x_t.len()));
        }
        self.predict_batch(x_t, t)
    }

    /// Reverse-posterior variance for the transition `t -> t_prev`.
    pub fn posterior_variance(&self, tr: &Transition) -> f64 {
        if tr.t_prev == 0 {
            VARIANCE_FLOOR
        } else {
            (self.eta * self.eta * tr.beta_tilde).max(VARIANCE_FLOOR)
        }
    }

    /// Reverse means for a flat batch of rows over the transition `tr`.
    pub fn reverse_means(&self, xs: &[f64], tr: &Transition) -> Result<Vec<f64>> {
        let eps = self.predict_batch(xs, tr.t)?;
        Ok(posterior_mean_from_eps(xs, &eps, tr))
    }

    pub fn reverse_posterior_between(
        &self,
        x_t: &[f64],
        t: usize,
        t_prev: usize,
    ) -> Result<GaussianPosterior> {
        if x_t.len() != self.data_dim() {
            return Err(Error::dim("reverse_posterior", self.data_dim(), x_t.len()));
        }
        let tr = self.schedule.transition(t, t_prev)?;
        GaussianPosterior::new(self.reverse_means(x_t, &tr)?, self.posterior_variance(&tr))
    }

    /// `p(x_{t-1} | x_t)`; at `t = 1` the variance is [`VARIANCE_FLOOR`].
    pub fn reverse_posterior(&self, x_t: &[f64], t: usize) -> Result<GaussianPosterior> {
        self.reverse_posterior_between(x_t, t, t.saturating_sub(1))
    }
}

/// `(x_t - beta / sqrt(1 - alpha_bar_t) * eps) / sqrt(alpha)` row by row.
pub(crate) fn posterior_mean_from_eps(xs: &[f64], eps: &[f64], tr: &Transition) -> Vec<f64> {
    let coef = tr.beta / (1.0 - tr.alpha_bar).sqrt();
    let inv_sqrt_alpha = 1.0 / tr.alpha.sqrt();
    xs.iter()
        .zip(eps)
        .map(|(x, e)| inv_sqrt_alpha * (x - coef * e))
        .collect()
}

/// `x_t = sqrt(alpha_bar_t) x_0 + sqrt(1 - alpha_bar_t) noise`.
pub fn forward_sample(
    schedule: &NoiseSchedule,
    x0: &[f64],
    t: usize,
    noise: &[f64],
) -> Result<Vec<f64>> {
    if x0.len() != noise.len() {
        return Err(Error::dim("forward_sample noise", x0.len(), noise.len()));
    }
    let ab = schedule.alpha_bar(t)?;
    Ok(forward_with_alpha_bar(ab, x0, noise))
}

pub(crate) fn forward_with_alpha_bar(alpha_bar: f64, x0: &[f64], noise: &[f64]) -> Vec<f64> {
    let a = alpha_bar.sqrt();
    let b = (1.0 - alpha_bar).sqrt();
    x0.iter().zip(noise).map(|(x, e)| a * x + b * e).collect()
}

pub fn reverse_mean(model: &EpsilonModel, x_t: &[f64], t: usize) -> Result<Vec<f64>> {
    Ok(model.reverse_posterior(x_t, t)?.into_mean())
}

pub fn reverse_posterior(model: &EpsilonModel, x_t: &[f64], t: usize) -> Result<GaussianPosterior> {
    model.reverse_posterior(x_t, t)
}

// ---------------------------------------------------------------------------
// Datasets

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    /// Eight Gaussians (std `0.1 * scale`) on a circle of radius `2 * scale`.
    Ring8,
    /// A standard Gaussian scaled by `scale`, in `dim` dimensions.
    Gauss1,
    /// Points read from `path`.
    CustomFile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    #[serde(default = "default_dataset_n")]
    pub n: usize,
    /// Set by the caller; not part of the serialized form.
    #[serde(skip)]
    pub seed: u64,
    #[serde(default = "default_scale")]
    pub scale: f64,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

fn default_dataset_n() -> usize {
    8192
}
fn default_scale() -> f64 {
    1.0
}
fn default_dim() -> usize {
    2
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            kind: DatasetKind::Ring8,
            n: default_dataset_n(),
            seed: 0,
            scale: 1.0,
            dim: 2,
            path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset2D {
    pub points: Vec<Vec<f64>>,
    pub spec: DatasetSpec,
}

pub const RING8_RADIUS: f64 = 2.0;
pub const RING8_STD: f64 = 0.1;

pub fn ring8_centers(scale: f64) -> Vec<[f64; 2]> {
    (0..8)
        .map(|k| {
            let a = 2.0 * std::f64::consts::PI * k as f64 / 8.0;
            [
                RING8_RADIUS * scale * a.cos(),
                RING8_RADIUS * scale * a.sin(),
            ]
        })
        .collect()
}

impl Dataset2D {
    pub fn generate(spec: &DatasetSpec) -> Result<Self> {
        let points = match spec.kind {
            DatasetKind::CustomFile => {
                let path = spec
                    .path
                    .as_ref()
                    .ok_or_else(|| Error::param("path", "custom-file dataset needs a path"))?;
                read_points_csv(path)?
            }
            DatasetKind::Ring8 | DatasetKind::Gauss1 => {
                if spec.n == 0 {
                    return Err(Error::param("n", "dataset needs at least one point"));
                }
                if !(spec.scale > 0.0 && spec.scale.is_finite()) {
                    return Err(Error::param(
                        "scale",
                        format!("{} is not positive", spec.scale),
                    ));
                }
                let mut r = rng::stream(spec.seed, 0);
                if spec.kind == DatasetKind::Ring8 {
                    let centers = ring8_centers(spec.scale);
                    (0..spec.n)
                        .map(|_| {
                            let c = centers[r.random_range(0..8)];
                            let e = rng::normal_vec(&mut r, 2);
                            vec![
                                c[0] + RING8_STD * spec.scale * e[0],
                                c[1] + RING8_STD * spec.scale * e[1],
                            ]
                        })
                        .collect()
                } else {
                    if spec.dim == 0 {
                        return Err(Error::param("dim", "must be positive"));
                    }
                    (0..spec.n)
                        .map(|_| {
                            rng::normal_vec(&mut r, spec.dim)
                                .into_iter()
                                .map(|x| spec.scale * x)
                                .collect()
                        })
                        .collect()
                }
            }
        };
        Self::from_points(points, spec.clone())
    }

    pub fn from_points(points: Vec<Vec<f64>>, spec: DatasetSpec) -> Result<Self> {
        let Some(first) = points.first() else {
            return Err(Error::param("n", "dataset needs at least one point"));
        };
        let d = first.len();
        for p in &points {
            if p.len() != d {
                return Err(Error::dim("dataset point", d, p.len()));
            }
            if p.iter().any(|x| !x.is_finite()) {
                return Err(Error::param(
                    "points",
                    "dataset contains a non-finite value",
                ));
            }
        }
        Ok(Dataset2D { points, spec })
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }
}

/// Reads one point per line, comma-separated, no header.
pub fn read_points_csv(path: impl AsRef<Path>) -> Result<Vec<Vec<f64>>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_points_csv(&text)
}

pub fn parse_points_csv(text: &str) -> Result<Vec<Vec<f64>>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            line.split(',')
                .map(|f| {
                    f.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::format("points csv", format!("line {}: {e}", i + 1)))
                })
                .collect()
        })
        .collect()
}

pub fn format_points_csv(points: &[Vec<f64>]) -> String {
    let mut out = String::new();
    for p in points {
        let row: Vec<String> = p.iter().map(|x| x.to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn write_points_csv(path: impl AsRef<Path>, points: &[Vec<f64>]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_points_csv(points)).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Pretraining

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    /// Set by the caller; not part of the serialized form.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 20_000,
            lr: 1e-3,
            batch: 256,
            seed: 0,
        }
    }
}

/// Loss averaged over each logging window of 100 steps.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTrace {
    pub points: Vec<(usize, f64)>,
}

impl LossTrace {
    pub fn first(&self) -> Option<f64> {
        self.points.first().map(|p| p.1)
    }

    pub fn last(&self) -> Option<f64> {
        self.points.last().map(|p| p.1)
    }
}

pub(crate) const LOG_EVERY: usize = 100;

/// Trains a fresh network with the epsilon-matching loss `E |eps - eps_theta(x_t, t)|^2`.
pub fn pretrain(
    dataset: &Dataset2D,
    arch: &MlpArchitecture,
    schedule: &ScheduleSpec,
    cfg: &PretrainConfig,
) -> Result<(EpsilonModel, LossTrace)> {
    if cfg.steps == 0 {
        return Err(Error::param("steps", "must be at least 1"));
    }
    if cfg.batch == 0 {
        return Err(Error::param("batch", "must be at least 1"));
    }
    if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
        return Err(Error::param("lr", format!("{} is not positive", cfg.lr)));
    }
    if dataset.dim() != arch.data_dim {
        return Err(Error::dim("pretrain dataset", arch.data_dim, dataset.dim()));
    }
    let sched = schedule.build()?;
    let steps_t = sched.steps();
    let d = arch.data_dim;
    let mut params = nn::init_params(arch, rng::derive_seed(cfg.seed, "init"))?;
    let mut opt = Adam::new(params.flat().len(), cfg.lr);
    let mut r = rng::stream(rng::derive_seed(cfg.seed, "pretrain"), 0);

    let mut trace = LossTrace { points: Vec::new() };
    let mut window = 0.0;
    let mut xs = vec![0.0; cfg.batch * d];
    let mut eps = vec![0.0; cfg.batch * d];
    let mut ts = vec![0usize; cfg.batch];
    for step in 1..=cfg.steps {
        for b in 0..cfg.batch {
            let x0 = &dataset.points[r.random_range(0..dataset.points.len())];
            let t = r.random_range(1..=steps_t);
            let e = &mut eps[b * d..(b + 1) * d];
            rng::fill_normal(&mut r, e);
            let ab = sched.alpha_bar(t)?;
            xs[b * d..(b + 1) * d].copy_from_slice(&forward_with_alpha_bar(ab, x0, e));
            ts[b] = t;
        }
        let mut tape = Tape::new(params.flat().to_vec());
        let pred = nn::forward_tape(&mut tape, arch, &xs, &ts, steps_t)?;
        let target = tape.constant(cfg.batch, d, eps.clone())?;
        let diff = tape.sub(pred, target)?;
        let sq = tape.row_sq_norm(diff);
        let loss = tape.mean(sq);
        let value = tape.scalar(loss)?;
        if !value.is_finite() {
            return Err(Error::NonFinite {
                context: "pretrain",
                detail: format!("loss {value} at step {step}"),
            });
        }
        let g = tape.gradient(loss)?;
        opt.step(params.flat_mut(), &g);

        window += value;
        if step % LOG_EVERY == 0 || step == cfg.steps {
            let span = if step % LOG_EVERY == 0 {
                LOG_EVERY
            } else {
                step % LOG_EVERY
            };
            let avg = window / span as f64;
            log::info!("pretrain step {step}: eps-loss {avg:.5}");
            trace.points.push((step, avg));
            window = 0.0;
        }
    }
    let model = EpsilonModel::new(params, *schedule, 1.0)?;
    Ok((model, trace))
}

// ---------------------------------------------------------------------------
// Sampling

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplerOptions {
    /// Inference-grid stride; 1 visits every step.
    pub stride: usize,
    /// Stream index of the first sample. Sample `i` of a call draws from
    /// stream `first_index + i`.
    pub first_index: u64,
}

impl Default for SamplerOptions {
    fn default() -> Self {
        SamplerOptions {
            stride: 1,
            first_index: 0,
        }
    }
}

/// Runs a reverse chain for `n` samples of dimension `dim`.
///
/// `step(xs, transition)` returns the posterior means for the flat batch `xs`
/// and the (state-independent) posterior variance. Sample `i` draws `x_T`
/// and then one `z` per stochastic step from its own stream; the final step
/// (`t_prev = 0`) returns the mean.
pub(crate) fn run_chain<F>(
    schedule: &NoiseSchedule,
    dim: usize,
    n: usize,
    seed: u64,
    opts: SamplerOptions,
    step: F,
) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&[f64], &Transition) -> Result<(Vec<f64>, f64)> + Sync,
{
    if n == 0 {
        return Err(Error::param("n", "must be at least 1"));
    }
    let grid = schedule.timestep_grid(opts.stride)?;
    let mut transitions = Vec::with_capacity(grid.len());
    for (k, &t) in grid.iter().enumerate() {
        let t_prev = grid.get(k + 1).copied().unwrap_or(0);
        transitions.push(schedule.transition(t, t_prev)?);
    }

    let chunks: Vec<(usize, usize)> = (0..n)
        .step_by(CHUNK)
        .map(|s| (s, (s + CHUNK).min(n)))
        .collect();
    let results: Vec<Result<Vec<Vec<f64>>>> = chunks
        .par_iter()
        .map(|&(lo, hi)| {
            let mut rngs: Vec<rng::Rng> = (lo..hi)
                .map(|i| rng::stream(seed, opts.first_index + i as u64))
                .collect();
            let mut xs = vec![0.0; (hi - lo) * dim];
            for (r, x) in rngs.iter_mut().zip(xs.chunks_mut(dim)) {
                rng::fill_normal(r, x);
            }
            for tr in &transitions {
                let (means, var) = step(&xs, tr)?;
                if tr.t_prev == 0 {
                    xs = means;
                } else {
                    let sd = var.sqrt();
                    let mut z = vec![0.0; dim];
                    for ((r, x), m) in rngs
                        .iter_mut()
                        .zip(xs.chunks_mut(dim))
                        .zip(means.chunks(dim))
                    {
                        rng::fill_normal(r, &mut z);
                        for ((xi, mi), zi) in x.iter_mut().zip(m).zip(&z) {
                            *xi = mi + sd * zi;
                        }
                    }
                }
            }
            if let Some(bad) = xs.iter().find(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    context: "sampling",
                    detail: format!("sample value {bad}"),
                });
            }
            Ok(xs.chunks(dim).map(<[f64]>::to_vec).collect())
        })
        .collect();
    let mut out = Vec::with_capacity(n);
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

/// Ancestral sampling from `x_T ~ N(0, I)` over the full grid.
pub fn sample(model: &EpsilonModel, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    sample_with(model, n, seed, SamplerOptions::default())
}

pub fn sample_with(
    model: &EpsilonModel,
    n: usize,
    seed: u64,
    opts: SamplerOptions,
) -> Result<Vec<Vec<f64>>> {
    run_chain(
        model.schedule(),
        model.data_dim(),
        n,
        seed,
        opts,
        |xs, tr| Ok((model.reverse_means(xs, tr)?, model.posterior_variance(tr))),
    )
}
