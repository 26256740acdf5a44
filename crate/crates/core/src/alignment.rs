//! Single-objective alignment with the step-level DPO loss, preference-pair
//! generation and the Reward Soup baseline.

use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::diffusion::{self, forward_with_alpha_bar, EpsilonModel, LossTrace, LOG_EVERY};
use crate::error::{Error, Result};
use crate::harness::RewardFn;
use crate::nn::{self, Adam, MlpParams, Tape, Var};
use crate::rng;
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, PartialEq)]
pub struct PreferencePair {
    pub x0_win: Vec<f64>,
    pub x0_lose: Vec<f64>,
    /// `r(win) - r(lose)`, informational.
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpoHyper {
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_omega")]
    pub omega: f64,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
    /// Set by the caller; not part of the serialized form.
    #[serde(skip)]
    pub seed: u64,
}

fn default_lambda() -> f64 {
    0.1
}
fn default_omega() -> f64 {
    1.0
}
fn default_lr() -> f64 {
    1e-3
}
fn default_steps() -> usize {
    2000
}
fn default_batch() -> usize {
    64
}

impl Default for DpoHyper {
    fn default() -> Self {
        DpoHyper {
            lambda: default_lambda(),
            omega: default_omega(),
            lr: default_lr(),
            steps: default_steps(),
            batch: default_batch(),
            seed: 0,
        }
    }
}

impl DpoHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::param(
                "lambda",
                format!("{} is not positive", self.lambda),
            ));
        }
        if !(self.omega > 0.0 && self.omega.is_finite()) {
            return Err(Error::param(
                "omega",
                format!("{} is not positive", self.omega),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::param("lr", format!("{} is not positive", self.lr)));
        }
        if self.batch == 0 {
            return Err(Error::param("batch", "must be at least 1"));
        }
        Ok(())
    }
}

/// Draws `2 * n_pairs` samples and pairs them consecutively; the higher
/// reward wins and ties go to the first sample.
pub fn make_pairs(
    model: &EpsilonModel,
    reward: &RewardFn,
    n_pairs: usize,
    seed: u64,
) -> Result<Vec<PreferencePair>> {
    if n_pairs == 0 {
        return Err(Error::param("n_pairs", "must be at least 1"));
    }
    let xs = diffusion::sample(model, 2 * n_pairs, seed)?;
    let mut out = Vec::with_capacity(n_pairs);
    let mut it = xs.into_iter();
    while let (Some(a), Some(b)) = (it.next(), it.next()) {
        let (ra, rb) = (reward.eval(&a)?, reward.eval(&b)?);
        out.push(if ra >= rb {
            PreferencePair {
                x0_win: a,
                x0_lose: b,
                margin: ra - rb,
            }
        } else {
            PreferencePair {
                x0_win: b,
                x0_lose: a,
                margin: rb - ra,
            }
        });
    }
    Ok(out)
}

/// The noise draws used for one pair in one loss evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct PairDraw {
    pub t: usize,
    pub eps_win: Vec<f64>,
    pub eps_lose: Vec<f64>,
}

/// One `(t, eps_win, eps_lose)` per pair; pair `j` uses stream `j` of `seed`.
pub fn pair_draws(n: usize, dim: usize, steps: usize, seed: u64) -> Vec<PairDraw> {
    (0..n)
        .map(|j| {
            let mut r = rng::stream(seed, j as u64);
            let t = r.random_range(1..=steps);
            let eps_win = rng::normal_vec(&mut r, dim);
            let eps_lose = rng::normal_vec(&mut r, dim);
            PairDraw {
                t,
                eps_win,
                eps_lose,
            }
        })
        .collect()
}

/// A recorded step-level DPO loss. The tape's parameters are `theta`.
pub struct StepDpoLoss {
    pub tape: Tape,
    pub loss: Var,
    /// Per pair: the logit `z`, so the pair's term is `-log sigmoid(z)`.
    pub z: Vec<f64>,
    /// Per pair: the `delta_diff` term.
    pub delta_diff: Vec<f64>,
}

impl StepDpoLoss {
    pub fn value(&self) -> f64 {
        self.tape.value(self.loss)[0]
    }

    pub fn gradient(&self) -> Result<Vec<f64>> {
        self.tape.gradient(self.loss)
    }
}

/// Step-level DPO loss with one `(t, eps)` draw per pair derived from `seed`.
pub fn step_dpo_loss(
    theta: &MlpParams,
    pre: &MlpParams,
    batch: &[PreferencePair],
    schedule: &NoiseSchedule,
    hyper: &DpoHyper,
    seed: u64,
) -> Result<StepDpoLoss> {
    let draws = pair_draws(batch.len(), theta.arch().data_dim, schedule.steps(), seed);
    step_dpo_loss_with_draws(theta, pre, batch, &draws, schedule, hyper)
}

/// `-mean_j log sigmoid(-lambda T omega (dw_j - dl_j - ddiff_j))` where
///
/// ```text
/// dw    = |eps_w - eps_theta(x_t^w)|^2 - |eps_w - eps_pre(x_t^w)|^2
/// dl    = |eps_l - eps_theta(x_t^l)|^2 - |eps_l - eps_pre(x_t^l)|^2
/// ddiff = |eps_theta(x_t^w) - eps_pre(x_t^w)|^2 - |eps_theta(x_t^l) - eps_pre(x_t^l)|^2
/// ```
pub fn step_dpo_loss_with_draws(
    theta: &MlpParams,
    pre: &MlpParams,
    batch: &[PreferencePair],
    draws: &[PairDraw],
    schedule: &NoiseSchedule,
    hyper: &DpoHyper,
) -> Result<StepDpoLoss> {
    if theta.arch() != pre.arch() {
        return Err(Error::Mismatch(
            "theta and pre have different architectures".into(),
        ));
    }
    if batch.is_empty() {
        return Err(Error::param("batch", "no preference pairs"));
    }
    if draws.len() != batch.len() {
        return Err(Error::dim("pair draws", batch.len(), draws.len()));
    }
    let arch = theta.arch();
    let d = arch.data_dim;
    let steps = schedule.steps();
    let b = batch.len();

    let mut xw = Vec::with_capacity(b * d);
    let mut xl = Vec::with_capacity(b * d);
    let mut ew = Vec::with_capacity(b * d);
    let mut el = Vec::with_capacity(b * d);
    let mut ts = Vec::with_capacity(b);
    for (p, dr) in batch.iter().zip(draws) {
        if p.x0_win.len() != d || p.x0_lose.len() != d {
            return Err(Error::dim(
                "preference pair",
                d,
                p.x0_win.len().max(p.x0_lose.len()),
            ));
        }
        let ab = schedule.alpha_bar(dr.t)?;
        xw.extend(forward_with_alpha_bar(ab, &p.x0_win, &dr.eps_win));
        xl.extend(forward_with_alpha_bar(ab, &p.x0_lose, &dr.eps_lose));
        ew.extend_from_slice(&dr.eps_win);
        el.extend_from_slice(&dr.eps_lose);
        ts.push(dr.t);
    }
    let pre_w = nn::forward_rows(pre, &xw, &ts, steps)?;
    let pre_l = nn::forward_rows(pre, &xl, &ts, steps)?;
    let sq = |a: &[f64], c: &[f64]| -> Vec<f64> {
        a.chunks(d)
            .zip(c.chunks(d))
            .map(|(u, v)| u.iter().zip(v).map(|(x, y)| (x - y) * (x - y)).sum())
            .collect()
    };
    let ref_w = sq(&ew, &pre_w);
    let ref_l = sq(&el, &pre_l);

    let mut tape = Tape::new(theta.flat().to_vec());
    let th_w = nn::forward_tape(&mut tape, arch, &xw, &ts, steps)?;
    let th_l = nn::forward_tape(&mut tape, arch, &xl, &ts, steps)?;
    let ew = tape.constant(b, d, ew)?;
    let el = tape.constant(b, d, el)?;
    let pre_w = tape.constant(b, d, pre_w)?;
    let pre_l = tape.constant(b, d, pre_l)?;
    let ref_w = tape.constant(b, 1, ref_w)?;
    let ref_l = tape.constant(b, 1, ref_l)?;

    let rw = tape.sub(ew, th_w)?;
    let rw = tape.row_sq_norm(rw);
    let delta_w = tape.sub(rw, ref_w)?;
    let rl = tape.sub(el, th_l)?;
    let rl = tape.row_sq_norm(rl);
    let delta_l = tape.sub(rl, ref_l)?;
    let gw = tape.sub(th_w, pre_w)?;
    let gw = tape.row_sq_norm(gw);
    let gl = tape.sub(th_l, pre_l)?;
    let gl = tape.row_sq_norm(gl);
    let delta_diff = tape.sub(gw, gl)?;

    let inner = tape.sub(delta_w, delta_l)?;
    let inner = tape.sub(inner, delta_diff)?;
    let z = tape.scale(inner, -hyper.lambda * steps as f64 * hyper.omega);
    let ls = tape.log_sigmoid(z);
    let m = tape.mean(ls);
    let loss = tape.scale(m, -1.0);

    let z_vals = tape.value(z).to_vec();
    let diff_vals = tape.value(delta_diff).to_vec();
    Ok(StepDpoLoss {
        tape,
        loss,
        z: z_vals,
        delta_diff: diff_vals,
    })
}

/// Adam descent on the step-level DPO loss starting from `pre`. The result
/// carries `pre`'s schedule and the given `eta`.
pub fn finetune_dpo(
    pre: &EpsilonModel,
    pairs: &[PreferencePair],
    hyper: &DpoHyper,
    eta: f64,
) -> Result<(EpsilonModel, LossTrace)> {
    hyper.validate()?;
    if pairs.is_empty() {
        return Err(Error::param("pairs", "no preference pairs"));
    }
    let schedule = pre.schedule();
    let mut theta = pre.params().clone();
    let mut opt = Adam::new(theta.flat().len(), hyper.lr);
    let mut picker = rng::stream(rng::derive_seed(hyper.seed, "dpo-batch"), 0);
    let draw_seed = rng::derive_seed(hyper.seed, "dpo-draws");
    let mut trace = LossTrace { points: Vec::new() };
    let mut window = 0.0;
    let mut batch = Vec::with_capacity(hyper.batch);
    for step in 1..=hyper.steps {
        batch.clear();
        for _ in 0..hyper.batch {
            batch.push(pairs[picker.random_range(0..pairs.len())].clone());
        }
        let obj = step_dpo_loss(
            &theta,
            pre.params(),
            &batch,
            schedule,
            hyper,
            rng::derive_indexed(draw_seed, step as u64),
        )?;
        let value = obj.value();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                context: "dpo fine-tuning",
                detail: format!("loss {value} at step {step}"),
            });
        }
        let g = obj.gradient()?;
        opt.step(theta.flat_mut(), &g);

        window += value;
        if step % LOG_EVERY == 0 || step == hyper.steps {
            let span = if step % LOG_EVERY == 0 {
                LOG_EVERY
            } else {
                step % LOG_EVERY
            };
            let avg = window / span as f64;
            log::info!("dpo step {step}: loss {avg:.5}");
            trace.points.push((step, avg));
            window = 0.0;
        }
    }
    let model = EpsilonModel::new(theta, *schedule.spec(), eta)?;
    Ok((model, trace))
}

/// Parameter interpolation `w * a + (1 - w) * b`, with `eta` interpolated the
/// same way.
pub fn reward_soup(model_a: &EpsilonModel, model_b: &EpsilonModel, w: f64) -> Result<EpsilonModel> {
    if model_a.schedule().spec() != model_b.schedule().spec() {
        return Err(Error::Mismatch(
            "reward soup needs models with the same schedule".into(),
        ));
    }
    let params = nn::interpolate_params(model_a.params(), model_b.params(), w)?;
    let eta = if w == 1.0 {
        model_a.eta()
    } else if w == 0.0 {
        model_b.eta()
    } else {
        w * model_a.eta() + (1.0 - w) * model_b.eta()
    };
    EpsilonModel::new(params, *model_a.schedule().spec(), eta)
}

/// CSV rows `x0w_1..x0w_d, x0l_1..x0l_d, margin`, no header.
pub fn format_pairs_csv(pairs: &[PreferencePair]) -> String {
    let mut out = String::new();
    for p in pairs {
        let fields: Vec<String> = p
            .x0_win
            .iter()
            .chain(&p.x0_lose)
            .chain(std::iter::once(&p.margin))
            .map(|v| v.to_string())
            .collect();
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

pub fn parse_pairs_csv(text: &str) -> Result<Vec<PreferencePair>> {
    let rows = diffusion::parse_points_csv(text)?;
    rows.into_iter()
        .enumerate()
        .map(|(i, row)| {
            if row.len() < 3 || row.len() % 2 == 0 {
                return Err(Error::format(
                    "pairs csv",
                    format!("row {} has {} fields", i + 1, row.len()),
                ));
            }
            let d = (row.len() - 1) / 2;
            Ok(PreferencePair {
                x0_win: row[..d].to_vec(),
                x0_lose: row[d..2 * d].to_vec(),
                margin: row[2 * d],
            })
        })
        .collect()
}

pub fn write_pairs_csv(path: impl AsRef<Path>, pairs: &[PreferencePair]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_pairs_csv(pairs)).map_err(|e| Error::io(path, e))
}

pub fn read_pairs_csv(path: impl AsRef<Path>) -> Result<Vec<PreferencePair>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_pairs_csv(&text)
}
