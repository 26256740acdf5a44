//! Denoising-time fusion of aligned models: at every reverse step the
//! per-model Gaussian posteriors are combined with [`fuse`] and one shared
//! noise draw moves the state.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::alignment::reward_soup;
use crate::diffusion::{self, run_chain, EpsilonModel, SamplerOptions};
use crate::error::{Error, Result};
use crate::gaussian::{fuse, GaussianPosterior, PreferenceWeights};
use crate::harness::{evaluate_rewards, RewardFn};
use crate::schedule::{NoiseSchedule, Transition};

#[derive(Debug, Clone)]
pub struct FusionEnsemble {
    models: Vec<EpsilonModel>,
    w: PreferenceWeights,
}

impl FusionEnsemble {
    pub fn new(models: Vec<EpsilonModel>, w: PreferenceWeights) -> Result<Self> {
        let Some(first) = models.first() else {
            return Err(Error::param("models", "ensemble needs at least one model"));
        };
        if w.len() != models.len() {
            return Err(Error::dim("preference weights", models.len(), w.len()));
        }
        for m in &models[1..] {
            if m.schedule().spec() != first.schedule().spec() {
                return Err(Error::Mismatch(format!(
                    "all models must share one schedule: {:?} vs {:?}",
                    first.schedule().spec(),
                    m.schedule().spec()
                )));
            }
            if m.data_dim() != first.data_dim() {
                return Err(Error::dim(
                    "ensemble data dimension",
                    first.data_dim(),
                    m.data_dim(),
                ));
            }
        }
        Ok(FusionEnsemble { models, w })
    }

    pub fn models(&self) -> &[EpsilonModel] {
        &self.models
    }

    pub fn weights(&self) -> &PreferenceWeights {
        &self.w
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        self.models[0].schedule()
    }

    pub fn data_dim(&self) -> usize {
        self.models[0].data_dim()
    }

    /// Fused posterior means for a flat batch and the fused variance. Models
    /// with zero weight are not evaluated.
    fn fused_batch(&self, xs: &[f64], tr: &Transition) -> Result<(Vec<f64>, f64)> {
        let d = self.data_dim();
        let rows = xs.len() / d;
        let active: Vec<usize> = self.w.support().collect();
        let mut means = Vec::with_capacity(active.len());
        let mut vars = Vec::with_capacity(active.len());
        for &i in &active {
            let m = &self.models[i];
            means.push(m.reverse_means(xs, tr)?);
            vars.push(m.posterior_variance(tr));
        }
        let sub_w = PreferenceWeights::new(active.iter().map(|&i| self.w.as_slice()[i]).collect())?;
        let mut out = Vec::with_capacity(xs.len());
        let mut fused_var = f64::NAN;
        for r in 0..rows {
            let posts = means
                .iter()
                .zip(&vars)
                .map(|(m, &v)| GaussianPosterior::new(m[r * d..(r + 1) * d].to_vec(), v))
                .collect::<Result<Vec<_>>>()?;
            let f = fuse(&posts, &sub_w)?;
            fused_var = f.variance();
            out.extend_from_slice(f.mean());
        }
        Ok((out, fused_var))
    }

    /// The fused reverse posterior at `x_t` for the transition `t -> t - 1`.
    pub fn fused_posterior(&self, x_t: &[f64], t: usize) -> Result<GaussianPosterior> {
        if x_t.len() != self.data_dim() {
            return Err(Error::dim("msdda state", self.data_dim(), x_t.len()));
        }
        let tr = self.schedule().transition(t, t.saturating_sub(1))?;
        let (mean, var) = self.fused_batch(x_t, &tr)?;
        GaussianPosterior::new(mean, var)
    }
}

/// One fused reverse step `mu_w + sigma_w * z` for `2 <= t <= T`.
pub fn msdda_step(ensemble: &FusionEnsemble, x_t: &[f64], t: usize, z: &[f64]) -> Result<Vec<f64>> {
    if t < 2 {
        return Err(Error::param(
            "t",
            "msdda_step needs t >= 2; the final step is taken at the mean",
        ));
    }
    if z.len() != x_t.len() {
        return Err(Error::dim("msdda noise", x_t.len(), z.len()));
    }
    let post = ensemble.fused_posterior(x_t, t)?;
    let sd = post.variance().sqrt();
    Ok(post.mean().iter().zip(z).map(|(m, z)| m + sd * z).collect())
}

/// Fused ancestral sampling over the full grid. Sample `i` uses stream `i`
/// exactly as [`diffusion::sample`] does.
pub fn msdda_sample(ensemble: &FusionEnsemble, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    msdda_sample_with(ensemble, n, seed, SamplerOptions::default())
}

pub fn msdda_sample_with(
    ensemble: &FusionEnsemble,
    n: usize,
    seed: u64,
    opts: SamplerOptions,
) -> Result<Vec<Vec<f64>>> {
    run_chain(
        ensemble.schedule(),
        ensemble.data_dim(),
        n,
        seed,
        opts,
        |xs, tr| ensemble.fused_batch(xs, tr),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Msdda,
    Soup,
    ModelA,
    ModelB,
    Pretrained,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Msdda => "msdda",
            Method::Soup => "soup",
            Method::ModelA => "model_a",
            Method::ModelB => "model_b",
            Method::Pretrained => "pretrained",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "msdda" => Method::Msdda,
            "soup" => Method::Soup,
            "model_a" => Method::ModelA,
            "model_b" => Method::ModelB,
            "pretrained" => Method::Pretrained,
            _ => return Err(Error::format("sweep csv", format!("unknown method {s:?}"))),
        })
    }
}

/// One row of a Pareto sweep. `w` is the weight on objective 1; single-model
/// rows carry the weight they correspond to (`model_a` 1, `model_b` 0,
/// `pretrained` none).
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub method: Method,
    pub w: Option<f64>,
    pub mean_r1: f64,
    pub se_r1: f64,
    pub mean_r2: f64,
    pub se_r2: f64,
    pub n: usize,
}

impl SweepRow {
    fn from_samples(
        method: Method,
        w: Option<f64>,
        xs: &[Vec<f64>],
        r1: &RewardFn,
        r2: &RewardFn,
    ) -> Result<Self> {
        let stats = evaluate_rewards(xs, &[r1.clone(), r2.clone()])?;
        Ok(SweepRow {
            method,
            w,
            mean_r1: stats[0].mean,
            se_r1: stats[0].se,
            mean_r2: stats[1].mean,
            se_r2: stats[1].se,
            n: xs.len(),
        })
    }
}

pub const SWEEP_HEADER: &str = "method,w,mean_r1,se_r1,mean_r2,se_r2,n";

/// The samples behind one sweep row, kept for evaluation of `r^w`.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub row: SweepRow,
    pub samples: Vec<Vec<f64>>,
}

/// Models and rewards of a two-objective sweep.
#[derive(Debug, Clone, Copy)]
pub struct SweepInputs<'a> {
    pub model_a: &'a EpsilonModel,
    pub model_b: &'a EpsilonModel,
    pub pretrained: Option<&'a EpsilonModel>,
    pub r1: &'a RewardFn,
    pub r2: &'a RewardFn,
}

/// For every `w`: MSDDA with weights `(w, 1 - w)` and the Reward Soup at `w`;
/// then `model_a`, `model_b` and (if given) the pretrained model once each.
/// Every row samples `n` points with the same seed, so all methods share
/// their per-sample streams.
pub fn pareto_sweep(
    inputs: SweepInputs<'_>,
    weights: &[f64],
    n: usize,
    seed: u64,
) -> Result<Vec<SweepPoint>> {
    pareto_sweep_with(inputs, weights, n, seed, SamplerOptions::default())
}

pub fn pareto_sweep_with(
    inputs: SweepInputs<'_>,
    weights: &[f64],
    n: usize,
    seed: u64,
    opts: SamplerOptions,
) -> Result<Vec<SweepPoint>> {
    for &w in weights {
        if !(0.0..=1.0).contains(&w) {
            return Err(Error::param("weights", format!("{w} not in [0, 1]")));
        }
    }
    let SweepInputs {
        model_a,
        model_b,
        pretrained,
        r1,
        r2,
    } = inputs;
    let mut out = Vec::new();
    let mut push = |method, w, xs: Vec<Vec<f64>>| -> Result<()> {
        let row = SweepRow::from_samples(method, w, &xs, r1, r2)?;
        log::info!(
            "sweep {method} w={w:?}: r1 {:.4} ({:.4}) r2 {:.4} ({:.4})",
            row.mean_r1,
            row.se_r1,
            row.mean_r2,
            row.se_r2
        );
        out.push(SweepPoint { row, samples: xs });
        Ok(())
    };
    for &w in weights {
        let ens = FusionEnsemble::new(
            vec![model_a.clone(), model_b.clone()],
            PreferenceWeights::pair(w)?,
        )?;
        push(
            Method::Msdda,
            Some(w),
            msdda_sample_with(&ens, n, seed, opts)?,
        )?;
        let soup = reward_soup(model_a, model_b, w)?;
        push(
            Method::Soup,
            Some(w),
            diffusion::sample_with(&soup, n, seed, opts)?,
        )?;
    }
    push(
        Method::ModelA,
        Some(1.0),
        diffusion::sample_with(model_a, n, seed, opts)?,
    )?;
    push(
        Method::ModelB,
        Some(0.0),
        diffusion::sample_with(model_b, n, seed, opts)?,
    )?;
    if let Some(pre) = pretrained {
        push(
            Method::Pretrained,
            None,
            diffusion::sample_with(pre, n, seed, opts)?,
        )?;
    }
    Ok(out)
}

pub fn format_sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for r in rows {
        let w = r.w.map(|w| w.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.method, w, r.mean_r1, r.se_r1, r.mean_r2, r.se_r2, r.n
        ));
    }
    out
}

pub fn parse_sweep_csv(text: &str) -> Result<Vec<SweepRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(SWEEP_HEADER) {
        return Err(Error::format("sweep csv", "missing or unexpected header"));
    }
    let num = |s: &str, line: usize| -> Result<f64> {
        s.parse::<f64>()
            .map_err(|e| Error::format("sweep csv", format!("line {line}: {e}")))
    };
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            let ln = i + 2;
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(Error::format(
                    "sweep csv",
                    format!("line {ln}: expected 7 fields"),
                ));
            }
            Ok(SweepRow {
                method: f[0].parse()?,
                w: if f[1].is_empty() {
                    None
                } else {
                    Some(num(f[1], ln)?)
                },
                mean_r1: num(f[2], ln)?,
                se_r1: num(f[3], ln)?,
                mean_r2: num(f[4], ln)?,
                se_r2: num(f[5], ln)?,
                n: f[6]
                    .parse()
                    .map_err(|e| Error::format("sweep csv", format!("line {ln}: {e}")))?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_params, Activation, MlpArchitecture};
    use crate::schedule::ScheduleSpec;

    fn arch() -> MlpArchitecture {
        MlpArchitecture {
            data_dim: 2,
            t_embed_dim: 4,
            hidden: vec![8],
            activation: Activation::Tanh,
        }
    }

    fn model(seed: u64, eta: f64) -> EpsilonModel {
        EpsilonModel::new(
            init_params(&arch(), seed).unwrap(),
            ScheduleSpec::linear(12, 1e-3, 0.3),
            eta,
        )
        .unwrap()
    }

    #[test]
    fn single_model_step_matches_ancestral_step() {
        let m = model(1, 0.9);
        let ens = FusionEnsemble::new(vec![m.clone()], PreferenceWeights::new(vec![1.0]).unwrap())
            .unwrap();
        let x = [0.3, -0.4];
        let z = [1.1, 0.2];
        let got = msdda_step(&ens, &x, 5, &z).unwrap();
        let p = m.reverse_posterior(&x, 5).unwrap();
        let want: Vec<f64> = p
            .mean()
            .iter()
            .zip(&z)
            .map(|(mu, z)| mu + p.variance().sqrt() * z)
            .collect();
        assert_eq!(got, want);
        assert!(msdda_step(&ens, &x, 1, &z).is_err());
    }

    #[test]
    fn vertex_weight_skips_other_model() {
        let a = model(1, 1.0);
        let b = model(2, 0.8);
        let ens =
            FusionEnsemble::new(vec![a.clone(), b], PreferenceWeights::pair(1.0).unwrap()).unwrap();
        let got = msdda_sample(&ens, 6, 11).unwrap();
        assert_eq!(got, diffusion::sample(&a, 6, 11).unwrap());
        assert_eq!(ens.models()[1].forward_count(), 0);
        assert!(ens.models()[0].forward_count() > 0);
    }

    #[test]
    fn equal_models_fuse_to_either() {
        let a = model(3, 1.0);
        let ens = FusionEnsemble::new(
            vec![a.clone(), a.clone()],
            PreferenceWeights::pair(0.3).unwrap(),
        )
        .unwrap();
        let x = [0.7, 0.1];
        let z = [-0.5, 0.9];
        let got = msdda_step(&ens, &x, 4, &z).unwrap();
        let p = a.reverse_posterior(&x, 4).unwrap();
        for k in 0..2 {
            let want = p.mean()[k] + p.variance().sqrt() * z[k];
            assert!((got[k] - want).abs() <= 1e-14 * want.abs().max(1.0));
        }
    }

    #[test]
    fn fused_variance_within_model_range() {
        let a = model(1, 1.0);
        let b = model(2, 0.8);
        let ens = FusionEnsemble::new(
            vec![a.clone(), b.clone()],
            PreferenceWeights::pair(0.4).unwrap(),
        )
        .unwrap();
        for t in 2..=12 {
            let v = ens.fused_posterior(&[0.0, 0.0], t).unwrap().variance();
            let va = a.reverse_posterior(&[0.0, 0.0], t).unwrap().variance();
            let vb = b.reverse_posterior(&[0.0, 0.0], t).unwrap().variance();
            assert!(v >= va.min(vb) && v <= va.max(vb));
        }
    }

    #[test]
    fn ensemble_rejects_mismatches() {
        let a = model(1, 1.0);
        let c = EpsilonModel::new(a.params().clone(), ScheduleSpec::linear(13, 1e-3, 0.3), 1.0)
            .unwrap();
        let err = FusionEnsemble::new(vec![a.clone(), c], PreferenceWeights::pair(0.5).unwrap())
            .unwrap_err();
        assert!(err.to_string().contains("schedule"));
        assert!(FusionEnsemble::new(vec![a], PreferenceWeights::pair(0.5).unwrap()).is_err());
        assert!(FusionEnsemble::new(vec![], PreferenceWeights::new(vec![1.0]).unwrap()).is_err());
    }

    #[test]
    fn permuting_indices_permutes_outputs() {
        let ens = FusionEnsemble::new(
            vec![model(1, 1.0), model(2, 0.8)],
            PreferenceWeights::pair(0.6).unwrap(),
        )
        .unwrap();
        let all = msdda_sample(&ens, 4, 5).unwrap();
        for i in [3u64, 0, 2, 1] {
            let one = msdda_sample_with(
                &ens,
                1,
                5,
                SamplerOptions {
                    stride: 1,
                    first_index: i,
                },
            )
            .unwrap();
            assert_eq!(one[0], all[i as usize]);
        }
    }

    #[test]
    fn sweep_shape_and_endpoints() {
        let a = model(1, 1.0);
        let b = model(2, 0.8);
        let pre = model(3, 1.0);
        let r1 = RewardFn::axis(0);
        let r2 = RewardFn::axis(1);
        let inputs = SweepInputs {
            model_a: &a,
            model_b: &b,
            pretrained: Some(&pre),
            r1: &r1,
            r2: &r2,
        };
        let pts = pareto_sweep(inputs, &[0.0, 0.5, 1.0], 8, 2).unwrap();
        assert_eq!(pts.len(), 2 * 3 + 3);
        let find = |m: Method, w: Option<f64>| {
            pts.iter()
                .find(|p| p.row.method == m && p.row.w == w)
                .unwrap()
        };
        assert_eq!(
            find(Method::Msdda, Some(1.0)).samples,
            find(Method::ModelA, Some(1.0)).samples
        );
        assert_eq!(
            find(Method::Msdda, Some(0.0)).samples,
            find(Method::ModelB, Some(0.0)).samples
        );
        assert!(pareto_sweep(inputs, &[1.5], 8, 2).is_err());

        let rows: Vec<SweepRow> = pts.iter().map(|p| p.row.clone()).collect();
        let text = format_sweep_csv(&rows);
        assert!(text.starts_with("method,w,mean_r1,se_r1,mean_r2,se_r2,n\n"));
        assert_eq!(parse_sweep_csv(&text).unwrap(), rows);
    }

    #[test]
    fn strided_fusion_runs() {
        let ens = FusionEnsemble::new(
            vec![model(1, 1.0), model(2, 0.8)],
            PreferenceWeights::pair(0.5).unwrap(),
        )
        .unwrap();
        let xs = msdda_sample_with(
            &ens,
            3,
            1,
            SamplerOptions {
                stride: 4,
                first_index: 0,
            },
        )
        .unwrap();
        assert!(xs.iter().flatten().all(|v| v.is_finite()));
    }
}
