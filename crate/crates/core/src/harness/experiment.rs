use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::alignment::{finetune_dpo, make_pairs, write_pairs_csv};
use crate::diffusion::{pretrain, Dataset2D, EpsilonModel, SamplerOptions};
use crate::error::{Error, Result};
use crate::gaussian::PreferenceWeights;
use crate::msdda::{
    format_sweep_csv, pareto_sweep_with, Method, SweepInputs, SweepPoint, SweepRow,
};
use crate::nn::{load_checkpoint, save_checkpoint};
use crate::rng;

use super::config::{ExperimentConfig, StageSeeds};
use super::eval::{evaluate, format_eval_csv, EvalRecord, Stat, Target};

pub const SWEEP_FILE: &str = "sweep.csv";
pub const EVAL_FILE: &str = "eval.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PRETRAINED_FILE: &str = "pretrained.json";
pub const FAILED_FILE: &str = "FAILED";

const FINGERPRINT_KEY: &str = "fingerprint";

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    version: &'static str,
    seed: u64,
    seeds: &'a StageSeeds,
    config: &'a ExperimentConfig,
    files: Vec<String>,
}

/// What a finished run produced.
#[derive(Debug, Clone)]
pub struct RunOutputs {
    pub dir: PathBuf,
    pub pretrained: EpsilonModel,
    pub aligned: Vec<EpsilonModel>,
    pub sweep: Vec<SweepPoint>,
    pub eval: Vec<EvalRecord>,
}

impl RunOutputs {
    pub fn sweep_rows(&self) -> Vec<SweepRow> {
        self.sweep.iter().map(|p| p.row.clone()).collect()
    }
}

/// MSDDA against Reward Soup on `r^w` at one weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Comparison {
    pub w: f64,
    pub msdda: Stat,
    pub soup: Stat,
}

impl Comparison {
    pub fn difference(&self) -> f64 {
        self.msdda.mean - self.soup.mean
    }

    /// `sqrt(se_msdda^2 + se_soup^2)`.
    pub fn combined_se(&self) -> f64 {
        self.msdda.se.hypot(self.soup.se)
    }

    /// MSDDA ahead by more than one combined standard error.
    pub fn msdda_ahead(&self) -> bool {
        self.difference() > self.combined_se()
    }
}

/// Pairs the `msdda` and `soup` rows of an evaluation table by weight.
pub fn compare_msdda_soup(eval: &[EvalRecord]) -> Vec<Comparison> {
    let find = |method: &str, w: f64| {
        eval.iter().find(|r| {
            r.method == method
                && r.w == Some(w)
                && matches!(&r.row.target, Target::Weighted(v) if v.first() == Some(&w))
        })
    };
    let mut out = Vec::new();
    for rec in eval.iter().filter(|r| r.method == Method::Msdda.as_str()) {
        let Some(w) = rec.w else { continue };
        if !matches!(rec.row.target, Target::Weighted(_)) {
            continue;
        }
        if let (Some(m), Some(s)) = (
            find(Method::Msdda.as_str(), w),
            find(Method::Soup.as_str(), w),
        ) {
            out.push(Comparison {
                w,
                msdda: m.row.stat,
                soup: s.row.stat,
            });
        }
    }
    out
}

fn fingerprint(cfg: &ExperimentConfig) -> Result<String> {
    let key = serde_json::json!({
        "seed": cfg.seed,
        "dataset": cfg.dataset,
        "schedule": cfg.schedule,
        "arch": cfg.arch,
        "pretrain": cfg.pretrain,
    });
    Ok(format!("{:016x}", rng::derive_seed(0, &key.to_string())))
}

fn write(dir: &Path, name: &str, text: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, text).map_err(|e| Error::io(path, e))
}

/// Loads `pretrained.json` from `dir` if it was trained under the same
/// dataset, schedule, architecture, pretraining settings and seed; otherwise
/// trains and saves it.
pub fn pretrained_model(cfg: &ExperimentConfig, dir: &Path) -> Result<EpsilonModel> {
    let path = dir.join(PRETRAINED_FILE);
    let fp = fingerprint(cfg)?;
    if path.exists() {
        if let Ok(ck) = load_checkpoint(&path) {
            if ck.meta.get(FINGERPRINT_KEY) == Some(&fp) {
                log::info!("using cached pretrained model {}", path.display());
                return EpsilonModel::from_checkpoint(ck);
            }
        }
        log::info!("cached pretrained model is stale; retraining");
    }
    let dataset = Dataset2D::generate(&cfg.dataset_spec())?;
    let t0 = Instant::now();
    let (model, trace) = pretrain(&dataset, &cfg.arch, &cfg.schedule, &cfg.pretrain_config())?;
    log::info!(
        "pretrained in {:.1?}: eps-loss {:.4} -> {:.4}",
        t0.elapsed(),
        trace.first().unwrap_or(f64::NAN),
        trace.last().unwrap_or(f64::NAN)
    );
    let mut meta = BTreeMap::new();
    meta.insert(FINGERPRINT_KEY.to_string(), fp);
    save_checkpoint(&path, &model.to_checkpoint(meta))?;
    Ok(model)
}

/// Pretrain (or reuse), align each objective, sweep, evaluate, and write
/// `sweep.csv`, `eval.csv` and `manifest.json` into `dir`. On failure a
/// `FAILED` file naming the stage is left next to whatever was written.
pub fn run_experiment(cfg: &ExperimentConfig, dir: &Path) -> Result<RunOutputs> {
    cfg.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let failed = dir.join(FAILED_FILE);
    if failed.exists() {
        fs::remove_file(&failed).map_err(|e| Error::io(&failed, e))?;
    }
    let result = run_stages(cfg, dir);
    if let Err(e) = &result {
        let _ = fs::write(&failed, format!("{}\n", error_chain(e)));
    }
    result
}

/// `e` followed by each of its causes.
pub fn error_chain(e: &(dyn std::error::Error + 'static)) -> String {
    let mut out = e.to_string();
    let mut cur = e.source();
    while let Some(c) = cur {
        out.push_str(": ");
        out.push_str(&c.to_string());
        cur = c.source();
    }
    out
}

fn run_stages(cfg: &ExperimentConfig, dir: &Path) -> Result<RunOutputs> {
    let seeds = cfg.seeds();
    let pre = pretrained_model(cfg, dir).map_err(Error::stage("pretrain"))?;

    let mut aligned = Vec::with_capacity(cfg.objectives.len());
    let mut files = vec![PRETRAINED_FILE.to_string()];
    for (i, obj) in cfg.objectives.iter().enumerate() {
        let pairs = make_pairs(&pre, &obj.reward, obj.pairs, seeds.pairs[i])
            .map_err(Error::stage("pairs"))?;
        let pairs_file = format!("pairs_{}.csv", obj.name);
        write_pairs_csv(dir.join(&pairs_file), &pairs).map_err(Error::stage("pairs"))?;
        let t0 = Instant::now();
        let (model, trace) = finetune_dpo(&pre, &pairs, &cfg.dpo_hyper(i), obj.eta)
            .map_err(Error::stage("align"))?;
        log::info!(
            "aligned {} in {:.1?}: loss {:.4} -> {:.4}",
            obj.name,
            t0.elapsed(),
            trace.first().unwrap_or(f64::NAN),
            trace.last().unwrap_or(f64::NAN)
        );
        let model_file = format!("aligned_{}.json", obj.name);
        let mut meta = BTreeMap::new();
        meta.insert("objective".to_string(), obj.name.clone());
        save_checkpoint(dir.join(&model_file), &model.to_checkpoint(meta))
            .map_err(Error::stage("align"))?;
        files.push(pairs_file);
        files.push(model_file);
        aligned.push(model);
    }

    let (r1, r2) = (&cfg.objectives[0].reward, &cfg.objectives[1].reward);
    let t0 = Instant::now();
    let opts = SamplerOptions {
        stride: cfg.sweep.stride,
        first_index: 0,
    };
    let sweep = pareto_sweep_with(
        SweepInputs {
            model_a: &aligned[0],
            model_b: &aligned[1],
            pretrained: Some(&pre),
            r1,
            r2,
        },
        &cfg.sweep.weights,
        cfg.sweep.n,
        seeds.sweep,
        opts,
    )
    .map_err(Error::stage("sweep"))?;
    log::info!("sweep finished in {:.1?}", t0.elapsed());
    let rows: Vec<SweepRow> = sweep.iter().map(|p| p.row.clone()).collect();
    write(dir, SWEEP_FILE, &format_sweep_csv(&rows)).map_err(Error::stage("sweep"))?;

    let mut eval = Vec::new();
    let rewards = [r1.clone(), r2.clone()];
    for p in &sweep {
        let ws = match p.row.w {
            Some(w) => vec![PreferenceWeights::pair(w)?],
            None => Vec::new(),
        };
        let report = evaluate(&p.samples, &rewards, &ws).map_err(Error::stage("eval"))?;
        eval.extend(report.rows.into_iter().map(|row| EvalRecord {
            method: p.row.method.to_string(),
            w: p.row.w,
            row,
        }));
    }
    write(dir, EVAL_FILE, &format_eval_csv(&eval)).map_err(Error::stage("eval"))?;

    files.extend([SWEEP_FILE.to_string(), EVAL_FILE.to_string()]);
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION"),
        seed: cfg.seed,
        seeds: &seeds,
        config: cfg,
        files,
    };
    let mut text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::format("manifest", e.to_string()))?;
    text.push('\n');
    write(dir, MANIFEST_FILE, &text).map_err(Error::stage("manifest"))?;

    Ok(RunOutputs {
        dir: dir.to_path_buf(),
        pretrained: pre,
        aligned,
        sweep,
        eval,
    })
}
