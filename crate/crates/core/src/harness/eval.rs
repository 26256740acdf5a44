use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::gaussian::PreferenceWeights;

use super::reward::{weighted_reward, RewardFn};

/// Sample mean and standard error (`n - 1` convention; 0 for a single point).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Result<Self> {
        let n = values.len();
        if n == 0 {
            return Err(Error::param("batch", "cannot summarize an empty batch"));
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let se = if n < 2 {
            0.0
        } else {
            let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
            (ss / (n - 1) as f64).sqrt() / (n as f64).sqrt()
        };
        if !(mean.is_finite() && se.is_finite()) {
            return Err(Error::NonFinite {
                context: "evaluation",
                detail: format!("mean {mean}, se {se}"),
            });
        }
        Ok(Stat { mean, se, n })
    }
}

/// Statistics of each reward over `batch`.
pub fn evaluate_rewards(batch: &[Vec<f64>], rewards: &[RewardFn]) -> Result<Vec<Stat>> {
    rewards
        .iter()
        .map(|r| Stat::of(&r.eval_batch(batch)?))
        .collect()
}

/// What an [`EvalRow`] measures.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    /// Reward `i` (zero-based; rendered `r{i+1}`).
    Reward(usize),
    /// The weighted reward; rendered `rw[w1;w2;...]`.
    Weighted(Vec<f64>),
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Target::Reward(i) => write!(f, "r{}", i + 1),
            Target::Weighted(w) => {
                let parts: Vec<String> = w.iter().map(|v| v.to_string()).collect();
                write!(f, "rw[{}]", parts.join(";"))
            }
        }
    }
}

impl FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::format("eval target", format!("{s:?}"));
        if let Some(inner) = s.strip_prefix("rw[").and_then(|r| r.strip_suffix(']')) {
            let w = inner
                .split(';')
                .map(|v| v.parse::<f64>().map_err(|_| bad()))
                .collect::<Result<Vec<_>>>()?;
            return Ok(Target::Weighted(w));
        }
        match s.strip_prefix('r').and_then(|i| i.parse::<usize>().ok()) {
            Some(i) if i >= 1 => Ok(Target::Reward(i - 1)),
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub target: Target,
    pub stat: Stat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn get(&self, target: &Target) -> Option<&Stat> {
        self.rows
            .iter()
            .find(|r| &r.target == target)
            .map(|r| &r.stat)
    }
}

/// One row per reward, then one row per weight vector.
pub fn evaluate(
    batch: &[Vec<f64>],
    rewards: &[RewardFn],
    ws: &[PreferenceWeights],
) -> Result<EvalReport> {
    let mut rows = Vec::with_capacity(rewards.len() + ws.len());
    for (i, stat) in evaluate_rewards(batch, rewards)?.into_iter().enumerate() {
        rows.push(EvalRow {
            target: Target::Reward(i),
            stat,
        });
    }
    for w in ws {
        let rw = weighted_reward(rewards, w)?;
        rows.push(EvalRow {
            target: Target::Weighted(w.as_slice().to_vec()),
            stat: Stat::of(&rw.eval_batch(batch)?)?,
        });
    }
    Ok(EvalReport { rows })
}

pub const EVAL_HEADER: &str = "method,w,target,mean,se,n";

/// A labelled report row as written to the evaluation CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub method: String,
    pub w: Option<f64>,
    pub row: EvalRow,
}

pub fn format_eval_csv(records: &[EvalRecord]) -> String {
    let mut out = String::from(EVAL_HEADER);
    out.push('\n');
    for r in records {
        let w = r.w.map(|w| w.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.method, w, r.row.target, r.row.stat.mean, r.row.stat.se, r.row.stat.n
        ));
    }
    out
}

pub fn parse_eval_csv(text: &str) -> Result<Vec<EvalRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(EVAL_HEADER) {
        return Err(Error::format("eval csv", "missing or unexpected header"));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            let bad = |what: &str| Error::format("eval csv", format!("line {}: bad {what}", i + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad("field count"));
            }
            let num = |s: &str, what: &str| s.parse::<f64>().map_err(|_| bad(what));
            Ok(EvalRecord {
                method: f[0].to_string(),
                w: if f[1].is_empty() {
                    None
                } else {
                    Some(num(f[1], "w")?)
                },
                row: EvalRow {
                    target: f[2].parse()?,
                    stat: Stat {
                        mean: num(f[3], "mean")?,
                        se: num(f[4], "se")?,
                        n: f[5].parse().map_err(|_| bad("n"))?,
                    },
                },
            })
        })
        .collect()
}
