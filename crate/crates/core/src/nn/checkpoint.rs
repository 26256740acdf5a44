//! JSON checkpoints.
//!
//! ```text
//! { "format_version": 1,
//!   "arch": { "data_dim", "t_embed_dim", "hidden", "activation" },
//!   "schedule": { "kind", "T", "beta_start", "beta_end" },
//!   "eta": 1.0,
//!   "params": [ ... ],
//!   "meta": { "key": "value" } }
//! ```
//!
//! Floats are written in their shortest round-trippable form, so a load
//! reproduces the parameter vector bit for bit.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::ScheduleSpec;

use super::mlp::{MlpArchitecture, MlpParams};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: MlpParams,
    pub schedule: ScheduleSpec,
    pub eta: f64,
    pub meta: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Document {
    format_version: u32,
    arch: MlpArchitecture,
    schedule: ScheduleSpec,
    eta: f64,
    params: Vec<f64>,
    meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        if let Some(bad) = self.params.flat().iter().find(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                context: "checkpoint",
                detail: format!("parameter value {bad}"),
            });
        }
        let doc = Document {
            format_version: CHECKPOINT_FORMAT_VERSION,
            arch: self.params.arch().clone(),
            schedule: self.schedule,
            eta: self.eta,
            params: self.params.flat().to_vec(),
            meta: self.meta.clone(),
        };
        let mut s = serde_json::to_string_pretty(&doc)
            .map_err(|e| Error::format("checkpoint", e.to_string()))?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: Document =
            serde_json::from_str(text).map_err(|e| Error::format("checkpoint", e.to_string()))?;
        if doc.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::format(
                "checkpoint",
                format!(
                    "schema version {} is not supported (expected {CHECKPOINT_FORMAT_VERSION})",
                    doc.format_version
                ),
            ));
        }
        if !(0.0..=1.0).contains(&doc.eta) {
            return Err(Error::format(
                "checkpoint",
                format!("eta {} not in [0, 1]", doc.eta),
            ));
        }
        doc.schedule.build()?;
        let params = MlpParams::new(doc.arch, doc.params)?;
        Ok(Checkpoint {
            params,
            schedule: doc.schedule,
            eta: doc.eta,
            meta: doc.meta,
        })
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let text = ckpt.to_json()?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_json(&text)
}
