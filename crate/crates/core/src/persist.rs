//! Versioned JSON documents for oracles and classifiers.
//!
//! Every document shares the envelope
//! `{format_version, kind, K, D, prior, parameters}`. Floats are written by
//! `serde_json` as the shortest decimal that parses back to the same `f64`,
//! so a save/load cycle is bit-exact.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::numcore::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct Envelope {
    pub format_version: u32,
    pub kind: String,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "D")]
    pub d: usize,
    pub prior: Vec<f64>,
    pub parameters: serde_json::Value,
}

impl Envelope {
    pub fn parse(s: &str, expected_kinds: &[&str]) -> Result<Self> {
        let env: Envelope = serde_json::from_str(s)?;
        if env.format_version != FORMAT_VERSION {
            return contract(format!(
                "unsupported format_version {} (this build reads {FORMAT_VERSION})",
                env.format_version
            ));
        }
        if !expected_kinds.contains(&env.kind.as_str()) {
            return contract(format!("document kind {:?} is not one of {expected_kinds:?}", env.kind));
        }
        Ok(env)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct TensorDoc {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl From<&Tensor> for TensorDoc {
    fn from(t: &Tensor) -> Self {
        Self {
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        }
    }
}

impl TryFrom<TensorDoc> for Tensor {
    type Error = crate::Error;
    fn try_from(d: TensorDoc) -> Result<Self> {
        Tensor::new(d.shape, d.data)
    }
}
