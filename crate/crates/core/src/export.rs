//! JSON artifacts written by the command-line tool.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::effective_model::EffectiveModel;
use crate::error::Result;
use crate::stats::Estimate;

/// `model.json`: the limit model under the conventional symbol names.
pub fn model_json(model: &EffectiveModel, provenance: Value) -> Value {
    json!({
        "D_plus": model.d_plus,
        "D_minus": model.d_minus,
        "q": [model.q_plus, model.q_minus],
        "p": [model.p_plus, model.p_minus],
        "alpha": model.alpha,
        "K": model.k,
        "M_plus": model.m_plus,
        "M_minus": model.m_minus,
        "skew_p": model.skew_p,
        "provenance": provenance,
    })
}

/// Provenance block attached to every artifact.
pub fn provenance(config_hash: &str, seed: u64, command: &str) -> Value {
    json!({
        "config_hash": config_hash,
        "seed": seed,
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
    })
}

/// An estimate together with the inputs that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateRecord {
    pub name: String,
    #[serde(flatten)]
    pub estimate: Estimate,
    pub seed: u64,
    pub params: BTreeMap<String, f64>,
}

pub fn write_json<W: Write, T: Serialize + ?Sized>(w: W, value: &T) -> Result<()> {
    serde_json::to_writer_pretty(w, value)?;
    Ok(())
}
