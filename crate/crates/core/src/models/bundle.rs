//! Self-describing model files: parameters plus the vocabulary needed to
//! encode inputs, in the adcore checkpoint format.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelKind};
use crate::adcore::{load_checkpoint, save_checkpoint, CheckpointHeader, ParamSet};
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};

/// Provenance recorded next to the parameters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    /// Languages the parameters were trained on.
    pub languages: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regime: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct HeaderMeta {
    #[serde(flatten)]
    info: ModelInfo,
    vocabulary: serde_json::Value,
}

pub struct LoadedModel {
    pub model: Model,
    pub params: ParamSet,
    pub header: CheckpointHeader,
    pub info: ModelInfo,
}

pub fn save_model(path: &Path, model: &Model, params: &ParamSet, config_hash: &str, seed: u64, info: ModelInfo) -> Result<()> {
    model.check_params(params)?;
    let mut header = CheckpointHeader::new(model.kind().as_str(), params);
    header.vocab_hash = model.vocab().hash();
    header.config_hash = config_hash.to_string();
    header.seed = seed;
    header.meta = serde_json::to_value(HeaderMeta {
        info,
        vocabulary: serde_json::from_str(&model.vocab().to_json())?,
    })?;
    save_checkpoint(path, &header, params)
}

/// Reads a file written by [`save_model`]; any inconsistency is reported
/// as [`Error::Checkpoint`].
pub fn load_model(path: &Path) -> Result<LoadedModel> {
    let bad = |e: &dyn std::fmt::Display| Error::Checkpoint(format!("{}: {e}", path.display()));
    let (header, params) = load_checkpoint(path).map_err(|e| bad(&e))?;
    let meta: HeaderMeta = serde_json::from_value(header.meta.clone()).map_err(|e| bad(&e))?;
    let vocab = Vocabulary::from_json(&meta.vocabulary.to_string()).map_err(|e| bad(&e))?;
    if vocab.hash() != header.vocab_hash {
        return Err(bad(&"vocabulary does not match its recorded hash"));
    }
    let kind: ModelKind = header.model_kind.parse().map_err(|e: Error| bad(&e))?;
    let model = Model::from_params(kind, vocab, &params).map_err(|e| bad(&e))?;
    Ok(LoadedModel {
        model,
        params,
        header,
        info: meta.info,
    })
}
