use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adcore::ParamSet;
use crate::corpus::{LanguageId, Vocabulary};
use crate::error::{Error, Result};
use crate::models::INIT_SCALE;

/// Initial embedding of a language symbol that was never trained.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingInit {
    /// Mean of the source-language embeddings.
    #[default]
    Mean,
    /// Fresh uniform draw at the initialization scale.
    Random,
    /// Copy of the named language's embedding.
    Copy(String),
}

/// Returns `params` with the embedding row of `target` re-initialized.
///
/// `sources` lists the languages averaged by [`EmbeddingInit::Mean`]; when
/// empty, every other language of the vocabulary is used.
pub fn init_target_language_embedding<R: Rng + ?Sized>(
    params: &ParamSet,
    vocab: &Vocabulary,
    target: &LanguageId,
    mode: &EmbeddingInit,
    sources: &[LanguageId],
    rng: &mut R,
) -> Result<ParamSet> {
    let index = |lang: &LanguageId| {
        vocab
            .language_input_index(lang)
            .ok_or_else(|| Error::VocabMismatch(format!("unknown language symbol `{lang}`")))
    };
    let row = index(target)?;
    let emb = params.require("emb")?;
    let dim = emb.shape()[1];
    if emb.shape()[0] != vocab.input_size() {
        return Err(Error::VocabMismatch("embedding table does not match the vocabulary".into()));
    }
    let value: Vec<f64> = match mode {
        EmbeddingInit::Mean => {
            let langs: Vec<LanguageId> = if sources.is_empty() {
                vocab
                    .languages()
                    .symbols()
                    .iter()
                    .map(LanguageId::new)
                    .filter(|l| l != target)
                    .collect()
            } else {
                sources.to_vec()
            };
            if langs.is_empty() {
                return Err(Error::invalid("no source languages to average"));
            }
            let mut acc = vec![0.0; dim];
            for l in &langs {
                for (a, x) in acc.iter_mut().zip(emb.row(index(l)?)) {
                    *a += x;
                }
            }
            acc.into_iter().map(|a| a / langs.len() as f64).collect()
        }
        EmbeddingInit::Random => (0..dim).map(|_| rng.random_range(-INIT_SCALE..=INIT_SCALE)).collect(),
        EmbeddingInit::Copy(name) => emb.row(index(&LanguageId::new(name))?).to_vec(),
    };
    let mut out = params.clone();
    out.get_mut("emb").expect("checked above").data_mut()[row * dim..(row + 1) * dim].copy_from_slice(&value);
    Ok(out)
}
