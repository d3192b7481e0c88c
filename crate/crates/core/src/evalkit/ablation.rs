use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::experiment::{PretrainCache, Regime, RegimeSetup};
use super::EvalReport;
use crate::corpus::LanguageId;
use crate::error::{Error, Result};

/// Which source languages an ablation run may use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AblationMode {
    /// Every other language.
    #[serde(rename = "ALL")]
    All,
    /// Only the target's family.
    #[serde(rename = "LF")]
    Lf,
    /// Only languages outside the target's family.
    #[serde(rename = "OtherLF")]
    OtherLf,
    /// No sources: monolingual training.
    #[serde(rename = "SINGLE")]
    Single,
}

impl AblationMode {
    pub const ALL: [AblationMode; 4] = [AblationMode::All, AblationMode::Lf, AblationMode::OtherLf, AblationMode::Single];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationMode::All => "ALL",
            AblationMode::Lf => "LF",
            AblationMode::OtherLf => "OtherLF",
            AblationMode::Single => "SINGLE",
        }
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationMode::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown ablation mode `{s}`")))
    }
}

/// Pretraining regime of an ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationRegime {
    #[serde(rename = "maml+ft")]
    MamlFt,
    #[serde(rename = "multitask+ft")]
    MultitaskFt,
}

impl From<AblationRegime> for Regime {
    fn from(r: AblationRegime) -> Self {
        match r {
            AblationRegime::MamlFt => Regime::MamlFt,
            AblationRegime::MultitaskFt => Regime::MultitaskFt,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub target: LanguageId,
    pub mode: AblationMode,
    /// Sorted source languages.
    pub sources: Vec<LanguageId>,
}

impl AblationSpec {
    /// Derives the source set from family labels. Languages in `exclude`
    /// (development languages, say) are never sources.
    pub fn new(
        target: &LanguageId,
        mode: AblationMode,
        families: &BTreeMap<LanguageId, String>,
        exclude: &[LanguageId],
    ) -> Result<Self> {
        let family = families
            .get(target)
            .ok_or_else(|| Error::Config(format!("target `{target}` has no family")))?;
        let candidates = families
            .iter()
            .filter(|(l, _)| *l != target && !exclude.contains(l));
        let sources: Vec<LanguageId> = match mode {
            AblationMode::Single => vec![],
            AblationMode::All => candidates.map(|(l, _)| l.clone()).collect(),
            AblationMode::Lf => candidates.filter(|(_, f)| *f == family).map(|(l, _)| l.clone()).collect(),
            AblationMode::OtherLf => candidates.filter(|(_, f)| *f != family).map(|(l, _)| l.clone()).collect(),
        };
        if mode != AblationMode::Single && sources.is_empty() {
            return Err(Error::Config(format!("{mode} source set for `{target}` is empty")));
        }
        Ok(Self {
            target: target.clone(),
            mode,
            sources,
        })
    }
}

/// Trains (or reuses from `cache`) an initialization on `spec.sources`,
/// fine-tunes on the target and scores its test split. SINGLE trains on the
/// target alone.
pub fn run_ablation(
    spec: &AblationSpec,
    setup: &RegimeSetup<'_>,
    regime: AblationRegime,
    cache: &mut PretrainCache,
) -> Result<EvalReport> {
    let regime = match spec.mode {
        AblationMode::Single => Regime::Mono,
        _ if spec.sources.is_empty() => {
            return Err(Error::Config(format!("{} source set for `{}` is empty", spec.mode, spec.target)));
        }
        _ => regime.into(),
    };
    Ok(setup.run(regime, &spec.sources, &spec.target, cache)?.report)
}
