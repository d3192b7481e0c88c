//! End-to-end runs of one training regime on one target language.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{evaluate_model, EvalReport, PredictionRow};
use crate::adcore::sha256_hex;
use crate::corpus::{LanguageData, LanguageId, SyntheticDataset, Vocabulary};
use crate::error::{Error, Result};
use crate::metatrain::{
    finetune, init_target_language_embedding, maml_train, multitask_train, train_monolingual, MetaConfig, NullSink,
    TaskHandle, TrainState,
};
use crate::models::{DecodeOptions, Model, ModelDims, ModelKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Regime {
    /// Meta-training only; the target is scored with the meta-learned
    /// parameters and an initialized language embedding.
    #[serde(rename = "maml")]
    Maml,
    /// Joint training on the sources plus the target's training data.
    #[serde(rename = "multitask")]
    Multitask,
    /// Joint training on the sources, then fine-tuning on the target.
    #[serde(rename = "multitask+ft")]
    MultitaskFt,
    #[serde(rename = "maml+ft")]
    MamlFt,
    /// Training on the target alone.
    #[serde(rename = "mono")]
    Mono,
}

impl Regime {
    pub const ALL: [Regime; 5] = [Regime::Maml, Regime::Multitask, Regime::MultitaskFt, Regime::MamlFt, Regime::Mono];

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Maml => "maml",
            Regime::Multitask => "multitask",
            Regime::MultitaskFt => "multitask+ft",
            Regime::MamlFt => "maml+ft",
            Regime::Mono => "mono",
        }
    }

    pub fn uses_sources(self) -> bool {
        self != Regime::Mono
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Regime::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown regime `{s}`")))
    }
}

/// Splits and family labels for a set of languages.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExperimentData {
    pub languages: BTreeMap<LanguageId, LanguageData>,
    pub families: BTreeMap<LanguageId, String>,
}

impl ExperimentData {
    pub fn from_synthetic(datasets: &[SyntheticDataset]) -> Self {
        let mut out = Self::default();
        for d in datasets {
            out.languages.insert(d.language().clone(), d.data.clone());
            out.families.insert(d.language().clone(), d.family.clone());
        }
        out
    }

    pub fn get(&self, language: &LanguageId) -> Result<&LanguageData> {
        self.languages
            .get(language)
            .ok_or_else(|| Error::Config(format!("no data for language `{language}`")))
    }

    pub fn handle(&self, language: &LanguageId) -> Result<TaskHandle> {
        let d = self.get(language)?;
        TaskHandle::new(d.train.clone(), d.dev.clone())
    }

    /// Vocabulary over every language's train and dev splits. Test data is
    /// left out so unseen test characters surface as UNK.
    pub fn vocabulary(&self) -> Result<Vocabulary> {
        let sets: Vec<_> = self.languages.values().flat_map(|d| [&d.train, &d.dev]).collect();
        let mut vocab = Vocabulary::build(&sets)?;
        for lang in self.languages.keys() {
            vocab.reserve_language(lang);
        }
        Ok(vocab)
    }
}

/// Stable hash of a configuration's serialized form.
pub fn config_hash(cfg: &MetaConfig) -> String {
    sha256_hex(serde_json::to_string(cfg).expect("config serializes").as_bytes())
}

/// Pretrained initializations keyed by source set, seed and configuration,
/// held in memory and optionally mirrored to a directory.
#[derive(Default)]
pub struct PretrainCache {
    states: HashMap<String, TrainState>,
    dir: Option<PathBuf>,
    pub hits: usize,
    pub misses: usize,
}

impl PretrainCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_dir(dir: PathBuf) -> Self {
        Self {
            dir: Some(dir),
            ..Self::default()
        }
    }

    fn get_or_train(&mut self, key: String, train: impl FnOnce() -> Result<TrainState>) -> Result<TrainState> {
        if let Some(s) = self.states.get(&key) {
            self.hits += 1;
            return Ok(s.clone());
        }
        let path = self.dir.as_ref().map(|d| d.join(format!("{key}.json")));
        if let Some(p) = path.as_ref().filter(|p| p.exists()) {
            self.hits += 1;
            let state = TrainState::load(p)?;
            self.states.insert(key, state.clone());
            return Ok(state);
        }
        self.misses += 1;
        let state = train()?;
        if let Some(p) = path {
            std::fs::create_dir_all(p.parent().expect("joined path"))?;
            state.save(&p)?;
        }
        self.states.insert(key, state.clone());
        Ok(state)
    }
}

/// Everything shared by the runs of one experiment.
pub struct RegimeSetup<'a> {
    pub kind: ModelKind,
    pub dims: ModelDims,
    pub cfg: MetaConfig,
    pub data: &'a ExperimentData,
    pub vocab: Vocabulary,
    /// Development languages for model selection during pretraining.
    pub dev_languages: Vec<LanguageId>,
    pub decode: DecodeOptions,
}

/// Outcome of one regime run.
pub struct RegimeRun {
    pub model: Model,
    pub pretrained: Option<TrainState>,
    /// State whose best checkpoint is the evaluated model.
    pub state: TrainState,
    pub params: crate::adcore::ParamSet,
    pub report: EvalReport,
    pub predictions: Vec<PredictionRow>,
}

impl RegimeSetup<'_> {
    pub fn model(&self) -> Result<Model> {
        Model::new(self.kind, self.dims, self.vocab.clone())
    }

    fn handles(&self, langs: &[LanguageId]) -> Result<Vec<TaskHandle>> {
        langs.iter().map(|l| self.data.handle(l)).collect()
    }

    fn cache_key(&self, stage: &str, sources: &[LanguageId]) -> String {
        let mut sorted: Vec<&str> = sources.iter().map(|l| l.as_str()).collect();
        sorted.sort_unstable();
        let dev: Vec<&str> = self.dev_languages.iter().map(|l| l.as_str()).collect();
        let id = serde_json::json!({
            "stage": stage,
            "kind": self.kind.as_str(),
            "dims": [self.dims.embed, self.dims.hidden, self.dims.attention],
            "sources": sorted,
            "dev": dev,
            "seed": self.cfg.seed,
            "config": config_hash(&self.cfg),
            "vocab": self.vocab.hash(),
        });
        sha256_hex(id.to_string().as_bytes())[..32].to_string()
    }

    /// Trains `regime` for `target` and scores the selected parameters on
    /// the target's test split.
    pub fn run(
        &self,
        regime: Regime,
        sources: &[LanguageId],
        target: &LanguageId,
        cache: &mut PretrainCache,
    ) -> Result<RegimeRun> {
        self.cfg.validate()?;
        if regime.uses_sources() && sources.is_empty() {
            return Err(Error::EmptyData(format!("regime {regime} needs at least one source language")));
        }
        if sources.contains(target) {
            return Err(Error::Config(format!("target `{target}` is also a source")));
        }
        let model = self.model()?;
        let target_task = self.data.handle(target)?;
        let source_tasks = self.handles(sources)?;
        let dev = self.handles(&self.dev_languages)?;
        let cfg = &self.cfg;
        let mut sink = NullSink;

        let embed = |state: &TrainState| -> Result<crate::adcore::ParamSet> {
            let mut rng = crate::seeded_rng(cfg.seed ^ 0xe3b);
            init_target_language_embedding(state.best_params(), &self.vocab, target, &cfg.embedding_init, sources, &mut rng)
        };

        let (pretrained, state, params) = match regime {
            Regime::Mono => {
                let s = train_monolingual(cfg, &model, &target_task, &mut sink)?;
                let p = s.best_params().clone();
                (None, s, p)
            }
            Regime::Multitask => {
                let s = multitask_train(cfg, &model, &source_tasks, Some(&target_task), &dev, &mut sink)?;
                let p = s.best_params().clone();
                (None, s, p)
            }
            Regime::Maml | Regime::MamlFt | Regime::MultitaskFt => {
                let meta = regime != Regime::MultitaskFt;
                let key = self.cache_key(if meta { "maml" } else { "multitask" }, sources);
                let pre = cache.get_or_train(key, || {
                    if meta {
                        maml_train(cfg, &model, &source_tasks, &dev, &mut NullSink)
                    } else {
                        multitask_train(cfg, &model, &source_tasks, None, &dev, &mut NullSink)
                    }
                })?;
                let mut init = pre.clone();
                init.best = None;
                init.params = embed(&pre)?;
                if regime == Regime::Maml {
                    let p = init.params.clone();
                    (Some(pre), init, p)
                } else {
                    let s = finetune(&init, cfg, &model, &target_task, &mut sink)?;
                    let p = s.best_params().clone();
                    (Some(pre), s, p)
                }
            }
        };

        let test = &self.data.get(target)?.test;
        let (mut report, predictions) = evaluate_model(&model, &params, &self.vocab.hash(), &[test], self.decode)?;
        report.config_hash = config_hash(cfg);
        Ok(RegimeRun {
            model,
            pretrained,
            state,
            params,
            report,
            predictions,
        })
    }
}
