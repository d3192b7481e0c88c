//! Inflection data: SIGMORPHON-style TSV parsing, vocabularies, model input
//! encodings, batch sampling and synthetic language families.

mod sampling;
pub mod synth;
mod vocab;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

pub use sampling::{sample_indices, sample_inner_batch};
pub use synth::{generate_synthetic_family, FamilySpec, SyntheticDataset, SyntheticLanguage};
pub use vocab::{
    encode_med_input, encode_pg_input, encode_target, Encoded, PgEncoded, SymbolTable, Vocabulary,
    BOS, EOS, PAD, RESERVED, UNK,
};

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LanguageId(pub String);

impl LanguageId {
    pub fn new(s: impl Into<String>) -> Self {
        Self(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for LanguageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for LanguageId {
    fn from(s: &str) -> Self {
        Self(s.to_string())
    }
}

/// NFC normalization applied to all text entering the system.
pub fn nfc(s: &str) -> String {
    s.nfc().collect()
}

/// One paradigm slot: lemma, tag sequence, inflected form, language.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InflectionExample {
    pub lemma: String,
    pub tags: Vec<String>,
    pub form: String,
    pub language: LanguageId,
}

impl InflectionExample {
    pub fn new(
        lemma: &str,
        tags: Vec<String>,
        form: &str,
        language: LanguageId,
    ) -> Result<Self> {
        if lemma.is_empty() || form.is_empty() {
            return Err(Error::invalid("lemma and form must be non-empty"));
        }
        if tags.is_empty() || tags.iter().any(|t| t.is_empty()) {
            return Err(Error::invalid("tag list must be non-empty without empty tags"));
        }
        Ok(Self {
            lemma: nfc(lemma),
            tags: tags.iter().map(|t| nfc(t)).collect(),
            form: nfc(form),
            language,
        })
    }

    pub fn tag_string(&self) -> String {
        self.tags.join(";")
    }
}

/// All inflected forms of one lemma, keyed by tag sequence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Paradigm {
    pub lemma: String,
    pub slots: BTreeMap<Vec<String>, String>,
}

impl Paradigm {
    pub fn new(lemma: &str) -> Self {
        Self {
            lemma: nfc(lemma),
            slots: BTreeMap::new(),
        }
    }

    /// Adds a slot; a repeated tag sequence is an error.
    pub fn add(&mut self, tags: Vec<String>, form: &str) -> Result<()> {
        if self.slots.contains_key(&tags) {
            return Err(Error::invalid(format!("duplicate slot {}", tags.join(";"))));
        }
        self.slots.insert(tags, nfc(form));
        Ok(())
    }

    pub fn examples(&self, language: &LanguageId) -> Result<Vec<InflectionExample>> {
        self.slots
            .iter()
            .map(|(tags, form)| InflectionExample::new(&self.lemma, tags.clone(), form, language.clone()))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Examples of one language and split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskDataset {
    pub language: LanguageId,
    pub split: Split,
    pub examples: Vec<InflectionExample>,
}

impl TaskDataset {
    pub fn new(language: LanguageId, split: Split, examples: Vec<InflectionExample>) -> Result<Self> {
        if let Some(bad) = examples.iter().find(|e| e.language != language) {
            return Err(Error::invalid(format!(
                "example for `{}` in dataset of `{language}`",
                bad.language
            )));
        }
        Ok(Self {
            language,
            split,
            examples,
        })
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// TSV text, one `lemma<TAB>form<TAB>tags` line per example.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for e in &self.examples {
            out.push_str(&e.lemma);
            out.push('\t');
            out.push_str(&e.form);
            out.push('\t');
            out.push_str(&e.tag_string());
            out.push('\n');
        }
        out
    }
}

/// Parses `lemma<TAB>form<TAB>tag;tag;...` lines. Blank lines are skipped;
/// everything else must have exactly three fields.
pub fn parse_dataset(text: &str, language: &LanguageId) -> Result<TaskDataset> {
    let mut examples = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        let tags = fields[2].split(';').map(str::to_string).collect();
        let ex = InflectionExample::new(fields[0], tags, fields[1], language.clone()).map_err(|e| {
            Error::Parse {
                line: i + 1,
                message: e.to_string(),
            }
        })?;
        examples.push(ex);
    }
    TaskDataset::new(language.clone(), Split::Train, examples)
}

pub fn load_dataset(path: &std::path::Path, language: &LanguageId, split: Split) -> Result<TaskDataset> {
    let text = std::fs::read_to_string(path)?;
    Ok(parse_dataset(&text, language)?.with_split(split))
}

/// Train/dev/test datasets of one language.
#[derive(Clone, Debug, PartialEq)]
pub struct LanguageData {
    pub train: TaskDataset,
    pub dev: TaskDataset,
    pub test: TaskDataset,
}

impl LanguageData {
    pub fn split(&self, split: Split) -> &TaskDataset {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    pub fn all(&self) -> [&TaskDataset; 3] {
        [&self.train, &self.dev, &self.test]
    }
}
