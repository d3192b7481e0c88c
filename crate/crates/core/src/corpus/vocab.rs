use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::{InflectionExample, LanguageId, TaskDataset};
use crate::adcore::sha256_hex;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Bidirectional symbol/index map with first-seen index order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SymbolTable {
    symbols: Vec<String>,
    index: HashMap<String, usize>,
}

impl SymbolTable {
    fn with_reserved() -> Self {
        let mut t = Self::default();
        for s in RESERVED {
            t.add(s);
        }
        t
    }

    fn add(&mut self, symbol: &str) -> usize {
        if let Some(&i) = self.index.get(symbol) {
            return i;
        }
        let i = self.symbols.len();
        self.symbols.push(symbol.to_string());
        self.index.insert(symbol.to_string(), i);
        i
    }

    pub fn get(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied()
    }

    pub fn symbol(&self, index: usize) -> Option<&str> {
        self.symbols.get(index).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    fn to_map(&self) -> BTreeMap<String, usize> {
        self.symbols.iter().cloned().zip(0..).collect()
    }

    fn from_map(map: &BTreeMap<String, usize>) -> Result<Self> {
        let mut symbols = vec![None; map.len()];
        for (s, &i) in map {
            let slot = symbols
                .get_mut(i)
                .ok_or_else(|| Error::VocabMismatch(format!("index {i} out of range")))?;
            if slot.replace(s.clone()).is_some() {
                return Err(Error::VocabMismatch(format!("index {i} assigned twice")));
            }
        }
        let mut t = Self::default();
        for s in symbols {
            t.add(&s.expect("all indices filled"));
        }
        Ok(t)
    }
}

/// Character, morphological-tag and language inventories.
///
/// Characters own the reserved indices 0..4 and form the output space. Model
/// inputs use one shared index space: characters first, then tags, then
/// languages.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    chars: SymbolTable,
    tags: SymbolTable,
    languages: SymbolTable,
}

#[derive(Serialize, Deserialize)]
struct VocabularyJson {
    characters: BTreeMap<String, usize>,
    tags: BTreeMap<String, usize>,
    languages: BTreeMap<String, usize>,
}

impl Vocabulary {
    /// Union of symbols over `datasets` in first-seen order.
    pub fn build(datasets: &[&TaskDataset]) -> Result<Self> {
        if datasets.iter().all(|d| d.is_empty()) {
            return Err(Error::EmptyData("vocabulary needs at least one example".into()));
        }
        let mut v = Self {
            chars: SymbolTable::with_reserved(),
            tags: SymbolTable::default(),
            languages: SymbolTable::default(),
        };
        for ds in datasets {
            v.languages.add(ds.language.as_str());
            for ex in &ds.examples {
                v.add_example(ex);
            }
        }
        Ok(v)
    }

    fn add_example(&mut self, ex: &InflectionExample) {
        self.languages.add(ex.language.as_str());
        for t in &ex.tags {
            self.tags.add(t);
        }
        let mut buf = [0u8; 4];
        for c in ex.lemma.chars().chain(ex.form.chars()) {
            self.chars.add(c.encode_utf8(&mut buf));
        }
    }

    /// Reserves a language symbol that has no data yet.
    pub fn reserve_language(&mut self, language: &LanguageId) -> usize {
        self.languages.add(language.as_str())
    }

    pub fn characters(&self) -> &SymbolTable {
        &self.chars
    }

    pub fn tags(&self) -> &SymbolTable {
        &self.tags
    }

    pub fn languages(&self) -> &SymbolTable {
        &self.languages
    }

    /// Size of the output (character) space including reserved symbols.
    pub fn output_size(&self) -> usize {
        self.chars.len()
    }

    /// Size of the shared input space.
    pub fn input_size(&self) -> usize {
        self.chars.len() + self.tags.len() + self.languages.len()
    }

    pub fn char_index(&self, c: char) -> Option<usize> {
        let mut buf = [0u8; 4];
        self.chars.get(c.encode_utf8(&mut buf))
    }

    pub fn tag_input_index(&self, tag: &str) -> Option<usize> {
        self.tags.get(tag).map(|i| self.chars.len() + i)
    }

    pub fn language_input_index(&self, language: &LanguageId) -> Option<usize> {
        self.languages
            .get(language.as_str())
            .map(|i| self.chars.len() + self.tags.len() + i)
    }

    pub fn has_language(&self, language: &LanguageId) -> bool {
        self.languages.get(language.as_str()).is_some()
    }

    /// Symbol for an index of the shared input space.
    pub fn input_symbol(&self, index: usize) -> Option<&str> {
        let c = self.chars.len();
        let t = self.tags.len();
        if index < c {
            self.chars.symbol(index)
        } else if index < c + t {
            self.tags.symbol(index - c)
        } else {
            self.languages.symbol(index - c - t)
        }
    }

    /// Output indices to a string; reserved markers are dropped except UNK,
    /// which decodes to its glyph.
    pub fn decode_chars(&self, ids: &[usize]) -> String {
        let mut s = String::new();
        for &i in ids {
            match i {
                PAD | BOS | EOS => {}
                _ => s.push_str(self.chars.symbol(i).unwrap_or(RESERVED[UNK])),
            }
        }
        s
    }

    pub fn to_json(&self) -> String {
        let j = VocabularyJson {
            characters: self.chars.to_map(),
            tags: self.tags.to_map(),
            languages: self.languages.to_map(),
        };
        serde_json::to_string_pretty(&j).expect("vocabulary serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let j: VocabularyJson = serde_json::from_str(text)?;
        let chars = SymbolTable::from_map(&j.characters)?;
        for (i, r) in RESERVED.iter().enumerate() {
            if chars.symbol(i) != Some(r) {
                return Err(Error::VocabMismatch(format!("reserved index {i} is not {r}")));
            }
        }
        Ok(Self {
            chars,
            tags: SymbolTable::from_map(&j.tags)?,
            languages: SymbolTable::from_map(&j.languages)?,
        })
    }

    /// SHA-256 of the canonical JSON export.
    pub fn hash(&self) -> String {
        sha256_hex(self.to_json().as_bytes())
    }
}

/// An encoded sequence with the number of UNK substitutions it needed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Encoded {
    pub ids: Vec<usize>,
    pub unk: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PgEncoded {
    pub tags: Encoded,
    pub chars: Encoded,
}

struct Builder {
    ids: Vec<usize>,
    unk: usize,
}

impl Builder {
    fn new() -> Self {
        Self { ids: vec![BOS], unk: 0 }
    }

    fn push(&mut self, id: Option<usize>) {
        match id {
            Some(i) => self.ids.push(i),
            None => {
                self.ids.push(UNK);
                self.unk += 1;
            }
        }
    }

    fn chars(&mut self, vocab: &Vocabulary, s: &str) {
        for c in s.chars() {
            self.push(vocab.char_index(c));
        }
    }

    fn tags(&mut self, vocab: &Vocabulary, ex: &InflectionExample) {
        self.push(vocab.language_input_index(&ex.language));
        for t in &ex.tags {
            self.push(vocab.tag_input_index(t));
        }
    }

    fn finish(mut self) -> Encoded {
        self.ids.push(EOS);
        Encoded {
            ids: self.ids,
            unk: self.unk,
        }
    }
}

/// `[BOS, language, tags.., lemma chars.., EOS]` in the shared input space.
pub fn encode_med_input(vocab: &Vocabulary, ex: &InflectionExample) -> Encoded {
    let mut b = Builder::new();
    b.tags(vocab, ex);
    b.chars(vocab, &ex.lemma);
    b.finish()
}

/// Tag sequence `[BOS, language, tags.., EOS]` and character sequence
/// `[BOS, lemma chars.., EOS]`.
pub fn encode_pg_input(vocab: &Vocabulary, ex: &InflectionExample) -> PgEncoded {
    let mut t = Builder::new();
    t.tags(vocab, ex);
    let mut c = Builder::new();
    c.chars(vocab, &ex.lemma);
    PgEncoded {
        tags: t.finish(),
        chars: c.finish(),
    }
}

/// `[BOS, form chars.., EOS]` in the output space.
pub fn encode_target(vocab: &Vocabulary, form: &str) -> Encoded {
    let mut b = Builder::new();
    b.chars(vocab, form);
    b.finish()
}
