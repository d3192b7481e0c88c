//! Deterministic synthetic language families.
//!
//! Every language draws stems from one shared syllable generator and inflects
//! them with its own rule table (tag -> strip/append suffix), followed by
//! language-specific character substitutions. Languages of one family must
//! agree on at least [`MIN_SHARED_RULES`] of their rules.
//!
//! Config schema (TOML):
//!
//! ```toml
//! tags_per_lemma = 3
//!
//! [stems]
//! onsets = "ptkmnlsr"
//! vowels = "aeiou"
//! codas = "nlr"
//! min_syllables = 1
//! max_syllables = 2
//!
//! [[language]]
//! name = "ala"
//! family = "north"
//! train = 2000
//! dev = 100
//! test = 500
//! rules = [["N;PL", "+en"], ["V;PST", "-1+et"], ["V;INF", "="]]
//! substitutions = [["k", "c"]]
//! ```
//!
//! Rule syntax: `=` keeps the stem, `+suf` appends, `-N+suf` drops the last
//! `N` characters then appends.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{InflectionExample, LanguageData, LanguageId, Split, TaskDataset};
use crate::error::{Error, Result};

pub const MIN_SHARED_RULES: f64 = 0.7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StemSpec {
    pub onsets: String,
    pub vowels: String,
    #[serde(default)]
    pub codas: String,
    pub min_syllables: usize,
    pub max_syllables: usize,
}

impl Default for StemSpec {
    fn default() -> Self {
        Self {
            onsets: "ptkbdgmnlrsv".into(),
            vowels: "aeiou".into(),
            codas: "nlrs".into(),
            min_syllables: 1,
            max_syllables: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticLanguage {
    pub name: String,
    pub family: String,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    /// `(tag sequence, rule)` pairs; tags are `;`-joined.
    pub rules: Vec<(String, String)>,
    #[serde(default)]
    pub substitutions: Vec<(String, String)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilySpec {
    pub tags_per_lemma: usize,
    #[serde(default)]
    pub stems: StemSpec,
    #[serde(rename = "language")]
    pub languages: Vec<SyntheticLanguage>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SuffixRule {
    pub strip: usize,
    pub suffix: String,
}

impl SuffixRule {
    pub fn parse(rule: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad rule `{rule}`"));
        if rule == "=" {
            return Ok(Self {
                strip: 0,
                suffix: String::new(),
            });
        }
        if let Some(rest) = rule.strip_prefix('+') {
            return Ok(Self {
                strip: 0,
                suffix: rest.to_string(),
            });
        }
        let rest = rule.strip_prefix('-').ok_or_else(bad)?;
        let (n, suffix) = rest.split_once('+').ok_or_else(bad)?;
        Ok(Self {
            strip: n.parse().map_err(|_| bad())?,
            suffix: suffix.to_string(),
        })
    }

    /// Applies the rule; at least one stem character always survives.
    pub fn apply(&self, stem: &str) -> String {
        let chars: Vec<char> = stem.chars().collect();
        let keep = chars.len().saturating_sub(self.strip).max(1.min(chars.len()));
        let mut out: String = chars[..keep].iter().collect();
        out.push_str(&self.suffix);
        out
    }
}

/// Generated splits for one language.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub family: String,
    pub data: LanguageData,
}

impl SyntheticDataset {
    pub fn language(&self) -> &LanguageId {
        &self.data.train.language
    }
}

struct CompiledLanguage<'a> {
    spec: &'a SyntheticLanguage,
    rules: Vec<(Vec<String>, SuffixRule)>,
    subst: HashMap<char, String>,
}

impl FamilySpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("family spec serializes")
    }

    pub fn families(&self) -> BTreeMap<LanguageId, String> {
        self.languages
            .iter()
            .map(|l| (LanguageId::new(&l.name), l.family.clone()))
            .collect()
    }

    fn compile(&self) -> Result<Vec<CompiledLanguage<'_>>> {
        if self.languages.len() < 2 {
            return Err(Error::Config("a family needs at least two languages".into()));
        }
        let s = &self.stems;
        if s.onsets.is_empty() || s.vowels.is_empty() || s.min_syllables == 0 || s.max_syllables < s.min_syllables {
            return Err(Error::Config("stem generator needs onsets, vowels and 1 <= min <= max syllables".into()));
        }
        let mut names = BTreeSet::new();
        let mut out = Vec::new();
        for lang in &self.languages {
            if !names.insert(lang.name.as_str()) {
                return Err(Error::Config(format!("duplicate language `{}`", lang.name)));
            }
            let mut seen = BTreeSet::new();
            let mut rules = Vec::new();
            for (tag, rule) in &lang.rules {
                if !seen.insert(tag.as_str()) {
                    return Err(Error::Config(format!(
                        "colliding tag `{tag}` in rule table of `{}`",
                        lang.name
                    )));
                }
                let tags: Vec<String> = tag.split(';').map(str::to_string).collect();
                if tags.iter().any(String::is_empty) {
                    return Err(Error::Config(format!("empty tag in `{tag}`")));
                }
                rules.push((tags, SuffixRule::parse(rule)?));
            }
            if self.tags_per_lemma == 0 || self.tags_per_lemma > rules.len() {
                return Err(Error::Config(format!(
                    "tags_per_lemma must be in 1..={} for `{}`",
                    rules.len(),
                    lang.name
                )));
            }
            let mut subst = HashMap::new();
            for (from, to) in &lang.substitutions {
                let mut it = from.chars();
                match (it.next(), it.next()) {
                    (Some(c), None) => {
                        subst.insert(c, to.clone());
                    }
                    _ => return Err(Error::Config(format!("substitution source `{from}` must be one character"))),
                }
            }
            out.push(CompiledLanguage { spec: lang, rules, subst });
        }
        for (i, a) in self.languages.iter().enumerate() {
            for b in &self.languages[i + 1..] {
                if a.family == b.family {
                    let shared = shared_rule_fraction(a, b);
                    if shared < MIN_SHARED_RULES {
                        return Err(Error::Config(format!(
                            "`{}` and `{}` share only {:.0}% of rules",
                            a.name,
                            b.name,
                            shared * 100.0
                        )));
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Fraction of the tag union on which two languages use the same rule.
pub fn shared_rule_fraction(a: &SyntheticLanguage, b: &SyntheticLanguage) -> f64 {
    let ra: BTreeMap<&str, &str> = a.rules.iter().map(|(t, r)| (t.as_str(), r.as_str())).collect();
    let rb: BTreeMap<&str, &str> = b.rules.iter().map(|(t, r)| (t.as_str(), r.as_str())).collect();
    let union: BTreeSet<&str> = ra.keys().chain(rb.keys()).copied().collect();
    if union.is_empty() {
        return 1.0;
    }
    let same = union.iter().filter(|t| ra.get(*t).is_some() && ra.get(*t) == rb.get(*t)).count();
    same as f64 / union.len() as f64
}

fn pick(chars: &[char], rng: &mut ChaCha8Rng) -> char {
    chars[rng.random_range(0..chars.len())]
}

fn random_stem(spec: &StemSpec, rng: &mut ChaCha8Rng) -> String {
    let onsets: Vec<char> = spec.onsets.chars().collect();
    let vowels: Vec<char> = spec.vowels.chars().collect();
    let codas: Vec<char> = spec.codas.chars().collect();
    let n = rng.random_range(spec.min_syllables..=spec.max_syllables);
    let mut s = String::new();
    for _ in 0..n {
        s.push(pick(&onsets, rng));
        s.push(pick(&vowels, rng));
    }
    if !codas.is_empty() && rng.random_bool(0.5) {
        s.push(pick(&codas, rng));
    }
    s
}

fn substitute(s: &str, subst: &HashMap<char, String>) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match subst.get(&c) {
            Some(r) => out.push_str(r),
            None => out.push(c),
        }
    }
    out
}

/// Generates train/dev/test data for every language of `spec`.
///
/// Splits are disjoint by lemma. Each language uses its own random stream
/// derived from `seed`, so adding a language does not change the others.
pub fn generate_synthetic_family(spec: &FamilySpec, seed: u64) -> Result<Vec<SyntheticDataset>> {
    let compiled = spec.compile()?;
    let tpl = spec.tags_per_lemma;
    let mut out = Vec::new();
    for (li, lang) in compiled.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(li as u64 + 1);
        let id = LanguageId::new(&lang.spec.name);
        let sizes = [lang.spec.train, lang.spec.dev, lang.spec.test];
        let lemma_counts: Vec<usize> = sizes.iter().map(|n| n.div_ceil(tpl)).collect();
        let total: usize = lemma_counts.iter().sum();

        let mut stems = Vec::with_capacity(total);
        let mut seen = BTreeSet::new();
        let mut attempts = 0usize;
        while stems.len() < total {
            attempts += 1;
            if attempts > 200 * total + 1000 {
                return Err(Error::Config(format!(
                    "stem space too small for {total} distinct lemmas in `{}`",
                    lang.spec.name
                )));
            }
            let s = random_stem(&spec.stems, &mut rng);
            if seen.insert(s.clone()) {
                stems.push(s);
            }
        }

        let mut stem_iter = stems.into_iter();
        let mut splits = Vec::new();
        for (split, (&size, &lemmas)) in Split::ALL.iter().zip(sizes.iter().zip(&lemma_counts)) {
            let mut examples = Vec::with_capacity(size);
            for stem in stem_iter.by_ref().take(lemmas) {
                let slots = rand::seq::index::sample(&mut rng, lang.rules.len(), tpl).into_vec();
                let lemma = substitute(&stem, &lang.subst);
                for slot in slots {
                    if examples.len() == size {
                        break;
                    }
                    let (tags, rule) = &lang.rules[slot];
                    let form = substitute(&rule.apply(&stem), &lang.subst);
                    examples.push(InflectionExample::new(&lemma, tags.clone(), &form, id.clone())?);
                }
            }
            splits.push(TaskDataset::new(id.clone(), *split, examples)?);
        }
        let test = splits.pop().unwrap();
        let dev = splits.pop().unwrap();
        let train = splits.pop().unwrap();
        out.push(SyntheticDataset {
            family: lang.spec.family.clone(),
            data: LanguageData { train, dev, test },
        });
    }
    Ok(out)
}

/// Writes `<dir>/<language>/{train,dev,test}.tsv` plus `families.json`.
pub fn write_family(datasets: &[SyntheticDataset], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut families = BTreeMap::new();
    for ds in datasets {
        let lang_dir = dir.join(ds.language().as_str());
        std::fs::create_dir_all(&lang_dir)?;
        for split in Split::ALL {
            std::fs::write(lang_dir.join(format!("{split}.tsv")), ds.data.split(split).to_tsv())?;
        }
        families.insert(ds.language().0.clone(), ds.family.clone());
    }
    std::fs::write(dir.join("families.json"), serde_json::to_string_pretty(&families)? + "\n")?;
    Ok(())
}

/// Ready-made family specs used by the transfer and ablation experiments.
pub mod presets {
    use super::*;

    /// Tag bundles shared by every preset language.
    pub const TAGS: [&str; 24] = [
        "N;NOM;SG", "N;NOM;PL", "N;ACC;SG", "N;ACC;PL", "N;GEN;SG", "N;GEN;PL", "N;DAT;SG", "N;DAT;PL",
        "N;INS;SG", "N;INS;PL", "N;LOC;SG", "N;LOC;PL", "V;PRS;1", "V;PRS;2", "V;PRS;3", "V;PST;1",
        "V;PST;2", "V;PST;3", "V;FUT;1", "V;FUT;2", "V;FUT;3", "V;IMP", "V;PTCP", "V;NEG",
    ];

    /// Rule table of the "north" family.
    pub const NORTH: [&str; 24] = [
        "=", "+en", "+a", "+ans", "+is", "+ens", "+ul", "+ulen", "-1+om", "-1+omi", "+et", "+eta",
        "+mo", "+ta", "-1+e", "-1+ak", "-1+aki", "+ok", "+ovi", "+ovit", "+ova", "-1+o", "+ent", "+ma",
    ];

    /// Tag bundles of the "south" family; none overlaps with [`TAGS`].
    pub const SOUTH_TAGS: [&str; 24] = [
        "S;ABS;1", "S;ABS;2", "S;ABS;3", "S;ERG;1", "S;ERG;2", "S;ERG;3", "S;ALL;1", "S;ALL;2",
        "S;ALL;3", "S;ABL;1", "S;ABL;2", "S;ABL;3", "W;HAB;A", "W;HAB;B", "W;HAB;C", "W;PRF;A",
        "W;PRF;B", "W;PRF;C", "W;OPT;A", "W;OPT;B", "W;OPT;C", "W;CAUS", "W;PASS", "W;RECP",
    ];

    /// Latin to Cyrillic transliteration: the south family is written in
    /// its own script.
    pub const CYRILLIC: [(&str, &str); 20] = [
        ("a", "а"), ("b", "б"), ("d", "д"), ("e", "е"), ("g", "г"), ("i", "и"), ("k", "к"), ("l", "л"), ("m", "м"), ("n", "н"),
        ("o", "о"), ("p", "п"), ("r", "р"), ("s", "с"), ("t", "т"), ("u", "у"), ("v", "в"), ("c", "ц"), ("w", "ш"), ("z", "з"),
    ];

    /// Rule table of the unrelated "south" family.
    pub const SOUTH: [&str; 24] = [
        "+u", "-1+ir", "+ko", "-1+una", "+dar", "+ost", "-1+e", "+ibe", "+nu", "-1+ig", "+sal", "+sali",
        "-1+iru", "+bi", "+dun", "+ga", "-1+egi", "+gat", "+rim", "-1+ora", "+dil", "+i", "-1+ud", "+eno",
    ];

    fn with_changes(base: &[&'static str; 24], changes: &[(usize, &'static str)]) -> [&'static str; 24] {
        let mut out = *base;
        for &(i, r) in changes {
            out[i] = r;
        }
        out
    }

    fn language(name: &str, family: &str, sizes: [usize; 3], rules: &[&str], subst: &[(&str, &str)]) -> SyntheticLanguage {
        tagged(&TAGS, name, family, sizes, rules, subst)
    }

    fn tagged(
        tags: &[&str],
        name: &str,
        family: &str,
        sizes: [usize; 3],
        rules: &[&str],
        subst: &[(&str, &str)],
    ) -> SyntheticLanguage {
        SyntheticLanguage {
            name: name.into(),
            family: family.into(),
            train: sizes[0],
            dev: sizes[1],
            test: sizes[2],
            rules: tags.iter().zip(rules).map(|(t, r)| (t.to_string(), r.to_string())).collect(),
            substitutions: subst.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect(),
        }
    }

    /// Two source languages and one target from a single family. Each
    /// source differs from the family table on 5 of 24 bundles; the target
    /// shares 2 of the second source's variants and has 4 of its own.
    pub fn transfer_family(source_train: usize, target_train: usize, target_dev: usize, target_test: usize) -> FamilySpec {
        let north_b = with_changes(&NORTH, &[(3, "+ant"), (7, "+ulon"), (13, "+te"), (19, "+ovet"), (22, "+int")]);
        let target = with_changes(&NORTH, &[(3, "+ant"), (13, "+te"), (5, "-1+uns"), (10, "+at"), (16, "-1+eki"), (23, "+mi")]);
        FamilySpec {
            tags_per_lemma: 3,
            stems: StemSpec::default(),
            languages: vec![
                language("nora", "north", [source_train, 100, 100], &NORTH, &[]),
                language("norb", "north", [source_train, 100, 100], &north_b, &[("v", "w")]),
                language("nort", "north", [target_train, target_dev, target_test], &target, &[("k", "c")]),
            ],
        }
    }

    /// Two families: the target's relatives and an unrelated family that
    /// shares neither script nor tag inventory with them.
    pub fn two_families(source_train: usize, target_train: usize, target_dev: usize, target_test: usize) -> FamilySpec {
        let mut spec = transfer_family(source_train, target_train, target_dev, target_test);
        let south_b = with_changes(&SOUTH, &[(1, "-1+er"), (6, "-1+a"), (12, "-1+ira"), (18, "+rom"), (21, "+e")]);
        let mut merged = CYRILLIC.to_vec();
        // `d` and `t` fall together in the second south language
        merged.iter_mut().filter(|(l, _)| *l == "d").for_each(|p| p.1 = "т");
        let sizes = [source_train, 100, 100];
        spec.languages.push(tagged(&SOUTH_TAGS, "soua", "south", sizes, &SOUTH, &CYRILLIC));
        spec.languages.push(tagged(&SOUTH_TAGS, "soub", "south", sizes, &south_b, &merged));
        spec
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lang(name: &str, family: &str, rules: &[(&str, &str)]) -> SyntheticLanguage {
        SyntheticLanguage {
            name: name.into(),
            family: family.into(),
            train: 30,
            dev: 6,
            test: 9,
            rules: rules.iter().map(|(t, r)| (t.to_string(), r.to_string())).collect(),
            substitutions: vec![],
        }
    }

    fn spec(languages: Vec<SyntheticLanguage>) -> FamilySpec {
        FamilySpec {
            tags_per_lemma: 2,
            stems: StemSpec::default(),
            languages,
        }
    }

    const BASE: [(&str, &str); 4] = [("PL", "+en"), ("PST", "-1+et"), ("SG", "="), ("GEN", "+s")];

    #[test]
    fn rule_application() {
        assert_eq!(SuffixRule::parse("+en").unwrap().apply("tal"), "talen");
        assert_eq!(SuffixRule::parse("-1+et").unwrap().apply("tal"), "taet");
        assert_eq!(SuffixRule::parse("=").unwrap().apply("tal"), "tal");
        assert_eq!(SuffixRule::parse("-5+x").unwrap().apply("ab"), "ax");
        assert!(SuffixRule::parse("en").is_err());
        assert!(SuffixRule::parse("-x+en").is_err());
    }

    #[test]
    fn languages_differ_only_on_changed_tag() {
        let mut changed = BASE;
        changed[0] = ("PL", "+ok");
        let other = lang("c", "g", &BASE);
        let a = generate_synthetic_family(&spec(vec![lang("a", "f", &BASE), other.clone()]), 5).unwrap();
        let b = generate_synthetic_family(&spec(vec![lang("a", "f", &changed), other]), 5).unwrap();
        let (a, b) = (&a[0].data.train.examples, &b[0].data.train.examples);
        assert_eq!(a.len(), b.len());
        let mut differing = 0;
        for (x, y) in a.iter().zip(b) {
            assert_eq!((&x.lemma, &x.tags), (&y.lemma, &y.tags));
            if x.tags == ["PL"] {
                assert_eq!(x.form, format!("{}en", x.lemma));
                assert_eq!(y.form, format!("{}ok", y.lemma));
                differing += 1;
            } else {
                assert_eq!(x.form, y.form);
            }
        }
        assert!(differing > 0);
    }

    #[test]
    fn sizes_and_disjoint_lemmas() {
        let s = spec(vec![lang("a", "f", &BASE), lang("b", "f", &BASE)]);
        let out = generate_synthetic_family(&s, 13).unwrap();
        for ds in &out {
            assert_eq!(ds.data.train.len(), 30);
            assert_eq!(ds.data.dev.len(), 6);
            assert_eq!(ds.data.test.len(), 9);
            let train: BTreeSet<_> = ds.data.train.examples.iter().map(|e| &e.lemma).collect();
            assert!(ds.data.test.examples.iter().all(|e| !train.contains(&e.lemma)));
        }
    }

    #[test]
    fn colliding_tags_rejected() {
        let bad = lang("a", "f", &[("PL", "+en"), ("PL", "+s")]);
        let s = spec(vec![bad, lang("b", "g", &BASE)]);
        assert!(matches!(generate_synthetic_family(&s, 1), Err(Error::Config(m)) if m.contains("colliding")));
    }

    #[test]
    fn same_family_must_share_rules() {
        let other = [("PL", "+a"), ("PST", "+b"), ("SG", "+c"), ("GEN", "+s")];
        let s = spec(vec![lang("a", "f", &BASE), lang("b", "f", &other)]);
        assert!(generate_synthetic_family(&s, 1).is_err());
        let s = spec(vec![lang("a", "f", &BASE), lang("b", "g", &other)]);
        assert!(generate_synthetic_family(&s, 1).is_ok());
    }

    #[test]
    fn needs_two_languages() {
        assert!(generate_synthetic_family(&spec(vec![lang("a", "f", &BASE)]), 1).is_err());
    }

    #[test]
    fn substitutions_apply_to_lemma_and_form() {
        let mut a = lang("a", "f", &BASE);
        a.substitutions = vec![("a".into(), "ä".into())];
        let out = generate_synthetic_family(&spec(vec![a, lang("b", "g", &BASE)]), 3).unwrap();
        let all: String = out[0].data.train.examples.iter().map(|e| format!("{}{}", e.lemma, e.form)).collect();
        assert!(!all.contains('a'));
    }

    #[test]
    fn presets_satisfy_family_constraint() {
        let s = presets::two_families(50, 20, 10, 10);
        let fams = s.families();
        assert_eq!(fams.len(), 5);
        for a in &s.languages {
            for b in &s.languages {
                if a.family == b.family {
                    assert!(shared_rule_fraction(a, b) >= MIN_SHARED_RULES);
                }
            }
        }
        assert!(generate_synthetic_family(&s, 13).is_ok());
    }

    #[test]
    fn toml_round_trip() {
        let s = presets::transfer_family(100, 20, 10, 10);
        assert_eq!(FamilySpec::from_toml(&s.to_toml()).unwrap(), s);
    }
}
