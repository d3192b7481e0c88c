//! Experiment configuration: one TOML document, `${VAR}` interpolation,
//! then flag overrides applied as `key=value` assignments.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use metainflect::corpus::{load_dataset, LanguageData, LanguageId, Split, TaskDataset};
use metainflect::evalkit::{ExperimentData, Regime};
use metainflect::metatrain::MetaConfig;
use metainflect::models::{DecodeOptions, ModelDims, ModelKind};

use crate::CliError;

/// Paths of one language's splits. `test` is optional for languages that
/// are only trained on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LanguagePaths {
    pub train: PathBuf,
    pub dev: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeConfig {
    /// 1 is greedy search.
    pub beam: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_len: Option<usize>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { beam: 1, max_len: None }
    }
}

impl DecodeConfig {
    pub fn options(&self) -> Result<DecodeOptions, CliError> {
        let opts = match self.beam {
            0 => return Err(CliError::Usage("decode.beam must be at least 1".into())),
            1 => DecodeOptions::greedy(),
            w => DecodeOptions::beam(w),
        };
        Ok(match self.max_len {
            Some(n) => opts.with_max_len(n),
            None => opts,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regime: Option<Regime>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Copied into `meta.seed`.
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
    #[serde(default)]
    pub sources: Vec<String>,
    #[serde(default)]
    pub dev_languages: Vec<String>,
    /// Directory laid out as `<language>/{train,dev,test}.tsv`, with an
    /// optional `families.json`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
    /// Per-language paths; these take precedence over `data_dir`.
    #[serde(default)]
    pub languages: BTreeMap<String, LanguagePaths>,
    /// Defaults to the published sizes of the chosen model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dims: Option<ModelDims>,
    #[serde(default)]
    pub decode: DecodeConfig,
    #[serde(default)]
    pub meta: MetaConfig,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs/latest")
}

/// Replaces `${VAR}` and `${VAR:-default}` with environment values.
pub fn interpolate(text: &str) -> Result<String, CliError> {
    shellexpand::env(text)
        .map(|s| s.into_owned())
        .map_err(|e| CliError::Usage(format!("config interpolation: {e}")))
}

/// Parses `value` as a TOML value, falling back to a bare string.
fn parse_value(value: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()))
}

/// Sets a dotted key such as `meta.inner_lr`.
fn assign(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), CliError> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| CliError::Usage(format!("bad key `{key}`")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Usage(format!("`{p}` in `{key}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// A `key=value` override from the command line.
#[derive(Clone, Debug)]
pub struct Override {
    pub key: String,
    pub value: toml::Value,
}

impl Override {
    pub fn parse(s: &str) -> Result<Self, String> {
        let (k, v) = s.split_once('=').ok_or_else(|| format!("expected KEY=VALUE, got `{s}`"))?;
        Ok(Self {
            key: k.trim().to_string(),
            value: parse_value(v.trim()),
        })
    }

    pub fn new(key: &str, value: toml::Value) -> Self {
        Self {
            key: key.to_string(),
            value,
        }
    }

    /// A path flag, made absolute against the working directory.
    pub fn path(key: &str, path: &Path) -> Self {
        let abs = std::path::absolute(path).unwrap_or_else(|_| path.to_path_buf());
        Self::new(key, toml::Value::String(abs.display().to_string()))
    }
}

fn absolutize(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl ExperimentConfig {
    /// Loads `path` (or an empty document), applies `overrides` in order and
    /// validates the result. Relative paths resolve against the config
    /// file's directory; path flags are made absolute before they get here.
    pub fn load(path: Option<&Path>, overrides: &[Override]) -> Result<Self, CliError> {
        let cwd = std::env::current_dir()?;
        let (mut table, base) = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                let table: toml::Table = toml::from_str(&interpolate(&text)?)
                    .map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))?;
                let dir = p.parent().map(|d| cwd.join(d)).unwrap_or_else(|| cwd.clone());
                (table, dir)
            }
            None => (toml::Table::new(), cwd),
        };
        for o in overrides {
            assign(&mut table, &o.key, o.value.clone())?;
        }
        let mut cfg = Self::from_table(table)?;
        cfg.resolve_paths(&base);
        cfg.meta.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    fn from_table(table: toml::Table) -> Result<Self, CliError> {
        let mut table = table;
        if let Some(model) = table.get_mut("model").and_then(|v| v.as_str().map(str::to_lowercase)) {
            table.insert("model".into(), toml::Value::String(model));
        } else if !table.contains_key("model") {
            return Err(CliError::Usage("`model` is required (med or pg)".into()));
        }
        let seed = table.get("seed").cloned().unwrap_or(toml::Value::Integer(0));
        if table.get("meta").and_then(|m| m.get("seed")).is_some_and(|s| *s != seed) {
            return Err(CliError::Usage("set the seed with the top-level `seed` key".into()));
        }
        Self::deserialize(toml::Value::Table(table)).map_err(|e| CliError::Usage(format!("config: {e}")))
    }

    fn resolve_paths(&mut self, base: &Path) {
        absolutize(base, &mut self.out_dir);
        if let Some(d) = self.data_dir.as_mut() {
            absolutize(base, d);
        }
        for l in self.languages.values_mut() {
            absolutize(base, &mut l.train);
            absolutize(base, &mut l.dev);
            if let Some(t) = l.test.as_mut() {
                absolutize(base, t);
            }
        }
    }

    /// Checks that every referenced path exists and the numeric settings
    /// are sane. Runs before any output is written.
    pub fn validate(&self) -> Result<(), CliError> {
        self.meta.validate()?;
        self.decode.options()?;
        if let Some(d) = &self.data_dir {
            if !d.is_dir() {
                return Err(CliError::Usage(format!("data_dir {} does not exist", d.display())));
            }
        }
        for (lang, p) in &self.languages {
            for path in [Some(&p.train), Some(&p.dev), p.test.as_ref()].into_iter().flatten() {
                if !path.is_file() {
                    return Err(CliError::Usage(format!("{lang}: {} does not exist", path.display())));
                }
            }
        }
        if let Some(t) = &self.target {
            if self.sources.contains(t) {
                return Err(CliError::Usage(format!("target `{t}` is also listed as a source")));
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> ModelDims {
        self.dims.unwrap_or_else(|| ModelDims::published(self.model))
    }

    pub fn target(&self) -> Result<LanguageId, CliError> {
        self.target
            .as_deref()
            .map(LanguageId::new)
            .ok_or_else(|| CliError::Usage("no target language (set `target` or pass --target)".into()))
    }

    pub fn source_ids(&self) -> Vec<LanguageId> {
        self.sources.iter().map(LanguageId::new).collect()
    }

    pub fn dev_ids(&self) -> Vec<LanguageId> {
        self.dev_languages.iter().map(LanguageId::new).collect()
    }

    /// All language paths: `data_dir` discoveries overlaid by `languages`.
    pub fn language_paths(&self) -> Result<BTreeMap<String, LanguagePaths>, CliError> {
        let mut out = BTreeMap::new();
        if let Some(dir) = &self.data_dir {
            let families: BTreeMap<String, String> = match std::fs::read_to_string(dir.join("families.json")) {
                Ok(text) => serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("families.json: {e}")))?,
                Err(_) => BTreeMap::new(),
            };
            let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<Result<_, _>>()?;
            entries.sort_by_key(|e| e.file_name());
            for e in entries {
                let p = e.path();
                let (train, dev, test) = (p.join("train.tsv"), p.join("dev.tsv"), p.join("test.tsv"));
                if !(train.is_file() && dev.is_file()) {
                    continue;
                }
                let name = e.file_name().to_string_lossy().into_owned();
                out.insert(
                    name.clone(),
                    LanguagePaths {
                        train,
                        dev,
                        test: test.is_file().then_some(test),
                        family: families.get(&name).cloned(),
                    },
                );
            }
        }
        for (k, v) in &self.languages {
            out.insert(k.clone(), v.clone());
        }
        Ok(out)
    }

    /// Loads every language the experiment refers to (all known languages
    /// when `all` is set).
    pub fn load_data(&self, all: bool) -> Result<ExperimentData, CliError> {
        let paths = self.language_paths()?;
        let mut wanted: Vec<&String> = self.sources.iter().chain(&self.dev_languages).chain(&self.target).collect();
        if all {
            wanted = paths.keys().collect();
        }
        let mut data = ExperimentData::default();
        for name in wanted {
            let p = paths
                .get(name)
                .ok_or_else(|| CliError::Usage(format!("no data for language `{name}`")))?;
            let id = LanguageId::new(name);
            let test = match &p.test {
                Some(t) => load_dataset(t, &id, Split::Test)?,
                None => TaskDataset::new(id.clone(), Split::Test, vec![])?,
            };
            data.languages.insert(
                id.clone(),
                LanguageData {
                    train: load_dataset(&p.train, &id, Split::Train)?,
                    dev: load_dataset(&p.dev, &id, Split::Dev)?,
                    test,
                },
            );
            if let Some(f) = &p.family {
                data.families.insert(id, f.clone());
            }
        }
        Ok(data)
    }

    /// Snapshot that loads back to the same config. The seed lives only at
    /// the top level so that a `--seed` flag can replace it.
    pub fn to_toml(&self) -> String {
        let mut table = toml::Table::try_from(self).expect("config serializes");
        if let Some(meta) = table.get_mut("meta").and_then(|m| m.as_table_mut()) {
            meta.remove("seed");
        }
        toml::to_string_pretty(&table).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn load(text: &str, overrides: &[&str]) -> Result<ExperimentConfig, CliError> {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, text).unwrap();
        let o: Vec<Override> = overrides.iter().map(|s| Override::parse(s).unwrap()).collect();
        ExperimentConfig::load(Some(&p), &o)
    }

    #[test]
    fn flags_win_over_file() {
        let c = load("model = \"PG\"\nseed = 3\n[meta]\ninner_lr = 0.2\n", &["meta.inner_lr=0.05", "seed=7"]).unwrap();
        assert_eq!(c.model, ModelKind::Pg);
        assert_eq!(c.meta.inner_lr, 0.05);
        assert_eq!((c.seed, c.meta.seed), (7, 7));
    }

    #[test]
    fn environment_interpolation() {
        // SAFETY: the variable name is unique to this test
        unsafe { std::env::set_var("METAINFLECT_TEST_EPOCHS", "4") };
        let c = load("model = \"med\"\n[meta]\nmeta_epochs = ${METAINFLECT_TEST_EPOCHS}\nmono_epochs = ${METAINFLECT_UNSET:-9}\n", &[]).unwrap();
        assert_eq!((c.meta.meta_epochs, c.meta.mono_epochs), (4, 9));
        assert!(load("model = \"med\"\nseed = ${METAINFLECT_SURELY_UNSET}\n", &[]).is_err());
    }

    #[test]
    fn rejects_bad_documents() {
        assert!(load("seed = 1\n", &[]).is_err());
        assert!(load("model = \"pg\"\nbogus = 1\n", &[]).is_err());
        assert!(load("model = \"pg\"\n[meta]\nseed = 1\n", &[]).is_err());
        assert!(load("model = \"pg\"\n[meta]\ninner_lr = -1.0\n", &[]).is_err());
        assert!(load("model = \"pg\"\n[languages.x]\ntrain = \"nope.tsv\"\ndev = \"nope.tsv\"\n", &[]).is_err());
        assert!(load("model = \"pg\"\ntarget = \"a\"\nsources = [\"a\"]\n", &[]).is_err());
    }

    #[test]
    fn paths_resolve_against_the_file() {
        let c = load("model = \"pg\"\nout_dir = \"out\"\n", &[]).unwrap();
        assert!(c.out_dir.is_absolute() && c.out_dir.ends_with("out"));
    }

    #[test]
    fn override_values() {
        assert_eq!(Override::parse("a=1").unwrap().value, toml::Value::Integer(1));
        assert_eq!(Override::parse("a=nort").unwrap().value, toml::Value::String("nort".into()));
        assert!(Override::parse("a").is_err());
    }
}
