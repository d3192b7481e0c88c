//! Word-level accuracy, evaluation reports, result tables and the
//! source-language ablation runner.

mod ablation;
mod experiment;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::adcore::{params_hash, ParamSet};
use crate::corpus::{nfc, InflectionExample, TaskDataset};
use crate::error::{Error, Result};
use crate::models::{DecodeOptions, Decoded, Model};

pub use ablation::{run_ablation, AblationMode, AblationRegime, AblationSpec};
pub use experiment::{config_hash, ExperimentData, PretrainCache, Regime, RegimeRun, RegimeSetup};

/// Number of positions where prediction and reference agree after NFC
/// normalization.
pub fn exact_matches<P: AsRef<str>, R: AsRef<str>>(predictions: &[P], references: &[R]) -> Result<usize> {
    if predictions.len() != references.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} references",
            predictions.len(),
            references.len()
        )));
    }
    Ok(predictions
        .iter()
        .zip(references)
        .filter(|(p, r)| nfc(p.as_ref()) == nfc(r.as_ref()))
        .count())
}

/// Fraction of exact matches. Empty input is an error because the ratio is
/// undefined.
pub fn word_accuracy<P: AsRef<str>, R: AsRef<str>>(predictions: &[P], references: &[R]) -> Result<f64> {
    let correct = exact_matches(predictions, references)?;
    if references.is_empty() {
        return Err(Error::EmptyData("accuracy over zero examples".into()));
    }
    Ok(correct as f64 / references.len() as f64)
}

/// Counts for one language.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LanguageScore {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
    /// Outputs cut off at the length limit.
    pub truncated: usize,
    /// Input or reference symbols replaced by UNK.
    pub unk: usize,
}

impl LanguageScore {
    fn add(&mut self, other: &LanguageScore) {
        self.correct += other.correct;
        self.total += other.total;
        self.truncated += other.truncated;
        self.unk += other.unk;
        self.accuracy = ratio(self.correct, self.total);
    }
}

fn ratio(correct: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        correct as f64 / total as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub languages: BTreeMap<String, LanguageScore>,
    pub overall: LanguageScore,
    pub decode: DecodeOptions,
    pub vocab_hash: String,
    pub checkpoint_hash: String,
    pub config_hash: String,
}

impl EvalReport {
    pub fn accuracy(&self) -> f64 {
        self.overall.accuracy
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Per-language plain-text table.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let width = self.languages.keys().map(|k| k.len()).max().unwrap_or(0).max("overall".len());
        let _ = writeln!(out, "{:<width$}  {:>8}  {:>7}  {:>5}  {:>9}  {:>4}", "language", "accuracy", "correct", "total", "truncated", "unk");
        let rows = self.languages.iter().map(|(k, v)| (k.as_str(), v)).chain([("overall", &self.overall)]);
        for (name, s) in rows {
            let _ = writeln!(
                out,
                "{:<width$}  {:>8.4}  {:>7}  {:>5}  {:>9}  {:>4}",
                name, s.accuracy, s.correct, s.total, s.truncated, s.unk
            );
        }
        out
    }
}

/// One decoded example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub language: String,
    pub lemma: String,
    pub tags: String,
    pub gold: String,
    pub prediction: String,
}

/// TSV with columns lemma, tags, gold, prediction.
pub fn predictions_tsv(rows: &[PredictionRow]) -> String {
    let mut out = String::from("lemma\ttags\tgold\tprediction\n");
    for r in rows {
        let _ = writeln!(out, "{}\t{}\t{}\t{}", r.lemma, r.tags, r.gold, r.prediction);
    }
    out
}

/// Anything that maps examples to decoded outputs.
pub trait Predictor {
    fn predict(&self, examples: &[InflectionExample]) -> Result<Vec<Decoded>>;
    /// UNK substitutions in the encoding of `example`.
    fn unk_count(&self, _example: &InflectionExample) -> usize {
        0
    }
}

/// A model with fixed parameters and decoding options.
pub struct ModelPredictor<'a> {
    pub model: &'a Model,
    pub params: &'a ParamSet,
    pub decode: DecodeOptions,
}

impl Predictor for ModelPredictor<'_> {
    fn predict(&self, examples: &[InflectionExample]) -> Result<Vec<Decoded>> {
        self.model.decode(self.params, &self.model.encode_all(examples), &self.decode)
    }

    fn unk_count(&self, example: &InflectionExample) -> usize {
        self.model.encode(example).unk
    }
}

/// Scores `predictor` on each dataset; datasets of the same language are
/// pooled. Hash fields are left empty.
pub fn evaluate_predictor(
    predictor: &dyn Predictor,
    datasets: &[&TaskDataset],
    decode: DecodeOptions,
) -> Result<(EvalReport, Vec<PredictionRow>)> {
    if datasets.iter().all(|d| d.is_empty()) {
        return Err(Error::EmptyData("nothing to evaluate".into()));
    }
    let mut languages: BTreeMap<String, LanguageScore> = BTreeMap::new();
    let mut rows = Vec::new();
    for data in datasets.iter().filter(|d| !d.is_empty()) {
        let decoded = predictor.predict(&data.examples)?;
        if decoded.len() != data.len() {
            return Err(Error::invalid("predictor returned the wrong number of outputs"));
        }
        let preds: Vec<&str> = decoded.iter().map(|d| d.text.as_str()).collect();
        let golds: Vec<&str> = data.examples.iter().map(|e| e.form.as_str()).collect();
        let score = LanguageScore {
            correct: exact_matches(&preds, &golds)?,
            total: data.len(),
            accuracy: 0.0,
            truncated: decoded.iter().filter(|d| d.truncated).count(),
            unk: data.examples.iter().map(|e| predictor.unk_count(e)).sum(),
        };
        languages.entry(data.language.0.clone()).or_default().add(&score);
        rows.extend(data.examples.iter().zip(&decoded).map(|(e, d)| PredictionRow {
            language: data.language.0.clone(),
            lemma: e.lemma.clone(),
            tags: e.tag_string(),
            gold: e.form.clone(),
            prediction: d.text.clone(),
        }));
    }
    let mut overall = LanguageScore::default();
    for s in languages.values() {
        overall.add(s);
    }
    let report = EvalReport {
        languages,
        overall,
        decode,
        vocab_hash: String::new(),
        checkpoint_hash: String::new(),
        config_hash: String::new(),
    };
    Ok((report, rows))
}

/// Decodes every example of `datasets` with `params` and scores it.
///
/// `vocab_hash` is the hash recorded alongside the parameters; it must match
/// the model's vocabulary, and every dataset language must be known to it.
pub fn evaluate_model(
    model: &Model,
    params: &ParamSet,
    vocab_hash: &str,
    datasets: &[&TaskDataset],
    decode: DecodeOptions,
) -> Result<(EvalReport, Vec<PredictionRow>)> {
    let actual = model.vocab().hash();
    if vocab_hash != actual {
        return Err(Error::VocabMismatch(format!(
            "parameters were trained with vocabulary {vocab_hash}, data is encoded with {actual}"
        )));
    }
    if let Some(d) = datasets.iter().find(|d| !model.vocab().has_language(&d.language)) {
        return Err(Error::VocabMismatch(format!("language `{}` not in vocabulary", d.language)));
    }
    model.check_params(params)?;
    let predictor = ModelPredictor { model, params, decode };
    let (mut report, rows) = evaluate_predictor(&predictor, datasets, decode)?;
    report.vocab_hash = actual;
    report.checkpoint_hash = params_hash(params);
    Ok((report, rows))
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Accuracies by language (rows) and regime (columns), one value per seed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub regimes: Vec<String>,
    pub cells: BTreeMap<String, BTreeMap<String, Vec<f64>>>,
}

impl ResultsTable {
    pub fn add(&mut self, language: &str, regime: &str, accuracy: f64) {
        if !self.regimes.iter().any(|r| r == regime) {
            self.regimes.push(regime.to_string());
        }
        self.cells
            .entry(language.to_string())
            .or_default()
            .entry(regime.to_string())
            .or_default()
            .push(accuracy);
    }

    /// Per-seed values of one cell.
    pub fn values(&self, language: &str, regime: &str) -> &[f64] {
        self.cells.get(language).and_then(|r| r.get(regime)).map_or(&[], |v| v.as_slice())
    }

    /// Mean over languages of each language's seed mean.
    pub fn regime_mean(&self, regime: &str) -> Option<f64> {
        let means: Vec<f64> = self
            .cells
            .values()
            .filter_map(|r| r.get(regime))
            .map(|v| mean_std(v).0)
            .collect();
        (!means.is_empty()).then(|| mean_std(&means).0)
    }

    /// Percentages, `mean±std` when a cell has several seeds, plus an
    /// average row.
    pub fn render(&self) -> String {
        let cell = |v: &[f64]| match v.len() {
            0 => "-".to_string(),
            1 => format!("{:.2}", 100.0 * v[0]),
            _ => {
                let (m, s) = mean_std(v);
                format!("{:.2}±{:.2}", 100.0 * m, 100.0 * s)
            }
        };
        let mut rows: Vec<Vec<String>> = vec![std::iter::once("language".to_string()).chain(self.regimes.iter().cloned()).collect()];
        for (lang, by_regime) in &self.cells {
            let mut row = vec![lang.clone()];
            row.extend(self.regimes.iter().map(|r| cell(by_regime.get(r).map_or(&[], |v| v.as_slice()))));
            rows.push(row);
        }
        let mut avg = vec!["average".to_string()];
        avg.extend(
            self.regimes
                .iter()
                .map(|r| self.regime_mean(r).map_or("-".to_string(), |m| format!("{:.2}", 100.0 * m))),
        );
        rows.push(avg);
        let widths: Vec<usize> = (0..rows[0].len())
            .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for row in rows {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (s, &w))| {
                    let pad = w - s.chars().count();
                    if i == 0 {
                        format!("{s}{}", " ".repeat(pad))
                    } else {
                        format!("{}{s}", " ".repeat(pad))
                    }
                })
                .collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{parse_dataset, LanguageId};

    #[test]
    fn accuracy_examples() {
        assert_eq!(word_accuracy(&["writes"], &["writes"]).unwrap(), 1.0);
        assert_eq!(word_accuracy(&["write"], &["writes"]).unwrap(), 0.0);
        assert_eq!(word_accuracy(&["a", "b", "c", "d"], &["a", "x", "c", "y"]).unwrap(), 0.5);
        assert!(word_accuracy(&["a"], &["a", "b"]).is_err());
        assert!(word_accuracy::<&str, &str>(&[], &[]).is_err());
    }

    #[test]
    fn unicode_forms_compare_after_composition() {
        // precomposed vs combining acute
        assert_eq!(word_accuracy(&["caf\u{e9}"], &["cafe\u{301}"]).unwrap(), 1.0);
        assert_eq!(word_accuracy(&["\u{439}"], &["\u{438}\u{306}"]).unwrap(), 1.0);
        // compatibility forms are not folded
        assert_eq!(word_accuracy(&["\u{fb01}"], &["fi"]).unwrap(), 0.0);
        // case matters
        assert_eq!(word_accuracy(&["Writes"], &["writes"]).unwrap(), 0.0);
    }

    struct Fixed(fn(&InflectionExample) -> String);

    impl Predictor for Fixed {
        fn predict(&self, examples: &[InflectionExample]) -> Result<Vec<Decoded>> {
            Ok(examples
                .iter()
                .map(|e| Decoded {
                    text: (self.0)(e),
                    ids: vec![],
                    truncated: false,
                })
                .collect())
        }
    }

    fn data(lang: &str) -> TaskDataset {
        parse_dataset("walk\twalked\tV;PST\ntalk\ttalks\tV;3SG\nsing\tsang\tV;PST\n", &LanguageId::new(lang)).unwrap()
    }

    #[test]
    fn oracle_and_empty_predictors() {
        let d = data("en");
        let (r, rows) = evaluate_predictor(&Fixed(|e| e.form.clone()), &[&d], DecodeOptions::greedy()).unwrap();
        assert_eq!(r.accuracy(), 1.0);
        assert_eq!((r.overall.correct, r.overall.total), (3, 3));
        assert_eq!(rows.len(), 3);
        let (r, _) = evaluate_predictor(&Fixed(|_| String::new()), &[&d], DecodeOptions::greedy()).unwrap();
        assert_eq!(r.accuracy(), 0.0);
    }

    #[test]
    fn pooled_counts_are_sums() {
        let (a, b) = (data("en"), data("de"));
        let p = Fixed(|e| if e.lemma == "walk" { e.form.clone() } else { "x".into() });
        let (r, _) = evaluate_predictor(&p, &[&a, &b, &a], DecodeOptions::greedy()).unwrap();
        assert_eq!(r.languages["en"].total, 6);
        assert_eq!(r.languages["en"].correct, 2);
        assert_eq!(r.overall.correct, 3);
        assert_eq!(r.overall.total, 9);
        assert!((r.accuracy() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn empty_evaluation_is_an_error() {
        let d = TaskDataset::new(LanguageId::new("en"), crate::corpus::Split::Test, vec![]).unwrap();
        assert!(evaluate_predictor(&Fixed(|e| e.form.clone()), &[&d], DecodeOptions::greedy()).is_err());
    }

    #[test]
    fn tsv_and_tables() {
        let d = data("en");
        let (r, rows) = evaluate_predictor(&Fixed(|e| e.form.clone()), &[&d], DecodeOptions::greedy()).unwrap();
        let tsv = predictions_tsv(&rows);
        assert_eq!(tsv.lines().next().unwrap(), "lemma\ttags\tgold\tprediction");
        assert_eq!(tsv.lines().nth(1).unwrap(), "walk\tV;PST\twalked\twalked");
        assert!(r.to_table().contains("overall"));

        let mut t = ResultsTable::default();
        t.add("xx", "mono", 0.5);
        t.add("xx", "maml+ft", 0.6);
        t.add("xx", "maml+ft", 0.8);
        t.add("yy", "mono", 0.1);
        let text = t.render();
        assert!(text.contains("70.00±14.14"), "{text}");
        assert!(text.lines().last().unwrap().starts_with("average"));
        assert!((t.regime_mean("mono").unwrap() - 0.3).abs() < 1e-12);
    }

    #[test]
    fn mean_and_std() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }
}
