use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command as Process, Stdio};
use std::sync::Mutex;

use metainflect::corpus::synth::{presets, write_family};
use metainflect::corpus::{load_dataset, FamilySpec, LanguageId, Split};
use metainflect::evalkit::{
    evaluate_model, run_ablation, AblationMode, AblationRegime, AblationSpec, EvalReport, ExperimentData, PretrainCache,
    Regime, RegimeSetup, ResultsTable,
};
use metainflect::metatrain::{
    finetune as finetune_state, init_target_language_embedding, maml_train, multitask_train as multitask_state, train_monolingual, DevSource,
    TaskHandle, TrainState,
};
use metainflect::models::{load_model, DecodeOptions, Model, ModelInfo};
use metainflect::seeded_rng;

use crate::config::ExperimentConfig;
use crate::rundir::{announce, names, save_model, RunDir};
use crate::{CliError, Common, Preset};

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn handles(data: &ExperimentData, langs: &[LanguageId]) -> Result<Vec<TaskHandle>, CliError> {
    Ok(langs.iter().map(|l| data.handle(l)).collect::<metainflect::Result<_>>()?)
}

/// Model-selection languages must exist when the config asks for them.
fn check_dev(cfg: &ExperimentConfig) -> Result<(), CliError> {
    if cfg.meta.dev_source == DevSource::DevelopmentLanguages && cfg.dev_languages.is_empty() {
        return Err(usage(
            "no development languages: set `dev_languages` or `meta.dev_source = \"source-splits\"`",
        ));
    }
    Ok(())
}

fn require_sources(cfg: &ExperimentConfig) -> Result<Vec<LanguageId>, CliError> {
    if cfg.sources.is_empty() {
        return Err(usage("no source languages (set `sources` or pass --sources)"));
    }
    Ok(cfg.source_ids())
}

/// Vocabulary over the loaded data, with the target reserved so that a
/// later fine-tuning run can embed it.
fn experiment_model(cfg: &ExperimentConfig, data: &ExperimentData) -> Result<Model, CliError> {
    let mut vocab = data.vocabulary()?;
    if let Some(t) = &cfg.target {
        vocab.reserve_language(&LanguageId::new(t));
    }
    Ok(Model::new(cfg.model, cfg.dims(), vocab)?)
}

/// Scores the target's test split when it has one.
fn score_target(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    model: &Model,
    state: &TrainState,
    run: &RunDir,
) -> Result<Option<EvalReport>, CliError> {
    let Some(target) = &cfg.target else { return Ok(None) };
    let test = &data.get(&LanguageId::new(target))?.test;
    if test.is_empty() {
        return Ok(None);
    }
    let (mut report, rows) =
        evaluate_model(model, state.best_params(), &model.vocab().hash(), &[test], cfg.decode.options()?)?;
    report.config_hash = metainflect::evalkit::config_hash(&cfg.meta);
    run.save_report(&report, &rows)?;
    Ok(Some(report))
}

fn finish(
    cfg: &ExperimentConfig,
    run: &RunDir,
    model: &Model,
    state: &TrainState,
    trained_on: &[LanguageId],
    regime: Option<&str>,
    report: Option<&EvalReport>,
) -> Result<(), CliError> {
    run.save_state("state.json", state)?;
    let meta = ModelInfo {
        languages: names(trained_on),
        target: cfg.target.clone(),
        regime: regime.map(str::to_string),
    };
    save_model(&run.file("model.ckpt"), model, state.best_params(), &cfg.meta, meta)?;
    announce(run, state.best_params(), report);
    Ok(())
}

pub fn meta_train(common: &Common) -> Result<(), CliError> {
    let cfg = common.load()?;
    let sources = require_sources(&cfg)?;
    check_dev(&cfg)?;
    let data = cfg.load_data(false)?;
    let model = experiment_model(&cfg, &data)?;
    let (src, dev) = (handles(&data, &sources)?, handles(&data, &cfg.dev_ids())?);
    let run = RunDir::create(&cfg)?;
    let state = maml_train(&cfg.meta, &model, &src, &dev, &mut run.metrics("metrics.jsonl")?)?;
    finish(&cfg, &run, &model, &state, &sources, Some("maml"), None)
}

pub fn multitask_train(common: &Common, include_target: bool) -> Result<(), CliError> {
    let cfg = common.load()?;
    let sources = require_sources(&cfg)?;
    let target = if include_target { Some(cfg.target()?) } else { None };
    if cfg.meta.dev_source == DevSource::DevelopmentLanguages {
        check_dev(&cfg)?;
    }
    let data = cfg.load_data(false)?;
    let model = experiment_model(&cfg, &data)?;
    let (src, dev) = (handles(&data, &sources)?, handles(&data, &cfg.dev_ids())?);
    let tgt = target.as_ref().map(|t| data.handle(t)).transpose()?;
    let run = RunDir::create(&cfg)?;
    let state = multitask_state(&cfg.meta, &model, &src, tgt.as_ref(), &dev, &mut run.metrics("metrics.jsonl")?)?;
    let report = if include_target { score_target(&cfg, &data, &model, &state, &run)? } else { None };
    let trained: Vec<LanguageId> = sources.into_iter().chain(target).collect();
    finish(&cfg, &run, &model, &state, &trained, Some("multitask"), report.as_ref())
}

pub fn mono_train(common: &Common) -> Result<(), CliError> {
    let cfg = common.load()?;
    let target = cfg.target()?;
    let data = cfg.load_data(false)?;
    let model = experiment_model(&cfg, &data)?;
    let task = data.handle(&target)?;
    let run = RunDir::create(&cfg)?;
    let state = train_monolingual(&cfg.meta, &model, &task, &mut run.metrics("metrics.jsonl")?)?;
    let report = score_target(&cfg, &data, &model, &state, &run)?;
    finish(&cfg, &run, &model, &state, &[target], Some("mono"), report.as_ref())
}

pub fn finetune(common: &Common, init: &Path) -> Result<(), CliError> {
    let cfg = common.load()?;
    let target = cfg.target()?;
    let loaded = load_model(init)?;
    if loaded.model.kind() != cfg.model {
        return Err(usage(format!(
            "checkpoint holds a {} model but the config asks for {}",
            loaded.model.kind(),
            cfg.model
        )));
    }
    if !loaded.model.vocab().has_language(&target) {
        return Err(CliError::Core(metainflect::Error::VocabMismatch(format!(
            "checkpoint vocabulary neither contains nor reserves `{target}`"
        ))));
    }
    let data = cfg.load_data(false)?;
    let task = data.handle(&target)?;
    let model = loaded.model;
    let sources: Vec<LanguageId> = loaded.info.languages.iter().map(LanguageId::new).filter(|l| *l != target).collect();
    let mut rng = seeded_rng(cfg.seed ^ 0xe3b);
    let params = init_target_language_embedding(&loaded.params, model.vocab(), &target, &cfg.meta.embedding_init, &sources, &mut rng)?;
    let run = RunDir::create(&cfg)?;
    let start = TrainState::new(params, cfg.meta.finetune_optimizer_config(model.kind()), cfg.seed);
    let state = finetune_state(&start, &cfg.meta, &model, &task, &mut run.metrics("metrics.jsonl")?)?;
    let report = score_target(&cfg, &data, &model, &state, &run)?;
    let trained: Vec<LanguageId> = sources.into_iter().chain([target]).collect();
    let regime = loaded.info.regime.map(|r| format!("{r}+ft"));
    finish(&cfg, &run, &model, &state, &trained, regime.as_deref(), report.as_ref())
}

pub fn evaluate(
    checkpoint: &Path,
    data: &Path,
    language: Option<&str>,
    beam: usize,
    max_len: Option<usize>,
    out_dir: Option<&Path>,
) -> Result<(), CliError> {
    let loaded = load_model(checkpoint)?;
    let language = language
        .map(str::to_string)
        .or_else(|| loaded.info.target.clone())
        .ok_or_else(|| usage("the checkpoint names no target language; pass --language"))?;
    let lang = LanguageId::new(&language);
    let dataset = load_dataset(data, &lang, Split::Test)
        .map_err(|e| usage(format!("{}: {e}", data.display())))?;
    if dataset.is_empty() {
        return Err(usage(format!("{}: no examples to evaluate", data.display())));
    }
    let mut decode = match beam {
        0 => return Err(usage("--beam must be at least 1")),
        1 => DecodeOptions::greedy(),
        w => DecodeOptions::beam(w),
    };
    if let Some(n) = max_len {
        decode = decode.with_max_len(n);
    }
    let (mut report, rows) =
        evaluate_model(&loaded.model, &loaded.params, &loaded.header.vocab_hash, &[&dataset], decode)?;
    report.config_hash = loaded.header.config_hash.clone();
    if let Some(dir) = out_dir {
        RunDir::create_at(dir, None)?.save_report(&report, &rows)?;
    }
    eprint!("{}", report.to_table());
    println!("accuracy={:.4}", report.accuracy());
    Ok(())
}

fn setup<'a>(cfg: &ExperimentConfig, data: &'a ExperimentData) -> Result<RegimeSetup<'a>, CliError> {
    Ok(RegimeSetup {
        kind: cfg.model,
        dims: cfg.dims(),
        cfg: cfg.meta.clone(),
        data,
        vocab: data.vocabulary()?,
        dev_languages: cfg.dev_ids(),
        decode: cfg.decode.options()?,
    })
}

fn parse_regime(flag: Option<&str>, cfg: &ExperimentConfig) -> Result<Regime, CliError> {
    match flag {
        Some(r) => Ok(r.parse()?),
        None => cfg.regime.ok_or_else(|| usage("no regime (set `regime` or pass --regime)")),
    }
}

pub fn run(common: &Common, regime: Option<&str>) -> Result<(), CliError> {
    let cfg = common.load()?;
    let regime = parse_regime(regime, &cfg)?;
    let target = cfg.target()?;
    let sources = if regime.uses_sources() { require_sources(&cfg)? } else { vec![] };
    if regime.uses_sources() {
        check_dev(&cfg)?;
    }
    let data = cfg.load_data(false)?;
    let setup = setup(&cfg, &data)?;
    let run = RunDir::create(&cfg)?;
    let result = setup.run(regime, &sources, &target, &mut PretrainCache::new())?;
    if let Some(pre) = &result.pretrained {
        run.write_history("pretrain_metrics.jsonl", &pre.history)?;
    }
    run.write_history("metrics.jsonl", &result.state.history)?;
    run.save_report(&result.report, &result.predictions)?;
    run.save_state("state.json", &result.state)?;
    let meta = ModelInfo {
        languages: names(&sources.iter().cloned().chain([target]).collect::<Vec<_>>()),
        target: cfg.target.clone(),
        regime: Some(regime.to_string()),
    };
    save_model(&run.file("model.ckpt"), &result.model, &result.params, &cfg.meta, meta)?;
    announce(&run, &result.params, Some(&result.report));
    Ok(())
}

pub fn ablate(common: &Common, modes: &[String], regime: &str, exclude: &[String]) -> Result<(), CliError> {
    let cfg = common.load()?;
    let target = cfg.target()?;
    let modes: Vec<AblationMode> = modes.iter().map(|m| m.parse()).collect::<metainflect::Result<_>>()?;
    let regime = match regime.parse::<Regime>()? {
        Regime::MamlFt => AblationRegime::MamlFt,
        Regime::MultitaskFt => AblationRegime::MultitaskFt,
        other => return Err(usage(format!("ablations pretrain and fine-tune; `{other}` does not"))),
    };
    let data = cfg.load_data(true)?;
    let exclude: Vec<LanguageId> = exclude.iter().chain(&cfg.dev_languages).map(LanguageId::new).collect();
    let specs: Vec<AblationSpec> = modes
        .iter()
        .map(|&m| AblationSpec::new(&target, m, &data.families, &exclude))
        .collect::<metainflect::Result<_>>()?;
    if specs.iter().any(|s| !s.sources.is_empty()) {
        check_dev(&cfg)?;
    }
    let setup = setup(&cfg, &data)?;
    let run = RunDir::create(&cfg)?;
    let mut cache = PretrainCache::with_dir(run.file("cache"));
    let mut table = ResultsTable::default();
    let mut summary = BTreeMap::new();
    for spec in &specs {
        let report = run_ablation(spec, &setup, regime, &mut cache)?;
        let dir = RunDir::create_at(&run.file(spec.mode.as_str()), None)?;
        std::fs::write(dir.file("report.json"), report.to_json()? + "\n")?;
        table.add(target.as_str(), spec.mode.as_str(), report.accuracy());
        summary.insert(spec.mode.as_str(), serde_json::json!({ "sources": names(&spec.sources), "accuracy": report.accuracy() }));
        println!("{} accuracy={:.4}", spec.mode, report.accuracy());
    }
    std::fs::write(run.file("ablation.json"), serde_json::to_string_pretty(&summary).map_err(metainflect::Error::from)? + "\n")?;
    std::fs::write(run.file("results.txt"), table.render())?;
    println!("run_dir={}", run.path.display());
    Ok(())
}

pub fn synth(spec: Option<&Path>, preset: Option<Preset>, sizes: [usize; 4], seed: u64, out_dir: &Path) -> Result<(), CliError> {
    let [source_train, target_train, dev, test] = sizes;
    let family = match (spec, preset) {
        (Some(p), _) => {
            let text = std::fs::read_to_string(p).map_err(|e| usage(format!("{}: {e}", p.display())))?;
            FamilySpec::from_toml(&text)?
        }
        (None, Some(Preset::Transfer)) => presets::transfer_family(source_train, target_train, dev, test),
        (None, Some(Preset::TwoFamilies)) => presets::two_families(source_train, target_train, dev, test),
        (None, None) => return Err(usage("pass --spec or --preset")),
    };
    let datasets = metainflect::corpus::generate_synthetic_family(&family, seed)?;
    write_family(&datasets, out_dir)?;
    std::fs::write(out_dir.join("spec.toml"), family.to_toml())?;
    for d in &datasets {
        println!("{}\t{}\t{}/{}/{}", d.language(), d.family, d.data.train.len(), d.data.dev.len(), d.data.test.len());
    }
    Ok(())
}

pub fn sweep(common: &Common, seeds: &[u64], regimes: &[String], jobs: usize) -> Result<(), CliError> {
    let cfg = common.load()?;
    let target = cfg.target()?;
    let regimes: Vec<Regime> = if regimes.is_empty() {
        vec![parse_regime(None, &cfg)?]
    } else {
        regimes.iter().map(|r| r.parse()).collect::<metainflect::Result<_>>()?
    };
    if seeds.is_empty() || jobs == 0 {
        return Err(usage("need at least one seed and one job"));
    }
    let root = RunDir::create(&cfg)?;
    let resolved = root.file("config.toml");
    let exe = std::env::current_exe()?;
    let queue: Mutex<Vec<(Regime, u64)>> =
        Mutex::new(regimes.iter().flat_map(|&r| seeds.iter().map(move |&s| (r, s))).rev().collect());
    let results: Mutex<Vec<(Regime, u64, Result<f64, (u8, String)>)>> = Mutex::new(Vec::new());

    let child = |regime: Regime, seed: u64| -> Result<f64, (u8, String)> {
        let dir: PathBuf = root.file(regime.as_str()).join(format!("seed-{seed}"));
        std::fs::create_dir_all(&dir).map_err(|e| (2, e.to_string()))?;
        let log = std::fs::File::create(dir.join("log.txt")).map_err(|e| (2, e.to_string()))?;
        let status = Process::new(&exe)
            .arg("run")
            .arg("--config")
            .arg(&resolved)
            .args(["--regime", regime.as_str(), "--seed", &seed.to_string()])
            .arg("--out-dir")
            .arg(&dir)
            .stdout(log.try_clone().map_err(|e| (2, e.to_string()))?)
            .stderr(log)
            .stdin(Stdio::null())
            .status()
            .map_err(|e| (2, e.to_string()))?;
        if !status.success() {
            let code = status.code().map_or(1, |c| c as u8);
            return Err((code, format!("{regime} seed {seed} failed; see {}", dir.join("log.txt").display())));
        }
        let text = std::fs::read_to_string(dir.join("report.json")).map_err(|e| (1, e.to_string()))?;
        let report: EvalReport = serde_json::from_str(&text).map_err(|e| (1, e.to_string()))?;
        Ok(report.accuracy())
    };

    std::thread::scope(|s| {
        for _ in 0..jobs.min(seeds.len() * regimes.len()) {
            s.spawn(|| loop {
                let Some((regime, seed)) = queue.lock().unwrap().pop() else { break };
                let out = child(regime, seed);
                match &out {
                    Ok(acc) => eprintln!("{regime} seed {seed}: {:.4}", acc),
                    Err((_, m)) => eprintln!("{m}"),
                }
                results.lock().unwrap().push((regime, seed, out));
            });
        }
    });

    let mut results = results.into_inner().unwrap();
    results.sort_by_key(|(r, s, _)| (r.as_str(), *s));
    let mut table = ResultsTable::default();
    let mut failure = None;
    let mut json = Vec::new();
    for (regime, seed, out) in &results {
        match out {
            Ok(acc) => {
                table.add(target.as_str(), regime.as_str(), *acc);
                json.push(serde_json::json!({ "regime": regime, "seed": seed, "accuracy": acc }));
            }
            Err((code, message)) => {
                failure.get_or_insert(CliError::Child {
                    code: *code,
                    message: message.clone(),
                });
            }
        }
    }
    std::fs::write(root.file("results.json"), serde_json::to_string_pretty(&json).map_err(metainflect::Error::from)? + "\n")?;
    std::fs::write(root.file("results.txt"), table.render())?;
    print!("{}", table.render());
    println!("run_dir={}", root.path.display());
    failure.map_or(Ok(()), Err)
}
