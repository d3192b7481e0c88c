use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_metainflect"))
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin().args(args).current_dir(cwd).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

/// Value of a `key=value` line on stdout.
fn field(o: &Output, key: &str) -> String {
    stdout(o)
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")).map(str::to_string))
        .unwrap_or_else(|| panic!("no {key}= in {:?} / {}", stdout(o), String::from_utf8_lossy(&o.stderr)))
}

const CONFIG: &str = r#"
model = "pg"
data_dir = "data"
target = "nort"
sources = ["nora", "norb"]
dims = { embed = 6, hidden = 8, attention = 8 }

[meta]
finetune_min_epochs = 4
finetune_extension = 0
mono_epochs = 4
dev_source = "source-splits"
dev_limit = 10
"#;

/// Temp dir with a small synthetic family under `data/` and `c.toml`.
fn fixture() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        &["synth", "--preset", "two-families", "--source-train", "40", "--target-train", "20", "--dev", "10", "--test", "20", "--seed", "1", "--out-dir", "data"],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    std::fs::write(dir.path().join("c.toml"), CONFIG).unwrap();
    dir
}

fn lines(path: PathBuf) -> usize {
    std::fs::read_to_string(path).unwrap().lines().count()
}

#[test]
fn every_command_documents_its_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["--help"], tmp.path());
    assert_eq!(code(&o), 0);
    let commands = ["meta-train", "multitask-train", "mono-train", "finetune", "evaluate", "run", "ablate", "synth", "sweep"];
    for c in commands {
        assert!(stdout(&o).contains(c), "{c} missing from top-level help");
    }
    let training = ["--config", "--model", "--seed", "--out-dir", "--data-dir", "--target", "--sources", "--dev-languages", "--meta-epochs", "--inner-lr", "--outer-lr", "--inner-steps", "--lr", "--finetune-min-epochs", "--mono-epochs", "--beam", "--set"];
    let extra: &[(&str, &[&str])] = &[
        ("meta-train", &[]),
        ("multitask-train", &["--include-target"]),
        ("mono-train", &[]),
        ("finetune", &["--init"]),
        ("run", &["--regime"]),
        ("ablate", &["--modes", "--regime", "--exclude"]),
        ("sweep", &["--seeds", "--regimes", "--jobs"]),
    ];
    for (c, flags) in extra {
        let o = run(&[c, "--help"], tmp.path());
        assert_eq!(code(&o), 0, "{c}");
        for f in training.iter().chain(flags.iter()) {
            assert!(stdout(&o).contains(f), "{c} --help lacks {f}");
        }
    }
    let own: &[(&str, &[&str])] = &[
        ("evaluate", &["--checkpoint", "--data", "--language", "--beam", "--max-len", "--out-dir"]),
        ("synth", &["--spec", "--preset", "--source-train", "--target-train", "--dev", "--test", "--seed", "--out-dir"]),
    ];
    for (c, flags) in own {
        let o = run(&[c, "--help"], tmp.path());
        assert_eq!(code(&o), 0, "{c}");
        for f in *flags {
            assert!(stdout(&o).contains(f), "{c} --help lacks {f}");
        }
    }
}

#[test]
fn usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(&["meta-train", "--bogus"], tmp.path())), 2);
    assert_eq!(code(&run(&["meta-train"], tmp.path())), 2);
    assert_eq!(code(&run(&["mono-train", "--model", "xyz", "--target", "a"], tmp.path())), 2);
}

#[test]
fn synth_writes_every_split_and_is_reproducible() {
    let dir = fixture();
    let data = dir.path().join("data");
    for lang in ["nora", "norb", "nort", "soua", "soub"] {
        for split in ["train", "dev", "test"] {
            assert!(data.join(lang).join(format!("{split}.tsv")).is_file(), "{lang}/{split}");
        }
    }
    assert!(data.join("families.json").is_file() && data.join("spec.toml").is_file());
    // the written spec regenerates byte-identical files
    let o = run(&["synth", "--spec", "data/spec.toml", "--seed", "1", "--out-dir", "again"], dir.path());
    assert_eq!(code(&o), 0);
    for lang in ["nora", "soub"] {
        let a = std::fs::read(data.join(lang).join("train.tsv")).unwrap();
        let b = std::fs::read(dir.path().join("again").join(lang).join("train.tsv")).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn synth_rejects_colliding_tags() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = r#"
tags_per_lemma = 2

[[language]]
name = "a"
family = "f"
train = 10
dev = 2
test = 2
rules = [["V;PST", "+ed"], ["V;PST", "+t"]]

[[language]]
name = "b"
family = "f"
train = 10
dev = 2
test = 2
rules = [["V;PST", "+ed"], ["V;PRS", "+s"]]
"#;
    std::fs::write(tmp.path().join("s.toml"), spec).unwrap();
    let o = run(&["synth", "--spec", "s.toml", "--out-dir", "out"], tmp.path());
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("colliding"));
}

#[test]
fn meta_train_logs_one_entry_per_epoch_and_is_deterministic() {
    let dir = fixture();
    let a = run(&["meta-train", "-c", "c.toml", "--out-dir", "a"], dir.path());
    assert_eq!(code(&a), 0, "{}", String::from_utf8_lossy(&a.stderr));
    let run_dir = dir.path().join("a");
    assert_eq!(lines(run_dir.join("metrics.jsonl")), 60);
    for f in ["config.toml", "state.json", "model.ckpt"] {
        assert!(run_dir.join(f).is_file(), "{f}");
    }
    let b = run(&["meta-train", "-c", "c.toml", "--out-dir", "b"], dir.path());
    assert_eq!(field(&a, "checkpoint"), field(&b, "checkpoint"));
    assert_eq!(
        std::fs::read(run_dir.join("model.ckpt")).unwrap(),
        std::fs::read(dir.path().join("b/model.ckpt")).unwrap()
    );
    let c = run(&["meta-train", "-c", "c.toml", "--out-dir", "c", "--seed", "5", "--meta-epochs", "60"], dir.path());
    assert_ne!(field(&a, "checkpoint"), field(&c, "checkpoint"));
}

#[test]
fn missing_data_is_a_config_error_with_no_run_dir() {
    let dir = fixture();
    let o = run(
        &["meta-train", "-c", "c.toml", "--out-dir", "never", "--set", "languages.nora.train=\"nope.tsv\"", "--set", "languages.nora.dev=\"nope.tsv\""],
        dir.path(),
    );
    assert_eq!(code(&o), 2);
    assert!(!dir.path().join("never").exists());
}

#[test]
fn flags_and_environment_override_the_file() {
    let dir = fixture();
    std::fs::write(dir.path().join("env.toml"), CONFIG.replace("mono_epochs = 4", "mono_epochs = ${MONO_EPOCHS}")).unwrap();
    let o = bin()
        .args(["mono-train", "-c", "env.toml", "--out-dir", "m"])
        .env("MONO_EPOCHS", "3")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(lines(dir.path().join("m/metrics.jsonl")), 3);
    let o = bin()
        .args(["mono-train", "-c", "env.toml", "--out-dir", "n", "--mono-epochs", "2"])
        .env("MONO_EPOCHS", "3")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert_eq!(lines(dir.path().join("n/metrics.jsonl")), 2);
    let snapshot = std::fs::read_to_string(dir.path().join("n/config.toml")).unwrap();
    assert!(snapshot.contains("mono_epochs = 2"), "{snapshot}");
    // unset variable without a default
    let o = bin().args(["mono-train", "-c", "env.toml"]).env_remove("MONO_EPOCHS").current_dir(dir.path()).output().unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn finetune_from_a_meta_trained_checkpoint() {
    let dir = fixture();
    let pre = run(&["meta-train", "-c", "c.toml", "--out-dir", "pre", "--meta-epochs", "2"], dir.path());
    assert_eq!(code(&pre), 0);
    let a = run(&["finetune", "-c", "c.toml", "--init", "pre/model.ckpt", "--out-dir", "ft1"], dir.path());
    assert_eq!(code(&a), 0, "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(lines(dir.path().join("ft1/metrics.jsonl")), 4);
    for f in ["model.ckpt", "report.json", "report.txt", "predictions.tsv"] {
        assert!(dir.path().join("ft1").join(f).is_file(), "{f}");
    }
    let b = run(&["finetune", "-c", "c.toml", "--init", "pre/model.ckpt", "--out-dir", "ft2"], dir.path());
    assert_eq!(field(&a, "checkpoint"), field(&b, "checkpoint"));
    assert_eq!(field(&a, "accuracy"), field(&b, "accuracy"));

    // not a checkpoint
    std::fs::write(dir.path().join("junk.ckpt"), "garbage").unwrap();
    let o = run(&["finetune", "-c", "c.toml", "--init", "junk.ckpt", "--out-dir", "ft3"], dir.path());
    assert_eq!(code(&o), 2);
    // a language the checkpoint's vocabulary never saw
    let o = run(&["finetune", "-c", "c.toml", "--init", "pre/model.ckpt", "--target", "soua", "--out-dir", "ft4"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("vocabulary"));
}

#[test]
fn evaluate_prints_accuracy() {
    let dir = fixture();
    // a model trained to memorize a handful of examples
    let train: String = std::fs::read_to_string(dir.path().join("data/nort/train.tsv")).unwrap().lines().take(12).map(|l| format!("{l}\n")).collect();
    std::fs::create_dir_all(dir.path().join("small")).unwrap();
    std::fs::write(dir.path().join("small/train.tsv"), &train).unwrap();
    let o = run(
        &[
            "mono-train", "-c", "c.toml", "--out-dir", "oracle", "--mono-epochs", "60", "--lr", "0.01",
            "--set", "meta.batch_size=1", "--set", "meta.eval_every_epoch=false",
            "--set", "dims={embed=12,hidden=16,attention=16}",
            "--set", "languages.nort.train=\"small/train.tsv\"", "--set", "languages.nort.dev=\"data/nort/dev.tsv\"",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let e = run(&["evaluate", "--checkpoint", "oracle/model.ckpt", "--data", "small/train.tsv", "--out-dir", "ev"], dir.path());
    assert_eq!(code(&e), 0);
    assert_eq!(stdout(&e).trim(), "accuracy=1.0000");
    assert!(dir.path().join("ev/predictions.tsv").is_file());

    std::fs::write(dir.path().join("empty.tsv"), "").unwrap();
    assert_eq!(code(&run(&["evaluate", "--checkpoint", "oracle/model.ckpt", "--data", "empty.tsv"], dir.path())), 2);
    assert_eq!(code(&run(&["evaluate", "--checkpoint", "missing.ckpt", "--data", "small/train.tsv"], dir.path())), 2);
}

#[test]
fn golden_monolingual_run() {
    let dir = fixture();
    let o = run(
        &[
            "mono-train", "-c", "c.toml", "--out-dir", "g", "--target", "nora", "--set", "sources=[]",
            "--mono-epochs", "40", "--lr", "0.01", "--set", "meta.batch_size=5",
            "--set", "dims={embed=12,hidden=16,attention=16}",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let e = run(&["evaluate", "--checkpoint", "g/model.ckpt", "--data", "data/nora/test.tsv"], dir.path());
    assert_eq!(stdout(&e).trim(), format!("accuracy={}", field(&o, "accuracy")));
    assert_eq!(stdout(&e).trim(), GOLDEN);
}

/// Frozen result of [`golden_monolingual_run`]; any change to data
/// generation, initialization, training or decoding shows up here.
const GOLDEN: &str = "accuracy=0.1900";

#[test]
fn divergence_exits_3() {
    let dir = fixture();
    let o = run(&["mono-train", "-c", "c.toml", "--out-dir", "d", "--lr", "1e300"], dir.path());
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("diverged"));
}

#[test]
fn run_every_regime() {
    let dir = fixture();
    for regime in ["maml", "multitask", "multitask+ft", "maml+ft", "mono"] {
        let out = format!("r-{regime}");
        let o = run(&["run", "-c", "c.toml", "--regime", regime, "--meta-epochs", "2", "--out-dir", &out], dir.path());
        assert_eq!(code(&o), 0, "{regime}: {}", String::from_utf8_lossy(&o.stderr));
        let acc: f64 = field(&o, "accuracy").parse().unwrap();
        assert!((0.0..=1.0).contains(&acc));
        assert!(dir.path().join(&out).join("report.json").is_file());
    }
    let o = run(&["run", "-c", "c.toml", "--regime", "maml-ft"], dir.path());
    assert_eq!(code(&o), 2);
}

#[test]
fn sweep_collects_child_runs() {
    let dir = fixture();
    let o = run(
        &["sweep", "-c", "c.toml", "--regimes", "mono", "--seeds", "0,1", "--jobs", "2", "--out-dir", "sw"],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for s in [0, 1] {
        assert!(dir.path().join(format!("sw/mono/seed-{s}/report.json")).is_file());
    }
    let results = std::fs::read_to_string(dir.path().join("sw/results.txt")).unwrap();
    assert!(results.contains("nort") && results.contains("mono"), "{results}");
}

#[test]
fn ablation_modes() {
    let dir = fixture();
    let o = run(&["ablate", "-c", "c.toml", "--modes", "LF,OtherLF,SINGLE", "--meta-epochs", "2", "--out-dir", "ab"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for m in ["LF", "OtherLF", "SINGLE"] {
        assert!(stdout(&o).contains(&format!("{m} accuracy=")), "{}", stdout(&o));
    }
    let summary = std::fs::read_to_string(dir.path().join("ab/ablation.json")).unwrap();
    assert!(summary.contains("soua") && summary.contains("nora"), "{summary}");
    let o = run(&["ablate", "-c", "c.toml", "--modes", "LF", "--regime", "mono", "--out-dir", "ab2"], dir.path());
    assert_eq!(code(&o), 2);
}

#[test]
fn shipped_configs_run() {
    let dir = fixture();
    let configs = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["desk-pg.toml", "desk-med.toml"] {
        let out = dir.path().join(name);
        let o = bin()
            .args(["run", "-c"])
            .arg(configs.join(name))
            .args(["--meta-epochs", "1", "--finetune-min-epochs", "2", "--mono-epochs", "2", "--set", "dims.hidden=8", "--out-dir"])
            .arg(&out)
            .env("METAINFLECT_DATA", dir.path().join("data"))
            .output()
            .unwrap();
        assert_eq!(code(&o), 0, "{name}: {}", String::from_utf8_lossy(&o.stderr));
        field(&o, "accuracy");
    }
}
