use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use plstitch::checkpoint::Checkpoint;
use plstitch::experiment::ExperimentConfig;
use plstitch::synth::Dataset;
use plstitch::train::Model;

const TINY: &[&str] = &[
    "run_name=t",
    "data.train_videos=4",
    "data.eval_videos=4",
    "generator.phase_len_range=[4,6]",
    "net.dim=8",
    "net.head_hidden=8",
    "net.encoder_layers=1",
    "train.epochs=2",
    "train.warmup_epochs=1",
    "train.batch_size=4",
    "train.samples_per_video=2",
    "eval.knn_k=3",
    "eval.probe.max_iters=50",
    "eval.kmeans_restarts=2",
];

fn plstitch(out: &Path, extra: &[&str], args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_plstitch"));
    cmd.env_remove("PLSTITCH_OUT").arg("--out").arg(out);
    for s in TINY.iter().chain(extra) {
        cmd.arg("--set").arg(s);
    }
    cmd.args(args).output().expect("binary runs")
}

fn ok(output: Output) -> Output {
    assert!(
        output.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        output.status.code(),
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
    output
}

fn stderr(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

fn run_dir(out: &Path) -> PathBuf {
    out.join("t")
}

fn tiny_config() -> ExperimentConfig {
    ExperimentConfig::default().with_overrides(TINY).unwrap()
}

#[test]
fn generate_writes_reloadable_data_and_is_repeatable() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    ok(plstitch(a.path(), &[], &["generate"]));
    ok(plstitch(b.path(), &[], &["generate"]));
    for name in ["data/train.bin", "data/eval.bin", "data/manifest.json", "config.toml"] {
        let x = fs::read(run_dir(a.path()).join(name)).unwrap();
        let y = fs::read(run_dir(b.path()).join(name)).unwrap();
        assert_eq!(x, y, "{name} differs between runs");
    }
    let cfg = tiny_config();
    let loaded = Dataset::load(&run_dir(a.path()).join("data/train.bin")).unwrap();
    assert_eq!(loaded, cfg.train_set().unwrap());
    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(run_dir(a.path()).join("data/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config_hash"], cfg.hash());
    assert_eq!(manifest["files"]["train"]["videos"], 4);
}

#[test]
fn default_generate_writes_two_hundred_videos() {
    let dir = tempfile::tempdir().unwrap();
    let output = Command::new(env!("CARGO_BIN_EXE_plstitch"))
        .env("PLSTITCH_OUT", dir.path())
        .arg("generate")
        .output()
        .unwrap();
    ok(output);
    let set = Dataset::load(&dir.path().join("default/data/train.bin")).unwrap();
    assert_eq!(set.len(), 200);
    assert_eq!(set, ExperimentConfig::default().train_set().unwrap());
}

#[test]
fn config_errors_exit_with_one_and_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    for (bad, field) in [
        ("train.epoch=3", "train.epoch"),
        ("train.batch_size=0", "train.batch_size"),
        ("eval.knn_k=0", "eval.knn_k"),
    ] {
        let output = plstitch(dir.path(), &[bad], &["generate"]);
        assert_eq!(output.status.code(), Some(1), "{bad}");
        let err = stderr(&output);
        assert!(err.contains("error kind=config"), "{err}");
        assert!(err.contains(field), "{bad}: {err}");
    }

    let toml = dir.path().join("bad.toml");
    fs::write(&toml, "[generator]\nnoise = 1.0\n").unwrap();
    let output = Command::new(env!("CARGO_BIN_EXE_plstitch"))
        .arg("--config")
        .arg(&toml)
        .arg("generate")
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
    assert!(stderr(&output).contains("noise"), "{}", stderr(&output));

    let output = plstitch(dir.path(), &[], &["ablate", "table9"]);
    assert_eq!(output.status.code(), Some(1));
    let output = plstitch(dir.path(), &[], &["frobnicate"]);
    assert_eq!(output.status.code(), Some(1));
}

#[test]
fn config_file_and_overrides_combine() {
    let dir = tempfile::tempdir().unwrap();
    let toml = dir.path().join("exp.toml");
    let mut cfg = tiny_config();
    cfg.run_name = "from_file".into();
    fs::write(&toml, cfg.to_toml_string()).unwrap();
    let output = Command::new(env!("CARGO_BIN_EXE_plstitch"))
        .arg("--config")
        .arg(&toml)
        .args(["--set", "data.train_videos=3", "--out"])
        .arg(dir.path())
        .arg("generate")
        .output()
        .unwrap();
    ok(output);
    let set = Dataset::load(&dir.path().join("from_file/data/train.bin")).unwrap();
    assert_eq!(set.len(), 3);
}

#[test]
fn runtime_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let output = plstitch(dir.path(), &[], &["pretrain"]);
    assert_eq!(output.status.code(), Some(2));
    let err = stderr(&output);
    assert!(err.contains("error kind=runtime"), "{err}");
    assert!(err.contains("plstitch generate"), "missing hint: {err}");

    let output = plstitch(dir.path(), &[], &["eval"]);
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn pretrain_with_zero_epochs_saves_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    ok(plstitch(dir.path(), &[], &["generate"]));
    ok(plstitch(dir.path(), &["train.epochs=0", "train.warmup_epochs=0"], &["pretrain"]));
    let ck = Checkpoint::load(&run_dir(dir.path()).join("checkpoint.bin")).unwrap();
    let (_, init) = Model::new(&ck.net, &ck.train).unwrap();
    assert_eq!(ck.params, init);
    let log = fs::read_to_string(run_dir(dir.path()).join("train_log.jsonl")).unwrap();
    assert!(log.is_empty());
}

#[test]
fn pretrain_eval_pipeline_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [&a, &b] {
        ok(plstitch(dir.path(), &[], &["generate"]));
        ok(plstitch(dir.path(), &[], &["pretrain"]));
        ok(plstitch(dir.path(), &[], &["eval"]));
    }
    for name in ["checkpoint.bin", "train_log.jsonl", "report.json", "progression.tsv", "pretrain_manifest.json"] {
        let x = fs::read(run_dir(a.path()).join(name)).unwrap();
        let y = fs::read(run_dir(b.path()).join(name)).unwrap();
        assert_eq!(x, y, "{name} differs between runs");
    }

    // rerunning eval in place rewrites the same bytes
    let before = fs::read(run_dir(a.path()).join("report.json")).unwrap();
    ok(plstitch(a.path(), &[], &["eval"]));
    assert_eq!(fs::read(run_dir(a.path()).join("report.json")).unwrap(), before);

    let log = fs::read_to_string(run_dir(a.path()).join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    for line in log.lines() {
        let record: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["vid", "mim", "jigsaw", "total"] {
            assert!(record[key].is_f64(), "{key} missing in {line}");
        }
    }
    let report: serde_json::Value = serde_json::from_slice(&before).unwrap();
    assert_eq!(report["config_hash"], tiny_config().hash());
    for key in ["knn_acc", "linear_acc", "macro_f1", "edit", "ari", "nmi", "progression_spearman"] {
        assert!(report[key].is_f64(), "{key} missing");
    }
    assert!(report["f1_at"]["50"].is_f64());
}

#[test]
fn eval_warns_on_generator_mismatch_but_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    ok(plstitch(dir.path(), &[], &["generate"]));
    ok(plstitch(dir.path(), &[], &["pretrain"]));
    let other = tempfile::tempdir().unwrap();
    ok(plstitch(other.path(), &["generator.noise_sigma=0.7"], &["generate"]));
    let foreign = run_dir(other.path()).join("data/eval.bin");
    let output = ok(plstitch(dir.path(), &[], &["eval", "--dataset", foreign.to_str().unwrap()]));
    let err = stderr(&output);
    assert!(err.contains("warning kind=hash_mismatch"), "{err}");
}

#[test]
fn out_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_plstitch"));
    cmd.env("PLSTITCH_OUT", dir.path());
    for s in TINY {
        cmd.arg("--set").arg(s);
    }
    ok(cmd.arg("generate").output().unwrap());
    assert!(run_dir(dir.path()).join("data/train.bin").exists());
}

fn table_rows(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(2)
        .map(str::to_string)
        .collect()
}

#[test]
fn ablation_presets_emit_one_row_per_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let short = ["train.epochs=1", "train.warmup_epochs=0", "train.samples_per_video=1"];
    for (preset, rows) in [("table3", 4), ("table4", 3), ("table5", 4), ("lambda", 6)] {
        ok(plstitch(dir.path(), &short, &["ablate", preset]));
        let path = run_dir(dir.path()).join(format!("ablation_{preset}.tsv"));
        let lines = table_rows(&path);
        assert_eq!(lines.len(), rows, "{preset}");
        let header = fs::read_to_string(&path).unwrap();
        assert!(header.lines().nth(1).unwrap().starts_with("row\tknn_acc\tlinear_acc"));
        assert!(header.starts_with("# preset"));
    }
    let t4 = table_rows(&run_dir(dir.path()).join("ablation_table4.tsv"));
    let names: Vec<&str> = t4.iter().map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(names, ["pairwise", "perm_ce", "pl"]);
}

#[test]
fn probe_emits_both_distributions_and_is_repeatable() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [&a, &b] {
        ok(plstitch(dir.path(), &[], &["probe"]));
    }
    for name in ["probe.json", "distances.tsv", "probe_progression.tsv"] {
        let x = fs::read(run_dir(a.path()).join(name)).unwrap();
        let y = fs::read(run_dir(b.path()).join(name)).unwrap();
        assert_eq!(x, y, "{name} differs between runs");
    }
    let distances = fs::read_to_string(run_dir(a.path()).join("distances.tsv")).unwrap();
    let models: std::collections::BTreeSet<&str> =
        distances.lines().skip(1).map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(models.into_iter().collect::<Vec<_>>(), ["mim_only", "pl_stitch"]);
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(run_dir(a.path()).join("probe.json")).unwrap()).unwrap();
    assert!(report["pl_stitch"]["mean_cos_dist"].is_f64());
    assert!(report["mim_only"]["mean_cos_dist"].is_f64());
}

#[test]
fn help_exits_zero() {
    let output = Command::new(env!("CARGO_BIN_EXE_plstitch")).arg("--help").output().unwrap();
    ok(output);
}
