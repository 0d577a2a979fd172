//! `plstitch`: generate synthetic procedures, pretrain, evaluate, run
//! ablations and the forward/backward probe.
//!
//! Exit codes: 0 success, 1 configuration error, 2 runtime error. Failures
//! print one `error kind=... field=... message="..."` line on stderr.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use plstitch::checkpoint::Checkpoint;
use plstitch::eval::{distances_tsv, evaluate, progression_tsv};
use plstitch::experiment::{ablation_table, generator_hash, run_ablation, run_probe, sha256_hex, AblationPreset, ExperimentConfig};
use plstitch::synth::Dataset;
use plstitch::train::{log_to_jsonl, train_with, Model};

const OUT_ENV: &str = "PLSTITCH_OUT";

#[derive(Debug, Parser)]
#[command(name = "plstitch", version, about = "Listwise temporal ranking experiments on synthetic procedures")]
struct Cli {
    /// Experiment config (TOML). Defaults apply to anything it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config field, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Seed for data generation, initialization, training and evaluation.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root; the run directory is `<out>/<run_name>`. Falls back to
    /// $PLSTITCH_OUT, then `output_dir` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the training and held-out datasets plus a manifest.
    Generate,
    /// Train on the generated dataset; writes a checkpoint and an epoch log.
    Pretrain {
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the held-out dataset.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Train and evaluate every row of an ablation preset.
    Ablate {
        /// table3, table4, table5 or lambda
        preset: String,
    },
    /// Forward/backward divergence of the full and MIM-only models, plus
    /// progression curves.
    Probe,
}

#[derive(Debug)]
enum CliError {
    Config { field: String, message: String },
    Runtime(String),
}

impl CliError {
    fn runtime(message: impl fmt::Display) -> Self {
        CliError::Runtime(message.to_string())
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config { .. } => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config { field, message } => {
                write!(f, "error kind=config field={field} message={:?}", message)
            }
            CliError::Runtime(message) => write!(f, "error kind=runtime message={:?}", message),
        }
    }
}

impl From<plstitch::Error> for CliError {
    fn from(e: plstitch::Error) -> Self {
        match e {
            plstitch::Error::Config { field, reason } => CliError::Config { field, message: reason },
            other => CliError::Runtime(other.to_string()),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn warn(kind: &str, message: impl fmt::Display) {
    eprintln!("warning kind={kind} message={:?}", message.to_string());
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::runtime(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
}

fn pretty(value: &serde_json::Value) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("json serializes");
    s.push('\n');
    s
}

/// Resolved config and the directory this run writes to.
struct Run {
    cfg: ExperimentConfig,
    dir: PathBuf,
}

impl Run {
    fn resolve(cli: &Cli) -> CliResult<Self> {
        let base = match &cli.config {
            Some(path) if !path.exists() => {
                return Err(CliError::Config {
                    field: "--config".into(),
                    message: format!("{} does not exist", path.display()),
                })
            }
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        let mut cfg = base.with_overrides(&cli.overrides)?;
        if let Some(seed) = cli.seed {
            cfg = cfg.with_seed(seed);
        }
        let root = cli
            .out
            .clone()
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| cfg.output_dir.clone());
        let dir = root.join(&cfg.run_name);
        Ok(Self { cfg, dir })
    }

    fn train_data(&self) -> PathBuf {
        self.dir.join("data").join("train.bin")
    }

    fn eval_data(&self) -> PathBuf {
        self.dir.join("data").join("eval.bin")
    }

    fn checkpoint(&self) -> PathBuf {
        self.dir.join("checkpoint.bin")
    }

    fn hash(&self) -> String {
        self.cfg.hash()
    }

    fn write_config(&self) -> CliResult<()> {
        write_file(&self.dir.join("config.toml"), self.cfg.to_toml_string())
    }
}

fn load_dataset(path: &Path, hint: &str) -> CliResult<Dataset> {
    if !path.exists() {
        return Err(CliError::runtime(format!("{} not found; {hint}", path.display())));
    }
    Ok(Dataset::load(path)?)
}

fn cmd_generate(run: &Run) -> CliResult<()> {
    let train = run.cfg.train_set()?;
    let eval = run.cfg.eval_set()?;
    let mut files = serde_json::Map::new();
    for (name, set, path) in [("train", &train, run.train_data()), ("eval", &eval, run.eval_data())] {
        let bytes = set.to_bytes();
        write_file(&path, &bytes)?;
        files.insert(
            name.into(),
            json!({
                "path": path.file_name().unwrap().to_string_lossy(),
                "sha256": sha256_hex(&bytes),
                "videos": set.len(),
                "frames": set.num_frames(),
            }),
        );
    }
    run.write_config()?;
    let manifest = json!({
        "config_hash": run.hash(),
        "generator_hash": run.cfg.generator_hash(),
        "files": files,
    });
    write_file(&run.dir.join("data").join("manifest.json"), pretty(&manifest))?;
    println!(
        "generated {} training and {} held-out videos in {}",
        train.len(),
        eval.len(),
        run.dir.join("data").display()
    );
    Ok(())
}

fn cmd_pretrain(run: &Run, dataset: Option<PathBuf>) -> CliResult<()> {
    let path = dataset.unwrap_or_else(|| run.train_data());
    let data = load_dataset(&path, "run `plstitch generate` with the same config first")?;
    if data.config != run.cfg.generator {
        warn(
            "hash_mismatch",
            format!("{} was generated with a different generator config", path.display()),
        );
    }
    let cfg = &run.cfg;
    let outcome = train_with(&data.videos, &cfg.net, &cfg.train, |r| {
        eprintln!(
            "epoch {:>3}  lr {:.2e}  vid {:.4}  mim {:.4}  jigsaw {:.4}  total {:.4}",
            r.epoch, r.lr, r.vid, r.mim, r.jigsaw, r.total
        );
    })?;
    let checkpoint = Checkpoint {
        config_hash: run.hash(),
        generator_hash: generator_hash(&data.config),
        net: cfg.net.clone(),
        train: cfg.train.clone(),
        params: outcome.params().clone(),
    };
    let bytes = checkpoint.to_bytes();
    write_file(&run.checkpoint(), &bytes)?;
    write_file(&run.dir.join("train_log.jsonl"), log_to_jsonl(&outcome.log))?;
    run.write_config()?;
    let manifest = json!({
        "config_hash": run.hash(),
        "generator_hash": checkpoint.generator_hash,
        "dataset_sha256": sha256_hex(&data.to_bytes()),
        "checkpoint_sha256": sha256_hex(&bytes),
        "epochs": cfg.train.epochs,
        "steps": outcome.state.step,
    });
    write_file(&run.dir.join("pretrain_manifest.json"), pretty(&manifest))?;
    println!("checkpoint written to {}", run.checkpoint().display());
    Ok(())
}

fn cmd_eval(run: &Run, checkpoint: Option<PathBuf>, dataset: Option<PathBuf>) -> CliResult<()> {
    let ck_path = checkpoint.unwrap_or_else(|| run.checkpoint());
    if !ck_path.exists() {
        return Err(CliError::runtime(format!(
            "{} not found; run `plstitch pretrain` first",
            ck_path.display()
        )));
    }
    let ck = Checkpoint::load(&ck_path)?;
    let model: Model = ck.model()?;
    let data_path = dataset.unwrap_or_else(|| run.eval_data());
    let data = load_dataset(&data_path, "run `plstitch generate` with the same config first")?;
    let data_hash = generator_hash(&data.config);
    if data_hash != ck.generator_hash {
        warn(
            "hash_mismatch",
            format!(
                "checkpoint was trained on generator {} but {} comes from generator {}",
                ck.generator_hash,
                data_path.display(),
                data_hash
            ),
        );
    }
    let evaluation = evaluate(&model.network, &ck.params, &data.videos, &run.cfg.eval, &ck.config_hash)?;
    write_file(&run.dir.join("report.json"), evaluation.report.to_json())?;
    write_file(&run.dir.join("progression.tsv"), progression_tsv(&evaluation.curves))?;
    let r = &evaluation.report;
    println!(
        "knn_acc {:.2}  linear_acc {:.2}  macro_f1 {:.2}  edit {:.2}  ari {:.3}  nmi {:.3}  progression_spearman {:.3}",
        r.knn_acc, r.linear_acc, r.macro_f1, r.edit, r.ari, r.nmi, r.progression_spearman
    );
    Ok(())
}

fn cmd_ablate(run: &Run, preset: &str) -> CliResult<()> {
    let preset: AblationPreset = preset.parse()?;
    let train = run.cfg.train_set()?;
    let eval = run.cfg.eval_set()?;
    let results = run_ablation(preset, &run.cfg, &train.videos, &eval.videos, |r| {
        eprintln!("{}: knn_acc {:.2} linear_acc {:.2}", r.name, r.report.knn_acc, r.report.linear_acc);
    })?;
    let table = ablation_table(preset, &run.hash(), &results);
    write_file(&run.dir.join(format!("ablation_{preset}.tsv")), &table)?;
    let reports: Vec<_> = results.iter().map(|r| json!({ "row": r.name, "report": r.report })).collect();
    write_file(&run.dir.join(format!("ablation_{preset}.json")), pretty(&json!(reports)))?;
    run.write_config()?;
    print!("{table}");
    Ok(())
}

fn cmd_probe(run: &Run) -> CliResult<()> {
    let train = run.cfg.train_set()?;
    let eval = run.cfg.eval_set()?;
    let out = run_probe(&run.cfg, &train.videos, &eval.videos)?;
    write_file(
        &run.dir.join("distances.tsv"),
        distances_tsv(&[("pl_stitch", &out.full), ("mim_only", &out.mim_only)]),
    )?;
    write_file(&run.dir.join("probe_progression.tsv"), progression_tsv(&out.curves))?;
    let spearman = out.curves.iter().map(|c| c.2.spearman).sum::<f64>() / out.curves.len().max(1) as f64;
    let report = json!({
        "config_hash": run.hash(),
        "pl_stitch": { "mean_cos_dist": out.full.mean, "median_cos_dist": out.full.median },
        "mim_only": { "mean_cos_dist": out.mim_only.mean, "median_cos_dist": out.mim_only.median },
        "ratio": out.ratio(),
        "progression_spearman": spearman,
    });
    write_file(&run.dir.join("probe.json"), pretty(&report))?;
    run.write_config()?;
    println!(
        "mean cosine distance: pl_stitch {:.4}  mim_only {:.4}  ratio {:.2}",
        out.full.mean,
        out.mim_only.mean,
        out.ratio()
    );
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    let run = Run::resolve(&cli)?;
    match cli.command {
        Command::Generate => cmd_generate(&run),
        Command::Pretrain { dataset } => cmd_pretrain(&run, dataset),
        Command::Eval { checkpoint, dataset } => cmd_eval(&run, checkpoint, dataset),
        Command::Ablate { preset } => cmd_ablate(&run, &preset),
        Command::Probe => cmd_probe(&run),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e.to_string();
            let first = message.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", CliError::Config { field: "arguments".into(), message: first.to_string() });
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
