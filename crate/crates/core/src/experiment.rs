//! Experiment configs and the multi-run drivers: ablation sweeps and the
//! forward/backward probe.

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{evaluate, fwdbwd_probe, progression_curve, DistanceSummary, EvalConfig, EvalReport, ProgressionCurve};
use crate::losses::LossWeights;
use crate::net::params::Parameters;
use crate::net::{NetConfig, Network};
use crate::synth::{reverse_video, Dataset, GeneratorConfig, SyntheticVideo};
use crate::train::{train, BranchFlags, Objective, TrainConfig, TrainOutcome};

/// Stream offset of held-out evaluation videos: far past any training set.
pub const EVAL_STREAM_OFFSET: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_videos: usize,
    pub eval_videos: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_videos: 200,
            eval_videos: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub run_name: String,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub generator: GeneratorConfig,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            run_name: "default".into(),
            output_dir: PathBuf::from("runs"),
            data: DataConfig::default(),
            generator: GeneratorConfig::default(),
            net: NetConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn toml_error(e: impl fmt::Display) -> Error {
    let text = e.to_string();
    // toml reports unknown fields as "unknown field `x`"; surface the name
    let field = text
        .split('`')
        .nth(1)
        .map_or_else(|| "config".to_string(), str::to_string);
    Error::config(field, text.lines().rfind(|l| !l.trim().is_empty()).unwrap_or("").trim())
}

/// Parse an override value as a TOML literal, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(toml_error)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Apply `key.path=value` overrides in order, then validate.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut root = toml::Value::try_from(self).expect("config serializes");
        for item in overrides {
            let item = item.as_ref();
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::config(item, "override must look like key.path=value"))?;
            let key = key.trim();
            let parts: Vec<&str> = key.split('.').collect();
            let mut node = &mut root;
            for (i, part) in parts.iter().enumerate() {
                let table = node
                    .as_table_mut()
                    .ok_or_else(|| Error::config(key, format!("`{}` is not a section", parts[..i].join("."))))?;
                if i + 1 == parts.len() {
                    if !table.contains_key(*part) {
                        return Err(Error::config(key, "unknown field"));
                    }
                    table.insert(part.to_string(), parse_value(raw.trim()));
                    break;
                }
                node = table.get_mut(*part).ok_or_else(|| Error::config(key, "unknown section"))?;
            }
        }
        let cfg: Self = root.try_into().map_err(toml_error)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Use one seed for the generator, the network, training and evaluation.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut cfg = self.clone();
        cfg.generator.seed = seed;
        cfg.net.seed = seed;
        cfg.train.seed = seed;
        cfg.eval.seed = seed;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.run_name.trim().is_empty() {
            return Err(Error::config("run_name", "must be nonempty"));
        }
        if self.data.train_videos == 0 {
            return Err(Error::config("data.train_videos", "must be >= 1"));
        }
        if self.data.eval_videos < 2 {
            return Err(Error::config("data.eval_videos", "must be >= 2"));
        }
        self.generator.validate()?;
        self.net.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        if self.net.patches != self.generator.patches || self.net.d_in != self.generator.d_in {
            return Err(Error::config("net.patches", "net.patches and net.d_in must equal the generator's"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    pub fn generator_hash(&self) -> String {
        generator_hash(&self.generator)
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.run_name)
    }

    pub fn train_set(&self) -> Result<Dataset> {
        Dataset::generate(&self.generator, self.data.train_videos)
    }

    pub fn eval_set(&self) -> Result<Dataset> {
        Dataset::generate_range(&self.generator, EVAL_STREAM_OFFSET, self.data.eval_videos)
    }
}

pub fn generator_hash(generator: &GeneratorConfig) -> String {
    sha256_hex(serde_json::to_string(generator).expect("config serializes").as_bytes())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationPreset {
    /// Branch combinations.
    Table3,
    /// Temporal objective formulations.
    Table4,
    /// Clip lengths.
    Table5,
    /// Loss weights.
    Lambda,
}

impl FromStr for AblationPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table3" => Ok(Self::Table3),
            "table4" => Ok(Self::Table4),
            "table5" => Ok(Self::Table5),
            "lambda" => Ok(Self::Lambda),
            other => Err(Error::config(
                "preset",
                format!("unknown preset `{other}` (expected table3, table4, table5 or lambda)"),
            )),
        }
    }
}

impl fmt::Display for AblationPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Table3 => "table3",
            Self::Table4 => "table4",
            Self::Table5 => "table5",
            Self::Lambda => "lambda",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub train: TrainConfig,
}

fn flags(use_vid: bool, use_mim: bool, use_jigsaw: bool) -> BranchFlags {
    BranchFlags {
        use_vid,
        use_mim,
        use_jigsaw,
    }
}

/// The training configs of one preset, each derived from `base`.
pub fn preset_rows(preset: AblationPreset, base: &TrainConfig) -> Vec<AblationRow> {
    let row = |name: &str, train: TrainConfig| AblationRow {
        name: name.to_string(),
        train,
    };
    match preset {
        AblationPreset::Table3 => [
            ("mim", flags(false, true, false)),
            ("mim+vid", flags(true, true, false)),
            ("mim+jigsaw", flags(false, true, true)),
            ("mim+vid+jigsaw", flags(true, true, true)),
        ]
        .into_iter()
        .map(|(name, branches)| row(name, TrainConfig { branches, ..base.clone() }))
        .collect(),
        AblationPreset::Table4 => [Objective::Pairwise, Objective::PermCe, Objective::Pl]
            .into_iter()
            .map(|objective| row(&objective.to_string(), TrainConfig { objective, ..base.clone() }))
            .collect(),
        AblationPreset::Table5 => [4, 8, 12, 16]
            .into_iter()
            .map(|k| row(&format!("k={k}"), TrainConfig { clip_len: k, ..base.clone() }))
            .collect(),
        AblationPreset::Lambda => [
            (0.0, 1.0, 0.0),
            (1.0, 1.0, 0.0),
            (1.0, 1.0, 1.0),
            (1.0, 1.0, 0.4),
            (0.5, 1.0, 0.4),
            (2.0, 1.0, 0.4),
        ]
        .into_iter()
        .map(|(l1, l2, l3)| {
            // a zero weight switches its branch off; the trajectory is the same
            let train = TrainConfig {
                loss_weights: LossWeights {
                    lambda1: l1,
                    lambda2: l2,
                    lambda3: l3,
                },
                branches: flags(l1 > 0.0, l2 > 0.0, l3 > 0.0),
                ..base.clone()
            };
            row(&format!("lambda=({l1},{l2},{l3})"), train)
        })
        .collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationResult {
    pub name: String,
    pub report: EvalReport,
}

/// Train and evaluate every row of `preset` with the same seeds.
pub fn run_ablation(
    preset: AblationPreset,
    cfg: &ExperimentConfig,
    train_videos: &[SyntheticVideo],
    eval_videos: &[SyntheticVideo],
    mut on_row: impl FnMut(&AblationResult),
) -> Result<Vec<AblationResult>> {
    let hash = cfg.hash();
    let mut results = Vec::new();
    for row in preset_rows(preset, &cfg.train) {
        let outcome = train(train_videos, &cfg.net, &row.train)?;
        let report = evaluate(&outcome.model.network, outcome.params(), eval_videos, &cfg.eval, &hash)?.report;
        let result = AblationResult { name: row.name, report };
        on_row(&result);
        results.push(result);
    }
    Ok(results)
}

/// Column text with one row per configuration.
pub fn ablation_table(preset: AblationPreset, config_hash: &str, results: &[AblationResult]) -> String {
    let mut out = format!("# preset {preset} config_hash {config_hash}\n");
    out.push_str("row\tknn_acc\tlinear_acc\tmacro_f1\tedit\tf1_50\tari\tnmi\n");
    for r in results {
        let m = &r.report;
        writeln!(
            out,
            "{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
            r.name, m.knn_acc, m.linear_acc, m.macro_f1, m.edit, m.f1_at.at_50, m.ari, m.nmi
        )
        .unwrap();
    }
    out
}

/// Forward/backward divergence of the full model and of the MIM-only
/// baseline, plus progression curves of the forward full model.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeOutput {
    pub full: DistanceSummary,
    pub mim_only: DistanceSummary,
    pub curves: Vec<(usize, Vec<usize>, ProgressionCurve)>,
}

impl ProbeOutput {
    /// Full-model mean distance over the MIM-only mean.
    pub fn ratio(&self) -> f64 {
        self.full.mean / self.mim_only.mean
    }
}

/// Train each config on `videos` and on their reversals.
pub fn train_pair(videos: &[SyntheticVideo], net: &NetConfig, cfg: &TrainConfig) -> Result<(TrainOutcome, TrainOutcome)> {
    let reversed: Vec<SyntheticVideo> = videos.iter().map(reverse_video).collect();
    Ok((train(videos, net, cfg)?, train(&reversed, net, cfg)?))
}

fn pair(o: &TrainOutcome) -> (&Network, &Parameters) {
    (&o.model.network, o.params())
}

pub fn run_probe(cfg: &ExperimentConfig, train_videos: &[SyntheticVideo], eval_videos: &[SyntheticVideo]) -> Result<ProbeOutput> {
    let mim_cfg = TrainConfig {
        branches: flags(false, true, false),
        ..cfg.train.clone()
    };
    let (full_f, full_b) = train_pair(train_videos, &cfg.net, &cfg.train)?;
    let (mim_f, mim_b) = train_pair(train_videos, &cfg.net, &mim_cfg)?;
    let full = fwdbwd_probe(pair(&full_f), pair(&full_b), eval_videos)?;
    let mim_only = fwdbwd_probe(pair(&mim_f), pair(&mim_b), eval_videos)?;
    let take = if cfg.eval.progression_videos == 0 {
        eval_videos.len()
    } else {
        cfg.eval.progression_videos.min(eval_videos.len())
    };
    let mut curves = Vec::with_capacity(take);
    for (i, video) in eval_videos.iter().take(take).enumerate() {
        let curve = progression_curve(&full_f.model.network, full_f.params(), video, cfg.eval.progression_window)?;
        curves.push((i, video.labels().to_vec(), curve));
    }
    Ok(ProbeOutput { full, mim_only, curves })
}
