//! Config-driven stages: `cpt → sft → dpo`, plus `eval`, `anneval` and
//! `data`. Each stage reads its inputs, writes only under `out_dir`, and
//! appends a run manifest there.
//!
//! ```toml
//! stage = "sft"
//! seed = 7
//! out_dir = "runs/sft"
//!
//! [inputs]
//! vocab = "vocab.txt"
//! checkpoint = "runs/cpt/model.ckpt"
//! data = "instructions.jsonl"
//!
//! [train]
//! peak_lr = 2e-5
//! batch_tokens = 4096
//! ```
//!
//! Relative paths resolve against the config file's directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use lowres_annesrv::{generate_outputs, stratified_sample, Quota, QuotaMap, SampleStore};
use lowres_core::databuild::{
    build_instruction_dataset, build_preference_dataset, read_instructions, read_preferences, render_chat,
    write_instructions, write_preferences, DataError,
};
use lowres_core::evalharness::{load_task_dir, run_suite};
use lowres_core::model::{Checkpoint, ModelConfig, Params};
use lowres_core::packer::load_shard;
use lowres_core::tokenizer::Vocab;
use lowres_core::trainer::{run, Objective, PrefExample, RunOptions, TrainConfig, TrainData};

use crate::common::{load_checkpoint, load_vocab, parse_mt, read_testset};
use crate::error::{CliError, Result};
use crate::manifest::{FileDigest, RunManifest};

/// Final weights of a training stage, relative to `out_dir`.
pub const MODEL_FILE: &str = "model.ckpt";
pub const REPORT_FILE: &str = "train_report.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Cpt,
    Sft,
    Dpo,
    Eval,
    Anneval,
    Data,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Cpt => "cpt",
            Stage::Sft => "sft",
            Stage::Dpo => "dpo",
            Stage::Eval => "eval",
            Stage::Anneval => "anneval",
            Stage::Data => "data",
        }
    }

    /// Checkpoint stages accepted as input, in order of the pipeline.
    fn predecessors(self) -> &'static [&'static str] {
        match self {
            Stage::Cpt => &["init", "cpt"],
            Stage::Sft => &["cpt"],
            Stage::Dpo => &["sft"],
            _ => &[],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| CliError::Config(format!("unknown stage `{s}`")))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Inputs {
    pub vocab: Option<PathBuf>,
    /// Checkpoint produced by the preceding stage.
    pub checkpoint: Option<PathBuf>,
    /// Packed shards (cpt).
    #[serde(default)]
    pub shards: Vec<PathBuf>,
    /// Instruction or preference jsonl (sft, dpo, data).
    pub data: Option<PathBuf>,
    /// Directory of task descriptors (eval).
    pub tasks: Option<PathBuf>,
    /// Instruction test set (anneval).
    pub testset: Option<PathBuf>,
    /// Intermediate checkpoint of this same stage to continue from.
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "default_language")]
    pub language: String,
}

fn default_language() -> String {
    "eu".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnevalSection {
    /// Model id → checkpoint.
    #[serde(default)]
    pub models: BTreeMap<String, PathBuf>,
    #[serde(default = "default_max_new")]
    pub max_new: usize,
    /// Replaces the default category quotas when set.
    #[serde(default)]
    pub quota: Option<Vec<Quota>>,
    #[serde(default = "default_exclude")]
    pub exclude: BTreeSet<String>,
}

fn default_max_new() -> usize {
    256
}

fn default_exclude() -> BTreeSet<String> {
    lowres_annesrv::default_exclude()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    Instruct,
    Pref,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub kind: DataKind,
    #[serde(default = "default_mt")]
    pub mt: String,
    #[serde(default = "default_src")]
    pub src_lang: String,
    #[serde(default = "default_language")]
    pub tgt_lang: String,
    /// Output file name inside `out_dir`.
    #[serde(default)]
    pub output: Option<String>,
}

fn default_mt() -> String {
    "identity".into()
}

fn default_src() -> String {
    "en".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub stage: Stage,
    #[serde(default)]
    pub seed: u64,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub inputs: Inputs,
    /// Architecture for a fresh model (cpt without an input checkpoint).
    #[serde(default)]
    pub model: Option<ModelConfig>,
    /// Training fields; `objective` defaults to the stage and `seed` to
    /// the global seed.
    #[serde(default)]
    pub train: Option<toml::Table>,
    #[serde(default)]
    pub eval: Option<EvalSection>,
    #[serde(default)]
    pub anneval: Option<AnnevalSection>,
    #[serde(default)]
    pub data: Option<DataSection>,
    /// Accept input checkpoints from any stage.
    #[serde(default)]
    pub allow_out_of_order: bool,
}

fn schema_error<E: fmt::Display>(prefix: &str, e: serde_path_to_error::Error<E>) -> CliError {
    let path = e.path().to_string();
    let field = match (prefix, path.as_str()) {
        ("", p) => p.to_string(),
        (pre, ".") => pre.to_string(),
        (pre, p) => format!("{pre}.{p}"),
    };
    CliError::Config(format!("{field}: {}", e.inner()))
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl PipelineConfig {
    /// Parses and validates `text`; relative paths are resolved against `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let value: toml::Value = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        let mut cfg: PipelineConfig = serde_path_to_error::deserialize(value).map_err(|e| schema_error("", e))?;
        resolve(base, &mut cfg.out_dir);
        let i = &mut cfg.inputs;
        for p in [
            &mut i.vocab,
            &mut i.checkpoint,
            &mut i.data,
            &mut i.tasks,
            &mut i.testset,
            &mut i.resume,
        ]
        .into_iter()
        .flatten()
        {
            resolve(base, p);
        }
        for p in &mut i.shards {
            resolve(base, p);
        }
        if let Some(a) = &mut cfg.anneval {
            for p in a.models.values_mut() {
                resolve(base, p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base)
    }

    fn require<'a>(&self, field: &str, v: &'a Option<PathBuf>) -> Result<&'a Path> {
        v.as_deref()
            .ok_or_else(|| CliError::Config(format!("inputs.{field}: required by the {} stage", self.stage)))
    }

    /// Checks that the fields needed by the stage are present. Input files
    /// are checked when the stage runs.
    pub fn validate(&self) -> Result<()> {
        match self.stage {
            Stage::Cpt => {
                self.require("vocab", &self.inputs.vocab)?;
                if self.inputs.shards.is_empty() {
                    return Err(CliError::Config("inputs.shards: required by the cpt stage".into()));
                }
                if self.inputs.checkpoint.is_none() && self.model.is_none() {
                    return Err(CliError::Config(
                        "model: required by the cpt stage when inputs.checkpoint is not set".into(),
                    ));
                }
                self.train_config()?;
            }
            Stage::Sft | Stage::Dpo => {
                self.require("vocab", &self.inputs.vocab)?;
                self.require("checkpoint", &self.inputs.checkpoint)?;
                self.require("data", &self.inputs.data)?;
                self.train_config()?;
            }
            Stage::Eval => {
                self.require("vocab", &self.inputs.vocab)?;
                self.require("checkpoint", &self.inputs.checkpoint)?;
                self.require("tasks", &self.inputs.tasks)?;
            }
            Stage::Anneval => {
                self.require("testset", &self.inputs.testset)?;
                let a = self
                    .anneval
                    .as_ref()
                    .ok_or_else(|| CliError::Config("anneval: required by the anneval stage".into()))?;
                if !a.models.is_empty() {
                    self.require("vocab", &self.inputs.vocab)?;
                }
            }
            Stage::Data => {
                self.require("data", &self.inputs.data)?;
                let d = self
                    .data
                    .as_ref()
                    .ok_or_else(|| CliError::Config("data: required by the data stage".into()))?;
                if d.mt.is_empty() {
                    return Err(CliError::Config("data.mt: must not be empty".into()));
                }
            }
        }
        if let Some(m) = &self.model {
            m.validate().map_err(|e| CliError::Config(format!("model: {e}")))?;
        }
        Ok(())
    }

    /// The `[train]` table as a [`TrainConfig`] for this stage.
    pub fn train_config(&self) -> Result<TrainConfig> {
        let objective = match self.stage {
            Stage::Cpt => Objective::Cpt,
            Stage::Sft => Objective::Sft,
            Stage::Dpo => Objective::Dpo,
            s => return Err(CliError::Config(format!("the {s} stage does not train"))),
        };
        let mut table = self
            .train
            .clone()
            .ok_or_else(|| CliError::Config(format!("train: required by the {} stage", self.stage)))?;
        match table.get("objective").and_then(|v| v.as_str()) {
            Some(o) if o != objective.to_string() => {
                return Err(CliError::Config(format!(
                    "train.objective: `{o}` does not match stage `{}`",
                    self.stage
                )));
            }
            _ => {}
        }
        table.insert("objective".into(), toml::Value::String(objective.to_string()));
        match table.get("seed").and_then(|v| v.as_integer()) {
            Some(s) if s as u64 != self.seed => {
                return Err(CliError::Config(format!(
                    "train.seed: {s} conflicts with the global seed {}",
                    self.seed
                )));
            }
            _ => {}
        }
        table.insert("seed".into(), toml::Value::Integer(self.seed as i64));
        let cfg: TrainConfig =
            serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| schema_error("train", e))?;
        cfg.validate().map_err(|e| CliError::Config(format!("train: {e}")))?;
        Ok(cfg)
    }

    fn as_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serialises")
    }
}

/// What a stage produced.
#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub stage: Stage,
    pub out_dir: PathBuf,
    pub manifest: RunManifest,
    pub manifest_path: PathBuf,
}

impl StageOutcome {
    pub fn path(&self, rel: &str) -> PathBuf {
        self.out_dir.join(rel)
    }
}

fn input_digest(path: &Path, out: &mut Vec<FileDigest>) -> Result<()> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(path)
            .map_err(CliError::io(path))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        entries.sort();
        for e in entries {
            out.push(FileDigest::of(&e)?);
        }
        Ok(())
    } else {
        out.push(FileDigest::of(path)?);
        Ok(())
    }
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Data(format!("{what} {} does not exist", path.display())))
    }
}

/// Loads the upstream checkpoint and enforces the stage order.
fn upstream(cfg: &PipelineConfig, vocab: &Vocab) -> Result<Checkpoint> {
    let path = cfg.inputs.checkpoint.as_deref().expect("validated");
    let expected = cfg.stage.predecessors().join(" or ");
    if !path.exists() {
        return Err(CliError::StageOrder {
            stage: cfg.stage.to_string(),
            expected,
            msg: format!("{} does not exist; run that stage first", path.display()),
        });
    }
    let ck = load_checkpoint(path, vocab)?;
    let preds = cfg.stage.predecessors();
    if !preds.is_empty() && !preds.contains(&ck.header.stage.as_str()) {
        if cfg.allow_out_of_order {
            log::warn!(
                "{} stage consuming a `{}` checkpoint (stage order overridden)",
                cfg.stage,
                ck.header.stage
            );
        } else {
            return Err(CliError::StageOrder {
                stage: cfg.stage.to_string(),
                expected,
                msg: format!(
                    "{} comes from the `{}` stage (set allow_out_of_order for ablations)",
                    path.display(),
                    ck.header.stage
                ),
            });
        }
    }
    Ok(ck)
}

fn create_out_dir(cfg: &PipelineConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out_dir).map_err(CliError::io(&cfg.out_dir))
}

/// Runs one stage and appends its manifest to `out_dir/manifest.jsonl`.
pub fn run_stage(cfg: &PipelineConfig, config_path: Option<&Path>) -> Result<StageOutcome> {
    cfg.validate()?;
    let clock = Instant::now();
    let mut manifest = RunManifest::new(cfg.stage.as_str(), cfg.as_json(), cfg.seed);
    if let Some(p) = config_path {
        manifest.inputs.push(FileDigest::of(p)?);
    }
    let device_hours = match cfg.stage {
        Stage::Cpt | Stage::Sft | Stage::Dpo => train_stage(cfg, &mut manifest)?,
        Stage::Eval => {
            eval_stage(cfg, &mut manifest)?;
            None
        }
        Stage::Anneval => {
            anneval_stage(cfg, &mut manifest)?;
            None
        }
        Stage::Data => {
            data_stage(cfg, &mut manifest)?;
            None
        }
    };
    manifest.set_cost(clock.elapsed().as_secs_f64());
    if let Some(h) = device_hours {
        manifest.device_hours = h;
        manifest.emissions_kg =
            lowres_core::trainer::estimate_emissions(h, lowres_core::trainer::FITTED_KG_PER_DEVICE_HOUR)?;
    }
    let manifest_path = manifest.append_to(&cfg.out_dir)?;
    log::info!("{} stage done; manifest {}", cfg.stage, manifest_path.display());
    Ok(StageOutcome {
        stage: cfg.stage,
        out_dir: cfg.out_dir.clone(),
        manifest,
        manifest_path,
    })
}

fn train_stage(cfg: &PipelineConfig, manifest: &mut RunManifest) -> Result<Option<f64>> {
    let tc = cfg.train_config()?;
    let vocab_path = cfg.inputs.vocab.as_deref().expect("validated");
    let vocab = load_vocab(vocab_path)?;
    manifest.inputs.push(FileDigest::of(vocab_path)?);

    let (model_cfg, params, reference) = match (cfg.stage, &cfg.inputs.checkpoint) {
        (Stage::Cpt, None) => {
            let m = cfg.model.clone().expect("validated");
            if m.vocab_size != vocab.size() {
                return Err(CliError::Config(format!(
                    "model.vocab_size: {} does not match the vocab's {} ids",
                    m.vocab_size,
                    vocab.size()
                )));
            }
            let p = Params::init(&m)?;
            (m, p, None)
        }
        (stage, Some(path)) => {
            let ck = upstream(cfg, &vocab)?;
            manifest.inputs.push(FileDigest::of(path)?);
            if let Some(m) = &cfg.model {
                if *m != ck.header.config {
                    return Err(CliError::Config(
                        "model: differs from the input checkpoint's architecture".into(),
                    ));
                }
            }
            if ck.params.has_lora() {
                return Err(CliError::Data(format!(
                    "{} still carries LoRA adapters; use a merged model checkpoint",
                    path.display()
                )));
            }
            let reference = (stage == Stage::Dpo).then(|| ck.params.clone());
            (ck.header.config, ck.params, reference)
        }
        (s, None) => unreachable!("{s} validated to have a checkpoint"),
    };

    let data = match cfg.stage {
        Stage::Cpt => {
            let mut seqs = Vec::new();
            for p in &cfg.inputs.shards {
                require_file(p, "shard")?;
                let shard = load_shard(p, &vocab)?;
                if shard.seq_len > model_cfg.max_seq_len {
                    return Err(CliError::Config(format!(
                        "{}: sequence length {} exceeds model max_seq_len {}",
                        p.display(),
                        shard.seq_len,
                        model_cfg.max_seq_len
                    )));
                }
                manifest.inputs.push(FileDigest::of(p)?);
                seqs.extend(shard.sequences);
            }
            TrainData::Cpt(seqs)
        }
        Stage::Sft => {
            let p = cfg.inputs.data.as_deref().expect("validated");
            require_file(p, "instruction data")?;
            manifest.inputs.push(FileDigest::of(p)?);
            let mut rendered = Vec::new();
            let mut skipped = 0;
            for rec in read_instructions(p)? {
                match render_chat(&rec, &vocab, model_cfg.max_seq_len) {
                    Ok(r) => rendered.push(r),
                    Err(e @ (DataError::AssistantOverflow { .. } | DataError::InvalidRecord(_))) => {
                        log::warn!("skipping record: {e}");
                        skipped += 1;
                    }
                    Err(e) => return Err(e.into()),
                }
            }
            if skipped > 0 {
                manifest.notes.push(format!("{skipped} instruction records skipped"));
            }
            TrainData::Sft(rendered)
        }
        Stage::Dpo => {
            let p = cfg.inputs.data.as_deref().expect("validated");
            require_file(p, "preference data")?;
            manifest.inputs.push(FileDigest::of(p)?);
            let mut items = Vec::new();
            let mut skipped = 0;
            for t in read_preferences(p)? {
                let ex = match PrefExample::encode(&t, &vocab) {
                    Ok(ex) => ex,
                    Err(e) => {
                        log::warn!("skipping triplet: {e}");
                        skipped += 1;
                        continue;
                    }
                };
                let longest = ex.prompt.len() + ex.chosen.len().max(ex.rejected.len());
                if longest > model_cfg.max_seq_len + 1 {
                    skipped += 1;
                    continue;
                }
                items.push(ex);
            }
            if skipped > 0 {
                manifest.notes.push(format!("{skipped} preference triplets skipped"));
            }
            TrainData::Dpo(items)
        }
        _ => unreachable!(),
    };
    if data.is_empty() {
        return Err(CliError::Data(format!(
            "{} stage has no usable training items",
            cfg.stage
        )));
    }

    let resume = match &cfg.inputs.resume {
        Some(p) => {
            require_file(p, "resume checkpoint")?;
            let ck = load_checkpoint(p, &vocab)?;
            if ck.header.stage != cfg.stage.as_str() || ck.header.config != model_cfg {
                return Err(CliError::Data(format!(
                    "{} is a `{}` checkpoint of a different run; cannot resume the {} stage from it",
                    p.display(),
                    ck.header.stage,
                    cfg.stage
                )));
            }
            manifest.inputs.push(FileDigest::of(p)?);
            Some(ck)
        }
        None => None,
    };

    create_out_dir(cfg)?;
    let out = run(
        &tc,
        &model_cfg,
        params,
        &data,
        RunOptions {
            out_dir: Some(cfg.out_dir.join(CHECKPOINT_DIR)),
            resume: resume.as_ref(),
            reference: reference.as_ref(),
            vocab_hash: vocab.hash(),
            ..Default::default()
        },
    )?;
    let mut final_params = out.params;
    if final_params.has_lora() {
        final_params.lora_merge()?;
    }
    let ck = Checkpoint::new(
        model_cfg,
        final_params,
        vocab.hash(),
        out.report.summary.total_steps,
        cfg.stage.as_str(),
    );
    ck.save(cfg.out_dir.join(MODEL_FILE))?;
    out.report.save(cfg.out_dir.join(REPORT_FILE))?;
    manifest.outputs.push(FileDigest::relative(&cfg.out_dir, MODEL_FILE)?);
    if let Some(f) = &out.report.summary.final_checkpoint {
        manifest
            .outputs
            .push(FileDigest::relative(&cfg.out_dir, &format!("{CHECKPOINT_DIR}/{f}"))?);
    }
    if let Some(last) = out.report.steps.last() {
        manifest.notes.push(format!(
            "{} steps, final loss {:.4}",
            out.report.summary.total_steps, last.loss
        ));
    }
    Ok(Some(out.report.summary.device_hours))
}

pub const EVAL_JSON: &str = "eval_report.json";
pub const EVAL_TABLE: &str = "eval_report.txt";

fn eval_stage(cfg: &PipelineConfig, manifest: &mut RunManifest) -> Result<()> {
    let vocab_path = cfg.inputs.vocab.as_deref().expect("validated");
    let vocab = load_vocab(vocab_path)?;
    manifest.inputs.push(FileDigest::of(vocab_path)?);
    let ck_path = cfg.inputs.checkpoint.as_deref().expect("validated");
    if !ck_path.exists() {
        return Err(CliError::StageOrder {
            stage: "eval".into(),
            expected: "trained".into(),
            msg: format!("{} does not exist", ck_path.display()),
        });
    }
    let ck = load_checkpoint(ck_path, &vocab)?;
    manifest.inputs.push(FileDigest::of(ck_path)?);
    let tasks_dir = cfg.inputs.tasks.as_deref().expect("validated");
    require_file(tasks_dir, "task directory")?;
    input_digest(tasks_dir, &mut manifest.inputs)?;
    let tasks = load_task_dir(tasks_dir)?;
    let language = cfg.eval.as_ref().map_or_else(default_language, |e| e.language.clone());
    let report = run_suite(&ck.params, &ck.header.config, &vocab, &tasks, cfg.seed, &language)?;
    create_out_dir(cfg)?;
    let json_path = cfg.out_dir.join(EVAL_JSON);
    std::fs::write(&json_path, report.to_json()).map_err(CliError::io(&json_path))?;
    let table_path = cfg.out_dir.join(EVAL_TABLE);
    std::fs::write(&table_path, report.to_table()).map_err(CliError::io(&table_path))?;
    manifest.outputs.push(FileDigest::relative(&cfg.out_dir, EVAL_JSON)?);
    manifest.outputs.push(FileDigest::relative(&cfg.out_dir, EVAL_TABLE)?);
    manifest.notes.push(format!(
        "average {:.2} over {} tasks",
        report.average,
        report.tasks.len()
    ));
    Ok(())
}

pub const SAMPLES_FILE: &str = "samples.jsonl";

fn anneval_stage(cfg: &PipelineConfig, manifest: &mut RunManifest) -> Result<()> {
    let a = cfg.anneval.as_ref().expect("validated");
    let testset_path = cfg.inputs.testset.as_deref().expect("validated");
    require_file(testset_path, "test set")?;
    manifest.inputs.push(FileDigest::of(testset_path)?);
    let testset = read_testset(testset_path)?;
    let quotas = a
        .quota
        .clone()
        .map_or_else(QuotaMap::default, |entries| QuotaMap { entries });
    let mut samples = stratified_sample(&testset, &quotas, &a.exclude, cfg.seed)?;
    if !a.models.is_empty() {
        let vocab_path = cfg.inputs.vocab.as_deref().expect("validated");
        let vocab = load_vocab(vocab_path)?;
        manifest.inputs.push(FileDigest::of(vocab_path)?);
        for (id, path) in &a.models {
            require_file(path, "checkpoint")?;
            let ck = load_checkpoint(path, &vocab)?;
            manifest.inputs.push(FileDigest::of(path)?);
            let sum = generate_outputs(&mut samples, id, &ck.params, &ck.header.config, &vocab, a.max_new);
            manifest
                .notes
                .push(format!("{id}: {} generated, {} failed", sum.generated, sum.failed));
        }
    }
    create_out_dir(cfg)?;
    SampleStore::new(samples)?.save(cfg.out_dir.join(SAMPLES_FILE))?;
    manifest.outputs.push(FileDigest::relative(&cfg.out_dir, SAMPLES_FILE)?);
    Ok(())
}

fn data_stage(cfg: &PipelineConfig, manifest: &mut RunManifest) -> Result<()> {
    let d = cfg.data.as_ref().expect("validated");
    let input = cfg.inputs.data.as_deref().expect("validated");
    require_file(input, "source data")?;
    manifest.inputs.push(FileDigest::of(input)?);
    let mt = parse_mt(&d.mt)?;
    create_out_dir(cfg)?;
    let name = d.output.clone().unwrap_or_else(|| {
        match d.kind {
            DataKind::Instruct => "instructions.jsonl",
            DataKind::Pref => "preferences.jsonl",
        }
        .to_string()
    });
    let out_path = cfg.out_dir.join(&name);
    let counters = match d.kind {
        DataKind::Instruct => {
            let built = build_instruction_dataset(read_instructions(input)?, mt.as_ref(), &d.src_lang, &d.tgt_lang);
            write_instructions(&out_path, &built.records)?;
            manifest.notes.extend(built.errors);
            built.counters
        }
        DataKind::Pref => {
            let built = build_preference_dataset(read_preferences(input)?, mt.as_ref(), &d.src_lang, &d.tgt_lang);
            write_preferences(&out_path, &built.records)?;
            manifest.notes.extend(built.errors);
            built.counters
        }
    };
    manifest.notes.push(format!(
        "consumed {}, emitted {}, dropped {}",
        counters.consumed,
        counters.emitted,
        counters.dropped()
    ));
    manifest.outputs.push(FileDigest::relative(&cfg.out_dir, &name)?);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<PipelineConfig> {
        PipelineConfig::from_toml(text, Path::new("/work"))
    }

    #[test]
    fn paths_resolve_against_config_dir() {
        let c = parse(
            r#"
            stage = "eval"
            out_dir = "out"
            [inputs]
            vocab = "v.txt"
            checkpoint = "/abs/model.ckpt"
            tasks = "tasks"
            "#,
        )
        .unwrap();
        assert_eq!(c.out_dir, Path::new("/work/out"));
        assert_eq!(c.inputs.vocab.as_deref(), Some(Path::new("/work/v.txt")));
        assert_eq!(c.inputs.checkpoint.as_deref(), Some(Path::new("/abs/model.ckpt")));
    }

    #[test]
    fn schema_errors_name_the_field() {
        let base = r#"
            stage = "sft"
            out_dir = "o"
            [inputs]
            vocab = "v"
            checkpoint = "c"
            data = "d"
        "#;
        let e = parse(&format!("{base}[train]\npeak_lr = \"fast\"\nbatch_tokens = 10\n")).unwrap_err();
        assert!(e.to_string().contains("train.peak_lr"), "{e}");
        assert_eq!(e.exit_code(), 2);
        let e = parse(&format!("{base}[train]\npeak_lr = 1e-4\n")).unwrap_err();
        assert!(e.to_string().contains("batch_tokens"), "{e}");
        let e = parse(&format!(
            "{base}[train]\npeak_lr = 1e-4\nbatch_tokens = 8\nobjective = \"dpo\"\n"
        ))
        .unwrap_err();
        assert!(e.to_string().contains("train.objective"), "{e}");
        let e = parse("stage = \"sft\"\nout_dir = \"o\"\n[inputs]\nvocab = \"v\"\n").unwrap_err();
        assert!(e.to_string().contains("inputs.checkpoint"), "{e}");
        let e = parse("stage = \"bake\"\nout_dir = \"o\"\n").unwrap_err();
        assert!(e.to_string().contains("stage"), "{e}");
        let e = parse("stage = \"eval\"\nout_dir = \"o\"\ncolour = 1\n").unwrap_err();
        assert!(e.to_string().contains("colour"), "{e}");
    }

    #[test]
    fn train_table_takes_stage_and_seed() {
        let c = parse(
            r#"
            stage = "cpt"
            seed = 11
            out_dir = "o"
            [inputs]
            vocab = "v"
            shards = ["a.lrpk"]
            [model]
            n_layers = 1
            n_heads = 2
            d_model = 8
            d_ff = 16
            vocab_size = 263
            max_seq_len = 32
            [train]
            peak_lr = 1e-4
            batch_tokens = 64
            "#,
        )
        .unwrap();
        let t = c.train_config().unwrap();
        assert_eq!((t.objective, t.seed), (Objective::Cpt, 11));
    }
}
