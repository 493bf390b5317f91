//! Command-line surface. Stage commands (`cpt`, `sft`, `dpo`, `eval`,
//! `anneval`, `data`, `run`) take a pipeline config; the module commands
//! expose each building block directly.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use lowres_annesrv::{
    aggregate_with, generate_outputs, per_annotator, stratified_sample, JudgmentStore, Mode, Quota, QuotaMap,
    SampleStore, ServerConfig,
};
use lowres_core::corpus::{
    corpus_stats_par, ingest, mix_stream, write_jsonl, CorpusManifest, Format, JsonlSource, MixSpec,
};
use lowres_core::databuild::{
    build_instruction_dataset, build_preference_dataset, dataset_stats, read_instructions, read_preferences,
    render_chat, write_instructions, write_preferences, DatasetManifest,
};
use lowres_core::evalharness::{gap_report, load_task_dir, run_suite, SuiteReport};
use lowres_core::model::{greedy_generate, Checkpoint, LoraConfig, ModelConfig, Params, Projection};
use lowres_core::packer::{pack, packing_efficiency, save_shard, FinalPolicy};
use lowres_core::synth;
use lowres_core::tokenizer::{train_bpe, Special, TokenId, Vocab};
use lowres_core::trainer::{
    cpt_loss_grad, dpo_loss_grad, estimate_emissions, grad_check, sft_loss_grad, PrefExample, FITTED_KG_PER_DEVICE_HOUR,
};

use crate::common::{load_checkpoint, load_vocab, parse_mt, read_testset};
use crate::error::{CliError, Result};
use crate::pipeline::{run_stage, Inputs, PipelineConfig, Stage, StageOutcome};

#[derive(Debug, Parser)]
#[command(
    name = "lowres-adapt",
    version,
    about = "Adapt a language model to a low-resource language"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct StageArgs {
    /// Pipeline config (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Accept an input checkpoint from any stage.
    #[arg(long)]
    pub allow_out_of_order: bool,
}

#[derive(Debug, Args)]
pub struct OptionalStageArgs {
    /// Pipeline config (TOML); runs the whole stage.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub allow_out_of_order: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Continual pre-training stage.
    Cpt(StageArgs),
    /// Instruction-tuning stage.
    Sft(StageArgs),
    /// Preference-alignment stage.
    Dpo(StageArgs),
    /// Whatever stage the config names.
    Run(StageArgs),
    /// Benchmark evaluation.
    #[command(args_conflicts_with_subcommands = true)]
    Eval {
        #[command(flatten)]
        stage: OptionalStageArgs,
        #[command(subcommand)]
        cmd: Option<EvalCmd>,
    },
    /// Human evaluation: sampling, generation, annotation server, reports.
    #[command(args_conflicts_with_subcommands = true)]
    Anneval {
        #[command(flatten)]
        stage: OptionalStageArgs,
        #[command(subcommand)]
        cmd: Option<AnnevalCmd>,
    },
    /// Build translated instruction and preference datasets.
    #[command(args_conflicts_with_subcommands = true)]
    Data {
        #[command(flatten)]
        stage: OptionalStageArgs,
        #[command(subcommand)]
        cmd: Option<DataCmd>,
    },
    /// Corpus statistics and mixing.
    #[command(subcommand)]
    Corpus(CorpusCmd),
    /// Tokenizer training, encoding and decoding.
    #[command(subcommand)]
    Tok(TokCmd),
    /// Tokenize documents and pack them into a shard.
    Pack(PackArgs),
    /// Model initialisation and generation.
    #[command(subcommand)]
    Model(ModelCmd),
    /// Single-objective training runs and numerical checks.
    #[command(subcommand)]
    Train(TrainCmd),
}

#[derive(Debug, Subcommand)]
pub enum CorpusCmd {
    /// Document, word and token counts.
    Stats {
        /// A jsonl file, a directory of .txt files, or a manifest (.toml).
        path: PathBuf,
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Language of a .txt directory.
        #[arg(long, default_value = "eu")]
        lang: String,
    },
    /// Draw documents from a weighted mixture.
    Mix {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum TokCmd {
    /// Learn BPE merges from document jsonl files.
    Train {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Text (argument or stdin) to space-separated ids.
    Encode {
        #[arg(long)]
        vocab: PathBuf,
        text: Option<String>,
    },
    /// Space-separated ids (argument or stdin) to text.
    Decode {
        #[arg(long)]
        vocab: PathBuf,
        ids: Option<String>,
    },
}

#[derive(Debug, Args)]
pub struct PackArgs {
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long = "input", required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub seq_len: usize,
    #[arg(long, default_value = "pad")]
    pub policy: FinalPolicy,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum ModelCmd {
    /// Write a freshly initialised checkpoint.
    Init {
        /// ModelConfig TOML; `vocab_size` defaults to the vocab's size.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Greedy continuation of a prompt.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 64)]
        max_new: usize,
        /// Greedy decoding (the only strategy).
        #[arg(long, default_value_t = true)]
        greedy: bool,
    },
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TrainConfig TOML.
    #[arg(long)]
    pub config: PathBuf,
    /// Shards (cpt) or a jsonl file (sft, dpo).
    #[arg(long, required = true)]
    pub data: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Checkpoint to start from.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// ModelConfig TOML for a fresh cpt run.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub allow_out_of_order: bool,
}

#[derive(Debug, Subcommand)]
pub enum TrainCmd {
    /// Next-token training on packed shards.
    Cpt(TrainArgs),
    /// Instruction tuning on chat jsonl.
    Sft(TrainArgs),
    /// Preference optimisation against a frozen reference.
    Dpo(TrainArgs),
    /// Finite-difference check of all three objectives on a tiny model.
    Gradcheck {
        #[arg(long, default_value_t = 48)]
        coords: usize,
        #[arg(long, default_value_t = 1e-4)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 3)]
        seed: u64,
    },
    /// kg CO2eq for a number of device-hours.
    Emissions {
        #[arg(long)]
        hours: f64,
        #[arg(long, default_value_t = FITTED_KG_PER_DEVICE_HOUR)]
        factor: f64,
    },
}

#[derive(Debug, Subcommand)]
pub enum DataCmd {
    /// Translate an instruction dataset.
    BuildInstruct(BuildArgs),
    /// Translate a preference dataset.
    BuildPref(BuildArgs),
    /// Record count and average words; accepts jsonl or a manifest (.toml).
    Stats { path: PathBuf },
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// identity, dict:<file> or http:<url>.
    #[arg(long, default_value = "identity")]
    pub mt: String,
    #[arg(long, default_value = "en")]
    pub src_lang: String,
    #[arg(long, default_value = "eu")]
    pub tgt_lang: String,
}

#[derive(Debug, Subcommand)]
pub enum EvalCmd {
    /// Few-shot accuracy on a directory of task files.
    Run {
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "eu")]
        language: String,
        /// Also write the report as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Difference of averages, b − a.
    Gap {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Single,
    Majority,
    PerAnnotator,
}

#[derive(Debug, Subcommand)]
pub enum AnnevalCmd {
    /// Stratified sample of a test set.
    Sample {
        #[arg(long)]
        testset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// TOML with `[[quota]]` tables replacing the default quotas.
        #[arg(long)]
        quotas: Option<PathBuf>,
    },
    /// Add one model's greedy outputs to a sample file.
    Generate {
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        model_id: String,
        #[arg(long, default_value_t = 256)]
        max_new: usize,
        /// Defaults to rewriting `--samples`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Annotation HTTP server.
    Serve {
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        judgments: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
        /// Directory of UI files served at `/`.
        #[arg(long)]
        static_dir: Option<PathBuf>,
    },
    /// Win/tie/loss percentages from collected judgments.
    Report {
        #[arg(long)]
        judgments: PathBuf,
        #[arg(long)]
        model: String,
        #[arg(long, value_enum, default_value_t = ModeArg::Single)]
        mode: ModeArg,
        #[arg(long)]
        annotator: Option<String>,
    },
}

/// Runs a parsed command, writing human output to `out`.
pub fn execute(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Cpt(a) => stage_command(Some(Stage::Cpt), a.config, a.allow_out_of_order, out),
        Command::Sft(a) => stage_command(Some(Stage::Sft), a.config, a.allow_out_of_order, out),
        Command::Dpo(a) => stage_command(Some(Stage::Dpo), a.config, a.allow_out_of_order, out),
        Command::Run(a) => stage_command(None, a.config, a.allow_out_of_order, out),
        Command::Eval { stage, cmd } => match cmd {
            Some(c) => eval_cmd(c, out),
            None => optional_stage(Stage::Eval, stage, out),
        },
        Command::Anneval { stage, cmd } => match cmd {
            Some(c) => anneval_cmd(c, out),
            None => optional_stage(Stage::Anneval, stage, out),
        },
        Command::Data { stage, cmd } => match cmd {
            Some(c) => data_cmd(c, out),
            None => optional_stage(Stage::Data, stage, out),
        },
        Command::Corpus(c) => corpus_cmd(c, out),
        Command::Tok(c) => tok_cmd(c, out),
        Command::Pack(a) => pack_cmd(a, out),
        Command::Model(c) => model_cmd(c, out),
        Command::Train(c) => train_cmd(c, out),
    }
}

fn optional_stage(stage: Stage, args: OptionalStageArgs, out: &mut dyn Write) -> Result<()> {
    let config = args
        .config
        .ok_or_else(|| CliError::Config(format!("`{stage}` needs --config or a subcommand")))?;
    stage_command(Some(stage), config, args.allow_out_of_order, out)
}

fn stage_command(expected: Option<Stage>, config: PathBuf, allow: bool, out: &mut dyn Write) -> Result<()> {
    let mut cfg = PipelineConfig::load(&config)?;
    if let Some(s) = expected {
        if cfg.stage != s {
            return Err(CliError::Config(format!(
                "stage: config is for `{}`, invoked as `{s}`",
                cfg.stage
            )));
        }
    }
    cfg.allow_out_of_order |= allow;
    let outcome = run_stage(&cfg, Some(&config))?;
    report_outcome(&outcome, out)
}

fn report_outcome(o: &StageOutcome, out: &mut dyn Write) -> Result<()> {
    let w = |e| CliError::io("<stdout>")(e);
    writeln!(out, "{} stage finished in {:.1}s", o.stage, o.manifest.wall_clock_secs).map_err(w)?;
    for d in &o.manifest.outputs {
        writeln!(out, "  {}  {}", d.sha256, o.out_dir.join(&d.path).display()).map_err(w)?;
    }
    for n in &o.manifest.notes {
        writeln!(out, "  note: {n}").map_err(w)?;
    }
    writeln!(out, "manifest: {}", o.manifest_path.display()).map_err(w)?;
    Ok(())
}

fn emit(out: &mut dyn Write, text: impl AsRef<str>) -> Result<()> {
    writeln!(out, "{}", text.as_ref()).map_err(CliError::io("<stdout>"))
}

fn json_line<T: serde::Serialize>(out: &mut dyn Write, v: &T) -> Result<()> {
    emit(out, serde_json::to_string_pretty(v)?)
}

fn read_arg_or_stdin(arg: Option<String>) -> Result<String> {
    match arg {
        Some(s) => Ok(s),
        None => {
            let mut s = String::new();
            std::io::stdin()
                .read_to_string(&mut s)
                .map_err(CliError::io("<stdin>"))?;
            Ok(s)
        }
    }
}

fn corpus_cmd(c: CorpusCmd, out: &mut dyn Write) -> Result<()> {
    match c {
        CorpusCmd::Stats { path, vocab, lang } => {
            if path.extension().is_some_and(|e| e == "toml") {
                let m = CorpusManifest::load(&path)?;
                let s = m.totals_as_stats();
                json_line(out, &s)?;
                return emit(
                    out,
                    format!(
                        "{}: {} entries, {:.2}M tokens",
                        m.name,
                        m.entries.len(),
                        m.entry_tokens_millions()
                    ),
                );
            }
            let vocab = vocab.as_deref().map(load_vocab).transpose()?;
            let format = if path.is_dir() {
                Format::PlainDir { language: lang }
            } else {
                Format::Jsonl
            };
            let (docs, errors) = ingest(&path, &format)?.collect_valid();
            for e in &errors {
                log::warn!("{}:{}: {}", path.display(), e.line, e.msg);
            }
            json_line(out, &corpus_stats_par(&docs, vocab.as_ref()))?;
            if !errors.is_empty() {
                emit(out, format!("{} malformed records skipped", errors.len()))?;
            }
            Ok(())
        }
        CorpusCmd::Mix { spec, n, out: dest } => {
            let text = std::fs::read_to_string(&spec).map_err(CliError::io(&spec))?;
            let mix = MixSpec::from_toml(&text)?;
            let base = spec.parent().unwrap_or(Path::new("."));
            let mut corpora = BTreeMap::new();
            for c in &mix.components {
                let p = c.path.as_ref().ok_or_else(|| {
                    CliError::Config(format!(
                        "component `{}`: path is required on the command line",
                        c.corpus_id
                    ))
                })?;
                corpora.insert(c.corpus_id.clone(), JsonlSource(base.join(p)));
            }
            let docs = mix_stream(&mix, &corpora)?.take_docs(n)?;
            write_jsonl(&dest, &docs).map_err(CliError::io(&dest))?;
            let mut by_lang: BTreeMap<&str, usize> = BTreeMap::new();
            for d in &docs {
                *by_lang.entry(&d.language).or_default() += 1;
            }
            for (l, k) in by_lang {
                emit(out, format!("{l}\t{k}\t{:.2}%", 100.0 * k as f64 / n.max(1) as f64))?;
            }
            Ok(())
        }
    }
}

fn tok_cmd(c: TokCmd, out: &mut dyn Write) -> Result<()> {
    match c {
        TokCmd::Train {
            inputs,
            size,
            out: dest,
        } => {
            let mut texts = Vec::new();
            for p in &inputs {
                let (docs, errors) = ingest(p, &Format::Jsonl)?.collect_valid();
                if !errors.is_empty() {
                    log::warn!("{}: {} malformed records skipped", p.display(), errors.len());
                }
                texts.extend(docs.into_iter().map(|d| d.text));
            }
            let t = train_bpe(&texts, size)?;
            t.vocab.save(&dest)?;
            if !t.reached_target {
                log::warn!("corpus exhausted at {} ids (target {size})", t.vocab.size());
            }
            emit(out, format!("{} ids, hash {:016x}", t.vocab.size(), t.vocab.hash()))
        }
        TokCmd::Encode { vocab, text } => {
            let v = load_vocab(&vocab)?;
            let ids = v.encode(&read_arg_or_stdin(text)?);
            emit(out, ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" "))
        }
        TokCmd::Decode { vocab, ids } => {
            let v = load_vocab(&vocab)?;
            let ids = read_arg_or_stdin(ids)?
                .split_whitespace()
                .map(|s| {
                    s.parse::<TokenId>()
                        .map_err(|e| CliError::Data(format!("token id `{s}`: {e}")))
                })
                .collect::<Result<Vec<_>>>()?;
            emit(out, v.decode(&ids)?)
        }
    }
}

fn pack_cmd(a: PackArgs, out: &mut dyn Write) -> Result<()> {
    let v = load_vocab(&a.vocab)?;
    let mut docs = Vec::new();
    for p in &a.inputs {
        let (d, errors) = ingest(p, &Format::Jsonl)?.collect_valid();
        if !errors.is_empty() {
            log::warn!("{}: {} malformed records skipped", p.display(), errors.len());
        }
        docs.extend(d);
    }
    let seqs: Vec<_> = pack(docs, &v, a.seq_len, a.policy)?.collect();
    save_shard(&a.out, a.seq_len, &v, &seqs)?;
    emit(
        out,
        format!(
            "{} sequences of {} tokens, efficiency {:.4}",
            seqs.len(),
            a.seq_len,
            packing_efficiency(&seqs)
        ),
    )
}

fn model_cmd(c: ModelCmd, out: &mut dyn Write) -> Result<()> {
    match c {
        ModelCmd::Init {
            config,
            vocab,
            out: dest,
        } => {
            let v = load_vocab(&vocab)?;
            let text = std::fs::read_to_string(&config).map_err(CliError::io(&config))?;
            let mut table: toml::Table = toml::from_str(&text).map_err(|e| CliError::Config(e.to_string()))?;
            table
                .entry("vocab_size")
                .or_insert(toml::Value::Integer(v.size() as i64));
            let cfg: ModelConfig = serde_path_to_error::deserialize(toml::Value::Table(table))
                .map_err(|e| CliError::Config(format!("{}: {}", e.path(), e.inner())))?;
            if cfg.vocab_size != v.size() {
                return Err(CliError::Config(format!(
                    "vocab_size: {} does not match the vocab's {} ids",
                    cfg.vocab_size,
                    v.size()
                )));
            }
            let p = Params::init(&cfg)?;
            let n = p.count(false);
            Checkpoint::new(cfg, p, v.hash(), 0, "init").save(&dest)?;
            emit(out, format!("{n} parameters written to {}", dest.display()))
        }
        ModelCmd::Generate {
            ckpt,
            vocab,
            prompt,
            max_new,
            greedy: _,
        } => {
            let v = load_vocab(&vocab)?;
            let ck = load_checkpoint(&ckpt, &v)?;
            let stop = [v.special(Special::Eos), v.special(Special::RoleUser)];
            emit(
                out,
                greedy_generate(&ck.params, &ck.header.config, &v, &prompt, max_new, &stop)?,
            )
        }
    }
}

fn train_cmd(c: TrainCmd, out: &mut dyn Write) -> Result<()> {
    let (stage, a) = match c {
        TrainCmd::Cpt(a) => (Stage::Cpt, a),
        TrainCmd::Sft(a) => (Stage::Sft, a),
        TrainCmd::Dpo(a) => (Stage::Dpo, a),
        TrainCmd::Gradcheck { coords, eps, tol, seed } => return gradcheck(coords, eps, tol, seed, out),
        TrainCmd::Emissions { hours, factor } => {
            return emit(out, format!("{:.2}", estimate_emissions(hours, factor)?));
        }
    };
    let text = std::fs::read_to_string(&a.config).map_err(CliError::io(&a.config))?;
    let train: toml::Table = toml::from_str(&text).map_err(|e| CliError::Config(e.to_string()))?;
    let seed = train.get("seed").and_then(|v| v.as_integer()).unwrap_or(0) as u64;
    let model = a
        .model
        .as_deref()
        .map(|p| -> Result<ModelConfig> {
            let t = std::fs::read_to_string(p).map_err(CliError::io(p))?;
            toml::from_str(&t).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))
        })
        .transpose()?;
    let (shards, data) = if stage == Stage::Cpt {
        (a.data, None)
    } else {
        if a.data.len() != 1 {
            return Err(CliError::Config(format!(
                "--data: {stage} takes exactly one jsonl file"
            )));
        }
        (Vec::new(), a.data.into_iter().next())
    };
    let cfg = PipelineConfig {
        stage,
        seed,
        out_dir: a.out,
        inputs: Inputs {
            vocab: Some(a.vocab),
            checkpoint: a.init,
            shards,
            data,
            resume: a.resume,
            ..Default::default()
        },
        model,
        train: Some(train),
        eval: None,
        anneval: None,
        data: None,
        allow_out_of_order: a.allow_out_of_order,
    };
    let outcome = run_stage(&cfg, Some(&a.config))?;
    report_outcome(&outcome, out)
}

fn gradcheck(coords: usize, eps: f64, tol: f64, seed: u64, out: &mut dyn Write) -> Result<()> {
    let v = Vocab::bytes_only();
    let cfg = ModelConfig::tiny(v.size());
    let p = Params::init(&cfg)?;
    let seqs: Vec<_> = pack(synth::documents(12, 0.8, 5), &v, 24, FinalPolicy::Pad)?
        .take(3)
        .collect();
    let rendered = synth::instructions(2, 4, 2)
        .iter()
        .map(|r| render_chat(r, &v, cfg.max_seq_len))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let prefs = synth::preferences(2, 4)
        .iter()
        .map(|t| PrefExample::encode(t, &v))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let mut lora_p = p.clone();
    lora_p.lora_attach(
        &LoraConfig {
            rank: 4,
            alpha: 8.0,
            dropout_p: 0.1,
            targets: [Projection::Query, Projection::Value, Projection::Down].into(),
        },
        seed,
    )?;
    // Non-zero B so gradients reach A.
    for (name, t) in lora_p.tensors_mut() {
        if name.ends_with("lora_b") {
            for (i, x) in t.iter_mut().enumerate() {
                *x = ((i * 7919 % 13) as f64 - 6.0) * 0.01;
            }
        }
    }
    let mut policy = p.clone();
    policy.head.mapv_inplace(|x| x * 3.0);

    let checks = [
        (
            "cpt",
            grad_check(&p, |q| cpt_loss_grad(q, &cfg, &seqs, Some((1, 1))), coords, eps, seed)?,
        ),
        (
            "sft",
            grad_check(
                &p,
                |q| sft_loss_grad(q, &cfg, &rendered, Some((1, 1))),
                coords,
                eps,
                seed,
            )?,
        ),
        (
            "sft+lora",
            grad_check(
                &lora_p,
                |q| sft_loss_grad(q, &cfg, &rendered, Some((1, 1))),
                coords,
                eps,
                seed,
            )?,
        ),
        (
            "dpo",
            grad_check(
                &policy,
                |q| dpo_loss_grad(q, &p, &cfg, &prefs, 0.1).map(|(o, g)| (o.loss, g)),
                coords,
                eps,
                seed,
            )?,
        ),
    ];
    let mut worst: f64 = 0.0;
    for (name, r) in &checks {
        emit(
            out,
            format!("{name:<9} max rel err {:.3e} over {} coords", r.max_rel_err, r.coords),
        )?;
        worst = worst.max(r.max_rel_err);
    }
    if worst < tol {
        Ok(())
    } else {
        Err(CliError::Numerical(format!(
            "gradient check failed: {worst:.3e} >= {tol:.0e}"
        )))
    }
}

fn build(kind: &str, a: BuildArgs, out: &mut dyn Write) -> Result<()> {
    let mt = parse_mt(&a.mt)?;
    let (counters, errors) = if kind == "instruct" {
        let b = build_instruction_dataset(read_instructions(&a.input)?, mt.as_ref(), &a.src_lang, &a.tgt_lang);
        write_instructions(&a.out, &b.records)?;
        (b.counters, b.errors)
    } else {
        let b = build_preference_dataset(read_preferences(&a.input)?, mt.as_ref(), &a.src_lang, &a.tgt_lang);
        write_preferences(&a.out, &b.records)?;
        (b.counters, b.errors)
    };
    for e in &errors {
        log::warn!("{e}");
    }
    json_line(out, &counters)
}

fn data_cmd(c: DataCmd, out: &mut dyn Write) -> Result<()> {
    match c {
        DataCmd::BuildInstruct(a) => build("instruct", a, out),
        DataCmd::BuildPref(a) => build("pref", a, out),
        DataCmd::Stats { path } => {
            let stats = if path.extension().is_some_and(|e| e == "toml") {
                DatasetManifest::load(&path)?.stats()
            } else {
                dataset_stats(&read_instructions(&path)?)
            };
            emit(out, stats.to_string())
        }
    }
}

fn eval_cmd(c: EvalCmd, out: &mut dyn Write) -> Result<()> {
    match c {
        EvalCmd::Run {
            tasks,
            ckpt,
            vocab,
            seed,
            language,
            out: dest,
        } => {
            let v = load_vocab(&vocab)?;
            let ck = load_checkpoint(&ckpt, &v)?;
            let tasks = load_task_dir(&tasks)?;
            let report = run_suite(&ck.params, &ck.header.config, &v, &tasks, seed, &language)?;
            if let Some(d) = dest {
                std::fs::write(&d, report.to_json()).map_err(CliError::io(&d))?;
            }
            emit(out, report.to_table())
        }
        EvalCmd::Gap { a, b } => {
            let load = |p: &Path| -> Result<SuiteReport> {
                let t = std::fs::read_to_string(p).map_err(CliError::io(p))?;
                Ok(SuiteReport::from_json(&t)?)
            };
            let (ra, rb) = (load(&a)?, load(&b)?);
            let gap = gap_report(&ra, &rb)?;
            emit(
                out,
                format!(
                    "{} {:.2} -> {} {:.2}: {gap:+.2}",
                    ra.language, ra.average, rb.language, rb.average
                ),
            )
        }
    }
}

#[derive(serde::Deserialize)]
struct QuotaFile {
    quota: Vec<Quota>,
}

fn anneval_cmd(c: AnnevalCmd, out: &mut dyn Write) -> Result<()> {
    match c {
        AnnevalCmd::Sample {
            testset,
            out: dest,
            seed,
            quotas,
        } => {
            let quotas = match quotas {
                Some(p) => {
                    let t = std::fs::read_to_string(&p).map_err(CliError::io(&p))?;
                    let f: QuotaFile =
                        toml::from_str(&t).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                    QuotaMap { entries: f.quota }
                }
                None => QuotaMap::default(),
            };
            let samples = stratified_sample(
                &read_testset(&testset)?,
                &quotas,
                &lowres_annesrv::default_exclude(),
                seed,
            )?;
            let n = samples.len();
            SampleStore::new(samples)?.save(&dest)?;
            emit(out, format!("{n} samples written to {}", dest.display()))
        }
        AnnevalCmd::Generate {
            samples,
            ckpt,
            vocab,
            model_id,
            max_new,
            out: dest,
        } => {
            let v = load_vocab(&vocab)?;
            let ck = load_checkpoint(&ckpt, &v)?;
            let mut s = SampleStore::load(&samples)?.into_samples();
            let sum = generate_outputs(&mut s, &model_id, &ck.params, &ck.header.config, &v, max_new);
            SampleStore::new(s)?.save(dest.as_ref().unwrap_or(&samples))?;
            emit(
                out,
                format!("{model_id}: {} generated, {} failed", sum.generated, sum.failed),
            )
        }
        AnnevalCmd::Serve {
            samples,
            judgments,
            port,
            host,
            static_dir,
        } => {
            let cfg = ServerConfig {
                samples,
                judgments,
                static_dir,
                addr: SocketAddr::new(host, port),
            };
            let rt = tokio::runtime::Runtime::new().map_err(CliError::io("<runtime>"))?;
            Ok(rt.block_on(lowres_annesrv::serve(cfg))?)
        }
        AnnevalCmd::Report {
            judgments,
            model,
            mode,
            annotator,
        } => {
            let log = JudgmentStore::load(&judgments)?;
            match (mode, annotator) {
                (ModeArg::PerAnnotator, _) => {
                    for (a, p) in per_annotator(&log, &model)? {
                        emit(out, format!("{a}\t{p}"))?;
                    }
                    Ok(())
                }
                (ModeArg::Majority, _) => emit(out, aggregate_with(&log, &model, &Mode::Majority)?.to_string()),
                (ModeArg::Single, Some(a)) => emit(out, aggregate_with(&log, &model, &Mode::Annotator(a))?.to_string()),
                (ModeArg::Single, None) => emit(out, aggregate_with(&log, &model, &Mode::Single)?.to_string()),
            }
        }
    }
}
