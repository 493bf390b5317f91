use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::databuild::Rendered;
use crate::model::{Checkpoint, ModelConfig, Params};
use crate::packer::PackedSequence;

use super::objectives::{cpt_step, dpo_step, sft_step, PrefExample};
use super::optim::AdamW;
use super::{lr_at, Objective, Result, TrainConfig, TrainError};

/// Training examples for one objective.
#[derive(Debug, Clone)]
pub enum TrainData {
    Cpt(Vec<PackedSequence>),
    Sft(Vec<Rendered>),
    Dpo(Vec<PrefExample>),
}

impl TrainData {
    pub fn objective(&self) -> Objective {
        match self {
            TrainData::Cpt(_) => Objective::Cpt,
            TrainData::Sft(_) => Objective::Sft,
            TrainData::Dpo(_) => Objective::Dpo,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TrainData::Cpt(v) => v.len(),
            TrainData::Sft(v) => v.len(),
            TrainData::Dpo(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Non-pad tokens item `i` puts through the model per step.
    pub fn item_tokens(&self, i: usize) -> usize {
        match self {
            TrainData::Cpt(v) => v[i].real_tokens(),
            TrainData::Sft(v) => v[i].len(),
            TrainData::Dpo(v) => v[i].token_count(),
        }
    }

    pub fn total_tokens(&self) -> u64 {
        (0..self.len()).map(|i| self.item_tokens(i) as u64).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub objective: Objective,
    pub total_steps: u64,
    /// First step run by this invocation minus one (non-zero after resume).
    pub start_step: u64,
    pub tokens_processed: u64,
    pub wall_clock_secs: f64,
    pub device_hours: f64,
    pub final_checkpoint: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    pub summary: TrainSummary,
}

#[derive(Serialize, Deserialize)]
struct SummaryLine {
    summary: TrainSummary,
}

impl TrainReport {
    /// One JSON object per step, then a `{"summary": ...}` line.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        let enc = |e: serde_json::Error| TrainError::Report(e.to_string());
        for s in &self.steps {
            serde_json::to_writer(&mut w, s).map_err(enc)?;
            w.write_all(b"\n")?;
        }
        serde_json::to_writer(
            &mut w,
            &SummaryLine {
                summary: self.summary.clone(),
            },
        )
        .map_err(enc)?;
        w.write_all(b"\n")?;
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut steps = Vec::new();
        let mut summary = None;
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let err = |e: serde_json::Error| TrainError::Report(format!("line {}: {e}", i + 1));
            if line.starts_with("{\"summary\"") {
                summary = Some(serde_json::from_str::<SummaryLine>(&line).map_err(err)?.summary);
            } else {
                steps.push(serde_json::from_str(&line).map_err(err)?);
            }
        }
        let summary = summary.ok_or_else(|| TrainError::Report("missing summary line".into()))?;
        Ok(TrainReport { steps, summary })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_jsonl(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_jsonl(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions<'a> {
    /// Checkpoints go here as `step-NNNNNN.ckpt` and `final.ckpt`.
    pub out_dir: Option<PathBuf>,
    pub resume: Option<&'a Checkpoint>,
    /// Frozen DPO reference; defaults to the policy at the start of the run.
    pub reference: Option<&'a Params>,
    pub vocab_hash: u64,
    /// Stop after this global step (for interrupted runs).
    pub stop_after: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: TrainReport,
    pub params: Params,
    pub optimizer: AdamW,
}

/// Batches for every epoch: each epoch visits the items in a seeded
/// permutation and closes a batch once it holds `batch_tokens` tokens.
pub fn plan_batches(cfg: &TrainConfig, data: &TrainData) -> Vec<Vec<usize>> {
    let mut plan = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64));
        order.shuffle(&mut rng);
        let mut cur = Vec::new();
        let mut tokens = 0;
        for i in order {
            cur.push(i);
            tokens += data.item_tokens(i);
            if tokens >= cfg.batch_tokens {
                plan.push(std::mem::take(&mut cur));
                tokens = 0;
            }
        }
        if !cur.is_empty() {
            plan.push(cur);
        }
    }
    plan
}

fn save_checkpoint(
    dir: &Path,
    file: &str,
    model_cfg: &ModelConfig,
    params: &Params,
    opt: &AdamW,
    opts: &RunOptions,
    step: u64,
    objective: Objective,
) -> Result<String> {
    std::fs::create_dir_all(dir)?;
    let mut ck = Checkpoint::new(
        model_cfg.clone(),
        params.clone(),
        opts.vocab_hash,
        step,
        &objective.to_string(),
    );
    ck.extra = opt.state_tensors(params);
    ck.save(dir.join(file))?;
    Ok(file.to_string())
}

/// Runs the step loop for `cfg.objective` over `data`. With LoRA configured
/// and not yet attached, adapters are attached (seeded by `cfg.seed`)
/// before the first step. Resuming from a checkpoint restores parameters,
/// optimizer moments and the step counter; the learning-rate sequence is a
/// pure function of the step so it continues unchanged.
pub fn run(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    params: Params,
    data: &TrainData,
    opts: RunOptions,
) -> Result<RunOutput> {
    cfg.validate()?;
    if data.objective() != cfg.objective {
        return Err(TrainError::DataMismatch(cfg.objective));
    }
    if data.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let (mut params, mut opt, start) = match opts.resume {
        Some(ck) => {
            let p = ck.params.clone();
            let o = AdamW::from_state(&p, cfg, &ck.extra)?;
            (p, o, ck.header.step)
        }
        None => {
            let mut p = params;
            if let Some(l) = &cfg.lora {
                if !p.has_lora() {
                    p.lora_attach(l, cfg.seed)?;
                }
            }
            let o = AdamW::new(&p, cfg);
            (p, o, 0)
        }
    };
    let owned_reference;
    let reference: Option<&Params> = match (cfg.objective, opts.reference) {
        (Objective::Dpo, Some(r)) => Some(r),
        (Objective::Dpo, None) if opts.resume.is_some() => {
            return Err(TrainError::Config(
                "resuming DPO needs the original reference parameters".into(),
            ));
        }
        (Objective::Dpo, None) => {
            owned_reference = params.clone();
            Some(&owned_reference)
        }
        _ => None,
    };

    let plan = plan_batches(cfg, data);
    let total = plan.len() as u64;
    if start > total {
        return Err(TrainError::Config(format!(
            "checkpoint step {start} is past the planned {total} steps"
        )));
    }
    let end = opts.stop_after.map_or(total, |s| s.min(total));
    let clock = Instant::now();
    let mut steps = Vec::new();
    let mut tokens_processed = 0;
    let mut final_checkpoint = None;

    for step in start + 1..=end {
        let idx = &plan[(step - 1) as usize];
        let lr = lr_at(step, total, cfg)?;
        let loss = match data {
            TrainData::Cpt(items) => {
                let batch: Vec<PackedSequence> = idx.iter().map(|&i| items[i].clone()).collect();
                cpt_step(&mut params, &mut opt, model_cfg, &batch, lr, (cfg.seed, step))?
            }
            TrainData::Sft(items) => {
                let batch: Vec<Rendered> = idx.iter().map(|&i| items[i].clone()).collect();
                sft_step(&mut params, &mut opt, model_cfg, &batch, lr, (cfg.seed, step))?
            }
            TrainData::Dpo(items) => {
                let batch: Vec<PrefExample> = idx.iter().map(|&i| items[i].clone()).collect();
                let r = reference.expect("dpo has a reference");
                dpo_step(&mut params, r, &mut opt, model_cfg, &batch, cfg.dpo_beta, lr)?.loss
            }
        };
        if !loss.is_finite() {
            return Err(TrainError::NonFinite { step });
        }
        let tokens: u64 = idx.iter().map(|&i| data.item_tokens(i) as u64).sum();
        tokens_processed += tokens;
        steps.push(StepRecord { step, lr, loss, tokens });
        log::debug!("step {step}/{total} lr {lr:.3e} loss {loss:.4}");

        if let Some(dir) = &opts.out_dir {
            if step == total {
                final_checkpoint = Some(save_checkpoint(
                    dir,
                    "final.ckpt",
                    model_cfg,
                    &params,
                    &opt,
                    &opts,
                    step,
                    cfg.objective,
                )?);
            } else if cfg.checkpoint_every.is_some_and(|k| step % k == 0) || step == end {
                final_checkpoint = Some(save_checkpoint(
                    dir,
                    &format!("step-{step:06}.ckpt"),
                    model_cfg,
                    &params,
                    &opt,
                    &opts,
                    step,
                    cfg.objective,
                )?);
            }
        }
    }

    let wall = clock.elapsed().as_secs_f64();
    Ok(RunOutput {
        report: TrainReport {
            steps,
            summary: TrainSummary {
                objective: cfg.objective,
                total_steps: total,
                start_step: start,
                tokens_processed,
                wall_clock_secs: wall,
                device_hours: wall / 3600.0,
                final_checkpoint,
            },
        },
        params,
        optimizer: opt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Document;
    use crate::packer::{pack, FinalPolicy};
    use crate::tokenizer::Vocab;

    fn fixture() -> (Vocab, ModelConfig, Vec<PackedSequence>) {
        let v = Vocab::bytes_only();
        let docs = (0..12).map(|i| {
            Document::new(
                format!("d{i}"),
                format!("dokumentu zenbakia {i} hemen dago"),
                if i % 4 == 0 { "en" } else { "eu" },
            )
            .unwrap()
        });
        let seqs: Vec<_> = pack(docs, &v, 24, FinalPolicy::Pad).unwrap().collect();
        let mut cfg = ModelConfig::tiny(v.size());
        cfg.n_layers = 1;
        (v, cfg, seqs)
    }

    fn tcfg() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            checkpoint_every: Some(2),
            ..TrainConfig::new(Objective::Cpt, 1e-3, 60)
        }
    }

    #[test]
    fn tokens_processed_counts_every_epoch() {
        let (_, cfg, seqs) = fixture();
        let data = TrainData::Cpt(seqs);
        let out = run(&tcfg(), &cfg, Params::init(&cfg).unwrap(), &data, RunOptions::default()).unwrap();
        assert_eq!(out.report.summary.tokens_processed, 3 * data.total_tokens());
        assert_eq!(
            out.report.steps.iter().map(|s| s.tokens).sum::<u64>(),
            out.report.summary.tokens_processed
        );
        assert!(out.report.steps.windows(2).all(|w| w[1].step == w[0].step + 1));
    }

    #[test]
    fn resume_continues_schedule_and_report_round_trips() {
        let (v, cfg, seqs) = fixture();
        let data = TrainData::Cpt(seqs);
        let dir = tempfile::tempdir().unwrap();
        let tc = tcfg();
        let full = run(&tc, &cfg, Params::init(&cfg).unwrap(), &data, RunOptions::default()).unwrap();
        let first = run(
            &tc,
            &cfg,
            Params::init(&cfg).unwrap(),
            &data,
            RunOptions {
                out_dir: Some(dir.path().to_path_buf()),
                vocab_hash: v.hash(),
                stop_after: Some(3),
                ..Default::default()
            },
        )
        .unwrap();
        let ck_name = first.report.summary.final_checkpoint.clone().unwrap();
        assert_eq!(ck_name, "step-000003.ckpt");
        let ck = Checkpoint::load(dir.path().join(&ck_name)).unwrap();
        assert_eq!(ck.header.step, 3);
        assert_eq!(ck.header.stage, "cpt");
        let rest = run(
            &tc,
            &cfg,
            Params::init(&cfg).unwrap(),
            &data,
            RunOptions {
                resume: Some(&ck),
                ..Default::default()
            },
        )
        .unwrap();
        let lrs = |r: &TrainReport| r.steps.iter().map(|s| (s.step, s.lr)).collect::<Vec<_>>();
        let mut joined = lrs(&first.report);
        joined.extend(lrs(&rest.report));
        assert_eq!(joined, lrs(&full.report));

        let mut buf = Vec::new();
        full.report.write_jsonl(&mut buf).unwrap();
        let back = TrainReport::read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back, full.report);
    }

    #[test]
    fn same_seed_same_losses() {
        let (_, cfg, seqs) = fixture();
        let data = TrainData::Cpt(seqs);
        let a = run(&tcfg(), &cfg, Params::init(&cfg).unwrap(), &data, RunOptions::default()).unwrap();
        let b = run(&tcfg(), &cfg, Params::init(&cfg).unwrap(), &data, RunOptions::default()).unwrap();
        let la: Vec<f64> = a.report.steps.iter().map(|s| s.loss).collect();
        let lb: Vec<f64> = b.report.steps.iter().map(|s| s.loss).collect();
        assert_eq!(la, lb);
    }

    #[test]
    fn mismatched_data_rejected() {
        let (_, cfg, seqs) = fixture();
        let tc = TrainConfig::new(Objective::Sft, 1e-3, 10);
        let r = run(
            &tc,
            &cfg,
            Params::init(&cfg).unwrap(),
            &TrainData::Cpt(seqs),
            RunOptions::default(),
        );
        assert!(matches!(r, Err(TrainError::DataMismatch(Objective::Sft))));
    }
}
