//! Loading helpers shared by the pipeline stages and the direct subcommands.

use std::path::Path;

use lowres_annesrv::{sample_from_record, EvalSample};
use lowres_core::databuild::{DictionaryMt, HttpMt, IdentityMt, InstructionRecord, MtClient};
use lowres_core::model::Checkpoint;
use lowres_core::tokenizer::Vocab;

use crate::error::{CliError, Result};

pub fn load_vocab(path: &Path) -> Result<Vocab> {
    if !path.exists() {
        return Err(CliError::Data(format!("vocab file {} does not exist", path.display())));
    }
    Ok(Vocab::load(path)?)
}

/// Loads a checkpoint and checks it was trained with `vocab`.
pub fn load_checkpoint(path: &Path, vocab: &Vocab) -> Result<Checkpoint> {
    let ck = Checkpoint::load(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    if ck.header.vocab_hash != vocab.hash() {
        return Err(CliError::Data(format!(
            "{} was trained with vocab {:016x}, the supplied vocab is {:016x}",
            path.display(),
            ck.header.vocab_hash,
            vocab.hash()
        )));
    }
    if ck.header.config.vocab_size != vocab.size() {
        return Err(CliError::Data(format!(
            "{} has vocab_size {}, the vocab has {} ids",
            path.display(),
            ck.header.config.vocab_size,
            vocab.size()
        )));
    }
    Ok(ck)
}

/// `identity`, `dict:<file>` or `http:<url>`.
pub fn parse_mt(spec: &str) -> Result<Box<dyn MtClient>> {
    if spec == "identity" {
        return Ok(Box::new(IdentityMt));
    }
    if let Some(file) = spec.strip_prefix("dict:") {
        return Ok(Box::new(DictionaryMt::load(file)?));
    }
    if let Some(rest) = spec.strip_prefix("http:") {
        let url = if rest.starts_with("//") {
            spec.to_string()
        } else {
            rest.to_string()
        };
        return Ok(Box::new(
            HttpMt::new(&url).map_err(|e| CliError::Config(e.to_string()))?,
        ));
    }
    Err(CliError::Config(format!(
        "unknown MT spec `{spec}` (expected identity, dict:<file> or http:<url>)"
    )))
}

/// Reads a test set in either the sample-store layout (`id`, `category`,
/// `prompt`, ...) or the chat-record layout (`messages`, `category`), one
/// object per line. Chat records get ids `test-NNNNN`.
pub fn read_testset(path: &Path) -> Result<Vec<EvalSample>> {
    let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value =
            serde_json::from_str(line).map_err(|e| CliError::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        let sample = if v.get("messages").is_some() {
            let rec: InstructionRecord =
                serde_json::from_value(v).map_err(|e| CliError::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
            sample_from_record(format!("test-{i:05}"), &rec)?
        } else {
            let s: EvalSample =
                serde_json::from_value(v).map_err(|e| CliError::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
            s.validate()?;
            s
        };
        out.push(sample);
    }
    Ok(out)
}
