use ndarray::{Array1, ArrayView1};

use super::forward::{forward, Mode};
use super::params::Params;
use super::{ModelConfig, ModelError, Result};
use crate::tokenizer::{Special, TokenId, Vocab};

pub fn softmax_row(row: ArrayView1<f64>) -> Array1<f64> {
    log_softmax_row(row).mapv(f64::exp)
}

pub fn log_softmax_row(row: ArrayView1<f64>) -> Array1<f64> {
    let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = m + row.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
    row.mapv(|z| z - lse)
}

/// Sum of `log p(continuation[i] | context ++ continuation[..i])` over the
/// continuation, and the number of continuation tokens. `context` must be
/// non-empty so that the first continuation token has a prefix.
pub fn loglikelihood_ids(
    params: &Params,
    cfg: &ModelConfig,
    context: &[TokenId],
    continuation: &[TokenId],
) -> Result<(f64, usize)> {
    if continuation.is_empty() {
        return Err(ModelError::EmptyContinuation);
    }
    assert!(!context.is_empty(), "context must hold at least one token");
    let mut tokens = Vec::with_capacity(context.len() + continuation.len());
    tokens.extend_from_slice(context);
    tokens.extend_from_slice(continuation);
    // The last token is never used as a prefix.
    let logits = forward(params, cfg, &tokens[..tokens.len() - 1], Mode::Infer)?;
    let start = context.len() - 1;
    let mut sum = 0.0;
    for (i, &tok) in continuation.iter().enumerate() {
        let lp = log_softmax_row(logits.row(start + i));
        sum += lp[tok as usize];
    }
    Ok((sum, continuation.len()))
}

/// String-level log-likelihood: the input is `[BOS] ++ encode(context) ++
/// encode(continuation)`, with context and continuation encoded separately.
pub fn loglikelihood(
    params: &Params,
    cfg: &ModelConfig,
    vocab: &Vocab,
    context: &str,
    continuation: &str,
) -> Result<(f64, usize)> {
    let mut ctx = vec![vocab.special(Special::Bos)];
    ctx.extend(vocab.encode(context));
    let cont = vocab.encode(continuation);
    if cont.is_empty() {
        return Err(ModelError::EmptyContinuation);
    }
    loglikelihood_ids(params, cfg, &ctx, &cont)
}

fn argmax_lowest(row: ArrayView1<f64>) -> TokenId {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in row.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best as TokenId
}

/// Greedy decoding from a token prompt. Each step appends the argmax token
/// (ties go to the lowest id). Stops at a stop token (not included in the
/// output), after `max_new` tokens, or when the context is full.
pub fn greedy_generate_ids(
    params: &Params,
    cfg: &ModelConfig,
    prompt: &[TokenId],
    max_new: usize,
    stop: &[TokenId],
) -> Result<Vec<TokenId>> {
    if prompt.len() >= cfg.max_seq_len {
        return Err(ModelError::SequenceTooLong {
            len: prompt.len() + 1,
            max: cfg.max_seq_len,
        });
    }
    let mut tokens = prompt.to_vec();
    let mut out = Vec::new();
    while out.len() < max_new && tokens.len() < cfg.max_seq_len {
        let logits = forward(params, cfg, &tokens, Mode::Infer)?;
        let next = argmax_lowest(logits.row(tokens.len() - 1));
        if stop.contains(&next) {
            break;
        }
        out.push(next);
        tokens.push(next);
    }
    Ok(out)
}

/// Greedy decoding from text: the prompt is `[BOS] ++ encode(prompt)`.
pub fn greedy_generate(
    params: &Params,
    cfg: &ModelConfig,
    vocab: &Vocab,
    prompt: &str,
    max_new: usize,
    stop: &[TokenId],
) -> Result<String> {
    let mut ids = vec![vocab.special(Special::Bos)];
    ids.extend(vocab.encode(prompt));
    let out = greedy_generate_ids(params, cfg, &ids, max_new, stop)?;
    Ok(vocab.decode(&out)?)
}
