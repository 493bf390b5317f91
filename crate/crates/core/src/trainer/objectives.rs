use ndarray::{Array2, Zip};
use rayon::prelude::*;

use crate::databuild::{render_prompt, render_response, PreferenceTriplet, Rendered};
use crate::model::{backward, forward, forward_train, weighted_nll_grad, Mode, ModelConfig, Params};
use crate::packer::PackedSequence;
use crate::tokenizer::{TokenId, Vocab};

use super::optim::AdamW;
use super::{Result, TrainError};

/// Items per parallel work unit. Fixed so the reduction order, and hence
/// every float sum, does not depend on the thread count.
const CHUNK: usize = 4;

pub(crate) fn dropout_seed(seed: u64, step: u64, item: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ step.wrapping_mul(0xBF58_476D_1CE4_E5B9) ^ item as u64
}

/// `Σ_i -Σ_t w_i[t] log p(...)` and its gradient over a list of weighted
/// sequences, reduced in input order.
fn weighted_batch(
    params: &Params,
    cfg: &ModelConfig,
    jobs: &[(&[TokenId], Vec<f64>)],
    seed: Option<(u64, u64)>,
) -> Result<(f64, Params)> {
    let parts: Vec<Result<(f64, Params)>> = jobs
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(ci, chunk)| {
            let mut total = 0.0;
            let mut grads = params.zeros_like();
            for (j, (tokens, w)) in chunk.iter().enumerate() {
                let mode = match seed {
                    Some((s, step)) => Mode::Train {
                        dropout_seed: dropout_seed(s, step, ci * CHUNK + j),
                    },
                    None => Mode::Infer,
                };
                let (v, g) = weighted_nll_grad(params, cfg, tokens, w, mode)?;
                total += v;
                grads.add_scaled(&g, 1.0);
            }
            Ok((total, grads))
        })
        .collect();
    let mut total = 0.0;
    let mut grads = params.zeros_like();
    for p in parts {
        let (v, g) = p?;
        total += v;
        grads.add_scaled(&g, 1.0);
    }
    Ok((total, grads))
}

/// Per-target weights `mask[t+1] / n` for predicted positions.
fn mask_weights(mask: &[bool], n: usize) -> Vec<f64> {
    mask[1..]
        .iter()
        .map(|&m| if m { 1.0 / n as f64 } else { 0.0 })
        .collect()
}

/// Mean next-token cross-entropy over loss-masked positions of the batch.
/// `seed` fixes LoRA dropout masks as `(run seed, step)`; `None` disables
/// dropout.
pub fn cpt_loss_grad(
    params: &Params,
    cfg: &ModelConfig,
    batch: &[PackedSequence],
    seed: Option<(u64, u64)>,
) -> Result<(f64, Params)> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let n: usize = batch
        .iter()
        .map(|s| s.loss_mask.iter().skip(1).filter(|&&m| m).count())
        .sum();
    if n == 0 {
        return Err(TrainError::AllMasked);
    }
    let jobs: Vec<(&[TokenId], Vec<f64>)> = batch
        .iter()
        .map(|s| (s.tokens.as_slice(), mask_weights(&s.loss_mask, n)))
        .collect();
    weighted_batch(params, cfg, &jobs, seed)
}

/// Cross-entropy over assistant-response tokens only. Records with no
/// target positions are skipped with a warning.
pub fn sft_loss_grad(
    params: &Params,
    cfg: &ModelConfig,
    batch: &[Rendered],
    seed: Option<(u64, u64)>,
) -> Result<(f64, Params)> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let kept: Vec<&Rendered> = batch
        .iter()
        .filter(|r| {
            let ok = r.loss_mask.iter().skip(1).any(|&m| m);
            if !ok {
                log::warn!("skipping record with an empty assistant span");
            }
            ok
        })
        .collect();
    let n: usize = kept
        .iter()
        .map(|r| r.loss_mask.iter().skip(1).filter(|&&m| m).count())
        .sum();
    if n == 0 {
        return Err(TrainError::AllMasked);
    }
    let jobs: Vec<(&[TokenId], Vec<f64>)> = kept
        .iter()
        .map(|r| (r.ids.as_slice(), mask_weights(&r.loss_mask, n)))
        .collect();
    weighted_batch(params, cfg, &jobs, seed)
}

/// A preference triplet in token form: prompt prefix plus each response
/// (with its closing EOS).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrefExample {
    pub prompt: Vec<TokenId>,
    pub chosen: Vec<TokenId>,
    pub rejected: Vec<TokenId>,
}

impl PrefExample {
    pub fn encode(t: &PreferenceTriplet, vocab: &Vocab) -> Result<Self> {
        if t.chosen == t.rejected {
            log::warn!("rejecting triplet with identical responses");
            return Err(TrainError::IdenticalResponses);
        }
        t.validate()?;
        Ok(PrefExample {
            prompt: render_prompt(&t.prompt, vocab),
            chosen: render_response(&t.chosen, vocab),
            rejected: render_response(&t.rejected, vocab),
        })
    }

    fn sequence(&self, chosen: bool) -> Vec<TokenId> {
        let resp = if chosen { &self.chosen } else { &self.rejected };
        self.prompt.iter().chain(resp).copied().collect()
    }

    /// Tokens fed through the model for one step on this triplet.
    pub fn token_count(&self) -> usize {
        2 * self.prompt.len() + self.chosen.len() + self.rejected.len()
    }
}

fn log_softmax_at(logits: &Array2<f64>, row: usize, target: TokenId) -> (f64, f64) {
    let r = logits.row(row);
    let m = r.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = m + r.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
    (r[target as usize] - lse, lse)
}

fn response_ll(logits: &Array2<f64>, tokens: &[TokenId], start: usize) -> f64 {
    (start..tokens.len())
        .map(|t| log_softmax_at(logits, t - 1, tokens[t]).0)
        .sum()
}

/// Sum of response-token log-probabilities given the prompt (no dropout).
pub fn response_logprob(params: &Params, cfg: &ModelConfig, prompt: &[TokenId], response: &[TokenId]) -> Result<f64> {
    let tokens: Vec<TokenId> = prompt.iter().chain(response).copied().collect();
    let logits = forward(params, cfg, &tokens[..tokens.len() - 1], Mode::Infer)?;
    Ok(response_ll(&logits, &tokens, prompt.len()))
}

/// Gradient of `coef · Σ_{t ≥ start} log p(tokens[t] | ..)` with respect to the logits.
fn dll_dlogits(logits: &Array2<f64>, tokens: &[TokenId], start: usize, coef: f64) -> Array2<f64> {
    let mut d = Array2::zeros(logits.raw_dim());
    for t in start..tokens.len() {
        let (_, lse) = log_softmax_at(logits, t - 1, tokens[t]);
        let mut row = d.row_mut(t - 1);
        Zip::from(&mut row)
            .and(&logits.row(t - 1))
            .for_each(|g, &z| *g = -coef * (z - lse).exp());
        row[tokens[t] as usize] += coef;
    }
    d
}

#[derive(Debug, Clone, PartialEq)]
pub struct DpoOutput {
    pub loss: f64,
    /// `(llπ(chosen) − llref(chosen)) − (llπ(rejected) − llref(rejected))` per triplet.
    pub margins: Vec<f64>,
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean of `−log σ(β · margin)` over the batch and its gradient with respect
/// to the policy. The reference is read-only and receives no gradient.
/// Forward passes run without dropout so that the loss at
/// `policy == reference` is exactly ln 2.
pub fn dpo_loss_grad(
    policy: &Params,
    reference: &Params,
    cfg: &ModelConfig,
    batch: &[PrefExample],
    beta: f64,
) -> Result<(DpoOutput, Params)> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    if batch.iter().any(|e| e.chosen == e.rejected) {
        return Err(TrainError::IdenticalResponses);
    }
    let b = batch.len() as f64;
    type Part = (f64, Vec<f64>, Params);
    let parts: Vec<Result<Part>> = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut loss = 0.0;
            let mut margins = Vec::with_capacity(chunk.len());
            let mut grads = policy.zeros_like();
            for ex in chunk {
                let start = ex.prompt.len();
                let sc = ex.sequence(true);
                let sr = ex.sequence(false);
                let (lc, cache_c) = forward_train(policy, cfg, &sc[..sc.len() - 1], Mode::Infer)?;
                let (lr, cache_r) = forward_train(policy, cfg, &sr[..sr.len() - 1], Mode::Infer)?;
                let pc = response_ll(&lc, &sc, start);
                let pr = response_ll(&lr, &sr, start);
                let rc = response_logprob(reference, cfg, &ex.prompt, &ex.chosen)?;
                let rr = response_logprob(reference, cfg, &ex.prompt, &ex.rejected)?;
                let margin = (pc - rc) - (pr - rr);
                loss += softplus(-beta * margin) / b;
                margins.push(margin);
                // d/dmargin of softplus(−β m)/B.
                let dm = -beta * sigmoid(-beta * margin) / b;
                grads.add_scaled(&backward(policy, cfg, &cache_c, &dll_dlogits(&lc, &sc, start, dm)), 1.0);
                grads.add_scaled(
                    &backward(policy, cfg, &cache_r, &dll_dlogits(&lr, &sr, start, -dm)),
                    1.0,
                );
            }
            Ok((loss, margins, grads))
        })
        .collect();
    let mut loss = 0.0;
    let mut margins = Vec::with_capacity(batch.len());
    let mut grads = policy.zeros_like();
    for p in parts {
        let (l, m, g) = p?;
        loss += l;
        margins.extend(m);
        grads.add_scaled(&g, 1.0);
    }
    Ok((DpoOutput { loss, margins }, grads))
}

/// One optimizer update on the CPT objective. Returns the pre-update loss.
pub fn cpt_step(
    params: &mut Params,
    opt: &mut AdamW,
    cfg: &ModelConfig,
    batch: &[PackedSequence],
    lr: f64,
    seed: (u64, u64),
) -> Result<f64> {
    let (loss, grads) = cpt_loss_grad(params, cfg, batch, Some(seed))?;
    opt.step(params, &grads, lr);
    Ok(loss)
}

/// One optimizer update on the SFT objective. Returns the pre-update loss.
pub fn sft_step(
    params: &mut Params,
    opt: &mut AdamW,
    cfg: &ModelConfig,
    batch: &[Rendered],
    lr: f64,
    seed: (u64, u64),
) -> Result<f64> {
    let (loss, grads) = sft_loss_grad(params, cfg, batch, Some(seed))?;
    opt.step(params, &grads, lr);
    Ok(loss)
}

/// One optimizer update of the policy on the DPO objective.
pub fn dpo_step(
    policy: &mut Params,
    reference: &Params,
    opt: &mut AdamW,
    cfg: &ModelConfig,
    batch: &[PrefExample],
    beta: f64,
    lr: f64,
) -> Result<DpoOutput> {
    let (out, grads) = dpo_loss_grad(policy, reference, cfg, batch, beta)?;
    opt.step(policy, &grads, lr);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Document;
    use crate::packer::{pack, FinalPolicy};
    use crate::trainer::{Objective, TrainConfig};

    fn byte_setup() -> (Vocab, ModelConfig, Params) {
        let v = Vocab::bytes_only();
        let cfg = ModelConfig::tiny(v.size());
        let p = Params::init(&cfg).unwrap();
        (v, cfg, p)
    }

    fn seqs(v: &Vocab) -> Vec<PackedSequence> {
        let docs = ["kaixo mundua", "egun on denoi", "hello there", "zer moduz zaude gaur"]
            .iter()
            .enumerate()
            .map(|(i, t)| Document::new(format!("d{i}"), *t, if i == 2 { "en" } else { "eu" }).unwrap());
        pack(docs, v, 16, FinalPolicy::Pad).unwrap().collect()
    }

    #[test]
    fn cpt_loss_is_permutation_invariant() {
        let (v, cfg, p) = byte_setup();
        let mut b = seqs(&v);
        let (a, _) = cpt_loss_grad(&p, &cfg, &b, None).unwrap();
        b.reverse();
        let (c, _) = cpt_loss_grad(&p, &cfg, &b, None).unwrap();
        assert!((a - c).abs() < 1e-6);
    }

    #[test]
    fn all_masked_batch_errors() {
        let (v, cfg, p) = byte_setup();
        let mut b = seqs(&v);
        for s in &mut b {
            s.loss_mask.iter_mut().for_each(|m| *m = false);
        }
        assert!(matches!(cpt_loss_grad(&p, &cfg, &b, None), Err(TrainError::AllMasked)));
        assert!(matches!(
            cpt_loss_grad(&p, &cfg, &[], None),
            Err(TrainError::EmptyBatch)
        ));
    }

    #[test]
    fn prompt_positions_contribute_nothing() {
        let (v, cfg, p) = byte_setup();
        let rec = crate::databuild::InstructionRecord::single("galdera luzea", "bai", "Chat");
        let r = crate::databuild::render_chat(&rec, &v, 64).unwrap();
        let (base, _) = sft_loss_grad(&p, &cfg, std::slice::from_ref(&r), None).unwrap();
        // Changing a prompt token changes the context but a masked-out target
        // never adds a term: recompute by hand from the masked positions.
        let logits = forward(&p, &cfg, &r.ids, Mode::Infer).unwrap();
        let n = r.target_count();
        let by_hand: f64 = (1..r.ids.len())
            .filter(|&t| r.loss_mask[t])
            .map(|t| -log_softmax_at(&logits, t - 1, r.ids[t]).0 / n as f64)
            .sum();
        assert!((base - by_hand).abs() < 1e-12);
    }

    fn triplets(v: &Vocab) -> Vec<PrefExample> {
        [("a?", "bai", "ez"), ("b?", "ondo", "gaizki"), ("c?", "egia", "gezurra")]
            .iter()
            .map(|(p, c, r)| {
                PrefExample::encode(
                    &PreferenceTriplet {
                        prompt: p.to_string(),
                        chosen: c.to_string(),
                        rejected: r.to_string(),
                        language: "eu".into(),
                    },
                    v,
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn dpo_identity_and_beta_scaling() {
        let (v, cfg, p) = byte_setup();
        let batch = triplets(&v);
        let (out, g) = dpo_loss_grad(&p, &p, &cfg, &batch, 0.1).unwrap();
        assert!((out.loss - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(g.sq_norm() > 0.0);

        let mut q = p.clone();
        q.head[[b'b' as usize, 0]] += 0.5;
        let (o1, _) = dpo_loss_grad(&q, &p, &cfg, &batch, 0.1).unwrap();
        let (o2, _) = dpo_loss_grad(&q, &p, &cfg, &batch, 0.2).unwrap();
        for (m1, m2) in o1.margins.iter().zip(&o2.margins) {
            assert_eq!(m1, m2);
            assert_eq!(2.0 * 0.1 * m1, 0.2 * m2);
        }
    }

    #[test]
    fn identical_responses_rejected() {
        let v = Vocab::bytes_only();
        let t = PreferenceTriplet {
            prompt: "p".into(),
            chosen: "same".into(),
            rejected: "same".into(),
            language: "eu".into(),
        };
        assert!(matches!(
            PrefExample::encode(&t, &v),
            Err(TrainError::IdenticalResponses)
        ));
    }

    #[test]
    fn dpo_step_leaves_reference_untouched() {
        let (v, cfg, p) = byte_setup();
        let reference = p.clone();
        let mut policy = p;
        let tc = TrainConfig::new(Objective::Dpo, 1e-3, 1);
        let mut opt = AdamW::new(&policy, &tc);
        dpo_step(&mut policy, &reference, &mut opt, &cfg, &triplets(&v), 0.1, 1e-3).unwrap();
        let fresh = Params::init(&cfg).unwrap();
        for ((n, _, a), (_, _, b)) in reference.tensors().into_iter().zip(fresh.tensors()) {
            assert_eq!(a, b, "{n}");
        }
        let (after, _) = dpo_loss_grad(&policy, &reference, &cfg, &triplets(&v), 0.1).unwrap();
        assert!(after.loss < std::f64::consts::LN_2);
    }
}
