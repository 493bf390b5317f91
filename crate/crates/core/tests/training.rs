use std::collections::BTreeSet;

use lowres_core::databuild::render_chat;
use lowres_core::model::{forward, LoraConfig, Mode, ModelConfig, Params, Projection};
use lowres_core::packer::{pack, FinalPolicy, PackedSequence};
use lowres_core::synth;
use lowres_core::tokenizer::Vocab;
use lowres_core::trainer::{
    cpt_loss_grad, dpo_loss_grad, grad_check, run, sft_loss_grad, Objective, PrefExample, RunOptions, TrainConfig,
    TrainData,
};

const TOL: f64 = 1e-4;

fn tiny() -> (Vocab, ModelConfig, Params) {
    let cfg = ModelConfig::tiny(4096);
    let p = Params::init(&cfg).unwrap();
    (Vocab::bytes_only(), cfg, p)
}

fn sequences(v: &Vocab, n: usize, len: usize) -> Vec<PackedSequence> {
    pack(synth::documents(4 * n, 0.8, 5), v, len, FinalPolicy::Pad)
        .unwrap()
        .take(n)
        .collect()
}

fn lora(targets: &[Projection], rank: usize) -> LoraConfig {
    LoraConfig {
        rank,
        alpha: 2.0 * rank as f64,
        dropout_p: 0.1,
        targets: targets.iter().copied().collect(),
    }
}

fn perturb_lora_b(p: &mut Params) {
    for (name, t) in p.tensors_mut() {
        if name.ends_with("lora_b") {
            for (i, x) in t.iter_mut().enumerate() {
                *x = ((i * 7919 % 13) as f64 - 6.0) * 0.01;
            }
        }
    }
}

#[test]
fn cpt_gradients_match_finite_differences() {
    let (v, cfg, p) = tiny();
    let seqs = sequences(&v, 3, 24);
    let r = grad_check(&p, |q| cpt_loss_grad(q, &cfg, &seqs, Some((1, 1))), 48, 1e-4, 3).unwrap();
    assert!(r.max_rel_err < TOL, "{r:?}");
}

#[test]
fn sft_gradients_match_finite_differences() {
    let (v, cfg, p) = tiny();
    let recs: Vec<_> = synth::instructions(2, 4, 2)
        .iter()
        .map(|r| render_chat(r, &v, 64).unwrap())
        .collect();
    let r = grad_check(&p, |q| sft_loss_grad(q, &cfg, &recs, Some((1, 1))), 48, 1e-4, 3).unwrap();
    assert!(r.max_rel_err < TOL, "{r:?}");

    let mut pl = p.clone();
    pl.lora_attach(&lora(&[Projection::Query, Projection::Value, Projection::Down], 4), 2)
        .unwrap();
    perturb_lora_b(&mut pl);
    let r = grad_check(&pl, |q| sft_loss_grad(q, &cfg, &recs, Some((1, 1))), 48, 1e-4, 3).unwrap();
    assert!(r.max_rel_err < TOL, "{r:?}");
    assert!(r.worst.as_ref().is_some_and(|w| w.0.contains("lora")));
}

#[test]
fn dpo_gradients_match_finite_differences() {
    let (v, cfg, p) = tiny();
    let trips: Vec<_> = synth::preferences(2, 4)
        .iter()
        .map(|t| PrefExample::encode(t, &v).unwrap())
        .collect();
    // Move the policy off the reference so the sigmoid is not at its midpoint.
    let mut policy = p.clone();
    policy.head.mapv_inplace(|x| x * 3.0);
    let r = grad_check(
        &policy,
        |q| dpo_loss_grad(q, &p, &cfg, &trips, 0.1).map(|(o, g)| (o.loss, g)),
        48,
        1e-4,
        3,
    )
    .unwrap();
    assert!(r.max_rel_err < TOL, "{r:?}");
}

#[test]
fn dpo_first_step_loss_is_ln2() {
    let (v, cfg, p) = tiny();
    for seed in [1, 2, 3] {
        let trips: Vec<_> = synth::preferences(5, seed)
            .iter()
            .map(|t| PrefExample::encode(t, &v).unwrap())
            .collect();
        let mut tc = TrainConfig::new(Objective::Dpo, 1e-3, 100);
        tc.seed = seed;
        tc.epochs = 1;
        let out = run(&tc, &cfg, p.clone(), &TrainData::Dpo(trips), RunOptions::default()).unwrap();
        let first = out.report.steps[0].loss;
        assert!((first - std::f64::consts::LN_2).abs() < 1e-4, "{first}");
    }
}

#[test]
fn zero_init_adapter_is_bit_equal_to_base() {
    let (_, cfg, p) = tiny();
    let tokens: Vec<u32> = (0..20).map(|i| (i * 37 % 250) as u32).collect();
    let base = forward(&p, &cfg, &tokens, Mode::Infer).unwrap();
    let mut pl = p.clone();
    pl.lora_attach(&lora(&Projection::ALL, 8), 9).unwrap();
    let adapted = forward(&pl, &cfg, &tokens, Mode::Infer).unwrap();
    assert_eq!(base, adapted);
}

#[test]
fn merged_adapter_matches_unmerged() {
    let (_, cfg, p) = tiny();
    let tokens: Vec<u32> = (0..20).map(|i| (i * 53 % 250) as u32).collect();
    let mut pl = p.clone();
    pl.lora_attach(&lora(&Projection::ALL, 8), 9).unwrap();
    perturb_lora_b(&mut pl);
    let adapted = forward(&pl, &cfg, &tokens, Mode::Infer).unwrap();
    let base = forward(&p, &cfg, &tokens, Mode::Infer).unwrap();
    assert!((&adapted - &base).iter().any(|d| d.abs() > 1e-3));
    pl.lora_merge().unwrap();
    let merged = forward(&pl, &cfg, &tokens, Mode::Infer).unwrap();
    let max = (&adapted - &merged).iter().fold(0.0f64, |m, d| m.max(d.abs()));
    assert!(max < 1e-5, "{max}");
}

#[test]
fn sft_with_lora_leaves_base_untouched() {
    let (v, cfg, p) = tiny();
    let recs: Vec<_> = synth::instructions(6, 4, 3)
        .iter()
        .map(|r| render_chat(r, &v, 64).unwrap())
        .collect();
    let mut tc = TrainConfig::new(Objective::Sft, 1e-2, 64);
    tc.lora = Some(lora(&Projection::ALL, 4));
    tc.epochs = 2;
    let out = run(&tc, &cfg, p.clone(), &TrainData::Sft(recs), RunOptions::default()).unwrap();
    assert!(out.report.steps.len() >= 4);
    let before: Vec<_> = p.tensors().into_iter().map(|(n, _, d)| (n, d.to_vec())).collect();
    let after = out.params.tensors();
    let mut lora_moved = false;
    for (name, _, data) in &after {
        if name.contains("lora_b") {
            lora_moved |= data.iter().any(|&x| x != 0.0);
            continue;
        }
        if let Some((_, orig)) = before.iter().find(|(n, _)| n == name) {
            assert_eq!(orig.as_slice(), *data, "{name} changed");
        }
    }
    assert!(lora_moved);
}

#[test]
fn saturated_predictions_have_vanishing_gradient() {
    let cfg = ModelConfig::tiny(300);
    let token = 65u32;
    let p = Params::always_predicting(&cfg, token, 60.0).unwrap();
    let seq = PackedSequence {
        tokens: vec![token; 16],
        loss_mask: vec![true; 16],
        language: "eu".into(),
        doc_boundaries: vec![0],
    };
    let (loss, grad) = cpt_loss_grad(&p, &cfg, &[seq], None).unwrap();
    assert!(loss < 1e-12, "{loss}");
    assert!(grad.sq_norm().sqrt() < 1e-6, "{}", grad.sq_norm().sqrt());
}

#[test]
fn untrained_cpt_loss_is_near_uniform() {
    let (v, cfg, p) = tiny();
    let seqs = sequences(&v, 4, 32);
    let (loss, _) = cpt_loss_grad(&p, &cfg, &seqs, None).unwrap();
    let expect = (cfg.vocab_size as f64).ln();
    assert!((loss - expect).abs() < 0.2, "{loss} vs {expect}");
}

#[test]
fn lora_sets_only_adapters_trainable() {
    let (_, _, mut p) = tiny();
    p.lora_attach(&lora(&[Projection::Query], 2), 0).unwrap();
    let names: BTreeSet<String> = p
        .tensors()
        .into_iter()
        .map(|(n, _, _)| n)
        .filter(|n| p.is_trainable(n))
        .collect();
    assert!(!names.is_empty());
    assert!(names.iter().all(|n| n.contains("lora")));
}
