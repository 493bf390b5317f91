use ndarray::{s, Array1, Array2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{Linear, Params};
use super::{ModelConfig, ModelError, Positional, Result};

const NORM_EPS: f64 = 1e-6;
const ROPE_BASE: f64 = 10_000.0;

/// Dropout is only ever applied in `Train` mode, with masks drawn from a
/// generator seeded by `dropout_seed`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train { dropout_seed: u64 },
    Infer,
}

struct NormCache {
    n: Array2<f64>,
    inv_rms: Array1<f64>,
}

fn rmsnorm(x: &Array2<f64>, g: &Array1<f64>) -> (Array2<f64>, NormCache) {
    let d = x.ncols() as f64;
    let inv_rms: Array1<f64> = x
        .rows()
        .into_iter()
        .map(|r| 1.0 / (r.dot(&r) / d + NORM_EPS).sqrt())
        .collect();
    let n = x * &inv_rms.view().insert_axis(Axis(1));
    let y = &n * g;
    (y, NormCache { n, inv_rms })
}

fn rmsnorm_back(dy: &Array2<f64>, g: &Array1<f64>, c: &NormCache, dg: Option<&mut Array1<f64>>) -> Array2<f64> {
    if let Some(dg) = dg {
        *dg += &(dy * &c.n).sum_axis(Axis(0));
    }
    let d = dy.ncols() as f64;
    let dn = dy * g;
    let mut dx = Array2::zeros(dy.raw_dim());
    for (t, mut row) in dx.rows_mut().into_iter().enumerate() {
        let n = c.n.row(t);
        let dnr = dn.row(t);
        let proj = dnr.dot(&n) / d;
        let inv = c.inv_rms[t];
        Zip::from(&mut row)
            .and(&dnr)
            .and(&n)
            .for_each(|o, &a, &b| *o = (a - b * proj) * inv);
    }
    dx
}

struct LinCache {
    /// Scaled dropout mask on the LoRA input, when dropout is active.
    mask: Option<Array2<f64>>,
    /// LoRA down-projection `x_d · Aᵀ`.
    u: Option<Array2<f64>>,
}

fn lin_fwd(
    lin: &Linear,
    x: &Array2<f64>,
    scale: f64,
    dropout: Option<(&mut ChaCha8Rng, f64)>,
) -> (Array2<f64>, LinCache) {
    let mut y = x.dot(&lin.weight.t());
    let mut cache = LinCache { mask: None, u: None };
    if let Some(pair) = &lin.lora {
        let u = match dropout {
            Some((rng, p)) if p > 0.0 => {
                let keep = 1.0 / (1.0 - p);
                let mask = Array2::from_shape_fn(x.raw_dim(), |_| if rng.random::<f64>() < p { 0.0 } else { keep });
                let u = (x * &mask).dot(&pair.a.t());
                cache.mask = Some(mask);
                u
            }
            _ => x.dot(&pair.a.t()),
        };
        y.scaled_add(scale, &u.dot(&pair.b.t()));
        cache.u = Some(u);
    }
    (y, cache)
}

fn lin_bwd(
    lin: &Linear,
    x: &Array2<f64>,
    cache: &LinCache,
    dy: &Array2<f64>,
    scale: f64,
    grad: &mut Linear,
    base_trainable: bool,
) -> Array2<f64> {
    if base_trainable {
        grad.weight += &dy.t().dot(x);
    }
    let mut dx = dy.dot(&lin.weight);
    if let (Some(pair), Some(u), Some(gpair)) = (&lin.lora, &cache.u, grad.lora.as_mut()) {
        gpair.b.scaled_add(scale, &dy.t().dot(u));
        let du = dy.dot(&pair.b) * scale;
        let mut dxd = du.dot(&pair.a);
        match &cache.mask {
            Some(mask) => {
                gpair.a += &du.t().dot(&(x * mask));
                dxd *= mask;
            }
            None => gpair.a += &du.t().dot(x),
        }
        dx += &dxd;
    }
    dx
}

struct Rope {
    cos: Array2<f64>,
    sin: Array2<f64>,
}

impl Rope {
    fn new(t: usize, head_dim: usize) -> Self {
        let half = head_dim / 2;
        let mut cos = Array2::zeros((t, half));
        let mut sin = Array2::zeros((t, half));
        for p in 0..t {
            for i in 0..half {
                let theta = p as f64 * ROPE_BASE.powf(-2.0 * i as f64 / head_dim as f64);
                cos[[p, i]] = theta.cos();
                sin[[p, i]] = theta.sin();
            }
        }
        Rope { cos, sin }
    }

    /// Rotates each head's consecutive pairs by the position angle
    /// (or its negative when `inverse`).
    fn apply(&self, x: &mut Array2<f64>, n_heads: usize, inverse: bool) {
        let dh = x.ncols() / n_heads;
        let half = dh / 2;
        let sign = if inverse { -1.0 } else { 1.0 };
        for (p, mut row) in x.rows_mut().into_iter().enumerate() {
            for h in 0..n_heads {
                for i in 0..half {
                    let (c, s) = (self.cos[[p, i]], sign * self.sin[[p, i]]);
                    let a = h * dh + 2 * i;
                    let (x0, x1) = (row[a], row[a + 1]);
                    row[a] = x0 * c - x1 * s;
                    row[a + 1] = x0 * s + x1 * c;
                }
            }
        }
    }
}

fn silu(z: f64) -> f64 {
    z / (1.0 + (-z).exp())
}

fn silu_grad(z: f64) -> f64 {
    let s = 1.0 / (1.0 + (-z).exp());
    s * (1.0 + z * (1.0 - s))
}

struct LayerCache {
    h1: Array2<f64>,
    n1: NormCache,
    cq: LinCache,
    ck: LinCache,
    cv: LinCache,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    attn: Array2<f64>,
    co: LinCache,
    h2: Array2<f64>,
    n2: NormCache,
    gate: Array2<f64>,
    up: Array2<f64>,
    act: Array2<f64>,
    cg: LinCache,
    cu: LinCache,
    cd: LinCache,
}

/// Activations kept from a training forward pass for [`backward`].
pub struct Cache {
    tokens: Vec<u32>,
    rope: Option<Rope>,
    layers: Vec<LayerCache>,
    hf: Array2<f64>,
    nf: NormCache,
}

fn check_input(cfg: &ModelConfig, tokens: &[u32]) -> Result<()> {
    if tokens.len() > cfg.max_seq_len {
        return Err(ModelError::SequenceTooLong {
            len: tokens.len(),
            max: cfg.max_seq_len,
        });
    }
    if let Some(&id) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(ModelError::TokenOutOfRange {
            id,
            vocab_size: cfg.vocab_size,
        });
    }
    Ok(())
}

fn all_finite(x: &Array2<f64>) -> bool {
    x.iter().all(|v| v.is_finite())
}

fn causal_attention(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    n_heads: usize,
) -> (Array2<f64>, Vec<Array2<f64>>) {
    let (t, d) = q.dim();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Array2::zeros((t, d));
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let qh = q.slice(cols);
        let kh = k.slice(cols);
        let vh = v.slice(cols);
        let mut p = qh.dot(&kh.t()) * scale;
        for (i, mut row) in p.rows_mut().into_iter().enumerate() {
            let m = row.slice(s![..=i]).fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut z = 0.0;
            for j in 0..t {
                if j <= i {
                    let e = (row[j] - m).exp();
                    row[j] = e;
                    z += e;
                } else {
                    row[j] = 0.0;
                }
            }
            row.slice_mut(s![..=i]).mapv_inplace(|e| e / z);
        }
        out.slice_mut(cols).assign(&p.dot(&vh));
        probs.push(p);
    }
    (out, probs)
}

fn run(
    params: &Params,
    cfg: &ModelConfig,
    tokens: &[u32],
    mode: Mode,
    keep: bool,
) -> Result<(Array2<f64>, Option<Cache>)> {
    check_input(cfg, tokens)?;
    let t = tokens.len();
    let d = cfg.d_model;
    let lora_scale = params.lora.as_ref().map_or(0.0, |l| l.scaling());
    let dropout_p = params.lora.as_ref().map_or(0.0, |l| l.dropout_p);
    let mut rng = match mode {
        Mode::Train { dropout_seed } if dropout_p > 0.0 => Some(ChaCha8Rng::seed_from_u64(dropout_seed)),
        _ => None,
    };

    let mut x = Array2::zeros((t, d));
    for (i, &tok) in tokens.iter().enumerate() {
        x.row_mut(i).assign(&params.tok_emb.row(tok as usize));
    }
    if let Some(pe) = &params.pos_emb {
        x += &pe.slice(s![..t, ..]);
    }
    let rope = (cfg.positional == Positional::Rotary).then(|| Rope::new(t, cfg.head_dim()));

    let mut layers = Vec::new();
    for (li, b) in params.blocks.iter().enumerate() {
        macro_rules! lin {
            ($l:expr, $x:expr) => {
                lin_fwd($l, $x, lora_scale, rng.as_mut().map(|r| (r, dropout_p)))
            };
        }
        let (h1, n1) = rmsnorm(&x, &b.attn_norm);
        let (mut q, cq) = lin!(&b.wq, &h1);
        let (mut k, ck) = lin!(&b.wk, &h1);
        let (v, cv) = lin!(&b.wv, &h1);
        if let Some(r) = &rope {
            r.apply(&mut q, cfg.n_heads, false);
            r.apply(&mut k, cfg.n_heads, false);
        }
        let (attn, probs) = causal_attention(&q, &k, &v, cfg.n_heads);
        let (a, co) = lin!(&b.wo, &attn);
        x += &a;
        let (h2, n2) = rmsnorm(&x, &b.mlp_norm);
        let (gate, cg) = lin!(&b.w_gate, &h2);
        let (up, cu) = lin!(&b.w_up, &h2);
        let act = Zip::from(&gate).and(&up).map_collect(|&g, &u| silu(g) * u);
        let (m, cd) = lin!(&b.w_down, &act);
        x += &m;
        if !all_finite(&x) {
            return Err(ModelError::NonFinite { layer: li });
        }
        if keep {
            layers.push(LayerCache {
                h1,
                n1,
                cq,
                ck,
                cv,
                q,
                k,
                v,
                probs,
                attn,
                co,
                h2,
                n2,
                gate,
                up,
                act,
                cg,
                cu,
                cd,
            });
        }
    }
    let (hf, nf) = rmsnorm(&x, &params.final_norm);
    let logits = hf.dot(&params.head.t());
    if !all_finite(&logits) {
        return Err(ModelError::NonFinite { layer: cfg.n_layers });
    }
    let cache = keep.then(|| Cache {
        tokens: tokens.to_vec(),
        rope,
        layers,
        hf,
        nf,
    });
    Ok((logits, cache))
}

/// Logits of shape `(tokens.len(), vocab_size)`. Row `t` depends only on
/// `tokens[..=t]`.
pub fn forward(params: &Params, cfg: &ModelConfig, tokens: &[u32], mode: Mode) -> Result<Array2<f64>> {
    Ok(run(params, cfg, tokens, mode, false)?.0)
}

/// Forward pass that also records the activations needed by [`backward`].
pub fn forward_train(params: &Params, cfg: &ModelConfig, tokens: &[u32], mode: Mode) -> Result<(Array2<f64>, Cache)> {
    let (logits, cache) = run(params, cfg, tokens, mode, true)?;
    Ok((logits, cache.expect("cache requested")))
}

/// Gradient of a scalar objective with respect to every trainable tensor,
/// given its gradient `dlogits` with respect to the logits. Frozen tensors
/// get zero gradients.
pub fn backward(params: &Params, cfg: &ModelConfig, cache: &Cache, dlogits: &Array2<f64>) -> Params {
    let mut g = params.zeros_like();
    let base = !params.has_lora();
    let lora_scale = params.lora.as_ref().map_or(0.0, |l| l.scaling());

    if base {
        g.head += &dlogits.t().dot(&cache.hf);
    }
    let dhf = dlogits.dot(&params.head);
    let mut dx = rmsnorm_back(&dhf, &params.final_norm, &cache.nf, base.then_some(&mut g.final_norm));

    for (li, b) in params.blocks.iter().enumerate().rev() {
        let c = &cache.layers[li];
        let gb = &mut g.blocks[li];
        // MLP branch.
        let dact = lin_bwd(&b.w_down, &c.act, &c.cd, &dx, lora_scale, &mut gb.w_down, base);
        let dgate = Zip::from(&dact)
            .and(&c.gate)
            .and(&c.up)
            .map_collect(|&da, &gt, &u| da * u * silu_grad(gt));
        let dup = Zip::from(&dact).and(&c.gate).map_collect(|&da, &gt| da * silu(gt));
        let mut dh2 = lin_bwd(&b.w_gate, &c.h2, &c.cg, &dgate, lora_scale, &mut gb.w_gate, base);
        dh2 += &lin_bwd(&b.w_up, &c.h2, &c.cu, &dup, lora_scale, &mut gb.w_up, base);
        dx += &rmsnorm_back(&dh2, &b.mlp_norm, &c.n2, base.then_some(&mut gb.mlp_norm));

        // Attention branch.
        let dattn = lin_bwd(&b.wo, &c.attn, &c.co, &dx, lora_scale, &mut gb.wo, base);
        let (t, d) = dattn.dim();
        let dh = d / cfg.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = Array2::zeros((t, d));
        let mut dk = Array2::zeros((t, d));
        let mut dv = Array2::zeros((t, d));
        for h in 0..cfg.n_heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let p = &c.probs[h];
            let doh = dattn.slice(cols);
            let mut dp = doh.dot(&c.v.slice(cols).t());
            dv.slice_mut(cols).assign(&p.t().dot(&doh));
            for (i, mut row) in dp.rows_mut().into_iter().enumerate() {
                let pr = p.row(i);
                let dot = row.dot(&pr);
                Zip::from(&mut row)
                    .and(&pr)
                    .for_each(|ds, &pij| *ds = pij * (*ds - dot));
            }
            dq.slice_mut(cols).assign(&(dp.dot(&c.k.slice(cols)) * scale));
            dk.slice_mut(cols).assign(&(dp.t().dot(&c.q.slice(cols)) * scale));
        }
        if let Some(r) = &cache.rope {
            r.apply(&mut dq, cfg.n_heads, true);
            r.apply(&mut dk, cfg.n_heads, true);
        }
        let mut dh1 = lin_bwd(&b.wq, &c.h1, &c.cq, &dq, lora_scale, &mut gb.wq, base);
        dh1 += &lin_bwd(&b.wk, &c.h1, &c.ck, &dk, lora_scale, &mut gb.wk, base);
        dh1 += &lin_bwd(&b.wv, &c.h1, &c.cv, &dv, lora_scale, &mut gb.wv, base);
        dx += &rmsnorm_back(&dh1, &b.attn_norm, &c.n1, base.then_some(&mut gb.attn_norm));
    }

    if base {
        for (i, &tok) in cache.tokens.iter().enumerate() {
            let mut row = g.tok_emb.row_mut(tok as usize);
            row += &dx.row(i);
        }
        if let Some(gp) = &mut g.pos_emb {
            let t = cache.tokens.len();
            let mut rows = gp.slice_mut(s![..t, ..]);
            rows += &dx;
        }
    }
    g
}

/// Objective `-Σ_t weights[t] · log p(tokens[t+1] | tokens[..=t])` and its
/// gradient. `weights` has one entry per predicted position
/// (`tokens.len() - 1`).
pub fn weighted_nll_grad(
    params: &Params,
    cfg: &ModelConfig,
    tokens: &[u32],
    weights: &[f64],
    mode: Mode,
) -> Result<(f64, Params)> {
    assert_eq!(weights.len() + 1, tokens.len(), "one weight per predicted position");
    let (logits, cache) = forward_train(params, cfg, tokens, mode)?;
    let mut dlogits = Array2::zeros(logits.raw_dim());
    let mut value = 0.0;
    for (t, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let target = tokens[t + 1] as usize;
        let row = logits.row(t);
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
        value -= w * (row[target] - lse);
        let mut drow = dlogits.row_mut(t);
        Zip::from(&mut drow)
            .and(&row)
            .for_each(|d, &z| *d = w * (z - lse).exp());
        drow[target] -= w;
    }
    let grads = backward(params, cfg, &cache, &dlogits);
    Ok((value, grads))
}
