use std::fmt;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use super::{LoraConfig, ModelConfig, ModelError, Positional, Result};

/// The seven projections of a block that can carry a LoRA adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Query,
    Key,
    Value,
    Output,
    Gate,
    Up,
    Down,
}

impl Projection {
    pub const ALL: [Projection; 7] = [
        Projection::Query,
        Projection::Key,
        Projection::Value,
        Projection::Output,
        Projection::Gate,
        Projection::Up,
        Projection::Down,
    ];

    pub fn short(self) -> &'static str {
        match self {
            Projection::Query => "wq",
            Projection::Key => "wk",
            Projection::Value => "wv",
            Projection::Output => "wo",
            Projection::Gate => "w_gate",
            Projection::Up => "w_up",
            Projection::Down => "w_down",
        }
    }
}

impl fmt::Display for Projection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short())
    }
}

/// Low-rank pair: `a` is `rank × d_in`, `b` is `d_out × rank`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair {
    pub a: Array2<f64>,
    pub b: Array2<f64>,
}

/// Bias-free linear map with weight stored `d_out × d_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub lora: Option<LoraPair>,
}

impl Linear {
    fn zeros_like(&self) -> Self {
        Linear {
            weight: Array2::zeros(self.weight.raw_dim()),
            lora: self.lora.as_ref().map(|l| LoraPair {
                a: Array2::zeros(l.a.raw_dim()),
                b: Array2::zeros(l.b.raw_dim()),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub attn_norm: Array1<f64>,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub mlp_norm: Array1<f64>,
    pub w_gate: Linear,
    pub w_up: Linear,
    pub w_down: Linear,
}

impl Block {
    pub fn proj(&self, p: Projection) -> &Linear {
        match p {
            Projection::Query => &self.wq,
            Projection::Key => &self.wk,
            Projection::Value => &self.wv,
            Projection::Output => &self.wo,
            Projection::Gate => &self.w_gate,
            Projection::Up => &self.w_up,
            Projection::Down => &self.w_down,
        }
    }

    pub fn proj_mut(&mut self, p: Projection) -> &mut Linear {
        match p {
            Projection::Query => &mut self.wq,
            Projection::Key => &mut self.wk,
            Projection::Value => &mut self.wv,
            Projection::Output => &mut self.wo,
            Projection::Gate => &mut self.w_gate,
            Projection::Up => &mut self.w_up,
            Projection::Down => &mut self.w_down,
        }
    }
}

/// All model tensors. The same structure doubles as a gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub tok_emb: Array2<f64>,
    pub pos_emb: Option<Array2<f64>>,
    pub blocks: Vec<Block>,
    pub final_norm: Array1<f64>,
    pub head: Array2<f64>,
    pub lora: Option<LoraConfig>,
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("std is finite and positive");
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

fn linear(rng: &mut ChaCha8Rng, d_out: usize, d_in: usize, std: f64) -> Linear {
    Linear {
        weight: normal_matrix(rng, d_out, d_in, std),
        lora: None,
    }
}

impl Params {
    /// Random initialisation seeded by `cfg.seed`.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.d_model;
        let ff = cfg.d_ff;
        let in_std = 1.0 / (d as f64).sqrt();
        let resid_std = in_std / (2.0 * cfg.n_layers as f64).sqrt();
        let tok_emb = normal_matrix(&mut rng, cfg.vocab_size, d, 1.0);
        let pos_emb = match cfg.positional {
            Positional::Learned => Some(normal_matrix(&mut rng, cfg.max_seq_len, d, 0.1)),
            Positional::Rotary => None,
        };
        let blocks = (0..cfg.n_layers)
            .map(|_| Block {
                attn_norm: Array1::ones(d),
                wq: linear(&mut rng, d, d, in_std),
                wk: linear(&mut rng, d, d, in_std),
                wv: linear(&mut rng, d, d, in_std),
                wo: linear(&mut rng, d, d, resid_std),
                mlp_norm: Array1::ones(d),
                w_gate: linear(&mut rng, ff, d, in_std),
                w_up: linear(&mut rng, ff, d, in_std),
                w_down: linear(&mut rng, d, ff, resid_std / (ff as f64 / d as f64).sqrt()),
            })
            .collect();
        let head = normal_matrix(&mut rng, cfg.vocab_size, d, 0.02);
        Ok(Params {
            tok_emb,
            pos_emb,
            blocks,
            final_norm: Array1::ones(d),
            head,
            lora: None,
        })
    }

    /// A crafted model whose next-token distribution ignores the context:
    /// block outputs are zeroed and every embedding points along one axis,
    /// so `token` leads every other logit by `margin`.
    pub fn always_predicting(cfg: &ModelConfig, token: u32, margin: f64) -> Result<Self> {
        let mut p = Params::init(cfg)?;
        if token as usize >= cfg.vocab_size {
            return Err(ModelError::TokenOutOfRange {
                id: token,
                vocab_size: cfg.vocab_size,
            });
        }
        for b in &mut p.blocks {
            b.wo.weight.fill(0.0);
            b.w_down.weight.fill(0.0);
        }
        if let Some(pe) = &mut p.pos_emb {
            pe.fill(0.0);
        }
        p.tok_emb.fill(0.0);
        p.tok_emb.column_mut(0).fill(1.0);
        p.head.fill(0.0);
        // The final norm maps the unit axis to length sqrt(d_model).
        p.head[[token as usize, 0]] = margin / (cfg.d_model as f64).sqrt();
        Ok(p)
    }

    /// Zero-filled tensors with the same shapes (a gradient buffer).
    pub fn zeros_like(&self) -> Self {
        Params {
            tok_emb: Array2::zeros(self.tok_emb.raw_dim()),
            pos_emb: self.pos_emb.as_ref().map(|p| Array2::zeros(p.raw_dim())),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    attn_norm: Array1::zeros(b.attn_norm.raw_dim()),
                    wq: b.wq.zeros_like(),
                    wk: b.wk.zeros_like(),
                    wv: b.wv.zeros_like(),
                    wo: b.wo.zeros_like(),
                    mlp_norm: Array1::zeros(b.mlp_norm.raw_dim()),
                    w_gate: b.w_gate.zeros_like(),
                    w_up: b.w_up.zeros_like(),
                    w_down: b.w_down.zeros_like(),
                })
                .collect(),
            final_norm: Array1::zeros(self.final_norm.raw_dim()),
            head: Array2::zeros(self.head.raw_dim()),
            lora: self.lora.clone(),
        }
    }

    pub fn has_lora(&self) -> bool {
        self.lora.is_some()
    }

    /// Whether the named tensor receives updates: LoRA factors when adapters
    /// are attached, base tensors otherwise.
    pub fn is_trainable(&self, name: &str) -> bool {
        is_lora_name(name) == self.has_lora()
    }

    /// Visits every tensor in a fixed order as `(name, shape, data)`.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        out.push(entry("tok_emb".into(), &self.tok_emb));
        if let Some(p) = &self.pos_emb {
            out.push(entry("pos_emb".into(), p));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            out.push(entry1(format!("blocks.{i}.attn_norm"), &b.attn_norm));
            for p in Projection::ALL {
                if p == Projection::Gate {
                    out.push(entry1(format!("blocks.{i}.mlp_norm"), &b.mlp_norm));
                }
                let lin = b.proj(p);
                out.push(entry(format!("blocks.{i}.{p}"), &lin.weight));
                if let Some(l) = &lin.lora {
                    out.push(entry(format!("blocks.{i}.{p}.lora_a"), &l.a));
                    out.push(entry(format!("blocks.{i}.{p}.lora_b"), &l.b));
                }
            }
        }
        out.push(entry1("final_norm".into(), &self.final_norm));
        out.push(entry("head".into(), &self.head));
        out
    }

    /// Mutable counterpart of [`Params::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = Vec::new();
        out.push(("tok_emb".into(), slice_mut(&mut self.tok_emb)));
        if let Some(p) = &mut self.pos_emb {
            out.push(("pos_emb".into(), slice_mut(p)));
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let Block {
                attn_norm,
                wq,
                wk,
                wv,
                wo,
                mlp_norm,
                w_gate,
                w_up,
                w_down,
            } = b;
            out.push((
                format!("blocks.{i}.attn_norm"),
                attn_norm.as_slice_mut().expect("contiguous"),
            ));
            let mut mlp_norm = Some(mlp_norm);
            for (p, lin) in [
                (Projection::Query, wq),
                (Projection::Key, wk),
                (Projection::Value, wv),
                (Projection::Output, wo),
                (Projection::Gate, w_gate),
                (Projection::Up, w_up),
                (Projection::Down, w_down),
            ] {
                if p == Projection::Gate {
                    let n = mlp_norm.take().expect("visited once");
                    out.push((format!("blocks.{i}.mlp_norm"), n.as_slice_mut().expect("contiguous")));
                }
                out.push((format!("blocks.{i}.{p}"), slice_mut(&mut lin.weight)));
                if let Some(l) = &mut lin.lora {
                    out.push((format!("blocks.{i}.{p}.lora_a"), slice_mut(&mut l.a)));
                    out.push((format!("blocks.{i}.{p}.lora_b"), slice_mut(&mut l.b)));
                }
            }
        }
        out.push(("final_norm".into(), self.final_norm.as_slice_mut().expect("contiguous")));
        out.push(("head".into(), slice_mut(&mut self.head)));
        out
    }

    /// Total scalar count, optionally restricted to LoRA factors.
    pub fn count(&self, lora_only: bool) -> usize {
        self.tensors()
            .iter()
            .filter(|(n, _, _)| !lora_only || is_lora_name(n))
            .map(|(_, _, d)| d.len())
            .sum()
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Params, scale: f64) {
        let src = other.tensors();
        for ((name, dst), (oname, _, s)) in self.tensors_mut().into_iter().zip(src) {
            debug_assert_eq!(name, oname);
            for (d, &x) in dst.iter_mut().zip(s) {
                *d += scale * x;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, t) in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, _, d)| d.iter())
            .map(|x| x * x)
            .sum()
    }

    /// Adds LoRA factors to every target projection of every block and
    /// freezes the base tensors. `A` is uniform in ±1/sqrt(d_in); `B` is zero,
    /// so the adapted model initially computes exactly what the base does.
    pub fn lora_attach(&mut self, lcfg: &LoraConfig, seed: u64) -> Result<()> {
        if self.lora.is_some() {
            return Err(ModelError::LoraAlreadyAttached);
        }
        let d_model = self.final_norm.len();
        lcfg.validate(d_model)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for b in &mut self.blocks {
            for &p in &lcfg.targets {
                let lin = b.proj_mut(p);
                let (d_out, d_in) = lin.weight.dim();
                let bound = 1.0 / (d_in as f64).sqrt();
                let dist = Uniform::new(-bound, bound).expect("bound is positive");
                let a = Array2::from_shape_fn((lcfg.rank, d_in), |_| rng.sample(dist));
                lin.lora = Some(LoraPair {
                    a,
                    b: Array2::zeros((d_out, lcfg.rank)),
                });
            }
        }
        self.lora = Some(lcfg.clone());
        Ok(())
    }

    /// Folds `(alpha / rank) · B · A` into each adapted weight and removes
    /// the factors.
    pub fn lora_merge(&mut self) -> Result<()> {
        let lcfg = self.lora.take().ok_or(ModelError::NoLora)?;
        let s = lcfg.scaling();
        for b in &mut self.blocks {
            for p in Projection::ALL {
                let lin = b.proj_mut(p);
                if let Some(pair) = lin.lora.take() {
                    let delta = pair.b.dot(&pair.a);
                    lin.weight.scaled_add(s, &delta);
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn is_lora_name(name: &str) -> bool {
    name.ends_with(".lora_a") || name.ends_with(".lora_b")
}

fn entry(name: String, a: &Array2<f64>) -> (String, Vec<usize>, &[f64]) {
    (name, a.shape().to_vec(), a.as_slice().expect("contiguous"))
}

fn entry1(name: String, a: &Array1<f64>) -> (String, Vec<usize>, &[f64]) {
    (name, a.shape().to_vec(), a.as_slice().expect("contiguous"))
}

fn slice_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("contiguous")
}
