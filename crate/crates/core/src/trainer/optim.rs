use crate::model::{NamedTensor, Params};

use super::{Result, TrainConfig, TrainError};

/// Adam with decoupled weight decay. Only trainable tensors are touched;
/// frozen tensors stay bit-identical. Weight decay skips 1-D tensors (norm
/// gains).
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,
    t: u64,
    m: Params,
    v: Params,
}

impl AdamW {
    pub fn new(params: &Params, cfg: &TrainConfig) -> Self {
        AdamW {
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            grad_clip: cfg.grad_clip,
            t: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one update with learning rate `lr`.
    pub fn step(&mut self, params: &mut Params, grads: &Params, lr: f64) {
        self.t += 1;
        let clip = match self.grad_clip {
            Some(max) => {
                let norm = trainable_norm(params, grads);
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let shapes: Vec<(bool, usize)> = params
            .tensors()
            .iter()
            .map(|(n, s, _)| (params.is_trainable(n), s.len()))
            .collect();
        let g = grads.tensors();
        let m = self.m.tensors_mut();
        let v = self.v.tensors_mut();
        for (((((_, p), (_, _, g)), (_, m)), (_, v)), (trainable, ndim)) in
            params.tensors_mut().into_iter().zip(g).zip(m).zip(v).zip(shapes)
        {
            if !trainable {
                continue;
            }
            let decay = if ndim >= 2 { self.weight_decay } else { 0.0 };
            for i in 0..p.len() {
                let gi = g[i] * clip;
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= lr * (mh / (vh.sqrt() + self.eps) + decay * p[i]);
            }
        }
    }

    /// Moment tensors for the trainable parameters plus the step count, for
    /// storing alongside a checkpoint.
    pub fn state_tensors(&self, params: &Params) -> Vec<NamedTensor> {
        let mut out = vec![NamedTensor {
            name: "optim.t".into(),
            shape: vec![1],
            data: vec![self.t as f64],
        }];
        for (prefix, buf) in [("optim.m.", &self.m), ("optim.v.", &self.v)] {
            for (name, shape, data) in buf.tensors() {
                if params.is_trainable(&name) {
                    out.push(NamedTensor {
                        name: format!("{prefix}{name}"),
                        shape,
                        data: data.to_vec(),
                    });
                }
            }
        }
        out
    }

    /// Rebuilds optimizer state saved by [`AdamW::state_tensors`].
    pub fn from_state(params: &Params, cfg: &TrainConfig, extra: &[NamedTensor]) -> Result<Self> {
        let mut opt = AdamW::new(params, cfg);
        let find = |name: &str| extra.iter().find(|t| t.name == name);
        let t = find("optim.t").ok_or_else(|| TrainError::Config("checkpoint has no optimizer state".into()))?;
        opt.t = t.data[0] as u64;
        for (prefix, buf) in [("optim.m.", &mut opt.m), ("optim.v.", &mut opt.v)] {
            for (name, dst) in buf.tensors_mut() {
                if !params.is_trainable(&name) {
                    continue;
                }
                let src = find(&format!("{prefix}{name}"))
                    .ok_or_else(|| TrainError::Config(format!("optimizer state missing {prefix}{name}")))?;
                if src.data.len() != dst.len() {
                    return Err(TrainError::Config(format!(
                        "optimizer state {prefix}{name} has wrong size"
                    )));
                }
                dst.copy_from_slice(&src.data);
            }
        }
        Ok(opt)
    }
}

fn trainable_norm(params: &Params, grads: &Params) -> f64 {
    grads
        .tensors()
        .iter()
        .filter(|(n, _, _)| params.is_trainable(n))
        .flat_map(|(_, _, d)| d.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}
