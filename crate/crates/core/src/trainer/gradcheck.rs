use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::Params;

use super::Result;

/// Gradients smaller than this are compared in absolute rather than
/// relative terms, so coordinates the loss barely depends on do not divide
/// finite-difference noise by a near-zero magnitude.
const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub coords: usize,
    /// `(tensor, index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

fn rel_err(a: f64, n: f64) -> f64 {
    let diff = (a - n).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Compares the analytic gradient returned by `loss_fn` against central
/// differences `(f(θ+eps) − f(θ−eps)) / 2eps` on `n_coords` coordinates of
/// the trainable tensors, sampled round-robin across tensors and uniformly
/// within each.
pub fn grad_check<F>(params: &Params, loss_fn: F, n_coords: usize, eps: f64, seed: u64) -> Result<GradCheck>
where
    F: Fn(&Params) -> Result<(f64, Params)>,
{
    let (_, grads) = loss_fn(params)?;
    let names: Vec<(usize, String, usize)> = params
        .tensors()
        .iter()
        .enumerate()
        .filter(|(_, (n, _, _))| params.is_trainable(n))
        .map(|(i, (n, _, d))| (i, n.clone(), d.len()))
        .collect();
    let analytic = grads.tensors();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = params.clone();
    let mut out = GradCheck {
        max_rel_err: 0.0,
        coords: 0,
        worst: None,
    };
    if names.is_empty() {
        return Ok(out);
    }
    for k in 0..n_coords {
        let (ti, name, len) = &names[k % names.len()];
        let idx = rng.random_range(0..*len);
        let orig = params.tensors()[*ti].2[idx];
        let mut eval_at = |x: f64| -> Result<f64> {
            work.tensors_mut()[*ti].1[idx] = x;
            Ok(loss_fn(&work)?.0)
        };
        let plus = eval_at(orig + eps)?;
        let minus = eval_at(orig - eps)?;
        work.tensors_mut()[*ti].1[idx] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[*ti].2[idx];
        let e = rel_err(a, numeric);
        out.coords += 1;
        if e > out.max_rel_err || out.worst.is_none() {
            out.max_rel_err = e;
            out.worst = Some((name.clone(), idx, a, numeric));
        }
    }
    Ok(out)
}
