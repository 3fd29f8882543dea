use rayon::prelude::*;

use super::sgd::check_dim;
use super::{update_key, DivergenceGuard, Method, Objective, OptTrace, OptimizerConfig, StopReason};
use crate::error::Result;
use crate::noise::{NoiseKey, Purpose};

/// Forward-difference gradient `(L(x + h·e_k) - L(x)) / h`. Evaluation `e`
/// (0 for the base point, `k + 1` for probe `k`) runs under `key(e)`.
pub fn fd_gradient(
    obj: &dyn Objective,
    x: &[f64],
    step: f64,
    key: impl Fn(usize) -> NoiseKey + Sync,
) -> Result<(f64, Vec<f64>)> {
    let base = obj.loss(x, key(0))?;
    let grad = (0..x.len())
        .into_par_iter()
        .map(|k| {
            let mut probe = x.to_vec();
            probe[k] += step;
            Ok((obj.loss(&probe, key(k + 1))? - base) / step)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok((base, grad))
}

/// Gradient descent on forward differences; one update costs
/// `(P + 1)·batch` simulations.
pub fn fd_gd(obj: &dyn Objective, x0: &[f64], cfg: &OptimizerConfig) -> Result<OptTrace> {
    cfg.validate()?;
    check_dim(obj, x0)?;
    let start = obj.sim_calls();
    let cost = (x0.len() + 1) * obj.batch();
    let mut trace = OptTrace::new(Method::FdGd, x0);
    let mut guard = DivergenceGuard::default();
    let mut x = x0.to_vec();
    let mut u = 0;
    loop {
        if u >= cfg.update_cap() {
            trace.stop = StopReason::MaxUpdates;
            break;
        }
        if obj.sim_calls() - start + cost > cfg.sim_budget {
            break;
        }
        let key = update_key(cfg, u);
        let (loss, grad) = if cfg.fd_common_noise {
            fd_gradient(obj, &x, cfg.fd_step, |_| key)?
        } else {
            fd_gradient(obj, &x, cfg.fd_step, |e| key.derive(Purpose::Optimizer, &[e as u64]))?
        };
        trace.push(u + 1, obj.sim_calls() - start, loss, &x, cfg.snapshots);
        for (xi, gi) in x.iter_mut().zip(&grad) {
            *xi -= cfg.lr * gi;
        }
        u += 1;
        trace.updates = u;
        trace.final_params.clone_from(&x);
        guard.check(u, loss, &trace)?;
    }
    Ok(trace)
}
