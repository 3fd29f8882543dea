//! Frozen-noise comparison of AD gradients with central differences.

use std::io::Write;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::PricingPolicy;
use crate::noise::{NoiseKey, Purpose};
use crate::simulator::Simulator;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    /// Central-difference half step.
    pub step: f64,
    pub rel_tol: f64,
    /// Absolute tolerance used where `|grad|` is below `small_grad`.
    pub abs_tol: f64,
    pub small_grad: f64,
    pub batch: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            step: 1e-4,
            rel_tol: 1e-3,
            abs_tol: 1e-7,
            small_grad: 1e-3,
            batch: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ParamCheck {
    pub index: usize,
    pub block: usize,
    pub station: usize,
    pub ad: f64,
    pub fd: f64,
    pub abs_err: f64,
    pub rel_err: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub config: GradcheckConfig,
    pub loss: f64,
    pub checks: Vec<ParamCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.checks.iter().filter(|c| !c.pass)
    }

    /// The `n` checks with the largest relative error.
    pub fn worst(&self, n: usize) -> Vec<ParamCheck> {
        let mut v = self.checks.clone();
        v.sort_by(|a, b| b.rel_err.total_cmp(&a.rel_err));
        v.truncate(n);
        v
    }

    /// Columns `index,block,station,ad,fd,abs_err,rel_err,pass`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["index", "block", "station", "ad", "fd", "abs_err", "rel_err", "pass"])?;
        for c in &self.checks {
            out.write_record([
                c.index.to_string(),
                c.block.to_string(),
                c.station.to_string(),
                c.ad.to_string(),
                c.fd.to_string(),
                c.abs_err.to_string(),
                c.rel_err.to_string(),
                c.pass.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Whether moving parameter `k` by `±margin` keeps it strictly on the same
/// side of every other discount in its block, so no choice set changes.
pub fn is_smooth_at(policy: &PricingPolicy, k: usize, margin: f64) -> bool {
    let j = policy.n_stations();
    let b = k / j;
    let v = policy.values();
    (0..j)
        .filter(|&s| b * j + s != k)
        .all(|s| (v[b * j + s] - v[k]).abs() > margin)
}

/// Up to `n` parameter indices drawn without replacement among those where
/// the batched loss is smooth at `policy`.
pub fn sample_params(policy: &PricingPolicy, n: usize, step: f64, seed: u64) -> Vec<usize> {
    let eligible: Vec<usize> = (0..policy.len())
        .filter(|&k| is_smooth_at(policy, k, 2.0 * step))
        .collect();
    if n >= eligible.len() {
        return eligible;
    }
    let mut rng = NoiseKey::new(seed).derive(Purpose::Policy, &[1]).rng();
    let mut picked: Vec<usize> = sample(&mut rng, eligible.len(), n)
        .into_iter()
        .map(|i| eligible[i])
        .collect();
    picked.sort_unstable();
    picked
}

/// Compares the AD gradient of the batched loss with central differences on
/// `indices`, every evaluation using the replica keys of `key`.
pub fn gradcheck(
    sim: &Simulator,
    policy: &PricingPolicy,
    indices: &[usize],
    key: NoiseKey,
    cfg: GradcheckConfig,
) -> Result<GradcheckReport> {
    if let Some(&k) = indices.iter().find(|&&k| k >= policy.len()) {
        return Err(Error::OutOfRange {
            what: "parameter",
            index: k,
            limit: policy.len(),
        });
    }
    let base = sim.batched_loss(policy, key, cfg.batch, true)?;
    let grad = base.gradient.expect("gradient requested");
    let j = policy.n_stations();
    let mut checks = Vec::with_capacity(indices.len());
    for &k in indices {
        let shifted = |d: f64| -> Result<f64> {
            let mut v = policy.values().to_vec();
            v[k] += d;
            Ok(sim.batched_loss(&policy.with_values(v)?, key, cfg.batch, false)?.loss)
        };
        let fd = (shifted(cfg.step)? - shifted(-cfg.step)?) / (2.0 * cfg.step);
        let ad = grad[k];
        let abs_err = (ad - fd).abs();
        let scale = ad.abs().max(fd.abs());
        let rel_err = if scale > 0.0 { abs_err / scale } else { 0.0 };
        let pass = rel_err < cfg.rel_tol || (ad.abs() < cfg.small_grad && abs_err < cfg.abs_tol);
        checks.push(ParamCheck {
            index: k,
            block: k / j,
            station: k % j,
            ad,
            fd,
            abs_err,
            rel_err,
            pass,
        });
    }
    Ok(GradcheckReport {
        config: cfg,
        loss: base.loss,
        checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoothness_uses_block_neighbours_only() {
        let p = PricingPolicy::from_values(4, 2, 3, vec![0.0, 1.0, 1.00001, 1.0, 5.0, 6.0]).unwrap();
        assert!(!is_smooth_at(&p, 1, 1e-4));
        assert!(!is_smooth_at(&p, 2, 1e-4));
        assert!(is_smooth_at(&p, 0, 1e-4));
        assert!(is_smooth_at(&p, 3, 1e-4));
        assert_eq!(sample_params(&p, 10, 1e-4, 0), vec![0, 3, 4, 5]);
        let s = sample_params(&p, 2, 1e-4, 0);
        assert_eq!(s.len(), 2);
        assert!(s.iter().all(|k| [0, 3, 4, 5].contains(k)));
    }
}
