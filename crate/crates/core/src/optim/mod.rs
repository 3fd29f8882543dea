//! Parameter estimation over a shared simulate-and-score interface.
//!
//! Every method sees the policy only through an [`Objective`]: a batched
//! loss (and, for AD, its gradient) evaluated under an explicit noise key.
//! Budgets are counted in simulation runs, the unit the methods are
//! compared in.

mod de;
mod fd;
mod sgd;

use std::io::Write;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

pub use de::diff_evolution;
pub use fd::{fd_gd, fd_gradient};
pub use sgd::ad_sgd;

use crate::error::{Error, Result};
use crate::network::PricingPolicy;
use crate::noise::NoiseKey;
use crate::simulator::Simulator;

/// A stochastic loss over a flat parameter vector.
pub trait Objective: Sync {
    fn dim(&self) -> usize;

    /// Simulation runs consumed by one loss evaluation.
    fn batch(&self) -> usize;

    fn loss(&self, x: &[f64], key: NoiseKey) -> Result<f64>;

    fn loss_and_grad(&self, x: &[f64], key: NoiseKey) -> Result<(f64, Vec<f64>)>;

    /// Simulation runs executed so far.
    fn sim_calls(&self) -> usize;
}

/// Batched estimation-mode loss of a simulator as a function of the policy
/// block values.
pub struct SimObjective<'a> {
    sim: &'a Simulator,
    template: PricingPolicy,
    batch: usize,
}

impl<'a> SimObjective<'a> {
    pub fn new(sim: &'a Simulator, template: PricingPolicy, batch: usize) -> Self {
        SimObjective { sim, template, batch }
    }

    pub fn policy(&self, x: &[f64]) -> Result<PricingPolicy> {
        self.template.with_values(x.to_vec())
    }

    pub fn simulator(&self) -> &Simulator {
        self.sim
    }
}

impl Objective for SimObjective<'_> {
    fn dim(&self) -> usize {
        self.template.len()
    }

    fn batch(&self) -> usize {
        self.batch
    }

    fn loss(&self, x: &[f64], key: NoiseKey) -> Result<f64> {
        Ok(self.sim.batched_loss(&self.policy(x)?, key, self.batch, false)?.loss)
    }

    fn loss_and_grad(&self, x: &[f64], key: NoiseKey) -> Result<(f64, Vec<f64>)> {
        let r = self.sim.batched_loss(&self.policy(x)?, key, self.batch, true)?;
        Ok((r.loss, r.gradient.expect("gradient requested")))
    }

    fn sim_calls(&self) -> usize {
        self.sim.calls()
    }
}

/// A closed-form objective with optional analytic gradient, charged `batch`
/// simulation runs per evaluation. Used to exercise the optimizers.
pub struct FnObjective<F, G> {
    dim: usize,
    batch: usize,
    f: F,
    g: G,
    calls: AtomicUsize,
}

impl<F, G> FnObjective<F, G>
where
    F: Fn(&[f64], NoiseKey) -> f64 + Sync,
    G: Fn(&[f64]) -> Vec<f64> + Sync,
{
    pub fn new(dim: usize, batch: usize, f: F, g: G) -> Self {
        FnObjective {
            dim,
            batch,
            f,
            g,
            calls: AtomicUsize::new(0),
        }
    }
}

impl<F, G> Objective for FnObjective<F, G>
where
    F: Fn(&[f64], NoiseKey) -> f64 + Sync,
    G: Fn(&[f64]) -> Vec<f64> + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn batch(&self) -> usize {
        self.batch
    }

    fn loss(&self, x: &[f64], key: NoiseKey) -> Result<f64> {
        self.calls.fetch_add(self.batch, Ordering::Relaxed);
        Ok((self.f)(x, key))
    }

    fn loss_and_grad(&self, x: &[f64], key: NoiseKey) -> Result<(f64, Vec<f64>)> {
        self.calls.fetch_add(self.batch, Ordering::Relaxed);
        Ok(((self.f)(x, key), (self.g)(x)))
    }

    fn sim_calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "ad-sgd")]
    AdSgd,
    #[serde(rename = "fd-gd")]
    FdGd,
    #[serde(rename = "de")]
    De,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::AdSgd, Method::De, Method::FdGd];

    pub fn name(&self) -> &'static str {
        match self {
            Method::AdSgd => "ad-sgd",
            Method::FdGd => "fd-gd",
            Method::De => "de",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ad-sgd" | "ad" | "sgd" => Ok(Method::AdSgd),
            "fd-gd" | "fd" => Ok(Method::FdGd),
            "de" => Ok(Method::De),
            other => Err(Error::Config(format!("unknown method `{other}` (ad-sgd, fd-gd, de)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub method: Method,
    pub lr: f64,
    pub fd_step: f64,
    /// Share one noise key across the evaluations of an FD update.
    pub fd_common_noise: bool,
    pub de_pop: usize,
    pub de_mutation: f64,
    pub de_recombination: f64,
    pub de_bounds: (f64, f64),
    pub max_updates: Option<usize>,
    pub sim_budget: usize,
    /// Record the parameter vector after every update.
    pub snapshots: bool,
    pub seed: u64,
}

impl OptimizerConfig {
    pub fn new(method: Method, sim_budget: usize) -> Self {
        OptimizerConfig {
            method,
            lr: 1e-3,
            fd_step: 0.1,
            fd_common_noise: true,
            de_pop: 100,
            de_mutation: 0.5,
            de_recombination: 0.7,
            de_bounds: (0.0, 3.0),
            max_updates: None,
            sim_budget,
            snapshots: true,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if !(self.fd_step > 0.0) {
            return Err(Error::Config(format!("fd step must be positive, got {}", self.fd_step)));
        }
        if self.de_pop < 4 {
            return Err(Error::Config(
                "differential evolution needs a population of at least 4".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.de_recombination) {
            return Err(Error::Config("recombination rate must lie in [0, 1]".into()));
        }
        if !(self.de_bounds.0 < self.de_bounds.1) {
            return Err(Error::Config("empty differential evolution bounds".into()));
        }
        Ok(())
    }

    fn update_cap(&self) -> usize {
        self.max_updates.unwrap_or(usize::MAX)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    /// 0 for the initial evaluation of population-based methods.
    pub update: usize,
    pub sim_count: usize,
    pub loss: f64,
    pub best_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub params: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Budget,
    MaxUpdates,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptTrace {
    pub method: Method,
    pub records: Vec<TraceRecord>,
    pub initial_params: Vec<f64>,
    pub final_params: Vec<f64>,
    pub best_params: Vec<f64>,
    pub best_loss: f64,
    /// Updates (generations for DE) completed.
    pub updates: usize,
    pub sim_count: usize,
    pub stop: StopReason,
}

impl OptTrace {
    fn new(method: Method, x0: &[f64]) -> Self {
        OptTrace {
            method,
            records: Vec::new(),
            initial_params: x0.to_vec(),
            final_params: x0.to_vec(),
            best_params: x0.to_vec(),
            best_loss: f64::INFINITY,
            updates: 0,
            sim_count: 0,
            stop: StopReason::Budget,
        }
    }

    fn push(&mut self, update: usize, sim_count: usize, loss: f64, params: &[f64], snapshot: bool) {
        if loss < self.best_loss {
            self.best_loss = loss;
            self.best_params = params.to_vec();
        }
        self.sim_count = sim_count;
        self.records.push(TraceRecord {
            update,
            sim_count,
            loss,
            best_loss: self.best_loss,
            params: snapshot.then(|| params.to_vec()),
        });
    }

    pub fn initial_loss(&self) -> Option<f64> {
        self.records.first().map(|r| r.loss)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss)
    }

    /// Mean loss of the last `n` records.
    pub fn tail_mean(&self, n: usize) -> Option<f64> {
        if self.records.is_empty() {
            return None;
        }
        let n = n.clamp(1, self.records.len());
        Some(
            self.records[self.records.len() - n..]
                .iter()
                .map(|r| r.loss)
                .sum::<f64>()
                / n as f64,
        )
    }

    /// Rows `update,sim_count,loss,best_loss`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["update", "sim_count", "loss", "best_loss"])?;
        for r in &self.records {
            wr.write_record(&[
                r.update.to_string(),
                r.sim_count.to_string(),
                r.loss.to_string(),
                r.best_loss.to_string(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Aborts when the loss stays above 10x its initial value for 5
/// consecutive updates.
#[derive(Debug, Default)]
struct DivergenceGuard {
    initial: Option<f64>,
    strikes: usize,
}

impl DivergenceGuard {
    const FACTOR: f64 = 10.0;
    const PATIENCE: usize = 5;

    fn check(&mut self, update: usize, loss: f64, trace: &OptTrace) -> Result<()> {
        let initial = *self.initial.get_or_insert(loss);
        if loss > Self::FACTOR * initial || !loss.is_finite() {
            self.strikes += 1;
        } else {
            self.strikes = 0;
        }
        if self.strikes >= Self::PATIENCE {
            return Err(Error::Diverged {
                update,
                loss,
                initial,
                trace: Box::new(trace.clone()),
            });
        }
        Ok(())
    }
}

/// Runs the configured method from `x0`.
pub fn optimize(obj: &dyn Objective, x0: &[f64], cfg: &OptimizerConfig) -> Result<OptTrace> {
    match cfg.method {
        Method::AdSgd => ad_sgd(obj, x0, cfg),
        Method::FdGd => fd_gd(obj, x0, cfg),
        Method::De => diff_evolution(obj, x0, cfg),
    }
}

/// Noise key of update `u`.
fn update_key(cfg: &OptimizerConfig, u: usize) -> NoiseKey {
    NoiseKey::new(cfg.seed).derive(crate::noise::Purpose::Optimizer, &[u as u64])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert_eq!("fd".parse::<Method>().unwrap(), Method::FdGd);
        assert!("cma".parse::<Method>().is_err());
    }

    #[test]
    fn guard_trips_after_five_strikes() {
        let trace = OptTrace::new(Method::AdSgd, &[0.0]);
        let mut g = DivergenceGuard::default();
        g.check(0, 1.0, &trace).unwrap();
        for u in 1..5 {
            g.check(u, 11.0, &trace).unwrap();
        }
        g.check(5, 2.0, &trace).unwrap();
        for u in 6..10 {
            g.check(u, 50.0, &trace).unwrap();
        }
        assert!(matches!(
            g.check(10, 50.0, &trace),
            Err(Error::Diverged { update: 10, .. })
        ));
    }

    #[test]
    fn trace_csv() {
        let mut t = OptTrace::new(Method::De, &[1.0]);
        t.push(0, 5, 3.0, &[1.0], false);
        t.push(1, 10, 4.0, &[2.0], false);
        assert_eq!(t.best_loss, 3.0);
        assert_eq!(t.best_params, vec![1.0]);
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "update,sim_count,loss,best_loss\n0,5,3,3\n1,10,4,3\n");
    }
}
