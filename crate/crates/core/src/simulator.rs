//! The simulation loop.
//!
//! Each timestep, every origin/destination cell `(t, i, j)` releases a
//! Poisson number of agents. Every agent builds its choice set around the
//! intended station `j`, picks a destination from the logit model and rides
//! for a discretized-exponential number of steps. Inventories follow
//! `I[t+1] = I[t] - departures[t] + arrivals due at t+1`; rides that end
//! after the horizon stay in transit.
//!
//! In estimation mode every draw is relaxed. The departure count of a cell
//! becomes a soft one-hot `c` over `0..=n`, agent slot `k` is occupied with
//! weight `Σ_{m≥k} c_m`, and each slot draws its own relaxed destination and
//! duration. The final inventories, and hence the loss, are differentiable in
//! the discount parameters through the destination choices.
//!
//! All noise comes from keyed streams (see [`crate::noise`]), so a run is a
//! deterministic function of its policy and key.

use std::io::Write;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{log_softmax_values, Tape, Var};
use crate::choice::{utilities, ChoiceModelParams, ChoiceSet, SimMode};
use crate::demand::DemandField;
use crate::error::{Error, Result};
use crate::network::{PolicyVars, PricingPolicy, StationNetwork};
use crate::noise::{NoiseKey, Purpose};
use crate::sampling::{hard_categorical, relaxed_sample_into, truncate, truncate_within, CountBase, TruncationConfig};

/// How departure counts and ride durations are drawn in estimation mode.
/// Neither depends on the discounts, so both choices give the same gradient
/// path through the destination choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountSampling {
    /// Gumbel-Softmax over the truncated pmf.
    Relaxed,
    /// An exact draw, encoded as a one-hot vector.
    Exact,
}

/// How relaxed departures are routed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Routing {
    /// One destination and duration draw per agent slot.
    PerAgent,
    /// One draw per cell, carrying the whole soft count.
    PerCell,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub horizon: usize,
    pub mode: SimMode,
    pub tau: f64,
    pub batch: usize,
    pub tail_tol: f64,
    pub max_categories: usize,
    pub routing: Routing,
    /// Agent slots lighter than this are not routed (and do not depart).
    pub min_slot_weight: f64,
    pub counts: CountSampling,
    /// Record inventory trajectories and trip tables in estimation mode.
    pub record_detail: bool,
    pub seed: u64,
}

impl SimConfig {
    pub fn new(horizon: usize) -> Self {
        SimConfig {
            horizon,
            mode: SimMode::Estimation,
            tau: 1.0,
            batch: 5,
            tail_tol: crate::sampling::DEFAULT_TAIL_TOL,
            max_categories: crate::sampling::DEFAULT_MAX_CATEGORIES,
            routing: Routing::PerAgent,
            min_slot_weight: 1e-9,
            counts: CountSampling::Exact,
            record_detail: false,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.tau)));
        }
        if !(self.min_slot_weight >= 0.0) {
            return Err(Error::Config("min_slot_weight must be non-negative".into()));
        }
        Ok(())
    }

    pub fn truncation(&self) -> TruncationConfig {
        TruncationConfig {
            tail_tol: self.tail_tol,
            max_categories: self.max_categories,
        }
    }
}

/// Per-run switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    pub mode: SimMode,
    pub gradient: bool,
    pub detail: bool,
}

/// Duration pmf for rides starting `remaining` steps before the horizon.
#[derive(Debug, Clone)]
struct DurTable {
    pmf: Vec<f64>,
    /// Categories `0..in_horizon` (durations `1..=in_horizon`) end by the horizon.
    in_horizon: usize,
}

/// A demand field bound to a network, choice model and run configuration,
/// with the truncated distributions of every cell precomputed.
#[derive(Debug)]
pub struct Simulator {
    network: StationNetwork,
    demand: DemandField,
    choice: ChoiceModelParams,
    config: SimConfig,
    dep_offsets: Vec<usize>,
    dep_pmf: Vec<f64>,
    dur_index: Vec<u32>,
    dur_tables: Vec<DurTable>,
    calls: AtomicUsize,
    warned_negative: AtomicBool,
}

impl Simulator {
    pub fn new(
        network: StationNetwork,
        demand: DemandField,
        choice: ChoiceModelParams,
        config: SimConfig,
    ) -> Result<Self> {
        config.validate()?;
        let j = network.len();
        if demand.n_stations() != j {
            return Err(Error::Dimension(format!(
                "demand covers {} stations, network has {j}",
                demand.n_stations()
            )));
        }
        if demand.horizon() < config.horizon {
            return Err(Error::Dimension(format!(
                "demand covers {} steps, horizon is {}",
                demand.horizon(),
                config.horizon
            )));
        }
        let horizon = config.horizon;
        let cfg = config.truncation();
        let mut dep_offsets = Vec::with_capacity(horizon * j * j + 1);
        let mut dep_pmf = Vec::new();
        let mut dur_index = Vec::with_capacity(horizon * j * j);
        let mut dur_tables = Vec::new();
        let mut dur_lookup = std::collections::HashMap::new();
        dep_offsets.push(0);
        for t in 0..horizon {
            let remaining = horizon - t;
            for a in 0..j {
                for b in 0..j {
                    let rate = demand.departure_rate(t, a, b);
                    if rate > 0.0 {
                        dep_pmf.extend_from_slice(truncate(CountBase::poisson(rate)?, &cfg)?.pmf());
                        let dur = demand.duration_rate(t, a, b);
                        let id = match dur_lookup.get(&(dur.to_bits(), remaining)) {
                            Some(&id) => id,
                            None => {
                                let base = CountBase::discretized_exponential(dur, 1.0)?;
                                let d = truncate_within(base, &cfg, Some(remaining))?;
                                let pmf = d.pmf().to_vec();
                                let in_horizon = pmf.len().min(remaining);
                                dur_tables.push(DurTable { pmf, in_horizon });
                                let id = (dur_tables.len() - 1) as u32;
                                dur_lookup.insert((dur.to_bits(), remaining), id);
                                id
                            }
                        };
                        dur_index.push(id);
                    } else {
                        dur_index.push(u32::MAX);
                    }
                    dep_offsets.push(dep_pmf.len());
                }
            }
        }
        Ok(Simulator {
            network,
            demand,
            choice,
            config,
            dep_offsets,
            dep_pmf,
            dur_index,
            dur_tables,
            calls: AtomicUsize::new(0),
            warned_negative: AtomicBool::new(false),
        })
    }

    pub fn network(&self) -> &StationNetwork {
        &self.network
    }

    pub fn demand(&self) -> &DemandField {
        &self.demand
    }

    pub fn choice_params(&self) -> &ChoiceModelParams {
        &self.choice
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn horizon(&self) -> usize {
        self.config.horizon
    }

    pub fn n_stations(&self) -> usize {
        self.network.len()
    }

    /// Number of simulation runs executed so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn reset_calls(&self) {
        self.calls.store(0, Ordering::Relaxed);
    }

    /// A zero policy with the block layout `block_len`.
    pub fn zero_policy(&self, block_len: usize) -> PricingPolicy {
        PricingPolicy::zeros(self.config.horizon, block_len, self.n_stations())
    }

    fn check_policy(&self, policy: &PricingPolicy) -> Result<()> {
        if policy.n_stations() != self.n_stations() || policy.horizon() != self.config.horizon {
            return Err(Error::Dimension(format!(
                "policy covers {} stations over {} steps; scenario has {} stations over {} steps",
                policy.n_stations(),
                policy.horizon(),
                self.n_stations(),
                self.config.horizon
            )));
        }
        Ok(())
    }

    /// Starts a run; advance it with [`SimRun::step`].
    ///
    /// With a tape, the policy must have been recorded on it and the run's
    /// final inventories and loss are tape variables.
    pub fn start<'a>(
        &'a self,
        policy: &'a PricingPolicy,
        key: NoiseKey,
        mode: SimMode,
        detail: bool,
        tape: Option<(&'a mut Tape, &'a PolicyVars)>,
    ) -> Result<SimRun<'a>> {
        self.check_policy(policy)?;
        if tape.is_some() && mode == SimMode::Evaluation {
            return Err(Error::Config("gradients need estimation mode".into()));
        }
        self.calls.fetch_add(1, Ordering::Relaxed);
        let j = self.n_stations();
        let t_max = self.config.horizon;
        let detail = detail || mode == SimMode::Evaluation;
        let (tape, pv) = match tape {
            Some((t, p)) => (Some(t), Some(p)),
            None => (None, None),
        };
        let mut inventory = Vec::new();
        if detail {
            inventory = vec![0.0; (t_max + 1) * j];
            inventory[..j].copy_from_slice(self.network.initial_inventory());
        }
        Ok(SimRun {
            sim: self,
            policy,
            key,
            mode,
            detail,
            tape,
            pv,
            t: 0,
            contexts: (0..policy.n_blocks() * j).map(|_| None).collect(),
            outflow: vec![0.0; j],
            departed: vec![0.0; t_max],
            arrivals_total: vec![0.0; t_max + 1],
            in_transit: vec![0.0; t_max + 1],
            diverted: 0.0,
            inventory,
            pending: if detail { vec![0.0; (t_max + 1) * j] } else { Vec::new() },
            trips: if detail { vec![0.0; t_max * j * j] } else { Vec::new() },
            step_out: vec![0.0; j],
            c_buf: Vec::new(),
            occ: Vec::new(),
            ydur: Vec::new(),
            ydest: Vec::new(),
        })
    }

    /// Full run with explicit options. With `gradient`, the policy is recorded
    /// on a private tape and the outcome carries `∂loss/∂policy`.
    pub fn run_with(&self, policy: &PricingPolicy, key: NoiseKey, opts: RunOptions) -> Result<SimOutcome> {
        if opts.gradient {
            let mut tape = Tape::new();
            let pv = policy.record(&mut tape);
            let mut run = self.start(policy, key, opts.mode, opts.detail, Some((&mut tape, &pv)))?;
            run.run_to_end()?;
            let (mut outcome, vars) = run.finish()?;
            let vars = vars.expect("tape run yields variables");
            let grads = tape.backward(vars.loss);
            outcome.gradient = Some(grads.wrt(pv.vars()));
            Ok(outcome)
        } else {
            let mut run = self.start(policy, key, opts.mode, opts.detail, None)?;
            run.run_to_end()?;
            Ok(run.finish()?.0)
        }
    }

    /// Run in the configured mode; estimation runs include the gradient.
    pub fn run(&self, policy: &PricingPolicy, key: NoiseKey) -> Result<SimOutcome> {
        let mode = self.config.mode;
        self.run_with(
            policy,
            key,
            RunOptions {
                mode,
                gradient: mode == SimMode::Estimation,
                detail: self.config.record_detail,
            },
        )
    }

    /// Records one run on a caller-owned tape and returns its variables.
    pub fn run_on_tape(
        &self,
        tape: &mut Tape,
        pv: &PolicyVars,
        policy: &PricingPolicy,
        key: NoiseKey,
    ) -> Result<(SimOutcome, TapeVars)> {
        let mut run = self.start(
            policy,
            key,
            SimMode::Estimation,
            self.config.record_detail,
            Some((tape, pv)),
        )?;
        run.run_to_end()?;
        let (outcome, vars) = run.finish()?;
        Ok((outcome, vars.expect("tape run yields variables")))
    }

    /// Mean loss of `batch` independent replicas in the configured mode.
    /// Replica `r` uses `key.replica(r)`; gradients are averaged.
    pub fn batched_loss(
        &self,
        policy: &PricingPolicy,
        key: NoiseKey,
        batch: usize,
        gradient: bool,
    ) -> Result<BatchResult> {
        if batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        let opts = RunOptions {
            mode: self.config.mode,
            gradient,
            detail: false,
        };
        let outcomes: Vec<SimOutcome> = (0..batch)
            .into_par_iter()
            .map(|r| self.run_with(policy, key.replica(r), opts))
            .collect::<Result<_>>()?;
        let n = batch as f64;
        let replica_losses: Vec<f64> = outcomes.iter().map(|o| o.loss).collect();
        let loss = replica_losses.iter().sum::<f64>() / n;
        let gradient = if gradient {
            let mut g = vec![0.0; policy.len()];
            for o in &outcomes {
                for (a, b) in g.iter_mut().zip(o.gradient.as_ref().expect("gradient requested")) {
                    *a += b;
                }
            }
            g.iter_mut().for_each(|v| *v /= n);
            Some(g)
        } else {
            None
        };
        Ok(BatchResult {
            loss,
            gradient,
            replica_losses,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchResult {
    pub loss: f64,
    pub gradient: Option<Vec<f64>>,
    pub replica_losses: Vec<f64>,
}

/// Tape variables produced by a differentiable run.
#[derive(Debug, Clone)]
pub struct TapeVars {
    pub final_inventory: Vec<Var>,
    pub loss: Var,
}

/// Choice model state for one (block, intended station) pair.
struct Context {
    members: Vec<usize>,
    probs: Vec<f64>,
    log_probs: Vec<Var>,
    /// Destination-noise key and arrival weight of every relaxed slot.
    slots: Vec<(u64, f64)>,
    /// Arrival mass delivered by the horizon to each member.
    mass: Vec<f64>,
}

fn build_context(
    sim: &Simulator,
    policy: &PricingPolicy,
    tape: Option<(&mut Tape, &PolicyVars)>,
    b: usize,
    j: usize,
) -> Context {
    let p: Vec<f64> = (0..policy.n_stations()).map(|s| policy.block_value(b, s)).collect();
    let set = ChoiceSet::from_discounts(&p, j, &sim.network);
    let k = set.len();
    let (probs, log_probs) = if k == 1 {
        (vec![1.0], Vec::new())
    } else if let Some((tape, pv)) = tape {
        let u = utilities(tape, &set, pv, b, &sim.choice);
        let l = tape.log_softmax(&u);
        (l.iter().map(|v| v.value().exp()).collect(), l)
    } else {
        let l = log_softmax_values(&set.utility_values(&sim.choice));
        (l.iter().map(|v| v.exp()).collect(), Vec::new())
    };
    Context {
        members: set.members().to_vec(),
        probs,
        log_probs,
        slots: Vec::new(),
        mass: vec![0.0; k],
    }
}

fn count_sample_into(pmf: &[f64], counts: CountSampling, tau: f64, key: NoiseKey, out: &mut [f64]) {
    match counts {
        CountSampling::Relaxed => relaxed_sample_into(pmf, tau, &mut key.rng(), out),
        CountSampling::Exact => {
            out.iter_mut().for_each(|v| *v = 0.0);
            out[hard_categorical(pmf, &mut key.rng())] = 1.0;
        }
    }
}

/// An in-progress simulation.
pub struct SimRun<'a> {
    sim: &'a Simulator,
    policy: &'a PricingPolicy,
    key: NoiseKey,
    mode: SimMode,
    detail: bool,
    tape: Option<&'a mut Tape>,
    pv: Option<&'a PolicyVars>,
    t: usize,
    contexts: Vec<Option<Context>>,
    /// Departed mass per origin over the whole run.
    outflow: Vec<f64>,
    departed: Vec<f64>,
    arrivals_total: Vec<f64>,
    in_transit: Vec<f64>,
    diverted: f64,
    inventory: Vec<f64>,
    pending: Vec<f64>,
    trips: Vec<f64>,
    step_out: Vec<f64>,
    c_buf: Vec<f64>,
    occ: Vec<f64>,
    ydur: Vec<f64>,
    ydest: Vec<f64>,
}

impl SimRun<'_> {
    /// Next timestep to simulate.
    pub fn time(&self) -> usize {
        self.t
    }

    pub fn is_done(&self) -> bool {
        self.t >= self.sim.config.horizon
    }

    /// Inventory at the current time, when trajectories are recorded.
    pub fn inventory(&self) -> Option<&[f64]> {
        let j = self.sim.n_stations();
        self.detail.then(|| &self.inventory[self.t * j..(self.t + 1) * j])
    }

    pub fn run_to_end(&mut self) -> Result<()> {
        while !self.is_done() {
            self.step()?;
        }
        Ok(())
    }

    fn context_index(&mut self, b: usize, j: usize) -> usize {
        let idx = b * self.sim.n_stations() + j;
        if self.contexts[idx].is_none() {
            let tape = match (self.tape.as_deref_mut(), self.pv) {
                (Some(t), Some(p)) => Some((t, p)),
                _ => None,
            };
            self.contexts[idx] = Some(build_context(self.sim, self.policy, tape, b, j));
        }
        idx
    }

    /// Simulates timestep `time()` and advances the clock.
    pub fn step(&mut self) -> Result<()> {
        if self.is_done() {
            return Err(Error::OutOfRange {
                what: "timestep",
                index: self.t,
                limit: self.sim.config.horizon,
            });
        }
        self.step_out.iter_mut().for_each(|v| *v = 0.0);
        match self.mode {
            SimMode::Estimation => self.step_relaxed(),
            SimMode::Evaluation => self.step_hard(),
        }
        let t = self.t;
        let j = self.sim.n_stations();
        self.in_transit[t + 1] = self.in_transit[t] + self.departed[t] - self.arrivals_total[t + 1];
        if self.detail {
            for s in 0..j {
                self.inventory[(t + 1) * j + s] =
                    self.inventory[t * j + s] - self.step_out[s] + self.pending[(t + 1) * j + s];
            }
        }
        self.t += 1;
        Ok(())
    }

    fn step_relaxed(&mut self) {
        let sim = self.sim;
        let t = self.t;
        let j_n = sim.n_stations();
        let tau = sim.config.tau;
        let b = self.policy.block_of(t);
        let min_w = sim.config.min_slot_weight;
        let per_cell = sim.config.routing == Routing::PerCell;
        let counts = sim.config.counts;
        let with_tape = self.tape.is_some();
        for i in 0..j_n {
            for j in 0..j_n {
                let cell = (t * j_n + i) * j_n + j;
                let pmf = &sim.dep_pmf[sim.dep_offsets[cell]..sim.dep_offsets[cell + 1]];
                if pmf.is_empty() {
                    continue;
                }
                let coords = [t as u64, i as u64, j as u64];
                self.c_buf.resize(pmf.len(), 0.0);
                count_sample_into(
                    pmf,
                    counts,
                    tau,
                    self.key.derive(Purpose::Departures, &coords),
                    &mut self.c_buf,
                );
                // occ[k - 1] = Σ_{m ≥ k} c_m is the weight of agent slot k.
                self.occ.clear();
                let mut acc = 0.0;
                for m in (1..pmf.len()).rev() {
                    acc += self.c_buf[m];
                    self.occ.push(acc);
                }
                self.occ.reverse();
                if per_cell {
                    let total: f64 = self.occ.iter().sum();
                    self.occ.clear();
                    self.occ.push(total);
                }
                let ci = self.context_index(b, j);
                let table = &sim.dur_tables[sim.dur_index[cell] as usize];
                for slot in 0..self.occ.len() {
                    let o = self.occ[slot];
                    if o < min_w || o == 0.0 {
                        continue;
                    }
                    let k = slot as u64 + 1;
                    let slot_coords = [t as u64, i as u64, j as u64, k];
                    self.outflow[i] += o;
                    self.step_out[i] += o;
                    self.departed[t] += o;

                    self.ydur.resize(table.pmf.len(), 0.0);
                    count_sample_into(
                        &table.pmf,
                        counts,
                        tau,
                        self.key.derive(Purpose::Duration, &slot_coords),
                        &mut self.ydur,
                    );
                    let mut in_h = 0.0;
                    for c in 0..table.in_horizon {
                        in_h += self.ydur[c];
                        self.arrivals_total[t + 1 + c] += o * self.ydur[c];
                    }

                    let ctx = self.contexts[ci].as_mut().expect("context built");
                    let kk = ctx.members.len();
                    let dest_key = self.key.derive(Purpose::Destination, &slot_coords);
                    self.ydest.resize(kk, 0.0);
                    if kk == 1 {
                        self.ydest[0] = 1.0;
                    } else {
                        relaxed_sample_into(&ctx.probs, tau, &mut dest_key.rng(), &mut self.ydest);
                    }
                    let w = o * in_h;
                    for (m, y) in ctx.mass.iter_mut().zip(&self.ydest) {
                        *m += w * y;
                    }
                    if with_tape && kk > 1 && w > 0.0 {
                        ctx.slots.push((dest_key.0, w));
                    }
                    self.diverted += o * (1.0 - self.ydest[0]);
                    if self.detail {
                        for (m, &s) in ctx.members.iter().enumerate() {
                            let y = self.ydest[m];
                            self.trips[(t * j_n + i) * j_n + s] += o * y;
                            for c in 0..table.in_horizon {
                                self.pending[(t + 1 + c) * j_n + s] += o * self.ydur[c] * y;
                            }
                        }
                    }
                }
            }
        }
    }

    fn step_hard(&mut self) {
        let sim = self.sim;
        let t = self.t;
        let j_n = sim.n_stations();
        let t_max = sim.config.horizon;
        let b = self.policy.block_of(t);
        for i in 0..j_n {
            for j in 0..j_n {
                let cell = (t * j_n + i) * j_n + j;
                let pmf = &sim.dep_pmf[sim.dep_offsets[cell]..sim.dep_offsets[cell + 1]];
                if pmf.is_empty() {
                    continue;
                }
                let coords = [t as u64, i as u64, j as u64];
                let count = hard_categorical(pmf, &mut self.key.derive(Purpose::Departures, &coords).rng());
                if count == 0 {
                    continue;
                }
                let ci = self.context_index(b, j);
                let ctx = self.contexts[ci].as_ref().expect("context built");
                let dur = CountBase::DiscretizedExponential {
                    rate: sim.demand.duration_rate(t, i, j),
                    timestep: 1.0,
                };
                for a in 0..count as u64 {
                    let agent = [t as u64, i as u64, j as u64, a];
                    let m = if ctx.members.len() == 1 {
                        0
                    } else {
                        hard_categorical(&ctx.probs, &mut self.key.derive(Purpose::Destination, &agent).rng())
                    };
                    let s = ctx.members[m];
                    let d = dur.sample(&mut self.key.derive(Purpose::Duration, &agent).rng());
                    self.outflow[i] += 1.0;
                    self.step_out[i] += 1.0;
                    self.departed[t] += 1.0;
                    if m != 0 {
                        self.diverted += 1.0;
                    }
                    self.trips[(t * j_n + i) * j_n + s] += 1.0;
                    if t + d <= t_max {
                        self.arrivals_total[t + d] += 1.0;
                        self.pending[(t + d) * j_n + s] += 1.0;
                    }
                }
            }
        }
    }

    /// Completes the run: final inventories, loss and cost. A tape run also
    /// returns the corresponding tape variables.
    pub fn finish(self) -> Result<(SimOutcome, Option<TapeVars>)> {
        if !self.is_done() {
            return Err(Error::Config(format!(
                "run finished at step {} of {}",
                self.t, self.sim.config.horizon
            )));
        }
        let sim = self.sim;
        let j_n = sim.n_stations();
        let t_max = sim.config.horizon;
        let initial = sim.network.initial_inventory();
        let target = sim.network.desired_final();

        let final_inventory: Vec<f64> = if self.mode == SimMode::Evaluation {
            self.inventory[t_max * j_n..].to_vec()
        } else {
            let mut fin: Vec<f64> = (0..j_n).map(|s| initial[s] - self.outflow[s]).collect();
            for ctx in self.contexts.iter().flatten() {
                for (&s, m) in ctx.members.iter().zip(&ctx.mass) {
                    fin[s] += m;
                }
            }
            fin
        };
        let loss = final_inventory
            .iter()
            .zip(target)
            .map(|(a, b)| (b - a) * (b - a))
            .sum::<f64>()
            / j_n as f64;

        let min_inventory = if self.detail {
            self.inventory.iter().copied().fold(f64::INFINITY, f64::min)
        } else {
            final_inventory.iter().copied().fold(f64::INFINITY, f64::min)
        };
        if min_inventory < 0.0 {
            if sim.warned_negative.swap(true, Ordering::Relaxed) {
                log::debug!("inventory dropped to {min_inventory:.3}");
            } else {
                log::warn!(
                    "inventory dropped to {min_inventory:.3}; stations are not clamped at zero \
                     (further occurrences are logged at debug level)"
                );
            }
        }

        let vars = match self.tape {
            Some(tape) => {
                let tau = sim.config.tau;
                let mut terms: Vec<Vec<(Var, f64)>> = vec![Vec::new(); j_n];
                let mut offsets: Vec<f64> = (0..j_n).map(|s| initial[s] - self.outflow[s]).collect();
                for ctx in self.contexts.into_iter().flatten() {
                    if ctx.log_probs.is_empty() || ctx.slots.is_empty() {
                        for (&s, m) in ctx.members.iter().zip(&ctx.mass) {
                            offsets[s] += m;
                        }
                        continue;
                    }
                    let slots = ctx.slots;
                    let outs = tape.record_block(
                        "route",
                        &ctx.log_probs,
                        ctx.mass,
                        Box::new(move |log_p, _, m_adj, lp_adj| route_backward(log_p, m_adj, &slots, tau, lp_adj)),
                    );
                    for (&s, v) in ctx.members.iter().zip(outs) {
                        terms[s].push((v, 1.0));
                    }
                }
                let fin: Vec<Var> = (0..j_n).map(|s| tape.linear(&terms[s], offsets[s])).collect();
                let sq: Vec<(Var, f64)> = fin
                    .iter()
                    .zip(target)
                    .map(|(&v, &goal)| {
                        let r = tape.linear(&[(v, -1.0)], goal);
                        (tape.square(r), 1.0 / j_n as f64)
                    })
                    .collect();
                let loss_var = tape.linear(&sq, 0.0);
                Some(TapeVars {
                    final_inventory: fin,
                    loss: loss_var,
                })
            }
            None => None,
        };

        let outcome = SimOutcome {
            mode: self.mode,
            horizon: t_max,
            n_stations: j_n,
            total_bikes: sim.network.total_bikes(),
            final_inventory,
            inventory: self.detail.then_some(self.inventory),
            trips: self.detail.then_some(self.trips),
            departures: self.departed,
            in_transit: self.in_transit,
            diverted: self.diverted,
            loss,
            cost: self.policy.cost(),
            gradient: None,
            min_inventory,
        };
        Ok((outcome, vars))
    }
}

/// Adjoint of the arrival masses `M = Σ_slots w·y_slot` with respect to the
/// log choice probabilities. Slot samples are regenerated from their keys.
fn route_backward(log_p: &[f64], m_adj: &[f64], slots: &[(u64, f64)], tau: f64, lp_adj: &mut [f64]) {
    let probs: Vec<f64> = log_p.iter().map(|l| l.exp()).collect();
    let mut y = vec![0.0; probs.len()];
    for &(key, w) in slots {
        relaxed_sample_into(&probs, tau, &mut NoiseKey(key).rng(), &mut y);
        let dot: f64 = y.iter().zip(m_adj).map(|(a, b)| a * b).sum();
        let scale = w / tau;
        for ((la, yi), ga) in lp_adj.iter_mut().zip(&y).zip(m_adj) {
            *la += scale * yi * (ga - dot);
        }
    }
}

/// Result of one simulation run.
#[derive(Debug, Clone, PartialEq)]
pub struct SimOutcome {
    pub mode: SimMode,
    pub horizon: usize,
    pub n_stations: usize,
    pub total_bikes: f64,
    pub final_inventory: Vec<f64>,
    /// `(T+1) × J` row-major, when recorded.
    pub inventory: Option<Vec<f64>>,
    /// `T × J × J` departing mass by step, origin and chosen destination,
    /// when recorded.
    pub trips: Option<Vec<f64>>,
    /// Departing mass per step.
    pub departures: Vec<f64>,
    /// Mass riding at each of the `T + 1` inventory instants.
    pub in_transit: Vec<f64>,
    /// Departing mass that switched away from its intended station.
    pub diverted: f64,
    pub loss: f64,
    pub cost: f64,
    pub gradient: Option<Vec<f64>>,
    pub min_inventory: f64,
}

impl SimOutcome {
    pub fn inventory_at(&self, t: usize) -> Option<&[f64]> {
        let j = self.n_stations;
        self.inventory.as_ref().map(|inv| &inv[t * j..(t + 1) * j])
    }

    pub fn in_transit_at_end(&self) -> f64 {
        self.in_transit[self.horizon]
    }

    /// Largest `|Σ_j I[t, j] + in_transit[t] - total|` over recorded steps;
    /// only the final step when trajectories were not recorded.
    pub fn conservation_error(&self) -> f64 {
        let err = |inv: &[f64], transit: f64| (inv.iter().sum::<f64>() + transit - self.total_bikes).abs();
        match &self.inventory {
            Some(_) => (0..=self.horizon)
                .map(|t| err(self.inventory_at(t).unwrap(), self.in_transit[t]))
                .fold(0.0, f64::max),
            None => err(&self.final_inventory, self.in_transit_at_end()),
        }
    }
}

/// Mean squared error between `target` and `inventory`.
pub fn inventory_loss(target: &[f64], inventory: &[f64]) -> f64 {
    target
        .iter()
        .zip(inventory)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / target.len() as f64
}

/// Averages of repeated evaluation-mode runs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluationReport {
    pub runs: usize,
    pub horizon: usize,
    pub n_stations: usize,
    pub mean_final_inventory: Vec<f64>,
    /// Loss of the mean final inventory.
    pub loss: f64,
    /// Mean of the per-run losses.
    pub mean_run_loss: f64,
    pub cost: f64,
    pub parameter_sum: f64,
    pub mean_diverted: f64,
    pub mean_in_transit_at_end: f64,
    pub max_conservation_error: f64,
    /// `T × J × J` mean trips.
    #[serde(skip)]
    pub mean_trips: Vec<f64>,
}

/// Runs `runs` evaluation-mode simulations; run `r` uses `key.replica(r)`.
pub fn evaluate_policy(
    sim: &Simulator,
    policy: &PricingPolicy,
    runs: usize,
    key: NoiseKey,
) -> Result<EvaluationReport> {
    if runs == 0 {
        return Err(Error::Config("at least one evaluation run is required".into()));
    }
    let opts = RunOptions {
        mode: SimMode::Evaluation,
        gradient: false,
        detail: true,
    };
    let outcomes: Vec<SimOutcome> = (0..runs)
        .into_par_iter()
        .map(|r| sim.run_with(policy, key.replica(r), opts))
        .collect::<Result<_>>()?;
    let n = runs as f64;
    let j = sim.n_stations();
    let mut mean_final = vec![0.0; j];
    let mut mean_trips = vec![0.0; sim.horizon() * j * j];
    for o in &outcomes {
        for (a, b) in mean_final.iter_mut().zip(&o.final_inventory) {
            *a += b / n;
        }
        for (a, b) in mean_trips
            .iter_mut()
            .zip(o.trips.as_ref().expect("evaluation records trips"))
        {
            *a += b / n;
        }
    }
    Ok(EvaluationReport {
        runs,
        horizon: sim.horizon(),
        n_stations: j,
        loss: inventory_loss(sim.network().desired_final(), &mean_final),
        mean_final_inventory: mean_final,
        mean_run_loss: outcomes.iter().map(|o| o.loss).sum::<f64>() / n,
        cost: policy.cost(),
        parameter_sum: policy.parameter_sum(),
        mean_diverted: outcomes.iter().map(|o| o.diverted).sum::<f64>() / n,
        mean_in_transit_at_end: outcomes.iter().map(|o| o.in_transit_at_end()).sum::<f64>() / n,
        max_conservation_error: outcomes.iter().map(|o| o.conservation_error()).fold(0.0, f64::max),
        mean_trips,
    })
}

/// Rows `t,origin,destination,trips` for every non-zero entry of a
/// `T × J × J` trip table.
pub fn write_trips_csv<W: Write>(trips: &[f64], horizon: usize, n_stations: usize, w: W) -> Result<()> {
    if trips.len() != horizon * n_stations * n_stations {
        return Err(Error::Dimension("trip table size".into()));
    }
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["t", "origin", "destination", "trips"])?;
    for (idx, &v) in trips.iter().enumerate() {
        if v != 0.0 {
            let t = idx / (n_stations * n_stations);
            let i = idx / n_stations % n_stations;
            let s = idx % n_stations;
            wr.write_record(&[t.to_string(), i.to_string(), s.to_string(), v.to_string()])?;
        }
    }
    wr.flush()?;
    Ok(())
}

/// Rows `station,row,col,final_inventory,target,error` with
/// `error = final_inventory - target`; `row`/`col` follow the grid layout,
/// or the station coordinates when the network is not a grid.
pub fn write_inventory_error_csv<W: Write>(network: &StationNetwork, final_inventory: &[f64], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["station", "row", "col", "final_inventory", "target", "error"])?;
    for (s, (&inv, &goal)) in final_inventory.iter().zip(network.desired_final()).enumerate() {
        let (row, col) = match network.grid_shape() {
            Some((_, cols)) => ((s / cols).to_string(), (s % cols).to_string()),
            None => (network.coords()[s][1].to_string(), network.coords()[s][0].to_string()),
        };
        wr.write_record(&[
            s.to_string(),
            row,
            col,
            inv.to_string(),
            goal.to_string(),
            (inv - goal).to_string(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demand::{build_demand, DemandSpec};
    use approx::assert_relative_eq;

    fn two_station(horizon: usize) -> Simulator {
        let net = StationNetwork::grid(1, 2, 100.0, 100.0).unwrap();
        let spec = DemandSpec::Pairs {
            pairs: vec![(0, 1, 1.0), (1, 0, 0.5)],
            duration_rate: 1.0,
        };
        let demand = build_demand(&spec, &net, &[], horizon, 1).unwrap();
        Simulator::new(net, demand, ChoiceModelParams::default(), SimConfig::new(horizon)).unwrap()
    }

    fn small_grid(config: SimConfig) -> Simulator {
        let net = StationNetwork::grid(3, 3, 20.0, 18.0).unwrap();
        let mask: Vec<bool> = (0..9).map(|s| s == 0 || s == 1 || s == 3).collect();
        let spec = DemandSpec::Decay {
            decay: 0.2,
            base: 0.1,
            noise: 0.2,
            scale: 1.0,
            duration_numerator: 5.0,
        };
        let demand = build_demand(&spec, &net, &mask, config.horizon, 5).unwrap();
        Simulator::new(net, demand, ChoiceModelParams::default(), config).unwrap()
    }

    fn random_policy(horizon: usize, block_len: usize, j: usize, seed: u64) -> PricingPolicy {
        use rand::Rng;
        let mut rng = NoiseKey::new(seed).rng();
        let n = horizon.div_ceil(block_len) * j;
        PricingPolicy::from_values(
            horizon,
            block_len,
            j,
            (0..n).map(|_| rng.random::<f64>() * 3.0).collect(),
        )
        .unwrap()
    }

    fn opts(mode: SimMode, gradient: bool, detail: bool) -> RunOptions {
        RunOptions { mode, gradient, detail }
    }

    #[test]
    fn no_demand_keeps_inventory() {
        let net = StationNetwork::grid(2, 2, 7.0, 7.0).unwrap();
        let demand = DemandField::from_fn(5, 4, 0, |_, _, _| 0.0, |_, _, _| 1.0).unwrap();
        let sim = Simulator::new(net, demand, ChoiceModelParams::default(), SimConfig::new(5)).unwrap();
        let policy = PricingPolicy::zeros(5, 5, 4);
        for mode in [SimMode::Estimation, SimMode::Evaluation] {
            let o = sim
                .run_with(&policy, NoiseKey::new(1), opts(mode, false, true))
                .unwrap();
            for t in 0..=5 {
                assert_eq!(o.inventory_at(t).unwrap(), &[7.0; 4]);
            }
            assert_eq!(o.loss, 0.0);
        }
    }

    #[test]
    fn loss_arithmetic() {
        assert_eq!(inventory_loss(&[90.0, 90.0], &[100.0, 80.0]), 100.0);
        assert_eq!(inventory_loss(&[3.0, 4.0], &[3.0, 4.0]), 0.0);
    }

    #[test]
    fn conservation_in_both_modes() {
        let mut cfg = SimConfig::new(12);
        cfg.record_detail = true;
        let sim = small_grid(cfg);
        for seed in 0..3 {
            let policy = random_policy(12, 4, 9, seed);
            for mode in [SimMode::Estimation, SimMode::Evaluation] {
                let o = sim
                    .run_with(&policy, NoiseKey::new(seed), opts(mode, false, true))
                    .unwrap();
                assert_eq!(o.inventory_at(0).unwrap(), sim.network().initial_inventory());
                assert!(o.conservation_error() < 1e-9, "{mode:?} {}", o.conservation_error());
                assert!(o.departures.iter().sum::<f64>() > 0.0);
            }
        }
    }

    #[test]
    fn untracked_final_inventory_matches_trajectory() {
        let sim = small_grid(SimConfig::new(10));
        let policy = random_policy(10, 5, 9, 3);
        let key = NoiseKey::new(8);
        let a = sim
            .run_with(&policy, key, opts(SimMode::Estimation, true, true))
            .unwrap();
        let b = sim
            .run_with(&policy, key, opts(SimMode::Estimation, false, false))
            .unwrap();
        let traj = a.inventory_at(10).unwrap();
        for s in 0..9 {
            assert_relative_eq!(a.final_inventory[s], traj[s], epsilon = 1e-9);
            assert_relative_eq!(a.final_inventory[s], b.final_inventory[s], epsilon = 1e-9);
        }
        assert_relative_eq!(a.loss, b.loss, epsilon = 1e-9);
    }

    #[test]
    fn evaluation_is_reproducible() {
        let sim = small_grid(SimConfig::new(10));
        let policy = random_policy(10, 5, 9, 1);
        let a = sim
            .run_with(&policy, NoiseKey::new(2), opts(SimMode::Evaluation, false, true))
            .unwrap();
        let b = sim
            .run_with(&policy, NoiseKey::new(2), opts(SimMode::Evaluation, false, true))
            .unwrap();
        assert_eq!(a, b);
        let c = sim
            .run_with(&policy, NoiseKey::new(3), opts(SimMode::Evaluation, false, true))
            .unwrap();
        assert_ne!(a.final_inventory, c.final_inventory);
        assert!(a.final_inventory.iter().all(|v| v.fract() == 0.0));
    }

    #[test]
    fn two_station_drift_matches_poisson_means() {
        // Without discounts station 0 sends 1.0 and receives 0.5 riders per
        // step. A ride leaving at t is still out at T with probability
        // e^-(T-t), so E[I_T,0] = 100 - 20 + 0.5·Σ_m (1 - e^-m) and the mass
        // in transit at T is 1.5·Σ_m e^-m, m = 1..=20.
        let sim = two_station(20);
        let policy = PricingPolicy::zeros(20, 20, 2);
        let report = evaluate_policy(&sim, &policy, 400, NoiseKey::new(3)).unwrap();
        let late: f64 = (1..=20).map(|m| (-(m as f64)).exp()).sum();
        let expect0 = 80.0 + 0.5 * (20.0 - late);
        let expect1 = 100.0 + 20.0 * 1.0 - late - 10.0;
        // sd of a single final inventory is about sqrt(1.5 · 20) ≈ 5.5
        let tol = 4.0 * 5.5 / 20.0;
        assert!(
            (report.mean_final_inventory[0] - expect0).abs() < tol,
            "{}",
            report.mean_final_inventory[0]
        );
        assert!(
            (report.mean_final_inventory[1] - expect1).abs() < tol,
            "{}",
            report.mean_final_inventory[1]
        );
        assert!(
            (report.mean_in_transit_at_end - 1.5 * late).abs() < 0.3,
            "{}",
            report.mean_in_transit_at_end
        );
        assert!(report.max_conservation_error < 1e-9);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let sim = small_grid(SimConfig::new(10));
        let policy = random_policy(10, 5, 9, 4);
        let key = NoiseKey::new(6);
        let o = sim
            .run_with(&policy, key, opts(SimMode::Estimation, true, false))
            .unwrap();
        let g = o.gradient.unwrap();
        assert_eq!(g.len(), policy.len());
        let h = 1e-5;
        for k in [0, 3, 8, 9, 14, 17] {
            let mut up = policy.values().to_vec();
            up[k] += h;
            let mut dn = policy.values().to_vec();
            dn[k] -= h;
            let lu = sim
                .run_with(
                    &policy.with_values(up).unwrap(),
                    key,
                    opts(SimMode::Estimation, false, false),
                )
                .unwrap()
                .loss;
            let ld = sim
                .run_with(
                    &policy.with_values(dn).unwrap(),
                    key,
                    opts(SimMode::Estimation, false, false),
                )
                .unwrap()
                .loss;
            let fd = (lu - ld) / (2.0 * h);
            assert!(
                (fd - g[k]).abs() <= 1e-4 * g[k].abs().max(1.0),
                "param {k}: fd {fd} ad {}",
                g[k]
            );
        }
    }

    #[test]
    fn uniform_shift_has_zero_gradient() {
        let sim = small_grid(SimConfig::new(10));
        let policy = random_policy(10, 5, 9, 9);
        let g = sim
            .run_with(&policy, NoiseKey::new(1), opts(SimMode::Estimation, true, false))
            .unwrap()
            .gradient
            .unwrap();
        for b in 0..2 {
            let total: f64 = g[b * 9..(b + 1) * 9].iter().sum();
            assert!(
                total.abs() < 1e-9 * g.iter().map(|v| v.abs()).sum::<f64>().max(1.0),
                "{total}"
            );
        }
        assert!(g.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn equal_discounts_route_to_intended() {
        let sim = small_grid(SimConfig::new(8));
        let policy = PricingPolicy::from_values(8, 4, 9, vec![0.7; 18]).unwrap();
        for mode in [SimMode::Estimation, SimMode::Evaluation] {
            let o = sim
                .run_with(&policy, NoiseKey::new(4), opts(mode, false, true))
                .unwrap();
            assert_eq!(o.diverted, 0.0);
        }
    }

    #[test]
    fn tape_run_exposes_loss_var() {
        let sim = small_grid(SimConfig::new(6));
        let policy = random_policy(6, 3, 9, 2);
        let mut tape = Tape::new();
        let pv = policy.record(&mut tape);
        let (o, vars) = sim.run_on_tape(&mut tape, &pv, &policy, NoiseKey::new(3)).unwrap();
        assert_relative_eq!(vars.loss.value(), o.loss, epsilon = 1e-9);
        assert_eq!(vars.final_inventory.len(), 9);
    }

    #[test]
    fn stepping_by_hand() {
        let sim = two_station(3);
        let policy = PricingPolicy::zeros(3, 3, 2);
        let mut run = sim
            .start(&policy, NoiseKey::new(0), SimMode::Evaluation, true, None)
            .unwrap();
        assert_eq!(run.inventory().unwrap(), &[100.0, 100.0]);
        run.step().unwrap();
        assert_eq!(run.time(), 1);
        run.run_to_end().unwrap();
        assert!(run.step().is_err());
        let (o, vars) = run.finish().unwrap();
        assert!(vars.is_none());
        assert_eq!(o.departures.len(), 3);
    }

    #[test]
    fn batch_of_one_equals_single_run() {
        let sim = small_grid(SimConfig::new(6));
        let policy = random_policy(6, 3, 9, 5);
        let key = NoiseKey::new(10);
        let single = sim
            .run_with(&policy, key.replica(0), opts(SimMode::Estimation, true, false))
            .unwrap();
        let batch = sim.batched_loss(&policy, key, 1, true).unwrap();
        assert_eq!(batch.loss, single.loss);
        assert_eq!(batch.gradient.unwrap(), single.gradient.unwrap());
        sim.reset_calls();
        let a = sim.batched_loss(&policy, key, 5, false).unwrap();
        let b = sim.batched_loss(&policy, key, 5, false).unwrap();
        assert_eq!(a, b);
        assert_eq!(sim.calls(), 10);
    }

    #[test]
    fn per_cell_routing_conserves() {
        let mut cfg = SimConfig::new(8);
        cfg.routing = Routing::PerCell;
        let sim = small_grid(cfg);
        let policy = random_policy(8, 4, 9, 7);
        let o = sim
            .run_with(&policy, NoiseKey::new(1), opts(SimMode::Estimation, true, true))
            .unwrap();
        assert!(o.conservation_error() < 1e-9);
        assert!(o.gradient.unwrap().iter().any(|g| *g != 0.0));
    }

    #[test]
    fn mismatched_policy_rejected() {
        let sim = two_station(10);
        let policy = PricingPolicy::zeros(10, 5, 3);
        assert!(matches!(sim.run(&policy, NoiseKey::new(0)), Err(Error::Dimension(_))));
    }

    #[test]
    fn csv_exports() {
        let sim = small_grid(SimConfig::new(4));
        let policy = random_policy(4, 2, 9, 1);
        let report = evaluate_policy(&sim, &policy, 3, NoiseKey::new(0)).unwrap();
        let mut buf = Vec::new();
        write_trips_csv(&report.mean_trips, 4, 9, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,origin,destination,trips"));
        assert!(text.lines().count() > 1);
        let mut buf = Vec::new();
        write_inventory_error_csv(sim.network(), &report.mean_final_inventory, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 10);
        assert!(text.lines().nth(9).unwrap().starts_with("8,2,2,"));
    }
}
