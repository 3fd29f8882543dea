//! Declarative scenario files.
//!
//! A scenario binds a station network, a demand recipe, the choice model,
//! simulation and optimizer defaults and the random seeds. Scenarios are
//! TOML documents (`schema_version = 1`); the builtins `s1`, `s2` and `s3`
//! ship as data files next to this crate.
//!
//! ```toml
//! schema_version = 1
//! id = "s2"
//! horizon = 20                 # timesteps T
//! block_len = 5                # steps per discount block
//!
//! [network]
//! grid = [5, 5]                # rows, cols; or `coords = [[x, y], ...]`
//! initial_inventory = 100.0    # number or one value per station
//! desired_final = 90.0         # number or one value per station
//!
//! [high_demand]
//! corner = [3, 3]              # or `stations = [..]` or `mask = [..]`
//!
//! [demand]
//! kind = "decay"               # or "pairs"
//! decay = 0.2
//! base = 0.1
//! noise = 0.2
//! scale = 1.0
//! duration_numerator = 5.0
//!
//! [choice]                     # optional, defaults shown
//! w_discount = 1.0
//! w_distance = -1.0
//! asc_intended = 0.0
//! asc_switch = -1.0
//!
//! [sim]                        # optional, defaults shown
//! tau = 1.0
//! batch = 5
//! tail_tol = 1e-6
//! max_categories = 64
//! counts = "exact"           # or "relaxed"
//! routing = "per_agent"        # relaxed counts only
//! min_slot_weight = 1e-9       # relaxed counts only
//!
//! [optimizer]                  # optional, defaults shown
//! ad_lr = 1e-3
//! fd_lr = 1e-5
//! fd_step = 0.1
//! fd_common_noise = true
//! de_pop = 100
//! de_mutation = 0.5
//! de_recombination = 0.7
//! de_bounds = [0.0, 3.0]
//! budget = 2500
//!
//! [seeds]
//! demand_est = 11
//! demand_test = 12
//! sim = 13
//! init = 14
//! ```
//!
//! A `[ground_truth]` table (`policy`, `runs`) marks a scenario whose
//! desired final inventories are the mean final inventories of `runs`
//! estimation-mode runs of the ground-truth policy; see
//! [`ScenarioSpec::materialize_target`].

use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::choice::{ChoiceModelParams, SimMode};
use crate::demand::{build_demand, DemandField, DemandSpec};
use crate::error::{Error, Result};
use crate::network::{PricingPolicy, StationNetwork};
use crate::noise::{NoiseKey, Purpose};
use crate::optim::{optimize, Method, OptTrace, OptimizerConfig, SimObjective};
use crate::simulator::{evaluate_policy, CountSampling, EvaluationReport, Routing, RunOptions, SimConfig, Simulator};

pub const SCHEMA_VERSION: u32 = 1;

const S1: &str = include_str!("../scenarios/s1.toml");
const S2: &str = include_str!("../scenarios/s2.toml");
const S3: &str = include_str!("../scenarios/s3.toml");

pub const BUILTIN_IDS: [&str; 3] = ["s1", "s2", "s3"];

/// A number shared by every station or one value per station.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerStation {
    Uniform(f64),
    List(Vec<f64>),
}

impl PerStation {
    fn resolve(&self, field: &str, n: usize) -> Result<Vec<f64>> {
        match self {
            PerStation::Uniform(v) => Ok(vec![*v; n]),
            PerStation::List(v) if v.len() == n => Ok(v.clone()),
            PerStation::List(v) => Err(Error::schema(field, format!("{} values for {n} stations", v.len()))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coords: Option<Vec<[f64; 2]>>,
    pub initial_inventory: PerStation,
    pub desired_final: PerStation,
}

impl NetworkSpec {
    pub fn n_stations(&self) -> usize {
        match (&self.grid, &self.coords) {
            (Some([r, c]), _) => r * c,
            (None, Some(c)) => c.len(),
            (None, None) => 0,
        }
    }

    pub fn build(&self) -> Result<StationNetwork> {
        let n = self.n_stations();
        let initial = self.initial_inventory.resolve("network.initial_inventory", n)?;
        let desired = self.desired_final.resolve("network.desired_final", n)?;
        match (&self.grid, &self.coords) {
            (Some(_), Some(_)) => Err(Error::schema("network", "give either `grid` or `coords`, not both")),
            (Some([rows, cols]), None) => {
                if rows * cols == 0 {
                    return Err(Error::schema("network.grid", "grid needs at least one station"));
                }
                let coords = (0..n).map(|s| [(s % cols) as f64, (s / cols) as f64]).collect();
                StationNetwork::new(coords, initial, desired)?.with_grid_shape(*rows, *cols)
            }
            (None, Some(coords)) => {
                if coords.is_empty() {
                    return Err(Error::schema("network.coords", "no stations"));
                }
                StationNetwork::new(coords.clone(), initial, desired)
            }
            (None, None) => Err(Error::schema("network", "missing `grid` or `coords`")),
        }
    }
}

/// Which origins follow the high-demand profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum HighDemand {
    /// The top-left `rows × cols` block of a grid.
    Corner([usize; 2]),
    Stations(Vec<usize>),
    Mask(Vec<bool>),
}

impl HighDemand {
    pub fn mask(&self, network: &StationNetwork) -> Result<Vec<bool>> {
        let n = network.len();
        match self {
            HighDemand::Corner([r, c]) => {
                let (rows, cols) = network
                    .grid_shape()
                    .ok_or_else(|| Error::schema("high_demand.corner", "needs a grid network"))?;
                if *r > rows || *c > cols {
                    return Err(Error::schema(
                        "high_demand.corner",
                        format!("{r}x{c} corner does not fit a {rows}x{cols} grid"),
                    ));
                }
                Ok((0..n).map(|s| s / cols < *r && s % cols < *c).collect())
            }
            HighDemand::Stations(ids) => {
                let mut mask = vec![false; n];
                for &s in ids {
                    if s >= n {
                        return Err(Error::schema("high_demand.stations", format!("station {s} of {n}")));
                    }
                    mask[s] = true;
                }
                Ok(mask)
            }
            HighDemand::Mask(m) if m.len() == n => Ok(m.clone()),
            HighDemand::Mask(m) => Err(Error::schema(
                "high_demand.mask",
                format!("mask has {} entries for {n} stations", m.len()),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimDefaults {
    pub tau: f64,
    pub batch: usize,
    pub tail_tol: f64,
    pub max_categories: usize,
    pub routing: Routing,
    pub min_slot_weight: f64,
    pub counts: CountSampling,
}

impl Default for SimDefaults {
    fn default() -> Self {
        let c = SimConfig::new(1);
        SimDefaults {
            tau: c.tau,
            batch: c.batch,
            tail_tol: c.tail_tol,
            max_categories: c.max_categories,
            routing: c.routing,
            min_slot_weight: c.min_slot_weight,
            counts: c.counts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerDefaults {
    pub ad_lr: f64,
    pub fd_lr: f64,
    pub fd_step: f64,
    pub fd_common_noise: bool,
    pub de_pop: usize,
    pub de_mutation: f64,
    pub de_recombination: f64,
    pub de_bounds: [f64; 2],
    pub budget: usize,
}

impl Default for OptimizerDefaults {
    fn default() -> Self {
        OptimizerDefaults {
            ad_lr: 1e-3,
            fd_lr: 1e-5,
            fd_step: 0.1,
            fd_common_noise: true,
            de_pop: 100,
            de_mutation: 0.5,
            de_recombination: 0.7,
            de_bounds: [0.0, 3.0],
            budget: 2500,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub demand_est: u64,
    pub demand_test: u64,
    pub sim: u64,
    pub init: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruth {
    pub policy: Vec<f64>,
    pub runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub schema_version: u32,
    pub id: String,
    #[serde(default)]
    pub description: String,
    pub horizon: usize,
    pub block_len: usize,
    pub network: NetworkSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub high_demand: Option<HighDemand>,
    pub demand: DemandSpec,
    #[serde(default)]
    pub choice: ChoiceModelParams,
    #[serde(default)]
    pub sim: SimDefaults,
    #[serde(default)]
    pub optimizer: OptimizerDefaults,
    pub seeds: Seeds,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<GroundTruth>,
}

/// Which demand realization to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemandSet {
    /// Used while estimating the policy.
    Estimation,
    /// Held out for evaluation.
    Test,
}

impl ScenarioSpec {
    /// A builtin id (`s1`, `s2`, `s3`) or the path of a scenario file.
    pub fn load(id_or_path: &str) -> Result<Self> {
        if let Some(text) = builtin_text(id_or_path) {
            return Self::from_toml_str(text);
        }
        let path = Path::new(id_or_path);
        if !path.exists() {
            return Err(Error::UnknownScenario(id_or_path.to_string()));
        }
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn builtin(id: &str) -> Result<Self> {
        let text = builtin_text(id).ok_or_else(|| Error::UnknownScenario(id.to_string()))?;
        Self::from_toml_str(text)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: ScenarioSpec = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            let field = field_from_toml_error(&msg).unwrap_or_else(|| "document".to_string());
            Error::schema(field, msg)
        })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize scenario: {e}")))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::schema(
                "schema_version",
                format!(
                    "unsupported version {} (expected {SCHEMA_VERSION})",
                    self.schema_version
                ),
            ));
        }
        if self.horizon == 0 {
            return Err(Error::schema("horizon", "must be at least 1"));
        }
        if self.block_len == 0 {
            return Err(Error::schema("block_len", "must be at least 1"));
        }
        let network = self.network.build()?;
        if let Some(h) = &self.high_demand {
            h.mask(&network)?;
        }
        if matches!(self.demand, DemandSpec::Decay { .. }) && self.high_demand.is_none() {
            return Err(Error::schema("high_demand", "decay demand needs a high-demand set"));
        }
        if let Some(gt) = &self.ground_truth {
            if gt.policy.len() != self.n_params() {
                return Err(Error::schema(
                    "ground_truth.policy",
                    format!("{} values for {} parameters", gt.policy.len(), self.n_params()),
                ));
            }
            if gt.runs == 0 {
                return Err(Error::schema("ground_truth.runs", "must be at least 1"));
            }
        }
        self.sim_config(SimMode::Estimation)
            .validate()
            .map_err(|e| Error::schema("sim", e.to_string()))?;
        let [lo, hi] = self.optimizer.de_bounds;
        if !(lo < hi) {
            return Err(Error::schema(
                "optimizer.de_bounds",
                "lower bound must be below upper bound",
            ));
        }
        Ok(())
    }

    pub fn n_stations(&self) -> usize {
        self.network.n_stations()
    }

    pub fn n_blocks(&self) -> usize {
        self.horizon.div_ceil(self.block_len)
    }

    /// Number of free discount parameters.
    pub fn n_params(&self) -> usize {
        self.n_blocks() * self.n_stations()
    }

    pub fn build_network(&self) -> Result<StationNetwork> {
        self.network.build()
    }

    pub fn high_demand_mask(&self, network: &StationNetwork) -> Result<Vec<bool>> {
        match &self.high_demand {
            Some(h) => h.mask(network),
            None => Ok(vec![false; network.len()]),
        }
    }

    pub fn demand_seed(&self, set: DemandSet) -> u64 {
        match set {
            DemandSet::Estimation => self.seeds.demand_est,
            DemandSet::Test => self.seeds.demand_test,
        }
    }

    pub fn build_demand(&self, set: DemandSet) -> Result<DemandField> {
        let network = self.build_network()?;
        let mask = self.high_demand_mask(&network)?;
        build_demand(&self.demand, &network, &mask, self.horizon, self.demand_seed(set))
    }

    pub fn sim_config(&self, mode: SimMode) -> SimConfig {
        SimConfig {
            horizon: self.horizon,
            mode,
            tau: self.sim.tau,
            batch: self.sim.batch,
            tail_tol: self.sim.tail_tol,
            max_categories: self.sim.max_categories,
            routing: self.sim.routing,
            min_slot_weight: self.sim.min_slot_weight,
            counts: self.sim.counts,
            record_detail: false,
            seed: self.seeds.sim,
        }
    }

    pub fn simulator(&self, set: DemandSet, mode: SimMode) -> Result<Simulator> {
        let network = self.build_network()?;
        let demand = self.build_demand(set)?;
        Simulator::new(network, demand, self.choice, self.sim_config(mode))
    }

    pub fn zero_policy(&self) -> PricingPolicy {
        PricingPolicy::zeros(self.horizon, self.block_len, self.n_stations())
    }

    pub fn policy_from(&self, values: Vec<f64>) -> Result<PricingPolicy> {
        PricingPolicy::from_values(self.horizon, self.block_len, self.n_stations(), values)
    }

    /// Initial discounts drawn uniformly for the pattern; `seed` selects the
    /// draw.
    pub fn initial_policy(&self, pattern: InitPattern, seed: u64) -> Result<PricingPolicy> {
        let (a, b) = pattern.range()?;
        let mut rng = NoiseKey::new(seed).derive(Purpose::Policy, &[]).rng();
        let values = (0..self.n_params())
            .map(|_| if a == b { a } else { rng.random_range(a..b) })
            .collect();
        self.policy_from(values)
    }

    /// Optimizer settings for `method`, with the scenario's learning rates
    /// and the given budget.
    pub fn optimizer_config(&self, method: Method, budget: usize) -> OptimizerConfig {
        let o = &self.optimizer;
        let mut cfg = OptimizerConfig::new(method, budget);
        cfg.lr = match method {
            Method::AdSgd => o.ad_lr,
            Method::FdGd => o.fd_lr,
            Method::De => o.ad_lr,
        };
        cfg.fd_step = o.fd_step;
        cfg.fd_common_noise = o.fd_common_noise;
        cfg.de_pop = o.de_pop;
        cfg.de_mutation = o.de_mutation;
        cfg.de_recombination = o.de_recombination;
        cfg.de_bounds = (o.de_bounds[0], o.de_bounds[1]);
        cfg.seed = self.seeds.sim;
        cfg
    }

    /// Mean final inventories of the ground-truth policy over
    /// `ground_truth.runs` estimation-mode runs on the estimation demand.
    pub fn ground_truth_target(&self) -> Result<Vec<f64>> {
        let gt = self
            .ground_truth
            .as_ref()
            .ok_or_else(|| Error::Config(format!("scenario `{}` has no ground truth", self.id)))?;
        let sim = self.simulator(DemandSet::Estimation, SimMode::Estimation)?;
        let policy = self.policy_from(gt.policy.clone())?;
        let key = NoiseKey::new(self.seeds.sim).derive(Purpose::Target, &[]);
        let opts = RunOptions {
            mode: SimMode::Estimation,
            gradient: false,
            detail: false,
        };
        let mut mean = vec![0.0; self.n_stations()];
        for r in 0..gt.runs {
            let o = sim.run_with(&policy, key.replica(r), opts)?;
            for (m, v) in mean.iter_mut().zip(&o.final_inventory) {
                *m += v / gt.runs as f64;
            }
        }
        Ok(mean)
    }

    /// Replaces the desired final inventories by [`Self::ground_truth_target`].
    pub fn materialize_target(&mut self) -> Result<()> {
        let target = self.ground_truth_target()?;
        self.network.desired_final = PerStation::List(target);
        Ok(())
    }
}

/// Result of [`ScenarioSpec::estimate`].
#[derive(Debug, Clone)]
pub struct Estimate {
    pub trace: OptTrace,
    /// Policy built from the final parameters.
    pub policy: PricingPolicy,
    /// Policy built from the lowest-loss parameters of the trace.
    pub best_policy: PricingPolicy,
}

impl ScenarioSpec {
    /// Optimizes the discounts on the estimation demand, starting from the
    /// given pattern drawn with `seeds.init`.
    pub fn estimate(&self, cfg: &OptimizerConfig, pattern: InitPattern) -> Result<Estimate> {
        let sim = self.simulator(DemandSet::Estimation, SimMode::Estimation)?;
        let init = self.initial_policy(pattern, self.seeds.init)?;
        let obj = SimObjective::new(&sim, init.clone(), self.sim.batch);
        let trace = optimize(&obj, init.values(), cfg)?;
        Ok(Estimate {
            policy: init.with_values(trace.final_params.clone())?,
            best_policy: init.with_values(trace.best_params.clone())?,
            trace,
        })
    }

    /// Key of the evaluation runs; shared by every policy so comparisons use
    /// the same draws.
    pub fn evaluation_key(&self) -> NoiseKey {
        NoiseKey::new(self.seeds.sim).derive(Purpose::Replica, &[u64::MAX])
    }

    /// Evaluation-mode runs of `policy` on the held-out demand.
    pub fn evaluate(&self, policy: &PricingPolicy, runs: usize) -> Result<EvaluationReport> {
        let sim = self.simulator(DemandSet::Test, SimMode::Evaluation)?;
        evaluate_policy(&sim, policy, runs, self.evaluation_key())
    }
}

fn builtin_text(id: &str) -> Option<&'static str> {
    match id {
        "s1" => Some(S1),
        "s2" => Some(S2),
        "s3" => Some(S3),
        _ => None,
    }
}

/// Best-effort name of the offending field in a TOML error message.
fn field_from_toml_error(msg: &str) -> Option<String> {
    let start = msg.find('`')?;
    let rest = &msg[start + 1..];
    let end = rest.find('`')?;
    Some(rest[..end].to_string())
}

/// Initial discount pattern.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitPattern {
    /// `U(0, 0.1)`.
    One,
    /// `U(1, 1.1)`.
    Two,
    /// `U(a, b)`.
    Custom(f64, f64),
}

impl InitPattern {
    pub fn range(&self) -> Result<(f64, f64)> {
        match *self {
            InitPattern::One => Ok((0.0, 0.1)),
            InitPattern::Two => Ok((1.0, 1.1)),
            InitPattern::Custom(a, b) if a <= b && a.is_finite() && b.is_finite() => Ok((a, b)),
            InitPattern::Custom(a, b) => Err(Error::Config(format!("pattern range ({a}, {b}) is empty"))),
        }
    }
}

impl std::fmt::Display for InitPattern {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            InitPattern::One => f.write_str("1"),
            InitPattern::Two => f.write_str("2"),
            InitPattern::Custom(a, b) => write!(f, "{a},{b}"),
        }
    }
}

impl FromStr for InitPattern {
    type Err = Error;

    /// `1`, `2` or `a,b`.
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "1" => Ok(InitPattern::One),
            "2" => Ok(InitPattern::Two),
            other => {
                let bad = || Error::Config(format!("init pattern `{other}` is not 1, 2 or `a,b`"));
                let (a, b) = other.split_once(',').ok_or_else(bad)?;
                let a: f64 = a.trim().parse().map_err(|_| bad())?;
                let b: f64 = b.trim().parse().map_err(|_| bad())?;
                let p = InitPattern::Custom(a, b);
                p.range()?;
                Ok(p)
            }
        }
    }
}
