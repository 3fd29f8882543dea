//! Destination choice: choice-set construction and a multinomial logit over
//! the stations in the set.
//!
//! An agent heading for station `j` at step `t` considers `j` itself and
//! every station offering a strictly higher discount. Member `s` has utility
//! `w_discount·Δp_s + w_distance·d(j, s) + asc_s`, where `Δp_s = p[t,s] − p[t,j]`
//! and `d` is measured from the intended station, and is chosen with
//! probability `softmax(u)_s`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::network::{PolicyVars, PricingPolicy, StationNetwork};
use crate::sampling::{gumbel_softmax_sample, hard_categorical};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChoiceModelParams {
    pub w_discount: f64,
    pub w_distance: f64,
    pub asc_intended: f64,
    pub asc_switch: f64,
}

impl Default for ChoiceModelParams {
    fn default() -> Self {
        ChoiceModelParams {
            w_discount: 1.0,
            w_distance: -1.0,
            asc_intended: 0.0,
            asc_switch: -1.0,
        }
    }
}

/// Stations an agent heading for `intended` considers. The intended station
/// is always the first member.
#[derive(Debug, Clone, PartialEq)]
pub struct ChoiceSet {
    intended: usize,
    members: Vec<usize>,
    delta_p: Vec<f64>,
    distance: Vec<f64>,
}

impl ChoiceSet {
    /// Choice set for the discounts `p` in force at one timestep.
    pub fn from_discounts(p: &[f64], intended: usize, network: &StationNetwork) -> Self {
        let base = p[intended];
        let mut members = vec![intended];
        let mut delta_p = vec![0.0];
        let mut distance = vec![0.0];
        for (s, &ps) in p.iter().enumerate() {
            if s != intended && ps > base {
                members.push(s);
                delta_p.push(ps - base);
                distance.push(network.distance(intended, s));
            }
        }
        ChoiceSet {
            intended,
            members,
            delta_p,
            distance,
        }
    }

    pub fn build(policy: &PricingPolicy, t: usize, intended: usize, network: &StationNetwork) -> Result<Self> {
        policy.discount_at(t, intended)?;
        let b = policy.block_of(t);
        let p: Vec<f64> = (0..policy.n_stations()).map(|s| policy.block_value(b, s)).collect();
        Ok(Self::from_discounts(&p, intended, network))
    }

    pub fn intended(&self) -> usize {
        self.intended
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn delta_p(&self) -> &[f64] {
        &self.delta_p
    }

    pub fn distances(&self) -> &[f64] {
        &self.distance
    }

    /// Utilities as plain numbers, rounded exactly like [`utilities`].
    pub fn utility_values(&self, params: &ChoiceModelParams) -> Vec<f64> {
        (0..self.len())
            .map(|k| {
                if k == 0 {
                    params.asc_intended
                } else {
                    (params.w_distance * self.distance[k] + params.asc_switch) + params.w_discount * self.delta_p[k]
                }
            })
            .collect()
    }
}

/// Utilities recorded on the tape; discount differences flow from the block
/// parameters `b` of `policy`.
pub fn utilities(
    tape: &mut Tape,
    set: &ChoiceSet,
    policy: &PolicyVars,
    block: usize,
    params: &ChoiceModelParams,
) -> Vec<Var> {
    let mut out = Vec::with_capacity(set.len());
    out.push(tape.constant(params.asc_intended));
    let pj = policy.block_var(block, set.intended);
    for k in 1..set.len() {
        let ps = policy.block_var(block, set.members[k]);
        let dp = tape.sub(ps, pj);
        let offset = params.w_distance * set.distance[k] + params.asc_switch;
        out.push(tape.linear(&[(dp, params.w_discount)], offset));
    }
    out
}

/// Multinomial logit probabilities (softmax at unit temperature).
pub fn choice_probs(tape: &mut Tape, utilities: &[Var]) -> Vec<Var> {
    tape.softmax(utilities, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimMode {
    /// Relaxed, differentiable sampling.
    Estimation,
    /// Exact stochastic sampling.
    Evaluation,
}

#[derive(Debug, Clone)]
pub enum Destination {
    /// Relaxed one-hot over the choice-set members.
    Soft(Vec<Var>),
    /// Index into the choice-set members.
    Hard(usize),
}

pub fn choose_destination<R: Rng + ?Sized>(
    tape: &mut Tape,
    probs: &[Var],
    mode: SimMode,
    tau: f64,
    rng: &mut R,
) -> Result<Destination> {
    match mode {
        SimMode::Estimation => Ok(Destination::Soft(gumbel_softmax_sample(tape, probs, tau, rng)?)),
        SimMode::Evaluation => {
            let w: Vec<f64> = probs.iter().map(|p| p.value()).collect();
            Ok(Destination::Hard(hard_categorical(&w, rng)))
        }
    }
}
