//! Relaxed and hard sampling from categorical and count distributions.
//!
//! Relaxed draws use the Gumbel-Softmax reparameterization: with Gumbel
//! noise `g_i` and temperature `τ`,
//! `y_i = exp((log P_i + g_i)/τ) / Σ_k exp((log P_k + g_k)/τ)`.
//! Gumbel noise is produced as `g = -ln E` with `E ~ Exp(1)`, so for `τ = 1`
//! the sample reduces to `y_i ∝ P_i / E_i`.
//!
//! Infinite count distributions are first truncated to `n + 1` categories
//! whose last category carries the whole tail mass, then relaxed the same
//! way.

use rand::Rng;
use rand_distr::{Distribution, Exp1};

use crate::autodiff::{softmax_backward, Tape, Var};
use crate::error::{Error, Result};

/// Default tail tolerance of the truncation rule.
pub const DEFAULT_TAIL_TOL: f64 = 1e-6;
/// Default hard cap on the truncation limit `n`.
pub const DEFAULT_MAX_CATEGORIES: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncationConfig {
    pub tail_tol: f64,
    pub max_categories: usize,
}

impl Default for TruncationConfig {
    fn default() -> Self {
        TruncationConfig {
            tail_tol: DEFAULT_TAIL_TOL,
            max_categories: DEFAULT_MAX_CATEGORIES,
        }
    }
}

/// Gumbel(0, 1) draws, one per category.
pub fn gumbel_noise<R: Rng + ?Sized>(rng: &mut R, k: usize) -> Vec<f64> {
    (0..k)
        .map(|_| {
            let e: f64 = Exp1.sample(rng);
            -e.max(1e-300).ln()
        })
        .collect()
}

/// Relaxed sample from `probs` (need not be normalized) written into `out`.
///
/// Zero-probability categories stay exactly 0. One `Exp(1)` draw is consumed
/// per category regardless, so the stream position depends only on `K`.
#[inline]
pub fn relaxed_sample_into<R: Rng + ?Sized>(probs: &[f64], tau: f64, rng: &mut R, out: &mut [f64]) {
    debug_assert_eq!(probs.len(), out.len());
    if tau == 1.0 {
        let mut total = 0.0;
        for (o, &p) in out.iter_mut().zip(probs) {
            let e: f64 = Exp1.sample(rng);
            // E >= 1e-300 keeps every ratio, and their sum, finite.
            let v = p / e.max(1e-300);
            *o = v;
            total += v;
        }
        let inv = 1.0 / total;
        for o in out.iter_mut() {
            *o *= inv;
        }
        return;
    }
    let mut max = f64::NEG_INFINITY;
    for (o, &p) in out.iter_mut().zip(probs) {
        let e: f64 = Exp1.sample(rng);
        let l = if p > 0.0 {
            (p.ln() - e.max(1e-300).ln()) / tau
        } else {
            f64::NEG_INFINITY
        };
        *o = l;
        max = max.max(l);
    }
    let mut total = 0.0;
    for o in out.iter_mut() {
        *o = (*o - max).exp();
        total += *o;
    }
    let inv = 1.0 / total;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

fn write_softmax(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Relaxed categorical over probabilities recorded on a tape.
#[derive(Debug, Clone)]
pub struct RelaxedCategorical {
    pub probs: Vec<Var>,
    pub tau: f64,
    pub gumbel: Vec<f64>,
}

impl RelaxedCategorical {
    pub fn new<R: Rng + ?Sized>(probs: Vec<Var>, tau: f64, rng: &mut R) -> Self {
        let gumbel = gumbel_noise(rng, probs.len());
        RelaxedCategorical { probs, tau, gumbel }
    }

    pub fn sample(&self, tape: &mut Tape) -> Result<Vec<Var>> {
        gumbel_softmax_with_noise(tape, &self.probs, &self.gumbel, self.tau)
    }
}

/// Gumbel-Softmax sample with fresh noise from `rng`.
pub fn gumbel_softmax_sample<R: Rng + ?Sized>(
    tape: &mut Tape,
    probs: &[Var],
    tau: f64,
    rng: &mut R,
) -> Result<Vec<Var>> {
    let g = gumbel_noise(rng, probs.len());
    gumbel_softmax_with_noise(tape, probs, &g, tau)
}

/// Gumbel-Softmax sample with explicit noise; differentiable in `probs`.
///
/// Categories with `P_i = 0` are masked out of the softmax and come back as
/// constant zeros.
pub fn gumbel_softmax_with_noise(tape: &mut Tape, probs: &[Var], gumbel: &[f64], tau: f64) -> Result<Vec<Var>> {
    if gumbel.len() != probs.len() {
        return Err(Error::Dimension(format!(
            "{} noise draws for {} categories",
            gumbel.len(),
            probs.len()
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    if let Some(p) = probs.iter().find(|p| !(p.value() >= 0.0)) {
        return Err(Error::InvalidDistribution(format!(
            "negative probability {}",
            p.value()
        )));
    }
    let active: Vec<usize> = (0..probs.len()).filter(|&i| probs[i].value() > 0.0).collect();
    if active.is_empty() {
        return Err(Error::InvalidDistribution("all category probabilities are zero".into()));
    }
    let mut log_probs = Vec::with_capacity(active.len());
    for &i in &active {
        log_probs.push(tape.log(probs[i])?);
    }
    let logits: Vec<f64> = active
        .iter()
        .zip(&log_probs)
        .map(|(&i, lp)| (lp.value() + gumbel[i]) / tau)
        .collect();
    let mut y = vec![0.0; logits.len()];
    write_softmax(&logits, &mut y);
    let ys = tape.record_block(
        "gumbel_softmax",
        &log_probs,
        y,
        Box::new(move |_, y, y_adj, x_adj| softmax_backward(y, y_adj, tau, x_adj)),
    );
    let zero = tape.constant(0.0);
    let mut out = vec![zero; probs.len()];
    for (&i, v) in active.iter().zip(ys) {
        out[i] = v;
    }
    Ok(out)
}

/// Untruncated count distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CountBase {
    Poisson {
        rate: f64,
    },
    /// Exponential with the given rate, binned into timesteps of length
    /// `timestep`; duration `k ≥ 1` collects the mass of `((k-1)Δ, kΔ]`.
    DiscretizedExponential {
        rate: f64,
        timestep: f64,
    },
}

impl CountBase {
    pub fn poisson(rate: f64) -> Result<Self> {
        if !(rate > 0.0) || !rate.is_finite() {
            return Err(Error::InvalidDistribution(format!(
                "Poisson rate must be > 0, got {rate}"
            )));
        }
        Ok(CountBase::Poisson { rate })
    }

    pub fn discretized_exponential(rate: f64, timestep: f64) -> Result<Self> {
        if !(rate > 0.0) || !rate.is_finite() {
            return Err(Error::InvalidDistribution(format!(
                "exponential rate must be > 0, got {rate}"
            )));
        }
        if !(timestep > 0.0) {
            return Err(Error::InvalidDistribution(format!(
                "timestep must be > 0, got {timestep}"
            )));
        }
        Ok(CountBase::DiscretizedExponential { rate, timestep })
    }

    /// Smallest value in the support.
    pub fn support_start(&self) -> usize {
        match self {
            CountBase::Poisson { .. } => 0,
            CountBase::DiscretizedExponential { .. } => 1,
        }
    }

    /// Probability of each value `start, start + 1, …, start + len - 1`.
    pub fn pmf_prefix(&self, len: usize) -> Vec<f64> {
        match *self {
            CountBase::Poisson { rate } => {
                let mut out = Vec::with_capacity(len);
                let mut p = (-rate).exp();
                for k in 0..len {
                    if k > 0 {
                        p *= rate / k as f64;
                    }
                    out.push(p);
                }
                out
            }
            CountBase::DiscretizedExponential { rate, timestep } => {
                let q = (-rate * timestep).exp();
                let mut out = Vec::with_capacity(len);
                let mut survive = 1.0;
                for _ in 0..len {
                    out.push(survive * (1.0 - q));
                    survive *= q;
                }
                out
            }
        }
    }

    /// `P(X ≥ start + k)`.
    pub fn tail_from(&self, k: usize) -> f64 {
        match *self {
            CountBase::Poisson { .. } => {
                let head: f64 = self.pmf_prefix(k).iter().sum();
                (1.0 - head).max(0.0)
            }
            CountBase::DiscretizedExponential { rate, timestep } => (-rate * timestep * k as f64).exp(),
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            CountBase::Poisson { rate } => rate,
            CountBase::DiscretizedExponential { rate, timestep } => 1.0 / (1.0 - (-rate * timestep).exp()),
        }
    }

    /// Exact inverse-CDF draw.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        match *self {
            CountBase::Poisson { rate } => {
                let u: f64 = rng.random();
                let mut k = 0usize;
                let mut p = (-rate).exp();
                let mut cdf = p;
                while u >= cdf && k < 10_000 {
                    k += 1;
                    p *= rate / k as f64;
                    if p == 0.0 {
                        break;
                    }
                    cdf += p;
                }
                k
            }
            CountBase::DiscretizedExponential { rate, timestep } => {
                let e: f64 = Exp1.sample(rng);
                let steps = (e / (rate * timestep)).ceil();
                if steps < 1.0 {
                    1
                } else if steps > 1e9 {
                    1_000_000_000
                } else {
                    steps as usize
                }
            }
        }
    }
}

/// Count distribution truncated to `n + 1` categories; category `n` absorbs
/// the tail mass so the pmf sums to one exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedCountDist {
    base: CountBase,
    pmf: Vec<f64>,
}

impl TruncatedCountDist {
    pub fn base(&self) -> CountBase {
        self.base
    }

    /// Truncation limit `n` (index of the tail category).
    pub fn limit(&self) -> usize {
        self.pmf.len() - 1
    }

    pub fn pmf(&self) -> &[f64] {
        &self.pmf
    }

    /// Count value represented by category `c`.
    pub fn value(&self, c: usize) -> usize {
        self.base.support_start() + c
    }

    pub fn values(&self) -> Vec<f64> {
        (0..self.pmf.len()).map(|c| self.value(c) as f64).collect()
    }

    /// Hard categorical draw from the truncated pmf (category index).
    pub fn sample_category<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        hard_categorical(&self.pmf, rng)
    }

    /// Built from an explicit pmf; used for degenerate cases and tests.
    pub fn from_pmf(base: CountBase, pmf: Vec<f64>) -> Result<Self> {
        validate_simplex(&pmf)?;
        Ok(TruncatedCountDist { base, pmf })
    }
}

fn validate_simplex(p: &[f64]) -> Result<()> {
    if p.is_empty() || p.iter().any(|x| !(*x >= 0.0)) {
        return Err(Error::InvalidDistribution("pmf entries must be non-negative".into()));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidDistribution(format!("pmf sums to {s}")));
    }
    Ok(())
}

/// Smallest `n` whose tail mass beyond category `n - 1` is below
/// `cfg.tail_tol`.
pub fn truncate(base: CountBase, cfg: &TruncationConfig) -> Result<TruncatedCountDist> {
    truncate_within(base, cfg, None)
}

/// As [`truncate`], additionally merging every value above `max_value` into
/// the tail category. Values past a simulation horizon are
/// indistinguishable, so the merged category is exact for the simulation.
pub fn truncate_within(
    base: CountBase,
    cfg: &TruncationConfig,
    max_value: Option<usize>,
) -> Result<TruncatedCountDist> {
    if !(cfg.tail_tol > 0.0 && cfg.tail_tol < 1.0) {
        return Err(Error::Config(format!(
            "tail_tol must lie in (0, 1), got {}",
            cfg.tail_tol
        )));
    }
    let start = base.support_start();
    let horizon_limit = max_value.map(|m| (m + 1).saturating_sub(start).max(1));
    let mut n = 1usize;
    loop {
        if let Some(h) = horizon_limit {
            if n >= h {
                n = h;
                break;
            }
        }
        if base.tail_from(n) < cfg.tail_tol {
            break;
        }
        n += 1;
        if n > cfg.max_categories {
            return Err(Error::Config(format!(
                "truncation of {base:?} needs more than {} categories at tail_tol {}",
                cfg.max_categories, cfg.tail_tol
            )));
        }
    }
    if n > cfg.max_categories {
        return Err(Error::Config(format!(
            "truncation limit {n} exceeds cap {}",
            cfg.max_categories
        )));
    }
    let mut pmf = base.pmf_prefix(n);
    let head: f64 = pmf.iter().sum();
    pmf.push((1.0 - head).max(0.0));
    Ok(TruncatedCountDist { base, pmf })
}

/// Trip-duration distribution over `{1, 2, …}` timesteps.
pub fn discretize_exponential(rate: f64, timestep: f64, cfg: &TruncationConfig) -> Result<TruncatedCountDist> {
    truncate(CountBase::discretized_exponential(rate, timestep)?, cfg)
}

/// Relaxed count: the soft one-hot over categories and `Σ value_k · y_k`.
#[derive(Debug, Clone)]
pub struct SoftCount {
    pub count: Var,
    pub onehot: Vec<Var>,
}

/// GenGS draw from a truncated count distribution.
pub fn gengs_count_sample<R: Rng + ?Sized>(
    tape: &mut Tape,
    dist: &TruncatedCountDist,
    tau: f64,
    rng: &mut R,
) -> Result<SoftCount> {
    let probs: Vec<Var> = dist.pmf().iter().map(|&p| tape.constant(p)).collect();
    let g = gumbel_noise(rng, probs.len());
    soft_count_from_probs(tape, &probs, &dist.values(), &g, tau)
}

/// GenGS draw over category probabilities that may themselves be
/// differentiable.
pub fn soft_count_from_probs(
    tape: &mut Tape,
    probs: &[Var],
    values: &[f64],
    gumbel: &[f64],
    tau: f64,
) -> Result<SoftCount> {
    let onehot = gumbel_softmax_with_noise(tape, probs, gumbel, tau)?;
    let terms: Vec<(Var, f64)> = onehot.iter().copied().zip(values.iter().copied()).collect();
    let count = tape.linear(&terms, 0.0);
    Ok(SoftCount { count, onehot })
}

/// Inverse-CDF categorical draw over (possibly unnormalized) weights.
pub fn hard_categorical<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let u: f64 = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            last_positive = i;
            acc += w;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}
