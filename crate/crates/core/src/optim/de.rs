use rand::Rng;
use rayon::prelude::*;

use super::sgd::check_dim;
use super::{Method, Objective, OptTrace, OptimizerConfig, StopReason};
use crate::error::Result;
use crate::noise::{NoiseKey, Purpose};

/// Differential evolution, best/1/bin with greedy selection.
///
/// Member 0 starts at `x0` (clipped to the bounds), the rest uniformly in
/// the box. Mutants `best + F·(x_r1 - x_r2)` are clipped to the box. Every
/// evaluation uses fresh noise; a generation costs `pop·batch` simulations,
/// the initial population included.
pub fn diff_evolution(obj: &dyn Objective, x0: &[f64], cfg: &OptimizerConfig) -> Result<OptTrace> {
    cfg.validate()?;
    check_dim(obj, x0)?;
    let dim = x0.len();
    let pop = cfg.de_pop;
    let (lo, hi) = cfg.de_bounds;
    let start = obj.sim_calls();
    let cost = pop * obj.batch();
    let base = NoiseKey::new(cfg.seed).derive(Purpose::Optimizer, &[u64::MAX]);
    let mut rng = base.rng();
    let mut trace = OptTrace::new(Method::De, x0);
    if cost > cfg.sim_budget {
        return Ok(trace);
    }

    let mut members: Vec<Vec<f64>> = Vec::with_capacity(pop);
    members.push(x0.iter().map(|v| v.clamp(lo, hi)).collect());
    for _ in 1..pop {
        members.push((0..dim).map(|_| rng.random_range(lo..hi)).collect());
    }
    let eval = |gen: usize, xs: &[Vec<f64>]| -> Result<Vec<f64>> {
        xs.par_iter()
            .enumerate()
            .map(|(i, x)| obj.loss(x, base.derive(Purpose::Optimizer, &[gen as u64, i as u64])))
            .collect()
    };
    let mut fitness = eval(0, &members)?;
    let best_of = |f: &[f64]| {
        (0..f.len())
            .min_by(|&a, &b| f[a].total_cmp(&f[b]))
            .expect("non-empty population")
    };
    let mut best = best_of(&fitness);
    trace.push(0, obj.sim_calls() - start, fitness[best], &members[best], cfg.snapshots);

    let mut gen = 0;
    loop {
        if gen >= cfg.update_cap() {
            trace.stop = StopReason::MaxUpdates;
            break;
        }
        if obj.sim_calls() - start + cost > cfg.sim_budget {
            break;
        }
        gen += 1;
        let trials: Vec<Vec<f64>> = (0..pop)
            .map(|i| {
                let (r1, r2) = distinct_pair(&mut rng, pop, i);
                let forced = rng.random_range(0..dim);
                (0..dim)
                    .map(|d| {
                        if d == forced || rng.random::<f64>() < cfg.de_recombination {
                            let m = members[best][d] + cfg.de_mutation * (members[r1][d] - members[r2][d]);
                            m.clamp(lo, hi)
                        } else {
                            members[i][d]
                        }
                    })
                    .collect()
            })
            .collect();
        let trial_fitness = eval(gen, &trials)?;
        for (i, (x, f)) in trials.into_iter().zip(trial_fitness).enumerate() {
            if f <= fitness[i] {
                members[i] = x;
                fitness[i] = f;
            }
        }
        best = best_of(&fitness);
        trace.push(
            gen,
            obj.sim_calls() - start,
            fitness[best],
            &members[best],
            cfg.snapshots,
        );
        trace.updates = gen;
        trace.final_params.clone_from(&members[best]);
    }
    trace.final_params.clone_from(&members[best]);
    Ok(trace)
}

/// Two distinct indices, both different from `i`.
fn distinct_pair<R: Rng>(rng: &mut R, n: usize, i: usize) -> (usize, usize) {
    let pick = |rng: &mut R, avoid: &[usize]| loop {
        let r = rng.random_range(0..n);
        if !avoid.contains(&r) {
            return r;
        }
    };
    let r1 = pick(rng, &[i]);
    let r2 = pick(rng, &[i, r1]);
    (r1, r2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::FnObjective;

    fn sphere(dim: usize, batch: usize) -> impl Objective {
        FnObjective::new(
            dim,
            batch,
            |x: &[f64], _| x.iter().map(|v| (v - 1.0).powi(2)).sum(),
            |_: &[f64]| vec![],
        )
    }

    #[test]
    fn best_fitness_never_increases() {
        let obj = sphere(4, 1);
        let mut cfg = OptimizerConfig::new(Method::De, 20 * 60);
        cfg.de_pop = 20;
        let trace = diff_evolution(&obj, &[0.0; 4], &cfg).unwrap();
        assert_eq!(trace.updates, 59);
        for w in trace.records.windows(2) {
            assert!(w[1].loss <= w[0].loss);
            assert!(w[1].sim_count > w[0].sim_count);
        }
        assert!(trace.best_loss < 1e-3, "{}", trace.best_loss);
        assert!(trace.final_params.iter().all(|v| (0.0..=3.0).contains(v)));
    }

    #[test]
    fn generation_costs_pop_times_batch() {
        let obj = sphere(3, 5);
        let cfg = OptimizerConfig::new(Method::De, 2500);
        let trace = diff_evolution(&obj, &[0.05; 3], &cfg).unwrap();
        assert_eq!(trace.records[0].sim_count, 500);
        assert_eq!(trace.records[0].params.as_ref().unwrap().len(), 3);
        assert_eq!(trace.records.len(), 5);
        assert_eq!(trace.updates, 4);
        assert_eq!(obj.sim_calls(), 2500);
    }

    #[test]
    fn first_member_is_start_point() {
        // A start point that is already optimal stays the best member.
        let obj = sphere(2, 1);
        let mut cfg = OptimizerConfig::new(Method::De, 10);
        cfg.de_pop = 10;
        let trace = diff_evolution(&obj, &[1.0, 1.0], &cfg).unwrap();
        assert_eq!(trace.best_loss, 0.0);
        assert_eq!(trace.best_params, vec![1.0, 1.0]);
    }

    #[test]
    fn pair_excludes_target() {
        let mut rng = NoiseKey::new(1).rng();
        for i in 0..4 {
            for _ in 0..50 {
                let (a, b) = distinct_pair(&mut rng, 4, i);
                assert!(a != i && b != i && a != b);
            }
        }
    }
}
