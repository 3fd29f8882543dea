use super::{update_key, DivergenceGuard, Method, Objective, OptTrace, OptimizerConfig, StopReason};
use crate::error::{Error, Result};

/// Plain stochastic gradient descent on AD gradients: each update runs one
/// batch, so it costs `batch` simulations whatever the parameter count.
pub fn ad_sgd(obj: &dyn Objective, x0: &[f64], cfg: &OptimizerConfig) -> Result<OptTrace> {
    cfg.validate()?;
    check_dim(obj, x0)?;
    let start = obj.sim_calls();
    let mut trace = OptTrace::new(Method::AdSgd, x0);
    let mut guard = DivergenceGuard::default();
    let mut x = x0.to_vec();
    let mut u = 0;
    loop {
        if u >= cfg.update_cap() {
            trace.stop = StopReason::MaxUpdates;
            break;
        }
        if obj.sim_calls() - start + obj.batch() > cfg.sim_budget {
            break;
        }
        let (loss, grad) = obj.loss_and_grad(&x, update_key(cfg, u))?;
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

pub(super) fn check_dim(obj: &dyn Objective, x0: &[f64]) -> Result<()> {
    if x0.len() != obj.dim() {
        return Err(Error::Dimension(format!(
            "objective has {} parameters, start point {}",
            obj.dim(),
            x0.len()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::FnObjective;

    fn quadratic() -> impl Objective {
        // (x0 - 1)^2 + 3 (x1 + 2)^2
        FnObjective::new(
            2,
            5,
            |x: &[f64], _| (x[0] - 1.0).powi(2) + 3.0 * (x[1] + 2.0).powi(2),
            |x: &[f64]| vec![2.0 * (x[0] - 1.0), 6.0 * (x[1] + 2.0)],
        )
    }

    #[test]
    fn converges_on_quadratic() {
        let obj = quadratic();
        let mut cfg = OptimizerConfig::new(Method::AdSgd, 10_000);
        cfg.lr = 0.05;
        let trace = ad_sgd(&obj, &[5.0, 5.0], &cfg).unwrap();
        assert_eq!(trace.updates, 2000);
        assert_eq!(trace.sim_count, 10_000);
        assert_eq!(obj.sim_calls(), 10_000);
        assert!((trace.final_params[0] - 1.0).abs() < 1e-6);
        assert!((trace.final_params[1] + 2.0).abs() < 1e-6);
        for w in trace.records.windows(2) {
            assert_eq!(w[1].sim_count - w[0].sim_count, 5);
        }
    }

    #[test]
    fn budget_and_cap() {
        let obj = quadratic();
        let mut cfg = OptimizerConfig::new(Method::AdSgd, 14);
        let trace = ad_sgd(&obj, &[0.0, 0.0], &cfg).unwrap();
        assert_eq!(trace.updates, 2);
        assert_eq!(trace.stop, StopReason::Budget);
        cfg.sim_budget = 1000;
        cfg.max_updates = Some(3);
        let trace = ad_sgd(&obj, &[0.0, 0.0], &cfg).unwrap();
        assert_eq!(trace.updates, 3);
        assert_eq!(trace.stop, StopReason::MaxUpdates);
    }

    #[test]
    fn divergence_is_reported_with_partial_trace() {
        let obj = quadratic();
        let mut cfg = OptimizerConfig::new(Method::AdSgd, 10_000);
        cfg.lr = 1.0;
        match ad_sgd(&obj, &[2.0, 0.0], &cfg) {
            Err(Error::Diverged { trace, .. }) => {
                assert!(trace.updates >= 5 && trace.updates < 20);
                assert_eq!(trace.records.len(), trace.updates);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn wrong_dimension_rejected() {
        let obj = quadratic();
        let cfg = OptimizerConfig::new(Method::AdSgd, 10);
        assert!(ad_sgd(&obj, &[0.0], &cfg).is_err());
    }
}
