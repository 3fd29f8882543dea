use dabs_core::choice::{ChoiceModelParams, SimMode};
use dabs_core::demand::DemandField;
use dabs_core::gradcheck::{gradcheck, sample_params, GradcheckConfig};
use dabs_core::network::{PricingPolicy, StationNetwork};
use dabs_core::noise::NoiseKey;
use dabs_core::sampling::relaxed_sample_into;
use dabs_core::simulator::{CountSampling, RunOptions, SimConfig, Simulator};
use proptest::prelude::*;

const HORIZON: usize = 6;
const BLOCK: usize = 3;

fn small_sim(rows: usize, cols: usize, rate: f64, counts: CountSampling, seed: u64) -> Simulator {
    let net = StationNetwork::grid(rows, cols, 10.0, 8.0).unwrap();
    let j = net.len();
    let demand = DemandField::from_fn(
        HORIZON,
        j,
        seed,
        |t, i, k| {
            if i == k {
                0.0
            } else {
                rate * (1.0 + ((t + i + 2 * k) % 3) as f64) / j as f64
            }
        },
        |_, _, _| 1.0,
    )
    .unwrap();
    let mut cfg = SimConfig::new(HORIZON);
    cfg.counts = counts;
    cfg.batch = 2;
    Simulator::new(net, demand, ChoiceModelParams::default(), cfg).unwrap()
}

fn counts_strategy() -> impl Strategy<Value = CountSampling> {
    prop_oneof![Just(CountSampling::Exact), Just(CountSampling::Relaxed)]
}

fn policy_values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0..3.0f64, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn relaxed_samples_lie_on_the_simplex(
        probs in prop::collection::vec(0.0..1.0f64, 1..8),
        tau in 0.05..2.0f64,
        seed in any::<u64>(),
    ) {
        let total: f64 = probs.iter().sum();
        prop_assume!(total > 1e-6);
        let probs: Vec<f64> = probs.iter().map(|p| p / total).collect();
        let mut rng = NoiseKey::new(seed).rng();
        let mut out = vec![0.0; probs.len()];
        relaxed_sample_into(&probs, tau, &mut rng, &mut out);
        prop_assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for (y, p) in out.iter().zip(&probs) {
            prop_assert!(*y >= 0.0 && *y <= 1.0);
            if *p == 0.0 {
                prop_assert_eq!(*y, 0.0);
            }
        }
    }

    #[test]
    fn bikes_are_conserved(
        values in policy_values(2 * 4),
        counts in counts_strategy(),
        evaluation in any::<bool>(),
        rate in 0.1..3.0f64,
        seed in any::<u64>(),
    ) {
        let sim = small_sim(2, 2, rate, counts, seed);
        let policy = PricingPolicy::from_values(HORIZON, BLOCK, 4, values).unwrap();
        let mode = if evaluation { SimMode::Evaluation } else { SimMode::Estimation };
        let opts = RunOptions { mode, gradient: false, detail: true };
        let out = sim.run_with(&policy, NoiseKey::new(seed), opts).unwrap();
        prop_assert!(out.conservation_error() < 1e-6, "error {}", out.conservation_error());
    }

    #[test]
    fn ad_matches_finite_differences(
        values in policy_values(2 * 6),
        counts in counts_strategy(),
        rate in 0.2..2.0f64,
        seed in any::<u64>(),
    ) {
        let sim = small_sim(2, 3, rate, counts, seed);
        let policy = PricingPolicy::from_values(HORIZON, BLOCK, 6, values).unwrap();
        let idx = sample_params(&policy, 4, 1e-4, seed);
        let cfg = GradcheckConfig { batch: 2, ..GradcheckConfig::default() };
        let report = gradcheck(&sim, &policy, &idx, NoiseKey::new(seed), cfg).unwrap();
        let bad: Vec<_> = report.failures().collect();
        prop_assert!(bad.is_empty(), "{:?}", bad);
    }

    #[test]
    fn cost_is_linear_in_the_policy(
        a in policy_values(3 * 2),
        b in policy_values(3 * 2),
        s in -2.0..2.0f64,
    ) {
        let pa = PricingPolicy::from_values(7, 3, 2, a.clone()).unwrap();
        let pb = PricingPolicy::from_values(7, 3, 2, b.clone()).unwrap();
        let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + s * y).collect();
        let pm = PricingPolicy::from_values(7, 3, 2, mix).unwrap();
        prop_assert!((pm.cost() - (pa.cost() + s * pb.cost())).abs() < 1e-9);
        // The last block covers a single step.
        let last: f64 = a[4..].iter().sum();
        prop_assert!((pa.cost() - (3.0 * pa.parameter_sum() - 2.0 * last)).abs() < 1e-9);
    }
}
