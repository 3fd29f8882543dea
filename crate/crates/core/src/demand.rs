//! Spatiotemporal trip demand.
//!
//! For every timestep `t` and origin/destination pair `(i, j)` the field
//! holds the Poisson departure rate `λ_dep[t, i, j]` (expected number of
//! agents leaving `i` for `j` during step `t`) and the exponential trip
//! duration rate `λ_dur[t, i, j]` (per timestep; mean duration `1/λ_dur`).

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::StationNetwork;
use crate::noise::{NoiseKey, Purpose};

/// How a scenario's demand field is generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DemandSpec {
    /// Time-invariant rates on listed origin/destination pairs; every other
    /// pair has no demand.
    Pairs {
        /// `[origin, destination, rate]` triples.
        pairs: Vec<(usize, usize, f64)>,
        duration_rate: f64,
    },
    /// High-demand origins: `scale·(exp(-decay·t) + base + U(0, noise))`;
    /// low-demand origins: `scale·(base + U(0, noise))`. Duration rate
    /// `duration_numerator / max(d_ij, 1)`.
    Decay {
        decay: f64,
        base: f64,
        noise: f64,
        scale: f64,
        duration_numerator: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemandField {
    horizon: usize,
    n_stations: usize,
    seed: u64,
    departure: Vec<f64>,
    duration: Vec<f64>,
}

impl DemandField {
    /// Field from explicit closures; rates are validated.
    pub fn from_fn(
        horizon: usize,
        n_stations: usize,
        seed: u64,
        mut departure: impl FnMut(usize, usize, usize) -> f64,
        mut duration: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let n = horizon * n_stations * n_stations;
        let mut dep = Vec::with_capacity(n);
        let mut dur = Vec::with_capacity(n);
        for t in 0..horizon {
            for i in 0..n_stations {
                for j in 0..n_stations {
                    let d = departure(t, i, j);
                    let r = duration(t, i, j);
                    if !(d >= 0.0) || !d.is_finite() {
                        return Err(Error::Config(format!("departure rate {d} at ({t}, {i}, {j})")));
                    }
                    if !(r > 0.0) || !r.is_finite() {
                        return Err(Error::Config(format!("duration rate {r} at ({t}, {i}, {j})")));
                    }
                    dep.push(d);
                    dur.push(r);
                }
            }
        }
        Ok(DemandField {
            horizon,
            n_stations,
            seed,
            departure: dep,
            duration: dur,
        })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn n_stations(&self) -> usize {
        self.n_stations
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    #[inline]
    fn idx(&self, t: usize, i: usize, j: usize) -> usize {
        (t * self.n_stations + i) * self.n_stations + j
    }

    #[inline]
    pub fn departure_rate(&self, t: usize, i: usize, j: usize) -> f64 {
        self.departure[self.idx(t, i, j)]
    }

    #[inline]
    pub fn duration_rate(&self, t: usize, i: usize, j: usize) -> f64 {
        self.duration[self.idx(t, i, j)]
    }

    /// Expected departures from `k` at step `t`: `Σ_j λ_dep[t, k, j]`.
    pub fn expected_departures(&self, t: usize, k: usize) -> f64 {
        let lo = self.idx(t, k, 0);
        self.departure[lo..lo + self.n_stations].iter().sum()
    }

    /// Rows `t,i,j,lambda_dep,lambda_dur`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["t", "i", "j", "lambda_dep", "lambda_dur"])?;
        for t in 0..self.horizon {
            for i in 0..self.n_stations {
                for j in 0..self.n_stations {
                    wr.write_record(&[
                        t.to_string(),
                        i.to_string(),
                        j.to_string(),
                        self.departure_rate(t, i, j).to_string(),
                        self.duration_rate(t, i, j).to_string(),
                    ])?;
                }
            }
        }
        wr.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "horizon": self.horizon,
            "n_stations": self.n_stations,
            "seed": self.seed,
            "lambda_dep": self.departure,
            "lambda_dur": self.duration,
        })
    }
}

/// Builds the demand field of a scenario for the given demand seed.
///
/// `high_demand` flags origins that follow the decaying high-demand profile
/// (ignored by [`DemandSpec::Pairs`]). The uniform noise term is drawn once
/// per `(t, i, j)` from a stream keyed by the seed and the cell, so two seeds
/// differ only in those draws.
pub fn build_demand(
    spec: &DemandSpec,
    network: &StationNetwork,
    high_demand: &[bool],
    horizon: usize,
    seed: u64,
) -> Result<DemandField> {
    let j = network.len();
    match spec {
        DemandSpec::Pairs { pairs, duration_rate } => {
            let mut rates = vec![0.0; j * j];
            for &(a, b, r) in pairs {
                if a >= j || b >= j {
                    return Err(Error::schema(
                        "demand.pairs",
                        format!("pair ({a}, {b}) outside {j} stations"),
                    ));
                }
                rates[a * j + b] = r;
            }
            let dur = *duration_rate;
            DemandField::from_fn(horizon, j, seed, |_, a, b| rates[a * j + b], |_, _, _| dur)
        }
        DemandSpec::Decay {
            decay,
            base,
            noise,
            scale,
            duration_numerator,
        } => {
            if high_demand.len() != j {
                return Err(Error::schema(
                    "high_demand",
                    format!("mask has {} entries for {j} stations", high_demand.len()),
                ));
            }
            let key = NoiseKey::new(seed);
            DemandField::from_fn(
                horizon,
                j,
                seed,
                |t, a, b| {
                    let u: f64 = key
                        .derive(Purpose::Demand, &[t as u64, a as u64, b as u64])
                        .rng()
                        .random();
                    let peak = if high_demand[a] { (-decay * t as f64).exp() } else { 0.0 };
                    scale * (peak + base + noise * u)
                },
                |_, a, b| duration_numerator / network.distance(a, b).max(1.0),
            )
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decay(scale: f64) -> DemandSpec {
        DemandSpec::Decay {
            decay: 0.2,
            base: 0.1,
            noise: 0.2,
            scale,
            duration_numerator: 5.0,
        }
    }

    fn corner_mask() -> Vec<bool> {
        (0..25).map(|s| s % 5 < 3 && s / 5 < 3).collect()
    }

    #[test]
    fn two_station_rates() {
        let net = StationNetwork::grid(1, 2, 100.0, 0.0).unwrap();
        let spec = DemandSpec::Pairs {
            pairs: vec![(0, 1, 1.0), (1, 0, 0.5)],
            duration_rate: 1.0,
        };
        for seed in [1, 99] {
            let d = build_demand(&spec, &net, &[], 100, seed).unwrap();
            assert_eq!(d.departure_rate(5, 0, 1), 1.0);
            assert_eq!(d.departure_rate(77, 1, 0), 0.5);
            assert_eq!(d.departure_rate(3, 0, 0), 0.0);
            assert_eq!(d.duration_rate(3, 0, 0), 1.0);
            assert_eq!(d.expected_departures(10, 0), 1.0);
        }
    }

    #[test]
    fn decay_profile_ranges() {
        let net = StationNetwork::grid(5, 5, 100.0, 90.0).unwrap();
        let mask = corner_mask();
        let d = build_demand(&decay(1.0), &net, &mask, 20, 3).unwrap();
        for j in 0..25 {
            let v = d.departure_rate(0, 0, j);
            assert!((1.1..=1.3).contains(&v), "{v}");
            let low = d.departure_rate(4, 24, j);
            assert!((0.1..=0.3).contains(&low));
        }
        let d3 = build_demand(&decay(0.1), &net, &mask, 20, 3).unwrap();
        for t in 0..20 {
            for i in 0..25 {
                for j in 0..25 {
                    let a = d.departure_rate(t, i, j);
                    let b = d3.departure_rate(t, i, j);
                    assert!((b - a / 10.0).abs() < 1e-15);
                    if !mask[i] {
                        assert!((0.01..=0.03).contains(&b));
                    }
                }
            }
        }
        // 5 / max(d, 1): round trips are treated like unit-distance trips.
        assert_eq!(d.duration_rate(0, 0, 0), 5.0);
        assert_eq!(d.duration_rate(0, 0, 24), 5.0 / 8.0);
    }

    #[test]
    fn seeds_only_change_noise() {
        let net = StationNetwork::grid(5, 5, 100.0, 90.0).unwrap();
        let mask = corner_mask();
        let a = build_demand(&decay(1.0), &net, &mask, 20, 11).unwrap();
        let b = build_demand(&decay(1.0), &net, &mask, 20, 11).unwrap();
        assert_eq!(a, b);
        let c = build_demand(&decay(1.0), &net, &mask, 20, 12).unwrap();
        assert_ne!(a, c);
        for t in 0..20 {
            for i in 0..25 {
                let peak = if mask[i] { (-0.2 * t as f64).exp() } else { 0.0 };
                for j in 0..25 {
                    let na = a.departure_rate(t, i, j) - peak - 0.1;
                    let nc = c.departure_rate(t, i, j) - peak - 0.1;
                    assert!((-1e-12..=0.2 + 1e-12).contains(&na));
                    assert!((-1e-12..=0.2 + 1e-12).contains(&nc));
                    assert_eq!(a.duration_rate(t, i, j), c.duration_rate(t, i, j));
                }
            }
        }
    }

    #[test]
    fn mask_size_checked() {
        let net = StationNetwork::grid(5, 5, 100.0, 90.0).unwrap();
        assert!(build_demand(&decay(1.0), &net, &[true; 3], 20, 1).is_err());
    }

    #[test]
    fn csv_dump_has_one_row_per_cell() {
        let net = StationNetwork::grid(1, 2, 100.0, 0.0).unwrap();
        let spec = DemandSpec::Pairs {
            pairs: vec![(0, 1, 1.0)],
            duration_rate: 1.0,
        };
        let d = build_demand(&spec, &net, &[], 3, 0).unwrap();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 3 * 4);
        assert!(text.starts_with("t,i,j,lambda_dep,lambda_dur"));
        assert_eq!(d.to_json()["lambda_dep"].as_array().unwrap().len(), 12);
    }
}
