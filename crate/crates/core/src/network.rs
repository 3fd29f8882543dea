//! Station geometry, inventories and the block-constant pricing policy.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

/// `Σ_k |a_k - b_k|`.
pub fn manhattan(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "coordinates of different dimensionality");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct StationNetwork {
    coords: Vec<[f64; 2]>,
    distance: Vec<f64>,
    /// `(rows, cols)` when stations form a grid, station `r * cols + c`.
    grid: Option<(usize, usize)>,
    initial_inventory: Vec<f64>,
    desired_final: Vec<f64>,
}

impl StationNetwork {
    pub fn new(coords: Vec<[f64; 2]>, initial_inventory: Vec<f64>, desired_final: Vec<f64>) -> Result<Self> {
        let j = coords.len();
        if j == 0 {
            return Err(Error::Dimension("network needs at least one station".into()));
        }
        if initial_inventory.len() != j || desired_final.len() != j {
            return Err(Error::Dimension(format!(
                "{j} stations but {} initial and {} desired inventories",
                initial_inventory.len(),
                desired_final.len()
            )));
        }
        let mut distance = vec![0.0; j * j];
        for a in 0..j {
            for b in 0..j {
                distance[a * j + b] = manhattan(&coords[a], &coords[b]);
            }
        }
        Ok(StationNetwork {
            coords,
            distance,
            grid: None,
            initial_inventory,
            desired_final,
        })
    }

    /// Unit-spaced `rows × cols` grid.
    pub fn grid(rows: usize, cols: usize, initial: f64, desired: f64) -> Result<Self> {
        let coords = (0..rows * cols)
            .map(|s| [(s % cols) as f64, (s / cols) as f64])
            .collect();
        let n = rows * cols;
        let mut net = Self::new(coords, vec![initial; n], vec![desired; n])?;
        net.grid = Some((rows, cols));
        Ok(net)
    }

    pub fn with_grid_shape(mut self, rows: usize, cols: usize) -> Result<Self> {
        if rows * cols != self.len() {
            return Err(Error::Dimension(format!(
                "grid {rows}x{cols} does not hold {} stations",
                self.len()
            )));
        }
        self.grid = Some((rows, cols));
        Ok(self)
    }

    pub fn with_desired_final(mut self, desired: Vec<f64>) -> Result<Self> {
        if desired.len() != self.len() {
            return Err(Error::Dimension("desired inventory length".into()));
        }
        self.desired_final = desired;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    pub fn grid_shape(&self) -> Option<(usize, usize)> {
        self.grid
    }

    #[inline]
    pub fn distance(&self, a: usize, b: usize) -> f64 {
        self.distance[a * self.len() + b]
    }

    pub fn initial_inventory(&self) -> &[f64] {
        &self.initial_inventory
    }

    pub fn desired_final(&self) -> &[f64] {
        &self.desired_final
    }

    pub fn total_bikes(&self) -> f64 {
        self.initial_inventory.iter().sum()
    }
}

/// Block-constant discounts `p[t, j] = blocks[t / block_len, j]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PricingPolicy {
    n_blocks: usize,
    n_stations: usize,
    block_len: usize,
    horizon: usize,
    /// Row-major `n_blocks × n_stations`.
    values: Vec<f64>,
}

impl PricingPolicy {
    pub fn zeros(horizon: usize, block_len: usize, n_stations: usize) -> Self {
        let n_blocks = horizon.div_ceil(block_len.max(1));
        PricingPolicy {
            n_blocks,
            n_stations,
            block_len: block_len.max(1),
            horizon,
            values: vec![0.0; n_blocks * n_stations],
        }
    }

    pub fn from_values(horizon: usize, block_len: usize, n_stations: usize, values: Vec<f64>) -> Result<Self> {
        let mut p = Self::zeros(horizon, block_len, n_stations);
        if values.len() != p.values.len() {
            return Err(Error::Dimension(format!(
                "policy expects {} values ({} blocks x {} stations), got {}",
                p.values.len(),
                p.n_blocks,
                n_stations,
                values.len()
            )));
        }
        p.values = values;
        Ok(p)
    }

    pub fn n_blocks(&self) -> usize {
        self.n_blocks
    }

    pub fn n_stations(&self) -> usize {
        self.n_stations
    }

    pub fn block_len(&self) -> usize {
        self.block_len
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Number of free parameters (`blocks × stations`).
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::from_values(self.horizon, self.block_len, self.n_stations, values)
    }

    #[inline]
    pub fn block_of(&self, t: usize) -> usize {
        t / self.block_len
    }

    #[inline]
    pub fn block_value(&self, b: usize, j: usize) -> f64 {
        self.values[b * self.n_stations + j]
    }

    /// Timesteps covered by block `b`.
    pub fn block_steps(&self, b: usize) -> std::ops::Range<usize> {
        let lo = b * self.block_len;
        lo..((b + 1) * self.block_len).min(self.horizon)
    }

    pub fn discount_at(&self, t: usize, j: usize) -> Result<f64> {
        self.check(t, j)?;
        Ok(self.block_value(self.block_of(t), j))
    }

    fn check(&self, t: usize, j: usize) -> Result<()> {
        if t >= self.horizon {
            return Err(Error::OutOfRange {
                what: "timestep",
                index: t,
                limit: self.horizon,
            });
        }
        if j >= self.n_stations {
            return Err(Error::OutOfRange {
                what: "station",
                index: j,
                limit: self.n_stations,
            });
        }
        Ok(())
    }

    /// Operator cost `Σ_t Σ_j p[t, j]` over every timestep of the horizon.
    pub fn cost(&self) -> f64 {
        (0..self.n_blocks)
            .map(|b| {
                let steps = self.block_steps(b).len() as f64;
                steps
                    * self.values[b * self.n_stations..(b + 1) * self.n_stations]
                        .iter()
                        .sum::<f64>()
            })
            .sum()
    }

    /// Sum of the free parameters, each block counted once.
    pub fn parameter_sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn negative_count(&self) -> usize {
        self.values.iter().filter(|v| **v < 0.0).count()
    }

    /// Records every block value as a differentiable input.
    pub fn record(&self, tape: &mut Tape) -> PolicyVars {
        PolicyVars {
            shape: self.clone(),
            vars: self.values.iter().map(|&v| tape.input(v)).collect(),
        }
    }

    /// CSV with header `block,station,value`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["block", "station", "value"])?;
        for b in 0..self.n_blocks {
            for j in 0..self.n_stations {
                wr.write_record(&[b.to_string(), j.to_string(), format!("{}", self.block_value(b, j))])?;
            }
        }
        wr.flush()?;
        Ok(())
    }

    /// Reads a `block,station,value` CSV into a policy of the given shape;
    /// every cell must be present exactly once.
    pub fn read_csv<R: Read>(r: R, horizon: usize, block_len: usize, n_stations: usize) -> Result<Self> {
        let mut p = Self::zeros(horizon, block_len, n_stations);
        let mut seen = vec![false; p.values.len()];
        let mut rd = csv::Reader::from_reader(r);
        for rec in rd.records() {
            let rec = rec?;
            if rec.len() < 3 {
                return Err(Error::Dimension(format!("policy row has {} fields", rec.len())));
            }
            let parse = |i: usize| -> Result<f64> {
                rec[i]
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Dimension(format!("policy field `{}`: {e}", &rec[i])))
            };
            let (b, j, v) = (parse(0)? as usize, parse(1)? as usize, parse(2)?);
            if b >= p.n_blocks || j >= n_stations {
                return Err(Error::Dimension(format!(
                    "policy cell ({b}, {j}) outside {} blocks x {n_stations} stations",
                    p.n_blocks
                )));
            }
            let idx = b * n_stations + j;
            if seen[idx] {
                return Err(Error::Dimension(format!("duplicate policy cell ({b}, {j})")));
            }
            seen[idx] = true;
            p.values[idx] = v;
        }
        if let Some(miss) = seen.iter().position(|s| !s) {
            return Err(Error::Dimension(format!(
                "policy file misses cell ({}, {}); expected {} blocks x {n_stations} stations",
                miss / n_stations,
                miss % n_stations,
                p.n_blocks
            )));
        }
        Ok(p)
    }
}

/// Policy parameters recorded on a tape.
#[derive(Debug, Clone)]
pub struct PolicyVars {
    shape: PricingPolicy,
    vars: Vec<Var>,
}

impl PolicyVars {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn block_var(&self, b: usize, j: usize) -> Var {
        self.vars[b * self.shape.n_stations + j]
    }

    pub fn discount_at(&self, t: usize, j: usize) -> Result<Var> {
        self.shape.check(t, j)?;
        Ok(self.block_var(self.shape.block_of(t), j))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manhattan_examples() {
        assert_eq!(manhattan(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert_eq!(manhattan(&[0.0, 0.0], &[2.0, 3.0]), 5.0);
        assert_eq!(manhattan(&[1.0, 4.0], &[4.0, 1.0]), 6.0);
    }

    #[test]
    fn grid_distances_are_a_metric() {
        let net = StationNetwork::grid(4, 3, 100.0, 90.0).unwrap();
        let n = net.len();
        for a in 0..n {
            assert_eq!(net.distance(a, a), 0.0);
            for b in 0..n {
                assert_eq!(net.distance(a, b), net.distance(b, a));
                for c in 0..n {
                    assert!(net.distance(a, c) <= net.distance(a, b) + net.distance(b, c));
                }
            }
        }
        // station 5 = row 1, col 2
        assert_eq!(net.distance(0, 5), 3.0);
    }

    #[test]
    fn discount_lookup_is_block_constant() {
        let values: Vec<f64> = (0..20).map(|v| v as f64).collect();
        let p = PricingPolicy::from_values(20, 5, 5, values).unwrap();
        assert_eq!(p.discount_at(7, 3).unwrap(), p.block_value(1, 3));
        assert_eq!(p.discount_at(0, 2).unwrap(), p.block_value(0, 2));
        assert!(matches!(p.discount_at(20, 0), Err(Error::OutOfRange { .. })));
        assert!(matches!(p.discount_at(0, 5), Err(Error::OutOfRange { .. })));

        let inv = PricingPolicy::from_values(100, 100, 2, vec![0.5, 2.5]).unwrap();
        for t in 0..100 {
            assert_eq!(inv.discount_at(t, 1).unwrap(), 2.5);
        }
    }

    #[test]
    fn cost_counts_every_timestep() {
        assert_eq!(PricingPolicy::zeros(20, 5, 25).cost(), 0.0);
        let p = PricingPolicy::from_values(100, 100, 2, vec![0.5, 2.5]).unwrap();
        assert_eq!(p.cost(), 300.0);
        assert_eq!(p.parameter_sum(), 3.0);
        // A ragged last block only counts the steps it covers.
        let p = PricingPolicy::from_values(7, 5, 1, vec![1.0, 1.0]).unwrap();
        assert_eq!(p.cost(), 7.0);
    }

    #[test]
    fn vars_follow_blocks() {
        let p = PricingPolicy::from_values(10, 5, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut tape = Tape::new();
        let pv = p.record(&mut tape);
        let v = pv.discount_at(6, 1).unwrap();
        assert_eq!(v.value(), 4.0);
        let sq = tape.square(v);
        let g = tape.backward(sq);
        assert_eq!(g.wrt(pv.vars()), vec![0.0, 0.0, 0.0, 8.0]);
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let p = PricingPolicy::from_values(10, 5, 2, vec![0.1, -2.0, 3.5, 1e-9]).unwrap();
        let mut buf = Vec::new();
        p.write_csv(&mut buf).unwrap();
        let q = PricingPolicy::read_csv(&buf[..], 10, 5, 2).unwrap();
        assert_eq!(p, q);
        assert_eq!(q.negative_count(), 1);
        assert!(PricingPolicy::read_csv(&buf[..], 10, 5, 3).is_err());
        let short = "block,station,value\n0,0,1\n";
        assert!(PricingPolicy::read_csv(short.as_bytes(), 10, 5, 2).is_err());
    }
}
