//! Scalar reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of a forward computation as a node
//! holding its value, the indices of its parents and the local partial
//! derivative with respect to each parent. Because nodes are appended as they
//! are computed, parents always precede children and a single sweep over the
//! tape in reverse order propagates adjoints from the output to every input.
//!
//! Besides scalar nodes the tape supports *block operations*: a group of
//! output nodes produced together from a slice of inputs, whose backward rule
//! is supplied as a closure mapping output adjoints to input adjoints. Softmax
//! and the relaxed sampling kernels of the simulator use them so that a
//! `K`-way operation costs `O(K)` instead of `O(K²)` recorded partials.
//!
//! ```
//! use dabs_core::autodiff::Tape;
//!
//! let mut tape = Tape::new();
//! let x = tape.input(3.0);
//! let y = tape.mul(x, x);
//! let grads = tape.backward(y);
//! assert_eq!(y.value(), 9.0);
//! assert_eq!(grads.get(x), 6.0);
//! ```

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Errors raised while recording a forward computation.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum AdError {
    #[error("logarithm of non-positive value {value} at tape node {node}")]
    LogOfNonPositive { node: usize, value: f64 },
    #[error("division by zero: divisor is tape node {node}")]
    DivisionByZero { node: usize },
}

/// Kind of a recorded node, kept for diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Input,
    Constant,
    Add,
    Sub,
    Mul,
    Div,
    Exp,
    Log,
    Neg,
    MaxConst,
    Square,
    Linear,
    Block(&'static str),
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, PartialEq)]
pub struct Var {
    tape: u64,
    index: u32,
    value: f64,
}

impl Var {
    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn index(&self) -> usize {
        self.index as usize
    }
}

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var(#{} = {})", self.index, self.value)
    }
}

/// Backward rule of a block operation.
///
/// Called as `backward(input_values, output_values, output_adjoints,
/// input_adjoints)`; it must *add* the contribution of this block to
/// `input_adjoints`.
pub type BlockBackward = Box<dyn Fn(&[f64], &[f64], &[f64], &mut [f64]) + Send>;

struct Block {
    inputs: Vec<u32>,
    first_output: u32,
    n_outputs: u32,
    backward: BlockBackward,
}

#[derive(Clone, Copy)]
struct Node {
    kind: OpKind,
    edge_start: u32,
    edge_len: u32,
    /// Block index for block outputs, `u32::MAX` otherwise.
    block: u32,
}

/// Append-only record of a differentiable computation.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    values: Vec<f64>,
    edge_parent: Vec<u32>,
    edge_partial: Vec<f64>,
    blocks: Vec<Block>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            values: Vec::new(),
            edge_parent: Vec::new(),
            edge_partial: Vec::new(),
            blocks: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.check(v);
        self.nodes[v.index()].kind
    }

    #[inline]
    fn check(&self, v: Var) {
        assert_eq!(
            v.tape, self.id,
            "Var #{} belongs to tape {} but was used on tape {}",
            v.index, v.tape, self.id
        );
    }

    fn push(&mut self, kind: OpKind, value: f64, block: u32) -> Var {
        let index = u32::try_from(self.nodes.len()).expect("tape exceeds u32 nodes");
        self.nodes.push(Node {
            kind,
            edge_start: self.edge_parent.len() as u32,
            edge_len: 0,
            block,
        });
        self.values.push(value);
        Var {
            tape: self.id,
            index,
            value,
        }
    }

    /// Records a node whose backward contribution to `parents[k]` is
    /// `partials[k] * incoming_adjoint`.
    pub fn record(&mut self, kind: OpKind, parents: &[Var], value: f64, partials: &[f64]) -> Var {
        assert_eq!(parents.len(), partials.len(), "one partial per parent");
        for p in parents {
            self.check(*p);
        }
        let var = self.push(kind, value, u32::MAX);
        for (p, d) in parents.iter().zip(partials) {
            self.edge_parent.push(p.index);
            self.edge_partial.push(*d);
        }
        self.nodes[var.index()].edge_len = parents.len() as u32;
        var
    }

    /// Records a block operation with `outputs.len()` output nodes.
    pub fn record_block(
        &mut self,
        name: &'static str,
        inputs: &[Var],
        outputs: Vec<f64>,
        backward: BlockBackward,
    ) -> Vec<Var> {
        for v in inputs {
            self.check(*v);
        }
        let block = self.blocks.len() as u32;
        let first_output = self.nodes.len() as u32;
        let vars: Vec<Var> = outputs
            .iter()
            .map(|&value| self.push(OpKind::Block(name), value, block))
            .collect();
        self.blocks.push(Block {
            inputs: inputs.iter().map(|v| v.index).collect(),
            first_output,
            n_outputs: outputs.len() as u32,
            backward,
        });
        vars
    }

    /// A differentiable input (a leaf whose gradient is of interest).
    pub fn input(&mut self, value: f64) -> Var {
        self.push(OpKind::Input, value, u32::MAX)
    }

    pub fn constant(&mut self, value: f64) -> Var {
        self.push(OpKind::Constant, value, u32::MAX)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.record(OpKind::Add, &[a, b], a.value + b.value, &[1.0, 1.0])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.record(OpKind::Sub, &[a, b], a.value - b.value, &[1.0, -1.0])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.record(OpKind::Mul, &[a, b], a.value * b.value, &[b.value, a.value])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        if b.value == 0.0 {
            return Err(AdError::DivisionByZero { node: b.index() });
        }
        let inv = 1.0 / b.value;
        Ok(self.record(OpKind::Div, &[a, b], a.value * inv, &[inv, -a.value * inv * inv]))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let e = a.value.exp();
        self.record(OpKind::Exp, &[a], e, &[e])
    }

    pub fn log(&mut self, a: Var) -> Result<Var, AdError> {
        if a.value <= 0.0 || a.value.is_nan() {
            return Err(AdError::LogOfNonPositive {
                node: a.index(),
                value: a.value,
            });
        }
        Ok(self.record(OpKind::Log, &[a], a.value.ln(), &[1.0 / a.value]))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.record(OpKind::Neg, &[a], -a.value, &[-1.0])
    }

    /// `max(a, c)` for a constant `c`; the subgradient at the kink is 0.
    pub fn max_const(&mut self, a: Var, c: f64) -> Var {
        if a.value > c {
            self.record(OpKind::MaxConst, &[a], a.value, &[1.0])
        } else {
            self.record(OpKind::MaxConst, &[a], c, &[0.0])
        }
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.record(OpKind::Square, &[a], a.value * a.value, &[2.0 * a.value])
    }

    /// `Σ coeff·term + offset` as a single node.
    pub fn linear(&mut self, terms: &[(Var, f64)], offset: f64) -> Var {
        let parents: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let partials: Vec<f64> = terms.iter().map(|t| t.1).collect();
        let value = terms.iter().fold(offset, |acc, (v, c)| acc + c * v.value);
        self.record(OpKind::Linear, &parents, value, &partials)
    }

    pub fn sum(&mut self, xs: &[Var]) -> Var {
        let ones = vec![1.0; xs.len()];
        let value = xs.iter().map(|v| v.value).sum();
        self.record(OpKind::Linear, xs, value, &ones)
    }

    /// `softmax(xs / tau)`, recorded as one block.
    pub fn softmax(&mut self, xs: &[Var], tau: f64) -> Vec<Var> {
        assert!(tau > 0.0, "softmax temperature must be positive");
        let logits: Vec<f64> = xs.iter().map(|v| v.value / tau).collect();
        let probs = softmax_values(&logits);
        self.record_block(
            "softmax",
            xs,
            probs,
            Box::new(move |_, y, y_adj, x_adj| softmax_backward(y, y_adj, tau, x_adj)),
        )
    }

    /// `x_k - log Σ_i exp(x_i)`, the log of [`Tape::softmax`] at `τ = 1`
    /// without underflow for very negative entries.
    pub fn log_softmax(&mut self, xs: &[Var]) -> Vec<Var> {
        let vals: Vec<f64> = xs.iter().map(|v| v.value).collect();
        let out = log_softmax_values(&vals);
        self.record_block(
            "log_softmax",
            xs,
            out,
            Box::new(|_, l, l_adj, x_adj| {
                let total: f64 = l_adj.iter().sum();
                for ((xa, li), ga) in x_adj.iter_mut().zip(l).zip(l_adj) {
                    *xa += ga - li.exp() * total;
                }
            }),
        )
    }

    /// Reverse sweep from `output`; returns adjoints of every node.
    pub fn backward(&self, output: Var) -> Gradients {
        self.check(output);
        let n = self.nodes.len();
        let mut adj = vec![0.0; n];
        adj[output.index()] = 1.0;
        let mut visited = 0usize;
        let mut in_vals = Vec::new();
        let mut in_adj = Vec::new();
        for idx in (0..n).rev() {
            visited += 1;
            let node = self.nodes[idx];
            if node.block != u32::MAX {
                let block = &self.blocks[node.block as usize];
                // The lowest-indexed output is reached last; every consumer of
                // the block sits above it, so all output adjoints are final.
                if block.first_output as usize != idx {
                    continue;
                }
                let lo = block.first_output as usize;
                let hi = lo + block.n_outputs as usize;
                let out_adj = &adj[lo..hi];
                if out_adj.iter().all(|a| *a == 0.0) {
                    continue;
                }
                in_vals.clear();
                in_vals.extend(block.inputs.iter().map(|&i| self.values[i as usize]));
                in_adj.clear();
                in_adj.resize(block.inputs.len(), 0.0);
                (block.backward)(&in_vals, &self.values[lo..hi], out_adj, &mut in_adj);
                for (&i, a) in block.inputs.iter().zip(&in_adj) {
                    adj[i as usize] += a;
                }
                continue;
            }
            let g = adj[idx];
            if g == 0.0 {
                continue;
            }
            let start = node.edge_start as usize;
            let end = start + node.edge_len as usize;
            for e in start..end {
                adj[self.edge_parent[e] as usize] += self.edge_partial[e] * g;
            }
        }
        Gradients {
            tape: self.id,
            adjoints: adj,
            visited,
        }
    }
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    tape: u64,
    adjoints: Vec<f64>,
    visited: usize,
}

impl Gradients {
    /// Derivative of the output with respect to `v`; 0 when `v` does not
    /// reach the output.
    pub fn get(&self, v: Var) -> f64 {
        assert_eq!(v.tape, self.tape, "Var from a different tape");
        self.adjoints[v.index()]
    }

    pub fn wrt(&self, vars: &[Var]) -> Vec<f64> {
        vars.iter().map(|v| self.get(*v)).collect()
    }

    /// Number of nodes visited by the reverse sweep.
    pub fn nodes_visited(&self) -> usize {
        self.visited
    }
}

/// Numerically stable softmax of raw logits.
pub fn softmax_values(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = out.iter().sum();
    for y in &mut out {
        *y /= total;
    }
    out
}

pub fn log_softmax_values(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    xs.iter().map(|x| x - lse).collect()
}

/// Adds `∂/∂x` of `softmax(x/τ)` contracted with `y_adj` into `x_adj`.
pub fn softmax_backward(y: &[f64], y_adj: &[f64], tau: f64, x_adj: &mut [f64]) {
    let dot: f64 = y.iter().zip(y_adj).map(|(a, b)| a * b).sum();
    for ((xa, yi), ga) in x_adj.iter_mut().zip(y).zip(y_adj) {
        *xa += yi * (ga - dot) / tau;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn record_mul_add_exp() {
        let mut t = Tape::new();
        let a = t.input(2.0);
        let b = t.input(3.0);
        let m = t.mul(a, b);
        assert_eq!(m.value(), 6.0);
        let g = t.backward(m);
        assert_eq!((g.get(a), g.get(b)), (3.0, 2.0));

        let s = t.add(a, b);
        assert_eq!(s.value(), 5.0);
        let g = t.backward(s);
        assert_eq!((g.get(a), g.get(b)), (1.0, 1.0));

        let z = t.input(0.0);
        let e = t.exp(z);
        assert_eq!(e.value(), 1.0);
        assert_eq!(t.backward(e).get(z), 1.0);
    }

    #[test]
    fn softmax_closed_forms() {
        let mut t = Tape::new();
        let xs: Vec<Var> = (0..3).map(|_| t.input(0.0)).collect();
        for y in t.softmax(&xs, 1.0) {
            assert_relative_eq!(y.value(), 1.0 / 3.0, epsilon = 1e-15);
        }
        let a = t.input(1.0);
        let b = t.input(0.0);
        let y = t.softmax(&[a, b], 1.0);
        let e = std::f64::consts::E;
        assert_relative_eq!(y[0].value(), e / (e + 1.0), epsilon = 1e-15);
        assert_relative_eq!(y[1].value(), 1.0 / (e + 1.0), epsilon = 1e-15);
        assert!((y[0].value() - 0.7311).abs() < 5e-5);
    }

    #[test]
    fn log_exp_identity() {
        let mut t = Tape::new();
        let x = t.input(1.7);
        let e = t.exp(x);
        let l = t.log(e).unwrap();
        assert_relative_eq!(l.value(), 1.7, epsilon = 1e-14);
        assert_relative_eq!(t.backward(l).get(x), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let x = t.input(3.0);
        let y = t.mul(x, x);
        assert_eq!(t.backward(y).get(x), 6.0);
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let mut t = Tape::new();
        let xs: Vec<Var> = [0.3, -1.2, 2.0, 0.0].iter().map(|&v| t.input(v)).collect();
        let ys = t.softmax(&xs, 0.7);
        let total = t.sum(&ys);
        assert_relative_eq!(total.value(), 1.0, epsilon = 1e-14);
        for g in t.backward(total).wrt(&xs) {
            assert!(g.abs() < 1e-15, "{g}");
        }
    }

    #[test]
    fn log_softmax_matches_log_of_softmax() {
        let vals = [0.3, -1.2, 2.0, -40.0];
        let w = [1.0, -2.0, 0.5, 3.0];
        let grad = |use_log_block: bool| {
            let mut t = Tape::new();
            let xs: Vec<Var> = vals.iter().map(|&v| t.input(v)).collect();
            let ls = if use_log_block {
                t.log_softmax(&xs)
            } else {
                let ys = t.softmax(&xs, 1.0);
                ys.iter().map(|&y| t.log(y).unwrap()).collect()
            };
            let terms: Vec<(Var, f64)> = ls.iter().copied().zip(w).collect();
            let out = t.linear(&terms, 0.0);
            (out.value(), t.backward(out).wrt(&xs))
        };
        let (a, ga) = grad(true);
        let (b, gb) = grad(false);
        assert_relative_eq!(a, b, epsilon = 1e-10);
        for (x, y) in ga.iter().zip(&gb) {
            assert_relative_eq!(x, y, epsilon = 1e-10);
        }
        let l = log_softmax_values(&[0.0, -800.0]);
        assert!(l[1].is_finite());
    }

    #[test]
    fn fan_out_accumulates() {
        let mut t = Tape::new();
        let x = t.input(2.0);
        let a = t.mul(x, x);
        let b = t.exp(x);
        let c = t.add(a, b);
        assert_relative_eq!(t.backward(c).get(x), 4.0 + 2f64.exp(), epsilon = 1e-12);
    }

    #[test]
    fn errors_carry_offending_node() {
        let mut t = Tape::new();
        let z = t.constant(0.0);
        let one = t.constant(1.0);
        assert_eq!(
            t.log(z),
            Err(AdError::LogOfNonPositive {
                node: z.index(),
                value: 0.0
            })
        );
        assert_eq!(t.div(one, z), Err(AdError::DivisionByZero { node: z.index() }));
        let m = t.constant(-2.0);
        assert!(matches!(t.log(m), Err(AdError::LogOfNonPositive { .. })));
    }

    #[test]
    #[should_panic(expected = "belongs to tape")]
    fn mixing_tapes_is_rejected() {
        let mut t1 = Tape::new();
        let mut t2 = Tape::new();
        let a = t1.input(1.0);
        let b = t2.input(1.0);
        t2.add(a, b);
    }

    #[test]
    fn unreached_inputs_get_zero() {
        let mut t = Tape::new();
        let x = t.input(1.0);
        let y = t.input(5.0);
        let z = t.square(x);
        let g = t.backward(z);
        assert_eq!(g.get(y), 0.0);
    }

    #[test]
    fn visits_every_node_once_and_is_deterministic() {
        let mut t = Tape::new();
        let xs: Vec<Var> = (0..5).map(|i| t.input(i as f64 * 0.1)).collect();
        let ys = t.softmax(&xs, 2.0);
        let sq: Vec<Var> = ys.iter().map(|&y| t.square(y)).collect();
        let out = t.sum(&sq);
        let g1 = t.backward(out);
        let g2 = t.backward(out);
        assert_eq!(g1.nodes_visited(), t.len());
        assert_eq!(g1.wrt(&xs), g2.wrt(&xs));
    }

    #[test]
    fn max_const_and_div() {
        let mut t = Tape::new();
        let x = t.input(0.5);
        let m = t.max_const(x, 1.0);
        assert_eq!(m.value(), 1.0);
        assert_eq!(t.backward(m).get(x), 0.0);
        let m = t.max_const(x, 0.0);
        assert_eq!(t.backward(m).get(x), 1.0);
        let y = t.input(4.0);
        let q = t.div(x, y).unwrap();
        let g = t.backward(q);
        assert_relative_eq!(g.get(x), 0.25);
        assert_relative_eq!(g.get(y), -0.5 / 16.0);
    }
}
