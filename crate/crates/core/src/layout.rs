//! Block layout of the stacked iterate `ψ = [x; σ; λ; ω]`.

use std::ops::Range;

use crate::problem::{CommGraph, ProblemInstance};

/// Offsets of every block inside `ψ`. Fixed at construction.
///
/// `ω_i = [y_i; μ_ij1; y_ij1; …]` over the out-neighbors `j` of `i` in ascending
/// order, so the estimate `y_ij` held by `j` is packed into its tail's block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    l: usize,
    n: Vec<usize>,
    x_off: Vec<usize>,
    sigma_base: usize,
    lambda_base: usize,
    omega_off: Vec<usize>,
    mu_off: Vec<usize>,
    dim: usize,
}

impl Layout {
    pub fn new(instance: &ProblemInstance) -> Self {
        let n: Vec<usize> = instance.agents().iter().map(|a| a.n()).collect();
        Self::from_parts(&n, instance.l(), instance.graph())
    }

    pub fn from_parts(n: &[usize], l: usize, graph: &CommGraph) -> Self {
        let big_n = n.len();
        let e = graph.n_edges();
        let mut x_off = Vec::with_capacity(big_n);
        let mut acc = 0;
        for &ni in n {
            x_off.push(acc);
            acc += ni;
        }
        let sigma_base = acc;
        let lambda_base = sigma_base + big_n * l;
        let mut omega_off = Vec::with_capacity(big_n);
        let mut acc = lambda_base + e * l;
        for i in 0..big_n {
            omega_off.push(acc);
            acc += l * (1 + 2 * graph.out_degree(i));
        }
        let mut mu_off = vec![0; e];
        for (k, slot) in mu_off.iter_mut().enumerate() {
            let tail = graph.edge(k).0;
            *slot = omega_off[tail] + l * (1 + 2 * graph.out_slot(k));
        }
        Self { l, n: n.to_vec(), x_off, sigma_base, lambda_base, omega_off, mu_off, dim: acc }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn l(&self) -> usize {
        self.l
    }

    pub fn n_agents(&self) -> usize {
        self.n.len()
    }

    pub fn n_edges(&self) -> usize {
        self.mu_off.len()
    }

    pub fn n(&self, i: usize) -> usize {
        self.n[i]
    }

    pub fn x(&self, i: usize) -> Range<usize> {
        self.x_off[i]..self.x_off[i] + self.n[i]
    }

    pub fn x_all(&self) -> Range<usize> {
        0..self.sigma_base
    }

    pub fn sigma(&self, i: usize) -> Range<usize> {
        let s = self.sigma_base + i * self.l;
        s..s + self.l
    }

    pub fn sigma_all(&self) -> Range<usize> {
        self.sigma_base..self.lambda_base
    }

    pub fn lambda(&self, e: usize) -> Range<usize> {
        let s = self.lambda_base + e * self.l;
        s..s + self.l
    }

    pub fn lambda_all(&self) -> Range<usize> {
        self.lambda_base..self.lambda_base + self.n_edges() * self.l
    }

    pub fn omega(&self, i: usize) -> Range<usize> {
        let end = if i + 1 < self.omega_off.len() { self.omega_off[i + 1] } else { self.dim };
        self.omega_off[i]..end
    }

    pub fn omega_all(&self) -> Range<usize> {
        self.lambda_all().end..self.dim
    }

    /// Agent `i`'s own auxiliary variable `y_i`.
    pub fn y(&self, i: usize) -> Range<usize> {
        self.omega_off[i]..self.omega_off[i] + self.l
    }

    /// Consensus dual `μ` of edge `e`.
    pub fn mu(&self, e: usize) -> Range<usize> {
        self.mu_off[e]..self.mu_off[e] + self.l
    }

    /// Estimate of the tail's `y` kept by the head of edge `e`.
    pub fn y_est(&self, e: usize) -> Range<usize> {
        self.mu_off[e] + self.l..self.mu_off[e] + 2 * self.l
    }

    /// Number of scalars agent `i` stores: `x_i`, `σ_i`, `y_i` and one estimate per in-neighbor.
    pub fn agent_state_size(&self, i: usize, graph: &CommGraph) -> usize {
        self.n[i] + self.l * (2 + graph.in_degree(i))
    }
}
