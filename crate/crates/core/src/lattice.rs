//! Finite scenario tree for the common and idiosyncratic Brownian motions.
//!
//! Every Brownian coordinate moves by `±√dt` with probability 1/2 at each
//! step, independently of the others, so a step has `b = 2^D` equally likely
//! branches with `D = d0 + N·d`. Nodes at step `k` are stored flat, indexed by
//! the path integer written in base `b` (oldest branch most significant), which
//! makes the children of node `p` the contiguous block `p·b .. (p+1)·b`.
//!
//! Inside a branch digit, bit `j` drives coordinate `j`: bits `0..d0` are the
//! common noise `W^0`, and agent `i` owns bits `d0 + i·d .. d0 + (i+1)·d`.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default cap on the total number of nodes over all steps.
pub const DEFAULT_MAX_NODES: u128 = 1 << 24;

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioLattice {
    steps: usize,
    horizon: f64,
    dt: f64,
    sqrt_dt: f64,
    agents: usize,
    common_dim: usize,
    idio_dim: usize,
    noise_dim: usize,
    branching: usize,
    counts: Vec<usize>,
}

impl ScenarioLattice {
    pub fn new(
        steps: usize,
        agents: usize,
        common_dim: usize,
        idio_dim: usize,
        horizon: f64,
    ) -> Result<Self> {
        Self::with_capacity(steps, agents, common_dim, idio_dim, horizon, DEFAULT_MAX_NODES)
    }

    pub fn with_capacity(
        steps: usize,
        agents: usize,
        common_dim: usize,
        idio_dim: usize,
        horizon: f64,
        max_nodes: u128,
    ) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("lattice needs at least one step"));
        }
        if agents == 0 {
            return Err(Error::invalid("lattice needs at least one agent"));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::invalid(format!("horizon must be positive, got {horizon}")));
        }
        let noise_dim = common_dim + agents * idio_dim;
        let total = total_node_count(noise_dim, steps);
        if total > max_nodes {
            return Err(Error::Capacity {
                what: "lattice nodes",
                count: total,
                limit: max_nodes,
            });
        }
        let branching = 1usize << noise_dim;
        let mut counts = Vec::with_capacity(steps + 1);
        let mut c = 1usize;
        for _ in 0..=steps {
            counts.push(c);
            c = c.saturating_mul(branching);
        }
        let dt = horizon / steps as f64;
        Ok(Self {
            steps,
            horizon,
            dt,
            sqrt_dt: dt.sqrt(),
            agents,
            common_dim,
            idio_dim,
            noise_dim,
            branching,
            counts,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }
    pub fn horizon(&self) -> f64 {
        self.horizon
    }
    pub fn dt(&self) -> f64 {
        self.dt
    }
    pub fn sqrt_dt(&self) -> f64 {
        self.sqrt_dt
    }
    pub fn agents(&self) -> usize {
        self.agents
    }
    pub fn common_dim(&self) -> usize {
        self.common_dim
    }
    pub fn idio_dim(&self) -> usize {
        self.idio_dim
    }
    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }
    pub fn branching(&self) -> usize {
        self.branching
    }
    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }

    pub fn node_count(&self, k: usize) -> usize {
        self.counts[k]
    }

    pub fn total_nodes(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Probability of a single node at step `k`, `1/b^k`.
    pub fn node_probability(&self, k: usize) -> f64 {
        1.0 / self.counts[k] as f64
    }

    pub fn children(&self, node: usize) -> Range<usize> {
        node * self.branching..(node + 1) * self.branching
    }

    pub fn parent(&self, node: usize) -> usize {
        node / self.branching
    }

    /// Branch digit that leads into `node` from its parent.
    pub fn branch(&self, node: usize) -> usize {
        node % self.branching
    }

    /// `+1` or `-1`: direction of `coord` on branch digit `branch`.
    #[inline]
    pub fn sign(&self, branch: usize, coord: usize) -> f64 {
        if (branch >> coord) & 1 == 1 {
            1.0
        } else {
            -1.0
        }
    }

    #[inline]
    pub fn increment(&self, branch: usize, coord: usize) -> f64 {
        self.sign(branch, coord) * self.sqrt_dt
    }

    pub fn common_coord(&self, j: usize) -> usize {
        debug_assert!(j < self.common_dim);
        j
    }

    pub fn idio_coord(&self, agent: usize, j: usize) -> usize {
        debug_assert!(agent < self.agents && j < self.idio_dim);
        self.common_dim + agent * self.idio_dim + j
    }

    /// Number of distinct common-noise prefixes at step `k`.
    pub fn common_groups(&self, k: usize) -> usize {
        1usize << (self.common_dim * k)
    }

    /// Index of the common-noise prefix of `node` at step `k`, in `0..common_groups(k)`.
    pub fn common_index(&self, k: usize, node: usize) -> usize {
        let mask = (1usize << self.common_dim) - 1;
        let mut digits = node;
        let mut index = 0usize;
        for pos in 0..k {
            let d = digits % self.branching;
            digits /= self.branching;
            index |= (d & mask) << (self.common_dim * pos);
        }
        index
    }

    /// `W_coord` at `node` (sum of the increments along its path).
    pub fn brownian_level(&self, k: usize, node: usize, coord: usize) -> f64 {
        let mut digits = node;
        let mut level = 0.0;
        for _ in 0..k {
            level += self.increment(digits % self.branching, coord);
            digits /= self.branching;
        }
        level
    }

    fn check_len(&self, k: usize, values: &[f64], dim: usize, what: &str) -> Result<()> {
        if k > self.steps {
            return Err(Error::shape(format!("{what}: step {k} beyond lattice horizon {}", self.steps)));
        }
        let want = self.counts[k] * dim;
        if values.len() != want {
            return Err(Error::shape(format!(
                "{what}: step {k} expects {want} values, got {}",
                values.len()
            )));
        }
        Ok(())
    }

    /// `E[v | F_k]` for values `v` given at step `k+1`.
    pub fn cond_expect(&self, k: usize, next: &[f64], dim: usize) -> Result<Vec<f64>> {
        if k >= self.steps {
            return Err(Error::shape(format!("cond_expect from step {} does not exist", k + 1)));
        }
        self.check_len(k + 1, next, dim, "cond_expect")?;
        let b = self.branching;
        let inv_b = 1.0 / b as f64;
        let mut out = vec![0.0; self.counts[k] * dim];
        for (node, slot) in out.chunks_mut(dim).enumerate() {
            let block = &next[node * b * dim..(node + 1) * b * dim];
            for child in block.chunks(dim) {
                for (s, v) in slot.iter_mut().zip(child) {
                    *s += v;
                }
            }
            slot.iter_mut().for_each(|s| *s *= inv_b);
        }
        Ok(out)
    }

    /// `E[v | F̄^0_k]`: average over all step-`k` nodes sharing a common prefix.
    pub fn cond_expect_common(&self, k: usize, values: &[f64], dim: usize) -> Result<Vec<f64>> {
        self.check_len(k, values, dim, "cond_expect_common")?;
        let groups = self.common_groups(k);
        let mut sums = vec![0.0; groups * dim];
        let mut counts = vec![0usize; groups];
        let index: Vec<usize> = (0..self.counts[k]).map(|p| self.common_index(k, p)).collect();
        for (node, v) in values.chunks(dim).enumerate() {
            let g = index[node];
            counts[g] += 1;
            for (s, x) in sums[g * dim..(g + 1) * dim].iter_mut().zip(v) {
                *s += x;
            }
        }
        let mut out = vec![0.0; values.len()];
        for (node, slot) in out.chunks_mut(dim).enumerate() {
            let g = index[node];
            let inv = 1.0 / counts[g] as f64;
            for (o, s) in slot.iter_mut().zip(&sums[g * dim..(g + 1) * dim]) {
                *o = s * inv;
            }
        }
        Ok(out)
    }

    /// Per-node coefficients `Z[c][coord] = E[v_c ΔW_coord | F_k] / dt`, laid out
    /// `[node][c][coord]` with `noise_dim` coordinates.
    pub fn martingale_coefficients(&self, k: usize, next: &[f64], dim: usize) -> Result<Vec<f64>> {
        if self.dt <= 0.0 {
            return Err(Error::invalid("lattice has zero time step"));
        }
        if k >= self.steps {
            return Err(Error::shape(format!("no increments after step {k}")));
        }
        self.check_len(k + 1, next, dim, "martingale_coefficients")?;
        let b = self.branching;
        let nd = self.noise_dim;
        let scale = 1.0 / (b as f64 * self.sqrt_dt);
        let mut out = vec![0.0; self.counts[k] * dim * nd];
        for node in 0..self.counts[k] {
            let z = &mut out[node * dim * nd..(node + 1) * dim * nd];
            for branch in 0..b {
                let v = &next[(node * b + branch) * dim..(node * b + branch + 1) * dim];
                for (c, vc) in v.iter().enumerate() {
                    for coord in 0..nd {
                        z[c * nd + coord] += vc * self.sign(branch, coord);
                    }
                }
            }
            z.iter_mut().for_each(|x| *x *= scale);
        }
        Ok(out)
    }

    /// Unconditional expectation of a step-`k` field.
    pub fn expectation(&self, k: usize, values: &[f64], dim: usize) -> Result<Vec<f64>> {
        self.check_len(k, values, dim, "expectation")?;
        let inv = 1.0 / self.counts[k] as f64;
        Ok((0..dim)
            .map(|c| pairwise_sum_strided(values, c, dim) * inv)
            .collect())
    }

    /// Probability-weighted sum of a scalar per-node quantity at step `k`.
    pub fn mean_scalar(&self, k: usize, values: &[f64]) -> f64 {
        debug_assert_eq!(values.len(), self.counts[k]);
        pairwise_sum(values) / self.counts[k] as f64
    }
}

fn total_node_count(noise_dim: usize, steps: usize) -> u128 {
    if noise_dim >= 100 {
        return u128::MAX;
    }
    let b: u128 = 1u128 << noise_dim;
    let mut total: u128 = 0;
    let mut c: u128 = 1;
    for _ in 0..=steps {
        total = total.saturating_add(c);
        c = c.saturating_mul(b);
    }
    total
}

/// Fixed-order pairwise summation.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= 16 {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

fn pairwise_sum_strided(values: &[f64], offset: usize, stride: usize) -> f64 {
    let n = values.len() / stride;
    fn rec(values: &[f64], offset: usize, stride: usize, lo: usize, hi: usize) -> f64 {
        if hi - lo <= 16 {
            return (lo..hi).map(|i| values[i * stride + offset]).sum();
        }
        let mid = lo + (hi - lo) / 2;
        rec(values, offset, stride, lo, mid) + rec(values, offset, stride, mid, hi)
    }
    rec(values, offset, stride, 0, n)
}

/// Which filtration a process is adapted to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Measurability {
    Full,
    Common,
}

/// Node-indexed process with `dim` components per node.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedProcess {
    dim: usize,
    tag: Measurability,
    values: Vec<Vec<f64>>,
}

impl AdaptedProcess {
    /// Zero process on steps `0..=M`.
    pub fn zeros(lattice: &ScenarioLattice, dim: usize, tag: Measurability) -> Self {
        Self::zeros_steps(lattice, dim, tag, lattice.steps() + 1)
    }

    /// Zero process on steps `0..steps`.
    pub fn zeros_steps(lattice: &ScenarioLattice, dim: usize, tag: Measurability, steps: usize) -> Self {
        let values = (0..steps).map(|k| vec![0.0; lattice.node_count(k) * dim]).collect();
        Self { dim, tag, values }
    }

    pub fn constant(lattice: &ScenarioLattice, value: &[f64]) -> Self {
        let dim = value.len();
        let values = (0..=lattice.steps())
            .map(|k| value.iter().copied().cycle().take(lattice.node_count(k) * dim).collect())
            .collect();
        Self {
            dim,
            tag: Measurability::Common,
            values,
        }
    }

    pub fn from_fn(
        lattice: &ScenarioLattice,
        dim: usize,
        tag: Measurability,
        mut f: impl FnMut(usize, usize, &mut [f64]),
    ) -> Self {
        let mut p = Self::zeros(lattice, dim, tag);
        for k in 0..p.values.len() {
            for (node, slot) in p.values[k].chunks_mut(dim).enumerate() {
                f(k, node, slot);
            }
        }
        p
    }

    pub fn from_steps(dim: usize, tag: Measurability, values: Vec<Vec<f64>>) -> Self {
        Self { dim, tag, values }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn tag(&self) -> Measurability {
        self.tag
    }
    pub fn steps(&self) -> usize {
        self.values.len()
    }
    pub fn step(&self, k: usize) -> &[f64] {
        &self.values[k]
    }
    pub fn step_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.values[k]
    }
    pub fn set_step(&mut self, k: usize, values: Vec<f64>) {
        self.values[k] = values;
    }
    pub fn at(&self, k: usize, node: usize) -> &[f64] {
        &self.values[k][node * self.dim..(node + 1) * self.dim]
    }
    pub fn at_mut(&mut self, k: usize, node: usize) -> &mut [f64] {
        let d = self.dim;
        &mut self.values[k][node * d..(node + 1) * d]
    }
    pub fn into_steps(self) -> Vec<Vec<f64>> {
        self.values
    }

    #[cfg(test)]
    pub(crate) fn retag(mut self, tag: Measurability) -> Self {
        self.tag = tag;
        self
    }

    /// Checks that the process lives on `lattice` (steps `0..=M`) and, when
    /// common-tagged, that it is constant over every common-noise group.
    pub fn check_on(&self, lattice: &ScenarioLattice) -> Result<()> {
        if self.values.len() != lattice.steps() + 1 {
            return Err(Error::shape(format!(
                "process has {} steps, lattice has {}",
                self.values.len(),
                lattice.steps() + 1
            )));
        }
        for (k, v) in self.values.iter().enumerate() {
            if v.len() != lattice.node_count(k) * self.dim {
                return Err(Error::shape(format!(
                    "step {k}: expected {} values, got {}",
                    lattice.node_count(k) * self.dim,
                    v.len()
                )));
            }
        }
        if self.tag == Measurability::Common {
            for k in 0..=lattice.steps() {
                let proj = lattice.cond_expect_common(k, &self.values[k], self.dim)?;
                let scale = 1.0 + max_abs(&self.values[k]);
                if max_abs_diff(&proj, &self.values[k]) > 1e-12 * scale {
                    return Err(Error::Adaptedness(format!(
                        "common-tagged process varies across idiosyncratic branches at step {k}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Projection onto the common filtration at every step.
    pub fn common_projection(&self, lattice: &ScenarioLattice) -> Result<AdaptedProcess> {
        let values = self
            .values
            .iter()
            .enumerate()
            .map(|(k, v)| lattice.cond_expect_common(k, v, self.dim))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            dim: self.dim,
            tag: Measurability::Common,
            values,
        })
    }

    pub fn max_abs_diff(&self, other: &AdaptedProcess) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| max_abs_diff(a, b))
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().map(|v| max_abs(v)).fold(0.0, f64::max)
    }
}

pub(crate) fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub(crate) fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaf_counts_and_probabilities() {
        let l = ScenarioLattice::new(1, 1, 1, 1, 1.0).unwrap();
        assert_eq!(l.node_count(1), 4);
        assert_eq!(l.node_probability(1), 0.25);

        let l = ScenarioLattice::new(2, 2, 1, 1, 1.0).unwrap();
        assert_eq!(l.branching(), 8);
        assert_eq!(l.node_count(2), 64);
    }

    #[test]
    fn increment_moments_are_exact() {
        let l = ScenarioLattice::new(1, 1, 0, 1, 0.3).unwrap();
        let inc: Vec<f64> = (0..l.node_count(1)).map(|n| l.increment(l.branch(n), 0)).collect();
        let mean = inc.iter().sum::<f64>() / inc.len() as f64;
        let var = inc.iter().map(|x| x * x).sum::<f64>() / inc.len() as f64;
        assert_eq!(mean, 0.0);
        assert!((var - 0.3).abs() < 1e-15);
    }

    #[test]
    fn size_guard_names_count() {
        let err = ScenarioLattice::new(4, 8, 1, 1, 1.0).unwrap_err();
        match err {
            Error::Capacity { count, limit, .. } => {
                assert!(count > limit);
                assert_eq!(limit, DEFAULT_MAX_NODES);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn cond_expect_of_constant_and_increment() {
        let l = ScenarioLattice::new(2, 2, 1, 1, 1.0).unwrap();
        let c = vec![2.5; l.node_count(2)];
        assert!(l.cond_expect(1, &c, 1).unwrap().iter().all(|&x| x == 2.5));
        for coord in 0..l.noise_dim() {
            let inc: Vec<f64> = (0..l.node_count(2)).map(|n| l.increment(l.branch(n), coord)).collect();
            assert!(l.cond_expect(1, &inc, 1).unwrap().iter().all(|x| x.abs() < 1e-15));
        }
    }

    #[test]
    fn common_projection_kills_idiosyncratic_increment() {
        let l = ScenarioLattice::new(2, 2, 1, 1, 1.0).unwrap();
        let coord = l.idio_coord(1, 0);
        let w: Vec<f64> = (0..l.node_count(2)).map(|n| l.brownian_level(2, n, coord)).collect();
        let p = l.cond_expect_common(2, &w, 1).unwrap();
        assert!(p.iter().all(|x| x.abs() < 1e-15));
        // the common level itself is untouched
        let w0: Vec<f64> = (0..l.node_count(2)).map(|n| l.brownian_level(2, n, 0)).collect();
        let p0 = l.cond_expect_common(2, &w0, 1).unwrap();
        assert!(max_abs_diff(&p0, &w0) < 1e-15);
    }

    #[test]
    fn common_index_groups_have_equal_size() {
        let l = ScenarioLattice::new(3, 1, 2, 1, 1.0).unwrap();
        let k = 3;
        let mut counts = vec![0usize; l.common_groups(k)];
        for n in 0..l.node_count(k) {
            counts[l.common_index(k, n)] += 1;
        }
        assert!(counts.iter().all(|&c| c == l.node_count(k) / l.common_groups(k)));
    }

    #[test]
    fn martingale_coefficients_of_increment() {
        let l = ScenarioLattice::new(1, 2, 1, 1, 0.5).unwrap();
        for coord in 0..l.noise_dim() {
            let inc: Vec<f64> = (0..l.node_count(1)).map(|n| l.increment(l.branch(n), coord)).collect();
            let z = l.martingale_coefficients(0, &inc, 1).unwrap();
            for (j, zj) in z.iter().enumerate() {
                let want = if j == coord { 1.0 } else { 0.0 };
                assert!((zj - want).abs() < 1e-14, "coord {coord} j {j}: {zj}");
            }
        }
        let c = vec![3.0; l.node_count(1)];
        assert!(l.martingale_coefficients(0, &c, 1).unwrap().iter().all(|z| z.abs() < 1e-15));
    }

    #[test]
    fn step_mismatch_is_shape_error() {
        let l = ScenarioLattice::new(2, 1, 1, 1, 1.0).unwrap();
        assert!(matches!(l.cond_expect(0, &[0.0; 3], 1), Err(Error::Shape(_))));
        assert!(matches!(l.cond_expect(2, &[0.0; 16], 1), Err(Error::Shape(_))));
    }

    #[test]
    fn common_tag_violation_detected() {
        let l = ScenarioLattice::new(1, 1, 1, 1, 1.0).unwrap();
        let p = AdaptedProcess::from_fn(&l, 1, Measurability::Common, |k, n, out| {
            out[0] = l.brownian_level(k, n, l.idio_coord(0, 0));
        });
        assert!(matches!(p.check_on(&l), Err(Error::Adaptedness(_))));
    }
}
