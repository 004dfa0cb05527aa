//! Exact finite filtered probability space on a non-recombining tree.
//!
//! Time runs over `0..=depth`. A node at time `t` is identified by its index
//! among the `node_count(t)` path prefixes of length `t`, ordered
//! lexicographically, so the leaves below node `i` at time `t` are the
//! contiguous block `i * stride(t) .. (i + 1) * stride(t)`. Every level has a
//! single branch count; transition probabilities may differ from node to node.
//!
//! Left limits follow the discrete convention: the left limit at `t` is the
//! value at `t - 1`, and the left limit at `0` is the value at `0`.

use std::ops::Range;

use thiserror::Error;

/// Largest leaf count accepted by [`TreeModel::build`] (16 binary steps).
pub const MAX_LEAVES: usize = 1 << 16;

const PROB_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LatticeError {
    #[error("tree depth must be at least 1")]
    DepthZero,
    #[error("transition probability {value} at level {level} is not in (0, 1]")]
    NonPositiveProbability { level: usize, value: f64 },
    #[error("transition probabilities at level {level}, node {node} sum to {sum}")]
    ProbabilitySumMismatch { level: usize, node: usize, sum: f64 },
    #[error("tree has {leaves} leaves, more than the {MAX_LEAVES} supported")]
    TooManyLeaves { leaves: usize },
    #[error("level specification: {0}")]
    InvalidLevel(String),
    #[error("time {t} outside 0..={depth}")]
    TimeOutOfRange { t: usize, depth: usize },
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("process is not increasing on leaf {leaf} at time {t}")]
    NotIncreasing { leaf: usize, t: usize },
    #[error("not a stopping time: leaf {leaf} stops at {t} but its time-{t} node does not")]
    NotStoppingTime { leaf: usize, t: usize },
}

/// Transition probabilities of one level of the tree.
#[derive(Debug, Clone, PartialEq)]
pub enum LevelProbs {
    /// The same child distribution at every node of the level.
    Shared(Vec<f64>),
    /// One child distribution per node, in node order.
    PerNode(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelSpec {
    pub branches: usize,
    pub probs: LevelProbs,
}

impl LevelSpec {
    pub fn shared(probs: Vec<f64>) -> Self {
        LevelSpec { branches: probs.len(), probs: LevelProbs::Shared(probs) }
    }

    pub fn per_node(probs: Vec<Vec<f64>>) -> Self {
        let branches = probs.first().map_or(0, Vec::len);
        LevelSpec { branches, probs: LevelProbs::PerNode(probs) }
    }
}

#[derive(Debug, Clone)]
pub struct TreeModel {
    depth: usize,
    branches: Vec<usize>,
    node_counts: Vec<usize>,
    strides: Vec<usize>,
    /// `transitions[t][node * branches[t] + child]`
    transitions: Vec<Vec<f64>>,
    leaf_probs: Vec<f64>,
}

impl TreeModel {
    /// Builds a tree from one [`LevelSpec`] per level. A single spec is
    /// repeated over all levels.
    pub fn build(depth: usize, levels: &[LevelSpec]) -> Result<Self, LatticeError> {
        if depth == 0 {
            return Err(LatticeError::DepthZero);
        }
        let levels: Vec<&LevelSpec> = match levels.len() {
            1 => std::iter::repeat_n(&levels[0], depth).collect(),
            n if n == depth => levels.iter().collect(),
            n => {
                return Err(LatticeError::InvalidLevel(format!(
                    "{n} level specs for depth {depth}"
                )))
            }
        };

        let mut node_counts = vec![1usize];
        let mut branches = Vec::with_capacity(depth);
        for (t, spec) in levels.iter().enumerate() {
            if spec.branches == 0 {
                return Err(LatticeError::InvalidLevel(format!("level {t} has no branches")));
            }
            branches.push(spec.branches);
            let next = node_counts[t].saturating_mul(spec.branches);
            if next > MAX_LEAVES {
                return Err(LatticeError::TooManyLeaves { leaves: next });
            }
            node_counts.push(next);
        }

        let mut transitions = Vec::with_capacity(depth);
        for (t, spec) in levels.iter().enumerate() {
            let b = spec.branches;
            let n = node_counts[t];
            let mut row = Vec::with_capacity(n * b);
            match &spec.probs {
                LevelProbs::Shared(p) => {
                    if p.len() != b {
                        return Err(LatticeError::InvalidLevel(format!(
                            "level {t}: {} probabilities for {b} branches",
                            p.len()
                        )));
                    }
                    check_distribution(t, 0, p)?;
                    for _ in 0..n {
                        row.extend_from_slice(p);
                    }
                }
                LevelProbs::PerNode(ps) => {
                    if ps.len() != n {
                        return Err(LatticeError::InvalidLevel(format!(
                            "level {t}: {} node distributions for {n} nodes",
                            ps.len()
                        )));
                    }
                    for (node, p) in ps.iter().enumerate() {
                        if p.len() != b {
                            return Err(LatticeError::InvalidLevel(format!(
                                "level {t}, node {node}: {} probabilities for {b} branches",
                                p.len()
                            )));
                        }
                        check_distribution(t, node, p)?;
                        row.extend_from_slice(p);
                    }
                }
            }
            transitions.push(row);
        }

        let leaves = node_counts[depth];
        let mut strides = vec![0usize; depth + 1];
        strides[depth] = 1;
        for t in (0..depth).rev() {
            strides[t] = strides[t + 1] * branches[t];
        }

        let mut probs = vec![1.0f64];
        for t in 0..depth {
            let b = branches[t];
            let mut next = Vec::with_capacity(probs.len() * b);
            for (node, p) in probs.iter().enumerate() {
                for c in 0..b {
                    next.push(p * transitions[t][node * b + c]);
                }
            }
            probs = next;
        }
        debug_assert_eq!(probs.len(), leaves);

        Ok(TreeModel { depth, branches, node_counts, strides, transitions, leaf_probs: probs })
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn leaf_count(&self) -> usize {
        self.node_counts[self.depth]
    }

    pub fn node_count(&self, t: usize) -> usize {
        self.node_counts[t]
    }

    pub fn branches(&self, t: usize) -> usize {
        self.branches[t]
    }

    pub fn leaf_probs(&self) -> &[f64] {
        &self.leaf_probs
    }

    /// Number of leaves below a time-`t` node.
    pub fn stride(&self, t: usize) -> usize {
        self.strides[t]
    }

    /// The time-`t` node on the path to `leaf`.
    pub fn node_of(&self, t: usize, leaf: usize) -> usize {
        leaf / self.strides[t]
    }

    pub fn leaves_of(&self, t: usize, node: usize) -> Range<usize> {
        let s = self.strides[t];
        node * s..(node + 1) * s
    }

    /// Time-`t + 1` children of a time-`t` node.
    pub fn children(&self, t: usize, node: usize) -> Range<usize> {
        let b = self.branches[t];
        node * b..(node + 1) * b
    }

    /// Probability of moving from `node` at time `t` to its `child`-th child.
    pub fn transition(&self, t: usize, node: usize, child: usize) -> f64 {
        self.transitions[t][node * self.branches[t] + child]
    }

    /// Probability of a time-`t` node.
    pub fn node_prob(&self, t: usize, node: usize) -> f64 {
        self.leaf_probs[self.leaves_of(t, node)].iter().sum()
    }

    fn check_time(&self, t: usize) -> Result<(), LatticeError> {
        if t > self.depth {
            Err(LatticeError::TimeOutOfRange { t, depth: self.depth })
        } else {
            Ok(())
        }
    }

    fn check_leaf_len(&self, len: usize) -> Result<(), LatticeError> {
        if len != self.leaf_count() {
            Err(LatticeError::ShapeMismatch { expected: self.leaf_count(), got: len })
        } else {
            Ok(())
        }
    }

    /// Probability-weighted mean of `values` over the leaves in `range`.
    fn block_mean(&self, values: &[f64], range: Range<usize>) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for leaf in range {
            let p = self.leaf_probs[leaf];
            num += p * values[leaf];
            den += p;
        }
        num / den
    }

    /// `E[x | F_t]` as one value per time-`t` node.
    pub fn conditional_expectation(
        &self,
        x: &RandomVariable,
        t: usize,
    ) -> Result<Vec<f64>, LatticeError> {
        self.check_time(t)?;
        self.check_leaf_len(x.len())?;
        Ok((0..self.node_count(t))
            .map(|node| self.block_mean(&x.0, self.leaves_of(t, node)))
            .collect())
    }

    /// The martingale `t -> E[x | F_t]`, closed by `x` at the terminal time.
    pub fn martingale(&self, x: &RandomVariable) -> Result<AdaptedProcess, LatticeError> {
        self.check_leaf_len(x.len())?;
        let values = (0..=self.depth)
            .map(|t| self.conditional_expectation(x, t))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(AdaptedProcess { values })
    }

    /// Optional projection: `(°X)_t = E[X_t | F_t]` node by node.
    pub fn optional_projection(&self, raw: &RawProcess) -> Result<AdaptedProcess, LatticeError> {
        self.check_raw(raw)?;
        let values = (0..=self.depth)
            .map(|t| {
                let column = raw.column(t);
                (0..self.node_count(t))
                    .map(|node| self.block_mean(&column, self.leaves_of(t, node)))
                    .collect()
            })
            .collect();
        Ok(AdaptedProcess { values })
    }

    /// Dual optional projection of a raw increasing process.
    ///
    /// The process is taken to start from 0 before time 0, so `raw_0` is a
    /// jump at 0. The projection accumulates `E[ΔV_t | F_t]`.
    pub fn dual_optional_projection(
        &self,
        raw: &RawProcess,
    ) -> Result<AdaptedProcess, LatticeError> {
        self.check_raw(raw)?;
        for leaf in 0..self.leaf_count() {
            let mut prev = 0.0;
            for t in 0..=self.depth {
                let v = raw.get(leaf, t);
                if v < prev {
                    return Err(LatticeError::NotIncreasing { leaf, t });
                }
                prev = v;
            }
        }
        let increments = raw.increments();
        let mut values: Vec<Vec<f64>> = Vec::with_capacity(self.depth + 1);
        for t in 0..=self.depth {
            let column = increments.column(t);
            let level: Vec<f64> = (0..self.node_count(t))
                .map(|node| {
                    let inc = self.block_mean(&column, self.leaves_of(t, node));
                    let before = if t == 0 { 0.0 } else { values[t - 1][node / self.branches[t - 1]] };
                    before + inc
                })
                .collect();
            values.push(level);
        }
        Ok(AdaptedProcess { values })
    }

    /// Largest `|E[p_{t+1} | F_t] - p_t|` over all non-terminal nodes.
    pub fn check_martingale(&self, p: &AdaptedProcess) -> Result<MartingaleReport, LatticeError> {
        self.check_adapted(p)?;
        let mut report = MartingaleReport::default();
        for t in 0..self.depth {
            for node in 0..self.node_count(t) {
                let expected: f64 = self
                    .children(t, node)
                    .enumerate()
                    .map(|(c, child)| self.transition(t, node, c) * p.values[t + 1][child])
                    .sum();
                let r = (expected - p.values[t][node]).abs();
                if r > report.max_residual || r.is_nan() {
                    report = MartingaleReport { max_residual: r, worst: Some((t, node)) };
                }
            }
        }
        Ok(report)
    }

    /// Predictable covariation increments `E[ΔU_s ΔV_s | F_{s-1}]`,
    /// indexed as `[s][node at s - 1]` for `s = 1..=depth` (entry 0 is empty).
    pub fn predictable_covariation(
        &self,
        u: &AdaptedProcess,
        v: &AdaptedProcess,
    ) -> Result<Vec<Vec<f64>>, LatticeError> {
        self.check_adapted(u)?;
        self.check_adapted(v)?;
        let mut out = vec![Vec::new()];
        for s in 1..=self.depth {
            let level = (0..self.node_count(s - 1))
                .map(|node| {
                    self.children(s - 1, node)
                        .enumerate()
                        .map(|(c, child)| {
                            let du = u.values[s][child] - u.values[s - 1][node];
                            let dv = v.values[s][child] - v.values[s - 1][node];
                            self.transition(s - 1, node, c) * du * dv
                        })
                        .sum()
                })
                .collect();
            out.push(level);
        }
        Ok(out)
    }

    /// `E[x | F_T]` as a random variable; on `{T = ∞}` this is `x` itself.
    pub fn conditional_expectation_at(
        &self,
        x: &RandomVariable,
        stop: &StoppingTimeMap,
    ) -> Result<RandomVariable, LatticeError> {
        self.check_leaf_len(x.len())?;
        self.check_leaf_len(stop.len())?;
        Ok(RandomVariable(
            (0..self.leaf_count())
                .map(|leaf| match stop.get(leaf) {
                    Some(t) => self.block_mean(&x.0, self.leaves_of(t, self.node_of(t, leaf))),
                    None => x.0[leaf],
                })
                .collect(),
        ))
    }

    /// `X_T 1_{T<∞}` for a raw process.
    pub fn raw_at(&self, raw: &RawProcess, stop: &StoppingTimeMap) -> RandomVariable {
        RandomVariable(
            (0..self.leaf_count())
                .map(|leaf| stop.get(leaf).map_or(0.0, |t| raw.get(leaf, t)))
                .collect(),
        )
    }

    /// `p_T 1_{T<∞}` for an adapted process.
    pub fn adapted_at(&self, p: &AdaptedProcess, stop: &StoppingTimeMap) -> RandomVariable {
        RandomVariable(
            (0..self.leaf_count())
                .map(|leaf| stop.get(leaf).map_or(0.0, |t| p.values[t][self.node_of(t, leaf)]))
                .collect(),
        )
    }

    /// Residual of the optional-projection identity
    /// `E[X_T 1_{T<∞} | F_T] = (°X)_T 1_{T<∞}` at one stopping time.
    pub fn optional_projection_residual(
        &self,
        raw: &RawProcess,
        projection: &AdaptedProcess,
        stop: &StoppingTimeMap,
    ) -> Result<f64, LatticeError> {
        let lhs = self.conditional_expectation_at(&self.raw_at(raw, stop), stop)?;
        let rhs = self.adapted_at(projection, stop);
        Ok(lhs.0.iter().zip(&rhs.0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
    }

    /// Largest violation of `E[Σ H ΔV] = E[Σ H ΔV°]` over the indicator
    /// processes `H = 1_{node} 1_{t}` of every node.
    pub fn dual_projection_residual(
        &self,
        raw: &RawProcess,
        projection: &AdaptedProcess,
    ) -> Result<f64, LatticeError> {
        self.check_raw(raw)?;
        self.check_adapted(projection)?;
        let inc = raw.increments();
        let mut worst: f64 = 0.0;
        for t in 0..=self.depth {
            for node in 0..self.node_count(t) {
                let before = if t == 0 { 0.0 } else { projection.values[t - 1][node / self.branches[t - 1]] };
                let dproj = projection.values[t][node] - before;
                let lhs: f64 = self
                    .leaves_of(t, node)
                    .map(|leaf| self.leaf_probs[leaf] * inc.get(leaf, t))
                    .sum();
                let rhs = self.node_prob(t, node) * dproj;
                worst = worst.max((lhs - rhs).abs());
            }
        }
        Ok(worst)
    }

    /// Lifts an adapted process to a leaf-by-time raw process.
    pub fn lift(&self, p: &AdaptedProcess) -> RawProcess {
        let mut raw = RawProcess::zeros(self.leaf_count(), self.depth);
        for leaf in 0..self.leaf_count() {
            for t in 0..=self.depth {
                raw.set(leaf, t, p.values[t][self.node_of(t, leaf)]);
            }
        }
        raw
    }

    /// Reads a raw process as adapted if it is constant on every node.
    pub fn as_adapted(&self, raw: &RawProcess, tol: f64) -> Option<AdaptedProcess> {
        let mut values = Vec::with_capacity(self.depth + 1);
        for t in 0..=self.depth {
            let mut level = Vec::with_capacity(self.node_count(t));
            for node in 0..self.node_count(t) {
                let mut leaves = self.leaves_of(t, node);
                let first = raw.get(leaves.next().unwrap_or(0), t);
                if leaves.any(|leaf| (raw.get(leaf, t) - first).abs() > tol) {
                    return None;
                }
                level.push(first);
            }
            values.push(level);
        }
        Some(AdaptedProcess { values })
    }

    /// Expectation of a random variable.
    pub fn expectation(&self, x: &RandomVariable) -> f64 {
        self.leaf_probs.iter().zip(&x.0).map(|(p, v)| p * v).sum()
    }

    pub fn check_adapted(&self, p: &AdaptedProcess) -> Result<(), LatticeError> {
        if p.values.len() != self.depth + 1 {
            return Err(LatticeError::ShapeMismatch { expected: self.depth + 1, got: p.values.len() });
        }
        for (t, level) in p.values.iter().enumerate() {
            if level.len() != self.node_count(t) {
                return Err(LatticeError::ShapeMismatch { expected: self.node_count(t), got: level.len() });
            }
        }
        Ok(())
    }

    pub fn check_raw(&self, raw: &RawProcess) -> Result<(), LatticeError> {
        self.check_leaf_len(raw.leaves())?;
        if raw.times() != self.depth + 1 {
            return Err(LatticeError::ShapeMismatch { expected: self.depth + 1, got: raw.times() });
        }
        Ok(())
    }
}

fn check_distribution(level: usize, node: usize, p: &[f64]) -> Result<(), LatticeError> {
    for &value in p {
        if !(value > 0.0 && value <= 1.0) {
            return Err(LatticeError::NonPositiveProbability { level, value });
        }
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > PROB_TOL {
        return Err(LatticeError::ProbabilitySumMismatch { level, node, sum });
    }
    Ok(())
}

/// Leaf-indexed random variable.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomVariable(pub Vec<f64>);

impl RandomVariable {
    pub fn constant(tree: &TreeModel, c: f64) -> Self {
        RandomVariable(vec![c; tree.leaf_count()])
    }

    pub fn indicator(mask: &[bool]) -> Self {
        RandomVariable(mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Node-indexed adapted process, `values[t][node]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedProcess {
    pub values: Vec<Vec<f64>>,
}

impl AdaptedProcess {
    pub fn constant(tree: &TreeModel, c: f64) -> Self {
        AdaptedProcess {
            values: (0..=tree.depth()).map(|t| vec![c; tree.node_count(t)]).collect(),
        }
    }

    pub fn at(&self, t: usize, node: usize) -> f64 {
        self.values[t][node]
    }

    /// Left limit at a time-`t` node: the parent's value, or the time-0 value.
    pub fn left(&self, tree: &TreeModel, t: usize, node: usize) -> f64 {
        if t == 0 {
            self.values[0][node]
        } else {
            self.values[t - 1][node / tree.branches(t - 1)]
        }
    }

    /// Value at time `t` on the path to `leaf`.
    pub fn on_leaf(&self, tree: &TreeModel, t: usize, leaf: usize) -> f64 {
        self.values[t][tree.node_of(t, leaf)]
    }

    pub fn zip_with(&self, other: &AdaptedProcess, f: impl Fn(f64, f64) -> f64) -> AdaptedProcess {
        AdaptedProcess {
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect())
                .collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &AdaptedProcess) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }
}

/// Possibly non-adapted process indexed by `(leaf, time)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawProcess {
    leaves: usize,
    times: usize,
    data: Vec<f64>,
}

impl RawProcess {
    /// A raw process on `leaves` leaves and times `0..=depth`.
    pub fn zeros(leaves: usize, depth: usize) -> Self {
        RawProcess { leaves, times: depth + 1, data: vec![0.0; leaves * (depth + 1)] }
    }

    pub fn from_fn(leaves: usize, depth: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut raw = RawProcess::zeros(leaves, depth);
        for leaf in 0..leaves {
            for t in 0..=depth {
                raw.set(leaf, t, f(leaf, t));
            }
        }
        raw
    }

    pub fn leaves(&self) -> usize {
        self.leaves
    }

    pub fn times(&self) -> usize {
        self.times
    }

    pub fn get(&self, leaf: usize, t: usize) -> f64 {
        self.data[leaf * self.times + t]
    }

    pub fn set(&mut self, leaf: usize, t: usize, v: f64) {
        self.data[leaf * self.times + t] = v;
    }

    pub fn path(&self, leaf: usize) -> &[f64] {
        &self.data[leaf * self.times..(leaf + 1) * self.times]
    }

    pub fn column(&self, t: usize) -> Vec<f64> {
        (0..self.leaves).map(|leaf| self.get(leaf, t)).collect()
    }

    /// Increments with the convention `X_{-1} = 0`.
    pub fn increments(&self) -> RawProcess {
        RawProcess::from_fn(self.leaves, self.times - 1, |leaf, t| {
            self.get(leaf, t) - if t == 0 { 0.0 } else { self.get(leaf, t - 1) }
        })
    }

    pub fn max_abs_diff(&self, other: &RawProcess) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

/// Leaf-indexed stopping time with values in `{0, .., depth, ∞}`.
#[derive(Debug, Clone, PartialEq)]
pub struct StoppingTimeMap(Vec<Option<usize>>);

impl StoppingTimeMap {
    /// Validates `{T <= t}` against the time-`t` cylinders of `tree`.
    pub fn new(tree: &TreeModel, times: Vec<Option<usize>>) -> Result<Self, LatticeError> {
        tree.check_leaf_len(times.len())?;
        for (leaf, &time) in times.iter().enumerate() {
            if let Some(t) = time {
                tree.check_time(t)?;
                let node = tree.node_of(t, leaf);
                if tree.leaves_of(t, node).any(|other| times[other] != Some(t)) {
                    return Err(LatticeError::NotStoppingTime { leaf, t });
                }
            }
        }
        Ok(StoppingTimeMap(times))
    }

    pub fn constant(tree: &TreeModel, t: Option<usize>) -> Result<Self, LatticeError> {
        StoppingTimeMap::new(tree, vec![t; tree.leaf_count()])
    }

    pub fn get(&self, leaf: usize) -> Option<usize> {
        self.0[leaf]
    }

    pub fn times(&self) -> &[Option<usize>] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_never(&self) -> bool {
        self.0.iter().all(Option::is_none)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MartingaleReport {
    pub max_residual: f64,
    /// `(t, node)` where the largest residual occurs.
    pub worst: Option<(usize, usize)>,
}

impl MartingaleReport {
    pub fn is_martingale(&self) -> bool {
        self.max_residual <= 1e-10
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn coin(depth: usize) -> TreeModel {
        TreeModel::build(depth, &[LevelSpec::shared(vec![0.5, 0.5])]).unwrap()
    }

    #[test]
    fn symmetric_coin_leaves() {
        let t1 = coin(1);
        assert_eq!(t1.leaf_probs(), &[0.5, 0.5]);
        let t2 = coin(2);
        assert_eq!(t2.leaf_probs(), &[0.25; 4]);
        assert_eq!(t2.node_count(1), 2);
    }

    #[test]
    fn per_level_probabilities_multiply() {
        let tree = TreeModel::build(
            2,
            &[LevelSpec::shared(vec![0.3, 0.7]), LevelSpec::shared(vec![0.5, 0.5])],
        )
        .unwrap();
        let expected = [0.15, 0.15, 0.35, 0.35];
        for (p, e) in tree.leaf_probs().iter().zip(expected) {
            assert!((p - e).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_bad_specs() {
        assert_eq!(
            TreeModel::build(0, &[LevelSpec::shared(vec![0.5, 0.5])]).unwrap_err(),
            LatticeError::DepthZero
        );
        assert!(matches!(
            TreeModel::build(1, &[LevelSpec::shared(vec![0.0, 1.0])]),
            Err(LatticeError::NonPositiveProbability { .. })
        ));
        assert!(matches!(
            TreeModel::build(1, &[LevelSpec::shared(vec![0.5, 0.6])]),
            Err(LatticeError::ProbabilitySumMismatch { .. })
        ));
        assert!(matches!(
            TreeModel::build(17, &[LevelSpec::shared(vec![0.5, 0.5])]),
            Err(LatticeError::TooManyLeaves { .. })
        ));
    }

    #[test]
    fn conditional_expectation_examples() {
        let tree = coin(2);
        let c = RandomVariable::constant(&tree, 3.25);
        assert_eq!(tree.conditional_expectation(&c, 1).unwrap(), vec![3.25, 3.25]);
        // second coin heads: leaves 0 and 2
        let x = RandomVariable(vec![1.0, 0.0, 1.0, 0.0]);
        assert_eq!(tree.conditional_expectation(&x, 1).unwrap(), vec![0.5, 0.5]);
        assert_eq!(tree.conditional_expectation(&x, 2).unwrap(), x.0);
        assert!(matches!(
            tree.conditional_expectation(&x, 3),
            Err(LatticeError::TimeOutOfRange { .. })
        ));
        assert!(matches!(
            tree.conditional_expectation(&RandomVariable(vec![1.0]), 0),
            Err(LatticeError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn optional_projection_examples() {
        let tree = coin(2);
        let ones = RawProcess::from_fn(4, 2, |_, _| 1.0);
        let proj = tree.optional_projection(&ones).unwrap();
        assert_eq!(proj, AdaptedProcess::constant(&tree, 1.0));

        // A = 1{tau <= t}, tau = 1 on second coin heads
        let a = RawProcess::from_fn(4, 2, |leaf, t| if leaf % 2 == 0 && t >= 1 { 1.0 } else { 0.0 });
        let proj = tree.optional_projection(&a).unwrap();
        assert_eq!(proj.values[1], vec![0.5, 0.5]);

        let adapted = tree.lift(&tree.martingale(&RandomVariable(vec![1.0, 2.0, 3.0, 5.0])).unwrap());
        let back = tree.optional_projection(&adapted).unwrap();
        assert_eq!(tree.lift(&back), adapted);
    }

    #[test]
    fn dual_optional_projection_examples() {
        let tree = coin(2);
        let zero = RawProcess::zeros(4, 2);
        assert_eq!(tree.dual_optional_projection(&zero).unwrap(), AdaptedProcess::constant(&tree, 0.0));

        let a = RawProcess::from_fn(4, 2, |leaf, t| if leaf % 2 == 0 && t >= 1 { 1.0 } else { 0.0 });
        let ao = tree.dual_optional_projection(&a).unwrap();
        assert_eq!(ao.values[0], vec![0.0]);
        assert_eq!(ao.values[1], vec![0.5, 0.5]);
        assert!(tree.dual_projection_residual(&a, &ao).unwrap() < 1e-15);

        let adapted_inc = RawProcess::from_fn(4, 2, |leaf, t| if t >= 1 && leaf < 2 { 2.0 } else { 0.0 });
        let proj = tree.dual_optional_projection(&adapted_inc).unwrap();
        assert_eq!(tree.lift(&proj), adapted_inc);

        let decreasing = RawProcess::from_fn(4, 2, |_, t| 2.0 - t as f64);
        assert!(matches!(
            tree.dual_optional_projection(&decreasing),
            Err(LatticeError::NotIncreasing { .. })
        ));
    }

    #[test]
    fn martingale_checks() {
        let tree = coin(3);
        let x = RandomVariable((0..8).map(|i| (i as f64).sin()).collect());
        let m = tree.martingale(&x).unwrap();
        assert!(tree.check_martingale(&m).unwrap().max_residual < 1e-15);

        // running maximum of the symmetric random walk
        let walk = RandomVariable((0..8).map(|leaf| {
            let mut s = 0.0f64;
            let mut best = 0.0f64;
            for bit in (0..3).rev() {
                s += if (leaf >> bit) & 1 == 0 { 1.0 } else { -1.0 };
                best = best.max(s);
            }
            best
        }).collect());
        let raw = RawProcess::from_fn(8, 3, |leaf, t| {
            let mut s = 0.0f64;
            let mut best = 0.0f64;
            for step in 0..t {
                s += if (leaf >> (2 - step)) & 1 == 0 { 1.0 } else { -1.0 };
                best = best.max(s);
            }
            best
        });
        let running_max = tree.as_adapted(&raw, 0.0).unwrap();
        assert_eq!(running_max.values[3], walk.0);
        assert!(tree.check_martingale(&running_max).unwrap().max_residual > 0.1);
    }

    #[test]
    fn stopping_time_property() {
        let tree = coin(2);
        assert!(StoppingTimeMap::new(&tree, vec![Some(1), Some(1), None, None]).is_ok());
        assert!(matches!(
            StoppingTimeMap::new(&tree, vec![Some(1), None, None, None]),
            Err(LatticeError::NotStoppingTime { .. })
        ));
        assert!(StoppingTimeMap::new(&tree, vec![Some(2), None, Some(0), None]).is_err());
    }

    #[test]
    fn optional_projection_identity_at_stopping_times() {
        let tree = TreeModel::build(
            2,
            &[
                LevelSpec::shared(vec![0.2, 0.8]),
                LevelSpec::per_node(vec![vec![0.6, 0.4], vec![0.1, 0.9]]),
            ],
        )
        .unwrap();
        let raw = RawProcess::from_fn(4, 2, |leaf, t| (leaf * 7 + t * 3) as f64 % 5.0);
        let proj = tree.optional_projection(&raw).unwrap();
        for times in [
            vec![Some(0); 4],
            vec![Some(1), Some(1), Some(2), Some(2)],
            vec![None, None, Some(1), Some(1)],
            vec![Some(2), None, Some(2), None],
        ] {
            let stop = StoppingTimeMap::new(&tree, times).unwrap();
            assert!(tree.optional_projection_residual(&raw, &proj, &stop).unwrap() < 1e-15);
        }
    }
}
