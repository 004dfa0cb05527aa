//! Thin random times with marks on the tree backend: partition cells, the
//! conditional cell probabilities `z^{n,k}`, the survival bundle `(A, A°, Z, m)`
//! and the γ-entropy of the pair (mark, time).

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lattice::{AdaptedProcess, LatticeError, RandomVariable, RawProcess, StoppingTimeMap, TreeModel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ThinTimeError {
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error("exhausting times T_{a} and T_{b} share a finite value on leaf {leaf}")]
    OverlappingGraphs { a: usize, b: usize, leaf: usize },
    #[error("leaf {leaf}: the random time is finite but matches no exhausting time")]
    GraphInclusionViolated { leaf: usize },
    #[error("leaf {leaf} is assigned to cell {label} but T_{} is infinite there", label.n)]
    AssignmentOutsideGraph { leaf: usize, label: CellLabel },
    #[error("cell {0} is not part of the model")]
    UnknownCell(CellLabel),
    #[error("gamma must be positive, got {0}")]
    GammaNonPositive(f64),
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("operation needs the tree backend")]
    BackendUnsupported,
}

/// Cell index `(n, k)`: `τ = T_n < ∞` and mark `ξ = k`. Exhausting times are
/// numbered from 1; `(0, 0)` is reserved for `{τ = ∞}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellLabel {
    pub n: usize,
    pub k: u32,
}

impl CellLabel {
    pub const INFINITY: CellLabel = CellLabel { n: 0, k: 0 };

    pub fn new(n: usize, k: u32) -> Self {
        CellLabel { n, k }
    }

    pub fn is_infinity(&self) -> bool {
        self.n == 0
    }
}

impl fmt::Display for CellLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "C_{}^{}", self.n, self.k)
    }
}

/// One member of the partition together with its martingale
/// `z_t = P(C | F_t)`.
#[derive(Debug, Clone)]
pub struct PartitionCell {
    pub label: CellLabel,
    pub indicator: Vec<bool>,
    pub probability: f64,
    pub z: AdaptedProcess,
}

/// How to split one exhausting time into two.
#[derive(Debug, Clone)]
pub enum Splitter {
    /// An `F_{T_n}`-measurable event `E` (leaf mask): `T' = T_n` on `E`,
    /// `T'' = T_n` off `E`.
    Event(Vec<bool>),
    /// Two explicit stopping times.
    Times(StoppingTimeMap, StoppingTimeMap),
}

/// Analytic control of the part of a countable cell family that was not
/// enumerated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Truncation {
    pub level: usize,
    pub tail_bound: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntropyReport {
    pub gamma: f64,
    /// `E[1_C (log 1/z_{T_n})^γ]` per finite cell, in label order.
    pub terms: Vec<(CellLabel, f64)>,
    pub total: f64,
    /// `-Σ P(C) log P(C)` over all cells, including `{τ = ∞}`.
    pub partition_entropy: f64,
    pub truncation: Option<Truncation>,
}

impl EntropyReport {
    /// Running sums of the per-cell terms in label order.
    pub fn partial_sums(&self) -> Vec<f64> {
        self.terms
            .iter()
            .scan(0.0, |acc, (_, v)| {
                *acc += v;
                Some(*acc)
            })
            .collect()
    }
}

/// Processes attached to `τ`: `A = 1_{[[τ,∞[[}`, its dual optional projection,
/// the Azéma supermartingale `Z` and the martingale `m = A° + Z`.
#[derive(Debug, Clone)]
pub struct SurvivalBundle {
    pub a: RawProcess,
    pub ao: AdaptedProcess,
    pub z: AdaptedProcess,
    pub m: AdaptedProcess,
}

#[derive(Debug, Clone)]
pub struct ThinTimeModel {
    tree: Arc<TreeModel>,
    exhausting: Vec<StoppingTimeMap>,
    assignment: Vec<Option<CellLabel>>,
    tau: Vec<Option<usize>>,
    cells: Vec<PartitionCell>,
    infinity: Option<PartitionCell>,
    warnings: Vec<String>,
}

impl ThinTimeModel {
    /// Builds the model from an exhausting sequence (entry `i` is `T_{i+1}`)
    /// and a leaf-wise cell assignment (`None` means `τ = ∞`).
    ///
    /// `declared` lists cells the caller expects; any that end up with no
    /// leaves are dropped with a warning.
    pub fn build(
        tree: Arc<TreeModel>,
        exhausting: Vec<StoppingTimeMap>,
        assignment: Vec<Option<CellLabel>>,
        declared: &[CellLabel],
    ) -> Result<Self, ThinTimeError> {
        let leaves = tree.leaf_count();
        if assignment.len() != leaves {
            return Err(LatticeError::ShapeMismatch { expected: leaves, got: assignment.len() }.into());
        }
        for t in &exhausting {
            if t.len() != leaves {
                return Err(LatticeError::ShapeMismatch { expected: leaves, got: t.len() }.into());
            }
        }
        check_disjoint(&exhausting, leaves)?;

        let mut tau = Vec::with_capacity(leaves);
        for (leaf, label) in assignment.iter().enumerate() {
            match label {
                None => tau.push(None),
                Some(label) => {
                    if label.n == 0 || label.n > exhausting.len() {
                        return Err(ThinTimeError::GraphInclusionViolated { leaf });
                    }
                    match exhausting[label.n - 1].get(leaf) {
                        Some(t) => tau.push(Some(t)),
                        None => {
                            return Err(ThinTimeError::AssignmentOutsideGraph { leaf, label: *label })
                        }
                    }
                }
            }
        }

        let mut members: BTreeMap<CellLabel, Vec<bool>> = BTreeMap::new();
        for (leaf, label) in assignment.iter().enumerate() {
            if let Some(label) = label {
                members.entry(*label).or_insert_with(|| vec![false; leaves])[leaf] = true;
            }
        }
        let mut warnings = Vec::new();
        for label in declared {
            if !label.is_infinity() && !members.contains_key(label) {
                warnings.push(format!("cell {label} has probability 0 and was dropped"));
            }
        }

        let make_cell = |label: CellLabel, indicator: Vec<bool>| -> Result<PartitionCell, ThinTimeError> {
            let x = RandomVariable::indicator(&indicator);
            let z = tree.martingale(&x)?;
            Ok(PartitionCell { label, probability: tree.expectation(&x), indicator, z })
        };
        let cells = members
            .into_iter()
            .map(|(label, mask)| make_cell(label, mask))
            .collect::<Result<Vec<_>, _>>()?;
        let never: Vec<bool> = tau.iter().map(Option::is_none).collect();
        let infinity = if never.iter().any(|&b| b) {
            Some(make_cell(CellLabel::INFINITY, never)?)
        } else {
            None
        };

        Ok(ThinTimeModel { tree, exhausting, assignment, tau, cells, infinity, warnings })
    }

    /// Builds the model from the random time itself and a mark; the
    /// exhausting time carrying each finite value of `τ` is looked up.
    pub fn from_time_and_mark(
        tree: Arc<TreeModel>,
        exhausting: Vec<StoppingTimeMap>,
        tau: &[Option<usize>],
        mark: &[u32],
    ) -> Result<Self, ThinTimeError> {
        let leaves = tree.leaf_count();
        if tau.len() != leaves || mark.len() != leaves {
            return Err(LatticeError::ShapeMismatch { expected: leaves, got: tau.len().min(mark.len()) }.into());
        }
        check_disjoint(&exhausting, leaves)?;
        let mut assignment = Vec::with_capacity(leaves);
        for leaf in 0..leaves {
            match tau[leaf] {
                None => assignment.push(None),
                Some(t) => {
                    let n = exhausting
                        .iter()
                        .position(|e| e.get(leaf) == Some(t))
                        .ok_or(ThinTimeError::GraphInclusionViolated { leaf })?;
                    assignment.push(Some(CellLabel::new(n + 1, mark[leaf])));
                }
            }
        }
        ThinTimeModel::build(tree, exhausting, assignment, &[])
    }

    pub fn tree(&self) -> &TreeModel {
        &self.tree
    }

    pub fn tree_arc(&self) -> Arc<TreeModel> {
        Arc::clone(&self.tree)
    }

    pub fn exhausting(&self) -> &[StoppingTimeMap] {
        &self.exhausting
    }

    /// `T_n` for `n >= 1`.
    pub fn exhausting_time(&self, n: usize) -> &StoppingTimeMap {
        &self.exhausting[n - 1]
    }

    pub fn assignment(&self) -> &[Option<CellLabel>] {
        &self.assignment
    }

    pub fn tau(&self) -> &[Option<usize>] {
        &self.tau
    }

    /// Finite cells in label order.
    pub fn cells(&self) -> &[PartitionCell] {
        &self.cells
    }

    pub fn infinity_cell(&self) -> Option<&PartitionCell> {
        self.infinity.as_ref()
    }

    pub fn cell(&self, label: CellLabel) -> Option<&PartitionCell> {
        if label.is_infinity() {
            self.infinity.as_ref()
        } else {
            self.cells.iter().find(|c| c.label == label)
        }
    }

    /// Finite cells followed by `{τ = ∞}` when it is non-empty.
    pub fn all_cells(&self) -> impl Iterator<Item = &PartitionCell> {
        self.cells.iter().chain(self.infinity.iter())
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// `z^{n,k}_{T_n}` on the leaves of the cell, `None` elsewhere.
    pub fn z_at_exhausting_time(&self, cell: &PartitionCell, leaf: usize) -> Option<f64> {
        if !cell.indicator[leaf] {
            return None;
        }
        let t = self.exhausting_time(cell.label.n).get(leaf)?;
        Some(cell.z.on_leaf(&self.tree, t, leaf))
    }

    /// Largest `|Σ_C z^C_t - 1|` over all nodes.
    pub fn partition_of_unity_residual(&self) -> f64 {
        let tree = &self.tree;
        let mut worst: f64 = 0.0;
        for t in 0..=tree.depth() {
            for node in 0..tree.node_count(t) {
                let s: f64 = self.all_cells().map(|c| c.z.at(t, node)).sum();
                worst = worst.max((s - 1.0).abs());
            }
        }
        worst
    }

    /// `H_γ(ξ, τ) = Σ_{n,k} E[1_{C_n^k} (log 1/z^{n,k}_{T_n})^γ]`.
    pub fn entropy_gamma(&self, gamma: f64) -> Result<EntropyReport, ThinTimeError> {
        if !(gamma > 0.0) {
            return Err(ThinTimeError::GammaNonPositive(gamma));
        }
        let probs = self.tree.leaf_probs();
        let terms: Vec<(CellLabel, f64)> = self
            .cells
            .iter()
            .map(|cell| {
                let value = (0..self.tree.leaf_count())
                    .filter_map(|leaf| {
                        let z = self.z_at_exhausting_time(cell, leaf)?;
                        Some(probs[leaf] * entropy_kernel(z, gamma))
                    })
                    .sum();
                (cell.label, value)
            })
            .collect();
        let total = terms.iter().map(|(_, v)| v).sum();
        let partition_entropy = self
            .all_cells()
            .map(|c| if c.probability > 0.0 { -c.probability * c.probability.ln() } else { 0.0 })
            .sum();
        Ok(EntropyReport { gamma, terms, total, partition_entropy, truncation: None })
    }

    /// Whether every finite cell is `F_{T_n}`-measurable, i.e. the mark adds
    /// nothing beyond what is already known at `T_n`.
    pub fn cells_known_at_exhausting_times(&self) -> bool {
        let tree = &self.tree;
        self.cells.iter().all(|cell| {
            let tn = self.exhausting_time(cell.label.n);
            (0..tree.leaf_count()).all(|leaf| {
                !cell.indicator[leaf]
                    || tn.get(leaf).is_some_and(|t| {
                        tree.leaves_of(t, tree.node_of(t, leaf)).all(|other| cell.indicator[other])
                    })
            })
        })
    }

    pub fn survival_bundle(&self) -> Result<SurvivalBundle, ThinTimeError> {
        let tree = &self.tree;
        let a = RawProcess::from_fn(tree.leaf_count(), tree.depth(), |leaf, t| match self.tau[leaf] {
            Some(s) if s <= t => 1.0,
            _ => 0.0,
        });
        let survive = RawProcess::from_fn(tree.leaf_count(), tree.depth(), |leaf, t| 1.0 - a.get(leaf, t));
        let z = tree.optional_projection(&survive)?;
        let ao = tree.dual_optional_projection(&a)?;
        let m = ao.zip_with(&z, |x, y| x + y);
        Ok(SurvivalBundle { a, ao, z, m })
    }

    /// Replaces `T_n` by two stopping times whose graphs split `{τ = T_n}`.
    /// The first keeps index `n`, the second is appended; an identically
    /// infinite piece is dropped.
    pub fn split_exhausting_sequence(&self, n: usize, splitter: &Splitter) -> Result<ThinTimeModel, ThinTimeError> {
        if n == 0 || n > self.exhausting.len() {
            return Err(ThinTimeError::InvalidSplit(format!("no exhausting time T_{n}")));
        }
        let tree = &self.tree;
        let leaves = tree.leaf_count();
        let tn = &self.exhausting[n - 1];
        let (first, second) = match splitter {
            Splitter::Event(mask) => {
                if mask.len() != leaves {
                    return Err(ThinTimeError::InvalidSplit("event has the wrong length".into()));
                }
                let mut a = vec![None; leaves];
                let mut b = vec![None; leaves];
                for leaf in 0..leaves {
                    if let Some(t) = tn.get(leaf) {
                        let node = tree.node_of(t, leaf);
                        if tree.leaves_of(t, node).any(|o| mask[o] != mask[leaf]) {
                            return Err(ThinTimeError::InvalidSplit(format!(
                                "event is not known at T_{n} on leaf {leaf}"
                            )));
                        }
                        if mask[leaf] {
                            a[leaf] = Some(t);
                        } else {
                            b[leaf] = Some(t);
                        }
                    }
                }
                (
                    StoppingTimeMap::new(tree, a).map_err(|e| ThinTimeError::InvalidSplit(e.to_string()))?,
                    StoppingTimeMap::new(tree, b).map_err(|e| ThinTimeError::InvalidSplit(e.to_string()))?,
                )
            }
            Splitter::Times(a, b) => (a.clone(), b.clone()),
        };
        if first.len() != leaves || second.len() != leaves {
            return Err(ThinTimeError::InvalidSplit("split times have the wrong length".into()));
        }
        for leaf in 0..leaves {
            let (x, y) = (first.get(leaf), second.get(leaf));
            if x.is_some() && x == y {
                return Err(ThinTimeError::InvalidSplit(format!("graphs of the two pieces meet on leaf {leaf}")));
            }
        }

        let mut exhausting = self.exhausting.clone();
        exhausting[n - 1] = first.clone();
        let keep_second = !second.is_never();
        let new_index = exhausting.len() + 1;
        if keep_second {
            exhausting.push(second.clone());
        }
        let mut assignment = self.assignment.clone();
        for leaf in 0..leaves {
            if let Some(label) = assignment[leaf] {
                if label.n == n {
                    let t = self.tau[leaf];
                    if first.get(leaf) == t {
                        // stays on T_n
                    } else if keep_second && second.get(leaf) == t {
                        assignment[leaf] = Some(CellLabel::new(new_index, label.k));
                    } else {
                        return Err(ThinTimeError::InvalidSplit(format!(
                            "leaf {leaf}: τ is not carried by either piece"
                        )));
                    }
                }
            }
        }
        ThinTimeModel::build(Arc::clone(&self.tree), exhausting, assignment, &[]).map_err(|e| match e {
            ThinTimeError::OverlappingGraphs { .. } => ThinTimeError::InvalidSplit(e.to_string()),
            other => other,
        })
    }
}

/// `(log 1/z)^γ`, exactly 0 at `z = 1`.
pub fn entropy_kernel(z: f64, gamma: f64) -> f64 {
    if z >= 1.0 {
        0.0
    } else {
        (-z.ln()).powf(gamma)
    }
}

fn check_disjoint(exhausting: &[StoppingTimeMap], leaves: usize) -> Result<(), ThinTimeError> {
    for leaf in 0..leaves {
        for a in 0..exhausting.len() {
            let Some(ta) = exhausting[a].get(leaf) else { continue };
            for b in a + 1..exhausting.len() {
                if exhausting[b].get(leaf) == Some(ta) {
                    return Err(ThinTimeError::OverlappingGraphs { a: a + 1, b: b + 1, leaf });
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    #[test]
    fn s1_cells_and_z() {
        let tt = fixtures::s1();
        assert_eq!(tt.cells().len(), 1);
        let cell = &tt.cells()[0];
        assert_eq!(cell.label, CellLabel::new(1, 0));
        assert_eq!(cell.probability, 0.5);
        assert_eq!(tt.infinity_cell().unwrap().probability, 0.5);
        assert_eq!(cell.z.values[0], vec![0.5]);
        assert_eq!(cell.z.values[1], vec![0.5, 0.5]);
        assert_eq!(cell.z.values[2], vec![1.0, 0.0, 1.0, 0.0]);
        assert!(tt.partition_of_unity_residual() < 1e-15);
    }

    #[test]
    fn s1_entropy() {
        let tt = fixtures::s1();
        let h = tt.entropy_gamma(1.0).unwrap();
        assert!((h.total - 0.5 * 2f64.ln()).abs() < 1e-12);
        assert!((h.partition_entropy - 2f64.ln()).abs() < 1e-12);
        assert_eq!(tt.entropy_gamma(0.0).unwrap_err(), ThinTimeError::GammaNonPositive(0.0));
    }

    #[test]
    fn stopping_time_has_zero_entropy() {
        let tree = Arc::new(fixtures::coin_tree(2));
        let t1 = StoppingTimeMap::constant(&tree, Some(1)).unwrap();
        let tt = ThinTimeModel::build(Arc::clone(&tree), vec![t1], vec![Some(CellLabel::new(1, 0)); 4], &[]).unwrap();
        assert_eq!(tt.cells().len(), 1);
        assert!(tt.cells()[0].z.values.iter().flatten().all(|&z| z == 1.0));
        for gamma in [0.5, 1.0, 2.0] {
            assert_eq!(tt.entropy_gamma(gamma).unwrap().total, 0.0);
        }
        assert!(tt.cells_known_at_exhausting_times());
    }

    #[test]
    fn marks_known_at_tn_give_zero_entropy() {
        // T_1 = 1, mark = first coin: known at T_1
        let tree = Arc::new(fixtures::coin_tree(2));
        let t1 = StoppingTimeMap::constant(&tree, Some(1)).unwrap();
        let assignment = (0..4).map(|leaf| Some(CellLabel::new(1, (leaf / 2) as u32))).collect();
        let tt = ThinTimeModel::build(tree, vec![t1], assignment, &[]).unwrap();
        assert!(tt.cells_known_at_exhausting_times());
        assert_eq!(tt.entropy_gamma(0.5).unwrap().total, 0.0);
    }

    #[test]
    fn overlapping_graphs_rejected() {
        let tree = Arc::new(fixtures::coin_tree(2));
        let t = StoppingTimeMap::constant(&tree, Some(1)).unwrap();
        let err = ThinTimeModel::build(tree, vec![t.clone(), t], vec![None; 4], &[]).unwrap_err();
        assert!(matches!(err, ThinTimeError::OverlappingGraphs { a: 1, b: 2, .. }));
    }

    #[test]
    fn assignment_errors() {
        let tree = Arc::new(fixtures::coin_tree(2));
        let t = StoppingTimeMap::new(&tree, vec![Some(1), Some(1), None, None]).unwrap();
        let err = ThinTimeModel::build(
            Arc::clone(&tree),
            vec![t.clone()],
            vec![None, None, Some(CellLabel::new(1, 0)), None],
            &[],
        )
        .unwrap_err();
        assert!(matches!(err, ThinTimeError::AssignmentOutsideGraph { leaf: 2, .. }));
        let err = ThinTimeModel::from_time_and_mark(tree, vec![t], &[Some(2), None, None, None], &[0; 4]).unwrap_err();
        assert_eq!(err, ThinTimeError::GraphInclusionViolated { leaf: 0 });
    }

    #[test]
    fn empty_declared_cell_dropped_with_warning() {
        let tree = Arc::new(fixtures::coin_tree(2));
        let t = StoppingTimeMap::constant(&tree, Some(1)).unwrap();
        let tt = ThinTimeModel::build(
            tree,
            vec![t],
            vec![Some(CellLabel::new(1, 0)); 4],
            &[CellLabel::new(1, 0), CellLabel::new(1, 7)],
        )
        .unwrap();
        assert_eq!(tt.cells().len(), 1);
        assert_eq!(tt.warnings().len(), 1);
    }

    #[test]
    fn survival_bundle_examples() {
        let tt = fixtures::s1();
        let b = tt.survival_bundle().unwrap();
        assert_eq!(b.z.values[0], vec![1.0]);
        assert_eq!(b.z.values[1], vec![0.5, 0.5]);
        assert!(tt.tree().check_martingale(&b.m).unwrap().max_residual <= 1e-12);

        let tree = Arc::new(fixtures::coin_tree(2));
        let never = ThinTimeModel::build(Arc::clone(&tree), vec![], vec![None; 4], &[]).unwrap();
        let b = never.survival_bundle().unwrap();
        assert_eq!(b.z, AdaptedProcess::constant(&tree, 1.0));
        assert_eq!(b.ao, AdaptedProcess::constant(&tree, 0.0));
        assert_eq!(b.m, AdaptedProcess::constant(&tree, 1.0));

        let t0 = StoppingTimeMap::constant(&tree, Some(0)).unwrap();
        let at_zero = ThinTimeModel::build(Arc::clone(&tree), vec![t0], vec![Some(CellLabel::new(1, 0)); 4], &[]).unwrap();
        let b = at_zero.survival_bundle().unwrap();
        assert_eq!(b.z, AdaptedProcess::constant(&tree, 0.0));
        assert_eq!(b.ao, AdaptedProcess::constant(&tree, 1.0));
        assert_eq!(b.m, AdaptedProcess::constant(&tree, 1.0));
    }

    #[test]
    fn split_by_first_coin_keeps_entropy() {
        let tt = fixtures::s1();
        let first_coin_heads: Vec<bool> = (0..4).map(|leaf| leaf < 2).collect();
        let split = tt.split_exhausting_sequence(1, &Splitter::Event(first_coin_heads)).unwrap();
        assert_eq!(split.exhausting().len(), 2);
        assert_eq!(split.cells().len(), 2);
        for gamma in [0.5, 1.0, 2.0] {
            let a = tt.entropy_gamma(gamma).unwrap().total;
            let b = split.entropy_gamma(gamma).unwrap().total;
            assert!((a - b).abs() <= 1e-12);
        }
        assert!((split.entropy_gamma(1.0).unwrap().total - 0.346_573_590_279_972_6).abs() < 1e-12);
    }

    #[test]
    fn trivial_split_is_identity() {
        let tt = fixtures::s1();
        let split = tt.split_exhausting_sequence(1, &Splitter::Event(vec![true; 4])).unwrap();
        assert_eq!(split.exhausting(), tt.exhausting());
        assert_eq!(split.assignment(), tt.assignment());
    }

    #[test]
    fn invalid_splits() {
        let tt = fixtures::s1();
        let t1 = tt.exhausting_time(1).clone();
        let err = tt.split_exhausting_sequence(1, &Splitter::Times(t1.clone(), t1)).unwrap_err();
        assert!(matches!(err, ThinTimeError::InvalidSplit(_)));
        // second coin is not known at T_1 = 1
        let second_coin: Vec<bool> = (0..4).map(|leaf| leaf % 2 == 0).collect();
        assert!(matches!(
            tt.split_exhausting_sequence(1, &Splitter::Event(second_coin)),
            Err(ThinTimeError::InvalidSplit(_))
        ));
    }
}
