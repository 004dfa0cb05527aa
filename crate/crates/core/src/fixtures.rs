//! Reference models: the two-coin scenario S1 and seeded random trees with
//! random thin times.

use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::lattice::{LevelSpec, StoppingTimeMap, TreeModel};
use crate::thin_time::{CellLabel, ThinTimeModel};

/// Symmetric binary tree of the given depth. Child 0 is heads.
pub fn coin_tree(depth: usize) -> TreeModel {
    TreeModel::build(depth, &[LevelSpec::shared(vec![0.5, 0.5])]).expect("valid coin tree")
}

/// Two fair coins, `T_1 ≡ 1`, `τ = 1` when the second coin is heads and
/// `τ = ∞` otherwise, single mark 0.
pub fn s1() -> ThinTimeModel {
    let tree = Arc::new(coin_tree(2));
    let t1 = StoppingTimeMap::constant(&tree, Some(1)).expect("constant time");
    let assignment = (0..4)
        .map(|leaf| (leaf % 2 == 0).then_some(CellLabel::new(1, 0)))
        .collect();
    ThinTimeModel::build(tree, vec![t1], assignment, &[]).expect("valid S1")
}

/// Random tree of depth `1..=max_depth` with 2 or 3 branches per level,
/// per-node probabilities bounded away from 0, at most 4096 leaves.
pub fn random_tree(rng: &mut impl Rng, max_depth: usize) -> TreeModel {
    let depth = rng.random_range(1..=max_depth.max(1));
    let mut nodes = 1usize;
    let mut levels = Vec::with_capacity(depth);
    for _ in 0..depth {
        let branches = if nodes * 3 <= 4096 && rng.random_bool(0.3) { 3 } else { 2 };
        let per_node = (0..nodes)
            .map(|_| {
                let raw: Vec<f64> = (0..branches).map(|_| rng.random_range(0.05..1.0)).collect();
                let sum: f64 = raw.iter().sum();
                let mut p: Vec<f64> = raw.iter().map(|x| x / sum).collect();
                // put the rounding error on the last branch
                let head: f64 = p[..branches - 1].iter().sum();
                p[branches - 1] = 1.0 - head;
                p
            })
            .collect();
        levels.push(LevelSpec::per_node(per_node));
        nodes *= branches;
    }
    TreeModel::build(depth, &levels).expect("random tree is valid")
}

/// Up to `count` stopping times with pairwise disjoint graphs. Each
/// undecided node stops with probability `p_stop`.
pub fn random_exhausting(rng: &mut impl Rng, tree: &TreeModel, count: usize, p_stop: f64) -> Vec<StoppingTimeMap> {
    let mut taken: Vec<Vec<bool>> = (0..=tree.depth()).map(|t| vec![false; tree.node_count(t)]).collect();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut times = vec![None; tree.leaf_count()];
        for t in 0..=tree.depth() {
            for node in 0..tree.node_count(t) {
                let leaves = tree.leaves_of(t, node);
                if taken[t][node] || times[leaves.start].is_some() {
                    continue;
                }
                if rng.random_bool(p_stop) {
                    taken[t][node] = true;
                    for leaf in leaves {
                        times[leaf] = Some(t);
                    }
                }
            }
        }
        out.push(StoppingTimeMap::new(tree, times).expect("generated stopping time"));
    }
    out
}

/// Random thin time with up to three exhausting times and marks in
/// `0..marks`; cells are generally not known at `T_n`.
pub fn random_thin_time(seed: u64, max_depth: usize, marks: u32) -> ThinTimeModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tree = Arc::new(random_tree(&mut rng, max_depth));
    let count = rng.random_range(1..=3);
    let exhausting = random_exhausting(&mut rng, &tree, count, 0.4);
    let assignment = (0..tree.leaf_count())
        .map(|leaf| {
            let candidates: Vec<usize> = exhausting
                .iter()
                .enumerate()
                .filter_map(|(i, e)| e.get(leaf).map(|_| i + 1))
                .collect();
            if candidates.is_empty() || rng.random_bool(0.2) {
                None
            } else {
                let n = candidates[rng.random_range(0..candidates.len())];
                Some(CellLabel::new(n, rng.random_range(0..marks.max(1))))
            }
        })
        .collect();
    ThinTimeModel::build(tree, exhausting, assignment, &[]).expect("generated thin time")
}

/// Random stopping time `τ` whose cells are all known at their exhausting
/// time; the γ-entropy of such a pair is exactly zero.
pub fn random_informationless(seed: u64, max_depth: usize, marks: u32) -> ThinTimeModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tree = Arc::new(random_tree(&mut rng, max_depth));
    let count = rng.random_range(1..=3);
    let exhausting = random_exhausting(&mut rng, &tree, count, 0.4);
    let mut assignment: Vec<Option<CellLabel>> = vec![None; tree.leaf_count()];
    for t in 0..=tree.depth() {
        for node in 0..tree.node_count(t) {
            let leaves = tree.leaves_of(t, node);
            let first = leaves.start;
            let Some(n) = exhausting.iter().position(|e| e.get(first) == Some(t)) else { continue };
            // nodes are nested or disjoint, so a block is all free or all taken
            if assignment[first].is_some() || !rng.random_bool(0.6) {
                continue;
            }
            let label = CellLabel::new(n + 1, rng.random_range(0..marks.max(1)));
            for leaf in leaves {
                assignment[leaf] = Some(label);
            }
        }
    }
    ThinTimeModel::build(tree, exhausting, assignment, &[]).expect("generated stopping time")
}
