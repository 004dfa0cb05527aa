//! The progressively enlarged filtration on the tree, conditional
//! expectations given its atoms, and the canonical decomposition of
//! `X = Σ G ΔY` into a martingale part plus drift before and after `τ`.
//!
//! Brackets are the discrete predictable covariations
//! `Δ⟨U, V⟩_s = E[ΔU_s ΔV_s | F_{s-1}]` and integrands are predictable when
//! their value at `s` is known at `s - 1`. With these conventions the drift
//! formula is exact: `X̂` is a martingale in the enlarged filtration up to
//! rounding.

use std::collections::HashMap;

use thiserror::Error;

use crate::lattice::{AdaptedProcess, LatticeError, RandomVariable, RawProcess, TreeModel};
use crate::thin_time::{CellLabel, SurvivalBundle, ThinTimeError, ThinTimeModel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnlargementError {
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error(transparent)]
    ThinTime(#[from] ThinTimeError),
    #[error("cell {0} is empty or unknown")]
    CellEmpty(CellLabel),
    #[error("z vanishes on cell {label} at time {t}")]
    ZeroDenominator { label: CellLabel, t: usize },
    #[error("integrand is not predictable in the enlarged filtration at time {s} (leaf {leaf})")]
    NotPredictable { s: usize, leaf: usize },
    #[error("integrand is not finite at time {s} (leaf {leaf})")]
    NonFiniteIntegrand { s: usize, leaf: usize },
    #[error("integrator is not a martingale (residual {residual:e})")]
    NotMartingale { residual: f64 },
}

/// Atoms of `G_t = F_t ∨ σ(1_{τ<=u}, ξ 1_{τ<=u} : u <= t)` for every `t`.
#[derive(Debug, Clone)]
pub struct EnlargedFiltration {
    /// `atoms[t][leaf]` is the atom id of `leaf` in `G_t`.
    atoms: Vec<Vec<usize>>,
    counts: Vec<usize>,
}

/// What an insider has observed about `(τ, ξ)` by time `t`.
fn observed(tt: &ThinTimeModel, leaf: usize, t: usize) -> Option<CellLabel> {
    match tt.tau()[leaf] {
        Some(s) if s <= t => tt.assignment()[leaf],
        _ => None,
    }
}

pub fn enlarge(tt: &ThinTimeModel) -> EnlargedFiltration {
    let tree = tt.tree();
    let mut atoms = Vec::with_capacity(tree.depth() + 1);
    let mut counts = Vec::with_capacity(tree.depth() + 1);
    for t in 0..=tree.depth() {
        let mut ids: HashMap<(usize, Option<CellLabel>), usize> = HashMap::new();
        let level: Vec<usize> = (0..tree.leaf_count())
            .map(|leaf| {
                let key = (tree.node_of(t, leaf), observed(tt, leaf, t));
                let next = ids.len();
                *ids.entry(key).or_insert(next)
            })
            .collect();
        counts.push(ids.len());
        atoms.push(level);
    }
    EnlargedFiltration { atoms, counts }
}

/// Structural properties of an enlarged filtration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FiltrationChecks {
    pub refines_reference: bool,
    pub increasing: bool,
    pub tau_is_stopping_time: bool,
    pub mark_known_after_tau: bool,
    /// No two atoms inside one `F_t`-atom carry the same observation.
    pub minimal: bool,
}

impl FiltrationChecks {
    pub fn all(&self) -> bool {
        self.refines_reference && self.increasing && self.tau_is_stopping_time && self.mark_known_after_tau && self.minimal
    }
}

impl EnlargedFiltration {
    pub fn atom(&self, t: usize, leaf: usize) -> usize {
        self.atoms[t][leaf]
    }

    pub fn atom_count(&self, t: usize) -> usize {
        self.counts[t]
    }

    /// `E[x | G_t]` as a leaf-indexed random variable.
    pub fn conditional_expectation(&self, tree: &TreeModel, x: &RandomVariable, t: usize) -> RandomVariable {
        let probs = tree.leaf_probs();
        let mut num = vec![0.0; self.counts[t]];
        let mut den = vec![0.0; self.counts[t]];
        for (leaf, &a) in self.atoms[t].iter().enumerate() {
            num[a] += probs[leaf] * x.0[leaf];
            den[a] += probs[leaf];
        }
        RandomVariable(self.atoms[t].iter().map(|&a| num[a] / den[a]).collect())
    }

    /// Martingale check of a leaf-by-time process in the enlarged filtration.
    pub fn check_martingale(&self, tree: &TreeModel, p: &RawProcess) -> GMartingaleReport {
        let mut report = GMartingaleReport::default();
        for t in 0..=tree.depth() {
            let now = RandomVariable(p.column(t));
            let projected = self.conditional_expectation(tree, &now, t);
            let gap = max_abs(&now.0, &projected.0);
            report.adaptedness_residual = report.adaptedness_residual.max(gap);
            if t < tree.depth() {
                let next = self.conditional_expectation(tree, &RandomVariable(p.column(t + 1)), t);
                report.max_residual = report.max_residual.max(max_abs(&next.0, &now.0));
            }
        }
        report
    }

    /// Whether `g_s` is `G_{s-1}`-measurable for `s >= 1`.
    pub fn check_predictable(&self, tree: &TreeModel, g: &RawProcess) -> Result<(), EnlargementError> {
        for s in 1..=tree.depth() {
            let mut seen: HashMap<usize, f64> = HashMap::new();
            for leaf in 0..tree.leaf_count() {
                let v = g.get(leaf, s);
                if !v.is_finite() {
                    return Err(EnlargementError::NonFiniteIntegrand { s, leaf });
                }
                let a = self.atoms[s - 1][leaf];
                match seen.get(&a) {
                    Some(&w) if w != v => return Err(EnlargementError::NotPredictable { s, leaf }),
                    Some(_) => {}
                    None => {
                        seen.insert(a, v);
                    }
                }
            }
        }
        Ok(())
    }

    pub fn validate(&self, tt: &ThinTimeModel) -> FiltrationChecks {
        let tree = tt.tree();
        let leaves = tree.leaf_count();
        let mut checks = FiltrationChecks {
            refines_reference: true,
            increasing: true,
            tau_is_stopping_time: true,
            mark_known_after_tau: true,
            minimal: true,
        };
        for t in 0..=tree.depth() {
            let mut first_of_atom: HashMap<usize, usize> = HashMap::new();
            let mut keys: HashMap<(usize, Option<CellLabel>), usize> = HashMap::new();
            for leaf in 0..leaves {
                let a = self.atoms[t][leaf];
                let rep = *first_of_atom.entry(a).or_insert(leaf);
                if tree.node_of(t, rep) != tree.node_of(t, leaf) {
                    checks.refines_reference = false;
                }
                if t > 0 {
                    let prev_rep = self.atoms[t - 1][rep];
                    if prev_rep != self.atoms[t - 1][leaf] {
                        checks.increasing = false;
                    }
                }
                let stopped = |l: usize| tt.tau()[l].is_some_and(|s| s <= t);
                if stopped(rep) != stopped(leaf) || (stopped(leaf) && tt.tau()[rep] != tt.tau()[leaf]) {
                    checks.tau_is_stopping_time = false;
                }
                if stopped(leaf) && tt.assignment()[rep].map(|c| c.k) != tt.assignment()[leaf].map(|c| c.k) {
                    checks.mark_known_after_tau = false;
                }
                let key = (tree.node_of(t, leaf), observed(tt, leaf, t));
                if *keys.entry(key).or_insert(a) != a {
                    checks.minimal = false;
                }
            }
        }
        checks
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GMartingaleReport {
    /// `max |X_t - E[X_t | G_t]|`.
    pub adaptedness_residual: f64,
    /// `max |E[X_{t+1} | G_t] - X_t|`.
    pub max_residual: f64,
}

impl GMartingaleReport {
    pub fn worst(&self) -> f64 {
        self.adaptedness_residual.max(self.max_residual)
    }
}

#[derive(Debug, Clone)]
pub struct KeyLemmaReport {
    pub label: CellLabel,
    pub t: usize,
    /// Leaves of `{t >= T_n} ∩ C_n^k`.
    pub leaves: Vec<usize>,
    /// `E[X 1_C | F_t] / z_t`.
    pub z_ratio: Vec<f64>,
    /// `E[X | G_t]` from the atoms directly.
    pub direct: Vec<f64>,
    pub max_abs_diff: f64,
}

#[derive(Debug, Clone)]
pub struct DecompositionReport {
    pub x: RawProcess,
    pub hat_x: RawProcess,
    pub drift_before: RawProcess,
    pub drift_after: RawProcess,
    /// Martingale check of `X̂` in the enlarged filtration.
    pub residual: GMartingaleReport,
    /// `max |X - X̂ - drift_before - drift_after|`.
    pub identity_residual: f64,
}

#[derive(Debug, Clone)]
pub struct InformationMartingales {
    pub yb: RawProcess,
    pub ya: RawProcess,
    /// Realized quadratic variations `Σ (ΔY)^2`.
    pub qv_b: RawProcess,
    pub qv_a: RawProcess,
    pub residual_b: GMartingaleReport,
    pub residual_a: GMartingaleReport,
    /// `max |ΔY^b ΔY^a|` over all leaves and times.
    pub support_overlap: f64,
    /// `E[Σ_{n,k} 1_C Σ_{s>T_n} Δ⟨z⟩_s / z_{s-1}^2]`.
    pub expected_bracket_a: f64,
    /// `E[(ΔY^a)^2]` summed to the terminal time.
    pub expected_qv_a: f64,
    pub two_h: f64,
    /// `expected_bracket_a - two_h`: the price of discrete time.
    pub discretization_gap: f64,
}

/// A thin-time model together with its enlarged filtration and survival
/// processes.
pub struct Enlargement<'a> {
    tt: &'a ThinTimeModel,
    filtration: EnlargedFiltration,
    bundle: SurvivalBundle,
}

impl<'a> Enlargement<'a> {
    pub fn new(tt: &'a ThinTimeModel) -> Result<Self, EnlargementError> {
        Ok(Enlargement { tt, filtration: enlarge(tt), bundle: tt.survival_bundle()? })
    }

    pub fn filtration(&self) -> &EnlargedFiltration {
        &self.filtration
    }

    pub fn bundle(&self) -> &SurvivalBundle {
        &self.bundle
    }

    fn tree(&self) -> &TreeModel {
        self.tt.tree()
    }

    /// Evaluates `E[X | G_t]` on `{t >= T_n} ∩ C_n^k` through the z-ratio
    /// and, independently, atom by atom.
    pub fn key_lemma_expectation(
        &self,
        x: &RandomVariable,
        t: usize,
        label: CellLabel,
    ) -> Result<KeyLemmaReport, EnlargementError> {
        let tree = self.tree();
        if x.len() != tree.leaf_count() {
            return Err(LatticeError::ShapeMismatch { expected: tree.leaf_count(), got: x.len() }.into());
        }
        if t > tree.depth() {
            return Err(LatticeError::TimeOutOfRange { t, depth: tree.depth() }.into());
        }
        let cell = self
            .tt
            .cell(label)
            .filter(|c| !label.is_infinity() && c.probability > 0.0)
            .ok_or(EnlargementError::CellEmpty(label))?;
        let tn = self.tt.exhausting_time(label.n);
        let masked = RandomVariable(
            x.0.iter().zip(&cell.indicator).map(|(v, &inside)| if inside { *v } else { 0.0 }).collect(),
        );
        let numerator = tree.conditional_expectation(&masked, t)?;
        let direct_all = self.filtration.conditional_expectation(tree, x, t);

        let mut report = KeyLemmaReport {
            label,
            t,
            leaves: Vec::new(),
            z_ratio: Vec::new(),
            direct: Vec::new(),
            max_abs_diff: 0.0,
        };
        for leaf in 0..tree.leaf_count() {
            if !cell.indicator[leaf] || tn.get(leaf).is_none_or(|s| s > t) {
                continue;
            }
            let node = tree.node_of(t, leaf);
            let z = cell.z.at(t, node);
            if z <= 0.0 {
                return Err(EnlargementError::ZeroDenominator { label, t });
            }
            let ratio = numerator[node] / z;
            report.max_abs_diff = report.max_abs_diff.max((ratio - direct_all.0[leaf]).abs());
            report.leaves.push(leaf);
            report.z_ratio.push(ratio);
            report.direct.push(direct_all.0[leaf]);
        }
        Ok(report)
    }

    /// Canonical decomposition of `X = Σ_{s<=t} G_s ΔY_s` in the enlarged
    /// filtration.
    pub fn decompose(&self, g: &RawProcess, y: &AdaptedProcess) -> Result<DecompositionReport, EnlargementError> {
        let tree = self.tree();
        tree.check_raw(g)?;
        let mres = tree.check_martingale(y)?;
        if !mres.is_martingale() {
            return Err(EnlargementError::NotMartingale { residual: mres.max_residual });
        }
        self.filtration.check_predictable(tree, g)?;

        let cov_m = tree.predictable_covariation(y, &self.bundle.m)?;
        let cov_cells = self
            .tt
            .cells()
            .iter()
            .map(|c| tree.predictable_covariation(y, &c.z))
            .collect::<Result<Vec<_>, _>>()?;

        let leaves = tree.leaf_count();
        let depth = tree.depth();
        let mut x = RawProcess::zeros(leaves, depth);
        let mut before = RawProcess::zeros(leaves, depth);
        let mut after = RawProcess::zeros(leaves, depth);
        for leaf in 0..leaves {
            let tau = self.tt.tau()[leaf];
            let cell_idx = self.tt.assignment()[leaf]
                .and_then(|label| self.tt.cells().iter().position(|c| c.label == label));
            let (mut acc_x, mut acc_b, mut acc_a) = (0.0, 0.0, 0.0);
            for s in 1..=depth {
                let prev = tree.node_of(s - 1, leaf);
                let gs = g.get(leaf, s);
                acc_x += gs * (y.on_leaf(tree, s, leaf) - y.on_leaf(tree, s - 1, leaf));
                if tau.is_none_or(|t| s <= t) {
                    let zl = self.bundle.z.at(s - 1, prev);
                    if zl > 0.0 {
                        acc_b += gs / zl * cov_m[s][prev];
                    }
                } else if let Some(ci) = cell_idx {
                    // s > τ = T_n on this cell
                    let zl = self.tt.cells()[ci].z.at(s - 1, prev);
                    if zl > 0.0 {
                        acc_a += gs / zl * cov_cells[ci][s][prev];
                    }
                }
                x.set(leaf, s, acc_x);
                before.set(leaf, s, acc_b);
                after.set(leaf, s, acc_a);
            }
        }
        let hat_x = RawProcess::from_fn(leaves, depth, |leaf, t| {
            x.get(leaf, t) - before.get(leaf, t) - after.get(leaf, t)
        });
        let residual = self.filtration.check_martingale(tree, &hat_x);
        let identity_residual = (0..leaves)
            .flat_map(|leaf| (0..=depth).map(move |t| (leaf, t)))
            .map(|(leaf, t)| (x.get(leaf, t) - hat_x.get(leaf, t) - before.get(leaf, t) - after.get(leaf, t)).abs())
            .fold(0.0, f64::max);
        Ok(DecompositionReport { x, hat_x, drift_before: before, drift_after: after, residual, identity_residual })
    }

    /// The martingales `Y^b` (before `τ`) and `Y^a` (after `T_n` on each
    /// cell) built from the enlarged martingale parts of `m` and `z^{n,k}`.
    pub fn information_martingales(&self) -> Result<InformationMartingales, EnlargementError> {
        let tree = self.tree();
        let leaves = tree.leaf_count();
        let depth = tree.depth();
        let m = &self.bundle.m;
        let z_surv = &self.bundle.z;
        let cov_mm = tree.predictable_covariation(m, m)?;
        let cov_zz = self
            .tt
            .cells()
            .iter()
            .map(|c| tree.predictable_covariation(&c.z, &c.z))
            .collect::<Result<Vec<_>, _>>()?;

        let mut yb = RawProcess::zeros(leaves, depth);
        let mut ya = RawProcess::zeros(leaves, depth);
        let mut qv_b = RawProcess::zeros(leaves, depth);
        let mut qv_a = RawProcess::zeros(leaves, depth);
        let mut overlap: f64 = 0.0;
        let mut expected_bracket_a = 0.0;
        let probs = tree.leaf_probs();
        for leaf in 0..leaves {
            let tau = self.tt.tau()[leaf];
            let cell_idx = self.tt.assignment()[leaf]
                .and_then(|label| self.tt.cells().iter().position(|c| c.label == label));
            let (mut b, mut a, mut qb, mut qa, mut bracket) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for s in 1..=depth {
                let prev = tree.node_of(s - 1, leaf);
                let mut db = 0.0;
                let mut da = 0.0;
                if tau.is_none_or(|t| s <= t) {
                    let zl = z_surv.at(s - 1, prev);
                    if zl > 0.0 {
                        let dm = m.on_leaf(tree, s, leaf) - m.at(s - 1, prev);
                        db = (dm - cov_mm[s][prev] / zl) / zl;
                    }
                } else if let Some(ci) = cell_idx {
                    let z = &self.tt.cells()[ci].z;
                    let zl = z.at(s - 1, prev);
                    if zl > 0.0 {
                        let dz = z.on_leaf(tree, s, leaf) - zl;
                        da = (dz - cov_zz[ci][s][prev] / zl) / zl;
                        bracket += cov_zz[ci][s][prev] / (zl * zl);
                    }
                }
                overlap = overlap.max((db * da).abs());
                b += db;
                a += da;
                qb += db * db;
                qa += da * da;
                yb.set(leaf, s, b);
                ya.set(leaf, s, a);
                qv_b.set(leaf, s, qb);
                qv_a.set(leaf, s, qa);
            }
            expected_bracket_a += probs[leaf] * bracket;
        }
        let expected_qv_a = (0..leaves).map(|leaf| probs[leaf] * qv_a.get(leaf, depth)).sum();
        let two_h = 2.0 * self.tt.entropy_gamma(1.0)?.total;
        Ok(InformationMartingales {
            residual_b: self.filtration.check_martingale(tree, &yb),
            residual_a: self.filtration.check_martingale(tree, &ya),
            yb,
            ya,
            qv_b,
            qv_a,
            support_overlap: overlap,
            expected_bracket_a,
            expected_qv_a,
            two_h,
            discretization_gap: expected_bracket_a - two_h,
        })
    }
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
