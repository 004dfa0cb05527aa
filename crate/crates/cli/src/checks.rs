//! Dispatches each operation to the library checks and turns their reports
//! into records.

use std::time::Instant;

use anyhow::{bail, Context, Result};
use rand::Rng;

use thinlab_core::enlargement::Enlargement;
use thinlab_core::market::{additional_utility, build_market, UtilityReport};
use thinlab_core::path_engine::{
    bias_shrinks, bracket_entropy_check, cell_frequency_check, grid_bias_study, infimum_law_check, lem1_ratio_check,
    martingale_probe_check, path_rng, simulate, xlogx_identity_check, BiasPoint, GridScenario, PathBatch, SimConfig,
    ZDriver,
};
use thinlab_core::stats::Estimate;
use thinlab_core::thin_time::{entropy_kernel, Splitter};
use thinlab_core::{RandomVariable, RawProcess, ThinTimeModel};

use crate::report::{Record, Status};
use crate::scenario::{Backend, ScenarioError, ScenarioFile};

/// Largest accepted residual of an exact identity on the tree.
const EXACT_TOL: f64 = 1e-10;
/// Largest accepted error of an enumerated entropy.
const ENTROPY_TOL: f64 = 1e-12;
/// Moments above this count as infinite.
const FINITE_CAP: f64 = 1e6;
/// Largest accepted |z-score| of any martingale probe increment.
const PROBE_Z: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Operation {
    Entropy,
    Decompose,
    VerifyBracket,
    VerifyInfimum,
    VerifyLem1,
    Utility,
    All,
}

impl Operation {
    pub const EACH: [Operation; 6] = [
        Operation::Entropy,
        Operation::Decompose,
        Operation::VerifyBracket,
        Operation::VerifyInfimum,
        Operation::VerifyLem1,
        Operation::Utility,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Operation::Entropy => "entropy",
            Operation::Decompose => "decompose",
            Operation::VerifyBracket => "verify-bracket",
            Operation::VerifyInfimum => "verify-infimum",
            Operation::VerifyLem1 => "verify-lem1",
            Operation::Utility => "utility",
            Operation::All => "all",
        }
    }

    pub fn supports(self, backend: Backend) -> bool {
        match self {
            Operation::Entropy | Operation::All => true,
            Operation::Decompose => backend == Backend::Tree,
            _ => backend == Backend::Grid,
        }
    }
}

fn fmt_num(x: f64) -> String {
    format!("{x}")
}

pub struct Runner<'a> {
    scenario: &'a ScenarioFile,
    threads: Option<usize>,
    tree: Option<ThinTimeModel>,
    batch: Option<PathBatch>,
    pub utility: Option<UtilityReport>,
}

impl<'a> Runner<'a> {
    pub fn new(scenario: &'a ScenarioFile, threads: Option<usize>) -> Runner<'a> {
        Runner { scenario, threads, tree: None, batch: None, utility: None }
    }

    /// Records of `op`; an operation the backend lacks is an error unless it
    /// runs as part of `all`, where it is reported as skipped.
    pub fn run(&mut self, op: Operation) -> Result<Vec<Record>> {
        if op == Operation::All {
            let mut out = Vec::new();
            for each in Operation::EACH {
                if !each.supports(self.scenario.backend) || (each == Operation::Utility && self.scenario.market.is_none()) {
                    out.push(Record::skip(each.name()));
                } else {
                    out.extend(self.run(each)?);
                }
            }
            return Ok(out);
        }
        if !op.supports(self.scenario.backend) {
            return Err(ScenarioError::BackendMismatch { operation: op.name().into(), backend: self.scenario.backend }.into());
        }
        let start = Instant::now();
        let mut records = match (op, self.scenario.backend) {
            (Operation::Entropy, Backend::Tree) => self.tree_entropy()?,
            (Operation::Entropy, Backend::Grid) => self.grid_entropy()?,
            (Operation::Decompose, _) => self.decompose()?,
            (Operation::VerifyBracket, _) => self.verify_bracket()?,
            (Operation::VerifyInfimum, _) => self.verify_infimum()?,
            (Operation::VerifyLem1, _) => self.verify_lem1()?,
            (Operation::Utility, _) => self.utility()?,
            (Operation::All, _) => unreachable!("handled above"),
        };
        let ms = start.elapsed().as_millis();
        for r in &mut records {
            r.runtime_ms = ms;
        }
        Ok(records)
    }

    fn reference(&self, check: &str, builtin: Option<f64>) -> Option<f64> {
        self.scenario.expected.get(check).copied().or(builtin)
    }

    fn config(&self) -> SimConfig {
        SimConfig {
            n_paths: self.scenario.run.n_paths,
            master_seed: Some(self.scenario.run.master_seed),
            threads: self.threads,
            record_paths: self.scenario.output.record_paths,
        }
    }

    /// Monte Carlo estimate against a reference, within `confidence` SE.
    fn estimate(&self, check: String, e: Estimate, builtin: Option<f64>) -> Record {
        let conf = self.scenario.run.confidence;
        match self.reference(&check, builtin) {
            Some(r) => {
                // constant samples still carry rounding noise in their SE
                let tol = conf * e.se.max(0.0) + ENTROPY_TOL * (1.0 + r.abs());
                Record::within(check, e.mean, r, tol)
            }
            None => Record::info(check, e.mean, None),
        }
    }

    // ------------------------------------------------------------ tree

    fn tree_model(&mut self) -> Result<&ThinTimeModel> {
        if self.tree.is_none() {
            self.tree = Some(self.scenario.tree_model()?);
        }
        Ok(self.tree.as_ref().expect("just built"))
    }

    fn tree_entropy(&mut self) -> Result<Vec<Record>> {
        let gammas = self.scenario.run.gammas.clone();
        let tt = self.tree_model()?.clone();
        let mut out = Vec::new();
        let split = split_first_time(&tt)?;
        for &g in &gammas {
            let report = tt.entropy_gamma(g)?;
            let name = format!("H_{}", fmt_num(g));
            let reference = self.reference(&name, Some(entropy_by_enumeration(&tt, g)));
            out.push(Record::within(name, report.total, reference.expect("built-in reference"), ENTROPY_TOL));
            if let Some(split) = &split {
                let h = split.entropy_gamma(g)?.total;
                out.push(Record::within(format!("H_{}_after_split", fmt_num(g)), h, report.total, ENTROPY_TOL));
            }
        }
        out.push(Record::within("partition_of_unity", tt.partition_of_unity_residual(), 0.0, EXACT_TOL));
        out.push(Record::info("partition_entropy", tt.entropy_gamma(1.0)?.partition_entropy, None));
        Ok(out)
    }

    fn decompose(&mut self) -> Result<Vec<Record>> {
        let seed = self.scenario.run.master_seed;
        let tt = self.tree_model()?.clone();
        let tree = tt.tree();
        let e = Enlargement::new(&tt)?;
        let mut out = Vec::new();

        let failed = {
            let c = e.filtration().validate(&tt);
            [c.refines_reference, c.increasing, c.tau_is_stopping_time, c.mark_known_after_tau, c.minimal]
                .iter()
                .filter(|ok| !**ok)
                .count()
        };
        out.push(Record::within("enlarged_filtration_failed_properties", failed as f64, 0.0, 0.0));
        let m = tree.check_martingale(&e.bundle().m)?;
        out.push(Record::within("m_martingale_residual", m.max_residual, 0.0, EXACT_TOL));

        let mut rng = path_rng(seed, 0);
        let x = RandomVariable((0..tree.leaf_count()).map(|_| rng.random_range(-1.0..1.0)).collect());
        let mut key = 0.0f64;
        for cell in tt.cells().iter().filter(|c| c.probability > 0.0) {
            for t in 0..=tree.depth() {
                key = key.max(e.key_lemma_expectation(&x, t, cell.label)?.max_abs_diff);
            }
        }
        out.push(Record::within("key_lemma_residual", key, 0.0, EXACT_TOL));

        let y = tree.martingale(&x)?;
        let g = RawProcess::from_fn(tree.leaf_count(), tree.depth(), |leaf, s| {
            if s == 0 {
                1.0
            } else {
                1.0 + (tree.node_of(s - 1, leaf) % 3) as f64
            }
        });
        let d = e.decompose(&g, &y)?;
        out.push(Record::within("compensated_integral_residual", d.residual.worst(), 0.0, EXACT_TOL));
        out.push(Record::within("decomposition_identity_residual", d.identity_residual, 0.0, EXACT_TOL));

        let im = e.information_martingales()?;
        out.push(Record::within("y_b_martingale_residual", im.residual_b.worst(), 0.0, EXACT_TOL));
        out.push(Record::within("y_a_martingale_residual", im.residual_a.worst(), 0.0, EXACT_TOL));
        out.push(Record::within("y_a_y_b_support_overlap", im.support_overlap, 0.0, 0.0));
        out.push(Record::info("expected_bracket_y_a", im.expected_bracket_a, Some(im.two_h)));
        out.push(Record::info("expected_qv_y_a", im.expected_qv_a, Some(im.two_h)));
        Ok(out)
    }

    // ------------------------------------------------------------ grid

    fn grid(&self) -> Result<GridScenario> {
        Ok(self.scenario.grid_scenario()?)
    }

    fn batch(&mut self) -> Result<&PathBatch> {
        if self.batch.is_none() {
            let sc = self.grid()?;
            self.batch = Some(simulate(&sc, &self.config()).context("path simulation")?);
        }
        Ok(self.batch.as_ref().expect("just simulated"))
    }

    /// The simulated batch, if any operation needed one.
    pub fn simulated(&self) -> Option<&PathBatch> {
        self.batch.as_ref()
    }

    fn grid_entropy(&mut self) -> Result<Vec<Record>> {
        let gammas = self.scenario.run.gammas.clone();
        let sc = self.grid()?;
        let batch = self.batch()?.clone();
        // with every T_n = 0 the entropy is a closed form in z_0
        let at_zero = sc.cells.iter().all(|c| sc.exhausting_times[c.label.n - 1] == 0.0);
        let mut out = Vec::new();
        for &g in &gammas {
            let exact = at_zero.then(|| sc.cells.iter().map(|c| c.z0 * entropy_kernel(c.z0, g)).sum::<f64>());
            let smoothed = batch.entropy_gamma(g);
            out.push(self.estimate(format!("H_{}", fmt_num(g)), smoothed, exact));
            // realized-cell estimator; the paired difference has mean zero
            let direct: Vec<f64> = batch
                .paths
                .iter()
                .zip(batch.entropy_samples(g))
                .map(|(p, s)| p.cell.map_or(0.0, |c| entropy_kernel(p.z_exhausting[c], g)) - s)
                .collect();
            out.push(self.estimate(format!("H_{}_realized_minus_smoothed", fmt_num(g)), Estimate::from_samples(&direct), Some(0.0)));
        }
        for row in cell_frequency_check(&batch) {
            let name = format!("cell_frequency_{}", row.coordinate);
            let f = row.frequency;
            out.push(Record::within(name, f.mean, row.z0, f.multiplier * f.se.max(1e-300)));
        }
        Ok(out)
    }

    fn verify_bracket(&mut self) -> Result<Vec<Record>> {
        let conf = self.scenario.run.confidence;
        let bias_steps = self.scenario.run.bias_steps.clone();
        let sc = self.grid()?;
        let config = self.config();
        let batch = self.batch()?.clone();
        let r = bracket_entropy_check(&batch)?;
        let mut out = vec![
            Record::info("bracket_y_a", r.bracket.mean, Some(r.two_h.mean)),
            Record::info("two_h", r.two_h.mean, None),
            Record::info("bracket_tail_mean", r.tail_budget, None),
        ];

        let mut allowance = 0.0;
        if !bias_steps.is_empty() {
            let coarser: Vec<usize> = bias_steps.into_iter().filter(|&k| k != sc.steps).collect();
            let mut points = grid_bias_study(&sc, &config, &coarser)?;
            points.push(BiasPoint { steps: sc.steps, difference: r.difference, tail_budget: r.tail_budget });
            points.sort_by_key(|p| p.steps);
            for p in &points {
                out.push(Record::info(format!("bracket_minus_two_h_steps_{}", p.steps), p.difference.mean, Some(0.0)));
            }
            let n = points.len();
            if n >= 2 {
                allowance = (points[n - 1].difference.mean - points[n - 2].difference.mean).abs();
            }
            out.push(Record::within("grid_bias_shrinks", f64::from(u8::from(bias_shrinks(&points))), 1.0, 0.0));
        }
        let d = r.difference;
        out.push(Record::within("bracket_minus_two_h", d.mean, 0.0, conf * d.se + allowance));

        for probe in 0..batch.xlogx_steps.len() {
            let x = xlogx_identity_check(&batch, probe)?;
            out.push(Record::within(format!("xlogx_residual_t_{}", fmt_num(x.time)), x.residual.mean, 0.0, conf * x.residual.se));
        }
        out.push(Record::within("martingale_probe_max_abs_z", martingale_probe_check(&batch), 0.0, PROBE_Z));
        out.push(Record::within("simplex_error", batch.max_simplex_error(), 0.0, 1e-9));
        out.push(Record::info("clamped_steps", batch.total_clamps() as f64, None));
        out.push(Record::info("absorbed_fraction", batch.absorbed_fraction(), None));
        Ok(out)
    }

    fn verify_infimum(&mut self) -> Result<Vec<Record>> {
        let fractions = self.scenario.run.infimum_fractions.clone();
        let batch = self.batch()?.clone();
        let names: Vec<String> = fractions.iter().map(|f| format!("Q(I<{}z_Tn)", fmt_num(*f))).collect();
        if batch.scenario.driver != ZDriver::AbsorbedBrownian {
            // other drivers only observe the infimum on the grid
            let mut out: Vec<Record> = names.into_iter().map(Record::skip).collect();
            out.push(Record::skip("infimum_ks"));
            return Ok(out);
        }
        let r = infimum_law_check(&batch, &fractions)?;
        let tol = r.ks_critical + 2.0 * batch.scenario.dt().sqrt();
        let mut out: Vec<Record> = r
            .rows
            .iter()
            .zip(names)
            .map(|(row, name)| Record::within(name, row.empirical.mean, row.formula, tol))
            .collect();
        out.push(Record::within("infimum_ks", r.ks, 0.0, tol));
        out.push(Record::within("infimum_range_violations", r.violations as f64, 0.0, 0.0));
        out.push(Record::info("infimum_cell_paths", r.n_cell as f64, None));
        Ok(out)
    }

    fn verify_lem1(&mut self) -> Result<Vec<Record>> {
        let gammas = self.scenario.run.gammas.clone();
        let batch = self.batch()?.clone();
        let mut out = Vec::new();
        for g in gammas {
            let r = lem1_ratio_check(&batch, g)?;
            let tag = fmt_num(g);
            out.push(Record::info(format!("moment_log_inverse_infimum_gamma_{tag}"), r.log_infimum.mean, None));
            out.push(Record::info(format!("moment_bracket_y_a_gamma_{tag}"), r.bracket.mean, None));
            let largest = r.log_infimum.mean.max(r.bracket.mean);
            let finite = largest.is_finite() && largest <= FINITE_CAP;
            out.push(Record::new(format!("moments_finite_gamma_{tag}"), Some(largest), None, Some(FINITE_CAP), Status::judged(finite)));
            match r.ratio {
                Some(q) => out.push(Record::info(format!("moment_ratio_gamma_{tag}"), q, None)),
                None => out.push(Record::skip(format!("moment_ratio_gamma_{tag}"))),
            }
        }
        Ok(out)
    }

    fn utility(&mut self) -> Result<Vec<Record>> {
        let Some(spec) = &self.scenario.market else {
            bail!(ScenarioError::Schema("`utility` needs a `market` section".into()));
        };
        let conf = self.scenario.run.confidence;
        let ms = build_market(&self.grid()?, spec).map_err(|e| ScenarioError::Schema(format!("market: {e}")))?;
        let r = additional_utility(&ms, &self.config())?;
        let gap = |name: &str, value: f64, reference: f64, e: &Estimate| {
            Record::new(name, Some(value), Some(reference), Some(conf * e.se), Status::judged(e.mean.abs() <= conf * e.se))
        };
        // the realized-cell and smoothed entropies are compared with their
        // combined standard error
        let combined = (r.entropy_direct.se.powi(2) + r.entropy.se.powi(2)).sqrt();
        let mut out = vec![
            Record::info("additional_utility", r.additional_utility.mean, None),
            gap("utility_vs_bracket_b_plus_h", r.additional_utility.mean, r.prediction.mean, &r.prediction_gap),
            Record::info("utility_vs_half_bracket_b_plus_h", r.additional_utility.mean, Some(r.prediction_half.mean)),
            gap("utility_vs_half_energy", r.additional_utility.mean, r.half_mu2.mean, &r.half_mu2_gap),
            Record::within("cross_term", r.cross_term.mean, 0.0, conf * r.cross_term.se),
            Record::within("regular_value", r.value_regular.mean, r.merton_value, conf * r.value_regular.se),
            Record::info("insider_value", r.value_insider.mean, None),
            Record::info("bracket_b_at_tau", r.bracket_b.mean, None),
            Record::info("bracket_a_at_horizon", r.bracket_a.mean, None),
            Record::info("entropy", r.entropy.mean, None),
            Record::within("entropy_realized", r.entropy_direct.mean, r.entropy.mean, conf * combined),
            Record::within("energy_split_residual", r.split_residual, 0.0, 1e-9),
            Record::info("capped_steps", r.capped_steps as f64, None),
        ];
        for row in &r.dominance {
            let a = &row.insider_advantage;
            out.push(Record::new(
                format!("insider_beats_{}", row.strategy),
                Some(a.mean),
                Some(0.0),
                Some(conf * a.se),
                Status::judged(a.mean >= -conf * a.se),
            ));
        }
        self.utility = Some(r);
        Ok(out)
    }
}

/// Replaces `T_1` by two pieces along the parity of its node, when `T_1`
/// is finite somewhere and both pieces are non-empty.
fn split_first_time(tt: &ThinTimeModel) -> Result<Option<ThinTimeModel>> {
    if tt.exhausting().is_empty() {
        return Ok(None);
    }
    let tree = tt.tree();
    let t1 = tt.exhausting_time(1);
    let mask: Vec<bool> = (0..tree.leaf_count())
        .map(|leaf| t1.get(leaf).is_some_and(|t| tree.node_of(t, leaf) % 2 == 0))
        .collect();
    let on = (0..mask.len()).any(|l| t1.get(l).is_some() && mask[l]);
    let off = (0..mask.len()).any(|l| t1.get(l).is_some() && !mask[l]);
    if !(on && off) {
        return Ok(None);
    }
    Ok(Some(tt.split_exhausting_sequence(1, &Splitter::Event(mask))?))
}

/// `H_γ` leaf by leaf: `z` of the realized cell at its exhausting time is
/// the cell's share of the probability of the leaf's node.
fn entropy_by_enumeration(tt: &ThinTimeModel, gamma: f64) -> f64 {
    let tree = tt.tree();
    let probs = tree.leaf_probs();
    let mut h = 0.0;
    for leaf in 0..tree.leaf_count() {
        let Some(label) = tt.assignment()[leaf] else { continue };
        let Some(t) = tt.exhausting_time(label.n).get(leaf) else { continue };
        let block = tree.leaves_of(t, tree.node_of(t, leaf));
        let total: f64 = block.clone().map(|l| probs[l]).sum();
        let inside: f64 = block.filter(|&l| tt.assignment()[l] == Some(label)).map(|l| probs[l]).sum();
        h += probs[leaf] * entropy_kernel(inside / total, gamma);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use thinlab_core::fixtures;

    #[test]
    fn enumeration_matches_s1() {
        let tt = fixtures::s1();
        assert!((entropy_by_enumeration(&tt, 1.0) - 0.5 * 2f64.ln()).abs() < 1e-15);
        assert!((entropy_by_enumeration(&tt, 2.0) - 0.5 * 2f64.ln().powi(2)).abs() < 1e-15);
    }

    #[test]
    fn split_keeps_s1_entropy() {
        let tt = fixtures::s1();
        let split = split_first_time(&tt).unwrap().expect("S1 splits");
        assert_eq!(split.exhausting().len(), 2);
        let a = tt.entropy_gamma(1.0).unwrap().total;
        let b = split.entropy_gamma(1.0).unwrap().total;
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn support_matrix() {
        assert!(Operation::Decompose.supports(Backend::Tree));
        assert!(!Operation::Decompose.supports(Backend::Grid));
        assert!(!Operation::VerifyBracket.supports(Backend::Tree));
        assert!(Operation::Entropy.supports(Backend::Grid));
    }
}
