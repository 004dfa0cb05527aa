use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use thinlab_core::enlargement::{enlarge, Enlargement};
use thinlab_core::fixtures;
use thinlab_core::market::{build_market, MarketSpec};
use thinlab_core::path_engine::{infimum_cdf, simulate, GridCell, GridScenario, SimConfig, TerminalPartition, ZDriver};
use thinlab_core::stats::Estimate;
use thinlab_core::thin_time::{entropy_kernel, Splitter};
use thinlab_core::{CellLabel, RandomVariable, RawProcess, ThinTimeModel};

fn model(seed: u64, informationless: bool) -> ThinTimeModel {
    if informationless {
        fixtures::random_informationless(seed, 5, 3)
    } else {
        fixtures::random_thin_time(seed, 5, 3)
    }
}

fn values(seed: u64, n: usize) -> RandomVariable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    RandomVariable((0..n).map(|_| rng.random_range(-3.0..3.0)).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn tower_property(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tree = fixtures::random_tree(&mut rng, 6);
        let x = values(seed, tree.leaf_count());
        let m = tree.martingale(&x).unwrap();
        prop_assert!(tree.check_martingale(&m).unwrap().max_residual <= 1e-12);
        for s in 0..=tree.depth() {
            for t in s..=tree.depth() {
                let inner = RandomVariable((0..tree.leaf_count()).map(|l| m.on_leaf(&tree, t, l)).collect());
                let outer = tree.conditional_expectation(&inner, s).unwrap();
                for node in 0..tree.node_count(s) {
                    prop_assert!((outer[node] - m.at(s, node)).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn projections_fix_adapted_processes(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tree = fixtures::random_tree(&mut rng, 6);
        let x = values(seed, tree.leaf_count());
        let m = tree.martingale(&x).unwrap();
        let back = tree.optional_projection(&tree.lift(&m)).unwrap();
        prop_assert!(back.max_abs_diff(&m) <= 1e-12);
        prop_assert!((tree.expectation(&x) - m.at(0, 0)).abs() <= 1e-12);
    }

    #[test]
    fn survival_decomposition(seed in any::<u64>(), informationless in any::<bool>()) {
        let tt = model(seed, informationless);
        let tree = tt.tree();
        let b = tt.survival_bundle().unwrap();
        prop_assert!(tree.check_martingale(&b.m).unwrap().max_residual <= 1e-12);
        for t in 0..=tree.depth() {
            for node in 0..tree.node_count(t) {
                let z = b.z.at(t, node);
                prop_assert!((-1e-15..=1.0 + 1e-15).contains(&z));
                if t > 0 {
                    prop_assert!(b.ao.at(t, node) >= b.ao.left(tree, t, node) - 1e-15);
                }
            }
        }
    }

    #[test]
    fn cells_partition_unity(seed in any::<u64>(), informationless in any::<bool>()) {
        let tt = model(seed, informationless);
        prop_assert!(tt.partition_of_unity_residual() <= 1e-12);
        let total: f64 = tt.all_cells().map(|c| c.probability).sum();
        prop_assert!((total - 1.0).abs() <= 1e-12);
        for leaf in 0..tt.tree().leaf_count() {
            let owners = tt.all_cells().filter(|c| c.indicator[leaf]).count();
            prop_assert_eq!(owners, 1);
        }
    }

    #[test]
    fn entropy_is_nonnegative_and_truncation_monotone(seed in any::<u64>(), gamma in 0.1f64..3.0) {
        let tt = model(seed, false);
        let r = tt.entropy_gamma(gamma).unwrap();
        prop_assert!(r.total >= 0.0);
        let sums = r.partial_sums();
        prop_assert!(sums.windows(2).all(|w| w[1] >= w[0]));
        if let Some(last) = sums.last() {
            prop_assert!((last - r.total).abs() <= 1e-12);
        }
    }

    #[test]
    fn entropy_invariant_under_splits(seed in any::<u64>(), gamma in 0.1f64..3.0) {
        let tt = model(seed, false);
        prop_assume!(!tt.exhausting().is_empty());
        let tree = tt.tree();
        let t1 = tt.exhausting_time(1);
        let mask: Vec<bool> = (0..tree.leaf_count())
            .map(|leaf| t1.get(leaf).is_some_and(|t| (tree.node_of(t, leaf) + seed as usize) % 2 == 0))
            .collect();
        let split = tt.split_exhausting_sequence(1, &Splitter::Event(mask)).unwrap();
        let a = tt.entropy_gamma(gamma).unwrap().total;
        let b = split.entropy_gamma(gamma).unwrap().total;
        prop_assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn informationless_pairs_have_zero_entropy(seed in any::<u64>(), gamma in 0.1f64..3.0) {
        let tt = model(seed, true);
        prop_assert_eq!(tt.entropy_gamma(gamma).unwrap().total, 0.0);
    }

    #[test]
    fn enlarged_filtration_is_consistent(seed in any::<u64>(), informationless in any::<bool>()) {
        let tt = model(seed, informationless);
        let g = enlarge(&tt);
        prop_assert!(g.validate(&tt).all());
        for t in 0..=tt.tree().depth() {
            prop_assert!(g.atom_count(t) >= tt.tree().node_count(t));
        }
    }

    #[test]
    fn key_lemma_matches_atoms(seed in any::<u64>()) {
        let tt = model(seed, false);
        let e = Enlargement::new(&tt).unwrap();
        let x = values(seed, tt.tree().leaf_count());
        for cell in tt.cells().iter().filter(|c| c.probability > 0.0) {
            for t in 0..=tt.tree().depth() {
                prop_assert!(e.key_lemma_expectation(&x, t, cell.label).unwrap().max_abs_diff <= 1e-12);
            }
        }
    }

    #[test]
    fn compensated_integral_is_enlarged_martingale(seed in any::<u64>()) {
        let tt = model(seed, false);
        let tree = tt.tree();
        let e = Enlargement::new(&tt).unwrap();
        let y = tree.martingale(&values(seed, tree.leaf_count())).unwrap();
        let g = RawProcess::from_fn(tree.leaf_count(), tree.depth(), |leaf, s| {
            if s == 0 { 0.5 } else { (tree.node_of(s - 1, leaf) % 5) as f64 - 2.0 }
        });
        let d = e.decompose(&g, &y).unwrap();
        prop_assert!(d.residual.worst() <= 1e-11);
        prop_assert!(d.identity_residual <= 1e-12);
    }

    #[test]
    fn information_martingales_have_disjoint_support(seed in any::<u64>()) {
        let tt = model(seed, false);
        let im = Enlargement::new(&tt).unwrap().information_martingales().unwrap();
        prop_assert_eq!(im.support_overlap, 0.0);
        prop_assert!(im.residual_a.worst() <= 1e-11);
        prop_assert!(im.residual_b.worst() <= 1e-11);
        prop_assert!(im.expected_bracket_a >= 0.0);
    }

    #[test]
    fn entropy_kernel_is_monotone(z in 1e-12f64..1.0, gamma in 0.1f64..3.0) {
        prop_assert!(entropy_kernel(z, gamma) >= 0.0);
        prop_assert!(entropy_kernel(z, gamma) >= entropy_kernel((z * 1.5).min(1.0), gamma));
        prop_assert_eq!(entropy_kernel(1.0, gamma), 0.0);
    }

    #[test]
    fn infimum_law_is_a_distribution(z in 0.01f64..0.99, a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let (f_lo, f_hi) = (infimum_cdf(lo * z, z), infimum_cdf(hi * z, z));
        prop_assert!((0.0..=1.0).contains(&f_lo) && f_lo <= f_hi + 1e-15);
        prop_assert!((infimum_cdf(z, z) - 1.0).abs() <= 1e-15);
    }

    #[test]
    fn terminal_partition_probabilities(masses in prop::collection::vec(0.05f64..1.0, 2..5), t in 0.0f64..0.99, w in -3.0f64..3.0) {
        let total: f64 = masses.iter().sum();
        let masses: Vec<f64> = masses.iter().map(|m| m / total).collect();
        let p = TerminalPartition::new(1.0, &masses);
        let s: f64 = (0..masses.len()).map(|i| p.z(i, t, w)).sum();
        prop_assert!((s - 1.0).abs() <= 1e-12);
        for i in 0..masses.len() {
            prop_assert!((p.z(i, 0.0, 0.0) - masses[i]).abs() <= 1e-9);
            let h = 1e-5;
            let fd = (p.z(i, t, w + h) - p.z(i, t, w - h)) / (2.0 * h);
            prop_assert!((fd - p.dz_dw(i, t, w)).abs() <= 1e-6);
        }
    }

    #[test]
    fn pre_tau_drift_is_log_derivative_of_survival(s in 1usize..60, w in -2.0f64..2.0) {
        let grid = GridScenario {
            horizon: 1.0,
            steps: 64,
            driver: ZDriver::TerminalPartition,
            exhausting_times: vec![0.25, 0.5, 1.0],
            cells: vec![
                GridCell { label: CellLabel::new(2, 0), z0: 0.3 },
                GridCell { label: CellLabel::new(1, 0), z0: 0.3 },
                GridCell { label: CellLabel::new(3, 0), z0: 0.4 },
            ],
            run_to_absorption: false,
        };
        let ms = build_market(&grid, &MarketSpec::default()).unwrap();
        let exact = ms.pre_tau_drift(s, w);
        let fd = ms.pre_tau_drift_fd(s, w, 1e-5);
        prop_assert!((exact - fd).abs() <= 1e-5 * (1.0 + exact.abs()));
    }

    #[test]
    fn estimate_tolerance_is_symmetric(xs in prop::collection::vec(-5.0f64..5.0, 2..50), shift in -1.0f64..1.0) {
        let e = Estimate::from_samples(&xs);
        prop_assert_eq!(e.agrees_with(e.mean + shift, 0.0), e.agrees_with(e.mean - shift, 0.0));
        prop_assert!(e.agrees_with(e.mean, 0.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn simulation_is_reproducible_and_on_the_simplex(seed in any::<u64>(), logistic in any::<bool>(), z0 in 0.1f64..0.45) {
        let driver = if logistic { ZDriver::LogisticDiffusion { sigma: 2.0 } } else { ZDriver::AbsorbedBrownian };
        let sc = GridScenario {
            horizon: 1.0,
            steps: 64,
            driver,
            exhausting_times: vec![0.0, 0.5],
            cells: vec![
                GridCell { label: CellLabel::new(1, 0), z0 },
                GridCell { label: CellLabel::new(2, 0), z0 },
            ],
            run_to_absorption: false,
        };
        let one = simulate(&sc, &SimConfig { threads: Some(1), ..SimConfig::new(64, seed) }).unwrap();
        let two = simulate(&sc, &SimConfig { threads: Some(2), ..SimConfig::new(64, seed) }).unwrap();
        prop_assert_eq!(one.digest(), two.digest());
        prop_assert!(one.max_simplex_error() <= 1e-9);
        for p in &one.paths {
            prop_assert!(p.ya >= 0.0 && p.yb >= 0.0);
            if let Some(c) = p.cell {
                prop_assert!(p.infimum <= p.z_exhausting[c] + 1e-12);
            }
        }
    }
}
