//! Log-utility market driven by one Brownian motion `M = W`, with an insider
//! who learns the thin time and its mark when they happen.
//!
//! Prices follow `dS = S (dW + λ dt)`. The cells are consecutive intervals of
//! `W_T` (the terminal-partition driver), so every `z^{n,k}` and `m` is a
//! stochastic integral against `W` with an explicit integrand and no
//! orthogonal part. The insider's extra drift is
//! `μ = φ^m / Z_{-}` up to `τ` and `φ^{n,k} / z^{n,k}` after `T_n` on the
//! realized cell. Wealth uses the exact log-Euler step
//! `log V += π ΔW + (π λ - π²/2) Δt`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::path_engine::{path_rng, run_parallel, GridScenario, PathEngineError, SimConfig, TerminalPartition, ZDriver};
use crate::stats::Estimate;

pub const DEFAULT_STRATEGY_CAP: f64 = 1e3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MarketError {
    #[error(transparent)]
    PathEngine(#[from] PathEngineError),
    #[error("τ may exceed the horizon: {0}")]
    TauExceedsHorizon(String),
    #[error("market price of risk is not square integrable: {0}")]
    NonIntegrableLambda(String),
    #[error("z vanishes where the drift needs it (path {path}, step {step})")]
    ZeroZDenominator { path: usize, step: usize },
    #[error("wealth left the finite range on path {path} (seed {seed}, stream {path})")]
    ExplodedPath { path: usize, seed: u64 },
    #[error("hypothesis violated: {0}")]
    HypothesisViolated(String),
}

/// Market price of risk: one value, or one value per grid step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Lambda {
    Constant(f64),
    Grid(Vec<f64>),
}

impl Lambda {
    /// Value on step `s` (the interval from grid index `s - 1` to `s`).
    pub fn on_step(&self, s: usize) -> f64 {
        match self {
            Lambda::Constant(v) => *v,
            Lambda::Grid(v) => v[s - 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MarketSpec {
    pub lambda: Lambda,
    pub initial_wealth: f64,
    pub initial_price: f64,
    /// Admissible strategies satisfy `|π| <= strategy_cap` on every step.
    pub strategy_cap: f64,
    /// Amplitudes `δ_j` of the competitors `π_G + δ_j cos(2π j t)`.
    pub perturbations: Vec<f64>,
}

impl Default for MarketSpec {
    fn default() -> Self {
        MarketSpec {
            lambda: Lambda::Constant(0.0),
            initial_wealth: 1.0,
            initial_price: 1.0,
            strategy_cap: DEFAULT_STRATEGY_CAP,
            perturbations: vec![0.5, -0.5, 0.25],
        }
    }
}

#[derive(Debug, Clone)]
pub struct MarketScenario {
    grid: GridScenario,
    spec: MarketSpec,
    partition: TerminalPartition,
    /// Exhausting grid index of every cell.
    idx: Vec<usize>,
}

pub fn build_market(grid: &GridScenario, spec: &MarketSpec) -> Result<MarketScenario, MarketError> {
    grid.validate()?;
    if grid.infinity_mass() > 0.0 {
        return Err(MarketError::TauExceedsHorizon(format!(
            "P(τ = ∞) = {} > 0; the cells must cover every outcome",
            grid.infinity_mass()
        )));
    }
    if grid.driver != ZDriver::TerminalPartition {
        return Err(MarketError::HypothesisViolated(format!(
            "the {} driver does not decide the cell by the horizon; use terminal-partition",
            grid.driver.name()
        )));
    }
    match &spec.lambda {
        Lambda::Constant(v) if !v.is_finite() => {
            return Err(MarketError::NonIntegrableLambda(format!("λ = {v}")));
        }
        Lambda::Grid(v) => {
            if v.len() != grid.steps {
                return Err(MarketError::NonIntegrableLambda(format!(
                    "λ has {} values for {} steps",
                    v.len(),
                    grid.steps
                )));
            }
            let energy: f64 = v.iter().map(|x| x * x).sum::<f64>() * grid.dt();
            if !energy.is_finite() {
                return Err(MarketError::NonIntegrableLambda(format!("∫ λ² dt = {energy}")));
            }
        }
        Lambda::Constant(_) => {}
    }
    if !(spec.initial_wealth > 0.0 && spec.initial_price > 0.0) {
        return Err(MarketError::HypothesisViolated("initial wealth and price must be positive".into()));
    }
    if !(spec.strategy_cap > 0.0) {
        return Err(MarketError::HypothesisViolated("strategy cap must be positive".into()));
    }
    let masses: Vec<f64> = grid.cells.iter().map(|c| c.z0).collect();
    let idx = grid
        .cells
        .iter()
        .map(|c| grid.grid_index(grid.exhausting_times[c.label.n - 1]))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(MarketScenario { partition: TerminalPartition::new(grid.horizon, &masses), grid: grid.clone(), spec: spec.clone(), idx })
}

impl MarketScenario {
    pub fn grid(&self) -> &GridScenario {
        &self.grid
    }

    pub fn spec(&self) -> &MarketSpec {
        &self.spec
    }

    pub fn partition(&self) -> &TerminalPartition {
        &self.partition
    }

    /// `log x + ½ ∫ λ² dt`, the regular agent's optimal value.
    pub fn merton_value(&self) -> f64 {
        let dt = self.grid.dt();
        let energy: f64 = (1..=self.grid.steps).map(|s| self.spec.lambda.on_step(s).powi(2) * dt).sum();
        self.spec.initial_wealth.ln() + 0.5 * energy
    }

    /// Survival probability `Z(t, w)` on step `s`: mass of the cells whose
    /// exhausting index is at least `s`.
    pub fn survival(&self, s: usize, w: f64) -> f64 {
        let t = (s - 1) as f64 * self.grid.dt();
        (0..self.idx.len()).filter(|&i| self.idx[i] >= s).map(|i| self.partition.z(i, t, w)).sum()
    }

    /// Pre-`τ` drift `φ^m / Z` on step `s` at `W_{s-1} = w`.
    pub fn pre_tau_drift(&self, s: usize, w: f64) -> f64 {
        let t = (s - 1) as f64 * self.grid.dt();
        let (mut num, mut den) = (0.0, 0.0);
        for i in (0..self.idx.len()).filter(|&i| self.idx[i] >= s) {
            num += self.partition.dz_dw(i, t, w);
            den += self.partition.z(i, t, w);
        }
        num / den
    }

    /// Central difference of `log Z` in `w`: an oracle for
    /// [`MarketScenario::pre_tau_drift`].
    pub fn pre_tau_drift_fd(&self, s: usize, w: f64, h: f64) -> f64 {
        (self.survival(s, w + h).ln() - self.survival(s, w - h).ln()) / (2.0 * h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Strategy {
    /// `π = λ`.
    Regular,
    /// `π = λ + μ`.
    Insider,
    Constant(f64),
    /// `π = λ + μ + amplitude cos(2π frequency t)`.
    Perturbed { amplitude: f64, frequency: f64 },
}

impl Strategy {
    pub fn name(&self) -> String {
        match self {
            Strategy::Regular => "regular".into(),
            Strategy::Insider => "insider".into(),
            Strategy::Constant(c) => format!("constant({c})"),
            Strategy::Perturbed { amplitude, frequency } => format!("insider+{amplitude}cos(2pi*{frequency}t)"),
        }
    }
}

/// One path of the market under several strategies at once.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketPath {
    pub cell: usize,
    /// `log V_T` per strategy.
    pub log_wealth: Vec<f64>,
    /// `∫ μ² dt`.
    pub mu2: f64,
    /// `⟨Y^b⟩_τ`.
    pub bracket_b: f64,
    /// `⟨Y^a⟩_T`.
    pub bracket_a: f64,
    /// `∫ λ μ dt`.
    pub cross: f64,
    /// `log(1/z_{T_n})` of the realized cell.
    pub entropy: f64,
    /// `Σ z_{T_n} log(1/z_{T_n})` over all cells.
    pub entropy_smoothed: f64,
    pub capped: u32,
    pub trajectory: Option<Trajectory>,
}

/// Grid trajectories of one path; per-step series have `steps` entries and
/// levels have `steps + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub w: Vec<f64>,
    pub mu: Vec<f64>,
    /// Whether the step lies in `[[0, τ]]`.
    pub before_tau: Vec<bool>,
    pub log_price: Vec<f64>,
    /// `log V` per strategy.
    pub log_wealth: Vec<Vec<f64>>,
}

fn strategy_value(st: &Strategy, lambda: f64, mu: f64, t: f64, cap: f64) -> f64 {
    let raw = match *st {
        Strategy::Regular => lambda,
        Strategy::Insider => lambda + mu,
        Strategy::Constant(c) => c,
        Strategy::Perturbed { amplitude, frequency } => {
            lambda + mu + amplitude * (2.0 * std::f64::consts::PI * frequency * t).cos()
        }
    };
    raw.clamp(-cap, cap)
}

/// Simulates path `index` for every strategy.
pub fn market_path(
    ms: &MarketScenario,
    strategies: &[Strategy],
    master_seed: u64,
    index: usize,
    keep: bool,
) -> Result<MarketPath, MarketError> {
    let steps = ms.grid.steps;
    let dt = ms.grid.dt();
    let sqdt = dt.sqrt();
    let cells = ms.idx.len();
    let tp = &ms.partition;
    let mut rng = path_rng(master_seed, index);
    let mut w = Vec::with_capacity(steps + 1);
    w.push(0.0);
    for s in 0..steps {
        let n: f64 = rng.sample(StandardNormal);
        w.push(w[s] + sqdt * n);
    }
    let c = tp.cell_of(w[steps]);
    let x0 = ms.spec.initial_wealth.ln();
    let mut log_v = vec![x0; strategies.len()];
    let mut out = MarketPath {
        cell: c,
        log_wealth: Vec::new(),
        mu2: 0.0,
        bracket_b: 0.0,
        bracket_a: 0.0,
        cross: 0.0,
        entropy: 0.0,
        entropy_smoothed: 0.0,
        capped: 0,
        trajectory: None,
    };
    let mut traj = keep.then(|| Trajectory {
        w: w.clone(),
        mu: Vec::with_capacity(steps),
        before_tau: Vec::with_capacity(steps),
        log_price: vec![ms.spec.initial_price.ln()],
        log_wealth: vec![vec![x0]; strategies.len()],
    });
    let mut z = vec![0.0; cells];
    let mut phi = vec![0.0; cells];
    for s in 1..=steps {
        let t = (s - 1) as f64 * dt;
        let wl = w[s - 1];
        for i in 0..cells {
            z[i] = tp.z(i, t, wl);
            phi[i] = tp.dz_dw(i, t, wl);
            if ms.idx[i] == s - 1 {
                let zi = z[i];
                if zi > 0.0 && zi < 1.0 {
                    out.entropy_smoothed -= zi * zi.ln();
                    if i == c {
                        out.entropy = -zi.ln();
                    }
                }
            }
        }
        let before = s <= ms.idx[c];
        let mu = if before {
            let (mut num, mut den) = (0.0, 0.0);
            for i in (0..cells).filter(|&i| ms.idx[i] >= s) {
                num += phi[i];
                den += z[i];
            }
            if den <= 0.0 {
                return Err(MarketError::ZeroZDenominator { path: index, step: s });
            }
            num / den
        } else {
            if z[c] <= 0.0 {
                return Err(MarketError::ZeroZDenominator { path: index, step: s });
            }
            phi[c] / z[c]
        };
        let lambda = ms.spec.lambda.on_step(s);
        let dw = w[s] - w[s - 1];
        let inc = mu * mu * dt;
        out.mu2 += inc;
        if before {
            out.bracket_b += inc;
        } else {
            out.bracket_a += inc;
        }
        out.cross += lambda * mu * dt;
        if (lambda + mu).abs() > ms.spec.strategy_cap {
            out.capped += 1;
        }
        for (k, st) in strategies.iter().enumerate() {
            let pi = strategy_value(st, lambda, mu, t, ms.spec.strategy_cap);
            log_v[k] += pi * dw + (pi * lambda - 0.5 * pi * pi) * dt;
        }
        if let Some(tr) = traj.as_mut() {
            tr.mu.push(mu);
            tr.before_tau.push(before);
            let last = *tr.log_price.last().expect("initial price");
            tr.log_price.push(last + dw + (lambda - 0.5) * dt);
            for (k, v) in log_v.iter().enumerate() {
                tr.log_wealth[k].push(*v);
            }
        }
    }
    if log_v.iter().any(|v| !v.is_finite()) {
        return Err(MarketError::ExplodedPath { path: index, seed: master_seed });
    }
    out.log_wealth = log_v;
    out.trajectory = traj;
    Ok(out)
}

/// `μ` along path `index`, with the regime of every step.
pub fn information_drift(ms: &MarketScenario, master_seed: u64, index: usize) -> Result<Trajectory, MarketError> {
    let p = market_path(ms, &[], master_seed, index, true)?;
    Ok(p.trajectory.expect("trajectory requested"))
}

/// `log V` along path `index` under one strategy.
pub fn wealth_path(ms: &MarketScenario, strategy: Strategy, master_seed: u64, index: usize) -> Result<Trajectory, MarketError> {
    let p = market_path(ms, &[strategy], master_seed, index, true)?;
    Ok(p.trajectory.expect("trajectory requested"))
}

#[derive(Debug, Clone, Serialize)]
pub struct DominanceRow {
    pub strategy: String,
    pub value: Estimate,
    /// Paired `log V_T(π_G) - log V_T(π)`.
    pub insider_advantage: Estimate,
}

#[derive(Debug, Clone, Serialize)]
pub struct UtilityReport {
    pub n_paths: usize,
    pub steps: usize,
    /// `Ê log V_T(π_F)`.
    pub value_regular: Estimate,
    /// `Ê log V_T(π_G)`.
    pub value_insider: Estimate,
    pub merton_value: f64,
    /// Empirical additional utility (paired per path).
    pub additional_utility: Estimate,
    /// `Ê⟨Y^b⟩_τ + Ĥ`.
    pub prediction: Estimate,
    /// `additional_utility - prediction`, paired.
    pub prediction_gap: Estimate,
    /// `½ Ê⟨Y^b⟩_τ + Ĥ`, equal to `½ Ê∫μ² dt` in continuous time.
    pub prediction_half: Estimate,
    pub prediction_half_gap: Estimate,
    /// `½ Ê⟨Y^b⟩_τ + ½ Ê⟨Y^a⟩_T`.
    pub half_brackets: Estimate,
    /// `½ Ê ∫ μ² dt`.
    pub half_mu2: Estimate,
    pub half_mu2_gap: Estimate,
    /// `Ê ∫ λ μ dt`.
    pub cross_term: Estimate,
    /// "bracket of Y^b at τ".
    pub bracket_b: Estimate,
    pub bracket_a: Estimate,
    /// `Ĥ` from `Σ z log(1/z)` at the exhausting times.
    pub entropy: Estimate,
    /// `Ĥ` from `log(1/z_{T_n})` on the realized cell.
    pub entropy_direct: Estimate,
    /// `max |∫ μ² - ⟨Y^b⟩_τ - ⟨Y^a⟩_T|` over paths.
    pub split_residual: f64,
    pub dominance: Vec<DominanceRow>,
    pub capped_steps: u64,
    pub strategy_cap: f64,
}

fn paired(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Estimate {
    Estimate::from_samples(&a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect::<Vec<_>>())
}

/// Monte Carlo of both agents' optimal values and every quantity of the
/// additional-utility identity, with paired per-path standard errors.
pub fn additional_utility(ms: &MarketScenario, config: &SimConfig) -> Result<UtilityReport, MarketError> {
    let seed = config.master_seed.ok_or(PathEngineError::SeedMissing)?;
    if config.n_paths < 2 {
        return Err(PathEngineError::DegenerateVariance("need at least two paths".into()).into());
    }
    let mut strategies = vec![Strategy::Regular, Strategy::Insider, Strategy::Constant(0.0), Strategy::Constant(1.0)];
    for (j, &a) in ms.spec.perturbations.iter().enumerate() {
        strategies.push(Strategy::Perturbed { amplitude: a, frequency: (j + 1) as f64 });
    }
    let paths = run_parallel(config.n_paths, config.threads, |i| market_path(ms, &strategies, seed, i, false))?
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;

    let col = |f: &dyn Fn(&MarketPath) -> f64| paths.iter().map(f).collect::<Vec<f64>>();
    let v_f = col(&|p| p.log_wealth[0]);
    let v_g = col(&|p| p.log_wealth[1]);
    let yb = col(&|p| p.bracket_b);
    let ya = col(&|p| p.bracket_a);
    let h = col(&|p| p.entropy_smoothed);
    let mu2 = col(&|p| p.mu2);
    let au: Vec<f64> = v_g.iter().zip(&v_f).map(|(g, f)| g - f).collect();
    let pred: Vec<f64> = yb.iter().zip(&h).map(|(b, h)| b + h).collect();
    let pred_half: Vec<f64> = yb.iter().zip(&h).map(|(b, h)| 0.5 * b + h).collect();

    let dominance = strategies
        .iter()
        .enumerate()
        .filter(|(k, _)| *k != 1)
        .map(|(k, st)| {
            let v = col(&|p| p.log_wealth[k]);
            DominanceRow {
                strategy: st.name(),
                value: Estimate::from_samples(&v),
                insider_advantage: paired(&v_g, &v, |g, x| g - x),
            }
        })
        .collect();

    Ok(UtilityReport {
        n_paths: config.n_paths,
        steps: ms.grid.steps,
        value_regular: Estimate::from_samples(&v_f),
        value_insider: Estimate::from_samples(&v_g),
        merton_value: ms.merton_value(),
        additional_utility: Estimate::from_samples(&au),
        prediction: Estimate::from_samples(&pred),
        prediction_gap: paired(&au, &pred, |a, p| a - p),
        prediction_half: Estimate::from_samples(&pred_half),
        prediction_half_gap: paired(&au, &pred_half, |a, p| a - p),
        half_brackets: paired(&yb, &ya, |b, a| 0.5 * (b + a)),
        half_mu2: Estimate::from_values(mu2.iter().map(|m| 0.5 * m)),
        half_mu2_gap: paired(&au, &mu2, |a, m| a - 0.5 * m),
        cross_term: Estimate::from_values(paths.iter().map(|p| p.cross)),
        bracket_b: Estimate::from_samples(&yb),
        bracket_a: Estimate::from_samples(&ya),
        entropy: Estimate::from_samples(&h),
        entropy_direct: Estimate::from_values(paths.iter().map(|p| p.entropy)),
        split_residual: paths.iter().map(|p| (p.mu2 - p.bracket_b - p.bracket_a).abs()).fold(0.0, f64::max),
        dominance,
        capped_steps: paths.iter().map(|p| p.capped as u64).sum(),
        strategy_cap: ms.spec.strategy_cap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::path_engine::GridCell;
    use crate::thin_time::CellLabel;
    use approx::assert_relative_eq;

    fn s3(steps: usize) -> GridScenario {
        GridScenario {
            horizon: 1.0,
            steps,
            driver: ZDriver::TerminalPartition,
            exhausting_times: vec![0.25, 0.5],
            cells: vec![
                GridCell { label: CellLabel::new(2, 0), z0: 0.5 },
                GridCell { label: CellLabel::new(1, 0), z0: 0.5 },
            ],
            run_to_absorption: false,
        }
    }

    fn no_insider(steps: usize) -> GridScenario {
        GridScenario {
            horizon: 1.0,
            steps,
            driver: ZDriver::TerminalPartition,
            exhausting_times: vec![0.0],
            cells: vec![GridCell { label: CellLabel::new(1, 0), z0: 1.0 }],
            run_to_absorption: false,
        }
    }

    #[test]
    fn hypotheses() {
        let spec = MarketSpec::default();
        let mut g = s3(64);
        g.cells[0].z0 = 0.3;
        assert!(matches!(build_market(&g, &spec), Err(MarketError::TauExceedsHorizon(_))));
        let mut g = s3(64);
        g.driver = ZDriver::AbsorbedBrownian;
        assert!(matches!(build_market(&g, &spec), Err(MarketError::HypothesisViolated(_))));
        let bad = MarketSpec { lambda: Lambda::Grid(vec![0.1; 3]), ..MarketSpec::default() };
        assert!(matches!(build_market(&s3(64), &bad), Err(MarketError::NonIntegrableLambda(_))));
        let bad = MarketSpec { lambda: Lambda::Constant(f64::NAN), ..MarketSpec::default() };
        assert!(matches!(build_market(&s3(64), &bad), Err(MarketError::NonIntegrableLambda(_))));
    }

    #[test]
    fn trivial_strategies() {
        let spec = MarketSpec { lambda: Lambda::Constant(0.3), initial_wealth: 2.0, ..MarketSpec::default() };
        let ms = build_market(&s3(128), &spec).unwrap();
        let zero = wealth_path(&ms, Strategy::Constant(0.0), 1, 0).unwrap();
        assert!(zero.log_wealth[0].iter().all(|&v| v == 2f64.ln()));
        let full = wealth_path(&ms, Strategy::Constant(1.0), 1, 0).unwrap();
        let v = &full.log_wealth[0];
        let s = &full.log_price;
        assert_relative_eq!(v[128] - v[0], s[128] - s[0], epsilon = 1e-12);
    }

    #[test]
    fn drift_regimes() {
        let ms = build_market(&s3(64), &MarketSpec::default()).unwrap();
        let tr = information_drift(&ms, 3, 7).unwrap();
        // both cells pending: m is constant and μ vanishes
        for s in 1..=16 {
            assert!(tr.before_tau[s - 1]);
            assert!(tr.mu[s - 1].abs() < 1e-12);
        }
        let cell = ms.partition().cell_of(tr.w[64]);
        assert_eq!(tr.before_tau[16], cell == 0);
        assert!(!tr.before_tau[40]);
    }

    #[test]
    fn drift_matches_finite_difference() {
        let ms = build_market(&s3(64), &MarketSpec::default()).unwrap();
        for s in [17, 20, 30] {
            for w in [-1.0, -0.2, 0.0, 0.4, 1.5] {
                let a = ms.pre_tau_drift(s, w);
                let fd = ms.pre_tau_drift_fd(s, w, 1e-5);
                assert_relative_eq!(a, fd, max_relative = 1e-6, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn no_insider_means_no_gain() {
        let spec = MarketSpec { lambda: Lambda::Constant(0.5), ..MarketSpec::default() };
        let ms = build_market(&no_insider(64), &spec).unwrap();
        let r = additional_utility(&ms, &SimConfig::new(2000, 9)).unwrap();
        assert_eq!(r.additional_utility.mean, 0.0);
        assert_eq!(r.bracket_b.mean, 0.0);
        assert_eq!(r.entropy.mean, 0.0);
        assert_relative_eq!(r.merton_value, 0.125, epsilon = 1e-12);
        assert!(r.value_regular.agrees_with(0.125, 0.0));
    }

    #[test]
    fn mu_splits_into_brackets() {
        let ms = build_market(&s3(128), &MarketSpec::default()).unwrap();
        let r = additional_utility(&ms, &SimConfig::new(500, 4)).unwrap();
        assert!(r.split_residual < 1e-12);
        assert_eq!(r.value_regular.mean, 0.0);
        assert!(r.bracket_b.mean > 0.0);
        assert_eq!(r.capped_steps, 0);
    }
}
