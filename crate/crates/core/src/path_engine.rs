//! Fine-grid Monte Carlo for continuous cell-probability martingales.
//!
//! The cell probabilities `z^{n,k}` (plus the mass of `τ = ∞`) form a
//! martingale in the simplex. Three drivers are available:
//!
//! * `absorbed-brownian`: stick-breaking of independent Brownian motions
//!   absorbed at 0 and 1, with Brownian-bridge crossing corrections;
//! * `logistic-diffusion`: stick-breaking of `du = σ u (1-u) dW`;
//! * `terminal-partition`: cells are consecutive intervals of `W_T`, so every
//!   `z` is an explicit function of one Brownian motion and the cell is known
//!   at the horizon.
//!
//! Each path keeps a compact summary. Full trajectories are kept only for the
//! first `record_paths` paths.

use std::io::{self, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::erf::erfc;
use thiserror::Error;

use crate::stats::{ks_critical, ks_distance, Estimate};
use crate::thin_time::{entropy_kernel, CellLabel};

/// Coordinates within this distance of a simplex vertex count as absorbed.
pub const VERTEX_TOL: f64 = 1e-6;
/// Clamp for the logistic Euler scheme.
pub const CLAMP_EPS: f64 = 1e-9;
/// Absorption runs stop after this many horizons.
pub const MAX_HORIZONS: usize = 64;
/// Number of equal intervals of `[0, T]` used for martingale probes.
pub const PROBE_INTERVALS: usize = 10;

const SIMPLEX_TOL: f64 = 1e-12;
const NEGLIGIBLE: f64 = 1e-14;
/// `-ln(NEGLIGIBLE)`: exponents beyond this are not worth evaluating.
const NEGLIGIBLE_EXPONENT: f64 = 32.3;

/// `exp(-x)`, or 0 when it would be negligible.
fn small_exp(x: f64) -> f64 {
    if x > NEGLIGIBLE_EXPONENT {
        0.0
    } else {
        (-x).exp()
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PathEngineError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("time step too coarse for the logistic driver (Δt σ² = {0} > 0.1)")]
    StepTooCoarse(f64),
    #[error("no master seed given")]
    SeedMissing,
    #[error("time {0} is not on the grid")]
    OffGridTime(f64),
    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),
    #[error("no path realized a finite cell")]
    NoCellPaths,
    #[error("thread pool: {0}")]
    ThreadPool(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ZDriver {
    AbsorbedBrownian,
    LogisticDiffusion { sigma: f64 },
    TerminalPartition,
}

impl ZDriver {
    pub fn name(&self) -> &'static str {
        match self {
            ZDriver::AbsorbedBrownian => "absorbed-brownian",
            ZDriver::LogisticDiffusion { .. } => "logistic-diffusion",
            ZDriver::TerminalPartition => "terminal-partition",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridCell {
    pub label: CellLabel,
    /// `z^{n,k}_0`.
    pub z0: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridScenario {
    pub horizon: f64,
    pub steps: usize,
    pub driver: ZDriver,
    /// Deterministic `t_1 < t_2 < ...`; cell `(n, k)` uses `t_n`.
    pub exhausting_times: Vec<f64>,
    /// Finite cells; the remaining mass belongs to `τ = ∞`. For the
    /// terminal-partition driver the cells take consecutive intervals of
    /// `W_T` from left to right in this order.
    pub cells: Vec<GridCell>,
    /// Continue past the horizon until a simplex vertex is reached.
    pub run_to_absorption: bool,
}

impl GridScenario {
    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn infinity_mass(&self) -> f64 {
        let m = 1.0 - self.cells.iter().map(|c| c.z0).sum::<f64>();
        if m.abs() <= SIMPLEX_TOL {
            0.0
        } else {
            m
        }
    }

    /// Grid index of a time, rejecting times that are not grid points.
    pub fn grid_index(&self, t: f64) -> Result<usize, PathEngineError> {
        let x = t / self.dt();
        let idx = x.round();
        if (x - idx).abs() > 1e-9 * self.steps as f64 || idx < 0.0 || idx as usize > self.steps {
            return Err(PathEngineError::OffGridTime(t));
        }
        Ok(idx as usize)
    }

    pub fn validate(&self) -> Result<(), PathEngineError> {
        let bad = |m: String| Err(PathEngineError::InvalidScenario(m));
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return bad(format!("horizon must be positive, got {}", self.horizon));
        }
        if self.steps < 2 {
            return bad(format!("steps must be at least 2, got {}", self.steps));
        }
        if self.cells.is_empty() {
            return bad("at least one finite cell is required".into());
        }
        for w in self.exhausting_times.windows(2) {
            if w[1] <= w[0] {
                return bad("exhausting times must be strictly increasing".into());
            }
        }
        for &t in &self.exhausting_times {
            if !(0.0..=self.horizon).contains(&t) {
                return bad(format!("exhausting time {t} outside [0, horizon]"));
            }
            self.grid_index(t)?;
        }
        let mut seen = Vec::new();
        for c in &self.cells {
            if c.label.is_infinity() || c.label.n > self.exhausting_times.len() {
                return bad(format!("cell {} has no exhausting time", c.label));
            }
            if seen.contains(&c.label) {
                return bad(format!("cell {} listed twice", c.label));
            }
            seen.push(c.label);
            if !(c.z0 > 0.0 && c.z0 <= 1.0) {
                return bad(format!("z0 of {} must lie in (0, 1], got {}", c.label, c.z0));
            }
        }
        let total: f64 = self.cells.iter().map(|c| c.z0).sum();
        if total > 1.0 + SIMPLEX_TOL {
            return bad(format!("initial cell probabilities sum to {total} > 1"));
        }
        if let ZDriver::LogisticDiffusion { sigma } = self.driver {
            if !(sigma > 0.0 && sigma.is_finite()) {
                return bad(format!("sigma must be positive, got {sigma}"));
            }
            let coarse = self.dt() * sigma * sigma;
            if coarse > 0.1 {
                return Err(PathEngineError::StepTooCoarse(coarse));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_paths: usize,
    pub master_seed: Option<u64>,
    /// Worker cap; `None` uses every core.
    pub threads: Option<usize>,
    /// Paths whose full trajectories are kept.
    pub record_paths: usize,
}

impl SimConfig {
    pub fn new(n_paths: usize, master_seed: u64) -> Self {
        SimConfig { n_paths, master_seed: Some(master_seed), threads: None, record_paths: 0 }
    }
}

/// Everything a check needs from one path.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSummary {
    /// Realized coordinate; `None` is the `τ = ∞` cell.
    pub cell: Option<usize>,
    pub stop_step: usize,
    /// Whether a simplex vertex was reached.
    pub absorbed: bool,
    /// `⟨Y^a⟩` accumulated on the grid after `T_n` on the realized cell.
    pub ya: f64,
    /// Conditional expectation of the unsimulated remainder of `⟨Y^a⟩`.
    pub ya_tail: f64,
    /// `⟨Y^b⟩_τ`, including the remainder on the `τ = ∞` cell.
    pub yb: f64,
    /// `inf_{t >= T_n} z_t` on the realized finite cell, NaN otherwise.
    pub infimum: f64,
    /// `z^{n,k}_{T_n}` for every finite cell.
    pub z_exhausting: Vec<f64>,
    /// `∫_{t_p}^∞ (1/z) d⟨z⟩` summed over finite cells, per probe time.
    pub xlogx_lhs: Vec<f64>,
    /// `Σ 2 z_{t_p} log(1/z_{t_p})` over finite cells, per probe time.
    pub xlogx_rhs: Vec<f64>,
    /// `z` of every coordinate at the martingale probe times, probe-major.
    pub z_probe: Vec<f64>,
    pub simplex_error: f64,
    pub clamps: u32,
}

/// Full trajectory of one path on `0..=steps`, one row per series.
#[derive(Debug, Clone, PartialEq)]
pub struct PathTrace {
    pub series: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct PathBatch {
    pub scenario: GridScenario,
    pub n_paths: usize,
    pub master_seed: u64,
    pub paths: Vec<PathSummary>,
    pub traces: Vec<PathTrace>,
    pub series_names: Vec<String>,
    pub probe_steps: Vec<usize>,
    pub xlogx_steps: Vec<usize>,
}

/// Random stream of one path: the master seed selects the key and the
/// path index selects the stream.
pub fn path_rng(master_seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(index as u64);
    rng
}

/// Runs `f(i)` for every path index on a pool capped at `threads` workers,
/// returning results in index order.
pub fn run_parallel<T: Send>(
    n: usize,
    threads: Option<usize>,
    f: impl Fn(usize) -> T + Sync + Send,
) -> Result<Vec<T>, PathEngineError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = threads {
        builder = builder.num_threads(t.max(1));
    }
    let pool = builder.build().map_err(|e| PathEngineError::ThreadPool(e.to_string()))?;
    Ok(pool.install(|| (0..n).into_par_iter().map(f).collect()))
}

pub(crate) fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

fn std_normal_sf(x: f64) -> f64 {
    0.5 * erfc(x / std::f64::consts::SQRT_2)
}

pub(crate) fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Probability that a standard normal lands in `[a, b]`, accurate in both
/// tails.
fn normal_mass(a: f64, b: f64) -> f64 {
    if a >= 0.0 {
        std_normal_sf(a) - std_normal_sf(b)
    } else if b <= 0.0 {
        std_normal_cdf(b) - std_normal_cdf(a)
    } else {
        1.0 - std_normal_cdf(a) - std_normal_sf(b)
    }
}

/// Cells as consecutive intervals of `W_T`: `z_i(t, W) = P(W_T ∈ [a_i, b_i) | W_t = W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalPartition {
    horizon: f64,
    bounds: Vec<(f64, f64)>,
}

impl TerminalPartition {
    pub fn new(horizon: f64, masses: &[f64]) -> Self {
        let normal = Normal::new(0.0, horizon.sqrt()).expect("positive horizon");
        let mut bounds = Vec::with_capacity(masses.len());
        let mut cum = 0.0;
        let mut lo = f64::NEG_INFINITY;
        for (i, &p) in masses.iter().enumerate() {
            cum += p;
            let hi = if i + 1 == masses.len() { f64::INFINITY } else { normal.inverse_cdf(cum.min(1.0)) };
            bounds.push((lo, hi));
            lo = hi;
        }
        TerminalPartition { horizon, bounds }
    }

    pub fn bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }

    /// Cell index of a terminal value.
    pub fn cell_of(&self, w_t: f64) -> usize {
        self.bounds.iter().position(|&(a, b)| w_t >= a && w_t < b).unwrap_or(self.bounds.len() - 1)
    }

    /// `z_i(t, w)`.
    pub fn z(&self, i: usize, t: f64, w: f64) -> f64 {
        let (a, b) = self.bounds[i];
        let rem = self.horizon - t;
        if rem <= 0.0 {
            return if w >= a && w < b { 1.0 } else { 0.0 };
        }
        let s = rem.sqrt();
        normal_mass((a - w) / s, (b - w) / s)
    }

    /// `∂z_i/∂w`, the integrand of `z_i` against `W`.
    pub fn dz_dw(&self, i: usize, t: f64, w: f64) -> f64 {
        let (a, b) = self.bounds[i];
        let rem = self.horizon - t;
        if rem <= 0.0 {
            return 0.0;
        }
        let s = rem.sqrt();
        let pa = if a.is_finite() { std_normal_pdf((a - w) / s) } else { 0.0 };
        let pb = if b.is_finite() { std_normal_pdf((b - w) / s) } else { 0.0 };
        (pa - pb) / s
    }
}

/// Scenario data resolved once per batch.
struct Plan {
    dt: f64,
    sqdt: f64,
    steps: usize,
    max_steps: usize,
    driver: ZDriver,
    /// Initial value of every coordinate; the last one is `τ = ∞` when
    /// `has_infinity`.
    z0: Vec<f64>,
    finite: usize,
    has_infinity: bool,
    /// Exhausting grid index per coordinate, `usize::MAX` for `τ = ∞`.
    idx: Vec<usize>,
    max_idx: usize,
    probe_steps: Vec<usize>,
    xlogx_steps: Vec<usize>,
    partition: Option<TerminalPartition>,
    record: usize,
}

impl Plan {
    fn new(sc: &GridScenario, record: usize) -> Result<Plan, PathEngineError> {
        sc.validate()?;
        let mut z0: Vec<f64> = sc.cells.iter().map(|c| c.z0).collect();
        let inf = sc.infinity_mass();
        let has_infinity = inf > 0.0;
        if has_infinity {
            z0.push(inf);
        }
        let mut idx = Vec::with_capacity(z0.len());
        for c in &sc.cells {
            idx.push(sc.grid_index(sc.exhausting_times[c.label.n - 1])?);
        }
        if has_infinity {
            idx.push(usize::MAX);
        }
        let max_idx = idx.iter().copied().filter(|&i| i != usize::MAX).max().unwrap_or(0);
        let partition = (sc.driver == ZDriver::TerminalPartition).then(|| TerminalPartition::new(sc.horizon, &z0));
        let max_steps = match sc.driver {
            ZDriver::TerminalPartition => sc.steps,
            _ if sc.run_to_absorption => sc.steps * MAX_HORIZONS,
            _ => sc.steps,
        };
        Ok(Plan {
            dt: sc.dt(),
            sqdt: sc.dt().sqrt(),
            steps: sc.steps,
            max_steps,
            driver: sc.driver,
            finite: sc.cells.len(),
            has_infinity,
            z0,
            idx,
            max_idx,
            probe_steps: (0..=PROBE_INTERVALS).map(|k| k * sc.steps / PROBE_INTERVALS).collect(),
            xlogx_steps: vec![0, sc.steps / 4, sc.steps / 2],
            partition,
            record,
        })
    }

    fn dim(&self) -> usize {
        self.z0.len()
    }

    fn series_names(&self, labels: &[CellLabel]) -> Vec<String> {
        let mut names: Vec<String> = labels.iter().map(|l| format!("z[{}]", l)).collect();
        if self.has_infinity {
            names.push("z[inf]".into());
        }
        names.push("Z".into());
        names.push("m".into());
        names.push("bracket_Yb".into());
        names.extend(labels.iter().map(|l| format!("bracket_Ya[{}]", l)));
        names
    }
}

/// Per-coordinate brackets over one step, evaluated at the left point.
struct StepBrackets {
    /// `Δ⟨z_i⟩`.
    dq: Vec<f64>,
    /// `Δ⟨m⟩` from the coordinates still pending.
    dm: f64,
    prefix: Vec<f64>,
}

/// State of the stick-breaking drivers: `z_i = u_i Π_{j<i} (1 - u_j)`, the
/// last coordinate is the remainder.
struct Sticks {
    u: Vec<f64>,
    alive: Vec<bool>,
}

impl Sticks {
    fn from_z(z0: &[f64]) -> Sticks {
        let mut u = Vec::with_capacity(z0.len().saturating_sub(1));
        let mut rest = 1.0;
        for &z in &z0[..z0.len() - 1] {
            let v = if rest > 0.0 { (z / rest).clamp(0.0, 1.0) } else { 0.0 };
            u.push(v);
            rest -= z;
        }
        let alive = u.iter().map(|&v| v > 0.0 && v < 1.0).collect();
        Sticks { u, alive }
    }

    fn fill_z(&self, z: &mut [f64]) {
        let mut prefix = 1.0;
        for (i, &u) in self.u.iter().enumerate() {
            z[i] = u * prefix;
            prefix *= 1.0 - u;
        }
        let last = z.len() - 1;
        z[last] = prefix;
    }

    fn prefixes(&self, out: &mut [f64]) {
        let mut prefix = 1.0;
        for (o, &u) in out.iter_mut().zip(&self.u) {
            *o = prefix;
            prefix *= 1.0 - u;
        }
        out[self.u.len()] = prefix;
    }
}

struct Accumulators {
    yb: f64,
    ya: Vec<f64>,
    infimum: Vec<f64>,
    z_exhausting: Vec<f64>,
    yb_exhausting: Vec<f64>,
    xlogx_lhs: Vec<f64>,
    xlogx_rhs: Vec<f64>,
    z_probe: Vec<f64>,
    simplex_error: f64,
    clamps: u32,
    trace: Option<Vec<Vec<f64>>>,
    /// `A°` so far: mass of cells whose exhausting time has passed.
    ao: f64,
}

fn xlogx_sum(z: &[f64], finite: usize) -> f64 {
    z[..finite].iter().map(|&v| if v > 0.0 && v < 1.0 { -2.0 * v * v.ln() } else { 0.0 }).sum()
}

fn simulate_path(plan: &Plan, master_seed: u64, index: usize) -> (PathSummary, Option<PathTrace>) {
    let mut rng = path_rng(master_seed, index);
    let d = plan.dim();
    let finite = plan.finite;
    let n_series = d + 3 + finite;
    let mut z = plan.z0.clone();
    let mut acc = Accumulators {
        yb: 0.0,
        ya: vec![0.0; finite],
        infimum: vec![f64::NAN; finite],
        z_exhausting: vec![f64::NAN; finite],
        yb_exhausting: vec![f64::NAN; finite],
        xlogx_lhs: vec![0.0; plan.xlogx_steps.len()],
        xlogx_rhs: vec![0.0; plan.xlogx_steps.len()],
        z_probe: Vec::with_capacity(plan.probe_steps.len() * d),
        simplex_error: 0.0,
        clamps: 0,
        trace: (index < plan.record).then(|| vec![Vec::with_capacity(plan.steps + 1); n_series]),
        ao: 0.0,
    };
    let mut sticks = match plan.driver {
        ZDriver::TerminalPartition => None,
        _ => Some(Sticks::from_z(&plan.z0)),
    };
    let mut w = 0.0;
    observe(plan, 0, &z, &mut acc);

    let mut s = 0;
    let mut absorbed = false;
    let mut br = StepBrackets { dq: vec![0.0; d], dm: 0.0, prefix: vec![0.0; d] };
    while s < plan.max_steps {
        s += 1;
        match (&sticks, &plan.partition) {
            (Some(st), _) => stick_brackets(plan, st, &z, s, &mut br),
            (None, Some(tp)) => partition_brackets(plan, tp, (s - 1) as f64 * plan.dt, w, s, &mut br),
            _ => unreachable!("driver without state"),
        }
        // left-point brackets
        let zl: f64 = (0..d).filter(|&i| plan.idx[i] >= s).map(|i| z[i]).sum();
        if zl > 0.0 {
            acc.yb += br.dm / (zl * zl);
        }
        for c in 0..finite {
            if s > plan.idx[c] && z[c] > 0.0 {
                acc.ya[c] += br.dq[c] / (z[c] * z[c]);
            }
        }
        for (p, &ps) in plan.xlogx_steps.iter().enumerate() {
            if s > ps {
                acc.xlogx_lhs[p] += (0..finite).filter(|&c| z[c] > 0.0).map(|c| br.dq[c] / z[c]).sum::<f64>();
            }
        }

        match (&mut sticks, &plan.partition) {
            (Some(st), _) => advance_sticks(plan, st, &mut rng, &mut acc, s),
            (None, Some(_)) => w += plan.sqdt * rng.sample::<f64, _>(StandardNormal),
            _ => unreachable!("driver without state"),
        }
        match (&sticks, &plan.partition) {
            (Some(st), _) => st.fill_z(&mut z),
            (None, Some(tp)) => {
                let t = s as f64 * plan.dt;
                for (i, zi) in z.iter_mut().enumerate() {
                    *zi = tp.z(i, t, w);
                }
            }
            _ => unreachable!("driver without state"),
        }
        for c in 0..finite {
            if s > plan.idx[c] {
                acc.infimum[c] = acc.infimum[c].min(z[c]);
            }
        }
        observe(plan, s, &z, &mut acc);

        // a terminal partition is only decided at the horizon
        let may_stop = match plan.driver {
            ZDriver::TerminalPartition => s == plan.steps,
            _ => s >= plan.max_idx,
        };
        if may_stop {
            let top = z.iter().copied().fold(0.0, f64::max);
            if top >= 1.0 - VERTEX_TOL {
                absorbed = true;
                break;
            }
        }
    }
    let stop = s;
    // frozen after stopping
    for t in stop + 1..=plan.steps {
        observe(plan, t, &z, &mut acc);
    }

    // draw the cell from the terminal conditional probabilities
    let draw: f64 = rng.random();
    let mut cum = 0.0;
    let mut realized = d - 1;
    for (i, &zi) in z.iter().enumerate() {
        cum += zi;
        if draw < cum {
            realized = i;
            break;
        }
    }
    let tail = xlogx_sum(&z, finite);
    for v in acc.xlogx_lhs.iter_mut() {
        *v += tail;
    }
    let log_inv = |v: f64| if v > 0.0 && v < 1.0 { -2.0 * v.ln() } else { 0.0 };
    let (cell, ya, ya_tail, yb, infimum) = if realized < finite {
        let c = realized;
        (Some(c), acc.ya[c], log_inv(z[c]), acc.yb_exhausting[c], acc.infimum[c])
    } else {
        (None, 0.0, 0.0, acc.yb + log_inv(z[realized]), f64::NAN)
    };
    let summary = PathSummary {
        cell,
        stop_step: stop,
        absorbed,
        ya,
        ya_tail,
        yb,
        infimum,
        z_exhausting: acc.z_exhausting,
        xlogx_lhs: acc.xlogx_lhs,
        xlogx_rhs: acc.xlogx_rhs,
        z_probe: acc.z_probe,
        simplex_error: acc.simplex_error,
        clamps: acc.clamps,
    };
    (summary, acc.trace.map(|series| PathTrace { series }))
}

/// Bookkeeping at grid index `t` once `z_t` is known.
fn observe(plan: &Plan, t: usize, z: &[f64], acc: &mut Accumulators) {
    let finite = plan.finite;
    let sum: f64 = z.iter().sum();
    acc.simplex_error = acc.simplex_error.max((sum - 1.0).abs());
    for c in 0..finite {
        if plan.idx[c] == t {
            acc.z_exhausting[c] = z[c];
            acc.yb_exhausting[c] = acc.yb;
            acc.infimum[c] = z[c];
            acc.ao += z[c];
        }
    }
    for (p, &ps) in plan.xlogx_steps.iter().enumerate() {
        if ps == t {
            acc.xlogx_rhs[p] = xlogx_sum(z, finite);
        }
    }
    if plan.probe_steps.contains(&t) {
        acc.z_probe.extend_from_slice(z);
    }
    if t <= plan.steps {
        if let Some(tr) = acc.trace.as_mut() {
            let d = z.len();
            for (i, &v) in z.iter().enumerate() {
                tr[i].push(v);
            }
            let zt: f64 = (0..d).filter(|&i| plan.idx[i] > t).map(|i| z[i]).sum();
            tr[d].push(zt);
            tr[d + 1].push(zt + acc.ao);
            tr[d + 2].push(acc.yb);
            for c in 0..finite {
                tr[d + 3 + c].push(acc.ya[c]);
            }
        }
    }
}

fn stick_variance(plan: &Plan, u: f64) -> f64 {
    match plan.driver {
        ZDriver::AbsorbedBrownian => plan.dt,
        ZDriver::LogisticDiffusion { sigma } => {
            let v = sigma * u * (1.0 - u);
            v * v * plan.dt
        }
        ZDriver::TerminalPartition => unreachable!("not a stick driver"),
    }
}

fn stick_brackets(plan: &Plan, st: &Sticks, z: &[f64], s: usize, br: &mut StepBrackets) {
    let d = z.len();
    st.prefixes(&mut br.prefix);
    let prefix = &br.prefix;
    let dq = &mut br.dq;
    dq.fill(0.0);
    let mut dm = 0.0;
    for (j, &u) in st.u.iter().enumerate() {
        if !st.alive[j] || prefix[j] <= 0.0 {
            continue;
        }
        let var = stick_variance(plan, u);
        // ∂z_j/∂u_j = prefix_j, ∂z_i/∂u_j = -z_i / (1 - u_j) for i > j
        let mut pending_sum = if plan.idx[j] >= s { prefix[j] } else { 0.0 };
        dq[j] += prefix[j] * prefix[j] * var;
        for i in j + 1..d {
            let g = -z[i] / (1.0 - u);
            dq[i] += g * g * var;
            if plan.idx[i] >= s {
                pending_sum += g;
            }
        }
        dm += pending_sum * pending_sum * var;
    }
    br.dm = dm;
}

fn partition_brackets(plan: &Plan, tp: &TerminalPartition, t: f64, w: f64, s: usize, br: &mut StepBrackets) {
    let mut pending = 0.0;
    for (i, q) in br.dq.iter_mut().enumerate() {
        let g = tp.dz_dw(i, t, w);
        *q = g * g * plan.dt;
        if plan.idx[i] >= s {
            pending += g;
        }
    }
    br.dm = pending * pending * plan.dt;
}

fn advance_sticks(plan: &Plan, st: &mut Sticks, rng: &mut ChaCha8Rng, acc: &mut Accumulators, s: usize) {
    let mut prefix = 1.0;
    for j in 0..st.u.len() {
        let u = st.u[j];
        let live = st.alive[j] && prefix > 0.0;
        prefix *= 1.0 - u;
        if !live {
            continue;
        }
        let n: f64 = rng.sample(StandardNormal);
        match plan.driver {
            ZDriver::AbsorbedBrownian => {
                let un = u + plan.sqdt * n;
                if un <= 0.0 || un >= 1.0 {
                    st.u[j] = if un <= 0.0 { 0.0 } else { 1.0 };
                    st.alive[j] = false;
                    continue;
                }
                // the bridge between grid points may still touch a boundary
                let p0 = small_exp(2.0 * u * un / plan.dt);
                let p1 = small_exp(2.0 * (1.0 - u) * (1.0 - un) / plan.dt);
                if p0 + p1 > NEGLIGIBLE {
                    let v: f64 = rng.random();
                    if v < p0 {
                        st.u[j] = 0.0;
                        st.alive[j] = false;
                        continue;
                    }
                    if v < p0 + p1 {
                        st.u[j] = 1.0;
                        st.alive[j] = false;
                        continue;
                    }
                }
                st.u[j] = un;
                // the first coordinate is the Brownian motion itself, so its
                // infimum can be sampled exactly from the bridge
                if j == 0 && plan.finite > 0 && s > plan.idx[0] {
                    let low = acc.infimum[0];
                    let reach = if u.min(un) <= low { 1.0 } else { small_exp(2.0 * (u - low) * (un - low) / plan.dt) };
                    if reach > NEGLIGIBLE {
                        let v: f64 = rng.random();
                        let f = p0 + v * (1.0 - p0);
                        let disc = (u - un) * (u - un) - 2.0 * plan.dt * f.ln();
                        let m = 0.5 * (u + un - disc.sqrt());
                        acc.infimum[0] = low.min(m.max(0.0));
                    }
                }
            }
            ZDriver::LogisticDiffusion { sigma } => {
                let un = u + sigma * u * (1.0 - u) * plan.sqdt * n;
                if !(CLAMP_EPS..=1.0 - CLAMP_EPS).contains(&un) {
                    acc.clamps += 1;
                }
                st.u[j] = un.clamp(CLAMP_EPS, 1.0 - CLAMP_EPS);
            }
            ZDriver::TerminalPartition => unreachable!("not a stick driver"),
        }
    }
}

pub fn simulate(scenario: &GridScenario, config: &SimConfig) -> Result<PathBatch, PathEngineError> {
    let master_seed = config.master_seed.ok_or(PathEngineError::SeedMissing)?;
    if config.n_paths == 0 {
        return Err(PathEngineError::InvalidScenario("n_paths must be at least 1".into()));
    }
    let plan = Plan::new(scenario, config.record_paths)?;
    let labels: Vec<CellLabel> = scenario.cells.iter().map(|c| c.label).collect();
    let results = run_parallel(config.n_paths, config.threads, |i| simulate_path(&plan, master_seed, i))?;
    let mut paths = Vec::with_capacity(results.len());
    let mut traces = Vec::new();
    for (summary, trace) in results {
        paths.push(summary);
        if let Some(t) = trace {
            traces.push(t);
        }
    }
    Ok(PathBatch {
        scenario: scenario.clone(),
        n_paths: config.n_paths,
        master_seed,
        paths,
        traces,
        series_names: plan.series_names(&labels),
        probe_steps: plan.probe_steps.clone(),
        xlogx_steps: plan.xlogx_steps.clone(),
    })
}

impl PathBatch {
    /// SHA-256 over every per-path summary in path order, hex encoded.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.paths {
            h.update(p.cell.map_or(-1i64, |c| c as i64).to_le_bytes());
            h.update((p.stop_step as u64).to_le_bytes());
            h.update([p.absorbed as u8]);
            h.update(p.clamps.to_le_bytes());
            let scalars = [p.ya, p.ya_tail, p.yb, p.infimum, p.simplex_error];
            for v in scalars
                .iter()
                .chain(&p.z_exhausting)
                .chain(&p.xlogx_lhs)
                .chain(&p.xlogx_rhs)
                .chain(&p.z_probe)
            {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn finite_cells(&self) -> usize {
        self.scenario.cells.len()
    }

    pub fn dim(&self) -> usize {
        self.finite_cells() + usize::from(self.scenario.infinity_mass() > 0.0)
    }

    /// `⟨Y^a⟩_∞` per path: the grid part plus the conditional remainder.
    pub fn bracket_ya(&self) -> Vec<f64> {
        self.paths.iter().map(|p| p.ya + p.ya_tail).collect()
    }

    /// `log(1/I)` per path, taken as 0 on the `τ = ∞` cell.
    pub fn log_inverse_infimum(&self) -> Vec<f64> {
        self.paths.iter().map(|p| if p.cell.is_some() { -p.infimum.ln() } else { 0.0 }).collect()
    }

    /// Per-path conditional entropy `Σ z (log 1/z)^γ` at the exhausting
    /// times; its mean is `H_γ`.
    pub fn entropy_samples(&self, gamma: f64) -> Vec<f64> {
        self.paths
            .iter()
            .map(|p| p.z_exhausting.iter().map(|&z| if z > 0.0 { z * entropy_kernel(z, gamma) } else { 0.0 }).sum())
            .collect()
    }

    pub fn entropy_gamma(&self, gamma: f64) -> Estimate {
        Estimate::from_samples(&self.entropy_samples(gamma))
    }

    pub fn total_clamps(&self) -> u64 {
        self.paths.iter().map(|p| p.clamps as u64).sum()
    }

    pub fn max_simplex_error(&self) -> f64 {
        self.paths.iter().map(|p| p.simplex_error).fold(0.0, f64::max)
    }

    pub fn absorbed_fraction(&self) -> f64 {
        self.paths.iter().filter(|p| p.absorbed).count() as f64 / self.n_paths as f64
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BracketEntropyReport {
    /// `Ê⟨Y^a⟩_∞`.
    pub bracket: Estimate,
    /// `2 Ĥ`.
    pub two_h: Estimate,
    /// Paired per-path difference `⟨Y^a⟩ - 2 Σ z log(1/z)`.
    pub difference: Estimate,
    pub z_score: f64,
    /// Mean of the conditional remainder added for unabsorbed paths.
    pub tail_budget: f64,
}

pub fn bracket_entropy_check(batch: &PathBatch) -> Result<BracketEntropyReport, PathEngineError> {
    if batch.n_paths < 2 {
        return Err(PathEngineError::DegenerateVariance("need at least two paths".into()));
    }
    let ya = batch.bracket_ya();
    let h = batch.entropy_samples(1.0);
    let two_h: Vec<f64> = h.iter().map(|v| 2.0 * v).collect();
    let diff: Vec<f64> = ya.iter().zip(&two_h).map(|(a, b)| a - b).collect();
    let difference = Estimate::from_samples(&diff);
    Ok(BracketEntropyReport {
        bracket: Estimate::from_samples(&ya),
        two_h: Estimate::from_samples(&two_h),
        z_score: difference.z_score(0.0),
        difference,
        tail_budget: batch.paths.iter().map(|p| p.ya_tail).sum::<f64>() / batch.n_paths as f64,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct BiasPoint {
    pub steps: usize,
    pub difference: Estimate,
    pub tail_budget: f64,
}

/// Bracket-entropy discrepancy at each grid resolution, same seeds.
pub fn grid_bias_study(
    scenario: &GridScenario,
    config: &SimConfig,
    steps: &[usize],
) -> Result<Vec<BiasPoint>, PathEngineError> {
    steps
        .iter()
        .map(|&k| {
            let sc = GridScenario { steps: k, ..scenario.clone() };
            let batch = simulate(&sc, &SimConfig { record_paths: 0, ..*config })?;
            let r = bracket_entropy_check(&batch)?;
            Ok(BiasPoint { steps: k, difference: r.difference, tail_budget: r.tail_budget })
        })
        .collect()
}

/// Whether the absolute discrepancy is non-increasing along the
/// refinements, allowing 3 combined standard errors at each step.
pub fn bias_shrinks(points: &[BiasPoint]) -> bool {
    points.windows(2).all(|w| {
        let (a, b) = (&w[0].difference, &w[1].difference);
        b.mean.abs() <= a.mean.abs() + 3.0 * (a.se * a.se + b.se * b.se).sqrt()
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct InfimumRow {
    /// `β / z_{T_n}`.
    pub fraction: f64,
    /// Mean of the per-path `β`.
    pub beta: f64,
    pub empirical: Estimate,
    pub formula: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct InfimumReport {
    pub rows: Vec<InfimumRow>,
    /// KS distance of `F(I | z_{T_n})` from the uniform law.
    pub ks: f64,
    pub ks_critical: f64,
    pub n_cell: usize,
    /// Paths violating `I <= z_{T_n}` or `I > 0`.
    pub violations: usize,
}

/// `Q(I < β | F_{T_n}) = β (1 - z) / ((1 - β) z)` for `β < z`.
pub fn infimum_cdf(beta: f64, z: f64) -> f64 {
    if beta <= 0.0 {
        0.0
    } else if beta >= z {
        1.0
    } else {
        beta / (1.0 - beta) * (1.0 - z) / z
    }
}

/// Compares the law of the infimum of `z` after `T_n` on the realized cell
/// with the closed form, at `β = fraction · z_{T_n}` for every fraction.
pub fn infimum_law_check(batch: &PathBatch, fractions: &[f64]) -> Result<InfimumReport, PathEngineError> {
    let on_cell: Vec<(f64, f64)> = batch
        .paths
        .iter()
        .filter_map(|p| p.cell.map(|c| (p.infimum, p.z_exhausting[c])))
        .filter(|&(_, z)| z < 1.0)
        .collect();
    if on_cell.is_empty() {
        return Err(PathEngineError::NoCellPaths);
    }
    let violations = on_cell.iter().filter(|&&(i, z)| !(i <= z && i > 0.0)).count();
    let n = on_cell.len();
    let rows = fractions
        .iter()
        .map(|&f| {
            let hits = on_cell.iter().filter(|&&(i, z)| i < f * z).count();
            let formula = on_cell.iter().map(|&(_, z)| infimum_cdf(f * z, z)).sum::<f64>() / n as f64;
            let beta = on_cell.iter().map(|&(_, z)| f * z).sum::<f64>() / n as f64;
            InfimumRow { fraction: f, beta, empirical: Estimate::proportion(hits, n), formula }
        })
        .collect();
    let pit: Vec<f64> = on_cell.iter().map(|&(i, z)| infimum_cdf(i, z)).collect();
    Ok(InfimumReport { rows, ks: ks_distance(&pit, |x| x.clamp(0.0, 1.0)), ks_critical: ks_critical(n), n_cell: n, violations })
}

#[derive(Debug, Clone, Serialize)]
pub struct Lem1Report {
    pub gamma: f64,
    /// `Ê[(log 1/I)^γ]`.
    pub log_infimum: Estimate,
    /// `Ê[⟨Y^a⟩^γ_∞]`.
    pub bracket: Estimate,
    /// `bracket / log_infimum`; `None` when both vanish.
    pub ratio: Option<f64>,
}

pub fn lem1_ratio_check(batch: &PathBatch, gamma: f64) -> Result<Lem1Report, PathEngineError> {
    if !(gamma > 0.0) {
        return Err(PathEngineError::InvalidScenario(format!("gamma must be positive, got {gamma}")));
    }
    if batch.n_paths < 2 {
        return Err(PathEngineError::DegenerateVariance("need at least two paths".into()));
    }
    let li: Vec<f64> = batch.log_inverse_infimum().iter().map(|v| v.max(0.0).powf(gamma)).collect();
    let ya: Vec<f64> = batch.bracket_ya().iter().map(|v| v.max(0.0).powf(gamma)).collect();
    let log_infimum = Estimate::from_samples(&li);
    let bracket = Estimate::from_samples(&ya);
    let ratio = (log_infimum.mean > 0.0).then(|| bracket.mean / log_infimum.mean);
    Ok(Lem1Report { gamma, log_infimum, bracket, ratio })
}

#[derive(Debug, Clone, Serialize)]
pub struct XlogxReport {
    pub time: f64,
    pub lhs: Estimate,
    pub rhs: Estimate,
    pub residual: Estimate,
}

/// Unconditional `E[∫_t^∞ (1/z) d⟨z⟩ - 2 z_t log(1/z_t)]` at probe `probe`.
pub fn xlogx_identity_check(batch: &PathBatch, probe: usize) -> Result<XlogxReport, PathEngineError> {
    let step = *batch
        .xlogx_steps
        .get(probe)
        .ok_or_else(|| PathEngineError::InvalidScenario(format!("no probe time {probe}")))?;
    let lhs: Vec<f64> = batch.paths.iter().map(|p| p.xlogx_lhs[probe]).collect();
    let rhs: Vec<f64> = batch.paths.iter().map(|p| p.xlogx_rhs[probe]).collect();
    let res: Vec<f64> = lhs.iter().zip(&rhs).map(|(a, b)| a - b).collect();
    Ok(XlogxReport {
        time: step as f64 * batch.scenario.dt(),
        lhs: Estimate::from_samples(&lhs),
        rhs: Estimate::from_samples(&rhs),
        residual: Estimate::from_samples(&res),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct FrequencyRow {
    pub coordinate: usize,
    pub z0: f64,
    pub frequency: Estimate,
}

/// Realized cell frequencies against `z_0`.
pub fn cell_frequency_check(batch: &PathBatch) -> Vec<FrequencyRow> {
    let finite = batch.finite_cells();
    let mut z0: Vec<f64> = batch.scenario.cells.iter().map(|c| c.z0).collect();
    if batch.dim() > finite {
        z0.push(batch.scenario.infinity_mass());
    }
    z0.iter()
        .enumerate()
        .map(|(i, &z)| {
            let hits = batch.paths.iter().filter(|p| p.cell.unwrap_or(finite) == i).count();
            FrequencyRow { coordinate: i, z0: z, frequency: Estimate::proportion(hits, batch.n_paths).with_multiplier(4.0) }
        })
        .collect()
}

/// Largest `|mean increment| / SE` of any coordinate between consecutive
/// probe times; increments with zero variance count as 0 when their mean is 0.
pub fn martingale_probe_check(batch: &PathBatch) -> f64 {
    let d = batch.dim();
    let probes = batch.probe_steps.len();
    let mut worst: f64 = 0.0;
    for k in 0..probes - 1 {
        for i in 0..d {
            let inc: Vec<f64> = batch.paths.iter().map(|p| p.z_probe[(k + 1) * d + i] - p.z_probe[k * d + i]).collect();
            let e = Estimate::from_samples(&inc);
            worst = worst.max(e.z_score(0.0).abs());
        }
    }
    worst
}

pub const PATHS_MAGIC: &[u8; 8] = b"THNLPATH";
pub const PATHS_VERSION: u32 = 1;

/// Writes the recorded trajectories: magic, version (u32), path count,
/// time count and series count (u64 each), then little-endian f64 values
/// ordered path, series, time.
pub fn write_paths_bin(batch: &PathBatch, out: &mut impl Write) -> io::Result<()> {
    let n_times = batch.scenario.steps + 1;
    out.write_all(PATHS_MAGIC)?;
    out.write_all(&PATHS_VERSION.to_le_bytes())?;
    out.write_all(&(batch.traces.len() as u64).to_le_bytes())?;
    out.write_all(&(n_times as u64).to_le_bytes())?;
    out.write_all(&(batch.series_names.len() as u64).to_le_bytes())?;
    for trace in &batch.traces {
        for series in &trace.series {
            for v in series {
                out.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn s2(steps: usize) -> GridScenario {
        GridScenario {
            horizon: 1.0,
            steps,
            driver: ZDriver::AbsorbedBrownian,
            exhausting_times: vec![0.0],
            cells: vec![GridCell { label: CellLabel::new(1, 0), z0: 0.5 }],
            run_to_absorption: true,
        }
    }

    #[test]
    fn validation() {
        let mut sc = s2(256);
        assert!(sc.validate().is_ok());
        sc.steps = 1;
        assert!(matches!(sc.validate(), Err(PathEngineError::InvalidScenario(_))));
        let mut sc = s2(256);
        sc.cells[0].z0 = 1.2;
        assert!(sc.validate().is_err());
        let mut sc = s2(256);
        sc.exhausting_times = vec![0.3333];
        assert!(matches!(sc.validate(), Err(PathEngineError::OffGridTime(_))));
        let mut sc = s2(16);
        sc.driver = ZDriver::LogisticDiffusion { sigma: 8.0 };
        assert!(matches!(sc.validate(), Err(PathEngineError::StepTooCoarse(_))));
        let cfg = SimConfig { master_seed: None, ..SimConfig::new(10, 0) };
        assert_eq!(simulate(&s2(64), &cfg).unwrap_err(), PathEngineError::SeedMissing);
    }

    #[test]
    fn sticks_round_trip() {
        let z0 = [0.2, 0.3, 0.1, 0.4];
        let st = Sticks::from_z(&z0);
        let mut z = [0.0; 4];
        st.fill_z(&mut z);
        for (a, b) in z.iter().zip(&z0) {
            assert_relative_eq!(a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn terminal_partition_is_a_partition() {
        let tp = TerminalPartition::new(1.0, &[0.25, 0.25, 0.5]);
        assert_relative_eq!(tp.bounds()[1].1, 0.0, epsilon = 1e-12);
        for &(t, w) in &[(0.0, 0.0), (0.5, 1.3), (0.99, -2.0)] {
            let s: f64 = (0..3).map(|i| tp.z(i, t, w)).sum();
            assert_relative_eq!(s, 1.0, epsilon = 1e-14);
            let ds: f64 = (0..3).map(|i| tp.dz_dw(i, t, w)).sum();
            assert!(ds.abs() < 1e-14);
        }
        assert_relative_eq!(tp.z(0, 0.0, 0.0), 0.25, epsilon = 1e-12);
        assert_eq!(tp.z(2, 1.0, 0.1), 1.0);
        assert_eq!(tp.cell_of(-0.1), 1);
        // derivative against a central difference
        let h = 1e-6;
        let fd = (tp.z(1, 0.3, 0.2 + h) - tp.z(1, 0.3, 0.2 - h)) / (2.0 * h);
        assert_relative_eq!(fd, tp.dz_dw(1, 0.3, 0.2), epsilon = 1e-8);
    }

    #[test]
    fn deterministic_and_schedule_independent() {
        let sc = s2(128);
        let a = simulate(&sc, &SimConfig { threads: Some(1), ..SimConfig::new(500, 7) }).unwrap();
        let b = simulate(&sc, &SimConfig { threads: Some(3), ..SimConfig::new(500, 7) }).unwrap();
        assert_eq!(a.digest(), b.digest());
        let c = simulate(&sc, &SimConfig::new(500, 8)).unwrap();
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn absorbed_paths_end_on_vertices() {
        let batch = simulate(&s2(256), &SimConfig::new(2000, 1)).unwrap();
        assert!(batch.absorbed_fraction() > 0.999);
        assert!(batch.max_simplex_error() < 1e-12);
        for p in &batch.paths {
            assert_eq!(p.ya_tail, 0.0);
            if p.cell.is_some() {
                assert!(p.infimum > 0.0 && p.infimum <= 0.5);
                assert!(p.ya.is_finite());
            }
        }
        let freq = cell_frequency_check(&batch);
        assert!(freq[0].frequency.agrees_with(0.5, 0.0));
    }

    #[test]
    fn certain_cell_has_flat_ya() {
        let mut sc = s2(64);
        sc.cells[0].z0 = 1.0;
        let batch = simulate(&sc, &SimConfig::new(50, 3)).unwrap();
        for p in &batch.paths {
            assert_eq!(p.cell, Some(0));
            assert_eq!(p.ya, 0.0);
            assert_eq!(p.ya_tail, 0.0);
        }
        let r = bracket_entropy_check(&batch).unwrap();
        assert_eq!(r.difference.mean, 0.0);
        assert!(lem1_ratio_check(&batch, 1.0).unwrap().ratio.is_none());
    }

    #[test]
    fn terminal_partition_draws_the_terminal_interval() {
        let sc = GridScenario {
            horizon: 1.0,
            steps: 64,
            driver: ZDriver::TerminalPartition,
            exhausting_times: vec![0.25, 0.5],
            cells: vec![
                GridCell { label: CellLabel::new(2, 0), z0: 0.5 },
                GridCell { label: CellLabel::new(1, 0), z0: 0.5 },
            ],
            run_to_absorption: false,
        };
        let batch = simulate(&sc, &SimConfig { record_paths: 3, ..SimConfig::new(200, 5) }).unwrap();
        assert_eq!(batch.traces.len(), 3);
        for (p, tr) in batch.paths.iter().zip(&batch.traces) {
            assert!(p.absorbed);
            assert_eq!(p.stop_step, 64);
            let c = p.cell.unwrap();
            assert_eq!(tr.series[c][64], 1.0);
            assert_eq!(tr.series[1 - c][64], 0.0);
        }
        let mut buf = Vec::new();
        write_paths_bin(&batch, &mut buf).unwrap();
        let n_series = batch.series_names.len();
        assert_eq!(buf.len(), 8 + 4 + 24 + 3 * n_series * 65 * 8);
        assert_eq!(&buf[..8], PATHS_MAGIC);
    }

    #[test]
    fn infimum_cdf_limits() {
        assert_relative_eq!(infimum_cdf(0.25, 0.5), 1.0 / 3.0, epsilon = 1e-15);
        assert_eq!(infimum_cdf(0.0, 0.5), 0.0);
        assert_relative_eq!(infimum_cdf(0.5 - 1e-12, 0.5), 1.0, epsilon = 1e-10);
    }

    #[test]
    fn logistic_stays_interior() {
        let mut sc = s2(512);
        sc.driver = ZDriver::LogisticDiffusion { sigma: 4.0 };
        let batch = simulate(&sc, &SimConfig::new(300, 2)).unwrap();
        for p in &batch.paths {
            if let Some(c) = p.cell {
                assert!(p.infimum > 0.0 && p.infimum <= p.z_exhausting[c]);
            }
        }
        assert!(batch.max_simplex_error() < 1e-12);
    }
}
