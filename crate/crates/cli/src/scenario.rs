//! Scenario files: parsing, validation, overrides and the resolved echo.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use thinlab_core::lattice::LevelSpec;
use thinlab_core::market::MarketSpec;
use thinlab_core::path_engine::{GridCell, GridScenario, ZDriver};
use thinlab_core::{CellLabel, StoppingTimeMap, ThinTimeModel, TreeModel};

#[derive(Debug)]
pub enum ScenarioError {
    FileNotFound(PathBuf),
    Syntax(String),
    Schema(String),
    BackendMismatch { operation: String, backend: Backend },
}

impl fmt::Display for ScenarioError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScenarioError::FileNotFound(p) => write!(f, "FileNotFound: {}", p.display()),
            ScenarioError::Syntax(m) => write!(f, "SyntaxError: {m}"),
            ScenarioError::Schema(m) => write!(f, "SchemaError: {m}"),
            ScenarioError::BackendMismatch { operation, backend } => {
                write!(f, "BackendMismatch: `{operation}` is not available on the {backend} backend")
            }
        }
    }
}

impl std::error::Error for ScenarioError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Tree,
    Grid,
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Backend::Tree => "tree",
            Backend::Grid => "grid",
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeSection {
    pub depth: usize,
    /// One entry per level; the last entry repeats down to `depth`.
    pub levels: Vec<LevelSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelSection {
    /// Branch probabilities shared by every node of the level.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probs: Option<Vec<f64>>,
    /// Branch probabilities node by node.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_node: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    pub steps: usize,
    pub driver: ZDriver,
    #[serde(default)]
    pub run_to_absorption: bool,
}

/// Thin time on the tree: leaf-wise exhausting times (`null` = never) and
/// leaf-wise cells (`null` = `τ = ∞`).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeThinTime {
    pub exhausting_times: Vec<Vec<Option<usize>>>,
    pub cells: Vec<Option<CellLabel>>,
}

/// Thin time on the grid: deterministic exhausting times and the initial
/// probabilities of the finite cells.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridThinTime {
    pub exhausting_times: Vec<f64>,
    pub cells: Vec<GridCell>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default = "default_n_paths")]
    pub n_paths: usize,
    #[serde(default = "default_seed")]
    pub master_seed: u64,
    #[serde(default = "default_gammas")]
    pub gammas: Vec<f64>,
    /// Standard errors a Monte Carlo estimate may be off.
    #[serde(default = "default_confidence")]
    pub confidence: f64,
    /// `β / z_{T_n}` values of the infimum-law check.
    #[serde(default = "default_fractions")]
    pub infimum_fractions: Vec<f64>,
    /// Coarser grids for the bias study of the bracket check; empty skips it.
    #[serde(default)]
    pub bias_steps: Vec<usize>,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            n_paths: default_n_paths(),
            master_seed: default_seed(),
            gammas: default_gammas(),
            confidence: default_confidence(),
            infimum_fractions: default_fractions(),
            bias_steps: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_out")]
    pub dir: PathBuf,
    /// Number of full trajectories written to `paths.bin`; 0 writes none.
    #[serde(default)]
    pub record_paths: usize,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: default_out(), record_paths: 0 }
    }
}

fn default_horizon() -> f64 {
    1.0
}
fn default_n_paths() -> usize {
    10_000
}
fn default_seed() -> u64 {
    1
}
fn default_gammas() -> Vec<f64> {
    vec![0.5, 1.0, 2.0]
}
fn default_confidence() -> f64 {
    3.0
}
fn default_fractions() -> Vec<f64> {
    (1..=20).map(|i| i as f64 / 20.0).collect()
}
fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub id: String,
    pub backend: Backend,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tree: Option<TreeSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSection>,
    /// Shape depends on the backend; checked by [`ScenarioFile::thin_time_tree`]
    /// and [`ScenarioFile::thin_time_grid`].
    pub thin_time: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub market: Option<MarketSpec>,
    #[serde(default)]
    pub run: RunSection,
    /// Reference values by check name, replacing the built-in ones.
    #[serde(default)]
    pub expected: BTreeMap<String, f64>,
    #[serde(default)]
    pub output: OutputSection,
}

/// Command-line values that replace scenario values.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub n_paths: Option<usize>,
    pub steps: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
pub struct OverrideRecord {
    pub field: &'static str,
    pub scenario: Value,
    pub command_line: Value,
}

pub fn parse_scenario(path: &Path) -> Result<ScenarioFile, ScenarioError> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => ScenarioError::FileNotFound(path.to_path_buf()),
        _ => ScenarioError::Syntax(format!("{}: {e}", path.display())),
    })?;
    parse_str(&text)
}

pub fn parse_str(text: &str) -> Result<ScenarioFile, ScenarioError> {
    let file: ScenarioFile = serde_json::from_str(text).map_err(|e| {
        use serde_json::error::Category;
        match e.classify() {
            Category::Data => ScenarioError::Schema(e.to_string()),
            _ => ScenarioError::Syntax(e.to_string()),
        }
    })?;
    file.validate()?;
    Ok(file)
}

fn section<T: for<'de> Deserialize<'de>>(name: &str, value: &Value) -> Result<T, ScenarioError> {
    T::deserialize(value).map_err(|e| ScenarioError::Schema(format!("{name}: {e}")))
}

impl ScenarioFile {
    fn validate(&self) -> Result<(), ScenarioError> {
        let schema = |m: String| Err(ScenarioError::Schema(m));
        match self.backend {
            Backend::Tree => {
                if self.tree.is_none() {
                    return schema("tree backend needs a `tree` section".into());
                }
                if self.grid.is_some() || self.market.is_some() {
                    return schema("`grid` and `market` sections need the grid backend".into());
                }
                self.thin_time_tree()?;
            }
            Backend::Grid => {
                if self.grid.is_none() {
                    return schema("grid backend needs a `grid` section".into());
                }
                if self.tree.is_some() {
                    return schema("`tree` section needs the tree backend".into());
                }
                self.grid_scenario()?;
            }
        }
        let run = &self.run;
        if run.n_paths == 0 {
            return schema("run.n_paths must be at least 1".into());
        }
        if let Some(g) = run.gammas.iter().find(|g| !(**g > 0.0) || !g.is_finite()) {
            return schema(format!("run.gammas: {g} is not positive"));
        }
        if !(run.confidence > 0.0) {
            return schema("run.confidence must be positive".into());
        }
        if let Some(f) = run.infimum_fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            return schema(format!("run.infimum_fractions: {f} is outside (0, 1]"));
        }
        Ok(())
    }

    pub fn thin_time_tree(&self) -> Result<TreeThinTime, ScenarioError> {
        section("thin_time", &self.thin_time)
    }

    pub fn thin_time_grid(&self) -> Result<GridThinTime, ScenarioError> {
        section("thin_time", &self.thin_time)
    }

    pub fn tree_model(&self) -> Result<ThinTimeModel, ScenarioError> {
        let spec = self.tree.as_ref().ok_or_else(|| ScenarioError::Schema("missing `tree` section".into()))?;
        let levels = spec
            .levels
            .iter()
            .enumerate()
            .map(|(i, l)| match (&l.probs, &l.per_node) {
                (Some(p), None) => Ok(LevelSpec::shared(p.clone())),
                (None, Some(p)) => Ok(LevelSpec::per_node(p.clone())),
                _ => Err(ScenarioError::Schema(format!("tree.levels[{i}]: give exactly one of `probs`, `per_node`"))),
            })
            .collect::<Result<Vec<_>, _>>()?;
        let tree = Arc::new(
            TreeModel::build(spec.depth, &levels).map_err(|e| ScenarioError::Schema(format!("tree: {e}")))?,
        );
        let tt = self.thin_time_tree()?;
        let exhausting = tt
            .exhausting_times
            .into_iter()
            .enumerate()
            .map(|(i, times)| {
                StoppingTimeMap::new(&tree, times)
                    .map_err(|e| ScenarioError::Schema(format!("thin_time.exhausting_times[{i}]: {e}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        ThinTimeModel::build(tree, exhausting, tt.cells, &[])
            .map_err(|e| ScenarioError::Schema(format!("thin_time: {e}")))
    }

    pub fn grid_scenario(&self) -> Result<GridScenario, ScenarioError> {
        let g = self.grid.as_ref().ok_or_else(|| ScenarioError::Schema("missing `grid` section".into()))?;
        let tt = self.thin_time_grid()?;
        let scenario = GridScenario {
            horizon: g.horizon,
            steps: g.steps,
            driver: g.driver,
            exhausting_times: tt.exhausting_times,
            cells: tt.cells,
            run_to_absorption: g.run_to_absorption,
        };
        scenario.validate().map_err(|e| ScenarioError::Schema(format!("grid: {e}")))?;
        Ok(scenario)
    }

    /// Applies command-line overrides and returns what changed.
    pub fn apply(&mut self, o: &Overrides) -> Result<Vec<OverrideRecord>, ScenarioError> {
        let mut changes = Vec::new();
        if let Some(n) = o.n_paths {
            changes.push(OverrideRecord { field: "run.n_paths", scenario: self.run.n_paths.into(), command_line: n.into() });
            self.run.n_paths = n;
        }
        if let Some(k) = o.steps {
            let grid = self.grid.as_mut().ok_or(ScenarioError::BackendMismatch {
                operation: "--steps".into(),
                backend: self.backend,
            })?;
            changes.push(OverrideRecord { field: "grid.steps", scenario: grid.steps.into(), command_line: k.into() });
            grid.steps = k;
        }
        if let Some(s) = o.seed {
            changes.push(OverrideRecord {
                field: "run.master_seed",
                scenario: self.run.master_seed.into(),
                command_line: s.into(),
            });
            self.run.master_seed = s;
        }
        if let Some(dir) = &o.out {
            changes.push(OverrideRecord {
                field: "output.dir",
                scenario: self.output.dir.display().to_string().into(),
                command_line: dir.display().to_string().into(),
            });
            self.output.dir = dir.clone();
        }
        self.validate()?;
        Ok(changes)
    }

    /// Pretty JSON of the resolved scenario with every default spelled out.
    pub fn echo(&self, overrides: &[OverrideRecord]) -> String {
        #[derive(Serialize)]
        struct Echo<'a> {
            scenario: &'a ScenarioFile,
            overrides: &'a [OverrideRecord],
        }
        let mut s = serde_json::to_string_pretty(&Echo { scenario: self, overrides }).expect("scenario serializes");
        s.push('\n');
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TREE: &str = r#"{
        "id": "t",
        "backend": "tree",
        "tree": { "depth": 2, "levels": [ { "probs": [0.5, 0.5] } ] },
        "thin_time": { "exhausting_times": [[1, 1, 1, 1]], "cells": [{"n": 1, "k": 0}, null, {"n": 1, "k": 0}, null] }
    }"#;

    const GRID: &str = r#"{
        "id": "g",
        "backend": "grid",
        "grid": { "steps": 64, "driver": { "kind": "absorbed-brownian" }, "run_to_absorption": true },
        "thin_time": { "exhausting_times": [0.0], "cells": [ { "label": {"n": 1, "k": 0}, "z0": 0.5 } ] }
    }"#;

    #[test]
    fn tree_scenario_builds() {
        let s = parse_str(TREE).unwrap();
        let tt = s.tree_model().unwrap();
        assert_eq!(tt.tree().leaf_count(), 4);
        assert_eq!(s.run.gammas, vec![0.5, 1.0, 2.0]);
    }

    #[test]
    fn grid_scenario_builds() {
        let s = parse_str(GRID).unwrap();
        let g = s.grid_scenario().unwrap();
        assert_eq!(g.horizon, 1.0);
        assert_eq!(g.cells[0].z0, 0.5);
    }

    #[test]
    fn unknown_keys_are_named() {
        let bad = GRID.replace("\"driver\"", "\"zdriver\"");
        let err = parse_str(&bad).unwrap_err();
        assert!(matches!(err, ScenarioError::Schema(_)));
        assert!(err.to_string().contains("zdriver"), "{err}");

        let bad = GRID.replace("\"z0\"", "\"z_0\"");
        let err = parse_str(&bad).unwrap_err();
        assert!(err.to_string().contains("z_0"), "{err}");

        let bad = TREE.replace("\"id\"", "\"name\"");
        assert!(parse_str(&bad).unwrap_err().to_string().contains("name"));
    }

    #[test]
    fn syntax_and_schema_are_distinguished() {
        assert!(matches!(parse_str("{ \"id\": "), Err(ScenarioError::Syntax(_))));
        assert!(matches!(parse_str("{ \"id\": 3 }"), Err(ScenarioError::Schema(_))));
        let thin_mismatch = GRID.replace("[0.0]", "[[0, 0]]");
        assert!(matches!(parse_str(&thin_mismatch), Err(ScenarioError::Schema(_))));
    }

    #[test]
    fn overrides_are_recorded() {
        let mut s = parse_str(GRID).unwrap();
        let o = Overrides { n_paths: Some(7), steps: Some(128), seed: None, out: None };
        let changes = s.apply(&o).unwrap();
        assert_eq!(changes.len(), 2);
        assert_eq!(s.grid.as_ref().unwrap().steps, 128);
        let echo = s.echo(&changes);
        assert!(echo.contains("\"grid.steps\""));
        assert!(echo.contains("\"confidence\": 3.0"));

        let mut t = parse_str(TREE).unwrap();
        let o = Overrides { steps: Some(8), ..Overrides::default() };
        assert!(matches!(t.apply(&o), Err(ScenarioError::BackendMismatch { .. })));
    }
}
