//! Scenario descriptions: TOML configuration, validation with key paths and
//! the built-in library.
//!
//! A config may start with `builtin = "<name>"`; its remaining keys are then
//! merged over the built-in table (tables merge recursively, other values
//! replace).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aubry::{default_tol_static, DetectionParams, ManualClass};
use crate::fieldlang::{parse, EvalError};
use crate::potential::{ControlGraphSpec, PeriodicGrid, PotentialError};
use crate::srgeom::{GeomError, SRStructure, TorusGeometry};
use crate::stochastic::SweepTemplate;

pub const MIN_DIMS: usize = 16;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("missing key `{0}`")]
    Missing(String),
    #[error("invalid value at `{path}`: {reason}")]
    Invalid { path: String, reason: String },
    #[error("unknown built-in scenario `{0}`")]
    UnknownBuiltin(String),
    #[error("TOML syntax: {0}")]
    Syntax(String),
    #[error(transparent)]
    Geometry(#[from] GeomError),
    #[error(transparent)]
    Potential(#[from] PotentialError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

fn invalid(path: impl Into<String>, reason: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid { path: path.into(), reason: reason.into() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryConfig {
    pub periods: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StructureConfig {
    /// `d` rows of `r` expressions.
    pub sigma: Vec<Vec<String>>,
    pub bbar: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub dims: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlConfig {
    pub step: Option<f64>,
    pub multipliers: Option<Vec<f64>>,
    pub drift_multipliers: Option<Vec<f64>>,
    pub snap_radius: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassMode {
    #[default]
    Auto,
    Manual,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassConfig {
    #[serde(default)]
    pub mode: ClassMode,
    pub seeds_per_axis: Option<usize>,
    #[serde(default)]
    pub manual: Vec<ManualClass>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    pub tol_static: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HormanderConfig {
    #[serde(default = "HormanderConfig::default_depth")]
    pub depth: usize,
}

impl HormanderConfig {
    fn default_depth() -> usize {
        2
    }
}

impl Default for HormanderConfig {
    fn default() -> Self {
        HormanderConfig { depth: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectionConfig {
    pub consistency_samples: usize,
    pub domination_pairs: usize,
    pub domination_sources: usize,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig { consistency_samples: 100, domination_pairs: 1000, domination_sources: 16 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    #[default]
    Flat,
    Cc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FwConfig {
    pub eps: f64,
    pub delta0: f64,
    pub delta1: f64,
    pub horizon: Option<f64>,
    pub chains: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StochasticConfig {
    pub ladder: Vec<f64>,
    pub center: Vec<f64>,
    pub radius: f64,
    #[serde(default)]
    pub metric: MetricKind,
    #[serde(default = "StochasticConfig::default_horizon")]
    pub horizon: f64,
    #[serde(default = "StochasticConfig::default_burn_in")]
    pub burn_in: f64,
    #[serde(default = "StochasticConfig::default_chains")]
    pub chains: usize,
    #[serde(default = "StochasticConfig::default_bootstrap")]
    pub bootstrap: usize,
    #[serde(default)]
    pub max_escalations: usize,
    pub fw: Option<FwConfig>,
}

impl StochasticConfig {
    fn default_horizon() -> f64 {
        2000.0
    }
    fn default_burn_in() -> f64 {
        20.0
    }
    fn default_chains() -> usize {
        64
    }
    fn default_bootstrap() -> usize {
        200
    }

    pub fn template(&self, seed: u64) -> SweepTemplate {
        SweepTemplate {
            horizon: self.horizon,
            burn_in: self.burn_in,
            chains: self.chains,
            seed,
            bootstrap: self.bootstrap,
            max_escalations: self.max_escalations,
            ..SweepTemplate::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FpConfig {
    pub ladder: Vec<f64>,
    #[serde(default = "FpConfig::default_tol")]
    pub tol: f64,
    #[serde(default = "FpConfig::default_max_iter")]
    pub max_iter: usize,
}

impl FpConfig {
    fn default_tol() -> f64 {
        1e-10
    }
    fn default_max_iter() -> usize {
        20_000_000
    }
}

/// Reference value of `φ` at a point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointOracle {
    pub x: Vec<f64>,
    pub value: f64,
    pub tol: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub class_count: Option<usize>,
    pub phi_at: Vec<PointOracle>,
    /// Accepted range of the fitted level `λ̂`.
    pub lambda_range: Option<[f64; 2]>,
    /// Relative tolerance of the embedded-chain exponent against `Φ̂`.
    pub fw_rel_tol: Option<f64>,
    /// Absolute slack added to `fw_rel_tol·Φ̂`, needed where `Φ̂` vanishes.
    pub fw_abs_tol: Option<f64>,
    pub fp_final_gap: Option<f64>,
    pub fp_strictly_decreasing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub geometry: GeometryConfig,
    pub structure: StructureConfig,
    pub grid: GridConfig,
    #[serde(default)]
    pub control: ControlConfig,
    #[serde(default)]
    pub classes: ClassConfig,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub hormander: HormanderConfig,
    #[serde(default)]
    pub selection: SelectionConfig,
    pub stochastic: Option<StochasticConfig>,
    pub fp: Option<FpConfig>,
    #[serde(default)]
    pub verify: VerifyConfig,
    #[serde(default = "Scenario::default_seed")]
    pub seed: u64,
}

const REQUIRED: &[&str] = &["name", "geometry.periods", "structure.sigma", "structure.bbar", "grid.dims"];

const CIRCLE_SINGLE_WELL: &str = r#"
name = "circle-single-well"
seed = 1
[geometry]
periods = [1.0]
[structure]
sigma = [["1"]]
bbar = ["-sin(2*pi*x1)"]
[grid]
dims = [256]
[stochastic]
ladder = [0.25, 0.18, 0.12, 0.08]
center = [0.5]
radius = 0.05
horizon = 2000.0
chains = 64
[stochastic.fw]
eps = 0.12
delta0 = 0.1
delta1 = 0.05
[fp]
ladder = [0.2, 0.1, 0.05]
[verify]
class_count = 2
phi_at = [{ x = [0.5], value = 0.3183098861837907, tol = 0.02 }]
lambda_range = [0.25464790894703254, 0.3819718634205488]
fw_rel_tol = 0.25
fw_abs_tol = 0.05
fp_final_gap = 0.06
fp_strictly_decreasing = true
"#;

const CIRCLE_DOUBLE_WELL: &str = r#"
name = "circle-double-well"
seed = 1
[geometry]
periods = [1.0]
[structure]
sigma = [["1"]]
bbar = ["-sin(4*pi*x1) - 0.4*sin(2*pi*x1)"]
[grid]
dims = [256]
[stochastic]
ladder = [0.25, 0.18, 0.12, 0.08]
center = [0.5]
radius = 0.05
[verify]
class_count = 4
"#;

const CIRCLE_THREE_CLASS: &str = r#"
name = "circle-three-class"
seed = 1
[geometry]
periods = [1.0]
[structure]
sigma = [["1"]]
bbar = ["-sin(2*pi*x1)*(1 - sin(2*pi*x1))"]
[grid]
dims = [512]
[verify]
class_count = 3
"#;

const TORUS3_B1: &str = r#"
name = "torus3-b1"
seed = 1
[geometry]
periods = [6.283185307179586, 6.283185307179586, 6.283185307179586]
[structure]
sigma = [["cos(x3)", "0"], ["sin(x3)", "0"], ["0", "1"]]
bbar = ["1", "sin(x3 - 1)"]
[grid]
dims = [48, 48, 48]
[selection]
domination_sources = 4
[stochastic]
ladder = [0.4, 0.3, 0.22]
center = [0.0, 0.0, 1.0]
radius = 0.3
metric = "cc"
[verify]
class_count = 2
phi_at = [{ x = [0.0, 0.0, 1.0], value = 2.0, tol = 0.1 }]
lambda_range = [1.5, 2.5]
"#;

const TORUS3_B2: &str = r#"
name = "torus3-b2"
seed = 1
[geometry]
periods = [6.283185307179586, 6.283185307179586, 6.283185307179586]
[structure]
sigma = [["cos(x3)", "0"], ["sin(x3)", "0"], ["0", "1"]]
bbar = ["1", "1 - sin(x3 - 1)"]
[grid]
dims = [48, 48, 48]
[classes]
mode = "manual"
manual = [{ label = "A1", level_set = "0" }]
[selection]
domination_sources = 4
[stochastic]
ladder = [0.4, 0.3, 0.22]
center = [0.0, 0.0, 1.0]
radius = 0.3
metric = "cc"
[verify]
class_count = 1
"#;

pub const BUILTINS: &[(&str, &str)] = &[
    ("circle-single-well", CIRCLE_SINGLE_WELL),
    ("circle-double-well", CIRCLE_DOUBLE_WELL),
    ("circle-three-class", CIRCLE_THREE_CLASS),
    ("torus3-b1", TORUS3_B1),
    ("torus3-b2", TORUS3_B2),
];

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn lookup<'a>(t: &'a toml::Table, path: &str) -> Option<&'a toml::Value> {
    let mut parts = path.split('.');
    let mut cur = t.get(parts.next()?)?;
    for p in parts {
        cur = cur.as_table()?.get(p)?;
    }
    Some(cur)
}

fn builtin_table(name: &str) -> Result<toml::Table, ScenarioError> {
    let text = BUILTINS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, t)| *t)
        .ok_or_else(|| ScenarioError::UnknownBuiltin(name.to_string()))?;
    text.parse::<toml::Table>().map_err(|e| ScenarioError::Syntax(e.to_string()))
}

impl Scenario {
    fn default_seed() -> u64 {
        1
    }

    pub fn builtin(name: &str) -> Result<Self, ScenarioError> {
        Self::from_table(builtin_table(name)?)
    }

    pub fn builtin_names() -> impl Iterator<Item = &'static str> {
        BUILTINS.iter().map(|(n, _)| *n)
    }

    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| ScenarioError::Syntax(e.to_string()))?;
        Self::from_table(table)
    }

    pub fn from_table(mut table: toml::Table) -> Result<Self, ScenarioError> {
        if let Some(v) = table.remove("builtin") {
            let name = v.as_str().ok_or_else(|| invalid("builtin", "expected a string"))?;
            let mut base = builtin_table(name)?;
            merge(&mut base, table);
            table = base;
        }
        for path in REQUIRED {
            if lookup(&table, path).is_none() {
                return Err(ScenarioError::Missing(path.to_string()));
            }
        }
        let sc: Scenario = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| invalid("<root>", e.message().to_string()))?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let d = self.geometry.periods.len();
        if d == 0 {
            return Err(invalid("geometry.periods", "at least one period"));
        }
        for (i, p) in self.geometry.periods.iter().enumerate() {
            if !(*p > 0.0 && p.is_finite()) {
                return Err(invalid(format!("geometry.periods[{i}]"), "must be positive"));
            }
        }
        if self.structure.sigma.len() != d {
            return Err(invalid("structure.sigma", format!("expected {d} rows, found {}", self.structure.sigma.len())));
        }
        let r = self.structure.bbar.len();
        if r == 0 {
            return Err(invalid("structure.bbar", "at least one entry"));
        }
        for (i, row) in self.structure.sigma.iter().enumerate() {
            if row.len() != r {
                return Err(invalid(
                    format!("structure.sigma[{i}]"),
                    format!("expected {r} entries (one per bbar component), found {}", row.len()),
                ));
            }
            for (k, e) in row.iter().enumerate() {
                parse(e, d).map_err(|err| invalid(format!("structure.sigma[{i}][{k}]"), err.to_string()))?;
            }
        }
        for (k, e) in self.structure.bbar.iter().enumerate() {
            parse(e, d).map_err(|err| invalid(format!("structure.bbar[{k}]"), err.to_string()))?;
        }
        if self.grid.dims.len() != d {
            return Err(invalid("grid.dims", format!("expected {d} entries")));
        }
        for (i, &n) in self.grid.dims.iter().enumerate() {
            if n < MIN_DIMS {
                return Err(invalid(format!("grid.dims[{i}]"), format!("{n} < {MIN_DIMS}")));
            }
        }
        if self.classes.mode == ClassMode::Manual && self.classes.manual.is_empty() {
            return Err(ScenarioError::Missing("classes.manual".into()));
        }
        for (i, m) in self.classes.manual.iter().enumerate() {
            if let Some(ls) = &m.level_set {
                parse(ls, d).map_err(|e| invalid(format!("classes.manual[{i}].level_set"), e.to_string()))?;
            }
            if m.points.iter().any(|p| p.len() != d) {
                return Err(invalid(format!("classes.manual[{i}].points"), format!("points need {d} coordinates")));
            }
        }
        if let Some(st) = &self.stochastic {
            if st.center.len() != d {
                return Err(invalid("stochastic.center", format!("expected {d} coordinates")));
            }
            if st.ladder.len() < 3
                || st.ladder.windows(2).any(|w| !(w[1] < w[0]))
                || st.ladder.iter().any(|e| !(*e > 0.0))
            {
                return Err(invalid("stochastic.ladder", "need at least 3 strictly decreasing positive values"));
            }
            if st.chains == 0 {
                return Err(invalid("stochastic.chains", "must be positive"));
            }
        }
        if let Some(fp) = &self.fp {
            if fp.ladder.is_empty() || fp.ladder.iter().any(|e| !(*e > 0.0)) {
                return Err(invalid("fp.ladder", "need positive values"));
            }
        }
        Ok(())
    }

    pub fn structure(&self) -> Result<SRStructure, ScenarioError> {
        let geom = TorusGeometry::new(self.geometry.periods.clone())?;
        Ok(SRStructure::from_strings(geom, &self.structure.sigma, &self.structure.bbar)?)
    }

    pub fn grid(&self) -> Result<PeriodicGrid, ScenarioError> {
        let geom = TorusGeometry::new(self.geometry.periods.clone())?;
        Ok(PeriodicGrid::new(geom, self.grid.dims.clone())?)
    }

    pub fn control_spec(&self, s: &SRStructure, grid: &PeriodicGrid) -> ControlGraphSpec {
        let mut spec = ControlGraphSpec::default_for(s, grid);
        let c = &self.control;
        if let Some(v) = c.step {
            spec.step = v;
        }
        if let Some(v) = &c.multipliers {
            spec.multipliers = v.clone();
        }
        if let Some(v) = &c.drift_multipliers {
            spec.drift_multipliers = v.clone();
        }
        if let Some(v) = c.snap_radius {
            spec.snap_radius = v;
        }
        spec
    }

    pub fn tol_static(&self, s: &SRStructure, grid: &PeriodicGrid) -> Result<f64, ScenarioError> {
        match self.tolerances.tol_static {
            Some(t) => Ok(t),
            None => Ok(default_tol_static(s, grid)?),
        }
    }

    pub fn detection_params(&self, s: &SRStructure, grid: &PeriodicGrid) -> Result<DetectionParams, ScenarioError> {
        let mut p = DetectionParams::defaults(s, grid)?;
        p.tol_static = self.tol_static(s, grid)?;
        if let Some(n) = self.classes.seeds_per_axis {
            p.seeds_per_axis = n;
        }
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_load() {
        for name in Scenario::builtin_names() {
            let sc = Scenario::builtin(name).unwrap();
            assert_eq!(sc.name, name);
            sc.structure().unwrap();
            let back = Scenario::from_toml(&sc.to_toml()).unwrap();
            assert_eq!(back, sc);
        }
    }

    #[test]
    fn builtin_overrides_merge() {
        let sc = Scenario::from_toml(
            "builtin = \"circle-single-well\"\nseed = 9\n[stochastic]\nchains = 4\nhorizon = 50.0\n",
        )
        .unwrap();
        assert_eq!(sc.seed, 9);
        let st = sc.stochastic.unwrap();
        assert_eq!((st.chains, st.horizon, st.radius), (4, 50.0, 0.05));
        assert_eq!(sc.grid.dims, vec![256]);
    }

    #[test]
    fn errors_name_the_key() {
        let missing = "name = \"x\"\n[geometry]\nperiods = [1.0]\n[structure]\nbbar = [\"0\"]\n[grid]\ndims = [16]\n";
        match Scenario::from_toml(missing) {
            Err(ScenarioError::Missing(p)) => assert_eq!(p, "structure.sigma"),
            other => panic!("{other:?}"),
        }
        let bad_expr = missing.replace("[structure]\n", "[structure]\nsigma = [[\"1 +\"]]\n");
        match Scenario::from_toml(&bad_expr) {
            Err(ScenarioError::Invalid { path, .. }) => assert_eq!(path, "structure.sigma[0][0]"),
            other => panic!("{other:?}"),
        }
        let small = missing.replace("[structure]\n", "[structure]\nsigma = [[\"1\"]]\n").replace("[16]", "[8]");
        match Scenario::from_toml(&small) {
            Err(ScenarioError::Invalid { path, .. }) => assert_eq!(path, "grid.dims[0]"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(Scenario::from_toml("builtin = \"nope\""), Err(ScenarioError::UnknownBuiltin(_))));
        assert!(matches!(Scenario::from_toml("name = "), Err(ScenarioError::Syntax(_))));
        let typo = "builtin = \"circle-single-well\"\n[grid]\ndimz = [32]\n";
        assert!(matches!(Scenario::from_toml(typo), Err(ScenarioError::Invalid { .. })));
    }
}
