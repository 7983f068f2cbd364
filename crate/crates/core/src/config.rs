//! Run configuration files (JSON or TOML) and run manifests.
//!
//! Model parameters sit at the top level; `grid`, `solver`, `sim` and
//! `retro` are optional sections. Missing keys take their defaults and the
//! fully resolved configuration is echoed into the manifest.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::agents::SimConfig;
use crate::error::{Error, Result};
use crate::expr::{Coefficient, Expression};
use crate::grid::{Grid, ScalarField, TimeGrid};
use crate::model::ModelParams;
use crate::retro::RetroConfig;
use crate::solvers::SolverConfig;

/// Node counts in `x`, `y` and `t`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub nx: usize,
    pub ny: usize,
    pub nt: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { nx: 33, ny: 33, nt: 64 }
    }
}

impl GridConfig {
    pub fn space(&self) -> Result<Grid> {
        let grid = Grid::unit_square(self.nx, self.ny);
        grid.map_err(|_| Error::invalid("grid.nx / grid.ny", ">= 3", format!("{} x {}", self.nx, self.ny)))
    }

    pub fn time(&self, t_final: f64) -> Result<TimeGrid> {
        TimeGrid::new(t_final, self.nt).map_err(|_| Error::invalid("grid.nt", ">= 2", self.nt))
    }
}

pub const DEFAULT_INITIAL_DENSITY: &str = "cos(pi()*x/2)*(1+0.3*cos(pi()*y))";

/// Everything a subcommand needs.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelParams,
    pub grid: GridConfig,
    pub solver: SolverConfig,
    pub sim: SimConfig,
    pub retro: RetroConfig,
    /// `m(x, y, 0)`; must be nonnegative on the grid.
    pub initial_density: Coefficient,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelParams::default(),
            grid: GridConfig::default(),
            solver: SolverConfig::default(),
            sim: SimConfig::default(),
            retro: RetroConfig::default(),
            initial_density: Coefficient::Expr(Expression::parse(DEFAULT_INITIAL_DENSITY).expect("valid literal")),
        }
    }
}

const SECTIONS: [&str; 5] = ["grid", "solver", "sim", "retro", "initial_density"];

impl RunConfig {
    /// Reads a JSON (`.json`) or TOML (`.toml`) file, or the `config` entry of
    /// a manifest written by a previous run, and validates the result.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.into(), source: e })?;
        let parse_err = |reason: String| Error::Parse { path: path.into(), reason };
        let mut value: Value = match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => {
                let t: toml::Value = toml::from_str(&text).map_err(|e| parse_err(e.to_string()))?;
                serde_json::to_value(t).map_err(|e| parse_err(e.to_string()))?
            }
            Some("json") => serde_json::from_str(&text).map_err(|e| parse_err(e.to_string()))?,
            other => return Err(parse_err(format!("unsupported config extension {other:?}; use .json or .toml"))),
        };
        if let Some(inner) = value.get("config").filter(|_| value.get("command").is_some()) {
            value = inner.clone();
        }
        let cfg = Self::from_value(value).map_err(|e| match e {
            Error::Parse { reason, .. } => parse_err(reason),
            other => other,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Builds a configuration from a parsed document (without validation).
    pub fn from_value(value: Value) -> Result<Self> {
        let parse_err = |reason: String| Error::Parse { path: PathBuf::from("<config>"), reason };
        let Value::Object(mut map) = value else {
            return Err(parse_err("the configuration must be a table of keys".into()));
        };
        let mut section = |name: &str| map.remove(name);
        let grid = section("grid");
        let solver = section("solver");
        let sim = section("sim");
        let retro = section("retro");
        let density = section("initial_density");
        let known: BTreeSet<String> = match serde_json::to_value(ModelParams::default()) {
            Ok(Value::Object(m)) => m.keys().cloned().collect(),
            _ => BTreeSet::new(),
        };
        if let Some(key) = map.keys().find(|k| !known.contains(*k)) {
            let allowed: Vec<&str> = known.iter().map(String::as_str).chain(SECTIONS).collect();
            return Err(parse_err(format!("unknown key `{key}`; expected one of {}", allowed.join(", "))));
        }
        fn typed<T: for<'de> Deserialize<'de> + Default>(v: Option<Value>, name: &str) -> Result<T> {
            match v {
                None => Ok(T::default()),
                Some(v) => serde_json::from_value(v).map_err(|e| Error::Parse { path: PathBuf::from("<config>"), reason: format!("{name}: {e}") }),
            }
        }
        let model: ModelParams = serde_json::from_value(Value::Object(map)).map_err(|e| parse_err(e.to_string()))?;
        let initial_density = match density {
            None => RunConfig::default().initial_density,
            Some(v) => serde_json::from_value(v).map_err(|e| parse_err(format!("initial_density: {e}")))?,
        };
        Ok(RunConfig {
            model,
            grid: typed(grid, "grid")?,
            solver: typed(solver, "solver")?,
            sim: typed(sim, "sim")?,
            retro: typed(retro, "retro")?,
            initial_density,
        })
    }

    /// Checks every section; the retrospective section is checked by
    /// [`RunConfig::validate_retro`] since it only matters for that command.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.grid.space()?;
        self.grid.time(self.model.horizon)?;
        self.solver.validate()?;
        self.sim.validate()?;
        let m0 = self.initial_field()?;
        if let Some(v) = m0.values().iter().find(|v| !(**v >= 0.0)) {
            return Err(Error::invalid("initial_density", ">= 0 on the grid", v));
        }
        Ok(())
    }

    pub fn validate_retro(&self) -> Result<()> {
        self.retro.validate(self.model.horizon)
    }

    pub fn space(&self) -> Result<Grid> {
        self.grid.space()
    }

    pub fn time(&self) -> Result<TimeGrid> {
        self.grid.time(self.model.horizon)
    }

    pub fn initial_field(&self) -> Result<ScalarField> {
        let c = &self.initial_density;
        Ok(ScalarField::from_fn(self.space()?, |x, y| c.eval(x, y, 0.0)))
    }

    /// The resolved configuration in the same layout as the input files.
    pub fn to_value(&self) -> Value {
        let mut map = match serde_json::to_value(&self.model) {
            Ok(Value::Object(m)) => m,
            _ => Map::new(),
        };
        let mut put = |k: &str, v: std::result::Result<Value, serde_json::Error>| {
            map.insert(k.to_owned(), v.expect("configuration sections serialize"));
        };
        put("grid", serde_json::to_value(self.grid));
        put("solver", serde_json::to_value(&self.solver));
        put("sim", serde_json::to_value(&self.sim));
        put("retro", serde_json::to_value(&self.retro));
        put("initial_density", serde_json::to_value(&self.initial_density));
        Value::Object(map)
    }
}

/// One output file and its SHA-256 digest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputFile {
    pub path: String,
    pub sha256: String,
}

/// Record of a finished run, sufficient to replay it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Value,
    pub seed: Option<u64>,
    /// Seconds since the Unix epoch.
    pub started_at: f64,
    pub finished_at: f64,
    pub version: String,
    pub outputs: Vec<OutputFile>,
}

pub fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io { path: path.into(), source: e })?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

impl RunManifest {
    pub fn new(command: &str, config: Value, seed: Option<u64>, started_at: f64) -> Self {
        RunManifest {
            command: command.to_owned(),
            config,
            seed,
            started_at,
            finished_at: started_at,
            version: env!("CARGO_PKG_VERSION").to_owned(),
            outputs: Vec::new(),
        }
    }

    /// Hashes `files` (relative to `dir`) and writes `dir/manifest.json`
    /// through a temporary file and a rename.
    pub fn finish(mut self, dir: &Path, files: &[String]) -> Result<PathBuf> {
        self.outputs = files
            .iter()
            .map(|f| Ok(OutputFile { path: f.clone(), sha256: sha256_file(&dir.join(f))? }))
            .collect::<Result<_>>()?;
        self.finished_at = unix_now();
        let target = dir.join("manifest.json");
        let body = serde_json::to_vec_pretty(&self).expect("manifest serializes");
        write_atomic(&target, &body)?;
        Ok(target)
    }
}

/// Writes `bytes` to a sibling temporary file, syncs it, and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let io = |e| Error::Io { path: path.into(), source: e };
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    let mut f = std::fs::File::create(&tmp).map_err(io)?;
    f.write_all(bytes).map_err(io)?;
    f.sync_all().map_err(io)?;
    std::fs::rename(&tmp, path).map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = RunConfig::from_value(json!({"sigma1_sq": 0.3, "sigma2_sq": 0.3, "T": 2.0})).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.model.sigma1_sq, Coefficient::Const(0.3));
        assert_eq!(cfg.grid, GridConfig::default());
        let m0 = cfg.initial_field().unwrap();
        assert!((m0.at(0, 0) - 1.3).abs() < 1e-12);
        assert!(m0.at(32, 0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_values_by_name() {
        let err = RunConfig::from_value(json!({"epsilon": 0.0})).unwrap().validate().unwrap_err();
        assert!(err.to_string().contains("epsilon must be > 0"), "{err}");
        let err = RunConfig::from_value(json!({"variant": "sideways"})).unwrap_err().to_string();
        assert!(err.contains("plus") && err.contains("minus"), "{err}");
        let err = RunConfig::from_value(json!({"colour": 1})).unwrap_err().to_string();
        assert!(err.contains("colour"), "{err}");
        let err = RunConfig::from_value(json!({"grid": {"nx": 33, "nz": 2}})).unwrap_err().to_string();
        assert!(err.contains("nz"), "{err}");
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_value(cfg.to_value()).unwrap(), cfg);
    }
}
