//! JSON run configuration shared by every command.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Grid;
use crate::pddo::{DerivativeFilterSet, DEFAULT_HALF_WIDTH, DEFAULT_HORIZON_FACTOR};
use crate::physics::{IcKind, IcSpec, PdeSpec};
use crate::reference::SolveConfig;
use crate::trainer::{TrainConfig, TrainOptions};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub n: usize,
    #[serde(default)]
    pub x_min: f64,
    #[serde(default = "one")]
    pub x_max: f64,
}

fn one() -> f64 {
    1.0
}

fn default_half_width() -> usize {
    DEFAULT_HALF_WIDTH
}

fn default_horizon_factor() -> f64 {
    DEFAULT_HORIZON_FACTOR
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterConfig {
    #[serde(default = "default_half_width")]
    pub m: usize,
    #[serde(default = "default_horizon_factor")]
    pub horizon_factor: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            m: DEFAULT_HALF_WIDTH,
            horizon_factor: DEFAULT_HORIZON_FACTOR,
        }
    }
}

impl FilterConfig {
    pub fn build(&self, dx: f64) -> Result<Arc<DerivativeFilterSet>> {
        DerivativeFilterSet::cached(self.m, dx, self.horizon_factor)
    }
}

/// Spatial operator of the reference solver.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceStencil {
    /// Same nonlocal filters as training.
    #[default]
    Pddo,
    /// Local 5-point differences.
    Fdm,
}

/// Reference-solver settings. Missing values are filled by [`RunConfig::resolve`].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceConfig {
    pub dt_ref: Option<f64>,
    pub dt_save: Option<f64>,
    pub t_end: Option<f64>,
    #[serde(default)]
    pub stencil: ReferenceStencil,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Prediction steps beyond the training window.
    #[serde(default)]
    pub extrapolation_steps: usize,
}

fn default_ic() -> IcSpec {
    IcSpec {
        kind: IcKind::Grf,
        seed: 0,
        amplitude: 1.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub pde: PdeSpec,
    pub grid: GridConfig,
    #[serde(default)]
    pub filter: FilterConfig,
    #[serde(default = "default_ic")]
    pub ic: IcSpec,
    pub train: TrainConfig,
    #[serde(default)]
    pub reference: ReferenceConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::config(format!("invalid config: {e}")))?;
        cfg.resolve()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Checks the version and fills every optional value, so that the dump
    /// of the result reproduces the run without relying on defaults.
    pub fn resolve(mut self) -> Result<Self> {
        if self.version != CONFIG_VERSION {
            return Err(Error::config(format!(
                "unsupported config version {}, expected {CONFIG_VERSION}",
                self.version
            )));
        }
        self.pde.validate()?;
        self.train.validate()?;
        self.grid()?;
        if !(self.ic.amplitude.is_finite()) {
            return Err(Error::config("ic.amplitude must be finite"));
        }
        let r = &mut self.reference;
        let dt_ref = *r.dt_ref.get_or_insert(self.train.dt);
        let dt_save = *r.dt_save.get_or_insert(self.train.dt);
        let t_end = *r
            .t_end
            .get_or_insert((self.train.steps + self.eval.extrapolation_steps) as f64 * self.train.dt);
        for (name, v) in [("dt_ref", dt_ref), ("dt_save", dt_save)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("reference.{name} must be positive, got {v}")));
            }
        }
        if !(t_end >= 0.0 && t_end.is_finite()) {
            return Err(Error::config(format!("reference.t_end must be non-negative, got {t_end}")));
        }
        Ok(self)
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.grid.n, self.grid.x_min, self.grid.x_max)
    }

    pub fn dt_ref(&self) -> f64 {
        self.reference.dt_ref.unwrap_or(self.train.dt)
    }

    pub fn dt_save(&self) -> f64 {
        self.reference.dt_save.unwrap_or(self.train.dt)
    }

    pub fn t_end(&self) -> f64 {
        self.reference
            .t_end
            .unwrap_or((self.train.steps + self.eval.extrapolation_steps) as f64 * self.train.dt)
    }

    pub fn reference_filters(&self) -> Result<Arc<DerivativeFilterSet>> {
        let dx = self.grid()?.dx();
        match self.reference.stencil {
            ReferenceStencil::Pddo => self.filter.build(dx),
            ReferenceStencil::Fdm => Ok(Arc::new(DerivativeFilterSet::central_difference(dx)?)),
        }
    }

    /// Reference solve configuration for this run.
    pub fn solve_config(&self) -> Result<SolveConfig> {
        SolveConfig::with_save_interval(
            self.pde,
            self.grid()?,
            self.t_end(),
            self.dt_ref(),
            self.dt_save(),
            self.reference_filters()?,
        )
    }

    pub fn train_options(&self, checkpoint_dir: Option<PathBuf>) -> TrainOptions {
        TrainOptions {
            checkpoint_dir,
            filter_half_width: Some(self.filter.m),
            horizon_factor: Some(self.filter.horizon_factor),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "version": 1,
        "pde": {"kind": "burgers", "nu": 0.005},
        "grid": {"n": 32},
        "train": {"steps": 20, "dt": 0.002, "epochs": 3}
    }"#;

    #[test]
    fn minimal_config_resolves_defaults() {
        let c = RunConfig::from_json(MINIMAL).unwrap();
        assert_eq!(c.filter, FilterConfig::default());
        assert_eq!(c.grid.x_max, 1.0);
        assert_eq!(c.reference.dt_ref, Some(0.002));
        assert!((c.t_end() - 0.04).abs() < 1e-15);
        assert_eq!(c.ic, default_ic());
    }

    #[test]
    fn resolved_dump_roundtrips() {
        let c = RunConfig::from_json(MINIMAL).unwrap();
        let again = RunConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(c, again);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = MINIMAL.replace("\"grid\": {\"n\": 32}", "\"grid\": {\"n\": 32, \"size\": 4}");
        assert_eq!(RunConfig::from_json(&bad).unwrap_err().category(), "config");
        let bad = MINIMAL.replace("\"nu\": 0.005", "\"nu\": 0.005, \"mu\": 1");
        assert!(RunConfig::from_json(&bad).is_err());
        let bad = MINIMAL.replace("\"version\": 1", "\"version\": 1, \"extra\": true");
        assert!(RunConfig::from_json(&bad).is_err());
    }

    #[test]
    fn wrong_version_is_rejected() {
        let bad = MINIMAL.replace("\"version\": 1", "\"version\": 2");
        let e = RunConfig::from_json(&bad).unwrap_err();
        assert!(e.to_string().contains("version"));
    }

    #[test]
    fn bad_values_are_config_errors() {
        let bad = MINIMAL.replace("\"nu\": 0.005", "\"nu\": -1");
        assert_eq!(RunConfig::from_json(&bad).unwrap_err().category(), "config");
        let bad = MINIMAL.replace("\"n\": 32", "\"n\": 1");
        assert!(RunConfig::from_json(&bad).is_err());
    }
}
