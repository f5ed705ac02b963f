//! JSON run configuration. Every section and key is optional and falls back
//! to the documented default; unknown keys are rejected so typos fail loudly.
//! Values are validated against the owning module's invariants at load time.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ba::BaConfig;
use crate::error::{Error, Result};
use crate::fit::FitConfig;
use crate::kernel::{GpHyperparams, MaternNu};
use crate::photo::PhotoConfig;

/// `hyperparams` section: kernel hyperparameters shared by conditioning,
/// selection, calibration, and the solvers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperSection {
    /// Signal variance (prior variance at a point is half of this).
    pub sigma_f_sq: f64,
    /// Observation noise variance.
    pub sigma_n_sq: f64,
    /// Matern smoothness: "0.5", "1.5", or "2.5".
    pub nu: MaternNu,
}

impl Default for HyperSection {
    fn default() -> Self {
        let h = GpHyperparams::default();
        Self { sigma_f_sq: h.sigma_f_sq(), sigma_n_sq: h.sigma_n_sq(), nu: h.nu() }
    }
}

impl HyperSection {
    pub fn build(&self) -> Result<GpHyperparams> {
        GpHyperparams::new(self.sigma_f_sq, self.sigma_n_sq, self.nu)
    }
}

/// `fit` section: control-grid dimensions plus the coordinate-descent solver
/// settings, flattened into one object.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitSection {
    /// Control-grid columns (>= 2); the field is bilinearly upsampled.
    pub grid_width: usize,
    /// Control-grid rows (>= 2).
    pub grid_height: usize,
    pub max_iters: usize,
    pub init_step: f64,
    pub step_grow: f64,
    pub step_shrink: f64,
    pub rel_tol: f64,
    pub inducing_count: usize,
    pub seed: u64,
}

impl Default for FitSection {
    fn default() -> Self {
        let c = FitConfig::default();
        Self {
            grid_width: 8,
            grid_height: 6,
            max_iters: c.max_iters,
            init_step: c.init_step,
            step_grow: c.step_grow,
            step_shrink: c.step_shrink,
            rel_tol: c.rel_tol,
            inducing_count: c.inducing_count,
            seed: c.seed,
        }
    }
}

impl FitSection {
    pub fn solver(&self) -> FitConfig {
        FitConfig {
            max_iters: self.max_iters,
            init_step: self.init_step,
            step_grow: self.step_grow,
            step_shrink: self.step_shrink,
            rel_tol: self.rel_tol,
            inducing_count: self.inducing_count,
            seed: self.seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.grid_width < 2 || self.grid_height < 2 {
            return Err(Error::Config(format!(
                "fit control grid must be at least 2x2, got {}x{}",
                self.grid_width, self.grid_height
            )));
        }
        self.solver().validate()
    }
}

/// `selection` section: candidate-grid settings for greedy selection.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectionSection {
    /// Pixel stride of the candidate grid.
    pub stride: usize,
}

impl Default for SelectionSection {
    fn default() -> Self {
        Self { stride: 2 }
    }
}

impl SelectionSection {
    fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::Config("selection stride must be at least 1".into()));
        }
        Ok(())
    }
}

/// Whole run configuration; see the section types for keys and defaults.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub hyperparams: HyperSection,
    pub fit: FitSection,
    /// Bundle-adjustment solver settings.
    pub lm: BaConfig,
    /// Two-frame photometric solver settings.
    pub photo: PhotoConfig,
    pub selection: SelectionSection,
    /// Raw 16-bit units per meter when reading or writing depth PNGs.
    pub depth_scale: f64,
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        // Rewrap section errors so a bad document always surfaces (and exits)
        // as a configuration error, not as the section's parameter error.
        let section = |name: &str, r: Result<()>| {
            r.map_err(|e| Error::Config(format!("section `{name}`: {e}")))
        };
        section("hyperparams", self.hyperparams.build().map(|_| ()))?;
        section("fit", self.fit.validate())?;
        section("lm", self.lm.validate())?;
        section("photo", self.photo.validate())?;
        section("selection", self.selection.validate())?;
        if !(self.depth_scale > 0.0 && self.depth_scale.is_finite()) {
            return Err(Error::Config(format!(
                "depth_scale must be positive and finite, got {}",
                self.depth_scale
            )));
        }
        Ok(())
    }

    /// Defaults when no path is given; otherwise parses and validates the
    /// JSON document at `path`.
    pub fn load(path: Option<&Path>) -> Result<Config> {
        let Some(path) = path else {
            return Ok(Config::default());
        };
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: Config = serde_json::from_str(&text).map_err(|e| {
            Error::Config(format!("{}:{}:{}: {e}", path.display(), e.line(), e.column()))
        })?;
        config.validate()?;
        Ok(config)
    }
}

impl Default for Config {
    fn default() -> Self {
        Self {
            hyperparams: HyperSection::default(),
            fit: FitSection::default(),
            lm: BaConfig::default(),
            photo: PhotoConfig::default(),
            selection: SelectionSection::default(),
            depth_scale: 5000.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_temp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn missing_path_yields_defaults() {
        let cfg = Config::load(None).unwrap();
        assert_eq!(cfg, Config::default());
        assert_eq!(cfg.depth_scale, 5000.0);
        assert_eq!(cfg.fit.grid_width, 8);
        cfg.validate().unwrap();
    }

    #[test]
    fn partial_document_overrides_only_named_keys() {
        let f = write_temp(r#"{"hyperparams": {"sigma_n_sq": 0.5, "nu": "1.5"}, "lm": {"max_iters": 7}}"#);
        let cfg = Config::load(Some(f.path())).unwrap();
        assert_eq!(cfg.hyperparams.sigma_n_sq, 0.5);
        assert_eq!(cfg.hyperparams.nu, MaternNu::ThreeHalves);
        assert_eq!(cfg.hyperparams.sigma_f_sq, 1.0);
        assert_eq!(cfg.lm.max_iters, 7);
        assert_eq!(cfg.photo, PhotoConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let f = write_temp(r#"{"hyperparams": {"sigma_noise": 0.5}}"#);
        assert!(matches!(Config::load(Some(f.path())), Err(Error::Config(_))));
        let f = write_temp(r#"{"huperparams": {}}"#);
        assert!(matches!(Config::load(Some(f.path())), Err(Error::Config(_))));
    }

    #[test]
    fn out_of_range_values_are_rejected_at_load() {
        let f = write_temp(r#"{"hyperparams": {"sigma_f_sq": -1.0}}"#);
        assert!(Config::load(Some(f.path())).is_err());
        let f = write_temp(r#"{"fit": {"grid_width": 1}}"#);
        assert!(Config::load(Some(f.path())).is_err());
        let f = write_temp(r#"{"depth_scale": 0.0}"#);
        assert!(Config::load(Some(f.path())).is_err());
        let f = write_temp(r#"{"selection": {"stride": 0}}"#);
        assert!(Config::load(Some(f.path())).is_err());
    }

    #[test]
    fn bad_json_reports_path_and_position() {
        let f = write_temp("{");
        let err = Config::load(Some(f.path())).unwrap_err();
        assert!(err.to_string().contains(":1:"));
    }
}
