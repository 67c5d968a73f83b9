//! Run configuration for the `refine` pipeline, stored as TOML.

use crate::energy::Regularizer;
use crate::geometry::CameraIntrinsics;
use crate::graph::GraphParams;
use crate::solver::{AdamConfig, Preset, PyramidConfig, RefineConfig};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("cannot serialize config: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("give either a preset or explicit lambda/alpha lists, not both")]
    ConflictingSchedule,
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("missing required field `{0}`")]
    Missing(&'static str),
    #[error("invalid intrinsics: {0}")]
    Intrinsics(String),
}

fn default_eps() -> f64 {
    1e-6
}

/// Everything a `refine` run needs. Unset optional fields fall back to the
/// defaults described on each field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Inverse depth (or disparity with `disparity = true`) as PFM.
    pub input: Option<PathBuf>,
    pub guide: Option<PathBuf>,
    /// PFM or PGM in `[0, 1]`; every valid input pixel gets confidence 1 when unset.
    pub confidence: Option<PathBuf>,
    /// Binarize confidence at this level when set.
    pub confidence_threshold: Option<f64>,
    pub disparity: bool,
    /// Required with `disparity` to convert to metric inverse depth.
    pub baseline: Option<f64>,
    /// Intrinsics default to `f = width` and a centered principal point.
    pub fx: Option<f64>,
    pub fy: Option<f64>,
    pub cx: Option<f64>,
    pub cy: Option<f64>,
    pub graph: GraphParams,
    /// Schedule source; `eth3d` when neither a preset nor lists are given.
    pub preset: Option<Preset>,
    /// Per-scale weights, coarsest first. A single value applies to every scale.
    pub lambda: Option<Vec<f64>>,
    pub alpha: Option<Vec<f64>>,
    /// Only used with explicit lists (default 4).
    pub scales: Option<usize>,
    /// Only used with explicit lists (default 2).
    pub factor: Option<usize>,
    pub adam: AdamConfig,
    #[serde(default = "default_eps")]
    pub eps: f64,
    pub regularizer: Regularizer,
    pub out: Option<PathBuf>,
    pub u_out: Option<PathBuf>,
    pub normals_out: Option<PathBuf>,
    pub normals_png: Option<PathBuf>,
    pub trace: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            input: None,
            guide: None,
            confidence: None,
            confidence_threshold: None,
            disparity: false,
            baseline: None,
            fx: None,
            fy: None,
            cx: None,
            cy: None,
            graph: GraphParams::default(),
            preset: None,
            lambda: None,
            alpha: None,
            scales: None,
            factor: None,
            adam: AdamConfig::default(),
            eps: default_eps(),
            regularizer: Regularizer::default(),
            out: None,
            u_out: None,
            normals_out: None,
            normals_png: None,
            trace: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String, ConfigError> {
        Ok(toml::to_string(self)?)
    }

    fn explicit_schedule(&self) -> bool {
        self.lambda.is_some()
            || self.alpha.is_some()
            || self.scales.is_some()
            || self.factor.is_some()
    }

    /// The scale schedule, from the preset or from the explicit lists.
    pub fn schedule(&self) -> Result<PyramidConfig, ConfigError> {
        if self.preset.is_some() && self.explicit_schedule() {
            return Err(ConfigError::ConflictingSchedule);
        }
        if !self.explicit_schedule() {
            return Ok(self.preset.unwrap_or_default().pyramid(self.regularizer));
        }
        let (Some(lambda), Some(alpha)) = (&self.lambda, &self.alpha) else {
            return Err(ConfigError::InvalidSchedule(
                "lambda and alpha must both be given".into(),
            ));
        };
        let listed = lambda.len().max(alpha.len());
        let scales = self.scales.unwrap_or(if listed > 1 { listed } else { 4 });
        let expand = |name: &str, v: &[f64]| -> Result<Vec<f64>, ConfigError> {
            match v.len() {
                1 => Ok(vec![v[0]; scales]),
                n if n == scales => Ok(v.to_vec()),
                n => Err(ConfigError::InvalidSchedule(format!(
                    "{name} has {n} values for {scales} scales"
                ))),
            }
        };
        let pyramid = PyramidConfig {
            scales,
            factor: self.factor.unwrap_or(2),
            lambda: expand("lambda", lambda)?,
            alpha: expand("alpha", alpha)?,
        };
        if pyramid
            .lambda
            .iter()
            .chain(&pyramid.alpha)
            .any(|&v| !(v >= 0.0 && v.is_finite()))
        {
            return Err(ConfigError::InvalidSchedule(
                "weights must be finite and non-negative".into(),
            ));
        }
        pyramid
            .validate()
            .map_err(|e| ConfigError::InvalidSchedule(e.to_string()))?;
        Ok(pyramid)
    }

    pub fn refine_config(&self) -> Result<RefineConfig, ConfigError> {
        Ok(RefineConfig {
            graph: self.graph,
            pyramid: self.schedule()?,
            adam: self.adam,
            eps: self.eps,
            regularizer: self.regularizer,
        })
    }

    /// Intrinsics from the explicit fields, filling unset ones from the
    /// image-size default. The flag reports whether any default was used.
    pub fn intrinsics(
        &self,
        width: usize,
        height: usize,
    ) -> Result<(CameraIntrinsics, bool), ConfigError> {
        let fallback = CameraIntrinsics::default_for(width, height);
        let defaulted =
            self.fx.is_none() || self.fy.is_none() || self.cx.is_none() || self.cy.is_none();
        let cam = CameraIntrinsics::new(
            self.fx.unwrap_or(fallback.fx()),
            self.fy.or(self.fx).unwrap_or(fallback.fy()),
            self.cx.unwrap_or(fallback.cx()),
            self.cy.unwrap_or(fallback.cy()),
        )
        .map_err(|e| ConfigError::Intrinsics(e.to_string()))?;
        Ok((cam, defaulted))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_uses_default_preset() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(
            cfg.schedule().unwrap(),
            Preset::Eth3d.pyramid(Regularizer::MixedL12)
        );
    }

    #[test]
    fn preset_and_lists_conflict() {
        let cfg =
            RunConfig::from_toml("preset = \"kitti\"\nlambda = [1.0]\nalpha = [2.0]\n").unwrap();
        assert!(matches!(
            cfg.schedule(),
            Err(ConfigError::ConflictingSchedule)
        ));
        let cfg = RunConfig::from_toml("preset = \"kitti\"\nscales = 3\n").unwrap();
        assert!(matches!(
            cfg.schedule(),
            Err(ConfigError::ConflictingSchedule)
        ));
    }

    #[test]
    fn explicit_lists() {
        let cfg = RunConfig::from_toml("lambda = [1.0, 2.0]\nalpha = [3.0]\nfactor = 3\n").unwrap();
        let p = cfg.schedule().unwrap();
        assert_eq!((p.scales, p.factor), (2, 3));
        assert_eq!(p.alpha, vec![3.0, 3.0]);
        let single = RunConfig::from_toml("lambda = [1.0]\nalpha = [3.0]\n").unwrap();
        assert_eq!(single.schedule().unwrap().scales, 4);
        let bad = RunConfig::from_toml("lambda = [1.0, 2.0, 3.0]\nalpha = [3.0, 1.0]\n").unwrap();
        assert!(bad.schedule().is_err());
        let half = RunConfig::from_toml("lambda = [1.0]\n").unwrap();
        assert!(half.schedule().is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("lamda = [1.0]").is_err());
        assert!(RunConfig::from_toml("[graph]\nkk = 3").is_err());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig {
            input: Some("d.pfm".into()),
            preset: Some(Preset::MiddleburySgm),
            regularizer: Regularizer::Nltgv,
            fx: Some(500.0),
            ..RunConfig::default()
        };
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        assert!(text.contains("preset = \"middlebury-sgm\""));
    }

    #[test]
    fn intrinsics_fallback() {
        let (cam, defaulted) = RunConfig::default().intrinsics(40, 30).unwrap();
        assert!(defaulted);
        assert_eq!((cam.fx(), cam.cx(), cam.cy()), (40.0, 19.5, 14.5));
        let cfg = RunConfig {
            fx: Some(100.0),
            ..RunConfig::default()
        };
        let (cam, _) = cfg.intrinsics(40, 30).unwrap();
        assert_eq!(cam.fy(), 100.0);
    }
}
