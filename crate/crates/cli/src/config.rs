//! Run configuration: JSON schema with explicit defaults, flag overrides and
//! the content hash that names the run directory.

use std::path::{Path, PathBuf};

use layer_handle::mesh::MeshParams;
use layer_handle::solver::SolverOptions;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Layer,
    Handle,
    JoinPath,
    Verify,
    Sweep,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Layer => "layer",
            Mode::Handle => "handle",
            Mode::JoinPath => "join-path",
            Mode::Verify => "verify",
            Mode::Sweep => "sweep",
        }
    }
}

/// `(x0, y0)`; the join target `(x, y)` in join-path mode.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Params {
    pub x0: f64,
    pub y0: f64,
}

impl Default for Params {
    fn default() -> Self {
        Self { x0: 1.0, y0: 2.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeshConfig {
    pub h: f64,
    pub epsilon: f64,
    pub grading: f64,
    pub half_width: u32,
}

impl Default for MeshConfig {
    fn default() -> Self {
        let mp = MeshParams::default();
        Self { h: mp.h, epsilon: mp.epsilon, grading: mp.grading, half_width: mp.half_width }
    }
}

impl From<MeshConfig> for MeshParams {
    fn from(m: MeshConfig) -> Self {
        MeshParams { h: m.h, grading: m.grading, epsilon: m.epsilon, half_width: m.half_width }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub delta: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
    pub backtrack: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let o = SolverOptions::default();
        Self { delta: o.delta, tolerance: o.tolerance, max_iterations: o.max_iterations, backtrack: o.backtrack }
    }
}

impl From<SolverConfig> for SolverOptions {
    fn from(s: SolverConfig) -> Self {
        SolverOptions { delta: s.delta, tolerance: s.tolerance, max_iterations: s.max_iterations, backtrack: s.backtrack }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Parent of the per-run directories.
    pub dir: PathBuf,
    pub obj: bool,
    pub ply: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("runs"), obj: true, ply: true }
    }
}

/// Pipeline run at every grid point of a sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepMode {
    Layer,
    Handle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub x0: Vec<f64>,
    pub y0: Vec<f64>,
    #[serde(default = "default_sweep_mode")]
    pub mode: SweepMode,
}

fn default_sweep_mode() -> SweepMode {
    SweepMode::Layer
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    /// Directory of a previous layer, handle or join-path run.
    pub run: PathBuf,
}

/// Fully resolved run configuration; every default is written out in reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    #[serde(default)]
    pub params: Params,
    #[serde(default)]
    pub mesh: MeshConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    /// Uniform refinements applied to every generated mesh.
    #[serde(default)]
    pub refine: u32,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Sample count of the randomized checks.
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
    #[serde(default)]
    pub verify: Option<VerifyConfig>,
}

fn default_seed() -> u64 {
    20_240_601
}

fn default_samples() -> usize {
    100
}

/// Largest accepted refinement count; each level quadruples the mesh.
pub const MAX_REFINE: u32 = 4;

impl RunConfig {
    pub fn with_mode(mode: Mode) -> Self {
        serde_json::from_value(serde_json::json!({ "mode": mode })).expect("defaults form a valid config")
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Schema checks the type system does not express.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Config(msg));
        if !self.params.x0.is_finite() || !self.params.y0.is_finite() {
            return bad("params must be finite".into());
        }
        if !(self.mesh.h > 0.0) {
            return bad(format!("mesh.h = {} must be positive", self.mesh.h));
        }
        if self.refine > MAX_REFINE {
            return bad(format!("refine = {} exceeds {MAX_REFINE}", self.refine));
        }
        if self.samples == 0 {
            return bad("samples must be positive".into());
        }
        match self.mode {
            Mode::Sweep => match &self.sweep {
                Some(s) if !s.x0.is_empty() && !s.y0.is_empty() => {}
                _ => return bad("sweep mode needs a sweep section with nonempty x0 and y0 lists".into()),
            },
            Mode::Verify if self.verify.is_none() => return bad("verify mode needs a verify section naming a run".into()),
            _ => {}
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON without the output section.
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = value.as_object_mut() {
            map.remove("output");
        }
        hex::encode(Sha256::digest(value.to_string().as_bytes()))
    }

    /// `<output.dir>/<mode>-<first 16 hex digits of the hash>`.
    pub fn run_dir(&self) -> PathBuf {
        self.output.dir.join(format!("{}-{}", self.mode.name(), &self.hash()[..16]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_explicit_after_a_round_trip() {
        let cfg = RunConfig::with_mode(Mode::Layer);
        let text = serde_json::to_string(&cfg).unwrap();
        for key in ["\"h\"", "\"epsilon\"", "\"tolerance\"", "\"seed\"", "\"refine\"", "\"samples\""] {
            assert!(text.contains(key), "{key} missing from {text}");
        }
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let err = serde_json::from_str::<RunConfig>(r#"{"mode": "layer", "mesh": {"hh": 0.1}}"#);
        assert!(err.is_err());
    }

    #[test]
    fn hash_ignores_the_output_directory() {
        let a = RunConfig::with_mode(Mode::Handle);
        let mut b = a.clone();
        b.output.dir = PathBuf::from("elsewhere");
        assert_eq!(a.hash(), b.hash());
        b.seed += 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn sweep_without_grid_is_invalid() {
        assert!(RunConfig::with_mode(Mode::Sweep).validate().is_err());
        assert!(RunConfig::with_mode(Mode::Verify).validate().is_err());
        assert!(RunConfig::with_mode(Mode::Layer).validate().is_ok());
    }
}
