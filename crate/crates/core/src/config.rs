//! Run configuration: one JSON document covering every command.
//!
//! Every field has a default, unknown keys are rejected, and the resolved
//! document (defaults expanded) is what gets written next to outputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::patch_model::LightVector;
use crate::proposals::{NoiseModel, SolverSettings};
use crate::reconstruct::ReconConfig;
use crate::synth::{RenderSpec, SurfaceSpec};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("invalid config field `{field}`: {message}")]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }
}

/// Light as a raw vector or as elevation/azimuth (degrees) and strength.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LightSpec {
    Vector(VectorLight),
    Angles(AngleLight),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VectorLight {
    pub vector: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AngleLight {
    pub elevation_deg: f64,
    #[serde(default)]
    pub azimuth_deg: f64,
    #[serde(default = "unit")]
    pub strength: f64,
}

fn unit() -> f64 {
    1.0
}

impl Default for LightSpec {
    fn default() -> Self {
        LightSpec::Angles(AngleLight {
            elevation_deg: 60.0,
            azimuth_deg: 0.0,
            strength: 1.0,
        })
    }
}

impl LightSpec {
    pub fn resolve(&self) -> Result<LightVector, ConfigError> {
        let l = match *self {
            LightSpec::Vector(VectorLight { vector: [x, y, z] }) => LightVector::new(x, y, z),
            LightSpec::Angles(a) => LightVector::from_angles(a.elevation_deg, a.azimuth_deg, a.strength),
        };
        l.map_err(|e| ConfigError::new("light", e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    pub surface: u64,
    pub noise: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self { surface: 1, noise: 1 }
    }
}

/// Scene generation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub rows: usize,
    pub cols: usize,
    pub amplitude: Option<f64>,
    pub noise_sigma: f64,
    /// No highlight when absent.
    pub beckmann_roughness: Option<f64>,
    /// Only used together with `beckmann_roughness`.
    pub specular_strength: f64,
    pub saturation_level: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            rows: 128,
            cols: 128,
            amplitude: None,
            noise_sigma: 0.0,
            beckmann_roughness: None,
            specular_strength: 0.5,
            saturation_level: 1.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub image: Option<PathBuf>,
    pub mask: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub estimate: Option<PathBuf>,
    pub proposals: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub light: LightSpec,
    pub noise: NoiseModel,
    /// θ samples per patch (J).
    pub theta_samples: usize,
    pub patch_sizes: Vec<usize>,
    pub solver: SolverSettings,
    pub reconstruction: ReconConfig,
    /// 0: one worker per core.
    pub workers: usize,
    pub seeds: Seeds,
    pub synth: SynthConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            light: LightSpec::default(),
            noise: NoiseModel::default(),
            theta_samples: 21,
            patch_sizes: vec![3, 5, 9, 17],
            solver: SolverSettings::default(),
            reconstruction: ReconConfig::default(),
            workers: 0,
            seeds: Seeds::default(),
            synth: SynthConfig::default(),
            paths: Paths::default(),
        }
    }
}

fn check(ok: bool, field: &str, message: &str) -> Result<(), ConfigError> {
    if ok {
        Ok(())
    } else {
        Err(ConfigError::new(field, message))
    }
}

impl RunConfig {
    pub fn from_json(data: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(data).map_err(|e| ConfigError::new("<document>", e.to_string()))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.light.resolve()?;
        let nm = &self.noise;
        check(nm.sigma_i.is_finite() && nm.sigma_i >= 0.0, "noise.sigma_i", "must be finite and non-negative")?;
        check(
            nm.sigma_n0_sq.is_finite() && nm.sigma_n0_sq >= 0.0,
            "noise.sigma_n0_sq",
            "must be finite and non-negative",
        )?;
        check(self.theta_samples >= 3, "theta_samples", "must be at least 3")?;
        check(!self.patch_sizes.is_empty(), "patch_sizes", "must not be empty")?;
        for &k in &self.patch_sizes {
            check(k >= 3 && k % 2 == 1, "patch_sizes", "sizes must be odd and at least 3")?;
        }
        let s = &self.solver;
        check(s.max_iters > 0, "solver.max_iters", "must be positive")?;
        check(s.damping_init > 0.0 && s.damping_init.is_finite(), "solver.damping_init", "must be positive")?;
        check(s.damping_up > 1.0, "solver.damping_up", "must exceed 1")?;
        check(s.damping_down > 0.0 && s.damping_down < 1.0, "solver.damping_down", "must lie in (0, 1)")?;
        check(s.r_min > 0.0, "solver.r_min", "must be positive")?;
        self.reconstruction
            .validate()
            .map_err(|e| ConfigError::new("reconstruction", e.to_string()))?;
        if let Some(sizes) = &self.reconstruction.patch_sizes {
            check(!sizes.is_empty(), "reconstruction.patch_sizes", "must not be empty")?;
        }
        let sy = &self.synth;
        check(sy.rows >= 16 && sy.cols >= 16, "synth.rows", "scenes must be at least 16x16")?;
        check(
            sy.amplitude.is_none_or(|a| a >= 0.0 && a.is_finite()),
            "synth.amplitude",
            "must be finite and non-negative",
        )?;
        check(
            sy.noise_sigma.is_finite() && sy.noise_sigma >= 0.0,
            "synth.noise_sigma",
            "must be finite and non-negative",
        )?;
        check(
            sy.beckmann_roughness.is_none_or(|m| m > 0.0 && m.is_finite()),
            "synth.beckmann_roughness",
            "must be positive",
        )?;
        check(
            sy.specular_strength.is_finite() && sy.specular_strength >= 0.0,
            "synth.specular_strength",
            "must be finite and non-negative",
        )?;
        check(!sy.saturation_level.is_nan(), "synth.saturation_level", "must be a number")?;
        Ok(())
    }

    pub fn light_vector(&self) -> Result<LightVector, ConfigError> {
        self.light.resolve()
    }

    pub fn surface_spec(&self) -> SurfaceSpec {
        SurfaceSpec {
            seed: self.seeds.surface,
            control_grid: None,
            rows: self.synth.rows,
            cols: self.synth.cols,
            amplitude: self.synth.amplitude,
        }
    }

    pub fn render_spec(&self) -> Result<RenderSpec, ConfigError> {
        Ok(RenderSpec {
            light: self.light_vector()?,
            noise_sigma: self.synth.noise_sigma,
            beckmann_roughness: self.synth.beckmann_roughness,
            specular_strength: self.synth.specular_strength,
            saturation_level: self.synth.saturation_level,
        })
    }

    /// Full document with every default written out.
    pub fn resolved_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// The part of the config that can change results: everything except
    /// the worker count and file paths.
    pub fn result_affecting_json(&self) -> serde_json::Value {
        let mut v = self.resolved_json();
        if let Some(obj) = v.as_object_mut() {
            obj.remove("workers");
            obj.remove("paths");
        }
        v
    }

    /// Hex SHA-256 of the compact result-affecting JSON.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(&self.result_affecting_json()).expect("config serializes");
        sha256_hex(&bytes)
    }

    pub fn write_resolved(&self, path: &Path) -> std::io::Result<()> {
        let mut s = serde_json::to_string_pretty(&self.resolved_json()).expect("config serializes");
        s.push('\n');
        std::fs::write(path, s)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let c = RunConfig::from_json("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.noise.sigma_i, 0.01);
        let v = c.resolved_json();
        assert_eq!(v["noise"]["sigma_i"], 0.01);
        assert_eq!(v["solver"]["max_iters"], 200);
        assert_eq!(v["reconstruction"]["sigma0"], 8.0);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_json(r#"{"thetas": 3}"#).is_err());
        assert!(RunConfig::from_json(r#"{"solver": {"iters": 3}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"light": {"elevation_deg": 40, "tilt": 1}}"#).is_err());
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let c = RunConfig::from_json(r#"{"solver": {"max_iters": 50}, "noise": {"sigma_i": 0.02}}"#).unwrap();
        assert_eq!(c.solver.max_iters, 50);
        assert_eq!(c.solver.step_tol, 1e-10);
        assert_eq!(c.noise.sigma_n0_sq, NoiseModel::default().sigma_n0_sq);
    }

    #[test]
    fn light_forms() {
        let c = RunConfig::from_json(r#"{"light": {"elevation_deg": 60}}"#).unwrap();
        let l = c.light_vector().unwrap();
        assert!((l.z() - 0.75f64.sqrt()).abs() < 1e-12);
        assert!((l.x() - 0.5).abs() < 1e-12);
        let c = RunConfig::from_json(r#"{"light": {"vector": [0.1, 0.2, 0.9]}}"#).unwrap();
        assert_eq!(c.light_vector().unwrap().to_array(), [0.1, 0.2, 0.9]);
        let c = RunConfig::from_json(r#"{"light": {"vector": [0.1, 0.2, -0.9]}}"#).unwrap();
        assert_eq!(c.validate().unwrap_err().field, "light");
    }

    #[test]
    fn validation_names_the_field() {
        let mut c = RunConfig::default();
        c.synth.noise_sigma = -0.1;
        assert_eq!(c.validate().unwrap_err().field, "synth.noise_sigma");
        let mut c = RunConfig::default();
        c.patch_sizes = vec![5, 4];
        assert_eq!(c.validate().unwrap_err().field, "patch_sizes");
        let mut c = RunConfig::default();
        c.reconstruction.sigma_factor = 1.5;
        assert_eq!(c.validate().unwrap_err().field, "reconstruction");
        assert!(RunConfig::default().validate().is_ok());
    }

    #[test]
    fn hash_ignores_workers_and_paths() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.workers = 8;
        b.paths.out = Some("elsewhere".into());
        assert_eq!(a.hash(), b.hash());
        b.theta_samples = 22;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn sha256_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn resolved_document_reloads_identically() {
        let mut c = RunConfig::default();
        c.reconstruction.lambda = Some(0.3);
        c.synth.beckmann_roughness = Some(0.3);
        let text = serde_json::to_string(&c.resolved_json()).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), c);
    }
}
