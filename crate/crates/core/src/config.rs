//! TOML pipeline configuration. Every section is optional and defaults to
//! the library defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::CameraConfig;
use crate::compound::CompoundConfig;
use crate::icp::IcpConfig;
use crate::sector::SectorConfig;
use crate::sim::{ArtifactSpec, FanSpec, PhantomScene, Primitive, TrajectorySpec, VolumeSpec};
use crate::tsdf::TsdfConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config not found: {0}")]
    NotFound(PathBuf),
    #[error("cannot read config {path}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// `[scene]`: phantom primitives plus the acquisition fan and lattice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub primitives: Vec<Primitive>,
    pub background_mean: f64,
    pub background_std: f64,
    /// Seed for per-frame intensity noise and artifacts.
    pub seed: u64,
    pub fan: FanSpec,
    pub volume: VolumeSpec,
}

impl Default for SceneConfig {
    fn default() -> Self {
        let p = PhantomScene::default();
        Self {
            primitives: p.primitives,
            background_mean: p.background_mean,
            background_std: p.background_std,
            seed: 1,
            fan: FanSpec::default(),
            volume: VolumeSpec::default(),
        }
    }
}

impl SceneConfig {
    pub fn phantom(&self) -> PhantomScene {
        PhantomScene {
            primitives: self.primitives.clone(),
            background_mean: self.background_mean,
            background_std: self.background_std,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub scene: SceneConfig,
    pub trajectory: TrajectorySpec,
    pub artifacts: ArtifactSpec,
    pub sector: SectorConfig,
    pub camera: CameraConfig,
    pub tsdf: TsdfConfig,
    pub icp: IcpConfig,
    pub compound: CompoundConfig,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        if !path.is_file() {
            return Err(ConfigError::NotFound(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        self.scene.phantom().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.scene.volume.geometry().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.artifacts.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.icp.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.trajectory.frames == 0 {
            return bad("trajectory.frames must be positive".into());
        }
        if self.camera.width == 0 || self.camera.height == 0 {
            return bad("camera width and height must be positive".into());
        }
        if let Some(d) = self.camera.distance_mm {
            if !(d > 0.0) {
                return bad(format!("camera.distance_mm must be positive, got {d}"));
            }
        }
        if let Some(a) = self.camera.view_angle_deg {
            if !(a > 0.0 && a < 180.0) {
                return bad(format!("camera.view_angle_deg must lie in (0, 180), got {a}"));
            }
        }
        if self.camera.distance_mm.is_some() != self.camera.view_angle_deg.is_some() {
            return bad("camera.distance_mm and camera.view_angle_deg must be given together".into());
        }
        if self.tsdf.resolution < 2 || !(self.tsdf.truncation_voxels > 0.0) || !(self.tsdf.max_weight > 0.0) {
            return bad("tsdf needs resolution ≥ 2 and positive truncation and max_weight".into());
        }
        if let Some(s) = self.compound.spacing_mm {
            if !(s > 0.0) {
                return bad(format!("compound.spacing_mm must be positive, got {s}"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::TrajectoryPattern;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(PipelineConfig::from_toml("").unwrap(), PipelineConfig::default());
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = PipelineConfig::default();
        assert_eq!(PipelineConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn sections_override_fields() {
        let text = r#"
            [scene]
            seed = 9
            [[scene.primitives]]
            shape = { kind = "ellipsoid", radii = [25.0, 55.0, 40.0] }
            center = [0.0, 95.0, 0.0]
            label = "foreground"
            intensity_mean = 200.0
            [scene.volume]
            dims = [64, 64, 64]
            spacing_mm = [2.5, 2.5, 2.5]
            [trajectory]
            frames = 4
            pattern = "random-walk"
            [artifacts]
            dropout_frames = [2]
            [sector]
            threshold = 3.0
            [camera]
            width = 240
            height = 240
            [tsdf]
            resolution = 128
            [icp]
            distance_gate_mm = 15.0
            [compound]
            spacing_mm = 2.0
        "#;
        let cfg = PipelineConfig::from_toml(text).unwrap();
        assert_eq!(cfg.scene.seed, 9);
        assert_eq!(cfg.scene.primitives.len(), 1);
        assert_eq!(cfg.scene.volume.dims, [64; 3]);
        assert_eq!(cfg.trajectory.frames, 4);
        assert_eq!(cfg.trajectory.pattern, TrajectoryPattern::RandomWalk);
        assert_eq!(cfg.artifacts.dropout_frames, vec![2]);
        assert_eq!(cfg.sector.threshold, 3.0);
        assert_eq!(cfg.camera.width, 240);
        assert_eq!(cfg.tsdf.resolution, 128);
        assert_eq!(cfg.icp.distance_gate_mm, 15.0);
        assert_eq!(cfg.compound.spacing_mm, Some(2.0));
        assert_eq!(cfg.icp.normal_gate_deg, IcpConfig::default().normal_gate_deg);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(matches!(PipelineConfig::from_toml("[tsdf]\nresolutoin = 3"), Err(ConfigError::Parse(_))));
        assert!(matches!(PipelineConfig::from_toml("[icp]\nnormal_gate_deg = -1.0"), Err(ConfigError::Invalid(_))));
        assert!(matches!(PipelineConfig::from_toml("[camera]\ndistance_mm = 20.0"), Err(ConfigError::Invalid(_))));
        assert!(matches!(PipelineConfig::from_toml("[scene]\nprimitives = []"), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn missing_file_reports_not_found() {
        let e = PipelineConfig::load(Path::new("/nonexistent/echofusion.toml")).unwrap_err();
        assert!(e.to_string().starts_with("config not found"), "{e}");
    }
}
