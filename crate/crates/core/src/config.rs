//! Run configuration: TOML file with one section per module; committed
//! defaults reproduce the experiment parameter table.

use crate::dataset::CameraIntrinsics;
use crate::error::{Error, Result};
use crate::frontend::FrontendConfig;
use crate::loop_closure::LoopClosureConfig;
use crate::pose_graph::RobustKernelConfig;
use crate::registration::RegistrationConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Odometry,
    Slam,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "odometry" => Ok(Mode::Odometry),
            "slam" => Ok(Mode::Slam),
            other => Err(Error::Config(format!(
                "unknown mode '{other}' (expected odometry or slam)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub path: PathBuf,
    /// One of fr1, fr2, fr3; overridden by explicit `[intrinsics]`.
    pub intrinsics: String,
    pub association_tolerance: f64,
    pub depth_scale: f64,
    /// Point-selection target per frame.
    pub point_target: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            path: PathBuf::new(),
            intrinsics: "fr1".into(),
            association_tolerance: 0.02,
            depth_scale: 5000.0,
            point_target: 3000,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    /// Pose-graph termination tolerance on the update norm.
    pub term_tolerance: f64,
    pub local_max_iterations: usize,
    pub keyframe_max_iterations: usize,
    pub final_max_iterations: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            term_tolerance: 1e-6,
            local_max_iterations: 50,
            keyframe_max_iterations: 100,
            final_max_iterations: 100,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub mode: Mode,
    pub output: PathBuf,
    pub seed: u64,
    /// Stop after this many frames when set.
    pub max_frames: Option<usize>,
    /// Optional vocabulary file; without one, a vocabulary is trained on the
    /// sequence's early keyframes.
    pub vocabulary: Option<PathBuf>,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            mode: Mode::Slam,
            output: PathBuf::from("out"),
            seed: 0,
            max_frames: None,
            vocabulary: None,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run: RunSection,
    pub dataset: DatasetConfig,
    pub registration: RegistrationConfig,
    pub frontend: FrontendConfig,
    pub loop_closure: LoopClosureConfig,
    pub robust_kernel: RobustKernelConfig,
    pub solver: SolverConfig,
    /// Explicit pinhole intrinsics; takes precedence over the named preset.
    pub intrinsics: Option<CameraIntrinsics>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.registration.validate()?;
        self.loop_closure.validate()?;
        if let Some(intr) = &self.intrinsics {
            intr.validate()?;
        }
        if self.dataset.association_tolerance <= 0.0 {
            return Err(Error::Config("association_tolerance must be positive".into()));
        }
        if self.dataset.depth_scale <= 0.0 {
            return Err(Error::Config("depth_scale must be positive".into()));
        }
        if self.dataset.point_target == 0 {
            return Err(Error::Config("point_target must be positive".into()));
        }
        if self.frontend.t_thres <= 0.0
            || self.frontend.theta_thres_deg <= 0.0
            || !(0.0..=1.0).contains(&self.frontend.gamma_thres)
        {
            return Err(Error::Config("frontend thresholds out of range".into()));
        }
        if self.robust_kernel.delta <= 0.0 {
            return Err(Error::Config("robust kernel delta must be positive".into()));
        }
        if self.solver.term_tolerance <= 0.0 {
            return Err(Error::Config("solver tolerance must be positive".into()));
        }
        Ok(())
    }

    /// Resolved camera intrinsics: explicit section, else named preset.
    pub fn resolve_intrinsics(&self) -> Result<CameraIntrinsics> {
        if let Some(intr) = &self.intrinsics {
            let mut intr = *intr;
            intr.depth_scale = self.dataset.depth_scale;
            return Ok(intr);
        }
        let mut intr = match self.dataset.intrinsics.as_str() {
            "fr1" => CameraIntrinsics::tum_fr1(),
            "fr2" => CameraIntrinsics::tum_fr2(),
            "fr3" => CameraIntrinsics::tum_fr3(),
            other => {
                return Err(Error::Config(format!(
                    "unknown intrinsics preset '{other}' (expected fr1, fr2, fr3)"
                )))
            }
        };
        intr.depth_scale = self.dataset.depth_scale;
        Ok(intr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_reproduce_experiment_parameters() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.registration.sigma, 0.1);
        assert_eq!(cfg.registration.ell_init, 0.1);
        assert_eq!(cfg.registration.sigma_c, 1.0);
        assert_eq!(cfg.registration.ell_c, 0.1);
        assert_eq!(cfg.registration.sparsification_threshold, 8.315e-3);
        assert_eq!(cfg.frontend.t_thres, 0.15);
        assert_eq!(cfg.frontend.theta_thres_deg, 30.0);
        assert_eq!(cfg.frontend.gamma_thres, 0.7);
        assert_eq!(cfg.loop_closure.eta_thres, 0.3);
        assert_eq!(cfg.loop_closure.match_ratio, 0.7);
        assert_eq!(cfg.loop_closure.min_matches, 5);
        assert_eq!(cfg.robust_kernel.delta, 2.0);
        cfg.validate().unwrap();
    }

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig::default();
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back.registration.sigma, cfg.registration.sigma);
        assert_eq!(back.run.mode, cfg.run.mode);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = toml::from_str::<RunConfig>("[registration]\nsigma = 0.1\nbogus = 1\n");
        assert!(err.is_err());
        let err = toml::from_str::<RunConfig>("[nonexistent_section]\nx = 1\n");
        assert!(err.is_err());
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg: RunConfig =
            toml::from_str("[run]\nmode = \"odometry\"\nseed = 7\n[dataset]\npath = \"/data\"\n")
                .unwrap();
        assert_eq!(cfg.run.mode, Mode::Odometry);
        assert_eq!(cfg.run.seed, 7);
        assert_eq!(cfg.registration.ell_init, 0.1);
    }

    #[test]
    fn out_of_range_threshold_fails_validation() {
        let mut cfg = RunConfig::default();
        cfg.frontend.gamma_thres = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.robust_kernel.delta = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn intrinsics_presets_and_override() {
        let mut cfg = RunConfig::default();
        cfg.dataset.intrinsics = "fr3".into();
        assert_eq!(cfg.resolve_intrinsics().unwrap().fx, 535.4);
        cfg.dataset.intrinsics = "kinect2".into();
        assert!(cfg.resolve_intrinsics().is_err());
        cfg.intrinsics = Some(CameraIntrinsics {
            fx: 100.0,
            fy: 100.0,
            cx: 50.0,
            cy: 50.0,
            depth_scale: 5000.0,
            width: 100,
            height: 100,
        });
        assert_eq!(cfg.resolve_intrinsics().unwrap().fx, 100.0);
    }
}
