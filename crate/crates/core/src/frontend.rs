//! Keyframe-based tracking: consecutive and keyframe-to-frame registration,
//! inner-product-ratio keyframe selection, and local pose-graph assembly.

use crate::bow::BowVector;
use crate::error::{Error, Result};
use crate::features::FeatureSet;
use crate::pose_graph::{EdgeKind, PoseGraphEdge};
use crate::registration::{register, ColoredPointCloud, RegistrationConfig};
use crate::se3::Pose;
use std::sync::Arc;

/// Keyframe selection thresholds.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrontendConfig {
    /// Translation norm threshold, meters.
    pub t_thres: f64,
    /// Misalignment angle threshold, degrees (Table-style config unit).
    pub theta_thres_deg: f64,
    /// Inner-product ratio threshold.
    pub gamma_thres: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig {
            t_thres: 0.15,
            theta_thres_deg: 30.0,
            gamma_thres: 0.7,
        }
    }
}

impl FrontendConfig {
    pub fn theta_thres(&self) -> f64 {
        self.theta_thres_deg.to_radians()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_thres > 0.0 && self.theta_thres_deg > 0.0 && self.gamma_thres > 0.0) {
            return Err(Error::Config("frontend thresholds must be positive".into()));
        }
        Ok(())
    }
}

/// A keyframe: its cloud, global pose, frozen reference inner product, and
/// (once computed by the loop-closure stage) features and bag-of-words vector.
#[derive(Debug, Clone)]
pub struct KeyframeRecord {
    pub cloud: Arc<ColoredPointCloud>,
    pub global_pose: Pose,
    pub reference_inner_product: Option<f64>,
    pub features: Option<FeatureSet>,
    pub bow: Option<BowVector>,
    pub frame_index: usize,
}

/// Outcome of the keyframe decision predicate for one frame.
#[derive(Debug, Clone, Copy)]
pub struct KeyframeDecision {
    pub gamma: f64,
    pub translation_norm: f64,
    pub angle: f64,
    pub new_keyframe: bool,
}

/// The decision disjunction: gamma below threshold, or pose difference beyond
/// either threshold.
pub fn keyframe_decision(
    gamma: f64,
    translation_norm: f64,
    angle: f64,
    cfg: &FrontendConfig,
) -> KeyframeDecision {
    KeyframeDecision {
        gamma,
        translation_norm,
        angle,
        new_keyframe: gamma < cfg.gamma_thres
            || translation_norm > cfg.t_thres
            || angle > cfg.theta_thres(),
    }
}

/// Ratio of the current keyframe-to-frame inner product to the keyframe's
/// frozen reference value.
pub fn compute_gamma(keyframe: &KeyframeRecord, current_ip: f64) -> Result<f64> {
    match keyframe.reference_inner_product {
        Some(reference) if reference > 0.0 => Ok(current_ip / reference),
        _ => Err(Error::State(
            "keyframe reference inner product unset; track frame m+1 first".into(),
        )),
    }
}

#[derive(Debug, Clone)]
pub struct LocalFrameNode {
    pub id: usize,
    /// Global pose estimate at tracking time.
    pub pose: Pose,
}

/// Per-keyframe subgraph: one keyframe node, its ordinary frames, and the
/// keyframe/consecutive odometry edges.
#[derive(Debug, Clone)]
pub struct LocalPoseGraph {
    pub keyframe_id: usize,
    pub keyframe_pose: Pose,
    pub frames: Vec<LocalFrameNode>,
    pub edges: Vec<PoseGraphEdge>,
}

impl LocalPoseGraph {
    fn new(keyframe_id: usize, keyframe_pose: Pose) -> Self {
        LocalPoseGraph {
            keyframe_id,
            keyframe_pose,
            frames: Vec::new(),
            edges: Vec::new(),
        }
    }
}

/// Per-frame tracking log line payload.
#[derive(Debug, Clone, Copy)]
pub struct FrameLog {
    pub frame_index: usize,
    pub gamma: f64,
    pub translation_norm: f64,
    pub angle: f64,
    pub new_keyframe: bool,
    pub consecutive_iterations: usize,
    pub keyframe_iterations: usize,
    pub converged: bool,
}

impl FrameLog {
    /// Tab-separated run-log line.
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{}\t{}\t{}",
            self.frame_index,
            self.gamma,
            self.translation_norm,
            self.angle,
            if self.new_keyframe { 1 } else { 0 },
            self.consecutive_iterations,
            self.keyframe_iterations
        )
    }
}

/// Result of tracking one frame.
#[derive(Debug)]
pub struct TrackOutcome {
    pub global_pose: Pose,
    pub decision: KeyframeDecision,
    /// Completed local graph, present when a new keyframe was created.
    pub emitted: Option<LocalPoseGraph>,
    /// Index of the newly created keyframe, when one was created.
    pub new_keyframe_index: Option<usize>,
    pub log: FrameLog,
}

struct LastFrame {
    cloud: Arc<ColoredPointCloud>,
    frame_index: usize,
    /// Pose of this frame in the current keyframe's frame.
    pose_in_keyframe: Pose,
}

/// Keyframe-based tracker. Owns the keyframe list and the in-progress local
/// pose graph; completed local graphs are handed out by `track_frame`.
pub struct Tracker {
    reg_cfg: RegistrationConfig,
    fe_cfg: FrontendConfig,
    keyframes: Vec<KeyframeRecord>,
    current_keyframe: usize,
    last: LastFrame,
    /// Constant-velocity warm start for consecutive registration.
    velocity_prior: Pose,
    local: LocalPoseGraph,
}

impl Tracker {
    /// The first frame becomes keyframe 0 at the world origin.
    pub fn new(
        first_cloud: ColoredPointCloud,
        frame_index: usize,
        reg_cfg: RegistrationConfig,
        fe_cfg: FrontendConfig,
    ) -> Result<Self> {
        reg_cfg.validate()?;
        fe_cfg.validate()?;
        let cloud = Arc::new(first_cloud);
        let keyframe = KeyframeRecord {
            cloud: cloud.clone(),
            global_pose: Pose::identity(),
            reference_inner_product: None,
            features: None,
            bow: None,
            frame_index,
        };
        Ok(Tracker {
            reg_cfg,
            fe_cfg,
            keyframes: vec![keyframe],
            current_keyframe: 0,
            last: LastFrame {
                cloud,
                frame_index,
                pose_in_keyframe: Pose::identity(),
            },
            velocity_prior: Pose::identity(),
            local: LocalPoseGraph::new(frame_index, Pose::identity()),
        })
    }

    pub fn keyframes(&self) -> &[KeyframeRecord] {
        &self.keyframes
    }

    pub fn keyframes_mut(&mut self) -> &mut [KeyframeRecord] {
        &mut self.keyframes
    }

    pub fn current_keyframe_index(&self) -> usize {
        self.current_keyframe
    }

    pub fn track_frame(
        &mut self,
        cloud: ColoredPointCloud,
        frame_index: usize,
    ) -> Result<TrackOutcome> {
        let cloud = Arc::new(cloud);

        // Consecutive registration with constant-velocity warm start.
        let cons = register(&self.last.cloud, &cloud, &self.velocity_prior, &self.reg_cfg)?;
        let rel_consecutive = cons.pose;

        // Keyframe-to-frame registration warm-started from the composed prior.
        let kf = &self.keyframes[self.current_keyframe];
        let h0 = self.last.pose_in_keyframe.compose(&rel_consecutive);
        let kf_res = register(&kf.cloud, &cloud, &h0, &self.reg_cfg)?;
        let pose_in_keyframe = kf_res.pose;

        let first_after_keyframe = self.local.frames.is_empty();
        let gamma = if first_after_keyframe {
            1.0
        } else {
            compute_gamma(&self.keyframes[self.current_keyframe], kf_res.final_inner_product)?
        };

        let translation_norm = pose_in_keyframe.translation().norm();
        let angle = pose_in_keyframe.rotation_angle();
        let mut decision = keyframe_decision(gamma, translation_norm, angle, &self.fe_cfg);
        // Promotion needs a previous ordinary frame; the frame right after a
        // keyframe has none.
        if first_after_keyframe {
            decision.new_keyframe = false;
        }

        let converged = cons.converged && kf_res.converged;
        if !converged {
            log::warn!(
                "frame {frame_index}: registration did not converge \
                 (consecutive {}, keyframe {})",
                cons.converged,
                kf_res.converged
            );
        }

        let mut emitted = None;
        let mut new_keyframe_index = None;
        let global_pose;

        if decision.new_keyframe {
            // Promote the previous frame to a keyframe, emit the completed
            // local graph, and retrack the current frame against it.
            let promoted_pose = self.keyframes[self.current_keyframe]
                .global_pose
                .compose(&self.last.pose_in_keyframe);
            emitted = Some(std::mem::replace(
                &mut self.local,
                LocalPoseGraph::new(self.last.frame_index, promoted_pose),
            ));
            self.keyframes.push(KeyframeRecord {
                cloud: self.last.cloud.clone(),
                global_pose: promoted_pose,
                reference_inner_product: None,
                features: None,
                bow: None,
                frame_index: self.last.frame_index,
            });
            self.current_keyframe = self.keyframes.len() - 1;
            new_keyframe_index = Some(self.current_keyframe);

            let h0 = self.last.pose_in_keyframe.inverse().compose(&pose_in_keyframe);
            let kf2 = register(
                &self.keyframes[self.current_keyframe].cloud,
                &cloud,
                &h0,
                &self.reg_cfg,
            )?;
            let pose_in_new = kf2.pose;
            // Frozen reference for the new keyframe, from its first successor.
            self.keyframes[self.current_keyframe].reference_inner_product =
                Some(kf2.final_inner_product);
            global_pose = promoted_pose.compose(&pose_in_new);
            // First frame after a keyframe: consecutive and keyframe edges
            // coincide; stored once as the keyframe edge.
            self.local.frames.push(LocalFrameNode {
                id: frame_index,
                pose: global_pose,
            });
            self.local.edges.push(PoseGraphEdge::new(
                self.local.keyframe_id,
                frame_index,
                pose_in_new,
                EdgeKind::OdometryKeyframe,
            ));
            self.last = LastFrame {
                cloud,
                frame_index,
                pose_in_keyframe: pose_in_new,
            };
        } else {
            if first_after_keyframe {
                self.keyframes[self.current_keyframe].reference_inner_product =
                    Some(kf_res.final_inner_product);
            }
            global_pose = self.keyframes[self.current_keyframe]
                .global_pose
                .compose(&pose_in_keyframe);
            self.local.frames.push(LocalFrameNode {
                id: frame_index,
                pose: global_pose,
            });
            self.local.edges.push(PoseGraphEdge::new(
                self.local.keyframe_id,
                frame_index,
                pose_in_keyframe,
                EdgeKind::OdometryKeyframe,
            ));
            if !first_after_keyframe {
                self.local.edges.push(PoseGraphEdge::new(
                    self.last.frame_index,
                    frame_index,
                    rel_consecutive,
                    EdgeKind::OdometryConsecutive,
                ));
            }
            self.last = LastFrame {
                cloud,
                frame_index,
                pose_in_keyframe,
            };
        }

        if converged {
            self.velocity_prior = rel_consecutive;
        }

        let log = FrameLog {
            frame_index,
            gamma,
            translation_norm,
            angle,
            new_keyframe: decision.new_keyframe,
            consecutive_iterations: cons.iterations,
            keyframe_iterations: kf_res.iterations,
            converged,
        };
        Ok(TrackOutcome {
            global_pose,
            decision,
            emitted,
            new_keyframe_index,
            log,
        })
    }

    /// Applies backend-corrected global poses: keyframe records, the
    /// in-progress local graph's base pose, and any already-tracked frames of
    /// that graph known to the lookup.
    pub fn update_global_poses(&mut self, lookup: impl Fn(usize) -> Option<Pose>) {
        for kf in &mut self.keyframes {
            if let Some(p) = lookup(kf.frame_index) {
                kf.global_pose = p;
            }
        }
        if let Some(p) = lookup(self.local.keyframe_id) {
            self.local.keyframe_pose = p;
        }
        for f in &mut self.local.frames {
            if let Some(p) = lookup(f.id) {
                f.pose = p;
            }
        }
    }

    /// Emits the in-progress local graph at sequence end.
    pub fn finish(&mut self) -> LocalPoseGraph {
        let kf_id = self.local.keyframe_id;
        let kf_pose = self.local.keyframe_pose;
        std::mem::replace(&mut self.local, LocalPoseGraph::new(kf_id, kf_pose))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registration::LABEL_DIM;
    use crate::se3::{self, Twist};
    use nalgebra::Vector3;
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn world_cloud(n: usize, seed: u64) -> (Vec<Vector3<f64>>, Vec<[f64; LABEL_DIM]>) {
        let mut rng = StdRng::seed_from_u64(seed);
        let points = (0..n)
            .map(|_| {
                Vector3::new(
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(0.8..1.8),
                )
            })
            .collect();
        let labels = (0..n)
            .map(|_| {
                let mut l = [0.0; LABEL_DIM];
                for c in l.iter_mut() {
                    *c = rng.gen_range(0.0..1.0);
                }
                l
            })
            .collect();
        (points, labels)
    }

    fn view(points: &[Vector3<f64>], labels: &[[f64; LABEL_DIM]], cam: &Pose, t: f64) -> ColoredPointCloud {
        let inv = cam.inverse();
        ColoredPointCloud::new(
            points.iter().map(|p| inv.transform(p)).collect(),
            labels.to_vec(),
            t,
        )
        .unwrap()
    }

    fn test_cfgs() -> (RegistrationConfig, FrontendConfig) {
        (RegistrationConfig::default(), FrontendConfig::default())
    }

    #[test]
    fn first_successor_has_gamma_one_and_static_frames_keep_keyframe() {
        let (points, labels) = world_cloud(150, 1);
        let (reg, fe) = test_cfgs();
        let id = Pose::identity();
        let mut tracker =
            Tracker::new(view(&points, &labels, &id, 0.0), 0, reg, fe).unwrap();
        for k in 1..4 {
            let out = tracker
                .track_frame(view(&points, &labels, &id, k as f64 * 0.03), k)
                .unwrap();
            if k == 1 {
                assert!((out.decision.gamma - 1.0).abs() < 1e-12);
            }
            assert!(out.decision.gamma > 0.9);
            assert!(out.decision.translation_norm < 0.01);
            assert!(out.decision.angle < 0.01);
            assert!(!out.decision.new_keyframe);
        }
        assert_eq!(tracker.keyframes().len(), 1);
    }

    #[test]
    fn translating_sequence_triggers_keyframe_at_threshold() {
        let (points, labels) = world_cloud(200, 2);
        let (reg, fe) = test_cfgs();
        let mut tracker = Tracker::new(
            view(&points, &labels, &Pose::identity(), 0.0),
            0,
            reg,
            fe,
        )
        .unwrap();
        let mut fired_at = None;
        for k in 1..=6 {
            let cam = Pose::new(
                crate::se3::Rotation::identity(),
                Vector3::new(0.04 * k as f64, 0.0, 0.0),
            );
            let out = tracker
                .track_frame(view(&points, &labels, &cam, k as f64 * 0.03), k)
                .unwrap();
            if out.decision.new_keyframe {
                fired_at = Some((k, out));
                break;
            }
        }
        // ||t|| exceeds 0.15 m first at frame 4 (0.16 m).
        let (k, out) = fired_at.expect("keyframe decision should fire");
        assert_eq!(k, 4);
        assert!(out.decision.translation_norm > 0.15);
        let emitted = out.emitted.unwrap();
        // Emitted graph holds frames 1..3; frame 3 was promoted.
        assert_eq!(emitted.keyframe_id, 0);
        assert_eq!(emitted.frames.len(), 3);
        assert_eq!(tracker.keyframes()[1].frame_index, 3);
        // Frame 4 starts the new local graph.
        assert_eq!(tracker.local.keyframe_id, 3);
        assert_eq!(tracker.local.frames.len(), 1);
        assert_eq!(tracker.local.frames[0].id, 4);
        // Global pose consistency: promoted keyframe near x = 0.12.
        let kf_pose = tracker.keyframes()[1].global_pose;
        assert!((kf_pose.translation()[0] - 0.12).abs() < 0.01);
        assert!((out.global_pose.translation()[0] - 0.16).abs() < 0.01);
    }

    #[test]
    fn emitted_graph_edge_counts() {
        let (points, labels) = world_cloud(150, 3);
        let (reg, fe) = test_cfgs();
        let id = Pose::identity();
        let mut tracker =
            Tracker::new(view(&points, &labels, &id, 0.0), 0, reg, fe).unwrap();
        for k in 1..=5 {
            let out = tracker
                .track_frame(view(&points, &labels, &id, k as f64 * 0.03), k)
                .unwrap();
            assert!(out.emitted.is_none());
        }
        let graph = tracker.finish();
        assert_eq!(graph.frames.len(), 5);
        // 5 keyframe edges + 4 consecutive (frame 1's consecutive edge is
        // stored once, as its keyframe edge).
        let kf_edges = graph
            .edges
            .iter()
            .filter(|e| e.kind == EdgeKind::OdometryKeyframe)
            .count();
        let cons_edges = graph
            .edges
            .iter()
            .filter(|e| e.kind == EdgeKind::OdometryConsecutive)
            .count();
        assert_eq!(kf_edges, 5);
        assert_eq!(cons_edges, 4);
    }

    #[test]
    fn single_frame_sequence_emits_bare_keyframe_graph() {
        let (points, labels) = world_cloud(50, 4);
        let (reg, fe) = test_cfgs();
        let mut tracker = Tracker::new(
            view(&points, &labels, &Pose::identity(), 0.0),
            0,
            reg,
            fe,
        )
        .unwrap();
        let graph = tracker.finish();
        assert_eq!(graph.keyframe_id, 0);
        assert!(graph.frames.is_empty());
        assert!(graph.edges.is_empty());
    }

    #[test]
    fn gamma_errors_without_reference() {
        let (points, labels) = world_cloud(30, 5);
        let kf = KeyframeRecord {
            cloud: Arc::new(view(&points, &labels, &Pose::identity(), 0.0)),
            global_pose: Pose::identity(),
            reference_inner_product: None,
            features: None,
            bow: None,
            frame_index: 0,
        };
        assert!(compute_gamma(&kf, 1.0).is_err());
        let mut kf = kf;
        kf.reference_inner_product = Some(2.0);
        assert!((compute_gamma(&kf, 1.0).unwrap() - 0.5).abs() < 1e-15);
        assert!((compute_gamma(&kf, 2.0).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn gamma_is_scale_invariant() {
        // Scaling sigma^2 scales every inner product by the same factor.
        let reference = 0.123;
        let current = 0.08;
        for scale in [1.0, 2.5, 100.0] {
            let kf = KeyframeRecord {
                cloud: Arc::new(
                    ColoredPointCloud::new(
                        vec![Vector3::new(0.0, 0.0, 1.0)],
                        vec![[0.0; LABEL_DIM]],
                        0.0,
                    )
                    .unwrap(),
                ),
                global_pose: Pose::identity(),
                reference_inner_product: Some(reference * scale),
                features: None,
                bow: None,
                frame_index: 0,
            };
            let g = compute_gamma(&kf, current * scale).unwrap();
            assert!((g - current / reference).abs() < 1e-12);
        }
    }

    #[test]
    fn global_pose_is_exact_composition() {
        let (points, labels) = world_cloud(150, 6);
        let (reg, fe) = test_cfgs();
        let cam1 = se3::exp(&Twist::new(
            Vector3::new(0.0, 0.02, 0.0),
            Vector3::new(0.03, 0.0, 0.01),
        ));
        let mut tracker = Tracker::new(
            view(&points, &labels, &Pose::identity(), 0.0),
            0,
            reg,
            fe,
        )
        .unwrap();
        let out = tracker.track_frame(view(&points, &labels, &cam1, 0.03), 1).unwrap();
        let kf = &tracker.keyframes()[0];
        let expected = kf.global_pose.compose(&tracker.last.pose_in_keyframe);
        assert_eq!(out.global_pose, expected);
    }

    proptest! {
        #[test]
        fn decision_predicate_matches_disjunction(
            gamma in 0.0f64..2.0,
            t in 0.0f64..0.4,
            theta in 0.0f64..1.2,
        ) {
            let cfg = FrontendConfig::default();
            let d = keyframe_decision(gamma, t, theta, &cfg);
            let expected = gamma < cfg.gamma_thres
                || t > cfg.t_thres
                || theta > cfg.theta_thres();
            prop_assert_eq!(d.new_keyframe, expected);
        }
    }
}
