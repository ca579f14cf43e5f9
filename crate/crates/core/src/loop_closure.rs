//! Loop-closure detection and verification: bag-of-words candidate gating,
//! feature matching with RANSAC over 3D-3D correspondences, and registration
//! refinement with an inner-product margin test.

use crate::bow::{l1_score, BowVector};
use crate::dataset::CameraIntrinsics;
use crate::error::{Error, Result};
use crate::features::{match_features, FeatureSet};
use crate::registration::{inner_product, register, ColoredPointCloud, RegistrationConfig};
use crate::se3::Pose;
use nalgebra::{Matrix3, Vector3};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoopClosureConfig {
    /// Normalized similarity gate: s(v_i, v_j) / s(v_i, v_{i-1}).
    pub eta_thres: f64,
    /// Lowe ratio for descriptor matching.
    pub match_ratio: f64,
    /// Minimum RANSAC inliers to keep a candidate.
    pub min_matches: usize,
    pub ransac_iterations: usize,
    /// RANSAC inlier residual, meters.
    pub inlier_threshold: f64,
}

impl Default for LoopClosureConfig {
    fn default() -> Self {
        LoopClosureConfig {
            eta_thres: 0.3,
            match_ratio: 0.7,
            min_matches: 5,
            ransac_iterations: 500,
            inlier_threshold: 0.05,
        }
    }
}

impl LoopClosureConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.match_ratio) {
            return Err(Error::Config("match_ratio must lie in [0, 1]".into()));
        }
        if self.eta_thres < 0.0 || self.inlier_threshold <= 0.0 {
            return Err(Error::Config("loop closure thresholds must be positive".into()));
        }
        if self.min_matches < 3 {
            return Err(Error::Config("min_matches must be at least 3".into()));
        }
        Ok(())
    }
}

/// A verified loop closure between keyframes `i` (earlier) and `j` (current):
/// `pose` maps frame-j coordinates into frame i.
#[derive(Debug, Clone)]
pub struct LoopClosure {
    pub i: usize,
    pub j: usize,
    pub pose: Pose,
    pub inliers: usize,
    /// Inner-product margin of the refined pose over the best alternative.
    pub alpha: f64,
    pub inner_product: f64,
}

/// Bag-of-words candidate earlier keyframes for the current keyframe
/// (index `current` into `bows`). Scores are normalized by the similarity to
/// the previous keyframe; a zero reference similarity disables detection for
/// this keyframe.
pub fn detect_candidates(bows: &[BowVector], current: usize, eta_thres: f64) -> Vec<usize> {
    if current < 2 || current >= bows.len() {
        return Vec::new();
    }
    let reference = match l1_score(&bows[current], &bows[current - 1]) {
        Ok(s) if s > 0.0 => s,
        _ => {
            log::warn!("keyframe {current}: zero similarity to previous keyframe, skipping loop detection");
            return Vec::new();
        }
    };
    let mut out = Vec::new();
    for j in 0..current - 1 {
        let eta = match l1_score(&bows[current], &bows[j]) {
            Ok(s) => s / reference,
            Err(_) => continue,
        };
        if eta >= eta_thres {
            out.push(j);
        }
    }
    out
}

/// Closed-form rigid pose from paired points: minimizes
/// sum |R * q_k + t - p_k|^2 over (p_k, q_k) pairs (Kabsch with det
/// correction). Errors on < 3 pairs or degenerate (collinear) geometry.
pub fn initial_pose_svd(pairs: &[(Vector3<f64>, Vector3<f64>)]) -> Result<Pose> {
    if pairs.len() < 3 {
        return Err(Error::DegenerateGeometry(format!(
            "{} correspondences, need at least 3",
            pairs.len()
        )));
    }
    let n = pairs.len() as f64;
    let cp: Vector3<f64> = pairs.iter().map(|(p, _)| p).sum::<Vector3<f64>>() / n;
    let cq: Vector3<f64> = pairs.iter().map(|(_, q)| q).sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for (p, q) in pairs {
        cov += (p - cp) * (q - cq).transpose();
    }
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    // Collinear/coincident point sets leave the rotation under-determined.
    if svd.singular_values[1] <= 1e-12 * svd.singular_values[0].max(1e-300) {
        return Err(Error::DegenerateGeometry(
            "correspondences are collinear or coincident".into(),
        ));
    }
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * vt;
    let t = cp - r * cq;
    Ok(Pose::from_parts(r, t))
}

/// Descriptor matching plus 3-point RANSAC over back-projected keypoints.
/// Returns the refit pose (mapping j-frame points into i) and the inlier
/// pairs, or `None` when fewer than `min_matches` inliers support any model.
pub fn match_and_ransac(
    fi: &FeatureSet,
    fj: &FeatureSet,
    intr: &CameraIntrinsics,
    cfg: &LoopClosureConfig,
    seed: u64,
) -> Option<(Pose, Vec<(Vector3<f64>, Vector3<f64>)>)> {
    let matches = match_features(fi, fj, cfg.match_ratio);
    if matches.len() < cfg.min_matches {
        return None;
    }
    let pairs: Vec<(Vector3<f64>, Vector3<f64>)> = matches
        .iter()
        .map(|&(a, b)| {
            let ka = &fi.keypoints[a];
            let kb = &fj.keypoints[b];
            (
                intr.backproject(ka.u, ka.v, fi.depths[a]),
                intr.backproject(kb.u, kb.v, fj.depths[b]),
            )
        })
        .collect();

    let mut rng = StdRng::seed_from_u64(seed);
    let threshold2 = cfg.inlier_threshold * cfg.inlier_threshold;
    let mut best_inliers: Vec<usize> = Vec::new();
    for _ in 0..cfg.ransac_iterations {
        let mut sample = [0usize; 3];
        for slot in sample.iter_mut() {
            *slot = rng.gen_range(0..pairs.len());
        }
        if sample[0] == sample[1] || sample[0] == sample[2] || sample[1] == sample[2] {
            continue;
        }
        let model = [pairs[sample[0]], pairs[sample[1]], pairs[sample[2]]];
        let Ok(pose) = initial_pose_svd(&model) else { continue };
        let inliers: Vec<usize> = pairs
            .iter()
            .enumerate()
            .filter(|(_, (p, q))| (pose.transform(q) - p).norm_squared() <= threshold2)
            .map(|(k, _)| k)
            .collect();
        if inliers.len() > best_inliers.len() {
            best_inliers = inliers;
            if best_inliers.len() >= pairs.len() * 4 / 5 {
                break;
            }
        }
    }
    if best_inliers.len() < cfg.min_matches {
        return None;
    }
    let inlier_pairs: Vec<_> = best_inliers.iter().map(|&k| pairs[k]).collect();
    let pose = initial_pose_svd(&inlier_pairs).ok()?;
    Some((pose, inlier_pairs))
}

/// Refines an SVD hypothesis by registration and accepts it only when its
/// inner product beats every cheaper alternative: identity, the SVD pose
/// itself, and the odometry-implied relative pose. All four are evaluated at
/// the initial length-scale. Returns the margin-annotated closure or `None`.
#[allow(clippy::too_many_arguments)]
pub fn validate_and_refine(
    cloud_i: &ColoredPointCloud,
    cloud_j: &ColoredPointCloud,
    h_svd: &Pose,
    h_odom: &Pose,
    reg_cfg: &RegistrationConfig,
    i: usize,
    j: usize,
    inliers: usize,
) -> Result<Option<LoopClosure>> {
    let result = register(cloud_i, cloud_j, h_svd, reg_cfg)?;
    let f_refined = result.final_inner_product;
    let f_identity = inner_product(cloud_i, cloud_j, &Pose::identity(), reg_cfg);
    let f_svd = inner_product(cloud_i, cloud_j, h_svd, reg_cfg);
    let f_odom = inner_product(cloud_i, cloud_j, h_odom, reg_cfg);
    let alpha = f_refined - f_identity.max(f_svd).max(f_odom);
    if alpha > 0.0 {
        Ok(Some(LoopClosure {
            i,
            j,
            pose: result.pose,
            inliers,
            alpha,
            inner_product: f_refined,
        }))
    } else {
        log::info!("loop candidate {i}<->{j} rejected: margin {alpha:.3e} <= 0");
        Ok(None)
    }
}
