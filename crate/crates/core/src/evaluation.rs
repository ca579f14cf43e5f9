//! Trajectory evaluation: ATE RMSE after rigid alignment and RPE RMSE
//! (translational m/s, rotational deg/s), plus TUM trajectory file I/O.

use crate::error::{Error, Result};
use crate::se3::{Pose, Rotation};
use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use std::io::Write;
use std::path::Path;

pub const ASSOCIATION_TOLERANCE: f64 = 0.02;

/// Timestamped trajectory with strictly increasing timestamps.
#[derive(Debug, Clone, Default)]
pub struct TrajectoryEstimate {
    entries: Vec<(f64, Pose)>,
}

impl TrajectoryEstimate {
    pub fn new(entries: Vec<(f64, Pose)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidArgument("empty trajectory".into()));
        }
        if entries.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::InvalidArgument(
                "trajectory timestamps must be strictly increasing".into(),
            ));
        }
        Ok(TrajectoryEstimate { entries })
    }

    pub fn entries(&self) -> &[(f64, Pose)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Nearest entry within the association tolerance.
    fn nearest(&self, ts: f64, tol: f64) -> Option<&(f64, Pose)> {
        let idx = self.entries.partition_point(|(t, _)| *t < ts);
        [idx.wrapping_sub(1), idx]
            .iter()
            .filter_map(|&i| self.entries.get(i))
            .filter(|(t, _)| (t - ts).abs() <= tol)
            .min_by(|a, b| (a.0 - ts).abs().total_cmp(&(b.0 - ts).abs()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = crate::dataset::read_trajectory(path)?;
        TrajectoryEstimate::new(raw)
    }

    /// TUM format: `timestamp tx ty tz qx qy qz qw` per line.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(
            std::fs::File::create(path).map_err(|e| Error::io(path, e))?,
        );
        for (ts, pose) in &self.entries {
            writeln!(out, "{}", format_tum_line(*ts, pose)).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

pub fn format_tum_line(ts: f64, pose: &Pose) -> String {
    let t = pose.translation();
    let q = pose.rotation().to_unit_quaternion();
    format!(
        "{ts:.6} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}",
        t.x, t.y, t.z, q.i, q.j, q.k, q.w
    )
}

fn associate<'a>(
    est: &'a TrajectoryEstimate,
    gt: &'a TrajectoryEstimate,
) -> Vec<(&'a Pose, &'a Pose)> {
    est.entries
        .iter()
        .filter_map(|(ts, p)| gt.nearest(*ts, ASSOCIATION_TOLERANCE).map(|(_, q)| (p, q)))
        .collect()
}

/// Rigid alignment (Horn/Umeyama, no scale) of estimate positions onto
/// ground-truth positions: returns the pose g minimizing sum |g*p - q|^2.
fn align_rigid(pairs: &[(&Pose, &Pose)]) -> Pose {
    let n = pairs.len() as f64;
    let cp: Vector3<f64> = pairs.iter().map(|(p, _)| p.translation()).sum::<Vector3<f64>>() / n;
    let cq: Vector3<f64> = pairs.iter().map(|(_, q)| q.translation()).sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for (p, q) in pairs {
        cov += (q.translation() - cq) * (p.translation() - cp).transpose();
    }
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * vt;
    Pose::from_parts(r, cq - r * cp)
}

/// ATE RMSE in meters: closed-form rigid alignment of the estimate onto
/// ground truth, then RMSE over translational residuals.
pub fn ate_rmse(est: &TrajectoryEstimate, gt: &TrajectoryEstimate) -> Result<f64> {
    let pairs = associate(est, gt);
    if pairs.len() < 3 {
        return Err(Error::InsufficientOverlap(pairs.len()));
    }
    let g = align_rigid(&pairs);
    let sq_sum: f64 = pairs
        .iter()
        .map(|(p, q)| (g.transform(p.translation()) - q.translation()).norm_squared())
        .sum();
    Ok((sq_sum / pairs.len() as f64).sqrt())
}

/// Per-pair translational residuals after optimal rigid alignment, in
/// association order. Basis for cumulative-error plots.
pub fn ate_residuals(est: &TrajectoryEstimate, gt: &TrajectoryEstimate) -> Result<Vec<f64>> {
    let pairs = associate(est, gt);
    if pairs.len() < 3 {
        return Err(Error::InsufficientOverlap(pairs.len()));
    }
    let g = align_rigid(&pairs);
    Ok(pairs
        .iter()
        .map(|(p, q)| (g.transform(p.translation()) - q.translation()).norm())
        .collect())
}

/// RPE RMSE over all windows `delta` seconds apart:
/// E = (Q_i^-1 Q_k)^-1 (P_i^-1 P_k); returns (translational m/s RMSE,
/// rotational deg/s RMSE).
pub fn rpe_rmse(
    est: &TrajectoryEstimate,
    gt: &TrajectoryEstimate,
    delta: f64,
) -> Result<(f64, f64)> {
    if delta <= 0.0 {
        return Err(Error::InvalidArgument("rpe delta must be positive".into()));
    }
    let mut trans_sq = 0.0;
    let mut rot_sq = 0.0;
    let mut count = 0usize;
    for (ts, p_i) in &est.entries {
        let Some((_, p_k)) = est.nearest(ts + delta, ASSOCIATION_TOLERANCE) else { continue };
        let Some((_, q_i)) = gt.nearest(*ts, ASSOCIATION_TOLERANCE) else { continue };
        let Some((_, q_k)) = gt.nearest(ts + delta, ASSOCIATION_TOLERANCE) else { continue };
        let rel_est = p_i.inverse().compose(p_k);
        let rel_gt = q_i.inverse().compose(q_k);
        let e = rel_gt.inverse().compose(&rel_est);
        trans_sq += (e.translation().norm() / delta).powi(2);
        rot_sq += (e.rotation().angle().to_degrees() / delta).powi(2);
        count += 1;
    }
    if count == 0 {
        return Err(Error::InsufficientOverlap(0));
    }
    Ok((
        (trans_sq / count as f64).sqrt(),
        (rot_sq / count as f64).sqrt(),
    ))
}

/// Parses a quaternion-form pose (qx qy qz qw order).
pub fn pose_from_tum_fields(t: [f64; 3], q: [f64; 4]) -> Pose {
    let quat = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[3], q[0], q[1], q[2]));
    Pose::new(
        Rotation::from_unit_quaternion(&quat),
        Vector3::new(t[0], t[1], t[2]),
    )
}
