//! SO(3)/SE(3) types: rotations, rigid poses and twists.
//!
//! Poses are stored as rotation matrix + translation vector. Twists carry the
//! rotational part first: a 6-vector is `[omega, v]`.

use crate::error::{Error, Result};
use nalgebra::{Matrix3, UnitQuaternion, Vector3, Vector6};

/// Angle below which exp/log switch to Taylor-series branches.
const SMALL_ANGLE: f64 = 1e-8;

/// Number of compositions after which a pose re-orthonormalizes its rotation.
const REORTHONORMALIZE_EVERY: u32 = 100;

/// A rotation in SO(3), stored as an orthonormal 3x3 matrix with det +1.
#[derive(Debug, Clone, Copy)]
pub struct Rotation {
    matrix: Matrix3<f64>,
}

impl Rotation {
    pub fn identity() -> Self {
        Rotation {
            matrix: Matrix3::identity(),
        }
    }

    /// Wraps a matrix assumed orthonormal (e.g. from a quaternion or exp map).
    pub fn from_matrix_unchecked(matrix: Matrix3<f64>) -> Self {
        Rotation { matrix }
    }

    /// Rodrigues formula; exact for any axis-angle vector.
    pub fn from_axis_angle(omega: &Vector3<f64>) -> Self {
        let theta = omega.norm();
        let k = skew(omega);
        let k2 = k * k;
        let (a, b) = if theta < SMALL_ANGLE {
            // sin(t)/t and (1-cos(t))/t^2 near zero
            (1.0 - theta * theta / 6.0, 0.5 - theta * theta / 24.0)
        } else {
            (theta.sin() / theta, (1.0 - theta.cos()) / (theta * theta))
        };
        Rotation {
            matrix: Matrix3::identity() + k * a + k2 * b,
        }
    }

    pub fn from_unit_quaternion(q: &UnitQuaternion<f64>) -> Self {
        Rotation {
            matrix: *q.to_rotation_matrix().matrix(),
        }
    }

    pub fn to_unit_quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_matrix(&self.matrix)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.matrix
    }

    pub fn transpose(&self) -> Rotation {
        Rotation {
            matrix: self.matrix.transpose(),
        }
    }

    pub fn rotate(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.matrix * p
    }

    pub fn compose(&self, other: &Rotation) -> Rotation {
        Rotation {
            matrix: self.matrix * other.matrix,
        }
    }

    /// Rotation angle in [0, pi]; the arccos argument is clamped to [-1, 1].
    pub fn angle(&self) -> f64 {
        let c = (self.matrix.trace() - 1.0) / 2.0;
        c.clamp(-1.0, 1.0).acos()
    }

    /// Axis-angle vector (inverse of `from_axis_angle`); errors near pi.
    pub fn log(&self) -> Result<Vector3<f64>> {
        let theta = self.angle();
        if theta >= std::f64::consts::PI - 1e-6 {
            return Err(Error::LogDomain { angle: theta });
        }
        let w = Vector3::new(
            self.matrix[(2, 1)] - self.matrix[(1, 2)],
            self.matrix[(0, 2)] - self.matrix[(2, 0)],
            self.matrix[(1, 0)] - self.matrix[(0, 1)],
        );
        let scale = if theta < SMALL_ANGLE {
            0.5 + theta * theta / 12.0
        } else {
            theta / (2.0 * theta.sin())
        };
        Ok(w * scale)
    }

    /// Nearest orthonormal matrix via polar decomposition (SVD route).
    pub fn orthonormalized(&self) -> Rotation {
        let svd = self.matrix.svd(true, true);
        let u = svd.u.unwrap();
        let vt = svd.v_t.unwrap();
        let mut r = u * vt;
        if r.determinant() < 0.0 {
            let mut u2 = u;
            u2.column_mut(2).scale_mut(-1.0);
            r = u2 * vt;
        }
        Rotation { matrix: r }
    }
}

impl PartialEq for Rotation {
    fn eq(&self, other: &Self) -> bool {
        self.matrix == other.matrix
    }
}

/// Element of se(3): rotational part `omega` (radians), translational `v` (m).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Twist {
    pub omega: Vector3<f64>,
    pub v: Vector3<f64>,
}

impl Twist {
    pub fn zero() -> Self {
        Twist {
            omega: Vector3::zeros(),
            v: Vector3::zeros(),
        }
    }

    pub fn new(omega: Vector3<f64>, v: Vector3<f64>) -> Self {
        Twist { omega, v }
    }

    pub fn from_vector(x: &Vector6<f64>) -> Self {
        Twist {
            omega: Vector3::new(x[0], x[1], x[2]),
            v: Vector3::new(x[3], x[4], x[5]),
        }
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.omega[0],
            self.omega[1],
            self.omega[2],
            self.v[0],
            self.v[1],
            self.v[2],
        )
    }

    pub fn norm(&self) -> f64 {
        (self.omega.norm_squared() + self.v.norm_squared()).sqrt()
    }

    pub fn scaled(&self, s: f64) -> Twist {
        Twist {
            omega: self.omega * s,
            v: self.v * s,
        }
    }
}

/// Rigid transform in SE(3).
#[derive(Debug, Clone, Copy)]
pub struct Pose {
    rotation: Rotation,
    translation: Vector3<f64>,
    compositions: u32,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: Rotation::identity(),
            translation: Vector3::zeros(),
            compositions: 0,
        }
    }

    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        Pose {
            rotation,
            translation,
            compositions: 0,
        }
    }

    pub fn from_parts(r: Matrix3<f64>, t: Vector3<f64>) -> Self {
        Pose::new(Rotation::from_matrix_unchecked(r), t)
    }

    pub fn rotation(&self) -> &Rotation {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.rotate(p) + self.translation
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        let mut out = Pose {
            rotation: self.rotation.compose(&other.rotation),
            translation: self.rotation.rotate(&other.translation) + self.translation,
            compositions: self.compositions.max(other.compositions) + 1,
        };
        if out.compositions >= REORTHONORMALIZE_EVERY {
            out.rotation = out.rotation.orthonormalized();
            out.compositions = 0;
        }
        out
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -rt.rotate(&self.translation),
            compositions: self.compositions,
        }
    }

    /// Misalignment angle of the rotation part, in [0, pi].
    pub fn rotation_angle(&self) -> f64 {
        self.rotation.angle()
    }
}

impl PartialEq for Pose {
    fn eq(&self, other: &Self) -> bool {
        self.rotation == other.rotation && self.translation == other.translation
    }
}

pub fn skew(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w[2], w[1], w[2], 0.0, -w[0], -w[1], w[0], 0.0)
}

/// Exponential map se(3) -> SE(3).
pub fn exp(xi: &Twist) -> Pose {
    let rotation = Rotation::from_axis_angle(&xi.omega);
    let v_mat = left_jacobian_so3(&xi.omega);
    Pose::new(rotation, v_mat * xi.v)
}

/// Logarithm map SE(3) -> se(3); errors when the rotation angle is at pi.
pub fn log(p: &Pose) -> Result<Twist> {
    let omega = p.rotation.log()?;
    let v_inv = left_jacobian_so3_inv(&omega);
    Ok(Twist {
        omega,
        v: v_inv * p.translation,
    })
}

/// SO(3) left Jacobian: V = I + (1-cos)/t^2 K + (t-sin)/t^3 K^2.
pub fn left_jacobian_so3(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta = omega.norm();
    let k = skew(omega);
    let k2 = k * k;
    let (b, c) = if theta < SMALL_ANGLE {
        (0.5 - theta * theta / 24.0, 1.0 / 6.0 - theta * theta / 120.0)
    } else {
        let t2 = theta * theta;
        (
            (1.0 - theta.cos()) / t2,
            (theta - theta.sin()) / (t2 * theta),
        )
    };
    Matrix3::identity() + k * b + k2 * c
}

/// Inverse of the SO(3) left Jacobian.
pub fn left_jacobian_so3_inv(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta = omega.norm();
    let k = skew(omega);
    let k2 = k * k;
    let c = if theta < SMALL_ANGLE {
        1.0 / 12.0 + theta * theta / 720.0
    } else {
        let half = theta / 2.0;
        (1.0 - half * half.cos() / half.sin()) / (theta * theta)
    };
    Matrix3::identity() - k * 0.5 + k2 * c
}
