//! Rigid edge transforms and the world/object frame conversions.
//!
//! An object frame is centred on the tracked box and scaled per axis so that
//! the box occupies exactly `[-1, 1]^3`. Axis order in the object frame is
//! (length, height, width).

use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

const ORTHO_TOL: f64 = 1e-9;

/// Proper rigid motion `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    rotation: Mat3,
    translation: Vec3,
}

impl RigidTransform {
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        let gram = rotation.transpose() * rotation;
        let ortho_err = (gram - Mat3::identity()).abs().max();
        if !(ortho_err <= ORTHO_TOL) {
            return Err(Error::validation(
                "rotation",
                format!("not orthonormal (|RtR - I| = {ortho_err:e})"),
            ));
        }
        let det = rotation.determinant();
        if !((det - 1.0).abs() <= ORTHO_TOL) {
            return Err(Error::validation(
                "rotation",
                format!("determinant {det} is not +1"),
            ));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("translation".into()));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self {
            rotation: Mat3::identity(),
            translation,
        }
    }

    /// Rotation by `yaw` radians about the vertical (+y) axis.
    pub fn from_yaw(yaw: f64, translation: Vec3) -> Self {
        Self {
            rotation: yaw_matrix(yaw),
            translation,
        }
    }

    /// `R = Ry(yaw) * Rx(pitch) * Rz(roll)`, angles in radians.
    pub fn from_euler(yaw: f64, pitch: f64, roll: f64, translation: Vec3) -> Self {
        let rx = *Rotation3::from_axis_angle(&Vector3::x_axis(), pitch).matrix();
        let rz = *Rotation3::from_axis_angle(&Vector3::z_axis(), roll).matrix();
        Self {
            rotation: yaw_matrix(yaw) * rx * rz,
            translation,
        }
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn with_translation(&self, translation: Vec3) -> Self {
        Self {
            rotation: self.rotation,
            translation,
        }
    }

    /// Heading about +y, assuming the rotation is a pure yaw.
    pub fn yaw(&self) -> f64 {
        self.rotation[(0, 2)].atan2(self.rotation[(0, 0)])
    }

    pub fn apply(&self, x: &Vec3) -> Vec3 {
        self.rotation * x + self.translation
    }

    pub fn apply_inverse(&self, x: &Vec3) -> Vec3 {
        self.rotation.transpose() * (x - self.translation)
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self * other`: apply `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }
}

pub fn yaw_matrix(yaw: f64) -> Mat3 {
    let (s, c) = yaw.sin_cos();
    Mat3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

/// Box extents in meters: length along object x, height along y, width along z.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxDims {
    pub length: f64,
    pub height: f64,
    pub width: f64,
}

impl BoxDims {
    pub fn new(length: f64, height: f64, width: f64) -> Result<Self> {
        let dims = Self {
            length,
            height,
            width,
        };
        dims.validate()?;
        Ok(dims)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("length", self.length),
            ("height", self.height),
            ("width", self.width),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::validation(
                    "box dims",
                    format!("{name} must be positive, got {v}"),
                ));
            }
        }
        Ok(())
    }

    pub fn as_vec(&self) -> Vec3 {
        Vec3::new(self.length, self.height, self.width)
    }

    /// Diagonal of `S_o`: twice the inverse extent, so half-extents map to 1.
    pub fn inv_half_extents(&self) -> Vec3 {
        Vec3::new(2.0 / self.length, 2.0 / self.height, 2.0 / self.width)
    }

    pub fn scaled(&self, s: &Vec3) -> Self {
        Self {
            length: self.length * s.x,
            height: self.height * s.y,
            width: self.width * s.z,
        }
    }
}

pub fn world_to_object(pose: &RigidTransform, dims: &BoxDims, x: &Vec3) -> Vec3 {
    pose.apply_inverse(x).component_mul(&dims.inv_half_extents())
}

pub fn object_to_world(pose: &RigidTransform, dims: &BoxDims, x_o: &Vec3) -> Vec3 {
    pose.apply(&(x_o.component_mul(&dims.as_vec()) * 0.5))
}

/// Unnormalized object-frame image of a world direction. Keeping the length
/// lets the world ray parameter `t` be reused unchanged in the object frame.
pub fn direction_to_object_unnormalized(pose: &RigidTransform, dims: &BoxDims, d: &Vec3) -> Vec3 {
    (pose.rotation().transpose() * d).component_mul(&dims.inv_half_extents())
}

pub fn direction_to_object(pose: &RigidTransform, dims: &BoxDims, d: &Vec3) -> Vec3 {
    direction_to_object_unnormalized(pose, dims, d).normalize()
}
