//! Weak-perspective camera and the landmark frame file format.

use std::path::Path;

use nalgebra::{DVector, Matrix3, Rotation3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{self, ser_vec, FORMAT_VERSION};
use crate::shape_model::Landmarks3D;

const ROTATION_TOL: f64 = 1e-8;

/// Uniform scale, rotation and image-plane translation.
///
/// A vertex `p` maps to `scale * (R p).xy + translation`.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    scale: f64,
    rotation: Matrix3<f64>,
    translation: Vector2<f64>,
}

impl Pose {
    pub fn new(scale: f64, rotation: Matrix3<f64>, translation: Vector2<f64>) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::InvalidParameter(format!("pose scale must be positive, got {scale}")));
        }
        if rotation.iter().chain(translation.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("pose"));
        }
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det = rotation.determinant();
        if ortho > ROTATION_TOL || (det - 1.0).abs() > ROTATION_TOL {
            return Err(Error::InvalidParameter(format!(
                "rotation is not proper orthonormal (|RtR - I| = {ortho:e}, det = {det})"
            )));
        }
        Ok(Self {
            scale,
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: Vector2::zeros(),
        }
    }

    /// Pose from yaw/pitch/roll in radians (rotations about y, x, z).
    pub fn from_angles(scale: f64, yaw: f64, pitch: f64, roll: f64, translation: Vector2<f64>) -> Result<Self> {
        let r = Rotation3::from_axis_angle(&Vector3::z_axis(), roll)
            * Rotation3::from_axis_angle(&Vector3::x_axis(), pitch)
            * Rotation3::from_axis_angle(&Vector3::y_axis(), yaw);
        Self::new(scale, r.into_inner(), translation)
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector2<f64> {
        &self.translation
    }

    pub fn project_point(&self, p: &Vector3<f64>) -> Vector2<f64> {
        let q = self.rotation * p;
        Vector2::new(q.x, q.y) * self.scale + self.translation
    }
}

/// 2D landmark positions in pixels, `2L` interleaved `(u, v)` coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Landmarks2D {
    pub points: DVector<f64>,
}

impl Landmarks2D {
    pub fn new(points: DVector<f64>) -> Result<Self> {
        if points.len() % 2 != 0 {
            return Err(Error::InvalidParameter(format!(
                "2D landmark vector length {} is not even",
                points.len()
            )));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("2D landmarks"));
        }
        Ok(Self { points })
    }

    pub fn from_vec(points: Vec<f64>) -> Result<Self> {
        Self::new(DVector::from_vec(points))
    }

    pub fn landmark_count(&self) -> usize {
        self.points.len() / 2
    }

    pub fn point(&self, i: usize) -> Vector2<f64> {
        Vector2::new(self.points[2 * i], self.points[2 * i + 1])
    }

    pub fn centroid(&self) -> Vector2<f64> {
        let n = self.landmark_count();
        (0..n).map(|i| self.point(i)).sum::<Vector2<f64>>() / n as f64
    }

    /// Applies `p -> a p + b` to every point.
    pub fn transformed(&self, a: &nalgebra::Matrix2<f64>, b: &Vector2<f64>) -> Self {
        let mut points = self.points.clone();
        for i in 0..self.landmark_count() {
            let q = a * self.point(i) + b;
            points[2 * i] = q.x;
            points[2 * i + 1] = q.y;
        }
        Self { points }
    }
}

pub fn project(pose: &Pose, shape: &Landmarks3D) -> Landmarks2D {
    let n = shape.landmark_count();
    let mut out = DVector::zeros(2 * n);
    for i in 0..n {
        let uv = pose.project_point(&Vector3::from(shape.vertex(i)));
        out[2 * i] = uv.x;
        out[2 * i + 1] = uv.y;
    }
    Landmarks2D { points: out }
}

/// Like [`project`] but checks the landmark count against an expected value.
pub fn project_checked(pose: &Pose, shape: &Landmarks3D, landmarks: usize) -> Result<Landmarks2D> {
    if shape.landmark_count() != landmarks {
        return Err(Error::Dimension {
            context: "3D landmarks",
            expected: landmarks,
            actual: shape.landmark_count(),
        });
    }
    Ok(project(pose, shape))
}

/// One frame of 2D landmarks as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LandmarkFrame {
    pub format_version: u32,
    pub subject_label: String,
    pub frame_index: usize,
    #[serde(rename = "L")]
    pub landmark_count: usize,
    #[serde(serialize_with = "ser_vec")]
    pub points: Vec<f64>,
    pub source: String,
}

impl LandmarkFrame {
    pub fn new(subject_label: impl Into<String>, frame_index: usize, landmarks: &Landmarks2D, source: impl Into<String>) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            subject_label: subject_label.into(),
            frame_index,
            landmark_count: landmarks.landmark_count(),
            points: landmarks.points.as_slice().to_vec(),
            source: source.into(),
        }
    }

    pub fn landmarks(&self) -> Result<Landmarks2D> {
        Landmarks2D::from_vec(self.points.clone())
    }

    fn validate(&self, path: &Path) -> Result<()> {
        format::check_version(path, self.format_version)?;
        if self.points.len() != 2 * self.landmark_count {
            return Err(Error::schema(
                path,
                format!(
                    "frame {} has {} coordinates, expected 2L = {}",
                    self.frame_index,
                    self.points.len(),
                    2 * self.landmark_count
                ),
            ));
        }
        if self.points.iter().any(|v| !v.is_finite()) {
            return Err(Error::schema(path, format!("frame {} has non-finite coordinates", self.frame_index)));
        }
        Ok(())
    }
}

/// Reads a landmark file holding either one frame or an array of frames.
pub fn load_frames(path: &Path) -> Result<Vec<LandmarkFrame>> {
    // Untagged enums do not mix with arbitrary-precision numbers, so branch
    // on the JSON shape by hand.
    let value: serde_json::Value = format::read_json(path)?;
    let frames: Vec<LandmarkFrame> = if value.is_array() {
        serde_json::from_value(value)
    } else {
        serde_json::from_value(value).map(|f| vec![f])
    }
    .map_err(|e| Error::schema(path, e))?;
    for f in &frames {
        f.validate(path)?;
    }
    Ok(frames)
}

pub fn save_frames(path: &Path, frames: &[LandmarkFrame]) -> Result<()> {
    format::write_json(path, &frames)
}

pub fn save_frame(path: &Path, frame: &LandmarkFrame) -> Result<()> {
    format::write_json(path, frame)
}
