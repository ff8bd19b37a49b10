//! Camera-to-face coordinate standardization.
//!
//! Rotates and rescales samples so that the face center sits on the optical
//! axis of a virtual camera at a fixed distance, with a per-source focal
//! length. Directions (gaze, head orientation) are re-expressed in the
//! standardized frame; the image is carried along by a single 3x3 homography.

use crate::error::{Error, Result};
use crate::geometry::{vector_to_pitchyaw, GazeAngles, RotationMatrix, UnitVector3};
use crate::pixels::{warp_image_bilinear, ImageGrid};
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub focal_x: f64,
    pub focal_y: f64,
    pub center_x: f64,
    pub center_y: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(
        focal_x: f64,
        focal_y: f64,
        center_x: f64,
        center_y: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        if focal_x <= 0.0 || focal_y <= 0.0 {
            return Err(Error::InvalidArgument("focal length must be positive".into()));
        }
        if center_x <= 0.0
            || center_y <= 0.0
            || center_x >= width as f64
            || center_y >= height as f64
        {
            return Err(Error::InvalidArgument(
                "principal point must lie within the image".into(),
            ));
        }
        Ok(Self {
            focal_x,
            focal_y,
            center_x,
            center_y,
            width,
            height,
        })
    }

    /// Symmetric intrinsics: focal `f`, centered principal point.
    pub fn symmetric(f: f64, width: usize, height: usize) -> Result<Self> {
        Self::new(f, f, width as f64 / 2.0, height as f64 / 2.0, width, height)
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            self.focal_x,
            0.0,
            self.center_x,
            0.0,
            self.focal_y,
            self.center_y,
            0.0,
            0.0,
            1.0,
        )
    }
}

/// World-to-camera rigid pose; translation in millimeters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub rotation: RotationMatrix,
    pub translation: Vector3<f64>,
}

/// Output of [`normalize_sample`].
#[derive(Debug, Clone)]
pub struct NormalizationResult {
    pub normalized_pose: CameraPose,
    pub warp: Matrix3<f64>,
    pub normalized_gaze: GazeAngles,
    pub normalized_head_pose: GazeAngles,
}

/// Default standardized camera-to-face distance in millimeters.
pub const DEFAULT_NORMALIZED_DISTANCE_MM: f64 = 680.0;

/// Default virtual focal length for the synthetic toy source, in pixels.
/// Repository default, not derived from any published protocol.
pub const SYNTHETIC_FOCAL_PX: f64 = 512.0;

/// Source tag for [`focal_for_source`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceTag {
    Xgaze,
    Mpii,
    Columbia,
    Gazecapture,
    Synthetic,
}

impl std::str::FromStr for SourceTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "xgaze" => Ok(Self::Xgaze),
            "mpii" => Ok(Self::Mpii),
            "columbia" => Ok(Self::Columbia),
            "gazecapture" => Ok(Self::Gazecapture),
            "synthetic" => Ok(Self::Synthetic),
            other => Err(Error::InvalidArgument(format!("unknown source tag {other:?}"))),
        }
    }
}

/// Virtual focal length (pixels) used for the standardized projection of
/// each image source.
pub fn focal_for_source(tag: SourceTag) -> f64 {
    focal_for_source_with_synthetic(tag, SYNTHETIC_FOCAL_PX)
}

pub fn focal_for_source_with_synthetic(tag: SourceTag, synthetic_focal: f64) -> f64 {
    match tag {
        SourceTag::Xgaze => 1600.0,
        SourceTag::Mpii => 1400.0,
        SourceTag::Columbia => 1600.0,
        SourceTag::Gazecapture => 1200.0,
        SourceTag::Synthetic => synthetic_focal,
    }
}

/// Rotation that standardizes a sample: brings the face center onto the
/// optical axis while keeping the head's x-axis horizontal in the image.
pub fn normalizing_rotation(
    face_center: &Vector3<f64>,
    head_rotation: &RotationMatrix,
) -> Result<RotationMatrix> {
    let d = face_center.norm();
    if d < 1e-9 {
        return Err(Error::Geometry("face center at camera origin".into()));
    }
    let z_axis = face_center / d;
    let head_x = head_rotation.matrix().column(0).into_owned();
    let y_axis = z_axis.cross(&head_x);
    let yn = y_axis.norm();
    if yn < 1e-9 {
        return Err(Error::Geometry(
            "head x-axis parallel to the viewing direction".into(),
        ));
    }
    let y_axis = y_axis / yn;
    let x_axis = y_axis.cross(&z_axis);
    RotationMatrix::new(Matrix3::from_rows(&[
        x_axis.transpose(),
        y_axis.transpose(),
        z_axis.transpose(),
    ]))
}

/// Standardizes one sample: homography-warps the image so the face center
/// lies on the optical axis of the target camera at exactly `distance`, and
/// re-expresses gaze and head orientation in the standardized frame.
#[allow(clippy::too_many_arguments)]
pub fn normalize_sample(
    image: &ImageGrid,
    face_center: &Vector3<f64>,
    head_rotation: &RotationMatrix,
    gaze_vector: &UnitVector3,
    intrinsics: &CameraIntrinsics,
    target: &CameraIntrinsics,
    distance: f64,
) -> Result<(ImageGrid, NormalizationResult)> {
    let geom = normalize_geometry(face_center, head_rotation, gaze_vector, intrinsics, target, distance)?;
    let warped = warp_image_bilinear(image, &geom.warp, target.height, target.width)?;
    Ok((warped, geom))
}

/// Geometry-only part of [`normalize_sample`].
pub fn normalize_geometry(
    face_center: &Vector3<f64>,
    head_rotation: &RotationMatrix,
    gaze_vector: &UnitVector3,
    intrinsics: &CameraIntrinsics,
    target: &CameraIntrinsics,
    distance: f64,
) -> Result<NormalizationResult> {
    let r_n = normalizing_rotation(face_center, head_rotation)?;
    let d = face_center.norm();
    let scale = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, distance / d));
    let k_inv = intrinsics
        .matrix()
        .try_inverse()
        .ok_or_else(|| Error::Geometry("singular intrinsics".into()))?;
    let warp = target.matrix() * scale * r_n.matrix() * k_inv;

    let head_n = r_n.compose(head_rotation);
    let gaze_n = r_n.apply(gaze_vector.as_vector());
    let forward = head_n.apply(&Vector3::new(0.0, 0.0, -1.0));

    let normalized_pose = CameraPose {
        rotation: head_n,
        translation: Vector3::new(0.0, 0.0, distance),
    };
    Ok(NormalizationResult {
        normalized_pose,
        warp,
        normalized_gaze: vector_to_pitchyaw(&UnitVector3::new(gaze_n)?),
        normalized_head_pose: vector_to_pitchyaw(&UnitVector3::new(forward)?),
    })
}
