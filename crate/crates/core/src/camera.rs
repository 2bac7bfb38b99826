//! Camera models. Extrinsics map world to camera as `p_cam = R·p_world + t`.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Projection {
    Orthographic,
    Pinhole { focal: f64, principal: [f64; 2] },
}

#[derive(Clone, Debug, PartialEq)]
pub struct CameraModel {
    pub id: u32,
    pub projection: Projection,
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

const ORTHONORMAL_TOL: f64 = 1e-9;

impl CameraModel {
    /// `rotation` is row-major world→camera and must be orthonormal.
    pub fn new(id: u32, projection: Projection, rotation: [f64; 9], translation: [f64; 3]) -> Result<Self> {
        let r = Matrix3::from_row_slice(&rotation);
        let gram = r.transpose() * r;
        let dev = (gram - Matrix3::identity()).abs().max();
        if !(dev <= ORTHONORMAL_TOL) {
            return Err(Error::config("R", format!("camera {id} rotation is not orthonormal (|RᵀR − I| = {dev:e})")));
        }
        if let Projection::Pinhole { focal, principal } = projection {
            if !(focal > 0.0 && focal.is_finite()) || !principal.iter().all(|c| c.is_finite()) {
                return Err(Error::config("f", format!("camera {id} needs a positive focal length")));
            }
        }
        if !translation.iter().all(|t| t.is_finite()) {
            return Err(Error::config("t", format!("camera {id} translation is not finite")));
        }
        Ok(Self { id, projection, rotation: r, translation: Vector3::from(translation) })
    }

    pub fn identity(id: u32) -> Self {
        Self { id, projection: Projection::Orthographic, rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn rotation(&self) -> [f64; 9] {
        let r = &self.rotation;
        std::array::from_fn(|k| r[(k / 3, k % 3)])
    }

    pub fn translation(&self) -> [f64; 3] {
        self.translation.into()
    }

    fn map(pose: &[f64], f: impl Fn(Vector3<f64>) -> Vector3<f64>) -> Vec<f64> {
        pose.chunks(3).flat_map(|p| f(Vector3::new(p[0], p[1], p[2])).data.0[0]).collect()
    }

    pub fn world_to_camera(&self, pose: &[f64]) -> Vec<f64> {
        Self::map(pose, |p| self.rotation * p + self.translation)
    }

    /// `world = Rᵀ(p − t)`.
    pub fn camera_to_world(&self, pose: &[f64]) -> Vec<f64> {
        let rt = self.rotation.transpose();
        Self::map(pose, |p| rt * (p - self.translation))
    }

    /// Image coordinates of a camera-frame pose.
    pub fn project(&self, pose_cam: &[f64]) -> Result<Vec<f64>> {
        match self.projection {
            Projection::Orthographic => Ok(pose_cam.chunks(3).flat_map(|p| [p[0], p[1]]).collect()),
            Projection::Pinhole { focal, principal } => {
                let behind: Vec<usize> =
                    pose_cam.chunks(3).enumerate().filter(|(_, p)| !(p[2] > 0.0)).map(|(j, _)| j).collect();
                if !behind.is_empty() {
                    return Err(Error::Domain(format!(
                        "camera {}: joints {behind:?} are at or behind the image plane",
                        self.id
                    )));
                }
                Ok(pose_cam
                    .chunks(3)
                    .flat_map(|p| [focal * p[0] / p[2] + principal[0], focal * p[1] / p[2] + principal[1]])
                    .collect())
            }
        }
    }

    /// World pose straight to image coordinates.
    pub fn project_world(&self, pose_world: &[f64]) -> Result<Vec<f64>> {
        self.project(&self.world_to_camera(pose_world))
    }
}

/// One entry of a camera file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraRecord {
    id: u32,
    kind: String,
    #[serde(rename = "R")]
    rotation: [f64; 9],
    t: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    f: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    c: Option<[f64; 2]>,
}

impl CameraRecord {
    fn into_model(self) -> Result<CameraModel> {
        let projection = match self.kind.as_str() {
            "orthographic" => Projection::Orthographic,
            "pinhole" => Projection::Pinhole {
                focal: self.f.ok_or_else(|| Error::config("f", format!("pinhole camera {} has no focal length", self.id)))?,
                principal: self.c.unwrap_or([0.0, 0.0]),
            },
            other => return Err(Error::config("kind", format!("unknown camera kind {other:?}"))),
        };
        CameraModel::new(self.id, projection, self.rotation, self.t)
    }

    fn from_model(cam: &CameraModel) -> Self {
        let (kind, f, c) = match cam.projection {
            Projection::Orthographic => ("orthographic", None, None),
            Projection::Pinhole { focal, principal } => ("pinhole", Some(focal), Some(principal)),
        };
        Self { id: cam.id, kind: kind.into(), rotation: cam.rotation(), t: cam.translation(), f, c }
    }
}

pub fn parse_cameras(text: &str, path: &Path) -> Result<Vec<CameraModel>> {
    let records: Vec<CameraRecord> = serde_json::from_str(text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })?;
    records.into_iter().map(CameraRecord::into_model).collect()
}

pub fn load_cameras(path: &Path) -> Result<Vec<CameraModel>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_cameras(&text, path)
}

pub fn save_cameras(cams: &[CameraModel], path: &Path) -> Result<()> {
    let records: Vec<CameraRecord> = cams.iter().map(CameraRecord::from_model).collect();
    crate::data::save_json(&records, path)
}

/// The synthetic benchmark's second view: a quarter turn about the image
/// y axis, so world x becomes camera depth.
pub fn side_camera(id: u32) -> CameraModel {
    CameraModel::new(id, Projection::Orthographic, [0.0, 0.0, 1.0, 0.0, 1.0, 0.0, -1.0, 0.0, 0.0], [0.0; 3])
        .expect("a proper rotation")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projection_examples() {
        let ortho = CameraModel::identity(0);
        assert_eq!(ortho.project(&[1.0, 2.0, 3.0]).unwrap(), vec![1.0, 2.0]);
        let pin = CameraModel::new(1, Projection::Pinhole { focal: 1.0, principal: [0.0, 0.0] }, [1., 0., 0., 0., 1., 0., 0., 0., 1.], [0.0; 3])
            .unwrap();
        assert_eq!(pin.project(&[2.0, 4.0, 2.0]).unwrap(), vec![1.0, 2.0]);
        let err = pin.project(&[0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 1.0, 1.0, -2.0]).unwrap_err();
        assert!(err.to_string().contains("[1, 2]"), "{err}");
        let y = [0.3, -0.2, 0.9, 1.0, 0.5, -0.4];
        let flipped = crate::data::reflect_depth(&y);
        assert_eq!(ortho.project(&y).unwrap(), ortho.project(&flipped).unwrap());
    }

    #[test]
    fn camera_to_world_examples() {
        // R rotates world by +90° about z
        let cam = CameraModel::new(0, Projection::Orthographic, [0., -1., 0., 1., 0., 0., 0., 0., 1.], [0.0; 3]).unwrap();
        let w = cam.camera_to_world(&[1.0, 0.0, 0.0]);
        assert!((w[0] - 0.0).abs() < 1e-15 && (w[1] + 1.0).abs() < 1e-15 && w[2].abs() < 1e-15, "{w:?}");
        let id = CameraModel::identity(3);
        assert_eq!(id.camera_to_world(&[1.0, 2.0, 3.0]), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn rejects_non_orthonormal_rotation_and_bad_focal() {
        assert!(CameraModel::new(0, Projection::Orthographic, [1., 0., 0., 0., 2., 0., 0., 0., 1.], [0.0; 3]).is_err());
        let r = [1., 0., 0., 0., 1., 0., 0., 0., 1.];
        assert!(CameraModel::new(0, Projection::Pinhole { focal: 0.0, principal: [0.0; 2] }, r, [0.0; 3]).is_err());
    }

    #[test]
    fn camera_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cams.json");
        let pin = CameraModel::new(4, Projection::Pinhole { focal: 2.5, principal: [1.0, -1.0] }, side_camera(0).rotation(), [0.1, 0.2, 5.0])
            .unwrap();
        let cams = vec![CameraModel::identity(0), side_camera(1), pin];
        save_cameras(&cams, &path).unwrap();
        assert_eq!(load_cameras(&path).unwrap(), cams);
        std::fs::write(&path, r#"[{"id":0,"kind":"fisheye","R":[1,0,0,0,1,0,0,0,1],"t":[0,0,0]}]"#).unwrap();
        assert!(matches!(load_cameras(&path), Err(Error::Config { .. })));
        std::fs::write(&path, "[{").unwrap();
        assert!(matches!(load_cameras(&path), Err(Error::Parse { .. })));
    }
}
