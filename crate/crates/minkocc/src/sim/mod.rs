//! Synthetic driving-scene simulator.
//!
//! Stands in for a real capture rig: parametric scenes on a ground plane,
//! ring-pattern LiDAR with multi-sweep accumulation, four pinhole cameras,
//! noisy 2D pseudo-labels with confidences, dense ground-truth voxel grids
//! with visibility masks, and an on-disk dataset layout.

mod dataset;
mod labels;
mod lidar;
mod raycast;
mod scene;

pub use dataset::{
    generate_dataset, generate_frame, load_dataset, write_dataset, CameraCalib, Dataset, Frame,
    GenConfig, Manifest, SplitLists, MANIFEST_VERSION,
};
pub use labels::{
    camera_eye, confusable_class, pixel_ray, rasterize_ground_truth, render_camera_image,
    render_pseudo_labels, NoiseConfig, SKY_COLOR,
};
pub use lidar::{
    accumulate_sweeps, class_intensity, simulate_lidar, BeamConfig, Sweep, SweepSet,
};
pub use raycast::{first_hit, ray_box, ray_cylinder, ray_ground, Hit, HitTarget};
pub use scene::{
    generate_scene, EgoPose, PlacementReport, Primitive, PrimitiveShape, Scene, SceneConfig,
    CLASS_BICYCLE, CLASS_CAR, CLASS_DRIVABLE, CLASS_PEDESTRIAN, CLASS_SIDEWALK, CLASS_TRUCK,
};

use nalgebra::{Matrix3, Vector3};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::Camera;

/// Rigid transform mapping local coordinates into the parent frame,
/// stored as an explicit rotation matrix so serialization is bit-exact.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub r: Matrix3<f64>,
    pub t: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            r: Matrix3::identity(),
            t: Vector3::zeros(),
        }
    }

    /// Yaw about +z plus a translation.
    pub fn from_yaw_xyz(yaw: f64, t: [f64; 3]) -> Self {
        let (s, c) = yaw.sin_cos();
        Pose {
            r: Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0),
            t: Vector3::new(t[0], t[1], t[2]),
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.r.transpose();
        Pose {
            r: rt,
            t: -(rt * self.t),
        }
    }

    /// self ∘ other: apply `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            r: self.r * other.r,
            t: self.r * other.t + self.t,
        }
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let q = self.r * Vector3::new(p[0], p[1], p[2]) + self.t;
        [q.x, q.y, q.z]
    }

    pub fn rotate(&self, v: [f64; 3]) -> [f64; 3] {
        let q = self.r * Vector3::new(v[0], v[1], v[2]);
        [q.x, q.y, q.z]
    }

    pub fn to_matrix(&self) -> Array2<f64> {
        let mut m = Array2::zeros((4, 4));
        for i in 0..3 {
            for j in 0..3 {
                m[[i, j]] = self.r[(i, j)];
            }
            m[[i, 3]] = self.t[i];
        }
        m[[3, 3]] = 1.0;
        m
    }

    pub fn from_matrix(m: &Array2<f64>) -> Result<Pose> {
        if m.shape() != [4, 4] {
            return Err(Error::Shape(format!(
                "pose matrix shaped {:?}, expected [4, 4]",
                m.shape()
            )));
        }
        if m[[3, 0]] != 0.0 || m[[3, 1]] != 0.0 || m[[3, 2]] != 0.0 || m[[3, 3]] != 1.0 {
            return Err(Error::Config("pose matrix bottom row is not (0,0,0,1)".into()));
        }
        let r = Matrix3::from_fn(|i, j| m[[i, j]]);
        let rtr = r.transpose() * r;
        if (rtr - Matrix3::identity()).abs().max() > 1e-9 || (r.determinant() - 1.0).abs() > 1e-9 {
            return Err(Error::Config("pose rotation block is not a rotation".into()));
        }
        Ok(Pose {
            r,
            t: Vector3::new(m[[0, 3]], m[[1, 3]], m[[2, 3]]),
        })
    }
}

/// Sensor mounting and imaging parameters shared by every frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorRig {
    pub beam: BeamConfig,
    /// LiDAR origin in the ego frame.
    pub lidar_mount: [f64; 3],
    /// Shared camera center in the ego frame.
    pub cam_mount: [f64; 3],
    /// Camera forward directions as yaw about +z, one entry per camera.
    pub cam_yaws: Vec<f64>,
    pub cam_fx: f64,
    pub cam_fy: f64,
    pub cam_width: usize,
    pub cam_height: usize,
}

impl SensorRig {
    /// Four 90°-spaced cameras with ~90° horizontal field of view.
    pub fn desk() -> Self {
        use std::f64::consts::FRAC_PI_2;
        SensorRig {
            beam: BeamConfig::desk(),
            lidar_mount: [0.0, 0.0, 1.8],
            cam_mount: [0.0, 0.0, 1.6],
            cam_yaws: vec![0.0, FRAC_PI_2, 2.0 * FRAC_PI_2, 3.0 * FRAC_PI_2],
            cam_fx: 32.0,
            cam_fy: 32.0,
            cam_width: 64,
            cam_height: 48,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cam_yaws.is_empty() {
            return Err(Error::Config("sensor rig needs at least one camera".into()));
        }
        if self.cam_width % 4 != 0 || self.cam_height % 4 != 0 {
            return Err(Error::Config(format!(
                "camera size {}x{} must be divisible by 4 for the image backbones",
                self.cam_width, self.cam_height
            )));
        }
        self.beam.validate()
    }
}

/// World-frame cameras for an ego pose, one per rig yaw.
pub fn camera_rig(pose: &Pose, rig: &SensorRig) -> Vec<Camera> {
    rig.cam_yaws
        .iter()
        .map(|&yaw| {
            let ego_cam = Camera::look_along(
                rig.cam_mount,
                yaw,
                rig.cam_fx,
                rig.cam_fy,
                rig.cam_width,
                rig.cam_height,
            );
            // p_cam = R_ego (R_pose^T p_world - R_pose^T t_pose) + t_ego
            let inv = pose.inverse();
            let r = ego_cam.r * inv.r;
            let t = ego_cam.r * inv.t + ego_cam.t;
            Camera::new(r, t, ego_cam.k, ego_cam.width, ego_cam.height)
                .expect("conjugated rig camera is valid")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pose_round_trip_is_bit_exact() {
        let p = Pose::from_yaw_xyz(0.7, [1.5, -2.0, 0.25]);
        let q = Pose::from_matrix(&p.to_matrix()).unwrap();
        assert_eq!(p, q);
        let i = p.compose(&p.inverse());
        let d = (i.r - Matrix3::identity()).abs().max();
        assert!(d < 1e-12 && i.t.norm() < 1e-12);
    }

    #[test]
    fn pose_compose_matches_sequential_application() {
        let a = Pose::from_yaw_xyz(0.3, [1.0, 0.0, 0.0]);
        let b = Pose::from_yaw_xyz(-1.1, [0.0, 2.0, 0.5]);
        let p = [0.4, -0.7, 1.2];
        let lhs = a.compose(&b).apply(p);
        let rhs = a.apply(b.apply(p));
        for k in 0..3 {
            assert!((lhs[k] - rhs[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn bad_pose_matrices_are_rejected() {
        let mut m = Pose::identity().to_matrix();
        m[[3, 3]] = 2.0;
        assert!(Pose::from_matrix(&m).is_err());
        let mut m = Pose::identity().to_matrix();
        m[[0, 0]] = 2.0;
        assert!(Pose::from_matrix(&m).is_err());
    }

    #[test]
    fn rig_cameras_follow_the_ego_pose() {
        let rig = SensorRig::desk();
        let at_origin = camera_rig(&Pose::identity(), &rig);
        assert_eq!(at_origin.len(), 4);

        // A point 5 m ahead of a translated+rotated ego must land on the same
        // pixel as the equivalent ego-frame point does for the origin rig.
        let pose = Pose::from_yaw_xyz(0.9, [3.0, -1.0, 0.0]);
        let moved = camera_rig(&pose, &rig);
        let p_ego = [5.0, 0.3, 1.2];
        let p_world = pose.apply(p_ego);
        let (u0, v0, d0) = at_origin[0].project(p_ego);
        let (u1, v1, d1) = moved[0].project(p_world);
        assert!((u0 - u1).abs() < 1e-9);
        assert!((v0 - v1).abs() < 1e-9);
        assert!((d0 - d1).abs() < 1e-9);
    }

    #[test]
    fn rig_rejects_unaligned_image_sizes() {
        let mut rig = SensorRig::desk();
        rig.cam_width = 62;
        assert!(rig.validate().is_err());
    }
}
