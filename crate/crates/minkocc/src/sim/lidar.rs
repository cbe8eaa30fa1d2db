//! Ring-pattern LiDAR simulation and multi-sweep accumulation.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::raycast::first_hit;
use super::scene::Scene;
use super::Pose;
use crate::error::{Error, Result};
use crate::fusion::PointCloud;

/// Ring-and-azimuth scan pattern with Gaussian range noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub rings: usize,
    pub azimuth_steps: usize,
    /// Elevation of the lowest ring, radians.
    pub elevation_min: f64,
    /// Elevation of the highest ring, radians.
    pub elevation_max: f64,
    pub max_range: f64,
    pub sigma_r: f64,
}

impl BeamConfig {
    pub fn desk() -> Self {
        BeamConfig {
            rings: 16,
            azimuth_steps: 180,
            elevation_min: -25f64.to_radians(),
            elevation_max: 3f64.to_radians(),
            max_range: 30.0,
            sigma_r: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rings == 0 || self.azimuth_steps == 0 {
            return Err(Error::Config("beam pattern needs rings and azimuth steps".into()));
        }
        if self.elevation_min > self.elevation_max {
            return Err(Error::Config("beam elevation range is inverted".into()));
        }
        if self.max_range <= 0.0 || self.sigma_r < 0.0 {
            return Err(Error::Config("beam range/noise must be positive".into()));
        }
        Ok(())
    }

    fn ring_elevation(&self, ring: usize) -> f64 {
        if self.rings == 1 {
            return self.elevation_min;
        }
        let f = ring as f64 / (self.rings - 1) as f64;
        self.elevation_min + f * (self.elevation_max - self.elevation_min)
    }

    /// Unit directions in the sensor frame, ring-major then azimuth.
    pub fn directions(&self) -> Vec<[f64; 3]> {
        let mut dirs = Vec::with_capacity(self.rings * self.azimuth_steps);
        for ring in 0..self.rings {
            let elev = self.ring_elevation(ring);
            let (se, ce) = elev.sin_cos();
            for k in 0..self.azimuth_steps {
                let az = std::f64::consts::TAU * k as f64 / self.azimuth_steps as f64;
                let (sa, ca) = az.sin_cos();
                dirs.push([ce * ca, ce * sa, se]);
            }
        }
        dirs
    }
}

/// Reflectance stand-in: a fixed level per semantic class.
pub fn class_intensity(class: i32) -> f64 {
    (0.15 + 0.05 * class as f64).clamp(0.0, 1.0)
}

/// Casts the beam pattern from `pose`'s sensor origin and returns the hits as
/// a cloud in that pose's ego frame, attrs = intensity. Rays without a hit
/// inside `max_range` produce no point.
pub fn simulate_lidar(
    scene: &Scene,
    pose: &Pose,
    lidar_mount: [f64; 3],
    beam: &BeamConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PointCloud> {
    beam.validate()?;
    let origin = pose.apply(lidar_mount);
    let inv = pose.inverse();
    let mut xyz = Vec::new();
    let mut attrs = Vec::new();
    for dir_sensor in beam.directions() {
        let dir = pose.rotate(dir_sensor);
        let Some(hit) = first_hit(scene, origin, dir) else {
            continue;
        };
        if hit.t > beam.max_range {
            continue;
        }
        let range = if beam.sigma_r > 0.0 {
            let n: f64 = rng.sample(StandardNormal);
            hit.t + beam.sigma_r * n
        } else {
            hit.t
        };
        let world = [
            origin[0] + range * dir[0],
            origin[1] + range * dir[1],
            origin[2] + range * dir[2],
        ];
        let p = inv.apply(world);
        xyz.extend_from_slice(&p);
        attrs.push(class_intensity(hit.class));
    }
    let n = attrs.len();
    PointCloud::new(
        Array2::from_shape_vec((n, 3), xyz).expect("xyz triples"),
        Array2::from_shape_vec((n, 1), attrs).expect("intensity column"),
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sweep {
    pub cloud: PointCloud,
    pub pose: Pose,
    /// Seconds relative to the current frame (current = 0, past negative).
    pub timestamp: f64,
}

/// Current sweep plus K past sweeps, most recent past first.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepSet {
    pub current: Sweep,
    pub past: Vec<Sweep>,
}

impl SweepSet {
    pub fn new(current: Sweep, past: Vec<Sweep>) -> Result<Self> {
        let mut prev = current.timestamp;
        for (k, s) in past.iter().enumerate() {
            if s.timestamp >= prev {
                return Err(Error::Config(format!(
                    "sweep timestamps must strictly decrease into the past; past[{k}] has {} after {}",
                    s.timestamp, prev
                )));
            }
            prev = s.timestamp;
        }
        Ok(SweepSet { current, past })
    }

    pub fn len(&self) -> usize {
        self.past.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Concatenates every sweep in the current ego frame and appends a sweep-age
/// column (seconds behind the current sweep) to the attributes.
pub fn accumulate_sweeps(set: &SweepSet) -> Result<PointCloud> {
    let inv = set.current.pose.inverse();
    let mut xyz = Vec::new();
    let mut attrs = Vec::new();
    let attr_dim = set.current.cloud.attrs.shape()[1];
    let mut push = |sweep: &Sweep| -> Result<()> {
        if sweep.cloud.attrs.shape()[1] != attr_dim {
            return Err(Error::Shape(format!(
                "sweeps disagree on attribute width: {} vs {attr_dim}",
                sweep.cloud.attrs.shape()[1]
            )));
        }
        let rel = inv.compose(&sweep.pose);
        let age = set.current.timestamp - sweep.timestamp;
        for i in 0..sweep.cloud.len() {
            let p = rel.apply(sweep.cloud.point(i));
            xyz.extend_from_slice(&p);
            for a in 0..attr_dim {
                attrs.push(sweep.cloud.attrs[[i, a]]);
            }
            attrs.push(age);
        }
        Ok(())
    };
    push(&set.current)?;
    for sweep in &set.past {
        push(sweep)?;
    }
    let n = xyz.len() / 3;
    PointCloud::new(
        Array2::from_shape_vec((n, 3), xyz).expect("xyz triples"),
        Array2::from_shape_vec((n, attr_dim + 1), attrs).expect("attr rows"),
    )
}
