use nalgebra::{Point3, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::cloud::PointCloud;
use crate::geometry::MeshIndex;
use crate::se3::Pose;

/// Spinning multi-beam LiDAR.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LidarSpec {
    pub channels: usize,
    /// Lowest and highest beam elevation (degrees). With one channel the
    /// beam sits at the midpoint.
    pub vertical_fov_deg: (f64, f64),
    pub horizontal_steps: usize,
    pub max_range: f64,
    /// Standard deviation of additive range noise (m).
    pub noise_sigma: f64,
}

impl Default for LidarSpec {
    /// A 16-beam, +/-15 degree spinning sensor.
    fn default() -> Self {
        Self { channels: 16, vertical_fov_deg: (-15.0, 15.0), horizontal_steps: 900, max_range: 30.0, noise_sigma: 0.01 }
    }
}

impl LidarSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.channels == 0 || self.horizontal_steps == 0 {
            return Err("lidar needs at least one channel and one horizontal step".into());
        }
        if !(self.max_range > 0.0) {
            return Err(format!("max_range must be positive, got {}", self.max_range));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(format!("noise_sigma must be nonnegative, got {}", self.noise_sigma));
        }
        if self.vertical_fov_deg.0 > self.vertical_fov_deg.1 {
            return Err("vertical field of view is inverted".into());
        }
        Ok(())
    }

    pub fn elevations_rad(&self) -> Vec<f64> {
        let (lo, hi) = self.vertical_fov_deg;
        if self.channels == 1 {
            return vec![(0.5 * (lo + hi)).to_radians()];
        }
        let step = (hi - lo) / (self.channels - 1) as f64;
        (0..self.channels).map(|c| (lo + step * c as f64).to_radians()).collect()
    }

    /// Unit beam directions in the sensor frame, channel-major.
    pub fn beam_directions(&self) -> Vec<Vector3<f64>> {
        let elevations = self.elevations_rad();
        let mut out = Vec::with_capacity(self.channels * self.horizontal_steps);
        for e in elevations {
            for h in 0..self.horizontal_steps {
                let az = std::f64::consts::TAU * h as f64 / self.horizontal_steps as f64;
                out.push(Vector3::new(e.cos() * az.cos(), e.cos() * az.sin(), e.sin()));
            }
        }
        out
    }
}

/// Casts every beam from `pose` and returns the hits in the sensor frame.
///
/// The nearest surface within `max_range` is taken; Gaussian noise is added
/// along the beam. Beams that miss are omitted.
pub fn raycast_scan<R: Rng>(index: &MeshIndex, pose: &Pose, spec: &LidarSpec, rng: &mut R) -> PointCloud {
    let noise = (spec.noise_sigma > 0.0).then(|| Normal::new(0.0, spec.noise_sigma).unwrap());
    let origin = Point3::from(*pose.translation());
    let mut points = Vec::new();
    for dir in spec.beam_directions() {
        let world_dir = pose.transform_vector(&dir);
        if let Some(range) = index.raycast(&origin, &world_dir, spec.max_range) {
            let r = match &noise {
                Some(n) => (range + n.sample(rng)).max(0.0),
                None => range,
            };
            points.push(Point3::from(dir * r).cast::<f32>());
        }
    }
    PointCloud::new(points)
}
