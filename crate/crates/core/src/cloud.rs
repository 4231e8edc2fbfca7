//! Point clouds and their binary file format.
//!
//! File layout (little-endian): the 8-byte magic `PCXYZ001`, a `u32` point
//! count, then `count * 3` `f32` coordinates.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io;
use std::path::Path;

use nalgebra::Point3;
use thiserror::Error;

use crate::se3::Pose;

pub const CLOUD_MAGIC: &[u8; 8] = b"PCXYZ001";

#[derive(Debug, Error)]
pub enum CloudError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },
}

/// Points in meters. Coordinates are stored as `f32`, matching the file format.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point3<f32>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3<f32>>) -> Self {
        Self { points }
    }

    pub fn from_f64(points: impl IntoIterator<Item = Point3<f64>>) -> Self {
        Self { points: points.into_iter().map(|p| p.cast::<f32>()).collect() }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.points.iter().all(|p| p.x.is_finite() && p.y.is_finite() && p.z.is_finite())
    }

    pub fn iter_f64(&self) -> impl Iterator<Item = Point3<f64>> + '_ {
        self.points.iter().map(|p| p.cast::<f64>())
    }

    pub fn to_f64(&self) -> Vec<Point3<f64>> {
        self.iter_f64().collect()
    }

    /// Applies `pose` to every point (sensor frame to the pose's parent frame).
    pub fn transformed(&self, pose: &Pose) -> PointCloud {
        PointCloud::from_f64(self.iter_f64().map(|p| pose.transform_point(&p)))
    }

    pub fn extend_from(&mut self, other: &PointCloud) {
        self.points.extend_from_slice(&other.points);
    }

    /// Replaces the points falling in each `voxel`-sized cell by their centroid.
    /// Output order follows the first point seen in each cell.
    pub fn voxel_downsample(&self, voxel: f64) -> PointCloud {
        assert!(voxel > 0.0, "voxel size must be positive");
        let mut slots: HashMap<[i64; 3], usize> = HashMap::new();
        let mut sums: Vec<([f64; 3], usize)> = Vec::new();
        for p in self.iter_f64() {
            let key = [(p.x / voxel).floor() as i64, (p.y / voxel).floor() as i64, (p.z / voxel).floor() as i64];
            let slot = *slots.entry(key).or_insert_with(|| {
                sums.push(([0.0; 3], 0));
                sums.len() - 1
            });
            let (acc, n) = &mut sums[slot];
            acc[0] += p.x;
            acc[1] += p.y;
            acc[2] += p.z;
            *n += 1;
        }
        PointCloud::from_f64(sums.into_iter().map(|(acc, n)| {
            let n = n as f64;
            Point3::new(acc[0] / n, acc[1] / n, acc[2] / n)
        }))
    }

    /// Keeps the first point falling in each `voxel`-sized cell, unchanged.
    pub fn voxel_subsample(&self, voxel: f64) -> PointCloud {
        assert!(voxel > 0.0, "voxel size must be positive");
        let mut seen: HashSet<[i64; 3]> = HashSet::new();
        let points = self
            .points
            .iter()
            .filter(|p| {
                let key = [(p.x as f64 / voxel).floor() as i64, (p.y as f64 / voxel).floor() as i64, (p.z as f64 / voxel).floor() as i64];
                seen.insert(key)
            })
            .copied()
            .collect();
        PointCloud::new(points)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.points.len() * 12);
        out.extend_from_slice(CLOUD_MAGIC);
        out.extend_from_slice(&(self.points.len() as u32).to_le_bytes());
        for p in &self.points {
            for c in [p.x, p.y, p.z] {
                out.extend_from_slice(&c.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<PointCloud, String> {
        if bytes.len() < 12 || &bytes[..8] != CLOUD_MAGIC {
            return Err("missing PCXYZ001 magic".into());
        }
        let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = &bytes[12..];
        if body.len() != count * 12 {
            return Err(format!("header declares {count} points but payload holds {} bytes", body.len()));
        }
        let points = body
            .chunks_exact(12)
            .map(|c| {
                let f = |i: usize| f32::from_le_bytes(c[i..i + 4].try_into().unwrap());
                Point3::new(f(0), f(4), f(8))
            })
            .collect();
        let cloud = PointCloud { points };
        if !cloud.is_finite() {
            return Err("non-finite coordinate".into());
        }
        Ok(cloud)
    }

    pub fn save(&self, path: &Path) -> Result<(), CloudError> {
        fs::write(path, self.to_bytes()).map_err(|source| CloudError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<PointCloud, CloudError> {
        let bytes = fs::read(path).map_err(|source| CloudError::Io { path: path.display().to_string(), source })?;
        PointCloud::from_bytes(&bytes).map_err(|msg| CloudError::Format { path: path.display().to_string(), msg })
    }
}
