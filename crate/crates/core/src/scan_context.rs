//! Polar-context place-recognition descriptors.
//!
//! A descriptor is a `rings x sectors` matrix over the sensor's horizontal
//! plane. Each cell holds the maximum point height in that polar bin, shifted
//! up by the sensor height so that an empty cell (0) sits below every real
//! return. Comparing two descriptors searches all cyclic column shifts, which
//! makes the distance invariant to sensor yaw up to one sector.

use std::f64::consts::TAU;
use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::cloud::PointCloud;

pub const DESCRIPTOR_MAGIC: &[u8; 8] = b"SCDESC01";

/// Number of ring-key nearest neighbours passed to the exact comparison.
pub const RING_KEY_CANDIDATES: usize = 10;

/// Similarity threshold for accepting a descriptor match.
pub const DEFAULT_SIM_THRESHOLD: f64 = 0.6;

#[derive(Debug, Error)]
pub enum ScError {
    #[error("descriptor dimensions differ: {a_rings}x{a_sectors} vs {b_rings}x{b_sectors}")]
    DimensionMismatch { a_rings: usize, a_sectors: usize, b_rings: usize, b_sectors: usize },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScParams {
    pub rings: usize,
    pub sectors: usize,
    /// Points farther than this horizontal range are ignored (m).
    pub max_radius: f64,
    /// Added to every z before max-binning (m).
    pub sensor_height: f64,
}

impl Default for ScParams {
    fn default() -> Self {
        Self { rings: 20, sectors: 60, max_radius: 10.0, sensor_height: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor {
    rings: usize,
    sectors: usize,
    /// Row-major, one row per ring.
    matrix: Vec<f32>,
    ring_key: Vec<f32>,
    max_radius: f64,
}

impl Descriptor {
    /// Builds a descriptor from a raw matrix; the ring key is derived.
    pub fn from_matrix(rings: usize, sectors: usize, matrix: Vec<f32>, max_radius: f64) -> Self {
        assert_eq!(matrix.len(), rings * sectors, "matrix size must be rings * sectors");
        let ring_key = ring_key_of(rings, sectors, &matrix);
        Self { rings, sectors, matrix, ring_key, max_radius }
    }

    pub fn rings(&self) -> usize {
        self.rings
    }

    pub fn sectors(&self) -> usize {
        self.sectors
    }

    pub fn max_radius(&self) -> f64 {
        self.max_radius
    }

    pub fn matrix(&self) -> &[f32] {
        &self.matrix
    }

    pub fn ring_key(&self) -> &[f32] {
        &self.ring_key
    }

    pub fn get(&self, ring: usize, sector: usize) -> f32 {
        self.matrix[ring * self.sectors + sector]
    }

    /// Copy whose column `c + k` equals this descriptor's column `c`, i.e. the
    /// descriptor of the same scene seen by a sensor rotated by `-k` sectors.
    pub fn rotated(&self, k: usize) -> Descriptor {
        let s = self.sectors;
        let mut m = vec![0.0f32; self.matrix.len()];
        for r in 0..self.rings {
            for c in 0..s {
                m[r * s + (c + k) % s] = self.matrix[r * s + c];
            }
        }
        Descriptor::from_matrix(self.rings, s, m, self.max_radius)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * (self.matrix.len() + self.ring_key.len()));
        out.extend_from_slice(DESCRIPTOR_MAGIC);
        out.extend_from_slice(&(self.rings as u32).to_le_bytes());
        out.extend_from_slice(&(self.sectors as u32).to_le_bytes());
        for v in self.matrix.iter().chain(&self.ring_key) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses the `.dsc` layout. `max_radius` is not part of the file and is
    /// supplied by the session metadata.
    pub fn from_bytes(bytes: &[u8], max_radius: f64) -> Result<Descriptor, String> {
        if bytes.len() < 16 || &bytes[..8] != DESCRIPTOR_MAGIC {
            return Err("missing SCDESC01 magic".into());
        }
        let rings = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let sectors = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let expected = 4 * (rings * sectors + rings);
        let body = &bytes[16..];
        if body.len() != expected {
            return Err(format!("{rings}x{sectors} descriptor needs {expected} payload bytes, found {}", body.len()));
        }
        let floats: Vec<f32> = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let (matrix, ring_key) = floats.split_at(rings * sectors);
        Ok(Descriptor { rings, sectors, matrix: matrix.to_vec(), ring_key: ring_key.to_vec(), max_radius })
    }

    pub fn save(&self, path: &Path) -> Result<(), ScError> {
        fs::write(path, self.to_bytes()).map_err(|source| ScError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path, max_radius: f64) -> Result<Descriptor, ScError> {
        let bytes = fs::read(path).map_err(|source| ScError::Io { path: path.display().to_string(), source })?;
        Descriptor::from_bytes(&bytes, max_radius).map_err(|msg| ScError::Format { path: path.display().to_string(), msg })
    }
}

fn ring_key_of(rings: usize, sectors: usize, matrix: &[f32]) -> Vec<f32> {
    (0..rings)
        .map(|r| {
            let row = &matrix[r * sectors..(r + 1) * sectors];
            row.iter().filter(|&&v| v != 0.0).count() as f32 / sectors as f32
        })
        .collect()
}

/// Bins a sensor-frame cloud into a descriptor.
pub fn compute_descriptor(cloud: &PointCloud, params: &ScParams) -> Descriptor {
    let (rings, sectors) = (params.rings, params.sectors);
    let ring_width = params.max_radius / rings as f64;
    let sector_width = TAU / sectors as f64;
    let mut matrix = vec![0.0f64; rings * sectors];
    for p in cloud.iter_f64() {
        let range = p.x.hypot(p.y);
        if range > params.max_radius {
            continue;
        }
        let mut azimuth = p.y.atan2(p.x);
        if azimuth < 0.0 {
            azimuth += TAU;
        }
        let ring = ((range / ring_width) as usize).min(rings - 1);
        let sector = ((azimuth / sector_width) as usize).min(sectors - 1);
        let cell = &mut matrix[ring * sectors + sector];
        *cell = cell.max(p.z + params.sensor_height);
    }
    let matrix: Vec<f32> = matrix.into_iter().map(|v| v as f32).collect();
    Descriptor::from_matrix(rings, sectors, matrix, params.max_radius)
}

fn check_dims(a: &Descriptor, b: &Descriptor) -> Result<(), ScError> {
    if a.rings != b.rings || a.sectors != b.sectors {
        return Err(ScError::DimensionMismatch { a_rings: a.rings, a_sectors: a.sectors, b_rings: b.rings, b_sectors: b.sectors });
    }
    Ok(())
}

/// Column-wise cosine distance minimised over cyclic shifts of `b`.
///
/// Returns `(distance, shift)` where `shift = k` means column `c` of `a`
/// lines up with column `c + k` of `b`. Column pairs where either column is
/// all zero are skipped; if every pair is skipped the distance is 1.
pub fn descriptor_distance(a: &Descriptor, b: &Descriptor) -> Result<(f64, usize), ScError> {
    check_dims(a, b)?;
    let (rings, sectors) = (a.rings, a.sectors);
    let column = |d: &Descriptor, c: usize| -> Vec<f64> { (0..rings).map(|r| d.matrix[r * sectors + c] as f64).collect() };
    let cols_a: Vec<Vec<f64>> = (0..sectors).map(|c| column(a, c)).collect();
    let cols_b: Vec<Vec<f64>> = (0..sectors).map(|c| column(b, c)).collect();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let norms_a: Vec<f64> = cols_a.iter().map(|c| norm(c)).collect();
    let norms_b: Vec<f64> = cols_b.iter().map(|c| norm(c)).collect();

    let mut best = (f64::INFINITY, 0usize);
    for shift in 0..sectors {
        let mut sum = 0.0;
        let mut count = 0usize;
        for c in 0..sectors {
            let cb = (c + shift) % sectors;
            let (na, nb) = (norms_a[c], norms_b[cb]);
            if na == 0.0 || nb == 0.0 {
                continue;
            }
            let dot: f64 = cols_a[c].iter().zip(&cols_b[cb]).map(|(x, y)| x * y).sum();
            sum += 1.0 - dot / (na * nb);
            count += 1;
        }
        let dist = if count == 0 { 1.0 } else { (sum / count as f64).clamp(0.0, 1.0) };
        if dist < best.0 {
            best = (dist, shift);
        }
    }
    Ok(best)
}

/// A database entry returned by [`query`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScMatch {
    pub index: usize,
    /// `1 - distance`.
    pub similarity: f64,
    /// Best column shift of the probe relative to the database entry.
    pub shift: usize,
}

/// Ring-key prefilter followed by exact comparison.
///
/// Entries with mismatched dimensions are skipped. Results with similarity
/// at least `sim_threshold` are returned best first (ties by index), at most
/// `top_k` of them.
pub fn query(db: &[Descriptor], probe: &Descriptor, sim_threshold: f64, top_k: usize) -> Vec<ScMatch> {
    let key_dist = |d: &Descriptor| -> f64 { d.ring_key.iter().zip(&probe.ring_key).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum::<f64>().sqrt() };
    let mut shortlist: Vec<(f64, usize)> =
        db.iter().enumerate().filter(|(_, d)| d.rings == probe.rings && d.sectors == probe.sectors).map(|(i, d)| (key_dist(d), i)).collect();
    shortlist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    shortlist.truncate(RING_KEY_CANDIDATES);

    let mut out: Vec<ScMatch> = shortlist
        .into_iter()
        .filter_map(|(_, index)| {
            let (dist, shift) = descriptor_distance(&db[index], probe).ok()?;
            let similarity = 1.0 - dist;
            (similarity >= sim_threshold).then_some(ScMatch { index, similarity, shift })
        })
        .collect();
    out.sort_by(|a, b| b.similarity.total_cmp(&a.similarity).then(a.index.cmp(&b.index)));
    out.truncate(top_k);
    out
}
