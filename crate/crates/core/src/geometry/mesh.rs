//! Triangles, indexed meshes and the OBJ subset used for model and change exports.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use nalgebra::{Point3, Vector3};
use thiserror::Error;

use crate::textfmt::fmt_sig;

/// Triangles with area at or below this are rejected as degenerate.
pub const MIN_TRIANGLE_AREA: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("triangle {index} is invalid: {msg}")]
    InvalidTriangle { index: usize, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triangle {
    pub a: Point3<f64>,
    pub b: Point3<f64>,
    pub c: Point3<f64>,
}

impl Triangle {
    pub fn new(a: Point3<f64>, b: Point3<f64>, c: Point3<f64>) -> Self {
        Self { a, b, c }
    }

    pub fn area(&self) -> f64 {
        0.5 * (self.b - self.a).cross(&(self.c - self.a)).norm()
    }

    pub fn centroid(&self) -> Point3<f64> {
        Point3::from((self.a.coords + self.b.coords + self.c.coords) / 3.0)
    }

    pub fn vertices(&self) -> [Point3<f64>; 3] {
        [self.a, self.b, self.c]
    }

    /// Closest point on the triangle to `p` (Voronoi-region walk).
    pub fn closest_point(&self, p: &Point3<f64>) -> Point3<f64> {
        let (a, b, c) = (self.a, self.b, self.c);
        let ab = b - a;
        let ac = c - a;
        let ap = p - a;
        let d1 = ab.dot(&ap);
        let d2 = ac.dot(&ap);
        if d1 <= 0.0 && d2 <= 0.0 {
            return a;
        }
        let bp = p - b;
        let d3 = ab.dot(&bp);
        let d4 = ac.dot(&bp);
        if d3 >= 0.0 && d4 <= d3 {
            return b;
        }
        let vc = d1 * d4 - d3 * d2;
        if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
            let v = d1 / (d1 - d3);
            return a + ab * v;
        }
        let cp = p - c;
        let d5 = ab.dot(&cp);
        let d6 = ac.dot(&cp);
        if d6 >= 0.0 && d5 <= d6 {
            return c;
        }
        let vb = d5 * d2 - d1 * d6;
        if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
            let w = d2 / (d2 - d6);
            return a + ac * w;
        }
        let va = d3 * d6 - d5 * d4;
        if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
            let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
            return b + (c - b) * w;
        }
        let denom = 1.0 / (va + vb + vc);
        let v = vb * denom;
        let w = vc * denom;
        a + ab * v + ac * w
    }

    /// Ray parameter of the intersection with `origin + t * dir`, if any with `t > 0`.
    pub fn intersect_ray(&self, origin: &Point3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let e1 = self.b - self.a;
        let e2 = self.c - self.a;
        let h = dir.cross(&e2);
        let det = e1.dot(&h);
        if det.abs() < 1e-14 {
            return None;
        }
        let inv = 1.0 / det;
        let s = origin - self.a;
        let u = inv * s.dot(&h);
        if !(0.0..=1.0).contains(&u) {
            return None;
        }
        let q = s.cross(&e1);
        let v = inv * dir.dot(&q);
        if v < 0.0 || u + v > 1.0 {
            return None;
        }
        let t = inv * e2.dot(&q);
        (t > 1e-9).then_some(t)
    }
}

/// Axis-aligned bounding box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Point3<f64>,
    pub max: Point3<f64>,
}

impl Aabb {
    pub fn empty() -> Self {
        Self { min: Point3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY), max: Point3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY) }
    }

    pub fn is_empty(&self) -> bool {
        self.min.x > self.max.x
    }

    pub fn grow(&mut self, p: &Point3<f64>) {
        self.min = self.min.inf(p);
        self.max = self.max.sup(p);
    }

    pub fn merge(&mut self, other: &Aabb) {
        self.min = self.min.inf(&other.min);
        self.max = self.max.sup(&other.max);
    }

    pub fn of_points<'a>(points: impl IntoIterator<Item = &'a Point3<f64>>) -> Self {
        let mut b = Aabb::empty();
        for p in points {
            b.grow(p);
        }
        b
    }

    /// Squared distance from `p` to the box (zero inside).
    pub fn distance2(&self, p: &Point3<f64>) -> f64 {
        let mut d2 = 0.0;
        for a in 0..3 {
            let v = p[a];
            if v < self.min[a] {
                d2 += (self.min[a] - v).powi(2);
            } else if v > self.max[a] {
                d2 += (v - self.max[a]).powi(2);
            }
        }
        d2
    }

    /// Slab test; returns the entry parameter when the ray meets the box within `[0, t_max]`.
    pub fn ray_entry(&self, origin: &Point3<f64>, inv_dir: &Vector3<f64>, t_max: f64) -> Option<f64> {
        let mut t0 = 0.0f64;
        let mut t1 = t_max;
        for a in 0..3 {
            let mut lo = (self.min[a] - origin[a]) * inv_dir[a];
            let mut hi = (self.max[a] - origin[a]) * inv_dir[a];
            if lo > hi {
                std::mem::swap(&mut lo, &mut hi);
            }
            // NaN from 0 * inf means the ray lies in the slab plane; keep it.
            if lo.is_nan() || hi.is_nan() {
                continue;
            }
            t0 = t0.max(lo);
            t1 = t1.min(hi);
            if t0 > t1 {
                return None;
            }
        }
        Some(t0)
    }

    pub fn center(&self) -> Point3<f64> {
        nalgebra::center(&self.min, &self.max)
    }
}

/// Indexed triangle mesh (shared vertices).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Point3<f64>>,
    pub faces: Vec<[usize; 3]>,
}

impl TriangleMesh {
    pub fn triangle(&self, f: usize) -> Triangle {
        let [a, b, c] = self.faces[f];
        Triangle::new(self.vertices[a], self.vertices[b], self.vertices[c])
    }

    pub fn triangles(&self) -> impl Iterator<Item = Triangle> + '_ {
        (0..self.faces.len()).map(|f| self.triangle(f))
    }

    pub fn surface_area(&self) -> f64 {
        self.triangles().map(|t| t.area()).sum()
    }

    /// Appends `other`, offsetting its vertex indices.
    pub fn append(&mut self, other: &TriangleMesh) {
        let base = self.vertices.len();
        self.vertices.extend_from_slice(&other.vertices);
        self.faces.extend(other.faces.iter().map(|f| [f[0] + base, f[1] + base, f[2] + base]));
    }

    pub fn to_obj(&self) -> String {
        let mut s = String::new();
        for v in &self.vertices {
            let _ = writeln!(s, "v {} {} {}", fmt_sig(v.x), fmt_sig(v.y), fmt_sig(v.z));
        }
        for f in &self.faces {
            let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
        }
        s
    }

    /// Parses `v` and `f` lines; polygons are fan-triangulated, other
    /// statements (`vn`, `vt`, `o`, `g`, ...) are ignored.
    pub fn from_obj(text: &str) -> Result<TriangleMesh, MeshError> {
        let mut mesh = TriangleMesh::default();
        let mut pending: Vec<(usize, Vec<i64>)> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            let mut parts = content.split_whitespace();
            match parts.next() {
                Some("v") => {
                    let coords: Vec<f64> = parts
                        .take(3)
                        .map(|t| t.parse::<f64>())
                        .collect::<Result<_, _>>()
                        .map_err(|e| MeshError::Parse { line, msg: format!("bad vertex: {e}") })?;
                    if coords.len() != 3 || coords.iter().any(|c| !c.is_finite()) {
                        return Err(MeshError::Parse { line, msg: "vertex needs three finite coordinates".into() });
                    }
                    mesh.vertices.push(Point3::new(coords[0], coords[1], coords[2]));
                }
                Some("f") => {
                    let idx: Vec<i64> = parts
                        .map(|t| t.split('/').next().unwrap_or("").parse::<i64>())
                        .collect::<Result<_, _>>()
                        .map_err(|e| MeshError::Parse { line, msg: format!("bad face index: {e}") })?;
                    if idx.len() < 3 {
                        return Err(MeshError::Parse { line, msg: "face needs at least three vertices".into() });
                    }
                    // Negative indices are relative to the vertices read so far.
                    let resolved = idx.iter().map(|&i| if i < 0 { mesh.vertices.len() as i64 + i + 1 } else { i }).collect();
                    pending.push((line, resolved));
                }
                _ => {}
            }
        }
        let n = mesh.vertices.len() as i64;
        for (line, idx) in pending {
            if let Some(bad) = idx.iter().find(|&&i| i < 1 || i > n) {
                return Err(MeshError::Parse { line, msg: format!("face references vertex {bad} of {n}") });
            }
            for k in 1..idx.len() - 1 {
                mesh.faces.push([(idx[0] - 1) as usize, (idx[k] - 1) as usize, (idx[k + 1] - 1) as usize]);
            }
        }
        Ok(mesh)
    }

    pub fn save_obj(&self, path: &Path) -> Result<(), MeshError> {
        fs::write(path, self.to_obj()).map_err(|source| MeshError::Io { path: path.display().to_string(), source })
    }
}

/// Building model: a soup of triangles in the world frame, already reduced
/// to permanent structure.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BuildingModel {
    triangles: Vec<Triangle>,
}

impl BuildingModel {
    /// Validates that every vertex is finite and every triangle has positive area.
    /// An empty model is accepted; operations that need geometry report it.
    pub fn new(triangles: Vec<Triangle>) -> Result<Self, MeshError> {
        for (index, t) in triangles.iter().enumerate() {
            if t.vertices().iter().any(|v| !v.iter().all(|c| c.is_finite())) {
                return Err(MeshError::InvalidTriangle { index, msg: "non-finite vertex".into() });
            }
            let area = t.area();
            if area.is_nan() || area <= MIN_TRIANGLE_AREA {
                return Err(MeshError::InvalidTriangle { index, msg: format!("area {area:e} m^2 is degenerate") });
            }
        }
        Ok(Self { triangles })
    }

    /// Like [`BuildingModel::new`] but silently drops degenerate triangles,
    /// which exporters commonly leave behind.
    pub fn from_mesh_lenient(mesh: &TriangleMesh) -> Self {
        Self { triangles: mesh.triangles().filter(|t| t.area() > MIN_TRIANGLE_AREA).collect() }
    }

    pub fn from_mesh(mesh: &TriangleMesh) -> Result<Self, MeshError> {
        Self::new(mesh.triangles().collect())
    }

    pub fn triangles(&self) -> &[Triangle] {
        &self.triangles
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn bounds(&self) -> Aabb {
        let mut b = Aabb::empty();
        for t in &self.triangles {
            for v in t.vertices() {
                b.grow(&v);
            }
        }
        b
    }

    pub fn extend(&mut self, other: &BuildingModel) {
        self.triangles.extend_from_slice(&other.triangles);
    }

    pub fn load_obj(path: &Path) -> Result<Self, MeshError> {
        let text = fs::read_to_string(path).map_err(|source| MeshError::Io { path: path.display().to_string(), source })?;
        Self::from_mesh(&TriangleMesh::from_obj(&text)?)
    }

    /// Triangle soup export, three fresh vertices per triangle.
    pub fn to_mesh(&self) -> TriangleMesh {
        let mut mesh = TriangleMesh::default();
        for t in &self.triangles {
            let base = mesh.vertices.len();
            mesh.vertices.extend_from_slice(&t.vertices());
            mesh.faces.push([base, base + 1, base + 2]);
        }
        mesh
    }
}
