//! Positive differences between an aligned map and the building model.
//!
//! Points near the model confirm it; points farther than a threshold are
//! grouped with DBSCAN and every group is turned into a mesh of voxel cubes.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::Point3;
use rayon::prelude::*;
use thiserror::Error;

use crate::cloud::PointCloud;
use crate::geometry::{Aabb, BuildingModel, KdTree, MeshIndex, TriangleMesh};
use crate::textfmt::fmt3;

#[derive(Debug, Error)]
pub enum ChangeError {
    #[error("building model has no triangles")]
    EmptyModel,
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChangeParams {
    /// Points farther than this from the model are positive (m).
    pub threshold: f64,
    pub eps: f64,
    pub min_pts: usize,
    pub voxel: f64,
    /// Only positive points with `z` in this band are clustered.
    pub crop_z: Option<(f64, f64)>,
}

impl Default for ChangeParams {
    fn default() -> Self {
        Self { threshold: 0.15, eps: 0.3, min_pts: 10, voxel: 0.1, crop_z: None }
    }
}

impl ChangeParams {
    pub fn validate(&self) -> Result<(), ChangeError> {
        check_threshold(self.threshold)?;
        check_dbscan(self.eps, self.min_pts)?;
        check_voxel(self.voxel)?;
        if let Some((a, b)) = self.crop_z {
            if !(a.is_finite() && b.is_finite() && a < b) {
                return Err(ChangeError::InvalidParam(format!("crop band {a},{b} must satisfy a < b")));
            }
        }
        Ok(())
    }
}

fn check_threshold(t: f64) -> Result<(), ChangeError> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(ChangeError::InvalidParam(format!("threshold must be positive, got {t}")))
    }
}

fn check_dbscan(eps: f64, min_pts: usize) -> Result<(), ChangeError> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(ChangeError::InvalidParam(format!("eps must be positive, got {eps}")));
    }
    if min_pts == 0 {
        return Err(ChangeError::InvalidParam("min_pts must be at least 1".into()));
    }
    Ok(())
}

fn check_voxel(v: f64) -> Result<(), ChangeError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(ChangeError::InvalidParam(format!("voxel must be positive, got {v}")))
    }
}

/// Unsigned distance from `p` to the closest model triangle.
pub fn point_mesh_distance(p: &Point3<f64>, index: &MeshIndex) -> Result<f64, ChangeError> {
    index.distance(p).ok_or(ChangeError::EmptyModel)
}

/// Split of a map into points near the model and points away from it.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Classified {
    pub confirmed: PointCloud,
    pub positive: PointCloud,
}

/// Points with distance `<= threshold` are confirmed, the rest positive.
/// Input order is kept within each part.
pub fn classify(map: &PointCloud, index: &MeshIndex, threshold: f64) -> Result<Classified, ChangeError> {
    check_threshold(threshold)?;
    if index.is_empty() {
        return Err(ChangeError::EmptyModel);
    }
    let near: Vec<bool> = map.points.par_iter().map(|p| index.distance(&p.cast::<f64>()).is_some_and(|d| d <= threshold)).collect();
    let mut out = Classified::default();
    for (p, n) in map.points.iter().zip(near) {
        if n {
            out.confirmed.points.push(*p);
        } else {
            out.positive.points.push(*p);
        }
    }
    Ok(out)
}

/// DBSCAN result; indices refer to the input slice.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Clustering {
    /// Each cluster ascending, clusters ordered by their lowest index.
    pub clusters: Vec<Vec<usize>>,
    pub noise: Vec<usize>,
}

fn lex_less(a: &Point3<f64>, b: &Point3<f64>) -> bool {
    (a.x, a.y, a.z) < (b.x, b.y, b.z)
}

/// Density clustering.
///
/// A point is core when at least `min_pts` points, itself included, lie
/// within `eps`. Core points within `eps` of each other share a cluster. A
/// non-core point within `eps` of a core point joins the cluster of its
/// nearest core point, ties going to the lexicographically smallest
/// coordinates, so the partition does not depend on input order.
pub fn dbscan(points: &[Point3<f64>], eps: f64, min_pts: usize) -> Result<Clustering, ChangeError> {
    check_dbscan(eps, min_pts)?;
    let n = points.len();
    let tree = KdTree::new(points);
    let neighbors: Vec<Vec<usize>> = points.par_iter().map(|p| tree.within_radius(p, eps)).collect();
    let core: Vec<bool> = neighbors.iter().map(|nb| nb.len() >= min_pts).collect();

    let mut label = vec![usize::MAX; n];
    let mut n_clusters = 0;
    for seed in 0..n {
        if !core[seed] || label[seed] != usize::MAX {
            continue;
        }
        label[seed] = n_clusters;
        let mut stack = vec![seed];
        while let Some(u) = stack.pop() {
            for &v in &neighbors[u] {
                if core[v] && label[v] == usize::MAX {
                    label[v] = n_clusters;
                    stack.push(v);
                }
            }
        }
        n_clusters += 1;
    }
    for i in 0..n {
        if core[i] {
            continue;
        }
        let mut best: Option<(f64, usize)> = None;
        for &c in neighbors[i].iter().filter(|&&c| core[c]) {
            let d2 = (points[c] - points[i]).norm_squared();
            let better = match best {
                None => true,
                Some((bd, b)) => d2 < bd || (d2 == bd && lex_less(&points[c], &points[b])),
            };
            if better {
                best = Some((d2, c));
            }
        }
        if let Some((_, c)) = best {
            label[i] = label[c];
        }
    }
    let mut clusters = vec![Vec::new(); n_clusters];
    let mut noise = Vec::new();
    for (i, &l) in label.iter().enumerate() {
        if l == usize::MAX {
            noise.push(i);
        } else {
            clusters[l].push(i);
        }
    }
    clusters.sort_by_key(|c| c[0]);
    Ok(Clustering { clusters, noise })
}

type Voxel = [i64; 3];

fn voxel_of(p: &Point3<f64>, voxel: f64) -> Voxel {
    [(p.x / voxel).floor() as i64, (p.y / voxel).floor() as i64, (p.z / voxel).floor() as i64]
}

/// Voxels containing at least one point.
pub fn occupied_voxels(points: &[Point3<f64>], voxel: f64) -> BTreeSet<Voxel> {
    points.iter().map(|p| voxel_of(p, voxel)).collect()
}

/// Quad corners of the boundary face of a unit cube in direction `axis`,
/// `positive`, ordered counter-clockwise seen from outside.
fn face_corners(v: Voxel, axis: usize, positive: bool) -> [Voxel; 4] {
    let (a1, a2) = ((axis + 1) % 3, (axis + 2) % 3);
    let mut base = v;
    if positive {
        base[axis] += 1;
    }
    let at = |d1: i64, d2: i64| {
        let mut c = base;
        c[a1] += d1;
        c[a2] += d2;
        c
    };
    if positive {
        [at(0, 0), at(1, 0), at(1, 1), at(0, 1)]
    } else {
        [at(0, 0), at(0, 1), at(1, 1), at(1, 0)]
    }
}

/// Boundary surface of the occupied voxels, two triangles per exposed cube
/// face, outward oriented.
pub fn voxel_mesh(points: &[Point3<f64>], voxel: f64) -> Result<TriangleMesh, ChangeError> {
    check_voxel(voxel)?;
    if points.is_empty() {
        return Err(ChangeError::InvalidParam("cannot mesh an empty cluster".into()));
    }
    Ok(mesh_voxels(&occupied_voxels(points, voxel), voxel))
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Meshes a voxel set. Where two voxels meet only along an edge, the faces
/// of each voxel pair up with each other and the edge gets a separate
/// midpoint per voxel; every fan of faces around a lattice corner gets its
/// own vertex. The result is a closed 2-manifold. Faces without a split edge
/// are two triangles, the others are fanned from the face centre.
pub fn mesh_voxels(occupied: &BTreeSet<Voxel>, voxel: f64) -> TriangleMesh {
    let mut quads: Vec<(Voxel, [Voxel; 4])> = Vec::new();
    for &v in occupied {
        for axis in 0..3 {
            for positive in [false, true] {
                let mut nb = v;
                nb[axis] += if positive { 1 } else { -1 };
                if !occupied.contains(&nb) {
                    quads.push((v, face_corners(v, axis, positive)));
                }
            }
        }
    }
    // Faces around each lattice edge, keyed by sorted endpoints.
    let mut edges: BTreeMap<(Voxel, Voxel), Vec<usize>> = BTreeMap::new();
    for (f, (_, q)) in quads.iter().enumerate() {
        for k in 0..4 {
            let (a, b) = (q[k], q[(k + 1) % 4]);
            edges.entry(if a < b { (a, b) } else { (b, a) }).or_default().push(f);
        }
    }
    // Union-find over (face, corner slot) incidences.
    let mut parent: Vec<usize> = (0..4 * quads.len()).collect();
    let slot = |f: usize, c: Voxel| 4 * f + quads[f].1.iter().position(|x| *x == c).expect("corner of face");
    // Pinched edges get one midpoint per voxel side: (face, edge slot) -> pair id.
    let mut split: HashMap<(usize, usize), usize> = HashMap::new();
    let mut n_splits = 0;
    for (&(a, b), faces) in &edges {
        let pairs: Vec<(usize, usize)> = if faces.len() == 2 {
            vec![(faces[0], faces[1])]
        } else {
            // Pinch: two voxels touching along this edge, two faces each.
            let mut by_cell: BTreeMap<Voxel, Vec<usize>> = BTreeMap::new();
            for &f in faces {
                by_cell.entry(quads[f].0).or_default().push(f);
            }
            by_cell.values().map(|fs| (fs[0], fs[1])).collect()
        };
        for &(f, g) in &pairs {
            for c in [a, b] {
                let (x, y) = (find(&mut parent, slot(f, c)), find(&mut parent, slot(g, c)));
                parent[x.max(y)] = x.min(y);
            }
            if faces.len() > 2 {
                for h in [f, g] {
                    let q = &quads[h].1;
                    let k = (0..4).find(|&k| (q[k] == a && q[(k + 1) % 4] == b) || (q[k] == b && q[(k + 1) % 4] == a)).expect("edge of face");
                    split.insert((h, k), n_splits);
                }
                n_splits += 1;
            }
        }
    }
    let mut mesh = TriangleMesh::default();
    let lattice = |c: Voxel| Point3::new(c[0] as f64 * voxel, c[1] as f64 * voxel, c[2] as f64 * voxel);
    let mut ids: HashMap<usize, usize> = HashMap::new();
    let mut mids: HashMap<usize, usize> = HashMap::new();
    for (f, (_, q)) in quads.iter().enumerate() {
        let corners: Vec<usize> = (0..4)
            .map(|k| {
                let root = find(&mut parent, 4 * f + k);
                *ids.entry(root).or_insert_with(|| {
                    mesh.vertices.push(lattice(q[k]));
                    mesh.vertices.len() - 1
                })
            })
            .collect();
        if !(0..4).any(|k| split.contains_key(&(f, k))) {
            mesh.faces.push([corners[0], corners[1], corners[2]]);
            mesh.faces.push([corners[0], corners[2], corners[3]]);
            continue;
        }
        let mut ring = Vec::with_capacity(8);
        for k in 0..4 {
            ring.push(corners[k]);
            if let Some(&pair) = split.get(&(f, k)) {
                let mid = *mids.entry(pair).or_insert_with(|| {
                    mesh.vertices.push(nalgebra::center(&lattice(q[k]), &lattice(q[(k + 1) % 4])));
                    mesh.vertices.len() - 1
                });
                ring.push(mid);
            }
        }
        mesh.vertices.push(nalgebra::center(&lattice(q[0]), &lattice(q[2])));
        let centre = mesh.vertices.len() - 1;
        for k in 0..ring.len() {
            mesh.faces.push([centre, ring[k], ring[(k + 1) % ring.len()]]);
        }
    }
    mesh
}

/// Counts of every undirected edge; a closed 2-manifold has all counts 2,
/// each edge used once in each direction.
pub fn is_closed_manifold(mesh: &TriangleMesh) -> bool {
    let mut directed: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for f in &mesh.faces {
        for k in 0..3 {
            *directed.entry((f[k], f[(k + 1) % 3])).or_default() += 1;
        }
    }
    directed.iter().all(|(&(a, b), &c)| c == 1 && directed.get(&(b, a)) == Some(&1))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChangeSet {
    pub confirmed: PointCloud,
    pub positive: PointCloud,
    /// Indices into `positive`.
    pub clusters: Vec<Vec<usize>>,
    /// Clustered positive points that joined no cluster.
    pub noise: Vec<usize>,
    /// Positive points outside the crop band.
    pub cropped: Vec<usize>,
    pub meshes: Vec<TriangleMesh>,
    pub params: ChangeParams,
}

/// Classify, cluster the positive points, mesh each cluster.
pub fn detect_changes(map: &PointCloud, model: &BuildingModel, params: &ChangeParams) -> Result<ChangeSet, ChangeError> {
    params.validate()?;
    let index = MeshIndex::new(model);
    let Classified { confirmed, positive } = classify(map, &index, params.threshold)?;
    let pts = positive.to_f64();
    let (kept, cropped): (Vec<usize>, Vec<usize>) = match params.crop_z {
        Some((a, b)) => (0..pts.len()).partition(|&i| pts[i].z >= a && pts[i].z <= b),
        None => ((0..pts.len()).collect(), Vec::new()),
    };
    let kept_pts: Vec<Point3<f64>> = kept.iter().map(|&i| pts[i]).collect();
    let clustering = dbscan(&kept_pts, params.eps, params.min_pts)?;
    let clusters: Vec<Vec<usize>> = clustering.clusters.iter().map(|c| c.iter().map(|&k| kept[k]).collect()).collect();
    let noise = clustering.noise.iter().map(|&k| kept[k]).collect();
    let meshes = clusters
        .iter()
        .map(|c| {
            let cp: Vec<Point3<f64>> = c.iter().map(|&i| pts[i]).collect();
            voxel_mesh(&cp, params.voxel)
        })
        .collect::<Result<_, _>>()?;
    Ok(ChangeSet { confirmed, positive, clusters, noise, cropped, meshes, params: *params })
}

impl ChangeSet {
    pub fn cluster_bounds(&self) -> Vec<Aabb> {
        let pts = self.positive.to_f64();
        self.clusters.iter().map(|c| Aabb::of_points(c.iter().map(|&i| &pts[i]))).collect()
    }

    pub fn combined_mesh(&self) -> TriangleMesh {
        let mut all = TriangleMesh::default();
        for m in &self.meshes {
            all.append(m);
        }
        all
    }

    pub fn report(&self) -> String {
        let mut s = String::new();
        let p = &self.params;
        let _ = writeln!(s, "threshold={}", fmt3(p.threshold));
        let _ = writeln!(s, "eps={}", fmt3(p.eps));
        let _ = writeln!(s, "min_pts={}", p.min_pts);
        let _ = writeln!(s, "voxel={}", fmt3(p.voxel));
        let _ = writeln!(s, "confirmed={}", self.confirmed.len());
        let _ = writeln!(s, "positive={}", self.positive.len());
        let _ = writeln!(s, "cropped={}", self.cropped.len());
        let _ = writeln!(s, "noise={}", self.noise.len());
        let _ = writeln!(s, "clusters={}", self.clusters.len());
        for (k, (c, b)) in self.clusters.iter().zip(self.cluster_bounds()).enumerate() {
            let _ = writeln!(
                s,
                "cluster {k}: points={} triangles={} min=({}, {}, {}) max=({}, {}, {})",
                c.len(),
                self.meshes[k].faces.len(),
                fmt3(b.min.x),
                fmt3(b.min.y),
                fmt3(b.min.z),
                fmt3(b.max.x),
                fmt3(b.max.y),
                fmt3(b.max.z)
            );
        }
        s
    }

    /// Writes `cluster_NNN.obj` per cluster, `changes.obj`, `report.txt`
    /// and the positive points as `positive.pc`.
    pub fn export(&self, dir: &Path) -> Result<(), ChangeError> {
        let io = |path: &Path| {
            let path = path.display().to_string();
            move |source| ChangeError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        for (k, m) in self.meshes.iter().enumerate() {
            let path = dir.join(format!("cluster_{k:03}.obj"));
            fs::write(&path, m.to_obj()).map_err(io(&path))?;
        }
        let path = dir.join("changes.obj");
        fs::write(&path, self.combined_mesh().to_obj()).map_err(io(&path))?;
        let path = dir.join("report.txt");
        fs::write(&path, self.report()).map_err(io(&path))?;
        let path = dir.join("positive.pc");
        fs::write(&path, self.positive.to_bytes()).map_err(io(&path))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Triangle;
    use crate::sim::scene::{box_room, solid_box};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn wall_model() -> BuildingModel {
        // Square wall in the plane x = 0, normal +x.
        BuildingModel::new(vec![
            Triangle::new(Point3::new(0.0, -5.0, -5.0), Point3::new(0.0, 5.0, -5.0), Point3::new(0.0, 5.0, 5.0)),
            Triangle::new(Point3::new(0.0, -5.0, -5.0), Point3::new(0.0, 5.0, 5.0), Point3::new(0.0, -5.0, 5.0)),
        ])
        .unwrap()
    }

    #[test]
    fn distances() {
        let index = MeshIndex::new(&wall_model());
        assert_eq!(point_mesh_distance(&Point3::new(0.0, -5.0, -5.0), &index).unwrap(), 0.0);
        assert!((point_mesh_distance(&Point3::new(1.0, 0.3, 0.2), &index).unwrap() - 1.0).abs() < 1e-9);
        assert!((point_mesh_distance(&Point3::new(-1.0, 0.3, 0.2), &index).unwrap() - 1.0).abs() < 1e-9);
        let room = MeshIndex::new(&box_room([0.0, 0.0], [2.0, 6.0], 6.0));
        assert!((point_mesh_distance(&Point3::new(1.0, 3.0, 3.0), &room).unwrap() - 1.0).abs() < 1e-12);
        let empty = MeshIndex::new(&BuildingModel::default());
        assert!(matches!(point_mesh_distance(&Point3::origin(), &empty), Err(ChangeError::EmptyModel)));
    }

    #[test]
    fn classify_splits_by_threshold() {
        let index = MeshIndex::new(&wall_model());
        let map = PointCloud::from_f64([Point3::new(0.0, 1.0, 1.0), Point3::new(0.1, 0.0, 0.0), Point3::new(1.0, 0.0, 0.0), Point3::new(-2.0, 0.0, 0.0)]);
        let c = classify(&map, &index, 0.15).unwrap();
        assert_eq!(c.confirmed.len(), 2);
        assert_eq!(c.positive.len(), 2);
        assert!(matches!(classify(&map, &index, 0.0), Err(ChangeError::InvalidParam(_))));
        let mut last = usize::MAX;
        for t in [0.05, 0.5, 1.5, 3.0] {
            let n = classify(&map, &index, t).unwrap().positive.len();
            assert!(n <= last);
            last = n;
        }
    }

    fn blob(rng: &mut impl Rng, center: Point3<f64>, n: usize, r: f64) -> Vec<Point3<f64>> {
        (0..n).map(|_| center + nalgebra::Vector3::new(rng.random_range(-r..r), rng.random_range(-r..r), rng.random_range(-r..r))).collect()
    }

    #[test]
    fn two_blobs_two_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut pts = blob(&mut rng, Point3::new(0.0, 0.0, 0.0), 100, 0.2);
        pts.extend(blob(&mut rng, Point3::new(5.0, 0.0, 0.0), 100, 0.2));
        let c = dbscan(&pts, 0.3, 10).unwrap();
        assert_eq!(c.clusters.len(), 2);
        assert!(c.noise.is_empty());
        assert_eq!(c.clusters[0], (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn isolated_and_identical_points() {
        let pts: Vec<_> = (0..5).map(|i| Point3::new(i as f64 * 3.0, 0.0, 0.0)).collect();
        let c = dbscan(&pts, 0.3, 10).unwrap();
        assert!(c.clusters.is_empty());
        assert_eq!(c.noise.len(), 5);
        let same = vec![Point3::new(1.0, 2.0, 3.0); 20];
        let c = dbscan(&same, 0.3, 10).unwrap();
        assert_eq!(c.clusters.len(), 1);
        assert_eq!(c.clusters[0].len(), 20);
        assert!(dbscan(&same, 0.0, 10).is_err());
        assert!(dbscan(&same, 0.3, 0).is_err());
    }

    #[test]
    fn border_point_goes_to_nearest_core() {
        // Two dense groups with edge cores at x = 0 and x = 1, and a sparse
        // point between them that is closer to the right one.
        let mut pts = vec![Point3::new(0.0, 0.0, 0.0)];
        pts.extend(vec![Point3::new(-0.5, 0.0, 0.0); 4]);
        pts.push(Point3::new(1.0, 0.0, 0.0));
        pts.extend(vec![Point3::new(1.5, 0.0, 0.0); 4]);
        pts.push(Point3::new(0.55, 0.0, 0.0));
        let c = dbscan(&pts, 0.6, 5).unwrap();
        assert_eq!(c.clusters.len(), 2);
        assert!(c.clusters[1].contains(&10));
    }

    #[test]
    fn cube_triangle_counts() {
        let one = voxel_mesh(&[Point3::new(0.05, 0.05, 0.05)], 0.1).unwrap();
        assert_eq!(one.faces.len(), 12);
        assert!(is_closed_manifold(&one));
        let two = voxel_mesh(&[Point3::new(0.05, 0.05, 0.05), Point3::new(0.15, 0.05, 0.05)], 0.1).unwrap();
        assert_eq!(two.faces.len(), 20);
        assert!(is_closed_manifold(&two));
        let block: Vec<_> =
            (0..8).map(|k| Point3::new(0.05 + 0.1 * (k & 1) as f64, 0.05 + 0.1 * ((k >> 1) & 1) as f64, 0.05 + 0.1 * (k >> 2) as f64)).collect();
        let m = voxel_mesh(&block, 0.1).unwrap();
        assert_eq!(m.faces.len(), 8 * 12 - 12 * 4);
        assert!((m.surface_area() - 6.0 * 0.2f64.powi(2)).abs() < 1e-12);
        assert!(is_closed_manifold(&m));
        assert!(voxel_mesh(&[], 0.1).is_err());
    }

    #[test]
    fn pinched_voxels_stay_manifold() {
        let edge: BTreeSet<Voxel> = [[0, 0, 0], [1, 1, 0]].into();
        assert!(is_closed_manifold(&mesh_voxels(&edge, 1.0)));
        let corner: BTreeSet<Voxel> = [[0, 0, 0], [1, 1, 1]].into();
        assert!(is_closed_manifold(&mesh_voxels(&corner, 1.0)));
    }

    #[test]
    fn detect_changes_finds_box() {
        let model = box_room([0.0, 0.0], [6.0, 6.0], 3.0);
        let obstacle = solid_box(Point3::new(2.0, 2.0, 0.0), Point3::new(2.5, 2.5, 0.5));
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut pts = Vec::new();
        for t in model.triangles().iter().chain(&obstacle) {
            for _ in 0..(t.area() * 400.0) as usize {
                let (mut u, mut v) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
                if u + v > 1.0 {
                    (u, v) = (1.0 - u, 1.0 - v);
                }
                let [a, b, c] = t.vertices();
                pts.push(a + (b - a) * u + (c - a) * v);
            }
        }
        let map = PointCloud::from_f64(pts);
        let cs = detect_changes(&map, &model, &ChangeParams::default()).unwrap();
        assert_eq!(cs.confirmed.len() + cs.positive.len(), map.len());
        assert_eq!(cs.meshes.len(), 1);
        assert!(is_closed_manifold(&cs.meshes[0]));
        let b = &cs.cluster_bounds()[0];
        assert!(b.min.x > 1.9 && b.max.x < 2.6 && b.max.z < 0.6);
        let report = cs.report();
        assert!(report.contains("clusters=1"));

        let only_model = PointCloud::from_f64(map.to_f64().into_iter().filter(|p| !(p.x > 1.9 && p.x < 2.6 && p.y > 1.9 && p.y < 2.6 && p.z > 0.01)));
        let cs = detect_changes(&only_model, &model, &ChangeParams::default()).unwrap();
        assert!(cs.clusters.is_empty() && cs.meshes.is_empty());

        let cropped = detect_changes(&map, &model, &ChangeParams { crop_z: Some((1.0, 2.0)), ..Default::default() }).unwrap();
        assert!(cropped.clusters.is_empty());
        assert_eq!(cropped.cropped.len(), cropped.positive.len());
    }

    #[test]
    fn sparse_noise_yields_no_meshes() {
        let model = box_room([0.0, 0.0], [10.0, 10.0], 3.0);
        // 1 m lattice: every eps ball holds only its own point.
        let pts: Vec<_> = (1..9).flat_map(|x| (1..9).map(move |y| Point3::new(x as f64 + 0.1, y as f64, 1.5))).collect();
        let cs = detect_changes(&PointCloud::from_f64(pts.clone()), &model, &ChangeParams::default()).unwrap();
        assert!(cs.meshes.is_empty());
        assert_eq!(cs.noise.len(), pts.len());
    }

    #[test]
    fn export_writes_files() {
        let dir = tempfile::tempdir().unwrap();
        let model = wall_model();
        let pts: Vec<_> = (0..30).map(|k| Point3::new(1.0 + 0.01 * k as f64, 0.0, 0.0)).collect();
        let cs = detect_changes(&PointCloud::from_f64(pts), &model, &ChangeParams::default()).unwrap();
        cs.export(dir.path()).unwrap();
        for f in ["cluster_000.obj", "changes.obj", "report.txt", "positive.pc"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let back = TriangleMesh::from_obj(&fs::read_to_string(dir.path().join("changes.obj")).unwrap()).unwrap();
        assert_eq!(back.faces.len(), cs.combined_mesh().faces.len());
    }

    fn partition(c: &Clustering, order: &[usize]) -> BTreeSet<BTreeSet<usize>> {
        c.clusters.iter().map(|cl| cl.iter().map(|&k| order[k]).collect()).collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn voxel_meshes_are_closed_manifolds(cells in proptest::collection::btree_set((0i64..5, 0i64..5, 0i64..4), 1..60)) {
            let occ: BTreeSet<Voxel> = cells.into_iter().map(|(a, b, c)| [a, b, c]).collect();
            let m = mesh_voxels(&occ, 0.1);
            prop_assert!(is_closed_manifold(&m));
        }

        #[test]
        fn dbscan_partition_ignores_order(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(1..150);
            let pts: Vec<Point3<f64>> = (0..n)
                .map(|_| Point3::new((rng.random_range(0..20) as f64) * 0.1, (rng.random_range(0..20) as f64) * 0.1, 0.0))
                .collect();
            let mut order: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                order.swap(i, rng.random_range(0..=i));
            }
            let shuffled: Vec<_> = order.iter().map(|&i| pts[i]).collect();
            let identity: Vec<usize> = (0..n).collect();
            let a = dbscan(&pts, 0.25, 4).unwrap();
            let b = dbscan(&shuffled, 0.25, 4).unwrap();
            prop_assert_eq!(partition(&a, &identity), partition(&b, &order));
        }
    }
}
