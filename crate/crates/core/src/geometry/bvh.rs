//! Bounding volume hierarchy over a building model's triangles.
//!
//! Used for two queries: nearest ray hit (LiDAR simulation) and exact
//! unsigned point-to-mesh distance (change detection).

use nalgebra::{Point3, Vector3};

use super::mesh::{Aabb, BuildingModel, Triangle};

const LEAF_SIZE: usize = 4;

#[derive(Debug, Clone)]
struct BvhNode {
    bounds: Aabb,
    /// Leaf: `count > 0`, triangles `start..start + count` of `order`.
    /// Inner: `count == 0`, children at `start` and `start + 1`.
    start: usize,
    count: usize,
}

#[derive(Debug, Clone)]
pub struct MeshIndex {
    triangles: Vec<Triangle>,
    nodes: Vec<BvhNode>,
}

/// Nearest surface point found by [`MeshIndex::closest_point`].
#[derive(Debug, Clone, Copy)]
pub struct ClosestHit {
    pub point: Point3<f64>,
    pub distance: f64,
    pub triangle: usize,
}

impl MeshIndex {
    pub fn new(model: &BuildingModel) -> Self {
        let source = model.triangles();
        let mut order: Vec<usize> = (0..source.len()).collect();
        let centroids: Vec<Point3<f64>> = source.iter().map(|t| t.centroid()).collect();
        let mut nodes = Vec::new();
        if !source.is_empty() {
            nodes.push(BvhNode { bounds: Aabb::empty(), start: 0, count: 0 });
            build(source, &centroids, &mut order, 0, source.len(), 0, &mut nodes);
        }
        let triangles = order.iter().map(|&i| source[i]).collect();
        MeshIndex { triangles, nodes }
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    /// Parameter `t` of the first intersection of `origin + t * dir` with
    /// `t <= t_max`. `dir` need not be unit length.
    pub fn raycast(&self, origin: &Point3<f64>, dir: &Vector3<f64>, t_max: f64) -> Option<f64> {
        if self.nodes.is_empty() {
            return None;
        }
        let inv = dir.map(|v| 1.0 / v);
        let mut best = t_max;
        let mut hit = false;
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            let node = &self.nodes[n];
            if node.bounds.ray_entry(origin, &inv, best).is_none() {
                continue;
            }
            if node.count > 0 {
                for t in &self.triangles[node.start..node.start + node.count] {
                    if let Some(d) = t.intersect_ray(origin, dir) {
                        if d <= best {
                            best = d;
                            hit = true;
                        }
                    }
                }
            } else {
                let (l, r) = (node.start, node.start + 1);
                let el = self.nodes[l].bounds.ray_entry(origin, &inv, best);
                let er = self.nodes[r].bounds.ray_entry(origin, &inv, best);
                // Push the farther child first so the nearer one is popped first.
                match (el, er) {
                    (Some(a), Some(b)) if a <= b => stack.extend([r, l]),
                    (Some(_), Some(_)) => stack.extend([l, r]),
                    (Some(_), None) => stack.push(l),
                    (None, Some(_)) => stack.push(r),
                    (None, None) => {}
                }
            }
        }
        hit.then_some(best)
    }

    /// Exact closest point on the mesh. `None` only for an empty model.
    pub fn closest_point(&self, p: &Point3<f64>) -> Option<ClosestHit> {
        if self.nodes.is_empty() {
            return None;
        }
        let mut best: Option<ClosestHit> = None;
        let mut best_d2 = f64::INFINITY;
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            let node = &self.nodes[n];
            if node.bounds.distance2(p) > best_d2 {
                continue;
            }
            if node.count > 0 {
                for (k, t) in self.triangles[node.start..node.start + node.count].iter().enumerate() {
                    let q = t.closest_point(p);
                    let d2 = (q - p).norm_squared();
                    if d2 < best_d2 {
                        best_d2 = d2;
                        best = Some(ClosestHit { point: q, distance: 0.0, triangle: node.start + k });
                    }
                }
            } else {
                let (l, r) = (node.start, node.start + 1);
                let dl = self.nodes[l].bounds.distance2(p);
                let dr = self.nodes[r].bounds.distance2(p);
                if dl <= dr {
                    stack.extend([r, l]);
                } else {
                    stack.extend([l, r]);
                }
            }
        }
        best.map(|mut h| {
            h.distance = best_d2.sqrt();
            h
        })
    }

    pub fn distance(&self, p: &Point3<f64>) -> Option<f64> {
        self.closest_point(p).map(|h| h.distance)
    }
}

fn build(source: &[Triangle], centroids: &[Point3<f64>], order: &mut [usize], start: usize, end: usize, node: usize, nodes: &mut Vec<BvhNode>) {
    let mut bounds = Aabb::empty();
    let mut cbounds = Aabb::empty();
    for &i in &order[start..end] {
        for v in source[i].vertices() {
            bounds.grow(&v);
        }
        cbounds.grow(&centroids[i]);
    }
    let count = end - start;
    if count <= LEAF_SIZE {
        nodes[node] = BvhNode { bounds, start, count };
        return;
    }
    let extent = cbounds.max - cbounds.min;
    let axis = if extent.x >= extent.y && extent.x >= extent.z {
        0
    } else if extent.y >= extent.z {
        1
    } else {
        2
    };
    let mid = start + count / 2;
    order[start..end].select_nth_unstable_by(count / 2, |&a, &b| centroids[a][axis].total_cmp(&centroids[b][axis]).then(a.cmp(&b)));
    let left = nodes.len();
    nodes.push(BvhNode { bounds: Aabb::empty(), start: 0, count: 0 });
    nodes.push(BvhNode { bounds: Aabb::empty(), start: 0, count: 0 });
    nodes[node] = BvhNode { bounds, start: left, count: 0 };
    build(source, centroids, order, start, mid, left, nodes);
    build(source, centroids, order, mid, end, left + 1, nodes);
}
