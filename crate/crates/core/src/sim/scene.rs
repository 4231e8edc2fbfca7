//! Procedural building models used by tests, fixtures and demos.

use nalgebra::Point3;

use crate::geometry::{BuildingModel, Triangle};

/// Two triangles covering the planar quad `a b c d` (in order).
pub fn quad(a: Point3<f64>, b: Point3<f64>, c: Point3<f64>, d: Point3<f64>) -> [Triangle; 2] {
    [Triangle::new(a, b, c), Triangle::new(a, c, d)]
}

/// Vertical wall from `from` to `to` spanning `z0..z1`.
pub fn wall(from: [f64; 2], to: [f64; 2], z0: f64, z1: f64) -> Vec<Triangle> {
    quad(Point3::new(from[0], from[1], z0), Point3::new(to[0], to[1], z0), Point3::new(to[0], to[1], z1), Point3::new(from[0], from[1], z1)).to_vec()
}

/// Horizontal rectangle at height `z`.
pub fn slab(min: [f64; 2], max: [f64; 2], z: f64) -> Vec<Triangle> {
    quad(Point3::new(min[0], min[1], z), Point3::new(max[0], min[1], z), Point3::new(max[0], max[1], z), Point3::new(min[0], max[1], z)).to_vec()
}

/// Closed axis-aligned box, 12 triangles.
pub fn solid_box(min: Point3<f64>, max: Point3<f64>) -> Vec<Triangle> {
    let mut t = Vec::with_capacity(12);
    let (x0, y0, x1, y1) = (min.x, min.y, max.x, max.y);
    t.extend(wall([x0, y0], [x1, y0], min.z, max.z));
    t.extend(wall([x1, y0], [x1, y1], min.z, max.z));
    t.extend(wall([x1, y1], [x0, y1], min.z, max.z));
    t.extend(wall([x0, y1], [x0, y0], min.z, max.z));
    t.extend(slab([x0, y0], [x1, y1], min.z));
    t.extend(slab([x0, y0], [x1, y1], max.z));
    t
}

fn enclosure(min: [f64; 2], max: [f64; 2], height: f64) -> Vec<Triangle> {
    let mut t = Vec::new();
    t.extend(wall([min[0], min[1]], [max[0], min[1]], 0.0, height));
    t.extend(wall([max[0], min[1]], [max[0], max[1]], 0.0, height));
    t.extend(wall([max[0], max[1]], [min[0], max[1]], 0.0, height));
    t.extend(wall([min[0], max[1]], [min[0], min[1]], 0.0, height));
    t.extend(slab(min, max, 0.0));
    t.extend(slab(min, max, height));
    t
}

/// Rectangular room with floor at z = 0 and a ceiling at `height`.
pub fn box_room(min: [f64; 2], max: [f64; 2], height: f64) -> BuildingModel {
    BuildingModel::new(enclosure(min, max, height)).expect("box room is valid")
}

/// 20 m x 15 m, 3 m high, split at x = 12 by a wall with a 2 m door
/// (y in 6.5..8.5, 2.1 m high). Each room holds one 0.4 m square pillar.
pub fn two_room_building() -> BuildingModel {
    let h = 3.0;
    let mut t = enclosure([0.0, 0.0], [20.0, 15.0], h);
    t.extend(wall([12.0, 0.0], [12.0, 6.5], 0.0, h));
    t.extend(wall([12.0, 8.5], [12.0, 15.0], 0.0, h));
    t.extend(wall([12.0, 6.5], [12.0, 8.5], 2.1, h));
    t.extend(solid_box(Point3::new(4.0, 10.0, 0.0), Point3::new(4.4, 10.4, h)));
    t.extend(solid_box(Point3::new(16.0, 4.0, 0.0), Point3::new(16.4, 4.4, h)));
    BuildingModel::new(t).expect("two-room building is valid")
}
