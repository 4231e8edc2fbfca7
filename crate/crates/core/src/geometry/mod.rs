//! Spatial primitives: meshes, the triangle BVH and a point kd-tree.

pub mod bvh;
pub mod kdtree;
pub mod mesh;

pub use bvh::{ClosestHit, MeshIndex};
pub use kdtree::KdTree;
pub use mesh::{Aabb, BuildingModel, MeshError, Triangle, TriangleMesh};
