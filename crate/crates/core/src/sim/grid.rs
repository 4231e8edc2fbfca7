//! 2D occupancy grid rasterized from a horizontal slice of the model.

use std::collections::VecDeque;

use nalgebra::{Point2, Point3, Vector2};

use super::SimError;
use crate::geometry::{BuildingModel, Triangle};

/// Default slice band above the model floor (m).
pub const DEFAULT_SLICE: (f64, f64) = (0.2, 1.5);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cell {
    Unknown,
    Free,
    Occupied,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    pub resolution: f64,
    /// World xy of the lower-left corner of cell (0, 0).
    pub origin: [f64; 2],
    pub width: usize,
    pub height: usize,
    cells: Vec<Cell>,
}

impl OccupancyGrid {
    pub fn new(resolution: f64, origin: [f64; 2], width: usize, height: usize, fill: Cell) -> Self {
        assert!(resolution > 0.0 && width >= 1 && height >= 1, "grid must be at least 1x1 with positive resolution");
        Self { resolution, origin, width, height, cells: vec![fill; width * height] }
    }

    pub fn get(&self, ix: usize, iy: usize) -> Cell {
        self.cells[iy * self.width + ix]
    }

    pub fn set(&mut self, ix: usize, iy: usize, c: Cell) {
        self.cells[iy * self.width + ix] = c;
    }

    pub fn count(&self, c: Cell) -> usize {
        self.cells.iter().filter(|&&v| v == c).count()
    }

    pub fn cell_center(&self, ix: usize, iy: usize) -> [f64; 2] {
        [self.origin[0] + (ix as f64 + 0.5) * self.resolution, self.origin[1] + (iy as f64 + 0.5) * self.resolution]
    }

    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let fx = ((x - self.origin[0]) / self.resolution).floor();
        let fy = ((y - self.origin[1]) / self.resolution).floor();
        (fx >= 0.0 && fy >= 0.0 && (fx as usize) < self.width && (fy as usize) < self.height).then_some((fx as usize, fy as usize))
    }

    /// 4-neighbours inside the grid.
    pub fn neighbors(&self, ix: usize, iy: usize) -> impl Iterator<Item = (usize, usize)> {
        let (w, h) = (self.width as isize, self.height as isize);
        [(1isize, 0isize), (-1, 0), (0, 1), (0, -1)].into_iter().filter_map(move |(dx, dy)| {
            let (x, y) = (ix as isize + dx, iy as isize + dy);
            (x >= 0 && y >= 0 && x < w && y < h).then_some((x as usize, y as usize))
        })
    }

    /// Grid with `factor x factor` blocks merged. A block is free only if all
    /// of its cells are free, occupied if any is occupied, unknown otherwise.
    pub fn coarsen(&self, factor: usize) -> OccupancyGrid {
        assert!(factor >= 1);
        let w = self.width.div_ceil(factor);
        let h = self.height.div_ceil(factor);
        let mut out = OccupancyGrid::new(self.resolution * factor as f64, self.origin, w, h, Cell::Unknown);
        for by in 0..h {
            for bx in 0..w {
                let mut all_free = true;
                let mut any_occ = false;
                for iy in by * factor..(by + 1) * factor {
                    for ix in bx * factor..(bx + 1) * factor {
                        let c = if ix < self.width && iy < self.height { self.get(ix, iy) } else { Cell::Unknown };
                        all_free &= c == Cell::Free;
                        any_occ |= c == Cell::Occupied;
                    }
                }
                let c = if any_occ {
                    Cell::Occupied
                } else if all_free {
                    Cell::Free
                } else {
                    Cell::Unknown
                };
                out.set(bx, by, c);
            }
        }
        out
    }

    /// Text dump, one row per line from the top, `#` occupied, `.` free, `?` unknown.
    pub fn to_ascii(&self) -> String {
        let mut s = String::with_capacity((self.width + 1) * self.height);
        for iy in (0..self.height).rev() {
            for ix in 0..self.width {
                s.push(match self.get(ix, iy) {
                    Cell::Occupied => '#',
                    Cell::Free => '.',
                    Cell::Unknown => '?',
                });
            }
            s.push('\n');
        }
        s
    }
}

/// Clips a triangle to `lo <= z <= hi` and returns the xy projection of the
/// resulting convex polygon (empty if the triangle misses the slab).
fn clip_to_slab(t: &Triangle, lo: f64, hi: f64) -> Vec<Point2<f64>> {
    fn clip(poly: &[Point3<f64>], keep: impl Fn(&Point3<f64>) -> f64) -> Vec<Point3<f64>> {
        // keep(p) >= 0 means inside.
        let mut out = Vec::with_capacity(poly.len() + 2);
        for k in 0..poly.len() {
            let (a, b) = (poly[k], poly[(k + 1) % poly.len()]);
            let (da, db) = (keep(&a), keep(&b));
            if da >= 0.0 {
                out.push(a);
            }
            if (da >= 0.0) != (db >= 0.0) {
                let s = da / (da - db);
                out.push(a + (b - a) * s);
            }
        }
        out
    }
    let poly: Vec<Point3<f64>> = t.vertices().to_vec();
    let poly = clip(&poly, |p| p.z - lo);
    if poly.is_empty() {
        return Vec::new();
    }
    let poly = clip(&poly, |p| hi - p.z);
    poly.iter().map(|p| Point2::new(p.x, p.y)).collect()
}

fn project(points: &[Point2<f64>], axis: &Vector2<f64>) -> (f64, f64) {
    points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
        let d = p.coords.dot(axis);
        (lo.min(d), hi.max(d))
    })
}

/// Separating-axis test between a convex polygon (possibly degenerate) and a
/// closed axis-aligned square.
fn polygon_touches_box(poly: &[Point2<f64>], min: [f64; 2], max: [f64; 2]) -> bool {
    let corners = [Point2::new(min[0], min[1]), Point2::new(max[0], min[1]), Point2::new(max[0], max[1]), Point2::new(min[0], max[1])];
    let mut axes = vec![Vector2::x(), Vector2::y()];
    for k in 0..poly.len() {
        let e = poly[(k + 1) % poly.len()] - poly[k];
        if e.norm_squared() > 1e-24 {
            axes.push(Vector2::new(-e.y, e.x));
        }
    }
    axes.iter().all(|a| {
        let (p0, p1) = project(poly, a);
        let (b0, b1) = project(&corners, a);
        p1 >= b0 && b1 >= p0
    })
}

/// Occupied cells of the slice band; every other cell is unknown.
pub fn occupancy_layer(model: &BuildingModel, resolution: f64, slice: (f64, f64)) -> Result<OccupancyGrid, SimError> {
    if !(resolution > 0.0) {
        return Err(SimError::Invalid(format!("resolution must be positive, got {resolution}")));
    }
    if !(slice.0 < slice.1) {
        return Err(SimError::Invalid(format!("slice band {:?} is empty", slice)));
    }
    if model.is_empty() {
        return Err(SimError::NoInterior("model has no triangles".into()));
    }
    let b = model.bounds();
    let origin = [b.min.x - 1.5 * resolution, b.min.y - 1.5 * resolution];
    let width = ((b.max.x - origin[0]) / resolution).floor() as usize + 2;
    let height = ((b.max.y - origin[1]) / resolution).floor() as usize + 2;
    let mut grid = OccupancyGrid::new(resolution, origin, width, height, Cell::Unknown);
    let (lo, hi) = (b.min.z + slice.0, b.min.z + slice.1);

    for t in model.triangles() {
        let poly = clip_to_slab(t, lo, hi);
        if poly.is_empty() {
            continue;
        }
        let (x0, x1) = project(&poly, &Vector2::x());
        let (y0, y1) = project(&poly, &Vector2::y());
        let to_cell = |v: f64, o: f64, n: usize| (((v - o) / resolution).floor().max(0.0) as usize).min(n - 1);
        for iy in to_cell(y0, origin[1], height)..=to_cell(y1, origin[1], height) {
            for ix in to_cell(x0, origin[0], width)..=to_cell(x1, origin[0], width) {
                if grid.get(ix, iy) == Cell::Occupied {
                    continue;
                }
                let min = [origin[0] + ix as f64 * resolution, origin[1] + iy as f64 * resolution];
                let max = [min[0] + resolution, min[1] + resolution];
                if polygon_touches_box(&poly, min, max) {
                    grid.set(ix, iy, Cell::Occupied);
                }
            }
        }
    }

    Ok(grid)
}

/// Rasterizes the slice band `[min_z + slice.0, min_z + slice.1]` of the model.
///
/// A cell is occupied when a triangle clipped to the band touches its closed
/// footprint. Free cells are the non-occupied region 4-connected to `seed`
/// (world xy); without a seed, the largest non-occupied region that does not
/// reach the grid border. Enclosed pockets such as solid pillars stay unknown. The grid has one cell of padding around the model and is
/// offset by half a cell so walls at the model bounds fall on cell centres.
pub fn rasterize(model: &BuildingModel, resolution: f64, slice: (f64, f64), seed: Option<[f64; 2]>) -> Result<OccupancyGrid, SimError> {
    let mut grid = occupancy_layer(model, resolution, slice)?;
    let width = grid.width;
    let (labels, touches_border) = label_open_regions(&grid);
    match seed {
        Some(s) => {
            let (sx, sy) = grid.cell_of(s[0], s[1]).ok_or_else(|| SimError::NoInterior(format!("seed ({}, {}) is outside the grid", s[0], s[1])))?;
            let label = labels[sy * width + sx].ok_or_else(|| SimError::NoInterior(format!("seed ({}, {}) lies in an occupied cell", s[0], s[1])))?;
            if touches_border[label] {
                return Err(SimError::NoInterior(format!("region around seed ({}, {}) is not enclosed", s[0], s[1])));
            }
            for (i, l) in labels.iter().enumerate() {
                if *l == Some(label) {
                    grid.cells[i] = Cell::Free;
                }
            }
        }
        None => {
            let mut sizes = vec![0usize; touches_border.len()];
            for l in labels.iter().flatten() {
                sizes[*l] += 1;
            }
            let largest = (0..sizes.len()).filter(|&l| !touches_border[l]).max_by(|&a, &b| sizes[a].cmp(&sizes[b]).then(b.cmp(&a)));
            if let Some(label) = largest {
                for (i, l) in labels.iter().enumerate() {
                    if *l == Some(label) {
                        grid.cells[i] = Cell::Free;
                    }
                }
            }
        }
    }
    if grid.count(Cell::Free) == 0 {
        return Err(SimError::NoInterior("no enclosed free region".into()));
    }
    Ok(grid)
}

/// 4-connected components of non-occupied cells and whether each reaches
/// the grid border.
fn label_open_regions(grid: &OccupancyGrid) -> (Vec<Option<usize>>, Vec<bool>) {
    let (w, h) = (grid.width, grid.height);
    let mut labels: Vec<Option<usize>> = vec![None; w * h];
    let mut border = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if labels[start].is_some() || grid.cells[start] == Cell::Occupied {
            continue;
        }
        let label = border.len();
        let mut touches = false;
        labels[start] = Some(label);
        queue.push_back((start % w, start / w));
        while let Some((x, y)) = queue.pop_front() {
            touches |= x == 0 || y == 0 || x == w - 1 || y == h - 1;
            for (nx, ny) in grid.neighbors(x, y) {
                let i = ny * w + nx;
                if labels[i].is_none() && grid.cells[i] != Cell::Occupied {
                    labels[i] = Some(label);
                    queue.push_back((nx, ny));
                }
            }
        }
        border.push(touches);
    }
    (labels, border)
}
