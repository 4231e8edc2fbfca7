//! Wavefront coverage path over the free cells of an occupancy grid.

use std::collections::VecDeque;
use std::fmt::Write as _;

use super::grid::{Cell, OccupancyGrid};
use super::SimError;
use crate::textfmt::fmt_sig;

/// Default goal stride: one waypoint out of 20 becomes a navigation goal.
pub const DEFAULT_STRIDE: usize = 20;

/// Planar pose on the path plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Waypoint {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl Waypoint {
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Self { x, y, yaw }
    }
}

/// Free cells that keep at least `clearance` between their centre and the
/// centre of every non-free cell. Cells outside the grid count as non-free.
pub fn eroded_free(grid: &OccupancyGrid, clearance: f64) -> Vec<bool> {
    let (w, h) = (grid.width, grid.height);
    let r = (clearance / grid.resolution).floor() as isize;
    let r2 = (clearance / grid.resolution).powi(2);
    let mut out = vec![false; w * h];
    for iy in 0..h {
        for ix in 0..w {
            if grid.get(ix, iy) != Cell::Free {
                continue;
            }
            let mut ok = true;
            'scan: for dy in -r..=r {
                for dx in -r..=r {
                    if ((dx * dx + dy * dy) as f64) > r2 + 1e-9 {
                        continue;
                    }
                    let (x, y) = (ix as isize + dx, iy as isize + dy);
                    let free = x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h && grid.get(x as usize, y as usize) == Cell::Free;
                    if !free {
                        ok = false;
                        break 'scan;
                    }
                }
            }
            out[iy * w + ix] = ok;
        }
    }
    out
}

fn bfs(grid: &OccupancyGrid, passable: &[bool], from: (usize, usize)) -> (Vec<usize>, Vec<usize>) {
    let w = grid.width;
    let mut dist = vec![usize::MAX; passable.len()];
    let mut parent = vec![usize::MAX; passable.len()];
    let mut q = VecDeque::new();
    dist[from.1 * w + from.0] = 0;
    q.push_back(from);
    while let Some((x, y)) = q.pop_front() {
        let d = dist[y * w + x];
        for (nx, ny) in grid.neighbors(x, y) {
            let i = ny * w + nx;
            if passable[i] && dist[i] == usize::MAX {
                dist[i] = d + 1;
                parent[i] = y * w + x;
                q.push_back((nx, ny));
            }
        }
    }
    (dist, parent)
}

/// Ordered cell sequence of the wavefront sweep.
///
/// Cells are the eroded free cells reachable from `start`. The walk greedily
/// steps to the unvisited neighbour with the smallest `(wavefront distance,
/// row, column)`. When no neighbour is unvisited it routes along a shortest
/// path to the globally smallest unvisited cell. If `start` itself does not
/// survive erosion, the nearest surviving cell is used instead. Consecutive
/// cells are always 4-adjacent.
pub fn coverage_cells(grid: &OccupancyGrid, start: (usize, usize), clearance: f64) -> Result<Vec<(usize, usize)>, SimError> {
    if start.0 >= grid.width || start.1 >= grid.height {
        return Err(SimError::Invalid(format!("start cell {:?} is outside the grid", start)));
    }
    let w = grid.width;
    let passable = eroded_free(grid, clearance);
    let start = if passable[start.1 * w + start.0] {
        start
    } else {
        let key = |i: usize| {
            let (x, y) = ((i % w) as isize, (i / w) as isize);
            let (dx, dy) = (x - start.0 as isize, y - start.1 as isize);
            (dx * dx + dy * dy, y, x)
        };
        let best = (0..passable.len())
            .filter(|&i| passable[i])
            .min_by_key(|&i| key(i))
            .ok_or_else(|| SimError::NoInterior(format!("no free cell survives a clearance of {clearance} m")))?;
        (best % w, best / w)
    };

    let (dist, _) = bfs(grid, &passable, start);
    let reachable: Vec<bool> = dist.iter().map(|&d| d != usize::MAX).collect();
    let total = reachable.iter().filter(|&&r| r).count();
    let order_key = |i: usize| (dist[i], i / w, i % w);
    let mut by_order: Vec<usize> = (0..dist.len()).filter(|&i| reachable[i]).collect();
    by_order.sort_by_key(|&i| order_key(i));

    let mut visited = vec![false; dist.len()];
    let mut path = vec![start];
    visited[start.1 * w + start.0] = true;
    let mut n_visited = 1;
    let mut cursor = 0usize;
    let mut cur = start;
    while n_visited < total {
        let next = grid.neighbors(cur.0, cur.1).map(|(x, y)| y * w + x).filter(|&i| reachable[i] && !visited[i]).min_by_key(|&i| order_key(i));
        match next {
            Some(i) => {
                cur = (i % w, i / w);
                visited[i] = true;
                n_visited += 1;
                path.push(cur);
            }
            None => {
                while visited[by_order[cursor]] {
                    cursor += 1;
                }
                let target = by_order[cursor];
                let (_, parent) = bfs(grid, &passable, cur);
                let mut route = vec![target];
                let here = cur.1 * w + cur.0;
                let mut at = target;
                while parent[at] != here {
                    at = parent[at];
                    route.push(at);
                }
                for &i in route.iter().rev() {
                    if !visited[i] {
                        visited[i] = true;
                        n_visited += 1;
                    }
                    path.push((i % w, i / w));
                }
                cur = (target % w, target / w);
            }
        }
    }
    Ok(path)
}

/// Heading of each waypoint toward its successor; the last keeps the
/// previous heading (0 for a single waypoint).
fn with_headings(points: Vec<(f64, f64)>) -> Vec<Waypoint> {
    let n = points.len();
    let mut out: Vec<Waypoint> = Vec::with_capacity(n);
    for k in 0..n {
        let (x, y) = points[k];
        let yaw = if k + 1 < n {
            let (nx, ny) = points[k + 1];
            (ny - y).atan2(nx - x)
        } else if k > 0 {
            out[k - 1].yaw
        } else {
            0.0
        };
        out.push(Waypoint::new(x, y, yaw));
    }
    out
}

/// Wavefront coverage path as cell-centre waypoints.
pub fn coverage_path(grid: &OccupancyGrid, start: (usize, usize), clearance: f64) -> Result<Vec<Waypoint>, SimError> {
    let cells = coverage_cells(grid, start, clearance)?;
    let pts = cells
        .into_iter()
        .map(|(x, y)| {
            let c = grid.cell_center(x, y);
            (c[0], c[1])
        })
        .collect();
    Ok(with_headings(pts))
}

/// Inserts intermediate points so consecutive waypoints are at most `step`
/// apart. Headings are recomputed.
pub fn densify(waypoints: &[Waypoint], step: f64) -> Vec<Waypoint> {
    assert!(step > 0.0);
    let mut pts = Vec::new();
    for (k, w) in waypoints.iter().enumerate() {
        if k > 0 {
            let p = waypoints[k - 1];
            let len = (w.x - p.x).hypot(w.y - p.y);
            let n = (len / step - 1e-9).ceil().max(1.0) as usize;
            for s in 1..n {
                let f = s as f64 / n as f64;
                pts.push((p.x + f * (w.x - p.x), p.y + f * (w.y - p.y)));
            }
        }
        pts.push((w.x, w.y));
    }
    with_headings(pts)
}

/// Keeps waypoints `0, stride, 2 * stride, ...` plus the last one, each
/// heading toward the next kept goal.
pub fn subsample_goals(waypoints: &[Waypoint], stride: usize) -> Vec<Waypoint> {
    assert!(stride >= 1, "stride must be at least 1");
    let kept: Vec<(f64, f64)> = goal_indices(waypoints.len(), stride).iter().map(|&i| (waypoints[i].x, waypoints[i].y)).collect();
    let mut goals = with_headings(kept);
    if goals.len() == 1 {
        goals[0].yaw = waypoints[0].yaw;
    }
    goals
}

/// Indices kept by [`subsample_goals`].
pub fn goal_indices(len: usize, stride: usize) -> Vec<usize> {
    assert!(stride >= 1);
    if len == 0 {
        return Vec::new();
    }
    let mut idx: Vec<usize> = (0..len).step_by(stride).collect();
    if *idx.last().unwrap() != len - 1 {
        idx.push(len - 1);
    }
    idx
}

/// One `x y yaw` line per goal.
pub fn goals_to_text(goals: &[Waypoint]) -> String {
    let mut s = String::new();
    for g in goals {
        let _ = writeln!(s, "{} {} {}", fmt_sig(g.x), fmt_sig(g.y), fmt_sig(g.yaw));
    }
    s
}

pub fn goals_from_text(text: &str) -> Result<Vec<Waypoint>, SimError> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v: Vec<f64> =
            line.split_whitespace().map(|f| f.parse::<f64>()).collect::<Result<_, _>>().map_err(|e| SimError::Invalid(format!("goal line {}: {e}", n + 1)))?;
        if v.len() != 3 || v.iter().any(|x| !x.is_finite()) {
            return Err(SimError::Invalid(format!("goal line {}: expected `x y yaw`", n + 1)));
        }
        out.push(Waypoint::new(v[0], v[1], v[2]));
    }
    Ok(out)
}
