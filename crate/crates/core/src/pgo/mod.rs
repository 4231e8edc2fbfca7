//! Anchor-node multi-session pose graph.
//!
//! Each session keeps its own local frame; an anchor pose per session maps
//! that frame into the world. The ground-truth session is pinned by
//! near-zero-variance priors, so after optimization the query anchor carries
//! the query session into the model frame. An encounter between GT keyframe
//! `i` and query keyframe `j` constrains
//! `between(dGT * x_i, dQ * x_j)` to the registered relative pose.

mod solver;
pub mod sparse;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{Matrix6, Vector6};
use thiserror::Error;

use crate::cloud::PointCloud;
use crate::registration::Encounter;
use crate::se3::{Pose, Se3Error};
use crate::session::Session;
use crate::textfmt::fmt_sig;

pub use solver::{optimize, LmParams};

/// Priors with at least this much information count as pins.
pub const PIN_INFORMATION: f64 = 1e11;

#[derive(Debug, Error)]
pub enum PgoError {
    #[error("index error: {0}")]
    Index(String),
    #[error("singular system: {0}")]
    SingularSystem(String),
    #[error(transparent)]
    Gimbal(#[from] Se3Error),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("invalid graph: {0}")]
    Invalid(String),
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
}

/// Identifies what a graph variable stands for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum VarKey {
    Gt(usize),
    Query(usize),
    AnchorGt,
    AnchorQuery,
    /// Variables of graphs not built from sessions.
    Free(usize),
}

impl VarKey {
    fn is_gt_side(&self) -> bool {
        matches!(self, VarKey::Gt(_) | VarKey::AnchorGt)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Factor {
    /// `r = log(between(value, x))`.
    Prior { var: usize, value: Pose, information: Matrix6<f64> },
    /// `r = log(between(measured, between(xa, xb)))`.
    Between { a: usize, b: usize, measured: Pose, information: Matrix6<f64> },
    /// See [`anchor_residual`].
    AnchorLoop { xi: usize, xj: usize, dgt: usize, dq: usize, measured: Pose, information: Matrix6<f64> },
}

impl Factor {
    pub fn variables(&self) -> Vec<usize> {
        match self {
            Factor::Prior { var, .. } => vec![*var],
            Factor::Between { a, b, .. } => vec![*a, *b],
            Factor::AnchorLoop { xi, xj, dgt, dq, .. } => vec![*xi, *xj, *dgt, *dq],
        }
    }

    pub fn information(&self) -> &Matrix6<f64> {
        match self {
            Factor::Prior { information, .. } | Factor::Between { information, .. } | Factor::AnchorLoop { information, .. } => information,
        }
    }

    /// Residual at the given variable values.
    pub fn residual(&self, values: &[Pose]) -> Result<Vector6<f64>, Se3Error> {
        self.residual_with(|v| values[v])
    }

    fn residual_with(&self, get: impl Fn(usize) -> Pose) -> Result<Vector6<f64>, Se3Error> {
        match self {
            Factor::Prior { var, value, .. } => Ok(value.between(&get(*var)).log()?.to_vector()),
            Factor::Between { a, b, measured, .. } => {
                let rel = get(*a).between(&get(*b));
                Ok(measured.between(&rel).log()?.to_vector())
            }
            Factor::AnchorLoop { xi, xj, dgt, dq, measured, .. } => anchor_residual(&get(*xi), &get(*xj), &get(*dgt), &get(*dq), measured),
        }
    }
}

/// `log(between(c, between(dGT * xi, dQ * xj)))`: zero iff the anchored
/// relative pose equals the encounter.
pub fn anchor_residual(xi: &Pose, xj: &Pose, dgt: &Pose, dq: &Pose, c: &Pose) -> Result<Vector6<f64>, Se3Error> {
    let wi = dgt.compose(xi);
    let wj = dq.compose(xj);
    Ok(c.between(&wi.between(&wj)).log()?.to_vector())
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FactorGraph {
    pub keys: Vec<VarKey>,
    pub factors: Vec<Factor>,
}

impl FactorGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_variable(&mut self, key: VarKey) -> usize {
        self.keys.push(key);
        self.keys.len() - 1
    }

    pub fn index_of(&self, key: VarKey) -> Option<usize> {
        self.keys.iter().position(|k| *k == key)
    }

    pub fn add_prior(&mut self, var: usize, value: Pose, information: Matrix6<f64>) {
        self.factors.push(Factor::Prior { var, value, information });
    }

    pub fn add_between(&mut self, a: usize, b: usize, measured: Pose, information: Matrix6<f64>) {
        self.factors.push(Factor::Between { a, b, measured, information });
    }

    pub fn add_anchor_loop(&mut self, xi: usize, xj: usize, dgt: usize, dq: usize, measured: Pose, information: Matrix6<f64>) {
        self.factors.push(Factor::AnchorLoop { xi, xj, dgt, dq, measured, information });
    }

    pub fn count_priors(&self) -> usize {
        self.factors.iter().filter(|f| matches!(f, Factor::Prior { .. })).count()
    }

    pub fn count_between(&self) -> usize {
        self.factors.iter().filter(|f| matches!(f, Factor::Between { .. })).count()
    }

    pub fn count_anchor_loops(&self) -> usize {
        self.factors.iter().filter(|f| matches!(f, Factor::AnchorLoop { .. })).count()
    }

    /// Every factor references existing variables, every variable is
    /// referenced, and every information matrix is symmetric positive definite.
    pub fn validate(&self) -> Result<(), PgoError> {
        let n = self.keys.len();
        let mut used = vec![false; n];
        for (k, f) in self.factors.iter().enumerate() {
            for v in f.variables() {
                if v >= n {
                    return Err(PgoError::Index(format!("factor {k} references variable {v} of {n}")));
                }
                used[v] = true;
            }
            let info = f.information();
            let sym = (info - info.transpose()).abs().max() <= 1e-9 * info.abs().max();
            if !sym || !info.iter().all(|x| x.is_finite()) || info.cholesky().is_none() {
                return Err(PgoError::Invalid(format!("factor {k} information is not symmetric positive definite")));
            }
        }
        if let Some(v) = used.iter().position(|u| !u) {
            return Err(PgoError::Invalid(format!("variable {v} ({:?}) has no factor", self.keys[v])));
        }
        Ok(())
    }

    /// Weighted squared error `sum r^T W r`.
    pub fn error(&self, values: &[Pose]) -> Result<f64, Se3Error> {
        let mut total = 0.0;
        for f in &self.factors {
            let r = f.residual(values)?;
            total += (r.transpose() * f.information() * r)[0];
        }
        Ok(total)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraphParams {
    /// Variance of the GT pose, GT anchor and query origin priors.
    pub pinned_var: f64,
    /// Variance of the query anchor prior.
    pub loose_var: f64,
}

impl Default for GraphParams {
    fn default() -> Self {
        Self { pinned_var: 1e-12, loose_var: 1e4 }
    }
}

fn isotropic_information(var: f64) -> Matrix6<f64> {
    Matrix6::identity() / var
}

/// Builds the two-session anchor graph and its initial values.
///
/// Variables are ordered GT poses, query poses, GT anchor, query anchor.
/// Besides the GT pins, the anchor priors, the odometry and loop edges of
/// both sessions and one factor per encounter, the first query pose gets a
/// pinned prior at its stored value: it fixes the gauge between the query
/// anchor and the query's local frame, so the anchor alone absorbs the
/// offset between the two sessions.
pub fn build_graph(
    gt: &Session,
    query: &Session,
    encounters: &[Encounter],
    anchor_guess: &Pose,
    params: &GraphParams,
) -> Result<(FactorGraph, Vec<Pose>), PgoError> {
    if !(params.pinned_var > 0.0 && params.loose_var > 0.0) {
        return Err(PgoError::Invalid("prior variances must be positive".into()));
    }
    let (n_gt, n_q) = (gt.len(), query.len());
    for e in encounters {
        if e.gt_index >= n_gt || e.query_index >= n_q {
            return Err(PgoError::Index(format!("encounter ({}, {}) outside gt 0..{n_gt}, query 0..{n_q}", e.gt_index, e.query_index)));
        }
    }
    let mut g = FactorGraph::new();
    let mut init = Vec::with_capacity(n_gt + n_q + 2);
    for (i, p) in gt.poses().iter().enumerate() {
        g.add_variable(VarKey::Gt(i));
        init.push(*p);
    }
    for (j, p) in query.poses().iter().enumerate() {
        g.add_variable(VarKey::Query(j));
        init.push(*p);
    }
    let dgt = g.add_variable(VarKey::AnchorGt);
    init.push(Pose::identity());
    let dq = g.add_variable(VarKey::AnchorQuery);
    init.push(*anchor_guess);

    let pinned = isotropic_information(params.pinned_var);
    for (i, p) in gt.poses().iter().enumerate() {
        g.add_prior(i, *p, pinned);
    }
    g.add_prior(dgt, Pose::identity(), pinned);
    g.add_prior(dq, *anchor_guess, isotropic_information(params.loose_var));
    if let Some(first) = query.poses().first() {
        g.add_prior(n_gt, *first, pinned);
    }
    for (offset, s) in [(0, gt), (n_gt, query)] {
        for e in s.graph.odometry.iter().chain(&s.graph.loops) {
            g.add_between(offset + e.from, offset + e.to, e.measurement, e.information);
        }
    }
    for e in encounters {
        let information =
            e.covariance.try_inverse().ok_or_else(|| PgoError::Invalid(format!("encounter ({}, {}) covariance is singular", e.gt_index, e.query_index)))?;
        let information = 0.5 * (information + information.transpose());
        g.add_anchor_loop(e.gt_index, n_gt + e.query_index, dgt, dq, e.relative, information);
    }
    g.validate()?;
    Ok((g, init))
}

/// Optimized values with convergence bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub keys: Vec<VarKey>,
    pub values: Vec<Pose>,
    pub initial_error: f64,
    pub final_error: f64,
    /// Total error after each accepted step, starting with the initial error.
    pub error_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Largest translation (m) and rotation (deg) moved by a pinned GT-side variable.
    pub pinned_shift_m: f64,
    pub pinned_shift_deg: f64,
}

impl Solution {
    pub fn get(&self, key: VarKey) -> Option<Pose> {
        self.keys.iter().position(|k| *k == key).map(|i| self.values[i])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Gt,
    Query,
}

/// Session poses in the world frame: each pose left-composed with its
/// session's optimized anchor.
pub fn to_global(sol: &Solution, side: Side) -> Vec<Pose> {
    let (anchor_key, local): (VarKey, fn(&VarKey) -> bool) = match side {
        Side::Gt => (VarKey::AnchorGt, |k| matches!(k, VarKey::Gt(_))),
        Side::Query => (VarKey::AnchorQuery, |k| matches!(k, VarKey::Query(_))),
    };
    let anchor = sol.get(anchor_key).unwrap_or_default();
    sol.keys.iter().zip(&sol.values).filter(|(k, _)| local(k)).map(|(_, p)| anchor.compose(p)).collect()
}

/// Local (un-anchored) poses of one session.
pub fn local_poses(sol: &Solution, side: Side) -> Vec<Pose> {
    sol.keys
        .iter()
        .zip(&sol.values)
        .filter(|(k, _)| match side {
            Side::Gt => matches!(k, VarKey::Gt(_)),
            Side::Query => matches!(k, VarKey::Query(_)),
        })
        .map(|(_, p)| *p)
        .collect()
}

/// Union of the keyframe clouds placed at the given world poses.
pub fn assemble_map(session: &Session, world: &[Pose]) -> Result<PointCloud, PgoError> {
    if session.keyframes.len() != world.len() {
        return Err(PgoError::LengthMismatch { left: session.keyframes.len(), right: world.len() });
    }
    let mut map = PointCloud::default();
    for (kf, pose) in session.keyframes.iter().zip(world) {
        map.extend_from(&kf.cloud.transformed(pose));
    }
    Ok(map)
}

/// One `index x y z qx qy qz qw` line per pose.
pub fn trajectory_to_text(poses: &[Pose]) -> String {
    let mut s = String::new();
    for (i, p) in poses.iter().enumerate() {
        let t = p.translation();
        let q = p.rotation().quaternion();
        let _ = writeln!(s, "{i} {} {} {} {} {} {} {}", fmt_sig(t.x), fmt_sig(t.y), fmt_sig(t.z), fmt_sig(q.i), fmt_sig(q.j), fmt_sig(q.k), fmt_sig(q.w));
    }
    s
}

pub fn trajectory_from_text(text: &str, path: &str) -> Result<Vec<Pose>, PgoError> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let bad = |msg: String| PgoError::Io { path: format!("{path}:{}", n + 1), msg };
        if fields.len() != 8 {
            return Err(bad(format!("expected 8 fields, found {}", fields.len())));
        }
        let index: usize = fields[0].parse().map_err(|_| bad(format!("bad index {:?}", fields[0])))?;
        if index != out.len() {
            return Err(bad(format!("expected index {}, found {index}", out.len())));
        }
        let pose = Pose::from_fields(&fields[1..]).map_err(|e| bad(e.to_string()))?;
        out.push(pose);
    }
    Ok(out)
}

pub fn save_trajectory(poses: &[Pose], path: &Path) -> Result<(), PgoError> {
    fs::write(path, trajectory_to_text(poses)).map_err(|e| PgoError::Io { path: path.display().to_string(), msg: e.to_string() })
}

pub fn load_trajectory(path: &Path) -> Result<Vec<Pose>, PgoError> {
    let text = fs::read_to_string(path).map_err(|e| PgoError::Io { path: path.display().to_string(), msg: e.to_string() })?;
    trajectory_from_text(&text, &path.display().to_string())
}

static MAX_PIN_SHIFT_M: AtomicU64 = AtomicU64::new(0);
static MAX_PIN_SHIFT_DEG: AtomicU64 = AtomicU64::new(0);

fn record_pin_shift(m: f64, deg: f64) {
    // Non-negative floats order the same as their bit patterns.
    MAX_PIN_SHIFT_M.fetch_max(m.max(0.0).to_bits(), Ordering::Relaxed);
    MAX_PIN_SHIFT_DEG.fetch_max(deg.max(0.0).to_bits(), Ordering::Relaxed);
}

/// Largest pinned GT-side shift `(m, deg)` seen by any [`optimize`] call in
/// this process.
pub fn max_pinned_shift() -> (f64, f64) {
    (f64::from_bits(MAX_PIN_SHIFT_M.load(Ordering::Relaxed)), f64::from_bits(MAX_PIN_SHIFT_DEG.load(Ordering::Relaxed)))
}
