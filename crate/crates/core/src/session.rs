//! Session data: a pose graph plus one point cloud and descriptor per keyframe.
//!
//! On disk a session is a directory:
//!
//! ```text
//! poses.graph            g2o-style VERTEX_SE3:QUAT / EDGE_SE3:QUAT lines
//! keyframes/000000.pc    PCXYZ001 binary clouds, sensor frame
//! descriptors/000000.dsc SCDESC01 binary descriptors
//! meta.txt               key=value lines
//! ```
//!
//! Poses and information entries are written with nine significant digits,
//! clouds and descriptors bit-exactly.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use nalgebra::Matrix6;
use thiserror::Error;

use crate::cloud::{CloudError, PointCloud};
use crate::scan_context::{compute_descriptor, Descriptor, ScError, ScParams};
use crate::se3::Pose;
use crate::sim::LidarSpec;
use crate::textfmt::fmt_sig;

pub const GRAPH_FILE: &str = "poses.graph";
pub const META_FILE: &str = "meta.txt";
pub const KEYFRAME_DIR: &str = "keyframes";
pub const DESCRIPTOR_DIR: &str = "descriptors";

/// Default keyframe spacing (m).
pub const DEFAULT_SPACING: f64 = 1.0;

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Format { path: String, line: usize, msg: String },
    #[error("graph has {nodes} nodes but keyframe data disagrees: {detail}")]
    MissingKeyframe { nodes: usize, detail: String },
    #[error("invalid session: {0}")]
    Invalid(String),
    #[error(transparent)]
    Cloud(#[from] CloudError),
    #[error(transparent)]
    Descriptor(#[from] ScError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> SessionError + '_ {
    move |source| SessionError::Io { path: path.display().to_string(), source }
}

/// A relative-pose constraint `nodes[from].between(nodes[to]) ~ measurement`.
#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub measurement: Pose,
    /// Ordered `(x, y, z, rx, ry, rz)`.
    pub information: Matrix6<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PoseGraph {
    pub nodes: Vec<Pose>,
    /// Edges `i -> i + 1`.
    pub odometry: Vec<Edge>,
    /// Intra-session loop closures.
    pub loops: Vec<Edge>,
}

fn is_spd(m: &Matrix6<f64>) -> bool {
    let sym = (m - m.transpose()).abs().max() <= 1e-9 * m.abs().max().max(1.0);
    sym && m.iter().all(|v| v.is_finite()) && m.cholesky().is_some()
}

impl PoseGraph {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn validate(&self) -> Result<(), SessionError> {
        let n = self.nodes.len();
        for e in &self.odometry {
            if e.to != e.from + 1 || e.to >= n {
                return Err(SessionError::Invalid(format!("odometry edge {} -> {} is not a consecutive pair of {n} nodes", e.from, e.to)));
            }
        }
        for e in self.odometry.iter().chain(&self.loops) {
            if e.from >= n || e.to >= n {
                return Err(SessionError::Invalid(format!("edge {} -> {} references a node outside 0..{n}", e.from, e.to)));
            }
            if !is_spd(&e.information) {
                return Err(SessionError::Invalid(format!("edge {} -> {} information is not symmetric positive definite", e.from, e.to)));
            }
        }
        Ok(())
    }

    /// Chains odometry measurements from node 0. Stops at the first gap.
    pub fn replay_odometry(&self) -> Vec<Pose> {
        let mut out = Vec::with_capacity(self.nodes.len());
        if let Some(first) = self.nodes.first() {
            out.push(*first);
        }
        for (k, e) in self.odometry.iter().enumerate() {
            if e.from != k {
                break;
            }
            let next = out[k].compose(&e.measurement);
            out.push(next);
        }
        out
    }

    pub fn to_g2o(&self) -> String {
        let mut s = String::new();
        for (id, p) in self.nodes.iter().enumerate() {
            let _ = writeln!(s, "VERTEX_SE3:QUAT {id} {p}");
        }
        for e in self.odometry.iter().chain(&self.loops) {
            let _ = write!(s, "EDGE_SE3:QUAT {} {} {}", e.from, e.to, e.measurement);
            for r in 0..6 {
                for c in r..6 {
                    let _ = write!(s, " {}", fmt_sig(e.information[(r, c)]));
                }
            }
            s.push('\n');
        }
        s
    }

    /// Parses the g2o subset written by [`PoseGraph::to_g2o`].
    ///
    /// Vertex ids must be dense `0..n`. The first edge `i -> i + 1` for each
    /// `i` is odometry; every other edge is an intra-session loop. `path` is
    /// only used in error messages.
    pub fn from_g2o(text: &str, path: &str) -> Result<PoseGraph, SessionError> {
        let err = |line: usize, msg: String| SessionError::Format { path: path.to_string(), line, msg };
        let mut vertices: Vec<(usize, usize, Pose)> = Vec::new();
        let mut edges: Vec<(usize, Edge)> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let fields: Vec<&str> = content.split_whitespace().collect();
            let parse_id = |s: &str| s.parse::<usize>().map_err(|e| err(line, format!("bad id {s:?}: {e}")));
            match fields[0] {
                "VERTEX_SE3:QUAT" => {
                    if fields.len() != 9 {
                        return Err(err(line, format!("vertex needs 9 fields, found {}", fields.len())));
                    }
                    let id = parse_id(fields[1])?;
                    let pose = Pose::from_fields(&fields[2..9]).map_err(|e| err(line, e.to_string()))?;
                    vertices.push((line, id, pose));
                }
                "EDGE_SE3:QUAT" => {
                    if fields.len() != 31 {
                        return Err(err(line, format!("edge needs 31 fields, found {}", fields.len())));
                    }
                    let from = parse_id(fields[1])?;
                    let to = parse_id(fields[2])?;
                    let measurement = Pose::from_fields(&fields[3..10]).map_err(|e| err(line, e.to_string()))?;
                    let mut information = Matrix6::zeros();
                    let mut k = 10;
                    for r in 0..6 {
                        for c in r..6 {
                            let v: f64 = fields[k].parse().map_err(|e| err(line, format!("bad information entry {:?}: {e}", fields[k])))?;
                            information[(r, c)] = v;
                            information[(c, r)] = v;
                            k += 1;
                        }
                    }
                    if !is_spd(&information) {
                        return Err(err(line, "information matrix is not positive definite".into()));
                    }
                    edges.push((line, Edge { from, to, measurement, information }));
                }
                other => return Err(err(line, format!("unknown record {other:?}"))),
            }
        }

        let n = vertices.len();
        let mut nodes: Vec<Option<Pose>> = vec![None; n];
        for (line, id, pose) in vertices {
            if id >= n {
                return Err(err(line, format!("vertex id {id} outside dense range 0..{n}")));
            }
            if nodes[id].replace(pose).is_some() {
                return Err(err(line, format!("duplicate vertex id {id}")));
            }
        }
        let nodes: Vec<Pose> = nodes.into_iter().map(|p| p.unwrap()).collect();

        let mut graph = PoseGraph { nodes, ..Default::default() };
        let mut has_odometry = vec![false; n];
        for (line, e) in edges {
            if e.from >= n || e.to >= n {
                return Err(err(line, format!("edge {} -> {} references a node outside 0..{n}", e.from, e.to)));
            }
            if e.to == e.from + 1 && !has_odometry[e.from] {
                has_odometry[e.from] = true;
                graph.odometry.push(e);
            } else {
                graph.loops.push(e);
            }
        }
        graph.odometry.sort_by_key(|e| e.from);
        Ok(graph)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Keyframe {
    pub cloud: PointCloud,
    pub descriptor: Descriptor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionMeta {
    pub frame_label: String,
    pub spacing: f64,
    pub sc: ScParams,
    /// Sensor model, when the session was simulated.
    pub lidar: Option<LidarSpec>,
}

impl Default for SessionMeta {
    fn default() -> Self {
        Self { frame_label: "local".into(), spacing: DEFAULT_SPACING, sc: ScParams::default(), lidar: None }
    }
}

impl SessionMeta {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "frame_label={}", self.frame_label);
        let _ = writeln!(s, "spacing={}", fmt_sig(self.spacing));
        let _ = writeln!(s, "sc_rings={}", self.sc.rings);
        let _ = writeln!(s, "sc_sectors={}", self.sc.sectors);
        let _ = writeln!(s, "sc_max_radius={}", fmt_sig(self.sc.max_radius));
        let _ = writeln!(s, "sc_sensor_height={}", fmt_sig(self.sc.sensor_height));
        if let Some(l) = &self.lidar {
            let _ = writeln!(s, "lidar_channels={}", l.channels);
            let _ = writeln!(s, "lidar_vfov_min_deg={}", fmt_sig(l.vertical_fov_deg.0));
            let _ = writeln!(s, "lidar_vfov_max_deg={}", fmt_sig(l.vertical_fov_deg.1));
            let _ = writeln!(s, "lidar_horizontal_steps={}", l.horizontal_steps);
            let _ = writeln!(s, "lidar_max_range={}", fmt_sig(l.max_range));
            let _ = writeln!(s, "lidar_noise_sigma={}", fmt_sig(l.noise_sigma));
        }
        s
    }

    pub fn from_text(text: &str, path: &str) -> Result<SessionMeta, SessionError> {
        let mut meta = SessionMeta::default();
        let mut lidar = LidarSpec::default();
        let mut lidar_keys = 0;
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.trim();
            if content.is_empty() || content.starts_with('#') {
                continue;
            }
            let err = |msg: String| SessionError::Format { path: path.to_string(), line, msg };
            let (key, value) = content.split_once('=').ok_or_else(|| err(format!("expected key=value, found {content:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            let float = || value.parse::<f64>().map_err(|e| err(format!("{key}: {e}")));
            let count = || value.parse::<usize>().map_err(|e| err(format!("{key}: {e}")));
            match key {
                "frame_label" => meta.frame_label = value.to_string(),
                "spacing" => meta.spacing = float()?,
                "sc_rings" => meta.sc.rings = count()?,
                "sc_sectors" => meta.sc.sectors = count()?,
                "sc_max_radius" => meta.sc.max_radius = float()?,
                "sc_sensor_height" => meta.sc.sensor_height = float()?,
                k if k.starts_with("lidar_") => {
                    lidar_keys += 1;
                    match k {
                        "lidar_channels" => lidar.channels = count()?,
                        "lidar_vfov_min_deg" => lidar.vertical_fov_deg.0 = float()?,
                        "lidar_vfov_max_deg" => lidar.vertical_fov_deg.1 = float()?,
                        "lidar_horizontal_steps" => lidar.horizontal_steps = count()?,
                        "lidar_max_range" => lidar.max_range = float()?,
                        "lidar_noise_sigma" => lidar.noise_sigma = float()?,
                        _ => return Err(err(format!("unknown key {k:?}"))),
                    }
                }
                other => return Err(err(format!("unknown key {other:?}"))),
            }
        }
        if lidar_keys > 0 {
            meta.lidar = Some(lidar);
        }
        Ok(meta)
    }
}

/// One mapping run: pose graph plus per-keyframe cloud and descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub graph: PoseGraph,
    pub keyframes: Vec<Keyframe>,
    pub meta: SessionMeta,
}

impl Session {
    pub fn new(graph: PoseGraph, keyframes: Vec<Keyframe>, meta: SessionMeta) -> Result<Self, SessionError> {
        let s = Self { graph, keyframes, meta };
        s.validate()?;
        Ok(s)
    }

    pub fn empty(meta: SessionMeta) -> Self {
        Self { graph: PoseGraph::default(), keyframes: Vec::new(), meta }
    }

    pub fn len(&self) -> usize {
        self.graph.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graph.nodes.is_empty()
    }

    pub fn poses(&self) -> &[Pose] {
        &self.graph.nodes
    }

    pub fn descriptors(&self) -> Vec<Descriptor> {
        self.keyframes.iter().map(|k| k.descriptor.clone()).collect()
    }

    pub fn validate(&self) -> Result<(), SessionError> {
        if self.keyframes.len() != self.graph.nodes.len() {
            return Err(SessionError::MissingKeyframe { nodes: self.graph.nodes.len(), detail: format!("{} keyframes", self.keyframes.len()) });
        }
        if self.keyframes.iter().any(|k| !k.cloud.is_finite()) {
            return Err(SessionError::Invalid("keyframe cloud has non-finite points".into()));
        }
        self.graph.validate()
    }
}

fn keyframe_name(i: usize, ext: &str) -> String {
    format!("{i:06}.{ext}")
}

pub fn save_session(s: &Session, dir: &Path) -> Result<(), SessionError> {
    s.validate()?;
    let kf_dir = dir.join(KEYFRAME_DIR);
    let dsc_dir = dir.join(DESCRIPTOR_DIR);
    for d in [dir, kf_dir.as_path(), dsc_dir.as_path()] {
        fs::create_dir_all(d).map_err(io_err(d))?;
    }
    let graph_path = dir.join(GRAPH_FILE);
    fs::write(&graph_path, s.graph.to_g2o()).map_err(io_err(&graph_path))?;
    let meta_path = dir.join(META_FILE);
    fs::write(&meta_path, s.meta.to_text()).map_err(io_err(&meta_path))?;
    for (i, kf) in s.keyframes.iter().enumerate() {
        kf.cloud.save(&kf_dir.join(keyframe_name(i, "pc")))?;
        kf.descriptor.save(&dsc_dir.join(keyframe_name(i, "dsc")))?;
    }
    Ok(())
}

fn count_files(dir: &Path, ext: &str) -> Result<usize, SessionError> {
    if !dir.exists() {
        return Ok(0);
    }
    let mut n = 0;
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        if entry.path().extension().and_then(|e| e.to_str()) == Some(ext) {
            n += 1;
        }
    }
    Ok(n)
}

pub fn load_session(dir: &Path) -> Result<Session, SessionError> {
    if !dir.is_dir() {
        return Err(SessionError::Io { path: dir.display().to_string(), source: io::Error::new(io::ErrorKind::NotFound, "session directory not found") });
    }
    let graph_path = dir.join(GRAPH_FILE);
    let text = fs::read_to_string(&graph_path).map_err(io_err(&graph_path))?;
    let graph = PoseGraph::from_g2o(&text, &graph_path.display().to_string())?;
    let meta_path = dir.join(META_FILE);
    let meta_text = fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
    let meta = SessionMeta::from_text(&meta_text, &meta_path.display().to_string())?;

    let n = graph.nodes.len();
    let kf_dir = dir.join(KEYFRAME_DIR);
    let dsc_dir = dir.join(DESCRIPTOR_DIR);
    for (d, ext) in [(&kf_dir, "pc"), (&dsc_dir, "dsc")] {
        let found = count_files(d, ext)?;
        if found != n {
            return Err(SessionError::MissingKeyframe { nodes: n, detail: format!("{found} .{ext} files in {}", d.display()) });
        }
    }
    let mut keyframes = Vec::with_capacity(n);
    for i in 0..n {
        let pc: PathBuf = kf_dir.join(keyframe_name(i, "pc"));
        let dsc: PathBuf = dsc_dir.join(keyframe_name(i, "dsc"));
        for p in [&pc, &dsc] {
            if !p.exists() {
                return Err(SessionError::MissingKeyframe { nodes: n, detail: format!("{} is missing", p.display()) });
            }
        }
        keyframes.push(Keyframe { cloud: PointCloud::load(&pc)?, descriptor: Descriptor::load(&dsc, meta.sc.max_radius)? });
    }
    Session::new(graph, keyframes, meta)
}

/// Indices kept by equidistant sampling: the first pose, then every pose at
/// which the path length travelled since the last kept pose reaches `spacing`.
pub fn select_keyframes(poses: &[Pose], spacing: f64) -> Vec<usize> {
    assert!(spacing > 0.0, "keyframe spacing must be positive");
    if poses.is_empty() {
        return Vec::new();
    }
    let mut kept = vec![0];
    let mut travelled = 0.0;
    for k in 1..poses.len() {
        travelled += (poses[k].translation() - poses[k - 1].translation()).norm();
        // Tolerance absorbs accumulated rounding of fixed interpolation steps.
        if travelled + 1e-9 * spacing.max(1.0) >= spacing {
            kept.push(k);
            travelled = 0.0;
        }
    }
    kept
}

/// Odometry chain between consecutive kept poses, each with `information`.
pub fn chain_edges(nodes: &[Pose], information: Matrix6<f64>) -> Vec<Edge> {
    nodes.windows(2).enumerate().map(|(i, w)| Edge { from: i, to: i + 1, measurement: w[0].between(&w[1]), information }).collect()
}

/// Samples keyframes from a trajectory of `(pose, sensor-frame cloud)` and
/// computes their descriptors with `meta.sc`. Edges get identity information.
pub fn sample_keyframes(trajectory: Vec<(Pose, PointCloud)>, spacing: f64, meta: SessionMeta) -> Session {
    let poses: Vec<Pose> = trajectory.iter().map(|(p, _)| *p).collect();
    let kept = select_keyframes(&poses, spacing);
    let mut trajectory: Vec<Option<(Pose, PointCloud)>> = trajectory.into_iter().map(Some).collect();
    let mut nodes = Vec::with_capacity(kept.len());
    let mut keyframes = Vec::with_capacity(kept.len());
    for i in kept {
        let (pose, cloud) = trajectory[i].take().unwrap();
        nodes.push(pose);
        let descriptor = compute_descriptor(&cloud, &meta.sc);
        keyframes.push(Keyframe { cloud, descriptor });
    }
    let odometry = chain_edges(&nodes, Matrix6::identity());
    Session { graph: PoseGraph { nodes, odometry, loops: Vec::new() }, keyframes, meta: SessionMeta { spacing, ..meta } }
}
