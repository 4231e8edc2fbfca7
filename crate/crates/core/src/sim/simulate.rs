//! Ground-truth session synthesis and odometry drift injection.

use nalgebra::{Matrix6, UnitQuaternion, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::coverage::Waypoint;
use super::lidar::{raycast_scan, LidarSpec};
use super::SimError;
use crate::geometry::{BuildingModel, MeshIndex};
use crate::scan_context::{compute_descriptor, ScParams};
use crate::se3::Pose;
use crate::session::{chain_edges, select_keyframes, Keyframe, PoseGraph, Session, SessionMeta, DEFAULT_SPACING};

#[derive(Debug, Clone, PartialEq)]
pub struct SimParams {
    pub lidar: LidarSpec,
    /// Travel speed between goals (m/s).
    pub speed: f64,
    /// Scans per second; the interpolation step is `speed / scan_rate`.
    pub scan_rate: f64,
    /// Keyframe spacing (m).
    pub spacing: f64,
    /// Sensor height above the model floor (m).
    pub sensor_height: f64,
    pub seed: u64,
    pub sc: ScParams,
    pub frame_label: String,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            lidar: LidarSpec::default(),
            speed: 0.5,
            scan_rate: 10.0,
            spacing: DEFAULT_SPACING,
            sensor_height: 0.5,
            seed: 0,
            sc: ScParams::default(),
            frame_label: "gt".into(),
        }
    }
}

impl SimParams {
    pub fn step(&self) -> f64 {
        self.speed / self.scan_rate
    }

    fn validate(&self) -> Result<(), SimError> {
        self.lidar.validate().map_err(SimError::Invalid)?;
        if !(self.speed > 0.0 && self.scan_rate > 0.0 && self.spacing > 0.0) {
            return Err(SimError::Invalid("speed, scan_rate and spacing must be positive".into()));
        }
        Ok(())
    }
}

/// Constant-speed interpolation through `goals` at height `z`.
///
/// Each segment is split into equal steps no longer than `step` and keeps the
/// yaw of its start goal. The last pose is the final goal with its own yaw.
pub fn simulate_trajectory(goals: &[Waypoint], step: f64, z: f64) -> Vec<Pose> {
    assert!(step > 0.0);
    let mut out = Vec::new();
    for w in goals.windows(2) {
        let (a, b) = (w[0], w[1]);
        let len = (b.x - a.x).hypot(b.y - a.y);
        let n = (len / step - 1e-9).ceil() as usize;
        for s in 0..n {
            let f = s as f64 / n as f64;
            out.push(Pose::from_xyz_yaw(a.x + f * (b.x - a.x), a.y + f * (b.y - a.y), z, a.yaw));
        }
    }
    if let Some(g) = goals.last() {
        out.push(Pose::from_xyz_yaw(g.x, g.y, z, g.yaw));
    }
    out
}

/// Scan of trajectory step `step_index`, with its own random stream.
fn scan_at(index: &MeshIndex, pose: &Pose, spec: &LidarSpec, seed: u64, step_index: usize) -> crate::cloud::PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step_index as u64);
    raycast_scan(index, pose, spec, &mut rng)
}

/// Drives the sensor through `goals` and records a keyframed session whose
/// node poses are exact ground truth.
///
/// The sensor flies at `sensor_height` above the model's lowest point. Only
/// steps that become keyframes are ray-cast; every step owns a random stream
/// derived from `(seed, step)`, so the output equals casting all steps and
/// sampling afterwards.
pub fn simulate_session(model: &BuildingModel, goals: &[Waypoint], params: &SimParams) -> Result<Session, SimError> {
    params.validate()?;
    if goals.is_empty() {
        return Err(SimError::Invalid("goal list is empty".into()));
    }
    let floor = if model.is_empty() { 0.0 } else { model.bounds().min.z };
    let poses = simulate_trajectory(goals, params.step(), floor + params.sensor_height);
    let kept = select_keyframes(&poses, params.spacing);
    let index = MeshIndex::new(model);
    let keyframes: Vec<Keyframe> = kept
        .par_iter()
        .map(|&k| {
            let cloud = scan_at(&index, &poses[k], &params.lidar, params.seed, k);
            let descriptor = compute_descriptor(&cloud, &params.sc);
            Keyframe { cloud, descriptor }
        })
        .collect();
    let nodes: Vec<Pose> = kept.iter().map(|&k| poses[k]).collect();
    let odometry = chain_edges(&nodes, Matrix6::identity());
    let meta = SessionMeta { frame_label: params.frame_label.clone(), spacing: params.spacing, sc: params.sc, lidar: Some(params.lidar) };
    Ok(Session::new(PoseGraph { nodes, odometry, loops: Vec::new() }, keyframes, meta)?)
}

/// Systematic odometry error: translation scale and yaw bias per metre
/// travelled, plus optional white noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriftModel {
    /// Fractional over-estimate of each edge's translation.
    pub trans_drift_per_m: f64,
    /// Yaw added per metre of edge translation (rad/m).
    pub yaw_drift_per_m: f64,
    /// Per-axis translation noise per edge (m).
    pub trans_noise_sigma: f64,
    /// Yaw noise per edge (rad).
    pub yaw_noise_sigma: f64,
    pub seed: u64,
}

impl Default for DriftModel {
    fn default() -> Self {
        Self { trans_drift_per_m: 0.0, yaw_drift_per_m: 0.0, trans_noise_sigma: 0.0, yaw_noise_sigma: 0.0, seed: 0 }
    }
}

impl DriftModel {
    pub fn validate(&self) -> Result<(), SimError> {
        let vals = [self.trans_drift_per_m, self.yaw_drift_per_m, self.trans_noise_sigma, self.yaw_noise_sigma];
        if vals.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(SimError::Invalid("drift rates and noise must be finite and nonnegative".into()));
        }
        Ok(())
    }

    /// Drifted copy of one odometry measurement.
    pub fn perturb(&self, m: &Pose, rng: &mut ChaCha8Rng) -> Pose {
        let t = m.translation();
        let len = t.norm();
        let mut t2 = t * (1.0 + self.trans_drift_per_m);
        let mut yaw = self.yaw_drift_per_m * len;
        if self.trans_noise_sigma > 0.0 {
            let n = Normal::new(0.0, self.trans_noise_sigma).unwrap();
            t2 += Vector3::new(n.sample(rng), n.sample(rng), n.sample(rng));
        }
        if self.yaw_noise_sigma > 0.0 {
            yaw += Normal::new(0.0, self.yaw_noise_sigma).unwrap().sample(rng);
        }
        let r = m.rotation() * UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw);
        Pose::from_parts(t2, r)
    }
}

/// Query session with drifted odometry. Node poses are re-chained from node 0
/// through the perturbed edges; loop edges, clouds and descriptors are kept.
pub fn inject_drift(gt: &Session, d: &DriftModel) -> Result<Session, SimError> {
    d.validate()?;
    gt.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(d.seed);
    let mut out = gt.clone();
    for e in &mut out.graph.odometry {
        e.measurement = d.perturb(&e.measurement, &mut rng);
    }
    let chained = out.graph.replay_odometry();
    out.graph.nodes[..chained.len()].copy_from_slice(&chained);
    out.meta.frame_label = "query".into();
    Ok(out)
}

/// Re-expresses a session in another local frame: every node pose is
/// left-multiplied by `g`. Relative measurements are unchanged.
pub fn offset_session(s: &Session, g: &Pose) -> Session {
    let mut out = s.clone();
    for n in &mut out.graph.nodes {
        *n = g.compose(n);
    }
    out
}
