//! Inter-session loop detection and scan registration.
//!
//! Candidates come from two sources: scan-context descriptor matches (which
//! need no pose knowledge) and a radius search around query keyframes mapped
//! through the current anchor estimate. Each candidate is registered with
//! point-to-point ICP and kept as an [`Encounter`] when its fitness is low.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::fmt::Write as _;

use nalgebra::{Matrix3, Matrix6, Point3, UnitQuaternion, Vector3, Vector6};
use rayon::prelude::*;
use thiserror::Error;

use crate::cloud::PointCloud;
use crate::geometry::KdTree;
use crate::scan_context::{query, DEFAULT_SIM_THRESHOLD};
use crate::se3::Pose;
use crate::session::Session;
use crate::textfmt::fmt_sig;

/// Minimum points on each side of a registration.
pub const MIN_ICP_POINTS: usize = 10;

/// Coarse-to-fine stages stop halving below this voxel size (m).
pub const MIN_PYRAMID_VOXEL: f64 = 0.04;

/// Coarse stages stop once an update moves less than this fraction of the voxel.
const STAGE_TOLERANCE: f64 = 1e-3;

/// Lower bound of the adaptive covariance scale (m^2).
pub const COVARIANCE_FLOOR: f64 = 1e-4;

#[derive(Debug, Error, PartialEq)]
pub enum RegError {
    #[error("too few points for registration: source {source_len}, target {target_len} (need {MIN_ICP_POINTS})")]
    TooFewPoints { source_len: usize, target_len: usize },
    #[error("no correspondences within {gate} m")]
    NoCorrespondences { gate: f64 },
    #[error("invalid ICP parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IcpParams {
    /// Correspondence gate (m).
    pub max_corr_dist: f64,
    pub max_iterations: usize,
    /// Stop when the incremental update (translation norm plus rotation
    /// angle) falls below this.
    pub convergence_eps: f64,
    /// Encounters with a higher fitness are rejected (m^2).
    pub fitness_threshold: f64,
    /// Voxel size of the first coarse-to-fine stage (m); 0 disables the
    /// pyramid. Stages halve the size down to [`MIN_PYRAMID_VOXEL`], then run
    /// at full resolution.
    pub coarse_voxel: f64,
}

impl Default for IcpParams {
    fn default() -> Self {
        Self { max_corr_dist: 1.0, max_iterations: 60, convergence_eps: 1e-7, fitness_threshold: 0.04, coarse_voxel: 0.8 }
    }
}

impl IcpParams {
    pub fn validate(&self) -> Result<(), RegError> {
        let ok = self.max_corr_dist > 0.0 && self.max_iterations > 0 && self.convergence_eps > 0.0 && self.fitness_threshold > 0.0 && self.coarse_voxel >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(RegError::InvalidParams(format!("{self:?}")))
        }
    }
}

/// Mean squared correspondence error before and after one update, measured
/// on the same correspondence set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IcpStep {
    pub error_before: f64,
    pub error_after: f64,
    pub correspondences: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcpResult {
    /// Maps source-frame points into the target frame.
    pub transform: Pose,
    /// Mean squared distance of the final inlier correspondences (m^2).
    pub fitness: f64,
    pub inliers: usize,
    pub iterations: usize,
    pub converged: bool,
    pub trace: Vec<IcpStep>,
}

/// Least-squares rigid motion taking `src[k]` onto `dst[k]`.
pub fn kabsch(src: &[Point3<f64>], dst: &[Point3<f64>]) -> Pose {
    let n = src.len() as f64;
    let cs = src.iter().fold(Vector3::zeros(), |a, p| a + p.coords) / n;
    let cd = dst.iter().fold(Vector3::zeros(), |a, p| a + p.coords) / n;
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (s.coords - cs) * (d.coords - cd).transpose();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let r = v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * u.transpose();
    let rot = UnitQuaternion::from_matrix(&r);
    let t = cd - rot * cs;
    Pose::from_parts(t, rot)
}

fn mean_sq(src: &[Point3<f64>], dst: &[Point3<f64>], pose: &Pose) -> f64 {
    src.iter().zip(dst).map(|(s, d)| (pose.transform_point(s) - d).norm_squared()).sum::<f64>() / src.len() as f64
}

/// Point-to-point ICP against a prebuilt target index.
pub fn icp_indexed(source: &[Point3<f64>], target: &[Point3<f64>], tree: &KdTree, init: &Pose, params: &IcpParams) -> Result<IcpResult, RegError> {
    params.validate()?;
    if source.len() < MIN_ICP_POINTS || target.len() < MIN_ICP_POINTS {
        return Err(RegError::TooFewPoints { source_len: source.len(), target_len: target.len() });
    }
    let gate2 = params.max_corr_dist * params.max_corr_dist;
    let correspond = |pose: &Pose| -> (Vec<Point3<f64>>, Vec<Point3<f64>>, f64) {
        let mut src = Vec::with_capacity(source.len());
        let mut dst = Vec::with_capacity(source.len());
        let mut sum = 0.0;
        for p in source {
            let q = pose.transform_point(p);
            if let Some((idx, d2)) = tree.nearest(&q) {
                if d2 <= gate2 {
                    src.push(q);
                    dst.push(target[idx]);
                    sum += d2;
                }
            }
        }
        (src, dst, sum)
    };

    let mut pose = *init;
    let mut trace = Vec::new();
    let mut converged = false;
    for _ in 0..params.max_iterations {
        let (src, dst, sum) = correspond(&pose);
        if src.len() < 3 {
            return Err(RegError::NoCorrespondences { gate: params.max_corr_dist });
        }
        let before = sum / src.len() as f64;
        let delta = kabsch(&src, &dst);
        let after = mean_sq(&src, &dst, &delta);
        if after > before {
            // Only rounding can make the closed-form update worse; we are at the optimum.
            converged = true;
            break;
        }
        trace.push(IcpStep { error_before: before, error_after: after, correspondences: src.len() });
        pose = delta.compose(&pose);
        if delta.translation().norm() + delta.rotation_angle() < params.convergence_eps {
            converged = true;
            break;
        }
    }
    let (src, _, sum) = correspond(&pose);
    if src.is_empty() {
        return Err(RegError::NoCorrespondences { gate: params.max_corr_dist });
    }
    Ok(IcpResult { transform: pose, fitness: sum / src.len() as f64, inliers: src.len(), iterations: trace.len(), converged, trace })
}

/// Registers `source` onto `target` starting from `init`.
///
/// Sparse multi-beam scans have many point-to-point fixed points a few
/// centimetres from the optimum, where each point pairs with a neighbour
/// along its scan line. Running first on voxel centroids (which smooth the
/// scan lines into surfaces, with the source binned on the target's grid)
/// and then at full resolution avoids them. The
/// trace and iteration count cover all stages; fitness is from the last.
pub fn icp(source: &PointCloud, target: &PointCloud, init: &Pose, params: &IcpParams) -> Result<IcpResult, RegError> {
    params.validate()?;
    if source.len() < MIN_ICP_POINTS || target.len() < MIN_ICP_POINTS {
        return Err(RegError::TooFewPoints { source_len: source.len(), target_len: target.len() });
    }
    let mut pose = *init;
    let mut trace = Vec::new();
    if params.coarse_voxel > 0.0 {
        let mut voxel = params.coarse_voxel;
        let mut stages = Vec::new();
        while voxel >= MIN_PYRAMID_VOXEL {
            stages.push(voxel);
            voxel *= 0.5;
        }
        // The source is re-binned in the target frame every iteration so both
        // clouds share one voxel grid and their centroids agree at the truth.
        for voxel in stages {
            // Re-binning jitters at the micro scale; a stage only has to land
            // in the basin of the next one.
            let single = IcpParams { max_iterations: 1, convergence_eps: params.convergence_eps.max(STAGE_TOLERANCE * voxel), ..*params };
            let dst = target.voxel_downsample(voxel).to_f64();
            if dst.len() < MIN_ICP_POINTS {
                continue;
            }
            let tree = KdTree::new(&dst);
            for _ in 0..params.max_iterations {
                let src = source.transformed(&pose).voxel_downsample(voxel).to_f64();
                if src.len() < MIN_ICP_POINTS {
                    break;
                }
                match icp_indexed(&src, &dst, &tree, &Pose::identity(), &single) {
                    Ok(r) => {
                        pose = r.transform.compose(&pose);
                        let done = r.converged || r.trace.is_empty();
                        trace.extend(r.trace);
                        if done {
                            break;
                        }
                    }
                    Err(RegError::NoCorrespondences { .. }) => break,
                    Err(e) => return Err(e),
                }
            }
        }
    }
    let src = source.to_f64();
    let dst = target.to_f64();
    let tree = KdTree::new(&dst);
    let mut r = icp_indexed(&src, &dst, &tree, &pose, params)?;
    trace.extend(std::mem::take(&mut r.trace));
    r.iterations = trace.len();
    r.trace = trace;
    Ok(r)
}

/// `max(fitness, floor) * diag(1, 1, 1, 4, 4, 4)`, ordered `(x, y, z, rx, ry, rz)`.
pub fn adaptive_covariance(fitness: f64, floor: f64) -> Matrix6<f64> {
    let s = fitness.max(floor);
    Matrix6::from_diagonal(&Vector6::new(s, s, s, 4.0 * s, 4.0 * s, 4.0 * s))
}

/// A registered inter-session loop between GT keyframe `gt_index` and query
/// keyframe `query_index`.
#[derive(Debug, Clone, PartialEq)]
pub struct Encounter {
    pub gt_index: usize,
    pub query_index: usize,
    /// Pose of query keyframe j in the frame of GT keyframe i.
    pub relative: Pose,
    pub covariance: Matrix6<f64>,
    pub fitness: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum CandidateSource {
    Descriptor,
    Proximity,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub gt_index: usize,
    pub query_index: usize,
    /// Initial guess for the encounter's relative pose.
    pub init: Pose,
    pub source: CandidateSource,
    /// Descriptor similarity, when the candidate came from a descriptor match.
    pub similarity: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoopParams {
    pub icp: IcpParams,
    /// Proximity search radius (m).
    pub radius: f64,
    pub sim_threshold: f64,
    /// Descriptor matches kept per query keyframe.
    pub descriptor_top_k: usize,
    /// Voxel size of the source subsampling before ICP (m).
    pub source_voxel: f64,
    /// GT keyframes merged on each side of the target keyframe.
    pub target_neighbors: usize,
}

impl Default for LoopParams {
    fn default() -> Self {
        Self { icp: IcpParams::default(), radius: 10.0, sim_threshold: DEFAULT_SIM_THRESHOLD, descriptor_top_k: 1, source_voxel: 0.15, target_neighbors: 1 }
    }
}

/// Yaw of the query sensor relative to the GT sensor implied by a column
/// shift, wrapped to `(-pi, pi]`.
pub fn shift_to_yaw(shift: usize, sectors: usize) -> f64 {
    let yaw = -(shift as f64) * TAU / sectors as f64;
    let wrapped = yaw.rem_euclid(TAU);
    if wrapped > std::f64::consts::PI {
        wrapped - TAU
    } else {
        wrapped
    }
}

/// Union of descriptor matches and proximity pairs, sorted by `(i, j)`.
///
/// Descriptor candidates start from the shift-derived yaw with zero
/// translation. Proximity pairs link each query keyframe, mapped into the GT
/// frame by `anchor_guess`, to the nearest GT keyframe within `radius`, and
/// start from the relative pose that mapping implies. A pair found both ways
/// keeps the descriptor initialisation.
pub fn detect_candidates(gt: &Session, query_session: &Session, anchor_guess: &Pose, params: &LoopParams) -> Vec<Candidate> {
    let mut out: BTreeMap<(usize, usize), Candidate> = BTreeMap::new();
    if gt.is_empty() || query_session.is_empty() {
        return Vec::new();
    }
    let db = gt.descriptors();
    for (j, kf) in query_session.keyframes.iter().enumerate() {
        for m in query(&db, &kf.descriptor, params.sim_threshold, params.descriptor_top_k) {
            let yaw = shift_to_yaw(m.shift, kf.descriptor.sectors());
            out.insert(
                (m.index, j),
                Candidate {
                    gt_index: m.index,
                    query_index: j,
                    init: Pose::from_xyz_yaw(0.0, 0.0, 0.0, yaw),
                    source: CandidateSource::Descriptor,
                    similarity: Some(m.similarity),
                },
            );
        }
    }
    let gt_points: Vec<Point3<f64>> = gt.poses().iter().map(|p| Point3::from(*p.translation())).collect();
    let tree = KdTree::new(&gt_points);
    for (j, xq) in query_session.poses().iter().enumerate() {
        let world = anchor_guess.compose(xq);
        let Some((i, d2)) = tree.nearest(&Point3::from(*world.translation())) else {
            continue;
        };
        if d2 <= params.radius * params.radius {
            out.entry((i, j)).or_insert(Candidate {
                gt_index: i,
                query_index: j,
                init: gt.poses()[i].between(&world),
                source: CandidateSource::Proximity,
                similarity: None,
            });
        }
    }
    out.into_values().collect()
}

/// Target cloud for GT keyframe `i`: its scan merged with up to `neighbors`
/// keyframes on each side, all expressed in keyframe `i`'s frame.
pub fn local_submap(gt: &Session, i: usize, neighbors: usize) -> PointCloud {
    let n = gt.len();
    let lo = i.saturating_sub(neighbors);
    let hi = (i + neighbors).min(n - 1);
    let xi = gt.poses()[i];
    let mut out = PointCloud::default();
    for k in lo..=hi {
        let rel = xi.between(&gt.poses()[k]);
        out.extend_from(&gt.keyframes[k].cloud.transformed(&rel));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub enum Rejection {
    Fitness(f64),
    Failed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncounterReport {
    pub candidates: Vec<Candidate>,
    pub encounters: Vec<Encounter>,
    /// `(i, j, reason)` for every candidate that did not become an encounter.
    pub rejected: Vec<(usize, usize, Rejection)>,
}

/// Registers every candidate pair and keeps the well-fitting ones.
pub fn register_candidates(gt: &Session, query_session: &Session, candidates: Vec<Candidate>, params: &LoopParams) -> EncounterReport {
    let results: Vec<(Candidate, Result<IcpResult, RegError>)> = candidates
        .par_iter()
        .map(|c| {
            let source = query_session.keyframes[c.query_index].cloud.voxel_subsample(params.source_voxel);
            let target = local_submap(gt, c.gt_index, params.target_neighbors);
            (*c, icp(&source, &target, &c.init, &params.icp))
        })
        .collect();
    let mut encounters = Vec::new();
    let mut rejected = Vec::new();
    for (c, r) in results {
        match r {
            Ok(r) if r.fitness <= params.icp.fitness_threshold => encounters.push(Encounter {
                gt_index: c.gt_index,
                query_index: c.query_index,
                relative: r.transform,
                covariance: adaptive_covariance(r.fitness, COVARIANCE_FLOOR),
                fitness: r.fitness,
            }),
            Ok(r) => rejected.push((c.gt_index, c.query_index, Rejection::Fitness(r.fitness))),
            Err(e) => rejected.push((c.gt_index, c.query_index, Rejection::Failed(e.to_string()))),
        }
    }
    EncounterReport { candidates, encounters, rejected }
}

/// Candidate detection followed by ICP and the fitness gate.
pub fn build_encounters(gt: &Session, query_session: &Session, anchor_guess: &Pose, params: &LoopParams) -> EncounterReport {
    let candidates = detect_candidates(gt, query_session, anchor_guess, params);
    register_candidates(gt, query_session, candidates, params)
}

/// One `i j x y z qx qy qz qw fitness` line per encounter.
pub fn encounters_to_text(encounters: &[Encounter]) -> String {
    let mut s = String::new();
    for e in encounters {
        let _ = writeln!(s, "{} {} {} {}", e.gt_index, e.query_index, e.relative, fmt_sig(e.fitness));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::MeshIndex;
    use crate::se3::{rotation_error_deg, translation_error_m};
    use crate::sim::{self, scene, LidarSpec, SimParams, Waypoint};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn room_scan(seed: u64) -> PointCloud {
        let mut model = scene::box_room([0.0, 0.0], [7.0, 5.0], 3.0);
        model.extend(
            &crate::geometry::BuildingModel::new(scene::solid_box(nalgebra::Point3::new(4.5, 1.0, 0.0), nalgebra::Point3::new(5.0, 1.6, 1.2))).unwrap(),
        );
        let index = MeshIndex::new(&model);
        let spec = LidarSpec { horizontal_steps: 360, ..Default::default() };
        sim::raycast_scan(&index, &Pose::from_xyz_yaw(2.5, 2.0, 0.5, 0.2), &spec, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn kabsch_recovers_exact_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let src: Vec<Point3<f64>> =
            (0..50).map(|_| Point3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-1.0..1.0))).collect();
        let t = Pose::new(Vector3::new(0.3, -0.2, 0.1), nalgebra::Quaternion::new(0.9, 0.1, -0.2, 0.3));
        let dst: Vec<Point3<f64>> = src.iter().map(|p| t.transform_point(p)).collect();
        let est = kabsch(&src, &dst);
        assert!(translation_error_m(&est, &t) < 1e-10);
        assert!(rotation_error_deg(&est, &t) < 1e-8);
    }

    #[test]
    fn identical_clouds_give_identity() {
        let c = room_scan(2);
        let r = icp(&c, &c, &Pose::identity(), &IcpParams::default()).unwrap();
        assert!(r.fitness < 1e-12);
        assert!(r.transform.translation().norm() < 1e-9);
    }

    #[test]
    fn recovers_known_transform_with_monotone_error() {
        let src = room_scan(3);
        let t = Pose::from_parts(Vector3::new(0.35, -0.2, 0.05), UnitQuaternion::from_euler_angles(0.02, -0.01, 0.12));
        let target = src.transformed(&t);
        let init = Pose::from_xyz_yaw(0.0, 0.0, 0.0, 0.0);
        let r = icp(&src, &target, &init, &IcpParams::default()).unwrap();
        assert!(translation_error_m(&r.transform, &t) < 1e-3, "{} {}", r.transform, r.fitness);
        assert!(rotation_error_deg(&r.transform, &t) < 0.1);
        for s in &r.trace {
            assert!(s.error_after <= s.error_before + 1e-12);
        }
    }

    #[test]
    fn failure_modes() {
        let c = room_scan(4);
        let far = c.transformed(&Pose::from_translation(100.0, 0.0, 0.0));
        assert_eq!(icp(&c, &far, &Pose::identity(), &IcpParams::default()), Err(RegError::NoCorrespondences { gate: 1.0 }));
        let tiny = PointCloud::from_f64([Point3::origin(); 3]);
        assert!(matches!(icp(&tiny, &c, &Pose::identity(), &IcpParams::default()), Err(RegError::TooFewPoints { .. })));
    }

    #[test]
    fn covariance_formula() {
        assert_eq!(adaptive_covariance(0.0, 1e-4), adaptive_covariance(1e-4, 1e-4));
        let c = adaptive_covariance(0.01, 1e-4);
        let want = [0.01, 0.01, 0.01, 0.04, 0.04, 0.04];
        for k in 0..6 {
            assert!((c[(k, k)] - want[k]).abs() < 1e-15);
        }
        assert_eq!(c.trace(), c.diagonal().sum());
        let (a, b) = (adaptive_covariance(0.002, 1e-4), adaptive_covariance(0.003, 1e-4));
        assert!((0..6).all(|k| a[(k, k)] <= b[(k, k)]));
    }

    #[test]
    fn shift_yaw_sign_matches_rotation() {
        // A sensor yawed by +psi sees the scene rotated by -psi.
        let scan = room_scan(5);
        let params = crate::scan_context::ScParams::default();
        let d_gt = crate::scan_context::compute_descriptor(&scan, &params);
        for k in [6usize, 15, 42] {
            let psi = k as f64 * TAU / 60.0;
            let rotated = scan.transformed(&Pose::from_xyz_yaw(0.0, 0.0, 0.0, -psi));
            let d_q = crate::scan_context::compute_descriptor(&rotated, &params);
            let (_, shift) = crate::scan_context::descriptor_distance(&d_gt, &d_q).unwrap();
            let yaw = shift_to_yaw(shift, 60);
            let err = (yaw - psi).rem_euclid(TAU);
            assert!(err.min(TAU - err) <= TAU / 60.0 + 1e-9, "k {k}: yaw {yaw} psi {psi}");
        }
    }

    fn small_session(seed: u64) -> Session {
        let model = scene::two_room_building();
        let goals = [Waypoint::new(2.0, 2.0, 0.0), Waypoint::new(9.0, 2.0, 0.0), Waypoint::new(9.0, 6.0, 0.0)];
        let params = SimParams { lidar: LidarSpec { horizontal_steps: 360, ..Default::default() }, seed, spacing: 1.0, ..Default::default() };
        sim::simulate_session(&model, &goals, &params).unwrap()
    }

    #[test]
    fn identical_sessions_self_match() {
        let s = small_session(1);
        let params = LoopParams::default();
        let cands = detect_candidates(&s, &s, &Pose::identity(), &params);
        for i in 0..s.len() {
            assert!(cands.iter().any(|c| c.gt_index == i && c.query_index == i), "missing ({i}, {i})");
        }
        assert!(cands.windows(2).all(|w| (w[0].gt_index, w[0].query_index) < (w[1].gt_index, w[1].query_index)));
        let report = build_encounters(&s, &s, &Pose::identity(), &params);
        let diag: Vec<&Encounter> = report.encounters.iter().filter(|e| e.gt_index == e.query_index).collect();
        assert_eq!(diag.len(), s.len());
        for e in diag {
            assert!(e.fitness < 1e-6);
            assert!(e.relative.translation().norm() < 1e-3 && e.relative.rotation_angle() < 1e-3);
            let q = s.poses()[e.gt_index].compose(&e.relative);
            assert!(translation_error_m(&q, &s.poses()[e.query_index]) < 1e-3);
        }
        assert!(report.encounters.iter().all(|e| e.fitness <= params.icp.fitness_threshold));
    }

    #[test]
    fn far_anchor_gives_no_proximity_pairs() {
        let s = small_session(2);
        let params = LoopParams { sim_threshold: 1.1, ..Default::default() };
        let far = Pose::from_translation(100.0, 0.0, 0.0);
        assert!(detect_candidates(&s, &s, &far, &params).is_empty());
        assert!(build_encounters(&s, &s, &far, &params).encounters.is_empty());
    }

    #[test]
    fn rotated_query_gets_yaw_initialised_candidate() {
        let gt = small_session(3);
        let mut q = gt.clone();
        let j = 4;
        let spin = Pose::from_xyz_yaw(0.0, 0.0, 0.0, std::f64::consts::FRAC_PI_2);
        // Sensor yawed by +90 degrees: the same scene appears rotated by -90.
        let cloud = q.keyframes[j].cloud.transformed(&spin.inverse());
        q.keyframes[j].descriptor = crate::scan_context::compute_descriptor(&cloud, &q.meta.sc);
        q.keyframes[j].cloud = cloud;
        let far = Pose::from_translation(500.0, 0.0, 0.0);
        let cands = detect_candidates(&gt, &q, &far, &LoopParams::default());
        let c = cands.iter().find(|c| c.gt_index == j && c.query_index == j).expect("descriptor pair");
        assert_eq!(c.source, CandidateSource::Descriptor);
        assert!(rotation_error_deg(&c.init, &spin) <= 6.0 + 1e-9);
    }

    #[test]
    fn noise_scan_is_rejected_by_fitness() {
        let gt = small_session(4);
        let mut q = gt.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let noise = PointCloud::from_f64((0..3000).map(|_| Point3::new(rng.random_range(-6.0..6.0), rng.random_range(-6.0..6.0), rng.random_range(-2.0..3.0))));
        q.keyframes[3].cloud = noise;
        let report = register_candidates(
            &gt,
            &q,
            vec![Candidate { gt_index: 3, query_index: 3, init: Pose::identity(), source: CandidateSource::Proximity, similarity: None }],
            &LoopParams::default(),
        );
        assert!(report.encounters.is_empty());
        assert!(matches!(report.rejected[0], (3, 3, Rejection::Fitness(f)) if f > 0.04));
        assert!(register_candidates(&gt, &q, Vec::new(), &LoopParams::default()).encounters.is_empty());
    }

    #[test]
    fn dump_format() {
        let e = Encounter {
            gt_index: 2,
            query_index: 5,
            relative: Pose::from_translation(1.0, 0.0, 0.0),
            covariance: adaptive_covariance(0.01, 1e-4),
            fitness: 0.01,
        };
        assert_eq!(encounters_to_text(&[e]), "2 5 1 0 0 0 0 0 1 0.01\n");
    }
}
