//! Anchoring a query session to the ground-truth session.
//!
//! Round one registers descriptor matches (plus proximity pairs when an
//! initial anchor is supplied), initialises the query anchor from the
//! encounter whose implied anchor agrees with the most others, and solves the
//! graph with that consistent set. Later rounds search again around the
//! solved trajectory, register pairs not tried before, keep every encounter
//! that agrees with the solution, and re-solve until the encounter set stops
//! changing.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use thiserror::Error;

use crate::pgo::{build_graph, local_poses, optimize, to_global, GraphParams, LmParams, PgoError, Side, Solution, VarKey};
use crate::registration::{detect_candidates, register_candidates, CandidateSource, Encounter, EncounterReport, LoopParams};
use crate::se3::{rotation_error_deg, translation_error_m, Pose};
use crate::session::Session;
use crate::textfmt::fmt_sig;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("no encounters between the sessions ({candidates} candidates, all rejected)")]
    NoEncounters { candidates: usize },
    #[error("empty session: {0}")]
    EmptySession(&'static str),
    #[error(transparent)]
    Pgo(#[from] PgoError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorParams {
    pub loops: LoopParams,
    pub graph: GraphParams,
    pub lm: LmParams,
    pub max_rounds: usize,
    /// Implied anchors closer than this agree when picking the initial anchor.
    pub consensus_trans: f64,
    pub consensus_rot_deg: f64,
    /// Later-round encounters must place the query keyframe this close to
    /// the current estimate.
    pub gate_trans: f64,
    pub gate_rot_deg: f64,
}

impl Default for AnchorParams {
    fn default() -> Self {
        Self {
            loops: LoopParams::default(),
            graph: GraphParams::default(),
            lm: LmParams::default(),
            max_rounds: 3,
            consensus_trans: 3.0,
            consensus_rot_deg: 20.0,
            gate_trans: 1.0,
            gate_rot_deg: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundSummary {
    pub candidates: usize,
    pub registered: usize,
    pub used: usize,
    pub final_error: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub struct AnchorOutcome {
    pub solution: Solution,
    pub initial_anchor: Pose,
    /// Encounters in the final graph, sorted by `(i, j)`.
    pub encounters: Vec<Encounter>,
    /// Registration results of the last round.
    pub last_report: EncounterReport,
    pub rounds: Vec<RoundSummary>,
}

impl AnchorOutcome {
    pub fn anchor(&self) -> Pose {
        self.solution.get(VarKey::AnchorQuery).unwrap_or_default()
    }

    pub fn gt_world(&self) -> Vec<Pose> {
        to_global(&self.solution, Side::Gt)
    }

    pub fn query_world(&self) -> Vec<Pose> {
        to_global(&self.solution, Side::Query)
    }

    pub fn query_local(&self) -> Vec<Pose> {
        local_poses(&self.solution, Side::Query)
    }

    pub fn report(&self) -> String {
        let mut s = String::new();
        let sol = &self.solution;
        let _ = writeln!(s, "rounds={}", self.rounds.len());
        for (k, r) in self.rounds.iter().enumerate() {
            let _ = writeln!(
                s,
                "round {k}: candidates={} registered={} used={} final_error={} iterations={}",
                r.candidates,
                r.registered,
                r.used,
                fmt_sig(r.final_error),
                r.iterations
            );
        }
        let _ = writeln!(s, "encounters={}", self.encounters.len());
        let _ = writeln!(s, "initial_anchor={}", self.initial_anchor);
        let _ = writeln!(s, "anchor={}", self.anchor());
        let _ = writeln!(s, "initial_error={}", fmt_sig(sol.initial_error));
        let _ = writeln!(s, "final_error={}", fmt_sig(sol.final_error));
        let _ = writeln!(s, "iterations={}", sol.iterations);
        let _ = writeln!(s, "converged={}", sol.converged);
        let _ = writeln!(s, "pinned_shift_m={}", fmt_sig(sol.pinned_shift_m));
        let _ = writeln!(s, "pinned_shift_deg={}", fmt_sig(sol.pinned_shift_deg));
        s
    }
}

/// Anchor implied by an encounter: the map taking query-local poses into
/// the GT frame, `x_i * c * x_j^-1`.
pub fn implied_anchor(gt: &Session, query: &Session, e: &Encounter) -> Pose {
    gt.poses()[e.gt_index].compose(&e.relative).compose(&query.poses()[e.query_index].inverse())
}

/// Encounters agreeing with the best-supported implied anchor, and that anchor.
pub fn consensus(gt: &Session, query: &Session, encounters: &[Encounter], trans: f64, rot_deg: f64) -> Option<(Pose, Vec<Encounter>)> {
    let anchors: Vec<Pose> = encounters.iter().map(|e| implied_anchor(gt, query, e)).collect();
    let agree = |a: &Pose, b: &Pose| translation_error_m(a, b) <= trans && rotation_error_deg(a, b) <= rot_deg;
    let support: Vec<usize> = anchors.iter().map(|a| anchors.iter().filter(|b| agree(a, b)).count()).collect();
    let best = (0..encounters.len()).min_by(|&a, &b| {
        support[b]
            .cmp(&support[a])
            .then(encounters[a].fitness.total_cmp(&encounters[b].fitness))
            .then((encounters[a].gt_index, encounters[a].query_index).cmp(&(encounters[b].gt_index, encounters[b].query_index)))
    })?;
    let inliers = encounters.iter().zip(&anchors).filter(|(_, a)| agree(&anchors[best], a)).map(|(e, _)| e.clone()).collect();
    Some((anchors[best], inliers))
}

fn solve(gt: &Session, query: &Session, encounters: &[Encounter], anchor: &Pose, params: &AnchorParams) -> Result<Solution, PgoError> {
    let (graph, init) = build_graph(gt, query, encounters, anchor, &params.graph)?;
    optimize(&graph, &init, &params.lm)
}

/// Aligns `query` to `gt`. Without `anchor_guess` only descriptor matches
/// seed the first round.
pub fn anchor_sessions(gt: &Session, query: &Session, anchor_guess: Option<Pose>, params: &AnchorParams) -> Result<AnchorOutcome, PipelineError> {
    if gt.is_empty() {
        return Err(PipelineError::EmptySession("reference"));
    }
    if query.is_empty() {
        return Err(PipelineError::EmptySession("query"));
    }
    let mut candidates = detect_candidates(gt, query, &anchor_guess.unwrap_or_default(), &params.loops);
    if anchor_guess.is_none() {
        candidates.retain(|c| c.source == CandidateSource::Descriptor);
    }
    let n_candidates = candidates.len();
    let report = register_candidates(gt, query, candidates, &params.loops);
    let (initial_anchor, inliers) = consensus(gt, query, &report.encounters, params.consensus_trans, params.consensus_rot_deg)
        .ok_or(PipelineError::NoEncounters { candidates: n_candidates })?;
    let mut solution = solve(gt, query, &inliers, &initial_anchor, params)?;
    let mut rounds = vec![RoundSummary {
        candidates: n_candidates,
        registered: report.encounters.len(),
        used: inliers.len(),
        final_error: solution.final_error,
        iterations: solution.iterations,
    }];
    let mut used: BTreeMap<(usize, usize), Encounter> = inliers.into_iter().map(|e| ((e.gt_index, e.query_index), e)).collect();
    // Every pair is registered once; later rounds only re-judge the results.
    let mut tried: BTreeSet<(usize, usize)> = report.candidates.iter().map(|c| (c.gt_index, c.query_index)).collect();
    let mut registered: Vec<Encounter> = report.encounters.clone();
    let mut last_report = report;

    while rounds.len() < params.max_rounds {
        // Search around the solved trajectory, expressed in the GT frame.
        let world = to_global(&solution, Side::Query);
        let mut placed = query.clone();
        placed.graph.nodes = world.clone();
        let mut candidates = detect_candidates(gt, &placed, &Pose::identity(), &params.loops);
        candidates.retain(|c| tried.insert((c.gt_index, c.query_index)));
        let n_candidates = candidates.len();
        // `placed` keeps the query keyframe clouds, so relative poses carry over.
        let report = register_candidates(gt, &placed, candidates, &params.loops);
        registered.extend(report.encounters.iter().cloned());
        let mut next = used.clone();
        for e in &registered {
            let est = gt.poses()[e.gt_index].compose(&e.relative);
            let target = &world[e.query_index];
            if translation_error_m(&est, target) <= params.gate_trans && rotation_error_deg(&est, target) <= params.gate_rot_deg {
                next.entry((e.gt_index, e.query_index)).or_insert_with(|| e.clone());
            }
        }
        let n_registered = report.encounters.len();
        last_report = report;
        if next.keys().eq(used.keys()) {
            rounds.push(RoundSummary {
                candidates: n_candidates,
                registered: n_registered,
                used: used.len(),
                final_error: solution.final_error,
                iterations: 0,
            });
            break;
        }
        used = next;
        let encounters: Vec<Encounter> = used.values().cloned().collect();
        let anchor = solution.get(VarKey::AnchorQuery).unwrap_or(initial_anchor);
        solution = solve(gt, query, &encounters, &anchor, params)?;
        rounds.push(RoundSummary {
            candidates: n_candidates,
            registered: n_registered,
            used: encounters.len(),
            final_error: solution.final_error,
            iterations: solution.iterations,
        });
    }
    Ok(AnchorOutcome { solution, initial_anchor, encounters: used.into_values().collect(), last_report, rounds })
}
