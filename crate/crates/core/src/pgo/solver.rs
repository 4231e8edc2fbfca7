//! Levenberg-Marquardt on the product manifold of SE(3) variables.

use nalgebra::{DVector, Matrix6, UnitQuaternion, Vector6};
use rayon::prelude::*;

use super::sparse::{BlockCholesky, BlockMatrix};
use super::{record_pin_shift, Factor, FactorGraph, PgoError, Solution, PIN_INFORMATION};
use crate::se3::{rotation_error_deg, translation_error_m, Pose, Se3Error};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmParams {
    pub max_iterations: usize,
    /// Stop when an accepted step lowers the error by less than this fraction.
    pub rel_tolerance: f64,
    /// Stop when the step norm falls below this.
    pub step_tolerance: f64,
    pub initial_lambda: f64,
    /// Central-difference step for the Jacobians.
    pub fd_step: f64,
}

impl Default for LmParams {
    fn default() -> Self {
        Self { max_iterations: 100, rel_tolerance: 1e-9, step_tolerance: 1e-10, initial_lambda: 1e-4, fd_step: 1e-6 }
    }
}

const MAX_LAMBDA: f64 = 1e16;
const MIN_LAMBDA: f64 = 1e-12;

struct Linearized {
    vars: Vec<usize>,
    jacobians: Vec<Matrix6<f64>>,
    residual: Vector6<f64>,
}

fn linearize(f: &Factor, values: &[Pose], h: f64) -> Result<Linearized, Se3Error> {
    let residual = f.residual(values)?;
    let vars = f.variables();
    let mut jacobians = Vec::with_capacity(vars.len());
    for &v in &vars {
        let mut jac = Matrix6::zeros();
        for k in 0..6 {
            let mut delta = Vector6::zeros();
            delta[k] = h;
            let plus = values[v].retract(&delta);
            let minus = values[v].retract(&(-delta));
            let rp = f.residual_with(|u| if u == v { plus } else { values[u] })?;
            let rm = f.residual_with(|u| if u == v { minus } else { values[u] })?;
            jac.set_column(k, &((rp - rm) / (2.0 * h)));
        }
        jacobians.push(jac);
    }
    Ok(Linearized { vars, jacobians, residual })
}

fn normalized(p: Pose) -> Pose {
    Pose::from_parts(*p.translation(), UnitQuaternion::new_normalize(*p.rotation().quaternion()))
}

/// Minimizes the graph's total weighted squared error starting at `init`.
///
/// Accepted steps strictly decrease the error. A trial step that lands on
/// the logarithm's singularity is rejected like any other non-decreasing
/// step.
pub fn optimize(graph: &FactorGraph, init: &[Pose], params: &LmParams) -> Result<Solution, PgoError> {
    graph.validate()?;
    if init.len() != graph.keys.len() {
        return Err(PgoError::LengthMismatch { left: init.len(), right: graph.keys.len() });
    }
    let n = init.len();
    let mut values: Vec<Pose> = init.iter().copied().map(normalized).collect();
    let mut err = graph.error(&values)?;
    let initial_error = err;
    let mut history = vec![err];
    let mut lambda = params.initial_lambda;
    let mut iterations = 0;
    let mut converged = err == 0.0;

    'outer: while !converged && iterations < params.max_iterations {
        let lin: Vec<Linearized> = graph.factors.par_iter().map(|f| linearize(f, &values, params.fd_step)).collect::<Result<_, _>>()?;
        let mut h = BlockMatrix::new(n);
        let mut g = DVector::zeros(6 * n);
        for (l, f) in lin.iter().zip(&graph.factors) {
            let w = f.information();
            let wr = w * l.residual;
            for (a, (&va, ja)) in l.vars.iter().zip(&l.jacobians).enumerate() {
                let jtw = ja.transpose() * w;
                let ga = ja.transpose() * wr;
                for k in 0..6 {
                    g[6 * va + k] += ga[k];
                }
                for (&vb, jb) in l.vars[..=a].iter().zip(&l.jacobians) {
                    let block = jtw * jb;
                    if va == vb && !std::ptr::eq(ja, jb) {
                        h.add(va, vb, &(block + block.transpose()));
                    } else {
                        h.add(va, vb, &block);
                    }
                }
            }
        }
        let diag = h.diagonal();
        if let Some(i) = diag.iter().position(|d| !(*d > 0.0) || !d.is_finite()) {
            return Err(PgoError::SingularSystem(format!("variable {:?} has no curvature in component {}", graph.keys[i / 6], i % 6)));
        }
        // Jacobi scaling: solve (S H S + lambda I) y = -S g, delta = S y.
        let scale = diag.map(|d| 1.0 / d.sqrt());
        let mut hs = h;
        hs.for_each_mut(|r, c, b| {
            for i in 0..6 {
                for j in 0..6 {
                    b[(i, j)] *= scale[6 * r + i] * scale[6 * c + j];
                }
            }
        });
        let gs = g.component_mul(&scale);
        loop {
            let mut damped = hs.clone();
            let mut shift = Matrix6::identity();
            shift *= lambda;
            for v in 0..n {
                damped.add(v, v, &shift);
            }
            let Some(chol) = BlockCholesky::factor(&damped) else {
                lambda *= 10.0;
                if lambda > MAX_LAMBDA {
                    return Err(PgoError::SingularSystem("normal equations not positive definite under damping".into()));
                }
                continue;
            };
            let delta = chol.solve(&(-&gs)).component_mul(&scale);
            if delta.norm() < params.step_tolerance {
                converged = true;
                break 'outer;
            }
            let candidate: Vec<Pose> = values.iter().enumerate().map(|(v, p)| normalized(p.retract(&delta.fixed_rows::<6>(6 * v).into()))).collect();
            match graph.error(&candidate) {
                Ok(new_err) if new_err < err => {
                    let rel = (err - new_err) / err;
                    values = candidate;
                    err = new_err;
                    history.push(err);
                    iterations += 1;
                    lambda = (lambda / 10.0).max(MIN_LAMBDA);
                    if rel < params.rel_tolerance || err == 0.0 {
                        converged = true;
                    }
                    break;
                }
                _ => {
                    lambda *= 10.0;
                    if lambda > MAX_LAMBDA {
                        // No step decreases the error at working precision.
                        converged = true;
                        break 'outer;
                    }
                }
            }
        }
    }

    let mut shift_m: f64 = 0.0;
    let mut shift_deg: f64 = 0.0;
    for f in &graph.factors {
        if let Factor::Prior { var, information, .. } = f {
            let min_info = (0..6).map(|k| information[(k, k)]).fold(f64::INFINITY, f64::min);
            if min_info >= PIN_INFORMATION && graph.keys[*var].is_gt_side() {
                shift_m = shift_m.max(translation_error_m(&init[*var], &values[*var]));
                shift_deg = shift_deg.max(rotation_error_deg(&init[*var], &values[*var]));
            }
        }
    }
    record_pin_shift(shift_m, shift_deg);

    Ok(Solution {
        keys: graph.keys.clone(),
        values,
        initial_error,
        final_error: err,
        error_history: history,
        iterations,
        converged,
        pinned_shift_m: shift_m,
        pinned_shift_deg: shift_deg,
    })
}
