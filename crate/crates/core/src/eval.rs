//! Absolute trajectory error between index-aligned trajectories.
//!
//! No alignment is applied: both trajectories must already be in the model
//! frame, since placing the query there is exactly what is being measured.

use std::fmt::Write as _;

use thiserror::Error;

use crate::se3::{rotation_error_deg, translation_error_m, Pose};
use crate::textfmt::fmt3;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("length mismatch: estimate has {est} poses, reference has {gt}")]
    LengthMismatch { est: usize, gt: usize },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Translation errors in centimetres, rotation errors in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AteReport {
    pub rmse_trans: f64,
    pub max_trans: f64,
    pub rmse_rot: f64,
    pub max_rot: f64,
    pub n: usize,
}

const KEYS: [&str; 5] = ["n", "rmse_trans_cm", "max_trans_cm", "rmse_rot_deg", "max_rot_deg"];

fn rmse_max(errors: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut sum, mut max, mut n) = (0.0, 0.0f64, 0usize);
    for e in errors {
        sum += e * e;
        max = max.max(e);
        n += 1;
    }
    if n == 0 {
        (0.0, 0.0)
    } else {
        ((sum / n as f64).sqrt(), max)
    }
}

pub fn ate(est: &[Pose], gt: &[Pose]) -> Result<AteReport, EvalError> {
    if est.len() != gt.len() {
        return Err(EvalError::LengthMismatch { est: est.len(), gt: gt.len() });
    }
    let (rmse_trans, max_trans) = rmse_max(est.iter().zip(gt).map(|(a, b)| 100.0 * translation_error_m(a, b)));
    let (rmse_rot, max_rot) = rmse_max(est.iter().zip(gt).map(|(a, b)| rotation_error_deg(a, b)));
    Ok(AteReport { rmse_trans, max_trans, rmse_rot, max_rot, n: est.len() })
}

impl AteReport {
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<18}{:>12}{:>12}", "", "RMSE", "Max");
        let _ = writeln!(s, "{:<18}{:>12}{:>12}", "Trans. error (cm)", fmt3(self.rmse_trans), fmt3(self.max_trans));
        let _ = writeln!(s, "{:<18}{:>12}{:>12}", "Rot. error (deg)", fmt3(self.rmse_rot), fmt3(self.max_rot));
        let _ = writeln!(s, "{:<18}{:>12}", "Poses", self.n);
        s
    }

    pub fn to_kv(&self) -> String {
        let vals = [self.n.to_string(), fmt3(self.rmse_trans), fmt3(self.max_trans), fmt3(self.rmse_rot), fmt3(self.max_rot)];
        KEYS.iter().zip(vals).map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Reads the `key=value` lines written by [`AteReport::to_kv`]; other
    /// lines are ignored.
    pub fn from_kv(text: &str) -> Result<AteReport, EvalError> {
        let mut found: [Option<f64>; 5] = [None; 5];
        for (i, line) in text.lines().enumerate() {
            let Some((k, v)) = line.trim().split_once('=') else { continue };
            let Some(slot) = KEYS.iter().position(|key| *key == k.trim()) else { continue };
            let parsed: f64 = v.trim().parse().map_err(|e| EvalError::Parse { line: i + 1, msg: format!("{k}: {e}") })?;
            found[slot] = Some(parsed);
        }
        let get = |k: usize| found[k].ok_or_else(|| EvalError::Parse { line: 0, msg: format!("missing key {}", KEYS[k]) });
        Ok(AteReport { n: get(0)? as usize, rmse_trans: get(1)?, max_trans: get(2)?, rmse_rot: get(3)?, max_rot: get(4)? })
    }
}
