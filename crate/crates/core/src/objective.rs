//! Pearson correlation, the composite training loss `−R + α·L1`, and
//! aggregation of per-recording correlations into a report.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Weight of the L1 term.
    pub alpha: f64,
    /// `false` drops the L1 term entirely.
    pub l1_enabled: bool,
    /// Added under the square root of the correlation denominator.
    pub epsilon_denominator: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.2,
            l1_enabled: true,
            epsilon_denominator: 1e-8,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) {
            return Err(Error::config(format!("alpha {} must be >= 0", self.alpha)));
        }
        if !(self.epsilon_denominator > 0.0) {
            return Err(Error::config("epsilon_denominator must be > 0"));
        }
        Ok(())
    }
}

/// Correlation of each row of `pred` and `target` (`[batch, time]`) over
/// time, returned as `[batch]`.
///
/// `r = Σ(p−p̄)(t−t̄) / sqrt(Σ(p−p̄)²·Σ(t−t̄)² + ε)`; a constant row gives 0.
pub fn pearson_per_item(tape: &mut Tape, pred: Var, target: Var, eps: f64) -> Result<Var> {
    let (sp, st) = (tape.shape(pred).to_vec(), tape.shape(target).to_vec());
    if sp != st || sp.len() != 2 {
        return Err(Error::dim(format!(
            "pearson expects equal [batch, time] shapes, got {sp:?} and {st:?}"
        )));
    }
    if sp[1] < 2 {
        return Err(Error::contract(format!(
            "pearson needs at least 2 samples, got {}",
            sp[1]
        )));
    }
    let pm = tape.mean(pred, &[1], true)?;
    let pc = tape.sub(pred, pm)?;
    let tm = tape.mean(target, &[1], true)?;
    let tc = tape.sub(target, tm)?;
    let cross = tape.mul(pc, tc)?;
    let num = tape.sum(cross, &[1], false)?;
    let pp = tape.mul(pc, pc)?;
    let spp = tape.sum(pp, &[1], false)?;
    let tt = tape.mul(tc, tc)?;
    let stt = tape.sum(tt, &[1], false)?;
    let den = tape.mul(spp, stt)?;
    let den = tape.add_scalar(den, eps);
    let den = tape.sqrt(den);
    tape.div(num, den)
}

/// Differentiable correlation of two `[n]` vectors, as a rank-0 tensor.
pub fn pearson_r(tape: &mut Tape, pred: Var, target: Var, eps: f64) -> Result<Var> {
    let (sp, st) = (tape.shape(pred).to_vec(), tape.shape(target).to_vec());
    if sp.len() != 1 || sp != st {
        return Err(Error::dim(format!(
            "pearson_r expects two equal [n] vectors, got {sp:?} and {st:?}"
        )));
    }
    let p = tape.reshape(pred, [1, sp[0]])?;
    let t = tape.reshape(target, [1, sp[0]])?;
    let r = pearson_per_item(tape, p, t, eps)?;
    tape.reshape(r, Vec::<usize>::new())
}

/// `−mean_b R_b + α·mean|pred − target|`, or `−mean_b R_b` with L1 disabled.
pub fn total_loss(tape: &mut Tape, pred: Var, target: Var, cfg: &LossConfig) -> Result<Var> {
    let r = pearson_per_item(tape, pred, target, cfg.epsilon_denominator)?;
    let r = tape.mean_all(r);
    let neg_r = tape.neg(r);
    if !cfg.l1_enabled {
        return Ok(neg_r);
    }
    let diff = tape.sub(pred, target)?;
    let abs = tape.abs(diff);
    let l1 = tape.mean_all(abs);
    let l1 = tape.scalar_mul(l1, cfg.alpha);
    tape.add(neg_r, l1)
}

/// Plain-slice correlation with the same ε guard as [`pearson_per_item`].
pub fn pearson(pred: &[f64], target: &[f64], eps: f64) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::dim(format!(
            "pearson over {} and {} samples",
            pred.len(),
            target.len()
        )));
    }
    let n = pred.len();
    if n < 2 {
        return Err(Error::contract(format!("pearson needs at least 2 samples, got {n}")));
    }
    let pm = pred.iter().sum::<f64>() / n as f64;
    let tm = target.iter().sum::<f64>() / n as f64;
    let (mut num, mut spp, mut stt) = (0.0, 0.0, 0.0);
    for (&p, &t) in pred.iter().zip(target) {
        let (dp, dt) = (p - pm, t - tm);
        num += dp * dt;
        spp += dp * dp;
        stt += dt * dt;
    }
    Ok(num / (spp * stt + eps).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectStats {
    pub mean_r: f64,
    pub std_r: f64,
    pub n_recordings: usize,
}

/// Per-subject and overall correlation statistics. Standard deviations use
/// the population (divide-by-n) convention.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_subject: BTreeMap<usize, SubjectStats>,
    /// Mean over recordings.
    pub overall_mean: f64,
    /// Standard deviation over recordings.
    pub overall_std: f64,
    /// Mean of the per-subject means.
    pub subject_level_mean: f64,
    /// Standard deviation of the per-subject means.
    pub subject_level_std: f64,
    pub n_recordings: usize,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn aggregate_report(per_recording: &[(usize, f64)]) -> Result<EvalReport> {
    if per_recording.is_empty() {
        return Err(Error::contract("cannot aggregate an empty list of recordings"));
    }
    if let Some((s, r)) = per_recording.iter().find(|(_, r)| !r.is_finite()) {
        return Err(Error::contract(format!("non-finite r {r} for subject {s}")));
    }
    let mut grouped: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for &(s, r) in per_recording {
        grouped.entry(s).or_default().push(r);
    }
    let per_subject: BTreeMap<usize, SubjectStats> = grouped
        .iter()
        .map(|(&s, rs)| {
            let (mean_r, std_r) = mean_std(rs);
            (
                s,
                SubjectStats {
                    mean_r,
                    std_r,
                    n_recordings: rs.len(),
                },
            )
        })
        .collect();
    let all: Vec<f64> = per_recording.iter().map(|&(_, r)| r).collect();
    let (overall_mean, overall_std) = mean_std(&all);
    let means: Vec<f64> = per_subject.values().map(|s| s.mean_r).collect();
    let (subject_level_mean, subject_level_std) = mean_std(&means);
    Ok(EvalReport {
        per_subject,
        overall_mean,
        overall_std,
        subject_level_mean,
        subject_level_std,
        n_recordings: all.len(),
    })
}
