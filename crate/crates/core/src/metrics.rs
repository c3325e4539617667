//! Detection metrics: DET curves, FAR at a fixed FRR, EER and the
//! early-mitigation curve.
//!
//! Directed utterances are positives. An utterance is accepted when its
//! score is at least the threshold, so FRR(θ) counts positives scoring below
//! θ and FAR(θ) counts negatives scoring θ or more.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::config::{ModelConfig, SummaryKind};
use crate::detector::detect;
use crate::error::{FtmError, Result};
use crate::model::Bound;
use crate::summary::{early_decision, ScoreTrajectory};
use crate::synth::{Invocation, Utterance};

/// One scored evaluation utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct Scored {
    pub id: String,
    pub invocation: Invocation,
    pub directed: bool,
    pub trajectory: ScoreTrajectory,
}

impl Scored {
    pub fn score(&self) -> f64 {
        self.trajectory.final_score
    }
}

/// Scores every utterance with the given head.
pub fn score_utterances<T: Real>(
    cfg: &ModelConfig,
    params: &Bound<T>,
    kind: SummaryKind,
    utts: &[&Utterance],
    context: usize,
    subsample: usize,
) -> Result<Vec<Scored>> {
    utts.iter()
        .map(|u| {
            Ok(Scored {
                id: u.id.clone(),
                invocation: u.invocation,
                directed: u.directed,
                trajectory: detect(cfg, params, kind, &u.model_input(context, subsample)?)?,
            })
        })
        .collect()
}

/// Final scores paired with directedness labels.
pub fn labelled(set: &[Scored]) -> Vec<(f64, bool)> {
    set.iter().map(|s| (s.score(), s.directed)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetPoint {
    pub threshold: f64,
    pub frr: f64,
    pub far: f64,
}

fn check(set: &[(f64, bool)]) -> Result<(usize, usize)> {
    if let Some((s, _)) = set.iter().find(|(s, _)| !(0.0..=1.0).contains(s)) {
        return Err(FtmError::Data(format!("score {s} outside [0, 1]")));
    }
    let pos = set.iter().filter(|(_, d)| *d).count();
    let neg = set.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(FtmError::Data(format!(
            "threshold metrics need both classes, got {pos} directed and {neg} undirected"
        )));
    }
    Ok((pos, neg))
}

/// Error rates at every distinct score used as threshold, plus an
/// above-every-score threshold (`+∞`) where everything is rejected. Points
/// are sorted by increasing threshold.
pub fn det_curve(set: &[(f64, bool)]) -> Result<Vec<DetPoint>> {
    let (pos, neg) = check(set)?;
    let mut sorted: Vec<(f64, bool)> = set.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out = Vec::new();
    // Counts of utterances strictly below the current threshold.
    let (mut pos_below, mut neg_below) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let th = sorted[i].0;
        out.push(DetPoint {
            threshold: th,
            frr: pos_below as f64 / pos as f64,
            far: (neg - neg_below) as f64 / neg as f64,
        });
        while i < sorted.len() && sorted[i].0 == th {
            if sorted[i].1 {
                pos_below += 1;
            } else {
                neg_below += 1;
            }
            i += 1;
        }
    }
    out.push(DetPoint {
        threshold: f64::INFINITY,
        frr: 1.0,
        far: 0.0,
    });
    Ok(out)
}

/// Operating point chosen for a target FRR.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub far: f64,
    /// FRR actually achieved; at most the target.
    pub frr: f64,
    pub frr_target: f64,
    /// Set when the positive count cannot resolve the target.
    pub warning: Option<String>,
}

/// FAR at the largest threshold whose FRR does not exceed `frr_target`.
pub fn far_at_frr(set: &[(f64, bool)], frr_target: f64) -> Result<OperatingPoint> {
    if !(frr_target > 0.0 && frr_target < 1.0) {
        return Err(FtmError::Config(format!("FRR target {frr_target} outside (0, 1)")));
    }
    let det = det_curve(set)?;
    let pos = set.iter().filter(|(_, d)| *d).count();
    let p = det
        .iter()
        .rev()
        .find(|p| p.frr <= frr_target)
        .expect("the lowest threshold rejects nothing");
    let warning = ((pos as f64) * frr_target < 1.0).then(|| {
        format!(
            "{pos} directed utterances cannot resolve FRR {frr_target}; using the nearest attainable FRR {}",
            p.frr
        )
    });
    Ok(OperatingPoint {
        threshold: p.threshold,
        far: p.far,
        frr: p.frr,
        frr_target,
        warning,
    })
}

/// Named operating points: 1% FRR for VT, 3% FRR for TB.
pub fn preset_frr(inv: Invocation) -> f64 {
    match inv {
        Invocation::Vt => 0.01,
        Invocation::Tb => 0.03,
    }
}

/// Equal error rate, interpolating linearly between adjacent DET points when
/// no point has FRR = FAR.
pub fn eer(set: &[(f64, bool)]) -> Result<f64> {
    let det = det_curve(set)?;
    for w in det.windows(2) {
        let (a, b) = (w[0], w[1]);
        let da = a.frr - a.far;
        let db = b.frr - b.far;
        if da == 0.0 {
            return Ok(a.frr);
        }
        if da < 0.0 && db >= 0.0 {
            let f = da / (da - db);
            return Ok(a.frr + f * (b.frr - a.frr));
        }
    }
    unreachable!("FRR − FAR goes from −1 to 1 across the curve")
}

/// Threshold at which the final-score FAR is closest to `far` from below.
pub fn threshold_for_far(set: &[(f64, bool)], far: f64) -> Result<f64> {
    let det = det_curve(set)?;
    Ok(det
        .iter()
        .find(|p| p.far <= far)
        .expect("the top threshold accepts nothing")
        .threshold)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MitigationPoint {
    pub frame: usize,
    pub seconds: f64,
    /// Fraction of undirected utterances mitigated at or before `frame`.
    pub fraction: f64,
}

/// Cumulative fraction of undirected utterances whose first decision below
/// `threshold` has happened by each decision time.
pub fn early_mitigation_curve(set: &[Scored], threshold: f64, frame_period_ms: f64) -> Result<Vec<MitigationPoint>> {
    let undirected: Vec<&Scored> = set.iter().filter(|s| !s.directed).collect();
    if undirected.is_empty() {
        return Err(FtmError::Data("no undirected utterances".into()));
    }
    let mut first = Vec::new();
    for s in &undirected {
        if s.trajectory.is_empty() {
            return Err(FtmError::Data(format!("{}: no decision trajectory", s.id)));
        }
        if let Some(t) = early_decision(&s.trajectory, threshold)? {
            first.push(t);
        }
    }
    first.sort_unstable();
    let n = undirected.len() as f64;
    let mut out: Vec<MitigationPoint> = Vec::new();
    for (i, &t) in first.iter().enumerate() {
        let point = MitigationPoint {
            frame: t,
            seconds: t as f64 * frame_period_ms / 1000.0,
            fraction: (i + 1) as f64 / n,
        };
        match out.last_mut() {
            Some(last) if last.frame == t => *last = point,
            _ => out.push(point),
        }
    }
    Ok(out)
}

/// Curve value at `frame` (0 before the first step).
pub fn mitigated_by(curve: &[MitigationPoint], frame: usize) -> f64 {
    curve
        .iter()
        .take_while(|p| p.frame <= frame)
        .last()
        .map_or(0.0, |p| p.fraction)
}

pub fn write_det_csv<W: Write>(w: W, det: &[DetPoint]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for p in det {
        out.serialize(p)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_mitigation_csv<W: Write>(w: W, curve: &[MitigationPoint]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for p in curve {
        out.serialize(p)?;
    }
    out.flush()?;
    Ok(())
}

/// One machine-readable metric value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub metric: String,
    pub invocation: Invocation,
    pub train_sets: String,
    pub kind: SummaryKind,
    pub value: f64,
}

/// EER, FAR at the preset FRR and the achieved FRR for one evaluation set.
pub fn report(set: &[Scored], inv: Invocation, train_sets: &str, kind: SummaryKind) -> Result<Vec<MetricRecord>> {
    report_at(set, inv, train_sets, kind, preset_frr(inv))
}

/// [`report`] at an explicit FRR target.
pub fn report_at(
    set: &[Scored],
    inv: Invocation,
    train_sets: &str,
    kind: SummaryKind,
    frr_target: f64,
) -> Result<Vec<MetricRecord>> {
    let lab = labelled(set);
    let op = far_at_frr(&lab, frr_target)?;
    let rec = |metric: &str, value: f64| MetricRecord {
        metric: metric.to_string(),
        invocation: inv,
        train_sets: train_sets.to_string(),
        kind,
        value,
    };
    Ok(vec![
        rec("eer", eer(&lab)?),
        rec("far_at_frr", op.far),
        rec("achieved_frr", op.frr),
    ])
}

pub fn write_records_csv<W: Write>(w: W, records: &[MetricRecord]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in records {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

/// Human-readable table of metric records.
pub fn format_records(records: &[MetricRecord]) -> String {
    let mut s = format!("{:<8} {:<6} {:<10} {:<14} {:>8}\n", "kind", "eval", "train", "metric", "value");
    for r in records {
        s.push_str(&format!(
            "{:<8} {:<6} {:<10} {:<14} {:>8.4}\n",
            r.kind.name(),
            r.invocation.name(),
            r.train_sets,
            r.metric,
            r.value
        ));
    }
    s
}
