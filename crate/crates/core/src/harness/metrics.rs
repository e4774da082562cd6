//! Overlap, success and precision metrics over tracked sequences.
//!
//! Frame 0 is the initialization frame (its box is the ground truth) and
//! is excluded everywhere. Success at threshold τ counts frames with
//! IoU ≥ τ, over τ = 0.00, 0.05, …, 1.00.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::harness::tracker::TrackerRun;

pub const SUCCESS_THRESHOLDS: usize = 21;
/// Center-error threshold for precision, in pixels.
pub const PRECISION_PX: f64 = 20.0;

/// IoU of two `(cx, cy, w, h)` boxes.
pub fn iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let corners = |r: [f64; 4]| [r[0] - r[2] / 2.0, r[1] - r[3] / 2.0, r[0] + r[2] / 2.0, r[1] + r[3] / 2.0];
    let (p, q) = (corners(a), corners(b));
    let area = |c: [f64; 4]| (c[2] - c[0]).max(0.0) * (c[3] - c[1]).max(0.0);
    let inter = area([p[0].max(q[0]), p[1].max(q[1]), p[2].min(q[2]), p[3].min(q[3])]);
    let union = area(p) + area(q) - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

pub fn threshold(k: usize) -> f64 {
    k as f64 / (SUCCESS_THRESHOLDS - 1) as f64
}

/// Success rate per threshold.
pub fn success_curve(ious: &[f64]) -> Vec<f64> {
    (0..SUCCESS_THRESHOLDS)
        .map(|k| {
            let tau = threshold(k);
            ious.iter().filter(|&&v| v >= tau).count() as f64 / ious.len().max(1) as f64
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub mean_iou: f64,
    pub auc: f64,
    pub precision: f64,
    pub success: Vec<f64>,
    pub frames: usize,
}

impl Metrics {
    pub fn from_frames(ious: &[f64], center_err_px: &[f64]) -> Self {
        let n = ious.len().max(1) as f64;
        let success = success_curve(ious);
        Self {
            mean_iou: ious.iter().sum::<f64>() / n,
            auc: success.iter().sum::<f64>() / SUCCESS_THRESHOLDS as f64,
            precision: center_err_px.iter().filter(|&&e| e <= PRECISION_PX).count() as f64
                / center_err_px.len().max(1) as f64,
            success,
            frames: ious.len(),
        }
    }

    /// Unweighted mean over sequences.
    pub fn average(items: &[&Metrics]) -> Self {
        let n = items.len().max(1) as f64;
        let mean = |f: &dyn Fn(&Metrics) -> f64| items.iter().map(|m| f(m)).sum::<f64>() / n;
        Self {
            mean_iou: mean(&|m| m.mean_iou),
            auc: mean(&|m| m.auc),
            precision: mean(&|m| m.precision),
            success: (0..SUCCESS_THRESHOLDS).map(|k| mean(&|m| m.success[k])).collect(),
            frames: items.iter().map(|m| m.frames).sum(),
        }
    }
}

/// One tracked sequence with the ground truth it is scored against.
#[derive(Clone, Debug)]
pub struct SequenceResult {
    pub sequence_id: String,
    pub scenario: String,
    pub run: TrackerRun,
    pub gt: Vec<[f64; 4]>,
    pub frame_size: (usize, usize),
}

impl SequenceResult {
    pub fn metrics(&self) -> Result<Metrics> {
        if self.run.boxes.len() != self.gt.len() {
            return Err(Error::Validation(format!(
                "sequence {}: {} predictions for {} ground-truth boxes",
                self.sequence_id,
                self.run.boxes.len(),
                self.gt.len()
            )));
        }
        let (w, h) = (self.frame_size.0 as f64, self.frame_size.1 as f64);
        let pairs = self.run.boxes.iter().zip(&self.gt).skip(1);
        let ious: Vec<f64> = pairs.clone().map(|(p, g)| iou(*p, *g)).collect();
        let errs: Vec<f64> = pairs
            .map(|(p, g)| ((p[0] - g[0]) * w).hypot((p[1] - g[1]) * h))
            .collect();
        Ok(Metrics::from_frames(&ious, &errs))
    }
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub overall: Metrics,
    pub per_sequence: Vec<(String, String, Metrics)>,
    pub per_scenario: BTreeMap<String, Metrics>,
}

impl Evaluation {
    /// `sequence_id,scenario,mean_iou,auc`, one row per sequence.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sequence_id,scenario,mean_iou,auc\n");
        for (id, scenario, m) in &self.per_sequence {
            let _ = writeln!(out, "{id},{scenario},{:.6},{:.6}", m.mean_iou, m.auc);
        }
        out
    }
}

pub fn evaluate(results: &[SequenceResult]) -> Result<Evaluation> {
    if results.is_empty() {
        return Err(Error::Validation("evaluate needs at least one run".into()));
    }
    let per_sequence = results
        .iter()
        .map(|r| Ok((r.sequence_id.clone(), r.scenario.clone(), r.metrics()?)))
        .collect::<Result<Vec<_>>>()?;
    let mut groups: BTreeMap<String, Vec<&Metrics>> = BTreeMap::new();
    for (_, scenario, m) in &per_sequence {
        groups.entry(scenario.clone()).or_default().push(m);
    }
    let per_scenario = groups.into_iter().map(|(k, v)| (k, Metrics::average(&v))).collect();
    let all: Vec<&Metrics> = per_sequence.iter().map(|(_, _, m)| m).collect();
    Ok(Evaluation {
        overall: Metrics::average(&all),
        per_sequence,
        per_scenario,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn result(id: &str, preds: Vec<[f64; 4]>, gt: Vec<[f64; 4]>) -> SequenceResult {
        SequenceResult {
            sequence_id: id.into(),
            scenario: "PLAIN".into(),
            run: TrackerRun {
                boxes: preds,
                ..TrackerRun::default()
            },
            gt,
            frame_size: (64, 64),
        }
    }

    #[test]
    fn perfect_predictions() {
        let gt = vec![[0.5, 0.5, 0.2, 0.3]; 5];
        let ev = evaluate(&[result("a", gt.clone(), gt)]).unwrap();
        assert_eq!(ev.overall.mean_iou, 1.0);
        assert_eq!(ev.overall.auc, 1.0);
        assert_eq!(ev.overall.precision, 1.0);
        assert_eq!(ev.overall.frames, 4);
    }

    #[test]
    fn disjoint_predictions_score_one_threshold() {
        let gt = vec![[0.2, 0.2, 0.1, 0.1]; 4];
        let pred = vec![[0.8, 0.8, 0.1, 0.1]; 4];
        let ev = evaluate(&[result("a", pred, gt)]).unwrap();
        assert_eq!(ev.overall.mean_iou, 0.0);
        assert!((ev.overall.auc - 1.0 / 21.0).abs() < 1e-15);
        assert_eq!(ev.overall.success[0], 1.0);
    }

    #[test]
    fn iou_examples() {
        assert!((iou([0.5, 0.5, 0.2, 0.2], [0.6, 0.5, 0.2, 0.2]) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(iou([0.5, 0.5, 0.0, 0.0], [0.5, 0.5, 0.0, 0.0]), 0.0);
        assert!(evaluate(&[]).is_err());
    }

    #[test]
    fn csv_header_and_rows() {
        let gt = vec![[0.5, 0.5, 0.2, 0.2]; 3];
        let csv = evaluate(&[result("s0", gt.clone(), gt)]).unwrap().to_csv();
        assert_eq!(csv, "sequence_id,scenario,mean_iou,auc\ns0,PLAIN,1.000000,1.000000\n");
    }

    proptest! {
        #[test]
        fn auc_ignores_run_order(vals in prop::collection::vec(0.05f64..0.95, 2..6), shift in 0.0f64..0.3) {
            let runs: Vec<SequenceResult> = vals
                .iter()
                .enumerate()
                .map(|(i, &c)| {
                    let gt = vec![[c, c, 0.1, 0.1]; 3];
                    let pred = vec![[c + shift * 0.3, c, 0.1, 0.1]; 3];
                    result(&i.to_string(), pred, gt)
                })
                .collect();
            let mut rev = runs.clone();
            rev.reverse();
            let (a, b) = (evaluate(&runs).unwrap(), evaluate(&rev).unwrap());
            prop_assert!((a.overall.auc - b.overall.auc).abs() < 1e-12);
            for m in a.per_sequence.iter().map(|x| &x.2) {
                prop_assert!((0.0..=1.0).contains(&m.mean_iou));
            }
        }
    }
}
