//! Displacement, orientation, velocity and classification metrics.

use std::io::Write;

use serde::Serialize;

use crate::data::{quat_to_yaw, AgentBatch};
use crate::error::{Error, Result};
use crate::iatcnn::PointEstimate;

/// Point trajectories `[agent][step]` flattened row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PointSet {
    pub n_agents: usize,
    pub t_steps: usize,
    pub xy: Vec<[f64; 2]>,
    pub yaw_deg: Vec<f64>,
    pub v: Vec<f64>,
}

impl PointSet {
    pub fn from_estimates(points: &[Vec<PointEstimate>]) -> Self {
        let t_steps = points.first().map_or(0, Vec::len);
        let flat = points.iter().flatten();
        PointSet {
            n_agents: points.len(),
            t_steps,
            xy: flat.clone().map(|p| [p.x, p.y]).collect(),
            yaw_deg: flat.clone().map(|p| p.yaw_deg).collect(),
            v: flat.map(|p| p.v).collect(),
        }
    }

    /// Ground truth from a target batch; masked-out slots hold zeros.
    pub fn from_batch(b: &AgentBatch) -> Self {
        let slots = b.features.data().chunks(5);
        PointSet {
            n_agents: b.n_agents(),
            t_steps: b.len(),
            xy: slots.clone().map(|f| [f[0], f[1]]).collect(),
            yaw_deg: slots.clone().map(|f| quat_to_yaw(f[3], f[4]).to_degrees()).collect(),
            v: slots.map(|f| f[2]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.xy.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xy.is_empty()
    }
}

fn check(pred: &PointSet, gt: &PointSet, mask: &[bool]) -> Result<()> {
    if pred.n_agents != gt.n_agents || pred.t_steps != gt.t_steps || mask.len() != gt.len() || pred.len() != gt.len() {
        return Err(Error::shape(
            "metrics",
            format!("{}x{} points and mask", gt.n_agents, gt.t_steps),
            format!("{}x{} points, {} mask entries", pred.n_agents, pred.t_steps, mask.len()),
        ));
    }
    Ok(())
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Absolute yaw difference wrapped to `[0, 180]` degrees.
pub fn yaw_diff_deg(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    if d > 180.0 {
        360.0 - d
    } else {
        d
    }
}

/// Mean Euclidean distance over masked-in points.
pub fn ade(pred: &PointSet, gt: &PointSet, mask: &[bool]) -> Result<f64> {
    check(pred, gt, mask)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..gt.len() {
        if mask[i] {
            sum += dist(pred.xy[i], gt.xy[i]);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::InvalidArgument("ade: no masked-in points".into()));
    }
    Ok(sum / n as f64)
}

/// Mean over agents of the distance at each agent's last masked-in step.
pub fn fde(pred: &PointSet, gt: &PointSet, mask: &[bool]) -> Result<f64> {
    check(pred, gt, mask)?;
    let t = gt.t_steps;
    let mut sum = 0.0;
    let mut n = 0usize;
    for a in 0..gt.n_agents {
        if let Some(k) = (0..t).rev().find(|&k| mask[a * t + k]) {
            sum += dist(pred.xy[a * t + k], gt.xy[a * t + k]);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::InvalidArgument("fde: no agents with masked-in points".into()));
    }
    Ok(sum / n as f64)
}

/// `(mean wrapped yaw error in degrees, mean |v̂ − v|)`.
pub fn orientation_velocity_error(pred: &PointSet, gt: &PointSet, mask: &[bool]) -> Result<(f64, f64)> {
    check(pred, gt, mask)?;
    let (mut yaw, mut vel) = (0.0, 0.0);
    let mut n = 0usize;
    for i in 0..gt.len() {
        if mask[i] {
            yaw += yaw_diff_deg(pred.yaw_deg[i], gt.yaw_deg[i]);
            vel += (pred.v[i] - gt.v[i]).abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::InvalidArgument("orientation error: no masked-in points".into()));
    }
    Ok((yaw / n as f64, vel / n as f64))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct TrajectoryScore {
    pub ade: f64,
    pub fde: f64,
    pub orientation_error: f64,
    pub velocity_error: f64,
    pub samples: usize,
}

/// Pools sums over many windows so dataset scores weight every point (or,
/// for FDE, every agent) equally.
#[derive(Clone, Debug, Default)]
pub struct TrajectoryAccumulator {
    dist_sum: f64,
    final_sum: f64,
    yaw_sum: f64,
    vel_sum: f64,
    points: usize,
    agents: usize,
}

impl TrajectoryAccumulator {
    pub fn add(&mut self, pred: &PointSet, gt: &PointSet, mask: &[bool]) -> Result<()> {
        check(pred, gt, mask)?;
        let t = gt.t_steps;
        for a in 0..gt.n_agents {
            let mut last = None;
            for k in 0..t {
                let i = a * t + k;
                if mask[i] {
                    self.dist_sum += dist(pred.xy[i], gt.xy[i]);
                    self.yaw_sum += yaw_diff_deg(pred.yaw_deg[i], gt.yaw_deg[i]);
                    self.vel_sum += (pred.v[i] - gt.v[i]).abs();
                    self.points += 1;
                    last = Some(i);
                }
            }
            if let Some(i) = last {
                self.final_sum += dist(pred.xy[i], gt.xy[i]);
                self.agents += 1;
            }
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<TrajectoryScore> {
        if self.points == 0 {
            return Err(Error::InvalidArgument("no masked-in points to score".into()));
        }
        let n = self.points as f64;
        Ok(TrajectoryScore {
            ade: self.dist_sum / n,
            fde: self.final_sum / self.agents as f64,
            orientation_error: self.yaw_sum / n,
            velocity_error: self.vel_sum / n,
            samples: self.points,
        })
    }
}

pub fn score(pred: &PointSet, gt: &PointSet, mask: &[bool]) -> Result<TrajectoryScore> {
    let mut acc = TrajectoryAccumulator::default();
    acc.add(pred, gt, mask)?;
    acc.finish()
}

/// Square confusion matrix with rows = predicted class, columns = truth.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(predicted: &[usize], truth: &[usize], classes: usize) -> Result<Self> {
        if predicted.len() != truth.len() {
            return Err(Error::shape("confusion", truth.len(), predicted.len()));
        }
        let mut counts = vec![vec![0u64; classes]; classes];
        for (&p, &t) in predicted.iter().zip(truth) {
            if p >= classes || t >= classes {
                return Err(Error::InvalidArgument(format!("class index out of range for {classes} classes")));
            }
            counts[p][t] += 1;
        }
        Ok(ConfusionMatrix { classes, counts })
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let correct: u64 = (0..self.classes).map(|c| self.counts[c][c]).sum();
        ratio(correct, self.total())
    }

    /// TP / (TP + FP); 0 when the class is never predicted.
    pub fn precision(&self, c: usize) -> f64 {
        ratio(self.counts[c][c], self.counts[c].iter().sum())
    }

    /// TP / (TP + FN); 0 when the class never occurs.
    pub fn recall(&self, c: usize) -> f64 {
        ratio(self.counts[c][c], (0..self.classes).map(|p| self.counts[p][c]).sum())
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Precision, recall and accuracy for one class.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassReport {
    pub accuracy: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub confusion: ConfusionMatrix,
}

pub fn classification_report(predicted: &[usize], truth: &[usize], classes: usize) -> Result<ClassReport> {
    if truth.is_empty() {
        return Err(Error::EmptyDataset("classification report"));
    }
    let confusion = ConfusionMatrix::new(predicted, truth, classes)?;
    Ok(ClassReport {
        accuracy: confusion.accuracy(),
        precision: (0..classes).map(|c| confusion.precision(c)).collect(),
        recall: (0..classes).map(|c| confusion.recall(c)).collect(),
        confusion,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// One point per distinct score, thresholds descending; a sample counts as
/// positive when its score is at least the threshold.
pub fn pr_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<PrPoint>> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument("pr_curve: empty input".into()));
    }
    if scores.len() != labels.len() {
        return Err(Error::shape("pr_curve", scores.len(), labels.len()));
    }
    if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::InvalidArgument(format!("pr_curve: score {s} outside [0, 1]")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let positives = labels.iter().filter(|&&l| l).count() as u64;
    let mut out = Vec::new();
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let thr = scores[order[i]];
        while i < order.len() && scores[order[i]] == thr {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        out.push(PrPoint {
            threshold: thr,
            precision: ratio(tp, tp + fp),
            recall: ratio(tp, positives),
        });
    }
    Ok(out)
}

pub fn write_pr_csv<W: Write>(points: &[PrPoint], w: W) -> Result<()> {
    let mut wr = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
    let err = |e: csv::Error| Error::InvalidArgument(format!("csv write failed: {e}"));
    wr.write_record(["threshold", "precision", "recall"]).map_err(err)?;
    for p in points {
        wr.write_record([p.threshold.to_string(), p.precision.to_string(), p.recall.to_string()])
            .map_err(err)?;
    }
    wr.flush().map_err(|e| Error::InvalidArgument(format!("csv flush failed: {e}")))
}

/// One CSV row per named sequence.
pub fn write_trajectory_csv<W: Write>(rows: &[(String, TrajectoryScore)], w: W) -> Result<()> {
    let mut wr = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
    let err = |e: csv::Error| Error::InvalidArgument(format!("csv write failed: {e}"));
    wr.write_record(["sequence", "ade", "fde", "orientation_error_deg", "velocity_error", "samples"])
        .map_err(err)?;
    for (name, s) in rows {
        wr.write_record([
            name.clone(),
            s.ade.to_string(),
            s.fde.to_string(),
            s.orientation_error.to_string(),
            s.velocity_error.to_string(),
            s.samples.to_string(),
        ])
        .map_err(err)?;
    }
    wr.flush().map_err(|e| Error::InvalidArgument(format!("csv flush failed: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn points(xy: Vec<[f64; 2]>, t: usize) -> PointSet {
        let n = xy.len();
        PointSet { n_agents: n / t, t_steps: t, yaw_deg: vec![0.0; n], v: vec![0.0; n], xy }
    }

    #[test]
    fn ade_examples() {
        let gt = points(vec![[0.0, 0.0], [1.0, 1.0], [2.0, 5.0]], 3);
        assert_eq!(ade(&gt, &gt, &[true; 3]).unwrap(), 0.0);
        let shifted = points(gt.xy.iter().map(|p| [p[0] + 0.3, p[1] + 0.4]).collect(), 3);
        assert!((ade(&shifted, &gt, &[true; 3]).unwrap() - 0.5).abs() < 1e-12);
        assert!(ade(&gt, &gt, &[false; 3]).is_err());
    }

    #[test]
    fn fde_uses_last_valid_step() {
        let gt = points(vec![[0.0, 0.0]; 8], 8);
        let mut xy = vec![[100.0, 100.0]; 8];
        xy[7] = [0.0, 1.0];
        assert_eq!(fde(&points(xy.clone(), 8), &gt, &[true; 8]).unwrap(), 1.0);
        xy[5] = [3.0, 4.0];
        let mask: Vec<bool> = (0..8).map(|k| k <= 5).collect();
        assert_eq!(fde(&points(xy, 8), &gt, &mask).unwrap(), 5.0);
    }

    #[test]
    fn yaw_wraps() {
        let mut a = points(vec![[0.0, 0.0]], 1);
        let mut b = a.clone();
        a.yaw_deg[0] = 10.0;
        b.yaw_deg[0] = 350.0;
        assert!((orientation_velocity_error(&a, &b, &[true]).unwrap().0 - 20.0).abs() < 1e-12);
        assert_eq!(orientation_velocity_error(&a, &a, &[true]).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn pr_examples() {
        let pts = pr_curve(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap();
        assert!(pts.iter().any(|p| p.precision == 1.0 && p.recall == 1.0));
        let flat = pr_curve(&[0.5; 4], &[true, false, false, false]).unwrap();
        assert_eq!(flat, vec![PrPoint { threshold: 0.5, precision: 0.25, recall: 1.0 }]);
        assert!(pr_curve(&[], &[]).is_err());
    }

    #[test]
    fn confusion_orientation_and_edge_cases() {
        let m = ConfusionMatrix::new(&[0, 0, 1], &[0, 1, 1], 2).unwrap();
        // rows are predictions
        assert_eq!(m.counts, vec![vec![1, 1], vec![0, 1]]);
        assert_eq!(m.precision(0), 0.5);
        assert_eq!(m.recall(1), 0.5);
        let truth = [0, 1, 2, 3, 0, 1, 2, 3];
        let r = classification_report(&[0; 8], &truth, 4).unwrap();
        assert_eq!(r.accuracy, 0.25);
        let perfect = classification_report(&truth, &truth, 4).unwrap();
        assert!(perfect.precision.iter().chain(&perfect.recall).all(|&v| v == 1.0));
    }

    proptest! {
        #[test]
        fn displacement_is_translation_invariant(
            xy in proptest::collection::vec((-50.0f64..50.0, -50.0f64..50.0, -50.0f64..50.0, -50.0f64..50.0, any::<bool>()), 12),
            sx in -100.0f64..100.0, sy in -100.0f64..100.0,
        ) {
            let pred = points(xy.iter().map(|p| [p.0, p.1]).collect(), 4);
            let gt = points(xy.iter().map(|p| [p.2, p.3]).collect(), 4);
            let mut mask: Vec<bool> = xy.iter().map(|p| p.4).collect();
            mask[0] = true;
            let shift = |s: &PointSet| points(s.xy.iter().map(|p| [p[0] + sx, p[1] + sy]).collect(), 4);
            let a = ade(&pred, &gt, &mask).unwrap();
            prop_assert!(a >= 0.0);
            prop_assert!((a - ade(&shift(&pred), &shift(&gt), &mask).unwrap()).abs() < 1e-12);
            prop_assert!((fde(&pred, &gt, &mask).unwrap() - fde(&shift(&pred), &shift(&gt), &mask).unwrap()).abs() < 1e-12);
        }
    }
}
