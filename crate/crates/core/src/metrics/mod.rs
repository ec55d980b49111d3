//! Recall-swept tracking metrics over JSON-lines records.
//!
//! Evaluation runs per class (classes absent from the ground truth are
//! skipped entirely), then macro-averages: the recall-averaged quantities
//! average their per-class values, the best-row quantities (MOTA, MOTP,
//! TVE, RECALL) are read at each class's best-MOTA row before averaging,
//! and ID switches are summed. Every row's accuracy uses the achieved
//! recall of its threshold, which keeps the recall-normalized MOTA inside
//! [0, 1].

pub mod reference;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::records::TrackRecord;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricConfig {
    /// Number of recall levels in the sweep; targets are k/L for k = 1..=L.
    pub num_recalls: usize,
    /// Maximum BEV center distance, meters, for a prediction to match.
    pub match_radius: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig { num_recalls: 40, match_radius: 2.0 }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_recalls == 0 {
            return Err(Error::InvalidConfig("num_recalls must be at least 1".into()));
        }
        if !(self.match_radius > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "match_radius must be positive, got {}",
                self.match_radius
            )));
        }
        Ok(())
    }
}

/// One matched (ground truth, prediction) pair in one frame.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchedPair {
    pub gt_track: u64,
    pub pred_track: u64,
    /// BEV center distance, meters.
    pub position_error: f64,
    /// L2 distance between the planar velocity vectors, m/s.
    pub velocity_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrameMatch {
    pub frame: usize,
    pub pairs: Vec<MatchedPair>,
    pub false_positives: usize,
    pub false_negatives: usize,
}

/// Frame-by-frame matching outcome, ascending by frame index.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrameMatching {
    pub frames: Vec<FrameMatch>,
}

impl FrameMatching {
    pub fn true_positives(&self) -> usize {
        self.frames.iter().map(|f| f.pairs.len()).sum()
    }

    pub fn false_positives(&self) -> usize {
        self.frames.iter().map(|f| f.false_positives).sum()
    }

    pub fn false_negatives(&self) -> usize {
        self.frames.iter().map(|f| f.false_negatives).sum()
    }
}

fn check_duplicates(records: &[TrackRecord], label: &str) -> Result<()> {
    let mut seen = HashSet::with_capacity(records.len());
    for r in records {
        if !seen.insert((r.frame, r.track_id)) {
            return Err(Error::InvalidArgument(format!(
                "{label}: duplicate record for frame {} track {}",
                r.frame, r.track_id
            )));
        }
    }
    Ok(())
}

/// Greedy per-frame matching by ascending BEV center distance.
///
/// Only same-class pairs within `match_radius` are eligible; predictions
/// scoring below `score_threshold` are ignored. Ties break on (distance,
/// gt id, pred id). Leftover ground truth counts as false negatives,
/// leftover predictions as false positives.
pub fn match_frames(
    gt: &[TrackRecord],
    preds: &[TrackRecord],
    score_threshold: f64,
    cfg: &MetricConfig,
) -> Result<FrameMatching> {
    cfg.validate()?;
    check_duplicates(gt, "ground truth")?;
    check_duplicates(preds, "predictions")?;

    let mut by_frame: BTreeMap<usize, (Vec<&TrackRecord>, Vec<&TrackRecord>)> = BTreeMap::new();
    for g in gt {
        by_frame.entry(g.frame).or_default().0.push(g);
    }
    for p in preds {
        if p.score >= score_threshold {
            by_frame.entry(p.frame).or_default().1.push(p);
        }
    }

    let mut frames = Vec::with_capacity(by_frame.len());
    for (frame, (gt_rows, pred_rows)) in by_frame {
        // (distance, gt id, pred id, gt index, pred index)
        let mut candidates = Vec::new();
        for (gi, g) in gt_rows.iter().enumerate() {
            for (pi, p) in pred_rows.iter().enumerate() {
                if g.class != p.class {
                    continue;
                }
                let dx = g.center[0] - p.center[0];
                let dy = g.center[1] - p.center[1];
                let d = (dx * dx + dy * dy).sqrt();
                if d <= cfg.match_radius {
                    candidates.push((d, g.track_id, p.track_id, gi, pi));
                }
            }
        }
        candidates.sort_by(|a, b| {
            a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
        });
        let mut gt_used = vec![false; gt_rows.len()];
        let mut pred_used = vec![false; pred_rows.len()];
        let mut pairs = Vec::new();
        for (d, gt_id, pred_id, gi, pi) in candidates {
            if gt_used[gi] || pred_used[pi] {
                continue;
            }
            gt_used[gi] = true;
            pred_used[pi] = true;
            let g = gt_rows[gi];
            let p = pred_rows[pi];
            let dvx = g.velocity[0] - p.velocity[0];
            let dvy = g.velocity[1] - p.velocity[1];
            pairs.push(MatchedPair {
                gt_track: gt_id,
                pred_track: pred_id,
                position_error: d,
                velocity_error: (dvx * dvx + dvy * dvy).sqrt(),
            });
        }
        let false_negatives = gt_used.iter().filter(|u| !**u).count();
        let false_positives = pred_used.iter().filter(|u| !**u).count();
        frames.push(FrameMatch { frame, pairs, false_positives, false_negatives });
    }
    Ok(FrameMatching { frames })
}

/// Counts identity switches: +1 whenever a ground-truth track's matched
/// prediction id differs from the most recent previously matched id.
/// Unmatched gaps in between do not count.
pub fn count_id_switches(matching: &FrameMatching) -> usize {
    let mut last: BTreeMap<u64, u64> = BTreeMap::new();
    let mut switches = 0;
    for frame in &matching.frames {
        for pair in &frame.pairs {
            if let Some(&prev) = last.get(&pair.gt_track) {
                if prev != pair.pred_track {
                    switches += 1;
                }
            }
            last.insert(pair.gt_track, pair.pred_track);
        }
    }
    switches
}

/// Recall-normalized accuracy: max(0, 1 - (FP + FN + IDS - (1-r)GT) / (rGT)).
pub fn mota_at_recall(
    false_positives: usize,
    false_negatives: usize,
    id_switches: usize,
    recall: f64,
    gt_count: usize,
) -> f64 {
    assert!(recall > 0.0 && recall <= 1.0, "recall {recall} outside (0, 1]");
    assert!(gt_count > 0, "empty ground truth");
    let gt = gt_count as f64;
    let errors = (false_positives + false_negatives + id_switches) as f64;
    (1.0 - (errors - (1.0 - recall) * gt) / (recall * gt)).max(0.0)
}

/// One recall level of the sweep. Unattained rows (no threshold reaches the
/// target recall) carry `None` for threshold and achieved recall, zero
/// counts, and zero accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallRow {
    pub target_recall: f64,
    pub threshold: Option<f64>,
    /// Achieved recall at the chosen threshold.
    pub recall: Option<f64>,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub id_switches: usize,
    pub mota: f64,
    /// Mean BEV position error over this row's matches, meters.
    pub position_error: f64,
    /// Mean velocity error over this row's matches, m/s.
    pub velocity_error: f64,
}

impl RecallRow {
    pub fn attained(&self) -> bool {
        self.threshold.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class_id: usize,
    /// Number of ground-truth boxes of this class.
    pub gt_count: usize,
    pub rows: Vec<RecallRow>,
    /// Index into `rows` of the highest-accuracy row (first on ties).
    pub best_row: usize,
    pub amota: f64,
    pub amotp: f64,
    pub atve: f64,
    pub mota: f64,
    pub motp: f64,
    pub tve: f64,
    pub recall: f64,
    pub id_switches: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub classes: Vec<ClassReport>,
    pub gt_count: usize,
    pub amota: f64,
    pub amotp: f64,
    pub atve: f64,
    pub mota: f64,
    pub motp: f64,
    pub tve: f64,
    pub recall: f64,
    pub id_switches: usize,
}

struct ThresholdStats {
    threshold: f64,
    recall: f64,
    true_positives: usize,
    false_positives: usize,
    false_negatives: usize,
    id_switches: usize,
    position_error_sum: f64,
    velocity_error_sum: f64,
}

fn threshold_stats(
    gt: &[TrackRecord],
    preds: &[TrackRecord],
    threshold: f64,
    cfg: &MetricConfig,
) -> Result<ThresholdStats> {
    let matching = match_frames(gt, preds, threshold, cfg)?;
    let true_positives = matching.true_positives();
    let mut position_error_sum = 0.0;
    let mut velocity_error_sum = 0.0;
    for frame in &matching.frames {
        for pair in &frame.pairs {
            position_error_sum += pair.position_error;
            velocity_error_sum += pair.velocity_error;
        }
    }
    Ok(ThresholdStats {
        threshold,
        recall: true_positives as f64 / gt.len() as f64,
        true_positives,
        false_positives: matching.false_positives(),
        false_negatives: matching.false_negatives(),
        id_switches: count_id_switches(&matching),
        position_error_sum,
        velocity_error_sum,
    })
}

fn evaluate_class(
    class_id: usize,
    gt: &[TrackRecord],
    preds: &[TrackRecord],
    cfg: &MetricConfig,
) -> Result<ClassReport> {
    let gt_count = gt.len();
    let mut scores: Vec<f64> = preds.iter().map(|p| p.score).collect();
    scores.sort_by(|a, b| b.total_cmp(a));
    scores.dedup();
    let stats: Vec<ThresholdStats> =
        scores.iter().map(|&s| threshold_stats(gt, preds, s, cfg)).collect::<Result<_>>()?;

    let l = cfg.num_recalls;
    let mut rows = Vec::with_capacity(l);
    for k in 1..=l {
        let target = k as f64 / l as f64;
        // Highest threshold whose achieved recall reaches the target.
        let row = match stats.iter().find(|st| st.recall >= target) {
            Some(st) => RecallRow {
                target_recall: target,
                threshold: Some(st.threshold),
                recall: Some(st.recall),
                true_positives: st.true_positives,
                false_positives: st.false_positives,
                false_negatives: st.false_negatives,
                id_switches: st.id_switches,
                mota: mota_at_recall(
                    st.false_positives,
                    st.false_negatives,
                    st.id_switches,
                    st.recall,
                    gt_count,
                ),
                position_error: st.position_error_sum / st.true_positives as f64,
                velocity_error: st.velocity_error_sum / st.true_positives as f64,
            },
            None => RecallRow {
                target_recall: target,
                threshold: None,
                recall: None,
                true_positives: 0,
                false_positives: 0,
                false_negatives: 0,
                id_switches: 0,
                mota: 0.0,
                position_error: 0.0,
                velocity_error: 0.0,
            },
        };
        rows.push(row);
    }

    let amota = rows.iter().map(|r| r.mota).sum::<f64>() / l as f64;
    let attained: Vec<&RecallRow> = rows.iter().filter(|r| r.attained()).collect();
    let (amotp, atve) = if attained.is_empty() {
        (0.0, 0.0)
    } else {
        let n = attained.len() as f64;
        (
            attained.iter().map(|r| r.position_error).sum::<f64>() / n,
            attained.iter().map(|r| r.velocity_error).sum::<f64>() / n,
        )
    };
    let mut best_row = 0;
    for (i, row) in rows.iter().enumerate() {
        if row.mota > rows[best_row].mota {
            best_row = i;
        }
    }
    let best = &rows[best_row];
    Ok(ClassReport {
        class_id,
        gt_count,
        best_row,
        amota,
        amotp,
        atve,
        mota: best.mota,
        motp: best.position_error,
        tve: best.velocity_error,
        recall: best.recall.unwrap_or(0.0),
        id_switches: best.id_switches,
        rows,
    })
}

/// Full evaluation: per-class recall sweep, then macro-averaged aggregates.
pub fn evaluate(
    gt: &[TrackRecord],
    preds: &[TrackRecord],
    cfg: &MetricConfig,
) -> Result<MetricReport> {
    cfg.validate()?;
    if gt.is_empty() {
        return Err(Error::InvalidArgument("no ground-truth records to evaluate".into()));
    }
    check_duplicates(gt, "ground truth")?;
    check_duplicates(preds, "predictions")?;

    let classes: BTreeSet<usize> = gt.iter().map(|r| r.class).collect();
    let mut reports = Vec::with_capacity(classes.len());
    for &class_id in &classes {
        let gt_c: Vec<TrackRecord> =
            gt.iter().filter(|r| r.class == class_id).cloned().collect();
        let preds_c: Vec<TrackRecord> =
            preds.iter().filter(|r| r.class == class_id).cloned().collect();
        reports.push(evaluate_class(class_id, &gt_c, &preds_c, cfg)?);
    }

    let n = reports.len() as f64;
    let mean = |f: &dyn Fn(&ClassReport) -> f64| reports.iter().map(|c| f(c)).sum::<f64>() / n;
    Ok(MetricReport {
        gt_count: gt.len(),
        amota: mean(&|c| c.amota),
        amotp: mean(&|c| c.amotp),
        atve: mean(&|c| c.atve),
        mota: mean(&|c| c.mota),
        motp: mean(&|c| c.motp),
        tve: mean(&|c| c.tve),
        recall: mean(&|c| c.recall),
        id_switches: reports.iter().map(|c| c.id_switches).sum(),
        classes: reports,
    })
}

/// Writes the full report as pretty JSON.
pub fn write_report_json(path: &Path, report: &MetricReport) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, report)?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes a flat CSV: one row per class per recall level, then one
/// aggregate row carrying the macro-averaged summary (the amota, amotp and
/// atve columns are only filled there).
pub fn write_report_csv(path: &Path, report: &MetricReport) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path, e);
    writeln!(
        w,
        "class,target_recall,threshold,attained,recall,tp,fp,fn,ids,mota,position_error,velocity_error,amota,amotp,atve"
    )
    .map_err(io_err)?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for class in &report.classes {
        for row in &class.rows {
            writeln!(
                w,
                "{},{:.6},{},{},{},{},{},{},{},{:.6},{:.6},{:.6},,,",
                class.class_id,
                row.target_recall,
                opt(row.threshold),
                row.attained(),
                opt(row.recall),
                row.true_positives,
                row.false_positives,
                row.false_negatives,
                row.id_switches,
                row.mota,
                row.position_error,
                row.velocity_error,
            )
            .map_err(io_err)?;
        }
    }
    writeln!(
        w,
        "aggregate,,,,{:.6},,,,{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
        report.recall,
        report.id_switches,
        report.mota,
        report.motp,
        report.tve,
        report.amota,
        report.amotp,
        report.atve,
    )
    .map_err(io_err)?;
    w.flush().map_err(io_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn rec(
        frame: usize,
        track_id: u64,
        class: usize,
        x: f64,
        y: f64,
        vx: f64,
        vy: f64,
        score: f64,
    ) -> TrackRecord {
        TrackRecord {
            frame,
            track_id,
            class,
            center: [x, y, 0.8],
            size: [1.9, 4.5, 1.6],
            velocity: [vx, vy],
            yaw_sin: 0.0,
            yaw_cos: 1.0,
            score,
            coasted: false,
        }
    }

    /// Two constant-velocity tracks of different classes over `n` frames.
    fn simple_gt(n: usize) -> Vec<TrackRecord> {
        let mut out = Vec::new();
        for f in 0..n {
            let t = f as f64 * 0.5;
            out.push(rec(f, 1, 0, 2.0 * t, 3.0, 2.0, 0.0, 1.0));
            out.push(rec(f, 2, 2, -4.0, 1.5 * t, 0.0, 1.5, 1.0));
        }
        out
    }

    #[test]
    fn hand_case_recall_half_scores_point_eight() {
        assert_relative_eq!(mota_at_recall(1, 5, 0, 0.5, 10), 0.8, epsilon = 1e-12);
        assert_relative_eq!(mota_at_recall(0, 0, 0, 1.0, 7), 1.0);
        // Error mass beyond r*GT clamps at zero.
        assert_relative_eq!(mota_at_recall(20, 5, 3, 0.5, 10), 0.0);
    }

    #[test]
    fn feeding_gt_back_gives_perfect_scores() {
        let gt = simple_gt(6);
        let report = evaluate(&gt, &gt, &MetricConfig::default()).unwrap();
        assert_eq!(report.amota, 1.0);
        assert_eq!(report.amotp, 0.0);
        assert_eq!(report.atve, 0.0);
        assert_eq!(report.tve, 0.0);
        assert_eq!(report.mota, 1.0);
        assert_eq!(report.recall, 1.0);
        assert_eq!(report.id_switches, 0);
        for class in &report.classes {
            assert!(class.rows.iter().all(|r| r.attained()));
            assert!(class.rows.iter().all(|r| r.mota == 1.0));
        }
    }

    #[test]
    fn no_predictions_gives_zero_amota_not_an_error() {
        let gt = simple_gt(4);
        let report = evaluate(&gt, &[], &MetricConfig::default()).unwrap();
        assert_eq!(report.amota, 0.0);
        assert_eq!(report.recall, 0.0);
        assert!(report.classes.iter().all(|c| c.rows.iter().all(|r| !r.attained())));
    }

    #[test]
    fn empty_ground_truth_is_an_error() {
        let preds = simple_gt(2);
        let err = evaluate(&[], &preds, &MetricConfig::default()).unwrap_err();
        assert!(err.to_string().contains("ground-truth"));
    }

    #[test]
    fn equidistant_prediction_matches_lower_gt_id() {
        let gt = vec![
            rec(0, 5, 0, 0.0, 1.0, 0.0, 0.0, 1.0),
            rec(0, 3, 0, 0.0, -1.0, 0.0, 0.0, 1.0),
        ];
        let preds = vec![rec(0, 9, 0, 0.0, 0.0, 0.0, 0.0, 1.0)];
        let m = match_frames(&gt, &preds, 0.0, &MetricConfig::default()).unwrap();
        assert_eq!(m.frames[0].pairs.len(), 1);
        assert_eq!(m.frames[0].pairs[0].gt_track, 3);
        assert_eq!(m.frames[0].false_negatives, 1);
        assert_eq!(m.frames[0].false_positives, 0);
    }

    #[test]
    fn matching_is_class_aware_and_radius_limited() {
        let gt = vec![rec(0, 1, 0, 0.0, 0.0, 0.0, 0.0, 1.0)];
        let wrong_class = vec![rec(0, 2, 1, 0.1, 0.0, 0.0, 0.0, 1.0)];
        let m = match_frames(&gt, &wrong_class, 0.0, &MetricConfig::default()).unwrap();
        assert!(m.frames[0].pairs.is_empty());
        assert_eq!(m.frames[0].false_positives, 1);
        assert_eq!(m.frames[0].false_negatives, 1);

        let too_far = vec![rec(0, 2, 0, 2.5, 0.0, 0.0, 0.0, 1.0)];
        let m = match_frames(&gt, &too_far, 0.0, &MetricConfig::default()).unwrap();
        assert!(m.frames[0].pairs.is_empty());

        let borderline = vec![rec(0, 2, 0, 2.0, 0.0, 0.0, 0.0, 1.0)];
        let m = match_frames(&gt, &borderline, 0.0, &MetricConfig::default()).unwrap();
        assert_eq!(m.frames[0].pairs.len(), 1);
    }

    #[test]
    fn id_swap_counts_two_switches_and_gaps_count_none() {
        // Two GT tracks whose matched ids swap at frame 2.
        let gt = vec![
            rec(0, 1, 0, 0.0, 0.0, 0.0, 0.0, 1.0),
            rec(0, 2, 0, 10.0, 0.0, 0.0, 0.0, 1.0),
            rec(1, 1, 0, 0.0, 0.0, 0.0, 0.0, 1.0),
            rec(1, 2, 0, 10.0, 0.0, 0.0, 0.0, 1.0),
            rec(2, 1, 0, 0.0, 0.0, 0.0, 0.0, 1.0),
            rec(2, 2, 0, 10.0, 0.0, 0.0, 0.0, 1.0),
        ];
        let preds = vec![
            rec(0, 7, 0, 0.0, 0.0, 0.0, 0.0, 1.0),
            rec(0, 8, 0, 10.0, 0.0, 0.0, 0.0, 1.0),
            rec(1, 7, 0, 0.0, 0.0, 0.0, 0.0, 1.0),
            rec(1, 8, 0, 10.0, 0.0, 0.0, 0.0, 1.0),
            rec(2, 8, 0, 0.0, 0.0, 0.0, 0.0, 1.0),
            rec(2, 7, 0, 10.0, 0.0, 0.0, 0.0, 1.0),
        ];
        let m = match_frames(&gt, &preds, 0.0, &MetricConfig::default()).unwrap();
        assert_eq!(count_id_switches(&m), 2);

        // Gap then rematch to the same id: no switch.
        let gt2 = vec![
            rec(0, 1, 0, 0.0, 0.0, 0.0, 0.0, 1.0),
            rec(1, 1, 0, 0.0, 0.0, 0.0, 0.0, 1.0),
            rec(2, 1, 0, 0.0, 0.0, 0.0, 0.0, 1.0),
        ];
        let preds2 = vec![
            rec(0, 7, 0, 0.0, 0.0, 0.0, 0.0, 1.0),
            rec(2, 7, 0, 0.0, 0.0, 0.0, 0.0, 1.0),
        ];
        let m2 = match_frames(&gt2, &preds2, 0.0, &MetricConfig::default()).unwrap();
        assert_eq!(count_id_switches(&m2), 0);
    }

    #[test]
    fn duplicate_records_are_rejected() {
        let gt = vec![
            rec(0, 1, 0, 0.0, 0.0, 0.0, 0.0, 1.0),
            rec(0, 1, 0, 5.0, 0.0, 0.0, 0.0, 1.0),
        ];
        let preds = vec![rec(0, 2, 0, 0.0, 0.0, 0.0, 0.0, 1.0)];
        assert!(match_frames(&gt, &preds, 0.0, &MetricConfig::default()).is_err());
        assert!(evaluate(&gt, &preds, &MetricConfig::default()).is_err());
        assert!(evaluate(&preds, &gt, &MetricConfig::default()).is_err());
    }

    #[test]
    fn constant_velocity_offset_yields_unit_velocity_errors() {
        let gt = simple_gt(5);
        let preds: Vec<TrackRecord> = gt
            .iter()
            .map(|r| TrackRecord {
                track_id: r.track_id + 100,
                velocity: [r.velocity[0] + 1.0, r.velocity[1]],
                ..r.clone()
            })
            .collect();
        let report = evaluate(&gt, &preds, &MetricConfig::default()).unwrap();
        assert_relative_eq!(report.atve, 1.0, epsilon = 1e-12);
        assert_relative_eq!(report.tve, 1.0, epsilon = 1e-12);
        assert_eq!(report.amotp, 0.0);
        assert_eq!(report.amota, 1.0);
    }

    #[test]
    fn spurious_far_track_never_raises_amota() {
        for seed in 0..30u64 {
            let (gt, preds) = reference::random_instance(seed);
            let base = evaluate(&gt, &preds, &MetricConfig::default()).unwrap();
            let mut spoiled = preds.clone();
            let frames: BTreeSet<usize> = gt.iter().map(|r| r.frame).collect();
            for &f in &frames {
                spoiled.push(rec(f, 999, 0, 500.0, 500.0, 0.0, 0.0, 0.6));
            }
            let worse = evaluate(&gt, &spoiled, &MetricConfig::default()).unwrap();
            assert!(
                worse.amota <= base.amota + 1e-12,
                "seed {seed}: amota rose from {} to {}",
                base.amota,
                worse.amota
            );
        }
    }

    #[test]
    fn disjoint_duplication_preserves_ratio_metrics() {
        for seed in [1u64, 5, 9, 13] {
            let (gt, preds) = reference::random_instance(seed);
            let shift = |rows: &[TrackRecord], did: u64| -> Vec<TrackRecord> {
                rows.iter()
                    .map(|r| TrackRecord {
                        track_id: r.track_id + did,
                        center: [r.center[0] + 500.0, r.center[1], r.center[2]],
                        ..r.clone()
                    })
                    .collect()
            };
            let mut gt2 = gt.clone();
            gt2.extend(shift(&gt, 5000));
            let mut preds2 = preds.clone();
            preds2.extend(shift(&preds, 5000));
            let one = evaluate(&gt, &preds, &MetricConfig::default()).unwrap();
            let two = evaluate(&gt2, &preds2, &MetricConfig::default()).unwrap();
            assert_relative_eq!(one.amota, two.amota, epsilon = 1e-9);
        }
    }

    #[test]
    fn rows_stay_in_bounds_with_non_decreasing_recall() {
        for seed in 0..20u64 {
            let (gt, preds) = reference::random_instance(seed);
            let report = evaluate(&gt, &preds, &MetricConfig::default()).unwrap();
            for class in &report.classes {
                let mut prev = 0.0;
                for row in &class.rows {
                    assert!((0.0..=1.0).contains(&row.mota), "mota {}", row.mota);
                    if let Some(r) = row.recall {
                        assert!(r >= prev - 1e-15, "recall dipped: {prev} -> {r}");
                        prev = r;
                    }
                }
            }
        }
    }

    #[test]
    fn sweep_matches_reference_on_random_instances() {
        let cfg = MetricConfig::default();
        for seed in 0..40u64 {
            let (gt, preds) = reference::random_instance(seed);
            let fast = evaluate(&gt, &preds, &cfg).unwrap();
            let slow = reference::exhaustive_evaluate(&gt, &preds, &cfg).unwrap();
            reference::assert_reports_close(&fast, &slow, 1e-9);
        }
    }

    #[test]
    fn report_files_round_trip() {
        use tempfile::tempdir;
        let gt = simple_gt(4);
        let report = evaluate(&gt, &gt, &MetricConfig::default()).unwrap();
        let dir = tempdir().unwrap();
        let json = dir.path().join("report.json");
        write_report_json(&json, &report).unwrap();
        let text = std::fs::read_to_string(&json).unwrap();
        let back: MetricReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back, report);

        let csv = dir.path().join("report.csv");
        write_report_csv(&csv, &report).unwrap();
        let text = std::fs::read_to_string(&csv).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        // Header + one row per class per recall + aggregate.
        assert_eq!(lines.len(), 1 + 2 * 40 + 1);
        assert!(lines.last().unwrap().starts_with("aggregate"));
    }
}
