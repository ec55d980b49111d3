//! Brute-force reference evaluator used to cross-check the recall sweep.
//!
//! This path is deliberately written without reusing the sweep machinery:
//! it enumerates every distinct score as a threshold, rebuilds the full
//! matching for each one by repeatedly picking the globally closest free
//! pair, and aggregates with plain loops. It shares only the record types
//! with the fast path.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::records::TrackRecord;

use super::{ClassReport, MetricConfig, MetricReport, RecallRow};

struct Matched {
    frame: usize,
    gt_track: u64,
    pred_track: u64,
    distance: f64,
    velocity_error: f64,
}

struct Tally {
    threshold: f64,
    matched: Vec<Matched>,
    false_positives: usize,
    false_negatives: usize,
}

fn sorted_frames(gt: &[TrackRecord], preds: &[TrackRecord], threshold: f64) -> Vec<usize> {
    let mut frames = Vec::new();
    for r in gt {
        if !frames.contains(&r.frame) {
            frames.push(r.frame);
        }
    }
    for r in preds {
        if r.score >= threshold && !frames.contains(&r.frame) {
            frames.push(r.frame);
        }
    }
    frames.sort_unstable();
    frames
}

/// Rebuilds the matching for one threshold from scratch. Within a frame the
/// globally closest free (gt, pred) pair is taken repeatedly, ties broken
/// by gt id then pred id; pairs beyond the radius or across classes are
/// never eligible.
fn tally_threshold(
    gt: &[TrackRecord],
    preds: &[TrackRecord],
    threshold: f64,
    radius: f64,
) -> Tally {
    let mut matched = Vec::new();
    let mut false_positives = 0;
    let mut false_negatives = 0;
    for frame in sorted_frames(gt, preds, threshold) {
        let gt_rows: Vec<&TrackRecord> = gt.iter().filter(|r| r.frame == frame).collect();
        let pred_rows: Vec<&TrackRecord> = preds
            .iter()
            .filter(|r| r.frame == frame && r.score >= threshold)
            .collect();
        let mut gt_free = vec![true; gt_rows.len()];
        let mut pred_free = vec![true; pred_rows.len()];
        loop {
            let mut best: Option<(f64, u64, u64, usize, usize)> = None;
            for (gi, g) in gt_rows.iter().enumerate() {
                if !gt_free[gi] {
                    continue;
                }
                for (pi, p) in pred_rows.iter().enumerate() {
                    if !pred_free[pi] || g.class != p.class {
                        continue;
                    }
                    let dx = g.center[0] - p.center[0];
                    let dy = g.center[1] - p.center[1];
                    let d = (dx * dx + dy * dy).sqrt();
                    if d > radius {
                        continue;
                    }
                    let key = (d, g.track_id, p.track_id, gi, pi);
                    let better = match &best {
                        None => true,
                        Some(b) => {
                            d < b.0
                                || (d == b.0 && g.track_id < b.1)
                                || (d == b.0 && g.track_id == b.1 && p.track_id < b.2)
                        }
                    };
                    if better {
                        best = Some(key);
                    }
                }
            }
            let Some((d, gtid, pid, gi, pi)) = best else { break };
            gt_free[gi] = false;
            pred_free[pi] = false;
            let g = gt_rows[gi];
            let p = pred_rows[pi];
            let dvx = g.velocity[0] - p.velocity[0];
            let dvy = g.velocity[1] - p.velocity[1];
            matched.push(Matched {
                frame,
                gt_track: gtid,
                pred_track: pid,
                distance: d,
                velocity_error: (dvx * dvx + dvy * dvy).sqrt(),
            });
        }
        false_negatives += gt_free.iter().filter(|f| **f).count();
        false_positives += pred_free.iter().filter(|f| **f).count();
    }
    Tally { threshold, matched, false_positives, false_negatives }
}

fn switches_in(matched: &[Matched]) -> usize {
    let mut gt_ids = Vec::new();
    for m in matched {
        if !gt_ids.contains(&m.gt_track) {
            gt_ids.push(m.gt_track);
        }
    }
    let mut total = 0;
    for gid in gt_ids {
        let mut seq: Vec<(usize, u64)> = matched
            .iter()
            .filter(|m| m.gt_track == gid)
            .map(|m| (m.frame, m.pred_track))
            .collect();
        seq.sort_unstable();
        for pair in seq.windows(2) {
            if pair[0].1 != pair[1].1 {
                total += 1;
            }
        }
    }
    total
}

fn class_report(
    class_id: usize,
    gt: &[TrackRecord],
    preds: &[TrackRecord],
    cfg: &MetricConfig,
) -> ClassReport {
    let gt_count = gt.len();
    let mut thresholds: Vec<f64> = Vec::new();
    for p in preds {
        if !thresholds.contains(&p.score) {
            thresholds.push(p.score);
        }
    }
    thresholds.sort_by(|a, b| b.total_cmp(a));
    let tallies: Vec<Tally> = thresholds
        .iter()
        .map(|&t| tally_threshold(gt, preds, t, cfg.match_radius))
        .collect();

    let l = cfg.num_recalls;
    let mut rows = Vec::with_capacity(l);
    for k in 1..=l {
        let target = k as f64 / l as f64;
        let mut chosen: Option<&Tally> = None;
        for tally in &tallies {
            let achieved = tally.matched.len() as f64 / gt_count as f64;
            if achieved >= target {
                chosen = Some(tally);
                break;
            }
        }
        let row = match chosen {
            Some(t) => {
                let tp = t.matched.len();
                let recall = tp as f64 / gt_count as f64;
                let ids = switches_in(&t.matched);
                let gtf = gt_count as f64;
                let errors = (t.false_positives + t.false_negatives + ids) as f64;
                let raw = 1.0 - (errors - (1.0 - recall) * gtf) / (recall * gtf);
                let mut dsum = 0.0;
                let mut vsum = 0.0;
                for m in &t.matched {
                    dsum += m.distance;
                    vsum += m.velocity_error;
                }
                RecallRow {
                    target_recall: target,
                    threshold: Some(t.threshold),
                    recall: Some(recall),
                    true_positives: tp,
                    false_positives: t.false_positives,
                    false_negatives: t.false_negatives,
                    id_switches: ids,
                    mota: if raw < 0.0 { 0.0 } else { raw },
                    position_error: dsum / tp as f64,
                    velocity_error: vsum / tp as f64,
                }
            }
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

    let mut mota_sum = 0.0;
    for row in &rows {
        mota_sum += row.mota;
    }
    let mut attained = 0usize;
    let mut motp_sum = 0.0;
    let mut tve_sum = 0.0;
    for row in &rows {
        if row.threshold.is_some() {
            attained += 1;
            motp_sum += row.position_error;
            tve_sum += row.velocity_error;
        }
    }
    let mut best_row = 0;
    for i in 0..rows.len() {
        if rows[i].mota > rows[best_row].mota {
            best_row = i;
        }
    }
    ClassReport {
        class_id,
        gt_count,
        best_row,
        amota: mota_sum / l as f64,
        amotp: if attained == 0 { 0.0 } else { motp_sum / attained as f64 },
        atve: if attained == 0 { 0.0 } else { tve_sum / attained as f64 },
        mota: rows[best_row].mota,
        motp: rows[best_row].position_error,
        tve: rows[best_row].velocity_error,
        recall: match rows[best_row].recall {
            Some(r) => r,
            None => 0.0,
        },
        id_switches: rows[best_row].id_switches,
        rows,
    }
}

/// Exhaustive evaluation over every distinct score threshold. Produces the
/// same report shape as the fast sweep and must agree with it field by
/// field.
pub fn exhaustive_evaluate(
    gt: &[TrackRecord],
    preds: &[TrackRecord],
    cfg: &MetricConfig,
) -> Result<MetricReport> {
    cfg.validate()?;
    if gt.is_empty() {
        return Err(Error::InvalidArgument("no ground-truth records to evaluate".into()));
    }
    for (label, rows) in [("ground truth", gt), ("predictions", preds)] {
        for i in 0..rows.len() {
            for j in (i + 1)..rows.len() {
                if rows[i].frame == rows[j].frame && rows[i].track_id == rows[j].track_id {
                    return Err(Error::InvalidArgument(format!(
                        "{label}: duplicate record for frame {} track {}",
                        rows[i].frame, rows[i].track_id
                    )));
                }
            }
        }
    }

    let mut classes: Vec<usize> = Vec::new();
    for r in gt {
        if !classes.contains(&r.class) {
            classes.push(r.class);
        }
    }
    classes.sort_unstable();

    let mut reports = Vec::new();
    for &class_id in &classes {
        let gt_c: Vec<TrackRecord> = gt.iter().filter(|r| r.class == class_id).cloned().collect();
        let preds_c: Vec<TrackRecord> =
            preds.iter().filter(|r| r.class == class_id).cloned().collect();
        reports.push(class_report(class_id, &gt_c, &preds_c, cfg));
    }

    let n = reports.len() as f64;
    let mut sums = [0.0f64; 7];
    let mut ids = 0usize;
    for c in &reports {
        sums[0] += c.amota;
        sums[1] += c.amotp;
        sums[2] += c.atve;
        sums[3] += c.mota;
        sums[4] += c.motp;
        sums[5] += c.tve;
        sums[6] += c.recall;
        ids += c.id_switches;
    }
    Ok(MetricReport {
        gt_count: gt.len(),
        amota: sums[0] / n,
        amotp: sums[1] / n,
        atve: sums[2] / n,
        mota: sums[3] / n,
        motp: sums[4] / n,
        tve: sums[5] / n,
        recall: sums[6] / n,
        id_switches: ids,
        classes: reports,
    })
}

/// Panics unless the two reports agree on every field: counts and indices
/// exactly, floating-point values within `tol`.
pub fn assert_reports_close(a: &MetricReport, b: &MetricReport, tol: f64) {
    let close = |x: f64, y: f64, what: &str| {
        assert!((x - y).abs() <= tol, "{what}: {x} vs {y}");
    };
    assert_eq!(a.gt_count, b.gt_count, "gt_count");
    assert_eq!(a.id_switches, b.id_switches, "id_switches");
    close(a.amota, b.amota, "amota");
    close(a.amotp, b.amotp, "amotp");
    close(a.atve, b.atve, "atve");
    close(a.mota, b.mota, "mota");
    close(a.motp, b.motp, "motp");
    close(a.tve, b.tve, "tve");
    close(a.recall, b.recall, "recall");
    assert_eq!(a.classes.len(), b.classes.len(), "class count");
    for (ca, cb) in a.classes.iter().zip(&b.classes) {
        let tag = format!("class {}", ca.class_id);
        assert_eq!(ca.class_id, cb.class_id, "{tag}: id");
        assert_eq!(ca.gt_count, cb.gt_count, "{tag}: gt_count");
        assert_eq!(ca.best_row, cb.best_row, "{tag}: best_row");
        assert_eq!(ca.id_switches, cb.id_switches, "{tag}: id_switches");
        close(ca.amota, cb.amota, &format!("{tag}: amota"));
        close(ca.amotp, cb.amotp, &format!("{tag}: amotp"));
        close(ca.atve, cb.atve, &format!("{tag}: atve"));
        close(ca.mota, cb.mota, &format!("{tag}: mota"));
        close(ca.motp, cb.motp, &format!("{tag}: motp"));
        close(ca.tve, cb.tve, &format!("{tag}: tve"));
        close(ca.recall, cb.recall, &format!("{tag}: recall"));
        assert_eq!(ca.rows.len(), cb.rows.len(), "{tag}: row count");
        for (i, (ra, rb)) in ca.rows.iter().zip(&cb.rows).enumerate() {
            let tag = format!("{tag} row {i}");
            close(ra.target_recall, rb.target_recall, &format!("{tag}: target"));
            assert_eq!(
                ra.threshold.is_some(),
                rb.threshold.is_some(),
                "{tag}: attained mismatch"
            );
            if let (Some(x), Some(y)) = (ra.threshold, rb.threshold) {
                close(x, y, &format!("{tag}: threshold"));
            }
            if let (Some(x), Some(y)) = (ra.recall, rb.recall) {
                close(x, y, &format!("{tag}: recall"));
            }
            assert_eq!(ra.true_positives, rb.true_positives, "{tag}: tp");
            assert_eq!(ra.false_positives, rb.false_positives, "{tag}: fp");
            assert_eq!(ra.false_negatives, rb.false_negatives, "{tag}: fn");
            assert_eq!(ra.id_switches, rb.id_switches, "{tag}: ids");
            close(ra.mota, rb.mota, &format!("{tag}: mota"));
            close(ra.position_error, rb.position_error, &format!("{tag}: motp"));
            close(ra.velocity_error, rb.velocity_error, &format!("{tag}: tve"));
        }
    }
}

/// Deterministic small tracking instance for equivalence testing: up to 5
/// ground-truth tracks over up to 10 frames, with noisy, occasionally
/// dropped or identity-switched predictions plus spurious clutter, and
/// scores quantized enough to produce threshold ties.
pub fn random_instance(seed: u64) -> (Vec<TrackRecord>, Vec<TrackRecord>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let num_frames = rng.random_range(2..=10usize);
    let num_tracks = rng.random_range(1..=5usize);
    let mut gt = Vec::new();
    let mut preds = Vec::new();
    let mut next_pred_id = 100u64;
    for tid in 0..num_tracks as u64 {
        let class = rng.random_range(0..3usize);
        let x0 = rng.random_range(-15.0..15.0);
        let y0 = rng.random_range(-15.0..15.0);
        let vx = rng.random_range(-2.0..2.0);
        let vy = rng.random_range(-2.0..2.0);
        let birth = rng.random_range(0..num_frames.div_ceil(2));
        let death = rng.random_range((birth + 1)..=num_frames);
        let tracked = rng.random_bool(0.85);
        let mut pred_id = next_pred_id;
        next_pred_id += 1;
        let switch_at = if tracked && death - birth > 2 && rng.random_bool(0.3) {
            Some(rng.random_range((birth + 1)..death))
        } else {
            None
        };
        let base_score = rng.random_range(0.3..1.0f64);
        for frame in birth..death {
            let t = (frame - birth) as f64 * 0.5;
            let (x, y) = (x0 + vx * t, y0 + vy * t);
            gt.push(TrackRecord {
                frame,
                track_id: tid + 1,
                class,
                center: [x, y, 0.8],
                size: [1.9, 4.5, 1.6],
                velocity: [vx, vy],
                yaw_sin: 0.0,
                yaw_cos: 1.0,
                score: 1.0,
                coasted: false,
            });
            if !tracked || rng.random_bool(0.15) {
                continue;
            }
            if switch_at == Some(frame) {
                pred_id = next_pred_id;
                next_pred_id += 1;
            }
            let noise = rng.random_range(0.0..2.5f64);
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            // Quantized scores create duplicate thresholds on purpose.
            let score = ((base_score + rng.random_range(-0.2..0.2)).clamp(0.05, 1.0) * 10.0)
                .round()
                / 10.0;
            preds.push(TrackRecord {
                frame,
                track_id: pred_id,
                class,
                center: [x + noise * angle.cos(), y + noise * angle.sin(), 0.8],
                size: [1.9, 4.5, 1.6],
                velocity: [vx + rng.random_range(-0.5..0.5), vy + rng.random_range(-0.5..0.5)],
                yaw_sin: 0.0,
                yaw_cos: 1.0,
                score: score.max(0.05),
                coasted: false,
            });
        }
    }
    // Clutter: short-lived tracks unrelated to any ground truth.
    for _ in 0..rng.random_range(0..4usize) {
        let class = rng.random_range(0..3usize);
        let frame = rng.random_range(0..num_frames);
        let span = rng.random_range(1..=2usize).min(num_frames - frame);
        let pid = next_pred_id;
        next_pred_id += 1;
        let x = rng.random_range(-18.0..18.0);
        let y = rng.random_range(-18.0..18.0);
        for df in 0..span {
            preds.push(TrackRecord {
                frame: frame + df,
                track_id: pid,
                class,
                center: [x, y, 0.8],
                size: [1.0, 1.0, 1.0],
                velocity: [0.0, 0.0],
                yaw_sin: 0.0,
                yaw_cos: 1.0,
                score: (rng.random_range(0.05..0.9f64) * 10.0).round() / 10.0,
                coasted: false,
            });
        }
    }
    (gt, preds)
}
