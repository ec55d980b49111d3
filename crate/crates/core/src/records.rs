//! JSON-lines track records: one object per line, one line per
//! (frame, track) pair.
//!
//! Ground-truth files carry {frame, track_id, class, center, size, velocity,
//! yaw_sin, yaw_cos}; tracker and baseline outputs add score and a coasted
//! flag. The reader accepts both, defaulting score to 1.0 and coasted to
//! false, so ground truth can be fed anywhere detections or predictions are
//! expected.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Box3D;

fn default_score() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackRecord {
    pub frame: usize,
    pub track_id: u64,
    pub class: usize,
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub velocity: [f64; 2],
    pub yaw_sin: f64,
    pub yaw_cos: f64,
    #[serde(default = "default_score")]
    pub score: f64,
    #[serde(default)]
    pub coasted: bool,
}

/// Ground-truth serialization view: the record without score/coasted.
#[derive(Serialize)]
struct GtLine<'a> {
    frame: usize,
    track_id: u64,
    class: usize,
    center: &'a [f64; 3],
    size: &'a [f64; 3],
    velocity: &'a [f64; 2],
    yaw_sin: f64,
    yaw_cos: f64,
}

impl TrackRecord {
    pub fn from_box(frame: usize, track_id: u64, b: &Box3D, coasted: bool) -> TrackRecord {
        TrackRecord {
            frame,
            track_id,
            class: b.class_id,
            center: [b.center.x, b.center.y, b.center.z],
            size: [b.size.x, b.size.y, b.size.z],
            velocity: [b.velocity.x, b.velocity.y],
            yaw_sin: b.yaw_sin,
            yaw_cos: b.yaw_cos,
            score: b.score,
            coasted,
        }
    }

    pub fn to_box(&self) -> Box3D {
        Box3D {
            center: Vector3::new(self.center[0], self.center[1], self.center[2]),
            size: Vector3::new(self.size[0], self.size[1], self.size[2]),
            velocity: Vector2::new(self.velocity[0], self.velocity[1]),
            yaw_sin: self.yaw_sin,
            yaw_cos: self.yaw_cos,
            class_id: self.class,
            score: self.score,
        }
    }

    /// The first schema violation, if any.
    fn flaw(&self) -> Option<String> {
        if self.size.iter().any(|&s| !(s > 0.0)) {
            return Some(format!("non-positive size {:?}", self.size));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Some(format!("score {} outside [0, 1]", self.score));
        }
        let n = self.yaw_sin * self.yaw_sin + self.yaw_cos * self.yaw_cos;
        if (n - 1.0).abs() > 1e-6 {
            return Some(format!(
                "yaw pair ({}, {}) not unit norm",
                self.yaw_sin, self.yaw_cos
            ));
        }
        let finite = self.center.iter().chain(&self.size).chain(&self.velocity);
        if finite.clone().any(|v| !v.is_finite()) {
            return Some("non-finite field".into());
        }
        None
    }

    /// True when every field satisfies the record schema (finite values,
    /// positive sizes, unit yaw pair, score in [0, 1]).
    pub fn is_well_formed(&self) -> bool {
        self.flaw().is_none()
    }

    fn validate(&self, path: &Path, line: usize) -> Result<()> {
        match self.flaw() {
            None => Ok(()),
            Some(reason) => Err(Error::Records { path: path.to_path_buf(), line, reason }),
        }
    }
}

/// Reads and validates a JSON-lines record file; blank lines are skipped.
pub fn read_records(path: &Path) -> Result<Vec<TrackRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: TrackRecord = serde_json::from_str(&line).map_err(|e| Error::Records {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        record.validate(path, i + 1)?;
        out.push(record);
    }
    Ok(out)
}

/// Writes full tracker-schema records (score and coasted included).
pub fn write_track_records(path: &Path, records: &[TrackRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes ground-truth-schema records (no score, no coasted).
pub fn write_gt_records(path: &Path, records: &[TrackRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = GtLine {
            frame: r.frame,
            track_id: r.track_id,
            class: r.class,
            center: &r.center,
            size: &r.size,
            velocity: &r.velocity,
            yaw_sin: r.yaw_sin,
            yaw_cos: r.yaw_cos,
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn sample() -> TrackRecord {
        TrackRecord {
            frame: 3,
            track_id: 17,
            class: 1,
            center: [1.0, -2.0, 0.8],
            size: [1.9, 4.5, 1.6],
            velocity: [2.0, 0.0],
            yaw_sin: 0.0,
            yaw_cos: 1.0,
            score: 0.75,
            coasted: false,
        }
    }

    #[test]
    fn track_round_trip_preserves_all_fields() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("tracks.jsonl");
        let records = vec![sample(), TrackRecord { frame: 4, coasted: true, ..sample() }];
        write_track_records(&path, &records).unwrap();
        assert_eq!(read_records(&path).unwrap(), records);
    }

    #[test]
    fn gt_records_omit_score_and_default_on_read() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("gt.jsonl");
        write_gt_records(&path, &[sample()]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(!text.contains("score"));
        assert!(!text.contains("coasted"));
        let back = read_records(&path).unwrap();
        assert_eq!(back[0].score, 1.0);
        assert!(!back[0].coasted);
    }

    #[test]
    fn malformed_line_reports_path_and_line() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(&path, "{\"frame\": 0}\n").unwrap();
        let err = read_records(&path).unwrap_err().to_string();
        assert!(err.contains("bad.jsonl") && err.contains("line 1"), "{err}");
    }

    #[test]
    fn invalid_fields_are_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let mut rec = sample();
        rec.size = [0.0, 1.0, 1.0];
        let json = serde_json::to_string(&rec).unwrap();
        std::fs::write(&path, format!("{json}\n")).unwrap();
        assert!(read_records(&path).is_err());

        let mut rec = sample();
        rec.yaw_sin = 0.5;
        rec.yaw_cos = 0.5;
        let json = serde_json::to_string(&rec).unwrap();
        std::fs::write(&path, format!("{json}\n")).unwrap();
        assert!(read_records(&path).is_err());
    }

    #[test]
    fn box_conversion_round_trips() {
        let rec = sample();
        let b = rec.to_box();
        let back = TrackRecord::from_box(rec.frame, rec.track_id, &b, rec.coasted);
        assert_eq!(rec, back);
    }
}
