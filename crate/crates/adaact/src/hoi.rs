//! Hand-object interaction detections: file ingestion, IoU, and the
//! temporally constrained NMS that picks the top-K representative
//! interactions of a video.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HoiError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: {msg}")]
    Validation { line: usize, msg: String },
    #[error("line {line}: embedding length {got}, header declares {expected}")]
    EmbeddingLength {
        line: usize,
        expected: usize,
        got: usize,
    },
    #[error("missing header line")]
    MissingHeader,
    #[error("unsupported detection file version {0}")]
    BadVersion(u32),
}

/// Axis-aligned box as `[x1, y1, x2, y2]` with `x1 < x2`, `y1 < y2`.
pub type BBox = [f64; 4];

fn box_area(b: &BBox) -> f64 {
    (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0)
}

fn box_valid(b: &BBox) -> bool {
    b[0] < b[2] && b[1] < b[3] && b.iter().all(|v| v.is_finite())
}

/// Intersection over union of two boxes, in [0, 1].
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let x1 = a[0].max(b[0]);
    let y1 = a[1].max(b[1]);
    let x2 = a[2].min(b[2]);
    let y2 = a[3].min(b[3]);
    if x2 <= x1 || y2 <= y1 {
        return 0.0;
    }
    let inter = (x2 - x1) * (y2 - y1);
    let union = box_area(a) + box_area(b) - inter;
    inter / union
}

/// One detected hand-object interaction with its crop embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoiDetection {
    pub t: u32,
    pub hand_box: BBox,
    pub obj_box: BBox,
    pub score: f64,
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DetectionHeader {
    version: u32,
    embedding_dim: usize,
    video_id: String,
}

/// A parsed detection file: header fields plus detections in file order.
#[derive(Debug, Clone)]
pub struct DetectionFile {
    pub video_id: String,
    pub embedding_dim: usize,
    pub detections: Vec<HoiDetection>,
}

fn validate_detection(d: &HoiDetection, dim: usize, line: usize) -> Result<(), HoiError> {
    if !(0.0..=1.0).contains(&d.score) {
        return Err(HoiError::Validation {
            line,
            msg: format!("score {} outside [0, 1]", d.score),
        });
    }
    if !box_valid(&d.hand_box) || !box_valid(&d.obj_box) {
        return Err(HoiError::Validation {
            line,
            msg: "box must satisfy x1 < x2 and y1 < y2".into(),
        });
    }
    if d.embedding.len() != dim {
        return Err(HoiError::EmbeddingLength {
            line,
            expected: dim,
            got: d.embedding.len(),
        });
    }
    Ok(())
}

/// Reads a JSON-lines detection file: a header object on line 1, one
/// detection object per following line.
pub fn load_detections(path: &Path) -> Result<DetectionFile, HoiError> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines().enumerate();

    let header: DetectionHeader = match lines.next() {
        Some((_, line)) => {
            let line = line?;
            serde_json::from_str(&line).map_err(|e| HoiError::Parse {
                line: 1,
                msg: e.to_string(),
            })?
        }
        None => return Err(HoiError::MissingHeader),
    };
    if header.version != 1 {
        return Err(HoiError::BadVersion(header.version));
    }

    let mut detections = Vec::new();
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let det: HoiDetection = serde_json::from_str(&line).map_err(|e| HoiError::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        validate_detection(&det, header.embedding_dim, lineno)?;
        detections.push(det);
    }
    Ok(DetectionFile {
        video_id: header.video_id,
        embedding_dim: header.embedding_dim,
        detections,
    })
}

/// Writes the JSON-lines detection format read by [`load_detections`].
pub fn save_detections(path: &Path, file: &DetectionFile) -> Result<(), HoiError> {
    let mut out = std::io::BufWriter::new(File::create(path)?);
    let header = DetectionHeader {
        version: 1,
        embedding_dim: file.embedding_dim,
        video_id: file.video_id.clone(),
    };
    writeln!(out, "{}", serde_json::to_string(&header).expect("header json"))?;
    for d in &file.detections {
        writeln!(out, "{}", serde_json::to_string(d).expect("detection json"))?;
    }
    Ok(())
}

/// The top-K time-ordered interactions surviving video-NMS.
#[derive(Debug, Clone, PartialEq)]
pub struct HoiSelection {
    pub items: Vec<HoiDetection>,
}

impl HoiSelection {
    pub fn empty() -> Self {
        Self { items: Vec::new() }
    }
}

/// Keeps detections at or above the detection threshold, preserving order.
pub fn filter_by_score(dets: &[HoiDetection], threshold: f64) -> Vec<HoiDetection> {
    dets.iter()
        .filter(|d| d.score >= threshold)
        .cloned()
        .collect()
}

/// Greedy video-NMS. Repeatedly keeps the highest-score remaining detection
/// (ties: earlier timestamp, then input order) and suppresses every remaining
/// detection that is BOTH spatially redundant (object-box IoU above
/// `iou_thresh`) AND temporally close (|dt| below `time_gap` frames). Stops
/// after `k` keeps; the kept items are returned in timestamp order with ties
/// broken by descending score.
pub fn video_nms(
    dets: &[HoiDetection],
    iou_thresh: f64,
    time_gap: u32,
    k: usize,
) -> HoiSelection {
    debug_assert!(iou_thresh > 0.0 && iou_thresh < 1.0);
    debug_assert!(k >= 1);
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(dets[a].t.cmp(&dets[b].t))
            .then(a.cmp(&b))
    });

    let mut suppressed = vec![false; dets.len()];
    let mut kept: Vec<usize> = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        kept.push(i);
        if kept.len() == k {
            break;
        }
        for &j in &order[pos + 1..] {
            if suppressed[j] {
                continue;
            }
            let dt = dets[i].t.abs_diff(dets[j].t);
            if iou(&dets[i].obj_box, &dets[j].obj_box) > iou_thresh && dt < time_gap {
                suppressed[j] = true;
            }
        }
    }

    kept.sort_by(|&a, &b| {
        dets[a]
            .t
            .cmp(&dets[b].t)
            .then(
                dets[b]
                    .score
                    .partial_cmp(&dets[a].score)
                    .unwrap_or(std::cmp::Ordering::Equal),
            )
            .then(a.cmp(&b))
    });
    HoiSelection {
        items: kept.into_iter().map(|i| dets[i].clone()).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(t: u32, obj: BBox, score: f64) -> HoiDetection {
        HoiDetection {
            t,
            hand_box: [0.0, 0.0, 0.1, 0.1],
            obj_box: obj,
            score,
            embedding: vec![0.0; 4],
        }
    }

    #[test]
    fn iou_identical_and_disjoint() {
        let a = [0.0, 0.0, 1.0, 1.0];
        assert_eq!(iou(&a, &a), 1.0);
        let b = [2.0, 2.0, 3.0, 3.0];
        assert_eq!(iou(&a, &b), 0.0);
    }

    #[test]
    fn iou_partial_overlap() {
        let a = [0.0, 0.0, 2.0, 2.0];
        let b = [1.0, 0.0, 3.0, 2.0];
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn nms_single_detection_kept() {
        let d = det(3, [0.0, 0.0, 1.0, 1.0], 0.8);
        let sel = video_nms(&[d.clone()], 0.5, 30, 10);
        assert_eq!(sel.items, vec![d]);
    }

    #[test]
    fn nms_exact_duplicate_suppressed() {
        let a = det(5, [0.0, 0.0, 1.0, 1.0], 0.9);
        let b = det(5, [0.0, 0.0, 1.0, 1.0], 0.8);
        let sel = video_nms(&[a.clone(), b], 0.5, 30, 10);
        assert_eq!(sel.items, vec![a]);
    }

    #[test]
    fn nms_temporal_constraint_releases_suppression() {
        let a = det(5, [0.0, 0.0, 1.0, 1.0], 0.9);
        let b = det(500, [0.0, 0.0, 1.0, 1.0], 0.8);
        let sel = video_nms(&[a.clone(), b.clone()], 0.5, 30, 10);
        assert_eq!(sel.items, vec![a, b]);
    }

    #[test]
    fn nms_keeps_at_most_k_in_time_order() {
        let dets: Vec<_> = (0..6)
            .map(|i| {
                det(
                    (5 - i) * 100,
                    [i as f64, 0.0, i as f64 + 1.0, 1.0],
                    0.5 + 0.05 * i as f64,
                )
            })
            .collect();
        let sel = video_nms(&dets, 0.5, 30, 3);
        assert_eq!(sel.items.len(), 3);
        for w in sel.items.windows(2) {
            assert!(w[0].t <= w[1].t);
        }
    }

    #[test]
    fn detection_file_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.jsonl");

        let file = DetectionFile {
            video_id: "v".into(),
            embedding_dim: 4,
            detections: vec![det(7, [0.1, 0.1, 0.4, 0.5], 0.75)],
        };
        save_detections(&path, &file).unwrap();
        let loaded = load_detections(&path).unwrap();
        assert_eq!(loaded.video_id, "v");
        assert_eq!(loaded.embedding_dim, 4);
        assert_eq!(loaded.detections, file.detections);

        // Header only -> empty detections.
        let empty = dir.path().join("empty.jsonl");
        std::fs::write(
            &empty,
            "{\"version\":1,\"embedding_dim\":4,\"video_id\":\"e\"}\n",
        )
        .unwrap();
        assert!(load_detections(&empty).unwrap().detections.is_empty());

        // Score out of range is a validation error.
        let bad = dir.path().join("bad.jsonl");
        let mut f = std::fs::File::create(&bad).unwrap();
        writeln!(f, "{{\"version\":1,\"embedding_dim\":4,\"video_id\":\"b\"}}").unwrap();
        writeln!(
            f,
            "{{\"t\":1,\"hand_box\":[0,0,1,1],\"obj_box\":[0,0,1,1],\"score\":1.3,\"embedding\":[0,0,0,0]}}"
        )
        .unwrap();
        match load_detections(&bad) {
            Err(HoiError::Validation { line: 2, .. }) => {}
            other => panic!("expected validation error on line 2, got {other:?}"),
        }

        // Malformed JSON reports its line number.
        let mangled = dir.path().join("mangled.jsonl");
        let mut f = std::fs::File::create(&mangled).unwrap();
        writeln!(f, "{{\"version\":1,\"embedding_dim\":4,\"video_id\":\"m\"}}").unwrap();
        writeln!(f, "not json").unwrap();
        match load_detections(&mangled) {
            Err(HoiError::Parse { line: 2, .. }) => {}
            other => panic!("expected parse error on line 2, got {other:?}"),
        }

        // Embedding length must match the header.
        let short = dir.path().join("short.jsonl");
        let mut f = std::fs::File::create(&short).unwrap();
        writeln!(f, "{{\"version\":1,\"embedding_dim\":4,\"video_id\":\"s\"}}").unwrap();
        writeln!(
            f,
            "{{\"t\":1,\"hand_box\":[0,0,1,1],\"obj_box\":[0,0,1,1],\"score\":0.9,\"embedding\":[0,0]}}"
        )
        .unwrap();
        match load_detections(&short) {
            Err(HoiError::EmbeddingLength {
                line: 2,
                expected: 4,
                got: 2,
            }) => {}
            other => panic!("expected embedding length error, got {other:?}"),
        }
    }
}
