//! Frame-level segmentation metrics: MoF, MoF without background, and the
//! per-segment overlap ratios IoU and IoD.
//!
//! MoF pools correct frames over the whole corpus. IoU and IoD are computed
//! per ground-truth segment — with `correct` being the segment's frames that
//! carry the segment's label in the prediction — and averaged over all
//! segments of all videos.

use std::collections::HashSet;

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("video '{video_id}': ground truth has {gt} frames, prediction {pred}")]
    LengthMismatch {
        video_id: String,
        gt: usize,
        pred: usize,
    },
    #[error("empty corpus")]
    EmptyCorpus,
}

/// Ground-truth and predicted frame labels for one video.
#[derive(Debug, Clone)]
pub struct LabeledVideo {
    pub video_id: String,
    pub gt: Vec<usize>,
    pub pred: Vec<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PerVideoReport {
    pub video_id: String,
    pub mof: f64,
    pub n_frames: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub mof: f64,
    /// Absent when every frame is background.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mof_bg: Option<f64>,
    pub iou: f64,
    pub iod: f64,
    pub per_video: Vec<PerVideoReport>,
}

/// Runs of identical labels as (label, start, len).
fn segments_of(labels: &[usize]) -> Vec<(usize, usize, usize)> {
    let mut out: Vec<(usize, usize, usize)> = Vec::new();
    for (t, &a) in labels.iter().enumerate() {
        match out.last_mut() {
            Some((label, _, len)) if *label == a => *len += 1,
            _ => out.push((a, t, 1)),
        }
    }
    out
}

/// All four metrics over a labeled corpus. `background` marks the ground
/// truth labels excluded from MoF-BG.
pub fn metrics(
    corpus: &[LabeledVideo],
    background: &HashSet<usize>,
) -> Result<MetricsReport, EvalError> {
    if corpus.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let mut frames_total = 0usize;
    let mut frames_correct = 0usize;
    let mut fg_total = 0usize;
    let mut fg_correct = 0usize;
    let mut iou_sum = 0.0f64;
    let mut iod_sum = 0.0f64;
    let mut n_segments = 0usize;
    let mut per_video = Vec::with_capacity(corpus.len());

    for video in corpus {
        if video.gt.len() != video.pred.len() {
            return Err(EvalError::LengthMismatch {
                video_id: video.video_id.clone(),
                gt: video.gt.len(),
                pred: video.pred.len(),
            });
        }
        let mut video_correct = 0usize;
        for (&g, &p) in video.gt.iter().zip(&video.pred) {
            let hit = g == p;
            frames_total += 1;
            video_correct += hit as usize;
            if !background.contains(&g) {
                fg_total += 1;
                fg_correct += hit as usize;
            }
        }
        frames_correct += video_correct;
        per_video.push(PerVideoReport {
            video_id: video.video_id.clone(),
            mof: video_correct as f64 / video.gt.len() as f64,
            n_frames: video.gt.len(),
        });

        for (label, start, len) in segments_of(&video.gt) {
            // correct = frames of this segment predicted with its label.
            let correct = video.pred[start..start + len]
                .iter()
                .filter(|&&p| p == label)
                .count();
            let gt_len = len;
            let union = gt_len; // correct is a subset of the segment's frames
            iou_sum += correct as f64 / union as f64;
            iod_sum += correct as f64 / gt_len as f64;
            n_segments += 1;
        }
    }

    Ok(MetricsReport {
        mof: frames_correct as f64 / frames_total as f64,
        mof_bg: if fg_total > 0 {
            Some(fg_correct as f64 / fg_total as f64)
        } else {
            None
        },
        iou: iou_sum / n_segments as f64,
        iod: iod_sum / n_segments as f64,
        per_video,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn video(gt: Vec<usize>, pred: Vec<usize>) -> LabeledVideo {
        LabeledVideo {
            video_id: "v".into(),
            gt,
            pred,
        }
    }

    #[test]
    fn perfect_prediction_scores_one_everywhere() {
        let corpus = vec![video(vec![0, 0, 1, 2, 2], vec![0, 0, 1, 2, 2])];
        let r = metrics(&corpus, &HashSet::new()).unwrap();
        assert_eq!(r.mof, 1.0);
        assert_eq!(r.mof_bg, Some(1.0));
        assert_eq!(r.iou, 1.0);
        assert_eq!(r.iod, 1.0);
    }

    #[test]
    fn worked_example_two_segments() {
        // gt = [A, A, B, B], pred = [A, B, B, B].
        let corpus = vec![video(vec![0, 0, 1, 1], vec![0, 1, 1, 1])];
        let r = metrics(&corpus, &HashSet::new()).unwrap();
        assert!((r.mof - 0.75).abs() < 1e-12);
        // Segment A: correct 1 of 2 -> 1/2. Segment B: correct 2 of 2 -> 1.
        assert!((r.iou - 0.75).abs() < 1e-12);
        assert!((r.iod - 0.75).abs() < 1e-12);
    }

    #[test]
    fn worked_example_background_exclusion() {
        // gt = [BG, A], pred = [A, A], background = {BG}.
        let corpus = vec![video(vec![9, 0], vec![0, 0])];
        let bg: HashSet<usize> = [9].into_iter().collect();
        let r = metrics(&corpus, &bg).unwrap();
        assert!((r.mof - 0.5).abs() < 1e-12);
        assert_eq!(r.mof_bg, Some(1.0));
    }

    #[test]
    fn all_background_reports_absent_mof_bg() {
        let corpus = vec![video(vec![9, 9], vec![9, 0])];
        let bg: HashSet<usize> = [9].into_iter().collect();
        let r = metrics(&corpus, &bg).unwrap();
        assert_eq!(r.mof_bg, None);
        let json = serde_json::to_value(&r).unwrap();
        assert!(json.get("mof_bg").is_none());
    }

    #[test]
    fn disjoint_labels_score_zero_mof() {
        let corpus = vec![video(vec![0, 0, 0], vec![1, 1, 1])];
        let r = metrics(&corpus, &HashSet::new()).unwrap();
        assert_eq!(r.mof, 0.0);
        assert_eq!(r.iou, 0.0);
        assert_eq!(r.iod, 0.0);
    }

    #[test]
    fn length_mismatch_is_a_validation_error() {
        let corpus = vec![video(vec![0, 0], vec![0])];
        assert!(matches!(
            metrics(&corpus, &HashSet::new()),
            Err(EvalError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn mof_invariant_to_video_order() {
        let a = video(vec![0, 0, 1], vec![0, 1, 1]);
        let b = video(vec![2, 2], vec![2, 0]);
        let r1 = metrics(&[a.clone(), b.clone()], &HashSet::new()).unwrap();
        let r2 = metrics(&[b, a], &HashSet::new()).unwrap();
        assert_eq!(r1.mof, r2.mof);
    }

    #[test]
    fn iod_never_below_iou_on_random_pairs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        for _ in 0..1000 {
            let t = rng.random_range(1..=30);
            let a = rng.random_range(1..=4);
            let gt: Vec<usize> = (0..t).map(|_| rng.random_range(0..a)).collect();
            let pred: Vec<usize> = (0..t).map(|_| rng.random_range(0..a)).collect();
            let r = metrics(&[video(gt, pred)], &HashSet::new()).unwrap();
            assert!(r.iod >= r.iou - 1e-12);
            for m in [r.mof, r.iou, r.iod] {
                assert!((0.0..=1.0).contains(&m));
            }
        }
    }
}
