//! Brute-force reference implementations used by the test suites.
//!
//! Everything here recomputes results by exhaustive enumeration or direct
//! definition, deliberately sharing no code with the DP and NMS paths it
//! verifies. Only practical for tiny instances.

use crate::decode::{
    duration_logpmf, DecodeError, Grammar, LengthModel, ScoreMatrix, Segmentation, Transcript,
};
use crate::hoi::{iou, HoiDetection};
use crate::tensor::logsumexp_slice;

/// All compositions of `total` into `parts` positive integers, each at most
/// `l_max` (0 = uncapped).
pub fn compositions(total: usize, parts: usize, l_max: usize) -> Vec<Vec<usize>> {
    let cap = if l_max == 0 { total } else { l_max };
    let mut out = Vec::new();
    let mut current = Vec::with_capacity(parts);
    fn rec(
        remaining: usize,
        parts_left: usize,
        cap: usize,
        current: &mut Vec<usize>,
        out: &mut Vec<Vec<usize>>,
    ) {
        if parts_left == 0 {
            if remaining == 0 {
                out.push(current.clone());
            }
            return;
        }
        let max_l = cap.min(remaining.saturating_sub(parts_left - 1));
        for l in 1..=max_l {
            current.push(l);
            rec(remaining - l, parts_left - 1, cap, current, out);
            current.pop();
        }
    }
    rec(total, parts, cap, &mut current, &mut out);
    out
}

/// Path score by direct per-frame summation.
fn path_score(s: &ScoreMatrix, tr: &Transcript, lengths: &[usize], lm: &LengthModel) -> f64 {
    let mut score = 0.0;
    let mut t = 0usize;
    for (&a, &l) in tr.0.iter().zip(lengths) {
        for _ in 0..l {
            score += s.at(t, a);
            t += 1;
        }
        score += duration_logpmf(l, a, lm).expect("positive length");
    }
    score
}

/// True when `cand` beats `best` under the declared tie-break: higher score
/// wins; on exact ties the reversed length vector (last segment first) that
/// compares lexicographically smaller wins.
fn beats(cand_score: f64, cand: &[usize], best_score: f64, best: &[usize]) -> bool {
    if cand_score > best_score {
        return true;
    }
    if cand_score < best_score {
        return false;
    }
    cand.iter().rev().lt(best.iter().rev())
}

pub fn brute_force_align(
    s: &ScoreMatrix,
    tr: &Transcript,
    lm: &LengthModel,
    l_max: usize,
) -> Result<(Segmentation, f64), DecodeError> {
    let mut best: Option<(Vec<usize>, f64)> = None;
    for lengths in compositions(s.n_frames, tr.len(), l_max) {
        let score = path_score(s, tr, &lengths, lm);
        match &best {
            Some((bl, bs)) if !beats(score, &lengths, *bs, bl) => {}
            _ => best = Some((lengths, score)),
        }
    }
    let (lengths, score) = best.ok_or(DecodeError::Infeasible {
        segments: tr.len(),
        frames: s.n_frames,
    })?;
    let segments = tr.0.iter().cloned().zip(lengths).collect();
    Ok((Segmentation { segments }, score))
}

pub fn brute_force_segment(
    s: &ScoreMatrix,
    g: &Grammar,
    lm: &LengthModel,
    l_max: usize,
) -> Result<(Transcript, Segmentation, f64), DecodeError> {
    let mut best: Option<(Transcript, Segmentation, f64)> = None;
    for (tr, &lp) in g.transcripts.iter().zip(&g.log_priors) {
        let Ok((seg, sc)) = brute_force_align(s, tr, lm, l_max) else {
            continue;
        };
        let total = sc + lp;
        if best.as_ref().map_or(true, |(_, _, b)| total > *b) {
            best = Some((tr.clone(), seg, total));
        }
    }
    best.ok_or(DecodeError::NoFeasibleTranscript)
}

pub fn brute_force_log_partition(
    s: &ScoreMatrix,
    tr: &Transcript,
    lm: &LengthModel,
    l_max: usize,
) -> Result<f64, DecodeError> {
    let scores: Vec<f64> = compositions(s.n_frames, tr.len(), l_max)
        .iter()
        .map(|lengths| path_score(s, tr, lengths, lm))
        .collect();
    if scores.is_empty() {
        return Err(DecodeError::Infeasible {
            segments: tr.len(),
            frames: s.n_frames,
        });
    }
    Ok(logsumexp_slice(&scores))
}

pub fn brute_force_grammar_partition(
    s: &ScoreMatrix,
    g: &Grammar,
    lm: &LengthModel,
    l_max: usize,
) -> Result<f64, DecodeError> {
    let mut terms = Vec::new();
    for (tr, &lp) in g.transcripts.iter().zip(&g.log_priors) {
        if let Ok(z) = brute_force_log_partition(s, tr, lm, l_max) {
            terms.push(lp + z);
        }
    }
    if terms.is_empty() {
        return Err(DecodeError::NoFeasibleTranscript);
    }
    Ok(logsumexp_slice(&terms))
}

/// Random transcript without adjacent repeats (consecutive identical actions
/// would merge into one segment and make distinct compositions score-tied).
pub fn random_transcript(rng: &mut impl rand::Rng, n_actions: usize, max_o: usize) -> Transcript {
    let o = rng.random_range(1..=max_o.max(1));
    let mut actions = Vec::with_capacity(o);
    for _ in 0..o {
        loop {
            let a = rng.random_range(0..n_actions);
            if actions.last() != Some(&a) || n_actions == 1 {
                actions.push(a);
                break;
            }
        }
    }
    Transcript(actions)
}

/// Reference greedy NMS written as repeated selection over the remaining
/// pool, rather than a sort-then-sweep.
pub fn reference_nms(
    dets: &[HoiDetection],
    iou_thresh: f64,
    time_gap: u32,
    k: usize,
) -> Vec<HoiDetection> {
    let mut pool: Vec<usize> = (0..dets.len()).collect();
    let mut kept: Vec<usize> = Vec::new();
    while kept.len() < k && !pool.is_empty() {
        // Highest score; ties to the earlier timestamp, then input order.
        let mut best = pool[0];
        for &i in &pool[1..] {
            let better = dets[i].score > dets[best].score
                || (dets[i].score == dets[best].score
                    && (dets[i].t < dets[best].t
                        || (dets[i].t == dets[best].t && i < best)));
            if better {
                best = i;
            }
        }
        kept.push(best);
        pool.retain(|&j| {
            if j == best {
                return false;
            }
            let close = dets[best].t.abs_diff(dets[j].t) < time_gap;
            let redundant = iou(&dets[best].obj_box, &dets[j].obj_box) > iou_thresh;
            !(close && redundant)
        });
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
    kept.into_iter().map(|i| dets[i].clone()).collect()
}
