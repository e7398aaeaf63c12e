//! Duration-constrained dynamic programming over frame scores.
//!
//! All decoding works on a `T x A` matrix of log scores. A path assigns each
//! transcript segment a positive length so that lengths sum to T; its score is
//! the sum of per-frame scores under the segment's action plus a Poisson
//! duration term per segment. `align` maximizes over paths for a fixed
//! transcript, `segment` additionally maximizes over a grammar, and the
//! `log_partition` variants replace max with log-sum-exp to produce the
//! quantities (and occupancy gradients) the discriminative loss needs.
//!
//! Everything here is plain f64; gradients re-enter the tape through
//! `Tape::inject_scalar`.

use thiserror::Error;

/// Scores below this are clamped so prefix-sum differences stay finite even
/// when callers pass -inf for "impossible".
const SCORE_FLOOR: f64 = -1e280;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DecodeError {
    #[error("transcript of {segments} segments cannot cover {frames} frames")]
    Infeasible { segments: usize, frames: usize },
    #[error("no feasible transcript in the grammar")]
    NoFeasibleTranscript,
    #[error("grammar is empty")]
    EmptyGrammar,
    #[error("segment length must be at least 1")]
    ZeroLength,
    #[error("action id {id} out of range for {n_actions} actions")]
    BadAction { id: usize, n_actions: usize },
    #[error("score matrix data length {got} does not match {frames}x{actions}")]
    BadScoreDims {
        frames: usize,
        actions: usize,
        got: usize,
    },
    #[error("empty corpus")]
    EmptyCorpus,
}

/// Row-major `T x A` matrix of per-frame log scores.
#[derive(Debug, Clone)]
pub struct ScoreMatrix {
    pub n_frames: usize,
    pub n_actions: usize,
    pub data: Vec<f64>,
}

impl ScoreMatrix {
    pub fn new(n_frames: usize, n_actions: usize, data: Vec<f64>) -> Result<Self, DecodeError> {
        if data.len() != n_frames * n_actions {
            return Err(DecodeError::BadScoreDims {
                frames: n_frames,
                actions: n_actions,
                got: data.len(),
            });
        }
        Ok(Self {
            n_frames,
            n_actions,
            data,
        })
    }

    #[inline]
    pub fn at(&self, t: usize, a: usize) -> f64 {
        self.data[t * self.n_actions + a]
    }
}

/// Ordered list of action ids occurring in a video.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Transcript(pub Vec<usize>);

impl Transcript {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Per-action Poisson mean durations, in frames.
#[derive(Debug, Clone)]
pub struct LengthModel {
    pub lambda: Vec<f64>,
}

impl LengthModel {
    pub fn new(lambda: Vec<f64>) -> Self {
        debug_assert!(lambda.iter().all(|&l| l > 0.0));
        Self { lambda }
    }

    pub fn uniform(n_actions: usize, mean_len: f64) -> Self {
        Self::new(vec![mean_len.max(1.0); n_actions])
    }
}

/// A finite set of admissible transcripts with log prior mass each.
#[derive(Debug, Clone)]
pub struct Grammar {
    pub transcripts: Vec<Transcript>,
    pub log_priors: Vec<f64>,
}

impl Grammar {
    /// Uniform prior over the given transcripts, preserving insertion order.
    pub fn uniform(transcripts: Vec<Transcript>) -> Result<Self, DecodeError> {
        if transcripts.is_empty() {
            return Err(DecodeError::EmptyGrammar);
        }
        let lp = -(transcripts.len() as f64).ln();
        let log_priors = vec![lp; transcripts.len()];
        Ok(Self {
            transcripts,
            log_priors,
        })
    }

    pub fn len(&self) -> usize {
        self.transcripts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transcripts.is_empty()
    }
}

/// Ordered (action, length) pairs covering a video.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segmentation {
    pub segments: Vec<(usize, usize)>,
}

impl Segmentation {
    pub fn n_frames(&self) -> usize {
        self.segments.iter().map(|&(_, l)| l).sum()
    }

    pub fn transcript(&self) -> Transcript {
        Transcript(self.segments.iter().map(|&(a, _)| a).collect())
    }

    /// Expands to one label per frame.
    pub fn frame_labels(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.n_frames());
        for &(a, l) in &self.segments {
            out.extend(std::iter::repeat(a).take(l));
        }
        out
    }

    /// Collapses frame labels into run-length segments.
    pub fn from_frame_labels(labels: &[usize]) -> Self {
        let mut segments: Vec<(usize, usize)> = Vec::new();
        for &a in labels {
            match segments.last_mut() {
                Some((last, l)) if *last == a => *l += 1,
                _ => segments.push((a, 1)),
            }
        }
        Self { segments }
    }
}

/// ln(l!) as a running sum; shared by the one-off pmf and the DP tables so
/// both produce bit-identical values.
fn ln_factorial(l: usize) -> f64 {
    (2..=l).map(|k| (k as f64).ln()).sum()
}

fn ln_factorial_table(max_l: usize) -> Vec<f64> {
    let mut table = vec![0.0; max_l + 1];
    let mut acc = 0.0;
    for k in 2..=max_l {
        acc += (k as f64).ln();
        table[k] = acc;
    }
    table
}

/// log Poisson(l; lambda_a) with the log-factorial via the shared helper.
pub fn duration_logpmf(l: usize, action: usize, lm: &LengthModel) -> Result<f64, DecodeError> {
    if l == 0 {
        return Err(DecodeError::ZeroLength);
    }
    if action >= lm.lambda.len() {
        return Err(DecodeError::BadAction {
            id: action,
            n_actions: lm.lambda.len(),
        });
    }
    let lam = lm.lambda[action];
    Ok(l as f64 * lam.ln() - lam - ln_factorial(l))
}

fn effective_l_max(l_max: usize, n_frames: usize) -> usize {
    if l_max == 0 {
        n_frames
    } else {
        l_max.min(n_frames)
    }
}

fn check_transcript(s: &ScoreMatrix, tr: &Transcript, l_max: usize) -> Result<(), DecodeError> {
    let o = tr.len();
    let t = s.n_frames;
    if o == 0 || o > t || o * effective_l_max(l_max, t) < t {
        return Err(DecodeError::Infeasible {
            segments: o,
            frames: t,
        });
    }
    for &a in &tr.0 {
        if a >= s.n_actions {
            return Err(DecodeError::BadAction {
                id: a,
                n_actions: s.n_actions,
            });
        }
    }
    Ok(())
}

/// Per-action cumulative score sums with the floor applied, so that
/// `pre[a][t2] - pre[a][t1]` is the (floored) segment score over [t1, t2).
fn prefix_sums(s: &ScoreMatrix) -> Vec<Vec<f64>> {
    let (t_len, a_len) = (s.n_frames, s.n_actions);
    let mut pre = vec![vec![0.0; t_len + 1]; a_len];
    for a in 0..a_len {
        let col = &mut pre[a];
        for t in 0..t_len {
            col[t + 1] = col[t] + s.at(t, a).max(SCORE_FLOOR);
        }
    }
    pre
}

fn logpmf_table(
    tr: &Transcript,
    lm: &LengthModel,
    l_max: usize,
) -> Result<Vec<Vec<f64>>, DecodeError> {
    let lfact = ln_factorial_table(l_max);
    let mut out = Vec::with_capacity(tr.len());
    for &a in &tr.0 {
        if a >= lm.lambda.len() {
            return Err(DecodeError::BadAction {
                id: a,
                n_actions: lm.lambda.len(),
            });
        }
        let lam = lm.lambda[a];
        let ln_lam = lam.ln();
        let col: Vec<f64> = (0..=l_max)
            .map(|l| l as f64 * ln_lam - lam - lfact[l])
            .collect();
        out.push(col);
    }
    Ok(out)
}

/// Maximum-score length assignment for a fixed transcript.
///
/// Ties are resolved toward the shorter final segment at every DP state,
/// which yields the segmentation whose reversed length vector is
/// lexicographically smallest among the optima.
pub fn align(
    s: &ScoreMatrix,
    tr: &Transcript,
    lm: &LengthModel,
    l_max: usize,
) -> Result<(Segmentation, f64), DecodeError> {
    check_transcript(s, tr, l_max)?;
    let t_len = s.n_frames;
    let o_len = tr.len();
    let l_cap = effective_l_max(l_max, t_len);
    let pre = prefix_sums(s);
    let pmf = logpmf_table(tr, lm, l_cap)?;

    let mut alpha = vec![vec![f64::NEG_INFINITY; t_len + 1]; o_len + 1];
    let mut choice = vec![vec![0usize; t_len + 1]; o_len + 1];
    alpha[0][0] = 0.0;

    for o in 1..=o_len {
        let a = tr.0[o - 1];
        let col = &pre[a];
        let pmf_o = &pmf[o - 1];
        for t in o..=(t_len - (o_len - o)) {
            let mut best = f64::NEG_INFINITY;
            let mut best_l = 0usize;
            let max_l = l_cap.min(t - (o - 1));
            for l in 1..=max_l {
                let prev = alpha[o - 1][t - l];
                if prev == f64::NEG_INFINITY {
                    continue;
                }
                let sc = prev + (col[t] - col[t - l]) + pmf_o[l];
                if sc > best {
                    best = sc;
                    best_l = l;
                }
            }
            alpha[o][t] = best;
            choice[o][t] = best_l;
        }
    }

    let score = alpha[o_len][t_len];
    if score == f64::NEG_INFINITY {
        return Err(DecodeError::Infeasible {
            segments: o_len,
            frames: t_len,
        });
    }
    let mut lengths = vec![0usize; o_len];
    let mut t = t_len;
    for o in (1..=o_len).rev() {
        let l = choice[o][t];
        lengths[o - 1] = l;
        t -= l;
    }
    let segments = tr.0.iter().cloned().zip(lengths).collect();
    Ok((Segmentation { segments }, score))
}

/// Maximum-score transcript from a grammar: argmax over feasible transcripts
/// of align score plus log prior. Ties keep the earliest grammar entry.
pub fn segment(
    s: &ScoreMatrix,
    g: &Grammar,
    lm: &LengthModel,
    l_max: usize,
) -> Result<(Transcript, Segmentation, f64), DecodeError> {
    if g.is_empty() {
        return Err(DecodeError::EmptyGrammar);
    }
    let mut best: Option<(Transcript, Segmentation, f64)> = None;
    for (tr, &lp) in g.transcripts.iter().zip(&g.log_priors) {
        let Ok((seg, sc)) = align(s, tr, lm, l_max) else {
            continue;
        };
        let total = sc + lp;
        if best.as_ref().map_or(true, |(_, _, b)| total > *b) {
            best = Some((tr.clone(), seg, total));
        }
    }
    best.ok_or(DecodeError::NoFeasibleTranscript)
}

/// Streaming log-sum-exp accumulator.
#[derive(Clone, Copy)]
struct LseAcc {
    max: f64,
    sum: f64,
}

impl LseAcc {
    fn new() -> Self {
        Self {
            max: f64::NEG_INFINITY,
            sum: 0.0,
        }
    }

    #[inline]
    fn push(&mut self, v: f64) {
        if v == f64::NEG_INFINITY {
            return;
        }
        if v <= self.max {
            self.sum += (v - self.max).exp();
        } else {
            self.sum = self.sum * (self.max - v).exp() + 1.0;
            self.max = v;
        }
    }

    #[inline]
    fn value(&self) -> f64 {
        if self.max == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            self.max + self.sum.ln()
        }
    }
}

fn forward_lse(
    s: &ScoreMatrix,
    tr: &Transcript,
    pre: &[Vec<f64>],
    pmf: &[Vec<f64>],
    l_cap: usize,
) -> Vec<Vec<f64>> {
    let t_len = s.n_frames;
    let o_len = tr.len();
    let mut alpha = vec![vec![f64::NEG_INFINITY; t_len + 1]; o_len + 1];
    alpha[0][0] = 0.0;
    for o in 1..=o_len {
        let a = tr.0[o - 1];
        let col = &pre[a];
        let pmf_o = &pmf[o - 1];
        for t in o..=(t_len - (o_len - o)) {
            let mut acc = LseAcc::new();
            let max_l = l_cap.min(t - (o - 1));
            for l in 1..=max_l {
                let prev = alpha[o - 1][t - l];
                if prev == f64::NEG_INFINITY {
                    continue;
                }
                acc.push(prev + (col[t] - col[t - l]) + pmf_o[l]);
            }
            alpha[o][t] = acc.value();
        }
    }
    alpha
}

/// log of the summed path mass for one transcript: the align recurrence with
/// max replaced by log-sum-exp.
pub fn log_partition(
    s: &ScoreMatrix,
    tr: &Transcript,
    lm: &LengthModel,
    l_max: usize,
) -> Result<f64, DecodeError> {
    check_transcript(s, tr, l_max)?;
    let l_cap = effective_l_max(l_max, s.n_frames);
    let pre = prefix_sums(s);
    let pmf = logpmf_table(tr, lm, l_cap)?;
    let alpha = forward_lse(s, tr, &pre, &pmf, l_cap);
    Ok(alpha[tr.len()][s.n_frames])
}

/// `log_partition` plus its gradient with respect to every score entry: the
/// expected per-frame action occupancy under the Gibbs distribution over
/// paths, computed by a forward-backward sweep.
pub fn log_partition_with_grad(
    s: &ScoreMatrix,
    tr: &Transcript,
    lm: &LengthModel,
    l_max: usize,
) -> Result<(f64, Vec<f64>), DecodeError> {
    check_transcript(s, tr, l_max)?;
    let t_len = s.n_frames;
    let o_len = tr.len();
    let l_cap = effective_l_max(l_max, t_len);
    let pre = prefix_sums(s);
    let pmf = logpmf_table(tr, lm, l_cap)?;
    let alpha = forward_lse(s, tr, &pre, &pmf, l_cap);
    let log_z = alpha[o_len][t_len];
    if log_z == f64::NEG_INFINITY {
        return Err(DecodeError::Infeasible {
            segments: o_len,
            frames: t_len,
        });
    }

    // beta[o][u]: mass of completions given o segments consumed and u frames
    // consumed so far.
    let mut beta = vec![vec![f64::NEG_INFINITY; t_len + 1]; o_len + 1];
    beta[o_len][t_len] = 0.0;
    for o in (0..o_len).rev() {
        let a = tr.0[o];
        let col = &pre[a];
        let pmf_o = &pmf[o];
        let remaining = o_len - o - 1;
        for u in o..=(t_len - (o_len - o)) {
            let mut acc = LseAcc::new();
            let max_l = l_cap.min(t_len - u - remaining);
            for l in 1..=max_l {
                let nxt = beta[o + 1][u + l];
                if nxt == f64::NEG_INFINITY {
                    continue;
                }
                acc.push((col[u + l] - col[u]) + pmf_o[l] + nxt);
            }
            beta[o][u] = acc.value();
        }
    }

    // Segment marginals, spread over frames with a difference array.
    let mut grad = vec![0.0; t_len * s.n_actions];
    let mut diff = vec![0.0; t_len + 1];
    for o in 0..o_len {
        let a = tr.0[o];
        let col = &pre[a];
        let pmf_o = &pmf[o];
        let remaining = o_len - o - 1;
        diff.iter_mut().for_each(|d| *d = 0.0);
        for u in o..=(t_len - (o_len - o)) {
            let au = alpha[o][u];
            if au == f64::NEG_INFINITY {
                continue;
            }
            let max_l = l_cap.min(t_len - u - remaining);
            for l in 1..=max_l {
                let nxt = beta[o + 1][u + l];
                if nxt == f64::NEG_INFINITY {
                    continue;
                }
                let m = (au + (col[u + l] - col[u]) + pmf_o[l] + nxt - log_z).exp();
                if m > 0.0 {
                    diff[u] += m;
                    diff[u + l] -= m;
                }
            }
        }
        let mut run = 0.0;
        for t in 0..t_len {
            run += diff[t];
            grad[t * s.n_actions + a] += run;
        }
    }
    Ok((log_z, grad))
}

/// Grammar-level log partition: log-sum-exp over feasible transcripts of
/// prior-weighted per-transcript partitions. Returns the per-transcript
/// partitions alongside (NEG_INFINITY marks infeasible entries).
pub fn log_partition_grammar(
    s: &ScoreMatrix,
    g: &Grammar,
    lm: &LengthModel,
    l_max: usize,
) -> Result<(f64, Vec<f64>), DecodeError> {
    if g.is_empty() {
        return Err(DecodeError::EmptyGrammar);
    }
    let mut per_tr = vec![f64::NEG_INFINITY; g.len()];
    let mut acc = LseAcc::new();
    let mut any = false;
    for (i, (tr, &lp)) in g.transcripts.iter().zip(&g.log_priors).enumerate() {
        match log_partition(s, tr, lm, l_max) {
            Ok(z) => {
                per_tr[i] = z;
                acc.push(lp + z);
                any = true;
            }
            Err(DecodeError::Infeasible { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    if !any {
        return Err(DecodeError::NoFeasibleTranscript);
    }
    Ok((acc.value(), per_tr))
}

/// Grammar-level partition with gradient: the posterior-weighted mixture of
/// per-transcript occupancy gradients.
pub fn log_partition_grammar_with_grad(
    s: &ScoreMatrix,
    g: &Grammar,
    lm: &LengthModel,
    l_max: usize,
) -> Result<(f64, Vec<f64>), DecodeError> {
    let (log_z_all, per_tr) = log_partition_grammar(s, g, lm, l_max)?;
    let mut grad = vec![0.0; s.n_frames * s.n_actions];
    for (i, (tr, &lp)) in g.transcripts.iter().zip(&g.log_priors).enumerate() {
        if per_tr[i] == f64::NEG_INFINITY {
            continue;
        }
        let w = (lp + per_tr[i] - log_z_all).exp();
        if w == 0.0 {
            continue;
        }
        let (_, g_tr) = log_partition_with_grad(s, tr, lm, l_max)?;
        for (acc, gv) in grad.iter_mut().zip(g_tr) {
            *acc += w * gv;
        }
    }
    Ok((log_z_all, grad))
}

/// Model statistics re-estimated from a pseudo-labeled corpus: add-alpha
/// smoothed class prior, per-action mean segment lengths (with a corpus-mean
/// fallback for unseen actions), and the deduplicated transcript grammar with
/// uniform prior.
pub fn estimate_models(
    corpus: &[Segmentation],
    n_actions: usize,
    alpha: f64,
) -> Result<(Vec<f64>, LengthModel, Grammar), DecodeError> {
    if corpus.is_empty() {
        return Err(DecodeError::EmptyCorpus);
    }
    let mut frame_counts = vec![0.0f64; n_actions];
    let mut seg_counts = vec![0usize; n_actions];
    let mut seg_len_sums = vec![0.0f64; n_actions];
    let mut total_frames = 0.0f64;
    let mut total_segments = 0usize;
    for seg in corpus {
        for &(a, l) in &seg.segments {
            if a >= n_actions {
                return Err(DecodeError::BadAction {
                    id: a,
                    n_actions,
                });
            }
            frame_counts[a] += l as f64;
            seg_counts[a] += 1;
            seg_len_sums[a] += l as f64;
            total_frames += l as f64;
            total_segments += 1;
        }
    }

    let denom = total_frames + alpha * n_actions as f64;
    let prior: Vec<f64> = frame_counts.iter().map(|&c| (c + alpha) / denom).collect();

    let fallback = (total_frames / corpus.len() as f64)
        / (total_segments as f64 / corpus.len() as f64).max(1.0);
    let lambda: Vec<f64> = (0..n_actions)
        .map(|a| {
            if seg_counts[a] > 0 {
                seg_len_sums[a] / seg_counts[a] as f64
            } else {
                fallback.max(1.0)
            }
        })
        .collect();

    let mut transcripts: Vec<Transcript> = Vec::new();
    for seg in corpus {
        let tr = seg.transcript();
        if !transcripts.contains(&tr) {
            transcripts.push(tr);
        }
    }
    let grammar = Grammar::uniform(transcripts)?;
    Ok((prior, LengthModel::new(lambda), grammar))
}
