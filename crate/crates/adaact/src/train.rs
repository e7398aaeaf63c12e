//! Weakly-supervised training: per-video forward pass through context
//! integration, head generation, and the windowed encoder; a transcript-level
//! loss decoded from the score matrix; SGD on every parameter; periodic
//! re-estimation of the class prior, duration model, and grammar from
//! pseudo-labels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, FeatureSequence, LoadedVideo};
use crate::decode::{
    align, estimate_models, log_partition_with_grad, segment, DecodeError, Grammar, LengthModel,
    ScoreMatrix, Segmentation, Transcript,
};
use crate::encoder::{class_scores, posteriors, EncoderError, GruParams};
use crate::hoi::{filter_by_score, video_nms, HoiError, HoiSelection};
use crate::hypernet::{HypernetConfig, HypernetError, HyperNetwork};
use crate::integrator::{IntegratorConfig, IntegratorError, IntegratorParams};
use crate::tensor::{sgd_step, Param, Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Integrator(#[from] IntegratorError),
    #[error(transparent)]
    Hypernet(#[from] HypernetError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Hoi(#[from] HoiError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    Discriminative,
    PseudoLabel,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Top-K interactions kept by video-NMS.
    pub k_select: usize,
    /// Knowledge dimension shared by s, z, and u.
    pub d: usize,
    /// Hypernetwork head count.
    pub m: usize,
    /// GRU hidden width (rows of the generated weight).
    pub c_out: usize,
    /// Window length around each frame; must be odd.
    pub w: usize,
    pub seed: u64,
    pub loss_mode: LossMode,
    pub reestimate_every: usize,
    /// Hidden width of each hypernetwork branch.
    pub d_hidden: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub iou_thresh: f64,
    /// Frames; NMS suppresses only within this temporal distance.
    pub time_gap: u32,
    pub det_thresh: f64,
    /// Maximum segment length in decoding; 0 means the full video length.
    pub l_max: usize,
    pub prior_floor: f64,
    pub smoothing_alpha: f64,
    /// Replace the video context with zeros (context-independent ablation).
    pub ablate_hoi: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            epochs: 2000,
            k_select: 10,
            d: 128,
            m: 8,
            c_out: 64,
            w: 21,
            seed: 0,
            loss_mode: LossMode::Discriminative,
            reestimate_every: 5,
            d_hidden: 256,
            n_layers: 2,
            n_heads: 4,
            iou_thresh: 0.5,
            time_gap: 30,
            det_thresh: 0.5,
            l_max: 0,
            prior_floor: 1e-6,
            smoothing_alpha: 1.0,
            ablate_hoi: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.w % 2 == 0 || self.w == 0 {
            return Err(TrainError::Config(format!(
                "window length must be odd, got {}",
                self.w
            )));
        }
        if self.m == 0 || self.c_out % self.m != 0 {
            return Err(TrainError::Config(format!(
                "c_out {} must be divisible by m {}",
                self.c_out, self.m
            )));
        }
        if !(self.iou_thresh > 0.0 && self.iou_thresh < 1.0) {
            return Err(TrainError::Config(format!(
                "iou_thresh must lie in (0, 1), got {}",
                self.iou_thresh
            )));
        }
        if self.k_select == 0 {
            return Err(TrainError::Config("k_select must be at least 1".into()));
        }
        if self.lr < 0.0 {
            return Err(TrainError::Config(format!("negative lr {}", self.lr)));
        }
        Ok(())
    }
}

/// Corpus-dependent dimensions a checkpoint must reproduce.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelMeta {
    pub e_dim: usize,
    pub f_dim: usize,
    pub action_names: Vec<String>,
}

pub struct Model {
    pub meta: ModelMeta,
    pub cfg: TrainConfig,
    pub integrator: IntegratorParams,
    pub hyper: HyperNetwork,
    pub gru: GruParams,
}

impl Model {
    pub fn new(cfg: TrainConfig, meta: ModelMeta) -> Result<Self, TrainError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let integrator = IntegratorParams::new(
            IntegratorConfig {
                e_dim: meta.e_dim,
                d_model: cfg.d,
                d_out: cfg.d,
                k_max: cfg.k_select,
                n_layers: cfg.n_layers,
                n_heads: cfg.n_heads,
                mlp_hidden: 2 * cfg.d,
            },
            &mut rng,
        )?;
        let hyper = HyperNetwork::new(
            HypernetConfig {
                d: cfg.d,
                d_hidden: cfg.d_hidden,
                m: cfg.m,
                c_out: cfg.c_out,
                n_actions: meta.action_names.len(),
            },
            &mut rng,
        )?;
        let gru = GruParams::new(meta.f_dim, cfg.c_out, &mut rng);
        Ok(Self {
            meta,
            cfg,
            integrator,
            hyper,
            gru,
        })
    }

    pub fn n_actions(&self) -> usize {
        self.meta.action_names.len()
    }

    /// Every parameter in checkpoint order.
    pub fn params(&self) -> Vec<Param> {
        let mut out = self.integrator.named_params();
        out.extend(self.hyper.named_params());
        out.extend(self.gru.named_params());
        out
    }

    /// Parameters that participate in the forward pass; the integrator drops
    /// out under the context ablation.
    pub fn trainable_params(&self) -> Vec<Param> {
        let mut out = if self.cfg.ablate_hoi {
            Vec::new()
        } else {
            self.integrator.named_params()
        };
        out.extend(self.hyper.named_params());
        out.extend(self.gru.named_params());
        out
    }

    /// The per-video context vector; zeros under the ablation.
    pub fn context(&self, sel: &HoiSelection, tape: &Tape) -> Result<Tensor, TrainError> {
        if self.cfg.ablate_hoi {
            Ok(tape.constant(vec![1, self.cfg.d], vec![0.0; self.cfg.d])?)
        } else {
            Ok(self.integrator.integrate(sel, tape)?)
        }
    }

    /// Posteriors and prior-scaled log scores for one video.
    pub fn frame_scores(
        &self,
        features: &FeatureSequence,
        sel: &HoiSelection,
        prior: &[f64],
        tape: &Tape,
    ) -> Result<(Tensor, Tensor), TrainError> {
        let s = self.context(sel, tape)?;
        let head = self.hyper.generate_head(&s, tape)?;
        let p = posteriors(features, &head, &self.gru, self.cfg.w, tape)?;
        let scores = class_scores(&p, prior, self.cfg.prior_floor, tape)?;
        Ok((p, scores))
    }
}

/// Re-estimated decoding statistics; constants within an epoch.
#[derive(Debug, Clone)]
pub struct ModelStats {
    pub prior: Vec<f64>,
    pub length_model: LengthModel,
    pub grammar: Grammar,
}

/// One prepared training video.
pub struct VideoSample {
    pub video_id: String,
    pub features: FeatureSequence,
    pub selection: HoiSelection,
    pub transcript: Option<Transcript>,
}

/// Score filter + video-NMS for every video, using the configured thresholds.
pub fn prepare_samples(
    videos: &[LoadedVideo],
    actions: &crate::data::ActionTable,
    cfg: &TrainConfig,
) -> Result<Vec<VideoSample>, TrainError> {
    let mut out = Vec::with_capacity(videos.len());
    for v in videos {
        let kept = filter_by_score(&v.detections.detections, cfg.det_thresh);
        let selection = video_nms(&kept, cfg.iou_thresh, cfg.time_gap, cfg.k_select);
        let transcript = match &v.transcript {
            Some(names) => Some(Transcript(actions.ids(names)?)),
            None => None,
        };
        out.push(VideoSample {
            video_id: v.video_id.clone(),
            features: v.features.clone(),
            selection,
            transcript,
        });
    }
    Ok(out)
}

/// Even split of `t` frames over `o` segments; the remainder goes to the
/// leading segments. The bootstrap alignment before any training.
pub fn uniform_lengths(t: usize, o: usize) -> Vec<usize> {
    let base = t / o;
    let extra = t % o;
    (0..o).map(|i| base + usize::from(i < extra)).collect()
}

/// Initial statistics from uniform alignments of the training transcripts.
pub fn initial_stats(samples: &[VideoSample], n_actions: usize, alpha: f64) -> Result<ModelStats, TrainError> {
    let mut segs = Vec::new();
    for s in samples {
        let Some(tr) = &s.transcript else { continue };
        let t = s.features.n_frames;
        if tr.len() > t || tr.is_empty() {
            continue;
        }
        let lengths = uniform_lengths(t, tr.len());
        segs.push(Segmentation {
            segments: tr.0.iter().cloned().zip(lengths).collect(),
        });
    }
    if segs.is_empty() {
        return Err(TrainError::Config(
            "no feasible transcripts to bootstrap from".into(),
        ));
    }
    let (prior, length_model, grammar) = estimate_models(&segs, n_actions, alpha)?;
    Ok(ModelStats {
        prior,
        length_model,
        grammar,
    })
}

fn grammar_with(g: &Grammar, tr: &Transcript) -> (Grammar, usize) {
    match g.transcripts.iter().position(|t| t == tr) {
        Some(i) => (g.clone(), i),
        None => {
            let mut transcripts = g.transcripts.clone();
            transcripts.push(tr.clone());
            let idx = transcripts.len() - 1;
            (Grammar::uniform(transcripts).expect("nonempty"), idx)
        }
    }
}

/// Discriminative sequence loss: `-log p(transcript | video)` under the
/// grammar-restricted path posterior. Evaluated on the score values with its
/// exact occupancy-difference Jacobian, then injected back into the tape.
///
/// Computed as `logsumexp(0, deltas)` where each delta is a competitor's
/// prior-weighted partition relative to the valid transcript's, so the value
/// is nonnegative by construction and is exactly zero when every competitor
/// carries zero mass.
pub fn discriminative_loss(
    scores: &Tensor,
    tr: &Transcript,
    g: &Grammar,
    lm: &LengthModel,
    l_max: usize,
    tape: &Tape,
) -> Result<Tensor, TrainError> {
    let shape = scores.shape();
    let sm = ScoreMatrix::new(shape[0], shape[1], scores.values())?;
    let (g_eff, tr_idx) = grammar_with(g, tr);
    let (z_valid, grad_valid) = log_partition_with_grad(&sm, tr, lm, l_max)?;
    let base = g_eff.log_priors[tr_idx] + z_valid;

    let mut competitors: Vec<(usize, f64)> = Vec::new();
    for (i, (tr_i, &lp_i)) in g_eff.transcripts.iter().zip(&g_eff.log_priors).enumerate() {
        if i == tr_idx {
            continue;
        }
        match crate::decode::log_partition(&sm, tr_i, lm, l_max) {
            Ok(z_i) => competitors.push((i, lp_i + z_i - base)),
            Err(DecodeError::Infeasible { .. }) => continue,
            Err(e) => return Err(e.into()),
        }
    }

    let mut terms = vec![0.0];
    terms.extend(competitors.iter().map(|&(_, d)| d));
    let value = crate::tensor::logsumexp_slice(&terms);

    // d value / d S = sum_i w_i grad_i - grad_valid, with w the transcript
    // posterior; the valid transcript's own term folds into grad_valid.
    let w_valid = (-value).exp();
    let mut jac: Vec<f64> = grad_valid.iter().map(|gv| gv * (w_valid - 1.0)).collect();
    for &(i, delta) in &competitors {
        let w = (delta - value).exp();
        if w == 0.0 {
            continue;
        }
        let (_, grad_i) = log_partition_with_grad(&sm, &g_eff.transcripts[i], lm, l_max)?;
        for (acc, gi) in jac.iter_mut().zip(grad_i) {
            *acc += w * gi;
        }
    }
    Ok(tape.inject_scalar(scores, value, jac)?)
}

/// Viterbi pseudo-label loss: align the transcript on the current scores,
/// then mean negative log posterior of the aligned labels. The labels are
/// constants; no gradient flows through the alignment.
pub fn pseudo_label_loss(
    post: &Tensor,
    scores: &ScoreMatrix,
    tr: &Transcript,
    lm: &LengthModel,
    l_max: usize,
    tape: &Tape,
) -> Result<Tensor, TrainError> {
    let (seg, _) = align(scores, tr, lm, l_max)?;
    let labels = seg.frame_labels();
    let (t_len, a_len) = (scores.n_frames, scores.n_actions);
    let mut mask = vec![0.0; t_len * a_len];
    for (t, &a) in labels.iter().enumerate() {
        mask[t * a_len + a] = 1.0;
    }
    let mask = tape.constant(vec![t_len, a_len], mask)?;
    Ok(post
        .log()?
        .mul(&mask)?
        .sum()?
        .affine(-1.0 / t_len as f64, 0.0)?)
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub mean_loss: f64,
    pub skipped: usize,
}

fn shuffled_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    order
}

/// Training loop state. Epoch numbering is absolute so that a resumed run
/// reproduces the shuffling and re-estimation schedule of a straight run.
pub struct Trainer {
    pub model: Model,
    pub stats: ModelStats,
    pub samples: Vec<VideoSample>,
    pub epochs_done: usize,
    pub history: Vec<EpochReport>,
}

impl Trainer {
    pub fn new(model: Model, samples: Vec<VideoSample>) -> Result<Self, TrainError> {
        if samples.is_empty() {
            return Err(TrainError::Config("training corpus is empty".into()));
        }
        let stats = initial_stats(&samples, model.n_actions(), model.cfg.smoothing_alpha)?;
        Ok(Self {
            model,
            stats,
            samples,
            epochs_done: 0,
            history: Vec::new(),
        })
    }

    pub fn resume(
        model: Model,
        stats: ModelStats,
        epochs_done: usize,
        samples: Vec<VideoSample>,
    ) -> Result<Self, TrainError> {
        if samples.is_empty() {
            return Err(TrainError::Config("training corpus is empty".into()));
        }
        Ok(Self {
            model,
            stats,
            samples,
            epochs_done,
            history: Vec::new(),
        })
    }

    /// One pass over the corpus in the epoch's seed-fixed shuffled order.
    pub fn train_epoch(&mut self) -> Result<EpochReport, TrainError> {
        let epoch = self.epochs_done;
        let cfg = self.model.cfg.clone();
        let params = self.model.trainable_params();
        let order = shuffled_order(self.samples.len(), cfg.seed, epoch);
        let mut loss_sum = 0.0;
        let mut n_ok = 0usize;
        let mut skipped = 0usize;

        for idx in order {
            let sample = &self.samples[idx];
            let Some(tr) = &sample.transcript else {
                skipped += 1;
                continue;
            };
            if tr.len() > sample.features.n_frames {
                skipped += 1;
                continue;
            }
            let tape = Tape::new();
            let (post, scores) =
                self.model
                    .frame_scores(&sample.features, &sample.selection, &self.stats.prior, &tape)?;
            let loss = match cfg.loss_mode {
                LossMode::Discriminative => discriminative_loss(
                    &scores,
                    tr,
                    &self.stats.grammar,
                    &self.stats.length_model,
                    cfg.l_max,
                    &tape,
                ),
                LossMode::PseudoLabel => {
                    let shape = scores.shape();
                    let sm = ScoreMatrix::new(shape[0], shape[1], scores.values())?;
                    pseudo_label_loss(
                        &post,
                        &sm,
                        tr,
                        &self.stats.length_model,
                        cfg.l_max,
                        &tape,
                    )
                }
            };
            let loss = match loss {
                Ok(l) => l,
                Err(TrainError::Decode(DecodeError::Infeasible { .. })) => {
                    skipped += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            loss.backward()?;
            sgd_step(&params, cfg.lr)?;
            loss_sum += loss.value();
            n_ok += 1;
        }

        self.epochs_done += 1;
        if cfg.reestimate_every > 0 && self.epochs_done % cfg.reestimate_every == 0 {
            self.reestimate()?;
        }
        let report = EpochReport {
            epoch,
            mean_loss: if n_ok > 0 { loss_sum / n_ok as f64 } else { 0.0 },
            skipped,
        };
        self.history.push(report.clone());
        Ok(report)
    }

    pub fn run_until(&mut self, total_epochs: usize) -> Result<(), TrainError> {
        while self.epochs_done < total_epochs {
            let report = self.train_epoch()?;
            log::info!(
                "epoch {} mean_loss {:.6} skipped {}",
                report.epoch,
                report.mean_loss,
                report.skipped
            );
        }
        Ok(())
    }

    /// Decode pseudo-labels for the training transcripts with the current
    /// model and refresh prior, duration model, and grammar from them.
    pub fn reestimate(&mut self) -> Result<(), TrainError> {
        let cfg = self.model.cfg.clone();
        let mut segs = Vec::new();
        for sample in &self.samples {
            let Some(tr) = &sample.transcript else { continue };
            if tr.len() > sample.features.n_frames {
                continue;
            }
            let sm = self.score_matrix(&sample.features, &sample.selection)?;
            match align(&sm, tr, &self.stats.length_model, cfg.l_max) {
                Ok((seg, _)) => segs.push(seg),
                Err(DecodeError::Infeasible { .. }) => continue,
                Err(e) => return Err(e.into()),
            }
        }
        if segs.is_empty() {
            return Ok(());
        }
        let (prior, lm, grammar) =
            estimate_models(&segs, self.model.n_actions(), cfg.smoothing_alpha)?;
        self.stats = ModelStats {
            prior,
            length_model: lm,
            grammar,
        };
        Ok(())
    }

    /// Current-model score matrix for one video (no gradient use).
    pub fn score_matrix(
        &self,
        features: &FeatureSequence,
        sel: &HoiSelection,
    ) -> Result<ScoreMatrix, TrainError> {
        score_matrix(&self.model, &self.stats, features, sel)
    }
}

/// Score matrix for one video under a model and its statistics.
pub fn score_matrix(
    model: &Model,
    stats: &ModelStats,
    features: &FeatureSequence,
    sel: &HoiSelection,
) -> Result<ScoreMatrix, TrainError> {
    let tape = Tape::new();
    let (_, scores) = model.frame_scores(features, sel, &stats.prior, &tape)?;
    let shape = scores.shape();
    Ok(ScoreMatrix::new(shape[0], shape[1], scores.values())?)
}

/// Grammar-search decoding of one video.
pub fn segment_video(
    model: &Model,
    stats: &ModelStats,
    features: &FeatureSequence,
    sel: &HoiSelection,
) -> Result<(Transcript, Segmentation, f64), TrainError> {
    let sm = score_matrix(model, stats, features, sel)?;
    Ok(segment(&sm, &stats.grammar, &stats.length_model, model.cfg.l_max)?)
}

/// Transcript-constrained decoding of one video.
pub fn align_video(
    model: &Model,
    stats: &ModelStats,
    features: &FeatureSequence,
    sel: &HoiSelection,
    tr: &Transcript,
) -> Result<(Segmentation, f64), TrainError> {
    let sm = score_matrix(model, stats, features, sel)?;
    Ok(align(&sm, tr, &stats.length_model, model.cfg.l_max)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use rand::Rng;

    fn tiny_scores(tape: &Tape, t: usize, a: usize, rng: &mut ChaCha8Rng) -> (Param, Tensor) {
        let p = Param::randn("scores", vec![t, a], 1.0, rng);
        let tensor = tape.leaf(&p);
        (p, tensor)
    }

    #[test]
    fn discriminative_loss_zero_for_singleton_grammar() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tape = Tape::new();
        let (_, scores) = tiny_scores(&tape, 5, 2, &mut rng);
        let tr = Transcript(vec![0, 1]);
        let g = Grammar::uniform(vec![tr.clone()]).unwrap();
        let lm = LengthModel::new(vec![2.0, 3.0]);
        let loss = discriminative_loss(&scores, &tr, &g, &lm, 0, &tape).unwrap();
        assert_eq!(loss.value(), 0.0);
    }

    #[test]
    fn discriminative_loss_vanishes_under_dominance() {
        // Competitor's action scores astronomically low everywhere.
        let t = 4;
        let mut data = vec![0.0; t * 3];
        for row in 0..t {
            data[row * 3 + 2] = -1e6;
        }
        let tape = Tape::new();
        let scores = tape.constant(vec![t, 3], data).unwrap();
        let tr = Transcript(vec![0, 1]);
        let comp = Transcript(vec![2]);
        let g = Grammar::uniform(vec![tr.clone(), comp]).unwrap();
        let lm = LengthModel::new(vec![2.0, 2.0, 2.0]);
        let loss = discriminative_loss(&scores, &tr, &g, &lm, 0, &tape).unwrap();
        assert!(loss.value() >= 0.0);
        assert!(loss.value() < 1e-6, "loss {}", loss.value());
    }

    #[test]
    fn discriminative_loss_matches_brute_force_and_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for trial in 0..20 {
            let t = rng.random_range(2..=6);
            let a = 3;
            let tape = Tape::new();
            let (param, scores) = tiny_scores(&tape, t, a, &mut rng);
            let tr = oracle::random_transcript(&mut rng, a, t.min(3));
            let mut others = vec![tr.clone()];
            for _ in 0..2 {
                let cand = oracle::random_transcript(&mut rng, a, t.min(3));
                if !others.contains(&cand) {
                    others.push(cand);
                }
            }
            let g = Grammar::uniform(others).unwrap();
            let lm = LengthModel::new(vec![2.0, 3.0, 2.5]);

            let loss = discriminative_loss(&scores, &tr, &g, &lm, 0, &tape).unwrap();
            assert!(loss.value() >= -1e-12, "trial {trial}: negative loss");

            let sm = ScoreMatrix::new(t, a, param.values()).unwrap();
            let z_all = oracle::brute_force_grammar_partition(&sm, &g, &lm, 0).unwrap();
            let z_valid = oracle::brute_force_log_partition(&sm, &tr, &lm, 0).unwrap();
            let tr_idx = g.transcripts.iter().position(|x| *x == tr).unwrap();
            let want = z_all - z_valid - g.log_priors[tr_idx];
            assert!(
                (loss.value() - want).abs() < 1e-8,
                "trial {trial}: {} vs {want}",
                loss.value()
            );

            // Finite differences through the injected Jacobian.
            let report = crate::gradcheck::check_param(
                &param,
                &crate::gradcheck::sample_coords(t * a, 6),
                1e-5,
                || {
                    let tape = Tape::new();
                    let scores = tape.leaf(&param);
                    let loss = discriminative_loss(&scores, &tr, &g, &lm, 0, &tape)
                        .map_err(|_| TensorError::EmptyInput { op: "loss" })?;
                    loss.backward()?;
                    Ok(loss.value())
                },
            )
            .unwrap();
            assert!(report.rel_err < 1e-4, "trial {trial}: {report:?}");
        }
    }

    #[test]
    fn pseudo_label_loss_examples() {
        let tape = Tape::new();
        // Near-perfect posteriors on the aligned labels -> loss near 0.
        let post = tape
            .constant(vec![2, 2], vec![0.9999, 0.0001, 0.0001, 0.9999])
            .unwrap();
        let scores = ScoreMatrix::new(2, 2, vec![5.0, -5.0, -5.0, 5.0]).unwrap();
        let tr = Transcript(vec![0, 1]);
        let lm = LengthModel::new(vec![1.0, 1.0]);
        let loss = pseudo_label_loss(&post, &scores, &tr, &lm, 0, &tape).unwrap();
        assert!(loss.value() < 1e-3);

        // Uniform posteriors -> loss = ln A.
        let a = 4;
        let post = tape
            .constant(vec![3, a], vec![1.0 / a as f64; 3 * a])
            .unwrap();
        let scores = ScoreMatrix::new(3, a, vec![0.0; 3 * a]).unwrap();
        let tr = Transcript(vec![1]);
        let lm = LengthModel::new(vec![2.0; a]);
        let loss = pseudo_label_loss(&post, &scores, &tr, &lm, 0, &tape).unwrap();
        assert!((loss.value() - (a as f64).ln()).abs() < 1e-12);

        // Hand instance: T=4, A=2, labels from the forced alignment.
        let post_vals = vec![0.8, 0.2, 0.6, 0.4, 0.3, 0.7, 0.2, 0.8];
        let post = tape.constant(vec![4, 2], post_vals.clone()).unwrap();
        let mut s = vec![0.0; 8];
        // Make alignment put action 0 on frames 0-1 and action 1 on 2-3.
        s[0] = 3.0;
        s[2] = 3.0;
        s[5] = 3.0;
        s[7] = 3.0;
        let scores = ScoreMatrix::new(4, 2, s).unwrap();
        let tr = Transcript(vec![0, 1]);
        let lm = LengthModel::new(vec![2.0, 2.0]);
        let loss = pseudo_label_loss(&post, &scores, &tr, &lm, 0, &tape).unwrap();
        let want = -(post_vals[0].ln() + post_vals[2].ln() + post_vals[5].ln()
            + post_vals[7].ln())
            / 4.0;
        assert!((loss.value() - want).abs() < 1e-12);
    }

    #[test]
    fn uniform_lengths_cover_and_balance() {
        assert_eq!(uniform_lengths(10, 3), vec![4, 3, 3]);
        assert_eq!(uniform_lengths(3, 3), vec![1, 1, 1]);
        assert_eq!(uniform_lengths(7, 2), vec![4, 3]);
    }

    #[test]
    fn shuffled_order_is_epoch_dependent_and_deterministic() {
        let a = shuffled_order(20, 7, 0);
        let b = shuffled_order(20, 7, 0);
        let c = shuffled_order(20, 7, 1);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
