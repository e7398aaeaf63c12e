//! Command implementations behind the CLI surface.

use std::collections::HashSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};

use adaact::checkpoint::{load_checkpoint, save_checkpoint};
use adaact::data::{
    generate_corpus, load_corpus, read_frame_labels, read_segmentation_file, write_corpus,
    write_segmentation_file, ActionTable, LoadedVideo, SegmentationEntry,
};
use adaact::eval::{metrics, LabeledVideo};
use adaact::train::{
    align_video, prepare_samples, score_matrix, Model, ModelMeta, ModelStats, TrainConfig,
    Trainer, VideoSample,
};

use crate::config::{ConfigError, RunConfig};

pub fn cmd_datagen(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    let synth = cfg.synth_config()?;
    log::info!("datagen config: {}", cfg.describe());
    let corpus = generate_corpus(&synth)?;
    write_corpus(out_dir, &corpus)?;
    log::info!(
        "wrote {} videos ({} train / {} test) to {}",
        corpus.videos.len(),
        corpus.train_ids.len(),
        corpus.test_ids.len(),
        out_dir.display()
    );
    Ok(())
}

fn load_split(
    corpus_dir: &Path,
    cfg: &RunConfig,
    default_split: Option<&str>,
) -> Result<(ActionTable, Vec<LoadedVideo>)> {
    let explicit = cfg.split();
    let split = explicit.as_deref().or(default_split);
    match split {
        Some(name) => {
            let split_file = corpus_dir.join("splits").join(format!("{name}.txt"));
            if !split_file.exists() {
                if explicit.is_some() {
                    bail!(ConfigError(format!(
                        "split file {} does not exist",
                        split_file.display()
                    )));
                }
                // Default split absent: fall back to the whole corpus.
                return Ok(load_corpus(corpus_dir, None)?);
            }
            Ok(load_corpus(corpus_dir, Some(name))?)
        }
        None => Ok(load_corpus(corpus_dir, None)?),
    }
}

fn corpus_dims(videos: &[LoadedVideo]) -> Result<(usize, usize)> {
    let first = videos
        .first()
        .ok_or_else(|| anyhow!("corpus has no videos"))?;
    let e_dim = first.detections.embedding_dim;
    let f_dim = first.features.n_feats;
    for v in videos {
        if v.detections.embedding_dim != e_dim || v.features.n_feats != f_dim {
            bail!(
                "video '{}' has inconsistent dimensions (E={}, F={})",
                v.video_id,
                v.detections.embedding_dim,
                v.features.n_feats
            );
        }
    }
    Ok((e_dim, f_dim))
}

fn write_train_log(path: &Path, history: &[adaact::train::EpochReport]) -> Result<()> {
    let mut out = String::from("epoch,loss,skipped\n");
    for r in history {
        out.push_str(&format!("{},{:.17e},{}\n", r.epoch, r.mean_loss, r.skipped));
    }
    std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn train_log_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".log.csv");
    PathBuf::from(s)
}

pub fn cmd_train(
    cfg: &RunConfig,
    corpus_dir: &Path,
    out: &Path,
    resume: Option<&Path>,
) -> Result<()> {
    let (actions, videos) = load_split(corpus_dir, cfg, Some("train"))?;
    let (e_dim, f_dim) = corpus_dims(&videos)?;

    let (model, stats, epochs_done) = match resume {
        Some(ckpt) => {
            let (mut model, stats, epochs_done) = load_checkpoint(ckpt)?;
            model.cfg = cfg.train_config(model.cfg.clone())?;
            model.cfg.validate()?;
            if model.meta.action_names != actions.names {
                bail!("checkpoint actions do not match the corpus action table");
            }
            (model, Some(stats), epochs_done)
        }
        None => {
            let train_cfg = cfg.train_config(TrainConfig::default())?;
            let meta = ModelMeta {
                e_dim,
                f_dim,
                action_names: actions.names.clone(),
            };
            (Model::new(train_cfg, meta)?, None, 0)
        }
    };
    log::info!(
        "train config: {} (resolved: {})",
        cfg.describe(),
        serde_json::to_string(&model.cfg)?
    );

    let samples = prepare_samples(&videos, &actions, &model.cfg)?;
    let total_epochs = model.cfg.epochs;
    let mut trainer = match stats {
        Some(stats) => Trainer::resume(model, stats, epochs_done, samples)?,
        None => Trainer::new(model, samples)?,
    };
    trainer.run_until(total_epochs)?;
    save_checkpoint(out, &trainer.model, &trainer.stats, trainer.epochs_done)?;
    write_train_log(&train_log_path(out), &trainer.history)?;
    Ok(())
}

fn decode_entries(
    checkpoint: &Path,
    model: &Model,
    stats: &ModelStats,
    actions: &ActionTable,
    samples: &[VideoSample],
    use_transcript: bool,
    jobs: usize,
) -> Result<Vec<SegmentationEntry>> {
    let decode_one = |model: &Model, stats: &ModelStats, s: &VideoSample| -> Result<SegmentationEntry> {
        let (transcript, seg, score) = if use_transcript {
            let tr = s
                .transcript
                .clone()
                .ok_or_else(|| anyhow!("video '{}' has no transcript to align", s.video_id))?;
            let (seg, score) = align_video(model, stats, &s.features, &s.selection, &tr)?;
            (tr, seg, score)
        } else {
            let sm = score_matrix(model, stats, &s.features, &s.selection)?;
            let (tr, seg, score) =
                adaact::decode::segment(&sm, &stats.grammar, &stats.length_model, model.cfg.l_max)?;
            (tr, seg, score)
        };
        debug_assert_eq!(transcript.len(), seg.segments.len());
        let named = seg
            .segments
            .iter()
            .map(|&(a, l)| (actions.name(a).to_string(), l))
            .collect();
        Ok(SegmentationEntry {
            video_id: s.video_id.clone(),
            segments: named,
            score,
        })
    };

    if jobs <= 1 || samples.len() <= 1 {
        return samples.iter().map(|s| decode_one(model, stats, s)).collect();
    }

    // Parameters are thread-confined, so each worker loads its own model
    // instance from the checkpoint; output order stays index-deterministic.
    let n_workers = jobs.min(samples.len());
    let chunk = samples.len().div_ceil(n_workers);
    let results: Vec<Result<Vec<(usize, SegmentationEntry)>>> = std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for w in 0..n_workers {
            let lo = w * chunk;
            let hi = ((w + 1) * chunk).min(samples.len());
            if lo >= hi {
                break;
            }
            let slice = &samples[lo..hi];
            handles.push(scope.spawn(move || {
                let (model, stats, _) = load_checkpoint(checkpoint)?;
                let mut out = Vec::with_capacity(slice.len());
                for (off, s) in slice.iter().enumerate() {
                    out.push((lo + off, decode_one(&model, &stats, s)?));
                }
                Ok(out)
            }));
        }
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });

    let mut indexed = Vec::with_capacity(samples.len());
    for r in results {
        indexed.extend(r?);
    }
    indexed.sort_by_key(|(i, _)| *i);
    Ok(indexed.into_iter().map(|(_, e)| e).collect())
}

pub fn cmd_decode(
    cfg: &RunConfig,
    checkpoint: &Path,
    corpus_dir: &Path,
    out: &Path,
    use_transcript: bool,
    jobs_flag: Option<usize>,
) -> Result<()> {
    let (model, stats, _) = load_checkpoint(checkpoint)?;
    let (actions, videos) = load_split(corpus_dir, cfg, None)?;
    if actions.names != model.meta.action_names {
        bail!("corpus action table does not match the checkpoint");
    }
    log::info!(
        "decode config: {} ({} videos)",
        cfg.describe(),
        videos.len()
    );
    let samples = prepare_samples(&videos, &actions, &model.cfg)?;
    let jobs = jobs_flag.map(Ok).unwrap_or_else(|| cfg.jobs())?;
    let entries = decode_entries(
        checkpoint,
        &model,
        &stats,
        &actions,
        &samples,
        use_transcript,
        jobs,
    )?;
    write_segmentation_file(out, &entries)?;
    Ok(())
}

pub fn cmd_eval(
    cfg: &RunConfig,
    pred_file: &Path,
    gt_dir: &Path,
    out: Option<&Path>,
) -> Result<()> {
    let entries = read_segmentation_file(pred_file)?;
    if entries.is_empty() {
        bail!("prediction file {} has no videos", pred_file.display());
    }

    // Build a name table over everything seen; ids only need consistency.
    let mut names: Vec<String> = Vec::new();
    let intern = |name: &str, names: &mut Vec<String>| -> usize {
        match names.iter().position(|n| n == name) {
            Some(i) => i,
            None => {
                names.push(name.to_string());
                names.len() - 1
            }
        }
    };

    let mut corpus = Vec::with_capacity(entries.len());
    for e in &entries {
        let gt_path = gt_dir.join(format!("{}.txt", e.video_id));
        let gt_names = read_frame_labels(&gt_path)?;
        let gt: Vec<usize> = gt_names.iter().map(|n| intern(n, &mut names)).collect();
        let mut pred = Vec::new();
        for (name, len) in &e.segments {
            let id = intern(name, &mut names);
            pred.extend(std::iter::repeat(id).take(*len));
        }
        corpus.push(LabeledVideo {
            video_id: e.video_id.clone(),
            gt,
            pred,
        });
    }

    let background: HashSet<usize> = cfg
        .background()
        .iter()
        .filter_map(|n| names.iter().position(|x| x == n))
        .collect();
    let report = metrics(&corpus, &background)?;
    let json = serde_json::to_string_pretty(&report)?;
    match out {
        Some(path) => std::fs::write(path, &json)?,
        None => {
            let mut stdout = std::io::stdout().lock();
            writeln!(stdout, "{json}")?;
        }
    }
    Ok(())
}
