//! Corpus file formats and the seeded synthetic corpus generator.
//!
//! On-disk layout of a corpus directory:
//!
//! ```text
//! features/<video_id>.feat     binary frame features (AAFT0001)
//! detections/<video_id>.jsonl  interaction detections (see hoi)
//! gt/<video_id>.txt            one ground-truth action name per frame
//! transcripts.txt              video_id<TAB>action names space-separated
//! actions.txt                  name<TAB>id
//! splits/{train,test,all}.txt  one video_id per line
//! ```
//!
//! The generator builds a two-activity corpus in which one action pair shares
//! its frame-feature distribution exactly, so frames alone cannot tell the
//! pair apart; the interaction embeddings cluster per activity and carry the
//! disambiguating signal.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufReader, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use thiserror::Error;

use crate::hoi::{DetectionFile, HoiDetection};

const FEATURE_MAGIC: &[u8; 8] = b"AAFT0001";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic, not a feature file")]
    BadMagic { path: PathBuf },
    #[error("{path}: truncated payload")]
    Truncated { path: PathBuf },
    #[error("{path}:{line}: {msg}")]
    Format {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown action name '{0}'")]
    UnknownAction(String),
    #[error(transparent)]
    Hoi(#[from] crate::hoi::HoiError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One video's frame features, row-major `T x F`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub video_id: String,
    pub n_frames: usize,
    pub n_feats: usize,
    pub data: Vec<f64>,
}

impl FeatureSequence {
    pub fn new(video_id: String, n_frames: usize, n_feats: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), n_frames * n_feats);
        Self {
            video_id,
            n_frames,
            n_feats,
            data,
        }
    }

    #[inline]
    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.n_feats..(t + 1) * self.n_feats]
    }
}

/// Binary layout: magic `AAFT0001`, T and F as u32 LE, then T*F f64 LE
/// row-major. Round-trips 64-bit values losslessly.
pub fn write_features(path: &Path, fs: &FeatureSequence) -> Result<(), DataError> {
    let mut out = std::io::BufWriter::new(File::create(path).map_err(io_err(path))?);
    out.write_all(FEATURE_MAGIC).map_err(io_err(path))?;
    out.write_all(&(fs.n_frames as u32).to_le_bytes())
        .map_err(io_err(path))?;
    out.write_all(&(fs.n_feats as u32).to_le_bytes())
        .map_err(io_err(path))?;
    for v in &fs.data {
        out.write_all(&v.to_le_bytes()).map_err(io_err(path))?;
    }
    Ok(())
}

pub fn read_features(path: &Path) -> Result<FeatureSequence, DataError> {
    let mut file = BufReader::new(File::open(path).map_err(io_err(path))?);
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)
        .map_err(|_| DataError::BadMagic {
            path: path.to_path_buf(),
        })?;
    if &magic != FEATURE_MAGIC {
        return Err(DataError::BadMagic {
            path: path.to_path_buf(),
        });
    }
    let mut u32buf = [0u8; 4];
    file.read_exact(&mut u32buf).map_err(|_| DataError::Truncated {
        path: path.to_path_buf(),
    })?;
    let t = u32::from_le_bytes(u32buf) as usize;
    file.read_exact(&mut u32buf).map_err(|_| DataError::Truncated {
        path: path.to_path_buf(),
    })?;
    let f = u32::from_le_bytes(u32buf) as usize;
    if t == 0 || f == 0 {
        return Err(DataError::Format {
            path: path.to_path_buf(),
            line: 0,
            msg: format!("feature file must have positive dimensions, got {t}x{f}"),
        });
    }
    let mut data = vec![0.0f64; t * f];
    let mut f64buf = [0u8; 8];
    for v in data.iter_mut() {
        file.read_exact(&mut f64buf).map_err(|_| DataError::Truncated {
            path: path.to_path_buf(),
        })?;
        *v = f64::from_le_bytes(f64buf);
    }
    let video_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(FeatureSequence::new(video_id, t, f, data))
}

/// Feature files of a directory in filename order.
pub fn read_features_dir(dir: &Path) -> Result<Vec<FeatureSequence>, DataError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "feat"))
        .collect();
    paths.sort();
    paths.iter().map(|p| read_features(p)).collect()
}

// ── Action table, transcripts, ground truth ─────────────────────────

/// Bidirectional action name/id table. Ids are dense from 0.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionTable {
    pub names: Vec<String>,
}

impl ActionTable {
    pub fn new(names: Vec<String>) -> Self {
        Self { names }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Result<usize, DataError> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| DataError::UnknownAction(name.to_string()))
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn ids(&self, names: &[String]) -> Result<Vec<usize>, DataError> {
        names.iter().map(|n| self.id(n)).collect()
    }
}

pub fn write_actions(path: &Path, table: &ActionTable) -> Result<(), DataError> {
    let mut out = String::new();
    for (i, name) in table.names.iter().enumerate() {
        out.push_str(&format!("{name}\t{i}\n"));
    }
    fs::write(path, out).map_err(io_err(path))
}

pub fn read_actions(path: &Path) -> Result<ActionTable, DataError> {
    let content = fs::read_to_string(path).map_err(io_err(path))?;
    let mut entries: Vec<(usize, String)> = Vec::new();
    for (lineno, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.splitn(2, '\t');
        let name = parts.next().unwrap_or_default().to_string();
        let id: usize = parts
            .next()
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| DataError::Format {
                path: path.to_path_buf(),
                line: lineno + 1,
                msg: "expected 'name<TAB>id'".into(),
            })?;
        entries.push((id, name));
    }
    entries.sort_by_key(|(id, _)| *id);
    for (expect, (id, _)) in entries.iter().enumerate() {
        if *id != expect {
            return Err(DataError::Format {
                path: path.to_path_buf(),
                line: 0,
                msg: format!("action ids must be dense from 0, missing {expect}"),
            });
        }
    }
    Ok(ActionTable::new(entries.into_iter().map(|(_, n)| n).collect()))
}

pub fn write_transcripts(path: &Path, entries: &[(String, Vec<String>)]) -> Result<(), DataError> {
    let mut out = String::new();
    for (vid, names) in entries {
        out.push_str(vid);
        out.push('\t');
        out.push_str(&names.join(" "));
        out.push('\n');
    }
    fs::write(path, out).map_err(io_err(path))
}

pub fn read_transcripts(path: &Path) -> Result<Vec<(String, Vec<String>)>, DataError> {
    let content = fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (lineno, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.splitn(2, '\t');
        let vid = parts.next().unwrap_or_default().to_string();
        let names = parts
            .next()
            .ok_or_else(|| DataError::Format {
                path: path.to_path_buf(),
                line: lineno + 1,
                msg: "expected 'video_id<TAB>actions'".into(),
            })?
            .split_whitespace()
            .map(str::to_string)
            .collect();
        out.push((vid, names));
    }
    Ok(out)
}

/// One action name per line, one line per frame.
pub fn write_frame_labels(path: &Path, labels: &[String]) -> Result<(), DataError> {
    let mut out = String::with_capacity(labels.len() * 8);
    for l in labels {
        out.push_str(l);
        out.push('\n');
    }
    fs::write(path, out).map_err(io_err(path))
}

pub fn read_frame_labels(path: &Path) -> Result<Vec<String>, DataError> {
    let content = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(content.lines().map(str::to_string).collect())
}

// ── Segmentation prediction files ────────────────────────────────────

/// One decoded video: named segments plus the decoder's path score.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationEntry {
    pub video_id: String,
    pub segments: Vec<(String, usize)>,
    pub score: f64,
}

/// Text format: one `video_id<TAB>name:len,name:len,...` line per video,
/// then a footer of `# score <video_id> <score>` lines and a final
/// `# total_score <sum>`.
pub fn write_segmentation_file(path: &Path, entries: &[SegmentationEntry]) -> Result<(), DataError> {
    let mut out = String::new();
    for e in entries {
        let body: Vec<String> = e
            .segments
            .iter()
            .map(|(name, len)| format!("{name}:{len}"))
            .collect();
        out.push_str(&format!("{}\t{}\n", e.video_id, body.join(",")));
    }
    let mut total = 0.0;
    for e in entries {
        out.push_str(&format!("# score {} {:.17e}\n", e.video_id, e.score));
        total += e.score;
    }
    out.push_str(&format!("# total_score {total:.17e}\n"));
    fs::write(path, out).map_err(io_err(path))
}

pub fn read_segmentation_file(path: &Path) -> Result<Vec<SegmentationEntry>, DataError> {
    let content = fs::read_to_string(path).map_err(io_err(path))?;
    let mut entries: Vec<SegmentationEntry> = Vec::new();
    let mut scores: HashMap<String, f64> = HashMap::new();
    for (lineno, line) in content.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            let mut parts = rest.split_whitespace();
            match parts.next() {
                Some("score") => {
                    let vid = parts.next().unwrap_or_default().to_string();
                    if let Some(v) = parts.next().and_then(|s| s.parse().ok()) {
                        scores.insert(vid, v);
                    }
                }
                _ => continue,
            }
            continue;
        }
        let mut parts = line.splitn(2, '\t');
        let vid = parts.next().unwrap_or_default().to_string();
        let body = parts.next().ok_or_else(|| DataError::Format {
            path: path.to_path_buf(),
            line: lineno + 1,
            msg: "expected 'video_id<TAB>segments'".into(),
        })?;
        let mut segments = Vec::new();
        for piece in body.split(',') {
            let mut kv = piece.rsplitn(2, ':');
            let len: usize = kv
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| DataError::Format {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    msg: format!("bad segment '{piece}'"),
                })?;
            let name = kv.next().ok_or_else(|| DataError::Format {
                path: path.to_path_buf(),
                line: lineno + 1,
                msg: format!("bad segment '{piece}'"),
            })?;
            segments.push((name.to_string(), len));
        }
        entries.push(SegmentationEntry {
            video_id: vid,
            segments,
            score: 0.0,
        });
    }
    for e in entries.iter_mut() {
        if let Some(&s) = scores.get(&e.video_id) {
            e.score = s;
        }
    }
    Ok(entries)
}

// ── Synthetic corpus ─────────────────────────────────────────────────

/// One activity template: transcript variants (one is sampled per video)
/// plus the cluster mean of its interaction embeddings.
#[derive(Debug, Clone)]
pub struct Activity {
    pub name: String,
    pub transcripts: Vec<Vec<String>>,
    pub hoi_mean: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub activities: Vec<Activity>,
    /// Pairs of action names forced to share one feature distribution.
    pub ambiguous_pairs: Vec<(String, String)>,
    pub feat_dim: usize,
    pub hoi_dim: usize,
    /// Target frame-count range; drives the per-action mean lengths.
    pub t_min: usize,
    pub t_max: usize,
    pub videos_per_activity: usize,
    pub sigma_feat: f64,
    pub sigma_hoi: f64,
    pub sil_name: String,
    pub sil_mean_len: f64,
    pub events_min: usize,
    pub events_max: usize,
    pub feat_sep: f64,
    pub train_fraction: f64,
    pub seed: u64,
}

impl SynthConfig {
    /// Per-activity cluster means on distinct axes with the given separation.
    pub fn axis_means(n_activities: usize, hoi_dim: usize, sep: f64) -> Vec<Vec<f64>> {
        (0..n_activities)
            .map(|i| {
                let mut v = vec![0.0; hoi_dim];
                v[i % hoi_dim] = sep;
                v
            })
            .collect()
    }
}

impl Default for SynthConfig {
    fn default() -> Self {
        let hoi_dim = 32;
        let means = Self::axis_means(2, hoi_dim, 1.0);
        // Variants are mirrored across the two activities so that nothing
        // outside the ambiguous slot identifies the activity.
        let variants = |pour: &str| {
            let s = |x: &str| x.to_string();
            vec![
                vec![s("SIL"), s("take_cup"), s(pour), s("stir"), s("serve"), s("SIL")],
                vec![s("SIL"), s("take_cup"), s(pour), s("serve"), s("SIL")],
                vec![s("SIL"), s("take_cup"), s(pour), s("stir"), s("SIL")],
                vec![s("SIL"), s(pour), s("stir"), s("serve"), s("SIL")],
            ]
        };
        Self {
            activities: vec![
                Activity {
                    name: "make_coffee".into(),
                    transcripts: variants("pour_coffee"),
                    hoi_mean: means[0].clone(),
                },
                Activity {
                    name: "make_juice".into(),
                    transcripts: variants("pour_juice"),
                    hoi_mean: means[1].clone(),
                },
            ],
            ambiguous_pairs: vec![("pour_coffee".into(), "pour_juice".into())],
            feat_dim: 16,
            hoi_dim,
            t_min: 80,
            t_max: 200,
            videos_per_activity: 20,
            sigma_feat: 0.2,
            sigma_hoi: 0.1,
            sil_name: "SIL".into(),
            sil_mean_len: 12.0,
            events_min: 3,
            events_max: 8,
            feat_sep: 1.0,
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthVideo {
    pub video_id: String,
    pub activity: usize,
    pub features: FeatureSequence,
    pub detections: DetectionFile,
    pub transcript: Vec<String>,
    pub gt_labels: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub actions: ActionTable,
    pub videos: Vec<SynthVideo>,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    /// Per action id; exposed so tests can verify the construction.
    pub feature_means: Vec<Vec<f64>>,
}

impl SynthCorpus {
    /// In-memory view of the listed videos in corpus order, as the loader
    /// would return them.
    pub fn loaded_videos(&self, ids: &[String]) -> Vec<LoadedVideo> {
        self.videos
            .iter()
            .filter(|v| ids.contains(&v.video_id))
            .map(|v| LoadedVideo {
                video_id: v.video_id.clone(),
                features: v.features.clone(),
                detections: v.detections.clone(),
                transcript: Some(v.transcript.clone()),
                gt_labels: Some(v.gt_labels.clone()),
            })
            .collect()
    }
}

fn action_table_from(cfg: &SynthConfig) -> ActionTable {
    let mut names: Vec<String> = vec![cfg.sil_name.clone()];
    for act in &cfg.activities {
        for tr in &act.transcripts {
            for name in tr {
                if !names.contains(name) {
                    names.push(name.clone());
                }
            }
        }
    }
    ActionTable::new(names)
}

/// Builds the whole corpus from one seeded generator stream.
pub fn generate_corpus(cfg: &SynthConfig) -> Result<SynthCorpus, DataError> {
    if cfg.activities.is_empty() {
        return Err(DataError::Config("at least one activity required".into()));
    }
    if cfg.t_min == 0 || cfg.t_max < cfg.t_min {
        return Err(DataError::Config(format!(
            "bad frame range [{}, {}]",
            cfg.t_min, cfg.t_max
        )));
    }
    if cfg.events_min > cfg.events_max || cfg.events_min == 0 {
        return Err(DataError::Config("bad event count range".into()));
    }
    if !(0.0..=1.0).contains(&cfg.train_fraction) {
        return Err(DataError::Config("train_fraction must be in [0, 1]".into()));
    }
    let actions = action_table_from(cfg);
    if actions.len() > cfg.feat_dim {
        return Err(DataError::Config(format!(
            "feat_dim {} too small for {} actions",
            cfg.feat_dim,
            actions.len()
        )));
    }
    for act in &cfg.activities {
        if act.hoi_mean.len() != cfg.hoi_dim {
            return Err(DataError::Config(format!(
                "activity '{}' cluster mean has length {}, expected {}",
                act.name,
                act.hoi_mean.len(),
                cfg.hoi_dim
            )));
        }
    }

    // Feature means on distinct axes; ambiguous pairs collapse to one mean.
    let mut feature_means: Vec<Vec<f64>> = (0..actions.len())
        .map(|a| {
            let mut v = vec![0.0; cfg.feat_dim];
            v[a] = cfg.feat_sep;
            v
        })
        .collect();
    for (first, second) in &cfg.ambiguous_pairs {
        let i = actions.id(first)?;
        let j = actions.id(second)?;
        feature_means[j] = feature_means[i].clone();
    }

    let mean_t = (cfg.t_min + cfg.t_max) as f64 / 2.0;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut videos = Vec::new();
    let mut train_ids = Vec::new();
    let mut test_ids = Vec::new();

    for (ai, act) in cfg.activities.iter().enumerate() {
        if act.transcripts.is_empty() {
            return Err(DataError::Config(format!(
                "activity '{}' has no transcript variants",
                act.name
            )));
        }
        for tr in &act.transcripts {
            if !tr.iter().any(|n| *n != cfg.sil_name) {
                return Err(DataError::Config(format!(
                    "activity '{}' has no non-background actions",
                    act.name
                )));
            }
        }

        let n_train = ((cfg.videos_per_activity as f64) * cfg.train_fraction).round() as usize;
        for v in 0..cfg.videos_per_activity {
            let video_id = format!("{}_{:03}", act.name, v);
            let transcript = &act.transcripts[rng.random_range(0..act.transcripts.len())];
            let transcript_ids = actions.ids(transcript)?;
            let n_sil = transcript.iter().filter(|n| **n == cfg.sil_name).count();
            let n_action = transcript.len() - n_sil;
            let action_mean =
                ((mean_t - n_sil as f64 * cfg.sil_mean_len) / n_action as f64).max(2.0);

            // Segment lengths from per-action Poissons.
            let mut lengths = Vec::with_capacity(transcript_ids.len());
            for name in transcript {
                let lam = if *name == cfg.sil_name {
                    cfg.sil_mean_len
                } else {
                    action_mean
                };
                let draw = Poisson::new(lam).expect("positive lambda").sample(&mut rng);
                lengths.push((draw as usize).max(1));
            }
            let t_total: usize = lengths.iter().sum();

            // Frame features around the per-action means.
            let noise = Normal::new(0.0, cfg.sigma_feat.max(0.0)).expect("sigma");
            let mut data = Vec::with_capacity(t_total * cfg.feat_dim);
            let mut gt_labels = Vec::with_capacity(t_total);
            for (&aid, (&len, name)) in transcript_ids
                .iter()
                .zip(lengths.iter().zip(transcript))
            {
                for _ in 0..len {
                    for j in 0..cfg.feat_dim {
                        data.push(feature_means[aid][j] + noise.sample(&mut rng));
                    }
                    gt_labels.push(name.clone());
                }
            }
            let features = FeatureSequence::new(video_id.clone(), t_total, cfg.feat_dim, data);

            // Interaction events clustered around the activity mean.
            let hoi_noise = Normal::new(0.0, cfg.sigma_hoi.max(0.0)).expect("sigma");
            let n_events = rng.random_range(cfg.events_min..=cfg.events_max);
            let mut detections = Vec::with_capacity(n_events);
            for _ in 0..n_events {
                let t = rng.random_range(0..t_total) as u32;
                let rand_box = |rng: &mut ChaCha8Rng| -> [f64; 4] {
                    let cx: f64 = rng.random_range(0.2..0.8);
                    let cy: f64 = rng.random_range(0.2..0.8);
                    let w: f64 = rng.random_range(0.05..0.3);
                    let h: f64 = rng.random_range(0.05..0.3);
                    [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0]
                };
                let hand_box = rand_box(&mut rng);
                let obj_box = rand_box(&mut rng);
                let score = rng.random_range(0.5..1.0);
                let embedding = act
                    .hoi_mean
                    .iter()
                    .map(|&m| m + hoi_noise.sample(&mut rng))
                    .collect();
                detections.push(HoiDetection {
                    t,
                    hand_box,
                    obj_box,
                    score,
                    embedding,
                });
            }
            let detections = DetectionFile {
                video_id: video_id.clone(),
                embedding_dim: cfg.hoi_dim,
                detections,
            };

            if v < n_train {
                train_ids.push(video_id.clone());
            } else {
                test_ids.push(video_id.clone());
            }
            videos.push(SynthVideo {
                video_id,
                activity: ai,
                features,
                detections,
                transcript: transcript.clone(),
                gt_labels,
            });
        }
    }

    Ok(SynthCorpus {
        actions,
        videos,
        train_ids,
        test_ids,
        feature_means,
    })
}

/// Writes the corpus in the directory layout documented in the module docs.
pub fn write_corpus(dir: &Path, corpus: &SynthCorpus) -> Result<(), DataError> {
    for sub in ["features", "detections", "gt", "splits"] {
        fs::create_dir_all(dir.join(sub)).map_err(io_err(dir))?;
    }
    write_actions(&dir.join("actions.txt"), &corpus.actions)?;
    let transcripts: Vec<(String, Vec<String>)> = corpus
        .videos
        .iter()
        .map(|v| (v.video_id.clone(), v.transcript.clone()))
        .collect();
    write_transcripts(&dir.join("transcripts.txt"), &transcripts)?;
    for v in &corpus.videos {
        write_features(
            &dir.join("features").join(format!("{}.feat", v.video_id)),
            &v.features,
        )?;
        crate::hoi::save_detections(
            &dir.join("detections").join(format!("{}.jsonl", v.video_id)),
            &v.detections,
        )?;
        write_frame_labels(
            &dir.join("gt").join(format!("{}.txt", v.video_id)),
            &v.gt_labels,
        )?;
    }
    let write_split = |name: &str, ids: &[String]| -> Result<(), DataError> {
        let path = dir.join("splits").join(format!("{name}.txt"));
        fs::write(&path, ids.join("\n") + "\n").map_err(io_err(&path))
    };
    write_split("train", &corpus.train_ids)?;
    write_split("test", &corpus.test_ids)?;
    let all: Vec<String> = corpus.videos.iter().map(|v| v.video_id.clone()).collect();
    write_split("all", &all)?;
    Ok(())
}

/// One on-disk video with whatever annotations exist for it.
#[derive(Debug, Clone)]
pub struct LoadedVideo {
    pub video_id: String,
    pub features: FeatureSequence,
    pub detections: DetectionFile,
    pub transcript: Option<Vec<String>>,
    pub gt_labels: Option<Vec<String>>,
}

/// Loads a corpus directory, optionally restricted to a named split.
pub fn load_corpus(
    dir: &Path,
    split: Option<&str>,
) -> Result<(ActionTable, Vec<LoadedVideo>), DataError> {
    let actions = read_actions(&dir.join("actions.txt"))?;
    let transcripts: HashMap<String, Vec<String>> =
        match read_transcripts(&dir.join("transcripts.txt")) {
            Ok(v) => v.into_iter().collect(),
            Err(DataError::Io { .. }) => HashMap::new(),
            Err(e) => return Err(e),
        };

    let wanted: Option<Vec<String>> = match split {
        Some(name) => {
            let path = dir.join("splits").join(format!("{name}.txt"));
            let content = fs::read_to_string(&path).map_err(io_err(&path))?;
            Some(content.lines().map(str::to_string).collect())
        }
        None => None,
    };

    let mut features = read_features_dir(&dir.join("features"))?;
    if let Some(wanted) = &wanted {
        features.retain(|f| wanted.contains(&f.video_id));
    }

    let mut videos = Vec::with_capacity(features.len());
    for f in features.drain(..) {
        let det_path = dir.join("detections").join(format!("{}.jsonl", f.video_id));
        let detections = crate::hoi::load_detections(&det_path)?;
        let gt_path = dir.join("gt").join(format!("{}.txt", f.video_id));
        let gt_labels = if gt_path.exists() {
            Some(read_frame_labels(&gt_path)?)
        } else {
            None
        };
        videos.push(LoadedVideo {
            video_id: f.video_id.clone(),
            transcript: transcripts.get(&f.video_id).cloned(),
            features: f,
            detections,
            gt_labels,
        });
    }
    Ok((actions, videos))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feature_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.feat");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<f64> = (0..21).map(|_| rng.random_range(-10.0..10.0)).collect();
        let fs = FeatureSequence::new("v".into(), 7, 3, data);
        write_features(&path, &fs).unwrap();
        let back = read_features(&path).unwrap();
        assert_eq!(back, fs);
    }

    #[test]
    fn zero_frame_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.feat");
        let mut bytes = FEATURE_MAGIC.to_vec();
        bytes.extend_from_slice(&0u32.to_le_bytes());
        bytes.extend_from_slice(&3u32.to_le_bytes());
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            read_features(&path),
            Err(DataError::Format { .. })
        ));
    }

    #[test]
    fn directory_loader_respects_filename_order() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["beta", "alpha"] {
            let fs = FeatureSequence::new(name.into(), 2, 2, vec![0.0; 4]);
            write_features(&dir.path().join(format!("{name}.feat")), &fs).unwrap();
        }
        let seqs = read_features_dir(dir.path()).unwrap();
        assert_eq!(seqs.len(), 2);
        assert_eq!(seqs[0].video_id, "alpha");
        assert_eq!(seqs[1].video_id, "beta");
    }

    #[test]
    fn corpus_generation_is_seed_deterministic() {
        let cfg = SynthConfig {
            videos_per_activity: 3,
            ..SynthConfig::default()
        };
        let a = generate_corpus(&cfg).unwrap();
        let b = generate_corpus(&cfg).unwrap();
        assert_eq!(a.videos.len(), b.videos.len());
        for (va, vb) in a.videos.iter().zip(&b.videos) {
            assert_eq!(va.features, vb.features);
            assert_eq!(va.detections.detections, vb.detections.detections);
            assert_eq!(va.gt_labels, vb.gt_labels);
        }
    }

    #[test]
    fn segment_lengths_positive_and_sum_to_t() {
        let cfg = SynthConfig {
            videos_per_activity: 4,
            ..SynthConfig::default()
        };
        let corpus = generate_corpus(&cfg).unwrap();
        for v in &corpus.videos {
            assert_eq!(v.gt_labels.len(), v.features.n_frames);
            let seg = crate::decode::Segmentation::from_frame_labels(
                &corpus
                    .actions
                    .ids(&v.gt_labels)
                    .unwrap(),
            );
            assert!(seg.segments.iter().all(|&(_, l)| l >= 1));
            assert_eq!(seg.n_frames(), v.features.n_frames);
        }
    }

    #[test]
    fn noiseless_unambiguous_corpus_is_nearest_mean_separable() {
        let mut cfg = SynthConfig {
            videos_per_activity: 2,
            sigma_feat: 0.0,
            ambiguous_pairs: vec![],
            ..SynthConfig::default()
        };
        cfg.seed = 5;
        let corpus = generate_corpus(&cfg).unwrap();
        let mut correct = 0usize;
        let mut total = 0usize;
        for v in &corpus.videos {
            for t in 0..v.features.n_frames {
                let frame = v.features.frame(t);
                let best = (0..corpus.actions.len())
                    .min_by(|&a, &b| {
                        let da: f64 = frame
                            .iter()
                            .zip(&corpus.feature_means[a])
                            .map(|(x, m)| (x - m).powi(2))
                            .sum();
                        let db: f64 = frame
                            .iter()
                            .zip(&corpus.feature_means[b])
                            .map(|(x, m)| (x - m).powi(2))
                            .sum();
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                if corpus.actions.name(best) == v.gt_labels[t] {
                    correct += 1;
                }
                total += 1;
            }
        }
        assert_eq!(correct, total, "nearest-mean classifier must be perfect");
    }

    #[test]
    fn ambiguous_pair_matches_distributions_and_clusters_separate() {
        let cfg = SynthConfig::default();
        let corpus = generate_corpus(&cfg).unwrap();
        let actions = &corpus.actions;
        let a1 = actions.id("pour_coffee").unwrap();
        let a2 = actions.id("pour_juice").unwrap();
        assert_eq!(corpus.feature_means[a1], corpus.feature_means[a2]);

        // Two-sample mean comparison on the generated frames.
        let collect = |target: usize| -> Vec<Vec<f64>> {
            corpus
                .videos
                .iter()
                .flat_map(|v| {
                    (0..v.features.n_frames)
                        .filter(|&t| actions.id(&v.gt_labels[t]).unwrap() == target)
                        .map(|t| v.features.frame(t).to_vec())
                        .collect::<Vec<_>>()
                })
                .collect()
        };
        let s1 = collect(a1);
        let s2 = collect(a2);
        assert!(s1.len() > 50 && s2.len() > 50);
        let mean = |s: &[Vec<f64>]| -> Vec<f64> {
            let mut m = vec![0.0; cfg.feat_dim];
            for row in s {
                for (acc, v) in m.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            m.iter().map(|v| v / s.len() as f64).collect()
        };
        let (m1, m2) = (mean(&s1), mean(&s2));
        let dist: f64 = m1
            .iter()
            .zip(&m2)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        // Mean standard error ~ sigma/sqrt(n) per dim; allow a generous factor.
        let se = cfg.sigma_feat / (s1.len().min(s2.len()) as f64).sqrt()
            * (cfg.feat_dim as f64).sqrt();
        assert!(
            dist < 6.0 * se,
            "ambiguous-pair means are distinguishable: dist {dist} vs se {se}"
        );

        // The interaction clusters must be far apart relative to their noise.
        let c1 = &cfg.activities[0].hoi_mean;
        let c2 = &cfg.activities[1].hoi_mean;
        let cdist: f64 = c1
            .iter()
            .zip(c2)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(cdist >= 4.0 * cfg.sigma_hoi);
    }

    #[test]
    fn corpus_write_then_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            videos_per_activity: 2,
            ..SynthConfig::default()
        };
        let corpus = generate_corpus(&cfg).unwrap();
        write_corpus(dir.path(), &corpus).unwrap();

        let (actions, videos) = load_corpus(dir.path(), None).unwrap();
        assert_eq!(actions, corpus.actions);
        assert_eq!(videos.len(), corpus.videos.len());
        let by_id: HashMap<&str, &SynthVideo> = corpus
            .videos
            .iter()
            .map(|v| (v.video_id.as_str(), v))
            .collect();
        for v in &videos {
            let orig = by_id[v.video_id.as_str()];
            assert_eq!(v.features, orig.features);
            assert_eq!(v.detections.detections, orig.detections.detections);
            assert_eq!(v.transcript.as_ref().unwrap(), &orig.transcript);
            assert_eq!(v.gt_labels.as_ref().unwrap(), &orig.gt_labels);
        }

        let (_, train_only) = load_corpus(dir.path(), Some("train")).unwrap();
        assert_eq!(train_only.len(), corpus.train_ids.len());
    }

    #[test]
    fn segmentation_file_roundtrip_with_scores() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pred.txt");
        let entries = vec![
            SegmentationEntry {
                video_id: "a".into(),
                segments: vec![("SIL".into(), 3), ("stir".into(), 7)],
                score: -12.5,
            },
            SegmentationEntry {
                video_id: "b".into(),
                segments: vec![("serve".into(), 10)],
                score: -3.25,
            },
        ];
        write_segmentation_file(&path, &entries).unwrap();
        let back = read_segmentation_file(&path).unwrap();
        assert_eq!(back, entries);
    }
}
