//! Run configuration: a `key = value` text file merged with `--set` overrides.
//!
//! Every key of the training and data-generation configs is addressable.
//! Unknown keys are rejected by name. The pairs are kept in application order
//! so a resumed run can re-apply them on top of a checkpoint's stored config.

use std::fmt;
use std::path::Path;

use adaact::data::SynthConfig;
use adaact::train::{LossMode, TrainConfig};

/// Configuration failures exit with code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for ConfigError {}

const KNOWN_KEYS: &[&str] = &[
    // training
    "lr",
    "epochs",
    "k",
    "d",
    "m",
    "c_out",
    "w",
    "seed",
    "loss_mode",
    "reestimate_every",
    "d_hidden",
    "n_layers",
    "n_heads",
    "iou_thresh",
    "time_gap",
    "det_thresh",
    "l_max",
    "prior_floor",
    "smoothing_alpha",
    "ablate_hoi",
    // data generation
    "activities",
    "ambiguous_pairs",
    "feat_dim",
    "hoi_dim",
    "t_min",
    "t_max",
    "videos_per_activity",
    "sigma_feat",
    "sigma_hoi",
    "sil_name",
    "sil_mean_len",
    "events_min",
    "events_max",
    "feat_sep",
    "hoi_sep",
    "train_fraction",
    // command behavior
    "split",
    "background",
    "jobs",
];

#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    pairs: Vec<(String, String)>,
}

fn parse_as<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value
        .trim()
        .parse()
        .map_err(|_| ConfigError(format!("bad value '{value}' for key '{key}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(ConfigError(format!("bad value '{other}' for key '{key}'"))),
    }
}

impl RunConfig {
    /// Reads the optional config file, then appends `--set` pairs and the
    /// `--seed` shorthand, validating every key name.
    pub fn load(
        config_path: Option<&Path>,
        sets: &[String],
        seed: Option<u64>,
    ) -> Result<Self, ConfigError> {
        let mut pairs = Vec::new();
        if let Some(path) = config_path {
            let content = std::fs::read_to_string(path)
                .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
            for (lineno, raw) in content.lines().enumerate() {
                let line = raw.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| {
                    ConfigError(format!(
                        "{}:{}: expected 'key = value'",
                        path.display(),
                        lineno + 1
                    ))
                })?;
                pairs.push((k.trim().to_string(), v.trim().to_string()));
            }
        }
        for s in sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| ConfigError(format!("--set '{s}' is not KEY=VALUE")))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        if let Some(seed) = seed {
            pairs.push(("seed".into(), seed.to_string()));
        }
        for (k, _) in &pairs {
            if !KNOWN_KEYS.contains(&k.as_str()) {
                return Err(ConfigError(format!("unknown configuration key '{k}'")));
            }
        }
        Ok(Self { pairs })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.pairs
            .iter()
            .rev()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    /// Applies the training keys on top of `base`.
    pub fn train_config(&self, base: TrainConfig) -> Result<TrainConfig, ConfigError> {
        let mut cfg = base;
        for (k, v) in &self.pairs {
            match k.as_str() {
                "lr" => cfg.lr = parse_as(k, v)?,
                "epochs" => cfg.epochs = parse_as(k, v)?,
                "k" => cfg.k_select = parse_as(k, v)?,
                "d" => cfg.d = parse_as(k, v)?,
                "m" => cfg.m = parse_as(k, v)?,
                "c_out" => cfg.c_out = parse_as(k, v)?,
                "w" => cfg.w = parse_as(k, v)?,
                "seed" => cfg.seed = parse_as(k, v)?,
                "loss_mode" => {
                    cfg.loss_mode = match v.trim() {
                        "discriminative" => LossMode::Discriminative,
                        "pseudo_label" => LossMode::PseudoLabel,
                        other => {
                            return Err(ConfigError(format!(
                                "bad value '{other}' for key 'loss_mode' \
                                 (discriminative|pseudo_label)"
                            )))
                        }
                    }
                }
                "reestimate_every" => cfg.reestimate_every = parse_as(k, v)?,
                "d_hidden" => cfg.d_hidden = parse_as(k, v)?,
                "n_layers" => cfg.n_layers = parse_as(k, v)?,
                "n_heads" => cfg.n_heads = parse_as(k, v)?,
                "iou_thresh" => cfg.iou_thresh = parse_as(k, v)?,
                "time_gap" => cfg.time_gap = parse_as(k, v)?,
                "det_thresh" => cfg.det_thresh = parse_as(k, v)?,
                "l_max" => cfg.l_max = parse_as(k, v)?,
                "prior_floor" => cfg.prior_floor = parse_as(k, v)?,
                "smoothing_alpha" => cfg.smoothing_alpha = parse_as(k, v)?,
                "ablate_hoi" => cfg.ablate_hoi = parse_bool(k, v)?,
                _ => {}
            }
        }
        Ok(cfg)
    }

    /// Builds the generator config. Activities come from the `activities`
    /// DSL (`name:act,act,...;name:act,...`) or the built-in default set;
    /// cluster means are placed on distinct axes scaled by `hoi_sep`.
    pub fn synth_config(&self) -> Result<SynthConfig, ConfigError> {
        let mut cfg = SynthConfig::default();
        for (k, v) in &self.pairs {
            match k.as_str() {
                "feat_dim" => cfg.feat_dim = parse_as(k, v)?,
                "hoi_dim" => cfg.hoi_dim = parse_as(k, v)?,
                "t_min" => cfg.t_min = parse_as(k, v)?,
                "t_max" => cfg.t_max = parse_as(k, v)?,
                "videos_per_activity" => cfg.videos_per_activity = parse_as(k, v)?,
                "sigma_feat" => cfg.sigma_feat = parse_as(k, v)?,
                "sigma_hoi" => cfg.sigma_hoi = parse_as(k, v)?,
                "sil_name" => cfg.sil_name = v.trim().to_string(),
                "sil_mean_len" => cfg.sil_mean_len = parse_as(k, v)?,
                "events_min" => cfg.events_min = parse_as(k, v)?,
                "events_max" => cfg.events_max = parse_as(k, v)?,
                "feat_sep" => cfg.feat_sep = parse_as(k, v)?,
                "train_fraction" => cfg.train_fraction = parse_as(k, v)?,
                "seed" => cfg.seed = parse_as(k, v)?,
                _ => {}
            }
        }
        let hoi_sep: f64 = match self.get("hoi_sep") {
            Some(v) => parse_as("hoi_sep", v)?,
            None => 1.0,
        };
        if let Some(dsl) = self.get("activities") {
            let mut activities = Vec::new();
            for chunk in dsl.split(';') {
                let (name, variants) = chunk.split_once(':').ok_or_else(|| {
                    ConfigError(format!("bad activities entry '{chunk}' (name:a,b,c|a,c)"))
                })?;
                let mut transcripts = Vec::new();
                for variant in variants.split('|') {
                    let transcript: Vec<String> = variant
                        .split(',')
                        .map(|a| a.trim().to_string())
                        .filter(|a| !a.is_empty())
                        .collect();
                    if !transcript.is_empty() {
                        transcripts.push(transcript);
                    }
                }
                if transcripts.is_empty() {
                    return Err(ConfigError(format!("activity '{name}' has no actions")));
                }
                activities.push(adaact::data::Activity {
                    name: name.trim().to_string(),
                    transcripts,
                    hoi_mean: Vec::new(),
                });
            }
            cfg.activities = activities;
        }
        let means = SynthConfig::axis_means(cfg.activities.len(), cfg.hoi_dim, hoi_sep);
        for (act, mean) in cfg.activities.iter_mut().zip(means) {
            act.hoi_mean = mean;
        }
        if let Some(dsl) = self.get("ambiguous_pairs") {
            let mut pairs = Vec::new();
            for chunk in dsl.split(',').filter(|c| !c.trim().is_empty()) {
                let (a, b) = chunk.split_once('/').ok_or_else(|| {
                    ConfigError(format!("bad ambiguous_pairs entry '{chunk}' (a/b)"))
                })?;
                pairs.push((a.trim().to_string(), b.trim().to_string()));
            }
            cfg.ambiguous_pairs = pairs;
        }
        Ok(cfg)
    }

    /// Split name, if explicitly configured.
    pub fn split(&self) -> Option<String> {
        self.get("split").map(str::to_string)
    }

    /// Background action names for evaluation.
    pub fn background(&self) -> Vec<String> {
        match self.get("background") {
            Some(v) => v
                .split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect(),
            None => vec!["SIL".to_string()],
        }
    }

    pub fn jobs(&self) -> Result<usize, ConfigError> {
        match self.get("jobs") {
            Some(v) => parse_as("jobs", v),
            None => Ok(1),
        }
    }

    /// The resolved pairs, for run logging.
    pub fn describe(&self) -> String {
        self.pairs
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_is_named_in_the_error() {
        let err = RunConfig::load(None, &["frobnicate=1".into()], None).unwrap_err();
        assert!(err.0.contains("frobnicate"));
    }

    #[test]
    fn later_pairs_win() {
        let cfg = RunConfig::load(None, &["lr=0.5".into(), "lr=0.25".into()], None).unwrap();
        let tc = cfg.train_config(TrainConfig::default()).unwrap();
        assert_eq!(tc.lr, 0.25);
    }

    #[test]
    fn seed_flag_applies_to_both_configs() {
        let cfg = RunConfig::load(None, &[], Some(99)).unwrap();
        assert_eq!(cfg.train_config(TrainConfig::default()).unwrap().seed, 99);
        assert_eq!(cfg.synth_config().unwrap().seed, 99);
    }

    #[test]
    fn config_file_with_comments() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(&path, "# comment\nepochs = 7\nm = 2 # trailing\n").unwrap();
        let cfg = RunConfig::load(Some(&path), &[], None).unwrap();
        let tc = cfg.train_config(TrainConfig::default()).unwrap();
        assert_eq!(tc.epochs, 7);
        assert_eq!(tc.m, 2);
    }

    #[test]
    fn activities_dsl_parses() {
        let cfg = RunConfig::load(
            None,
            &[
                "activities=mix:SIL,stir,SIL;chop:SIL,cut,SIL".into(),
                "ambiguous_pairs=stir/cut".into(),
            ],
            None,
        )
        .unwrap();
        let sc = cfg.synth_config().unwrap();
        assert_eq!(sc.activities.len(), 2);
        assert_eq!(sc.activities[1].transcripts[0], vec!["SIL", "cut", "SIL"]);
        assert_eq!(sc.ambiguous_pairs, vec![("stir".into(), "cut".into())]);
        assert_eq!(sc.activities[0].hoi_mean.len(), sc.hoi_dim);
    }
}
