//! Checkpoint serialization.
//!
//! Binary file: magic `ADAACT01`, then per parameter in model order:
//! name length (u32 LE), UTF-8 name, rank (u32 LE), extents (u32 LE each),
//! values (f64 LE each). A JSON sidecar at `<path>.json` carries the resolved
//! config, corpus dimensions, epoch counter, and the decoding statistics.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decode::{Grammar, LengthModel, Transcript};
use crate::train::{Model, ModelMeta, ModelStats, TrainConfig, TrainError};

const MAGIC: &[u8; 8] = b"ADAACT01";

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    config: TrainConfig,
    meta: ModelMeta,
    epochs_done: usize,
    prior: Vec<f64>,
    lambda: Vec<f64>,
    grammar: Vec<Vec<usize>>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save_checkpoint(
    path: &Path,
    model: &Model,
    stats: &ModelStats,
    epochs_done: usize,
) -> Result<(), TrainError> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    for param in model.params() {
        let name = param.name();
        let name_bytes = name.as_bytes();
        out.write_all(&(name_bytes.len() as u32).to_le_bytes())?;
        out.write_all(name_bytes)?;
        let shape = param.shape();
        out.write_all(&(shape.len() as u32).to_le_bytes())?;
        for d in &shape {
            out.write_all(&(*d as u32).to_le_bytes())?;
        }
        for v in param.values() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;

    let sidecar = Sidecar {
        config: model.cfg.clone(),
        meta: model.meta.clone(),
        epochs_done,
        prior: stats.prior.clone(),
        lambda: stats.length_model.lambda.clone(),
        grammar: stats.grammar.transcripts.iter().map(|t| t.0.clone()).collect(),
    };
    let json = serde_json::to_string_pretty(&sidecar)
        .map_err(|e| TrainError::Checkpoint(e.to_string()))?;
    std::fs::write(sidecar_path(path), json)?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32, TrainError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, ModelStats, usize), TrainError> {
    let sidecar_file = sidecar_path(path);
    let json = std::fs::read_to_string(&sidecar_file)?;
    let sidecar: Sidecar =
        serde_json::from_str(&json).map_err(|e| TrainError::Checkpoint(e.to_string()))?;

    let model = Model::new(sidecar.config, sidecar.meta)?;

    let mut reader = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    reader.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(TrainError::Checkpoint("bad checkpoint magic".into()));
    }
    for param in model.params() {
        let name_len = read_u32(&mut reader)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        reader.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| TrainError::Checkpoint("parameter name is not UTF-8".into()))?;
        if name != param.name() {
            return Err(TrainError::Checkpoint(format!(
                "unexpected parameter '{name}', wanted '{}'",
                param.name()
            )));
        }
        let rank = read_u32(&mut reader)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut reader)? as usize);
        }
        if shape != param.shape() {
            return Err(TrainError::Checkpoint(format!(
                "parameter '{name}' has shape {shape:?}, wanted {:?}",
                param.shape()
            )));
        }
        let numel: usize = shape.iter().product();
        let mut values = vec![0.0f64; numel];
        let mut buf = [0u8; 8];
        for v in values.iter_mut() {
            reader.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        param.set_values(values)?;
    }

    let stats = ModelStats {
        prior: sidecar.prior,
        length_model: LengthModel::new(sidecar.lambda),
        grammar: Grammar::uniform(sidecar.grammar.into_iter().map(Transcript).collect())?,
    };
    Ok((model, stats, sidecar.epochs_done))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decode::{Grammar, LengthModel, Transcript};
    use crate::train::{Model, ModelMeta, ModelStats, TrainConfig};

    fn small_model(seed: u64) -> Model {
        let cfg = TrainConfig {
            d: 8,
            m: 2,
            c_out: 4,
            d_hidden: 6,
            n_layers: 1,
            n_heads: 2,
            k_select: 3,
            w: 3,
            seed,
            ..TrainConfig::default()
        };
        let meta = ModelMeta {
            e_dim: 5,
            f_dim: 4,
            action_names: vec!["SIL".into(), "a".into(), "b".into()],
        };
        Model::new(cfg, meta).unwrap()
    }

    #[test]
    fn checkpoint_roundtrip_restores_every_value() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = small_model(3);
        let stats = ModelStats {
            prior: vec![0.5, 0.3, 0.2],
            length_model: LengthModel::new(vec![4.0, 5.0, 6.0]),
            grammar: Grammar::uniform(vec![Transcript(vec![0, 1, 2])]).unwrap(),
        };
        save_checkpoint(&path, &model, &stats, 17).unwrap();

        let (loaded, lstats, epochs) = load_checkpoint(&path).unwrap();
        assert_eq!(epochs, 17);
        assert_eq!(lstats.prior, stats.prior);
        assert_eq!(lstats.length_model.lambda, stats.length_model.lambda);
        assert_eq!(lstats.grammar.transcripts, stats.grammar.transcripts);
        for (a, b) in model.params().iter().zip(loaded.params()) {
            assert_eq!(a.name(), b.name());
            assert_eq!(a.values(), b.values(), "param {} drifted", a.name());
        }
    }

    #[test]
    fn same_model_saves_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let stats = ModelStats {
            prior: vec![1.0 / 3.0; 3],
            length_model: LengthModel::new(vec![2.0; 3]),
            grammar: Grammar::uniform(vec![Transcript(vec![0])]).unwrap(),
        };
        save_checkpoint(&p1, &small_model(9), &stats, 0).unwrap();
        save_checkpoint(&p2, &small_model(9), &stats, 0).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }
}
