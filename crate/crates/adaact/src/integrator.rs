//! Transformer over the selected interactions: embeds the K object crops,
//! prepends a class token, adds learned position embeddings, runs pre-norm
//! self-attention blocks, and reads the class-token state out as the
//! video-level context vector `s`.

use rand::Rng;
use thiserror::Error;

use crate::hoi::HoiSelection;
use crate::tensor::{Param, Tape, Tensor, TensorError};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum IntegratorError {
    #[error("model dim {d_model} not divisible by {heads} heads")]
    HeadsDivide { d_model: usize, heads: usize },
    #[error("selection has {got} items but the integrator was built for at most {k_max}")]
    TooManyDetections { got: usize, k_max: usize },
    #[error("embedding length {got}, expected {expected}")]
    EmbeddingDim { expected: usize, got: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IntegratorConfig {
    /// Incoming crop-embedding length E.
    pub e_dim: usize,
    /// Transformer width.
    pub d_model: usize,
    /// Output context length D (projection added only when != d_model).
    pub d_out: usize,
    /// Maximum selection size K; position table has k_max + 1 rows.
    pub k_max: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_hidden: usize,
}

struct LayerParams {
    ln1_gain: Param,
    ln1_shift: Param,
    wq: Param,
    bq: Param,
    wk: Param,
    bk: Param,
    wv: Param,
    bv: Param,
    wo: Param,
    bo: Param,
    ln2_gain: Param,
    ln2_shift: Param,
    mlp_w1: Param,
    mlp_b1: Param,
    mlp_w2: Param,
    mlp_b2: Param,
}

/// All trainable state of the integrator.
pub struct IntegratorParams {
    pub cfg: IntegratorConfig,
    input_proj: Param,
    class_token: Param,
    positions: Param,
    layers: Vec<LayerParams>,
    output_proj: Option<Param>,
}

impl IntegratorParams {
    pub fn new(cfg: IntegratorConfig, rng: &mut impl Rng) -> Result<Self, IntegratorError> {
        if cfg.n_heads == 0 || cfg.d_model % cfg.n_heads != 0 {
            return Err(IntegratorError::HeadsDivide {
                d_model: cfg.d_model,
                heads: cfg.n_heads,
            });
        }
        let d = cfg.d_model;
        let proj_std = 1.0 / (d as f64).sqrt();
        let layers = (0..cfg.n_layers)
            .map(|n| LayerParams {
                ln1_gain: Param::ones(format!("integrator.layer{n}.ln1.gain"), vec![d]),
                ln1_shift: Param::zeros(format!("integrator.layer{n}.ln1.shift"), vec![d]),
                wq: Param::randn(format!("integrator.layer{n}.wq"), vec![d, d], proj_std, rng),
                bq: Param::zeros(format!("integrator.layer{n}.bq"), vec![d]),
                wk: Param::randn(format!("integrator.layer{n}.wk"), vec![d, d], proj_std, rng),
                bk: Param::zeros(format!("integrator.layer{n}.bk"), vec![d]),
                wv: Param::randn(format!("integrator.layer{n}.wv"), vec![d, d], proj_std, rng),
                bv: Param::zeros(format!("integrator.layer{n}.bv"), vec![d]),
                wo: Param::randn(format!("integrator.layer{n}.wo"), vec![d, d], proj_std, rng),
                bo: Param::zeros(format!("integrator.layer{n}.bo"), vec![d]),
                ln2_gain: Param::ones(format!("integrator.layer{n}.ln2.gain"), vec![d]),
                ln2_shift: Param::zeros(format!("integrator.layer{n}.ln2.shift"), vec![d]),
                mlp_w1: Param::randn(
                    format!("integrator.layer{n}.mlp_w1"),
                    vec![d, cfg.mlp_hidden],
                    proj_std,
                    rng,
                ),
                mlp_b1: Param::zeros(format!("integrator.layer{n}.mlp_b1"), vec![cfg.mlp_hidden]),
                mlp_w2: Param::randn(
                    format!("integrator.layer{n}.mlp_w2"),
                    vec![cfg.mlp_hidden, d],
                    1.0 / (cfg.mlp_hidden as f64).sqrt(),
                    rng,
                ),
                mlp_b2: Param::zeros(format!("integrator.layer{n}.mlp_b2"), vec![d]),
            })
            .collect();
        Ok(Self {
            cfg,
            input_proj: Param::randn(
                "integrator.input_proj",
                vec![cfg.e_dim, d],
                1.0 / (cfg.e_dim as f64).sqrt(),
                rng,
            ),
            class_token: Param::randn("integrator.class_token", vec![1, d], 0.02, rng),
            positions: Param::randn("integrator.positions", vec![cfg.k_max + 1, d], 0.02, rng),
            layers,
            output_proj: if cfg.d_out != cfg.d_model {
                Some(Param::randn(
                    "integrator.output_proj",
                    vec![d, cfg.d_out],
                    proj_std,
                    rng,
                ))
            } else {
                None
            },
        })
    }

    /// Parameters in a fixed order, for checkpoints and gradient sweeps.
    pub fn named_params(&self) -> Vec<Param> {
        let mut out = vec![
            self.input_proj.clone(),
            self.class_token.clone(),
            self.positions.clone(),
        ];
        for l in &self.layers {
            out.extend(
                [
                    &l.ln1_gain, &l.ln1_shift, &l.wq, &l.bq, &l.wk, &l.bk, &l.wv, &l.bv, &l.wo,
                    &l.bo, &l.ln2_gain, &l.ln2_shift, &l.mlp_w1, &l.mlp_b1, &l.mlp_w2, &l.mlp_b2,
                ]
                .into_iter()
                .cloned(),
            );
        }
        if let Some(p) = &self.output_proj {
            out.push(p.clone());
        }
        out
    }

    /// Zero the position table; used by the permutation-invariance tests.
    pub fn zero_positions(&self) {
        let n = self.positions.numel();
        self.positions.set_values(vec![0.0; n]).expect("same shape");
    }

    fn attention(
        &self,
        layer: &LayerParams,
        y: &Tensor,
        tape: &Tape,
    ) -> Result<Tensor, TensorError> {
        let d = self.cfg.d_model;
        let h = self.cfg.n_heads;
        let dh = d / h;
        let q = y.matmul(&tape.leaf(&layer.wq))?.add_row_bias(&tape.leaf(&layer.bq))?;
        let k = y.matmul(&tape.leaf(&layer.wk))?.add_row_bias(&tape.leaf(&layer.bk))?;
        let v = y.matmul(&tape.leaf(&layer.wv))?.add_row_bias(&tape.leaf(&layer.bv))?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(h);
        for i in 0..h {
            let qh = q.slice_cols(i * dh, dh)?;
            let kh = k.slice_cols(i * dh, dh)?;
            let vh = v.slice_cols(i * dh, dh)?;
            let scores = qh.matmul(&kh.transpose()?)?.affine(scale, 0.0)?;
            let attn = scores.softmax_rows()?;
            heads.push(attn.matmul(&vh)?);
        }
        let head_refs: Vec<&Tensor> = heads.iter().collect();
        let merged = tape.concat_cols(&head_refs)?;
        merged
            .matmul(&tape.leaf(&layer.wo))?
            .add_row_bias(&tape.leaf(&layer.bo))
    }

    /// Fuses a time-ordered selection into the context vector `s` (shape
    /// `[1, d_out]`). With fewer than K detections the sequence simply gets
    /// shorter; only the present positions receive their position rows.
    pub fn integrate(&self, sel: &HoiSelection, tape: &Tape) -> Result<Tensor, IntegratorError> {
        let k = sel.items.len();
        if k > self.cfg.k_max {
            return Err(IntegratorError::TooManyDetections {
                got: k,
                k_max: self.cfg.k_max,
            });
        }
        for item in &sel.items {
            if item.embedding.len() != self.cfg.e_dim {
                return Err(IntegratorError::EmbeddingDim {
                    expected: self.cfg.e_dim,
                    got: item.embedding.len(),
                });
            }
        }

        let token = tape.leaf(&self.class_token);
        let seq = if k == 0 {
            token
        } else {
            let mut emb = Vec::with_capacity(k * self.cfg.e_dim);
            for item in &sel.items {
                emb.extend_from_slice(&item.embedding);
            }
            let emb = tape.constant(vec![k, self.cfg.e_dim], emb)?;
            let projected = emb.matmul(&tape.leaf(&self.input_proj))?;
            tape.concat_rows(&[&token, &projected])?
        };
        let pos_rows: Vec<usize> = (0..=k).collect();
        let pos = tape.leaf(&self.positions).gather_rows(&pos_rows)?;
        let mut state = seq.add(&pos)?;

        for layer in &self.layers {
            let normed = state.layernorm(
                &tape.leaf(&layer.ln1_gain),
                &tape.leaf(&layer.ln1_shift),
                LN_EPS,
            )?;
            let msa = self.attention(layer, &normed, tape)?;
            state = msa.add(&state)?;

            let normed = state.layernorm(
                &tape.leaf(&layer.ln2_gain),
                &tape.leaf(&layer.ln2_shift),
                LN_EPS,
            )?;
            let mlp = normed
                .matmul(&tape.leaf(&layer.mlp_w1))?
                .add_row_bias(&tape.leaf(&layer.mlp_b1))?
                .relu()?
                .matmul(&tape.leaf(&layer.mlp_w2))?
                .add_row_bias(&tape.leaf(&layer.mlp_b2))?;
            state = mlp.add(&state)?;
        }

        let cls = state.gather_rows(&[0])?;
        let s = match &self.output_proj {
            Some(p) => cls.matmul(&tape.leaf(p))?,
            None => cls,
        };
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hoi::HoiDetection;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn test_cfg() -> IntegratorConfig {
        IntegratorConfig {
            e_dim: 6,
            d_model: 8,
            d_out: 8,
            k_max: 5,
            n_layers: 2,
            n_heads: 2,
            mlp_hidden: 16,
        }
    }

    fn selection(rng: &mut ChaCha8Rng, k: usize, e_dim: usize) -> HoiSelection {
        let items = (0..k)
            .map(|i| HoiDetection {
                t: (i * 10) as u32,
                hand_box: [0.0, 0.0, 0.5, 0.5],
                obj_box: [0.1, 0.1, 0.6, 0.6],
                score: 0.9,
                embedding: (0..e_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
            })
            .collect();
        HoiSelection { items }
    }

    #[test]
    fn heads_must_divide_model_dim() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = IntegratorConfig {
            n_heads: 3,
            ..test_cfg()
        };
        assert!(matches!(
            IntegratorParams::new(cfg, &mut rng),
            Err(IntegratorError::HeadsDivide { .. })
        ));
    }

    #[test]
    fn zero_detections_is_a_length_one_sequence() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = IntegratorParams::new(test_cfg(), &mut rng).unwrap();
        let tape = Tape::new();
        let s = params.integrate(&HoiSelection::empty(), &tape).unwrap();
        assert_eq!(s.shape(), vec![1, 8]);
        assert!(s.values().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn handles_every_selection_size_up_to_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = IntegratorParams::new(test_cfg(), &mut rng).unwrap();
        for k in 0..=5 {
            let sel = selection(&mut rng, k, 6);
            let tape = Tape::new();
            let s = params.integrate(&sel, &tape).unwrap();
            assert_eq!(s.shape(), vec![1, 8]);
        }
        let sel = selection(&mut rng, 6, 6);
        let tape = Tape::new();
        assert!(matches!(
            params.integrate(&sel, &tape),
            Err(IntegratorError::TooManyDetections { .. })
        ));
    }

    #[test]
    fn deterministic_across_repeated_calls() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = IntegratorParams::new(test_cfg(), &mut rng).unwrap();
        let sel = selection(&mut rng, 4, 6);
        let a = params.integrate(&sel, &Tape::new()).unwrap().values();
        let b = params.integrate(&sel, &Tape::new()).unwrap().values();
        assert_eq!(a, b);
    }

    #[test]
    fn permutation_invariant_with_zeroed_positions_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = IntegratorParams::new(test_cfg(), &mut rng).unwrap();
        let sel = selection(&mut rng, 5, 6);
        let mut permuted = sel.clone();
        permuted.items.rotate_left(2);
        permuted.items.swap(0, 3);

        // With learned positions the order matters.
        let a = params.integrate(&sel, &Tape::new()).unwrap().values();
        let b = params.integrate(&permuted, &Tape::new()).unwrap().values();
        let diff_nonzero: f64 = a
            .iter()
            .zip(&b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(diff_nonzero > 1e-8, "positions should break symmetry");

        params.zero_positions();
        let a = params.integrate(&sel, &Tape::new()).unwrap().values();
        let b = params.integrate(&permuted, &Tape::new()).unwrap().values();
        let diff: f64 = a
            .iter()
            .zip(&b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-10, "max deviation {diff}");
    }

    #[test]
    fn gradients_reach_every_parameter_group() {
        use crate::gradcheck::{check_param, sample_coords, DEFAULT_STEP};
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = IntegratorConfig {
            d_out: 4,
            ..test_cfg()
        };
        let params = IntegratorParams::new(cfg, &mut rng).unwrap();
        let sel = selection(&mut rng, 3, 6);
        for p in params.named_params() {
            let report = check_param(&p, &sample_coords(p.numel(), 4), DEFAULT_STEP, || {
                let tape = Tape::new();
                let s = params
                    .integrate(&sel, &tape)
                    .map_err(|_| crate::tensor::TensorError::EmptyInput { op: "integrate" })?;
                let loss = s.tanh()?.sum()?;
                loss.backward()?;
                Ok(loss.value())
            })
            .unwrap();
            assert!(report.rel_err < 1e-4, "{report:?}");
        }
    }
}
