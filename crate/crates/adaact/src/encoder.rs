//! The adaptive temporal encoder: a GRU run left-to-right over a centered
//! window around each frame (truncated at the sequence boundaries, zero
//! initial state), followed by the generated linear head and a row softmax.
//!
//! All T windows are evaluated in lockstep as one batched recurrence aligned
//! on window ends; rows never mix in any of the ops involved, so each row of
//! the result is bit-identical to running its window alone.

use rand::Rng;
use thiserror::Error;

use crate::data::FeatureSequence;
use crate::hypernet::GeneratedHead;
use crate::tensor::{Param, Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("window length must be odd and >= 1, got {0}")]
    EvenWindow(usize),
    #[error("frame {t} out of range for {len} frames")]
    FrameOutOfRange { t: usize, len: usize },
    #[error("head shape {got:?} does not match [{c_out}, A]")]
    HeadShape { c_out: usize, got: Vec<usize> },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Gate parameters of a single-layer GRU.
pub struct GruParams {
    pub f_dim: usize,
    pub c_out: usize,
    pub w_z: Param,
    pub w_r: Param,
    pub w_h: Param,
    pub u_z: Param,
    pub u_r: Param,
    pub u_h: Param,
    pub b_z: Param,
    pub b_r: Param,
    pub b_h: Param,
}

impl GruParams {
    pub fn new(f_dim: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        let in_std = 1.0 / (f_dim as f64).sqrt();
        let rec_std = 1.0 / (c_out as f64).sqrt();
        Self {
            f_dim,
            c_out,
            w_z: Param::randn("gru.w_z", vec![f_dim, c_out], in_std, rng),
            w_r: Param::randn("gru.w_r", vec![f_dim, c_out], in_std, rng),
            w_h: Param::randn("gru.w_h", vec![f_dim, c_out], in_std, rng),
            u_z: Param::randn("gru.u_z", vec![c_out, c_out], rec_std, rng),
            u_r: Param::randn("gru.u_r", vec![c_out, c_out], rec_std, rng),
            u_h: Param::randn("gru.u_h", vec![c_out, c_out], rec_std, rng),
            b_z: Param::zeros("gru.b_z", vec![c_out]),
            b_r: Param::zeros("gru.b_r", vec![c_out]),
            b_h: Param::zeros("gru.b_h", vec![c_out]),
        }
    }

    pub fn named_params(&self) -> Vec<Param> {
        [
            &self.w_z, &self.w_r, &self.w_h, &self.u_z, &self.u_r, &self.u_h, &self.b_z,
            &self.b_r, &self.b_h,
        ]
        .into_iter()
        .cloned()
        .collect()
    }
}

struct GruLeaves {
    w_z: Tensor,
    w_r: Tensor,
    w_h: Tensor,
    u_z: Tensor,
    u_r: Tensor,
    u_h: Tensor,
    b_z: Tensor,
    b_r: Tensor,
    b_h: Tensor,
}

impl GruLeaves {
    fn enter(params: &GruParams, tape: &Tape) -> Self {
        Self {
            w_z: tape.leaf(&params.w_z),
            w_r: tape.leaf(&params.w_r),
            w_h: tape.leaf(&params.w_h),
            u_z: tape.leaf(&params.u_z),
            u_r: tape.leaf(&params.u_r),
            u_h: tape.leaf(&params.u_h),
            b_z: tape.leaf(&params.b_z),
            b_r: tape.leaf(&params.b_r),
            b_h: tape.leaf(&params.b_h),
        }
    }

    /// One step for a batch of rows: x `[n, F]`, h `[n, C]` -> `[n, C]`.
    fn step(&self, x: &Tensor, h: &Tensor) -> Result<Tensor, TensorError> {
        let z = x
            .matmul(&self.w_z)?
            .add(&h.matmul(&self.u_z)?)?
            .add_row_bias(&self.b_z)?
            .sigmoid()?;
        let r = x
            .matmul(&self.w_r)?
            .add(&h.matmul(&self.u_r)?)?
            .add_row_bias(&self.b_r)?
            .sigmoid()?;
        let cand = x
            .matmul(&self.w_h)?
            .add(&r.mul(h)?.matmul(&self.u_h)?)?
            .add_row_bias(&self.b_h)?
            .tanh()?;
        // h' = (1 - z) * h + z * cand
        z.affine(-1.0, 1.0)?.mul(h)?.add(&z.mul(&cand)?)
    }
}

fn window_bounds(t: usize, w: usize, len: usize) -> (usize, usize) {
    let half = w / 2;
    (t.saturating_sub(half), (t + half).min(len - 1))
}

/// Runs the GRU over the truncated window around frame `t` from a zero state
/// and returns the final hidden state `[1, c_out]`.
pub fn gru_window(
    x: &FeatureSequence,
    t: usize,
    w: usize,
    params: &GruParams,
    tape: &Tape,
) -> Result<Tensor, EncoderError> {
    if w % 2 == 0 || w == 0 {
        return Err(EncoderError::EvenWindow(w));
    }
    if t >= x.n_frames {
        return Err(EncoderError::FrameOutOfRange {
            t,
            len: x.n_frames,
        });
    }
    let leaves = GruLeaves::enter(params, tape);
    let (lo, hi) = window_bounds(t, w, x.n_frames);
    let mut h = tape.constant(vec![1, params.c_out], vec![0.0; params.c_out])?;
    for f in lo..=hi {
        let xt = tape.constant(vec![1, params.f_dim], x.frame(f).to_vec())?;
        h = leaves.step(&xt, &h)?;
    }
    Ok(h)
}

/// Final window states for every frame, `[T, c_out]`, evaluated in lockstep.
pub fn window_hidden_states(
    x: &FeatureSequence,
    w: usize,
    params: &GruParams,
    tape: &Tape,
) -> Result<Tensor, EncoderError> {
    if w % 2 == 0 || w == 0 {
        return Err(EncoderError::EvenWindow(w));
    }
    let t_len = x.n_frames;
    let leaves = GruLeaves::enter(params, tape);

    let bounds: Vec<(usize, usize)> = (0..t_len).map(|t| window_bounds(t, w, t_len)).collect();
    let lens: Vec<usize> = bounds.iter().map(|&(lo, hi)| hi - lo + 1).collect();
    let max_len = lens.iter().copied().max().unwrap_or(0);
    let min_len = lens.iter().copied().min().unwrap_or(0);

    let mut h = tape.constant(vec![t_len, params.c_out], vec![0.0; t_len * params.c_out])?;
    for k in (0..max_len).rev() {
        // Row t is active once k steps remain inside its window; it then
        // processes frame end - k.
        let mut xk = vec![0.0; t_len * params.f_dim];
        let mut mask = vec![0.0; t_len];
        for t in 0..t_len {
            if lens[t] > k {
                let f = bounds[t].1 - k;
                xk[t * params.f_dim..(t + 1) * params.f_dim].copy_from_slice(x.frame(f));
                mask[t] = 1.0;
            }
        }
        let xk = tape.constant(vec![t_len, params.f_dim], xk)?;
        let next = leaves.step(&xk, &h)?;
        h = if k < min_len {
            next
        } else {
            let inv: Vec<f64> = mask.iter().map(|&m| 1.0 - m).collect();
            next.scale_rows(&mask)?.add(&h.scale_rows(&inv)?)?
        };
    }
    Ok(h)
}

/// Frame-wise action posteriors `[T, A]`: each row is the softmax of the
/// generated head applied to that frame's window state.
pub fn posteriors(
    x: &FeatureSequence,
    head: &GeneratedHead,
    params: &GruParams,
    w: usize,
    tape: &Tape,
) -> Result<Tensor, EncoderError> {
    let wshape = head.w.shape();
    if wshape.len() != 2 || wshape[0] != params.c_out {
        return Err(EncoderError::HeadShape {
            c_out: params.c_out,
            got: wshape,
        });
    }
    let hidden = window_hidden_states(x, w, params, tape)?;
    let logits = hidden.matmul(&head.w)?.add_row_bias(&head.b)?;
    Ok(logits.softmax_rows()?)
}

/// Posterior-to-score conversion: `S[t][a] = log P[t][a] - log prior[a]`,
/// with the prior floored before the log so unseen classes stay finite.
pub fn class_scores(
    posteriors: &Tensor,
    prior: &[f64],
    prior_floor: f64,
    tape: &Tape,
) -> Result<Tensor, EncoderError> {
    let shape = posteriors.shape();
    if shape.len() != 2 || shape[1] != prior.len() {
        return Err(EncoderError::HeadShape {
            c_out: prior.len(),
            got: shape,
        });
    }
    let neg_log_prior: Vec<f64> = prior
        .iter()
        .map(|&p| -(p.max(prior_floor)).ln())
        .collect();
    let bias = tape.constant(vec![prior.len()], neg_log_prior)?;
    Ok(posteriors.log()?.add_row_bias(&bias)?)
}
