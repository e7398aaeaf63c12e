//! Central finite-difference gradient checking.
//!
//! The checker re-evaluates a scalar loss with single coordinates of a
//! parameter nudged by ±h and compares the quotient against the analytic
//! gradient produced by the tape. It is the independent oracle for every
//! differentiable operation in this crate.

use crate::tensor::{Param, TensorResult};

/// Default step for central differences on f64 inputs.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Worst observed coordinate of a gradient check.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Relative error with a floor so that near-zero pairs compare on absolute
/// terms rather than exploding.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

/// Checks `d loss / d param` against central finite differences for the given
/// coordinates of one parameter. `loss_fn` must rebuild the forward pass from
/// the parameters' current values, run backward, and return the loss value
/// (its side effect is populating `param`'s gradient).
///
/// Returns the worst coordinate report.
pub fn check_param(
    param: &Param,
    coords: &[usize],
    h: f64,
    mut loss_fn: impl FnMut() -> TensorResult<f64>,
) -> TensorResult<GradReport> {
    param.clear_grad();
    loss_fn()?;
    let analytic = param
        .grad()
        .ok_or_else(|| crate::tensor::TensorError::MissingGrad { param: param.name() })?;
    param.clear_grad();

    let mut worst = GradReport {
        param: param.name(),
        index: 0,
        analytic: 0.0,
        numeric: 0.0,
        rel_err: 0.0,
    };
    for &i in coords {
        param.perturb(i, h);
        let plus = loss_fn()?;
        param.perturb(i, -2.0 * h);
        let minus = loss_fn()?;
        param.perturb(i, h);
        param.clear_grad();

        let numeric = (plus - minus) / (2.0 * h);
        let e = rel_err(analytic[i], numeric);
        if e >= worst.rel_err {
            worst = GradReport {
                param: param.name(),
                index: i,
                analytic: analytic[i],
                numeric,
                rel_err: e,
            };
        }
    }
    Ok(worst)
}

/// Evenly spread sample of up to `max` coordinate indices for a parameter.
pub fn sample_coords(numel: usize, max: usize) -> Vec<usize> {
    if numel <= max {
        return (0..numel).collect();
    }
    (0..max).map(|i| i * numel / max).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Param::randn("a", vec![3, 4], 1.0, &mut rng);
        let b = Param::randn("b", vec![4, 2], 1.0, &mut rng);
        for p in [&a, &b] {
            let report = check_param(p, &sample_coords(p.numel(), 12), DEFAULT_STEP, || {
                let tape = Tape::new();
                let loss = tape
                    .leaf(&a)
                    .matmul(&tape.leaf(&b))?
                    .tanh()?
                    .sum()?;
                loss.backward()?;
                Ok(loss.value())
            })
            .unwrap();
            assert!(report.rel_err < 1e-6, "{report:?}");
        }
    }

    #[test]
    fn layernorm_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Param::randn("x", vec![3, 5], 1.0, &mut rng);
        let gain = Param::randn("gain", vec![5], 0.5, &mut rng);
        let shift = Param::randn("shift", vec![5], 0.5, &mut rng);
        for p in [&x, &gain, &shift] {
            let report = check_param(p, &sample_coords(p.numel(), 15), DEFAULT_STEP, || {
                let tape = Tape::new();
                let y = tape
                    .leaf(&x)
                    .layernorm(&tape.leaf(&gain), &tape.leaf(&shift), 1e-5)?;
                let loss = y.sigmoid()?.sum()?;
                loss.backward()?;
                Ok(loss.value())
            })
            .unwrap();
            assert!(report.rel_err < 1e-5, "{report:?}");
        }
    }

    #[test]
    fn softmax_logsumexp_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Param::randn("x", vec![2, 4], 2.0, &mut rng);
        let report = check_param(&x, &sample_coords(8, 8), DEFAULT_STEP, || {
            let tape = Tape::new();
            let xs = tape.leaf(&x);
            let weight = tape.constant(vec![2, 4], (0..8).map(|i| i as f64 / 7.0).collect())?;
            let a = xs.softmax_rows()?.mul(&weight)?.sum()?;
            let b = xs.logsumexp()?;
            let loss = a.add(&b)?;
            loss.backward()?;
            Ok(loss.value())
        })
        .unwrap();
        assert!(report.rel_err < 1e-6, "{report:?}");
    }

    #[test]
    fn structured_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Param::randn("x", vec![4, 6], 1.0, &mut rng);
        let bias = Param::randn("bias", vec![3], 1.0, &mut rng);
        for p in [&x, &bias] {
            let report = check_param(p, &sample_coords(p.numel(), 12), DEFAULT_STEP, || {
                let tape = Tape::new();
                let xs = tape.leaf(&x);
                let left = xs.slice_cols(0, 3)?;
                let right = xs.slice_cols(3, 3)?;
                let g = tape.concat_rows(&[&left, &right])?.gather_rows(&[1, 1, 5, 0])?;
                let scaled = g.scale_rows(&[0.5, 1.5, -1.0, 2.0])?;
                let y = scaled.add_row_bias(&tape.leaf(&bias))?;
                let loss = y.transpose()?.tanh()?.sum()?;
                loss.backward()?;
                Ok(loss.value())
            })
            .unwrap();
            assert!(report.rel_err < 1e-6, "{report:?}");
        }
    }
}
