//! Two-branch hypernetwork with late fusion.
//!
//! The classifier head of the temporal encoder is not trained directly.
//! One branch maps each of the `m` learned context-independent embeddings
//! `z_i` through a shared two-layer net; the outputs are reshaped row-major
//! into `(c_out/m) x A` blocks and stacked into the weight matrix `W^z`.
//! The other branch does the same with `u_i + s`, where `s` is the per-video
//! context vector, giving `W^s`. The head weight is the element-wise product
//! `W = W^z .* W^s`; the bias is fused the same way from single-head branches.

use rand::Rng;
use thiserror::Error;

use crate::tensor::{Param, Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum HypernetError {
    #[error("c_out {c_out} must be divisible by the head count {m}")]
    Divisibility { c_out: usize, m: usize },
    #[error("context vector has shape {got:?}, expected [1, {expected}]")]
    ContextDim { expected: usize, got: Vec<usize> },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HypernetConfig {
    /// Knowledge dimension D shared by z, u, and s.
    pub d: usize,
    /// Hidden width of each branch net.
    pub d_hidden: usize,
    /// Head count m.
    pub m: usize,
    /// Rows of the generated weight (the temporal encoder's feature dim).
    pub c_out: usize,
    /// Columns of the generated weight (number of action classes).
    pub n_actions: usize,
}

/// Two-layer branch net: Linear, ReLU, Linear. A literal stack of two linear
/// maps would collapse to one, so the nonlinearity is load-bearing.
pub struct BranchNet {
    pub w1: Param,
    pub b1: Param,
    pub w2: Param,
    pub b2: Param,
}

impl BranchNet {
    fn new(prefix: &str, d_in: usize, d_hidden: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            w1: Param::randn(
                format!("{prefix}.w1"),
                vec![d_in, d_hidden],
                1.0 / (d_in as f64).sqrt(),
                rng,
            ),
            b1: Param::randn(format!("{prefix}.b1"), vec![d_hidden], 0.1, rng),
            w2: Param::randn(
                format!("{prefix}.w2"),
                vec![d_hidden, d_out],
                1.0 / (d_hidden as f64).sqrt(),
                rng,
            ),
            b2: Param::zeros(format!("{prefix}.b2"), vec![d_out]),
        }
    }

    pub fn forward(&self, input: &Tensor, tape: &Tape) -> Result<Tensor, TensorError> {
        input
            .matmul(&tape.leaf(&self.w1))?
            .add_row_bias(&tape.leaf(&self.b1))?
            .relu()?
            .matmul(&tape.leaf(&self.w2))?
            .add_row_bias(&tape.leaf(&self.b2))
    }

    fn params(&self) -> [Param; 4] {
        [
            self.w1.clone(),
            self.b1.clone(),
            self.w2.clone(),
            self.b2.clone(),
        ]
    }
}

/// The learnable embedding lists: `z` feeds the context-independent branch,
/// `u` the context-dependent one.
pub struct KnowledgeBank {
    pub z: Vec<Param>,
    pub u: Vec<Param>,
}

impl KnowledgeBank {
    fn new(d: usize, m: usize, rng: &mut impl Rng) -> Self {
        Self {
            z: (0..m)
                .map(|i| Param::randn(format!("bank.z.{i}"), vec![1, d], 0.02, rng))
                .collect(),
            u: (0..m)
                .map(|i| Param::randn(format!("bank.u.{i}"), vec![1, d], 0.02, rng))
                .collect(),
        }
    }
}

/// Generated per-video classifier parameters.
pub struct GeneratedHead {
    /// `[c_out, n_actions]`
    pub w: Tensor,
    /// `[1, n_actions]`
    pub b: Tensor,
}

pub struct HyperNetwork {
    pub cfg: HypernetConfig,
    pub bank: KnowledgeBank,
    /// Weight branches (shared across heads).
    pub h_ind: BranchNet,
    pub h_dep: BranchNet,
    /// Bias branches (single-head; A need not divide by m).
    pub hb_ind: BranchNet,
    pub hb_dep: BranchNet,
}

impl HyperNetwork {
    pub fn new(cfg: HypernetConfig, rng: &mut impl Rng) -> Result<Self, HypernetError> {
        if cfg.m == 0 || cfg.c_out % cfg.m != 0 {
            return Err(HypernetError::Divisibility {
                c_out: cfg.c_out,
                m: cfg.m,
            });
        }
        let block_len = (cfg.c_out / cfg.m) * cfg.n_actions;
        Ok(Self {
            cfg,
            bank: KnowledgeBank::new(cfg.d, cfg.m, rng),
            h_ind: BranchNet::new("hyper.h_ind", cfg.d, cfg.d_hidden, block_len, rng),
            h_dep: BranchNet::new("hyper.h_dep", cfg.d, cfg.d_hidden, block_len, rng),
            hb_ind: BranchNet::new("hyper.hb_ind", cfg.d, cfg.d_hidden, cfg.n_actions, rng),
            hb_dep: BranchNet::new("hyper.hb_dep", cfg.d, cfg.d_hidden, cfg.n_actions, rng),
        })
    }

    pub fn named_params(&self) -> Vec<Param> {
        let mut out: Vec<Param> = Vec::new();
        out.extend(self.bank.z.iter().cloned());
        out.extend(self.bank.u.iter().cloned());
        for net in [&self.h_ind, &self.h_dep, &self.hb_ind, &self.hb_dep] {
            out.extend(net.params());
        }
        out
    }

    fn check_context(&self, s: &Tensor) -> Result<(), HypernetError> {
        if s.shape() != vec![1, self.cfg.d] {
            return Err(HypernetError::ContextDim {
                expected: self.cfg.d,
                got: s.shape(),
            });
        }
        Ok(())
    }

    fn stack_heads(
        &self,
        tape: &Tape,
        head_inputs: Vec<Tensor>,
        net: &BranchNet,
    ) -> Result<Tensor, HypernetError> {
        let rows = self.cfg.c_out / self.cfg.m;
        let mut blocks = Vec::with_capacity(self.cfg.m);
        for input in &head_inputs {
            let v = net.forward(input, tape)?;
            blocks.push(v.reshape(vec![rows, self.cfg.n_actions])?);
        }
        let refs: Vec<&Tensor> = blocks.iter().collect();
        Ok(tape.concat_rows(&refs)?)
    }

    /// `W^z`: every `z_i` through the shared net, reshaped row-major and
    /// stacked vertically in head order.
    pub fn independent_weights(&self, tape: &Tape) -> Result<Tensor, HypernetError> {
        let inputs = self.bank.z.iter().map(|p| tape.leaf(p)).collect();
        self.stack_heads(tape, inputs, &self.h_ind)
    }

    /// `W^s`: identical pipeline with head inputs `u_i + s`.
    pub fn dependent_weights(&self, s: &Tensor, tape: &Tape) -> Result<Tensor, HypernetError> {
        self.check_context(s)?;
        let inputs = self
            .bank
            .u
            .iter()
            .map(|p| tape.leaf(p).add(s))
            .collect::<Result<Vec<_>, _>>()?;
        self.stack_heads(tape, inputs, &self.h_dep)
    }

    /// Mean of the `z` list; the single-head bias branch input.
    fn mean_z(&self, tape: &Tape) -> Result<Tensor, TensorError> {
        let leaves: Vec<Tensor> = self.bank.z.iter().map(|p| tape.leaf(p)).collect();
        let refs: Vec<&Tensor> = leaves.iter().collect();
        let stacked = tape.concat_rows(&refs)?;
        let weights = tape.constant(vec![1, self.cfg.m], vec![1.0 / self.cfg.m as f64; self.cfg.m])?;
        weights.matmul(&stacked)
    }

    /// Full head generation: both weight branches fused element-wise, both
    /// bias branches fused element-wise.
    pub fn generate_head(&self, s: &Tensor, tape: &Tape) -> Result<GeneratedHead, HypernetError> {
        self.check_context(s)?;
        let w_ind = self.independent_weights(tape)?;
        let w_dep = self.dependent_weights(s, tape)?;
        let w = w_ind.mul(&w_dep)?;

        let b_ind = self.hb_ind.forward(&self.mean_z(tape)?, tape)?;
        let b_dep = self.hb_dep.forward(s, tape)?;
        let b = b_ind.mul(&b_dep)?;
        Ok(GeneratedHead { w, b })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> HypernetConfig {
        HypernetConfig {
            d: 6,
            d_hidden: 10,
            m: 2,
            c_out: 4,
            n_actions: 3,
        }
    }

    fn zero_context(tape: &Tape, d: usize) -> Tensor {
        tape.constant(vec![1, d], vec![0.0; d]).unwrap()
    }

    fn random_context(tape: &Tape, d: usize, rng: &mut ChaCha8Rng) -> Tensor {
        tape.constant(vec![1, d], (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn divisibility_checked_at_build_time() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = HypernetConfig {
            c_out: 5,
            m: 2,
            ..small_cfg()
        };
        assert!(matches!(
            HyperNetwork::new(cfg, &mut rng),
            Err(HypernetError::Divisibility { .. })
        ));
    }

    #[test]
    fn single_head_is_one_reshape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = HypernetConfig {
            m: 1,
            ..small_cfg()
        };
        let net = HyperNetwork::new(cfg, &mut rng).unwrap();
        let tape = Tape::new();
        let w = net.independent_weights(&tape).unwrap();
        assert_eq!(w.shape(), vec![4, 3]);
        let direct = net
            .h_ind
            .forward(&tape.leaf(&net.bank.z[0]), &tape)
            .unwrap();
        assert_eq!(w.values(), direct.values());
    }

    #[test]
    fn perturbing_one_head_only_touches_its_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = HyperNetwork::new(small_cfg(), &mut rng).unwrap();
        let before = net.independent_weights(&Tape::new()).unwrap().values();
        net.bank.z[1].perturb(3, 0.5);
        let after = net.independent_weights(&Tape::new()).unwrap().values();
        // c_out=4, m=2, A=3: rows 0-1 are head 1, rows 2-3 are head 2.
        assert_eq!(before[..6], after[..6], "head-1 rows must be bit-identical");
        assert_ne!(before[6..], after[6..], "head-2 rows must move");
    }

    #[test]
    fn zero_context_reduces_dependent_to_independent_pipeline() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = HyperNetwork::new(small_cfg(), &mut rng).unwrap();
        let tape = Tape::new();
        let s = zero_context(&tape, 6);
        let w_dep = net.dependent_weights(&s, &tape).unwrap();
        // Same pipeline with the u list pushed through the dependent net.
        let inputs: Vec<Tensor> = net.bank.u.iter().map(|p| tape.leaf(p)).collect();
        let w_direct = net.stack_heads(&tape, inputs, &net.h_dep).unwrap();
        assert_eq!(w_dep.values(), w_direct.values());
    }

    #[test]
    fn different_contexts_give_different_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = HyperNetwork::new(small_cfg(), &mut rng).unwrap();
        let tape = Tape::new();
        let s1 = random_context(&tape, 6, &mut rng);
        let s2 = random_context(&tape, 6, &mut rng);
        let w1 = net.dependent_weights(&s1, &tape).unwrap().values();
        let w2 = net.dependent_weights(&s2, &tape).unwrap().values();
        let delta: f64 = w1.iter().zip(&w2).map(|(a, b)| (a - b).abs()).sum();
        assert!(delta > 0.0);
    }

    #[test]
    fn fuse_identity_and_annihilator() {
        let tape = Tape::new();
        let a = tape
            .constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0])
            .unwrap();
        let ones = tape.constant(vec![2, 2], vec![1.0; 4]).unwrap();
        let zeros = tape.constant(vec![2, 2], vec![0.0; 4]).unwrap();
        assert_eq!(a.mul(&ones).unwrap().values(), a.values());
        assert_eq!(zeros.mul(&a).unwrap().values(), vec![0.0; 4]);

        let b = tape
            .constant(vec![2, 2], vec![2.0, 0.0, 1.0, 1.0])
            .unwrap();
        assert_eq!(a.mul(&b).unwrap().values(), vec![2.0, 0.0, 3.0, 4.0]);
        assert_eq!(b.mul(&a).unwrap().values(), a.mul(&b).unwrap().values());
    }

    #[test]
    fn generated_head_shapes_at_reference_dimensions() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = HypernetConfig {
            d: 128,
            d_hidden: 256,
            m: 8,
            c_out: 64,
            n_actions: 48,
        };
        let net = HyperNetwork::new(cfg, &mut rng).unwrap();
        let tape = Tape::new();
        let s = zero_context(&tape, 128);
        let head = net.generate_head(&s, &tape).unwrap();
        assert_eq!(head.w.shape(), vec![64, 48]);
        assert_eq!(head.b.shape(), vec![1, 48]);
    }

    #[test]
    fn head_generation_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let net = HyperNetwork::new(small_cfg(), &mut rng).unwrap();
        let mut rng2 = ChaCha8Rng::seed_from_u64(7);
        let run = |rng: &mut ChaCha8Rng| {
            let tape = Tape::new();
            let s = random_context(&tape, 6, rng);
            let head = net.generate_head(&s, &tape).unwrap();
            (head.w.values(), head.b.values())
        };
        let a = run(&mut rng2);
        let mut rng3 = ChaCha8Rng::seed_from_u64(7);
        let b = run(&mut rng3);
        assert_eq!(a, b);
    }

    #[test]
    fn sanity_identity_when_u_equals_z_and_s_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let net = HyperNetwork::new(small_cfg(), &mut rng).unwrap();
        // Make the dependent branch identical to the independent one.
        for (u, z) in net.bank.u.iter().zip(&net.bank.z) {
            u.set_values(z.values()).unwrap();
        }
        for (pd, pi) in net.h_dep.params().iter().zip(net.h_ind.params()) {
            pd.set_values(pi.values()).unwrap();
        }
        let tape = Tape::new();
        let s = zero_context(&tape, 6);
        let w_ind = net.independent_weights(&tape).unwrap().values();
        let w_dep = net.dependent_weights(&s, &tape).unwrap().values();
        assert_eq!(w_ind, w_dep);
        let head = net.generate_head(&s, &tape).unwrap();
        let expect: Vec<f64> = w_ind.iter().map(|v| v * v).collect();
        assert_eq!(head.w.values(), expect);
    }

    #[test]
    fn reshape_convention_fixed_row_major() {
        let tape = Tape::new();
        let v = tape
            .constant(vec![1, 6], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
            .unwrap();
        let m = v.reshape(vec![2, 3]).unwrap();
        assert_eq!(m.values(), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(m.shape(), vec![2, 3]);
    }

    #[test]
    fn gradients_through_full_generation() {
        use crate::gradcheck::{check_param, sample_coords, DEFAULT_STEP};
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = HyperNetwork::new(small_cfg(), &mut rng).unwrap();
        let s_param = Param::randn("s", vec![1, 6], 0.5, &mut rng);
        let mut all = net.named_params();
        all.push(s_param.clone());
        for p in all {
            let report = check_param(&p, &sample_coords(p.numel(), 5), DEFAULT_STEP, || {
                let tape = Tape::new();
                let s = tape.leaf(&s_param);
                let head = net
                    .generate_head(&s, &tape)
                    .map_err(|_| crate::tensor::TensorError::EmptyInput { op: "head" })?;
                let loss = head.w.tanh()?.sum()?.add(&head.b.tanh()?.sum()?)?;
                loss.backward()?;
                Ok(loss.value())
            })
            .unwrap();
            assert!(report.rel_err < 1e-4, "{report:?}");
        }
    }
}
