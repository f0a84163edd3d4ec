use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{eager, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Low-rank update `ΔW = (alpha / rank) · B · A` for a frozen linear layer
/// `W: d_out × d_in`.
///
/// `A` is `rank × d_in` and starts Gaussian; `B` is `d_out × rank` and
/// starts at zero, so a fresh module leaves its layer unchanged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraModule {
    pub target: String,
    pub rank: usize,
    pub alpha: f64,
    pub a: Tensor,
    pub b: Tensor,
}

impl LoraModule {
    pub fn new(
        target: impl Into<String>,
        d_in: usize,
        d_out: usize,
        rank: usize,
        alpha: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if rank == 0 || alpha <= 0.0 || !alpha.is_finite() {
            return Err(Error::Config(format!(
                "LoRA needs rank >= 1 and alpha > 0 (got rank {rank}, alpha {alpha})"
            )));
        }
        let dist = Normal::new(0.0, 1.0 / (d_in as f64).sqrt()).expect("finite std");
        Ok(Self {
            target: target.into(),
            rank,
            alpha,
            a: Tensor::from_fn(&[rank, d_in], |_| dist.sample(rng)),
            b: Tensor::zeros(&[d_out, rank]),
        })
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn d_in(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.b.shape()[0]
    }

    /// Trainable parameter count `rank · (d_in + d_out)`.
    pub fn num_params(&self) -> usize {
        self.a.numel() + self.b.numel()
    }

    /// `h · Wᵀ + bias + scale · h · Aᵀ · Bᵀ` for rows `h: n × d_in`.
    pub fn forward(&self, weight: &Tensor, bias: Option<&Tensor>, h: &Tensor) -> Result<Tensor> {
        self.check_base(weight)?;
        if h.cols() != self.d_in() {
            return Err(Error::dim("lora_forward", h.shape(), self.a.shape()));
        }
        let n = h.rows();
        let mut y = eager::matmul_t(h.data(), weight.data(), n, self.d_in(), self.d_out());
        if let Some(b) = bias {
            for row in y.chunks_mut(self.d_out()) {
                row.iter_mut().zip(b.data()).for_each(|(x, v)| *x += v);
            }
        }
        let ha = eager::matmul_t(h.data(), self.a.data(), n, self.d_in(), self.rank);
        let hab = eager::matmul_t(&ha, self.b.data(), n, self.rank, self.d_out());
        let s = self.scale();
        y.iter_mut().zip(&hab).for_each(|(x, d)| *x += s * d);
        Tensor::new(vec![n, self.d_out()], y)
    }

    /// `W + scale · B · A`.
    pub fn merge(&self, weight: &Tensor) -> Result<Tensor> {
        self.check_base(weight)?;
        let ba = eager::matmul(
            self.b.data(),
            self.a.data(),
            self.d_out(),
            self.rank,
            self.d_in(),
        );
        let s = self.scale();
        let merged = weight
            .data()
            .iter()
            .zip(&ba)
            .map(|(w, d)| w + s * d)
            .collect();
        Tensor::new(weight.shape().to_vec(), merged)
    }

    fn check_base(&self, weight: &Tensor) -> Result<()> {
        if weight.shape() != [self.d_out(), self.d_in()] {
            return Err(Error::dim(
                "lora",
                weight.shape(),
                &[self.d_out(), self.d_in()],
            ));
        }
        Ok(())
    }
}

/// `scale · x · Aᵀ · Bᵀ` on a tape.
pub fn lora_delta(tape: &mut Tape, x: Var, a: Var, b: Var, scale: f64) -> Result<Var> {
    let xa = tape.matmul_t(x, a)?;
    let xab = tape.matmul_t(xa, b)?;
    Ok(tape.scale(xab, scale))
}
