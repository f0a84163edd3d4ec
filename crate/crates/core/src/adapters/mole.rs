use serde::{Deserialize, Serialize};

use super::LoraModule;
use crate::autodiff::{eager, Tensor};
use crate::error::{Error, Result};

/// Index of the largest routing logit, ties to the lowest index.
pub fn route_logits(logits: &[f64]) -> usize {
    eager::argmax(logits)
}

/// `k* = argmax_k (router · h)_k` for a router `K × d_h`.
pub fn mole_route(router: &Tensor, h: &[f64]) -> Result<usize> {
    let (k, d) = (router.rows(), router.cols());
    if h.len() != d {
        return Err(Error::dim("mole_route", router.shape(), &[h.len()]));
    }
    let logits = eager::matmul_t(h, router.data(), 1, d, k);
    Ok(route_logits(&logits))
}

/// A bank of `K` LoRA experts over one FFN plus the router choosing one of
/// them per token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoleFfn {
    pub experts: Vec<LoraModule>,
    /// `K × d_h`.
    pub router: Tensor,
}

impl MoleFfn {
    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    /// `ffn(h) + E_{k*}(h)` for one token, with `k*` from [`mole_route`].
    /// Experts map `d_h → d_h` and read the same input as the FFN.
    pub fn forward(
        &self,
        ffn: impl Fn(&[f64]) -> Vec<f64>,
        h: &[f64],
    ) -> Result<(Vec<f64>, usize)> {
        let k = mole_route(&self.router, h)?;
        let e = &self.experts[k];
        let zero = Tensor::zeros(&[e.d_out(), e.d_in()]);
        let row = Tensor::new(vec![1, h.len()], h.to_vec())?;
        let delta = e.forward(&zero, None, &row)?;
        let mut out = ffn(h);
        if out.len() != delta.numel() {
            return Err(Error::dim("mole_forward", &[out.len()], delta.shape()));
        }
        out.iter_mut().zip(delta.data()).for_each(|(x, d)| *x += d);
        Ok((out, k))
    }
}
