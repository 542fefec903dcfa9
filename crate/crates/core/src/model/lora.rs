//! Low-rank residual adapters: `W = W_quantized + U * V` with `U`, `V` kept
//! in full precision. `V` starts at zero so attaching an adapter does not
//! change the forward pass.

use crate::error::{Error, Result};
use crate::quant::QuantKind;
use crate::tensor::{shared, SharedTensor, Tensor};

use super::EncoderModel;

#[derive(Debug, Clone)]
pub struct LoRaAdapter {
    /// `[d_in, rank]`
    pub u: SharedTensor,
    /// `[rank, d_out]`
    pub v: SharedTensor,
    pub rank: usize,
}

impl LoRaAdapter {
    pub fn init(
        d_in: usize,
        d_out: usize,
        rank: usize,
        init_scale: f32,
        rng: &mut impl rand::Rng,
    ) -> Result<Self> {
        if rank == 0 {
            return Err(Error::config("LoRa rank must be >= 1"));
        }
        Ok(LoRaAdapter {
            u: shared(Tensor::randn(vec![d_in, rank], init_scale, rng).with_grad()),
            v: shared(Tensor::zeros(vec![rank, d_out]).with_grad()),
            rank,
        })
    }

    pub(crate) fn from_tensors(u: Tensor, v: Tensor) -> Result<Self> {
        if u.shape().len() != 2 || v.shape().len() != 2 || u.shape()[1] != v.shape()[0] {
            return Err(Error::dim(format!(
                "adapter shapes {:?} / {:?} do not compose",
                u.shape(),
                v.shape()
            )));
        }
        let rank = u.shape()[1];
        Ok(LoRaAdapter {
            u: shared(u.with_grad()),
            v: shared(v.with_grad()),
            rank,
        })
    }

    pub fn deep_clone(&self) -> Self {
        LoRaAdapter {
            u: shared(self.u.borrow().clone()),
            v: shared(self.v.borrow().clone()),
            rank: self.rank,
        }
    }

    pub fn param_count(&self) -> usize {
        self.u.borrow().numel() + self.v.borrow().numel()
    }
}

/// Attaches a rank-`r` adapter to every quantized weight matrix (attention
/// and FFN projections, plus the token embedding when it is quantized).
/// `U` is seeded Gaussian, `V` is zero, so the forward pass is unchanged
/// until training moves `V`.
pub fn attach_lora(
    model: &mut EncoderModel,
    rank: usize,
    init_scale: f32,
    rng: &mut impl rand::Rng,
) -> Result<()> {
    if rank == 0 {
        return Err(Error::config("LoRa rank must be >= 1"));
    }
    for (_, lin) in model.quantizable_matrices_mut() {
        if lin.spec.kind != QuantKind::None {
            let shape = lin.w.borrow().shape().to_vec();
            lin.lora = Some(LoRaAdapter::init(shape[0], shape[1], rank, init_scale, rng)?);
        }
    }
    if model.tok_emb_spec.kind != QuantKind::None {
        let shape = model.tok_emb.borrow().shape().to_vec();
        model.tok_emb_lora = Some(LoRaAdapter::init(shape[0], shape[1], rank, init_scale, rng)?);
    }
    Ok(())
}
