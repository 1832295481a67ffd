//! Feature-wise transformation module.
//!
//! An FTM slot holds one scale and one shift per channel and maps a feature
//! map `f` to `gamma[c] * f[c] + beta[c]`. Slots start at `gamma = 1`,
//! `beta = 0`, where the transform is exactly the identity and the host
//! network behaves as if no slot were present. Adaptation then learns only
//! these `2C` scalars per slot.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct FtmParams<T> {
    pub layer_id: String,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

impl<T: Real> FtmParams<T> {
    /// Identity-initialized slot over `channels` feature maps.
    pub fn init(layer_id: impl Into<String>, channels: usize) -> Result<Self> {
        if channels == 0 {
            return Err(Error::dim("an FTM slot needs at least one channel"));
        }
        Ok(Self {
            layer_id: layer_id.into(),
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Number of scalars the slot adds to a network (`2C`).
    pub fn param_count(&self) -> usize {
        self.gamma.len() + self.beta.len()
    }

    pub fn is_identity(&self) -> bool {
        self.gamma.iter().all(|&g| g == T::one()) && self.beta.iter().all(|&b| b == T::zero())
    }

    pub fn gamma_tensor(&self) -> Tensor<T> {
        Tensor::new(&[self.gamma.len()], self.gamma.clone()).expect("non-empty slot")
    }

    pub fn beta_tensor(&self) -> Tensor<T> {
        Tensor::new(&[self.beta.len()], self.beta.clone()).expect("non-empty slot")
    }

    /// Apply the transform to a `[N,C,H,W]` tensor outside any tape.
    pub fn apply(&self, f: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.constant(f.clone());
        let g = tape.constant(self.gamma_tensor());
        let b = tape.constant(self.beta_tensor());
        let y = ftm_apply(&mut tape, x, g, b)?;
        Ok(tape.value(y).clone())
    }
}

/// Identity-initialized slot with an empty layer id.
pub fn ftm_init<T: Real>(channels: usize) -> Result<FtmParams<T>> {
    FtmParams::init("", channels)
}

/// Record the channel-affine transform on `tape`.
///
/// Gradients: `d gamma[c] = sum(g * f)` and `d beta[c] = sum(g)` over the
/// batch and spatial positions of channel `c`; `d f = gamma[c] * g`.
pub fn ftm_apply<T: Real>(tape: &mut Tape<T>, f: Var, gamma: Var, beta: Var) -> Result<Var> {
    let shape = tape.value(f).shape();
    if shape.len() != 4 {
        return Err(Error::dim(format!("FTM expects [N,C,H,W] features, got {shape:?}")));
    }
    if tape.value(gamma).len() != shape[1] || tape.value(beta).len() != shape[1] {
        return Err(Error::dim(format!(
            "FTM slot has {} scales and {} shifts for {} channels",
            tape.value(gamma).len(),
            tape.value(beta).len(),
            shape[1]
        )));
    }
    tape.channel_affine(f, gamma, beta)
}
