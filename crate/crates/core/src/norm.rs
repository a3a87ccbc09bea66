//! Per-channel standardization of 4-channel sample stacks.

use ndarray::{Array4, ArrayD};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::grid::{FieldStack, N_CHANNELS};

/// Mean/standard deviation per channel over an entire training set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: [f64; N_CHANNELS],
    pub std: [f64; N_CHANNELS],
}

impl ChannelStats {
    pub fn identity() -> Self {
        Self {
            mean: [0.0; N_CHANNELS],
            std: [1.0; N_CHANNELS],
        }
    }

    /// Population moments over all samples and pixels of each channel.
    ///
    /// A channel with (near-)zero spread keeps std = 1 so that
    /// standardization stays invertible; the homogeneous-composite case
    /// hits this for the F2 channel.
    pub fn compute(stack: &FieldStack) -> Result<Self> {
        if stack.n_samples() == 0 {
            return Err(Error::InsufficientSamples { need: 1, got: 0 });
        }
        let data = stack.data();
        let mut mean = [0.0; N_CHANNELS];
        let mut std = [1.0; N_CHANNELS];
        for c in 0..N_CHANNELS {
            let ch = data.index_axis(ndarray::Axis(1), c);
            let n = ch.len() as f64;
            let m = ch.sum() / n;
            let v = ch.iter().map(|&x| (x - m) * (x - m)).sum::<f64>() / n;
            mean[c] = m;
            std[c] = if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 };
        }
        Ok(Self { mean, std })
    }

    pub fn validate(&self) -> Result<()> {
        for c in 0..N_CHANNELS {
            if !self.mean[c].is_finite() || !self.std[c].is_finite() || self.std[c] <= 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "channel {c} stats invalid: mean {}, std {}",
                    self.mean[c], self.std[c]
                )));
            }
        }
        Ok(())
    }

    /// `(x - mean) / std` per channel.
    pub fn normalize(&self, data: &Array4<f64>) -> Array4<f64> {
        let mut out = data.clone();
        for c in 0..N_CHANNELS {
            let (m, s) = (self.mean[c], self.std[c]);
            out.index_axis_mut(ndarray::Axis(1), c)
                .mapv_inplace(|x| (x - m) / s);
        }
        out
    }

    /// `x * std + mean` per channel.
    pub fn denormalize(&self, data: &Array4<f64>) -> Array4<f64> {
        let mut out = data.clone();
        for c in 0..N_CHANNELS {
            let (m, s) = (self.mean[c], self.std[c]);
            out.index_axis_mut(ndarray::Axis(1), c)
                .mapv_inplace(|x| x * s + m);
        }
        out
    }

    /// Differentiable denormalization of a standardized `[B,4,H,W]` var.
    pub fn denormalize_graph(&self, tape: &mut Tape, x_std: Var) -> Var {
        let shape = tape.value(x_std).shape().to_vec();
        assert_eq!(shape[1], N_CHANNELS);
        let s = tape.constant(
            ArrayD::from_shape_vec(ndarray::IxDyn(&[N_CHANNELS]), self.std.to_vec()).unwrap(),
        );
        let m = tape.constant(
            ArrayD::from_shape_vec(ndarray::IxDyn(&[N_CHANNELS]), self.mean.to_vec()).unwrap(),
        );
        let sb = tape.broadcast_channel(s, &shape);
        let mb = tape.broadcast_channel(m, &shape);
        let scaled = tape.mul(x_std, sb);
        tape.add(scaled, mb)
    }
}
