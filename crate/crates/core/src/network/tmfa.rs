//! Tri-modal fusion attention: squeeze-and-excitation over the stacked
//! modality channels.

use rand::Rng;

use super::params::{Binding, ParamId, ParamSet};
use crate::error::{Error, Result};
use crate::tensor::{kaiming_init, Tape, Tensor, Var};

pub const DEFAULT_REDUCTION: usize = 16;

#[derive(Debug, Clone)]
pub struct TmfaBlock {
    channels: usize,
    hidden: usize,
    fc1_w: ParamId,
    fc1_b: ParamId,
    fc2_w: ParamId,
    fc2_b: ParamId,
}

/// Bottleneck width `⌈C / r⌉`, never below one unit.
pub fn bottleneck_width(channels: usize, reduction: usize) -> usize {
    channels.div_ceil(reduction.max(1)).max(1)
}

impl TmfaBlock {
    pub fn new(params: &mut ParamSet, channels: usize, reduction: usize, rng: &mut impl Rng) -> Result<Self> {
        if channels == 0 || reduction == 0 {
            return Err(Error::InvalidArgument("TMFA needs channels >= 1 and reduction >= 1".into()));
        }
        let hidden = bottleneck_width(channels, reduction);
        let fc1_w = params.add("tmfa.fc1.weight", kaiming_init(&[hidden, channels], channels, rng)?);
        let fc1_b = params.add("tmfa.fc1.bias", Tensor::zeros(&[hidden]));
        let fc2_w = params.add("tmfa.fc2.weight", kaiming_init(&[channels, hidden], hidden, rng)?);
        let fc2_b = params.add("tmfa.fc2.bias", Tensor::zeros(&[channels]));
        Ok(TmfaBlock {
            channels,
            hidden,
            fc1_w,
            fc1_b,
            fc2_w,
            fc2_b,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// Number of scalars in both fully connected layers.
    pub fn param_count(&self) -> usize {
        2 * self.channels * self.hidden + self.hidden + self.channels
    }

    /// Per-channel gates `sigmoid(fc2(relu(fc1(GAP(C)))))`, shape `[N, C]`.
    pub fn attention_weights(&self, tape: &mut Tape, bind: &Binding, c: Var) -> Result<Var> {
        let shape = tape.shape(c);
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(Error::shape(
                "tmfa",
                format!("block expects {} channels, input is {shape:?}", self.channels),
            ));
        }
        let squeezed = tape.global_avg_pool(c)?;
        let h = tape.dense(squeezed, bind.var(self.fc1_w), Some(bind.var(self.fc1_b)))?;
        let h = tape.relu(h)?;
        let e = tape.dense(h, bind.var(self.fc2_w), Some(bind.var(self.fc2_b)))?;
        tape.sigmoid(e)
    }

    /// Recalibrates each channel of `c` by its attention weight.
    pub fn forward(&self, tape: &mut Tape, bind: &Binding, c: Var) -> Result<Var> {
        let w = self.attention_weights(tape, bind, c)?;
        tape.channel_mul(c, w)
    }
}
