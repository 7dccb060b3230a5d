//! The conditional denoiser `ε_θ(z, I_t, γ)`: a TMFA block producing the
//! conditioning features `z` and a U-Net over the 6-channel stack `[z ‖ I_t]`.

mod params;
pub mod tmfa;
pub mod unet;

pub use params::{Binding, ParamId, ParamSet};
pub use tmfa::{bottleneck_width, TmfaBlock, DEFAULT_REDUCTION};
pub use unet::{gamma_embedding, group_count, UNet};

use rand::Rng;

use crate::diffusion::{Denoiser, TapeDenoiser};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Desk-scale channel widths of the four U-Net levels.
pub const DEFAULT_WIDTHS: [usize; 4] = [16, 32, 64, 64];

/// Modality channels, also the number of predicted noise channels.
pub const MODALITIES: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetConfig {
    pub widths: Vec<usize>,
    pub reduction: usize,
    pub tmfa_enabled: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            widths: DEFAULT_WIDTHS.to_vec(),
            reduction: DEFAULT_REDUCTION,
            tmfa_enabled: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FusionNet {
    config: NetConfig,
    params: ParamSet,
    tmfa: Option<TmfaBlock>,
    unet: UNet,
}

impl FusionNet {
    pub fn new(config: NetConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut params = ParamSet::new();
        let tmfa = if config.tmfa_enabled {
            Some(TmfaBlock::new(&mut params, MODALITIES, config.reduction, rng)?)
        } else {
            None
        };
        let unet = UNet::new(&mut params, 2 * MODALITIES, MODALITIES, &config.widths, rng)?;
        Ok(FusionNet {
            config,
            params,
            tmfa,
            unet,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn tmfa(&self) -> Option<&TmfaBlock> {
        self.tmfa.as_ref()
    }

    /// Exact number of trainable scalars.
    pub fn count_parameters(&self) -> usize {
        self.params.count()
    }

    /// Spatial sizes accepted by the U-Net must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        self.unet.size_multiple()
    }

    /// Records the parameters on `tape`, trainable or frozen.
    pub fn bind<'a>(&'a self, tape: &mut Tape, trainable: bool) -> BoundNet<'a> {
        BoundNet {
            net: self,
            binding: self.params.bind(tape, trainable),
        }
    }

    /// Wraps explicit tape leaves, one per parameter in registration order.
    pub fn bind_vars(&self, vars: Vec<Var>) -> BoundNet<'_> {
        BoundNet {
            net: self,
            binding: Binding::from_vars(vars),
        }
    }

    /// Single-image `ε_θ(z, I_t, γ)` on `[3,H,W]` tensors.
    pub fn eps_theta(&self, z: &Tensor, latent: &Tensor, gamma: f64) -> Result<Tensor> {
        let batched = |t: &Tensor| -> Result<Tensor> {
            match *t.shape() {
                [c, h, w] => t.clone().reshape(&[1, c, h, w]),
                ref s => Err(Error::shape("eps_theta", format!("expected [3,H,W], got {s:?}"))),
            }
        };
        let out = Denoiser::predict_noise(self, &batched(z)?, &batched(latent)?, &[gamma])?;
        out.reshape(latent.shape())
    }

    /// Zeroes the diffusion head, as at initialisation.
    pub fn zero_head(&mut self) {
        let (w, b) = self.unet.head_ids();
        for id in [w, b] {
            self.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// A [`FusionNet`] whose parameters are recorded on a specific tape.
pub struct BoundNet<'a> {
    net: &'a FusionNet,
    binding: Binding,
}

impl BoundNet<'_> {
    pub fn binding(&self) -> &Binding {
        &self.binding
    }
}

impl TapeDenoiser for BoundNet<'_> {
    fn condition(&self, tape: &mut Tape, modalities: Var) -> Result<Var> {
        match &self.net.tmfa {
            Some(block) => block.forward(tape, &self.binding, modalities),
            None => {
                let shape = tape.shape(modalities);
                if shape.len() != 4 || shape[1] != MODALITIES {
                    return Err(Error::shape("condition", format!("expected [N,3,H,W], got {shape:?}")));
                }
                Ok(modalities)
            }
        }
    }

    fn predict_noise(&self, tape: &mut Tape, cond: Var, latent: Var, gammas: &[f64]) -> Result<Var> {
        let (cs, ls) = (tape.shape(cond), tape.shape(latent));
        if cs.len() != 4 || cs != ls {
            return Err(Error::shape(
                "eps_theta",
                format!("conditioning {cs:?} and latent {ls:?} must both be [N,3,H,W]"),
            ));
        }
        if gammas.iter().any(|&g| !(g > 0.0 && g <= 1.0)) {
            return Err(Error::InvalidArgument(format!("noise levels must lie in (0, 1], got {gammas:?}")));
        }
        let stacked = tape.concat_channels(&[cond, latent])?;
        self.net.unet.forward(tape, &self.binding, stacked, gammas)
    }
}

impl Denoiser for FusionNet {
    fn condition(&self, modalities: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let m = tape.constant_ref(modalities);
        let z = TapeDenoiser::condition(&bound, &mut tape, m)?;
        Ok(tape.tensor(z))
    }

    fn predict_noise(&self, cond: &Tensor, latent: &Tensor, gammas: &[f64]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let c = tape.constant_ref(cond);
        let l = tape.constant_ref(latent);
        let eps = TapeDenoiser::predict_noise(&bound, &mut tape, c, l, gammas)?;
        Ok(tape.tensor(eps))
    }
}

/// Stacks three `[1,H,W]` planes into `[3,H,W]` in `(x, y, s)` order.
pub fn concat_modalities(x: &Tensor, y: &Tensor, s: &Tensor) -> Result<Tensor> {
    let dims = |t: &Tensor| match *t.shape() {
        [1, h, w] => Ok((h, w)),
        ref sh => Err(Error::shape("concat_modalities", format!("expected [1,H,W], got {sh:?}"))),
    };
    let (h, w) = dims(x)?;
    for t in [y, s] {
        if dims(t)? != (h, w) {
            return Err(Error::shape(
                "concat_modalities",
                format!("{:?} vs {:?}", x.shape(), t.shape()),
            ));
        }
    }
    let data = [x, y, s].iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::new(&[3, h, w], data)
}

/// Inverse of [`concat_modalities`].
pub fn split_modalities(c: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let [3, h, w] = *c.shape() else {
        return Err(Error::shape("split_modalities", format!("expected [3,H,W], got {:?}", c.shape())));
    };
    let plane = |i: usize| Tensor::new(&[1, h, w], c.data()[i * h * w..(i + 1) * h * w].to_vec());
    Ok((plane(0)?, plane(1)?, plane(2)?))
}
