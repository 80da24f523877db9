//! Dense and GRU layers recorded on a [`Graph`], plus the two ways of
//! injecting Gaussian noise into a recurrent layer.
//!
//! All layer functions work on row batches: `x` is `[B×in]` and hidden
//! states are `[B×H]`. A single sequence frame is simply `B = 1`.

use crate::error::{Error, Result};
use crate::tensor::{Element, Graph, NodeId, ParamSet, Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Softmax,
    Linear,
}

/// Where a recurrent layer receives fresh noise.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NoiseVariant {
    /// Noise only on feed-forward layers; recurrent layers add none.
    Ffn,
    /// Recurrent layers also perturb their candidate preactivation, while
    /// the recurrent carry stays un-noised.
    Rn,
}

impl NoiseVariant {
    pub fn name(self) -> &'static str {
        match self {
            NoiseVariant::Ffn => "FFN",
            NoiseVariant::Rn => "RN",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_uppercase().as_str() {
            "FFN" => Some(NoiseVariant::Ffn),
            "RN" => Some(NoiseVariant::Rn),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseScheme {
    pub variant: NoiseVariant,
    pub sigma: f64,
}

impl NoiseScheme {
    pub fn validate(&self) -> Result<()> {
        if self.sigma >= 0.0 && self.sigma.is_finite() {
            Ok(())
        } else {
            Err(Error::Argument(format!("noise std must be >= 0, got {}", self.sigma)))
        }
    }
}

/// Graph handles of a dense layer: `W: [out×in]`, `b: [out]`.
#[derive(Clone, Copy, Debug)]
pub struct DenseParams {
    pub w: NodeId,
    pub b: NodeId,
    pub activation: Activation,
}

impl DenseParams {
    pub fn lookup<T: Element>(g: &Graph<T>, prefix: &str, activation: Activation) -> Result<Self> {
        Ok(DenseParams {
            w: g.param_id(&format!("{prefix}.w"))?,
            b: g.param_id(&format!("{prefix}.b"))?,
            activation,
        })
    }

    pub fn init<T: Element>(
        params: &mut ParamSet<T>,
        prefix: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut Rng,
    ) -> Result<()> {
        params.insert(format!("{prefix}.w"), scaled_normal(rng, [outputs, inputs], inputs)?)?;
        params.insert(format!("{prefix}.b"), Tensor::zeros([outputs]))?;
        Ok(())
    }
}

/// `N(0, 1/fan_in)` initialisation.
pub(crate) fn scaled_normal<T: Element>(rng: &mut Rng, shape: [usize; 2], fan_in: usize) -> Result<Tensor<T>> {
    rng.gaussian(shape, 1.0 / (fan_in.max(1) as f64).sqrt())
}

/// `z = x·Wᵀ + b (+ n)`, `h = activation(z)`. Returns `(z, h)`.
///
/// A zero noise std leaves the graph exactly as in a clean call.
pub fn dense_forward<T: Element>(
    g: &mut Graph<T>,
    x: NodeId,
    p: &DenseParams,
    noise: Option<(f64, &mut Rng)>,
) -> Result<(NodeId, NodeId)> {
    let xw = g.matmul_nt(x, p.w)?;
    let mut z = g.add_row(xw, p.b)?;
    if let Some((sigma, rng)) = noise {
        z = add_noise(g, z, sigma, rng)?;
    }
    let h = activate(g, z, p.activation)?;
    Ok((z, h))
}

pub(crate) fn activate<T: Element>(g: &mut Graph<T>, z: NodeId, act: Activation) -> Result<NodeId> {
    match act {
        Activation::Tanh => g.tanh(z),
        Activation::Softmax => g.softmax_rows(z),
        Activation::Linear => Ok(z),
    }
}

/// `z + n` with `n ~ N(0, sigma²)`; returns `z` itself when `sigma == 0`.
pub fn add_noise<T: Element>(g: &mut Graph<T>, z: NodeId, sigma: f64, rng: &mut Rng) -> Result<NodeId> {
    if sigma < 0.0 || !sigma.is_finite() {
        return Err(Error::Argument(format!("noise std must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(z);
    }
    let shape = g.shape(z).to_vec();
    let n = g.input(rng.gaussian(shape, sigma)?);
    g.add(z, n)
}

pub const GRU_TENSORS: [&str; 9] = ["wz", "wr", "wc", "uz", "ur", "uc", "bz", "br", "bc"];

/// Graph handles of a GRU layer. `w*: [H×D]` input weights, `u*: [H×H]`
/// recurrent weights, `b*: [H]` biases for the update (`z`), reset (`r`) and
/// candidate (`c`) paths.
#[derive(Clone, Copy, Debug)]
pub struct GruParams {
    pub wz: NodeId,
    pub wr: NodeId,
    pub wc: NodeId,
    pub uz: NodeId,
    pub ur: NodeId,
    pub uc: NodeId,
    pub bz: NodeId,
    pub br: NodeId,
    pub bc: NodeId,
}

impl GruParams {
    pub fn lookup<T: Element>(g: &Graph<T>, prefix: &str) -> Result<Self> {
        let id = |n: &str| g.param_id(&format!("{prefix}.{n}"));
        Ok(GruParams {
            wz: id("wz")?,
            wr: id("wr")?,
            wc: id("wc")?,
            uz: id("uz")?,
            ur: id("ur")?,
            uc: id("uc")?,
            bz: id("bz")?,
            br: id("br")?,
            bc: id("bc")?,
        })
    }

    pub fn init<T: Element>(
        params: &mut ParamSet<T>,
        prefix: &str,
        inputs: usize,
        hidden: usize,
        rng: &mut Rng,
    ) -> Result<()> {
        for w in ["wz", "wr", "wc"] {
            params.insert(format!("{prefix}.{w}"), scaled_normal(rng, [hidden, inputs], inputs)?)?;
        }
        for u in ["uz", "ur", "uc"] {
            params.insert(format!("{prefix}.{u}"), scaled_normal(rng, [hidden, hidden], hidden)?)?;
        }
        for b in ["bz", "br", "bc"] {
            params.insert(format!("{prefix}.{b}"), Tensor::zeros([hidden]))?;
        }
        Ok(())
    }
}

/// One clean GRU step. `z` is the candidate preactivation (before tanh);
/// it is the quantity exposed on shortcuts and reconstructed by a decoder.
#[derive(Clone, Copy, Debug)]
pub struct GruStep {
    pub z: NodeId,
    pub h: NodeId,
    /// Update gate `u`, kept so a noisy output can reuse the clean gates.
    pub update: NodeId,
}

/// Result of [`gru_step_noisy`].
#[derive(Clone, Copy, Debug)]
pub struct NoisyGruStep {
    /// Noisy candidate preactivation (the shortcut value).
    pub z_noisy: NodeId,
    /// Noisy layer output passed upward.
    pub h_noisy: NodeId,
    /// Un-noised state carried to the next timestep.
    pub carry: NodeId,
}

fn affine<T: Element>(g: &mut Graph<T>, x: NodeId, w: NodeId, h: NodeId, u: NodeId, b: NodeId) -> Result<NodeId> {
    let xw = g.matmul_nt(x, w)?;
    let hu = g.matmul_nt(h, u)?;
    let s = g.add(xw, hu)?;
    g.add_row(s, b)
}

/// `h_prev + u ⊙ (tanh(cand) − h_prev)`, i.e. `(1−u)⊙h_prev + u⊙tanh(cand)`.
fn blend<T: Element>(g: &mut Graph<T>, h_prev: NodeId, update: NodeId, cand: NodeId) -> Result<NodeId> {
    let c = g.tanh(cand)?;
    let d = g.sub(c, h_prev)?;
    let ud = g.mul(update, d)?;
    g.add(h_prev, ud)
}

/// Standard GRU step:
/// `r = σ(Wr·x + Ur·h + br)`, `u = σ(Wz·x + Uz·h + bz)`,
/// `z = Wc·x + Uc·(r⊙h) + bc`, `h' = (1−u)⊙h + u⊙tanh(z)`.
pub fn gru_step<T: Element>(g: &mut Graph<T>, x: NodeId, h_prev: NodeId, p: &GruParams) -> Result<GruStep> {
    let (xs, hs) = (g.shape(x), g.shape(h_prev));
    let wc = g.shape(p.wc);
    if xs.len() != 2 || hs.len() != 2 || xs[0] != hs[0] || xs[1] != wc[1] || hs[1] != wc[0] {
        return Err(Error::shape("gru_step", xs, hs));
    }
    let r_pre = affine(g, x, p.wr, h_prev, p.ur, p.br)?;
    let r = g.sigmoid(r_pre)?;
    let u_pre = affine(g, x, p.wz, h_prev, p.uz, p.bz)?;
    let update = g.sigmoid(u_pre)?;
    let rh = g.mul(r, h_prev)?;
    let z = affine(g, x, p.wc, rh, p.uc, p.bc)?;
    let h = blend(g, h_prev, update, z)?;
    Ok(GruStep { z, h, update })
}

/// GRU step on the noisy encoder path.
///
/// The step always runs from the (possibly noisy) input and the un-noised
/// carry. Under [`NoiseVariant::Rn`] fresh noise is added to the candidate
/// preactivation and the output is recomputed with the clean gates; the carry
/// handed to the next step is the clean-step state, so noise never enters
/// the recurrence. Under [`NoiseVariant::Ffn`] the layer adds no noise.
pub fn gru_step_noisy<T: Element>(
    g: &mut Graph<T>,
    x: NodeId,
    h_carry: NodeId,
    p: &GruParams,
    scheme: NoiseScheme,
    rng: &mut Rng,
) -> Result<NoisyGruStep> {
    scheme.validate()?;
    let step = gru_step(g, x, h_carry, p)?;
    match scheme.variant {
        NoiseVariant::Rn if scheme.sigma > 0.0 => {
            let z_noisy = add_noise(g, step.z, scheme.sigma, rng)?;
            let h_noisy = blend(g, h_carry, step.update, z_noisy)?;
            Ok(NoisyGruStep {
                z_noisy,
                h_noisy,
                carry: step.h,
            })
        }
        _ => Ok(NoisyGruStep {
            z_noisy: step.z,
            h_noisy: step.h,
            carry: step.h,
        }),
    }
}
