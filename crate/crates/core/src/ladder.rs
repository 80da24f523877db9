//! Recurrent ladder network.
//!
//! One GRU hidden layer between the input and a softmax output layer. The
//! encoder runs twice with shared weights: a clean pass that supplies
//! reconstruction targets and evaluation logits, and a noisy pass whose
//! preactivations feed the decoder through lateral shortcuts. Cost layers are
//! indexed 0 (input), 1 (hidden GRU candidate preactivation) and 2 (output
//! preactivation).
//!
//! All per-timestep tensors are `[B×width]` row batches; sequences shorter
//! than the longest one in a batch are zero padded and masked out of every
//! cost. Padding sits at the end of a sequence and everything runs forward in
//! time, so padded frames never influence valid ones.

use std::fmt;

use crate::ctc::ctc_batch_loss;
use crate::error::{Error, Result};
use crate::layers::{
    add_noise, dense_forward, gru_step, gru_step_noisy, scaled_normal, Activation, DenseParams, GruParams,
    NoiseScheme, NoiseVariant,
};
use crate::tensor::{Element, Graph, NodeId, ParamSet, Rng, Tensor};

pub const NUM_COST_LAYERS: usize = 3;

/// Floor applied to the per-unit batch std of the reconstruction targets.
pub const STD_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DecoderKind {
    /// No decoder: the plain (noisy) encoder trained on the supervised cost.
    None,
    /// Recurrent decoder, `u_t = V·ẑ⁽ˡ⁺¹⁾_t + O·ẑ⁽ˡ⁾_{t−1}`.
    Recurrent,
    /// Feed-forward decoder, `u_t = V·ẑ⁽ˡ⁺¹⁾_t`.
    FeedForward,
}

impl DecoderKind {
    pub fn name(self) -> &'static str {
        match self {
            DecoderKind::None => "ND",
            DecoderKind::Recurrent => "RD",
            DecoderKind::FeedForward => "FFD",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_uppercase().as_str() {
            "ND" => Some(DecoderKind::None),
            "RD" => Some(DecoderKind::Recurrent),
            "FFD" => Some(DecoderKind::FeedForward),
            _ => None,
        }
    }
}

impl fmt::Display for DecoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LadderConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// Number of label classes `K`; the output layer has `K + 1` units.
    pub num_classes: usize,
    pub decoder: DecoderKind,
    pub noise: NoiseScheme,
    /// Per-layer noise std; `None` uses `noise.sigma`.
    pub sigma_overrides: [Option<f64>; NUM_COST_LAYERS],
    pub lambdas: [f64; NUM_COST_LAYERS],
    pub combinator_hidden: usize,
}

impl Default for LadderConfig {
    fn default() -> Self {
        LadderConfig {
            input_dim: 39,
            hidden_dim: 192,
            num_classes: 39,
            decoder: DecoderKind::Recurrent,
            noise: NoiseScheme {
                variant: NoiseVariant::Ffn,
                sigma: 0.3,
            },
            sigma_overrides: [None; NUM_COST_LAYERS],
            lambdas: [1000.0, 10.0, 0.1],
            combinator_hidden: 4,
        }
    }
}

impl LadderConfig {
    pub fn outputs(&self) -> usize {
        self.num_classes + 1
    }

    pub fn layer_dims(&self) -> [usize; NUM_COST_LAYERS] {
        [self.input_dim, self.hidden_dim, self.outputs()]
    }

    /// Noise std injected at cost layer `layer`.
    pub fn sigma(&self, layer: usize) -> f64 {
        self.sigma_overrides[layer].unwrap_or(self.noise.sigma)
    }

    pub fn has_decoder(&self) -> bool {
        self.decoder != DecoderKind::None
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Argument(m));
        if self.input_dim == 0 || self.hidden_dim == 0 || self.num_classes == 0 {
            return bad(format!(
                "layer sizes must be positive, got {:?}",
                [self.input_dim, self.hidden_dim, self.num_classes]
            ));
        }
        if self.combinator_hidden == 0 {
            return bad("combinator width must be positive".into());
        }
        self.noise.validate()?;
        for (l, s) in self.sigma_overrides.iter().enumerate() {
            if let Some(s) = s {
                if !(s.is_finite() && *s >= 0.0) {
                    return bad(format!("noise std override for layer {l} must be >= 0, got {s}"));
                }
            }
        }
        if self.lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return bad(format!("cost weights must be finite and >= 0, got {:?}", self.lambdas));
        }
        if !self.has_decoder() && self.lambdas.iter().any(|&l| l != 0.0) {
            return bad(format!(
                "decoder ND requires all cost weights to be 0, got {:?}",
                self.lambdas
            ));
        }
        Ok(())
    }

    /// Fresh parameters: `N(0, 1/fan_in)` weights, zero biases.
    ///
    /// Names: `enc.gru.*`, `enc.out.{w,b}`, and per decoder layer `l`
    /// `dec.l{l}.v`, `dec.l{l}.o` (RD only), `dec.l{l}.g.{w1,b1,w2,b2}`.
    pub fn init_params<T: Element>(&self, rng: &mut Rng) -> Result<ParamSet<T>> {
        self.validate()?;
        let mut p = ParamSet::new();
        GruParams::init(&mut p, "enc.gru", self.input_dim, self.hidden_dim, rng)?;
        DenseParams::init(&mut p, "enc.out", self.hidden_dim, self.outputs(), rng)?;
        if self.has_decoder() {
            let dims = self.layer_dims();
            for l in 0..NUM_COST_LAYERS {
                let above = if l + 1 < NUM_COST_LAYERS { dims[l + 1] } else { dims[l] };
                p.insert(format!("dec.l{l}.v"), scaled_normal(rng, [dims[l], above], above)?)?;
                if self.decoder == DecoderKind::Recurrent {
                    p.insert(format!("dec.l{l}.o"), scaled_normal(rng, [dims[l], dims[l]], dims[l])?)?;
                }
                let m = self.combinator_hidden;
                p.insert(format!("dec.l{l}.g.w1"), scaled_normal(rng, [m, 3], 3)?)?;
                p.insert(format!("dec.l{l}.g.b1"), Tensor::zeros([m]))?;
                p.insert(format!("dec.l{l}.g.w2"), scaled_normal(rng, [1, m], m)?)?;
                p.insert(format!("dec.l{l}.g.b2"), Tensor::zeros([1]))?;
            }
        }
        Ok(p)
    }
}

/// Graph handles of a combinator: `w1: [m×3]`, `b1: [m]`, `w2: [1×m]`,
/// `b2: [1]`.
#[derive(Clone, Copy, Debug)]
pub struct CombinatorParams {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderLayer {
    /// Top-down weights `[width×width_above]`.
    pub v: NodeId,
    /// Recurrent weights `[width×width]`, RD only.
    pub o: Option<NodeId>,
    pub g: CombinatorParams,
}

#[derive(Clone, Copy, Debug)]
pub struct LadderParams {
    pub gru: GruParams,
    pub out: DenseParams,
    pub decoder: Option<[DecoderLayer; NUM_COST_LAYERS]>,
}

impl LadderParams {
    /// Registers `params` on `g` and resolves the handles for `cfg`.
    pub fn bind<T: Element>(g: &mut Graph<T>, params: &ParamSet<T>, cfg: &LadderConfig) -> Result<Self> {
        g.register_params(params)?;
        Self::lookup(g, cfg)
    }

    pub fn lookup<T: Element>(g: &Graph<T>, cfg: &LadderConfig) -> Result<Self> {
        let decoder = if cfg.has_decoder() {
            let layer = |l: usize| -> Result<DecoderLayer> {
                let id = |n: &str| g.param_id(&format!("dec.l{l}.{n}"));
                Ok(DecoderLayer {
                    v: id("v")?,
                    o: match cfg.decoder {
                        DecoderKind::Recurrent => Some(id("o")?),
                        _ => None,
                    },
                    g: CombinatorParams {
                        w1: id("g.w1")?,
                        b1: id("g.b1")?,
                        w2: id("g.w2")?,
                        b2: id("g.b2")?,
                    },
                })
            };
            Some([layer(0)?, layer(1)?, layer(2)?])
        } else {
            None
        };
        Ok(LadderParams {
            gru: GruParams::lookup(g, "enc.gru")?,
            out: DenseParams::lookup(g, "enc.out", Activation::Softmax)?,
            decoder,
        })
    }
}

/// Zero-padded minibatch laid out per timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T: Element> {
    /// `frames[t]` is `[B×D]`; rows of sequences shorter than `t + 1` are 0.
    pub frames: Vec<Tensor<T>>,
    pub lengths: Vec<usize>,
    pub labels: Vec<Option<Vec<usize>>>,
}

impl<T: Element> Batch<T> {
    /// Pads `T_b×D` feature matrices into a batch.
    pub fn from_sequences<U: Element>(seqs: &[(&Tensor<U>, Option<&[usize]>)]) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::Argument("empty batch".into()));
        }
        let (_, dim) = seqs[0].0.dims2()?;
        let mut lengths = Vec::with_capacity(seqs.len());
        for (f, _) in seqs {
            let (t, d) = f.dims2()?;
            if d != dim {
                return Err(Error::shape("batch", &[t, dim], f.shape()));
            }
            if t == 0 {
                return Err(Error::Argument("sequence with zero frames".into()));
            }
            lengths.push(t);
        }
        let steps = *lengths.iter().max().unwrap_or(&0);
        let b = seqs.len();
        let mut frames = vec![vec![T::zero(); b * dim]; steps];
        for (i, (f, _)) in seqs.iter().enumerate() {
            for (t, frame) in frames.iter_mut().enumerate().take(lengths[i]) {
                for (o, &v) in frame[i * dim..(i + 1) * dim].iter_mut().zip(f.row(t)) {
                    *o = T::of(v.f64());
                }
            }
        }
        Ok(Batch {
            frames: frames
                .into_iter()
                .map(|d| Tensor::new([b, dim], d))
                .collect::<Result<_>>()?,
            lengths,
            labels: seqs.iter().map(|(_, l)| l.map(<[usize]>::to_vec)).collect(),
        })
    }

    pub fn size(&self) -> usize {
        self.lengths.len()
    }

    pub fn steps(&self) -> usize {
        self.frames.len()
    }

    pub fn input_dim(&self) -> usize {
        self.frames.first().map_or(0, |f| f.shape()[1])
    }

    /// Number of real (unpadded) frames.
    pub fn valid_frames(&self) -> usize {
        self.lengths.iter().sum()
    }
}

/// Node handles from one dual encoder pass.
///
/// `clean[l][t]` and `noisy[l][t]` are the preactivations of cost layer `l`
/// at step `t`; layer 0 holds the input itself and its noisy copy.
#[derive(Clone, Debug)]
pub struct EncoderTrace {
    pub clean: [Vec<NodeId>; NUM_COST_LAYERS],
    pub noisy: [Vec<NodeId>; NUM_COST_LAYERS],
    /// Clean softmax output `y_t`.
    pub clean_out: Vec<NodeId>,
    /// Noisy softmax output `ỹ_t`.
    pub noisy_out: Vec<NodeId>,
    pub lengths: Vec<usize>,
}

impl EncoderTrace {
    pub fn steps(&self) -> usize {
        self.clean_out.len()
    }
}

fn check_batch<T: Element>(cfg: &LadderConfig, batch: &Batch<T>) -> Result<()> {
    if batch.input_dim() != cfg.input_dim {
        return Err(Error::shape(
            "encode",
            &[batch.size(), cfg.input_dim],
            &[batch.size(), batch.input_dim()],
        ));
    }
    if batch.steps() == 0 {
        return Err(Error::Argument("batch has no frames".into()));
    }
    Ok(())
}

/// Clean and noisy encoder passes over `batch`.
///
/// Noise is drawn per step in the order input, hidden (RN only), output.
pub fn encode<T: Element>(
    g: &mut Graph<T>,
    p: &LadderParams,
    cfg: &LadderConfig,
    batch: &Batch<T>,
    rng: &mut Rng,
) -> Result<EncoderTrace> {
    check_batch(cfg, batch)?;
    let h0 = g.input(Tensor::zeros([batch.size(), cfg.hidden_dim]));
    let (mut h_clean, mut h_carry) = (h0, h0);
    let scheme = NoiseScheme {
        variant: cfg.noise.variant,
        sigma: cfg.sigma(1),
    };
    let steps = batch.steps();
    let mut clean: [Vec<NodeId>; 3] = Default::default();
    let mut noisy: [Vec<NodeId>; 3] = Default::default();
    let (mut clean_out, mut noisy_out) = (Vec::with_capacity(steps), Vec::with_capacity(steps));
    for frame in &batch.frames {
        let x = g.input(frame.clone());
        let step = gru_step(g, x, h_clean, &p.gru)?;
        h_clean = step.h;
        let (z_out, y) = dense_forward(g, step.h, &p.out, None)?;

        let x_noisy = add_noise(g, x, cfg.sigma(0), rng)?;
        let ns = gru_step_noisy(g, x_noisy, h_carry, &p.gru, scheme, rng)?;
        h_carry = ns.carry;
        let (z_out_noisy, y_noisy) = dense_forward(g, ns.h_noisy, &p.out, Some((cfg.sigma(2), rng)))?;

        clean[0].push(x);
        clean[1].push(step.z);
        clean[2].push(z_out);
        noisy[0].push(x_noisy);
        noisy[1].push(ns.z_noisy);
        noisy[2].push(z_out_noisy);
        clean_out.push(y);
        noisy_out.push(y_noisy);
    }
    Ok(EncoderTrace {
        clean,
        noisy,
        clean_out,
        noisy_out,
        lengths: batch.lengths.clone(),
    })
}

/// Clean pass only; returns the output preactivations (logits) per step.
pub fn encode_clean<T: Element>(
    g: &mut Graph<T>,
    p: &LadderParams,
    cfg: &LadderConfig,
    batch: &Batch<T>,
) -> Result<Vec<NodeId>> {
    check_batch(cfg, batch)?;
    let mut h = g.input(Tensor::zeros([batch.size(), cfg.hidden_dim]));
    let mut logits = Vec::with_capacity(batch.steps());
    for frame in &batch.frames {
        let x = g.input(frame.clone());
        let step = gru_step(g, x, h, &p.gru)?;
        h = step.h;
        let xw = g.matmul_nt(h, p.out.w)?;
        logits.push(g.add_row(xw, p.out.b)?);
    }
    Ok(logits)
}

/// `ẑ = g(z̃, u)`: a per-unit MLP on `(z̃, u, z̃⊙u)` with one tanh hidden layer
/// and a linear output, shared over units, rows and timesteps.
pub fn combinator<T: Element>(g: &mut Graph<T>, z_noisy: NodeId, u: NodeId, c: &CombinatorParams) -> Result<NodeId> {
    if g.shape(z_noisy) != g.shape(u) {
        return Err(Error::shape("combinator", g.shape(z_noisy), g.shape(u)));
    }
    let shape = g.shape(z_noisy).to_vec();
    let zu = g.mul(z_noisy, u)?;
    let x = g.interleave_cols(&[z_noisy, u, zu])?;
    let a = g.matmul_nt(x, c.w1)?;
    let a = g.add_row(a, c.b1)?;
    let h = g.tanh(a)?;
    let o = g.matmul_nt(h, c.w2)?;
    let o = g.add_row(o, c.b2)?;
    g.reshape(o, &shape)
}

/// Reconstructions `ẑ[l][t]` for every cost layer.
pub type Reconstructions = [Vec<NodeId>; NUM_COST_LAYERS];

fn decode<T: Element>(
    g: &mut Graph<T>,
    layers: &[DecoderLayer; NUM_COST_LAYERS],
    trace: &EncoderTrace,
    recurrent: bool,
) -> Result<Reconstructions> {
    let mut out: Reconstructions = Default::default();
    let mut prev: [Option<NodeId>; NUM_COST_LAYERS] = [None; NUM_COST_LAYERS];
    for t in 0..trace.steps() {
        let mut above = trace.noisy_out[t];
        for l in (0..NUM_COST_LAYERS).rev() {
            let layer = &layers[l];
            let mut u = g.matmul_nt(above, layer.v)?;
            if recurrent {
                let o = layer
                    .o
                    .ok_or_else(|| Error::Argument("recurrent decoder without recurrent weights".into()))?;
                // The zero initial state contributes nothing at t = 0.
                if let Some(prev) = prev[l] {
                    let r = g.matmul_nt(prev, o)?;
                    u = g.add(u, r)?;
                }
            }
            let z_hat = combinator(g, trace.noisy[l][t], u, &layer.g)?;
            out[l].push(z_hat);
            prev[l] = Some(z_hat);
            above = z_hat;
        }
    }
    Ok(out)
}

/// Recurrent decoder: `u⁽ˡ⁾_t = V·ẑ⁽ˡ⁺¹⁾_t + O·ẑ⁽ˡ⁾_{t−1}` with a zero initial
/// state, where the top layer reads the noisy softmax output `ỹ_t`.
pub fn decode_recurrent<T: Element>(
    g: &mut Graph<T>,
    layers: &[DecoderLayer; NUM_COST_LAYERS],
    trace: &EncoderTrace,
) -> Result<Reconstructions> {
    decode(g, layers, trace, true)
}

/// Feed-forward decoder: `u⁽ˡ⁾_t = V·ẑ⁽ˡ⁺¹⁾_t`. Any `O` weights are ignored.
pub fn decode_feedforward<T: Element>(
    g: &mut Graph<T>,
    layers: &[DecoderLayer; NUM_COST_LAYERS],
    trace: &EncoderTrace,
) -> Result<Reconstructions> {
    decode(g, layers, trace, false)
}

/// Runs the decoder selected by `cfg`; `None` for ND.
pub fn run_decoder<T: Element>(
    g: &mut Graph<T>,
    p: &LadderParams,
    cfg: &LadderConfig,
    trace: &EncoderTrace,
) -> Result<Option<Reconstructions>> {
    match (&p.decoder, cfg.decoder) {
        (_, DecoderKind::None) => Ok(None),
        (Some(layers), DecoderKind::Recurrent) => decode_recurrent(g, layers, trace).map(Some),
        (Some(layers), DecoderKind::FeedForward) => decode_feedforward(g, layers, trace).map(Some),
        (None, kind) => Err(Error::Argument(format!("decoder {kind} has no parameters bound"))),
    }
}

/// Per-unit batch mean and floored population std.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Statistics over the rows of an `[N×n]` matrix.
    pub fn from_rows(x: &Tensor<f64>) -> Result<Self> {
        let (n, w) = x.dims2()?;
        Self::accumulate(w, (0..n).map(|i| x.row(i)))
    }

    /// Statistics over the valid rows of a padded per-step stack.
    pub fn from_clean<T: Element>(steps: &[&Tensor<T>], lengths: &[usize]) -> Result<Self> {
        let w = steps
            .first()
            .ok_or_else(|| Error::Argument("no steps".into()))?
            .dims2()?
            .1;
        let rows: Vec<Vec<f64>> = valid_rows(steps, lengths)
            .map(|r| r.iter().map(|v| v.f64()).collect())
            .collect();
        Self::accumulate(w, rows.iter().map(Vec::as_slice))
    }

    fn accumulate<'a>(width: usize, rows: impl Iterator<Item = &'a [f64]> + Clone) -> Result<Self> {
        let mut count = 0usize;
        let mut mean = vec![0.0; width];
        for r in rows.clone() {
            count += 1;
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        if count == 0 {
            return Err(Error::Argument("normalisation statistics over zero frames".into()));
        }
        for m in &mut mean {
            *m /= count as f64;
        }
        let mut var = vec![0.0; width];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.iter().map(|s| (s / count as f64).sqrt().max(STD_FLOOR)).collect();
        Ok(NormStats { mean, std })
    }

    pub fn normalize(&self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        let (n, w) = x.dims2()?;
        if w != self.mean.len() {
            return Err(Error::shape("normalize", x.shape(), &[self.mean.len()]));
        }
        let mut out = x.clone();
        for i in 0..n {
            for (j, v) in out.data_mut()[i * w..(i + 1) * w].iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.std[j];
            }
        }
        Ok(out)
    }
}

fn valid_rows<'a, T: Element>(steps: &'a [&'a Tensor<T>], lengths: &'a [usize]) -> impl Iterator<Item = &'a [T]> + 'a {
    steps
        .iter()
        .enumerate()
        .flat_map(move |(t, s)| (0..lengths.len()).filter(move |&b| lengths[b] > t).map(move |b| s.row(b)))
}

/// `λ · mean_{rows,units} ((z − μ)/s − (ẑ − μ)/s)²` over the rows of `[N×n]`
/// matrices holding valid frames only.
pub fn reconstruction_cost(z: &Tensor<f64>, z_hat: &Tensor<f64>, stats: &NormStats, lambda: f64) -> Result<f64> {
    if z.shape() != z_hat.shape() {
        return Err(Error::shape("reconstruction_cost", z.shape(), z_hat.shape()));
    }
    let a = stats.normalize(z)?;
    let b = stats.normalize(z_hat)?;
    let sq: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(lambda * sq / z.len().max(1) as f64)
}

/// Reconstruction cost of one layer as a graph node.
///
/// Normalisation statistics come from the valid rows of `clean` and the
/// cost is differentiable with respect to both `clean` (including through
/// the batch statistics) and `recon`.
pub fn layer_denoising_cost<T: Element>(
    g: &mut Graph<T>,
    clean: &[NodeId],
    recon: &[NodeId],
    lengths: &[usize],
    lambda: f64,
) -> Result<NodeId> {
    if clean.len() != recon.len() || clean.is_empty() {
        return Err(Error::Argument(format!(
            "reconstruction over {} clean and {} reconstructed steps",
            clean.len(),
            recon.len()
        )));
    }
    let (b, w) = g.value(clean[0]).dims2()?;
    if b != lengths.len() {
        return Err(Error::shape("denoising_cost", &[lengths.len(), w], &[b, w]));
    }
    for (&c, &r) in clean.iter().zip(recon) {
        if g.shape(c) != [b, w] || g.shape(r) != [b, w] {
            return Err(Error::shape("denoising_cost", g.shape(c), g.shape(r)));
        }
    }
    let steps: Vec<&Tensor<T>> = clean.iter().map(|&c| g.value(c)).collect();
    let stats = NormStats::from_clean(&steps, lengths)?;
    let n_rows: usize = lengths.iter().map(|&l| l.min(clean.len())).sum();
    let denom = (n_rows * w) as f64;

    // e = (z − ẑ)/s; cost_j = λ/(N·n) Σ_i e_ij².
    let mut per_unit = vec![0.0; w];
    let mut diffs: Vec<Vec<f64>> = Vec::with_capacity(clean.len());
    for (t, (&c, &r)) in clean.iter().zip(recon).enumerate() {
        let (zv, rv) = (g.value(c).data(), g.value(r).data());
        let mut e = vec![0.0; b * w];
        for row in 0..b {
            if lengths[row] <= t {
                continue;
            }
            for j in 0..w {
                let k = row * w + j;
                let zn = (zv[k].f64() - stats.mean[j]) / stats.std[j];
                let rn = (rv[k].f64() - stats.mean[j]) / stats.std[j];
                e[k] = zn - rn;
                per_unit[j] += e[k] * e[k];
            }
        }
        diffs.push(e);
    }
    let scale = lambda / denom;
    let value: f64 = per_unit.iter().sum::<f64>() * scale;

    let floored: Vec<bool> = stats.std.iter().map(|&s| s <= STD_FLOOR).collect();
    let mut grads_clean = Vec::with_capacity(clean.len());
    let mut grads_recon = Vec::with_capacity(clean.len());
    for (t, (&c, e)) in clean.iter().zip(&diffs).enumerate() {
        let zv = g.value(c).data();
        let mut gz = vec![T::zero(); b * w];
        let mut gr = vec![T::zero(); b * w];
        for row in 0..b {
            if lengths[row] <= t {
                continue;
            }
            for j in 0..w {
                let k = row * w + j;
                let s = stats.std[j];
                let direct = 2.0 * scale * e[k] / s;
                let mut dz = direct;
                if !floored[j] {
                    // d cost_j / d s_j = −2·cost_j/s_j, d s_j / d z_ij = (z_ij − μ_j)/(N·s_j)
                    let cost_j = scale * per_unit[j];
                    dz -= 2.0 * cost_j / s * (zv[k].f64() - stats.mean[j]) / (n_rows as f64 * s);
                }
                gz[k] = T::of(dz);
                gr[k] = T::of(-direct);
            }
        }
        grads_clean.push(Tensor::new([b, w], gz)?);
        grads_recon.push(Tensor::new([b, w], gr)?);
    }
    let mut inputs = clean.to_vec();
    inputs.extend_from_slice(recon);
    grads_clean.extend(grads_recon);
    g.scalar_fn(inputs, T::of(value), grads_clean)
}

/// `C_DAE = Σ_l λ_l · cost_l` for one encoder/decoder pass.
pub fn denoising_cost<T: Element>(
    g: &mut Graph<T>,
    trace: &EncoderTrace,
    recon: &Reconstructions,
    lambdas: &[f64],
) -> Result<NodeId> {
    if lambdas.len() != NUM_COST_LAYERS {
        return Err(Error::Argument(format!(
            "expected {NUM_COST_LAYERS} cost weights, got {}",
            lambdas.len()
        )));
    }
    let mut total: Option<NodeId> = None;
    for (l, &lambda) in lambdas.iter().enumerate() {
        let c = layer_denoising_cost(g, &trace.clean[l], &recon[l], &trace.lengths, lambda)?;
        total = Some(match total {
            Some(acc) => g.add(acc, c)?,
            None => c,
        });
    }
    Ok(total.expect("three cost layers"))
}

/// Handles to the terms of the semi-supervised objective.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub total: NodeId,
    pub c_sup: NodeId,
    pub c_dae: NodeId,
}

/// `C = C_sup + C_DAE`.
///
/// `C_sup` is the mean CTC loss of the noisy logits of the labelled batch.
/// `C_DAE` is computed for every batch given and averaged over them. The
/// labelled batch is encoded first, so its noise is drawn first.
pub fn semi_supervised_loss<T: Element>(
    g: &mut Graph<T>,
    p: &LadderParams,
    cfg: &LadderConfig,
    labeled: Option<&Batch<T>>,
    unlabeled: Option<&Batch<T>>,
    rng: &mut Rng,
) -> Result<LossNodes> {
    let dae_active = cfg.has_decoder();
    if labeled.is_none() && (!dae_active || cfg.lambdas.iter().all(|&l| l == 0.0)) {
        return Err(Error::Argument(
            "no objective: labelled batch missing and all cost weights are 0".into(),
        ));
    }
    let mut dae_terms = Vec::new();
    let c_sup = match labeled {
        Some(batch) => {
            let labels = batch
                .labels
                .iter()
                .map(|l| l.as_deref().ok_or_else(|| Error::Data("labelled batch contains an unlabelled sequence".into())))
                .collect::<Result<Vec<_>>>()?;
            let trace = encode(g, p, cfg, batch, rng)?;
            let c = ctc_batch_loss(g, &trace.noisy[2], &batch.lengths, &labels)?;
            if let Some(recon) = run_decoder(g, p, cfg, &trace)? {
                dae_terms.push(denoising_cost(g, &trace, &recon, &cfg.lambdas)?);
            }
            c
        }
        None => g.input(Tensor::scalar(T::zero())),
    };
    if let (Some(batch), true) = (unlabeled, dae_active) {
        let trace = encode(g, p, cfg, batch, rng)?;
        if let Some(recon) = run_decoder(g, p, cfg, &trace)? {
            dae_terms.push(denoising_cost(g, &trace, &recon, &cfg.lambdas)?);
        }
    }
    let c_dae = match dae_terms.len() {
        0 => g.input(Tensor::scalar(T::zero())),
        1 => dae_terms[0],
        n => {
            let mut acc = dae_terms[0];
            for &d in &dae_terms[1..] {
                acc = g.add(acc, d)?;
            }
            g.scale(acc, 1.0 / n as f64)?
        }
    };
    let total = g.add(c_sup, c_dae)?;
    Ok(LossNodes { total, c_sup, c_dae })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, Rng};
    use proptest::prelude::*;

    fn tiny(decoder: DecoderKind, variant: NoiseVariant, sigma: f64) -> LadderConfig {
        LadderConfig {
            input_dim: 3,
            hidden_dim: 4,
            num_classes: 2,
            decoder,
            noise: NoiseScheme { variant, sigma },
            sigma_overrides: [None; 3],
            lambdas: if decoder == DecoderKind::None { [0.0; 3] } else { [1000.0, 10.0, 0.1] },
            combinator_hidden: 4,
        }
    }

    fn random_batch(rng: &mut Rng, dim: usize, lengths: &[usize], labels: &[Vec<usize>]) -> Batch<f64> {
        let feats: Vec<Tensor<f64>> = lengths.iter().map(|&t| rng.gaussian([t, dim], 1.0).unwrap()).collect();
        let seqs: Vec<(&Tensor<f64>, Option<&[usize]>)> = feats
            .iter()
            .enumerate()
            .map(|(i, f)| (f, labels.get(i).map(Vec::as_slice)))
            .collect();
        Batch::from_sequences(&seqs).unwrap()
    }

    fn values(g: &Graph<f64>, ids: &[NodeId]) -> Vec<Tensor<f64>> {
        ids.iter().map(|&i| g.value(i).clone()).collect()
    }

    const ALL_VARIANTS: [(DecoderKind, NoiseVariant); 6] = [
        (DecoderKind::None, NoiseVariant::Ffn),
        (DecoderKind::None, NoiseVariant::Rn),
        (DecoderKind::Recurrent, NoiseVariant::Ffn),
        (DecoderKind::Recurrent, NoiseVariant::Rn),
        (DecoderKind::FeedForward, NoiseVariant::Ffn),
        (DecoderKind::FeedForward, NoiseVariant::Rn),
    ];

    #[test]
    fn nd_rejects_nonzero_weights() {
        let mut c = tiny(DecoderKind::None, NoiseVariant::Ffn, 0.1);
        c.lambdas = [0.0, 1.0, 0.0];
        assert!(matches!(c.validate(), Err(Error::Argument(_))));
        c.lambdas = [0.0; 3];
        c.validate().unwrap();
    }

    #[test]
    fn sigma_overrides_fall_back_to_global() {
        let mut c = tiny(DecoderKind::Recurrent, NoiseVariant::Rn, 0.2);
        c.sigma_overrides[1] = Some(0.05);
        assert_eq!([c.sigma(0), c.sigma(1), c.sigma(2)], [0.2, 0.05, 0.2]);
        c.sigma_overrides[2] = Some(-1.0);
        assert!(c.validate().is_err());
    }

    #[test]
    fn parameter_layout_per_decoder() {
        let mut rng = Rng::new(1);
        let nd = tiny(DecoderKind::None, NoiseVariant::Ffn, 0.1).init_params::<f64>(&mut rng).unwrap();
        assert_eq!(nd.len(), 11);
        let ffd = tiny(DecoderKind::FeedForward, NoiseVariant::Ffn, 0.1).init_params::<f64>(&mut rng).unwrap();
        assert_eq!(ffd.len(), 11 + 3 * 5);
        let rd = tiny(DecoderKind::Recurrent, NoiseVariant::Ffn, 0.1).init_params::<f64>(&mut rng).unwrap();
        assert_eq!(rd.len(), 11 + 3 * 6);
        assert_eq!(rd.get("dec.l0.v").unwrap().shape(), &[3, 4]);
        assert_eq!(rd.get("dec.l1.v").unwrap().shape(), &[4, 3]);
        assert_eq!(rd.get("dec.l2.v").unwrap().shape(), &[3, 3]);
        assert_eq!(rd.get("dec.l1.o").unwrap().shape(), &[4, 4]);
    }

    #[test]
    fn batch_pads_and_masks() {
        let a = Tensor::<f32>::from_f64([2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::<f32>::from_f64([1, 2], &[5.0, 6.0]).unwrap();
        let batch: Batch<f64> = Batch::from_sequences(&[(&a, Some(&[0][..])), (&b, None)]).unwrap();
        assert_eq!(batch.lengths, vec![2, 1]);
        assert_eq!(batch.frames[0].data(), &[1.0, 2.0, 5.0, 6.0]);
        assert_eq!(batch.frames[1].data(), &[3.0, 4.0, 0.0, 0.0]);
        assert_eq!(batch.labels, vec![Some(vec![0]), None]);
        assert_eq!(batch.valid_frames(), 3);
    }

    #[test]
    fn zero_sigma_traces_are_identical() {
        for (dec, var) in ALL_VARIANTS {
            let cfg = tiny(dec, var, 0.0);
            let mut rng = Rng::new(3);
            let params = cfg.init_params::<f64>(&mut rng).unwrap();
            let batch = random_batch(&mut rng, 3, &[4, 2], &[]);
            let mut g = Graph::new();
            let p = LadderParams::bind(&mut g, &params, &cfg).unwrap();
            let tr = encode(&mut g, &p, &cfg, &batch, &mut rng).unwrap();
            for l in 0..3 {
                assert_eq!(values(&g, &tr.clean[l]), values(&g, &tr.noisy[l]));
            }
            assert_eq!(values(&g, &tr.clean_out), values(&g, &tr.noisy_out));
        }
    }

    #[test]
    fn ffn_hidden_layer_adds_no_noise() {
        let cfg = tiny(DecoderKind::Recurrent, NoiseVariant::Ffn, 0.5);
        let mut rng = Rng::new(4);
        let params = cfg.init_params::<f64>(&mut rng).unwrap();
        let batch = random_batch(&mut rng, 3, &[3, 3], &[]);
        let mut g = Graph::new();
        let p = LadderParams::bind(&mut g, &params, &cfg).unwrap();
        let tr = encode(&mut g, &p, &cfg, &batch, &mut rng).unwrap();

        // Replay the hidden layer cleanly from the noisy inputs.
        let mut h = g.input(Tensor::zeros([2, 4]));
        for t in 0..3 {
            assert!(g.value(tr.noisy[0][t]).max_abs_diff(g.value(tr.clean[0][t])) > 0.0);
            let step = gru_step(&mut g, tr.noisy[0][t], h, &p.gru).unwrap();
            h = step.h;
            assert_eq!(g.value(step.z), g.value(tr.noisy[1][t]));
            let xw = g.matmul_nt(h, p.out.w).unwrap();
            let z = g.add_row(xw, p.out.b).unwrap();
            assert!(g.value(z).max_abs_diff(g.value(tr.noisy[2][t])) > 0.0);
        }
    }

    #[test]
    fn rn_hidden_layer_adds_noise() {
        let cfg = tiny(DecoderKind::Recurrent, NoiseVariant::Rn, 0.5);
        let mut rng = Rng::new(4);
        let params = cfg.init_params::<f64>(&mut rng).unwrap();
        let batch = random_batch(&mut rng, 3, &[2], &[]);
        let mut g = Graph::new();
        let p = LadderParams::bind(&mut g, &params, &cfg).unwrap();
        let tr = encode(&mut g, &p, &cfg, &batch, &mut rng).unwrap();
        let h = g.input(Tensor::zeros([1, 4]));
        let step = gru_step(&mut g, tr.noisy[0][0], h, &p.gru).unwrap();
        assert!(g.value(step.z).max_abs_diff(g.value(tr.noisy[1][0])) > 0.0);
    }

    #[test]
    fn encode_is_deterministic() {
        let cfg = tiny(DecoderKind::Recurrent, NoiseVariant::Rn, 0.3);
        let run = || {
            let mut rng = Rng::new(9);
            let params = cfg.init_params::<f64>(&mut rng).unwrap();
            let batch = random_batch(&mut rng, 3, &[3, 2], &[]);
            let mut g = Graph::new();
            let p = LadderParams::bind(&mut g, &params, &cfg).unwrap();
            let tr = encode(&mut g, &p, &cfg, &batch, &mut rng).unwrap();
            (0..3).flat_map(|l| values(&g, &tr.noisy[l])).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn encode_rejects_wrong_width() {
        let cfg = tiny(DecoderKind::None, NoiseVariant::Ffn, 0.0);
        let mut rng = Rng::new(1);
        let params = cfg.init_params::<f64>(&mut rng).unwrap();
        let batch = random_batch(&mut rng, 5, &[2], &[]);
        let mut g = Graph::new();
        let p = LadderParams::bind(&mut g, &params, &cfg).unwrap();
        assert!(matches!(encode(&mut g, &p, &cfg, &batch, &mut rng), Err(Error::Shape { .. })));
    }

    #[test]
    fn clean_encode_matches_trace() {
        let cfg = tiny(DecoderKind::FeedForward, NoiseVariant::Rn, 0.4);
        let mut rng = Rng::new(5);
        let params = cfg.init_params::<f64>(&mut rng).unwrap();
        let batch = random_batch(&mut rng, 3, &[3, 1], &[]);
        let mut g = Graph::new();
        let p = LadderParams::bind(&mut g, &params, &cfg).unwrap();
        let tr = encode(&mut g, &p, &cfg, &batch, &mut rng).unwrap();
        let logits = encode_clean(&mut g, &p, &cfg, &batch).unwrap();
        assert_eq!(values(&g, &logits), values(&g, &tr.clean[2]));
    }

    fn combinator_params(rng: &mut Rng, m: usize) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.insert("w1", rng.gaussian([m, 3], 0.7).unwrap()).unwrap();
        p.insert("b1", rng.gaussian([m], 0.3).unwrap()).unwrap();
        p.insert("w2", rng.gaussian([1, m], 0.7).unwrap()).unwrap();
        p.insert("b2", rng.gaussian([1], 0.3).unwrap()).unwrap();
        p
    }

    fn bind_combinator(g: &mut Graph<f64>, p: &ParamSet<f64>) -> CombinatorParams {
        g.register_params(p).unwrap();
        CombinatorParams {
            w1: g.param_id("w1").unwrap(),
            b1: g.param_id("b1").unwrap(),
            w2: g.param_id("w2").unwrap(),
            b2: g.param_id("b2").unwrap(),
        }
    }

    #[test]
    fn combinator_zero_weights_give_bias() {
        let mut p = ParamSet::new();
        p.insert("w1", Tensor::zeros([4, 3])).unwrap();
        p.insert("b1", Tensor::full([4], 0.5)).unwrap();
        p.insert("w2", Tensor::zeros([1, 4])).unwrap();
        p.insert("b2", Tensor::scalar(1.25).reshape([1]).unwrap()).unwrap();
        let mut g = Graph::new();
        let c = bind_combinator(&mut g, &p);
        let mut rng = Rng::new(2);
        let z = g.input(rng.gaussian([3, 5], 1.0).unwrap());
        let u = g.input(rng.gaussian([3, 5], 1.0).unwrap());
        let out = combinator(&mut g, z, u, &c).unwrap();
        assert_eq!(g.value(out), &Tensor::full([3, 5], 1.25));
    }

    #[test]
    fn combinator_is_per_unit() {
        let mut rng = Rng::new(6);
        let p = combinator_params(&mut rng, 4);
        let z = rng.gaussian::<f64>([2, 3], 1.0).unwrap();
        let u = rng.gaussian::<f64>([2, 3], 1.0).unwrap();
        let mut g = Graph::new();
        let c = bind_combinator(&mut g, &p);
        let (zn, un) = (g.input(z.clone()), g.input(u.clone()));
        let out = combinator(&mut g, zn, un, &c).unwrap();
        let out = g.value(out).clone();
        let w1 = p.get("w1").unwrap().data();
        let b1 = p.get("b1").unwrap().data();
        let w2 = p.get("w2").unwrap().data();
        let b2 = p.get("b2").unwrap().data()[0];
        for k in 0..6 {
            let (a, b) = (z.data()[k], u.data()[k]);
            let mut y = b2;
            for h in 0..4 {
                y += w2[h] * (w1[h * 3] * a + w1[h * 3 + 1] * b + w1[h * 3 + 2] * a * b + b1[h]).tanh();
            }
            assert!((out.data()[k] - y).abs() < 1e-12);
        }
    }

    #[test]
    fn combinator_gradients() {
        let mut rng = Rng::new(7);
        let mut p = combinator_params(&mut rng, 4);
        p.insert("z", rng.gaussian([2, 3], 1.0).unwrap()).unwrap();
        p.insert("u", rng.gaussian([2, 3], 1.0).unwrap()).unwrap();
        let r = grad_check(&p, 1e-6, |g, p| {
            let c = bind_combinator(g, p);
            let out = combinator(g, g.param_id("z")?, g.param_id("u")?, &c)?;
            let sq = g.square(out)?;
            g.sum(sq)
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-6, "{r:?}");
    }

    #[test]
    fn combinator_rejects_mismatch() {
        let mut rng = Rng::new(8);
        let p = combinator_params(&mut rng, 2);
        let mut g = Graph::new();
        let c = bind_combinator(&mut g, &p);
        let z = g.input(Tensor::zeros([2, 3]));
        let u = g.input(Tensor::zeros([3, 2]));
        assert!(combinator(&mut g, z, u, &c).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn combinator_preserves_shape(rows in 1usize..5, cols in 1usize..7, seed in 0u64..1000) {
            let mut rng = Rng::new(seed);
            let p = combinator_params(&mut rng, 3);
            let mut g = Graph::new();
            let c = bind_combinator(&mut g, &p);
            let z = g.input(rng.gaussian([rows, cols], 1.0).unwrap());
            let u = g.input(rng.gaussian([rows, cols], 1.0).unwrap());
            let out = combinator(&mut g, z, u, &c).unwrap();
            prop_assert_eq!(g.shape(out), &[rows, cols]);
        }
    }

    fn decoded(cfg: &LadderConfig, params: &ParamSet<f64>, batch: &Batch<f64>, recurrent: bool) -> Vec<Vec<Tensor<f64>>> {
        let mut g = Graph::new();
        let p = LadderParams::bind(&mut g, params, cfg).unwrap();
        let mut rng = Rng::new(11);
        let tr = encode(&mut g, &p, cfg, batch, &mut rng).unwrap();
        let layers = p.decoder.unwrap();
        let r = if recurrent {
            decode_recurrent(&mut g, &layers, &tr).unwrap()
        } else {
            decode_feedforward(&mut g, &layers, &tr).unwrap()
        };
        r.iter().map(|ids| values(&g, ids)).collect()
    }

    #[test]
    fn single_step_recurrent_equals_feedforward() {
        let cfg = tiny(DecoderKind::Recurrent, NoiseVariant::Rn, 0.3);
        let mut rng = Rng::new(12);
        let params = cfg.init_params::<f64>(&mut rng).unwrap();
        let batch = random_batch(&mut rng, 3, &[1, 1], &[]);
        assert_eq!(decoded(&cfg, &params, &batch, true), decoded(&cfg, &params, &batch, false));
    }

    #[test]
    fn zero_recurrent_weights_reduce_to_feedforward() {
        let cfg = tiny(DecoderKind::Recurrent, NoiseVariant::Ffn, 0.3);
        let mut rng = Rng::new(13);
        let mut params = cfg.init_params::<f64>(&mut rng).unwrap();
        for l in 0..3 {
            let o = params.get_mut(&format!("dec.l{l}.o")).unwrap();
            *o = Tensor::zeros(o.shape().to_vec());
        }
        let batch = random_batch(&mut rng, 3, &[5, 3], &[]);
        let rd = decoded(&cfg, &params, &batch, true);
        let ffd = decoded(&cfg, &params, &batch, false);
        for (a, b) in rd.iter().flatten().zip(ffd.iter().flatten()) {
            assert!(a.max_abs_diff(b) <= 1e-12);
        }
        // With O ≠ 0 the outputs differ after the first step.
        let params = cfg.init_params::<f64>(&mut rng).unwrap();
        let rd = decoded(&cfg, &params, &batch, true);
        let ffd = decoded(&cfg, &params, &batch, false);
        assert_eq!(rd[0][0], ffd[0][0]);
        assert!(rd[0][1].max_abs_diff(&ffd[0][1]) > 1e-6);
    }

    #[test]
    fn feedforward_decoder_is_timestep_local() {
        let cfg = tiny(DecoderKind::FeedForward, NoiseVariant::Ffn, 0.0);
        let mut rng = Rng::new(14);
        let params = cfg.init_params::<f64>(&mut rng).unwrap();
        let batch = random_batch(&mut rng, 3, &[4], &[]);
        let mut g = Graph::new();
        let p = LadderParams::bind(&mut g, &params, &cfg).unwrap();
        let tr = encode(&mut g, &p, &cfg, &batch, &mut rng).unwrap();
        let perm = [2usize, 0, 3, 1];
        let mut shuffled = tr.clone();
        for l in 0..3 {
            shuffled.noisy[l] = perm.iter().map(|&t| tr.noisy[l][t]).collect();
        }
        shuffled.noisy_out = perm.iter().map(|&t| tr.noisy_out[t]).collect();
        let layers = p.decoder.unwrap();
        let a = decode_feedforward(&mut g, &layers, &tr).unwrap();
        let b = decode_feedforward(&mut g, &layers, &shuffled).unwrap();
        for l in 0..3 {
            for (i, &t) in perm.iter().enumerate() {
                assert_eq!(g.value(b[l][i]), g.value(a[l][t]));
            }
        }
    }

    #[test]
    fn hand_computed_cost() {
        let stats = NormStats {
            mean: vec![1.0],
            std: vec![1.0],
        };
        let z = Tensor::from_f64([1, 1], &[2.0]).unwrap();
        let zh = Tensor::from_f64([1, 1], &[0.0]).unwrap();
        assert_eq!(reconstruction_cost(&z, &zh, &stats, 10.0).unwrap(), 40.0);
        assert_eq!(reconstruction_cost(&z, &z, &stats, 10.0).unwrap(), 0.0);
        assert_eq!(reconstruction_cost(&z, &zh, &stats, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn constant_unit_uses_floor() {
        let x = Tensor::from_f64([3, 2], &[1.0, 5.0, 2.0, 5.0, 3.0, 5.0]).unwrap();
        let s = NormStats::from_rows(&x).unwrap();
        assert_eq!(s.mean, vec![2.0, 5.0]);
        assert_eq!(s.std[1], STD_FLOOR);
        assert!((s.std[0] - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn normalized_targets_are_standardized() {
        let mut rng = Rng::new(15);
        for _ in 0..10 {
            let x = rng.gaussian::<f64>([80, 6], 3.0).unwrap().map(|v| v + 7.0);
            let s = NormStats::from_rows(&x).unwrap();
            let n = s.normalize(&x).unwrap();
            let again = NormStats::from_rows(&n).unwrap();
            for j in 0..6 {
                assert!(again.mean[j].abs() < 1e-6);
                assert!((again.std[j] - 1.0).abs() < 1e-4);
            }
        }
    }

    fn stack_valid(steps: &[Tensor<f64>], lengths: &[usize]) -> Tensor<f64> {
        let refs: Vec<&Tensor<f64>> = steps.iter().collect();
        let rows: Vec<Vec<f64>> = valid_rows(&refs, lengths).map(<[f64]>::to_vec).collect();
        Tensor::from_rows(&rows).unwrap()
    }

    #[test]
    fn graph_cost_matches_plain_cost_and_ignores_padding() {
        let mut rng = Rng::new(16);
        let lengths = [3, 1, 2];
        let z: Vec<Tensor<f64>> = (0..3).map(|_| rng.gaussian([3, 4], 1.0).unwrap()).collect();
        let mut zh: Vec<Tensor<f64>> = (0..3).map(|_| rng.gaussian([3, 4], 1.0).unwrap()).collect();
        let mut g = Graph::new();
        let zi: Vec<NodeId> = z.iter().map(|t| g.input(t.clone())).collect();
        let hi: Vec<NodeId> = zh.iter().map(|t| g.input(t.clone())).collect();
        let c = layer_denoising_cost(&mut g, &zi, &hi, &lengths, 2.5).unwrap();
        let (a, b) = (stack_valid(&z, &lengths), stack_valid(&zh, &lengths));
        let stats = NormStats::from_rows(&a).unwrap();
        let plain = reconstruction_cost(&a, &b, &stats, 2.5).unwrap();
        assert!((g.value(c).item() - plain).abs() < 1e-12);

        // Padded entries do not matter.
        zh[2].data_mut()[4] = 1e3;
        let mut g2 = Graph::new();
        let zi: Vec<NodeId> = z.iter().map(|t| g2.input(t.clone())).collect();
        let hi: Vec<NodeId> = zh.iter().map(|t| g2.input(t.clone())).collect();
        let c2 = layer_denoising_cost(&mut g2, &zi, &hi, &lengths, 2.5).unwrap();
        assert_eq!(g2.value(c2).item(), g.value(c).item());
    }

    #[test]
    fn graph_cost_gradients_include_batch_statistics() {
        let mut rng = Rng::new(17);
        let lengths = [2, 3];
        let mut p = ParamSet::new();
        for t in 0..3 {
            p.insert(format!("z{t}"), rng.gaussian([2, 3], 1.0).unwrap()).unwrap();
            p.insert(format!("h{t}"), rng.gaussian([2, 3], 1.0).unwrap()).unwrap();
        }
        let r = grad_check(&p, 1e-6, |g, p| {
            g.register_params(p)?;
            let z: Vec<NodeId> = (0..3).map(|t| g.param_id(&format!("z{t}"))).collect::<Result<_>>()?;
            let h: Vec<NodeId> = (0..3).map(|t| g.param_id(&format!("h{t}"))).collect::<Result<_>>()?;
            layer_denoising_cost(g, &z, &h, &lengths, 3.0)
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-6, "{r:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn cost_is_invariant_under_unit_permutation(seed in 0u64..10_000, n in 2usize..6) {
            let mut rng = Rng::new(seed);
            let z = rng.gaussian::<f64>([7, n], 1.0).unwrap();
            let zh = rng.gaussian::<f64>([7, n], 1.0).unwrap();
            let stats = NormStats::from_rows(&z).unwrap();
            let base = reconstruction_cost(&z, &zh, &stats, 1.5).unwrap();
            prop_assert!(base > 0.0);
            let mut perm: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut perm);
            let permute = |t: &Tensor<f64>| {
                let rows: Vec<Vec<f64>> = (0..7).map(|i| perm.iter().map(|&j| t.row(i)[j]).collect()).collect();
                Tensor::from_rows(&rows).unwrap()
            };
            let ps = NormStats {
                mean: perm.iter().map(|&j| stats.mean[j]).collect(),
                std: perm.iter().map(|&j| stats.std[j]).collect(),
            };
            let permuted = reconstruction_cost(&permute(&z), &permute(&zh), &ps, 1.5).unwrap();
            prop_assert!((base - permuted).abs() < 1e-12 * base.max(1.0));
        }
    }

    fn tiny_setup(cfg: &LadderConfig, seed: u64) -> (ParamSet<f64>, Batch<f64>, Batch<f64>) {
        let mut rng = Rng::new(seed);
        let params = cfg.init_params::<f64>(&mut rng).unwrap();
        let lab = random_batch(&mut rng, 3, &[3, 2], &[vec![0, 1], vec![1]]);
        let unl = random_batch(&mut rng, 3, &[2, 3], &[]);
        (params, lab, unl)
    }

    fn loss_values(cfg: &LadderConfig, params: &ParamSet<f64>, lab: &Batch<f64>, unl: Option<&Batch<f64>>) -> (f64, f64, f64, Gradients) {
        let mut g = Graph::new();
        let p = LadderParams::bind(&mut g, params, cfg).unwrap();
        let mut rng = Rng::new(99);
        let l = semi_supervised_loss(&mut g, &p, cfg, Some(lab), unl, &mut rng).unwrap();
        let v = |id| g.value(id).item();
        let (t, s, d) = (v(l.total), v(l.c_sup), v(l.c_dae));
        let grads = g.backward(l.total).unwrap();
        (t, s, d, grads)
    }

    use crate::tensor::Gradients;

    #[test]
    fn all_variants_give_finite_losses() {
        for (dec, var) in ALL_VARIANTS {
            let cfg = tiny(dec, var, 0.3);
            let (params, lab, unl) = tiny_setup(&cfg, 20);
            let (t, s, d, _) = loss_values(&cfg, &params, &lab, Some(&unl));
            assert!(t.is_finite() && s > 0.0 && d >= 0.0, "{dec} {var:?}");
            assert!((t - (s + d)).abs() < 1e-12);
            if dec != DecoderKind::None {
                assert!(d > 0.0);
            }
        }
    }

    #[test]
    fn zero_weights_reduce_to_supervised_cost() {
        for dec in [DecoderKind::Recurrent, DecoderKind::FeedForward] {
            let mut cfg = tiny(dec, NoiseVariant::Rn, 0.3);
            cfg.lambdas = [0.0; 3];
            let (params, lab, unl) = tiny_setup(&cfg, 21);
            let (t, s, d, grads) = loss_values(&cfg, &params, &lab, Some(&unl));
            assert_eq!(d, 0.0);
            assert_eq!(t, s);
            for (name, gr) in grads.iter() {
                if name.starts_with("dec.") {
                    assert!(gr.data().iter().all(|&v| v == 0.0), "{name}");
                }
            }
        }
    }

    #[test]
    fn labeled_only_still_has_reconstruction_cost() {
        let cfg = tiny(DecoderKind::Recurrent, NoiseVariant::Ffn, 0.3);
        let (params, lab, _) = tiny_setup(&cfg, 22);
        let (_, _, d, _) = loss_values(&cfg, &params, &lab, None);
        assert!(d > 0.0);
    }

    #[test]
    fn missing_objective_is_an_error() {
        let cfg = tiny(DecoderKind::None, NoiseVariant::Ffn, 0.3);
        let (params, _, unl) = tiny_setup(&cfg, 23);
        let mut g = Graph::new();
        let p = LadderParams::bind(&mut g, &params, &cfg).unwrap();
        let r = semi_supervised_loss(&mut g, &p, &cfg, None, Some(&unl), &mut Rng::new(1));
        assert!(matches!(r, Err(Error::Argument(_))));
    }

    #[test]
    fn unlabeled_sequence_in_labeled_batch_is_an_error() {
        let cfg = tiny(DecoderKind::None, NoiseVariant::Ffn, 0.3);
        let (params, _, unl) = tiny_setup(&cfg, 24);
        let mut g = Graph::new();
        let p = LadderParams::bind(&mut g, &params, &cfg).unwrap();
        let r = semi_supervised_loss(&mut g, &p, &cfg, Some(&unl), None, &mut Rng::new(1));
        assert!(matches!(r, Err(Error::Data(_))));
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        for dec in [DecoderKind::Recurrent, DecoderKind::FeedForward] {
            for var in [NoiseVariant::Ffn, NoiseVariant::Rn] {
                let cfg = tiny(dec, var, 0.3);
                let (params, lab, unl) = tiny_setup(&cfg, 25);
                let r = grad_check(&params, 1e-5, |g, p| {
                    let lp = LadderParams::bind(g, p, &cfg)?;
                    let mut rng = Rng::new(5);
                    Ok(semi_supervised_loss(g, &lp, &cfg, Some(&lab), Some(&unl), &mut rng)?.total)
                })
                .unwrap();
                assert!(r.max_rel_err < 1e-4, "{dec} {var:?}: {r:?}");
            }
        }
    }
}
