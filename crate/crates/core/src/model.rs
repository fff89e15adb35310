//! Encoder/decoder networks, latent clipping and reparameterization.

use muvae_autodiff::{Activation, ClipGradient, ParamStore, Real, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::{IMAGE_SIDE, PIXELS};
use crate::error::{Error, Result};

/// Rows per chunk when running inference over whole datasets.
const INFERENCE_CHUNK: usize = 250;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Architecture {
    /// Two strided convolutions, one dense layer, two latent heads; mirrored decoder.
    CnnMain,
    /// Dense encoder/decoder with a 2-D latent.
    ToyDense2d,
}

impl Architecture {
    pub fn as_str(self) -> &'static str {
        match self {
            Architecture::CnnMain => "cnn_main",
            Architecture::ToyDense2d => "toy_dense_2d",
        }
    }

    fn width_count(self) -> usize {
        match self {
            Architecture::CnnMain => 3,
            Architecture::ToyDense2d => 2,
        }
    }
}

impl std::str::FromStr for Architecture {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "cnn_main" => Ok(Architecture::CnnMain),
            "toy_dense_2d" => Ok(Architecture::ToyDense2d),
            other => Err(format!("unknown preset `{other}` (expected cnn_main or toy_dense_2d)")),
        }
    }
}

/// Network shape. `widths` is `[conv1 channels, conv2 channels, dense]` for
/// `cnn_main` and `[hidden1, hidden2]` for `toy_dense_2d`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelPreset {
    pub architecture: Architecture,
    pub activation: Activation,
    pub z_dim: usize,
    pub widths: Vec<usize>,
}

impl ModelPreset {
    pub fn cnn_main() -> Self {
        ModelPreset {
            architecture: Architecture::CnnMain,
            activation: Activation::LeakyRelu,
            z_dim: 10,
            widths: vec![16, 32, 128],
        }
    }

    pub fn toy_dense_2d(activation: Activation) -> Self {
        ModelPreset {
            architecture: Architecture::ToyDense2d,
            activation,
            z_dim: 2,
            widths: vec![256, 64],
        }
    }

    pub fn default_for(architecture: Architecture) -> Self {
        match architecture {
            Architecture::CnnMain => Self::cnn_main(),
            Architecture::ToyDense2d => Self::toy_dense_2d(Activation::Tanh),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.z_dim == 0 {
            return Err(Error::Config("z_dim must be at least 1".into()));
        }
        if self.widths.len() != self.architecture.width_count() || self.widths.contains(&0) {
            return Err(Error::Config(format!(
                "{} needs {} positive widths, got {:?}",
                self.architecture.as_str(),
                self.architecture.width_count(),
                self.widths
            )));
        }
        Ok(())
    }
}

/// Latent clipping coefficient; the effective bound is `c·√z_dim`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipConfig {
    pub coeff: Option<f64>,
    pub gradient: ClipGradient,
}

impl ClipConfig {
    pub fn disabled() -> Self {
        ClipConfig {
            coeff: None,
            gradient: ClipGradient::Exact,
        }
    }

    pub fn with_coeff(c: f64) -> Self {
        ClipConfig {
            coeff: Some(c),
            gradient: ClipGradient::Exact,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.coeff {
            Some(c) if !(c > 0.0 && c.is_finite()) => {
                Err(Error::Config(format!("clip coefficient must be positive, got {c}")))
            }
            _ => Ok(()),
        }
    }

    pub fn bound(&self, z_dim: usize) -> Option<f64> {
        self.coeff.map(|c| c * (z_dim as f64).sqrt())
    }
}

/// Per-sample posterior means and log-variances, both `[B, D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentStats<S> {
    pub mu: Tensor<S>,
    pub log_var: Tensor<S>,
}

impl<S: Real> LatentStats<S> {
    pub fn new(mu: Tensor<S>, log_var: Tensor<S>) -> Result<Self> {
        if mu.shape().len() != 2 || mu.shape() != log_var.shape() {
            return Err(Error::Contract(format!(
                "latent stats shapes differ or are not 2-D: {:?} vs {:?}",
                mu.shape(),
                log_var.shape()
            )));
        }
        Ok(LatentStats { mu, log_var })
    }

    pub fn batch(&self) -> usize {
        self.mu.shape()[0]
    }

    pub fn z_dim(&self) -> usize {
        self.mu.shape()[1]
    }

    /// Largest per-sample L2 norm of `mu`.
    pub fn max_mu_norm(&self) -> f64 {
        self.mu
            .data()
            .chunks(self.z_dim())
            .map(|r| r.iter().map(|v| v.to_f64().powi(2)).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }
}

/// Whether parameters recorded on a tape receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binding {
    Train,
    Frozen,
}

/// Tape handles for encoder outputs.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    pub mu: Var,
    pub log_var: Var,
}

struct LayerSpec {
    name: &'static str,
    shape: Vec<usize>,
    /// `None` marks a bias (zero-initialized).
    fan_in: Option<usize>,
    gain: f64,
}

fn weight(name: &'static str, shape: Vec<usize>, fan_in: usize, gain: f64) -> LayerSpec {
    LayerSpec {
        name,
        shape,
        fan_in: Some(fan_in),
        gain,
    }
}

fn bias(name: &'static str, width: usize) -> LayerSpec {
    LayerSpec {
        name,
        shape: vec![width],
        fan_in: None,
        gain: 0.0,
    }
}

// cnn_main spatial sizes: 28 -(k4,s2)-> 13 -(k5,s2)-> 5.
const CONV1_K: usize = 4;
const CONV2_K: usize = 5;
const STRIDE: usize = 2;
const MID_SIDE: usize = 13;
const LOW_SIDE: usize = 5;

fn layout(preset: &ModelPreset) -> Vec<LayerSpec> {
    let g = match preset.activation {
        Activation::Relu | Activation::LeakyRelu => std::f64::consts::SQRT_2,
        Activation::Tanh | Activation::Sigmoid => 1.0,
    };
    let d = preset.z_dim;
    let w = &preset.widths;
    match preset.architecture {
        Architecture::CnnMain => {
            let (c1, c2, h) = (w[0], w[1], w[2]);
            let flat = c2 * LOW_SIDE * LOW_SIDE;
            // Transposed kernels spread each input over k²/s² outputs on average.
            let t_fan = |f: usize, k: usize| (f * k * k / (STRIDE * STRIDE)).max(1);
            vec![
                weight("enc.conv1.k", vec![c1, 1, CONV1_K, CONV1_K], CONV1_K * CONV1_K, g),
                bias("enc.conv1.b", c1),
                weight("enc.conv2.k", vec![c2, c1, CONV2_K, CONV2_K], c1 * CONV2_K * CONV2_K, g),
                bias("enc.conv2.b", c2),
                weight("enc.fc.w", vec![flat, h], flat, g),
                bias("enc.fc.b", h),
                weight("enc.mu.w", vec![h, d], h, 1.0),
                bias("enc.mu.b", d),
                weight("enc.logvar.w", vec![h, d], h, 1.0),
                bias("enc.logvar.b", d),
                weight("dec.fc1.w", vec![d, h], d, g),
                bias("dec.fc1.b", h),
                weight("dec.fc2.w", vec![h, flat], h, g),
                bias("dec.fc2.b", flat),
                weight("dec.deconv1.k", vec![c2, c1, CONV2_K, CONV2_K], t_fan(c2, CONV2_K), g),
                bias("dec.deconv1.b", c1),
                weight("dec.deconv2.k", vec![c1, 1, CONV1_K, CONV1_K], t_fan(c1, CONV1_K), 1.0),
                bias("dec.deconv2.b", 1),
            ]
        }
        Architecture::ToyDense2d => {
            let (h1, h2) = (w[0], w[1]);
            vec![
                weight("enc.fc1.w", vec![PIXELS, h1], PIXELS, g),
                bias("enc.fc1.b", h1),
                weight("enc.fc2.w", vec![h1, h2], h1, g),
                bias("enc.fc2.b", h2),
                weight("enc.mu.w", vec![h2, d], h2, 1.0),
                bias("enc.mu.b", d),
                weight("enc.logvar.w", vec![h2, d], h2, 1.0),
                bias("enc.logvar.b", d),
                weight("dec.fc1.w", vec![d, h2], d, g),
                bias("dec.fc1.b", h2),
                weight("dec.fc2.w", vec![h2, h1], h2, g),
                bias("dec.fc2.b", h1),
                weight("dec.out.w", vec![h1, PIXELS], h1, 1.0),
                bias("dec.out.b", PIXELS),
            ]
        }
    }
}

/// A VAE: preset plus its parameters.
#[derive(Debug, Clone)]
pub struct Vae<S> {
    preset: ModelPreset,
    params: ParamStore<S>,
}

impl<S: Real> Vae<S> {
    /// Weights ~ N(0, gain²/fan_in), biases zero.
    pub fn new(preset: ModelPreset, rng: &mut impl Rng) -> Result<Self> {
        preset.validate()?;
        let mut params = ParamStore::new();
        for spec in layout(&preset) {
            let value = match spec.fan_in {
                Some(fan_in) => {
                    let std = spec.gain / (fan_in as f64).sqrt();
                    Tensor::from_fn(spec.shape, |_| {
                        S::from_f64(std * rng.sample::<f64, _>(StandardNormal))
                    })
                }
                None => Tensor::zeros(spec.shape),
            };
            params.add(spec.name, value)?;
        }
        Ok(Vae { preset, params })
    }

    /// Wraps loaded parameters after checking names and shapes against the preset.
    pub fn from_params(preset: ModelPreset, params: ParamStore<S>) -> Result<Self> {
        preset.validate()?;
        let specs = layout(&preset);
        if specs.len() != params.len() {
            return Err(Error::Integrity(format!(
                "preset {} expects {} tensors, found {}",
                preset.architecture.as_str(),
                specs.len(),
                params.len()
            )));
        }
        for (spec, p) in specs.iter().zip(params.iter()) {
            if spec.name != p.name || spec.shape != p.value.shape() {
                return Err(Error::Integrity(format!(
                    "expected {} {:?}, found {} {:?}",
                    spec.name,
                    spec.shape,
                    p.name,
                    p.value.shape()
                )));
            }
        }
        Ok(Vae { preset, params })
    }

    pub fn preset(&self) -> &ModelPreset {
        &self.preset
    }

    pub fn z_dim(&self) -> usize {
        self.preset.z_dim
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    /// Sets both latent heads to zero.
    pub fn zero_heads(&mut self) {
        for name in ["enc.mu.w", "enc.mu.b", "enc.logvar.w", "enc.logvar.b"] {
            let id = self.params.find(name).expect("every preset has latent heads");
            self.params.value_mut(id).data_mut().iter_mut().for_each(|v| *v = S::ZERO);
        }
    }

    fn bind(&self, tape: &mut Tape<S>, name: &str, binding: Binding) -> Result<Var> {
        let id = self
            .params
            .find(name)
            .unwrap_or_else(|| panic!("layout always defines {name}"));
        Ok(match binding {
            Binding::Train => tape.param(&self.params, id)?,
            Binding::Frozen => tape.frozen_param(&self.params, id)?,
        })
    }

    fn dense(&self, tape: &mut Tape<S>, x: Var, layer: &str, bind: Binding) -> Result<Var> {
        let w = self.bind(tape, &format!("{layer}.w"), bind)?;
        let b = self.bind(tape, &format!("{layer}.b"), bind)?;
        Ok(tape.affine(x, w, b)?)
    }

    /// Records the encoder on `tape`. `x` must be `[B, 1, 28, 28]`.
    pub fn encode(&self, tape: &mut Tape<S>, x: Var, bind: Binding) -> Result<Encoded> {
        let shape = tape.shape(x);
        if shape.len() != 4 || shape[1..] != [1, IMAGE_SIDE, IMAGE_SIDE] {
            return Err(Error::Autodiff(muvae_autodiff::AutodiffError::Dimension {
                op: "encode",
                detail: format!("expected [B, 1, 28, 28], got {shape:?}"),
            }));
        }
        let batch = shape[0];
        let act = self.preset.activation;
        let hidden = match self.preset.architecture {
            Architecture::CnnMain => {
                let k1 = self.bind(tape, "enc.conv1.k", bind)?;
                let b1 = self.bind(tape, "enc.conv1.b", bind)?;
                let h = tape.conv2d(x, k1, STRIDE)?;
                let h = tape.channel_bias(h, b1)?;
                let h = tape.activation(h, act)?;
                let k2 = self.bind(tape, "enc.conv2.k", bind)?;
                let b2 = self.bind(tape, "enc.conv2.b", bind)?;
                let h = tape.conv2d(h, k2, STRIDE)?;
                let h = tape.channel_bias(h, b2)?;
                let h = tape.activation(h, act)?;
                let flat = self.preset.widths[1] * LOW_SIDE * LOW_SIDE;
                let h = tape.reshape(h, [batch, flat])?;
                let h = self.dense(tape, h, "enc.fc", bind)?;
                tape.activation(h, act)?
            }
            Architecture::ToyDense2d => {
                let h = tape.reshape(x, [batch, PIXELS])?;
                let h = self.dense(tape, h, "enc.fc1", bind)?;
                let h = tape.activation(h, act)?;
                let h = self.dense(tape, h, "enc.fc2", bind)?;
                tape.activation(h, act)?
            }
        };
        let mu = self.dense(tape, hidden, "enc.mu", bind)?;
        let log_var = self.dense(tape, hidden, "enc.logvar", bind)?;
        Ok(Encoded { mu, log_var })
    }

    /// Records the decoder on `tape`; output is `[B, 1, 28, 28]` in (0, 1).
    pub fn decode(&self, tape: &mut Tape<S>, z: Var, bind: Binding) -> Result<Var> {
        let shape = tape.shape(z);
        if shape.len() != 2 || shape[1] != self.preset.z_dim {
            return Err(Error::Autodiff(muvae_autodiff::AutodiffError::Dimension {
                op: "decode",
                detail: format!("expected [B, {}], got {shape:?}", self.preset.z_dim),
            }));
        }
        let batch = shape[0];
        let act = self.preset.activation;
        let logits = match self.preset.architecture {
            Architecture::CnnMain => {
                let c2 = self.preset.widths[1];
                let h = self.dense(tape, z, "dec.fc1", bind)?;
                let h = tape.activation(h, act)?;
                let h = self.dense(tape, h, "dec.fc2", bind)?;
                let h = tape.activation(h, act)?;
                let h = tape.reshape(h, [batch, c2, LOW_SIDE, LOW_SIDE])?;
                let k1 = self.bind(tape, "dec.deconv1.k", bind)?;
                let b1 = self.bind(tape, "dec.deconv1.b", bind)?;
                let h = tape.conv2d_transpose(h, k1, STRIDE)?;
                debug_assert_eq!(tape.shape(h)[2], MID_SIDE);
                let h = tape.channel_bias(h, b1)?;
                let h = tape.activation(h, act)?;
                let k2 = self.bind(tape, "dec.deconv2.k", bind)?;
                let b2 = self.bind(tape, "dec.deconv2.b", bind)?;
                let h = tape.conv2d_transpose(h, k2, STRIDE)?;
                tape.channel_bias(h, b2)?
            }
            Architecture::ToyDense2d => {
                let h = self.dense(tape, z, "dec.fc1", bind)?;
                let h = tape.activation(h, act)?;
                let h = self.dense(tape, h, "dec.fc2", bind)?;
                let h = tape.activation(h, act)?;
                let h = self.dense(tape, h, "dec.out", bind)?;
                tape.reshape(h, [batch, 1, IMAGE_SIDE, IMAGE_SIDE])?
            }
        };
        Ok(tape.activation(logits, Activation::Sigmoid)?)
    }

    /// Encodes `x` with frozen parameters, clipping `mu` when `clip_bound` is set.
    pub fn encode_stats(&self, x: &Tensor<S>, clip: &ClipConfig) -> Result<LatentStats<S>> {
        let bound = clip.bound(self.z_dim());
        let n = x.shape().first().copied().unwrap_or(0);
        let mut mu = Vec::with_capacity(n * self.z_dim());
        let mut lv = Vec::with_capacity(n * self.z_dim());
        for start in (0..n).step_by(INFERENCE_CHUNK) {
            let chunk = x.slice_rows(start, (start + INFERENCE_CHUNK).min(n))?;
            let mut tape = Tape::new();
            let xv = tape.constant(chunk)?;
            let enc = self.encode(&mut tape, xv, Binding::Frozen)?;
            let m = match bound {
                Some(b) => tape.row_norm_clip(enc.mu, S::from_f64(b), clip.gradient)?,
                None => enc.mu,
            };
            mu.extend_from_slice(tape.value(m).data());
            lv.extend_from_slice(tape.value(enc.log_var).data());
        }
        let d = self.z_dim();
        LatentStats::new(Tensor::new([n, d], mu)?, Tensor::new([n, d], lv)?)
    }

    /// Decodes `z: [N, D]` with frozen parameters.
    pub fn decode_values(&self, z: &Tensor<S>) -> Result<Tensor<S>> {
        let n = z.shape().first().copied().unwrap_or(0);
        let mut out = Vec::with_capacity(n * PIXELS);
        for start in (0..n).step_by(INFERENCE_CHUNK) {
            let chunk = z.slice_rows(start, (start + INFERENCE_CHUNK).min(n))?;
            let mut tape = Tape::new();
            let zv = tape.constant(chunk)?;
            let x = self.decode(&mut tape, zv, Binding::Frozen)?;
            out.extend_from_slice(tape.value(x).data());
        }
        Ok(Tensor::new([n, 1, IMAGE_SIDE, IMAGE_SIDE], out)?)
    }
}

/// Records `z = mu + exp(log_var / 2) ⊙ ε` with `ε` held constant.
pub fn reparameterize<S: Real>(tape: &mut Tape<S>, enc: Encoded, eps: Tensor<S>) -> Result<Var> {
    if eps.shape() != tape.shape(enc.mu) {
        return Err(Error::Autodiff(muvae_autodiff::AutodiffError::Dimension {
            op: "reparameterize",
            detail: format!("noise {:?} vs mu {:?}", eps.shape(), tape.shape(enc.mu)),
        }));
    }
    let half = tape.scale(enc.log_var, S::from_f64(0.5))?;
    let std = tape.exp(half)?;
    let e = tape.constant(eps)?;
    let spread = tape.mul(std, e)?;
    Ok(tape.add(enc.mu, spread)?)
}

/// Standard-normal noise of the given shape.
pub fn standard_normal<S: Real>(rng: &mut impl Rng, shape: &[usize]) -> Tensor<S> {
    Tensor::from_fn(shape.to_vec(), |_| S::from_f64(rng.sample::<f64, _>(StandardNormal)))
}

/// Value-level latent clip: rows with norm above `bound` are rescaled onto it.
pub fn latent_clip<S: Real>(mu: &Tensor<S>, bound: S) -> Result<Tensor<S>> {
    let mut tape = Tape::new();
    let m = tape.constant(mu.clone())?;
    let c = tape.row_norm_clip(m, bound, ClipGradient::Exact)?;
    Ok(tape.value(c).clone())
}
