//! Latent-code probe: a small classifier trained on detached latent means.

use muvae_autodiff::{Activation, AdamState, ParamStore, Real, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::{Batch, CLASSES};
use crate::error::{Error, Result};
use crate::model::{Binding, ClipConfig, Vae};

pub const DEFAULT_HIDDEN: usize = 64;
const LAYERS: [&str; 3] = ["fc1", "fc2", "out"];

/// Three affine layers `D → H → H → 10` with relu between them.
#[derive(Debug, Clone)]
pub struct Probe<S> {
    z_dim: usize,
    hidden: usize,
    params: ParamStore<S>,
}

impl<S: Real> Probe<S> {
    pub fn new(z_dim: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        if z_dim == 0 || hidden == 0 {
            return Err(Error::Config("probe widths must be positive".into()));
        }
        let mut params = ParamStore::new();
        let sizes = [(z_dim, hidden), (hidden, hidden), (hidden, CLASSES)];
        for (name, (fan_in, fan_out)) in LAYERS.iter().zip(sizes) {
            let gain = if *name == "out" { 1.0 } else { std::f64::consts::SQRT_2 };
            let std = gain / (fan_in as f64).sqrt();
            let w = Tensor::from_fn([fan_in, fan_out], |_| {
                S::from_f64(std * rng.sample::<f64, _>(StandardNormal))
            });
            params.add(format!("{name}.w"), w)?;
            params.add(format!("{name}.b"), Tensor::zeros([fan_out]))?;
        }
        Ok(Probe {
            z_dim,
            hidden,
            params,
        })
    }

    pub fn from_params(z_dim: usize, hidden: usize, params: ParamStore<S>) -> Result<Self> {
        let expect = [
            ("fc1.w", vec![z_dim, hidden]),
            ("fc1.b", vec![hidden]),
            ("fc2.w", vec![hidden, hidden]),
            ("fc2.b", vec![hidden]),
            ("out.w", vec![hidden, CLASSES]),
            ("out.b", vec![CLASSES]),
        ];
        let ok = params.len() == expect.len()
            && params
                .iter()
                .zip(&expect)
                .all(|(p, (n, s))| p.name == *n && p.value.shape() == &s[..]);
        if !ok {
            return Err(Error::Integrity(format!(
                "probe tensors do not match a {z_dim}->{hidden}->{hidden}->{CLASSES} layout"
            )));
        }
        Ok(Probe {
            z_dim,
            hidden,
            params,
        })
    }

    pub fn z_dim(&self) -> usize {
        self.z_dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    /// Zeroes the output layer so every input maps to uniform logits.
    pub fn zero_output(&mut self) {
        for name in ["out.w", "out.b"] {
            let id = self.params.find(name).expect("probe has an output layer");
            self.params.value_mut(id).data_mut().iter_mut().for_each(|v| *v = S::ZERO);
        }
    }

    /// Records the probe on `tape`; `z` must be `[B, D]`.
    pub fn forward(&self, tape: &mut Tape<S>, z: Var, bind: Binding) -> Result<Var> {
        let mut h = z;
        for (i, layer) in LAYERS.iter().enumerate() {
            let [w, b] = [format!("{layer}.w"), format!("{layer}.b")].map(|n| {
                let id = self.params.find(&n).expect("fixed probe layout");
                match bind {
                    Binding::Train => tape.param(&self.params, id),
                    Binding::Frozen => tape.frozen_param(&self.params, id),
                }
            });
            h = tape.affine(h, w?, b?)?;
            if i + 1 < LAYERS.len() {
                h = tape.activation(h, Activation::Relu)?;
            }
        }
        Ok(h)
    }

    pub fn logits(&self, z: &Tensor<S>) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone())?;
        let out = self.forward(&mut tape, zv, Binding::Frozen)?;
        Ok(tape.value(out).clone())
    }
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax<S: Real>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy<S: Real>(logits: &Tensor<S>, labels: &[usize]) -> f64 {
    let k = logits.shape().last().copied().unwrap_or(1);
    if labels.is_empty() {
        return 0.0;
    }
    let hits = logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count();
    hits as f64 / labels.len() as f64
}

/// Outcome of one probe update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeStep {
    pub loss: f64,
    /// Accuracy on this batch before the update.
    pub accuracy: f64,
}

/// Updates the probe on freshly encoded, detached latent means with the
/// VAE frozen. Consumes no randomness.
pub fn probe_step<S: Real>(
    vae: &Vae<S>,
    clip: &ClipConfig,
    probe: &mut Probe<S>,
    adam: &mut AdamState<S>,
    batch: &Batch<S>,
) -> Result<ProbeStep> {
    let mut tape = Tape::new();
    let x = tape.constant(batch.images.clone())?;
    let enc = vae.encode(&mut tape, x, Binding::Frozen)?;
    let mu = match clip.bound(vae.z_dim()) {
        Some(b) => tape.row_norm_clip(enc.mu, S::from_f64(b), clip.gradient)?,
        None => enc.mu,
    };
    let z = tape.detach(mu)?;
    let logits = probe.forward(&mut tape, z, Binding::Train)?;
    let acc = accuracy(tape.value(logits), &batch.labels);
    let loss = tape.softmax_cross_entropy(logits, &batch.labels)?;
    let grads = tape.backward(loss)?;
    let params = probe.params_mut();
    params.zero_grad();
    params.accumulate(&tape, &grads)?;
    adam.step(params)?;
    Ok(ProbeStep {
        loss: tape.value(loss).item()?.to_f64(),
        accuracy: acc,
    })
}
