//! Central finite-difference gradient verification in 64-bit precision.
//!
//! The relative error of one coordinate is `|a − n| / max(|a|, |n|, 1e-8)`
//! where `a` is the autodiff gradient and `n = (f(θ+h) − f(θ−h)) / 2h`.
//!
//! Coordinates sitting on a kink (relu, abs, an active/inactive clip
//! boundary) have no unique derivative. With [`KinkPolicy::Exclude`] such a
//! coordinate is detected by comparing the second difference
//! `(f(θ+s) − 2f(θ) + f(θ−s)) / s²` at `s = h` and `s = h/2`: on smooth
//! functions both estimate `f''` and agree, while a slope jump `J` inside
//! the stencil makes them differ by roughly `J/h`. Detected coordinates are
//! listed in [`GradCheckReport::excluded`] and left out of the maximum.

use crate::error::{AutodiffError, Result};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KinkPolicy {
    #[default]
    Include,
    Exclude,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub step: f64,
    pub kinks: KinkPolicy,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-3,
            kinks: KinkPolicy::Include,
        }
    }
}

impl GradCheckOptions {
    pub fn with_step(step: f64) -> Self {
        GradCheckOptions {
            step,
            ..Self::default()
        }
    }

    pub fn excluding_kinks(mut self) -> Self {
        self.kinks = KinkPolicy::Exclude;
        self
    }
}

/// Which coordinates of each parameter tensor to probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coordinates {
    All,
    /// Up to `n` evenly spaced coordinates per tensor.
    Strided(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat index (across all probed tensors) of the worst coordinate.
    pub worst: Option<usize>,
    pub checked: usize,
    pub excluded: Vec<usize>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn scalar_of(tape: &Tape<f64>, v: Var) -> Result<f64> {
    let value = tape.value(v);
    if !value.is_scalar() {
        return Err(AutodiffError::Contract(format!(
            "gradient check needs a scalar function, got shape {:?}",
            value.shape()
        )));
    }
    Ok(value.data()[0])
}

struct Probe {
    analytic: f64,
    numeric: f64,
    kink: bool,
}

fn probe(eval: &mut dyn FnMut(f64) -> Result<f64>, center: f64, analytic: f64, opts: &GradCheckOptions) -> Result<Probe> {
    let h = opts.step;
    let plus = eval(center + h)?;
    let minus = eval(center - h)?;
    let numeric = (plus - minus) / (2.0 * h);
    let kink = match opts.kinks {
        KinkPolicy::Include => false,
        KinkPolicy::Exclude => {
            let f0 = eval(center)?;
            let half = h / 2.0;
            let plus_half = eval(center + half)?;
            let minus_half = eval(center - half)?;
            let c1 = (plus - 2.0 * f0 + minus) / (h * h);
            let c2 = (plus_half - 2.0 * f0 + minus_half) / (half * half);
            (c1 - c2).abs() > 0.1 * c1.abs().max(c2.abs()) + 1e-4
        }
    };
    Ok(Probe {
        analytic,
        numeric,
        kink,
    })
}

fn summarize(probes: Vec<Probe>) -> GradCheckReport {
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        excluded: Vec::new(),
        analytic: Vec::with_capacity(probes.len()),
        numeric: Vec::with_capacity(probes.len()),
    };
    for (i, p) in probes.into_iter().enumerate() {
        report.analytic.push(p.analytic);
        report.numeric.push(p.numeric);
        if p.kink {
            report.excluded.push(i);
            continue;
        }
        report.checked += 1;
        let err = relative_error(p.analytic, p.numeric);
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = err;
            report.worst = Some(i);
        }
    }
    report
}

/// Checks the gradient of `f` at `theta`, probing every coordinate.
pub fn grad_check<F>(f: F, theta: &Tensor<f64>, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(theta.clone(), true)?;
    let out = f(&mut tape, x)?;
    scalar_of(&tape, out)?;
    let grads = tape.backward(out)?;
    let analytic = grads.wrt_tensor(&tape, x);

    let mut probes = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let mut eval = |v: f64| -> Result<f64> {
            let mut shifted = theta.clone();
            shifted.data_mut()[i] = v;
            let mut tape = Tape::new();
            let x = tape.leaf(shifted, false)?;
            let out = f(&mut tape, x)?;
            scalar_of(&tape, out)
        };
        probes.push(probe(&mut eval, theta.data()[i], analytic.data()[i], &opts)?);
    }
    Ok(summarize(probes))
}

/// Checks gradients of a loss built from every parameter of `params`.
///
/// `f` must bind parameters with [`Tape::param`] so their gradients can be
/// collected.
pub fn grad_check_params<F>(
    f: F,
    params: &ParamStore<f64>,
    coordinates: Coordinates,
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut with_grads = params.clone();
    with_grads.zero_grad();
    let mut tape = Tape::new();
    let out = f(&mut tape, &with_grads)?;
    scalar_of(&tape, out)?;
    let grads = tape.backward(out)?;
    with_grads.accumulate(&tape, &grads)?;

    let mut probes = Vec::new();
    for id in params.ids() {
        let n = params.value(id).len();
        let picks: Vec<usize> = match coordinates {
            Coordinates::All => (0..n).collect(),
            Coordinates::Strided(k) if k >= n => (0..n).collect(),
            Coordinates::Strided(k) => (0..k).map(|j| j * n / k).collect(),
        };
        for i in picks {
            let mut eval = |v: f64| -> Result<f64> {
                let mut shifted = params.clone();
                shifted.value_mut(id).data_mut()[i] = v;
                let mut tape = Tape::new();
                let out = f(&mut tape, &shifted)?;
                scalar_of(&tape, out)
            };
            let analytic = with_grads.grad(id).data()[i];
            probes.push(probe(&mut eval, params.value(id).data()[i], analytic, &opts)?);
        }
    }
    Ok(summarize(probes))
}
