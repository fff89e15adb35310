//! Training objectives and loss diagnostics.
//!
//! Every term is available twice: recorded on a [`Tape`] for training, and
//! as a plain value function used for logging. The value functions accumulate
//! in `f64` regardless of the training precision.

use muvae_autodiff::{AutodiffError, Real, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::model::{ClipConfig, Encoded, LatentStats};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ObjectiveKind {
    Elbo,
    BetaVae,
    MuVae,
}

impl ObjectiveKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ObjectiveKind::Elbo => "elbo",
            ObjectiveKind::BetaVae => "beta",
            ObjectiveKind::MuVae => "mu",
        }
    }
}

impl std::str::FromStr for ObjectiveKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "elbo" => Ok(ObjectiveKind::Elbo),
            "beta" | "beta_vae" => Ok(ObjectiveKind::BetaVae),
            "mu" | "mu_vae" => Ok(ObjectiveKind::MuVae),
            other => Err(format!("unknown objective `{other}` (expected elbo, beta or mu)")),
        }
    }
}

/// Penalty applied to each log-variance entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum VarianceReg {
    /// `log σ²` itself; unbounded below.
    #[default]
    LogVarRaw,
    /// `|log σ²|`.
    AbsLogVar,
    /// `σ² − log σ² − 1`.
    ExpMinusLogMinusOne,
}

impl VarianceReg {
    pub fn as_str(self) -> &'static str {
        match self {
            VarianceReg::LogVarRaw => "log_var_raw",
            VarianceReg::AbsLogVar => "abs_log_var",
            VarianceReg::ExpMinusLogMinusOne => "exp_minus_log_minus_one",
        }
    }

    pub fn apply(self, lv: f64) -> f64 {
        match self {
            VarianceReg::LogVarRaw => lv,
            VarianceReg::AbsLogVar => lv.abs(),
            VarianceReg::ExpMinusLogMinusOne => lv.exp() - lv - 1.0,
        }
    }
}

impl std::str::FromStr for VarianceReg {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "log_var_raw" => Ok(VarianceReg::LogVarRaw),
            "abs_log_var" => Ok(VarianceReg::AbsLogVar),
            "exp_minus_log_minus_one" => Ok(VarianceReg::ExpMinusLogMinusOne),
            other => Err(Error::Config(format!(
                "unknown variance_reg `{other}` (expected log_var_raw, abs_log_var or exp_minus_log_minus_one)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveConfig {
    pub kind: ObjectiveKind,
    /// KL weight; only read for `BetaVae`.
    pub beta: f64,
    /// Latent clipping; independent of `kind`.
    pub clip: ClipConfig,
    /// Only read for `MuVae`.
    pub variance_reg: VarianceReg,
}

impl ObjectiveConfig {
    pub fn elbo() -> Self {
        ObjectiveConfig {
            kind: ObjectiveKind::Elbo,
            beta: 1.0,
            clip: ClipConfig::disabled(),
            variance_reg: VarianceReg::default(),
        }
    }

    pub fn beta_vae(beta: f64) -> Self {
        ObjectiveConfig {
            kind: ObjectiveKind::BetaVae,
            beta,
            ..Self::elbo()
        }
    }

    pub fn mu_vae(clip_coeff: f64) -> Self {
        ObjectiveConfig {
            kind: ObjectiveKind::MuVae,
            clip: ClipConfig::with_coeff(clip_coeff),
            ..Self::elbo()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == ObjectiveKind::BetaVae && !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be positive, got {}", self.beta)));
        }
        self.clip.validate()
    }

    /// Multiplier on the KL term (`0` for the μ-VAE, which has no KL term).
    pub fn kl_weight(&self) -> f64 {
        match self.kind {
            ObjectiveKind::Elbo => 1.0,
            ObjectiveKind::BetaVae => self.beta,
            ObjectiveKind::MuVae => 0.0,
        }
    }
}

/// Scalar values of one objective evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub recon: f64,
    /// The objective's own regularizer: KL for ELBO/β-VAE, mean-plus-variance
    /// terms for the μ-VAE.
    pub regularizer: f64,
    /// Weight on `regularizer` in `total`.
    pub weight: f64,
    /// Closed-form Gaussian KL, whatever the objective.
    pub diagnostic_kl: f64,
    /// Mean term plus variance term, whatever the objective.
    pub mu_regularizer: f64,
}

/// Tape handles for the training loss.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub recon: Var,
}

fn batch_of<S: Real>(tape: &Tape<S>, v: Var) -> usize {
    tape.shape(v).first().copied().unwrap_or(1)
}

/// `Σ (x − x′)² / B`.
pub fn recon_loss<S: Real>(tape: &mut Tape<S>, x: Var, x_hat: Var) -> Result<Var> {
    let b = batch_of(tape, x);
    let d = tape.sub(x, x_hat)?;
    let sq = tape.square(d)?;
    let s = tape.sum(sq)?;
    Ok(tape.scale(s, S::from_f64(1.0 / b as f64))?)
}

/// `Σ (μ² + e^{lv} − lv − 1) / (2B)`.
pub fn kl_loss<S: Real>(tape: &mut Tape<S>, enc: Encoded) -> Result<Var> {
    let b = batch_of(tape, enc.mu);
    let m2 = tape.square(enc.mu)?;
    let var = tape.exp(enc.log_var)?;
    let a = tape.add(m2, var)?;
    let a = tape.sub(a, enc.log_var)?;
    let a = tape.add_scalar(a, -S::ONE)?;
    let s = tape.sum(a)?;
    Ok(tape.scale(s, S::from_f64(0.5 / b as f64))?)
}

/// `|Σ_i Σ_d μ| / B`.
pub fn mu_reg<S: Real>(tape: &mut Tape<S>, mu: Var) -> Result<Var> {
    let b = batch_of(tape, mu);
    let s = tape.sum(mu)?;
    let a = tape.abs(s)?;
    Ok(tape.scale(a, S::from_f64(1.0 / b as f64))?)
}

/// `Σ f(lv) / B` for the chosen variant `f`.
pub fn variance_reg<S: Real>(tape: &mut Tape<S>, log_var: Var, variant: VarianceReg) -> Result<Var> {
    let b = batch_of(tape, log_var);
    let per = match variant {
        VarianceReg::LogVarRaw => log_var,
        VarianceReg::AbsLogVar => tape.abs(log_var)?,
        VarianceReg::ExpMinusLogMinusOne => {
            let e = tape.exp(log_var)?;
            let d = tape.sub(e, log_var)?;
            tape.add_scalar(d, -S::ONE)?
        }
    };
    let s = tape.sum(per)?;
    Ok(tape.scale(s, S::from_f64(1.0 / b as f64))?)
}

/// Records the training loss. `enc.mu` must already be clipped if clipping is on.
pub fn record_loss<S: Real>(
    tape: &mut Tape<S>,
    config: &ObjectiveConfig,
    x: Var,
    x_hat: Var,
    enc: Encoded,
) -> Result<LossVars> {
    let recon = recon_loss(tape, x, x_hat)?;
    let total = match config.kind {
        ObjectiveKind::Elbo | ObjectiveKind::BetaVae => {
            let kl = kl_loss(tape, enc)?;
            let wkl = tape.scale(kl, S::from_f64(config.kl_weight()))?;
            tape.add(recon, wkl)?
        }
        ObjectiveKind::MuVae => {
            let m = mu_reg(tape, enc.mu)?;
            let v = variance_reg(tape, enc.log_var, config.variance_reg)?;
            let r = tape.add(recon, m)?;
            tape.add(r, v)?
        }
    };
    Ok(LossVars { total, recon })
}

fn check_same(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::Autodiff(AutodiffError::Dimension {
            op,
            detail: format!("{a:?} vs {b:?}"),
        }));
    }
    Ok(())
}

/// Value form of [`recon_loss`].
pub fn recon_value<S: Real>(x: &Tensor<S>, x_hat: &Tensor<S>) -> Result<f64> {
    check_same("recon_loss", x.shape(), x_hat.shape())?;
    let b = x.shape().first().copied().unwrap_or(1).max(1);
    let sum: f64 = x
        .data()
        .iter()
        .zip(x_hat.data())
        .map(|(a, c)| (a.to_f64() - c.to_f64()).powi(2))
        .sum();
    Ok(sum / b as f64)
}

/// Value form of [`kl_loss`]; this is the diagnostic KL for every objective.
pub fn kl_value<S: Real>(stats: &LatentStats<S>) -> f64 {
    let sum: f64 = stats
        .mu
        .data()
        .iter()
        .zip(stats.log_var.data())
        .map(|(m, l)| {
            let (m, l) = (m.to_f64(), l.to_f64());
            m * m + l.exp() - l - 1.0
        })
        .sum();
    0.5 * sum / stats.batch().max(1) as f64
}

/// Value form of [`mu_reg`].
pub fn mu_reg_value<S: Real>(stats: &LatentStats<S>) -> f64 {
    let s: f64 = stats.mu.data().iter().map(|m| m.to_f64()).sum();
    s.abs() / stats.batch().max(1) as f64
}

/// Value form of [`variance_reg`].
pub fn variance_reg_value<S: Real>(stats: &LatentStats<S>, variant: VarianceReg) -> f64 {
    let s: f64 = stats.log_var.data().iter().map(|l| variant.apply(l.to_f64())).sum();
    s / stats.batch().max(1) as f64
}

/// Evaluates every term for `config` on already-clipped stats.
pub fn breakdown<S: Real>(
    config: &ObjectiveConfig,
    x: &Tensor<S>,
    x_hat: &Tensor<S>,
    stats: &LatentStats<S>,
) -> Result<LossBreakdown> {
    config.validate()?;
    let recon = recon_value(x, x_hat)?;
    let diagnostic_kl = kl_value(stats);
    let mu_regularizer = mu_reg_value(stats) + variance_reg_value(stats, config.variance_reg);
    let (regularizer, weight) = match config.kind {
        ObjectiveKind::Elbo | ObjectiveKind::BetaVae => (diagnostic_kl, config.kl_weight()),
        ObjectiveKind::MuVae => (mu_regularizer, 1.0),
    };
    Ok(LossBreakdown {
        total: recon + weight * regularizer,
        recon,
        regularizer,
        weight,
        diagnostic_kl,
        mu_regularizer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(mu: &[f64], lv: &[f64], b: usize) -> LatentStats<f64> {
        let d = mu.len() / b;
        LatentStats::new(
            Tensor::new([b, d], mu.to_vec()).unwrap(),
            Tensor::new([b, d], lv.to_vec()).unwrap(),
        )
        .unwrap()
    }

    fn close(a: f64, b: f64) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }

    #[test]
    fn recon_examples() {
        let x = Tensor::new([1, 4], vec![0.0, 1.0, 0.5, 0.5]).unwrap();
        close(recon_value(&x, &x).unwrap(), 0.0);
        let xr = Tensor::new([1, 4], vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        close(recon_value(&x, &xr).unwrap(), 0.5);
        let xr2 = Tensor::new([1, 4], vec![1.0, 0.0, 0.5, 0.5]).unwrap();
        close(recon_value(&x, &xr2).unwrap(), 2.0);
        let bad = Tensor::new([1, 3], vec![0.0; 3]).unwrap();
        assert_eq!(recon_value(&x, &bad).unwrap_err().class(), "dimension");
    }

    #[test]
    fn kl_examples() {
        close(kl_value(&stats(&[0.0, 0.0], &[0.0, 0.0], 1)), 0.0);
        close(kl_value(&stats(&[1.0, 1.0], &[0.0, 0.0], 1)), 1.0);
        let v = kl_value(&stats(&[0.0], &[4f64.ln()], 1));
        close(v, 0.5 * (4.0 - 4f64.ln() - 1.0));
        assert!((v - 0.8069).abs() < 1e-4);
    }

    #[test]
    fn mu_reg_examples() {
        close(mu_reg_value(&stats(&[0.7, -0.2, -0.7, 0.2], &[0.0; 4], 2)), 0.0);
        close(mu_reg_value(&stats(&[1.0, 2.0, 3.0], &[0.0; 3], 1)), 6.0);
        close(mu_reg_value(&stats(&[1.0, 0.0, 0.0, -3.0], &[0.0; 4], 2)), 1.0);
    }

    #[test]
    fn variance_reg_examples() {
        use VarianceReg::*;
        for v in [LogVarRaw, AbsLogVar, ExpMinusLogMinusOne] {
            close(variance_reg_value(&stats(&[0.0], &[0.0], 1), v), 0.0);
        }
        let one = stats(&[0.0], &[1.0], 1);
        close(variance_reg_value(&one, LogVarRaw), 1.0);
        close(variance_reg_value(&one, AbsLogVar), 1.0);
        close(variance_reg_value(&one, ExpMinusLogMinusOne), std::f64::consts::E - 2.0);
        let neg = stats(&[0.0], &[-1.0], 1);
        close(variance_reg_value(&neg, LogVarRaw), -1.0);
        close(variance_reg_value(&neg, AbsLogVar), 1.0);
        close(variance_reg_value(&neg, ExpMinusLogMinusOne), (-1f64).exp());
        assert!(matches!("nope".parse::<VarianceReg>(), Err(Error::Config(_))));
    }

    #[test]
    fn beta_examples() {
        let x = Tensor::new([1, 2], vec![0.0, 0.0]).unwrap();
        let xr = Tensor::new([1, 2], vec![1.0, 1.0]).unwrap();
        // recon 2, kl 0.5 (mu=[1,0], lv=0).
        let s = stats(&[1.0, 0.0], &[0.0, 0.0], 1);
        let b = breakdown(&ObjectiveConfig::beta_vae(4.0), &x, &xr, &s).unwrap();
        close(b.recon, 2.0);
        close(b.diagnostic_kl, 0.5);
        close(b.total, 4.0);
        let e = breakdown(&ObjectiveConfig::elbo(), &x, &xr, &s).unwrap();
        let b1 = breakdown(&ObjectiveConfig::beta_vae(1.0), &x, &xr, &s).unwrap();
        assert_eq!(e.total, b1.total);
        let zero = stats(&[0.0, 0.0], &[0.0, 0.0], 1);
        close(breakdown(&ObjectiveConfig::elbo(), &x, &xr, &zero).unwrap().total, 2.0);
        for beta in [0.0, -1.0, f64::NAN] {
            let err = breakdown(&ObjectiveConfig::beta_vae(beta), &x, &xr, &s).unwrap_err();
            assert!(matches!(err, Error::Config(_)));
        }
    }

    #[test]
    fn mu_vae_perfect_reconstruction_at_origin_is_zero() {
        let x = Tensor::new([2, 2], vec![0.3, 0.4, 0.5, 0.6]).unwrap();
        let s = stats(&[0.0; 4], &[0.0; 4], 2);
        let b = breakdown(&ObjectiveConfig::mu_vae(3.0), &x, &x, &s).unwrap();
        assert_eq!(b.total, 0.0);
    }

    /// Tape route and value route agree for every objective.
    #[test]
    fn tape_and_value_routes_agree() {
        let xd = vec![0.1, 0.9, 0.4, 0.2, 0.7, 0.3];
        let xrd = vec![0.2, 0.8, 0.1, 0.5, 0.6, 0.35];
        let mud = vec![0.5, -1.5, 2.0, 0.25, -0.75, 1.0];
        let lvd = vec![0.1, -0.3, 0.7, -1.2, 0.0, 0.4];
        for cfg in [
            ObjectiveConfig::elbo(),
            ObjectiveConfig::beta_vae(4.0),
            ObjectiveConfig::mu_vae(3.0),
            ObjectiveConfig {
                variance_reg: VarianceReg::ExpMinusLogMinusOne,
                ..ObjectiveConfig::mu_vae(3.0)
            },
        ] {
            let mut tape = Tape::<f64>::new();
            let x = tape.constant(Tensor::new([2, 3], xd.clone()).unwrap()).unwrap();
            let xr = tape.constant(Tensor::new([2, 3], xrd.clone()).unwrap()).unwrap();
            let mu = tape.constant(Tensor::new([2, 3], mud.clone()).unwrap()).unwrap();
            let lv = tape.constant(Tensor::new([2, 3], lvd.clone()).unwrap()).unwrap();
            let loss = record_loss(&mut tape, &cfg, x, xr, Encoded { mu, log_var: lv }).unwrap();
            let s = stats(&mud, &lvd, 2);
            let b = breakdown(&cfg, tape.value(x), tape.value(xr), &s).unwrap();
            let t = tape.value(loss.total).item().unwrap();
            assert!((t - b.total).abs() < 1e-12, "{cfg:?}: {t} vs {}", b.total);
            assert!((b.total - (b.recon + b.weight * b.regularizer)).abs() < 1e-12);
            assert!((tape.value(loss.recon).item().unwrap() - b.recon).abs() < 1e-12);
        }
    }
}
