//! Training loop, per-epoch metrics and the objective × dataset × seed matrix.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use muvae_autodiff::{AdamState, AutodiffError, Real, Tape, Tensor, Var};
use sha2::{Digest, Sha256};

use crate::checkpoint;
use crate::data::{self, Batch, Dataset, DatasetId, Split};
use crate::error::{Error, Result};
use crate::manifest::{RunManifest, MANIFEST_FILE};
use crate::model::{reparameterize, standard_normal, Binding, Encoded, LatentStats, Vae};
use crate::objectives::{self, breakdown, record_loss, LossBreakdown, ObjectiveConfig, ObjectiveKind};
use crate::probe::{accuracy, probe_step, Probe, ProbeStep};
use crate::seed::{rng_for, Stream};

pub const METRICS_FILE: &str = "metrics.csv";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.csv";
pub const METRICS_HEADER: &str = "epoch,recon,kl,reg,acc_train,acc_test";
pub const DIAGNOSTICS_HEADER: &str =
    "epoch,train_total,mean_log_var,min_log_var,max_mu_norm,clip_violations,test_recon,test_kl,acc_test_sampled";

/// Relative slack allowed above the clipping bound.
pub const CLIP_TOLERANCE: f64 = 1e-6;

/// One row of `metrics.csv`. Losses are means over the epoch's training batches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRecord {
    /// 1-based.
    pub epoch: usize,
    pub recon: f64,
    /// Closed-form Gaussian KL.
    pub kl: f64,
    /// Mean term plus variance term, logged for every objective.
    pub reg: f64,
    /// Probe accuracy on training batches, measured before each probe update.
    pub acc_train: Option<f64>,
    /// Probe accuracy on the test subset with `z` = clipped `mu`.
    pub acc_test: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochDiagnostics {
    pub epoch: usize,
    pub train_total: f64,
    pub mean_log_var: f64,
    pub min_log_var: f64,
    /// Largest per-sample `mu` norm seen in any training batch (after clipping).
    pub max_mu_norm: f64,
    /// Training batches whose clipped `mu` exceeded the bound.
    pub clip_violations: usize,
    pub test_recon: f64,
    pub test_kl: f64,
    /// Probe test accuracy with `z` sampled from the posterior.
    pub acc_test_sampled: Option<f64>,
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.epoch,
            r.recon,
            r.kl,
            r.reg,
            opt_cell(r.acc_train),
            opt_cell(r.acc_test)
        );
    }
    out
}

pub fn diagnostics_csv(records: &[EpochDiagnostics]) -> String {
    let mut out = format!("{DIAGNOSTICS_HEADER}\n");
    for d in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            d.epoch,
            d.train_total,
            d.mean_log_var,
            d.min_log_var,
            d.max_mu_norm,
            d.clip_violations,
            d.test_recon,
            d.test_kl,
            opt_cell(d.acc_test_sampled)
        );
    }
    out
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Record a digest of the VAE parameters after every step.
    pub trace_params: bool,
    /// Print one progress line per epoch to stderr.
    pub progress: bool,
}

/// Where a run hit a non-finite value.
#[derive(Debug, Clone, PartialEq)]
pub struct Divergence {
    /// 1-based.
    pub epoch: usize,
    /// 0-based within the epoch.
    pub batch: usize,
    pub detail: String,
}

impl From<Divergence> for Error {
    fn from(d: Divergence) -> Self {
        Error::Diverged {
            epoch: d.epoch,
            batch: d.batch,
            detail: d.detail,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<S> {
    pub manifest: RunManifest,
    pub vae: Vae<S>,
    pub probe: Option<Probe<S>>,
    pub metrics: Vec<MetricsRecord>,
    pub diagnostics: Vec<EpochDiagnostics>,
    /// Max clipped `mu` norm of every training batch, in order.
    pub batch_max_mu_norms: Vec<f64>,
    /// SHA-256 of the VAE parameters after each step, when tracing.
    pub param_trace: Vec<[u8; 32]>,
    pub divergence: Option<Divergence>,
}

impl<S: Real> TrainOutcome<S> {
    pub fn final_metrics(&self) -> Option<&MetricsRecord> {
        self.metrics.last()
    }

    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        match &self.probe {
            Some(p) => checkpoint::encode(&[("vae", self.vae.params()), ("probe", p.params())]),
            None => checkpoint::encode(&[("vae", self.vae.params())]),
        }
    }
}

/// Result of one VAE update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VaeStep {
    pub loss: LossBreakdown,
    pub max_mu_norm: f64,
    pub mean_log_var: f64,
    pub min_log_var: f64,
}

fn clip_mu<S: Real>(tape: &mut Tape<S>, vae: &Vae<S>, obj: &ObjectiveConfig, enc: Encoded) -> Result<Encoded> {
    Ok(match obj.clip.bound(vae.z_dim()) {
        Some(b) => Encoded {
            mu: tape.row_norm_clip(enc.mu, S::from_f64(b), obj.clip.gradient)?,
            log_var: enc.log_var,
        },
        None => enc,
    })
}

/// Records encode, clip, sample, decode and loss for input `x` with noise
/// `eps`. Returns the loss handles, the clipped encoder outputs and `x̂`.
pub fn record_objective<S: Real>(
    tape: &mut Tape<S>,
    vae: &Vae<S>,
    obj: &ObjectiveConfig,
    x: Var,
    eps: Tensor<S>,
    bind: Binding,
) -> Result<(objectives::LossVars, Encoded, Var)> {
    let enc = vae.encode(tape, x, bind)?;
    let enc = clip_mu(tape, vae, obj, enc)?;
    let z = reparameterize(tape, enc, eps)?;
    let x_hat = vae.decode(tape, z, bind)?;
    let loss = record_loss(tape, obj, x, x_hat, enc)?;
    Ok((loss, enc, x_hat))
}

/// One Adam update of the VAE on `batch`; the probe is not involved.
pub fn vae_step<S: Real>(
    vae: &mut Vae<S>,
    adam: &mut AdamState<S>,
    obj: &ObjectiveConfig,
    batch: &Batch<S>,
    eps: Tensor<S>,
) -> Result<VaeStep> {
    let mut tape = Tape::new();
    let x = tape.constant(batch.images.clone())?;
    let (loss, enc, x_hat) = record_objective(&mut tape, vae, obj, x, eps, Binding::Train)?;
    let stats = LatentStats::new(tape.value(enc.mu).clone(), tape.value(enc.log_var).clone())?;
    let parts = breakdown(obj, &batch.images, tape.value(x_hat), &stats)?;
    let grads = tape.backward(loss.total)?;
    let params = vae.params_mut();
    params.zero_grad();
    params.accumulate(&tape, &grads)?;
    adam.step(params)?;
    if !params.iter().all(|p| p.value.all_finite()) {
        return Err(AutodiffError::NonFinite { op: "adam" }.into());
    }
    let lv = stats.log_var.data();
    Ok(VaeStep {
        loss: parts,
        max_mu_norm: stats.max_mu_norm(),
        mean_log_var: lv.iter().map(|v| v.to_f64()).sum::<f64>() / lv.len() as f64,
        min_log_var: lv.iter().map(|v| v.to_f64()).fold(f64::INFINITY, f64::min),
    })
}

/// Phase 1 updates the VAE with the probe frozen; phase 2 updates the probe on
/// freshly encoded latents with the VAE frozen.
pub fn alternating_step<S: Real>(
    vae: &mut Vae<S>,
    vae_adam: &mut AdamState<S>,
    probe: Option<(&mut Probe<S>, &mut AdamState<S>)>,
    obj: &ObjectiveConfig,
    batch: &Batch<S>,
    eps: Tensor<S>,
) -> Result<(VaeStep, Option<ProbeStep>)> {
    let v = vae_step(vae, vae_adam, obj, batch, eps)?;
    let p = match probe {
        Some((probe, adam)) => Some(probe_step(vae, &obj.clip, probe, adam, batch)?),
        None => None,
    };
    Ok((v, p))
}

fn param_digest<S: Real>(vae: &Vae<S>) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in vae.params().iter() {
        for v in p.value.data() {
            h.update(v.to_bits_u64().to_le_bytes());
        }
    }
    h.finalize().into()
}

fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::Autodiff(AutodiffError::NonFinite { .. }))
}

struct TestEval {
    recon: f64,
    kl: f64,
    acc: Option<f64>,
    acc_sampled: Option<f64>,
}

fn evaluate<S: Real>(
    vae: &Vae<S>,
    probe: Option<&Probe<S>>,
    obj: &ObjectiveConfig,
    test_x: &Tensor<S>,
    labels: &[usize],
    noise_seed: (u64, u64),
) -> Result<TestEval> {
    let stats = vae.encode_stats(test_x, &obj.clip)?;
    let recon = objectives::recon_value(test_x, &vae.decode_values(&stats.mu)?)?;
    let kl = objectives::kl_value(&stats);
    let (acc, acc_sampled) = match probe {
        Some(p) => {
            let acc = accuracy(&p.logits(&stats.mu)?, labels);
            let mut rng = rng_for(noise_seed.0, Stream::EvalNoise { epoch: noise_seed.1 });
            let eps = standard_normal::<S>(&mut rng, stats.mu.shape());
            let z_data: Vec<S> = stats
                .mu
                .data()
                .iter()
                .zip(stats.log_var.data())
                .zip(eps.data())
                .map(|((&m, &l), &e)| m + (l * S::from_f64(0.5)).exp() * e)
                .collect();
            let z = Tensor::new(stats.mu.shape().to_vec(), z_data)?;
            (Some(acc), Some(accuracy(&p.logits(&z)?, labels)))
        }
        None => (None, None),
    };
    Ok(TestEval {
        recon,
        kl,
        acc,
        acc_sampled,
    })
}

/// Trains one run. Divergence is reported through
/// [`TrainOutcome::divergence`] with the metrics of completed epochs kept.
pub fn train<S: Real>(
    manifest: &RunManifest,
    train_set: &Dataset,
    test_set: &Dataset,
    opts: &TrainOptions,
) -> Result<TrainOutcome<S>> {
    let m = manifest.effective()?;
    if m.precision != S::PRECISION {
        return Err(Error::Config(format!(
            "manifest asks for {} but the run was started in {}",
            m.precision,
            S::PRECISION
        )));
    }
    let obj = m.objective_config();
    let mut vae = Vae::<S>::new(m.model_preset(), &mut rng_for(m.seed, Stream::VaeInit))?;
    let mut vae_adam = AdamState::new(m.adam(), vae.params());
    let mut probe = if m.probe {
        let p = Probe::<S>::new(vae.z_dim(), m.probe_hidden, &mut rng_for(m.seed, Stream::ProbeInit))?;
        let adam = AdamState::new(m.adam(), p.params());
        Some((p, adam))
    } else {
        None
    };
    let mut noise = rng_for(m.seed, Stream::Noise);
    let plan = m.batch_plan();
    let bound = obj.clip.bound(vae.z_dim());
    let test_x = test_set.images::<S>();
    let test_labels: Vec<usize> = test_set.labels().iter().map(|&l| l as usize).collect();

    let mut out = TrainOutcome {
        manifest: m.clone(),
        vae: vae.clone(),
        probe: None,
        metrics: Vec::with_capacity(m.epochs),
        diagnostics: Vec::with_capacity(m.epochs),
        batch_max_mu_norms: Vec::new(),
        param_trace: Vec::new(),
        divergence: None,
    };

    'epochs: for epoch in 0..m.epochs {
        let batches = plan.epoch_batches(train_set.len(), epoch as u64)?;
        let (mut recon, mut kl, mut reg, mut total) = (0.0, 0.0, 0.0, 0.0);
        let (mut lv_sum, mut lv_min, mut mu_max) = (0.0, f64::INFINITY, 0.0f64);
        let (mut acc_sum, mut violations) = (0.0, 0usize);
        for (bi, idx) in batches.iter().enumerate() {
            let batch = train_set.batch::<S>(idx)?;
            let eps = standard_normal::<S>(&mut noise, &[idx.len(), vae.z_dim()]);
            let step = alternating_step(
                &mut vae,
                &mut vae_adam,
                probe.as_mut().map(|(p, a)| (p, a)),
                &obj,
                &batch,
                eps,
            );
            let (v, p) = match step {
                Ok(s) => s,
                Err(e) if is_divergence(&e) => {
                    out.divergence = Some(Divergence {
                        epoch: epoch + 1,
                        batch: bi,
                        detail: e.to_string(),
                    });
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            if let Some(b) = bound {
                if v.max_mu_norm > b * (1.0 + CLIP_TOLERANCE) {
                    violations += 1;
                }
            }
            out.batch_max_mu_norms.push(v.max_mu_norm);
            recon += v.loss.recon;
            kl += v.loss.diagnostic_kl;
            reg += v.loss.mu_regularizer;
            total += v.loss.total;
            lv_sum += v.mean_log_var;
            lv_min = lv_min.min(v.min_log_var);
            mu_max = mu_max.max(v.max_mu_norm);
            if let Some(p) = p {
                acc_sum += p.accuracy;
            }
            if opts.trace_params {
                out.param_trace.push(param_digest(&vae));
            }
        }
        let n = batches.len() as f64;
        let eval = match evaluate(
            &vae,
            probe.as_ref().map(|(p, _)| p),
            &obj,
            &test_x,
            &test_labels,
            (m.seed, epoch as u64),
        ) {
            Ok(e) => e,
            Err(e) if is_divergence(&e) => {
                out.divergence = Some(Divergence {
                    epoch: epoch + 1,
                    batch: batches.len(),
                    detail: format!("evaluation: {e}"),
                });
                break;
            }
            Err(e) => return Err(e),
        };
        let record = MetricsRecord {
            epoch: epoch + 1,
            recon: recon / n,
            kl: kl / n,
            reg: reg / n,
            acc_train: probe.as_ref().map(|_| acc_sum / n),
            acc_test: eval.acc,
        };
        if opts.progress {
            eprintln!(
                "epoch {:>3}  recon {:.4}  kl {:.4}  reg {:.4}  acc_test {}",
                record.epoch,
                record.recon,
                record.kl,
                record.reg,
                opt_cell(record.acc_test)
            );
        }
        out.metrics.push(record);
        out.diagnostics.push(EpochDiagnostics {
            epoch: epoch + 1,
            train_total: total / n,
            mean_log_var: lv_sum / n,
            min_log_var: lv_min,
            max_mu_norm: mu_max,
            clip_violations: violations,
            test_recon: eval.recon,
            test_kl: eval.kl,
            acc_test_sampled: eval.acc_sampled,
        });
    }
    out.vae = vae;
    out.probe = probe.map(|(p, _)| p);
    Ok(out)
}

/// Loads the train and test splits named by the manifest, cut to its subsets.
pub fn load_run_data(m: &RunManifest) -> Result<(Dataset, Dataset)> {
    let root = Path::new(&m.data_dir);
    let train = data::load_split(root, m.dataset, Split::Train)?.subset(m.train_subset);
    let test = data::load_split(root, m.dataset, Split::Test)?.subset(m.test_subset);
    Ok((train, test))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes the effective manifest, metrics, diagnostics and checkpoint.
pub fn write_outputs<S: Real>(outcome: &TrainOutcome<S>, outdir: &Path) -> Result<()> {
    std::fs::create_dir_all(outdir).map_err(|e| Error::io(outdir, e))?;
    outcome.manifest.save(&outdir.join(MANIFEST_FILE))?;
    write(&outdir.join(METRICS_FILE), metrics_csv(&outcome.metrics))?;
    write(&outdir.join(DIAGNOSTICS_FILE), diagnostics_csv(&outcome.diagnostics))?;
    write(&outdir.join(checkpoint::CHECKPOINT_FILE), outcome.checkpoint_bytes())?;
    if let Some(d) = &outcome.divergence {
        write(
            &outdir.join("DIVERGED"),
            format!("epoch {} batch {}: {}\n", d.epoch, d.batch, d.detail),
        )?;
    }
    Ok(())
}

/// Trains from a manifest and writes every output; divergence is returned as
/// an error after the partial outputs are written.
pub fn run_to_dir<S: Real>(manifest: &RunManifest, outdir: &Path, opts: &TrainOptions) -> Result<TrainOutcome<S>> {
    let m = manifest.effective()?;
    std::fs::create_dir_all(outdir).map_err(|e| Error::io(outdir, e))?;
    m.save(&outdir.join(MANIFEST_FILE))?;
    let (train_set, test_set) = load_run_data(&m)?;
    let outcome = train::<S>(&m, &train_set, &test_set, opts)?;
    write_outputs(&outcome, outdir)?;
    match &outcome.divergence {
        Some(d) => Err(d.clone().into()),
        None => Ok(outcome),
    }
}

/// The four objective settings compared by the matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ObjectivePreset {
    Elbo,
    /// β = 4.
    Beta,
    /// μ-VAE with c = 3.
    Mu1,
    /// μ-VAE with c = 6.
    Mu2,
}

impl ObjectivePreset {
    pub const ALL: [ObjectivePreset; 4] = [Self::Elbo, Self::Beta, Self::Mu1, Self::Mu2];

    pub fn label(self) -> &'static str {
        match self {
            Self::Elbo => "elbo",
            Self::Beta => "beta",
            Self::Mu1 => "mu1",
            Self::Mu2 => "mu2",
        }
    }

    pub fn apply(self, base: &RunManifest) -> RunManifest {
        let mut m = base.clone();
        m.prior_sigma = None;
        m.traversal_range = None;
        match self {
            Self::Elbo => {
                m.objective = ObjectiveKind::Elbo;
                m.clip_coeff = None;
            }
            Self::Beta => {
                m.objective = ObjectiveKind::BetaVae;
                m.beta = 4.0;
                m.clip_coeff = None;
            }
            Self::Mu1 | Self::Mu2 => {
                m.objective = ObjectiveKind::MuVae;
                m.clip_coeff = Some(if self == Self::Mu1 { 3.0 } else { 6.0 });
            }
        }
        m
    }
}

impl std::str::FromStr for ObjectivePreset {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|p| p.label() == s)
            .ok_or_else(|| format!("unknown matrix objective `{s}` (expected elbo, beta, mu1 or mu2)"))
    }
}

pub struct MatrixRun<S> {
    pub dataset: DatasetId,
    pub objective: ObjectivePreset,
    pub seed: u64,
    pub result: Result<TrainOutcome<S>>,
}

/// Final-epoch metrics of one (dataset, objective) cell, averaged over seeds
/// whose runs completed.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub dataset: DatasetId,
    pub objective: ObjectivePreset,
    pub completed: usize,
    pub failed: Vec<(u64, String)>,
    pub recon: f64,
    pub kl: f64,
    pub reg: f64,
    pub acc_test: Option<f64>,
}

pub struct MatrixReport<S> {
    pub runs: Vec<MatrixRun<S>>,
}

impl<S: Real> MatrixReport<S> {
    pub fn cells(&self) -> Vec<CellSummary> {
        let mut cells: Vec<CellSummary> = Vec::new();
        for run in &self.runs {
            let pos = cells
                .iter()
                .position(|c| c.dataset == run.dataset && c.objective == run.objective);
            let cell = match pos {
                Some(i) => &mut cells[i],
                None => {
                    cells.push(CellSummary {
                        dataset: run.dataset,
                        objective: run.objective,
                        completed: 0,
                        failed: Vec::new(),
                        recon: 0.0,
                        kl: 0.0,
                        reg: 0.0,
                        acc_test: None,
                    });
                    cells.last_mut().expect("just pushed")
                }
            };
            match run.result.as_ref().map(|o| (o.final_metrics(), o.divergence.as_ref())) {
                Ok((Some(f), None)) => {
                    cell.completed += 1;
                    cell.recon += f.recon;
                    cell.kl += f.kl;
                    cell.reg += f.reg;
                    if let Some(a) = f.acc_test {
                        *cell.acc_test.get_or_insert(0.0) += a;
                    }
                }
                Ok((_, Some(d))) => cell.failed.push((run.seed, Error::from(d.clone()).to_string())),
                Ok((None, None)) => cell.failed.push((run.seed, "no epochs recorded".into())),
                Err(e) => cell.failed.push((run.seed, e.to_string())),
            }
        }
        for c in &mut cells {
            let n = c.completed.max(1) as f64;
            c.recon /= n;
            c.kl /= n;
            c.reg /= n;
            c.acc_test = c.acc_test.map(|a| a / n);
        }
        cells
    }

    /// Markdown comparison table of final-epoch metrics.
    pub fn render_table(&self) -> String {
        let mut out = String::from(
            "| dataset | objective | runs ok | recon | kl | reg | acc_test |\n|---|---|---|---|---|---|---|\n",
        );
        for c in self.cells() {
            let total = c.completed + c.failed.len();
            let _ = writeln!(
                out,
                "| {} | {} | {}/{} | {:.4} | {:.4} | {:.4} | {} |",
                c.dataset,
                c.objective.label(),
                c.completed,
                total,
                c.recon,
                c.kl,
                c.reg,
                c.acc_test.map(|a| format!("{a:.4}")).unwrap_or_else(|| "-".into())
            );
        }
        out
    }
}

/// Runs every (dataset, objective, seed) combination. Failures are kept per
/// run and do not stop the matrix; only data loading errors abort it.
pub fn run_matrix<S: Real>(
    base: &RunManifest,
    datasets: &[DatasetId],
    objectives: &[ObjectivePreset],
    seeds: &[u64],
    outdir: Option<&Path>,
    opts: &TrainOptions,
) -> Result<MatrixReport<S>> {
    if seeds.is_empty() {
        return Err(Error::Config("matrix needs at least one seed".into()));
    }
    let mut runs = Vec::new();
    for &dataset in datasets {
        let mut m = base.clone();
        m.dataset = dataset;
        let (train_set, test_set) = load_run_data(&m)?;
        for &objective in objectives {
            for &seed in seeds {
                let mut run_m = objective.apply(&m);
                run_m.seed = seed;
                if opts.progress {
                    eprintln!("== {dataset} / {} / seed {seed}", objective.label());
                }
                let result = train::<S>(&run_m, &train_set, &test_set, opts).and_then(|o| {
                    if let Some(dir) = outdir {
                        write_outputs(&o, &run_dir(dir, dataset, objective, seed))?;
                    }
                    Ok(o)
                });
                runs.push(MatrixRun {
                    dataset,
                    objective,
                    seed,
                    result,
                });
            }
        }
    }
    Ok(MatrixReport { runs })
}

pub fn run_dir(root: &Path, dataset: DatasetId, objective: ObjectivePreset, seed: u64) -> PathBuf {
    root.join(dataset.as_str()).join(objective.label()).join(format!("seed{seed}"))
}
