//! Command-line front end: `train`, `matrix`, `eval` and `toy`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use muvae_autodiff::{Activation, Precision, Real};

use crate::checkpoint::{self, CHECKPOINT_FILE};
use crate::data::{self, DatasetId, Split};
use crate::error::{Error, Result};
use crate::export::{self, ExportSettings};
use crate::manifest::{RunManifest, MANIFEST_FILE};
use crate::model::{Architecture, Vae};
use crate::objectives::{ObjectiveKind, VarianceReg};
use crate::trainer::{self, ObjectivePreset, TrainOptions};

#[derive(Debug, Parser)]
#[command(name = "muvae", version, about = "Train and compare ELBO, beta-VAE and mu-VAE objectives")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one run and write its manifest, metrics and checkpoint.
    Train(TrainArgs),
    /// Train every dataset x objective x seed combination and tabulate results.
    Matrix(MatrixArgs),
    /// Render figures and latent dumps from a finished run directory.
    Eval(EvalArgs),
    /// Toy 2-D latent grid: activations x {elbo, elbo_clip, mu_clip}.
    Toy(ToyArgs),
}

/// Manifest overrides shared by the training subcommands.
#[derive(Debug, Args, Default)]
struct RunFlags {
    /// Base manifest; flags below override its fields.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<DatasetId>,
    #[arg(long)]
    objective: Option<ObjectiveKind>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    clip_coeff: Option<f64>,
    #[arg(long)]
    zdim: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    /// Training examples to use (first N); 0 for all.
    #[arg(long)]
    subset: Option<usize>,
    /// Test examples to use (first N); 0 for all.
    #[arg(long)]
    test_subset: Option<usize>,
    #[arg(long)]
    precision: Option<Precision>,
    /// Directory holding `mnist/` and `fashion/` IDX files.
    #[arg(long)]
    data_dir: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    activation: Option<Activation>,
    #[arg(long)]
    preset: Option<Architecture>,
    #[arg(long, value_parser = parse_variance_reg)]
    variance_reg: Option<VarianceReg>,
    /// Train without the latent probe.
    #[arg(long)]
    no_probe: bool,
    /// Suppress per-epoch progress lines.
    #[arg(long)]
    quiet: bool,
}

fn parse_variance_reg(s: &str) -> std::result::Result<VarianceReg, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

impl RunFlags {
    fn manifest(&self) -> Result<RunManifest> {
        let mut m = match &self.manifest {
            Some(p) => RunManifest::load(p)?,
            None => RunManifest::default(),
        };
        macro_rules! set {
            ($($flag:ident => $field:ident),*) => {$(
                if let Some(v) = self.$flag.clone() {
                    m.$field = v;
                }
            )*};
        }
        set!(dataset => dataset, objective => objective, beta => beta, seed => seed,
             epochs => epochs, batch => batch_size, subset => train_subset,
             test_subset => test_subset, precision => precision, data_dir => data_dir,
             lr => learning_rate, preset => preset, variance_reg => variance_reg);
        if self.clip_coeff.is_some() {
            m.clip_coeff = self.clip_coeff;
        }
        if self.zdim.is_some() {
            m.z_dim = self.zdim;
        }
        if self.activation.is_some() {
            m.activation = self.activation;
        }
        if self.no_probe {
            m.probe = false;
        }
        Ok(m)
    }

    fn options(&self) -> TrainOptions {
        TrainOptions {
            trace_params: false,
            progress: !self.quiet,
        }
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunFlags,
    #[arg(long)]
    outdir: PathBuf,
}

#[derive(Debug, Args)]
struct MatrixArgs {
    #[command(flatten)]
    run: RunFlags,
    #[arg(long, value_delimiter = ',', default_value = "fashion")]
    datasets: Vec<DatasetId>,
    #[arg(long, value_delimiter = ',', default_value = "elbo,beta,mu1,mu2")]
    objectives: Vec<ObjectivePreset>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    seeds: Vec<u64>,
    #[arg(long)]
    outdir: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Run directory containing manifest.toml and checkpoint.bin.
    #[arg(long)]
    run: PathBuf,
    /// Defaults to `<run>/exports`.
    #[arg(long)]
    outdir: Option<PathBuf>,
    /// Overrides the manifest's data directory.
    #[arg(long)]
    data_dir: Option<String>,
    /// Number of test images in the reconstruction grid.
    #[arg(long, default_value_t = 16)]
    reconstructions: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ToyObjective {
    Elbo,
    ElboClip,
    MuClip,
}

impl ToyObjective {
    const ALL: [ToyObjective; 3] = [Self::Elbo, Self::ElboClip, Self::MuClip];

    fn label(self) -> &'static str {
        match self {
            Self::Elbo => "elbo",
            Self::ElboClip => "elbo_clip",
            Self::MuClip => "mu_clip",
        }
    }
}

/// A single choice or `all` of them.
#[derive(Debug, Clone, PartialEq)]
struct Selection<T>(Vec<T>);

fn parse_toy_objective(s: &str) -> std::result::Result<Selection<ToyObjective>, String> {
    match s {
        "all" => Ok(Selection(ToyObjective::ALL.to_vec())),
        _ => ToyObjective::ALL
            .into_iter()
            .find(|o| o.label() == s)
            .map(|o| Selection(vec![o]))
            .ok_or_else(|| format!("unknown toy objective `{s}` (expected elbo, elbo_clip, mu_clip or all)")),
    }
}

fn parse_toy_activation(s: &str) -> std::result::Result<Selection<Activation>, String> {
    match s {
        "all" => Ok(Selection(vec![Activation::Tanh, Activation::Relu, Activation::LeakyRelu])),
        _ => s.parse::<Activation>().map(|a| Selection(vec![a])),
    }
}

#[derive(Debug, Args)]
struct ToyArgs {
    /// tanh, relu, leaky_relu or all.
    #[arg(long, default_value = "all", value_parser = parse_toy_activation)]
    activation: Selection<Activation>,
    /// elbo, elbo_clip, mu_clip or all.
    #[arg(long, default_value = "all", value_parser = parse_toy_objective)]
    objective: Selection<ToyObjective>,
    /// Clipping coefficient for the clipped cells.
    #[arg(long, default_value_t = 3.0)]
    clip_coeff: f64,
    #[arg(long, default_value = "mnist")]
    dataset: DatasetId,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 10_000)]
    subset: usize,
    #[arg(long, default_value_t = 2_000)]
    test_subset: usize,
    #[arg(long, default_value = "data")]
    data_dir: String,
    #[arg(long)]
    quiet: bool,
    #[arg(long)]
    outdir: PathBuf,
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::Io { .. } | Error::Format { .. } | Error::Integrity(_) => 3,
        Error::Diverged { .. } => 4,
        _ => 1,
    }
}

/// Parses `argv` (including the program name), runs the command, and returns
/// the process exit code. Errors are reported as one `error[<class>]: ...` line.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            if !e.use_stderr() {
                print!("{e}");
                return 0;
            }
            let text = e.render().to_string();
            let mut lines = text.lines();
            let first = lines.next().unwrap_or_default();
            eprintln!("error[usage]: {}", first.strip_prefix("error: ").unwrap_or(first));
            for l in lines {
                eprintln!("{l}");
            }
            return 2;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {}", e.class(), e.to_string().replace('\n', " "));
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train(a) => {
            let m = a.run.manifest()?.effective()?;
            let opts = a.run.options();
            match m.precision {
                Precision::F32 => trainer::run_to_dir::<f32>(&m, &a.outdir, &opts).map(drop),
                Precision::F64 => trainer::run_to_dir::<f64>(&m, &a.outdir, &opts).map(drop),
            }?;
            println!("wrote {}", a.outdir.display());
            Ok(())
        }
        Command::Matrix(a) => {
            let m = a.run.manifest()?;
            match m.precision {
                Precision::F32 => matrix::<f32>(&m, &a, &a.run.options()),
                Precision::F64 => matrix::<f64>(&m, &a, &a.run.options()),
            }
        }
        Command::Eval(a) => eval(&a),
        Command::Toy(a) => toy(&a),
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn matrix<S: Real>(base: &RunManifest, a: &MatrixArgs, opts: &TrainOptions) -> Result<()> {
    let report = trainer::run_matrix::<S>(base, &a.datasets, &a.objectives, &a.seeds, Some(&a.outdir), opts)?;
    let table = report.render_table();
    std::fs::create_dir_all(&a.outdir).map_err(|e| Error::io(&a.outdir, e))?;
    write(&a.outdir.join("table.md"), &table)?;
    print!("{table}");
    let mut first_err = None;
    for run in report.runs {
        let failure = match run.result {
            Ok(o) => o.divergence.map(Error::from),
            Err(e) => Some(e),
        };
        if let Some(e) = failure {
            eprintln!(
                "error[{}]: {} / {} / seed {}: {}",
                e.class(),
                run.dataset,
                run.objective.label(),
                run.seed,
                e
            );
            first_err.get_or_insert(e);
        }
    }
    first_err.map_or(Ok(()), Err)
}

fn eval(a: &EvalArgs) -> Result<()> {
    let mut m = RunManifest::load(&a.run.join(MANIFEST_FILE))?.effective()?;
    if let Some(d) = &a.data_dir {
        m.data_dir = d.clone();
    }
    let outdir = a.outdir.clone().unwrap_or_else(|| a.run.join("exports"));
    match m.precision {
        Precision::F32 => eval_in::<f32>(&m, &a.run, &outdir, a.reconstructions),
        Precision::F64 => eval_in::<f64>(&m, &a.run, &outdir, a.reconstructions),
    }?;
    println!("wrote {}", outdir.display());
    Ok(())
}

fn settings(m: &RunManifest, reconstructions: usize) -> ExportSettings {
    ExportSettings {
        clip: m.objective_config().clip,
        prior_sigma: m.prior_sigma_or_default(),
        traversal_range: m.traversal_range.unwrap_or(2.0),
        traversal_steps: m.traversal_steps,
        seed: m.seed,
        reconstructions,
    }
}

fn eval_in<S: Real>(m: &RunManifest, run: &Path, outdir: &Path, reconstructions: usize) -> Result<()> {
    let tensors = checkpoint::load::<S>(&run.join(CHECKPOINT_FILE))?;
    let vae = Vae::from_params(m.model_preset(), checkpoint::group_store(&tensors, "vae")?)?;
    let test = data::load_split(Path::new(&m.data_dir), m.dataset, Split::Test)?.subset(m.test_subset);
    export::export_all(&vae, &test, &settings(m, reconstructions), outdir)
}

fn toy(a: &ToyArgs) -> Result<()> {
    let base = RunManifest {
        dataset: a.dataset,
        data_dir: a.data_dir.clone(),
        preset: Architecture::ToyDense2d,
        seed: a.seed,
        epochs: a.epochs,
        train_subset: a.subset,
        test_subset: a.test_subset,
        probe: false,
        ..RunManifest::default()
    };
    let (train_set, test_set) = trainer::load_run_data(&base)?;
    let opts = TrainOptions {
        trace_params: false,
        progress: !a.quiet,
    };
    for &act in &a.activation.0 {
        for &obj in &a.objective.0 {
            let mut m = base.clone();
            m.activation = Some(act);
            (m.objective, m.clip_coeff) = match obj {
                ToyObjective::Elbo => (ObjectiveKind::Elbo, None),
                ToyObjective::ElboClip => (ObjectiveKind::Elbo, Some(a.clip_coeff)),
                ToyObjective::MuClip => (ObjectiveKind::MuVae, Some(a.clip_coeff)),
            };
            let m = m.effective()?;
            let dir = a.outdir.join(format!("{act}_{}", obj.label()));
            if !a.quiet {
                eprintln!("== toy {act} / {}", obj.label());
            }
            let outcome = trainer::train::<f32>(&m, &train_set, &test_set, &opts)?;
            trainer::write_outputs(&outcome, &dir)?;
            if let Some(d) = outcome.divergence {
                return Err(d.into());
            }
            let clip = m.objective_config().clip;
            let stats = outcome.vae.encode_stats(&test_set.images::<f32>(), &clip)?;
            let codes: Vec<f64> = stats.mu.data().iter().map(|&v| v as f64).collect();
            write(&dir.join("latent_codes.csv"), export::latent_codes_csv(&stats, test_set.labels())?)?;
            write(&dir.join("scatter.png"), export::scatter_png(&codes, test_set.labels(), 512)?)?;
        }
    }
    println!("wrote {}", a.outdir.display());
    Ok(())
}
