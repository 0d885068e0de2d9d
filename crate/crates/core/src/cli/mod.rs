//! Command-line front end.
//!
//! Configuration is layered: built-in defaults, then an optional JSON file
//! (`--config`), then flags. Every command is a pure function of its
//! resolved configuration, so identical flags give identical outputs.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical abort,
//! 4 missing artifact.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::diffcore::DiffError;
use crate::model::{
    self, generate_dataset, read_split, write_dataset, Checkpoint, Corruption, EpochStats, Image, ModelConfig, ModelError,
    Sample, Split, SyntheticSpec, TrainConfig,
};
use crate::nig::RegularizerMode;
use crate::par::Exec;
use crate::trust::{
    self, cost_profile, fmt_sig, ood_report, retained_accuracy, write_csv, write_ood_csv, write_report, CostParams, EvalRecord,
    Report, ReportOptions, TrustError,
};

/// Name of the checkpoint file inside a training run directory.
pub const CHECKPOINT_FILE: &str = "model.ckpt";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical abort: {0}")]
    Numerical(String),
    #[error("missing artifact: {0}")]
    Missing(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Missing(_) => 4,
            CliError::Other(_) => 1,
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) | ModelError::Severity { .. } | ModelError::UnknownCorruption(_) => CliError::Config(e.to_string()),
            ModelError::NonFinite { .. } | ModelError::Diff(DiffError::Domain { .. }) => CliError::Numerical(e.to_string()),
            ModelError::Io(ref io) if io.kind() == std::io::ErrorKind::NotFound => CliError::Missing(e.to_string()),
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<TrustError> for CliError {
    fn from(e: TrustError) -> Self {
        match e {
            TrustError::Model(m) => m.into(),
            TrustError::Param(_) | TrustError::Threshold(_) | TrustError::Grid | TrustError::TooFew { .. } => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "evidentia", version, about = "Evidential ordinal grading with trust analyses")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args, Default)]
pub struct Common {
    /// Master seed; every random stream is derived from it.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, required = true)]
    pub out: Option<PathBuf>,
    /// JSON configuration file (overridden by flags).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Replace an existing output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Args, Default)]
pub struct TrainFlags {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long = "lambda-kl")]
    pub lambda_kl: Option<f64>,
    #[arg(long = "lambda-proto")]
    pub lambda_proto: Option<f64>,
    #[arg(long = "loss-mode", value_enum)]
    pub loss_mode: Option<RegularizerMode>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepParam {
    LambdaKl,
    Referral,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Gen {
        #[command(flatten)]
        common: Common,
        /// Label-flip probability.
        #[arg(long)]
        flip: Option<f64>,
    },
    /// Train a model and write its checkpoint and history.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Evaluate a checkpoint on the test split and write the report bundle.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Bootstrap replicates for ROC/PR bands.
        #[arg(long)]
        bootstrap: Option<usize>,
    },
    /// Epistemic uncertainty under every corruption on the grid.
    Ood {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Evaluate a grid of λ_KL values or referral rates.
    Sweep {
        #[arg(value_enum)]
        param: SweepParam,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[command(flatten)]
        train: TrainFlags,
    },
}

/// Contents of a `--config` file. Every field is optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub synthetic: SyntheticSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub costs: CostParams,
    pub bootstrap: usize,
    pub lambda_kl_grid: Vec<f64>,
    pub referral_grid: Vec<f64>,
}

impl Default for FileConfig {
    fn default() -> Self {
        Self {
            seed: None,
            synthetic: SyntheticSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            costs: CostParams::default(),
            bootstrap: 1000,
            lambda_kl_grid: vec![0.0, 0.01, 0.1],
            referral_grid: trust::default_referral_grid(),
        }
    }
}

/// Fully resolved settings for one command.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub ckpt: Option<PathBuf>,
    /// Overwrite policy only; left out of the recorded config.
    #[serde(skip_serializing)]
    pub force: bool,
    pub synthetic: SyntheticSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub costs: CostParams,
    pub bootstrap: usize,
    pub lambda_kl_grid: Vec<f64>,
    pub referral_grid: Vec<f64>,
}

impl RunConfig {
    /// Defaults < config file < flags.
    pub fn resolve(common: &Common, file: Option<FileConfig>) -> Result<Self, CliError> {
        let file = match (file, &common.config) {
            (Some(f), _) => f,
            (None, Some(path)) => {
                let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
                serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
            }
            (None, None) => FileConfig::default(),
        };
        let mut cfg = Self {
            seed: file.train.seed,
            out: common.out.clone(),
            data: None,
            ckpt: None,
            force: common.force,
            synthetic: file.synthetic,
            model: file.model,
            train: file.train,
            costs: file.costs,
            bootstrap: file.bootstrap,
            lambda_kl_grid: file.lambda_kl_grid,
            referral_grid: file.referral_grid,
        };
        if let Some(seed) = common.seed.or(file.seed) {
            cfg.seed = seed;
            cfg.synthetic.seed = seed;
            cfg.train.seed = seed;
        }
        Ok(cfg)
    }

    fn apply_train(&mut self, flags: &TrainFlags) {
        if let Some(e) = flags.epochs {
            self.train.epochs = e;
        }
        if let Some(l) = flags.lambda_kl {
            self.model.lambda_kl = l;
        }
        if let Some(l) = flags.lambda_proto {
            self.model.lambda_proto = l;
        }
        if let Some(m) = flags.loss_mode {
            self.train.loss_mode = m;
        }
    }

    fn validate(&self) -> Result<(), CliError> {
        self.synthetic.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.costs.validate()?;
        Ok(())
    }

    fn out(&self) -> Result<&Path, CliError> {
        self.out.as_deref().ok_or_else(|| CliError::Config("--out is required".into()))
    }

    fn data(&self) -> Result<&Path, CliError> {
        self.data.as_deref().ok_or_else(|| CliError::Config("--data is required".into()))
    }

    fn ckpt(&self) -> Result<&Path, CliError> {
        self.ckpt.as_deref().ok_or_else(|| CliError::Config("--ckpt is required".into()))
    }
}

/// Create the output directory, refusing to reuse a nonempty one unless
/// `force` is set (in which case it is cleared first).
fn prepare_out(dir: &Path, force: bool) -> Result<(), CliError> {
    if dir.exists() {
        let nonempty = fs::read_dir(dir)?.next().is_some();
        if nonempty && !force {
            return Err(CliError::Config(format!("{} already exists; pass --force to overwrite", dir.display())));
        }
        if nonempty {
            fs::remove_dir_all(dir)?;
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn load_split(data: &Path, split: Split) -> Result<Vec<Sample>, CliError> {
    let dir = data.join(split.name());
    if !dir.join("data.csv").exists() {
        return Err(CliError::Missing(format!("{} split not found under {}", split.name(), data.display())));
    }
    Ok(read_split(&dir)?.1)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    if !path.exists() {
        return Err(CliError::Missing(format!("checkpoint {} not found", path.display())));
    }
    Ok(Checkpoint::load(path)?)
}

fn records(ckpt: &Checkpoint, samples: &[Sample], exec: Exec) -> Result<Vec<EvalRecord>, CliError> {
    let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
    let preds = ckpt.predict(&images, exec)?;
    samples
        .iter()
        .zip(&preds)
        .map(|(s, p)| EvalRecord::from_prediction(s.grade, p).map_err(CliError::from))
        .collect()
}

pub fn cmd_gen(cfg: &RunConfig) -> Result<(), CliError> {
    cfg.synthetic.validate()?;
    let out = cfg.out()?;
    prepare_out(out, cfg.force)?;
    let data = generate_dataset(&cfg.synthetic, Exec::default())?;
    write_dataset(out, &data)?;
    println!(
        "wrote {} train / {} val / {} test images to {}",
        data.train.len(),
        data.val.len(),
        data.test.len(),
        out.display()
    );
    Ok(())
}

fn history_rows(history: &[EpochStats]) -> Vec<Vec<String>> {
    history
        .iter()
        .map(|h| {
            vec![
                (h.epoch + 1).to_string(),
                fmt_sig(h.lr),
                fmt_sig(h.total),
                fmt_sig(h.nll),
                fmt_sig(h.reg),
                fmt_sig(h.align),
                fmt_sig(h.val_qwk),
                fmt_sig(h.val_acc),
                fmt_sig(h.val_evidence),
            ]
        })
        .collect()
}

fn reg_column(mode: RegularizerMode) -> &'static str {
    match mode {
        RegularizerMode::Kl => "kl",
        RegularizerMode::Evidence => "evidence",
    }
}

pub fn cmd_train(cfg: &RunConfig) -> Result<Checkpoint, CliError> {
    cfg.validate()?;
    let data = cfg.data()?;
    let out = cfg.out()?;
    let train = load_split(data, Split::Train)?;
    let val = load_split(data, Split::Val)?;
    prepare_out(out, cfg.force)?;
    let reg = reg_column(cfg.train.loss_mode);
    let ckpt = model::train_with(&cfg.model, &cfg.train, &train, &val, |h| {
        println!(
            "epoch {:>3}  total {:.4}  nll {:.4}  {reg} {:.4}  align {:.4}  val_qwk {:.4}  val_acc {:.4}",
            h.epoch + 1,
            h.total,
            h.nll,
            h.reg,
            h.align,
            h.val_qwk,
            h.val_acc
        );
    })?;
    ckpt.save(&out.join(CHECKPOINT_FILE))?;
    write_csv(
        &out.join("history.csv"),
        &["epoch", "lr", "total", "nll", reg, "align", "val_qwk", "val_acc", "val_evidence"],
        &history_rows(&ckpt.history),
    )?;
    fs::write(out.join("config.json"), serde_json::to_string_pretty(cfg).map_err(|e| CliError::Other(e.to_string()))? + "\n")?;
    println!("best epoch {} (val QWK {:.4})", ckpt.best_epoch + 1, ckpt.history[ckpt.best_epoch].val_qwk);
    Ok(ckpt)
}

pub fn cmd_trust_report(cfg: &RunConfig) -> Result<Report, CliError> {
    cfg.costs.validate()?;
    let ckpt = load_checkpoint(cfg.ckpt()?)?;
    let test = load_split(cfg.data()?, Split::Test)?;
    let out = cfg.out()?;
    prepare_out(out, cfg.force)?;
    let exec = Exec::default();
    let recs = records(&ckpt, &test, exec)?;
    let opts = ReportOptions {
        bootstrap: cfg.bootstrap,
        seed: cfg.seed,
        costs: cfg.costs,
        referral_grid: cfg.referral_grid.clone(),
        exec,
        ..Default::default()
    };
    let mut report = Report::build(&recs, &opts)?;
    let images: Vec<&Image> = test.iter().map(|s| &s.image).collect();
    report.ood = Some(ood_report(&ckpt, &images, &Corruption::full_grid(), cfg.seed, exec)?);
    write_report(out, &report)?;
    let s = &report.summary;
    println!("n {}  accuracy {:.4}  QWK {:.4}  macro-F1 {:.4}  MSE {:.4}", s.n, s.accuracy, s.qwk, s.macro_f1, s.mse);
    Ok(report)
}

pub fn cmd_ood(cfg: &RunConfig) -> Result<Vec<trust::OodRow>, CliError> {
    let ckpt = load_checkpoint(cfg.ckpt()?)?;
    let test = load_split(cfg.data()?, Split::Test)?;
    let out = cfg.out()?;
    prepare_out(out, cfg.force)?;
    let images: Vec<&Image> = test.iter().map(|s| &s.image).collect();
    let rows = ood_report(&ckpt, &images, &Corruption::full_grid(), cfg.seed, Exec::default())?;
    write_ood_csv(&out.join("ood.csv"), &rows)?;
    for r in &rows {
        println!("{:<15} {:>5}  mean epistemic {:.4}  p {:.3e}", r.kind, r.severity, r.mean_epistemic, r.p_value);
    }
    Ok(rows)
}

pub fn cmd_sweep(cfg: &RunConfig, param: SweepParam) -> Result<(), CliError> {
    cfg.validate()?;
    let data = cfg.data()?;
    let out = cfg.out()?;
    let exec = Exec::default();
    match param {
        SweepParam::LambdaKl => {
            let train = load_split(data, Split::Train)?;
            let val = load_split(data, Split::Val)?;
            let test = load_split(data, Split::Test)?;
            if cfg.lambda_kl_grid.iter().any(|l| !(*l >= 0.0)) {
                return Err(CliError::Config("λ_KL grid values must be nonnegative".into()));
            }
            prepare_out(out, cfg.force)?;
            let mut rows = Vec::new();
            for &lambda in &cfg.lambda_kl_grid {
                let mc = ModelConfig { lambda_kl: lambda, ..cfg.model.clone() };
                let ckpt = model::train(&mc, &cfg.train, &train, &val)?;
                let recs = records(&ckpt, &test, exec)?;
                let images: Vec<&Image> = test.iter().map(|s| &s.image).collect();
                let preds = ckpt.predict(&images, exec)?;
                let n = preds.len() as f64;
                let evidence = preds.iter().map(|p| p.nig.evidence()).sum::<f64>() / n;
                let epistemic = preds.iter().map(|p| p.epistemic).sum::<f64>() / n;
                let m = trust::ordinal_metrics(&recs)?;
                let truth: Vec<usize> = recs.iter().map(|r| r.y_true).collect();
                let pred: Vec<usize> = recs.iter().map(|r| r.grade_pred).collect();
                let q = trust::qwk(&truth, &pred)?;
                println!("λ_KL {lambda}: test QWK {q:.4}  accuracy {:.4}  mean evidence {evidence:.4}", m.accuracy);
                rows.push(vec![
                    fmt_sig(lambda),
                    fmt_sig(ckpt.history[ckpt.best_epoch].val_qwk),
                    fmt_sig(q),
                    fmt_sig(m.accuracy),
                    fmt_sig(evidence),
                    fmt_sig(epistemic),
                ]);
            }
            write_csv(
                &out.join("sweep.csv"),
                &["lambda_kl", "val_qwk", "test_qwk", "test_accuracy", "mean_evidence", "mean_epistemic"],
                &rows,
            )?;
        }
        SweepParam::Referral => {
            let ckpt = load_checkpoint(cfg.ckpt()?)?;
            let test = load_split(data, Split::Test)?;
            prepare_out(out, cfg.force)?;
            let recs = records(&ckpt, &test, exec)?;
            let costs = cost_profile(&recs, &cfg.costs, &cfg.referral_grid)?;
            let rows = cfg
                .referral_grid
                .iter()
                .zip(&costs.y)
                .map(|(&r, &c)| Ok(vec![fmt_sig(r), fmt_sig(c), fmt_sig(retained_accuracy(&recs, r)?)]))
                .collect::<Result<Vec<_>, TrustError>>()?;
            write_csv(&out.join("sweep.csv"), &["referral_rate", "cost", "retained_accuracy"], &rows)?;
            println!("wrote {} referral rows", rows.len());
        }
    }
    Ok(())
}

/// Dispatch a parsed command line.
pub fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gen { common, flip } => {
            let mut cfg = RunConfig::resolve(&common, None)?;
            if let Some(p) = flip {
                cfg.synthetic.flip_prob = p;
            }
            cmd_gen(&cfg)
        }
        Command::Train { common, data, train } => {
            let mut cfg = RunConfig::resolve(&common, None)?;
            cfg.data = data;
            cfg.apply_train(&train);
            cmd_train(&cfg).map(drop)
        }
        Command::Report { common, data, ckpt, bootstrap } => {
            let mut cfg = RunConfig::resolve(&common, None)?;
            cfg.data = data;
            cfg.ckpt = ckpt;
            if let Some(b) = bootstrap {
                cfg.bootstrap = b;
            }
            cmd_trust_report(&cfg).map(drop)
        }
        Command::Ood { common, data, ckpt } => {
            let mut cfg = RunConfig::resolve(&common, None)?;
            cfg.data = data;
            cfg.ckpt = ckpt;
            cmd_ood(&cfg).map(drop)
        }
        Command::Sweep { param, common, data, ckpt, train } => {
            let mut cfg = RunConfig::resolve(&common, None)?;
            cfg.data = data;
            cfg.ckpt = ckpt;
            cfg.apply_train(&train);
            cmd_sweep(&cfg, param)
        }
    }
}

/// Parse arguments, honour `EVIDENTIA_THREADS`, run, and map the outcome
/// to an exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    if let Ok(v) = std::env::var("EVIDENTIA_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => crate::par::configure_threads(n),
            _ => {
                eprintln!("error: EVIDENTIA_THREADS must be a positive integer, got {v:?}");
                return 2;
            }
        }
    }
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
