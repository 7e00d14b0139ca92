use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use defusion::data::{generate, load_dataset, GeneratorSpec};
use defusion::experiment::ablate::{ablate, Variant};
use defusion::experiment::cv::cross_validate;
use defusion::experiment::diagnose::{diagnose, load_model, save_model, train_holdout, Split};
use defusion::experiment::gradcheck;
use defusion::experiment::report::{write_json, Artifacts, CvReport, Timing};
use defusion::experiment::train::PreparedData;
use defusion::experiment::{ExperimentConfig, Profile};
use defusion::metrics::{feature_dump, FeatureSet, MetricReport, PccMatrix};
use defusion::model::{FusionVariant, PeVariant};
use defusion::Result;

#[derive(Parser)]
#[command(
    name = "defusion",
    version,
    about = "Multi-modal fusion experiments on synthetic temporal images and indicators"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData(GenArgs),
    /// Train on all folds but one and evaluate on the held-out fold.
    Train(RunArgs),
    /// k-fold cross-validation.
    CrossValidate(RunArgs),
    /// Cross-validate a grid of variants of one config.
    Ablate(AblateArgs),
    /// Feature correlations of a trained checkpoint.
    Diagnose(DiagnoseArgs),
    /// Finite-difference gradient checks of every differentiable component.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    /// JSON generator spec; flags below override it.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, visible_alias = "n")]
    n_cases: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    num_days: Option<usize>,
    #[arg(long)]
    num_indicators: Option<usize>,
    #[arg(long)]
    missing_rate: Option<f64>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    shared_signal_strength: Option<f64>,
    #[arg(long)]
    weight_shared: Option<f64>,
    #[arg(long)]
    weight_image: Option<f64>,
    #[arg(long)]
    weight_table: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON config; absent fields come from its profile.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base profile when no config file is given.
    #[arg(long, value_enum)]
    profile: Option<ProfileArg>,
    /// Dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    pretrain_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    lr_img: Option<f64>,
    #[arg(long)]
    lr_tab: Option<f64>,
    #[arg(long)]
    lr_fusion: Option<f64>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    pe: Option<PeVariant>,
    #[arg(long)]
    fusion: Option<FusionVariant>,
    /// Days fed to the image extractor, e.g. `1,2,3`.
    #[arg(long, value_delimiter = ',')]
    days: Option<Vec<usize>>,
    /// Concurrent fold jobs.
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Desk,
    Paper,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value = "runs/out")]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Comma-separated variants such as `pe=sincos,fusion=add,days=3`;
    /// default is the full grid.
    #[arg(long, value_delimiter = ',')]
    variants: Option<Vec<String>>,
    #[arg(long, default_value = "runs/ablation")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Holdout,
    All,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory; defaults to the one stored in the checkpoint.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Build the model from this config instead of the stored one.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "holdout")]
    split: SplitArg,
    #[arg(long, default_value = "runs/diagnose")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Suite {
    All,
    Ops,
    Image,
    Table,
    Defusion,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "all")]
    suite: Suite,
    /// Also write the results as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match (&self.config, self.profile) {
            (Some(path), _) => ExperimentConfig::from_json_file(path)?,
            (None, Some(ProfileArg::Paper)) => ExperimentConfig::profile(Profile::Paper),
            (None, _) => ExperimentConfig::profile(Profile::Desk),
        };
        if let Some(p) = &self.data {
            cfg.dataset = p.clone();
        }
        set(&mut cfg.epochs, self.epochs);
        set(&mut cfg.pretrain_epochs, self.pretrain_epochs);
        set(&mut cfg.batch_size, self.batch_size);
        set(&mut cfg.lambda, self.lambda);
        set(&mut cfg.lr_img, self.lr_img);
        set(&mut cfg.lr_tab, self.lr_tab);
        set(&mut cfg.lr_fusion, self.lr_fusion);
        set(&mut cfg.folds, self.folds);
        set(&mut cfg.seed, self.seed);
        set(&mut cfg.model.pe, self.pe);
        set(&mut cfg.model.fusion, self.fusion);
        set(&mut cfg.model.days, self.days.clone());
        cfg.workers = self.workers;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn prepare(cfg: &ExperimentConfig) -> Result<PreparedData> {
    PreparedData::new(load_dataset(&cfg.dataset)?, cfg)
}

fn write_pcc(out: &Path, pcc: &PccMatrix, features: &FeatureSet, a: &mut Artifacts) -> Result<()> {
    let json = out.join("pcc.json");
    write_json(&json, pcc)?;
    pcc.write_csv(&out.join("pcc.csv"))?;
    let feats = out.join("features.csv");
    feature_dump(features, &feats)?;
    a.pcc = Some("pcc.json".into());
    a.features = Some("features.csv".into());
    Ok(())
}

fn write_timing(out: &Path, command: &str, start: Instant) -> Result<()> {
    write_json(&out.join("timing.json"), &Timing { command: command.into(), seconds: start.elapsed().as_secs_f64() })
}

fn print_metrics(m: &MetricReport) {
    for (name, s) in [("auc", &m.auc), ("f1", &m.f1), ("accuracy", &m.accuracy)] {
        println!("{name:>8}: {:.4} ± {:.4}", s.mean, s.std);
    }
}

fn gen_data(a: &GenArgs) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
        None => GeneratorSpec::default(),
    };
    set(&mut spec.n_cases, a.n_cases);
    set(&mut spec.image_size, a.image_size);
    set(&mut spec.num_days, a.num_days);
    set(&mut spec.num_indicators, a.num_indicators);
    set(&mut spec.missing_rate, a.missing_rate);
    set(&mut spec.noise_sigma, a.noise_sigma);
    set(&mut spec.shared_signal_strength, a.shared_signal_strength);
    set(&mut spec.weight_shared, a.weight_shared);
    set(&mut spec.weight_image, a.weight_image);
    set(&mut spec.weight_table, a.weight_table);
    set(&mut spec.seed, a.seed);
    let m = generate(&spec, &a.out)?;
    println!("wrote {} cases to {}", m.n_cases, a.out.display());
    Ok(())
}

fn train(a: &RunArgs) -> Result<()> {
    let start = Instant::now();
    let cfg = a.config.resolve()?;
    let data = prepare(&cfg)?;
    std::fs::create_dir_all(&a.out)?;
    let run = train_holdout(&cfg, &data)?;
    let mut report = run.report;
    save_model(&a.out.join("checkpoint.bin"), &run.store, &run.meta)?;
    let mut artifacts = Artifacts { checkpoint: Some("checkpoint.bin".into()), ..Artifacts::default() };
    if let (Some(pcc), Some(f)) = (&report.pcc, &run.evaluation.features) {
        write_pcc(&a.out, pcc, f, &mut artifacts)?;
    }
    MetricReport::from_folds(&[report.holdout]).write_csv(&a.out.join(&artifacts.metrics))?;
    report.artifacts = artifacts;
    write_json(&a.out.join(&report.artifacts.report), &report)?;
    write_timing(&a.out, "train", start)?;
    println!(
        "held-out fold {}: auc {:.4} f1 {:.4} accuracy {:.4}",
        report.holdout_fold, report.holdout.auc, report.holdout.f1, report.holdout.accuracy
    );
    println!("wrote {}", a.out.display());
    Ok(())
}

fn cv(a: &RunArgs) -> Result<()> {
    let start = Instant::now();
    let cfg = a.config.resolve()?;
    let data = prepare(&cfg)?;
    std::fs::create_dir_all(&a.out)?;
    let out = cross_validate(&cfg, &data)?;
    let mut artifacts = Artifacts::default();
    if let (Some(pcc), Some(f)) = (&out.pcc, out.pooled_features()) {
        write_pcc(&a.out, pcc, &f, &mut artifacts)?;
    }
    out.metrics.write_csv(&a.out.join(&artifacts.metrics))?;
    let report = CvReport {
        command: "cross-validate".into(),
        config: cfg.clone(),
        dataset_cases: data.len(),
        folds: out.results(),
        metrics: out.metrics.clone(),
        pcc_gap: out.pcc.as_ref().map(PccMatrix::decoupling_gap),
        pcc: out.pcc,
        artifacts,
    };
    write_json(&a.out.join(&report.artifacts.report), &report)?;
    write_timing(&a.out, "cross-validate", start)?;
    print_metrics(&report.metrics);
    if let Some(g) = report.pcc_gap {
        println!("pcc gap: {g:.4}");
    }
    Ok(())
}

fn run_ablate(a: &AblateArgs) -> Result<()> {
    let start = Instant::now();
    let cfg = a.config.resolve()?;
    let data = prepare(&cfg)?;
    let variants = match &a.variants {
        Some(names) => names.iter().map(|n| n.parse()).collect::<Result<Vec<Variant>>>()?,
        None => Variant::all(data.dataset.manifest.num_days),
    };
    std::fs::create_dir_all(&a.out)?;
    let report = ablate(&cfg, &data, &variants)?;
    report.write_csv(&a.out.join("ablation.csv"))?;
    write_json(&a.out.join("ablation.json"), &report)?;
    write_timing(&a.out, "ablate", start)?;
    for r in &report.rows {
        println!("{:<20} auc {:.4} ± {:.4}", r.variant, r.metrics.auc.mean, r.metrics.auc.std);
    }
    Ok(())
}

fn run_diagnose(a: &DiagnoseArgs) -> Result<()> {
    let override_cfg = a.config.as_deref().map(ExperimentConfig::from_json_file).transpose()?;
    let mut loaded = load_model(&a.checkpoint, override_cfg.as_ref())?;
    if let Some(d) = &a.data {
        loaded.meta.config.dataset = d.clone();
    }
    let data = prepare(&loaded.meta.config)?;
    let split = match a.split {
        SplitArg::Holdout => Split::Holdout,
        SplitArg::All => Split::All,
    };
    let d = diagnose(&loaded, &data, split)?;
    std::fs::create_dir_all(&a.out)?;
    write_pcc(&a.out, &d.pcc, &d.features, &mut Artifacts::default())?;
    println!("{} cases, pcc gap {:.4}", d.features.len(), d.pcc.decoupling_gap());
    println!("wrote {}", a.out.display());
    Ok(())
}

fn run_gradcheck(a: &GradcheckArgs) -> Result<bool> {
    let suites = match a.suite {
        Suite::All => gradcheck::run_all()?,
        Suite::Ops => vec![gradcheck::tensor_ops()?],
        Suite::Image => vec![gradcheck::image_extractor()?],
        Suite::Table => vec![gradcheck::table_extractor()?],
        Suite::Defusion => vec![gradcheck::defusion()?],
    };
    for s in &suites {
        for c in &s.checks {
            println!(
                "{} {:<40} max rel error {:.3e}",
                if c.passed() { "ok  " } else { "FAIL" },
                format!("{}/{}", s.suite, c.name),
                c.max_rel_error
            );
        }
    }
    if let Some(p) = &a.out {
        write_json(p, &suites)?;
    }
    Ok(suites.iter().all(|s| s.passed()))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData(a) => gen_data(&a)?,
        Command::Train(a) => train(&a)?,
        Command::CrossValidate(a) => cv(&a)?,
        Command::Ablate(a) => run_ablate(&a)?,
        Command::Diagnose(a) => run_diagnose(&a)?,
        Command::Gradcheck(a) => return run_gradcheck(&a),
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::from(2)
        }
    }
}
