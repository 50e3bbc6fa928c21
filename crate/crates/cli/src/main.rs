use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use qgs_pmu::classify::{
    boost, boost_batches, derive_seed, evaluate, sweep, train_two_stage_from, ClassifyError,
    SweepAxis, SweepConfig, TwoStageConfig, TwoStageModel,
};
use qgs_pmu::datagen::{build_dataset, DatagenError, Dataset, ScenarioConfig};
use qgs_pmu::digest::json_digest;
use qgs_pmu::training::{TrainError, Trainer};

const SUMMARY_SCHEMA_VERSION: u32 = 1;

#[derive(Parser)]
#[command(
    name = "qgs-pmu",
    version,
    about = "PMU event classification with QGS-trained networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the configuration seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long)]
    jobs: Option<usize>,
    /// Overrides the configured trainer.
    #[arg(long, value_parser = ["qgs", "ga", "ebp"])]
    trainer: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labelled feature data set.
    Generate(Common),
    /// Train the two-stage classifier on a data set's training split.
    Train {
        #[command(flatten)]
        common: Common,
        /// Data set directory written by `generate`.
        #[arg(long)]
        dataset: PathBuf,
        /// Model JSON to continue training from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a model on a data set's evaluation split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Regenerate data and retrain along one sensitivity axis.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// One of reporting_rate, noise, pmu_count, trainer.
        #[arg(long)]
        axis: String,
    },
    /// Retrain with misclassified events from fresh evaluation batches.
    Boost {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
    },
}

/// Run configuration file. The top-level seed drives every subsystem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    scenario: ScenarioConfig,
    classifier: TwoStageConfig,
    trainer_noise: f64,
    match_budget: bool,
    boost_rounds: usize,
    seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let sweep = SweepConfig::default();
        Self {
            scenario: sweep.scenario,
            classifier: sweep.classifier,
            trainer_noise: sweep.trainer_noise,
            match_budget: sweep.match_budget,
            boost_rounds: 3,
            seed: 0,
        }
    }
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Io(String),
    Trainer(String),
    SweepFailed(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Trainer(_) => 4,
            CliError::SweepFailed(_) => 5,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m)
            | CliError::Io(m)
            | CliError::Trainer(m)
            | CliError::SweepFailed(m) => m,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<DatagenError> for CliError {
    fn from(e: DatagenError) -> Self {
        match e {
            DatagenError::Io(_) | DatagenError::Csv(_) => CliError::Io(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<ClassifyError> for CliError {
    fn from(e: ClassifyError) -> Self {
        match e {
            ClassifyError::Datagen(d) => d.into(),
            ClassifyError::Train(TrainError::InvalidConfig(m)) => CliError::Config(m),
            ClassifyError::Train(_) | ClassifyError::Network(_) => CliError::Trainer(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<(), CliError> {
    let path = dir.join(name);
    fs::write(&path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn load_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(p) => serde_json::from_str::<RunConfig>(&read_text(p)?)
            .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(t) = &common.trainer {
        cfg.classifier.trainer = t.parse::<Trainer>().map_err(CliError::Config)?;
    }
    cfg.scenario.seed = derive_seed(cfg.seed, 1);
    cfg.classifier.seed = derive_seed(cfg.seed, 2);
    cfg.scenario
        .validate()
        .map_err(|e| CliError::Config(format!("scenario.{e}")))?;
    cfg.classifier
        .validate()
        .map_err(|e| CliError::Config(format!("classifier: {e}")))?;
    if cfg.boost_rounds == 0 {
        return Err(CliError::Config("boost_rounds: must be ≥ 1".into()));
    }
    if !(cfg.trainer_noise >= 0.0 && cfg.trainer_noise.is_finite()) {
        return Err(CliError::Config(
            "trainer_noise: must be a finite value ≥ 0".into(),
        ));
    }
    Ok(cfg)
}

fn load_model(path: &Path) -> Result<TwoStageModel, CliError> {
    let model = TwoStageModel::from_json(&read_text(path)?)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if model.schema_version != qgs_pmu::classify::MODEL_SCHEMA_VERSION {
        return Err(CliError::Config(format!(
            "{}: unsupported model schema version {}",
            path.display(),
            model.schema_version
        )));
    }
    Ok(model)
}

fn load_dataset(dir: &Path) -> Result<Dataset, CliError> {
    Ok(Dataset::read(dir)?.0)
}

fn check_digest(model: &TwoStageModel, ds: &Dataset) -> Result<(), CliError> {
    model.check_layout(&ds.feature_config_digest())?;
    Ok(())
}

fn create_out(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))
}

fn set_jobs(jobs: Option<usize>) {
    if let Some(n) = jobs {
        // A second initialization only happens in tests; the first one wins.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global();
    }
}

fn cmd_generate(common: &Common) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    let ds = build_dataset(&cfg.scenario)?;
    let manifest = ds.write(&common.out)?;
    println!("features: {} rows", ds.train.len() + ds.eval.len());
    println!("dataset digest: {}", manifest.features_digest);
    Ok(())
}

fn cmd_train(common: &Common, dataset: &Path, resume: Option<&Path>) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    let ds = load_dataset(dataset)?;
    let warm = resume.map(load_model).transpose()?;
    if let Some(m) = &warm {
        check_digest(m, &ds)?;
    }
    let trained = train_two_stage_from(
        &ds.train,
        &cfg.classifier,
        &ds.feature_config_digest(),
        warm.as_ref(),
    )?;
    create_out(&common.out)?;
    let model = &trained.model;
    write_text(&common.out, "model.json", &model.to_json())?;
    for (i, m) in trained.minima.iter().enumerate() {
        write_text(
            &common.out,
            &format!("minima_stage{}.json", i + 1),
            &m.to_json(),
        )?;
    }
    println!(
        "validation accuracy: stage 1 {:.4}, stage 2 {:.4}",
        model.stage1.validation_accuracy, model.stage2.validation_accuracy
    );
    Ok(())
}

#[derive(Serialize)]
struct Summary<'a> {
    schema_version: u32,
    config_digest: &'a str,
    feature_config_digest: &'a str,
    accuracy: f64,
    correct: u64,
    total: u64,
}

fn cmd_evaluate(common: &Common, model: &Path, dataset: &Path) -> Result<(), CliError> {
    let model = load_model(model)?;
    let ds = load_dataset(dataset)?;
    check_digest(&model, &ds)?;
    let (accuracy, cm) = evaluate(&model, &ds.eval)?;
    create_out(&common.out)?;
    write_text(&common.out, "confusion.csv", &cm.to_csv())?;
    write_text(&common.out, "confusion_percent.csv", &cm.percentage_table())?;
    let summary = Summary {
        schema_version: SUMMARY_SCHEMA_VERSION,
        config_digest: &model.config_digest,
        feature_config_digest: &model.feature_config_digest,
        accuracy,
        correct: cm.trace(),
        total: cm.total(),
    };
    let mut json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    json.push('\n');
    write_text(&common.out, "summary.json", &json)?;
    println!("accuracy: {accuracy:.4} ({}/{})", cm.trace(), cm.total());
    Ok(())
}

fn cmd_sweep(common: &Common, axis: &str) -> Result<(), CliError> {
    let axis: SweepAxis = axis.parse().map_err(CliError::Config)?;
    let cfg = load_config(common)?;
    let sweep_cfg = SweepConfig {
        scenario: cfg.scenario,
        classifier: cfg.classifier,
        trainer_noise: cfg.trainer_noise,
        match_budget: cfg.match_budget,
    };
    let jobs = common.jobs.unwrap_or_else(rayon::current_num_threads);
    let report = sweep(axis, &sweep_cfg, jobs)?;
    create_out(&common.out)?;
    write_text(&common.out, &format!("sweep_{axis}.csv"), &report.to_csv())?;
    write_text(
        &common.out,
        &format!("sweep_{axis}.json"),
        &report.to_json(),
    )?;
    for p in &report.points {
        match (p.accuracy, &p.error) {
            (Some(a), _) => println!(
                "{}: accuracy {a:.4} (reference {:.4})",
                p.setting, p.reference_accuracy
            ),
            (None, e) => println!("{}: failed: {}", p.setting, e.as_deref().unwrap_or("")),
        }
    }
    if report.succeeded() == 0 {
        return Err(CliError::SweepFailed("every sweep point failed".into()));
    }
    Ok(())
}

fn cmd_boost(common: &Common, model: &Path, dataset: &Path) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    let model = load_model(model)?;
    let ds = load_dataset(dataset)?;
    check_digest(&model, &ds)?;
    let (batches, held_out) = boost_batches(&ds.eval, cfg.boost_rounds);
    let (boosted, report) = boost(&model, &ds.train, &batches, &held_out, &cfg.classifier)?;
    create_out(&common.out)?;
    write_text(&common.out, "model.json", &boosted.to_json())?;
    #[derive(Serialize)]
    struct BoostFile<'a> {
        schema_version: u32,
        config_digest: String,
        #[serde(flatten)]
        report: &'a qgs_pmu::classify::BoostReport,
    }
    let file = BoostFile {
        schema_version: SUMMARY_SCHEMA_VERSION,
        config_digest: json_digest(&cfg),
        report: &report,
    };
    let mut json = serde_json::to_string_pretty(&file).expect("report serializes");
    json.push('\n');
    write_text(&common.out, "boost_report.json", &json)?;
    println!(
        "held-out accuracy: {:.4} before, {:.4} after {} rounds (reference {:.4})",
        report.initial_accuracy,
        report.final_accuracy,
        report.rounds.len(),
        report.reference_accuracy
    );
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Generate(c) => {
            set_jobs(c.jobs);
            cmd_generate(c)
        }
        Command::Train {
            common,
            dataset,
            resume,
        } => {
            set_jobs(common.jobs);
            cmd_train(common, dataset, resume.as_deref())
        }
        Command::Evaluate {
            common,
            model,
            dataset,
        } => {
            set_jobs(common.jobs);
            cmd_evaluate(common, model, dataset)
        }
        Command::Sweep { common, axis } => cmd_sweep(common, axis),
        Command::Boost {
            common,
            model,
            dataset,
        } => {
            set_jobs(common.jobs);
            cmd_boost(common, model, dataset)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
