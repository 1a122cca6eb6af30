use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use twinlatent::attack::{run_attack, MarginPolicy};
use twinlatent::checkpoint::file_digest;
use twinlatent::config::ExperimentConfig;
use twinlatent::dataset::{self, DatasetManifest, MixSpec, RealSelection};
use twinlatent::frechet::{distance_matrix, feature_sets, render_table};
use twinlatent::gan::{derive_seed, GanModel};
use twinlatent::io_util::{create_dir_all, write_atomic};
use twinlatent::margin::MarginHeadConfig;
use twinlatent::oracle::IdentityFactors;
use twinlatent::pipeline::{self, first_identities, Stage};
use twinlatent::providers::{self, Embedder, FeatureExtractor, OracleEmbedder, ToyEmbedder};
use twinlatent::recognition::{build_protocol, evaluate_verification, train_recognizer, Recognizer, RecognizerTrainConfig, VerificationProtocol};
use twinlatent::training::{self, AuxModels, OracleSource, TrainOutput};
use twinlatent::{Error, Result};

/// Identity-disentangled GAN training, synthetic identity datasets,
/// margin-softmax recognizers, membership inference and Frechet analysis.
///
/// `--seed`, `--config` and `--out` can also be set through
/// `TWINLATENT_SEED`, `TWINLATENT_CONFIG` and `TWINLATENT_OUT`.
#[derive(Parser)]
#[command(name = "twinlatent", version)]
struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true, env = "TWINLATENT_SEED")]
    seed: Option<u64>,

    /// Experiment configuration file (TOML); unspecified keys keep defaults.
    #[arg(long, global = true, env = "TWINLATENT_CONFIG")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the dual-latent GAN on oracle-world renders.
    TrainGan(TrainGanArgs),
    /// Export a labelled dataset from a trained generator.
    GenDataset(GenDatasetArgs),
    /// Render a labelled dataset of oracle identities.
    RenderOracle(RenderOracleArgs),
    /// Merge a synthetic dataset with a subset of a real one.
    MixDatasets(MixArgs),
    /// Build a balanced verification pair protocol from a dataset.
    MakeProtocol(MakeProtocolArgs),
    /// Train a margin-softmax recognizer on a dataset.
    TrainRecognizer(TrainRecognizerArgs),
    /// Evaluate verification accuracy on a pair protocol.
    EvalVerification(EvalArgs),
    /// Entropy-based membership inference against a recognizer.
    Attack(AttackArgs),
    /// Frechet distances between datasets in one feature space.
    Frechet(FrechetArgs),
    /// Run every stage from GAN training to Frechet analysis.
    Pipeline(PipelineArgs),
}

#[derive(Args)]
struct TrainGanArgs {
    /// Output directory for checkpoints and the metrics log.
    #[arg(long, env = "TWINLATENT_OUT")]
    out: PathBuf,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Weight of the auxiliary disentanglement losses.
    #[arg(long)]
    lambda_aux: Option<f64>,
    /// Train-state checkpoint to resume from.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct GenDatasetArgs {
    /// Generator checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Number of identities.
    #[arg(long, default_value_t = 50)]
    k: usize,
    /// Images per identity.
    #[arg(long, default_value_t = 20)]
    m: usize,
    #[arg(long, env = "TWINLATENT_OUT")]
    out: PathBuf,
}

#[derive(Args)]
struct RenderOracleArgs {
    /// First oracle identity index.
    #[arg(long, default_value_t = 0)]
    first: usize,
    /// Number of consecutive oracle identities.
    #[arg(long)]
    count: usize,
    /// Images per identity.
    #[arg(long, default_value_t = 20)]
    m: usize,
    #[arg(long, env = "TWINLATENT_OUT")]
    out: PathBuf,
}

#[derive(Args)]
struct MixArgs {
    #[arg(long)]
    synthetic: PathBuf,
    #[arg(long)]
    real: PathBuf,
    /// Number of real identities to include.
    #[arg(long, conflicts_with = "real_fraction")]
    real_count: Option<usize>,
    /// Fraction of real identities to include.
    #[arg(long)]
    real_fraction: Option<f64>,
    /// Output manifest path.
    #[arg(long, env = "TWINLATENT_OUT")]
    out: PathBuf,
}

#[derive(Args)]
struct MakeProtocolArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 10)]
    folds: usize,
    /// Positive pairs per fold; the same number of negatives is added.
    #[arg(long, default_value_t = 300)]
    pairs_per_fold: usize,
    /// Output protocol file.
    #[arg(long, env = "TWINLATENT_OUT")]
    out: PathBuf,
}

#[derive(Args)]
struct TrainRecognizerArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Validation protocol for early stopping.
    #[arg(long)]
    validation: Option<PathBuf>,
    /// Output checkpoint path.
    #[arg(long, env = "TWINLATENT_OUT")]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    /// Feature scale s.
    #[arg(long)]
    scale: Option<f64>,
    /// Angular margin m, radians.
    #[arg(long)]
    margin: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProviderName {
    Oracle,
    ToyCnn,
}

#[derive(Args)]
struct EvalArgs {
    /// Recognizer checkpoint (required for the toy-cnn provider).
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "toy-cnn")]
    provider: ProviderName,
    #[arg(long)]
    protocol: PathBuf,
    /// Output directory for the report; printed to stdout when absent.
    #[arg(long, env = "TWINLATENT_OUT")]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    NearestClass,
    NonMembersPlain,
    Plain,
}

impl From<PolicyArg> for MarginPolicy {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::NearestClass => MarginPolicy::NearestClass,
            PolicyArg::NonMembersPlain => MarginPolicy::NonMembersPlain,
            PolicyArg::Plain => MarginPolicy::Plain,
        }
    }
}

#[derive(Args)]
struct AttackArgs {
    /// Recognizer checkpoint under attack.
    #[arg(long)]
    model: PathBuf,
    /// Dataset the recognizer was trained on; labels must match its classes.
    #[arg(long)]
    members: PathBuf,
    /// Dataset of identities the recognizer never saw.
    #[arg(long)]
    nonmembers: PathBuf,
    /// Identities per population; defaults to the smaller dataset's count.
    #[arg(long)]
    identities: Option<usize>,
    #[arg(long, value_enum, default_value = "plain")]
    policy: PolicyArg,
    #[arg(long, env = "TWINLATENT_OUT")]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Space {
    Generic,
    Identity,
}

#[derive(Args)]
struct FrechetArgs {
    /// Dataset manifests or directories.
    #[arg(long, num_args = 2.., required = true)]
    datasets: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "generic")]
    space: Space,
    /// Recognizer checkpoint for the identity space.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = twinlatent::frechet::DEFAULT_EPS)]
    eps: f64,
    #[arg(long, env = "TWINLATENT_OUT")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PipelineArgs {
    /// Output root; overrides the configuration's `out`.
    #[arg(long, env = "TWINLATENT_OUT")]
    out: Option<PathBuf>,
    /// Stages to skip; their outputs must already exist.
    #[arg(long, value_delimiter = ',')]
    skip: Vec<String>,
}

fn experiment(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg.resolved())
}

fn emit(out: Option<&Path>, text: &str, json: String) -> Result<()> {
    match out {
        Some(dir) => {
            create_dir_all(dir)?;
            write_atomic(&dir.join("report.txt"), text.as_bytes())?;
            write_atomic(&dir.join("report.json"), json.as_bytes())
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = experiment(&cli)?;
    let seed = cfg.seed;
    match cli.command {
        Command::TrainGan(a) => {
            if let Some(v) = a.steps {
                cfg.train.steps = v;
            }
            if let Some(v) = a.batch_size {
                cfg.train.batch_size = v;
            }
            if let Some(v) = a.lambda_aux {
                cfg.losses.lambda_aux = v;
            }
            cfg.validate()?;
            let world = providers::oracle_world(&cfg.world)?;
            let p = &cfg.providers;
            let aux = AuxModels {
                embedder: providers::embedder(&p.embedder, &world, p.embedder_checkpoint.as_deref().map(Path::new))?,
                pose: providers::pose_estimator(&p.pose, &world, p.pose_checkpoint.as_deref().map(Path::new))?,
            };
            let source = Arc::new(OracleSource::new(world.clone(), derive_seed(seed, 1)));
            let out = TrainOutput::new(&a.out);
            training::train(cfg.gan.clone(), &cfg.train, &cfg.losses, &aux, source, &out, a.resume.as_deref())?;
            println!("{}", out.final_checkpoint().display());
        }
        Command::GenDataset(a) => {
            let model = GanModel::load(&a.checkpoint)?;
            let m = dataset::generate_dataset(&model, &file_digest(&a.checkpoint)?, a.k, a.m, seed, &a.out)?;
            println!("{} images of {} identities in {}", m.n_images(), m.n_identities, a.out.display());
        }
        Command::RenderOracle(a) => {
            let world = providers::oracle_world(&cfg.world)?;
            let ids = (a.first..a.first + a.count).map(IdentityFactors::from_index).collect::<Result<Vec<_>>>()?;
            let m = dataset::render_oracle_dataset(&world, &ids, a.m, seed, &a.out)?;
            println!("{} images of {} identities in {}", m.n_images(), m.n_identities, a.out.display());
        }
        Command::MixDatasets(a) => {
            let selection = match (a.real_count, a.real_fraction) {
                (Some(n), _) => RealSelection::Count(n),
                (None, Some(f)) => RealSelection::Fraction(f),
                (None, None) => RealSelection::Fraction(1.0),
            };
            let synthetic = DatasetManifest::load(&a.synthetic)?;
            let real = DatasetManifest::load(&a.real)?;
            let spec = MixSpec {
                synthetic: &synthetic,
                real: &real,
                real_identities: selection,
            };
            let m = dataset::mix_datasets(&spec, seed)?;
            m.write(&a.out)?;
            println!("{} identities written to {}", m.n_identities, a.out.display());
        }
        Command::MakeProtocol(a) => {
            let data = DatasetManifest::load(&a.dataset)?;
            let p = build_protocol(&data, a.folds, a.pairs_per_fold, seed)?;
            p.write(&a.out)?;
            println!("{} pairs in {} folds written to {}", p.pairs.len(), p.n_folds, a.out.display());
        }
        Command::TrainRecognizer(a) => {
            let data = DatasetManifest::load(&a.dataset)?;
            let (images, labels) = data.load_images()?;
            let rc = &cfg.recognizer;
            let head = MarginHeadConfig {
                s: a.scale.unwrap_or(rc.head.s),
                m: a.margin.unwrap_or(rc.head.m),
                n_classes: data.manifest.n_identities,
            };
            let train_cfg = RecognizerTrainConfig {
                max_epochs: a.epochs.unwrap_or(rc.train.max_epochs),
                patience: a.patience.unwrap_or(rc.train.patience),
                seed,
                ..rc.train.clone()
            };
            let validation = match &a.validation {
                Some(p) => Some(VerificationProtocol::read(p)?.load(data.manifest.channels)?),
                None => None,
            };
            let (model, report) = train_recognizer(&images, &labels, &head, &train_cfg, validation.as_ref())?;
            model.save(&a.out)?;
            write_atomic(&a.out.with_extension("report.json"), serde_json::to_string_pretty(&report)?.as_bytes())?;
            println!(
                "trained {} epochs (kept epoch {}), checkpoint {}",
                report.epochs_run,
                report.best_epoch,
                a.out.display()
            );
        }
        Command::EvalVerification(a) => {
            let world = providers::oracle_world(&cfg.world)?;
            let name = match a.provider {
                ProviderName::Oracle => providers::ORACLE,
                ProviderName::ToyCnn => providers::TOY_CNN,
            };
            let embedder: Arc<dyn Embedder> = providers::embedder(name, &world, a.model.as_deref())?;
            let set = VerificationProtocol::read(&a.protocol)?.load(cfg.gan.channels)?;
            let r = evaluate_verification(embedder.as_ref(), &set)?;
            emit(a.out.as_deref(), &r.report(), serde_json::to_string_pretty(&r)?)?;
            if a.out.is_some() {
                println!("accuracy = {:.6}", r.accuracy);
            }
        }
        Command::Attack(a) => {
            let model = Recognizer::load(&a.model)?;
            let members = DatasetManifest::load(&a.members)?;
            let nonmembers = DatasetManifest::load(&a.nonmembers)?;
            let n = a
                .identities
                .unwrap_or(members.manifest.n_identities.min(nonmembers.manifest.n_identities));
            let (mi, ml) = first_identities(&members, n)?;
            let (ni, _) = first_identities(&nonmembers, n)?;
            let r = run_attack(&model, &mi, &ml, &ni, a.policy.into())?;
            emit(a.out.as_deref(), &r.report(), serde_json::to_string_pretty(&r)?)?;
            if a.out.is_some() {
                println!("member_fraction_lowest_half = {:.6}\nauc = {:.6}", r.member_fraction_lowest_half, r.auc);
            }
        }
        Command::Frechet(a) => {
            let world = providers::oracle_world(&cfg.world)?;
            let extractor: Box<dyn FeatureExtractor> = match a.space {
                Space::Generic => Box::new(OracleEmbedder::new(world)),
                Space::Identity => {
                    let model = a
                        .model
                        .as_deref()
                        .ok_or_else(|| Error::Config("the identity space needs --model".into()))?;
                    Box::new(ToyEmbedder::load(model)?)
                }
            };
            let mut sets = Vec::new();
            for p in &a.datasets {
                let (images, _) = DatasetManifest::load(p)?.load_images()?;
                sets.push((p.display().to_string(), images));
            }
            let space = match a.space {
                Space::Generic => "generic",
                Space::Identity => "identity",
            };
            let m = distance_matrix(space, &feature_sets(&sets, extractor.as_ref())?, a.eps)?;
            emit(a.out.as_deref(), &render_table(&m, &m)?, serde_json::to_string_pretty(&m)?)?;
        }
        Command::Pipeline(a) => {
            let skip = a.skip.iter().map(|s| s.parse::<Stage>()).collect::<Result<Vec<_>>>()?;
            let out = a.out.unwrap_or_else(|| PathBuf::from(&cfg.out));
            let summary = pipeline::run_pipeline(&cfg, &out, &skip)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = e.to_string();
            eprintln!("error: {message}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                let text = s.to_string();
                if !message.contains(&text) {
                    eprintln!("  caused by: {text}");
                }
                source = s.source();
            }
            ExitCode::from(1)
        }
    }
}
