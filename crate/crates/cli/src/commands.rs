//! Argument definitions and subcommand implementations.

use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use morphscope_core::checkpoint::{train_classifier, train_vae, VaeCheckpoint};
use morphscope_core::classifier::{ClassifierArch, ClassifierTrainConfig};
use morphscope_core::data::{make_dataset, DatasetName, Split};
use morphscope_core::latent::LatentVector;
use morphscope_core::neighborhood::{Exploration, NeighborhoodSpec};
use morphscope_core::render::{encode_rgb_png, render_montage, write_file_atomic, MorphRecord, NeighborhoodRecord};
use morphscope_core::vae::VaeTrainConfig;
use morphscope_core::workbench::{classifier_path, vae_path, Workbench, WorkbenchConfig};

use crate::fetch::{fetch, Outcome};
use crate::Failure;

#[derive(Debug, Parser)]
#[command(name = "morphscope", version, about = "Explain image-classifier mispredictions through VAE latent neighborhoods")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

/// Every flag can also be set through the `MORPHSCOPE_` variable named next to it.
#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Directory holding `<dataset>/*-ubyte` IDX files.
    #[arg(long, env = "MORPHSCOPE_DATA_DIR", default_value = "data", global = true)]
    pub data_dir: PathBuf,
    /// Directory holding `<dataset>/vae.ckpt` and `<dataset>/classifier.ckpt`.
    #[arg(long, env = "MORPHSCOPE_CHECKPOINT_DIR", default_value = "checkpoints", global = true)]
    pub checkpoint_dir: PathBuf,
    #[arg(long, env = "MORPHSCOPE_SEED", default_value_t = 0, global = true)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct DatasetArg {
    /// `mnist` or `fashion_mnist`.
    #[arg(long, env = "MORPHSCOPE_DATASET", default_value = "mnist")]
    pub dataset: DatasetName,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Download and verify the four IDX files of a dataset.
    Fetch {
        #[command(flatten)]
        dataset: DatasetArg,
        /// Base URL the `<file>.gz` names are appended to.
        #[arg(long, env = "MORPHSCOPE_MIRROR")]
        mirror: Option<String>,
    },
    /// Train the convolutional VAE.
    TrainVae(TrainVaeArgs),
    /// Train the classifier under investigation.
    TrainClf(TrainClfArgs),
    /// List misclassified test items.
    Mispredict {
        #[command(flatten)]
        dataset: DatasetArg,
        #[arg(long, default_value_t = 20)]
        limit: usize,
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Render a classified neighborhood around a test item as a montage plus JSON sidecar.
    Explain(ExplainArgs),
    /// Run the HTTP API.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct TrainVaeArgs {
    #[command(flatten)]
    pub dataset: DatasetArg,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Train on the first N training items only.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Output path; defaults to the checkpoint directory layout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ArchArg {
    Cnn,
    /// Linear head on the frozen VAE encoder mean; needs a trained VAE.
    LatentLinear,
}

#[derive(Debug, Args)]
pub struct TrainClfArgs {
    #[command(flatten)]
    pub dataset: DatasetArg,
    #[arg(long, value_enum, default_value_t = ArchArg::Cnn)]
    pub arch: ArchArg,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    #[value(name = "path_1d", alias = "path")]
    Path1d,
    #[value(name = "grid_2d", alias = "grid")]
    Grid2d,
    Morph,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[command(flatten)]
    pub dataset: DatasetArg,
    /// Index of the point-of-interest in the test split.
    #[arg(long)]
    pub index: usize,
    #[arg(long, value_enum)]
    pub kind: KindArg,
    /// Latent axes: one for a path, two (comma separated) for a grid.
    #[arg(long, value_delimiter = ',')]
    pub dims: Vec<usize>,
    #[arg(long, default_value_t = 1.0)]
    pub step_length: f64,
    /// Steps on each side of the center for a path.
    #[arg(long, default_value_t = 4)]
    pub count: usize,
    #[arg(long, default_value_t = 9)]
    pub rows: usize,
    #[arg(long, default_value_t = 9)]
    pub cols: usize,
    /// Interpolation steps per half of a morph path.
    #[arg(long, default_value_t = 8)]
    pub num_neighbors: usize,
    /// Split searched for morph anchors.
    #[arg(long, value_enum, env = "MORPHSCOPE_INDEX_SPLIT", default_value_t = SplitArg::Train)]
    pub index_split: SplitArg,
    /// Montage path; the sidecar goes next to it with a `.json` extension.
    #[arg(long, default_value = "explain.png")]
    pub out: PathBuf,
    /// Upscaling factor for each 28x28 tile.
    #[arg(long, default_value_t = 2)]
    pub scale: u32,
}

impl ExplainArgs {
    pub fn spec(&self) -> Result<NeighborhoodSpec, Failure> {
        let want = |n: usize| {
            if self.dims.len() == n {
                Ok(())
            } else {
                Err(Failure::Argument(format!(
                    "{:?} needs {n} value(s) for --dims, got {}",
                    self.kind,
                    self.dims.len()
                )))
            }
        };
        Ok(match self.kind {
            KindArg::Path1d => {
                want(1)?;
                NeighborhoodSpec::Path1d {
                    dim: self.dims[0],
                    step_length: self.step_length,
                    count_per_side: self.count,
                }
            }
            KindArg::Grid2d => {
                want(2)?;
                NeighborhoodSpec::Grid2d {
                    dims: [self.dims[0], self.dims[1]],
                    step_length: self.step_length,
                    rows: self.rows,
                    cols: self.cols,
                }
            }
            KindArg::Morph => NeighborhoodSpec::Morph {
                num_neighbors: self.num_neighbors,
            },
        })
    }
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "MORPHSCOPE_HOST", default_value = "127.0.0.1")]
    pub host: String,
    /// 0 picks a free port; the bound address is printed either way.
    #[arg(long, env = "MORPHSCOPE_PORT", default_value_t = 8080)]
    pub port: u16,
    /// Where session records are stored.
    #[arg(long, env = "MORPHSCOPE_STATE_DIR", default_value = "sessions")]
    pub state_dir: PathBuf,
    #[arg(long, value_enum, env = "MORPHSCOPE_INDEX_SPLIT", default_value_t = SplitArg::Train)]
    pub index_split: SplitArg,
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let g = &cli.global;
    match cli.command {
        Command::Fetch { dataset, mirror } => {
            for (path, outcome) in fetch(&g.data_dir, dataset.dataset, mirror.as_deref())? {
                let verb = match outcome {
                    Outcome::AlreadyPresent => "present",
                    Outcome::Downloaded => "downloaded",
                };
                println!("{verb} {}", path.display());
            }
            Ok(())
        }
        Command::TrainVae(args) => cmd_train_vae(g, args),
        Command::TrainClf(args) => cmd_train_clf(g, args),
        Command::Mispredict { dataset, limit, json } => cmd_mispredict(g, dataset.dataset, limit, json),
        Command::Explain(args) => cmd_explain(g, &args).map(|_| ()),
        Command::Serve(args) => cmd_serve(g, args),
    }
}

fn ensure_parent(path: &Path) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(())
}

fn cmd_train_vae(g: &GlobalArgs, args: TrainVaeArgs) -> anyhow::Result<()> {
    let name = args.dataset.dataset;
    let mut train = make_dataset(&g.data_dir, name, Split::Train)?;
    if let Some(n) = args.limit {
        train = train.head(n);
    }
    let defaults = VaeTrainConfig::for_dataset(name);
    let config = VaeTrainConfig {
        epochs: args.epochs.unwrap_or(defaults.epochs),
        batch_size: args.batch_size.unwrap_or(defaults.batch_size),
        learning_rate: args.learning_rate.unwrap_or(defaults.learning_rate),
        seed: g.seed,
        ..defaults
    };
    let ckpt = train_vae(&train, &config)?;
    let out = args.out.unwrap_or_else(|| vae_path(&g.checkpoint_dir, name));
    ensure_parent(&out)?;
    ckpt.save(&out)?;
    println!(
        "saved {} (latent dim {}, final loss {:.4})",
        out.display(),
        config.latent_dim,
        ckpt.metadata.final_loss
    );
    Ok(())
}

fn cmd_train_clf(g: &GlobalArgs, args: TrainClfArgs) -> anyhow::Result<()> {
    let name = args.dataset.dataset;
    let mut train = make_dataset(&g.data_dir, name, Split::Train)?;
    if let Some(n) = args.limit {
        train = train.head(n);
    }
    let test = make_dataset(&g.data_dir, name, Split::Test)?;
    let vae = match args.arch {
        ArchArg::Cnn => None,
        ArchArg::LatentLinear => Some(VaeCheckpoint::load(vae_path(&g.checkpoint_dir, name))?),
    };
    let arch = match args.arch {
        ArchArg::Cnn => ClassifierArch::default(),
        ArchArg::LatentLinear => ClassifierArch::LatentLinear {
            latent_dim: name.latent_dim(),
        },
    };
    let defaults = ClassifierTrainConfig::default();
    let config = ClassifierTrainConfig {
        arch,
        epochs: args.epochs.unwrap_or(defaults.epochs),
        batch_size: args.batch_size.unwrap_or(defaults.batch_size),
        learning_rate: args.learning_rate.unwrap_or(defaults.learning_rate),
        seed: g.seed,
    };
    let ckpt = train_classifier(&train, &test, &config, vae.as_ref().map(|c| &c.vae))?;
    let out = args.out.unwrap_or_else(|| classifier_path(&g.checkpoint_dir, name));
    ensure_parent(&out)?;
    ckpt.save(&out)?;
    println!("saved {} (test accuracy {:.4})", out.display(), ckpt.test_accuracy);
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MispredictionRow {
    pub dataset_index: usize,
    pub true_label: usize,
    pub predicted_label: usize,
    pub true_name: String,
    pub predicted_name: String,
}

fn cmd_mispredict(g: &GlobalArgs, name: DatasetName, limit: usize, json: bool) -> anyhow::Result<()> {
    let ckpt = morphscope_core::checkpoint::ClassifierCheckpoint::load(classifier_path(&g.checkpoint_dir, name))?;
    let test = make_dataset(&g.data_dir, name, Split::Test)?;
    let names = name.class_names();
    let rows: Vec<MispredictionRow> = morphscope_core::classifier::find_mispredictions(&test, &ckpt.classifier, limit)
        .into_iter()
        .map(|m| MispredictionRow {
            dataset_index: m.dataset_index,
            true_label: m.true_label,
            predicted_label: m.predicted_label,
            true_name: names[m.true_label].to_string(),
            predicted_name: names[m.predicted_label].to_string(),
        })
        .collect();
    if json {
        println!("{}", serde_json::to_string_pretty(&rows)?);
    } else {
        println!("{:>6}  {:<12} {:<12}", "index", "true", "predicted");
        for r in &rows {
            println!("{:>6}  {:<12} {:<12}", r.dataset_index, r.true_name, r.predicted_name);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoiSummary {
    pub dataset_index: usize,
    pub true_label: usize,
    pub predicted_label: usize,
    pub reconstruction_label: usize,
    pub latent: LatentVector,
}

/// Contents of the JSON file written next to a montage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub dataset: DatasetName,
    pub vae_sha256: String,
    pub classifier_sha256: String,
    pub poi: PoiSummary,
    pub neighborhood: NeighborhoodRecord,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub morph: Option<MorphRecord>,
}

pub fn sidecar_path(montage: &Path) -> PathBuf {
    montage.with_extension("json")
}

pub fn cmd_explain(g: &GlobalArgs, args: &ExplainArgs) -> anyhow::Result<Sidecar> {
    let spec = args.spec()?;
    let name = args.dataset.dataset;
    let mut config = WorkbenchConfig::new(&g.data_dir, &g.checkpoint_dir);
    config.index_split = args.index_split.into();
    let bench = Workbench::open(&config, name)?;
    spec.validate(name.latent_dim())?;
    let poi = bench.point_of_interest(args.index)?;
    let exploration = bench.explain(&poi, &spec)?;
    let neighborhood = exploration.neighborhood();

    let sidecar = Sidecar {
        dataset: name,
        vae_sha256: bench.vae_ref.sha256.clone(),
        classifier_sha256: bench.classifier_ref.sha256.clone(),
        poi: PoiSummary {
            dataset_index: args.index,
            true_label: poi.true_label,
            predicted_label: poi.predicted_label,
            reconstruction_label: poi.reconstruction_label,
            latent: poi.latent.clone(),
        },
        neighborhood: NeighborhoodRecord::new(neighborhood, name.class_names()),
        morph: match &exploration {
            Exploration::Morph(m) => Some(MorphRecord::new(m)),
            Exploration::Neighborhood(_) => None,
        },
    };

    ensure_parent(&args.out)?;
    let montage = render_montage(neighborhood, args.scale);
    write_file_atomic(&args.out, &encode_rgb_png(&montage))?;
    let side = sidecar_path(&args.out);
    write_file_atomic(&side, serde_json::to_string_pretty(&sidecar)?.as_bytes())?;
    println!(
        "wrote {} ({} cells, {} boundary edges) and {}",
        args.out.display(),
        neighborhood.labels.len(),
        neighborhood.boundary_edges.len(),
        side.display()
    );
    Ok(sidecar)
}

fn cmd_serve(g: &GlobalArgs, args: ServeArgs) -> anyhow::Result<()> {
    let mut workbench = WorkbenchConfig::new(&g.data_dir, &g.checkpoint_dir);
    workbench.index_split = args.index_split.into();
    let config = morphscope_service::ServiceConfig {
        workbench,
        state_dir: args.state_dir,
    };
    let runtime = tokio::runtime::Runtime::new().context("starting async runtime")?;
    runtime.block_on(async move {
        let state = morphscope_service::AppState::new(config)?;
        let addr = format!("{}:{}", args.host, args.port);
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| morphscope_service::ServiceError::Startup(format!("binding {addr}: {e}")))?;
        let bound = listener.local_addr()?;
        println!("listening on http://{bound}");
        morphscope_service::serve(listener, state).await?;
        Ok(())
    })
}
