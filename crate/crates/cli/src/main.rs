use std::path::{Path, PathBuf};
use std::process::ExitCode;

use camcon::data::{read_batch_file, synthetic_dataset, write_cifar10_dir, SplitName, TEST_FILE};
use camcon::checkpoint::Checkpoint;
use camcon::trainer::unit_image;
use camcon::{sample_augmentation, AugmentationRecord, LayerId};
use camcon_cli::config::{ExperimentConfig, Scale};
use camcon_cli::experiment::{run_ablation, run_experiment, run_matrix};
use camcon_cli::panel::export_cam_panel;
use camcon_cli::report::{report, TABLE_MD};
use camcon_cli::CliError;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "camcon", version, about = "Grad-CAM consistency training experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace existing run directories.
    #[arg(long)]
    overwrite: bool,
    /// Small backbone and Adam, for quick runs.
    #[arg(long, conflicts_with = "paper_scale")]
    tiny: bool,
    /// Bottleneck backbone at 32×32 with SGD momentum.
    #[arg(long)]
    paper_scale: bool,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig, CliError> {
        let mut c = ExperimentConfig::load(&self.config)?;
        if let Some(out) = &self.out {
            c.output_dir = out.clone();
        }
        if self.tiny {
            c.apply_scale(Scale::Tiny);
        } else if self.paper_scale {
            c.apply_scale(Scale::Paper);
        }
        Ok(c)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one configuration.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ratio: Option<f64>,
        #[arg(long)]
        layer: Option<u8>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Full-mode runs over ratios × layers × seeds plus one baseline per seed.
    Matrix {
        #[command(flatten)]
        common: Common,
        #[arg(long, num_args = 1.., default_values_t = [0.5, 1.0, 2.0])]
        ratio: Vec<f64>,
        #[arg(long, num_args = 1.., default_values_t = [1, 2, 3, 4])]
        layer: Vec<u8>,
        #[arg(long, num_args = 1.., default_values_t = [0, 1, 2])]
        seed: Vec<u64>,
    },
    /// Runs without the Grad-CAM term at the best matrix layer of each ratio.
    Ablation {
        #[command(flatten)]
        common: Common,
        #[arg(long, num_args = 1.., default_values_t = [0.5, 1.0, 2.0])]
        ratio: Vec<f64>,
        #[arg(long, num_args = 1.., default_values_t = [0, 1, 2])]
        seed: Vec<u64>,
    },
    /// Writes a PNG of test images, their augmentations and Grad-CAM maps.
    Panel {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory with `test_batch.bin`.
        #[arg(long, default_value = "data/cifar-10-batches-bin")]
        data: PathBuf,
        /// Test-set indices, one panel row each.
        #[arg(long = "index", num_args = 1.., default_values_t = [0, 1, 2, 3])]
        indices: Vec<usize>,
        /// Defaults to the checkpoint's target layer.
        #[arg(long)]
        layer: Option<u8>,
        /// Seed of the augmentation shown.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Show the identity transform instead of a sampled one.
        #[arg(long)]
        identity: bool,
        #[arg(long, default_value = "panel.png")]
        out: PathBuf,
    },
    /// Aggregates the runs under a directory into table.md and table.csv.
    Report { dir: PathBuf },
    /// Writes a synthetic corpus in the CIFAR-10 binary layout.
    Fixture {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        train: usize,
        #[arg(long, default_value_t = 500)]
        test: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn layers(raw: &[u8]) -> Result<Vec<LayerId>, CliError> {
    raw.iter().map(|&l| LayerId::new(l).map_err(CliError::from)).collect()
}

fn print_table(dir: &Path) {
    if let Ok(text) = std::fs::read_to_string(dir.join(TABLE_MD)) {
        print!("{text}");
    }
}

fn panel(
    checkpoint: &Path,
    data: &Path,
    indices: &[usize],
    layer: Option<u8>,
    seed: u64,
    identity: bool,
    out: &Path,
) -> Result<(), CliError> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let layer = match layer {
        Some(l) => LayerId::new(l)?,
        None => ckpt.training.target_layer,
    };
    let test = read_batch_file(&data.join(TEST_FILE), SplitName::Test)?;
    let input = ckpt.model.input_shape;
    let images = indices
        .iter()
        .map(|&i| {
            if i < test.len() {
                Ok(unit_image(test.image(i), input))
            } else {
                Err(CliError::Config(format!("index {i} is outside the {} test images", test.len())))
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    let record = if identity {
        AugmentationRecord::identity((input.height, input.width))
    } else {
        sample_augmentation(seed, &ckpt.augment)?
    };
    let rows = export_cam_panel(checkpoint, &images, layer, &record, out)?;
    log::info!("wrote {} rows to {}", rows.len(), out.display());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { common, ratio, layer, seed } => {
            let mut c = common.load()?;
            if let Some(s) = seed {
                c = c.with_seed(s);
            }
            if let Some(r) = ratio {
                c.data.ratio = r;
            }
            if let Some(l) = layer {
                c.train.target_layer = LayerId::new(l)?;
            }
            let s = run_experiment(&c, common.overwrite)?;
            println!("{}", serde_json::to_string_pretty(&s).expect("summary serializes"));
        }
        Command::Matrix { common, ratio, layer, seed } => {
            let c = common.load()?;
            run_matrix(&c, &ratio, &layers(&layer)?, &seed, common.overwrite)?;
            report(&c.output_dir)?;
            print_table(&c.output_dir);
        }
        Command::Ablation { common, ratio, seed } => {
            let c = common.load()?;
            run_ablation(&c, &ratio, &seed, common.overwrite)?;
            report(&c.output_dir)?;
            print_table(&c.output_dir);
        }
        Command::Panel { checkpoint, data, indices, layer, seed, identity, out } => {
            panel(&checkpoint, &data, &indices, layer, seed, identity, &out)?
        }
        Command::Report { dir } => {
            report(&dir)?;
            print_table(&dir);
        }
        Command::Fixture { out, train, test, seed } => {
            let tr = synthetic_dataset(train, SplitName::Train, seed);
            let te = synthetic_dataset(test, SplitName::Test, seed.wrapping_add(1));
            write_cifar10_dir(&out, &tr, &te)?;
            log::info!("wrote {train} training and {test} test images to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
