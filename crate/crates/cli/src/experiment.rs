//! Single runs, the ratio × layer × seed matrix and the ablation sweep.

use std::fs;
use std::path::Path;
use std::time::Instant;

use camcon::checkpoint::Checkpoint;
use camcon::data::{load_cifar10_partial, SplitManifest};
use camcon::trainer::{EpochMetrics, METRICS_CSV_HEADER};
use camcon::{build_backbone, evaluate, load_cifar10, make_splits, LayerId, TrainMode, Trainer};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::report::{collect_runs, ResultsTable};
use crate::CliError;

pub const SUMMARY_FILE: &str = "summary.json";
pub const PARTIAL_FILE: &str = "PARTIAL";
pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.csv";
pub const MANIFEST_FILE: &str = "split_manifest.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";

/// Flat result record of one completed run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub mode: TrainMode,
    pub ratio: f64,
    pub layer: u8,
    pub seed: u64,
    pub labeled_count: usize,
    pub epochs: usize,
    pub val_accuracy: f64,
    pub test_accuracy: Option<f64>,
    pub l_s: f64,
    pub l_p: f64,
    pub l_g: f64,
    pub wall_seconds: f64,
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Run(format!("{}: {e}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn prepare_run_dir(dir: &Path, overwrite: bool) -> Result<(), CliError> {
    let occupied = fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false);
    if occupied {
        if !overwrite {
            return Err(CliError::Config(format!(
                "run directory {} already exists; pass --overwrite to replace it",
                dir.display()
            )));
        }
        fs::remove_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

/// Loads data, trains, evaluates and writes the run directory
/// `output_dir/run_id`. A failure after the directory was created leaves a
/// `PARTIAL` file holding the error.
pub fn run_experiment(config: &ExperimentConfig, overwrite: bool) -> Result<RunSummary, CliError> {
    config.validate()?;
    let dir = config.run_dir();
    prepare_run_dir(&dir, overwrite)?;
    write(&dir.join(CONFIG_FILE), &config.to_toml())?;
    match execute(config, &dir) {
        Ok(summary) => Ok(summary),
        Err(e) => {
            let _ = fs::write(dir.join(PARTIAL_FILE), format!("{e}\n"));
            Err(e)
        }
    }
}

fn execute(config: &ExperimentConfig, dir: &Path) -> Result<RunSummary, CliError> {
    let start = Instant::now();
    let src = &config.dataset;
    let (train_raw, test_raw) = if src.exact_counts {
        load_cifar10(&src.dir)?
    } else {
        load_cifar10_partial(&src.dir)?
    };
    let split = make_splits(&train_raw, &config.data)?.with_test(&test_raw);
    drop(train_raw);
    log::info!(
        "{}: {} labeled, {} unlabeled, {} validation, {} test",
        config.run_id,
        split.labeled.len(),
        split.unlabeled.len(),
        split.validation.len(),
        test_raw.len()
    );
    write(&dir.join(MANIFEST_FILE), &SplitManifest::from_split(&split).render())?;

    let metrics_path = dir.join(METRICS_FILE);
    let mut csv = format!("{METRICS_CSV_HEADER}\n");
    write(&metrics_path, &csv)?;
    let model = build_backbone(&config.model)?;
    let mut trainer = Trainer::new(model, &split, config.train.clone(), config.augment.clone())?;
    let ckpt = dir.join(CHECKPOINT_FILE);
    let mut last: Option<EpochMetrics> = None;
    while !trainer.is_finished() {
        let m = trainer.run_epoch()?;
        csv.push_str(&m.csv_row());
        csv.push('\n');
        write(&metrics_path, &csv)?;
        Checkpoint::from_trainer(&trainer).save(&ckpt)?;
        last = Some(m);
    }
    let last = last.expect("at least one epoch");
    let test_accuracy = match &split.test {
        Some(t) if !t.is_empty() => Some(evaluate(trainer.model(), t)?),
        _ => None,
    };
    let summary = RunSummary {
        run_id: config.run_id.clone(),
        mode: config.train.mode,
        ratio: config.data.ratio,
        layer: config.train.target_layer.stage_index(),
        seed: config.train.seed,
        labeled_count: config.data.labeled_count,
        epochs: config.train.epochs,
        val_accuracy: last.val_accuracy,
        test_accuracy,
        l_s: last.l_s,
        l_p: last.l_p,
        l_g: last.l_g,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write(&dir.join(SUMMARY_FILE), &format!("{json}\n"))?;
    Ok(summary)
}

pub fn read_metrics(path: &Path) -> Result<Vec<EpochMetrics>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut rows = Vec::new();
    for line in text.lines().skip(1).filter(|l| !l.is_empty()) {
        let f: Vec<f64> = line
            .split(',')
            .map(|v| v.parse().map_err(|_| CliError::Run(format!("bad metrics row {line:?}"))))
            .collect::<Result<_, _>>()?;
        if f.len() != 6 {
            return Err(CliError::Run(format!("bad metrics row {line:?}")));
        }
        rows.push(EpochMetrics {
            epoch: f[0] as usize,
            l_s: f[1],
            l_p: f[2],
            l_g: f[3],
            val_accuracy: f[4],
            wall_seconds: f[5],
        });
    }
    Ok(rows)
}

fn ratio_tag(r: f64) -> String {
    format!("{r}").replace('.', "p")
}

pub fn full_run_id(ratio: f64, layer: LayerId, seed: u64) -> String {
    format!("full_r{}_l{}_s{seed}", ratio_tag(ratio), layer.stage_index())
}

pub fn baseline_run_id(seed: u64) -> String {
    format!("baseline_s{seed}")
}

pub fn ablation_run_id(ratio: f64, seed: u64) -> String {
    format!("ablation_r{}_s{seed}", ratio_tag(ratio))
}

/// The runs a matrix consists of: one full-mode run per (ratio, layer, seed),
/// then one baseline run per seed.
pub fn matrix_plan(base: &ExperimentConfig, ratios: &[f64], layers: &[LayerId], seeds: &[u64]) -> Vec<ExperimentConfig> {
    let mut plan = Vec::new();
    for &ratio in ratios {
        for &layer in layers {
            for &seed in seeds {
                let mut c = base.clone().with_seed(seed);
                c.run_id = full_run_id(ratio, layer, seed);
                c.data.ratio = ratio;
                c.train.target_layer = layer;
                c.train.mode = TrainMode::Full;
                plan.push(c);
            }
        }
    }
    for &seed in seeds {
        let mut c = base.clone().with_seed(seed);
        c.run_id = baseline_run_id(seed);
        c.data.ratio = ratios[0];
        c.train.mode = TrainMode::Baseline;
        plan.push(c);
    }
    plan
}

fn check_lists(ratios: &[f64], seeds: &[u64], layers: Option<&[LayerId]>) -> Result<(), CliError> {
    if ratios.is_empty() || seeds.is_empty() || layers.is_some_and(<[_]>::is_empty) {
        return Err(CliError::Config("ratio, layer and seed lists must be non-empty".into()));
    }
    Ok(())
}

fn run_all(plan: &[ExperimentConfig], overwrite: bool) -> Result<(), CliError> {
    for (k, c) in plan.iter().enumerate() {
        log::info!("run {}/{}: {}", k + 1, plan.len(), c.run_id);
        match run_experiment(c, overwrite) {
            Ok(s) => log::info!("{}: val accuracy {:.4}", s.run_id, s.val_accuracy),
            Err(e @ CliError::Config(_)) if k == 0 => return Err(e),
            Err(e) => log::error!("{} failed: {e}", c.run_id),
        }
    }
    Ok(())
}

/// Runs the matrix into `base.output_dir` and aggregates what completed.
/// Failed runs are logged and show up as absent cells.
pub fn run_matrix(base: &ExperimentConfig, ratios: &[f64], layers: &[LayerId], seeds: &[u64], overwrite: bool) -> Result<ResultsTable, CliError> {
    check_lists(ratios, seeds, Some(layers))?;
    base.validate()?;
    run_all(&matrix_plan(base, ratios, layers, seeds), overwrite)?;
    ResultsTable::from_runs(&collect_runs(&base.output_dir)?)
}

/// The layer of the best full-mode cell per ratio among completed runs in `dir`.
pub fn best_layers(dir: &Path, ratios: &[f64]) -> Result<Vec<(f64, LayerId)>, CliError> {
    let table = ResultsTable::from_runs(&collect_runs(dir)?)?;
    ratios
        .iter()
        .map(|&r| {
            table.best_full_layer(r).map(|l| (r, l)).ok_or_else(|| {
                CliError::Config(format!(
                    "no completed matrix runs for ratio {r} in {}; run `camcon matrix` with the same --out first",
                    dir.display()
                ))
            })
        })
        .collect()
}

pub fn ablation_plan(base: &ExperimentConfig, best: &[(f64, LayerId)], seeds: &[u64]) -> Vec<ExperimentConfig> {
    let mut plan = Vec::new();
    for &(ratio, layer) in best {
        for &seed in seeds {
            let mut c = base.clone().with_seed(seed);
            c.run_id = ablation_run_id(ratio, seed);
            c.data.ratio = ratio;
            c.train.target_layer = layer;
            c.train.mode = TrainMode::Ablation;
            plan.push(c);
        }
    }
    plan
}

/// Ablation runs (Grad-CAM weight 0) per (ratio, seed), paired with the best
/// full-mode cell of each ratio from a matrix already in `base.output_dir`.
pub fn run_ablation(base: &ExperimentConfig, ratios: &[f64], seeds: &[u64], overwrite: bool) -> Result<ResultsTable, CliError> {
    check_lists(ratios, seeds, None)?;
    base.validate()?;
    let best = best_layers(&base.output_dir, ratios)?;
    run_all(&ablation_plan(base, &best, seeds), overwrite)?;
    ResultsTable::from_runs(&collect_runs(&base.output_dir)?)
}
