//! Aggregation of run directories into mean ± std tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use camcon::{LayerId, TrainMode};

use crate::config::ExperimentConfig;
use crate::experiment::{RunSummary, CONFIG_FILE, SUMMARY_FILE};
use crate::CliError;

pub const TABLE_MD: &str = "table.md";
pub const TABLE_CSV: &str = "table.csv";

#[derive(Clone, Debug, PartialEq)]
pub enum RunOutcome {
    Complete(RunSummary),
    /// Started (config written) but no summary.
    Failed {
        run_id: String,
        mode: TrainMode,
        ratio: f64,
        layer: u8,
    },
}

impl RunOutcome {
    pub fn run_id(&self) -> &str {
        match self {
            RunOutcome::Complete(s) => &s.run_id,
            RunOutcome::Failed { run_id, .. } => run_id,
        }
    }

    fn key(&self) -> CellKey {
        let (mode, ratio, layer) = match self {
            RunOutcome::Complete(s) => (s.mode, s.ratio, s.layer),
            RunOutcome::Failed { mode, ratio, layer, .. } => (*mode, *ratio, *layer),
        };
        match mode {
            TrainMode::Full => CellKey::Full { ratio: RatioKey::new(ratio), layer },
            TrainMode::Baseline => CellKey::Baseline,
            TrainMode::Ablation => CellKey::Ablation { ratio: RatioKey::new(ratio) },
        }
    }
}

/// Every run directory under `dir` (one level deep) in name order.
/// Directories without a run config are ignored.
pub fn collect_runs(dir: &Path) -> Result<Vec<RunOutcome>, CliError> {
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(CliError::Run(format!("{}: {e}", dir.display()))),
    };
    let mut dirs: Vec<_> = entries.filter_map(|e| e.ok()).map(|e| e.path()).filter(|p| p.is_dir()).collect();
    dirs.sort();
    let mut runs = Vec::new();
    for d in dirs {
        let summary = d.join(SUMMARY_FILE);
        if summary.is_file() {
            let text = fs::read_to_string(&summary).map_err(|e| CliError::Run(format!("{}: {e}", summary.display())))?;
            let s: RunSummary =
                serde_json::from_str(&text).map_err(|e| CliError::Run(format!("{}: {e}", summary.display())))?;
            runs.push(RunOutcome::Complete(s));
        } else if let Ok(c) = ExperimentConfig::load(&d.join(CONFIG_FILE)) {
            runs.push(RunOutcome::Failed {
                run_id: c.run_id,
                mode: c.train.mode,
                ratio: c.data.ratio,
                layer: c.train.target_layer.stage_index(),
            });
        }
    }
    Ok(runs)
}

/// Positive ratios ordered numerically through their bit patterns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RatioKey(u64);

impl RatioKey {
    pub fn new(r: f64) -> Self {
        Self(r.to_bits())
    }

    pub fn value(self) -> f64 {
        f64::from_bits(self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CellKey {
    Full { ratio: RatioKey, layer: u8 },
    Baseline,
    Ablation { ratio: RatioKey },
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Cell {
    /// Validation accuracies of completed runs, in run-id order.
    pub accuracies: Vec<f64>,
    pub failed: usize,
}

impl Cell {
    pub fn n(&self) -> usize {
        self.accuracies.len()
    }

    pub fn mean(&self) -> Option<f64> {
        (!self.accuracies.is_empty()).then(|| self.accuracies.iter().sum::<f64>() / self.n() as f64)
    }

    /// Sample standard deviation, defined for two or more runs.
    pub fn std(&self) -> Option<f64> {
        let m = self.mean()?;
        (self.n() >= 2).then(|| {
            let ss: f64 = self.accuracies.iter().map(|a| (a - m).powi(2)).sum();
            (ss / (self.n() - 1) as f64).sqrt()
        })
    }

    /// Percent with two decimals: `90.00 ± 1.41`, `90.00` for a single run,
    /// `—` when nothing completed.
    pub fn render(&self) -> String {
        match (self.mean(), self.std()) {
            (None, _) => "—".to_string(),
            (Some(m), None) => format!("{:.2}", 100.0 * m),
            (Some(m), Some(s)) => format!("{:.2} ± {:.2}", 100.0 * m, 100.0 * s),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ResultsTable {
    pub cells: BTreeMap<CellKey, Cell>,
}

impl ResultsTable {
    pub fn from_runs(runs: &[RunOutcome]) -> Result<Self, CliError> {
        let mut cells: BTreeMap<CellKey, Cell> = BTreeMap::new();
        for r in runs {
            let cell = cells.entry(r.key()).or_default();
            match r {
                RunOutcome::Complete(s) => {
                    if !(0.0..=1.0).contains(&s.val_accuracy) {
                        return Err(CliError::Run(format!("{}: accuracy {} outside [0, 1]", s.run_id, s.val_accuracy)));
                    }
                    cell.accuracies.push(s.val_accuracy);
                }
                RunOutcome::Failed { .. } => cell.failed += 1,
            }
        }
        Ok(Self { cells })
    }

    pub fn get(&self, key: &CellKey) -> Option<&Cell> {
        self.cells.get(key)
    }

    fn full_ratios(&self) -> Vec<RatioKey> {
        let mut r: Vec<_> = self
            .cells
            .keys()
            .filter_map(|k| match *k {
                CellKey::Full { ratio, .. } => Some(ratio),
                _ => None,
            })
            .collect();
        r.dedup();
        r
    }

    fn layers(&self) -> Vec<u8> {
        let mut l: Vec<_> = self
            .cells
            .keys()
            .filter_map(|k| match *k {
                CellKey::Full { layer, .. } => Some(layer),
                _ => None,
            })
            .collect();
        l.sort();
        l.dedup();
        l
    }

    /// Matrix cells plus one merged baseline cell.
    pub fn logical_cells(&self) -> usize {
        self.cells.keys().filter(|k| !matches!(k, CellKey::Ablation { .. })).count()
    }

    /// Layer of the full-mode cell with the highest mean at `ratio`; ties go
    /// to the shallower layer.
    pub fn best_full_layer(&self, ratio: f64) -> Option<LayerId> {
        let rk = RatioKey::new(ratio);
        self.cells
            .iter()
            .filter_map(|(k, c)| match *k {
                CellKey::Full { ratio, layer } if ratio == rk => c.mean().map(|m| (layer, m)),
                _ => None,
            })
            .fold(None, |best: Option<(u8, f64)>, (l, m)| match best {
                Some((_, bm)) if bm >= m => best,
                _ => Some((l, m)),
            })
            .and_then(|(l, _)| LayerId::new(l).ok())
    }

    pub fn failed_runs(&self) -> usize {
        self.cells.values().map(|c| c.failed).sum()
    }

    pub fn render_markdown(&self) -> String {
        let mut s = String::new();
        let layers = self.layers();
        let baseline = self.cells.get(&CellKey::Baseline);
        let full_ratios = self.full_ratios();
        if !full_ratios.is_empty() || baseline.is_some() {
            s.push_str("## Accuracy by ratio and target layer\n\n| Ratio |");
            for l in &layers {
                write!(s, " Layer{l} |").unwrap();
            }
            s.push_str(" Baseline |\n|---|");
            s.push_str(&"---|".repeat(layers.len() + 1));
            s.push('\n');
            let rows = if full_ratios.is_empty() { vec![None] } else { full_ratios.iter().copied().map(Some).collect() };
            for (i, ratio) in rows.iter().enumerate() {
                match ratio {
                    Some(r) => write!(s, "| {} |", r.value()).unwrap(),
                    None => s.push_str("| |"),
                }
                for &layer in &layers {
                    let cell = ratio.and_then(|ratio| self.cells.get(&CellKey::Full { ratio, layer }));
                    write!(s, " {} |", cell.map_or(String::new(), Cell::render)).unwrap();
                }
                let b = if i == 0 { baseline.map_or(String::new(), Cell::render) } else { String::new() };
                writeln!(s, " {b} |").unwrap();
            }
            s.push('\n');
        }
        let ablations: Vec<_> = self
            .cells
            .iter()
            .filter_map(|(k, c)| match *k {
                CellKey::Ablation { ratio } => Some((ratio, c)),
                _ => None,
            })
            .collect();
        if !ablations.is_empty() {
            s.push_str("## Ablation (Grad-CAM loss removed)\n\n| Ratio | Best | Ablation |\n|---|---|---|\n");
            for (ratio, c) in ablations {
                let best = self
                    .best_full_layer(ratio.value())
                    .map(|l| {
                        let cell = &self.cells[&CellKey::Full { ratio, layer: l.stage_index() }];
                        format!("{} (Layer{})", cell.render(), l.stage_index())
                    })
                    .unwrap_or_else(|| "—".to_string());
                writeln!(s, "| {} | {best} | {} |", ratio.value(), c.render()).unwrap();
            }
            s.push('\n');
        }
        s.push_str("Validation accuracy in percent: mean ± sample standard deviation over seeds.\n");
        let failed = self.failed_runs();
        if failed > 0 {
            writeln!(s, "\n— no completed run in the cell. {failed} run(s) did not complete.").unwrap();
        }
        s
    }

    pub fn render_csv(&self) -> String {
        let mut s = String::from("mode,ratio,layer,n,mean,std,failed\n");
        for (k, c) in &self.cells {
            let (mode, ratio, layer) = match *k {
                CellKey::Full { ratio, layer } => ("full", ratio.value().to_string(), layer.to_string()),
                CellKey::Baseline => ("baseline", String::new(), String::new()),
                CellKey::Ablation { ratio } => ("ablation", ratio.value().to_string(), String::new()),
            };
            let pct = |v: Option<f64>| v.map_or(String::new(), |v| format!("{:.4}", 100.0 * v));
            writeln!(s, "{mode},{ratio},{layer},{},{},{},{}", c.n(), pct(c.mean()), pct(c.std()), c.failed).unwrap();
        }
        s
    }
}

/// Aggregates `dir` and writes `table.md` and `table.csv` into it.
pub fn report(dir: &Path) -> Result<ResultsTable, CliError> {
    let runs = collect_runs(dir)?;
    if runs.is_empty() {
        return Err(CliError::Run(format!("no results found in {}", dir.display())));
    }
    let table = ResultsTable::from_runs(&runs)?;
    for (name, text) in [(TABLE_MD, table.render_markdown()), (TABLE_CSV, table.render_csv())] {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| CliError::Run(format!("{}: {e}", p.display())))?;
    }
    Ok(table)
}
