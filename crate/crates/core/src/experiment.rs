//! Grid search over training hyper-parameters and the four-way model comparison.

use std::fs;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{median, EvalReport};
use crate::train::{evaluate_run, train, Partition, TrainResult};
use crate::unet::UNet;

/// A training function, swappable so callers can wrap or replace it.
pub type Trainer<'a> = dyn Fn(&RunConfig, &Dataset) -> Result<TrainResult> + Sync + 'a;

/// Default trainer: [`train`] without progress output.
pub fn quiet_train(cfg: &RunConfig, dataset: &Dataset) -> Result<TrainResult> {
    train(cfg, dataset, &mut |_| {})
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub lr0: Vec<f64>,
    pub depth: Vec<usize>,
    pub batch: Vec<usize>,
}

impl Default for Grid {
    fn default() -> Self {
        Grid { lr0: vec![1e-3, 5e-4, 1e-4], depth: vec![2, 3], batch: vec![8] }
    }
}

impl std::str::FromStr for Grid {
    type Err = Error;

    /// Parses `lr0=1e-3,5e-4;depth=2,3;batch=8`. Omitted axes keep their defaults.
    fn from_str(s: &str) -> Result<Self> {
        let mut grid = Grid::default();
        for part in s.split(';').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, values) =
                part.split_once('=').ok_or_else(|| Error::Config(format!("grid axis {part:?} is not key=v1,v2")))?;
            let bad = |v: &str| Error::Config(format!("bad value {v:?} for grid axis {key}"));
            let items = values.split(',').map(str::trim);
            match key.trim() {
                "lr0" => grid.lr0 = items.map(|v| v.parse().map_err(|_| bad(v))).collect::<Result<_>>()?,
                "depth" => grid.depth = items.map(|v| v.parse().map_err(|_| bad(v))).collect::<Result<_>>()?,
                "batch" => grid.batch = items.map(|v| v.parse().map_err(|_| bad(v))).collect::<Result<_>>()?,
                other => return Err(Error::Config(format!("unknown grid axis {other:?} (lr0 | depth | batch)"))),
            }
        }
        if grid.lr0.is_empty() || grid.depth.is_empty() || grid.batch.is_empty() {
            return Err(Error::Config("grid has an empty axis".into()));
        }
        Ok(grid)
    }
}

impl Grid {
    pub fn cells(&self) -> Vec<(f64, usize, usize)> {
        let mut out = Vec::new();
        for &lr in &self.lr0 {
            for &d in &self.depth {
                for &b in &self.batch {
                    out.push((lr, d, b));
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub lr0: f64,
    pub depth: usize,
    pub batch: usize,
    pub dir: PathBuf,
    pub best_val_dice: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub lr0: f64,
    pub depth: usize,
    pub batch: usize,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub cells: Vec<CellResult>,
    pub failures: Vec<CellFailure>,
    pub winner: CellResult,
    pub winner_test: EvalReport,
}

/// Highest validation Dice; ties go to the smaller depth, then the larger batch.
pub fn select_winner(cells: &[CellResult]) -> Option<&CellResult> {
    cells.iter().reduce(|best, c| {
        let better = c.best_val_dice > best.best_val_dice
            || (c.best_val_dice == best.best_val_dice
                && (c.depth < best.depth || (c.depth == best.depth && c.batch > best.batch)));
        if better {
            c
        } else {
            best
        }
    })
}

/// Trains every cell with the shared seed in its own subdirectory of
/// `base.out`, records failures without stopping, and evaluates the winner
/// on the test partition. Writes `grid.csv` and `grid_failures.csv`.
pub fn gridsearch(base: &RunConfig, dataset: &Dataset, grid: &Grid, trainer: &Trainer) -> Result<GridReport> {
    let mut cells = Vec::new();
    let mut failures = Vec::new();
    let mut states = Vec::new();
    for (lr0, depth, batch) in grid.cells() {
        let cfg = RunConfig {
            lr0,
            depth,
            batch_size: batch,
            out: base.out.join(format!("lr{lr0:e}_d{depth}_b{batch}")),
            ..base.clone()
        };
        match trainer(&cfg, dataset) {
            Ok(result) => {
                cells.push(CellResult { lr0, depth, batch, dir: result.dir.clone(), best_val_dice: result.best_val_dice });
                states.push(result);
            }
            Err(e) => failures.push(CellFailure { lr0, depth, batch, error: e.to_string() }),
        }
    }
    fs::create_dir_all(&base.out).map_err(|e| Error::io(&base.out, e))?;
    let mut csv = String::from("lr0,depth,batch,best_val_dice\n");
    for c in &cells {
        csv.push_str(&format!("{},{},{},{}\n", c.lr0, c.depth, c.batch, c.best_val_dice));
    }
    let path = base.out.join("grid.csv");
    fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    let mut csv = String::from("lr0,depth,batch,error\n");
    for f in &failures {
        csv.push_str(&format!("{},{},{},\"{}\"\n", f.lr0, f.depth, f.batch, f.error.replace('"', "'")));
    }
    let path = base.out.join("grid_failures.csv");
    fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;

    let winner = select_winner(&cells)
        .cloned()
        .ok_or_else(|| Error::Validation(format!("all {} grid cells failed", failures.len())))?;
    let result = states.iter().find(|r| r.dir == winner.dir).expect("winner was trained");
    let net = UNet::new(result.config.model_config())?;
    let winner_test = evaluate_run(&result.config, &net, &result.best, dataset, Partition::Test)?;
    winner_test.write(&base.out, "winner_test")?;
    Ok(GridReport { cells, failures, winner, winner_test })
}

/// One row of the comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub label: String,
    /// Test Dice per seed, in seed order.
    pub dice: Vec<f64>,
    pub median: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareTable {
    pub rows: Vec<CompareRow>,
    /// Conditioning off, per-sample standardization on, trained on both contrasts.
    pub blind: CompareRow,
}

pub const ROW_LABELS: [&str; 4] = ["U-Net T2w only", "U-Net T2*w only", "U-Net T2w + T2*w", "FiLMed-Unet T2w + T2*w"];
pub const BLIND_LABEL: &str = "U-Net T2w + T2*w (contrast-blind, standardized)";

impl CompareTable {
    /// Header plus the four model rows with two-decimal medians.
    pub fn render(&self) -> String {
        let width = ROW_LABELS.iter().map(|l| l.len()).max().unwrap_or(0);
        let mut s = format!("{:<width$}  Dice\n", "Model");
        for row in &self.rows {
            s.push_str(&format!("{:<width$}  {:.2}\n", row.label, row.median));
        }
        s
    }

    pub fn render_blind(&self) -> String {
        format!("{}: {:.2}", self.blind.label, self.blind.median)
    }
}

/// Trains and tests one configuration per seed; returns overall test Dice per seed.
pub fn run_seeds(
    base: &RunConfig,
    dataset: &Dataset,
    seeds: &[u64],
    slug: &str,
    trainer: &Trainer,
) -> Result<Vec<f64>> {
    seeds
        .iter()
        .map(|&seed| {
            let cfg = RunConfig { seed, out: base.out.join(slug).join(format!("seed{seed}")), ..base.clone() };
            let result = trainer(&cfg, dataset)?;
            let net = UNet::new(result.config.model_config())?;
            let report = evaluate_run(&result.config, &net, &result.best, dataset, Partition::Test)?;
            report.write(&cfg.out, "test_report")?;
            Ok(report.overall)
        })
        .collect()
}

/// Trains the four comparison configurations plus the contrast-blind
/// baseline over `seeds`, reporting the median test Dice of each.
pub fn compare(
    base: &RunConfig,
    t2: &Dataset,
    t2star: &Dataset,
    both: &Dataset,
    seeds: &[u64],
    trainer: &Trainer,
) -> Result<CompareTable> {
    if seeds.is_empty() {
        return Err(Error::Config("compare needs at least one seed".into()));
    }
    for d in [t2star, both] {
        t2.vocabulary.ensure_matches(&d.vocabulary)?;
    }
    if t2.mode != both.mode || t2star.mode != both.mode {
        return Err(Error::Config("comparison datasets were generated in different modes".into()));
    }
    let plain = RunConfig { conditioning: false, standardize: false, ..base.clone() };
    let film = RunConfig { conditioning: true, standardize: false, ..base.clone() };
    let blind = RunConfig { conditioning: false, standardize: true, ..base.clone() };
    let runs: [(&str, &RunConfig, &Dataset, &str); 5] = [
        (ROW_LABELS[0], &plain, t2, "unet_t2w"),
        (ROW_LABELS[1], &plain, t2star, "unet_t2star"),
        (ROW_LABELS[2], &plain, both, "unet_both"),
        (ROW_LABELS[3], &film, both, "film_both"),
        (BLIND_LABEL, &blind, both, "blind_both"),
    ];
    let mut rows = Vec::new();
    for (label, cfg, data, slug) in runs {
        let dice = run_seeds(cfg, data, seeds, slug, trainer)?;
        let med = median(&dice).expect("seeds are non-empty");
        rows.push(CompareRow { label: label.to_string(), dice, median: med });
    }
    let blind = rows.pop().expect("five rows");
    Ok(CompareTable { rows, blind })
}
