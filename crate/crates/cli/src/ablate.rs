//! Ablation grid runner: loss-component on/off cells, the non-uniform
//! prior cells, augmentation strength, label/unlabeled class splits, and
//! the shallow/deep architecture presets. Each cell runs over three seeds
//! and reports mean and sample standard deviation of labeled accuracy and
//! novel ACC.

use std::path::Path;
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use ncdlab_core::config::{deep_hidden, shallow_hidden, ExperimentConfig};
use ncdlab_core::error::{Error, Result};
use ncdlab_core::trainer;

use crate::{log_level, LogLevel};

pub const SEEDS_PER_CELL: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    LossComponents,
    Distribution,
    Augmentation,
    Split,
    Model,
}

pub fn parse_axes(arg: Option<&str>) -> Result<Vec<Axis>> {
    let Some(arg) = arg else {
        return Ok(Vec::new());
    };
    let mut axes = Vec::new();
    for part in arg.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let axis = match part {
            "loss-components" => Axis::LossComponents,
            "distribution" => Axis::Distribution,
            "augmentation" => Axis::Augmentation,
            "split" => Axis::Split,
            "model" => Axis::Model,
            other => {
                return Err(Error::Config(format!(
                    "unknown ablation axis {other}; valid axes: loss-components, \
                     distribution, augmentation, split, model"
                )))
            }
        };
        if !axes.contains(&axis) {
            axes.push(axis);
        }
    }
    Ok(axes)
}

#[derive(Debug, Clone)]
pub struct Cell {
    pub axis: &'static str,
    pub name: String,
    pub config: ExperimentConfig,
}

/// One grid row after running a cell over its seeds.
#[derive(Debug, Clone)]
pub struct CellResult {
    pub axis: &'static str,
    pub name: String,
    pub labeled_acc: Vec<f64>,
    pub novel_acc: Vec<f64>,
    pub status: String,
}

fn loss_component_cell(base: &ExperimentConfig, name: &str, on: [bool; 5]) -> Cell {
    let mut config = base.clone();
    let [ce, h, m, kl, v] = on;
    config.weights.enable_ce = ce;
    config.weights.enable_h = h;
    config.weights.enable_m = m;
    config.weights.enable_kl = kl;
    config.weights.enable_v = v;
    Cell {
        axis: "loss-components",
        name: name.to_string(),
        config,
    }
}

fn distribution_cell(base: &ExperimentConfig, name: &str, p_u: Option<Vec<f64>>) -> Cell {
    let mut config = base.clone();
    config.data.novel_classes = 5;
    config.data.p_u = p_u;
    config.train.batch_unlabeled = config.train.batch_unlabeled.max(50);
    Cell {
        axis: "distribution",
        name: name.to_string(),
        config,
    }
}

/// Enumerate the grid for the requested axes; empty axes means the single
/// baseline cell.
pub fn build_grid(base: &ExperimentConfig, axes: &[Axis]) -> Vec<Cell> {
    if axes.is_empty() {
        return vec![Cell {
            axis: "baseline",
            name: "baseline".into(),
            config: base.clone(),
        }];
    }
    let mut cells = Vec::new();
    for axis in axes {
        match axis {
            Axis::LossComponents => {
                // Single-loss rows and the kl+var row, plus the full
                // objective and the two leave-one-out cells it is compared
                // against.
                cells.push(loss_component_cell(base, "full", [true; 5]));
                cells.push(loss_component_cell(base, "ce", [true, false, false, false, false]));
                cells.push(loss_component_cell(base, "h", [false, true, false, false, false]));
                cells.push(loss_component_cell(base, "mse", [false, false, true, false, false]));
                cells.push(loss_component_cell(base, "kl", [false, false, false, true, false]));
                cells.push(loss_component_cell(base, "var", [false, false, false, false, true]));
                cells.push(loss_component_cell(base, "kl+var", [false, false, false, true, true]));
                cells.push(loss_component_cell(base, "no-kl", [true, true, true, false, true]));
                cells.push(loss_component_cell(base, "no-var", [true, true, true, true, false]));
            }
            Axis::Distribution => {
                cells.push(distribution_cell(base, "uniform", None));
                cells.push(distribution_cell(
                    base,
                    "1/3-tail-1/6",
                    Some(vec![1.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0, 1.0 / 6.0, 1.0 / 6.0]),
                ));
                cells.push(distribution_cell(
                    base,
                    "3/7-tail-1/7",
                    Some(vec![3.0 / 7.0, 1.0 / 7.0, 1.0 / 7.0, 1.0 / 7.0, 1.0 / 7.0]),
                ));
                cells.push(distribution_cell(
                    base,
                    "1/2-tail-1/8",
                    Some(vec![0.5, 0.125, 0.125, 0.125, 0.125]),
                ));
            }
            Axis::Augmentation => {
                let mut strong = base.clone();
                strong.augment.kind = "strong".into();
                cells.push(Cell {
                    axis: "augmentation",
                    name: "strong".into(),
                    config: strong,
                });
                let mut weak = base.clone();
                weak.augment.kind = "weak".into();
                cells.push(Cell {
                    axis: "augmentation",
                    name: "weak".into(),
                    config: weak,
                });
            }
            Axis::Split => {
                let l = base.data.labeled_classes as isize;
                let u = base.data.novel_classes as isize;
                for (dl, du) in [(1isize, -1isize), (0, 0), (-1, 1)] {
                    let (nl, nu) = (l + dl, u + du);
                    let name = format!("{nl}l-{nu}u");
                    let mut config = base.clone();
                    config.data.labeled_classes = nl.max(0) as usize;
                    config.data.novel_classes = nu.max(0) as usize;
                    // Class counts changed: fall back to the uniform prior.
                    config.data.p_u = None;
                    config.train.batch_unlabeled = config
                        .train
                        .batch_unlabeled
                        .max(10 * config.data.novel_classes);
                    cells.push(Cell {
                        axis: "split",
                        name,
                        config,
                    });
                }
            }
            Axis::Model => {
                let mut shallow = base.clone();
                shallow.model.hidden = shallow_hidden();
                cells.push(Cell {
                    axis: "model",
                    name: "shallow".into(),
                    config: shallow,
                });
                let mut deep = base.clone();
                deep.model.hidden = deep_hidden();
                cells.push(Cell {
                    axis: "model",
                    name: "deep".into(),
                    config: deep,
                });
            }
        }
    }
    cells
}

/// Run one cell over its three seeds. Per-seed failures mark the cell but
/// never abort the grid.
pub fn run_cell(cell: &Cell) -> CellResult {
    let base_seed = cell.config.train.seed;
    let mut labeled = Vec::new();
    let mut novel = Vec::new();
    let mut status = String::from("ok");
    for offset in 0..SEEDS_PER_CELL {
        let config = cell.config.clone().with_seed(base_seed + offset);
        match trainer::run_experiment(&config) {
            Ok((_, report)) => {
                labeled.push(report.labeled_accuracy);
                novel.push(report.novel_acc);
            }
            Err(e) => {
                if status == "ok" {
                    status = format!("error: {e}");
                }
            }
        }
    }
    CellResult {
        axis: cell.axis,
        name: cell.name.clone(),
        labeled_acc: labeled,
        novel_acc: novel,
        status,
    }
}

pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

pub const GRID_CSV_HEADER: &str =
    "axis,cell,seeds,labeled_acc_mean,labeled_acc_sd,novel_acc_mean,novel_acc_sd,status";

pub fn grid_csv(results: &[CellResult]) -> String {
    let mut out = String::from(GRID_CSV_HEADER);
    out.push('\n');
    for r in results {
        let (lm, ls) = mean_sd(&r.labeled_acc);
        let (nm, ns) = mean_sd(&r.novel_acc);
        let fmt = |v: f64| {
            if v.is_nan() {
                String::new()
            } else {
                format!("{v:.6}")
            }
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.axis,
            r.name,
            r.labeled_acc.len(),
            fmt(lm),
            fmt(ls),
            fmt(nm),
            fmt(ns),
            r.status
        ));
    }
    out
}

/// Run cells in parallel (each run stays single-threaded and isolated) and
/// assemble the report in declaration order.
pub fn run_grid(cells: &[Cell], workers: usize) -> Vec<CellResult> {
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<CellResult>>> = Mutex::new(vec![None; cells.len()]);
    let n_workers = workers.min(cells.len()).max(1);
    std::thread::scope(|scope| {
        for _ in 0..n_workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= cells.len() {
                    break;
                }
                let result = run_cell(&cells[i]);
                results.lock().unwrap()[i] = Some(result);
            });
        }
    });
    results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every cell ran"))
        .collect()
}

pub fn cmd_ablate(
    base: &ExperimentConfig,
    axes: &[Axis],
    workers: usize,
    out: &Path,
) -> std::result::Result<ExitCode, Error> {
    base.validate()?;
    let cells = build_grid(base, axes);
    let results = run_grid(&cells, workers);
    std::fs::create_dir_all(out)?;
    let csv = grid_csv(&results);
    std::fs::write(out.join("grid.csv"), &csv)?;
    if log_level() >= LogLevel::Info {
        print!("{csv}");
    }
    Ok(ExitCode::SUCCESS)
}
