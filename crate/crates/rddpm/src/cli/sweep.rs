//! `rddpm sweep`: runs a grid of train+evaluate cells — method ×
//! contamination × per-method parameter × seed — and aggregates the pixel
//! metrics over seeds into a CSV table and SVG line plots.
//!
//! Cells are independent: each derives its dataset, model
//! initialization, and evaluation streams from its own (contamination,
//! parameter, seed) coordinates, runs in a worker pool, and writes into
//! its own subdirectory. Results land in a slot array indexed by cell
//! position, so the emitted table does not depend on execution order or
//! on `--jobs`. A failing cell records its error and the sweep continues.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::core::RngState;
use crate::losses::RobustLossSpec;
use crate::metrics::{evaluate, EvalConfig, EvalReport};
use crate::model::{reference_net, ModelConfig};
use crate::trainer::{train, TrainConfig};
use crate::{Error, Result};

use super::build_data::{build_synthetic_dataset, DataConfig};
use super::plots::{write_line_plot, Series};
use super::{ensure_dir, file_sha256, hash_outputs, resolve_with_config, write_manifest, CommonArgs};

#[derive(Debug, clap::Args)]
pub(crate) struct SweepArgs {
    #[command(flatten)]
    pub(crate) common: CommonArgs,

    /// Methods to compare.
    #[arg(long, value_enum, value_delimiter = ',')]
    methods: Option<Vec<Method>>,
    /// Training-split contamination levels.
    #[arg(long, value_delimiter = ',')]
    contaminations: Option<Vec<f64>>,
    /// Huber corners; `l1` or `0` selects the pure L1 mode.
    #[arg(long, value_delimiter = ',')]
    deltas: Option<Vec<String>>,
    /// LTS kept fractions.
    #[arg(long, value_delimiter = ',')]
    lambdas: Option<Vec<f64>>,
    /// Seeds each cell is repeated with.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,

    /// Training patches per cell dataset.
    #[arg(long)]
    n_train: Option<usize>,
    /// Eval patches per cell dataset.
    #[arg(long)]
    n_eval: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    t_steps: Option<usize>,
    #[arg(long)]
    hidden_width: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    /// Stochastic reconstructions averaged per evaluated image.
    #[arg(long)]
    eval_repeats: Option<usize>,
}

/// The methods a sweep can compare: the plain diffusion baseline and the
/// two robust variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Ddpm,
    RddpmHuber,
    RddpmLts,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Ddpm => "ddpm",
            Method::RddpmHuber => "rddpm-huber",
            Method::RddpmLts => "rddpm-lts",
        }
    }
}

/// Fully resolved sweep description: the grid axes plus the per-cell
/// data, model, and training scales. The manifest embeds it verbatim.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub methods: Vec<Method>,
    /// Training-split contamination levels.
    pub contaminations: Vec<f64>,
    /// Huber corner grid; `"l1"` or `"0"` selects the pure L1 mode.
    pub deltas: Vec<String>,
    /// LTS kept-fraction grid.
    pub lambdas: Vec<f64>,
    pub seeds: Vec<u64>,

    pub n_train: usize,
    pub n_eval: usize,
    pub eval_contamination: f64,
    pub block_fraction: f64,
    pub intensity_factor: f64,
    pub patch_size: usize,
    pub channels: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub t_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub hidden_width: usize,
    pub depth: usize,
    pub noising_fraction: f64,
    pub eval_repeats: usize,
}

impl ExperimentPlan {
    pub fn for_profile(profile: super::Profile) -> ExperimentPlan {
        let scale = profile.scale();
        ExperimentPlan {
            methods: vec![Method::Ddpm, Method::RddpmHuber, Method::RddpmLts],
            contaminations: vec![0.2],
            deltas: vec!["0.2".to_string()],
            lambdas: vec![0.8],
            seeds: vec![0, 1, 2],
            n_train: scale.n_train,
            n_eval: scale.n_eval,
            eval_contamination: 0.5,
            block_fraction: 0.7,
            intensity_factor: 5.0,
            patch_size: 28,
            channels: 1,
            epochs: scale.epochs,
            batch_size: scale.batch_size,
            learning_rate: scale.learning_rate,
            t_steps: scale.t_steps,
            beta_start: 0.001,
            beta_end: 0.02,
            hidden_width: scale.hidden_width,
            depth: scale.depth,
            noising_fraction: 0.25,
            eval_repeats: scale.eval_repeats,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::invalid("sweep needs at least one method"));
        }
        if self.contaminations.is_empty() {
            return Err(Error::invalid("sweep needs at least one contamination level"));
        }
        if self.deltas.is_empty() || self.lambdas.is_empty() {
            return Err(Error::invalid("sweep parameter grids must be nonempty"));
        }
        if self.seeds.is_empty() {
            return Err(Error::invalid("sweep needs at least one seed"));
        }
        Ok(())
    }

    /// The cross-product of grid cells, in definition order: methods,
    /// then contaminations, then the method's parameter grid, then seeds.
    pub(crate) fn cells(&self) -> Vec<CellSpec> {
        let mut cells = Vec::new();
        for &method in &self.methods {
            let params: Vec<Option<String>> = match method {
                Method::Ddpm => vec![None],
                Method::RddpmHuber => self.deltas.iter().map(|d| Some(d.clone())).collect(),
                Method::RddpmLts => self.lambdas.iter().map(|l| Some(l.to_string())).collect(),
            };
            for &contamination in &self.contaminations {
                for param in &params {
                    for &seed in &self.seeds {
                        cells.push(CellSpec {
                            method,
                            contamination,
                            param: param.clone(),
                            seed,
                        });
                    }
                }
            }
        }
        cells
    }
}

/// One grid cell: a method at one contamination level, parameter value,
/// and seed.
#[derive(Clone, Debug)]
pub(crate) struct CellSpec {
    pub method: Method,
    pub contamination: f64,
    /// Huber delta or LTS lambda as written in the grid; None for the
    /// parameterless baseline.
    pub param: Option<String>,
    pub seed: u64,
}

impl CellSpec {
    pub(crate) fn id(&self) -> String {
        let param = match &self.param {
            None => String::new(),
            Some(p) => format!("-p{p}"),
        };
        format!("{}-c{}{}-s{}", self.method.name(), self.contamination, param, self.seed)
    }

    /// The value shown in the CSV `param` column.
    pub(crate) fn param_label(&self) -> String {
        self.param.clone().unwrap_or_else(|| "-".to_string())
    }

    /// Legend label grouping this cell's seed repetitions.
    pub(crate) fn series_label(&self) -> String {
        match (self.method, &self.param) {
            (Method::Ddpm, _) | (_, None) => self.method.name().to_string(),
            (Method::RddpmHuber, Some(p)) => format!("{} delta={p}", self.method.name()),
            (Method::RddpmLts, Some(p)) => format!("{} lambda={p}", self.method.name()),
        }
    }

    pub(crate) fn loss(&self) -> Result<RobustLossSpec> {
        match self.method {
            Method::Ddpm => Ok(RobustLossSpec::L2),
            Method::RddpmHuber => parse_delta(self.param.as_deref().unwrap_or("")),
            Method::RddpmLts => {
                let text = self.param.as_deref().unwrap_or("");
                let lambda: f64 = text
                    .parse()
                    .map_err(|_| Error::invalid(format!("cannot parse lts lambda `{text}`")))?;
                Ok(RobustLossSpec::Lts { lambda })
            }
        }
    }
}

/// Maps a delta grid entry to a loss: `"l1"` or a parsed zero selects the
/// explicit L1 mode (the delta → 0 limit), anything else is a Huber
/// corner (validated when the cell trains).
pub(crate) fn parse_delta(text: &str) -> Result<RobustLossSpec> {
    if text == "l1" {
        return Ok(RobustLossSpec::L1);
    }
    let delta: f64 =
        text.parse().map_err(|_| Error::invalid(format!("cannot parse huber delta `{text}`")))?;
    if delta == 0.0 {
        Ok(RobustLossSpec::L1)
    } else {
        Ok(RobustLossSpec::Huber { delta })
    }
}

/// One CSV row: a cell's metrics (seed row) or a seed-averaged aggregate
/// (`seed == "mean"`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub(crate) struct SweepRow {
    pub method: String,
    pub contamination: f64,
    pub param: String,
    pub seed: String,
    pub auroc: Option<f64>,
    pub auprc: Option<f64>,
    pub masked_mse: Option<f64>,
    pub status: String,
}

pub(crate) fn run(args: SweepArgs) -> Result<()> {
    let out = args.common.out.clone();
    let plan = resolve_plan(&args)?;
    let cells = plan.cells();
    ensure_dir(&out.join("cells"))?;

    let jobs = args
        .common
        .jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .min(cells.len().max(1));

    let next = AtomicUsize::new(0);
    let done = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<SweepRow>>> = cells.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= cells.len() {
                    break;
                }
                let row = execute_cell(&plan, &cells[i], &out);
                let finished = done.fetch_add(1, Ordering::Relaxed) + 1;
                eprintln!(
                    "[{finished}/{}] {}: {}",
                    cells.len(),
                    cells[i].id(),
                    row.status
                );
                *slots[i].lock().expect("no poisoned slot") = Some(row);
            });
        }
    });
    let seed_rows: Vec<SweepRow> = slots
        .into_iter()
        .map(|slot| slot.into_inner().expect("no poisoned slot").expect("every cell ran"))
        .collect();

    let aggregates = aggregate_rows(&seed_rows);
    let csv_path = out.join("metrics.csv");
    write_rows(&csv_path, seed_rows.iter().chain(&aggregates))?;

    ensure_dir(&out.join("plots"))?;
    let mut plot_files: Vec<String> = Vec::new();
    for (metric, file, title) in [
        (MetricColumn::Auroc, "plots/auroc.svg", "mean pixel AUROC"),
        (MetricColumn::Auprc, "plots/auprc.svg", "mean pixel AUPRC"),
    ] {
        let (x_label, series) = plot_series(&plan, &cells, &aggregates, metric);
        if series.iter().any(|s| !s.points.is_empty()) {
            write_line_plot(&out.join(file), title, x_label, metric.name(), &series)?;
            plot_files.push(file.to_string());
        }
    }

    let mut output_files = vec!["metrics.csv".to_string()];
    output_files.extend(plot_files);
    for (cell, row) in cells.iter().zip(&seed_rows) {
        let name = if row.status == "ok" { "metrics.json" } else { "error.txt" };
        output_files.push(format!("cells/{}/{name}", cell.id()));
    }

    let ok = seed_rows.iter().filter(|r| r.status == "ok").count();
    let mut inputs = serde_json::Map::new();
    if let Some(path) = &args.common.config {
        inputs.insert(path.display().to_string(), file_sha256(path)?.into());
    }
    let manifest = json!({
        "command": "sweep",
        "config": plan,
        "inputs": inputs,
        "outputs": hash_outputs(&out, &output_files)?,
        "summary": {
            "cells": cells.len(),
            "ok": ok,
            "failed": cells.len() - ok,
        },
    });
    write_manifest(&out, &manifest)?;

    for row in &aggregates {
        println!(
            "{} contamination={} param={} auroc={} auprc={} [{}]",
            row.method,
            row.contamination,
            row.param,
            row.auroc.map_or("-".to_string(), |v| format!("{v:.6}")),
            row.auprc.map_or("-".to_string(), |v| format!("{v:.6}")),
            row.status
        );
    }
    println!("wrote {} ({} cells, {} ok)", csv_path.display(), cells.len(), ok);
    Ok(())
}

fn resolve_plan(args: &SweepArgs) -> Result<ExperimentPlan> {
    let mut plan = resolve_with_config(
        ExperimentPlan::for_profile(args.common.profile),
        args.common.config.as_deref(),
    )?;
    if let Some(v) = &args.methods {
        plan.methods = v.clone();
    }
    if let Some(v) = &args.contaminations {
        plan.contaminations = v.clone();
    }
    if let Some(v) = &args.deltas {
        plan.deltas = v.clone();
    }
    if let Some(v) = &args.lambdas {
        plan.lambdas = v.clone();
    }
    if let Some(v) = &args.seeds {
        plan.seeds = v.clone();
    }
    if let Some(v) = args.n_train {
        plan.n_train = v;
    }
    if let Some(v) = args.n_eval {
        plan.n_eval = v;
    }
    if let Some(v) = args.epochs {
        plan.epochs = v;
    }
    if let Some(v) = args.t_steps {
        plan.t_steps = v;
    }
    if let Some(v) = args.hidden_width {
        plan.hidden_width = v;
    }
    if let Some(v) = args.depth {
        plan.depth = v;
    }
    if let Some(v) = args.eval_repeats {
        plan.eval_repeats = v;
    }
    plan.validate()?;
    Ok(plan)
}

/// Runs one cell and reports its row; failures become `status: "failed"`
/// rows with the error recorded next to the cell's artifacts.
fn execute_cell(plan: &ExperimentPlan, cell: &CellSpec, out: &Path) -> SweepRow {
    let cell_dir = out.join("cells").join(cell.id());
    let outcome = ensure_dir(&cell_dir).and_then(|()| run_cell(plan, cell, &cell_dir));
    let base = SweepRow {
        method: cell.method.name().to_string(),
        contamination: cell.contamination,
        param: cell.param_label(),
        seed: cell.seed.to_string(),
        auroc: None,
        auprc: None,
        masked_mse: None,
        status: "ok".to_string(),
    };
    match outcome {
        Ok(report) => SweepRow {
            auroc: Some(report.auroc),
            auprc: Some(report.auprc),
            masked_mse: Some(report.masked_mse),
            ..base
        },
        Err(e) => {
            let _ = std::fs::write(cell_dir.join("error.txt"), format!("{e}\n"));
            SweepRow { status: "failed".to_string(), ..base }
        }
    }
}

/// Dataset synthesis, training, and evaluation for one cell, entirely
/// from streams derived from the cell's own seed.
fn run_cell(plan: &ExperimentPlan, cell: &CellSpec, cell_dir: &Path) -> Result<EvalReport> {
    let data_config = DataConfig {
        n_train: plan.n_train,
        n_eval: plan.n_eval,
        contamination: cell.contamination,
        eval_contamination: plan.eval_contamination,
        block_fraction: plan.block_fraction,
        intensity_factor: plan.intensity_factor,
        patch_size: plan.patch_size,
        channels: plan.channels,
        seed: cell.seed,
    };
    let dataset = build_synthetic_dataset(&data_config)?;

    let train_config = TrainConfig {
        epochs: plan.epochs,
        batch_size: plan.batch_size,
        learning_rate: plan.learning_rate,
        loss: cell.loss()?,
        t_steps: plan.t_steps,
        beta_start: plan.beta_start,
        beta_end: plan.beta_end,
        seed: cell.seed,
        checkpoint_interval: 0,
    };
    let model_config = ModelConfig {
        channels: plan.channels,
        hidden_width: plan.hidden_width,
        depth: plan.depth,
        t_steps: plan.t_steps,
    };
    let mut init_rng = RngState::from_seed(cell.seed).split("model_init");
    let mut net = reference_net(&model_config, &mut init_rng)?;
    train(&dataset, &train_config, &mut net)?;

    let eval_config = EvalConfig {
        noising_fraction: plan.noising_fraction,
        repeats: plan.eval_repeats,
        per_image_mean: false,
        t_steps: plan.t_steps,
        beta_start: plan.beta_start,
        beta_end: plan.beta_end,
        seed: cell.seed,
    };
    let report = evaluate(&net, &dataset, &eval_config)?;

    let metrics = json!({
        "method": cell.method.name(),
        "contamination": cell.contamination,
        "param": cell.param_label(),
        "seed": cell.seed,
        "auroc": report.auroc,
        "auprc": report.auprc,
        "masked_mse": report.masked_mse,
    });
    let metrics_path = cell_dir.join("metrics.json");
    let mut text = serde_json::to_string_pretty(&metrics)
        .map_err(|e| Error::invalid(format!("cannot serialize cell metrics: {e}")))?;
    text.push('\n');
    std::fs::write(&metrics_path, text).map_err(|e| Error::io(&metrics_path, e))?;
    Ok(report)
}

/// Seed-averaged aggregates in first-appearance order of
/// (method, contamination, param); means cover only `ok` rows.
pub(crate) fn aggregate_rows(rows: &[SweepRow]) -> Vec<SweepRow> {
    let mut groups: Vec<((String, u64, String), Vec<&SweepRow>)> = Vec::new();
    for row in rows {
        let key = (row.method.clone(), row.contamination.to_bits(), row.param.clone());
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, members)) => members.push(row),
            None => groups.push((key, vec![row])),
        }
    }
    groups
        .into_iter()
        .map(|(_, members)| {
            let ok: Vec<&&SweepRow> = members.iter().filter(|r| r.status == "ok").collect();
            let mean = |get: fn(&SweepRow) -> Option<f64>| -> Option<f64> {
                if ok.is_empty() {
                    return None;
                }
                let sum: f64 = ok.iter().filter_map(|r| get(r)).sum();
                Some(sum / ok.len() as f64)
            };
            let first = members[0];
            SweepRow {
                method: first.method.clone(),
                contamination: first.contamination,
                param: first.param.clone(),
                seed: "mean".to_string(),
                auroc: mean(|r| r.auroc),
                auprc: mean(|r| r.auprc),
                masked_mse: mean(|r| r.masked_mse),
                status: if ok.is_empty() { "failed".to_string() } else { "ok".to_string() },
            }
        })
        .collect()
}

fn write_rows<'a>(path: &PathBuf, rows: impl Iterator<Item = &'a SweepRow>) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    for row in rows {
        writer.serialize(row).map_err(|e| Error::format(path, e.to_string()))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[derive(Clone, Copy, Debug)]
enum MetricColumn {
    Auroc,
    Auprc,
}

impl MetricColumn {
    fn name(self) -> &'static str {
        match self {
            MetricColumn::Auroc => "AUROC",
            MetricColumn::Auprc => "AUPRC",
        }
    }

    fn get(self, row: &SweepRow) -> Option<f64> {
        match self {
            MetricColumn::Auroc => row.auroc,
            MetricColumn::Auprc => row.auprc,
        }
    }
}

/// Builds the plot series for one metric.
///
/// With several contamination levels the x axis is contamination and each
/// (method, parameter) pair is a series. Otherwise the x axis is the
/// parameter grid (`l1` plots at 0): parametric methods plot their grids
/// and the baseline, having no parameter, spans the x range as a flat
/// reference line.
fn plot_series(
    plan: &ExperimentPlan,
    cells: &[CellSpec],
    aggregates: &[SweepRow],
    metric: MetricColumn,
) -> (&'static str, Vec<Series>) {
    // Aggregates exist per distinct (method, contamination, param); pair
    // each with a representative cell for labels and parsed parameters.
    let mut reps: Vec<(&CellSpec, &SweepRow)> = Vec::new();
    for agg in aggregates {
        if let Some(cell) = cells.iter().find(|c| {
            c.method.name() == agg.method
                && c.contamination.to_bits() == agg.contamination.to_bits()
                && c.param_label() == agg.param
        }) {
            reps.push((cell, agg));
        }
    }

    if plan.contaminations.len() > 1 {
        let mut series: Vec<Series> = Vec::new();
        for (cell, agg) in &reps {
            let Some(y) = metric.get(agg) else { continue };
            let label = cell.series_label();
            let point = (cell.contamination, y);
            match series.iter_mut().find(|s| s.label == label) {
                Some(s) => s.points.push(point),
                None => series.push(Series { label, points: vec![point] }),
            }
        }
        return ("training contamination", series);
    }

    // Parameter axis: x is the numeric parameter; the baseline spans the
    // range of the parametric methods' x values.
    let param_x = |cell: &CellSpec| -> Option<f64> {
        match (cell.method, &cell.param) {
            (Method::Ddpm, _) | (_, None) => None,
            (_, Some(p)) if p == "l1" => Some(0.0),
            (_, Some(p)) => p.parse().ok(),
        }
    };
    let xs: Vec<f64> = reps.iter().filter_map(|(c, _)| param_x(c)).collect();
    let mut series: Vec<Series> = Vec::new();
    for (cell, agg) in &reps {
        let Some(y) = metric.get(agg) else { continue };
        match param_x(cell) {
            Some(x) => {
                let label = cell.method.name().to_string();
                match series.iter_mut().find(|s| s.label == label) {
                    Some(s) => s.points.push((x, y)),
                    None => series.push(Series { label, points: vec![(x, y)] }),
                }
            }
            None => {
                let (lo, hi) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &x| {
                    (l.min(x), h.max(x))
                });
                let points = if xs.is_empty() || lo == hi {
                    vec![(cell.contamination, y)]
                } else {
                    vec![(lo, y), (hi, y)]
                };
                series.push(Series { label: cell.series_label(), points });
            }
        }
    }
    ("parameter", series)
}
