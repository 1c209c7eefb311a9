use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointManifest};
use crate::dml::DmlKind;
use crate::synth::{gen_dataset, DatasetConfig};

use super::config::{ExperimentConfig, Pairing, TrainMode};
use super::train::{train, RunSummary, TrainOutcome};
use super::HarnessError;

/// Image-noise levels evaluated by default.
pub const DEFAULT_GRID: [f64; 5] = [0.0, 0.5, 1.0, 1.5, 1.95];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunKind {
    Ts,
    Image,
    Combined(DmlKind),
}

impl RunKind {
    pub fn name(self) -> String {
        match self {
            RunKind::Ts => "ts".into(),
            RunKind::Image => "image".into(),
            RunKind::Combined(k) => format!("combined_{}", k.name()),
        }
    }

    fn of(summary: &RunSummary) -> Self {
        match summary.mode {
            TrainMode::Ts => RunKind::Ts,
            TrainMode::Image => RunKind::Image,
            TrainMode::Combined => RunKind::Combined(summary.dml),
        }
    }
}

/// One (kind, image noise, seed) training run of a sweep. Time-series runs
/// ignore images, so they carry no grid value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepCell {
    pub kind: RunKind,
    pub image_noise: Option<f64>,
    pub seed: u64,
}

impl SweepCell {
    pub fn dir_name(&self) -> String {
        match self.image_noise {
            Some(b) => format!("{}_b{b}_s{}", self.kind.name(), self.seed),
            None => format!("{}_s{}", self.kind.name(), self.seed),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub dataset: DatasetConfig,
    pub experiment: ExperimentConfig,
    pub grid: Vec<f64>,
    pub seeds: Vec<u64>,
    pub include_ts: bool,
    pub include_image: bool,
    pub kinds: Vec<DmlKind>,
    pub jobs: usize,
    pub save_checkpoints: bool,
}

impl SweepConfig {
    pub fn cells(&self) -> Vec<SweepCell> {
        let mut cells = Vec::new();
        for &seed in &self.seeds {
            if self.include_ts {
                cells.push(SweepCell {
                    kind: RunKind::Ts,
                    image_noise: None,
                    seed,
                });
            }
            for &b in &self.grid {
                let kinds = self
                    .include_image
                    .then_some(RunKind::Image)
                    .into_iter()
                    .chain(self.kinds.iter().map(|&k| RunKind::Combined(k)));
                for kind in kinds {
                    cells.push(SweepCell {
                        kind,
                        image_noise: Some(b),
                        seed,
                    });
                }
            }
        }
        cells
    }

    /// Dataset and experiment configuration of one cell; the cell seed drives
    /// both data generation and training.
    pub fn cell_configs(&self, cell: &SweepCell) -> (DatasetConfig, ExperimentConfig) {
        let mut data = self.dataset.clone();
        data.seed = cell.seed;
        if let Some(b) = cell.image_noise {
            data.image_noise = b;
        }
        let mut exp = self.experiment.clone();
        exp.seed = cell.seed;
        match cell.kind {
            RunKind::Ts => exp.mode = TrainMode::Ts,
            RunKind::Image => exp.mode = TrainMode::Image,
            RunKind::Combined(k) => {
                exp.mode = TrainMode::Combined;
                exp.dml = k;
                if exp.pairing == Pairing::None {
                    exp.pairing = Pairing::Triplet;
                }
            }
        }
        (data, exp)
    }
}

/// Writes `metrics.csv`, `summary.json` and optionally `best.ckpt` to `dir`.
pub fn write_run(
    dir: &Path,
    data: &DatasetConfig,
    config: &ExperimentConfig,
    outcome: &TrainOutcome,
    checkpoint: bool,
) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    outcome.metrics.write_csv(&dir.join("metrics.csv"))?;
    let summary = serde_json::to_string_pretty(&outcome.summary).expect("summary serializes");
    let path = dir.join("summary.json");
    std::fs::write(&path, summary).map_err(|e| HarnessError::io(&path, e))?;
    if checkpoint {
        run_checkpoint(data, config, outcome).save(&dir.join("best.ckpt"))?;
    }
    Ok(())
}

/// Checkpoint of the best-validation parameters of a run.
pub fn run_checkpoint(data: &DatasetConfig, config: &ExperimentConfig, outcome: &TrainOutcome) -> Checkpoint {
    let models = match config.mode {
        TrainMode::Ts => vec![outcome.ts_model.clone()],
        TrainMode::Image => vec![outcome.image_model.clone()],
        TrainMode::Combined => vec![outcome.ts_model.clone(), outcome.image_model.clone()],
    };
    let s = &outcome.summary;
    let manifest = CheckpointManifest {
        models,
        config: serde_json::json!({ "experiment": config, "dataset": data }),
        config_hash: config.hash(),
        metrics: serde_json::json!({
            "best_epoch": s.best_epoch,
            "best_val_acc": s.best_val_acc,
            "final_val_acc": s.final_val_acc,
        }),
    };
    Checkpoint::from_store(manifest, &outcome.best)
}

fn read_summary(path: &Path) -> Result<RunSummary, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Malformed(format!("{}: {e}", path.display())))
}

/// Trains one cell into `out/<cell dir>`. A finished run with the same
/// configuration hash is reused instead of retrained.
pub fn run_cell(sweep: &SweepConfig, cell: &SweepCell, out: &Path) -> Result<RunSummary, HarnessError> {
    let (data_cfg, exp) = sweep.cell_configs(cell);
    let dir = out.join(cell.dir_name());
    let summary_path = dir.join("summary.json");
    if summary_path.exists() {
        let prior = read_summary(&summary_path)?;
        if prior.config_hash == exp.hash() && prior.image_noise == data_cfg.image_noise {
            return Ok(prior);
        }
    }
    let data = gen_dataset(&data_cfg)?;
    let outcome = train(&exp, &data)?;
    write_run(&dir, &data_cfg, &exp, &outcome, sweep.save_checkpoints)?;
    Ok(outcome.summary)
}

/// Runs every cell on `jobs` worker threads; results are in cell order.
pub fn run_sweep(sweep: &SweepConfig, out: &Path) -> Result<Vec<RunSummary>, HarnessError> {
    if sweep.seeds.is_empty() || (sweep.grid.is_empty() && !sweep.include_ts) {
        return Err(HarnessError::Config(
            "sweep needs seeds and a non-empty grid".into(),
        ));
    }
    std::fs::create_dir_all(out).map_err(|e| HarnessError::io(out, e))?;
    let cells = sweep.cells();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(sweep.jobs.max(1))
        .build()
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    pool.install(|| cells.par_iter().map(|c| run_cell(sweep, c, out)).collect())
}

/// Every `*/summary.json` below `dir`, sorted by directory name.
pub fn load_runs(dir: &Path) -> Result<Vec<RunSummary>, HarnessError> {
    let entries = std::fs::read_dir(dir).map_err(|e| HarnessError::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(Result::ok)
        .map(|e| e.path().join("summary.json"))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(HarnessError::NoRuns(dir.to_path_buf()));
    }
    paths.iter().map(|p| read_summary(p)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    /// Mean over seeds, then over grid values.
    pub mean: f64,
    /// Standard deviation over seeds of the per-seed grid means.
    pub std: f64,
    pub runs: usize,
    /// `(image noise, mean over seeds, std over seeds)`; empty for the
    /// time-series baseline.
    pub per_grid: Vec<(f64, f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub label: String,
    pub epoch: usize,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub curves: Vec<CurvePoint>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn std(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// Which accuracy of a run a report row reads.
#[derive(Clone, Copy)]
enum Head {
    Primary,
    Image,
}

impl Head {
    fn last(self, s: &RunSummary) -> Option<f64> {
        match self {
            Head::Primary => Some(s.final_val_acc),
            Head::Image => s.final_image_val_acc,
        }
    }

    fn curve(self, s: &RunSummary) -> &[f64] {
        match self {
            Head::Primary => &s.val_curve,
            Head::Image => &s.image_val_curve,
        }
    }
}

/// Groups runs by grid value, averages each group over seeds, then averages
/// the group means; curves are averaged the same way per epoch.
fn aggregate(label: &str, runs: &[&RunSummary], head: Head) -> Option<(ReportRow, Vec<CurvePoint>)> {
    let runs: Vec<&RunSummary> = runs.iter().copied().filter(|s| head.last(s).is_some()).collect();
    if runs.is_empty() {
        return None;
    }
    let mut grid: Vec<Option<f64>> = Vec::new();
    let mut seeds: Vec<u64> = Vec::new();
    for s in &runs {
        let g = (s.mode != TrainMode::Ts).then_some(s.image_noise);
        if !grid.contains(&g) {
            grid.push(g);
        }
        if !seeds.contains(&s.seed) {
            seeds.push(s.seed);
        }
    }
    grid.sort_by(|a, b| a.partial_cmp(b).expect("finite grid"));
    seeds.sort_unstable();
    let in_group = |s: &&&RunSummary, g: Option<f64>| (s.mode != TrainMode::Ts).then_some(s.image_noise) == g;

    let mut per_grid = Vec::new();
    let mut group_means = Vec::new();
    for &g in &grid {
        let accs: Vec<f64> = runs
            .iter()
            .filter(|s| in_group(s, g))
            .filter_map(|s| head.last(s))
            .collect();
        group_means.push(mean(&accs));
        if let Some(b) = g {
            per_grid.push((b, mean(&accs), std(&accs)));
        }
    }
    let seed_means: Vec<f64> = seeds
        .iter()
        .map(|&seed| {
            let accs: Vec<f64> = runs
                .iter()
                .filter(|s| s.seed == seed)
                .filter_map(|s| head.last(s))
                .collect();
            mean(&accs)
        })
        .collect();
    let row = ReportRow {
        label: label.to_string(),
        mean: mean(&group_means),
        std: std(&seed_means),
        runs: runs.len(),
        per_grid,
    };

    let epochs = runs.iter().map(|s| head.curve(s).len()).min().unwrap_or(0);
    let curves = (0..epochs)
        .map(|epoch| {
            let by_grid: Vec<f64> = grid
                .iter()
                .map(|&g| {
                    let v: Vec<f64> = runs
                        .iter()
                        .filter(|s| in_group(s, g))
                        .map(|s| head.curve(s)[epoch])
                        .collect();
                    mean(&v)
                })
                .collect();
            CurvePoint {
                label: label.to_string(),
                epoch,
                mean: mean(&by_grid),
            }
        })
        .collect();
    Some((row, curves))
}

/// Report rows in table order: the time-series baseline, the combined
/// model's time-series head per DML kind with the image head of the L_CS run
/// after it. Missing kinds are skipped. The image row falls back to
/// image-only runs when no L_CS combined run exists.
pub fn build_report(runs: &[RunSummary]) -> Result<Report, HarnessError> {
    let of_kind = |kind: RunKind| runs.iter().filter(|s| RunKind::of(s) == kind).collect::<Vec<_>>();
    let mut rows = Vec::new();
    let mut curves = Vec::new();
    let mut push = |entry: Option<(ReportRow, Vec<CurvePoint>)>| {
        if let Some((row, c)) = entry {
            rows.push(row);
            curves.extend(c);
        }
    };
    push(aggregate("TS model", &of_kind(RunKind::Ts), Head::Primary));
    let order = [
        DmlKind::Cs,
        DmlKind::Mse,
        DmlKind::Kl,
        DmlKind::Kmmd,
        DmlKind::Pc,
        DmlKind::Bc,
        DmlKind::Po,
    ];
    for kind in order {
        let label = format!("Combined (TS, {})", kind.label());
        push(aggregate(
            &label,
            &of_kind(RunKind::Combined(kind)),
            Head::Primary,
        ));
        if kind == DmlKind::Cs {
            let label = format!("Combined (image, {})", kind.label());
            let cs = of_kind(RunKind::Combined(kind));
            let entry = aggregate(&label, &cs, Head::Image)
                .or_else(|| aggregate(&label, &of_kind(RunKind::Image), Head::Primary));
            push(entry);
        }
    }
    if rows.is_empty() {
        return Err(HarnessError::Malformed("no reportable runs".into()));
    }
    Ok(Report { rows, curves })
}

impl Report {
    pub fn row(&self, label: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// `method,mean_acc,std_acc,runs` with accuracies in percent.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,mean_acc,std_acc,runs\n");
        for r in &self.rows {
            writeln!(
                out,
                "{},{:.2},{:.2},{}",
                r.label,
                100.0 * r.mean,
                100.0 * r.std,
                r.runs
            )
            .expect("string write");
        }
        out
    }

    /// `method,image_noise,mean_acc,std_acc` in percent.
    pub fn grid_csv(&self) -> String {
        let mut out = String::from("method,image_noise,mean_acc,std_acc\n");
        for r in &self.rows {
            for (b, m, s) in &r.per_grid {
                writeln!(out, "{},{b},{:.2},{:.2}", r.label, 100.0 * m, 100.0 * s).expect("string write");
            }
        }
        out
    }

    /// `method,epoch,mean_val_acc`.
    pub fn curves_csv(&self) -> String {
        let mut out = String::from("method,epoch,mean_val_acc\n");
        for c in &self.curves {
            writeln!(out, "{},{},{:?}", c.label, c.epoch, c.mean).expect("string write");
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| Method | Accuracy (%) | Std | Runs |\n|---|---:|---:|---:|\n");
        for r in &self.rows {
            writeln!(
                out,
                "| {} | {:.2} | {:.2} | {} |",
                r.label,
                100.0 * r.mean,
                100.0 * r.std,
                r.runs
            )
            .expect("string write");
        }
        out
    }
}

/// Writes `report.csv`, `report_grid.csv`, `report.md` and `curves.csv`.
pub fn write_report(dir: &Path, report: &Report) -> Result<(), HarnessError> {
    for (name, body) in [
        ("report.csv", report.to_csv()),
        ("report_grid.csv", report.grid_csv()),
        ("report.md", report.to_markdown()),
        ("curves.csv", report.curves_csv()),
    ] {
        let path = dir.join(name);
        std::fs::write(&path, body).map_err(|e| HarnessError::io(&path, e))?;
    }
    Ok(())
}
