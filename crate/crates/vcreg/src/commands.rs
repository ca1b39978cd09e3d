//! Subcommand implementations. Each takes parsed inputs, performs the work,
//! writes its outputs under the requested directory, and returns what it
//! wrote so callers (the binary, tests) can inspect without re-reading.
//!
//! Output layout for `train`:
//!
//! ```text
//! out/
//!   resolved.toml          config with every default filled in
//!   seed<N>/
//!     report.json
//!     checkpoint.json      parameter manifest
//!     checkpoint.bin       little-endian f64 parameter block
//! ```
//!
//! `sweep` nests one such tree per grid cell under `a<alpha>_b<beta>/`.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use vcreg_core::datasets::LabeledSet;
use vcreg_core::metrics::{
    agreement, boundary_margin, cdnv_aggregate, class_means, decision_boundary_grid,
    grid_points, linear_probe, ncc_predict, point_margins, BoundaryGrid, GridSpec, ProbeConfig,
};
use vcreg_core::models::{predictions, Model};
use vcreg_core::train::{accuracy, train};
use vcreg_core::Tensor;

use crate::bench::{BenchReport, BenchScenario, BenchVariant};
use crate::config::{ConfigLevel, ExperimentConfig, ReportSection};
use crate::report::{
    EpochRow, FinalMetrics, ProbeReport, Timing, TrainReport, SCHEMA_VERSION,
};
use crate::{bench, checkpoint, csvio, fsio, report, LabError, Result};

#[derive(Debug)]
pub struct TrainOutputs {
    pub seed: u64,
    pub report: TrainReport,
    pub report_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

/// Train every seed in the config, one output directory per seed.
pub fn run_train(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<TrainOutputs>> {
    if cfg.sweep.is_some() {
        return Err(LabError::Config(
            "config has a [sweep] section; use the sweep subcommand".into(),
        ));
    }
    let resolved = cfg.resolved()?;
    fsio::create_dir_all(out_dir)?;
    fsio::atomic_write(&out_dir.join("resolved.toml"), resolved.to_toml()?.as_bytes())?;
    let mut outputs = Vec::with_capacity(resolved.seeds.len());
    for &seed in &resolved.seeds {
        let dir = out_dir.join(format!("seed{seed}"));
        outputs.push(run_one_seed(&resolved, seed, &dir)?);
    }
    Ok(outputs)
}

fn run_one_seed(cfg: &ExperimentConfig, seed: u64, dir: &Path) -> Result<TrainOutputs> {
    fsio::create_dir_all(dir)?;
    let (train_set, test_set) = cfg.dataset.build(seed)?;
    let level = cfg.train.label_level.to_core();
    let (_, classes) = train_set.labels_at(level)?;
    let model = cfg.model.build(train_set.dim(), classes, seed)?;
    let hooks = cfg.vcreg.as_ref().map(|v| v.to_core());
    let settings = cfg.train.settings();

    let started = Instant::now();
    let run = train(model, hooks, &train_set, &settings, seed)?;
    let train_seconds = started.elapsed().as_secs_f64();

    let outcome = final_metrics(cfg, &run.model, &train_set, &test_set, seed)?;
    let checkpoint_path = checkpoint::save(dir, &run.model, seed)?;
    let report = TrainReport {
        schema_version: SCHEMA_VERSION,
        kind: "train".into(),
        seed,
        model: run.model.describe(),
        config: cfg.clone(),
        epochs: run.epochs.iter().map(EpochRow::from_stats).collect(),
        outcome,
        timing: Timing { train_seconds },
    };
    let report_path = dir.join("report.json");
    report::save_json(&report_path, &report)?;
    Ok(TrainOutputs {
        seed,
        report,
        report_path,
        checkpoint_path,
    })
}

/// Post-training measurements. Accuracy, collapse, and nearest-center
/// agreement use the training label level; the probe always works at the
/// fine label level so it can ask whether finer structure survived.
/// Nearest-center agreement compares held-out predictions against a
/// centroid rule fitted on training features: on the training split a
/// converged model agrees with its own centroids almost by construction.
/// The boundary margin only exists for 2-d inputs.
fn final_metrics(
    cfg: &ExperimentConfig,
    model: &Model,
    train_set: &LabeledSet,
    test_set: &LabeledSet,
    seed: u64,
) -> Result<FinalMetrics> {
    let level = cfg.train.label_level.to_core();
    let train_accuracy = accuracy(model, train_set, level)?;
    let test_accuracy = accuracy(model, test_set, level)?;

    let x = batch_inputs(model, train_set)?;
    let feats = model.penultimate_features(&x)?;

    let (train_labels, train_classes) = train_set.labels_at(level)?;
    let cdnv = cdnv_aggregate(&feats, train_labels, train_classes)?;
    let means = class_means(&feats, train_labels, train_classes)?;
    let test_x = batch_inputs(model, test_set)?;
    let test_feats = model.penultimate_features(&test_x)?;
    let ncc = ncc_predict(&test_feats, &means)?;
    let model_preds = predictions(&model.logits(&test_x)?)?;
    let ncc_agreement = agreement(&ncc, &model_preds)?;

    let (fine_labels, fine_classes) =
        train_set.labels_at(vcreg_core::datasets::LabelLevel::Label)?;
    let probe = linear_probe(&feats, fine_labels, fine_classes, &ProbeConfig::default(), seed)?;

    let margin = if train_set.dim() == 2 {
        let grid = decision_boundary_grid(model, &grid_spec_for(train_set, &cfg.report)?)?;
        Some(boundary_margin(&grid, &train_set.inputs)?)
    } else {
        None
    };

    Ok(FinalMetrics {
        train_accuracy,
        test_accuracy,
        probe_accuracy: Some(probe.accuracy),
        probe_l2: Some(probe.best_l2),
        cdnv: Some(cdnv),
        ncc_agreement: Some(ncc_agreement),
        boundary_margin: margin,
    })
}

/// Grid covering the dataset's bounding box plus the configured padding.
pub fn grid_spec_for(set: &LabeledSet, report: &ReportSection) -> Result<GridSpec> {
    let (n, d) = set.inputs.dims2()?;
    if d != 2 || n == 0 {
        return Err(LabError::Runtime(format!(
            "boundary grid needs a nonempty 2-d dataset, got {n} rows of dim {d}"
        )));
    }
    let data = set.inputs.data();
    let (mut x_min, mut x_max) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y_min, mut y_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for row in data.chunks(2) {
        x_min = x_min.min(row[0]);
        x_max = x_max.max(row[0]);
        y_min = y_min.min(row[1]);
        y_max = y_max.max(row[1]);
    }
    let pad = report.margin_pad;
    Ok(GridSpec {
        x_min: x_min - pad,
        x_max: x_max + pad,
        y_min: y_min - pad,
        y_max: y_max + pad,
        cols: report.margin_grid,
        rows: report.margin_grid,
    })
}

fn batch_inputs(model: &Model, set: &LabeledSet) -> Result<Tensor> {
    let mut shape = vec![set.len()];
    shape.extend_from_slice(&model.input_shape());
    Ok(set.inputs.reshaped(&shape)?)
}

pub struct ProbeOutputs {
    pub report: ProbeReport,
    pub report_path: PathBuf,
}

/// Fit a linear probe on a checkpoint's penultimate features over the train
/// split of the config's dataset, at the requested label level.
pub fn run_probe(
    cfg: &ExperimentConfig,
    manifest: &Path,
    level: ConfigLevel,
    seed_override: Option<u64>,
    out_dir: &Path,
) -> Result<ProbeOutputs> {
    let resolved = cfg.resolved()?;
    let ck = checkpoint::load(manifest)?;
    let seed = seed_override.unwrap_or(ck.seed);
    let (train_set, _) = resolved.dataset.build(seed)?;
    let (labels, classes) = train_set.labels_at(level.to_core())?;
    let x = batch_inputs(&ck.model, &train_set)?;
    let feats = ck.model.penultimate_features(&x)?;
    let probe = linear_probe(&feats, labels, classes, &ProbeConfig::default(), seed)?;

    fsio::create_dir_all(out_dir)?;
    let report = ProbeReport {
        schema_version: SCHEMA_VERSION,
        kind: "probe".into(),
        seed,
        level: level_name(level).into(),
        features: "penultimate".into(),
        samples: train_set.len(),
        accuracy: probe.accuracy,
        best_l2: probe.best_l2,
    };
    let report_path = out_dir.join("probe.json");
    report::save_json(&report_path, &report)?;
    Ok(ProbeOutputs {
        report,
        report_path,
    })
}

fn level_name(level: ConfigLevel) -> &'static str {
    match level {
        ConfigLevel::Label => "label",
        ConfigLevel::SubLabel => "sub_label",
        ConfigLevel::SuperLabel => "super_label",
    }
}

/// Load a scenario file, run all four variants, write `bench.json`.
pub fn run_bench_cmd(scenario_path: &Path, out_dir: &Path) -> Result<(BenchReport, PathBuf)> {
    let text = fsio::read_to_string(scenario_path)?;
    let scenario: BenchScenario = toml::from_str(&text)
        .map_err(|e| LabError::Config(format!("{}: {e}", scenario_path.display())))?;
    scenario.validate()?;
    fsio::create_dir_all(out_dir)?;
    let report = bench::run_all(&scenario)?;
    let path = out_dir.join("bench.json");
    report::save_json(&path, &report)?;
    Ok((report, path))
}

/// One-line reading of a bench report: per-variant means plus the two
/// headline ratios.
pub fn bench_summary(report: &BenchReport) -> String {
    use std::fmt::Write;
    let mut s = String::new();
    for v in &report.variants {
        let _ = writeln!(
            s,
            "{:<9} total {:>10.3} ms  forward {:>10.3} ms  backward {:>10.3} ms",
            v.scenario.variant.name(),
            v.median_of_means_ns / 1e6,
            v.forward_median_of_means_ns / 1e6,
            v.backward_median_of_means_ns / 1e6,
        );
    }
    let get = |v| report.variant(v);
    if let (Some(id), Some(naive), Some(fast)) = (
        get(BenchVariant::Identity),
        get(BenchVariant::Naive),
        get(BenchVariant::Fast),
    ) {
        if id.median_of_means_ns > 0.0 && naive.backward_median_of_means_ns > 0.0 {
            let _ = writeln!(
                s,
                "naive/identity total: {:.2}x   fast/naive backward: {:.3}x",
                naive.median_of_means_ns / id.median_of_means_ns,
                fast.backward_median_of_means_ns / naive.backward_median_of_means_ns,
            );
        }
    }
    s
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepCell {
    pub alpha: f64,
    pub beta: f64,
    pub dir: String,
    pub status: String,
    pub error: Option<String>,
    pub mean_test_accuracy: Option<f64>,
    pub mean_train_accuracy: Option<f64>,
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepReport {
    pub schema_version: u32,
    pub jobs: usize,
    pub cells: Vec<SweepCell>,
}

/// Run the config's α×β grid. Every cell is an independent `train` run in
/// its own directory; cell failures are recorded and the sweep continues.
/// Errors only when no cell succeeds.
pub fn run_sweep(
    cfg: &ExperimentConfig,
    jobs_override: Option<usize>,
    out_dir: &Path,
) -> Result<(SweepReport, PathBuf)> {
    let resolved = cfg.resolved()?;
    let sweep = resolved
        .sweep
        .clone()
        .ok_or_else(|| LabError::Config("config has no [sweep] section".into()))?;
    let jobs = jobs_override.unwrap_or(sweep.jobs).max(1);
    fsio::create_dir_all(out_dir)?;

    let mut grid = Vec::new();
    for &alpha in &sweep.alphas {
        for &beta in &sweep.betas {
            grid.push((alpha, beta));
        }
    }

    // Cell configs drop [sweep] so each one is a plain train config; the
    // cell's α/β land in its [vcreg] section (default fields otherwise).
    let cell_config = |alpha: f64, beta: f64| {
        let mut c = resolved.clone();
        c.sweep = None;
        let mut v = c.vcreg.take().unwrap_or_default();
        v.alpha = alpha;
        v.beta = beta;
        c.vcreg = Some(v);
        c
    };

    struct Done {
        outputs: std::result::Result<Vec<TrainOutputs>, String>,
    }
    let queue: Mutex<VecDeque<usize>> = Mutex::new((0..grid.len()).collect());
    let results: Mutex<Vec<Option<Done>>> = Mutex::new((0..grid.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs.min(grid.len()) {
            scope.spawn(|| loop {
                let idx = match queue.lock().expect("queue lock").pop_front() {
                    Some(i) => i,
                    None => break,
                };
                let (alpha, beta) = grid[idx];
                let cell = cell_config(alpha, beta);
                let dir = out_dir.join(format!("a{alpha}_b{beta}"));
                let outputs = match cell
                    .validate()
                    .map_err(|e| e.to_string())
                    .and_then(|()| run_train(&cell, &dir).map_err(|e| e.to_string()))
                {
                    Ok(o) => Ok(o),
                    Err(e) => Err(e),
                };
                results.lock().expect("results lock")[idx] = Some(Done { outputs });
            });
        }
    });

    let results = results.into_inner().expect("results lock");
    let mut cells = Vec::with_capacity(grid.len());
    for (idx, done) in results.into_iter().enumerate() {
        let (alpha, beta) = grid[idx];
        let dir = format!("a{alpha}_b{beta}");
        let done = done.expect("every queued cell ran");
        let cell = match done.outputs {
            Ok(outs) => {
                let k = outs.len() as f64;
                let test = outs.iter().map(|o| o.report.outcome.test_accuracy).sum::<f64>() / k;
                let tr = outs.iter().map(|o| o.report.outcome.train_accuracy).sum::<f64>() / k;
                SweepCell {
                    alpha,
                    beta,
                    dir,
                    status: "ok".into(),
                    error: None,
                    mean_test_accuracy: Some(test),
                    mean_train_accuracy: Some(tr),
                }
            }
            Err(e) => SweepCell {
                alpha,
                beta,
                dir,
                status: "failed".into(),
                error: Some(e),
                mean_test_accuracy: None,
                mean_train_accuracy: None,
            },
        };
        cells.push(cell);
    }

    let report = SweepReport {
        schema_version: SCHEMA_VERSION,
        jobs,
        cells,
    };
    let report_path = out_dir.join("sweep.json");
    report::save_json(&report_path, &report)?;
    write_sweep_summary(&out_dir.join("summary.csv"), &report)?;

    if report.cells.iter().all(|c| c.status == "failed") {
        let first = report
            .cells
            .first()
            .and_then(|c| c.error.clone())
            .unwrap_or_default();
        return Err(LabError::Runtime(format!(
            "all {} sweep cells failed; first error: {first}",
            report.cells.len()
        )));
    }
    Ok((report, report_path))
}

/// Successful cells ranked by held-out accuracy, best first. Ties keep grid
/// order so reruns produce identical files.
fn write_sweep_summary(path: &Path, report: &SweepReport) -> Result<()> {
    let mut ranked: Vec<&SweepCell> = report.cells.iter().filter(|c| c.status == "ok").collect();
    ranked.sort_by(|a, b| {
        b.mean_test_accuracy
            .unwrap_or(f64::NEG_INFINITY)
            .total_cmp(&a.mean_test_accuracy.unwrap_or(f64::NEG_INFINITY))
    });
    let rows: Vec<Vec<String>> = ranked
        .iter()
        .enumerate()
        .map(|(rank, c)| {
            vec![
                (rank + 1).to_string(),
                csvio::fmt_f64(c.alpha),
                csvio::fmt_f64(c.beta),
                csvio::fmt_f64(c.mean_test_accuracy.unwrap_or(f64::NAN)),
                csvio::fmt_f64(c.mean_train_accuracy.unwrap_or(f64::NAN)),
                c.dir.clone(),
            ]
        })
        .collect();
    csvio::write_csv(
        path,
        &["rank", "alpha", "beta", "test_accuracy", "train_accuracy", "dir"],
        &rows,
    )
}

/// Decision map of a checkpointed model over the dataset's 2-d bounding box:
/// `boundary.csv` with one row per grid point.
pub fn run_boundary(cfg: &ExperimentConfig, manifest: &Path, out_dir: &Path) -> Result<PathBuf> {
    let resolved = cfg.resolved()?;
    let ck = checkpoint::load(manifest)?;
    let (train_set, _) = resolved.dataset.build(ck.seed)?;
    if train_set.dim() != 2 {
        return Err(LabError::Config(format!(
            "boundary maps need a 2-d dataset; dataset.kind yields dim {}",
            train_set.dim()
        )));
    }
    let spec = grid_spec_for(&train_set, &resolved.report)?;
    let grid = decision_boundary_grid(&ck.model, &spec)?;
    let margins = margins_of_grid(&grid)?;
    fsio::create_dir_all(out_dir)?;
    let path = out_dir.join("boundary.csv");
    csvio::write_boundary_csv(&path, &grid, &margins)?;
    Ok(path)
}

fn margins_of_grid(grid: &BoundaryGrid) -> Result<Vec<f64>> {
    let pts = grid_points(&grid.spec)?;
    Ok(point_margins(grid, &pts)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn moons_config(extra: &str) -> ExperimentConfig {
        let text = format!(
            "seeds = [1]\n\
             [dataset]\nkind = \"two_moons\"\nsamples = 80\n\
             [train]\nepochs = 3\nlr = 0.1\n\
             [model]\nkind = \"mlp\"\nhidden = [8]\n{extra}"
        );
        toml::from_str(&text).unwrap()
    }

    #[test]
    fn train_writes_reports_checkpoints_and_resolved_config() {
        let dir = tempfile::tempdir().unwrap();
        let outs = run_train(&moons_config(""), dir.path()).unwrap();
        assert_eq!(outs.len(), 1);
        assert!(dir.path().join("resolved.toml").is_file());
        assert!(outs[0].report_path.is_file());
        assert!(outs[0].checkpoint_path.is_file());
        assert!(outs[0].checkpoint_path.with_extension("bin").is_file());
        let r = &outs[0].report;
        assert_eq!(r.epochs.len(), 3);
        assert!(r.outcome.boundary_margin.is_some());
        assert!(r.outcome.probe_accuracy.is_some());
        // No regularizer configured: nothing to log per site.
        assert!(r.epochs[0].sites.is_empty());
    }

    #[test]
    fn train_rejects_sweep_configs() {
        let cfg = moons_config("[sweep]\nalphas = [0.1]\nbetas = [0.1]\n");
        let err = run_train(&cfg, Path::new("/nonexistent")).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("sweep"));
    }

    #[test]
    fn probe_runs_from_a_saved_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = moons_config("");
        let outs = run_train(&cfg, dir.path()).unwrap();
        let probe_dir = dir.path().join("probe");
        let out = run_probe(
            &cfg,
            &outs[0].checkpoint_path,
            ConfigLevel::Label,
            None,
            &probe_dir,
        )
        .unwrap();
        assert!(out.report_path.is_file());
        assert_eq!(out.report.seed, 1);
        assert_eq!(out.report.level, "label");
        assert!(out.report.accuracy >= 0.0 && out.report.accuracy <= 1.0);
    }

    #[test]
    fn sweep_records_cell_failures_and_continues() {
        let dir = tempfile::tempdir().unwrap();
        // Negative alpha is caught per cell, not up front.
        let cfg = moons_config("[sweep]\nalphas = [-1.0, 0.32]\nbetas = [0.04]\n");
        let (report, _) = run_sweep(&cfg, None, dir.path()).unwrap();
        assert_eq!(report.cells.len(), 2);
        let failed = &report.cells[0];
        assert_eq!(failed.status, "failed");
        assert!(failed.error.as_deref().unwrap_or("").contains("alpha"));
        assert_eq!(report.cells[1].status, "ok");
        let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        let (header, rows) = csvio::parse_csv(&summary).unwrap();
        assert_eq!(header[0], "rank");
        assert_eq!(rows.len(), 1);
        assert!(dir.path().join("a0.32_b0.04/seed1/report.json").is_file());
    }

    #[test]
    fn sweep_with_all_cells_failing_errors() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = moons_config("[sweep]\nalphas = [-1.0]\nbetas = [0.04]\n");
        let err = run_sweep(&cfg, None, dir.path()).unwrap_err();
        assert_eq!(err.exit_code(), 1);
        assert!(err.to_string().contains("all 1 sweep cells failed"));
    }

    #[test]
    fn boundary_csv_covers_the_whole_grid() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = moons_config("");
        cfg.report.margin_grid = 9;
        let outs = run_train(&cfg, dir.path()).unwrap();
        let path = run_boundary(&cfg, &outs[0].checkpoint_path, &dir.path().join("map")).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        let (header, rows) = csvio::parse_csv(&text).unwrap();
        assert_eq!(header, ["x", "y", "pred_class", "margin"]);
        assert_eq!(rows.len(), 81);
    }
}
