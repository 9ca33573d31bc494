//! Per-seed data preparation, training, evaluation and diagnostics, plus
//! the files each command writes.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use vpboost::boost::{load_ensemble, save_ensemble, BoostRun, StageRecord};
use vpboost::datasets::{gen_synthetic, load_csv, split_standardize, write_csv, Splits};
use vpboost::diagnostics::{reduction_lower_bound, regularity_report, RegularityBounds};
use vpboost::featurizer::feature_batch;
use vpboost::losses::{empirical_loss, evaluate_all, hessian_bound};
use vpboost::metrics::{accuracy, auc_ovr, r_squared};
use vpboost::varpro::assemble_reduced;
use vpboost::{boost, ensemble_predict, Dataset, Ensemble, FeaturizerSpec, LossKind, Targets, Task};

use crate::config::{DataSource, Resolved};
use crate::CliError;

pub const METRICS_HEADER: [&str; 15] = [
    "seed",
    "stage",
    "accepted",
    "rho",
    "lambda_w",
    "train_loss",
    "val_loss",
    "actual_reduction",
    "predicted_reduction",
    "kappa_align",
    "curvature_ratio",
    "operator_norm",
    "radius",
    "descent_ip",
    "wall_time_seconds",
];

/// Shortest representation that parses back to the same value.
fn num(v: f64) -> String {
    format!("{v:e}")
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

pub struct Prepared {
    pub splits: Splits,
    pub kind: LossKind,
    pub spec: FeaturizerSpec,
}

pub fn load_dataset(cfg: &Resolved, seed: u64) -> Result<Dataset, CliError> {
    Ok(match &cfg.source {
        DataSource::Synthetic { task, n } => gen_synthetic(*task, *n, seed)?,
        DataSource::Csv { path, schema } => load_csv(path, schema)?,
    })
}

pub fn prepare(cfg: &Resolved, seed: u64) -> Result<Prepared, CliError> {
    let ds = load_dataset(cfg, seed)?;
    if ds.task != cfg.task {
        return Err(CliError::Config(format!("data is a {:?} task, expected {:?}", ds.task, cfg.task)));
    }
    let n_target = match (&ds.targets, ds.task) {
        (Targets::Real(y), _) => y.ncols(),
        (Targets::Labels { .. }, Task::Binary) => 1,
        (Targets::Labels { n_classes, .. }, _) => *n_classes,
    };
    let kind = cfg.loss_kind(n_target)?;
    let spec = cfg.featurizer(ds.n_in());
    spec.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let splits = split_standardize(&ds, cfg.fractions, seed)?;
    Ok(Prepared { splits, kind, spec })
}

fn seeded(dir: &Path, stem: &str, seed: u64, ext: &str) -> PathBuf {
    dir.join(format!("{stem}_seed{seed}.{ext}"))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>, CliError> {
    csv::Writer::from_path(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn write_rows(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut w = csv_writer(path)?;
    let io = |e: csv::Error| CliError::Io(format!("{}: {e}", path.display()));
    w.write_record(header).map_err(io)?;
    for row in rows {
        w.write_record(row).map_err(io)?;
    }
    w.flush().map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// gen-data

pub fn gen_data(cfg: &Resolved) -> Result<Vec<PathBuf>, CliError> {
    if !matches!(cfg.source, DataSource::Synthetic { .. }) {
        return Err(CliError::Config("gen-data needs data.synthetic".into()));
    }
    create_dir(&cfg.output_dir)?;
    cfg.config
        .run
        .seeds
        .iter()
        .map(|&seed| {
            let path = seeded(&cfg.output_dir, "data", seed, "csv");
            write_csv(&path, &load_dataset(cfg, seed)?)?;
            Ok(path)
        })
        .collect()
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))
}

// ---------------------------------------------------------------------------
// train

pub struct SeedOutcome {
    pub seed: u64,
    pub run: BoostRun,
    pub selections: Vec<Selection>,
}

pub struct Selection {
    pub name: &'static str,
    pub stage: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub test_loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Select {
    BestVal,
    Last,
}

impl Select {
    fn name(self) -> &'static str {
        match self {
            Select::BestVal => "best-val",
            Select::Last => "last",
        }
    }
}

/// Stage picked by `select` given the validation loss of every stage
/// `0..=M`; ties go to the earliest stage.
pub fn select_stage(select: Select, val_losses: &[f64]) -> usize {
    match select {
        Select::Last => val_losses.len() - 1,
        Select::BestVal => val_losses
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |best, (s, &v)| if v < best.1 { (s, v) } else { best })
            .0,
    }
}

fn stage_losses(run: &BoostRun) -> (Vec<f64>, Vec<f64>) {
    let mut train = vec![run.initial_train_loss];
    let mut val = vec![run.initial_val_loss];
    for r in &run.records {
        train.push(r.train_loss);
        val.push(r.val_loss);
    }
    (train, val)
}

pub fn train_seed(cfg: &Resolved, seed: u64) -> Result<SeedOutcome, CliError> {
    let p = prepare(cfg, seed)?;
    let (train, val, test) = (&p.splits.train, &p.splits.val, &p.splits.test);
    let run = boost(train, val, &p.kind, &p.spec, &cfg.boost_config(seed))?;
    let (train_losses, val_losses) = stage_losses(&run);
    let mut selections = Vec::new();
    for select in [Select::BestVal, Select::Last] {
        let stage = select_stage(select, &val_losses);
        let test_loss = if test.is_empty() {
            f64::NAN
        } else {
            let ens = run.ensemble.truncated(stage);
            empirical_loss(&p.kind, &ensemble_predict(&ens, &test.x)?, &test.targets)?
        };
        selections.push(Selection {
            name: select.name(),
            stage,
            train_loss: train_losses[stage],
            val_loss: val_losses[stage],
            test_loss,
        });
    }

    let dir = &cfg.output_dir;
    save_ensemble(seeded(dir, "ensemble", seed, "json"), &run.ensemble, Some(&p.splits.standardizer))?;
    write_rows(&seeded(dir, "metrics", seed, "csv"), &METRICS_HEADER, &metrics_rows(seed, &run))?;
    let rows: Vec<Vec<String>> = selections
        .iter()
        .map(|s| {
            vec![
                seed.to_string(),
                s.name.to_string(),
                s.stage.to_string(),
                num(s.train_loss),
                num(s.val_loss),
                num(s.test_loss),
            ]
        })
        .collect();
    write_rows(
        &seeded(dir, "results", seed, "csv"),
        &["seed", "selection", "stage", "train_loss", "val_loss", "test_loss"],
        &rows,
    )?;
    Ok(SeedOutcome { seed, run, selections })
}

pub fn metrics_rows(seed: u64, run: &BoostRun) -> Vec<Vec<String>> {
    let mut rows = vec![{
        let mut r = vec![String::new(); METRICS_HEADER.len()];
        r[0] = seed.to_string();
        r[1] = "0".into();
        r[5] = num(run.initial_train_loss);
        r[6] = num(run.initial_val_loss);
        r
    }];
    rows.extend(run.records.iter().map(|r: &StageRecord| {
        vec![
            seed.to_string(),
            r.stage.to_string(),
            r.accepted.to_string(),
            opt(r.rho),
            num(r.lambda_w),
            num(r.train_loss),
            num(r.val_loss),
            num(r.actual_reduction),
            num(r.predicted_reduction),
            opt(r.kappa_align),
            opt(r.curvature_ratio),
            num(r.operator_norm),
            num(r.radius),
            num(r.descent_ip),
            num(r.wall_time_seconds),
        ]
    }));
    rows
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Mean and population standard deviation over seeds, per stage.
pub fn summary_rows(outcomes: &[SeedOutcome]) -> Vec<Vec<String>> {
    let stages = outcomes.iter().map(|o| o.run.records.len()).min().unwrap_or(0);
    (0..=stages)
        .map(|s| {
            let (mut train, mut val, mut accepted, mut lambda) = (vec![], vec![], vec![], vec![]);
            for o in outcomes {
                let (t, v) = stage_losses(&o.run);
                train.push(t[s]);
                val.push(v[s]);
                if s > 0 {
                    let r = &o.run.records[s - 1];
                    accepted.push(if r.accepted { 1.0 } else { 0.0 });
                    lambda.push(r.lambda_w);
                }
            }
            let (tm, ts) = mean_std(&train);
            let (vm, vs) = mean_std(&val);
            let field = |xs: &[f64]| if xs.is_empty() { String::new() } else { num(mean_std(xs).0) };
            vec![
                s.to_string(),
                outcomes.len().to_string(),
                num(tm),
                num(ts),
                num(vm),
                num(vs),
                field(&accepted),
                field(&lambda),
            ]
        })
        .collect()
}

pub fn train(cfg: &Resolved) -> Result<Vec<SeedOutcome>, CliError> {
    create_dir(&cfg.output_dir)?;
    let echoed = toml::to_string(&cfg.config).map_err(|e| CliError::Config(e.to_string()))?;
    let echo_path = cfg.output_dir.join("effective_config.toml");
    std::fs::write(&echo_path, echoed).map_err(|e| CliError::Io(format!("{}: {e}", echo_path.display())))?;

    let outcomes: Vec<SeedOutcome> = cfg
        .config
        .run
        .seeds
        .par_iter()
        .map(|&seed| train_seed(cfg, seed))
        .collect::<Result<_, _>>()?;
    write_rows(
        &cfg.output_dir.join("summary.csv"),
        &[
            "stage",
            "seeds",
            "train_loss_mean",
            "train_loss_std",
            "val_loss_mean",
            "val_loss_std",
            "accepted_fraction",
            "lambda_w_mean",
        ],
        &summary_rows(&outcomes),
    )?;
    Ok(outcomes)
}

// ---------------------------------------------------------------------------
// evaluate

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Split {
    Train,
    Val,
    Test,
}

pub struct Evaluation {
    pub stage: usize,
    pub loss: f64,
    /// Task metrics in display order.
    pub metrics: Vec<(&'static str, Option<f64>)>,
}

fn load_saved(cfg: &Resolved, seed: u64) -> Result<Ensemble, CliError> {
    let path = seeded(&cfg.output_dir, "ensemble", seed, "json");
    if !path.exists() {
        return Err(CliError::Data(format!("no saved ensemble at {}", path.display())));
    }
    let (ens, _) = load_ensemble(&path)?;
    Ok(ens)
}

pub fn evaluate(cfg: &Resolved, seed: u64, select: Select, split: Split) -> Result<Evaluation, CliError> {
    let p = prepare(cfg, seed)?;
    let ens = load_saved(cfg, seed)?;
    if ens.kind != p.kind {
        return Err(CliError::Data("saved ensemble was trained for a different loss".into()));
    }
    let val = &p.splits.val;
    let val_losses = (0..=cfg.config.boost.m)
        .map(|s| Ok(empirical_loss(&p.kind, &ensemble_predict(&ens.truncated(s), &val.x)?, &val.targets)?))
        .collect::<Result<Vec<f64>, CliError>>()?;
    let stage = select_stage(select, &val_losses);
    let ens = ens.truncated(stage);
    let data = match split {
        Split::Train => &p.splits.train,
        Split::Val => val,
        Split::Test => &p.splits.test,
    };
    if data.is_empty() {
        return Err(CliError::Data("the selected split is empty".into()));
    }
    let pred = ensemble_predict(&ens, &data.x)?;
    let loss = empirical_loss(&p.kind, &pred, &data.targets)?;
    let metrics = match &data.targets {
        Targets::Real(y) => {
            let mse = (&pred - y).norm_squared() / y.len() as f64;
            vec![("mse", Some(mse)), ("r2", Some(r_squared(&pred, y)?))]
        }
        Targets::Labels { labels, .. } => {
            vec![("accuracy", Some(accuracy(&pred, labels)?)), ("auc", auc_ovr(&pred, &data.targets)?)]
        }
    };
    Ok(Evaluation { stage, loss, metrics })
}

// ---------------------------------------------------------------------------
// diagnose

pub const DIAGNOSTICS_HEADER: [&str; 12] = [
    "seed",
    "stage",
    "lambda_w",
    "kappa_align",
    "curvature_ratio",
    "operator_norm",
    "radius",
    "descent_ip",
    "learner_norm",
    "r_star",
    "r_cauchy",
    "lower_bound",
];

/// Recomputes the regularity report of every accepted learner against the
/// ensemble it was added to.
pub fn diagnose(cfg: &Resolved, seed: u64) -> Result<Vec<Vec<String>>, CliError> {
    let p = prepare(cfg, seed)?;
    let ens = load_saved(cfg, seed)?;
    let train = &p.splits.train;
    let beta = hessian_bound(&p.kind);
    let mut pred = ensemble_predict(&Ensemble::constant(ens.kind, ens.c0.clone()), &train.x)?;
    let mut rows = Vec::new();
    for learner in &ens.learners {
        let per_datum = evaluate_all(&p.kind, &pred, &train.targets)?;
        let z = feature_batch(&learner.spec, &learner.theta, &train.x)?;
        let rd = assemble_reduced(&z, &per_datum)?;
        let report = regularity_report(&z, &rd, learner.lambda_w, &per_datum)?;
        let h = learner.weights.apply(&z.z);
        let learner_norm = (h.norm_squared() / h.nrows() as f64).sqrt();
        let bound = reduction_lower_bound(&report, &RegularityBounds::from_stage(&report, beta));
        rows.push(vec![
            seed.to_string(),
            learner.stage.to_string(),
            num(learner.lambda_w),
            opt(report.kappa_align),
            opt(report.curvature_ratio),
            num(report.operator_norm),
            num(report.radius),
            num(report.descent_ip),
            num(learner_norm),
            num(report.r_star),
            num(report.r_cauchy),
            opt(bound),
        ]);
        pred += h;
    }
    write_rows(&seeded(&cfg.output_dir, "diagnostics", seed, "csv"), &DIAGNOSTICS_HEADER, &rows)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_selection() {
        assert_eq!(select_stage(Select::Last, &[3.0, 2.0, 2.5]), 2);
        assert_eq!(select_stage(Select::BestVal, &[3.0, 2.0, 2.5]), 1);
        assert_eq!(select_stage(Select::BestVal, &[3.0, 2.0, 2.0]), 1);
        assert_eq!(select_stage(Select::BestVal, &[1.0]), 0);
    }

    #[test]
    fn numbers_round_trip() {
        for v in [0.1, 1.0 / 3.0, 1e-300, -2.5e17, 0.0] {
            assert_eq!(num(v).parse::<f64>().unwrap(), v);
        }
        assert_eq!(opt(None), "");
    }

    #[test]
    fn population_std() {
        assert_eq!(mean_std(&[1.0, 3.0]), (2.0, 1.0));
        assert_eq!(mean_std(&[4.0]), (4.0, 0.0));
    }
}
