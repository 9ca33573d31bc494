//! Synthetic benchmark tasks, CSV ingestion, seeded splitting and feature
//! standardization.
//!
//! CSV layout: a header row, feature columns `f0…f{d-1}`, then either real
//! targets `y0…` or a single integer `label` column.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::OnceLock;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::Targets;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Regression,
    Binary,
    Multiclass,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub targets: Targets,
    pub task: Task,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, targets: Targets, task: Task) -> Result<Self> {
        if x.nrows() != targets.len() {
            return Err(Error::input(format!(
                "{} feature rows but {} targets",
                x.nrows(),
                targets.len()
            )));
        }
        match (&targets, task) {
            (Targets::Real(_), Task::Regression) => {}
            (Targets::Labels { labels, n_classes }, Task::Binary | Task::Multiclass) => {
                if task == Task::Binary && *n_classes != 2 {
                    return Err(Error::input(format!("binary task with {n_classes} classes")));
                }
                if let Some(&bad) = labels.iter().find(|&&l| l >= *n_classes) {
                    return Err(Error::input(format!(
                        "label {bad} out of range for {n_classes} classes"
                    )));
                }
            }
            _ => return Err(Error::input(format!("targets do not fit a {task:?} task"))),
        }
        Ok(Dataset { x, targets, task })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_in(&self) -> usize {
        self.x.ncols()
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(idx.iter()),
            targets: self.targets.select(idx),
            task: self.task,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticTask {
    Osc2d,
    SwissRoll,
    Peaks5,
}

/// Oscillatory regression target on `[0, 1]²`.
pub fn osc2d_target(x1: f64, x2: f64) -> f64 {
    let s = (4.0 * PI * x2 * x2).sin();
    x1 * (1.0 - x1) * (4.0 * PI * x1).cos() * s * s
}

pub fn peaks(x: f64, y: f64) -> f64 {
    3.0 * (1.0 - x).powi(2) * (-x * x - (y + 1.0).powi(2)).exp()
        - 10.0 * (x / 5.0 - x.powi(3) - y.powi(5)) * (-x * x - y * y).exp()
        - (-(x + 1.0).powi(2) - y * y).exp() / 3.0
}

/// Point of spiral arm `class` at angle `omega`; the radius grows with the angle.
pub fn swiss_roll_point(omega: f64, class: usize) -> (f64, f64) {
    let r = omega / (4.0 * PI) + 0.2 * class as f64;
    (r * omega.cos(), r * omega.sin())
}

const PEAKS_GRID: usize = 2001;
const PEAKS_CLASSES: usize = 5;
const PEAKS_MAX_DRAWS_PER_POINT: usize = 2000;

/// Range of the peaks surface over `[-3, 3]²`, estimated on a fixed grid.
pub fn peaks_range() -> (f64, f64) {
    static RANGE: OnceLock<(f64, f64)> = OnceLock::new();
    *RANGE.get_or_init(grid_range)
}

fn grid_range() -> (f64, f64) {
    let step = 6.0 / (PEAKS_GRID - 1) as f64;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..PEAKS_GRID {
        let x = -3.0 + step * i as f64;
        for j in 0..PEAKS_GRID {
            let v = peaks(x, -3.0 + step * j as f64);
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    (lo, hi)
}

fn peaks_class(v: f64, lo: f64, hi: f64) -> usize {
    let t = (v - lo) / (hi - lo) * PEAKS_CLASSES as f64;
    (t.floor().max(0.0) as usize).min(PEAKS_CLASSES - 1)
}

/// Generates a synthetic task. For the classification tasks `n` is the
/// number of points per class.
pub fn gen_synthetic(task: SyntheticTask, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::input("sample size must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match task {
        SyntheticTask::Osc2d => {
            let mut x = DMatrix::zeros(n, 2);
            let mut y = DMatrix::zeros(n, 1);
            for i in 0..n {
                let (a, b) = (rng.random::<f64>(), rng.random::<f64>());
                x[(i, 0)] = a;
                x[(i, 1)] = b;
                y[(i, 0)] = osc2d_target(a, b);
            }
            Dataset::new(x, Targets::Real(y), Task::Regression)
        }
        SyntheticTask::SwissRoll => {
            let mut x = DMatrix::zeros(2 * n, 2);
            let mut labels = Vec::with_capacity(2 * n);
            for class in 0..2 {
                for i in 0..n {
                    let omega = rng.random_range(0.0..4.0 * PI);
                    let (a, b) = swiss_roll_point(omega, class);
                    x[(class * n + i, 0)] = a;
                    x[(class * n + i, 1)] = b;
                    labels.push(class);
                }
            }
            Dataset::new(x, Targets::Labels { labels, n_classes: 2 }, Task::Binary)
        }
        SyntheticTask::Peaks5 => {
            let (lo, hi) = peaks_range();
            let mut buckets: Vec<Vec<(f64, f64)>> = (0..PEAKS_CLASSES).map(|_| Vec::with_capacity(n)).collect();
            let max_draws = PEAKS_MAX_DRAWS_PER_POINT * PEAKS_CLASSES * n;
            let mut draws = 0;
            while buckets.iter().any(|b| b.len() < n) {
                if draws == max_draws {
                    let counts: Vec<usize> = buckets.iter().map(Vec::len).collect();
                    return Err(Error::Generation(format!(
                        "peaks5: class counts {counts:?} short of {n} after {max_draws} draws"
                    )));
                }
                draws += 1;
                let a = rng.random_range(-3.0..3.0);
                let b = rng.random_range(-3.0..3.0);
                let c = peaks_class(peaks(a, b), lo, hi);
                if buckets[c].len() < n {
                    buckets[c].push((a, b));
                }
            }
            let mut x = DMatrix::zeros(PEAKS_CLASSES * n, 2);
            let mut labels = Vec::with_capacity(PEAKS_CLASSES * n);
            for (c, pts) in buckets.iter().enumerate() {
                for (i, &(a, b)) in pts.iter().enumerate() {
                    x[(c * n + i, 0)] = a;
                    x[(c * n + i, 1)] = b;
                    labels.push(c);
                }
            }
            Dataset::new(
                x,
                Targets::Labels { labels, n_classes: PEAKS_CLASSES },
                Task::Multiclass,
            )
        }
    }
}

/// Which columns of a CSV file hold features and targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub task: Task,
    /// Feature column names; `None` takes every `f<k>` column in header order.
    #[serde(default)]
    pub features: Option<Vec<String>>,
    /// Regression target names; `None` takes every `y<k>` column.
    #[serde(default)]
    pub targets: Option<Vec<String>>,
    #[serde(default = "default_label")]
    pub label: String,
    /// Number of classes; `None` infers `max label + 1` (2 for binary tasks).
    #[serde(default)]
    pub n_classes: Option<usize>,
}

fn default_label() -> String {
    "label".to_string()
}

impl CsvSchema {
    pub fn for_task(task: Task) -> Self {
        CsvSchema { task, features: None, targets: None, label: default_label(), n_classes: None }
    }
}

fn numbered(header: &csv::StringRecord, prefix: char) -> Vec<String> {
    header
        .iter()
        .filter(|h| {
            h.strip_prefix(prefix)
                .is_some_and(|rest| !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit()))
        })
        .map(str::to_string)
        .collect()
}

fn column_indices(header: &csv::StringRecord, names: &[String]) -> Result<Vec<usize>> {
    names
        .iter()
        .map(|name| {
            header.iter().position(|h| h == name).ok_or(Error::Parse {
                line: 1,
                message: format!("missing column `{name}`"),
            })
        })
        .collect()
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse { line, message: format!("{other:?}") },
    }
}

pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path.as_ref())
        .map_err(csv_error)?;
    let header = reader.headers().map_err(csv_error)?.clone();
    let feature_names = schema.features.clone().unwrap_or_else(|| numbered(&header, 'f'));
    if feature_names.is_empty() {
        return Err(Error::Parse { line: 1, message: "no feature columns".into() });
    }
    let fcols = column_indices(&header, &feature_names)?;
    let tcols = match schema.task {
        Task::Regression => {
            let names = schema.targets.clone().unwrap_or_else(|| numbered(&header, 'y'));
            if names.is_empty() {
                return Err(Error::Parse { line: 1, message: "no target columns".into() });
            }
            column_indices(&header, &names)?
        }
        Task::Binary | Task::Multiclass => column_indices(&header, std::slice::from_ref(&schema.label))?,
    };

    let mut features = Vec::new();
    let mut reals = Vec::new();
    let mut labels = Vec::new();
    let mut rows = 0;
    for record in reader.records() {
        let record = record.map_err(csv_error)?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != header.len() {
            return Err(Error::Parse {
                line,
                message: format!("expected {} fields, found {}", header.len(), record.len()),
            });
        }
        let number = |col: usize| -> Result<f64> {
            let cell = record[col].trim();
            cell.parse::<f64>().map_err(|_| Error::Parse {
                line,
                message: format!("column `{}`: `{cell}` is not a number", &header[col]),
            })
        };
        for &c in &fcols {
            features.push(number(c)?);
        }
        match schema.task {
            Task::Regression => {
                for &c in &tcols {
                    reals.push(number(c)?);
                }
            }
            _ => {
                let cell = record[tcols[0]].trim();
                let label = cell.parse::<usize>().map_err(|_| Error::Parse {
                    line,
                    message: format!("label `{cell}` is not a class index"),
                })?;
                labels.push(label);
            }
        }
        rows += 1;
    }

    let x = DMatrix::from_row_slice(rows, fcols.len(), &features);
    let targets = match schema.task {
        Task::Regression => Targets::Real(DMatrix::from_row_slice(rows, tcols.len(), &reals)),
        task => {
            let n_classes = schema.n_classes.unwrap_or_else(|| match task {
                Task::Binary => 2,
                _ => labels.iter().max().map_or(0, |m| m + 1),
            });
            Targets::Labels { labels, n_classes }
        }
    };
    Dataset::new(x, targets, schema.task)
}

/// Writes `ds` in the layout read by [`load_csv`], with 17 significant digits.
pub fn write_csv(path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref()).map_err(csv_error)?;
    let mut header: Vec<String> = (0..ds.n_in()).map(|k| format!("f{k}")).collect();
    match &ds.targets {
        Targets::Real(y) => header.extend((0..y.ncols()).map(|k| format!("y{k}"))),
        Targets::Labels { .. } => header.push("label".into()),
    }
    w.write_record(&header).map_err(csv_error)?;
    for i in 0..ds.len() {
        let mut row: Vec<String> = ds.x.row(i).iter().map(|v| format!("{v:.16e}")).collect();
        match &ds.targets {
            Targets::Real(y) => row.extend(y.row(i).iter().map(|v| format!("{v:.16e}"))),
            Targets::Labels { labels, .. } => row.push(labels[i].to_string()),
        }
        w.write_record(&row).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

/// Shuffles `0..n` and cuts it into train/val/test. Train and validation
/// sizes are floored; the remainder goes to test.
pub fn split_indices(n: usize, fractions: (f64, f64, f64), seed: u64) -> Result<SplitIndices> {
    let (a, b, c) = fractions;
    if !(a > 0.0 && b > 0.0 && c > 0.0) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::input(format!(
            "split fractions must be positive and sum to 1, got {fractions:?}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (a * n as f64).floor() as usize;
    let n_val = (b * n as f64).floor() as usize;
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    Ok(SplitIndices { train: idx, val, test, seed })
}

/// Per-feature affine map fitted on training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// Features with zero training variance; these are centered only.
    pub constant: Vec<bool>,
}

impl Standardizer {
    pub fn fit(x: &DMatrix<f64>) -> Result<Self> {
        let n = x.nrows();
        if n == 0 {
            return Err(Error::input("cannot standardize an empty sample"));
        }
        let mut mean = Vec::with_capacity(x.ncols());
        let mut scale = Vec::with_capacity(x.ncols());
        let mut constant = Vec::with_capacity(x.ncols());
        for col in x.column_iter() {
            let m = col.mean();
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
            let sd = var.sqrt();
            mean.push(m);
            if sd > 0.0 {
                scale.push(sd);
                constant.push(false);
            } else {
                scale.push(1.0);
                constant.push(true);
            }
        }
        Ok(Standardizer { mean, scale, constant })
    }

    pub fn apply(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.mean.len() {
            return Err(Error::input(format!(
                "standardizer fitted on {} features, got {}",
                self.mean.len(),
                x.ncols()
            )));
        }
        let mut out = x.clone();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            let (m, s) = (self.mean[j], self.scale[j]);
            col.apply(|v| *v = (*v - m) / s);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub indices: SplitIndices,
    pub standardizer: Standardizer,
}

/// Splits `ds` by seed and standardizes every part with training statistics.
pub fn split_standardize(ds: &Dataset, fractions: (f64, f64, f64), seed: u64) -> Result<Splits> {
    let indices = split_indices(ds.len(), fractions, seed)?;
    if indices.train.is_empty() {
        return Err(Error::input("training split is empty"));
    }
    let mut train = ds.select(&indices.train);
    let standardizer = Standardizer::fit(&train.x)?;
    train.x = standardizer.apply(&train.x)?;
    let mut val = ds.select(&indices.val);
    val.x = standardizer.apply(&val.x)?;
    let mut test = ds.select(&indices.test);
    test.x = standardizer.apply(&test.x)?;
    Ok(Splits { train, val, test, indices, standardizer })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn osc2d_vanishes_on_edges() {
        assert_eq!(osc2d_target(0.0, 0.37), 0.0);
        assert_eq!(osc2d_target(1.0, 0.9), 0.0);
        let ds = gen_synthetic(SyntheticTask::Osc2d, 50, 3).unwrap();
        let Targets::Real(y) = &ds.targets else { panic!() };
        for i in 0..50 {
            assert_eq!(y[(i, 0)], osc2d_target(ds.x[(i, 0)], ds.x[(i, 1)]));
            assert!((0.0..1.0).contains(&ds.x[(i, 0)]) && (0.0..1.0).contains(&ds.x[(i, 1)]));
        }
    }

    #[test]
    fn peaks_at_origin() {
        let e = (-1.0f64).exp();
        assert!((peaks(0.0, 0.0) - 8.0 / 3.0 * e).abs() < 1e-15);
        assert!((peaks(0.0, 0.0) - 0.9810).abs() < 1e-4);
    }

    #[test]
    fn swiss_roll_arms_start_apart() {
        assert_eq!(swiss_roll_point(0.0, 0), (0.0, 0.0));
        assert_eq!(swiss_roll_point(0.0, 1), (0.2, 0.0));
        let ds = gen_synthetic(SyntheticTask::SwissRoll, 20, 1).unwrap();
        assert_eq!(ds.len(), 40);
        let Targets::Labels { labels, .. } = &ds.targets else { panic!() };
        assert_eq!(labels.iter().filter(|&&l| l == 1).count(), 20);
    }

    #[test]
    fn peaks5_is_balanced_and_labelled_by_level() {
        let (lo, hi) = peaks_range();
        assert!(lo < -6.0 && hi > 8.0);
        let ds = gen_synthetic(SyntheticTask::Peaks5, 30, 9).unwrap();
        let Targets::Labels { labels, n_classes } = &ds.targets else { panic!() };
        assert_eq!(*n_classes, 5);
        for c in 0..5 {
            assert_eq!(labels.iter().filter(|&&l| l == c).count(), 30);
        }
        for (i, &l) in labels.iter().enumerate() {
            assert_eq!(peaks_class(peaks(ds.x[(i, 0)], ds.x[(i, 1)]), lo, hi), l);
        }
    }

    #[test]
    fn generators_are_seeded() {
        for task in [SyntheticTask::Osc2d, SyntheticTask::SwissRoll, SyntheticTask::Peaks5] {
            assert_eq!(gen_synthetic(task, 10, 4).unwrap(), gen_synthetic(task, 10, 4).unwrap());
        }
        assert_ne!(
            gen_synthetic(SyntheticTask::Osc2d, 10, 4).unwrap(),
            gen_synthetic(SyntheticTask::Osc2d, 10, 5).unwrap()
        );
        assert!(gen_synthetic(SyntheticTask::Osc2d, 0, 4).is_err());
    }

    #[test]
    fn split_sizes_and_permutation() {
        let s = split_indices(10, (0.7, 0.15, 0.15), 0).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (7, 1, 2));
        let s = split_indices(1715, (0.7, 0.15, 0.15), 2).unwrap();
        assert_eq!(s.train.len(), 1200);
        let mut all: Vec<usize> = [s.train.clone(), s.val.clone(), s.test.clone()].concat();
        all.sort_unstable();
        assert_eq!(all, (0..1715).collect::<Vec<_>>());
        assert_eq!(s, split_indices(1715, (0.7, 0.15, 0.15), 2).unwrap());
        assert!(split_indices(10, (0.7, 0.2, 0.2), 0).is_err());
        assert!(split_indices(10, (1.0, 0.0, 0.0), 0).is_err());
    }

    #[test]
    fn standardization_uses_train_statistics() {
        let mut ds = gen_synthetic(SyntheticTask::Osc2d, 200, 5).unwrap();
        ds.x = ds.x.insert_column(2, 4.0);
        let sp = split_standardize(&ds, (0.7, 0.15, 0.15), 11).unwrap();
        let n = sp.train.len() as f64;
        for j in 0..2 {
            let col = sp.train.x.column(j);
            let m = col.mean();
            let sd = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
            assert!(m.abs() < 1e-10 && (sd - 1.0).abs() < 1e-10);
        }
        assert_eq!(sp.standardizer.constant, vec![false, false, true]);
        assert!(sp.train.x.column(2).iter().all(|&v| v == 0.0));
        let raw_val = ds.select(&sp.indices.val);
        assert_eq!(sp.val.x, sp.standardizer.apply(&raw_val.x).unwrap());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        for (task, t) in [
            (SyntheticTask::Osc2d, Task::Regression),
            (SyntheticTask::SwissRoll, Task::Binary),
            (SyntheticTask::Peaks5, Task::Multiclass),
        ] {
            let ds = gen_synthetic(task, 25, 8).unwrap();
            let path = dir.path().join("d.csv");
            write_csv(&path, &ds).unwrap();
            let back = load_csv(&path, &CsvSchema::for_task(t)).unwrap();
            assert_eq!(back, ds);
        }
    }

    #[test]
    fn csv_errors_cite_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        let mut text = String::from("f0,f1,y0\n");
        for i in 0..5 {
            text.push_str(&format!("{i},1.5,2\n"));
        }
        text.push_str("0.1,oops,3\n");
        std::fs::write(&path, &text).unwrap();
        match load_csv(&path, &CsvSchema::for_task(Task::Regression)) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 7),
            other => panic!("{other:?}"),
        }

        std::fs::write(&path, "f0,y0\n1,2\n3\n").unwrap();
        match load_csv(&path, &CsvSchema::for_task(Task::Regression)) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }

        std::fs::write(&path, "f0,y0\n1,2\n").unwrap();
        assert!(matches!(
            load_csv(&path, &CsvSchema::for_task(Task::Binary)),
            Err(Error::Parse { line: 1, .. })
        ));

        std::fs::write(&path, "f0,label\n1,0\n2,3\n").unwrap();
        let schema = CsvSchema { n_classes: Some(3), ..CsvSchema::for_task(Task::Multiclass) };
        assert!(matches!(load_csv(&path, &schema), Err(Error::Input(_))));
    }
}
