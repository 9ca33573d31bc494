//! Run configuration: a TOML file plus dotted `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vpboost::datasets::{CsvSchema, SyntheticTask, Task};
use vpboost::{Activation, BoostConfig, FeaturizerSpec, LossKind, LossTag, TrainConfig, TrainVariant};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub loss: LossConfig,
    pub featurizer: FeaturizerConfig,
    #[serde(default)]
    pub trainer: TrainerConfig,
    #[serde(default)]
    pub boost: BoostSection,
    pub run: RunSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Synthetic generator; exclusive with `csv`.
    pub synthetic: Option<SyntheticTask>,
    /// Sample size, per class for classification generators.
    pub n: Option<usize>,
    /// CSV file, relative to the config file's directory.
    pub csv: Option<PathBuf>,
    /// Task of a CSV file.
    pub task: Option<Task>,
    pub n_classes: Option<usize>,
    #[serde(default = "default_fractions")]
    pub fractions: [f64; 3],
}

fn default_fractions() -> [f64; 3] {
    [0.7, 0.15, 0.15]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossTag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeaturizerConfig {
    pub widths: Vec<usize>,
    pub n_feat: usize,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default)]
    pub residual: bool,
}

fn default_activation() -> Activation {
    Activation::Tanh
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub variant: TrainVariant,
    pub steps: usize,
    pub lr: f64,
    pub lambda_theta: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainerConfig { variant: t.variant, steps: t.steps, lr: t.lr, lambda_theta: t.lambda_theta }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoostSection {
    pub m: usize,
    pub rho_accept: f64,
    pub rho_small: f64,
    pub gamma_up: f64,
    pub lambda_w0: f64,
    pub lambda_low: f64,
}

impl Default for BoostSection {
    fn default() -> Self {
        let b = BoostConfig::default();
        BoostSection {
            m: b.m,
            rho_accept: b.rho_accept,
            rho_small: b.rho_small,
            gamma_up: b.gamma_up,
            lambda_w0: b.lambda_w0,
            lambda_low: b.lambda_low,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub output_dir: PathBuf,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

/// Where the rows of a run come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic { task: SyntheticTask, n: usize },
    Csv { path: PathBuf, schema: CsvSchema },
}

/// A validated configuration, resolved into library types.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: RunConfig,
    pub source: DataSource,
    pub task: Task,
    pub fractions: (f64, f64, f64),
    pub output_dir: PathBuf,
}

impl Resolved {
    /// Loss kind for a dataset with `n_target` outputs or classes.
    pub fn loss_kind(&self, n_target: usize) -> Result<LossKind, CliError> {
        LossKind::new(self.config.loss.kind, n_target).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn featurizer(&self, n_in: usize) -> FeaturizerSpec {
        let f = &self.config.featurizer;
        FeaturizerSpec {
            residual: f.residual,
            ..FeaturizerSpec::mlp(n_in, &f.widths, f.n_feat, f.activation)
        }
    }

    pub fn boost_config(&self, seed: u64) -> BoostConfig {
        let (b, t) = (&self.config.boost, &self.config.trainer);
        BoostConfig {
            m: b.m,
            rho_accept: b.rho_accept,
            rho_small: b.rho_small,
            gamma_up: b.gamma_up,
            lambda_w0: b.lambda_w0,
            lambda_low: b.lambda_low,
            trainer: TrainConfig {
                variant: t.variant,
                steps: t.steps,
                lr: t.lr,
                lambda_w: b.lambda_w0,
                lambda_theta: t.lambda_theta,
                seed,
            },
            seed,
        }
    }
}

/// Reads `path`, applies overrides and validates everything that can be
/// checked before data is loaded.
pub fn load(path: &Path, overrides: &[String]) -> Result<Resolved, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut table: toml::Table =
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    for item in overrides {
        apply_override(&mut table, item)?;
    }
    let config: RunConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    resolve(config, base)
}

/// Sets a dotted key such as `boost.gamma_up=5`. Values are parsed as TOML
/// and fall back to plain strings.
pub fn apply_override(table: &mut toml::Table, item: &str) -> Result<(), CliError> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{item}` is not key=value")))?;
    let value = parse_value(raw.trim());
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("malformed override key `{key}`")));
    }
    let (last, sections) = parts.split_last().expect("split yields at least one part");
    let mut current = table;
    for part in sections {
        let entry = current
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        current = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("`{part}` in `{key}` is not a section")))?;
    }
    current.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn resolve(config: RunConfig, base: &Path) -> Result<Resolved, CliError> {
    let bad = |msg: String| Err(CliError::Config(msg));
    let d = &config.data;
    let (source, task) = match (&d.synthetic, &d.csv) {
        (Some(task), None) => {
            let Some(n) = d.n else {
                return bad("data.n is required for synthetic data".into());
            };
            if d.task.is_some() || d.n_classes.is_some() {
                return bad("data.task and data.n_classes only apply to csv data".into());
            }
            let kind = match task {
                SyntheticTask::Osc2d => Task::Regression,
                SyntheticTask::SwissRoll => Task::Binary,
                SyntheticTask::Peaks5 => Task::Multiclass,
            };
            (DataSource::Synthetic { task: *task, n }, kind)
        }
        (None, Some(csv)) => {
            let Some(task) = d.task else {
                return bad("data.task is required for csv data".into());
            };
            if d.n.is_some() {
                return bad("data.n only applies to synthetic data".into());
            }
            let schema = CsvSchema { n_classes: d.n_classes, ..CsvSchema::for_task(task) };
            (DataSource::Csv { path: base.join(csv), schema }, task)
        }
        _ => return bad("exactly one of data.synthetic and data.csv must be set".into()),
    };

    let compatible = matches!(
        (config.loss.kind, task),
        (LossTag::Mse, Task::Regression) | (LossTag::Bce, Task::Binary) | (LossTag::Mce, Task::Multiclass)
    );
    if !compatible {
        return bad(format!("loss {} does not fit a {task:?} task", config.loss.kind));
    }
    let [a, b, c] = d.fractions;
    if !(a > 0.0 && b > 0.0 && c > 0.0) || (a + b + c - 1.0).abs() > 1e-9 {
        return bad(format!("data.fractions must be positive and sum to 1, got {:?}", d.fractions));
    }
    if config.run.seeds.is_empty() {
        return bad("run.seeds is empty".into());
    }

    let resolved = Resolved {
        output_dir: output_dir(&config.run.output_dir),
        fractions: (a, b, c),
        source,
        task,
        config,
    };
    // input width and class count are only known after loading; placeholders suffice here
    resolved.featurizer(1).validate().map_err(|e| CliError::Config(e.to_string()))?;
    resolved.boost_config(0).validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(resolved)
}

/// Relative output directories live under `VPBOOST_OUTPUT_ROOT` when it is set.
fn output_dir(configured: &Path) -> PathBuf {
    match std::env::var_os("VPBOOST_OUTPUT_ROOT") {
        Some(root) if configured.is_relative() => PathBuf::from(root).join(configured),
        _ => configured.to_path_buf(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
[data]
synthetic = "osc2d"
n = 100

[loss]
kind = "mse"

[featurizer]
widths = [4]
n_feat = 3

[run]
output_dir = "out"
"#;

    fn write(text: &str) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, text).unwrap();
        (dir, path)
    }

    #[test]
    fn defaults_fill_optional_sections() {
        let (_d, path) = write(BASE);
        let r = load(&path, &[]).unwrap();
        assert_eq!(r.config.boost, BoostSection::default());
        assert_eq!(r.config.run.seeds, vec![0]);
        assert_eq!(r.task, Task::Regression);
        assert_eq!(r.featurizer(2).n_theta(), 2 * 4 + 4 + 4 * 3 + 3);
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let (_d, path) = write(BASE);
        let sets = ["boost.gamma_up=5".to_string(), "trainer.variant=gd".into(), "run.seeds=[1, 2]".into()];
        let r = load(&path, &sets).unwrap();
        assert_eq!(r.config.boost.gamma_up, 5.0);
        assert_eq!(r.config.trainer.variant, TrainVariant::Gd);
        assert_eq!(r.config.run.seeds, vec![1, 2]);
    }

    #[test]
    fn unknown_keys_are_named() {
        let (_d, path) = write(BASE);
        let err = load(&path, &["boost.gamma_upp=5".into()]).unwrap_err();
        assert!(matches!(&err, CliError::Config(m) if m.contains("gamma_upp")), "{err}");
        let (_d, path) = write(&format!("{BASE}\n[extra]\nx = 1\n"));
        assert!(matches!(load(&path, &[]), Err(CliError::Config(m)) if m.contains("extra")));
    }

    #[test]
    fn conflicting_task_and_loss() {
        let (_d, path) = write(BASE);
        assert!(matches!(load(&path, &["loss.kind=bce".into()]), Err(CliError::Config(_))));
        let sets = ["data.synthetic=peaks5".to_string(), "loss.kind=mce".into()];
        assert!(load(&path, &sets).is_ok());
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let (_d, path) = write(BASE);
        for set in ["boost.gamma_up=1", "trainer.lr=0", "data.fractions=[0.5, 0.5, 0.5]", "featurizer.n_feat=0", "boost=3"] {
            assert!(matches!(load(&path, &[set.into()]), Err(CliError::Config(_))), "{set}");
        }
        assert!(matches!(load(&path, &["nonsense".into()]), Err(CliError::Config(_))));
    }

    #[test]
    fn echoed_config_reloads_identically() {
        let (dir, path) = write(BASE);
        let r = load(&path, &["boost.m=3".into()]).unwrap();
        let echoed = dir.path().join("echo.toml");
        std::fs::write(&echoed, toml::to_string(&r.config).unwrap()).unwrap();
        assert_eq!(load(&echoed, &[]).unwrap().config, r.config);
    }
}
