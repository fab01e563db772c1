//! TOML run configurations. Relative paths are resolved against the
//! directory holding the config file.

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use std::path::{Path, PathBuf};

use ggp_core::data::{DayWindow, Split, SupervisedOptions, SynthConfig};
use ggp_core::experiment::{BenchmarkConfig, ModelEntry};
use ggp_core::model::{Family, GroupingScheme, KernelDefaults};
use ggp_core::optim::TrainConfig;
use ggp_core::vi::PosteriorKind;

use crate::CliError;

/// Lag features per task; the model builders assume three.
pub const LAGS: usize = 3;

fn yes() -> bool {
    true
}

fn one() -> usize {
    1
}

fn default_horizon() -> usize {
    3
}

fn default_window() -> [u32; 2] {
    [
        DayWindow::DAYLIGHT.start_minute,
        DayWindow::DAYLIGHT.end_minute,
    ]
}

fn default_fraction() -> f64 {
    0.6
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub observations: PathBuf,
    pub sites: PathBuf,
    /// Forecast horizon in grid steps.
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "yes")]
    pub daylight_only: bool,
    /// Minutes after midnight, both inclusive.
    #[serde(default = "default_window")]
    pub day_window: [u32; 2],
    #[serde(default = "default_fraction")]
    pub train_fraction: f64,
    #[serde(default)]
    pub train_rows: Option<usize>,
    #[serde(default)]
    pub test_rows: Option<usize>,
}

impl DataConfig {
    pub fn options(&self) -> SupervisedOptions {
        SupervisedOptions {
            horizon: self.horizon,
            lags: LAGS,
            day_window: self.daylight_only.then_some(DayWindow {
                start_minute: self.day_window[0],
                end_minute: self.day_window[1],
            }),
            split: match (self.train_rows, self.test_rows) {
                (Some(train), Some(test)) => Split::Counts { train, test },
                _ => Split::Fraction(self.train_fraction),
            },
        }
    }

    fn validate(&self, errs: &mut Vec<String>) {
        if self.horizon == 0 {
            errs.push("data.horizon: must be positive".into());
        }
        let [a, b] = self.day_window;
        if a > b || b >= 24 * 60 {
            errs.push(
                "data.day_window: expected [start, end] minutes with start <= end < 1440".into(),
            );
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            errs.push("data.train_fraction: must lie in (0, 1)".into());
        }
        match (self.train_rows, self.test_rows) {
            (Some(0), _) | (_, Some(0)) => {
                errs.push("data.train_rows/test_rows: must be positive".into())
            }
            (Some(_), None) | (None, Some(_)) => {
                errs.push("data.train_rows/test_rows: give both or neither".into())
            }
            _ => {}
        }
    }

    fn resolve(&mut self, base: &Path) {
        self.observations = base.join(&self.observations);
        self.sites = base.join(&self.sites);
    }

    pub fn check_files(&self) -> Result<(), CliError> {
        for (field, p) in [
            ("data.observations", &self.observations),
            ("data.sites", &self.sites),
        ] {
            if !p.is_file() {
                return Err(CliError::Validation(format!(
                    "{field}: file `{}` does not exist",
                    p.display()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeName {
    SolarRows,
    WindOffdiag,
    Custom,
}

fn default_scheme() -> SchemeName {
    SchemeName::SolarRows
}

fn default_posterior() -> PosteriorKind {
    PosteriorKind::Diagonal
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub family: Family,
    #[serde(default = "default_scheme")]
    pub scheme: SchemeName,
    /// Expected task count; checked against the data when given.
    #[serde(default)]
    pub tasks: Option<usize>,
    /// Node count `Qg`; defaults to the task count.
    #[serde(default)]
    pub nodes: Option<usize>,
    /// Inducing points per group.
    pub inducing: usize,
    /// Mixture components.
    #[serde(default = "one")]
    pub components: usize,
    #[serde(default = "default_posterior")]
    pub posterior: PosteriorKind,
    /// `[row, col]` weight positions per coupled group (scheme = "custom").
    #[serde(default)]
    pub custom_groups: Option<Vec<Vec<[usize; 2]>>>,
}

impl ModelConfig {
    pub fn entry(&self) -> ModelEntry {
        ModelEntry {
            name: self.family.to_string(),
            family: self.family,
            scheme: match self.scheme {
                SchemeName::WindOffdiag => GroupingScheme::WindOffdiag,
                _ => GroupingScheme::SolarRows,
            },
            posterior: self.posterior,
            components: self.components,
            nodes: self.nodes,
            inducing: Some(self.inducing),
            custom_groups: self.custom_groups.clone(),
        }
    }

    fn validate(&self, errs: &mut Vec<String>) {
        for (field, v) in [
            ("model.inducing", Some(self.inducing)),
            ("model.components", Some(self.components)),
            ("model.tasks", self.tasks),
            ("model.nodes", self.nodes),
        ] {
            if v == Some(0) {
                errs.push(format!("{field}: must be positive"));
            }
        }
        let ggp = self.family == Family::Ggp;
        match (self.scheme, &self.custom_groups) {
            (SchemeName::Custom, None) => {
                errs.push("model.custom_groups: required when model.scheme = \"custom\"".into())
            }
            (SchemeName::Custom, Some(_)) if !ggp => errs
                .push("model.scheme: \"custom\" grouping is only valid for the ggp family".into()),
            (s, Some(_)) if s != SchemeName::Custom => {
                errs.push("model.custom_groups: only used with model.scheme = \"custom\"".into())
            }
            (SchemeName::WindOffdiag, _) if !ggp => errs.push(
                "model.scheme: \"wind-offdiag\" grouping is only valid for the ggp family".into(),
            ),
            _ => {}
        }
        if ggp {
            if let (Some(t), Some(n)) = (self.tasks, self.nodes) {
                if t != n {
                    errs.push("model.nodes: the ggp family requires nodes = tasks".into());
                }
            }
        }
    }
}

fn default_samples() -> usize {
    200
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictConfig {
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for PredictConfig {
    fn default() -> Self {
        PredictConfig {
            samples: default_samples(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    /// Leave the elapsed-seconds column empty so identical runs give
    /// byte-identical training logs.
    #[serde(default = "yes")]
    pub record_timing: bool,
    /// Write an extra checkpoint every this many epochs (0 = only at the end).
    #[serde(default)]
    pub checkpoint_every: usize,
    pub data: DataConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub kernel: KernelDefaults,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub predict: PredictConfig,
}

fn kernel_errors(kd: &KernelDefaults, errs: &mut Vec<String>) {
    for (field, v) in [
        ("kernel.period", kd.period),
        ("kernel.periodic_lengthscale", kd.periodic_lengthscale),
        ("kernel.lag_lengthscale", kd.lag_lengthscale),
        ("kernel.spatial_lengthscale", kd.spatial_lengthscale),
        ("kernel.support", kd.support),
    ] {
        if !(v > 0.0 && v.is_finite()) {
            errs.push(format!("{field}: must be positive and finite"));
        }
    }
}

fn finish(errs: Vec<String>) -> Result<(), CliError> {
    if errs.is_empty() {
        Ok(())
    } else {
        Err(CliError::Validation(errs.join("; ")))
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        let mut errs = Vec::new();
        self.data.validate(&mut errs);
        self.model.validate(&mut errs);
        kernel_errors(&self.kernel, &mut errs);
        if self.predict.samples < 2 {
            errs.push("predict.samples: must be at least 2".into());
        }
        if let Err(e) = self.train.validate() {
            errs.push(
                e.to_string()
                    .trim_start_matches("input error: ")
                    .to_string(),
            );
        }
        finish(errs)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteConfig {
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub benchmark: BenchmarkConfig,
}

impl SuiteConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        let mut errs = Vec::new();
        self.data.validate(&mut errs);
        kernel_errors(&self.benchmark.kernel, &mut errs);
        if let Err(e) = self.benchmark.validate() {
            errs.push(
                e.to_string()
                    .trim_start_matches("input error: ")
                    .to_string(),
            );
        }
        finish(errs)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthFile {
    pub output_dir: PathBuf,
    #[serde(default)]
    pub synth: SynthConfig,
}

/// Parses TOML text; errors name the offending field path.
pub fn parse<T: DeserializeOwned>(text: &str) -> Result<T, CliError> {
    let value: toml::Table = toml::from_str(text)
        .map_err(|e| CliError::Validation(format!("invalid TOML: {}", e.message())))?;
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let msg = inner.message().to_string();
        if path == "." {
            CliError::Validation(msg)
        } else {
            CliError::Validation(format!("{path}: {msg}"))
        }
    })
}

pub fn to_toml<T: Serialize>(cfg: &T) -> Result<String, CliError> {
    toml::to_string(cfg).map_err(|e| CliError::Validation(format!("cannot serialize config: {e}")))
}

fn read(path: &Path) -> Result<(String, PathBuf), CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        CliError::Validation(format!("cannot read config `{}`: {e}", path.display()))
    })?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((text, base))
}

pub fn load_run(path: &Path) -> Result<RunConfig, CliError> {
    let (text, base) = read(path)?;
    let mut cfg: RunConfig = parse(&text)?;
    cfg.data.resolve(&base);
    cfg.output_dir = base.join(&cfg.output_dir);
    Ok(cfg)
}

pub fn load_suite(path: &Path) -> Result<SuiteConfig, CliError> {
    let (text, base) = read(path)?;
    let mut cfg: SuiteConfig = parse(&text)?;
    cfg.data.resolve(&base);
    cfg.output_dir = base.join(&cfg.output_dir);
    Ok(cfg)
}

pub fn load_synth(path: &Path) -> Result<SynthFile, CliError> {
    let (text, base) = read(path)?;
    let mut cfg: SynthFile = parse(&text)?;
    cfg.output_dir = base.join(&cfg.output_dir);
    Ok(cfg)
}
