//! Command implementations behind the `ggp` binary.

pub mod config;

use serde::Serialize;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use ggp_core::data::{correlation_by_distance, load_csv, synth_gprn, write_csv};
use ggp_core::experiment::{forecast, initialize, run_benchmark, BenchmarkResult, Dataset};
use ggp_core::model::Model;
use ggp_core::optim::{fit, read_checkpoint, write_checkpoint, EpochHook, StopReason};
use ggp_core::params::Joint;
use ggp_core::predict::{nlpd_from_samples, ForecastReport};
use ggp_core::vi::{ElboTerms, MoGPosterior};

use config::{RunConfig, SuiteConfig, SynthFile};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Numeric(_) => 2,
        }
    }
}

impl From<ggp_core::Error> for CliError {
    fn from(e: ggp_core::Error) -> Self {
        if e.is_numeric() {
            CliError::Numeric(e.to_string())
        } else {
            CliError::Validation(e.to_string())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Validation(format!("i/o error: {e}"))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(f, value).map_err(|e| CliError::Validation(e.to_string()))
}

fn load_dataset(cfg: &config::DataConfig, tasks: Option<usize>) -> Result<Dataset, CliError> {
    cfg.check_files()?;
    let series = load_csv(&cfg.observations, &cfg.sites)?;
    if let Some(t) = tasks {
        if t != series.len() {
            return Err(CliError::Validation(format!(
                "model.tasks: config declares {t} tasks but the data has {}",
                series.len()
            )));
        }
    }
    Ok(Dataset::from_series(&series, &cfg.options())?)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainSummary {
    pub family: String,
    pub tasks: usize,
    pub inducing: usize,
    pub groups: usize,
    pub factorizations_per_iteration: usize,
    pub train_rows: usize,
    pub test_rows: usize,
    pub epochs: usize,
    pub stop_reason: StopReason,
    pub final_terms: Option<ElboTerms>,
    pub wall_seconds: f64,
}

/// Trains one model and writes `checkpoint.txt`, `training_log.csv`,
/// `summary.json` and a copy of the config.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary, CliError> {
    cfg.validate()?;
    let data = load_dataset(&cfg.data, cfg.model.tasks)?;
    let (mut asm, mut q, m) =
        initialize(&cfg.model.entry(), &data, None, &cfg.kernel, cfg.train.seed)?;
    let out = &cfg.output_dir;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.toml"), config::to_toml(cfg)?)?;
    let (x, y) = if asm.pooled {
        ggp_core::data::pool_tasks(&data.train.x, &data.train.y, &data.sites, config::LAGS)?
    } else {
        (data.train.x.clone(), data.train.y.clone())
    };
    let every = cfg.checkpoint_every;
    let mut hook = |epoch: usize, model: &Model, post: &MoGPosterior| {
        if every > 0 && epoch.is_multiple_of(every) {
            let (mut m, mut p) = (model.clone(), post.clone());
            let mut j = Joint {
                model: &mut m,
                posterior: &mut p,
            };
            write_checkpoint(&out.join(format!("checkpoint_epoch{epoch}.txt")), &mut j)?;
        }
        Ok(Vec::new())
    };
    let hook: &mut EpochHook<'_> = &mut hook;
    let log = fit(&mut asm.model, &mut q, &x, &y, &cfg.train, Some(hook))?;
    write_checkpoint(
        &out.join("checkpoint.txt"),
        &mut Joint {
            model: &mut asm.model,
            posterior: &mut q,
        },
    )?;
    log.write_csv_with(
        BufWriter::new(File::create(out.join("training_log.csv"))?),
        cfg.record_timing,
    )?;
    let summary = TrainSummary {
        family: asm.family.to_string(),
        tasks: data.n_tasks(),
        inducing: m,
        groups: asm.model.n_groups(),
        factorizations_per_iteration: asm.model.inducing_factorizations(),
        train_rows: data.train.len(),
        test_rows: data.test.len(),
        epochs: log.records.len(),
        stop_reason: log.stop,
        final_terms: log.final_terms(),
        wall_seconds: log.wall_seconds(),
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TaskReport {
    pub task: usize,
    pub site_id: String,
    pub rmse: f64,
    pub rmse_original: f64,
    pub f_var: f64,
    pub f_var_original: f64,
    pub nlpd: f64,
    pub nlpd_average_log: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvaluationSummary {
    pub report: ForecastReport,
    pub tasks: Vec<TaskReport>,
    pub test_rows: usize,
    pub samples: usize,
}

/// Forecasts the test split with a trained checkpoint. `data` optionally
/// replaces the observation and sites files of the config.
pub fn cmd_evaluate(
    cfg: &RunConfig,
    checkpoint: &Path,
    data: Option<(PathBuf, PathBuf)>,
) -> Result<EvaluationSummary, CliError> {
    let mut cfg = cfg.clone();
    if let Some((obs, sites)) = data {
        cfg.data.observations = obs;
        cfg.data.sites = sites;
    }
    cfg.validate()?;
    let ids: Vec<String> = {
        cfg.data.check_files()?;
        load_csv(&cfg.data.observations, &cfg.data.sites)?
            .into_iter()
            .map(|s| s.id)
            .collect()
    };
    let data = load_dataset(&cfg.data, cfg.model.tasks)?;
    let (mut asm, mut q, _) =
        initialize(&cfg.model.entry(), &data, None, &cfg.kernel, cfg.train.seed)?;
    read_checkpoint(
        checkpoint,
        &mut Joint {
            model: &mut asm.model,
            posterior: &mut q,
        },
    )
    .map_err(|e| CliError::Validation(format!("checkpoint does not match the config: {e}")))?;
    let pred = forecast(
        &asm,
        &q,
        &data,
        &data.test,
        cfg.predict.samples,
        cfg.predict.seed,
    )?;
    let y = &data.test.y;
    let nl = nlpd_from_samples(&pred.samples, &pred.noise, y)?;
    let scales = data.test.target_scales();
    let report = ForecastReport::build(asm.family.name(), &pred, y, &scales, nl)?;
    let mut tasks = Vec::new();
    for t in 0..y.ncols() {
        let col: Vec<_> = pred
            .samples
            .iter()
            .map(|d| d.columns(t, 1).into_owned())
            .collect();
        let noise = nalgebra::DVector::from_element(1, pred.noise[t]);
        let nt = nlpd_from_samples(&col, &noise, &y.columns(t, 1).into_owned())?;
        tasks.push(TaskReport {
            task: t,
            site_id: ids[t].clone(),
            rmse: report.normalized.rmse_per_task[t],
            rmse_original: report.original.rmse_per_task[t],
            f_var: report.normalized.f_var_per_task[t],
            f_var_original: report.original.f_var_per_task[t],
            nlpd: nt.value,
            nlpd_average_log: nt.average_log,
        });
    }
    let out = &cfg.output_dir;
    fs::create_dir_all(out)?;
    let mut w =
        csv::Writer::from_path(out.join("forecast_tasks.csv")).map_err(ggp_core::Error::from)?;
    for t in &tasks {
        w.serialize(t).map_err(ggp_core::Error::from)?;
    }
    w.flush()?;
    let mut w =
        csv::Writer::from_path(out.join("predictions.csv")).map_err(ggp_core::Error::from)?;
    w.write_record(["target_time", "task", "observed", "mean", "variance"])
        .map_err(ggp_core::Error::from)?;
    let mean = data.test.denormalize(&pred.mean);
    let obs = data.test.denormalize(y);
    for i in 0..y.nrows() {
        for (t, s) in scales.iter().enumerate() {
            w.write_record([
                data.test.target_time[i]
                    .format("%Y-%m-%dT%H:%M:%S")
                    .to_string(),
                t.to_string(),
                format!("{:?}", obs[(i, t)]),
                format!("{:?}", mean[(i, t)]),
                format!("{:?}", pred.variance[(i, t)] * s * s),
            ])
            .map_err(ggp_core::Error::from)?;
        }
    }
    w.flush()?;
    let summary = EvaluationSummary {
        report,
        tasks,
        test_rows: y.nrows(),
        samples: cfg.predict.samples,
    };
    write_json(&out.join("evaluation.json"), &summary)?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchmarkEntrySummary {
    pub name: String,
    pub family: String,
    pub inducing: usize,
    pub groups: usize,
    pub factorizations_per_iteration: usize,
    pub stop_reason: StopReason,
    pub report: ForecastReport,
}

/// Runs a budget-matched comparison and writes `comparison.csv`,
/// `significance.csv`, `curves.csv` and `summary.json`.
pub fn cmd_benchmark(cfg: &SuiteConfig) -> Result<BenchmarkResult, CliError> {
    cfg.validate()?;
    let data = load_dataset(&cfg.data, None)?;
    let res = run_benchmark(&cfg.benchmark, &data)?;
    fs::create_dir_all(&cfg.output_dir)?;
    fs::write(cfg.output_dir.join("config.toml"), config::to_toml(cfg)?)?;
    res.write_all(&cfg.output_dir)?;
    let summary: Vec<BenchmarkEntrySummary> = res
        .entries
        .iter()
        .map(|e| BenchmarkEntrySummary {
            name: e.name.clone(),
            family: e.family.to_string(),
            inducing: e.inducing,
            groups: e.budget_groups,
            factorizations_per_iteration: e.factorizations,
            stop_reason: e.log.stop,
            report: e.report.clone(),
        })
        .collect();
    write_json(&cfg.output_dir.join("summary.json"), &summary)?;
    Ok(res)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SitePairCorrelation {
    pub site_a: String,
    pub site_b: String,
    pub distance: f64,
    pub correlation: f64,
}

/// Generates a synthetic data set: `observations.csv`, `sites.csv`,
/// `truth.csv` and `correlation.csv`.
pub fn cmd_synth(cfg: &SynthFile) -> Result<Vec<SitePairCorrelation>, CliError> {
    let (series, truth) = synth_gprn(&cfg.synth)?;
    let out = &cfg.output_dir;
    fs::create_dir_all(out)?;
    write_csv(
        &series,
        &out.join("observations.csv"),
        &out.join("sites.csv"),
    )?;
    truth.write_csv(&out.join("truth.csv"))?;
    fs::write(out.join("config.toml"), config::to_toml(cfg)?)?;
    let pairs: Vec<SitePairCorrelation> = correlation_by_distance(&series)
        .into_iter()
        .map(|(a, b, d, c)| SitePairCorrelation {
            site_a: series[a].id.clone(),
            site_b: series[b].id.clone(),
            distance: d,
            correlation: c,
        })
        .collect();
    let mut w =
        csv::Writer::from_path(out.join("correlation.csv")).map_err(ggp_core::Error::from)?;
    for p in &pairs {
        w.serialize(p).map_err(ggp_core::Error::from)?;
    }
    w.flush()?;
    Ok(pairs)
}
