//! Budget-matched model comparisons: fitting, forecasting and reporting.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use crate::data::{
    normalized_sites, pool_tasks, unpool, SupervisedOptions, SupervisedSet, TaskSeries,
};
use crate::error::{Error, Result};
use crate::model::{
    build_benchmark, build_custom_grouping, Family, GprnIndex, GroupingScheme, KernelDefaults,
    Likelihood, Model, ModelAssembly,
};
use crate::optim::{fit, EpochHook, TrainConfig, TrainingLog};
use crate::predict::{
    assign_ranks, mc_significance, nlpd_from_samples, predict, ForecastReport, Metric, Prediction,
    RowScores, Significance,
};
use crate::vi::{MoGPosterior, PosteriorKind};

/// Largest `m` with `m^3 <= v`.
pub fn icbrt(v: u128) -> u128 {
    let mut m = (v as f64).cbrt() as u128;
    while m * m * m > v {
        m -= 1;
    }
    while (m + 1) * (m + 1) * (m + 1) <= v {
        m += 1;
    }
    m
}

/// Inducing count for per-iteration budget `B` over `r` groups:
/// `m = floor((B / r)^(1/3))`, so `r m^3 <= B < r (m+1)^3`.
pub fn budget_inducing(budget: u128, r: usize, max_group: usize) -> Result<usize> {
    if r == 0 {
        return Err(Error::input("budget rule needs at least one group"));
    }
    let m = icbrt(budget / r as u128);
    if m == 0 || m < max_group as u128 {
        return Err(Error::input(format!(
            "budget {budget} is too small: m = {m} but the largest group has {max_group} members"
        )));
    }
    Ok(m as usize)
}

/// Train/test supervised sets plus normalized site coordinates.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: SupervisedSet,
    pub test: SupervisedSet,
    pub sites: DMatrix<f64>,
    pub lags: usize,
}

impl Dataset {
    pub fn from_series(series: &[TaskSeries], opts: &SupervisedOptions) -> Result<Self> {
        let (train, test) = crate::data::build_supervised(series, opts)?;
        Ok(Dataset {
            train,
            test,
            sites: normalized_sites(series),
            lags: opts.lags,
        })
    }

    pub fn n_tasks(&self) -> usize {
        self.train.n_tasks()
    }

    fn inputs(&self, set: &SupervisedSet, pooled: bool) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        if pooled {
            pool_tasks(&set.x, &set.y, &self.sites, self.lags)
        } else {
            Ok((set.x.clone(), set.y.clone()))
        }
    }
}

fn default_components() -> usize {
    1
}

/// One model in a comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelEntry {
    pub name: String,
    pub family: Family,
    #[serde(default = "default_scheme")]
    pub scheme: GroupingScheme,
    #[serde(default = "default_posterior")]
    pub posterior: PosteriorKind,
    #[serde(default = "default_components")]
    pub components: usize,
    /// Node count; defaults to the task count.
    #[serde(default)]
    pub nodes: Option<usize>,
    /// Fixed inducing count; when absent it is derived from the budget.
    #[serde(default)]
    pub inducing: Option<usize>,
    /// Explicit GGP groups as lists of `[row, col]` weight positions;
    /// overrides `scheme`.
    #[serde(default)]
    pub custom_groups: Option<Vec<Vec<[usize; 2]>>>,
}

fn default_scheme() -> GroupingScheme {
    GroupingScheme::SolarRows
}

fn default_posterior() -> PosteriorKind {
    PosteriorKind::Diagonal
}

impl ModelEntry {
    pub fn new(name: &str, family: Family) -> Self {
        ModelEntry {
            name: name.to_string(),
            family,
            scheme: default_scheme(),
            posterior: default_posterior(),
            components: 1,
            nodes: None,
            inducing: None,
            custom_groups: None,
        }
    }

    pub fn assemble(
        &self,
        tasks: usize,
        sites: &DMatrix<f64>,
        kd: &KernelDefaults,
    ) -> Result<ModelAssembly> {
        if self.components == 0 {
            return Err(Error::input(format!(
                "{}: components must be positive",
                self.name
            )));
        }
        let nodes = self.nodes.unwrap_or(tasks);
        match &self.custom_groups {
            None => build_benchmark(self.family, tasks, nodes, self.scheme, sites, kd),
            Some(groups) => {
                if self.family != Family::Ggp || nodes != tasks {
                    return Err(Error::input(format!(
                        "{}: custom groups need the ggp family with Qg = P",
                        self.name
                    )));
                }
                let groups = build_custom_grouping(tasks, groups, sites, kd)?;
                let r = groups.len();
                let lik = Likelihood::Gprn(GprnIndex::new(tasks, tasks));
                Ok(ModelAssembly {
                    family: Family::Ggp,
                    model: Model::new(groups, lik, tasks)?,
                    pooled: false,
                    budget_groups: r,
                })
            }
        }
    }
}

/// A trained model with everything needed to forecast.
#[derive(Clone, Debug)]
pub struct Fitted {
    pub entry: ModelEntry,
    pub assembly: ModelAssembly,
    pub posterior: MoGPosterior,
    pub inducing: usize,
    pub log: TrainingLog,
}

/// Builds and initializes a model and posterior for `entry` on `data`.
/// `budget` is used only when the entry has no fixed inducing count.
pub fn initialize(
    entry: &ModelEntry,
    data: &Dataset,
    budget: Option<u128>,
    kd: &KernelDefaults,
    seed: u64,
) -> Result<(ModelAssembly, MoGPosterior, usize)> {
    let mut asm = entry.assemble(data.n_tasks(), &data.sites, kd)?;
    let (x, _) = data.inputs(&data.train, asm.pooled)?;
    let m = match (entry.inducing, budget) {
        (Some(m), _) => m,
        (None, Some(b)) => budget_inducing(b, asm.budget_groups, asm.model.max_group_size())?,
        (None, None) => {
            return Err(Error::input(format!(
                "{}: neither an inducing count nor a budget was given",
                entry.name
            )))
        }
    };
    let m = m.min(x.nrows());
    asm.model.init_inducing(&x, m, seed)?;
    let q = MoGPosterior::init(&asm.model, entry.components, entry.posterior)?;
    Ok((asm, q, m))
}

/// Forecasts the test set in the task layout (`n x P`), unpooling MTG output.
pub fn forecast(
    asm: &ModelAssembly,
    q: &MoGPosterior,
    data: &Dataset,
    set: &SupervisedSet,
    samples: usize,
    seed: u64,
) -> Result<Prediction> {
    let (x, _) = data.inputs(set, asm.pooled)?;
    let pred = predict(&asm.model, q, &x, samples, seed)?;
    if !asm.pooled {
        return Ok(pred);
    }
    let p = data.n_tasks();
    let n = set.len();
    let s = samples;
    let draws = (0..n)
        .map(|i| DMatrix::from_fn(s, p, |k, t| pred.samples[i * p + t][(k, 0)]))
        .collect();
    Ok(Prediction {
        mean: unpool(&pred.mean, p),
        variance: unpool(&pred.variance, p),
        samples: draws,
        noise: DVector::from_element(p, pred.noise[0]),
    })
}

/// Fits one entry. With `curve` set, test RMSE and NLPD are recorded every
/// `curve.0` epochs using `curve.1` predictive samples.
pub fn train_entry(
    entry: &ModelEntry,
    data: &Dataset,
    budget: Option<u128>,
    kd: &KernelDefaults,
    train: &TrainConfig,
    curve: Option<(usize, usize)>,
) -> Result<Fitted> {
    let (mut asm, mut q, m) = initialize(entry, data, budget, kd, train.seed)?;
    let (x, y) = data.inputs(&data.train, asm.pooled)?;
    let pooled = asm.pooled;
    let family = asm.family;
    let budget_groups = asm.budget_groups;
    let log = match curve {
        Some((every, samples)) if every > 0 => {
            let mut hook = |epoch: usize, model: &Model, post: &MoGPosterior| {
                if !epoch.is_multiple_of(every) {
                    return Ok(Vec::new());
                }
                let snapshot = ModelAssembly {
                    family,
                    model: model.clone(),
                    pooled,
                    budget_groups,
                };
                let pred = forecast(
                    &snapshot,
                    post,
                    data,
                    &data.test,
                    samples,
                    train.seed ^ 0xC0FFEE,
                )?;
                let rows = RowScores::from_prediction(&pred, &data.test.y)?;
                let nl = nlpd_from_samples(&pred.samples, &pred.noise, &data.test.y)?;
                let se: f64 = rows.sq_err.iter().sum();
                let cnt: usize = rows.observed.iter().sum();
                Ok(vec![
                    ("rmse".to_string(), (se / cnt.max(1) as f64).sqrt()),
                    ("nlpd".to_string(), nl.value),
                ])
            };
            let hook: &mut EpochHook<'_> = &mut hook;
            fit(&mut asm.model, &mut q, &x, &y, train, Some(hook))?
        }
        _ => fit(&mut asm.model, &mut q, &x, &y, train, None)?,
    };
    Ok(Fitted {
        entry: entry.clone(),
        assembly: asm,
        posterior: q,
        inducing: m,
        log,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub entries: Vec<ModelEntry>,
    /// Per-iteration budget `B` in units of `m^3`.
    pub budget: u64,
    pub kernel: KernelDefaults,
    pub train: TrainConfig,
    pub predict_samples: usize,
    pub significance_resamples: usize,
    pub seed: u64,
    /// Run entries concurrently; disables the timed curves.
    pub parallel: bool,
    /// Record test metrics every this many epochs (0 disables).
    pub curve_every: usize,
    pub curve_samples: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            entries: Vec::new(),
            budget: 20 * 200u64.pow(3),
            kernel: KernelDefaults::default(),
            train: TrainConfig::default(),
            predict_samples: 200,
            significance_resamples: 1000,
            seed: 0,
            parallel: false,
            curve_every: 10,
            curve_samples: 20,
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.entries.len() < 2 {
            return Err(Error::input(
                "benchmark.entries: at least two models are required",
            ));
        }
        for (i, e) in self.entries.iter().enumerate() {
            if self.entries[..i].iter().any(|o| o.name == e.name) {
                return Err(Error::input(format!(
                    "benchmark.entries: duplicate name `{}`",
                    e.name
                )));
            }
        }
        if self.predict_samples < 2 {
            return Err(Error::input(
                "benchmark.predict_samples: must be at least 2",
            ));
        }
        if self.significance_resamples < 100 {
            return Err(Error::input(
                "benchmark.significance_resamples: must be at least 100",
            ));
        }
        if self.budget == 0 {
            return Err(Error::input("benchmark.budget: must be positive"));
        }
        self.train.validate()
    }
}

/// Outcome of one benchmark entry.
#[derive(Clone, Debug)]
pub struct EntryResult {
    pub name: String,
    pub family: Family,
    pub inducing: usize,
    pub budget_groups: usize,
    pub factorizations: usize,
    pub report: ForecastReport,
    pub scores: RowScores,
    pub log: TrainingLog,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairSignificance {
    pub a: String,
    pub b: String,
    pub rmse: Significance,
    pub nlpd: Significance,
}

#[derive(Clone, Debug)]
pub struct BenchmarkResult {
    pub entries: Vec<EntryResult>,
    pub significance: Vec<PairSignificance>,
}

fn run_one(
    cfg: &BenchmarkConfig,
    entry: &ModelEntry,
    data: &Dataset,
    curves: bool,
) -> Result<EntryResult> {
    let curve = curves.then_some((cfg.curve_every, cfg.curve_samples.max(2)));
    let fitted = train_entry(
        entry,
        data,
        Some(cfg.budget as u128),
        &cfg.kernel,
        &cfg.train,
        curve,
    )?;
    let pred = forecast(
        &fitted.assembly,
        &fitted.posterior,
        data,
        &data.test,
        cfg.predict_samples,
        cfg.seed,
    )?;
    let nl = nlpd_from_samples(&pred.samples, &pred.noise, &data.test.y)?;
    let report = ForecastReport::build(
        &entry.name,
        &pred,
        &data.test.y,
        &data.test.target_scales(),
        nl,
    )?;
    let scores = RowScores::from_prediction(&pred, &data.test.y)?;
    Ok(EntryResult {
        name: entry.name.clone(),
        family: entry.family,
        inducing: fitted.inducing,
        budget_groups: fitted.assembly.budget_groups,
        factorizations: fitted.assembly.model.inducing_factorizations(),
        report,
        scores,
        log: fitted.log,
    })
}

/// Fits every entry, ranks them and runs pairwise significance tests.
pub fn run_benchmark(cfg: &BenchmarkConfig, data: &Dataset) -> Result<BenchmarkResult> {
    cfg.validate()?;
    let results: Vec<Result<EntryResult>> = if cfg.parallel {
        cfg.entries
            .par_iter()
            .map(|e| run_one(cfg, e, data, false))
            .collect()
    } else {
        cfg.entries
            .iter()
            .map(|e| run_one(cfg, e, data, cfg.curve_every > 0))
            .collect()
    };
    let mut entries = results.into_iter().collect::<Result<Vec<_>>>()?;
    let mut reports: Vec<ForecastReport> = entries.iter().map(|e| e.report.clone()).collect();
    assign_ranks(&mut reports)?;
    for (e, r) in entries.iter_mut().zip(reports) {
        e.report = r;
    }
    let mut significance = Vec::new();
    for i in 0..entries.len() {
        for j in (i + 1)..entries.len() {
            let (a, b) = (&entries[i], &entries[j]);
            let seed = cfg.seed.wrapping_add((i * entries.len() + j) as u64);
            significance.push(PairSignificance {
                a: a.name.clone(),
                b: b.name.clone(),
                rmse: mc_significance(
                    &a.scores,
                    &b.scores,
                    Metric::Rmse,
                    cfg.significance_resamples,
                    seed,
                )?,
                nlpd: mc_significance(
                    &a.scores,
                    &b.scores,
                    Metric::Nlpd,
                    cfg.significance_resamples,
                    seed,
                )?,
            });
        }
    }
    Ok(BenchmarkResult {
        entries,
        significance,
    })
}

impl BenchmarkResult {
    /// One row per model: accuracy, NLPD, F-VAR and ranking.
    pub fn write_table<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "model",
            "family",
            "m",
            "groups",
            "rmse",
            "nlpd",
            "nlpd_se",
            "nlpd_average_log",
            "f_var",
            "m_rank",
            "rmse_original",
            "nlpd_original",
            "f_var_original",
            "epochs",
            "stop",
            "train_seconds",
        ])?;
        for e in &self.entries {
            let r = &e.report;
            w.write_record([
                e.name.clone(),
                e.family.to_string(),
                e.inducing.to_string(),
                e.budget_groups.to_string(),
                format!("{:.6}", r.normalized.rmse),
                format!("{:.6}", r.nlpd.value),
                format!("{:.6}", r.nlpd.std_error),
                format!("{:.6}", r.nlpd.average_log),
                format!("{:.6}", r.normalized.f_var),
                r.m_rank.map(|v| format!("{v}")).unwrap_or_default(),
                format!("{:.6}", r.original.rmse),
                format!("{:.6}", r.nlpd_original),
                format!("{:.6}", r.original.f_var),
                e.log.records.len().to_string(),
                e.log.stop.to_string(),
                format!("{:.3}", e.log.wall_seconds()),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_significance<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "model_a",
            "model_b",
            "metric",
            "difference",
            "lower",
            "upper",
            "significant",
        ])?;
        for s in &self.significance {
            for (name, v) in [("rmse", &s.rmse), ("nlpd", &s.nlpd)] {
                w.write_record([
                    s.a.clone(),
                    s.b.clone(),
                    name.to_string(),
                    format!("{:.6}", v.difference),
                    format!("{:.6}", v.lower),
                    format!("{:.6}", v.upper),
                    v.significant.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Per-epoch time and metric curves; only epochs carrying metrics appear.
    pub fn write_curves<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["model", "epoch", "elapsed_seconds", "elbo", "rmse", "nlpd"])?;
        for e in &self.entries {
            for r in &e.log.records {
                let get = |k: &str| r.metrics.iter().find(|(n, _)| n == k).map(|(_, v)| *v);
                if let (Some(rm), Some(nl)) = (get("rmse"), get("nlpd")) {
                    w.write_record([
                        e.name.clone(),
                        r.epoch.to_string(),
                        format!("{:.6}", r.elapsed_seconds),
                        format!("{:.6}", r.terms.total),
                        format!("{rm:.6}"),
                        format!("{nl:.6}"),
                    ])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_all(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.write_table(std::fs::File::create(dir.join("comparison.csv"))?)?;
        self.write_significance(std::fs::File::create(dir.join("significance.csv"))?)?;
        self.write_curves(std::fs::File::create(dir.join("curves.csv"))?)?;
        Ok(())
    }
}

/// Seconds elapsed since `start`, for callers timing whole runs.
pub fn seconds_since(start: Instant) -> f64 {
    start.elapsed().as_secs_f64()
}
