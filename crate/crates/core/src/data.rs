//! Time-series ingestion, supervised feature construction, normalization and
//! a synthetic spatially correlated GPRN generator.

use chrono::{DateTime, NaiveDateTime, Timelike};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::kernel::{KernelExpr, Points};
use crate::kron::{chol, JitterLadder};

/// Standard deviations below this are replaced by it during normalization.
pub const STD_FLOOR: f64 = 1e-8;

/// One site's series on a uniform time grid; missing slots hold NaN.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSeries {
    pub id: String,
    pub latitude: f64,
    pub longitude: f64,
    pub start: NaiveDateTime,
    pub interval_minutes: i64,
    pub values: Vec<f64>,
}

impl TaskSeries {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn missing(&self) -> Vec<bool> {
        self.values.iter().map(|v| v.is_nan()).collect()
    }

    pub fn timestamp(&self, i: usize) -> NaiveDateTime {
        self.start + chrono::Duration::minutes(self.interval_minutes * i as i64)
    }
}

fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Some(t.naive_utc());
    }
    [
        "%Y-%m-%dT%H:%M:%S",
        "%Y-%m-%dT%H:%M",
        "%Y-%m-%d %H:%M:%S",
        "%Y-%m-%d %H:%M",
    ]
    .iter()
    .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
}

fn gcd(a: i64, b: i64) -> i64 {
    if b == 0 {
        a.abs()
    } else {
        gcd(b, a % b)
    }
}

#[derive(Deserialize)]
struct SiteRow {
    site_id: String,
    latitude: f64,
    longitude: f64,
}

/// Reads `timestamp,site_id,value` observations and a `site_id,latitude,longitude`
/// sites file. Gaps on the uniform grid become missing slots; an empty value
/// field or `NaN` marks a missing reading.
pub fn load_csv(path: &Path, sites_path: &Path) -> Result<Vec<TaskSeries>> {
    let mut sites: Vec<SiteRow> = Vec::new();
    let mut rdr = csv::Reader::from_path(sites_path)?;
    for (i, rec) in rdr.deserialize::<SiteRow>().enumerate() {
        let row = rec.map_err(|e| Error::Load {
            line: i + 2,
            message: format!("sites file: {e}"),
        })?;
        if !(row.latitude.is_finite() && row.longitude.is_finite()) {
            return Err(Error::Load {
                line: i + 2,
                message: "sites file: non-finite coordinate".into(),
            });
        }
        sites.push(row);
    }
    let index: HashMap<String, usize> = sites
        .iter()
        .enumerate()
        .map(|(i, s)| (s.site_id.clone(), i))
        .collect();

    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)?;
    let header = rdr.headers()?.clone();
    let expected = ["timestamp", "site_id", "value"];
    if header.len() != 3 || header.iter().zip(expected).any(|(a, b)| a != b) {
        return Err(Error::Load {
            line: 1,
            message: "expected header `timestamp,site_id,value`".into(),
        });
    }
    let mut obs: Vec<Vec<(NaiveDateTime, f64, usize)>> = vec![Vec::new(); sites.len()];
    let mut any = false;
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Load {
            line,
            message: e.to_string(),
        })?;
        if rec.len() != 3 {
            return Err(Error::Load {
                line,
                message: format!("expected 3 fields, found {}", rec.len()),
            });
        }
        let t = parse_timestamp(&rec[0]).ok_or_else(|| Error::Load {
            line,
            message: format!("invalid ISO-8601 timestamp `{}`", &rec[0]),
        })?;
        let site = *index.get(&rec[1]).ok_or_else(|| Error::Load {
            line,
            message: format!("unknown site `{}`", &rec[1]),
        })?;
        let v = if rec[2].is_empty() || rec[2].eq_ignore_ascii_case("nan") {
            f64::NAN
        } else {
            rec[2].parse::<f64>().map_err(|e| Error::Load {
                line,
                message: format!("invalid value `{}`: {e}", &rec[2]),
            })?
        };
        obs[site].push((t, v, line));
        any = true;
    }
    if !any {
        return Err(Error::Load {
            line: 1,
            message: "file contains no observations".into(),
        });
    }

    let mut out = Vec::new();
    for (site, mut rows) in sites.iter().zip(obs) {
        if rows.is_empty() {
            continue;
        }
        rows.sort_by_key(|r| r.0);
        for w in rows.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(Error::Load {
                    line: w[1].2,
                    message: format!("duplicate timestamp for site `{}`", site.site_id),
                });
            }
        }
        let start = rows[0].0;
        let offsets: Vec<i64> = rows.iter().map(|r| (r.0 - start).num_seconds()).collect();
        let step = offsets.windows(2).map(|w| w[1] - w[0]).fold(0, gcd);
        let step = if step == 0 { 60 } else { step };
        if step % 60 != 0 {
            return Err(Error::Load {
                line: rows[1].2,
                message: "timestamps are not on a whole-minute grid".into(),
            });
        }
        // The grid is the smallest spacing observed; anything else is a gap.
        let min_gap = offsets
            .windows(2)
            .map(|w| w[1] - w[0])
            .min()
            .unwrap_or(step);
        if let Some((k, _)) = offsets.iter().enumerate().find(|(_, o)| *o % min_gap != 0) {
            return Err(Error::Load {
                line: rows[k].2,
                message: format!(
                    "non-uniform timestamp spacing for site `{}` (grid {} min)",
                    site.site_id,
                    min_gap / 60
                ),
            });
        }
        let len = (offsets.last().unwrap() / min_gap) as usize + 1;
        let mut values = vec![f64::NAN; len];
        for (o, r) in offsets.iter().zip(&rows) {
            values[(*o / min_gap) as usize] = r.1;
        }
        out.push(TaskSeries {
            id: site.site_id.clone(),
            latitude: site.latitude,
            longitude: site.longitude,
            start,
            interval_minutes: min_gap / 60,
            values,
        });
    }
    Ok(out)
}

/// Writes series in the `timestamp,site_id,value` schema plus the sites file.
pub fn write_csv(series: &[TaskSeries], path: &Path, sites_path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["timestamp", "site_id", "value"])?;
    for s in series {
        for (i, v) in s.values.iter().enumerate() {
            let ts = s.timestamp(i).format("%Y-%m-%dT%H:%M:%S").to_string();
            let val = if v.is_nan() {
                String::new()
            } else {
                format!("{v:?}")
            };
            w.write_record([ts, s.id.clone(), val])?;
        }
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(sites_path)?;
    w.write_record(["site_id", "latitude", "longitude"])?;
    for s in series {
        w.write_record([
            s.id.clone(),
            format!("{:?}", s.latitude),
            format!("{:?}", s.longitude),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Mean and (floored) standard deviation of one column.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: f64,
    pub std: f64,
}

impl Standardizer {
    pub const IDENTITY: Standardizer = Standardizer {
        mean: 0.0,
        std: 1.0,
    };

    pub fn fit(values: impl Iterator<Item = f64>) -> Self {
        let v: Vec<f64> = values.filter(|x| !x.is_nan()).collect();
        if v.is_empty() {
            return Self::IDENTITY;
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Standardizer {
            mean,
            std: var.sqrt().max(STD_FLOOR),
        }
    }

    pub fn apply(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn invert(&self, v: f64) -> f64 {
        v * self.std + self.mean
    }
}

/// Local time-of-day filter on target timestamps, in minutes after midnight
/// (both ends inclusive).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DayWindow {
    pub start_minute: u32,
    pub end_minute: u32,
}

impl DayWindow {
    /// 7 am to 7 pm.
    pub const DAYLIGHT: DayWindow = DayWindow {
        start_minute: 7 * 60,
        end_minute: 19 * 60,
    };

    pub fn contains(&self, t: &NaiveDateTime) -> bool {
        let m = t.hour() * 60 + t.minute();
        self.start_minute <= m && m <= self.end_minute
    }
}

/// Chronological train/test split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    /// First fraction of rows train, the rest test.
    Fraction(f64),
    /// First `train` rows train, the next `test` rows test.
    Counts { train: usize, test: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupervisedOptions {
    pub horizon: usize,
    pub lags: usize,
    pub day_window: Option<DayWindow>,
    pub split: Split,
}

impl Default for SupervisedOptions {
    fn default() -> Self {
        SupervisedOptions {
            horizon: 3,
            lags: 3,
            day_window: Some(DayWindow::DAYLIGHT),
            split: Split::Fraction(0.6),
        }
    }
}

/// Feature rows `[time, lags(task 0), lags(task 1), ...]` and horizon targets.
#[derive(Clone, Debug, PartialEq)]
pub struct SupervisedSet {
    /// Normalized features; the time column is minutes since the series start.
    pub x: DMatrix<f64>,
    /// Normalized targets, `n x P`.
    pub y: DMatrix<f64>,
    pub feature_stats: Vec<Standardizer>,
    pub target_stats: Vec<Standardizer>,
    /// Grid index of the latest feature for each row (`t`).
    pub feature_index: Vec<usize>,
    /// Grid index of each row's target (`t + horizon`).
    pub target_index: Vec<usize>,
    pub target_time: Vec<NaiveDateTime>,
}

impl SupervisedSet {
    pub fn n_tasks(&self) -> usize {
        self.y.ncols()
    }

    pub fn len(&self) -> usize {
        self.y.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.y.nrows() == 0
    }

    /// Maps normalized targets (or predictions) back to original units.
    pub fn denormalize(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(y.nrows(), y.ncols(), |i, t| {
            self.target_stats[t].invert(y[(i, t)])
        })
    }

    pub fn target_scales(&self) -> Vec<f64> {
        self.target_stats.iter().map(|s| s.std).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["target_time".to_string(), "time".to_string()];
        let lags = (self.x.ncols() - 1) / self.n_tasks().max(1);
        for t in 0..self.n_tasks() {
            for l in 0..lags {
                header.push(format!("task{t}_lag{l}"));
            }
        }
        for t in 0..self.n_tasks() {
            header.push(format!("task{t}_target"));
        }
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut row = vec![self.target_time[i].format("%Y-%m-%dT%H:%M:%S").to_string()];
            row.extend(self.x.row(i).iter().map(|v| format!("{v:?}")));
            row.extend(self.y.row(i).iter().map(|v| format!("{v:?}")));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Builds lagged supervised rows, drops incomplete rows and rows whose target
/// falls outside the day window, splits chronologically and standardizes with
/// training statistics.
pub fn build_supervised(
    series: &[TaskSeries],
    opts: &SupervisedOptions,
) -> Result<(SupervisedSet, SupervisedSet)> {
    if series.is_empty() {
        return Err(Error::Empty("no series".into()));
    }
    if opts.horizon < 1 || opts.lags < 1 {
        return Err(Error::input("horizon and lag count must be at least 1"));
    }
    let interval = series[0].interval_minutes;
    if series.iter().any(|s| s.interval_minutes != interval) {
        return Err(Error::input("series have different sampling intervals"));
    }
    // Align every series on one grid starting at the earliest timestamp.
    let start = series.iter().map(|s| s.start).min().unwrap();
    let mut offsets = Vec::with_capacity(series.len());
    let mut len = 0usize;
    for s in series {
        let off = (s.start - start).num_minutes();
        if off % interval != 0 {
            return Err(Error::input(format!(
                "series `{}` is not on the shared time grid",
                s.id
            )));
        }
        let off = (off / interval) as usize;
        len = len.max(off + s.len());
        offsets.push(off);
    }
    let value = |task: usize, idx: usize| -> f64 {
        let off = offsets[task];
        if idx < off {
            return f64::NAN;
        }
        series[task]
            .values
            .get(idx - off)
            .copied()
            .unwrap_or(f64::NAN)
    };
    let p = series.len();
    let lags = opts.lags;
    let mut rows: Vec<(usize, Vec<f64>, Vec<f64>)> = Vec::new();
    for t in (lags - 1)..len.saturating_sub(opts.horizon) {
        let target_idx = t + opts.horizon;
        let target_time = start + chrono::Duration::minutes(interval * target_idx as i64);
        if let Some(w) = &opts.day_window {
            if !w.contains(&target_time) {
                continue;
            }
        }
        let mut feats = Vec::with_capacity(1 + p * lags);
        feats.push((interval * t as i64) as f64);
        for task in 0..p {
            for l in 0..lags {
                feats.push(value(task, t - l));
            }
        }
        let targets: Vec<f64> = (0..p).map(|task| value(task, target_idx)).collect();
        if feats.iter().chain(&targets).any(|v| v.is_nan()) {
            continue;
        }
        rows.push((t, feats, targets));
    }
    if rows.is_empty() {
        return Err(Error::Empty(
            "no complete supervised rows after filtering".into(),
        ));
    }
    let (n_train, n_test) = match opts.split {
        Split::Fraction(f) => {
            if !(0.0 < f && f < 1.0) {
                return Err(Error::input("split fraction must lie in (0, 1)"));
            }
            let tr = ((rows.len() as f64) * f).round() as usize;
            (tr, rows.len() - tr)
        }
        Split::Counts { train, test } => {
            if train + test > rows.len() {
                return Err(Error::Empty(format!(
                    "requested {train} train + {test} test rows but only {} are available",
                    rows.len()
                )));
            }
            (train, test)
        }
    };
    if n_train == 0 || n_test == 0 {
        return Err(Error::Empty(
            "split leaves an empty train or test set".into(),
        ));
    }
    let d = 1 + p * lags;
    let train_rows = &rows[..n_train];
    let mut feature_stats = vec![Standardizer::IDENTITY];
    for c in 1..d {
        feature_stats.push(Standardizer::fit(train_rows.iter().map(|r| r.1[c])));
    }
    let target_stats: Vec<Standardizer> = (0..p)
        .map(|t| Standardizer::fit(train_rows.iter().map(|r| r.2[t])))
        .collect();
    let make = |chunk: &[(usize, Vec<f64>, Vec<f64>)]| SupervisedSet {
        x: DMatrix::from_fn(chunk.len(), d, |i, c| feature_stats[c].apply(chunk[i].1[c])),
        y: DMatrix::from_fn(chunk.len(), p, |i, t| target_stats[t].apply(chunk[i].2[t])),
        feature_stats: feature_stats.clone(),
        target_stats: target_stats.clone(),
        feature_index: chunk.iter().map(|r| r.0).collect(),
        target_index: chunk.iter().map(|r| r.0 + opts.horizon).collect(),
        target_time: chunk
            .iter()
            .map(|r| start + chrono::Duration::minutes(interval * (r.0 + opts.horizon) as i64))
            .collect(),
    };
    Ok((make(train_rows), make(&rows[n_train..n_train + n_test])))
}

/// z-scored site coordinates, `P x 2` (latitude, longitude).
pub fn normalized_sites(series: &[TaskSeries]) -> DMatrix<f64> {
    let lat = Standardizer::fit(series.iter().map(|s| s.latitude));
    let lon = Standardizer::fit(series.iter().map(|s| s.longitude));
    DMatrix::from_fn(series.len(), 2, |i, c| {
        if c == 0 {
            lat.apply(series[i].latitude)
        } else {
            lon.apply(series[i].longitude)
        }
    })
}

/// Stacks tasks into single-output rows `[time, own lags, site]`, task-major
/// within each original row. Rows with a missing target are kept (NaN).
pub fn pool_tasks(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    sites: &DMatrix<f64>,
    lags: usize,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let p = y.ncols();
    if x.ncols() != 1 + p * lags || sites.nrows() != p || sites.ncols() != 2 {
        return Err(Error::Dimension {
            context: "pooled feature layout",
            expected: 1 + p * lags,
            got: x.ncols(),
        });
    }
    let n = x.nrows();
    let xp = DMatrix::from_fn(n * p, 1 + lags + 2, |r, c| {
        let (i, t) = (r / p, r % p);
        match c {
            0 => x[(i, 0)],
            c if c <= lags => x[(i, 1 + t * lags + (c - 1))],
            c => sites[(t, c - 1 - lags)],
        }
    });
    let yp = DMatrix::from_fn(n * p, 1, |r, _| y[(r / p, r % p)]);
    Ok((xp, yp))
}

/// Inverse of [`pool_tasks`] for a pooled `nP x 1` column.
pub fn unpool(pooled: &DMatrix<f64>, tasks: usize) -> DMatrix<f64> {
    let n = pooled.nrows() / tasks;
    DMatrix::from_fn(n, tasks, |i, t| pooled[(i * tasks + t, 0)])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub tasks: usize,
    pub nodes: usize,
    pub n: usize,
    pub seed: u64,
    pub noise_std: f64,
    pub interval_minutes: i64,
    /// Side of the square the sites are scattered over, in degrees.
    pub extent_degrees: f64,
    /// Explicit site coordinates (latitude, longitude); overrides the random layout.
    pub sites: Option<Vec<[f64; 2]>>,
    /// Lengthscale of the cross-site weight covariance, in z-scored site units.
    pub spatial_lengthscale: f64,
    /// Lengthscale of the slow drift of the (daily periodic) weight functions, in minutes.
    pub weight_lengthscale: f64,
    /// Time lengthscale of the non-periodic part of the node functions, in minutes.
    pub node_lengthscale: f64,
    pub period_minutes: f64,
    /// When set, every weight function equals this constant.
    pub constant_weight: Option<f64>,
    pub start: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            tasks: 4,
            nodes: 4,
            n: 1000,
            seed: 0,
            noise_std: 0.1,
            interval_minutes: 5,
            extent_degrees: 0.3,
            sites: None,
            spatial_lengthscale: 1.0,
            weight_lengthscale: 4320.0,
            node_lengthscale: 120.0,
            period_minutes: 1440.0,
            constant_weight: None,
            start: "2016-03-01T00:00:00".into(),
        }
    }
}

/// Latent functions behind a synthetic data set.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthTruth {
    /// z-scored site coordinates, `P x 2`.
    pub sites: DMatrix<f64>,
    /// `n x Qg`
    pub nodes: DMatrix<f64>,
    /// `weights[l]` is `n x P`: weight of node `l` for every task.
    pub weights: Vec<DMatrix<f64>>,
    /// Noise-free outputs, `n x P`.
    pub signal: DMatrix<f64>,
}

impl SynthTruth {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        let p = self.signal.ncols();
        let q = self.nodes.ncols();
        let mut header = vec!["index".to_string()];
        header.extend((0..q).map(|l| format!("node{l}")));
        for l in 0..q {
            header.extend((0..p).map(|t| format!("w{t}_{l}")));
        }
        header.extend((0..p).map(|t| format!("signal{t}")));
        writeln!(out, "{}", header.join(","))?;
        for i in 0..self.signal.nrows() {
            let mut row = vec![i.to_string()];
            row.extend(self.nodes.row(i).iter().map(|v| format!("{v:?}")));
            for w in &self.weights {
                row.extend(w.row(i).iter().map(|v| format!("{v:?}")));
            }
            row.extend(self.signal.row(i).iter().map(|v| format!("{v:?}")));
            writeln!(out, "{}", row.join(","))?;
        }
        out.flush()?;
        Ok(())
    }
}

fn sample_gp(k: &DMatrix<f64>, rng: &mut ChaCha8Rng, count: usize) -> Result<DMatrix<f64>> {
    let ladder = JitterLadder {
        max_attempts: 8,
        ..JitterLadder::default()
    };
    let l = chol(k, &ladder)?;
    let e = DMatrix::from_fn(k.nrows(), count, |_, _| StandardNormal.sample(rng));
    Ok(l.l() * e)
}

/// Samples `y_p(t) = sum_l w_pl(t) g_l(t) + noise` with periodic-plus-RBF node
/// functions and weight functions whose covariance is an RBF over the task's
/// site and, within a row, over the node's site.
pub fn synth_gprn(cfg: &SynthConfig) -> Result<(Vec<TaskSeries>, SynthTruth)> {
    if cfg.tasks < 1 || cfg.nodes < 1 {
        return Err(Error::input("synth: tasks and nodes must be at least 1"));
    }
    if cfg.n < 50 {
        return Err(Error::input("synth: n must be at least 50"));
    }
    if !(cfg.noise_std >= 0.0) || cfg.interval_minutes < 1 {
        return Err(Error::input(
            "synth: noise must be >= 0 and the interval >= 1 minute",
        ));
    }
    let start = parse_timestamp(&cfg.start)
        .ok_or_else(|| Error::input(format!("synth: invalid start `{}`", cfg.start)))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (p, q, n) = (cfg.tasks, cfg.nodes, cfg.n);
    let coords: Vec<[f64; 2]> = match &cfg.sites {
        Some(s) => {
            if s.len() != p {
                return Err(Error::Dimension {
                    context: "synth sites",
                    expected: p,
                    got: s.len(),
                });
            }
            s.clone()
        }
        None => {
            let u = rand_distr::Uniform::new(0.0, cfg.extent_degrees.max(1e-9)).unwrap();
            (0..p)
                .map(|_| [-34.9 + u.sample(&mut rng), 138.6 + u.sample(&mut rng)])
                .collect()
        }
    };
    let placeholder: Vec<TaskSeries> = coords
        .iter()
        .enumerate()
        .map(|(i, c)| TaskSeries {
            id: format!("site{i}"),
            latitude: c[0],
            longitude: c[1],
            start,
            interval_minutes: cfg.interval_minutes,
            values: Vec::new(),
        })
        .collect();
    let sites = normalized_sites(&placeholder);

    let times = DMatrix::from_fn(n, 1, |i, _| (i as i64 * cfg.interval_minutes) as f64);
    let tp = Points::from_rows(&times);
    let node_k = KernelExpr::periodic(0, cfg.period_minutes, 1.0, 1.0).gram_points(&tp)
        + KernelExpr::rbf_iso(vec![0], cfg.node_lengthscale, 0.25).gram_points(&tp);
    let nodes = sample_gp(&node_k, &mut rng, q)?;

    // Co-located sites share one weight draw.
    let mut uniq: Vec<usize> = Vec::new();
    let mut site_of: Vec<usize> = Vec::with_capacity(p);
    for i in 0..p {
        match uniq.iter().position(|&j| sites.row(j) == sites.row(i)) {
            Some(u) => site_of.push(u),
            None => {
                site_of.push(uniq.len());
                uniq.push(i);
            }
        }
    }
    let us = DMatrix::from_fn(uniq.len(), 2, |i, c| sites[(uniq[i], c)]);
    let ks = KernelExpr::rbf_iso(vec![0, 1], cfg.spatial_lengthscale, 1.0)
        .gram_points(&Points::from_rows(&us));
    // Quasi-periodic weights: a daily pattern that drifts slowly.
    let kt = KernelExpr::product(vec![
        KernelExpr::periodic(0, cfg.period_minutes, 1.0, 1.0),
        KernelExpr::rbf_iso(vec![0], cfg.weight_lengthscale, 1.0),
    ])
    .gram_points(&tp);
    let ladder = JitterLadder {
        max_attempts: 8,
        ..JitterLadder::default()
    };
    let ls = chol(&ks, &ladder)?;
    let lt = chol(&kt, &ladder)?;
    // Node l sits at site l (when it exists), so weights within a row are also
    // smoothed over node locations; extra nodes are uncorrelated.
    let kn = DMatrix::from_fn(q, q, |a, b| {
        if a < p && b < p {
            ks[(site_of[a], site_of[b])]
        } else if a == b {
            1.0
        } else {
            0.0
        }
    });
    let ln = chol(&kn, &ladder)?;
    let weights: Vec<DMatrix<f64>> = match cfg.constant_weight {
        Some(c) => vec![DMatrix::from_element(n, p, c); q],
        None => {
            let u = uniq.len();
            let e = DMatrix::from_fn(n, u * q, |_, _| StandardNormal.sample(&mut rng));
            // Cov(w_pl(t), w_p'l'(t')) = K_s[p,p'] K_n[l,l'] K_t[t,t'], sampled as
            // L_t E (L_s (x) L_n)ᵀ with columns site-major.
            let w = lt.l() * e * ls.l().kronecker(ln.l()).transpose();
            (0..q)
                .map(|l| DMatrix::from_fn(n, p, |i, t| w[(i, site_of[t] * q + l)]))
                .collect()
        }
    };
    let signal = DMatrix::from_fn(n, p, |i, t| {
        (0..q).map(|l| weights[l][(i, t)] * nodes[(i, l)]).sum()
    });
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::input(e.to_string()))?;
    let series = placeholder
        .into_iter()
        .enumerate()
        .map(|(t, mut s)| {
            s.values = (0..n)
                .map(|i| {
                    let e = if cfg.noise_std > 0.0 {
                        noise.sample(&mut rng)
                    } else {
                        0.0
                    };
                    signal[(i, t)] + e
                })
                .collect();
            s
        })
        .collect();
    Ok((
        series,
        SynthTruth {
            sites,
            nodes,
            weights,
            signal,
        },
    ))
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let pairs: Vec<(f64, f64)> = a
        .iter()
        .zip(b)
        .filter(|(x, y)| !x.is_nan() && !y.is_nan())
        .map(|(x, y)| (*x, *y))
        .collect();
    let n = pairs.len() as f64;
    let ma = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let mb = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in &pairs {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    sab / (saa * sbb).sqrt()
}

/// Distance (in z-scored site units) and sample correlation for every site pair.
pub fn correlation_by_distance(series: &[TaskSeries]) -> Vec<(usize, usize, f64, f64)> {
    let sites = normalized_sites(series);
    let mut out = Vec::new();
    for i in 0..series.len() {
        for j in (i + 1)..series.len() {
            let d = (sites.row(i) - sites.row(j)).norm();
            out.push((i, j, d, pearson(&series[i].values, &series[j].values)));
        }
    }
    out
}

/// Absolute correlation of the weight functions between two sites, pooled over
/// nodes.
pub fn weight_correlation(truth: &SynthTruth, a: usize, b: usize) -> f64 {
    let wa: Vec<f64> = truth
        .weights
        .iter()
        .flat_map(|w| w.column(a).iter().copied().collect::<Vec<_>>())
        .collect();
    let wb: Vec<f64> = truth
        .weights
        .iter()
        .flat_map(|w| w.column(b).iter().copied().collect::<Vec<_>>())
        .collect();
    pearson(&wa, &wb)
}

/// Target-space vector helper used by reports: per-task standard deviations.
pub fn target_scale_vector(set: &SupervisedSet) -> DVector<f64> {
    DVector::from_vec(set.target_scales())
}
