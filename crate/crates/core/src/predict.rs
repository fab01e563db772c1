//! Predictive sampling, forecast metrics, ranking and the bootstrap
//! significance test.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kron::{chol, JitterLadder};
use crate::model::{ln_normal, Model};
use crate::vi::{marginal_qfn, MoGPosterior};

/// Monte Carlo predictions at a set of inputs.
#[derive(Clone, Debug)]
pub struct Prediction {
    /// `n x P` predictive means.
    pub mean: DMatrix<f64>,
    /// `n x P` sample variance of the noise-free outputs plus the noise variance.
    pub variance: DMatrix<f64>,
    /// Per point, an `S x P` matrix of noise-free output draws.
    pub samples: Vec<DMatrix<f64>>,
    /// Noise variances used for the predictive densities.
    pub noise: DVector<f64>,
}

fn pick_component(pi: &DVector<f64>, u: f64) -> usize {
    let mut c = 0.0;
    for (k, p) in pi.iter().enumerate() {
        c += p;
        if u < c {
            return k;
        }
    }
    pi.len() - 1
}

fn draw_outputs(
    model: &Model,
    q: &MoGPosterior,
    x: &DMatrix<f64>,
    samples: usize,
    seed: u64,
) -> Result<Vec<DMatrix<f64>>> {
    if samples == 0 {
        return Err(Error::input("prediction needs at least one sample"));
    }
    let marg = marginal_qfn(model, q, x)?;
    let pi = q.weights();
    let p = model.n_tasks();
    let ladder = JitterLadder::exact_first();
    marg.into_par_iter()
        .enumerate()
        .map(|(i, per_k)| {
            let facs = per_k
                .iter()
                .map(|groups| {
                    groups
                        .iter()
                        .map(|g| chol(&g.cov, &ladder))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut f = vec![0.0; model.n_latent];
            let mut out = vec![0.0; p];
            let mut draws = DMatrix::zeros(samples, p);
            for s in 0..samples {
                let k = if pi.len() == 1 {
                    0
                } else {
                    pick_component(&pi, rng.random())
                };
                for (r, g) in model.groups.iter().enumerate() {
                    let eps = DVector::from_fn(g.size(), |_, _| StandardNormal.sample(&mut rng));
                    let v = facs[k][r].l() * eps + &per_k[k][r].mean;
                    for (j, &member) in g.members.iter().enumerate() {
                        f[member] = v[j];
                    }
                }
                model.likelihood.task_means(&f, &mut out);
                draws.row_mut(s).copy_from_slice(&out);
            }
            Ok(draws)
        })
        .collect()
}

/// Draws outputs jointly per component and summarizes them; `samples >= 2`.
pub fn predict(
    model: &Model,
    q: &MoGPosterior,
    x: &DMatrix<f64>,
    samples: usize,
    seed: u64,
) -> Result<Prediction> {
    if samples < 2 {
        return Err(Error::input(
            "predictive variance needs at least two samples",
        ));
    }
    let draws = draw_outputs(model, q, x, samples, seed)?;
    let noise = model.noise.variances();
    let p = model.n_tasks();
    let n = x.nrows();
    let mut mean = DMatrix::zeros(n, p);
    let mut variance = DMatrix::zeros(n, p);
    for (i, d) in draws.iter().enumerate() {
        for t in 0..p {
            let col = d.column(t);
            let mu = col.mean();
            let var = col.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (samples - 1) as f64;
            mean[(i, t)] = mu;
            variance[(i, t)] = var + noise[t];
        }
    }
    Ok(Prediction {
        mean,
        variance,
        samples: draws,
        noise,
    })
}

/// Monte Carlo NLPD with its standard error and the average-log variant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NlpdEstimate {
    /// Mean over observed entries of `-log (1/S) sum_s N(y; f_s, noise)`.
    pub value: f64,
    /// Delta-method Monte Carlo standard error of `value`.
    pub std_error: f64,
    /// Mean over observed entries of `-(1/S) sum_s log N(y; f_s, noise)`.
    pub average_log: f64,
    pub count: usize,
}

/// Scores existing output draws against targets; NaN targets are skipped.
pub fn nlpd_from_samples(
    samples: &[DMatrix<f64>],
    noise: &DVector<f64>,
    y: &DMatrix<f64>,
) -> Result<NlpdEstimate> {
    if samples.len() != y.nrows() {
        return Err(Error::Dimension {
            context: "nlpd rows",
            expected: y.nrows(),
            got: samples.len(),
        });
    }
    let mut sum = 0.0;
    let mut var_sum = 0.0;
    let mut avg = 0.0;
    let mut count = 0usize;
    for (i, d) in samples.iter().enumerate() {
        let s = d.nrows() as f64;
        for t in 0..y.ncols() {
            let yt = y[(i, t)];
            if yt.is_nan() {
                continue;
            }
            let lps: Vec<f64> = d
                .column(t)
                .iter()
                .map(|f| ln_normal(yt, *f, noise[t]))
                .collect();
            let mx = lps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            // Densities rescaled by exp(-mx) keep the ratio var / mean^2 exact.
            let w: Vec<f64> = lps.iter().map(|l| (l - mx).exp()).collect();
            let mean_w = w.iter().sum::<f64>() / s;
            sum -= mx + mean_w.ln();
            if d.nrows() > 1 {
                let var_w = w.iter().map(|v| (v - mean_w).powi(2)).sum::<f64>() / (s - 1.0);
                var_sum += var_w / (s * mean_w * mean_w);
            }
            avg -= lps.iter().sum::<f64>() / s;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Empty("no observed test targets".into()));
    }
    let c = count as f64;
    Ok(NlpdEstimate {
        value: sum / c,
        std_error: var_sum.sqrt() / c,
        average_log: avg / c,
        count,
    })
}

/// Monte Carlo negative log predictive density.
pub fn nlpd(
    model: &Model,
    q: &MoGPosterior,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    samples: usize,
    seed: u64,
) -> Result<NlpdEstimate> {
    if y.nrows() != x.nrows() || y.ncols() != model.n_tasks() {
        return Err(Error::Dimension {
            context: "nlpd targets",
            expected: x.nrows() * model.n_tasks(),
            got: y.len(),
        });
    }
    let draws = draw_outputs(model, q, x, samples, seed)?;
    nlpd_from_samples(&draws, &model.noise.variances(), y)
}

/// Point metrics for one prediction set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointMetrics {
    pub rmse: f64,
    pub f_var: f64,
    pub rmse_per_task: Vec<f64>,
    pub f_var_per_task: Vec<f64>,
}

/// RMSE over observed entries and mean predictive variance over all entries.
pub fn metrics(
    mean: &DMatrix<f64>,
    variance: &DMatrix<f64>,
    y: &DMatrix<f64>,
) -> Result<PointMetrics> {
    if mean.shape() != y.shape() || variance.shape() != y.shape() {
        return Err(Error::Dimension {
            context: "metrics shapes",
            expected: y.len(),
            got: mean.len(),
        });
    }
    if y.is_empty() {
        return Err(Error::Empty("empty test set".into()));
    }
    let p = y.ncols();
    let mut se = vec![0.0; p];
    let mut cnt = vec![0usize; p];
    for i in 0..y.nrows() {
        for t in 0..p {
            if !y[(i, t)].is_nan() {
                se[t] += (mean[(i, t)] - y[(i, t)]).powi(2);
                cnt[t] += 1;
            }
        }
    }
    let total: usize = cnt.iter().sum();
    if total == 0 {
        return Err(Error::Empty("no observed test targets".into()));
    }
    let rmse = (se.iter().sum::<f64>() / total as f64).sqrt();
    let rmse_per_task = se
        .iter()
        .zip(&cnt)
        .map(|(s, c)| {
            if *c == 0 {
                f64::NAN
            } else {
                (s / *c as f64).sqrt()
            }
        })
        .collect();
    let f_var_per_task: Vec<f64> = (0..p).map(|t| variance.column(t).mean()).collect();
    Ok(PointMetrics {
        rmse,
        f_var: variance.mean(),
        rmse_per_task,
        f_var_per_task,
    })
}

/// Ascending ranks with ties sharing their average rank (1-based).
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|a, b| values[*a].total_cmp(&values[*b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[idx[k]] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Mean of each model's RMSE rank and NLPD rank.
pub fn m_rank(rmse: &[f64], nlpd: &[f64]) -> Result<Vec<f64>> {
    if rmse.len() != nlpd.len() {
        return Err(Error::Dimension {
            context: "m_rank columns",
            expected: rmse.len(),
            got: nlpd.len(),
        });
    }
    if rmse.len() < 2 {
        return Err(Error::input("ranking needs at least two models"));
    }
    let a = average_ranks(rmse);
    let b = average_ranks(nlpd);
    Ok(a.iter().zip(&b).map(|(x, y)| (x + y) / 2.0).collect())
}

/// Metric compared by the significance test.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Rmse,
    Nlpd,
}

/// Per-row scores that a metric aggregates; NaN targets are dropped.
#[derive(Clone, Debug)]
pub struct RowScores {
    /// Squared error summed over observed tasks, per row.
    pub sq_err: Vec<f64>,
    /// Negative log predictive density summed over observed tasks, per row.
    pub nlpd: Vec<f64>,
    pub observed: Vec<usize>,
}

impl RowScores {
    pub fn from_prediction(pred: &Prediction, y: &DMatrix<f64>) -> Result<Self> {
        if pred.mean.shape() != y.shape() {
            return Err(Error::Dimension {
                context: "row scores",
                expected: y.len(),
                got: pred.mean.len(),
            });
        }
        let mut sq_err = Vec::with_capacity(y.nrows());
        let mut nl = Vec::with_capacity(y.nrows());
        let mut observed = Vec::with_capacity(y.nrows());
        for i in 0..y.nrows() {
            let row = y.row(i).into_owned();
            let one = DMatrix::from_row_slice(1, y.ncols(), row.as_slice());
            let mut se = 0.0;
            let mut c = 0;
            for t in 0..y.ncols() {
                if !row[t].is_nan() {
                    se += (pred.mean[(i, t)] - row[t]).powi(2);
                    c += 1;
                }
            }
            let n = if c > 0 {
                nlpd_from_samples(&pred.samples[i..i + 1], &pred.noise, &one)?.value * c as f64
            } else {
                0.0
            };
            sq_err.push(se);
            nl.push(n);
            observed.push(c);
        }
        Ok(RowScores {
            sq_err,
            nlpd: nl,
            observed,
        })
    }

    fn metric_on(&self, rows: impl Iterator<Item = usize>, metric: Metric) -> f64 {
        let mut num = 0.0;
        let mut den = 0usize;
        for i in rows {
            num += match metric {
                Metric::Rmse => self.sq_err[i],
                Metric::Nlpd => self.nlpd[i],
            };
            den += self.observed[i];
        }
        let m = num / den.max(1) as f64;
        match metric {
            Metric::Rmse => m.sqrt(),
            Metric::Nlpd => m,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Significance {
    /// Metric(a) - metric(b) on the full test set.
    pub difference: f64,
    pub lower: f64,
    pub upper: f64,
    pub significant: bool,
}

/// Empirical percentile with linear interpolation between order statistics.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Bootstrap test of the metric difference between two models: test rows are
/// resampled with replacement `resamples` times and the difference is
/// significant when zero falls outside the 2.5% / 97.5% percentiles.
pub fn mc_significance(
    a: &RowScores,
    b: &RowScores,
    metric: Metric,
    resamples: usize,
    seed: u64,
) -> Result<Significance> {
    if resamples < 100 {
        return Err(Error::input(
            "significance test needs at least 100 resamples",
        ));
    }
    let n = a.sq_err.len();
    if n == 0 || b.sq_err.len() != n || a.observed != b.observed {
        return Err(Error::input(
            "significance test needs aligned, non-empty test sets",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut diffs = Vec::with_capacity(resamples);
    let mut rows = vec![0usize; n];
    for _ in 0..resamples {
        for r in rows.iter_mut() {
            *r = rng.random_range(0..n);
        }
        let da = a.metric_on(rows.iter().copied(), metric);
        let db = b.metric_on(rows.iter().copied(), metric);
        diffs.push(da - db);
    }
    diffs.sort_by(f64::total_cmp);
    let lower = percentile(&diffs, 0.025);
    let upper = percentile(&diffs, 0.975);
    Ok(Significance {
        difference: a.metric_on(0..n, metric) - b.metric_on(0..n, metric),
        lower,
        upper,
        significant: !(lower <= 0.0 && 0.0 <= upper),
    })
}

/// Forecast summary for one model in normalized and original target units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastReport {
    pub model: String,
    pub normalized: PointMetrics,
    pub original: PointMetrics,
    pub nlpd: NlpdEstimate,
    /// NLPD in original units: the normalized value plus the mean log target scale.
    pub nlpd_original: f64,
    pub m_rank: Option<f64>,
}

impl ForecastReport {
    /// Builds the report from a prediction on normalized targets; `scale`
    /// holds the per-task target standard deviations.
    pub fn build(
        name: &str,
        pred: &Prediction,
        y: &DMatrix<f64>,
        scale: &[f64],
        nlpd: NlpdEstimate,
    ) -> Result<Self> {
        let normalized = metrics(&pred.mean, &pred.variance, y)?;
        if scale.len() != y.ncols() {
            return Err(Error::Dimension {
                context: "target scales",
                expected: y.ncols(),
                got: scale.len(),
            });
        }
        let mut se = 0.0;
        let mut cnt = 0usize;
        let mut log_scale = 0.0;
        for i in 0..y.nrows() {
            for (t, s) in scale.iter().enumerate() {
                if !y[(i, t)].is_nan() {
                    se += ((pred.mean[(i, t)] - y[(i, t)]) * s).powi(2);
                    cnt += 1;
                    log_scale += s.ln();
                }
            }
        }
        let fv: Vec<f64> = normalized
            .f_var_per_task
            .iter()
            .zip(scale)
            .map(|(v, s)| v * s * s)
            .collect();
        let original = PointMetrics {
            rmse: (se / cnt.max(1) as f64).sqrt(),
            f_var: fv.iter().sum::<f64>() / fv.len() as f64,
            rmse_per_task: normalized
                .rmse_per_task
                .iter()
                .zip(scale)
                .map(|(r, s)| r * s)
                .collect(),
            f_var_per_task: fv,
        };
        Ok(ForecastReport {
            model: name.to_string(),
            normalized,
            original,
            nlpd_original: nlpd.value + log_scale / cnt.max(1) as f64,
            nlpd,
            m_rank: None,
        })
    }
}

/// Fills `m_rank` across reports using normalized RMSE and NLPD.
pub fn assign_ranks(reports: &mut [ForecastReport]) -> Result<()> {
    let r: Vec<f64> = reports.iter().map(|x| x.normalized.rmse).collect();
    let n: Vec<f64> = reports.iter().map(|x| x.nlpd.value).collect();
    let ranks = m_rank(&r, &n)?;
    for (rep, v) in reports.iter_mut().zip(ranks) {
        rep.m_rank = Some(v);
    }
    Ok(())
}
