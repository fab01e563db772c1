//! Adam training loop with convergence detection and timing.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::{Joint, Parameterized};
use crate::vi::{evaluate, ElboTerms, EvalOptions, MoGPosterior};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub max_epochs: usize,
    /// Relative ELBO change between successive epochs that counts as converged.
    pub tolerance: f64,
    pub samples: usize,
    pub seed: u64,
    /// Rows per step; 0 means full batch.
    pub batch_size: usize,
    /// Wall-clock budget in minutes; 0 disables it.
    pub wall_clock_minutes: f64,
    /// Keep kernel, inducing, noise and mixing-weight parameters fixed.
    pub freeze_model: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.005,
            beta1: 0.09,
            beta2: 0.99,
            epsilon: 1e-8,
            max_epochs: 200,
            tolerance: 1e-5,
            samples: 200,
            seed: 0,
            batch_size: 0,
            wall_clock_minutes: 0.0,
            freeze_model: false,
        }
    }
}

impl TrainConfig {
    /// Same settings with the conventional first-moment decay of 0.9.
    pub fn conventional() -> Self {
        TrainConfig {
            beta1: 0.9,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::input(format!("train.{field}: {why}")));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return bad("beta1", "must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return bad("beta2", "must lie in [0, 1)");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon", "must be positive");
        }
        if !(self.tolerance > 0.0) {
            return bad("tolerance", "must be positive");
        }
        if self.max_epochs < 1 {
            return bad("max_epochs", "must be at least 1");
        }
        if self.samples < 1 {
            return bad("samples", "must be at least 1");
        }
        if !(self.wall_clock_minutes >= 0.0) {
            return bad("wall_clock_minutes", "must be non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

fn block_of(blocks: &[(String, usize)], index: usize) -> String {
    let mut off = 0;
    for (name, len) in blocks {
        if index < off + len {
            return name.clone();
        }
        off += len;
    }
    format!("parameter {index}")
}

/// One Adam descent step on `params`. `blocks` names consecutive slices for
/// diagnostics.
pub fn step(
    params: &mut [f64],
    grads: &[f64],
    blocks: &[(String, usize)],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(Error::Dimension {
            context: "adam step",
            expected: params.len(),
            got: grads.len(),
        });
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient {
            block: block_of(blocks, i),
        });
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let mh = state.m[i] / c1;
        let vh = state.v[i] / c2;
        params[i] -= cfg.learning_rate * mh / (vh.sqrt() + cfg.epsilon);
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    MaxEpochs,
    WallClock,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::Converged => "converged",
            StopReason::MaxEpochs => "max_epochs",
            StopReason::WallClock => "wall_clock",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Training time so far, excluding time spent in the epoch hook.
    pub elapsed_seconds: f64,
    pub terms: ElboTerms,
    pub metrics: Vec<(String, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub records: Vec<EpochRecord>,
    pub stop: StopReason,
}

impl TrainingLog {
    pub fn final_terms(&self) -> Option<ElboTerms> {
        self.records.last().map(|r| r.terms)
    }

    pub fn wall_seconds(&self) -> f64 {
        self.records.last().map_or(0.0, |r| r.elapsed_seconds)
    }

    /// CSV with columns `epoch,elapsed-seconds,elbo,ent,cross,ell` followed by
    /// any hook metrics.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        self.write_csv_with(out, true)
    }

    /// As [`TrainingLog::write_csv`]; with `timing` off the elapsed-seconds
    /// field is left empty so that logs of identical runs compare byte for byte.
    pub fn write_csv_with<W: Write>(&self, out: W, timing: bool) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = ["epoch", "elapsed-seconds", "elbo", "ent", "cross", "ell"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        if let Some(r) = self.records.first() {
            header.extend(r.metrics.iter().map(|(k, _)| k.clone()));
        }
        w.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![
                r.epoch.to_string(),
                if timing {
                    format!("{:.6}", r.elapsed_seconds)
                } else {
                    String::new()
                },
                r.terms.total.to_string(),
                r.terms.ent.to_string(),
                r.terms.cross.to_string(),
                r.terms.ell.to_string(),
            ];
            row.extend(r.metrics.iter().map(|(_, v)| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Called after every epoch; the returned metrics are logged and the time
/// spent here is excluded from the elapsed clock.
pub type EpochHook<'a> = dyn FnMut(usize, &Model, &MoGPosterior) -> Result<Vec<(String, f64)>> + 'a;

fn relative_change(prev: f64, cur: f64) -> f64 {
    (cur - prev).abs() / prev.abs().max(1e-12)
}

fn epoch_seed(seed: u64, epoch: usize, step: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((epoch as u64) << 20)
        .wrapping_add(step as u64)
}

/// Maximizes the ELBO with Adam over all parameter blocks.
pub fn fit(
    model: &mut Model,
    q: &mut MoGPosterior,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    cfg: &TrainConfig,
    mut hook: Option<&mut EpochHook<'_>>,
) -> Result<TrainingLog> {
    cfg.validate()?;
    model.validate()?;
    q.check_against(model)?;
    let n = x.nrows();
    if n == 0 {
        return Err(Error::Empty("no training rows".into()));
    }
    let (blocks, n_model) = {
        let mut j = Joint {
            model: &mut *model,
            posterior: &mut *q,
        };
        let b = j.blocks();
        (b, j.model.pack().len())
    };
    let n_params: usize = blocks.iter().map(|(_, l)| l).sum();
    let mut state = AdamState::new(n_params);
    let mut order: Vec<usize> = (0..n).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED);
    let budget = (cfg.wall_clock_minutes > 0.0)
        .then(|| Duration::from_secs_f64(cfg.wall_clock_minutes * 60.0));
    let mut elapsed = Duration::ZERO;
    let mut records: Vec<EpochRecord> = Vec::new();
    let mut stop = StopReason::MaxEpochs;

    for epoch in 1..=cfg.max_epochs {
        let start = Instant::now();
        let batches: Vec<Option<Vec<usize>>> = if cfg.batch_size == 0 || cfg.batch_size >= n {
            vec![None]
        } else {
            order.shuffle(&mut shuffle_rng);
            order
                .chunks(cfg.batch_size)
                .map(|c| Some(c.to_vec()))
                .collect()
        };
        let mut acc = ElboTerms::default();
        let nb = batches.len() as f64;
        for (s, batch) in batches.iter().enumerate() {
            let opts = EvalOptions {
                samples: cfg.samples,
                seed: epoch_seed(cfg.seed, epoch, s),
                with_grad: true,
            };
            let mut run = || -> Result<()> {
                let mut ev = evaluate(model, q, x, y, batch.as_deref(), &opts)?;
                let mut grad = ev.grad.take().expect("gradient requested");
                let mut g: Vec<f64> = grad.flatten().into_iter().map(|v| -v).collect();
                if cfg.freeze_model {
                    g[..n_model].iter_mut().for_each(|v| *v = 0.0);
                }
                let mut j = Joint {
                    model: &mut *model,
                    posterior: &mut *q,
                };
                let mut p = j.pack();
                step(&mut p, &g, &blocks, &mut state, cfg)?;
                j.unpack(&p);
                acc.total += ev.terms.total / nb;
                acc.ent += ev.terms.ent / nb;
                acc.cross += ev.terms.cross / nb;
                acc.ell += ev.terms.ell / nb;
                Ok(())
            };
            run().map_err(|e| Error::Epoch {
                epoch,
                source: Box::new(e),
            })?;
        }
        elapsed += start.elapsed();
        let metrics = match hook.as_deref_mut() {
            Some(h) => h(epoch, model, q).map_err(|e| Error::Epoch {
                epoch,
                source: Box::new(e),
            })?,
            None => Vec::new(),
        };
        let prev = records.last().map(|r| r.terms.total);
        records.push(EpochRecord {
            epoch,
            elapsed_seconds: elapsed.as_secs_f64(),
            terms: acc,
            metrics,
        });
        if let Some(p) = prev {
            if relative_change(p, acc.total) < cfg.tolerance {
                stop = StopReason::Converged;
                break;
            }
        }
        if budget.is_some_and(|b| elapsed >= b) {
            stop = StopReason::WallClock;
            break;
        }
    }
    Ok(TrainingLog { records, stop })
}

/// Writes every parameter block as `name = v1 v2 ...` (shortest round-trip
/// decimal form), one block per line.
pub fn write_checkpoint<P: Parameterized + ?Sized>(path: &Path, params: &mut P) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "# ggp checkpoint v1")?;
    let mut err = None;
    params.visit(&mut |name, v| {
        let vals: Vec<String> = v.iter().map(|x| format!("{x:?}")).collect();
        if let Err(e) = writeln!(out, "{name} = {}", vals.join(" ")) {
            err.get_or_insert(e);
        }
    });
    if let Some(e) = err {
        return Err(e.into());
    }
    out.flush()?;
    Ok(())
}

/// Loads a checkpoint written by [`write_checkpoint`]; block names and sizes
/// must match exactly.
pub fn read_checkpoint<P: Parameterized + ?Sized>(path: &Path, params: &mut P) -> Result<()> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut entries: Vec<(usize, String, Vec<f64>)> = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let (name, rest) = t
            .split_once(" = ")
            .or_else(|| t.strip_suffix(" =").map(|n| (n, "")))
            .ok_or(Error::Load {
                line: i + 1,
                message: "expected `name = values`".into(),
            })?;
        let vals = rest
            .split_whitespace()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Load {
                line: i + 1,
                message: e.to_string(),
            })?;
        entries.push((i + 1, name.to_string(), vals));
    }
    let blocks = params.blocks();
    if blocks.len() != entries.len() {
        return Err(Error::input(format!(
            "checkpoint has {} blocks but the model expects {}",
            entries.len(),
            blocks.len()
        )));
    }
    for ((name, len), (line, ename, vals)) in blocks.iter().zip(&entries) {
        if name != ename || *len != vals.len() {
            return Err(Error::Load {
                line: *line,
                message: format!(
                    "block `{ename}` ({} values) does not match expected `{name}` ({len} values)",
                    vals.len()
                ),
            });
        }
    }
    let flat: Vec<f64> = entries.into_iter().flat_map(|(_, _, v)| v).collect();
    params.unpack(&flat);
    Ok(())
}
