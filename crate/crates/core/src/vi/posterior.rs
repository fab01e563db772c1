use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kron::CovView;
use crate::model::Model;

/// Covariance structure of each group's posterior block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PosteriorKind {
    Diagonal,
    KronFull,
}

impl FromStr for PosteriorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diagonal" => Ok(PosteriorKind::Diagonal),
            "kron-full" => Ok(PosteriorKind::KronFull),
            other => Err(Error::input(format!(
                "unknown posterior structure `{other}`"
            ))),
        }
    }
}

/// Unconstrained covariance parameters of one group block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum CovParams {
    /// Log variances, `Q_r x m`, function-major.
    Diagonal { log_var: DMatrix<f64> },
    /// `S = (L_hh L_hhᵀ) ⊗ (L_zz L_zzᵀ)`; only the lower triangles are used and
    /// the diagonals are stored as logs.
    KronFull { hh: DMatrix<f64>, zz: DMatrix<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupPosterior {
    /// `Q_r x m`; row `j` is the inducing mean of the group's `j`-th member.
    pub mean: DMatrix<f64>,
    pub cov: CovParams,
}

/// Mixture of Gaussians over inducing variables, factorized over groups.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoGPosterior {
    pub logits: DVector<f64>,
    /// `components[k][r]`.
    pub components: Vec<Vec<GroupPosterior>>,
}

/// Materialized covariance of one group block.
#[derive(Clone, Debug)]
pub enum CovMats {
    Diagonal(DMatrix<f64>),
    Kron {
        lhh: DMatrix<f64>,
        lzz: DMatrix<f64>,
        shh: DMatrix<f64>,
        szz: DMatrix<f64>,
    },
}

pub(crate) fn lower_from_raw(raw: &DMatrix<f64>) -> DMatrix<f64> {
    let n = raw.nrows();
    DMatrix::from_fn(n, n, |i, j| match i.cmp(&j) {
        std::cmp::Ordering::Greater => raw[(i, j)],
        std::cmp::Ordering::Equal => raw[(i, i)].exp(),
        std::cmp::Ordering::Less => 0.0,
    })
}

/// Raw parameters whose factor is `l` (lower, positive diagonal).
pub(crate) fn raw_from_lower(l: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    DMatrix::from_fn(n, n, |i, j| match i.cmp(&j) {
        std::cmp::Ordering::Greater => l[(i, j)],
        std::cmp::Ordering::Equal => l[(i, i)].ln(),
        std::cmp::Ordering::Less => 0.0,
    })
}

impl CovParams {
    pub fn materialize(&self) -> CovMats {
        match self {
            CovParams::Diagonal { log_var } => CovMats::Diagonal(log_var.map(f64::exp)),
            CovParams::KronFull { hh, zz } => {
                let lhh = lower_from_raw(hh);
                let lzz = lower_from_raw(zz);
                let shh = &lhh * lhh.transpose();
                let szz = &lzz * lzz.transpose();
                CovMats::Kron { lhh, lzz, shh, szz }
            }
        }
    }

    /// Kronecker-full parameters from two lower factors.
    pub fn kron_from_factors(lhh: &DMatrix<f64>, lzz: &DMatrix<f64>) -> Self {
        CovParams::KronFull {
            hh: raw_from_lower(lhh),
            zz: raw_from_lower(lzz),
        }
    }
}

impl CovMats {
    pub fn view(&self) -> CovView<'_> {
        match self {
            CovMats::Diagonal(d) => CovView::Diagonal(d),
            CovMats::Kron { shh, szz, .. } => CovView::Kron { hh: shh, zz: szz },
        }
    }

    pub fn logdet(&self) -> f64 {
        match self {
            CovMats::Diagonal(d) => d.iter().map(|v| v.ln()).sum(),
            CovMats::Kron { lhh, lzz, .. } => {
                let (q, m) = (lhh.nrows() as f64, lzz.nrows() as f64);
                2.0 * m * lhh.diagonal().iter().map(|v| v.ln()).sum::<f64>()
                    + 2.0 * q * lzz.diagonal().iter().map(|v| v.ln()).sum::<f64>()
            }
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            CovMats::Diagonal(d) => d.len(),
            CovMats::Kron { shh, szz, .. } => shh.nrows() * szz.nrows(),
        }
    }

    /// Dense `D_r x D_r` matrix in function-major order.
    pub fn dense(&self) -> DMatrix<f64> {
        match self {
            CovMats::Diagonal(d) => {
                let flat = DVector::from_row_slice(d.transpose().as_slice());
                DMatrix::from_diagonal(&flat)
            }
            CovMats::Kron { shh, szz, .. } => shh.kronecker(szz),
        }
    }
}

impl MoGPosterior {
    /// Initial posterior: zero means, uniform weights and a small identity-scaled
    /// covariance (0.1 on the inducing side).
    pub fn init(model: &Model, components: usize, kind: PosteriorKind) -> Result<Self> {
        if components == 0 {
            return Err(Error::input("posterior needs at least one component"));
        }
        model.validate()?;
        let comps = (0..components)
            .map(|_| {
                model
                    .groups
                    .iter()
                    .map(|g| {
                        let (q, m) = (g.size(), g.n_inducing());
                        let cov = match kind {
                            PosteriorKind::Diagonal => CovParams::Diagonal {
                                log_var: DMatrix::from_element(q, m, 0.1f64.ln()),
                            },
                            PosteriorKind::KronFull => CovParams::kron_from_factors(
                                &DMatrix::identity(q, q),
                                &(DMatrix::identity(m, m) * 0.1f64.sqrt()),
                            ),
                        };
                        GroupPosterior {
                            mean: DMatrix::zeros(q, m),
                            cov,
                        }
                    })
                    .collect()
            })
            .collect();
        Ok(MoGPosterior {
            logits: DVector::zeros(components),
            components: comps,
        })
    }

    pub fn n_components(&self) -> usize {
        self.logits.len()
    }

    pub fn kind(&self) -> PosteriorKind {
        match self
            .components
            .first()
            .and_then(|c| c.first())
            .map(|g| &g.cov)
        {
            Some(CovParams::KronFull { .. }) => PosteriorKind::KronFull,
            _ => PosteriorKind::Diagonal,
        }
    }

    /// Mixture weights (softmax of the logits).
    pub fn weights(&self) -> DVector<f64> {
        let mx = self.logits.max();
        let e = self.logits.map(|l| (l - mx).exp());
        let s = e.sum();
        e / s
    }

    pub fn materialize(&self) -> Vec<Vec<CovMats>> {
        self.components
            .iter()
            .map(|c| c.iter().map(|g| g.cov.materialize()).collect())
            .collect()
    }

    /// Total inducing dimension `sum_r Q_r m`.
    pub fn dim(&self) -> usize {
        self.components
            .first()
            .map(|c| c.iter().map(|g| g.mean.len()).sum())
            .unwrap_or(0)
    }

    /// Checks that the posterior's block shapes match the model.
    pub fn check_against(&self, model: &Model) -> Result<()> {
        for comp in &self.components {
            if comp.len() != model.groups.len() {
                return Err(Error::Dimension {
                    context: "posterior groups",
                    expected: model.groups.len(),
                    got: comp.len(),
                });
            }
            for (g, gp) in model.groups.iter().zip(comp) {
                if gp.mean.shape() != (g.size(), g.n_inducing()) {
                    return Err(Error::Dimension {
                        context: "posterior mean block",
                        expected: g.size() * g.n_inducing(),
                        got: gp.mean.len(),
                    });
                }
                let ok = match &gp.cov {
                    CovParams::Diagonal { log_var } => log_var.shape() == gp.mean.shape(),
                    CovParams::KronFull { hh, zz } => {
                        hh.shape() == (g.size(), g.size())
                            && zz.shape() == (g.n_inducing(), g.n_inducing())
                    }
                };
                if !ok {
                    return Err(Error::input(format!(
                        "posterior covariance block for group {} has the wrong shape",
                        g.id
                    )));
                }
            }
        }
        if self.logits.len() != self.components.len() {
            return Err(Error::input("posterior logits and components disagree"));
        }
        Ok(())
    }
}

/// Exact entropy of a single-component posterior.
pub fn entropy_exact(q: &MoGPosterior) -> Result<f64> {
    if q.n_components() != 1 {
        return Err(Error::input(
            "the exact Gaussian entropy is only available for one component",
        ));
    }
    let mats = q.materialize();
    let d = q.dim() as f64;
    let logdet: f64 = mats[0].iter().map(|m| m.logdet()).sum();
    Ok(0.5 * d * (1.0 + (2.0 * PI).ln()) + 0.5 * logdet)
}
