//! Covariance functions.
//!
//! A [`KernelExpr`] is a product tree over three stationary primitives. All
//! positive hyperparameters are held as logarithms so that gradient steps are
//! unconstrained; gradients returned here are with respect to those logs.
//!
//! Point sets are passed as `n x d` matrices (one point per row). Internally
//! they are transposed once so that every point is a contiguous slice.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Row-major copy of a point set with contiguous per-point slices.
#[derive(Clone, Debug)]
pub struct Points {
    data: Vec<f64>,
    dim: usize,
}

impl Points {
    pub fn from_rows(x: &DMatrix<f64>) -> Self {
        let xt = x.transpose();
        Points {
            data: xt.as_slice().to_vec(),
            dim: x.ncols(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Product tree over primitive covariance functions.
///
/// `dims` index into the (already projected) input vector the kernel sees.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "KernelDecl", try_from = "KernelDecl")]
pub enum KernelExpr {
    Rbf {
        dims: Vec<usize>,
        log_lengthscales: Vec<f64>,
        log_variance: f64,
    },
    Periodic {
        dim: usize,
        log_period: f64,
        log_lengthscale: f64,
        log_variance: f64,
    },
    /// `max(0, 1 - (|a-b| / l)^2)` with a single lengthscale over `dims`.
    Epanechnikov {
        dims: Vec<usize>,
        log_lengthscale: f64,
    },
    Product(Vec<KernelExpr>),
}

impl KernelExpr {
    pub fn rbf(dims: Vec<usize>, lengthscales: &[f64], variance: f64) -> Self {
        assert_eq!(dims.len(), lengthscales.len(), "one lengthscale per dim");
        KernelExpr::Rbf {
            dims,
            log_lengthscales: lengthscales.iter().map(|l| l.ln()).collect(),
            log_variance: variance.ln(),
        }
    }

    /// RBF with one shared initial lengthscale across `dims` (still ARD once trained).
    pub fn rbf_iso(dims: Vec<usize>, lengthscale: f64, variance: f64) -> Self {
        let ls = vec![lengthscale; dims.len()];
        Self::rbf(dims, &ls, variance)
    }

    pub fn periodic(dim: usize, period: f64, lengthscale: f64, variance: f64) -> Self {
        KernelExpr::Periodic {
            dim,
            log_period: period.ln(),
            log_lengthscale: lengthscale.ln(),
            log_variance: variance.ln(),
        }
    }

    pub fn epanechnikov(dims: Vec<usize>, lengthscale: f64) -> Self {
        KernelExpr::Epanechnikov {
            dims,
            log_lengthscale: lengthscale.ln(),
        }
    }

    pub fn product(factors: Vec<KernelExpr>) -> Self {
        KernelExpr::Product(factors)
    }

    pub fn n_params(&self) -> usize {
        match self {
            KernelExpr::Rbf { dims, .. } => dims.len() + 1,
            KernelExpr::Periodic { .. } => 3,
            KernelExpr::Epanechnikov { .. } => 1,
            KernelExpr::Product(fs) => fs.iter().map(|f| f.n_params()).sum(),
        }
    }

    /// Smallest input dimension the expression can read.
    pub fn input_dim(&self) -> usize {
        match self {
            KernelExpr::Rbf { dims, .. } | KernelExpr::Epanechnikov { dims, .. } => {
                dims.iter().map(|d| d + 1).max().unwrap_or(0)
            }
            KernelExpr::Periodic { dim, .. } => dim + 1,
            KernelExpr::Product(fs) => fs.iter().map(|f| f.input_dim()).max().unwrap_or(0),
        }
    }

    /// Visits every log-hyperparameter in a fixed order.
    pub fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&mut f64)) {
        match self {
            KernelExpr::Rbf {
                log_lengthscales,
                log_variance,
                ..
            } => {
                log_lengthscales.iter_mut().for_each(&mut *f);
                f(log_variance);
            }
            KernelExpr::Periodic {
                log_period,
                log_lengthscale,
                log_variance,
                ..
            } => {
                f(log_period);
                f(log_lengthscale);
                f(log_variance);
            }
            KernelExpr::Epanechnikov {
                log_lengthscale, ..
            } => f(log_lengthscale),
            KernelExpr::Product(fs) => fs.iter_mut().for_each(|k| k.for_each_param_mut(f)),
        }
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        self.clone().for_each_param_mut(&mut |v| out.push(*v));
        out
    }

    pub fn set_params(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.n_params());
        let mut it = values.iter();
        self.for_each_param_mut(&mut |v| *v = *it.next().unwrap());
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.collect_names("", &mut out);
        out
    }

    fn collect_names(&self, prefix: &str, out: &mut Vec<String>) {
        match self {
            KernelExpr::Rbf { dims, .. } => {
                for d in dims {
                    out.push(format!("{prefix}rbf.log_lengthscale[{d}]"));
                }
                out.push(format!("{prefix}rbf.log_variance"));
            }
            KernelExpr::Periodic { .. } => {
                out.push(format!("{prefix}periodic.log_period"));
                out.push(format!("{prefix}periodic.log_lengthscale"));
                out.push(format!("{prefix}periodic.log_variance"));
            }
            KernelExpr::Epanechnikov { .. } => {
                out.push(format!("{prefix}epanechnikov.log_lengthscale"))
            }
            KernelExpr::Product(fs) => {
                for (i, f) in fs.iter().enumerate() {
                    f.collect_names(&format!("{prefix}{i}."), out);
                }
            }
        }
    }

    /// k(a, a) for a stationary expression.
    pub fn variance_at_zero(&self) -> f64 {
        match self {
            KernelExpr::Rbf { log_variance, .. } | KernelExpr::Periodic { log_variance, .. } => {
                log_variance.exp()
            }
            KernelExpr::Epanechnikov { .. } => 1.0,
            KernelExpr::Product(fs) => fs.iter().map(|f| f.variance_at_zero()).product(),
        }
    }

    #[inline]
    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            KernelExpr::Rbf {
                dims,
                log_lengthscales,
                log_variance,
            } => {
                let mut r2 = 0.0;
                for (d, ll) in dims.iter().zip(log_lengthscales) {
                    let diff = (a[*d] - b[*d]) * (-ll).exp();
                    r2 += diff * diff;
                }
                (log_variance - 0.5 * r2).exp()
            }
            KernelExpr::Periodic {
                dim,
                log_period,
                log_lengthscale,
                log_variance,
            } => {
                let u = PI * (a[*dim] - b[*dim]) / log_period.exp();
                let s = u.sin();
                (log_variance - 2.0 * s * s * (-2.0 * log_lengthscale).exp()).exp()
            }
            KernelExpr::Epanechnikov {
                dims,
                log_lengthscale,
            } => {
                let rho2 = sq_dist(dims, a, b) * (-2.0 * log_lengthscale).exp();
                if rho2 >= 1.0 {
                    0.0
                } else {
                    1.0 - rho2
                }
            }
            KernelExpr::Product(fs) => fs.iter().map(|f| f.eval(a, b)).product(),
        }
    }

    /// Adds `weight * dk/dtheta` into `dtheta` (length `n_params`) and, when
    /// given, `weight * dk/db` into `db` (length of the input vector).
    pub fn accumulate_grad(
        &self,
        a: &[f64],
        b: &[f64],
        weight: f64,
        dtheta: &mut [f64],
        mut db: Option<&mut [f64]>,
    ) {
        if weight == 0.0 {
            return;
        }
        match self {
            KernelExpr::Rbf {
                dims,
                log_lengthscales,
                ..
            } => {
                let k = self.eval(a, b);
                let wk = weight * k;
                for (i, (d, ll)) in dims.iter().zip(log_lengthscales).enumerate() {
                    let inv_l2 = (-2.0 * ll).exp();
                    let diff = a[*d] - b[*d];
                    dtheta[i] += wk * diff * diff * inv_l2;
                    if let Some(db) = db.as_deref_mut() {
                        db[*d] += wk * diff * inv_l2;
                    }
                }
                dtheta[dims.len()] += wk;
            }
            KernelExpr::Periodic {
                dim,
                log_period,
                log_lengthscale,
                ..
            } => {
                let k = self.eval(a, b);
                let wk = weight * k;
                let p = log_period.exp();
                let inv_l2 = (-2.0 * log_lengthscale).exp();
                let u = PI * (a[*dim] - b[*dim]) / p;
                let s = u.sin();
                let s2u = (2.0 * u).sin();
                dtheta[0] += wk * 2.0 * u * s2u * inv_l2;
                dtheta[1] += wk * 4.0 * s * s * inv_l2;
                dtheta[2] += wk;
                if let Some(db) = db {
                    db[*dim] += wk * 2.0 * PI * s2u * inv_l2 / p;
                }
            }
            KernelExpr::Epanechnikov {
                dims,
                log_lengthscale,
            } => {
                let inv_l2 = (-2.0 * log_lengthscale).exp();
                let rho2 = sq_dist(dims, a, b) * inv_l2;
                // Zero outside the support and on its boundary.
                if rho2 < 1.0 {
                    dtheta[0] += weight * 2.0 * rho2;
                    if let Some(db) = db {
                        for d in dims {
                            db[*d] += weight * 2.0 * (a[*d] - b[*d]) * inv_l2;
                        }
                    }
                }
            }
            KernelExpr::Product(fs) => {
                let mut offset = 0;
                for (i, f) in fs.iter().enumerate() {
                    let others: f64 = fs
                        .iter()
                        .enumerate()
                        .filter(|(j, _)| *j != i)
                        .map(|(_, g)| g.eval(a, b))
                        .product();
                    let np = f.n_params();
                    f.accumulate_grad(
                        a,
                        b,
                        weight * others,
                        &mut dtheta[offset..offset + np],
                        db.as_deref_mut(),
                    );
                    offset += np;
                }
            }
        }
    }

    /// Gram matrix over a point set; each unordered pair is evaluated once.
    pub fn gram_points(&self, x: &Points) -> DMatrix<f64> {
        let n = x.len();
        let mut k = DMatrix::zeros(n, n);
        for j in 0..n {
            for i in j..n {
                let v = self.eval(x.row(i), x.row(j));
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        k
    }

    pub fn cross_points(&self, x: &Points, z: &Points) -> DMatrix<f64> {
        DMatrix::from_fn(x.len(), z.len(), |i, j| self.eval(x.row(i), z.row(j)))
    }

    /// Contracts a symmetric adjoint of `gram_points(z)` into hyperparameter
    /// and (optionally) point gradients.
    pub fn backprop_gram(
        &self,
        z: &Points,
        adj: &DMatrix<f64>,
        dtheta: &mut [f64],
        mut dz: Option<&mut DMatrix<f64>>,
    ) {
        let n = z.len();
        let dim = z.dim();
        let mut buf = vec![0.0; dim];
        for j in 0..n {
            buf.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..n {
                let w = adj[(i, j)];
                if w == 0.0 {
                    continue;
                }
                // k(z_i, z_j) depends on z_j through its second argument and on
                // z_i through the first; the symmetric adjoint covers both.
                let gb = if dz.is_some() && i != j {
                    Some(buf.as_mut_slice())
                } else {
                    None
                };
                self.accumulate_grad(z.row(i), z.row(j), w, dtheta, gb);
            }
            if let Some(dz) = dz.as_deref_mut() {
                for d in 0..dim {
                    dz[(j, d)] += 2.0 * buf[d];
                }
            }
        }
    }

    /// Contracts an adjoint of `cross_points(x, z)` (n x m).
    pub fn backprop_cross(
        &self,
        x: &Points,
        z: &Points,
        adj: &DMatrix<f64>,
        dtheta: &mut [f64],
        mut dz: Option<&mut DMatrix<f64>>,
    ) {
        let dim = z.dim();
        let mut buf = vec![0.0; dim];
        for k in 0..z.len() {
            buf.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..x.len() {
                let w = adj[(i, k)];
                let gb = if dz.is_some() {
                    Some(buf.as_mut_slice())
                } else {
                    None
                };
                self.accumulate_grad(x.row(i), z.row(k), w, dtheta, gb);
            }
            if let Some(dz) = dz.as_deref_mut() {
                for d in 0..dim {
                    dz[(k, d)] += buf[d];
                }
            }
        }
    }

    /// Contracts an adjoint of the diagonal `k(x_i, x_i)`.
    pub fn backprop_diag(&self, x: &Points, adj: &[f64], dtheta: &mut [f64]) {
        for (i, w) in adj.iter().enumerate() {
            self.accumulate_grad(x.row(i), x.row(i), *w, dtheta, None);
        }
    }
}

#[inline]
fn sq_dist(dims: &[usize], a: &[f64], b: &[f64]) -> f64 {
    dims.iter()
        .map(|d| {
            let diff = a[*d] - b[*d];
            diff * diff
        })
        .sum()
}

/// A kernel expression together with the columns of the full input vector it reads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub expr: KernelExpr,
    pub feature_slice: Vec<usize>,
}

impl KernelSpec {
    pub fn new(expr: KernelExpr, feature_slice: Vec<usize>) -> Result<Self> {
        if expr.input_dim() > feature_slice.len() {
            return Err(Error::Dimension {
                context: "kernel feature slice",
                expected: expr.input_dim(),
                got: feature_slice.len(),
            });
        }
        Ok(KernelSpec {
            expr,
            feature_slice,
        })
    }

    fn required_dim(&self) -> usize {
        self.feature_slice.iter().map(|c| c + 1).max().unwrap_or(0)
    }

    fn check(&self, got: usize) -> Result<()> {
        if got < self.required_dim() {
            return Err(Error::Dimension {
                context: "kernel input",
                expected: self.required_dim(),
                got,
            });
        }
        Ok(())
    }

    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        self.feature_slice.iter().map(|c| x[*c]).collect()
    }

    /// Projects every row of `x` onto the kernel's feature slice.
    pub fn project_rows(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check(x.ncols())?;
        Ok(DMatrix::from_fn(
            x.nrows(),
            self.feature_slice.len(),
            |i, j| x[(i, self.feature_slice[j])],
        ))
    }

    pub fn eval(&self, x: &[f64], x2: &[f64]) -> Result<f64> {
        if x.len() != x2.len() {
            return Err(Error::Dimension {
                context: "kernel eval",
                expected: x.len(),
                got: x2.len(),
            });
        }
        self.check(x.len())?;
        Ok(self.expr.eval(&self.project(x), &self.project(x2)))
    }

    pub fn gram(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let p = Points::from_rows(&self.project_rows(x)?);
        Ok(self.expr.gram_points(&p))
    }

    pub fn cross_gram(&self, x: &DMatrix<f64>, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != z.ncols() {
            return Err(Error::Dimension {
                context: "cross gram",
                expected: x.ncols(),
                got: z.ncols(),
            });
        }
        let px = Points::from_rows(&self.project_rows(x)?);
        let pz = Points::from_rows(&self.project_rows(z)?);
        Ok(self.expr.cross_points(&px, &pz))
    }

    /// One matrix per log-hyperparameter: d gram(X) / d log(theta), or of
    /// `cross_gram(X, Z)` when `z` is given.
    pub fn grad_hyper(
        &self,
        x: &DMatrix<f64>,
        z: Option<&DMatrix<f64>>,
    ) -> Result<Vec<DMatrix<f64>>> {
        let px = Points::from_rows(&self.project_rows(x)?);
        let pz = match z {
            Some(z) => {
                if z.ncols() != x.ncols() {
                    return Err(Error::Dimension {
                        context: "grad_hyper",
                        expected: x.ncols(),
                        got: z.ncols(),
                    });
                }
                Points::from_rows(&self.project_rows(z)?)
            }
            None => px.clone(),
        };
        let np = self.expr.n_params();
        let mut out = vec![DMatrix::zeros(px.len(), pz.len()); np];
        let mut buf = vec![0.0; np];
        for i in 0..px.len() {
            for j in 0..pz.len() {
                buf.iter_mut().for_each(|v| *v = 0.0);
                self.expr
                    .accumulate_grad(px.row(i), pz.row(j), 1.0, &mut buf, None);
                for (m, g) in out.iter_mut().zip(&buf) {
                    m[(i, j)] = *g;
                }
            }
        }
        Ok(out)
    }
}

/// Natural-unit declaration used for (de)serializing kernel expressions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum KernelDecl {
    Rbf {
        dims: Vec<usize>,
        lengthscales: Vec<f64>,
        variance: f64,
    },
    Periodic {
        dim: usize,
        period: f64,
        lengthscale: f64,
        variance: f64,
    },
    Epanechnikov {
        dims: Vec<usize>,
        lengthscale: f64,
    },
    Product {
        factors: Vec<KernelDecl>,
    },
}

impl From<KernelExpr> for KernelDecl {
    fn from(k: KernelExpr) -> Self {
        match k {
            KernelExpr::Rbf {
                dims,
                log_lengthscales,
                log_variance,
            } => KernelDecl::Rbf {
                dims,
                lengthscales: log_lengthscales.iter().map(|l| l.exp()).collect(),
                variance: log_variance.exp(),
            },
            KernelExpr::Periodic {
                dim,
                log_period,
                log_lengthscale,
                log_variance,
            } => KernelDecl::Periodic {
                dim,
                period: log_period.exp(),
                lengthscale: log_lengthscale.exp(),
                variance: log_variance.exp(),
            },
            KernelExpr::Epanechnikov {
                dims,
                log_lengthscale,
            } => KernelDecl::Epanechnikov {
                dims,
                lengthscale: log_lengthscale.exp(),
            },
            KernelExpr::Product(fs) => KernelDecl::Product {
                factors: fs.into_iter().map(Into::into).collect(),
            },
        }
    }
}

impl TryFrom<KernelDecl> for KernelExpr {
    type Error = String;

    fn try_from(d: KernelDecl) -> std::result::Result<Self, String> {
        fn pos(name: &str, v: f64) -> std::result::Result<f64, String> {
            if v > 0.0 && v.is_finite() {
                Ok(v.ln())
            } else {
                Err(format!("{name} must be positive and finite, got {v}"))
            }
        }
        Ok(match d {
            KernelDecl::Rbf {
                dims,
                lengthscales,
                variance,
            } => {
                if dims.len() != lengthscales.len() {
                    return Err(format!(
                        "rbf has {} dims but {} lengthscales",
                        dims.len(),
                        lengthscales.len()
                    ));
                }
                KernelExpr::Rbf {
                    dims,
                    log_lengthscales: lengthscales
                        .iter()
                        .map(|l| pos("rbf lengthscale", *l))
                        .collect::<std::result::Result<_, _>>()?,
                    log_variance: pos("rbf variance", variance)?,
                }
            }
            KernelDecl::Periodic {
                dim,
                period,
                lengthscale,
                variance,
            } => KernelExpr::Periodic {
                dim,
                log_period: pos("period", period)?,
                log_lengthscale: pos("periodic lengthscale", lengthscale)?,
                log_variance: pos("periodic variance", variance)?,
            },
            KernelDecl::Epanechnikov { dims, lengthscale } => KernelExpr::Epanechnikov {
                dims,
                log_lengthscale: pos("epanechnikov lengthscale", lengthscale)?,
            },
            KernelDecl::Product { factors } => KernelExpr::Product(
                factors
                    .into_iter()
                    .map(KernelExpr::try_from)
                    .collect::<std::result::Result<_, _>>()?,
            ),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(rng: &mut ChaCha8Rng, n: usize, d: usize, scale: f64) -> DMatrix<f64> {
        DMatrix::from_fn(n, d, |_, _| rng.random_range(-scale..scale))
    }

    fn zoo() -> Vec<KernelExpr> {
        vec![
            KernelExpr::rbf(vec![0, 1], &[0.7, 1.3], 1.5),
            KernelExpr::periodic(0, 1.7, 0.8, 0.9),
            KernelExpr::epanechnikov(vec![0, 1], 2.5),
            KernelExpr::product(vec![
                KernelExpr::periodic(0, 2.0, 1.1, 1.2),
                KernelExpr::rbf(vec![1], &[0.9], 0.8),
            ]),
            KernelExpr::product(vec![
                KernelExpr::rbf(vec![0, 1], &[1.5, 1.5], 1.0),
                KernelExpr::epanechnikov(vec![0, 1], 3.0),
            ]),
        ]
    }

    #[test]
    fn rbf_zero_distance_is_variance() {
        let k = KernelExpr::rbf(vec![0], &[1.0], 1.0);
        assert_relative_eq!(k.eval(&[0.3], &[0.3]), 1.0);
    }

    #[test]
    fn epanechnikov_outside_support_is_zero() {
        let k = KernelExpr::epanechnikov(vec![0], 1.0);
        assert_eq!(k.eval(&[0.0], &[2.0]), 0.0);
        assert_eq!(k.eval(&[0.0], &[1.0]), 0.0);
        assert!(k.eval(&[0.0], &[0.999]) > 0.0);
    }

    #[test]
    fn rbf_times_epanechnikov_hand_value() {
        let k = KernelExpr::product(vec![
            KernelExpr::rbf(vec![0], &[1.0], 1.0),
            KernelExpr::epanechnikov(vec![0], 2.0),
        ]);
        assert_relative_eq!(
            k.eval(&[0.0], &[1.0]),
            (-0.5f64).exp() * 0.75,
            epsilon = 1e-15
        );
    }

    #[test]
    fn eval_at_zero_is_product_of_variances() {
        for k in zoo() {
            let x = [0.4, -1.2];
            assert_relative_eq!(k.eval(&x, &x), k.variance_at_zero(), epsilon = 1e-14);
        }
    }

    #[test]
    fn spec_eval_rejects_short_inputs() {
        let spec =
            KernelSpec::new(KernelExpr::rbf(vec![0, 1], &[1.0, 1.0], 1.0), vec![2, 4]).unwrap();
        assert!(matches!(
            spec.eval(&[0.0; 3], &[0.0; 3]),
            Err(Error::Dimension { .. })
        ));
        assert!(spec.eval(&[0.0; 5], &[0.0; 4]).is_err());
        assert!(spec.eval(&[0.0; 5], &[1.0; 5]).is_ok());
    }

    #[test]
    fn gram_singleton_and_pairwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for expr in zoo() {
            let spec = KernelSpec::new(expr, vec![0, 1]).unwrap();
            let x1 = random_points(&mut rng, 1, 2, 2.0);
            let g1 = spec.gram(&x1).unwrap();
            assert_eq!(g1.shape(), (1, 1));
            let row: Vec<f64> = x1.row(0).iter().copied().collect();
            assert_eq!(g1[(0, 0)], spec.eval(&row, &row).unwrap());

            let x = random_points(&mut rng, 3, 2, 2.0);
            let g = spec.gram(&x).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    let a: Vec<f64> = x.row(i).iter().copied().collect();
                    let b: Vec<f64> = x.row(j).iter().copied().collect();
                    assert_relative_eq!(g[(i, j)], spec.eval(&a, &b).unwrap(), epsilon = 1e-15);
                    assert_eq!(g[(i, j)], g[(j, i)]);
                }
            }
        }
    }

    #[test]
    fn periodic_repeats_exactly_after_one_period() {
        let spec = KernelSpec::new(KernelExpr::periodic(0, 1440.0, 1.0, 2.0), vec![0]).unwrap();
        let x = DMatrix::from_column_slice(2, 1, &[300.0, 1740.0]);
        let g = spec.gram(&x).unwrap();
        assert_relative_eq!(g[(0, 1)], g[(0, 0)], epsilon = 1e-12);
    }

    #[test]
    fn cross_gram_matches_gram_and_pairwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for expr in zoo() {
            let spec = KernelSpec::new(expr, vec![0, 1]).unwrap();
            let x = random_points(&mut rng, 4, 2, 2.0);
            assert_eq!(spec.cross_gram(&x, &x).unwrap(), spec.gram(&x).unwrap());
            let x = random_points(&mut rng, 2, 2, 2.0);
            let z = random_points(&mut rng, 3, 2, 2.0);
            let c = spec.cross_gram(&x, &z).unwrap();
            assert_eq!(c.shape(), (2, 3));
            for i in 0..2 {
                for k in 0..3 {
                    let a: Vec<f64> = x.row(i).iter().copied().collect();
                    let b: Vec<f64> = z.row(k).iter().copied().collect();
                    assert_relative_eq!(c[(i, k)], spec.eval(&a, &b).unwrap(), epsilon = 1e-15);
                }
            }
        }
        let spec = KernelSpec::new(KernelExpr::rbf(vec![0], &[1.0], 1.0), vec![0]).unwrap();
        let x = DMatrix::from_element(2, 1, 0.0);
        assert!(spec.cross_gram(&x, &DMatrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn epanechnikov_cross_gram_vanishes_beyond_lengthscale() {
        let spec = KernelSpec::new(KernelExpr::epanechnikov(vec![0], 0.5), vec![0]).unwrap();
        let x = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        let z = DMatrix::from_column_slice(3, 1, &[3.0, 4.0, -2.0]);
        assert!(spec.cross_gram(&x, &z).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn variance_gradient_equals_gram() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec =
            KernelSpec::new(KernelExpr::rbf(vec![0, 1], &[0.6, 1.4], 2.0), vec![0, 1]).unwrap();
        let x = random_points(&mut rng, 5, 2, 1.0);
        let grads = spec.grad_hyper(&x, None).unwrap();
        let g = spec.gram(&x).unwrap();
        assert_relative_eq!(grads[2], g, epsilon = 1e-14);
        // Lengthscale gradients vanish on the diagonal.
        for i in 0..5 {
            assert_eq!(grads[0][(i, i)], 0.0);
            assert_eq!(grads[1][(i, i)], 0.0);
        }
    }

    fn fd_gram(
        spec: &KernelSpec,
        x: &DMatrix<f64>,
        z: Option<&DMatrix<f64>>,
        p: usize,
    ) -> DMatrix<f64> {
        let h = 1e-5;
        let mut plus = spec.clone();
        let mut minus = spec.clone();
        let mut params = spec.expr.params();
        params[p] += h;
        plus.expr.set_params(&params);
        params[p] -= 2.0 * h;
        minus.expr.set_params(&params);
        let eval = |s: &KernelSpec| match z {
            Some(z) => s.cross_gram(x, z).unwrap(),
            None => s.gram(x).unwrap(),
        };
        (eval(&plus) - eval(&minus)) / (2.0 * h)
    }

    #[test]
    fn hyper_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for expr in zoo() {
            let spec = KernelSpec::new(expr, vec![0, 1]).unwrap();
            for trial in 0..3 {
                let x = random_points(&mut rng, 5, 2, 1.5);
                let z = random_points(&mut rng, 5, 2, 1.5);
                let zref = if trial == 2 { Some(&z) } else { None };
                let grads = spec.grad_hyper(&x, zref).unwrap();
                for (p, g) in grads.iter().enumerate() {
                    let fd = fd_gram(&spec, &x, zref, p);
                    let scale = fd.amax().max(1e-3);
                    let err = (g - &fd).amax() / scale;
                    assert!(err < 1e-4, "param {p}: rel err {err}");
                }
            }
        }
    }

    #[test]
    fn point_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for expr in zoo() {
            let x = Points::from_rows(&random_points(&mut rng, 4, 2, 1.5));
            let zm = random_points(&mut rng, 3, 2, 1.5);
            let z = Points::from_rows(&zm);
            let adj_c = DMatrix::from_fn(4, 3, |_, _| rng.random_range(-1.0..1.0));
            let a = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
            let adj_g = &a + a.transpose();
            let objective = |zm: &DMatrix<f64>| {
                let z = Points::from_rows(zm);
                expr.cross_points(&x, &z).component_mul(&adj_c).sum()
                    + expr.gram_points(&z).component_mul(&adj_g).sum()
            };
            let mut dtheta = vec![0.0; expr.n_params()];
            let mut dz = DMatrix::zeros(3, 2);
            expr.backprop_cross(&x, &z, &adj_c, &mut dtheta, Some(&mut dz));
            expr.backprop_gram(&z, &adj_g, &mut dtheta, Some(&mut dz));
            for i in 0..3 {
                for d in 0..2 {
                    let h = 1e-6;
                    let mut zp = zm.clone();
                    zp[(i, d)] += h;
                    let mut zn = zm.clone();
                    zn[(i, d)] -= h;
                    let fd = (objective(&zp) - objective(&zn)) / (2.0 * h);
                    assert!(
                        (fd - dz[(i, d)]).abs() < 1e-5 * (1.0 + fd.abs()),
                        "{expr:?} z[{i},{d}]: fd {fd} vs {}",
                        dz[(i, d)]
                    );
                }
            }
        }
    }

    #[test]
    fn declaration_round_trip_preserves_values() {
        let k = KernelExpr::product(vec![
            KernelExpr::periodic(0, 1440.0, 0.5, 1.0),
            KernelExpr::rbf(vec![1, 2, 3], &[1.0, 2.0, 3.0], 0.7),
            KernelExpr::epanechnikov(vec![4, 5], 2.0),
        ]);
        let decl: KernelDecl = k.clone().into();
        let back = KernelExpr::try_from(decl).unwrap();
        for (a, b) in k.params().iter().zip(back.params()) {
            assert_relative_eq!(*a, b, epsilon = 1e-12);
        }
        let bad = KernelDecl::Epanechnikov {
            dims: vec![0],
            lengthscale: -1.0,
        };
        assert!(KernelExpr::try_from(bad).is_err());
    }
}
