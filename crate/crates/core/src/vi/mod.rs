//! Sparse variational objective with a mixture-of-Gaussians posterior.
//!
//! The ELBO is `ent + cross + ell`: a lower bound on the mixture entropy, the
//! expected log prior of the inducing variables and a Monte Carlo estimate of
//! the expected log likelihood. Gradients are computed by a hand-written
//! reverse pass through every block.

mod posterior;

pub use posterior::{
    entropy_exact, CovMats, CovParams, GroupPosterior, MoGPosterior, PosteriorKind,
};

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kron::{chol, chol_backward, CholFactor, JitterLadder};
use crate::model::{log_prob_with_grad, prior_blocks, LikGrad, Likelihood, Model, PriorBlocks};
use crate::params::Parameterized;

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const LN_4PI: f64 = 2.531_024_246_969_290_7;

#[derive(Clone, Debug)]
pub struct EvalOptions {
    /// Monte Carlo draws per point and mixture component.
    pub samples: usize,
    pub seed: u64,
    pub with_grad: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            samples: 200,
            seed: 0,
            with_grad: true,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ElboTerms {
    pub total: f64,
    pub ent: f64,
    pub cross: f64,
    pub ell: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EvalStats {
    /// `m`-dimensional Cholesky factorizations performed.
    pub inducing_factorizations: usize,
    pub batch_size: usize,
}

/// Gradients laid out exactly like the parameters they belong to.
#[derive(Clone, Debug)]
pub struct Gradient {
    pub model: Model,
    pub posterior: MoGPosterior,
}

impl Gradient {
    pub fn flatten(&mut self) -> Vec<f64> {
        let mut out = self.model.pack();
        out.extend(self.posterior.pack());
        out
    }
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub terms: ElboTerms,
    pub grad: Option<Gradient>,
    pub stats: EvalStats,
}

/// Marginal of one group's latent values at one input under one component.
#[derive(Clone, Debug)]
pub struct LatentMarginal {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

struct GroupCtx {
    blocks: PriorBlocks,
    kzz_inv: DMatrix<f64>,
    khh_inv: DMatrix<f64>,
}

impl GroupCtx {
    fn new(blocks: PriorBlocks) -> Self {
        let kzz_inv = blocks.kzz.inverse();
        let khh_inv = match &blocks.khh {
            Some(f) => f.inverse(),
            None => DMatrix::identity(1, 1),
        };
        GroupCtx {
            blocks,
            kzz_inv,
            khh_inv,
        }
    }

    fn khh_logdet(&self) -> f64 {
        self.blocks.khh.as_ref().map_or(0.0, |f| f.logdet())
    }

    fn cond_var(&self, i: usize) -> (f64, bool) {
        let q = self.blocks.cond_var[i];
        if q < 0.0 {
            (0.0, true)
        } else {
            (q, false)
        }
    }
}

/// Adjoint of one group's posterior covariance.
#[derive(Clone, Debug)]
enum CovAdj {
    Diagonal(DMatrix<f64>),
    Kron {
        shh: DMatrix<f64>,
        szz: DMatrix<f64>,
    },
}

impl CovAdj {
    fn zeros_like(m: &CovMats) -> Self {
        match m {
            CovMats::Diagonal(d) => CovAdj::Diagonal(DMatrix::zeros(d.nrows(), d.ncols())),
            CovMats::Kron { shh, szz, .. } => CovAdj::Kron {
                shh: DMatrix::zeros(shh.nrows(), shh.ncols()),
                szz: DMatrix::zeros(szz.nrows(), szz.ncols()),
            },
        }
    }

    fn diag(&mut self) -> &mut DMatrix<f64> {
        match self {
            CovAdj::Diagonal(d) => d,
            _ => unreachable!("diagonal adjoint on a Kronecker block"),
        }
    }

    fn kron(&mut self) -> (&mut DMatrix<f64>, &mut DMatrix<f64>) {
        match self {
            CovAdj::Kron { shh, szz } => (shh, szz),
            _ => unreachable!("Kronecker adjoint on a diagonal block"),
        }
    }
}

/// Adjoint accumulators for the posterior side.
struct PostAdj {
    dpi: DVector<f64>,
    dmean: Vec<Vec<DMatrix<f64>>>,
    dcov: Vec<Vec<CovAdj>>,
}

/// Adjoint accumulators for one group's prior side.
struct PriorAdj {
    khh: DMatrix<f64>,
    kzz: DMatrix<f64>,
    /// `n x m` adjoint of the interpolation rows.
    interp: DMatrix<f64>,
    cond_var: DVector<f64>,
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let mx = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !mx.is_finite() {
        return mx;
    }
    mx + v.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
}

fn frob(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.component_mul(b).sum()
}

/// Row-major flattening, matching the function-major latent ordering.
fn flat(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.transpose().as_slice())
}

fn unflat(v: &DVector<f64>, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, v.as_slice())
}

/// `E_q[log N(u; 0, K_hh ⊗ K_zz)]` for one group and component.
fn cross_group(
    ctx: &GroupCtx,
    gp: &GroupPosterior,
    cov: &CovMats,
    grad: Option<(f64, &mut DMatrix<f64>, &mut CovAdj, &mut PriorAdj)>,
) -> f64 {
    let (q, m) = gp.mean.shape();
    let (qf, mf) = (q as f64, m as f64);
    let kzz = ctx.blocks.kzz.matrix();
    let u = &ctx.khh_inv * &gp.mean * &ctx.kzz_inv;
    let quad = frob(&gp.mean, &u);
    let trace = match cov {
        CovMats::Diagonal(s) => {
            let hd = ctx.khh_inv.diagonal();
            let zd = ctx.kzz_inv.diagonal();
            (hd.transpose() * s * zd)[(0, 0)]
        }
        CovMats::Kron { shh, szz, .. } => {
            (&ctx.khh_inv * shh).trace() * (&ctx.kzz_inv * szz).trace()
        }
    };
    let logdet = mf * ctx.khh_logdet() + qf * ctx.blocks.kzz.logdet();
    let value = -0.5 * ((qf * mf) * LN_2PI + logdet + quad + trace);

    if let Some((w, dmean, dcov, prior)) = grad {
        let h = -0.5 * w;
        *dmean -= &u * w;
        let mut dkhh = &ctx.khh_inv * mf - &u * &kzz * u.transpose();
        let mut dkzz = &ctx.kzz_inv * qf - u.transpose() * &ctx.blocks.khh_matrix * &u;
        match cov {
            CovMats::Diagonal(s) => {
                let hd = ctx.khh_inv.diagonal();
                let zd = ctx.kzz_inv.diagonal();
                let alpha = s * &zd;
                let beta = s.transpose() * &hd;
                dkhh -= &ctx.khh_inv * DMatrix::from_diagonal(&alpha) * &ctx.khh_inv;
                dkzz -= &ctx.kzz_inv * DMatrix::from_diagonal(&beta) * &ctx.kzz_inv;
                let ds = dcov.diag();
                for j in 0..q {
                    for p in 0..m {
                        ds[(j, p)] += h * hd[j] * zd[p];
                    }
                }
            }
            CovMats::Kron { shh, szz, .. } => {
                let th = (&ctx.khh_inv * shh).trace();
                let tz = (&ctx.kzz_inv * szz).trace();
                dkhh -= &ctx.khh_inv * shh * &ctx.khh_inv * tz;
                dkzz -= &ctx.kzz_inv * szz * &ctx.kzz_inv * th;
                let (dshh, dszz) = dcov.kron();
                *dshh += &ctx.khh_inv * (h * tz);
                *dszz += &ctx.kzz_inv * (h * th);
            }
        }
        prior.khh += dkhh * h;
        prior.kzz += dkzz * h;
    }
    value
}

/// `log N(m_k; m_l, S_k + S_l)` for one group.
fn pair_lnn(
    gk: &GroupPosterior,
    ck: &CovMats,
    gl: &GroupPosterior,
    cl: &CovMats,
    same: bool,
) -> f64 {
    let d = gk.mean.len() as f64;
    if same {
        return -0.5 * (d * LN_4PI + ck.logdet());
    }
    match (ck, cl) {
        (CovMats::Diagonal(sk), CovMats::Diagonal(sl)) => {
            let mut acc = 0.0;
            for ((a, b), (x, y)) in sk
                .iter()
                .zip(sl.iter())
                .zip(gk.mean.iter().zip(gl.mean.iter()))
            {
                let c = a + b;
                let r = x - y;
                acc += LN_2PI + c.ln() + r * r / c;
            }
            -0.5 * acc
        }
        _ => {
            let c = ck.dense() + cl.dense();
            let delta = flat(&(&gk.mean - &gl.mean));
            match Cholesky::new(c) {
                Some(ch) => {
                    let logdet = 2.0 * ch.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
                    let v = ch.solve(&delta);
                    -0.5 * (d * LN_2PI + logdet + delta.dot(&v))
                }
                None => f64::NEG_INFINITY,
            }
        }
    }
}

/// Maps a dense adjoint `G` of `Shh ⊗ Szz` onto its two factors.
fn kron_factor_adjoint(
    g: &DMatrix<f64>,
    shh: &DMatrix<f64>,
    szz: &DMatrix<f64>,
    dshh: &mut DMatrix<f64>,
    dszz: &mut DMatrix<f64>,
) {
    let (q, m) = (shh.nrows(), szz.nrows());
    for i in 0..q {
        for j in 0..q {
            let block = g.view((i * m, j * m), (m, m));
            dshh[(i, j)] += frob(&block.into_owned(), szz);
            *dszz += block * shh[(i, j)];
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn pair_lnn_grad(
    coef: f64,
    k: usize,
    l: usize,
    r: usize,
    q: &MoGPosterior,
    mats: &[Vec<CovMats>],
    adj: &mut PostAdj,
) {
    let (gk, ck) = (&q.components[k][r], &mats[k][r]);
    if k == l {
        match ck {
            CovMats::Diagonal(s) => {
                let ds = adj.dcov[k][r].diag();
                for (d, v) in ds.iter_mut().zip(s.iter()) {
                    *d += coef * (-0.5 / v);
                }
            }
            CovMats::Kron { lhh, lzz, .. } => {
                let (qn, mn) = (lhh.nrows(), lzz.nrows());
                let hinv = CholFactor::from_lower(lhh.clone()).inverse();
                let zinv = CholFactor::from_lower(lzz.clone()).inverse();
                let (dshh, dszz) = adj.dcov[k][r].kron();
                *dshh += hinv * (-0.5 * coef * mn as f64);
                *dszz += zinv * (-0.5 * coef * qn as f64);
            }
        }
        return;
    }
    let (gl, cl) = (&q.components[l][r], &mats[l][r]);
    match (ck, cl) {
        (CovMats::Diagonal(sk), CovMats::Diagonal(sl)) => {
            let (rows, cols) = gk.mean.shape();
            let mut dm = DMatrix::zeros(rows, cols);
            let mut dc = DMatrix::zeros(rows, cols);
            for idx in 0..gk.mean.len() {
                let c = sk[idx] + sl[idx];
                let rr = gk.mean[idx] - gl.mean[idx];
                dm[idx] = -rr / c;
                dc[idx] = 0.5 * (rr * rr / (c * c) - 1.0 / c);
            }
            adj.dmean[k][r] += &dm * coef;
            adj.dmean[l][r] -= &dm * coef;
            *adj.dcov[k][r].diag() += &dc * coef;
            *adj.dcov[l][r].diag() += &dc * coef;
        }
        _ => {
            let c = ck.dense() + cl.dense();
            let Some(ch) = Cholesky::new(c) else {
                return;
            };
            let (rows, cols) = gk.mean.shape();
            let delta = flat(&(&gk.mean - &gl.mean));
            let v = ch.solve(&delta);
            let cinv = ch.inverse();
            let g = (&v * v.transpose() - cinv) * (0.5 * coef);
            let dm = unflat(&v, rows, cols) * (-coef);
            adj.dmean[k][r] += &dm;
            adj.dmean[l][r] -= &dm;
            for (idx, cm) in [(k, ck), (l, cl)] {
                if let CovMats::Kron { shh, szz, .. } = cm {
                    let (dshh, dszz) = adj.dcov[idx][r].kron();
                    kron_factor_adjoint(&g, shh, szz, dshh, dszz);
                }
            }
        }
    }
}

/// Lower bound on the mixture entropy,
/// `-sum_k pi_k log sum_l pi_l N(m_k; m_l, S_k + S_l)`.
fn entropy_bound_impl(q: &MoGPosterior, mats: &[Vec<CovMats>], adj: Option<&mut PostAdj>) -> f64 {
    let kc = q.n_components();
    let pi = q.weights();
    let ln_pi = pi.map(f64::ln);
    let groups = q.components[0].len();
    let mut lnn: DMatrix<f64> = DMatrix::zeros(kc, kc);
    for k in 0..kc {
        for l in 0..kc {
            lnn[(k, l)] = (0..groups)
                .map(|r| {
                    pair_lnn(
                        &q.components[k][r],
                        &mats[k][r],
                        &q.components[l][r],
                        &mats[l][r],
                        k == l,
                    )
                })
                .sum();
        }
    }
    let ln_z: Vec<f64> = (0..kc)
        .map(|k| {
            let terms: Vec<f64> = (0..kc).map(|l| ln_pi[l] + lnn[(k, l)]).collect();
            log_sum_exp(&terms)
        })
        .collect();
    let value = -(0..kc).map(|k| pi[k] * ln_z[k]).sum::<f64>();

    if let Some(adj) = adj {
        for k in 0..kc {
            let back: f64 = (0..kc).map(|j| pi[j] * (lnn[(j, k)] - ln_z[j]).exp()).sum();
            adj.dpi[k] += -ln_z[k] - back;
            for l in 0..kc {
                let coef = -pi[k] * (ln_pi[l] + lnn[(k, l)] - ln_z[k]).exp();
                if coef == 0.0 {
                    continue;
                }
                for r in 0..groups {
                    pair_lnn_grad(coef, k, l, r, q, mats, adj);
                }
            }
        }
    }
    value
}

/// Entropy lower bound of the posterior mixture.
pub fn entropy_bound(q: &MoGPosterior) -> f64 {
    entropy_bound_impl(q, &q.materialize(), None)
}

/// Per-point ELL output (and adjoints when requested).
struct PointOut {
    ell: f64,
    dpi: Vec<f64>,
    /// `[k][r]`
    dmu: Vec<Vec<DVector<f64>>>,
    dcov: Vec<Vec<DMatrix<f64>>>,
    dlog_noise: Vec<f64>,
    dweights: Option<DMatrix<f64>>,
}

/// Marginal of the group latents at local point `i` under one component.
fn group_marginal(ctx: &GroupCtx, gp: &GroupPosterior, cov: &CovMats, i: usize) -> LatentMarginal {
    let a = ctx.blocks.interp.row(i).transpose();
    let (qv, _) = ctx.cond_var(i);
    let mean = &gp.mean * &a;
    let mut c = &ctx.blocks.khh_matrix * qv;
    match cov {
        CovMats::Diagonal(s) => {
            let a2 = a.map(|v| v * v);
            let d = s * a2;
            for j in 0..d.len() {
                c[(j, j)] += d[j];
            }
        }
        CovMats::Kron { shh, szz, .. } => {
            let t = (a.transpose() * szz * &a)[(0, 0)];
            c += shh * t;
        }
    }
    LatentMarginal { mean, cov: c }
}

#[allow(clippy::too_many_arguments)]
fn ell_point(
    model: &Model,
    q: &MoGPosterior,
    mats: &[Vec<CovMats>],
    ctxs: &[GroupCtx],
    pi: &DVector<f64>,
    y: &[f64],
    i: usize,
    stream: u64,
    opts: &EvalOptions,
    scale: f64,
) -> Result<PointOut> {
    let kc = q.n_components();
    let groups = &model.groups;
    let tasks = y.len();
    let ladder = JitterLadder::exact_first();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(stream);

    let mut mus = Vec::with_capacity(kc);
    let mut facs = Vec::with_capacity(kc);
    for k in 0..kc {
        let mut mk = Vec::with_capacity(groups.len());
        let mut fk = Vec::with_capacity(groups.len());
        for (r, ctx) in ctxs.iter().enumerate() {
            let lm = group_marginal(ctx, &q.components[k][r], &mats[k][r], i);
            fk.push(chol(&lm.cov, &ladder)?);
            mk.push(lm.mean);
        }
        mus.push(mk);
        facs.push(fk);
    }

    let s_count = opts.samples.max(1);
    let mut f = vec![0.0; model.n_latent];
    let mut df = vec![0.0; model.n_latent];
    let mut means = vec![0.0; tasks];
    let mut resid = vec![0.0; tasks];
    let mut dlog_noise = vec![0.0; tasks];
    let mut dweights = match (&model.likelihood, opts.with_grad) {
        (Likelihood::Lcm { weights }, true) => {
            Some(DMatrix::zeros(weights.nrows(), weights.ncols()))
        }
        _ => None,
    };
    let mut eps: Vec<DVector<f64>> = groups.iter().map(|g| DVector::zeros(g.size())).collect();
    let mut dmu: Vec<Vec<DVector<f64>>> = Vec::new();
    let mut dl: Vec<Vec<DMatrix<f64>>> = Vec::new();
    if opts.with_grad {
        for _ in 0..kc {
            dmu.push(groups.iter().map(|g| DVector::zeros(g.size())).collect());
            dl.push(
                groups
                    .iter()
                    .map(|g| DMatrix::zeros(g.size(), g.size()))
                    .collect(),
            );
        }
    }
    let mut ell = 0.0;
    let mut dpi = vec![0.0; kc];
    for k in 0..kc {
        let w = scale * pi[k] / s_count as f64;
        let mut acc = 0.0;
        for _ in 0..s_count {
            for (r, g) in groups.iter().enumerate() {
                for e in eps[r].iter_mut() {
                    *e = StandardNormal.sample(&mut rng);
                }
                let v = facs[k][r].l() * &eps[r] + &mus[k][r];
                for (j, &member) in g.members.iter().enumerate() {
                    f[member] = v[j];
                }
            }
            let lp = if opts.with_grad {
                df.iter_mut().for_each(|v| *v = 0.0);
                let lp = log_prob_with_grad(
                    &model.likelihood,
                    &model.noise,
                    y,
                    &f,
                    &mut means,
                    &mut resid,
                    Some(LikGrad {
                        weight: w,
                        df: &mut df,
                        dlog_noise: &mut dlog_noise,
                        dweights: dweights.as_mut(),
                    }),
                );
                for (r, g) in groups.iter().enumerate() {
                    let dv = DVector::from_iterator(g.size(), g.members.iter().map(|&j| df[j]));
                    dmu[k][r] += &dv;
                    dl[k][r] += &dv * eps[r].transpose();
                }
                lp
            } else {
                log_prob_with_grad(
                    &model.likelihood,
                    &model.noise,
                    y,
                    &f,
                    &mut means,
                    &mut resid,
                    None,
                )
            };
            acc += lp;
        }
        let mean_lp = acc / s_count as f64;
        ell += scale * pi[k] * mean_lp;
        dpi[k] = scale * mean_lp;
    }

    let mut dcov = Vec::new();
    if opts.with_grad {
        for k in 0..kc {
            let mut row = Vec::with_capacity(groups.len());
            for r in 0..groups.len() {
                let fac = &facs[k][r];
                let mut dc = chol_backward(fac.l(), &dl[k][r]);
                fac.jitter_adjoint(&mut dc);
                row.push(dc);
            }
            dcov.push(row);
        }
    }
    Ok(PointOut {
        ell,
        dpi,
        dmu,
        dcov,
        dlog_noise,
        dweights,
    })
}

/// Propagates one point's marginal adjoints onto the posterior and the
/// interpolation / conditional-variance adjoints.
fn backprop_point(
    ctxs: &[GroupCtx],
    q: &MoGPosterior,
    mats: &[Vec<CovMats>],
    out: &PointOut,
    i: usize,
    post: &mut PostAdj,
    prior: &mut [PriorAdj],
) {
    for (k, comp) in q.components.iter().enumerate() {
        for (r, ctx) in ctxs.iter().enumerate() {
            let a = ctx.blocks.interp.row(i).transpose();
            let (qv, clamped) = ctx.cond_var(i);
            let dmu = &out.dmu[k][r];
            let dc = &out.dcov[k][r];
            let gp = &comp[r];
            post.dmean[k][r] += dmu * a.transpose();
            let mut da = gp.mean.transpose() * dmu;
            if !clamped {
                prior[r].cond_var[i] += frob(dc, &ctx.blocks.khh_matrix);
            }
            prior[r].khh += dc * qv;
            match &mats[k][r] {
                CovMats::Diagonal(s) => {
                    let ds = post.dcov[k][r].diag();
                    for j in 0..s.nrows() {
                        let dcj = dc[(j, j)];
                        for p in 0..s.ncols() {
                            ds[(j, p)] += dcj * a[p] * a[p];
                            da[p] += 2.0 * dcj * a[p] * s[(j, p)];
                        }
                    }
                }
                CovMats::Kron { shh, szz, .. } => {
                    let za = szz * &a;
                    let t = a.dot(&za);
                    let dt = frob(dc, shh);
                    let (dshh, dszz) = post.dcov[k][r].kron();
                    *dshh += dc * t;
                    *dszz += &a * a.transpose() * dt;
                    da += za * (2.0 * dt);
                }
            }
            let mut row = prior[r].interp.row_mut(i);
            row += da.transpose();
        }
    }
}

fn map_cov_adjoint(cov: &CovParams, mats: &CovMats, adj: &CovAdj) -> CovParams {
    match (cov, mats, adj) {
        (CovParams::Diagonal { .. }, CovMats::Diagonal(s), CovAdj::Diagonal(ds)) => {
            CovParams::Diagonal {
                log_var: ds.component_mul(s),
            }
        }
        (CovParams::KronFull { .. }, CovMats::Kron { lhh, lzz, .. }, CovAdj::Kron { shh, szz }) => {
            CovParams::KronFull {
                hh: factor_adjoint(lhh, shh),
                zz: factor_adjoint(lzz, szz),
            }
        }
        _ => unreachable!("covariance parameter and adjoint kinds disagree"),
    }
}

/// Adjoint of the raw lower-triangular parameters of `S = L Lᵀ` given `dS`.
fn factor_adjoint(l: &DMatrix<f64>, ds: &DMatrix<f64>) -> DMatrix<f64> {
    let mut dl = (ds + ds.transpose()) * l;
    let n = l.nrows();
    for j in 0..n {
        for i in 0..j {
            dl[(i, j)] = 0.0;
        }
        dl[(j, j)] *= l[(j, j)];
    }
    dl
}

fn select_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)])
}

fn check_inputs(model: &Model, q: &MoGPosterior, x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<()> {
    model.validate()?;
    q.check_against(model)?;
    if x.nrows() != y.nrows() {
        return Err(Error::Dimension {
            context: "input and target rows",
            expected: x.nrows(),
            got: y.nrows(),
        });
    }
    if y.ncols() != model.n_tasks() {
        return Err(Error::Dimension {
            context: "target columns",
            expected: model.n_tasks(),
            got: y.ncols(),
        });
    }
    if x.nrows() == 0 {
        return Err(Error::Empty("no training rows".into()));
    }
    Ok(())
}

fn build_ctxs(model: &Model, x: &DMatrix<f64>) -> Result<Vec<GroupCtx>> {
    model
        .groups
        .iter()
        .map(|g| prior_blocks(g, x, &model.input_ladder, &model.function_ladder).map(GroupCtx::new))
        .collect()
}

/// Evaluates the ELBO on the rows `batch` (all rows when `None`); the
/// likelihood term is rescaled to the full data size.
pub fn evaluate(
    model: &Model,
    q: &MoGPosterior,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    batch: Option<&[usize]>,
    opts: &EvalOptions,
) -> Result<Evaluation> {
    check_inputs(model, q, x, y)?;
    let all: Vec<usize>;
    let rows = match batch {
        Some(b) if !b.is_empty() => {
            if let Some(&bad) = b.iter().find(|&&i| i >= x.nrows()) {
                return Err(Error::input(format!("batch row {bad} out of range")));
            }
            b
        }
        _ => {
            all = (0..x.nrows()).collect();
            &all
        }
    };
    let xb = select_rows(x, rows);
    let yb = select_rows(y, rows);
    let scale = x.nrows() as f64 / rows.len() as f64;
    let ctxs = build_ctxs(model, &xb)?;
    let mats = q.materialize();
    let pi = q.weights();
    let kc = q.n_components();

    let mut post = PostAdj {
        dpi: DVector::zeros(kc),
        dmean: q
            .components
            .iter()
            .map(|c| {
                c.iter()
                    .map(|g| DMatrix::zeros(g.mean.nrows(), g.mean.ncols()))
                    .collect()
            })
            .collect(),
        dcov: mats
            .iter()
            .map(|c| c.iter().map(CovAdj::zeros_like).collect())
            .collect(),
    };
    let mut prior: Vec<PriorAdj> = ctxs
        .iter()
        .map(|c| {
            let (qs, m) = (c.blocks.group_size(), c.blocks.kzz.dim());
            PriorAdj {
                khh: DMatrix::zeros(qs, qs),
                kzz: DMatrix::zeros(m, m),
                interp: DMatrix::zeros(rows.len(), m),
                cond_var: DVector::zeros(rows.len()),
            }
        })
        .collect();

    let ent = entropy_bound_impl(q, &mats, opts.with_grad.then_some(&mut post));

    let mut cross = 0.0;
    for k in 0..kc {
        let mut ck = 0.0;
        for (r, ctx) in ctxs.iter().enumerate() {
            let grad = if opts.with_grad {
                Some((
                    pi[k],
                    &mut post.dmean[k][r],
                    &mut post.dcov[k][r],
                    &mut prior[r],
                ))
            } else {
                None
            };
            ck += cross_group(ctx, &q.components[k][r], &mats[k][r], grad);
        }
        cross += pi[k] * ck;
        if opts.with_grad {
            post.dpi[k] += ck;
        }
    }

    let outs: Vec<Result<PointOut>> = (0..rows.len())
        .into_par_iter()
        .map(|i| {
            let yrow: Vec<f64> = yb.row(i).iter().cloned().collect();
            ell_point(
                model,
                q,
                &mats,
                &ctxs,
                &pi,
                &yrow,
                i,
                rows[i] as u64,
                opts,
                scale,
            )
        })
        .collect();
    let mut ell = 0.0;
    let mut grad = None;
    let mut dlog_noise = DVector::zeros(model.n_tasks());
    let mut dweights = match &model.likelihood {
        Likelihood::Lcm { weights } => Some(DMatrix::zeros(weights.nrows(), weights.ncols())),
        _ => None,
    };
    let mut points = Vec::with_capacity(outs.len());
    for o in outs {
        points.push(o?);
    }
    for (i, o) in points.iter().enumerate() {
        ell += o.ell;
        if opts.with_grad {
            for k in 0..kc {
                post.dpi[k] += o.dpi[k];
            }
            for (d, v) in dlog_noise.iter_mut().zip(&o.dlog_noise) {
                *d += v;
            }
            if let (Some(dw), Some(pw)) = (dweights.as_mut(), o.dweights.as_ref()) {
                *dw += pw;
            }
            backprop_point(&ctxs, q, &mats, o, i, &mut post, &mut prior);
        }
    }

    if opts.with_grad {
        let mut gm = model.clone();
        gm.zero();
        gm.noise.log_noise = dlog_noise;
        if let (Likelihood::Lcm { weights }, Some(dw)) = (&mut gm.likelihood, dweights) {
            *weights = dw;
        }
        for (r, (g, ctx)) in model.groups.iter().zip(&ctxs).enumerate() {
            let pa = &mut prior[r];
            let b = &ctx.blocks;
            let kern = &g.input_kernel.expr;
            let mut dtheta = vec![0.0; kern.n_params()];
            let mut dz = DMatrix::zeros(g.inducing.nrows(), g.inducing.ncols());
            // q_n = k(x_n, x_n) - A_n . Knz_n with A = Knz Kzz^{-1}
            let mut dknz = DMatrix::zeros(b.knz.nrows(), b.knz.ncols());
            for n in 0..rows.len() {
                let dq = pa.cond_var[n];
                if dq == 0.0 {
                    continue;
                }
                let mut arow = pa.interp.row_mut(n);
                arow -= b.knz.row(n) * dq;
                let mut krow = dknz.row_mut(n);
                krow -= b.interp.row(n) * dq;
            }
            dknz += &pa.interp * &ctx.kzz_inv;
            pa.kzz -= b.interp.transpose() * &pa.interp * &ctx.kzz_inv;
            let mut dkzz = (&pa.kzz + pa.kzz.transpose()) * 0.5;
            b.kzz.jitter_adjoint(&mut dkzz);
            let want_z = model.train_inducing;
            kern.backprop_gram(&b.z_points, &dkzz, &mut dtheta, want_z.then_some(&mut dz));
            kern.backprop_cross(
                &b.x_points,
                &b.z_points,
                &dknz,
                &mut dtheta,
                want_z.then_some(&mut dz),
            );
            kern.backprop_diag(&b.x_points, pa.cond_var.as_slice(), &mut dtheta);
            let gg = &mut gm.groups[r];
            gg.input_kernel.expr.set_params(&dtheta);
            if want_z {
                gg.inducing = dz;
            }
            if let (Some(fk), Some(h), Some(fac)) = (&g.fn_kernel, &g.features, &b.khh) {
                let mut dkhh = (&pa.khh + pa.khh.transpose()) * 0.5;
                fac.jitter_adjoint(&mut dkhh);
                let mut dfn = vec![0.0; fk.n_params()];
                fk.backprop_gram(&crate::kernel::Points::from_rows(h), &dkhh, &mut dfn, None);
                if let Some(gk) = gg.fn_kernel.as_mut() {
                    gk.set_params(&dfn);
                }
            }
        }

        let mut gq = q.clone();
        let dpi_mean = post.dpi.dot(&pi);
        gq.logits = DVector::from_fn(kc, |k, _| pi[k] * (post.dpi[k] - dpi_mean));
        for k in 0..kc {
            for r in 0..ctxs.len() {
                gq.components[k][r].mean = post.dmean[k][r].clone();
                gq.components[k][r].cov =
                    map_cov_adjoint(&q.components[k][r].cov, &mats[k][r], &post.dcov[k][r]);
            }
        }
        grad = Some(Gradient {
            model: gm,
            posterior: gq,
        });
    }

    Ok(Evaluation {
        terms: ElboTerms {
            total: ent + cross + ell,
            ent,
            cross,
            ell,
        },
        grad,
        stats: EvalStats {
            inducing_factorizations: model.inducing_factorizations(),
            batch_size: rows.len(),
        },
    })
}

/// ELBO value on all rows without gradients.
pub fn elbo(
    model: &Model,
    q: &MoGPosterior,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    samples: usize,
    seed: u64,
) -> Result<ElboTerms> {
    let opts = EvalOptions {
        samples,
        seed,
        with_grad: false,
    };
    Ok(evaluate(model, q, x, y, None, &opts)?.terms)
}

/// Expected log prior of the inducing variables.
pub fn cross_entropy(model: &Model, q: &MoGPosterior, x: &DMatrix<f64>) -> Result<f64> {
    model.validate()?;
    q.check_against(model)?;
    let ctxs = build_ctxs(model, &x.rows(0, x.nrows().min(1)).into_owned())?;
    let mats = q.materialize();
    let pi = q.weights();
    let mut total = 0.0;
    for k in 0..q.n_components() {
        for (r, ctx) in ctxs.iter().enumerate() {
            total += pi[k] * cross_group(ctx, &q.components[k][r], &mats[k][r], None);
        }
    }
    Ok(total)
}

/// Per-point, per-component, per-group marginals `q(f_n)`: `[n][k][r]`.
pub fn marginal_qfn(
    model: &Model,
    q: &MoGPosterior,
    x: &DMatrix<f64>,
) -> Result<Vec<Vec<Vec<LatentMarginal>>>> {
    model.validate()?;
    q.check_against(model)?;
    let ctxs = build_ctxs(model, x)?;
    let mats = q.materialize();
    Ok((0..x.nrows())
        .into_par_iter()
        .map(|i| {
            (0..q.n_components())
                .map(|k| {
                    ctxs.iter()
                        .enumerate()
                        .map(|(r, ctx)| group_marginal(ctx, &q.components[k][r], &mats[k][r], i))
                        .collect()
                })
                .collect()
        })
        .collect())
}
