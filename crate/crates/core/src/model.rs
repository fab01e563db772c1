//! Model assembly: latent-function indexing, grouping schemes, per-group
//! prior blocks and the Gaussian mixing likelihood.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kernel::{KernelExpr, KernelSpec, Points};
use crate::kron::{chol, CholFactor, JitterLadder};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Bijection between a flat latent index and its role in a GPRN.
///
/// Weights come first, row-major (`W[i, l]` at `i * qg + l`), followed by the
/// `qg` node functions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GprnIndex {
    pub tasks: usize,
    pub nodes: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LatentRole {
    Weight { row: usize, col: usize },
    Node(usize),
}

impl GprnIndex {
    pub fn new(tasks: usize, nodes: usize) -> Self {
        GprnIndex { tasks, nodes }
    }

    pub fn n_latent(&self) -> usize {
        self.nodes * (self.tasks + 1)
    }

    pub fn weight(&self, row: usize, col: usize) -> usize {
        debug_assert!(row < self.tasks && col < self.nodes);
        row * self.nodes + col
    }

    pub fn node(&self, l: usize) -> usize {
        debug_assert!(l < self.nodes);
        self.tasks * self.nodes + l
    }

    pub fn role(&self, j: usize) -> LatentRole {
        assert!(j < self.n_latent(), "latent index {j} out of range");
        if j < self.tasks * self.nodes {
            LatentRole::Weight {
                row: j / self.nodes,
                col: j % self.nodes,
            }
        } else {
            LatentRole::Node(j - self.tasks * self.nodes)
        }
    }

    pub fn index(&self, role: LatentRole) -> usize {
        match role {
            LatentRole::Weight { row, col } => self.weight(row, col),
            LatentRole::Node(l) => self.node(l),
        }
    }
}

/// One prior group: latent functions sharing `k(x, x') * k(h_j, h_j')`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub id: usize,
    pub members: Vec<usize>,
    pub input_kernel: KernelSpec,
    /// Cross-function kernel over rows of `features`; absent for singletons.
    pub fn_kernel: Option<KernelExpr>,
    pub features: Option<DMatrix<f64>>,
    /// Inducing inputs in the input kernel's projected space (`m x |slice|`).
    pub inducing: DMatrix<f64>,
}

impl GroupSpec {
    pub fn singleton(id: usize, member: usize, input_kernel: KernelSpec) -> Self {
        let d = input_kernel.feature_slice.len();
        GroupSpec {
            id,
            members: vec![member],
            input_kernel,
            fn_kernel: None,
            features: None,
            inducing: DMatrix::zeros(0, d),
        }
    }

    pub fn coupled(
        id: usize,
        members: Vec<usize>,
        input_kernel: KernelSpec,
        fn_kernel: KernelExpr,
        features: DMatrix<f64>,
    ) -> Self {
        if members.len() == 1 {
            return Self::singleton(id, members[0], input_kernel);
        }
        let d = input_kernel.feature_slice.len();
        GroupSpec {
            id,
            members,
            input_kernel,
            fn_kernel: Some(fn_kernel),
            features: Some(features),
            inducing: DMatrix::zeros(0, d),
        }
    }

    pub fn size(&self) -> usize {
        self.members.len()
    }

    pub fn n_inducing(&self) -> usize {
        self.inducing.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let q = self.size();
        if q == 0 {
            return Err(Error::input(format!("group {} is empty", self.id)));
        }
        match (&self.fn_kernel, &self.features) {
            (Some(k), Some(h)) => {
                if q == 1 {
                    return Err(Error::input(format!(
                        "group {} is a singleton but carries a feature matrix",
                        self.id
                    )));
                }
                if h.nrows() != q {
                    return Err(Error::Dimension {
                        context: "group feature rows",
                        expected: q,
                        got: h.nrows(),
                    });
                }
                if k.input_dim() > h.ncols() {
                    return Err(Error::Dimension {
                        context: "function kernel feature columns",
                        expected: k.input_dim(),
                        got: h.ncols(),
                    });
                }
            }
            (None, None) => {
                if q > 1 {
                    return Err(Error::input(format!(
                        "group {} has {q} members but no feature matrix",
                        self.id
                    )));
                }
            }
            _ => {
                return Err(Error::input(format!(
                    "group {}: function kernel and feature matrix must be given together",
                    self.id
                )))
            }
        }
        if self.inducing.ncols() != self.input_kernel.feature_slice.len() {
            return Err(Error::Dimension {
                context: "inducing input columns",
                expected: self.input_kernel.feature_slice.len(),
                got: self.inducing.ncols(),
            });
        }
        Ok(())
    }
}

/// How task outputs are formed from latent function values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Likelihood {
    /// `y = W g + noise` with both `W` and `g` latent.
    Gprn(GprnIndex),
    /// `y = W g + noise` with `W` a deterministic parameter matrix (tasks x nodes).
    Lcm { weights: DMatrix<f64> },
    /// Latent `i` is the noise-free value of task `i`.
    Direct,
}

impl Likelihood {
    /// Writes the noise-free task means for latent values `f`.
    pub fn task_means(&self, f: &[f64], out: &mut [f64]) {
        match self {
            Likelihood::Gprn(ix) => {
                let g = &f[ix.tasks * ix.nodes..];
                for (i, o) in out.iter_mut().enumerate() {
                    let w = &f[i * ix.nodes..(i + 1) * ix.nodes];
                    *o = w.iter().zip(g).map(|(a, b)| a * b).sum();
                }
            }
            Likelihood::Lcm { weights } => {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = (0..weights.ncols()).map(|l| weights[(i, l)] * f[l]).sum();
                }
            }
            Likelihood::Direct => out.copy_from_slice(&f[..out.len()]),
        }
    }

    /// Adds `weight * d log p / d f` (and noise / LCM weight adjoints) for
    /// residuals `r = y - mean` already divided by the noise variances.
    fn backprop_means(
        &self,
        f: &[f64],
        scaled_resid: &[f64],
        weight: f64,
        df: &mut [f64],
        dweights: Option<&mut DMatrix<f64>>,
    ) {
        match self {
            Likelihood::Gprn(ix) => {
                let off = ix.tasks * ix.nodes;
                for (i, r) in scaled_resid.iter().enumerate() {
                    if *r == 0.0 {
                        continue;
                    }
                    let wr = weight * r;
                    for l in 0..ix.nodes {
                        df[i * ix.nodes + l] += wr * f[off + l];
                        df[off + l] += wr * f[i * ix.nodes + l];
                    }
                }
            }
            Likelihood::Lcm { weights } => {
                let mut dw = dweights;
                for (i, r) in scaled_resid.iter().enumerate() {
                    let wr = weight * r;
                    for l in 0..weights.ncols() {
                        df[l] += wr * weights[(i, l)];
                        if let Some(dw) = dw.as_deref_mut() {
                            dw[(i, l)] += wr * f[l];
                        }
                    }
                }
            }
            Likelihood::Direct => {
                for (i, r) in scaled_resid.iter().enumerate() {
                    df[i] += weight * r;
                }
            }
        }
    }
}

/// Per-task Gaussian noise, stored as log variances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodParams {
    pub log_noise: DVector<f64>,
}

impl LikelihoodParams {
    pub fn new(tasks: usize, variance: f64) -> Self {
        LikelihoodParams {
            log_noise: DVector::from_element(tasks, variance.ln()),
        }
    }

    pub fn variances(&self) -> DVector<f64> {
        self.log_noise.map(f64::exp)
    }
}

/// `log N(y; W g, diag(noise))`; NaN targets are treated as missing.
pub fn log_likelihood(
    y: &[f64],
    w: &DMatrix<f64>,
    g: &DVector<f64>,
    params: &LikelihoodParams,
) -> Result<f64> {
    if w.nrows() != y.len() || w.ncols() != g.len() || params.log_noise.len() != y.len() {
        return Err(Error::Dimension {
            context: "log_likelihood",
            expected: y.len(),
            got: w.nrows(),
        });
    }
    let mean = w * g;
    Ok(y.iter()
        .zip(mean.iter())
        .zip(params.log_noise.iter())
        .filter(|((y, _), _)| !y.is_nan())
        .map(|((y, m), ln)| {
            let r = y - m;
            -0.5 * (LN_2PI + ln + r * r * (-ln).exp())
        })
        .sum())
}

/// A complete model: groups, likelihood and noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub groups: Vec<GroupSpec>,
    pub likelihood: Likelihood,
    pub noise: LikelihoodParams,
    pub n_latent: usize,
    /// Whether inducing inputs are optimized alongside the hyperparameters.
    pub train_inducing: bool,
    pub input_ladder: JitterLadder,
    pub function_ladder: JitterLadder,
}

impl Model {
    pub fn new(groups: Vec<GroupSpec>, likelihood: Likelihood, tasks: usize) -> Result<Self> {
        let n_latent = groups.iter().map(|g| g.size()).sum();
        let model = Model {
            groups,
            likelihood,
            noise: LikelihoodParams::new(tasks, 0.1),
            n_latent,
            train_inducing: true,
            input_ladder: JitterLadder::default(),
            function_ladder: JitterLadder::exact_first(),
        };
        model.validate_structure()?;
        Ok(model)
    }

    pub fn n_tasks(&self) -> usize {
        self.noise.log_noise.len()
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn max_group_size(&self) -> usize {
        self.groups.iter().map(|g| g.size()).max().unwrap_or(0)
    }

    /// Checks the partition and likelihood bookkeeping; inducing inputs may be empty.
    pub fn validate_structure(&self) -> Result<()> {
        check_partition(&self.groups, self.n_latent)?;
        for g in &self.groups {
            g.validate()?;
        }
        let p = self.n_tasks();
        match &self.likelihood {
            Likelihood::Gprn(ix) => {
                if ix.tasks != p || ix.n_latent() != self.n_latent {
                    return Err(Error::input(format!(
                        "GPRN index ({} tasks, {} nodes) does not fit {} tasks / {} latents",
                        ix.tasks, ix.nodes, p, self.n_latent
                    )));
                }
            }
            Likelihood::Lcm { weights } => {
                if weights.nrows() != p || weights.ncols() != self.n_latent {
                    return Err(Error::Dimension {
                        context: "LCM weight matrix",
                        expected: p * self.n_latent,
                        got: weights.len(),
                    });
                }
            }
            Likelihood::Direct => {
                if self.n_latent != p {
                    return Err(Error::Dimension {
                        context: "direct likelihood latents",
                        expected: p,
                        got: self.n_latent,
                    });
                }
            }
        }
        Ok(())
    }

    /// Full validation: structure plus equal, nonzero inducing counts.
    pub fn validate(&self) -> Result<()> {
        self.validate_structure()?;
        let m = self.groups.first().map(|g| g.n_inducing()).unwrap_or(0);
        if m == 0 {
            return Err(Error::input("inducing inputs have not been initialized"));
        }
        if self.groups.iter().any(|g| g.n_inducing() != m) {
            return Err(Error::input(
                "all groups must share the same inducing count",
            ));
        }
        Ok(())
    }

    /// Seeds every group's inducing inputs with a uniform subsample of the
    /// (projected) training inputs.
    pub fn init_inducing(&mut self, x: &DMatrix<f64>, m: usize, seed: u64) -> Result<()> {
        if m == 0 || m > x.nrows() {
            return Err(Error::input(format!(
                "inducing count {m} must be in 1..={}",
                x.nrows()
            )));
        }
        for g in &mut self.groups {
            let xr = g.input_kernel.project_rows(x)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (g.id as u64).wrapping_mul(0x9E37_79B9));
            let mut idx = sample(&mut rng, x.nrows(), m).into_vec();
            idx.sort_unstable();
            g.inducing = DMatrix::from_fn(m, xr.ncols(), |i, j| xr[(idx[i], j)]);
        }
        Ok(())
    }

    /// Number of `m`-dimensional factorizations one ELBO evaluation performs.
    pub fn inducing_factorizations(&self) -> usize {
        self.groups.len()
    }
}

pub fn check_partition(groups: &[GroupSpec], n_latent: usize) -> Result<()> {
    let mut seen = vec![false; n_latent];
    for g in groups {
        for &j in &g.members {
            if j >= n_latent || seen[j] {
                return Err(Error::input(format!(
                    "latent {j} is out of range or appears in more than one group"
                )));
            }
            seen[j] = true;
        }
    }
    if let Some(j) = seen.iter().position(|s| !s) {
        return Err(Error::input(format!("latent {j} belongs to no group")));
    }
    Ok(())
}

/// Prior quantities for one group evaluated at a set of inputs.
#[derive(Clone, Debug)]
pub struct PriorBlocks {
    pub kzz: CholFactor,
    /// Factor of `K_hh`; `None` for singleton groups (where `K_hh = [1]`).
    pub khh: Option<CholFactor>,
    /// `K_hh` including any jitter (1 x 1 identity for singletons).
    pub khh_matrix: DMatrix<f64>,
    /// `k(X, Z)`, n x m.
    pub knz: DMatrix<f64>,
    /// `k(X, Z) K_zz^{-1}`, n x m; row n is the per-point interpolation vector.
    pub interp: DMatrix<f64>,
    /// `k(x_n, x_n) - k(x_n, Z) K_zz^{-1} k(Z, x_n)`.
    pub cond_var: DVector<f64>,
    pub x_points: Points,
    pub z_points: Points,
}

impl PriorBlocks {
    /// `K~_{r(n)} = K_hh * cond_var[n]`.
    pub fn cond_cov(&self, n: usize) -> DMatrix<f64> {
        &self.khh_matrix * self.cond_var[n]
    }

    pub fn group_size(&self) -> usize {
        self.khh_matrix.nrows()
    }
}

/// Factorizes `K_hh` for a group (identity for singletons).
pub fn factor_function_cov(
    group: &GroupSpec,
    ladder: &JitterLadder,
) -> Result<(Option<CholFactor>, DMatrix<f64>)> {
    match (&group.fn_kernel, &group.features) {
        (Some(k), Some(h)) => {
            let khh = k.gram_points(&Points::from_rows(h));
            let f = chol(&khh, ladder)?;
            let mat = f.matrix();
            Ok((Some(f), mat))
        }
        _ => Ok((None, DMatrix::identity(1, 1))),
    }
}

/// Builds the per-group prior blocks at inputs `x` (full feature rows).
pub fn prior_blocks(
    group: &GroupSpec,
    x: &DMatrix<f64>,
    input_ladder: &JitterLadder,
    function_ladder: &JitterLadder,
) -> Result<PriorBlocks> {
    if group.n_inducing() == 0 {
        return Err(Error::input(format!(
            "group {} has no inducing inputs",
            group.id
        )));
    }
    let x_points = Points::from_rows(&group.input_kernel.project_rows(x)?);
    let z_points = Points::from_rows(&group.inducing);
    let kern = &group.input_kernel.expr;
    let kzz = chol(&kern.gram_points(&z_points), input_ladder)?;
    let knz = kern.cross_points(&x_points, &z_points);
    let interp = kzz.solve(&knz.transpose()).transpose();
    let cond_var = DVector::from_fn(x_points.len(), |i, _| {
        let kxx = kern.eval(x_points.row(i), x_points.row(i));
        kxx - interp.row(i).dot(&knz.row(i))
    });
    let (khh, khh_matrix) = factor_function_cov(group, function_ladder)?;
    Ok(PriorBlocks {
        kzz,
        khh,
        khh_matrix,
        knz,
        interp,
        cond_var,
        x_points,
        z_points,
    })
}

/// Column layout of supervised feature rows: `[time, lags(task 0), lags(task 1), ...]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub tasks: usize,
    pub lags: usize,
}

impl FeatureLayout {
    pub fn new(tasks: usize, lags: usize) -> Self {
        FeatureLayout { tasks, lags }
    }

    pub fn time_col(&self) -> usize {
        0
    }

    pub fn lag_cols(&self, task: usize) -> Vec<usize> {
        let start = 1 + task * self.lags;
        (start..start + self.lags).collect()
    }

    pub fn n_cols(&self) -> usize {
        1 + self.tasks * self.lags
    }
}

/// Initial kernel hyperparameters shared by every builder.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelDefaults {
    pub period: f64,
    pub periodic_lengthscale: f64,
    pub lag_lengthscale: f64,
    pub spatial_lengthscale: f64,
    pub support: f64,
}

impl Default for KernelDefaults {
    fn default() -> Self {
        KernelDefaults {
            period: 1440.0,
            periodic_lengthscale: 1.0,
            lag_lengthscale: 1.0,
            spatial_lengthscale: 1.0,
            support: 3.0,
        }
    }
}

impl KernelDefaults {
    /// `Per(t) * RBF(lags of task)`.
    pub fn periodic_lag(&self, layout: &FeatureLayout, task: usize) -> KernelSpec {
        let mut slice = vec![layout.time_col()];
        slice.extend(layout.lag_cols(task));
        let lag_dims: Vec<usize> = (1..=layout.lags).collect();
        let expr = KernelExpr::product(vec![
            KernelExpr::periodic(0, self.period, self.periodic_lengthscale, 1.0),
            KernelExpr::rbf_iso(lag_dims, self.lag_lengthscale, 1.0),
        ]);
        KernelSpec::new(expr, slice).expect("slice covers kernel dims")
    }

    /// `RBF(lags of task)`.
    pub fn lag_only(&self, layout: &FeatureLayout, task: usize) -> KernelSpec {
        let expr = KernelExpr::rbf_iso((0..layout.lags).collect(), self.lag_lengthscale, 1.0);
        KernelSpec::new(expr, layout.lag_cols(task)).expect("slice covers kernel dims")
    }

    /// `RBF(h) * Epanechnikov(h)` over two spatial coordinates.
    pub fn spatial(&self) -> KernelExpr {
        KernelExpr::product(vec![
            KernelExpr::rbf_iso(vec![0, 1], self.spatial_lengthscale, 1.0),
            KernelExpr::epanechnikov(vec![0, 1], self.support),
        ])
    }
}

fn check_sites(tasks: usize, sites: &DMatrix<f64>) -> Result<()> {
    if sites.nrows() != tasks || sites.ncols() != 2 {
        return Err(Error::Dimension {
            context: "site feature matrix (tasks x 2)",
            expected: tasks * 2,
            got: sites.len(),
        });
    }
    Ok(())
}

fn node_groups(
    start_id: usize,
    ix: &GprnIndex,
    layout: &FeatureLayout,
    kd: &KernelDefaults,
) -> Vec<GroupSpec> {
    (0..ix.nodes)
        .map(|l| {
            GroupSpec::singleton(
                start_id + l,
                ix.node(l),
                kd.lag_only(layout, l % layout.tasks),
            )
        })
        .collect()
}

/// Row grouping: each row of `W` is one coupled group over all sites, plus
/// one singleton per node. Requires `Qg = P`.
pub fn build_solar_grouping(
    tasks: usize,
    sites: &DMatrix<f64>,
    kd: &KernelDefaults,
) -> Result<Vec<GroupSpec>> {
    if tasks < 1 {
        return Err(Error::input("solar grouping needs at least one task"));
    }
    check_sites(tasks, sites)?;
    let ix = GprnIndex::new(tasks, tasks);
    let layout = FeatureLayout::new(tasks, 3);
    let mut groups: Vec<GroupSpec> = (0..tasks)
        .map(|i| {
            let members = (0..tasks).map(|l| ix.weight(i, l)).collect();
            GroupSpec::coupled(
                i,
                members,
                kd.periodic_lag(&layout, i),
                kd.spatial(),
                sites.clone(),
            )
        })
        .collect();
    groups.extend(node_groups(tasks, &ix, &layout, kd));
    Ok(groups)
}

/// Off-diagonal row grouping: per row, the off-diagonal weights form one
/// coupled group and the diagonal weight stays independent.
pub fn build_wind_grouping(
    tasks: usize,
    sites: &DMatrix<f64>,
    kd: &KernelDefaults,
) -> Result<Vec<GroupSpec>> {
    if tasks < 2 {
        return Err(Error::input("wind grouping needs at least two tasks"));
    }
    check_sites(tasks, sites)?;
    let ix = GprnIndex::new(tasks, tasks);
    let layout = FeatureLayout::new(tasks, 3);
    let mut groups = Vec::with_capacity(3 * tasks);
    for i in 0..tasks {
        let others: Vec<usize> = (0..tasks).filter(|l| *l != i).collect();
        let members = others.iter().map(|l| ix.weight(i, *l)).collect();
        let h = DMatrix::from_fn(others.len(), 2, |r, c| sites[(others[r], c)]);
        let id = groups.len();
        groups.push(GroupSpec::coupled(
            id,
            members,
            kd.periodic_lag(&layout, i),
            kd.spatial(),
            h,
        ));
        let id = groups.len();
        groups.push(GroupSpec::singleton(
            id,
            ix.weight(i, i),
            kd.periodic_lag(&layout, i),
        ));
    }
    let start = groups.len();
    groups.extend(node_groups(start, &ix, &layout, kd));
    Ok(groups)
}

/// Independent GPRN: every latent function in its own group.
pub fn build_gprn_grouping(tasks: usize, nodes: usize, kd: &KernelDefaults) -> Vec<GroupSpec> {
    let ix = GprnIndex::new(tasks, nodes);
    let layout = FeatureLayout::new(tasks, 3);
    let mut groups: Vec<GroupSpec> = (0..tasks * nodes)
        .map(|j| {
            let LatentRole::Weight { row, .. } = ix.role(j) else {
                unreachable!()
            };
            GroupSpec::singleton(j, j, kd.periodic_lag(&layout, row))
        })
        .collect();
    groups.extend(node_groups(tasks * nodes, &ix, &layout, kd));
    groups
}

/// User-declared grouping: each inner list names weights `W[row, col]` that
/// share a coupled prior, with weight `W[i, l]` placed at site `l`. Weights
/// not listed and all nodes become singletons. Requires `Qg = P`.
pub fn build_custom_grouping(
    tasks: usize,
    coupled: &[Vec<[usize; 2]>],
    sites: &DMatrix<f64>,
    kd: &KernelDefaults,
) -> Result<Vec<GroupSpec>> {
    check_sites(tasks, sites)?;
    let ix = GprnIndex::new(tasks, tasks);
    let layout = FeatureLayout::new(tasks, 3);
    let mut used = vec![false; tasks * tasks];
    let mut groups = Vec::new();
    for (k, members) in coupled.iter().enumerate() {
        if members.is_empty() {
            return Err(Error::input(format!("custom group {k} is empty")));
        }
        let mut ids = Vec::with_capacity(members.len());
        for &[row, col] in members {
            if row >= tasks || col >= tasks {
                return Err(Error::input(format!(
                    "custom group {k}: weight [{row}, {col}] is outside a {tasks} x {tasks} weight matrix"
                )));
            }
            let j = ix.weight(row, col);
            if std::mem::replace(&mut used[j], true) {
                return Err(Error::input(format!(
                    "custom group {k}: weight [{row}, {col}] appears in more than one group"
                )));
            }
            ids.push(j);
        }
        let h = DMatrix::from_fn(members.len(), 2, |r, c| sites[(members[r][1], c)]);
        let id = groups.len();
        groups.push(GroupSpec::coupled(
            id,
            ids,
            kd.periodic_lag(&layout, members[0][0]),
            kd.spatial(),
            h,
        ));
    }
    for (j, u) in used.iter().enumerate() {
        if !u {
            let LatentRole::Weight { row, .. } = ix.role(j) else {
                unreachable!()
            };
            let id = groups.len();
            groups.push(GroupSpec::singleton(id, j, kd.periodic_lag(&layout, row)));
        }
    }
    let start = groups.len();
    groups.extend(node_groups(start, &ix, &layout, kd));
    Ok(groups)
}

/// Grouping scheme for the GGP family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroupingScheme {
    SolarRows,
    WindOffdiag,
}

impl FromStr for GroupingScheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "solar-rows" => Ok(GroupingScheme::SolarRows),
            "wind-offdiag" => Ok(GroupingScheme::WindOffdiag),
            other => Err(Error::input(format!("unknown grouping scheme `{other}`"))),
        }
    }
}

/// Model families compared in benchmarks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Ggp,
    Gprn,
    Lcm,
    Mtg,
    Igp,
}

impl Family {
    pub const ALL: [Family; 5] = [
        Family::Ggp,
        Family::Gprn,
        Family::Lcm,
        Family::Mtg,
        Family::Igp,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Family::Ggp => "ggp",
            Family::Gprn => "gprn",
            Family::Lcm => "lcm",
            Family::Mtg => "mtg",
            Family::Igp => "igp",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::input(format!("unknown model family `{s}`")))
    }
}

/// A built (but not yet inducing-initialized) model plus bookkeeping.
#[derive(Clone, Debug)]
pub struct ModelAssembly {
    pub family: Family,
    pub model: Model,
    /// Tasks are stacked into one pooled single-output data set (MTG).
    pub pooled: bool,
    /// Number of groups a single fitted model carries for budget purposes.
    /// IGP counts one per-task model.
    pub budget_groups: usize,
}

/// Assembles a benchmark model family.
///
/// `sites` holds normalized site coordinates (tasks x 2).
pub fn build_benchmark(
    family: Family,
    tasks: usize,
    nodes: usize,
    scheme: GroupingScheme,
    sites: &DMatrix<f64>,
    kd: &KernelDefaults,
) -> Result<ModelAssembly> {
    if tasks == 0 || nodes == 0 {
        return Err(Error::input("task and node counts must be positive"));
    }
    check_sites(tasks, sites)?;
    let layout = FeatureLayout::new(tasks, 3);
    let (model, pooled, budget_groups) = match family {
        Family::Ggp => {
            if nodes != tasks {
                return Err(Error::input("the GGP grouping schemes require Qg = P"));
            }
            let groups = match scheme {
                GroupingScheme::SolarRows => build_solar_grouping(tasks, sites, kd)?,
                GroupingScheme::WindOffdiag => build_wind_grouping(tasks, sites, kd)?,
            };
            let r = groups.len();
            let lik = Likelihood::Gprn(GprnIndex::new(tasks, nodes));
            (Model::new(groups, lik, tasks)?, false, r)
        }
        Family::Gprn => {
            let groups = build_gprn_grouping(tasks, nodes, kd);
            let r = groups.len();
            let lik = Likelihood::Gprn(GprnIndex::new(tasks, nodes));
            (Model::new(groups, lik, tasks)?, false, r)
        }
        Family::Lcm => {
            let groups: Vec<GroupSpec> = (0..nodes)
                .map(|l| GroupSpec::singleton(l, l, kd.periodic_lag(&layout, l % tasks)))
                .collect();
            let weights = DMatrix::from_element(tasks, nodes, 1.0 / (nodes as f64).sqrt());
            (
                Model::new(groups, Likelihood::Lcm { weights }, tasks)?,
                false,
                nodes,
            )
        }
        Family::Igp => {
            let groups = (0..tasks)
                .map(|i| GroupSpec::singleton(i, i, kd.periodic_lag(&layout, i)))
                .collect();
            (Model::new(groups, Likelihood::Direct, tasks)?, false, 1)
        }
        Family::Mtg => {
            // Pooled rows: [time, own lags (3), site lat, site lon].
            let pooled_layout = FeatureLayout::new(1, 3);
            let mut factors = vec![
                KernelExpr::periodic(0, kd.period, kd.periodic_lengthscale, 1.0),
                KernelExpr::rbf_iso(vec![1, 2, 3], kd.lag_lengthscale, 1.0),
            ];
            factors.push(KernelExpr::rbf_iso(vec![4, 5], kd.spatial_lengthscale, 1.0));
            factors.push(KernelExpr::epanechnikov(vec![4, 5], kd.support));
            let spec = KernelSpec::new(
                KernelExpr::product(factors),
                (0..pooled_layout.n_cols() + 2).collect(),
            )?;
            let groups = vec![GroupSpec::singleton(0, 0, spec)];
            (Model::new(groups, Likelihood::Direct, 1)?, true, 1)
        }
    };
    Ok(ModelAssembly {
        family,
        model,
        pooled,
        budget_groups,
    })
}

/// Log density of a scalar Gaussian.
#[inline]
pub fn ln_normal(y: f64, mean: f64, var: f64) -> f64 {
    let r = y - mean;
    -0.5 * ((2.0 * PI * var).ln() + r * r / var)
}

/// Evaluates `log p(y | f)` and, when `grad` is given, adds `weight` times its
/// derivatives into the latent, noise and LCM-weight adjoints.
pub fn log_prob_with_grad(
    lik: &Likelihood,
    noise: &LikelihoodParams,
    y: &[f64],
    f: &[f64],
    means: &mut [f64],
    resid: &mut [f64],
    grad: Option<LikGrad<'_>>,
) -> f64 {
    lik.task_means(f, means);
    let mut lp = 0.0;
    for i in 0..y.len() {
        if y[i].is_nan() {
            resid[i] = 0.0;
            continue;
        }
        let ln = noise.log_noise[i];
        let inv = (-ln).exp();
        let r = y[i] - means[i];
        lp += -0.5 * (LN_2PI + ln + r * r * inv);
        resid[i] = r * inv;
    }
    if let Some(g) = grad {
        for i in 0..y.len() {
            if !y[i].is_nan() {
                let r = y[i] - means[i];
                g.dlog_noise[i] += g.weight * 0.5 * (r * resid[i] - 1.0);
            }
        }
        lik.backprop_means(f, resid, g.weight, g.df, g.dweights);
    }
    lp
}

/// Adjoint buffers for [`log_prob_with_grad`].
pub struct LikGrad<'a> {
    pub weight: f64,
    pub df: &'a mut [f64],
    pub dlog_noise: &'a mut [f64],
    pub dweights: Option<&'a mut DMatrix<f64>>,
}
