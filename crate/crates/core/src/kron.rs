//! Kronecker-structured covariance algebra.
//!
//! A group's latent vector stacks function-major: entry `(j, p)` of a
//! `Q_r x m` block lives at flat index `j * m + p`. Under that ordering
//! `(left ⊗ right) vec(V) = vec(left V rightᵀ)` with `V` read row-major, so
//! every operation reduces to factor-sized solves.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};

/// Diagonal jitter schedule used when a factorization fails.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JitterLadder {
    /// First nonzero rung, relative to the mean absolute diagonal.
    pub base: f64,
    pub multiplier: f64,
    pub max_attempts: usize,
    /// When set, the first attempt uses no jitter at all and the nonzero
    /// rungs follow.
    pub start_at_zero: bool,
}

impl Default for JitterLadder {
    fn default() -> Self {
        JitterLadder {
            base: 1e-6,
            multiplier: 10.0,
            max_attempts: 4,
            start_at_zero: false,
        }
    }
}

impl JitterLadder {
    /// Ladder whose first rung is an unjittered factorization.
    pub fn exact_first() -> Self {
        JitterLadder {
            start_at_zero: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_attempts < 1 {
            return Err(Error::input("jitter ladder needs at least one attempt"));
        }
        if !(self.base > 0.0 && self.multiplier > 1.0) {
            return Err(Error::input(
                "jitter ladder needs base > 0 and multiplier > 1",
            ));
        }
        Ok(())
    }

    /// Relative jitter of rung `attempt` (0-based).
    pub fn relative(&self, attempt: usize) -> f64 {
        if self.start_at_zero {
            if attempt == 0 {
                0.0
            } else {
                self.base * self.multiplier.powi(attempt as i32 - 1)
            }
        } else {
            self.base * self.multiplier.powi(attempt as i32)
        }
    }
}

/// Lower Cholesky factor of `M + jitter * I`.
#[derive(Clone, Debug)]
pub struct CholFactor {
    l: DMatrix<f64>,
    jitter: f64,
    /// `jitter / mean|diag(M)|`; needed to propagate gradients through the jitter.
    relative_jitter: f64,
}

static WATCHED_DIM: AtomicUsize = AtomicUsize::new(usize::MAX);
static WATCHED_COUNT: AtomicUsize = AtomicUsize::new(0);

/// Starts counting successful factorizations of `dim x dim` matrices
/// process-wide and resets the count.
pub fn watch_factorizations(dim: usize) {
    WATCHED_DIM.store(dim, Ordering::SeqCst);
    WATCHED_COUNT.store(0, Ordering::SeqCst);
}

/// Factorizations of the watched dimension since the last `watch_factorizations`.
pub fn watched_factorizations() -> usize {
    WATCHED_COUNT.load(Ordering::SeqCst)
}

/// Factorizes a symmetric matrix, climbing the jitter ladder until it succeeds.
pub fn chol(m: &DMatrix<f64>, ladder: &JitterLadder) -> Result<CholFactor> {
    ladder.validate()?;
    if !m.is_square() {
        return Err(Error::Dimension {
            context: "cholesky (square matrix)",
            expected: m.nrows(),
            got: m.ncols(),
        });
    }
    let n = m.nrows();
    let scale = if n == 0 {
        1.0
    } else {
        let s = m.diagonal().iter().map(|v| v.abs()).sum::<f64>() / n as f64;
        if s > 0.0 && s.is_finite() {
            s
        } else {
            1.0
        }
    };
    let mut last = 0.0;
    for attempt in 0..ladder.max_attempts {
        let rel = ladder.relative(attempt);
        let jitter = rel * scale;
        last = jitter;
        let mut a = m.clone();
        for i in 0..n {
            a[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(a) {
            let l = c.unpack();
            if l.iter().all(|v| v.is_finite()) {
                if WATCHED_DIM.load(Ordering::Relaxed) == n {
                    WATCHED_COUNT.fetch_add(1, Ordering::Relaxed);
                }
                return Ok(CholFactor {
                    l,
                    jitter,
                    relative_jitter: if jitter == 0.0 { 0.0 } else { rel },
                });
            }
        }
    }
    Err(Error::NotPositiveDefinite {
        attempts: ladder.max_attempts,
        jitter: last,
    })
}

impl CholFactor {
    /// Wraps an already lower-triangular factor.
    pub fn from_lower(l: DMatrix<f64>) -> Self {
        CholFactor {
            l,
            jitter: 0.0,
            relative_jitter: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn relative_jitter(&self) -> f64 {
        self.relative_jitter
    }

    /// The factorized matrix, jitter included.
    pub fn matrix(&self) -> DMatrix<f64> {
        &self.l * self.l.transpose()
    }

    pub fn logdet(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|v| v.ln()).sum::<f64>()
    }

    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let y = self
            .l
            .solve_lower_triangular(b)
            .expect("cholesky factor has a nonzero diagonal");
        self.l
            .tr_solve_lower_triangular(&y)
            .expect("cholesky factor has a nonzero diagonal")
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let y = self
            .l
            .solve_lower_triangular(b)
            .expect("cholesky factor has a nonzero diagonal");
        self.l
            .tr_solve_lower_triangular(&y)
            .expect("cholesky factor has a nonzero diagonal")
    }

    /// `L^{-1} b`.
    pub fn solve_lower(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.l
            .solve_lower_triangular(b)
            .expect("cholesky factor has a nonzero diagonal")
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.solve(&DMatrix::identity(self.dim(), self.dim()))
    }

    pub fn trace_inv(&self) -> f64 {
        let linv = self.solve_lower(&DMatrix::identity(self.dim(), self.dim()));
        linv.norm_squared()
    }

    /// Maps an adjoint of the jittered matrix back onto the unjittered input.
    pub fn jitter_adjoint(&self, adj: &mut DMatrix<f64>) {
        if self.relative_jitter == 0.0 {
            return;
        }
        // jitter = rel * mean|diag|; diagonals of covariance matrices are positive.
        let n = self.dim();
        let t = adj.trace() * self.relative_jitter / n as f64;
        for i in 0..n {
            adj[(i, i)] += t;
        }
    }
}

/// `left ⊗ right` held through the Cholesky factors of its two factors.
#[derive(Clone, Debug)]
pub struct KronPSD {
    pub left: CholFactor,
    pub right: CholFactor,
}

impl KronPSD {
    pub fn new(left: CholFactor, right: CholFactor) -> Self {
        KronPSD { left, right }
    }

    pub fn dim(&self) -> usize {
        self.left.dim() * self.right.dim()
    }

    pub fn logdet(&self) -> f64 {
        kron_logdet(&self.left, &self.right)
    }
}

/// Log-determinant of `left ⊗ right`.
pub fn kron_logdet(left: &CholFactor, right: &CholFactor) -> f64 {
    right.dim() as f64 * left.logdet() + left.dim() as f64 * right.logdet()
}

/// `(left ⊗ right)^{-1} b` for a block laid out function-major.
pub fn kron_solve_block(k: &KronPSD, v: &DMatrix<f64>) -> DMatrix<f64> {
    // left^{-1} V right^{-1}
    let x = k.left.solve(v);
    k.right.solve(&x.transpose()).transpose()
}

/// `(left ⊗ right)^{-1} B`, one column of `B` at a time.
pub fn kron_solve(k: &KronPSD, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (q, m) = (k.left.dim(), k.right.dim());
    if b.nrows() != q * m {
        return Err(Error::Dimension {
            context: "kron_solve rows",
            expected: q * m,
            got: b.nrows(),
        });
    }
    let mut out = DMatrix::zeros(b.nrows(), b.ncols());
    for c in 0..b.ncols() {
        let col = b.column(c);
        let v = DMatrix::from_row_slice(q, m, col.as_slice());
        let x = kron_solve_block(k, &v);
        // Row-major flatten of x.
        let xt = x.transpose();
        out.column_mut(c).copy_from_slice(xt.as_slice());
    }
    Ok(out)
}

pub fn kron_trace_inv(k: &KronPSD) -> f64 {
    k.left.trace_inv() * k.right.trace_inv()
}

/// Borrowed view of a group posterior covariance.
#[derive(Clone, Copy, Debug)]
pub enum CovView<'a> {
    /// Diagonal entries laid out as a `Q_r x m` block (function-major).
    Diagonal(&'a DMatrix<f64>),
    /// `hh ⊗ zz`.
    Kron {
        hh: &'a DMatrix<f64>,
        zz: &'a DMatrix<f64>,
    },
    /// Unstructured; not supported by the Kronecker routines.
    Dense(&'a DMatrix<f64>),
}

/// `tr((left ⊗ right)^{-1} S)` for the supported posterior structures.
pub fn trace_inv_times(k: &KronPSD, s: CovView<'_>) -> Result<f64> {
    let (q, m) = (k.left.dim(), k.right.dim());
    match s {
        CovView::Diagonal(d) => {
            if d.shape() != (q, m) {
                return Err(Error::Dimension {
                    context: "trace_inv_times diagonal",
                    expected: q * m,
                    got: d.len(),
                });
            }
            let lh = k.left.inverse().diagonal();
            let rz = k.right.inverse().diagonal();
            Ok((lh.transpose() * d * rz)[(0, 0)])
        }
        CovView::Kron { hh, zz } => {
            if hh.nrows() != q || zz.nrows() != m {
                return Err(Error::Dimension {
                    context: "trace_inv_times kron factors",
                    expected: q * m,
                    got: hh.nrows() * zz.nrows(),
                });
            }
            Ok(k.left.solve(hh).trace() * k.right.solve(zz).trace())
        }
        CovView::Dense(_) => Err(Error::Structure(
            "dense posterior covariance has no Kronecker trace identity".into(),
        )),
    }
}

/// Lower-triangular Cholesky reverse pass.
///
/// Given `L = chol(A)` and the adjoint `dL` (lower part is used), returns the
/// symmetric adjoint of `A`.
pub fn chol_backward(l: &DMatrix<f64>, dl: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let mut p = l.transpose() * dl.lower_triangle();
    for i in 0..n {
        for j in (i + 1)..n {
            p[(i, j)] = 0.0;
        }
        p[(i, i)] *= 0.5;
    }
    // L^{-T} P L^{-1}
    let x = l.tr_solve_lower_triangular(&p).expect("nonzero diagonal");
    let y = l
        .tr_solve_lower_triangular(&x.transpose())
        .expect("nonzero diagonal");
    (&y + y.transpose()) * 0.5
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn kron_dense(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
        assert!(a.nrows() <= 30 && b.nrows() <= 30);
        a.kronecker(b)
    }

    fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        a.transpose() * &a + DMatrix::identity(n, n) * 0.5
    }

    fn exact(m: &DMatrix<f64>) -> CholFactor {
        chol(m, &JitterLadder::exact_first()).unwrap()
    }

    #[test]
    fn identity_factorizes_to_identity() {
        let i = DMatrix::<f64>::identity(4, 4);
        let f = exact(&i);
        assert_eq!(f.jitter(), 0.0);
        assert_eq!(f.l(), &i);
        let f = chol(&i, &JitterLadder::default()).unwrap();
        assert_relative_eq!(f.jitter(), 1e-6);
        assert_relative_eq!(f.l()[(0, 0)], (1.0 + 1e-6f64).sqrt());
    }

    #[test]
    fn reconstruction_within_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in 1..8 {
            let m = random_spd(&mut rng, n);
            let f = chol(&m, &JitterLadder::default()).unwrap();
            let err = (f.matrix() - &m - DMatrix::identity(n, n) * f.jitter()).amax();
            assert!(err < 1e-10, "{err}");
        }
    }

    #[test]
    fn indefinite_matrix_fails_after_ladder() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, -1.0, 3.0]));
        let ladder = JitterLadder::default();
        assert!(ladder.relative(ladder.max_attempts - 1) * 2.0 < 1.0);
        match chol(&m, &ladder) {
            Err(Error::NotPositiveDefinite { attempts, .. }) => assert_eq!(attempts, 4),
            other => panic!("expected failure, got {other:?}"),
        }
    }

    #[test]
    fn ladder_reports_minimal_successful_rung() {
        // Smallest eigenvalue -2e-5 relative to a unit diagonal: rungs 1e-6 and
        // 1e-5 fail, 1e-4 succeeds.
        let mut m = DMatrix::<f64>::identity(2, 2);
        m[(0, 1)] = 1.0 + 2e-5;
        m[(1, 0)] = 1.0 + 2e-5;
        let f = chol(&m, &JitterLadder::default()).unwrap();
        assert_relative_eq!(f.jitter(), 1e-4, max_relative = 1e-12);
        let rungs: Vec<f64> = (0..4)
            .map(|a| JitterLadder::default().relative(a))
            .collect();
        assert!(rungs.windows(2).all(|w| w[1] > w[0]));
        let zero_first: Vec<f64> = (0..4)
            .map(|a| JitterLadder::exact_first().relative(a))
            .collect();
        assert_eq!(zero_first[0], 0.0);
        assert!(zero_first.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn logdet_identity_and_diagonal_cases() {
        let f3 = exact(&DMatrix::identity(3, 3));
        let f5 = exact(&DMatrix::identity(5, 5));
        assert_eq!(kron_logdet(&f3, &f5), 0.0);
        let a = exact(&(DMatrix::identity(2, 2) * 2.0));
        let b = exact(&(DMatrix::identity(3, 3) * 3.0));
        let expected = 3.0 * 2.0 * 2f64.ln() + 2.0 * 3.0 * 3f64.ln();
        assert_relative_eq!(kron_logdet(&a, &b), expected, epsilon = 1e-12);
    }

    #[test]
    fn logdet_matches_dense_kronecker() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = random_spd(&mut rng, 3);
        let b = random_spd(&mut rng, 4);
        let dense = exact(&kron_dense(&a, &b)).logdet();
        assert!((kron_logdet(&exact(&a), &exact(&b)) - dense).abs() < 1e-9);
    }

    #[test]
    fn solve_identity_and_dense_and_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let k = KronPSD::new(
            exact(&DMatrix::identity(2, 2)),
            exact(&DMatrix::identity(3, 3)),
        );
        let b = DMatrix::from_fn(6, 2, |_, _| rng.random_range(-1.0..1.0));
        assert_eq!(kron_solve(&k, &b).unwrap(), b);

        for _ in 0..10 {
            let (q, m) = (rng.random_range(1..=6), rng.random_range(1..=6));
            let a = random_spd(&mut rng, q);
            let c = random_spd(&mut rng, m);
            let k = KronPSD::new(exact(&a), exact(&c));
            let dense = kron_dense(&a, &c);
            let b = DMatrix::from_fn(q * m, 3, |_, _| rng.random_range(-1.0..1.0));
            let got = kron_solve(&k, &b).unwrap();
            let want = dense.clone().lu().solve(&b).unwrap();
            assert!((&got - want).amax() < 1e-8);

            let v = DMatrix::from_fn(q * m, 1, |_, _| rng.random_range(-1.0..1.0));
            let rt = kron_solve(&k, &(&dense * &v)).unwrap();
            assert!((rt - v).amax() < 1e-8);
        }
        assert!(kron_solve(&k, &DMatrix::zeros(5, 1)).is_err());
    }

    #[test]
    fn trace_inv_cases() {
        let k = KronPSD::new(
            exact(&DMatrix::identity(3, 3)),
            exact(&DMatrix::identity(5, 5)),
        );
        assert_relative_eq!(kron_trace_inv(&k), 15.0, epsilon = 1e-12);
        let l = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 4.0]));
        let r = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 5.0]));
        let k = KronPSD::new(exact(&l), exact(&r));
        assert_relative_eq!(kron_trace_inv(&k), 0.9, epsilon = 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let a = random_spd(&mut rng, 4);
        let c = random_spd(&mut rng, 3);
        let dense = kron_dense(&a, &c).try_inverse().unwrap().trace();
        let k = KronPSD::new(exact(&a), exact(&c));
        assert!((kron_trace_inv(&k) - dense).abs() < 1e-9);
    }

    #[test]
    fn trace_inv_times_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let (q, m) = (3, 4);
        let k = KronPSD::new(
            exact(&DMatrix::identity(q, q)),
            exact(&DMatrix::identity(m, m)),
        );
        let ones = DMatrix::from_element(q, m, 1.0);
        assert_relative_eq!(
            trace_inv_times(&k, CovView::Diagonal(&ones)).unwrap(),
            (q * m) as f64
        );

        let a = random_spd(&mut rng, q);
        let c = random_spd(&mut rng, m);
        let k = KronPSD::new(exact(&a), exact(&c));
        let kinv = kron_dense(&a, &c).try_inverse().unwrap();
        let mut single = DMatrix::zeros(q, m);
        single[(1, 2)] = 2.5;
        let p = m + 2;
        assert!(
            (trace_inv_times(&k, CovView::Diagonal(&single)).unwrap() - 2.5 * kinv[(p, p)]).abs()
                < 1e-10
        );

        let sh = random_spd(&mut rng, q);
        let sz = random_spd(&mut rng, m);
        let dense = (&kinv * kron_dense(&sh, &sz)).trace();
        let got = trace_inv_times(&k, CovView::Kron { hh: &sh, zz: &sz }).unwrap();
        assert!((got - dense).abs() < 1e-8);

        assert!(matches!(
            trace_inv_times(&k, CovView::Dense(&sh)),
            Err(Error::Structure(_))
        ));
    }

    #[test]
    fn chol_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let a = random_spd(&mut rng, 4);
        let w = DMatrix::from_fn(4, 4, |_, _| rng.random_range(-1.0..1.0)).lower_triangle();
        let f = |a: &DMatrix<f64>| {
            Cholesky::new(a.clone())
                .unwrap()
                .unpack()
                .component_mul(&w)
                .sum()
        };
        let adj = chol_backward(&Cholesky::new(a.clone()).unwrap().unpack(), &w);
        for i in 0..4 {
            for j in 0..=i {
                let h = 1e-6;
                let mut e = DMatrix::zeros(4, 4);
                e[(i, j)] = h;
                e[(j, i)] = h;
                let fd = (f(&(&a + &e)) - f(&(&a - &e))) / (2.0 * h);
                let an = if i == j {
                    adj[(i, i)]
                } else {
                    2.0 * adj[(i, j)]
                };
                assert!((fd - an).abs() < 1e-6, "({i},{j}) {fd} vs {an}");
            }
        }
    }

    proptest! {
        #[test]
        fn solve_respects_declared_vec_layout(seed in 0u64..1000, q in 1usize..5, m in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_spd(&mut rng, q);
            let c = random_spd(&mut rng, m);
            let k = KronPSD::new(exact(&a), exact(&c));
            // V is m x Q; its column-major vec stacks one block per function.
            let v = DMatrix::from_fn(m, q, |_, _| rng.random_range(-1.0..1.0));
            let vec_v = DMatrix::from_column_slice(q * m, 1, v.as_slice());
            let got = kron_solve(&k, &vec_v).unwrap();
            let want = c.clone().try_inverse().unwrap() * &v * a.clone().try_inverse().unwrap().transpose();
            let want = DMatrix::from_column_slice(q * m, 1, want.as_slice());
            prop_assert!((got - want).amax() < 1e-8);
        }
    }
}
