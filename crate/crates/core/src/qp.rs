//! Weighted least squares over the synthetic-control constraint families.
//!
//! Every problem here has the form
//!
//! ```text
//! minimize (X1 - X0 w)' V (X1 - X0 w)
//! ```
//!
//! with `V` diagonal and `w = (w_1, ..., w_N)`, where `w_1` multiplies the
//! intercept column and `w_2..w_N` the donors. Inequality-constrained sets are
//! solved by a primal active-set method whose working set holds donors pinned
//! at exactly zero, so sparsity can be read off without thresholds. A free
//! intercept is profiled out in closed form before the active-set iterations.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::DesignMatrices;

/// Feasible sets for the weight vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ConstraintSet {
    /// `w_1 = 0`, donors nonnegative and summing to one.
    Conv,
    /// Free `w_1`, donors nonnegative and summing to one.
    PsConv,
    /// Free `w_1`, donors nonnegative.
    Coni,
    /// `w_1 = 0`, donors sum to one, signs free.
    AffineW1,
    /// Free `w_1`, donors sum to one, signs free.
    AffineW2,
}

impl ConstraintSet {
    pub fn intercept_free(self) -> bool {
        matches!(self, Self::PsConv | Self::Coni | Self::AffineW2)
    }

    pub fn has_sum_constraint(self) -> bool {
        !matches!(self, Self::Coni)
    }

    pub fn sign_constrained(self) -> bool {
        matches!(self, Self::Conv | Self::PsConv | Self::Coni)
    }

    /// Whether `omega` lies in the set, up to `tol`.
    pub fn contains(self, omega: &DVector<f64>, tol: f64) -> bool {
        let donors = omega.rows(1, omega.len() - 1);
        if !self.intercept_free() && omega[0].abs() > tol {
            return false;
        }
        if self.has_sum_constraint() && (donors.sum() - 1.0).abs() > tol {
            return false;
        }
        !self.sign_constrained() || donors.iter().all(|&w| w >= -tol)
    }
}

/// Lagrange multipliers of the sum constraint (`lambda`) and of the donor sign
/// constraints (`mu[i]` belongs to `omega[i + 1]`), scaled for the objective
/// without the factor one half.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Duals {
    pub lambda: Option<f64>,
    pub mu: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSolution {
    pub cset: ConstraintSet,
    /// Length N; index 0 is the intercept.
    pub omega: DVector<f64>,
    pub objective: f64,
    /// Indices into `omega` of sign-constrained donors held at exactly zero.
    pub active_set: Vec<usize>,
    pub duals: Duals,
    /// False when the reduced problem was rank deficient and the
    /// minimum-norm optimizer was returned.
    pub unique: bool,
    pub iterations: usize,
}

/// Optimality check of a solution against its constraint set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KktReport {
    pub cset: ConstraintSet,
    pub stationarity: f64,
    pub dual_feasibility: f64,
    pub complementary_slackness: f64,
    pub primal_residual: f64,
    pub tolerance: f64,
    pub unique: bool,
    pub pass: bool,
}

const STEP_TOL: f64 = 1e-12;
const MULT_TOL: f64 = 1e-10;
const KKT_TOL: f64 = 1e-8;
const SVD_RTOL: f64 = 1e-11;

/// Validates `v` as a diagonal weight for `design`.
fn check_inputs(design: &DesignMatrices, v: &DVector<f64>) -> Result<()> {
    design.check()?;
    if v.len() != design.n_rows() {
        return Err(Error::Dimension(format!(
            "weight diagonal has {} entries, design has {} rows",
            v.len(),
            design.n_rows()
        )));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("weight diagonal contains non-finite entries".into()));
    }
    if v.iter().any(|&x| x < 0.0) {
        return Err(Error::Numeric("weight diagonal must be nonnegative".into()));
    }
    Ok(())
}

/// Intercept column, taken from the design when present.
fn intercept_of(design: &DesignMatrices) -> DVector<f64> {
    if design.has_intercept {
        design.x0.column(0).into_owned()
    } else {
        design.intercept_column()
    }
}

/// `(X1 - X0 w)' V (X1 - X0 w)` for a full-length `omega`.
pub fn objective(design: &DesignMatrices, v: &DVector<f64>, omega: &DVector<f64>) -> f64 {
    let r = residual(design, omega);
    r.iter().zip(v.iter()).map(|(ri, vi)| vi * ri * ri).sum()
}

/// `X1 - X0 w` for a full-length `omega`.
pub fn residual(design: &DesignMatrices, omega: &DVector<f64>) -> DVector<f64> {
    let donors = design.donors();
    let mut r = &design.x1 - &donors * omega.rows(1, omega.len() - 1);
    if omega[0] != 0.0 {
        r -= intercept_of(design) * omega[0];
    }
    r
}

/// Minimizes the weighted quadratic over `cset`.
pub fn solve_constrained(design: &DesignMatrices, v: &DVector<f64>, cset: ConstraintSet) -> Result<WeightSolution> {
    if matches!(cset, ConstraintSet::AffineW1 | ConstraintSet::AffineW2) {
        return solve_affine(design, v, cset);
    }
    check_inputs(design, v)?;
    let sqrt_v = v.map(f64::sqrt);
    let mut a = design.donors();
    for (mut row, s) in a.row_iter_mut().zip(sqrt_v.iter()) {
        row *= *s;
    }
    let mut b = design.x1.component_mul(&sqrt_v);
    let c = intercept_of(design).component_mul(&sqrt_v);
    let cc = c.norm_squared();

    if cset.intercept_free() {
        if cc == 0.0 {
            return Err(Error::Numeric("intercept is unidentified: zero weight on every outcome row".into()));
        }
        let ca = a.tr_mul(&c) / cc;
        a -= &c * ca.transpose();
        b -= &c * (c.dot(&b) / cc);
    }

    let max_iter = 50 * design.n_units();
    let core = active_set_lsq(&a, &b, cset.has_sum_constraint(), max_iter)?;

    let n = design.n_units();
    let mut omega = DVector::zeros(n);
    omega.rows_mut(1, n - 1).copy_from(&core.w);
    if cset.intercept_free() {
        let raw_b = design.x1.component_mul(&sqrt_v);
        let raw_a = {
            let mut m = design.donors();
            for (mut row, s) in m.row_iter_mut().zip(sqrt_v.iter()) {
                row *= *s;
            }
            m
        };
        omega[0] = c.dot(&(raw_b - raw_a * &core.w)) / cc;
    }
    let active_set = (0..n - 1).filter(|&i| core.w[i] == 0.0).map(|i| i + 1).collect();
    Ok(WeightSolution {
        cset,
        objective: objective(design, v, &omega),
        omega,
        active_set,
        duals: Duals {
            lambda: core.lambda.map(|l| 2.0 * l),
            mu: core.mu.iter().map(|m| 2.0 * m).collect(),
        },
        unique: core.unique,
        iterations: core.iterations,
    })
}

/// Equality-constrained least squares on the affine sets, solved through
/// the KKT linear system. Signs are unrestricted.
pub fn solve_affine(design: &DesignMatrices, v: &DVector<f64>, cset: ConstraintSet) -> Result<WeightSolution> {
    if !matches!(cset, ConstraintSet::AffineW1 | ConstraintSet::AffineW2) {
        return Err(Error::Config(format!("{cset:?} is not an affine constraint set")));
    }
    check_inputs(design, v)?;
    let donors = design.donors();
    let nd = donors.ncols();
    let free_intercept = cset.intercept_free();
    let lead = usize::from(free_intercept);
    let k = nd + lead;

    let m = if free_intercept {
        let mut m = DMatrix::zeros(design.n_rows(), k);
        m.set_column(0, &intercept_of(design));
        m.columns_mut(1, nd).copy_from(&donors);
        m
    } else {
        donors
    };
    let mut vm = m.clone();
    for (mut row, w) in vm.row_iter_mut().zip(v.iter()) {
        row *= *w;
    }
    let h = 2.0 * m.tr_mul(&vm);
    let g = 2.0 * vm.tr_mul(&design.x1);

    let mut kkt = DMatrix::zeros(k + 1, k + 1);
    kkt.view_mut((0, 0), (k, k)).copy_from(&h);
    for i in lead..k {
        kkt[(i, k)] = 1.0;
        kkt[(k, i)] = 1.0;
    }
    let mut rhs = DVector::zeros(k + 1);
    rhs.rows_mut(0, k).copy_from(&g);
    rhs[k] = 1.0;

    let svd = kkt.clone().svd(true, true);
    let max_sv = svd.singular_values.max();
    let null_dim = svd.singular_values.iter().filter(|&&s| s <= max_sv * 1e-12).count();
    if null_dim > 0 {
        return Err(Error::Rank { null_dim });
    }
    let sol = kkt
        .lu()
        .solve(&rhs)
        .ok_or(Error::Rank { null_dim: 1 })?;

    let n = design.n_units();
    let mut omega = DVector::zeros(n);
    if free_intercept {
        omega[0] = sol[0];
    }
    omega.rows_mut(1, nd).copy_from(&sol.rows(lead, nd));
    Ok(WeightSolution {
        cset,
        objective: objective(design, v, &omega),
        omega,
        active_set: Vec::new(),
        duals: Duals { lambda: Some(sol[k]), mu: vec![0.0; nd] },
        unique: true,
        iterations: 1,
    })
}

/// Checks stationarity, dual feasibility, complementary slackness and primal
/// feasibility of `sol` for `cset`, recomputing the multipliers from the
/// gradient rather than trusting those stored in the solution.
pub fn kkt_certificate(sol: &WeightSolution, design: &DesignMatrices, v: &DVector<f64>, cset: ConstraintSet) -> KktReport {
    let n = design.n_units();
    let omega = &sol.omega;
    let r = residual(design, omega);
    let vr = r.component_mul(v);
    let donors = design.donors();
    let intercept = intercept_of(design);

    // gradient of the objective: -2 X0' V r
    let grad_donor = -2.0 * donors.tr_mul(&vr);
    let grad_intercept = -2.0 * intercept.dot(&vr);

    let scale = {
        let vx1 = design.x1.component_mul(v);
        let cross = donors.tr_mul(&vx1).amax();
        let diag = (0..donors.ncols())
            .map(|i| donors.column(i).component_mul(&donors.column(i)).dot(v))
            .fold(0.0, f64::max);
        1.0f64.max(2.0 * cross).max(2.0 * diag)
    };

    let positive: Vec<usize> = if cset.sign_constrained() {
        (0..n - 1).filter(|&i| omega[i + 1] != 0.0).collect()
    } else {
        (0..n - 1).collect()
    };
    let lambda = if cset.has_sum_constraint() && !positive.is_empty() {
        -positive.iter().map(|&i| grad_donor[i]).sum::<f64>() / positive.len() as f64
    } else {
        0.0
    };

    let mut stationarity: f64 = if cset.intercept_free() { grad_intercept.abs() } else { 0.0 };
    let mut dual_feasibility: f64 = 0.0;
    let mut complementary: f64 = 0.0;
    let mut primal: f64 = if cset.intercept_free() { 0.0 } else { omega[0].abs() };
    if cset.has_sum_constraint() {
        primal = primal.max((omega.rows(1, n - 1).sum() - 1.0).abs());
    }

    for i in 0..n - 1 {
        let w = omega[i + 1];
        let mu = grad_donor[i] + lambda;
        if cset.sign_constrained() {
            primal = primal.max(-w);
            complementary = complementary.max((mu * w).abs());
            if w == 0.0 {
                dual_feasibility = dual_feasibility.max(-mu);
            } else {
                stationarity = stationarity.max(mu.abs());
            }
        } else {
            stationarity = stationarity.max(mu.abs());
        }
    }

    let tolerance = KKT_TOL * scale;
    let pass = stationarity <= tolerance
        && dual_feasibility <= tolerance
        && complementary <= tolerance
        && primal <= KKT_TOL;
    KktReport {
        cset,
        stationarity,
        dual_feasibility,
        complementary_slackness: complementary,
        primal_residual: primal,
        tolerance,
        unique: sol.unique,
        pass,
    }
}

struct CoreSolution {
    w: DVector<f64>,
    lambda: Option<f64>,
    mu: Vec<f64>,
    unique: bool,
    iterations: usize,
}

/// Primal active-set method for `min 1/2 |A w - b|^2` subject to `w >= 0`
/// and, when `sum_to_one`, `1'w = 1`.
fn active_set_lsq(a: &DMatrix<f64>, b: &DVector<f64>, sum_to_one: bool, max_iter: usize) -> Result<CoreSolution> {
    let n = a.ncols();
    let mut w = DVector::zeros(n);
    let mut free = vec![false; n];

    if sum_to_one {
        // start at the best single donor
        let best = (0..n)
            .map(|k| (k, (a.column(k) - b).norm_squared()))
            .min_by(|x, y| x.1.total_cmp(&y.1))
            .map(|(k, _)| k)
            .unwrap_or(0);
        w[best] = 1.0;
        free[best] = true;
    }

    let scale = 1.0 + a.tr_mul(b).amax() + (0..n).map(|k| a.column(k).norm_squared()).fold(0.0, f64::max);
    let mult_tol = MULT_TOL * scale;

    for iter in 0..max_iter {
        let idx: Vec<usize> = (0..n).filter(|&i| free[i]).collect();
        let (w_free, full_rank) = if idx.is_empty() {
            (DVector::zeros(0), true)
        } else {
            equality_subproblem(&a.select_columns(idx.iter()), b, sum_to_one)
        };
        let mut target = DVector::zeros(n);
        for (k, &i) in idx.iter().enumerate() {
            target[i] = w_free[k];
        }
        let p = &target - &w;

        if p.amax() <= STEP_TOL * (1.0 + w.amax()) {
            let grad = a.tr_mul(&(a * &w - b));
            let lambda = if sum_to_one && !idx.is_empty() {
                -idx.iter().map(|&i| grad[i]).sum::<f64>() / idx.len() as f64
            } else {
                0.0
            };
            let mu: Vec<f64> = (0..n).map(|i| if free[i] { 0.0 } else { grad[i] + lambda }).collect();
            let entering = (0..n)
                .filter(|&i| !free[i])
                .min_by(|&x, &y| mu[x].total_cmp(&mu[y]))
                .filter(|&i| mu[i] < -mult_tol);
            match entering {
                Some(i) => free[i] = true,
                None => {
                    return Ok(CoreSolution {
                        w,
                        lambda: sum_to_one.then_some(lambda),
                        mu,
                        unique: full_rank,
                        iterations: iter + 1,
                    });
                }
            }
            continue;
        }

        let mut alpha = 1.0;
        let mut blocking = None;
        for &i in &idx {
            if p[i] < 0.0 {
                let ratio = -w[i] / p[i];
                if ratio < alpha {
                    alpha = ratio;
                    blocking = Some(i);
                }
            }
        }
        match blocking {
            None => w = target,
            Some(j) => {
                w += alpha * &p;
                w[j] = 0.0;
                free[j] = false;
            }
        }
        // round-off can push other free coordinates just below zero
        for i in 0..n {
            if free[i] && w[i] <= 0.0 && (!sum_to_one || free.iter().filter(|&&f| f).count() > 1) {
                w[i] = 0.0;
                free[i] = false;
            }
        }
    }
    Err(Error::IterationLimit(max_iter))
}

/// Minimum-norm minimizer of `|A w - b|` over `w`, or over `1'w = 1`.
/// The flag reports whether the reduced system had full column rank.
fn equality_subproblem(a: &DMatrix<f64>, b: &DVector<f64>, sum_to_one: bool) -> (DVector<f64>, bool) {
    let k = a.ncols();
    if !sum_to_one {
        return min_norm_lsq(a, b);
    }
    if k == 1 {
        return (DVector::from_element(1, 1.0), true);
    }
    // w = w0 + N z with w0 = 1/k and N an orthonormal basis of 1-perp,
    // taken from the Householder reflector mapping e_1 onto 1/sqrt(k).
    let w0 = DVector::from_element(k, 1.0 / k as f64);
    let mut u = DVector::from_element(k, -1.0 / (k as f64).sqrt());
    u[0] += 1.0;
    let uu = u.norm_squared();
    let basis = DMatrix::from_fn(k, k - 1, |r, c| {
        let col = c + 1;
        let e = if r == col { 1.0 } else { 0.0 };
        e - 2.0 * u[r] * u[col] / uu
    });
    let (z, full_rank) = min_norm_lsq(&(a * &basis), &(b - a * &w0));
    (w0 + basis * z, full_rank)
}

fn min_norm_lsq(a: &DMatrix<f64>, b: &DVector<f64>) -> (DVector<f64>, bool) {
    let k = a.ncols();
    if a.nrows() == 0 {
        return (DVector::zeros(k), k == 0);
    }
    let svd = a.clone().svd(true, true);
    let max_sv = svd.singular_values.max();
    if max_sv == 0.0 {
        return (DVector::zeros(k), false);
    }
    let eps = max_sv * SVD_RTOL;
    let rank = svd.singular_values.iter().filter(|&&s| s > eps).count();
    let x = svd.solve(b, eps).unwrap_or_else(|_| DVector::zeros(k));
    (x, rank == k)
}
