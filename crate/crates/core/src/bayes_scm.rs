//! Bayesian synthetic control: MAP weights by Monte Carlo EM, donor
//! selection from the MAP zeros, Gibbs sampling of the weight posterior and
//! treatment-effect summaries.
//!
//! The weighting matrix is `V = (1/nu) Diag(I_T0, xi_1 I_R1, ..., xi_p I_Rp)`
//! with `nu ~ InvGamma(c0, d0)` and `xi_j ~ Bernoulli(eta0_j)`. The weights
//! live on the parallel-shift convex hull: free intercept, donors in `A`
//! nonnegative and summing to one, donors outside `A` fixed at zero.

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{Method, ScmFit, Tuning};
use crate::panel::{build_design, DesignMatrices, Panel, RowBlocks};
use crate::qp::{self, ConstraintSet};
use crate::sampling::{bernoulli, inverse_gamma, standard_normal, truncated_normal, RngStream};
use crate::stats::mean;

pub use crate::stats::hpd_interval;

/// Weights below this magnitude are treated as zero when forming the donor pool.
pub const ZERO_THRESHOLD: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub c0: f64,
    pub d0: f64,
    /// Prior inclusion probability for each covariate block.
    pub eta0: Vec<f64>,
}

impl Hyperparams {
    /// `c0 = d0 = 0.5` and every `eta0_j = 0.5`.
    pub fn defaults(n_covariates: usize) -> Self {
        Self { c0: 0.5, d0: 0.5, eta0: vec![0.5; n_covariates] }
    }

    fn validate(&self, n_covariates: usize) -> Result<()> {
        if !(self.c0 > 0.0 && self.d0 > 0.0 && self.c0.is_finite() && self.d0.is_finite()) {
            return Err(Error::Config(format!("c0 and d0 must be positive (got {}, {})", self.c0, self.d0)));
        }
        if self.eta0.len() != n_covariates {
            return Err(Error::Config(format!(
                "eta0 has {} entries for {n_covariates} covariate blocks",
                self.eta0.len()
            )));
        }
        if self.eta0.iter().any(|e| !(0.0..=1.0).contains(e)) {
            return Err(Error::Config("eta0 entries must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Scale and covariate indicators defining the weighting matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VState {
    pub nu: f64,
    pub xi: Vec<bool>,
}

impl VState {
    /// Diagonal of `V`.
    pub fn diagonal(&self, blocks: &RowBlocks) -> DVector<f64> {
        let mut v = DVector::zeros(blocks.n_rows());
        let inv = 1.0 / self.nu;
        v.rows_mut(0, blocks.t0).fill(inv);
        for (j, &on) in self.xi.iter().enumerate() {
            if on {
                for r in blocks.block_range(j) {
                    v[r] = inv;
                }
            }
        }
        v
    }
}

/// Squared residual norms of `X1 - X0 w` per row block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockResiduals {
    pub outcome: f64,
    pub covariates: Vec<f64>,
}

pub fn block_residuals(design: &DesignMatrices, omega: &DVector<f64>) -> BlockResiduals {
    let r = qp::residual(design, omega);
    let b = &design.blocks;
    BlockResiduals {
        outcome: r.rows(0, b.t0).norm_squared(),
        covariates: (0..b.n_blocks()).map(|j| r.rows_range(b.block_range(j)).norm_squared()).collect(),
    }
}

/// Shape and rate of the inverse-gamma full conditional of `nu`.
pub fn nu_conditional_params(res: &BlockResiduals, xi: &[bool], blocks: &RowBlocks, hyper: &Hyperparams) -> (f64, f64) {
    let mut rows = blocks.t0 as f64;
    let mut ss = res.outcome;
    for (j, &on) in xi.iter().enumerate() {
        if on {
            rows += blocks.covariate_dims[j] as f64;
            ss += res.covariates[j];
        }
    }
    (rows / 2.0 + hyper.c0, ss / 2.0 + hyper.d0)
}

pub fn sample_nu_conditional<R: Rng + ?Sized>(
    omega: &DVector<f64>,
    xi: &[bool],
    design: &DesignMatrices,
    hyper: &Hyperparams,
    rng: &mut R,
) -> Result<f64> {
    let res = block_residuals(design, omega);
    let (shape, rate) = nu_conditional_params(&res, xi, &design.blocks, hyper);
    inverse_gamma(shape, rate, rng)
}

/// `P(xi_j = 1 | w, nu)` for a block with squared residual norm `block_ss`.
///
/// The two masked normal densities differ only through block `j`, whose rows
/// are the residual when included and the zero vector when masked, so the
/// ratio reduces to `exp(-block_ss / (2 nu))`. Evaluated on the log-odds scale.
pub fn xi_success_probability(block_ss: f64, nu: f64, eta: f64) -> f64 {
    if eta <= 0.0 {
        return 0.0;
    }
    if eta >= 1.0 {
        return 1.0;
    }
    let log_odds = eta.ln() - (1.0 - eta).ln() - block_ss / (2.0 * nu);
    if log_odds >= 0.0 {
        1.0 / (1.0 + (-log_odds).exp())
    } else {
        let e = log_odds.exp();
        e / (1.0 + e)
    }
}

pub fn xi_conditional_probabilities(
    omega: &DVector<f64>,
    nu: f64,
    design: &DesignMatrices,
    hyper: &Hyperparams,
) -> Vec<f64> {
    let res = block_residuals(design, omega);
    res.covariates.iter().zip(&hyper.eta0).map(|(&ss, &eta)| xi_success_probability(ss, nu, eta)).collect()
}

pub fn sample_xi_conditional<R: Rng + ?Sized>(
    omega: &DVector<f64>,
    nu: f64,
    design: &DesignMatrices,
    hyper: &Hyperparams,
    rng: &mut R,
) -> Result<Vec<bool>> {
    xi_conditional_probabilities(omega, nu, design, hyper).into_iter().map(|p| bernoulli(p, rng)).collect()
}

/// One `(nu, xi)` cycle with the weights held fixed.
fn nuisance_cycle<R: Rng + ?Sized>(
    state: &mut VState,
    res: &BlockResiduals,
    blocks: &RowBlocks,
    hyper: &Hyperparams,
    rng: &mut R,
) -> Result<()> {
    let (shape, rate) = nu_conditional_params(res, &state.xi, blocks, hyper);
    state.nu = inverse_gamma(shape, rate, rng)?;
    for (j, xi) in state.xi.iter_mut().enumerate() {
        *xi = bernoulli(xi_success_probability(res.covariates[j], state.nu, hyper.eta0[j]), rng)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    /// Sup-norm change in the weights that counts as converged.
    pub tol: f64,
    /// Consecutive converged iterations required to stop.
    pub patience: usize,
    pub max_iter: usize,
    /// S-step size is `base_sample * ceil(growth^t)`, capped at `max_sample`.
    pub base_sample: usize,
    pub growth: f64,
    pub max_sample: usize,
    /// Nuisance cycles discarded at the start of every S-step.
    pub warmup: usize,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self { tol: 1e-6, patience: 2, max_iter: 200, base_sample: 200, growth: 1.2, max_sample: 20_000, warmup: 20 }
    }
}

impl EmConfig {
    pub fn sample_size(&self, iteration: usize) -> usize {
        let factor = self.growth.powi(iteration as i32).ceil();
        let m = self.base_sample as f64 * factor;
        if m >= self.max_sample as f64 {
            self.max_sample
        } else {
            m as usize
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmIteration {
    pub sample_size: usize,
    /// Monte Carlo mean of `1/nu`.
    pub inv_nu_mean: f64,
    pub xi_bar: Vec<f64>,
    /// Sup-norm change of the weights produced by this M-step.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapResult {
    pub omega_hat: Vec<f64>,
    pub trace: Vec<EmIteration>,
    pub iterations: usize,
    pub converged: bool,
    /// Set when the iteration cap was reached before convergence.
    pub warning: Option<String>,
    /// Diagonal of the last M-step weighting, normalized to one on outcome rows.
    pub vbar: Vec<f64>,
}

/// MAP weights over the parallel-shift convex hull by Monte Carlo EM.
///
/// Each iteration runs the `(nu, xi)` Gibbs chain at the current weights
/// (S-step), averages `1/nu` and `xi` into `Vbar` (E-step) and minimizes the
/// `Vbar`-weighted quadratic over the parallel-shift hull (M-step). The
/// common factor `mean(1/nu)` does not move the minimizer, so the M-step uses
/// `Diag(I, xi_bar_1 I, ...)` directly. Starts from the identity-weighted
/// solution.
pub fn mcem_map<R: Rng + ?Sized>(design: &DesignMatrices, hyper: &Hyperparams, em: &EmConfig, rng: &mut R) -> Result<MapResult> {
    if !design.has_intercept {
        return Err(Error::Config("MC-EM needs a design with the intercept column".into()));
    }
    hyper.validate(design.blocks.n_blocks())?;
    if em.base_sample == 0 || em.max_sample == 0 || em.max_iter == 0 || !(em.growth >= 1.0) {
        return Err(Error::Config("EM sample sizes, growth and iteration cap must be positive".into()));
    }
    let blocks = &design.blocks;
    let p = blocks.n_blocks();
    let mut omega = qp::solve_constrained(design, &DVector::from_element(design.n_rows(), 1.0), ConstraintSet::PsConv)?.omega;

    let res0 = block_residuals(design, &omega);
    let mut state = VState { nu: 1.0, xi: vec![true; p] };
    let (shape, rate) = nu_conditional_params(&res0, &state.xi, blocks, hyper);
    state.nu = rate / shape;

    let mut trace = Vec::new();
    let mut streak = 0;
    let mut converged = false;
    let mut vbar = DVector::from_element(design.n_rows(), 1.0);

    for t in 0..em.max_iter {
        let res = block_residuals(design, &omega);
        for _ in 0..em.warmup {
            nuisance_cycle(&mut state, &res, blocks, hyper, rng)?;
        }
        let m = em.sample_size(t);
        let mut inv_nu = Vec::with_capacity(m);
        let mut xi_count = vec![0usize; p];
        for _ in 0..m {
            nuisance_cycle(&mut state, &res, blocks, hyper, rng)?;
            inv_nu.push(1.0 / state.nu);
            for (c, &on) in xi_count.iter_mut().zip(&state.xi) {
                *c += usize::from(on);
            }
        }
        let xi_bar: Vec<f64> = xi_count.iter().map(|&c| c as f64 / m as f64).collect();

        vbar = DVector::from_element(design.n_rows(), 1.0);
        for (j, &x) in xi_bar.iter().enumerate() {
            for r in blocks.block_range(j) {
                vbar[r] = x;
            }
        }
        let next = qp::solve_constrained(design, &vbar, ConstraintSet::PsConv)?.omega;
        let delta = (&next - &omega).amax();
        omega = next;
        debug!("mc-em iteration {t}: M = {m}, delta = {delta:.3e}");
        trace.push(EmIteration { sample_size: m, inv_nu_mean: mean(&inv_nu), xi_bar, delta });

        if delta < em.tol {
            streak += 1;
            if streak >= em.patience {
                converged = true;
                break;
            }
        } else {
            streak = 0;
        }
    }

    let warning = (!converged).then(|| {
        let msg = format!("MC-EM did not converge within {} iterations", em.max_iter);
        warn!("{msg}");
        msg
    });
    Ok(MapResult {
        omega_hat: omega.iter().copied().collect(),
        iterations: trace.len(),
        trace,
        converged,
        warning,
        vbar: vbar.iter().copied().collect(),
    })
}

/// Runs [`mcem_map`] on the panel's full design and packages the MAP weights
/// as a fit.
pub fn fit_bayes<R: Rng + ?Sized>(panel: &Panel, hyper: &Hyperparams, em: &EmConfig, rng: &mut R) -> Result<(ScmFit, MapResult)> {
    let design = build_design(panel, true, true);
    let map = mcem_map(&design, hyper, em, rng)?;
    let vbar = DVector::from_column_slice(&map.vbar);
    let sol = qp::WeightSolution {
        cset: ConstraintSet::PsConv,
        omega: DVector::from_column_slice(&map.omega_hat),
        objective: 0.0,
        active_set: Vec::new(),
        duals: qp::Duals { lambda: None, mu: Vec::new() },
        unique: true,
        iterations: 0,
    };
    let kkt = qp::kkt_certificate(&sol, &design, &vbar, ConstraintSet::PsConv);
    let fit = ScmFit {
        method: Method::Bayes,
        omega: map.omega_hat.clone(),
        tuning: Tuning::MonteCarloEm {
            iterations: map.iterations,
            converged: map.converged,
            xi_bar: map.trace.last().map(|t| t.xi_bar.clone()).unwrap_or_default(),
        },
        objective: qp::objective(&design, &vbar, &sol.omega),
        active_set: (1..map.omega_hat.len()).filter(|&i| map.omega_hat[i] == 0.0).collect(),
        kkt: Some(kkt),
    };
    Ok((fit, map))
}

/// Valid donors (nonzero MAP weight) and the rest, as indices into the
/// weight vector (index 0 is the intercept).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DonorPool {
    pub active: Vec<usize>,
    pub inactive: Vec<usize>,
}

impl DonorPool {
    /// Builds a pool from an explicit active set over donors `1..n_units`.
    pub fn new(active: Vec<usize>, n_units: usize) -> Result<Self> {
        let mut active = active;
        active.sort_unstable();
        active.dedup();
        if active.is_empty() {
            return Err(Error::Degenerate("no donor survives selection; the donor pool is empty".into()));
        }
        if active.iter().any(|&i| i == 0 || i >= n_units) {
            return Err(Error::Validation("donor indices must lie in 1..N".into()));
        }
        let inactive = (1..n_units).filter(|i| active.binary_search(i).is_err()).collect();
        Ok(Self { active, inactive })
    }

    /// Largest index in the pool, whose weight is the slack of the sum constraint.
    pub fn slack_index(&self) -> usize {
        *self.active.last().expect("pool is nonempty")
    }

    /// Whether `omega` lies exactly on the support: pool weights nonnegative
    /// and summing (in index order) to one, all other donors zero.
    pub fn supports(&self, omega: &DVector<f64>) -> bool {
        self.inactive.iter().all(|&i| omega[i] == 0.0)
            && self.active.iter().all(|&i| omega[i] >= 0.0)
            && self.active.iter().fold(0.0, |s, &i| s + omega[i]) == 1.0
    }
}

/// Donor pool from the nonzero entries of the MAP weights.
pub fn select_donors(map: &MapResult) -> Result<DonorPool> {
    select_donors_from_weights(&map.omega_hat)
}

pub fn select_donors_from_weights(omega: &[f64]) -> Result<DonorPool> {
    let active = (1..omega.len()).filter(|&i| omega[i].abs() > ZERO_THRESHOLD).collect();
    DonorPool::new(active, omega.len())
}

/// How the non-slack donor weights are redrawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OmegaUpdate {
    /// Each `w_j` is drawn from the normal fit to `X_j` alone, holding the
    /// slack donor's current weight in the residual, truncated to
    /// `[0, 1 - sum of the other non-slack weights]`; the slack donor is reset
    /// once at the end of the sweep.
    #[default]
    Verbatim,
    /// Each `w_j` is drawn from its exact conditional with the slack donor
    /// moving along with it (direction `X_j - X_slack`), so the chain leaves
    /// the posterior invariant.
    Collapsed,
}

/// Puts `omega` exactly on the pool's support by zeroing inactive donors,
/// clipping negatives, rescaling the pool to sum to one and recomputing the
/// slack weight.
pub fn project_to_support(omega: &DVector<f64>, pool: &DonorPool) -> DVector<f64> {
    let mut w = omega.clone();
    for &i in &pool.inactive {
        w[i] = 0.0;
    }
    let total: f64 = pool.active.iter().map(|&i| w[i].max(0.0)).sum();
    for &i in &pool.active {
        w[i] = if total > 0.0 { w[i].max(0.0) / total } else { 1.0 / pool.active.len() as f64 };
    }
    reset_slack(&mut w, pool);
    w
}

/// Sets the slack weight to one minus the other pool weights, summed in
/// index order, shaving the largest other weight if round-off overshoots one.
fn reset_slack(w: &mut DVector<f64>, pool: &DonorPool) {
    let slack = pool.slack_index();
    let others = &pool.active[..pool.active.len() - 1];
    loop {
        let s = others.iter().fold(0.0, |s, &i| s + w[i]);
        if s <= 1.0 {
            w[slack] = 1.0 - s;
            return;
        }
        let big = *others.iter().max_by(|&&a, &&b| w[a].total_cmp(&w[b])).expect("overshoot needs another weight");
        w[big] = (w[big] - (s - 1.0)).max(0.0);
    }
}

fn weighted_dot(a: &DVector<f64>, b: &DVector<f64>, v: &DVector<f64>) -> f64 {
    a.iter().zip(b.iter()).zip(v.iter()).map(|((x, y), w)| x * y * w).sum()
}

/// Draws `w` restricted to `[0, upper]` from `N(mu, 1/precision)`, or
/// uniformly when the precision vanishes.
fn draw_bounded<R: Rng + ?Sized>(mu_num: f64, precision: f64, upper: f64, rng: &mut R) -> Result<f64> {
    if upper <= 0.0 {
        debug!("non-positive upper bound {upper:e} in weight update; clamping to zero");
        return Ok(0.0);
    }
    if precision <= 0.0 || !precision.is_finite() {
        return Ok(upper * rng.random::<f64>());
    }
    let w = truncated_normal(mu_num / precision, precision.recip().sqrt(), 0.0, upper, rng)?;
    Ok(w.min(upper))
}

/// One component-wise sweep over the weights given the weighting diagonal `v`.
/// `omega` must be on the pool's support; it stays there exactly.
pub fn gibbs_omega_sweep<R: Rng + ?Sized>(
    omega: &mut DVector<f64>,
    v: &DVector<f64>,
    design: &DesignMatrices,
    pool: &DonorPool,
    update: OmegaUpdate,
    rng: &mut R,
) -> Result<()> {
    if omega.len() != design.n_units() || v.len() != design.n_rows() {
        return Err(Error::Dimension("weights or weighting diagonal do not match the design".into()));
    }
    if !design.has_intercept && omega[0] != 0.0 {
        return Err(Error::Validation("intercept weight must be zero for a design without intercept".into()));
    }
    let offset = usize::from(!design.has_intercept);
    let col = |i: usize| design.x0.column(i - offset).into_owned();
    let mut r = qp::residual(design, omega);

    // intercept: exact normal conditional; without one the weights live on the plain simplex
    if design.has_intercept {
        let intercept = col(0);
        let prec = weighted_dot(&intercept, &intercept, v);
        if prec <= 0.0 {
            return Err(Error::Numeric("intercept precision is zero".into()));
        }
        let partial = &r + &intercept * omega[0];
        let mu1 = weighted_dot(&intercept, &partial, v) / prec;
        let new1 = mu1 + prec.recip().sqrt() * standard_normal(rng);
        r = partial - &intercept * new1;
        omega[0] = new1;
    }

    let slack = pool.slack_index();
    let others = &pool.active[..pool.active.len() - 1];
    let x_slack = col(slack);
    for &j in others {
        let xj = col(j);
        let upper = 1.0 - others.iter().filter(|&&i| i != j).fold(0.0, |s, &i| s + omega[i]);
        match update {
            OmegaUpdate::Verbatim => {
                let partial = &r + &xj * omega[j];
                let prec = weighted_dot(&xj, &xj, v);
                let w = draw_bounded(weighted_dot(&xj, &partial, v), prec, upper, rng)?;
                r = partial - &xj * w;
                omega[j] = w;
            }
            OmegaUpdate::Collapsed => {
                let d = &xj - &x_slack;
                let partial = &r + &d * omega[j];
                let prec = weighted_dot(&d, &d, v);
                let w = draw_bounded(weighted_dot(&d, &partial, v), prec, upper, rng)?;
                r = partial - &d * w;
                omega[slack] += omega[j] - w;
                omega[j] = w;
            }
        }
    }
    reset_slack(omega, pool);
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McmcConfig {
    pub draws: usize,
    pub burnin: usize,
    pub thin: usize,
    pub update: OmegaUpdate,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self { draws: 10_000, burnin: 2_000, thin: 1, update: OmegaUpdate::Verbatim }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrawMeta {
    pub seed: u64,
    pub stream_id: u64,
    pub burnin: usize,
    pub thin: usize,
    pub update: OmegaUpdate,
}

/// Retained Gibbs draws.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    /// M×N, one row per retained draw.
    pub omega: DMatrix<f64>,
    pub nu: Vec<f64>,
    pub xi: Vec<Vec<bool>>,
    pub pool: DonorPool,
    pub meta: DrawMeta,
}

impl PosteriorDraws {
    pub fn len(&self) -> usize {
        self.nu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nu.is_empty()
    }
}

/// Gibbs sampler cycling `w -> nu -> xi` from their full conditionals,
/// started at `init` (projected onto the pool's support).
pub fn gibbs_sample(
    design: &DesignMatrices,
    pool: &DonorPool,
    init: &DVector<f64>,
    hyper: &Hyperparams,
    cfg: &McmcConfig,
    rng: &mut RngStream,
) -> Result<PosteriorDraws> {
    hyper.validate(design.blocks.n_blocks())?;
    if cfg.draws == 0 || cfg.thin == 0 {
        return Err(Error::Config("draws and thinning must be positive".into()));
    }
    if init.len() != design.n_units() {
        return Err(Error::Dimension("initial weights do not match the design".into()));
    }
    if pool.active.iter().chain(&pool.inactive).any(|&i| i >= design.n_units()) {
        return Err(Error::Dimension("donor pool refers to units outside the design".into()));
    }
    let blocks = &design.blocks;
    let mut omega = project_to_support(init, pool);
    if !design.has_intercept {
        omega[0] = 0.0;
    }
    let mut state = VState { nu: 1.0, xi: vec![true; blocks.n_blocks()] };
    let (shape, rate) = nu_conditional_params(&block_residuals(design, &omega), &state.xi, blocks, hyper);
    state.nu = rate / shape;

    let n = design.n_units();
    let mut omega_rows: Vec<f64> = Vec::with_capacity(cfg.draws * n);
    let mut nu = Vec::with_capacity(cfg.draws);
    let mut xi = Vec::with_capacity(cfg.draws);
    let total = cfg.burnin + cfg.draws * cfg.thin;
    for it in 0..total {
        let v = state.diagonal(blocks);
        gibbs_omega_sweep(&mut omega, &v, design, pool, cfg.update, rng)?;
        let res = block_residuals(design, &omega);
        nuisance_cycle(&mut state, &res, blocks, hyper, rng)?;
        if it >= cfg.burnin && (it - cfg.burnin + 1).is_multiple_of(cfg.thin) {
            omega_rows.extend(omega.iter());
            nu.push(state.nu);
            xi.push(state.xi.clone());
        }
    }
    Ok(PosteriorDraws {
        omega: DMatrix::from_row_slice(nu.len(), n, &omega_rows),
        nu,
        xi,
        pool: pool.clone(),
        meta: DrawMeta {
            seed: rng.seed(),
            stream_id: rng.stream_id(),
            burnin: cfg.burnin,
            thin: cfg.thin,
            update: cfg.update,
        },
    })
}

/// Posterior draws of the per-period effects and their mean, with summaries.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectPosterior {
    pub times: Vec<String>,
    /// M×T1.
    pub theta: DMatrix<f64>,
    pub ate: Vec<f64>,
    pub level: f64,
    pub mean: Vec<f64>,
    pub hpd: Vec<(f64, f64)>,
    pub ate_mean: f64,
    pub ate_hpd: (f64, f64),
}

/// Effect of draw `m` at post period `t`: `Y_1t - (w_1 + sum_i w_i Y_it)`.
pub fn effect_draw(omega: &[f64], panel: &Panel, t: usize) -> f64 {
    let y = panel.outcomes();
    let synth = omega[0] + (1..panel.n_units()).map(|i| omega[i] * y[(i, t)]).sum::<f64>();
    y[(0, t)] - synth
}

pub fn effect_posterior(draws: &PosteriorDraws, panel: &Panel, level: f64) -> Result<EffectPosterior> {
    if draws.omega.ncols() != panel.n_units() {
        return Err(Error::Dimension("draws and panel disagree on the number of units".into()));
    }
    let t0 = panel.t0();
    let t1 = panel.t1();
    let m = draws.len();
    let mut theta = DMatrix::zeros(m, t1);
    let mut ate = Vec::with_capacity(m);
    for d in 0..m {
        let omega: Vec<f64> = draws.omega.row(d).iter().copied().collect();
        let mut sum = 0.0;
        for k in 0..t1 {
            let e = effect_draw(&omega, panel, t0 + k);
            theta[(d, k)] = e;
            sum += e;
        }
        ate.push(sum / t1 as f64);
    }
    let mut means = Vec::with_capacity(t1);
    let mut hpds = Vec::with_capacity(t1);
    for k in 0..t1 {
        let col: Vec<f64> = theta.column(k).iter().copied().collect();
        means.push(mean(&col));
        hpds.push(hpd_interval(&col, level)?);
    }
    Ok(EffectPosterior {
        times: panel.times()[t0..].to_vec(),
        ate_mean: mean(&ate),
        ate_hpd: hpd_interval(&ate, level)?,
        theta,
        ate,
        level,
        mean: means,
        hpd: hpds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::CovariateBlock;

    fn toy_design(p_dims: &[usize]) -> DesignMatrices {
        let t0 = 4;
        let rows = t0 + p_dims.iter().sum::<usize>();
        let x1 = DVector::from_fn(rows, |r, _| 1.0 + 0.3 * r as f64);
        let mut x0 = DMatrix::zeros(rows, 4);
        for r in 0..rows {
            x0[(r, 0)] = if r < t0 { 1.0 } else { 0.0 };
            x0[(r, 1)] = 0.5 + 0.2 * r as f64;
            x0[(r, 2)] = 1.5 + 0.35 * r as f64 - 0.1 * (r % 2) as f64;
            x0[(r, 3)] = 2.0 - 0.1 * r as f64;
        }
        DesignMatrices { x1, x0, has_intercept: true, blocks: RowBlocks { t0, covariate_dims: p_dims.to_vec() } }
    }

    #[test]
    fn nu_params_with_all_blocks_off() {
        let res = BlockResiduals { outcome: 2.0, covariates: vec![5.0, 7.0] };
        let blocks = RowBlocks { t0: 4, covariate_dims: vec![1, 3] };
        let (shape, rate) = nu_conditional_params(&res, &[false, false], &blocks, &Hyperparams::defaults(2));
        assert_eq!((shape, rate), (2.5, 1.5));
        let (shape, rate) = nu_conditional_params(&res, &[true, true], &blocks, &Hyperparams::defaults(2));
        assert_eq!((shape, rate), (4.5, 7.5));
    }

    #[test]
    fn xi_probability_edge_cases() {
        assert_eq!(xi_success_probability(0.0, 1.3, 0.5), 0.5);
        assert_eq!(xi_success_probability(123.0, 0.1, 1.0), 1.0);
        assert_eq!(xi_success_probability(0.0, 0.1, 0.0), 0.0);
        // huge residual underflows gracefully
        assert_eq!(xi_success_probability(1e6, 1e-3, 0.5), 0.0);
    }

    #[test]
    fn vstate_diagonal_layout() {
        let blocks = RowBlocks { t0: 2, covariate_dims: vec![1, 2] };
        let v = VState { nu: 0.5, xi: vec![false, true] }.diagonal(&blocks);
        assert_eq!(v.as_slice(), &[2.0, 2.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn select_donors_reads_nonzeros() {
        let pool = select_donors_from_weights(&[0.3, 0.6, 0.4, 0.0, 0.0]).unwrap();
        assert_eq!(pool.active, vec![1, 2]);
        assert_eq!(pool.inactive, vec![3, 4]);
        let pool = select_donors_from_weights(&[0.3, 0.0, 1e-12, 1.0]).unwrap();
        assert_eq!(pool.active, vec![3]);
        assert!(matches!(select_donors_from_weights(&[1.0, 0.0, 0.0]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn single_donor_pool_keeps_unit_weight() {
        let design = toy_design(&[]);
        let pool = DonorPool::new(vec![2], 4).unwrap();
        let mut omega = project_to_support(&DVector::from_row_slice(&[0.0, 0.2, 0.5, 0.3]), &pool);
        let v = DVector::from_element(design.n_rows(), 1.0);
        let mut rng = RngStream::new(1, 0);
        let mut intercepts = Vec::new();
        for _ in 0..50 {
            gibbs_omega_sweep(&mut omega, &v, &design, &pool, OmegaUpdate::Verbatim, &mut rng).unwrap();
            assert_eq!(omega.as_slice()[1..], [0.0, 1.0, 0.0]);
            intercepts.push(omega[0]);
        }
        assert!(intercepts.windows(2).any(|w| w[0] != w[1]));
    }

    #[test]
    fn intercept_conditional_matches_hand_computation() {
        // V = I, no covariates: mu_1 = mean_t(Y1t - sum w_i Y_it), sigma^2 = 1/T0
        let design = toy_design(&[]);
        let omega = DVector::from_row_slice(&[0.0, 0.25, 0.75, 0.0]);
        let hand_mu = (0..4)
            .map(|t| design.x1[t] - 0.25 * design.x0[(t, 1)] - 0.75 * design.x0[(t, 2)])
            .sum::<f64>()
            / 4.0;
        let pool = DonorPool::new(vec![1, 2], 4).unwrap();
        let v = DVector::from_element(4, 1.0);
        let n = 40_000;
        let mut rng = RngStream::new(2, 0);
        let mut xs = Vec::with_capacity(n);
        for _ in 0..n {
            let mut w = omega.clone();
            // only the intercept draw is inspected; donors are reset each time
            gibbs_omega_sweep(&mut w, &v, &design, &pool, OmegaUpdate::Verbatim, &mut rng).unwrap();
            xs.push(w[0]);
        }
        let m = mean(&xs);
        let var = crate::stats::variance(&xs);
        assert!((m - hand_mu).abs() < 4.0 * (0.25f64 / n as f64).sqrt(), "{m} vs {hand_mu}");
        assert!((var - 0.25).abs() < 0.01, "{var}");
    }

    #[test]
    fn sweeps_preserve_support_exactly() {
        let design = toy_design(&[1, 2]);
        let pool = DonorPool::new(vec![1, 2, 3], 4).unwrap();
        let mut rng = RngStream::new(3, 0);
        for update in [OmegaUpdate::Verbatim, OmegaUpdate::Collapsed] {
            let mut omega = project_to_support(&DVector::from_row_slice(&[0.1, 0.2, 0.3, 0.5]), &pool);
            let v = VState { nu: 0.3, xi: vec![true, false] }.diagonal(&design.blocks);
            for _ in 0..2000 {
                gibbs_omega_sweep(&mut omega, &v, &design, &pool, update, &mut rng).unwrap();
                assert!(pool.supports(&omega), "{omega:?}");
            }
        }
    }

    #[test]
    fn gibbs_chain_is_deterministic_and_on_support() {
        let design = toy_design(&[1]);
        let pool = DonorPool::new(vec![1, 3], 4).unwrap();
        let init = DVector::from_row_slice(&[0.0, 0.5, 0.0, 0.5]);
        let cfg = McmcConfig { draws: 300, burnin: 50, thin: 2, update: OmegaUpdate::Verbatim };
        let a = gibbs_sample(&design, &pool, &init, &Hyperparams::defaults(1), &cfg, &mut RngStream::new(7, 0)).unwrap();
        let b = gibbs_sample(&design, &pool, &init, &Hyperparams::defaults(1), &cfg, &mut RngStream::new(7, 0)).unwrap();
        assert_eq!(a.omega, b.omega);
        assert_eq!(a.len(), 300);
        for row in a.omega.row_iter() {
            assert!(pool.supports(&row.transpose()));
        }
        assert!(a.nu.iter().all(|&n| n > 0.0));
    }

    fn panel_for_effects() -> Panel {
        let y = DMatrix::from_row_slice(3, 4, &[1.0, 2.0, 5.0, 6.0, 1.0, 2.0, 3.0, 3.0, 0.0, 1.0, 1.0, 2.0]);
        Panel::new(
            vec!["a".into(), "b".into(), "c".into()],
            (1..=4).map(|t| t.to_string()).collect(),
            y,
            vec![CovariateBlock { name: "z".into(), dim: 1 }],
            DMatrix::from_row_slice(3, 1, &[1.0, 1.0, 1.0]),
            2,
        )
        .unwrap()
    }

    #[test]
    fn identical_draws_have_degenerate_effects() {
        let panel = panel_for_effects();
        let omega = DMatrix::from_fn(30, 3, |_, c| [0.5, 1.0, 0.0][c]);
        let draws = PosteriorDraws {
            omega,
            nu: vec![1.0; 30],
            xi: vec![vec![true]; 30],
            pool: DonorPool::new(vec![1], 3).unwrap(),
            meta: DrawMeta { seed: 0, stream_id: 0, burnin: 0, thin: 1, update: OmegaUpdate::Verbatim },
        };
        let post = effect_posterior(&draws, &panel, 0.95).unwrap();
        assert_eq!(post.mean, vec![1.5, 2.5]);
        assert_eq!(post.hpd, vec![(1.5, 1.5), (2.5, 2.5)]);
        assert_eq!(post.ate_mean, 2.0);
    }

    #[test]
    fn mcem_without_covariates_equals_psconv() {
        let design = toy_design(&[]);
        let map = mcem_map(&design, &Hyperparams::defaults(0), &EmConfig::default(), &mut RngStream::new(4, 0)).unwrap();
        let ps = qp::solve_constrained(&design, &DVector::from_element(4, 1.0), ConstraintSet::PsConv).unwrap();
        assert_eq!(map.omega_hat, ps.omega.iter().copied().collect::<Vec<_>>());
        assert!(map.converged);
    }

    #[test]
    fn em_sample_schedule() {
        let em = EmConfig::default();
        assert_eq!(em.sample_size(0), 200);
        assert_eq!(em.sample_size(1), 400);
        assert_eq!(em.sample_size(5), 200 * 3);
        assert_eq!(em.sample_size(100), em.max_sample);
    }
}
