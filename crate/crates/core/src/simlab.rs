//! Linear factor model data generator and the Monte Carlo harness comparing
//! estimators by mean squared error of the per-period and average effects.

use log::warn;
use nalgebra::{DMatrix, Vector3};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bayes_scm::{self, EmConfig, Hyperparams};
use crate::error::{Error, Result};
use crate::estimators::{self, DinetConfig, Method};
use crate::panel::{build_design, CovariateBlock, Panel};
use crate::sampling::{standard_normal, uniform, RngStream};
use crate::stats::{mean, pairwise_sum, variance};

pub const FACTOR_DIM: usize = 3;

const EPS_VAR: f64 = 0.1;
const U_VAR: f64 = 0.25;
const LOADING_VAR: f64 = 0.5;
const Z_MEAN: f64 = 1.0;
const Z_VAR: f64 = 2.0;
const AR_COEF: f64 = 0.2;
const C_HALF_WIDTH: f64 = 0.2;
/// Covariates with a nonzero time-varying coefficient.
const ACTIVE_COVARIATES: usize = 2;

/// Settings for the Bayesian estimator inside the harness.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BayesSettings {
    pub em: EmConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_units: usize,
    pub n_times: usize,
    pub t0: usize,
    /// Number of scalar covariates.
    pub p: usize,
    pub theta0: f64,
    pub reps: usize,
    pub seed: u64,
    pub bayes: BayesSettings,
    pub dinet: DinetConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_units: 40,
            n_times: 100,
            t0: 40,
            p: 8,
            theta0: 1.0,
            reps: 1000,
            seed: 0,
            bayes: BayesSettings::default(),
            dinet: DinetConfig::default(),
        }
    }
}

impl SimConfig {
    fn validate(&self) -> Result<()> {
        if self.n_units < 2 {
            return Err(Error::Config("simulation needs at least one donor".into()));
        }
        if self.t0 == 0 || self.t0 >= self.n_times {
            return Err(Error::Config(format!("need 0 < T0 < T (T0 = {}, T = {})", self.t0, self.n_times)));
        }
        if self.p < ACTIVE_COVARIATES {
            return Err(Error::Config(format!("need at least {ACTIVE_COVARIATES} covariates")));
        }
        if !self.theta0.is_finite() {
            return Err(Error::Config("theta0 must be finite".into()));
        }
        if self.reps == 0 {
            return Err(Error::Config("reps must be positive".into()));
        }
        Ok(())
    }
}

/// Treatment effect on the treated unit at 1-based period `t`.
pub fn true_effect(theta0: f64, t: usize) -> f64 {
    theta0 * (0.5 + (t as f64 / 2.0).sqrt())
}

/// Time fixed effect at 1-based period `t`.
pub fn time_effect(t: usize) -> f64 {
    (5.0 * t as f64).sqrt()
}

fn normal3<R: Rng + ?Sized>(variance: f64, rng: &mut R) -> Vector3<f64> {
    let sd = variance.sqrt();
    Vector3::from_fn(|_, _| sd * standard_normal(rng))
}

/// Every random component of one simulated panel.
#[derive(Debug, Clone, PartialEq)]
pub struct DgpDraw {
    pub mu: Vec<f64>,
    /// N×p time-invariant covariates.
    pub z: DMatrix<f64>,
    pub loadings: Vec<Vector3<f64>>,
    /// `factors[t]` for `t = 0..=T`, starting with the initial state.
    pub factors: Vec<Vector3<f64>>,
    /// T×2 coefficients of the relevant covariates.
    pub c: DMatrix<f64>,
    /// N×T idiosyncratic errors.
    pub eps: DMatrix<f64>,
    /// N×T untreated outcomes.
    pub y0: DMatrix<f64>,
}

/// Draws the untreated potential outcomes and their ingredients, in the
/// order `mu, Z, b, F_0`, then per period `u_t, c_t, eps_t`.
pub fn draw_components<R: Rng + ?Sized>(cfg: &SimConfig, rng: &mut R) -> Result<DgpDraw> {
    cfg.validate()?;
    let (n, t_all, p) = (cfg.n_units, cfg.n_times, cfg.p);
    let mu: Vec<f64> = (0..n).map(|_| uniform(-1.0, 1.0, rng)).collect();
    let z_sd = Z_VAR.sqrt();
    let mut z = DMatrix::zeros(n, p);
    for i in 0..n {
        for j in 0..p {
            z[(i, j)] = Z_MEAN + z_sd * standard_normal(rng);
        }
    }
    let loadings: Vec<Vector3<f64>> = (0..n).map(|_| normal3(LOADING_VAR, rng)).collect();
    let mut factors = vec![normal3(1.0, rng)];

    let eps_sd = EPS_VAR.sqrt();
    let mut c = DMatrix::zeros(t_all, ACTIVE_COVARIATES);
    let mut eps = DMatrix::zeros(n, t_all);
    let mut y0 = DMatrix::zeros(n, t_all);
    for k in 0..t_all {
        let f = factors[k] * AR_COEF + normal3(U_VAR, rng);
        factors.push(f);
        for j in 0..ACTIVE_COVARIATES {
            c[(k, j)] = uniform(-C_HALF_WIDTH, C_HALF_WIDTH, rng);
        }
        for i in 0..n {
            eps[(i, k)] = eps_sd * standard_normal(rng);
            let cz: f64 = (0..ACTIVE_COVARIATES).map(|j| c[(k, j)] * z[(i, j)]).sum();
            y0[(i, k)] = mu[i] + time_effect(k + 1) + cz + loadings[i].dot(&f) + eps[(i, k)];
        }
    }
    Ok(DgpDraw { mu, z, loadings, factors, c, eps, y0 })
}

/// Simulates one panel; unit 0 is treated after `t0`. Returns the panel and
/// the true post-period effects.
pub fn generate_dataset<R: Rng + ?Sized>(cfg: &SimConfig, rng: &mut R) -> Result<(Panel, Vec<f64>)> {
    let draw = draw_components(cfg, rng)?;
    let (n, t_all, p) = (cfg.n_units, cfg.n_times, cfg.p);
    let mut y = draw.y0;
    let effects: Vec<f64> = (cfg.t0 + 1..=t_all).map(|t| true_effect(cfg.theta0, t)).collect();
    for (k, e) in effects.iter().enumerate() {
        y[(0, cfg.t0 + k)] += e;
    }
    let panel = Panel::new(
        (1..=n).map(|i| format!("unit{i:02}")).collect(),
        (1..=t_all).map(|t| t.to_string()).collect(),
        y,
        (1..=p).map(|j| CovariateBlock { name: format!("z{j}"), dim: 1 }).collect(),
        draw.z,
        cfg.t0,
    )?;
    Ok((panel, effects))
}

/// Post-period effect estimates of one method on one panel. BAYES uses the
/// MC-EM MAP weights.
pub fn estimate_effects(method: Method, panel: &Panel, cfg: &SimConfig, rng: &mut RngStream) -> Result<Vec<f64>> {
    let omega = match method {
        Method::Adh => estimators::fit_adh(panel)?.omega,
        Method::Lscm => estimators::fit_lscm(panel)?.omega,
        Method::Dinet => estimators::fit_dinet(panel, &cfg.dinet)?.omega,
        Method::Psconv => estimators::fit_psconv(panel)?.omega,
        Method::Bayes => {
            let design = build_design(panel, true, true);
            let hyper = Hyperparams::defaults(panel.n_covariates());
            bayes_scm::mcem_map(&design, &hyper, &cfg.bayes.em, rng)?.omega_hat
        }
    };
    Ok(estimators::counterfactual(&omega, panel)?.effects)
}

/// Squared errors of one method in one replication.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RepErrors {
    /// Mean over the post period of the squared per-period error.
    pub te: f64,
    /// Squared error of the average effect.
    pub ate: f64,
}

pub fn rep_errors(estimate: &[f64], truth: &[f64]) -> RepErrors {
    let sq: Vec<f64> = estimate.iter().zip(truth).map(|(a, b)| (a - b).powi(2)).collect();
    RepErrors { te: mean(&sq), ate: (mean(estimate) - mean(truth)).powi(2) }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub mse_te: f64,
    pub mse_te_se: f64,
    pub mse_ate: f64,
    pub mse_ate_se: f64,
    pub successes: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub theta0: f64,
    pub reps: usize,
    pub seed: u64,
    pub methods: Vec<MethodSummary>,
    /// `per_rep[r][k]` is method `k`'s errors in replication `r`, `None` on failure.
    #[serde(skip)]
    pub per_rep: Vec<Vec<Option<RepErrors>>>,
}

impl SimResult {
    pub fn summary(&self, method: Method) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.method == method)
    }
}

/// Stream ids of replication `r`: data generation, then the Bayesian fit.
pub fn rep_streams(seed: u64, r: usize) -> (RngStream, RngStream) {
    (RngStream::new(seed, 2 * r as u64), RngStream::new(seed, 2 * r as u64 + 1))
}

fn run_one(cfg: &SimConfig, methods: &[Method], r: usize) -> Result<Vec<Option<RepErrors>>> {
    let (mut data_rng, mut bayes_rng) = rep_streams(cfg.seed, r);
    let (panel, truth) = generate_dataset(cfg, &mut data_rng)?;
    Ok(methods
        .iter()
        .map(|&m| match estimate_effects(m, &panel, cfg, &mut bayes_rng) {
            Ok(est) => Some(rep_errors(&est, &truth)),
            Err(e) => {
                warn!("replication {r}: {} failed: {e}", m.label());
                None
            }
        })
        .collect())
}

fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    (mean(xs), (variance(xs) / xs.len() as f64).sqrt())
}

/// Runs `cfg.reps` replications in parallel on the current rayon pool.
/// Each replication owns its streams, so the result does not depend on the
/// thread count or on the order of `methods`.
pub fn run_replications(cfg: &SimConfig, methods: &[Method]) -> Result<SimResult> {
    cfg.validate()?;
    if methods.is_empty() {
        return Err(Error::Config("no methods selected".into()));
    }
    let mut uniq = methods.to_vec();
    uniq.sort_unstable();
    uniq.dedup();
    let per_rep = (0..cfg.reps).into_par_iter().map(|r| run_one(cfg, &uniq, r)).collect::<Result<Vec<_>>>()?;

    let mut summaries = Vec::with_capacity(uniq.len());
    for (k, &method) in uniq.iter().enumerate() {
        let ok: Vec<RepErrors> = per_rep.iter().filter_map(|row| row[k]).collect();
        let failures = cfg.reps - ok.len();
        if failures as f64 >= 0.01 * cfg.reps as f64 {
            return Err(Error::Numeric(format!(
                "{} failed in {failures} of {} replications",
                method.label(),
                cfg.reps
            )));
        }
        let te: Vec<f64> = ok.iter().map(|e| e.te).collect();
        let ate: Vec<f64> = ok.iter().map(|e| e.ate).collect();
        let (mse_te, mse_te_se) = mean_and_se(&te);
        let (mse_ate, mse_ate_se) = mean_and_se(&ate);
        summaries.push(MethodSummary { method, mse_te, mse_te_se, mse_ate, mse_ate_se, successes: ok.len(), failures });
    }
    Ok(SimResult { theta0: cfg.theta0, reps: cfg.reps, seed: cfg.seed, methods: summaries, per_rep })
}

/// True average effect over the post period.
pub fn true_ate(cfg: &SimConfig) -> f64 {
    let v: Vec<f64> = (cfg.t0 + 1..=cfg.n_times).map(|t| true_effect(cfg.theta0, t)).collect();
    pairwise_sum(&v) / v.len() as f64
}
