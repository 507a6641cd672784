//! Frequentist synthetic-control estimators and the counterfactual
//! bookkeeping shared by every method.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{build_design, Panel};
use crate::qp::{self, ConstraintSet, KktReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Convex hull, outcomes and covariates.
    Adh,
    /// Shifted conical hull, outcomes only.
    Lscm,
    /// Elastic net with unpenalized intercept, outcomes only.
    Dinet,
    /// Parallel-shift convex hull with identity weighting.
    Psconv,
    /// Parallel-shift convex hull with MC-EM weighting.
    Bayes,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Adh, Method::Dinet, Method::Lscm, Method::Psconv, Method::Bayes];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Adh => "adh",
            Method::Lscm => "lscm",
            Method::Dinet => "dinet",
            Method::Psconv => "psconv",
            Method::Bayes => "bayes",
        }
    }

    /// Row label used in result tables.
    pub fn label(self) -> &'static str {
        match self {
            Method::Adh => "ADH-SCM",
            Method::Lscm => "L-SCM",
            Method::Dinet => "DI-SCM",
            Method::Psconv => "naive Bayes SCM",
            Method::Bayes => "Bayes SCM",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "adh" => Ok(Method::Adh),
            "lscm" => Ok(Method::Lscm),
            "dinet" => Ok(Method::Dinet),
            "psconv" => Ok(Method::Psconv),
            "bayes" => Ok(Method::Bayes),
            other => Err(Error::Config(format!("unknown method `{other}`"))),
        }
    }
}

/// Method-specific tuning that produced a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Tuning {
    None,
    ElasticNet { alpha: f64, lambda: f64, cv_error: f64, folds: usize },
    MonteCarloEm { iterations: usize, converged: bool, xi_bar: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScmFit {
    pub method: Method,
    /// Length N; index 0 is the intercept, index i the (i+1)-th unit.
    pub omega: Vec<f64>,
    pub tuning: Tuning,
    pub objective: f64,
    pub active_set: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kkt: Option<KktReport>,
}

/// Post-period counterfactual and effects for the treated unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectSeries {
    pub times: Vec<String>,
    pub observed: Vec<f64>,
    pub counterfactual: Vec<f64>,
    pub effects: Vec<f64>,
    /// Mean of `effects` over the post period.
    pub ate: f64,
}

fn identity(n: usize) -> DVector<f64> {
    DVector::from_element(n, 1.0)
}

fn fit_qp(panel: &Panel, method: Method, use_covariates: bool, use_intercept: bool, cset: ConstraintSet) -> Result<ScmFit> {
    let design = build_design(panel, use_covariates, use_intercept);
    let v = identity(design.n_rows());
    let sol = qp::solve_constrained(&design, &v, cset)?;
    let kkt = qp::kkt_certificate(&sol, &design, &v, cset);
    Ok(ScmFit {
        method,
        omega: sol.omega.iter().copied().collect(),
        tuning: Tuning::None,
        objective: sol.objective,
        active_set: sol.active_set,
        kkt: Some(kkt),
    })
}

/// Convex-hull weights on outcomes and covariates, identity weighting.
pub fn fit_adh(panel: &Panel) -> Result<ScmFit> {
    fit_qp(panel, Method::Adh, true, false, ConstraintSet::Conv)
}

/// Shifted conical hull on pre-period outcomes.
pub fn fit_lscm(panel: &Panel) -> Result<ScmFit> {
    fit_qp(panel, Method::Lscm, false, true, ConstraintSet::Coni)
}

/// Parallel-shift convex hull on outcomes and covariates, identity weighting.
pub fn fit_psconv(panel: &Panel) -> Result<ScmFit> {
    fit_qp(panel, Method::Psconv, true, true, ConstraintSet::PsConv)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DinetConfig {
    pub alpha_grid: Vec<f64>,
    /// Shared penalty grid; when absent each alpha gets its own path.
    pub lambda_grid: Option<Vec<f64>>,
    pub folds: usize,
    pub path_len: usize,
    pub path_ratio: f64,
}

impl Default for DinetConfig {
    fn default() -> Self {
        Self {
            alpha_grid: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            lambda_grid: None,
            folds: 10,
            path_len: 50,
            path_ratio: 1e-4,
        }
    }
}

/// Elastic-net weights with an unpenalized intercept on pre-period outcomes.
/// `(alpha, lambda)` are chosen by contiguous-block K-fold cross-validation
/// over pre-period time points; ties go to the larger penalty.
pub fn fit_dinet(panel: &Panel, cfg: &DinetConfig) -> Result<ScmFit> {
    if cfg.alpha_grid.is_empty() {
        return Err(Error::Config("alpha grid is empty".into()));
    }
    if cfg.lambda_grid.as_ref().is_some_and(|g| g.is_empty()) {
        return Err(Error::Config("lambda grid is empty".into()));
    }
    if cfg.alpha_grid.iter().any(|a| !(0.0..=1.0).contains(a)) {
        return Err(Error::Config("alpha values must lie in [0, 1]".into()));
    }
    if cfg.lambda_grid.iter().flatten().any(|l| !(*l >= 0.0)) {
        return Err(Error::Config("lambda values must be nonnegative".into()));
    }
    if cfg.folds < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {}", cfg.folds)));
    }
    let t0 = panel.t0();
    if t0 < 2 {
        return Err(Error::Config("cross-validation needs at least 2 pre-period points".into()));
    }
    let folds = cfg.folds.min(t0);

    let design = build_design(panel, false, false);
    let x = design.x0;
    let y = design.x1;

    let lambdas_for = |alpha: f64| -> Vec<f64> {
        match &cfg.lambda_grid {
            Some(g) => {
                let mut g = g.clone();
                g.sort_by(|a, b| b.total_cmp(a));
                g
            }
            None => lambda_path(&x, &y, alpha, cfg.path_len, cfg.path_ratio),
        }
    };

    let fold_of: Vec<usize> = (0..t0).map(|t| t * folds / t0).collect();
    let per_alpha: Vec<(f64, f64, f64)> = cfg
        .alpha_grid
        .par_iter()
        .map(|&alpha| {
            let lambdas = lambdas_for(alpha);
            let mut sse = vec![0.0; lambdas.len()];
            for k in 0..folds {
                let train: Vec<usize> = (0..t0).filter(|&t| fold_of[t] != k).collect();
                let test: Vec<usize> = (0..t0).filter(|&t| fold_of[t] == k).collect();
                let xt = x.select_rows(train.iter());
                let yt = y.select_rows(train.iter());
                let mut warm = DVector::zeros(x.ncols());
                for (li, &lambda) in lambdas.iter().enumerate() {
                    let (b0, beta) = elastic_net_tol(&xt, &yt, alpha, lambda, Some(&warm), PATH_TOL);
                    for &t in &test {
                        let pred = b0 + x.row(t).transpose().dot(&beta);
                        sse[li] += (y[t] - pred).powi(2);
                    }
                    warm = beta;
                }
            }
            let mut best = (lambdas[0], sse[0] / t0 as f64);
            for (li, &lambda) in lambdas.iter().enumerate().skip(1) {
                let err = sse[li] / t0 as f64;
                if err < best.1 {
                    best = (lambda, err);
                }
            }
            (alpha, best.0, best.1)
        })
        .collect();

    let (alpha, lambda, cv_error) = per_alpha
        .iter()
        .copied()
        .fold(None::<(f64, f64, f64)>, |acc, cur| match acc {
            Some(a) if a.2 < cur.2 || (a.2 == cur.2 && a.1 >= cur.1) => Some(a),
            _ => Some(cur),
        })
        .expect("nonempty alpha grid");

    let (b0, beta) = elastic_net(&x, &y, alpha, lambda, None);
    let mut omega = Vec::with_capacity(beta.len() + 1);
    omega.push(b0);
    omega.extend(beta.iter());
    let fitted = DVector::from_fn(t0, |t, _| b0 + x.row(t).transpose().dot(&beta));
    Ok(ScmFit {
        method: Method::Dinet,
        active_set: (1..omega.len()).filter(|&i| omega[i] == 0.0).collect(),
        objective: (&y - fitted).norm_squared(),
        omega,
        tuning: Tuning::ElasticNet { alpha, lambda, cv_error, folds },
        kkt: None,
    })
}

/// Descending log-spaced path from the smallest penalty that zeroes every
/// coefficient. Ridge (`alpha = 0`) borrows the path of `alpha = 1e-3`.
pub fn lambda_path(x: &DMatrix<f64>, y: &DVector<f64>, alpha: f64, len: usize, ratio: f64) -> Vec<f64> {
    let n = x.nrows() as f64;
    let ybar = y.mean();
    let max_corr = (0..x.ncols())
        .map(|j| {
            let col = x.column(j);
            let xbar = col.mean();
            col.iter().zip(y.iter()).map(|(xi, yi)| (xi - xbar) * (yi - ybar)).sum::<f64>().abs()
        })
        .fold(0.0, f64::max);
    let lambda_max = (max_corr / (n * alpha.max(1e-3))).max(f64::MIN_POSITIVE);
    if len <= 1 {
        return vec![lambda_max];
    }
    (0..len)
        .map(|k| lambda_max * ratio.powf(k as f64 / (len - 1) as f64))
        .collect()
}

/// Cyclic coordinate descent for
/// `|y - b0 - X b|^2 / (2n) + lambda ((1 - alpha)/2 |b|^2 + alpha |b|_1)`.
/// Returns `(b0, b)`.
pub fn elastic_net(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    alpha: f64,
    lambda: f64,
    warm: Option<&DVector<f64>>,
) -> (f64, DVector<f64>) {
    elastic_net_tol(x, y, alpha, lambda, warm, FINAL_TOL)
}

/// Relative sweep-change threshold for the reported fit.
const FINAL_TOL: f64 = 1e-20;
/// Looser threshold for cross-validation paths, as in glmnet.
const PATH_TOL: f64 = 1e-7;

fn elastic_net_tol(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    alpha: f64,
    lambda: f64,
    warm: Option<&DVector<f64>>,
    tol: f64,
) -> (f64, DVector<f64>) {
    let n = x.nrows() as f64;
    let p = x.ncols();
    let xbar: Vec<f64> = (0..p).map(|j| x.column(j).mean()).collect();
    let ybar = y.mean();
    let xc = DMatrix::from_fn(x.nrows(), p, |r, c| x[(r, c)] - xbar[c]);
    let yc = y.map(|v| v - ybar);
    let sq: Vec<f64> = (0..p).map(|j| xc.column(j).norm_squared() / n).collect();

    let mut beta = warm.cloned().unwrap_or_else(|| DVector::zeros(p));
    let mut r = &yc - &xc * &beta;
    let l1 = lambda * alpha;
    let l2 = lambda * (1.0 - alpha);
    let scale = yc.norm_squared().max(1e-300);

    for _sweep in 0..100_000 {
        let mut max_change: f64 = 0.0;
        for j in 0..p {
            let denom = sq[j] + l2;
            let old = beta[j];
            let new = if denom <= 0.0 {
                0.0
            } else {
                let rho = xc.column(j).dot(&r) / n + sq[j] * old;
                soft_threshold(rho, l1) / denom
            };
            if new != old {
                r.axpy(old - new, &xc.column(j), 1.0);
                beta[j] = new;
                max_change = max_change.max((new - old).powi(2) * sq[j] * n);
            }
        }
        if max_change <= tol * scale {
            break;
        }
    }
    let b0 = ybar - xbar.iter().zip(beta.iter()).map(|(m, b)| m * b).sum::<f64>();
    (b0, beta)
}

fn soft_threshold(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

/// Synthetic outcome `w_1 + sum_i w_i Y_it` for every period.
pub fn synthetic_path(omega: &[f64], panel: &Panel) -> Result<Vec<f64>> {
    if omega.len() != panel.n_units() {
        return Err(Error::Dimension(format!(
            "weight vector has length {}, panel has {} units",
            omega.len(),
            panel.n_units()
        )));
    }
    let y = panel.outcomes();
    Ok((0..panel.n_times())
        .map(|t| omega[0] + (1..panel.n_units()).map(|i| omega[i] * y[(i, t)]).sum::<f64>())
        .collect())
}

/// Post-period counterfactual, per-period effects and their mean.
pub fn counterfactual(omega: &[f64], panel: &Panel) -> Result<EffectSeries> {
    let synth = synthetic_path(omega, panel)?;
    let t0 = panel.t0();
    let observed: Vec<f64> = (t0..panel.n_times()).map(|t| panel.outcomes()[(0, t)]).collect();
    let counterfactual = synth[t0..].to_vec();
    let effects: Vec<f64> = observed.iter().zip(&counterfactual).map(|(y, c)| y - c).collect();
    let ate = effects.iter().sum::<f64>() / effects.len() as f64;
    Ok(EffectSeries { times: panel.times()[t0..].to_vec(), observed, counterfactual, effects, ate })
}
