//! Independent oracles shared by the integration and acceptance tests. Apart
//! from the successive-conditional harness, none of these call into the
//! solvers or samplers they are used to check.
#![allow(dead_code)]

use bscm_core::bayes_scm::{self, DonorPool, Hyperparams, OmegaUpdate, VState};
use bscm_core::panel::{DesignMatrices, RowBlocks};
use bscm_core::sampling::{inverse_gamma, standard_normal, RngStream};
use bscm_core::stats::{mean, variance};
use rand_distr::{Dirichlet, Distribution};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

/// Random design with an intercept column: `n_units - 1` donors, `t0`
/// outcome rows and the given covariate blocks. Entries are standard-ish
/// normal draws with a unit-specific level so intercepts matter.
pub fn random_design(rng: &mut RngStream, n_units: usize, t0: usize, cov_dims: &[usize]) -> DesignMatrices {
    let blocks = RowBlocks { t0, covariate_dims: cov_dims.to_vec() };
    let rows = blocks.n_rows();
    let mut gauss = || {
        let u: f64 = rng.random::<f64>().max(1e-300);
        let v: f64 = rng.random();
        (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos()
    };
    let levels: Vec<f64> = (0..n_units).map(|_| 2.0 * gauss()).collect();
    let x1 = DVector::from_fn(rows, |r, _| if r < t0 { levels[0] } else { 0.0 } + gauss());
    let mut x0 = DMatrix::zeros(rows, n_units);
    for r in 0..rows {
        x0[(r, 0)] = if r < t0 { 1.0 } else { 0.0 };
        for i in 1..n_units {
            x0[(r, i)] = if r < t0 { levels[i] } else { 0.0 } + gauss();
        }
    }
    DesignMatrices { x1, x0, has_intercept: true, blocks }
}

pub fn random_weights(rng: &mut RngStream, rows: usize) -> DVector<f64> {
    DVector::from_fn(rows, |_, _| 0.2 + 1.8 * rng.random::<f64>())
}

fn intercept(design: &DesignMatrices) -> DVector<f64> {
    DVector::from_fn(design.n_rows(), |r, _| if r < design.blocks.t0 { 1.0 } else { 0.0 })
}

fn donor_matrix(design: &DesignMatrices) -> DMatrix<f64> {
    let off = usize::from(design.has_intercept);
    design.x0.columns(off, design.x0.ncols() - off).into_owned()
}

/// The weighted quadratic in Gram form, with the intercept profiled out in
/// closed form when `free_intercept` is set.
struct Quadratic {
    gram: DMatrix<f64>,
    cross: DVector<f64>,
    target: f64,
    c_cross: DVector<f64>,
    c_target: f64,
    cc: f64,
    free_intercept: bool,
}

impl Quadratic {
    fn new(design: &DesignMatrices, v: &DVector<f64>, free_intercept: bool) -> Self {
        let xd = donor_matrix(design);
        let c = intercept(design);
        let xv = DMatrix::from_fn(xd.nrows(), xd.ncols(), |r, k| xd[(r, k)] * v[r]);
        let cv = c.component_mul(v);
        Self {
            gram: xv.transpose() * &xd,
            cross: xv.transpose() * &design.x1,
            target: design.x1.component_mul(v).dot(&design.x1),
            c_cross: xd.transpose() * &cv,
            c_target: cv.dot(&design.x1),
            cc: cv.dot(&c),
            free_intercept,
        }
    }

    fn eval(&self, w: &[f64]) -> f64 {
        let k = w.len();
        let mut quad = 0.0;
        for a in 0..k {
            if w[a] == 0.0 {
                continue;
            }
            let mut row = 0.0;
            for b in 0..k {
                row += self.gram[(a, b)] * w[b];
            }
            quad += w[a] * (row - 2.0 * self.cross[a]);
        }
        let mut obj = self.target + quad;
        if self.free_intercept {
            let cr = self.c_target - (0..k).map(|a| self.c_cross[a] * w[a]).sum::<f64>();
            obj -= cr * cr / self.cc;
        }
        obj
    }
}

/// Simplex grid points `w >= 0`, `sum w = 1` in a box of half-width `radius`
/// around `center` with spacing `h` on the first `k - 1` coordinates.
fn visit_box(center: &[f64], radius: f64, h: f64, f: &mut impl FnMut(&[f64])) {
    let k = center.len();
    let steps = (radius / h).round() as i64;
    let mut w = vec![0.0; k];
    fn rec(d: usize, k: usize, center: &[f64], steps: i64, h: f64, w: &mut Vec<f64>, f: &mut impl FnMut(&[f64])) {
        if d == k - 1 {
            let s: f64 = w[..k - 1].iter().sum();
            let last = 1.0 - s;
            if last >= -1e-12 {
                w[k - 1] = last.max(0.0);
                f(w);
            }
            return;
        }
        let base = (center[d] / h).round() as i64;
        for m in base - steps..=base + steps {
            let x = m as f64 * h;
            if !(-1e-12..=1.0 + 1e-12).contains(&x) {
                continue;
            }
            w[d] = x.clamp(0.0, 1.0);
            rec(d + 1, k, center, steps, h, w, f);
        }
    }
    if k == 1 {
        f(&[1.0]);
        return;
    }
    rec(0, k, center, steps, h, &mut w, f);
}

/// Minimum of the CONV (`free_intercept = false`) or PS_CONV objective by
/// zooming simplex grid search, ending at mesh `1e-3`.
pub fn grid_min(design: &DesignMatrices, v: &DVector<f64>, free_intercept: bool) -> (f64, Vec<f64>) {
    let q = Quadratic::new(design, v, free_intercept);
    let k = design.n_donors();
    let mut best = (f64::INFINITY, vec![1.0 / k as f64; k]);
    let eval = |w: &[f64], best: &mut (f64, Vec<f64>)| {
        let obj = q.eval(w);
        if obj < best.0 {
            *best = (obj, w.to_vec());
        }
    };
    // full coarse sweep, then boxes around the incumbent
    visit_box(&vec![0.5; k], 1.0, 0.05, &mut |w| eval(w, &mut best));
    for (radius, h) in [(0.1, 0.01), (0.02, 0.002), (0.004, 0.001)] {
        let center = best.1.clone();
        visit_box(&center, radius, h, &mut |w| eval(w, &mut best));
    }
    best
}

/// Exact minimum by enumerating supports: on each support the equality
/// constrained least squares problem is solved from its KKT system and kept
/// when feasible. The global minimum of a convex QP is attained at the
/// feasible stationary point of its own support.
pub fn enumerate_min(design: &DesignMatrices, v: &DVector<f64>, free_intercept: bool) -> f64 {
    let xd = donor_matrix(design);
    let c = intercept(design);
    let k = xd.ncols();
    let q = Quadratic::new(design, v, free_intercept);
    let sv = v.map(f64::sqrt);
    let mut best = f64::INFINITY;
    for mask in 1u32..(1 << k) {
        let support: Vec<usize> = (0..k).filter(|j| mask >> j & 1 == 1).collect();
        let mut cols: Vec<DVector<f64>> = support.iter().map(|&j| xd.column(j).component_mul(&sv)).collect();
        if free_intercept {
            cols.push(c.component_mul(&sv));
        }
        let m = cols.len();
        let a = DMatrix::from_columns(&cols);
        let b = design.x1.component_mul(&sv);
        // [2A'A  e; e' 0] [x; l] = [2A'b; 1], e selects donor coordinates
        let mut kkt = DMatrix::zeros(m + 1, m + 1);
        kkt.view_mut((0, 0), (m, m)).copy_from(&(a.transpose() * &a * 2.0));
        for j in 0..support.len() {
            kkt[(j, m)] = 1.0;
            kkt[(m, j)] = 1.0;
        }
        let mut rhs = DVector::zeros(m + 1);
        rhs.rows_mut(0, m).copy_from(&(a.transpose() * &b * 2.0));
        rhs[m] = 1.0;
        let svd = kkt.svd(true, true);
        let Ok(sol) = svd.solve(&rhs, 1e-12) else { continue };
        let w: Vec<f64> = (0..support.len()).map(|j| sol[j]).collect();
        if w.iter().any(|&x| x < -1e-10) {
            continue;
        }
        let mut full = vec![0.0; k];
        for (j, &s) in support.iter().enumerate() {
            full[s] = w[j].max(0.0);
        }
        best = best.min(q.eval(&full));
    }
    best
}

/// Composite Simpson rule with `n` (even) panels.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

/// Mean and variance of `N(mu, sigma^2)` truncated to `[a, b]` by quadrature
/// of the unnormalized density. Infinite bounds are cut at 40 sigma beyond
/// the finite end.
pub fn truncated_normal_moments(mu: f64, sigma: f64, a: f64, b: f64) -> (f64, f64) {
    let lo = if a.is_finite() { a } else { b.min(mu) - 40.0 * sigma };
    let hi = if b.is_finite() { b } else { a.max(mu) + 40.0 * sigma };
    // shift the exponent by its maximum over the interval to avoid underflow
    let peak = mu.clamp(lo, hi);
    let dens = |x: f64| (-0.5 * ((x - mu) / sigma).powi(2) + 0.5 * ((peak - mu) / sigma).powi(2)).exp();
    let n = 200_000;
    let z = simpson(dens, lo, hi, n);
    let m1 = simpson(|x| x * dens(x), lo, hi, n) / z;
    let m2 = simpson(|x| (x - m1).powi(2) * dens(x), lo, hi, n) / z;
    (m1, m2)
}

/// Product of univariate normal densities of `x` around `mean` with variance `nu`.
pub fn mvn_density(x: &[f64], mean: &[f64], nu: f64) -> f64 {
    x.iter()
        .zip(mean)
        .map(|(a, m)| (-(a - m).powi(2) / (2.0 * nu)).exp() / (2.0 * std::f64::consts::PI * nu).sqrt())
        .product()
}

/// Success probability of the covariate indicator from the two masked
/// covariate densities, evaluated directly on the probability scale.
pub fn xi_probability_direct(z1: &[f64], z0w: &[f64], nu: f64, eta: f64) -> f64 {
    let zeros = vec![0.0; z1.len()];
    let off = mvn_density(&zeros, &zeros, nu);
    let on = mvn_density(z1, z0w, nu);
    1.0 / (1.0 + (1.0 - eta) * off / (eta * on))
}

/// Outcome-only design with an intercept and exactly two donors, used for
/// the posterior quadrature check.
pub fn two_donor_toy() -> DesignMatrices {
    let t0 = 10;
    let x2: Vec<f64> = (0..t0).map(|t| 1.0 + 0.8 * (t as f64 * 0.9).sin() + 0.1 * t as f64).collect();
    let x3: Vec<f64> = (0..t0).map(|t| 1.2 + 0.7 * (t as f64 * 1.7 + 0.5).cos() + 0.1 * t as f64).collect();
    let noise = [0.31, -0.52, 0.12, 0.44, -0.27, -0.08, 0.61, -0.35, 0.05, -0.22];
    let x1 = DVector::from_fn(t0, |t, _| 0.4 + 0.6 * x2[t] + 0.4 * x3[t] + noise[t]);
    let x0 = DMatrix::from_fn(t0, 3, |t, c| match c {
        0 => 1.0,
        1 => x2[t],
        _ => x3[t],
    });
    DesignMatrices { x1, x0, has_intercept: true, blocks: RowBlocks { t0, covariate_dims: vec![] } }
}

/// Posterior density of `(w1, w2)` for [`two_donor_toy`] (with `w3 = 1 - w2`)
/// on a `n x n` midpoint grid, after integrating the scale analytically:
/// `(S(w)/2 + d0)^-(T0/2 + c0)`. Returns the grid axes and normalized cell
/// masses, row index over `w1`.
pub struct PosteriorGrid {
    pub w1: Vec<f64>,
    pub w2: Vec<f64>,
    pub mass: DMatrix<f64>,
    pub w1_range: (f64, f64),
}

pub fn posterior_grid(design: &DesignMatrices, c0: f64, d0: f64, n: usize, w1_range: (f64, f64)) -> PosteriorGrid {
    let t0 = design.blocks.t0 as f64;
    let dw1 = (w1_range.1 - w1_range.0) / n as f64;
    let dw2 = 1.0 / n as f64;
    let w1: Vec<f64> = (0..n).map(|i| w1_range.0 + (i as f64 + 0.5) * dw1).collect();
    let w2: Vec<f64> = (0..n).map(|j| (j as f64 + 0.5) * dw2).collect();
    let logd = |a: f64, b: f64| {
        let s: f64 = (0..design.n_rows())
            .map(|t| (design.x1[t] - a - b * design.x0[(t, 1)] - (1.0 - b) * design.x0[(t, 2)]).powi(2))
            .sum();
        -(t0 / 2.0 + c0) * (s / 2.0 + d0).ln()
    };
    // 3x3 sub-cell midpoints per cell
    let mut logm = DMatrix::zeros(n, n);
    let mut top = f64::NEG_INFINITY;
    for i in 0..n {
        for j in 0..n {
            let v = logd(w1[i], w2[j]);
            logm[(i, j)] = v;
            top = top.max(v);
        }
    }
    let mut mass = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for a in [-1.0, 0.0, 1.0] {
                for b in [-1.0, 0.0, 1.0] {
                    acc += (logd(w1[i] + a * dw1 / 3.0, w2[j] + b * dw2 / 3.0) - top).exp();
                }
            }
            mass[(i, j)] = acc / 9.0;
        }
    }
    let total: f64 = mass.iter().sum();
    mass /= total;
    PosteriorGrid { w1, w2, mass, w1_range }
}

/// Total variation distance between the grid posterior and the empirical
/// distribution of `draws`, after pooling fine cells into `coarse x coarse`
/// bins. Draws outside the `w1` range count against the empirical side.
pub fn tv_distance(grid: &PosteriorGrid, draws: &[(f64, f64)], coarse: usize) -> f64 {
    let n = grid.w1.len();
    let per = n / coarse;
    let mut exact = DMatrix::<f64>::zeros(coarse, coarse);
    for i in 0..n {
        for j in 0..n {
            exact[((i / per).min(coarse - 1), (j / per).min(coarse - 1))] += grid.mass[(i, j)];
        }
    }
    let (lo, hi) = grid.w1_range;
    let mut emp = DMatrix::<f64>::zeros(coarse, coarse);
    let mut outside = 0.0;
    let inc = 1.0 / draws.len() as f64;
    for &(a, b) in draws {
        if a < lo || a >= hi || !(0.0..=1.0).contains(&b) {
            outside += inc;
            continue;
        }
        let i = (((a - lo) / (hi - lo)) * coarse as f64) as usize;
        let j = (b * coarse as f64) as usize;
        emp[(i.min(coarse - 1), j.min(coarse - 1))] += inc;
    }
    0.5 * ((exact - emp).abs().sum() + outside)
}

/// [`posterior_grid`] on a `w1` window found by a wide coarse pass, trimmed
/// to where the marginal mass per coarse row exceeds `1e-9`.
pub fn posterior_grid_auto(design: &DesignMatrices, c0: f64, d0: f64, n: usize) -> PosteriorGrid {
    let wide = posterior_grid(design, c0, d0, 400, (-50.0, 50.0));
    let rows: Vec<f64> = (0..400).map(|i| wide.mass.row(i).sum()).collect();
    let first = rows.iter().position(|&m| m > 1e-9).unwrap_or(0);
    let last = rows.iter().rposition(|&m| m > 1e-9).unwrap_or(399);
    let step = 100.0 / 400.0;
    let lo = -50.0 + first.saturating_sub(1) as f64 * step;
    let hi = -50.0 + (last + 2).min(400) as f64 * step;
    posterior_grid(design, c0, d0, n, (lo, hi))
}

/// Batch-means standard error of the mean of an autocorrelated series.
pub fn batch_se(xs: &[f64], batches: usize) -> f64 {
    let size = xs.len() / batches;
    let means: Vec<f64> = (0..batches).map(|b| mean(&xs[b * size..(b + 1) * size])).collect();
    (variance(&means) / batches as f64).sqrt()
}

/// Successive-conditional simulation on a proper model: three donors without
/// intercept (uniform prior on the simplex), one covariate block that is
/// always included, `nu ~ IG(5, 4)`. Alternating a Gibbs step with a fresh
/// data draw must leave the prior invariant.
pub fn geweke(update: OmegaUpdate, iters: usize, seed: u64) -> (Vec<f64>, Vec<[f64; 3]>) {
    let blocks = RowBlocks { t0: 5, covariate_dims: vec![2] };
    let rows = blocks.n_rows();
    let x0 = DMatrix::from_fn(rows, 3, |r, c| 1.0 + 0.5 * ((r * 3 + c * 7) % 5) as f64 - 0.3 * c as f64);
    let hyper = Hyperparams { c0: 5.0, d0: 4.0, eta0: vec![1.0] };
    let pool = DonorPool::new(vec![1, 2, 3], 4).unwrap();
    let mut rng = RngStream::new(seed, 0);

    let simulate = |omega: &DVector<f64>, nu: f64, rng: &mut RngStream| {
        let mean = &x0 * omega.rows(1, 3);
        DVector::from_fn(rows, |r, _| mean[r] + nu.sqrt() * standard_normal(rng))
    };
    let dir = Dirichlet::new([1.0; 3]).unwrap();
    let w: [f64; 3] = dir.sample(&mut rng);
    let mut omega = DVector::from_row_slice(&[0.0, w[0], w[1], w[2]]);
    let mut state = VState { nu: inverse_gamma(5.0, 4.0, &mut rng).unwrap(), xi: vec![true] };
    let mut design = DesignMatrices { x1: simulate(&omega, state.nu, &mut rng), x0: x0.clone(), has_intercept: false, blocks };

    let mut nus = Vec::with_capacity(iters);
    let mut ws = Vec::with_capacity(iters);
    for _ in 0..iters {
        let v = state.diagonal(&design.blocks);
        bayes_scm::gibbs_omega_sweep(&mut omega, &v, &design, &pool, update, &mut rng).unwrap();
        state.nu = bayes_scm::sample_nu_conditional(&omega, &state.xi, &design, &hyper, &mut rng).unwrap();
        state.xi = bayes_scm::sample_xi_conditional(&omega, state.nu, &design, &hyper, &mut rng).unwrap();
        design.x1 = simulate(&omega, state.nu, &mut rng);
        nus.push(state.nu);
        ws.push([omega[1], omega[2], omega[3]]);
    }
    (nus, ws)
}

/// Largest standardized gap between successive-conditional moments and the
/// prior's: `E nu = 1`, `E nu^2 = 4/3`, `E w_i = 1/3`, `E w_i^2 = 1/6`.
pub fn geweke_z(update: OmegaUpdate, iters: usize, seed: u64) -> f64 {
    let (nus, ws) = geweke(update, iters, seed);
    let mut series: Vec<(Vec<f64>, f64)> = vec![
        (nus.clone(), 1.0),
        (nus.iter().map(|n| n * n).collect(), 4.0 / 3.0),
    ];
    for i in 0..3 {
        series.push((ws.iter().map(|w| w[i]).collect(), 1.0 / 3.0));
        series.push((ws.iter().map(|w| w[i] * w[i]).collect(), 1.0 / 6.0));
    }
    series.iter().map(|(xs, target)| ((mean(xs) - target) / batch_se(xs, 100)).abs()).fold(0.0, f64::max)
}
