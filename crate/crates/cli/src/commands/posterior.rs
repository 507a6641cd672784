use bscm_core::bayes_scm::{self, EmConfig, Hyperparams, McmcConfig};
use bscm_core::panel::build_design;
use bscm_core::sampling::RngStream;
use nalgebra::DVector;
use serde_json::json;

use super::{donor_sum, load, unit_weights, write_effects, RunRecord};
use crate::args::PosteriorArgs;
use crate::error::{CliError, CliResult};
use crate::manifest::MANIFEST_FILE;
use crate::output::{header, num, OutputDir};

const MAP_STREAM: u64 = 0;
const GIBBS_STREAM: u64 = 1;

pub fn run(args: &PosteriorArgs, out: &mut OutputDir) -> CliResult<RunRecord> {
    if !(args.hpd_level > 0.0 && args.hpd_level < 1.0) {
        return Err(CliError::usage(format!("--hpd-level must lie in (0, 1), got {}", args.hpd_level)));
    }
    if args.draws == 0 || args.thin == 0 {
        return Err(CliError::usage("--draws and --thin must be positive"));
    }
    let mut inputs = Vec::new();
    let panel = load(&args.data, &mut inputs)?;
    let names = panel.unit_ids();
    let hyper = Hyperparams::defaults(panel.n_covariates());
    let em = EmConfig { max_iter: args.em_max_iter, ..EmConfig::default() };

    let (_, map) = bayes_scm::fit_bayes(&panel, &hyper, &em, &mut RngStream::new(args.seed, MAP_STREAM))?;
    let inclusion: Vec<_> = match map.trace.last() {
        Some(last) => panel
            .covariates()
            .iter()
            .zip(&last.xi_bar)
            .map(|(c, xi)| json!({ "covariate": c.name, "xi_bar": xi }))
            .collect(),
        None => Vec::new(),
    };
    out.write_json(
        "map_weights.json",
        &json!({
            "manifest": MANIFEST_FILE,
            "treated": names[0],
            "intercept": map.omega_hat[0],
            "donor_weight_sum": donor_sum(&map.omega_hat),
            "weights": unit_weights(&panel, &map.omega_hat),
            "em": {
                "iterations": map.iterations,
                "converged": map.converged,
                "warning": map.warning,
                "covariate_inclusion": inclusion,
                "trace": map.trace,
            },
        }),
    )?;

    let pool = bayes_scm::select_donors(&map)?;
    out.write_json(
        "donor_pool.json",
        &json!({
            "manifest": MANIFEST_FILE,
            "threshold": bayes_scm::ZERO_THRESHOLD,
            "active": pool.active.iter().map(|&i| &names[i]).collect::<Vec<_>>(),
            "inactive": pool.inactive.iter().map(|&i| &names[i]).collect::<Vec<_>>(),
            "slack": names[pool.slack_index()],
        }),
    )?;

    let design = build_design(&panel, true, true);
    let mcmc = McmcConfig { draws: args.draws, burnin: args.burnin, thin: args.thin, update: args.omega_update.into() };
    let init = DVector::from_column_slice(&map.omega_hat);
    let draws = bayes_scm::gibbs_sample(&design, &pool, &init, &hyper, &mcmc, &mut RngStream::new(args.seed, GIBBS_STREAM))?;

    let mut cols = vec!["draw".to_string(), "intercept".to_string()];
    cols.extend(names[1..].iter().cloned());
    cols.push("nu".into());
    cols.extend(panel.covariates().iter().map(|c| format!("xi_{}", c.name)));
    let rows = (0..draws.len()).map(|m| {
        let mut row = vec![m.to_string()];
        row.extend(draws.omega.row(m).iter().map(|&w| num(w)));
        row.push(num(draws.nu[m]));
        row.extend(draws.xi[m].iter().map(|&x| u8::from(x).to_string()));
        row
    });
    out.write_csv("draws.csv", &cols, rows)?;

    let post = bayes_scm::effect_posterior(&draws, &panel, args.hpd_level)?;
    let rows = post.times.iter().zip(&post.mean).zip(&post.hpd).map(|((t, m), (lo, hi))| vec![t.clone(), num(*m), num(*lo), num(*hi)]);
    out.write_csv("effects_posterior.csv", &header(&["time", "mean", "hpd_lower", "hpd_upper"]), rows)?;
    out.write_json(
        "ate_summary.json",
        &json!({
            "manifest": MANIFEST_FILE,
            "mean": post.ate_mean,
            "hpd_lower": post.ate_hpd.0,
            "hpd_upper": post.ate_hpd.1,
            "level": post.level,
            "draws": draws.len(),
        }),
    )?;

    let mean_omega: Vec<f64> = draws.omega.row_mean().iter().copied().collect();
    write_effects(out, &panel, &mean_omega)?;
    Ok(RunRecord { seed: Some(args.seed), inputs })
}
