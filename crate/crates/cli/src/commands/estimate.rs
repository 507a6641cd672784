use bscm_core::estimators::{self, DinetConfig, Method, ScmFit};
use serde_json::json;

use super::{donor_sum, load, unit_weights, write_effects, RunRecord};
use crate::args::{EstimateArgs, EstimateMethod};
use crate::error::CliResult;
use crate::manifest::MANIFEST_FILE;
use crate::output::OutputDir;

pub fn run(args: &EstimateArgs, out: &mut OutputDir) -> CliResult<RunRecord> {
    let mut inputs = Vec::new();
    let panel = load(&args.data, &mut inputs)?;
    let fit: ScmFit = match args.method {
        EstimateMethod::Adh => estimators::fit_adh(&panel)?,
        EstimateMethod::Lscm => estimators::fit_lscm(&panel)?,
        EstimateMethod::Dinet => estimators::fit_dinet(&panel, &DinetConfig::default())?,
        EstimateMethod::Psconv => estimators::fit_psconv(&panel)?,
    };
    let method: Method = fit.method;
    let names = panel.unit_ids();

    out.write_json(
        "weights.json",
        &json!({
            "manifest": MANIFEST_FILE,
            "method": method,
            "label": method.label(),
            "treated": names[0],
            "intercept": fit.omega[0],
            "donor_weight_sum": donor_sum(&fit.omega),
            "weights": unit_weights(&panel, &fit.omega),
        }),
    )?;
    write_effects(out, &panel, &fit.omega)?;
    if args.diagnostics {
        let zeroed: Vec<&str> = fit.active_set.iter().map(|&i| names[i].as_str()).collect();
        out.write_json(
            "diagnostics.json",
            &json!({
                "manifest": MANIFEST_FILE,
                "objective": fit.objective,
                "tuning": fit.tuning,
                "zero_weight_donors": zeroed,
                "kkt": fit.kkt,
            }),
        )?;
    }
    Ok(RunRecord { seed: None, inputs })
}
