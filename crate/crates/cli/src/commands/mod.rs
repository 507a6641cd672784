pub mod estimate;
pub mod posterior;
pub mod report;
pub mod simulate;

use std::io::Cursor;
use std::path::Path;

use bscm_core::estimators::synthetic_path;
use bscm_core::panel::{read_panel, Panel};
use serde::Serialize;

use crate::args::DataArgs;
use crate::error::{CliError, CliResult};
use crate::manifest::FileDigest;
use crate::output::{header, num, sha256_hex, OutputDir};

/// What a command reports back for its manifest.
pub struct RunRecord {
    pub seed: Option<u64>,
    pub inputs: Vec<FileDigest>,
}

pub fn read_input(path: &Path, inputs: &mut Vec<FileDigest>) -> CliResult<Vec<u8>> {
    let bytes = std::fs::read(path).map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))?;
    inputs.push(FileDigest { path: path.display().to_string(), sha256: sha256_hex(&bytes) });
    Ok(bytes)
}

/// Loads the panel from exactly the bytes whose digests go in the manifest.
pub fn load(args: &DataArgs, inputs: &mut Vec<FileDigest>) -> CliResult<Panel> {
    let outcomes = read_input(&args.data, inputs)?;
    let covariates = args.covariates.as_deref().map(|p| read_input(p, inputs)).transpose()?;
    let panel = read_panel(Cursor::new(outcomes), covariates.map(Cursor::new), &args.treated, &args.pre_end)?;
    Ok(if args.standardize { panel.standardized() } else { panel })
}

#[derive(Serialize)]
pub struct UnitWeight<'a> {
    pub unit: &'a str,
    pub weight: f64,
}

pub fn unit_weights<'a>(panel: &'a Panel, omega: &[f64]) -> Vec<UnitWeight<'a>> {
    panel.unit_ids()[1..].iter().zip(&omega[1..]).map(|(unit, &weight)| UnitWeight { unit, weight }).collect()
}

pub fn donor_sum(omega: &[f64]) -> f64 {
    omega[1..].iter().sum()
}

/// `effects.csv`: every period with the observed and synthetic series.
pub fn write_effects(out: &mut OutputDir, panel: &Panel, omega: &[f64]) -> CliResult<()> {
    let synth = synthetic_path(omega, panel)?;
    let y = panel.outcomes();
    let rows = panel.times().iter().enumerate().map(|(t, time)| {
        vec![time.clone(), num(y[(0, t)]), num(synth[t]), num(y[(0, t)] - synth[t])]
    });
    out.write_csv("effects.csv", &header(&["time", "observed", "counterfactual", "gap"]), rows)
}
