use std::collections::HashMap;
use std::path::Path;

use super::{read_input, RunRecord};
use crate::args::ReportArgs;
use crate::error::{CliError, CliResult};
use crate::manifest::FileDigest;
use crate::output::{header, OutputDir};

/// A CSV read back as named string columns.
struct Table {
    columns: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn read(path: &Path, inputs: &mut Vec<FileDigest>) -> CliResult<Self> {
        let bytes = read_input(path, inputs)?;
        let mut rdr = csv::Reader::from_reader(bytes.as_slice());
        let columns = rdr.headers()?.iter().map(str::to_string).collect();
        let rows = rdr.records().map(|r| r.map(|r| r.iter().map(str::to_string).collect())).collect::<Result<_, _>>()?;
        Ok(Self { columns, rows })
    }

    fn column(&self, name: &str, file: &str) -> CliResult<Vec<&str>> {
        let k = self
            .columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| CliError::usage(format!("{file} has no `{name}` column")))?;
        Ok(self.rows.iter().map(|r| r[k].as_str()).collect())
    }
}

pub fn run(args: &ReportArgs, out: &mut OutputDir) -> CliResult<RunRecord> {
    let mut inputs = Vec::new();
    let effects_path = args.from.join("effects.csv");
    if !effects_path.is_file() {
        return Err(CliError::usage(format!("{} is not an estimate or posterior output directory", args.from.display())));
    }
    let effects = Table::read(&effects_path, &mut inputs)?;
    let times = effects.column("time", "effects.csv")?;
    let observed = effects.column("observed", "effects.csv")?;
    let synthetic = effects.column("counterfactual", "effects.csv")?;
    let gap = effects.column("gap", "effects.csv")?;

    let rows = (0..times.len()).map(|t| vec![times[t].to_string(), observed[t].to_string(), synthetic[t].to_string()]);
    out.write_csv("trajectory.csv", &header(&["time", "treated", "synthetic"]), rows)?;

    let band_path = args.from.join("effects_posterior.csv");
    if band_path.is_file() {
        let band = Table::read(&band_path, &mut inputs)?;
        let file = "effects_posterior.csv";
        let post: HashMap<&str, (&str, &str, &str)> = band
            .column("time", file)?
            .into_iter()
            .zip(band.column("mean", file)?)
            .zip(band.column("hpd_lower", file)?.into_iter().zip(band.column("hpd_upper", file)?))
            .map(|((t, m), (lo, hi))| (t, (m, lo, hi)))
            .collect();
        // pre-period rows carry the in-sample fit as a zero-width band
        let rows = (0..times.len()).map(|t| match post.get(times[t]) {
            Some(&(m, lo, hi)) => vec![times[t].to_string(), m.to_string(), lo.to_string(), hi.to_string()],
            None => vec![times[t].to_string(), gap[t].to_string(), gap[t].to_string(), gap[t].to_string()],
        });
        out.write_csv("gap_band.csv", &header(&["time", "gap", "hpd_lower", "hpd_upper"]), rows)?;
    } else {
        let rows = (0..times.len()).map(|t| vec![times[t].to_string(), gap[t].to_string()]);
        out.write_csv("gap_band.csv", &header(&["time", "gap"]), rows)?;
    }
    Ok(RunRecord { seed: None, inputs })
}
