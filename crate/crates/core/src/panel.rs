//! Balanced single-treated-unit panels and the stacked design matrices
//! every estimator consumes.
//!
//! Outcomes are read from a long-format CSV (`unit,time,outcome`) and
//! covariates from `unit,covariate,component_index,value`. The treated unit is
//! always stored first. Covariate rows in the design are covariate-major: all
//! components of covariate 1, then covariate 2, and so on.

use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// A named covariate and the number of rows it contributes to the design.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CovariateBlock {
    pub name: String,
    pub dim: usize,
}

/// Outcomes and covariates for one treated unit (row 0) and its donors.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    unit_ids: Vec<String>,
    times: Vec<String>,
    outcomes: DMatrix<f64>,
    covariates: Vec<CovariateBlock>,
    z: DMatrix<f64>,
    t0: usize,
}

impl Panel {
    /// Builds a panel, checking the shape invariants.
    ///
    /// `outcomes` is N×T, `z` is N×ΣR with columns laid out covariate-major.
    pub fn new(
        unit_ids: Vec<String>,
        times: Vec<String>,
        outcomes: DMatrix<f64>,
        covariates: Vec<CovariateBlock>,
        z: DMatrix<f64>,
        t0: usize,
    ) -> Result<Self> {
        let n = unit_ids.len();
        let t = times.len();
        if n < 2 {
            return Err(Error::Validation(format!(
                "a panel needs a treated unit and at least one donor, got {n} unit(s)"
            )));
        }
        if t0 == 0 || t0 >= t {
            return Err(Error::Validation(format!(
                "pre-treatment length must satisfy 1 <= T0 < T (T0 = {t0}, T = {t})"
            )));
        }
        if outcomes.nrows() != n || outcomes.ncols() != t {
            return Err(Error::Dimension(format!(
                "outcome matrix is {}x{}, expected {n}x{t}",
                outcomes.nrows(),
                outcomes.ncols()
            )));
        }
        let zdim: usize = covariates.iter().map(|c| c.dim).sum();
        if z.nrows() != n || z.ncols() != zdim {
            return Err(Error::Schema(format!(
                "covariate matrix is {}x{}, expected {n}x{zdim}",
                z.nrows(),
                z.ncols()
            )));
        }
        if covariates.iter().any(|c| c.dim == 0) {
            return Err(Error::Schema("covariate blocks must have at least one component".into()));
        }
        if let Some((i, j)) = find_duplicate(&unit_ids) {
            return Err(Error::Validation(format!(
                "duplicate unit id `{}` (positions {i} and {j})",
                unit_ids[i]
            )));
        }
        if !times_strictly_increasing(&times) {
            return Err(Error::Validation("time labels must be strictly increasing".into()));
        }
        if let Some(pos) = outcomes.iter().position(|v| !v.is_finite()) {
            let (r, c) = (pos % n, pos / n);
            return Err(Error::Numeric(format!(
                "outcome for unit `{}` at time `{}` is not finite",
                unit_ids[r], times[c]
            )));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("covariate values must be finite".into()));
        }
        Ok(Self { unit_ids, times, outcomes, covariates, z, t0 })
    }

    pub fn n_units(&self) -> usize {
        self.unit_ids.len()
    }

    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    pub fn t0(&self) -> usize {
        self.t0
    }

    /// Number of post-treatment periods.
    pub fn t1(&self) -> usize {
        self.times.len() - self.t0
    }

    pub fn unit_ids(&self) -> &[String] {
        &self.unit_ids
    }

    pub fn times(&self) -> &[String] {
        &self.times
    }

    /// N×T outcome matrix; row 0 is the treated unit.
    pub fn outcomes(&self) -> &DMatrix<f64> {
        &self.outcomes
    }

    pub fn covariates(&self) -> &[CovariateBlock] {
        &self.covariates
    }

    /// N×ΣR covariate matrix.
    pub fn covariate_matrix(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn n_covariates(&self) -> usize {
        self.covariates.len()
    }

    /// Returns a copy whose donors appear in the order given by `donor_order`,
    /// a permutation of `1..N`.
    pub fn with_donor_order(&self, donor_order: &[usize]) -> Result<Self> {
        let n = self.n_units();
        let mut seen = vec![false; n];
        if donor_order.len() != n - 1
            || donor_order.iter().any(|&i| i == 0 || i >= n || std::mem::replace(&mut seen[i], true))
        {
            return Err(Error::Validation("donor order must be a permutation of 1..N".into()));
        }
        let rows: Vec<usize> = std::iter::once(0).chain(donor_order.iter().copied()).collect();
        Panel::new(
            rows.iter().map(|&i| self.unit_ids[i].clone()).collect(),
            self.times.clone(),
            self.outcomes.select_rows(rows.iter()),
            self.covariates.clone(),
            self.z.select_rows(rows.iter()),
            self.t0,
        )
    }

    /// Centers and scales each covariate block using the donors' mean and
    /// standard deviation over all of the block's components.
    pub fn standardized(&self) -> Self {
        let mut z = self.z.clone();
        let n = self.n_units();
        let mut offset = 0;
        for block in &self.covariates {
            let cols = offset..offset + block.dim;
            let donor_vals: Vec<f64> =
                (1..n).flat_map(|i| cols.clone().map(move |c| (i, c))).map(|(i, c)| self.z[(i, c)]).collect();
            let m = donor_vals.len() as f64;
            let mean = donor_vals.iter().sum::<f64>() / m;
            let var = donor_vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
            let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
            for i in 0..n {
                for c in cols.clone() {
                    z[(i, c)] = (z[(i, c)] - mean) / sd;
                }
            }
            offset += block.dim;
        }
        Self { z, ..self.clone() }
    }
}

fn find_duplicate(ids: &[String]) -> Option<(usize, usize)> {
    let mut seen: HashMap<&str, usize> = HashMap::new();
    for (j, id) in ids.iter().enumerate() {
        if let Some(&i) = seen.get(id.as_str()) {
            return Some((i, j));
        }
        seen.insert(id, j);
    }
    None
}

/// Orders time labels numerically when every label parses as a number,
/// lexicographically otherwise (ISO dates sort correctly either way).
fn compare_times(labels: &[&str]) -> impl Fn(&str, &str) -> std::cmp::Ordering {
    let numeric = labels.iter().all(|l| l.trim().parse::<f64>().is_ok());
    move |a: &str, b: &str| {
        if numeric {
            let x: f64 = a.trim().parse().unwrap_or(f64::NAN);
            let y: f64 = b.trim().parse().unwrap_or(f64::NAN);
            x.partial_cmp(&y).unwrap_or(std::cmp::Ordering::Equal)
        } else {
            a.cmp(b)
        }
    }
}

fn times_strictly_increasing(times: &[String]) -> bool {
    let labels: Vec<&str> = times.iter().map(String::as_str).collect();
    let cmp = compare_times(&labels);
    times.windows(2).all(|w| cmp(&w[0], &w[1]) == std::cmp::Ordering::Less)
}

/// Row layout of the stacked design: `t0` outcome rows followed by one block
/// per covariate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowBlocks {
    pub t0: usize,
    pub covariate_dims: Vec<usize>,
}

impl RowBlocks {
    pub fn n_rows(&self) -> usize {
        self.t0 + self.covariate_dims.iter().sum::<usize>()
    }

    /// Row range of covariate block `j`.
    pub fn block_range(&self, j: usize) -> std::ops::Range<usize> {
        let start = self.t0 + self.covariate_dims[..j].iter().sum::<usize>();
        start..start + self.covariate_dims[j]
    }

    pub fn n_blocks(&self) -> usize {
        self.covariate_dims.len()
    }
}

/// Stacked target vector and donor matrix.
///
/// When `has_intercept` is set, column 0 of `x0` is the intercept column (ones
/// over outcome rows, zeros over covariate rows) and columns 1.. are donors 2..N.
/// Otherwise `x0` holds donor columns only.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrices {
    pub x1: DVector<f64>,
    pub x0: DMatrix<f64>,
    pub has_intercept: bool,
    pub blocks: RowBlocks,
}

impl DesignMatrices {
    /// Number of units N, including the treated one.
    pub fn n_units(&self) -> usize {
        self.n_donors() + 1
    }

    pub fn n_donors(&self) -> usize {
        self.x0.ncols() - usize::from(self.has_intercept)
    }

    pub fn n_rows(&self) -> usize {
        self.x1.len()
    }

    /// Donor columns only (no intercept column).
    pub fn donors(&self) -> DMatrix<f64> {
        if self.has_intercept {
            self.x0.columns(1, self.n_donors()).into_owned()
        } else {
            self.x0.clone()
        }
    }

    /// The intercept column: ones over outcome rows, zeros over covariate rows.
    pub fn intercept_column(&self) -> DVector<f64> {
        DVector::from_fn(self.n_rows(), |r, _| if r < self.blocks.t0 { 1.0 } else { 0.0 })
    }

    /// Checks that `x0` and `x1` agree with the row layout.
    pub fn check(&self) -> Result<()> {
        let rows = self.blocks.n_rows();
        if self.x1.len() != rows || self.x0.nrows() != rows {
            return Err(Error::Dimension(format!(
                "design has {} target rows and {} donor rows, layout expects {rows}",
                self.x1.len(),
                self.x0.nrows()
            )));
        }
        if self.n_donors() == 0 {
            return Err(Error::Dimension("design has no donor columns".into()));
        }
        if self.x1.iter().chain(self.x0.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("design contains non-finite entries".into()));
        }
        Ok(())
    }
}

/// Stacks the pre-period outcomes (and optionally covariates) of the treated
/// unit into `x1` and of the donors into the columns of `x0`.
pub fn build_design(panel: &Panel, use_covariates: bool, use_intercept: bool) -> DesignMatrices {
    let n = panel.n_units();
    let t0 = panel.t0();
    let covariate_dims: Vec<usize> =
        if use_covariates { panel.covariates().iter().map(|c| c.dim).collect() } else { Vec::new() };
    let blocks = RowBlocks { t0, covariate_dims };
    let rows = blocks.n_rows();
    let zdim = rows - t0;

    let stacked = |unit: usize, r: usize| -> f64 {
        if r < t0 {
            panel.outcomes()[(unit, r)]
        } else {
            panel.covariate_matrix()[(unit, r - t0)]
        }
    };

    let x1 = DVector::from_fn(rows, |r, _| stacked(0, r));
    let lead = usize::from(use_intercept);
    let x0 = DMatrix::from_fn(rows, n - 1 + lead, |r, c| {
        if use_intercept && c == 0 {
            if r < t0 {
                1.0
            } else {
                0.0
            }
        } else {
            stacked(c + 1 - lead, r)
        }
    });
    debug_assert_eq!(rows, t0 + zdim);
    DesignMatrices { x1, x0, has_intercept: use_intercept, blocks }
}

#[derive(Debug, serde::Deserialize)]
struct OutcomeRow {
    unit: String,
    time: String,
    outcome: f64,
}

#[derive(Debug, serde::Deserialize)]
struct CovariateRow {
    unit: String,
    covariate: String,
    component_index: i64,
    value: f64,
}

/// Loads a panel from the long-format CSV files on disk.
pub fn load_panel(
    outcomes_path: &Path,
    covariates_path: Option<&Path>,
    treated_id: &str,
    t0_boundary: &str,
) -> Result<Panel> {
    let outcomes = File::open(outcomes_path)?;
    match covariates_path {
        Some(p) => read_panel(outcomes, Some(File::open(p)?), treated_id, t0_boundary),
        None => read_panel(outcomes, None::<File>, treated_id, t0_boundary),
    }
}

/// Reader-based form of [`load_panel`].
pub fn read_panel<R: Read, C: Read>(
    outcomes: R,
    covariates: Option<C>,
    treated_id: &str,
    t0_boundary: &str,
) -> Result<Panel> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(outcomes);
    let mut unit_order: Vec<String> = Vec::new();
    let mut unit_index: HashMap<String, usize> = HashMap::new();
    let mut time_labels: Vec<String> = Vec::new();
    let mut time_seen: HashMap<String, ()> = HashMap::new();
    let mut cells: HashMap<(usize, String), f64> = HashMap::new();

    for row in rdr.deserialize::<OutcomeRow>() {
        let row = row?;
        let u = *unit_index.entry(row.unit.clone()).or_insert_with(|| {
            unit_order.push(row.unit.clone());
            unit_order.len() - 1
        });
        if time_seen.insert(row.time.clone(), ()).is_none() {
            time_labels.push(row.time.clone());
        }
        if cells.insert((u, row.time.clone()), row.outcome).is_some() {
            return Err(Error::Validation(format!(
                "duplicate observation for unit `{}` at time `{}`",
                row.unit, row.time
            )));
        }
    }

    let treated = *unit_index
        .get(treated_id)
        .ok_or_else(|| Error::NotFound(format!("treated unit `{treated_id}` is not in the outcome file")))?;

    let labels: Vec<&str> = time_labels.iter().map(String::as_str).chain([t0_boundary]).collect();
    let cmp = compare_times(&labels);
    time_labels.sort_by(|a, b| cmp(a, b));
    let t0 = time_labels.iter().filter(|t| cmp(t, t0_boundary) != std::cmp::Ordering::Greater).count();

    // treated first, donors in order of first appearance
    let order: Vec<usize> =
        std::iter::once(treated).chain((0..unit_order.len()).filter(|&i| i != treated)).collect();
    let n = order.len();
    let t = time_labels.len();
    let mut y = DMatrix::zeros(n, t);
    for (r, &u) in order.iter().enumerate() {
        for (c, time) in time_labels.iter().enumerate() {
            match cells.get(&(u, time.clone())) {
                Some(&v) => y[(r, c)] = v,
                None => {
                    return Err(Error::MissingCell { unit: unit_order[u].clone(), time: time.clone() });
                }
            }
        }
    }
    let unit_ids: Vec<String> = order.iter().map(|&u| unit_order[u].clone()).collect();

    let (blocks, z) = match covariates {
        Some(c) => read_covariates(c, &unit_ids)?,
        None => (Vec::new(), DMatrix::zeros(n, 0)),
    };
    Panel::new(unit_ids, time_labels, y, blocks, z, t0)
}

fn read_covariates<C: Read>(src: C, unit_ids: &[String]) -> Result<(Vec<CovariateBlock>, DMatrix<f64>)> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(src);
    let mut cov_order: Vec<String> = Vec::new();
    // covariate -> unit -> component -> value
    let mut values: HashMap<String, HashMap<String, Vec<(i64, f64)>>> = HashMap::new();
    for row in rdr.deserialize::<CovariateRow>() {
        let row = row?;
        if !unit_ids.contains(&row.unit) {
            return Err(Error::Schema(format!(
                "covariate row for unit `{}` which has no outcomes",
                row.unit
            )));
        }
        let per_cov = values.entry(row.covariate.clone()).or_insert_with(|| {
            cov_order.push(row.covariate.clone());
            HashMap::new()
        });
        per_cov.entry(row.unit).or_default().push((row.component_index, row.value));
    }

    let mut blocks = Vec::with_capacity(cov_order.len());
    let mut columns: Vec<Vec<f64>> = Vec::new();
    for name in &cov_order {
        let per_cov = &values[name];
        let mut reference: Option<Vec<i64>> = None;
        let mut per_unit: Vec<Vec<f64>> = Vec::with_capacity(unit_ids.len());
        for unit in unit_ids {
            let mut comps = per_cov.get(unit).cloned().ok_or_else(|| {
                Error::Schema(format!("unit `{unit}` has no values for covariate `{name}`"))
            })?;
            comps.sort_by_key(|(k, _)| *k);
            let idx: Vec<i64> = comps.iter().map(|(k, _)| *k).collect();
            if idx.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::Schema(format!(
                    "unit `{unit}` repeats a component of covariate `{name}`"
                )));
            }
            match &reference {
                None => reference = Some(idx),
                Some(r) if *r != idx => {
                    return Err(Error::Schema(format!(
                        "covariate `{name}` has inconsistent components across units (unit `{unit}`)"
                    )));
                }
                _ => {}
            }
            per_unit.push(comps.into_iter().map(|(_, v)| v).collect());
        }
        let dim = per_unit[0].len();
        for k in 0..dim {
            columns.push(per_unit.iter().map(|v| v[k]).collect());
        }
        blocks.push(CovariateBlock { name: name.clone(), dim });
    }
    let z = DMatrix::from_fn(unit_ids.len(), columns.len(), |r, c| columns[c][r]);
    Ok((blocks, z))
}

/// Writes a panel back out in the long formats [`load_panel`] reads.
/// Component indices are written 1-based.
pub fn write_panel<W: Write, C: Write>(panel: &Panel, outcomes: W, covariates: Option<C>) -> Result<()> {
    let mut w = csv::Writer::from_writer(outcomes);
    w.write_record(["unit", "time", "outcome"])?;
    for (i, unit) in panel.unit_ids().iter().enumerate() {
        for (t, time) in panel.times().iter().enumerate() {
            w.write_record([unit.as_str(), time.as_str(), &format_float(panel.outcomes()[(i, t)])])?;
        }
    }
    w.flush()?;
    if let Some(c) = covariates {
        let mut w = csv::Writer::from_writer(c);
        w.write_record(["unit", "covariate", "component_index", "value"])?;
        for (i, unit) in panel.unit_ids().iter().enumerate() {
            let mut offset = 0;
            for block in panel.covariates() {
                for k in 0..block.dim {
                    w.write_record([
                        unit.as_str(),
                        block.name.as_str(),
                        &(k + 1).to_string(),
                        &format_float(panel.covariate_matrix()[(i, offset + k)]),
                    ])?;
                }
                offset += block.dim;
            }
        }
        w.flush()?;
    }
    Ok(())
}

/// Shortest representation that parses back to the same f64.
pub fn format_float(v: f64) -> String {
    format!("{v:?}")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_csv(units: &[&str], times: usize, skip: Option<(&str, usize)>) -> String {
        let mut s = String::from("unit,time,outcome\n");
        for (u, name) in units.iter().enumerate() {
            for t in 1..=times {
                if skip == Some((*name, t)) {
                    continue;
                }
                s.push_str(&format!("{name},{t},{}\n", (u * 10 + t) as f64 * 0.5));
            }
        }
        s
    }

    #[test]
    fn loads_full_grid() {
        let csv = grid_csv(&["B", "A", "C"], 5, None);
        let p = read_panel(csv.as_bytes(), None::<&[u8]>, "A", "3").unwrap();
        assert_eq!((p.n_units(), p.n_times(), p.t0()), (3, 5, 3));
        assert_eq!(p.unit_ids(), ["A", "B", "C"]);
        // unit A was second in the file: outcome (1*10 + t) / 2
        assert_eq!(p.outcomes()[(0, 0)], 5.5);
    }

    #[test]
    fn missing_cell_names_unit_and_time() {
        let csv = grid_csv(&["A", "B", "C"], 5, Some(("B", 4)));
        match read_panel(csv.as_bytes(), None::<&[u8]>, "A", "3") {
            Err(Error::MissingCell { unit, time }) => assert_eq!((unit.as_str(), time.as_str()), ("B", "4")),
            other => panic!("expected MissingCell, got {other:?}"),
        }
    }

    #[test]
    fn absent_treated_unit_is_not_found() {
        let csv = grid_csv(&["A", "B"], 4, None);
        assert!(matches!(read_panel(csv.as_bytes(), None::<&[u8]>, "Z", "2"), Err(Error::NotFound(_))));
    }

    #[test]
    fn inconsistent_covariate_blocks_rejected() {
        let csv = grid_csv(&["A", "B"], 4, None);
        let cov = "unit,covariate,component_index,value\nA,x,1,1.0\nA,x,2,2.0\nB,x,1,3.0\n";
        assert!(matches!(read_panel(csv.as_bytes(), Some(cov.as_bytes()), "A", "2"), Err(Error::Schema(_))));
    }

    #[test]
    fn numeric_times_sort_numerically() {
        let csv = "unit,time,outcome\nA,10,1\nA,9,2\nA,11,3\nB,9,1\nB,10,1\nB,11,1\n";
        let p = read_panel(csv.as_bytes(), None::<&[u8]>, "A", "10").unwrap();
        assert_eq!(p.times(), ["9", "10", "11"]);
        assert_eq!(p.t0(), 2);
        assert_eq!(p.outcomes()[(0, 0)], 2.0);
    }

    #[test]
    fn boundary_outside_range_is_invalid() {
        let csv = grid_csv(&["A", "B"], 4, None);
        assert!(read_panel(csv.as_bytes(), None::<&[u8]>, "A", "0").is_err());
        assert!(read_panel(csv.as_bytes(), None::<&[u8]>, "A", "4").is_err());
    }

    fn small_panel(p: usize) -> Panel {
        let y = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        let covs = (0..p).map(|j| CovariateBlock { name: format!("z{j}"), dim: 1 }).collect();
        let z = DMatrix::from_fn(3, p, |i, j| (10 * (i + 1) + j) as f64);
        Panel::new(vec!["a".into(), "b".into(), "c".into()], vec!["1".into(), "2".into(), "3".into()], y, covs, z, 2)
            .unwrap()
    }

    #[test]
    fn design_with_intercept_and_one_covariate() {
        let d = build_design(&small_panel(1), true, true);
        assert_eq!(d.x0.shape(), (3, 3));
        assert_eq!(d.x0.column(0).as_slice(), &[1.0, 1.0, 0.0]);
        assert_eq!(d.x1.as_slice(), &[1.0, 2.0, 10.0]);
        assert_eq!(d.x0.column(1).as_slice(), &[4.0, 5.0, 20.0]);
    }

    #[test]
    fn design_without_intercept_or_covariates() {
        let d = build_design(&small_panel(1), false, false);
        assert_eq!(d.x0, DMatrix::from_row_slice(2, 2, &[4.0, 7.0, 5.0, 8.0]));
        assert_eq!(d.x1.as_slice(), &[1.0, 2.0]);
    }

    #[test]
    fn row_blocks_for_two_scalar_covariates() {
        let d = build_design(&small_panel(2), true, true);
        assert_eq!(d.blocks.t0, 2);
        assert_eq!(d.blocks.covariate_dims, vec![1, 1]);
        assert_eq!(d.x0.column(0).as_slice(), &[1.0, 1.0, 0.0, 0.0]);
        assert_eq!(d.blocks.block_range(1), 3..4);
    }

    #[test]
    fn donor_reorder_permutes_columns_only() {
        let p = small_panel(2);
        let q = p.with_donor_order(&[2, 1]).unwrap();
        let (a, b) = (build_design(&p, true, true), build_design(&q, true, true));
        assert_eq!(a.x1, b.x1);
        assert_eq!(a.x0.column(0), b.x0.column(0));
        assert_eq!(a.x0.column(1), b.x0.column(2));
        assert_eq!(a.x0.column(2), b.x0.column(1));
    }

    #[test]
    fn standardize_uses_donor_statistics() {
        let s = small_panel(1).standardized();
        // donors hold 20 and 30 -> mean 25, sd 5
        assert_eq!(s.covariate_matrix().column(0).as_slice(), &[-3.0, -1.0, 1.0]);
    }
}
