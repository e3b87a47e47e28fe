//! Tab-separated tables and JSON sidecars. Layouts are described in
//! docs/formats.md.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use batfled::checkpoint::write_atomic;
use batfled::eval::{EvalReport, Summary, Task};
use batfled::tensor::Matrix;
use batfled::{FeatureMatrix, Mask3, SimDataset, Tensor3, TrainTestSplit, TrainTrace};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    write_atomic(path, text.as_bytes()).map_err(|e| CliError::Io(format!("writing {}: {e}", path.display())))
}

pub fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("reading {}: {e}", path.display())))
}

fn parse_f64(s: &str, path: &Path, line: usize) -> Result<f64, CliError> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| CliError::Validation(format!("{}:{line}: '{s}' is not a number", path.display())))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(CliError::Validation(format!("{}:{line}: non-finite value '{s}'", path.display())))
    }
}

// ---------------------------------------------------------------- features

pub fn format_features(f: &FeatureMatrix) -> String {
    let mut out = String::from("id");
    for c in &f.col_ids {
        out.push('\t');
        out.push_str(c);
    }
    out.push('\n');
    for (i, id) in f.row_ids.iter().enumerate() {
        out.push_str(id);
        for p in 0..f.ncols() {
            write!(out, "\t{}", f.values[(i, p)]).unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn read_features(path: &Path) -> Result<FeatureMatrix, CliError> {
    let text = read_text(path)?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| CliError::Validation(format!("{}: empty feature file", path.display())))?;
    let col_ids: Vec<String> = header.split('\t').skip(1).map(str::to_string).collect();
    let mut row_ids = Vec::new();
    let mut values = Vec::new();
    for (n, line) in lines {
        let mut fields = line.split('\t');
        row_ids.push(fields.next().unwrap_or_default().to_string());
        let row: Vec<&str> = fields.collect();
        if row.len() != col_ids.len() {
            return Err(CliError::Validation(format!(
                "{}:{}: {} values for {} features",
                path.display(),
                n + 1,
                row.len(),
                col_ids.len()
            )));
        }
        for v in row {
            values.push(parse_f64(v, path, n + 1)?);
        }
    }
    check_unique(&row_ids, path, "example")?;
    check_unique(&col_ids, path, "feature")?;
    let m = Matrix::from_row_slice(row_ids.len(), col_ids.len(), &values);
    FeatureMatrix::new(m, row_ids, col_ids).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

fn check_unique(ids: &[String], path: &Path, what: &str) -> Result<(), CliError> {
    let mut seen = std::collections::HashSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(CliError::Validation(format!("{}: duplicate {what} id '{id}'", path.display())));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- responses

/// Long format, one row per cell in layout order (first mode fastest).
/// Unobserved cells are left out.
pub fn format_long(values: &Tensor3, mask: Option<&Mask3>, ids: [&[String]; 3]) -> String {
    let d = values.dims();
    let mut out = String::from("id1\tid2\tid3\tvalue\n");
    for k in 0..d[2] {
        for j in 0..d[1] {
            for i in 0..d[0] {
                if mask.is_none_or(|m| m.get(i, j, k)) {
                    writeln!(out, "{}\t{}\t{}\t{}", ids[0][i], ids[1][j], ids[2][k], values.get(i, j, k)).unwrap();
                }
            }
        }
    }
    out
}

/// Reads a long-format table against the example ids of each mode.
pub fn read_long(path: &Path, ids: [&[String]; 3]) -> Result<(Tensor3, Mask3), CliError> {
    let text = read_text(path)?;
    let index: Vec<HashMap<&str, usize>> = ids
        .iter()
        .map(|v| v.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect())
        .collect();
    let dims = [ids[0].len(), ids[1].len(), ids[2].len()];
    let mut y = Tensor3::zeros(dims);
    let mut mask = Mask3::empty(dims);
    for (n, line) in text.lines().enumerate().skip(1).filter(|(_, l)| !l.is_empty()) {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(CliError::Validation(format!(
                "{}:{}: expected 4 columns, found {}",
                path.display(),
                n + 1,
                fields.len()
            )));
        }
        let mut at = [0usize; 3];
        for m in 0..3 {
            at[m] = *index[m].get(fields[m]).ok_or_else(|| {
                CliError::Validation(format!(
                    "{}:{}: unknown mode-{} example id '{}'",
                    path.display(),
                    n + 1,
                    m + 1,
                    fields[m]
                ))
            })?;
        }
        if mask.get(at[0], at[1], at[2]) {
            return Err(CliError::Validation(format!(
                "{}:{}: duplicate cell ({}, {}, {})",
                path.display(),
                n + 1,
                fields[0],
                fields[1],
                fields[2]
            )));
        }
        y.set(at[0], at[1], at[2], parse_f64(fields[3], path, n + 1)?);
        mask.set(at[0], at[1], at[2], true);
    }
    Ok((y, mask))
}

// ---------------------------------------------------------------- json sidecars

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitFile {
    pub train: [Vec<String>; 3],
    pub test: [Vec<String>; 3],
    /// Withheld training-block cells as example id triples.
    pub warm: Vec<[String; 3]>,
}

impl SplitFile {
    pub fn from_split(split: &TrainTestSplit, ids: [&[String]; 3]) -> Self {
        let names = |m: usize, v: &[usize]| v.iter().map(|&i| ids[m][i].clone()).collect::<Vec<_>>();
        Self {
            train: [0, 1, 2].map(|m| names(m, &split.train[m])),
            test: [0, 1, 2].map(|m| names(m, &split.test[m])),
            warm: split
                .warm_cells()
                .into_iter()
                .map(|(i, j, k)| {
                    [
                        ids[0][split.train[0][i]].clone(),
                        ids[1][split.train[1][j]].clone(),
                        ids[2][split.train[2][k]].clone(),
                    ]
                })
                .collect(),
        }
    }

    pub fn to_split(&self, ids: [&[String]; 3]) -> Result<TrainTestSplit, CliError> {
        let lookup = |m: usize, names: &[String]| -> Result<Vec<usize>, CliError> {
            names
                .iter()
                .map(|n| {
                    ids[m].iter().position(|x| x == n).ok_or_else(|| {
                        CliError::Validation(format!("split: unknown mode-{} example id '{n}'", m + 1))
                    })
                })
                .collect()
        };
        let train = [lookup(0, &self.train[0])?, lookup(1, &self.train[1])?, lookup(2, &self.train[2])?];
        let test = [lookup(0, &self.test[0])?, lookup(1, &self.test[1])?, lookup(2, &self.test[2])?];
        let mut cells = Vec::with_capacity(self.warm.len());
        for cell in &self.warm {
            let pos = |m: usize| {
                self.train[m].iter().position(|x| *x == cell[m]).ok_or_else(|| {
                    CliError::Validation(format!("split: warm cell id '{}' is not a training example", cell[m]))
                })
            };
            cells.push((pos(0)?, pos(1)?, pos(2)?));
        }
        TrainTestSplit::from_parts(train, test, &cells).map_err(|e| CliError::Validation(format!("split: {e}")))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorJson {
    pub dims: [usize; 3],
    /// Layout order, first mode fastest.
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthFile {
    pub core_kind: String,
    pub seed: u64,
    /// Causal feature ids per mode.
    pub causal: [Vec<String>; 3],
    pub core: TensorJson,
    /// Generating projections, one `features x latent` row-major array per mode.
    pub projections: [Vec<Vec<f64>>; 3],
}

impl TruthFile {
    pub fn from_dataset(ds: &SimDataset) -> Self {
        Self {
            core_kind: ds.config.core_kind.name().into(),
            seed: ds.config.seed,
            causal: [0, 1, 2].map(|m| ds.causal[m].iter().map(|&f| ds.features[m].col_ids[f].clone()).collect()),
            core: TensorJson {
                dims: ds.true_core.dims(),
                values: ds.true_core.as_slice().to_vec(),
            },
            projections: [0, 1, 2].map(|m| {
                let a = &ds.true_proj[m];
                (0..a.nrows()).map(|r| a.row(r).iter().copied().collect()).collect()
            }),
        }
    }

    /// Causal labels as column indices of the given features.
    pub fn causal_indices(&self, features: &[FeatureMatrix; 3]) -> Result<[Vec<usize>; 3], CliError> {
        let mut out: [Vec<usize>; 3] = Default::default();
        for m in 0..3 {
            for id in &self.causal[m] {
                let p = features[m].col_ids.iter().position(|c| c == id).ok_or_else(|| {
                    CliError::Validation(format!("truth: causal feature '{id}' missing from mode-{} features", m + 1))
                })?;
                out[m].push(p);
            }
        }
        Ok(out)
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    write_text(path, &text)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    serde_json::from_str(&read_text(path)?).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResponseScale {
    pub mean: f64,
    pub sd: f64,
}

// ---------------------------------------------------------------- reports

/// With `every > 0` only sweeps that computed the bound are listed.
pub fn format_trace(trace: &TrainTrace, every: usize) -> String {
    let mut out = String::from("sweep\telbo\trmse\tms\n");
    for r in &trace.records {
        if every > 0 && r.elbo.is_none() {
            continue;
        }
        let elbo = r.elbo.map_or_else(|| "NA".to_string(), |e| e.to_string());
        writeln!(out, "{}\t{elbo}\t{}\t{}", r.sweep, r.train_rmse, r.wall_ms).unwrap();
    }
    out
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

pub fn report_header() -> String {
    let mut h = String::from("replicate\tstatus");
    for t in Task::ALL {
        h.push('\t');
        h.push_str(t.label());
    }
    h.push_str("\tauroc_m1\tauroc_m2\tauroc_m3\n");
    h
}

/// A replicate's outcome: its report, or the error that stopped it.
pub type Outcome = Result<EvalReport, String>;

pub enum Metric {
    Nrmse,
    Pearson,
}

fn metric(r: &EvalReport, t: Task, metric: &Metric) -> Option<f64> {
    let s = r.score(t)?;
    match metric {
        Metric::Nrmse => Some(s.nrmse),
        Metric::Pearson => s.pearson,
    }
}

fn columns(r: &EvalReport, m: &Metric) -> Vec<Option<f64>> {
    let mut v: Vec<Option<f64>> = Task::ALL.iter().map(|&t| metric(r, t, m)).collect();
    v.extend(r.auroc);
    v
}

fn summaries(rows: &[(usize, Outcome)], m: &Metric) -> Vec<Option<Summary>> {
    let ok: Vec<Vec<Option<f64>>> = rows.iter().filter_map(|(_, o)| o.as_ref().ok()).map(|r| columns(r, m)).collect();
    (0..Task::ALL.len() + 3)
        .map(|c| batfled::eval::summarize(ok.iter().map(|row| row[c])))
        .collect()
}

fn clean(msg: &str) -> String {
    msg.replace(['\t', '\n'], " ")
}

/// One row per replicate plus a `mean` row over the successful ones.
pub fn format_report(rows: &[(usize, Outcome)], m: Metric) -> String {
    let mut out = report_header();
    for (rep, o) in rows {
        match o {
            Ok(r) => {
                write!(out, "{rep}\tok").unwrap();
                for v in columns(r, &m) {
                    write!(out, "\t{}", opt(v)).unwrap();
                }
            }
            Err(e) => {
                write!(out, "{rep}\terror: {}", clean(e)).unwrap();
                for _ in 0..Task::ALL.len() + 3 {
                    out.push_str("\tNA");
                }
            }
        }
        out.push('\n');
    }
    out.push_str("mean\tsummary");
    for s in summaries(rows, &m) {
        write!(out, "\t{}", opt(s.map(|s| s.mean))).unwrap();
    }
    out.push('\n');
    out
}

pub fn summary_header() -> String {
    let mut h = String::from("data\tmethod\tmetric\tstatistic\tn");
    for t in Task::ALL {
        h.push('\t');
        h.push_str(t.label());
    }
    h.push_str("\tauroc_m1\tauroc_m2\tauroc_m3\n");
    h
}

/// Mean and sd lines of both metrics for one group of replicates.
pub fn format_summary_rows(data: &str, method: &str, rows: &[(usize, Outcome)]) -> String {
    let n = rows.iter().filter(|(_, o)| o.is_ok()).count();
    let mut out = String::new();
    for (name, m) in [("nrmse", Metric::Nrmse), ("pearson", Metric::Pearson)] {
        let s = summaries(rows, &m);
        for (stat, pick) in [("mean", 0), ("sd", 1)] {
            write!(out, "{data}\t{method}\t{name}\t{stat}\t{n}").unwrap();
            for v in &s {
                let x = v.map(|v| if pick == 0 { v.mean } else { v.sd });
                write!(out, "\t{}", opt(x)).unwrap();
            }
            out.push('\n');
        }
    }
    out
}

pub fn format_timings(rows: &[(String, String, usize, Option<u64>)]) -> String {
    let mut out = String::from("data\tmethod\treplicate\truntime_ms\n");
    for (d, m, r, ms) in rows {
        let ms = ms.map_or_else(|| "NA".to_string(), |v| v.to_string());
        writeln!(out, "{d}\t{m}\t{r}\t{ms}").unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn features_round_trip_exactly() {
        let m = Matrix::from_fn(3, 2, |i, j| (i as f64 + 0.1) / (j as f64 + 3.0));
        let f = FeatureMatrix::with_default_ids(m, "r").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.tsv");
        write_text(&p, &format_features(&f)).unwrap();
        assert_eq!(read_features(&p).unwrap(), f);
    }

    #[test]
    fn long_format_skips_missing_cells() {
        let ids: Vec<Vec<String>> = (0..3).map(|m| (0..2).map(|i| format!("{m}{i}")).collect()).collect();
        let idr = [ids[0].as_slice(), &ids[1], &ids[2]];
        let y = Tensor3::from_fn([2; 3], |i, j, k| (i + 10 * j + 100 * k) as f64 * 0.3);
        let mut mask = Mask3::full([2; 3]);
        mask.set(1, 0, 1, false);
        let text = format_long(&y, Some(&mask), idr);
        assert_eq!(text.lines().count(), 8);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("y.tsv");
        write_text(&p, &text).unwrap();
        let (y2, m2) = read_long(&p, idr).unwrap();
        assert_eq!(m2, mask);
        for f in 0..8 {
            if mask.as_slice()[f] {
                assert_eq!(y.as_slice()[f].to_bits(), y2.as_slice()[f].to_bits());
            }
        }
        write_text(&p, "id1\tid2\tid3\tvalue\n00\t10\tnope\t1\n").unwrap();
        let err = read_long(&p, idr).unwrap_err().to_string();
        assert!(err.contains("nope"), "{err}");
    }

    #[test]
    fn report_mean_row_is_the_replicate_mean() {
        let rep = |r: usize, x: f64| EvalReport {
            replicate: r,
            scores: Task::ALL
                .iter()
                .map(|&task| batfled::eval::TaskScore {
                    task,
                    nrmse: x,
                    pearson: Some(x / 2.0),
                    n_cells: 1,
                })
                .collect(),
            auroc: [Some(x), None, Some(1.0)],
            runtime_ms: 0,
        };
        let rows = vec![(0, Ok(rep(0, 0.1))), (1, Err("boom\tbad".to_string())), (2, Ok(rep(2, 0.4)))];
        let text = format_report(&rows, Metric::Nrmse);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 5);
        assert!(lines[2].starts_with("1\terror: boom bad\tNA"));
        let mean: Vec<&str> = lines[4].split('\t').collect();
        assert_eq!(mean[2], (0.5f64 / 2.0).to_string());
        assert_eq!(mean[12], "NA");
    }
}
