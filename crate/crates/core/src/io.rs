//! File formats: datasets, coefficient grids, partitions, traces and tables.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelState, PartitionPair};
use crate::selection::IclEntry;
use crate::signal::{CommonFrequencyGrid, CoefficientGrid, TimeSeries, TimeSeriesDataset};

fn parse_err(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line: line as usize,
        message: message.into(),
    }
}

fn index_of(ids: &mut Vec<String>, lookup: &mut HashMap<String, usize>, id: &str) -> usize {
    if let Some(&i) = lookup.get(id) {
        return i;
    }
    ids.push(id.to_string());
    lookup.insert(id.to_string(), ids.len() - 1);
    ids.len() - 1
}

/// Reads the long format `row_id,col_id,t,value`. Rows and columns keep
/// their order of first appearance; each cell's sample interval is the mean
/// spacing of its sorted `t` values.
pub fn read_long_csv(path: &Path) -> Result<TimeSeriesDataset> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers = reader.headers()?.clone();
    let expected = ["row_id", "col_id", "t", "value"];
    if headers.len() != 4 || headers.iter().zip(expected).any(|(h, e)| h != e) {
        return Err(parse_err(path, 1, format!("expected header {}", expected.join(","))));
    }
    let (mut rows, mut cols) = (Vec::new(), Vec::new());
    let (mut row_idx, mut col_idx) = (HashMap::new(), HashMap::new());
    let mut cells: HashMap<(usize, usize), Vec<(f64, f64)>> = HashMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(path, line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != 4 {
            return Err(parse_err(path, line, format!("expected 4 fields, found {}", record.len())));
        }
        let number = |k: usize, name: &str| -> Result<f64> {
            let v: f64 = record[k]
                .parse()
                .map_err(|_| parse_err(path, line, format!("{name} {:?} is not a number", &record[k])))?;
            if !v.is_finite() {
                return Err(parse_err(path, line, format!("{name} is not finite")));
            }
            Ok(v)
        };
        let (t, value) = (number(2, "t")?, number(3, "value")?);
        let i = index_of(&mut rows, &mut row_idx, &record[0]);
        let j = index_of(&mut cols, &mut col_idx, &record[1]);
        cells.entry((i, j)).or_default().push((t, value));
    }
    if rows.is_empty() {
        return Err(parse_err(path, 1, "no data rows"));
    }
    let mut series = Vec::with_capacity(rows.len() * cols.len());
    for i in 0..rows.len() {
        for j in 0..cols.len() {
            let mut points = cells.remove(&(i, j)).ok_or_else(|| {
                Error::InvalidInput(format!("{}: cell ({}, {}) has no samples", path.display(), rows[i], cols[j]))
            })?;
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            let interval = if points.len() > 1 {
                (points[points.len() - 1].0 - points[0].0) / (points.len() - 1) as f64
            } else {
                1.0
            };
            if !(interval > 0.0) {
                return Err(Error::InvalidInput(format!(
                    "{}: cell ({}, {}) has repeated time stamps",
                    path.display(),
                    rows[i],
                    cols[j]
                )));
            }
            series.push(TimeSeries::new(points.into_iter().map(|p| p.1).collect(), interval)?);
        }
    }
    TimeSeriesDataset::new(rows, cols, series)
}

pub fn write_long_csv(path: &Path, dataset: &TimeSeriesDataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["row_id", "col_id", "t", "value"])?;
    for (i, r) in dataset.row_ids().iter().enumerate() {
        for (j, c) in dataset.col_ids().iter().enumerate() {
            let ts = dataset.get(i, j);
            for (u, v) in ts.values().iter().enumerate() {
                let t = u as f64 * ts.sample_interval();
                w.write_record([r.as_str(), c.as_str(), &t.to_string(), &v.to_string()])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct SeriesFile {
    interval: f64,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    rows: Vec<String>,
    cols: Vec<String>,
    series: HashMap<String, SeriesFile>,
}

/// Reads `{rows, cols, series: {"<row>|<col>": {interval, values}}}`.
pub fn read_dataset_json(path: &Path) -> Result<TimeSeriesDataset> {
    let file: DatasetFile = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    let mut series = Vec::with_capacity(file.rows.len() * file.cols.len());
    let mut map = file.series;
    for r in &file.rows {
        for c in &file.cols {
            let key = format!("{r}|{c}");
            let s = map
                .remove(&key)
                .ok_or_else(|| Error::InvalidInput(format!("{}: missing series {key:?}", path.display())))?;
            series.push(TimeSeries::new(s.values, s.interval)?);
        }
    }
    TimeSeriesDataset::new(file.rows, file.cols, series)
}

pub fn write_dataset_json(path: &Path, dataset: &TimeSeriesDataset) -> Result<()> {
    let mut series = HashMap::new();
    for (i, r) in dataset.row_ids().iter().enumerate() {
        for (j, c) in dataset.col_ids().iter().enumerate() {
            let ts = dataset.get(i, j);
            series.insert(
                format!("{r}|{c}"),
                SeriesFile {
                    interval: ts.sample_interval(),
                    values: ts.values().to_vec(),
                },
            );
        }
    }
    let file = DatasetFile {
        rows: dataset.row_ids().to_vec(),
        cols: dataset.col_ids().to_vec(),
        series,
    };
    write_json(path, &file)
}

/// Picks the reader from the file extension (`.json` or CSV otherwise).
pub fn read_dataset(path: &Path) -> Result<TimeSeriesDataset> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
        read_dataset_json(path)
    } else {
        read_long_csv(path)
    }
}

#[derive(Serialize, Deserialize)]
struct GridFile {
    n_rows: usize,
    n_cols: usize,
    length: usize,
    frequency_gap: f64,
    row_ids: Vec<String>,
    col_ids: Vec<String>,
    degenerate_cells: Vec<(usize, usize)>,
    /// One coefficient vector per cell, cell index `i * n_cols + j`.
    cells: Vec<Vec<f64>>,
}

pub fn write_grid(path: &Path, grid: &CoefficientGrid) -> Result<()> {
    let file = GridFile {
        n_rows: grid.n_rows(),
        n_cols: grid.n_cols(),
        length: grid.dim(),
        frequency_gap: grid.frequency_grid().gap,
        row_ids: grid.row_ids().to_vec(),
        col_ids: grid.col_ids().to_vec(),
        degenerate_cells: grid.degenerate_cells().to_vec(),
        cells: grid.data().chunks_exact(grid.dim()).map(<[f64]>::to_vec).collect(),
    };
    write_json(path, &file)
}

pub fn read_grid(path: &Path) -> Result<CoefficientGrid> {
    let file: GridFile = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    if file.row_ids.len() != file.n_rows || file.col_ids.len() != file.n_cols || file.cells.len() != file.n_rows * file.n_cols {
        return Err(Error::InvalidInput(format!("{}: grid dimensions disagree", path.display())));
    }
    if file.cells.iter().any(|c| c.len() != file.length) {
        return Err(Error::InvalidInput(format!("{}: coefficient vectors must have length {}", path.display(), file.length)));
    }
    CoefficientGrid::new(
        file.row_ids,
        file.col_ids,
        CommonFrequencyGrid::new(file.frequency_gap, file.length)?,
        file.cells.concat(),
        file.degenerate_cells,
    )
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

pub fn write_model(path: &Path, state: &ModelState) -> Result<()> {
    write_json(path, state)
}

pub fn read_model(path: &Path) -> Result<ModelState> {
    read_json(path)
}

/// `<prefix>.rows.csv` and `<prefix>.cols.csv`.
pub fn partition_paths(prefix: &Path) -> (PathBuf, PathBuf) {
    let with = |suffix: &str| {
        let mut s = prefix.as_os_str().to_owned();
        s.push(suffix);
        PathBuf::from(s)
    };
    (with(".rows.csv"), with(".cols.csv"))
}

/// Writes `row_id,col_cluster,row_cluster` for every (row, column cluster)
/// and `col_id,col_cluster` for every column.
pub fn write_partition(prefix: &Path, partition: &PartitionPair, row_ids: &[String], col_ids: &[String]) -> Result<()> {
    let (rows_path, cols_path) = partition_paths(prefix);
    let mut w = csv::Writer::from_path(rows_path)?;
    w.write_record(["row_id", "col_cluster", "row_cluster"])?;
    for (i, id) in row_ids.iter().enumerate() {
        for (l, rows) in partition.row_labels.iter().enumerate() {
            w.write_record([id.as_str(), &l.to_string(), &rows[i].to_string()])?;
        }
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(cols_path)?;
    w.write_record(["col_id", "col_cluster"])?;
    for (j, id) in col_ids.iter().enumerate() {
        w.write_record([id.as_str(), &partition.col_labels[j].to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// A partition with the ids it was written with.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledPartition {
    pub partition: PartitionPair,
    pub row_ids: Vec<String>,
    pub col_ids: Vec<String>,
}

impl LabeledPartition {
    /// Reorders rows and columns to the given id order.
    pub fn aligned_to(&self, row_ids: &[String], col_ids: &[String]) -> Result<PartitionPair> {
        let find = |ids: &[String], id: &String, what: &str| {
            ids.iter()
                .position(|x| x == id)
                .ok_or_else(|| Error::InvalidInput(format!("{what} {id:?} missing from partition")))
        };
        if row_ids.len() != self.row_ids.len() || col_ids.len() != self.col_ids.len() {
            return Err(Error::InvalidInput(format!(
                "partitions cover {}x{} and {}x{} cells",
                self.row_ids.len(),
                self.col_ids.len(),
                row_ids.len(),
                col_ids.len()
            )));
        }
        let row_pos: Vec<usize> = row_ids.iter().map(|id| find(&self.row_ids, id, "row")).collect::<Result<_>>()?;
        let col_pos: Vec<usize> = col_ids.iter().map(|id| find(&self.col_ids, id, "column")).collect::<Result<_>>()?;
        Ok(PartitionPair {
            col_labels: col_pos.iter().map(|&j| self.partition.col_labels[j]).collect(),
            row_labels: self
                .partition
                .row_labels
                .iter()
                .map(|rows| row_pos.iter().map(|&i| rows[i]).collect())
                .collect(),
        })
    }
}

fn parse_usize(path: &Path, line: u64, field: &str, name: &str) -> Result<usize> {
    field
        .parse()
        .map_err(|_| parse_err(path, line, format!("{name} {field:?} is not a nonnegative integer")))
}

pub fn read_partition(prefix: &Path) -> Result<LabeledPartition> {
    let (rows_path, cols_path) = partition_paths(prefix);
    let mut col_ids = Vec::new();
    let mut col_labels = Vec::new();
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(&cols_path)?;
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != 2 {
            return Err(parse_err(&cols_path, line, "expected col_id,col_cluster"));
        }
        col_ids.push(record[0].to_string());
        col_labels.push(parse_usize(&cols_path, line, &record[1], "col_cluster")?);
    }
    let l_count = col_labels.iter().max().map_or(0, |m| m + 1);

    let mut row_ids = Vec::new();
    let mut lookup = HashMap::new();
    let mut entries: HashMap<(usize, usize), usize> = HashMap::new();
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(&rows_path)?;
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != 3 {
            return Err(parse_err(&rows_path, line, "expected row_id,col_cluster,row_cluster"));
        }
        let i = index_of(&mut row_ids, &mut lookup, &record[0]);
        let l = parse_usize(&rows_path, line, &record[1], "col_cluster")?;
        if l >= l_count {
            return Err(parse_err(&rows_path, line, format!("column cluster {l} has no columns")));
        }
        let k = parse_usize(&rows_path, line, &record[2], "row_cluster")?;
        if entries.insert((i, l), k).is_some() {
            return Err(parse_err(&rows_path, line, "duplicate (row_id, col_cluster)"));
        }
    }
    let mut row_labels = vec![Vec::with_capacity(row_ids.len()); l_count];
    for i in 0..row_ids.len() {
        for (l, labels) in row_labels.iter_mut().enumerate() {
            let k = entries
                .get(&(i, l))
                .ok_or_else(|| Error::InvalidInput(format!("{}: row {:?} lacks column cluster {l}", rows_path.display(), row_ids[i])))?;
            labels.push(*k);
        }
    }
    let partition = PartitionPair { col_labels, row_labels };
    partition.infer_structure()?;
    Ok(LabeledPartition {
        partition,
        row_ids,
        col_ids,
    })
}

pub fn write_trace(path: &Path, trace: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["iteration", "log_likelihood"])?;
    for (q, ll) in trace.iter().enumerate() {
        w.write_record([q.to_string(), ll.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// `L,K_list,icl,loglik,converged`
pub fn write_icl_table(path: &Path, table: &[IclEntry]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["L", "K_list", "icl", "loglik", "converged"])?;
    for e in table {
        w.write_record([
            e.structure.col_clusters().to_string(),
            e.structure.k_list(),
            e.icl.to_string(),
            e.log_likelihood.to_string(),
            e.converged.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Per-run summary of a concurrent fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: usize,
    pub seed: u64,
    pub log_likelihood: Option<f64>,
    pub iterations: Option<usize>,
    pub converged: Option<bool>,
    pub error: Option<String>,
    pub col_labels: Option<Vec<usize>>,
    pub row_labels: Option<Vec<Vec<usize>>>,
}
