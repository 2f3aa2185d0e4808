//! Per-site CSV ingestion: one file per site, a header row, features first
//! and the response in a final column named `y`.

use std::fs;
use std::path::{Path, PathBuf};

use dcrr::rank_loss::DataBlock;
use log::warn;
use ndarray::{Array1, Array2};

use crate::CliError;

#[derive(Debug)]
pub struct SiteFile {
    pub path: PathBuf,
    pub block: DataBlock,
}

#[derive(Debug)]
pub struct Sites {
    pub features: Vec<String>,
    pub sites: Vec<SiteFile>,
    /// Files skipped for having fewer than two rows, with their row counts.
    pub dropped: Vec<(PathBuf, usize)>,
}

/// Header and rows of one file.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>), CliError> {
    let data_err = |msg: String| CliError::Data(format!("{}: {msg}", path.display()));
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path).map_err(|e| data_err(e.to_string()))?;
    let header: Vec<String> =
        rdr.headers().map_err(|e| data_err(e.to_string()))?.iter().map(|h| h.trim().to_string()).collect();
    if header.len() < 2 {
        return Err(data_err("need at least one feature column and a `y` column".into()));
    }
    if header.last().map(String::as_str) != Some("y") {
        return Err(data_err(format!("last column must be named `y`, found {:?}", header.last().unwrap())));
    }
    let mut rows = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        // the header is line 1
        let line = k + 2;
        let rec = rec.map_err(|e| data_err(format!("line {line}: {e}")))?;
        let mut row = Vec::with_capacity(header.len());
        for (c, cell) in rec.iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| {
                data_err(format!("line {line}, column {} ({}): {cell:?} is not a number", c + 1, header[c]))
            })?;
            if !v.is_finite() {
                return Err(data_err(format!("line {line}, column {} ({}): value is not finite", c + 1, header[c])));
            }
            row.push(v);
        }
        rows.push(row);
    }
    Ok((header, rows))
}

pub fn to_block(rows: &[Vec<f64>], width: usize) -> Result<DataBlock, CliError> {
    let p = width - 1;
    let x = Array2::from_shape_fn((rows.len(), p), |(i, j)| rows[i][j]);
    let y = Array1::from_shape_fn(rows.len(), |i| rows[i][p]);
    DataBlock::new(x, y).map_err(|e| CliError::Data(e.to_string()))
}

/// All `*.csv` files in `dir`, in file-name order. A single file path is
/// treated as a one-site directory.
pub fn site_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    if dir.is_file() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let entries = fs::read_dir(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("csv")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Data(format!("{}: no .csv files", dir.display())));
    }
    Ok(files)
}

pub fn load_sites(dir: &Path) -> Result<Sites, CliError> {
    let mut features: Option<Vec<String>> = None;
    let mut sites = Vec::new();
    let mut dropped = Vec::new();
    for path in site_files(dir)? {
        let (header, rows) = read_csv(&path)?;
        match &features {
            None => features = Some(header.clone()),
            Some(h) if *h != header => {
                return Err(CliError::Data(format!("{}: header {:?} differs from {:?}", path.display(), header, h)));
            }
            Some(_) => {}
        }
        if rows.len() < 2 {
            warn!("dropping site {} with {} row(s)", path.display(), rows.len());
            dropped.push((path, rows.len()));
            continue;
        }
        let block = to_block(&rows, header.len())?;
        sites.push(SiteFile { path, block });
    }
    if sites.is_empty() {
        return Err(CliError::Data("no site has at least two rows".into()));
    }
    let mut features = features.expect("at least one file read");
    features.pop();
    Ok(Sites { features, sites, dropped })
}

/// Write a block as a site CSV with the given feature names.
pub fn write_block(path: &Path, features: &[String], block: &DataBlock) -> Result<(), CliError> {
    let io = |e: csv::Error| CliError::Runtime(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    let mut header: Vec<&str> = features.iter().map(String::as_str).collect();
    header.push("y");
    w.write_record(&header).map_err(io)?;
    for (row, y) in block.x().rows().into_iter().zip(block.y().iter()) {
        let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        rec.push(y.to_string());
        w.write_record(&rec).map_err(io)?;
    }
    w.flush().map_err(|e| CliError::Runtime(e.to_string()))
}
