use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{NormStats, PoseDataset, PoseSample, Skeleton};
use crate::error::{Error, Result};

const MAGIC: &str = "#mdnpose";
const FIELDS_VIS: &str = "x[2N],y[3N],cam,vis[N]";
const FIELDS: &str = "x[2N],y[3N],cam";

/// Contents of `<name>.stats.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Companion {
    pub skeleton: Skeleton,
    #[serde(default)]
    pub stats: Option<NormStats>,
}

/// `dir/name.csv` → `dir/name.<suffix>`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

pub fn stats_path(path: &Path) -> PathBuf {
    sibling(path, "stats.json")
}

fn parse_header(line: &str, path: &Path) -> Result<usize> {
    let err = |message: String| Error::Parse { path: path.to_path_buf(), line: 1, message };
    let mut parts = line.split_whitespace();
    if parts.next() != Some(MAGIC) {
        return Err(err(format!("header must start with {MAGIC}")));
    }
    if parts.next() != Some("v1") {
        return Err(err("unsupported format version".into()));
    }
    let n = parts
        .next()
        .and_then(|p| p.strip_prefix("N="))
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .ok_or_else(|| err("missing or invalid N=<joints>".into()))?;
    match parts.next().and_then(|p| p.strip_prefix("fields=")) {
        Some(FIELDS_VIS) | Some(FIELDS) => {}
        _ => return Err(err(format!("expected fields={FIELDS_VIS}"))),
    }
    if let Some(extra) = parts.next() {
        return Err(err(format!("unexpected header token {extra:?}")));
    }
    Ok(n)
}

fn parse_row(record: &csv::StringRecord, n: usize, line: usize, path: &Path) -> Result<PoseSample> {
    let err = |message: String| Error::Parse { path: path.to_path_buf(), line, message };
    let cols = record.len();
    if cols != 5 * n + 1 && cols != 6 * n + 1 {
        return Err(err(format!("expected {} or {} columns, found {cols}", 5 * n + 1, 6 * n + 1)));
    }
    let mut floats = Vec::with_capacity(5 * n);
    for (c, field) in record.iter().take(5 * n).enumerate() {
        let v: f64 = field.trim().parse().map_err(|_| err(format!("column {}: {field:?} is not a number", c + 1)))?;
        if !v.is_finite() {
            return Err(err(format!("column {}: non-finite value {field:?}", c + 1)));
        }
        floats.push(v);
    }
    let cam_field = record[5 * n].trim();
    let camera = match cam_field.parse::<i64>() {
        Ok(-1) => None,
        Ok(c) if c >= 0 && c <= u32::MAX as i64 => Some(c as u32),
        _ => return Err(err(format!("camera id {cam_field:?} is not an integer ≥ -1"))),
    };
    let visible = if cols == 6 * n + 1 {
        record
            .iter()
            .skip(5 * n + 1)
            .map(|f| match f.trim() {
                "1" => Ok(true),
                "0" => Ok(false),
                other => Err(err(format!("visibility flag {other:?} is not 0 or 1"))),
            })
            .collect::<Result<Vec<bool>>>()?
    } else {
        vec![true; n]
    };
    let y = floats.split_off(2 * n);
    Ok(PoseSample { x: floats, y, camera, visible })
}

/// Reads a dataset file and, when present, its companion skeleton.
pub fn load_dataset(path: &Path) -> Result<PoseDataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut header = String::new();
    reader.read_line(&mut header).map_err(|e| Error::io(path, e))?;
    let n = parse_header(header.trim_end(), path)?;

    let mut csv = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(reader);
    let mut samples = Vec::new();
    for (i, record) in csv.records().enumerate() {
        // the header occupied line 1
        let line = i + 2;
        let record = record.map_err(|e| Error::Parse { path: path.to_path_buf(), line, message: e.to_string() })?;
        samples.push(parse_row(&record, n, line, path)?);
    }

    let companion = stats_path(path);
    let skeleton = if companion.exists() {
        let c = load_companion(&companion)?;
        if c.skeleton.joints() != n {
            return Err(Error::Dimension(format!(
                "{} describes {} joints but {} has N={n}",
                companion.display(),
                c.skeleton.joints(),
                path.display()
            )));
        }
        c.skeleton
    } else {
        Skeleton::chain(n - 1)
    };
    PoseDataset::new(skeleton, samples)
}

pub fn load_companion(path: &Path) -> Result<Companion> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let c: Companion = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })?;
    c.skeleton.validate()?;
    Ok(c)
}

pub fn save_json<S: Serialize>(value: &S, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Checkpoint(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Writes the CSV plus `<name>.stats.json` holding the skeleton and `stats`.
pub fn save_dataset(ds: &PoseDataset, stats: Option<&NormStats>, path: &Path) -> Result<()> {
    let n = ds.joints();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e: std::io::Error| Error::io(path, e);
    writeln!(out, "{MAGIC} v1 N={n} fields={FIELDS_VIS}").map_err(io)?;
    let mut csv = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    let mut row: Vec<String> = Vec::with_capacity(6 * n + 1);
    for s in &ds.samples {
        row.clear();
        // Display for f64 prints the shortest string that parses back to the same bits
        row.extend(s.x.iter().chain(&s.y).map(|v| v.to_string()));
        row.push(s.camera.map_or(-1, i64::from).to_string());
        row.extend(s.visible.iter().map(|&v| if v { "1" } else { "0" }.to_string()));
        csv.write_record(&row).map_err(|e| Error::io(path, e.into()))?;
    }
    csv.flush().map_err(io)?;
    save_json(&Companion { skeleton: ds.skeleton.clone(), stats: stats.cloned() }, &stats_path(path))
}
