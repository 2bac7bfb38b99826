//! 2D inputs for `predict` and `fuse-views`.

use std::path::Path;

use mdnpose::data::{load_dataset, PoseSample};
use mdnpose::{Error, Result};

pub struct Inputs {
    pub samples: Vec<PoseSample>,
    /// Whether the rows carried 3D ground truth.
    pub has_truth: bool,
}

/// Accepts a dataset file or a headerless CSV with exactly `2 * joints`
/// numbers per row.
pub fn read_inputs(path: &Path, joints: usize) -> Result<Inputs> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if text.starts_with("#mdnpose") {
        let ds = load_dataset(path)?;
        if ds.joints() != joints {
            return Err(Error::Dimension(format!("{} has N={}, checkpoint has N={joints}", path.display(), ds.joints())));
        }
        return Ok(Inputs { samples: ds.samples, has_truth: true });
    }
    let mut reader = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(text.as_bytes());
    let mut samples = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 1;
        let err = |message: String| Error::Parse { path: path.to_path_buf(), line, message };
        let record = record.map_err(|e| err(e.to_string()))?;
        if record.len() != 2 * joints {
            return Err(err(format!("expected {} values, found {}", 2 * joints, record.len())));
        }
        let x = record
            .iter()
            .map(|f| f.trim().parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| err(format!("{f:?} is not a finite number"))))
            .collect::<Result<Vec<f64>>>()?;
        samples.push(PoseSample::new(x, vec![0.0; 3 * joints], None));
    }
    Ok(Inputs { samples, has_truth: false })
}
