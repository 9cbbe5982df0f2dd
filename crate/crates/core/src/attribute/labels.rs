use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One row of a label file: `id,value`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub id: String,
    pub value: f64,
}

pub fn write_labels(path: &Path, records: &[LabelRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Serialization(e.to_string()))?;
    for r in records {
        w.serialize(r).map_err(|e| Error::Serialization(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_labels(path: &Path) -> Result<Vec<LabelRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Ingestion {
        item: path.display().to_string(),
        reason: e.to_string(),
    })?;
    r.deserialize()
        .enumerate()
        .map(|(i, rec)| {
            rec.map_err(|e| Error::Ingestion {
                item: format!("{} row {}", path.display(), i + 1),
                reason: e.to_string(),
            })
        })
        .collect()
}
