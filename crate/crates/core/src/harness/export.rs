use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::em::ClassificationState;
use crate::radio::{ChannelParams, MeasurementSet};
use crate::{Error, Result};

#[derive(Serialize, Deserialize)]
struct ParamsFile {
    params: ChannelParams,
}

/// Learned channel parameters as TOML (standard deviations, not variances).
pub fn write_params(path: impl AsRef<Path>, params: &ChannelParams) -> Result<()> {
    let path = path.as_ref();
    let text =
        toml::to_string(&ParamsFile { params: *params }).map_err(|e| Error::parse(path, e))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_params(path: impl AsRef<Path>) -> Result<ChannelParams> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let f: ParamsFile = toml::from_str(&text).map_err(|e| Error::parse(path, e))?;
    Ok(f.params)
}

#[derive(Serialize)]
struct LabelRow {
    link: String,
    omega: f64,
    los: u8,
}

/// One row per link: id, LoS responsibility and hard label.
pub fn write_labels(
    path: impl AsRef<Path>,
    ms: &MeasurementSet,
    labels: &ClassificationState,
) -> Result<()> {
    let path = path.as_ref();
    if labels.labels.len() != ms.n_links() {
        return Err(Error::MissingLabel(format!(
            "{} labels for {} links",
            labels.labels.len(),
            ms.n_links()
        )));
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse(path, e))?;
    for ((id, _), (omega, los)) in ms.links().zip(labels.omega.iter().zip(&labels.labels)) {
        w.serialize(LabelRow {
            link: id.to_string(),
            omega: *omega,
            los: u8::from(*los),
        })
        .map_err(|e| Error::parse(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
