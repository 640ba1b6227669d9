use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::LinAttnModel;
use crate::blr::BlrEnvParams;
use crate::error::{create_parent, Error, Result};
use crate::mathkit::Matrix;

pub const GAMMA_FORMAT_VERSION: u32 = 1;

/// Where a Γ came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaProvenance {
    /// `optimal`, `h_inverse`, `zero` or `file`.
    pub source: String,
    pub env: BlrEnvParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_pt: Option<usize>,
}

/// JSON form of a Γ matrix: row-major values plus provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaFile {
    pub format_version: u32,
    pub d: usize,
    pub gamma: Vec<f64>,
    pub provenance: GammaProvenance,
}

impl GammaFile {
    pub fn new(model: &LinAttnModel, provenance: GammaProvenance) -> Self {
        let d = model.d();
        Self {
            format_version: GAMMA_FORMAT_VERSION,
            d,
            gamma: (0..d).flat_map(|i| (0..d).map(move |j| (i, j))).map(|(i, j)| model.gamma()[(i, j)]).collect(),
            provenance,
        }
    }

    pub fn model(&self) -> Result<LinAttnModel> {
        if self.format_version != GAMMA_FORMAT_VERSION {
            return Err(Error::Parse(format!("unsupported gamma format version {}", self.format_version)));
        }
        if self.gamma.len() != self.d * self.d {
            return Err(Error::Dimension {
                expected: self.d * self.d,
                got: self.gamma.len(),
            });
        }
        LinAttnModel::new(Matrix::from_row_slice(self.d, self.d, &self.gamma))
    }
}

pub fn write_gamma(path: &Path, file: &GammaFile) -> Result<()> {
    create_parent(path)?;
    let json = serde_json::to_string_pretty(file).map_err(|e| Error::Parse(e.to_string()))?;
    fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_gamma(path: &Path) -> Result<GammaFile> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&s).map_err(|e| Error::Parse(e.to_string()))
}
