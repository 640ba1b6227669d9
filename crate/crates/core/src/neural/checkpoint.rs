//! Checkpoints: a JSON manifest plus a little-endian `f64` parameter blob.
//! Loss curves are CSV `step,nll,cid,total`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ExtConfig;
use super::model::ExtModel;
use super::train::LossRecord;
use crate::error::{create_parent, Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub config: ExtConfig,
    pub seed: u64,
    pub steps: usize,
    /// File name of the parameter blob, relative to the manifest.
    pub params_file: String,
    pub params: Vec<ParamEntry>,
}

/// Blob path for a manifest path: `model.json` → `model.bin`.
pub fn params_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

pub fn save_checkpoint(path: &Path, model: &ExtModel, seed: u64, steps: usize) -> Result<()> {
    let blob = params_path(path);
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_FORMAT_VERSION,
        config: model.config().clone(),
        seed,
        steps,
        params_file: blob.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
        params: model
            .param_names()
            .iter()
            .zip(model.params())
            .map(|(name, p)| ParamEntry { name: name.clone(), rows: p.rows, cols: p.cols })
            .collect(),
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Parse(e.to_string()))?;
    create_parent(path)?;
    fs::write(path, json).map_err(|e| Error::io(path, e))?;
    let bytes: Vec<u8> = model.flat().iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(&blob, bytes).map_err(|e| Error::io(&blob, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ExtModel, CheckpointManifest)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text).map_err(|e| Error::Parse(e.to_string()))?;
    if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Parse(format!("unsupported checkpoint version {}", manifest.format_version)));
    }
    let blob = path.with_file_name(&manifest.params_file);
    let bytes = fs::read(&blob).map_err(|e| Error::io(&blob, e))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Parse(format!("{} is not a whole number of f64 values", blob.display())));
    }
    let flat: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let model = ExtModel::from_flat(manifest.config.clone(), &flat)?;
    let declared: Vec<(&str, usize, usize)> = manifest.params.iter().map(|p| (p.name.as_str(), p.rows, p.cols)).collect();
    let actual: Vec<(&str, usize, usize)> =
        model.param_names().iter().zip(model.params()).map(|(n, p)| (n.as_str(), p.rows, p.cols)).collect();
    if declared != actual {
        return Err(Error::Parse("manifest parameter list does not match the configuration".into()));
    }
    Ok((model, manifest))
}

pub fn write_loss_curve(path: &Path, curve: &[LossRecord]) -> Result<()> {
    let mut out = Vec::new();
    create_parent(path)?;
    writeln!(out, "step,nll,cid,total").unwrap();
    for r in curve {
        writeln!(out, "{},{:?},{:?},{:?}", r.step, r.nll, r.cid, r.total).unwrap();
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_loss_curve(path: &Path) -> Result<Vec<LossRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some("step,nll,cid,total") {
        return Err(Error::Parse("bad loss curve header".into()));
    }
    lines
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Parse(format!("bad loss curve row: {line}"));
            if f.len() != 4 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            Ok(LossRecord {
                step: f[0].parse().map_err(|_| bad())?,
                nll: num(f[1])?,
                cid: num(f[2])?,
                total: num(f[3])?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mathkit::RngStream;

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = ExtModel::new(ExtConfig::desk_gpt(2), 4).unwrap();
        m.randomize_head(0.7, &mut RngStream::new(1, 1));
        let path = dir.path().join("model.json");
        save_checkpoint(&path, &m, 4, 123).unwrap();
        let (back, manifest) = load_checkpoint(&path).unwrap();
        assert_eq!(back.flat(), m.flat());
        assert_eq!(manifest.steps, 123);
        assert_eq!(manifest.params_file, "model.bin");
        let blob = fs::read(dir.path().join("model.bin")).unwrap();
        assert_eq!(blob.len(), 8 * m.num_params());
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = ExtModel::new(ExtConfig::desk(1), 0).unwrap();
        let path = dir.path().join("m.json");
        save_checkpoint(&path, &m, 0, 0).unwrap();
        let blob = dir.path().join("m.bin");
        let mut bytes = fs::read(&blob).unwrap();
        bytes.truncate(bytes.len() - 8);
        fs::write(&blob, bytes).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn loss_curve_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let curve = vec![
            LossRecord { step: 0, nll: 1.2345678901234567, cid: 0.0, total: 1.2345678901234567 },
            LossRecord { step: 1, nll: 0.1 + 0.2, cid: 1e-300, total: 0.30000000000000004 },
        ];
        let path = dir.path().join("loss.csv");
        write_loss_curve(&path, &curve).unwrap();
        assert_eq!(read_loss_curve(&path).unwrap(), curve);
        let empty = dir.path().join("empty.csv");
        write_loss_curve(&empty, &[]).unwrap();
        assert_eq!(fs::read_to_string(&empty).unwrap(), "step,nll,cid,total\n");
    }
}
