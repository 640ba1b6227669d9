//! Bootstrap draws on disk: a CSV with header `b,theta_1..theta_k` and a
//! JSON sidecar with the context hash, config echo and model id.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BootstrapConfig, BootstrapDraws};
use crate::blr::io::{fmt_f64, sidecar_path};
use crate::blr::Trajectory;
use crate::error::{create_parent, Error, Result};

pub const DRAWS_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DrawsSidecar {
    pub format_version: u32,
    pub context_hash: String,
    pub model: String,
    pub config: BootstrapConfig,
}

/// Hex SHA-256 over the dimension and the bit patterns of every value.
pub fn context_hash(ctx: &Trajectory) -> String {
    let mut h = Sha256::new();
    h.update((ctx.dim() as u64).to_le_bytes());
    h.update((ctx.len() as u64).to_le_bytes());
    for v in ctx.xs().iter().chain(ctx.ys()) {
        h.update(v.to_bits().to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn write_draws(path: &Path, draws: &BootstrapDraws, sidecar: &DrawsSidecar) -> Result<()> {
    if sidecar.config != draws.config {
        return Err(Error::Contract("sidecar config differs from the draws".into()));
    }
    create_parent(path)?;
    let k = draws.values.first().map_or(0, Vec::len);
    let mut out = String::from("b");
    for i in 1..=k {
        out.push_str(&format!(",theta_{i}"));
    }
    out.push('\n');
    for (b, row) in draws.values.iter().enumerate() {
        out.push_str(&(b + 1).to_string());
        for v in row {
            out.push(',');
            out.push_str(&fmt_f64(*v));
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(sidecar).map_err(|e| Error::Parse(e.to_string()))?;
    fs::write(&side, json + "\n").map_err(|e| Error::io(&side, e))
}

/// Reads draws written by [`write_draws`]; the sidecar is required since it
/// carries the config.
pub fn read_draws(path: &Path) -> Result<(BootstrapDraws, DrawsSidecar)> {
    let side = sidecar_path(path);
    let s = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let sidecar: DrawsSidecar = serde_json::from_str(&s).map_err(|e| Error::Parse(e.to_string()))?;
    if sidecar.format_version != DRAWS_FORMAT_VERSION {
        return Err(Error::Parse(format!("unsupported draws format {}", sidecar.format_version)));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Parse("empty draws file".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols[0] != "b" || cols[1..].iter().enumerate().any(|(i, c)| *c != format!("theta_{}", i + 1)) {
        return Err(Error::Parse(format!("bad draws header: {header}")));
    }
    let mut values = Vec::new();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(Error::Parse(format!("line {}: expected {} fields", n + 2, cols.len())));
        }
        let row = fields[1..]
            .iter()
            .map(|f| f.trim().parse::<f64>().map_err(|e| Error::Parse(format!("line {}: {e}", n + 2))))
            .collect::<Result<Vec<_>>>()?;
        values.push(row);
    }
    if values.len() != sidecar.config.b {
        return Err(Error::Parse(format!("expected {} draws, found {}", sidecar.config.b, values.len())));
    }
    Ok((BootstrapDraws { values, config: sidecar.config.clone() }, sidecar))
}
