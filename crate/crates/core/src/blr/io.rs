//! Trajectory files: a CSV with header `t,x_1..x_d,y` plus a JSON sidecar
//! holding the seed, environment parameters and latent coefficient.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{BlrEnvParams, Trajectory};
use crate::error::{create_parent, Error, Result};

pub const TRAJECTORY_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySidecar {
    pub format_version: u32,
    pub seed: u64,
    pub stream: u64,
    pub env: BlrEnvParams,
    pub w: Option<Vec<f64>>,
}

pub(crate) fn sidecar_path(csv: &Path) -> PathBuf {
    csv.with_extension("json")
}

pub(crate) fn fmt_f64(v: f64) -> String {
    // Debug formatting is the shortest representation that round-trips.
    format!("{v:?}")
}

fn trajectory_csv(traj: &Trajectory) -> String {
    let d = traj.dim();
    let mut out = String::from("t");
    for k in 1..=d {
        out.push_str(&format!(",x_{k}"));
    }
    out.push_str(",y\n");
    for (i, (x, y)) in traj.pairs().enumerate() {
        out.push_str(&(i + 1).to_string());
        for v in x {
            out.push(',');
            out.push_str(&fmt_f64(*v));
        }
        out.push(',');
        out.push_str(&fmt_f64(y));
        out.push('\n');
    }
    out
}

/// Writes `path` (CSV) and its `.json` sidecar.
pub fn write_trajectory(path: &Path, traj: &Trajectory, sidecar: &TrajectorySidecar) -> Result<()> {
    create_parent(path)?;
    fs::write(path, trajectory_csv(traj)).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(sidecar).map_err(|e| Error::Parse(e.to_string()))?;
    fs::write(&side, json + "\n").map_err(|e| Error::io(&side, e))
}

/// Reads a trajectory CSV; the sidecar is loaded when present.
pub fn read_trajectory(path: &Path) -> Result<(Trajectory, Option<TrajectorySidecar>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Parse("empty trajectory file".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 3 || cols[0] != "t" || cols[cols.len() - 1] != "y" {
        return Err(Error::Parse(format!("bad trajectory header: {header}")));
    }
    let d = cols.len() - 2;
    for (k, c) in cols[1..=d].iter().enumerate() {
        if *c != format!("x_{}", k + 1) {
            return Err(Error::Parse(format!("bad column name {c}")));
        }
    }
    let mut traj = Trajectory::new(d);
    for (lineno, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d + 2 {
            return Err(Error::Parse(format!("line {}: expected {} fields", lineno + 2, d + 2)));
        }
        let parse = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 2)))
        };
        let x: Vec<f64> = fields[1..=d].iter().map(|s| parse(s)).collect::<Result<_>>()?;
        traj.push(&x, parse(fields[d + 1])?)?;
    }
    let side = sidecar_path(path);
    let sidecar = if side.exists() {
        let s = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let sc: TrajectorySidecar = serde_json::from_str(&s).map_err(|e| Error::Parse(e.to_string()))?;
        traj.w = sc.w.clone();
        Some(sc)
    } else {
        None
    };
    Ok((traj, sidecar))
}
