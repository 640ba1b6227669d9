//! Experiment configuration files.
//!
//! One TOML file fully determines a run:
//!
//! ```toml
//! format_version = 1
//! experiment = "lengthgen"   # lengthgen | posteriorgap | gammastar | bootstrap-demo | cid-probe
//! seed = 0
//! out_dir = "results"        # optional
//!
//! [env]
//! d = 1
//! tau2 = 1.0
//! sigma2 = 1.0
//! # h = [[1.0]]              # optional covariate covariance, row-major
//!
//! [eval]
//! t_grid = [8, 16, 32, 64]
//! n_traj = 100
//!
//! [[models]]
//! kind = "oracle"
//!
//! [[models]]
//! kind = "linattn"
//! gamma = "optimal"          # optimal | h_inverse | zero | file
//! t_pt = 8
//!
//! [[models]]
//! kind = "ext"
//! preset = "desk"            # desk | desk_gpt | paper
//! model_seed = 1
//! # checkpoint = "ckpt.json" # instead of training inline
//! [models.train]
//! seq_len = 8
//! steps = 3000
//! ```
//!
//! Relative paths are resolved against the directory holding the file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::blr::{BlrEnv, BlrEnvParams};
use crate::error::{Error, Result};
use crate::inference::Statistic;
use crate::neural::{Arch, ExtConfig, PosMode, TrainConfig};

pub const CONFIG_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Lengthgen,
    Posteriorgap,
    Gammastar,
    BootstrapDemo,
    CidProbe,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Lengthgen => "lengthgen",
            Experiment::Posteriorgap => "posteriorgap",
            Experiment::Gammastar => "gammastar",
            Experiment::BootstrapDemo => "bootstrap-demo",
            Experiment::CidProbe => "cid-probe",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSpec {
    /// Context lengths (lengthgen, cid-probe), pre-training lengths
    /// (posteriorgap, gammastar).
    pub t_grid: Vec<usize>,
    #[serde(default = "default_n_traj")]
    pub n_traj: usize,
    /// Bootstrap context length.
    #[serde(default = "default_s")]
    pub s: usize,
    /// Bootstrap horizon.
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_b")]
    pub b: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_stat")]
    pub stat: Statistic,
    /// Monte Carlo samples per CID term.
    #[serde(default = "default_mc")]
    pub mc_samples: usize,
}

fn default_n_traj() -> usize {
    100
}
fn default_s() -> usize {
    8
}
fn default_horizon() -> usize {
    200
}
fn default_b() -> usize {
    500
}
fn default_alpha() -> f64 {
    0.9
}
fn default_stat() -> Statistic {
    Statistic::Ols
}
fn default_mc() -> usize {
    50
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaSource {
    /// The pre-training optimum at `t_pt`; without `t_pt`, the grid point.
    Optimal,
    HInverse,
    Zero,
    File,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Desk,
    DeskGpt,
    Paper,
}

/// Fields left out fall back to the desk training preset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOverrides {
    pub batch: Option<usize>,
    pub steps: Option<usize>,
    pub lr: Option<f64>,
    pub seq_len: Option<usize>,
    pub lambda_cid: Option<f64>,
    pub mc_samples: Option<usize>,
    pub augment: Option<bool>,
    pub seed: Option<u64>,
}

impl TrainOverrides {
    /// The training config, with `seq_len` defaulting to `length` and the
    /// seed to `seed`.
    pub fn resolve(&self, length: usize, seed: u64) -> TrainConfig {
        let mut c = TrainConfig::desk(self.seq_len.unwrap_or(length), self.seed.unwrap_or(seed));
        c.batch = self.batch.unwrap_or(c.batch);
        c.steps = self.steps.unwrap_or(c.steps);
        c.lr = self.lr.unwrap_or(c.lr);
        c.lambda_cid = self.lambda_cid.unwrap_or(c.lambda_cid);
        c.mc_samples = self.mc_samples.unwrap_or(c.mc_samples);
        c.augment = self.augment.unwrap_or(c.augment);
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Oracle {
        #[serde(default)]
        label: Option<String>,
    },
    Linattn {
        #[serde(default)]
        label: Option<String>,
        gamma: GammaSource,
        #[serde(default)]
        t_pt: Option<usize>,
        #[serde(default)]
        path: Option<PathBuf>,
    },
    Ext {
        #[serde(default)]
        label: Option<String>,
        #[serde(default = "default_preset")]
        preset: Preset,
        #[serde(default)]
        pos_mode: Option<PosMode>,
        #[serde(default)]
        arch: Option<Arch>,
        #[serde(default)]
        model_seed: u64,
        #[serde(default)]
        checkpoint: Option<PathBuf>,
        #[serde(default)]
        train: Option<TrainOverrides>,
    },
}

fn default_preset() -> Preset {
    Preset::Desk
}

impl ModelSpec {
    /// Report id: the label when given, otherwise derived from the spec.
    pub fn id(&self) -> String {
        match self {
            ModelSpec::Oracle { label } => label.clone().unwrap_or_else(|| "oracle".into()),
            ModelSpec::Linattn { label, gamma, t_pt, .. } => label.clone().unwrap_or_else(|| {
                let g = match gamma {
                    GammaSource::Optimal => "optimal",
                    GammaSource::HInverse => "h_inverse",
                    GammaSource::Zero => "zero",
                    GammaSource::File => "file",
                };
                match t_pt {
                    Some(t) => format!("linattn-{g}-{t}"),
                    None => format!("linattn-{g}"),
                }
            }),
            ModelSpec::Ext { label, .. } => label.clone().unwrap_or_else(|| {
                let c = self.ext_config(1).expect("ext spec");
                format!("ext-{:?}-{:?}", c.arch, c.pos_mode).to_lowercase()
            }),
        }
    }

    /// Architecture of an ext spec at dimension `d`.
    pub fn ext_config(&self, d: usize) -> Option<ExtConfig> {
        match self {
            ModelSpec::Ext { preset, pos_mode, arch, .. } => {
                let mut c = match preset {
                    Preset::Desk => ExtConfig::desk(d),
                    Preset::DeskGpt => ExtConfig::desk_gpt(d),
                    Preset::Paper => ExtConfig::paper(d),
                };
                if let Some(p) = pos_mode {
                    c.pos_mode = *p;
                }
                if let Some(a) = arch {
                    c.arch = *a;
                }
                Some(c)
            }
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub format_version: u32,
    pub experiment: Experiment,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    pub env: BlrEnvParams,
    pub eval: EvalSpec,
    pub models: Vec<ModelSpec>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Reads and validates `path`, resolving relative paths against its
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = self.out_dir.as_mut() {
            fix(p);
        }
        for m in &mut self.models {
            match m {
                ModelSpec::Linattn { path: Some(p), .. } | ModelSpec::Ext { checkpoint: Some(p), .. } => fix(p),
                _ => {}
            }
        }
    }

    pub fn env(&self) -> Result<BlrEnv> {
        BlrEnv::from_params(&self.env)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != CONFIG_FORMAT_VERSION {
            return Err(Error::Config(format!("unsupported config format_version {}", self.format_version)));
        }
        self.env()?;
        let e = &self.eval;
        if e.t_grid.is_empty() {
            return Err(Error::Config("eval.t_grid is empty".into()));
        }
        if e.t_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("eval.t_grid must be strictly increasing".into()));
        }
        if e.n_traj == 0 {
            return Err(Error::Config("eval.n_traj must be at least 1".into()));
        }
        if !(e.alpha > 0.0 && e.alpha < 1.0) {
            return Err(Error::Config(format!("eval.alpha must lie in (0, 1), got {}", e.alpha)));
        }
        if e.b == 0 || e.mc_samples == 0 {
            return Err(Error::Config("eval.b and eval.mc_samples must be positive".into()));
        }
        if e.horizon <= e.s {
            return Err(Error::Config("eval.horizon must exceed eval.s".into()));
        }
        if self.models.is_empty() {
            return Err(Error::Config("no models configured".into()));
        }
        let mut ids: Vec<String> = self.models.iter().map(ModelSpec::id).collect();
        ids.sort();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Config(format!("duplicate model id {}; set a label", w[0])));
        }
        for m in &self.models {
            match m {
                ModelSpec::Linattn { gamma: GammaSource::File, path: None, .. } => {
                    return Err(Error::Config("gamma = \"file\" needs a path".into()));
                }
                ModelSpec::Ext { checkpoint: Some(_), train: Some(_), .. } => {
                    return Err(Error::Config("an ext model takes either checkpoint or train, not both".into()));
                }
                ModelSpec::Ext { checkpoint: None, .. } => {
                    m.ext_config(self.env.d).expect("ext spec").validate()?;
                }
                _ => {}
            }
            if self.experiment == Experiment::Gammastar && !matches!(m, ModelSpec::Linattn { .. }) {
                return Err(Error::Config("gammastar evaluates linattn models only".into()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
format_version = 1
experiment = "lengthgen"
seed = 3

[env]
d = 1
tau2 = 1.0
sigma2 = 1.0

[eval]
t_grid = [8, 16]

[[models]]
kind = "oracle"

[[models]]
kind = "linattn"
gamma = "optimal"
t_pt = 8

[[models]]
kind = "ext"
preset = "desk_gpt"
model_seed = 2
[models.train]
steps = 10
seq_len = 8
"#;

    #[test]
    fn parses_the_sample() {
        let c = ExperimentConfig::from_toml(SAMPLE).unwrap();
        assert_eq!(c.experiment, Experiment::Lengthgen);
        assert_eq!(c.eval.n_traj, 100);
        let ids: Vec<_> = c.models.iter().map(ModelSpec::id).collect();
        assert_eq!(ids, ["oracle", "linattn-optimal-8", "ext-gptstyle-learned"]);
        let ModelSpec::Ext { train: Some(t), .. } = &c.models[2] else { panic!() };
        let tc = t.resolve(32, 9);
        assert_eq!((tc.steps, tc.seq_len, tc.seed, tc.batch), (10, 8, 9, 32));
        let again = ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn rejects_bad_configs() {
        let bad = [
            SAMPLE.replace("[8, 16]", "[16, 8]"),
            SAMPLE.replace("t_grid = [8, 16]", "t_grid = [8]\nn_traj = 0"),
            SAMPLE.replace("format_version = 1", "format_version = 2"),
            SAMPLE.replace("seed = 3", "seed = 3\nbogus = 1"),
            SAMPLE.replace("\"lengthgen\"", "\"gammastar\""),
            SAMPLE.replace("preset = \"desk_gpt\"", "preset = \"desk_gpt\"\nlabel = \"oracle\""),
        ];
        for text in &bad {
            assert!(ExperimentConfig::from_toml(text).is_err(), "{text}");
        }
    }

    #[test]
    fn relative_paths_follow_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let text = SAMPLE.replace("[models.train]\nsteps = 10\nseq_len = 8", "checkpoint = \"m/ckpt.json\"");
        let path = dir.path().join("exp.toml");
        fs::write(&path, text).unwrap();
        let c = ExperimentConfig::load(&path).unwrap();
        let ModelSpec::Ext { checkpoint: Some(p), .. } = &c.models[2] else { panic!() };
        assert_eq!(p, &dir.path().join("m/ckpt.json"));
    }
}
