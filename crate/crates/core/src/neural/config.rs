use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosMode {
    None,
    Learned,
    Sinusoidal,
    /// Fixed `(p + k) mod 2` pattern; only tells auxiliary and target tokens apart.
    Alternating01,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Exchangeable,
    GptStyle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtConfig {
    pub d: usize,
    pub n_embed_layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub pos_mode: PosMode,
    pub arch: Arch,
    pub logvar_clamp: (f64, f64),
    /// Capacity of the learned positional table, in pairs. Unused by other modes.
    #[serde(default = "default_max_pairs")]
    pub max_pairs: usize,
}

fn default_max_pairs() -> usize {
    256
}

impl ExtConfig {
    pub fn desk(d: usize) -> Self {
        Self {
            d,
            n_embed_layers: 2,
            d_model: 32,
            d_ff: 64,
            n_heads: 2,
            n_layers: 2,
            pos_mode: PosMode::None,
            arch: Arch::Exchangeable,
            logvar_clamp: (-10.0, 10.0),
            max_pairs: default_max_pairs(),
        }
    }

    pub fn paper(d: usize) -> Self {
        Self {
            n_embed_layers: 4,
            d_model: 64,
            d_ff: 128,
            n_heads: 4,
            n_layers: 12,
            ..Self::desk(d)
        }
    }

    /// Desk-sized GPT-style baseline with a learned positional table.
    pub fn desk_gpt(d: usize) -> Self {
        Self {
            arch: Arch::GptStyle,
            pos_mode: PosMode::Learned,
            ..Self::desk(d)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d", self.d),
            ("n_embed_layers", self.n_embed_layers),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("n_heads", self.n_heads),
            ("max_pairs", self.max_pairs),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        let (lo, hi) = self.logvar_clamp;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::Config(format!("bad logvar_clamp ({lo}, {hi})")));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Width of one input token: `x`, `y` and a target flag.
    pub fn token_width(&self) -> usize {
        self.d + 2
    }

    /// Longest context accepted, in pairs.
    pub fn pair_limit(&self) -> Option<usize> {
        (self.pos_mode == PosMode::Learned).then_some(self.max_pairs)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch: usize,
    pub steps: usize,
    pub lr: f64,
    pub seq_len: usize,
    pub lambda_cid: f64,
    pub mc_samples: usize,
    pub augment: bool,
    pub seed: u64,
}

impl TrainConfig {
    pub fn desk(seq_len: usize, seed: u64) -> Self {
        Self {
            batch: 32,
            steps: 3000,
            lr: 1e-3,
            seq_len,
            lambda_cid: 0.0,
            mc_samples: 50,
            augment: true,
            seed,
        }
    }

    pub fn paper(seq_len: usize, seed: u64) -> Self {
        Self {
            steps: 30000,
            ..Self::desk(seq_len, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.seq_len == 0 || self.mc_samples == 0 {
            return Err(Error::Config("batch, seq_len and mc_samples must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.lambda_cid >= 0.0 && self.lambda_cid.is_finite()) {
            return Err(Error::Config(format!("lambda_cid must be >= 0, got {}", self.lambda_cid)));
        }
        Ok(())
    }
}
