use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamGroup;

/// How the projected geometric feature is admitted into the hidden state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum GatingMode {
    /// `h + g`
    #[serde(rename = "none")]
    None,
    /// `h + σ(MLP(h)) ⊙ g`
    #[serde(rename = "sem")]
    Semantic,
    /// `h + tanh(α)·(σ(MLP(h)) ⊙ g)`
    #[serde(rename = "sem+glo")]
    Dual,
}

impl GatingMode {
    pub const ALL: [GatingMode; 3] = [GatingMode::None, GatingMode::Semantic, GatingMode::Dual];

    pub fn as_str(self) -> &'static str {
        match self {
            GatingMode::None => "none",
            GatingMode::Semantic => "sem",
            GatingMode::Dual => "sem+glo",
        }
    }

    pub fn uses_semantic(self) -> bool {
        self != GatingMode::None
    }

    pub fn uses_global(self) -> bool {
        self == GatingMode::Dual
    }
}

impl fmt::Display for GatingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GatingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(GatingMode::None),
            "sem" => Ok(GatingMode::Semantic),
            "sem+glo" | "dual" => Ok(GatingMode::Dual),
            other => Err(Error::InvalidArgument(format!(
                "unknown gating mode {other:?}; expected none, sem or sem+glo"
            ))),
        }
    }
}

/// Output granularity of the semantic gate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateResolution {
    /// One gate per token and channel.
    #[default]
    Channel,
    /// One gate per token, shared by all channels.
    Token,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// `L_dec`
    pub num_layers: usize,
    pub heads: usize,
    /// `C_llm`
    pub width: usize,
    pub ff_width: usize,
    /// Injection depth; layers `1..=m` receive geometry.
    pub m: usize,
    pub gating: GatingMode,
    pub gate_resolution: GateResolution,
    pub trainable: BTreeSet<ParamGroup>,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::config("L_dec", "decoder needs at least one layer"));
        }
        if self.m > self.num_layers {
            return Err(Error::config(
                "m",
                format!("injection depth {} exceeds decoder depth {}", self.m, self.num_layers),
            ));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::config(
                "heads",
                format!("{} heads do not divide C_llm = {}", self.heads, self.width),
            ));
        }
        if self.width < 2 {
            return Err(Error::config("C_llm", "must be at least 2"));
        }
        if self.ff_width == 0 {
            return Err(Error::config("ff_width", "must be positive"));
        }
        if let Some(g) = self.trainable.iter().find(|g| !ParamGroup::TRAINABLE.contains(g)) {
            return Err(Error::config(
                "trainable",
                format!("{g:?} parameters are precomputed outside the graph and cannot be trained"),
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}
