//! Flat run configuration: one JSON object, every knob at the top level.
//!
//! ```
//! use guide::config::RunConfig;
//!
//! let mut cfg = RunConfig::default();
//! cfg.apply_overrides(&[("m".into(), "3".into()), ("gating".into(), "sem".into())]).unwrap();
//! assert_eq!(cfg.m, 3);
//! cfg.validate().unwrap();
//! ```

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::alignment::plan_alignment;
use crate::decoder::{DecoderConfig, GateResolution, GatingMode, GuideConfig};
use crate::error::{Error, Result};
use crate::geo::{sample_layers, SceneConfig};
use crate::params::ParamGroup;
use crate::training::{TaskFamily, VOCAB_SIZE};

/// Alternate spellings accepted for keys, mapped to the canonical name.
const ALIASES: &[(&str, &str)] = &[("Pv", "P_v"), ("Pg", "P_g"), ("L", "L_dec"), ("output", "output_dir")];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Encoder depth.
    #[serde(rename = "K")]
    pub k: usize,
    /// Injection depth.
    pub m: usize,
    #[serde(rename = "P_v")]
    pub p_v: usize,
    #[serde(rename = "P_g")]
    pub p_g: usize,
    #[serde(rename = "H")]
    pub h: usize,
    #[serde(rename = "W")]
    pub w: usize,
    /// Frames per scene.
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "C_geo")]
    pub c_geo: usize,
    #[serde(rename = "C_llm")]
    pub c_llm: usize,
    #[serde(rename = "L_dec")]
    pub l_dec: usize,
    pub heads: usize,
    pub ff_width: usize,
    pub gating: GatingMode,
    pub gate_resolution: GateResolution,
    pub task: TaskFamily,
    pub steps: usize,
    pub batch: usize,
    pub peak_lr: f64,
    pub warmup_ratio: f64,
    pub seed: u64,
    /// Distinct training scenes; batches are drawn from this pool.
    pub train_pool: usize,
    pub eval_size: usize,
    pub log_every: usize,
    pub depth_min: f64,
    pub depth_max: f64,
    pub trainable: BTreeSet<ParamGroup>,
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            k: 24,
            m: 6,
            p_v: 16,
            p_g: 14,
            h: 128,
            w: 128,
            n: 2,
            c_geo: 8,
            c_llm: 16,
            l_dec: 10,
            heads: 2,
            ff_width: 32,
            gating: GatingMode::Dual,
            gate_resolution: GateResolution::Channel,
            task: TaskFamily::NearerOfTwo,
            steps: 2000,
            batch: 32,
            peak_lr: 3e-4,
            warmup_ratio: 0.03,
            seed: 0,
            train_pool: 2048,
            eval_size: 512,
            log_every: 100,
            depth_min: 1.0,
            depth_max: 5.0,
            trainable: ParamGroup::TRAINABLE.into_iter().collect(),
            output_dir: None,
        }
    }
}

fn canonical(key: &str) -> &str {
    ALIASES.iter().find(|(a, _)| *a == key).map_or(key, |(_, c)| c)
}

/// Parse an override value as JSON, falling back to a bare string (`--gating sem`).
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

impl RunConfig {
    /// Defaults, overlaid with the file (if any), overlaid with `overrides`.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut map = match serde_json::to_value(Self::default())? {
            Value::Object(m) => m,
            _ => unreachable!("struct serialises to an object"),
        };
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::config("config", format!("cannot read {}: {e}", path.display())))?;
            let file: Value = serde_json::from_str(&text)
                .map_err(|e| Error::config("config", format!("{} is not valid JSON: {e}", path.display())))?;
            let Value::Object(file) = file else {
                return Err(Error::config("config", "expected a flat JSON object"));
            };
            merge(&mut map, file.into_iter())?;
        }
        merge(&mut map, overrides.iter().map(|(k, v)| (k.clone(), parse_value(v))))?;
        Self::from_map(map)
    }

    pub fn apply_overrides(&mut self, overrides: &[(String, String)]) -> Result<()> {
        let Value::Object(mut map) = serde_json::to_value(&*self)? else {
            unreachable!("struct serialises to an object")
        };
        merge(&mut map, overrides.iter().map(|(k, v)| (k.clone(), parse_value(v))))?;
        *self = Self::from_map(map)?;
        Ok(())
    }

    fn from_map(map: Map<String, Value>) -> Result<Self> {
        // Deserialise key by key first so a type error names its key.
        let defaults = serde_json::to_value(Self::default())?;
        for (key, value) in &map {
            let mut probe = defaults.clone();
            probe[key.as_str()] = value.clone();
            if let Err(e) = serde_json::from_value::<RunConfig>(probe) {
                return Err(Error::config(key.clone(), e.to_string()));
            }
        }
        Ok(serde_json::from_value(Value::Object(map))?)
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Check every knob against the preconditions of the modules it feeds.
    pub fn validate(&self) -> Result<()> {
        plan_alignment(self.h, self.w, self.p_v, self.p_g).map_err(|e| {
            let key = if self.p_v == 0 {
                "P_v"
            } else if self.p_g == 0 {
                "P_g"
            } else if self.h / self.p_v.max(1) < 2 {
                "H"
            } else {
                "W"
            };
            Error::config(key, e.to_string())
        })?;
        if self.k < 8 {
            return Err(Error::config("K", format!("need at least 8 encoder layers, got {}", self.k)));
        }
        sample_layers(self.k, self.m).map_err(|e| Error::config("m", e.to_string()))?;
        if self.n == 0 {
            return Err(Error::config("N", "need at least one frame"));
        }
        if self.c_geo < 2 {
            return Err(Error::config("C_geo", "need the depth channel plus at least one more"));
        }
        self.decoder_config().validate()?;
        if self.steps == 0 {
            return Err(Error::config("steps", "must be at least 1"));
        }
        if self.batch == 0 {
            return Err(Error::config("batch", "must be at least 1"));
        }
        if !(self.peak_lr >= 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::config("peak_lr", format!("{} is not a finite non-negative rate", self.peak_lr)));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio)
            || (self.warmup_ratio * self.steps as f64).round() as usize >= self.steps
        {
            return Err(Error::config(
                "warmup_ratio",
                format!("{} leaves no decay phase in {} steps", self.warmup_ratio, self.steps),
            ));
        }
        if self.train_pool < self.batch {
            return Err(Error::config(
                "train_pool",
                format!("pool of {} cannot fill a batch of {}", self.train_pool, self.batch),
            ));
        }
        if self.eval_size == 0 {
            return Err(Error::config("eval_size", "must be at least 1"));
        }
        if self.log_every == 0 {
            return Err(Error::config("log_every", "must be at least 1"));
        }
        if !(self.depth_min > 0.0 && self.depth_min.is_finite()) {
            return Err(Error::config("depth_min", "must be positive"));
        }
        if !(self.depth_max > self.depth_min && self.depth_max.is_finite()) {
            return Err(Error::config("depth_max", "must exceed depth_min"));
        }
        let scene = self.scene_config();
        if self.h < 32 || self.h / 2 <= scene.mark_cell {
            return Err(Error::config(
                "H",
                format!("height {} cannot fit a {}px mark cell per quadrant", self.h, scene.mark_cell),
            ));
        }
        if self.w < 32 || self.w / 2 <= scene.mark_cell {
            return Err(Error::config(
                "W",
                format!("width {} cannot fit a {}px mark cell per quadrant", self.w, scene.mark_cell),
            ));
        }
        Ok(())
    }

    pub fn decoder_config(&self) -> DecoderConfig {
        DecoderConfig {
            num_layers: self.l_dec,
            heads: self.heads,
            width: self.c_llm,
            ff_width: self.ff_width,
            m: self.m,
            gating: self.gating,
            gate_resolution: self.gate_resolution,
            trainable: self.trainable.clone(),
        }
    }

    pub fn guide_config(&self) -> GuideConfig {
        GuideConfig {
            height: self.h,
            width: self.w,
            visual_patch: self.p_v,
            geo_patch: self.p_g,
            frames: self.n,
            geo_layers: self.k,
            geo_channels: self.c_geo,
            decoder: self.decoder_config(),
            vocab: VOCAB_SIZE,
            classes: self.task.num_classes(),
            text_len: self.task.text_len(),
            seed: self.seed,
        }
    }

    /// Scenes at the input resolution; one mark cell covers one merged visual token.
    pub fn scene_config(&self) -> SceneConfig {
        SceneConfig {
            frames: self.n,
            height: self.h,
            width: self.w,
            num_objects: self.task.num_objects(),
            depth_range: (self.depth_min, self.depth_max),
            mark_cell: 2 * self.p_v,
        }
    }
}

fn merge(map: &mut Map<String, Value>, entries: impl Iterator<Item = (String, Value)>) -> Result<()> {
    for (key, value) in entries {
        let key = canonical(&key).to_string();
        if !map.contains_key(&key) {
            return Err(Error::config(key, "unknown key"));
        }
        map.insert(key, value);
    }
    Ok(())
}
