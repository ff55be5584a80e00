use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    anchor_input, visual_provenance, AlignedFeature, Decoder, DecoderConfig, GateBank, SequenceLayout, TokenPos,
    TokenStream,
};
use crate::alignment::{merge_project, merge_project_tensor, plan_alignment, resize_bilinear, AlignmentPlan, MergeProjector};
use crate::error::{Error, Result};
use crate::geo::{encode_frames, sample_layers, EncoderParams, InjectionSchedule, DEPTH_CHANNEL};
use crate::params::{BoundParams, ParamGroup, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

/// Seed for the frozen components (visual embedder, geometric encoder,
/// anchor connector). They play the role of pretrained weights, so they are
/// the same for every run regardless of the run seed.
const FROZEN_SEED: u64 = 0x5eed_0f_f205e;

/// Architecture knobs for a full [`GuideModel`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuideConfig {
    pub height: usize,
    pub width: usize,
    pub visual_patch: usize,
    pub geo_patch: usize,
    pub frames: usize,
    /// `K`
    pub geo_layers: usize,
    /// `C_geo`
    pub geo_channels: usize,
    pub decoder: DecoderConfig,
    pub vocab: usize,
    pub classes: usize,
    pub text_len: usize,
    /// Seed for the trainable parameters.
    pub seed: u64,
}

/// Everything about one scene that does not depend on trainable weights.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    /// `T'_V`, `[T, C_llm]`.
    pub visual: Tensor,
    /// `f̂_macro`, `[T, C_llm]`.
    pub anchor: Tensor,
    /// Raw `f^{k_j}` for each sampled layer, `[N, G_h, G_w, C_geo]`.
    pub geo: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub logits: Var,
    pub layer_outputs: Vec<Var>,
}

/// Frozen embedders + trainable projectors, gates and decoder.
#[derive(Clone, Debug)]
pub struct GuideModel {
    pub config: GuideConfig,
    pub plan: AlignmentPlan,
    pub schedule: InjectionSchedule,
    pub encoder: EncoderParams,
    pub store: ParamStore,
    pub visual_merger: MergeProjector,
    pub anchor: MergeProjector,
    pub projectors: Vec<MergeProjector>,
    pub gates: GateBank,
    pub decoder: Decoder,
    provenance: Arc<[TokenPos]>,
}

impl GuideModel {
    pub fn new(config: GuideConfig) -> Result<Self> {
        config.decoder.validate()?;
        if config.frames == 0 {
            return Err(Error::config("N", "need at least one frame"));
        }
        if config.geo_channels < 2 {
            return Err(Error::config("C_geo", "need the depth channel plus at least one more"));
        }
        let plan = plan_alignment(config.height, config.width, config.visual_patch, config.geo_patch)
            .map_err(|e| Error::config("H", e.to_string()))?;
        let schedule =
            sample_layers(config.geo_layers, config.decoder.m).map_err(|e| Error::config("m", e.to_string()))?;
        let c = config.decoder.width;
        let encoder = EncoderParams {
            layers: config.geo_layers,
            channels: config.geo_channels,
            patch: config.geo_patch,
        };

        let mut store = ParamStore::new();
        let mut frozen = ChaCha8Rng::seed_from_u64(FROZEN_SEED);
        let patch_dim = config.visual_patch * config.visual_patch * 3;
        store.insert(
            "visual.patch_embed",
            Tensor::randn(&[patch_dim, c], (1.0 / patch_dim as f64).sqrt() * 4.0, &mut frozen),
            ParamGroup::Visual,
        );
        let visual_merger = MergeProjector::init("visual.merger", c, c, ParamGroup::Visual, &mut store, &mut frozen);
        let anchor = MergeProjector::init("anchor", config.geo_channels, c, ParamGroup::Anchor, &mut store, &mut frozen);
        // The connector was "pretrained" without depth supervision: it ignores the depth channel.
        let w_in = store.get_mut(&anchor.name("w_in"))?;
        let hidden = anchor.hidden;
        for q in 0..4 {
            let row = q * config.geo_channels + DEPTH_CHANNEL;
            w_in.data_mut()[row * hidden..(row + 1) * hidden].fill(0.0);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        // Decoder first, so its weights depend on the seed alone and not on `m`.
        let provenance = visual_provenance(config.frames, plan.merged_grid);
        let decoder = Decoder::init(
            config.decoder.clone(),
            provenance.len() + config.text_len,
            config.vocab,
            config.classes,
            &mut store,
            &mut rng,
        )?;
        let projectors = (1..=schedule.depth())
            .map(|j| {
                MergeProjector::init(
                    format!("projectors.{j}"),
                    config.geo_channels,
                    c,
                    ParamGroup::Projectors,
                    &mut store,
                    &mut rng,
                )
            })
            .collect();
        let gates = GateBank::init(schedule.depth(), c, config.decoder.gate_resolution, &mut store, &mut rng);
        store.set_trainable(&config.decoder.trainable);
        Ok(Self {
            config,
            plan,
            schedule,
            encoder,
            store,
            visual_merger,
            anchor,
            projectors,
            gates,
            decoder,
            provenance,
        })
    }

    /// Visual tokens per sample, `T = N · merged grid area`.
    pub fn num_visual(&self) -> usize {
        self.provenance.len()
    }

    pub fn provenance(&self) -> &Arc<[TokenPos]> {
        &self.provenance
    }

    /// Run the frozen part of the pipeline on `[N,H,W,3]` frames and `[N,H,W]` depth.
    pub fn prepare(&self, frames: &Tensor, depth: &Tensor) -> Result<PreparedSample> {
        let cfg = &self.config;
        let (n, h, w) = (cfg.frames, cfg.height, cfg.width);
        if frames.shape() != [n, h, w, 3] || depth.shape() != [n, h, w] {
            return Err(Error::shape(
                "prepare",
                format!("frames {:?}, depth {:?}, expected [{n},{h},{w},3]", frames.shape(), depth.shape()),
            ));
        }
        let t = self.num_visual();
        let c = cfg.decoder.width;

        let patches = self.patch_embed(frames)?;
        let visual = merge_project_tensor(&patches, &self.visual_merger, &self.store)?.reshape(&[t, c])?;

        let resized = resize_bilinear(frames, self.plan.resized)?;
        let depth4 = depth.clone().reshape(&[n, h, w, 1])?;
        let (rh, rw) = self.plan.resized;
        let depth_resized = resize_bilinear(&depth4, self.plan.resized)?.reshape(&[n, rh, rw])?;
        let stack = encode_frames(&resized, &depth_resized, &self.encoder, FROZEN_SEED)?;
        debug_assert_eq!(stack.grid, self.plan.pre_merge_grid);
        let anchor = merge_project_tensor(stack.layer(self.schedule.anchor)?, &self.anchor, &self.store)?
            .reshape(&[t, c])?;
        let geo = self
            .schedule
            .sampled
            .iter()
            .map(|&k| stack.layer(k).cloned())
            .collect::<Result<_>>()?;
        Ok(PreparedSample { visual, anchor, geo })
    }

    /// Frozen linear patch embedding at `P_v`, `[N, G_h, G_w, C]`.
    fn patch_embed(&self, frames: &Tensor) -> Result<Tensor> {
        let cfg = &self.config;
        let p = cfg.visual_patch;
        let (gh, gw) = self.plan.pre_merge_grid;
        let (n, w) = (cfg.frames, cfg.width);
        let c = cfg.decoder.width;
        let weight = self.store.get("visual.patch_embed")?.data();
        let fd = frames.data();
        let mut out = vec![0.0; n * gh * gw * c];
        for f in 0..n {
            for r in 0..gh {
                for q in 0..gw {
                    let dst = &mut out[((f * gh + r) * gw + q) * c..][..c];
                    let mut i = 0;
                    for dy in 0..p {
                        let row = ((f * cfg.height + r * p + dy) * w + q * p) * 3;
                        for &v in &fd[row..row + 3 * p] {
                            for (o, wv) in dst.iter_mut().zip(&weight[i * c..(i + 1) * c]) {
                                *o += v * wv;
                            }
                            i += 1;
                        }
                    }
                }
            }
        }
        Tensor::new(vec![n, gh, gw, c], out)
    }

    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        self.store.bind(g)
    }

    /// Logits for a batch. `text_ids` holds `samples.len()` questions of `text_len` tokens each.
    pub fn forward(
        &self,
        g: &mut Graph,
        params: &BoundParams,
        samples: &[&PreparedSample],
        text_ids: &[usize],
    ) -> Result<ModelOutput> {
        let b = samples.len();
        let cfg = &self.config;
        if b == 0 || text_ids.len() != b * cfg.text_len {
            return Err(Error::shape(
                "forward",
                format!("{} text ids for {b} samples of {} tokens", text_ids.len(), cfg.text_len),
            ));
        }
        let (t, c) = (self.num_visual(), cfg.decoder.width);
        let stack = |f: &dyn Fn(&PreparedSample) -> &Tensor| -> Result<Tensor> {
            let parts: Vec<Tensor> = samples.iter().map(|s| f(s).clone()).collect();
            Tensor::stack(&parts)
        };
        let visual = g.constant_owned(stack(&|s| &s.visual)?);
        let anchor = g.constant_owned(stack(&|s| &s.anchor)?);
        let text = self.decoder.embed_text(g, params, text_ids, b)?;
        let layout = SequenceLayout {
            provenance: self.provenance.clone(),
            text_len: cfg.text_len,
        };
        let stream = TokenStream { visual, text, layout };
        let macro_feature = AlignedFeature {
            tokens: anchor,
            provenance: self.provenance.clone(),
        };
        let fused = anchor_input(g, &stream, &macro_feature)?;

        let (gh, gw) = self.plan.pre_merge_grid;
        let mut features = Vec::with_capacity(self.projectors.len());
        for (j, proj) in self.projectors.iter().enumerate() {
            let raw = stack(&|s| &s.geo[j])?.reshape(&[b * cfg.frames, gh, gw, cfg.geo_channels])?;
            let x = g.constant_owned(raw);
            let y = merge_project(g, params, x, proj)?;
            let tokens = g.reshape(y, &[b, t, c])?;
            features.push(AlignedFeature {
                tokens,
                provenance: self.provenance.clone(),
            });
        }
        let out = self
            .decoder
            .forward(g, params, &fused, &self.schedule, &features, &self.gates)?;
        Ok(ModelOutput {
            logits: out.logits,
            layer_outputs: out.layer_outputs,
        })
    }

    /// `|tanh α_l|` for each gated layer; empty unless global gating is on.
    pub fn gate_abs_tanh(&self) -> Result<Vec<f64>> {
        if !self.config.decoder.gating.uses_global() {
            return Ok(Vec::new());
        }
        self.gates
            .alpha_names()
            .iter()
            .map(|n| Ok(self.store.get(n)?.data()[0].tanh().abs()))
            .collect()
    }
}
