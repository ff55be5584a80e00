//! Deterministic stand-in for a feed-forward multi-view geometry encoder.
//!
//! Layer 0 is a seeded patch embedding applied to each frame on its own.
//! Layer `k ∈ 1..=K` applies a seeded linear map and relu to the previous
//! layer, then blends every frame toward the cross-frame mean with weight
//! `(k−1)/(K−1)`. Shallow layers are therefore purely per-frame and layer `K`
//! is fully shared across frames.
//!
//! Channel [`DEPTH_CHANNEL`] is reserved: in every layer it holds the
//! patch-averaged scene depth, and it is never read by the next layer's
//! linear map. Depth only reaches the stack through that channel.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SyntheticScene;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEPTH_CHANNEL: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    /// `K`, number of layers in the emitted stack.
    pub layers: usize,
    /// `C_geo`, including the reserved depth channel.
    pub channels: usize,
    /// `P_g`, patch size in pixels.
    pub patch: usize,
}

/// `f^1..f^K`, each `[N, G_h, G_w, C_geo]`. `layers[k-1]` holds `f^k`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStack {
    pub layers: Vec<Tensor>,
    pub grid: (usize, usize),
    pub channels: usize,
}

impl FeatureStack {
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// `f^k`, 1-based.
    pub fn layer(&self, k: usize) -> Result<&Tensor> {
        if k == 0 || k > self.layers.len() {
            return Err(Error::InvalidArgument(format!(
                "layer {k} outside 1..={}",
                self.layers.len()
            )));
        }
        Ok(&self.layers[k - 1])
    }
}

struct EncoderWeights {
    embed: Vec<f64>,       // [P·P·3, C−1]
    layers: Vec<Vec<f64>>, // K × [C−1, C−1]
}

fn weights(params: &EncoderParams, seed: u64) -> EncoderWeights {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e6f_6465_6765_6f00);
    let free = params.channels - 1;
    let patch_dim = params.patch * params.patch * 3;
    let embed = Tensor::randn(&[patch_dim, free], (2.0 / patch_dim as f64).sqrt(), &mut rng).into_data();
    let layers = (0..params.layers)
        .map(|_| Tensor::randn(&[free, free], (2.0 / free as f64).sqrt(), &mut rng).into_data())
        .collect();
    EncoderWeights { embed, layers }
}

/// Run the mock encoder on a scene whose resolution is already a multiple of `P_g`.
pub fn encode(scene: &SyntheticScene, params: &EncoderParams, seed: u64) -> Result<FeatureStack> {
    encode_frames(&scene.frames, &scene.depth, params, seed)
}

/// [`encode`] on raw `[N,H,W,3]` frames and `[N,H,W]` depth.
pub fn encode_frames(frames: &Tensor, depth: &Tensor, params: &EncoderParams, seed: u64) -> Result<FeatureStack> {
    if params.layers < 1 || params.channels < 2 || params.patch == 0 {
        return Err(Error::InvalidArgument(format!("bad encoder params {params:?}")));
    }
    let &[n, h, w, 3] = frames.shape() else {
        return Err(Error::shape("encode", format!("frames {:?}", frames.shape())));
    };
    if depth.shape() != [n, h, w] {
        return Err(Error::shape("encode", format!("depth {:?} for frames {:?}", depth.shape(), frames.shape())));
    }
    let p = params.patch;
    if h % p != 0 || w % p != 0 {
        let (rh, rw) = (h / p * p, w / p * p);
        return Err(Error::InvalidArgument(format!(
            "{h}x{w} is not divisible by patch {p}; resize to {}x{} or another multiple of {p} (see plan_alignment)",
            rh.max(p),
            rw.max(p)
        )));
    }
    let (gh, gw) = (h / p, w / p);
    let c = params.channels;
    let free = c - 1;
    let tokens = n * gh * gw;
    let wts = weights(params, seed);

    // Per-token depth means and the layer-0 embedding.
    let depth_mean = patch_depth_means(depth.data(), n, h, w, p);
    let patch_dim = p * p * 3;
    let mut cur = vec![0.0; tokens * free];
    let mut patch = vec![0.0; patch_dim];
    let fd = frames.data();
    for f in 0..n {
        for r in 0..gh {
            for q in 0..gw {
                let mut i = 0;
                for dy in 0..p {
                    let row = ((f * h + r * p + dy) * w + q * p) * 3;
                    patch[i..i + p * 3].copy_from_slice(&fd[row..row + p * 3]);
                    i += p * 3;
                }
                let t = (f * gh + r) * gw + q;
                let out = &mut cur[t * free..(t + 1) * free];
                for (pi, &v) in patch.iter().enumerate() {
                    let wrow = &wts.embed[pi * free..(pi + 1) * free];
                    for (o, wv) in out.iter_mut().zip(wrow) {
                        *o += v * wv;
                    }
                }
            }
        }
    }

    let per_frame = gh * gw * free;
    let k_total = params.layers;
    let mut layers = Vec::with_capacity(k_total);
    for (k, wk) in (1..=k_total).zip(&wts.layers) {
        let mut next = vec![0.0; tokens * free];
        for t in 0..tokens {
            let src = &cur[t * free..(t + 1) * free];
            let dst = &mut next[t * free..(t + 1) * free];
            for (i, &v) in src.iter().enumerate() {
                for (o, wv) in dst.iter_mut().zip(&wk[i * free..(i + 1) * free]) {
                    *o += v * wv;
                }
            }
            for o in dst.iter_mut() {
                *o = o.max(0.0);
            }
        }
        let mix = if k_total == 1 { 1.0 } else { (k - 1) as f64 / (k_total - 1) as f64 };
        if mix > 0.0 && n > 1 {
            let mut mean = vec![0.0; per_frame];
            for f in 0..n {
                for (m, v) in mean.iter_mut().zip(&next[f * per_frame..(f + 1) * per_frame]) {
                    *m += v / n as f64;
                }
            }
            for f in 0..n {
                for (v, m) in next[f * per_frame..(f + 1) * per_frame].iter_mut().zip(&mean) {
                    *v = (1.0 - mix) * *v + mix * m;
                }
            }
        }
        let mut full = vec![0.0; tokens * c];
        for t in 0..tokens {
            full[t * c + DEPTH_CHANNEL] = depth_mean[t];
            let rest = &mut full[t * c..(t + 1) * c];
            let mut j = 0;
            for (ch, slot) in rest.iter_mut().enumerate() {
                if ch != DEPTH_CHANNEL {
                    *slot = next[t * free + j];
                    j += 1;
                }
            }
        }
        layers.push(Tensor::new(vec![n, gh, gw, c], full)?);
        cur = next;
    }
    Ok(FeatureStack {
        layers,
        grid: (gh, gw),
        channels: c,
    })
}

fn patch_depth_means(depth: &[f64], n: usize, h: usize, w: usize, p: usize) -> Vec<f64> {
    let (gh, gw) = (h / p, w / p);
    let mut out = vec![0.0; n * gh * gw];
    for f in 0..n {
        for r in 0..gh {
            for q in 0..gw {
                let mut s = 0.0;
                for y in r * p..(r + 1) * p {
                    let row = (f * h + y) * w;
                    s += depth[row + q * p..row + (q + 1) * p].iter().sum::<f64>();
                }
                out[(f * gh + r) * gw + q] = s / (p * p) as f64;
            }
        }
    }
    out
}

/// Per-layer cross-frame dependence of frame 0 on frame 1.
///
/// Frame 1's pixels are perturbed and, for each layer, the score is
/// `‖Δf₀‖ / (‖Δf₀‖ + ‖Δf₁‖)` over the non-reserved channels: 0 means frame 0
/// ignores frame 1, and 0.5 means the two frames respond identically.
/// Needs at least two frames.
pub fn cross_frame_dependence(
    frames: &Tensor,
    depth: &Tensor,
    params: &EncoderParams,
    seed: u64,
) -> Result<Vec<f64>> {
    let n = frames.shape()[0];
    if n < 2 {
        return Err(Error::InvalidArgument("cross-frame dependence needs two frames".into()));
    }
    let base = encode_frames(frames, depth, params, seed)?;
    let mut perturbed = frames.clone();
    let per_frame = perturbed.numel() / n;
    for (i, v) in perturbed.data_mut()[per_frame..2 * per_frame].iter_mut().enumerate() {
        // deterministic, bounded and spatially varied
        *v = (*v + 0.25 * ((i as f64) * 0.37).sin()).clamp(0.0, 1.0);
    }
    let moved = encode_frames(&perturbed, depth, params, seed)?;
    let c = base.channels;
    let scores = base
        .layers
        .iter()
        .zip(&moved.layers)
        .map(|(a, b)| {
            let per = a.numel() / n;
            let norm = |f: usize| -> f64 {
                a.data()[f * per..(f + 1) * per]
                    .iter()
                    .zip(&b.data()[f * per..(f + 1) * per])
                    .enumerate()
                    .filter(|(i, _)| i % c != DEPTH_CHANNEL)
                    .map(|(_, (x, y))| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt()
            };
            let (d0, d1) = (norm(0), norm(1));
            if d0 + d1 == 0.0 {
                0.0
            } else {
                d0 / (d0 + d1)
            }
        })
        .collect();
    Ok(scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{generate_scene, SceneConfig};

    fn scene() -> SyntheticScene {
        let cfg = SceneConfig {
            frames: 2,
            height: 64,
            width: 64,
            num_objects: 2,
            depth_range: (1.0, 5.0),
            mark_cell: 16,
        };
        generate_scene(&cfg, 11).unwrap()
    }

    fn params() -> EncoderParams {
        EncoderParams {
            layers: 8,
            channels: 6,
            patch: 8,
        }
    }

    #[test]
    fn shape_contract() {
        let stack = encode(&scene(), &params(), 1).unwrap();
        assert_eq!(stack.depth(), 8);
        for layer in &stack.layers {
            assert_eq!(layer.shape(), &[2, 8, 8, 6]);
        }
        assert_eq!(stack.grid, (8, 8));
    }

    #[test]
    fn rejects_indivisible_resolution() {
        let p = EncoderParams { patch: 14, ..params() };
        let err = encode(&scene(), &p, 1).unwrap_err().to_string();
        assert!(err.contains("resize to 56x56"), "{err}");
    }

    #[test]
    fn first_layer_is_per_frame() {
        let s = scene();
        let base = encode(&s, &params(), 1).unwrap();
        let mut moved = s.clone();
        let per = moved.frames.numel() / 2;
        for v in &mut moved.frames.data_mut()[per..] {
            *v = 1.0 - *v;
        }
        let pert = encode(&moved, &params(), 1).unwrap();
        let per_tok = base.layers[0].numel() / 2;
        assert_eq!(base.layers[0].data()[..per_tok], pert.layers[0].data()[..per_tok]);
        let last = base.layers.len() - 1;
        assert_ne!(base.layers[last].data()[..per_tok], pert.layers[last].data()[..per_tok]);
    }

    #[test]
    fn deterministic() {
        let a = encode(&scene(), &params(), 5).unwrap();
        let b = encode(&scene(), &params(), 5).unwrap();
        assert!(a.layers.iter().zip(&b.layers).all(|(x, y)| x.bitwise_eq(y)));
    }
}
