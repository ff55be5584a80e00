//! Patch-grid alignment between the visual and geometric streams.
//!
//! The input is resized to `(⌊H/P_v⌋·P_g, ⌊W/P_v⌋·P_g)` before it reaches the
//! geometric encoder. Patching that image with `P_g` then produces exactly the
//! `⌊H/P_v⌋ × ⌊W/P_v⌋` grid the visual encoder produces from the original
//! image, so token `(r, c)` of both streams covers the same region.
//! Both streams are then compressed 2×2 by concatenating each block's
//! channels (top-left, top-right, bottom-left, bottom-right) and projecting
//! with a small MLP.

use log::{debug, warn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamGroup, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentPlan {
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
    #[serde(rename = "P_v")]
    pub visual_patch: usize,
    #[serde(rename = "P_g")]
    pub geo_patch: usize,
    /// `(H', W')` fed to the geometric encoder.
    pub resized: (usize, usize),
    pub pre_merge_grid: (usize, usize),
    pub merged_grid: (usize, usize),
}

impl AlignmentPlan {
    /// Geometric patch grid obtained by patching the resized image with `P_g`.
    pub fn geo_grid(&self) -> (usize, usize) {
        (self.resized.0 / self.geo_patch, self.resized.1 / self.geo_patch)
    }

    /// Visual tokens per frame after the 2×2 merge.
    pub fn tokens_per_frame(&self) -> usize {
        self.merged_grid.0 * self.merged_grid.1
    }
}

pub fn plan_alignment(height: usize, width: usize, visual_patch: usize, geo_patch: usize) -> Result<AlignmentPlan> {
    if height == 0 || width == 0 || visual_patch == 0 || geo_patch == 0 {
        return Err(Error::InvalidArgument(format!(
            "plan_alignment arguments must be positive: H={height} W={width} P_v={visual_patch} P_g={geo_patch}"
        )));
    }
    if height < visual_patch || width < visual_patch {
        return Err(Error::InvalidArgument(format!(
            "{height}x{width} image is smaller than one {visual_patch}px visual patch"
        )));
    }
    let grid = (height / visual_patch, width / visual_patch);
    if grid.0 < 2 || grid.1 < 2 {
        return Err(Error::InvalidArgument(format!(
            "visual grid {}x{} is too small for a 2x2 merge",
            grid.0, grid.1
        )));
    }
    if grid.0 % 2 == 1 || grid.1 % 2 == 1 {
        warn!(
            "visual grid {}x{} is odd; the trailing row/column is dropped by the 2x2 merge",
            grid.0, grid.1
        );
    }
    Ok(AlignmentPlan {
        height,
        width,
        visual_patch,
        geo_patch,
        resized: (grid.0 * geo_patch, grid.1 * geo_patch),
        pre_merge_grid: grid,
        merged_grid: (grid.0 / 2, grid.1 / 2),
    })
}

/// Bilinear resize of `[H, W, C]` (or `[N, H, W, C]`) with half-pixel centres.
///
/// Output pixel `i` samples source coordinate `(i + 0.5)·H/H' − 0.5`, clamped
/// to the image, so every output is a convex combination of inputs.
pub fn resize_bilinear(image: &Tensor, target: (usize, usize)) -> Result<Tensor> {
    let (n, h, w, c) = match *image.shape() {
        [h, w, c] => (1, h, w, c),
        [n, h, w, c] => (n, h, w, c),
        _ => return Err(Error::shape("resize_bilinear", format!("image {:?}", image.shape()))),
    };
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(Error::shape("resize_bilinear", format!("target {th}x{tw}")));
    }
    let taps = |out: usize, src: usize| -> Vec<(usize, usize, f64)> {
        (0..out)
            .map(|i| {
                let pos = ((i as f64 + 0.5) * src as f64 / out as f64 - 0.5).clamp(0.0, (src - 1) as f64);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(src - 1);
                (lo, hi, pos - lo as f64)
            })
            .collect()
    };
    let (ys, xs) = (taps(th, h), taps(tw, w));
    let src = image.data();
    let mut out = Vec::with_capacity(n * th * tw * c);
    for f in 0..n {
        let base = f * h * w * c;
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                for ch in 0..c {
                    let at = |y: usize, x: usize| src[base + (y * w + x) * c + ch];
                    let top = (1.0 - fx) * at(y0, x0) + fx * at(y0, x1);
                    let bottom = (1.0 - fx) * at(y1, x0) + fx * at(y1, x1);
                    out.push((1.0 - fy) * top + fy * bottom);
                }
            }
        }
    }
    let shape = if image.shape().len() == 3 {
        vec![th, tw, c]
    } else {
        vec![n, th, tw, c]
    };
    Tensor::new(shape, out)
}

/// Concatenate the channels of each 2×2 token block: `[B, G_h, G_w, C] → [B, ⌊G_h/2⌋, ⌊G_w/2⌋, 4C]`.
///
/// A trailing odd row or column is dropped.
pub fn concat_2x2(g: &mut Graph, x: Var) -> Result<Var> {
    let &[b, gh, gw, c] = g.shape(x) else {
        return Err(Error::shape("concat_2x2", format!("{:?}", g.shape(x))));
    };
    if gh < 2 || gw < 2 {
        return Err(Error::shape("concat_2x2", format!("grid {gh}x{gw} is smaller than 2x2")));
    }
    let mut x = x;
    if gh % 2 == 1 {
        debug!("dropping trailing row of odd {gh}-row grid before 2x2 merge");
        x = g.slice(x, 1, 0, gh - 1)?;
    }
    if gw % 2 == 1 {
        debug!("dropping trailing column of odd {gw}-column grid before 2x2 merge");
        x = g.slice(x, 2, 0, gw - 1)?;
    }
    let (mh, mw) = (gh / 2, gw / 2);
    let x = g.reshape(x, &[b, mh, 2, mw, 2, c])?;
    let x = g.permute(x, &[0, 1, 3, 2, 4, 5])?;
    g.reshape(x, &[b, mh, mw, 4 * c])
}

/// Two-layer MLP `4·C_in → D → C_out` with relu, applied after [`concat_2x2`].
///
/// Weights live in a [`ParamStore`] under `{prefix}.w_in`, `{prefix}.b_in`,
/// `{prefix}.w_out`, `{prefix}.b_out`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeProjector {
    pub prefix: String,
    pub c_in: usize,
    pub hidden: usize,
    pub c_out: usize,
}

impl MergeProjector {
    /// Register freshly initialised weights. Hidden width is `2·c_out`.
    pub fn init<R: Rng + ?Sized>(
        prefix: impl Into<String>,
        c_in: usize,
        c_out: usize,
        group: ParamGroup,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Self {
        let proj = Self {
            prefix: prefix.into(),
            c_in,
            hidden: 2 * c_out,
            c_out,
        };
        let fan_in = 4 * c_in;
        store.insert(
            proj.name("w_in"),
            Tensor::randn(&[fan_in, proj.hidden], (2.0 / fan_in as f64).sqrt(), rng),
            group,
        );
        store.insert(proj.name("b_in"), Tensor::zeros(&[proj.hidden]), group);
        store.insert(
            proj.name("w_out"),
            Tensor::randn(&[proj.hidden, c_out], (1.0 / proj.hidden as f64).sqrt(), rng),
            group,
        );
        store.insert(proj.name("b_out"), Tensor::zeros(&[c_out]), group);
        proj
    }

    pub fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    pub fn param_names(&self) -> [String; 4] {
        ["w_in", "b_in", "w_out", "b_out"].map(|p| self.name(p))
    }

    /// MLP on `[rows, 4·C_in]`.
    pub fn apply_rows(&self, g: &mut Graph, params: &BoundParams, rows: Var) -> Result<Var> {
        let width = g.shape(rows)[1];
        if width != 4 * self.c_in {
            return Err(Error::shape(
                "merge_project",
                format!("input has {} channels after 2x2 concat, projector expects {}", width, 4 * self.c_in),
            ));
        }
        let h = g.linear(rows, params.get(&self.name("w_in"))?, Some(params.get(&self.name("b_in"))?))?;
        let h = g.relu(h)?;
        g.linear(h, params.get(&self.name("w_out"))?, Some(params.get(&self.name("b_out"))?))
    }
}

/// `[N, G_h, G_w, C_in] → [N, ⌊G_h/2⌋, ⌊G_w/2⌋, C_out]`.
pub fn merge_project(g: &mut Graph, params: &BoundParams, feature: Var, projector: &MergeProjector) -> Result<Var> {
    let shape = g.shape(feature).to_vec();
    if shape.len() != 4 {
        return Err(Error::shape("merge_project", format!("feature {shape:?}")));
    }
    if shape[3] != projector.c_in {
        return Err(Error::shape(
            "merge_project",
            format!("feature has {} channels, projector expects {}", shape[3], projector.c_in),
        ));
    }
    let blocks = concat_2x2(g, feature)?;
    let &[n, mh, mw, c4] = g.shape(blocks) else { unreachable!() };
    let rows = g.reshape(blocks, &[n * mh * mw, c4])?;
    let out = projector.apply_rows(g, params, rows)?;
    g.reshape(out, &[n, mh, mw, projector.c_out])
}

/// [`merge_project`] on plain tensors, outside any training graph.
pub fn merge_project_tensor(feature: &Tensor, projector: &MergeProjector, store: &ParamStore) -> Result<Tensor> {
    let mut g = Graph::new();
    let params = store.bind_frozen(&mut g);
    let x = g.constant(feature);
    let y = merge_project(&mut g, &params, x, projector)?;
    Ok(g.value(y))
}
