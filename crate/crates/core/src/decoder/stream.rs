use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};

/// Where a visual token came from: frame and merged-grid cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenPos {
    pub frame: usize,
    pub row: usize,
    pub col: usize,
}

/// Frame-major, then row-major, provenance of `frames × grid` tokens.
pub fn visual_provenance(frames: usize, grid: (usize, usize)) -> Arc<[TokenPos]> {
    (0..frames)
        .flat_map(|frame| (0..grid.0).flat_map(move |row| (0..grid.1).map(move |col| TokenPos { frame, row, col })))
        .collect()
}

/// Layout of a `[visual; text]` sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceLayout {
    /// One entry per visual position, in sequence order.
    pub provenance: Arc<[TokenPos]>,
    pub text_len: usize,
}

impl SequenceLayout {
    pub fn num_visual(&self) -> usize {
        self.provenance.len()
    }

    pub fn len(&self) -> usize {
        self.num_visual() + self.text_len
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// True exactly on the visual positions.
    pub fn visual_mask(&self) -> Vec<bool> {
        (0..self.len()).map(|i| i < self.num_visual()).collect()
    }
}

/// A batch of visual tokens `[B, T, C]` and text embeddings `[B, L, C]`, kept apart
/// until [`anchor_input`] joins them.
#[derive(Clone, Debug)]
pub struct TokenStream {
    pub visual: Var,
    pub text: Var,
    pub layout: SequenceLayout,
}

/// `[B, T+L, C]` after anchoring.
#[derive(Clone, Debug)]
pub struct FusedInput {
    pub tokens: Var,
    pub layout: SequenceLayout,
}

/// A `[B, T, C]` feature map meant for the visual positions, with the
/// provenance of each of its `T` tokens.
#[derive(Clone, Debug)]
pub struct AlignedFeature {
    pub tokens: Var,
    pub provenance: Arc<[TokenPos]>,
}

impl AlignedFeature {
    /// Reject features whose tokens do not line up with `layout`'s visual positions.
    pub fn check_alignment(&self, layout: &SequenceLayout) -> Result<()> {
        if self.provenance.len() != layout.num_visual() {
            return Err(Error::Provenance(format!(
                "feature has {} tokens, sequence has {} visual positions",
                self.provenance.len(),
                layout.num_visual()
            )));
        }
        if let Some(i) = (0..self.provenance.len()).find(|&i| self.provenance[i] != layout.provenance[i]) {
            return Err(Error::Provenance(format!(
                "token {i}: feature is at {:?}, visual position is {:?}",
                self.provenance[i], layout.provenance[i]
            )));
        }
        Ok(())
    }
}

/// `T_fuse = T'_V + f̂_macro` on visual positions; text copied unchanged.
pub fn anchor_input(g: &mut Graph, stream: &TokenStream, macro_feature: &AlignedFeature) -> Result<FusedInput> {
    macro_feature.check_alignment(&stream.layout)?;
    let (vs, ms) = (g.shape(stream.visual).to_vec(), g.shape(macro_feature.tokens).to_vec());
    if vs != ms {
        return Err(Error::shape("anchor_input", format!("visual {vs:?} vs macro feature {ms:?}")));
    }
    let ts = g.shape(stream.text);
    if vs.len() != 3 || ts.len() != 3 || ts[0] != vs[0] || ts[2] != vs[2] {
        return Err(Error::shape("anchor_input", format!("visual {vs:?} vs text {ts:?}")));
    }
    if vs[1] != stream.layout.num_visual() || ts[1] != stream.layout.text_len {
        return Err(Error::shape(
            "anchor_input",
            format!("layout {}+{} vs visual {vs:?}, text {ts:?}", stream.layout.num_visual(), stream.layout.text_len),
        ));
    }
    let visual = g.add(stream.visual, macro_feature.tokens)?;
    let tokens = g.concat(&[visual, stream.text], 1)?;
    Ok(FusedInput {
        tokens,
        layout: stream.layout.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layout() -> SequenceLayout {
        SequenceLayout {
            provenance: visual_provenance(1, (2, 2)),
            text_len: 3,
        }
    }

    #[test]
    fn provenance_order() {
        let p = visual_provenance(2, (2, 3));
        assert_eq!(p.len(), 12);
        assert_eq!(p[4], TokenPos { frame: 0, row: 1, col: 1 });
        assert_eq!(p[6], TokenPos { frame: 1, row: 0, col: 0 });
        assert_eq!(layout().visual_mask(), [true, true, true, true, false, false, false]);
    }

    #[test]
    fn anchoring_adds_on_visual_positions_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let vis = Tensor::randn(&[2, 4, 5], 1.0, &mut rng);
        let text = Tensor::randn(&[2, 3, 5], 1.0, &mut rng);
        let mac = Tensor::randn(&[2, 4, 5], 1.0, &mut rng);
        let stream = TokenStream {
            visual: g.constant(&vis),
            text: g.constant(&text),
            layout: layout(),
        };
        let m = AlignedFeature {
            tokens: g.constant(&mac),
            provenance: layout().provenance,
        };
        let fused = anchor_input(&mut g, &stream, &m).unwrap();
        let out = g.data(fused.tokens);
        for b in 0..2 {
            for t in 0..7 {
                for c in 0..5 {
                    let o = out[(b * 7 + t) * 5 + c];
                    if t < 4 {
                        let i = (b * 4 + t) * 5 + c;
                        assert_eq!(o, vis.data()[i] + mac.data()[i]);
                        assert!((o - vis.data()[i] - mac.data()[i]).abs() < 1e-12);
                    } else {
                        assert_eq!(o.to_bits(), text.data()[(b * 3 + t - 4) * 5 + c].to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn misaligned_feature_is_rejected() {
        let mut g = Graph::new();
        let stream = TokenStream {
            visual: g.constant(&Tensor::zeros(&[1, 4, 2])),
            text: g.constant(&Tensor::zeros(&[1, 3, 2])),
            layout: layout(),
        };
        let mut prov = layout().provenance.to_vec();
        prov.swap(0, 1);
        let m = AlignedFeature {
            tokens: g.constant(&Tensor::zeros(&[1, 4, 2])),
            provenance: prov.into(),
        };
        assert!(matches!(anchor_input(&mut g, &stream, &m), Err(Error::Provenance(_))));
        let short = AlignedFeature {
            tokens: g.constant(&Tensor::zeros(&[1, 2, 2])),
            provenance: visual_provenance(1, (1, 2)),
        };
        assert!(anchor_input(&mut g, &stream, &short).is_err());
    }
}
