use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{AlignedFeature, GateResolution, GatingMode, SequenceLayout};
use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamGroup, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

/// Per-layer gates for decoder layers `1..=m`.
///
/// Layer `l` owns a semantic MLP `C → C/2 → C` (or `→ 1` per token) under
/// `gates.{l}.{w1,b1,w2,b2}` and a global scalar `gates.{l}.alpha`, which
/// starts at zero.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateBank {
    pub m: usize,
    pub width: usize,
    pub hidden: usize,
    pub resolution: GateResolution,
}

impl GateBank {
    pub fn init<R: Rng + ?Sized>(
        m: usize,
        width: usize,
        resolution: GateResolution,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Self {
        let bank = Self {
            m,
            width,
            hidden: (width / 2).max(1),
            resolution,
        };
        let out = bank.out_width();
        for l in 1..=m {
            store.insert(
                bank.name(l, "w1"),
                Tensor::randn(&[width, bank.hidden], (2.0 / width as f64).sqrt(), rng),
                ParamGroup::Gates,
            );
            store.insert(bank.name(l, "b1"), Tensor::zeros(&[bank.hidden]), ParamGroup::Gates);
            store.insert(
                bank.name(l, "w2"),
                Tensor::randn(&[bank.hidden, out], (1.0 / bank.hidden as f64).sqrt(), rng),
                ParamGroup::Gates,
            );
            store.insert(bank.name(l, "b2"), Tensor::zeros(&[out]), ParamGroup::Gates);
            store.insert(bank.name(l, "alpha"), Tensor::scalar(0.0), ParamGroup::Gates);
        }
        bank
    }

    fn out_width(&self) -> usize {
        match self.resolution {
            GateResolution::Channel => self.width,
            GateResolution::Token => 1,
        }
    }

    /// Parameter name `gates.{layer}.{part}`.
    pub fn name(&self, layer: usize, part: &str) -> String {
        format!("gates.{layer}.{part}")
    }

    pub fn alpha_names(&self) -> Vec<String> {
        (1..=self.m).map(|l| self.name(l, "alpha")).collect()
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer == 0 || layer > self.m {
            return Err(Error::InvalidArgument(format!(
                "layer {layer} has no gate; gated layers are 1..={}",
                self.m
            )));
        }
        Ok(())
    }

    /// `G_sem = σ(W₂·relu(W₁h + b₁) + b₂)` on `[B, T, C]` (or `[T, C]`) visual hidden states.
    pub fn semantic_gate(&self, g: &mut Graph, params: &BoundParams, layer: usize, h_visual: Var) -> Result<Var> {
        self.check_layer(layer)?;
        let shape = g.shape(h_visual).to_vec();
        if shape.last() != Some(&self.width) || shape.len() < 2 {
            return Err(Error::shape(
                "semantic_gate",
                format!("hidden {shape:?}, gate width {}", self.width),
            ));
        }
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let x = g.reshape(h_visual, &[rows, self.width])?;
        let a = g.linear(x, params.get(&self.name(layer, "w1"))?, Some(params.get(&self.name(layer, "b1"))?))?;
        let a = g.relu(a)?;
        let z = g.linear(a, params.get(&self.name(layer, "w2"))?, Some(params.get(&self.name(layer, "b2"))?))?;
        let mut gate = g.sigmoid(z)?;
        if self.resolution == GateResolution::Token {
            let ones = g.constant_owned(Tensor::full(&[1, self.width], 1.0));
            gate = g.matmul(gate, ones)?;
        }
        g.reshape(gate, &shape)
    }

    /// `G_glo = tanh(α_l)`, shape `[1]`.
    pub fn global_gate(&self, g: &mut Graph, params: &BoundParams, layer: usize) -> Result<Var> {
        self.check_layer(layer)?;
        let alpha = params.get(&self.name(layer, "alpha"))?;
        g.tanh(alpha)
    }

    /// Add the gated feature onto the visual positions of `h` (`[B, T+L, C]`).
    /// Text positions are copied through untouched.
    pub fn inject(
        &self,
        g: &mut Graph,
        params: &BoundParams,
        layer: usize,
        mode: GatingMode,
        h: Var,
        layout: &SequenceLayout,
        feature: &AlignedFeature,
    ) -> Result<Var> {
        self.check_layer(layer)?;
        feature.check_alignment(layout)?;
        let hs = g.shape(h).to_vec();
        let fs = g.shape(feature.tokens).to_vec();
        let t = layout.num_visual();
        if hs.len() != 3 || hs[1] != layout.len() || hs[2] != self.width || fs != [hs[0], t, hs[2]] {
            return Err(Error::shape("inject", format!("hidden {hs:?}, feature {fs:?}, layout {}+{}", t, layout.text_len)));
        }
        let visual = g.slice(h, 1, 0, t)?;
        let update = match mode {
            GatingMode::None => feature.tokens,
            GatingMode::Semantic | GatingMode::Dual => {
                let sem = self.semantic_gate(g, params, layer, visual)?;
                let gated = g.mul(sem, feature.tokens)?;
                if mode == GatingMode::Dual {
                    let glo = self.global_gate(g, params, layer)?;
                    g.scalar_mul(gated, glo)?
                } else {
                    gated
                }
            }
        };
        let visual = g.add(visual, update)?;
        if layout.text_len == 0 {
            return Ok(visual);
        }
        let text = g.slice(h, 1, t, hs[1])?;
        g.concat(&[visual, text], 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::visual_provenance;
    use crate::tensor::sigmoid;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bank(res: GateResolution) -> (GateBank, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let bank = GateBank::init(2, 4, res, &mut store, &mut rng);
        (bank, store)
    }

    fn fill(store: &mut ParamStore, name: &str, v: f64) {
        store.get_mut(name).unwrap().data_mut().fill(v);
    }

    #[test]
    fn zero_mlp_gives_half() {
        let (bank, mut store) = bank(GateResolution::Channel);
        for p in ["w1", "b1", "w2", "b2"] {
            fill(&mut store, &bank.name(1, p), 0.0);
        }
        let mut g = Graph::new();
        let params = store.bind_frozen(&mut g);
        let h = g.constant_owned(Tensor::full(&[3, 4], 7.0));
        let gate = bank.semantic_gate(&mut g, &params, 1, h).unwrap();
        assert!(g.data(gate).iter().all(|&v| v == 0.5));
        fill(&mut store, &bank.name(1, "b2"), 20.0);
        let params = store.bind_frozen(&mut g);
        let gate = bank.semantic_gate(&mut g, &params, 1, h).unwrap();
        assert!(g.data(gate).iter().all(|&v| (v - 1.0).abs() < 1e-8 && v < 1.0));
    }

    #[test]
    fn semantic_gate_matches_direct_formula() {
        for res in [GateResolution::Channel, GateResolution::Token] {
            let (bank, store) = bank(res);
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let h = Tensor::randn(&[5, 4], 1.0, &mut rng);
            let mut g = Graph::new();
            let params = store.bind_frozen(&mut g);
            let hv = g.constant(&h);
            let gate = bank.semantic_gate(&mut g, &params, 2, hv).unwrap();
            let w1 = store.get("gates.2.w1").unwrap().data();
            let b1 = store.get("gates.2.b1").unwrap().data();
            let w2 = store.get("gates.2.w2").unwrap().data();
            let b2 = store.get("gates.2.b2").unwrap().data();
            let out = bank.out_width();
            for r in 0..5 {
                let x = &h.data()[r * 4..r * 4 + 4];
                let a: Vec<f64> = (0..2)
                    .map(|j| (b1[j] + (0..4).map(|i| x[i] * w1[i * 2 + j]).sum::<f64>()).max(0.0))
                    .collect();
                for c in 0..4 {
                    let o = if out == 1 { 0 } else { c };
                    let z = b2[o] + (0..2).map(|j| a[j] * w2[j * out + o]).sum::<f64>();
                    assert!((g.data(gate)[r * 4 + c] - sigmoid(z)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn layer_outside_bank_is_rejected() {
        let (bank, store) = bank(GateResolution::Channel);
        let mut g = Graph::new();
        let params = store.bind_frozen(&mut g);
        assert!(bank.global_gate(&mut g, &params, 0).is_err());
        assert!(bank.global_gate(&mut g, &params, 3).is_err());
        let h = g.constant_owned(Tensor::zeros(&[1, 4]));
        assert!(bank.semantic_gate(&mut g, &params, 3, h).is_err());
    }

    #[test]
    fn global_gate_values() {
        let (bank, mut store) = bank(GateResolution::Channel);
        let mut g = Graph::new();
        let params = store.bind_frozen(&mut g);
        let v = bank.global_gate(&mut g, &params, 1).unwrap();
        assert_eq!(g.data(v), &[0.0]);
        fill(&mut store, "gates.1.alpha", 50.0);
        let params = store.bind_frozen(&mut g);
        let v = bank.global_gate(&mut g, &params, 1).unwrap();
        assert!((g.data(v)[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn inject_zero_alpha_is_identity_and_half_gate_adds_half() {
        let (bank, mut store) = bank(GateResolution::Channel);
        let layout = SequenceLayout {
            provenance: visual_provenance(1, (1, 2)),
            text_len: 1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = Tensor::randn(&[1, 3, 4], 1.0, &mut rng);
        let f = Tensor::randn(&[1, 2, 4], 1.0, &mut rng);
        let mut g = Graph::new();
        let params = store.bind_frozen(&mut g);
        let hv = g.constant(&h);
        let feature = AlignedFeature {
            tokens: g.constant(&f),
            provenance: layout.provenance.clone(),
        };
        let out = bank.inject(&mut g, &params, 1, GatingMode::Dual, hv, &layout, &feature).unwrap();
        assert!(g.value(out).bitwise_eq(&h));

        for p in ["w1", "b1", "w2", "b2"] {
            fill(&mut store, &bank.name(1, p), 0.0);
        }
        fill(&mut store, "gates.1.alpha", 50.0);
        let params = store.bind_frozen(&mut g);
        let out = bank.inject(&mut g, &params, 1, GatingMode::Dual, hv, &layout, &feature).unwrap();
        let o = g.data(out);
        for i in 0..8 {
            assert!((o[i] - (h.data()[i] + 0.5 * f.data()[i])).abs() < 1e-10);
        }
        assert_eq!(&o[8..], &h.data()[8..]);
    }
}
