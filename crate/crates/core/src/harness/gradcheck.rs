use std::collections::BTreeMap;

use serde::Serialize;

use crate::config::RunConfig;
use crate::decoder::{GatingMode, GuideModel, PreparedSample};
use crate::error::Result;
use crate::geo::{generate_scene, SceneConfig};
use crate::params::ParamGroup;
use crate::tensor::{finite_difference_check, GradCheckReport, Tensor};

/// Small config that still exercises every trainable group: two gated
/// layers, their merge projectors, and a two-layer decoder over two frames of
/// 2×2 merged tokens.
pub fn grad_check_config(seed: u64) -> RunConfig {
    RunConfig {
        k: 8,
        m: 2,
        p_v: 16,
        p_g: 8,
        h: 80,
        w: 80,
        n: 2,
        c_geo: 3,
        c_llm: 4,
        l_dec: 2,
        heads: 2,
        ff_width: 8,
        gating: GatingMode::Dual,
        seed,
        ..RunConfig::default()
    }
}

/// Worst relative error per parameter family.
#[derive(Clone, Debug, Serialize)]
pub struct GroupSummary {
    pub group: String,
    pub params: usize,
    pub scalars: usize,
    pub max_rel_error: f64,
    pub worst: String,
    /// Reverse-mode and central-difference values at `worst`.
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ModelGradCheck {
    pub epsilon: f64,
    pub tolerance: f64,
    pub max_rel_error: f64,
    pub passed: bool,
    pub groups: Vec<GroupSummary>,
    #[serde(skip)]
    pub report: GradCheckReport,
}

fn family(name: &str, group: ParamGroup) -> &'static str {
    match group {
        ParamGroup::Gates if name.ends_with(".alpha") => "alpha",
        ParamGroup::Gates => "gate_mlps",
        ParamGroup::Projectors => "merge_projectors",
        ParamGroup::Decoder => "decoder",
        ParamGroup::Visual => "visual",
        ParamGroup::Anchor => "anchor",
    }
}

/// Move the model from its initial point to one where the check is well conditioned.
///
/// A central difference of a loss near `ln 2` carries an absolute error of
/// about `ulp(L)/2ε ≈ 5e-12` at `ε = 1e-5`, so any gradient entry much below
/// `1e-6` cannot meet a `1e-5` relative tolerance however exact the backward
/// pass is. At initialisation the head (std 0.02) makes every gradient tiny,
/// `α = 0` blocks the gated path entirely, and large visual hidden states can
/// saturate the semantic-gate sigmoid. So: `α = 0.5`, head weights ×25
/// (logits of order one), gate input weights ×0.2.
fn condition_for_check(model: &mut GuideModel) -> Result<()> {
    for name in model.gates.alpha_names() {
        model.store.get_mut(&name)?.data_mut()[0] = 0.5;
    }
    model.store.get_mut("decoder.head.w")?.data_mut().iter_mut().for_each(|v| *v *= 25.0);
    for l in 1..=model.gates.m {
        let w1 = model.store.get_mut(&model.gates.name(l, "w1"))?;
        w1.data_mut().iter_mut().for_each(|v| *v *= 0.2);
    }
    Ok(())
}

/// Central-difference check of the full model loss against reverse mode,
/// over every trainable parameter of `config`.
///
/// The parameters are first moved by [`condition_for_check`]; `α ≠ 0` there
/// also lets the semantic gates and projectors receive gradient.
pub fn model_grad_check(config: &RunConfig, batch: usize, epsilon: f64, tolerance: f64) -> Result<ModelGradCheck> {
    config.validate()?;
    let mut model = GuideModel::new(config.guide_config())?;
    // Keep the loss sensitive to every parameter (see `condition_for_check`).
    condition_for_check(&mut model)?;
    let scene_cfg = SceneConfig {
        num_objects: 2,
        mark_cell: config.p_v,
        ..config.scene_config()
    };
    let samples: Vec<PreparedSample> = (0..batch as u64)
        .map(|i| {
            let s = generate_scene(&scene_cfg, config.seed.wrapping_mul(1000) + i)?;
            model.prepare(&s.frames, &s.depth)
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&PreparedSample> = samples.iter().collect();
    let question = config.task.question();
    let ids: Vec<usize> = question.iter().copied().cycle().take(batch * question.len()).collect();
    let labels: Vec<usize> = (0..batch).map(|i| i % config.task.num_classes()).collect();

    let trainable: Vec<(String, Tensor, ParamGroup)> = model
        .store
        .entries()
        .iter()
        .filter(|e| e.trainable)
        .map(|e| (e.name.clone(), e.tensor.clone(), e.group))
        .collect();
    let params: Vec<(String, Tensor)> = trainable.iter().map(|(n, t, _)| (n.clone(), t.clone())).collect();
    let report = finite_difference_check(
        |g, vars| {
            let bound = model.store.bind_substituted(g, vars)?;
            let out = model.forward(g, &bound, &refs, &ids)?;
            g.cross_entropy(out.logits, &labels)
        },
        &params,
        epsilon,
        tolerance,
    )?;

    let mut groups: BTreeMap<&'static str, GroupSummary> = BTreeMap::new();
    for ((name, tensor, group), check) in trainable.iter().zip(&report.params) {
        let fam = family(name, *group);
        let s = groups.entry(fam).or_insert_with(|| GroupSummary {
            group: fam.to_string(),
            params: 0,
            scalars: 0,
            max_rel_error: 0.0,
            worst: String::new(),
            worst_analytic: 0.0,
            worst_numeric: 0.0,
        });
        s.params += 1;
        s.scalars += tensor.numel();
        if !(check.max_rel_error <= s.max_rel_error) || s.worst.is_empty() {
            s.max_rel_error = check.max_rel_error;
            s.worst = format!("{}[{}]", name, check.worst_index);
            s.worst_analytic = check.analytic;
            s.worst_numeric = check.numeric;
        }
    }
    Ok(ModelGradCheck {
        epsilon,
        tolerance,
        max_rel_error: report.max_rel_error,
        passed: report.passed,
        groups: groups.into_values().collect(),
        report,
    })
}
