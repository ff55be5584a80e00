use guide::config::RunConfig;
use guide::decoder::{GatingMode, GuideModel, PreparedSample};
use guide::geo::generate_scene;
use guide::params::ParamGroup;
use guide::tensor::{Graph, Tensor};
use guide::training::TaskFamily;

fn small(m: usize, gating: GatingMode) -> RunConfig {
    RunConfig {
        k: 12,
        m,
        p_v: 8,
        p_g: 8,
        h: 64,
        w: 64,
        n: 2,
        c_geo: 4,
        c_llm: 8,
        l_dec: 4,
        heads: 2,
        ff_width: 16,
        gating,
        task: TaskFamily::NearerOfTwo,
        seed: 11,
        ..RunConfig::default()
    }
}

fn batch(model: &GuideModel, cfg: &RunConfig, n: u64) -> (Vec<PreparedSample>, Vec<usize>) {
    let samples = (0..n)
        .map(|i| {
            let s = generate_scene(&cfg.scene_config(), 100 + i).unwrap();
            model.prepare(&s.frames, &s.depth).unwrap()
        })
        .collect();
    let q = cfg.task.question();
    let ids = q.iter().copied().cycle().take(n as usize * q.len()).collect();
    (samples, ids)
}

struct Run {
    logits: Tensor,
    layers: Vec<Tensor>,
}

fn run(model: &GuideModel, samples: &[PreparedSample], ids: &[usize]) -> Run {
    let mut g = Graph::new();
    let p = model.store.bind_frozen(&mut g);
    let refs: Vec<&PreparedSample> = samples.iter().collect();
    let out = model.forward(&mut g, &p, &refs, ids).unwrap();
    Run {
        logits: g.value(out.logits),
        layers: out.layer_outputs.iter().map(|&v| g.value(v)).collect(),
    }
}

#[test]
fn forward_is_bitwise_deterministic() {
    let cfg = small(3, GatingMode::Dual);
    let model = GuideModel::new(cfg.guide_config()).unwrap();
    let (s, ids) = batch(&model, &cfg, 3);
    let a = run(&model, &s, &ids);
    let b = run(&model, &s, &ids);
    assert!(a.logits.bitwise_eq(&b.logits));
    assert_eq!(a.logits.shape(), &[3, 2]);
    assert_eq!(a.layers.len(), cfg.l_dec);
}

#[test]
fn decoder_weights_do_not_depend_on_injection_depth() {
    let a = GuideModel::new(small(0, GatingMode::Dual).guide_config()).unwrap();
    let b = GuideModel::new(small(3, GatingMode::Dual).guide_config()).unwrap();
    for e in a.store.entries().iter().filter(|e| e.group == ParamGroup::Decoder) {
        assert!(e.tensor.bitwise_eq(b.store.get(&e.name).unwrap()), "{}", e.name);
    }
}

#[test]
fn zero_alpha_reproduces_baseline_at_every_layer() {
    let base_cfg = small(0, GatingMode::Dual);
    let base = GuideModel::new(base_cfg.guide_config()).unwrap();
    let (s, ids) = batch(&base, &base_cfg, 2);
    let want = run(&base, &s, &ids);
    for m in [1, 2, 4] {
        let cfg = small(m, GatingMode::Dual);
        let model = GuideModel::new(cfg.guide_config()).unwrap();
        let (s, ids) = batch(&model, &cfg, 2);
        let got = run(&model, &s, &ids);
        for (l, (a, b)) in got.layers.iter().zip(&want.layers).enumerate() {
            assert!(a.max_abs_diff(b) <= 1e-12, "m={m} layer {l}: {}", a.max_abs_diff(b));
        }
        assert!(got.logits.max_abs_diff(&want.logits) <= 1e-12);
    }
}

#[test]
fn opening_one_gate_changes_only_that_layer_onward() {
    let cfg = small(3, GatingMode::Dual);
    let mut model = GuideModel::new(cfg.guide_config()).unwrap();
    let (s, ids) = batch(&model, &cfg, 2);
    let closed = run(&model, &s, &ids);
    let opened_at = 2;
    model.store.get_mut(&model.gates.name(opened_at, "alpha")).unwrap().data_mut()[0] = 0.7;
    let open = run(&model, &s, &ids);
    for l in 0..cfg.l_dec {
        let same = open.layers[l].bitwise_eq(&closed.layers[l]);
        // layer_outputs[l] is the output of decoder layer l+1
        assert_eq!(same, l + 1 < opened_at, "layer {}", l + 1);
    }
}

#[test]
fn ungated_mode_always_injects() {
    let base_cfg = small(0, GatingMode::None);
    let base = GuideModel::new(base_cfg.guide_config()).unwrap();
    let (s, ids) = batch(&base, &base_cfg, 2);
    let want = run(&base, &s, &ids);
    let cfg = small(2, GatingMode::None);
    let model = GuideModel::new(cfg.guide_config()).unwrap();
    let (s, ids) = batch(&model, &cfg, 2);
    let got = run(&model, &s, &ids);
    assert!(got.layers[0].max_abs_diff(&want.layers[0]) > 1e-6);
}

#[test]
fn gradient_reaches_every_trainable_group() {
    let cfg = small(2, GatingMode::Dual);
    let mut model = GuideModel::new(cfg.guide_config()).unwrap();
    let (s, ids) = batch(&model, &cfg, 4);
    let labels = [0, 1, 1, 0];
    let grads = |model: &GuideModel| {
        let mut g = Graph::new();
        let p = model.store.bind(&mut g);
        let refs: Vec<&PreparedSample> = s.iter().collect();
        let out = model.forward(&mut g, &p, &refs, &ids).unwrap();
        let loss = g.cross_entropy(out.logits, &labels).unwrap();
        g.backward(loss).unwrap();
        model
            .store
            .entries()
            .iter()
            .zip(p.vars())
            .map(|(e, &v)| {
                let n = g.grad(v).map_or(0.0, |d| d.iter().map(|x| x * x).sum::<f64>().sqrt());
                (e.name.clone(), e.group, e.trainable, n)
            })
            .collect::<Vec<_>>()
    };

    // Closed gates: only α and the decoder learn; projectors and gate MLPs are cut off.
    for (name, group, trainable, norm) in grads(&model) {
        if !trainable {
            assert_eq!(norm, 0.0, "{name} is frozen");
        } else if name.ends_with(".alpha") {
            assert!(norm > 0.0, "{name}");
        } else if group == ParamGroup::Projectors || group == ParamGroup::Gates {
            assert_eq!(norm, 0.0, "{name}");
        }
    }
    for name in model.gates.alpha_names() {
        model.store.get_mut(&name).unwrap().data_mut()[0] = 0.3;
    }
    for (name, group, trainable, norm) in grads(&model) {
        if trainable && group != ParamGroup::Decoder {
            assert!(norm > 0.0, "{name} received no gradient");
        }
    }
}

#[test]
fn semantic_gate_weights_pass_a_full_forward_check() {
    let check = guide::harness::model_grad_check(&guide::harness::grad_check_config(1), 2, 1e-5, 1e-5).unwrap();
    let gates = check.groups.iter().find(|g| g.group == "gate_mlps").unwrap();
    assert!(gates.scalars > 0);
    assert!(gates.max_rel_error <= 1e-5, "{gates:?}");
}
