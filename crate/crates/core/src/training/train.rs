use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{adam_step, lr_at, make_task_batch, OptimizerState, TaskFamily};
use crate::config::RunConfig;
use crate::decoder::{GatingMode, GuideModel, PreparedSample};
use crate::error::{Error, Result};
use crate::tensor::Graph;

const EVAL_SALT: u64 = 0x0e7a_15a1_7000_0001;
const EVAL_CHUNK: usize = 128;

/// One line of `trace.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRecord {
    pub step: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub eval_acc: f64,
    pub lr: f64,
    /// `|tanh α_l|` for `l = 1..=m`; empty without the global gate.
    pub gate_abs_tanh: Vec<f64>,
    pub m: usize,
    pub gating: GatingMode,
    pub seed: u64,
    pub task: TaskFamily,
}

impl TraceRecord {
    pub fn mean_gate_abs_tanh(&self) -> f64 {
        if self.gate_abs_tanh.is_empty() {
            0.0
        } else {
            self.gate_abs_tanh.iter().sum::<f64>() / self.gate_abs_tanh.len() as f64
        }
    }
}

/// A labelled split with the frozen features already computed.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<PreparedSample>,
    pub labels: Vec<usize>,
    pub question: Vec<usize>,
}

impl Dataset {
    pub fn generate(model: &GuideModel, config: &RunConfig, size: usize, seed: u64) -> Result<Self> {
        let instances = make_task_batch(config.task, size, seed, &config.scene_config())?;
        let samples = instances
            .iter()
            .map(|t| model.prepare(&t.scene.frames, &t.scene.depth))
            .collect::<Result<_>>()?;
        Ok(Self {
            samples,
            labels: instances.iter().map(|t| t.label).collect(),
            question: config.task.question(),
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn text_ids(&self, count: usize) -> Vec<usize> {
        self.question.iter().copied().cycle().take(count * self.question.len()).collect()
    }
}

pub struct TrainOutcome {
    pub model: GuideModel,
    pub trace: Vec<TraceRecord>,
}

impl TrainOutcome {
    pub fn final_record(&self) -> &TraceRecord {
        self.trace.last().expect("the final step is always logged")
    }
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

fn accuracy(logits: &[f64], classes: usize, labels: &[usize]) -> f64 {
    let hits = logits
        .chunks(classes)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count();
    hits as f64 / labels.len() as f64
}

/// Accuracy of `model` on `data`, without recording gradients.
pub fn evaluate(model: &GuideModel, data: &Dataset) -> Result<f64> {
    let mut hits = 0.0;
    for (chunk, labels) in data.samples.chunks(EVAL_CHUNK).zip(data.labels.chunks(EVAL_CHUNK)) {
        let mut g = Graph::new();
        let params = model.store.bind_frozen(&mut g);
        let refs: Vec<&PreparedSample> = chunk.iter().collect();
        let out = model.forward(&mut g, &params, &refs, &data.text_ids(chunk.len()))?;
        hits += accuracy(g.data(out.logits), model.config.classes, labels) * labels.len() as f64;
    }
    Ok(hits / data.len() as f64)
}

/// Train a fresh model for `config`, handing every logged record to `sink`.
///
/// Steps `0..steps` each draw a batch, record the loss, and apply one Adam
/// update; step `steps` is evaluated without an update so the trace ends on
/// the final weights. Steps divisible by `log_every`, and the last step, are
/// logged with a full evaluation.
pub fn train(config: &RunConfig, sink: &mut dyn FnMut(&TraceRecord) -> Result<()>) -> Result<TrainOutcome> {
    config.validate()?;
    let mut model = GuideModel::new(config.guide_config())?;
    let train_set = Dataset::generate(&model, config, config.train_pool, config.seed)?;
    let eval_set = Dataset::generate(&model, config, config.eval_size, config.seed ^ EVAL_SALT)?;
    let trace = train_on(&mut model, config, &train_set, &eval_set, sink)?;
    Ok(TrainOutcome { model, trace })
}

/// The optimisation loop on prepared data. Returns every logged record.
pub fn train_on(
    model: &mut GuideModel,
    config: &RunConfig,
    train_set: &Dataset,
    eval_set: &Dataset,
    sink: &mut dyn FnMut(&TraceRecord) -> Result<()>,
) -> Result<Vec<TraceRecord>> {
    if train_set.len() < config.batch {
        return Err(Error::config(
            "train_pool",
            format!("{} training samples cannot fill a batch of {}", train_set.len(), config.batch),
        ));
    }
    let mut state = OptimizerState::new(&model.store, config.peak_lr, config.warmup_ratio, config.steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5a3d_e0f1));
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut cursor = order.len();
    let text_ids = train_set.text_ids(config.batch);
    let classes = model.config.classes;
    let mut trace = Vec::new();

    for step in 0..=config.steps {
        let mut batch = Vec::with_capacity(config.batch);
        while batch.len() < config.batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let samples: Vec<&PreparedSample> = batch.iter().map(|&i| &train_set.samples[i]).collect();
        let labels: Vec<usize> = batch.iter().map(|&i| train_set.labels[i]).collect();

        let mut g = Graph::new();
        let params = model.store.bind(&mut g);
        let out = model.forward(&mut g, &params, &samples, &text_ids)?;
        let loss_var = g.cross_entropy(out.logits, &labels)?;
        let loss = g.data(loss_var)[0];
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                step,
                what: format!("training loss {loss}"),
            });
        }
        let train_acc = accuracy(g.data(out.logits), classes, &labels);

        if step % config.log_every == 0 || step == config.steps {
            let record = TraceRecord {
                step,
                loss,
                train_acc,
                eval_acc: evaluate(model, eval_set)?,
                lr: lr_at(step, &state)?,
                gate_abs_tanh: model.gate_abs_tanh()?,
                m: model.schedule.depth(),
                gating: config.gating,
                seed: config.seed,
                task: config.task,
            };
            info!(
                "step {step:>5} loss {loss:.4} train {train_acc:.3} eval {:.3} lr {:.2e} |tanh a| {:.4}",
                record.eval_acc,
                record.lr,
                record.mean_gate_abs_tanh()
            );
            sink(&record)?;
            trace.push(record);
        }
        if step == config.steps {
            break;
        }

        g.backward(loss_var)?;
        let grads: Vec<Option<&[f64]>> = params.vars().iter().map(|&v| g.grad(v)).collect();
        let lr = adam_step(&mut model.store, &grads, &mut state)?;
        debug!("step {step} lr {lr:.3e}");
    }
    Ok(trace)
}
