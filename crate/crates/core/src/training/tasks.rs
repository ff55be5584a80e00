//! Synthetic spatial question answering.
//!
//! Every scene holds two or three flat rectangles, one per image quadrant,
//! each painted in its identity colour (object A reddish, B bluish, C
//! greenish). Colours, sizes and positions are drawn independently of depth,
//! so the pixels carry no depth cue and the answer has to come from the
//! geometric stream.

use std::fmt;
use std::str::FromStr;

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{render_scene, SceneConfig, SceneObject, SyntheticScene};

pub const BOS: usize = 0;
pub const Q_NEARER: usize = 1;
pub const Q_ORDER: usize = 2;
pub const Q_COUNT: usize = 3;
pub const OBJ_A: usize = 4;
pub const OBJ_B: usize = 5;
pub const OBJ_C: usize = 6;
pub const ANS: usize = 7;
pub const VOCAB_SIZE: usize = 8;

/// Object orderings for `depth_order`, nearest first. The label is the index here.
pub const ORDERINGS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFamily {
    /// Is A (label 0) or B (label 1) nearer?
    NearerOfTwo,
    /// Which of the six nearest-first orderings of A, B, C holds?
    DepthOrder,
    /// How many distinct depths among A, B, C (label = count − 1)?
    ObjectCount,
}

impl TaskFamily {
    pub const ALL: [TaskFamily; 3] = [TaskFamily::NearerOfTwo, TaskFamily::DepthOrder, TaskFamily::ObjectCount];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskFamily::NearerOfTwo => "nearer_of_two",
            TaskFamily::DepthOrder => "depth_order",
            TaskFamily::ObjectCount => "object_count",
        }
    }

    pub fn num_objects(self) -> usize {
        match self {
            TaskFamily::NearerOfTwo => 2,
            _ => 3,
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            TaskFamily::NearerOfTwo => 2,
            TaskFamily::DepthOrder => 6,
            TaskFamily::ObjectCount => 3,
        }
    }

    /// Question tokens; the answer is read at the final `ANS` position.
    pub fn question(self) -> Vec<usize> {
        match self {
            TaskFamily::NearerOfTwo => vec![BOS, Q_NEARER, OBJ_A, OBJ_B, ANS],
            TaskFamily::DepthOrder => vec![BOS, Q_ORDER, OBJ_A, OBJ_B, OBJ_C, ANS],
            TaskFamily::ObjectCount => vec![BOS, Q_COUNT, OBJ_A, OBJ_B, OBJ_C, ANS],
        }
    }

    pub fn text_len(self) -> usize {
        self.question().len()
    }
}

impl fmt::Display for TaskFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskFamily::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown task family {s:?}")))
    }
}

#[derive(Clone, Debug)]
pub struct TaskInstance {
    pub scene: SyntheticScene,
    pub question: Vec<usize>,
    pub label: usize,
}

/// Depth of each object read at its frame-0 mark: the pixel at the centre of
/// a mark cell that shows the object.
pub fn marked_depths(scene: &SyntheticScene, objects: usize) -> Result<Vec<f64>> {
    (0..objects)
        .map(|id| {
            let mark = scene
                .marks_for(id)
                .find(|m| m.frame == 0)
                .ok_or_else(|| Error::InvalidArgument(format!("object {id} has no frame-0 mark")))?;
            let (y, x) = scene.mark_pixel(mark.row, mark.col);
            Ok(scene.depth_at(0, y, x))
        })
        .collect()
}

/// Recompute the answer from the depth map alone.
pub fn brute_force_label(family: TaskFamily, scene: &SyntheticScene) -> Result<usize> {
    let d = marked_depths(scene, family.num_objects())?;
    Ok(match family {
        TaskFamily::NearerOfTwo => usize::from(d[1] < d[0]),
        TaskFamily::DepthOrder => {
            let mut order = [0, 1, 2];
            order.sort_by(|&a, &b| d[a].total_cmp(&d[b]));
            ORDERINGS.iter().position(|o| *o == order).expect("all orderings listed")
        }
        TaskFamily::ObjectCount => {
            let mut distinct: Vec<f64> = Vec::new();
            for v in d {
                if !distinct.contains(&v) {
                    distinct.push(v);
                }
            }
            distinct.len() - 1
        }
    })
}

/// Depths realising `label`, with neighbouring levels at least `gap` apart.
fn depths_for_label<R: Rng>(family: TaskFamily, label: usize, near: f64, far: f64, rng: &mut R) -> Vec<f64> {
    // keep clear of the background, which sits at `far`
    let top = far - 0.5 * (far - near) / 8.0;
    let gap = (far - near) / 8.0;
    let levels = |count: usize, rng: &mut R| -> Vec<f64> {
        // `count` sorted values in [near, top) with pairwise spacing ≥ gap
        let slack = (top - near) - gap * (count - 1) as f64;
        let mut u: Vec<f64> = (0..count).map(|_| rng.random_range(0.0..slack)).collect();
        u.sort_by(f64::total_cmp);
        u.iter().enumerate().map(|(i, v)| near + v + gap * i as f64).collect()
    };
    match family {
        TaskFamily::NearerOfTwo => {
            let l = levels(2, rng);
            if label == 0 {
                l
            } else {
                vec![l[1], l[0]]
            }
        }
        TaskFamily::DepthOrder => {
            let l = levels(3, rng);
            let mut d = vec![0.0; 3];
            for (rank, &obj) in ORDERINGS[label].iter().enumerate() {
                d[obj] = l[rank];
            }
            d
        }
        TaskFamily::ObjectCount => {
            let l = levels(label + 1, rng);
            // every level used at least once, then shuffle which object gets which
            let mut d: Vec<f64> = (0..3).map(|i| l[i.min(label)]).collect();
            d.shuffle(rng);
            d
        }
    }
}

fn identity_color<R: Rng>(id: usize, rng: &mut R) -> [f64; 3] {
    let hi = rng.random_range(0.7..1.0);
    let lo = [rng.random_range(0.0..0.3), rng.random_range(0.0..0.3)];
    match id {
        0 => [hi, lo[0], lo[1]],
        1 => [lo[0], lo[1], hi],
        _ => [lo[0], hi, lo[1]],
    }
}

fn build_instance(family: TaskFamily, label: usize, config: &SceneConfig, seed: u64) -> Result<TaskInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (near, far) = config.depth_range;
    let depths = depths_for_label(family, label, near, far, &mut rng);
    let (qh, qw) = (config.height / 2, config.width / 2);
    let mut quadrants = [(0, 0), (0, 1), (1, 0), (1, 1)];
    quadrants.shuffle(&mut rng);
    let min_h = (config.mark_cell + 1).max(qh * 3 / 4).min(qh);
    let min_w = (config.mark_cell + 1).max(qw * 3 / 4).min(qw);
    let objects = depths
        .iter()
        .enumerate()
        .map(|(id, &depth)| {
            let (qr, qc) = quadrants[id];
            let height = rng.random_range(min_h..=qh);
            let width = rng.random_range(min_w..=qw);
            SceneObject {
                id,
                top: (qr * qh + rng.random_range(0..=qh - height)) as i64,
                left: (qc * qw + rng.random_range(0..=qw - width)) as i64,
                height,
                width,
                depth,
                color: identity_color(id, &mut rng),
            }
        })
        .collect();
    let step = (config.height.min(config.width) / 32) as i64;
    let motion = (rng.random_range(-step..=step), rng.random_range(-step..=step));
    let grey = rng.random_range(0.35..0.6);
    let scene = render_scene(config, objects, motion, [grey; 3], seed);
    let check = brute_force_label(family, &scene)?;
    if check != label {
        return Err(Error::InvalidArgument(format!(
            "generated {family} scene {seed} has label {label} but its depth map says {check}"
        )));
    }
    Ok(TaskInstance {
        scene,
        question: family.question(),
        label,
    })
}

/// `batch` labelled scenes. Labels are dealt round-robin before shuffling, so
/// classes are as balanced as the batch size allows.
pub fn make_task_batch(family: TaskFamily, batch: usize, seed: u64, scene: &SceneConfig) -> Result<Vec<TaskInstance>> {
    if batch == 0 {
        return Err(Error::config("batch", "must be at least 1"));
    }
    let config = SceneConfig {
        num_objects: family.num_objects(),
        ..scene.clone()
    };
    config.validate()?;
    if config.height / 2 <= config.mark_cell || config.width / 2 <= config.mark_cell {
        return Err(Error::config(
            "H",
            format!(
                "{}x{} quadrants cannot hold a {}px mark cell",
                config.height / 2,
                config.width / 2,
                config.mark_cell
            ),
        ));
    }
    if batch < 8 {
        warn!("batch of {batch} is too small to balance {} classes; skipping the balance check", family.num_classes());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = (0..batch).map(|i| i % family.num_classes()).collect();
    labels.shuffle(&mut rng);
    labels
        .into_iter()
        .map(|label| build_instance(family, label, &config, rng.random()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene_config() -> SceneConfig {
        SceneConfig {
            frames: 2,
            height: 128,
            width: 128,
            num_objects: 2,
            depth_range: (1.0, 5.0),
            mark_cell: 32,
        }
    }

    #[test]
    fn nearer_with_fixed_depths() {
        let cfg = scene_config();
        let objects = vec![
            SceneObject {
                id: 0,
                top: 4,
                left: 4,
                height: 50,
                width: 50,
                depth: 1.0,
                color: [1.0, 0.0, 0.0],
            },
            SceneObject {
                id: 1,
                top: 70,
                left: 70,
                height: 50,
                width: 50,
                depth: 4.0,
                color: [0.0, 0.0, 1.0],
            },
        ];
        let scene = render_scene(&cfg, objects, (0, 0), [0.5; 3], 0);
        assert_eq!(brute_force_label(TaskFamily::NearerOfTwo, &scene).unwrap(), 0);
    }

    #[test]
    fn batches_are_reproducible_and_balanced() {
        for family in TaskFamily::ALL {
            let a = make_task_batch(family, 24, 5, &scene_config()).unwrap();
            let b = make_task_batch(family, 24, 5, &scene_config()).unwrap();
            assert!(a.iter().zip(&b).all(|(x, y)| x.label == y.label && x.scene.frames.bitwise_eq(&y.scene.frames)));
            let k = family.num_classes();
            for c in 0..k {
                assert_eq!(a.iter().filter(|t| t.label == c).count(), 24 / k);
            }
        }
    }

    #[test]
    fn names_round_trip() {
        for family in TaskFamily::ALL {
            assert_eq!(family.as_str().parse::<TaskFamily>().unwrap(), family);
            assert_eq!(serde_json::to_string(&family).unwrap(), format!("\"{family}\""));
        }
    }
}
