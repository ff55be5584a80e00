use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub num_objects: usize,
    /// `(near, far)` in metres. The background sits at `far`.
    pub depth_range: (f64, f64),
    /// Side of the square cell used for object marks, in pixels. Usually `2·P_v`,
    /// the footprint of one merged visual token.
    pub mark_cell: usize,
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::InvalidArgument("scene needs at least one frame".into()));
        }
        if self.height < 32 || self.width < 32 {
            return Err(Error::InvalidArgument(format!(
                "scene must be at least 32x32, got {}x{}",
                self.height, self.width
            )));
        }
        if self.num_objects == 0 {
            return Err(Error::InvalidArgument("scene needs at least one object".into()));
        }
        let (near, far) = self.depth_range;
        if !(near > 0.0 && far > near && far.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "degenerate depth range ({near}, {far})"
            )));
        }
        if self.mark_cell == 0 || self.mark_cell > self.height.min(self.width) {
            return Err(Error::InvalidArgument(format!("bad mark cell {}", self.mark_cell)));
        }
        Ok(())
    }
}

/// Axis-aligned flat-coloured rectangle. `top`/`left` are its frame-0 position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: usize,
    pub top: i64,
    pub left: i64,
    pub height: usize,
    pub width: usize,
    pub depth: f64,
    pub color: [f64; 3],
}

impl SceneObject {
    /// Whether pixel `(y, x)` of frame `f` lies inside the object after camera motion.
    pub fn covers(&self, f: usize, motion: (i64, i64), y: usize, x: usize) -> bool {
        let top = self.top + motion.0 * f as i64;
        let left = self.left + motion.1 * f as i64;
        let (y, x) = (y as i64, x as i64);
        y >= top && y < top + self.height as i64 && x >= left && x < left + self.width as i64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectMark {
    pub frame: usize,
    pub row: usize,
    pub col: usize,
    pub object: usize,
}

/// Multi-frame scene with per-pixel depth.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    /// `[N, H, W, 3]`, values in `[0, 1]`.
    pub frames: Tensor,
    /// `[N, H, W]`, metres.
    pub depth: Tensor,
    pub object_marks: Vec<ObjectMark>,
    pub objects: Vec<SceneObject>,
    /// Per-frame pixel shift `(dy, dx)` shared by every object.
    pub motion: (i64, i64),
    pub mark_cell: usize,
    pub seed: u64,
}

impl SyntheticScene {
    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn depth_at(&self, frame: usize, y: usize, x: usize) -> f64 {
        let (h, w) = (self.height(), self.width());
        self.depth.data()[(frame * h + y) * w + x]
    }

    /// Pixel at the centre of mark cell `(row, col)`.
    pub fn mark_pixel(&self, row: usize, col: usize) -> (usize, usize) {
        (row * self.mark_cell + self.mark_cell / 2, col * self.mark_cell + self.mark_cell / 2)
    }

    pub fn marks_for(&self, object: usize) -> impl Iterator<Item = &ObjectMark> {
        self.object_marks.iter().filter(move |m| m.object == object)
    }
}

/// Random scene: objects anywhere in the frame, possibly overlapping.
pub fn generate_scene(config: &SceneConfig, seed: u64) -> Result<SyntheticScene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (near, far) = config.depth_range;
    let max_step = (config.height.min(config.width) / 16) as i64;
    let motion = (
        rng.random_range(-max_step..=max_step),
        rng.random_range(-max_step..=max_step),
    );
    let depths = distinct_depths(&mut rng, config.num_objects, near, far);
    let objects = depths
        .into_iter()
        .enumerate()
        .map(|(id, depth)| {
            let height = rng.random_range(config.height / 5..=config.height / 2);
            let width = rng.random_range(config.width / 5..=config.width / 2);
            SceneObject {
                id,
                top: rng.random_range(0..=(config.height - height) as i64),
                left: rng.random_range(0..=(config.width - width) as i64),
                height,
                width,
                depth,
                color: [rng.random(), rng.random(), rng.random()],
            }
        })
        .collect();
    let background = rng.random_range(0.2..0.8);
    Ok(render_scene(config, objects, motion, [background; 3], seed))
}

fn distinct_depths<R: Rng>(rng: &mut R, count: usize, near: f64, far: f64) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::with_capacity(count);
    while out.len() < count {
        let d = rng.random_range(near..far);
        if out.iter().all(|&o| (o - d).abs() > 1e-6) {
            out.push(d);
        }
    }
    out
}

/// Paint `objects` over a flat background, farthest first, so nearer objects win.
/// Every object gets a mark in each frame where some mark-cell centre shows it.
pub fn render_scene(
    config: &SceneConfig,
    objects: Vec<SceneObject>,
    motion: (i64, i64),
    background: [f64; 3],
    seed: u64,
) -> SyntheticScene {
    let (n, h, w) = (config.frames, config.height, config.width);
    let far = config.depth_range.1;
    let mut frames = vec![0.0; n * h * w * 3];
    let mut depth = vec![far; n * h * w];
    for px in frames.chunks_mut(3) {
        px.copy_from_slice(&background);
    }
    let mut order: Vec<&SceneObject> = objects.iter().collect();
    order.sort_by(|a, b| b.depth.total_cmp(&a.depth));
    for f in 0..n {
        for obj in &order {
            let top = (obj.top + motion.0 * f as i64).max(0) as usize;
            let left = (obj.left + motion.1 * f as i64).max(0) as usize;
            let bottom = (obj.top + motion.0 * f as i64 + obj.height as i64).clamp(0, h as i64) as usize;
            let right = (obj.left + motion.1 * f as i64 + obj.width as i64).clamp(0, w as i64) as usize;
            for y in top..bottom {
                for x in left..right {
                    let p = (f * h + y) * w + x;
                    // equal depths keep the earlier paint; farthest-first order handles the rest
                    if obj.depth <= depth[p] {
                        depth[p] = obj.depth;
                        frames[p * 3..p * 3 + 3].copy_from_slice(&obj.color);
                    }
                }
            }
        }
    }
    let mut scene = SyntheticScene {
        frames: Tensor::new(vec![n, h, w, 3], frames).expect("consistent extents"),
        depth: Tensor::new(vec![n, h, w], depth).expect("consistent extents"),
        object_marks: Vec::new(),
        objects,
        motion,
        mark_cell: config.mark_cell,
        seed,
    };
    scene.object_marks = compute_marks(&scene);
    scene
}

fn compute_marks(scene: &SyntheticScene) -> Vec<ObjectMark> {
    let cell = scene.mark_cell;
    let (rows, cols) = (scene.height() / cell, scene.width() / cell);
    let mut marks = Vec::new();
    for f in 0..scene.num_frames() {
        for obj in &scene.objects {
            let (cy, cx) = (
                obj.top + scene.motion.0 * f as i64 + obj.height as i64 / 2,
                obj.left + scene.motion.1 * f as i64 + obj.width as i64 / 2,
            );
            let best = (0..rows)
                .flat_map(|r| (0..cols).map(move |c| (r, c)))
                .filter(|&(r, c)| {
                    let (y, x) = scene.mark_pixel(r, c);
                    obj.covers(f, scene.motion, y, x) && scene.depth_at(f, y, x) == obj.depth
                })
                .min_by_key(|&(r, c)| {
                    let (y, x) = scene.mark_pixel(r, c);
                    (y as i64 - cy).abs() + (x as i64 - cx).abs()
                });
            if let Some((row, col)) = best {
                marks.push(ObjectMark {
                    frame: f,
                    row,
                    col,
                    object: obj.id,
                });
            }
        }
    }
    marks
}

const DUMP_MAGIC: &[u8; 4] = b"GSCN";

/// Debug dump: `b"GSCN"`, then `u64` N, H, W, seed (little-endian), then
/// `N·H·W·3` frame values and `N·H·W` depth values as little-endian `f64`.
pub fn write_scene_dump<W: Write>(mut w: W, scene: &SyntheticScene) -> Result<()> {
    w.write_all(DUMP_MAGIC)?;
    for v in [
        scene.num_frames() as u64,
        scene.height() as u64,
        scene.width() as u64,
        scene.seed,
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    for v in scene.frames.data().iter().chain(scene.depth.data()) {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Read back a dump as `(frames, depth, seed)`.
pub fn read_scene_dump<R: Read>(mut r: R) -> Result<(Tensor, Tensor, u64)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != DUMP_MAGIC {
        return Err(Error::Format("not a scene dump".into()));
    }
    let mut header = [0u64; 4];
    let mut b = [0u8; 8];
    for v in &mut header {
        r.read_exact(&mut b)?;
        *v = u64::from_le_bytes(b);
    }
    let [n, h, w, seed] = header.map(|v| v as usize);
    let mut read = |count: usize| -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            r.read_exact(&mut b)?;
            out.push(f64::from_le_bytes(b));
        }
        Ok(out)
    };
    let frames = Tensor::new(vec![n, h, w, 3], read(n * h * w * 3)?)?;
    let depth = Tensor::new(vec![n, h, w], read(n * h * w)?)?;
    Ok((frames, depth, seed as u64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config() -> SceneConfig {
        SceneConfig {
            frames: 2,
            height: 64,
            width: 64,
            num_objects: 2,
            depth_range: (1.0, 5.0),
            mark_cell: 16,
        }
    }

    #[test]
    fn same_seed_same_scene() {
        let a = generate_scene(&config(), 7).unwrap();
        let b = generate_scene(&config(), 7).unwrap();
        assert!(a.frames.bitwise_eq(&b.frames));
        assert!(a.depth.bitwise_eq(&b.depth));
        assert_eq!(a.object_marks, b.object_marks);
    }

    #[test]
    fn depth_stays_in_range() {
        for seed in 0..20 {
            let s = generate_scene(&config(), seed).unwrap();
            let d = s.depth.data();
            assert!(d.iter().all(|&v| (1.0..=5.0).contains(&v)));
            assert!(s.frames.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn rejects_degenerate_configs() {
        let mut c = config();
        c.num_objects = 0;
        assert!(generate_scene(&c, 0).is_err());
        let mut c = config();
        c.depth_range = (3.0, 3.0);
        assert!(generate_scene(&c, 0).is_err());
        let mut c = config();
        c.height = 16;
        assert!(generate_scene(&c, 0).is_err());
    }

    #[test]
    fn dump_round_trip() {
        let s = generate_scene(&config(), 3).unwrap();
        let mut buf = Vec::new();
        write_scene_dump(&mut buf, &s).unwrap();
        assert_eq!(buf.len(), 4 + 32 + 8 * (2 * 64 * 64 * 4));
        let (frames, depth, seed) = read_scene_dump(buf.as_slice()).unwrap();
        assert!(frames.bitwise_eq(&s.frames));
        assert!(depth.bitwise_eq(&s.depth));
        assert_eq!(seed, 3);
    }
}
