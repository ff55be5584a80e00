use guide::geo::{
    cross_frame_dependence, encode, generate_scene, sample_layers, EncoderParams, SceneConfig, DEPTH_CHANNEL,
};
use proptest::prelude::*;

fn scene_config(frames: usize, side: usize) -> SceneConfig {
    SceneConfig {
        frames,
        height: side,
        width: side,
        num_objects: 3,
        depth_range: (1.0, 5.0),
        mark_cell: 16,
    }
}

#[test]
fn reference_schedule() {
    let s = sample_layers(24, 6).unwrap();
    assert_eq!(s.sampled, vec![8, 11, 14, 17, 20, 23]);
    assert_eq!(s.anchor, 24);
    assert!(s.adjustment.is_none());
}

proptest! {
    #[test]
    fn schedule_invariants(k in 8usize..64, frac in 0.0f64..1.0) {
        let max_m = k - k / 4 - 1;
        let m = 1 + ((max_m - 1) as f64 * frac) as usize;
        let s = sample_layers(k, m).unwrap();
        prop_assert_eq!(s.anchor, k);
        prop_assert!(!s.sampled.is_empty() && s.sampled.len() <= m);
        prop_assert!(s.sampled.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(s.sampled.iter().all(|&v| v > k / 4 && v < k));
        prop_assert!(!s.sampled.contains(&k));
        prop_assert!(sample_layers(k, max_m + 1).is_err());
    }

    #[test]
    fn scenes_are_well_formed(seed in any::<u64>(), frames in 1usize..4) {
        let cfg = scene_config(frames, 64);
        let s = generate_scene(&cfg, seed).unwrap();
        prop_assert_eq!(s.frames.shape(), &[frames, 64, 64, 3]);
        prop_assert_eq!(s.depth.shape(), &[frames, 64, 64]);
        prop_assert!(s.frames.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(s.depth.data().iter().all(|v| (1.0..=5.0).contains(v)));
        for mark in &s.object_marks {
            let (y, x) = s.mark_pixel(mark.row, mark.col);
            let o = &s.objects[mark.object];
            prop_assert!((s.depth_at(mark.frame, y, x) - o.depth).abs() < 1e-12);
        }
    }

    #[test]
    fn depth_channel_is_patch_mean(seed in any::<u64>()) {
        let s = generate_scene(&scene_config(2, 64), seed).unwrap();
        let p = 8;
        let stack = encode(&s, &EncoderParams { layers: 8, channels: 4, patch: p }, 7).unwrap();
        let f = stack.layer(3).unwrap();
        let (gh, gw, c) = (8, 8, 4);
        for (fr, r, q) in [(0, 0, 0), (1, 3, 5), (0, 7, 7)] {
            let mut mean = 0.0;
            for y in r * p..(r + 1) * p {
                for x in q * p..(q + 1) * p {
                    mean += s.depth_at(fr, y, x);
                }
            }
            mean /= (p * p) as f64;
            let got = f.data()[((fr * gh + r) * gw + q) * c + DEPTH_CHANNEL];
            prop_assert!((got - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn cross_frame_dependence_grows_with_depth() {
    for seed in 0..4 {
        let s = generate_scene(&scene_config(3, 64), seed).unwrap();
        let params = EncoderParams { layers: 12, channels: 8, patch: 8 };
        let d = cross_frame_dependence(&s.frames, &s.depth, &params, seed).unwrap();
        assert_eq!(d.len(), 12);
        assert_eq!(d[0], 0.0, "layer 1 must be per-frame");
        assert!((d[11] - 0.5).abs() < 1e-12, "layer K must be fully shared: {}", d[11]);
        for w in d.windows(2) {
            assert!(w[1] >= w[0] - 1e-12, "not monotone: {d:?}");
        }
    }
}

#[test]
fn encoder_is_deterministic_and_seeded() {
    let s = generate_scene(&scene_config(2, 64), 3).unwrap();
    let p = EncoderParams { layers: 8, channels: 4, patch: 16 };
    assert_eq!(encode(&s, &p, 1).unwrap(), encode(&s, &p, 1).unwrap());
    assert_ne!(encode(&s, &p, 1).unwrap(), encode(&s, &p, 2).unwrap());
}
