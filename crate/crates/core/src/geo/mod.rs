//! Synthetic scenes, the mock geometric encoder, and multi-level layer sampling.

mod encoder;
mod scene;
mod schedule;

pub use encoder::{cross_frame_dependence, encode, encode_frames, EncoderParams, FeatureStack, DEPTH_CHANNEL};
pub use scene::{
    generate_scene, read_scene_dump, render_scene, write_scene_dump, ObjectMark, SceneConfig, SceneObject,
    SyntheticScene,
};
pub use schedule::{sample_layers, InjectionSchedule};
