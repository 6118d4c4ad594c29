//! Synthetic scenes, their on-disk format, and the AP evaluator.

mod eval;
mod io;
mod mask;
mod scene;

pub use eval::{evaluate, interpolated_ap, iou_thresholds, EvalReport, PredMask, Prediction};
pub use io::{read_dataset, read_manifest, read_scene, write_dataset, Dataset, Manifest, ManifestEntry};
pub use mask::{upsample_bilinear, BinaryMask};
pub use scene::{generate_scene, generate_scenes, scene_seed, Instance, Scene, SceneConfig, ShapeClass};
