//! On-disk dataset layout.
//!
//! ```text
//! DIR/manifest.json          {format, version, height, width, base_seed, scenes: [{name, seed}]}
//! DIR/<name>.iatw            image tensor [3, H, W]
//! DIR/<name>.json            {instances: [{class, box: [cx, cy, w, h], mask_rle: [..]}]}
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::mask::BinaryMask;
use super::scene::{Instance, Scene, ShapeClass};
use crate::error::{Error, Result};
use crate::geometry::BoxCxCyWh;
use crate::numeric::{Real, Tensor};

const FORMAT: &str = "iat-scenes";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub height: usize,
    pub width: usize,
    pub base_seed: u64,
    pub scenes: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct AnnotationFile {
    instances: Vec<AnnotationRecord>,
}

#[derive(Serialize, Deserialize)]
struct AnnotationRecord {
    class: ShapeClass,
    #[serde(rename = "box")]
    bbox: [Real; 4],
    mask_rle: Vec<u32>,
}

pub struct Dataset {
    pub manifest: Manifest,
    pub scenes: Vec<Scene>,
}

fn scene_name(i: usize) -> String {
    format!("scene_{i:05}")
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn write_dataset(dir: impl AsRef<Path>, base_seed: u64, scenes: &[(u64, Scene)]) -> Result<Manifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let (height, width) = scenes.first().map_or((0, 0), |(_, s)| (s.height(), s.width()));
    let mut entries = Vec::with_capacity(scenes.len());
    for (i, (seed, scene)) in scenes.iter().enumerate() {
        let name = scene_name(i);
        scene.image.save(dir.join(format!("{name}.iatw")))?;
        let ann = AnnotationFile {
            instances: scene
                .instances
                .iter()
                .map(|inst| AnnotationRecord {
                    class: inst.class,
                    bbox: inst.bbox.to_array(),
                    mask_rle: inst.mask.to_rle(),
                })
                .collect(),
        };
        write_json(&dir.join(format!("{name}.json")), &ann)?;
        entries.push(ManifestEntry { name, seed: *seed });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        height,
        width,
        base_seed,
        scenes: entries,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let text = fs::read_to_string(dir.as_ref().join("manifest.json"))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(Error::Format(format!(
            "unsupported dataset {} v{}",
            manifest.format, manifest.version
        )));
    }
    Ok(manifest)
}

pub fn read_scene(dir: impl AsRef<Path>, name: &str) -> Result<Scene> {
    let dir = dir.as_ref();
    let image = Tensor::load(dir.join(format!("{name}.iatw")))?;
    let [3, h, w] = *image.shape() else {
        return Err(Error::Format(format!(
            "{name}: image {:?} is not [3,H,W]",
            image.shape()
        )));
    };
    let ann: AnnotationFile = serde_json::from_str(&fs::read_to_string(dir.join(format!("{name}.json")))?)?;
    let instances = ann
        .instances
        .into_iter()
        .map(|r| {
            Ok(Instance {
                class: r.class,
                bbox: BoxCxCyWh::from_array(r.bbox),
                mask: BinaryMask::from_rle(h, w, &r.mask_rle)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Scene { image, instances })
}

pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let scenes = manifest
        .scenes
        .iter()
        .map(|e| read_scene(dir, &e.name))
        .collect::<Result<_>>()?;
    Ok(Dataset { manifest, scenes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::scene::{generate_scenes, SceneConfig};
    use crate::exec::Exec;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let scenes = generate_scenes(3, 5, &SceneConfig::default(), Exec::Sequential).unwrap();
        write_dataset(dir.path(), 3, &scenes).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.manifest.scenes.len(), 5);
        for ((seed, s), (e, b)) in scenes.iter().zip(back.manifest.scenes.iter().zip(&back.scenes)) {
            assert_eq!(*seed, e.seed);
            assert_eq!(s, b);
        }
    }
}
