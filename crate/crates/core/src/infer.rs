//! Inference: scored instances from the last decoder stage, PGM export and
//! dataset evaluation.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::{evaluate, upsample_bilinear, EvalReport, PredMask, Prediction, Scene, ShapeClass};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::geometry::BoxCxCyWh;
use crate::model::Model;
use crate::numeric::kernels::sigmoid;
use crate::numeric::{Real, Tape, Tensor};
use crate::params::ParamStore;

/// One detected instance with its mask on the mask grid.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectedInstance {
    pub query: usize,
    pub class: usize,
    pub score: Real,
    pub bbox: BoxCxCyWh,
    /// Row-major probabilities, `grid_height x grid_width`.
    pub mask: Vec<Real>,
    pub grid_height: usize,
    pub grid_width: usize,
}

impl DetectedInstance {
    pub fn to_prediction(&self) -> Prediction {
        Prediction {
            class: self.class,
            score: self.score,
            bbox: self.bbox,
            mask: PredMask::Grid {
                probs: self.mask.clone(),
                height: self.grid_height,
                width: self.grid_width,
            },
        }
    }

    /// Mask probabilities resized to `size x size`.
    pub fn full_mask(&self, size: usize) -> Vec<Real> {
        upsample_bilinear(&self.mask, self.grid_height, self.grid_width, size / self.grid_height)
    }
}

/// Instances scoring at least `score_threshold`, best `top_k` first (ties
/// by query index). A query's score is its highest class probability.
pub fn detect(
    model: &Model,
    store: &ParamStore,
    image: &Tensor,
    score_threshold: Real,
    top_k: usize,
) -> Result<Vec<DetectedInstance>> {
    let tape = Tape::new();
    let p = store.bind_frozen(&tape);
    let out = model.forward(&p, image)?;
    let last = out.stages.len() - 1;
    let pred = &out.stages[last];
    let logits = pred.class_logits.value();
    let boxes = pred.boxes.value();
    let nc = logits.shape()[1];
    let mut scored: Vec<(usize, usize, Real)> = logits
        .data()
        .chunks(nc)
        .enumerate()
        .map(|(q, row)| {
            let (class, &best) = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                .expect("at least one class");
            (q, class, sigmoid(best))
        })
        .filter(|&(_, _, s)| s >= score_threshold)
        .collect();
    scored.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
    scored.truncate(top_k);
    let (gh, gw) = (out.mask_feature.height, out.mask_feature.width);
    scored
        .into_iter()
        .map(|(q, class, score)| {
            let b = &boxes.data()[q * 4..q * 4 + 4];
            Ok(DetectedInstance {
                query: q,
                class,
                score,
                bbox: BoxCxCyWh::new(b[0], b[1], b[2], b[3]),
                mask: model.mask(&p, &out, last, q)?.probs.value().data().to_vec(),
                grid_height: gh,
                grid_width: gw,
            })
        })
        .collect()
}

/// Loads a `[3, H, W]` image from a tensor file (`.iatw`) or a binary PPM
/// (`P6`, maxval 255), checking that both extents are multiples of 64.
pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let bytes = fs::read(path.as_ref())?;
    let image = if bytes.starts_with(b"P6") {
        parse_ppm(&bytes)?
    } else {
        Tensor::read_from(&mut bytes.as_slice())?
    };
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 || shape[1] == 0 || shape[1] % 64 != 0 || shape[2] == 0 || shape[2] % 64 != 0 {
        return Err(Error::Invalid(format!(
            "image shape {shape:?}: expected [3, H, W] with H and W multiples of 64"
        )));
    }
    Ok(image)
}

fn parse_ppm(bytes: &[u8]) -> Result<Tensor> {
    let bad = |m: &str| Error::Format(format!("PPM: {m}"));
    let mut fields = Vec::new();
    let mut pos = 2;
    while fields.len() < 3 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        let text = std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header"))?;
        fields.push(text.parse::<usize>().map_err(|_| bad("header"))?);
    }
    let (w, h, max) = (fields[0], fields[1], fields[2]);
    if max != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    let pixels = bytes.get(pos + 1..).ok_or_else(|| bad("truncated"))?;
    if pixels.len() != 3 * h * w {
        return Err(bad("pixel data does not match the header"));
    }
    Tensor::new(
        vec![3, h, w],
        (0..3 * h * w)
            .map(|i| {
                let (c, p) = (i / (h * w), i % (h * w));
                pixels[3 * p + c] as Real / 255.0
            })
            .collect(),
    )
}

/// Binary 8-bit PGM of values in [0, 1] scaled to 0..=255.
pub fn write_pgm(path: impl AsRef<Path>, height: usize, width: usize, values: &[Real]) -> Result<()> {
    if values.len() != height * width {
        return Err(Error::Invalid(format!(
            "{} values for a {height}x{width} image",
            values.len()
        )));
    }
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend(values.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, bytes)?;
    Ok(())
}

/// Writes `instance_NN.pgm` per instance plus `instances.txt` with one
/// `index class score cx cy w h file` line per instance.
pub fn write_instances(dir: impl AsRef<Path>, image_size: usize, instances: &[DetectedInstance]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut sidecar = String::from("# index class score cx cy w h mask\n");
    for (i, inst) in instances.iter().enumerate() {
        let file = format!("instance_{i:02}.pgm");
        write_pgm(dir.join(&file), image_size, image_size, &inst.full_mask(image_size))?;
        let class = ShapeClass::from_index(inst.class).map_or_else(|| inst.class.to_string(), |c| c.name().into());
        let b = inst.bbox;
        writeln!(
            sidecar,
            "{i} {class} {:.6} {:.6} {:.6} {:.6} {:.6} {file}",
            inst.score, b.cx, b.cy, b.w, b.h
        )
        .expect("writing to a string");
    }
    fs::write(dir.join("instances.txt"), sidecar)?;
    Ok(())
}

/// Detects instances in every scene and evaluates them against the
/// annotations.
pub fn evaluate_model(
    model: &Model,
    store: &ParamStore,
    scenes: &[Scene],
    score_threshold: Real,
    top_k: usize,
    exec: Exec,
) -> Result<EvalReport> {
    let predictions = exec
        .map(scenes, |s| {
            Ok(detect(model, store, &s.image, score_threshold, top_k)?
                .iter()
                .map(DetectedInstance::to_prediction)
                .collect())
        })
        .into_iter()
        .collect::<Result<Vec<Vec<Prediction>>>>()?;
    let truth: Vec<_> = scenes.iter().map(|s| s.instances.clone()).collect();
    evaluate(&predictions, &truth, model.num_classes)
}
