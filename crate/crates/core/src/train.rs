//! Batched training with Adam, checkpoints and the JSON-lines loss log.
//!
//! Every scene of a batch is differentiated on its own tape (in parallel
//! when enabled) and the per-scene gradients are summed in batch order, so
//! results do not depend on the execution strategy.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{scene_seed, upsample_bilinear, BinaryMask, Scene};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::iat::MASK_STRIDE;
use crate::matching::{hungarian, matching_cost, total_loss, LossBreakdown, LossConfig, Target};
use crate::model::{check_compatible, Model};
use crate::numeric::tensor::read_u32;
use crate::numeric::{Real, Tape, Tensor};
use crate::params::ParamStore;

/// Loss targets of a scene: classes, boxes and block-max masks on the mask
/// grid.
pub fn prepare_targets(scene: &Scene) -> Result<Vec<Target>> {
    scene
        .instances
        .iter()
        .map(|inst| {
            Ok(Target {
                class: inst.class.index(),
                bbox: inst.bbox,
                mask: inst.mask.downsample(MASK_STRIDE)?.to_tensor(),
            })
        })
        .collect()
}

/// Loss breakdown and parameter gradients of one scene.
pub fn scene_gradients(
    model: &Model,
    store: &ParamStore,
    image: &Tensor,
    targets: &[Target],
    loss: &LossConfig,
    norm: Real,
) -> Result<(LossBreakdown, Vec<Tensor>)> {
    let tape = Tape::new();
    let p = store.bind(&tape);
    let out = model.forward(&p, image)?;
    let l = total_loss(&out.stages, &model.masks(&p, &out), targets, loss, norm)?;
    let grads = tape.backward(l.total)?;
    Ok((l.breakdown, store.collect_grads(&p, &grads)))
}

/// Summed loss breakdown and gradients over a batch. Detection and mask
/// terms are normalized by the batch's total target count.
pub fn batch_gradients(
    model: &Model,
    store: &ParamStore,
    batch: &[(&Tensor, &[Target])],
    loss: &LossConfig,
    exec: Exec,
) -> Result<(LossBreakdown, Vec<Tensor>)> {
    let norm = batch.iter().map(|(_, t)| t.len()).sum::<usize>().max(1) as Real;
    let per_scene = exec.map(batch, |(image, targets)| {
        scene_gradients(model, store, image, targets, loss, norm)
    });
    let mut breakdown = LossBreakdown::default();
    let mut sum: Option<Vec<Tensor>> = None;
    for r in per_scene {
        let (b, grads) = r?;
        breakdown.accumulate(&b);
        match &mut sum {
            None => sum = Some(grads),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(&grads) {
                    for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                        *x += y;
                    }
                }
            }
        }
    }
    let grads = sum.unwrap_or_else(|| store.tensors().map(|(_, t)| Tensor::zeros(t.shape())).collect());
    Ok((breakdown, grads))
}

/// Rescales `grads` so their global L2 norm is at most `max_norm` (0
/// disables clipping). Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: Real) -> Real {
    let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<Real>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: Real,
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: &RunConfig) -> Self {
        let zeros = || store.tensors().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Adam {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let mut value = store.get(id).clone();
            let (m, v, g) = (self.m[k].data_mut(), self.v[k].data_mut(), grads[k].data());
            for (i, x) in value.data_mut().iter_mut().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                *x -= self.lr * mh / (vh.sqrt() + self.eps);
            }
            store.set(id, value)?;
        }
        Ok(())
    }
}

/// One line of the training log; terms are weighted contributions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub total: Real,
    pub cls: Real,
    pub l1: Real,
    pub iou: Real,
    pub dice: Real,
    pub bce: Real,
}

impl StepLog {
    fn new(step: usize, b: &LossBreakdown) -> Self {
        StepLog {
            step,
            total: b.total(),
            cls: b.cls,
            l1: b.l1,
            iou: b.iou,
            dice: b.dice,
            bce: b.bce,
        }
    }
}

/// Scene indices of the batch for `step` (1-based), drawn without
/// replacement from a stream seeded by `(seed, step)`.
pub fn batch_indices(seed: u64, step: usize, scenes: usize, batch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(scene_seed(seed ^ 0x5EED_BA7C, step as u64));
    let mut idx = sample(&mut rng, scenes, batch.min(scenes)).into_vec();
    idx.sort_unstable();
    idx
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub model: Model,
    pub store: ParamStore,
    pub adam: Adam,
    /// Completed steps.
    pub step: usize,
    images: Vec<Tensor>,
    targets: Vec<Vec<Target>>,
    full_masks: Vec<Vec<BinaryMask>>,
}

impl Trainer {
    pub fn new(cfg: RunConfig, scenes: &[Scene]) -> Result<Self> {
        let (model, store) = Model::new(&cfg)?;
        let adam = Adam::new(&store, &cfg);
        Self::assemble(cfg, model, store, adam, 0, scenes)
    }

    fn assemble(
        cfg: RunConfig,
        model: Model,
        store: ParamStore,
        adam: Adam,
        step: usize,
        scenes: &[Scene],
    ) -> Result<Self> {
        if scenes.is_empty() {
            return Err(Error::Invalid("training needs at least one scene".into()));
        }
        if let Some(s) = scenes
            .iter()
            .find(|s| s.height() != cfg.image_size || s.width() != cfg.image_size)
        {
            return Err(Error::Invalid(format!(
                "scene of {}x{} does not match image_size {}",
                s.height(),
                s.width(),
                cfg.image_size
            )));
        }
        let targets = scenes.iter().map(prepare_targets).collect::<Result<_>>()?;
        Ok(Trainer {
            cfg,
            model,
            store,
            adam,
            step,
            images: scenes.iter().map(|s| s.image.clone()).collect(),
            targets,
            full_masks: scenes
                .iter()
                .map(|s| s.instances.iter().map(|i| i.mask.clone()).collect())
                .collect(),
        })
    }

    pub fn exec(&self) -> Exec {
        if self.cfg.parallel {
            Exec::default()
        } else {
            Exec::Sequential
        }
    }

    /// Loss and gradients of the batch for the next step, without updating.
    pub fn peek(&self) -> Result<(LossBreakdown, Vec<Tensor>)> {
        let idx = batch_indices(self.cfg.seed, self.step + 1, self.images.len(), self.cfg.batch_size);
        let batch: Vec<(&Tensor, &[Target])> = idx
            .iter()
            .map(|&i| (&self.images[i], self.targets[i].as_slice()))
            .collect();
        batch_gradients(&self.model, &self.store, &batch, &self.cfg.loss(), self.exec())
    }

    /// Runs one optimization step and returns its log line.
    pub fn train_step(&mut self) -> Result<StepLog> {
        let step = self.step + 1;
        let diverged = |e: Error| match e {
            Error::NonFinite { .. } => Error::Diverged {
                step,
                detail: e.to_string(),
            },
            e => e,
        };
        let (breakdown, mut grads) = self.peek().map_err(diverged)?;
        let log = StepLog::new(step, &breakdown);
        if !log.total.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: "non-finite loss".into(),
            });
        }
        clip_grad_norm(&mut grads, self.cfg.grad_clip);
        self.adam.step(&mut self.store, &grads)?;
        self.step = step;
        Ok(log)
    }

    /// Mean IoU between matched last-stage masks and targets on the mask
    /// grid, and the number of matched targets.
    pub fn train_mask_iou(&self) -> Result<MaskIou> {
        matched_mask_iou(
            &self.model,
            &self.store,
            &self.images,
            &self.targets,
            &self.full_masks,
            self.exec(),
        )
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut tensors: Vec<(String, Tensor)> =
            self.store.tensors().map(|(n, t)| (n.to_string(), t.clone())).collect();
        for (k, (name, _)) in self.store.tensors().enumerate() {
            tensors.push((format!("adam.m.{name}"), self.adam.m[k].clone()));
            tensors.push((format!("adam.v.{name}"), self.adam.v[k].clone()));
        }
        Checkpoint {
            config: self.cfg.to_text(),
            step: self.step as u64,
            tensors,
        }
        .save(path)
    }

    /// Restores model, optimizer state and step count from a checkpoint.
    pub fn resume(ckpt: &Checkpoint, scenes: &[Scene]) -> Result<Self> {
        let cfg = RunConfig::parse_text(&ckpt.config)?;
        let store = ckpt.param_store(&cfg)?;
        let model = check_compatible(&cfg, &store)?;
        let mut adam = Adam::new(&store, &cfg);
        adam.t = ckpt.step;
        for (k, (name, t)) in store.tensors().enumerate() {
            adam.m[k] = ckpt.tensor(&format!("adam.m.{name}"), t.shape())?.clone();
            adam.v[k] = ckpt.tensor(&format!("adam.v.{name}"), t.shape())?.clone();
        }
        Self::assemble(cfg, model, store, adam, ckpt.step as usize, scenes)
    }
}

/// Mean IoU of matched last-stage masks over a set of scenes. `grid` is the
/// figure reported as the training-set mask IoU: it compares masks where
/// they are predicted and supervised. `full` is bounded by the resolution of
/// the grid (block-max targets upsampled to image size score about 0.45 on
/// the default synthetic data).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskIou {
    /// At image resolution: probabilities bilinearly upsampled from the mask
    /// grid and binarized at 0.5, against the annotated masks.
    pub full: Real,
    /// On the mask grid against the block-max training targets.
    pub grid: Real,
    pub matched: usize,
}

fn binary_iou(a: impl Iterator<Item = bool>, b: impl Iterator<Item = bool>) -> Real {
    let (mut inter, mut union) = (0usize, 0usize);
    for (a, b) in a.zip(b) {
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as Real / union as Real
    }
}

/// Matches the last decoder stage of every scene (class and box costs) and
/// averages the mask IoU of the matched predictions.
pub fn matched_mask_iou(
    model: &Model,
    store: &ParamStore,
    images: &[Tensor],
    targets: &[Vec<Target>],
    full_masks: &[Vec<BinaryMask>],
    exec: Exec,
) -> Result<MaskIou> {
    let loss = LossConfig::default();
    let per_scene = exec.map_range(images.len(), |i| -> Result<Vec<(Real, Real)>> {
        let t = &targets[i];
        if t.is_empty() {
            return Ok(Vec::new());
        }
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let out = model.forward(&p, &images[i])?;
        let last = out.stages.len() - 1;
        let pred = &out.stages[last];
        let cost = matching_cost(&pred.class_logits.value(), &pred.boxes.value(), t, &loss.weights, None)?;
        let assignment = hungarian(&cost)?;
        let (gh, gw) = (out.mask_feature.height, out.mask_feature.width);
        assignment
            .pairs()
            .map(|(ti, q)| {
                let probs = model.mask(&p, &out, last, q)?.probs.value();
                let grid = binary_iou(
                    probs.data().iter().map(|&v| v > 0.5),
                    t[ti].mask.data().iter().map(|&v| v > 0.5),
                );
                let truth = &full_masks[i][ti];
                let up = upsample_bilinear(probs.data(), gh, gw, truth.height() / gh);
                let full = binary_iou(up.iter().map(|&v| v > 0.5), truth.bits().iter().copied());
                Ok((full, grid))
            })
            .collect()
    });
    let mut pairs = Vec::new();
    for r in per_scene {
        pairs.extend(r?);
    }
    let n = pairs.len();
    let mean = |f: fn(&(Real, Real)) -> Real| {
        if n == 0 {
            0.0
        } else {
            pairs.iter().map(f).sum::<Real>() / n as Real
        }
    };
    Ok(MaskIou {
        full: mean(|p| p.0),
        grid: mean(|p| p.1),
        matched: n,
    })
}

/// Runs `cfg.steps` steps (continuing from `trainer.step`), appending log
/// lines to `log` and writing `checkpoint` every `checkpoint_every` steps
/// and at the end.
pub fn run_training(
    trainer: &mut Trainer,
    log: &mut dyn Write,
    checkpoint: &Path,
    mut on_step: impl FnMut(&StepLog),
) -> Result<MaskIou> {
    while trainer.step < trainer.cfg.steps {
        let line = trainer.train_step()?;
        writeln!(log, "{}", serde_json::to_string(&line)?)?;
        on_step(&line);
        let every = trainer.cfg.checkpoint_every;
        if every > 0 && trainer.step.is_multiple_of(every) {
            trainer.save_checkpoint(checkpoint)?;
        }
    }
    trainer.save_checkpoint(checkpoint)?;
    let iou = trainer.train_mask_iou()?;
    writeln!(
        log,
        "{}",
        serde_json::json!({
            "step": trainer.step,
            "train_mask_iou": iou.grid,
            "train_mask_iou_full": iou.full,
            "matched": iou.matched,
        })
    )?;
    log.flush()?;
    Ok(iou)
}

const CKPT_MAGIC: &[u8; 4] = b"IATC";
const CKPT_VERSION: u32 = 1;

/// Resolved config text, step count and named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub step: u64,
    pub tensors: Vec<(String, Tensor)>,
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u64).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len);
    if len > 1 << 24 {
        return Err(Error::Format(format!("string of {len} bytes")));
    }
    let mut buf = vec![0u8; len as usize];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(fs::File::create(&tmp)?);
            w.write_all(CKPT_MAGIC)?;
            w.write_all(&CKPT_VERSION.to_le_bytes())?;
            write_str(&mut w, &self.config)?;
            w.write_all(&self.step.to_le_bytes())?;
            w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
            for (name, t) in &self.tensors {
                write_str(&mut w, name)?;
                t.write_to(&mut w)?;
            }
            w.flush()?;
        }
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(fs::File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CKPT_MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CKPT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let config = read_str(&mut r)?;
        let mut step = [0u8; 8];
        r.read_exact(&mut step)?;
        let count = read_u32(&mut r)?;
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name = read_str(&mut r)?;
            tensors.push((name, Tensor::read_from(&mut r)?));
        }
        Ok(Checkpoint {
            config,
            step: u64::from_le_bytes(step),
            tensors,
        })
    }

    pub fn tensor(&self, name: &str, shape: &[usize]) -> Result<&Tensor> {
        let t = self
            .tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Invalid(format!("checkpoint has no tensor {name}")))?;
        if t.shape() != shape {
            return Err(Error::Invalid(format!(
                "checkpoint tensor {name} is {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        Ok(t)
    }

    /// Model parameters for `cfg`, taken from this checkpoint.
    pub fn param_store(&self, cfg: &RunConfig) -> Result<ParamStore> {
        let (_, mut store) = Model::new(cfg)?;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let t = self.tensor(store.name(id), store.get(id).shape())?.clone();
            store.set(id, t)?;
        }
        Ok(store)
    }

    /// Model and parameters stored in this checkpoint.
    pub fn restore(&self) -> Result<(RunConfig, Model, ParamStore)> {
        let cfg = RunConfig::parse_text(&self.config)?;
        let store = self.param_store(&cfg)?;
        let model = check_compatible(&cfg, &store)?;
        Ok((cfg, model, store))
    }
}
