//! Invariant suites behind `iat check`.
//!
//! Each suite returns named pass/fail items rather than panicking so the
//! command-line tool can print a full report.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::data::{generate_scene, SceneConfig};
use crate::deformable::{ms_deform_sample, LevelLayout, SampleGeometry};
use crate::error::{Error, Result};
use crate::iat::{expected_param_count, unpack_params, DynamicShape};
use crate::matching::{dice_loss, giou_loss, hungarian, total_loss, CostMatrix, LossConfig, Target};
use crate::model::Model;
use crate::numeric::{check_gradients, GradCheckOptions, Real, Tape, Tensor, Var};
use crate::params::ParamStore;
use crate::posenc::{absolute_pe_2d, relative_pe_2d, relative_pe_tokens, EncodingConfig, PeMode};
use crate::train::prepare_targets;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Params,
    Pe,
    Match,
    Grad,
    Norm,
    Loss,
}

impl Suite {
    pub const ALL: [Suite; 6] = [
        Suite::Params,
        Suite::Pe,
        Suite::Match,
        Suite::Grad,
        Suite::Norm,
        Suite::Loss,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Params => "params",
            Suite::Pe => "pe",
            Suite::Match => "match",
            Suite::Grad => "grad",
            Suite::Norm => "norm",
            Suite::Loss => "loss",
        }
    }
}

impl std::str::FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL.into_iter().find(|suite| suite.name() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown suite {s:?}; expected all|params|pe|match|grad|norm|loss"
            ))
        })
    }
}

#[derive(Clone, Debug)]
pub struct CheckItem {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Default)]
pub struct SuiteReport {
    pub items: Vec<CheckItem>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.items.iter().all(|i| i.passed)
    }

    fn push(&mut self, name: impl Into<String>, outcome: Result<(bool, String)>) {
        let (passed, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
        self.items.push(CheckItem {
            name: name.into(),
            passed,
            detail,
        });
    }
}

pub fn run(suite: Suite) -> SuiteReport {
    let mut r = SuiteReport::default();
    match suite {
        Suite::Params => params_suite(&mut r),
        Suite::Pe => pe_suite(&mut r),
        Suite::Match => match_suite(&mut r),
        Suite::Grad => grad_suite(&mut r),
        Suite::Norm => norm_suite(&mut r),
        Suite::Loss => loss_suite(&mut r),
    }
    r
}

fn params_suite(r: &mut SuiteReport) {
    for (c, m, k, want) in [(8, 4, 4, 441), (8, 8, 4, 873)] {
        r.push(
            format!("budget_c{c}_m{m}_k{k}"),
            expected_param_count(c, m, k).map(|n| (n == want, format!("{n} (expected {want})"))),
        );
    }
    r.push(
        "unpack_flatten_round_trip",
        (|| {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            for (c, m, k) in [(8, 4, 4), (8, 8, 4), (4, 1, 4), (16, 2, 3)] {
                let shape = DynamicShape::new(c, m, k)?;
                let tape = Tape::new();
                let v = tape.constant(Tensor::uniform([shape.param_count()], -3.0, 3.0, &mut rng));
                let back = unpack_params(v, shape)?.flatten()?;
                if back.value().data() != v.value().data() {
                    return Ok((false, format!("round trip differs for C={c} M={m} K={k}")));
                }
            }
            Ok((true, "bit-exact".into()))
        })(),
    );
}

/// Closed-form sinusoidal encoding of a real-valued position, with the same
/// channel layout as [`crate::posenc`].
pub fn sinusoid_at(x: Real, y: Real, d: usize, temperature: Real) -> Vec<Real> {
    let half = d / 2;
    let mut out = vec![0.0; d];
    for i in 0..half / 2 {
        let w = temperature.powf(-((2 * i) as Real) / half as Real);
        out[2 * i] = (x * w).sin();
        out[2 * i + 1] = (x * w).cos();
        out[half + 2 * i] = (y * w).sin();
        out[half + 2 * i + 1] = (y * w).cos();
    }
    out
}

fn pe_suite(r: &mut SuiteReport) {
    r.push(
        "relative_equals_shifted_absolute",
        (|| {
            let mut rng = ChaCha8Rng::seed_from_u64(23);
            let mut worst: Real = 0.0;
            for _ in 0..100 {
                let (h, w) = (rng.gen_range(1..=12), rng.gen_range(1..=12));
                let d = 4 * rng.gen_range(1..=8);
                let c = (rng.gen_range(-4.0..16.0), rng.gen_range(-4.0..16.0));
                let cfg = EncodingConfig::new(d)?;
                let rel = relative_pe_2d(h, w, c, &cfg)?;
                for y in 0..h {
                    for x in 0..w {
                        let want = sinusoid_at(x as Real - c.0, y as Real - c.1, d, 10000.0);
                        for (ch, v) in want.iter().enumerate() {
                            worst = worst.max((rel.get(&[ch, y, x]) - v).abs());
                        }
                    }
                }
            }
            Ok((worst <= 1e-12, format!("max deviation {worst:.3e} over 100 grids")))
        })(),
    );
    r.push(
        "absolute_is_zero_centre",
        (|| {
            let cfg = EncodingConfig::new(16)?;
            let same = absolute_pe_2d(5, 7, &cfg)? == relative_pe_2d(5, 7, (0.0, 0.0), &cfg)?;
            Ok((same, "exact".into()))
        })(),
    );
    r.push(
        "integer_shift_equivariance",
        (|| {
            // the relative encoding centred on a pixel is the absolute encoding
            // of a larger grid read at an offset window
            let cfg = EncodingConfig::with_options(8, 100.0, false)?;
            let small = relative_pe_2d(6, 6, (-3.0, -2.0), &cfg)?;
            let big = absolute_pe_2d(12, 12, &cfg)?;
            let mut worst: Real = 0.0;
            for ch in 0..8 {
                for y in 0..6 {
                    for x in 0..6 {
                        worst = worst.max((small.get(&[ch, y, x]) - big.get(&[ch, y + 2, x + 3])).abs());
                    }
                }
            }
            Ok((worst <= 1e-12, format!("max deviation {worst:.3e}")))
        })(),
    );
    r.push(
        "normalized_variant_scaling",
        (|| {
            let cfg = EncodingConfig::with_options(8, 10000.0, true)?;
            let t = relative_pe_2d(8, 8, (3.5, 3.5), &cfg)?;
            // positions scaled by 2π/8: channel 0 at x = 5 sees angle 2π(5-3.5)/8
            let want = (1.5 * 2.0 * PI as Real / 8.0).sin();
            let dev = (t.get(&[0, 0, 5]) - want).abs();
            Ok((dev <= 1e-12, format!("deviation {dev:.1e}")))
        })(),
    );
}

/// Minimum assignment cost by enumerating injective maps of targets to
/// predictions. Costs are summed in target order.
pub fn brute_force_min(cost: &CostMatrix) -> Real {
    fn go(cost: &CostMatrix, t: usize, used: &mut Vec<bool>, acc: Real, best: &mut Real) {
        if t == cost.cols() {
            *best = best.min(acc);
            return;
        }
        for p in 0..cost.rows() {
            if !used[p] {
                used[p] = true;
                go(cost, t + 1, used, acc + cost.get(p, t), best);
                used[p] = false;
            }
        }
    }
    let mut best = Real::INFINITY;
    go(cost, 0, &mut vec![false; cost.rows()], 0.0, &mut best);
    best
}

fn match_suite(r: &mut SuiteReport) {
    r.push(
        "hungarian_equals_brute_force",
        (|| {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let mut mismatches = 0;
            for trial in 0..1000 {
                let n = rng.gen_range(1..=7);
                let g = rng.gen_range(1..=n);
                let cost = if trial % 2 == 0 {
                    CostMatrix::from_fn(n, g, |_, _| rng.gen_range(-5.0..5.0))?
                } else {
                    // integer costs produce many ties
                    CostMatrix::from_fn(n, g, |_, _| rng.gen_range(0..4) as Real)?
                };
                let a = hungarian(&cost)?;
                let total: Real = (0..g).map(|t| cost.get(a.pred_of_target[t], t)).sum();
                if total != brute_force_min(&cost) {
                    mismatches += 1;
                }
            }
            Ok((mismatches == 0, format!("{mismatches} mismatches in 1000 trials")))
        })(),
    );
}

/// Random input draws per operation in the gradient suite.
pub const GRAD_DRAWS: u64 = 10;

/// One differentiable operation under test: inputs plus a scalar function.
pub struct GradCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub f: for<'t> fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
}

fn rand_tensor(seed: u64, shape: &[usize], lo: Real, hi: Real) -> Tensor {
    Tensor::uniform(shape.to_vec(), lo, hi, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Values bounded away from zero, for kinked operations.
fn away_from_zero(seed: u64, shape: &[usize]) -> Tensor {
    let mut t = rand_tensor(seed, shape, 0.1, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xF1);
    for v in t.data_mut() {
        if rng.gen_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

/// Reduces any output to a scalar through a fixed random projection so that
/// every output coordinate contributes to the check.
fn project<'t>(v: Var<'t>) -> Result<Var<'t>> {
    let w = rand_tensor(0xC0FFEE + v.value().len() as u64, v.value().shape(), -1.0, 1.0);
    v.mul(v.tape().constant(w))?.sum()
}

/// Every differentiable primitive and fused kernel of the crate, with inputs
/// from random draw `draw`.
pub fn grad_cases(draw: u64) -> Vec<GradCase> {
    let off = draw * 1000;
    let r = |seed, shape: &[usize], lo, hi| rand_tensor(seed + off, shape, lo, hi);
    let a = |seed, shape: &[usize]| away_from_zero(seed + off, shape);
    vec![
        GradCase {
            name: "add",
            inputs: vec![r(1, &[3, 4], -1.0, 1.0), r(2, &[3, 4], -1.0, 1.0)],
            f: |_, x| project(x[0].add(x[1])?),
        },
        GradCase {
            name: "sub",
            inputs: vec![r(3, &[3, 4], -1.0, 1.0), r(4, &[3, 4], -1.0, 1.0)],
            f: |_, x| project(x[0].sub(x[1])?),
        },
        GradCase {
            name: "mul",
            inputs: vec![r(5, &[3, 4], -1.0, 1.0), r(6, &[3, 4], -1.0, 1.0)],
            f: |_, x| project(x[0].mul(x[1])?),
        },
        GradCase {
            name: "div",
            inputs: vec![r(7, &[3, 4], -1.0, 1.0), r(8, &[3, 4], 0.5, 2.0)],
            f: |_, x| project(x[0].div(x[1])?),
        },
        GradCase {
            name: "minimum",
            inputs: vec![a(9, &[12]), a(10, &[12]).add_scalar_tensor(0.05)],
            f: |_, x| project(x[0].minimum(x[1])?),
        },
        GradCase {
            name: "maximum",
            inputs: vec![a(11, &[12]), a(12, &[12]).add_scalar_tensor(0.05)],
            f: |_, x| project(x[0].maximum(x[1])?),
        },
        GradCase {
            name: "scale",
            inputs: vec![r(13, &[5], -1.0, 1.0)],
            f: |_, x| project(x[0].scale(-2.5)?),
        },
        GradCase {
            name: "add_scalar",
            inputs: vec![r(14, &[5], -1.0, 1.0)],
            f: |_, x| project(x[0].add_scalar(0.7)?.square()?),
        },
        GradCase {
            name: "neg",
            inputs: vec![r(15, &[5], -1.0, 1.0)],
            f: |_, x| project(x[0].neg()?),
        },
        GradCase {
            name: "relu",
            inputs: vec![a(16, &[20])],
            f: |_, x| project(x[0].relu()?),
        },
        GradCase {
            name: "sigmoid",
            inputs: vec![r(17, &[10], -4.0, 4.0)],
            f: |_, x| project(x[0].sigmoid()?),
        },
        GradCase {
            name: "exp",
            inputs: vec![r(18, &[10], -2.0, 2.0)],
            f: |_, x| project(x[0].exp()?),
        },
        GradCase {
            name: "log",
            inputs: vec![r(19, &[10], 0.2, 3.0)],
            f: |_, x| project(x[0].log()?),
        },
        GradCase {
            name: "abs",
            inputs: vec![a(20, &[20])],
            f: |_, x| project(x[0].abs()?),
        },
        GradCase {
            name: "square",
            inputs: vec![r(21, &[10], -2.0, 2.0)],
            f: |_, x| project(x[0].square()?),
        },
        GradCase {
            name: "sum",
            inputs: vec![r(22, &[2, 3], -1.0, 1.0)],
            f: |_, x| x[0].square()?.sum(),
        },
        GradCase {
            name: "mean",
            inputs: vec![r(23, &[2, 3], -1.0, 1.0)],
            f: |_, x| x[0].square()?.mean(),
        },
        GradCase {
            name: "sum_rows",
            inputs: vec![r(24, &[4, 3], -1.0, 1.0)],
            f: |_, x| project(x[0].sum_rows()?),
        },
        GradCase {
            name: "reshape",
            inputs: vec![r(25, &[2, 6], -1.0, 1.0)],
            f: |_, x| project(x[0].reshape([3, 4])?),
        },
        GradCase {
            name: "transpose",
            inputs: vec![r(26, &[2, 5], -1.0, 1.0)],
            f: |_, x| project(x[0].t()?),
        },
        GradCase {
            name: "matmul",
            inputs: vec![r(27, &[3, 4], -1.0, 1.0), r(28, &[4, 2], -1.0, 1.0)],
            f: |_, x| project(x[0].matmul(x[1])?),
        },
        GradCase {
            name: "linear",
            inputs: vec![
                r(29, &[3, 4], -1.0, 1.0),
                r(30, &[5, 4], -1.0, 1.0),
                r(31, &[5], -1.0, 1.0),
            ],
            f: |_, x| project(x[0].linear(x[1], Some(x[2]))?),
        },
        GradCase {
            name: "add_row",
            inputs: vec![r(32, &[3, 4], -1.0, 1.0), r(33, &[4], -1.0, 1.0)],
            f: |_, x| project(x[0].add_row(x[1])?),
        },
        GradCase {
            name: "narrow",
            inputs: vec![r(34, &[4, 5], -1.0, 1.0)],
            f: |_, x| project(x[0].narrow(1, 1, 3)?),
        },
        GradCase {
            name: "concat",
            inputs: vec![r(35, &[2, 3], -1.0, 1.0), r(36, &[2, 2], -1.0, 1.0)],
            f: |_, x| project(Var::concat(&[x[0], x[1]], 1)?),
        },
        GradCase {
            name: "gather_rows",
            inputs: vec![r(37, &[4, 3], -1.0, 1.0)],
            f: |_, x| project(x[0].gather_rows(&[2, 0, 2, 3])?),
        },
        GradCase {
            name: "softmax",
            inputs: vec![r(38, &[3, 5], -2.0, 2.0)],
            f: |_, x| project(x[0].softmax(1)?),
        },
        GradCase {
            name: "layer_norm",
            inputs: vec![r(39, &[3, 6], -2.0, 2.0), r(40, &[6], 0.5, 1.5), r(41, &[6], -0.5, 0.5)],
            f: |_, x| project(x[0].layer_norm(x[1], x[2], 1e-5)?),
        },
        GradCase {
            name: "conv2d",
            inputs: vec![
                r(42, &[2, 6, 6], -1.0, 1.0),
                r(43, &[3, 2, 3, 3], -0.5, 0.5),
                r(44, &[3], -0.5, 0.5),
            ],
            f: |_, x| project(x[0].conv2d(x[1], Some(x[2]), 2, 1)?),
        },
        GradCase {
            name: "sigmoid_focal_loss",
            inputs: vec![r(45, &[4, 3], -3.0, 3.0)],
            f: |_, x| {
                x[0].sigmoid_focal_loss(
                    &Tensor::new([4, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 0., 0., 0., 1.])?,
                    0.25,
                    2.0,
                )
            },
        },
        GradCase {
            name: "bce_with_logits",
            inputs: vec![r(46, &[8], -3.0, 3.0)],
            f: |_, x| x[0].bce_with_logits(&Tensor::new([8], vec![1., 0., 0.3, 1., 0., 1., 0.7, 0.])?),
        },
        GradCase {
            name: "bilinear_sample",
            inputs: vec![r(47, &[2, 5, 6], -1.0, 1.0), r(48, &[7, 2], -1.3, 5.7)],
            f: |_, x| project(x[0].bilinear_sample(x[1])?),
        },
        GradCase {
            name: "ms_deform_sample",
            inputs: vec![
                r(49, &[4 * 4 + 2 * 2, 4], -1.0, 1.0),
                r(50, &[3, 2], 0.05, 0.95),
                r(51, &[3, 2 * 2 * 2 * 2], -0.8, 0.8),
                r(52, &[3, 2 * 2 * 2], 0.0, 1.0),
            ],
            f: |_, x| {
                let layout = LevelLayout::new(vec![(4, 4), (2, 2)]);
                project(ms_deform_sample(
                    x[0],
                    &layout,
                    x[1],
                    x[2],
                    x[3],
                    SampleGeometry { heads: 2, points: 2 },
                )?)
            },
        },
        GradCase {
            name: "relative_pe_tokens",
            inputs: vec![r(53, &[2], 0.3, 4.7)],
            f: |_, x| {
                project(relative_pe_tokens(
                    x[0],
                    5,
                    5,
                    &EncodingConfig::with_options(8, 20.0, false)?,
                )?)
            },
        },
        GradCase {
            name: "dice_loss",
            inputs: vec![r(54, &[9], 0.05, 0.95)],
            f: |_, x| dice_loss(x[0], &Tensor::new([9], vec![1., 1., 0., 0., 1., 0., 1., 0., 0.])?)?.sum(),
        },
        GradCase {
            name: "giou_loss",
            inputs: vec![Tensor::new([2, 4], vec![0.45, 0.5, 0.3, 0.4, 0.3, 0.6, 0.2, 0.25]).expect("2x4 boxes")],
            f: |_, x| {
                project(giou_loss(
                    x[0],
                    &Tensor::new([2, 4], vec![0.5, 0.46, 0.35, 0.3, 0.62, 0.4, 0.2, 0.3])?,
                )?)
            },
        },
    ]
}

trait AddScalarTensor {
    fn add_scalar_tensor(self, s: Real) -> Tensor;
}

impl AddScalarTensor for Tensor {
    fn add_scalar_tensor(mut self, s: Real) -> Tensor {
        for v in self.data_mut() {
            *v += s;
        }
        self
    }
}

/// Configuration and data of the end-to-end gradient micro-instance.
pub struct MicroInstance {
    pub cfg: RunConfig,
    pub model: Model,
    pub store: ParamStore,
    pub image: Tensor,
    pub targets: Vec<Target>,
}

/// A 64x64 scene with one instance, a two-query model and every parameter
/// jittered so that no gradient path is trivially zero.
pub fn micro_instance() -> Result<MicroInstance> {
    let cfg = RunConfig {
        num_queries: 2,
        ..RunConfig::default()
    };
    let (model, store) = Model::new(&cfg)?;
    let store = jitter(&store, 0.05, 99)?;
    let scene_cfg = SceneConfig::default();
    let scene = (0..)
        .map(|seed| generate_scene(seed, &scene_cfg))
        .find(|s| s.as_ref().map_or(true, |s| s.instances.len() == 1))
        .expect("unbounded search")?;
    let targets = prepare_targets(&scene)?;
    Ok(MicroInstance {
        cfg,
        model,
        store,
        image: scene.image,
        targets,
    })
}

/// Copy of `store` with uniform noise of half-width `amount` added.
pub fn jitter(store: &ParamStore, amount: Real, seed: u64) -> Result<ParamStore> {
    let mut out = store.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for id in store.ids() {
        let mut t = store.get(id).clone();
        for v in t.data_mut() {
            *v += rng.gen_range(-amount..amount);
        }
        out.set(id, t)?;
    }
    Ok(out)
}

/// Scalar training loss of the micro-instance as a function of parameter
/// variables (store order).
pub fn micro_loss<'t>(micro: &MicroInstance, tape: &'t Tape, params: &[Var<'t>]) -> Result<Var<'t>> {
    let p = micro.store.bind_vars(tape, params)?;
    let out = micro.model.forward(&p, &micro.image)?;
    let norm = micro.targets.len().max(1) as Real;
    Ok(total_loss(
        &out.stages,
        &micro.model.masks(&p, &out),
        &micro.targets,
        &micro.cfg.loss(),
        norm,
    )?
    .total)
}

fn grad_suite(r: &mut SuiteReport) {
    let opts = GradCheckOptions::default();
    let draws: Vec<Vec<GradCase>> = (0..GRAD_DRAWS).map(grad_cases).collect();
    for (i, case) in draws[0].iter().enumerate() {
        let worst = draws.iter().try_fold(0.0 as Real, |w, cases| {
            let c = &cases[i];
            check_gradients(c.f, &c.inputs, &opts).map(|rep| w.max(rep.max_rel_error))
        });
        r.push(
            format!("fd_{}", case.name),
            worst.map(|w| (w < 1e-4, format!("max rel error {w:.2e} over {GRAD_DRAWS} draws"))),
        );
    }
    r.push(
        "fd_end_to_end",
        (|| {
            let micro = micro_instance()?;
            let inputs: Vec<Tensor> = micro.store.tensors().map(|(_, t)| t.clone()).collect();
            let rep = check_gradients(
                |tape, xs| micro_loss(&micro, tape, xs),
                &inputs,
                &GradCheckOptions {
                    max_coords_per_input: Some(2),
                    seed: 3,
                    ..Default::default()
                },
            )?;
            Ok((
                rep.max_rel_error < 1e-3,
                format!(
                    "max rel error {:.2e} over {} coordinates",
                    rep.max_rel_error, rep.probes
                ),
            ))
        })(),
    );
}

fn norm_suite(r: &mut SuiteReport) {
    for (seed, mode) in [(1, PeMode::Rel), (2, PeMode::Abs), (3, PeMode::None)] {
        r.push(
            format!("attention_sums_and_mask_range_{mode}"),
            (|| {
                let cfg = RunConfig {
                    pe_mode: mode,
                    seed,
                    ..RunConfig::default()
                };
                let (model, store) = Model::new(&cfg)?;
                let store = jitter(&store, 0.3, seed)?;
                let scene = generate_scene(seed + 40, &SceneConfig::default())?;
                let tape = Tape::new();
                let p = store.bind_frozen(&tape).with_trace();
                let out = model.forward(&p, &scene.image)?;
                let mut all_in_range = true;
                for s in 0..out.stages.len() {
                    for q in 0..cfg.num_queries {
                        let m = model.mask(&p, &out, s, q)?;
                        all_in_range &= m.probs.value().data().iter().all(|&v| v > 0.0 && v < 1.0);
                    }
                }
                let trace = p.take_trace();
                let mut worst: Real = 0.0;
                let mut sites = std::collections::BTreeSet::new();
                for (site, dist) in &trace {
                    sites.insert(site.clone());
                    let n = *dist.shape().last().expect("non-scalar distribution");
                    for row in dist.data().chunks(n) {
                        worst = worst.max((row.iter().sum::<Real>() - 1.0).abs());
                    }
                }
                let want = ["decoder.cross", "decoder.self", "encoder", "iat"];
                let covered = want.iter().all(|w| sites.contains(*w));
                Ok((
                    worst <= 1e-12 && all_in_range && covered,
                    format!(
                        "{} distributions, max |sum-1| {worst:.1e}, masks in (0,1): {all_in_range}, sites {:?}",
                        trace.len(),
                        sites
                    ),
                ))
            })(),
        );
    }
}

fn loss_suite(r: &mut SuiteReport) {
    r.push(
        "dice_identical_is_zero",
        (|| {
            let tape = Tape::new();
            let m = Tensor::from_fn([30], |i| ((i * 7) % 3 == 0) as u8 as Real);
            let v = dice_loss(tape.constant(m.clone()), &m)?.value().item();
            Ok((v == 0.0, format!("{v:e}")))
        })(),
    );
    r.push(
        "dice_disjoint",
        (|| {
            let tape = Tape::new();
            let mut worst: Real = 0.0;
            for n in 1..=20usize {
                let a = Tensor::from_fn([2 * n + 3], |i| (i < n) as u8 as Real);
                let b = Tensor::from_fn([2 * n + 3], |i| (i >= n && i < 2 * n) as u8 as Real);
                let v = dice_loss(tape.constant(a), &b)?.value().item();
                worst = worst.max((v - (1.0 - 1.0 / (2 * n + 1) as Real)).abs());
            }
            Ok((worst <= 1e-15, format!("max deviation {worst:.1e} for n=1..20")))
        })(),
    );
    r.push(
        "mask_stages_zero_detaches_mask_branch",
        (|| {
            let micro = micro_instance()?;
            let loss = LossConfig {
                mask_stages: 0,
                ..micro.cfg.loss()
            };
            let tape = Tape::new();
            let p = micro.store.bind(&tape);
            let out = micro.model.forward(&p, &micro.image)?;
            let l = total_loss(&out.stages, &micro.model.masks(&p, &out), &micro.targets, &loss, 1.0)?;
            let grads = micro.store.collect_grads(&p, &tape.backward(l.total)?);
            let mut nonzero = Vec::new();
            for ((name, _), g) in micro.store.tensors().zip(&grads) {
                let mask_only = name.starts_with("mask_encoder.") || name.contains(".mask.");
                if mask_only && g.data().iter().any(|&v| v != 0.0) {
                    nonzero.push(name.to_string());
                }
            }
            let zero_terms = l.breakdown.dice == 0.0 && l.breakdown.bce == 0.0;
            Ok((
                zero_terms && nonzero.is_empty(),
                format!(
                    "dice {} bce {}, mask-branch params with gradient: {nonzero:?}",
                    l.breakdown.dice, l.breakdown.bce
                ),
            ))
        })(),
    );
}
