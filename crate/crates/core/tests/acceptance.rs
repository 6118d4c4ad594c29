//! Acceptance criteria 1-8, one pass/fail line each.
//!
//! Expected values come from oracles written here: closed-form parameter
//! budgets and encodings, brute-force assignment, central differences and
//! direct summation. Run with `cargo test --test acceptance -- --nocapture`
//! to see the report (it is printed either way).

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use iat_core::check::{grad_cases, jitter, micro_instance, micro_loss, GRAD_DRAWS};
use iat_core::config::RunConfig;
use iat_core::data::{generate_scene, generate_scenes, Scene, SceneConfig};
use iat_core::iat::{expected_param_count, unpack_params, DynamicShape};
use iat_core::matching::{dice_loss, hungarian, CostMatrix, LossConfig};
use iat_core::model::Model;
use iat_core::posenc::{absolute_pe_2d, relative_pe_2d, EncodingConfig, PeMode};
use iat_core::train::{scene_gradients, Trainer};
use iat_core::{Exec, Real, Tape, Tensor, Var};

/// Observed once with the default configuration (seed 7, 100 scenes, 300
/// steps) and frozen here. The gates are the floors below; drift from these
/// values is reported but does not fail the run.
const PINNED_LOSS_STEP1: Real = 31.550064267749796;
const PINNED_LOSS_STEP300: Real = 8.686607580837805;
const PINNED_MASK_IOU_GRID: Real = 0.840618433421316;
const PINNED_MASK_IOU_FULL: Real = 0.433816724942854;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome, Duration);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// --- criterion 1 ---------------------------------------------------------

/// Offset projection (2MK outputs), attention projection (MK outputs) and
/// the one-channel output layer, each with a bias over C inputs.
fn budget_oracle(c: usize, m: usize, k: usize) -> usize {
    (c + 1) * (2 * m * k) + (c + 1) * (m * k) + (c + 1)
}

fn criterion_1() -> Outcome {
    for (c, m, k) in [(8, 4, 4), (8, 8, 4), (4, 4, 4), (16, 2, 4), (8, 1, 3)] {
        let got = expected_param_count(c, m, k).map_err(err)?;
        ensure(got == budget_oracle(c, m, k), || format!("C={c} M={m} K={k}: {got}"))?;
    }
    ensure(expected_param_count(8, 4, 4).map_err(err)? == 441, || "441".into())?;
    ensure(expected_param_count(8, 8, 4).map_err(err)? == 873, || "873".into())?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (c, m, k) in [(8, 4, 4), (8, 8, 4)] {
        let shape = DynamicShape::new(c, m, k).map_err(err)?;
        for _ in 0..20 {
            let tape = Tape::new();
            let v = tape.constant(Tensor::uniform([shape.param_count()], -10.0, 10.0, &mut rng));
            let back = unpack_params(v, shape).and_then(|l| l.flatten()).map_err(err)?;
            let same = back
                .value()
                .data()
                .iter()
                .zip(v.value().data())
                .all(|(a, b)| a.to_bits() == b.to_bits());
            ensure(same, || format!("round trip not bit-exact for M={m}"))?;
        }
    }
    Ok("441 and 873 exact, round trip bit-exact".into())
}

// --- criterion 2 ---------------------------------------------------------

/// Absolute sinusoidal encoding at a real-valued position (x channels then
/// y channels, sin/cos interleaved, frequencies T^(-2i/(d/2))).
fn absolute_at(x: Real, y: Real, d: usize, t: Real) -> Vec<Real> {
    let half = d / 2;
    let mut v = Vec::with_capacity(d);
    for p in [x, y] {
        for i in 0..half / 2 {
            let a = p / t.powf((2 * i) as Real / half as Real);
            v.push(a.sin());
            v.push(a.cos());
        }
    }
    v
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: Real = 0.0;
    for _ in 0..100 {
        let (h, w) = (rng.gen_range(1..=16), rng.gen_range(1..=16));
        let d = 4 * rng.gen_range(1..=8);
        let t = [100.0, 10000.0][rng.gen_range(0..2)];
        let c = (
            rng.gen_range(-2.0..w as Real + 2.0),
            rng.gen_range(-2.0..h as Real + 2.0),
        );
        let cfg = EncodingConfig::with_options(d, t, false).map_err(err)?;
        let rel = relative_pe_2d(h, w, c, &cfg).map_err(err)?;
        for y in 0..h {
            for x in 0..w {
                for (ch, v) in absolute_at(x as Real - c.0, y as Real - c.1, d, t)
                    .into_iter()
                    .enumerate()
                {
                    worst = worst.max((rel.get(&[ch, y, x]) - v).abs());
                }
            }
        }
        // the library's absolute encoding agrees with the same oracle
        let abs = absolute_pe_2d(h, w, &cfg).map_err(err)?;
        let (y, x) = (h - 1, w - 1);
        for (ch, v) in absolute_at(x as Real, y as Real, d, t).into_iter().enumerate() {
            worst = worst.max((abs.get(&[ch, y, x]) - v).abs());
        }
    }
    ensure(worst <= 1e-12, || format!("max deviation {worst:e}"))?;
    Ok(format!("max deviation {worst:.1e} over 100 (grid, centre) pairs"))
}

// --- criterion 3 ---------------------------------------------------------

const FD_STEP: Real = 1e-5;

fn eval_const<F>(f: &F, inputs: &[Tensor]) -> Result<Real, String>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> iat_core::Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    Ok(f(&tape, &vars).map_err(err)?.value().item())
}

/// Central differences at the given coordinates against tape gradients;
/// returns max |analytic - numeric| / max(1, |analytic|).
fn fd_error<F>(f: F, inputs: &[Tensor], coords: &[(usize, usize)]) -> Result<Real, String>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> iat_core::Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&tape, &vars).map_err(err)?;
    let grads = tape.backward(loss).map_err(err)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get_or_zeros(v)).collect();
    let mut worst: Real = 0.0;
    for &(i, j) in coords {
        let mut plus = inputs.to_vec();
        plus[i].data_mut()[j] += FD_STEP;
        let mut minus = inputs.to_vec();
        minus[i].data_mut()[j] -= FD_STEP;
        let numeric = (eval_const(&f, &plus)? - eval_const(&f, &minus)?) / (2.0 * FD_STEP);
        let a = analytic[i].data()[j];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

fn criterion_3() -> Outcome {
    let mut ops_worst: Real = 0.0;
    let cases: Vec<_> = (0..GRAD_DRAWS).flat_map(grad_cases).collect();
    for case in &cases {
        let coords: Vec<_> = case
            .inputs
            .iter()
            .enumerate()
            .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
            .collect();
        let e = fd_error(case.f, &case.inputs, &coords)?;
        ensure(e < 1e-4, || format!("{}: relative error {e:e}", case.name))?;
        ops_worst = ops_worst.max(e);
    }
    let micro = micro_instance().map_err(err)?;
    ensure(
        micro.image.shape() == [3, 64, 64] && micro.targets.len() == 1 && micro.cfg.num_queries == 2,
        || "micro-instance is not 64x64 / 1 target / 2 queries".into(),
    )?;
    let inputs: Vec<Tensor> = micro.store.tensors().map(|(_, t)| t.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let coords: Vec<_> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| {
            let picks: Vec<usize> = (0..2.min(t.len())).map(|_| rng.gen_range(0..t.len())).collect();
            picks.into_iter().map(move |j| (i, j))
        })
        .collect();
    let e2e = fd_error(|tape, xs| micro_loss(&micro, tape, xs), &inputs, &coords)?;
    ensure(e2e < 1e-3, || format!("end-to-end relative error {e2e:e}"))?;
    Ok(format!(
        "{} ops x {GRAD_DRAWS} draws max rel error {ops_worst:.1e}; end-to-end {e2e:.1e} over {} coordinates",
        cases.len() as u64 / GRAD_DRAWS,
        coords.len()
    ))
}

// --- criterion 4 ---------------------------------------------------------

fn criterion_4() -> Outcome {
    let mut worst: Real = 0.0;
    let mut rows = 0usize;
    let mut sites = std::collections::BTreeSet::new();
    for (i, mode) in [PeMode::Rel, PeMode::Abs, PeMode::None, PeMode::Rel]
        .into_iter()
        .enumerate()
    {
        let cfg = RunConfig {
            seed: 100 + i as u64,
            pe_mode: mode,
            iat_heads: [4, 8, 2, 1][i],
            ..RunConfig::default()
        };
        let (model, store) = Model::new(&cfg).map_err(err)?;
        let store = jitter(&store, 0.5, 7 + i as u64).map_err(err)?;
        let scene = generate_scene(500 + i as u64, &SceneConfig::default()).map_err(err)?;
        let tape = Tape::new();
        let p = store.bind_frozen(&tape).with_trace();
        let out = model.forward(&p, &scene.image).map_err(err)?;
        for s in 0..out.stages.len() {
            for q in 0..cfg.num_queries {
                let m = model.mask(&p, &out, s, q).map_err(err)?;
                let probs = m.probs.value();
                ensure(probs.data().iter().all(|&v| v > 0.0 && v < 1.0), || {
                    format!("mask of query {q} stage {s} leaves (0,1)")
                })?;
            }
        }
        for (site, dist) in p.take_trace() {
            let n = *dist.shape().last().unwrap();
            for row in dist.data().chunks(n) {
                let sum: Real = row.iter().sum();
                worst = worst.max((sum - 1.0).abs());
                rows += 1;
            }
            sites.insert(site);
        }
    }
    for want in ["encoder", "decoder.self", "decoder.cross", "iat"] {
        ensure(sites.contains(want), || format!("no attention recorded at {want}"))?;
    }
    ensure(worst <= 1e-12, || format!("max |sum - 1| {worst:e}"))?;
    Ok(format!(
        "{rows} distributions at {sites:?}, max |sum - 1| {worst:.1e}; masks in (0,1)"
    ))
}

// --- criterion 5 ---------------------------------------------------------

fn permutation_min(cost: &CostMatrix) -> Real {
    // every ordered choice of distinct predictions for targets 0..G
    fn rec(cost: &CostMatrix, t: usize, taken: u32, acc: Real) -> Real {
        if t == cost.cols() {
            return acc;
        }
        (0..cost.rows())
            .filter(|p| taken & (1 << p) == 0)
            .map(|p| rec(cost, t + 1, taken | (1 << p), acc + cost.get(p, t)))
            .fold(Real::INFINITY, Real::min)
    }
    rec(cost, 0, 0, 0.0)
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..1000 {
        let n = rng.gen_range(1..=7);
        let g = rng.gen_range(1..=n);
        let data: Vec<Real> = (0..n * g).map(|_| rng.gen_range(0.0..10.0)).collect();
        let cost = CostMatrix::new(n, g, data).map_err(err)?;
        let a = hungarian(&cost).map_err(err)?;
        let mut used = vec![false; n];
        for &p in &a.pred_of_target {
            ensure(!used[p], || format!("trial {trial}: prediction {p} used twice"))?;
            used[p] = true;
        }
        let total: Real = (0..g).map(|t| cost.get(a.pred_of_target[t], t)).sum();
        let best = permutation_min(&cost);
        ensure(total == best, || {
            format!("trial {trial} ({n}x{g}): {total} vs brute force {best}")
        })?;
    }
    Ok("1000 matrices, totals identical to brute force".into())
}

// --- criterion 6 ---------------------------------------------------------

fn criterion_6() -> Outcome {
    let tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..50 {
        let m = Tensor::from_fn([64], |_| rng.gen_bool(0.4) as u8 as Real);
        let v = dice_loss(tape.constant(m.clone()), &m).map_err(err)?.value().item();
        ensure(v == 0.0, || format!("dice of identical masks {v}"))?;
    }
    for n in 1..=32usize {
        let a = Tensor::from_fn([64], |i| (i < n) as u8 as Real);
        let b = Tensor::from_fn([64], |i| (i >= 32 && i < 32 + n) as u8 as Real);
        let v = dice_loss(tape.constant(a), &b).map_err(err)?.value().item();
        let want = 1.0 - 1.0 / (2 * n + 1) as Real;
        ensure((v - want).abs() <= 1e-15, || format!("disjoint n={n}: {v} vs {want}"))?;
    }

    // mask_stages = 0 must give the same gradients as dropping the two mask
    // terms by weight, with no gradient reaching mask-only parameters
    let micro = micro_instance().map_err(err)?;
    let base = micro.cfg.loss();
    let zero_stages = LossConfig {
        mask_stages: 0,
        ..base.clone()
    };
    let mut zero_weights = base.clone();
    zero_weights.weights.dice = 0.0;
    zero_weights.weights.bce = 0.0;
    let (b0, g0) = scene_gradients(
        &micro.model,
        &micro.store,
        &micro.image,
        &micro.targets,
        &zero_stages,
        1.0,
    )
    .map_err(err)?;
    let (_, gw) = scene_gradients(
        &micro.model,
        &micro.store,
        &micro.image,
        &micro.targets,
        &zero_weights,
        1.0,
    )
    .map_err(err)?;
    let (b2, g2) =
        scene_gradients(&micro.model, &micro.store, &micro.image, &micro.targets, &base, 1.0).map_err(err)?;
    ensure(b0.dice == 0.0 && b0.bce == 0.0, || {
        format!("dice {} bce {}", b0.dice, b0.bce)
    })?;
    ensure(b2.dice > 0.0 && b2.bce > 0.0, || {
        "mask terms inactive with mask_stages=2".into()
    })?;
    let mut mask_params = 0;
    for (((name, _), a), b) in micro.store.tensors().zip(&g0).zip(&gw) {
        ensure(a == b, || {
            format!("{name}: gradients differ from zero-weight mask terms")
        })?;
        if name.starts_with("mask_encoder.") || name.contains(".mask.") {
            mask_params += 1;
            ensure(a.data().iter().all(|&v| v == 0.0), || {
                format!("{name} receives gradient")
            })?;
        }
    }
    let reached = micro
        .store
        .tensors()
        .zip(&g2)
        .filter(|((n, _), g)| n.starts_with("mask_encoder.") && g.data().iter().any(|&v| v != 0.0))
        .count();
    ensure(reached > 0, || {
        "mask encoder gets no gradient with mask_stages=2".into()
    })?;
    Ok(format!(
        "dice identities exact; mask_stages=0 leaves {mask_params} mask-branch tensors at zero gradient"
    ))
}

// --- criterion 7 ---------------------------------------------------------

fn dataset(count: usize, seed: u64) -> Result<Vec<Scene>, String> {
    Ok(generate_scenes(seed, count, &SceneConfig::default(), Exec::default())
        .map_err(err)?
        .into_iter()
        .map(|(_, s)| s)
        .collect())
}

fn criterion_7() -> Outcome {
    let scenes = dataset(100, 7)?;
    let cfg = RunConfig::default();
    ensure(cfg.seed == 7 && cfg.steps == 300, || "defaults changed".into())?;
    let mut trainer = Trainer::new(cfg, &scenes).map_err(err)?;
    let mut first = None;
    let mut last = 0.0;
    while trainer.step < trainer.cfg.steps {
        let log = trainer.train_step().map_err(err)?;
        first.get_or_insert(log.total);
        last = log.total;
    }
    let first = first.expect("at least one step");
    let iou = trainer.train_mask_iou().map_err(err)?;
    let drop = 1.0 - last / first;
    let drift = [
        (first, PINNED_LOSS_STEP1),
        (last, PINNED_LOSS_STEP300),
        (iou.grid, PINNED_MASK_IOU_GRID),
        (iou.full, PINNED_MASK_IOU_FULL),
    ]
    .iter()
    .map(|(a, b)| (a - b).abs() / b.abs())
    .fold(0.0, Real::max);
    let summary = format!(
        "loss {first:.4} -> {last:.4} ({:.1}% drop), matched mask IoU {:.4} on the mask grid ({:.4} at image resolution, {} matches), drift from pinned {drift:.1e}",
        100.0 * drop,
        iou.grid,
        iou.full,
        iou.matched
    );
    ensure(drop >= 0.5 && iou.grid >= 0.5, || summary.clone())?;
    Ok(summary)
}

// --- criterion 8 ---------------------------------------------------------

fn ablation_configs() -> Vec<(String, RunConfig)> {
    let base = RunConfig {
        steps: 10,
        batch_size: 2,
        ..RunConfig::default()
    };
    let mut out = Vec::new();
    for m in [1, 2, 4, 8] {
        out.push((
            format!("M={m}"),
            RunConfig {
                iat_heads: m,
                ..base.clone()
            },
        ));
    }
    for c in [4, 8, 16] {
        out.push((
            format!("C_mask={c}"),
            RunConfig {
                c_mask: c,
                ..base.clone()
            },
        ));
    }
    for l in [0, 1, 2] {
        out.push((
            format!("mask_encoder_layers={l}"),
            RunConfig {
                mask_encoder_layers: l,
                ..base.clone()
            },
        ));
    }
    for pe in [PeMode::None, PeMode::Abs, PeMode::Rel] {
        out.push((
            format!("pe={pe}"),
            RunConfig {
                pe_mode: pe,
                ..base.clone()
            },
        ));
    }
    for s in 0..=6 {
        out.push((
            format!("mask_stages={s}"),
            RunConfig {
                dec_layers: 6,
                mask_stages: s,
                ..base.clone()
            },
        ));
    }
    out
}

fn criterion_8() -> Outcome {
    let scenes = dataset(8, 8)?;
    let configs = ablation_configs();
    for (label, cfg) in &configs {
        let d = (cfg.c_mask + 1) * (3 * cfg.iat_heads * cfg.iat_points + 1);
        let mut trainer = Trainer::new(cfg.clone(), &scenes).map_err(|e| format!("{label}: {e}"))?;
        ensure(trainer.model.dynamic_param_count() == d, || {
            format!("{label}: D {}", trainer.model.dynamic_param_count())
        })?;
        {
            let tape = Tape::new();
            let p = trainer.store.bind_frozen(&tape);
            let out = trainer.model.forward(&p, &scenes[0].image).map_err(err)?;
            ensure(out.stages.len() == cfg.dec_layers, || {
                format!("{label}: {} stages", out.stages.len())
            })?;
            for s in &out.stages {
                ensure(
                    s.class_logits.shape() == [cfg.num_queries, cfg.num_classes]
                        && s.boxes.shape() == [cfg.num_queries, 4]
                        && s.dyn_params.shape() == [cfg.num_queries, d],
                    || format!("{label}: head shapes"),
                )?;
            }
            ensure(out.mask_feature.tokens.shape() == [64, cfg.c_mask], || {
                format!("{label}: mask feature shape")
            })?;
            let m = trainer.model.mask(&p, &out, cfg.dec_layers - 1, 0).map_err(err)?;
            ensure(m.probs.shape() == [64], || format!("{label}: mask shape"))?;
        }
        for _ in 0..10 {
            let log = trainer.train_step().map_err(|e| format!("{label}: {e}"))?;
            ensure(log.total.is_finite(), || format!("{label}: loss {}", log.total))?;
            if cfg.mask_stages == 0 {
                ensure(log.dice == 0.0 && log.bce == 0.0, || {
                    format!("{label}: mask terms nonzero")
                })?;
            }
        }
    }
    Ok(format!(
        "{} configurations built, shaped and trained 10 steps",
        configs.len()
    ))
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("1 parameter-count fidelity", criterion_1, Duration::from_secs(1)),
        ("2 positional-encoding identity", criterion_2, Duration::from_secs(5)),
        ("3 gradient suite", criterion_3, Duration::from_secs(120)),
        ("4 normalization invariants", criterion_4, Duration::from_secs(30)),
        ("5 matching oracle", criterion_5, Duration::from_secs(30)),
        ("6 loss sanity", criterion_6, Duration::from_secs(10)),
        ("7 toy training benchmark", criterion_7, Duration::from_secs(15 * 60)),
        (
            "8 ablation-axis mechanical check",
            criterion_8,
            Duration::from_secs(10 * 60),
        ),
    ];
    let mut failed = 0;
    for (name, run, budget) in criteria {
        let start = Instant::now();
        let outcome = run();
        let took = start.elapsed();
        let outcome = outcome.and_then(|msg| {
            if took <= budget {
                Ok(msg)
            } else {
                Err(format!("{msg}; took {took:.1?}, budget {budget:?}"))
            }
        });
        match outcome {
            Ok(msg) => println!("PASS  criterion {name} [{took:.2?}]: {msg}"),
            Err(msg) => {
                failed += 1;
                println!("FAIL  criterion {name} [{took:.2?}]: {msg}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
