//! Seeded synthetic scenes of overlapping shapes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mask::BinaryMask;
use crate::backbone::check_extent;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::geometry::BoxCxCyWh;
use crate::numeric::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeClass {
    Circle,
    Rectangle,
    Triangle,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 3] = [ShapeClass::Circle, ShapeClass::Rectangle, ShapeClass::Triangle];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Circle => "circle",
            ShapeClass::Rectangle => "rectangle",
            ShapeClass::Triangle => "triangle",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub class: ShapeClass,
    /// Tight box of `mask`, normalized.
    pub bbox: BoxCxCyWh,
    /// Visible pixels at image resolution.
    pub mask: BinaryMask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor,
    /// Paint order; later instances occlude earlier ones.
    pub instances: Vec<Instance>,
}

impl Scene {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub max_instances: usize,
    pub min_size_px: usize,
    pub max_size_px: usize,
    /// Instances (including earlier, now occluded ones) must keep at least
    /// this many visible pixels.
    pub min_visible_px: usize,
    pub max_attempts: usize,
    /// Half-width of the uniform pixel noise.
    pub noise: Real,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            height: 64,
            width: 64,
            max_instances: 3,
            min_size_px: 10,
            max_size_px: 28,
            min_visible_px: 16,
            max_attempts: 20,
            noise: 0.03,
        }
    }
}

impl SceneConfig {
    pub fn with_size(size: usize) -> Result<Self> {
        let cfg = SceneConfig {
            height: size,
            width: size,
            ..Self::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        check_extent(self.height, self.width)?;
        if self.min_size_px < 3 || self.min_size_px > self.max_size_px || self.max_size_px > self.height.min(self.width)
        {
            return Err(Error::Config(format!(
                "shape sizes {}..={} do not fit a {}x{} image",
                self.min_size_px, self.max_size_px, self.height, self.width
            )));
        }
        Ok(())
    }
}

/// Seed of scene `index` in a dataset generated from `base`.
pub fn scene_seed(base: u64, index: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = base.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Pixels covered by one shape, tested at pixel centres.
fn rasterize(class: ShapeClass, rng: &mut ChaCha8Rng, cfg: &SceneConfig) -> BinaryMask {
    let (h, w) = (cfg.height, cfg.width);
    let size = |rng: &mut ChaCha8Rng| rng.gen_range(cfg.min_size_px..=cfg.max_size_px) as Real;
    let (bw, bh) = match class {
        ShapeClass::Circle => {
            let s = size(rng);
            (s, s)
        }
        _ => (size(rng), size(rng)),
    };
    let x0 = rng.gen_range(0.0..=(w as Real - bw));
    let y0 = rng.gen_range(0.0..=(h as Real - bh));
    match class {
        ShapeClass::Circle => {
            let r = bw / 2.0;
            let (cx, cy) = (x0 + r, y0 + r);
            BinaryMask::from_fn(h, w, |y, x| {
                let (dx, dy) = (x as Real + 0.5 - cx, y as Real + 0.5 - cy);
                dx * dx + dy * dy <= r * r
            })
        }
        ShapeClass::Rectangle => BinaryMask::from_fn(h, w, |y, x| {
            let (px, py) = (x as Real + 0.5, y as Real + 0.5);
            px >= x0 && px < x0 + bw && py >= y0 && py < y0 + bh
        }),
        ShapeClass::Triangle => {
            let apex = rng.gen_range(0.2..0.8);
            let flip = rng.gen_bool(0.5);
            let (base_y, apex_y) = if flip { (y0, y0 + bh) } else { (y0 + bh, y0) };
            let v = [(x0, base_y), (x0 + bw, base_y), (x0 + bw * apex, apex_y)];
            let edge = |a: (Real, Real), b: (Real, Real), p: (Real, Real)| {
                (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0)
            };
            BinaryMask::from_fn(h, w, |y, x| {
                let p = (x as Real + 0.5, y as Real + 0.5);
                let d = [edge(v[0], v[1], p), edge(v[1], v[2], p), edge(v[2], v[0], p)];
                d.iter().all(|&e| e >= 0.0) || d.iter().all(|&e| e <= 0.0)
            })
        }
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> [Real; 3] {
    [rng.gen(), rng.gen(), rng.gen()]
}

/// A colour at L1 distance at least 0.6 from `from`.
fn contrasting_color(rng: &mut ChaCha8Rng, from: &[Real; 3]) -> [Real; 3] {
    for _ in 0..64 {
        let c = random_color(rng);
        if c.iter().zip(from).map(|(a, b)| (a - b).abs()).sum::<Real>() >= 0.6 {
            return c;
        }
    }
    from.map(|v| 1.0 - v)
}

/// Deterministic scene for `seed`.
pub fn generate_scene(seed: u64, cfg: &SceneConfig) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (cfg.height, cfg.width);
    let background = random_color(&mut rng);
    let wanted = rng.gen_range(0..=cfg.max_instances);

    // owner[p] = index into `placed` of the topmost shape covering p
    let mut owner: Vec<Option<usize>> = vec![None; h * w];
    let mut placed: Vec<(ShapeClass, [Real; 3])> = Vec::new();
    for _ in 0..wanted {
        let class = ShapeClass::ALL[rng.gen_range(0..3)];
        let color = contrasting_color(&mut rng, &background);
        for _ in 0..cfg.max_attempts {
            let shape = rasterize(class, &mut rng, cfg);
            let k = placed.len();
            let trial: Vec<Option<usize>> = owner
                .iter()
                .zip(shape.bits())
                .map(|(&o, &b)| if b { Some(k) } else { o })
                .collect();
            let mut visible = vec![0usize; k + 1];
            for o in trial.iter().flatten() {
                visible[*o] += 1;
            }
            if visible.iter().all(|&v| v >= cfg.min_visible_px) {
                owner = trial;
                placed.push((class, color));
                break;
            }
        }
    }

    let noise = cfg.noise;
    let mut image = vec![0.0; 3 * h * w];
    for p in 0..h * w {
        let color = owner[p].map_or(background, |k| placed[k].1);
        for c in 0..3 {
            let n = if noise > 0.0 {
                rng.gen_range(-noise..=noise)
            } else {
                0.0
            };
            image[c * h * w + p] = (color[c] + n).clamp(0.0, 1.0);
        }
    }

    let instances = placed
        .iter()
        .enumerate()
        .map(|(k, &(class, _))| {
            let mask = BinaryMask::from_fn(h, w, |y, x| owner[y * w + x] == Some(k));
            let bbox = mask.tight_box().expect("placed instances are visible");
            Instance { class, bbox, mask }
        })
        .collect();
    Ok(Scene {
        image: Tensor::new([3, h, w], image)?,
        instances,
    })
}

/// `count` scenes with seeds derived from `base_seed`.
pub fn generate_scenes(base_seed: u64, count: usize, cfg: &SceneConfig, exec: Exec) -> Result<Vec<(u64, Scene)>> {
    exec.map_range(count, |i| {
        let seed = scene_seed(base_seed, i as u64);
        generate_scene(seed, cfg).map(|s| (seed, s))
    })
    .into_iter()
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let cfg = SceneConfig::default();
        assert_eq!(generate_scene(5, &cfg).unwrap(), generate_scene(5, &cfg).unwrap());
        assert_ne!(generate_scene(5, &cfg).unwrap(), generate_scene(6, &cfg).unwrap());
    }

    #[test]
    fn instance_invariants() {
        let cfg = SceneConfig::default();
        let mut empty = 0;
        for seed in 0..200 {
            let s = generate_scene(seed, &cfg).unwrap();
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            empty += s.instances.is_empty() as usize;
            for (i, inst) in s.instances.iter().enumerate() {
                assert_eq!(Some(inst.bbox), inst.mask.tight_box());
                assert!(inst.mask.count() >= cfg.min_visible_px);
                for other in &s.instances[i + 1..] {
                    assert_eq!(inst.mask.iou(&other.mask), 0.0);
                }
            }
        }
        assert!(empty > 0);
    }

    #[test]
    fn parallel_generation_matches_sequential() {
        let cfg = SceneConfig::default();
        let a = generate_scenes(7, 16, &cfg, Exec::Sequential).unwrap();
        let b = generate_scenes(7, 16, &cfg, Exec::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_extent() {
        assert!(SceneConfig::with_size(48).is_err());
        assert!(SceneConfig::with_size(128).is_ok());
    }
}
