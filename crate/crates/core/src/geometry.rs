//! Box algebra and bilinear sampling.
//!
//! Sampling coordinates are `(x, y)` in pixel units of the sampled map, `x`
//! horizontal, with the origin at the centre of the top-left cell. Corners
//! that fall outside the map read as zero.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numeric::{Real, Tensor, Var};

/// Box as normalized centre, width and height.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxCxCyWh {
    pub cx: Real,
    pub cy: Real,
    pub w: Real,
    pub h: Real,
}

/// Box as corners `(x1, y1)` top-left and `(x2, y2)` bottom-right.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxXyxy {
    pub x1: Real,
    pub y1: Real,
    pub x2: Real,
    pub y2: Real,
}

impl BoxCxCyWh {
    pub fn new(cx: Real, cy: Real, w: Real, h: Real) -> Self {
        BoxCxCyWh { cx, cy, w, h }
    }

    pub fn from_array(v: [Real; 4]) -> Self {
        BoxCxCyWh::new(v[0], v[1], v[2], v[3])
    }

    pub fn to_array(self) -> [Real; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn to_xyxy(self) -> BoxXyxy {
        BoxXyxy {
            x1: self.cx - self.w / 2.0,
            y1: self.cy - self.h / 2.0,
            x2: self.cx + self.w / 2.0,
            y2: self.cy + self.h / 2.0,
        }
    }

    /// Components in [0, 1] with positive extent.
    pub fn is_valid_target(&self) -> bool {
        let unit = |v: Real| (0.0..=1.0).contains(&v);
        unit(self.cx) && unit(self.cy) && unit(self.w) && unit(self.h) && self.w > 0.0 && self.h > 0.0
    }
}

impl BoxXyxy {
    pub fn new(x1: Real, y1: Real, x2: Real, y2: Real) -> Self {
        BoxXyxy { x1, y1, x2, y2 }
    }

    pub fn to_cxcywh(self) -> BoxCxCyWh {
        BoxCxCyWh {
            cx: (self.x1 + self.x2) / 2.0,
            cy: (self.y1 + self.y2) / 2.0,
            w: self.x2 - self.x1,
            h: self.y2 - self.y1,
        }
    }

    pub fn area(&self) -> Real {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }

    fn intersection(&self, o: &BoxXyxy) -> Real {
        let w = (self.x2.min(o.x2) - self.x1.max(o.x1)).max(0.0);
        let h = (self.y2.min(o.y2) - self.y1.max(o.y1)).max(0.0);
        w * h
    }

    fn hull(&self, o: &BoxXyxy) -> BoxXyxy {
        BoxXyxy {
            x1: self.x1.min(o.x1),
            y1: self.y1.min(o.y1),
            x2: self.x2.max(o.x2),
            y2: self.y2.max(o.y2),
        }
    }
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: BoxXyxy, b: BoxXyxy) -> Real {
    let inter = a.intersection(&b);
    let union = a.area() + b.area() - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Generalized IoU: `IoU - (hull - union) / hull`.
pub fn generalized_iou(a: BoxXyxy, b: BoxXyxy) -> Result<Real> {
    let hull = a.hull(&b).area();
    if hull <= 0.0 {
        return Err(Error::Invalid("generalized IoU of boxes with a zero-area hull".into()));
    }
    let inter = a.intersection(&b);
    let union = a.area() + b.area() - inter;
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    Ok(iou - (hull - union) / hull)
}

/// Interpolation stencil of one sample point: up to four flat cell indices
/// with their weights and the weights' derivatives along x and y.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Stencil {
    pub idx: [Option<usize>; 4],
    pub w: [Real; 4],
    pub dwdx: [Real; 4],
    pub dwdy: [Real; 4],
}

pub(crate) fn stencil(height: usize, width: usize, x: Real, y: Real) -> Stencil {
    let x0 = x.floor();
    let y0 = y.floor();
    let tx = x - x0;
    let ty = y - y0;
    let cell = |cx: Real, cy: Real| -> Option<usize> {
        (cx >= 0.0 && cy >= 0.0 && cx < width as Real && cy < height as Real).then(|| cy as usize * width + cx as usize)
    };
    Stencil {
        idx: [
            cell(x0, y0),
            cell(x0 + 1.0, y0),
            cell(x0, y0 + 1.0),
            cell(x0 + 1.0, y0 + 1.0),
        ],
        w: [(1.0 - tx) * (1.0 - ty), tx * (1.0 - ty), (1.0 - tx) * ty, tx * ty],
        dwdx: [-(1.0 - ty), 1.0 - ty, -ty, ty],
        dwdy: [-(1.0 - tx), -tx, 1.0 - tx, tx],
    }
}

/// A point in pixel units of a particular map.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplePoint {
    pub x: Real,
    pub y: Real,
}

/// Bilinear sample of a `[C,H,W]` map at each point, returning `[C, P]`.
pub fn bilinear_sample(map: &Tensor, points: &[SamplePoint]) -> Result<Tensor> {
    let [c, h, w] = *map.shape() else {
        return shape_err("bilinear_sample", format!("map {:?} is not [C,H,W]", map.shape()));
    };
    let mut out = vec![0.0; c * points.len()];
    for (p, pt) in points.iter().enumerate() {
        let s = stencil(h, w, pt.x, pt.y);
        for ch in 0..c {
            let plane = &map.data()[ch * h * w..(ch + 1) * h * w];
            out[ch * points.len() + p] = s
                .idx
                .iter()
                .zip(&s.w)
                .filter_map(|(i, wt)| i.map(|i| wt * plane[i]))
                .sum();
        }
    }
    Tensor::new([c, points.len()], out)
}

impl<'t> Var<'t> {
    /// Differentiable bilinear sampling of `self[C,H,W]` at `points[P,2]`
    /// (`(x, y)` rows), giving `[C,P]`. Gradients flow to both the map and
    /// the coordinates.
    pub fn bilinear_sample(self, points: Var<'t>) -> Result<Var<'t>> {
        let (map, pts) = (self.value(), points.value());
        let [c, h, w] = *map.shape() else {
            return shape_err("bilinear_sample", format!("map {:?} is not [C,H,W]", map.shape()));
        };
        let [np, 2] = *pts.shape() else {
            return shape_err("bilinear_sample", format!("points {:?} are not [P,2]", pts.shape()));
        };
        let stencils: Vec<Stencil> = pts
            .data()
            .chunks_exact(2)
            .map(|xy| stencil(h, w, xy[0], xy[1]))
            .collect();
        let mut out = vec![0.0; c * np];
        for (p, s) in stencils.iter().enumerate() {
            for ch in 0..c {
                let plane = &map.data()[ch * h * w..(ch + 1) * h * w];
                out[ch * np + p] = s
                    .idx
                    .iter()
                    .zip(&s.w)
                    .filter_map(|(i, wt)| i.map(|i| wt * plane[i]))
                    .sum();
            }
        }
        self.tape().push(
            "bilinear_sample",
            Tensor::new([c, np], out)?,
            &[self, points],
            move |g, needs| {
                let dmap = needs[0].then(|| {
                    let mut d = vec![0.0; c * h * w];
                    for (p, s) in stencils.iter().enumerate() {
                        for ch in 0..c {
                            let go = g[ch * np + p];
                            for (i, wt) in s.idx.iter().zip(&s.w) {
                                if let Some(i) = i {
                                    d[ch * h * w + i] += wt * go;
                                }
                            }
                        }
                    }
                    d
                });
                let dpts = needs[1].then(|| {
                    let mut d = vec![0.0; np * 2];
                    for (p, s) in stencils.iter().enumerate() {
                        for ch in 0..c {
                            let go = g[ch * np + p];
                            let plane = &map.data()[ch * h * w..(ch + 1) * h * w];
                            for k in 0..4 {
                                if let Some(i) = s.idx[k] {
                                    d[2 * p] += go * s.dwdx[k] * plane[i];
                                    d[2 * p + 1] += go * s.dwdy[k] * plane[i];
                                }
                            }
                        }
                    }
                    d
                });
                vec![dmap, dpts]
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{finite_difference_check, Tape};
    use proptest::prelude::*;

    #[test]
    fn box_convert_examples() {
        assert_eq!(
            BoxCxCyWh::new(0.5, 0.5, 1.0, 1.0).to_xyxy(),
            BoxXyxy::new(0.0, 0.0, 1.0, 1.0)
        );
        assert_eq!(
            BoxCxCyWh::new(0.5, 0.5, 0.0, 0.0).to_xyxy(),
            BoxXyxy::new(0.5, 0.5, 0.5, 0.5)
        );
    }

    #[test]
    fn giou_examples() {
        let a = BoxXyxy::new(0.0, 0.0, 1.0, 1.0);
        assert_eq!(generalized_iou(a, a).unwrap(), 1.0);
        let b = BoxXyxy::new(2.0, 0.0, 3.0, 1.0);
        assert!((generalized_iou(a, b).unwrap() + 1.0 / 3.0).abs() < 1e-15);
        let half = BoxXyxy::new(0.0, 0.0, 0.5, 1.0);
        assert_eq!(iou(a, half), 0.5);
        assert_eq!(generalized_iou(a, half).unwrap(), 0.5);
        let p = BoxXyxy::new(0.3, 0.3, 0.3, 0.3);
        assert!(generalized_iou(p, p).is_err());
    }

    #[test]
    fn sampling_examples() {
        let map = Tensor::new([1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let out = bilinear_sample(&map, &[SamplePoint { x: 0.5, y: 0.5 }]).unwrap();
        assert_eq!(out.data(), &[1.5]);
        let out = bilinear_sample(&map, &[SamplePoint { x: -10.0, y: -10.0 }]).unwrap();
        assert_eq!(out.data(), &[0.0]);

        let map = Tensor::from_fn([3, 4, 5], |i| (i as Real * 0.37).sin());
        for i in 0..4 {
            for j in 0..5 {
                let out = bilinear_sample(
                    &map,
                    &[SamplePoint {
                        x: j as Real,
                        y: i as Real,
                    }],
                )
                .unwrap();
                for ch in 0..3 {
                    assert_eq!(out.data()[ch], map.get(&[ch, i, j]));
                }
            }
        }
    }

    #[test]
    fn sampling_gradients_match_finite_differences() {
        let map = Tensor::from_fn([2, 4, 4], |i| ((i * 17 % 13) as Real) * 0.2 - 1.0);
        let points = Tensor::new([3, 2], vec![0.3, 1.6, 2.25, 0.7, 1.4, 2.9]).unwrap();
        let pts = points.clone();
        let err = finite_difference_check(
            move |tape: &Tape, m| m.bilinear_sample(tape.constant(pts.clone()))?.square()?.sum(),
            &map,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
        let err = finite_difference_check(
            move |tape: &Tape, p| tape.constant(map.clone()).bilinear_sample(p)?.square()?.sum(),
            &points,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    fn arb_box() -> impl Strategy<Value = BoxXyxy> {
        (0.0..0.8f64, 0.0..0.8f64, 0.01..0.5f64, 0.01..0.5f64)
            .prop_map(|(x, y, w, h)| BoxXyxy::new(x as Real, y as Real, (x + w) as Real, (y + h) as Real))
    }

    proptest! {
        #[test]
        fn giou_properties(a in arb_box(), b in arb_box()) {
            let g = generalized_iou(a, b).unwrap();
            prop_assert_eq!(g, generalized_iou(b, a).unwrap());
            prop_assert!((generalized_iou(a, a).unwrap() - 1.0).abs() < 1e-12);
            let i = iou(a, b);
            prop_assert!(g <= i + 1e-15 && g >= i - 1.0 - 1e-15);
        }

        #[test]
        fn box_round_trip(cx in 0.0..1.0f64, cy in 0.0..1.0f64, w in 0.0..1.0f64, h in 0.0..1.0f64) {
            let b = BoxCxCyWh::new(cx as Real, cy as Real, w as Real, h as Real);
            let back = b.to_xyxy().to_cxcywh();
            for (x, y) in b.to_array().iter().zip(back.to_array()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn sampling_is_linear_between_grid_points(i in 0usize..3, j in 0usize..4, t in 0.0..1.0f64) {
            let map = Tensor::from_fn([1, 4, 5], |k| ((k * 31 % 17) as Real) - 8.0);
            let t = t as Real;
            let s = bilinear_sample(&map, &[SamplePoint { x: j as Real + t, y: i as Real }]).unwrap();
            let expect = (1.0 - t) * map.get(&[0, i, j]) + t * map.get(&[0, i, j + 1]);
            prop_assert!((s.data()[0] - expect).abs() < 1e-12);
        }
    }
}
