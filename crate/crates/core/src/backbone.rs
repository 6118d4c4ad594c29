//! Toy convolutional backbone and the F3–F6 pyramid adapter.

use crate::deformable::LevelLayout;
use crate::error::{Error, Result};
use crate::numeric::{Real, Tensor, Var};
use crate::params::{Bound, Init, ParamId, ParamStore};

/// Input extents must be multiples of this (stride of the coarsest level).
pub const INPUT_MULTIPLE: usize = 64;

#[derive(Clone, Debug)]
pub struct Conv {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        (c_in, c_out, k): (usize, usize, usize),
        stride: usize,
    ) -> Self {
        let fan_in = c_in * k * k;
        let bound = (6.0 / fan_in as Real).sqrt();
        Conv {
            kernel: store.add(format!("{name}.kernel"), init.uniform([c_out, c_in, k, k], bound)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros([c_out])),
            stride,
            padding: k / 2,
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.conv2d(p.var(self.kernel), Some(p.var(self.bias)), self.stride, self.padding)
    }
}

/// Backbone outputs at strides 8, 16 and 32.
pub struct Stages<'t> {
    pub c3: Var<'t>,
    pub c4: Var<'t>,
    pub c5: Var<'t>,
}

/// Five stride-2 `3x3` conv + relu stages.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub stages: Vec<Conv>,
    pub channels: Vec<usize>,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, init: &mut Init, channels: &[usize]) -> Result<Self> {
        if channels.len() != 5 || channels.contains(&0) {
            return Err(Error::Config(format!(
                "backbone needs five positive stage widths, got {channels:?}"
            )));
        }
        let mut c_in = 3;
        let stages = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let conv = Conv::new(store, init, &format!("backbone.stage{}", i + 1), (c_in, c, 3), 2);
                c_in = c;
                conv
            })
            .collect();
        Ok(Backbone {
            stages,
            channels: channels.to_vec(),
        })
    }

    /// Channels of C3, C4, C5.
    pub fn out_channels(&self) -> [usize; 3] {
        [self.channels[2], self.channels[3], self.channels[4]]
    }

    pub fn extract_stages<'t>(&self, p: &Bound<'t>, image: Var<'t>) -> Result<Stages<'t>> {
        let shape = image.shape();
        let [3, h, w] = shape[..] else {
            return Err(Error::Shape {
                op: "backbone",
                detail: format!("image {shape:?} is not [3,H,W]"),
            });
        };
        check_extent(h, w)?;
        let mut x = image;
        let mut outs = Vec::with_capacity(5);
        for conv in &self.stages {
            x = conv.forward(p, x)?.relu()?;
            outs.push(x);
        }
        Ok(Stages {
            c3: outs[2],
            c4: outs[3],
            c5: outs[4],
        })
    }
}

pub fn check_extent(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || !h.is_multiple_of(INPUT_MULTIPLE) || !w.is_multiple_of(INPUT_MULTIPLE) {
        return Err(Error::Invalid(format!(
            "image extent {h}x{w} must be a positive multiple of {INPUT_MULTIPLE}"
        )));
    }
    Ok(())
}

/// Multi-scale maps F3..F6 (or refined P3..P6), each `[d, H_l, W_l]`.
pub struct FeaturePyramid<'t> {
    pub levels: Vec<Var<'t>>,
}

impl<'t> FeaturePyramid<'t> {
    pub fn channels(&self) -> usize {
        self.levels[0].shape()[0]
    }

    /// Token-major concatenation `[sum H_l W_l, d]` and the level layout.
    pub fn flatten(&self) -> Result<(Var<'t>, LevelLayout)> {
        let mut tokens = Vec::with_capacity(self.levels.len());
        let mut shapes = Vec::with_capacity(self.levels.len());
        for level in &self.levels {
            let s = level.shape();
            let (d, h, w) = (s[0], s[1], s[2]);
            tokens.push(level.reshape([d, h * w])?.t()?);
            shapes.push((h, w));
        }
        Ok((Var::concat(&tokens, 0)?, LevelLayout::new(shapes)))
    }

    /// Inverse of [`flatten`](Self::flatten).
    pub fn from_tokens(tokens: Var<'t>, layout: &LevelLayout) -> Result<Self> {
        let d = tokens.shape()[1];
        let levels = layout
            .shapes()
            .iter()
            .zip(layout.starts())
            .map(|(&(h, w), &start)| tokens.narrow(0, start, h * w)?.t()?.reshape([d, h, w]))
            .collect::<Result<_>>()?;
        Ok(FeaturePyramid { levels })
    }
}

/// `1x1` projections of C3–C5 and a `3x3` stride-2 conv of C5 for F6.
#[derive(Clone, Debug)]
pub struct PyramidAdapter {
    pub lateral: Vec<Conv>,
    pub extra: Conv,
}

impl PyramidAdapter {
    pub fn new(store: &mut ParamStore, init: &mut Init, stage_channels: [usize; 3], d: usize) -> Self {
        let lateral = stage_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| Conv::new(store, init, &format!("pyramid.f{}", i + 3), (c, d, 1), 1))
            .collect();
        let extra = Conv::new(store, init, "pyramid.f6", (stage_channels[2], d, 3), 2);
        PyramidAdapter { lateral, extra }
    }

    pub fn build_pyramid<'t>(&self, p: &Bound<'t>, stages: &Stages<'t>) -> Result<FeaturePyramid<'t>> {
        let inputs = [stages.c3, stages.c4, stages.c5];
        let mut levels = Vec::with_capacity(4);
        for (conv, x) in self.lateral.iter().zip(inputs) {
            levels.push(conv.forward(p, x)?);
        }
        levels.push(self.extra.forward(p, stages.c5)?);
        Ok(FeaturePyramid { levels })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Tape;

    fn setup(d: usize) -> (ParamStore, Backbone, PyramidAdapter) {
        let mut store = ParamStore::new();
        let mut init = Init::new(3);
        let bb = Backbone::new(&mut store, &mut init, &[8, 16, 32, 32, 32]).unwrap();
        let pa = PyramidAdapter::new(&mut store, &mut init, bb.out_channels(), d);
        (store, bb, pa)
    }

    fn image(seed: u64) -> Tensor {
        let mut init = Init::new(seed);
        init.uniform([3, 64, 64], 1.0)
    }

    #[test]
    fn stage_and_level_extents() {
        let (store, bb, pa) = setup(32);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let st = bb.extract_stages(&p, tape.constant(image(1))).unwrap();
        assert_eq!(st.c3.shape(), vec![32, 8, 8]);
        assert_eq!(st.c4.shape(), vec![32, 4, 4]);
        assert_eq!(st.c5.shape(), vec![32, 2, 2]);
        let pyr = pa.build_pyramid(&p, &st).unwrap();
        let shapes: Vec<_> = pyr.levels.iter().map(|l| l.shape()).collect();
        assert_eq!(
            shapes,
            vec![vec![32, 8, 8], vec![32, 4, 4], vec![32, 2, 2], vec![32, 1, 1]]
        );
        let (tokens, layout) = pyr.flatten().unwrap();
        assert_eq!(tokens.shape(), vec![85, 32]);
        let back = FeaturePyramid::from_tokens(tokens, &layout).unwrap();
        for (a, b) in back.levels.iter().zip(&pyr.levels) {
            assert_eq!(*a.value(), *b.value());
        }
    }

    #[test]
    fn zero_image_gives_zero_stages() {
        let (store, bb, _) = setup(32);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let st = bb
            .extract_stages(&p, tape.constant(Tensor::zeros([3, 64, 64])))
            .unwrap();
        for s in [st.c3, st.c4, st.c5] {
            assert!(s.value().data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn deterministic_stages() {
        let run = || {
            let (store, bb, _) = setup(32);
            let tape = Tape::new();
            let p = store.bind(&tape);
            let st = bb.extract_stages(&p, tape.constant(image(9))).unwrap();
            st.c5.value().data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn rejects_indivisible_extent() {
        let (store, bb, _) = setup(32);
        let tape = Tape::new();
        let p = store.bind(&tape);
        assert!(bb
            .extract_stages(&p, tape.constant(Tensor::zeros([3, 48, 64])))
            .is_err());
    }

    #[test]
    fn identity_lateral_projection() {
        let (mut store, bb, pa) = setup(32);
        for conv in &pa.lateral {
            let eye = Tensor::eye(32).reshape([32, 32, 1, 1]).unwrap();
            store.set(conv.kernel, eye).unwrap();
        }
        let tape = Tape::new();
        let p = store.bind(&tape);
        let st = bb.extract_stages(&p, tape.constant(image(4))).unwrap();
        let pyr = pa.build_pyramid(&p, &st).unwrap();
        assert_eq!(*pyr.levels[0].value(), *st.c3.value());
        assert_eq!(*pyr.levels[2].value(), *st.c5.value());
    }
}
