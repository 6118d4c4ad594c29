//! Binary masks, run-length encoding and grid resampling.

use crate::error::{Error, Result};
use crate::geometry::BoxCxCyWh;
use crate::numeric::{Real, Tensor};

/// Row-major binary mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let bits = (0..height * width).map(|k| f(k / width, k % width)).collect();
        BinaryMask { height, width, bits }
    }

    /// Pixels with probability above 0.5.
    pub fn from_probs(height: usize, width: usize, probs: &[Real]) -> Result<Self> {
        if probs.len() != height * width {
            return Err(Error::Invalid(format!(
                "{} probabilities for a {height}x{width} mask",
                probs.len()
            )));
        }
        Ok(BinaryMask {
            height,
            width,
            bits: probs.iter().map(|&p| p > 0.5).collect(),
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Tight box of the set pixels in normalized coordinates, pixel `x`
    /// covering `[x, x + 1)`.
    pub fn tight_box(&self) -> Option<BoxCxCyWh> {
        let (mut x1, mut y1, mut x2, mut y2) = (usize::MAX, usize::MAX, 0, 0);
        for (k, _) in self.bits.iter().enumerate().filter(|(_, &b)| b) {
            let (y, x) = (k / self.width, k % self.width);
            x1 = x1.min(x);
            y1 = y1.min(y);
            x2 = x2.max(x + 1);
            y2 = y2.max(y + 1);
        }
        (x1 != usize::MAX).then(|| {
            let (w, h) = (self.width as Real, self.height as Real);
            crate::geometry::BoxXyxy::new(x1 as Real / w, y1 as Real / h, x2 as Real / w, y2 as Real / h).to_cxcywh()
        })
    }

    /// Intersection over union; 0 when both masks are empty.
    pub fn iou(&self, other: &BinaryMask) -> Real {
        let (mut inter, mut union) = (0usize, 0usize);
        for (&a, &b) in self.bits.iter().zip(&other.bits) {
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        if union == 0 {
            0.0
        } else {
            inter as Real / union as Real
        }
    }

    /// Alternating run lengths, row-major, starting with a run of zeros
    /// (possibly of length 0).
    pub fn to_rle(&self) -> Vec<u32> {
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0u32;
        for &b in &self.bits {
            if b != current {
                runs.push(len);
                current = b;
                len = 0;
            }
            len += 1;
        }
        runs.push(len);
        runs
    }

    pub fn from_rle(height: usize, width: usize, runs: &[u32]) -> Result<Self> {
        let total: u64 = runs.iter().map(|&r| r as u64).sum();
        if total != (height * width) as u64 {
            return Err(Error::Format(format!(
                "run lengths sum to {total}, expected {}",
                height * width
            )));
        }
        let mut bits = Vec::with_capacity(height * width);
        for (i, &r) in runs.iter().enumerate() {
            bits.extend(std::iter::repeat_n(i % 2 == 1, r as usize));
        }
        Ok(BinaryMask { height, width, bits })
    }

    /// Block-max pooling: a cell is set when any pixel of its block is.
    pub fn downsample(&self, stride: usize) -> Result<BinaryMask> {
        if stride == 0 || !self.height.is_multiple_of(stride) || !self.width.is_multiple_of(stride) {
            return Err(Error::Invalid(format!(
                "{}x{} mask is not divisible by stride {stride}",
                self.height, self.width
            )));
        }
        let (h, w) = (self.height / stride, self.width / stride);
        let mut out = BinaryMask::new(h, w);
        for (k, _) in self.bits.iter().enumerate().filter(|(_, &b)| b) {
            let (y, x) = (k / self.width, k % self.width);
            out.set(y / stride, x / stride, true);
        }
        Ok(out)
    }

    /// Replicates every cell into a `factor x factor` block.
    pub fn upsample_nearest(&self, factor: usize) -> BinaryMask {
        BinaryMask::from_fn(self.height * factor, self.width * factor, |y, x| {
            self.get(y / factor, x / factor)
        })
    }

    /// `[H * W]` tensor of zeros and ones.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            [self.bits.len()],
            self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
        .expect("mask length")
    }
}

/// Bilinear resize of a row-major `h x w` map by an integer factor, sampling
/// at output pixel centres and clamping at the borders.
pub fn upsample_bilinear(values: &[Real], height: usize, width: usize, factor: usize) -> Vec<Real> {
    let (oh, ow) = (height * factor, width * factor);
    let src = |o: usize, n: usize| {
        let s = ((o as Real + 0.5) / factor as Real - 0.5).clamp(0.0, (n - 1) as Real);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, s - i0 as Real)
    };
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let (y0, y1, fy) = src(y, height);
        for x in 0..ow {
            let (x0, x1, fx) = src(x, width);
            let v = |yy: usize, xx: usize| values[yy * width + xx];
            let top = v(y0, x0) * (1.0 - fx) + v(y0, x1) * fx;
            let bottom = v(y1, x0) * (1.0 - fx) + v(y1, x1) * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn downsample_examples() {
        let ones = BinaryMask::from_fn(16, 16, |_, _| true);
        assert_eq!(ones.downsample(8).unwrap().count(), 4);
        let mut single = BinaryMask::new(64, 64);
        single.set(13, 50, true);
        let d = single.downsample(8).unwrap();
        assert_eq!(d.count(), 1);
        assert!(d.get(1, 6));
        let dots = BinaryMask::from_fn(64, 64, |y, x| y % 8 == 3 && x % 8 == 5);
        assert_eq!(dots.downsample(8).unwrap().count(), 64);
        assert!(single.downsample(7).is_err());
    }

    #[test]
    fn tight_box_of_a_block() {
        let m = BinaryMask::from_fn(64, 64, |y, x| (10..20).contains(&y) && (32..48).contains(&x));
        let b = m.tight_box().unwrap();
        assert_eq!(b.to_array(), [40.0 / 64.0, 15.0 / 64.0, 16.0 / 64.0, 10.0 / 64.0]);
        assert!(BinaryMask::new(4, 4).tight_box().is_none());
    }

    #[test]
    fn rle_starts_with_zeros() {
        let m = BinaryMask::from_fn(2, 3, |y, x| y == 0 && x < 2);
        assert_eq!(m.to_rle(), vec![0, 2, 4]);
        assert_eq!(BinaryMask::from_rle(2, 3, &[0, 2, 4]).unwrap(), m);
        assert!(BinaryMask::from_rle(2, 3, &[1, 2]).is_err());
    }

    #[test]
    fn bilinear_preserves_constants() {
        let up = upsample_bilinear(&[0.3; 12], 3, 4, 8);
        assert_eq!(up.len(), 24 * 32);
        assert!(up.iter().all(|&v| (v - 0.3).abs() < 1e-15));
    }

    proptest! {
        #[test]
        fn rle_round_trip(bits in proptest::collection::vec(any::<bool>(), 48)) {
            let m = BinaryMask::from_fn(6, 8, |y, x| bits[y * 8 + x]);
            prop_assert_eq!(BinaryMask::from_rle(6, 8, &m.to_rle()).unwrap(), m);
        }

        #[test]
        fn block_constant_masks_survive(bits in proptest::collection::vec(any::<bool>(), 16)) {
            let coarse = BinaryMask::from_fn(4, 4, |y, x| bits[y * 4 + x]);
            let fine = coarse.upsample_nearest(8);
            prop_assert_eq!(fine.downsample(8).unwrap(), coarse.clone());
            prop_assert_eq!(fine.downsample(8).unwrap().upsample_nearest(8), fine);
        }
    }
}
