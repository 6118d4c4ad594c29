//! Sinusoidal 2-D positional encodings, absolute and box-centre relative.
//!
//! Channels `[0, d/2)` encode x and `[d/2, d)` encode y. Within each half,
//! channel `2i` is `sin(p / T^(2i/(d/2)))` and `2i+1` is the matching cosine,
//! where `p` is the pixel index (absolute) or the pixel index minus the query
//! centre (relative).

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::numeric::{Real, Tensor, Var};

/// Which encoding the instance-aware mask head adds to its input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PeMode {
    None,
    Abs,
    Rel,
}

impl std::str::FromStr for PeMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(PeMode::None),
            "abs" => Ok(PeMode::Abs),
            "rel" => Ok(PeMode::Rel),
            _ => Err(Error::Config(format!("pe mode must be none|abs|rel, got {s:?}"))),
        }
    }
}

impl std::fmt::Display for PeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PeMode::None => "none",
            PeMode::Abs => "abs",
            PeMode::Rel => "rel",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncodingConfig {
    d_model: usize,
    temperature: Real,
    /// Rescale positions by `2π / extent` before encoding.
    normalize_to_2pi: bool,
}

impl EncodingConfig {
    pub fn new(d_model: usize) -> Result<Self> {
        Self::with_options(d_model, 10000.0, false)
    }

    pub fn with_options(d_model: usize, temperature: Real, normalize_to_2pi: bool) -> Result<Self> {
        if d_model == 0 || !d_model.is_multiple_of(4) {
            return Err(Error::Invalid(format!(
                "positional encoding width {d_model} must be a positive multiple of 4"
            )));
        }
        if !(temperature > 0.0) {
            return Err(Error::Invalid(
                "positional encoding temperature must be positive".into(),
            ));
        }
        Ok(EncodingConfig {
            d_model,
            temperature,
            normalize_to_2pi,
        })
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    fn half(&self) -> usize {
        self.d_model / 2
    }

    /// Angular frequency of sin/cos pair `i` within a half.
    fn frequency(&self, i: usize) -> Real {
        1.0 / self.temperature.powf((2 * i) as Real / self.half() as Real)
    }

    fn scale(&self, extent: usize) -> Real {
        if self.normalize_to_2pi {
            2.0 * PI as Real / extent as Real
        } else {
            1.0
        }
    }

    /// Writes the encoding of displacement `(dx, dy)` into `out[d_model]`.
    fn encode(&self, dx: Real, dy: Real, out: &mut [Real]) {
        let half = self.half();
        for i in 0..half / 2 {
            let f = self.frequency(i);
            let (ax, ay) = (dx * f, dy * f);
            out[2 * i] = ax.sin();
            out[2 * i + 1] = ax.cos();
            out[half + 2 * i] = ay.sin();
            out[half + 2 * i + 1] = ay.cos();
        }
    }
}

/// Absolute encoding of an `H x W` grid, `[d_model, H, W]`.
pub fn absolute_pe_2d(height: usize, width: usize, cfg: &EncodingConfig) -> Result<Tensor> {
    relative_pe_2d(height, width, (0.0, 0.0), cfg)
}

/// Encoding of `pos - centre` for every pixel, `[d_model, H, W]`. `centre`
/// is `(x, y)` in pixel units of the grid and may be fractional or off-grid.
pub fn relative_pe_2d(height: usize, width: usize, center: (Real, Real), cfg: &EncodingConfig) -> Result<Tensor> {
    let tokens = pe_tokens(height, width, center, cfg)?;
    let d = cfg.d_model;
    let hw = height * width;
    let mut out = vec![0.0; d * hw];
    for p in 0..hw {
        for c in 0..d {
            out[c * hw + p] = tokens[p * d + c];
        }
    }
    Tensor::new([d, height, width], out)
}

fn pe_tokens(height: usize, width: usize, center: (Real, Real), cfg: &EncodingConfig) -> Result<Vec<Real>> {
    if height == 0 || width == 0 {
        return Err(Error::Invalid("positional encoding grid must be non-empty".into()));
    }
    if !center.0.is_finite() || !center.1.is_finite() {
        return Err(Error::Invalid("positional encoding centre must be finite".into()));
    }
    let d = cfg.d_model;
    let (sx, sy) = (cfg.scale(width), cfg.scale(height));
    let mut out = vec![0.0; height * width * d];
    for y in 0..height {
        for x in 0..width {
            let p = y * width + x;
            let dx = (x as Real - center.0) * sx;
            let dy = (y as Real - center.1) * sy;
            cfg.encode(dx, dy, &mut out[p * d..(p + 1) * d]);
        }
    }
    Ok(out)
}

/// Absolute encoding in token-major layout `[H*W, d_model]`.
pub fn absolute_pe_tokens(height: usize, width: usize, cfg: &EncodingConfig) -> Result<Tensor> {
    Tensor::new(
        [height * width, cfg.d_model],
        pe_tokens(height, width, (0.0, 0.0), cfg)?,
    )
}

/// Relative encoding in token-major layout `[H*W, d_model]`, differentiable
/// with respect to `center` (`[2]`, pixel units).
pub fn relative_pe_tokens<'t>(center: Var<'t>, height: usize, width: usize, cfg: &EncodingConfig) -> Result<Var<'t>> {
    let c = center.value();
    if c.len() != 2 {
        return Err(Error::Shape {
            op: "relative_pe",
            detail: format!("centre {:?} is not [2]", c.shape()),
        });
    }
    let cx = c.data()[0];
    let cy = c.data()[1];
    let values = pe_tokens(height, width, (cx, cy), cfg)?;
    let cfg = *cfg;
    let d = cfg.d_model;
    let half = cfg.half();
    let (sx, sy) = (cfg.scale(width), cfg.scale(height));
    let saved = values.clone();
    center.tape().push(
        "relative_pe",
        Tensor::new([height * width, d], values)?,
        &[center],
        move |g, _| {
            // d sin(a)/dc = -s f cos(a) and d cos(a)/dc = s f sin(a), with
            // cos(a) and sin(a) read back from the neighbouring channel.
            let mut dcx = 0.0;
            let mut dcy = 0.0;
            for (gt, vt) in g.chunks_exact(d).zip(saved.chunks_exact(d)) {
                for i in 0..half / 2 {
                    let f = cfg.frequency(i);
                    let (sx_, cx_) = (vt[2 * i], vt[2 * i + 1]);
                    let (sy_, cy_) = (vt[half + 2 * i], vt[half + 2 * i + 1]);
                    dcx += sx * f * (-gt[2 * i] * cx_ + gt[2 * i + 1] * sx_);
                    dcy += sy * f * (-gt[half + 2 * i] * cy_ + gt[half + 2 * i + 1] * sy_);
                }
            }
            vec![Some(vec![dcx, dcy])]
        },
    )
}
