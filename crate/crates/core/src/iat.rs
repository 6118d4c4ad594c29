//! Instance-aware mask head: the shared mask feature and the deformable
//! layer whose three projections are generated per query.
//!
//! Every mask-grid pixel acts as a query located at its own cell. Its input
//! feature (mask feature plus positional encoding) drives the generated
//! offset and attention-weight projections; the sampled features of all heads
//! are concatenated and the generated output projection maps them to a
//! single logit.

use crate::deformable::{ms_deform_sample, EncoderLayer, LevelLayout, SampleGeometry};
use crate::error::{shape_err, Error, Result};
use crate::layers::{LayerNorm, Linear};
use crate::numeric::{Real, Tensor, Var};
use crate::params::{Bound, Init, ParamStore};
use crate::posenc::{absolute_pe_tokens, relative_pe_tokens, EncodingConfig, PeMode};

/// Stride of the mask grid relative to the input image.
pub const MASK_STRIDE: usize = 8;

/// Channel, head and point counts of the dynamic layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DynamicShape {
    pub channels: usize,
    pub heads: usize,
    pub points: usize,
}

impl DynamicShape {
    pub fn new(channels: usize, heads: usize, points: usize) -> Result<Self> {
        if channels == 0 || heads == 0 || points == 0 {
            return Err(Error::Config("dynamic layer sizes must be positive".into()));
        }
        if !channels.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "mask channels {channels} are not divisible by {heads} heads"
            )));
        }
        Ok(DynamicShape {
            channels,
            heads,
            points,
        })
    }

    fn samples(&self) -> usize {
        self.heads * self.points
    }

    /// `(rows, cols)` of the six pieces in unpack order; biases have one column.
    fn pieces(&self) -> [(usize, usize); 6] {
        let (c, s) = (self.channels, self.samples());
        [(2 * s, c), (2 * s, 1), (s, c), (s, 1), (1, c), (1, 1)]
    }

    pub fn param_count(&self) -> usize {
        self.pieces().iter().map(|(r, c)| r * c).sum()
    }
}

/// Length of the dynamic parameter vector: `(C + 1)(3MK + 1)`.
pub fn expected_param_count(channels: usize, heads: usize, points: usize) -> Result<usize> {
    Ok(DynamicShape::new(channels, heads, points)?.param_count())
}

/// The three generated projections of one instance.
pub struct DynamicLayers<'t> {
    pub shape: DynamicShape,
    /// `[2MK, C]`
    pub offset_weight: Var<'t>,
    /// `[2MK]`
    pub offset_bias: Var<'t>,
    /// `[MK, C]`
    pub attn_weight: Var<'t>,
    /// `[MK]`
    pub attn_bias: Var<'t>,
    /// `[1, C]`
    pub output_weight: Var<'t>,
    /// `[1]`
    pub output_bias: Var<'t>,
}

/// Splits a `[D]` vector (or a `[1, D]` row) into the dynamic layers, in the
/// order offset weight, offset bias, attention weight, attention bias,
/// output weight, output bias; each piece row-major.
pub fn unpack_params<'t>(params: Var<'t>, shape: DynamicShape) -> Result<DynamicLayers<'t>> {
    let d = shape.param_count();
    if params.len() != d {
        return shape_err(
            "unpack_params",
            format!("{} parameters, {:?} needs {d}", params.len(), shape),
        );
    }
    let flat = params.reshape([d])?;
    let mut start = 0;
    let mut next = |(rows, cols): (usize, usize)| -> Result<Var<'t>> {
        let piece = flat.narrow(0, start, rows * cols)?;
        start += rows * cols;
        if cols == 1 {
            Ok(piece)
        } else {
            piece.reshape([rows, cols])
        }
    };
    let [ow, ob, aw, ab, uw, ub] = shape.pieces();
    Ok(DynamicLayers {
        shape,
        offset_weight: next(ow)?,
        offset_bias: next(ob)?,
        attn_weight: next(aw)?,
        attn_bias: next(ab)?,
        output_weight: next(uw)?,
        output_bias: next(ub)?,
    })
}

impl<'t> DynamicLayers<'t> {
    /// Inverse of [`unpack_params`], `[D]`.
    pub fn flatten(&self) -> Result<Var<'t>> {
        let parts = [
            self.offset_weight,
            self.offset_bias,
            self.attn_weight,
            self.attn_bias,
            self.output_weight,
            self.output_bias,
        ]
        .iter()
        .map(|v| v.reshape([v.len()]))
        .collect::<Result<Vec<_>>>()?;
        Var::concat(&parts, 0)
    }
}

/// Default dynamic parameters: radial offsets, uniform attention and a zero
/// output layer. Used as the initial mask-branch bias.
pub fn default_dynamic_params(shape: DynamicShape) -> Tensor {
    let offset_bias = crate::deformable::radial_offset_bias(shape.heads, 1, shape.points);
    let mut out = vec![0.0; shape.param_count()];
    let start = 2 * shape.samples() * shape.channels;
    out[start..start + offset_bias.len()].copy_from_slice(offset_bias.data());
    Tensor::new([out.len()], out).expect("dynamic layout")
}

/// Shared mask feature in token-major layout.
pub struct MaskFeature<'t> {
    /// `[H_mask * W_mask, C_mask]`
    pub tokens: Var<'t>,
    pub height: usize,
    pub width: usize,
}

impl MaskFeature<'_> {
    pub fn channels(&self) -> usize {
        self.tokens.shape()[1]
    }

    /// Channel-major copy `[C_mask, H, W]`.
    pub fn to_map(&self) -> Result<Tensor> {
        let t = self.tokens.value();
        let c = self.channels();
        let hw = self.height * self.width;
        let data = crate::numeric::kernels::transpose(t.data(), hw, c);
        Tensor::new([c, self.height, self.width], data)
    }
}

/// Single-level deformable encoder layers over P3 followed by a projection
/// to `C_mask` channels with layer normalization.
#[derive(Clone, Debug)]
pub struct MaskEncoder {
    pub layers: Vec<EncoderLayer>,
    pub proj: Linear,
    pub norm: LayerNorm,
}

impl MaskEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        num_layers: usize,
        d: usize,
        ffn: usize,
        heads: usize,
        points: usize,
        c_mask: usize,
    ) -> Result<Self> {
        let layers = (0..num_layers)
            .map(|i| EncoderLayer::new(store, init, &format!("mask_encoder.{i}"), d, ffn, heads, 1, points))
            .collect::<Result<_>>()?;
        Ok(MaskEncoder {
            layers,
            proj: Linear::new(store, init, "mask_encoder.proj", d, c_mask),
            norm: LayerNorm::new(store, "mask_encoder.norm", c_mask),
        })
    }

    /// `p3`: `[H*W, d]` tokens of the finest refined level.
    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        p3: Var<'t>,
        height: usize,
        width: usize,
        pe: &EncodingConfig,
    ) -> Result<MaskFeature<'t>> {
        let layout = LevelLayout::single(height, width);
        let pos = p.tape().constant(absolute_pe_tokens(height, width, pe)?);
        let reference = p.tape().constant(layout.reference_points());
        let mut x = p3;
        for layer in &self.layers {
            x = layer.forward(p, x, pos, reference, &layout, "mask_encoder")?;
        }
        let tokens = self.norm.forward(p, self.proj.forward(p, x)?)?;
        Ok(MaskFeature { tokens, height, width })
    }
}

/// Mask of one instance on the mask grid, `[H_mask * W_mask]` row-major.
pub struct MaskPrediction<'t> {
    pub logits: Var<'t>,
    pub probs: Var<'t>,
}

/// Positional input added to the mask feature.
pub fn mask_positional_input<'t>(
    fm: &MaskFeature<'t>,
    center: Var<'t>,
    mode: PeMode,
    pe: &EncodingConfig,
) -> Result<Option<Var<'t>>> {
    let tape = fm.tokens.tape();
    match mode {
        PeMode::None => Ok(None),
        PeMode::Abs => Ok(Some(tape.constant(absolute_pe_tokens(fm.height, fm.width, pe)?))),
        PeMode::Rel => {
            // normalized centre to pixel units of the grid (cell centres at integers)
            let extent = tape.constant(Tensor::new([2], vec![fm.width as Real, fm.height as Real])?);
            let center_px = center.reshape([2])?.mul(extent)?.add_scalar(-0.5)?;
            Ok(Some(relative_pe_tokens(center_px, fm.height, fm.width, pe)?))
        }
    }
}

/// Decodes one instance mask from the shared feature. `center` is the
/// instance's normalized box centre `(cx, cy)`, `[2]`.
pub fn predict_mask<'t>(
    p: &Bound<'t>,
    fm: &MaskFeature<'t>,
    center: Var<'t>,
    dyn_layers: &DynamicLayers<'t>,
    mode: PeMode,
    pe: &EncodingConfig,
) -> Result<MaskPrediction<'t>> {
    let shape = dyn_layers.shape;
    if fm.channels() != shape.channels {
        return shape_err(
            "predict_mask",
            format!(
                "mask feature has {} channels, dynamic layers expect {}",
                fm.channels(),
                shape.channels
            ),
        );
    }
    if pe.d_model() != shape.channels && mode != PeMode::None {
        return shape_err(
            "predict_mask",
            format!("encoding width {} vs {} channels", pe.d_model(), shape.channels),
        );
    }
    let hw = fm.height * fm.width;
    let input = match mask_positional_input(fm, center, mode, pe)? {
        Some(pos) => fm.tokens.add(pos)?,
        None => fm.tokens,
    };
    let offsets = input.linear(dyn_layers.offset_weight, Some(dyn_layers.offset_bias))?;
    let weights = input
        .linear(dyn_layers.attn_weight, Some(dyn_layers.attn_bias))?
        .reshape([hw * shape.heads, shape.points])?
        .softmax(1)?;
    p.record("iat", &weights);
    let weights = weights.reshape([hw, shape.samples()])?;
    let layout = LevelLayout::single(fm.height, fm.width);
    let reference = fm.tokens.tape().constant(layout.reference_points());
    let sampled = ms_deform_sample(
        input,
        &layout,
        reference,
        offsets,
        weights,
        SampleGeometry {
            heads: shape.heads,
            points: shape.points,
        },
    )?;
    let logits = sampled
        .linear(dyn_layers.output_weight, Some(dyn_layers.output_bias))?
        .reshape([hw])?;
    Ok(MaskPrediction {
        logits,
        probs: logits.sigmoid()?,
    })
}
