//! The full network: backbone, pyramid, deformable encoder/decoder,
//! prediction heads and the instance-aware mask head.

use crate::backbone::{Backbone, PyramidAdapter};
use crate::config::RunConfig;
use crate::deformable::{Decoder, Encoder};
use crate::error::{Error, Result};
use crate::heads::{Heads, QueryPredictions};
use crate::iat::{
    default_dynamic_params, predict_mask, unpack_params, DynamicShape, MaskEncoder, MaskFeature, MaskPrediction,
};
use crate::matching::MaskSource;
use crate::numeric::{Tensor, Var};
use crate::params::{Bound, Init, ParamStore};
use crate::posenc::{EncodingConfig, PeMode};

/// Pyramid levels F3..F6.
pub const LEVELS: usize = 4;

#[derive(Clone, Debug)]
pub struct Model {
    pub backbone: Backbone,
    pub adapter: PyramidAdapter,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub heads: Heads,
    pub mask_encoder: MaskEncoder,
    pub dyn_shape: DynamicShape,
    pub pe_mode: PeMode,
    /// Encoding of transformer-width tokens.
    pub pe_model: EncodingConfig,
    /// Encoding added to the `C_mask`-channel mask feature.
    pub pe_mask: EncodingConfig,
    pub image_size: usize,
    pub num_classes: usize,
}

/// Everything one forward pass produces.
pub struct ForwardOutput<'t> {
    /// One prediction set per decoder stage.
    pub stages: Vec<QueryPredictions<'t>>,
    pub mask_feature: MaskFeature<'t>,
}

impl Model {
    /// Builds the network described by `cfg` with parameters seeded by
    /// `cfg.seed`.
    pub fn new(cfg: &RunConfig) -> Result<(Model, ParamStore)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(cfg.seed);
        let d = cfg.d_model;
        let dyn_shape = DynamicShape::new(cfg.c_mask, cfg.iat_heads, cfg.iat_points)?;
        let backbone = Backbone::new(&mut store, &mut init, &cfg.backbone_channels)?;
        let adapter = PyramidAdapter::new(&mut store, &mut init, backbone.out_channels(), d);
        let encoder = Encoder::new(
            &mut store,
            &mut init,
            cfg.enc_layers,
            d,
            cfg.ffn_dim,
            cfg.heads,
            LEVELS,
            cfg.points,
        )?;
        let decoder = Decoder::new(
            &mut store,
            &mut init,
            cfg.dec_layers,
            cfg.num_queries,
            d,
            cfg.ffn_dim,
            cfg.heads,
            LEVELS,
            cfg.points,
        )?;
        let heads = Heads::new(
            &mut store,
            &mut init,
            cfg.dec_layers,
            cfg.share_stage_heads,
            d,
            cfg.num_classes,
            &default_dynamic_params(dyn_shape),
        )?;
        let mask_encoder = MaskEncoder::new(
            &mut store,
            &mut init,
            cfg.mask_encoder_layers,
            d,
            cfg.ffn_dim,
            cfg.heads,
            cfg.points,
            cfg.c_mask,
        )?;
        let pe_model = EncodingConfig::with_options(d, cfg.pe_temperature, cfg.pe_normalize_to_2pi)?;
        // unused (and possibly invalid at c_mask) when pe_mode is none
        let pe_mask = EncodingConfig::with_options(
            if cfg.c_mask.is_multiple_of(4) { cfg.c_mask } else { 4 },
            cfg.pe_temperature,
            cfg.pe_normalize_to_2pi,
        )?;
        let model = Model {
            backbone,
            adapter,
            encoder,
            decoder,
            heads,
            mask_encoder,
            dyn_shape,
            pe_mode: cfg.pe_mode,
            pe_model,
            pe_mask,
            image_size: cfg.image_size,
            num_classes: cfg.num_classes,
        };
        Ok((model, store))
    }

    /// Length of the per-query dynamic parameter vector.
    pub fn dynamic_param_count(&self) -> usize {
        self.dyn_shape.param_count()
    }

    pub fn num_stages(&self) -> usize {
        self.decoder.layers.len()
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, image: &Tensor) -> Result<ForwardOutput<'t>> {
        if image.shape() != [3, self.image_size, self.image_size] {
            return Err(Error::Invalid(format!(
                "image {:?} does not match the configured {1}x{1} input",
                image.shape(),
                self.image_size
            )));
        }
        let x = p.tape().constant(image.clone());
        let stages = self.backbone.extract_stages(p, x)?;
        let pyramid = self.adapter.build_pyramid(p, &stages)?;
        let (tokens, layout) = pyramid.flatten()?;
        let memory = self.encoder.forward(p, tokens, &layout, &self.pe_model)?;
        let (h3, w3) = layout.shapes()[0];
        let p3 = memory.narrow(0, 0, h3 * w3)?;
        let mask_feature = self.mask_encoder.forward(p, p3, h3, w3, &self.pe_model)?;
        let decoded = self.decoder.decoder_stack(p, memory, &layout)?;
        let stages = decoded
            .stages
            .iter()
            .enumerate()
            .map(|(s, q)| self.heads.forward(p, s, *q))
            .collect::<Result<_>>()?;
        Ok(ForwardOutput { stages, mask_feature })
    }

    /// Decodes the mask of query `query` at decoder stage `stage`.
    pub fn mask<'t>(
        &self,
        p: &Bound<'t>,
        out: &ForwardOutput<'t>,
        stage: usize,
        query: usize,
    ) -> Result<MaskPrediction<'t>> {
        let pred = &out.stages[stage];
        let params = pred.dyn_params.narrow(0, query, 1)?;
        let center = pred.boxes.narrow(0, query, 1)?.narrow(1, 0, 2)?;
        let layers = unpack_params(params, self.dyn_shape)?;
        predict_mask(p, &out.mask_feature, center, &layers, self.pe_mode, &self.pe_mask)
    }

    /// Adapter exposing mask decoding to the loss.
    pub fn masks<'a, 't>(&'a self, p: &'a Bound<'t>, out: &'a ForwardOutput<'t>) -> ModelMasks<'a, 't> {
        ModelMasks { model: self, p, out }
    }
}

pub struct ModelMasks<'a, 't> {
    model: &'a Model,
    p: &'a Bound<'t>,
    out: &'a ForwardOutput<'t>,
}

impl<'t> MaskSource<'t> for ModelMasks<'_, 't> {
    fn mask(&self, stage: usize, query: usize) -> Result<MaskPrediction<'t>> {
        self.model.mask(self.p, self.out, stage, query)
    }
}

/// Rebuilds a model for `cfg` and checks that `store` holds parameters of
/// the expected names and shapes.
pub fn check_compatible(cfg: &RunConfig, store: &ParamStore) -> Result<Model> {
    let (model, fresh) = Model::new(cfg)?;
    if fresh.len() != store.len() {
        return Err(Error::Invalid(format!(
            "checkpoint holds {} parameters, configuration needs {}",
            store.len(),
            fresh.len()
        )));
    }
    for ((name, a), (other, b)) in fresh.tensors().zip(store.tensors()) {
        if name != other || a.shape() != b.shape() {
            return Err(Error::Invalid(format!(
                "parameter {name} {:?} does not match checkpoint {other} {:?}",
                a.shape(),
                b.shape()
            )));
        }
    }
    Ok(model)
}

/// Vars of every parameter of `store`, for callers that build their own
/// bindings (gradient checks).
pub fn param_vars<'t>(tape: &'t crate::numeric::Tape, store: &ParamStore) -> Vec<Var<'t>> {
    store.tensors().map(|(_, t)| tape.param(t.clone())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_scene, SceneConfig};
    use crate::numeric::Tape;

    #[test]
    fn forward_shapes() {
        let cfg = RunConfig::default();
        let (model, store) = Model::new(&cfg).unwrap();
        let scene = generate_scene(1, &SceneConfig::default()).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape);
        let out = model.forward(&p, &scene.image).unwrap();
        assert_eq!(out.stages.len(), 2);
        for s in &out.stages {
            assert_eq!(s.class_logits.shape(), vec![20, 3]);
            assert_eq!(s.boxes.shape(), vec![20, 4]);
            assert_eq!(s.dyn_params.shape(), vec![20, 441]);
        }
        assert_eq!(out.mask_feature.tokens.shape(), vec![64, 8]);
        let m = model.mask(&p, &out, 1, 3).unwrap();
        assert_eq!(m.probs.shape(), vec![64]);
    }

    #[test]
    fn deterministic_construction() {
        let cfg = RunConfig::default();
        let (_, a) = Model::new(&cfg).unwrap();
        let (_, b) = Model::new(&cfg).unwrap();
        assert!(a.tensors().zip(b.tensors()).all(|(x, y)| x == y));
        assert!(check_compatible(&cfg, &a).is_ok());
        let other = RunConfig { iat_heads: 8, ..cfg };
        assert!(check_compatible(&other, &a).is_err());
    }
}
