//! Flat `key = value` run configuration.
//!
//! Blank lines and text after `#` are ignored. Every key has a default,
//! unknown or repeated keys are errors, and [`RunConfig::to_text`] writes
//! the fully resolved configuration back in the same format.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::matching::{LossConfig, LossWeights};
use crate::numeric::Real;
use crate::posenc::PeMode;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub image_size: usize,
    pub backbone_channels: Vec<usize>,
    pub d_model: usize,
    pub ffn_dim: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub points: usize,
    pub num_queries: usize,
    pub num_classes: usize,
    pub c_mask: usize,
    pub iat_heads: usize,
    pub iat_points: usize,
    pub mask_encoder_layers: usize,
    pub pe_mode: PeMode,
    pub pe_temperature: Real,
    pub pe_normalize_to_2pi: bool,
    pub share_stage_heads: bool,
    pub mask_stages: usize,
    pub matching_mask_cost: bool,
    pub loss_cls: Real,
    pub loss_l1: Real,
    pub loss_iou: Real,
    pub loss_dice: Real,
    pub loss_bce: Real,
    pub focal_alpha: Real,
    pub focal_gamma: Real,
    pub lr: Real,
    pub beta1: Real,
    pub beta2: Real,
    pub adam_eps: Real,
    pub grad_clip: Real,
    pub steps: usize,
    pub batch_size: usize,
    pub checkpoint_every: usize,
    pub score_threshold: Real,
    pub top_k: usize,
    pub parallel: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            image_size: 64,
            backbone_channels: vec![8, 16, 32, 32, 32],
            d_model: 32,
            ffn_dim: 64,
            enc_layers: 2,
            dec_layers: 2,
            heads: 8,
            points: 4,
            num_queries: 20,
            num_classes: 3,
            c_mask: 8,
            iat_heads: 4,
            iat_points: 4,
            mask_encoder_layers: 1,
            pe_mode: PeMode::Rel,
            pe_temperature: 10000.0,
            pe_normalize_to_2pi: false,
            share_stage_heads: true,
            mask_stages: 2,
            matching_mask_cost: false,
            loss_cls: 2.0,
            loss_l1: 5.0,
            loss_iou: 2.0,
            loss_dice: 8.0,
            loss_bce: 2.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            steps: 300,
            batch_size: 8,
            checkpoint_every: 100,
            score_threshold: 0.3,
            top_k: 10,
            parallel: true,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key} = {value:?}: {e}")))
}

fn list(values: &[usize]) -> String {
    values.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "image_size" => self.image_size = parse(key, v)?,
            "backbone_channels" => {
                self.backbone_channels = v.split(',').map(|s| parse(key, s.trim())).collect::<Result<_>>()?
            }
            "d_model" => self.d_model = parse(key, v)?,
            "ffn_dim" => self.ffn_dim = parse(key, v)?,
            "enc_layers" => self.enc_layers = parse(key, v)?,
            "dec_layers" => self.dec_layers = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "points" => self.points = parse(key, v)?,
            "num_queries" => self.num_queries = parse(key, v)?,
            "num_classes" => self.num_classes = parse(key, v)?,
            "c_mask" => self.c_mask = parse(key, v)?,
            "iat_heads" => self.iat_heads = parse(key, v)?,
            "iat_points" => self.iat_points = parse(key, v)?,
            "mask_encoder_layers" => self.mask_encoder_layers = parse(key, v)?,
            "pe_mode" => self.pe_mode = v.parse()?,
            "pe_temperature" => self.pe_temperature = parse(key, v)?,
            "pe_normalize_to_2pi" => self.pe_normalize_to_2pi = parse(key, v)?,
            "share_stage_heads" => self.share_stage_heads = parse(key, v)?,
            "mask_stages" => self.mask_stages = parse(key, v)?,
            "matching_mask_cost" => self.matching_mask_cost = parse(key, v)?,
            "loss_cls" => self.loss_cls = parse(key, v)?,
            "loss_l1" => self.loss_l1 = parse(key, v)?,
            "loss_iou" => self.loss_iou = parse(key, v)?,
            "loss_dice" => self.loss_dice = parse(key, v)?,
            "loss_bce" => self.loss_bce = parse(key, v)?,
            "focal_alpha" => self.focal_alpha = parse(key, v)?,
            "focal_gamma" => self.focal_gamma = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "beta1" => self.beta1 = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "adam_eps" => self.adam_eps = parse(key, v)?,
            "grad_clip" => self.grad_clip = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "score_threshold" => self.score_threshold = parse(key, v)?,
            "top_k" => self.top_k = parse(key, v)?,
            "parallel" => self.parallel = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Every key with its current value, in canonical order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("seed", self.seed.to_string()),
            ("image_size", self.image_size.to_string()),
            ("backbone_channels", list(&self.backbone_channels)),
            ("d_model", self.d_model.to_string()),
            ("ffn_dim", self.ffn_dim.to_string()),
            ("enc_layers", self.enc_layers.to_string()),
            ("dec_layers", self.dec_layers.to_string()),
            ("heads", self.heads.to_string()),
            ("points", self.points.to_string()),
            ("num_queries", self.num_queries.to_string()),
            ("num_classes", self.num_classes.to_string()),
            ("c_mask", self.c_mask.to_string()),
            ("iat_heads", self.iat_heads.to_string()),
            ("iat_points", self.iat_points.to_string()),
            ("mask_encoder_layers", self.mask_encoder_layers.to_string()),
            ("pe_mode", self.pe_mode.to_string()),
            ("pe_temperature", self.pe_temperature.to_string()),
            ("pe_normalize_to_2pi", self.pe_normalize_to_2pi.to_string()),
            ("share_stage_heads", self.share_stage_heads.to_string()),
            ("mask_stages", self.mask_stages.to_string()),
            ("matching_mask_cost", self.matching_mask_cost.to_string()),
            ("loss_cls", self.loss_cls.to_string()),
            ("loss_l1", self.loss_l1.to_string()),
            ("loss_iou", self.loss_iou.to_string()),
            ("loss_dice", self.loss_dice.to_string()),
            ("loss_bce", self.loss_bce.to_string()),
            ("focal_alpha", self.focal_alpha.to_string()),
            ("focal_gamma", self.focal_gamma.to_string()),
            ("lr", self.lr.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
            ("grad_clip", self.grad_clip.to_string()),
            ("steps", self.steps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("score_threshold", self.score_threshold.to_string()),
            ("top_k", self.top_k.to_string()),
            ("parallel", self.parallel.to_string()),
        ]
    }

    /// Parses config text on top of the defaults and validates the result.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Applies assignments from config text to `self`, then validates.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: {key} given twice", n + 1)));
            }
            self.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        self.validate()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse_text(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        crate::backbone::check_extent(self.image_size, self.image_size).map_err(|e| Error::Config(e.to_string()))?;
        if self.backbone_channels.len() != 5 || self.backbone_channels.contains(&0) {
            return fail(format!(
                "backbone_channels needs five positive widths, got {:?}",
                self.backbone_channels
            ));
        }
        if self.d_model == 0 || !self.d_model.is_multiple_of(4) {
            return fail(format!("d_model {} must be a positive multiple of 4", self.d_model));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return fail(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            ));
        }
        if self.c_mask == 0 || self.iat_heads == 0 || !self.c_mask.is_multiple_of(self.iat_heads) {
            return fail(format!(
                "c_mask {} is not divisible by iat_heads {}",
                self.c_mask, self.iat_heads
            ));
        }
        if self.pe_mode != PeMode::None && !self.c_mask.is_multiple_of(4) {
            return fail(format!(
                "c_mask {} must be a multiple of 4 for positional encodings",
                self.c_mask
            ));
        }
        let positive = [
            ("ffn_dim", self.ffn_dim),
            ("dec_layers", self.dec_layers),
            ("points", self.points),
            ("num_queries", self.num_queries),
            ("num_classes", self.num_classes),
            ("iat_points", self.iat_points),
            ("batch_size", self.batch_size),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return fail(format!("{k} must be positive"));
        }
        if self.mask_stages > self.dec_layers {
            return fail(format!(
                "mask_stages {} exceeds dec_layers {}",
                self.mask_stages, self.dec_layers
            ));
        }
        let weights = [
            self.loss_cls,
            self.loss_l1,
            self.loss_iou,
            self.loss_dice,
            self.loss_bce,
        ];
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return fail("loss weights must be finite and nonnegative".into());
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("optimizer needs lr > 0 and betas in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) || !(self.grad_clip >= 0.0) || !(self.pe_temperature > 0.0) {
            return fail("adam_eps and pe_temperature must be positive, grad_clip nonnegative".into());
        }
        Ok(())
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            weights: LossWeights {
                cls: self.loss_cls,
                l1: self.loss_l1,
                iou: self.loss_iou,
                dice: self.loss_dice,
                bce: self.loss_bce,
            },
            focal_alpha: self.focal_alpha,
            focal_gamma: self.focal_gamma,
            mask_stages: self.mask_stages,
            matching_mask_cost: self.matching_mask_cost,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(RunConfig::parse_text(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn comments_and_overrides() {
        let cfg = RunConfig::parse_text("# toy\n iat_heads = 8 # more heads\n\npe_mode=abs\n").unwrap();
        assert_eq!(cfg.iat_heads, 8);
        assert_eq!(cfg.pe_mode, PeMode::Abs);
    }

    #[test]
    fn rejections() {
        assert!(RunConfig::parse_text("bogus = 1").is_err());
        assert!(RunConfig::parse_text("seed = 1\nseed = 2").is_err());
        assert!(RunConfig::parse_text("image_size = 48").is_err());
        assert!(RunConfig::parse_text("mask_stages = 3").is_err());
        assert!(RunConfig::parse_text("c_mask = 6").is_err());
        assert!(RunConfig::parse_text("seed 7").is_err());
    }
}
