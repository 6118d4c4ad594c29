//! Simplified average precision for boxes and masks.
//!
//! For each class and IoU threshold, predictions are visited in descending
//! score order (ties by image, then prediction index) and greedily matched
//! to the unmatched ground truth of highest IoU. Precision is made monotone
//! and read at 101 evenly spaced recall levels. Class APs are macro-averaged
//! over classes that have ground truth.

use serde::{Deserialize, Serialize};

use super::mask::{upsample_bilinear, BinaryMask};
use super::scene::Instance;
use crate::error::{Error, Result};
use crate::geometry::{iou, BoxCxCyWh};
use crate::numeric::Real;

/// IoU thresholds `0.50, 0.55, ..., 0.95`.
pub fn iou_thresholds() -> [Real; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as Real / 100.0)
}

#[derive(Clone, Debug, PartialEq)]
pub enum PredMask {
    /// Probabilities on a coarse grid; resized bilinearly to the image and
    /// binarized at 0.5.
    Grid {
        probs: Vec<Real>,
        height: usize,
        width: usize,
    },
    Full(BinaryMask),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub class: usize,
    pub score: Real,
    pub bbox: BoxCxCyWh,
    pub mask: PredMask,
}

impl Prediction {
    /// A ground-truth instance as a score-1 prediction.
    pub fn from_instance(inst: &Instance) -> Self {
        Prediction {
            class: inst.class.index(),
            score: 1.0,
            bbox: inst.bbox,
            mask: PredMask::Full(inst.mask.clone()),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mask_ap: Real,
    pub mask_ap50: Real,
    pub mask_ap75: Real,
    pub box_ap: Real,
    pub box_ap50: Real,
    pub box_ap75: Real,
    pub images: usize,
    pub targets: usize,
    pub predictions: usize,
    /// Classes with at least one ground-truth instance.
    pub classes_evaluated: usize,
}

fn full_mask(mask: &PredMask, height: usize, width: usize) -> Result<BinaryMask> {
    match mask {
        PredMask::Full(m) => {
            if (m.height(), m.width()) != (height, width) {
                return Err(Error::Invalid(format!(
                    "predicted mask {}x{} for a {height}x{width} image",
                    m.height(),
                    m.width()
                )));
            }
            Ok(m.clone())
        }
        PredMask::Grid {
            probs,
            height: gh,
            width: gw,
        } => {
            if *gh == 0 || !height.is_multiple_of(*gh) || !width.is_multiple_of(*gw) || height / gh != width / gw {
                return Err(Error::Invalid(format!(
                    "{gh}x{gw} grid does not tile a {height}x{width} image"
                )));
            }
            let up = upsample_bilinear(probs, *gh, *gw, height / gh);
            BinaryMask::from_probs(height, width, &up)
        }
    }
}

/// Area under the monotone precision envelope at 101 recall levels.
pub fn interpolated_ap(is_tp: &[bool], positives: usize) -> Real {
    if positives == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(is_tp.len());
    let mut precision = Vec::with_capacity(is_tp.len());
    for (i, &hit) in is_tp.iter().enumerate() {
        tp += hit as usize;
        recall.push(tp as Real / positives as Real);
        precision.push(tp as Real / (i + 1) as Real);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    for k in 0..=100 {
        let r = k as Real / 100.0;
        if let Some(i) = recall.iter().position(|&x| x >= r) {
            sum += precision[i];
        }
    }
    sum / 101.0
}

/// Evaluates per-image predictions against per-image ground truth.
pub fn evaluate(predictions: &[Vec<Prediction>], truth: &[Vec<Instance>], num_classes: usize) -> Result<EvalReport> {
    if predictions.len() != truth.len() {
        return Err(Error::Invalid(format!(
            "{} prediction sets for {} images",
            predictions.len(),
            truth.len()
        )));
    }
    let thresholds = iou_thresholds();
    // [kind][threshold] sums of class APs; kind 0 = mask, 1 = box
    let mut sums = [[0.0; 10]; 2];
    let mut classes_evaluated = 0;

    for class in 0..num_classes {
        let positives: usize = truth
            .iter()
            .map(|t| t.iter().filter(|g| g.class.index() == class).count())
            .sum();
        if positives == 0 {
            continue;
        }
        classes_evaluated += 1;

        // (score, image, index) of every prediction of this class, plus its
        // IoUs with same-class ground truth in its image
        let mut order = Vec::new();
        let mut ious: Vec<[Vec<Real>; 2]> = Vec::new();
        for (img, (preds, gts)) in predictions.iter().zip(truth).enumerate() {
            let gts: Vec<&Instance> = gts.iter().filter(|g| g.class.index() == class).collect();
            for (idx, p) in preds.iter().enumerate().filter(|(_, p)| p.class == class) {
                let (h, w) = gts.first().map_or((0, 0), |g| (g.mask.height(), g.mask.width()));
                let mask = if gts.is_empty() {
                    None
                } else {
                    Some(full_mask(&p.mask, h, w)?)
                };
                let mask_iou = gts
                    .iter()
                    .map(|g| mask.as_ref().map_or(0.0, |m| m.iou(&g.mask)))
                    .collect();
                let box_iou = gts.iter().map(|g| iou(p.bbox.to_xyxy(), g.bbox.to_xyxy())).collect();
                order.push((p.score, img, idx, ious.len()));
                ious.push([mask_iou, box_iou]);
            }
        }
        order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

        for kind in 0..2 {
            for (ti, &thr) in thresholds.iter().enumerate() {
                let mut taken: Vec<Vec<bool>> = truth
                    .iter()
                    .map(|t| vec![false; t.iter().filter(|g| g.class.index() == class).count()])
                    .collect();
                let hits: Vec<bool> = order
                    .iter()
                    .map(|&(_, img, _, k)| {
                        let mut best: Option<(usize, Real)> = None;
                        for (g, &v) in ious[k][kind].iter().enumerate() {
                            if !taken[img][g] && v >= thr && best.is_none_or(|(_, b)| v > b) {
                                best = Some((g, v));
                            }
                        }
                        if let Some((g, _)) = best {
                            taken[img][g] = true;
                        }
                        best.is_some()
                    })
                    .collect();
                sums[kind][ti] += interpolated_ap(&hits, positives);
            }
        }
    }

    let per_threshold = |kind: usize, ti: usize| {
        if classes_evaluated == 0 {
            0.0
        } else {
            sums[kind][ti] / classes_evaluated as Real
        }
    };
    let mean = |kind: usize| (0..10).map(|ti| per_threshold(kind, ti)).sum::<Real>() / 10.0;
    Ok(EvalReport {
        mask_ap: mean(0),
        mask_ap50: per_threshold(0, 0),
        mask_ap75: per_threshold(0, 5),
        box_ap: mean(1),
        box_ap50: per_threshold(1, 0),
        box_ap75: per_threshold(1, 5),
        images: truth.len(),
        targets: truth.iter().map(Vec::len).sum(),
        predictions: predictions.iter().map(Vec::len).sum(),
        classes_evaluated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::scene::{generate_scene, SceneConfig};

    fn scenes() -> Vec<Vec<Instance>> {
        (0..20)
            .map(|s| generate_scene(s, &SceneConfig::default()).unwrap().instances)
            .collect()
    }

    #[test]
    fn ground_truth_scores_perfectly() {
        let truth = scenes();
        let preds: Vec<Vec<Prediction>> = truth
            .iter()
            .map(|t| t.iter().map(Prediction::from_instance).collect())
            .collect();
        let r = evaluate(&preds, &truth, 3).unwrap();
        assert_eq!((r.mask_ap, r.box_ap, r.mask_ap50, r.mask_ap75), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn no_predictions_score_zero() {
        let truth = scenes();
        let preds = vec![Vec::new(); truth.len()];
        let r = evaluate(&preds, &truth, 3).unwrap();
        assert_eq!((r.mask_ap, r.box_ap), (0.0, 0.0));
    }

    #[test]
    fn half_recall_curve() {
        // one hit, no false positives, two positives: recall levels 0..=0.5
        assert_eq!(interpolated_ap(&[true], 2), 51.0 / 101.0);
        assert_eq!(interpolated_ap(&[true, true], 2), 1.0);
        assert_eq!(interpolated_ap(&[false], 2), 0.0);
    }

    #[test]
    fn order_invariant_for_distinct_scores() {
        let truth = scenes();
        let mut preds: Vec<Vec<Prediction>> = truth
            .iter()
            .map(|t| {
                t.iter()
                    .enumerate()
                    .map(|(i, g)| {
                        let mut p = Prediction::from_instance(g);
                        p.score = 0.9 - 0.1 * i as Real;
                        p.bbox.cx += 0.02 * i as Real;
                        p
                    })
                    .collect()
            })
            .collect();
        let a = evaluate(&preds, &truth, 3).unwrap();
        for p in &mut preds {
            p.reverse();
        }
        assert_eq!(a, evaluate(&preds, &truth, 3).unwrap());
    }

    #[test]
    fn grid_masks_are_resized() {
        let inst = &generate_scene(1, &SceneConfig::default()).unwrap().instances;
        let Some(g) = inst.first() else { return };
        let coarse = g.mask.downsample(8).unwrap();
        let pred = Prediction {
            mask: PredMask::Grid {
                probs: coarse.to_tensor().into_data(),
                height: 8,
                width: 8,
            },
            ..Prediction::from_instance(g)
        };
        let r = evaluate(&[vec![pred]], &[vec![g.clone()]], 3).unwrap();
        assert!(r.mask_ap50 >= 0.0 && r.mask_ap50 <= 1.0);
    }
}
