//! Matching cost and the multi-stage training loss.

use serde::{Deserialize, Serialize};

use super::hungarian::{hungarian, Assignment, CostMatrix};
use crate::error::{shape_err, Error, Result};
use crate::geometry::{generalized_iou, BoxCxCyWh};
use crate::heads::QueryPredictions;
use crate::iat::MaskPrediction;
use crate::numeric::kernels::sigmoid;
use crate::numeric::{Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub cls: Real,
    pub l1: Real,
    pub iou: Real,
    pub dice: Real,
    pub bce: Real,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            cls: 2.0,
            l1: 5.0,
            iou: 2.0,
            dice: 8.0,
            bce: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub focal_alpha: Real,
    pub focal_gamma: Real,
    /// Mask losses apply to this many trailing decoder stages.
    pub mask_stages: usize,
    /// Add the dice term to the matching cost.
    pub matching_mask_cost: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            weights: LossWeights::default(),
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            mask_stages: 2,
            matching_mask_cost: false,
        }
    }
}

/// One ground-truth instance with its mask on the mask grid.
#[derive(Clone, Debug)]
pub struct Target {
    pub class: usize,
    pub bbox: BoxCxCyWh,
    /// Binary `[H_mask * W_mask]`.
    pub mask: Tensor,
}

/// Produces instance masks on demand so that only matched queries pay for
/// mask decoding.
pub trait MaskSource<'t> {
    fn mask(&self, stage: usize, query: usize) -> Result<MaskPrediction<'t>>;
}

/// Weighted per-term contributions summed over stages.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: Real,
    pub l1: Real,
    pub iou: Real,
    pub dice: Real,
    pub bce: Real,
}

impl LossBreakdown {
    pub fn total(&self) -> Real {
        self.cls + self.l1 + self.iou + self.dice + self.bce
    }

    pub fn accumulate(&mut self, o: &LossBreakdown) {
        self.cls += o.cls;
        self.l1 += o.l1;
        self.iou += o.iou;
        self.dice += o.dice;
        self.bce += o.bce;
    }
}

pub struct LossOutput<'t> {
    pub total: Var<'t>,
    pub breakdown: LossBreakdown,
    /// Assignment of every stage.
    pub assignments: Vec<Assignment>,
}

/// `1 - (2 sum(p t) + 1) / (sum p + sum t + 1)`.
pub fn dice_loss<'t>(probs: Var<'t>, target: &Tensor) -> Result<Var<'t>> {
    if probs.len() != target.len() {
        return shape_err("dice_loss", format!("{:?} vs {:?}", probs.shape(), target.shape()));
    }
    let t = probs.tape().constant(target.clone().reshape(probs.shape())?);
    let numer = probs.mul(t)?.sum()?.scale(2.0)?.add_scalar(1.0)?;
    let t_sum: Real = target.data().iter().sum();
    let denom = probs.sum()?.add_scalar(t_sum + 1.0)?;
    numer.div(denom)?.neg()?.add_scalar(1.0)
}

/// Plain dice loss on values.
pub fn dice_value(probs: &[Real], target: &[Real]) -> Real {
    let inter: Real = probs.iter().zip(target).map(|(p, t)| p * t).sum();
    let sp: Real = probs.iter().sum();
    let st: Real = target.iter().sum();
    1.0 - (2.0 * inter + 1.0) / (sp + st + 1.0)
}

/// `1 - GIoU` of each row of `pred` (`[n, 4]`, cx cy w h) against `target`.
pub fn giou_loss<'t>(pred: Var<'t>, target: &Tensor) -> Result<Var<'t>> {
    let n = pred.shape()[0];
    if pred.shape() != [n, 4] || target.shape() != [n, 4] {
        return shape_err("giou_loss", format!("{:?} vs {:?}", pred.shape(), target.shape()));
    }
    let tape = pred.tape();
    let col = |v: Var<'t>, i| v.narrow(1, i, 1);
    let corners = |b: Var<'t>| -> Result<[Var<'t>; 4]> {
        let (cx, cy, w, h) = (col(b, 0)?, col(b, 1)?, col(b, 2)?.scale(0.5)?, col(b, 3)?.scale(0.5)?);
        Ok([cx.sub(w)?, cy.sub(h)?, cx.add(w)?, cy.add(h)?])
    };
    let [px1, py1, px2, py2] = corners(pred)?;
    let [tx1, ty1, tx2, ty2] = corners(tape.constant(target.clone()))?;
    let area = |x1: Var<'t>, y1: Var<'t>, x2: Var<'t>, y2: Var<'t>| x2.sub(x1)?.mul(y2.sub(y1)?);
    let iw = px2.minimum(tx2)?.sub(px1.maximum(tx1)?)?.relu()?;
    let ih = py2.minimum(ty2)?.sub(py1.maximum(ty1)?)?.relu()?;
    let inter = iw.mul(ih)?;
    let union = area(px1, py1, px2, py2)?.add(area(tx1, ty1, tx2, ty2)?)?.sub(inter)?;
    let hull = area(
        px1.minimum(tx1)?,
        py1.minimum(ty1)?,
        px2.maximum(tx2)?,
        py2.maximum(ty2)?,
    )?;
    let giou = inter.div(union)?.sub(hull.sub(union)?.div(hull)?)?;
    giou.neg()?.add_scalar(1.0)?.reshape([n])
}

/// Detection cost of assigning each prediction to each target:
/// `-w_cls p[class] + w_l1 |b - t|_1 + w_iou (1 - GIoU)`, plus
/// `w_dice dice` when `mask_probs` is given.
pub fn matching_cost(
    class_logits: &Tensor,
    boxes: &Tensor,
    targets: &[Target],
    weights: &LossWeights,
    mask_probs: Option<&[Tensor]>,
) -> Result<CostMatrix> {
    let n = boxes.shape()[0];
    let nc = class_logits.shape()[1];
    if let Some(t) = targets.iter().find(|t| t.class >= nc) {
        return Err(Error::Invalid(format!("target class {} outside {nc} classes", t.class)));
    }
    let mut data = Vec::with_capacity(n * targets.len());
    for i in 0..n {
        let b = &boxes.data()[i * 4..i * 4 + 4];
        let pred = BoxCxCyWh::new(b[0], b[1], b[2], b[3]);
        for t in targets {
            let prob = sigmoid(class_logits.data()[i * nc + t.class]);
            let l1: Real = pred
                .to_array()
                .iter()
                .zip(t.bbox.to_array())
                .map(|(a, b)| (a - b).abs())
                .sum();
            let giou = generalized_iou(pred.to_xyxy(), t.bbox.to_xyxy())?;
            let mut c = -weights.cls * prob + weights.l1 * l1 + weights.iou * (1.0 - giou);
            if let Some(masks) = mask_probs {
                c += weights.dice * dice_value(masks[i].data(), t.mask.data());
            }
            data.push(c);
        }
    }
    CostMatrix::new(n, targets.len(), data)
}

/// Loss over all decoder stages of one image. Every stage is matched
/// independently; detection terms apply to every stage and mask terms to the
/// last `mask_stages`. All terms are divided by `norm` (the number of target
/// boxes in the batch, at least 1).
pub fn total_loss<'t>(
    stages: &[QueryPredictions<'t>],
    masks: &dyn MaskSource<'t>,
    targets: &[Target],
    cfg: &LossConfig,
    norm: Real,
) -> Result<LossOutput<'t>> {
    if stages.is_empty() {
        return Err(Error::Invalid("no decoder stages to supervise".into()));
    }
    if cfg.mask_stages > stages.len() {
        return Err(Error::Config(format!(
            "mask_stages {} exceeds the {} decoder stages",
            cfg.mask_stages,
            stages.len()
        )));
    }
    let tape = stages[0].class_logits.tape();
    let w = &cfg.weights;
    let inv = 1.0 / norm.max(1.0);
    let first_mask_stage = stages.len() - cfg.mask_stages;
    let mut terms = Vec::new();
    let mut breakdown = LossBreakdown::default();
    let mut assignments = Vec::with_capacity(stages.len());

    for (s, pred) in stages.iter().enumerate() {
        let logits = pred.class_logits.value();
        let [n, nc] = *logits.shape() else {
            return shape_err("total_loss", format!("class logits {:?}", logits.shape()));
        };
        let with_masks = s >= first_mask_stage;
        let match_masks = if cfg.matching_mask_cost && with_masks && !targets.is_empty() {
            Some(
                (0..n)
                    .map(|q| Ok(masks.mask(s, q)?.probs.value().as_ref().clone()))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        let cost = matching_cost(&logits, &pred.boxes.value(), targets, w, match_masks.as_deref())?;
        let assignment = hungarian(&cost)?;

        let mut onehot = Tensor::zeros([n, nc]);
        for (t, p) in assignment.pairs() {
            onehot.data_mut()[p * nc + targets[t].class] = 1.0;
        }
        let cls = pred
            .class_logits
            .sigmoid_focal_loss(&onehot, cfg.focal_alpha, cfg.focal_gamma)?
            .scale(w.cls * inv)?;
        breakdown.cls += cls.value().item();
        terms.push(cls);

        if !targets.is_empty() {
            let rows = assignment.pred_of_target.clone();
            let matched = pred.boxes.gather_rows(&rows)?;
            let tboxes = Tensor::new(
                [targets.len(), 4],
                targets.iter().flat_map(|t| t.bbox.to_array()).collect(),
            )?;
            let l1 = matched
                .sub(tape.constant(tboxes.clone()))?
                .abs()?
                .sum()?
                .scale(w.l1 * inv)?;
            let iou = giou_loss(matched, &tboxes)?.sum()?.scale(w.iou * inv)?;
            breakdown.l1 += l1.value().item();
            breakdown.iou += iou.value().item();
            terms.push(l1);
            terms.push(iou);

            if with_masks {
                for (t, p) in assignment.pairs() {
                    let m = masks.mask(s, p)?;
                    let dice = dice_loss(m.probs, &targets[t].mask)?.scale(w.dice * inv)?;
                    let target = targets[t].mask.clone().reshape(m.logits.shape())?;
                    let bce = m.logits.bce_with_logits(&target)?.scale(w.bce * inv)?;
                    breakdown.dice += dice.value().item();
                    breakdown.bce += bce.value().item();
                    terms.push(dice);
                    terms.push(bce);
                }
            }
        }
        assignments.push(assignment);
    }

    let mut total = terms[0];
    for t in &terms[1..] {
        total = total.add(*t)?;
    }
    Ok(LossOutput {
        total,
        breakdown,
        assignments,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{check_gradients, GradCheckOptions, Tape};

    #[test]
    fn dice_examples() {
        let tape = Tape::new();
        let t = Tensor::new([6], vec![1.0, 1.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let same = dice_loss(tape.constant(t.clone()), &t).unwrap();
        assert_eq!(same.value().item(), 0.0);
        let other = Tensor::new([6], vec![0.0, 0.0, 1.0, 0.0, 1.0, 1.0]).unwrap();
        let disjoint = dice_loss(tape.constant(other), &t).unwrap();
        assert!((disjoint.value().item() - (1.0 - 1.0 / 7.0)).abs() < 1e-15);
        let half = dice_loss(tape.constant(Tensor::full([6], 0.5)), &t).unwrap();
        assert!((half.value().item() - (1.0 - 4.0 / 7.0)).abs() < 1e-15);
    }

    #[test]
    fn giou_loss_matches_scalar_giou() {
        let tape = Tape::new();
        let a = [0.4, 0.5, 0.3, 0.2];
        let b = [0.6, 0.45, 0.2, 0.4];
        let pred = tape.constant(Tensor::new([1, 4], a.to_vec()).unwrap());
        let loss = giou_loss(pred, &Tensor::new([1, 4], b.to_vec()).unwrap()).unwrap();
        let g = generalized_iou(BoxCxCyWh::from_array(a).to_xyxy(), BoxCxCyWh::from_array(b).to_xyxy()).unwrap();
        assert!((loss.value().item() - (1.0 - g)).abs() < 1e-14);
    }

    #[test]
    fn giou_loss_gradients() {
        let target = Tensor::new([2, 4], vec![0.5, 0.5, 0.3, 0.4, 0.2, 0.7, 0.1, 0.2]).unwrap();
        let pred = Tensor::new([2, 4], vec![0.45, 0.52, 0.25, 0.33, 0.5, 0.5, 0.2, 0.2]).unwrap();
        let report = check_gradients(
            |_, xs| giou_loss(xs[0], &target)?.sum(),
            &[pred],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn cost_examples() {
        let t = Target {
            class: 1,
            bbox: BoxCxCyWh::new(0.3, 0.4, 0.2, 0.2),
            mask: Tensor::zeros([4]),
        };
        let boxes = Tensor::new([2, 4], vec![0.3, 0.4, 0.2, 0.2, 0.9, 0.9, 0.1, 0.1]).unwrap();
        let w = LossWeights::default();
        // class probability 1 (saturated logit)
        let sure = Tensor::new([2, 3], vec![-50.0, 50.0, -50.0, -50.0, 50.0, -50.0]).unwrap();
        let c = matching_cost(&sure, &boxes, std::slice::from_ref(&t), &w, None).unwrap();
        assert!((c.get(0, 0) + 2.0).abs() < 1e-12);
        assert!(c.get(1, 0) > c.get(0, 0));
        let never = Tensor::full([2, 3], -800.0);
        let c = matching_cost(&never, &boxes, std::slice::from_ref(&t), &w, None).unwrap();
        assert_eq!(c.get(0, 0), 0.0);
    }
}
