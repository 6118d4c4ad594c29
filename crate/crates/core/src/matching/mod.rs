//! Bipartite assignment of predictions to targets and the training loss.

mod hungarian;
mod loss;

pub use hungarian::{hungarian, Assignment, CostMatrix};
pub use loss::{
    dice_loss, dice_value, giou_loss, matching_cost, total_loss, LossBreakdown, LossConfig, LossOutput, LossWeights,
    MaskSource, Target,
};
