//! Per-query prediction branches: class logits, boxes and dynamic mask
//! parameters.

use crate::error::{Error, Result};
use crate::layers::{Linear, Mlp};
use crate::numeric::{Real, Tensor, Var};
use crate::params::{Bound, Init, ParamStore};

/// Prior probability the class bias is initialized to.
pub const CLASS_PRIOR: Real = 0.01;

/// Raw outputs for all `N` queries of one decoder stage.
pub struct QueryPredictions<'t> {
    /// `[N, num_classes]` logits.
    pub class_logits: Var<'t>,
    /// `[N, 4]` normalized `(cx, cy, w, h)` in `(0, 1)`.
    pub boxes: Var<'t>,
    /// `[N, D]` unsquashed dynamic mask parameters.
    pub dyn_params: Var<'t>,
}

#[derive(Clone, Debug)]
pub struct StageHeads {
    pub class: Linear,
    pub boxes: Mlp,
    pub mask: Mlp,
}

impl StageHeads {
    /// `mask_bias` seeds the last mask-branch bias so that an untrained head
    /// already unpacks to a usable dynamic layer.
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        d: usize,
        num_classes: usize,
        mask_bias: &Tensor,
    ) -> Self {
        let prior_bias = -((1.0 - CLASS_PRIOR) / CLASS_PRIOR).ln();
        let class = Linear::from_tensors(
            store,
            &format!("{name}.class"),
            init.xavier([num_classes, d], d, num_classes),
            Tensor::full([num_classes], prior_bias),
        );
        let boxes = Mlp::new(store, init, &format!("{name}.box"), &[d, d, d, 4]);
        let mut mask = Mlp::new(store, init, &format!("{name}.mask"), &[d, d, d]);
        let dim = mask_bias.len();
        let bound = (6.0 / (d + dim) as Real).sqrt();
        mask.layers.push(Linear::from_tensors(
            store,
            &format!("{name}.mask.2"),
            init.uniform([dim, d], bound),
            mask_bias.clone(),
        ));
        StageHeads { class, boxes, mask }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, queries: Var<'t>) -> Result<QueryPredictions<'t>> {
        Ok(QueryPredictions {
            class_logits: self.class.forward(p, queries)?,
            boxes: self.boxes.forward(p, queries)?.sigmoid()?,
            dyn_params: self.mask.forward(p, queries)?,
        })
    }
}

/// Heads for every decoder stage; a single set when weights are shared.
#[derive(Clone, Debug)]
pub struct Heads {
    sets: Vec<StageHeads>,
}

impl Heads {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        stages: usize,
        shared: bool,
        d: usize,
        num_classes: usize,
        mask_bias: &Tensor,
    ) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        let sets = if shared {
            vec![StageHeads::new(store, init, "heads", d, num_classes, mask_bias)]
        } else {
            (0..stages)
                .map(|s| StageHeads::new(store, init, &format!("heads.{s}"), d, num_classes, mask_bias))
                .collect()
        };
        Ok(Heads { sets })
    }

    pub fn stage(&self, stage: usize) -> &StageHeads {
        &self.sets[stage.min(self.sets.len() - 1)]
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, stage: usize, queries: Var<'t>) -> Result<QueryPredictions<'t>> {
        self.stage(stage).forward(p, queries)
    }
}
