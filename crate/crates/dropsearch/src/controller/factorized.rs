use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::space::GenomeLayout;
use crate::tensor::{ParamSet, Tensor, Var};

/// Reference policy: one independent logit vector per slot, zero-initialized
/// (uniform). Slot distributions do not condition on the prefix, which makes
/// every distributional property exhaustively checkable.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FactorizedPolicy {
    layout: GenomeLayout,
    params: ParamSet,
}

impl FactorizedPolicy {
    pub fn new(layout: GenomeLayout) -> Self {
        let mut params = ParamSet::new();
        for (s, card) in layout.flat_cards().into_iter().enumerate() {
            params.add(format!("slot{s}_logits"), Tensor::zeros(&[card]));
        }
        FactorizedPolicy { layout, params }
    }

    pub fn layout(&self) -> GenomeLayout {
        self.layout
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Leaf `s` *is* slot `s`'s logits.
    pub fn slot_logits(&self, leaf: Var) -> Var {
        leaf
    }

    pub fn all_slot_logits(&self, leaves: &[Var]) -> Result<Vec<Var>> {
        Ok(leaves.to_vec())
    }
}
