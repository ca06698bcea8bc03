//! Fitness evaluation: the evaluator contract, a deterministic synthetic
//! landscape, and the client side of the external worker protocol.

mod landscape;
pub mod protocol;

use serde::{Deserialize, Serialize};

use crate::search_space::ArchCode;
use crate::weight_store::LayerSignature;

pub use landscape::{
    fnv1a64, hash_to_normal, inverse_normal_cdf, synthetic_accuracy, Landscape, LandscapeConfig,
    SyntheticEvaluator, Task, INTERACTION_WEIGHT,
};
pub use protocol::{Endpoint, ExternalEvaluator};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalPurpose {
    Search,
    Rerank,
}

/// Training budget for one evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EvalBudget {
    pub epochs: u32,
    pub purpose: EvalPurpose,
}

impl EvalBudget {
    pub fn search(epochs: u32) -> Self {
        EvalBudget {
            epochs,
            purpose: EvalPurpose::Search,
        }
    }

    pub fn rerank(epochs: u32) -> Self {
        EvalBudget {
            epochs,
            purpose: EvalPurpose::Rerank,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalStatus {
    Ok,
    Failed,
}

/// Outcome of one evaluation. `accuracy` is present iff the status is ok.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub status: EvalStatus,
    pub accuracy: Option<f64>,
    pub params: u64,
    pub multadds: u64,
    pub detail: String,
}

impl EvalResult {
    pub fn ok(accuracy: f64, params: u64, multadds: u64) -> Self {
        EvalResult {
            status: EvalStatus::Ok,
            accuracy: Some(accuracy),
            params,
            multadds,
            detail: String::new(),
        }
    }

    pub fn failed(detail: impl Into<String>) -> Self {
        EvalResult {
            status: EvalStatus::Failed,
            accuracy: None,
            params: 0,
            multadds: 0,
            detail: detail.into(),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == EvalStatus::Ok && self.accuracy.is_some()
    }
}

/// Something that trains and measures an architecture.
///
/// Deterministic evaluators must return the same result for the same
/// `(arch, budget)`; the engine caches their results.
pub trait Evaluator: Send + Sync {
    /// Identifier recorded alongside every evaluated model.
    fn id(&self) -> String;

    fn evaluate(&self, arch: &ArchCode, budget: EvalBudget) -> EvalResult;

    /// Evaluation with a list of weight-store entries the trainer may inherit
    /// from. Evaluators without weight shipping ignore the list.
    fn evaluate_shared(&self, arch: &ArchCode, budget: EvalBudget, share: &[LayerSignature]) -> EvalResult {
        let _ = share;
        self.evaluate(arch, budget)
    }

    /// Whether results are a pure function of `(arch, budget)`.
    fn is_deterministic(&self) -> bool {
        true
    }
}

impl<E: Evaluator + ?Sized> Evaluator for &E {
    fn id(&self) -> String {
        (**self).id()
    }

    fn evaluate(&self, arch: &ArchCode, budget: EvalBudget) -> EvalResult {
        (**self).evaluate(arch, budget)
    }

    fn evaluate_shared(&self, arch: &ArchCode, budget: EvalBudget, share: &[LayerSignature]) -> EvalResult {
        (**self).evaluate_shared(arch, budget, share)
    }

    fn is_deterministic(&self) -> bool {
        (**self).is_deterministic()
    }
}

impl<E: Evaluator + ?Sized> Evaluator for Box<E> {
    fn id(&self) -> String {
        (**self).id()
    }

    fn evaluate(&self, arch: &ArchCode, budget: EvalBudget) -> EvalResult {
        (**self).evaluate(arch, budget)
    }

    fn evaluate_shared(&self, arch: &ArchCode, budget: EvalBudget, share: &[LayerSignature]) -> EvalResult {
        (**self).evaluate_shared(arch, budget, share)
    }

    fn is_deterministic(&self) -> bool {
        (**self).is_deterministic()
    }
}
