//! End-to-end subspace discovery: candidates per layer, tox scoring,
//! thresholding and PCA.

use serde::{Deserialize, Serialize};

use crate::contrastive::{extract_all, Aggregation, DirectionCandidate, Extraction, PromptPairSet};
use crate::error::Result;
use crate::microformer::Transformer;
use crate::numerics::Centering;
use crate::ranking::{build_global_subspace, score_candidates, select_high, BadWordsList, GlobalSubspace};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubspaceParams {
    /// Right singular vectors kept per layer.
    pub k: usize,
    /// Vocabulary positions inspected by the tox score.
    pub m: usize,
    pub alpha_sel: f64,
    pub eta: f64,
    pub centering: Centering,
    pub aggregation: Aggregation,
}

impl Default for SubspaceParams {
    fn default() -> Self {
        Self {
            k: 10,
            m: crate::ranking::DEFAULT_TOP_M,
            alpha_sel: 1.0,
            eta: 0.8,
            centering: Centering::Uncentered,
            aggregation: Aggregation::AllPositions,
        }
    }
}

/// Intermediate products kept for reporting.
#[derive(Clone, Debug)]
pub struct Discovery {
    pub candidates: Vec<DirectionCandidate>,
    /// `(layer, 1-based rank)` of candidates skipped as degenerate.
    pub degenerate: Vec<(usize, usize)>,
    pub subspace: GlobalSubspace,
}

pub fn extract_scored(
    model: &Transformer,
    pairs: &PromptPairSet,
    bad: &BadWordsList,
    params: &SubspaceParams,
) -> Result<Extraction> {
    let (mut candidates, degenerate) = extract_all(model, pairs, params.k, params.aggregation)?;
    score_candidates(&mut candidates, model.embedding(), bad, params.m)?;
    Ok((candidates, degenerate))
}

pub fn discover(
    model: &Transformer,
    pairs: &PromptPairSet,
    bad: &BadWordsList,
    params: &SubspaceParams,
) -> Result<Discovery> {
    let (candidates, degenerate) = extract_scored(model, pairs, bad, params)?;
    let selection = select_high(&candidates, params.alpha_sel)?;
    let subspace =
        build_global_subspace(&selection, params.eta, params.centering, model.embedding(), bad, params.m)?;
    Ok(Discovery { candidates, degenerate, subspace })
}
