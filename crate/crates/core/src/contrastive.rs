//! Layer-wise contrastive directions from paired toxic / non-toxic prompts.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{read_jsonl, PairLine};
use crate::error::{Error, Result};
use crate::microformer::Transformer;
use crate::numerics::{top_right_singular, Matrix};

/// Paired prompts `(p⁺, p⁻)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptPairSet {
    pairs: Vec<(Vec<u32>, Vec<u32>)>,
}

impl PromptPairSet {
    pub fn new(pairs: Vec<(Vec<u32>, Vec<u32>)>) -> Result<Self> {
        if pairs.len() < 2 {
            return Err(Error::InvalidConfig(format!(
                "need at least 2 prompt pairs, got {}",
                pairs.len()
            )));
        }
        if let Some(i) = pairs.iter().position(|(p, n)| p.is_empty() || n.is_empty()) {
            return Err(Error::Pair { index: i, source: Box::new(Error::EmptySequence) });
        }
        Ok(Self { pairs })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let lines: Vec<PairLine> = read_jsonl(path)?;
        Self::new(lines.into_iter().map(|l| (l.pos, l.neg)).collect())
    }

    pub fn to_lines(&self) -> Vec<PairLine> {
        self.pairs.iter().map(|(p, n)| PairLine { pos: p.clone(), neg: n.clone() }).collect()
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[(Vec<u32>, Vec<u32>)] {
        &self.pairs
    }

    pub fn positives(&self) -> impl Iterator<Item = &[u32]> {
        self.pairs.iter().map(|(p, _)| p.as_slice())
    }

    pub fn negatives(&self) -> impl Iterator<Item = &[u32]> {
        self.pairs.iter().map(|(_, n)| n.as_slice())
    }
}

/// How one prompt's per-position FFN outputs collapse to one row.
/// Candidates from every layer plus the `(layer, 1-based rank)` pairs
/// flagged degenerate.
pub type Extraction = (Vec<DirectionCandidate>, Vec<(usize, usize)>);

/// Per-layer aggregated FFN outputs of one prompt.
type PerLayer = Vec<Vec<f64>>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    AllPositions,
    LastToken,
}

/// Stacked per-prompt FFN outputs at one layer.
#[derive(Clone, Debug)]
pub struct LayerMeans {
    pub layer: usize,
    /// N × d, toxic prompts.
    pub pos: Matrix,
    /// N × d, non-toxic prompts.
    pub neg: Matrix,
}

/// Per-layer aggregated FFN outputs (`o^ℓ`, before the residual add) of one
/// prompt.
fn aggregate_ffn(model: &Transformer, tokens: &[u32], agg: Aggregation) -> Result<PerLayer> {
    let out = model.forward(tokens, true, None)?;
    let trace = out.trace.expect("capture requested");
    Ok(trace
        .iter()
        .map(|lt| match agg {
            Aggregation::AllPositions => lt.ffn_out.column_means(),
            Aggregation::LastToken => lt.ffn_out.row(lt.ffn_out.rows() - 1).to_vec(),
        })
        .collect())
}

pub fn collect_ffn_means(
    model: &Transformer,
    pairs: &PromptPairSet,
    agg: Aggregation,
) -> Result<Vec<LayerMeans>> {
    let rows: Vec<(PerLayer, PerLayer)> = pairs
        .pairs()
        .par_iter()
        .enumerate()
        .map(|(index, (p, n))| {
            let wrap = |e| Error::Pair { index, source: Box::new(e) };
            Ok((
                aggregate_ffn(model, p, agg).map_err(wrap)?,
                aggregate_ffn(model, n, agg).map_err(wrap)?,
            ))
        })
        .collect::<Result<_>>()?;
    let n_layers = model.config().n_layers;
    (0..n_layers)
        .map(|layer| {
            let pos: Vec<&[f64]> = rows.iter().map(|(p, _)| p[layer].as_slice()).collect();
            let neg: Vec<&[f64]> = rows.iter().map(|(_, n)| n[layer].as_slice()).collect();
            Ok(LayerMeans { layer, pos: Matrix::from_rows(&pos)?, neg: Matrix::from_rows(&neg)? })
        })
        .collect()
}

/// `T0 = X⁺ − X⁻` and its column-centered version `T`.
#[derive(Clone, Debug)]
pub struct ContrastiveMatrix {
    pub layer: usize,
    pub centered: Matrix,
    pub raw: Matrix,
}

pub fn build_contrastive(layer: usize, pos: &Matrix, neg: &Matrix) -> Result<ContrastiveMatrix> {
    if pos.shape() != neg.shape() {
        return Err(Error::DimensionMismatch {
            expected: pos.rows() * pos.cols(),
            found: neg.rows() * neg.cols(),
        });
    }
    let (n, d) = pos.shape();
    let diff: Vec<f64> = pos.as_slice().iter().zip(neg.as_slice()).map(|(a, b)| a - b).collect();
    let raw = Matrix::from_vec(n, d, diff)?;
    let mean = raw.column_means();
    let mut centered = raw.clone();
    for i in 0..n {
        for (x, m) in centered.row_mut(i).iter_mut().zip(&mean) {
            *x -= m;
        }
    }
    Ok(ContrastiveMatrix { layer, centered, raw })
}

/// A unit direction in residual space proposed as toxic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionCandidate {
    pub vector: Vec<f64>,
    pub layer: usize,
    /// 1-based rank among the layer's singular vectors.
    pub svd_rank: usize,
    pub sigma: f64,
    /// Filled in by ranking.
    pub tox: f64,
}

#[derive(Clone, Debug)]
pub struct LayerCandidates {
    pub candidates: Vec<DirectionCandidate>,
    /// Ranks flagged as numerically degenerate.
    pub degenerate: Vec<usize>,
}

/// Top-k right singular vectors of the centered contrastive matrix.
pub fn extract_candidates(t: &ContrastiveMatrix, k: usize) -> Result<LayerCandidates> {
    let top = top_right_singular(&t.centered, k).map_err(|e| match e {
        Error::Degenerate(msg) => Error::Degenerate(format!("layer {}: {msg}", t.layer)),
        other => other,
    })?;
    let candidates = top
        .components
        .into_iter()
        .enumerate()
        .map(|(i, c)| DirectionCandidate {
            vector: c.vector,
            layer: t.layer,
            svd_rank: i + 1,
            sigma: c.sigma,
            tox: 0.0,
        })
        .collect();
    Ok(LayerCandidates { candidates, degenerate: top.degenerate })
}

/// Candidates from every layer. Layers whose contrastive matrix is all zero
/// are reported in the second element instead of failing the whole run.
pub fn extract_all(
    model: &Transformer,
    pairs: &PromptPairSet,
    k: usize,
    agg: Aggregation,
) -> Result<Extraction> {
    let means = collect_ffn_means(model, pairs, agg)?;
    let mut all = Vec::new();
    let mut flagged = Vec::new();
    for lm in &means {
        let t = build_contrastive(lm.layer, &lm.pos, &lm.neg)?;
        match extract_candidates(&t, k) {
            Ok(lc) => {
                flagged.extend(lc.degenerate.iter().map(|&r| (lm.layer, r)));
                all.extend(lc.candidates);
            }
            Err(Error::Degenerate(msg)) => {
                log::warn!("{msg}");
                flagged.extend((1..=k).map(|r| (lm.layer, r)));
            }
            Err(e) => return Err(e),
        }
    }
    Ok((all, flagged))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{dot, normalized};

    #[test]
    fn identical_inputs_give_zero() {
        let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let t = build_contrastive(0, &x, &x).unwrap();
        assert!(t.raw.as_slice().iter().all(|&v| v == 0.0));
        assert!(t.centered.as_slice().iter().all(|&v| v == 0.0));
        assert!(matches!(extract_candidates(&t, 1), Err(Error::Degenerate(m)) if m.contains("layer 0")));
    }

    #[test]
    fn shared_rows_are_centered_away() {
        let p = Matrix::from_rows(&[vec![2.0, 1.0], vec![3.0, 5.0], vec![0.0, 0.0]]).unwrap();
        let n = Matrix::from_rows(&[vec![1.0, 0.0], vec![2.0, 4.0], vec![-1.0, -1.0]]).unwrap();
        let t = build_contrastive(3, &p, &n).unwrap();
        assert!(t.centered.as_slice().iter().all(|v| v.abs() < 1e-15));
        assert!(build_contrastive(0, &p, &Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn rank_one_recovery() {
        let u = [1.0, -2.0, 0.5, 3.0];
        let w = [0.2, 0.9, -0.4];
        let centered_u: Vec<f64> = {
            let m = u.iter().sum::<f64>() / 4.0;
            u.iter().map(|x| x - m).collect()
        };
        let rows: Vec<Vec<f64>> = centered_u.iter().map(|a| w.iter().map(|b| a * b).collect()).collect();
        let pos = Matrix::from_rows(&rows).unwrap();
        let neg = Matrix::zeros(4, 3);
        let t = build_contrastive(2, &pos, &neg).unwrap();
        let lc = extract_candidates(&t, 1).unwrap();
        let c = &lc.candidates[0];
        assert_eq!((c.layer, c.svd_rank), (2, 1));
        let wn = normalized(&w).unwrap();
        assert!((dot(&c.vector, &wn).abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pair_set_validation() {
        assert!(PromptPairSet::new(vec![(vec![1], vec![2])]).is_err());
        assert!(PromptPairSet::new(vec![(vec![1], vec![2]), (vec![], vec![2])]).is_err());
        assert!(PromptPairSet::new(vec![(vec![1], vec![2]), (vec![3], vec![2])]).is_ok());
    }
}
