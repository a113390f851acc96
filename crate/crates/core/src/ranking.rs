//! Vocabulary projection, toxicity scoring, threshold selection and global
//! subspace assembly.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::contrastive::DirectionCandidate;
use crate::error::{Error, Result};
use crate::numerics::{principal_components, Basis, Centering, Matrix};

pub const DEFAULT_TOP_M: usize = 100;

/// Token ids considered toxic, with the strings they came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BadWordsList {
    tokens: BTreeSet<u32>,
    sources: Vec<String>,
}

impl BadWordsList {
    pub fn from_ids(ids: impl IntoIterator<Item = u32>, vocab_size: usize) -> Result<Self> {
        let tokens: BTreeSet<u32> = ids.into_iter().collect();
        Self::checked(tokens, Vec::new(), vocab_size)
    }

    fn checked(tokens: BTreeSet<u32>, sources: Vec<String>, vocab_size: usize) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::InvalidConfig("bad-words list resolves to no tokens".into()));
        }
        if let Some(&token) = tokens.iter().find(|&&t| t as usize >= vocab_size) {
            return Err(Error::TokenOutOfRange { token, vocab: vocab_size });
        }
        Ok(Self { tokens, sources })
    }

    /// Resolves strings against a vocabulary, case-insensitively, also
    /// accepting leading-space (`" x"`, `"Ġx"`) token variants. Returns the
    /// list plus the strings that matched nothing.
    pub fn resolve(sources: &[String], vocab: &[String]) -> Result<(Self, Vec<String>)> {
        let lowered: Vec<String> = vocab.iter().map(|v| v.to_lowercase()).collect();
        let mut tokens = BTreeSet::new();
        let mut unresolved = Vec::new();
        for s in sources {
            let key = s.trim().to_lowercase();
            // The byte-level BPE space marker lowercases too, so compare
            // lowered forms throughout.
            let variants = [key.clone(), format!(" {key}"), format!("\u{120}{key}").to_lowercase()];
            let mut hit = false;
            for (id, v) in lowered.iter().enumerate() {
                if variants.iter().any(|k| k == v) {
                    tokens.insert(id as u32);
                    hit = true;
                }
            }
            if !hit {
                unresolved.push(s.clone());
            }
        }
        Ok((Self::checked(tokens, sources.to_vec(), vocab.len())?, unresolved))
    }

    pub fn contains(&self, token: u32) -> bool {
        self.tokens.contains(&token)
    }

    pub fn tokens(&self) -> &BTreeSet<u32> {
        &self.tokens
    }

    pub fn sources(&self) -> &[String] {
        &self.sources
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Reads a bad-words file: one string per line; blank lines and lines
/// starting with `#` are skipped.
pub fn read_badwords(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenScore {
    pub token: u32,
    pub score: f64,
}

/// Top-`m` tokens of `E·v` (or `E·(−v)` when `negate`), descending score,
/// ties by ascending id.
pub fn vocab_project(embed: &Matrix, v: &[f64], m: usize, negate: bool) -> Result<Vec<TokenScore>> {
    if v.len() != embed.cols() {
        return Err(Error::DimensionMismatch { expected: embed.cols(), found: v.len() });
    }
    if m > embed.rows() {
        return Err(Error::InvalidConfig(format!(
            "top-m of {m} exceeds vocabulary size {}",
            embed.rows()
        )));
    }
    let sign = if negate { -1.0 } else { 1.0 };
    let mut scores: Vec<TokenScore> = embed
        .mul_vec(v)
        .into_iter()
        .enumerate()
        .map(|(i, s)| TokenScore { token: i as u32, score: sign * s })
        .collect();
    scores.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.token.cmp(&b.token)));
    scores.truncate(m);
    Ok(scores)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToxScore {
    pub score: f64,
    /// `v` or `−v`, whichever scored higher (ties keep `v`).
    pub oriented: Vec<f64>,
    pub flipped: bool,
}

fn overlap_fraction(top: &[TokenScore], bad: &BadWordsList, m: usize) -> f64 {
    top.iter().filter(|t| bad.contains(t.token)).count() as f64 / m as f64
}

/// `|top-m(v) ∩ B| / m`, maximized over the two orientations of `v`.
pub fn tox_score(v: &[f64], embed: &Matrix, bad: &BadWordsList, m: usize) -> Result<ToxScore> {
    if m == 0 {
        return Err(Error::InvalidConfig("m must be at least 1".into()));
    }
    let plus = overlap_fraction(&vocab_project(embed, v, m, false)?, bad, m);
    let minus = overlap_fraction(&vocab_project(embed, v, m, true)?, bad, m);
    Ok(if minus > plus {
        ToxScore { score: minus, oriented: v.iter().map(|x| -x).collect(), flipped: true }
    } else {
        ToxScore { score: plus, oriented: v.to_vec(), flipped: false }
    })
}

/// Scores every candidate and replaces its vector with the winning
/// orientation.
pub fn score_candidates(
    candidates: &mut [DirectionCandidate],
    embed: &Matrix,
    bad: &BadWordsList,
    m: usize,
) -> Result<()> {
    let scored: Vec<ToxScore> = candidates
        .par_iter()
        .map(|c| tox_score(&c.vector, embed, bad, m))
        .collect::<Result<_>>()?;
    for (c, s) in candidates.iter_mut().zip(scored) {
        c.tox = s.score;
        c.vector = s.oriented;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Selection {
    pub mean: f64,
    /// Population standard deviation of the scores.
    pub std: f64,
    pub tau: f64,
    pub alpha_sel: f64,
    pub selected: Vec<DirectionCandidate>,
}

/// Keeps candidates with `tox > mean + alpha_sel · std`.
pub fn select_high(candidates: &[DirectionCandidate], alpha_sel: f64) -> Result<Selection> {
    if candidates.len() < 2 {
        return Err(Error::Degenerate(format!(
            "need at least 2 candidates to form a threshold, got {}",
            candidates.len()
        )));
    }
    let n = candidates.len() as f64;
    let mean = candidates.iter().map(|c| c.tox).sum::<f64>() / n;
    let var = candidates.iter().map(|c| (c.tox - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    let tau = mean + alpha_sel * std;
    let selected: Vec<DirectionCandidate> = candidates.iter().filter(|c| c.tox > tau).cloned().collect();
    if selected.is_empty() {
        return Err(Error::EmptySelection { tau, mean, std });
    }
    Ok(Selection { mean, std, tau, alpha_sel, selected })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateRef {
    pub layer: usize,
    pub svd_rank: usize,
    pub sigma: f64,
    pub tox: f64,
}

/// Orthonormal basis of the global toxic subspace plus how it was obtained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalSubspace {
    pub basis: Basis,
    pub eta: f64,
    pub alpha_sel: f64,
    pub tau: f64,
    pub score_mean: f64,
    pub score_std: f64,
    pub top_m: usize,
    pub centering: Centering,
    /// Share of variance explained by each retained direction.
    pub explained: Vec<f64>,
    /// Tox score of each basis direction after orientation.
    pub direction_scores: Vec<f64>,
    pub provenance: Vec<CandidateRef>,
    /// Free-form label (`"gloss"`, `"random-control"`).
    pub kind: String,
}

impl GlobalSubspace {
    /// Wraps an externally supplied basis with neutral bookkeeping fields.
    pub fn from_basis(basis: Basis, kind: &str) -> Self {
        let r = basis.len();
        Self {
            basis,
            eta: 1.0,
            alpha_sel: 0.0,
            tau: 0.0,
            score_mean: 0.0,
            score_std: 0.0,
            top_m: 0,
            centering: Centering::Uncentered,
            explained: vec![0.0; r],
            direction_scores: vec![0.0; r],
            provenance: Vec::new(),
            kind: kind.to_string(),
        }
    }

    pub fn r(&self) -> usize {
        self.basis.len()
    }

    pub fn d_model(&self) -> usize {
        self.basis.dim()
    }

    /// `r / d`.
    pub fn ratio(&self) -> f64 {
        self.r() as f64 / self.d_model() as f64
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::data::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s: Self = crate::data::read_json(path)?;
        // re-validate the basis invariants
        Basis::new(s.basis.dim(), s.basis.vectors().to_vec())?;
        Ok(s)
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn content_hash(&self) -> Result<String> {
        Ok(crate::tensorstore::sha256_hex(&serde_json::to_vec(self)?))
    }
}

/// Runs uncentered (by default) PCA on the selected oriented directions,
/// keeps the smallest prefix reaching `eta` explained variance, and orients
/// each resulting direction by its tox score.
pub fn build_global_subspace(
    selection: &Selection,
    eta: f64,
    centering: Centering,
    embed: &Matrix,
    bad: &BadWordsList,
    m: usize,
) -> Result<GlobalSubspace> {
    if selection.selected.is_empty() {
        return Err(Error::Degenerate("empty V_high".into()));
    }
    let rows: Vec<&[f64]> = selection.selected.iter().map(|c| c.vector.as_slice()).collect();
    let pcs = principal_components(&Matrix::from_rows(&rows)?, eta, centering)?;
    let mut basis = pcs.basis;
    let mut direction_scores = Vec::with_capacity(basis.len());
    for i in 0..basis.len() {
        let s = tox_score(basis.vector(i), embed, bad, m)?;
        if s.flipped {
            basis.negate(i);
        }
        direction_scores.push(s.score);
    }
    Ok(GlobalSubspace {
        basis,
        eta,
        alpha_sel: selection.alpha_sel,
        tau: selection.tau,
        score_mean: selection.mean,
        score_std: selection.std,
        top_m: m,
        centering,
        explained: pcs.explained,
        direction_scores,
        provenance: selection
            .selected
            .iter()
            .map(|c| CandidateRef { layer: c.layer, svd_rank: c.svd_rank, sigma: c.sigma, tox: c.tox })
            .collect(),
        kind: "gloss".into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cand(tox: f64) -> DirectionCandidate {
        DirectionCandidate { vector: vec![1.0, 0.0], layer: 0, svd_rank: 1, sigma: 1.0, tox }
    }

    #[test]
    fn self_projection_ranks_first() {
        let e = Matrix::identity(4);
        let top = vocab_project(&e, e.row(2), 2, false).unwrap();
        assert_eq!(top[0].token, 2);
        // ties among zeros break by id
        assert_eq!(top[1].token, 0);
        let neg = vocab_project(&e, e.row(2), 1, true).unwrap();
        assert_eq!(neg[0].token, 0);
        assert!(vocab_project(&e, e.row(2), 5, false).is_err());
    }

    #[test]
    fn selection_threshold_arithmetic() {
        let s = select_high(&[cand(0.0), cand(0.0), cand(1.0)], 1.0).unwrap();
        assert!((s.mean - 1.0 / 3.0).abs() < 1e-15);
        assert!((s.std - (2.0f64 / 9.0).sqrt()).abs() < 1e-15);
        assert!((s.tau - 0.804_737_854_124_365_2).abs() < 1e-12);
        assert_eq!(s.selected.len(), 1);
        assert_eq!(s.selected[0].tox, 1.0);
    }

    #[test]
    fn equal_scores_select_nothing() {
        let err = select_high(&[cand(0.3), cand(0.3)], 1.0).unwrap_err();
        assert!(matches!(err, Error::EmptySelection { std, .. } if std == 0.0));
        assert!(select_high(&[cand(0.3)], 1.0).is_err());
    }

    #[test]
    fn resolves_case_and_space_variants() {
        let vocab: Vec<String> = ["hello", " Darn", "\u{120}heck", "ok", "DARN"].iter().map(|s| s.to_string()).collect();
        let (list, unresolved) =
            BadWordsList::resolve(&["darn".into(), "heck".into(), "zzz".into()], &vocab).unwrap();
        assert_eq!(list.tokens().iter().copied().collect::<Vec<_>>(), vec![1, 2, 4]);
        assert_eq!(unresolved, vec!["zzz".to_string()]);
        assert!(BadWordsList::resolve(&["zzz".into()], &vocab).is_err());
        assert!(BadWordsList::from_ids([7], 5).is_err());
    }

    #[test]
    fn badwords_file_skips_comments() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.txt");
        fs::write(&p, "# header\nfoo\n\n  bar  \n#baz\n").unwrap();
        assert_eq!(read_badwords(&p).unwrap(), vec!["foo".to_string(), "bar".to_string()]);
    }
}
