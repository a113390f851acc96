//! Perplexity, bad-word probability mass and greedy decoding.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::microformer::{log_prob, softmax, CoefficientEdit, Transformer};
use crate::ranking::BadWordsList;

/// Default number of greedy continuation steps scored per prompt.
pub const DEFAULT_STEPS: usize = 10;

/// Perplexity and toxicity-proxy numbers for one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub perplexity: f64,
    pub badword_mass: f64,
    pub badword_rate: f64,
    pub n_prompts: usize,
    /// Tokens scored for perplexity.
    pub n_tokens: usize,
    pub model_hash: String,
}

/// `exp` of the mean next-token negative log-likelihood over every position
/// `t ≥ 1` of every sequence, pooled across the corpus.
pub fn perplexity(model: &Transformer, corpus: &[Vec<u32>]) -> Result<f64> {
    Ok(perplexity_with(model, corpus, None)?.0)
}

/// Perplexity and number of scored tokens.
pub fn perplexity_with(
    model: &Transformer,
    corpus: &[Vec<u32>],
    edit: Option<&dyn CoefficientEdit>,
) -> Result<(f64, usize)> {
    if corpus.is_empty() {
        return Err(Error::InvalidConfig("empty perplexity corpus".into()));
    }
    let per_seq: Vec<(f64, usize)> = corpus
        .par_iter()
        .enumerate()
        .map(|(i, seq)| {
            if seq.is_empty() {
                log::warn!("skipping empty corpus sequence {i}");
                return Ok((0.0, 0));
            }
            let out = model.forward(seq, false, edit)?;
            let nll: f64 = (1..seq.len()).map(|t| -log_prob(out.logits.row(t - 1), seq[t] as usize)).sum();
            Ok((nll, seq.len() - 1))
        })
        .collect::<Result<_>>()?;
    let (nll, n) = per_seq.iter().fold((0.0, 0), |(a, b), (x, y)| (a + x, b + y));
    if n == 0 {
        return Err(Error::Degenerate("corpus has no position to score".into()));
    }
    Ok(((nll / n as f64).exp(), n))
}

fn argmax(p: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &x) in p.iter().enumerate() {
        if x > p[best] {
            best = i;
        }
    }
    best as u32
}

/// Greedy continuation of `prompt` by `n` tokens (ties go to the lowest id).
/// Returns only the generated tokens.
pub fn generate_greedy(
    model: &Transformer,
    prompt: &[u32],
    n: usize,
    edit: Option<&dyn CoefficientEdit>,
) -> Result<Vec<u32>> {
    Ok(rollout(model, prompt, n, None, edit)?.generated)
}

struct Rollout {
    generated: Vec<u32>,
    masses: Vec<f64>,
}

fn rollout(
    model: &Transformer,
    prompt: &[u32],
    steps: usize,
    bad: Option<&BadWordsList>,
    edit: Option<&dyn CoefficientEdit>,
) -> Result<Rollout> {
    if steps == 0 {
        return Err(Error::InvalidConfig("steps must be at least 1".into()));
    }
    let mut ctx = prompt.to_vec();
    let mut generated = Vec::with_capacity(steps);
    let mut masses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let logits = model.forward(&ctx, false, edit)?;
        let p = softmax(logits.last_logits());
        if let Some(b) = bad {
            masses.push(b.tokens().iter().map(|&t| p[t as usize]).sum());
        }
        let next = argmax(&p);
        generated.push(next);
        ctx.push(next);
    }
    Ok(Rollout { generated, masses })
}

/// Mass and rate statistics over greedy rollouts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToxicityProxy {
    /// Mean over prompts and steps of Σ_{t∈B} p(t | context).
    pub mass: f64,
    /// Fraction of generated tokens that are in B.
    pub rate: f64,
    /// Fraction of prompts whose continuation contains no token from B.
    pub clean_fraction: f64,
}

pub fn toxicity_proxy(
    model: &Transformer,
    prompts: &[Vec<u32>],
    bad: &BadWordsList,
    steps: usize,
    edit: Option<&dyn CoefficientEdit>,
) -> Result<ToxicityProxy> {
    if prompts.is_empty() {
        return Err(Error::InvalidConfig("no prompts to evaluate".into()));
    }
    let rolls: Vec<Rollout> = prompts
        .par_iter()
        .map(|p| rollout(model, p, steps, Some(bad), edit))
        .collect::<Result<_>>()?;
    let total = (prompts.len() * steps) as f64;
    let mass = rolls.iter().flat_map(|r| r.masses.iter()).sum::<f64>() / total;
    let hits = rolls.iter().flat_map(|r| r.generated.iter()).filter(|&&t| bad.contains(t)).count();
    let clean = rolls.iter().filter(|r| !r.generated.iter().any(|&t| bad.contains(t))).count();
    Ok(ToxicityProxy {
        mass,
        rate: hits as f64 / total,
        clean_fraction: clean as f64 / prompts.len() as f64,
    })
}

pub fn badword_mass(
    model: &Transformer,
    prompts: &[Vec<u32>],
    bad: &BadWordsList,
    steps: usize,
) -> Result<f64> {
    Ok(toxicity_proxy(model, prompts, bad, steps, None)?.mass)
}

pub fn evaluate(
    model: &Transformer,
    model_hash: String,
    prompts: &[Vec<u32>],
    corpus: &[Vec<u32>],
    bad: &BadWordsList,
    steps: usize,
) -> Result<EvalReport> {
    let tox = toxicity_proxy(model, prompts, bad, steps, None)?;
    let (perplexity, n_tokens) = perplexity_with(model, corpus, None)?;
    Ok(EvalReport {
        perplexity,
        badword_mass: tox.mass,
        badword_rate: tox.rate,
        n_prompts: prompts.len(),
        n_tokens,
        model_hash,
    })
}
