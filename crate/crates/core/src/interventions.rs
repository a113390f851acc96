//! Probe construction, value-vector ranking and activation interventions
//! (enhance, suppress, reverse) plus direction shifts read out through the
//! vocabulary.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::contrastive::PromptPairSet;
use crate::error::{Error, Result};
use crate::eval::toxicity_proxy;
use crate::microformer::{CoefficientEdit, ForwardResult, Transformer};
use crate::numerics::{cosine, normalized};
use crate::ranking::{vocab_project, BadWordsList, TokenScore};

pub const DEFAULT_ENHANCE_FACTOR: f64 = 10.0;
pub const DEFAULT_SHIFT_ALPHA: f64 = 100.0;

/// Unit direction separating toxic from non-toxic hidden states.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeVector {
    pub direction: Vec<f64>,
    pub layer: usize,
    pub method: String,
}

/// Normalized difference of mean last-token FFN inputs, toxic minus
/// non-toxic, at `layer`.
pub fn build_probe(model: &Transformer, pairs: &PromptPairSet, layer: usize) -> Result<ProbeVector> {
    if layer >= model.config().n_layers {
        return Err(Error::LayerOutOfRange { layer, n_layers: model.config().n_layers });
    }
    let d = model.config().d_model;
    let mean_last = |seqs: Vec<&[u32]>| -> Result<Vec<f64>> {
        let mut acc = vec![0.0; d];
        for s in &seqs {
            let out = model.forward(s, true, None)?;
            let h = &out.trace.expect("captured")[layer].hidden;
            for (a, x) in acc.iter_mut().zip(h.row(h.rows() - 1)) {
                *a += x;
            }
        }
        acc.iter_mut().for_each(|a| *a /= seqs.len() as f64);
        Ok(acc)
    };
    let pos = mean_last(pairs.positives().collect())?;
    let neg = mean_last(pairs.negatives().collect())?;
    let diff: Vec<f64> = pos.iter().zip(&neg).map(|(a, b)| a - b).collect();
    let direction = normalized(&diff)
        .filter(|_| diff.iter().any(|x| x.abs() > 0.0))
        .ok_or_else(|| Error::Degenerate("toxic and non-toxic mean hidden states coincide".into()))?;
    Ok(ProbeVector { direction, layer, method: "diff-of-means".into() })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct UnitRef {
    pub layer: usize,
    pub unit: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedUnit {
    pub layer: usize,
    pub unit: usize,
    pub cosine: f64,
}

impl RankedUnit {
    pub fn unit_ref(&self) -> UnitRef {
        UnitRef { layer: self.layer, unit: self.unit }
    }
}

/// Every value vector scored by cosine with the probe, most similar first.
pub fn rank_value_vectors(model: &Transformer, probe: &ProbeVector) -> Result<Vec<RankedUnit>> {
    let cfg = model.config();
    if probe.direction.len() != cfg.d_model {
        return Err(Error::DimensionMismatch { expected: cfg.d_model, found: probe.direction.len() });
    }
    let mut out = Vec::with_capacity(cfg.n_layers * cfg.d_ff);
    for layer in 0..cfg.n_layers {
        let values = model.value_vectors(layer)?;
        for unit in 0..cfg.d_ff {
            out.push(RankedUnit { layer, unit, cosine: cosine(values.row(unit), &probe.direction) });
        }
    }
    out.sort_by(|a, b| {
        b.cosine.total_cmp(&a.cosine).then((a.layer, a.unit).cmp(&(b.layer, b.unit)))
    });
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    None,
    /// `m_i ← factor · m_i` for targets.
    Enhance,
    /// `m_i ← 0` for the first `ceil(proportion · |targets|)` targets.
    Suppress,
    /// `m_i ← sign(cos(v_i, probe)) · |m_i|` on every unit of targeted layers.
    ReverseToward,
    /// `m_i ← −sign(cos(v_i, probe)) · |m_i|` on every unit of targeted layers.
    ReverseAway,
}

/// Declarative activation edit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterventionSpec {
    pub mode: Mode,
    /// Ordered targets. For reverse modes only the layers matter.
    pub targets: Vec<UnitRef>,
    pub factor: f64,
    pub proportion: f64,
    pub reference: Option<ProbeVector>,
}

impl Default for InterventionSpec {
    fn default() -> Self {
        Self {
            mode: Mode::None,
            targets: Vec::new(),
            factor: DEFAULT_ENHANCE_FACTOR,
            proportion: 1.0,
            reference: None,
        }
    }
}

impl InterventionSpec {
    pub fn enhance(targets: Vec<UnitRef>, factor: f64) -> Self {
        Self { mode: Mode::Enhance, targets, factor, ..Self::default() }
    }

    pub fn suppress(targets: Vec<UnitRef>, proportion: f64) -> Self {
        Self { mode: Mode::Suppress, targets, proportion, ..Self::default() }
    }

    /// Reverse mode over whole layers.
    pub fn reverse(toward: bool, layers: &[usize], probe: ProbeVector) -> Self {
        Self {
            mode: if toward { Mode::ReverseToward } else { Mode::ReverseAway },
            targets: layers.iter().map(|&layer| UnitRef { layer, unit: 0 }).collect(),
            reference: Some(probe),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.proportion) {
            return Err(Error::InvalidConfig(format!("proportion {} not in [0, 1]", self.proportion)));
        }
        if !self.factor.is_finite() {
            return Err(Error::InvalidConfig("factor must be finite".into()));
        }
        if matches!(self.mode, Mode::ReverseToward | Mode::ReverseAway) && self.reference.is_none() {
            return Err(Error::InvalidConfig("reverse modes need a reference probe".into()));
        }
        Ok(())
    }

    /// Resolves the spec against a model into per-unit actions.
    pub fn compile(&self, model: &Transformer) -> Result<CompiledIntervention> {
        self.validate()?;
        let cfg = model.config();
        for t in &self.targets {
            if t.layer >= cfg.n_layers {
                return Err(Error::LayerOutOfRange { layer: t.layer, n_layers: cfg.n_layers });
            }
            let reverse = matches!(self.mode, Mode::ReverseToward | Mode::ReverseAway);
            if !reverse && t.unit >= cfg.d_ff {
                return Err(Error::UnitOutOfRange { layer: t.layer, unit: t.unit, d_ff: cfg.d_ff });
            }
        }
        let d_ff = cfg.d_ff;
        let mut actions: BTreeMap<usize, Vec<Action>> = BTreeMap::new();
        let mut set = |layer: usize, unit: usize, action: Action| {
            actions.entry(layer).or_insert_with(|| vec![Action::Keep; d_ff])[unit] = action;
        };
        match self.mode {
            Mode::None => {}
            Mode::Enhance => {
                for t in &self.targets {
                    set(t.layer, t.unit, Action::Scale(self.factor));
                }
            }
            Mode::Suppress => {
                let n = (self.proportion * self.targets.len() as f64).ceil() as usize;
                for t in self.targets.iter().take(n) {
                    set(t.layer, t.unit, Action::Zero);
                }
            }
            Mode::ReverseToward | Mode::ReverseAway => {
                let probe = self.reference.as_ref().expect("validated");
                if probe.direction.len() != cfg.d_model {
                    return Err(Error::DimensionMismatch { expected: cfg.d_model, found: probe.direction.len() });
                }
                let flip = if self.mode == Mode::ReverseAway { -1.0 } else { 1.0 };
                for t in &self.targets {
                    let values = model.value_vectors(t.layer)?;
                    for u in 0..d_ff {
                        let s = cosine(values.row(u), &probe.direction);
                        set(t.layer, u, Action::Sign(flip * if s < 0.0 { -1.0 } else { 1.0 }));
                    }
                }
            }
        }
        let mut layers = vec![None; cfg.n_layers];
        for (l, a) in actions {
            layers[l] = Some(a);
        }
        Ok(CompiledIntervention { layers })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Action {
    Keep,
    Scale(f64),
    Zero,
    /// Coefficient becomes `sign · |m|`.
    Sign(f64),
}

/// Per-unit actions ready to be applied during a forward pass.
#[derive(Clone, Debug)]
pub struct CompiledIntervention {
    layers: Vec<Option<Vec<Action>>>,
}

impl CoefficientEdit for CompiledIntervention {
    fn edit(&self, layer: usize, _position: usize, coeffs: &mut [f64]) {
        let Some(Some(actions)) = self.layers.get(layer) else {
            return;
        };
        for (m, a) in coeffs.iter_mut().zip(actions) {
            match *a {
                Action::Keep => {}
                Action::Scale(f) => *m *= f,
                Action::Zero => *m = 0.0,
                Action::Sign(s) => *m = s * m.abs(),
            }
        }
    }
}

pub fn intervene_forward(
    model: &Transformer,
    tokens: &[u32],
    spec: &InterventionSpec,
    capture: bool,
) -> Result<ForwardResult> {
    let compiled = spec.compile(model)?;
    model.forward(tokens, capture, Some(&compiled))
}

/// Mean FFN input `x^ℓ` over every token of every corpus sequence.
pub fn mean_activation(model: &Transformer, corpus: &[Vec<u32>], layer: usize) -> Result<Vec<f64>> {
    if layer >= model.config().n_layers {
        return Err(Error::LayerOutOfRange { layer, n_layers: model.config().n_layers });
    }
    let mut acc = vec![0.0; model.config().d_model];
    let mut n = 0usize;
    for seq in corpus.iter().filter(|s| !s.is_empty()) {
        let out = model.forward(seq, true, None)?;
        let h = &out.trace.expect("captured")[layer].hidden;
        for row in h.row_iter() {
            acc.iter_mut().zip(row).for_each(|(a, x)| *a += x);
        }
        n += h.rows();
    }
    if n == 0 {
        return Err(Error::InvalidConfig("empty corpus".into()));
    }
    acc.iter_mut().for_each(|a| *a /= n as f64);
    Ok(acc)
}

/// Top-`m` vocabulary projection of `xbar + alpha · direction`.
pub fn shift_and_project(
    xbar: &[f64],
    direction: &[f64],
    alpha: f64,
    embed: &crate::numerics::Matrix,
    m: usize,
) -> Result<Vec<TokenScore>> {
    if xbar.len() != direction.len() {
        return Err(Error::DimensionMismatch { expected: xbar.len(), found: direction.len() });
    }
    let shifted: Vec<f64> = xbar.iter().zip(direction).map(|(x, d)| x + alpha * d).collect();
    vocab_project(embed, &shifted, m, false)
}

/// One point of an intervention sweep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub x: f64,
    pub badword_mass: f64,
    pub badword_rate: f64,
}

fn measure(
    model: &Transformer,
    spec: &InterventionSpec,
    prompts: &[Vec<u32>],
    bad: &BadWordsList,
    steps: usize,
    x: f64,
) -> Result<SweepPoint> {
    let compiled = spec.compile(model)?;
    let t = toxicity_proxy(model, prompts, bad, steps, Some(&compiled))?;
    Ok(SweepPoint { x, badword_mass: t.mass, badword_rate: t.rate })
}

/// Enhances the first `count` units of `ranked` by `factor`, for each count.
pub fn enhance_sweep(
    model: &Transformer,
    ranked: &[UnitRef],
    counts: &[usize],
    factor: f64,
    prompts: &[Vec<u32>],
    bad: &BadWordsList,
    steps: usize,
) -> Result<Vec<SweepPoint>> {
    counts
        .iter()
        .map(|&c| {
            let spec = InterventionSpec::enhance(ranked.iter().take(c).copied().collect(), factor);
            measure(model, &spec, prompts, bad, steps, c as f64)
        })
        .collect()
}

/// Suppresses a proportion of the first `list_size` ranked units.
pub fn suppress_sweep(
    model: &Transformer,
    ranked: &[UnitRef],
    list_size: usize,
    proportions: &[f64],
    prompts: &[Vec<u32>],
    bad: &BadWordsList,
    steps: usize,
) -> Result<Vec<SweepPoint>> {
    let list: Vec<UnitRef> = ranked.iter().take(list_size).copied().collect();
    proportions
        .iter()
        .map(|&p| measure(model, &InterventionSpec::suppress(list.clone(), p), prompts, bad, steps, p))
        .collect()
}

/// Reverse-toward (x = 1) and reverse-away (x = −1) over the given layers.
pub fn reverse_pair(
    model: &Transformer,
    probe: &ProbeVector,
    layers: &[usize],
    prompts: &[Vec<u32>],
    bad: &BadWordsList,
    steps: usize,
) -> Result<(SweepPoint, SweepPoint)> {
    let toward = InterventionSpec::reverse(true, layers, probe.clone());
    let away = InterventionSpec::reverse(false, layers, probe.clone());
    Ok((
        measure(model, &toward, prompts, bad, steps, 1.0)?,
        measure(model, &away, prompts, bad, steps, -1.0)?,
    ))
}
