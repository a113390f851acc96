//! Orthogonal-complement editing of FFN value weights, and random control
//! subspaces of matching dimension.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::numerics::{orthonormalize_against, Basis, Matrix};
use crate::ranking::GlobalSubspace;
use crate::tensorstore::{ffn_value_name, ModelConfig, TensorMap};

/// Which layers to edit with which subspace. Layer bounds are 0-based and
/// inclusive.
#[derive(Clone, Debug)]
pub struct EditPlan {
    pub subspace: GlobalSubspace,
    pub layer_start: usize,
    pub layer_end: usize,
}

impl EditPlan {
    /// Edits layers `layer_start ..= n_layers - 1`.
    pub fn to_last(subspace: GlobalSubspace, layer_start: usize, config: &ModelConfig) -> Result<Self> {
        let plan = Self { subspace, layer_start, layer_end: config.n_layers.saturating_sub(1) };
        plan.validate(config)?;
        Ok(plan)
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.layer_end >= config.n_layers {
            return Err(Error::LayerOutOfRange { layer: self.layer_end, n_layers: config.n_layers });
        }
        if self.layer_start > self.layer_end {
            return Err(Error::InvalidConfig(format!(
                "layer_start {} is after layer_end {}",
                self.layer_start, self.layer_end
            )));
        }
        if self.subspace.d_model() != config.d_model {
            return Err(Error::DimensionMismatch {
                expected: config.d_model,
                found: self.subspace.d_model(),
            });
        }
        if self.subspace.basis.is_empty() {
            return Err(Error::Degenerate("empty basis".into()));
        }
        Ok(())
    }
}

/// Published starting layers (0-based) and selection settings for the
/// reference model families.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSettings {
    pub name: &'static str,
    pub alpha_sel: f64,
    pub eta: f64,
    pub layer_start: usize,
}

pub fn reference_settings(config: &ModelConfig) -> Option<ReferenceSettings> {
    let c = (config.n_layers, config.d_model, config.d_ff, config.vocab_size);
    let s = |name, alpha_sel, eta, first_1based: usize| ReferenceSettings {
        name,
        alpha_sel,
        eta,
        layer_start: first_1based - 1,
    };
    match c {
        (24, 1024, 4096, _) => Some(s("gpt2-medium", 1.0, 0.8, 13)),
        (28, 4096, 16384, _) => Some(s("gpt-j-6b", 4.0, 0.7, 15)),
        (32, 4096, 16384, _) => Some(s("opt-6.7b", 2.0, 0.8, 10)),
        (32, 4096, 14336, _) => Some(s("mistral-7b", 1.0, 0.7, 15)),
        _ => None,
    }
}

/// Reference start layer when the architecture is recognized, otherwise
/// `ceil(L / 2)`.
pub fn default_layer_start(config: &ModelConfig) -> usize {
    reference_settings(config).map_or(config.n_layers.div_ceil(2), |r| r.layer_start)
}

/// Subspace ratio above which a recognized full-size model is flagged (the
/// published GPT-2 Medium subspace is 4 of 1024 dimensions).
pub const REFERENCE_RATIO_FLAG: f64 = 0.02;

/// `Some(ratio > REFERENCE_RATIO_FLAG)` for recognized reference
/// architectures, `None` otherwise.
pub fn reference_ratio_flag(config: &ModelConfig, subspace: &GlobalSubspace) -> Option<bool> {
    reference_settings(config).map(|_| subspace.ratio() > REFERENCE_RATIO_FLAG)
}

/// Replaces every value vector `v_i` in the planned layers with `(I − P) v_i`.
/// All other tensors are copied untouched. Edit provenance is appended to the
/// checkpoint metadata under `"edits"`.
pub fn apply_gloss(model: &TensorMap, plan: &EditPlan) -> Result<TensorMap> {
    let config = *model.config();
    plan.validate(&config)?;
    let mut out = model.clone();
    let basis = &plan.subspace.basis;
    for layer in plan.layer_start..=plan.layer_end {
        let name = ffn_value_name(layer);
        let t = model.get(&name)?;
        let values = Matrix::from_f32(config.d_ff, config.d_model, t.data())?;
        let mut edited = Vec::with_capacity(t.data().len());
        for i in 0..values.rows() {
            edited.extend(basis.remove_from(values.row(i)).into_iter().map(|x| x as f32));
        }
        out.set_data(&name, edited)?;
    }
    let record = json!({
        "kind": plan.subspace.kind,
        "subspace_sha256": plan.subspace.content_hash()?,
        "r": plan.subspace.r(),
        "layer_start": plan.layer_start,
        "layer_end": plan.layer_end,
    });
    let edits = out.metadata_mut().entry("edits".to_string()).or_insert_with(|| json!([]));
    if let Some(list) = edits.as_array_mut() {
        list.push(record);
    }
    Ok(out)
}

/// Draws `r` Gaussian directions orthogonal to the toxic basis and to each
/// other. Deterministic per seed.
pub fn random_control_subspace(subspace: &GlobalSubspace, seed: u64) -> Result<GlobalSubspace> {
    let (r, d) = (subspace.r(), subspace.d_model());
    if 2 * r > d {
        return Err(Error::Degenerate(format!(
            "cannot fit {r} control directions orthogonal to a {r}-dim subspace in {d} dimensions"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut found: Vec<Vec<f64>> = Vec::with_capacity(r);
    while found.len() < r {
        let draw: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut existing = subspace.basis.vectors().to_vec();
        existing.extend(found.iter().cloned());
        let against = Basis::new(d, existing)?;
        let o = orthonormalize_against(&against, &[draw])?;
        if let Some(v) = o.basis.vectors().first() {
            found.push(v.clone());
        }
    }
    let mut control = subspace.clone();
    control.basis = Basis::new(d, found)?;
    control.direction_scores = vec![0.0; r];
    control.explained = vec![0.0; r];
    control.kind = format!("random-control(seed={seed})");
    Ok(control)
}
