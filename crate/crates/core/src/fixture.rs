//! Synthetic transformer with a planted toxic direction.
//!
//! Geometry (all vectors orthogonal to the all-ones vector so layer norm is a
//! pure rescale):
//!
//! * `v_star`: the planted toxic direction. Bad-token embeddings are
//!   `0.9·v_star + noise`; neutral embeddings carry a small signed
//!   `v_star` component (|cos| ≤ 0.25).
//! * `flag`: layer-0 attention writes the context average of each token's
//!   `v_star` reading into this direction, so later keys can see how toxic
//!   the prefix is.
//! * `bias`: the LN2 bias of every layer, giving FFN keys a constant input
//!   (FFN matrices carry no bias of their own).
//!
//! Layer 0's FFN implements a bigram "chain" over a subset of neutral tokens,
//! which is what the neutral corpus follows and what perplexity measures.
//! Planted layers hold strongly toxic units (value cos ≥ 0.9 with `v_star`).
//! Layers from the first planted layer on also hold pairs of weakly aligned
//! "distributed" units whose off-direction parts cancel, so together they
//! still write `v_star` when individually ranked units are silenced. The last
//! layer holds fallback units that steer toxic contexts toward a neutral
//! token; they only win once the `v_star` writes are gone.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::contrastive::PromptPairSet;
use crate::error::{Error, Result};
use crate::numerics::{cosine, dot, norm, normalized, orthonormalize_against, Basis};
use crate::ranking::BadWordsList;
use crate::tensorstore::{ffn_key_name, ffn_value_name, ModelConfig, Tensor, TensorMap};

/// Shape of the generated fixture.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureShape {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub n_bad: usize,
    pub seed: u64,
}

impl Default for FixtureShape {
    fn default() -> Self {
        Self { n_layers: 4, d_model: 32, d_ff: 64, vocab_size: 100, n_bad: 10, seed: 0 }
    }
}

/// Weight-construction constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Knobs {
    pub bad_cos: f64,
    pub neutral_cos_min: f64,
    pub neutral_cos_max: f64,
    pub pos_scale: f64,
    pub flag_gain: f64,
    pub chain_gain: f64,
    pub chain_cos_threshold: f64,
    pub chain_write: f64,
    pub toxic_units: usize,
    pub toxic_cos: f64,
    pub toxic_key_flag: f64,
    pub toxic_key_star: f64,
    pub toxic_offset: f64,
    pub toxic_write: f64,
    pub dist_pairs: usize,
    pub dist_cos: f64,
    pub dist_key_flag: f64,
    pub dist_key_star: f64,
    pub dist_offset: f64,
    pub dist_write: f64,
    pub fallback_units: usize,
    pub fallback_key_flag: f64,
    pub fallback_offset: f64,
    pub fallback_write: f64,
    pub filler_key: f64,
    pub filler_write: f64,
    pub attn_noise: f64,
    pub n_pairs: usize,
    pub pair_len: usize,
    pub n_eval_prompts: usize,
    pub eval_prompt_len: usize,
    pub n_corpus: usize,
    pub corpus_len: usize,
}

impl Default for Knobs {
    fn default() -> Self {
        Self {
            bad_cos: 0.9,
            neutral_cos_min: 0.1,
            neutral_cos_max: 0.25,
            pos_scale: 0.05,
            flag_gain: 0.3,
            chain_gain: 3.0,
            chain_cos_threshold: 0.6,
            chain_write: 0.8,
            toxic_units: 12,
            toxic_cos: 0.92,
            toxic_key_flag: 3.0,
            toxic_key_star: 0.3,
            toxic_offset: -0.5,
            toxic_write: 0.06,
            dist_pairs: 6,
            dist_cos: 0.28,
            dist_key_flag: 3.0,
            dist_key_star: 0.3,
            dist_offset: -1.0,
            dist_write: 0.1,
            fallback_units: 4,
            fallback_key_flag: 3.0,
            fallback_offset: -2.0,
            fallback_write: 1.0,
            filler_key: 0.3,
            filler_write: 0.05,
            attn_noise: 0.05,
            n_pairs: 48,
            pair_len: 10,
            n_eval_prompts: 20,
            eval_prompt_len: 8,
            n_corpus: 20,
            corpus_len: 16,
        }
    }
}

/// Everything the fixture plants, so recovery can be scored exactly.
#[derive(Clone, Debug)]
pub struct PlantedFixture {
    pub model: TensorMap,
    pub v_star: Vec<f64>,
    pub bad_ids: BadWordsList,
    pub pairs: PromptPairSet,
    pub planted_layers: Vec<usize>,
    pub seed: u64,
    pub vocab: Vec<String>,
    pub bad_words: Vec<String>,
    /// Prompts ending in a bad token, for toxicity evaluation.
    pub toxic_prompts: Vec<Vec<u32>>,
    /// Short chain-following neutral prompts.
    pub neutral_prompts: Vec<Vec<u32>>,
    /// Chain-following sequences for perplexity.
    pub neutral_corpus: Vec<Vec<u32>>,
    /// Units planted with value cos ≥ `toxic_cos` to `v_star`.
    pub toxic_units: Vec<(usize, usize)>,
}

/// Ground truth written next to a generated fixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub v_star: Vec<f64>,
    pub planted_layers: Vec<usize>,
    pub bad_ids: Vec<u32>,
    pub toxic_units: Vec<(usize, usize)>,
    pub seed: u64,
    pub shape: FixtureShape,
}

impl PlantedFixture {
    pub fn ground_truth(&self, shape: FixtureShape) -> GroundTruth {
        GroundTruth {
            v_star: self.v_star.clone(),
            planted_layers: self.planted_layers.clone(),
            bad_ids: self.bad_ids.tokens().iter().copied().collect(),
            toxic_units: self.toxic_units.clone(),
            seed: self.seed,
            shape,
        }
    }
}

struct Frame {
    v_star: Vec<f64>,
    flag: Vec<f64>,
    bias: Vec<f64>,
    /// Orthonormal directions free for token content.
    content: Vec<Vec<f64>>,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn build_frame(rng: &mut ChaCha8Rng, d: usize) -> Result<Frame> {
    let ones = vec![1.0 / (d as f64).sqrt(); d];
    let mut dirs = Basis::new(d, vec![ones])?;
    let mut picked = Vec::with_capacity(d - 1);
    while picked.len() < d - 1 {
        let o = orthonormalize_against(&dirs, &[gaussian(rng, d)])?;
        if let Some(v) = o.basis.vectors().first() {
            picked.push(v.clone());
            let mut all = dirs.vectors().to_vec();
            all.push(v.clone());
            dirs = Basis::new(d, all)?;
        }
    }
    let mut it = picked.into_iter();
    let v_star = it.next().expect("d ≥ 8");
    let flag = it.next().expect("d ≥ 8");
    let bias = it.next().expect("d ≥ 8");
    Ok(Frame { v_star, flag, bias, content: it.collect() })
}

impl Frame {
    /// Random unit vector in the content subspace.
    fn content_unit(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let coef = gaussian(rng, self.content.len());
        let mut v = vec![0.0; self.v_star.len()];
        for (c, dir) in coef.iter().zip(&self.content) {
            v.iter_mut().zip(dir).for_each(|(x, y)| *x += c * y);
        }
        normalized(&v).expect("non-zero draw")
    }

    /// `cos·v_star + sqrt(1 − cos²)·w` for a fresh content direction `w`.
    fn aligned(&self, rng: &mut ChaCha8Rng, cos: f64) -> Vec<f64> {
        let w = self.content_unit(rng);
        let s = (1.0 - cos * cos).sqrt();
        self.v_star.iter().zip(&w).map(|(a, b)| cos * a + s * b).collect()
    }
}

fn axpy(dst: &mut [f64], a: f64, x: &[f64]) {
    dst.iter_mut().zip(x).for_each(|(d, v)| *d += a * v);
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// Generates the default fixture family member for `shape`.
pub fn gen_planted_model(shape: FixtureShape) -> Result<PlantedFixture> {
    gen_planted_model_with(shape, &Knobs::default())
}

pub fn gen_planted_model_with(shape: FixtureShape, k: &Knobs) -> Result<PlantedFixture> {
    let FixtureShape { n_layers, d_model: d, d_ff, vocab_size, n_bad, seed } = shape;
    if d < 8 {
        return Err(Error::InvalidConfig(format!("fixture needs d_model ≥ 8, got {d}")));
    }
    if n_bad == 0 || n_bad >= vocab_size {
        return Err(Error::InvalidConfig(format!("need 0 < n_bad < vocab, got {n_bad} of {vocab_size}")));
    }
    if n_layers < 3 {
        return Err(Error::InvalidConfig("fixture needs at least 3 layers".into()));
    }
    let n_heads = if d % 4 == 0 { 4 } else { 1 };
    // Middle layers: {1, 2} for L = 4.
    let first = (n_layers / 4).max(1);
    let planted_layers: Vec<usize> = (first..=(first + 1).min(n_layers - 2)).collect();
    let last = n_layers - 1;
    let per_layer_units = 2 * k.dist_pairs + k.toxic_units + k.fallback_units;
    if per_layer_units > d_ff {
        return Err(Error::InvalidConfig(format!(
            "d_ff {d_ff} too small for {per_layer_units} planted units per layer"
        )));
    }
    let config = ModelConfig { n_layers, d_model: d, d_ff, vocab_size, n_heads, max_seq: 32 };
    config.validate()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frame = build_frame(&mut rng, d)?;
    let sqrt_d = (d as f64).sqrt();

    // Vocabulary split.
    let mut ids: Vec<u32> = (0..vocab_size as u32).collect();
    ids.shuffle(&mut rng);
    let mut bad: Vec<u32> = ids[..n_bad].to_vec();
    bad.sort_unstable();
    let neutral: Vec<u32> = ids[n_bad..].to_vec();
    let n_chain = neutral.len().min(d_ff * 3 / 4);
    let chain: Vec<u32> = neutral[..n_chain].to_vec();
    let succ: BTreeMap<u32, u32> =
        chain.iter().enumerate().map(|(i, &t)| (t, chain[(i + 1) % n_chain])).collect();

    // Embeddings.
    let mut embed = vec![vec![0.0; d]; vocab_size];
    for &b in &bad {
        embed[b as usize] = frame.aligned(&mut rng, k.bad_cos);
    }
    for &n in &neutral {
        let mag = rng.random_range(k.neutral_cos_min..k.neutral_cos_max);
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        embed[n as usize] = frame.aligned(&mut rng, sign * mag);
    }
    let pos: Vec<Vec<f64>> = (0..config.max_seq)
        .map(|_| {
            let u = frame.content_unit(&mut rng);
            u.iter().map(|x| x * k.pos_scale).collect()
        })
        .collect();

    let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut put = |name: String, shape: Vec<usize>, data: Vec<f32>| -> Result<()> {
        tensors.insert(name, Tensor::new(shape, data)?);
        Ok(())
    };
    put("emb.E".into(), vec![vocab_size, d], embed.iter().flat_map(|r| to_f32(r)).collect())?;
    put("emb.pos".into(), vec![config.max_seq, d], pos.iter().flat_map(|r| to_f32(r)).collect())?;

    let fallback_token = chain[0];
    let mut toxic_units = Vec::new();
    for layer in 0..n_layers {
        let ones = vec![1.0f32; d];
        put(format!("layer.{layer}.ln1.g"), vec![d], ones.clone())?;
        put(format!("layer.{layer}.ln1.b"), vec![d], vec![0.0; d])?;
        put(format!("layer.{layer}.ln2.g"), vec![d], ones)?;
        put(format!("layer.{layer}.ln2.b"), vec![d], to_f32(&frame.bias))?;

        // Attention: layer 0 copies each token's v_star reading into `flag`
        // with uniform causal weights; other layers carry small noise.
        let mut wq = vec![0.0f64; d * d];
        let mut wk = vec![0.0f64; d * d];
        let mut wv = vec![0.0f64; d * d];
        let mut wo = vec![0.0f64; d * d];
        if layer == 0 {
            for i in 0..d {
                wv[i * d] = frame.v_star[i];
                wo[i] = k.flag_gain * frame.flag[i];
            }
        } else {
            for w in [&mut wq, &mut wk] {
                w.iter_mut().for_each(|x| *x = k.attn_noise * rng.sample::<f64, _>(StandardNormal));
            }
            wv.iter_mut().for_each(|x| *x = k.attn_noise * rng.sample::<f64, _>(StandardNormal));
            // Output confined to the content space so it never touches the
            // planted channels.
            for r in 0..d {
                let u = frame.content_unit(&mut rng);
                for c in 0..d {
                    wo[r * d + c] = k.attn_noise * 0.1 * u[c];
                }
            }
        }
        for (n, w) in [("q", wq), ("k", wk), ("v", wv), ("o", wo)] {
            put(format!("layer.{layer}.attn.{n}"), vec![d, d], to_f32(&w))?;
        }

        // FFN: keys as columns (d × d_ff), values as rows (d_ff × d).
        let mut keys = vec![vec![0.0f64; d]; d_ff];
        let mut values = vec![vec![0.0f64; d]; d_ff];
        let mut next = 0usize;
        let mut take = |n: usize| {
            let r = next..next + n;
            next += n;
            r
        };
        let key_for = |flag_w: f64, star_w: f64, offset: f64| -> Vec<f64> {
            let mut kv = vec![0.0; d];
            axpy(&mut kv, flag_w, &frame.flag);
            axpy(&mut kv, star_w, &frame.v_star);
            // x·bias = 1 after LN2, so this is a constant offset.
            axpy(&mut kv, offset, &frame.bias);
            kv
        };
        if layer == 0 {
            for (u, &tok) in take(n_chain).zip(&chain) {
                let e = &embed[tok as usize];
                let mut kv = vec![0.0; d];
                axpy(&mut kv, k.chain_gain, e);
                axpy(&mut kv, -k.chain_gain * sqrt_d * k.chain_cos_threshold, &frame.bias);
                keys[u] = kv;
                values[u] = embed[succ[&tok] as usize].iter().map(|x| x * k.chain_write).collect();
            }
        }
        if planted_layers.contains(&layer) {
            for u in take(k.toxic_units) {
                keys[u] = key_for(k.toxic_key_flag, k.toxic_key_star, k.toxic_offset);
                let v = frame.aligned(&mut rng, k.toxic_cos);
                values[u] = v.iter().map(|x| x * k.toxic_write).collect();
                toxic_units.push((layer, u));
            }
        }
        if layer >= planted_layers[0] {
            let r = take(2 * k.dist_pairs);
            for p in 0..k.dist_pairs {
                let w = frame.aligned(&mut rng, k.dist_cos);
                // Mirror the off-direction part: (c v* + s w) and (c v* − s w).
                let along = dot(&w, &frame.v_star);
                let off: Vec<f64> = w.iter().zip(&frame.v_star).map(|(a, b)| a - along * b).collect();
                for (j, sign) in [1.0, -1.0].into_iter().enumerate() {
                    let u = r.start + 2 * p + j;
                    keys[u] = key_for(k.dist_key_flag, k.dist_key_star, k.dist_offset);
                    values[u] = frame
                        .v_star
                        .iter()
                        .zip(&off)
                        .map(|(a, b)| k.dist_write * (along * a + sign * b))
                        .collect();
                }
            }
        }
        if layer == last {
            for u in take(k.fallback_units) {
                keys[u] = key_for(k.fallback_key_flag, 0.0, k.fallback_offset);
                values[u] = embed[fallback_token as usize].iter().map(|x| x * k.fallback_write).collect();
            }
        }
        for u in next..d_ff {
            let kv = frame.content_unit(&mut rng);
            keys[u] = kv.iter().map(|x| x * k.filler_key * sqrt_d).collect();
            let mut v = frame.content_unit(&mut rng);
            // Keep filler values clear of the planted direction.
            let c: f64 = rng.random_range(-0.2..0.2);
            let s = (1.0 - c * c).sqrt();
            v.iter_mut().zip(&frame.v_star).for_each(|(x, y)| *x = s * *x + c * y);
            values[u] = v.iter().map(|x| x * k.filler_write).collect();
        }
        let mut kdata = vec![0.0f32; d * d_ff];
        for (u, kv) in keys.iter().enumerate() {
            for (i, x) in kv.iter().enumerate() {
                kdata[i * d_ff + u] = *x as f32;
            }
        }
        put(ffn_key_name(layer), vec![d, d_ff], kdata)?;
        put(ffn_value_name(layer), vec![d_ff, d], values.iter().flat_map(|r| to_f32(r)).collect())?;
    }
    let model = TensorMap::new(config, tensors)?;

    // Vocabulary strings: neutral "w017", bad tokens as leading-space
    // upper-case variants so list resolution has work to do.
    let vocab: Vec<String> = (0..vocab_size as u32)
        .map(|t| if bad.binary_search(&t).is_ok() { format!(" BAD{t:03}") } else { format!("w{t:03}") })
        .collect();
    let bad_words: Vec<String> = bad.iter().map(|t| format!("bad{t:03}")).collect();
    let bad_ids = BadWordsList::resolve(&bad_words, &vocab)?.0;

    // Prompts.
    let chain_segment = |rng: &mut ChaCha8Rng, len: usize| -> Vec<u32> {
        let mut t = chain[rng.random_range(0..n_chain)];
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            out.push(t);
            t = succ[&t];
        }
        out
    };
    let mut pairs = Vec::with_capacity(k.n_pairs);
    for i in 0..k.n_pairs {
        let neg = chain_segment(&mut rng, k.pair_len);
        // Toxic fraction sweeps evenly over (0, 1] so pairs differ in how
        // toxic they are.
        let frac = (i % 8 + 1) as f64 / 8.0;
        let n_sub = ((frac * k.pair_len as f64).round() as usize).max(1);
        let mut positions: Vec<usize> = (0..k.pair_len).collect();
        positions.shuffle(&mut rng);
        let mut pos_seq = neg.clone();
        for &p in &positions[..n_sub] {
            pos_seq[p] = bad[rng.random_range(0..n_bad)];
        }
        pairs.push((pos_seq, neg));
    }
    let pairs = PromptPairSet::new(pairs)?;
    let toxic_prompts = (0..k.n_eval_prompts)
        .map(|_| {
            let mut p = chain_segment(&mut rng, k.eval_prompt_len);
            let n_sub = rng.random_range(k.eval_prompt_len / 2..=k.eval_prompt_len);
            let mut positions: Vec<usize> = (0..k.eval_prompt_len - 1).collect();
            positions.shuffle(&mut rng);
            for &q in positions.iter().take(n_sub.saturating_sub(1)) {
                p[q] = bad[rng.random_range(0..n_bad)];
            }
            let last = p.len() - 1;
            p[last] = bad[rng.random_range(0..n_bad)];
            p
        })
        .collect();
    let neutral_prompts = (0..k.n_eval_prompts).map(|_| chain_segment(&mut rng, k.eval_prompt_len)).collect();
    let neutral_corpus = (0..k.n_corpus).map(|_| chain_segment(&mut rng, k.corpus_len)).collect();

    Ok(PlantedFixture {
        model,
        v_star: frame.v_star,
        bad_ids,
        pairs,
        planted_layers,
        seed,
        vocab,
        bad_words,
        toxic_prompts,
        neutral_prompts,
        neutral_corpus,
        toxic_units,
    })
}

/// Audit of the planted-geometry invariants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvariantAudit {
    pub min_bad_cos: f64,
    pub max_other_embedding_cos: f64,
    pub min_toxic_unit_cos: f64,
    pub max_other_unit_cos: f64,
}

impl InvariantAudit {
    pub fn holds(&self) -> bool {
        self.min_bad_cos >= 0.8
            && self.max_other_embedding_cos <= 0.3
            && self.min_toxic_unit_cos >= 0.8
            && self.max_other_unit_cos <= 0.3
    }
}

pub fn audit(fx: &PlantedFixture) -> Result<InvariantAudit> {
    let cfg = *fx.model.config();
    let e = fx.model.get("emb.E")?.data();
    let row = |data: &[f32], i: usize, d: usize| -> Vec<f64> {
        data[i * d..(i + 1) * d].iter().map(|&x| f64::from(x)).collect()
    };
    let mut a = InvariantAudit {
        min_bad_cos: f64::INFINITY,
        max_other_embedding_cos: 0.0,
        min_toxic_unit_cos: f64::INFINITY,
        max_other_unit_cos: 0.0,
    };
    for t in 0..cfg.vocab_size {
        let c = cosine(&row(e, t, cfg.d_model), &fx.v_star);
        if fx.bad_ids.contains(t as u32) {
            a.min_bad_cos = a.min_bad_cos.min(c);
        } else {
            a.max_other_embedding_cos = a.max_other_embedding_cos.max(c.abs());
        }
    }
    for layer in 0..cfg.n_layers {
        let v = fx.model.get(&ffn_value_name(layer))?.data();
        for u in 0..cfg.d_ff {
            let vec = row(v, u, cfg.d_model);
            if norm(&vec) == 0.0 {
                continue;
            }
            let c = cosine(&vec, &fx.v_star);
            if fx.toxic_units.contains(&(layer, u)) {
                a.min_toxic_unit_cos = a.min_toxic_unit_cos.min(c);
            } else {
                a.max_other_unit_cos = a.max_other_unit_cos.max(c.abs());
            }
        }
    }
    Ok(a)
}
