//! Minimal pre-layer-norm decoder-only transformer.
//!
//! Per block: `h += Attn(LN1(h))`, then `x = LN2(h)`, `m = GELU(x·K)`,
//! `o = m·V`, `h += o`. Logits are `h·Eᵀ` with the input embedding tied to
//! the output. There is no final layer norm and no bias on any projection.
//!
//! Weights are converted to `f64` once at construction; all arithmetic is
//! done in `f64`.

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::tensorstore::{ffn_key_name, ffn_value_name, ModelConfig, TensorMap};

pub const LN_EPS: f64 = 1e-5;

/// Exact (erf-form) GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Edits FFN coefficients in place before they are combined with the value
/// vectors. `coeffs` holds the `d_ff` coefficients of one position.
pub trait CoefficientEdit: Sync {
    fn edit(&self, layer: usize, position: usize, coeffs: &mut [f64]);
}

#[derive(Clone, Debug)]
struct LayerNorm {
    g: Vec<f64>,
    b: Vec<f64>,
}

impl LayerNorm {
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        x.iter()
            .zip(self.g.iter().zip(&self.b))
            .map(|(v, (g, b))| (v - mean) * inv * g + b)
            .collect()
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln1: LayerNorm,
    wq: Matrix,
    wk: Matrix,
    wv: Matrix,
    wo: Matrix,
    ln2: LayerNorm,
    /// d × d_ff; column i is key vector k_i.
    keys: Matrix,
    /// d_ff × d; row i is value vector v_i.
    values: Matrix,
}

/// Captured FFN quantities for one layer, one row per position.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTrace {
    /// FFN input (post-LN2), T × d.
    pub hidden: Matrix,
    /// Coefficients m_i after any edit, T × d_ff.
    pub coeffs: Matrix,
    /// FFN output o = Σ m_i v_i before the residual add, T × d.
    pub ffn_out: Matrix,
}

#[derive(Clone, Debug)]
pub struct ForwardResult {
    /// T × |V|.
    pub logits: Matrix,
    pub trace: Option<Vec<LayerTrace>>,
}

impl ForwardResult {
    pub fn last_logits(&self) -> &[f64] {
        self.logits.row(self.logits.rows() - 1)
    }
}

/// Forward-ready model built from a [`TensorMap`].
#[derive(Clone, Debug)]
pub struct Transformer {
    config: ModelConfig,
    embed: Matrix,
    pos: Matrix,
    blocks: Vec<Block>,
}

fn mat(map: &TensorMap, name: &str) -> Result<Matrix> {
    let t = map.get(name)?;
    let (r, c) = match t.shape() {
        [r, c] => (*r, *c),
        [n] => (1, *n),
        s => {
            return Err(Error::InvalidTensor { name: name.into(), reason: format!("rank {}", s.len()) })
        }
    };
    Matrix::from_f32(r, c, t.data())
}

fn vector(map: &TensorMap, name: &str) -> Result<Vec<f64>> {
    Ok(map.get(name)?.data().iter().map(|&x| f64::from(x)).collect())
}

impl Transformer {
    pub fn new(map: &TensorMap) -> Result<Self> {
        map.validate()?;
        let config = *map.config();
        let blocks = (0..config.n_layers)
            .map(|i| {
                let p = |s: &str| format!("layer.{i}.{s}");
                Ok(Block {
                    ln1: LayerNorm { g: vector(map, &p("ln1.g"))?, b: vector(map, &p("ln1.b"))? },
                    wq: mat(map, &p("attn.q"))?,
                    wk: mat(map, &p("attn.k"))?,
                    wv: mat(map, &p("attn.v"))?,
                    wo: mat(map, &p("attn.o"))?,
                    ln2: LayerNorm { g: vector(map, &p("ln2.g"))?, b: vector(map, &p("ln2.b"))? },
                    keys: mat(map, &ffn_key_name(i))?,
                    values: mat(map, &ffn_value_name(i))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { config, embed: mat(map, "emb.E")?, pos: mat(map, "emb.pos")?, blocks })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Token embedding / unembedding matrix, |V| × d.
    pub fn embedding(&self) -> &Matrix {
        &self.embed
    }

    /// Value vectors of a layer as rows, d_ff × d.
    pub fn value_vectors(&self, layer: usize) -> Result<&Matrix> {
        self.check_layer(layer)?;
        Ok(&self.blocks[layer].values)
    }

    pub fn key_matrix(&self, layer: usize) -> Result<&Matrix> {
        self.check_layer(layer)?;
        Ok(&self.blocks[layer].keys)
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer >= self.config.n_layers {
            return Err(Error::LayerOutOfRange { layer, n_layers: self.config.n_layers });
        }
        Ok(())
    }

    pub fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::EmptySequence);
        }
        if tokens.len() > self.config.max_seq {
            return Err(Error::SequenceTooLong { len: tokens.len(), max: self.config.max_seq });
        }
        if let Some(&token) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange { token, vocab: self.config.vocab_size });
        }
        Ok(())
    }

    /// FFN of one layer applied to a single FFN input `x`: returns `(o, m)`
    /// with `m_i = GELU(x·k_i)` and `o = Σ m_i v_i`.
    pub fn ffn_apply(&self, layer: usize, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_layer(layer)?;
        if x.len() != self.config.d_model {
            return Err(Error::DimensionMismatch { expected: self.config.d_model, found: x.len() });
        }
        let block = &self.blocks[layer];
        let m: Vec<f64> = block.keys.vec_mul(x).into_iter().map(gelu).collect();
        let o = block.values.vec_mul(&m);
        Ok((o, m))
    }

    fn attention(&self, block: &Block, normed: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let t_len = normed.len();
        let hd = self.config.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let q: Vec<Vec<f64>> = normed.iter().map(|x| block.wq.vec_mul(x)).collect();
        let k: Vec<Vec<f64>> = normed.iter().map(|x| block.wk.vec_mul(x)).collect();
        let v: Vec<Vec<f64>> = normed.iter().map(|x| block.wv.vec_mul(x)).collect();
        let mut out = Vec::with_capacity(t_len);
        let mut scores = vec![0.0; t_len];
        for t in 0..t_len {
            let mut concat = vec![0.0; self.config.d_model];
            for h in 0..self.config.n_heads {
                let r = h * hd..(h + 1) * hd;
                let qh = &q[t][r.clone()];
                let mut max = f64::NEG_INFINITY;
                for s in 0..=t {
                    let sc = qh.iter().zip(&k[s][r.clone()]).map(|(a, b)| a * b).sum::<f64>() * scale;
                    scores[s] = sc;
                    max = max.max(sc);
                }
                let mut z = 0.0;
                for sc in &mut scores[..=t] {
                    *sc = (*sc - max).exp();
                    z += *sc;
                }
                for s in 0..=t {
                    let w = scores[s] / z;
                    for (c, vv) in concat[r.clone()].iter_mut().zip(&v[s][r.clone()]) {
                        *c += w * vv;
                    }
                }
            }
            out.push(block.wo.vec_mul(&concat));
        }
        out
    }

    /// Runs the model over `tokens`. With `capture`, per-layer FFN traces are
    /// returned. `edit` modifies FFN coefficients before the value
    /// combination at every layer and position.
    pub fn forward(
        &self,
        tokens: &[u32],
        capture: bool,
        edit: Option<&dyn CoefficientEdit>,
    ) -> Result<ForwardResult> {
        self.check_tokens(tokens)?;
        let d = self.config.d_model;
        let mut h: Vec<Vec<f64>> = tokens
            .iter()
            .enumerate()
            .map(|(t, &tok)| {
                self.embed.row(tok as usize).iter().zip(self.pos.row(t)).map(|(e, p)| e + p).collect()
            })
            .collect();
        let mut traces = capture.then(Vec::new);
        for (layer, block) in self.blocks.iter().enumerate() {
            let normed: Vec<Vec<f64>> = h.iter().map(|x| block.ln1.apply(x)).collect();
            for (hx, a) in h.iter_mut().zip(self.attention(block, &normed)) {
                hx.iter_mut().zip(a).for_each(|(x, y)| *x += y);
            }
            let mut lt = capture.then(|| LayerTrace {
                hidden: Matrix::zeros(tokens.len(), d),
                coeffs: Matrix::zeros(tokens.len(), self.config.d_ff),
                ffn_out: Matrix::zeros(tokens.len(), d),
            });
            for (t, hx) in h.iter_mut().enumerate() {
                let x = block.ln2.apply(hx);
                let mut m: Vec<f64> = block.keys.vec_mul(&x).into_iter().map(gelu).collect();
                if let Some(e) = edit {
                    e.edit(layer, t, &mut m);
                }
                let o = block.values.vec_mul(&m);
                if let Some(lt) = lt.as_mut() {
                    lt.hidden.row_mut(t).copy_from_slice(&x);
                    lt.coeffs.row_mut(t).copy_from_slice(&m);
                    lt.ffn_out.row_mut(t).copy_from_slice(&o);
                }
                hx.iter_mut().zip(&o).for_each(|(a, b)| *a += b);
            }
            if let (Some(tr), Some(lt)) = (traces.as_mut(), lt) {
                tr.push(lt);
            }
        }
        let mut logits = Matrix::zeros(tokens.len(), self.config.vocab_size);
        for (t, hx) in h.iter().enumerate() {
            let row = self.embed.mul_vec(hx);
            logits.row_mut(t).copy_from_slice(&row);
        }
        Ok(ForwardResult { logits, trace: traces })
    }

    /// Next-token distribution after `tokens`.
    pub fn next_token_dist(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        self.next_token_dist_with(tokens, None)
    }

    pub fn next_token_dist_with(
        &self,
        tokens: &[u32],
        edit: Option<&dyn CoefficientEdit>,
    ) -> Result<Vec<f64>> {
        let out = self.forward(tokens, false, edit)?;
        Ok(softmax(out.last_logits()))
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / z).collect()
}

/// `log softmax(logits)[index]`.
pub fn log_prob(logits: &[f64], index: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln() + max;
    logits[index] - lse
}
