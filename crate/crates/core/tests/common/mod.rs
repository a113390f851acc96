//! Helpers shared by the integration tests, including oracles that do not
//! depend on the library's own numerics.

#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use toxspace::fixture::{gen_planted_model, FixtureShape, PlantedFixture};
use toxspace::numerics::Matrix;
use toxspace::tensorstore::{ModelConfig, Tensor, TensorMap};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, gaussian(rng, rows * cols)).unwrap()
}

/// Classical Gram-Schmidt with re-orthogonalization on Gaussian draws.
pub fn random_orthonormal(rng: &mut ChaCha8Rng, d: usize, r: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(r);
    while out.len() < r {
        let mut v = gaussian(rng, d);
        for _ in 0..2 {
            for u in &out {
                let c: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(x, y)| *x -= c * y);
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            out.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    out
}

/// Cyclic two-sided Jacobi eigensolver for a symmetric matrix. Returns
/// eigenvalues in descending order with unit eigenvectors.
pub fn jacobi_eigen(a: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut a: Vec<Vec<f64>> = a.to_vec();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        let scale: f64 = (0..n).map(|i| a[i][i] * a[i][i]).sum::<f64>().max(f64::MIN_POSITIVE);
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q] == 0.0 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for row in a.iter_mut() {
                    let (akp, akq) = (row[p], row[q]);
                    row[p] = c * akp - s * akq;
                    row[q] = s * akp + c * akq;
                }
                let (rp, rq) = (a[p].clone(), a[q].clone());
                for k in 0..n {
                    a[p][k] = c * rp[k] - s * rq[k];
                    a[q][k] = s * rp[k] + c * rq[k];
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j][j].total_cmp(&a[i][i]));
    let values = order.iter().map(|&i| a[i][i]).collect();
    let vectors = order.iter().map(|&i| v.iter().map(|row| row[i]).collect()).collect();
    (values, vectors)
}

/// `MᵀM` as nested rows.
pub fn gram(m: &Matrix) -> Vec<Vec<f64>> {
    let (n, d) = m.shape();
    (0..d)
        .map(|i| (0..d).map(|j| (0..n).map(|k| m[(k, i)] * m[(k, j)]).sum()).collect())
        .collect()
}

pub fn fixture(seed: u64) -> PlantedFixture {
    gen_planted_model(FixtureShape { seed, ..FixtureShape::default() }).unwrap()
}

/// Builds a checkpoint for `cfg` whose tensors come from `fill(name, len)`.
pub fn toy_map(cfg: ModelConfig, mut fill: impl FnMut(&str, usize) -> Vec<f32>) -> TensorMap {
    let tensors: BTreeMap<String, Tensor> = cfg
        .required_tensors()
        .into_iter()
        .map(|(name, shape)| {
            let len = shape.iter().product();
            let t = Tensor::new(shape, fill(&name, len)).unwrap();
            (name, t)
        })
        .collect();
    TensorMap::new(cfg, tensors).unwrap()
}

/// Small random model; LN gains are 1 and LN biases 0.
pub fn random_map(cfg: ModelConfig, seed: u64, scale: f32) -> TensorMap {
    let mut r = rng(seed);
    toy_map(cfg, |name, len| {
        if name.ends_with(".g") {
            vec![1.0; len]
        } else if name.ends_with(".b") {
            vec![0.0; len]
        } else {
            (0..len).map(|_| scale * r.random_range(-1.0f32..1.0)).collect()
        }
    })
}

pub fn small_config() -> ModelConfig {
    ModelConfig { n_layers: 2, d_model: 8, d_ff: 12, vocab_size: 16, n_heads: 2, max_seq: 8 }
}

fn tensor(map: &TensorMap, name: &str) -> Vec<f64> {
    map.get(name).unwrap().data().iter().map(|&x| f64::from(x)).collect()
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
    x.iter().enumerate().map(|(i, v)| (v - mu) / (var + 1e-5).sqrt() * g[i] + b[i]).collect()
}

/// `x · W` with W stored row-major as `rows × cols`.
fn row_times(x: &[f64], w: &[f64], cols: usize) -> Vec<f64> {
    (0..cols).map(|j| x.iter().enumerate().map(|(i, xi)| xi * w[i * cols + j]).sum()).collect()
}

/// Straight-line forward pass written from the architecture description,
/// independent of the library implementation. Returns logits per position.
pub fn reference_logits(map: &TensorMap, tokens: &[u32]) -> Vec<Vec<f64>> {
    let c = *map.config();
    let (d, dm, nh) = (c.d_model, c.d_ff, c.n_heads);
    let hd = d / nh;
    let e = tensor(map, "emb.E");
    let pos = tensor(map, "emb.pos");
    let mut h: Vec<Vec<f64>> = tokens
        .iter()
        .enumerate()
        .map(|(t, &tok)| (0..d).map(|j| e[tok as usize * d + j] + pos[t * d + j]).collect())
        .collect();
    for l in 0..c.n_layers {
        let g = |s: &str| tensor(map, &format!("layer.{l}.{s}"));
        let (g1, b1, g2, b2) = (g("ln1.g"), g("ln1.b"), g("ln2.g"), g("ln2.b"));
        let (wq, wk, wv, wo) = (g("attn.q"), g("attn.k"), g("attn.v"), g("attn.o"));
        let (kk, vv) = (g("ffn.K"), g("ffn.V"));
        let x: Vec<Vec<f64>> = h.iter().map(|r| layer_norm(r, &g1, &b1)).collect();
        let q: Vec<Vec<f64>> = x.iter().map(|r| row_times(r, &wq, d)).collect();
        let k: Vec<Vec<f64>> = x.iter().map(|r| row_times(r, &wk, d)).collect();
        let v: Vec<Vec<f64>> = x.iter().map(|r| row_times(r, &wv, d)).collect();
        for t in 0..tokens.len() {
            let mut cat = vec![0.0; d];
            for head in 0..nh {
                let lo = head * hd;
                let s: Vec<f64> = (0..=t)
                    .map(|u| (lo..lo + hd).map(|j| q[t][j] * k[u][j]).sum::<f64>() / (hd as f64).sqrt())
                    .collect();
                let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = s.iter().map(|z| (z - mx).exp()).collect();
                let z: f64 = w.iter().sum();
                for u in 0..=t {
                    for j in lo..lo + hd {
                        cat[j] += w[u] / z * v[u][j];
                    }
                }
            }
            let a = row_times(&cat, &wo, d);
            h[t].iter_mut().zip(a).for_each(|(x, y)| *x += y);
        }
        for row in h.iter_mut() {
            let x = layer_norm(row, &g2, &b2);
            let m: Vec<f64> = row_times(&x, &kk, dm)
                .into_iter()
                .map(|z| 0.5 * z * (1.0 + libm::erf(z / 2f64.sqrt())))
                .collect();
            let o = row_times(&m, &vv, d);
            row.iter_mut().zip(o).for_each(|(x, y)| *x += y);
        }
    }
    h.iter()
        .map(|r| (0..c.vocab_size).map(|t| (0..d).map(|j| r[j] * e[t * d + j]).sum()).collect())
        .collect()
}
