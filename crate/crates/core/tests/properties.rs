mod common;

use proptest::prelude::*;
use toxspace::contrastive::DirectionCandidate;
use toxspace::microformer::Transformer;
use toxspace::numerics::{
    complement_apply, dot, norm, orthonormalize, principal_components, svd, Basis, Centering, Matrix,
};
use toxspace::ranking::{select_high, tox_score, BadWordsList};
use toxspace::tensorstore::{ModelConfig, TensorMap};

use common::{gaussian, random_map, random_matrix, random_orthonormal, rng};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn projector_is_symmetric_and_idempotent(seed in any::<u64>(), d in 1usize..24, r in 1usize..8) {
        let r = r.min(d);
        let mut g = rng(seed);
        let basis = Basis::new(d, random_orthonormal(&mut g, d, r)).unwrap();
        let p = basis.projector();
        prop_assert!(p.max_abs_diff(&p.transpose()) <= 1e-12);
        prop_assert!(p.matmul(&p).unwrap().max_abs_diff(&p) <= 1e-10);
        let v = gaussian(&mut g, d);
        let once = basis.remove_from(&v);
        let twice = basis.remove_from(&once);
        for b in basis.vectors() {
            prop_assert!(dot(b, &once).abs() <= 1e-10);
        }
        for (a, b) in once.iter().zip(&twice) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
        let m = random_matrix(&mut g, 3, d);
        let c = complement_apply(&basis, &m).unwrap();
        for i in 0..3 {
            let expected = basis.remove_from(m.row(i));
            prop_assert_eq!(c.row(i), expected.as_slice());
        }
    }

    #[test]
    fn svd_reconstructs_with_orthonormal_factors(seed in any::<u64>(), n in 1usize..10, d in 1usize..10) {
        let mut g = rng(seed);
        let m = random_matrix(&mut g, n, d);
        let s = svd(&m).unwrap();
        prop_assert!(s.reconstruct().max_abs_diff(&m) <= 1e-10 * (1.0 + m.frobenius_norm()));
        prop_assert!(s.sigma.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(s.sigma.iter().all(|&x| x >= 0.0));
        for i in 0..s.rank() {
            let vi = s.vt.row(i);
            prop_assert!((norm(vi) - 1.0).abs() <= 1e-10);
            for j in 0..i {
                prop_assert!(dot(vi, s.vt.row(j)).abs() <= 1e-10);
            }
            let big = vi.iter().enumerate().max_by(|a, b| a.1.abs().total_cmp(&b.1.abs())).unwrap();
            prop_assert!(*big.1 > 0.0);
        }
        prop_assert_eq!(svd(&m).unwrap().vt, s.vt);
    }

    #[test]
    fn pca_basis_is_orthonormal_and_reaches_eta(seed in any::<u64>(), n in 2usize..12, d in 2usize..10, eta in 0.05f64..1.0) {
        let mut g = rng(seed);
        let m = random_matrix(&mut g, n, d);
        for centering in [Centering::Uncentered, Centering::Centered] {
            let pcs = principal_components(&m, eta, centering).unwrap();
            prop_assert!(pcs.explained.iter().sum::<f64>() >= eta - 1e-12);
            let before: f64 = pcs.explained[..pcs.r() - 1].iter().sum();
            prop_assert!(before < eta);
            prop_assert!(Basis::new(d, pcs.basis.vectors().to_vec()).is_ok());
        }
    }

    #[test]
    fn gram_schmidt_spans_inputs(seed in any::<u64>(), d in 2usize..16, k in 1usize..6) {
        let mut g = rng(seed);
        let vs: Vec<Vec<f64>> = (0..k).map(|_| gaussian(&mut g, d)).collect();
        let o = orthonormalize(&vs).unwrap();
        prop_assert_eq!(o.basis.len() + o.dropped.len(), k);
        for v in &vs {
            let residual = o.basis.remove_from(v);
            prop_assert!(norm(&residual) <= 1e-9 * norm(v).max(1.0));
        }
    }

    #[test]
    fn tox_score_bounds_and_invariances(seed in any::<u64>(), m in 1usize..20, scale in 0.01f64..100.0) {
        let mut g = rng(seed);
        let e = random_matrix(&mut g, 40, 6);
        let bad = BadWordsList::from_ids((0..40).filter(|i| i % 3 == 0), 40).unwrap();
        let v = gaussian(&mut g, 6);
        let s = tox_score(&v, &e, &bad, m).unwrap();
        prop_assert!((0.0..=1.0).contains(&s.score));
        let hits = s.score * m as f64;
        prop_assert!((hits - hits.round()).abs() < 1e-9);
        let scaled: Vec<f64> = v.iter().map(|x| scale * x).collect();
        prop_assert_eq!(tox_score(&scaled, &e, &bad, m).unwrap().score, s.score);
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        prop_assert_eq!(tox_score(&neg, &e, &bad, m).unwrap().score, s.score);
        let more = BadWordsList::from_ids(bad.tokens().iter().copied().chain([1, 2, 4]), 40).unwrap();
        prop_assert!(tox_score(&v, &e, &more, m).unwrap().score >= s.score);
    }

    #[test]
    fn selection_splits_at_tau(scores in prop::collection::vec(0.0f64..1.0, 2..30), alpha in 0.0f64..2.0) {
        let cands: Vec<DirectionCandidate> = scores
            .iter()
            .enumerate()
            .map(|(i, &tox)| DirectionCandidate { vector: vec![1.0], layer: i, svd_rank: 1, sigma: 1.0, tox })
            .collect();
        match select_high(&cands, alpha) {
            Ok(sel) => {
                prop_assert!(sel.selected.iter().all(|c| c.tox > sel.tau));
                let n = scores.iter().filter(|&&s| s > sel.tau).count();
                prop_assert_eq!(n, sel.selected.len());
            }
            Err(toxspace::Error::EmptySelection { tau, .. }) => {
                prop_assert!(scores.iter().all(|&s| s <= tau));
            }
            Err(e) => prop_assert!(false, "{e}"),
        }
    }

    #[test]
    fn prefixes_are_unaffected_by_later_tokens(seed in 0u64..1000, tokens in prop::collection::vec(0u32..16, 2..8)) {
        let model = Transformer::new(&random_map(common::small_config(), seed, 0.8)).unwrap();
        let full = model.forward(&tokens, false, None).unwrap();
        let cut = tokens.len() - 1;
        let prefix = model.forward(&tokens[..cut], false, None).unwrap();
        for t in 0..cut {
            prop_assert_eq!(prefix.logits.row(t), full.logits.row(t));
        }
    }

    #[test]
    fn checkpoints_round_trip_bit_exactly(seed in any::<u64>(), layers in 1usize..3, heads in 1usize..3, scale in 0.001f32..100.0) {
        let cfg = ModelConfig { n_layers: layers, d_model: 2 * heads, d_ff: 3, vocab_size: 5, n_heads: heads, max_seq: 4 };
        let map = random_map(cfg, seed, scale);
        let bytes = map.to_bytes().unwrap();
        let back = TensorMap::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &map);
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }
}

#[test]
fn matrix_shape_errors() {
    assert!(Matrix::from_vec(2, 2, vec![1.0; 3]).is_err());
    let a = Matrix::zeros(2, 3);
    assert!(a.matmul(&Matrix::zeros(2, 3)).is_err());
}
