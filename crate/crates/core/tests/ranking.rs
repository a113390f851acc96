mod common;

use toxspace::contrastive::DirectionCandidate;
use toxspace::microformer::Transformer;
use toxspace::numerics::{cosine, Basis, Centering, Matrix};
use toxspace::ranking::{
    build_global_subspace, select_high, tox_score, vocab_project, BadWordsList, GlobalSubspace,
};
use toxspace::Error;

use common::fixture;

fn candidate(vector: Vec<f64>, layer: usize, tox: f64) -> DirectionCandidate {
    DirectionCandidate { vector, layer, svd_rank: 1, sigma: 1.0, tox }
}

#[test]
fn projection_orders_by_score_then_id() {
    let e = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0], vec![-1.0, 0.5]]).unwrap();
    let top = vocab_project(&e, &[2.0, 0.0], 3, false).unwrap();
    let ids: Vec<u32> = top.iter().map(|t| t.token).collect();
    assert_eq!(ids, vec![0, 2, 1]);
    assert_eq!(top[0].score, 2.0);
    let neg = vocab_project(&e, &[2.0, 0.0], 1, true).unwrap();
    assert_eq!(neg[0].token, 3);
    assert!(vocab_project(&e, &[1.0], 1, false).is_err());
    assert!(vocab_project(&e, &[1.0, 0.0], 5, false).is_err());
}

#[test]
fn planted_direction_projects_onto_bad_tokens() {
    for seed in 0..3 {
        let fx = fixture(seed);
        let model = Transformer::new(&fx.model).unwrap();
        let s = tox_score(&fx.v_star, model.embedding(), &fx.bad_ids, 10).unwrap();
        assert_eq!(s.score, 1.0);
        assert!(!s.flipped);
        let flipped: Vec<f64> = fx.v_star.iter().map(|x| -x).collect();
        let s = tox_score(&flipped, model.embedding(), &fx.bad_ids, 10).unwrap();
        assert_eq!(s.score, 1.0);
        assert!(s.flipped);
        assert!(cosine(&s.oriented, &fx.v_star) > 0.999_999);
    }
}

#[test]
fn larger_bad_list_never_scores_lower() {
    let fx = fixture(0);
    let model = Transformer::new(&fx.model).unwrap();
    let small = BadWordsList::from_ids(fx.bad_ids.tokens().iter().copied().take(4), 100).unwrap();
    let big = BadWordsList::from_ids(fx.bad_ids.tokens().iter().copied().chain(40..60), 100).unwrap();
    let dirs = [fx.v_star.clone(), vec![1.0; 32], (0..32).map(|i| (i as f64).sin()).collect()];
    for v in &dirs {
        let a = tox_score(v, model.embedding(), &small, 10).unwrap().score;
        let b = tox_score(v, model.embedding(), &fx.bad_ids, 10).unwrap().score;
        let c = tox_score(v, model.embedding(), &big, 10).unwrap().score;
        assert!(a <= b && b <= c);
    }
}

#[test]
fn threshold_selection() {
    let cands: Vec<_> = [0.0, 0.0, 0.0, 1.0].iter().map(|&t| candidate(vec![1.0, 0.0], 0, t)).collect();
    let s = select_high(&cands, 1.0).unwrap();
    assert!((s.tau - (0.25 + 0.75f64.sqrt() / 2.0)).abs() < 1e-12);
    assert_eq!(s.selected.len(), 1);
    let zero_alpha = select_high(&cands, 0.0).unwrap();
    assert!(zero_alpha.selected.iter().all(|c| c.tox > 0.25));
    assert!(matches!(select_high(&cands, 5.0), Err(Error::EmptySelection { .. })));
    assert!(select_high(&cands[..1], 1.0).is_err());
}

#[test]
fn collinear_selection_gives_one_direction() {
    let fx = fixture(0);
    let model = Transformer::new(&fx.model).unwrap();
    let mut cands: Vec<_> = (0..4)
        .map(|i| {
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            candidate(fx.v_star.iter().map(|x| sign * x).collect(), i, 0.9)
        })
        .collect();
    cands.push(candidate(vec![1.0 / 32f64.sqrt(); 32], 0, 0.0));
    cands.push(candidate(vec![1.0 / 32f64.sqrt(); 32], 1, 0.0));
    let sel = select_high(&cands, 0.5).unwrap();
    assert_eq!(sel.selected.len(), 4);
    let sub = build_global_subspace(&sel, 0.8, Centering::Uncentered, model.embedding(), &fx.bad_ids, 10).unwrap();
    assert_eq!(sub.r(), 1);
    assert!(cosine(sub.basis.vector(0), &fx.v_star) > 0.999_999);
    assert_eq!(sub.direction_scores, vec![1.0]);
    assert_eq!(sub.provenance.len(), 4);
}

#[test]
fn resolves_strings_against_vocabulary() {
    let fx = fixture(0);
    let (list, unresolved) = BadWordsList::resolve(&fx.bad_words, &fx.vocab).unwrap();
    assert_eq!(list.tokens(), fx.bad_ids.tokens());
    assert!(unresolved.is_empty());
    let (_, missing) =
        BadWordsList::resolve(&[fx.bad_words[0].clone(), "nonexistent".to_string()], &fx.vocab).unwrap();
    assert_eq!(missing, vec!["nonexistent".to_string()]);
    assert!(BadWordsList::resolve(&["nothing".to_string()], &fx.vocab).is_err());
}

#[test]
fn subspace_file_round_trip() {
    let basis = Basis::new(3, vec![vec![0.6, 0.8, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
    let sub = GlobalSubspace::from_basis(basis, "gloss");
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.json");
    sub.save(&path).unwrap();
    let back = GlobalSubspace::load(&path).unwrap();
    assert_eq!(back, sub);
    assert_eq!(back.content_hash().unwrap(), sub.content_hash().unwrap());
    std::fs::write(&path, std::fs::read_to_string(&path).unwrap().replace("0.6", "0.7")).unwrap();
    assert!(GlobalSubspace::load(&path).is_err());
}
