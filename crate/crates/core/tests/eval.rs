mod common;

use toxspace::eval::{evaluate, generate_greedy, perplexity, toxicity_proxy};
use toxspace::microformer::Transformer;
use toxspace::pipeline::{discover, SubspaceParams};
use toxspace::ranking::BadWordsList;
use toxspace::surgery::{apply_gloss, EditPlan};
use toxspace::tensorstore::ModelConfig;

use common::{fixture, random_map, small_config, toy_map};

#[test]
fn zero_embedding_model_has_vocabulary_sized_perplexity() {
    let cfg = ModelConfig { n_layers: 1, d_model: 4, d_ff: 4, vocab_size: 100, n_heads: 1, max_seq: 8 };
    let map = toy_map(cfg, |name, len| if name.ends_with(".g") { vec![1.0; len] } else { vec![0.0; len] });
    let model = Transformer::new(&map).unwrap();
    let ppl = perplexity(&model, &[vec![1, 5, 99, 3], vec![0, 0]]).unwrap();
    assert!((ppl - 100.0).abs() < 1e-9);
}

#[test]
fn whole_vocabulary_as_bad_list_gives_unit_mass() {
    let model = Transformer::new(&random_map(small_config(), 1, 1.0)).unwrap();
    let all = BadWordsList::from_ids(0..16, 16).unwrap();
    let t = toxicity_proxy(&model, &[vec![1, 2], vec![3]], &all, 4, None).unwrap();
    assert!((t.mass - 1.0).abs() < 1e-12);
    assert_eq!(t.rate, 1.0);
    assert_eq!(t.clean_fraction, 0.0);
}

#[test]
fn mass_grows_with_the_bad_list() {
    let model = Transformer::new(&random_map(small_config(), 2, 1.0)).unwrap();
    let prompts = vec![vec![4, 4], vec![9]];
    let mut last = 0.0;
    for n in 1..=16 {
        let bad = BadWordsList::from_ids(0..n, 16).unwrap();
        let m = toxicity_proxy(&model, &prompts, &bad, 3, None).unwrap().mass;
        assert!(m >= last - 1e-15);
        last = m;
    }
}

#[test]
fn one_greedy_step_is_the_argmax() {
    let model = Transformer::new(&random_map(small_config(), 3, 1.5)).unwrap();
    for prompt in [vec![0], vec![3, 7, 7], vec![15, 1]] {
        let p = model.next_token_dist(&prompt).unwrap();
        let best = (0..p.len()).max_by(|&a, &b| p[a].total_cmp(&p[b]).then(b.cmp(&a))).unwrap();
        assert_eq!(generate_greedy(&model, &prompt, 1, None).unwrap(), vec![best as u32]);
    }
    let long = generate_greedy(&model, &[1], 5, None).unwrap();
    assert_eq!(long.len(), 5);
    assert_eq!(long, generate_greedy(&model, &[1], 5, None).unwrap());
    assert_eq!(generate_greedy(&model, &[1], 8, None).unwrap().len(), 8);
    assert!(generate_greedy(&model, &[1], 9, None).is_err());
}

#[test]
fn perplexity_is_invariant_to_vocabulary_relabeling() {
    let cfg = small_config();
    let map = random_map(cfg, 5, 1.0);
    let perm: Vec<usize> = (0..cfg.vocab_size).map(|i| (i * 5 + 3) % cfg.vocab_size).collect();
    let e = map.get("emb.E").unwrap().data().to_vec();
    let d = cfg.d_model;
    let mut permuted_e = vec![0.0f32; e.len()];
    for (old, &new) in perm.iter().enumerate() {
        permuted_e[new * d..(new + 1) * d].copy_from_slice(&e[old * d..(old + 1) * d]);
    }
    let mut relabeled = map.clone();
    relabeled.set_data("emb.E", permuted_e).unwrap();
    let corpus = vec![vec![1, 2, 3, 4, 5], vec![15, 0, 7]];
    let mapped: Vec<Vec<u32>> = corpus.iter().map(|s| s.iter().map(|&t| perm[t as usize] as u32).collect()).collect();
    let a = perplexity(&Transformer::new(&map).unwrap(), &corpus).unwrap();
    let b = perplexity(&Transformer::new(&relabeled).unwrap(), &mapped).unwrap();
    assert!((a - b).abs() < 1e-9 * a);
}

#[test]
fn empty_inputs_are_rejected() {
    let model = Transformer::new(&random_map(small_config(), 0, 1.0)).unwrap();
    let bad = BadWordsList::from_ids([1], 16).unwrap();
    assert!(perplexity(&model, &[]).is_err());
    assert!(perplexity(&model, &[vec![3]]).is_err());
    assert!(toxicity_proxy(&model, &[], &bad, 10, None).is_err());
    assert!(toxicity_proxy(&model, &[vec![1]], &bad, 0, None).is_err());
}

#[test]
fn surgery_silences_greedy_continuations_of_toxic_prompts() {
    let fx = fixture(0);
    let model = Transformer::new(&fx.model).unwrap();
    let before = toxicity_proxy(&model, &fx.toxic_prompts, &fx.bad_ids, 10, None).unwrap();
    assert_eq!(before.clean_fraction, 0.0);
    let params = SubspaceParams { m: 10, ..SubspaceParams::default() };
    let sub = discover(&model, &fx.pairs, &fx.bad_ids, &params).unwrap().subspace;
    let plan = EditPlan::to_last(sub, fx.planted_layers[0], fx.model.config()).unwrap();
    let edited = Transformer::new(&apply_gloss(&fx.model, &plan).unwrap()).unwrap();
    let after = toxicity_proxy(&edited, &fx.toxic_prompts, &fx.bad_ids, 10, None).unwrap();
    assert!(after.clean_fraction >= 0.8, "{after:?}");
    assert!(after.mass <= 0.5 * before.mass);
}

#[test]
fn report_is_deterministic() {
    let fx = fixture(1);
    let model = Transformer::new(&fx.model).unwrap();
    let hash = fx.model.content_hash().unwrap();
    let a = evaluate(&model, hash.clone(), &fx.toxic_prompts, &fx.neutral_corpus, &fx.bad_ids, 10).unwrap();
    let b = evaluate(&model, hash, &fx.toxic_prompts, &fx.neutral_corpus, &fx.bad_ids, 10).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.n_prompts, 20);
    assert_eq!(a.n_tokens, 20 * 15);
}
