//! Runs the whole pipeline on planted fixtures and prints the headline numbers.
//!
//! cargo run --release --example fixture_report -- [n_seeds]

use toxspace::eval::{perplexity, toxicity_proxy};
use toxspace::fixture::{audit, gen_planted_model, FixtureShape};
use toxspace::interventions::{
    build_probe, enhance_sweep, rank_value_vectors, reverse_pair, suppress_sweep, UnitRef,
};
use toxspace::microformer::Transformer;
use toxspace::numerics::cosine;
use toxspace::pipeline::{discover, SubspaceParams};
use toxspace::surgery::{apply_gloss, random_control_subspace, EditPlan};

fn main() -> anyhow::Result<()> {
    let n: u64 = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(10);
    let params = SubspaceParams { m: 10, ..SubspaceParams::default() };
    for seed in 0..n {
        let shape = FixtureShape { seed, ..FixtureShape::default() };
        let fx = gen_planted_model(shape)?;
        let a = audit(&fx)?;
        let model = Transformer::new(&fx.model)?;
        let steps = 10;
        let base = toxicity_proxy(&model, &fx.toxic_prompts, &fx.bad_ids, steps, None)?;
        let ppl0 = perplexity(&model, &fx.neutral_corpus)?;
        let neutral = toxicity_proxy(&model, &fx.neutral_prompts, &fx.bad_ids, steps, None)?;
        println!(
            "seed {seed}: audit {} | base mass {:.3} rate {:.2} ppl {:.3} neutral mass {:.4}",
            a.holds(),
            base.mass,
            base.rate,
            ppl0,
            neutral.mass
        );
        let disc = match discover(&model, &fx.pairs, &fx.bad_ids, &params) {
            Ok(d) => d,
            Err(e) => {
                println!("  discovery failed: {e}");
                continue;
            }
        };
        let s = &disc.subspace;
        let cos0 = cosine(s.basis.vector(0), &fx.v_star);
        let mut scores: Vec<String> = disc
            .candidates
            .iter()
            .map(|c| format!("{}:{}={:.1}", c.layer, c.svd_rank, c.tox))
            .collect();
        scores.truncate(40);
        println!(
            "  r {} cos {:.3} tau {:.3} selected {} flagged {:?}",
            s.r(),
            cos0,
            s.tau,
            s.provenance.len(),
            disc.degenerate
        );
        println!("  scores {}", scores.join(" "));
        let plan = EditPlan::to_last(s.clone(), 1, fx.model.config())?;
        let edited = Transformer::new(&apply_gloss(&fx.model, &plan)?)?;
        let after = toxicity_proxy(&edited, &fx.toxic_prompts, &fx.bad_ids, steps, None)?;
        let ppl1 = perplexity(&edited, &fx.neutral_corpus)?;
        let control = random_control_subspace(s, seed + 1000)?;
        let cplan = EditPlan::to_last(control, 1, fx.model.config())?;
        let cmodel = Transformer::new(&apply_gloss(&fx.model, &cplan)?)?;
        let cmass = toxicity_proxy(&cmodel, &fx.toxic_prompts, &fx.bad_ids, steps, None)?.mass;
        println!(
            "  gloss mass {:.3} ({:+.1}%) ppl {:.3} ({:+.1}%) | control mass {:.3} ({:+.1}%)",
            after.mass,
            100.0 * (after.mass / base.mass - 1.0),
            ppl1,
            100.0 * (ppl1 / ppl0 - 1.0),
            cmass,
            100.0 * (cmass / base.mass - 1.0)
        );
        let sweep: Vec<String> = (0..fx.model.config().n_layers)
            .map(|l0| {
                let plan = EditPlan::to_last(s.clone(), l0, fx.model.config()).unwrap();
                let m = Transformer::new(&apply_gloss(&fx.model, &plan).unwrap()).unwrap();
                let p = perplexity(&m, &fx.neutral_corpus).unwrap();
                let t = toxicity_proxy(&m, &fx.toxic_prompts, &fx.bad_ids, steps, None).unwrap().mass;
                format!("l0={l0}: ppl {p:.3} mass {t:.3}")
            })
            .collect();
        println!("  {}", sweep.join(" | "));

        let probe = build_probe(&model, &fx.pairs, 2)?;
        let ranked = rank_value_vectors(&model, &probe)?;
        let refs: Vec<UnitRef> = ranked.iter().map(|r| r.unit_ref()).collect();
        let top20_toxic = refs.iter().take(20).filter(|u| fx.toxic_units.contains(&(u.layer, u.unit))).count();
        let pos: Vec<Vec<u32>> = fx.pairs.positives().map(|p| p.to_vec()).collect();
        let enh = enhance_sweep(&model, &refs, &[0, 1, 5, 20], 10.0, &pos, &fx.bad_ids, steps)?;
        let sup = suppress_sweep(&model, &refs, 20, &[0.0, 0.5, 1.0], &fx.toxic_prompts, &fx.bad_ids, steps)?;
        let layers: Vec<usize> = (1..fx.model.config().n_layers).collect();
        let (tw, aw) = reverse_pair(&model, &probe, &layers, &fx.toxic_prompts, &fx.bad_ids, steps)?;
        println!(
            "  top20 toxic {top20_toxic} | enhance {} | suppress {} | toward {:.3} away {:.4} ratio {:.1}",
            enh.iter().map(|p| format!("{:.3}", p.badword_mass)).collect::<Vec<_>>().join(","),
            sup.iter().map(|p| format!("{:.3}", p.badword_mass)).collect::<Vec<_>>().join(","),
            tw.badword_mass,
            aw.badword_mass,
            tw.badword_mass / aw.badword_mass
        );
    }
    Ok(())
}
