//! End to end on the synthetic steerable corpus: quantize items, build the
//! benchmark, train the Markov baseline and compare it with preference fusion.
//!
//!     cargo run --release --example steerable_pipeline

use std::time::Instant;

use discern::benchmark::{build_benchmark, Axis, BenchmarkEmbeddings, BuildConfig};
use discern::corpus::{Catalog, Split};
use discern::eval::{evaluate_suite, relative_improvement, EvalConfig};
use discern::quantizer::{assign_semantic_ids, train_residual_kmeans};
use discern::recommenders::{
    train_markov, training_sequences, ModelBundle, ModelKind, DEFAULT_ALPHA, DEFAULT_LAMBDA, DEFAULT_NEGATIVE_PENALTY,
    DEFAULT_ORDER,
};
use discern::synthetic::{steerable_dataset, SteerableConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let start = Instant::now();
    let data = steerable_dataset(&SteerableConfig::default())?;
    let catalog = Catalog::from_records(data.records.clone(), "synthetic")?;
    println!(
        "{} users, {} items, {} interactions",
        catalog.num_users(),
        catalog.num_items(),
        catalog.num_interactions()
    );

    let (levels, k) = (3, 16);
    let quantizer = train_residual_kmeans(&data.items, levels, k, 0, 25)?;
    let sids = assign_semantic_ids(&quantizer, &data.items)?;
    println!("max disambiguator: {}", sids.max_disambiguator());

    let emb = BenchmarkEmbeddings {
        items: &data.items,
        prefs: &data.prefs,
        reviews: Some(&data.reviews),
    };
    let suite = build_benchmark(&catalog, &data.sets, &emb, Some(&sids), &BuildConfig::default())?;
    for axis in Axis::ALL {
        println!("{axis:<16} {}", suite.axis(axis).count());
    }

    let markov = train_markov(&training_sequences(&catalog, &sids)?, levels, k, DEFAULT_ORDER, DEFAULT_ALPHA)?;
    let bundle = |kind| ModelBundle {
        kind,
        markov: markov.clone(),
        lambda: DEFAULT_LAMBDA,
        negative_penalty: DEFAULT_NEGATIVE_PENALTY,
        sids: sids.clone(),
    };
    let config = EvalConfig::default();
    let base = evaluate_suite(&*bundle(ModelKind::Markov).into_recommender(None)?, &suite, &config)?;
    let fused = evaluate_suite(
        &*bundle(ModelKind::Fusion).into_recommender(Some(data.items.clone()))?,
        &suite,
        &config,
    )?;
    println!("{}", base.to_table());
    println!("{}", fused.to_table());
    println!("{}", relative_improvement(&fused, &base)?.to_table());
    let r = |rep: &discern::eval::MetricReport| rep.cell(Axis::Recommendation, Split::Test, 10).map_or(0.0, |c| c.recall);
    println!("recommendation recall@10 ratio: {:.2}", r(&fused) / r(&base));
    println!("elapsed {:.1?}", start.elapsed());
    Ok(())
}
