//! Builds the five evaluation axes from a catalog, preference sets and
//! embeddings, saves the suite and reads it back.
//!
//!     cargo run --release --example build_benchmark

use discern::benchmark::{build_benchmark, Axis, BenchmarkEmbeddings, BenchmarkSuite, BuildConfig};
use discern::corpus::Catalog;
use discern::synthetic::{steerable_dataset, SteerableConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = steerable_dataset(&SteerableConfig {
        n_users: 60,
        ..SteerableConfig::default()
    })?;
    let catalog = Catalog::from_records(data.records, "example")?;
    let emb = BenchmarkEmbeddings {
        items: &data.items,
        prefs: &data.prefs,
        reviews: Some(&data.reviews),
    };
    let suite = build_benchmark(&catalog, &data.sets, &emb, None, &BuildConfig::default())?;
    for axis in Axis::ALL {
        let sample = suite.axis(axis).next();
        println!(
            "{:<14} {:>5} instances  e.g. {:?}",
            axis.as_str(),
            suite.axis(axis).count(),
            sample.map(|i| (&i.user, &i.target, &i.preferences))
        );
    }
    // Sentiment twins share a pair id and a target; only the preference text differs.
    if let Some(neg) = suite.axis(Axis::SentimentNeg).next() {
        let pos = suite.axis(Axis::SentimentPos).find(|p| p.pair_id == neg.pair_id).unwrap();
        println!("twin: {:?} / {:?} -> {}", neg.preferences[0], pos.preferences[0], neg.target);
    }

    let dir = tempfile::tempdir()?;
    suite.save(dir.path())?;
    let back = BenchmarkSuite::load(dir.path())?;
    println!("reloaded {} instances from {}", back.instances.len(), dir.path().display());
    Ok(())
}
