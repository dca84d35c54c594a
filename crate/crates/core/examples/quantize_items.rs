//! Residual k-means and RQ-VAE on a clustered toy corpus: codebook coverage,
//! semantic IDs and how often the disambiguator is needed.
//!
//!     cargo run --release --example quantize_items

use discern::embedding::standardize;
use discern::quantizer::{assign_semantic_ids, codebook_coverage, train_residual_kmeans, train_rqvae, RqVaeConfig};
use discern::synthetic::gaussian_clusters;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let items = gaussian_clusters(64, 2048, 32, 0.05, 1)?;

    let rk = train_residual_kmeans(&items, 3, 64, 7, 25)?;
    let cov = codebook_coverage(&rk, &items)?;
    let sids = assign_semantic_ids(&rk, &items)?;
    println!("rkmeans  coverage per level {cov:.3?}  max disambiguator {}", sids.max_disambiguator());
    let (first, sid) = sids.iter().next().unwrap();
    println!("         {first} -> {:?}", sid.path());

    // The autoencoder expects standardized input.
    let z = standardize(&items)?;
    let config = RqVaeConfig {
        widths: vec![32, 16],
        k: 64,
        epochs: 15,
        dropout: 0.0,
        ..RqVaeConfig::default()
    };
    let vae = train_rqvae(&z, &config)?;
    let last = vae.training_curve.last().unwrap();
    println!(
        "rqvae    coverage per level {:.3?}  final loss {:.4} (reconstruction {:.4})",
        codebook_coverage(&vae, &z)?,
        last.loss,
        last.reconstruction
    );
    Ok(())
}
