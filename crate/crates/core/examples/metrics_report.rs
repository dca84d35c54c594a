//! Ranking metrics on hand-made lists, then relative improvement and
//! aggregation over report files.
//!
//!     cargo run --example metrics_report

use discern::eval::{m_at_k, ndcg_at_k, recall_at_k, relative_improvement_value, format_improvement};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let ranked: Vec<String> = ["moisturizer", "serum", "toner", "cleanser"].map(String::from).to_vec();
    for target in ["moisturizer", "toner", "mask"] {
        println!(
            "{target:<12} recall@3 {}  ndcg@3 {:.4}",
            recall_at_k(&ranked, target, 3),
            ndcg_at_k(&ranked, target, 3)
        );
    }

    // A twin counts only if the positive request finds the item and the negative one does not.
    let with_find: Vec<String> = ["toner", "serum"].map(String::from).to_vec();
    let with_avoid: Vec<String> = ["cleanser", "serum"].map(String::from).to_vec();
    println!("m@2 = {}", m_at_k(&with_find, &with_avoid, "toner", "toner", 2)?);

    println!("0.0282 vs 0.0249: {}", format_improvement(relative_improvement_value(0.0282, 0.0249)));
    println!("0.01 vs 0.0:      {}", format_improvement(relative_improvement_value(0.01, 0.0)));
    Ok(())
}
