//! Constrained beam search over a semantic-ID trie with a hand-written scorer.
//! Decoding never leaves the trie, and a scorer may answer "no opinion" (None),
//! which spreads probability uniformly over the children.
//!
//!     cargo run --example beam_search

use discern::error::Result;
use discern::sid_index::{constrained_beam_search, CodeScorer, SidTrie};

/// Prefers small codes at the first level and has no opinion below it.
struct FavorLow;

impl CodeScorer for FavorLow {
    type Context = ();
    fn next_code_logits(&self, prefix: &[u32], children: &[u32], _: &()) -> Result<Option<Vec<f64>>> {
        if !prefix.is_empty() {
            return Ok(None);
        }
        let z: f64 = children.iter().map(|&c| (-(c as f64)).exp()).sum();
        Ok(Some(children.iter().map(|&c| -(c as f64) - z.ln()).collect()))
    }
}

fn main() -> Result<()> {
    let trie = SidTrie::from_paths(
        3,
        [
            ("lipstick", vec![0, 1, 0]),
            ("gloss", vec![0, 1, 1]),
            ("liner", vec![0, 2, 0]),
            ("shampoo", vec![1, 0, 0]),
            ("conditioner", vec![1, 0, 1]),
            ("sunscreen", vec![2, 3, 0]),
        ]
        .map(|(i, p)| (i.to_string(), p)),
    )?;
    println!("{} leaves, widest level holds {} prefixes", trie.leaf_count(), trie.max_live_prefixes());
    for width in [1, 2, trie.max_live_prefixes()] {
        let hits = constrained_beam_search(&FavorLow, &trie, &(), width, width.min(3))?;
        let shown: Vec<String> = hits.iter().map(|h| format!("{} {:.3}", h.item, h.log_score.exp())).collect();
        println!("beam {width}: {}", shown.join(", "));
    }
    Ok(())
}
