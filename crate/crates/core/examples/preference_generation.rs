//! Prompt rendering and preference generation against a stand-in LLM, plus the
//! forgiving reply parser and the negative-preference rewrite.
//!
//!     cargo run --example preference_generation

use discern::corpus::{Catalog, InteractionRecord};
use discern::error::Result;
use discern::preference::{
    approximate_preferences, classify_preference_sentiment, history_entries, invert_negative_preference, parse_response,
    render_prompt, GenerationConfig, InversionStyle, PromptTemplate, RenderOptions,
};

fn main() -> Result<()> {
    let mut records = Vec::new();
    for (pos, (item, review)) in [
        ("B001", "Lovely scent, lasts all day."),
        ("B002", "Too greasy for my skin."),
        ("B003", "Great value, will buy again."),
    ]
    .into_iter()
    .enumerate()
    {
        let mut r = InteractionRecord::new("alice", item, pos as i64);
        r.review = Some(review.into());
        r.title = Some(format!("Product {item}"));
        records.push(r);
    }
    let catalog = Catalog::from_records(records, "example")?;
    let template = PromptTemplate::resolve("default")?;
    let prompt = render_prompt(&history_entries(&catalog, "alice", 2)?, &template, RenderOptions::default())?;
    println!("--- prompt for alice, t=2 ---\n{}\n", prompt.text);

    // Any closure works as a client; this one answers in Python-literal style inside a code fence.
    let fake_llm = |_: &str| -> Result<String> {
        Ok("```\n{'instructions': ['Prefers long-lasting scents', 'Avoid greasy formulas', \
            'Looks for good value', 'Enjoys body care', 'No heavy creams']}\n```"
            .to_string())
    };
    let report = approximate_preferences(&catalog, &fake_llm, &template, &GenerationConfig::default())?;
    println!("{} sets, {} missing, {} calls", report.sets.len(), report.missing.len(), report.client_calls);

    for text in &parse_response(r#"{"instructions": ["Avoid greasy formulas", "Prefers matte"]}"#)? {
        let sentiment = classify_preference_sentiment(text);
        let flipped = invert_negative_preference(text, InversionStyle::SearchFor).ok();
        println!("{text:<24} {sentiment:?} {flipped:?}");
    }
    Ok(())
}
