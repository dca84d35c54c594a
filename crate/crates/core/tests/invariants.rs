use std::collections::BTreeSet;

use proptest::prelude::*;

use discern::corpus::{leave_last_out, truncate_history, Catalog, InteractionRecord, Sentiment};
use discern::embedding::{cosine, EmbeddingMatrix};
use discern::preference::{classify_preference_sentiment, invert_negative_preference, InversionStyle};
use discern::quantizer::{assign_semantic_ids, quantize, Codebook, QuantizerModel};
use discern::sid_index::SidTrie;

fn matrix(rows: Vec<Vec<f32>>) -> EmbeddingMatrix {
    let ids = (0..rows.len()).map(|i| format!("x{i:03}")).collect();
    EmbeddingMatrix::new(ids, rows).unwrap()
}

fn model_and_points() -> impl Strategy<Value = (QuantizerModel, Vec<Vec<f32>>)> {
    (1usize..6, 2usize..6, 1usize..4).prop_flat_map(|(d, k, n)| {
        let books = prop::collection::vec(prop::collection::vec(prop::collection::vec(-1.0f32..1.0, d), k), n);
        let points = prop::collection::vec(prop::collection::vec(-2.0f32..2.0, d), 1..40);
        (books, points).prop_map(|(books, points)| {
            let cbs = books.iter().enumerate().map(|(l, b)| Codebook::from_rows(l, b).unwrap()).collect();
            (QuantizerModel::from_codebooks(cbs).unwrap(), points)
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn codes_are_in_range_and_residual_is_consistent((model, points) in model_and_points()) {
        for x in &points {
            let codes = quantize(&model, x).unwrap();
            prop_assert_eq!(codes.len(), model.n_levels());
            prop_assert!(codes.iter().all(|&c| (c as usize) < model.codebook_size()));
            // The residual is what the chosen codewords leave of the input.
            let q = model.quantize_detailed(x).unwrap();
            prop_assert_eq!(&q.codes, &codes);
            for (j, r) in q.residual.iter().enumerate() {
                let rebuilt = x[j] as f64 - codes.iter().enumerate().map(|(l, &c)| model.codebooks[l].codeword(c as usize)[j] as f64).sum::<f64>();
                prop_assert!((r - rebuilt).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn semantic_ids_are_unique((model, points) in model_and_points()) {
        let m = matrix(points);
        let sids = assign_semantic_ids(&model, &m).unwrap();
        prop_assert_eq!(sids.len(), m.len());
        let paths: BTreeSet<Vec<u32>> = sids.iter().map(|(_, s)| s.path()).collect();
        prop_assert_eq!(paths.len(), m.len());
        for (item, sid) in sids.iter() {
            prop_assert_eq!(sids.item_for_path(&sid.path()), Some(item.as_str()));
        }
    }

    #[test]
    fn trie_holds_exactly_its_paths(paths in prop::collection::btree_set(prop::collection::vec(0u32..4, 3), 1..40)) {
        let leaves: Vec<(String, Vec<u32>)> = paths.iter().enumerate().map(|(i, p)| (format!("i{i}"), p.clone())).collect();
        let trie = SidTrie::from_paths(3, leaves.clone()).unwrap();
        prop_assert_eq!(trie.leaf_count(), paths.len());
        for (item, p) in &leaves {
            prop_assert_eq!(trie.item_at(p), Some(item.as_str()));
            for l in 0..3 {
                prop_assert!(trie.children(&p[..l]).unwrap().contains(&p[l]));
            }
        }
        prop_assert!(trie.max_live_prefixes() <= paths.len());
    }

    #[test]
    fn leave_last_out_partitions_targets(lens in prop::collection::vec(1usize..9, 1..20)) {
        let records = lens.iter().enumerate().flat_map(|(u, &n)| {
            (0..n).map(move |p| InteractionRecord::new(format!("u{u:02}"), format!("i{}", (u * 3 + p) % 11), p as i64))
        });
        let catalog = Catalog::from_records(records, "p").unwrap();
        let split = leave_last_out(&catalog);
        let eligible: Vec<usize> = catalog.sequences.values().map(|s| s.len()).filter(|&n| n >= 3).collect();
        prop_assert_eq!(split.test.len(), eligible.len());
        prop_assert_eq!(split.val.len(), eligible.len());
        prop_assert_eq!(split.train.len(), eligible.iter().map(|n| n - 3).sum::<usize>());
        for ex in split.train.iter().chain(&split.val).chain(&split.test) {
            let seq = catalog.sequence(&ex.user).unwrap();
            prop_assert_eq!(&ex.history[..], &seq.items[..ex.position]);
            prop_assert_eq!(&ex.target, &seq.items[ex.position]);
        }
    }

    #[test]
    fn truncation_keeps_the_most_recent(h in prop::collection::vec(0u32..100, 0..40), n in 0usize..30) {
        let kept = truncate_history(&h, n);
        prop_assert_eq!(kept.len(), h.len().min(n));
        prop_assert_eq!(kept, &h[h.len() - kept.len()..]);
    }

    #[test]
    fn cosine_is_bounded_and_symmetric(a in prop::collection::vec(-5.0f32..5.0, 4), b in prop::collection::vec(-5.0f32..5.0, 4)) {
        if let (Some(x), Some(y)) = (cosine(&a, &b), cosine(&b, &a)) {
            prop_assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&x));
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn embeddings_round_trip(rows in prop::collection::vec(prop::collection::vec(-3.0f32..3.0, 3), 1..20)) {
        let m = matrix(rows);
        let back = EmbeddingMatrix::from_bytes(&m.to_bytes()).unwrap();
        prop_assert_eq!(back.digest(), m.digest());
        prop_assert_eq!(back.as_flat(), m.as_flat());
    }

    #[test]
    fn catalog_round_trips(lens in prop::collection::vec(1usize..6, 1..10)) {
        let records = lens.iter().enumerate().flat_map(|(u, &n)| {
            (0..n).map(move |p| InteractionRecord::new(format!("u{u}"), format!("i{p}"), (p * 10) as i64))
        });
        let catalog = Catalog::from_records(records, "p").unwrap();
        prop_assert_eq!(Catalog::from_bytes(&catalog.to_bytes()).unwrap(), catalog);
    }

    #[test]
    fn inversion_only_touches_negative_preferences(
        marker in prop::sample::select(vec!["Avoid", "avoid", "EXCLUDE", "No", "no,", "Prefers", "Likes", "Nothing"]),
        rest in "[a-z]{1,8}( [a-z]{1,8}){0,3}",
    ) {
        let text = format!("{marker} {rest}");
        match classify_preference_sentiment(&text) {
            Sentiment::Negative => {
                let inv = invert_negative_preference(&text, InversionStyle::Find).unwrap();
                prop_assert_eq!(inv, format!("Find {rest}"));
                let inv = invert_negative_preference(&text, InversionStyle::SearchFor).unwrap();
                prop_assert_eq!(classify_preference_sentiment(&inv), Sentiment::Positive);
            }
            Sentiment::Positive => prop_assert!(invert_negative_preference(&text, InversionStyle::Find).is_err()),
        }
    }
}
