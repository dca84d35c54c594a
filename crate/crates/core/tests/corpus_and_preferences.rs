use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use discern::corpus::{five_core_filter, k_core_filter, Catalog, InteractionRecord};
use discern::error::Error;
use discern::preference::{parse_response, postprocess_to_five};

/// Repeatedly drop users and items below the threshold until nothing changes.
fn k_core_oracle(triples: &[(String, String, i64)], k: usize) -> BTreeMap<String, Vec<String>> {
    let mut live: Vec<(String, String, i64)> = triples.to_vec();
    loop {
        let mut users: BTreeMap<&str, usize> = BTreeMap::new();
        let mut items: BTreeMap<&str, usize> = BTreeMap::new();
        for (u, i, _) in &live {
            *users.entry(u).or_default() += 1;
            *items.entry(i).or_default() += 1;
        }
        let keep: Vec<bool> = live.iter().map(|(u, i, _)| users[u.as_str()] >= k && items[i.as_str()] >= k).collect();
        if keep.iter().all(|&b| b) {
            break;
        }
        live = live.into_iter().zip(keep).filter(|(_, k)| *k).map(|(t, _)| t).collect();
    }
    let mut out: BTreeMap<String, Vec<(i64, String)>> = BTreeMap::new();
    for (u, i, ts) in live {
        out.entry(u).or_default().push((ts, i));
    }
    out.into_iter()
        .map(|(u, mut v)| {
            v.sort();
            (u, v.into_iter().map(|(_, i)| i).collect())
        })
        .collect()
}

#[test]
fn five_core_matches_fixed_point_oracle() {
    let mut non_empty = 0;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_users = rng.random_range(20..80);
        let n_items = rng.random_range(10..40);
        let mut triples = Vec::new();
        let mut seen = BTreeSet::new();
        for u in 0..n_users {
            let len = rng.random_range(1..12);
            for ts in 0..len {
                // Skewed item popularity leaves a non-trivial core.
                let i = (rng.random_range(0.0f64..1.0).powi(2) * n_items as f64) as usize;
                if seen.insert((u, i)) {
                    triples.push((format!("u{u:03}"), format!("i{i:03}"), ts as i64));
                }
            }
        }
        let catalog = Catalog::from_records(
            triples.iter().map(|(u, i, ts)| InteractionRecord::new(u, i, *ts)),
            "oracle",
        )
        .unwrap();
        let expected = k_core_oracle(&triples, 5);
        match five_core_filter(&catalog) {
            Ok(core) => {
                let got: BTreeMap<String, Vec<String>> =
                    core.sequences.iter().map(|(u, s)| (u.clone(), s.items.clone())).collect();
                assert_eq!(got, expected, "seed {seed}");
                let items: BTreeSet<&String> = expected.values().flatten().collect();
                assert_eq!(core.num_items(), items.len());
                non_empty += 1;
            }
            Err(Error::EmptyAfterFilter { .. }) => assert!(expected.is_empty(), "seed {seed}"),
            Err(e) => panic!("seed {seed}: {e}"),
        }
    }
    assert!(non_empty >= 5, "only {non_empty} seeds left a core");
}

#[test]
fn k_core_with_threshold_one_is_identity() {
    let records = (0..6).map(|i| InteractionRecord::new(format!("u{}", i % 2), format!("i{i}"), i as i64));
    let catalog = Catalog::from_records(records, "x").unwrap();
    let same = k_core_filter(&catalog, 1, 1).unwrap();
    assert_eq!(same.sequences, catalog.sequences);
}

fn five(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

#[test]
fn parse_response_fixture() {
    let abcde = five(&["a", "b", "c", "d", "e"]);
    // (reply, expected instructions or None for a parse error)
    let fixture: Vec<(&str, Option<Vec<String>>)> = vec![
        (r#"{"instructions": ["a", "b", "c", "d", "e"]}"#, Some(abcde.clone())),
        ("```json\n{\"instructions\": [\"a\",\"b\",\"c\",\"d\",\"e\"]}\n```", Some(abcde.clone())),
        ("Sure! Here you go:\n{\"instructions\": [\"a\", \"b\", \"c\", \"d\", \"e\"]}\nHope it helps.", Some(abcde.clone())),
        (r#"{"note": "x", "instructions": ["a","b","c","d","e"]}"#, Some(abcde.clone())),
        (r#"{"other": 1} then {"instructions": ["a","b","c","d","e"]}"#, Some(abcde.clone())),
        (r#"{"outer": {"instructions": ["z"]}, "instructions": ["a","b","c","d","e"]}"#, Some(abcde.clone())),
        ("{'instructions': ['a', 'b', 'c', 'd', 'e']}", Some(abcde.clone())),
        ("{'instructions': [\"a\", 'b', \"c\", 'd', \"e\"]}", Some(abcde.clone())),
        ("{'instructions': ['it\\'s fine', 'b']}", Some(five(&["it's fine", "b"]))),
        (r#"{"instructions": []}"#, Some(vec![])),
        (r#"{"instructions": ["Prefers \"matte\" finishes"]}"#, Some(five(&["Prefers \"matte\" finishes"]))),
        (r#"{"instructions": ["ünïcödé ✓", "b"]}"#, Some(five(&["ünïcödé ✓", "b"]))),
        ("{\n  \"instructions\": [\n    \"a\",\n    \"b\"\n  ]\n}", Some(five(&["a", "b"]))),
        (r#"{"instructions": "a, b, c"}"#, None),
        (r#"{"instructions": [1, 2, 3]}"#, None),
        ("no json at all", None),
        ("", None),
        (r#"{"preferences": ["a", "b"]}"#, None),
        (r#"{"instructions": ["a", "b""#, None),
        ("{'instructions': ['a', 'b'", None),
    ];
    assert_eq!(fixture.len(), 20);
    for (reply, want) in fixture {
        match (parse_response(reply), want) {
            (Ok(got), Some(want)) => assert_eq!(got, want, "{reply}"),
            (Err(_), None) => {}
            (got, want) => panic!("{reply:?}: got {got:?}, want {want:?}"),
        }
    }
}

#[test]
fn postprocessing_trims_dedupes_and_caps() {
    let got = postprocess_to_five(five(&[" a ", "a", "", "b", "c", "  ", "d", "e", "f"])).unwrap();
    assert_eq!(got, five(&["a", "b", "c", "d", "e"]));
    match postprocess_to_five(five(&["a", "a", "b"])) {
        Err(Error::IncompletePreferences { survivors }) => assert_eq!(survivors, five(&["a", "b"])),
        other => panic!("{other:?}"),
    }
}
