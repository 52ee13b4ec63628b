use std::collections::BTreeSet;

use omni_forge::filter::english_ratio;
use omni_forge::{mix_datasets, parse_qa, Fraction, Manifest, ManifestEntry, MixRecipe, Task};
use proptest::prelude::*;

fn manifest(n: usize) -> Manifest {
    let entries = (0..n)
        .map(|i| ManifestEntry {
            id: format!("v{i}"),
            source: "academic".into(),
            subtitle: None,
            qa: Vec::new(),
            verdicts: Vec::new(),
            task: if i % 5 == 4 { Task::Discarded } else { Task::VideoQa },
            instruction: None,
        })
        .collect();
    Manifest::new("curate", 0, entries)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fraction_floor_is_exact(num in 1u64..50, extra in 0u64..50, n in 0usize..1_000_000) {
        let den = num + extra;
        let f: Fraction = format!("{num}/{den}").parse().unwrap();
        prop_assert_eq!(f.of(n) as u128, (num as u128 * n as u128) / den as u128);
    }

    #[test]
    fn mix_samples_without_replacement(n in 1usize..400, num in 1u64..4, seed in any::<u64>()) {
        let recipe = MixRecipe::parse(&format!(
            "[[source]]\nname = \"a\"\npath = \"a\"\nfraction = \"{num}/4\"\n"
        )).unwrap();
        let m = manifest(n);
        let kept = m.kept().count();
        let mixed = mix_datasets(&recipe, &[m], seed).unwrap();
        prop_assert_eq!(mixed.entries.len(), kept * num as usize / 4);
        let ids: BTreeSet<_> = mixed.entries.iter().map(|e| e.id.as_str()).collect();
        prop_assert_eq!(ids.len(), mixed.entries.len());
        prop_assert!(mixed.entries.iter().all(|e| e.task == Task::VideoQa));
    }

    #[test]
    fn english_ratio_is_a_proportion(s in "\\PC{0,80}") {
        if let Some(r) = english_ratio(&s) {
            prop_assert!((0.0..=1.0).contains(&r));
        } else {
            prop_assert!(s.split_whitespace().next().is_none());
        }
    }

    #[test]
    fn qa_parser_never_returns_empty_fields(s in "(Q: [a-z ]{0,8}\nA: [a-z ]{0,8}\n){0,5}") {
        for p in parse_qa(&s) {
            prop_assert!(!p.question.is_empty() && !p.answer.is_empty());
        }
    }
}
