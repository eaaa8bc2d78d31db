use std::collections::BTreeMap;

use proptest::prelude::*;
use vulnlab_core::packing::{pack, FunctionSample, PackOptions, Partition, Regime};
use vulnlab_core::tokenizer::{EOS, NO, PAD, YES};

fn samples(lens: &[(usize, u8)]) -> Vec<FunctionSample> {
    lens.iter()
        .enumerate()
        .map(|(i, &(n, p))| {
            let part = Partition::ALL[p as usize % 3];
            FunctionSample::new(format!("f{i}"), "x".repeat(n), part)
        })
        .collect()
}

fn options() -> impl Strategy<Value = PackOptions> {
    (
        prop_oneof![Just(Regime::Ntp), Just(Regime::Classification)],
        8usize..96,
        prop::option::of(1usize..6),
        any::<u64>(),
    )
        .prop_map(|(regime, context_size, max_funcs_per_batch, shuffle_seed)| PackOptions {
            regime,
            context_size,
            max_funcs_per_batch,
            shuffle_seed,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn every_sample_lands_once(lens in prop::collection::vec((1usize..150, 0u8..3), 1..40), opts in options()) {
        let input = samples(&lens);
        let packed = pack(&input, &opts).unwrap();
        let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
        for seq in &packed {
            for e in &seq.entries {
                *seen.entry(e.sample_id.as_str()).or_default() += 1;
            }
        }
        prop_assert_eq!(seen.len(), input.len());
        prop_assert!(seen.values().all(|&c| c == 1));
    }

    #[test]
    fn sequences_respect_context_cap_and_layout(
        lens in prop::collection::vec((1usize..150, 0u8..3), 1..40),
        opts in options(),
    ) {
        let input = samples(&lens);
        let labels: BTreeMap<String, u8> = input.iter().map(|s| (s.id.clone(), s.label)).collect();
        for seq in pack(&input, &opts).unwrap() {
            prop_assert_eq!(seq.context_size(), opts.context_size);
            prop_assert!(!seq.entries.is_empty());
            if let Some(cap) = opts.max_funcs_per_batch {
                prop_assert!(seq.entries.len() <= cap);
            }
            let used = seq.used_len();
            prop_assert!(seq.tokens[used..].iter().all(|&t| t == PAD));
            for e in &seq.entries {
                prop_assert!(e.readout < used);
                prop_assert_eq!(e.label, labels[&e.sample_id]);
                match opts.regime {
                    Regime::Classification => prop_assert_eq!(seq.tokens[e.readout], EOS),
                    Regime::Ntp => {
                        let want = if e.label == 1 { YES } else { NO };
                        prop_assert_eq!(seq.tokens[e.readout], want);
                        prop_assert_eq!(seq.tokens[e.readout + 1], EOS);
                    }
                }
            }
        }
    }

    #[test]
    fn packing_is_a_function_of_the_seed(lens in prop::collection::vec((1usize..60, 0u8..3), 1..30), opts in options()) {
        let input = samples(&lens);
        prop_assert_eq!(pack(&input, &opts).unwrap(), pack(&input, &opts).unwrap());
    }
}
