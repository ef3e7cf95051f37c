use hessquant::allocate::{
    allocate_bands, allocate_bits, bert_base_shapes, model_size, reverse_allocation, BitAllocation, Category,
    LayerShape,
};
use proptest::prelude::*;

fn named(omegas: &[f64]) -> Vec<(String, f64)> {
    omegas.iter().enumerate().map(|(i, &o)| (format!("layer{}", i + 1), o)).collect()
}

fn encoder_shapes(n: usize, params: u64, groups: u64) -> Vec<LayerShape> {
    let mut v = vec![
        LayerShape::new("embed.word", 5000, Category::EmbeddingWord),
        LayerShape::new("embed.position", 300, Category::EmbeddingPosition),
    ];
    v.extend((1..=n).map(|i| LayerShape::new(format!("layer{i}"), params, Category::Encoder).with_groups(groups)));
    v.push(LayerShape::new("classifier", 70, Category::Output));
    v
}

fn names(n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("layer{i}")).collect()
}

proptest! {
    #[test]
    fn scaling_sensitivities_keeps_the_allocation(
        omegas in prop::collection::vec(0.0f64..100.0, 1..16),
        c in 1e-3f64..1e3,
        high in 0usize..16,
    ) {
        let high = high.min(omegas.len());
        let scaled: Vec<f64> = omegas.iter().map(|o| o * c).collect();
        let a = allocate_bits(&named(&omegas), &[2, 3], high).unwrap();
        let b = allocate_bits(&named(&scaled), &[2, 3], high).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn high_bits_go_to_the_most_sensitive_layers(
        omegas in prop::collection::vec(0.0f64..100.0, 1..16),
        high in 0usize..16,
    ) {
        let high = high.min(omegas.len());
        let a = allocate_bits(&named(&omegas), &[2, 4], high).unwrap();
        let bits = a.bit_list();
        prop_assert_eq!(bits.iter().filter(|&&b| b == 4).count(), high);
        for (i, &bi) in bits.iter().enumerate() {
            for (j, &bj) in bits.iter().enumerate() {
                if bi > bj {
                    prop_assert!(omegas[i] >= omegas[j]);
                }
            }
        }
    }

    #[test]
    fn bands_assign_each_level_its_count(
        omegas in prop::collection::vec(0.0f64..100.0, 3..16),
        cut in 0.0f64..1.0,
    ) {
        let n = omegas.len();
        let first = ((n as f64) * cut) as usize;
        let bands = [first, (n - first) / 2, n - first - (n - first) / 2];
        let a = allocate_bands(&named(&omegas), &[2, 3, 4], &bands).unwrap();
        let bits = a.bit_list();
        prop_assert_eq!(bits.iter().filter(|&&b| b == 4).count(), bands[0]);
        prop_assert_eq!(bits.iter().filter(|&&b| b == 3).count(), bands[1]);
        prop_assert_eq!(bits.iter().filter(|&&b| b == 2).count(), bands[2]);
    }

    #[test]
    fn raising_one_layer_strictly_grows_the_model(
        bits in prop::collection::vec(1u8..16, 1..13),
        which in 0usize..13,
        groups in 1u64..16,
    ) {
        let n = bits.len();
        let which = which % n;
        let shapes = encoder_shapes(n, 4096, groups);
        let a = BitAllocation::from_bits(&names(n), &bits, 8, 8).unwrap();
        let mut raised = bits.clone();
        raised[which] += 1;
        let b = BitAllocation::from_bits(&names(n), &raised, 8, 8).unwrap();
        let (sa, sb) = (model_size(&a, &shapes).unwrap(), model_size(&b, &shapes).unwrap());
        prop_assert!(sb.total_bits > sa.total_bits);
        prop_assert!(sb.no_embedding_bits > sa.no_embedding_bits);
    }

    #[test]
    fn reversing_keeps_the_size_of_equal_layers(
        high in prop::collection::vec(any::<bool>(), 1..13),
        lo in 1u8..8,
        step in 1u8..8,
        groups in 1u64..16,
    ) {
        let n = high.len();
        let bits: Vec<u8> = high.iter().map(|&h| if h { lo + step } else { lo }).collect();
        let a = BitAllocation::from_bits(&names(n), &bits, 8, 8).unwrap();
        let r = reverse_allocation(&a).unwrap();
        for shapes in [encoder_shapes(n, 7_100_000, groups), encoder_shapes(n, 3, 1)] {
            prop_assert_eq!(model_size(&a, &shapes).unwrap(), model_size(&r, &shapes).unwrap());
        }
        let n_high = high.iter().filter(|&&h| h).count();
        if 2 * n_high == n {
            for (x, y) in a.bit_list().iter().zip(r.bit_list()) {
                prop_assert_ne!(*x, y);
            }
        }
        let mut before = a.bit_list();
        let mut after = r.bit_list();
        before.sort_unstable();
        after.sort_unstable();
        prop_assert_eq!(before, after);
    }
}

#[test]
fn reference_encoder_reversal_of_published_settings_keeps_size() {
    let shapes = bert_base_shapes();
    let names = hessquant::allocate::bert_base_layer_names();
    for setting in ["2/3", "2/4"] {
        for task in ["sst2", "mnli", "conll", "squad"] {
            let bits = hessquant::allocate::published_bits(task, setting).unwrap();
            let a = BitAllocation::from_bits(&names, &bits, 8, 8).unwrap();
            let r = reverse_allocation(&a).unwrap();
            assert_eq!(model_size(&a, &shapes).unwrap(), model_size(&r, &shapes).unwrap());
        }
    }
}

#[test]
fn three_levels_cannot_be_reversed() {
    let a = BitAllocation::from_bits(&names(3), &[2, 3, 4], 8, 8).unwrap();
    assert!(reverse_allocation(&a).is_err());
}
