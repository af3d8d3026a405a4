mod common;

use broadnas::builder::{build_graph, ArchConfig, Sharing, Tap, Variant};
use broadnas::cell::{
    loose_end_nodes, parse_genotype, serialize_genotype, CellError, CellSpec, Genotype, Grammar, NodeSpec, OpKind,
    TokenSequence,
};
use broadnas::checkpoint::Container;
use broadnas::search::init_supernet;
use broadnas::weights::WeightStore;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fixed_genotype() -> Genotype {
    Genotype {
        conv_cell: CellSpec::new(vec![
            NodeSpec::new(0, OpKind::SepConv3x3, 1, OpKind::SkipConnect),
            NodeSpec::new(2, OpKind::MaxPool3x3, 1, OpKind::SepConv5x5),
            NodeSpec::new(0, OpKind::AvgPool3x3, 3, OpKind::SkipConnect),
            NodeSpec::new(2, OpKind::SepConv3x3, 4, OpKind::SepConv3x3),
            NodeSpec::new(1, OpKind::SkipConnect, 3, OpKind::MaxPool3x3),
        ]),
        enh_cell: CellSpec::new(vec![
            NodeSpec::new(1, OpKind::SepConv5x5, 0, OpKind::SepConv5x5),
            NodeSpec::new(2, OpKind::SkipConnect, 0, OpKind::AvgPool3x3),
            NodeSpec::new(3, OpKind::SepConv3x3, 2, OpKind::MaxPool3x3),
            NodeSpec::new(1, OpKind::AvgPool3x3, 4, OpKind::SkipConnect),
            NodeSpec::new(5, OpKind::SepConv3x3, 0, OpKind::SepConv5x5),
        ]),
    }
}

const FIXED_TEXT: &str = "\
conv n2 = sep3(0) + skip(1)
conv n3 = max3(2) + sep5(1)
conv n4 = avg3(0) + skip(3)
conv n5 = sep3(2) + sep3(4)
conv n6 = skip(1) + max3(3)
enh n2 = sep5(1) + sep5(0)
enh n3 = skip(2) + avg3(0)
enh n4 = sep3(3) + max3(2)
enh n5 = avg3(1) + skip(4)
enh n6 = sep3(5) + sep5(0)
";

#[test]
fn golden_genotype_text() {
    let g = fixed_genotype();
    assert_eq!(serialize_genotype(&g), FIXED_TEXT);
    assert_eq!(parse_genotype(FIXED_TEXT).unwrap(), g);
    assert_eq!(loose_end_nodes(&g.conv_cell), vec![5, 6]);
    assert_eq!(loose_end_nodes(&g.enh_cell), vec![6]);
}

#[test]
fn parse_errors_carry_positions() {
    let bad = FIXED_TEXT.replace("conv n4 = avg3(0)", "conv n4 = avg7(0)");
    match parse_genotype(&bad) {
        Err(CellError::Parse { line, column, .. }) => assert_eq!((line, column), (3, 11)),
        other => panic!("unexpected {other:?}"),
    }
    let missing: String = FIXED_TEXT.lines().filter(|l| !l.starts_with("enh n4")).map(|l| format!("{l}\n")).collect();
    assert!(parse_genotype(&missing).is_err());
    let cycle = FIXED_TEXT.replace("conv n3 = max3(2)", "conv n3 = max3(3)");
    assert!(parse_genotype(&cycle).is_err());
}

#[test]
fn fixed_genotype_graphs_match_oracles() {
    let g = fixed_genotype();
    for variant in [Variant::Bnas, Variant::Ccle, Variant::Cce] {
        for (u, k, v) in [(1, 0, 1), (2, 1, 2), (3, 2, 3)] {
            for sharing in [Sharing::OneShot, Sharing::Standalone] {
                let cfg = ArchConfig {
                    variant,
                    u,
                    k,
                    v,
                    c0: 4,
                    num_classes: 10,
                    input_shape: [3, 16, 16],
                    sharing,
                    ..ArchConfig::default()
                };
                let graph = build_graph(&g, &cfg).unwrap();
                assert_eq!(common::topology_violations(&graph), Vec::<String>::new(), "{cfg:?}");
                assert_eq!(graph.parameter_count(), common::param_count_oracle(&g, &cfg), "{cfg:?}");
            }
        }
    }
}

#[test]
fn standalone_deep_cells_do_not_share() {
    let g = fixed_genotype();
    let base = ArchConfig { u: 2, k: 2, v: 1, c0: 4, input_shape: [3, 8, 8], ..ArchConfig::default() };
    let one = build_graph(&g, &base).unwrap();
    let alone = build_graph(&g, &ArchConfig { sharing: Sharing::Standalone, ..base }).unwrap();
    assert!(alone.parameter_count() > one.parameter_count());
    assert!(alone.tap(Tap::Deep { block: 2, index: 2 }).is_some());
}

#[test]
fn invalid_arch_is_rejected() {
    let g = fixed_genotype();
    for cfg in [
        ArchConfig { u: 0, ..ArchConfig::default() },
        ArchConfig { v: 0, ..ArchConfig::default() },
        ArchConfig { c0: 0, ..ArchConfig::default() },
        ArchConfig { num_classes: 0, ..ArchConfig::default() },
    ] {
        assert!(build_graph(&g, &cfg).is_err(), "{cfg:?}");
    }
}

#[test]
fn store_survives_checkpoint_round_trip() {
    let arch = ArchConfig { c0: 2, input_shape: [3, 8, 8], ..ArchConfig::default() };
    let mut store = WeightStore::new(4);
    init_supernet(&mut store, &arch, Grammar::FULL).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut c = Container::default();
    store.add_to_container(&mut c);
    c.save(&dir.path().join("s.bin")).unwrap();
    let back = WeightStore::from_container(&Container::load(&dir.path().join("s.bin")).unwrap()).unwrap();
    assert_eq!(back.len(), store.len());
    for k in store.keys() {
        assert_eq!(back.get(k), store.get(k), "{k}");
    }
    let mut bytes = std::fs::read(dir.path().join("s.bin")).unwrap();
    bytes.truncate(bytes.len() - 7);
    std::fs::write(dir.path().join("t.bin"), bytes).unwrap();
    assert!(Container::load(&dir.path().join("t.bin")).is_err());
}

fn genotype_strategy() -> impl Strategy<Value = Genotype> {
    any::<u64>().prop_map(|s| Grammar::FULL.random_genotype(&mut ChaCha8Rng::seed_from_u64(s)))
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, ..ProptestConfig::default() })]

    #[test]
    fn tokens_round_trip(g in genotype_strategy()) {
        let t = Grammar::FULL.encode(&g).unwrap();
        prop_assert_eq!(t.len(), Grammar::FULL.sequence_len());
        prop_assert_eq!(Grammar::FULL.decode(&t).unwrap(), g);
    }

    #[test]
    fn text_round_trip(g in genotype_strategy()) {
        prop_assert_eq!(parse_genotype(&serialize_genotype(&g)).unwrap(), g);
    }

    #[test]
    fn out_of_range_tokens_are_rejected(g in genotype_strategy(), pos in 0usize..40, bump in 0usize..3) {
        let mut t = Grammar::FULL.encode(&g).unwrap().into_vec();
        t[pos] = Grammar::FULL.range(pos) + bump;
        prop_assert!(Grammar::FULL.decode(&TokenSequence::new(t)).is_err());
    }

    #[test]
    fn random_graphs_satisfy_oracles(
        g in genotype_strategy(),
        variant in 0usize..3,
        u in 1usize..=3,
        k in 0usize..=2,
        v in 1usize..=3,
        c0 in 1usize..=4,
        standalone in any::<bool>(),
    ) {
        let cfg = ArchConfig {
            variant: [Variant::Bnas, Variant::Ccle, Variant::Cce][variant],
            u, k, v, c0,
            num_classes: 5,
            input_shape: [3, 8, 8],
            sharing: if standalone { Sharing::Standalone } else { Sharing::OneShot },
            ..ArchConfig::default()
        };
        let graph = build_graph(&g, &cfg).unwrap();
        let bad = common::topology_violations(&graph);
        prop_assert!(bad.is_empty(), "{:?}", bad);
        prop_assert_eq!(graph.parameter_count(), common::param_count_oracle(&g, &cfg));
    }

    #[test]
    fn supernet_covers_every_one_shot_child(g in genotype_strategy()) {
        let arch = ArchConfig { u: 2, k: 1, v: 2, c0: 2, input_shape: [3, 8, 8], ..ArchConfig::default() };
        let mut store = WeightStore::new(1);
        init_supernet(&mut store, &arch, Grammar::FULL).unwrap();
        let graph = build_graph(&g, &arch).unwrap();
        for k in graph.params.keys() {
            prop_assert!(store.contains(k), "{}", k);
        }
    }
}
