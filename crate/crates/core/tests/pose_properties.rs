use proptest::prelude::*;
use t2sd_core::autodiff::Tensor;
use t2sd_core::pose::{
    generate_synthetic, load_dataset, max_extent, normalize_pose, pad_to_length, truncate_at_eos, write_dataset,
    DatasetHeader, GrammarConfig, PoseDims, PoseSequence, SignTextPair,
};

fn sequence(k: usize, max_len: usize) -> impl Strategy<Value = PoseSequence> {
    (1..=max_len).prop_flat_map(move |len| {
        prop::collection::vec(-1.5f64..1.5, len * k * 2)
            .prop_map(move |data| PoseSequence::new(PoseDims::new(k, 2, max_len).unwrap(), data).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn normalize_is_idempotent(seq in sequence(6, 12)) {
        let once = normalize_pose(&seq).unwrap();
        let twice = normalize_pose(&once).unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
        prop_assert!((max_extent(&once) - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn normalize_ignores_translation(seq in sequence(6, 12), dx in -10.0f64..10.0, dy in -10.0f64..10.0) {
        let shifted: Vec<f64> = seq.data().chunks(2).flat_map(|p| [p[0] + dx, p[1] + dy]).collect();
        let shifted = PoseSequence::new(seq.dims(), shifted).unwrap();
        let (a, b) = (normalize_pose(&seq).unwrap(), normalize_pose(&shifted).unwrap());
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
    }

    #[test]
    fn pad_then_truncate_is_identity(seq in sequence(5, 20), extra in 0usize..10, thr in 0.01f64..0.5) {
        let norm = normalize_pose(&seq).unwrap();
        let u = norm.len() + extra;
        let padded: Tensor<f64> = pad_to_length(&norm, u).unwrap();
        let t = truncate_at_eos(&padded, thr).unwrap();
        prop_assert_eq!(t.eos_found, extra > 0);
        prop_assert_eq!(t.sequence.data(), norm.data());
    }

    #[test]
    fn dataset_round_trips(seqs in prop::collection::vec(sequence(4, 6), 0..5), emb in any::<bool>()) {
        let pairs: Vec<SignTextPair> = seqs.into_iter().enumerate().map(|(i, s)| {
            let e = emb.then(|| (0..512).map(|j| ((i * 512 + j) as f64).cos()).collect());
            SignTextPair::new(format!("p{i}"), vec!["w".into(), format!("t{i}")], s, e).unwrap()
        }).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let header = DatasetHeader::new(PoseDims::new(4, 2, 6).unwrap());
        write_dataset(&path, &header, &pairs).unwrap();
        let back = load_dataset(&path).unwrap();
        prop_assert_eq!(back.pairs, pairs);
    }

    #[test]
    fn synthesis_is_pure(seed in any::<u64>(), n in 1usize..8) {
        let g = GrammarConfig::default().build().unwrap();
        prop_assert_eq!(generate_synthetic(&g, n, seed).unwrap(), generate_synthetic(&g, n, seed).unwrap());
    }
}
