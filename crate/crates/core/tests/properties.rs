use fedwrap_core::dataset::{build_partition, class_histogram, Dataset, PartitionMode, PartitionSpec};
use fedwrap_core::federation::{fedavg_aggregate, ClientUpdate};
use fedwrap_core::metrics::{metrics_from_confusion, ConfusionMatrix, TaskKind};
use fedwrap_core::model::{Model, ModelSpec, ParamBlock};
use fedwrap_core::runtime::protocol::{decode, encode, FrameDecoder, Message, Payload};
use fedwrap_core::wrapper::{aggregate_outputs, BaggingState, FusionLayer, LocalModelHandle};
use proptest::prelude::*;

fn dataset(labels: Vec<usize>, n_classes: usize) -> Dataset {
    let n = labels.len();
    Dataset::new((0..n).map(|i| i as f64).collect(), 1, labels, n_classes).unwrap()
}

fn mode() -> impl Strategy<Value = PartitionMode> {
    prop_oneof![Just(PartitionMode::Imbalanced), Just(PartitionMode::NonIid), Just(PartitionMode::BankImbalanced)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn partitions_conserve_and_stay_disjoint(
        n in 200usize..600,
        clients in 2usize..6,
        alpha in 0.3f64..20.0,
        mode in mode(),
        seed in any::<u64>(),
    ) {
        let labels = (0..n).map(|i| usize::from(i % 5 == 0)).collect();
        let data = dataset(labels, 2);
        let spec = PartitionSpec { n_clients: clients, alpha, mode, seed, test_fraction: 0.1 };
        let p = build_partition(&data, &spec).unwrap();
        let mut seen = vec![false; n];
        for id in p.test_set.row_ids() {
            seen[*id] = true;
        }
        for d in &p.client_datasets {
            prop_assert!(d.n_rows() > 0);
            for id in d.row_ids() {
                prop_assert!(!seen[*id], "row {} used twice", id);
                seen[*id] = true;
            }
        }
        let pool = n - p.test_set.n_rows();
        let total: usize = p.client_datasets.iter().map(Dataset::n_rows).sum();
        match mode {
            PartitionMode::BankImbalanced => {
                let sizes: Vec<usize> = p.client_datasets.iter().map(Dataset::n_rows).collect();
                prop_assert!(sizes.iter().all(|s| *s == pool / clients));
            }
            _ => prop_assert_eq!(total, pool),
        }
        let hist = class_histogram(&p);
        for (c, d) in p.client_datasets.iter().enumerate() {
            let sum: usize = hist.iter().filter(|r| r.client_id == c).map(|r| r.count).sum();
            prop_assert_eq!(sum, d.n_rows());
        }
        prop_assert_eq!(build_partition(&data, &spec).unwrap(), p);
    }

    #[test]
    fn fedavg_ignores_update_order(
        values in prop::collection::vec((prop::collection::vec(-10.0f64..10.0, 3), 1u64..100), 1..6),
        rot in 0usize..6,
    ) {
        let updates: Vec<ClientUpdate> = values.iter().enumerate().map(|(i, (v, n))| ClientUpdate {
            client_id: format!("c{i}"),
            round: 1,
            params: vec![ParamBlock { name: "w".into(), shape: vec![3], values: v.clone() }],
            n_samples: *n,
            loss: 0.0,
        }).collect();
        let mut rotated = updates.clone();
        rotated.rotate_left(rot % updates.len());
        rotated.reverse();
        let a = fedavg_aggregate(&updates).unwrap();
        let b = fedavg_aggregate(&rotated).unwrap();
        let bits = |p: &[ParamBlock]| p[0].values.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn macro_f1_survives_label_permutation(
        pairs in prop::collection::vec((0usize..4, 0usize..4), 1..80),
        perm_seed in 0usize..24,
    ) {
        let mut perm = vec![0, 1, 2, 3];
        let mut k = perm_seed;
        for i in (1..4).rev() {
            perm.swap(i, k % (i + 1));
            k /= i + 1;
        }
        let (t, p): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
        let tp: Vec<usize> = t.iter().map(|c| perm[*c]).collect();
        let pp: Vec<usize> = p.iter().map(|c| perm[*c]).collect();
        let a = metrics_from_confusion(&ConfusionMatrix::from_labels(4, &t, &p).unwrap(), TaskKind::MacroMulticlass).unwrap();
        let b = metrics_from_confusion(&ConfusionMatrix::from_labels(4, &tp, &pp).unwrap(), TaskKind::MacroMulticlass).unwrap();
        prop_assert!((a.f1 - b.f1).abs() < 1e-12);
        prop_assert!((a.accuracy - b.accuracy).abs() < 1e-15);
        for v in a.as_array() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn frames_decode_across_arbitrary_splits(
        rounds in prop::collection::vec(0u32..50, 1..6),
        cut in 1usize..64,
    ) {
        let msgs: Vec<Message> = rounds.iter().map(|r| Message::new(*r, "7", "tok", Payload::Error { message: format!("m{r}") })).collect();
        let stream: Vec<u8> = msgs.iter().flat_map(encode).collect();
        let mut dec = FrameDecoder::default();
        let mut out = Vec::new();
        for chunk in stream.chunks(cut) {
            dec.push(chunk);
            while let Some(m) = dec.next_message() {
                out.push(m.unwrap());
            }
        }
        prop_assert_eq!(out, msgs);
        prop_assert_eq!(dec.pending(), 0);
    }

    #[test]
    fn model_params_round_trip_bitwise(seed in any::<u64>(), h in 1usize..6) {
        let m = Model::init(ModelSpec::mlp3(3, h, 3), seed).unwrap();
        let msg = Message::new(1, "0", "t", Payload::RoundStart { params: m.params.clone() });
        prop_assert_eq!(decode(&encode(&msg)).unwrap(), msg);
        prop_assert_eq!(Model::from_bytes(&m.to_bytes()).unwrap(), m);
    }

    #[test]
    fn fusion_weight_bounds_blend(w in 0.0f64..=1.0, a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let out = aggregate_outputs(&[a, 1.0 - a], &[b, 1.0 - b], w).unwrap();
        prop_assert!((out[0] + out[1] - 1.0).abs() < 1e-12);
        prop_assert!(out[0] >= a.min(b) - 1e-15 && out[0] <= a.max(b) + 1e-15);
    }
}

#[test]
fn averaging_fusion_with_one_member_is_identity() {
    let m = Model::init(ModelSpec::logistic(2, 3), 4).unwrap();
    let state = BaggingState::averaging([("0".to_string(), LocalModelHandle::from(m.clone()))].into()).unwrap();
    let x = [0.3, -1.2];
    let direct = m.predict_proba(&x).unwrap();
    let fused = state.fusion.predict(&state.member_probs(&x).unwrap());
    for (u, v) in direct.iter().zip(&fused) {
        assert!((u - v).abs() < 1e-12);
    }
    assert_eq!(FusionLayer::averaging(2, 3).input_width(), 6);
}
