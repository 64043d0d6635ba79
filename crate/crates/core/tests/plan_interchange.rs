//! The JSON and binary plan formats are the contract with other front ends,
//! so these tests go through the public API only.

use proptest::prelude::*;

use radix_compact::trie::{decode_binary, encode_binary, MAGIC, VERSION};
use radix_compact::{build_plan, pad_plan, CompactionPlan, PlanFile, RaggedBatch};

fn batches() -> impl Strategy<Value = RaggedBatch> {
    prop::collection::vec(prop::collection::vec(0u32..4, 1..12), 1..8).prop_map(|s| RaggedBatch::from_sequences(&s))
}

#[test]
fn toy_plan_binary_layout() {
    let plan = build_plan(&RaggedBatch::from_sequences(&[vec![1, 2, 3], vec![1, 2, 4]])).unwrap();
    let bytes = encode_binary(&plan);
    assert_eq!(&bytes[..4], MAGIC);
    assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), VERSION);
    assert_eq!(u64::from_le_bytes(bytes[6..14].try_into().unwrap()), 6);
    assert_eq!(u64::from_le_bytes(bytes[14..22].try_into().unwrap()), 4);
    let words: Vec<u32> = bytes[22..].chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
    assert_eq!(words, [0, 1, 2, 5, 0, 1, 2, 0, 1, 3, 0, 1, 2, 2]);
}

#[test]
fn json_field_names() {
    let plan = build_plan(&RaggedBatch::from_sequences(&[vec![1, 2, 3], vec![1, 2, 4]])).unwrap();
    let v = serde_json::to_value(PlanFile::from(&plan)).unwrap();
    assert_eq!(
        v,
        serde_json::json!({
            "gather": [0, 1, 2, 5],
            "scatter": [0, 1, 2, 0, 1, 3],
            "compact_positions": [0, 1, 2, 2],
            "n_original": 6,
            "n_compact": 4
        })
    );
}

#[test]
fn malformed_binary_rejected() {
    let plan = build_plan(&RaggedBatch::from_sequences(&[vec![1, 2], vec![1, 3]])).unwrap();
    let good = encode_binary(&plan);
    let mut bad_magic = good.clone();
    bad_magic[0] = b'X';
    let mut bad_version = good.clone();
    bad_version[4] = 9;
    let mut bad_index = good.clone();
    let last = bad_index.len() - 4;
    // last scatter entry lives just before the positions block
    let scatter_last = last - 4 * plan.n_compact();
    bad_index[scatter_last..scatter_last + 4].copy_from_slice(&99u32.to_le_bytes());
    for bytes in [&good[..10], &good[..good.len() - 1], &bad_magic[..], &bad_version[..], &bad_index[..]] {
        let err = decode_binary(bytes).unwrap_err();
        assert_eq!(err.name(), "MalformedPlan", "{err}");
    }
}

#[test]
fn json_rejects_out_of_range_scatter() {
    let file = PlanFile { gather: vec![0], scatter: vec![0, 1], compact_positions: vec![0], n_original: 2, n_compact: 1 };
    assert!(CompactionPlan::try_from(file).is_err());
}

proptest! {
    #[test]
    fn binary_round_trip(batch in batches()) {
        let plan = build_plan(&batch).unwrap();
        let bytes = encode_binary(&plan);
        let back = decode_binary(&bytes).unwrap();
        prop_assert_eq!(&back, &plan);
        prop_assert_eq!(encode_binary(&back), bytes);
    }

    #[test]
    fn json_round_trip_keeps_padding(batch in batches(), bucket in 1usize..9) {
        let plan = pad_plan(&build_plan(&batch).unwrap(), bucket).unwrap();
        let text = serde_json::to_string(&PlanFile::from(&plan)).unwrap();
        let back = CompactionPlan::try_from(serde_json::from_str::<PlanFile>(&text).unwrap()).unwrap();
        prop_assert_eq!(back.compact_rows(), plan.compact_rows());
        prop_assert_eq!(&back, &plan);
    }

    #[test]
    fn binary_drops_padding_only(batch in batches(), bucket in 1usize..9) {
        let plain = build_plan(&batch).unwrap();
        let padded = pad_plan(&plain, bucket).unwrap();
        let back = decode_binary(&encode_binary(&padded)).unwrap();
        prop_assert_eq!(&back, &plain);
        prop_assert_eq!(pad_plan(&back, bucket).unwrap(), padded);
    }
}
