use proptest::prelude::*;
use tiltflow::io::{read_table, write_table, Checkpoint};
use tiltflow::Tensor;

fn finite() -> impl Strategy<Value = f64> {
    prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn checkpoint_records_round_trip(
        tensors in prop::collection::vec((1usize..4, prop::collection::vec(finite(), 1..12)), 0..5),
        note in "[ -~]{0,40}",
    ) {
        let mut ck = Checkpoint::default();
        for (i, (rows, values)) in tensors.iter().enumerate() {
            let cols = values.len().div_ceil(*rows);
            let mut v = values.clone();
            v.resize(rows * cols, 0.0);
            ck.push_tensor(format!("t{i}"), &Tensor::new(vec![*rows, cols], v).unwrap());
        }
        ck.push_text("note", &note);
        let bytes = ck.encode().unwrap();
        let back = Checkpoint::decode(&bytes).unwrap();
        prop_assert_eq!(back.encode().unwrap(), bytes);
        prop_assert_eq!(back.text("note").unwrap(), note);
    }

    #[test]
    fn corrupted_checkpoints_error_without_panicking(cut in 0usize..200, flip in 0usize..200) {
        let mut ck = Checkpoint::default();
        ck.push_tensor("w", &Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        ck.push_text("meta.kind", "flow");
        let bytes = ck.encode().unwrap();
        let cut = cut % bytes.len();
        prop_assert!(Checkpoint::decode(&bytes[..cut]).is_err());
        let mut garbled = bytes.clone();
        garbled[flip % bytes.len()] ^= 0xff;
        let _ = Checkpoint::decode(&garbled);
    }

    #[test]
    fn tables_round_trip_bitwise(rows in prop::collection::vec((finite(), finite()), 0..30)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let a: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let b: Vec<f64> = rows.iter().map(|r| r.1).collect();
        write_table(&path, &["a", "b"], &[&a, &b]).unwrap();
        let (header, cols) = read_table(&path).unwrap();
        prop_assert_eq!(header, vec!["a".to_string(), "b".to_string()]);
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&cols[0]), bits(&a));
        prop_assert_eq!(bits(&cols[1]), bits(&b));
    }
}
