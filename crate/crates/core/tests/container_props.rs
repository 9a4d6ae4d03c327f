//! Property tests for the container format: round trips are byte-identical
//! for arbitrary valid values, and corrupted bytes never parse silently.

use proptest::prelude::*;

use mats_core::checkpoint::{from_bytes, Checkpoint, Container, Param};
use mats_core::tensor::Matrix;

fn finite_f64() -> impl Strategy<Value = f64> {
    // Covers magnitudes the pipeline produces, including exact zeros.
    prop_oneof![
        3 => -1e6f64..1e6f64,
        1 => Just(0.0f64),
        1 => -1e-12f64..1e-12f64,
    ]
}

fn arb_param() -> impl Strategy<Value = Param> {
    prop_oneof![
        (1usize..5, 1usize..5).prop_flat_map(|(d, k)| {
            prop::collection::vec(finite_f64(), d * k)
                .prop_map(move |v| Param::weight(Matrix::from_vec(d, k, v).expect("sized")))
        }),
        (1usize..9).prop_flat_map(|n| {
            prop::collection::vec(finite_f64(), n).prop_map(Param::vector)
        }),
    ]
}

fn arb_checkpoint() -> impl Strategy<Value = Checkpoint> {
    (
        prop::collection::btree_map("[a-z][a-z0-9._]{0,12}", arb_param(), 0..8),
        prop::collection::btree_map("[a-z]{1,6}", "[ -~]{0,12}", 0..3),
    )
        .prop_map(|(entries, provenance)| Checkpoint { entries, provenance })
}

proptest! {
    #[test]
    fn round_trip_is_byte_identical(ckpt in arb_checkpoint()) {
        let bytes = ckpt.to_bytes().unwrap();
        let back = match from_bytes(&bytes).unwrap() {
            Container::Checkpoint(c) => c,
            Container::Stats(_) => panic!("kind changed"),
        };
        prop_assert_eq!(&back, &ckpt);
        // Bit-level: values survive exactly and re-encoding reproduces bytes.
        let again = back.to_bytes().unwrap();
        prop_assert_eq!(again, bytes);
    }

    #[test]
    fn payload_corruption_is_always_detected(
        ckpt in arb_checkpoint(),
        pos_frac in 0.0f64..1.0,
        flip in 1u8..=255,
    ) {
        let bytes = ckpt.to_bytes().unwrap();
        let header_len = u64::from_le_bytes(bytes[10..18].try_into().unwrap()) as usize;
        let payload_start = 18 + header_len;
        let pos = payload_start
            + (((bytes.len() - payload_start) as f64 - 1.0).max(0.0) * pos_frac) as usize;
        prop_assume!(pos < bytes.len());
        let mut bad = bytes.clone();
        bad[pos] ^= flip;
        // Any flip in the payload or the trailing CRC must be rejected.
        prop_assert!(from_bytes(&bad).is_err());
    }
}
