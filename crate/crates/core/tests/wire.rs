//! Frame codec properties over generated messages and corrupted frames.

mod common;

use std::io::{BufReader, Cursor};

use audiofab::wire::{decode_frame, encode_frame, read_frame, write_frame, WireError, INVALID_REQUEST, PARSE_ERROR};
use common::wiregen;
use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::SeedableRng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn decode_inverts_encode(seed in any::<u64>()) {
        let msg = wiregen::message(&mut StdRng::seed_from_u64(seed));
        let frame = encode_frame(&msg).unwrap();
        prop_assert_eq!(frame.iter().filter(|b| **b == b'\n').count(), 1);
        prop_assert_eq!(decode_frame(&frame).unwrap(), msg);
    }

    #[test]
    fn corrupted_frames_are_rejected_with_protocol_codes(seed in any::<u64>()) {
        let frame = wiregen::garbage(&mut StdRng::seed_from_u64(seed));
        let err: WireError = decode_frame(&frame).unwrap_err();
        prop_assert!([PARSE_ERROR, INVALID_REQUEST].contains(&err.code()));
    }

    #[test]
    fn streams_carry_frames_in_order(seed in any::<u64>(), n in 0usize..20) {
        let mut rng = StdRng::seed_from_u64(seed);
        let msgs: Vec<_> = (0..n).map(|_| wiregen::message(&mut rng)).collect();
        let mut buf = Vec::new();
        for m in &msgs {
            write_frame(&mut buf, m).unwrap();
        }
        let mut reader = BufReader::new(Cursor::new(buf));
        for m in &msgs {
            prop_assert_eq!(&read_frame(&mut reader).unwrap().unwrap(), m);
        }
        prop_assert!(read_frame(&mut reader).unwrap().is_none());
    }
}

#[test]
fn jsonrpc_marker_is_tolerated_only_at_version_two() {
    let ok = br#"{"jsonrpc":"2.0","kind":"request","id":3,"method":"initialize"}"#;
    assert!(decode_frame(ok).is_ok());
    let bad = br#"{"jsonrpc":"1.0","kind":"request","id":3,"method":"initialize"}"#;
    assert_eq!(decode_frame(bad).unwrap_err().code(), INVALID_REQUEST);
}
