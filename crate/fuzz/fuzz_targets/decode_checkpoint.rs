#![no_main]

use fieldnet::store::{decode_checkpoint, encode_checkpoint};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(v) = decode_checkpoint(data) {
        let bytes = encode_checkpoint(&v).expect("decoded checkpoint must encode");
        let again = decode_checkpoint(&bytes).expect("re-encoded checkpoint must decode");
        assert_eq!(encode_checkpoint(&again).unwrap(), bytes);
    }
});
