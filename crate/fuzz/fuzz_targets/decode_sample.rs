#![no_main]

use fieldnet::store::{decode_sample, encode_sample};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(v) = decode_sample(data) {
        let bytes = encode_sample(&v).expect("decoded sample must encode");
        let again = decode_sample(&bytes).expect("re-encoded sample must decode");
        assert_eq!(encode_sample(&again).unwrap(), bytes);
    }
});
