#![no_main]

use fieldnet::store::{decode_field, encode_field};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(v) = decode_field(data) {
        let bytes = encode_field(&v);
        let again = decode_field(&bytes).expect("re-encoded field must decode");
        assert_eq!(encode_field(&again), bytes);
    }
});
