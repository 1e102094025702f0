#![no_main]

use fieldnet::store::{decode_grid, encode_grid};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(v) = decode_grid(data) {
        let bytes = encode_grid(&v);
        let again = decode_grid(&bytes).expect("re-encoded grid must decode");
        assert_eq!(encode_grid(&again), bytes);
    }
});
