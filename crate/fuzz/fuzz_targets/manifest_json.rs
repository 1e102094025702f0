#![no_main]

use fieldnet::store::DatasetManifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = DatasetManifest::from_json(data) {
        let bytes = m.to_json().expect("decoded manifest must serialize");
        let again = DatasetManifest::from_json(&bytes).expect("serialized manifest must parse");
        assert_eq!(again.to_json().unwrap(), bytes);
    }
});
