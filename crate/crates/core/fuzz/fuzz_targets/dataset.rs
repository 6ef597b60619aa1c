#![no_main]

use decode_core::scenegen::Dataset;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ds) = Dataset::from_bytes(data) {
        let bytes = ds.to_bytes().expect("parsed dataset re-encodes");
        assert_eq!(Dataset::from_bytes(&bytes).expect("re-encoded dataset parses"), ds);
    }
});
