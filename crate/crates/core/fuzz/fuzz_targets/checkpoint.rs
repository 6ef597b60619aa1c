#![no_main]

use decode_core::contlearn::{load_checkpoint, save_checkpoint};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(fw) = load_checkpoint(data) {
        let bytes = save_checkpoint(&fw).expect("loaded checkpoint re-saves");
        assert_eq!(bytes, data);
    }
});
