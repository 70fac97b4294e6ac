#![no_main]

use libfuzzer_sys::fuzz_target;
use rshd::io::{decode_matrix, encode_matrix};

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = decode_matrix(data) {
        // anything accepted must re-encode to the same bytes
        assert_eq!(encode_matrix(&t), data);
    }
});
