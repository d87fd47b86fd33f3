#![no_main]

use libfuzzer_sys::fuzz_target;
use skipcond::linalg::io::{decode_matrices, encode_matrices};

fuzz_target!(|data: &[u8]| {
    if let Ok(ms) = decode_matrices(data) {
        // The stream has no slack: a decoded stream re-encodes to itself.
        assert_eq!(encode_matrices(&ms), data);
    }
});
