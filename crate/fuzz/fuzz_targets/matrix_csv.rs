#![no_main]

use libfuzzer_sys::fuzz_target;
use skipcond::linalg::io::{matrix_from_csv, matrix_to_csv};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(m) = matrix_from_csv(text) {
        assert!(m.is_finite());
        let again = matrix_from_csv(&matrix_to_csv(&m)).expect("own output parses");
        assert_eq!(again, m);
    }
});
