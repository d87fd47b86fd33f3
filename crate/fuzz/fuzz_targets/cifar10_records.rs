#![no_main]

use libfuzzer_sys::fuzz_target;
use skipcond::harness::{parse_cifar10, CIFAR_RECORD_LEN};

fuzz_target!(|data: &[u8]| {
    match parse_cifar10(data) {
        Ok(samples) => {
            assert_eq!(samples.len() * CIFAR_RECORD_LEN, data.len());
            for s in &samples {
                assert!(s.label < 10);
                assert!(s.image.data.iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
        Err(_) => assert!(data.len() % CIFAR_RECORD_LEN != 0 || data.chunks(CIFAR_RECORD_LEN).any(|r| r[0] >= 10)),
    }
});
