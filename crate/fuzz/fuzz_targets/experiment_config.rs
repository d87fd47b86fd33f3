#![no_main]

use libfuzzer_sys::fuzz_target;
use skipcond::harness::ExperimentConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = ExperimentConfig::from_json(text) {
        let back = ExperimentConfig::from_json(&cfg.to_json()).expect("own output validates");
        assert_eq!(back.to_json(), cfg.to_json());
    }
});
