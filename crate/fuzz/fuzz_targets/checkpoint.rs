#![no_main]

use libfuzzer_sys::fuzz_target;
use skipcond::vitcore::{decode_checkpoint, encode_checkpoint, ConvMixerParams, ModelParams};

fuzz_target!(|data: &[u8]| {
    let Ok(ck) = decode_checkpoint(data) else {
        return;
    };
    let bytes = encode_checkpoint(&ck);
    let again = decode_checkpoint(&bytes).expect("own output decodes");
    assert_eq!(encode_checkpoint(&again), bytes);

    if let Ok(m) = ModelParams::from_checkpoint(&ck) {
        let out = m.to_checkpoint();
        let back = ModelParams::from_checkpoint(&out).expect("own checkpoint loads");
        assert_eq!(encode_checkpoint(&back.to_checkpoint()), encode_checkpoint(&out));
    }
    if let Ok(m) = ConvMixerParams::from_checkpoint(&ck) {
        let out = m.to_checkpoint();
        let back = ConvMixerParams::from_checkpoint(&out).expect("own checkpoint loads");
        assert_eq!(encode_checkpoint(&back.to_checkpoint()), encode_checkpoint(&out));
    }
});
