#![no_main]
use gmlp::checkpoint::decode;
use gmlp::models::{param_specs, ModelConfig};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = decode(data) {
        // canonical format: anything accepted re-encodes to the same bytes
        assert_eq!(ck.to_bytes(), data);
        let _ = ck.into_store::<f64>(&param_specs(&ModelConfig::micro()));
    }
});
