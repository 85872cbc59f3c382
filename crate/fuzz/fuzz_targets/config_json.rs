#![no_main]
use gmlp::models::{count_macs, count_params, ModelConfig};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        if let Ok(cfg) = ModelConfig::from_json(s) {
            let back = ModelConfig::from_json(&cfg.to_json()).expect("saved config reloads");
            assert_eq!(back, cfg);
            let p = count_params(&cfg);
            assert_eq!(p.items.iter().map(|i| i.count).sum::<u64>(), p.total);
            let _ = count_macs(&cfg, cfg.seq_len);
        }
    }
});
