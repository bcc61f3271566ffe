#![no_main]

use evlight_harness::config::TrainConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(cfg) = serde_json::from_slice::<TrainConfig>(data) {
        let _ = cfg.validate();
    }
});
