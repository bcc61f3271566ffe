#![no_main]

use evlight_core::synth::{Manifest, Split};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(m) = Manifest::from_json(text) else { return };
    let n = m.split(Split::Train).count() + m.split(Split::Test).count();
    assert_eq!(n, m.samples.len());
});
