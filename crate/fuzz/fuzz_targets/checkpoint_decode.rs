#![no_main]

use evlight_core::checkpoint::Checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(ck) = Checkpoint::decode(data) else { return };
    let bytes = ck.encode().expect("decoded checkpoint re-encodes");
    let again = Checkpoint::decode(&bytes).unwrap();
    assert_eq!(again.params, ck.params);
    assert_eq!(again.optimizer, ck.optimizer);
});
