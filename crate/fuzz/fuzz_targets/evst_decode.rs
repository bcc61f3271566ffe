//! Binary event files: anything that decodes must survive a re-encode unchanged.
#![no_main]

use evlight_core::event::{decode_evst, encode_evst};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(stream) = decode_evst(data) else { return };
    let bytes = encode_evst(&stream);
    assert_eq!(bytes, data);
    assert_eq!(decode_evst(&bytes).unwrap(), stream);
});
