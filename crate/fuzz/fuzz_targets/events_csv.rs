#![no_main]

use evlight_core::event::{read_events_csv, write_events_csv};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // first two bytes pick the sensor size so bounds checks get exercised
    let (w, h, body) = match data {
        [a, b, rest @ ..] => (u16::from(*a) + 1, u16::from(*b) + 1, rest),
        _ => return,
    };
    let Ok(stream) = read_events_csv(body, w, h) else { return };
    let mut out = Vec::new();
    write_events_csv(&stream, &mut out).unwrap();
    assert_eq!(read_events_csv(out.as_slice(), w, h).unwrap(), stream);
});
