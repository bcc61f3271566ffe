#![no_main]

use evlight_core::alignment::{alignment_error_stats, match_sequences, read_intervals_csv};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok((low, normal)) = read_intervals_csv(data) else { return };
    // matching is exhaustive; keep instances within its limit
    if low.len() > 8 || normal.len() > 8 {
        return;
    }
    if let Ok(m) = match_sequences(&low, &normal) {
        let _ = alignment_error_stats(&m, 10.0);
    }
});
