#![no_main]

use libfuzzer_sys::fuzz_target;
use tsdm_core::io::{format_dataset_csv, format_matrix_csv, parse_dataset_csv, parse_matrix_csv};

// Anything accepted must survive a format/parse round trip unchanged.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(x) = parse_matrix_csv(text) {
        let once = format_matrix_csv(&x);
        let again = parse_matrix_csv(&once).expect("formatted matrix parses");
        assert_eq!(format_matrix_csv(&again), once);
    }
    if let Ok(windows) = parse_dataset_csv(text) {
        let once = format_dataset_csv(&windows);
        let again = parse_dataset_csv(&once).expect("formatted dataset parses");
        assert_eq!(format_dataset_csv(&again), once);
    }
});
