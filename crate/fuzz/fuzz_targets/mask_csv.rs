#![no_main]

use libfuzzer_sys::fuzz_target;
use tsdm_core::io::{
    format_mask_csv, format_mask_dataset_csv, parse_mask_csv, parse_mask_dataset_csv,
};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(mask) = parse_mask_csv(text) {
        assert_eq!(
            parse_mask_csv(&format_mask_csv(&mask)).expect("formatted mask parses"),
            mask
        );
    }
    if let Ok(masks) = parse_mask_dataset_csv(text) {
        let again = parse_mask_dataset_csv(&format_mask_dataset_csv(&masks))
            .expect("formatted masks parse");
        assert_eq!(again, masks);
    }
});
