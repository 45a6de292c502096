#![no_main]

use libfuzzer_sys::fuzz_target;
use thermvis::dataio::decode_png;

fuzz_target!(|data: &[u8]| {
    if let Ok(plane) = decode_png(data) {
        assert!(plane.in_unit_range());
        assert_eq!(plane.data.len(), plane.h * plane.w);
    }
});
