#![no_main]

use libfuzzer_sys::fuzz_target;
use thermvis::dataio::{parse_manifest, write_manifest};

fuzz_target!(|data: &[u8]| {
    if let Ok(rows) = parse_manifest(data) {
        let mut out = Vec::new();
        write_manifest(&mut out, &rows).expect("parsed rows serialize");
        assert_eq!(parse_manifest(out.as_slice()).expect("round trip parses"), rows);
    }
});
