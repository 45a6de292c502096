#![no_main]

use libfuzzer_sys::fuzz_target;
use thermvis::checkpoint::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = Checkpoint::decode(data) {
        let bytes = ckpt.encode().expect("decoded checkpoint re-encodes");
        assert_eq!(bytes, data);
    }
});
