#![no_main]

use groundlab::io::{decode_tensor, encode_tensor};
use libfuzzer_sys::fuzz_target;

// Anything the decoder accepts must re-encode to the same bytes.
fuzz_target!(|data: &[u8]| {
    if let Ok(t) = decode_tensor(data) {
        assert_eq!(encode_tensor(&t), data);
    }
});
