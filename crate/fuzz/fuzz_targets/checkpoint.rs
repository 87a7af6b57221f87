#![no_main]

use higine::gnn::{decode_checkpoint, encode_checkpoint};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = decode_checkpoint(data) {
        assert_eq!(decode_checkpoint(&encode_checkpoint(&ckpt)).expect("round trip"), ckpt);
    }
});
