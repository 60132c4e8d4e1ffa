#![no_main]

use acenet_core::data::checkpoint::decode_checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = decode_checkpoint::<f32>(data);
    let _ = decode_checkpoint::<f64>(data);
});
