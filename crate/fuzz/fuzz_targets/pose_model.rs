#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // cap embedding regeneration so a tiny header cannot request gigabytes
    let _ = rstv::regress::PoseModel::decode_with_limit(data, 1 << 16);
});
