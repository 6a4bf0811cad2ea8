#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = rstv::pipeline::PipelineConfig::from_json(data);
});
