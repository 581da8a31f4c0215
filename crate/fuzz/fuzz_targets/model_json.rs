#![no_main]

use libfuzzer_sys::fuzz_target;
use vmaf_grad::fusion::VmafModel;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(model) = VmafModel::from_json_str(text) {
        VmafModel::from_json_str(&model.to_json_string()).expect("own output parses");
    }
});
