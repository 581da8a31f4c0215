#![no_main]

use libfuzzer_sys::fuzz_target;
use vmaf_grad::filter_lab::KernelFilter;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(filter) = KernelFilter::from_text(text) {
        let again = KernelFilter::from_text(&filter.to_text()).expect("own output parses");
        assert_eq!(again.to_text(), filter.to_text());
    }
});
