#![no_main]

use libfuzzer_sys::fuzz_target;
use vmaf_grad::media::{luma_to_bytes, YuvFormat, YuvReader};

fuzz_target!(|data: &[u8]| {
    let [w, h, rest @ ..] = data else {
        return;
    };
    let Ok(format) = YuvFormat::new(usize::from(*w), usize::from(*h)) else {
        return;
    };
    let whole = rest.len() / format.frame_bytes();
    let mut decoded = 0;
    for (i, frame) in YuvReader::new(rest, format).enumerate() {
        match frame {
            Ok(f) => {
                let start = i * format.frame_bytes();
                assert_eq!(luma_to_bytes(&f.luma), &rest[start..start + format.luma_bytes()]);
                decoded += 1;
            }
            Err(_) => break,
        }
    }
    assert_eq!(decoded, whole);
});
