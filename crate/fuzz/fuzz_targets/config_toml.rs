#![no_main]

use libfuzzer_sys::fuzz_target;
use vmaf_grad::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = RunConfig::from_toml_str(text) {
        let out = cfg.to_toml_string().expect("valid config serialises");
        assert_eq!(RunConfig::from_toml_str(&out).expect("own output parses"), cfg);
    }
});
