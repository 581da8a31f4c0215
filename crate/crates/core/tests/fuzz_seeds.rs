use std::path::PathBuf;

use vmaf_grad::config::RunConfig;
use vmaf_grad::filter_lab::KernelFilter;
use vmaf_grad::fusion::VmafModel;
use vmaf_grad::media::{luma_to_bytes, YuvFormat, YuvReader};

fn seeds(target: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fuzz/corpus")
        .join(target);
    let mut out: Vec<_> = std::fs::read_dir(&dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            let bytes = std::fs::read(&p).unwrap();
            (p, bytes)
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds in {}", dir.display());
    out
}

fn text(bytes: &[u8]) -> &str {
    std::str::from_utf8(bytes).unwrap()
}

#[test]
fn model_seeds_round_trip() {
    let mut parsed = 0;
    for (path, bytes) in seeds("model_json") {
        if let Ok(m) = VmafModel::from_json_str(text(&bytes)) {
            VmafModel::from_json_str(&m.to_json_string())
                .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            parsed += 1;
        }
    }
    assert_eq!(parsed, 3);
}

#[test]
fn libsvm_seeds_parse_or_fail_cleanly() {
    let mut parsed = 0;
    for (_, bytes) in seeds("libsvm_text") {
        let wrapped = serde_json::json!({
            "model_dict": {
                "norm_type": "none",
                "feature_names": [
                    "VMAF_feature_adm2_score", "VMAF_feature_motion2_score",
                    "VMAF_feature_vif_scale0_score", "VMAF_feature_vif_scale1_score",
                    "VMAF_feature_vif_scale2_score", "VMAF_feature_vif_scale3_score"
                ],
                "model": text(&bytes)
            }
        });
        parsed += usize::from(VmafModel::from_json_str(&wrapped.to_string()).is_ok());
    }
    assert_eq!(parsed, 1);
}

#[test]
fn filter_seeds_round_trip() {
    let mut parsed = 0;
    for (_, bytes) in seeds("filter_text") {
        if let Ok(f) = KernelFilter::from_text(text(&bytes)) {
            let again = KernelFilter::from_text(&f.to_text()).unwrap();
            assert_eq!(again.to_text(), f.to_text());
            parsed += 1;
        }
    }
    assert_eq!(parsed, 2);
}

#[test]
fn config_seeds_round_trip() {
    let mut parsed = 0;
    for (_, bytes) in seeds("config_toml") {
        if let Ok(cfg) = RunConfig::from_toml_str(text(&bytes)) {
            let out = cfg.to_toml_string().unwrap();
            assert_eq!(RunConfig::from_toml_str(&out).unwrap(), cfg);
            parsed += 1;
        }
    }
    assert_eq!(parsed, 3);
}

#[test]
fn yuv_seeds_decode_whole_frames() {
    let mut frames = 0;
    for (_, bytes) in seeds("yuv_decode") {
        let [w, h, rest @ ..] = bytes.as_slice() else {
            continue;
        };
        let Ok(format) = YuvFormat::new(usize::from(*w), usize::from(*h)) else {
            continue;
        };
        let whole = rest.len() / format.frame_bytes();
        let decoded: Vec<_> = YuvReader::new(rest, format)
            .take_while(Result::is_ok)
            .map(Result::unwrap)
            .collect();
        assert_eq!(decoded.len(), whole);
        for (i, f) in decoded.iter().enumerate() {
            let start = i * format.frame_bytes();
            assert_eq!(
                luma_to_bytes(&f.luma),
                &rest[start..start + format.luma_bytes()]
            );
        }
        frames += decoded.len();
    }
    assert_eq!(frames, 3);
}
