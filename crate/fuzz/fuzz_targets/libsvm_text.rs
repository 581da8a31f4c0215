#![no_main]

use libfuzzer_sys::fuzz_target;
use serde_json::json;
use vmaf_grad::fusion::VmafModel;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let wrapped = json!({
        "model_dict": {
            "norm_type": "none",
            "feature_names": [
                "VMAF_feature_adm2_score", "VMAF_feature_motion2_score",
                "VMAF_feature_vif_scale0_score", "VMAF_feature_vif_scale1_score",
                "VMAF_feature_vif_scale2_score", "VMAF_feature_vif_scale3_score"
            ],
            "model": text
        }
    });
    let _ = VmafModel::from_json_str(&wrapped.to_string());
});
