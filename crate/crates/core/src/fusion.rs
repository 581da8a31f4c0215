//! Support vector regression over the six per-frame features.
//!
//! Two on-disk layouts are accepted: this crate's own JSON document
//! (`"format": "vmaf-grad-model"`) and the libvmaf JSON model, whose
//! `model_dict.model` field embeds a libsvm text model.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::autodiff::{Plane, Tape, Var};
use crate::error::{invalid, parse_err, Error, Result};

pub const MODEL_FORMAT: &str = "vmaf-grad-model";
pub const MODEL_VERSION: u32 = 1;

/// Canonical feature names, in [`FrameFeatures::to_array`] order.
pub const FEATURE_NAMES: [&str; 6] = [
    "vif_scale0",
    "vif_scale1",
    "vif_scale2",
    "vif_scale3",
    "adm2",
    "motion2",
];

const TOY_MODEL: &str = include_str!("../models/toy.json");
const DEMO_MODEL: &str = include_str!("../models/demo.json");

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameFeatures {
    pub vif: [f64; 4],
    pub adm: f64,
    pub motion: f64,
}

impl FrameFeatures {
    pub fn to_array(&self) -> [f64; 6] {
        [
            self.vif[0],
            self.vif[1],
            self.vif[2],
            self.vif[3],
            self.adm,
            self.motion,
        ]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Self {
            vif: [a[0], a[1], a[2], a[3]],
            adm: a[4],
            motion: a[5],
        }
    }
}

/// Per-frame features as tape values.
#[derive(Debug, Clone)]
pub struct FeatureVars {
    pub vif: [Var; 4],
    pub adm: Var,
    pub motion: Var,
}

impl FeatureVars {
    pub fn constant(tape: &Tape, f: &FrameFeatures) -> Self {
        Self {
            vif: f.vif.map(|v| tape.scalar(v)),
            adm: tape.scalar(f.adm),
            motion: tape.scalar(f.motion),
        }
    }

    fn ordered(&self) -> [&Var; 6] {
        [
            &self.vif[0],
            &self.vif[1],
            &self.vif[2],
            &self.vif[3],
            &self.adm,
            &self.motion,
        ]
    }

    pub fn values(&self) -> FrameFeatures {
        FrameFeatures::from_array(self.ordered().map(Var::item))
    }
}

/// Affine map `slope * x + intercept`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearMap {
    pub slope: f64,
    pub intercept: f64,
}

impl LinearMap {
    pub const IDENTITY: Self = Self {
        slope: 1.0,
        intercept: 0.0,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VmafModel {
    #[serde(default)]
    pub name: String,
    /// Order of the entries of every support vector and of `feature_norms`.
    pub feature_order: Vec<String>,
    /// Raw feature to normalised feature, one per entry of `feature_order`.
    pub feature_norms: Vec<LinearMap>,
    /// The regression output `y` becomes `(y - intercept) / slope`.
    pub score_norm: LinearMap,
    /// Optional polynomial `p0 + p1 s + p2 s^2 + ...` applied last.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score_polynomial: Option<Vec<f64>>,
    pub gamma: f64,
    /// Bias `b` of the decision function.
    pub intercept: f64,
    pub support_vectors: Vec<Vec<f64>>,
    pub dual_coeffs: Vec<f64>,
    pub clip_enabled: bool,
    #[serde(default)]
    pub neg_mode: bool,
    #[serde(default = "one")]
    pub egl_vif: f64,
    #[serde(default = "one")]
    pub egl_dlm: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    #[serde(flatten)]
    model: VmafModel,
}

fn field_err(field: &str, msg: impl std::fmt::Display) -> Error {
    invalid(format!("model field `{field}`: {msg}"))
}

impl VmafModel {
    /// Two support vectors, `gamma = 0.5`, `b = 10`; for tests and fixtures.
    pub fn toy() -> Self {
        Self::from_json_str(TOY_MODEL).expect("bundled toy model is valid")
    }

    /// Smooth demonstration model bundled with the crate.
    pub fn demo() -> Self {
        Self::from_json_str(DEMO_MODEL).expect("bundled demo model is valid")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json_string())?;
        Ok(())
    }

    pub fn to_json_string(&self) -> String {
        let file = ModelFile {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            model: self.clone(),
        };
        serde_json::to_string_pretty(&file).expect("model serialises")
    }

    /// Parses either supported layout and validates the result.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: Value =
            serde_json::from_str(text).map_err(|e| parse_err("model JSON", e.to_string()))?;
        let model = if value.get("format").is_some() {
            let file: ModelFile = serde_json::from_value(value)
                .map_err(|e| parse_err("model JSON", e.to_string()))?;
            if file.format != MODEL_FORMAT {
                return Err(parse_err(
                    "model JSON",
                    format!("unknown format {:?}", file.format),
                ));
            }
            if file.version != MODEL_VERSION {
                return Err(parse_err(
                    "model JSON",
                    format!("unsupported version {}", file.version),
                ));
            }
            file.model
        } else if value.get("model_dict").is_some() {
            from_libvmaf_json(&value)?
        } else {
            return Err(parse_err(
                "model JSON",
                "neither a `format` header nor a `model_dict` object",
            ));
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = self.feature_order.clone();
        seen.sort();
        let mut want: Vec<String> = FEATURE_NAMES.iter().map(|s| s.to_string()).collect();
        want.sort();
        if seen != want {
            return Err(field_err(
                "feature_order",
                format!("must list exactly {FEATURE_NAMES:?}"),
            ));
        }
        if self.feature_norms.len() != 6 {
            return Err(field_err(
                "feature_norms",
                format!("expected 6 entries, got {}", self.feature_norms.len()),
            ));
        }
        if self
            .feature_norms
            .iter()
            .any(|m| !m.slope.is_finite() || !m.intercept.is_finite())
        {
            return Err(field_err("feature_norms", "must be finite"));
        }
        if !(self.score_norm.slope.is_finite()
            && self.score_norm.slope != 0.0
            && self.score_norm.intercept.is_finite())
        {
            return Err(field_err("score_norm", "slope must be finite and nonzero"));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(field_err(
                "gamma",
                format!("must be positive, got {}", self.gamma),
            ));
        }
        if !self.intercept.is_finite() {
            return Err(field_err("intercept", "must be finite"));
        }
        if self.support_vectors.is_empty() {
            return Err(field_err("support_vectors", "must not be empty"));
        }
        if self.support_vectors.len() != self.dual_coeffs.len() {
            return Err(field_err(
                "dual_coeffs",
                format!(
                    "{} coefficients for {} support vectors",
                    self.dual_coeffs.len(),
                    self.support_vectors.len()
                ),
            ));
        }
        if let Some((i, _)) = self
            .support_vectors
            .iter()
            .enumerate()
            .find(|(_, v)| v.len() != 6)
        {
            return Err(field_err(
                "support_vectors",
                format!("vector {i} does not have 6 entries"),
            ));
        }
        if self
            .support_vectors
            .iter()
            .flatten()
            .chain(&self.dual_coeffs)
            .any(|v| !v.is_finite())
        {
            return Err(field_err("support_vectors", "entries must be finite"));
        }
        if let Some(p) = &self.score_polynomial {
            if p.is_empty() || p.iter().any(|c| !c.is_finite()) {
                return Err(field_err(
                    "score_polynomial",
                    "must be a non-empty list of finite numbers",
                ));
            }
        }
        if !(self.egl_vif > 0.0 && self.egl_dlm > 0.0) {
            return Err(field_err("egl_vif", "gain limits must be positive"));
        }
        Ok(())
    }

    /// Position of each canonical feature inside `feature_order`.
    fn permutation(&self) -> [usize; 6] {
        FEATURE_NAMES.map(|n| {
            self.feature_order
                .iter()
                .position(|f| f == n)
                .expect("validated feature order")
        })
    }

    /// RBF kernel `exp(-gamma |u - v|^2)`.
    pub fn kernel(&self, u: &[f64], v: &[f64]) -> f64 {
        let d: f64 = u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
        (-self.gamma * d).exp()
    }

    /// Frame score as a tape expression.
    pub fn predict_frame(&self, tape: &Tape, features: &FeatureVars) -> Result<Var> {
        let canonical = features.ordered();
        for (name, v) in FEATURE_NAMES.iter().zip(canonical) {
            if !v.item().is_finite() {
                return Err(Error::NumericDomain(format!(
                    "feature {name} is not finite ({})",
                    v.item()
                )));
            }
        }
        let perm = self.permutation();
        let mut slots: Vec<Option<Var>> = vec![None; 6];
        for (c, &slot) in perm.iter().enumerate() {
            let m = self.feature_norms[slot];
            slots[slot] = Some(tape.add_scalar(&tape.scale(canonical[c], m.slope)?, m.intercept)?);
        }
        let slots: Vec<Var> = slots
            .into_iter()
            .map(|s| s.expect("permutation covers every slot"))
            .collect();
        let x = tape.concat(&slots)?;

        let mut terms = Vec::with_capacity(self.support_vectors.len());
        for sv in &self.support_vectors {
            let s = tape.constant(Plane::new(1, 6, sv.clone())?);
            let d2 = tape.sum(&tape.square(&tape.sub(&x, &s)?)?)?;
            terms.push(tape.exp(&tape.scale(&d2, -self.gamma)?)?);
        }
        let k = tape.concat(&terms)?;
        let alphas = tape.constant(Plane::new(
            1,
            self.dual_coeffs.len(),
            self.dual_coeffs.clone(),
        )?);
        let raw = tape.add_scalar(&tape.sum(&tape.mul(&k, &alphas)?)?, self.intercept)?;
        let s = tape.scale(
            &tape.add_scalar(&raw, -self.score_norm.intercept)?,
            1.0 / self.score_norm.slope,
        )?;
        match &self.score_polynomial {
            None => Ok(s),
            Some(p) => {
                // Horner
                let mut acc = tape.scalar(*p.last().expect("non-empty polynomial"));
                for c in p.iter().rev().skip(1) {
                    acc = tape.add_scalar(&tape.mul(&acc, &s)?, *c)?;
                }
                Ok(acc)
            }
        }
    }

    /// Plain evaluation of [`VmafModel::predict_frame`].
    pub fn predict(&self, features: &FrameFeatures) -> Result<f64> {
        let t = Tape::new();
        Ok(self
            .predict_frame(&t, &FeatureVars::constant(&t, features))?
            .item())
    }

    /// Mean of the frame scores, clipped to `[0, 100]` when the model asks for it.
    pub fn pool(&self, tape: &Tape, frame_scores: &[Var]) -> Result<Var> {
        if frame_scores.is_empty() {
            return Err(invalid("cannot pool an empty stream"));
        }
        let mean = tape.mean(&tape.concat(frame_scores)?)?;
        if self.clip_enabled {
            tape.clip(&mean, 0.0, 100.0)
        } else {
            Ok(mean)
        }
    }

    pub fn with_clip(mut self, clip: bool) -> Self {
        self.clip_enabled = clip;
        self
    }
}

fn canonical_feature_name(name: &str) -> Option<&'static str> {
    let n = name.to_ascii_lowercase();
    let stem = n.strip_suffix("_score").unwrap_or(&n);
    FEATURE_NAMES.iter().copied().find(|f| stem.ends_with(f))
}

fn json_f64s(v: &Value, field: &str) -> Result<Vec<f64>> {
    v.as_array()
        .ok_or_else(|| field_err(field, "expected an array"))?
        .iter()
        .map(|x| {
            x.as_f64()
                .ok_or_else(|| field_err(field, "expected numbers"))
        })
        .collect()
}

struct Libsvm {
    gamma: f64,
    rho: f64,
    coeffs: Vec<f64>,
    vectors: Vec<BTreeMap<usize, f64>>,
}

/// Parses the text form of a single-output libsvm regression model.
fn parse_libsvm(text: &str) -> Result<Libsvm> {
    let err = |m: String| parse_err("libsvm model", m);
    let mut gamma = None;
    let mut rho = None;
    let mut lines = text.lines();
    for line in lines.by_ref() {
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("SV") => break,
            Some("kernel_type") => {
                let k = parts.next().unwrap_or("");
                if k != "rbf" {
                    return Err(err(format!("only rbf kernels are supported, got {k:?}")));
                }
            }
            Some("gamma") => gamma = parts.next().and_then(|s| s.parse::<f64>().ok()),
            Some("rho") => rho = parts.next().and_then(|s| s.parse::<f64>().ok()),
            _ => {}
        }
    }
    let gamma = gamma.ok_or_else(|| err("missing or bad `gamma`".into()))?;
    let rho = rho.ok_or_else(|| err("missing or bad `rho`".into()))?;
    let mut coeffs = Vec::new();
    let mut vectors = Vec::new();
    for (n, line) in lines.enumerate() {
        let mut parts = line.split_whitespace();
        let Some(first) = parts.next() else { continue };
        let coef: f64 = first
            .parse()
            .map_err(|_| err(format!("SV line {n}: bad coefficient {first:?}")))?;
        let mut v = BTreeMap::new();
        for p in parts {
            let (i, x) = p
                .split_once(':')
                .ok_or_else(|| err(format!("SV line {n}: bad entry {p:?}")))?;
            let i: usize = i
                .parse()
                .map_err(|_| err(format!("SV line {n}: bad index {i:?}")))?;
            let x: f64 = x
                .parse()
                .map_err(|_| err(format!("SV line {n}: bad value {x:?}")))?;
            if i == 0 || i > 64 {
                return Err(err(format!("SV line {n}: index {i} out of range")));
            }
            v.insert(i, x);
        }
        coeffs.push(coef);
        vectors.push(v);
    }
    Ok(Libsvm {
        gamma,
        rho,
        coeffs,
        vectors,
    })
}

fn from_libvmaf_json(root: &Value) -> Result<VmafModel> {
    let dict = &root["model_dict"];
    let names: Vec<&str> = dict["feature_names"]
        .as_array()
        .ok_or_else(|| field_err("model_dict.feature_names", "expected an array"))?
        .iter()
        .map(|v| {
            v.as_str()
                .ok_or_else(|| field_err("model_dict.feature_names", "expected strings"))
        })
        .collect::<Result<_>>()?;
    let order: Vec<String> = names
        .iter()
        .map(|n| {
            canonical_feature_name(n)
                .map(str::to_string)
                .ok_or_else(|| {
                    field_err(
                        "model_dict.feature_names",
                        format!("unsupported feature {n:?}"),
                    )
                })
        })
        .collect::<Result<_>>()?;
    if order.len() != 6 {
        return Err(field_err(
            "model_dict.feature_names",
            format!("expected 6 features, got {}", order.len()),
        ));
    }
    let norm_type = dict["norm_type"].as_str().unwrap_or("linear_rescale");
    let (score_norm, feature_norms) = match norm_type {
        "none" => (LinearMap::IDENTITY, vec![LinearMap::IDENTITY; 6]),
        "linear_rescale" => {
            let slopes = json_f64s(&dict["slopes"], "model_dict.slopes")?;
            let intercepts = json_f64s(&dict["intercepts"], "model_dict.intercepts")?;
            if slopes.len() != 7 || intercepts.len() != 7 {
                return Err(field_err(
                    "model_dict.slopes",
                    "expected 7 slopes and 7 intercepts",
                ));
            }
            let maps: Vec<LinearMap> = slopes
                .iter()
                .zip(&intercepts)
                .map(|(&slope, &intercept)| LinearMap { slope, intercept })
                .collect();
            (maps[0], maps[1..].to_vec())
        }
        other => {
            return Err(field_err(
                "model_dict.norm_type",
                format!("unsupported {other:?}"),
            ))
        }
    };
    let svm_text = dict["model"]
        .as_str()
        .ok_or_else(|| field_err("model_dict.model", "expected libsvm text"))?;
    let svm = parse_libsvm(svm_text)?;
    if let Some(i) = svm.vectors.iter().flat_map(|v| v.keys()).find(|&&i| i > 6) {
        return Err(field_err(
            "model_dict.model",
            format!("feature index {i} exceeds 6 features"),
        ));
    }
    let support_vectors = svm
        .vectors
        .iter()
        .map(|v| (1..=6).map(|i| v.get(&i).copied().unwrap_or(0.0)).collect())
        .collect();

    let clip_enabled = match &dict["score_clip"] {
        Value::Null => false,
        v => {
            let c = json_f64s(v, "model_dict.score_clip")?;
            if c != [0.0, 100.0] {
                return Err(field_err(
                    "model_dict.score_clip",
                    format!("only [0, 100] is supported, got {c:?}"),
                ));
            }
            true
        }
    };
    let score_polynomial = match &dict["score_transform"] {
        Value::Object(t) if t.get("enabled").and_then(Value::as_bool).unwrap_or(false) => {
            let get = |k: &str| t.get(k).and_then(Value::as_f64).unwrap_or(0.0);
            Some(vec![get("p0"), get("p1"), get("p2")])
        }
        _ => None,
    };

    let mut egl_vif = None;
    let mut egl_dlm = None;
    if let Some(opts) = dict["feature_opts_dicts"].as_array() {
        for o in opts {
            if let Some(v) = o.get("vif_enhn_gain_limit").and_then(Value::as_f64) {
                egl_vif = Some(v);
            }
            if let Some(v) = o.get("adm_enhn_gain_limit").and_then(Value::as_f64) {
                egl_dlm = Some(v);
            }
        }
    }
    Ok(VmafModel {
        name: root["param_dict"]["model_name"]
            .as_str()
            .unwrap_or("libvmaf")
            .to_string(),
        feature_order: order,
        feature_norms,
        score_norm,
        score_polynomial,
        gamma: svm.gamma,
        intercept: -svm.rho,
        support_vectors,
        dual_coeffs: svm.coeffs,
        clip_enabled,
        neg_mode: egl_vif.is_some() || egl_dlm.is_some(),
        egl_vif: egl_vif.unwrap_or(1.0),
        egl_dlm: egl_dlm.unwrap_or(1.0),
    })
}
