//! VMAF fusion model: an RBF nu-SVR over six normalised features, loaded from
//! the reference distribution's JSON model format.

use serde::Deserialize;
use std::path::Path;

/// Enhancement gain limit of the NEG configuration.
pub const NEG_GAIN_LIMIT: f64 = 1.0;
/// libvmaf's default enhancement gain limit, i.e. the non-NEG configuration.
pub const DEFAULT_GAIN_LIMIT: f64 = 100.0;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("cannot read model file: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed model JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unknown feature name '{0}'")]
    UnknownFeature(String),
    #[error("model must use each of the six VMAF features exactly once, got {0:?}")]
    FeatureSet(Vec<String>),
    #[error("unsupported {field} '{value}'")]
    Unsupported { field: &'static str, value: String },
    #[error("malformed libsvm model: {0}")]
    Svm(String),
    #[error("feature vector has {got} entries, model expects {expected}")]
    Dimension { got: usize, expected: usize },
    #[error("normalisation slope for {0} must be positive and finite")]
    Normalisation(String),
    #[error("enhancement gain limit {0} must be >= 1")]
    GainLimit(f64),
}

/// The six features, in the canonical order used throughout this crate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FeatureKind {
    Adm2,
    Motion2,
    Vif(u8),
}

impl FeatureKind {
    pub const CANONICAL: [FeatureKind; 6] = [
        FeatureKind::Adm2,
        FeatureKind::Motion2,
        FeatureKind::Vif(0),
        FeatureKind::Vif(1),
        FeatureKind::Vif(2),
        FeatureKind::Vif(3),
    ];

    fn parse(name: &str) -> Option<Self> {
        let core = name
            .strip_prefix("VMAF_feature_")
            .or_else(|| name.strip_prefix("VMAF_integer_feature_"))?
            .strip_suffix("_score")?;
        match core {
            "adm2" => Some(Self::Adm2),
            "motion2" => Some(Self::Motion2),
            "vif_scale0" => Some(Self::Vif(0)),
            "vif_scale1" => Some(Self::Vif(1)),
            "vif_scale2" => Some(Self::Vif(2)),
            "vif_scale3" => Some(Self::Vif(3)),
            _ => None,
        }
    }

    fn canonical_index(self) -> usize {
        match self {
            Self::Adm2 => 0,
            Self::Motion2 => 1,
            Self::Vif(s) => 2 + s as usize,
        }
    }
}

#[derive(Deserialize)]
struct ModelFile {
    model_dict: ModelDict,
}

#[derive(Deserialize)]
struct ModelDict {
    model: String,
    feature_names: Vec<String>,
    #[serde(default)]
    feature_opts_dicts: Vec<serde_json::Map<String, serde_json::Value>>,
    slopes: Vec<f64>,
    intercepts: Vec<f64>,
    #[serde(default = "default_clip")]
    score_clip: (f64, f64),
    #[serde(default)]
    norm_type: Option<String>,
    #[serde(default)]
    model_type: Option<String>,
}

fn default_clip() -> (f64, f64) {
    (0.0, 100.0)
}

/// Support-vector regression model with linear feature rescaling.
///
/// Features are held in canonical order (adm2, motion2, vif0..vif3).
/// Each feature maps through `slope * x + intercept` before the kernel;
/// the raw prediction maps back through `(p - score_intercept) / score_slope`.
#[derive(Clone, Debug, PartialEq)]
pub struct VmafModel {
    pub support_vectors: Vec<[f64; 6]>,
    pub dual_coefficients: Vec<f64>,
    pub gamma: f64,
    pub rho: f64,
    pub feature_slopes: [f64; 6],
    pub feature_intercepts: [f64; 6],
    pub score_slope: f64,
    pub score_intercept: f64,
    pub score_clip: (f64, f64),
    pub vif_gain_limit: f64,
    pub adm_gain_limit: f64,
}

impl VmafModel {
    /// The bundled `vmaf_v0.6.1neg` model.
    pub fn neg() -> Self {
        Self::from_json(include_str!("../../assets/vmaf_v0.6.1neg.json")).expect("bundled model is valid")
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn from_json(json: &str) -> Result<Self, ModelError> {
        let file: ModelFile = serde_json::from_str(json)?;
        let d = file.model_dict;
        if let Some(t) = d.model_type.as_deref().filter(|t| *t != "LIBSVMNUSVR") {
            return Err(ModelError::Unsupported {
                field: "model_type",
                value: t.to_owned(),
            });
        }
        if let Some(t) = d.norm_type.as_deref().filter(|t| *t != "linear_rescale") {
            return Err(ModelError::Unsupported {
                field: "norm_type",
                value: t.to_owned(),
            });
        }

        let kinds = d
            .feature_names
            .iter()
            .map(|n| FeatureKind::parse(n).ok_or_else(|| ModelError::UnknownFeature(n.clone())))
            .collect::<Result<Vec<_>, _>>()?;
        let mut seen = [false; 6];
        for k in &kinds {
            seen[k.canonical_index()] = true;
        }
        if kinds.len() != 6 || !seen.iter().all(|&s| s) {
            return Err(ModelError::FeatureSet(d.feature_names.clone()));
        }
        // File position -> canonical position.
        let perm: Vec<usize> = kinds.iter().map(|k| k.canonical_index()).collect();

        if d.slopes.len() != 7 || d.intercepts.len() != 7 {
            return Err(ModelError::Dimension {
                got: d.slopes.len().min(d.intercepts.len()).saturating_sub(1),
                expected: 6,
            });
        }
        let mut feature_slopes = [0.0; 6];
        let mut feature_intercepts = [0.0; 6];
        for (file_pos, &canon) in perm.iter().enumerate() {
            feature_slopes[canon] = d.slopes[file_pos + 1];
            feature_intercepts[canon] = d.intercepts[file_pos + 1];
        }
        for (i, s) in feature_slopes.iter().enumerate() {
            if !(s.is_finite() && *s > 0.0) {
                return Err(ModelError::Normalisation(
                    d.feature_names[perm.iter().position(|&p| p == i).unwrap_or(0)].clone(),
                ));
            }
        }
        if !(d.slopes[0].is_finite() && d.slopes[0] > 0.0) {
            return Err(ModelError::Normalisation("score".into()));
        }

        let mut vif_gain_limit = DEFAULT_GAIN_LIMIT;
        let mut adm_gain_limit = DEFAULT_GAIN_LIMIT;
        for opts in &d.feature_opts_dicts {
            if let Some(v) = opts.get("vif_enhn_gain_limit").and_then(|v| v.as_f64()) {
                vif_gain_limit = v;
            }
            if let Some(v) = opts.get("adm_enhn_gain_limit").and_then(|v| v.as_f64()) {
                adm_gain_limit = v;
            }
        }

        let (gamma, rho, sv, alpha) = parse_libsvm(&d.model, &perm)?;
        let model = Self {
            support_vectors: sv,
            dual_coefficients: alpha,
            gamma,
            rho,
            feature_slopes,
            feature_intercepts,
            score_slope: d.slopes[0],
            score_intercept: d.intercepts[0],
            score_clip: d.score_clip,
            vif_gain_limit,
            adm_gain_limit,
        };
        model.validate()?;
        Ok(model)
    }

    fn validate(&self) -> Result<(), ModelError> {
        for egl in [self.vif_gain_limit, self.adm_gain_limit] {
            if !(egl >= 1.0) {
                return Err(ModelError::GainLimit(egl));
            }
        }
        if self.support_vectors.is_empty() {
            return Err(ModelError::Svm("no support vectors".into()));
        }
        Ok(())
    }

    /// Same SVR with the gain limits replaced; used for the non-NEG comparison.
    pub fn with_gain_limits(&self, vif: f64, adm: f64) -> Result<Self, ModelError> {
        let m = Self {
            vif_gain_limit: vif,
            adm_gain_limit: adm,
            ..self.clone()
        };
        m.validate()?;
        Ok(m)
    }

    pub fn without_gain_limit(&self) -> Self {
        self.with_gain_limits(DEFAULT_GAIN_LIMIT, DEFAULT_GAIN_LIMIT)
            .expect("default limits are valid")
    }

    pub fn is_neg(&self) -> bool {
        self.vif_gain_limit == NEG_GAIN_LIMIT && self.adm_gain_limit == NEG_GAIN_LIMIT
    }

    /// Feature range mapped onto the SVR's `[-1, 1]` training interval.
    pub fn feature_norm(&self) -> [(f64, f64); 6] {
        std::array::from_fn(|i| {
            let (s, b) = (self.feature_slopes[i], self.feature_intercepts[i]);
            ((-1.0 - b) / s, (1.0 - b) / s)
        })
    }

    /// Unclipped prediction and its gradient with respect to the raw features.
    pub fn predict_raw(&self, features: &[f64]) -> Result<(f64, [f64; 6]), ModelError> {
        if features.len() != 6 {
            return Err(ModelError::Dimension {
                got: features.len(),
                expected: 6,
            });
        }
        let x: [f64; 6] = std::array::from_fn(|i| self.feature_slopes[i] * features[i] + self.feature_intercepts[i]);
        let mut sum = 0.0;
        let mut dsum = [0.0; 6];
        for (sv, &alpha) in self.support_vectors.iter().zip(&self.dual_coefficients) {
            let dist2: f64 = x.iter().zip(sv).map(|(a, b)| (a - b) * (a - b)).sum();
            let k = alpha * (-self.gamma * dist2).exp();
            sum += k;
            for j in 0..6 {
                dsum[j] += k * -2.0 * self.gamma * (x[j] - sv[j]);
            }
        }
        let pred = (sum - self.rho - self.score_intercept) / self.score_slope;
        let grad = std::array::from_fn(|j| dsum[j] * self.feature_slopes[j] / self.score_slope);
        Ok((pred, grad))
    }

    /// Clipped score and gradient; the gradient is zero where the clip is active.
    pub fn predict(&self, features: &[f64]) -> Result<(f64, [f64; 6]), ModelError> {
        let (raw, grad) = self.predict_raw(features)?;
        let (lo, hi) = self.score_clip;
        if raw < lo || raw > hi {
            Ok((raw.clamp(lo, hi), [0.0; 6]))
        } else {
            Ok((raw, grad))
        }
    }
}

type ParsedSvm = (f64, f64, Vec<[f64; 6]>, Vec<f64>);

fn parse_libsvm(text: &str, perm: &[usize]) -> Result<ParsedSvm, ModelError> {
    let mut lines = text.lines();
    let mut gamma = None;
    let mut rho = None;
    let mut total_sv = None;
    for line in lines.by_ref() {
        let line = line.trim();
        if line == "SV" {
            break;
        }
        let mut parts = line.split_whitespace();
        let key = parts.next().unwrap_or_default();
        let value = parts.next();
        let parse = |v: Option<&str>| -> Result<f64, ModelError> {
            v.and_then(|s| s.parse().ok())
                .ok_or_else(|| ModelError::Svm(format!("bad value for '{key}'")))
        };
        match key {
            "svm_type" if value != Some("nu_svr") && value != Some("epsilon_svr") => {
                return Err(ModelError::Unsupported {
                    field: "svm_type",
                    value: value.unwrap_or_default().to_owned(),
                })
            }
            "kernel_type" if value != Some("rbf") => {
                return Err(ModelError::Unsupported {
                    field: "kernel_type",
                    value: value.unwrap_or_default().to_owned(),
                })
            }
            "gamma" => gamma = Some(parse(value)?),
            "rho" => rho = Some(parse(value)?),
            "total_sv" => total_sv = Some(parse(value)? as usize),
            _ => {}
        }
    }
    let gamma = gamma.ok_or_else(|| ModelError::Svm("missing gamma".into()))?;
    let rho = rho.ok_or_else(|| ModelError::Svm("missing rho".into()))?;

    let mut svs = Vec::new();
    let mut alphas = Vec::new();
    for line in lines {
        let mut parts = line.split_whitespace();
        let Some(first) = parts.next() else { continue };
        let alpha: f64 = first.parse().map_err(|_| ModelError::Svm(format!("bad coefficient '{first}'")))?;
        let mut sv = [0.0; 6];
        for item in parts {
            let (idx, val) = item.split_once(':').ok_or_else(|| ModelError::Svm(format!("bad entry '{item}'")))?;
            let idx: usize = idx.parse().map_err(|_| ModelError::Svm(format!("bad index '{idx}'")))?;
            let val: f64 = val.parse().map_err(|_| ModelError::Svm(format!("bad value '{val}'")))?;
            if idx == 0 || idx > 6 {
                return Err(ModelError::Svm(format!("feature index {idx} out of range")));
            }
            sv[perm[idx - 1]] = val;
        }
        svs.push(sv);
        alphas.push(alpha);
    }
    if let Some(n) = total_sv {
        if n != svs.len() {
            return Err(ModelError::Svm(format!("total_sv {n} but {} vectors", svs.len())));
        }
    }
    Ok((gamma, rho, svs, alphas))
}

#[cfg(test)]
mod tests {
    use super::*;

    const TINY: &str = r#"{
        "model_dict": {
            "model": "svm_type nu_svr\nkernel_type rbf\ngamma 0.5\nnr_class 2\ntotal_sv 2\nrho 0.1\nSV\n1.0 1:0.5 2:0.0 3:0.5 4:0.5 5:0.5 6:0.5 \n-0.5 1:0.2 3:0.1 4:0.1 5:0.1 6:0.1 \n",
            "feature_names": ["VMAF_feature_adm2_score", "VMAF_feature_motion2_score",
                "VMAF_feature_vif_scale0_score", "VMAF_feature_vif_scale1_score",
                "VMAF_feature_vif_scale2_score", "VMAF_feature_vif_scale3_score"],
            "feature_opts_dicts": [{"adm_enhn_gain_limit": 1.0}, {}, {"vif_enhn_gain_limit": 1.0}, {}, {}, {}],
            "slopes": [0.01, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0],
            "intercepts": [-0.3, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            "score_clip": [0.0, 100.0],
            "norm_type": "linear_rescale",
            "model_type": "LIBSVMNUSVR"
        }
    }"#;

    #[test]
    fn parses_tiny_model() {
        let m = VmafModel::from_json(TINY).unwrap();
        assert_eq!(m.support_vectors.len(), 2);
        assert_eq!(m.support_vectors[1][1], 0.0);
        assert!(m.is_neg());
        assert_eq!(m.gamma, 0.5);
    }

    #[test]
    fn rejects_unknown_feature() {
        let bad = TINY.replace("VMAF_feature_motion2_score", "VMAF_feature_bogus_score");
        assert!(matches!(VmafModel::from_json(&bad), Err(ModelError::UnknownFeature(_))));
    }

    #[test]
    fn rejects_dimension_mismatch() {
        let m = VmafModel::from_json(TINY).unwrap();
        assert!(matches!(m.predict(&[0.0; 5]), Err(ModelError::Dimension { .. })));
    }

    #[test]
    fn prediction_is_clipped_with_zero_gradient() {
        let m = VmafModel::from_json(TINY).unwrap();
        for f in [[0.0; 6], [1.0; 6], [-50.0; 6], [50.0; 6]] {
            let (v, g) = m.predict(&f).unwrap();
            assert!((0.0..=100.0).contains(&v));
            if v == 0.0 || v == 100.0 {
                assert!(g.iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn raw_gradient_matches_finite_differences() {
        let m = VmafModel::from_json(TINY).unwrap();
        let f = [0.4, 0.0, 0.3, 0.6, 0.2, 0.9];
        let (_, g) = m.predict_raw(&f).unwrap();
        for j in 0..6 {
            let mut p = f;
            p[j] += 1e-6;
            let mut q = f;
            q[j] -= 1e-6;
            let fd = (m.predict_raw(&p).unwrap().0 - m.predict_raw(&q).unwrap().0) / 2e-6;
            assert!((fd - g[j]).abs() < 1e-5 * (1.0 + fd.abs()));
        }
    }
}
