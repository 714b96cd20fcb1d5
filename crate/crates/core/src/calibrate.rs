//! Inlier-count confidence calibration.
//!
//! A one-feature logistic model `P(true positive | x) = σ(a·x + b)` is fit on
//! labeled outcomes; the acceptance threshold is the smallest integer count
//! whose fitted probability reaches the target precision.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Precision the threshold guarantees under the fitted model.
pub const TARGET_PRECISION: f64 = 0.999;
pub const DEFAULT_LAMBDA: f64 = 1e-4;
pub const NO_FALSE_POSITIVES: &str = "no false positives";
const GRAD_TOL: f64 = 1e-10;
const MAX_NEWTON: usize = 100;

#[derive(Debug, Error)]
pub enum CalibError {
    #[error("logistic fit needs both classes, got only {0}")]
    SingleClass(&'static str),
    #[error("no true positives: calibration impossible")]
    NoTruePositives,
    #[error("model slope {0} is not positive: threshold undefined")]
    NonMonotone(f64),
    #[error("target precision {0} must be in (0, 1)")]
    Target(f64),
    #[error("logistic fit did not converge: gradient norm {0:e} after {MAX_NEWTON} iterations")]
    NoConvergence(f64),
    #[error("{path}: {message}")]
    Input { path: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledOutcome {
    pub inlier_count: u64,
    pub is_true_positive: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub a: f64,
    pub b: f64,
    pub lambda: f64,
}

impl LogisticModel {
    pub fn probability(&self, x: f64) -> f64 {
        sigmoid(self.a * x + self.b)
    }
}

/// Either a threshold or the reason there is none.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThresholdDecision {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_inl: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub disabled_reason: Option<String>,
}

impl ThresholdDecision {
    pub fn threshold(t: u64) -> Self {
        ThresholdDecision {
            t_inl: Some(t),
            disabled_reason: None,
        }
    }

    pub fn disabled(reason: &str) -> Self {
        ThresholdDecision {
            t_inl: None,
            disabled_reason: Some(reason.to_string()),
        }
    }
}

pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `ln(1 + e^t)` without overflow.
fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

/// Mean inlier count, the point at which the intercept is regularized.
pub fn mean_count(data: &[LabeledOutcome]) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    data.iter().map(|o| o.inlier_count as f64).sum::<f64>() / data.len() as f64
}

/// Regularized negative log-likelihood
/// `Σ ln(1 + e^{−y(ax+b)}) + λ(a² + (a·x̄ + b)²)`, the quantity the fit
/// minimizes. The intercept is penalized at the mean count `x̄` rather than
/// at zero so that shifting every count shifts the fit with it.
pub fn objective(data: &[LabeledOutcome], a: f64, b: f64, lambda: f64) -> f64 {
    let nll: f64 = data
        .iter()
        .map(|o| {
            let y = if o.is_true_positive { 1.0 } else { -1.0 };
            softplus(-y * (a * o.inlier_count as f64 + b))
        })
        .sum();
    let c = a * mean_count(data) + b;
    nll + lambda * (a * a + c * c)
}

/// Fitted model plus the loss after every Newton step (first entry is the
/// starting loss).
#[derive(Debug, Clone)]
pub struct FitTrace {
    pub model: LogisticModel,
    pub losses: Vec<f64>,
    pub iterations: usize,
}

pub fn fit_logistic(data: &[LabeledOutcome], lambda: f64) -> Result<LogisticModel, CalibError> {
    fit_logistic_traced(data, lambda).map(|t| t.model)
}

/// Damped Newton on the regularized objective.
///
/// Iterates in standardized coordinates `z = (x − μ)/s` (an affine
/// reparametrization, so the Newton path is unchanged) to keep the Hessian
/// well conditioned for counts in the thousands.
pub fn fit_logistic_traced(data: &[LabeledOutcome], lambda: f64) -> Result<FitTrace, CalibError> {
    let n_tp = data.iter().filter(|o| o.is_true_positive).count();
    if n_tp == 0 {
        return Err(CalibError::SingleClass("false positives"));
    }
    if n_tp == data.len() {
        return Err(CalibError::SingleClass("true positives"));
    }
    let n = data.len() as f64;
    let mu = mean_count(data);
    let var = data.iter().map(|o| (o.inlier_count as f64 - mu).powi(2)).sum::<f64>() / n;
    let s = if var > 0.0 { var.sqrt() } else { 1.0 };
    // (α, β) with a = α/s, b = β − αμ/s.
    let to_ab = |al: f64, be: f64| (al / s, be - al * mu / s);
    let loss = |al: f64, be: f64| {
        let (a, b) = to_ab(al, be);
        objective(data, a, b, lambda)
    };
    let grad_hess = |al: f64, be: f64| {
        let (a, b) = to_ab(al, be);
        // Gradient and Hessian in (a, b), then chain through the Jacobian.
        let c = a * mu + b;
        let (mut ga, mut gb) = (2.0 * lambda * (a + c * mu), 2.0 * lambda * c);
        let (mut haa, mut hab, mut hbb) = (2.0 * lambda * (1.0 + mu * mu), 2.0 * lambda * mu, 2.0 * lambda);
        for o in data {
            let x = o.inlier_count as f64;
            let y = if o.is_true_positive { 1.0 } else { 0.0 };
            let p = sigmoid(a * x + b);
            let r = p - y;
            let w = p * (1.0 - p);
            ga += r * x;
            gb += r;
            haa += w * x * x;
            hab += w * x;
            hbb += w;
        }
        // J = ∂(a,b)/∂(α,β) = [[1/s, 0], [−μ/s, 1]].
        let (j11, j21) = (1.0 / s, -mu / s);
        let g_al = j11 * ga + j21 * gb;
        let g_be = gb;
        let h_aa = j11 * j11 * haa + 2.0 * j11 * j21 * hab + j21 * j21 * hbb;
        let h_ab = j11 * hab + j21 * hbb;
        let h_bb = hbb;
        ((g_al, g_be), (h_aa, h_ab, h_bb))
    };

    let (mut al, mut be) = (0.0, 0.0);
    let mut cur = loss(al, be);
    let mut losses = vec![cur];
    let mut gnorm = f64::INFINITY;
    for it in 0..MAX_NEWTON {
        let ((g1, g2), (h11, h12, h22)) = grad_hess(al, be);
        gnorm = g1.hypot(g2);
        if gnorm <= GRAD_TOL {
            return Ok(done(to_ab(al, be), lambda, losses, it));
        }
        let det = h11 * h22 - h12 * h12;
        let (mut d1, mut d2) = if det > 1e-300 {
            ((h22 * g1 - h12 * g2) / det, (h11 * g2 - h12 * g1) / det)
        } else {
            (g1, g2)
        };
        // Backtracking until the loss does not increase.
        let mut accepted = false;
        for _ in 0..60 {
            let next = loss(al - d1, be - d2);
            if next <= cur {
                al -= d1;
                be -= d2;
                cur = next;
                accepted = true;
                break;
            }
            d1 *= 0.5;
            d2 *= 0.5;
        }
        losses.push(cur);
        if !accepted {
            // Stationary to machine precision.
            break;
        }
    }
    // Floating-point floor: accept a gradient tiny relative to the data.
    if gnorm <= 1e-6 * n.max(1.0) {
        let it = losses.len() - 1;
        return Ok(done(to_ab(al, be), lambda, losses, it));
    }
    Err(CalibError::NoConvergence(gnorm))
}

fn done((a, b): (f64, f64), lambda: f64, losses: Vec<f64>, iterations: usize) -> FitTrace {
    FitTrace {
        model: LogisticModel { a, b, lambda },
        losses,
        iterations,
    }
}

/// Smallest non-negative integer `t` with `σ(a·t + b) ≥ target`.
pub fn derive_threshold(model: &LogisticModel, target: f64) -> Result<ThresholdDecision, CalibError> {
    if !(target > 0.0 && target < 1.0) {
        return Err(CalibError::Target(target));
    }
    if !(model.a > 0.0) {
        return Err(CalibError::NonMonotone(model.a));
    }
    let crossing = (logit(target) - model.b) / model.a;
    let mut t = crossing.ceil().max(0.0);
    // Guard the ceiling against rounding at an exact integer crossing.
    while t > 0.0 && model.probability(t - 1.0) >= target {
        t -= 1.0;
    }
    while model.probability(t) < target {
        t += 1.0;
    }
    Ok(ThresholdDecision::threshold(t as u64))
}

pub fn calibrate_from_run(outcomes: &[LabeledOutcome]) -> Result<ThresholdDecision, CalibError> {
    calibrate_with(outcomes, DEFAULT_LAMBDA, TARGET_PRECISION)
}

pub fn calibrate_with(outcomes: &[LabeledOutcome], lambda: f64, target: f64) -> Result<ThresholdDecision, CalibError> {
    if !outcomes.iter().any(|o| o.is_true_positive) {
        return Err(CalibError::NoTruePositives);
    }
    if outcomes.iter().all(|o| o.is_true_positive) {
        return Ok(ThresholdDecision::disabled(NO_FALSE_POSITIVES));
    }
    derive_threshold(&fit_logistic(outcomes, lambda)?, target)
}

/// One row of the labeled-outcome CSV.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeRow {
    pub query_id: String,
    pub candidate_rank: u8,
    pub inlier_count: u64,
    #[serde(deserialize_with = "de_bool")]
    pub is_true_positive: bool,
}

impl From<&OutcomeRow> for LabeledOutcome {
    fn from(r: &OutcomeRow) -> Self {
        LabeledOutcome {
            inlier_count: r.inlier_count,
            is_true_positive: r.is_true_positive,
        }
    }
}

fn de_bool<'de, D: serde::Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
    let s = String::deserialize(d)?;
    match s.trim().to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(serde::de::Error::custom(format!("not a boolean: {other:?}"))),
    }
}

/// Reads `query_id,candidate_rank,inlier_count,is_true_positive` rows.
/// An input with no rows is an error.
pub fn read_outcomes_csv(path: &Path) -> Result<Vec<OutcomeRow>, CalibError> {
    let p = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|source| CalibError::Io {
        path: p.clone(),
        source,
    })?;
    let mut rows = Vec::new();
    for (i, rec) in csv::Reader::from_reader(file).deserialize().enumerate() {
        rows.push(rec.map_err(|e| CalibError::Input {
            path: p.clone(),
            message: format!("row {}: {e}", i + 1),
        })?);
    }
    if rows.is_empty() {
        return Err(CalibError::Input {
            path: p,
            message: "no outcome rows".into(),
        });
    }
    Ok(rows)
}

pub fn write_outcomes_csv<W: std::io::Write>(rows: &[OutcomeRow], w: W) -> csv::Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

/// Configuration a threshold was calibrated for.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CalibratedConfig {
    pub image_side: u32,
    pub max_keypoints: usize,
}

/// On-disk threshold: `{matcher, config, t_inl | disabled_reason}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThresholdFile {
    pub matcher: String,
    pub config: CalibratedConfig,
    #[serde(flatten)]
    pub decision: ThresholdDecision,
}

impl ThresholdFile {
    pub fn load(path: &Path) -> Result<Self, CalibError> {
        let p = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|source| CalibError::Io {
            path: p.clone(),
            source,
        })?;
        let tf: ThresholdFile = serde_json::from_str(&text).map_err(|e| CalibError::Input {
            path: p.clone(),
            message: e.to_string(),
        })?;
        if tf.decision.t_inl.is_some() == tf.decision.disabled_reason.is_some() {
            return Err(CalibError::Input {
                path: p,
                message: "exactly one of t_inl / disabled_reason must be present".into(),
            });
        }
        Ok(tf)
    }
}
