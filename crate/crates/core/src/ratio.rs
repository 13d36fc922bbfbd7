//! Timestep-dependent recompute ratio: a polynomial fitted to the
//! consecutive-step L1 change of a baseline run, scaled by `beta`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{polyfit, Polynomial};
use crate::trace::RunTrace;

/// Range below which a min-max normalization is treated as degenerate.
const FLAT_RANGE: f64 = 1e-12;

/// Serialized as `{degree, coefficients, beta, t_min, t_max, l1_min, l1_max}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RatioPolicyDoc", into = "RatioPolicyDoc")]
pub struct RatioPolicy {
    poly: Polynomial,
    degree: usize,
    beta: f64,
    t_min: f64,
    t_max: f64,
    l1_min: f64,
    l1_max: f64,
}

#[derive(Serialize, Deserialize)]
struct RatioPolicyDoc {
    degree: usize,
    coefficients: Vec<f64>,
    beta: f64,
    t_min: f64,
    t_max: f64,
    #[serde(default)]
    l1_min: f64,
    #[serde(default = "one")]
    l1_max: f64,
}

fn one() -> f64 {
    1.0
}

impl TryFrom<RatioPolicyDoc> for RatioPolicy {
    type Error = Error;

    fn try_from(doc: RatioPolicyDoc) -> Result<Self> {
        validate_degree(doc.degree)?;
        validate_beta(doc.beta)?;
        if doc.coefficients.len() != doc.degree + 1 {
            return Err(Error::Format(format!(
                "degree {} policy with {} coefficients",
                doc.degree,
                doc.coefficients.len()
            )));
        }
        if !(doc.t_min.is_finite() && doc.t_max.is_finite() && doc.t_min <= doc.t_max) {
            return Err(Error::Format("policy needs finite t_min <= t_max".into()));
        }
        Ok(Self {
            poly: Polynomial::new(doc.coefficients)?,
            degree: doc.degree,
            beta: doc.beta,
            t_min: doc.t_min,
            t_max: doc.t_max,
            l1_min: doc.l1_min,
            l1_max: doc.l1_max,
        })
    }
}

impl From<RatioPolicy> for RatioPolicyDoc {
    fn from(p: RatioPolicy) -> Self {
        Self {
            degree: p.degree,
            coefficients: p.poly.coefficients().to_vec(),
            beta: p.beta,
            t_min: p.t_min,
            t_max: p.t_max,
            l1_min: p.l1_min,
            l1_max: p.l1_max,
        }
    }
}

fn validate_degree(degree: usize) -> Result<()> {
    if !(3..=5).contains(&degree) {
        return Err(Error::Config(format!(
            "ratio polynomial degree must be 3, 4 or 5, got {degree}"
        )));
    }
    Ok(())
}

fn validate_beta(beta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Config(format!("beta {beta} not in [0, 1]")));
    }
    Ok(())
}

impl RatioPolicy {
    /// A policy from explicit parts; `poly` is read over `u` in `[0, 1]`.
    pub fn from_parts(poly: Polynomial, beta: f64, t_min: f64, t_max: f64) -> Result<Self> {
        validate_beta(beta)?;
        Ok(Self {
            degree: poly.degree(),
            poly,
            beta,
            t_min,
            t_max,
            l1_min: 0.0,
            l1_max: 1.0,
        })
    }

    pub fn polynomial(&self) -> &Polynomial {
        &self.poly
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn with_beta(mut self, beta: f64) -> Result<Self> {
        validate_beta(beta)?;
        self.beta = beta;
        Ok(self)
    }

    pub fn time_range(&self) -> (f64, f64) {
        (self.t_min, self.t_max)
    }

    /// Maps a raw timestep into `[0, 1]`, clamping out-of-range and
    /// non-finite input.
    pub fn normalize(&self, t: f64) -> f64 {
        let span = self.t_max - self.t_min;
        if span <= 0.0 || t.is_nan() {
            return 0.0;
        }
        ((t - self.t_min) / span).clamp(0.0, 1.0)
    }

    /// The fitted curve in the units of the original L1 values.
    pub fn fitted_l1(&self, t: f64) -> f64 {
        self.l1_min + (self.l1_max - self.l1_min) * self.poly.eval(self.normalize(t))
    }

    pub fn evaluate(&self, t: f64) -> f64 {
        self.evaluate_with_beta(t, self.beta)
    }

    /// `clamp(beta * poly(u(t)), 0, 1)`.
    pub fn evaluate_with_beta(&self, t: f64, beta: f64) -> f64 {
        let r = beta * self.poly.eval(self.normalize(t));
        if r.is_nan() {
            0.0
        } else {
            r.clamp(0.0, 1.0)
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("policy serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Format(format!("ratio policy: {e}")))
    }
}

pub fn evaluate_ratio(policy: &RatioPolicy, t: f64) -> f64 {
    policy.evaluate(t)
}

/// Mean absolute change between consecutive model outputs. Each value is
/// attached to the later step's timestep.
pub fn measure_l1_curve(trace: &RunTrace) -> Result<(Vec<usize>, Vec<f64>)> {
    let outputs = trace.model_outputs.as_ref().ok_or_else(|| {
        Error::MissingData("trace was recorded without per-step model outputs".into())
    })?;
    if outputs.len() != trace.steps.len() {
        return Err(Error::MissingData(format!(
            "{} model outputs for {} steps",
            outputs.len(),
            trace.steps.len()
        )));
    }
    let mut timesteps = Vec::with_capacity(outputs.len().saturating_sub(1));
    let mut values = Vec::with_capacity(outputs.len().saturating_sub(1));
    for i in 1..outputs.len() {
        values.push(outputs[i].sub(&outputs[i - 1])?.mean_abs());
        timesteps.push(trace.steps[i].timestep);
    }
    Ok((timesteps, values))
}

/// Fits `degree` to the min-max-normalized L1 curve over normalized time.
///
/// A flat curve has no shape to fit; the policy then returns `beta` at every
/// timestep.
pub fn fit_ratio_policy(
    timesteps: &[f64],
    l1_values: &[f64],
    degree: usize,
    beta: f64,
) -> Result<RatioPolicy> {
    validate_degree(degree)?;
    validate_beta(beta)?;
    if timesteps.len() != l1_values.len() {
        return Err(Error::Fit(format!(
            "{} timesteps for {} L1 values",
            timesteps.len(),
            l1_values.len()
        )));
    }
    if timesteps.len() < degree + 1 {
        return Err(Error::Fit(format!(
            "degree {degree} needs at least {} samples, got {}",
            degree + 1,
            timesteps.len()
        )));
    }
    if timesteps.iter().chain(l1_values).any(|v| !v.is_finite()) {
        return Err(Error::Fit("non-finite sample".into()));
    }
    let fold = |init: f64, f: fn(f64, f64) -> f64, xs: &[f64]| xs.iter().copied().fold(init, f);
    let t_min = fold(f64::INFINITY, f64::min, timesteps);
    let t_max = fold(f64::NEG_INFINITY, f64::max, timesteps);
    let l1_min = fold(f64::INFINITY, f64::min, l1_values);
    let l1_max = fold(f64::NEG_INFINITY, f64::max, l1_values);

    let poly = if l1_max - l1_min < FLAT_RANGE {
        let mut c = vec![0.0; degree + 1];
        c[0] = 1.0;
        Polynomial::new(c)?
    } else {
        let span = t_max - t_min;
        if span <= 0.0 {
            return Err(Error::Fit("all samples share one timestep".into()));
        }
        let us: Vec<f64> = timesteps.iter().map(|t| (t - t_min) / span).collect();
        let ys: Vec<f64> = l1_values
            .iter()
            .map(|v| (v - l1_min) / (l1_max - l1_min))
            .collect();
        polyfit(&us, &ys, degree)?
    };
    Ok(RatioPolicy {
        poly,
        degree,
        beta,
        t_min,
        t_max,
        l1_min,
        l1_max,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Matrix;
    use crate::trace::{Phase, StepRecord};
    use proptest::prelude::*;

    fn synthetic_trace(outputs: Vec<Matrix>) -> RunTrace {
        let steps = (0..outputs.len())
            .map(|i| StepRecord {
                step: i,
                timestep: 100 - 10 * i,
                phase: Phase::Full,
                ratio: None,
                block_evals: 0,
                blocks: vec![],
                policy: None,
            })
            .collect();
        RunTrace::from_steps(serde_json::Value::Null, steps, 0.0, Some(outputs), None)
    }

    #[test]
    fn l1_curve_examples() {
        let flat = synthetic_trace(vec![Matrix::filled(2, 2, 3.0); 5]);
        let (ts, l1) = measure_l1_curve(&flat).unwrap();
        assert_eq!(ts, vec![90, 80, 70, 60]);
        assert!(l1.iter().all(|&v| v == 0.0));

        let ramp = synthetic_trace((0..6).map(|i| Matrix::filled(1, 1, i as f32)).collect());
        let (_, l1) = measure_l1_curve(&ramp).unwrap();
        assert!(l1.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn l1_curve_needs_outputs() {
        let mut t = synthetic_trace(vec![Matrix::zeros(1, 1); 3]);
        t.model_outputs = None;
        assert!(matches!(measure_l1_curve(&t), Err(Error::MissingData(_))));
    }

    #[test]
    fn flat_curve_falls_back_to_beta() {
        let ts: Vec<f64> = (0..10).map(|i| i as f64 * 100.0).collect();
        let p = fit_ratio_policy(&ts, &[0.4; 10], 5, 0.35).unwrap();
        for t in [0.0, 123.0, 900.0, 5000.0] {
            assert!((p.evaluate(t) - 0.35).abs() < 1e-12);
        }
    }

    #[test]
    fn polynomial_curve_is_recovered() {
        let ts: Vec<f64> = (0..50).map(|i| (980 - 20 * i) as f64).collect();
        let curve = |t: f64| {
            let u = t / 980.0;
            0.2 + 0.5 * u - 0.9 * u * u + 0.6 * u.powi(3)
        };
        let ys: Vec<f64> = ts.iter().map(|&t| curve(t)).collect();
        for degree in 3..=5 {
            let p = fit_ratio_policy(&ts, &ys, degree, 1.0).unwrap();
            for &t in &ts {
                assert!((p.fitted_l1(t) - curve(t)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn higher_degree_fits_at_least_as_well() {
        let ts: Vec<f64> = (0..40).map(|i| i as f64 * 25.0).collect();
        let ys: Vec<f64> = ts.iter().map(|t| (t / 160.0).sin().abs() + 0.1).collect();
        let residual = |d| {
            let p = fit_ratio_policy(&ts, &ys, d, 1.0).unwrap();
            ts.iter()
                .zip(&ys)
                .map(|(&t, &y)| (p.fitted_l1(t) - y).powi(2))
                .sum::<f64>()
        };
        assert!(residual(5) <= residual(3) + 1e-12);
    }

    #[test]
    fn rejects_bad_degree_and_beta() {
        let ts = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0];
        let ys = [0.0, 1.0, 0.0, 1.0, 0.0, 1.0];
        assert!(matches!(
            fit_ratio_policy(&ts, &ys, 2, 1.0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            fit_ratio_policy(&ts, &ys, 6, 1.0),
            Err(Error::Config(_))
        ));
        assert!(fit_ratio_policy(&ts, &ys, 3, 1.5).is_err());
    }

    #[test]
    fn evaluate_examples() {
        let unit = RatioPolicy::from_parts(Polynomial::constant(1.0), 0.0, 0.0, 1000.0).unwrap();
        assert_eq!(unit.evaluate(500.0), 0.0);
        let unit = unit.with_beta(1.0).unwrap();
        assert_eq!(unit.evaluate(0.0), 1.0);
        assert_eq!(unit.evaluate(1000.0), 1.0);
        let p = RatioPolicy::from_parts(Polynomial::constant(0.8), 0.5, 0.0, 1000.0).unwrap();
        assert!((p.evaluate(250.0) - 0.4).abs() < 1e-12);
    }

    #[test]
    fn json_round_trip() {
        let ts: Vec<f64> = (0..20).map(|i| i as f64 * 50.0).collect();
        let ys: Vec<f64> = ts.iter().map(|t| (t / 300.0).cos() + 2.0).collect();
        let p = fit_ratio_policy(&ts, &ys, 5, 0.7).unwrap();
        let doc: serde_json::Value = serde_json::from_str(&p.to_json()).unwrap();
        for key in ["degree", "coefficients", "beta", "t_min", "t_max"] {
            assert!(doc.get(key).is_some(), "missing {key}");
        }
        assert_eq!(RatioPolicy::from_json(&p.to_json()).unwrap(), p);
        assert!(RatioPolicy::from_json(
            r#"{"degree":3,"coefficients":[1],"beta":1,"t_min":0,"t_max":1}"#
        )
        .is_err());
    }

    #[test]
    fn fit_is_deterministic() {
        let ts: Vec<f64> = (0..30).map(|i| i as f64).collect();
        let ys: Vec<f64> = ts.iter().map(|t| (t * 0.3).sin()).collect();
        assert_eq!(
            fit_ratio_policy(&ts, &ys, 4, 0.5).unwrap(),
            fit_ratio_policy(&ts, &ys, 4, 0.5).unwrap()
        );
    }

    proptest! {
        #[test]
        fn ratio_is_bounded(coeffs in proptest::collection::vec(-5.0f64..5.0, 4..=6), beta in 0.0f64..=1.0, t in proptest::num::f64::ANY) {
            let p = RatioPolicy::from_parts(Polynomial::new(coeffs).unwrap(), beta, 0.0, 980.0).unwrap();
            let r = p.evaluate(t);
            prop_assert!((0.0..=1.0).contains(&r));
        }

        #[test]
        fn ratio_monotone_in_beta(coeffs in proptest::collection::vec(-5.0f64..5.0, 4..=6), b1 in 0.0f64..=1.0, b2 in 0.0f64..=1.0, t in 0.0f64..1000.0) {
            let p = RatioPolicy::from_parts(Polynomial::new(coeffs).unwrap(), 1.0, 0.0, 980.0).unwrap();
            let (lo, hi) = if b1 <= b2 { (b1, b2) } else { (b2, b1) };
            // a negative curve clamps to zero for every beta, so the order holds
            prop_assert!(p.evaluate_with_beta(t, lo) <= p.evaluate_with_beta(t, hi));
        }
    }
}
