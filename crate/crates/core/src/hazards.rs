//! Weibull transition intensities for the three illness-death transitions.
//!
//! The baseline intensity of transition `k -> l` is
//! `shape * scale^shape * t^(shape - 1)` with proportional covariate effects
//! `exp(gamma . w)`, so that the cumulative intensity has the closed form
//! `(scale * t)^shape * exp(gamma . w)`.

use crate::error::{Error, Result};

/// One transition of the illness-death model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Transition {
    /// healthy -> demented
    #[serde(rename = "01")]
    HealthyIll,
    /// healthy -> dead
    #[serde(rename = "02")]
    HealthyDead,
    /// demented -> dead
    #[serde(rename = "12")]
    IllDead,
}

impl Transition {
    pub const ALL: [Transition; 3] = [Self::HealthyIll, Self::HealthyDead, Self::IllDead];

    pub fn index(self) -> usize {
        match self {
            Self::HealthyIll => 0,
            Self::HealthyDead => 1,
            Self::IllDead => 2,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::HealthyIll => "01",
            Self::HealthyDead => "02",
            Self::IllDead => "12",
        }
    }
}

/// Natural-scale parameters of one class-specific transition intensity for one subject.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionParams {
    pub shape: f64,
    pub scale: f64,
    /// `gamma . w`
    pub linear_predictor: f64,
}

impl TransitionParams {
    pub fn new(shape: f64, scale: f64, gamma: &[f64], w: &[f64]) -> Result<Self> {
        if gamma.len() != w.len() {
            return Err(Error::Domain(format!(
                "{} covariate effects for {} covariates",
                gamma.len(),
                w.len()
            )));
        }
        let lp = gamma.iter().zip(w).map(|(g, x)| g * x).sum();
        Self::with_linear_predictor(shape, scale, lp)
    }

    pub fn with_linear_predictor(shape: f64, scale: f64, linear_predictor: f64) -> Result<Self> {
        if !(shape > 0.0 && scale > 0.0) || !shape.is_finite() || !scale.is_finite() {
            return Err(Error::Domain(format!(
                "Weibull shape {shape} and scale {scale} must be positive"
            )));
        }
        Ok(Self {
            shape,
            scale,
            linear_predictor,
        })
    }

    pub(crate) fn log_form(&self) -> LogWeibull {
        LogWeibull {
            shape: self.shape,
            log_shape: self.shape.ln(),
            log_scale: self.scale.ln(),
            lp: self.linear_predictor,
        }
    }
}

/// Transition intensity at age `t`.
pub fn intensity(p: &TransitionParams, t: f64) -> Result<f64> {
    if t < 0.0 || (t == 0.0 && p.shape < 1.0) {
        return Err(Error::Domain(format!(
            "intensity undefined at t = {t} with shape {}",
            p.shape
        )));
    }
    if t == 0.0 {
        let base = if p.shape == 1.0 { p.scale } else { 0.0 };
        return Ok(base * p.linear_predictor.exp());
    }
    Ok(p.log_form().log_intensity(t.ln()).exp())
}

/// Cumulative intensity `A(t) = (scale * t)^shape * exp(gamma . w)`.
pub fn cumulative(p: &TransitionParams, t: f64) -> Result<f64> {
    if t < 0.0 || t.is_nan() {
        return Err(Error::Domain(format!("cumulative intensity at t = {t}")));
    }
    if t == 0.0 {
        return Ok(0.0);
    }
    Ok(p.log_form().cumulative(t.ln()))
}

/// Intensity of death after dementia onset at `t_dem`.
///
/// Markovian: depends on age only. Semi-markovian: evaluated at the time
/// spent in the dementia state, `t - t_dem`.
pub fn intensity_12(p: &TransitionParams, t: f64, t_dem: f64, markovian: bool) -> Result<f64> {
    if markovian {
        return intensity(p, t);
    }
    if t < t_dem {
        return Err(Error::Domain(format!(
            "age {t} precedes dementia onset {t_dem}"
        )));
    }
    intensity(p, t - t_dem)
}

/// Weibull intensity in log form, evaluated from log-times on the hot path.
#[derive(Debug, Clone, Copy)]
pub(crate) struct LogWeibull {
    pub shape: f64,
    pub log_shape: f64,
    pub log_scale: f64,
    pub lp: f64,
}

impl LogWeibull {
    #[inline]
    pub fn log_cumulative(&self, log_t: f64) -> f64 {
        self.shape * (self.log_scale + log_t) + self.lp
    }

    #[inline]
    pub fn cumulative(&self, log_t: f64) -> f64 {
        self.log_cumulative(log_t).exp()
    }

    #[inline]
    pub fn log_intensity(&self, log_t: f64) -> f64 {
        self.log_shape + self.shape * self.log_scale + (self.shape - 1.0) * log_t + self.lp
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p(shape: f64, scale: f64) -> TransitionParams {
        TransitionParams::with_linear_predictor(shape, scale, 0.0).unwrap()
    }

    #[test]
    fn shape_one_is_constant_hazard() {
        for t in [0.5, 10.0, 80.0] {
            assert!((intensity(&p(1.0, 0.1), t).unwrap() - 0.1).abs() < 1e-15);
        }
    }

    #[test]
    fn closed_form_against_high_precision_value() {
        // 3.2 * 0.11^3.2 * 80^2.2, evaluated with mpmath at 50 digits
        let expected = 42.111_871_481_879_07;
        let got = intensity(&p(3.2, 0.11), 80.0).unwrap();
        assert!((got - expected).abs() / expected < 1e-13, "{got}");
    }

    #[test]
    fn covariates_scale_intensity_proportionally() {
        let base = TransitionParams::new(2.5, 0.012, &[0.3], &[1.0]).unwrap();
        let doubled =
            TransitionParams::new(2.5, 0.012, &[0.3 + 2f64.ln()], &[1.0]).unwrap();
        for t in [60.0, 70.5, 90.0] {
            let r = intensity(&doubled, t).unwrap() / intensity(&base, t).unwrap();
            assert!((r - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cumulative_examples() {
        assert!((cumulative(&p(2.0, 0.1), 10.0).unwrap() - 1.0).abs() < 1e-14);
        assert_eq!(cumulative(&p(2.0, 0.1), 0.0).unwrap(), 0.0);
    }

    #[test]
    fn cumulative_matches_simpson_integration() {
        // composite Simpson on the intensity, independent of the closed form
        let q = TransitionParams::with_linear_predictor(3.7, 0.0121, 0.4).unwrap();
        let t = 83.0;
        let n = 20_000;
        let h = t / n as f64;
        let f = |s: f64| q.shape * q.scale.powf(q.shape) * s.powf(q.shape - 1.0) * q.linear_predictor.exp();
        let mut acc = f(0.0) + f(t);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * f(i as f64 * h);
        }
        let simpson = acc * h / 3.0;
        let closed = cumulative(&q, t).unwrap();
        assert!((simpson - closed).abs() / closed < 1e-10, "{simpson} vs {closed}");
    }

    #[test]
    fn intensity_at_zero() {
        assert!(intensity(&p(0.5, 0.1), 0.0).is_err());
        assert_eq!(intensity(&p(2.0, 0.1), 0.0).unwrap(), 0.0);
        assert!((intensity(&p(1.0, 0.1), 0.0).unwrap() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn intensity_12_modes() {
        let q = p(2.3, 0.05);
        let a = intensity_12(&q, 80.0, 70.0, true).unwrap();
        let b = intensity_12(&q, 80.0, 75.0, true).unwrap();
        assert_eq!(a, b);
        assert_eq!(intensity_12(&q, 75.0, 75.0, false).unwrap(), 0.0);
        assert!(intensity_12(&q, 74.0, 75.0, false).is_err());
        let e = p(1.0, 0.2);
        assert_eq!(
            intensity_12(&e, 80.0, 71.0, false).unwrap(),
            intensity_12(&e, 80.0, 71.0, true).unwrap()
        );
    }

    #[test]
    fn rejects_non_positive_parameters() {
        assert!(TransitionParams::with_linear_predictor(0.0, 0.1, 0.0).is_err());
        assert!(TransitionParams::with_linear_predictor(1.0, -0.1, 0.0).is_err());
        assert!(TransitionParams::new(1.0, 0.1, &[1.0, 2.0], &[1.0]).is_err());
    }

    proptest! {
        #[test]
        fn cumulative_nondecreasing_and_survival_in_unit_interval(
            shape in 0.3f64..12.0, scale in 0.005f64..0.2, lp in -2.0f64..2.0,
            t1 in 0.0f64..110.0, dt in 0.0f64..20.0,
        ) {
            let q = TransitionParams::with_linear_predictor(shape, scale, lp).unwrap();
            let a1 = cumulative(&q, t1).unwrap();
            let a2 = cumulative(&q, t1 + dt).unwrap();
            prop_assert!(a2 >= a1);
            let s = (-a1).exp();
            prop_assert!(s > 0.0 || a1 > 700.0);
            prop_assert!(s <= 1.0);
        }

        #[test]
        fn derivative_of_cumulative_is_intensity(
            shape in 0.5f64..12.0, scale in 0.005f64..0.05, t in 40.0f64..100.0,
        ) {
            let q = TransitionParams::with_linear_predictor(shape, scale, 0.1).unwrap();
            let h = 1e-4 * t;
            let fd = (cumulative(&q, t + h).unwrap() - cumulative(&q, t - h).unwrap()) / (2.0 * h);
            let exact = intensity(&q, t).unwrap();
            prop_assume!(exact > 1e-200);
            prop_assert!((fd - exact).abs() <= 1e-6 * exact, "{} vs {}", fd, exact);
        }
    }
}
