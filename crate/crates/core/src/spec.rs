//! Declarative model configuration.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::hazards::Transition;

/// Which multi-state structure drives the event part of the likelihood.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum EventModel {
    /// Healthy -> demented -> dead with interval-censored onset.
    #[default]
    IllnessDeath,
    /// First event only (dementia or death), no 1 -> 2 transition.
    CompetingRisks,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LinkKind {
    #[default]
    Identity,
    BetaCdf,
}

/// Affine age-to-time map `t = (age - offset) / scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeTransform {
    pub offset: f64,
    pub scale: f64,
}

impl Default for TimeTransform {
    fn default() -> Self {
        Self {
            offset: 65.0,
            scale: 10.0,
        }
    }
}

impl TimeTransform {
    pub fn to_time(&self, age: f64) -> f64 {
        (age - self.offset) / self.scale
    }

    pub fn to_age(&self, t: f64) -> f64 {
        t * self.scale + self.offset
    }
}

/// One column of a design matrix: `covariate * t^power / divisor`.
///
/// Written as e.g. `1`, `t`, `t^2/10`, `X`, `Educ*t`, `Educ*t^2/10`.
#[derive(Debug, Clone, PartialEq)]
pub struct Term {
    pub covariate: Option<String>,
    pub time_power: u32,
    pub divisor: f64,
}

impl Term {
    pub fn intercept() -> Self {
        Self {
            covariate: None,
            time_power: 0,
            divisor: 1.0,
        }
    }

    pub fn time() -> Self {
        Self {
            covariate: None,
            time_power: 1,
            divisor: 1.0,
        }
    }

    pub fn covariate(name: &str) -> Self {
        Self {
            covariate: Some(name.to_string()),
            time_power: 0,
            divisor: 1.0,
        }
    }

    /// Value of the term given the (transformed) time and the covariate value.
    pub fn eval(&self, t: f64, cov: f64) -> f64 {
        let c = if self.covariate.is_some() { cov } else { 1.0 };
        c * t.powi(self.time_power as i32) / self.divisor
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let time = match self.time_power {
            0 => String::new(),
            1 => "t".to_string(),
            p => format!("t^{p}"),
        };
        let div = if self.divisor != 1.0 {
            format!("/{}", self.divisor)
        } else {
            String::new()
        };
        match (&self.covariate, time.is_empty()) {
            (None, true) => write!(f, "1{div}"),
            (None, false) => write!(f, "{time}{div}"),
            (Some(c), true) => write!(f, "{c}{div}"),
            (Some(c), false) => write!(f, "{c}*{time}{div}"),
        }
    }
}

impl FromStr for Term {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |why: &str| Error::Spec(format!("design term `{s}`: {why}"));
        let s_trim = s.trim();
        if s_trim.is_empty() {
            return Err(bad("empty"));
        }
        let (body, divisor) = match s_trim.split_once('/') {
            Some((b, d)) => {
                let d: f64 = d.trim().parse().map_err(|_| bad("divisor is not a number"))?;
                if !d.is_finite() || d == 0.0 {
                    return Err(bad("divisor must be finite and non-zero"));
                }
                (b.trim(), d)
            }
            None => (s_trim, 1.0),
        };
        let (cov, time) = match body.split_once('*') {
            Some((c, t)) => (Some(c.trim()), Some(t.trim())),
            None if body == "1" => (None, None),
            None if body == "t" || body.starts_with("t^") => (None, Some(body)),
            None => (Some(body), None),
        };
        let time_power = match time {
            None => 0,
            Some("t") => 1,
            Some(t) => {
                let p = t.strip_prefix("t^").ok_or_else(|| bad("expected `t` or `t^p`"))?;
                let p: u32 = p.trim().parse().map_err(|_| bad("power must be a small integer"))?;
                if p > 8 {
                    return Err(bad("power must be at most 8"));
                }
                p
            }
        };
        let covariate = match cov {
            None => None,
            Some(c) => {
                let valid = !c.is_empty()
                    && c.chars().all(|ch| ch.is_alphanumeric() || ch == '_' || ch == '.')
                    && !c.starts_with(|ch: char| ch.is_ascii_digit());
                if !valid || c == "t" {
                    return Err(bad("covariate names are alphanumeric identifiers"));
                }
                Some(c.to_string())
            }
        };
        Ok(Self {
            covariate,
            time_power,
            divisor,
        })
    }
}

impl Serialize for Term {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Term {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One longitudinal marker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarkerSpec {
    pub name: String,
    #[serde(default)]
    pub link: LinkKind,
    /// Score range `(min, max)`, required by the Beta-CDF link.
    #[serde(default)]
    pub range: Option<(f64, f64)>,
    /// Marker-specific fixed effects.
    #[serde(default)]
    pub terms: Vec<Term>,
}

impl MarkerSpec {
    pub fn identity(name: &str) -> Self {
        Self {
            name: name.to_string(),
            link: LinkKind::Identity,
            range: None,
            terms: Vec::new(),
        }
    }
}

/// Covariates entering each transition intensity.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventCovariates {
    #[serde(default, rename = "01")]
    pub healthy_ill: Vec<String>,
    #[serde(default, rename = "02")]
    pub healthy_dead: Vec<String>,
    #[serde(default, rename = "12")]
    pub ill_dead: Vec<String>,
}

impl EventCovariates {
    pub fn get(&self, tr: Transition) -> &[String] {
        match tr {
            Transition::HealthyIll => &self.healthy_ill,
            Transition::HealthyDead => &self.healthy_dead,
            Transition::IllDead => &self.ill_dead,
        }
    }
}

fn default_nodes() -> usize {
    30
}

fn default_true() -> bool {
    true
}

/// Full declarative description of a joint latent class model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub n_classes: usize,
    #[serde(default)]
    pub event_model: EventModel,
    #[serde(default = "default_true")]
    pub markovian: bool,
    pub markers: Vec<MarkerSpec>,
    #[serde(default)]
    pub time_transform: TimeTransform,
    /// Fixed effects with one coefficient per class.
    pub class_terms: Vec<Term>,
    /// Fixed effects shared by all classes.
    #[serde(default)]
    pub common_terms: Vec<Term>,
    /// Random effects; a sub-vector of the class-specific design.
    pub random_terms: Vec<Term>,
    /// Covariates of the class-membership model (an intercept is always included).
    #[serde(default)]
    pub class_covariates: Vec<String>,
    #[serde(default)]
    pub event_covariates: EventCovariates,
    /// Separate covariate effects per class on the transition intensities.
    #[serde(default)]
    pub class_specific_gamma: bool,
    /// Class-specific proportional factors on the random-effect covariance.
    #[serde(default)]
    pub proportional_variance: bool,
    #[serde(default = "default_nodes")]
    pub quadrature_nodes: usize,
    /// Names of parameters held at their initial value during estimation.
    #[serde(default)]
    pub fixed: Vec<String>,
}

impl ModelSpec {
    /// Two-term linear trend with a common binary covariate, as used in the
    /// simulation study: class-specific intercept and slope, correlated random
    /// intercept and slope, covariate `X` on the marker and on every transition.
    pub fn linear_trend(n_classes: usize, event_model: EventModel, markovian: bool) -> Self {
        Self {
            n_classes,
            event_model,
            markovian,
            markers: vec![MarkerSpec::identity("Y")],
            time_transform: TimeTransform::default(),
            class_terms: vec![Term::intercept(), Term::time()],
            common_terms: vec![Term::covariate("X")],
            random_terms: vec![Term::intercept(), Term::time()],
            class_covariates: Vec::new(),
            event_covariates: EventCovariates {
                healthy_ill: vec!["X".into()],
                healthy_dead: vec!["X".into()],
                ill_dead: if event_model == EventModel::IllnessDeath {
                    vec!["X".into()]
                } else {
                    Vec::new()
                },
            },
            class_specific_gamma: false,
            proportional_variance: false,
            quadrature_nodes: 30,
            fixed: Vec::new(),
        }
    }

    pub fn n_markers(&self) -> usize {
        self.markers.len()
    }

    pub fn transitions(&self) -> &'static [Transition] {
        match self.event_model {
            EventModel::IllnessDeath => &Transition::ALL,
            EventModel::CompetingRisks => &Transition::ALL[..2],
        }
    }

    pub fn has_transition(&self, tr: Transition) -> bool {
        self.transitions().contains(&tr)
    }

    pub fn marker_index(&self, name: &str) -> Option<usize> {
        if let Some(k) = self.markers.iter().position(|m| m.name == name) {
            return Some(k);
        }
        match name.parse::<usize>() {
            Ok(k) if k >= 1 && k <= self.markers.len() => Some(k - 1),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Spec(m));
        if self.n_classes == 0 {
            return err("at least one latent class is required".into());
        }
        if self.markers.is_empty() {
            return err("at least one marker is required".into());
        }
        if self.quadrature_nodes < 2 {
            return err("quadrature_nodes must be at least 2".into());
        }
        if !(self.time_transform.scale.is_finite() && self.time_transform.scale > 0.0)
            || !self.time_transform.offset.is_finite()
        {
            return err("time transform needs a finite positive scale".into());
        }
        if self.class_terms.is_empty() {
            return err("class_terms must contain at least one term".into());
        }
        for t in &self.class_terms {
            if self.common_terms.contains(t) {
                return err(format!("term `{t}` is both class-specific and common"));
            }
        }
        for (i, t) in self.class_terms.iter().enumerate() {
            if self.class_terms[..i].contains(t) {
                return err(format!("class term `{t}` listed twice"));
            }
        }
        for (i, t) in self.common_terms.iter().enumerate() {
            if self.common_terms[..i].contains(t) {
                return err(format!("common term `{t}` listed twice"));
            }
        }
        for m in &self.markers {
            for t in &m.terms {
                if self.class_terms.contains(t) || self.common_terms.contains(t) {
                    return err(format!(
                        "marker-specific term `{t}` of `{}` duplicates a latent-process term",
                        m.name
                    ));
                }
            }
            if m.link == LinkKind::BetaCdf {
                match m.range {
                    Some((lo, hi)) if lo.is_finite() && hi.is_finite() && hi > lo => {}
                    _ => return err(format!("marker `{}` needs a finite range for the Beta link", m.name)),
                }
            }
        }
        for (i, m) in self.markers.iter().enumerate() {
            if self.markers[..i].iter().any(|o| o.name == m.name) {
                return err(format!("marker `{}` listed twice", m.name));
            }
        }
        if self.event_model == EventModel::CompetingRisks && !self.event_covariates.ill_dead.is_empty() {
            return err("the competing-risks model has no 1->2 transition covariates".into());
        }
        Ok(())
    }

    /// Covariate names the observation file must provide.
    pub fn observation_covariates(&self) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        let all = self
            .class_terms
            .iter()
            .chain(&self.common_terms)
            .chain(&self.random_terms)
            .chain(self.markers.iter().flat_map(|m| m.terms.iter()));
        for t in all {
            if let Some(c) = &t.covariate {
                if !names.contains(c) {
                    names.push(c.clone());
                }
            }
        }
        names
    }
}
