//! Mixture log-likelihood of the joint model.
//!
//! Every subject contributes `log sum_g pi_g f_g P_g - log sum_g pi_g S_g(T0)`.
//! [`LikelihoodContext`] keeps the per-(subject, class) terms of the last full
//! evaluation so that finite-difference probes only recompute the terms the
//! perturbed coordinates touch.

use rayon::prelude::*;

use crate::data::{Dataset, Pattern, SubjectRecord};
use crate::error::{Error, Result};
use crate::hazards::{LogWeibull, Transition};
use crate::longitudinal;
use crate::params::{ParamKind, ParamLayout, ParameterSet};
use crate::quadrature::QuadratureRule;
use crate::spec::{EventModel, ModelSpec};

/// Class probabilities of a multinomial logit with the last class as reference.
pub fn class_membership_probs(zeta: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    log_membership(zeta, x).into_iter().map(f64::exp).collect()
}

pub(crate) fn log_membership(zeta: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    let mut eta: Vec<f64> = zeta
        .iter()
        .map(|z| z[0] + z[1..].iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
        .collect();
    eta.push(0.0);
    let lse = log_sum_exp(&eta);
    eta.iter().map(|e| e - lse).collect()
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY || m.is_nan() || m == f64::INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Class-specific hazards of one subject.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Hazards {
    pub h01: LogWeibull,
    pub h02: LogWeibull,
    pub h12: Option<LogWeibull>,
}

pub(crate) fn weibull(theta: &ParameterSet, tr_pos: usize, class: usize, lp: f64) -> LogWeibull {
    let shape = theta.shape(tr_pos, class);
    LogWeibull {
        shape,
        log_shape: shape.ln(),
        log_scale: theta.scale(tr_pos, class).ln(),
        lp,
    }
}

pub(crate) fn class_hazards(theta: &ParameterSet, spec: &ModelSpec, event_covs: &[Vec<f64>; 3], class: usize) -> Hazards {
    let make = |tr: Transition| -> Option<LogWeibull> {
        let pos = spec.transitions().iter().position(|&t| t == tr)?;
        let lp = theta
            .gamma_for(pos, class)
            .iter()
            .zip(&event_covs[tr.index()])
            .map(|(g, w)| g * w)
            .sum();
        Some(weibull(theta, pos, class, lp))
    };
    Hazards {
        h01: make(Transition::HealthyIll).expect("01 always present"),
        h02: make(Transition::HealthyDead).expect("02 always present"),
        h12: make(Transition::IllDead),
    }
}

#[derive(Debug, Clone, Copy)]
struct Node {
    log_u: f64,
    /// `ln(T - u)`, the dementia duration at the end of follow-up.
    log_dur: f64,
    log_w: f64,
}

/// Event data of one subject with its quadrature nodes laid out in log form.
#[derive(Debug, Clone)]
pub(crate) struct PreparedEvents {
    pattern: Pattern,
    log_t0: f64,
    log_t: f64,
    delta_a: bool,
    delta_d: bool,
    /// Exact onset (`L = R`) for diagnosed subjects.
    exact: Option<Node>,
    nodes: Vec<Node>,
}

impl PreparedEvents {
    pub fn new(s: &SubjectRecord, rule: &QuadratureRule) -> Self {
        let pattern = s.pattern();
        let node = |u: f64, log_w: f64| Node {
            log_u: u.ln(),
            log_dur: (s.t_end - u).max(0.0).ln(),
            log_w,
        };
        let (exact, nodes) = match pattern {
            Pattern::DementedDied | Pattern::DementedCensored if s.l == s.r => (Some(node(s.l, 0.0)), Vec::new()),
            Pattern::DementedDied | Pattern::DementedCensored => (
                None,
                rule.mapped(s.l, s.r).map(|(u, w)| node(u, w.ln())).collect(),
            ),
            Pattern::UnknownCensored | Pattern::UnknownDied => (
                None,
                rule.mapped(s.l, s.t_end).map(|(u, w)| node(u, w.ln())).collect(),
            ),
            _ => (None, Vec::new()),
        };
        Self {
            pattern,
            log_t0: s.t0.ln(),
            log_t: s.t_end.ln(),
            delta_a: s.delta_a,
            delta_d: s.delta_d,
            exact,
            nodes,
        }
    }
}

/// `-A01(T0) - A02(T0)`, the log-probability of being healthy at entry.
fn log_entry(p: &PreparedEvents, h: &Hazards) -> f64 {
    -h.h01.cumulative(p.log_t0) - h.h02.cumulative(p.log_t0)
}

fn log_healthy(p: &PreparedEvents, h: &Hazards) -> f64 {
    let mut v = -h.h01.cumulative(p.log_t) - h.h02.cumulative(p.log_t);
    if p.delta_d {
        v += h.h02.log_intensity(p.log_t);
    }
    v
}

/// Log of the integrand "healthy until u, demented at u, alive (or dying) at T".
fn log_path(p: &PreparedEvents, h: &Hazards, h12: &LogWeibull, markovian: bool, n: &Node) -> f64 {
    let head = -h.h01.cumulative(n.log_u) - h.h02.cumulative(n.log_u) + h.h01.log_intensity(n.log_u);
    let tail = if markovian {
        let mut t = -(h12.cumulative(p.log_t) - h12.cumulative(n.log_u));
        if p.delta_d {
            t += h12.log_intensity(p.log_t);
        }
        t
    } else if n.log_dur == f64::NEG_INFINITY {
        if !p.delta_d {
            0.0
        } else if h12.shape == 1.0 {
            h12.log_shape + h12.log_scale + h12.lp
        } else if h12.shape > 1.0 {
            f64::NEG_INFINITY
        } else {
            f64::INFINITY
        }
    } else {
        let mut t = -h12.cumulative(n.log_dur);
        if p.delta_d {
            t += h12.log_intensity(n.log_dur);
        }
        t
    };
    head + tail
}

fn log_integral(p: &PreparedEvents, h: &Hazards, h12: &LogWeibull, markovian: bool) -> f64 {
    let terms: Vec<f64> = p
        .nodes
        .iter()
        .map(|n| n.log_w + log_path(p, h, h12, markovian, n))
        .collect();
    log_sum_exp(&terms)
}

/// Log-probability (or log-density) of the observed event history in one class.
pub(crate) fn log_event(p: &PreparedEvents, h: &Hazards, event_model: EventModel, markovian: bool) -> f64 {
    if event_model == EventModel::CompetingRisks {
        let mut v = -h.h01.cumulative(p.log_t) - h.h02.cumulative(p.log_t);
        if p.delta_a {
            v += h.h01.log_intensity(p.log_t);
        }
        if p.delta_d {
            v += h.h02.log_intensity(p.log_t);
        }
        return v;
    }
    let h12 = h.h12.as_ref().expect("illness-death model has a 1->2 hazard");
    match p.pattern {
        Pattern::DementedDied | Pattern::DementedCensored => match &p.exact {
            Some(n) => log_path(p, h, h12, markovian, n),
            None => log_integral(p, h, h12, markovian),
        },
        Pattern::HealthyDied | Pattern::HealthyCensored => log_healthy(p, h),
        Pattern::UnknownCensored | Pattern::UnknownDied => {
            log_sum_exp(&[log_healthy(p, h), log_integral(p, h, h12, markovian)])
        }
    }
}

fn single_class_event(subject: &SubjectRecord, class: usize, theta: &ParameterSet, spec: &ModelSpec) -> f64 {
    let rule = QuadratureRule::gauss_legendre(spec.quadrature_nodes);
    let p = PreparedEvents::new(subject, &rule);
    let h = class_hazards(theta, spec, &subject.event_covariates, class);
    log_event(&p, &h, spec.event_model, spec.markovian).exp()
}

fn require(subject: &SubjectRecord, ok: &[Pattern], what: &str) -> Result<()> {
    if ok.contains(&subject.pattern()) {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "subject {} has pattern {}, not a {what} pattern",
            subject.id,
            subject.pattern().number()
        )))
    }
}

/// `P^d`: diagnosed subjects (patterns 1 and 2).
pub fn contribution_demented(subject: &SubjectRecord, class: usize, theta: &ParameterSet, spec: &ModelSpec) -> Result<f64> {
    require(subject, &[Pattern::DementedDied, Pattern::DementedCensored], "diagnosed")?;
    Ok(single_class_event(subject, class, theta, spec))
}

/// `P^h`: seen healthy at the end of follow-up (patterns 3 and 4).
pub fn contribution_healthy(subject: &SubjectRecord, class: usize, theta: &ParameterSet, spec: &ModelSpec) -> Result<f64> {
    require(subject, &[Pattern::HealthyDied, Pattern::HealthyCensored], "healthy-at-end")?;
    Ok(single_class_event(subject, class, theta, spec))
}

/// `P^u`: dementia status unknown at the end of follow-up (patterns 5 and 6).
pub fn contribution_unknown(subject: &SubjectRecord, class: usize, theta: &ParameterSet, spec: &ModelSpec) -> Result<f64> {
    require(subject, &[Pattern::UnknownCensored, Pattern::UnknownDied], "unknown-status")?;
    Ok(single_class_event(subject, class, theta, spec))
}

/// Per-class log terms of one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectTerms {
    pub log_pi: Vec<f64>,
    /// Marker log-density including the link Jacobian.
    pub log_f: Vec<f64>,
    /// Event-history log-probability.
    pub log_p: Vec<f64>,
    /// Log-probability of being healthy at entry.
    pub log_entry: Vec<f64>,
}

impl SubjectTerms {
    /// The subject's log-likelihood contribution.
    pub fn total(&self) -> f64 {
        let g_n = self.log_pi.len();
        let num: Vec<f64> = (0..g_n).map(|g| self.log_pi[g] + self.log_f[g] + self.log_p[g]).collect();
        let den: Vec<f64> = (0..g_n).map(|g| self.log_pi[g] + self.log_entry[g]).collect();
        log_sum_exp(&num) - log_sum_exp(&den)
    }

    /// Posterior class probabilities given markers and events.
    pub fn posterior(&self) -> Vec<f64> {
        let g_n = self.log_pi.len();
        let num: Vec<f64> = (0..g_n).map(|g| self.log_pi[g] + self.log_f[g] + self.log_p[g]).collect();
        let lse = log_sum_exp(&num);
        num.iter().map(|x| (x - lse).exp()).collect()
    }
}

/// Which terms a change of coordinates invalidates.
#[derive(Debug, Clone)]
struct Dirty {
    pi: bool,
    f: Vec<bool>,
    p: Vec<bool>,
    entry: Vec<bool>,
}

impl Dirty {
    fn all(g_n: usize) -> Self {
        Self {
            pi: true,
            f: vec![true; g_n],
            p: vec![true; g_n],
            entry: vec![true; g_n],
        }
    }

    fn from_changes(layout: &ParamLayout, changed: &[usize], g_n: usize) -> Self {
        let mut d = Self {
            pi: false,
            f: vec![false; g_n],
            p: vec![false; g_n],
            entry: vec![false; g_n],
        };
        for &c in changed {
            match layout.params[c].kind {
                ParamKind::Membership => d.pi = true,
                ParamKind::Weibull { transition, class } => {
                    d.p[class] = true;
                    d.entry[class] |= transition != Transition::IllDead;
                }
                ParamKind::Gamma { transition, class } => {
                    let classes: Vec<usize> = class.map_or_else(|| (0..g_n).collect(), |g| vec![g]);
                    for g in classes {
                        d.p[g] = true;
                        d.entry[g] |= transition != Transition::IllDead;
                    }
                }
                ParamKind::BetaClass { class } | ParamKind::SigmaG { class } => d.f[class] = true,
                ParamKind::Longitudinal | ParamKind::Link { .. } => d.f.iter_mut().for_each(|x| *x = true),
            }
        }
        d
    }
}

/// Result of a full evaluation, reusable as the base point of probes.
#[derive(Debug, Clone)]
pub struct EvalState {
    pub theta: ParameterSet,
    pub terms: Vec<SubjectTerms>,
    pub value: f64,
}

/// A dataset bound to a model specification, with quadrature nodes prepared.
pub struct LikelihoodContext<'a> {
    pub spec: &'a ModelSpec,
    pub data: &'a Dataset,
    pub layout: ParamLayout,
    events: Vec<PreparedEvents>,
    /// Summation order: subjects sorted by id, so totals do not depend on row order.
    order: Vec<usize>,
}

impl<'a> LikelihoodContext<'a> {
    pub fn new(data: &'a Dataset, spec: &'a ModelSpec) -> Result<Self> {
        spec.validate()?;
        let rule = QuadratureRule::gauss_legendre(spec.quadrature_nodes);
        let events = data.subjects.iter().map(|s| PreparedEvents::new(s, &rule)).collect();
        let mut order: Vec<usize> = (0..data.subjects.len()).collect();
        order.sort_by(|&a, &b| data.subjects[a].id.cmp(&data.subjects[b].id));
        Ok(Self {
            spec,
            data,
            layout: ParamLayout::new(spec),
            events,
            order,
        })
    }

    fn update_terms(&self, i: usize, theta: &ParameterSet, dirty: &Dirty, terms: &mut SubjectTerms) -> Result<()> {
        let s = &self.data.subjects[i];
        let spec = self.spec;
        if dirty.pi {
            terms.log_pi = log_membership(&theta.zeta, &s.class_covariates);
        }
        if dirty.f.iter().any(|&x| x) {
            if dirty.f.iter().all(|&x| x) {
                terms.log_f = longitudinal::log_densities(s, theta, spec)?;
            } else {
                for (g, _) in dirty.f.iter().enumerate().filter(|(_, &x)| x) {
                    terms.log_f[g] = longitudinal::log_density(s, g, theta, spec)?;
                }
            }
        }
        for g in 0..spec.n_classes {
            if dirty.p[g] || dirty.entry[g] {
                let h = class_hazards(theta, spec, &s.event_covariates, g);
                if dirty.p[g] {
                    terms.log_p[g] = log_event(&self.events[i], &h, spec.event_model, spec.markovian);
                }
                if dirty.entry[g] {
                    terms.log_entry[g] = log_entry(&self.events[i], &h);
                }
            }
        }
        Ok(())
    }

    fn checked_total(&self, i: usize, terms: &SubjectTerms) -> Result<f64> {
        let v = terms.total();
        if v.is_finite() {
            return Ok(v);
        }
        let g_n = terms.log_pi.len();
        let class = (0..g_n)
            .find(|&g| {
                !(terms.log_f[g].is_finite() && terms.log_p[g].is_finite() && terms.log_entry[g].is_finite())
            })
            .unwrap_or(0);
        Err(Error::NonFinite {
            id: self.data.subjects[i].id.clone(),
            class: class + 1,
            msg: format!(
                "log f = {}, log P = {}, log S(T0) = {}",
                terms.log_f[class], terms.log_p[class], terms.log_entry[class]
            ),
        })
    }

    fn empty_terms(&self) -> SubjectTerms {
        let g_n = self.spec.n_classes;
        SubjectTerms {
            log_pi: vec![0.0; g_n],
            log_f: vec![0.0; g_n],
            log_p: vec![0.0; g_n],
            log_entry: vec![0.0; g_n],
        }
    }

    /// Evaluates every term; subjects run in parallel and are summed in id order.
    pub fn evaluate(&self, theta: &ParameterSet) -> Result<EvalState> {
        theta.check_shape(self.spec)?;
        let dirty = Dirty::all(self.spec.n_classes);
        let terms: Vec<SubjectTerms> = (0..self.data.subjects.len())
            .into_par_iter()
            .map(|i| {
                let mut t = self.empty_terms();
                self.update_terms(i, theta, &dirty, &mut t)?;
                Ok(t)
            })
            .collect::<Result<_>>()?;
        let mut value = 0.0;
        for &i in &self.order {
            value += self.checked_total(i, &terms[i])?;
        }
        Ok(EvalState {
            theta: theta.clone(),
            terms,
            value,
        })
    }

    pub fn log_likelihood(&self, theta: &ParameterSet) -> Result<f64> {
        Ok(self.evaluate(theta)?.value)
    }

    /// Log-likelihood at `theta`, which differs from `base.theta` only in the
    /// flat coordinates listed in `changed`.
    pub fn probe(&self, base: &EvalState, theta: &ParameterSet, changed: &[usize]) -> Result<f64> {
        let dirty = Dirty::from_changes(&self.layout, changed, self.spec.n_classes);
        let mut value = 0.0;
        let mut scratch = self.empty_terms();
        for &i in &self.order {
            scratch.clone_from(&base.terms[i]);
            self.update_terms(i, theta, &dirty, &mut scratch)?;
            value += self.checked_total(i, &scratch)?;
        }
        Ok(value)
    }
}

/// Log-likelihood of the illness-death (or competing-risks) joint model.
pub fn log_likelihood(data: &Dataset, theta: &ParameterSet, spec: &ModelSpec) -> Result<f64> {
    LikelihoodContext::new(data, spec)?.log_likelihood(theta)
}

/// Log-likelihood of the naive competing-risks joint model on first-event data.
pub fn log_likelihood_competing(data: &Dataset, theta: &ParameterSet, spec: &ModelSpec) -> Result<f64> {
    if spec.event_model != EventModel::CompetingRisks {
        return Err(Error::Spec("competing-risks likelihood needs event_model = competing-risks".into()));
    }
    log_likelihood(data, theta, spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::WeibullRoots;
    use proptest::prelude::*;

    fn expo_theta(spec: &ModelSpec, rates: [f64; 3]) -> ParameterSet {
        let mut th = ParameterSet::zeros(spec);
        for (pos, _) in spec.transitions().iter().enumerate() {
            for g in 0..spec.n_classes {
                th.weibull[pos][g] = WeibullRoots::from_natural(1.0, rates[pos]);
            }
        }
        th
    }

    fn subject(l: f64, r: Option<f64>, t: f64, dd: bool) -> SubjectRecord {
        let mut s = SubjectRecord::events_only("s", 66.0, l, r, t, dd);
        s.event_covariates = [vec![0.0], vec![0.0], vec![0.0]];
        s
    }

    fn expo_dem(a: [f64; 3], l: f64, r: f64, t: f64, dd: bool) -> f64 {
        let c = a[0] + a[1] - a[2];
        let d = if dd { a[2] } else { 1.0 };
        a[0] * d * (-a[2] * t).exp() * ((-c * l).exp() - (-c * r).exp()) / c
    }

    #[test]
    fn membership_reference_and_shift() {
        assert_eq!(class_membership_probs(&[vec![0.0]], &[]), vec![0.5, 0.5]);
        assert_eq!(class_membership_probs(&[], &[]), vec![1.0]);
        let a = class_membership_probs(&[vec![0.3, 1.0], vec![-0.2, 0.5]], &[2.0]);
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn demented_matches_exponential_closed_form() {
        let spec = ModelSpec::linear_trend(1, EventModel::IllnessDeath, true);
        let rates = [0.02, 0.05, 0.11];
        let th = expo_theta(&spec, rates);
        for dd in [false, true] {
            let s = subject(70.0, Some(72.0), 75.0, dd);
            let got = contribution_demented(&s, 0, &th, &spec).unwrap();
            let want = expo_dem(rates, 70.0, 72.0, 75.0, dd);
            assert!((got - want).abs() < 1e-8 * want.max(1e-300), "{got} {want}");
            let bound = (-(rates[0] + rates[1]) * 70.0_f64).exp();
            assert!(got <= bound);
        }
    }

    #[test]
    fn exact_onset_uses_density() {
        let spec = ModelSpec::linear_trend(1, EventModel::IllnessDeath, true);
        let rates = [0.02, 0.05, 0.11];
        let th = expo_theta(&spec, rates);
        let s = subject(70.0, Some(70.0), 75.0, true);
        let want = (-(rates[0] + rates[1]) * 70.0).exp() * rates[0] * (-rates[2] * 5.0).exp() * rates[2];
        let got = contribution_demented(&s, 0, &th, &spec).unwrap();
        assert!((got / want - 1.0).abs() < 1e-12);
    }

    #[test]
    fn healthy_and_unknown_closed_forms() {
        let spec = ModelSpec::linear_trend(1, EventModel::IllnessDeath, true);
        let rates = [0.02, 0.05, 0.11];
        let th = expo_theta(&spec, rates);
        let h = contribution_healthy(&subject(80.0, None, 80.0, false), 0, &th, &spec).unwrap();
        assert!((h - (-0.07 * 80.0_f64).exp()).abs() < 1e-15);
        let hd = contribution_healthy(&subject(80.0, None, 80.0, true), 0, &th, &spec).unwrap();
        assert!((hd - 0.05 * (-0.07 * 80.0_f64).exp()).abs() < 1e-15);
        for dd in [false, true] {
            let s = subject(74.0, None, 79.0, dd);
            let u = contribution_unknown(&s, 0, &th, &spec).unwrap();
            let healthy = (-0.07 * 79.0_f64).exp() * if dd { 0.05 } else { 1.0 };
            let want = healthy + expo_dem(rates, 74.0, 79.0, 79.0, dd);
            assert!((u - want).abs() < 1e-8 * want);
            assert!(u >= healthy);
        }
    }

    #[test]
    fn pattern_mismatch_is_rejected() {
        let spec = ModelSpec::linear_trend(1, EventModel::IllnessDeath, true);
        let th = expo_theta(&spec, [0.02, 0.05, 0.11]);
        assert!(contribution_demented(&subject(80.0, None, 80.0, false), 0, &th, &spec).is_err());
        assert!(contribution_unknown(&subject(80.0, None, 80.0, false), 0, &th, &spec).is_err());
    }

    #[test]
    fn semi_markov_duration_zero_boundary() {
        let spec = ModelSpec::linear_trend(1, EventModel::IllnessDeath, false);
        let th = expo_theta(&spec, [0.02, 0.05, 0.11]);
        let s = subject(75.0, Some(75.0), 75.0, false);
        let got = contribution_demented(&s, 0, &th, &spec).unwrap();
        assert!((got - 0.02 * (-0.07 * 75.0_f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn competing_factors() {
        let spec = ModelSpec::linear_trend(1, EventModel::CompetingRisks, true);
        let th = expo_theta(&spec, [0.02, 0.05, 0.0]);
        let rule = QuadratureRule::gauss_legendre(5);
        let h = |s: &SubjectRecord| {
            let p = PreparedEvents::new(s, &rule);
            log_event(&p, &class_hazards(&th, &spec, &s.event_covariates, 0), spec.event_model, true).exp()
        };
        let cens = subject(78.0, None, 78.0, false);
        assert!((h(&cens) - (-0.07 * 78.0_f64).exp()).abs() < 1e-15);
        let dem = subject(78.0, Some(78.0), 78.0, false);
        assert!((h(&dem) - 0.02 * (-0.07 * 78.0_f64).exp()).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn unknown_at_least_healthy(l in 66.0f64..90.0, gap in 0.0f64..10.0, dd in any::<bool>(),
                                    s1 in 1.5f64..4.0, s2 in 0.08f64..0.13) {
            let spec = ModelSpec::linear_trend(1, EventModel::IllnessDeath, true);
            let mut th = ParameterSet::zeros(&spec);
            for pos in 0..3 {
                th.weibull[pos][0] = WeibullRoots::from_natural(s1, s2);
            }
            let t = l + gap;
            let rule = QuadratureRule::gauss_legendre(spec.quadrature_nodes);
            let log_p = |s: &SubjectRecord| {
                let p = PreparedEvents::new(s, &rule);
                log_event(&p, &class_hazards(&th, &spec, &s.event_covariates, 0), spec.event_model, true)
            };
            let u = log_p(&subject(l, None, t, dd));
            let h = log_p(&subject(t, None, t, dd));
            prop_assert!(h.is_finite());
            prop_assert!(u >= h);
            if !dd {
                prop_assert!(h <= 0.0 && u <= 1e-12);
            }
        }
    }
}
