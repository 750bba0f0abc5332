//! Post-fit summaries: posterior classification, goodness-of-fit mean curves,
//! class-specific cumulative incidences and conditional trajectories.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::hazards::Transition;
use crate::likelihood::{class_hazards, class_membership_probs, LikelihoodContext};
use crate::longitudinal::{conditional_mean, random_effects_mean};
use crate::params::ParameterSet;
use crate::quadrature::QuadratureRule;
use crate::spec::ModelSpec;

/// Age at which the cumulative incidences start.
pub const INCIDENCE_ORIGIN: f64 = 65.0;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PosteriorTable {
    pub ids: Vec<String>,
    pub probs: Vec<Vec<f64>>,
    /// Zero-based class with the highest posterior probability.
    pub assigned: Vec<usize>,
    /// Row `g`: mean posterior probabilities among subjects assigned to `g`.
    pub class_means: Vec<Vec<f64>>,
    /// Number of subjects assigned to each class.
    pub class_counts: Vec<usize>,
}

pub fn posterior_probs(data: &Dataset, theta: &ParameterSet, spec: &ModelSpec) -> Result<PosteriorTable> {
    let state = LikelihoodContext::new(data, spec)?.evaluate(theta)?;
    let g_n = spec.n_classes;
    let probs: Vec<Vec<f64>> = state.terms.iter().map(|t| t.posterior()).collect();
    let assigned: Vec<usize> = probs
        .iter()
        .map(|p| {
            let mut best = 0;
            for g in 1..p.len() {
                if p[g] > p[best] {
                    best = g;
                }
            }
            best
        })
        .collect();
    let mut class_means = vec![vec![0.0; g_n]; g_n];
    let mut class_counts = vec![0; g_n];
    for (p, &a) in probs.iter().zip(&assigned) {
        class_counts[a] += 1;
        for (m, v) in p.iter().enumerate() {
            class_means[a][m] += v;
        }
    }
    for (row, &n) in class_means.iter_mut().zip(&class_counts) {
        if n > 0 {
            row.iter_mut().for_each(|v| *v /= n as f64);
        }
    }
    Ok(PosteriorTable {
        ids: data.subjects.iter().map(|s| s.id.clone()).collect(),
        probs,
        assigned,
        class_means,
        class_counts,
    })
}

/// Weighted mean curves of one class in one age bin.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GofRow {
    pub class: usize,
    pub marker: String,
    pub age_lo: f64,
    pub age_hi: f64,
    /// Posterior-weighted marginal prediction.
    pub predicted: f64,
    /// Posterior-weighted observed (transformed) value.
    pub observed: f64,
    /// Posterior-weighted prediction given the empirical Bayes random effects.
    pub conditional: f64,
    pub weight: f64,
    pub n_obs: usize,
}

/// Goodness-of-fit weighted means per class and age bin, on the transformed scale.
pub fn gof_weighted_means(
    data: &Dataset,
    theta: &ParameterSet,
    spec: &ModelSpec,
    posterior: &PosteriorTable,
    bin_width: f64,
) -> Result<Vec<GofRow>> {
    if !(bin_width > 0.0) {
        return Err(Error::Domain("bin width must be positive".into()));
    }
    // key: (class, marker, bin) -> (w, w*pred, w*obs, w*cond, n)
    let mut acc: BTreeMap<(usize, usize, i64), (f64, f64, f64, f64, usize)> = BTreeMap::new();
    for (i, s) in data.subjects.iter().enumerate() {
        if s.obs.is_empty() {
            continue;
        }
        let (y, _) = crate::longitudinal::transformed_values(s, theta, spec)?;
        for g in 0..spec.n_classes {
            let w = posterior.probs[i][g];
            let mean = conditional_mean(s, g, theta)?;
            let u = random_effects_mean(s, g, theta, spec)?;
            for (j, o) in s.obs.iter().enumerate() {
                let cond = mean[j] + s.design.random[j].iter().zip(u.iter()).map(|(z, b)| z * b).sum::<f64>();
                let bin = (o.age / bin_width).floor() as i64;
                let e = acc.entry((g, o.marker, bin)).or_default();
                e.0 += w;
                e.1 += w * mean[j];
                e.2 += w * y[j];
                e.3 += w * cond;
                e.4 += 1;
            }
        }
    }
    Ok(acc
        .into_iter()
        .filter(|(_, v)| v.0 > 0.0)
        .map(|((g, k, bin), (w, p, o, c, n))| GofRow {
            class: g + 1,
            marker: spec.markers[k].name.clone(),
            age_lo: bin as f64 * bin_width,
            age_hi: (bin + 1) as f64 * bin_width,
            predicted: p / w,
            observed: o / w,
            conditional: c / w,
            weight: w,
            n_obs: n,
        })
        .collect())
}

/// Covariate values by name, used for prediction.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Profile(pub BTreeMap<String, f64>);

impl Profile {
    pub fn get(&self, name: &str) -> Result<f64> {
        self.0
            .get(name)
            .copied()
            .ok_or_else(|| Error::Spec(format!("profile lacks covariate `{name}`")))
    }

    fn values(&self, names: &[String]) -> Result<Vec<f64>> {
        names.iter().map(|n| self.get(n)).collect()
    }

    fn event_covariates(&self, spec: &ModelSpec) -> Result<[Vec<f64>; 3]> {
        let mut out: [Vec<f64>; 3] = Default::default();
        for tr in Transition::ALL {
            out[tr.index()] = self.values(spec.event_covariates.get(tr))?;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Incidence {
    pub ages: Vec<f64>,
    pub f01: Vec<f64>,
    pub f02: Vec<f64>,
    /// Empty for the competing-risks model.
    pub f12: Vec<f64>,
}

/// Class-specific cumulative incidences from age 65 on a nondecreasing age grid.
pub fn cumulative_incidence(
    theta: &ParameterSet,
    spec: &ModelSpec,
    class: usize,
    profile: &Profile,
    ages: &[f64],
) -> Result<Incidence> {
    if let Some(a) = ages.iter().find(|a| !(**a >= INCIDENCE_ORIGIN)) {
        return Err(Error::Domain(format!("incidence age {a} precedes {INCIDENCE_ORIGIN}")));
    }
    if ages.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Domain("incidence ages must be nondecreasing".into()));
    }
    let h = class_hazards(theta, spec, &profile.event_covariates(spec)?, class);
    let rule = QuadratureRule::gauss_legendre(spec.quadrature_nodes);
    let o = INCIDENCE_ORIGIN;
    let lo = o.ln();
    let s0 = -h.h01.cumulative(lo) - h.h02.cumulative(lo);
    let healthy = |u: f64| (-h.h01.cumulative(u.ln()) - h.h02.cumulative(u.ln()) - s0).exp();
    let f0 = |l: usize, u: f64| {
        let w = if l == 1 { &h.h01 } else { &h.h02 };
        healthy(u) * w.log_intensity(u.ln()).exp()
    };
    let f12 = |u: f64| -> f64 {
        let h12 = h.h12.expect("checked below");
        if spec.markovian {
            (-(h12.cumulative(u.ln()) - h12.cumulative(lo)) + h12.log_intensity(u.ln())).exp()
        } else {
            let d = (u - o).ln();
            (-h12.cumulative(d) + h12.log_intensity(d)).exp()
        }
    };
    let mut out = Incidence {
        ages: ages.to_vec(),
        f01: Vec::with_capacity(ages.len()),
        f02: Vec::with_capacity(ages.len()),
        f12: Vec::new(),
    };
    let (mut c01, mut c02, mut c12, mut prev) = (0.0, 0.0, 0.0, o);
    for &a in ages {
        if a > prev {
            c01 += rule.integrate(prev, a, |u| f0(1, u));
            c02 += rule.integrate(prev, a, |u| f0(2, u));
            if h.h12.is_some() {
                c12 += rule.integrate(prev, a, f12);
            }
            prev = a;
        }
        out.f01.push(c01);
        out.f02.push(c02);
        if h.h12.is_some() {
            out.f12.push(c12);
        }
    }
    Ok(out)
}

/// Event conditioning a predicted trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConditionKind {
    /// Alive and dementia-free at the given age.
    HealthyAlive,
    /// Died dementia-free at the given age.
    DiedDementiaFree,
    /// Dementia onset at the given age.
    DementiaOnset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub kind: ConditionKind,
    pub age: f64,
    pub profile: Profile,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory {
    pub ages: Vec<f64>,
    /// Expected latent marker value.
    pub values: Vec<f64>,
    /// `P(c = g | condition)`.
    pub weights: Vec<f64>,
}

/// Class weights `P(c = g | condition)`.
pub fn condition_weights(theta: &ParameterSet, spec: &ModelSpec, cond: &Condition) -> Result<Vec<f64>> {
    if !(cond.age > 0.0 && cond.age.is_finite()) {
        return Err(Error::Domain(format!("condition age {} outside the hazard support", cond.age)));
    }
    let pi = class_membership_probs(&theta.zeta, &cond.profile.values(&spec.class_covariates)?);
    let covs = cond.profile.event_covariates(spec)?;
    let la = cond.age.ln();
    let mut logw = Vec::with_capacity(spec.n_classes);
    for (g, p) in pi.iter().enumerate() {
        let h = class_hazards(theta, spec, &covs, g);
        let mut v = p.ln() - h.h01.cumulative(la) - h.h02.cumulative(la);
        match cond.kind {
            ConditionKind::HealthyAlive => {}
            ConditionKind::DiedDementiaFree => v += h.h02.log_intensity(la),
            ConditionKind::DementiaOnset => v += h.h01.log_intensity(la),
        }
        logw.push(v);
    }
    let lse = crate::likelihood::log_sum_exp(&logw);
    if !lse.is_finite() {
        return Err(Error::Domain(format!("condition at age {} has zero probability", cond.age)));
    }
    Ok(logw.iter().map(|v| (v - lse).exp()).collect())
}

/// Expected marker value of class `class` at `age`, on the transformed scale.
pub fn class_mean(theta: &ParameterSet, spec: &ModelSpec, class: usize, marker: usize, profile: &Profile, age: f64) -> Result<f64> {
    let t = spec.time_transform.to_time(age);
    let row = |terms: &[crate::spec::Term], beta: &[f64]| -> Result<f64> {
        let mut v = 0.0;
        for (term, b) in terms.iter().zip(beta) {
            let cov = match &term.covariate {
                Some(c) => profile.get(c)?,
                None => 1.0,
            };
            v += b * term.eval(t, cov);
        }
        Ok(v)
    };
    Ok(row(&spec.class_terms, &theta.beta_class[class])?
        + row(&spec.common_terms, &theta.beta_common)?
        + row(&spec.markers[marker].terms, &theta.beta_marker[marker])?)
}

/// Mixture of class mean curves weighted by the posterior given `cond`.
pub fn conditional_trajectory(
    theta: &ParameterSet,
    spec: &ModelSpec,
    cond: &Condition,
    marker: usize,
    ages: &[f64],
) -> Result<Trajectory> {
    let weights = condition_weights(theta, spec, cond)?;
    let mut values = Vec::with_capacity(ages.len());
    for &a in ages {
        let mut v = 0.0;
        for (g, w) in weights.iter().enumerate() {
            v += w * class_mean(theta, spec, g, marker, &cond.profile, a)?;
        }
        values.push(v);
    }
    Ok(Trajectory {
        ages: ages.to_vec(),
        values,
        weights,
    })
}

pub fn write_posterior<W: Write>(table: &PosteriorTable, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let g_n = table.class_means.len();
    let mut header = vec!["id".to_string(), "class".to_string()];
    header.extend((1..=g_n).map(|g| format!("prob{g}")));
    out.write_record(&header)?;
    for ((id, p), a) in table.ids.iter().zip(&table.probs).zip(&table.assigned) {
        let mut row = vec![id.clone(), (a + 1).to_string()];
        row.extend(p.iter().map(|v| v.to_string()));
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

/// One row per (class, marker, bin, statistic).
pub fn write_gof<W: Write>(rows: &[GofRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["class", "marker", "age_lo", "age_hi", "statistic", "value", "weight", "n_obs"])?;
    for r in rows {
        for (stat, v) in [("predicted", r.predicted), ("observed", r.observed), ("conditional", r.conditional)] {
            out.write_record([
                r.class.to_string(),
                r.marker.clone(),
                r.age_lo.to_string(),
                r.age_hi.to_string(),
                stat.to_string(),
                v.to_string(),
                r.weight.to_string(),
                r.n_obs.to_string(),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Tidy incidence table: one row per (class, transition, age).
pub fn write_incidence<W: Write>(curves: &[(usize, Incidence)], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["class", "transition", "age", "value"])?;
    for (class, inc) in curves {
        for (label, vals) in [("01", &inc.f01), ("02", &inc.f02), ("12", &inc.f12)] {
            for (a, v) in inc.ages.iter().zip(vals.iter()) {
                out.write_record([(class + 1).to_string(), label.to_string(), a.to_string(), v.to_string()])?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// Tidy trajectory table: one row per (scenario, age).
pub fn write_trajectories<W: Write>(curves: &[(String, Trajectory)], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["scenario", "age", "value"])?;
    for (name, tr) in curves {
        for (a, v) in tr.ages.iter().zip(&tr.values) {
            out.write_record([name.clone(), a.to_string(), v.to_string()])?;
        }
    }
    out.flush()?;
    Ok(())
}
