//! Cohort simulation under the joint latent class illness-death model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Observation, SubjectRecord};
use crate::error::{Error, Result};
use crate::hazards::Transition;
use crate::likelihood::class_membership_probs;
use crate::params::{ParameterSet, WeibullRoots};
use crate::spec::{EventModel, ModelSpec};

/// Deterministic generator for replicate `stream` of a run seeded with `seed`.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Two-class truth used for the simulation study.
///
/// Weibull entries are the square-root coordinates, as printed.
/// `printed = false` nudges the class-2 death scale from 0.10 to 0.1025, which
/// still rounds to the printed value and restores the reported cohort composition.
pub fn table1_truth(spec: &ModelSpec, printed: bool) -> ParameterSet {
    let mut t = ParameterSet::zeros(spec);
    let w = |shape: f64, scale: f64| WeibullRoots { shape, scale };
    let c2_02 = if printed { 0.10 } else { 0.1025 };
    t.zeta = vec![vec![0.0]];
    t.weibull[0] = vec![w(3.2, 0.11), w(3.5, 0.10)];
    t.weibull[1] = vec![w(3.5, 0.11), w(3.4, c2_02)];
    t.gamma[0] = vec![vec![0.02]];
    t.gamma[1] = vec![vec![0.67]];
    if spec.event_model == EventModel::IllnessDeath {
        t.weibull[2] = vec![w(2.78, 0.12), w(3.14, 0.11)];
        t.gamma[2] = vec![vec![0.47]];
    }
    t.beta_class = vec![vec![30.22, -5.76], vec![32.96, -3.53]];
    t.beta_common = vec![0.08];
    t.chol = vec![4.93, -1.15, 1.46];
    t.sigma_e = vec![3.47_f64.sqrt()];
    t
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationDesign {
    pub n_subjects: usize,
    pub visit_interval: f64,
    #[serde(default = "default_follow_up")]
    pub follow_up: f64,
    #[serde(default = "default_entry")]
    pub entry_age: (f64, f64),
    #[serde(default = "default_prob")]
    pub covariate_prob: f64,
    pub spec: ModelSpec,
    pub truth: ParameterSet,
    #[serde(default)]
    pub seed: u64,
}

fn default_follow_up() -> f64 {
    20.0
}

fn default_entry() -> (f64, f64) {
    (65.0, 85.0)
}

fn default_prob() -> f64 {
    0.5
}

impl SimulationDesign {
    /// The two-class design with the calibrated truth.
    pub fn table1(visit_interval: f64, n_subjects: usize, markovian: bool, seed: u64) -> Self {
        Self::build(visit_interval, n_subjects, markovian, seed, false)
    }

    /// The two-class design with every truth value exactly as printed.
    pub fn table1_printed(visit_interval: f64, n_subjects: usize, markovian: bool, seed: u64) -> Self {
        Self::build(visit_interval, n_subjects, markovian, seed, true)
    }

    fn build(visit_interval: f64, n_subjects: usize, markovian: bool, seed: u64, printed: bool) -> Self {
        let spec = ModelSpec::linear_trend(2, EventModel::IllnessDeath, markovian);
        let truth = table1_truth(&spec, printed);
        Self {
            n_subjects,
            visit_interval,
            follow_up: default_follow_up(),
            entry_age: default_entry(),
            covariate_prob: default_prob(),
            spec,
            truth,
            seed,
        }
    }

    /// Looks up a named design (`table1` or `table1-printed`).
    pub fn named(name: &str, visit_interval: f64, n_subjects: usize, markovian: bool, seed: u64) -> Result<Self> {
        match name {
            "table1" => Ok(Self::table1(visit_interval, n_subjects, markovian, seed)),
            "table1-printed" => Ok(Self::table1_printed(visit_interval, n_subjects, markovian, seed)),
            other => Err(Error::Spec(format!("unknown design `{other}` (expected table1 or table1-printed)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        self.truth.check_shape(&self.spec)?;
        let ok = self.visit_interval > 0.0
            && self.follow_up > 0.0
            && self.entry_age.0 > 0.0
            && self.entry_age.0 <= self.entry_age.1
            && (0.0..=1.0).contains(&self.covariate_prob);
        if !ok {
            return Err(Error::Spec("simulation design has invalid visit, entry or covariate settings".into()));
        }
        if self.spec.event_model != EventModel::IllnessDeath {
            return Err(Error::Spec("simulation needs an illness-death specification".into()));
        }
        let only_x = |v: &[String]| v.iter().all(|c| c == "X");
        let terms_ok = self
            .spec
            .class_terms
            .iter()
            .chain(&self.spec.common_terms)
            .chain(&self.spec.random_terms)
            .chain(self.spec.markers.iter().flat_map(|m| &m.terms))
            .all(|t| t.covariate.as_deref().is_none_or(|c| c == "X"));
        if !(only_x(&self.spec.class_covariates)
            && Transition::ALL.iter().all(|&tr| only_x(self.spec.event_covariates.get(tr)))
            && terms_ok)
        {
            return Err(Error::Spec("simulation supports the single binary covariate X only".into()));
        }
        if self.spec.markers.iter().any(|m| m.link != crate::spec::LinkKind::Identity) {
            return Err(Error::Spec("simulation generates identity-link markers only".into()));
        }
        Ok(())
    }
}

/// Inverse of `A(t) = (scale t)^shape e^lp`.
fn invert_cumulative(a: f64, shape: f64, scale: f64, lp: f64) -> f64 {
    (a * (-lp).exp()).powf(1.0 / shape) / scale
}

fn linear_predictor(truth: &ParameterSet, spec: &ModelSpec, tr_pos: usize, class: usize, x: f64) -> f64 {
    let tr = spec.transitions()[tr_pos];
    let n = spec.event_covariates.get(tr).len();
    truth.gamma_for(tr_pos, class).iter().take(n).map(|g| g * x).sum()
}

fn exp1<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    -(1.0 - rng.random::<f64>()).ln()
}

/// Latent dementia onset and death ages of one subject, ignoring selection.
///
/// Returns `(t_dem, t_death)` with `t_dem = +inf` when death comes first.
pub fn draw_event_times<R: Rng + ?Sized>(
    class: usize,
    x: f64,
    truth: &ParameterSet,
    spec: &ModelSpec,
    rng: &mut R,
) -> (f64, f64) {
    let (t01, t02) = draw_first(class, x, truth, spec, rng);
    complete_history(class, x, truth, spec, t01, t02, rng)
}

fn draw_first<R: Rng + ?Sized>(class: usize, x: f64, truth: &ParameterSet, spec: &ModelSpec, rng: &mut R) -> (f64, f64) {
    let draw = |pos: usize, rng: &mut R| {
        invert_cumulative(
            exp1(rng),
            truth.shape(pos, class),
            truth.scale(pos, class),
            linear_predictor(truth, spec, pos, class, x),
        )
    };
    let t01 = draw(0, rng);
    let t02 = draw(1, rng);
    (t01, t02)
}

fn complete_history<R: Rng + ?Sized>(
    class: usize,
    x: f64,
    truth: &ParameterSet,
    spec: &ModelSpec,
    t01: f64,
    t02: f64,
    rng: &mut R,
) -> (f64, f64) {
    if t02 <= t01 {
        return (f64::INFINITY, t02);
    }
    let (shape, scale) = (truth.shape(2, class), truth.scale(2, class));
    let lp = linear_predictor(truth, spec, 2, class, x);
    let e = exp1(rng);
    let death = if spec.markovian {
        let a_onset = (scale * t01).powf(shape) * lp.exp();
        invert_cumulative(a_onset + e, shape, scale, lp)
    } else {
        t01 + invert_cumulative(e, shape, scale, lp)
    };
    (t01, death)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub share: f64,
    pub demented: f64,
    pub died_undiagnosed: f64,
    pub died_after_diagnosis: f64,
}

/// Observed event-pattern proportions and class composition of a dataset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub n_subjects: usize,
    pub demented: f64,
    pub died_undiagnosed: f64,
    pub died_after_diagnosis: f64,
    /// Shares of patterns 1 to 6.
    pub patterns: [f64; 6],
    /// Mean `R - L` among diagnosed subjects.
    pub mean_censoring_width: f64,
    pub mean_observations: f64,
    /// Per true class; empty when classes are unknown.
    pub classes: Vec<ClassSummary>,
}

impl DatasetSummary {
    pub fn new(data: &Dataset, classes: Option<(&[usize], usize)>) -> Self {
        let n = data.len();
        let nf = n.max(1) as f64;
        let frac = |f: &dyn Fn(&SubjectRecord) -> bool, subset: &dyn Fn(usize) -> bool| -> (f64, usize) {
            let (mut hit, mut total) = (0usize, 0usize);
            for (i, s) in data.subjects.iter().enumerate() {
                if subset(i) {
                    total += 1;
                    hit += usize::from(f(s));
                }
            }
            (hit as f64 / total.max(1) as f64, total)
        };
        let dem = |s: &SubjectRecord| s.delta_a;
        let dnd = |s: &SubjectRecord| !s.delta_a && s.delta_d;
        let dad = |s: &SubjectRecord| s.delta_a && s.delta_d;
        let all = |_: usize| true;
        let counts = data.pattern_counts();
        let diagnosed: Vec<f64> = data.subjects.iter().filter(|s| s.delta_a).map(|s| s.r - s.l).collect();
        let class_rows = match classes {
            Some((labels, g_n)) => (0..g_n)
                .map(|g| {
                    let inside = |i: usize| labels[i] == g;
                    let (d, total) = frac(&dem, &inside);
                    ClassSummary {
                        share: total as f64 / nf,
                        demented: d,
                        died_undiagnosed: frac(&dnd, &inside).0,
                        died_after_diagnosis: frac(&dad, &inside).0,
                    }
                })
                .collect(),
            None => Vec::new(),
        };
        Self {
            n_subjects: n,
            demented: frac(&dem, &all).0,
            died_undiagnosed: frac(&dnd, &all).0,
            died_after_diagnosis: frac(&dad, &all).0,
            patterns: counts.map(|c| c as f64 / nf),
            mean_censoring_width: diagnosed.iter().sum::<f64>() / diagnosed.len().max(1) as f64,
            mean_observations: data.subjects.iter().map(|s| s.obs.len()).sum::<usize>() as f64 / nf,
            classes: class_rows,
        }
    }
}

/// A generated cohort with its latent class labels.
#[derive(Debug, Clone)]
pub struct Simulated {
    pub data: Dataset,
    /// Zero-based true class of each subject.
    pub classes: Vec<usize>,
    pub summary: DatasetSummary,
}

/// Generates one cohort from stream 0 of `design.seed`.
pub fn generate_dataset(design: &SimulationDesign) -> Result<Simulated> {
    generate_replicate(design, 0)
}

/// Generates the cohort of replicate `stream`.
pub fn generate_replicate(design: &SimulationDesign, stream: u64) -> Result<Simulated> {
    design.validate()?;
    let spec = &design.spec;
    let truth = &design.truth;
    let mut rng = rng_for(design.seed, stream);
    let pi = class_membership_probs(&truth.zeta, &[]);
    let q = spec.random_terms.len();
    let u_factor = truth.cholesky_factor(q);
    let mut subjects = Vec::with_capacity(design.n_subjects);
    let mut classes = Vec::with_capacity(design.n_subjects);
    let n_visits = (design.follow_up / design.visit_interval + 1e-9).floor() as usize;
    while subjects.len() < design.n_subjects {
        let draw: f64 = rng.random();
        let mut class = pi.len() - 1;
        let mut acc = 0.0;
        for (g, p) in pi.iter().enumerate() {
            acc += p;
            if draw < acc {
                class = g;
                break;
            }
        }
        let x = if rng.random::<f64>() < design.covariate_prob { 1.0 } else { 0.0 };
        let entry = design.entry_age.0 + (design.entry_age.1 - design.entry_age.0) * rng.random::<f64>();
        let (t01, t02) = draw_first(class, x, truth, spec, &mut rng);
        if t01.min(t02) <= entry {
            continue;
        }
        let (onset, death) = complete_history(class, x, truth, spec, t01, t02, &mut rng);
        let visit = |k: usize| entry + k as f64 * design.visit_interval;
        let end = entry + design.follow_up;
        let t_end = death.min(end);
        let delta_d = death <= end;
        let mut diagnosis = None;
        let mut last_healthy = entry;
        for k in 0..=n_visits {
            let v = visit(k);
            if v >= death {
                break;
            }
            if v >= onset {
                diagnosis = Some(v);
                break;
            }
            last_healthy = v;
        }
        let last_obs = diagnosis.unwrap_or(last_healthy);
        let id = (subjects.len() + 1).to_string();
        let mut s = SubjectRecord::events_only(&id, entry, last_healthy, diagnosis, t_end, delta_d);
        s.covariates = vec![x];
        let u: Vec<f64> = {
            let z = nalgebra::DVector::from_iterator(q, (0..q).map(|_| StandardNormal.sample(&mut rng)));
            (&u_factor * z * truth.sigma_g(class)).iter().copied().collect()
        };
        let sigma_e = truth.sigma_e(0);
        for k in 0..=n_visits {
            let age = visit(k);
            if age > last_obs {
                break;
            }
            let t = spec.time_transform.to_time(age);
            let mean: f64 = spec.class_terms.iter().zip(&truth.beta_class[class]).map(|(term, b)| b * term.eval(t, x)).sum::<f64>()
                + spec.common_terms.iter().zip(&truth.beta_common).map(|(term, b)| b * term.eval(t, x)).sum::<f64>()
                + spec.markers[0].terms.iter().zip(&truth.beta_marker[0]).map(|(term, b)| b * term.eval(t, x)).sum::<f64>();
            let re: f64 = spec.random_terms.iter().zip(&u).map(|(term, ui)| ui * term.eval(t, x)).sum();
            let eps: f64 = StandardNormal.sample(&mut rng);
            s.obs.push(Observation {
                marker: 0,
                age,
                time: t,
                value: mean + re + sigma_e * eps,
                covariates: vec![x],
            });
        }
        subjects.push(s);
        classes.push(class);
    }
    let mut data = Dataset {
        subject_covariates: vec!["X".into()],
        obs_covariates: vec!["X".into()],
        subjects,
    };
    data.prepare(spec)?;
    let summary = DatasetSummary::new(&data, Some((&classes, spec.n_classes)));
    Ok(Simulated { data, classes, summary })
}

/// Collapses each record to first-event form for the competing-risks model.
///
/// Diagnosed subjects get a dementia event at `R`, subjects who died
/// undiagnosed a death event at death, and everyone else is censored at the
/// end of follow-up.
pub fn impute_competing(data: &Dataset) -> Dataset {
    let mut out = data.clone();
    for s in &mut out.subjects {
        if s.delta_a {
            s.t_end = s.r;
            s.l = s.r;
            s.delta_d = false;
        } else {
            s.l = s.t_end;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hazards::{cumulative, TransitionParams};

    #[test]
    fn inversion_identity() {
        let p = TransitionParams::with_linear_predictor(3.2f64.powi(2), 0.11f64.powi(2), 0.4).unwrap();
        for a in [0.01, 0.7, 3.0] {
            let t = invert_cumulative(a, p.shape, p.scale, 0.4);
            assert!((cumulative(&p, t).unwrap() - a).abs() < 1e-12 * a.max(1.0));
        }
    }

    #[test]
    fn seeded_generation_is_reproducible() {
        let d = SimulationDesign::table1(2.0, 60, true, 11);
        let a = generate_dataset(&d).unwrap();
        let b = generate_dataset(&d).unwrap();
        assert_eq!(a.data.subjects, b.data.subjects);
        let c = generate_replicate(&d, 1).unwrap();
        assert_ne!(a.data.subjects, c.data.subjects);
    }

    #[test]
    fn no_observation_after_last_known_state() {
        let sim = generate_dataset(&SimulationDesign::table1(4.0, 300, false, 3)).unwrap();
        for s in &sim.data.subjects {
            let stop = if s.delta_a { s.r } else { s.l };
            assert!(s.obs.iter().all(|o| o.age <= stop));
            s.validate().unwrap();
        }
    }

    #[test]
    fn degenerate_noise_follows_class_mean() {
        let mut d = SimulationDesign::table1(2.0, 40, true, 5);
        d.truth.chol = vec![0.0; 3];
        d.truth.sigma_e = vec![0.0];
        let sim = generate_dataset(&d).unwrap();
        for (s, &g) in sim.data.subjects.iter().zip(&sim.classes) {
            for o in &s.obs {
                let b = &d.truth.beta_class[g];
                let want = b[0] + b[1] * o.time + 0.08 * s.covariates[0];
                assert!((o.value - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dominant_dementia_hazard() {
        let mut d = SimulationDesign::table1(2.0, 400, true, 9);
        for g in 0..2 {
            d.truth.weibull[0][g] = WeibullRoots { shape: 1.0, scale: 2.0 };
        }
        let spec = d.spec.clone();
        let mut rng = rng_for(1, 0);
        let dem = (0..2000)
            .filter(|_| draw_event_times(0, 0.0, &d.truth, &spec, &mut rng).0.is_finite())
            .count();
        assert!(dem > 1990, "{dem}");
    }

    #[test]
    fn competing_imputation_counts() {
        let sim = generate_dataset(&SimulationDesign::table1(2.0, 300, true, 21)).unwrap();
        let cr = impute_competing(&sim.data);
        let dem = cr.subjects.iter().filter(|s| s.delta_a).count();
        assert_eq!(dem, sim.data.subjects.iter().filter(|s| s.delta_a).count());
        for (a, b) in sim.data.subjects.iter().zip(&cr.subjects) {
            b.validate().unwrap();
            assert_eq!(b.l, b.t_end);
            if a.delta_a {
                assert_eq!((b.t_end, b.delta_d), (a.r, false));
            } else {
                assert_eq!((b.t_end, b.delta_d), (a.t_end, a.delta_d));
            }
        }
    }

    #[test]
    fn wider_visits_widen_censoring() {
        let two = generate_dataset(&SimulationDesign::table1(2.0, 500, true, 4)).unwrap();
        let four = generate_dataset(&SimulationDesign::table1(4.0, 500, true, 4)).unwrap();
        assert!(four.summary.mean_censoring_width > two.summary.mean_censoring_width);
    }
}
