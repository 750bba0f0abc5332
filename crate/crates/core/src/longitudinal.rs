//! Latent-process mixed model: link functions, conditional moments and the
//! Gaussian density of a subject's transformed marker series.

use nalgebra::{DMatrix, DVector};
use statrs::function::beta::{checked_beta_reg, checked_ln_beta};

use crate::data::SubjectRecord;
use crate::error::{Error, Result};
use crate::params::ParameterSet;
use crate::spec::{LinkKind, ModelSpec};

/// Rescaled marker values are clamped to `[CLAMP, 1 - CLAMP]` before the Beta CDF.
pub const CLAMP: f64 = 1e-4;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkFunction {
    pub kind: LinkKind,
    /// `(eta1, eta2, eta3, eta4)`; ignored for the identity link.
    pub eta: [f64; 4],
    /// Marker range `(min, max)`, required for the Beta link.
    pub range: Option<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transformed {
    pub y_tilde: f64,
    pub log_jacobian: f64,
    /// The rescaled value hit the clamp.
    pub clamped: bool,
}

impl LinkFunction {
    pub fn identity() -> Self {
        Self {
            kind: LinkKind::Identity,
            eta: [1.0, 1.0, 0.0, 1.0],
            range: None,
        }
    }

    pub fn beta_cdf(eta: [f64; 4], range: (f64, f64)) -> Self {
        Self {
            kind: LinkKind::BetaCdf,
            eta,
            range: Some(range),
        }
    }

    /// The link of marker `k` under `theta`.
    pub fn for_marker(spec: &ModelSpec, theta: &ParameterSet, k: usize) -> Self {
        let m = &spec.markers[k];
        match m.link {
            LinkKind::Identity => Self::identity(),
            LinkKind::BetaCdf => Self::beta_cdf(
                theta.link(k).unwrap_or([1.0, 1.0, 0.0, 1.0]),
                m.range.unwrap_or((0.0, 1.0)),
            ),
        }
    }

    pub fn transform(&self, y: f64) -> Result<Transformed> {
        match self.kind {
            LinkKind::Identity => Ok(Transformed {
                y_tilde: y,
                log_jacobian: 0.0,
                clamped: false,
            }),
            LinkKind::BetaCdf => {
                let (lo, hi) = self
                    .range
                    .ok_or_else(|| Error::Spec("Beta link requires a marker range".into()))?;
                if !(y >= lo && y <= hi) {
                    return Err(Error::Domain(format!("marker value {y} outside [{lo}, {hi}]")));
                }
                let [a, b, loc, scale] = self.eta;
                if !(a > 0.0 && b > 0.0 && scale > 0.0) {
                    return Err(Error::Domain(format!(
                        "Beta link needs positive eta1, eta2, eta4 (got {a}, {b}, {scale})"
                    )));
                }
                let width = hi - lo + 1.0;
                let raw = (y - lo + 0.5) / width;
                let x = raw.clamp(CLAMP, 1.0 - CLAMP);
                let cdf = checked_beta_reg(a, b, x).map_err(|e| Error::Domain(e.to_string()))?;
                let ln_b = checked_ln_beta(a, b).map_err(|e| Error::Domain(e.to_string()))?;
                let log_pdf = (a - 1.0) * x.ln() + (b - 1.0) * (-x).ln_1p() - ln_b;
                Ok(Transformed {
                    y_tilde: (cdf - loc) / scale,
                    log_jacobian: log_pdf - width.ln() - scale.ln(),
                    clamped: x != raw,
                })
            }
        }
    }
}

/// Transformed values of all observations and the summed log-Jacobian.
pub fn transformed_values(subject: &SubjectRecord, theta: &ParameterSet, spec: &ModelSpec) -> Result<(Vec<f64>, f64)> {
    let links: Vec<LinkFunction> = (0..spec.n_markers())
        .map(|k| LinkFunction::for_marker(spec, theta, k))
        .collect();
    let mut y = Vec::with_capacity(subject.obs.len());
    let mut log_j = 0.0;
    for o in &subject.obs {
        let t = links[o.marker].transform(o.value).map_err(|e| Error::InvalidSubject {
            id: subject.id.clone(),
            msg: e.to_string(),
        })?;
        y.push(t.y_tilde);
        log_j += t.log_jacobian;
    }
    Ok((y, log_j))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Class-specific mean of the transformed observations.
pub fn conditional_mean(subject: &SubjectRecord, class: usize, theta: &ParameterSet) -> Result<DVector<f64>> {
    let d = &subject.design;
    let n = subject.obs.len();
    if d.class.len() != n || d.common.len() != n || d.marker.len() != n {
        return Err(Error::Length {
            got: d.class.len(),
            expected: n,
        });
    }
    Ok(DVector::from_iterator(
        n,
        (0..n).map(|j| {
            let k = subject.obs[j].marker;
            dot(&d.class[j], &theta.beta_class[class])
                + dot(&d.common[j], &theta.beta_common)
                + dot(&d.marker[j], &theta.beta_marker[k])
        }),
    ))
}

/// `Z B Z^T` for the subject's observations (before the class factor).
pub fn random_covariance(subject: &SubjectRecord, theta: &ParameterSet, spec: &ModelSpec) -> Result<DMatrix<f64>> {
    let q = spec.random_terms.len();
    let n = subject.obs.len();
    if subject.design.random.len() != n {
        return Err(Error::Length {
            got: subject.design.random.len(),
            expected: n,
        });
    }
    let z = DMatrix::from_fn(n, q, |j, c| subject.design.random[j][c]);
    let zu = z * theta.cholesky_factor(q);
    Ok(&zu * zu.transpose())
}

/// Mean `E_ig` and covariance `V_ig` of the transformed observations in class `class`.
pub fn conditional_moments(
    subject: &SubjectRecord,
    class: usize,
    theta: &ParameterSet,
    spec: &ModelSpec,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let mean = conditional_mean(subject, class, theta)?;
    let mut v = random_covariance(subject, theta, spec)? * theta.sigma_g(class).powi(2);
    for (j, o) in subject.obs.iter().enumerate() {
        v[(j, j)] += theta.sigma_e(o.marker).powi(2);
    }
    Ok((mean, v))
}

/// Cholesky factor with its log-determinant, reusable across classes that
/// share a covariance matrix.
pub(crate) struct Factor {
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    log_det: f64,
}

impl Factor {
    pub fn new(v: DMatrix<f64>) -> Option<Self> {
        let chol = v.cholesky()?;
        let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        log_det.is_finite().then_some(Self { chol, log_det })
    }

    pub fn log_density(&self, resid: &DVector<f64>) -> f64 {
        let n = resid.len() as f64;
        let mut z = resid.clone();
        self.chol.l_dirty().solve_lower_triangular_mut(&mut z);
        -0.5 * (n * LN_2PI + self.log_det + z.norm_squared())
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }
}

fn not_pd(subject: &SubjectRecord, class: usize) -> Error {
    Error::NotPositiveDefinite {
        id: subject.id.clone(),
        class,
    }
}

/// Log-density of the observed markers in one class, including the link Jacobian.
pub fn log_density(subject: &SubjectRecord, class: usize, theta: &ParameterSet, spec: &ModelSpec) -> Result<f64> {
    if subject.obs.is_empty() {
        return Ok(0.0);
    }
    let (y, log_j) = transformed_values(subject, theta, spec)?;
    let (mean, v) = conditional_moments(subject, class, theta, spec)?;
    let factor = Factor::new(v).ok_or_else(|| not_pd(subject, class))?;
    Ok(factor.log_density(&(DVector::from_vec(y) - mean)) + log_j)
}

/// Log-densities for every class, factorizing the covariance once when it is
/// shared across classes.
pub fn log_densities(subject: &SubjectRecord, theta: &ParameterSet, spec: &ModelSpec) -> Result<Vec<f64>> {
    let g_n = spec.n_classes;
    if subject.obs.is_empty() {
        return Ok(vec![0.0; g_n]);
    }
    let (y, log_j) = transformed_values(subject, theta, spec)?;
    let y = DVector::from_vec(y);
    let zbz = random_covariance(subject, theta, spec)?;
    let build = |class: usize| -> Result<Factor> {
        let mut v = &zbz * theta.sigma_g(class).powi(2);
        for (j, o) in subject.obs.iter().enumerate() {
            v[(j, j)] += theta.sigma_e(o.marker).powi(2);
        }
        Factor::new(v).ok_or_else(|| not_pd(subject, class))
    };
    let shared = if spec.proportional_variance { None } else { Some(build(0)?) };
    let mut out = Vec::with_capacity(g_n);
    for g in 0..g_n {
        let own;
        let factor = match &shared {
            Some(f) => f,
            None => {
                own = build(g)?;
                &own
            }
        };
        let mean = conditional_mean(subject, g, theta)?;
        out.push(factor.log_density(&(&y - mean)) + log_j);
    }
    Ok(out)
}

/// Empirical Bayes estimate `E(u_i | Y_i, c_i = g)`.
pub fn random_effects_mean(
    subject: &SubjectRecord,
    class: usize,
    theta: &ParameterSet,
    spec: &ModelSpec,
) -> Result<DVector<f64>> {
    let q = spec.random_terms.len();
    if subject.obs.is_empty() {
        return Ok(DVector::zeros(q));
    }
    let (y, _) = transformed_values(subject, theta, spec)?;
    let (mean, v) = conditional_moments(subject, class, theta, spec)?;
    let factor = Factor::new(v).ok_or_else(|| not_pd(subject, class))?;
    let n = subject.obs.len();
    let z = DMatrix::from_fn(n, q, |j, c| subject.design.random[j][c]);
    let w = factor.solve(&(DVector::from_vec(y) - mean));
    Ok(theta.b_matrix(q) * theta.sigma_g(class).powi(2) * z.transpose() * w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Dataset, Observation, SubjectRecord};
    use crate::spec::{EventModel, MarkerSpec};
    use proptest::prelude::*;

    fn subject_with(spec: &ModelSpec, obs: &[(usize, f64, f64)]) -> SubjectRecord {
        let mut s = SubjectRecord::events_only("1", 65.0, 80.0, None, 80.0, false);
        s.covariates = vec![1.0];
        s.obs = obs
            .iter()
            .map(|&(marker, age, value)| Observation {
                marker,
                age,
                time: 0.0,
                value,
                covariates: vec![1.0],
            })
            .collect();
        let mut ds = Dataset {
            subject_covariates: vec!["X".into()],
            obs_covariates: vec!["X".into()],
            subjects: vec![s],
        };
        ds.prepare(spec).unwrap();
        ds.subjects.pop().unwrap()
    }

    fn one_class() -> ModelSpec {
        ModelSpec::linear_trend(1, EventModel::IllnessDeath, true)
    }

    #[test]
    fn identity_link_is_trivial() {
        let t = LinkFunction::identity().transform(17.5).unwrap();
        assert_eq!((t.y_tilde, t.log_jacobian), (17.5, 0.0));
    }

    #[test]
    fn uniform_beta_link_is_affine() {
        let link = LinkFunction::beta_cdf([1.0, 1.0, 0.2, 0.5], (0.0, 40.0));
        let vals: Vec<Transformed> = [3.0, 10.0, 25.0].iter().map(|&y| link.transform(y).unwrap()).collect();
        let slope = (vals[1].y_tilde - vals[0].y_tilde) / 7.0;
        assert!(((vals[2].y_tilde - vals[1].y_tilde) / 15.0 - slope).abs() < 1e-12);
        assert!((vals[0].log_jacobian - vals[2].log_jacobian).abs() < 1e-12);
        assert!((slope - 1.0 / (41.0 * 0.5)).abs() < 1e-12);
    }

    #[test]
    fn beta_link_rejects_out_of_range() {
        let link = LinkFunction::beta_cdf([2.0, 3.0, 0.0, 1.0], (0.0, 40.0));
        assert!(link.transform(40.5).is_err());
        assert!(link.transform(-1.0).is_err());
    }

    #[test]
    fn beta_link_monotone_on_grid() {
        for eta in [[0.5, 0.7, 0.1, 0.3], [4.0, 1.5, 0.5, 0.2], [2.0, 8.0, 0.0, 1.0]] {
            let link = LinkFunction::beta_cdf(eta, (0.0, 40.0));
            let mut prev = f64::NEG_INFINITY;
            for i in 0..=400 {
                let t = link.transform(i as f64 * 0.1).unwrap();
                assert!(t.y_tilde > prev);
                assert!(t.log_jacobian.is_finite());
                prev = t.y_tilde;
            }
        }
    }

    #[test]
    fn beta_link_jacobian_matches_finite_difference() {
        let link = LinkFunction::beta_cdf([2.5, 1.7, 0.3, 0.4], (0.0, 40.0));
        for y in [2.0, 13.0, 31.0] {
            let h = 1e-5;
            let fd = (link.transform(y + h).unwrap().y_tilde - link.transform(y - h).unwrap().y_tilde) / (2.0 * h);
            let lj = link.transform(y).unwrap().log_jacobian;
            assert!((fd.ln() - lj).abs() < 1e-7, "{y}: {} vs {lj}", fd.ln());
        }
    }

    #[test]
    fn standard_normal_peak() {
        let spec = one_class();
        let mut theta = ParameterSet::zeros(&spec);
        theta.chol = vec![0.0; 3];
        theta.sigma_e = vec![1.0];
        theta.beta_class[0] = vec![20.0, 0.0];
        theta.beta_common = vec![0.0];
        let s = subject_with(&spec, &[(0, 75.0, 20.0)]);
        assert!((log_density(&s, 0, &theta, &spec).unwrap() + 0.918_938_533_204_672_7).abs() < 1e-14);
    }

    #[test]
    fn empty_observations_have_unit_density() {
        let spec = one_class();
        let s = subject_with(&spec, &[]);
        assert_eq!(log_density(&s, 0, &ParameterSet::zeros(&spec), &spec).unwrap(), 0.0);
    }

    #[test]
    fn zero_random_effects_gives_diagonal_covariance() {
        let spec = one_class();
        let mut theta = ParameterSet::zeros(&spec);
        theta.chol = vec![0.0; 3];
        theta.sigma_e = vec![2.0_f64.sqrt()];
        let s = subject_with(&spec, &[(0, 70.0, 1.0), (0, 72.0, 2.0)]);
        let (_, v) = conditional_moments(&s, 0, &theta, &spec).unwrap();
        assert!((v - DMatrix::from_diagonal_element(2, 2, 4.0)).abs().max() < 1e-14);
    }

    #[test]
    fn scalar_covariance() {
        let mut spec = ModelSpec::linear_trend(2, EventModel::IllnessDeath, true);
        spec.proportional_variance = true;
        let mut theta = ParameterSet::zeros(&spec);
        theta.chol = vec![1.5, 0.3, 0.7];
        theta.sigma_g = vec![0.8_f64.sqrt()];
        theta.sigma_e = vec![1.2_f64.sqrt()];
        let s = subject_with(&spec, &[(0, 65.0, 1.0)]);
        let (_, v) = conditional_moments(&s, 0, &theta, &spec).unwrap();
        assert!((v[(0, 0)] - (0.64 * 2.25 + 1.44)).abs() < 1e-12);
    }

    #[test]
    fn two_marker_cross_block() {
        let mut spec = one_class();
        spec.markers.push(MarkerSpec::identity("Z"));
        let mut theta = ParameterSet::zeros(&spec);
        theta.chol = vec![1.1, -0.4, 0.9];
        let s = subject_with(&spec, &[(0, 70.0, 1.0), (1, 75.0, 2.0)]);
        let (_, v) = conditional_moments(&s, 0, &theta, &spec).unwrap();
        let b = theta.b_matrix(2);
        let (z1, z2) = ([1.0, 0.5], [1.0, 1.0]);
        let cross: f64 = (0..2).flat_map(|a| (0..2).map(move |c| (a, c))).map(|(a, c)| z1[a] * b[(a, c)] * z2[c]).sum();
        assert!((v[(0, 1)] - cross).abs() < 1e-12);
        assert!((v[(1, 0)] - cross).abs() < 1e-12);
    }

    /// Dense textbook MVN formula using an explicit inverse and determinant.
    fn dense_oracle(y: &[f64], mu: &[f64], v: &DMatrix<f64>) -> f64 {
        let n = y.len();
        let r = DVector::from_iterator(n, (0..n).map(|i| y[i] - mu[i]));
        let inv = v.clone().try_inverse().unwrap();
        -0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + v.determinant().ln() + (r.transpose() * inv * &r)[(0, 0)])
    }

    #[test]
    fn three_observation_density_matches_dense_formula() {
        let spec = ModelSpec::linear_trend(2, EventModel::IllnessDeath, true);
        let mut theta = ParameterSet::zeros(&spec);
        theta.chol = vec![4.93, -1.15, 1.46];
        theta.sigma_e = vec![3.47_f64.sqrt()];
        theta.beta_class = vec![vec![30.22, -5.76], vec![32.96, -3.53]];
        theta.beta_common = vec![0.08];
        let s = subject_with(&spec, &[(0, 70.0, 27.0), (0, 72.0, 25.5), (0, 74.0, 21.0)]);
        for g in 0..2 {
            let (mu, v) = conditional_moments(&s, g, &theta, &spec).unwrap();
            let y: Vec<f64> = s.obs.iter().map(|o| o.value).collect();
            let oracle = dense_oracle(&y, mu.as_slice(), &v);
            assert!((log_density(&s, g, &theta, &spec).unwrap() - oracle).abs() < 1e-10);
            assert!((log_densities(&s, &theta, &spec).unwrap()[g] - oracle).abs() < 1e-10);
        }
    }

    #[test]
    fn density_integrates_to_one() {
        let spec = one_class();
        let mut theta = ParameterSet::zeros(&spec);
        theta.chol = vec![1.0, 0.2, 0.5];
        theta.sigma_e = vec![0.8];
        let rule = crate::quadrature::QuadratureRule::gauss_legendre(80);
        let one = |y: f64| {
            let s = subject_with(&spec, &[(0, 70.0, y)]);
            log_density(&s, 0, &theta, &spec).unwrap().exp()
        };
        assert!((rule.integrate(-12.0, 12.0, one) - 1.0).abs() < 1e-4);
        let two = |y1: f64| {
            rule.integrate(-12.0, 12.0, |y2| {
                let s = subject_with(&spec, &[(0, 70.0, y1), (0, 80.0, y2)]);
                log_density(&s, 0, &theta, &spec).unwrap().exp()
            })
        };
        assert!((rule.integrate(-12.0, 12.0, two) - 1.0).abs() < 1e-4);
    }

    #[test]
    fn random_effects_without_variance_vanish() {
        let spec = one_class();
        let mut theta = ParameterSet::zeros(&spec);
        theta.chol = vec![0.0; 3];
        let s = subject_with(&spec, &[(0, 70.0, 5.0), (0, 72.0, 3.0)]);
        assert_eq!(random_effects_mean(&s, 0, &theta, &spec).unwrap(), DVector::zeros(2));
    }

    #[test]
    fn random_effects_match_gls_formula() {
        let spec = one_class();
        let mut theta = ParameterSet::zeros(&spec);
        theta.chol = vec![2.0, -0.5, 1.0];
        theta.sigma_e = vec![1.5_f64.sqrt()];
        theta.beta_class[0] = vec![25.0, -3.0];
        let s = subject_with(&spec, &[(0, 70.0, 24.0), (0, 74.0, 19.0)]);
        // Equivalent precision form: (B^-1 + Z^T Z / s2)^-1 Z^T r / s2.
        let b = theta.b_matrix(2);
        let s2 = 1.5 * 1.5;
        let z = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 1.0, 0.9]);
        let (mu, _) = conditional_moments(&s, 0, &theta, &spec).unwrap();
        let r = DVector::from_vec(vec![24.0 - mu[0], 19.0 - mu[1]]);
        let prec = b.try_inverse().unwrap() + z.transpose() * &z / s2;
        let oracle = prec.try_inverse().unwrap() * z.transpose() * r / s2;
        let got = random_effects_mean(&s, 0, &theta, &spec).unwrap();
        assert!((got - oracle).abs().max() < 1e-10);
    }

    proptest! {
        #[test]
        fn beta_jacobian_positive(a in 0.2f64..6.0, b in 0.2f64..6.0, y in 0.0f64..40.0) {
            let link = LinkFunction::beta_cdf([a, b, 0.0, 1.0], (0.0, 40.0));
            prop_assert!(link.transform(y).unwrap().log_jacobian.exp() > 0.0);
        }

        #[test]
        fn identical_classes_identical_densities(v1 in 0.0f64..40.0, v2 in 0.0f64..40.0) {
            let spec = ModelSpec::linear_trend(3, EventModel::IllnessDeath, true);
            let mut theta = ParameterSet::zeros(&spec);
            theta.beta_class = vec![vec![28.0, -4.0]; 3];
            let s = subject_with(&spec, &[(0, 70.0, v1), (0, 71.5, v2)]);
            let d = log_densities(&s, &theta, &spec).unwrap();
            prop_assert!(d.iter().all(|x| *x == d[0]));
        }
    }
}
