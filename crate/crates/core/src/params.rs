//! Parameter layout and the flat unconstrained parameter vector.
//!
//! Positive quantities (Weibull shapes and scales, variance factors,
//! measurement SDs, Beta-link shape and scale parameters) are stored as real
//! square roots, so `ParameterSet` holds exactly the coordinates the optimizer
//! moves and encoding is a plain flattening.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hazards::Transition;
use crate::spec::{LinkKind, ModelSpec};

/// What a coordinate influences; drives partial re-evaluation of the likelihood.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Membership,
    Weibull { transition: Transition, class: usize },
    Gamma { transition: Transition, class: Option<usize> },
    BetaClass { class: usize },
    /// Common and marker-specific effects, Cholesky entries and measurement SDs.
    Longitudinal,
    SigmaG { class: usize },
    Link { marker: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamInfo {
    pub name: String,
    pub kind: ParamKind,
    /// Stored as a square root of a positive quantity.
    pub squared: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    pub params: Vec<ParamInfo>,
}

impl ParamLayout {
    pub fn new(spec: &ModelSpec) -> Self {
        let g_n = spec.n_classes;
        let mut params = Vec::new();
        let mut push = |name: String, kind: ParamKind, squared: bool| {
            params.push(ParamInfo { name, kind, squared })
        };
        for g in 0..g_n.saturating_sub(1) {
            push(format!("zeta{}_intercept", g + 1), ParamKind::Membership, false);
            for c in &spec.class_covariates {
                push(format!("zeta{}_{c}", g + 1), ParamKind::Membership, false);
            }
        }
        for &tr in spec.transitions() {
            for what in ["shape", "scale"] {
                for g in 0..g_n {
                    push(
                        format!("weibull{}_{what}_{}", tr.label(), g + 1),
                        ParamKind::Weibull { transition: tr, class: g },
                        true,
                    );
                }
            }
        }
        for &tr in spec.transitions() {
            let covs = spec.event_covariates.get(tr);
            if spec.class_specific_gamma {
                for g in 0..g_n {
                    for c in covs {
                        push(
                            format!("gamma{}_{c}_{}", tr.label(), g + 1),
                            ParamKind::Gamma { transition: tr, class: Some(g) },
                            false,
                        );
                    }
                }
            } else {
                for c in covs {
                    push(
                        format!("gamma{}_{c}", tr.label()),
                        ParamKind::Gamma { transition: tr, class: None },
                        false,
                    );
                }
            }
        }
        for term in &spec.class_terms {
            for g in 0..g_n {
                push(format!("beta[{term}]_{}", g + 1), ParamKind::BetaClass { class: g }, false);
            }
        }
        for term in &spec.common_terms {
            push(format!("beta[{term}]"), ParamKind::Longitudinal, false);
        }
        for m in &spec.markers {
            for term in &m.terms {
                push(format!("beta_{}[{term}]", m.name), ParamKind::Longitudinal, false);
            }
        }
        let q = spec.random_terms.len();
        for i in 0..q {
            for j in 0..=i {
                push(format!("u_{}_{}", i + 1, j + 1), ParamKind::Longitudinal, false);
            }
        }
        if spec.proportional_variance {
            for g in 0..g_n.saturating_sub(1) {
                push(format!("sigma_g_{}", g + 1), ParamKind::SigmaG { class: g }, true);
            }
        }
        for m in &spec.markers {
            push(format!("sigma_e_{}", m.name), ParamKind::Longitudinal, true);
        }
        for (k, m) in spec.markers.iter().enumerate() {
            if m.link == LinkKind::BetaCdf {
                for (i, sq) in [(1, true), (2, true), (3, false), (4, true)] {
                    push(format!("eta{i}_{}", m.name), ParamKind::Link { marker: k }, sq);
                }
            }
        }
        Self { params }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.params.iter().map(|p| p.name.clone()).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Indices of the coordinates left free by `spec.fixed`.
    pub fn free_indices(&self, spec: &ModelSpec) -> Result<Vec<usize>> {
        let mut fixed = vec![false; self.len()];
        for name in &spec.fixed {
            let i = self
                .index_of(name)
                .ok_or_else(|| Error::Spec(format!("unknown fixed parameter `{name}`")))?;
            fixed[i] = true;
        }
        Ok((0..self.len()).filter(|&i| !fixed[i]).collect())
    }

    /// Natural-scale value of coordinate `i` given its stored value.
    pub fn natural(&self, i: usize, stored: f64) -> f64 {
        if self.params[i].squared {
            stored * stored
        } else {
            stored
        }
    }

    /// Delta-method standard error on the natural scale.
    pub fn natural_se(&self, i: usize, stored: f64, se: f64) -> f64 {
        if self.params[i].squared {
            2.0 * stored.abs() * se
        } else {
            se
        }
    }
}

/// Square roots of a Weibull shape and scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeibullRoots {
    pub shape: f64,
    pub scale: f64,
}

impl WeibullRoots {
    pub fn from_natural(shape: f64, scale: f64) -> Self {
        Self {
            shape: shape.sqrt(),
            scale: scale.sqrt(),
        }
    }
}

/// All model parameters in stored (unconstrained) form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet {
    /// `(G-1)` rows of class-membership coefficients; class `G` is the reference.
    pub zeta: Vec<Vec<f64>>,
    /// Indexed `[transition][class]` over the spec's transitions.
    pub weibull: Vec<Vec<WeibullRoots>>,
    /// Indexed `[transition][class or 0][covariate]`.
    pub gamma: Vec<Vec<Vec<f64>>>,
    /// Indexed `[class][term]`.
    pub beta_class: Vec<Vec<f64>>,
    pub beta_common: Vec<f64>,
    pub beta_marker: Vec<Vec<f64>>,
    /// Lower triangle of `U` (with `U U^T = B`), packed row by row.
    pub chol: Vec<f64>,
    /// Roots of the variance factors of classes `1..G-1`; empty when not proportional.
    pub sigma_g: Vec<f64>,
    /// Roots of the measurement SDs, one per marker.
    pub sigma_e: Vec<f64>,
    /// Per marker: empty for identity, `[sqrt eta1, sqrt eta2, eta3, sqrt eta4]` for Beta.
    pub eta: Vec<Vec<f64>>,
}

impl ParameterSet {
    /// Correctly shaped parameter set with neutral values.
    pub fn zeros(spec: &ModelSpec) -> Self {
        let g_n = spec.n_classes;
        let q = spec.random_terms.len();
        let mut chol = vec![0.0; q * (q + 1) / 2];
        for i in 0..q {
            chol[i * (i + 1) / 2 + i] = 1.0;
        }
        Self {
            zeta: vec![vec![0.0; 1 + spec.class_covariates.len()]; g_n.saturating_sub(1)],
            weibull: spec
                .transitions()
                .iter()
                .map(|_| vec![WeibullRoots { shape: 1.0, scale: 0.1 }; g_n])
                .collect(),
            gamma: spec
                .transitions()
                .iter()
                .map(|&tr| {
                    let blocks = if spec.class_specific_gamma { g_n } else { 1 };
                    vec![vec![0.0; spec.event_covariates.get(tr).len()]; blocks]
                })
                .collect(),
            beta_class: vec![vec![0.0; spec.class_terms.len()]; g_n],
            beta_common: vec![0.0; spec.common_terms.len()],
            beta_marker: spec.markers.iter().map(|m| vec![0.0; m.terms.len()]).collect(),
            chol,
            sigma_g: if spec.proportional_variance {
                vec![1.0; g_n.saturating_sub(1)]
            } else {
                Vec::new()
            },
            sigma_e: vec![1.0; spec.n_markers()],
            eta: spec
                .markers
                .iter()
                .map(|m| match m.link {
                    LinkKind::Identity => Vec::new(),
                    LinkKind::BetaCdf => vec![1.0, 1.0, 0.0, 1.0],
                })
                .collect(),
        }
    }

    /// Flattens into the layout order of [`ParamLayout::new`].
    pub fn to_vector(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for row in &self.zeta {
            v.extend_from_slice(row);
        }
        for tr in &self.weibull {
            v.extend(tr.iter().map(|w| w.shape));
            v.extend(tr.iter().map(|w| w.scale));
        }
        for tr in &self.gamma {
            for block in tr {
                v.extend_from_slice(block);
            }
        }
        let n_terms = self.beta_class.first().map_or(0, |b| b.len());
        for term in 0..n_terms {
            v.extend(self.beta_class.iter().map(|b| b[term]));
        }
        v.extend_from_slice(&self.beta_common);
        for m in &self.beta_marker {
            v.extend_from_slice(m);
        }
        v.extend_from_slice(&self.chol);
        v.extend_from_slice(&self.sigma_g);
        v.extend_from_slice(&self.sigma_e);
        for e in &self.eta {
            v.extend_from_slice(e);
        }
        v
    }

    /// Inverse of [`to_vector`](Self::to_vector) for the shape implied by `spec`.
    pub fn from_vector(spec: &ModelSpec, v: &[f64]) -> Result<Self> {
        let mut out = Self::zeros(spec);
        let expected = out.to_vector().len();
        if v.len() != expected {
            return Err(Error::Length {
                got: v.len(),
                expected,
            });
        }
        let mut it = v.iter().copied();
        let mut next = || it.next().expect("length checked");
        for row in &mut out.zeta {
            for x in row.iter_mut() {
                *x = next();
            }
        }
        for tr in &mut out.weibull {
            for w in tr.iter_mut() {
                w.shape = next();
            }
            for w in tr.iter_mut() {
                w.scale = next();
            }
        }
        for tr in &mut out.gamma {
            for block in tr.iter_mut() {
                for x in block.iter_mut() {
                    *x = next();
                }
            }
        }
        let n_terms = spec.class_terms.len();
        for term in 0..n_terms {
            for b in out.beta_class.iter_mut() {
                b[term] = next();
            }
        }
        for x in out.beta_common.iter_mut() {
            *x = next();
        }
        for m in out.beta_marker.iter_mut() {
            for x in m.iter_mut() {
                *x = next();
            }
        }
        for x in out.chol.iter_mut() {
            *x = next();
        }
        for x in out.sigma_g.iter_mut() {
            *x = next();
        }
        for x in out.sigma_e.iter_mut() {
            *x = next();
        }
        for e in out.eta.iter_mut() {
            for x in e.iter_mut() {
                *x = next();
            }
        }
        Ok(out)
    }

    /// Checks that the vector shapes agree with `spec`.
    pub fn check_shape(&self, spec: &ModelSpec) -> Result<()> {
        let reference = Self::zeros(spec);
        let same = self.zeta.len() == reference.zeta.len()
            && self.zeta.iter().zip(&reference.zeta).all(|(a, b)| a.len() == b.len())
            && self.weibull.len() == reference.weibull.len()
            && self.weibull.iter().all(|w| w.len() == spec.n_classes)
            && self.gamma.len() == reference.gamma.len()
            && self
                .gamma
                .iter()
                .zip(&reference.gamma)
                .all(|(a, b)| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.len() == y.len()))
            && self.beta_class.len() == spec.n_classes
            && self.beta_class.iter().all(|b| b.len() == spec.class_terms.len())
            && self.beta_common.len() == reference.beta_common.len()
            && self.beta_marker.len() == reference.beta_marker.len()
            && self.beta_marker.iter().zip(&reference.beta_marker).all(|(a, b)| a.len() == b.len())
            && self.chol.len() == reference.chol.len()
            && self.sigma_g.len() == reference.sigma_g.len()
            && self.sigma_e.len() == reference.sigma_e.len()
            && self.eta.len() == reference.eta.len()
            && self.eta.iter().zip(&reference.eta).all(|(a, b)| a.len() == b.len());
        if same {
            Ok(())
        } else {
            Err(Error::Spec("parameter set does not match the model specification".into()))
        }
    }

    pub fn shape(&self, tr_pos: usize, class: usize) -> f64 {
        let r = self.weibull[tr_pos][class].shape;
        r * r
    }

    pub fn scale(&self, tr_pos: usize, class: usize) -> f64 {
        let r = self.weibull[tr_pos][class].scale;
        r * r
    }

    /// Covariate effects of a transition for one class.
    pub fn gamma_for(&self, tr_pos: usize, class: usize) -> &[f64] {
        let blocks = &self.gamma[tr_pos];
        if blocks.len() == 1 {
            &blocks[0]
        } else {
            &blocks[class]
        }
    }

    /// Proportional variance factor `sigma_g` (not squared); 1 for the reference class.
    pub fn sigma_g(&self, class: usize) -> f64 {
        match self.sigma_g.get(class) {
            Some(r) => r * r,
            None => 1.0,
        }
    }

    pub fn sigma_e(&self, marker: usize) -> f64 {
        let r = self.sigma_e[marker];
        r * r
    }

    /// `(eta1, eta2, eta3, eta4)` of a Beta-link marker.
    pub fn link(&self, marker: usize) -> Option<[f64; 4]> {
        let e = &self.eta[marker];
        (e.len() == 4).then(|| [e[0] * e[0], e[1] * e[1], e[2], e[3] * e[3]])
    }

    pub fn cholesky_factor(&self, q: usize) -> DMatrix<f64> {
        DMatrix::from_fn(q, q, |i, j| if j <= i { self.chol[i * (i + 1) / 2 + j] } else { 0.0 })
    }

    /// Random-effect covariance `B = U U^T`.
    pub fn b_matrix(&self, q: usize) -> DMatrix<f64> {
        let u = self.cholesky_factor(q);
        &u * u.transpose()
    }

    /// Picks the positive root of every squared coordinate and a Cholesky
    /// factor with non-negative diagonal; the model is unchanged.
    pub fn canonicalize(&mut self) {
        for tr in &mut self.weibull {
            for w in tr.iter_mut() {
                w.shape = w.shape.abs();
                w.scale = w.scale.abs();
            }
        }
        for x in self.sigma_g.iter_mut().chain(self.sigma_e.iter_mut()) {
            *x = x.abs();
        }
        for e in &mut self.eta {
            if e.len() == 4 {
                e[0] = e[0].abs();
                e[1] = e[1].abs();
                e[3] = e[3].abs();
            }
        }
        let q = ((((8 * self.chol.len() + 1) as f64).sqrt() as usize) - 1) / 2;
        for j in 0..q {
            if self.chol[j * (j + 1) / 2 + j] < 0.0 {
                for i in j..q {
                    self.chol[i * (i + 1) / 2 + j] = -self.chol[i * (i + 1) / 2 + j];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spec::{EventModel, MarkerSpec};
    use proptest::prelude::*;

    fn rich_spec() -> ModelSpec {
        let mut s = ModelSpec::linear_trend(3, EventModel::IllnessDeath, false);
        s.class_covariates = vec!["X".into()];
        s.class_specific_gamma = true;
        s.proportional_variance = true;
        s.markers.push(MarkerSpec {
            name: "Z".into(),
            link: LinkKind::BetaCdf,
            range: Some((0.0, 40.0)),
            terms: vec!["1".parse().unwrap()],
        });
        s
    }

    #[test]
    fn layout_matches_vector_length_and_names_unique() {
        for spec in [
            ModelSpec::linear_trend(2, EventModel::IllnessDeath, true),
            ModelSpec::linear_trend(2, EventModel::CompetingRisks, true),
            rich_spec(),
        ] {
            let layout = ParamLayout::new(&spec);
            assert_eq!(layout.len(), ParameterSet::zeros(&spec).to_vector().len());
            let names = layout.names();
            for (i, n) in names.iter().enumerate() {
                assert!(!names[..i].contains(n), "duplicate {n}");
            }
        }
    }

    #[test]
    fn table_one_parameter_counts() {
        let id = ParamLayout::new(&ModelSpec::linear_trend(2, EventModel::IllnessDeath, true));
        assert_eq!(id.len(), 25);
        let cr = ParamLayout::new(&ModelSpec::linear_trend(2, EventModel::CompetingRisks, true));
        assert_eq!(cr.len(), 25 - 5);
        assert!(id.index_of("sigma_g_1").is_none(), "reference variance factor is not free");
    }

    #[test]
    fn squared_storage_is_positive() {
        let spec = ModelSpec::linear_trend(1, EventModel::IllnessDeath, true);
        let mut p = ParameterSet::zeros(&spec);
        p.weibull[0][0] = WeibullRoots { shape: -1.7, scale: -0.11 };
        assert!((p.shape(0, 0) - 2.89).abs() < 1e-15);
        assert!(p.scale(0, 0) > 0.0);
    }

    #[test]
    fn length_mismatch() {
        let spec = rich_spec();
        assert!(matches!(
            ParameterSet::from_vector(&spec, &[0.0; 3]),
            Err(Error::Length { got: 3, .. })
        ));
    }

    #[test]
    fn canonicalize_preserves_b() {
        let spec = ModelSpec::linear_trend(1, EventModel::IllnessDeath, true);
        let mut p = ParameterSet::zeros(&spec);
        p.chol = vec![-4.93, 1.15, -1.46];
        let b = p.b_matrix(2);
        p.canonicalize();
        assert!(p.chol[0] > 0.0 && p.chol[2] > 0.0);
        assert!((p.b_matrix(2) - b).abs().max() < 1e-12);
    }

    #[test]
    fn fixed_parameters() {
        let mut spec = ModelSpec::linear_trend(2, EventModel::IllnessDeath, true);
        spec.fixed = vec!["zeta1_intercept".into()];
        let layout = ParamLayout::new(&spec);
        assert_eq!(layout.free_indices(&spec).unwrap().len(), 24);
        spec.fixed = vec!["nope".into()];
        assert!(layout.free_indices(&spec).is_err());
    }

    proptest! {
        #[test]
        fn vector_round_trip_is_bit_exact(seed in prop::collection::vec(-50.0f64..50.0, 64)) {
            let spec = rich_spec();
            let n = ParamLayout::new(&spec).len();
            let v: Vec<f64> = seed.iter().cycle().take(n).copied().collect();
            let p = ParameterSet::from_vector(&spec, &v).unwrap();
            let back = p.to_vector();
            prop_assert!(back.iter().zip(&v).all(|(a, b)| a.to_bits() == b.to_bits()));
            prop_assert_eq!(ParameterSet::from_vector(&spec, &back).unwrap(), p);
        }
    }
}
