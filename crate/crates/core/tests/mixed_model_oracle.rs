//! One-class model against an external linear mixed model fit.
//!
//! Reference values: statsmodels 0.14 `MixedLM.from_formula("value ~ t + X",
//! groups=id, re_formula="~t").fit(reml=False)` on the observations of the
//! seeded cohort below, with `t = (age - 65) / 10`.

use lcid::longitudinal::log_density;
use lcid::optimizer::{fit, OptimizerConfig};
use lcid::params::ParameterSet;
use lcid::simulator::{generate_dataset, SimulationDesign};
use lcid::spec::{EventModel, ModelSpec};

const FE: [f64; 3] = [31.928238920206727, -3.603120544454545, -0.474482714335286];
const FE_SE: [f64; 3] = [0.578, 0.235, 0.669];
const CHOL: [f64; 3] = [4.733487608608984, -0.493418050713036, 1.099410733913064];
const RESIDUAL_VARIANCE: f64 = 12.66591106086953;
const LLF: f64 = -3462.781186488629;

fn cohort() -> lcid::data::Dataset {
    generate_dataset(&SimulationDesign::table1(2.0, 200, true, 300)).unwrap().data
}

fn reference_theta(spec: &ModelSpec) -> ParameterSet {
    let mut th = ParameterSet::zeros(spec);
    th.beta_class = vec![vec![FE[0], FE[1]]];
    th.beta_common = vec![FE[2]];
    th.chol = CHOL.to_vec();
    th.sigma_e = vec![RESIDUAL_VARIANCE.powf(0.25)];
    th
}

#[test]
fn marginal_density_matches_reference_log_likelihood() {
    let spec = ModelSpec::linear_trend(1, EventModel::IllnessDeath, true);
    let mut data = cohort();
    data.prepare(&spec).unwrap();
    assert_eq!(data.subjects.iter().map(|s| s.obs.len()).sum::<usize>(), 1203);
    let th = reference_theta(&spec);
    let ll: f64 = data.subjects.iter().map(|s| log_density(s, 0, &th, &spec).unwrap()).sum();
    assert!((ll - LLF).abs() < 1e-6, "{ll} vs {LLF}");
}

#[test]
fn one_class_fit_recovers_reference_estimates() {
    let spec = ModelSpec::linear_trend(1, EventModel::IllnessDeath, true);
    let mut data = cohort();
    data.prepare(&spec).unwrap();
    let cfg = OptimizerConfig { n_starts: 1, ..Default::default() };
    let f = fit(&data, &spec, None, &cfg).unwrap();
    assert!(f.converged);
    let th = &f.theta_hat;
    let est = [th.beta_class[0][0], th.beta_class[0][1], th.beta_common[0]];
    for k in 0..3 {
        assert!((est[k] - FE[k]).abs() < 0.02 * FE_SE[k], "fixed effect {k}: {} vs {}", est[k], FE[k]);
    }
    for k in 0..3 {
        assert!((th.chol[k] - CHOL[k]).abs() < 0.01, "chol {k}: {} vs {}", th.chol[k], CHOL[k]);
    }
    let var = th.sigma_e[0].powi(4);
    assert!((var - RESIDUAL_VARIANCE).abs() < 0.01 * RESIDUAL_VARIANCE);
    let lmm: f64 = data.subjects.iter().map(|s| log_density(s, 0, th, &spec).unwrap()).sum();
    assert!(lmm > LLF - 1e-3 && lmm < LLF + 1e-3, "{lmm} vs {LLF}");
    let names = &f.names;
    for (i, n) in names.iter().enumerate().filter(|(_, n)| n.starts_with("beta")) {
        let k = ["beta[1]_1", "beta[t]_1", "beta[X]"].iter().position(|m| m == n).unwrap();
        assert!((f.se[i] - FE_SE[k]).abs() < 0.01, "{n} SE {} vs {}", f.se[i], FE_SE[k]);
    }
}
