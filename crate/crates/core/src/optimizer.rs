//! Marquardt maximization with numerical derivatives, multi-start fitting,
//! asymptotic standard errors and BIC.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::likelihood::{EvalState, LikelihoodContext};
use crate::longitudinal::LinkFunction;
use crate::params::{ParamLayout, ParameterSet, WeibullRoots};
use crate::simulator::rng_for;
use crate::spec::{LinkKind, ModelSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub eps_loglik: f64,
    pub eps_param: f64,
    pub eps_rdm: f64,
    pub max_iter: usize,
    pub n_starts: usize,
    pub seed: u64,
    /// Relative step of the finite differences.
    pub fd_step: f64,
    /// Standard deviation of the multiplicative start jitter.
    pub jitter: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            eps_loglik: 1e-3,
            eps_param: 1e-3,
            eps_rdm: 1e-2,
            max_iter: 100,
            n_starts: 10,
            seed: 0,
            fd_step: 1e-4,
            jitter: 0.1,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = [self.eps_loglik, self.eps_param, self.eps_rdm, self.fd_step];
        if pos.iter().any(|v| !(v.is_finite() && *v > 0.0)) || self.n_starts == 0 || !(self.jitter >= 0.0) {
            return Err(Error::Spec("optimizer tolerances and fd_step must be positive, n_starts at least 1".into()));
        }
        Ok(())
    }
}

/// A function to maximize that can re-evaluate cheaply near a base point.
pub trait Objective: Sync {
    type State: Sync;

    fn dim(&self) -> usize;

    fn evaluate(&self, x: &[f64]) -> Result<(f64, Self::State)>;

    /// Value at `x`, which differs from the point of `base` only at `changed`.
    fn probe(&self, base: &Self::State, x: &[f64], changed: &[usize]) -> Result<f64> {
        let _ = (base, changed);
        Ok(self.evaluate(x)?.0)
    }
}

/// Wraps a plain closure.
pub struct FnObjective<F> {
    pub f: F,
    pub dim: usize,
}

impl<F: Fn(&[f64]) -> Result<f64> + Sync> Objective for FnObjective<F> {
    type State = ();

    fn dim(&self) -> usize {
        self.dim
    }

    fn evaluate(&self, x: &[f64]) -> Result<(f64, ())> {
        Ok(((self.f)(x)?, ()))
    }
}

fn steps(x: &[f64], fd_step: f64) -> Vec<f64> {
    x.iter().map(|v| fd_step * v.abs().max(1.0)).collect()
}

fn checked(coord: usize, v: Result<f64>) -> Result<f64> {
    match v {
        Ok(v) if v.is_finite() => Ok(v),
        Ok(v) => Err(Error::Probe {
            coord,
            source: Box::new(Error::Domain(format!("objective value {v}"))),
        }),
        Err(e) => Err(Error::Probe {
            coord,
            source: Box::new(e),
        }),
    }
}

/// Central-difference gradient with step `fd_step * max(|x_j|, 1)`.
pub fn numeric_gradient<O: Objective>(obj: &O, x: &[f64], fd_step: f64) -> Result<Vec<f64>> {
    let (_, state) = obj.evaluate(x)?;
    gradient_at(obj, &state, x, fd_step)
}

fn gradient_at<O: Objective>(obj: &O, state: &O::State, x: &[f64], fd_step: f64) -> Result<Vec<f64>> {
    let h = steps(x, fd_step);
    (0..x.len())
        .into_par_iter()
        .map(|j| {
            let mut y = x.to_vec();
            y[j] = x[j] + h[j];
            let up = checked(j, obj.probe(state, &y, &[j]))?;
            y[j] = x[j] - h[j];
            let down = checked(j, obj.probe(state, &y, &[j]))?;
            Ok((up - down) / (2.0 * h[j]))
        })
        .collect()
}

/// Gradient and Hessian; the Hessian differences central gradients, which
/// gives the four-point mixed stencil off the diagonal.
pub fn numeric_hessian<O: Objective>(obj: &O, x: &[f64], fd_step: f64) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let (f0, state) = obj.evaluate(x)?;
    derivatives_at(obj, &state, f0, x, fd_step)
}

fn derivatives_at<O: Objective>(
    obj: &O,
    state: &O::State,
    f0: f64,
    x: &[f64],
    fd_step: f64,
) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let p = x.len();
    let h = steps(x, fd_step);
    let grad = gradient_at(obj, state, x, fd_step)?;
    let pairs: Vec<(usize, usize)> = (0..p).flat_map(|j| (j..p).map(move |k| (j, k))).collect();
    let entries: Vec<f64> = pairs
        .par_iter()
        .map(|&(j, k)| {
            let mut y = x.to_vec();
            if j == k {
                y[j] = x[j] + 2.0 * h[j];
                let up = checked(j, obj.probe(state, &y, &[j]))?;
                y[j] = x[j] - 2.0 * h[j];
                let down = checked(j, obj.probe(state, &y, &[j]))?;
                return Ok((up - 2.0 * f0 + down) / (4.0 * h[j] * h[j]));
            }
            let mut corner = |sj: f64, sk: f64| {
                y[j] = x[j] + sj * h[j];
                y[k] = x[k] + sk * h[k];
                checked(j, obj.probe(state, &y, &[j, k]))
            };
            let v = corner(1.0, 1.0)? - corner(1.0, -1.0)? - corner(-1.0, 1.0)? + corner(-1.0, -1.0)?;
            Ok(v / (4.0 * h[j] * h[k]))
        })
        .collect::<Result<_>>()?;
    let mut hess = DMatrix::zeros(p, p);
    for (&(j, k), v) in pairs.iter().zip(entries) {
        hess[(j, k)] = v;
        hess[(k, j)] = v;
    }
    Ok((grad, hess))
}

/// Final values of the three convergence criteria.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Criteria {
    pub d_loglik: f64,
    pub d_param: f64,
    /// `U^T [-H]^{-1} U`; infinite when `-H` is not positive definite.
    pub rdm: f64,
}

#[derive(Debug, Clone)]
pub struct MarquardtOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub n_iter: usize,
    pub converged: bool,
    pub criteria: Criteria,
    pub gradient: Vec<f64>,
    /// Observed information `-H` at the returned point.
    pub information: DMatrix<f64>,
    /// Accepted objective values, starting with the initial one.
    pub trace: Vec<f64>,
}

const MAX_INFLATIONS: usize = 50;

/// Inflates the diagonal of `m` until it factorizes.
fn inflate(m: &DMatrix<f64>) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    if let Some(c) = m.clone().cholesky() {
        return Ok(c);
    }
    let mut tau = 1e-2;
    for _ in 0..MAX_INFLATIONS {
        let mut mi = m.clone();
        for j in 0..m.nrows() {
            mi[(j, j)] += tau * (m[(j, j)].abs() + 1.0);
        }
        if let Some(c) = mi.cholesky() {
            return Ok(c);
        }
        tau *= 10.0;
    }
    Err(Error::Inflation(MAX_INFLATIONS))
}

fn rdm(m: &DMatrix<f64>, g: &DVector<f64>) -> f64 {
    match m.clone().cholesky() {
        Some(c) => g.dot(&c.solve(g)).max(0.0),
        None => f64::INFINITY,
    }
}

/// Maximizes `obj` from `x0`.
pub fn marquardt_maximize<O: Objective>(obj: &O, x0: &[f64], cfg: &OptimizerConfig) -> Result<MarquardtOutcome> {
    cfg.validate()?;
    if x0.len() != obj.dim() {
        return Err(Error::Length {
            got: x0.len(),
            expected: obj.dim(),
        });
    }
    let (mut f, mut state) = match obj.evaluate(x0) {
        Ok((v, s)) if v.is_finite() => (v, s),
        Ok((v, _)) => return Err(Error::InvalidStart(Box::new(Error::Domain(format!("objective value {v}"))))),
        Err(e) => return Err(Error::InvalidStart(Box::new(e))),
    };
    let mut x = x0.to_vec();
    let mut trace = vec![f];
    let mut last: Option<(f64, f64)> = None;
    let mut n_iter = 0;
    loop {
        let (g, h) = derivatives_at(obj, &state, f, &x, cfg.fd_step)?;
        let m = -h;
        let gv = DVector::from_vec(g.clone());
        let crit_rdm = rdm(&m, &gv);
        let criteria = |d: Option<(f64, f64)>| Criteria {
            d_loglik: d.map_or(f64::INFINITY, |v| v.0),
            d_param: d.map_or(f64::INFINITY, |v| v.1),
            rdm: crit_rdm,
        };
        let done = |c: &Criteria| c.d_loglik < cfg.eps_loglik && c.d_param < cfg.eps_param && c.rdm < cfg.eps_rdm;
        let outcome = |x: Vec<f64>, f: f64, n_iter: usize, converged: bool, c: Criteria, trace: Vec<f64>, m: DMatrix<f64>| {
            MarquardtOutcome {
                x,
                value: f,
                n_iter,
                converged,
                criteria: c,
                gradient: g.clone(),
                information: m,
                trace,
            }
        };
        let c = criteria(last);
        if done(&c) {
            return Ok(outcome(x, f, n_iter, true, c, trace, m));
        }
        if n_iter >= cfg.max_iter {
            return Ok(outcome(x, f, n_iter, false, c, trace, m));
        }
        n_iter += 1;
        let direction = inflate(&m)?.solve(&gv);
        let try_step = |kappa: f64| -> Option<(f64, Vec<f64>, O::State)> {
            let y: Vec<f64> = x.iter().zip(direction.iter()).map(|(a, d)| a + kappa * d).collect();
            match obj.evaluate(&y) {
                Ok((v, s)) if v.is_finite() => Some((v, y, s)),
                _ => None,
            }
        };
        let mut accepted = None;
        let mut kappa = 1.0;
        for _ in 0..=20 {
            if let Some((v, y, s)) = try_step(kappa) {
                if v > f {
                    accepted = Some((v, y, s, kappa));
                    break;
                }
            }
            kappa *= 0.5;
        }
        if let Some((v, _, _, 1.0)) = &accepted {
            let v1 = *v;
            if let Some((v2, y2, s2)) = try_step(2.0) {
                if v2 > v1 {
                    accepted = Some((v2, y2, s2, 2.0));
                }
            }
        }
        match accepted {
            Some((v, y, s, _)) => {
                let d_param = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                last = Some(((v - f).abs(), d_param));
                f = v;
                x = y;
                state = s;
                trace.push(f);
            }
            None => {
                let c = criteria(Some((0.0, 0.0)));
                let conv = done(&c);
                return Ok(outcome(x, f, n_iter, conv, c, trace, m));
            }
        }
    }
}

/// Log-likelihood as an [`Objective`] over the free coordinates.
pub struct LikelihoodObjective<'a> {
    pub ctx: LikelihoodContext<'a>,
    pub free: Vec<usize>,
    pub base: Vec<f64>,
}

impl<'a> LikelihoodObjective<'a> {
    pub fn new(data: &'a Dataset, spec: &'a ModelSpec, start: &ParameterSet) -> Result<Self> {
        let ctx = LikelihoodContext::new(data, spec)?;
        let free = ctx.layout.free_indices(spec)?;
        start.check_shape(spec)?;
        Ok(Self {
            ctx,
            free,
            base: start.to_vector(),
        })
    }

    pub fn free_vector(&self, theta: &ParameterSet) -> Vec<f64> {
        let full = theta.to_vector();
        self.free.iter().map(|&i| full[i]).collect()
    }

    pub fn theta(&self, x: &[f64]) -> Result<ParameterSet> {
        let mut full = self.base.clone();
        for (&i, v) in self.free.iter().zip(x) {
            full[i] = *v;
        }
        ParameterSet::from_vector(self.ctx.spec, &full)
    }
}

impl Objective for LikelihoodObjective<'_> {
    type State = EvalState;

    fn dim(&self) -> usize {
        self.free.len()
    }

    fn evaluate(&self, x: &[f64]) -> Result<(f64, EvalState)> {
        let state = self.ctx.evaluate(&self.theta(x)?)?;
        Ok((state.value, state))
    }

    fn probe(&self, base: &EvalState, x: &[f64], changed: &[usize]) -> Result<f64> {
        let full: Vec<usize> = changed.iter().map(|&c| self.free[c]).collect();
        self.ctx.probe(base, &self.theta(x)?, &full)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub spec: ModelSpec,
    pub theta_hat: ParameterSet,
    pub names: Vec<String>,
    /// Flat stored-scale estimates in layout order.
    pub estimates: Vec<f64>,
    /// Standard errors of the stored-scale coordinates; 0 for fixed ones.
    pub se: Vec<f64>,
    /// Natural-scale estimates and delta-method standard errors.
    pub natural: Vec<f64>,
    pub se_natural: Vec<f64>,
    pub loglik: f64,
    pub bic: f64,
    pub n_free: usize,
    pub n_subjects: usize,
    pub n_iter: usize,
    pub converged: bool,
    pub criteria: Criteria,
    pub start_index: usize,
    /// Final log-likelihood of every start (`None` when the start failed).
    pub start_logliks: Vec<Option<f64>>,
}

/// `-2 loglik + p log N`.
pub fn bic(loglik: f64, n_free: usize, n_subjects: usize) -> f64 {
    -2.0 * loglik + n_free as f64 * (n_subjects as f64).ln()
}

/// Heuristic starting point: Weibull roots 3 and 0.1, no covariate effects,
/// equal class sizes and longitudinal values from pooled moments with class
/// intercepts spread around the mean.
pub fn default_init(data: &Dataset, spec: &ModelSpec) -> ParameterSet {
    let mut th = ParameterSet::zeros(spec);
    for tr in &mut th.weibull {
        for w in tr.iter_mut() {
            *w = WeibullRoots { shape: 3.0, scale: 0.1 };
        }
    }
    for (k, m) in spec.markers.iter().enumerate() {
        if m.link == LinkKind::BetaCdf {
            th.eta[k] = vec![1.0, 1.0, 0.5, 0.5];
        }
    }
    let mut vals = Vec::new();
    for s in &data.subjects {
        for o in &s.obs {
            let link = LinkFunction::for_marker(spec, &th, o.marker);
            if let Ok(t) = link.transform(o.value) {
                vals.push(t.y_tilde);
            }
        }
    }
    let n = vals.len().max(1) as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt().max(1e-3);
    let g_n = spec.n_classes;
    if let Some(ti) = spec.class_terms.iter().position(|t| t.covariate.is_none() && t.time_power == 0) {
        for g in 0..g_n {
            let spread = if g_n > 1 { g as f64 / (g_n - 1) as f64 - 0.5 } else { 0.0 };
            th.beta_class[g][ti] = mean + sd * spread;
        }
    }
    let q = spec.random_terms.len();
    for i in 0..q {
        th.chol[i * (i + 1) / 2 + i] = 0.5 * sd;
    }
    th.sigma_e = vec![(0.5 * sd).sqrt(); spec.n_markers()];
    th
}

/// Starting values for a `G`-class model built from a one-class fit.
///
/// Every class inherits the one-class estimates; class-specific intercepts are
/// spread by one random-intercept standard deviation and the class-specific
/// dementia intensity scales by +/- 5% on the root scale.
pub fn init_from_one_class(one: &ParameterSet, one_spec: &ModelSpec, spec: &ModelSpec) -> Result<ParameterSet> {
    if one_spec.n_classes != 1 {
        return Err(Error::Spec("initial fit must have a single class".into()));
    }
    let mut probe = one_spec.clone();
    probe.n_classes = spec.n_classes;
    if probe != *spec {
        return Err(Error::Spec("specifications differ beyond the number of classes".into()));
    }
    one.check_shape(one_spec)?;
    let mut th = ParameterSet::zeros(spec);
    let g_n = spec.n_classes;
    let spread = |g: usize| if g_n > 1 { g as f64 / (g_n - 1) as f64 - 0.5 } else { 0.0 };
    for (tr, per_class) in th.weibull.iter_mut().enumerate() {
        for (g, w) in per_class.iter_mut().enumerate() {
            *w = one.weibull[tr][0];
            if tr == 0 {
                w.scale *= 1.0 + 0.1 * spread(g);
            }
        }
    }
    for (tr, blocks) in th.gamma.iter_mut().enumerate() {
        for b in blocks.iter_mut() {
            b.clone_from(&one.gamma[tr][0]);
        }
    }
    let sd = one.chol.first().map_or(1.0, |u| u.abs().max(1e-3));
    let intercept = spec.class_terms.iter().position(|t| t.covariate.is_none() && t.time_power == 0);
    for (g, b) in th.beta_class.iter_mut().enumerate() {
        b.clone_from(&one.beta_class[0]);
        if let Some(ti) = intercept {
            b[ti] += 2.0 * sd * spread(g);
        }
    }
    th.beta_common.clone_from(&one.beta_common);
    th.beta_marker.clone_from(&one.beta_marker);
    th.chol.clone_from(&one.chol);
    th.sigma_e.clone_from(&one.sigma_e);
    th.eta.clone_from(&one.eta);
    Ok(th)
}

fn jittered(x: &[f64], sd: f64, seed: u64, start: usize) -> Vec<f64> {
    let mut rng = rng_for(seed, 1_000_000 + start as u64);
    x.iter()
        .map(|v| {
            let z: f64 = StandardNormal.sample(&mut rng);
            v * (1.0 + sd * z)
        })
        .collect()
}

/// Multi-start maximum likelihood fit.
pub fn fit(data: &Dataset, spec: &ModelSpec, init: Option<&ParameterSet>, cfg: &OptimizerConfig) -> Result<FitResult> {
    cfg.validate()?;
    let start = match init {
        Some(t) => t.clone(),
        None => default_init(data, spec),
    };
    let obj = LikelihoodObjective::new(data, spec, &start)?;
    let x0 = obj.free_vector(&start);
    let starts: Vec<Vec<f64>> = (0..cfg.n_starts)
        .map(|k| if k == 0 { x0.clone() } else { jittered(&x0, cfg.jitter, cfg.seed, k) })
        .collect();
    let runs: Vec<Result<MarquardtOutcome>> = starts.par_iter().map(|s| marquardt_maximize(&obj, s, cfg)).collect();
    let start_logliks: Vec<Option<f64>> = runs.iter().map(|r| r.as_ref().ok().map(|o| o.value)).collect();
    let better = |a: &MarquardtOutcome, b: &MarquardtOutcome| (a.converged, a.value) > (b.converged, b.value);
    let mut best: Option<(usize, &MarquardtOutcome)> = None;
    let mut first_err = None;
    for (k, r) in runs.iter().enumerate() {
        match r {
            Ok(o) => {
                if best.is_none_or(|(_, b)| better(o, b)) {
                    best = Some((k, o));
                }
            }
            Err(e) if first_err.is_none() => first_err = Some(e.to_string()),
            Err(_) => {}
        }
    }
    let Some((start_index, out)) = best else {
        return Err(Error::InvalidStart(Box::new(Error::Domain(
            first_err.unwrap_or_else(|| "no start".into()),
        ))));
    };
    let layout = ParamLayout::new(spec);
    let mut theta_hat = obj.theta(&out.x)?;
    theta_hat.canonicalize();
    let estimates = theta_hat.to_vector();
    let mut se = vec![0.0; layout.len()];
    match out.information.clone().try_inverse() {
        Some(cov) => {
            for (a, &i) in obj.free.iter().enumerate() {
                let v = cov[(a, a)];
                se[i] = if v >= 0.0 { v.sqrt() } else { f64::NAN };
            }
        }
        None => {
            for &i in &obj.free {
                se[i] = f64::NAN;
            }
        }
    }
    let natural = (0..layout.len()).map(|i| layout.natural(i, estimates[i])).collect();
    let se_natural = (0..layout.len()).map(|i| layout.natural_se(i, estimates[i], se[i])).collect();
    Ok(FitResult {
        spec: spec.clone(),
        theta_hat,
        names: layout.names(),
        estimates,
        se,
        natural,
        se_natural,
        loglik: out.value,
        bic: bic(out.value, obj.free.len(), data.len()),
        n_free: obj.free.len(),
        n_subjects: data.len(),
        n_iter: out.n_iter,
        converged: out.converged,
        criteria: out.criteria,
        start_index,
        start_logliks,
    })
}
