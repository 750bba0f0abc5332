//! Simulation-study driver: repeated generate/fit cycles for the
//! illness-death and naive competing-risks models, and BIC sweeps over `G`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::Result;
use crate::optimizer::{fit, init_from_one_class, FitResult, OptimizerConfig};
use crate::params::{ParamLayout, ParameterSet};
use crate::simulator::{generate_replicate, impute_competing, DatasetSummary, SimulationDesign};
use crate::spec::{EventModel, ModelSpec};

/// Value of coordinate `i` on the reporting scale: Weibull entries stay on
/// the square-root scale, other squared coordinates are reported naturally.
pub fn reported(layout: &ParamLayout, i: usize, stored: f64) -> f64 {
    if is_weibull(layout, i) {
        stored.abs()
    } else {
        layout.natural(i, stored)
    }
}

fn reported_se(layout: &ParamLayout, i: usize, stored: f64, se: f64) -> f64 {
    if is_weibull(layout, i) {
        se
    } else {
        layout.natural_se(i, stored, se)
    }
}

fn is_weibull(layout: &ParamLayout, i: usize) -> bool {
    matches!(layout.params[i].kind, crate::params::ParamKind::Weibull { .. })
}

/// Competing-risks counterpart of an illness-death parameter set.
pub fn competing_truth(truth: &ParameterSet, spec: &ModelSpec) -> (ModelSpec, ParameterSet) {
    let mut cr_spec = spec.clone();
    cr_spec.event_model = EventModel::CompetingRisks;
    cr_spec.event_covariates.ill_dead.clear();
    let mut cr = truth.clone();
    cr.weibull.truncate(2);
    cr.gamma.truncate(2);
    (cr_spec, cr)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplicateConfig {
    pub design: SimulationDesign,
    pub n_replicates: usize,
    pub optimizer: OptimizerConfig,
    /// Also fit the naive competing-risks model on imputed data.
    #[serde(default = "yes")]
    pub competing: bool,
    /// Start every fit at the truth (otherwise at the default heuristic).
    #[serde(default = "yes")]
    pub start_at_truth: bool,
}

fn yes() -> bool {
    true
}

/// Estimates of one fit on the reporting scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub converged: bool,
    pub loglik: f64,
    pub n_iter: usize,
    pub estimates: Vec<f64>,
    pub ase: Vec<f64>,
}

impl FitRecord {
    fn new(f: &FitResult) -> Self {
        let layout = ParamLayout::new(&f.spec);
        Self {
            converged: f.converged,
            loglik: f.loglik,
            n_iter: f.n_iter,
            estimates: (0..layout.len()).map(|i| reported(&layout, i, f.estimates[i])).collect(),
            ase: (0..layout.len()).map(|i| reported_se(&layout, i, f.estimates[i], f.se[i])).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRun {
    pub replicate: usize,
    pub summary: DatasetSummary,
    pub illness_death: std::result::Result<FitRecord, String>,
    pub competing: Option<std::result::Result<FitRecord, String>>,
}

/// Per-parameter Monte Carlo summary over converged replicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub name: String,
    pub truth: f64,
    pub mean: f64,
    pub mean_ase: f64,
    /// Empirical SD of the estimates; absent with fewer than two replicates.
    pub ese: Option<f64>,
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationTable {
    pub model: String,
    pub n_converged: usize,
    pub n_not_converged: usize,
    pub n_failed: usize,
    pub rows: Vec<ParamSummary>,
}

impl ReplicationTable {
    pub fn row(&self, name: &str) -> Option<&ParamSummary> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn build(model: &str, spec: &ModelSpec, truth: &ParameterSet, fits: &[&std::result::Result<FitRecord, String>]) -> Self {
        let layout = ParamLayout::new(spec);
        let tv = truth.to_vector();
        let ok: Vec<&FitRecord> = fits.iter().filter_map(|f| f.as_ref().ok()).filter(|f| f.converged).collect();
        let n_failed = fits.iter().filter(|f| f.is_err()).count();
        let n = ok.len() as f64;
        let rows = (0..layout.len())
            .map(|i| {
                let truth = reported(&layout, i, tv[i]);
                let est: Vec<f64> = ok.iter().map(|f| f.estimates[i]).collect();
                let mean = est.iter().sum::<f64>() / n;
                let ese = (ok.len() > 1).then(|| (est.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
                let covered = ok
                    .iter()
                    .filter(|f| (f.estimates[i] - truth).abs() <= 1.96 * f.ase[i])
                    .count();
                ParamSummary {
                    name: layout.params[i].name.clone(),
                    truth,
                    mean,
                    mean_ase: ok.iter().map(|f| f.ase[i]).sum::<f64>() / n,
                    ese,
                    coverage: covered as f64 / n,
                }
            })
            .collect();
        Self {
            model: model.to_string(),
            n_converged: ok.len(),
            n_not_converged: fits.len() - ok.len() - n_failed,
            n_failed,
            rows,
        }
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["model", "parameter", "truth", "mean", "mean_ase", "ese", "coverage", "n_converged"])?;
        for r in &self.rows {
            out.write_record([
                self.model.clone(),
                r.name.clone(),
                r.truth.to_string(),
                r.mean.to_string(),
                r.mean_ase.to_string(),
                r.ese.map(|v| v.to_string()).unwrap_or_default(),
                r.coverage.to_string(),
                self.n_converged.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationReport {
    pub illness_death: ReplicationTable,
    pub competing: Option<ReplicationTable>,
    pub runs: Vec<ReplicateRun>,
}

fn one_fit(data: &Dataset, spec: &ModelSpec, truth: &ParameterSet, cfg: &ReplicateConfig) -> std::result::Result<FitRecord, String> {
    let init = cfg.start_at_truth.then_some(truth);
    fit(data, spec, init, &cfg.optimizer).map(|f| FitRecord::new(&f)).map_err(|e| e.to_string())
}

/// Runs one replicate: generate, fit both models.
pub fn run_replicate(cfg: &ReplicateConfig, r: usize) -> Result<ReplicateRun> {
    let design = &cfg.design;
    let sim = generate_replicate(design, r as u64)?;
    let illness_death = one_fit(&sim.data, &design.spec, &design.truth, cfg);
    let competing = cfg.competing.then(|| {
        let (cr_spec, cr_truth) = competing_truth(&design.truth, &design.spec);
        let mut cr_data = impute_competing(&sim.data);
        match cr_data.prepare(&cr_spec) {
            Ok(()) => one_fit(&cr_data, &cr_spec, &cr_truth, cfg),
            Err(e) => Err(e.to_string()),
        }
    });
    Ok(ReplicateRun {
        replicate: r,
        summary: sim.summary,
        illness_death,
        competing,
    })
}

/// Runs all replicates in parallel; results are ordered by replicate index.
pub fn run_replicates(cfg: &ReplicateConfig) -> Result<ReplicationReport> {
    cfg.design.validate()?;
    cfg.optimizer.validate()?;
    let runs: Vec<ReplicateRun> = (0..cfg.n_replicates)
        .into_par_iter()
        .map(|r| run_replicate(cfg, r))
        .collect::<Result<_>>()?;
    Ok(summarize(cfg, runs))
}

pub fn summarize(cfg: &ReplicateConfig, runs: Vec<ReplicateRun>) -> ReplicationReport {
    let design = &cfg.design;
    let id_fits: Vec<_> = runs.iter().map(|r| &r.illness_death).collect();
    let illness_death = ReplicationTable::build("illness-death", &design.spec, &design.truth, &id_fits);
    let competing = cfg.competing.then(|| {
        let (cr_spec, cr_truth) = competing_truth(&design.truth, &design.spec);
        let fits: Vec<_> = runs.iter().filter_map(|r| r.competing.as_ref()).collect();
        ReplicationTable::build("competing-risks", &cr_spec, &cr_truth, &fits)
    });
    ReplicationReport {
        illness_death,
        competing,
        runs,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectRow {
    pub n_classes: usize,
    pub loglik: Option<f64>,
    pub bic: Option<f64>,
    pub n_free: Option<usize>,
    pub converged: bool,
    pub error: Option<String>,
}

/// Fits `G = 1..=max_classes` and reports BIC; `best` picks the minimum BIC
/// among successful fits, preferring converged ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub rows: Vec<SelectRow>,
    pub best: Option<usize>,
}

pub fn select_classes(data: &Dataset, base: &ModelSpec, classes: &[usize], cfg: &OptimizerConfig) -> Selection {
    let mut one_spec = base.clone();
    one_spec.n_classes = 1;
    let one = fit(data, &one_spec, None, cfg).ok();
    let rows: Vec<SelectRow> = classes
        .iter()
        .map(|&g| {
            let mut spec = base.clone();
            spec.n_classes = g;
            let result = match (&one, g) {
                (Some(f), 1) => Ok(f.clone()),
                (Some(f), _) => {
                    let seeded = init_from_one_class(&f.theta_hat, &one_spec, &spec).and_then(|init| fit(data, &spec, Some(&init), cfg));
                    let plain = fit(data, &spec, None, cfg);
                    match (seeded, plain) {
                        (Ok(a), Ok(b)) => Ok(if (b.converged, b.loglik) > (a.converged, a.loglik) { b } else { a }),
                        (Ok(a), Err(_)) => Ok(a),
                        (Err(_), b) => b,
                    }
                }
                (None, _) => fit(data, &spec, None, cfg),
            };
            match result {
                Ok(f) => SelectRow {
                    n_classes: g,
                    loglik: Some(f.loglik),
                    bic: Some(f.bic),
                    n_free: Some(f.n_free),
                    converged: f.converged,
                    error: None,
                },
                Err(e) => SelectRow {
                    n_classes: g,
                    loglik: None,
                    bic: None,
                    n_free: None,
                    converged: false,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    let pick = |need_conv: bool| {
        rows.iter()
            .filter(|r| r.bic.is_some() && (r.converged || !need_conv))
            .min_by(|a, b| a.bic.unwrap().total_cmp(&b.bic.unwrap()))
            .map(|r| r.n_classes)
    };
    let best = pick(true).or_else(|| pick(false));
    Selection { rows, best }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn competing_truth_drops_ill_dead() {
        let spec = ModelSpec::linear_trend(2, EventModel::IllnessDeath, true);
        let truth = crate::simulator::table1_truth(&spec, false);
        let (cr_spec, cr) = competing_truth(&truth, &spec);
        cr.check_shape(&cr_spec).unwrap();
        assert_eq!(cr.to_vector().len(), truth.to_vector().len() - 5);
    }

    #[test]
    fn single_replicate_has_no_empirical_se() {
        let rec = FitRecord {
            converged: true,
            loglik: -1.0,
            n_iter: 1,
            estimates: vec![0.0; 25],
            ase: vec![1.0; 25],
        };
        let spec = ModelSpec::linear_trend(2, EventModel::IllnessDeath, true);
        let truth = crate::simulator::table1_truth(&spec, false);
        let fits = [Ok(rec)];
        let refs: Vec<_> = fits.iter().collect();
        let t = ReplicationTable::build("illness-death", &spec, &truth, &refs);
        assert!(t.rows.iter().all(|r| r.ese.is_none()));
        assert_eq!(t.row("weibull01_shape_1").unwrap().truth, 3.2);
        assert!((t.row("sigma_e_Y").unwrap().truth - 3.47).abs() < 1e-12);
    }
}
