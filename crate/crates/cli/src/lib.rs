//! Command-line driver: run configuration, commands and exit codes.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use lcid::data::{load_dataset, write_events, write_observations, Dataset};
use lcid::optimizer::{fit, FitResult, OptimizerConfig};
use lcid::postfit::{
    conditional_trajectory, cumulative_incidence, gof_weighted_means, posterior_probs, write_gof, write_incidence,
    write_posterior, write_trajectories, Condition, ConditionKind, Profile,
};
use lcid::replicate::{run_replicates, select_classes, ReplicateConfig};
use lcid::simulator::{generate_dataset, impute_competing, SimulationDesign};
use lcid::spec::{EventModel, ModelSpec};
use serde::{Deserialize, Serialize};

pub mod cli;

/// Failure of a command, classified for the process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("{0}")]
    NotConverged(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Other(_) => 1,
            Self::Config(_) => 2,
            Self::Data(_) => 3,
            Self::NotConverged(_) => 4,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Other(e.to_string())
    }
}

impl From<lcid::Error> for CliError {
    fn from(e: lcid::Error) -> Self {
        use lcid::Error as E;
        match e {
            E::Spec(_) => Self::Config(e.to_string()),
            E::Parse { .. } | E::InvalidSubject { .. } | E::Csv(_) => Self::Data(e.to_string()),
            _ => Self::Other(e.to_string()),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Full description of a run, read from a TOML file and overridden by flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Directory receiving every output file.
    #[serde(default = "default_output")]
    pub output: PathBuf,
    pub events: Option<PathBuf>,
    pub observations: Option<PathBuf>,
    /// A previous `fit.json`: starting values for `fit`, the model for `postfit`.
    pub fit: Option<PathBuf>,
    /// Worker threads; all cores when absent.
    pub workers: Option<usize>,
    /// Model specification; the two-class linear-trend model when absent.
    pub model: Option<ModelSpec>,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub simulation: SimulationOptions,
    #[serde(default)]
    pub replicate: ReplicateOptions,
    #[serde(default)]
    pub select: SelectOptions,
    #[serde(default)]
    pub postfit: PostfitOptions,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output: default_output(),
            events: None,
            observations: None,
            fit: None,
            workers: None,
            model: None,
            optimizer: OptimizerConfig::default(),
            simulation: SimulationOptions::default(),
            replicate: ReplicateOptions::default(),
            select: SelectOptions::default(),
            postfit: PostfitOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationOptions {
    /// `table1` or `table1-printed`.
    pub design: String,
    pub interval: f64,
    pub n_subjects: usize,
    pub seed: u64,
    pub markovian: bool,
    pub follow_up: f64,
    pub entry_age: (f64, f64),
    pub covariate_prob: f64,
}

impl Default for SimulationOptions {
    fn default() -> Self {
        Self {
            design: "table1".into(),
            interval: 2.0,
            n_subjects: 500,
            seed: 1,
            markovian: true,
            follow_up: 20.0,
            entry_age: (65.0, 85.0),
            covariate_prob: 0.5,
        }
    }
}

impl SimulationOptions {
    pub fn design(&self) -> CliResult<SimulationDesign> {
        let mut d = SimulationDesign::named(&self.design, self.interval, self.n_subjects, self.markovian, self.seed)?;
        d.follow_up = self.follow_up;
        d.entry_age = self.entry_age;
        d.covariate_prob = self.covariate_prob;
        d.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(d)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReplicateOptions {
    pub replicates: usize,
    pub competing: bool,
    pub start_at_truth: bool,
}

impl Default for ReplicateOptions {
    fn default() -> Self {
        Self {
            replicates: 50,
            competing: true,
            start_at_truth: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectOptions {
    pub classes: Vec<usize>,
}

impl Default for SelectOptions {
    fn default() -> Self {
        Self { classes: vec![1, 2, 3] }
    }
}

/// One conditioning event of a predicted trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioOptions {
    pub kind: ConditionKind,
    pub age: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PostfitOptions {
    pub bin_width: f64,
    /// Marker of the trajectories; the first marker when absent.
    pub marker: Option<String>,
    pub age_from: f64,
    pub age_to: f64,
    pub age_step: f64,
    /// Covariate values for incidences and trajectories; unset covariates are 0.
    pub profile: BTreeMap<String, f64>,
    pub scenarios: Vec<ScenarioOptions>,
}

impl Default for PostfitOptions {
    fn default() -> Self {
        let sc = |kind, age| ScenarioOptions { kind, age };
        Self {
            bin_width: 5.0,
            marker: None,
            age_from: 65.0,
            age_to: 100.0,
            age_step: 1.0,
            profile: BTreeMap::new(),
            scenarios: vec![
                sc(ConditionKind::HealthyAlive, 95.0),
                sc(ConditionKind::HealthyAlive, 85.0),
                sc(ConditionKind::DiedDementiaFree, 80.0),
                sc(ConditionKind::DementiaOnset, 80.0),
            ],
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string(self).map_err(|e| CliError::Other(e.to_string()))
    }

    pub fn model_spec(&self) -> CliResult<ModelSpec> {
        let spec = self
            .model
            .clone()
            .unwrap_or_else(|| ModelSpec::linear_trend(2, EventModel::IllnessDeath, true));
        spec.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(spec)
    }

    fn input(&self, which: &str, path: &Option<PathBuf>) -> CliResult<PathBuf> {
        path.clone()
            .ok_or_else(|| CliError::Config(format!("no {which} file given (set `{which}` or pass --{which})")))
    }

    pub fn load_data(&self, spec: &ModelSpec) -> CliResult<Dataset> {
        let ev = self.input("events", &self.events)?;
        let obs = self.input("observations", &self.observations)?;
        let mut data = load_dataset(&ev, &obs, spec).map_err(|e| match e {
            lcid::Error::Io(io) => CliError::Data(format!("{} / {}: {io}", ev.display(), obs.display())),
            lcid::Error::Spec(m) => CliError::Data(m),
            other => CliError::Data(other.to_string()),
        })?;
        if spec.event_model == EventModel::CompetingRisks {
            data = impute_competing(&data);
            data.prepare(spec).map_err(|e| CliError::Data(e.to_string()))?;
        }
        Ok(data)
    }

    fn validate(&self) -> CliResult<()> {
        self.optimizer.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.workers == Some(0) {
            return Err(CliError::Config("workers must be at least 1".into()));
        }
        Ok(())
    }
}

fn create(dir: &Path, name: &str) -> CliResult<BufWriter<File>> {
    let path = dir.join(name);
    let f = File::create(&path).map_err(|e| CliError::Other(format!("{}: {e}", path.display())))?;
    Ok(BufWriter::new(f))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> CliResult<()> {
    let mut w = create(dir, name)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::Other(e.to_string()))?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn prepare_output(cfg: &RunConfig) -> CliResult<()> {
    fs::create_dir_all(&cfg.output).map_err(|e| CliError::Other(format!("{}: {e}", cfg.output.display())))?;
    let mut w = create(&cfg.output, "config.toml")?;
    w.write_all(cfg.to_toml()?.as_bytes())?;
    w.flush()?;
    Ok(())
}

/// Reads a `fit.json` written by `fit`.
pub fn read_fit(path: &Path) -> CliResult<FitResult> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    parse_fit(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Parses and checks the contents of a `fit.json`.
pub fn parse_fit(text: &str) -> std::result::Result<FitResult, String> {
    let f: FitResult = serde_json::from_str(text).map_err(|e| e.to_string())?;
    f.spec.validate().map_err(|e| e.to_string())?;
    f.theta_hat.check_shape(&f.spec).map_err(|e| e.to_string())?;
    Ok(f)
}

pub fn cmd_simulate(cfg: &RunConfig) -> CliResult<()> {
    cfg.validate()?;
    let design = cfg.simulation.design()?;
    prepare_output(cfg)?;
    let sim = generate_dataset(&design)?;
    let mut ev = create(&cfg.output, "events.csv")?;
    write_events(&sim.data, &mut ev)?;
    ev.flush()?;
    let mut obs = create(&cfg.output, "observations.csv")?;
    write_observations(&sim.data, &design.spec, &mut obs)?;
    obs.flush()?;
    write_json(&cfg.output, "summary.json", &sim.summary)?;
    Ok(())
}

pub fn cmd_fit(cfg: &RunConfig) -> CliResult<FitResult> {
    cfg.validate()?;
    let spec = cfg.model_spec()?;
    let init = match &cfg.fit {
        Some(p) => {
            let prev = read_fit(p)?;
            if prev.spec != spec {
                return Err(CliError::Config(format!("{} was fitted with a different model", p.display())));
            }
            Some(prev.theta_hat)
        }
        None => None,
    };
    let data = cfg.load_data(&spec)?;
    prepare_output(cfg)?;
    let result = fit(&data, &spec, init.as_ref(), &cfg.optimizer)?;
    write_json(&cfg.output, "fit.json", &result)?;
    if !result.converged {
        return Err(CliError::NotConverged(format!(
            "no convergence after {} iterations (loglik {:.6})",
            result.n_iter, result.loglik
        )));
    }
    Ok(result)
}

pub fn cmd_select(cfg: &RunConfig) -> CliResult<lcid::replicate::Selection> {
    cfg.validate()?;
    let spec = cfg.model_spec()?;
    if cfg.select.classes.is_empty() || cfg.select.classes.contains(&0) {
        return Err(CliError::Config("select.classes must list positive class counts".into()));
    }
    let data = cfg.load_data(&spec)?;
    prepare_output(cfg)?;
    let sel = select_classes(&data, &spec, &cfg.select.classes, &cfg.optimizer);
    write_json(&cfg.output, "select.json", &sel)?;
    let mut w = csv::Writer::from_writer(create(&cfg.output, "select.csv")?);
    w.write_record(["classes", "loglik", "n_free", "bic", "converged"])
        .map_err(|e| CliError::Other(e.to_string()))?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x}"));
    for r in &sel.rows {
        w.write_record([
            r.n_classes.to_string(),
            opt(r.loglik),
            r.n_free.map_or(String::new(), |n| n.to_string()),
            opt(r.bic),
            r.converged.to_string(),
        ])
        .map_err(|e| CliError::Other(e.to_string()))?;
    }
    w.flush()?;
    if sel.best.is_none() {
        return Err(CliError::NotConverged("no class count could be fitted".into()));
    }
    Ok(sel)
}

pub fn cmd_replicate(cfg: &RunConfig) -> CliResult<()> {
    cfg.validate()?;
    let rc = ReplicateConfig {
        design: cfg.simulation.design()?,
        n_replicates: cfg.replicate.replicates,
        optimizer: cfg.optimizer.clone(),
        competing: cfg.replicate.competing,
        start_at_truth: cfg.replicate.start_at_truth,
    };
    if rc.n_replicates == 0 {
        return Err(CliError::Config("replicate.replicates must be at least 1".into()));
    }
    prepare_output(cfg)?;
    let report = run_replicates(&rc)?;
    for t in std::iter::once(&report.illness_death).chain(report.competing.as_ref()) {
        let w = create(&cfg.output, &format!("replicate_{}.csv", t.model))?;
        t.write_csv(w)?;
    }
    write_json(&cfg.output, "replicate.json", &report)?;
    let runs = &report.runs;
    for r in runs {
        if let Err(e) = &r.illness_death {
            eprintln!("replicate {}: illness-death fit failed: {e}", r.replicate);
        }
        if let Some(Err(e)) = &r.competing {
            eprintln!("replicate {}: competing-risks fit failed: {e}", r.replicate);
        }
    }
    if report.illness_death.n_converged == 0 {
        return Err(CliError::NotConverged("no replicate converged".into()));
    }
    Ok(())
}

fn full_profile(spec: &ModelSpec, given: &BTreeMap<String, f64>) -> Profile {
    let mut names: Vec<String> = spec.class_covariates.clone();
    names.extend(spec.observation_covariates());
    for tr in lcid::hazards::Transition::ALL {
        names.extend(spec.event_covariates.get(tr).iter().cloned());
    }
    let mut map = given.clone();
    for n in names {
        map.entry(n).or_insert(0.0);
    }
    Profile(map)
}

pub fn cmd_postfit(cfg: &RunConfig) -> CliResult<()> {
    cfg.validate()?;
    let path = cfg
        .fit
        .as_ref()
        .ok_or_else(|| CliError::Config("postfit needs a fit file (set `fit` or pass --fit)".into()))?;
    let fitted = read_fit(path)?;
    let spec = &fitted.spec;
    let theta = &fitted.theta_hat;
    let opts = &cfg.postfit;
    if !(opts.age_step > 0.0 && opts.age_to >= opts.age_from && opts.age_from > 0.0) {
        return Err(CliError::Config("postfit ages need 0 < age_from <= age_to and age_step > 0".into()));
    }
    let marker = match &opts.marker {
        Some(m) => spec
            .marker_index(m)
            .ok_or_else(|| CliError::Config(format!("unknown marker `{m}`")))?,
        None => 0,
    };
    let data = cfg.load_data(spec)?;
    prepare_output(cfg)?;

    let post = posterior_probs(&data, theta, spec)?;
    write_posterior(&post, create(&cfg.output, "posterior.csv")?)?;
    let gof = gof_weighted_means(&data, theta, spec, &post, opts.bin_width).map_err(|e| CliError::Config(e.to_string()))?;
    write_gof(&gof, create(&cfg.output, "gof.csv")?)?;

    let n_ages = ((opts.age_to - opts.age_from) / opts.age_step + 1e-9).floor() as usize + 1;
    let ages: Vec<f64> = (0..n_ages).map(|i| opts.age_from + i as f64 * opts.age_step).collect();
    let profile = full_profile(spec, &opts.profile);
    let incidence = (0..spec.n_classes)
        .map(|g| cumulative_incidence(theta, spec, g, &profile, &ages).map(|c| (g, c)))
        .collect::<lcid::Result<Vec<_>>>()?;
    write_incidence(&incidence, create(&cfg.output, "incidence.csv")?)?;

    let mut curves = Vec::new();
    for sc in &opts.scenarios {
        let cond = Condition { kind: sc.kind, age: sc.age, profile: profile.clone() };
        let grid: Vec<f64> = ages.iter().copied().filter(|a| *a <= sc.age).collect();
        let traj = conditional_trajectory(theta, spec, &cond, marker, &grid)?;
        let label = serde_json::to_value(sc.kind).map_err(|e| CliError::Other(e.to_string()))?;
        curves.push((format!("{}@{}", label.as_str().unwrap_or_default(), sc.age), traj));
    }
    write_trajectories(&curves, create(&cfg.output, "trajectories.csv")?)?;
    Ok(())
}
