//! Flag parsing and dispatch.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use lcid::spec::EventModel;

use crate::{cmd_fit, cmd_postfit, cmd_replicate, cmd_select, cmd_simulate, CliError, CliResult, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "lcid", version, about = "Joint latent class illness-death models")]
pub struct Cli {
    /// TOML run configuration; flags override its keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true, env = "LCID_WORKERS")]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a cohort: events.csv, observations.csv, summary.json.
    Simulate(SimulationArgs),
    /// Fit one model: fit.json.
    Fit {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        optimizer: OptimizerArgs,
        /// Previous fit.json used as starting values.
        #[arg(long = "init")]
        init: Option<PathBuf>,
    },
    /// Simulate and refit R cohorts with both models.
    Replicate {
        #[command(flatten)]
        simulation: SimulationArgs,
        #[command(flatten)]
        optimizer: OptimizerArgs,
        #[arg(long)]
        replicates: Option<usize>,
        /// Also fit the competing-risks model.
        #[arg(long)]
        competing: Option<bool>,
        #[arg(long)]
        start_at_truth: Option<bool>,
    },
    /// Posterior classes, goodness of fit, incidences and trajectories.
    Postfit {
        #[command(flatten)]
        data: DataArgs,
        /// fit.json to post-process.
        #[arg(long)]
        fit: Option<PathBuf>,
        #[arg(long)]
        bin_width: Option<f64>,
        #[arg(long)]
        marker: Option<String>,
    },
    /// BIC over a range of class counts.
    Select {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        optimizer: OptimizerArgs,
        /// Comma-separated class counts.
        #[arg(long, value_delimiter = ',')]
        classes: Option<Vec<usize>>,
    },
}

#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub events: Option<PathBuf>,
    #[arg(long)]
    pub observations: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Number of latent classes.
    #[arg(long = "n-classes")]
    pub n_classes: Option<usize>,
    /// illness-death or competing-risks.
    #[arg(long, value_parser = parse_event_model)]
    pub event_model: Option<EventModel>,
    #[arg(long)]
    pub markovian: Option<bool>,
    #[arg(long)]
    pub quadrature_nodes: Option<usize>,
}

#[derive(Debug, Args)]
pub struct OptimizerArgs {
    #[arg(long)]
    pub max_iter: Option<usize>,
    #[arg(long)]
    pub n_starts: Option<usize>,
    #[arg(long = "optimizer-seed")]
    pub optimizer_seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SimulationArgs {
    /// table1 or table1-printed.
    #[arg(long)]
    pub design: Option<String>,
    /// Years between visits.
    #[arg(long)]
    pub interval: Option<f64>,
    /// Number of subjects.
    #[arg(long = "n")]
    pub n_subjects: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long = "sim-markovian")]
    pub markovian: Option<bool>,
}

fn parse_event_model(s: &str) -> Result<EventModel, String> {
    match s {
        "illness-death" => Ok(EventModel::IllnessDeath),
        "competing-risks" => Ok(EventModel::CompetingRisks),
        _ => Err(format!("`{s}`: expected illness-death or competing-risks")),
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

impl DataArgs {
    fn apply(self, cfg: &mut RunConfig) {
        if self.events.is_some() {
            cfg.events = self.events;
        }
        if self.observations.is_some() {
            cfg.observations = self.observations;
        }
    }
}

impl ModelArgs {
    fn apply(self, cfg: &mut RunConfig) -> CliResult<()> {
        let mut spec = cfg.model_spec()?;
        let event_model_changed = self.event_model.is_some_and(|m| m != spec.event_model);
        set(&mut spec.n_classes, self.n_classes);
        set(&mut spec.event_model, self.event_model);
        set(&mut spec.markovian, self.markovian);
        set(&mut spec.quadrature_nodes, self.quadrature_nodes);
        if event_model_changed && spec.event_model == EventModel::CompetingRisks {
            spec.event_covariates.ill_dead.clear();
        }
        spec.validate().map_err(|e| CliError::Config(e.to_string()))?;
        cfg.model = Some(spec);
        Ok(())
    }
}

impl OptimizerArgs {
    fn apply(self, cfg: &mut RunConfig) {
        set(&mut cfg.optimizer.max_iter, self.max_iter);
        set(&mut cfg.optimizer.n_starts, self.n_starts);
        set(&mut cfg.optimizer.seed, self.optimizer_seed);
    }
}

impl SimulationArgs {
    fn apply(self, cfg: &mut RunConfig) {
        let s = &mut cfg.simulation;
        set(&mut s.design, self.design);
        set(&mut s.interval, self.interval);
        set(&mut s.n_subjects, self.n_subjects);
        set(&mut s.seed, self.seed);
        set(&mut s.markovian, self.markovian);
    }
}

/// Resolves the configuration and runs the command.
pub fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(o) = cli.output {
        cfg.output = o;
    }
    if cli.workers.is_some() {
        cfg.workers = cli.workers;
    }
    if let Some(n) = cfg.workers {
        if n == 0 {
            return Err(CliError::Config("workers must be at least 1".into()));
        }
        // Fails only if a pool already exists, which keeps the existing one.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::Simulate(sim) => {
            sim.apply(&mut cfg);
            cmd_simulate(&cfg)
        }
        Command::Fit { data, model, optimizer, init } => {
            data.apply(&mut cfg);
            model.apply(&mut cfg)?;
            optimizer.apply(&mut cfg);
            if init.is_some() {
                cfg.fit = init;
            }
            let f = cmd_fit(&cfg)?;
            println!("loglik {:.6}  BIC {:.4}  iterations {}", f.loglik, f.bic, f.n_iter);
            Ok(())
        }
        Command::Replicate { simulation, optimizer, replicates, competing, start_at_truth } => {
            simulation.apply(&mut cfg);
            optimizer.apply(&mut cfg);
            set(&mut cfg.replicate.replicates, replicates);
            set(&mut cfg.replicate.competing, competing);
            set(&mut cfg.replicate.start_at_truth, start_at_truth);
            cmd_replicate(&cfg)
        }
        Command::Postfit { data, fit, bin_width, marker } => {
            data.apply(&mut cfg);
            if fit.is_some() {
                cfg.fit = fit;
            }
            set(&mut cfg.postfit.bin_width, bin_width);
            if marker.is_some() {
                cfg.postfit.marker = marker;
            }
            cmd_postfit(&cfg)
        }
        Command::Select { data, model, optimizer, classes } => {
            data.apply(&mut cfg);
            model.apply(&mut cfg)?;
            optimizer.apply(&mut cfg);
            set(&mut cfg.select.classes, classes);
            let sel = cmd_select(&cfg)?;
            for r in &sel.rows {
                println!("G = {}: BIC {:?} converged {}", r.n_classes, r.bic, r.converged);
            }
            Ok(())
        }
    }
}
