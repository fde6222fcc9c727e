use std::collections::BTreeSet;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use spatialgan::analytics::FacilityVariant;
use spatialgan::ingest::Units;
use spatialgan::metrics::EvalConfig;
use spatialgan::pipeline::{
    self, generate_points, load_trained, prepare, privatize_stage, run_pipeline, run_sweep, write_points_csv,
    Preset, RunConfig, Stage,
};
use spatialgan::PrivacyBudget;

/// Label-private synthetic spatial point data.
#[derive(Parser)]
#[command(name = "spatialgan", version)]
struct Cli {
    /// Log more (repeat for debug output).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load, filter and normalize a point file.
    Ingest {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Flip the real labels once and write the upload CSV.
    Privatize {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Train a generator on privatized data.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Sample points from a checkpoint as CSV in source units.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of points.
        #[arg(short, long, default_value_t = 7_500)]
        n: usize,
    },
    /// Compute Chamfer and earth mover's distances against real data.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Run a location-analytics workload on real and synthetic data.
    Query {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(value_enum)]
        workload: Workload,
        /// Places CSV with the data's coordinate columns.
        #[arg(long)]
        places: Option<PathBuf>,
        /// Facility counts.
        #[arg(long, value_delimiter = ',')]
        k: Option<Vec<usize>>,
        /// Range radii in meters, or the facility coverage radius.
        #[arg(long, value_delimiter = ',')]
        radius: Option<Vec<f64>>,
        /// Hotspot grid sizes.
        #[arg(long, value_delimiter = ',')]
        granularity: Option<Vec<usize>>,
        #[arg(long, value_enum)]
        variant: Option<Variant>,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Train and evaluate once per privacy budget.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
        /// Budgets to sweep (`inf` allowed).
        #[arg(long, value_delimiter = ',')]
        epsilons: Option<Vec<PrivacyBudget>>,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Run the stages listed in a config file.
    Run {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        eval: EvalArgs,
    },
}

#[derive(Args)]
struct Common {
    /// JSON run config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Privacy budget ε, or `inf` for no privacy.
    #[arg(long)]
    epsilon: Option<PrivacyBudget>,
    /// Output directory (output file for `generate`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DataArgs {
    /// Point CSV with a header row.
    #[arg(long, alias = "real")]
    data: Option<PathBuf>,
    /// Coordinate columns, e.g. `lon,lat`.
    #[arg(long, value_delimiter = ',')]
    columns: Option<Vec<String>>,
    #[arg(long)]
    units: Option<Units>,
    /// Polygon mask (JSON ring array or GeoJSON).
    #[arg(long)]
    region: Option<PathBuf>,
    /// Share of points held out for evaluation.
    #[arg(long)]
    holdout: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    preset: Option<Preset>,
    #[arg(long)]
    epochs: Option<u64>,
    #[arg(long)]
    steps_per_epoch: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    sample_size: Option<usize>,
    /// Skip exact EMD.
    #[arg(long)]
    cd_only: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Workload {
    Range,
    Hotspot,
    Facility,
}

#[derive(Clone, Copy, ValueEnum)]
enum Variant {
    MaxInf,
    MinDist,
}

fn base_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(e) = common.epsilon {
        cfg.epsilon = e;
    }
    if let Some(o) = &common.out {
        cfg.out = o.clone();
    }
    Ok(cfg)
}

impl DataArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        let d = &mut cfg.data;
        if let Some(p) = &self.data {
            d.path = Some(p.clone());
        }
        if let Some(c) = &self.columns {
            d.columns = c.clone();
        }
        if let Some(u) = self.units {
            d.units = u;
        }
        if let Some(r) = &self.region {
            d.region = Some(r.clone());
        }
        if let Some(h) = self.holdout {
            d.holdout_fraction = h;
        }
    }
}

impl TrainArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(p) = self.preset {
            cfg.preset = p;
        }
        let t = &mut cfg.train;
        t.epochs = self.epochs.or(t.epochs);
        t.steps_per_epoch = self.steps_per_epoch.or(t.steps_per_epoch);
        t.batch_size = self.batch_size.or(t.batch_size);
        t.learning_rate = self.lr.or(t.learning_rate);
    }
}

impl EvalArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        if self.samples.is_none() && self.sample_size.is_none() && !self.cd_only {
            return;
        }
        let base: EvalConfig = cfg.eval_config();
        cfg.evaluation = Some(EvalConfig {
            samples: self.samples.unwrap_or(base.samples),
            sample_size: self.sample_size.unwrap_or(base.sample_size),
            cd_only: self.cd_only || base.cd_only,
        });
    }
}

fn stages(list: &[Stage]) -> BTreeSet<Stage> {
    list.iter().copied().collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest { common, data } => {
            let mut cfg = base_config(&common)?;
            data.apply(&mut cfg);
            cfg.stages = stages(&[Stage::Ingest]);
            let report = run_pipeline(&cfg)?;
            println!(
                "ingested into {} (hull coverage {:.3})",
                cfg.out.display(),
                report.domain_coverage.unwrap_or(0.0)
            );
        }
        Command::Privatize { common, data } => {
            let mut cfg = base_config(&common)?;
            data.apply(&mut cfg);
            cfg.stages = stages(&[Stage::Privatize]);
            cfg.validate()?;
            let seeds = cfg.seeds();
            let prepared = prepare(&cfg.data, None, &seeds)?;
            let path = cfg.out.join("privatized.csv");
            let upload = privatize_stage(&prepared, cfg.epsilon, &seeds, Some(&path))?;
            println!("wrote {} ({} points, ε = {})", path.display(), upload.len(), cfg.epsilon);
        }
        Command::Train { common, data, train } => {
            let mut cfg = base_config(&common)?;
            data.apply(&mut cfg);
            train.apply(&mut cfg);
            cfg.stages = stages(&[Stage::Privatize, Stage::Train]);
            let report = run_pipeline(&cfg)?;
            println!(
                "trained {} steps; checkpoint {} in {}",
                report.train_steps,
                report.checkpoint_id.unwrap_or_default(),
                cfg.out.join("model.json").display()
            );
        }
        Command::Generate { common, checkpoint, n } => {
            let mut cfg = base_config(&common)?;
            cfg.checkpoint = Some(checkpoint.clone());
            cfg.stages = stages(&[Stage::Generate]);
            // the output path does not affect the points, keep it out of the hash
            cfg.out = RunConfig::default().out;
            let trained = load_trained(&checkpoint)?;
            let points = generate_points(&trained, n, cfg.seed)?;
            let mut columns = trained.run.columns.clone();
            if columns.len() != points.dim() {
                columns = (0..points.dim()).map(|d| format!("c{d}")).collect();
            }
            let out = common.out.clone().unwrap_or_else(|| PathBuf::from("generated.csv"));
            write_points_csv(&out, &points, &columns, Some((&cfg.hash(), cfg.seed)))
                .with_context(|| format!("generate stage failed: writing {}", out.display()))?;
            println!("wrote {n} points to {}", out.display());
        }
        Command::Evaluate {
            common,
            data,
            checkpoint,
            eval,
        } => {
            let mut cfg = base_config(&common)?;
            data.apply(&mut cfg);
            cfg.checkpoint = Some(checkpoint);
            cfg.stages = stages(&[Stage::Evaluate]);
            eval.apply(&mut cfg);
            let report = run_pipeline(&cfg)?;
            let m = report.metrics.expect("evaluate stage ran");
            print!("CD {:.6} ± {:.6}", m.cd_summary.mean, m.cd_summary.std);
            if let Some(e) = m.emd_summary {
                print!("  EMD {:.6} ± {:.6}", e.mean, e.std);
            }
            println!("  ({} samples of {})", m.samples, m.sample_size);
        }
        Command::Query {
            common,
            data,
            checkpoint,
            workload,
            places,
            k,
            radius,
            granularity,
            variant,
            eval,
        } => {
            let mut cfg = base_config(&common)?;
            data.apply(&mut cfg);
            eval.apply(&mut cfg);
            cfg.checkpoint = Some(checkpoint);
            cfg.stages = stages(&[Stage::Query]);
            let w = &mut cfg.workloads;
            w.range = matches!(workload, Workload::Range);
            w.hotspot = matches!(workload, Workload::Hotspot);
            w.facility = matches!(workload, Workload::Facility);
            w.places = places.or(w.places.take());
            if let Some(k) = k {
                w.ks = k;
            }
            if let Some(g) = granularity {
                w.granularities = g;
            }
            match (workload, radius) {
                (Workload::Range, Some(r)) => w.radii_m = r,
                (Workload::Facility, Some(r)) => {
                    if r.len() != 1 {
                        bail!("query stage failed: facility queries take a single --radius");
                    }
                    w.facility_radius_m = r[0];
                }
                _ => {}
            }
            if let Some(v) = variant {
                w.variant = match v {
                    Variant::MaxInf => FacilityVariant::MaxInf,
                    Variant::MinDist => FacilityVariant::MinDist,
                };
            }
            let report = run_pipeline(&cfg)?;
            let q = report.queries.expect("query stage ran");
            for r in &q.range {
                println!("radius {:>6} m  MAE {:.3}  MPE {:.4}", r.radius_m, r.mae, r.mpe);
            }
            for h in &q.hotspot {
                println!("g {:>5}  SDC {:.4}", h.g, h.sdc);
            }
            for f in &q.facility {
                println!("k {:>3}  SDC {:.4}", f.k, f.sdc);
            }
        }
        Command::Sweep {
            common,
            data,
            train,
            epsilons,
            eval,
        } => {
            let mut cfg = base_config(&common)?;
            data.apply(&mut cfg);
            train.apply(&mut cfg);
            eval.apply(&mut cfg);
            if let Some(e) = epsilons {
                cfg.epsilons = e;
            }
            if !cfg.stages.contains(&Stage::Evaluate) {
                cfg.stages.insert(Stage::Evaluate);
            }
            let reports = run_sweep(&cfg)?;
            for r in reports {
                let cd = r.metrics.map(|m| m.cd_summary.mean).unwrap_or(f64::NAN);
                println!("ε = {:<6} CD {cd:.6}", r.epsilon.to_string());
            }
        }
        Command::Run {
            common,
            data,
            train,
            checkpoint,
            eval,
        } => {
            let mut cfg = base_config(&common)?;
            data.apply(&mut cfg);
            train.apply(&mut cfg);
            eval.apply(&mut cfg);
            if checkpoint.is_some() {
                cfg.checkpoint = checkpoint;
            }
            if cfg.stages.contains(&Stage::Sweep) {
                run_sweep(&cfg)?;
            } else {
                run_pipeline(&cfg)?;
            }
            println!("outputs in {}", cfg.out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // stage errors already carry their cause in the message
            if e.is::<pipeline::PipelineError>() {
                eprintln!("error: {e}");
            } else {
                eprintln!("error: {e:#}");
            }
            ExitCode::FAILURE
        }
    }
}
