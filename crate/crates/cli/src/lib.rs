//! Command implementations behind the `smto` binary.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use smto_core::harness::{
    compare_smtos, grid_search, persist_trial, replay_from, run_trials, train, write_json, Grid,
    ProblemConfig, SmtoConfig, TrialConfig, TrialResult,
};

#[derive(Debug, Parser)]
#[command(name = "smto", version, about = "Train and compare multi-task optimizers")]
pub struct Cli {
    /// Worker threads for parallel trials (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Output root; results go into subdirectories of it.
    #[arg(long, global = true, env = "SMTO_OUT", default_value = "results")]
    pub out: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one configuration on several seeds.
    Run(RunArgs),
    /// Grid-search learning rate, dropout and weight decay, then rerun the best point.
    Grid(GridArgs),
    /// Compare methods against single-task baselines on one or more problems.
    Compare(CompareArgs),
    /// Extract fixed weights from a finished trial and retrain with them.
    ExtractReplay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct Base {
    /// Problem id (symmetric_two_task, mixed_norm_two_task, conflict_regression).
    #[arg(long)]
    pub problem: Option<String>,
    /// Method id, e.g. nash_mtl or unit_scal.
    #[arg(long)]
    pub smto: Option<String>,
    /// TOML trial configuration; `--problem`/`--smto` replace its sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub base: Base,
    #[arg(long, default_value_t = 1)]
    pub seeds: usize,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[command(flatten)]
    pub base: Base,
    /// TOML file with `lr`, `dropout_p` and optional `weight_decay` lists.
    #[arg(long)]
    pub grid: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub seeds_per_config: usize,
    #[arg(long, default_value_t = 2)]
    pub seeds_final: usize,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long, value_delimiter = ',', required = true)]
    pub problems: Vec<String>,
    /// Methods to compare; `all` expands to every method.
    #[arg(long, value_delimiter = ',', default_value = "all")]
    pub smtos: Vec<String>,
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    /// TOML trial configuration supplying shared hyperparameters.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// JSON result of a finished trial.
    #[arg(long)]
    pub trial: PathBuf,
}

fn load_config(path: Option<&Path>) -> Result<Option<TrialConfig>> {
    path.map(|p| TrialConfig::load(p).with_context(|| format!("reading {}", p.display())))
        .transpose()
}

impl Base {
    pub fn resolve(&self) -> Result<TrialConfig> {
        let mut cfg = match load_config(self.config.as_deref())? {
            Some(c) => c,
            None => {
                let (Some(p), Some(m)) = (&self.problem, &self.smto) else {
                    bail!("give --config or both --problem and --smto");
                };
                TrialConfig::new(ProblemConfig::from_id(p)?, SmtoConfig::from_id(m)?)
            }
        };
        if let Some(p) = &self.problem {
            if p != cfg.problem.id() {
                cfg.problem = ProblemConfig::from_id(p)?;
            }
        }
        if let Some(m) = &self.smto {
            if m != cfg.smto.id() {
                cfg.smto = SmtoConfig::from_id(m)?;
            }
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if let Some(lr) = self.lr {
            cfg.lr = lr;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn summary_line(r: &TrialResult) -> String {
    match (&r.crash, r.best()) {
        (Some(c), _) => format!("{} seed {}: crashed at step {} ({})", r.smto, r.config.seed, c.step, c.message),
        (None, Some(e)) => format!(
            "{} seed {}: best epoch {} val score {:.4} wall {:.2}s",
            r.smto, r.config.seed, e.epoch, e.val_score, r.wall_time_s
        ),
        (None, None) => format!("{} seed {}: no epochs", r.smto, r.config.seed),
    }
}

pub fn run(args: &RunArgs, out: &Path) -> Result<Vec<PathBuf>> {
    let base = args.base.resolve()?;
    let data = base.problem.build(base.data_seed)?;
    let cfgs: Vec<TrialConfig> = (0..args.seeds as u64)
        .map(|s| TrialConfig { seed: base.seed + s, ..base.clone() })
        .collect();
    let dir = out.join(base.problem.id());
    let mut written = Vec::new();
    for r in run_trials(&cfgs, Some(&data)) {
        let r = r?;
        println!("{}", summary_line(&r));
        written.push(persist_trial(&r, &dir)?);
    }
    Ok(written)
}

pub fn grid(args: &GridArgs, out: &Path) -> Result<PathBuf> {
    let base = args.base.resolve()?;
    let grid = match &args.grid {
        Some(p) => toml::from_str::<Grid>(&std::fs::read_to_string(p)?)
            .with_context(|| format!("parsing grid {}", p.display()))?,
        None => Grid::default(),
    };
    let data = base.problem.build(base.data_seed)?;
    let summary = grid_search(&base, &grid, args.seeds_per_config, args.seeds_final, |c| train(c, &data))?;
    let dir = out.join(base.problem.id()).join(format!("grid_{}", base.smto.id()));
    std::fs::create_dir_all(&dir)?;
    for r in &summary.final_runs {
        persist_trial(r, &dir)?;
    }
    let path = dir.join("grid.json");
    write_json(&path, &summary)?;
    println!(
        "{}: best lr {} dropout {} weight decay {} ({} points, {} excluded)",
        summary.smto,
        summary.best.lr,
        summary.best.dropout_p,
        summary.best.weight_decay,
        summary.points.len(),
        summary.excluded.len()
    );
    Ok(path)
}

pub fn compare(args: &CompareArgs, out: &Path) -> Result<Vec<PathBuf>> {
    let smtos: Vec<SmtoConfig> = if args.smtos.iter().any(|s| s == "all") {
        SmtoConfig::all()
    } else {
        args.smtos.iter().map(|s| SmtoConfig::from_id(s)).collect::<smto_core::Result<_>>()?
    };
    let template = load_config(args.config.as_deref())?;
    let seeds: Vec<u64> = (0..args.seeds).collect();
    let mut written = Vec::new();
    for p in &args.problems {
        let problem = ProblemConfig::from_id(p)?;
        let mut base = match &template {
            Some(t) => TrialConfig { problem, ..t.clone() },
            None => TrialConfig::new(problem, SmtoConfig::UnitScal),
        };
        if let Some(e) = args.epochs {
            base.epochs = e;
        }
        let report = compare_smtos(&base, &smtos, &seeds)?;
        let dir = out.join(p);
        std::fs::create_dir_all(&dir)?;
        let path = dir.join("comparison.json");
        report.save_json(&path)?;
        println!("{p}:");
        for s in &report.smtos {
            println!(
                "  {:<14} delta {:>9} MR {:>5} crashed {}/{}",
                s.smto,
                s.delta_mean.map_or("-".into(), |d| format!("{d:.2}%")),
                s.mean_rank.map_or("-".into(), |r| format!("{r:.2}")),
                s.crashed,
                s.runs
            );
        }
        written.push(path);
    }
    Ok(written)
}

pub fn extract_replay(args: &ReplayArgs) -> Result<PathBuf> {
    let original = TrialResult::load_json(&args.trial)?;
    let data = original.config.problem.build(original.config.data_seed)?;
    let pair = replay_from(original, &data)?;
    let dir = args.trial.parent().unwrap_or(Path::new(".")).join("replay");
    let path = persist_trial(&pair.replay, &dir)?;
    println!("fixed weights {:?}", pair.fixed_weights);
    println!("original  {}", summary_line(&pair.original));
    println!("replay    {}", summary_line(&pair.replay));
    Ok(path)
}

pub fn execute(cli: &Cli) -> Result<()> {
    smto_core::harness::with_threads(cli.threads, || -> Result<()> {
        match &cli.command {
            Command::Run(a) => run(a, &cli.out).map(drop),
            Command::Grid(a) => grid(a, &cli.out).map(drop),
            Command::Compare(a) => compare(a, &cli.out).map(drop),
            Command::ExtractReplay(a) => extract_replay(a).map(drop),
        }
    })?
}
