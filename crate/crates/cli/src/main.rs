use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use metacate::bart::BartParams;
use metacate::forest::ForestParams;
use metacate::io;
use metacate::linear::Moderators;
use metacate::pipeline;
use metacate::report::{compare_intervals_svg, prediction_interval_svg, sha256_hex};
use metacate::sim::{parse_experiment, BartInterval, Stage1Method};
use metacate::Error;

#[derive(Parser)]
#[command(name = "metacate", version, about = "Two-stage meta-analysis of conditional average treatment effects")]
struct Cli {
    /// Master seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Stage1 {
    Linear,
    Forest,
    Bart,
}

#[derive(Clone, Copy, ValueEnum)]
enum Interval {
    Normal,
    Quantile,
}

#[derive(Subcommand)]
enum Command {
    /// Stage 1: per-study CATE estimates at every target profile.
    Estimate {
        #[arg(long, required = true, num_args = 1..)]
        trials: Vec<PathBuf>,
        #[arg(long)]
        profiles: PathBuf,
        #[arg(long, value_enum, default_value = "linear")]
        stage1: Stage1,
        /// `all` or a comma list of covariate names or indices.
        #[arg(long, default_value = "all")]
        moderators: String,
        #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
        honest: bool,
        /// Trees in the forest or the BART sum.
        #[arg(long)]
        trees: Option<usize>,
        #[arg(long)]
        burn: Option<usize>,
        #[arg(long)]
        draws: Option<usize>,
        #[arg(long, value_enum, default_value = "normal")]
        interval: Interval,
    },
    /// Stage 2: pooled estimates and prediction intervals per profile.
    Predict {
        #[arg(long)]
        aggregates: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        /// Also write predictions.svg.
        #[arg(long)]
        svg: bool,
    },
    /// Study confidence intervals beside the target prediction interval.
    CompareIntervals {
        #[arg(long)]
        aggregates: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        /// Comma list of profile ids.
        #[arg(long, value_delimiter = ',', required = true)]
        profiles: Vec<u32>,
    },
    /// Coverage experiment from a `key = value` config file.
    Simulate {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Serialize)]
struct FileDigest {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest {
    subcommand: &'static str,
    tool_version: &'static str,
    run_digest: String,
    config_digest: String,
    master_seed: Option<u64>,
    inputs: Vec<FileDigest>,
    outputs: Vec<FileDigest>,
    timings_ms: Vec<(String, f64)>,
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Input(_) | Error::InvalidTrial { .. } | Error::DimensionMismatch { .. } => 2,
            Error::Config(_) => 3,
            _ => 1,
        };
        Self { code, message: e.to_string() }
    }
}

fn input_error(path: &Path, e: std::io::Error) -> Failure {
    Failure { code: 2, message: format!("{}: {e}", path.display()) }
}

struct Run {
    subcommand: &'static str,
    seed: Option<u64>,
    out_dir: PathBuf,
    inputs: Vec<FileDigest>,
    outputs: Vec<FileDigest>,
    timings: Vec<(String, f64)>,
    clock: Instant,
}

impl Run {
    fn read(&mut self, path: &Path) -> Result<String, Failure> {
        let text = fs::read_to_string(path).map_err(|e| input_error(path, e))?;
        self.inputs.push(FileDigest { path: path.display().to_string(), sha256: sha256_hex(text.as_bytes()) });
        Ok(text)
    }

    fn lap(&mut self, phase: &str) {
        let now = Instant::now();
        self.timings.push((phase.to_string(), (now - self.clock).as_secs_f64() * 1e3));
        self.clock = now;
    }

    /// Digest of everything that determines the outputs.
    fn digest(&self, config: &str) -> String {
        let mut s = format!("{}\nseed={:?}\nconfig={config}\n", self.subcommand, self.seed);
        for i in &self.inputs {
            s.push_str(&i.sha256);
            s.push('\n');
        }
        sha256_hex(s.as_bytes())
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<(), Failure> {
        let path = self.out_dir.join(name);
        fs::write(&path, contents)
            .map_err(|e| Failure { code: 1, message: format!("{}: {e}", path.display()) })?;
        self.outputs.push(FileDigest { path: path.display().to_string(), sha256: sha256_hex(contents.as_bytes()) });
        Ok(())
    }

    fn finish(mut self, config: &str) -> Result<(), Failure> {
        let manifest = Manifest {
            subcommand: self.subcommand,
            tool_version: env!("CARGO_PKG_VERSION"),
            run_digest: self.digest(config),
            config_digest: sha256_hex(config.as_bytes()),
            master_seed: self.seed,
            inputs: std::mem::take(&mut self.inputs),
            outputs: std::mem::take(&mut self.outputs),
            timings_ms: std::mem::take(&mut self.timings),
        };
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        let path = self.out_dir.join("manifest.json");
        fs::write(&path, json + "\n").map_err(|e| Failure { code: 1, message: format!("{}: {e}", path.display()) })
    }
}

fn stage1_method(
    stage1: Stage1,
    moderators: &str,
    names: &[String],
    honest: bool,
    trees: Option<usize>,
    burn: Option<usize>,
    draws: Option<usize>,
    interval: Interval,
) -> Result<Stage1Method, Error> {
    Ok(match stage1 {
        Stage1::Linear => Stage1Method::Linear(Moderators::parse(moderators, names)?),
        Stage1::Forest => {
            let mut p = ForestParams { honest, ..ForestParams::default() };
            if let Some(t) = trees {
                p.n_trees = t;
            }
            Stage1Method::Forest(p)
        }
        Stage1::Bart => {
            let mut p = BartParams::default();
            p.n_trees = trees.unwrap_or(p.n_trees);
            p.n_burn = burn.unwrap_or(p.n_burn);
            p.n_draws = draws.unwrap_or(p.n_draws);
            let interval = match interval {
                Interval::Normal => BartInterval::Normal,
                Interval::Quantile => BartInterval::Quantile,
            };
            Stage1Method::Bart { params: p, interval }
        }
    })
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure { code: 3, message: format!("--threads: {e}") })?;
    }
    fs::create_dir_all(&cli.out_dir).map_err(|e| Failure { code: 1, message: format!("{}: {e}", cli.out_dir.display()) })?;
    let subcommand = match cli.command {
        Command::Estimate { .. } => "estimate",
        Command::Predict { .. } => "predict",
        Command::CompareIntervals { .. } => "compare-intervals",
        Command::Simulate { .. } => "simulate",
    };
    let mut run = Run {
        subcommand,
        seed: cli.seed,
        out_dir: cli.out_dir,
        inputs: Vec::new(),
        outputs: Vec::new(),
        timings: Vec::new(),
        clock: Instant::now(),
    };
    match cli.command {
        Command::Estimate { trials, profiles, stage1, moderators, honest, trees, burn, draws, interval } => {
            let mut parsed = Vec::new();
            for path in &trials {
                let text = run.read(path)?;
                let label = path.display().to_string();
                parsed.push((label.clone(), io::parse_trial_csv(&label, &text)?));
            }
            let datasets = io::group_trials(parsed)?;
            let names = datasets[0].covariate_names().to_vec();
            let text = run.read(&profiles)?;
            let profiles = io::parse_profile_csv(&profiles.display().to_string(), &text, Some(&names))?;
            let method = stage1_method(stage1, &moderators, &names, honest, trees, burn, draws, interval)?;
            run.lap("read");
            let out = pipeline::estimate(&datasets, &profiles, &method, cli.seed.unwrap_or(0))?;
            run.lap("stage1");
            let n_flagged = out.flags.iter().filter(|f| f.is_flagged()).count();
            if n_flagged > 0 {
                eprintln!("warning: {n_flagged} profiles lie outside the pooled trial covariate range");
            }
            run.write("aggregates.csv", &io::write_aggregates(&out.aggregates))?;
            run.write("coverage_flags.csv", &io::write_coverage_flags(&out.flags))?;
            run.lap("write");
            run.finish(&format!("{method:?}"))
        }
        Command::Predict { aggregates, alpha, svg } => {
            let text = run.read(&aggregates)?;
            let agg = io::parse_aggregate_csv(&aggregates.display().to_string(), &text)?;
            run.lap("read");
            let out = pipeline::predict(&agg, alpha)?;
            run.lap("stage2");
            for w in &out.warnings {
                eprintln!("warning: {w}");
            }
            let config = format!("alpha={alpha}");
            let digest = run.digest(&config);
            run.write("predictions.csv", &io::write_predictions(&out.rows))?;
            if svg {
                run.write("predictions.svg", &prediction_interval_svg(&out.rows, &digest))?;
            }
            run.lap("write");
            run.finish(&config)
        }
        Command::CompareIntervals { aggregates, predictions, profiles } => {
            let text = run.read(&aggregates)?;
            let agg = io::parse_aggregate_csv(&aggregates.display().to_string(), &text)?;
            let text = run.read(&predictions)?;
            let preds = io::parse_prediction_csv(&predictions.display().to_string(), &text)?;
            let groups = pipeline::compare_groups(&agg, &preds, &profiles)?;
            let config = format!("profiles={profiles:?}");
            let digest = run.digest(&config);
            run.write("compare.svg", &compare_intervals_svg(&groups, &digest))?;
            run.lap("render");
            run.finish(&config)
        }
        Command::Simulate { config } => {
            let text = run.read(&config)?;
            let mut cfg = parse_experiment(&text)?;
            if let Some(seed) = cli.seed {
                cfg.sim.master_seed = seed;
            }
            run.seed = Some(cfg.sim.master_seed);
            let digest = run.digest(&text);
            let out = pipeline::simulate(&cfg, &digest)?;
            run.lap("simulate");
            for r in &out.runs {
                for a in &r.metrics.aborted {
                    eprintln!(
                        "warning: {}: replication {} aborted: {}",
                        r.metrics.rows.first().map_or("", |m| m.method.as_str()),
                        a.replication,
                        a.reason
                    );
                }
            }
            run.write("metrics.csv", &out.metrics_csv)?;
            run.write("coverage.svg", &out.coverage_svg)?;
            run.lap("write");
            run.finish(&text)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
