use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use rfold_core::placement::PolicyKind;
use rfold_core::shapes::{brute_force_embeddable, RingMode, DEFAULT_ORACLE_BOUND};
use rfold_core::simulator::{run, RunReport, RunStats};
use rfold_core::sweep::{run_sweep, write_outputs, ExperimentConfig};
use rfold_core::topology::ClusterSpec;
use rfold_core::workload::{generate_trace, load_trace, save_trace, DimTable, GenConfig, Shape, TimeDistribution};
use rfold_core::Error;

#[derive(Debug, Parser)]
#[command(name = "rfold", version, about = "Job placement and simulation for reconfigurable 3D-torus clusters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic JSONL trace
    GenTrace {
        #[command(flatten)]
        gen: GenArgs,
        /// Output file; `-` writes to stdout
        #[arg(long, short, default_value = "-")]
        out: PathBuf,
    },
    /// Replay one trace under one policy
    Run {
        /// JSONL trace to replay; a trace is generated when omitted
        #[arg(long)]
        trace: Option<PathBuf>,
        #[command(flatten)]
        gen: GenArgs,
        #[arg(long)]
        policy: PolicyKind,
        #[command(flatten)]
        cluster: ClusterArgs,
        /// Directory for report.json and jobs.csv
        #[arg(long, short, default_value = "run-out")]
        out: PathBuf,
    },
    /// Run every cell of an experiment over many seeds
    Sweep {
        /// Experiment TOML file
        #[arg(long)]
        config: Option<PathBuf>,
        /// Base seed; trial i uses seed + i
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        trials: Option<usize>,
        /// Jobs per trace
        #[arg(long)]
        jobs: Option<usize>,
        /// Worker threads, 0 for all cores
        #[arg(long)]
        parallelism: Option<usize>,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Decide by exhaustive search whether a shape embeds in a target block
    Oracle {
        #[arg(long)]
        shape: Shape,
        #[arg(long)]
        target: Shape,
        /// Target dimensions with wraparound links, e.g. `xz`
        #[arg(long, default_value = "")]
        wrap: String,
        #[arg(long, default_value = "ring")]
        mode: RingMode,
        /// Largest shape size the search accepts
        #[arg(long, default_value_t = DEFAULT_ORACLE_BOUND)]
        bound: usize,
    },
}

#[derive(Debug, Args)]
struct GenArgs {
    /// Generator TOML file; flags override its keys
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of jobs
    #[arg(long)]
    jobs: Option<usize>,
    /// Mean of the exponential inter-arrival time, in s
    #[arg(long)]
    inter_arrival_mean: Option<f64>,
    /// Log-normal duration parameters
    #[arg(long)]
    duration_mu: Option<f64>,
    #[arg(long)]
    duration_sigma: Option<f64>,
    #[arg(long)]
    size_scale: Option<f64>,
    #[arg(long)]
    max_size: Option<usize>,
    #[arg(long)]
    small_threshold: Option<usize>,
    /// 1D,2D,3D probabilities for small jobs, e.g. `0.4,0.4,0.2`
    #[arg(long)]
    small_dims: Option<String>,
    #[arg(long)]
    large_dims: Option<String>,
    /// Per-dimension extent cap, 0 disables
    #[arg(long)]
    extent_cap: Option<usize>,
    /// Drop the extent and footprint caps
    #[arg(long)]
    uncapped: bool,
}

impl GenArgs {
    fn resolve(&self) -> anyhow::Result<GenConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            }
            None => GenConfig::default(),
        };
        if self.uncapped {
            cfg = cfg.uncapped();
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.jobs {
            cfg.job_count = v;
        }
        if let Some(mean) = self.inter_arrival_mean {
            cfg.inter_arrival = TimeDistribution::Exponential { mean };
        }
        if self.duration_mu.is_some() || self.duration_sigma.is_some() {
            let (mu0, sigma0) = match cfg.duration {
                TimeDistribution::LogNormal { mu, sigma } => (mu, sigma),
                _ => (8.0, 1.0),
            };
            cfg.duration =
                TimeDistribution::LogNormal { mu: self.duration_mu.unwrap_or(mu0), sigma: self.duration_sigma.unwrap_or(sigma0) };
        }
        if let Some(v) = self.size_scale {
            cfg.size_scale = v;
        }
        if let Some(v) = self.max_size {
            cfg.max_size = v;
        }
        if let Some(v) = self.small_threshold {
            cfg.small_threshold = v;
        }
        if let Some(s) = &self.small_dims {
            cfg.small_dims = parse_dims("small_dims", s)?;
        }
        if let Some(s) = &self.large_dims {
            cfg.large_dims = parse_dims("large_dims", s)?;
        }
        if let Some(v) = self.extent_cap {
            cfg.extent_cap = Some(v);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_dims(field: &str, s: &str) -> anyhow::Result<DimTable> {
    let p: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| Error::Config(format!("{field}: expected three comma-separated probabilities")))?;
    let [d1, d2, d3] = p[..] else {
        bail!(Error::Config(format!("{field}: expected three comma-separated probabilities")));
    };
    Ok(DimTable { d1, d2, d3 })
}

#[derive(Debug, Args)]
struct ClusterArgs {
    /// Static torus extents, e.g. `16x16x16`
    #[arg(long = "static")]
    static_extents: Option<Shape>,
    /// Cube edge length of a reconfigurable cluster [default: 4]
    #[arg(long)]
    cube_size: Option<usize>,
    /// Number of cubes; defaults to 4096 XPUs worth
    #[arg(long)]
    cube_count: Option<usize>,
}

impl ClusterArgs {
    fn resolve(&self, policy: PolicyKind) -> anyhow::Result<ClusterSpec> {
        let spec = match self.static_extents {
            Some(s) => ClusterSpec::static_torus(s.extents()),
            None if policy.requires_static() && self.cube_size.is_none() && self.cube_count.is_none() => {
                ClusterSpec::static_torus([16, 16, 16])
            }
            None => {
                let n = self.cube_size.unwrap_or(4);
                let count = self.cube_count.unwrap_or_else(|| (4096 / n.pow(3).max(1)).max(1));
                ClusterSpec::reconfigurable(count, n)
            }
        };
        spec.validate()?;
        Ok(spec)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn execute(command: Command) -> anyhow::Result<ExitCode> {
    match command {
        Command::GenTrace { gen, out } => {
            let cfg = gen.resolve()?;
            let trace = generate_trace(&cfg)?;
            if out.as_os_str() == "-" {
                let stdout = io::stdout();
                save_trace(&trace, stdout.lock())?;
            } else {
                let mut w = BufWriter::new(File::create(&out).with_context(|| format!("creating {}", out.display()))?);
                save_trace(&trace, &mut w)?;
                w.flush()?;
            }
        }
        Command::Run { trace, gen, policy, cluster, out } => {
            let spec = cluster.resolve(policy)?;
            policy.check_compatible(&spec)?;
            let (trace, seed, config) = match &trace {
                Some(path) => {
                    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
                    (load_trace(BufReader::new(f))?, None, serde_json::json!({ "trace": path }))
                }
                None => {
                    let cfg = gen.resolve()?;
                    (generate_trace(&cfg)?, Some(cfg.seed), serde_json::to_value(&cfg)?)
                }
            };
            let mut report = run(&trace, policy, &spec)?;
            report.seed = seed;
            report.config = Some(serde_json::json!({ "policy": policy, "spec": spec, "workload": config }));
            write_report(&report, &out)?;
            println!("{}", summary_line(&report));
        }
        Command::Sweep { config, seed, trials, jobs, parallelism, out } => {
            let mut cfg = match &config {
                Some(path) => {
                    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                    ExperimentConfig::from_toml(&text)?
                }
                None => ExperimentConfig::default(),
            };
            if let Some(v) = seed {
                cfg.base_seed = v;
            }
            if let Some(v) = trials {
                cfg.trials = v;
            }
            if let Some(v) = jobs {
                cfg.gen.job_count = v;
            }
            if let Some(v) = parallelism {
                cfg.parallelism = v;
            }
            if let Some(v) = out {
                cfg.output_dir = v;
            }
            let result = run_sweep(&cfg)?;
            write_outputs(&result, &cfg.output_dir)?;
            let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.0}"));
            for c in &result.cells {
                match (&c.error, c.summary()) {
                    (None, Some(s)) => println!(
                        "{:<16} jcr={:.4} p50={} p90={} p99={} util={:.4}",
                        c.cell.label(),
                        s.mean_jcr,
                        fmt(s.mean_p50),
                        fmt(s.mean_p90),
                        fmt(s.mean_p99),
                        s.mean_utilization
                    ),
                    (Some(e), _) => println!("{:<16} FAILED: {e}", c.cell.label()),
                    (None, None) => println!("{:<16} no trials", c.cell.label()),
                }
            }
            if result.failed().next().is_some() {
                return Ok(ExitCode::from(2));
            }
        }
        Command::Oracle { shape, target, wrap, mode, bound } => {
            let mut wraps = [false; 3];
            for ch in wrap.chars() {
                match ch {
                    'x' => wraps[0] = true,
                    'y' => wraps[1] = true,
                    'z' => wraps[2] = true,
                    ',' | ' ' => {}
                    _ => bail!(Error::Config(format!("wrap: unknown dimension {ch:?}, expected a subset of xyz"))),
                }
            }
            let ok = brute_force_embeddable(shape, target.extents(), wraps, mode, bound)?;
            println!("{ok}");
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn write_report(report: &RunReport, dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut json = BufWriter::new(File::create(dir.join("report.json"))?);
    report.write_json(&mut json)?;
    json.flush()?;
    let mut csv = BufWriter::new(File::create(dir.join("jobs.csv"))?);
    report.write_jobs_csv(&mut csv)?;
    csv.flush()?;
    Ok(())
}

fn summary_line(report: &RunReport) -> String {
    let s = RunStats::of(report);
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.1}"));
    let mut line = format!(
        "policy={} cluster={} jobs={} completed={} rejected={} jcr={:.4} p50={} p90={} p99={} mean_util={:.4}",
        report.policy.display_name(),
        report.spec,
        report.jobs.len(),
        report.completed(),
        report.rejected(),
        s.jcr,
        fmt(s.p50),
        fmt(s.p90),
        fmt(s.p99),
        s.mean_utilization
    );
    if report.empty_trace {
        line.push_str(" empty_trace=true");
    }
    line
}
