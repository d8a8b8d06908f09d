use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use bpre_core::envmodel::OffspringFamily;
use bpre_core::runio::{run, Experiment, RunConfig};
use bpre_core::stablecore::ModelSpec;
use clap::{Args, Parser, Subcommand};

/// Monte Carlo laboratory for branching processes in a stable random environment.
///
/// Exit status: 0 when every criterion passes, 1 when some criterion fails,
/// 2 on configuration or runtime errors.
#[derive(Parser)]
#[command(name = "bpre", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment named in a TOML config.
    Run {
        #[arg(value_name = "CONFIG")]
        file: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Print the default config for an experiment.
    Template { experiment: Experiment },
    Renewal(Overrides),
    Survival(Overrides),
    Constants(Overrides),
    Theorem1(Overrides),
    Theorem2(Overrides),
    Asymptotics(Overrides),
    Meander(Overrides),
    CheckB2(Overrides),
}

#[derive(Args, Clone, Default)]
struct Overrides {
    /// Base config; command-line flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Environment law as inline TOML, e.g. `family = "exact-stable", alpha = 1.5, beta = 0.3`.
    #[arg(long)]
    model: Option<String>,
    #[arg(long, value_parser = parse_family)]
    family: Option<OffspringFamily>,
    #[arg(long, allow_hyphen_values = true)]
    k: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    n_list: Option<Vec<usize>>,
    #[arg(long)]
    samples: Option<u64>,
    #[arg(long)]
    renewal_paths: Option<u64>,
    #[arg(long)]
    constant_samples: Option<u64>,
    #[arg(long)]
    kernel_samples: Option<u64>,
    #[arg(long)]
    j_max: Option<usize>,
    #[arg(long)]
    n_max: Option<usize>,
    #[arg(long)]
    m_max: Option<usize>,
    #[arg(long)]
    theta_frac: Option<f64>,
    #[arg(long)]
    lanes: Option<usize>,
    /// Run lanes sequentially (results are identical).
    #[arg(long)]
    serial: bool,
    #[arg(long, env = "BPRE_OUTPUT_DIR")]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
}

fn parse_family(s: &str) -> Result<OffspringFamily, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

impl Overrides {
    fn build(self, experiment: Option<Experiment>) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                let mut value: toml::Table = toml::from_str(&text)?;
                if let Some(e) = experiment {
                    value.insert("experiment".into(), toml::Value::String(e.name().into()));
                }
                // Seed may come from the command line, so validate later.
                let cfg: RunConfig = value.try_into()?;
                cfg
            }
            None => RunConfig { seed: None, ..RunConfig::new(experiment.context("an experiment is required")?, 0) },
        };
        if let Some(s) = self.seed {
            cfg.seed = Some(s);
        }
        if let Some(m) = &self.model {
            #[derive(serde::Deserialize)]
            struct Wrap {
                m: ModelSpec,
            }
            cfg.model = toml::from_str::<Wrap>(&format!("m = {{ {m} }}")).context("parsing --model")?.m;
        }
        if let Some(f) = self.family {
            cfg.family = f;
        }
        if let Some(k) = self.k {
            cfg.k = k;
        }
        if let Some(n) = self.n_list {
            cfg.n_list = n;
        }
        let b = &mut cfg.budgets;
        for (src, dst) in [
            (self.samples, &mut b.samples),
            (self.renewal_paths, &mut b.renewal_paths),
            (self.constant_samples, &mut b.constant_samples),
            (self.kernel_samples, &mut b.kernel_samples),
        ] {
            if let Some(v) = src {
                *dst = v;
            }
        }
        let t = &mut cfg.truncation;
        for (src, dst) in [(self.j_max, &mut t.j_max), (self.n_max, &mut t.n_max), (self.m_max, &mut t.m_max)] {
            if let Some(v) = src {
                *dst = v;
            }
        }
        if let Some(v) = self.theta_frac {
            cfg.params.theta_frac = v;
        }
        if let Some(v) = self.lanes {
            cfg.lanes = v;
        }
        if self.serial {
            cfg.parallel = false;
        }
        if let Some(d) = self.output_dir {
            cfg.output_dir = d;
        }
        if let Some(d) = self.cache_dir {
            cfg.cache_dir = Some(d);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn execute(cli: Cli) -> anyhow::Result<bool> {
    let (exp, o) = match cli.command {
        Command::Template { experiment } => {
            print!("{}", RunConfig::new(experiment, 1).to_toml());
            return Ok(true);
        }
        Command::Run { file, mut overrides } => {
            overrides.config = Some(file);
            (None, overrides)
        }
        Command::Renewal(o) => (Some(Experiment::Renewal), o),
        Command::Survival(o) => (Some(Experiment::Survival), o),
        Command::Constants(o) => (Some(Experiment::Constants), o),
        Command::Theorem1(o) => (Some(Experiment::Theorem1), o),
        Command::Theorem2(o) => (Some(Experiment::Theorem2), o),
        Command::Asymptotics(o) => (Some(Experiment::Asymptotics), o),
        Command::Meander(o) => (Some(Experiment::Meander), o),
        Command::CheckB2(o) => (Some(Experiment::CheckB2), o),
    };
    let cfg = o.build(exp)?;
    let out = run(&cfg)?;
    for n in &out.notices {
        eprintln!("notice: {n}");
    }
    for c in &out.verdict.criteria {
        println!("{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    println!("outputs in {} ({:.1}s)", cfg.output_dir.display(), out.manifest.wall_time_secs);
    Ok(out.verdict.all_pass())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
